//! Moving-object guidance masks.
//!
//! The guidance for a frame is a list of binary masks, one per moving object.
//! They come either from ground truth or from flow (camera-compensated
//! magnitude threshold followed by connected components), can be corrupted
//! with synthetic label noise, filtered by position, and are finally pooled
//! down to the attention grid.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenegen::VideoSample;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|p| f(p / width, p % width)).collect();
        Self { height, width, data }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Mean row index of the set pixels.
    pub fn centroid_row(&self) -> Option<f64> {
        let (sum, n) = self
            .data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .fold((0usize, 0usize), |(s, n), (p, _)| (s + p / self.width, n + 1));
        (n > 0).then(|| sum as f64 / n as f64)
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Gt,
    Estimated,
    InjectedNoise,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MotionMask {
    pub mask: BinaryMask,
    pub provenance: Provenance,
}

/// Per-frame lists of motion masks for one sequence. A frame may have none.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MotionMaskSet {
    pub height: usize,
    pub width: usize,
    pub frames: Vec<Vec<MotionMask>>,
}

impl MotionMaskSet {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn total_masks(&self) -> usize {
        self.frames.iter().map(Vec::len).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MovingForeground {
    pub mask: BinaryMask,
    /// Number of pixels without motion information.
    pub unlabeled_count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowThresholds {
    pub min_magnitude: f32,
    pub min_area: usize,
}

impl Default for FlowThresholds {
    fn default() -> Self {
        Self {
            min_magnitude: 0.5,
            min_area: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelNoise {
    pub drop_rate: f64,
    /// Expected number of spurious blobs per frame.
    pub spurious_rate: f64,
    /// Inclusive range of blob diameters, in pixels.
    pub blob_size_range: [usize; 2],
}

impl Default for LabelNoise {
    fn default() -> Self {
        Self {
            drop_rate: 0.0,
            spurious_rate: 0.0,
            blob_size_range: [6, 14],
        }
    }
}

impl LabelNoise {
    pub fn is_clean(&self) -> bool {
        self.drop_rate == 0.0 && self.spurious_rate == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.drop_rate) {
            return Err(Error::InvalidConfig(format!("drop_rate {} outside [0, 1]", self.drop_rate)));
        }
        if !(self.spurious_rate >= 0.0 && self.spurious_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("spurious_rate {} must be >= 0", self.spurious_rate)));
        }
        let [lo, hi] = self.blob_size_range;
        if lo == 0 || lo > hi {
            return Err(Error::InvalidConfig(format!("blob_size_range {:?}", self.blob_size_range)));
        }
        Ok(())
    }
}

fn median(values: &mut [f32]) -> f32 {
    values.sort_by(f32::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// 4-connected components of `on`, each returned as a list of pixel indices.
pub fn connected_components(on: &[bool], height: usize, width: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; on.len()];
    let mut components = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..on.len() {
        if !on[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(p) = queue.pop_front() {
            pixels.push(p);
            let (r, c) = (p / width, p % width);
            let mut visit = |q: usize| {
                if on[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if r > 0 {
                visit(p - width);
            }
            if r + 1 < height {
                visit(p + width);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < width {
                visit(p + 1);
            }
        }
        components.push(pixels);
    }
    components
}

/// Moving-object masks for one flow frame (`h x w x 2`).
pub fn extract_frame_masks(flow: &[f32], height: usize, width: usize, thresholds: FlowThresholds) -> Vec<MotionMask> {
    let n = height * width;
    assert_eq!(flow.len(), n * 2, "flow frame must be h x w x 2");
    let mut us: Vec<f32> = flow.iter().step_by(2).copied().collect();
    let mut vs: Vec<f32> = flow.iter().skip(1).step_by(2).copied().collect();
    let (mu, mv) = (median(&mut us), median(&mut vs));
    let moving: Vec<bool> = (0..n)
        .map(|p| {
            let (du, dv) = (flow[2 * p] - mu, flow[2 * p + 1] - mv);
            (du * du + dv * dv).sqrt() >= thresholds.min_magnitude
        })
        .collect();
    connected_components(&moving, height, width)
        .into_iter()
        .filter(|pixels| pixels.len() >= thresholds.min_area)
        .map(|pixels| {
            let mut mask = BinaryMask::zeros(height, width);
            for p in pixels {
                mask.data[p] = true;
            }
            MotionMask {
                mask,
                provenance: Provenance::Estimated,
            }
        })
        .collect()
}

pub fn extract_motion_masks(
    flow: &[f32],
    height: usize,
    width: usize,
    num_frames: usize,
    thresholds: FlowThresholds,
) -> MotionMaskSet {
    let n = height * width * 2;
    MotionMaskSet {
        height,
        width,
        frames: (0..num_frames)
            .map(|t| extract_frame_masks(&flow[t * n..(t + 1) * n], height, width, thresholds))
            .collect(),
    }
}

pub fn extract_from_sample(sample: &VideoSample, thresholds: FlowThresholds) -> MotionMaskSet {
    extract_motion_masks(&sample.flow, sample.height, sample.width, sample.num_frames, thresholds)
}

/// One mask per visible moving instance, taken straight from the labels.
pub fn gt_motion_masks(sample: &VideoSample) -> MotionMaskSet {
    let frames = (0..sample.num_frames)
        .map(|t| {
            let labels = sample.instances(t);
            (1..=sample.num_instances() as u16)
                .filter(|&id| sample.is_moving(id))
                .filter_map(|id| {
                    let data: Vec<bool> = labels.iter().map(|&l| l == id).collect();
                    data.iter().any(|&b| b).then(|| MotionMask {
                        mask: BinaryMask {
                            height: sample.height,
                            width: sample.width,
                            data,
                        },
                        provenance: Provenance::Gt,
                    })
                })
                .collect()
        })
        .collect();
    MotionMaskSet {
        height: sample.height,
        width: sample.width,
        frames,
    }
}

/// Pixelwise union of the masks of one frame.
pub fn fuse_foreground(masks: &[MotionMask], height: usize, width: usize) -> Result<MovingForeground> {
    let mut fg = BinaryMask::zeros(height, width);
    for m in masks {
        if m.mask.height != height || m.mask.width != width {
            return Err(Error::Shape(format!(
                "mask is {}x{}, expected {height}x{width}",
                m.mask.height, m.mask.width
            )));
        }
        for (dst, &src) in fg.data.iter_mut().zip(&m.mask.data) {
            *dst |= src;
        }
    }
    let unlabeled_count = fg.data.iter().filter(|&&b| !b).count();
    Ok(MovingForeground {
        mask: fg,
        unlabeled_count,
    })
}

fn disk_blob(height: usize, width: usize, rng: &mut ChaCha8Rng, size: [usize; 2]) -> BinaryMask {
    let diameter = rng.random_range(size[0]..=size[1]) as f64;
    let cy = rng.random_range(0.0..height as f64);
    let cx = rng.random_range(0.0..width as f64);
    let r2 = (diameter / 2.0).powi(2);
    let mut mask = BinaryMask::from_fn(height, width, |r, c| {
        let (dy, dx) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
        dy * dy + dx * dx <= r2
    });
    if mask.is_empty() {
        let (r, c) = ((cy as usize).min(height - 1), (cx as usize).min(width - 1));
        mask.data[r * width + c] = true;
    }
    mask
}

/// Drops each mask with probability `drop_rate` and adds Poisson-many random
/// disk blobs per frame, tagged [`Provenance::InjectedNoise`].
pub fn inject_label_noise(set: &MotionMaskSet, noise: &LabelNoise, seed: u64) -> Result<MotionMaskSet> {
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let poisson = (noise.spurious_rate > 0.0)
        .then(|| Poisson::new(noise.spurious_rate).map_err(|e| Error::InvalidConfig(e.to_string())))
        .transpose()?;
    let frames = set
        .frames
        .iter()
        .map(|masks| {
            let mut out: Vec<MotionMask> = masks
                .iter()
                .filter(|_| noise.drop_rate == 0.0 || !rng.random_bool(noise.drop_rate))
                .cloned()
                .collect();
            let extra = poisson.as_ref().map_or(0, |p| p.sample(&mut rng) as usize);
            for _ in 0..extra {
                out.push(MotionMask {
                    mask: disk_blob(set.height, set.width, &mut rng, noise.blob_size_range),
                    provenance: Provenance::InjectedNoise,
                });
            }
            out
        })
        .collect();
    Ok(MotionMaskSet {
        height: set.height,
        width: set.width,
        frames,
    })
}

/// Removes every mask whose centroid lies in the upper third of the frame.
pub fn filter_top_tier(set: &MotionMaskSet, image_height: usize) -> MotionMaskSet {
    let limit = image_height as f64 / 3.0;
    MotionMaskSet {
        height: set.height,
        width: set.width,
        frames: set
            .frames
            .iter()
            .map(|masks| {
                masks
                    .iter()
                    .filter(|m| m.mask.centroid_row().is_some_and(|row| row >= limit))
                    .cloned()
                    .collect()
            })
            .collect(),
    }
}

/// Area-average pooling to `out_h x out_w`, then threshold at 0.5 (ties set).
pub fn resize_to_attention(mask: &BinaryMask, out_h: usize, out_w: usize) -> Result<BinaryMask> {
    if out_h == 0 || out_w == 0 || mask.height % out_h != 0 || mask.width % out_w != 0 {
        return Err(Error::Shape(format!(
            "{}x{} is not an integer multiple of {out_h}x{out_w}",
            mask.height, mask.width
        )));
    }
    let (fy, fx) = (mask.height / out_h, mask.width / out_w);
    let cell = (fy * fx) as f64;
    Ok(BinaryMask::from_fn(out_h, out_w, |r, c| {
        let mut count = 0usize;
        for y in r * fy..(r + 1) * fy {
            for x in c * fx..(c + 1) * fx {
                count += mask.get(y, x) as usize;
            }
        }
        count as f64 / cell >= 0.5
    }))
}

/// Resizes every mask of the set; masks that vanish at the lower resolution
/// are dropped.
pub fn resize_set(set: &MotionMaskSet, out_h: usize, out_w: usize) -> Result<MotionMaskSet> {
    let frames = set
        .frames
        .iter()
        .map(|masks| {
            masks
                .iter()
                .map(|m| {
                    resize_to_attention(&m.mask, out_h, out_w).map(|mask| MotionMask {
                        mask,
                        provenance: m.provenance,
                    })
                })
                .filter(|m| m.as_ref().map_or(true, |m| !m.mask.is_empty()))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MotionMaskSet {
        height: out_h,
        width: out_w,
        frames,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskSidecar {
    version: u32,
    height: usize,
    width: usize,
    provenance: Vec<Vec<Provenance>>,
}

/// Writes `mask_{t}_{c}.png` (8-bit, 0/255) plus a `masks.json` sidecar.
pub fn write_mask_set(set: &MotionMaskSet, directory: impl AsRef<Path>) -> Result<()> {
    let dir = directory.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, masks) in set.frames.iter().enumerate() {
        for (c, m) in masks.iter().enumerate() {
            let bytes: Vec<u8> = m.mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
            crate::scenegen::write_png_gray8(&dir.join(format!("mask_{t:04}_{c:03}.png")), set.width, set.height, &bytes)?;
        }
    }
    let sidecar = MaskSidecar {
        version: 1,
        height: set.height,
        width: set.width,
        provenance: set
            .frames
            .iter()
            .map(|masks| masks.iter().map(|m| m.provenance).collect())
            .collect(),
    };
    crate::scenegen::write_json_file(&dir.join("masks.json"), &sidecar)
}

pub fn read_mask_set(directory: impl AsRef<Path>) -> Result<MotionMaskSet> {
    let dir = directory.as_ref();
    let sidecar_path = dir.join("masks.json");
    let sidecar: MaskSidecar = crate::scenegen::read_json_file(&sidecar_path)?;
    if sidecar.version != 1 {
        return Err(Error::corrupt(&sidecar_path, format!("mask set version {}", sidecar.version)));
    }
    let frames = sidecar
        .provenance
        .iter()
        .enumerate()
        .map(|(t, provs)| {
            provs
                .iter()
                .enumerate()
                .map(|(c, &provenance)| {
                    let path = dir.join(format!("mask_{t:04}_{c:03}.png"));
                    let bytes = crate::scenegen::read_png_gray8(&path, sidecar.width, sidecar.height)?;
                    Ok(MotionMask {
                        mask: BinaryMask {
                            height: sidecar.height,
                            width: sidecar.width,
                            data: bytes.iter().map(|&b| b > 127).collect(),
                        },
                        provenance,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MotionMaskSet {
        height: sidecar.height,
        width: sidecar.width,
        frames,
    })
}
