//! Procedural synthetic video scenes with exact ground truth.
//!
//! A scene is a set of convex sprites over an analytic background. Every
//! sprite either moves with a fixed integer velocity or stays put; an optional
//! camera pan translates the whole scene (background and sprites alike). All
//! randomness comes from `SceneSpec::seed`, so a spec fully determines its
//! [`VideoSample`].

mod io;

pub use io::{read_dataset, write_dataset, DatasetEntry, Manifest, SequenceMeta, DATASET_VERSION};
pub(crate) use io::{
    read_json as read_json_file, read_png_gray8, write_json as write_json_file, write_png_gray8, write_png_rgb8,
};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackgroundKind {
    Flat,
    Gradient,
    PerlinTexture,
    Tiled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub image_height: usize,
    pub image_width: usize,
    pub num_frames: usize,
    pub num_moving: usize,
    pub num_static: usize,
    /// Inclusive range of sprite bounding-box sizes, in pixels.
    pub sprite_size_range: [usize; 2],
    /// Inclusive range of sprite speeds, in whole pixels per frame.
    pub velocity_range: [u32; 2],
    pub background_kind: BackgroundKind,
    /// Whole-scene translation per frame, `[dx, dy]`.
    pub camera_pan: [i32; 2],
    /// Vertical band (fractions of the frame height) that sprites are spawned in.
    #[serde(default = "full_band")]
    pub spawn_band: [f32; 2],
    pub seed: u64,
}

fn full_band() -> [f32; 2] {
    [0.0, 1.0]
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_height: 64,
            image_width: 96,
            num_frames: 5,
            num_moving: 2,
            num_static: 2,
            sprite_size_range: [10, 18],
            velocity_range: [1, 3],
            background_kind: BackgroundKind::PerlinTexture,
            camera_pan: [0, 0],
            spawn_band: full_band(),
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.num_frames < 2 {
            return bad(format!("num_frames must be >= 2, got {}", self.num_frames));
        }
        if self.num_moving < 1 {
            return bad("num_moving must be >= 1".into());
        }
        if self.num_moving + self.num_static > u16::MAX as usize {
            return bad("too many sprites for 16-bit instance ids".into());
        }
        let [lo, hi] = self.sprite_size_range;
        if lo == 0 || lo > hi {
            return bad(format!("sprite_size_range {:?} must be positive and ordered", self.sprite_size_range));
        }
        let [v_lo, v_hi] = self.velocity_range;
        if v_lo == 0 || v_lo > v_hi {
            return bad(format!("velocity_range {:?} must be positive and ordered", self.velocity_range));
        }
        let [b0, b1] = self.spawn_band;
        if !(0.0..1.0).contains(&b0) || !(b0 < b1 && b1 <= 1.0) {
            return bad(format!("spawn_band {:?} must satisfy 0 <= lo < hi <= 1", self.spawn_band));
        }
        let band_rows = self.band_rows();
        if hi >= self.image_width || hi >= self.image_height || hi > band_rows.1 - band_rows.0 {
            return bad(format!(
                "sprites up to {hi}px cannot fit in a {}x{} frame (spawn rows {}..{})",
                self.image_height, self.image_width, band_rows.0, band_rows.1
            ));
        }
        Ok(())
    }

    fn band_rows(&self) -> (usize, usize) {
        let h = self.image_height as f32;
        let top = (self.spawn_band[0] * h).floor() as usize;
        let bottom = ((self.spawn_band[1] * h).ceil() as usize).min(self.image_height);
        (top, bottom.max(top))
    }
}

/// A T-frame synthetic sequence with per-pixel ground truth.
///
/// Frames are stored row-major as `T x h x w x 3`, instance labels as
/// `T x h x w` (0 is background, ids start at 1), and forward flow as
/// `T x h x w x 2` in pixels per frame (`[dx, dy]`).
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub height: usize,
    pub width: usize,
    pub num_frames: usize,
    pub frames: Vec<f32>,
    pub gt_instance: Vec<u16>,
    /// `moving_flags[id - 1]` tells whether instance `id` moves.
    pub moving_flags: Vec<bool>,
    pub flow: Vec<f32>,
    pub spec: SceneSpec,
}

impl VideoSample {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.pixels() * 3;
        &self.frames[t * n..(t + 1) * n]
    }

    pub fn instances(&self, t: usize) -> &[u16] {
        let n = self.pixels();
        &self.gt_instance[t * n..(t + 1) * n]
    }

    pub fn flow_at(&self, t: usize) -> &[f32] {
        let n = self.pixels() * 2;
        &self.flow[t * n..(t + 1) * n]
    }

    pub fn num_instances(&self) -> usize {
        self.moving_flags.len()
    }

    pub fn is_moving(&self, id: u16) -> bool {
        id > 0 && self.moving_flags.get(id as usize - 1).copied().unwrap_or(false)
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Disk,
    Rect { aspect: f32 },
    Triangle,
}

#[derive(Clone, Debug)]
struct Sprite {
    shape: Shape,
    size: f32,
    origin: [f32; 2],
    velocity: [f32; 2],
    color: [f32; 3],
    stripes: Option<([f32; 3], f32)>,
}

impl Sprite {
    fn extent(&self) -> [f32; 2] {
        match self.shape {
            Shape::Rect { aspect } => [self.size, (self.size * aspect).round().max(1.0)],
            _ => [self.size, self.size],
        }
    }

    /// Local coordinates `(u, v)` are relative to the bounding-box corner.
    fn contains(&self, u: f32, v: f32) -> bool {
        let [w, h] = self.extent();
        if u < 0.0 || v < 0.0 || u >= w || v >= h {
            return false;
        }
        match self.shape {
            Shape::Disk => {
                let r = self.size / 2.0;
                let (du, dv) = (u - r, v - r);
                du * du + dv * dv <= r * r
            }
            Shape::Rect { .. } => true,
            Shape::Triangle => (u - w / 2.0).abs() <= (w / 2.0) * (v / h),
        }
    }

    fn color_at(&self, u: f32, v: f32) -> [f32; 3] {
        match self.stripes {
            Some((alt, period)) if ((u + v) / period).floor() as i64 % 2 == 1 => alt,
            _ => self.color,
        }
    }
}

#[derive(Clone, Debug)]
enum Background {
    Flat([f32; 3]),
    Gradient { top: [f32; 3], bottom: [f32; 3], height: f32 },
    Noise { low: [f32; 3], high: [f32; 3], cell: f32, salt: u64 },
    Tiled { a: [f32; 3], b: [f32; 3], tile: f32 },
}

impl Background {
    fn color(&self, x: f32, y: f32) -> [f32; 3] {
        match self {
            Background::Flat(c) => *c,
            Background::Gradient { top, bottom, height } => {
                lerp3(*top, *bottom, (y / height).clamp(0.0, 1.0))
            }
            Background::Noise { low, high, cell, salt } => {
                let n = 0.65 * value_noise(x / cell, y / cell, *salt)
                    + 0.35 * value_noise(x / (cell * 0.5), y / (cell * 0.5), salt.wrapping_add(1));
                lerp3(*low, *high, n)
            }
            Background::Tiled { a, b, tile } => {
                let parity = ((x / tile).floor() as i64 + (y / tile).floor() as i64).rem_euclid(2);
                if parity == 0 {
                    *a
                } else {
                    *b
                }
            }
        }
    }
}

fn lerp3(a: [f32; 3], b: [f32; 3], s: f32) -> [f32; 3] {
    [a[0] + (b[0] - a[0]) * s, a[1] + (b[1] - a[1]) * s, a[2] + (b[2] - a[2]) * s]
}

fn lattice(ix: i64, iy: i64, salt: u64) -> f32 {
    let mut z = (ix as u64)
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ salt;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 40) as f32 / (1u64 << 24) as f32
}

fn value_noise(x: f32, y: f32, salt: u64) -> f32 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (sx, sy) = (fx * fx * (3.0 - 2.0 * fx), fy * fy * (3.0 - 2.0 * fy));
    let (ix, iy) = (x0 as i64, y0 as i64);
    let top = lattice(ix, iy, salt) * (1.0 - sx) + lattice(ix + 1, iy, salt) * sx;
    let bot = lattice(ix, iy + 1, salt) * (1.0 - sx) + lattice(ix + 1, iy + 1, salt) * sx;
    top * (1.0 - sy) + bot * sy
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn quantize(c: f32) -> f32 {
    (c.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Low-saturation color, used for everything that is not an object.
fn muted_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    hsv(rng.random::<f32>(), rng.random_range(0.0..0.15), rng.random_range(0.3..0.7))
}

/// High-saturation color, used for sprites.
fn vivid_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    hsv(rng.random::<f32>(), rng.random_range(0.7..1.0), rng.random_range(0.65..1.0))
}

fn sample_background(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Background {
    match spec.background_kind {
        BackgroundKind::Flat => Background::Flat(muted_color(rng)),
        BackgroundKind::Gradient => Background::Gradient {
            top: muted_color(rng),
            bottom: muted_color(rng),
            height: spec.image_height as f32,
        },
        BackgroundKind::PerlinTexture => Background::Noise {
            low: muted_color(rng),
            high: muted_color(rng),
            cell: rng.random_range(6.0..14.0f32).round(),
            salt: rng.random(),
        },
        BackgroundKind::Tiled => Background::Tiled {
            a: muted_color(rng),
            b: muted_color(rng),
            tile: rng.random_range(6..=12) as f32,
        },
    }
}

fn overlap_area(a: &Sprite, b: &Sprite) -> f32 {
    let ([aw, ah], [bw, bh]) = (a.extent(), b.extent());
    let x = (a.origin[0] + aw).min(b.origin[0] + bw) - a.origin[0].max(b.origin[0]);
    let y = (a.origin[1] + ah).min(b.origin[1] + bh) - a.origin[1].max(b.origin[1]);
    x.max(0.0) * y.max(0.0)
}

fn sample_sprites(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> (Vec<Sprite>, Vec<bool>) {
    let count = spec.num_moving + spec.num_static;
    let mut moving: Vec<bool> = (0..count).map(|i| i < spec.num_moving).collect();
    moving.shuffle(rng);

    let (band_top, band_bottom) = spec.band_rows();
    let mut sprites: Vec<Sprite> = Vec::with_capacity(count);
    for &is_moving in &moving {
        let shape = match rng.random_range(0..3) {
            0 => Shape::Disk,
            1 => Shape::Rect {
                aspect: rng.random_range(0.6..1.0),
            },
            _ => Shape::Triangle,
        };
        let size = rng.random_range(spec.sprite_size_range[0]..=spec.sprite_size_range[1]) as f32;
        let color = vivid_color(rng);
        let stripes = if rng.random_bool(0.3) {
            Some((vivid_color(rng), rng.random_range(3..=5) as f32))
        } else {
            None
        };
        let velocity = if is_moving {
            let speed = rng.random_range(spec.velocity_range[0]..=spec.velocity_range[1]) as i32;
            let dx = if rng.random_bool(0.5) { speed } else { -speed };
            let dy = rng.random_range(-(speed / 2)..=speed / 2);
            [dx as f32, dy as f32]
        } else {
            [0.0, 0.0]
        };
        let mut sprite = Sprite {
            shape,
            size,
            origin: [0.0, 0.0],
            velocity,
            color,
            stripes,
        };
        let [w, h] = sprite.extent();
        let max_x = spec.image_width as f32 - w;
        let max_y = (band_bottom as f32 - h).max(band_top as f32);
        let mut best = (f32::INFINITY, [0.0, 0.0]);
        for _ in 0..24 {
            sprite.origin = [
                rng.random_range(0..=max_x as u32) as f32,
                rng.random_range(band_top as u32..=max_y as u32) as f32,
            ];
            let overlap: f32 = sprites.iter().map(|s| overlap_area(s, &sprite)).sum();
            if overlap < best.0 {
                best = (overlap, sprite.origin);
            }
            if overlap == 0.0 {
                break;
            }
        }
        sprite.origin = best.1;
        sprites.push(sprite);
    }
    (sprites, moving)
}

/// Renders the sequence described by `spec`.
pub fn generate_sequence(spec: &SceneSpec) -> Result<VideoSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let background = sample_background(spec, &mut rng);
    let (sprites, moving_flags) = sample_sprites(spec, &mut rng);

    let (h, w, frames_n) = (spec.image_height, spec.image_width, spec.num_frames);
    let pan = [spec.camera_pan[0] as f32, spec.camera_pan[1] as f32];
    let mut frames = vec![0.0f32; frames_n * h * w * 3];
    let mut gt_instance = vec![0u16; frames_n * h * w];
    let mut flow = vec![0.0f32; frames_n * h * w * 2];

    for t in 0..frames_n {
        let tf = t as f32;
        let positions: Vec<[f32; 2]> = sprites
            .iter()
            .map(|s| {
                [
                    s.origin[0] + (s.velocity[0] + pan[0]) * tf,
                    s.origin[1] + (s.velocity[1] + pan[1]) * tf,
                ]
            })
            .collect();
        for r in 0..h {
            for c in 0..w {
                let (px, py) = (c as f32 + 0.5, r as f32 + 0.5);
                let mut color = background.color(px - pan[0] * tf, py - pan[1] * tf);
                let mut label = 0u16;
                let mut motion = pan;
                // Later ids are drawn on top.
                for (i, (sprite, pos)) in sprites.iter().zip(&positions).enumerate().rev() {
                    let (u, v) = (px - pos[0], py - pos[1]);
                    if sprite.contains(u, v) {
                        color = sprite.color_at(u, v);
                        label = i as u16 + 1;
                        motion = [sprite.velocity[0] + pan[0], sprite.velocity[1] + pan[1]];
                        break;
                    }
                }
                let p = (t * h + r) * w + c;
                for ch in 0..3 {
                    frames[p * 3 + ch] = quantize(color[ch]);
                }
                gt_instance[p] = label;
                flow[p * 2] = motion[0];
                flow[p * 2 + 1] = motion[1];
            }
        }
    }

    Ok(VideoSample {
        height: h,
        width: w,
        num_frames: frames_n,
        frames,
        gt_instance,
        moving_flags,
        flow,
        spec: spec.clone(),
    })
}

/// Specs for `count` sequences sharing a template, seeded `base_seed, base_seed + 1, ...`.
pub fn spec_family(template: &SceneSpec, count: usize, base_seed: u64) -> Vec<SceneSpec> {
    (0..count)
        .map(|i| SceneSpec {
            seed: base_seed.wrapping_add(i as u64),
            ..template.clone()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_mover() -> SceneSpec {
        SceneSpec {
            image_height: 32,
            image_width: 48,
            num_frames: 4,
            num_moving: 1,
            num_static: 0,
            sprite_size_range: [8, 8],
            velocity_range: [3, 3],
            background_kind: BackgroundKind::Flat,
            camera_pan: [0, 0],
            spawn_band: [0.0, 1.0],
            seed: 11,
        }
    }

    #[test]
    fn single_mover_flow_is_velocity_on_sprite_and_zero_elsewhere() {
        let sample = generate_sequence(&one_mover()).unwrap();
        let flow = sample.flow_at(0);
        let labels = sample.instances(0);
        let first = labels.iter().position(|&l| l == 1).unwrap();
        let v = (flow[first * 2], flow[first * 2 + 1]);
        assert_eq!(v.0.abs(), 3.0);
        assert!(v.1.abs() <= 1.0);
        for (p, &l) in labels.iter().enumerate() {
            let f = (flow[p * 2], flow[p * 2 + 1]);
            if l == 1 {
                assert_eq!(f, v);
            } else {
                assert_eq!(f, (0.0, 0.0));
            }
        }
    }

    #[test]
    fn rejects_zero_movers_and_oversized_sprites() {
        let spec = SceneSpec {
            num_moving: 0,
            ..one_mover()
        };
        assert!(matches!(generate_sequence(&spec), Err(Error::InvalidSpec(_))));
        let spec = SceneSpec {
            sprite_size_range: [8, 40],
            ..one_mover()
        };
        assert!(matches!(generate_sequence(&spec), Err(Error::InvalidSpec(_))));
        let spec = SceneSpec {
            num_frames: 1,
            ..one_mover()
        };
        assert!(generate_sequence(&spec).is_err());
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let spec = SceneSpec {
            num_static: 3,
            background_kind: BackgroundKind::PerlinTexture,
            ..one_mover()
        };
        let a = generate_sequence(&spec).unwrap();
        let b = generate_sequence(&spec).unwrap();
        assert_eq!(a, b);
        let c = generate_sequence(&SceneSpec { seed: 12, ..spec }).unwrap();
        assert_ne!(a.frames, c.frames);
    }

    #[test]
    fn static_sprites_keep_their_pixels() {
        let spec = SceneSpec {
            num_static: 2,
            seed: 5,
            ..one_mover()
        };
        let sample = generate_sequence(&spec).unwrap();
        for id in 1..=sample.num_instances() as u16 {
            if sample.is_moving(id) {
                continue;
            }
            let first: Vec<usize> = (0..sample.pixels()).filter(|&p| sample.instances(0)[p] == id).collect();
            assert!(!first.is_empty());
            for t in 1..sample.num_frames {
                // Visible pixels of a static sprite can only shrink through occlusion.
                for p in 0..sample.pixels() {
                    if sample.instances(t)[p] == id {
                        assert!(first.contains(&p));
                    }
                }
            }
        }
    }

    #[test]
    fn every_background_kind_renders_in_unit_range() {
        for kind in [
            BackgroundKind::Flat,
            BackgroundKind::Gradient,
            BackgroundKind::PerlinTexture,
            BackgroundKind::Tiled,
        ] {
            let spec = SceneSpec {
                background_kind: kind,
                camera_pan: [1, 0],
                num_static: 2,
                ..one_mover()
            };
            let sample = generate_sequence(&spec).unwrap();
            assert!(sample.frames.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn camera_pan_is_added_to_every_flow_vector() {
        let spec = SceneSpec {
            camera_pan: [2, -1],
            background_kind: BackgroundKind::Tiled,
            ..one_mover()
        };
        let sample = generate_sequence(&spec).unwrap();
        let flow = sample.flow_at(1);
        for (p, &l) in sample.instances(1).iter().enumerate() {
            if l == 0 {
                assert_eq!((flow[p * 2], flow[p * 2 + 1]), (2.0, -1.0));
            } else {
                assert_ne!((flow[p * 2], flow[p * 2 + 1]), (2.0, -1.0));
            }
        }
    }

    #[test]
    fn spawn_band_restricts_initial_rows() {
        let spec = SceneSpec {
            image_height: 48,
            num_static: 4,
            spawn_band: [0.5, 1.0],
            ..one_mover()
        };
        let sample = generate_sequence(&spec).unwrap();
        for (p, &l) in sample.instances(0).iter().enumerate() {
            if l > 0 {
                assert!(p / sample.width >= 24);
            }
        }
    }
}
