//! Browser bindings: generate a synthetic scene, derive its motion guidance
//! with optional label noise and filtering, and score the guidance as a
//! segmentation against the ground truth.

use bgslot_core::metrics::{score_frame, MetricReport, SegmentationPair};
use bgslot_core::motion_cues::{
    extract_from_sample, filter_top_tier, inject_label_noise, FlowThresholds, LabelNoise, MotionMaskSet, Provenance,
};
use bgslot_core::runner::{label_color, TrainConfig};
use bgslot_core::scenegen::{generate_sequence, BackgroundKind, VideoSample};
use wasm_bindgen::prelude::*;

fn background_kind(name: &str) -> Result<BackgroundKind, String> {
    match name {
        "flat" => Ok(BackgroundKind::Flat),
        "gradient" => Ok(BackgroundKind::Gradient),
        "perlin-texture" => Ok(BackgroundKind::PerlinTexture),
        "tiled" => Ok(BackgroundKind::Tiled),
        other => Err(format!("unknown background {other:?}")),
    }
}

fn rgba(rgb: impl Iterator<Item = [u8; 3]>) -> Vec<u8> {
    rgb.flat_map(|[r, g, b]| [r, g, b, 255]).collect()
}

/// Colour used for injected noise blobs in the guidance view.
const NOISE_COLOR: [u8; 3] = [255, 255, 255];

/// Summary scores of a segmentation over every frame of a scene.
#[wasm_bindgen]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub fg_ari: f64,
    pub all_ari: f64,
    pub jaccard_fg: f64,
    pub jaccard_bg: f64,
    pub skipped_fg_frames: usize,
}

/// One generated scene and the guidance currently derived from it.
#[wasm_bindgen]
pub struct Demo {
    sample: VideoSample,
    guidance: MotionMaskSet,
}

impl Demo {
    /// Scene of preset `preset` with the given object counts, background and
    /// horizontal camera pan. Guidance starts as the clean flow masks.
    pub fn build(
        preset: &str,
        seed: u32,
        num_moving: usize,
        num_static: usize,
        background: &str,
        pan_x: i32,
    ) -> Result<Self, String> {
        let mut spec = TrainConfig::preset(preset).map_err(|e| e.to_string())?.data.scene;
        spec.seed = u64::from(seed);
        spec.num_moving = num_moving;
        spec.num_static = num_static;
        spec.background_kind = background_kind(background)?;
        spec.camera_pan = [pan_x, 0];
        let sample = generate_sequence(&spec).map_err(|e| e.to_string())?;
        let guidance = extract_from_sample(&sample, FlowThresholds::default());
        Ok(Self { sample, guidance })
    }

    /// Re-derives the guidance from the flow, then adds noise and optionally
    /// drops masks whose centroid lies in the upper third of the frame.
    pub fn derive_guidance(&mut self, spurious_rate: f64, drop_rate: f64, seed: u32, filtered: bool) -> Result<(), String> {
        let noise = LabelNoise {
            drop_rate,
            spurious_rate,
            ..LabelNoise::default()
        };
        let mut set = extract_from_sample(&self.sample, FlowThresholds::default());
        set = inject_label_noise(&set, &noise, u64::from(seed)).map_err(|e| e.to_string())?;
        if filtered {
            set = filter_top_tier(&set, self.sample.height);
        }
        self.guidance = set;
        Ok(())
    }

    /// Guidance masks as a label map: mask `i` of the frame becomes label
    /// `i + 1`, later masks drawn over earlier ones, 0 elsewhere.
    pub fn guidance_labels(&self, t: usize) -> Vec<u16> {
        let mut labels = vec![0u16; self.sample.pixels()];
        for (i, m) in self.guidance.frames[t].iter().enumerate() {
            for (dst, &on) in labels.iter_mut().zip(&m.mask.data) {
                if on {
                    *dst = i as u16 + 1;
                }
            }
        }
        labels
    }

    /// Scores the guidance label maps as a segmentation of every frame, with
    /// label 0 as background.
    pub fn score(&self) -> Result<Scores, String> {
        let frames = (0..self.sample.num_frames)
            .map(|t| {
                let labels = self.guidance_labels(t);
                let pair = SegmentationPair::new(self.sample.instances(t), &labels).map_err(|e| e.to_string())?;
                Ok(score_frame(0, t, &pair.with_background(0)))
            })
            .collect::<Result<Vec<_>, String>>()?;
        let report = MetricReport::from_frames(frames, false).map_err(|e| e.to_string())?;
        Ok(Scores {
            fg_ari: report.fg_ari,
            all_ari: report.all_ari,
            jaccard_fg: report.jaccard_fg,
            jaccard_bg: report.jaccard_bg,
            skipped_fg_frames: report.skipped_fg_frames,
        })
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(
        preset: &str,
        seed: u32,
        num_moving: usize,
        num_static: usize,
        background: &str,
        pan_x: i32,
    ) -> Result<Demo, JsError> {
        Self::build(preset, seed, num_moving, num_static, background, pan_x).map_err(|e| JsError::new(&e))
    }

    pub fn width(&self) -> usize {
        self.sample.width
    }

    pub fn height(&self) -> usize {
        self.sample.height
    }

    pub fn num_frames(&self) -> usize {
        self.sample.num_frames
    }

    /// Input frame `t` as RGBA bytes.
    pub fn frame_rgba(&self, t: usize) -> Vec<u8> {
        let byte = |v: f32| (v * 255.0).round().clamp(0.0, 255.0) as u8;
        rgba(self.sample.frame(t).chunks_exact(3).map(|p| [byte(p[0]), byte(p[1]), byte(p[2])]))
    }

    /// Ground-truth instances of frame `t` as RGBA bytes.
    pub fn instances_rgba(&self, t: usize) -> Vec<u8> {
        rgba(self.sample.instances(t).iter().map(|&id| label_color(id)))
    }

    /// Guidance of frame `t` as RGBA bytes; injected noise is white.
    pub fn guidance_rgba(&self, t: usize) -> Vec<u8> {
        let labels = self.guidance_labels(t);
        let masks = &self.guidance.frames[t];
        rgba(labels.iter().map(|&l| match l {
            0 => label_color(0),
            l if masks[l as usize - 1].provenance == Provenance::InjectedNoise => NOISE_COLOR,
            l => label_color(l),
        }))
    }

    /// Number of guidance masks in frame `t`.
    pub fn guidance_count(&self, t: usize) -> usize {
        self.guidance.frames[t].len()
    }

    pub fn set_guidance(&mut self, spurious_rate: f64, drop_rate: f64, seed: u32, filtered: bool) -> Result<(), JsError> {
        self.derive_guidance(spurious_rate, drop_rate, seed, filtered)
            .map_err(|e| JsError::new(&e))
    }

    pub fn score_guidance(&self) -> Result<Scores, JsError> {
        self.score().map_err(|e| JsError::new(&e))
    }
}
