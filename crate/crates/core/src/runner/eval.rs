use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{baseline_background_guess, score_frame, MetricReport, SegmentationPair};
use crate::model::{image_batch, predict_segmentation, Model};
use crate::scenegen::VideoSample;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Consecutive non-overlapping windows of the training clip length.
    #[default]
    Windowed,
    /// Every frame on its own, state reset in between.
    PerFrame,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "windowed" => Ok(EvalMode::Windowed),
            "per_frame" => Ok(EvalMode::PerFrame),
            other => Err(Error::InvalidConfig(format!("unknown eval mode {other:?}"))),
        }
    }
}

/// Which predicted label counts as background when scoring Jaccard.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackgroundRule {
    Reserved(u16),
    /// The largest predicted segment of each frame.
    LargestSegment,
}

/// Anything that turns a window of frames into label maps.
pub trait Segmenter {
    fn background(&self) -> BackgroundRule;

    /// Label maps for frames `start..start + len` of `sample`, which is
    /// sequence `sequence` of the evaluation set. State starts fresh.
    fn segment(&self, sample: &VideoSample, sequence: usize, start: usize, len: usize) -> Result<Vec<Vec<u16>>>;
}

/// A trained model. Initial object slots are drawn from a generator seeded
/// by (seed, sequence, window start) so evaluation is reproducible.
pub struct ModelSegmenter<'a> {
    pub model: &'a Model<f32>,
    pub seed: u64,
}

impl Segmenter for ModelSegmenter<'_> {
    fn background(&self) -> BackgroundRule {
        if self.model.config.background_slot {
            BackgroundRule::Reserved(0)
        } else {
            BackgroundRule::LargestSegment
        }
    }

    fn segment(&self, sample: &VideoSample, sequence: usize, start: usize, len: usize) -> Result<Vec<Vec<u16>>> {
        let (h, w) = (sample.height, sample.width);
        let grid = self.model.config.grid(h, w)?;
        let frames: Vec<_> = (start..start + len).map(|t| image_batch(&[sample.frame(t)], h, w)).collect();
        let stream = self.seed ^ ((sequence as u64) << 32 | start as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(stream);
        let noise = self.model.sample_slot_noise(1, &mut rng);
        let maps = self.model.infer(&frames, noise)?;
        let slots = self.model.config.total_slots();
        Ok(maps
            .iter()
            .map(|m| predict_segmentation(&m.data, slots, grid, h, w))
            .collect())
    }
}

/// Predicts the ground truth exactly.
pub struct OracleSegmenter;

impl Segmenter for OracleSegmenter {
    fn background(&self) -> BackgroundRule {
        BackgroundRule::Reserved(0)
    }

    fn segment(&self, sample: &VideoSample, _: usize, start: usize, len: usize) -> Result<Vec<Vec<u16>>> {
        Ok((start..start + len).map(|t| sample.instances(t).to_vec()).collect())
    }
}

/// Predicts one label everywhere.
pub struct ConstantSegmenter(pub u16);

impl Segmenter for ConstantSegmenter {
    fn background(&self) -> BackgroundRule {
        BackgroundRule::Reserved(0)
    }

    fn segment(&self, sample: &VideoSample, _: usize, _: usize, len: usize) -> Result<Vec<Vec<u16>>> {
        Ok(vec![vec![self.0; sample.pixels()]; len])
    }
}

/// Scores `segmenter` on every frame of `data`. In windowed mode frames are
/// processed in consecutive windows of `window` frames (the last one may be
/// shorter); in per-frame mode each frame is its own window.
pub fn evaluate(segmenter: &dyn Segmenter, data: &[VideoSample], mode: EvalMode, window: usize) -> Result<MetricReport> {
    if window == 0 {
        return Err(Error::InvalidConfig("evaluation window must be at least 1".into()));
    }
    let window = match mode {
        EvalMode::Windowed => window,
        EvalMode::PerFrame => 1,
    };
    let rule = segmenter.background();
    let mut scores = Vec::new();
    for (sequence, sample) in data.iter().enumerate() {
        let mut start = 0;
        while start < sample.num_frames {
            let len = window.min(sample.num_frames - start);
            let labels = segmenter.segment(sample, sequence, start, len)?;
            if labels.len() != len {
                return Err(Error::Shape(format!("segmenter returned {} frames for {len}", labels.len())));
            }
            for (offset, pred) in labels.iter().enumerate() {
                let t = start + offset;
                let pair = SegmentationPair::new(sample.instances(t), pred)?;
                let background = match rule {
                    BackgroundRule::Reserved(label) => label,
                    BackgroundRule::LargestSegment => baseline_background_guess(pred).unwrap_or(0),
                };
                scores.push(score_frame(sequence, t, &pair.with_background(background)));
            }
            start += len;
        }
    }
    MetricReport::from_frames(scores, rule == BackgroundRule::LargestSegment)
}

/// Loads a checkpoint and evaluates it. The window defaults to the training
/// clip length recorded in the checkpoint, or 5 when absent.
pub fn evaluate_checkpoint(
    path: impl AsRef<Path>,
    data: &[VideoSample],
    mode: EvalMode,
    window: Option<usize>,
    seed: u64,
) -> Result<MetricReport> {
    let (model, info) = Model::<f32>::load(path)?;
    let window = window
        .or_else(|| info.context.get("frames_per_clip")?.as_u64().map(|t| t as usize))
        .unwrap_or(5);
    evaluate(&ModelSegmenter { model: &model, seed }, data, mode, window)
}
