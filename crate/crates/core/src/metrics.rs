//! Permutation-invariant segmentation scores.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ground-truth and predicted label maps of one frame.
#[derive(Clone, Copy, Debug)]
pub struct SegmentationPair<'a> {
    /// 0 is background, positive values are instances.
    pub gt: &'a [u16],
    /// Slot indices; `background_label` marks the background class.
    pub pred: &'a [u16],
    pub background_label: u16,
}

impl<'a> SegmentationPair<'a> {
    pub fn new(gt: &'a [u16], pred: &'a [u16]) -> Result<Self> {
        if gt.len() != pred.len() {
            return Err(Error::Shape(format!("gt has {} labels, pred has {}", gt.len(), pred.len())));
        }
        if gt.is_empty() {
            return Err(Error::Empty("segmentation pair".into()));
        }
        Ok(Self {
            gt,
            pred,
            background_label: 0,
        })
    }

    pub fn with_background(mut self, label: u16) -> Self {
        self.background_label = label;
        self
    }
}

fn pairs(n: u64) -> f64 {
    (n * n.saturating_sub(1) / 2) as f64
}

/// Adjusted Rand index from the contingency table.
///
/// Two single-cluster labelings score 1.0.
pub fn ari<A, B>(gt: &[A], pred: &[B]) -> Result<f64>
where
    A: Copy + Eq + std::hash::Hash,
    B: Copy + Eq + std::hash::Hash,
{
    if gt.len() != pred.len() {
        return Err(Error::Shape(format!("{} vs {} labels", gt.len(), pred.len())));
    }
    if gt.is_empty() {
        return Err(Error::Empty("ari of empty labelings".into()));
    }
    let mut table: HashMap<(A, B), u64> = HashMap::new();
    let mut rows: HashMap<A, u64> = HashMap::new();
    let mut cols: HashMap<B, u64> = HashMap::new();
    for (&a, &b) in gt.iter().zip(pred) {
        *table.entry((a, b)).or_default() += 1;
        *rows.entry(a).or_default() += 1;
        *cols.entry(b).or_default() += 1;
    }
    if rows.len() == 1 && cols.len() == 1 {
        return Ok(1.0);
    }
    let index: f64 = table.values().map(|&n| pairs(n)).sum();
    let sum_rows: f64 = rows.values().map(|&n| pairs(n)).sum();
    let sum_cols: f64 = cols.values().map(|&n| pairs(n)).sum();
    let expected = sum_rows * sum_cols / pairs(gt.len() as u64);
    let max_index = 0.5 * (sum_rows + sum_cols);
    let denom = max_index - expected;
    if denom == 0.0 {
        // Both labelings are all singletons.
        return Ok(1.0);
    }
    Ok((index - expected) / denom)
}

/// ARI over ground-truth foreground pixels; `None` when the frame has none.
pub fn fg_ari(pair: &SegmentationPair<'_>) -> Option<f64> {
    let (gt, pred): (Vec<u16>, Vec<u16>) = pair
        .gt
        .iter()
        .zip(pair.pred)
        .filter(|(&g, _)| g > 0)
        .map(|(&g, &p)| (g, p))
        .unzip();
    if gt.is_empty() {
        return None;
    }
    ari(&gt, &pred).ok()
}

/// ARI over all pixels, with the ground-truth background as one cluster.
pub fn all_ari(pair: &SegmentationPair<'_>) -> f64 {
    ari(pair.gt, pair.pred).expect("pair validated on construction")
}

fn iou(a: impl Iterator<Item = (bool, bool)>) -> f64 {
    let (inter, union) = a.fold((0usize, 0usize), |(i, u), (x, y)| (i + (x && y) as usize, u + (x || y) as usize));
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Jaccard scores of the binarized foreground and background classes.
pub fn jaccard_fg_bg(pair: &SegmentationPair<'_>) -> (f64, f64) {
    let bg = pair.background_label;
    let both = || pair.gt.iter().zip(pair.pred).map(move |(&g, &p)| (g > 0, p != bg));
    let j_fg = iou(both());
    let j_bg = iou(both().map(|(g, p)| (!g, !p)));
    (j_fg, j_bg)
}

/// Intersection over union of two binary masks.
pub fn jaccard(a: &[bool], b: &[bool]) -> f64 {
    iou(a.iter().copied().zip(b.iter().copied()))
}

/// The most frequent predicted label; ties go to the smallest id.
pub fn baseline_background_guess(pred: &[u16]) -> Option<u16> {
    let mut counts: HashMap<u16, usize> = HashMap::new();
    for &p in pred {
        *counts.entry(p).or_default() += 1;
    }
    counts
        .into_iter()
        .max_by(|(la, ca), (lb, cb)| ca.cmp(cb).then(lb.cmp(la)))
        .map(|(label, _)| label)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub sequence: usize,
    pub frame: usize,
    /// `None` when the frame has no ground-truth foreground.
    pub fg_ari: Option<f64>,
    pub all_ari: f64,
    pub jaccard_fg: f64,
    pub jaccard_bg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fg_ari: f64,
    pub all_ari: f64,
    pub jaccard_fg: f64,
    pub jaccard_bg: f64,
    /// Frames skipped by fg-ARI because they have no foreground.
    pub skipped_fg_frames: usize,
    /// Set when the background class was guessed as the largest segment.
    pub largest_segment_background: bool,
    pub frames: Vec<FrameScore>,
}

impl MetricReport {
    pub fn from_frames(frames: Vec<FrameScore>, largest_segment_background: bool) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Empty("no frames were scored".into()));
        }
        let mean = |xs: Vec<f64>| if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 };
        let fg: Vec<f64> = frames.iter().filter_map(|f| f.fg_ari).collect();
        Ok(Self {
            skipped_fg_frames: frames.len() - fg.len(),
            fg_ari: mean(fg),
            all_ari: mean(frames.iter().map(|f| f.all_ari).collect()),
            jaccard_fg: mean(frames.iter().map(|f| f.jaccard_fg).collect()),
            jaccard_bg: mean(frames.iter().map(|f| f.jaccard_bg).collect()),
            largest_segment_background,
            frames,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("sequence,frame,fg_ari,all_ari,j_fg,j_bg\n");
        for f in &self.frames {
            let fg = f.fg_ari.map_or_else(String::new, |v| format!("{v:.6}"));
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6}\n",
                f.sequence, f.frame, fg, f.all_ari, f.jaccard_fg, f.jaccard_bg
            ));
        }
        out
    }
}

/// Scores one frame.
pub fn score_frame(sequence: usize, frame: usize, pair: &SegmentationPair<'_>) -> FrameScore {
    let (jaccard_fg, jaccard_bg) = jaccard_fg_bg(pair);
    FrameScore {
        sequence,
        frame,
        fg_ari: fg_ari(pair),
        all_ari: all_ari(pair),
        jaccard_fg,
        jaccard_bg,
    }
}
