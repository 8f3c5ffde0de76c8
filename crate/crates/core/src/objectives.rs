//! Training objectives: mask-to-slot matching and the loss terms.
//!
//! Every loss returns its value together with the gradient with respect to
//! the attention values it was given, so the model only has to push those
//! gradients back through its own graph. Attention maps for one frame are
//! `N x S` row-major (pixel-major, slot-minor); column 0 is the background
//! slot when the model has one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion_cues::BinaryMask;

pub const DEFAULT_LOG_EPSILON: f64 = 1e-7;
pub const DEFAULT_ALPHA: f64 = 0.2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    #[default]
    Full,
    /// Plain BCE pushing the non-moving region into the background slot.
    NonmovingBg,
    /// Regularization over the whole foreground map instead of unlabeled pixels.
    FullMapReg,
    /// Mask supervision without the object-size weight.
    UnweightedBce,
    /// No reserved background slot and no foreground/background term.
    NoBgSlot,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] = [
        AblationMode::Full,
        AblationMode::NonmovingBg,
        AblationMode::FullMapReg,
        AblationMode::UnweightedBce,
        AblationMode::NoBgSlot,
    ];

    pub fn uses_background_slot(self) -> bool {
        self != AblationMode::NoBgSlot
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::NonmovingBg => "nonmoving_bg",
            AblationMode::FullMapReg => "full_map_reg",
            AblationMode::UnweightedBce => "unweighted_bce",
            AblationMode::NoBgSlot => "no_bg_slot",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub log_epsilon: f64,
    pub ablation_mode: AblationMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            log_epsilon: DEFAULT_LOG_EPSILON,
            ablation_mode: AblationMode::Full,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.log_epsilon > 0.0 && self.log_epsilon < 1.0) {
            return Err(Error::InvalidConfig(format!("log_epsilon must be in (0, 1), got {}", self.log_epsilon)));
        }
        Ok(())
    }
}

/// A scalar loss and its gradient with respect to the map it was given.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// `ln(max(x, eps))` and its derivative in `x`.
fn clamped_ln(x: f64, eps: f64) -> (f64, f64) {
    if x > eps {
        (x.ln(), 1.0 / x)
    } else {
        (eps.ln(), 0.0)
    }
}

fn check_len(what: &str, a: usize, b: usize) {
    assert_eq!(a, b, "{what}: length mismatch ({a} vs {b})");
}

/// One-class foreground loss: log-likelihood on moving pixels plus the mean
/// activation over pixels without motion, weighted by `alpha`.
pub fn nll_reg_loss(m_fg: &[bool], w_fg: &[f64], alpha: f64, eps: f64) -> ScalarGrad {
    check_len("nll_reg_loss", m_fg.len(), w_fg.len());
    let n = w_fg.len() as f64;
    let unlabeled = m_fg.iter().filter(|&&m| !m).count();
    let reg_scale = if unlabeled == 0 { 0.0 } else { alpha / unlabeled as f64 };
    let mut value = 0.0;
    let mut grad = vec![0.0; w_fg.len()];
    for (i, (&m, &w)) in m_fg.iter().zip(w_fg).enumerate() {
        if m {
            let (l, dl) = clamped_ln(w, eps);
            value -= l / n;
            grad[i] = -dl / n;
        } else {
            value += reg_scale * w;
            grad[i] = reg_scale;
        }
    }
    ScalarGrad { value, grad }
}

/// Ablation: regularize every pixel of the foreground map, labeled or not.
pub fn full_map_reg_loss(m_fg: &[bool], w_fg: &[f64], alpha: f64, eps: f64) -> ScalarGrad {
    check_len("full_map_reg_loss", m_fg.len(), w_fg.len());
    let n = w_fg.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; w_fg.len()];
    for (i, (&m, &w)) in m_fg.iter().zip(w_fg).enumerate() {
        if m {
            let (l, dl) = clamped_ln(w, eps);
            value -= l / n;
            grad[i] -= dl / n;
        }
        value += alpha * w / n;
        grad[i] += alpha / n;
    }
    ScalarGrad { value, grad }
}

fn bce_impl(m: &[bool], w: &[f64], eps: f64, size_weighted: bool) -> ScalarGrad {
    check_len("bce", m.len(), w.len());
    let n = w.len() as f64;
    let r = m.iter().filter(|&&b| b).count() as f64 / n;
    let pos_weight = if size_weighted { 2.0 - r } else { 1.0 };
    let mut value = 0.0;
    let mut grad = vec![0.0; w.len()];
    for (i, (&mi, &wi)) in m.iter().zip(w).enumerate() {
        if mi {
            let (l, dl) = clamped_ln(wi, eps);
            value -= pos_weight * l;
            grad[i] = -pos_weight * dl / n;
        } else {
            let (l, dl) = clamped_ln(1.0 - wi, eps);
            value -= l;
            grad[i] = dl / n;
        }
    }
    ScalarGrad { value: value / n, grad }
}

/// BCE whose positive term is weighted by `2 - r`, `r` being the mask's
/// foreground fraction; small objects get up to twice the weight.
pub fn weighted_bce(m: &[bool], w: &[f64], eps: f64) -> ScalarGrad {
    bce_impl(m, w, eps, true)
}

pub fn bce(m: &[bool], w: &[f64], eps: f64) -> ScalarGrad {
    bce_impl(m, w, eps, false)
}

/// Ablation: plain BCE between the non-moving region and the background map.
pub fn nonmoving_bg_loss(m_fg: &[bool], w_bg: &[f64], eps: f64) -> ScalarGrad {
    let target: Vec<bool> = m_fg.iter().map(|&m| !m).collect();
    bce(&target, w_bg, eps)
}

/// Mean of [`nll_reg_loss`] over every (moving foreground, foreground map) frame.
pub fn fgbg_loss(frames: &[(&[bool], &[f64])], alpha: f64, eps: f64) -> Result<f64> {
    if frames.is_empty() {
        return Err(Error::Empty("fg/bg loss over an empty batch".into()));
    }
    let sum: f64 = frames.iter().map(|(m, w)| nll_reg_loss(m, w, alpha, eps).value).sum();
    Ok(sum / frames.len() as f64)
}

pub fn reconstruction_loss(predicted: &[f64], target: &[f64]) -> Result<ScalarGrad> {
    if predicted.len() != target.len() {
        return Err(Error::Shape(format!(
            "reconstruction has {} values, target has {}",
            predicted.len(),
            target.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::Empty("reconstruction".into()));
    }
    let n = predicted.len() as f64;
    let mut value = 0.0;
    let grad = predicted
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p - t;
            value += d * d;
            2.0 * d / n
        })
        .collect();
    Ok(ScalarGrad { value: value / n, grad })
}

/// Minimum-cost assignment of every row to a distinct column, `rows <= cols`.
///
/// `cost` is row-major `rows x cols`. Returns the column of each row.
pub fn hungarian(cost: &[f64], rows: usize, cols: usize) -> Vec<usize> {
    assert!(rows <= cols, "hungarian needs rows <= cols");
    assert_eq!(cost.len(), rows * cols);
    assert!(cost.iter().all(|c| c.is_finite()), "costs must be finite");
    if rows == 0 {
        return Vec::new();
    }
    // Shortest augmenting paths with row/column potentials; index 0 is a sentinel.
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let reduced = cost[(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; rows];
    for j in 1..=cols {
        if owner[j] != 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    assignment
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(mask index, slot index)`, sorted by mask index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_masks: Vec<usize>,
    pub total_cost: f64,
}

/// Solves the assignment problem for a `masks x slots` cost matrix.
///
/// With more masks than slots, every slot receives a mask and the leftover
/// masks are reported unmatched.
pub fn assign(cost: &[f64], num_masks: usize, num_slots: usize) -> MatchResult {
    let mut slot_of = vec![None; num_masks];
    if num_masks <= num_slots {
        for (c, k) in hungarian(cost, num_masks, num_slots).into_iter().enumerate() {
            slot_of[c] = Some(k);
        }
    } else {
        let mut transposed = vec![0.0; cost.len()];
        for c in 0..num_masks {
            for k in 0..num_slots {
                transposed[k * num_masks + c] = cost[c * num_slots + k];
            }
        }
        for (k, c) in hungarian(&transposed, num_slots, num_masks).into_iter().enumerate() {
            slot_of[c] = Some(k);
        }
    }
    let mut result = MatchResult::default();
    for (c, slot) in slot_of.into_iter().enumerate() {
        match slot {
            Some(k) => {
                result.total_cost += cost[c * num_slots + k];
                result.pairs.push((c, k));
            }
            None => result.unmatched_masks.push(c),
        }
    }
    result
}

fn column(attention: &[f64], num_slots: usize, k: usize) -> Vec<f64> {
    attention.iter().skip(k).step_by(num_slots).copied().collect()
}

/// Matches motion masks (already at attention resolution) to the object
/// columns `first_object_slot..num_slots` of one frame's attention.
///
/// The cost of a pair is the mean per-pixel BCE between mask and column.
/// Slot indices in the result are absolute column indices.
pub fn match_masks_to_slots(
    masks: &[BinaryMask],
    attention: &[f64],
    num_slots: usize,
    first_object_slot: usize,
    eps: f64,
) -> Result<MatchResult> {
    if masks.is_empty() {
        return Ok(MatchResult::default());
    }
    if num_slots == 0 || attention.len() % num_slots != 0 {
        return Err(Error::Shape(format!("{} attention values for {num_slots} slots", attention.len())));
    }
    let n = attention.len() / num_slots;
    if let Some(m) = masks.iter().find(|m| m.data.len() != n) {
        return Err(Error::Shape(format!("mask has {} pixels, attention grid has {n}", m.data.len())));
    }
    let objects = num_slots.saturating_sub(first_object_slot);
    if objects == 0 {
        return Ok(MatchResult {
            unmatched_masks: (0..masks.len()).collect(),
            ..MatchResult::default()
        });
    }
    let columns: Vec<Vec<f64>> = (first_object_slot..num_slots).map(|k| column(attention, num_slots, k)).collect();
    let mut cost = Vec::with_capacity(masks.len() * objects);
    for m in masks {
        for col in &columns {
            cost.push(bce(&m.data, col, eps).value);
        }
    }
    let mut result = assign(&cost, masks.len(), objects);
    for pair in &mut result.pairs {
        pair.1 += first_object_slot;
    }
    Ok(result)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub wbce: f64,
    pub fgbg: f64,
    pub total: f64,
}

/// Attention and guidance for one frame of the batch.
#[derive(Clone, Copy, Debug)]
pub struct FrameSupervision<'a> {
    /// `N x num_slots`, row-major.
    pub attention: &'a [f64],
    /// Motion masks at attention resolution.
    pub masks: &'a [BinaryMask],
}

#[derive(Clone, Debug)]
pub struct TotalLoss {
    pub breakdown: LossBreakdown,
    /// Gradient of the total with respect to each frame's attention.
    pub attention_grads: Vec<Vec<f64>>,
    /// Gradient of the total with respect to the reconstruction.
    pub reconstruction_grad: Vec<f64>,
    pub matches: Vec<MatchResult>,
}

/// Sum of reconstruction, mask supervision and foreground/background terms
/// over a batch of frames, with gradients.
///
/// The mask term is averaged over all matched pairs of the batch and the
/// foreground/background term over frames.
pub fn total_loss(
    frames: &[FrameSupervision<'_>],
    num_slots: usize,
    reconstruction: &[f64],
    target: &[f64],
    config: &LossConfig,
) -> Result<TotalLoss> {
    config.validate()?;
    if frames.is_empty() {
        return Err(Error::Empty("total loss over an empty batch".into()));
    }
    let eps = config.log_epsilon;
    let mode = config.ablation_mode;
    let has_bg = mode.uses_background_slot();
    let first_object_slot = usize::from(has_bg);
    if num_slots <= first_object_slot {
        return Err(Error::Shape(format!("{num_slots} slots leave no object slot")));
    }

    let mse = reconstruction_loss(reconstruction, target)?;
    let mut attention_grads: Vec<Vec<f64>> = frames.iter().map(|f| vec![0.0; f.attention.len()]).collect();
    let mut matches = Vec::with_capacity(frames.len());
    for f in frames {
        matches.push(match_masks_to_slots(f.masks, f.attention, num_slots, first_object_slot, eps)?);
    }

    let num_pairs: usize = matches.iter().map(|m| m.pairs.len()).sum();
    let mut wbce = 0.0;
    if num_pairs > 0 {
        let scale = 1.0 / num_pairs as f64;
        for ((f, result), grads) in frames.iter().zip(&matches).zip(&mut attention_grads) {
            for &(c, k) in &result.pairs {
                let col = column(f.attention, num_slots, k);
                let term = match mode {
                    AblationMode::UnweightedBce => bce(&f.masks[c].data, &col, eps),
                    _ => weighted_bce(&f.masks[c].data, &col, eps),
                };
                wbce += scale * term.value;
                for (i, g) in term.grad.iter().enumerate() {
                    grads[i * num_slots + k] += scale * g;
                }
            }
        }
    }

    let mut fgbg = 0.0;
    if has_bg {
        let scale = 1.0 / frames.len() as f64;
        for (f, grads) in frames.iter().zip(&mut attention_grads) {
            let n = f.attention.len() / num_slots;
            let mut m_fg = vec![false; n];
            for m in f.masks {
                for (dst, &src) in m_fg.iter_mut().zip(&m.data) {
                    *dst |= src;
                }
            }
            let w_bg = column(f.attention, num_slots, 0);
            // d/dW_bg of a function of W_fg = 1 - W_bg flips the sign.
            let (term, sign) = match mode {
                AblationMode::NonmovingBg => (nonmoving_bg_loss(&m_fg, &w_bg, eps), 1.0),
                AblationMode::FullMapReg => {
                    let w_fg: Vec<f64> = w_bg.iter().map(|w| 1.0 - w).collect();
                    (full_map_reg_loss(&m_fg, &w_fg, config.alpha, eps), -1.0)
                }
                _ => {
                    let w_fg: Vec<f64> = w_bg.iter().map(|w| 1.0 - w).collect();
                    (nll_reg_loss(&m_fg, &w_fg, config.alpha, eps), -1.0)
                }
            };
            fgbg += scale * term.value;
            for (i, g) in term.grad.iter().enumerate() {
                grads[i * num_slots] += sign * scale * g;
            }
        }
    }

    Ok(TotalLoss {
        breakdown: LossBreakdown {
            mse: mse.value,
            wbce,
            fgbg,
            total: mse.value + wbce + fgbg,
        },
        attention_grads,
        reconstruction_grad: mse.grad,
        matches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const EPS: f64 = DEFAULT_LOG_EPSILON;

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![Vec::new()];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    /// Exhaustive minimum over injective maps from the smaller side.
    fn brute_force_min(cost: &[f64], rows: usize, cols: usize) -> f64 {
        let mut best = f64::INFINITY;
        let big = rows.max(cols);
        for perm in permutations(big) {
            let mut pairs: Vec<(usize, usize)> = if rows <= cols {
                (0..rows).map(|r| (r, perm[r])).filter(|&(_, c)| c < cols).collect()
            } else {
                (0..cols).map(|c| (perm[c], c)).filter(|&(r, _)| r < rows).collect()
            };
            if pairs.len() != rows.min(cols) {
                continue;
            }
            pairs.sort();
            let total: f64 = pairs.iter().map(|&(r, c)| cost[r * cols + c]).sum();
            best = best.min(total);
        }
        best
    }

    #[test]
    fn two_by_two_assignment() {
        let result = assign(&[1.0, 2.0, 2.0, 1.0], 2, 2);
        assert_eq!(result.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(result.total_cost, 2.0);
        assert!(result.unmatched_masks.is_empty());
    }

    #[test]
    fn hungarian_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let rows = rng.random_range(1..=5);
            let cols = rng.random_range(1..=5);
            let cost: Vec<f64> = (0..rows * cols).map(|_| rng.random::<f64>()).collect();
            let result = assign(&cost, rows, cols);
            assert_eq!(result.total_cost, brute_force_min(&cost, rows, cols));
            assert_eq!(result.pairs.len(), rows.min(cols));
            assert_eq!(result.unmatched_masks.len(), rows.saturating_sub(cols));
            let mut slots: Vec<usize> = result.pairs.iter().map(|p| p.1).collect();
            slots.sort();
            slots.dedup();
            assert_eq!(slots.len(), result.pairs.len());
        }
    }

    #[test]
    fn exact_mask_column_wins_and_background_is_never_matched() {
        let n = 16;
        let mask = BinaryMask::from_fn(4, 4, |r, c| r < 2 && c < 2);
        let num_slots = 3;
        let mut attention = vec![0.0; n * num_slots];
        for p in 0..n {
            let on = mask.data[p];
            attention[p * 3] = 0.4;
            attention[p * 3 + 1] = 0.3;
            attention[p * 3 + 2] = 0.3;
            if on {
                attention[p * 3] = 0.0;
                attention[p * 3 + 1] = 0.0;
                attention[p * 3 + 2] = 1.0;
            }
        }
        let result = match_masks_to_slots(&[mask.clone()], &attention, num_slots, 1, EPS).unwrap();
        assert_eq!(result.pairs, vec![(0, 2)]);
        let empty = match_masks_to_slots(&[], &attention, num_slots, 1, EPS).unwrap();
        assert!(empty.pairs.is_empty() && empty.unmatched_masks.is_empty());

        let masks = vec![mask.clone(), mask.clone(), mask];
        let over = match_masks_to_slots(&masks, &attention, num_slots, 1, EPS).unwrap();
        assert_eq!(over.pairs.len(), 2);
        assert_eq!(over.unmatched_masks.len(), 1);
        assert!(over.pairs.iter().all(|&(_, k)| k != 0));
    }

    #[test]
    fn nll_reg_hand_values() {
        let v = nll_reg_loss(&[true, true, false, false], &[0.9, 0.8, 0.3, 0.1], 0.2, EPS).value;
        assert!((v - 0.12213).abs() < 1e-5, "{v}");
        assert_eq!(nll_reg_loss(&[true; 4], &[1.0; 4], 0.2, EPS).value, 0.0);
        let w = [0.1, 0.5, 0.2, 0.6];
        let v = nll_reg_loss(&[false; 4], &w, 0.2, EPS).value;
        assert!((v - 0.2 / 4.0 * 1.4).abs() < 1e-15);
    }

    #[test]
    fn nll_reg_is_monotone_in_the_right_directions() {
        let m = [true, false, true, false];
        let w = [0.4, 0.4, 0.6, 0.2];
        let base = nll_reg_loss(&m, &w, 0.2, EPS).value;
        for i in 0..4 {
            let mut up = w;
            up[i] += 0.05;
            let moved = nll_reg_loss(&m, &up, 0.2, EPS).value;
            if m[i] {
                assert!(moved < base);
            } else {
                assert!(moved > base);
            }
        }
    }

    #[test]
    fn weighted_bce_hand_values_and_boundaries() {
        let v = weighted_bce(&[true, false, false, false], &[0.5; 4], EPS).value;
        assert!((v - 0.82311).abs() < 1e-5, "{v}");
        let m = [true, false, true, false];
        let w: Vec<f64> = m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let perfect = weighted_bce(&m, &w, EPS).value;
        assert!(perfect >= 0.0 && perfect <= -(1.0 - EPS).ln() + 1e-15);
        // r = 1: weight 2 - r = 1, plain positive BCE.
        let w = [0.3, 0.9, 0.5];
        let full = weighted_bce(&[true; 3], &w, EPS).value;
        assert!((full - bce(&[true; 3], &w, EPS).value).abs() < 1e-15);
        let expected = -(0.3f64.ln() + 0.9f64.ln() + 0.5f64.ln()) / 3.0;
        assert!((full - expected).abs() < 1e-15);
    }

    #[test]
    fn weighted_bce_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let n = rng.random_range(1..20);
            let m: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
            let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            assert!(weighted_bce(&m, &w, EPS).value >= 0.0);
        }
    }

    #[test]
    fn nonmoving_bg_cases() {
        let m_fg = [true, false, false, true];
        let w_bg: Vec<f64> = m_fg.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect();
        assert!(nonmoving_bg_loss(&m_fg, &w_bg, EPS).value < 1e-6);
        // m_fg = 0 everywhere: gradient only pushes W_bg up.
        let g = nonmoving_bg_loss(&[false; 3], &[0.2, 0.5, 0.7], EPS).grad;
        assert!(g.iter().all(|&x| x < 0.0));
        // N = 2, m_fg = [1, 0], W_bg = [0.25, 0.5]: targets [0, 1].
        let v = nonmoving_bg_loss(&[true, false], &[0.25, 0.5], EPS).value;
        let expected = -(0.75f64.ln() + 0.5f64.ln()) / 2.0;
        assert!((v - expected).abs() < 1e-15);
    }

    #[test]
    fn full_map_reg_cases() {
        let w = [0.1, 0.5, 0.2, 0.6];
        let none = [false; 4];
        assert_eq!(full_map_reg_loss(&none, &w, 0.2, EPS).value, nll_reg_loss(&none, &w, 0.2, EPS).value);
        assert!((full_map_reg_loss(&[true; 3], &[1.0; 3], 0.2, EPS).value - 0.2).abs() < 1e-15);

        // Difference from the one-class loss on a hand case.
        let m = [true, true, false, false, false];
        let w = [0.9, 0.7, 0.2, 0.4, 0.1];
        let alpha = 0.3;
        let labeled_mean = (0.9 + 0.7) / 2.0;
        let labeled_fraction = 2.0 / 5.0;
        let unlabeled_sum = 0.2 + 0.4 + 0.1;
        let diff = full_map_reg_loss(&m, &w, alpha, EPS).value - nll_reg_loss(&m, &w, alpha, EPS).value;
        let expected = alpha * labeled_mean * labeled_fraction + alpha * unlabeled_sum * (1.0 / 5.0 - 1.0 / 3.0);
        assert!((diff - expected).abs() < 1e-12);
    }

    #[test]
    fn fgbg_is_the_frame_mean() {
        let m1 = [true, false];
        let w1 = [0.7, 0.2];
        let m2 = [false, false];
        let w2 = [0.1, 0.3];
        let a = nll_reg_loss(&m1, &w1, 0.2, EPS).value;
        let b = nll_reg_loss(&m2, &w2, 0.2, EPS).value;
        let v = fgbg_loss(&[(&m1, &w1), (&m2, &w2)], 0.2, EPS).unwrap();
        assert!((v - (a + b) / 2.0).abs() < 1e-15);
        let same = fgbg_loss(&[(&m1, &w1), (&m1, &w1), (&m1, &w1)], 0.2, EPS).unwrap();
        assert!((same - a).abs() < 1e-15);
        assert!(fgbg_loss(&[], 0.2, EPS).is_err());

        // Independent double loop over a random B x T batch.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (b, t, n) = (3, 4, 10);
        let batch: Vec<Vec<(Vec<bool>, Vec<f64>)>> = (0..b)
            .map(|_| {
                (0..t)
                    .map(|_| {
                        let m: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
                        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
                        (m, w)
                    })
                    .collect()
            })
            .collect();
        let mut direct = 0.0;
        for seq in &batch {
            for (m, w) in seq {
                let labeled: f64 = m.iter().zip(w).filter(|(&m, _)| m).map(|(_, w)| -w.ln()).sum::<f64>() / n as f64;
                let unl: Vec<f64> = m.iter().zip(w).filter(|(&m, _)| !m).map(|(_, &w)| w).collect();
                let reg = if unl.is_empty() { 0.0 } else { 0.2 * unl.iter().sum::<f64>() / unl.len() as f64 };
                direct += labeled + reg;
            }
        }
        direct /= (b * t) as f64;
        let flat: Vec<(&[bool], &[f64])> = batch.iter().flatten().map(|(m, w)| (m.as_slice(), w.as_slice())).collect();
        assert!((fgbg_loss(&flat, 0.2, EPS).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_cases() {
        let x = [0.1, 0.2, 0.3];
        assert_eq!(reconstruction_loss(&x, &x).unwrap().value, 0.0);
        let y: Vec<f64> = x.iter().map(|v| v + 0.5).collect();
        assert!((reconstruction_loss(&x, &y).unwrap().value - 0.25).abs() < 1e-15);
        assert!(reconstruction_loss(&x, &y[..2]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<f64> = (0..500).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..500).map(|_| rng.random()).collect();
        let squares: Vec<f64> = a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).collect();
        let mean = squares.iter().sum::<f64>() / squares.len() as f64;
        assert!((reconstruction_loss(&a, &b).unwrap().value - mean).abs() < 1e-10);
    }

    fn random_attention(rng: &mut ChaCha8Rng, n: usize, slots: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(n * slots);
        for _ in 0..n {
            let logits: Vec<f64> = (0..slots).map(|_| rng.random_range(-1.0..1.0)).collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            out.extend(logits.iter().map(|l| l.exp() / z));
        }
        out
    }

    fn random_masks(rng: &mut ChaCha8Rng, count: usize) -> Vec<BinaryMask> {
        (0..count)
            .map(|_| {
                let (r0, c0) = (rng.random_range(0..3), rng.random_range(0..3));
                BinaryMask::from_fn(4, 4, move |r, c| (r0..r0 + 2).contains(&r) && (c0..c0 + 2).contains(&c))
            })
            .collect()
    }

    #[test]
    fn total_is_additive_in_every_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let slots = 4;
        let attn: Vec<Vec<f64>> = (0..3).map(|_| random_attention(&mut rng, 16, slots)).collect();
        let masks: Vec<Vec<BinaryMask>> = (0..3).map(|i| random_masks(&mut rng, i)).collect();
        let recon: Vec<f64> = (0..30).map(|_| rng.random()).collect();
        let target: Vec<f64> = (0..30).map(|_| rng.random()).collect();
        let frames: Vec<FrameSupervision<'_>> = attn
            .iter()
            .zip(&masks)
            .map(|(a, m)| FrameSupervision { attention: a, masks: m })
            .collect();
        for mode in [
            AblationMode::Full,
            AblationMode::NonmovingBg,
            AblationMode::FullMapReg,
            AblationMode::UnweightedBce,
            AblationMode::NoBgSlot,
        ] {
            let config = LossConfig {
                ablation_mode: mode,
                ..LossConfig::default()
            };
            let out = total_loss(&frames, slots, &recon, &target, &config).unwrap();
            let b = out.breakdown;
            assert!((b.total - (b.mse + b.wbce + b.fgbg)).abs() < 1e-6);
            assert!((b.mse - reconstruction_loss(&recon, &target).unwrap().value).abs() < 1e-15);
            if mode == AblationMode::NoBgSlot {
                assert_eq!(b.fgbg, 0.0);
            } else {
                for m in &out.matches {
                    assert!(m.pairs.iter().all(|&(_, k)| k != 0));
                }
            }
        }
    }

    #[test]
    fn vanishing_supervision_leaves_mse_plus_regularization() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let slots = 3;
        let attn = random_attention(&mut rng, 16, slots);
        let frames = [FrameSupervision { attention: &attn, masks: &[] }];
        let recon = [0.5, 0.25];
        let target = [0.0, 0.0];
        let out = total_loss(&frames, slots, &recon, &target, &LossConfig::default()).unwrap();
        let reg: f64 = attn.iter().step_by(slots).map(|w_bg| 1.0 - w_bg).sum::<f64>() * 0.2 / 16.0;
        assert_eq!(out.breakdown.wbce, 0.0);
        assert!((out.breakdown.fgbg - reg).abs() < 1e-12);
        assert!((out.breakdown.total - (0.15625 + reg)).abs() < 1e-12);
    }

    #[test]
    fn total_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let slots = 4;
        let attn: Vec<Vec<f64>> = (0..2).map(|_| random_attention(&mut rng, 16, slots)).collect();
        let masks: Vec<Vec<BinaryMask>> = vec![random_masks(&mut rng, 2), random_masks(&mut rng, 1)];
        let recon: Vec<f64> = (0..12).map(|_| rng.random()).collect();
        let target: Vec<f64> = (0..12).map(|_| rng.random()).collect();
        for mode in [AblationMode::Full, AblationMode::FullMapReg, AblationMode::NonmovingBg, AblationMode::UnweightedBce] {
            let config = LossConfig {
                ablation_mode: mode,
                ..LossConfig::default()
            };
            let eval = |attn: &[Vec<f64>], recon: &[f64]| {
                let frames: Vec<FrameSupervision<'_>> = attn
                    .iter()
                    .zip(&masks)
                    .map(|(a, m)| FrameSupervision { attention: a, masks: m })
                    .collect();
                total_loss(&frames, slots, recon, &target, &config).unwrap()
            };
            let out = eval(&attn, &recon);
            let h = 1e-6;
            for f in 0..attn.len() {
                for i in 0..attn[f].len() {
                    let mut plus = attn.clone();
                    plus[f][i] += h;
                    let mut minus = attn.clone();
                    minus[f][i] -= h;
                    let fd = (eval(&plus, &recon).breakdown.total - eval(&minus, &recon).breakdown.total) / (2.0 * h);
                    let g = out.attention_grads[f][i];
                    let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-8);
                    assert!(rel < 1e-4, "{mode:?} frame {f} entry {i}: {g} vs {fd}");
                }
            }
            for i in 0..recon.len() {
                let mut plus = recon.clone();
                plus[i] += h;
                let mut minus = recon.clone();
                minus[i] -= h;
                let fd = (eval(&attn, &plus).breakdown.total - eval(&attn, &minus).breakdown.total) / (2.0 * h);
                assert!((out.reconstruction_grad[i] - fd).abs() < 1e-6);
            }
        }
    }
}
