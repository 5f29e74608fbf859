//! Concept-assignment math as tape operations over batched tensors.
//!
//! Shapes: features `[N,D,H,W]`, concepts `[K,D]`, smoothing `[K]`,
//! occurrence probabilities `[N,K,H·W]`, concept features `[N,K,D]`.

use crate::error::{shape_err, Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Added inside the log of the presence regularizer.
pub const PRESENCE_DELTA: f64 = 1e-5;

/// Pooled residuals shorter than this become zero rows.
pub const ZERO_ROW_EPS: f64 = 1e-8;

/// Tolerance on presence values outside `[0, 1]`.
const PRESENCE_SLACK: f64 = 1e-6;

/// `(s_hw − c_j) / α_j` for every sample, concept, position: `[N,K,H·W,D]`.
pub fn scaled_residuals(tape: &mut Tape, features: Var, concepts: Var, alpha: Var) -> Result<Var> {
    let fs = tape.shape(features).to_vec();
    let cs = tape.shape(concepts).to_vec();
    let k = cs[0];
    if fs.len() != 4 || cs.len() != 2 || fs[1] != cs[1] || tape.shape(alpha) != [k] {
        return Err(shape_err(
            "scaled_residuals",
            format!("features {fs:?}, concepts {cs:?}, smoothing {:?}", tape.shape(alpha)),
        ));
    }
    let (n, d, p) = (fs[0], fs[1], fs[2] * fs[3]);
    let flat = tape.reshape(features, &[n, d, p])?;
    let s = tape.permute(flat, &[0, 2, 1])?;
    let s = tape.reshape(s, &[n, 1, p, d])?;
    let c = tape.reshape(concepts, &[1, k, 1, d])?;
    let a = tape.reshape(alpha, &[1, k, 1, 1])?;
    let diff = tape.sub(s, c)?;
    tape.div(diff, a)
}

/// Softmax over concepts of `−‖(s_hw − c_j)/α_j‖² / 2`: `[N,K,H·W]`.
pub fn occurrence_from_residuals(tape: &mut Tape, residuals: Var) -> Result<Var> {
    let sq = tape.square(residuals);
    let dist = tape.sum_axis(sq, 3, false)?;
    let logits = tape.scale(dist, -0.5);
    tape.softmax(logits, 1)
}

/// Probability-weighted mean residual per concept, scaled to unit length
/// (zero rows stay zero): `[N,K,D]`.
pub fn pool_from_residuals(tape: &mut Tape, residuals: Var, probs: Var) -> Result<Var> {
    let rs = tape.shape(residuals).to_vec();
    let ps = tape.shape(probs).to_vec();
    if rs.len() != 4 || ps != rs[..3] {
        return Err(shape_err(
            "pool_concept_features",
            format!("residuals {rs:?}, probs {ps:?}"),
        ));
    }
    let (n, k, p) = (rs[0], rs[1], rs[2]);
    let w = tape.reshape(probs, &[n, k, p, 1])?;
    let weighted = tape.mul(w, residuals)?;
    let num = tape.sum_axis(weighted, 2, false)?;
    let den = tape.sum_axis(probs, 2, true)?;
    let t = tape.div(num, den)?;
    Ok(tape.normalize_rows(t, ZERO_ROW_EPS))
}

/// Occurrence probabilities `[N,K,H·W]` from features and a concept bank.
pub fn occurrence_probs(tape: &mut Tape, features: Var, concepts: Var, alpha: Var) -> Result<Var> {
    let r = scaled_residuals(tape, features, concepts, alpha)?;
    occurrence_from_residuals(tape, r)
}

/// Concept features `[N,K,D]` given features and their occurrence map.
pub fn pool_concept_features(tape: &mut Tape, features: Var, probs: Var, concepts: Var, alpha: Var) -> Result<Var> {
    let r = scaled_residuals(tape, features, concepts, alpha)?;
    pool_from_residuals(tape, r, probs)
}

/// Spatial max of the Gaussian-smoothed occurrence map: `[N,K]`.
///
/// `probs` is `[N,K,H·W]`; the kernel is applied with zero padding so the
/// smoothed map keeps its `H×W` extent.
pub fn presence(tape: &mut Tape, probs: Var, height: usize, width: usize, kernel: &Tensor) -> Result<Var> {
    let ps = tape.shape(probs).to_vec();
    if ps.len() != 3 || ps[2] != height * width {
        return Err(shape_err("presence", format!("probs {ps:?} for {height}×{width} map")));
    }
    let ks = kernel.shape();
    if ks.len() != 2 || ks[0] != ks[1] || ks[0].is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "smoothing kernel must be odd and square, got {ks:?}"
        )));
    }
    let size = ks[0];
    if size > 2 * height.min(width) + 1 {
        return Err(Error::InvalidArgument(format!(
            "smoothing kernel {size}×{size} larger than 2·min({height},{width})+1"
        )));
    }
    let (n, k) = (ps[0], ps[1]);
    let maps = tape.reshape(probs, &[n * k, 1, height, width])?;
    let g = tape.constant(kernel.reshape(&[1, 1, size, size])?);
    let smooth = tape.conv2d(maps, g, None, 1, size / 2)?;
    let peak = tape.global_max(smooth)?;
    tape.reshape(peak, &[n, k])
}

/// Mean of `|log(p + δ)|` over all samples and concepts. NaN passes through
/// so a diverged run surfaces as a non-finite loss.
pub fn presence_loss(tape: &mut Tape, presence: Var) -> Result<Var> {
    if let Some(&bad) = tape
        .value(presence)
        .data()
        .iter()
        .find(|&&p| !p.is_nan() && !(-PRESENCE_SLACK..=1.0 + PRESENCE_SLACK).contains(&p))
    {
        return Err(Error::InvalidArgument(format!(
            "presence probability {bad} outside [0, 1]"
        )));
    }
    let shifted = tape.add_scalar(presence, PRESENCE_DELTA);
    let logp = tape.log(shifted);
    let mag = tape.abs(logp);
    Ok(tape.mean(mag))
}

/// Cross-entropy of head logits `[N,C]` against image labels.
pub fn cls_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

/// `cls + λ_r · reg`.
pub fn total_loss(tape: &mut Tape, cls: Var, reg: Var, lambda_r: f64) -> Result<Var> {
    if !(lambda_r >= 0.0 && lambda_r.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "lambda_r must be non-negative, got {lambda_r}"
        )));
    }
    let weighted = tape.scale(reg, lambda_r);
    tape.add(cls, weighted)
}
