// SPDX-License-Identifier: Apache-2.0

use super::codec::{delta_encode, Delta};
use crate::error::{Error, Result};
use crate::geom::Box3D;

/// Scores are kept this far from 0 and 1 before taking logs.
pub const SCORE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of the negative-anchor classification term.
    pub alpha: f64,
    /// Weight of the positive-anchor classification term.
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0 }
    }
}

impl LossConfig {
    fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if ok(self.alpha) && ok(self.beta) {
            Ok(())
        } else {
            Err(Error::LossInput(format!("weights must be positive: {self:?}")))
        }
    }
}

pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

/// Binary cross entropy of score `p` against a 0/1 `target`.
pub fn bce(p: f64, target: bool) -> f64 {
    let p = p.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP);
    if target {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

fn mean(it: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = it.len();
    if n == 0 {
        0.0
    } else {
        it.sum::<f64>() / n as f64
    }
}

/// Classification terms averaged over negatives and positives, plus the
/// regression term averaged over positives. `pred[i]` and `truth[i]` are
/// the deltas of positive anchor `i`.
pub fn loss_from_deltas(
    pos_scores: &[f64],
    neg_scores: &[f64],
    pred: &[Delta],
    truth: &[Delta],
    cfg: &LossConfig,
) -> Result<f64> {
    cfg.validate()?;
    if pred.len() != truth.len() {
        return Err(Error::LossInput(format!(
            "{} predicted vs {} target deltas",
            pred.len(),
            truth.len()
        )));
    }
    if pos_scores.is_empty() && !truth.is_empty() {
        return Err(Error::LossInput("regression targets without positive anchors".into()));
    }
    if !truth.is_empty() && truth.len() != pos_scores.len() {
        return Err(Error::LossInput(format!(
            "{} positive scores vs {} regression targets",
            pos_scores.len(),
            truth.len()
        )));
    }
    let neg = mean(neg_scores.iter().map(|&p| bce(p, false)));
    let pos = mean(pos_scores.iter().map(|&p| bce(p, true)));
    let reg = mean(
        pred.iter()
            .zip(truth)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| smooth_l1(x - y)).sum::<f64>()),
    );
    Ok(cfg.alpha * neg + cfg.beta * pos + reg)
}

/// [`loss_from_deltas`] with deltas computed against each positive anchor.
pub fn loss(
    pos_scores: &[f64],
    neg_scores: &[f64],
    pred: &[Box3D],
    truth: &[Box3D],
    anchors: &[Box3D],
    cfg: &LossConfig,
) -> Result<f64> {
    if pred.len() != anchors.len() || truth.len() != anchors.len() {
        return Err(Error::LossInput(format!(
            "{} anchors, {} predictions, {} truths",
            anchors.len(),
            pred.len(),
            truth.len()
        )));
    }
    let dp = anchors
        .iter()
        .zip(pred)
        .map(|(a, b)| delta_encode(a, b))
        .collect::<Result<Vec<_>>>()?;
    let dt = anchors
        .iter()
        .zip(truth)
        .map(|(a, b)| delta_encode(a, b))
        .collect::<Result<Vec<_>>>()?;
    loss_from_deltas(pos_scores, neg_scores, &dp, &dt, cfg)
}
