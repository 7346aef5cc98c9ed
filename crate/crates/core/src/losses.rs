//! Reconstruction and segmentation objectives.
//!
//! Each loss comes as a value function and a gradient function over flat
//! buffers; the autodiff graph wraps them as nodes. Reductions use pairwise
//! summation so values do not depend on thread count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reduce::{pairwise_sum, pairwise_sum_by};

pub const DEFAULT_LAMBDA: f64 = 0.2;
pub const DEFAULT_EPSILON: f64 = 1e-8;
pub const DICE_SMOOTH: f64 = 1e-5;

/// Terms of the weighted reconstruction loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub masked_term: f64,
    pub visible_term: f64,
    pub total: f64,
    pub lambda: f64,
    pub epsilon: f64,
}

fn check_recon(pred: &[f64], target: &[f64], mask: &[f64], lambda: f64, epsilon: f64) -> Result<()> {
    if pred.len() != target.len() || pred.len() != mask.len() {
        return Err(Error::ShapeMismatch(format!(
            "reconstruction {} / target {} / mask {}",
            pred.len(),
            target.len(),
            mask.len()
        )));
    }
    if !(lambda >= 0.0) || !(epsilon >= 0.0) {
        return Err(Error::BadConfig(format!("lambda {lambda} and epsilon {epsilon} must be >= 0")));
    }
    Ok(())
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// `Σ(e²⊙M)/(ΣM+ε) + λ Σ(e²⊙(1−M))/(Σ(1−M)+ε)` with `e = pred − target`.
pub fn recon_loss(pred: &[f64], target: &[f64], mask: &[f64], lambda: f64, epsilon: f64) -> Result<LossBreakdown> {
    check_recon(pred, target, mask, lambda, epsilon)?;
    let n = pred.len();
    let sq = |i: usize| (pred[i] - target[i]).powi(2);
    let masked_num = pairwise_sum_by(n, &|i| sq(i) * mask[i]);
    let visible_num = pairwise_sum_by(n, &|i| sq(i) * (1.0 - mask[i]));
    let m_sum = pairwise_sum(mask);
    let v_sum = pairwise_sum_by(n, &|i| 1.0 - mask[i]);
    let masked_term = ratio(masked_num, m_sum + epsilon);
    let visible_term = ratio(visible_num, v_sum + epsilon);
    Ok(LossBreakdown {
        masked_term,
        visible_term,
        total: masked_term + lambda * visible_term,
        lambda,
        epsilon,
    })
}

/// Gradient of [`recon_loss`]'s total with respect to `pred`.
pub fn recon_loss_grad(pred: &[f64], target: &[f64], mask: &[f64], lambda: f64, epsilon: f64) -> Result<Vec<f64>> {
    check_recon(pred, target, mask, lambda, epsilon)?;
    let n = pred.len();
    let m_den = pairwise_sum(mask) + epsilon;
    let v_den = pairwise_sum_by(n, &|i| 1.0 - mask[i]) + epsilon;
    Ok((0..n)
        .map(|i| {
            let e = 2.0 * (pred[i] - target[i]);
            ratio(e * mask[i], m_den) + lambda * ratio(e * (1.0 - mask[i]), v_den)
        })
        .collect())
}

/// Soft Dice and cross-entropy parts of the segmentation loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiceCe {
    pub dice: f64,
    pub ce: f64,
    pub total: f64,
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Checks `logits` `[B, 2, V]` (flattened spatial `V`) against `labels` `[B, V]`.
fn check_seg(logits: &[f64], labels: &[f64], batch: usize) -> Result<usize> {
    if batch == 0 || !labels.len().is_multiple_of(batch) || logits.len() != 2 * labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} logits for {} labels in batch of {batch}",
            logits.len(),
            labels.len()
        )));
    }
    if labels.iter().any(|&g| g != 0.0 && g != 1.0) {
        return Err(Error::LabelMismatch("labels must be 0 or 1".into()));
    }
    Ok(labels.len() / batch)
}

/// Foreground-minus-background logit per voxel.
fn margins(logits: &[f64], batch: usize, v: usize) -> Vec<f64> {
    let mut d = Vec::with_capacity(batch * v);
    for b in 0..batch {
        let l0 = &logits[2 * b * v..(2 * b + 1) * v];
        let l1 = &logits[(2 * b + 1) * v..(2 * b + 2) * v];
        d.extend(l0.iter().zip(l1).map(|(a, c)| c - a));
    }
    d
}

/// Per-sample soft Dice loss averaged over the batch plus voxel-mean
/// cross-entropy. Foreground probability is the two-class softmax.
pub fn dice_ce_loss(logits: &[f64], labels: &[f64], batch: usize) -> Result<DiceCe> {
    let v = check_seg(logits, labels, batch)?;
    let d = margins(logits, batch, v);
    let p: Vec<f64> = d.iter().map(|&x| sigmoid(x)).collect();
    let mut dice_terms = Vec::with_capacity(batch);
    for b in 0..batch {
        let (pb, gb) = (&p[b * v..(b + 1) * v], &labels[b * v..(b + 1) * v]);
        let inter = pairwise_sum_by(v, &|i| pb[i] * gb[i]);
        let den = pairwise_sum(pb) + pairwise_sum(gb) + DICE_SMOOTH;
        dice_terms.push(1.0 - (2.0 * inter + DICE_SMOOTH) / den);
    }
    let dice = pairwise_sum(&dice_terms) / batch as f64;
    // -ln p = softplus(-d), -ln(1-p) = softplus(d)
    let ce = pairwise_sum_by(d.len(), &|i| {
        if labels[i] == 1.0 {
            softplus(-d[i])
        } else {
            softplus(d[i])
        }
    }) / d.len() as f64;
    Ok(DiceCe {
        dice,
        ce,
        total: dice + ce,
    })
}

/// Gradient of [`dice_ce_loss`]'s total with respect to the logits.
pub fn dice_ce_grad(logits: &[f64], labels: &[f64], batch: usize) -> Result<Vec<f64>> {
    let v = check_seg(logits, labels, batch)?;
    let d = margins(logits, batch, v);
    let p: Vec<f64> = d.iter().map(|&x| sigmoid(x)).collect();
    let n = d.len() as f64;
    let mut grad = vec![0.0; logits.len()];
    for b in 0..batch {
        let (pb, gb) = (&p[b * v..(b + 1) * v], &labels[b * v..(b + 1) * v]);
        let inter = 2.0 * pairwise_sum_by(v, &|i| pb[i] * gb[i]) + DICE_SMOOTH;
        let den = pairwise_sum(pb) + pairwise_sum(gb) + DICE_SMOOTH;
        for i in 0..v {
            let d_dice_dp = -(2.0 * gb[i] * den - inter) / (den * den) / batch as f64;
            let dd = d_dice_dp * pb[i] * (1.0 - pb[i]) + (pb[i] - gb[i]) / n;
            grad[2 * b * v + i] = -dd;
            grad[(2 * b + 1) * v + i] = dd;
        }
    }
    Ok(grad)
}
