//! Training objectives: BCE, Dice, text cross-entropy, the two stage
//! composites and the per-class unbalanced weight.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::dataset::ClassCounts;
use crate::error::{Error, Result};

pub const DICE_EPS: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_txt: f64,
    pub lambda_mask: f64,
    pub lambda_bce: f64,
    pub lambda_dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda_txt: 1.0,
            lambda_mask: 1.0,
            lambda_bce: 1.0,
            lambda_dice: 1.0,
        }
    }
}

impl LossWeights {
    pub fn check(&self) -> Result<()> {
        let all = [
            self.lambda1,
            self.lambda2,
            self.lambda_txt,
            self.lambda_mask,
            self.lambda_bce,
            self.lambda_dice,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(
                "loss weights must be finite and nonnegative".into(),
            ));
        }
        if self.lambda1 + self.lambda2 == 0.0 {
            return Err(Error::Config(
                "stage-1 loss needs lambda1 or lambda2 positive".into(),
            ));
        }
        if self.lambda_txt + self.lambda_mask == 0.0 || self.lambda_bce + self.lambda_dice == 0.0 {
            return Err(Error::Config("stage-2 loss needs a positive text or mask weight and a positive bce or dice weight".into()));
        }
        Ok(())
    }
}

fn as_rows<'g>(logits: Var<'g>, gt: &[u8], batch: usize) -> Result<(Var<'g>, Tensor)> {
    let x = logits.value();
    if x.numel() != gt.len() || batch == 0 || gt.len() % batch != 0 {
        return Err(Error::dim("mask loss", x.shape(), &[gt.len()]));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("mask logits"));
    }
    if gt.iter().any(|&v| v > 1) {
        return Err(Error::Contract("ground-truth mask is not binary".into()));
    }
    let n = gt.len() / batch;
    let y = Tensor::new(&[batch, n], gt.iter().map(|&v| v as f64).collect())?;
    Ok((logits.reshape(&[batch, n])?, y))
}

/// Per-row mean of `softplus(x) − y·x`, which equals the binary
/// cross-entropy of `sigmoid(x)` against `y`. Returns `[B]`.
fn bce_rows<'g>(x: Var<'g>, y: &Tensor) -> Result<Var<'g>> {
    let g = x.graph();
    let n = y.cols() as f64;
    Ok(x.softplus()
        .sub(x.mul(g.constant(y.clone()))?)?
        .sum_last()
        .scale(1.0 / n))
}

/// Per-row soft Dice loss, `[B]`.
fn dice_rows<'g>(x: Var<'g>, y: &Tensor, eps: f64) -> Result<Var<'g>> {
    let g = x.graph();
    let s = x.sigmoid();
    let inter = s.mul(g.constant(y.clone()))?.sum_last();
    let ysum: Vec<f64> = y.data().chunks(y.cols()).map(|r| r.iter().sum()).collect();
    let b = ysum.len();
    let denom = s
        .sum_last()
        .add(g.constant(Tensor::new(&[b], ysum)?))?
        .add_scalar(eps);
    let ratio = inter.scale(2.0).add_scalar(eps).div(denom)?;
    Ok(ratio.scale(-1.0).add_scalar(1.0))
}

pub fn bce_loss<'g>(logits: Var<'g>, gt: &[u8]) -> Result<Var<'g>> {
    let (x, y) = as_rows(logits, gt, 1)?;
    Ok(bce_rows(x, &y)?.mean())
}

pub fn dice_loss<'g>(logits: Var<'g>, gt: &[u8], eps: f64) -> Result<Var<'g>> {
    let (x, y) = as_rows(logits, gt, 1)?;
    Ok(dice_rows(x, &y, eps)?.mean())
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of `logits [R, V]`.
pub fn text_ce_loss<'g>(logits: Var<'g>, targets: &[usize]) -> Result<Var<'g>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != targets.len() || targets.is_empty() {
        return Err(Error::Contract(format!(
            "{} targets for logits {shape:?}",
            targets.len()
        )));
    }
    if !logits.value().is_finite() {
        return Err(Error::NonFinite("text logits"));
    }
    Ok(logits.log_softmax().pick(targets)?.mean().scale(-1.0))
}

/// The same quantity from explicit distributions, for reporting.
pub fn text_ce(dists: &[Vec<f64>], targets: &[usize]) -> Result<f64> {
    if dists.len() != targets.len() || dists.is_empty() {
        return Err(Error::Contract(format!(
            "{} distributions for {} targets",
            dists.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (d, &t) in dists.iter().zip(targets) {
        let p = *d
            .get(t)
            .ok_or_else(|| Error::Contract(format!("target {t} outside distribution")))?;
        total -= p.ln();
    }
    Ok(total / targets.len() as f64)
}

/// `(max(c_1..c_m, c_0) / c_i)^(1/4)`.
pub fn unbalanced_weight(class: &str, counts: &ClassCounts) -> Result<f64> {
    let ci = *counts
        .per_class
        .get(class)
        .ok_or_else(|| Error::Contract(format!("no count for class {class}")))?;
    if ci == 0 {
        return Err(Error::Contract(format!("class {class} has zero points")));
    }
    let max = counts
        .per_class
        .values()
        .copied()
        .chain([counts.background])
        .max()
        .unwrap_or(0);
    Ok((max as f64 / ci as f64).powf(0.25))
}

pub fn unbalanced_table(counts: &ClassCounts) -> Result<BTreeMap<String, f64>> {
    counts
        .per_class
        .keys()
        .map(|k| Ok((k.clone(), unbalanced_weight(k, counts)?)))
        .collect()
}

/// `λ₁·BCE + λ₂·Dice`, each averaged over the `batch` stacked samples.
pub fn stage1_loss<'g>(
    logits: Var<'g>,
    gt: &[u8],
    batch: usize,
    w: &LossWeights,
) -> Result<Var<'g>> {
    let (x, y) = as_rows(logits, gt, batch)?;
    let mut terms = Vec::new();
    if w.lambda1 != 0.0 {
        terms.push(bce_rows(x, &y)?.mean().scale(w.lambda1));
    }
    if w.lambda2 != 0.0 {
        terms.push(dice_rows(x, &y, DICE_EPS)?.mean().scale(w.lambda2));
    }
    sum_terms(terms)
}

fn sum_terms<'g>(terms: Vec<Var<'g>>) -> Result<Var<'g>> {
    let mut it = terms.into_iter();
    let first = it
        .next()
        .ok_or_else(|| Error::Config("every loss weight is zero".into()))?;
    it.try_fold(first, |acc, t| acc.add(t))
}

pub struct Stage2Loss<'g> {
    pub total: Var<'g>,
    pub text: f64,
    pub mask: f64,
}

/// `λ_txt·L_txt + λ_mask·mean_b(ω_b·(λ_bce·BCE_b + λ_dice·Dice_b))`.
pub fn stage2_loss<'g>(
    text_logits: Var<'g>,
    text_targets: &[usize],
    mask_logits: Var<'g>,
    gt: &[u8],
    omegas: &[f64],
    w: &LossWeights,
) -> Result<Stage2Loss<'g>> {
    let batch = omegas.len();
    let (x, y) = as_rows(mask_logits, gt, batch)?;
    let g = x.graph();
    let mut per_sample = Vec::new();
    if w.lambda_bce != 0.0 {
        per_sample.push(bce_rows(x, &y)?.scale(w.lambda_bce));
    }
    if w.lambda_dice != 0.0 {
        per_sample.push(dice_rows(x, &y, DICE_EPS)?.scale(w.lambda_dice));
    }
    let per_sample = sum_terms(per_sample)?;
    let mask = per_sample
        .mul(g.constant(Tensor::new(&[batch], omegas.to_vec())?))?
        .mean();
    let text = text_ce_loss(text_logits, text_targets)?;
    let total = text.scale(w.lambda_txt).add(mask.scale(w.lambda_mask))?;
    Ok(Stage2Loss {
        total,
        text: text.item(),
        mask: mask.item(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    fn counts(per: &[(&str, u64)], bg: u64) -> ClassCounts {
        ClassCounts {
            per_class: per.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            background: bg,
            ..Default::default()
        }
    }

    #[test]
    fn omega_examples_exact() {
        let c = counts(&[("a", 1600), ("b", 100), ("c", 1296), ("d", 16)], 81 * 16);
        assert_eq!(unbalanced_weight("a", &c).unwrap(), 1.0);
        assert_eq!(unbalanced_weight("b", &c).unwrap(), 2.0);
        assert_eq!(unbalanced_weight("d", &c).unwrap(), 10.0f64.sqrt());
        let c = counts(&[("x", 81), ("y", 1)], 10);
        assert_eq!(unbalanced_weight("y", &c).unwrap(), 3.0);
    }

    #[test]
    fn omega_zero_count_errors() {
        let c = counts(&[("x", 0)], 10);
        assert!(unbalanced_weight("x", &c).is_err());
    }

    #[test]
    fn bce_zero_logits_is_ln2() {
        let g = Graph::new();
        let x = g.constant(Tensor::zeros(&[7]));
        let l = bce_loss(x, &[1, 0, 1, 1, 0, 0, 1]).unwrap().item();
        assert!((l - std::f64::consts::LN_2).abs() <= 1e-12);
    }

    #[test]
    fn nan_logits_rejected() {
        let g = Graph::new();
        let x = g.constant(Tensor::new(&[2], vec![f64::NAN, 0.0]).unwrap());
        assert!(matches!(bce_loss(x, &[1, 0]), Err(Error::NonFinite(_))));
    }
}
