//! Soft Dice plus binary cross-entropy on one-vs-all sigmoid maps.

use modseg_tensor::{Scalar, Tensor, Var};

use crate::error::{bail, Result};

pub const SMOOTH_NR: f64 = 1e-5;
pub const SMOOTH_DR: f64 = 1e-5;
/// Probabilities are clamped to `[EPS, 1 - EPS]` inside the logarithms.
pub const BCE_EPS: f64 = 1e-7;

pub struct LossTerms<T: Scalar> {
    pub dice: Var<T>,
    pub ce: Var<T>,
    pub total: Var<T>,
}

impl<T: Scalar> LossTerms<T> {
    pub fn values(&self) -> (f64, f64, f64) {
        let v = |x: &Var<T>| x.value().data()[0].as_f64();
        (v(&self.dice), v(&self.ce), v(&self.total))
    }
}

fn check(probs: &Var<impl Scalar>, labels: &[u8]) -> Result<(usize, usize, usize)> {
    let s = probs.shape();
    if s.len() < 3 {
        bail!(Shape, "loss expects probabilities (B, K, ...), got {s:?}");
    }
    let (b, k) = (s[0], s[1]);
    let v: usize = s[2..].iter().product();
    if labels.len() != b * v {
        bail!(Shape, "{} labels for probabilities {s:?}", labels.len());
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize > k) {
        bail!(Validation, "label {bad} outside 0..={k}");
    }
    Ok((b, k, v))
}

/// Mean over (sample, class) of `1 - (2 I + s) / (P + G + s)`.
pub fn dice_loss<T: Scalar>(probs: &Var<T>, labels: &[u8]) -> Result<Var<T>> {
    let (b, k, v) = check(probs, labels)?;
    let pd = probs.value().data();
    let mut stats = Vec::with_capacity(b * k);
    let mut loss = 0.0;
    for bi in 0..b {
        let lab = &labels[bi * v..(bi + 1) * v];
        for ki in 0..k {
            let p = &pd[(bi * k + ki) * v..(bi * k + ki + 1) * v];
            let cls = (ki + 1) as u8;
            let (mut inter, mut psum, mut gsum) = (0.0, 0.0, 0.0);
            for (&pv, &l) in p.iter().zip(lab) {
                let pv = pv.as_f64();
                psum += pv;
                if l == cls {
                    inter += pv;
                    gsum += 1.0;
                }
            }
            let num = 2.0 * inter + SMOOTH_NR;
            let den = psum + gsum + SMOOTH_DR;
            loss += 1.0 - num / den;
            stats.push((num, den));
        }
    }
    let n = (b * k) as f64;
    let value = Tensor::scalar(T::lit(loss / n));
    let labels = labels.to_vec();
    Ok(Var::from_op(value, &[probs], move |g, inputs, _| {
        let scale = g.data()[0].as_f64() / n;
        let mut grad = Tensor::zeros(inputs[0].shape());
        let gd = grad.data_mut();
        for bi in 0..b {
            let lab = &labels[bi * v..(bi + 1) * v];
            for ki in 0..k {
                let (num, den) = stats[bi * k + ki];
                let cls = (ki + 1) as u8;
                let base = (bi * k + ki) * v;
                // d/dp of -(num/den): -(2 g den - num) / den^2
                let on = T::lit(-scale * (2.0 * den - num) / (den * den));
                let off = T::lit(scale * num / (den * den));
                for (j, &l) in lab.iter().enumerate() {
                    gd[base + j] = if l == cls { on } else { off };
                }
            }
        }
        vec![Some(grad)]
    }))
}

/// Mean binary cross-entropy over samples, classes and voxels.
pub fn bce_loss<T: Scalar>(probs: &Var<T>, labels: &[u8]) -> Result<Var<T>> {
    let (b, k, v) = check(probs, labels)?;
    let pd = probs.value().data();
    let mut total = 0.0;
    for bi in 0..b {
        let lab = &labels[bi * v..(bi + 1) * v];
        for ki in 0..k {
            let cls = (ki + 1) as u8;
            let p = &pd[(bi * k + ki) * v..(bi * k + ki + 1) * v];
            for (&pv, &l) in p.iter().zip(lab) {
                let pv = pv.as_f64();
                total -= if l == cls { pv.max(BCE_EPS).ln() } else { (1.0 - pv).max(BCE_EPS).ln() };
            }
        }
    }
    let n = (b * k * v) as f64;
    let value = Tensor::scalar(T::lit(total / n));
    let labels = labels.to_vec();
    Ok(Var::from_op(value, &[probs], move |g, inputs, _| {
        let scale = g.data()[0].as_f64() / n;
        let pd = inputs[0].data();
        let mut grad = Tensor::zeros(inputs[0].shape());
        let gd = grad.data_mut();
        for bi in 0..b {
            let lab = &labels[bi * v..(bi + 1) * v];
            for ki in 0..k {
                let cls = (ki + 1) as u8;
                let base = (bi * k + ki) * v;
                for (j, &l) in lab.iter().enumerate() {
                    let p = pd[base + j].as_f64();
                    let y = if l == cls { 1.0 } else { 0.0 };
                    gd[base + j] = T::lit(scale * (p - y) / (p * (1.0 - p)).max(1e-12));
                }
            }
        }
        vec![Some(grad)]
    }))
}

/// `dice_weight * dice + ce_weight * bce`, with both terms kept.
pub fn combined_loss<T: Scalar>(
    probs: &Var<T>,
    labels: &[u8],
    dice_weight: f64,
    ce_weight: f64,
) -> Result<LossTerms<T>> {
    let dice = dice_loss(probs, labels)?;
    let ce = bce_loss(probs, labels)?;
    let total = dice.scale(dice_weight).add(&ce.scale(ce_weight))?;
    Ok(LossTerms { dice, ce, total })
}
