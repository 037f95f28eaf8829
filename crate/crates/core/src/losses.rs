//! Segmentation losses and their learned combination.
//!
//! All losses run in `f64` on flattened pixel buffers and return analytic gradients
//! with respect to the logits, so the network only needs `dL/dlogit` to backpropagate.
//!
//! The combination uses one learnable log-precision `s_i` per term:
//! `total = Σ exp(-s_i)·L_i + s_i`, with `∂total/∂s_i = 1 - exp(-s_i)·L_i`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DICE_SMOOTH: f64 = 1.0;
pub const PROB_CLIP: f64 = 1e-7;

/// Term order used by [`LossWeights`] and [`LossOutput`].
pub const TERM_NAMES: [&str; 3] = ["dice", "lovasz", "bce"];

/// Log-precision parameters for the Dice, Lovász and BCE terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossWeights {
    pub s: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    /// Unweighted Dice, Lovász and BCE values.
    pub terms: [f64; 3],
    pub total: f64,
    pub grad_logits: Vec<f64>,
    pub grad_s: [f64; 3],
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_shapes(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("prediction has {a} values, target has {b}")));
    }
    Ok(())
}

/// `1 - (2·Σp·y + ε) / (Σp + Σy + ε)` with ε = 1.
pub fn dice_loss(probs: &[f64], target: &[f64]) -> Result<f64> {
    check_shapes(probs.len(), target.len())?;
    let (inter, sp, sy) = dice_sums(probs, target);
    Ok(1.0 - (2.0 * inter + DICE_SMOOTH) / (sp + sy + DICE_SMOOTH))
}

fn dice_sums(probs: &[f64], target: &[f64]) -> (f64, f64, f64) {
    probs.iter().zip(target).fold((0.0, 0.0, 0.0), |(i, p, y), (&pi, &yi)| (i + pi * yi, p + pi, y + yi))
}

/// Mean binary cross-entropy on probabilities clipped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(probs: &[f64], target: &[f64]) -> Result<f64> {
    check_shapes(probs.len(), target.len())?;
    if probs.is_empty() {
        return Err(Error::InvalidArgument("bce on empty input".into()));
    }
    let sum: f64 = probs
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / probs.len() as f64)
}

/// Per-position weights of the Lovász extension of the Jaccard loss, for labels
/// already sorted by decreasing hinge error.
fn lovasz_grad(sorted_labels: &[f64]) -> Vec<f64> {
    let gts: f64 = sorted_labels.iter().sum();
    let mut cum = 0.0;
    let mut prev = 0.0;
    sorted_labels
        .iter()
        .enumerate()
        .map(|(k, &y)| {
            cum += y;
            let k1 = (k + 1) as f64;
            let jaccard = 1.0 - (gts - cum) / (gts + k1 - cum);
            let g = jaccard - prev;
            prev = jaccard;
            g
        })
        .collect()
}

/// Lovász hinge of one image and its gradient with respect to the logits.
fn lovasz_with_grad(logits: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let signs: Vec<f64> = target.iter().map(|&y| 2.0 * y - 1.0).collect();
    let errors: Vec<f64> = logits.iter().zip(&signs).map(|(&f, &s)| 1.0 - f * s).collect();
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]));
    let sorted_labels: Vec<f64> = order.iter().map(|&i| target[i]).collect();
    let g = lovasz_grad(&sorted_labels);
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (k, &i) in order.iter().enumerate() {
        if errors[i] > 0.0 {
            loss += errors[i] * g[k];
            grad[i] = -signs[i] * g[k];
        }
    }
    (loss, grad)
}

/// Binary Lovász hinge on one flattened image.
pub fn lovasz_hinge(logits: &[f64], target: &[f64]) -> Result<f64> {
    check_shapes(logits.len(), target.len())?;
    if logits.is_empty() {
        return Err(Error::InvalidArgument("lovasz hinge on empty input".into()));
    }
    Ok(lovasz_with_grad(logits, target).0)
}

/// Mean per-image Lovász hinge over a batch of images of `image_len` pixels each.
pub fn lovasz_hinge_batch(logits: &[f64], target: &[f64], image_len: usize) -> Result<f64> {
    check_batch(logits, target, image_len)?;
    let n = logits.len() / image_len;
    let sum: f64 = logits
        .chunks(image_len)
        .zip(target.chunks(image_len))
        .map(|(f, y)| lovasz_with_grad(f, y).0)
        .sum();
    Ok(sum / n as f64)
}

fn check_batch(logits: &[f64], target: &[f64], image_len: usize) -> Result<()> {
    check_shapes(logits.len(), target.len())?;
    if image_len == 0 || logits.is_empty() || !logits.len().is_multiple_of(image_len) {
        return Err(Error::Shape(format!(
            "{} values cannot be split into images of {image_len} pixels",
            logits.len()
        )));
    }
    Ok(())
}

/// Learned-weight combination of Dice (batch-global), Lovász (per image, averaged) and
/// BCE (pixel mean), with gradients for the logits and for `s`.
pub fn combined_loss(logits: &[f64], target: &[f64], image_len: usize, weights: &LossWeights) -> Result<LossOutput> {
    check_batch(logits, target, image_len)?;
    let n = logits.len();
    let probs: Vec<f64> = logits.iter().map(|&f| sigmoid(f)).collect();

    let (inter, sp, sy) = dice_sums(&probs, target);
    let denom = sp + sy + DICE_SMOOTH;
    let dice = 1.0 - (2.0 * inter + DICE_SMOOTH) / denom;

    let n_images = (n / image_len) as f64;
    let mut lovasz = 0.0;
    let mut lovasz_grad_all = Vec::with_capacity(n);
    for (f, y) in logits.chunks(image_len).zip(target.chunks(image_len)) {
        let (l, g) = lovasz_with_grad(f, y);
        lovasz += l;
        lovasz_grad_all.extend(g);
    }
    lovasz /= n_images;

    // BCE in logit form: max(f,0) - f·y + ln(1 + e^{-|f|}).
    let bce = logits
        .iter()
        .zip(target)
        .map(|(&f, &y)| f.max(0.0) - f * y + (-f.abs()).exp().ln_1p())
        .sum::<f64>()
        / n as f64;

    let terms = [dice, lovasz, bce];
    if let Some(i) = terms.iter().position(|t| !t.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite {} loss", TERM_NAMES[i])));
    }
    let scale: [f64; 3] = [0, 1, 2].map(|i| (-weights.s[i]).exp());
    let total: f64 = (0..3).map(|i| scale[i] * terms[i] + weights.s[i]).sum();
    let grad_s = [0, 1, 2].map(|i| 1.0 - scale[i] * terms[i]);

    let num = 2.0 * inter + DICE_SMOOTH;
    let grad_logits = (0..n)
        .map(|i| {
            let p = probs[i];
            let dp = p * (1.0 - p);
            let d_dice = -(2.0 * target[i] * denom - num) / (denom * denom) * dp;
            let d_lovasz = lovasz_grad_all[i] / n_images;
            let d_bce = (p - target[i]) / n as f64;
            scale[0] * d_dice + scale[1] * d_lovasz + scale[2] * d_bce
        })
        .collect();
    Ok(LossOutput { terms, total, grad_logits, grad_s })
}
