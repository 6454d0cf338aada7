//! Soft-label classification loss with an entropy reward and a left/right
//! swap penalty, plus analytic logit gradients and a finite-difference checker.
//!
//! For prediction `y = softmax(z)` and smoothed target `p`:
//!
//! ```text
//! L = -Σ p_i ln y_i  -  λ1 · (-Σ y_i ln y_i)  +  λ2 · φ(y)
//! φ(y) = y_left if truth = right, y_right if truth = left, 0 if truth = center
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perception::{softmax3, Category, Head, SoftLabel3};

/// Floor applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Entropy-reward weight.
    pub lambda1: f64,
    /// Side-swap weight.
    pub lambda2: f64,
    /// Label-smoothing mass spread uniformly over the three categories.
    pub epsilon: f64,
    pub side_swap_vo: bool,
    pub side_swap_lo: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.3,
            epsilon: 0.1,
            side_swap_vo: false,
            side_swap_lo: true,
        }
    }
}

impl LossConfig {
    /// Plain cross entropy on hard labels.
    pub fn cross_entropy_only() -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 0.0,
            epsilon: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1.is_finite() && self.lambda1 >= 0.0) {
            return Err(Error::param("lambda1", "must be finite and >= 0"));
        }
        if !(self.lambda2.is_finite() && self.lambda2 >= 0.0) {
            return Err(Error::param("lambda2", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::param("epsilon", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Side-swap weight actually applied to `head`.
    pub fn side_swap_weight(&self, head: Head) -> f64 {
        let on = match head {
            Head::ViewOrientation => self.side_swap_vo,
            Head::LateralOffset => self.side_swap_lo,
        };
        if on {
            self.lambda2
        } else {
            0.0
        }
    }

    /// Weights for a single head, with the side-swap flag resolved.
    pub fn for_head(&self, head: Head) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.side_swap_weight(head),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothedLabel {
    pub probs: [f64; 3],
    pub truth: Category,
}

impl SmoothedLabel {
    /// A soft target whose ground-truth category is its argmax.
    pub fn from_probs(probs: [f64; 3]) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-12 {
            return Err(Error::param("probs", "must lie on the probability simplex"));
        }
        let mut best = 0;
        for i in 1..3 {
            if probs[i] > probs[best] {
                best = i;
            }
        }
        Ok(Self {
            probs,
            truth: Category::from_index(best),
        })
    }
}

pub fn smooth_labels(truth: Category, epsilon: f64) -> SmoothedLabel {
    debug_assert!((0.0..1.0).contains(&epsilon));
    let mut probs = [epsilon / 3.0; 3];
    probs[truth.index()] += 1.0 - epsilon;
    SmoothedLabel { probs, truth }
}

pub fn side_swap_penalty(y: &SoftLabel3, truth: Category) -> f64 {
    match truth {
        Category::Right => y.p_left(),
        Category::Left => y.p_right(),
        Category::Center => 0.0,
    }
}

fn swap_index(truth: Category) -> Option<usize> {
    match truth {
        Category::Right => Some(Category::Left.index()),
        Category::Left => Some(Category::Right.index()),
        Category::Center => None,
    }
}

fn floored_ln(y: f64) -> f64 {
    y.max(PROB_FLOOR).ln()
}

pub fn loss_value(y: &SoftLabel3, p: &SmoothedLabel, w: &LossWeights) -> Result<f64> {
    let y = y.probs();
    let mut cross_entropy = 0.0;
    let mut entropy = 0.0;
    for (&yi, &pi) in y.iter().zip(p.probs.iter()) {
        let ln_y = floored_ln(yi);
        cross_entropy -= pi * ln_y;
        entropy -= yi * ln_y;
    }
    let swap = swap_index(p.truth).map_or(0.0, |k| y[k]);
    let loss = cross_entropy - w.lambda1 * entropy + w.lambda2 * swap;
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFiniteLoss)
    }
}

/// Loss evaluated directly on logits.
pub fn loss_from_logits(z: &[f64; 3], p: &SmoothedLabel, w: &LossWeights) -> Result<f64> {
    loss_value(&SoftLabel3::from_probs_unchecked(softmax3(z)), p, w)
}

/// Gradient of [`loss_from_logits`] with respect to the logits.
///
/// Uses `∂y_j/∂z_k = y_j (δ_jk - y_k)`; the cross-entropy part collapses to `y - p`.
pub fn loss_grad_logits(z: &[f64; 3], p: &SmoothedLabel, w: &LossWeights) -> [f64; 3] {
    let y = softmax3(z);
    let ln_y = y.map(floored_ln);
    let mean_ln: f64 = (0..3).map(|i| y[i] * ln_y[i]).sum();
    let swap = swap_index(p.truth);
    let mut grad = [0.0; 3];
    for j in 0..3 {
        let ce = y[j] - p.probs[j];
        // d/dz_j of Σ y ln y
        let neg_entropy = y[j] * (ln_y[j] - mean_ln);
        let phi = swap.map_or(0.0, |k| {
            let delta = if j == k { 1.0 } else { 0.0 };
            y[k] * (delta - y[j])
        });
        grad[j] = ce + w.lambda1 * neg_entropy + w.lambda2 * phi;
    }
    grad
}

/// Central-difference gradient of the loss with respect to the logits.
pub fn numeric_grad_logits(z: &[f64; 3], p: &SmoothedLabel, w: &LossWeights, h: f64) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (j, slot) in out.iter_mut().enumerate() {
        let mut plus = *z;
        let mut minus = *z;
        plus[j] += h;
        minus[j] -= h;
        let lp = loss_from_logits(&plus, p, w).unwrap_or(f64::NAN);
        let lm = loss_from_logits(&minus, p, w).unwrap_or(f64::NAN);
        *slot = (lp - lm) / (2.0 * h);
    }
    out
}

/// Max over coordinates of `|analytic - central| / (|analytic| + 1e-12)`.
pub fn finite_diff_check(z: &[f64; 3], p: &SmoothedLabel, w: &LossWeights, h: f64) -> f64 {
    assert!(h > 0.0, "step must be positive");
    let analytic = loss_grad_logits(z, p, w);
    let numeric = numeric_grad_logits(z, p, w, h);
    (0..3)
        .map(|j| (analytic[j] - numeric[j]).abs() / (analytic[j].abs() + 1e-12))
        .fold(0.0, f64::max)
}
