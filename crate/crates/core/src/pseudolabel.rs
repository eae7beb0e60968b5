//! Heatmap-spread uncertainty, per-joint soft masks, and the mask-weighted
//! L1 distance between joint sets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Real;

/// Accepted/rejected weights for the soft mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskWeights {
    pub accepted: f64,
    pub rejected: f64,
}

impl Default for MaskWeights {
    fn default() -> Self {
        Self { accepted: 1.0, rejected: 0.1 }
    }
}

impl MaskWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.accepted >= 0.0 && self.rejected >= 0.0) || !self.accepted.is_finite() || !self.rejected.is_finite() {
            return Err(Error::Config("mask weights must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub weights: Vec<f64>,
    pub accepted: Vec<bool>,
}

/// Standard deviation of pixel positions under a normalised heatmap, about
/// the centroid `(u, v)`. Units are grid cells.
pub fn heatmap_std<T: Real>(probs: &[T], width: usize, centroid: [f64; 2]) -> Result<f64> {
    let sum: f64 = probs.iter().map(|p| p.f64()).sum();
    if (sum - 1.0).abs() > 1e-4 {
        return Err(Error::Contract(format!("heatmap sums to {sum}, expected 1")));
    }
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        let du = centroid[0] - (i % width) as f64;
        let dv = centroid[1] - (i / width) as f64;
        acc += p.f64() * (du * du + dv * dv);
    }
    Ok(acc.max(0.0).sqrt())
}

/// `weights[j] = accepted` when `c[j] < thresholds[j]`, else `rejected`.
pub fn make_mask(c: &[f64], thresholds: &[f64], weights: MaskWeights) -> Mask {
    assert_eq!(c.len(), thresholds.len(), "one threshold per joint");
    let accepted: Vec<bool> = c.iter().zip(thresholds).map(|(c, t)| c < t).collect();
    let weights = accepted.iter().map(|&a| if a { weights.accepted } else { weights.rejected }).collect();
    Mask { weights, accepted }
}

/// `1/(3K) Σ_j M_j Σ_i |a_ji − b_ji|` with `K = Σ_j M_j`.
pub fn weighted_distance(a: &[[f64; 3]], b: &[[f64; 3]], mask: &[f64]) -> Result<f64> {
    check_shapes(a, b, mask)?;
    let k: f64 = mask.iter().sum();
    if k <= 0.0 {
        return Err(Error::ZeroWeight);
    }
    let total: f64 = a
        .iter()
        .zip(b)
        .zip(mask)
        .map(|((p, q), m)| m * (0..3).map(|i| (p[i] - q[i]).abs()).sum::<f64>())
        .sum();
    Ok(total / (3.0 * k))
}

/// Distance and its gradient with respect to `a`. The subgradient at equal
/// coordinates is 0.
pub fn weighted_distance_grad(a: &[[f64; 3]], b: &[[f64; 3]], mask: &[f64]) -> Result<(f64, Vec<[f64; 3]>)> {
    let d = weighted_distance(a, b, mask)?;
    let k: f64 = mask.iter().sum();
    let grad = a
        .iter()
        .zip(b)
        .zip(mask)
        .map(|((p, q), m)| {
            let mut g = [0.0; 3];
            for i in 0..3 {
                let diff = p[i] - q[i];
                g[i] = if diff > 0.0 {
                    m / (3.0 * k)
                } else if diff < 0.0 {
                    -m / (3.0 * k)
                } else {
                    0.0
                };
            }
            g
        })
        .collect();
    Ok((d, grad))
}

fn check_shapes(a: &[[f64; 3]], b: &[[f64; 3]], mask: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.len() != mask.len() {
        return Err(Error::Shape(format!("joint sets of {} and {} with {} mask entries", a.len(), b.len(), mask.len())));
    }
    Ok(())
}
