//! Soft-argmax decoding of joint locations from heatmaps.
//!
//! Grid coordinates index columns as `u` and rows as `v`. Heatmap cell `g`
//! covers crop pixels `g * stride .. (g + 1) * stride`, so its centre lies at
//! `g * stride + (stride - 1) / 2` in crop coordinates.

use super::HeatmapBundle;
use crate::geometry::{JointFrame, JointSet};
use crate::nn::Real;

/// Softmax over every location of one map, with max subtraction.
pub fn spatial_softmax<T: Real>(map: &[T], out: &mut [T]) {
    let max = map.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(map) {
        *o = (v - max).exp();
        sum = sum + *o;
    }
    let inv = T::one() / sum;
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}

/// Expected grid position and depth under a normalised heatmap.
pub fn soft_argmax<T: Real>(probs: &[T], depth: &[T], width: usize) -> [T; 3] {
    let (mut u, mut v, mut z) = (T::zero(), T::zero(), T::zero());
    for (i, (&p, &d)) in probs.iter().zip(depth).enumerate() {
        u = u + T::lit((i % width) as f64) * p;
        v = v + T::lit((i / width) as f64) * p;
        z = z + d * p;
    }
    [u, v, z]
}

/// Decoder output for a whole bundle.
#[derive(Debug, Clone)]
pub struct Decoded<T> {
    /// Normalised heatmaps, same layout as `h2d`.
    pub probs: Vec<T>,
    /// `(U, V, Z)` per sample and joint in grid units; `Z` is normalised depth.
    pub grid: Vec<[T; 3]>,
}

impl<T: Real> Decoded<T> {
    /// `(u, v, z)` for sample `n`, joint `j` mapped to crop pixels.
    pub fn crop_uvz(&self, n: usize, j: usize, n_joints: usize, stride: usize) -> [f64; 3] {
        let [u, v, z] = self.grid[n * n_joints + j];
        [grid_to_crop(u.f64(), stride), grid_to_crop(v.f64(), stride), z.f64()]
    }
}

pub fn grid_to_crop(g: f64, stride: usize) -> f64 {
    g * stride as f64 + (stride as f64 - 1.0) / 2.0
}

pub fn crop_to_grid(c: f64, stride: usize) -> f64 {
    (c - (stride as f64 - 1.0) / 2.0) / stride as f64
}

pub fn decode_bundle<T: Real>(bundle: &HeatmapBundle<T>) -> Decoded<T> {
    let plane = bundle.h * bundle.w;
    let mut probs = vec![T::zero(); bundle.h2d.len()];
    let mut grid = Vec::with_capacity(bundle.n * bundle.joints);
    for m in 0..bundle.n * bundle.joints {
        let range = m * plane..(m + 1) * plane;
        spatial_softmax(&bundle.h2d[range.clone()], &mut probs[range.clone()]);
        grid.push(soft_argmax(&probs[range.clone()], &bundle.hz[range], bundle.w));
    }
    Decoded { probs, grid }
}

/// Crop-frame joints for every sample of a bundle.
pub fn decode<T: Real>(bundle: &HeatmapBundle<T>) -> Vec<JointSet> {
    let dec = decode_bundle(bundle);
    (0..bundle.n)
        .map(|n| {
            let coords = (0..bundle.joints).map(|j| dec.crop_uvz(n, j, bundle.joints, bundle.stride)).collect();
            JointSet::new(coords, JointFrame::CropUvz)
        })
        .collect()
}

/// Chains gradients w.r.t. grid `(U, V, Z)` back to raw heatmaps and depth
/// maps. Returns `(d_h2d, d_hz)`.
pub fn decode_backward<T: Real>(bundle: &HeatmapBundle<T>, dec: &Decoded<T>, d_grid: &[[T; 3]]) -> (Vec<T>, Vec<T>) {
    let plane = bundle.h * bundle.w;
    let mut d_h2d = vec![T::zero(); bundle.h2d.len()];
    let mut d_hz = vec![T::zero(); bundle.hz.len()];
    let mut d_prob = vec![T::zero(); plane];
    for (m, d) in d_grid.iter().enumerate() {
        if d.iter().all(|g| g.is_zero()) {
            continue;
        }
        let base = m * plane;
        let probs = &dec.probs[base..base + plane];
        let hz = &bundle.hz[base..base + plane];
        let mut expect = T::zero();
        for i in 0..plane {
            let u = T::lit((i % bundle.w) as f64);
            let v = T::lit((i / bundle.w) as f64);
            d_prob[i] = d[0] * u + d[1] * v + d[2] * hz[i];
            expect = expect + probs[i] * d_prob[i];
            d_hz[base + i] = d[2] * probs[i];
        }
        for i in 0..plane {
            d_h2d[base + i] = probs[i] * (d_prob[i] - expect);
        }
    }
    (d_h2d, d_hz)
}
