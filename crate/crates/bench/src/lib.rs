//! Shared inputs for the criterion benches.

use eqhand::model::HeatmapBundle;
use eqhand::nn::Tensor;

/// Deterministic pseudo-random values in [-1, 1].
pub fn wave(len: usize, phase: f32) -> Vec<f32> {
    (0..len).map(|i| ((i as f32 * 0.618 + phase) * 12.9898).sin()).collect()
}

pub fn input(n: usize, c: usize, size: usize) -> Tensor<f32> {
    Tensor::from_vec(n, c, size, size, wave(n * c * size * size, 0.5))
}

pub fn bundle(n: usize, joints: usize, size: usize) -> HeatmapBundle<f64> {
    let len = n * joints * size * size;
    let h2d = wave(len, 0.1).into_iter().map(|v| 4.0 * v as f64).collect();
    let hz = wave(len, 0.7).into_iter().map(f64::from).collect();
    HeatmapBundle { n, joints, h: size, w: size, stride: 2, h2d, hz }
}
