//! A small NCHW convolution engine with explicit backward passes.
//!
//! Layers do not own their weights. All trainable values live in one flat
//! parameter vector and all normalisation statistics in one flat stats vector;
//! layers hold offsets into them. This keeps optimisers, averaging and
//! checkpoints to plain slice arithmetic.

mod adam;
mod batchnorm;
mod conv;

pub use adam::{Adam, AdamConfig, AdamState};
pub use batchnorm::{BatchNorm2d, BnCache, Stats};
pub use conv::{Conv2d, ConvCache};

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type usable by the engine.
pub trait Real: Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + 'static {
    /// `C = alpha * A B + beta * C` with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let last = |r: isize, cs: isize, rows: usize, cols: usize| {
                    (rows.saturating_sub(1) as isize * r + cols.saturating_sub(1) as isize * cs) as usize
                };
                assert!(k == 0 || last(rsa, csa, m, k) < a.len(), "gemm: A out of bounds");
                assert!(k == 0 || last(rsb, csb, k, n) < b.len(), "gemm: B out of bounds");
                assert!(last(rsc, csc, m, n) < c.len(), "gemm: C out of bounds");
                // SAFETY: the asserts above keep every strided access inside the slices.
                unsafe {
                    $f(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, csc);
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Dense NCHW tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w, data: vec![T::zero(); n * c * h * w] }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length");
        Self { n, c, h, w, data }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let len = self.c * self.plane();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        (self.n, self.c, self.h, self.w) == (other.n, other.c, other.h, other.w)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&self) -> Self {
        let (h2, w2) = (self.h * 2, self.w * 2);
        let mut out = Self::zeros(self.n, self.c, h2, w2);
        for nc in 0..self.n * self.c {
            let src = &self.data[nc * self.plane()..(nc + 1) * self.plane()];
            let dst = &mut out.data[nc * h2 * w2..(nc + 1) * h2 * w2];
            for y in 0..h2 {
                for x in 0..w2 {
                    dst[y * w2 + x] = src[(y / 2) * self.w + x / 2];
                }
            }
        }
        out
    }

    /// Adjoint of [`Tensor::upsample2`].
    pub fn upsample2_backward(grad: &Self) -> Self {
        let (h, w) = (grad.h / 2, grad.w / 2);
        let mut out = Self::zeros(grad.n, grad.c, h, w);
        for nc in 0..grad.n * grad.c {
            let src = &grad.data[nc * grad.plane()..(nc + 1) * grad.plane()];
            let dst = &mut out.data[nc * h * w..(nc + 1) * h * w];
            for y in 0..grad.h {
                for x in 0..grad.w {
                    dst[(y / 2) * w + x / 2] = dst[(y / 2) * w + x / 2] + src[y * grad.w + x];
                }
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }
}

/// How normalisation layers treat statistics during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running statistics updated.
    Train,
    /// Batch statistics, running statistics left untouched.
    BatchStats,
    /// Stored running statistics.
    Eval,
}

impl Mode {
    pub fn uses_batch_stats(self) -> bool {
        !matches!(self, Mode::Eval)
    }
}

pub fn relu_inplace<T: Real>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes gradient entries where the ReLU output was clamped.
pub fn relu_backward_inplace<T: Real>(grad: &mut [T], output: &[T]) {
    for (g, &y) in grad.iter_mut().zip(output) {
        if y <= T::zero() {
            *g = T::zero();
        }
    }
}
