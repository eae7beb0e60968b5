use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Real, Tensor};

/// 2-D convolution, square kernel, zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Offset of the `out_c × in_c·k·k` weight block in the parameter vector.
    pub w_off: usize,
    pub b_off: Option<usize>,
}

/// im2col buffer kept from the forward pass.
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    cols: Vec<T>,
    in_shape: (usize, usize, usize, usize),
}

impl Conv2d {
    pub fn patch_len(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    pub fn n_params(&self) -> usize {
        self.out_c * self.patch_len() + if self.b_off.is_some() { self.out_c } else { 0 }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    /// He-normal weights, zero bias.
    pub fn init<T: Real, R: Rng + ?Sized>(&self, params: &mut [T], rng: &mut R) {
        let std = (2.0 / self.patch_len() as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let n = self.out_c * self.patch_len();
        for w in &mut params[self.w_off..self.w_off + n] {
            *w = T::lit(normal.sample(rng));
        }
        if let Some(b) = self.b_off {
            params[b..b + self.out_c].fill(T::zero());
        }
    }

    fn im2col<T: Real>(&self, x: &[T], h: usize, w: usize, oh: usize, ow: usize, cols: &mut [T]) {
        let k = self.kernel;
        let p = oh * ow;
        for ci in 0..self.in_c {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((ci * k + ky) * k + kx) * p..][..p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [T]) {
        let k = self.kernel;
        let p = oh * ow;
        for ci in 0..self.in_c {
            let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((ci * k + ky) * k + kx) * p..][..p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] = dst[ix as usize] + row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward<T: Real>(&self, params: &[T], x: &Tensor<T>, keep: bool) -> (Tensor<T>, Option<ConvCache<T>>) {
        assert_eq!(x.c, self.in_c, "conv input channels");
        let (oh, ow) = self.out_hw(x.h, x.w);
        let (kl, p) = (self.patch_len(), oh * ow);
        let weights = &params[self.w_off..self.w_off + self.out_c * kl];
        let mut y = Tensor::zeros(x.n, self.out_c, oh, ow);
        let mut cols = vec![T::zero(); if keep { x.n * kl * p } else { kl * p }];
        for i in 0..x.n {
            let buf = if keep { &mut cols[i * kl * p..(i + 1) * kl * p] } else { &mut cols[..] };
            self.im2col(x.sample(i), x.h, x.w, oh, ow, buf);
            let out = &mut y.data[i * self.out_c * p..(i + 1) * self.out_c * p];
            if let Some(b) = self.b_off {
                for (o, chunk) in out.chunks_mut(p).enumerate() {
                    chunk.fill(params[b + o]);
                }
            }
            let beta = if self.b_off.is_some() { T::one() } else { T::zero() };
            T::gemm(self.out_c, kl, p, T::one(), weights, kl as isize, 1, buf, p as isize, 1, beta, out, p as isize, 1);
        }
        let cache = keep.then_some(ConvCache { cols, in_shape: (x.n, x.c, x.h, x.w) });
        (y, cache)
    }

    /// Accumulates parameter gradients into `grads`; returns the input
    /// gradient when `need_dx`.
    pub fn backward<T: Real>(
        &self,
        params: &[T],
        cache: &ConvCache<T>,
        dy: &Tensor<T>,
        grads: &mut [T],
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let (n, c, h, w) = cache.in_shape;
        let (oh, ow) = (dy.h, dy.w);
        let (kl, p) = (self.patch_len(), oh * ow);
        let weights = &params[self.w_off..self.w_off + self.out_c * kl];
        let mut dx = need_dx.then(|| Tensor::zeros(n, c, h, w));
        let mut dcols = vec![T::zero(); if need_dx { kl * p } else { 0 }];
        for i in 0..n {
            let cols = &cache.cols[i * kl * p..(i + 1) * kl * p];
            let g = &dy.data[i * self.out_c * p..(i + 1) * self.out_c * p];
            {
                let dw = &mut grads[self.w_off..self.w_off + self.out_c * kl];
                T::gemm(self.out_c, p, kl, T::one(), g, p as isize, 1, cols, 1, p as isize, T::one(), dw, kl as isize, 1);
            }
            if let Some(b) = self.b_off {
                for (o, chunk) in g.chunks(p).enumerate() {
                    let s = chunk.iter().fold(T::zero(), |acc, &v| acc + v);
                    grads[b + o] = grads[b + o] + s;
                }
            }
            if let Some(dx) = dx.as_mut() {
                T::gemm(kl, self.out_c, p, T::one(), weights, 1, kl as isize, g, p as isize, 1, T::zero(), &mut dcols, p as isize, 1);
                let len = c * h * w;
                self.col2im(&dcols, h, w, oh, ow, &mut dx.data[i * len..(i + 1) * len]);
            }
        }
        dx
    }
}
