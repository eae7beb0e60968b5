use super::{Mode, Real, Tensor};

/// Access to the normalisation statistics during a forward pass.
pub enum Stats<'a, T> {
    Frozen(&'a [T]),
    Tracked(&'a mut [T]),
}

impl<T> Stats<'_, T> {
    pub fn reborrow(&mut self) -> Stats<'_, T> {
        match self {
            Stats::Frozen(s) => Stats::Frozen(s),
            Stats::Tracked(s) => Stats::Tracked(s),
        }
    }

    fn read(&self) -> &[T] {
        match self {
            Stats::Frozen(s) => s,
            Stats::Tracked(s) => s,
        }
    }
}

/// Per-channel batch normalisation with affine scale and shift.
///
/// Running statistics follow the usual convention: the running mean tracks
/// batch means and the running variance tracks the unbiased batch variance,
/// both with weight `momentum` on the newest batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    /// `gamma` then `beta` in the parameter vector.
    pub p_off: usize,
    /// Running mean then running variance in the stats vector.
    pub s_off: usize,
}

#[derive(Debug, Clone)]
pub struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

impl BatchNorm2d {
    pub fn n_params(&self) -> usize {
        2 * self.channels
    }

    pub fn n_stats(&self) -> usize {
        2 * self.channels
    }

    pub fn init<T: Real>(&self, params: &mut [T], stats: &mut [T]) {
        params[self.p_off..self.p_off + self.channels].fill(T::one());
        params[self.p_off + self.channels..self.p_off + 2 * self.channels].fill(T::zero());
        stats[self.s_off..self.s_off + self.channels].fill(T::zero());
        stats[self.s_off + self.channels..self.s_off + 2 * self.channels].fill(T::one());
    }

    /// Normalises `x` in place. [`Mode::Train`] needs tracked statistics.
    pub fn forward<T: Real>(
        &self,
        params: &[T],
        mut stats: Stats<'_, T>,
        x: &mut Tensor<T>,
        mode: Mode,
        keep: bool,
    ) -> Option<BnCache<T>> {
        let c = self.channels;
        assert_eq!(x.c, c, "batch norm channels");
        let plane = x.plane();
        let count = x.n * plane;
        let eps = T::lit(self.eps);
        let gamma = &params[self.p_off..self.p_off + c];
        let beta = &params[self.p_off + c..self.p_off + 2 * c];
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        if mode.uses_batch_stats() {
            let inv_count = T::one() / T::lit(count as f64);
            for ch in 0..c {
                let mut s = T::zero();
                for n in 0..x.n {
                    for &v in &x.data[(n * c + ch) * plane..][..plane] {
                        s = s + v;
                    }
                }
                let m = s * inv_count;
                let mut sq = T::zero();
                for n in 0..x.n {
                    for &v in &x.data[(n * c + ch) * plane..][..plane] {
                        sq = sq + (v - m) * (v - m);
                    }
                }
                mean[ch] = m;
                var[ch] = sq * inv_count;
            }
            if mode == Mode::Train {
                let Stats::Tracked(running) = &mut stats else {
                    panic!("train mode needs tracked statistics");
                };
                let mom = T::lit(self.momentum);
                let unbias = if count > 1 { T::lit(count as f64 / (count - 1) as f64) } else { T::one() };
                for ch in 0..c {
                    let rm = &mut running[self.s_off + ch];
                    *rm = (T::one() - mom) * *rm + mom * mean[ch];
                    let rv = &mut running[self.s_off + c + ch];
                    *rv = (T::one() - mom) * *rv + mom * var[ch] * unbias;
                }
            }
        } else {
            let stats = stats.read();
            mean.copy_from_slice(&stats[self.s_off..self.s_off + c]);
            var.copy_from_slice(&stats[self.s_off + c..self.s_off + 2 * c]);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = if keep { vec![T::zero(); x.data.len()] } else { Vec::new() };
        for n in 0..x.n {
            for ch in 0..c {
                let base = (n * c + ch) * plane;
                for i in base..base + plane {
                    let h = (x.data[i] - mean[ch]) * inv_std[ch];
                    if keep {
                        xhat[i] = h;
                    }
                    x.data[i] = gamma[ch] * h + beta[ch];
                }
            }
        }
        keep.then_some(BnCache { xhat, inv_std, batch_stats: mode.uses_batch_stats() })
    }

    /// Returns the input gradient and accumulates `d gamma`, `d beta`.
    pub fn backward<T: Real>(&self, params: &[T], cache: &BnCache<T>, dy: &Tensor<T>, grads: &mut [T]) -> Tensor<T> {
        let c = self.channels;
        let plane = dy.plane();
        let count = T::lit((dy.n * plane) as f64);
        let mut dx = Tensor::zeros(dy.n, dy.c, dy.h, dy.w);
        for ch in 0..c {
            let gamma = params[self.p_off + ch];
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for n in 0..dy.n {
                let base = (n * c + ch) * plane;
                for i in base..base + plane {
                    sum_dy = sum_dy + dy.data[i];
                    sum_dy_xhat = sum_dy_xhat + dy.data[i] * cache.xhat[i];
                }
            }
            grads[self.p_off + ch] = grads[self.p_off + ch] + sum_dy_xhat;
            grads[self.p_off + c + ch] = grads[self.p_off + c + ch] + sum_dy;
            let k = gamma * cache.inv_std[ch];
            for n in 0..dy.n {
                let base = (n * c + ch) * plane;
                for i in base..base + plane {
                    dx.data[i] = if cache.batch_stats {
                        k * (dy.data[i] - (sum_dy + cache.xhat[i] * sum_dy_xhat) / count)
                    } else {
                        k * dy.data[i]
                    };
                }
            }
        }
        dx
    }
}
