//! Per-joint threshold controller, the cosine ramp of the target acceptance
//! fraction, and the cosine learning-rate decay.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RhoSchedule {
    pub rho_start: f64,
    pub rho_end: f64,
    pub t_max: usize,
}

impl Default for RhoSchedule {
    fn default() -> Self {
        Self { rho_start: 0.2, rho_end: 0.9, t_max: 20 }
    }
}

impl RhoSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.rho_start && self.rho_start <= self.rho_end && self.rho_end <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 <= rho_start <= rho_end <= 1, got {} and {}",
                self.rho_start, self.rho_end
            )));
        }
        if self.t_max == 0 {
            return Err(Error::Config("t_max must be positive".into()));
        }
        Ok(())
    }
}

fn cosine_phase(t_cur: f64, t_max: f64) -> Result<f64> {
    if !(t_max > 0.0) || !(0.0..=t_max).contains(&t_cur) {
        return Err(Error::OutOfRange(format!("epoch {t_cur} outside [0, {t_max}]")));
    }
    Ok((PI * t_cur / t_max).cos())
}

/// Target acceptance fraction at epoch `t_cur`.
pub fn rho_at(s: &RhoSchedule, t_cur: f64) -> Result<f64> {
    let c = cosine_phase(t_cur, s.t_max as f64)?;
    Ok(s.rho_start + 0.5 * (1.0 - c) * (s.rho_end - s.rho_start))
}

/// Cosine-decayed learning rate.
pub fn lr_at(base_lr: f64, t_cur: f64, t_max: f64) -> Result<f64> {
    let c = cosine_phase(t_cur, t_max)?;
    Ok(base_lr * 0.5 * (1.0 + c))
}

/// Linear-interpolation quantile of unsorted samples, `q` in `[0, 1]`.
pub fn quantile(samples: &[f64], q: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("no samples for quantile".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::OutOfRange(format!("quantile level {q}")));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(s[lo] + (pos - lo as f64) * (s[hi] - s[lo]))
}

/// Per-joint thresholds and the acceptance counters of the current epoch.
///
/// Before initialisation every threshold behaves as `+inf`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdState {
    pub t: Vec<f64>,
    pub eta: f64,
    pub accepted: Vec<u64>,
    pub seen: Vec<u64>,
    pub initialized: bool,
}

impl ThresholdState {
    pub fn new(n_joints: usize, eta: f64) -> Self {
        Self { t: vec![0.0; n_joints], eta, accepted: vec![0; n_joints], seen: vec![0; n_joints], initialized: false }
    }

    /// Starts from explicit thresholds.
    pub fn with_thresholds(t: Vec<f64>, eta: f64) -> Self {
        let n = t.len();
        Self { t, eta, accepted: vec![0; n], seen: vec![0; n], initialized: true }
    }

    pub fn n_joints(&self) -> usize {
        self.t.len()
    }

    /// Effective thresholds for masking.
    pub fn thresholds(&self) -> Vec<f64> {
        if self.initialized {
            self.t.clone()
        } else {
            vec![f64::INFINITY; self.t.len()]
        }
    }

    /// Counts one unlabeled sample.
    pub fn record(&mut self, accept: &[bool]) {
        assert_eq!(accept.len(), self.t.len(), "one flag per joint");
        for (j, &a) in accept.iter().enumerate() {
            self.seen[j] += 1;
            self.accepted[j] += a as u64;
        }
    }

    /// Accepted fraction per joint this epoch; `None` where nothing was seen.
    pub fn fractions(&self) -> Vec<Option<f64>> {
        self.accepted.iter().zip(&self.seen).map(|(&a, &s)| (s > 0).then(|| a as f64 / s as f64)).collect()
    }

    /// Additive controller step towards `rho_t`, then resets the counters.
    /// Joints with no samples keep their threshold.
    pub fn end_epoch(&mut self, rho_t: f64) -> Vec<f64> {
        for (j, frac) in self.fractions().into_iter().enumerate() {
            if let Some(f) = frac {
                self.t[j] += self.eta * (rho_t - f);
            }
        }
        self.reset_counters();
        self.t.clone()
    }

    pub fn reset_counters(&mut self) {
        self.accepted.fill(0);
        self.seen.fill(0);
    }

    /// Sets each threshold to the `rho_0` quantile of that joint's warmup
    /// uncertainties, so about `rho_0` of them fall strictly below it.
    /// `rho_0 = 1` places the threshold just above the largest sample.
    pub fn init_thresholds(&mut self, warmup: &[Vec<f64>], rho_0: f64) -> Result<Vec<f64>> {
        if warmup.len() != self.t.len() {
            return Err(Error::Shape(format!("warmup has {} joints, state has {}", warmup.len(), self.t.len())));
        }
        let mut t = Vec::with_capacity(warmup.len());
        for (j, c) in warmup.iter().enumerate() {
            if c.is_empty() {
                return Err(Error::Empty(format!("no warmup uncertainties for joint {j}")));
            }
            let q = quantile(c, rho_0)?;
            t.push(if rho_0 >= 1.0 { q + q.abs() * 1e-9 + 1e-12 } else { q });
        }
        self.t = t;
        self.initialized = true;
        self.reset_counters();
        Ok(self.t.clone())
    }
}
