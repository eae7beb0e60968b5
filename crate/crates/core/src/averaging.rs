//! Exponential moving averages of a network's weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Arch, ModelConfig, NetView, PoseNet};
use crate::nn::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Flavor {
    /// Parameters averaged, normalisation statistics copied from the source.
    Ema,
    /// Parameters and normalisation statistics both averaged.
    Eman,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AveragedParams<T> {
    arch: Arch,
    pub params: Vec<T>,
    pub stats: Vec<T>,
    pub momentum: f64,
    pub flavor: Flavor,
}

fn check_momentum(m: f64) -> Result<()> {
    if !(0.0..1.0).contains(&m) {
        return Err(Error::Config(format!("averaging momentum {m} outside [0, 1)")));
    }
    Ok(())
}

impl<T: Real> AveragedParams<T> {
    pub fn init_from(net: &PoseNet<T>, momentum: f64, flavor: Flavor) -> Result<Self> {
        check_momentum(momentum)?;
        Ok(Self { arch: net.arch().clone(), params: net.params.clone(), stats: net.stats.clone(), momentum, flavor })
    }

    pub fn config(&self) -> &ModelConfig {
        self.arch.config()
    }

    /// `shadow <- m * shadow + (1 - m) * source`.
    pub fn update(&mut self, net: &PoseNet<T>) -> Result<()> {
        if net.params.len() != self.params.len() || net.stats.len() != self.stats.len() || net.arch() != &self.arch {
            return Err(Error::Shape("averaged copy no longer matches the source network".into()));
        }
        let m = T::lit(self.momentum);
        let r = T::lit(1.0 - self.momentum);
        for (s, &p) in self.params.iter_mut().zip(&net.params) {
            *s = m * *s + r * p;
        }
        match self.flavor {
            Flavor::Eman => {
                for (s, &p) in self.stats.iter_mut().zip(&net.stats) {
                    *s = m * *s + r * p;
                }
            }
            Flavor::Ema => self.stats.copy_from_slice(&net.stats),
        }
        Ok(())
    }

    /// Eval-only network over the shadow weights.
    pub fn as_net(&self) -> NetView<'_, T> {
        NetView { arch: &self.arch, params: &self.params, stats: &self.stats }
    }

    pub fn to_state(&self) -> AveragedState {
        AveragedState {
            config: self.config().clone(),
            params: self.params.iter().map(|v| v.f64()).collect(),
            stats: self.stats.iter().map(|v| v.f64()).collect(),
            momentum: self.momentum,
            flavor: self.flavor,
        }
    }

    pub fn from_state(state: &AveragedState) -> Result<Self> {
        check_momentum(state.momentum)?;
        let arch = Arch::new(&state.config)?;
        if state.params.len() != arch.n_params() || state.stats.len() != arch.n_stats() {
            return Err(Error::Checkpoint("averaged weights do not match their config".into()));
        }
        Ok(Self {
            arch,
            params: state.params.iter().map(|&v| T::lit(v)).collect(),
            stats: state.stats.iter().map(|&v| T::lit(v)).collect(),
            momentum: state.momentum,
            flavor: state.flavor,
        })
    }

    /// A trainable copy of the shadow weights.
    pub fn to_pose_net(&self) -> Result<PoseNet<T>> {
        PoseNet::from_checkpoint(&self.to_state().into_checkpoint(), None)
    }
}

/// Serialised form of [`AveragedParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AveragedState {
    pub config: ModelConfig,
    pub params: Vec<f64>,
    pub stats: Vec<f64>,
    pub momentum: f64,
    pub flavor: Flavor,
}

impl AveragedState {
    fn into_checkpoint(self) -> crate::model::NetCheckpoint {
        crate::model::NetCheckpoint {
            format_version: crate::model::CHECKPOINT_VERSION,
            config: self.config,
            params: self.params,
            stats: self.stats,
        }
    }
}
