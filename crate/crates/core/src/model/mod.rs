//! Pose network: a strided conv encoder with a short upsampling path and two
//! per-joint heads (2-D heatmap logits and depth maps).

pub mod decode;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::DepthFrame;
use crate::nn::{relu_backward_inplace, relu_inplace, BatchNorm2d, BnCache, Conv2d, ConvCache, Mode, Real, Stats, Tensor};

pub use decode::{decode, decode_backward, decode_bundle, soft_argmax, spatial_softmax, Decoded};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_joints: usize,
    /// Input crop side in pixels.
    pub in_size: usize,
    /// Channel width per resolution level; every level after the first halves
    /// the resolution.
    pub widths: Vec<usize>,
    /// Residual conv blocks at the coarsest level.
    pub bottleneck_blocks: usize,
    /// Upsampling stages back towards the input resolution.
    pub up_stages: usize,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { n_joints: 14, in_size: 128, widths: vec![16, 24, 32, 48, 64], bottleneck_blocks: 1, up_stages: 2, bn_momentum: 0.1 }
    }
}

impl ModelConfig {
    /// 32-pixel input, stride-2 output.
    pub fn small() -> Self {
        Self { in_size: 32, widths: vec![8, 16, 24], bottleneck_blocks: 1, up_stages: 1, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("model.{m}")));
        if self.n_joints == 0 {
            return bad("n_joints must be positive");
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad("widths must be nonempty and positive");
        }
        if self.up_stages >= self.widths.len() {
            return bad("up_stages must be smaller than the number of widths");
        }
        let down = 1usize << (self.widths.len() - 1);
        if self.in_size == 0 || self.in_size % down != 0 {
            return Err(Error::Config(format!("model.in_size must be a positive multiple of {down}")));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return bad("bn_momentum must lie in (0, 1]");
        }
        Ok(())
    }

    /// Heatmap cell size in input pixels.
    pub fn stride(&self) -> usize {
        1 << (self.widths.len() - 1 - self.up_stages)
    }

    pub fn heatmap_size(&self) -> usize {
        self.in_size / self.stride()
    }
}

/// Raw network output for a batch. Both maps are `n × joints × h × w`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapBundle<T> {
    pub n: usize,
    pub joints: usize,
    pub h: usize,
    pub w: usize,
    pub stride: usize,
    pub h2d: Vec<T>,
    pub hz: Vec<T>,
}

impl<T: Real> HeatmapBundle<T> {
    pub fn map(&self, n: usize, j: usize) -> &[T] {
        let p = self.h * self.w;
        &self.h2d[(n * self.joints + j) * p..][..p]
    }

    pub fn depth_map(&self, n: usize, j: usize) -> &[T] {
        let p = self.h * self.w;
        &self.hz[(n * self.joints + j) * p..][..p]
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

struct BlockCache<T> {
    conv: ConvCache<T>,
    bn: BnCache<T>,
    out: Tensor<T>,
}

impl ConvBn {
    /// conv, batch norm, ReLU.
    fn forward<T: Real>(
        &self,
        params: &[T],
        stats: Stats<'_, T>,
        x: &Tensor<T>,
        mode: Mode,
        keep: bool,
    ) -> (Tensor<T>, Option<BlockCache<T>>) {
        let (mut y, conv) = self.conv.forward(params, x, keep);
        let bn = self.bn.forward(params, stats, &mut y, mode, keep);
        relu_inplace(&mut y.data);
        let cache = keep.then(|| BlockCache { conv: conv.unwrap(), bn: bn.unwrap(), out: y.clone() });
        (y, cache)
    }

    fn backward<T: Real>(
        &self,
        params: &[T],
        cache: &BlockCache<T>,
        mut dy: Tensor<T>,
        grads: &mut [T],
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        relu_backward_inplace(&mut dy.data, &cache.out.data);
        let d = self.bn.backward(params, &cache.bn, &dy, grads);
        self.conv.backward(params, &cache.conv, &d, grads, need_dx)
    }
}

/// Layer layout with offsets into the flat parameter and stats vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Arch {
    stem: ConvBn,
    downs: Vec<ConvBn>,
    mids: Vec<ConvBn>,
    ups: Vec<ConvBn>,
    head_2d: Conv2d,
    head_z: Conv2d,
    n_params: usize,
    n_stats: usize,
    config: ModelConfig,
}

/// Intermediate values kept for the backward pass.
pub struct Tape<T> {
    stem: BlockCache<T>,
    downs: Vec<BlockCache<T>>,
    mids: Vec<BlockCache<T>>,
    ups: Vec<BlockCache<T>>,
    head_2d: ConvCache<T>,
    head_z: ConvCache<T>,
    feat_shape: (usize, usize, usize, usize),
}

impl Arch {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut p = 0usize;
        let mut s = 0usize;
        let mut conv_bn = |in_c: usize, out_c: usize, stride: usize| {
            let conv = Conv2d { in_c, out_c, kernel: 3, stride, pad: 1, w_off: p, b_off: None };
            p += conv.n_params();
            let bn = BatchNorm2d { channels: out_c, eps: 1e-5, momentum: config.bn_momentum, p_off: p, s_off: s };
            p += bn.n_params();
            s += bn.n_stats();
            ConvBn { conv, bn }
        };
        let w = &config.widths;
        let levels = w.len();
        let stem = conv_bn(1, w[0], 1);
        let downs: Vec<_> = (1..levels).map(|i| conv_bn(w[i - 1], w[i], 2)).collect();
        let mids: Vec<_> = (0..config.bottleneck_blocks).map(|_| conv_bn(w[levels - 1], w[levels - 1], 1)).collect();
        let ups: Vec<_> = (0..config.up_stages).map(|k| conv_bn(w[levels - 1 - k], w[levels - 2 - k], 1)).collect();
        let feat = w[levels - 1 - config.up_stages];
        let mut head = |out_c: usize| {
            let conv = Conv2d { in_c: feat, out_c, kernel: 1, stride: 1, pad: 0, w_off: p, b_off: Some(p + out_c * feat) };
            p += conv.n_params();
            conv
        };
        let head_2d = head(config.n_joints);
        let head_z = head(config.n_joints);
        Ok(Self { stem, downs, mids, ups, head_2d, head_z, n_params: p, n_stats: s, config: config.clone() })
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn n_stats(&self) -> usize {
        self.n_stats
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn blocks(&self) -> impl Iterator<Item = &ConvBn> {
        std::iter::once(&self.stem).chain(&self.downs).chain(&self.mids).chain(&self.ups)
    }

    fn init<T: Real, R: Rng + ?Sized>(&self, params: &mut [T], stats: &mut [T], rng: &mut R) {
        for b in self.blocks() {
            b.conv.init(params, rng);
            b.bn.init(params, stats);
        }
        // Small head weights keep the initial heatmaps close to uniform.
        for head in [&self.head_2d, &self.head_z] {
            head.init(params, rng);
            let n = head.out_c * head.patch_len();
            for v in &mut params[head.w_off..head.w_off + n] {
                *v = *v * T::lit(0.1);
            }
        }
    }

    fn check_input<T: Real>(&self, x: &Tensor<T>) -> Result<()> {
        let s = self.config.in_size;
        if x.c != 1 || x.h != s || x.w != s {
            return Err(Error::Shape(format!("network expects n×1×{s}×{s} input, got n×{}×{}×{}", x.c, x.h, x.w)));
        }
        if x.n == 0 {
            return Err(Error::Empty("forward on an empty batch".into()));
        }
        Ok(())
    }

    fn run<T: Real>(
        &self,
        params: &[T],
        mut stats: Stats<'_, T>,
        x: &Tensor<T>,
        mode: Mode,
        keep: bool,
    ) -> (HeatmapBundle<T>, Option<Tape<T>>) {
        let (stem_out, stem) = self.stem.forward(params, stats.reborrow(), x, mode, keep);
        let mut enc = vec![stem_out];
        let mut downs = Vec::new();
        for b in &self.downs {
            let (y, c) = b.forward(params, stats.reborrow(), enc.last().unwrap(), mode, keep);
            enc.push(y);
            downs.extend(c);
        }
        let mut feat = enc.last().unwrap().clone();
        let mut mids = Vec::new();
        for b in &self.mids {
            let (y, c) = b.forward(params, stats.reborrow(), &feat, mode, keep);
            feat.add_assign(&y);
            mids.extend(c);
        }
        let mut ups = Vec::new();
        let levels = enc.len();
        for (k, b) in self.ups.iter().enumerate() {
            let (mut y, c) = b.forward(params, stats.reborrow(), &feat.upsample2(), mode, keep);
            y.add_assign(&enc[levels - 2 - k]);
            feat = y;
            ups.extend(c);
        }
        let (h2d, c2d) = self.head_2d.forward(params, &feat, keep);
        let (hz, cz) = self.head_z.forward(params, &feat, keep);
        let bundle = HeatmapBundle {
            n: x.n,
            joints: self.config.n_joints,
            h: h2d.h,
            w: h2d.w,
            stride: self.config.stride(),
            h2d: h2d.data,
            hz: hz.data,
        };
        let tape = keep.then(|| Tape {
            stem: stem.unwrap(),
            downs,
            mids,
            ups,
            head_2d: c2d.unwrap(),
            head_z: cz.unwrap(),
            feat_shape: (feat.n, feat.c, feat.h, feat.w),
        });
        (bundle, tape)
    }

    fn backward<T: Real>(&self, params: &[T], tape: &Tape<T>, d_h2d: &[T], d_hz: &[T]) -> Vec<T> {
        let mut grads = vec![T::zero(); self.n_params];
        let (n, _, h, w) = tape.feat_shape;
        let j = self.config.n_joints;
        let t2d = Tensor::from_vec(n, j, h, w, d_h2d.to_vec());
        let tz = Tensor::from_vec(n, j, h, w, d_hz.to_vec());
        let mut d = self.head_2d.backward(params, &tape.head_2d, &t2d, &mut grads, true).unwrap();
        d.add_assign(&self.head_z.backward(params, &tape.head_z, &tz, &mut grads, true).unwrap());

        let levels = self.downs.len() + 1;
        let mut d_enc: Vec<Option<Tensor<T>>> = vec![None; levels];
        for (k, b) in self.ups.iter().enumerate().rev() {
            let skip = levels - 2 - k;
            accumulate(&mut d_enc[skip], &d);
            let du = b.backward(params, &tape.ups[k], d, &mut grads, true).unwrap();
            d = Tensor::upsample2_backward(&du);
        }
        for (b, c) in self.mids.iter().zip(&tape.mids).rev() {
            let dx = b.backward(params, c, d.clone(), &mut grads, true).unwrap();
            d.add_assign(&dx);
        }
        accumulate(&mut d_enc[levels - 1], &d);
        for i in (0..levels).rev() {
            let d = d_enc[i].take().expect("gradient reaches every level");
            if i == 0 {
                self.stem.backward(params, &tape.stem, d, &mut grads, false);
            } else {
                let dx = self.downs[i - 1].backward(params, &tape.downs[i - 1], d, &mut grads, true).unwrap();
                accumulate(&mut d_enc[i - 1], &dx);
            }
        }
        grads
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, d: &Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(d),
        None => *slot = Some(d.clone()),
    }
}

/// Read-only network over borrowed weights. Train-mode forward is refused.
#[derive(Clone, Copy)]
pub struct NetView<'a, T> {
    pub arch: &'a Arch,
    pub params: &'a [T],
    pub stats: &'a [T],
}

impl<T: Real> NetView<'_, T> {
    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<HeatmapBundle<T>> {
        if mode == Mode::Train {
            return Err(Error::Contract("train-mode forward on a read-only network".into()));
        }
        self.arch.check_input(x)?;
        Ok(self.arch.run(self.params, Stats::Frozen(self.stats), x, mode, false).0)
    }
}

/// A trainable network owning its parameters and normalisation statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseNet<T> {
    arch: Arch,
    pub params: Vec<T>,
    pub stats: Vec<T>,
}

impl<T: Real> PoseNet<T> {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        let arch = Arch::new(config)?;
        let mut params = vec![T::zero(); arch.n_params];
        let mut stats = vec![T::zero(); arch.n_stats];
        arch.init(&mut params, &mut stats, rng);
        Ok(Self { arch, params, stats })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn view(&self) -> NetView<'_, T> {
        NetView { arch: &self.arch, params: &self.params, stats: &self.stats }
    }

    /// Forward pass without keeping intermediates. Train mode updates the
    /// running statistics.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<HeatmapBundle<T>> {
        self.arch.check_input(x)?;
        Ok(self.arch.run(&self.params, Stats::Tracked(&mut self.stats), x, mode, false).0)
    }

    /// Forward pass for a later [`PoseNet::backward`].
    pub fn forward_tape(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(HeatmapBundle<T>, Tape<T>)> {
        self.arch.check_input(x)?;
        let (b, t) = self.arch.run(&self.params, Stats::Tracked(&mut self.stats), x, mode, true);
        Ok((b, t.unwrap()))
    }

    /// Parameter gradient given output gradients for both heads.
    pub fn backward(&self, tape: &Tape<T>, d_h2d: &[T], d_hz: &[T]) -> Vec<T> {
        self.arch.backward(&self.params, tape, d_h2d, d_hz)
    }

    /// Copies weights and statistics from another network of the same layout.
    pub fn load_weights(&mut self, params: &[T], stats: &[T]) -> Result<()> {
        if params.len() != self.params.len() || stats.len() != self.stats.len() {
            return Err(Error::Shape("weight vectors do not match the network layout".into()));
        }
        self.params.copy_from_slice(params);
        self.stats.copy_from_slice(stats);
        Ok(())
    }

    pub fn to_checkpoint(&self) -> NetCheckpoint {
        NetCheckpoint {
            format_version: CHECKPOINT_VERSION,
            config: self.config().clone(),
            params: self.params.iter().map(|v| v.f64()).collect(),
            stats: self.stats.iter().map(|v| v.f64()).collect(),
        }
    }

    /// Restores a network; `expected` must equal the stored config when given.
    pub fn from_checkpoint(ckpt: &NetCheckpoint, expected: Option<&ModelConfig>) -> Result<Self> {
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} (expected {CHECKPOINT_VERSION})",
                ckpt.format_version
            )));
        }
        if let Some(cfg) = expected {
            if cfg != &ckpt.config {
                return Err(Error::Checkpoint(format!(
                    "model config mismatch: checkpoint has {:?}, run expects {:?}",
                    ckpt.config, cfg
                )));
            }
        }
        let arch = Arch::new(&ckpt.config)?;
        if ckpt.params.len() != arch.n_params || ckpt.stats.len() != arch.n_stats {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} params / {} stats, config needs {} / {}",
                ckpt.params.len(),
                ckpt.stats.len(),
                arch.n_params,
                arch.n_stats
            )));
        }
        Ok(Self {
            arch,
            params: ckpt.params.iter().map(|&v| T::lit(v)).collect(),
            stats: ckpt.stats.iter().map(|&v| T::lit(v)).collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        Self::from_checkpoint(&NetCheckpoint::load(path)?, expected)
    }
}

/// On-disk network snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetCheckpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub params: Vec<f64>,
    pub stats: Vec<f64>,
}

impl NetCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

/// Stacks frames into an `n × 1 × S × S` tensor.
pub fn frames_to_tensor<T: Real>(frames: &[&DepthFrame]) -> Result<Tensor<T>> {
    let Some(first) = frames.first() else {
        return Err(Error::Empty("no frames to stack".into()));
    };
    let s = first.size();
    let mut data = Vec::with_capacity(frames.len() * s * s);
    for f in frames {
        if f.size() != s {
            return Err(Error::Shape(format!("mixed frame sizes {s} and {}", f.size())));
        }
        data.extend(f.pixels.iter().map(|&v| T::lit(v as f64)));
    }
    Ok(Tensor::from_vec(frames.len(), 1, s, s, data))
}
