//! The three-phase pipeline: teacher with consistency and masking, student
//! against the averaged teacher, then student fine-tuning on labeled crops.

mod eval;
mod step;

pub use eval::{
    evaluate, mean_joint_error, oracle_predictions, predict, pseudo_label_accuracy, pseudo_label_accuracy_of,
    score_pseudo_labels, EvalResult, PseudoLabelAccuracy, ScoredPrediction,
};
pub use step::{
    averaged_targets, batch_distance, consistency_grads, crop_joints, mm_scale, pseudo_labels, pseudo_labels_tracked, student_grads,
    student_loss, student_step, supervised_grads, supervised_step, teacher_step, uncertainties, BatchDistance,
    LabeledBatch, PseudoLabels, StepConfig, TeacherLosses, UncertaintyView, UnlabeledBatch,
};

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::averaging::{AveragedParams, AveragedState, Flavor};
use crate::data::{cycled_batches, Sample};
use crate::error::{Error, Result};
use crate::geometry::{sample_augmentation, AffineAugmentation, AugmentationRanges, DepthFrame, JointSet};
use crate::model::{ModelConfig, NetCheckpoint, PoseNet};
use crate::nn::{Adam, AdamConfig, AdamState};
use crate::pseudolabel::MaskWeights;
use crate::rng::{stream, Rng, Stream};
use crate::schedule::{lr_at, rho_at, RhoSchedule, ThresholdState};

pub const STATE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub rho_start: f64,
    pub rho_end: f64,
    pub eta: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { rho_start: 0.2, rho_end: 0.9, eta: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AveragingConfig {
    pub momentum: f64,
    pub flavor: Flavor,
}

impl Default for AveragingConfig {
    fn default() -> Self {
        Self { momentum: 0.999, flavor: Flavor::Eman }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Weight of the consistency term.
    pub lambda: f64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    /// Teacher/student epochs.
    pub epochs: usize,
    /// Steps per epoch; defaults to one pass over the larger of the two sets.
    pub steps_per_epoch: Option<usize>,
    pub base_lr: f64,
    pub optimizer: AdamConfig,
    pub augmentation: AugmentationRanges,
    /// Augment labeled crops as well.
    pub augment_supervised: bool,
    /// Weight joints by uncertainty; off means every joint has weight 1.
    pub masking: bool,
    pub mask: MaskWeights,
    pub uncertainty_view: UncertaintyView,
    /// Reuse the teacher's joint weights in the student loss.
    pub student_mask: bool,
    pub schedule: ScheduleConfig,
    pub averaging: AveragingConfig,
    /// Fine-tune epochs as a fraction of `epochs`.
    pub fine_tune_fraction: f64,
    pub fine_tune_lr_scale: f64,
    /// Train only the teacher on labeled data (baseline).
    pub supervised_only: bool,
    /// Per-epoch test error and pseudo-label accuracy.
    pub diagnostics: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            lambda: 1.0,
            batch_labeled: 16,
            batch_unlabeled: 16,
            epochs: 20,
            steps_per_epoch: None,
            base_lr: 1e-4,
            optimizer: AdamConfig::default(),
            augmentation: AugmentationRanges::default(),
            augment_supervised: true,
            masking: true,
            mask: MaskWeights::default(),
            uncertainty_view: UncertaintyView::PseudoLabel,
            student_mask: true,
            schedule: ScheduleConfig::default(),
            averaging: AveragingConfig::default(),
            fine_tune_fraction: 0.1,
            fine_tune_lr_scale: 0.1,
            supervised_only: false,
            diagnostics: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model.validate()?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps_per_epoch must be at least 1".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.fine_tune_fraction >= 0.0 && self.fine_tune_lr_scale > 0.0) {
            return bad("fine_tune_fraction must be >= 0 and fine_tune_lr_scale > 0".into());
        }
        if !(self.schedule.eta >= 0.0 && self.schedule.eta.is_finite()) {
            return bad(format!("schedule.eta must be finite and >= 0, got {}", self.schedule.eta));
        }
        if !(0.0..1.0).contains(&self.averaging.momentum) {
            return bad(format!("averaging.momentum must lie in [0, 1), got {}", self.averaging.momentum));
        }
        self.augmentation.validate()?;
        self.mask.validate()?;
        self.rho().validate()
    }

    pub fn rho(&self) -> RhoSchedule {
        RhoSchedule { rho_start: self.schedule.rho_start, rho_end: self.schedule.rho_end, t_max: self.epochs }
    }

    pub fn fine_tune_epochs(&self) -> usize {
        (self.fine_tune_fraction * self.epochs as f64).round() as usize
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs + self.fine_tune_epochs()
    }

    fn step_config(&self) -> StepConfig {
        StepConfig { lambda: self.lambda, masking: self.masking, mask: self.mask, uncertainty_view: self.uncertainty_view }
    }

    fn has_student(&self) -> bool {
        !self.supervised_only
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    FineTune,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub supervised_loss: f64,
    pub consistency_loss: Option<f64>,
    pub student_loss: Option<f64>,
    /// Target acceptance fraction for this epoch.
    pub rho_target: Option<f64>,
    /// Accepted fraction per joint during this epoch.
    pub acceptance: Vec<f64>,
    /// Thresholds after this epoch's update; `None` before initialisation.
    pub thresholds: Option<Vec<f64>>,
    pub pseudo_labels: usize,
    pub skipped: usize,
    pub teacher_error_mm: Option<f64>,
    pub student_error_mm: Option<f64>,
    pub pseudo_error_masked_mm: Option<f64>,
    pub pseudo_error_unmasked_mm: Option<f64>,
}

impl EpochReport {
    pub fn is_finite(&self) -> bool {
        let opt = |v: Option<f64>| v.is_none_or(f64::is_finite);
        self.lr.is_finite()
            && self.supervised_loss.is_finite()
            && opt(self.consistency_loss)
            && opt(self.student_loss)
            && opt(self.teacher_error_mm)
            && opt(self.student_error_mm)
            && opt(self.pseudo_error_masked_mm)
            && opt(self.pseudo_error_unmasked_mm)
            && self.acceptance.iter().all(|v| v.is_finite())
    }
}

/// Training inputs. `unlabeled_truth` is only read by diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub labeled: &'a [Sample],
    pub unlabeled: &'a [Sample],
    pub unlabeled_truth: Option<&'a [Option<JointSet>]>,
    pub test: Option<&'a [Sample]>,
}

struct Learner {
    net: PoseNet<f32>,
    opt: Adam<f32>,
}

/// Serialisable optimiser state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerState {
    pub net: NetCheckpoint,
    pub optimizer: OptimizerState,
}

impl Learner {
    fn to_state(&self) -> LearnerState {
        let s = &self.opt.state;
        LearnerState {
            net: self.net.to_checkpoint(),
            optimizer: OptimizerState {
                config: self.opt.config,
                step: s.step,
                m: s.m.iter().map(|&v| v as f64).collect(),
                v: s.v.iter().map(|&v| v as f64).collect(),
            },
        }
    }

    fn from_state(s: &LearnerState, model: &ModelConfig) -> Result<Self> {
        let net = PoseNet::from_checkpoint(&s.net, Some(model))?;
        let o = &s.optimizer;
        if o.m.len() != net.params.len() || o.v.len() != net.params.len() {
            return Err(Error::Checkpoint("optimizer state does not match the network".into()));
        }
        let state = AdamState { step: o.step, m: o.m.iter().map(|&v| v as f32).collect(), v: o.v.iter().map(|&v| v as f32).collect() };
        Ok(Self { net, opt: Adam { config: o.config, state } })
    }
}

/// Everything needed to continue a run exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub format_version: u32,
    pub config: TrainConfig,
    /// Next epoch to run.
    pub epoch: usize,
    pub teacher: LearnerState,
    pub student: Option<LearnerState>,
    pub averaged: Option<AveragedState>,
    pub thresholds: ThresholdState,
    pub rngs: Vec<Rng>,
    pub reports: Vec<EpochReport>,
}

impl TrainState {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec(self)?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let s: Self = serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if s.format_version != STATE_VERSION {
            return Err(Error::Checkpoint(format!("state version {} (expected {STATE_VERSION})", s.format_version)));
        }
        Ok(s)
    }
}

/// Finished run.
pub struct TrainOutput {
    pub teacher: PoseNet<f32>,
    pub student: Option<PoseNet<f32>>,
    pub reports: Vec<EpochReport>,
}

impl TrainOutput {
    /// The network used for inference: the student when there is one.
    pub fn final_net(&self) -> &PoseNet<f32> {
        self.student.as_ref().unwrap_or(&self.teacher)
    }
}

/// Epoch-by-epoch driver with checkpointable state.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    data: TrainData<'a>,
    epoch: usize,
    teacher: Learner,
    student: Option<Learner>,
    averaged: Option<AveragedParams<f32>>,
    thresholds: ThresholdState,
    rng_labeled: Rng,
    rng_labeled_aug: Rng,
    rng_unlabeled: Rng,
    rng_unlabeled_aug: Rng,
    reports: Vec<EpochReport>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, data: TrainData<'a>) -> Result<Self> {
        cfg.validate()?;
        Self::check_data(&cfg, &data)?;
        let mut init = stream(cfg.seed, Stream::Init);
        let teacher_net = PoseNet::new(&cfg.model, &mut init)?;
        let n = teacher_net.params.len();
        let (student, averaged) = if cfg.has_student() {
            let net = PoseNet::new(&cfg.model, &mut init)?;
            let avg = AveragedParams::init_from(&teacher_net, cfg.averaging.momentum, cfg.averaging.flavor)?;
            (Some(Learner { net, opt: Adam::new(cfg.optimizer, n) }), Some(avg))
        } else {
            (None, None)
        };
        Ok(Self {
            thresholds: ThresholdState::new(cfg.model.n_joints, cfg.schedule.eta),
            teacher: Learner { net: teacher_net, opt: Adam::new(cfg.optimizer, n) },
            student,
            averaged,
            rng_labeled: stream(cfg.seed, Stream::LabeledOrder),
            rng_labeled_aug: stream(cfg.seed, Stream::LabeledAugment),
            rng_unlabeled: stream(cfg.seed, Stream::UnlabeledOrder),
            rng_unlabeled_aug: stream(cfg.seed, Stream::UnlabeledAugment),
            reports: Vec::new(),
            epoch: 0,
            cfg,
            data,
        })
    }

    pub fn resume(state: TrainState, data: TrainData<'a>) -> Result<Self> {
        let cfg = state.config;
        cfg.validate()?;
        Self::check_data(&cfg, &data)?;
        let [a, b, c, d]: [Rng; 4] =
            state.rngs.try_into().map_err(|_| Error::Checkpoint("expected four random streams".into()))?;
        if cfg.has_student() != state.student.is_some() || cfg.has_student() != state.averaged.is_some() {
            return Err(Error::Checkpoint("student state does not match the config".into()));
        }
        let averaged = state.averaged.as_ref().map(AveragedParams::from_state).transpose()?;
        if let Some(avg) = &averaged {
            if avg.config() != &cfg.model {
                return Err(Error::Checkpoint("averaged network config does not match".into()));
            }
        }
        Ok(Self {
            teacher: Learner::from_state(&state.teacher, &cfg.model)?,
            student: state.student.as_ref().map(|s| Learner::from_state(s, &cfg.model)).transpose()?,
            averaged,
            thresholds: state.thresholds,
            rng_labeled: a,
            rng_labeled_aug: b,
            rng_unlabeled: c,
            rng_unlabeled_aug: d,
            reports: state.reports,
            epoch: state.epoch,
            cfg,
            data,
        })
    }

    fn check_data(cfg: &TrainConfig, data: &TrainData<'_>) -> Result<()> {
        if data.labeled.is_empty() {
            return Err(Error::Empty("training needs at least one labeled sample".into()));
        }
        let nj = cfg.model.n_joints;
        let size = cfg.model.in_size;
        for s in data.labeled.iter().chain(data.unlabeled) {
            if s.frame.size() != size {
                return Err(Error::Config(format!("sample {} is {} px, model.in_size is {size}", s.id, s.frame.size())));
            }
            if let Some(j) = &s.joints {
                if j.len() != nj {
                    return Err(Error::Config(format!("sample {} has {} joints, model.n_joints is {nj}", s.id, j.len())));
                }
            }
        }
        if data.labeled.iter().any(|s| s.joints.is_none()) {
            return Err(Error::Contract("labeled set contains a sample without joints".into()));
        }
        Ok(())
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg.total_epochs()
    }

    pub fn reports(&self) -> &[EpochReport] {
        &self.reports
    }

    pub fn teacher(&self) -> &PoseNet<f32> {
        &self.teacher.net
    }

    pub fn student(&self) -> Option<&PoseNet<f32>> {
        self.student.as_ref().map(|s| &s.net)
    }

    pub fn thresholds(&self) -> &ThresholdState {
        &self.thresholds
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            format_version: STATE_VERSION,
            config: self.cfg.clone(),
            epoch: self.epoch,
            teacher: self.teacher.to_state(),
            student: self.student.as_ref().map(Learner::to_state),
            averaged: self.averaged.as_ref().map(AveragedParams::to_state),
            thresholds: self.thresholds.clone(),
            rngs: vec![
                self.rng_labeled.clone(),
                self.rng_labeled_aug.clone(),
                self.rng_unlabeled.clone(),
                self.rng_unlabeled_aug.clone(),
            ],
            reports: self.reports.clone(),
        }
    }

    fn steps_per_epoch(&self) -> usize {
        let c = &self.cfg;
        c.steps_per_epoch.unwrap_or_else(|| {
            self.data.labeled.len().div_ceil(c.batch_labeled).max(self.data.unlabeled.len().div_ceil(c.batch_unlabeled))
        })
    }

    fn draw_augs(rng: &mut Rng, ranges: &AugmentationRanges, n: usize, on: bool) -> Vec<AffineAugmentation> {
        (0..n).map(|_| if on { sample_augmentation(rng, ranges) } else { AffineAugmentation::identity() }).collect()
    }

    fn labeled_batch(&mut self, idx: &[usize]) -> Result<LabeledBatch> {
        let samples: Vec<&Sample> = idx.iter().map(|&i| &self.data.labeled[i]).collect();
        let augs = Self::draw_augs(&mut self.rng_labeled_aug, &self.cfg.augmentation, idx.len(), self.cfg.augment_supervised);
        LabeledBatch::prepare(&samples, &augs)
    }

    /// Runs the next epoch and returns its report.
    pub fn run_epoch(&mut self) -> Result<EpochReport> {
        if self.is_done() {
            return Err(Error::Contract("training already finished".into()));
        }
        let report = if self.epoch < self.cfg.epochs { self.train_epoch()? } else { self.fine_tune_epoch()? };
        if !report.is_finite() {
            return Err(Error::NonFinite { ids: vec![format!("epoch {}", report.epoch)] });
        }
        self.reports.push(report.clone());
        self.epoch += 1;
        Ok(report)
    }

    fn train_epoch(&mut self) -> Result<EpochReport> {
        let t = self.epoch;
        let cfg = self.cfg.clone();
        let lr = lr_at(cfg.base_lr, t as f64, cfg.epochs as f64)?;
        let steps = self.steps_per_epoch();
        let lab = cycled_batches(self.data.labeled.len(), cfg.batch_labeled, steps, &mut self.rng_labeled);
        let use_unlabeled = cfg.has_student() && !self.data.unlabeled.is_empty();
        let unl = if use_unlabeled {
            cycled_batches(self.data.unlabeled.len(), cfg.batch_unlabeled, steps, &mut self.rng_unlabeled)
        } else {
            Vec::new()
        };
        let step_cfg = cfg.step_config();
        let warmup = !self.thresholds.initialized;
        let (mut sup, mut cons, mut stud) = (0.0, Acc::default(), Acc::default());
        let (mut n_pseudo, mut n_skipped) = (0, 0);
        for s in 0..steps {
            let lb = self.labeled_batch(&lab[s])?;
            let ub = match unl.get(s) {
                Some(idx) => {
                    let samples: Vec<&Sample> = idx.iter().map(|&i| &self.data.unlabeled[i]).collect();
                    let augs = Self::draw_augs(&mut self.rng_unlabeled_aug, &cfg.augmentation, idx.len(), true);
                    Some(UnlabeledBatch::prepare(&samples, &augs))
                }
                None => None,
            };
            let l = teacher_step(
                &mut self.teacher.net,
                &mut self.teacher.opt,
                &lb,
                ub.as_ref(),
                &step_cfg,
                &mut self.thresholds,
                lr,
            )?;
            sup += l.supervised;
            cons.add(l.consistency);
            n_pseudo += l.pseudo_labels;
            n_skipped += l.skipped;
            if let (Some(student), Some(avg), Some(ub)) = (self.student.as_mut(), self.averaged.as_mut(), ub.as_ref()) {
                avg.update(&self.teacher.net)?;
                let masks = (cfg.student_mask && cfg.masking && !l.masks.is_empty()).then_some(&l.masks[..]);
                stud.add(student_step(&mut student.net, &mut student.opt, avg, ub, masks, lr)?);
            }
        }
        let rho_target = (cfg.lambda > 0.0 && use_unlabeled && cfg.masking).then(|| rho_at(&cfg.rho(), t as f64)).transpose()?;
        let acceptance: Vec<f64> = self.thresholds.fractions().into_iter().map(|f| f.unwrap_or(0.0)).collect();
        if rho_target.is_some() {
            if warmup {
                let warm_c = self.pool_uncertainty()?;
                let rho_next = rho_at(&cfg.rho(), (t + 1).min(cfg.epochs) as f64)?;
                self.thresholds.init_thresholds(&warm_c, rho_next)?;
            } else {
                self.thresholds.end_epoch(rho_target.unwrap_or(0.0));
            }
        }
        let mut report = EpochReport {
            epoch: t,
            phase: Phase::Train,
            lr,
            supervised_loss: sup / steps as f64,
            consistency_loss: cons.mean(),
            student_loss: stud.mean(),
            rho_target,
            acceptance,
            thresholds: self.thresholds.initialized.then(|| self.thresholds.t.clone()),
            pseudo_labels: n_pseudo,
            skipped: n_skipped,
            teacher_error_mm: None,
            student_error_mm: None,
            pseudo_error_masked_mm: None,
            pseudo_error_unmasked_mm: None,
        };
        self.diagnose(&mut report)?;
        Ok(report)
    }

    /// Per-joint spread of the teacher's pseudo-labels over the whole
    /// unlabeled pool, as the network stands now.
    fn pool_uncertainty(&self) -> Result<Vec<Vec<f64>>> {
        let frames: Vec<&DepthFrame> = self.data.unlabeled.iter().map(|s| &s.frame).collect();
        let scored = score_pseudo_labels(self.teacher.net.view(), &frames, self.cfg.batch_unlabeled)?;
        let mut out = vec![Vec::with_capacity(scored.len()); self.cfg.model.n_joints];
        for s in &scored {
            for (j, &c) in s.uncertainty.iter().enumerate() {
                out[j].push(c);
            }
        }
        Ok(out)
    }

    fn fine_tune_epoch(&mut self) -> Result<EpochReport> {
        let cfg = self.cfg.clone();
        let lr = cfg.base_lr * cfg.fine_tune_lr_scale;
        let steps = self.data.labeled.len().div_ceil(cfg.batch_labeled);
        let lab = cycled_batches(self.data.labeled.len(), cfg.batch_labeled, steps, &mut self.rng_labeled);
        let mut sup = 0.0;
        for idx in &lab {
            let lb = self.labeled_batch(idx)?;
            let learner = self.student.as_mut().unwrap_or(&mut self.teacher);
            sup += supervised_step(&mut learner.net, &mut learner.opt, &lb, lr)?;
        }
        let mut report = EpochReport {
            epoch: self.epoch,
            phase: Phase::FineTune,
            lr,
            supervised_loss: sup / steps as f64,
            consistency_loss: None,
            student_loss: None,
            rho_target: None,
            acceptance: Vec::new(),
            thresholds: self.thresholds.initialized.then(|| self.thresholds.t.clone()),
            pseudo_labels: 0,
            skipped: 0,
            teacher_error_mm: None,
            student_error_mm: None,
            pseudo_error_masked_mm: None,
            pseudo_error_unmasked_mm: None,
        };
        self.diagnose(&mut report)?;
        Ok(report)
    }

    fn diagnose(&self, report: &mut EpochReport) -> Result<()> {
        if !self.cfg.diagnostics {
            return Ok(());
        }
        if let Some(test) = self.data.test.filter(|t| !t.is_empty()) {
            report.teacher_error_mm = Some(evaluate(self.teacher.net.view(), test)?.mean_error_mm);
            if let Some(s) = &self.student {
                report.student_error_mm = Some(evaluate(s.net.view(), test)?.mean_error_mm);
            }
        }
        if let Some(truth) = self.data.unlabeled_truth {
            if report.phase == Phase::Train && !self.data.unlabeled.is_empty() && self.cfg.has_student() {
                let acc = pseudo_label_accuracy(
                    self.teacher.net.view(),
                    self.data.unlabeled,
                    truth,
                    &self.thresholds.thresholds(),
                    self.cfg.batch_unlabeled,
                )?;
                report.pseudo_error_masked_mm = acc.masked_mm;
                report.pseudo_error_unmasked_mm = Some(acc.unmasked_mm);
            }
        }
        Ok(())
    }

    pub fn finish(self) -> TrainOutput {
        TrainOutput { teacher: self.teacher.net, student: self.student.map(|s| s.net), reports: self.reports }
    }
}

#[derive(Default)]
struct Acc {
    sum: f64,
    n: usize,
}

impl Acc {
    fn add(&mut self, v: Option<f64>) {
        if let Some(v) = v {
            self.sum += v;
            self.n += 1;
        }
    }

    fn mean(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

/// Runs every epoch. Reports are written as JSON lines to `log` if given.
pub fn train(cfg: TrainConfig, data: TrainData<'_>, mut log: Option<&mut dyn Write>) -> Result<TrainOutput> {
    let mut trainer = Trainer::new(cfg, data)?;
    while !trainer.is_done() {
        let r = trainer.run_epoch()?;
        if let Some(w) = log.as_mut() {
            write_report(*w, &r)?;
        }
    }
    Ok(trainer.finish())
}

pub fn write_report(w: &mut dyn Write, r: &EpochReport) -> Result<()> {
    let line = serde_json::to_string(r)?;
    writeln!(w, "{line}").map_err(|e| Error::io("<report sink>", e))
}
