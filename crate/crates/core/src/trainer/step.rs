//! Single optimisation steps for the teacher and the student.

use serde::{Deserialize, Serialize};

use crate::averaging::AveragedParams;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::geometry::{apply_to_frame, apply_to_joints, AffineAugmentation, CropSpec, DepthFrame};
use crate::model::{decode_backward, decode_bundle, frames_to_tensor, Decoded, HeatmapBundle, NetView, PoseNet};
use crate::nn::{Adam, Mode, Real};
use crate::pseudolabel::{heatmap_std, make_mask, weighted_distance_grad, MaskWeights};
use crate::schedule::ThresholdState;

/// Which forward pass supplies the heatmap spread used for masking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyView {
    /// The stop-gradient pass on the unaugmented crop.
    PseudoLabel,
    /// The trained pass on the augmented crop.
    Prediction,
}

/// Loss settings shared by the step functions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepConfig {
    pub lambda: f64,
    pub masking: bool,
    pub mask: MaskWeights,
    pub uncertainty_view: UncertaintyView,
}

/// Per-coordinate factors taking crop `(u, v, z)` to millimetre-comparable
/// units.
pub fn mm_scale(crop: &CropSpec) -> [f64; 3] {
    let px = crop.cube_mm / crop.out_size as f64;
    [px, px, crop.half_depth()]
}

/// Labeled crops with targets in crop coordinates.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub ids: Vec<String>,
    pub frames: Vec<DepthFrame>,
    pub targets: Vec<Vec<[f64; 3]>>,
}

impl LabeledBatch {
    /// Applies one augmentation per sample to frame and labels.
    pub fn prepare(samples: &[&Sample], augs: &[AffineAugmentation]) -> Result<Self> {
        assert_eq!(samples.len(), augs.len(), "one augmentation per sample");
        let mut out = Self { ids: vec![], frames: vec![], targets: vec![] };
        for (s, aug) in samples.iter().zip(augs) {
            let joints = s.joints.as_ref().ok_or_else(|| Error::Contract(format!("sample {} has no labels", s.id)))?;
            let moved = apply_to_joints(aug, joints, s.frame.crop.center_xyz)?;
            let frame = apply_to_frame(aug, &s.frame);
            let targets = moved.coords.iter().map(|&p| frame.crop.project(p)).collect::<Result<Vec<_>>>()?;
            out.ids.push(s.id.clone());
            out.frames.push(frame);
            out.targets.push(targets);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Unlabeled crops with their augmented views.
#[derive(Debug, Clone)]
pub struct UnlabeledBatch {
    pub ids: Vec<String>,
    pub frames: Vec<DepthFrame>,
    pub augmented: Vec<DepthFrame>,
    pub augs: Vec<AffineAugmentation>,
}

impl UnlabeledBatch {
    pub fn prepare(samples: &[&Sample], augs: &[AffineAugmentation]) -> Self {
        assert_eq!(samples.len(), augs.len(), "one augmentation per sample");
        Self {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            frames: samples.iter().map(|s| s.frame.clone()).collect(),
            augmented: samples.iter().zip(augs).map(|(s, a)| apply_to_frame(a, &s.frame)).collect(),
            augs: augs.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Decoded joints of every sample in crop coordinates.
pub fn crop_joints<T: Real>(bundle: &HeatmapBundle<T>, dec: &Decoded<T>) -> Vec<Vec<[f64; 3]>> {
    (0..bundle.n)
        .map(|n| (0..bundle.joints).map(|j| dec.crop_uvz(n, j, bundle.joints, bundle.stride)).collect())
        .collect()
}

/// Heatmap spread per sample and joint, in heatmap cells.
pub fn uncertainties<T: Real>(bundle: &HeatmapBundle<T>, dec: &Decoded<T>) -> Result<Vec<Vec<f64>>> {
    let plane = bundle.h * bundle.w;
    (0..bundle.n)
        .map(|n| {
            (0..bundle.joints)
                .map(|j| {
                    let m = n * bundle.joints + j;
                    let [u, v, _] = dec.grid[m];
                    heatmap_std(&dec.probs[m * plane..(m + 1) * plane], bundle.w, [u.f64(), v.f64()])
                })
                .collect()
        })
        .collect()
}

/// Stop-gradient targets for an unlabeled batch: predictions on the
/// unaugmented crops, carried into each augmented crop. The values are plain
/// numbers; nothing downstream differentiates through them.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    pub targets: Vec<Vec<[f64; 3]>>,
    pub uncertainty: Vec<Vec<f64>>,
}

pub fn pseudo_labels<T: Real>(snapshot: NetView<'_, T>, batch: &UnlabeledBatch) -> Result<PseudoLabels> {
    let refs: Vec<&DepthFrame> = batch.frames.iter().collect();
    pseudo_labels_from(snapshot.forward(&frames_to_tensor(&refs)?, Mode::BatchStats)?, batch)
}

/// Same values as [`pseudo_labels`], computed in train mode so the
/// unaugmented batch also enters the running normalisation statistics.
pub fn pseudo_labels_tracked<T: Real>(teacher: &mut PoseNet<T>, batch: &UnlabeledBatch) -> Result<PseudoLabels> {
    let refs: Vec<&DepthFrame> = batch.frames.iter().collect();
    pseudo_labels_from(teacher.forward(&frames_to_tensor(&refs)?, Mode::Train)?, batch)
}

fn pseudo_labels_from<T: Real>(bundle: HeatmapBundle<T>, batch: &UnlabeledBatch) -> Result<PseudoLabels> {
    let dec = decode_bundle(&bundle);
    let uncertainty = uncertainties(&bundle, &dec)?;
    let targets = crop_joints(&bundle, &dec)
        .into_iter()
        .zip(batch.augs.iter().zip(&batch.frames))
        .map(|(joints, (aug, frame))| joints.into_iter().map(|p| aug.apply_crop(p, &frame.crop)).collect())
        .collect();
    Ok(PseudoLabels { targets, uncertainty })
}

/// Mean masked distance over a batch and its gradient w.r.t. the decoded
/// grid coordinates.
pub struct BatchDistance<T> {
    /// `None` when every sample had zero total weight.
    pub loss: Option<f64>,
    pub d_grid: Vec<[T; 3]>,
    pub used: usize,
    pub skipped: usize,
}

pub fn batch_distance<T: Real>(
    bundle: &HeatmapBundle<T>,
    dec: &Decoded<T>,
    frames: &[DepthFrame],
    targets: &[Vec<[f64; 3]>],
    masks: Option<&[Vec<f64>]>,
) -> Result<BatchDistance<T>> {
    let (nj, stride) = (bundle.joints, bundle.stride as f64);
    let ones = vec![1.0; nj];
    let mut d_grid = vec![[T::zero(); 3]; bundle.n * nj];
    let mut total = 0.0;
    let (mut used, mut skipped) = (0, 0);
    let mut grads = Vec::with_capacity(bundle.n);
    for n in 0..bundle.n {
        if targets[n].len() != nj {
            return Err(Error::Config(format!("targets have {} joints, network predicts {nj}", targets[n].len())));
        }
        let s = mm_scale(&frames[n].crop);
        let scaled = |p: [f64; 3]| [p[0] * s[0], p[1] * s[1], p[2] * s[2]];
        let pred: Vec<[f64; 3]> = (0..nj).map(|j| scaled(dec.crop_uvz(n, j, nj, bundle.stride))).collect();
        let tgt: Vec<[f64; 3]> = targets[n].iter().map(|&p| scaled(p)).collect();
        let mask = masks.map_or(&ones[..], |m| &m[n][..]);
        match weighted_distance_grad(&pred, &tgt, mask) {
            Ok((d, g)) => {
                total += d;
                used += 1;
                grads.push(Some((g, s)));
            }
            Err(Error::ZeroWeight) => {
                skipped += 1;
                grads.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Ok(BatchDistance { loss: None, d_grid, used, skipped });
    }
    let inv = 1.0 / used as f64;
    for (n, g) in grads.into_iter().enumerate() {
        let Some((g, s)) = g else { continue };
        for (j, gj) in g.iter().enumerate() {
            d_grid[n * nj + j] = [
                T::lit(gj[0] * s[0] * stride * inv),
                T::lit(gj[1] * s[1] * stride * inv),
                T::lit(gj[2] * s[2] * inv),
            ];
        }
    }
    Ok(BatchDistance { loss: Some(total * inv), d_grid, used, skipped })
}

/// Supervised loss on a labeled batch and its parameter gradient.
pub fn supervised_grads<T: Real>(net: &mut PoseNet<T>, batch: &LabeledBatch) -> Result<(f64, Vec<T>)> {
    let refs: Vec<&DepthFrame> = batch.frames.iter().collect();
    let (bundle, tape) = net.forward_tape(&frames_to_tensor(&refs)?, Mode::Train)?;
    let dec = decode_bundle(&bundle);
    let dist = batch_distance(&bundle, &dec, &batch.frames, &batch.targets, None)?;
    let (d2, dz) = decode_backward(&bundle, &dec, &dist.d_grid);
    Ok((dist.loss.unwrap_or(0.0), net.backward(&tape, &d2, &dz)))
}

/// What one teacher step saw.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TeacherLosses {
    pub supervised: f64,
    pub consistency: Option<f64>,
    /// Unlabeled samples that contributed to the consistency term.
    pub pseudo_labels: usize,
    /// Unlabeled samples dropped because every joint had zero weight.
    pub skipped: usize,
    /// Per-sample joint weights used for the consistency term.
    pub masks: Vec<Vec<f64>>,
    pub accepted: Vec<Vec<bool>>,
    pub uncertainty: Vec<Vec<f64>>,
}

/// Consistency loss of predictions on the augmented crops against fixed
/// pseudo-labels, and its gradient w.r.t. the trained parameters only.
pub fn consistency_grads<T: Real>(
    net: &mut PoseNet<T>,
    batch: &UnlabeledBatch,
    pseudo: &PseudoLabels,
    cfg: &StepConfig,
    thresholds: &ThresholdState,
) -> Result<(TeacherLosses, Vec<T>)> {
    let refs: Vec<&DepthFrame> = batch.augmented.iter().collect();
    let (bundle, tape) = net.forward_tape(&frames_to_tensor(&refs)?, Mode::Train)?;
    let dec = decode_bundle(&bundle);
    let uncertainty = match cfg.uncertainty_view {
        UncertaintyView::PseudoLabel => pseudo.uncertainty.clone(),
        UncertaintyView::Prediction => uncertainties(&bundle, &dec)?,
    };
    let t = thresholds.thresholds();
    let (masks, accepted): (Vec<_>, Vec<_>) = uncertainty
        .iter()
        .map(|c| {
            if cfg.masking {
                let m = make_mask(c, &t, cfg.mask);
                (m.weights, m.accepted)
            } else {
                (vec![1.0; c.len()], vec![true; c.len()])
            }
        })
        .unzip();
    let dist = batch_distance(&bundle, &dec, &batch.augmented, &pseudo.targets, Some(&masks))?;
    let (d2, dz) = decode_backward(&bundle, &dec, &dist.d_grid);
    let grads = net.backward(&tape, &d2, &dz);
    let losses = TeacherLosses {
        supervised: 0.0,
        consistency: dist.loss,
        pseudo_labels: dist.used,
        skipped: dist.skipped,
        masks,
        accepted,
        uncertainty,
    };
    Ok((losses, grads))
}

fn check_finite(values: &[f64], ids: &[&[String]]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        return Ok(());
    }
    Err(Error::NonFinite { ids: ids.iter().flat_map(|s| s.iter().cloned()).collect() })
}

fn grads_finite<T: Real>(g: &[T]) -> bool {
    g.iter().all(|v| v.is_finite())
}

/// One teacher update: supervised term plus `lambda` times the masked
/// consistency term. Acceptance flags are recorded into `thresholds`.
pub fn teacher_step<T: Real>(
    teacher: &mut PoseNet<T>,
    opt: &mut Adam<T>,
    labeled: &LabeledBatch,
    unlabeled: Option<&UnlabeledBatch>,
    cfg: &StepConfig,
    thresholds: &mut ThresholdState,
    lr: f64,
) -> Result<TeacherLosses> {
    let unlabeled = unlabeled.filter(|u| !u.is_empty() && cfg.lambda > 0.0);
    // Pseudo-labels come from the parameters as they stand before this update.
    let pseudo = unlabeled.map(|u| pseudo_labels_tracked(teacher, u)).transpose()?;
    let (sup, mut grads) = supervised_grads(teacher, labeled)?;
    let mut losses = TeacherLosses { supervised: sup, ..TeacherLosses::default() };
    if let (Some(u), Some(p)) = (unlabeled, pseudo.as_ref()) {
        let (l, g) = consistency_grads(teacher, u, p, cfg, thresholds)?;
        let lambda = T::lit(cfg.lambda);
        for (a, &b) in grads.iter_mut().zip(&g) {
            *a = *a + lambda * b;
        }
        if cfg.masking {
            for acc in &l.accepted {
                thresholds.record(acc);
            }
        }
        losses = TeacherLosses { supervised: sup, ..l };
    }
    let ids: Vec<&[String]> = match unlabeled {
        Some(u) => vec![&labeled.ids, &u.ids],
        None => vec![&labeled.ids],
    };
    check_finite(&[losses.supervised, losses.consistency.unwrap_or(0.0)], &ids)?;
    if !grads_finite(&grads) {
        return Err(Error::NonFinite { ids: ids.iter().flat_map(|s| s.iter().cloned()).collect() });
    }
    opt.step(&mut teacher.params, &grads, lr);
    Ok(losses)
}

/// Plain supervised update.
pub fn supervised_step<T: Real>(net: &mut PoseNet<T>, opt: &mut Adam<T>, batch: &LabeledBatch, lr: f64) -> Result<f64> {
    let (loss, grads) = supervised_grads(net, batch)?;
    check_finite(&[loss], &[&batch.ids])?;
    if !grads_finite(&grads) {
        return Err(Error::NonFinite { ids: batch.ids.clone() });
    }
    opt.step(&mut net.params, &grads, lr);
    Ok(loss)
}

/// Targets for the student: the averaged network on the augmented crops.
pub fn averaged_targets<T: Real>(avg: &AveragedParams<T>, batch: &UnlabeledBatch) -> Result<Vec<Vec<[f64; 3]>>> {
    let refs: Vec<&DepthFrame> = batch.augmented.iter().collect();
    let bundle = avg.as_net().forward(&frames_to_tensor(&refs)?, Mode::Eval)?;
    Ok(crop_joints(&bundle, &decode_bundle(&bundle)))
}

/// Student loss without an update, with the student in eval mode.
pub fn student_loss<T: Real>(
    student: NetView<'_, T>,
    avg: &AveragedParams<T>,
    batch: &UnlabeledBatch,
    masks: Option<&[Vec<f64>]>,
) -> Result<Option<f64>> {
    let targets = averaged_targets(avg, batch)?;
    let refs: Vec<&DepthFrame> = batch.augmented.iter().collect();
    let bundle = student.forward(&frames_to_tensor(&refs)?, Mode::Eval)?;
    let dec = decode_bundle(&bundle);
    Ok(batch_distance(&bundle, &dec, &batch.augmented, &targets, masks)?.loss)
}

/// Gradient of the student loss w.r.t. the student parameters. The averaged
/// network only supplies values.
pub fn student_grads<T: Real>(
    student: &mut PoseNet<T>,
    avg: &AveragedParams<T>,
    batch: &UnlabeledBatch,
    masks: Option<&[Vec<f64>]>,
) -> Result<(Option<f64>, Vec<T>)> {
    let targets = averaged_targets(avg, batch)?;
    let refs: Vec<&DepthFrame> = batch.augmented.iter().collect();
    let (bundle, tape) = student.forward_tape(&frames_to_tensor(&refs)?, Mode::Train)?;
    let dec = decode_bundle(&bundle);
    let dist = batch_distance(&bundle, &dec, &batch.augmented, &targets, masks)?;
    let (d2, dz) = decode_backward(&bundle, &dec, &dist.d_grid);
    Ok((dist.loss, student.backward(&tape, &d2, &dz)))
}

/// One student update against the averaged teacher on the same augmented
/// view. Returns `None` when every sample was masked out.
pub fn student_step<T: Real>(
    student: &mut PoseNet<T>,
    opt: &mut Adam<T>,
    avg: &AveragedParams<T>,
    batch: &UnlabeledBatch,
    masks: Option<&[Vec<f64>]>,
    lr: f64,
) -> Result<Option<f64>> {
    if batch.is_empty() {
        return Ok(None);
    }
    let (loss, grads) = student_grads(student, avg, batch, masks)?;
    check_finite(&[loss.unwrap_or(0.0)], &[&batch.ids])?;
    if !grads_finite(&grads) {
        return Err(Error::NonFinite { ids: batch.ids.clone() });
    }
    if loss.is_some() {
        opt.step(&mut student.params, &grads, lr);
    }
    Ok(loss)
}
