//! Joint-error metrics and the pseudo-label accuracy diagnostic.

use serde::{Deserialize, Serialize};

use super::step::{crop_joints, uncertainties};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::geometry::{DepthFrame, JointFrame, JointSet};
use crate::model::{decode_bundle, frames_to_tensor, NetView};
use crate::nn::{Mode, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mean_error_mm: f64,
    pub per_joint_mm: Vec<f64>,
    pub samples: usize,
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Mean Euclidean distance over all joints and samples, camera frame.
pub fn mean_joint_error(pred: &[JointSet], truth: &[JointSet]) -> Result<EvalResult> {
    if pred.is_empty() {
        return Err(Error::Empty("no samples to evaluate".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    let nj = truth[0].len();
    let mut per_joint = vec![0.0; nj];
    for (p, t) in pred.iter().zip(truth) {
        p.expect_frame(JointFrame::CameraMm)?;
        t.expect_frame(JointFrame::CameraMm)?;
        if p.len() != nj || t.len() != nj {
            return Err(Error::Shape("joint count differs between samples".into()));
        }
        for j in 0..nj {
            per_joint[j] += dist(p.coords[j], t.coords[j]);
        }
    }
    let n = pred.len() as f64;
    per_joint.iter_mut().for_each(|e| *e /= n);
    let mean = per_joint.iter().sum::<f64>() / nj as f64;
    Ok(EvalResult { mean_error_mm: mean, per_joint_mm: per_joint, samples: pred.len() })
}

/// Camera-frame predictions for a set of crops.
pub fn predict<T: Real>(net: NetView<'_, T>, frames: &[&DepthFrame], mode: Mode, batch_size: usize) -> Result<Vec<JointSet>> {
    let mut out = Vec::with_capacity(frames.len());
    for chunk in frames.chunks(batch_size.max(1)) {
        let bundle = net.forward(&frames_to_tensor(chunk)?, mode)?;
        for (joints, frame) in crop_joints(&bundle, &decode_bundle(&bundle)).into_iter().zip(chunk) {
            let coords = joints.into_iter().map(|p| frame.crop.unproject(p)).collect::<Result<Vec<_>>>()?;
            out.push(JointSet::new(coords, JointFrame::CameraMm));
        }
    }
    Ok(out)
}

/// Eval-mode error of a network on a labeled set.
pub fn evaluate<T: Real>(net: NetView<'_, T>, test: &[Sample]) -> Result<EvalResult> {
    if test.is_empty() {
        return Err(Error::Empty("empty test set".into()));
    }
    let truth = test
        .iter()
        .map(|s| s.joints.clone().ok_or_else(|| Error::Contract(format!("test sample {} has no labels", s.id))))
        .collect::<Result<Vec<_>>>()?;
    let frames: Vec<&DepthFrame> = test.iter().map(|s| &s.frame).collect();
    mean_joint_error(&predict(net, &frames, Mode::Eval, 32)?, &truth)
}

/// Pseudo-label error over all joints and over accepted joints only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelAccuracy {
    pub unmasked_mm: f64,
    /// `None` when no joint was accepted.
    pub masked_mm: Option<f64>,
    pub accepted_fraction: f64,
    pub per_joint_acceptance: Vec<f64>,
}

/// A pseudo-label with its per-joint spread.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPrediction {
    pub joints: JointSet,
    pub uncertainty: Vec<f64>,
}

/// Scores predictions against private labels; `thresholds` decides which
/// joints count as accepted (`c < t`).
pub fn pseudo_label_accuracy_of(
    preds: &[ScoredPrediction],
    truth: &[JointSet],
    thresholds: &[f64],
) -> Result<PseudoLabelAccuracy> {
    if preds.is_empty() || preds.len() != truth.len() {
        return Err(Error::Shape(format!("{} pseudo-labels for {} labels", preds.len(), truth.len())));
    }
    let nj = thresholds.len();
    let (mut all, mut acc, mut n_acc) = (0.0, 0.0, 0usize);
    let mut per_joint = vec![0usize; nj];
    for (p, t) in preds.iter().zip(truth) {
        p.joints.expect_frame(JointFrame::CameraMm)?;
        t.expect_frame(JointFrame::CameraMm)?;
        for j in 0..nj {
            let e = dist(p.joints.coords[j], t.coords[j]);
            all += e;
            if p.uncertainty[j] < thresholds[j] {
                acc += e;
                n_acc += 1;
                per_joint[j] += 1;
            }
        }
    }
    let total = (preds.len() * nj) as f64;
    Ok(PseudoLabelAccuracy {
        unmasked_mm: all / total,
        masked_mm: (n_acc > 0).then(|| acc / n_acc as f64),
        accepted_fraction: n_acc as f64 / total,
        per_joint_acceptance: per_joint.iter().map(|&k| k as f64 / preds.len() as f64).collect(),
    })
}

/// Teacher pseudo-labels on unaugmented crops, produced the same way as
/// during training (batch statistics, no update).
pub fn score_pseudo_labels<T: Real>(teacher: NetView<'_, T>, frames: &[&DepthFrame], batch_size: usize) -> Result<Vec<ScoredPrediction>> {
    let mut out = Vec::with_capacity(frames.len());
    for chunk in frames.chunks(batch_size.max(1)) {
        let bundle = teacher.forward(&frames_to_tensor(chunk)?, Mode::BatchStats)?;
        let dec = decode_bundle(&bundle);
        let unc = uncertainties(&bundle, &dec)?;
        for ((joints, c), frame) in crop_joints(&bundle, &dec).into_iter().zip(unc).zip(chunk) {
            let coords = joints.into_iter().map(|p| frame.crop.unproject(p)).collect::<Result<Vec<_>>>()?;
            out.push(ScoredPrediction { joints: JointSet::new(coords, JointFrame::CameraMm), uncertainty: c });
        }
    }
    Ok(out)
}

/// Masked and unmasked pseudo-label error of `teacher` on an unlabeled set
/// whose labels are held privately in `truth`.
pub fn pseudo_label_accuracy<T: Real>(
    teacher: NetView<'_, T>,
    unlabeled: &[Sample],
    truth: &[Option<JointSet>],
    thresholds: &[f64],
    batch_size: usize,
) -> Result<PseudoLabelAccuracy> {
    let truth = truth
        .iter()
        .map(|t| t.clone().ok_or_else(|| Error::Contract("pseudo-label accuracy needs private labels".into())))
        .collect::<Result<Vec<_>>>()?;
    let frames: Vec<&DepthFrame> = unlabeled.iter().map(|s| &s.frame).collect();
    pseudo_label_accuracy_of(&score_pseudo_labels(teacher, &frames, batch_size)?, &truth, thresholds)
}

/// A predictor that returns the true labels with zero spread.
pub fn oracle_predictions(truth: &[JointSet]) -> Vec<ScoredPrediction> {
    truth.iter().map(|t| ScoredPrediction { joints: t.clone(), uncertainty: vec![0.0; t.len()] }).collect()
}
