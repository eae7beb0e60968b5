use eqhand::averaging::{AveragedParams, Flavor};
use eqhand::data::{generate_synthetic, split, Sample, SplitSpec, SyntheticHandConfig};
use eqhand::geometry::{AffineAugmentation, CameraIntrinsics, CropSpec, DepthFrame, JointFrame, JointSet};
use eqhand::model::{ModelConfig, PoseNet};
use eqhand::nn::{Adam, AdamConfig};
use eqhand::pseudolabel::MaskWeights;
use eqhand::schedule::ThresholdState;
use eqhand::trainer::*;
use eqhand::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_config() -> ModelConfig {
    ModelConfig { n_joints: 2, in_size: 8, widths: vec![2, 3], bottleneck_blocks: 1, up_stages: 1, bn_momentum: 0.1 }
}

/// Random crops with labels placed inside the crop.
fn toy_samples(n: usize, cfg: &ModelConfig, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = cfg.in_size;
    let intr = CameraIntrinsics::new(240.0, 240.0, 160.0, 120.0).unwrap();
    let crop = CropSpec::new([10.0, -5.0, 400.0], 200.0, size).unwrap();
    (0..n)
        .map(|i| {
            let mut frame = DepthFrame::background(crop, intr);
            frame.pixels.iter_mut().for_each(|p| *p = rng.random_range(-1.0..1.0));
            let coords = (0..cfg.n_joints)
                .map(|_| {
                    let uvz = [
                        rng.random_range(1.0..size as f64 - 2.0),
                        rng.random_range(1.0..size as f64 - 2.0),
                        rng.random_range(-0.5..0.5),
                    ];
                    crop.unproject(uvz).unwrap()
                })
                .collect();
            Sample { id: format!("toy{i}"), frame, joints: Some(JointSet::new(coords, JointFrame::CameraMm)) }
        })
        .collect()
}

fn unlabeled_batch(samples: &[Sample], aug: AffineAugmentation) -> UnlabeledBatch {
    let refs: Vec<&Sample> = samples.iter().collect();
    UnlabeledBatch::prepare(&refs, &vec![aug; refs.len()])
}

fn step_config(masking: bool) -> StepConfig {
    StepConfig { lambda: 1.0, masking, mask: MaskWeights::default(), uncertainty_view: UncertaintyView::PseudoLabel }
}

fn twist() -> AffineAugmentation {
    AffineAugmentation { rotation_deg: 25.0, scale: 1.1, translation_mm: [6.0, -4.0, 10.0] }
}

#[test]
fn identity_view_gives_zero_consistency() {
    let cfg = toy_config();
    let mut net = PoseNet::<f64>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let batch = unlabeled_batch(&toy_samples(4, &cfg, 2), AffineAugmentation::identity());
    let pseudo = pseudo_labels(net.view(), &batch).unwrap();
    let (l, _) = consistency_grads(&mut net, &batch, &pseudo, &step_config(false), &ThresholdState::new(2, 0.05)).unwrap();
    assert!(l.consistency.unwrap().abs() < 1e-9, "{:?}", l.consistency);
}

/// Consistency loss of `net` against fixed targets.
fn frozen_loss(net: &PoseNet<f64>, batch: &UnlabeledBatch, pseudo: &PseudoLabels) -> f64 {
    let mut n = net.clone();
    let (l, _) = consistency_grads(&mut n, batch, pseudo, &step_config(false), &ThresholdState::new(2, 0.05)).unwrap();
    l.consistency.unwrap()
}

#[test]
fn no_gradient_flows_through_pseudo_labels() {
    let cfg = toy_config();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let net = PoseNet::<f64>::new(&cfg, &mut rng).unwrap();
    let batch = unlabeled_batch(&toy_samples(4, &cfg, 4), twist());
    let pseudo = pseudo_labels(net.view(), &batch).unwrap();
    let (_, grads) =
        consistency_grads(&mut net.clone(), &batch, &pseudo, &step_config(false), &ThresholdState::new(2, 0.05)).unwrap();
    let dir: Vec<f64> = (0..grads.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let analytic: f64 = grads.iter().zip(&dir).map(|(g, d)| g * d).sum();
    // The distance is L1, so the step must stay clear of residual kinks.
    let eps = 1e-7;
    let moved = |sign: f64| {
        let mut n = net.clone();
        n.params.iter_mut().zip(&dir).for_each(|(p, d)| *p += sign * eps * d);
        n
    };
    let (plus, minus) = (moved(1.0), moved(-1.0));
    // Only the trained branch moves: targets stay at the snapshot values.
    let frozen = (frozen_loss(&plus, &batch, &pseudo) - frozen_loss(&minus, &batch, &pseudo)) / (2.0 * eps);
    // Both branches move: targets are recomputed from the moved weights.
    let full_at = |n: &PoseNet<f64>| frozen_loss(n, &batch, &pseudo_labels(n.view(), &batch).unwrap());
    let full = (full_at(&plus) - full_at(&minus)) / (2.0 * eps);
    let scale = analytic.abs().max(1e-3);
    assert!((frozen - analytic).abs() / scale < 1e-4, "frozen {frozen} analytic {analytic}");
    assert!((full - analytic).abs() > 100.0 * (frozen - analytic).abs(), "full {full} analytic {analytic}");

    // Moving only the snapshot changes the targets but not the returned gradient.
    let mut snap = net.clone();
    snap.params.iter_mut().zip(&dir).for_each(|(p, d)| *p += 0.05 * d);
    let other = pseudo_labels(snap.view(), &batch).unwrap();
    assert_ne!(other.targets, pseudo.targets);
    let (_, again) =
        consistency_grads(&mut net.clone(), &batch, &pseudo, &step_config(false), &ThresholdState::new(2, 0.05)).unwrap();
    assert_eq!(again, grads);
}

#[test]
fn teacher_step_labels_with_pre_update_weights() {
    let cfg = toy_config();
    let net = PoseNet::<f64>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let samples = toy_samples(6, &cfg, 6);
    let refs: Vec<&Sample> = samples[..3].iter().collect();
    let lb = LabeledBatch::prepare(&refs, &[AffineAugmentation::identity(); 3]).unwrap();
    let ub = unlabeled_batch(&samples[3..], twist());
    let sc = StepConfig { lambda: 0.5, ..step_config(false) };
    let n = net.params.len();

    let mut a = net.clone();
    let mut opt_a = Adam::new(AdamConfig::default(), n);
    teacher_step(&mut a, &mut opt_a, &lb, Some(&ub), &sc, &mut ThresholdState::new(2, 0.05), 1e-2).unwrap();

    let mut b = net.clone();
    let pseudo = pseudo_labels(net.view(), &ub).unwrap();
    let (_, gs) = supervised_grads(&mut b, &lb).unwrap();
    let (_, gu) = consistency_grads(&mut b, &ub, &pseudo, &sc, &ThresholdState::new(2, 0.05)).unwrap();
    let g: Vec<f64> = gs.iter().zip(&gu).map(|(s, u)| s + 0.5 * u).collect();
    Adam::new(AdamConfig::default(), n).step(&mut b.params, &g, 1e-2);
    assert_eq!(a.params, b.params);
}

#[test]
fn masking_records_acceptance() {
    let cfg = toy_config();
    let mut net = PoseNet::<f64>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let samples = toy_samples(5, &cfg, 8);
    let refs: Vec<&Sample> = samples[..2].iter().collect();
    let lb = LabeledBatch::prepare(&refs, &[AffineAugmentation::identity(); 2]).unwrap();
    let ub = unlabeled_batch(&samples[2..], twist());
    let mut th = ThresholdState::with_thresholds(vec![0.0, f64::INFINITY], 0.05);
    let mut opt = Adam::new(AdamConfig::default(), net.params.len());
    let l = teacher_step(&mut net, &mut opt, &lb, Some(&ub), &step_config(true), &mut th, 1e-3).unwrap();
    assert_eq!(l.masks, vec![vec![0.1, 1.0]; 3]);
    let f = th.fractions();
    assert_eq!((f[0], f[1]), (Some(0.0), Some(1.0)));
}

#[test]
fn binary_mask_with_nothing_accepted_skips_samples() {
    let cfg = toy_config();
    let mut net = PoseNet::<f64>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let ub = unlabeled_batch(&toy_samples(3, &cfg, 10), twist());
    let pseudo = pseudo_labels(net.view(), &ub).unwrap();
    let sc = StepConfig { mask: MaskWeights { accepted: 1.0, rejected: 0.0 }, ..step_config(true) };
    let th = ThresholdState::with_thresholds(vec![0.0, 0.0], 0.05);
    let (l, g) = consistency_grads(&mut net, &ub, &pseudo, &sc, &th).unwrap();
    assert_eq!((l.consistency, l.pseudo_labels, l.skipped), (None, 0, 3));
    assert!(g.iter().all(|v| *v == 0.0));
}

#[test]
fn non_finite_input_names_the_batch() {
    let cfg = toy_config();
    let mut net = PoseNet::<f64>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let mut samples = toy_samples(2, &cfg, 12);
    samples[1].frame.pixels[3] = f32::NAN;
    let refs: Vec<&Sample> = samples.iter().collect();
    let lb = LabeledBatch::prepare(&refs, &[AffineAugmentation::identity(); 2]).unwrap();
    let mut opt = Adam::new(AdamConfig::default(), net.params.len());
    match supervised_step(&mut net, &mut opt, &lb, 1e-3) {
        Err(Error::NonFinite { ids }) => assert!(ids.contains(&"toy1".to_string())),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn student_copied_from_average_has_zero_loss() {
    let cfg = toy_config();
    let net = PoseNet::<f64>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(13)).unwrap();
    let avg = AveragedParams::init_from(&net, 0.9, Flavor::Eman).unwrap();
    let student = avg.to_pose_net().unwrap();
    let ub = unlabeled_batch(&toy_samples(4, &cfg, 14), twist());
    assert_eq!(student_loss(student.view(), &avg, &ub, None).unwrap(), Some(0.0));
    let other = PoseNet::<f64>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(15)).unwrap();
    assert!(student_loss(other.view(), &avg, &ub, None).unwrap().unwrap() > 0.0);
}

#[test]
fn student_fits_a_fixed_teacher() {
    let cfg = toy_config();
    let teacher = PoseNet::<f64>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(16)).unwrap();
    let avg = AveragedParams::init_from(&teacher, 0.9, Flavor::Eman).unwrap();
    let mut student = PoseNet::<f64>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(17)).unwrap();
    let ub = unlabeled_batch(&toy_samples(4, &cfg, 18), AffineAugmentation::identity());
    let mut opt = Adam::new(AdamConfig { weight_decay: 0.0, ..AdamConfig::default() }, student.params.len());
    let first = student_step(&mut student, &mut opt, &avg, &ub, None, 1e-2).unwrap().unwrap();
    let mut last = first;
    for _ in 0..50 {
        last = student_step(&mut student, &mut opt, &avg, &ub, None, 1e-2).unwrap().unwrap();
    }
    assert!(last < 0.5 * first, "first {first} last {last}");
}

#[test]
fn eman_follows_the_closed_form() {
    let cfg = toy_config();
    let mut net = PoseNet::<f64>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(19)).unwrap();
    let m: f64 = 0.7;
    let x0 = (net.params[0], net.stats[0]);
    let mut eman = AveragedParams::init_from(&net, m, Flavor::Eman).unwrap();
    let mut ema = AveragedParams::init_from(&net, m, Flavor::Ema).unwrap();
    let script = [(1.0, 2.0), (-3.0, 0.5), (4.0, 8.0), (0.25, -1.0)];
    for &(p, s) in &script {
        net.params[0] = p;
        net.stats[0] = s;
        eman.update(&net).unwrap();
        ema.update(&net).unwrap();
    }
    let k = script.len() as i32;
    let mut want = (m.powi(k) * x0.0, m.powi(k) * x0.1);
    for (i, &(p, s)) in script.iter().enumerate() {
        let w = (1.0 - m) * m.powi(k - 1 - i as i32);
        want.0 += w * p;
        want.1 += w * s;
    }
    assert!((eman.params[0] - want.0).abs() < 1e-12);
    assert!((eman.stats[0] - want.1).abs() < 1e-12);
    assert!((ema.params[0] - want.0).abs() < 1e-12);
    assert_eq!(ema.stats[0], -1.0);
}

struct Fixture {
    split: eqhand::data::Split,
    test: Vec<Sample>,
}

fn fixture() -> Fixture {
    let ds = generate_synthetic(&SyntheticHandConfig::default(), 60, &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
    let samples = ds.samples(ModelConfig::small().in_size).unwrap();
    let (train, test) = samples.split_at(48);
    let split = split(train, &SplitSpec { label_fraction: 0.25, seed: 2, ..Default::default() }).unwrap();
    Fixture { split, test: test.to_vec() }
}

impl Fixture {
    fn data(&self) -> TrainData<'_> {
        TrainData {
            labeled: &self.split.labeled,
            unlabeled: &self.split.unlabeled,
            unlabeled_truth: Some(&self.split.unlabeled_truth),
            test: Some(&self.test),
        }
    }
}

fn short_run() -> TrainConfig {
    TrainConfig {
        model: ModelConfig::small(),
        epochs: 3,
        batch_labeled: 4,
        batch_unlabeled: 4,
        steps_per_epoch: Some(3),
        base_lr: 1e-3,
        fine_tune_fraction: 0.34,
        seed: 5,
        ..Default::default()
    }
}

fn run(cfg: TrainConfig, data: TrainData<'_>) -> TrainOutput {
    train(cfg, data, None).unwrap()
}

#[test]
fn runs_are_deterministic() {
    let f = fixture();
    let (a, b) = (run(short_run(), f.data()), run(short_run(), f.data()));
    assert_eq!(a.reports.len(), 4);
    assert_eq!(a.reports, b.reports);
    assert_eq!(a.student.as_ref().unwrap().params, b.student.as_ref().unwrap().params);
    assert_eq!(a.teacher.params, b.teacher.params);
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let f = fixture();
    let whole = run(short_run(), f.data());
    let mut t = Trainer::new(short_run(), f.data()).unwrap();
    t.run_epoch().unwrap();
    t.run_epoch().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.json");
    t.state().save(&path).unwrap();
    drop(t);
    let mut t = Trainer::resume(TrainState::load(&path).unwrap(), f.data()).unwrap();
    assert_eq!(t.epoch(), 2);
    while !t.is_done() {
        t.run_epoch().unwrap();
    }
    let resumed = t.finish();
    assert_eq!(resumed.reports, whole.reports);
    assert_eq!(resumed.teacher.params, whole.teacher.params);
    assert_eq!(resumed.student.unwrap().params, whole.student.unwrap().params);
}

#[test]
fn zero_lambda_teacher_equals_the_baseline() {
    let f = fixture();
    let cfg = TrainConfig { fine_tune_fraction: 0.0, ..short_run() };
    let ssl = run(TrainConfig { lambda: 0.0, ..cfg.clone() }, f.data());
    let base = run(TrainConfig { supervised_only: true, ..cfg }, f.data());
    assert_eq!(ssl.teacher.params, base.teacher.params);
    assert_eq!(ssl.teacher.stats, base.teacher.stats);
    for (a, b) in ssl.reports.iter().zip(&base.reports) {
        assert_eq!(a.supervised_loss.to_bits(), b.supervised_loss.to_bits());
        assert_eq!(a.teacher_error_mm, b.teacher_error_mm);
    }
}

#[test]
fn warmup_sets_thresholds() {
    let f = fixture();
    let mut t = Trainer::new(short_run(), f.data()).unwrap();
    assert!(!t.thresholds().initialized);
    let r = t.run_epoch().unwrap();
    assert!(t.thresholds().initialized);
    assert_eq!(r.acceptance, vec![1.0; 14]);
    assert_eq!(r.thresholds.as_ref().map(Vec::len), Some(14));
    let r = t.run_epoch().unwrap();
    assert!(r.pseudo_error_masked_mm.is_some() || r.acceptance.iter().all(|&a| a == 0.0));
    assert!(r.teacher_error_mm.unwrap() > 0.0 && r.student_error_mm.unwrap() > 0.0);
}

#[test]
fn report_lines_are_json() {
    let f = fixture();
    let cfg = TrainConfig { epochs: 1, fine_tune_fraction: 0.0, ..short_run() };
    let mut buf = Vec::new();
    train(cfg, f.data(), Some(&mut buf)).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1);
    let back: EpochReport = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(back.epoch, 0);
}

#[test]
fn mismatched_inputs_are_config_errors() {
    let f = fixture();
    let cfg = TrainConfig { model: ModelConfig { in_size: 64, ..ModelConfig::small() }, ..short_run() };
    assert!(matches!(Trainer::new(cfg, f.data()), Err(Error::Config(_))));
    let cfg = TrainConfig { lambda: -1.0, ..short_run() };
    assert!(matches!(Trainer::new(cfg, f.data()), Err(Error::Config(_))));
}
