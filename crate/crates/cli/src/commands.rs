use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Args;
use eqhand::data::{generate_synthetic, load_generic, save_generic, split, Dataset};
use eqhand::rng::{stream, Stream};
use eqhand::schedule::ThresholdState;
use eqhand::trainer::{
    evaluate, oracle_predictions, pseudo_label_accuracy_of, score_pseudo_labels, write_report, EvalResult,
    PseudoLabelAccuracy, TrainState,
};
use eqhand::{DepthFrame, EpochReport, JointSet, PoseNet, Sample, TrainData, Trainer};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{CliError, ConfigArgs};

type Result<T> = std::result::Result<T, CliError>;

const STATE_FILE: &str = "state.json";
const REPORTS_FILE: &str = "reports.jsonl";
const TEACHER_FILE: &str = "teacher.json";
const MODEL_FILE: &str = "model.json";
const THRESHOLDS_FILE: &str = "thresholds.json";

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(v).map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("{s}");
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let s = serde_json::to_vec_pretty(v).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(path, s).map_err(|e| io_err(path, e))
}

fn is_nonempty_dir(dir: &Path) -> Result<bool> {
    if !dir.exists() {
        return Ok(false);
    }
    if !dir.is_dir() {
        return Err(CliError::Usage(format!("{} exists and is not a directory", dir.display())));
    }
    Ok(fs::read_dir(dir).map_err(|e| io_err(dir, e))?.next().is_some())
}

/// Creates `dir`, refusing to reuse a non-empty one unless forced.
fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if is_nonempty_dir(dir)? && !force {
        return Err(CliError::Usage(format!("{} is not empty; pass --force to overwrite", dir.display())));
    }
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(CliError::Usage(format!("dataset directory {} does not exist", dir.display())));
    }
    let ds = load_generic(dir)?;
    if ds.is_empty() {
        return Err(CliError::Usage(format!("dataset {} has no records", dir.display())));
    }
    Ok(ds)
}

// ---------------------------------------------------------------- generate

#[derive(Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Number of samples.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory to write.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Serialize)]
struct GenerateSummary {
    out: PathBuf,
    samples: usize,
    n_joints: usize,
    seed: u64,
}

pub fn generate(a: GenerateArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.cfg.config.as_deref(), &a.cfg.set)?;
    if let Some(n) = a.n {
        cfg.generate.n = n;
    }
    if let Some(s) = a.seed {
        cfg.generate.seed = s;
    }
    if cfg.generate.n == 0 {
        return Err(CliError::Usage("generate.n must be at least 1".into()));
    }
    prepare_out_dir(&a.out, a.force)?;
    if a.force {
        remove_dataset_files(&a.out)?;
    }
    let mut rng = stream(cfg.generate.seed, Stream::Data);
    let ds = generate_synthetic(&cfg.generate.synthetic, cfg.generate.n, &mut rng)?;
    save_generic(&ds, &a.out)?;
    cfg.echo(&a.out)?;
    let summary = GenerateSummary { out: a.out, samples: ds.len(), n_joints: ds.meta.n_joints, seed: cfg.generate.seed };
    if a.json {
        print_json(&summary)
    } else {
        println!("wrote {} samples with {} joints to {}", summary.samples, summary.n_joints, summary.out.display());
        Ok(())
    }
}

/// Removes records and metadata left by an earlier `generate`.
fn remove_dataset_files(dir: &Path) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str());
        if path.is_file() && matches!(ext, Some("json" | "depth" | "toml")) {
            fs::remove_file(&path).map_err(|e| io_err(&path, e))?;
        }
    }
    Ok(())
}

// ------------------------------------------------------------------- train

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Training dataset; overrides `data.train`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Held-out dataset; overrides `data.test`.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Seeds the split and the training streams.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    label_fraction: Option<f64>,
    #[arg(long)]
    unlabeled_fraction: Option<f64>,
    /// Train the teacher on labeled data only.
    #[arg(long)]
    supervised_only: bool,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
    /// Continue the run saved in `--out`; its echoed config is used.
    #[arg(long, conflicts_with_all = ["config", "set", "data", "test", "seed", "label_fraction", "unlabeled_fraction", "supervised_only", "force"])]
    resume: bool,
    /// Stop after this many epochs in this invocation.
    #[arg(long)]
    stop_after: Option<usize>,
    #[arg(long)]
    json: bool,
}

#[derive(Serialize)]
struct TrainSummary {
    out: PathBuf,
    finished: bool,
    epochs_run: usize,
    next_epoch: usize,
    total_epochs: usize,
    labeled: usize,
    unlabeled: usize,
    final_report: Option<EpochReport>,
    test: Option<EvalResult>,
}

fn train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(a.cfg.config.as_deref(), &a.cfg.set)?;
    if let Some(d) = &a.data {
        cfg.data.train = Some(d.clone());
    }
    if let Some(d) = &a.test {
        cfg.data.test = Some(d.clone());
    }
    if let Some(s) = a.seed {
        cfg.split.seed = s;
        cfg.train.seed = s;
    }
    if let Some(f) = a.label_fraction {
        cfg.split.label_fraction = f;
    }
    if let Some(f) = a.unlabeled_fraction {
        cfg.split.unlabeled_fraction = f;
    }
    if a.supervised_only {
        cfg.train.supervised_only = true;
    }
    cfg.split.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let cfg = if a.resume {
        let path = a.out.join("config.toml");
        if !path.exists() {
            return Err(CliError::Usage(format!("nothing to resume: {} not found", path.display())));
        }
        RunConfig::load(Some(&path), &[])?
    } else {
        train_config(&a)?
    };

    let train_dir =
        cfg.data.train.clone().ok_or_else(|| CliError::Usage("no training data: pass --data or set data.train".into()))?;
    let pool = load_dataset(&train_dir)?.samples(cfg.train.model.in_size)?;
    if let Some(s) = pool.iter().find(|s| s.joints.is_none()) {
        return Err(CliError::Usage(format!("training pool must be fully labeled; record {} has no joints", s.id)));
    }
    let parts = split(&pool, &cfg.split)?;
    let test = match &cfg.data.test {
        Some(d) => Some(load_dataset(d)?.samples(cfg.train.model.in_size)?),
        None => None,
    };
    let data = TrainData {
        labeled: &parts.labeled,
        unlabeled: &parts.unlabeled,
        unlabeled_truth: Some(&parts.unlabeled_truth),
        test: test.as_deref(),
    };

    let state_path = a.out.join(STATE_FILE);
    let reports_path = a.out.join(REPORTS_FILE);
    let mut trainer = if a.resume {
        let state = TrainState::load(&state_path)?;
        if state.config != cfg.train {
            return Err(CliError::Usage(format!("{} does not match config.toml", state_path.display())));
        }
        Trainer::resume(state, data)?
    } else {
        prepare_out_dir(&a.out, a.force)?;
        cfg.echo(&a.out)?;
        Trainer::new(cfg.train.clone(), data)?
    };

    // The log always mirrors the reports held in the state.
    let mut log = fs::File::create(&reports_path).map_err(|e| io_err(&reports_path, e))?;
    for r in trainer.reports() {
        write_report(&mut log, r)?;
    }

    let mut ran = 0;
    while !trainer.is_done() && a.stop_after.is_none_or(|k| ran < k) {
        let r = trainer.run_epoch()?;
        write_report(&mut log, &r)?;
        log.flush().map_err(|e| io_err(&reports_path, e))?;
        trainer.state().save(&state_path)?;
        if !a.json {
            eprintln!("{}", progress_line(&r));
        }
        ran += 1;
    }

    let finished = trainer.is_done();
    let thresholds_path = a.out.join(THRESHOLDS_FILE);
    write_json(&thresholds_path, trainer.thresholds())?;
    trainer.teacher().save(&a.out.join(TEACHER_FILE))?;
    let mut test_result = None;
    if finished {
        let final_net = trainer.student().unwrap_or(trainer.teacher());
        final_net.save(&a.out.join(MODEL_FILE))?;
        if let Some(t) = &test {
            test_result = Some(evaluate(final_net.view(), t)?);
        }
    }
    let summary = TrainSummary {
        out: a.out.clone(),
        finished,
        epochs_run: ran,
        next_epoch: trainer.epoch(),
        total_epochs: cfg.train.total_epochs(),
        labeled: parts.labeled.len(),
        unlabeled: parts.unlabeled.len(),
        final_report: trainer.reports().last().cloned(),
        test: test_result,
    };
    if a.json {
        return print_json(&summary);
    }
    if finished {
        println!("finished {} epochs in {}", summary.total_epochs, a.out.display());
        if let Some(t) = &summary.test {
            println!("test error {:.3} mm over {} samples", t.mean_error_mm, t.samples);
        }
    } else {
        println!(
            "stopped before epoch {} of {}; continue with `eqhand train --resume --out {}`",
            summary.next_epoch,
            summary.total_epochs,
            a.out.display()
        );
    }
    Ok(())
}

fn progress_line(r: &EpochReport) -> String {
    let mut s = format!("epoch {:>3} {:?} lr {:.2e} sup {:.4}", r.epoch, r.phase, r.lr, r.supervised_loss);
    if let Some(c) = r.consistency_loss {
        s += &format!(" cons {c:.4}");
    }
    if let Some(c) = r.student_loss {
        s += &format!(" student {c:.4}");
    }
    if let Some(e) = r.teacher_error_mm {
        s += &format!(" teacher {e:.2}mm");
    }
    if let Some(e) = r.student_error_mm {
        s += &format!(" student {e:.2}mm");
    }
    s
}

// -------------------------------------------------------------------- eval

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint file, or a run directory holding `model.json`.
    #[arg(long)]
    model: PathBuf,
    /// Labeled dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Also write `eval.json` and the resolved config here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

fn resolve_checkpoint(path: &Path, file: &str) -> PathBuf {
    if path.is_dir() {
        path.join(file)
    } else {
        path.to_path_buf()
    }
}

fn load_net(path: &Path) -> Result<PoseNet<f32>> {
    if !path.exists() {
        return Err(CliError::Usage(format!("checkpoint {} not found", path.display())));
    }
    Ok(PoseNet::load(path, None)?)
}

fn labeled_samples(ds: &Dataset, net: &PoseNet<f32>, what: &str) -> Result<(Vec<Sample>, Vec<JointSet>)> {
    let nj = net.config().n_joints;
    if ds.meta.n_joints != nj {
        return Err(CliError::Usage(format!("dataset has {} joints, checkpoint predicts {nj}", ds.meta.n_joints)));
    }
    let samples = ds.samples(net.config().in_size)?;
    let missing = samples.iter().filter(|s| s.joints.is_none()).count();
    if missing > 0 {
        return Err(CliError::Usage(format!(
            "{what} compares predictions with labels, but {missing} of {} records are unlabeled",
            samples.len()
        )));
    }
    let truth = samples.iter().map(|s| s.joints.clone().unwrap()).collect();
    Ok((samples, truth))
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    checkpoint: &'a Path,
    #[serde(flatten)]
    result: &'a EvalResult,
    joint_names: &'a [String],
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = resolve_checkpoint(&a.model, MODEL_FILE);
    let net = load_net(&ckpt)?;
    let ds = load_dataset(&a.data)?;
    let (samples, _) = labeled_samples(&ds, &net, "eval")?;
    let result = evaluate(net.view(), &samples)?;
    let out = EvalOutput { checkpoint: &ckpt, result: &result, joint_names: &ds.meta.joint_names };
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        write_json(&dir.join("eval.json"), &out)?;
        let mut cfg = RunConfig::default();
        cfg.data.test = Some(a.data.clone());
        cfg.train.model = net.config().clone();
        cfg.echo(dir)?;
    }
    if a.json {
        return print_json(&out);
    }
    println!("mean error {:.3} mm over {} samples", result.mean_error_mm, result.samples);
    for (j, e) in result.per_joint_mm.iter().enumerate() {
        let name = ds.meta.joint_names.get(j).map(String::as_str).unwrap_or("?");
        println!("  {j:>2} {name:<12} {e:8.3} mm");
    }
    Ok(())
}

// ---------------------------------------------------------------- diagnose

#[derive(Args)]
pub struct DiagnoseArgs {
    /// Teacher checkpoint, or a run directory holding `teacher.json`.
    #[arg(long, required_unless_present = "oracle")]
    model: Option<PathBuf>,
    /// Dataset whose labels are held back as private ground truth.
    #[arg(long)]
    data: PathBuf,
    /// `inf`, a comma-separated list, or a JSON file (a list or saved
    /// threshold state). Defaults to the run's `thresholds.json`, else `inf`.
    #[arg(long)]
    thresholds: Option<String>,
    /// Score the labels themselves instead of a network.
    #[arg(long)]
    oracle: bool,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Serialize)]
struct EpochRow {
    epoch: usize,
    rho_target: Option<f64>,
    acceptance: f64,
    masked_mm: Option<f64>,
    unmasked_mm: Option<f64>,
}

#[derive(Serialize)]
struct DiagnoseOutput {
    thresholds: Vec<Option<f64>>,
    /// Rows taken from the run's report log, when there is one.
    epochs: Vec<EpochRow>,
    checkpoint: PseudoLabelAccuracy,
}

fn parse_thresholds(spec: &str, nj: usize) -> Result<Vec<f64>> {
    let spec = spec.trim();
    let list = if spec.eq_ignore_ascii_case("inf") {
        vec![f64::INFINITY; nj]
    } else if Path::new(spec).is_file() {
        read_threshold_file(Path::new(spec))?
    } else {
        spec.split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| CliError::Usage(format!("bad threshold `{v}`"))))
            .collect::<Result<Vec<_>>>()?
    };
    if list.len() != nj {
        return Err(CliError::Usage(format!("{} thresholds for {nj} joints", list.len())));
    }
    if list.iter().any(|t| t.is_nan()) {
        return Err(CliError::Usage("thresholds must not be NaN".into()));
    }
    Ok(list)
}

fn read_threshold_file(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    if let Ok(state) = serde_json::from_str::<ThresholdState>(&text) {
        return Ok(state.thresholds());
    }
    // `null` stands for an unbounded threshold.
    let list: Vec<Option<f64>> =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    Ok(list.into_iter().map(|t| t.unwrap_or(f64::INFINITY)).collect())
}

fn report_rows(path: &Path) -> Result<Vec<EpochRow>> {
    if !path.is_file() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let r: EpochReport = serde_json::from_str(line)
            .map_err(|e| CliError::Runtime(format!("{} line {}: {e}", path.display(), i + 1)))?;
        if r.pseudo_error_unmasked_mm.is_none() {
            continue;
        }
        let acc = if r.acceptance.is_empty() { 1.0 } else { r.acceptance.iter().sum::<f64>() / r.acceptance.len() as f64 };
        rows.push(EpochRow {
            epoch: r.epoch,
            rho_target: r.rho_target,
            acceptance: acc,
            masked_mm: r.pseudo_error_masked_mm,
            unmasked_mm: r.pseudo_error_unmasked_mm,
        });
    }
    Ok(rows)
}

fn fmt_mm(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.3}"))
}

pub fn diagnose(a: DiagnoseArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let nj = ds.meta.n_joints;
    let run_dir = a.model.as_ref().filter(|p| p.is_dir());

    let thresholds = match (&a.thresholds, run_dir) {
        (Some(spec), _) => parse_thresholds(spec, nj)?,
        (None, Some(dir)) if dir.join(THRESHOLDS_FILE).is_file() => {
            let t = read_threshold_file(&dir.join(THRESHOLDS_FILE))?;
            if t.len() != nj {
                return Err(CliError::Usage(format!("{} thresholds for {nj} joints", t.len())));
            }
            t
        }
        (None, _) => vec![f64::INFINITY; nj],
    };

    let checkpoint = if a.oracle {
        let truth = ds
            .records
            .iter()
            .map(|r| {
                r.joints.clone().ok_or_else(|| {
                    CliError::Usage(format!("diagnose compares pseudo-labels with labels; record {} is unlabeled", r.id))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        pseudo_label_accuracy_of(&oracle_predictions(&truth), &truth, &thresholds)?
    } else {
        let model = a.model.as_ref().expect("clap requires --model without --oracle");
        let net = load_net(&resolve_checkpoint(model, TEACHER_FILE))?;
        let (samples, truth) = labeled_samples(&ds, &net, "diagnose")?;
        let frames: Vec<&DepthFrame> = samples.iter().map(|s| &s.frame).collect();
        let preds = score_pseudo_labels(net.view(), &frames, a.batch)?;
        pseudo_label_accuracy_of(&preds, &truth, &thresholds)?
    };

    let epochs = match run_dir {
        Some(dir) => report_rows(&dir.join(REPORTS_FILE))?,
        None => Vec::new(),
    };
    let out = DiagnoseOutput {
        thresholds: thresholds.iter().map(|&t| t.is_finite().then_some(t)).collect(),
        epochs,
        checkpoint,
    };
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        write_json(&dir.join("diagnose.json"), &out)?;
        let mut cfg = RunConfig::default();
        cfg.data.test = Some(a.data.clone());
        cfg.echo(dir)?;
    }
    if a.json {
        return print_json(&out);
    }
    println!("{:>6} {:>6} {:>8} {:>10} {:>10}", "epoch", "rho", "accept", "masked", "unmasked");
    for r in &out.epochs {
        println!(
            "{:>6} {:>6} {:>8.3} {:>10} {:>10}",
            r.epoch,
            r.rho_target.map_or_else(|| "-".into(), |v| format!("{v:.3}")),
            r.acceptance,
            fmt_mm(r.masked_mm),
            fmt_mm(r.unmasked_mm)
        );
    }
    let c = &out.checkpoint;
    println!(
        "{:>6} {:>6} {:>8.3} {:>10} {:>10}",
        "ckpt",
        "-",
        c.accepted_fraction,
        fmt_mm(c.masked_mm),
        fmt_mm(Some(c.unmasked_mm))
    );
    Ok(())
}
