//! `lungseg` command line: synthesize phantoms, split, train, retrain,
//! evaluate, export point clouds and scan annotations.
//!
//! Exit codes: 0 success, 1 any error (including bad usage), 2 QA findings.

mod echo;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use lungseg::evaluation::{self, EvalOptions, F1Formula, Roi};
use lungseg::preprocess::{self, make_split, read_split_file, write_split_file, Partition, SlideSample};
use lungseg::reconstruct3d::{self, PointKind, PointSource};
use lungseg::training::{self, Hyperparams, OptimizerKind, TrainHistory};
use lungseg::unet::{self, weights, UNetConfig};
use lungseg::volume_io::{self, Defect, PhantomSpec};
use lungseg::{DatasetSplit, ModelState, SAMPLE_SIZE};

use echo::Echo;

#[derive(Parser)]
#[command(name = "lungseg", version, about = "Lung CT lesion segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic phantom bundle.
    Synth(SynthArgs),
    /// Build a class-balanced train/validation/test split file.
    Split(SplitArgs),
    /// Train a fresh U-Net.
    Train(TrainArgs),
    /// Continue training existing weights on new data.
    Retrain(RetrainArgs),
    /// Score weights on bundles and write a metrics report.
    Evaluate(EvaluateArgs),
    /// Export an x,y,z,value point cloud.
    Export3d(ExportArgs),
    /// Scan bundles for impossible lesion annotations.
    Qa(QaArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output bundle directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "phantom")]
    volume_id: String,
    #[arg(long, default_value_t = 16)]
    slides: usize,
    #[arg(long, default_value_t = 320)]
    height: usize,
    #[arg(long, default_value_t = 320)]
    width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    covid_fraction: f64,
    #[arg(long, default_value_t = -850.0, allow_hyphen_values = true)]
    lung_hu_mean: f64,
    #[arg(long, default_value_t = 30.0)]
    lung_hu_std: f64,
    #[arg(long, default_value_t = -500.0, allow_hyphen_values = true)]
    lesion_hu_mean: f64,
    #[arg(long, default_value_t = 40.0)]
    lesion_hu_std: f64,
    #[arg(long, default_value_t = 1)]
    lesion_count_min: usize,
    #[arg(long, default_value_t = 3)]
    lesion_count_max: usize,
    #[arg(long, default_value_t = 10.0)]
    lesion_radius_min: f64,
    #[arg(long, default_value_t = 24.0)]
    lesion_radius_max: f64,
    #[arg(long, default_value_t = 8)]
    vessels: usize,
    /// Plant lesion pixels outside the lung: SLIDE:PIXELS.
    #[arg(long, value_parser = parse_defect_arg)]
    inject_outside_lung: Vec<(usize, usize)>,
    /// Clear a slide's lung and leave a lesion mark: SLIDE:PIXELS.
    #[arg(long, value_parser = parse_defect_arg)]
    inject_without_lung: Vec<(usize, usize)>,
}

fn parse_defect_arg(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or("expected SLIDE:PIXELS")?;
    Ok((a.parse().map_err(|_| "bad slide index")?, b.parse().map_err(|_| "bad pixel count")?))
}

#[derive(Args)]
struct DataArgs {
    /// Bundle directories; repeat for several volumes.
    #[arg(long = "data", required = true)]
    data: Vec<PathBuf>,
    /// Model input edge length.
    #[arg(long, default_value_t = SAMPLE_SIZE)]
    input_size: usize,
}

#[derive(Args)]
struct SplitSizes {
    /// Training samples (half covid-positive); defaults to the balanced pool
    /// minus the validation share.
    #[arg(long)]
    train: Option<usize>,
    /// Validation samples (half covid-positive); defaults to a fifth of the
    /// balanced pool, at least 2.
    #[arg(long)]
    val: Option<usize>,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

#[derive(Args)]
struct SplitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    sizes: SplitSizes,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct HpArgs {
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 45)]
    batch_size: usize,
    #[arg(long, default_value_t = 10)]
    patience: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    no_shuffle: bool,
    #[arg(long, default_value = "adam", value_parser = ["adam", "sgd"])]
    optimizer: String,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Split file from `lungseg split`; otherwise a split is drawn here.
    #[arg(long)]
    split: Option<PathBuf>,
    #[command(flatten)]
    sizes: SplitSizes,
    #[command(flatten)]
    hp: HpArgs,
    /// Output weight file.
    #[arg(long)]
    out: PathBuf,
    /// History file; defaults to `<out>.history.csv`.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long, default_value_t = training::TRAIN_MAX_EPOCHS)]
    max_epochs: usize,
    #[arg(long, default_value_t = 4)]
    depth: usize,
    #[arg(long, default_value_t = 32)]
    base_filters: usize,
    #[arg(long, default_value_t = 0)]
    init_seed: u64,
}

#[derive(Args)]
struct RetrainArgs {
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long, default_value_t = training::RETRAIN_MAX_EPOCHS)]
    max_epochs: usize,
    /// Weights to continue from.
    #[arg(long)]
    weights: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long = "data", required = true)]
    data: Vec<PathBuf>,
    #[arg(long)]
    weights: PathBuf,
    /// Restrict to one partition of this split file.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = ["train", "validation", "test"])]
    partition: String,
    #[arg(long, default_value_t = evaluation::DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value = "standard", value_parser = ["standard", "paper"])]
    f1_formula: String,
    #[arg(long, default_value = "full", value_parser = ["full", "lung"])]
    roi: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "ct", value_parser = ["ct", "ground_truth", "prediction"])]
    kind: String,
    /// Required for the prediction kind.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = reconstruct3d::DEFAULT_Z_STEP, allow_hyphen_values = true)]
    z_step: f64,
    #[arg(long, default_value_t = evaluation::DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct QaArgs {
    #[arg(long = "data", required = true)]
    data: Vec<PathBuf>,
    /// Also write the listing to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train(a),
        Command::Retrain(a) => retrain(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Export3d(a) => export3d(a),
        Command::Qa(a) => return qa(a),
    }?;
    Ok(ExitCode::SUCCESS)
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut defects: Vec<Defect> =
        a.inject_outside_lung.iter().map(|&(slide, pixels)| Defect::CovidOutsideLung { slide, pixels }).collect();
    defects.extend(a.inject_without_lung.iter().map(|&(slide, pixels)| Defect::CovidWithoutLung { slide, pixels }));
    let spec = PhantomSpec {
        volume_id: a.volume_id.clone(),
        slide_count: a.slides,
        height: a.height,
        width: a.width,
        lung_hu_mean: a.lung_hu_mean,
        lung_hu_std: a.lung_hu_std,
        lesion_hu_mean: a.lesion_hu_mean,
        lesion_hu_std: a.lesion_hu_std,
        lesion_count_range: (a.lesion_count_min, a.lesion_count_max),
        lesion_radius_range: (a.lesion_radius_min, a.lesion_radius_max),
        covid_slide_fraction: a.covid_fraction,
        seed: a.seed,
        vessel_count: a.vessels,
        defects,
        ..PhantomSpec::default()
    };
    let mut echo = Echo::new("synth");
    echo.set("out", a.out.display())
        .set("volume_id", &a.volume_id)
        .set("slides", a.slides)
        .set("height", a.height)
        .set("width", a.width)
        .set("seed", a.seed)
        .set("covid_fraction", a.covid_fraction)
        .set("lung_hu_mean", a.lung_hu_mean)
        .set("lung_hu_std", a.lung_hu_std)
        .set("lesion_hu_mean", a.lesion_hu_mean)
        .set("lesion_hu_std", a.lesion_hu_std)
        .set("lesion_count_range", format!("{}..={}", a.lesion_count_min, a.lesion_count_max))
        .set("lesion_radius_range", format!("{}..={}", a.lesion_radius_min, a.lesion_radius_max))
        .set("vessels", a.vessels)
        .set("defects", format!("{:?}", spec.defects));
    let volume = volume_io::synth_volume(&spec)?;
    volume_io::write_bundle(&volume, &a.out)?;
    echo.write(&a.out)?;
    log::info!("wrote {} slides to {}", volume.slide_count(), a.out.display());
    Ok(())
}

fn load_samples(data: &DataArgs) -> Result<Vec<SlideSample>> {
    let mut all = Vec::new();
    for dir in &data.data {
        let volume = volume_io::load_bundle(dir).with_context(|| format!("loading {}", dir.display()))?;
        all.extend(preprocess::volume_samples(&volume, data.input_size)?);
    }
    if all.is_empty() {
        bail!("no lung-bearing slides in the given bundles");
    }
    Ok(all)
}

/// Requested or default split sizes for a sample pool.
fn split_sizes(samples: &[SlideSample], sizes: &SplitSizes) -> (usize, usize) {
    let pos = samples.iter().filter(|s| s.has_covid).count();
    let balanced = 2 * pos.min(samples.len() - pos);
    let val = sizes.val.unwrap_or_else(|| (balanced / 5).max(2) / 2 * 2);
    let train = sizes.train.unwrap_or_else(|| balanced.saturating_sub(val));
    (train, val)
}

fn draw_split(samples: Vec<SlideSample>, sizes: &SplitSizes, echo: &mut Echo) -> Result<DatasetSplit> {
    let (n_train, n_val) = split_sizes(&samples, sizes);
    echo.set("train_size", n_train).set("val_size", n_val).set("split_seed", sizes.split_seed);
    Ok(make_split(samples, n_train, n_val, sizes.split_seed)?)
}

fn apply_split_file(samples: Vec<SlideSample>, path: &Path) -> Result<DatasetSplit> {
    let assignments = read_split_file(path)?;
    let mut split = DatasetSplit { train: vec![], validation: vec![], test: vec![], seed: 0 };
    let mut by_key: std::collections::HashMap<(String, usize), SlideSample> =
        samples.into_iter().map(|s| ((s.volume_id.clone(), s.slide_index), s)).collect();
    for (id, idx, part) in assignments {
        let s = by_key
            .remove(&(id.clone(), idx))
            .with_context(|| format!("split file names {id}:{idx}, which is not a lung slide of the given data"))?;
        match part {
            Partition::Train => split.train.push(s),
            Partition::Validation => split.validation.push(s),
            Partition::Test => split.test.push(s),
        }
    }
    Ok(split)
}

fn split(a: SplitArgs) -> Result<()> {
    let mut echo = Echo::new("split");
    echo.set("data", join_paths(&a.data.data)).set("input_size", a.data.input_size).set("out", a.out.display());
    let split = draw_split(load_samples(&a.data)?, &a.sizes, &mut echo)?;
    write_split_file(&split, &a.out)?;
    echo.write(&a.out)?;
    log::info!(
        "split {} train / {} validation / {} test",
        split.train.len(),
        split.validation.len(),
        split.test.len()
    );
    Ok(())
}

fn hyperparams(hp: &HpArgs, max_epochs: usize, echo: &mut Echo) -> Hyperparams {
    let out = Hyperparams {
        learning_rate: hp.lr,
        batch_size: hp.batch_size,
        max_epochs,
        early_stop_patience: hp.patience,
        shuffle: !hp.no_shuffle,
        seed: hp.seed,
        optimizer: OptimizerKind::parse(&hp.optimizer).expect("clap restricts the value"),
    };
    echo.set("lr", out.learning_rate)
        .set("batch", out.batch_size)
        .set("max_epochs", out.max_epochs)
        .set("patience", out.early_stop_patience)
        .set("shuffle", out.shuffle)
        .set("seed", out.seed)
        .set("optimizer", out.optimizer.as_str());
    out
}

fn fit_split(fit: &FitArgs, echo: &mut Echo) -> Result<DatasetSplit> {
    echo.set("data", join_paths(&fit.data.data)).set("input_size", fit.data.input_size);
    let samples = load_samples(&fit.data)?;
    match &fit.split {
        Some(p) => {
            echo.set("split", p.display());
            apply_split_file(samples, p)
        }
        None => draw_split(samples, &fit.sizes, echo),
    }
}

fn finish_fit(fit: &FitArgs, model: &ModelState, history: &TrainHistory, echo: &mut Echo) -> Result<()> {
    let history_path = fit.history.clone().unwrap_or_else(|| suffixed(&fit.out, ".history.csv"));
    weights::save_weights(model, &fit.out)?;
    history.write(&history_path)?;
    echo.set("out", fit.out.display())
        .set("history", history_path.display())
        .set("stopped_epoch", history.stopped_epoch)
        .set("best_epoch", history.best_epoch)
        .set("stop_reason", history.stop_reason.as_str())
        .set("training_epochs_consumed", model.training_epochs_consumed);
    echo.write(&fit.out)?;
    log::info!(
        "stopped after epoch {} ({}), kept epoch {}",
        history.stopped_epoch,
        history.stop_reason.as_str(),
        history.best_epoch
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut echo = Echo::new("train");
    let hp = hyperparams(&a.fit.hp, a.max_epochs, &mut echo);
    let cfg = UNetConfig::new(a.depth, a.base_filters, a.fit.data.input_size);
    echo.set("depth", a.depth).set("base_filters", a.base_filters).set("init_seed", a.init_seed);
    let model = unet::build_unet(&cfg, a.init_seed)?;
    let split = fit_split(&a.fit, &mut echo)?;
    let (model, history) = training::train(model, &split, &hp)?;
    finish_fit(&a.fit, &model, &history, &mut echo)
}

fn retrain(a: RetrainArgs) -> Result<()> {
    let mut echo = Echo::new("retrain");
    let hp = hyperparams(&a.fit.hp, a.max_epochs, &mut echo);
    echo.set("weights", a.weights.display());
    let model = weights::load_weights(&a.weights)?;
    if model.config.input_size != a.fit.data.input_size {
        bail!(
            "weights expect {0}x{0} inputs; pass --input-size {0}",
            model.config.input_size
        );
    }
    let split = fit_split(&a.fit, &mut echo)?;
    let (model, history) = training::retrain(model, &split, &hp)?;
    finish_fit(&a.fit, &model, &history, &mut echo)
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let mut echo = Echo::new("evaluate");
    let model = weights::load_weights(&a.weights)?;
    let opts = EvalOptions {
        threshold: a.threshold,
        f1_formula: F1Formula::parse(&a.f1_formula).expect("clap restricts the value"),
        roi: Roi::parse(&a.roi).expect("clap restricts the value"),
    };
    echo.set("data", join_paths(&a.data))
        .set("weights", a.weights.display())
        .set("threshold", opts.threshold)
        .set("f1_formula", opts.f1_formula.as_str())
        .set("roi", opts.roi.as_str())
        .set("out", a.out.display());
    let data = DataArgs { data: a.data.clone(), input_size: model.config.input_size };
    let mut samples = load_samples(&data)?;
    if let Some(p) = &a.split {
        let part = Partition::parse(&a.partition).expect("clap restricts the value");
        echo.set("split", p.display()).set("partition", part.as_str());
        let split = apply_split_file(samples, p)?;
        samples = match part {
            Partition::Train => split.train,
            Partition::Validation => split.validation,
            Partition::Test => split.test,
        };
    }
    let report = evaluation::evaluate(&model, &samples, &opts)?;
    evaluation::write_report(&report, &a.out)?;
    echo.write(&a.out)?;
    let m = report.macro_avg;
    log::info!(
        "{} slides: acc {:.4} pre {:.4} rec {:.4} f1 {:.4} (macro)",
        report.per_slide.len(),
        m.accuracy,
        m.precision,
        m.recall,
        m.f1
    );
    Ok(())
}

fn export3d(a: ExportArgs) -> Result<()> {
    let mut echo = Echo::new("export3d");
    let kind = PointKind::parse(&a.kind).expect("clap restricts the value");
    echo.set("data", a.data.display()).set("kind", kind.as_str()).set("z_step", a.z_step).set("out", a.out.display());
    let volume = volume_io::load_bundle(&a.data)?;
    let predicted;
    let source = match kind {
        PointKind::Ct => PointSource::Ct,
        PointKind::GroundTruth => PointSource::GroundTruth,
        PointKind::Prediction => {
            let Some(w) = &a.weights else {
                bail!("--kind prediction requires --weights");
            };
            echo.set("weights", w.display()).set("threshold", a.threshold);
            predicted = reconstruct3d::predicted_masks(&weights::load_weights(w)?, &volume, a.threshold)?;
            PointSource::Prediction(&predicted)
        }
    };
    let cloud = reconstruct3d::volume_to_points(&volume, source, a.z_step)?;
    reconstruct3d::write_csv(&cloud, &a.out)?;
    echo.write(&a.out)?;
    log::info!("wrote {} points to {}", cloud.rows.len(), a.out.display());
    Ok(())
}

fn qa(a: QaArgs) -> Result<ExitCode> {
    let mut issues = Vec::new();
    for dir in &a.data {
        let volume = volume_io::load_bundle(dir).with_context(|| format!("loading {}", dir.display()))?;
        issues.extend(evaluation::qa_annotations(&volume));
    }
    let listing: String = issues.iter().map(|i| format!("{i}\n")).collect();
    print!("{listing}");
    if let Some(out) = &a.out {
        std::fs::write(out, format!("kind,volume_id,slide,pixels\n{listing}"))
            .with_context(|| format!("writing {}", out.display()))?;
        let mut echo = Echo::new("qa");
        echo.set("data", join_paths(&a.data)).set("out", out.display()).set("issues", issues.len());
        echo.write(out)?;
    }
    Ok(if issues.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn join_paths(paths: &[PathBuf]) -> String {
    paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(";")
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}
