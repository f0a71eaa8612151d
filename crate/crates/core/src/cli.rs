//! Command-line front end: `synth | train | thresholds | predict | eval | kappa`.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::inference::{parse_prediction_csv, predict_record, write_prediction};
use crate::metrics::{
    challenge_score, class_stats, cohens_kappa, optimize_thresholds, parse_rater_csv, ThresholdVector, WeightMatrix,
};
use crate::model::{Model, ModelConfig, WidthScale};
use crate::preprocess::{prepare_record, PreparedRecord};
use crate::record_io::{load_dataset, ClassMap, ClassSet, EcgRecord, NUM_CLASSES};
use crate::synth::{generate_dataset, write_dataset, DatasetSpec, SynthClass};
use crate::training::{parse_heldout, train_model, write_run, Scoring, ThresholdMode, TrainConfig};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub const DEFAULT_SEED: u64 = 20200;

#[derive(Debug, Parser)]
#[command(name = "ecg-senet", version, about = "SE-ResNet 12-lead ECG classifier")]
pub struct Cli {
    /// Worker threads for data loading and inference (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a labelled synthetic dataset.
    Synth(SynthArgs),
    /// Cross-validated training into a run directory.
    Train(TrainArgs),
    /// Re-tune thresholds from a run's saved held-out probabilities.
    Thresholds(ThresholdArgs),
    /// Classify every record in a directory.
    Predict(PredictArgs),
    /// Score prediction files against labelled records.
    Eval(EvalArgs),
    /// Cohen's kappa between two raters.
    Kappa(KappaArgs),
}

#[derive(Debug, Args)]
pub struct ClassArgs {
    /// Class map file (`abbrev,code|code,scored` lines); defaults to the built-in map.
    #[arg(long)]
    pub class_map: Option<PathBuf>,
    /// Weight matrix CSV; defaults to the identity.
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

impl ClassArgs {
    fn load(&self) -> Result<(ClassMap, WeightMatrix)> {
        let map = match &self.class_map {
            Some(p) => ClassMap::load(p)?,
            None => ClassMap::default_map(),
        };
        let weights = match &self.weights {
            Some(p) => WeightMatrix::load(p, &map)?,
            None => WeightMatrix::identity(),
        };
        Ok((map, weights))
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Total record count, spread evenly over the chosen classes.
    #[arg(long)]
    pub n: usize,
    /// Comma-separated subset of SNR,LAD,RAD,SB,STach,AF.
    #[arg(long, default_value = "SNR,LAD,RAD,SB,STach,AF")]
    pub classes: String,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 10.0)]
    pub duration: f64,
    #[arg(long, default_value_t = 500)]
    pub sampling_rate: u32,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Channel multiplier such as `1/4`.
    #[arg(long, default_value = "1")]
    pub width_scale: WidthScale,
    #[arg(long, default_value_t = 16)]
    pub se_reduction: usize,
    /// Tune one threshold vector on all out-of-fold predictions.
    #[arg(long)]
    pub pooled_thresholds: bool,
    /// Skip per-epoch held-out scoring.
    #[arg(long)]
    pub no_validation: bool,
    #[command(flatten)]
    pub classes: ClassArgs,
}

#[derive(Debug, Args)]
pub struct ThresholdArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Directory for the re-tuned `fold<i>/thresholds.csv` files.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub pooled: bool,
    #[command(flatten)]
    pub classes: ClassArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Fold whose model is used when not ensembling.
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    /// Average every fold's model; thresholds default to the fold mean.
    #[arg(long)]
    pub ensemble: bool,
    /// Threshold CSV overriding the run's tuned thresholds.
    #[arg(long)]
    pub thresholds: Option<PathBuf>,
    #[arg(long)]
    pub class_map: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Labelled records.
    #[arg(long)]
    pub data: PathBuf,
    /// Per-record prediction CSVs.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Optional path for the per-class statistics CSV.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub classes: ClassArgs,
}

#[derive(Debug, Args)]
pub struct KappaArgs {
    /// CSV of `example_id,rater1,rater2` with pos, neg or unsure.
    #[arg(long)]
    pub ratings: PathBuf,
    /// Keep pairs where a rater is unsure as a third category.
    #[arg(long)]
    pub include_unsure: bool,
}

fn exit_code(err: &Error) -> i32 {
    if err.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_DATA
    }
}

/// Parse `args`, run the command and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start {} worker threads: {e}", cli.jobs);
            return EXIT_USAGE;
        }
    };
    match pool.install(|| run(&cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(command: &Command) -> Result<()> {
    match command {
        Command::Synth(a) => run_synth(a),
        Command::Train(a) => run_train(a),
        Command::Thresholds(a) => run_thresholds(a),
        Command::Predict(a) => run_predict(a),
        Command::Eval(a) => run_eval(a),
        Command::Kappa(a) => run_kappa(a),
    }
}

pub fn run_synth(args: &SynthArgs) -> Result<()> {
    let classes = args
        .classes
        .split(',')
        .map(|s| {
            SynthClass::from_abbrev(s.trim())
                .ok_or_else(|| Error::InvalidSpec(format!("cannot synthesize class `{s}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    if classes.is_empty() {
        return Err(Error::InvalidSpec("no classes requested".into()));
    }
    let (base, extra) = (args.n / classes.len(), args.n % classes.len());
    let spec = DatasetSpec {
        counts: classes
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, base + usize::from(i < extra)))
            .collect(),
        noise_std_mv: args.noise,
        duration_s: args.duration,
        sampling_rate_hz: args.sampling_rate,
        seed: args.seed,
    };
    let map = ClassMap::default_map();
    let records = generate_dataset(&spec, &map)?;
    write_dataset(&args.out, &records)?;
    println!("wrote {} records to {}", records.len(), args.out.display());
    Ok(())
}

fn load_prepared(dir: &Path, map: &ClassMap) -> Result<Vec<PreparedRecord>> {
    if !dir.is_dir() {
        return Err(Error::EmptyDataset(dir.to_path_buf()));
    }
    let loaded = load_dataset(dir, map)?;
    for (path, err) in &loaded.failures {
        eprintln!("warning: skipped {}: {err}", path.display());
    }
    if loaded.unknown_codes > 0 {
        eprintln!(
            "warning: {} diagnosis codes not in the class map were dropped",
            loaded.unknown_codes
        );
    }
    loaded
        .records
        .par_iter()
        .map(|r: &EcgRecord| prepare_record(r).map_err(|e| e.in_file(dir.join(format!("{}.hea", r.meta.record_id)))))
        .collect()
}

pub fn run_train(args: &TrainArgs) -> Result<()> {
    let (map, weights) = args.classes.load()?;
    let model_config = ModelConfig::scaled(args.width_scale, args.se_reduction);
    model_config.validate()?;
    let cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        seed: args.seed,
        folds: args.folds,
        lr_drop_epochs: TrainConfig::default()
            .lr_drop_epochs
            .into_iter()
            .filter(|&e| e <= args.epochs)
            .collect(),
        threshold_mode: if args.pooled_thresholds {
            ThresholdMode::Pooled
        } else {
            ThresholdMode::PerFold
        },
        track_validation: !args.no_validation,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let records = load_prepared(&args.data, &map)?;
    if records.len() < cfg.folds {
        return Err(Error::InvalidConfig(format!(
            "{} records cannot fill {} folds",
            records.len(),
            cfg.folds
        )));
    }
    let scoring = Scoring {
        class_map: &map,
        weights: &weights,
    };
    let run = train_model(&records, &model_config, &cfg, &scoring, &mut |r| {
        let val = r.val_score.map(|v| format!(" val_score {v:.4}")).unwrap_or_default();
        eprintln!("fold {} epoch {} lr {} loss {:.6}{val}", r.fold, r.epoch, r.lr, r.loss);
    })?;
    write_run(&args.out, &run, &map)?;
    println!("wrote {} fold models to {}", run.models.len(), args.out.display());
    Ok(())
}

fn fold_dirs(run: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    while run.join(format!("fold{}", dirs.len())).is_dir() {
        dirs.push(run.join(format!("fold{}", dirs.len())));
    }
    if dirs.is_empty() {
        return Err(Error::Parse {
            path: run.to_path_buf(),
            msg: "no fold directories in run".into(),
        });
    }
    Ok(dirs)
}

pub fn run_thresholds(args: &ThresholdArgs) -> Result<()> {
    let (map, weights) = args.classes.load()?;
    let normal = map.normal_class_index();
    let mut folds = Vec::new();
    for dir in fold_dirs(&args.run)? {
        let path = dir.join("heldout_probabilities.csv");
        let text = fs::read_to_string(&path).map_err(|e| Error::from(e).in_file(&path))?;
        folds.push(parse_heldout(&text, &map).map_err(|e| e.in_file(&path))?);
    }
    let tuned: Vec<ThresholdVector> = if args.pooled {
        let probs: Vec<_> = folds.iter().flat_map(|h| h.probabilities.iter().copied()).collect();
        let truth: Vec<_> = folds.iter().flat_map(|h| h.truth.iter().copied()).collect();
        let t = optimize_thresholds(&probs, &truth, &weights, normal)?;
        println!("pooled s_normalized = {:.4}", t.score);
        vec![t.thresholds; folds.len()]
    } else {
        folds
            .iter()
            .enumerate()
            .map(|(i, h)| {
                let t = optimize_thresholds(&h.probabilities, &h.truth, &weights, normal)?;
                println!("fold {i} s_normalized = {:.4}", t.score);
                Ok(t.thresholds)
            })
            .collect::<Result<_>>()?
    };
    for (i, t) in tuned.iter().enumerate() {
        let dir = args.out.join(format!("fold{i}"));
        fs::create_dir_all(&dir)?;
        t.save(&dir.join("thresholds.csv"), &map)?;
    }
    Ok(())
}

pub fn run_predict(args: &PredictArgs) -> Result<()> {
    let map = match &args.class_map {
        Some(p) => ClassMap::load(p)?,
        None => ClassMap::default_map(),
    };
    let dirs = fold_dirs(&args.run)?;
    let chosen: Vec<PathBuf> = if args.ensemble {
        dirs
    } else {
        vec![dirs.get(args.fold).cloned().ok_or_else(|| {
            Error::InvalidConfig(format!("run has {} folds, fold {} requested", dirs.len(), args.fold))
        })?]
    };
    let models = chosen
        .iter()
        .map(|d| Model::load(&d.join("model.senet")))
        .collect::<Result<Vec<_>>>()?;
    let thresholds = match &args.thresholds {
        Some(p) => ThresholdVector::load(p, &map)?,
        None => {
            let per_fold = chosen
                .iter()
                .map(|d| ThresholdVector::load(&d.join("thresholds.csv"), &map))
                .collect::<Result<Vec<_>>>()?;
            let mut mean = [0.0; NUM_CLASSES];
            for t in &per_fold {
                for (m, v) in mean.iter_mut().zip(t.as_array()) {
                    *m += v / per_fold.len() as f64;
                }
            }
            ThresholdVector::new(mean.map(|v| v.clamp(0.0, 1.0)))?
        }
    };
    let records = load_prepared(&args.data, &map)?;
    fs::create_dir_all(&args.out)?;
    records.par_iter().try_for_each(|r| {
        let pred = predict_record(&models, r, &thresholds, &map)?;
        write_prediction(&args.out, &r.record_id, &pred, &map)
    })?;
    println!("wrote {} predictions to {}", records.len(), args.out.display());
    Ok(())
}

pub fn run_eval(args: &EvalArgs) -> Result<()> {
    let (map, weights) = args.classes.load()?;
    let loaded = load_dataset(&args.data, &map)?;
    let mut truth: Vec<ClassSet> = Vec::new();
    let mut pred: Vec<ClassSet> = Vec::new();
    for record in &loaded.records {
        let path = args.predictions.join(format!("{}.csv", record.meta.record_id));
        let text = fs::read_to_string(&path).map_err(|e| Error::from(e).in_file(&path))?;
        let p = parse_prediction_csv(&text, &map).map_err(|e| e.in_file(&path))?;
        truth.push(record.labels);
        pred.push(p.binary);
    }
    let stats = class_stats(&truth, &pred)?;
    let score = challenge_score(&truth, &pred, &weights, map.normal_class_index())?;
    let table = stats.to_csv(&map);
    print!("{table}");
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into());
    println!("records = {}", truth.len());
    println!("macro_sensitivity = {}", fmt(stats.macro_sensitivity));
    println!("macro_specificity = {}", fmt(stats.macro_specificity));
    println!("macro_f1 = {}", fmt(stats.macro_f1));
    println!("s_normalized = {score:.4}");
    if let Some(path) = &args.report {
        fs::write(path, table)?;
    }
    Ok(())
}

pub fn run_kappa(args: &KappaArgs) -> Result<()> {
    let text = fs::read_to_string(&args.ratings).map_err(|e| Error::from(e).in_file(&args.ratings))?;
    let (r1, r2) = parse_rater_csv(&text).map_err(|e| e.in_file(&args.ratings))?;
    let k = cohens_kappa(&r1, &r2, !args.include_unsure)?;
    println!("kappa = {:.3}", k.kappa);
    println!("n_used = {}", k.n_used);
    let names = ["pos", "neg", "unsure"];
    let shown = if args.include_unsure { 3 } else { 2 };
    println!("rater1\\rater2,{}", names[..shown].join(","));
    for (name, row) in names.iter().zip(&k.table).take(shown) {
        let cells: Vec<String> = row[..shown].iter().map(usize::to_string).collect();
        println!("{name},{}", cells.join(","));
    }
    Ok(())
}
