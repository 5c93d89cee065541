//! Command-line front end.
//!
//! Settings resolve as built-in defaults < `--config` file < command flags
//! < `--set key=value`. The config file is `key = value` text: `seed` and
//! `out` at top level, command settings under a `[command]` section. Every
//! successful run writes the fully resolved settings to `<out>/run.lock`,
//! which can be passed back as `--config` to repeat the run.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration
//! error, 3 validation failure.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fmt::{Display, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::analysis::{
    distribution_overlap, export_histograms, ratios_from_images, ratios_from_truth,
    session_histograms, sweep_threshold,
};
use crate::baselines::{percent, MetricsReport};
use crate::capsule::count_parameters;
use crate::data::{
    augment_dataset, split_subject_disjoint, synth_dataset, verify_subject_disjoint, AugmentSpec,
    Label, Manifest, Preset, SynthSpec, SESSION_COUNT,
};
use crate::explain::{self, annulus_mass, gradcam, mean_heatmap, overlay, CamMethod};
use crate::image::write_atomic;
use crate::kv::{KvMap, KvWriter};
use crate::models::{
    evaluate, gradient_check_tiny, grid_search, predict, train, train_validated,
    tune_learning_rate, Arch, CapsModel, Dataset, FCapsNetConfig, FusionSchedule, GridSpace,
    LrSearch, Model, Selection, SmallVgg, SmallVggConfig, TrainParams,
};
use crate::{Error, Image, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;

/// Environment variable that sets the worker-thread count.
pub const THREADS_ENV: &str = "CAPSFORGE_THREADS";

pub const LOCK_FILE: &str = "run.lock";

#[derive(Debug, Parser)]
#[command(
    name = "capsforge",
    version,
    about = "Capsule-network alcohol-detection experiments"
)]
struct Cli {
    /// Settings file; a previous run's run.lock repeats that run.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory [default: out].
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<String>,
    /// Global seed [default: 0].
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override any command setting.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic periocular dataset and its manifest.
    SynthGen(SynthGenArgs),
    /// Subject-disjoint train/test split.
    Split(SplitArgs),
    /// Rotation/shift/zoom augmentation of a manifest.
    Augment(AugmentArgs),
    /// Train a model; writes model.ckpt and history.csv.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Capsule-network hyperparameter grid search. Axes are comma-separated
    /// settings: capsule_counts, routing_options, kernel_sizes,
    /// filter_options, reconstruction_weights, learning_rates.
    Grid(GridArgs),
    /// Per-session pupil/iris ratio histograms and the threshold baseline.
    RatioHist(RatioHistArgs),
    /// Grad-CAM overlays for a checkpoint.
    Saliency(SaliencyArgs),
    /// Finite-difference gradient check of a tiny model.
    Gradcheck(GradcheckArgs),
    /// Consolidated comparison table from eval outputs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct SynthGenArgs {
    /// Generator settings file with unsectioned synth-gen keys.
    #[arg(long, value_name = "FILE")]
    spec: Option<PathBuf>,
    /// separable | overlapping
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    subjects: Option<usize>,
    /// Frames per subject and session.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    noise_std: Option<f64>,
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: Option<String>,
    #[arg(long)]
    train_fraction: Option<f64>,
    /// Check <out>/train.csv and <out>/test.csv for shared subjects instead of splitting.
    #[arg(long)]
    verify: bool,
}

#[derive(Debug, Args)]
struct AugmentArgs {
    #[arg(long)]
    manifest: Option<String>,
    #[arg(long)]
    multiplier: Option<usize>,
    #[arg(long)]
    include_originals: Option<bool>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training manifest.
    #[arg(long)]
    train: Option<String>,
    /// Validation manifest for model selection and early stopping.
    #[arg(long)]
    val: Option<String>,
    /// fcapsnet | capsnet | smallvgg
    #[arg(long)]
    model: Option<String>,
    /// default | desk | tiny (capsule models), default | small (smallvgg)
    #[arg(long)]
    size: Option<String>,
    /// A rate, or `auto` to probe candidates on the validation set.
    #[arg(long)]
    learning_rate: Option<String>,
    /// Maximum epochs [default: 100].
    #[arg(long)]
    epochs: Option<usize>,
    /// Samples per SGD step [default: 16].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Epochs without validation improvement before stopping (0 = never).
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    manifest: Option<String>,
}

#[derive(Debug, Args)]
struct GridArgs {
    #[arg(long)]
    train: Option<String>,
    #[arg(long)]
    val: Option<String>,
    /// fcapsnet | capsnet
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    size: Option<String>,
    /// Epochs per grid point [default: 10].
    #[arg(long)]
    epochs: Option<usize>,
    /// Use the full published grid instead of the listed axes.
    #[arg(long)]
    full: bool,
}

#[derive(Debug, Args)]
struct RatioHistArgs {
    #[arg(long)]
    manifest: Option<String>,
    #[arg(long)]
    bins: Option<usize>,
    /// truth | estimate
    #[arg(long)]
    source: Option<String>,
}

#[derive(Debug, Args)]
struct SaliencyArgs {
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    manifest: Option<String>,
    #[arg(long)]
    layer: Option<String>,
    /// gradcam | gradcam++
    #[arg(long)]
    method: Option<String>,
    /// Target class: alcohol | no_alcohol
    #[arg(long)]
    class: Option<String>,
    /// Individual overlays to write.
    #[arg(long)]
    overlays: Option<usize>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Only fcapsnet-tiny is supported.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Comma-separated metrics.csv files written by `eval`.
    #[arg(long)]
    runs: Option<String>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SynthGen(_) => "synth-gen",
            Command::Split(_) => "split",
            Command::Augment(_) => "augment",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Grid(_) => "grid",
            Command::RatioHist(_) => "ratio-hist",
            Command::Saliency(_) => "saliency",
            Command::Gradcheck(_) => "gradcheck",
            Command::Report(_) => "report",
        }
    }

    fn flags(&self) -> Vec<(&'static str, Option<String>)> {
        fn s<T: Display>(v: &Option<T>) -> Option<String> {
            v.as_ref().map(ToString::to_string)
        }
        match self {
            Command::SynthGen(a) => vec![
                ("preset", s(&a.preset)),
                ("subjects", s(&a.subjects)),
                ("frames", s(&a.frames)),
                ("noise_std", s(&a.noise_std)),
            ],
            Command::Split(a) => vec![
                ("manifest", s(&a.manifest)),
                ("train_fraction", s(&a.train_fraction)),
            ],
            Command::Augment(a) => vec![
                ("manifest", s(&a.manifest)),
                ("multiplier", s(&a.multiplier)),
                ("include_originals", s(&a.include_originals)),
            ],
            Command::Train(a) => vec![
                ("train", s(&a.train)),
                ("val", s(&a.val)),
                ("model", s(&a.model)),
                ("size", s(&a.size)),
                ("learning_rate", s(&a.learning_rate)),
                ("epochs", s(&a.epochs)),
                ("batch_size", s(&a.batch_size)),
                ("patience", s(&a.patience)),
            ],
            Command::Eval(a) => vec![
                ("checkpoint", s(&a.checkpoint)),
                ("manifest", s(&a.manifest)),
            ],
            Command::Grid(a) => vec![
                ("train", s(&a.train)),
                ("val", s(&a.val)),
                ("model", s(&a.model)),
                ("size", s(&a.size)),
                ("epochs", s(&a.epochs)),
                ("full", a.full.then(|| "true".to_string())),
            ],
            Command::RatioHist(a) => vec![
                ("manifest", s(&a.manifest)),
                ("bins", s(&a.bins)),
                ("source", s(&a.source)),
            ],
            Command::Saliency(a) => vec![
                ("checkpoint", s(&a.checkpoint)),
                ("manifest", s(&a.manifest)),
                ("layer", s(&a.layer)),
                ("method", s(&a.method)),
                ("class", s(&a.class)),
                ("overlays", s(&a.overlays)),
            ],
            Command::Gradcheck(a) => vec![("model", s(&a.model)), ("threshold", s(&a.threshold))],
            Command::Report(a) => vec![("runs", s(&a.runs))],
        }
    }
}

/// Resolved settings of one command. Reading a missing key records its
/// default, so the lock lists every value the run depended on.
struct Settings {
    command: &'static str,
    kv: KvMap,
    used: BTreeSet<String>,
}

impl Settings {
    fn resolve(cli: &Cli) -> Result<Settings> {
        let command = cli.command.name();
        let mut kv = KvMap::default();
        let mut layer = |file: &KvMap, sectioned: bool| -> Result<()> {
            for key in file.keys() {
                let value = file.get(key).unwrap_or_default();
                let target = match key {
                    "seed" | "out" => key.to_string(),
                    "command" if value != command => {
                        return Err(Error::Config(format!(
                            "config is for command `{value}`, not `{command}`"
                        )))
                    }
                    "command" => continue,
                    _ if !sectioned => format!("{command}.{key}"),
                    _ if key.contains('.') => key.to_string(),
                    _ => return Err(Error::Config(format!("unknown top-level key `{key}`"))),
                };
                kv.insert(target, value);
            }
            Ok(())
        };
        if let Some(path) = &cli.config {
            layer(&read_kv_file(path)?, true)?;
        }
        if let Command::SynthGen(SynthGenArgs {
            spec: Some(path), ..
        }) = &cli.command
        {
            layer(&read_kv_file(path)?, false)?;
        }
        for (key, value) in cli.command.flags() {
            if let Some(v) = value {
                kv.insert(format!("{command}.{key}"), v);
            }
        }
        if let Some(seed) = cli.seed {
            kv.insert("seed", seed);
        }
        if let Some(out) = &cli.out {
            kv.insert("out", out);
        }
        for entry in &cli.set {
            let (k, v) = entry
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{entry}`")))?;
            let k = k.trim();
            let key = if k == "seed" || k == "out" {
                k.to_string()
            } else {
                format!("{command}.{k}")
            };
            kv.insert(key, v.trim());
        }
        let mut s = Settings {
            command,
            kv,
            used: BTreeSet::new(),
        };
        s.get("seed", 0u64)?;
        s.get("out", "out".to_string())?;
        Ok(s)
    }

    fn full_key(&self, key: &str) -> String {
        if key == "seed" || key == "out" {
            key.to_string()
        } else {
            format!("{}.{key}", self.command)
        }
    }

    fn get<T: FromStr + Display>(&mut self, key: &str, default: T) -> Result<T> {
        let full = self.full_key(key);
        self.used.insert(full.clone());
        match self.kv.get(&full) {
            None => {
                self.kv.insert(full, &default);
                Ok(default)
            }
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("cannot parse `{key} = {v}`"))),
        }
    }

    fn text(&mut self, key: &str, default: &str) -> Result<String> {
        self.get(key, default.to_string())
    }

    fn require(&mut self, key: &str) -> Result<String> {
        let v = self.text(key, "")?;
        if v.is_empty() {
            return Err(Error::Config(format!(
                "`{}` requires --{key}",
                self.command
            )));
        }
        Ok(v)
    }

    fn optional(&mut self, key: &str) -> Result<Option<String>> {
        let v = self.text(key, "")?;
        Ok((!v.is_empty()).then_some(v))
    }

    /// Comma-separated list; an empty value yields `default`.
    fn list<T: FromStr + Display>(&mut self, key: &str, default: &[T]) -> Result<Vec<T>> {
        let joined: Vec<String> = default.iter().map(ToString::to_string).collect();
        let raw = self.text(key, &joined.join(","))?;
        raw.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse()
                    .map_err(|_| Error::Config(format!("cannot parse `{t}` in `{key}`")))
            })
            .collect()
    }

    fn seed(&self) -> u64 {
        self.kv.get_or("seed", 0).unwrap_or(0)
    }

    fn out(&self) -> PathBuf {
        PathBuf::from(self.kv.get("out").unwrap_or("out"))
    }

    /// Section entries as a plain map, for model-config readers.
    fn section(&self) -> KvMap {
        self.kv.section(self.command)
    }

    /// Fails on keys that no code path read.
    fn finish(&self) -> Result<()> {
        let unknown: Vec<&str> = self.kv.keys().filter(|k| !self.used.contains(*k)).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "unknown setting(s) for `{}`: {}",
                self.command,
                unknown.join(", ")
            )))
        }
    }

    fn lock_text(&self) -> String {
        let mut w = KvWriter::default();
        w.put("command", self.command);
        format!("{}{}", w.finish(), self.kv.to_text())
    }

    fn write_lock(&self) -> Result<()> {
        write_text(&self.out().join(LOCK_FILE), &self.lock_text())
    }
}

fn read_kv_file(path: &Path) -> Result<KvMap> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    KvMap::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

/// Runs the CLI on `args` (including the program name) and returns the exit
/// code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return EXIT_USAGE;
    }
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => EXIT_USAGE,
        Error::Validation(_) | Error::SubjectOverlap(_) => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize =
        raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            Error::Config(format!("{THREADS_ENV}={raw} is not a positive integer"))
        })?;
    // the global pool can only be built once per process
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

fn execute(cli: &Cli) -> Result<()> {
    let mut s = Settings::resolve(cli)?;
    if let Command::Split(SplitArgs { verify: true, .. }) = cli.command {
        return verify_split(&s);
    }
    match &cli.command {
        Command::SynthGen(_) => synth_gen(&mut s),
        Command::Split(_) => split(&mut s),
        Command::Augment(_) => augment(&mut s),
        Command::Train(_) => train_cmd(&mut s),
        Command::Eval(_) => eval(&mut s),
        Command::Grid(_) => grid(&mut s),
        Command::RatioHist(_) => ratio_hist(&mut s),
        Command::Saliency(_) => saliency(&mut s),
        Command::Gradcheck(_) => gradcheck(&mut s),
        Command::Report(_) => report(&mut s),
    }
}

fn synth_gen(s: &mut Settings) -> Result<()> {
    let preset: Preset = s.get("preset", Preset::Separable)?;
    let mut spec = SynthSpec::preset(preset, s.seed());
    spec.subjects = s.get("subjects", spec.subjects)?;
    spec.frames = s.get("frames", spec.frames)?;
    spec.noise_std = s.get("noise_std", spec.noise_std)?;
    for (i, p) in spec.sessions.iter_mut().enumerate() {
        p.ratio_mean = s.get(&format!("s{i}_ratio_mean"), p.ratio_mean)?;
        p.ratio_std = s.get(&format!("s{i}_ratio_std"), p.ratio_std)?;
        p.blur = s.get(&format!("s{i}_blur"), p.blur)?;
        p.droop = s.get(&format!("s{i}_droop"), p.droop)?;
    }
    s.finish()?;
    spec.validate()?;
    let out = s.out();
    let manifest = synth_dataset(&spec, &out)?;
    s.write_lock()?;
    println!(
        "wrote {} images ({} subjects x {SESSION_COUNT} sessions x {} frames) to {}",
        manifest.len(),
        spec.subjects,
        spec.frames,
        out.join("manifest.csv").display()
    );
    Ok(())
}

fn split(s: &mut Settings) -> Result<()> {
    let manifest_path = s.require("manifest")?;
    let fraction = s.get("train_fraction", 0.7)?;
    s.finish()?;
    let manifest = Manifest::read(manifest_path)?;
    let (train, test) = split_subject_disjoint(&manifest, fraction, s.seed())?;
    let out = s.out();
    train.write(out.join("train.csv"))?;
    test.write(out.join("test.csv"))?;
    s.write_lock()?;
    println!(
        "train: {} images from {} subjects; test: {} images from {} subjects",
        train.len(),
        train.subjects().len(),
        test.len(),
        test.subjects().len()
    );
    Ok(())
}

fn verify_split(s: &Settings) -> Result<()> {
    let out = s.out();
    let train = Manifest::read(out.join("train.csv"))?;
    let test = Manifest::read(out.join("test.csv"))?;
    verify_subject_disjoint(&train, &test)?;
    println!(
        "subject-disjoint: {} train and {} test subjects, no overlap",
        train.subjects().len(),
        test.subjects().len()
    );
    Ok(())
}

fn augment(s: &mut Settings) -> Result<()> {
    let manifest_path = s.require("manifest")?;
    let d = AugmentSpec::default();
    let spec = AugmentSpec {
        rotation_degrees: s.get("rotation_degrees", d.rotation_degrees)?,
        shift_fraction: s.get("shift_fraction", d.shift_fraction)?,
        zoom_fraction: s.get("zoom_fraction", d.zoom_fraction)?,
        multiplier: s.get("multiplier", d.multiplier)?,
        include_originals: s.get("include_originals", d.include_originals)?,
    };
    s.finish()?;
    let manifest = Manifest::read(manifest_path)?;
    let result = augment_dataset(&manifest, &spec, s.out(), s.seed())?;
    s.write_lock()?;
    println!("augmented {} images to {}", manifest.len(), result.len());
    Ok(())
}

/// Builds the model named by `model` and `size`, with every architecture
/// key overridable from the command's settings.
fn build_model(s: &mut Settings) -> Result<Model> {
    let name = s.text("model", "fcapsnet")?;
    let seed = s.seed();
    if name == "smallvgg" {
        let base = match s.text("size", "default")?.as_str() {
            "default" => SmallVggConfig::default(),
            "small" => SmallVggConfig::small(),
            other => {
                return Err(Error::Config(format!(
                    "unknown smallvgg size `{other}` (default|small)"
                )))
            }
        };
        let mut w = KvWriter::default();
        base.write_kv(&mut w);
        touch_keys(s, &w.finish())?;
        let mut cfg = SmallVggConfig::read_kv(&s.section(), &base)?;
        cfg.seed = seed;
        return Ok(Model::SmallVgg(SmallVgg::new(&cfg)?));
    }
    let arch: Arch = name.parse()?;
    let cfg = caps_config(s)?;
    Ok(Model::Caps(CapsModel::new(arch, &cfg)?))
}

fn caps_config(s: &mut Settings) -> Result<FCapsNetConfig> {
    let base = match s.text("size", "desk")?.as_str() {
        "default" => FCapsNetConfig::default(),
        "desk" => FCapsNetConfig::desk(),
        "tiny" => FCapsNetConfig::tiny(),
        other => {
            return Err(Error::Config(format!(
                "unknown capsule size `{other}` (default|desk|tiny)"
            )))
        }
    };
    let mut w = KvWriter::default();
    base.write_kv(&mut w);
    touch_keys(s, &w.finish())?;
    let mut cfg = FCapsNetConfig::read_kv(&s.section(), &base)?;
    cfg.seed = s.seed();
    Ok(cfg)
}

/// Records each model key (except the seed, which is global) as a setting.
fn touch_keys(s: &mut Settings, kv_text: &str) -> Result<()> {
    let base = KvMap::parse(kv_text)?;
    for key in base.keys().filter(|k| *k != "seed") {
        s.text(key, base.get(key).unwrap_or_default())?;
    }
    Ok(())
}

fn train_params(s: &mut Settings, default_epochs: usize) -> Result<TrainParams> {
    let d = TrainParams::default();
    let p = TrainParams {
        seed: s.seed(),
        learning_rate: d.learning_rate,
        epochs: s.get("epochs", default_epochs)?,
        batch_size: s.get("batch_size", d.batch_size)?,
        schedule: s.get("schedule", FusionSchedule::default())?,
        class_balanced: s.get("class_balanced", d.class_balanced)?,
    };
    p.validate()?;
    Ok(p)
}

fn train_cmd(s: &mut Settings) -> Result<()> {
    let train_path = s.require("train")?;
    let val_path = s.optional("val")?;
    let mut params = train_params(s, TrainParams::default().epochs)?;
    let lr = s.text("learning_rate", &params.learning_rate.to_string())?;
    let patience = s.get("patience", 0usize)?;
    let probe_epochs = s.get("probe_epochs", LrSearch::default().probe_epochs)?;
    let model = build_model(s)?;
    s.finish()?;
    let train_manifest = Manifest::read(train_path)?;
    let val_manifest = val_path.map(Manifest::read).transpose()?;
    let data = Dataset::from_manifest(&train_manifest)?;
    let val = val_manifest
        .as_ref()
        .map(Dataset::from_manifest)
        .transpose()?;
    let out = s.out();
    if lr == "auto" {
        let val = val.as_ref().ok_or_else(|| {
            Error::Config("learning_rate = auto needs a validation manifest (--val)".into())
        })?;
        let search = LrSearch {
            probe_epochs,
            ..LrSearch::default()
        };
        let (best, scores) =
            tune_learning_rate(|| Ok(model.clone()), &data, val, &params, &search)?;
        let mut csv = String::from("learning_rate,val_balanced_accuracy\n");
        for (r, a) in &scores {
            let _ = writeln!(csv, "{r},{a}");
        }
        write_text(&out.join("lr_probe.csv"), &csv)?;
        println!("learning rate probe selected {best}");
        params.learning_rate = best;
    } else {
        params.learning_rate = lr
            .parse()
            .map_err(|_| Error::Config(format!("cannot parse `learning_rate = {lr}`")))?;
        params.validate()?;
    }
    let mut model = model;
    let run = match &val {
        Some(v) => train_validated(
            &mut model,
            &data,
            v,
            &params,
            Selection {
                patience: (patience > 0).then_some(patience),
            },
        )?,
        None => train(&mut model, &data, &params)?,
    };
    model.save(out.join("model.ckpt"))?;
    write_text(&out.join("history.csv"), &run.history_csv())?;
    s.write_lock()?;
    println!(
        "trained {} ({} parameters) for {} epochs at learning rate {}",
        model.name(),
        count_parameters(&model),
        run.history.len(),
        params.learning_rate
    );
    if let (Some(v), Some(best)) = (&val, run.best_epoch) {
        println!(
            "kept epoch {}; validation: {}",
            best + 1,
            evaluate(&model, v)?
        );
    }
    Ok(())
}

/// `model,parameters,tp,tn,fp,fn,accuracy,tnr,tpr` with rates in percent.
const METRICS_HEADER: &str = "model,parameters,tp,tn,fp,fn,accuracy,tnr,tpr";

fn metrics_row(name: &str, parameters: usize, m: &MetricsReport) -> String {
    format!("{name},{parameters},{}", m.csv_row())
}

fn results_table(rows: &[(String, String, MetricsReport)]) -> String {
    let header = [
        "Model",
        "Accuracy",
        "Parameters",
        "Specificity(TNR)",
        "Sensitivity(TPR)",
    ];
    let body: Vec<[String; 5]> = rows
        .iter()
        .map(|(name, params, m)| {
            [
                name.clone(),
                format!("{}%", percent(m.accuracy)),
                params.clone(),
                format!("{}%", percent(m.tnr)),
                format!("{}%", percent(m.tpr)),
            ]
        })
        .collect();
    render_table(&header, &body)
}

fn render_table<const N: usize>(header: &[&str; N], rows: &[[String; N]]) -> String {
    let mut widths = header.map(str::len);
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| {
                if i == 0 {
                    format!("{c:<w$}")
                } else {
                    format!("{c:>w$}")
                }
            })
            .collect();
        padded.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(header.to_vec());
    out.push_str(&line(
        widths
            .iter()
            .map(|&w| "-".repeat(w))
            .collect::<Vec<_>>()
            .iter()
            .map(String::as_str)
            .collect(),
    ));
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out
}

fn eval(s: &mut Settings) -> Result<()> {
    let checkpoint = s.require("checkpoint")?;
    let manifest_path = s.require("manifest")?;
    s.finish()?;
    let manifest = Manifest::read(manifest_path)?;
    let model = Model::load(&checkpoint)?;
    let data = Dataset::from_manifest(&manifest)?;
    let predictions = predict(&model, &data)?;
    let metrics = crate::baselines::confusion_metrics(&predictions, &data.labels)?;
    let params = count_parameters(&model);
    let out = s.out();
    write_text(
        &out.join("metrics.csv"),
        &format!(
            "{METRICS_HEADER}\n{}\n",
            metrics_row(&model.name(), params, &metrics)
        ),
    )?;
    let mut csv = String::from("path,label,predicted\n");
    for (r, p) in manifest.records.iter().zip(&predictions) {
        let _ = writeln!(csv, "{},{},{p}", r.path, r.label);
    }
    write_text(&out.join("predictions.csv"), &csv)?;
    s.write_lock()?;
    print!(
        "{}",
        results_table(&[(model.name(), params.to_string(), metrics)])
    );
    Ok(())
}

fn grid(s: &mut Settings) -> Result<()> {
    let train_path = s.require("train")?;
    let val_path = s.require("val")?;
    let arch: Arch = s.get("model", Arch::Fused)?;
    let full = s.get("full", false)?;
    let params = train_params(s, 10)?;
    let lr = s.get("learning_rate", 1e-3)?;
    let base = caps_config(s)?;
    let single = GridSpace::single(&base, lr);
    let space = if full {
        GridSpace::full()
    } else {
        GridSpace {
            num_capsules: s.list("capsule_counts", &single.num_capsules)?,
            routing_iterations: s.list("routing_options", &single.routing_iterations)?,
            kernel_sizes: s.list("kernel_sizes", &single.kernel_sizes)?,
            filters: s.list("filter_options", &single.filters)?,
            reconstruction_weights: s
                .list("reconstruction_weights", &single.reconstruction_weights)?,
            learning_rates: s.list("learning_rates", &single.learning_rates)?,
        }
    };
    s.finish()?;
    let train_manifest = Manifest::read(train_path)?;
    let val_manifest = Manifest::read(val_path)?;
    let train_set = Dataset::from_manifest(&train_manifest)?;
    let val_set = Dataset::from_manifest(&val_manifest)?;
    let result = grid_search(arch, &base, &space, &train_set, &val_set, &params)?;
    let mut csv = String::from(
        "rank,index,num_capsules,routing_iterations,kernel_size,filters,reconstruction_weight,learning_rate,parameters,accuracy,tnr,tpr\n",
    );
    let mut rows = Vec::new();
    for (rank, r) in result.ranked().into_iter().enumerate() {
        let c = &r.config;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            rank + 1,
            r.index,
            c.num_capsules,
            c.routing_iterations,
            c.kernel_size,
            c.filters,
            c.loss.reconstruction_weight,
            r.learning_rate,
            r.parameters,
            percent(r.metrics.accuracy),
            percent(r.metrics.tnr),
            percent(r.metrics.tpr)
        );
        rows.push([
            (rank + 1).to_string(),
            format!(
                "caps{} r{} k{} f{}",
                c.num_capsules, c.routing_iterations, c.kernel_size, c.filters
            ),
            c.loss.reconstruction_weight.to_string(),
            r.learning_rate.to_string(),
            r.parameters.to_string(),
            format!("{}%", percent(r.metrics.accuracy)),
            format!("{}%", percent(r.metrics.tnr)),
            format!("{}%", percent(r.metrics.tpr)),
        ]);
    }
    write_text(&s.out().join("grid.csv"), &csv)?;
    s.write_lock()?;
    print!(
        "{}",
        render_table(
            &[
                "Rank",
                "Config",
                "Recon",
                "LR",
                "Parameters",
                "Accuracy",
                "Specificity(TNR)",
                "Sensitivity(TPR)"
            ],
            &rows
        )
    );
    Ok(())
}

fn ratio_hist(s: &mut Settings) -> Result<()> {
    let manifest_path = s.require("manifest")?;
    let bins = s.get("bins", 20usize)?;
    let source = s.text("source", "truth")?;
    s.finish()?;
    let manifest = Manifest::read(manifest_path)?;
    let ratios = match source.as_str() {
        "truth" => ratios_from_truth(&manifest)?,
        "estimate" => ratios_from_images(&manifest)?,
        other => {
            return Err(Error::Config(format!(
                "unknown ratio source `{other}` (truth|estimate)"
            )))
        }
    };
    let hists = session_histograms(&ratios, bins)?;
    let out = s.out();
    export_histograms(&hists, &out)?;
    let swept = sweep_threshold(&ratios)?;
    write_text(
        &out.join("threshold.csv"),
        &format!(
            "{METRICS_HEADER}\n{}\n",
            metrics_row("ratio-threshold", 1, &swept.metrics)
        ),
    )?;
    s.write_lock()?;
    let mut rows = Vec::new();
    for h in &hists {
        rows.push([
            h.session.to_string(),
            h.total().to_string(),
            format!("{:.4}", h.mean),
            format!("{:.4}", h.std),
            format!("{:.3}", distribution_overlap(&hists[0], h)?),
        ]);
    }
    print!(
        "{}",
        render_table(&["Session", "Images", "Mean", "Std", "Overlap(S0)"], &rows)
    );
    println!(
        "best single threshold {:.4} (alcohol {}): {}",
        swept.threshold,
        if swept.alcohol_above {
            "above"
        } else {
            "below"
        },
        swept.metrics
    );
    Ok(())
}

fn saliency(s: &mut Settings) -> Result<()> {
    let checkpoint = s.require("checkpoint")?;
    let manifest_path = s.require("manifest")?;
    // the default layer depends on the architecture
    let model = Model::load(&checkpoint)?;
    let layer = s.text("layer", explain::default_layer(&model))?;
    let method: CamMethod = s.get("method", CamMethod::default())?;
    let class: Label = s.get("class", Label::Alcohol)?;
    let overlays = s.get("overlays", 8usize)?;
    s.finish()?;
    let manifest = Manifest::read(manifest_path)?;
    let subset = manifest.filter(|r| r.label == class);
    if subset.is_empty() {
        return Err(Error::Empty("images of the target class"));
    }
    let images = subset.load_images()?;
    let maps = images
        .par_iter()
        .map(|img| gradcam(&model, img, &layer, class, method))
        .collect::<Result<Vec<_>>>()?;
    let out = s.out();
    for (i, (img, map)) in images.iter().zip(&maps).take(overlays).enumerate() {
        overlay(map, img)?.save_ppm(out.join(format!("overlay_{i:03}.ppm")))?;
    }
    let average = mean_heatmap(&maps);
    overlay(&average, &mean_image(&images))?.save_ppm(out.join("average.ppm"))?;
    average.save_csv(out.join("average.csv"))?;
    s.write_lock()?;
    let degenerate = maps.iter().filter(|m| m.degenerate).count();
    println!(
        "{} {method} maps of `{layer}` for class {class} over {} images ({degenerate} degenerate)",
        model.name(),
        maps.len()
    );
    let truths: Vec<_> = subset.records.iter().filter_map(|r| r.truth()).collect();
    if truths.len() == maps.len() {
        let (mut inside, mut outside) = (0.0, 0.0);
        for (m, t) in maps.iter().zip(&truths) {
            let (i, o) = annulus_mass(m, t.cx, t.cy, t.pupil_r, t.iris_r);
            inside += i;
            outside += o;
        }
        let n = maps.len() as f64;
        println!(
            "mean heat inside iris annulus {:.4}, outside {:.4}",
            inside / n,
            outside / n
        );
    }
    Ok(())
}

fn mean_image(images: &[Image]) -> Image {
    let mut acc = Image::standard(0.0);
    for img in images {
        for (a, v) in acc.pixels_mut().iter_mut().zip(img.pixels()) {
            *a += v;
        }
    }
    let n = images.len().max(1) as f64;
    acc.pixels_mut().iter_mut().for_each(|v| *v /= n);
    acc
}

fn gradcheck(s: &mut Settings) -> Result<()> {
    let model = s.text("model", "fcapsnet-tiny")?;
    let threshold = s.get("threshold", 1e-3)?;
    s.finish()?;
    if model != "fcapsnet-tiny" {
        return Err(Error::Config(format!(
            "gradcheck supports only fcapsnet-tiny, got `{model}`"
        )));
    }
    let err = gradient_check_tiny(s.seed())?;
    write_text(
        &s.out().join("gradcheck.txt"),
        &format!("max_relative_error={err:e}\nthreshold={threshold:e}\n"),
    )?;
    s.write_lock()?;
    println!("{model}: max relative error {err:.3e} (threshold {threshold:e})");
    if !(err < threshold) {
        return Err(Error::Validation(format!(
            "gradient error {err:e} exceeds {threshold:e}"
        )));
    }
    Ok(())
}

fn report(s: &mut Settings) -> Result<()> {
    let runs: Vec<String> = s.list("runs", &[] as &[String])?;
    s.finish()?;
    if runs.is_empty() {
        return Err(Error::Config("`report` requires --runs".into()));
    }
    let mut csv = format!("{METRICS_HEADER}\n");
    let mut rows = Vec::new();
    for path in &runs {
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::csv(path, e))?;
            if rec.len() != 9 {
                return Err(Error::Format {
                    path: path.into(),
                    offset: rec.position().map_or(0, |p| p.byte() as usize),
                    msg: format!("expected 9 columns ({METRICS_HEADER})"),
                });
            }
            let cols: Vec<&str> = rec.iter().collect();
            let _ = writeln!(csv, "{}", cols.join(","));
            let rate = |i: usize| -> f64 { cols[i].parse::<f64>().map_or(f64::NAN, |v| v / 100.0) };
            let count = |i: usize| -> usize { cols[i].parse().unwrap_or(0) };
            let m = MetricsReport {
                tp: count(2),
                tn: count(3),
                fp: count(4),
                fn_: count(5),
                accuracy: rate(6),
                tnr: rate(7),
                tpr: rate(8),
            };
            rows.push((cols[0].to_string(), cols[1].to_string(), m));
        }
    }
    write_text(&s.out().join("report.csv"), &csv)?;
    s.write_lock()?;
    print!("{}", results_table(&rows));
    Ok(())
}
