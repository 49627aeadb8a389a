//! Command-line front end: experiment configs, the pipeline commands and
//! the sweep runner.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{
    class_statistics, generate_synthetic_corpus, render_sample, split_dataset, synthetic_manifest, DatasetManifest,
    Split, SplitRatios, SyntheticCorpusSpec,
};
use crate::engine::{
    finetune, load_checkpoint, pretrain_with, save_checkpoint, Checkpoint, Corpus, FinetuneConfig, FinetuneInit,
    Method, PretrainConfig, RunOptions, TrainingLog,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    emit_confusion_plot, evaluate, plot_sidecars, render_results_table, ResultRow, ResultsRecord, Setup,
};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "SSLWB_OUT";
const DEFAULT_OUT: &str = "runs";

#[derive(Debug, Parser)]
#[command(name = "sslwb", version, about = "Self-supervised pretraining and finetuning workbench")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a corpus or summarize a manifest.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Pretrain a backbone.
    Pretrain(PretrainArgs),
    /// Train a classifier from a pretrained or random backbone.
    Finetune(FinetuneArgs),
    /// Score a finetuned model on the test split and write a results record.
    Evaluate(EvaluateArgs),
    /// Render a results table from results records.
    Report(ReportArgs),
    /// Run pretrain, finetune and evaluate for every cell of a grid.
    Sweep(SweepArgs),
    /// Print the default experiment config for a method.
    Template {
        /// simclr, dino, mae, deepcluster, mixed, supervised or none.
        #[arg(value_parser = parse_method)]
        method: Method,
    },
}

#[derive(Debug, Subcommand)]
pub enum DatasetCommand {
    /// Render a synthetic labeled corpus with train/val/test splits.
    Synth(SynthArgs),
    /// Print per-class and per-split counts of a manifest.
    Stats {
        /// Manifest file.
        manifest: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of classes.
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    /// Images per class.
    #[arg(long, default_value_t = 50)]
    pub per_class: usize,
    /// Use the 23 class names and relative counts of the firearms corpus,
    /// with counts divided by this value.
    #[arg(long, conflicts_with_all = ["classes", "per_class"])]
    pub firearms_divisor: Option<f64>,
    /// Image side in pixels.
    #[arg(long, default_value_t = 32)]
    pub size: u32,
    /// Seed for rendering and splitting.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of distinct hue bands (0: one per class).
    #[arg(long, default_value_t = 0)]
    pub hue_bands: usize,
    /// Train, val and test fractions.
    #[arg(long, default_value = "0.7,0.15,0.15", value_parser = parse_ratios)]
    pub split: SplitRatios,
    /// Output directory for the images, manifest and class table.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Experiment config (TOML).
    pub config: PathBuf,
    /// Override the configured method.
    #[arg(long, value_parser = parse_method)]
    pub method: Option<Method>,
    /// Force deterministic mode.
    #[arg(long)]
    pub deterministic: bool,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Output root.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Experiment config (TOML).
    pub config: PathBuf,
    /// Pretraining method whose checkpoint under the output root is used.
    #[arg(long, value_parser = parse_method)]
    pub method: Option<Method>,
    /// Explicit pretrained checkpoint.
    #[arg(long, conflicts_with = "random")]
    pub checkpoint: Option<PathBuf>,
    /// Start from a randomly initialized backbone.
    #[arg(long)]
    pub random: bool,
    /// Output root.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Experiment config (TOML).
    pub config: PathBuf,
    /// Method whose finetuned model is scored.
    #[arg(long, value_parser = parse_method)]
    pub method: Option<Method>,
    /// Output root.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Skip the confusion heatmap.
    #[arg(long)]
    pub no_plot: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Results records (`.rec`).
    #[arg(long = "in", num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    /// `transfer` or `single_dataset`.
    #[arg(long, value_parser = parse_setup)]
    pub setup: Setup,
    /// Architecture label printed in the caption.
    #[arg(long, default_value = "vit")]
    pub arch: String,
    /// Write the table here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Experiment config with a `[sweep.grid]` table.
    pub config: PathBuf,
    /// Output root.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run cells on parallel threads.
    #[arg(long)]
    pub parallel_cells: bool,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_setup(s: &str) -> std::result::Result<Setup, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_ratios(s: &str) -> std::result::Result<SplitRatios, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match parts[..] {
        [a, b, c] => SplitRatios::new(a, b, c).map_err(|e| e.to_string()),
        _ => Err("expected three comma-separated fractions".into()),
    }
}

/// Where a corpus comes from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Manifest file, relative to the config file.
    pub manifest: Option<PathBuf>,
    /// In-memory synthetic corpus, used when no manifest is given.
    pub synthetic: Option<SyntheticCorpusSpec>,
    /// Applied when the records carry no split.
    pub split: Option<SplitRatios>,
    pub split_seed: u64,
    /// Name shown in results tables.
    pub label: Option<String>,
}

impl DatasetSection {
    fn validate(&self, base: &Path) -> Result<()> {
        match (&self.manifest, &self.synthetic) {
            (Some(_), Some(_)) => Err(Error::invalid("dataset: give either manifest or synthetic, not both")),
            (None, None) => Err(Error::invalid("dataset: a manifest or a synthetic spec is required")),
            (Some(m), None) => {
                let p = base.join(m);
                if p.is_file() {
                    Ok(())
                } else {
                    Err(Error::invalid(format!("dataset manifest {} does not exist", p.display())))
                }
            }
            (None, Some(s)) => s.validate(),
        }?;
        if let Some(r) = &self.split {
            r.validate()?;
        }
        Ok(())
    }

    fn label(&self) -> String {
        if let Some(l) = &self.label {
            return l.clone();
        }
        match &self.manifest {
            Some(m) => m
                .parent()
                .and_then(|p| p.file_name())
                .or_else(|| m.file_stem())
                .map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned()),
            None => "synthetic".into(),
        }
    }

    fn ratios(&self) -> SplitRatios {
        self.split.unwrap_or(SplitRatios {
            train: 0.7,
            val: 0.15,
            test: 0.15,
        })
    }

    /// Loads one split, splitting unsplit manifests first.
    pub fn load(&self, base: &Path, split: Split) -> Result<Corpus> {
        if let Some(spec) = &self.synthetic {
            let manifest = split_dataset(&synthetic_manifest(spec)?, self.ratios(), self.split_seed)?;
            let mut per_class = vec![0usize; spec.num_classes];
            let (mut images, mut labels) = (Vec::new(), Vec::new());
            for rec in &manifest.records {
                let c = rec.class_id.expect("synthetic records are labeled") as usize - 1;
                let index = per_class[c];
                per_class[c] += 1;
                if rec.split == Some(split) {
                    images.push(render_sample(spec, c, index));
                    labels.push(Some(c));
                }
            }
            return Corpus::new(images, labels, manifest.class_names());
        }
        let path = base.join(self.manifest.as_ref().ok_or_else(|| Error::invalid("dataset has no source"))?);
        let mut manifest = DatasetManifest::load(&path)?;
        if manifest.records.iter().all(|r| r.split.is_none()) {
            manifest = split_dataset(&manifest, self.ratios(), self.split_seed)?;
        }
        Corpus::load(&path, &manifest, Some(split))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Output root; `SSLWB_OUT` or `runs` when absent.
    pub out_dir: Option<PathBuf>,
    pub no_plot: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Dotted config key to candidate values, e.g. `"pretrain.lr.base"`.
    pub grid: BTreeMap<String, Vec<toml::Value>>,
    pub parallel_cells: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Overrides the seeds of the pretrain and finetune sections.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Row label in results tables; derived from the method when absent.
    #[serde(default)]
    pub experiment: Option<String>,
    pub dataset: DatasetSection,
    /// Downstream corpus of the transfer setup; the pretraining corpus is
    /// reused when absent.
    #[serde(default)]
    pub finetune_dataset: Option<DatasetSection>,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    /// `encoder` and `augmentation` are inherited from `pretrain` when
    /// absent.
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
}

impl ExperimentConfig {
    /// Parses a config; `finetune.encoder` and `finetune.augmentation`
    /// default to their pretrain counterparts.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| toml_error(text, origin, e))?;
        let doc: toml::Table = toml::from_str(text).map_err(|e| toml_error(text, origin, e))?;
        let finetune = doc.get("finetune").and_then(toml::Value::as_table);
        let has = |k: &str| finetune.is_some_and(|t| t.contains_key(k));
        if !has("encoder") {
            cfg.finetune.encoder = cfg.pretrain.encoder.clone();
        }
        if !has("augmentation") {
            cfg.finetune.augmentation = cfg.pretrain.augmentation.clone();
        }
        cfg.apply_seed();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            self.pretrain.seed = s;
            self.finetune.seed = s;
        }
    }

    /// Checks every section before any compute starts.
    pub fn validate(&self, base: &Path) -> Result<()> {
        self.dataset.validate(base)?;
        if let Some(d) = &self.finetune_dataset {
            d.validate(base)?;
        }
        if self.pretrain.method != Method::None {
            self.pretrain.validate()?;
        }
        self.finetune.validate()?;
        if self.finetune.encoder != self.pretrain.encoder {
            return Err(Error::invalid("finetune.encoder differs from pretrain.encoder"));
        }
        if self.finetune.augmentation.global_size != self.pretrain.encoder.input_size {
            return Err(Error::invalid(format!(
                "finetune augmentation global size {} differs from encoder input {}",
                self.finetune.augmentation.global_size, self.pretrain.encoder.input_size
            )));
        }
        Ok(())
    }

    pub fn setup(&self) -> Setup {
        match &self.finetune_dataset {
            Some(d) if *d != self.dataset => Setup::Transfer,
            _ => Setup::SingleDataset,
        }
    }

    fn downstream(&self) -> &DatasetSection {
        self.finetune_dataset.as_ref().unwrap_or(&self.dataset)
    }

    fn out_root(&self, base: &Path, flag: Option<&Path>) -> PathBuf {
        if let Some(f) = flag {
            return f.to_path_buf();
        }
        if let Some(d) = &self.eval.out_dir {
            return base.join(d);
        }
        std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT), PathBuf::from)
    }
}

fn toml_error(text: &str, origin: &Path, e: toml::de::Error) -> Error {
    let line = e.span().map_or(0, |s| text[..s.start.min(text.len())].matches('\n').count() + 1);
    Error::Parse {
        path: origin.display().to_string(),
        line,
        msg: e.message().to_string(),
    }
}

/// Default experiment for `method` on a small in-memory synthetic corpus.
pub fn template(method: Method) -> ExperimentConfig {
    let mut spec = SyntheticCorpusSpec::uniform(10, 100, 32, 0);
    spec.variance.hue_bands = 2;
    ExperimentConfig {
        seed: Some(0),
        experiment: None,
        dataset: DatasetSection {
            synthetic: Some(spec),
            ..DatasetSection::default()
        },
        finetune_dataset: None,
        pretrain: PretrainConfig {
            method,
            ..PretrainConfig::default()
        },
        finetune: FinetuneConfig::default(),
        eval: EvalSection::default(),
        sweep: None,
    }
}

pub fn render_template(method: Method) -> String {
    let mut doc = toml::Table::try_from(template(method)).expect("template serializes");
    if let Some(f) = doc.get_mut("finetune").and_then(toml::Value::as_table_mut) {
        f.remove("encoder");
        f.remove("augmentation");
    }
    let body = toml::to_string(&doc).expect("template serializes");
    format!("# Default {} experiment. Every field may be omitted to keep its default.\n{body}", method.label())
}

/// Row label of a method in results tables.
pub fn experiment_label(method: Method) -> &'static str {
    match method {
        Method::Simclr => "SimCLR",
        Method::Dino => "DINO",
        Method::Mae => "MAE",
        Method::Deepcluster => "DeepCluster",
        Method::Mixed => "Mixed (DINO+Supervised)",
        Method::Supervised => "Supervised",
        Method::None => "No pretraining (random initialization)",
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code: 0 success, 2 validation error, 3 runtime
/// failure.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                2
            } else {
                3
            }
        }
    }
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Dataset(DatasetCommand::Synth(a)) => cmd_synth(&a),
        Command::Dataset(DatasetCommand::Stats { manifest }) => {
            let m = DatasetManifest::load(&manifest)?;
            print!("{}", class_statistics(&m)?.render(&m));
            Ok(())
        }
        Command::Pretrain(a) => {
            let (cfg, base) = load_config(&a.config)?;
            let mut cfg = cfg;
            if let Some(m) = a.method {
                cfg.pretrain.method = m;
            }
            if a.deterministic {
                cfg.pretrain.deterministic = true;
            }
            cfg.validate(&base)?;
            let out = cfg.out_root(&base, a.out.as_deref());
            let resume = a.resume.as_deref().map(load_checkpoint).transpose()?;
            let path = cmd_pretrain(&cfg, &base, &out, resume)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Finetune(a) => {
            let (mut cfg, base) = load_config(&a.config)?;
            if let Some(m) = a.method {
                cfg.pretrain.method = m;
            }
            if a.random {
                cfg.pretrain.method = Method::None;
                cfg.finetune.init = FinetuneInit::Random;
            } else if let Some(c) = a.checkpoint {
                cfg.finetune.init = FinetuneInit::Checkpoint(c);
            }
            cfg.validate(&base)?;
            let out = cfg.out_root(&base, a.out.as_deref());
            let dir = cmd_finetune(&cfg, &base, &out)?;
            println!("{}", dir.display());
            Ok(())
        }
        Command::Evaluate(a) => {
            let (mut cfg, base) = load_config(&a.config)?;
            if let Some(m) = a.method {
                cfg.pretrain.method = m;
            }
            cfg.eval.no_plot |= a.no_plot;
            cfg.validate(&base)?;
            let out = cfg.out_root(&base, a.out.as_deref());
            let rec = cmd_evaluate(&cfg, &base, &out)?;
            println!(
                "{}: test accuracy {:.2}% (best val epoch {}), last epoch {:.2}%",
                rec.experiment,
                100.0 * rec.test_accuracy,
                rec.best_epoch,
                100.0 * rec.test_accuracy_last
            );
            Ok(())
        }
        Command::Report(a) => {
            let records = a.inputs.iter().map(|p| ResultsRecord::load(p)).collect::<Result<Vec<_>>>()?;
            let table = report(&records, a.setup, &a.arch);
            match a.out {
                Some(p) => write_text(&p, &table),
                None => {
                    print!("{table}");
                    Ok(())
                }
            }
        }
        Command::Sweep(a) => {
            let (cfg, base) = load_config(&a.config)?;
            let out = cfg.out_root(&base, a.out.as_deref());
            let summary = cmd_sweep(&cfg, &base, &out, a.parallel_cells)?;
            println!("{}", summary.best_line());
            Ok(())
        }
        Command::Template { method } => {
            print!("{}", render_template(method));
            Ok(())
        }
    }
}

fn load_config(path: &Path) -> Result<(ExperimentConfig, PathBuf)> {
    let cfg = ExperimentConfig::load(path)?;
    let base = path.parent().map_or_else(PathBuf::new, Path::to_path_buf);
    Ok((cfg, base))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut spec = match a.firearms_divisor {
        Some(d) if d > 0.0 => SyntheticCorpusSpec::firearms_scaled(d, a.size, a.seed),
        Some(d) => return Err(Error::invalid(format!("divisor {d} must be positive"))),
        None => SyntheticCorpusSpec::uniform(a.classes, a.per_class, a.size, a.seed),
    };
    spec.variance.hue_bands = a.hue_bands;
    spec.validate()?;
    let (manifest, path) = generate_synthetic_corpus(&spec, &a.out)?;
    let manifest = split_dataset(&manifest, a.split, a.seed)?;
    manifest.write(&path)?;
    println!("{} images in {} classes: {}", manifest.records.len(), spec.num_classes, path.display());
    Ok(())
}

/// Directory of a method's pretraining artifacts.
pub fn pretrain_dir(out: &Path, method: Method) -> PathBuf {
    out.join("pretrain").join(method.label())
}

pub fn finetune_dir(out: &Path, method: Method) -> PathBuf {
    out.join("finetune").join(method.label())
}

fn write_log(log: &TrainingLog, dir: &Path) -> Result<()> {
    write_text(&dir.join("train.log"), &log.render_epochs())?;
    write_text(&dir.join("steps.log"), &log.render_steps())
}

/// Pretrains on the train split of the pretraining corpus and returns the
/// final checkpoint path.
pub fn cmd_pretrain(cfg: &ExperimentConfig, base: &Path, out: &Path, resume: Option<Checkpoint>) -> Result<PathBuf> {
    let corpus = cfg.dataset.load(base, Split::Train)?;
    let dir = pretrain_dir(out, cfg.pretrain.method);
    let opts = RunOptions {
        resume,
        checkpoint_dir: Some(dir.clone()),
        ..RunOptions::default()
    };
    let result = pretrain_with(&cfg.pretrain, &corpus, opts)?;
    let path = dir.join("checkpoint.ckpt");
    save_checkpoint(&result.checkpoint, &path)?;
    write_log(&result.log, &dir)?;
    Ok(path)
}

/// Summary of a finetuning run, stored next to its checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneMeta {
    pub pretrain_method: Method,
    pub init: Option<PathBuf>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

/// Finetunes on the downstream train split (selecting on val) and returns
/// the output directory holding `best.ckpt` and `last.ckpt`.
pub fn cmd_finetune(cfg: &ExperimentConfig, base: &Path, out: &Path) -> Result<PathBuf> {
    let init = match &cfg.finetune.init {
        FinetuneInit::Checkpoint(p) => Some(base.join(p)),
        FinetuneInit::Random if cfg.pretrain.method == Method::None => None,
        FinetuneInit::Random => {
            let p = pretrain_dir(out, cfg.pretrain.method).join("checkpoint.ckpt");
            if !p.is_file() {
                return Err(Error::invalid(format!(
                    "no {} checkpoint at {}; run pretrain first or pass --random",
                    cfg.pretrain.method,
                    p.display()
                )));
            }
            Some(p)
        }
    };
    let ckpt = init.as_deref().map(load_checkpoint).transpose()?;
    let method = ckpt.as_ref().map_or(Method::None, |c| c.method);
    let fcfg = cfg.finetune.clone();
    let data = cfg.downstream();
    let train = data.load(base, Split::Train)?;
    let val = data.load(base, Split::Val)?;
    let outcome = finetune(&fcfg, ckpt.as_ref(), &train, &val)?;
    let dir = finetune_dir(out, method);
    let digest = fcfg.digest();
    let last_epoch = outcome.log.epochs.len();
    save_checkpoint(
        &Checkpoint::from_model(&outcome.best, method, outcome.best_epoch, fcfg.seed, digest),
        &dir.join("best.ckpt"),
    )?;
    save_checkpoint(
        &Checkpoint::from_model(&outcome.last, method, last_epoch, fcfg.seed, digest),
        &dir.join("last.ckpt"),
    )?;
    write_log(&outcome.log, &dir)?;
    let meta = FinetuneMeta {
        pretrain_method: method,
        init,
        best_epoch: outcome.best_epoch,
        best_val_accuracy: outcome.best_val_accuracy,
    };
    write_text(&dir.join("finetune.toml"), &toml::to_string(&meta).map_err(|e| Error::invalid(e.to_string()))?)?;
    Ok(dir)
}

/// Evaluates the finetuned models of `cfg.pretrain.method` on the test
/// split and writes `<out>/results/<method>.rec` with its matrix and plot.
pub fn cmd_evaluate(cfg: &ExperimentConfig, base: &Path, out: &Path) -> Result<ResultsRecord> {
    let dir = finetune_dir(out, cfg.pretrain.method);
    let meta_path = dir.join("finetune.toml");
    let meta_text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: FinetuneMeta = toml::from_str(&meta_text).map_err(|e| toml_error(&meta_text, &meta_path, e))?;
    let best = load_checkpoint(&dir.join("best.ckpt"))?.model();
    let last = load_checkpoint(&dir.join("last.ckpt"))?.model();
    let test = cfg.downstream().load(base, Split::Test)?;
    let policy = &cfg.finetune.augmentation;
    let (matrix, report) = evaluate(&best, &test, policy)?;
    let (_, last_report) = evaluate(&last, &test, policy)?;

    let label = cfg.pretrain.method.label();
    let results = out.join("results");
    let plot_path = results.join(format!("{label}.confusion.png"));
    let (csv_path, _) = plot_sidecars(&plot_path);
    let plot = if cfg.eval.no_plot {
        write_text(&csv_path, &matrix.to_csv())?;
        None
    } else {
        emit_confusion_plot(&matrix, &plot_path)?;
        Some(plot_path)
    };
    let method = meta.pretrain_method;
    let record = ResultsRecord {
        experiment: cfg.experiment.clone().unwrap_or_else(|| experiment_label(method).to_string()),
        method: method.label().to_string(),
        setup: cfg.setup(),
        arch: cfg.pretrain.encoder.arch.label().to_string(),
        pretrain_dataset: if method == Method::None { "-".into() } else { cfg.dataset.label() },
        finetune_dataset: cfg.downstream().label(),
        seed: cfg.finetune.seed,
        test_accuracy: report.accuracy,
        test_accuracy_last: last_report.accuracy,
        best_epoch: meta.best_epoch,
        matrix_csv: Some(csv_path),
        plot,
    };
    record.save(&results.join(format!("{label}.rec")))?;
    Ok(record)
}

/// Table of `records` in input order.
pub fn report(records: &[ResultsRecord], setup: Setup, arch: &str) -> String {
    let rows: Vec<ResultRow> = records.iter().map(ResultsRecord::row).collect();
    render_results_table(&rows, setup, arch)
}

/// Runs pretrain (unless the method is `none`), finetune and evaluate.
pub fn run_pipeline(cfg: &ExperimentConfig, base: &Path, out: &Path) -> Result<ResultsRecord> {
    cfg.validate(base)?;
    if cfg.pretrain.method != Method::None && cfg.finetune.init == FinetuneInit::Random {
        cmd_pretrain(cfg, base, out, None)?;
    }
    cmd_finetune(cfg, base, out)?;
    cmd_evaluate(cfg, base, out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub id: String,
    pub overrides: BTreeMap<String, toml::Value>,
}

/// Cartesian product of the grid in key order, last key varying fastest.
pub fn sweep_cells(grid: &BTreeMap<String, Vec<toml::Value>>) -> Result<Vec<SweepCell>> {
    if let Some((k, _)) = grid.iter().find(|(_, v)| v.is_empty()) {
        return Err(Error::invalid(format!("sweep key {k} has no values")));
    }
    let mut combos: Vec<BTreeMap<String, toml::Value>> = vec![BTreeMap::new()];
    for (key, values) in grid {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.insert(key.clone(), v.clone());
                    c
                })
            })
            .collect();
    }
    Ok(combos
        .into_iter()
        .enumerate()
        .map(|(i, overrides)| {
            let text = toml::to_string(&overrides).expect("overrides serialize");
            let hash = hex::encode(&Sha256::digest(text.as_bytes())[..4]);
            SweepCell {
                id: format!("cell-{i:03}-{hash}"),
                overrides,
            }
        })
        .collect())
}

fn set_dotted(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::invalid("empty sweep key"))?;
    let mut table = doc;
    for p in parts {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::invalid(format!("sweep key {key}: {p} is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

#[derive(Clone, Debug)]
pub struct SweepSummary {
    pub cells: Vec<(SweepCell, ResultsRecord)>,
    /// Cells that were already complete and not re-run.
    pub skipped: usize,
}

impl SweepSummary {
    pub fn best(&self) -> Option<&(SweepCell, ResultsRecord)> {
        self.cells
            .iter()
            .fold(None, |best: Option<&(SweepCell, ResultsRecord)>, c| match best {
                Some(b) if b.1.test_accuracy >= c.1.test_accuracy => Some(b),
                _ => Some(c),
            })
    }

    pub fn best_line(&self) -> String {
        match self.best() {
            Some((cell, rec)) => {
                let mut s = format!("best cell: {} accuracy {:.2}%", cell.id, 100.0 * rec.test_accuracy);
                for (k, v) in &cell.overrides {
                    let _ = write!(s, " {k}={v}");
                }
                s
            }
            None => "best cell: none".into(),
        }
    }
}

/// Runs every grid cell under `<out>/sweep/<cell id>/`, skipping cells that
/// already hold a results record.
pub fn cmd_sweep(cfg: &ExperimentConfig, base: &Path, out: &Path, parallel: bool) -> Result<SweepSummary> {
    let sweep = cfg.sweep.clone().ok_or_else(|| Error::invalid("config has no [sweep] section"))?;
    let cells = sweep_cells(&sweep.grid)?;
    let mut plain = cfg.clone();
    plain.sweep = None;
    let doc = toml::Table::try_from(&plain).map_err(|e| Error::invalid(e.to_string()))?;
    let mut configs = Vec::new();
    for cell in &cells {
        let mut d = doc.clone();
        for (k, v) in &cell.overrides {
            set_dotted(&mut d, k, v.clone())?;
        }
        let text = toml::to_string(&d).map_err(|e| Error::invalid(e.to_string()))?;
        let c = ExperimentConfig::parse(&text, Path::new(&cell.id))?;
        c.validate(base)?;
        configs.push((cell.clone(), c));
    }

    let root = out.join("sweep");
    let run_cell = |(cell, c): &(SweepCell, ExperimentConfig)| -> Result<(ResultsRecord, bool)> {
        let dir = root.join(&cell.id);
        let rec_path = dir.join("result.rec");
        if rec_path.is_file() {
            return Ok((ResultsRecord::load(&rec_path)?, true));
        }
        let overrides = toml::to_string(&cell.overrides).map_err(|e| Error::invalid(e.to_string()))?;
        write_text(&dir.join("cell.toml"), &overrides)?;
        let rec = run_pipeline(c, base, &dir)?;
        // written last so an interrupted cell is re-run from scratch
        rec.save(&rec_path)?;
        Ok((rec, false))
    };
    let results: Vec<Result<(ResultsRecord, bool)>> = if parallel || sweep.parallel_cells {
        std::thread::scope(|s| {
            let handles: Vec<_> = configs.iter().map(|c| s.spawn(|| run_cell(c))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::invalid("sweep cell panicked"))))
                .collect()
        })
    } else {
        configs.iter().map(run_cell).collect()
    };
    let mut summary = SweepSummary {
        cells: Vec::new(),
        skipped: 0,
    };
    for ((cell, _), r) in configs.into_iter().zip(results) {
        let (rec, skipped) = r?;
        summary.skipped += usize::from(skipped);
        summary.cells.push((cell, rec));
    }
    let mut table = String::from("| Cell | Overrides | Classification Accuracy (%) |\n|---|---|---:|\n");
    for (cell, rec) in &summary.cells {
        let o: Vec<String> = cell.overrides.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let _ = writeln!(table, "| {} | {} | {:.2} |", cell.id, o.join(" "), 100.0 * rec.test_accuracy);
    }
    let _ = writeln!(table, "\n{}", summary.best_line());
    write_text(&root.join("summary.md"), &table)?;
    Ok(summary)
}
