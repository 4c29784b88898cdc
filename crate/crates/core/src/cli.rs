//! `nid` command-line front end.
//!
//! Every command writes a `manifest.json` that records the resolved
//! configuration, the dataset fingerprint, seeds and output files. Flags
//! override a `--config` file, which overrides the built-in defaults.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{
    apply_class_split, generate_synthetic, holdout_split, load_dataset, make_split, save_dataset,
    DataFormat, EmbeddingDataset, SplitSpec, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::eval::{assign_clusters, report, MetricsReport};
use crate::math::{fmt_float, fmt_opt_float};
use crate::repr::{predict_probs, HeadArch};
use crate::sinkhorn::{estep_traced, write_plan, write_residual_trace, SinkhornConfig};
use crate::trainer::{save_telemetry, train_with, Ablation, TrainConfig, TrainOptions};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "NID_OUTPUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "nid", version, about = "Discover known and novel classes in embedding datasets")]
pub struct Cli {
    /// Root directory for run outputs.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV, default_value = "runs")]
    pub output_root: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded Gaussian-mixture dataset with a known/novel split.
    GenData(GenDataArgs),
    /// Train a model and write checkpoint, telemetry and manifest.
    Train(TrainArgs),
    /// Score one or more checkpoints against a labeled dataset.
    Eval(EvalArgs),
    /// Train and evaluate over a grid of known-class ratios and seeds.
    Sweep(SweepArgs),
    /// Run one pseudo-labeling step with a checkpoint and dump the plan.
    PseudoLabel(PseudoLabelArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Number of classes K.
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    /// Embedding dimension D.
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    /// Training samples per class.
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    /// Extra samples per class written to the held-out file.
    #[arg(long, default_value_t = 0)]
    pub test_per_class: usize,
    /// Per-coordinate noise standard deviation.
    #[arg(long, default_value_t = 1.0)]
    pub spread: f64,
    /// Typical norm of the class centers.
    #[arg(long, default_value_t = 5.0)]
    pub center_scale: f64,
    /// Fraction of known-class rows marked labeled.
    #[arg(long, default_value_t = 0.1)]
    pub labeled_fraction: f64,
    /// Fraction of classes that are known.
    #[arg(long, default_value_t = 0.75)]
    pub known_ratio: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output dataset path (`.csv` or `.jsonl`).
    #[arg(long)]
    pub out: PathBuf,
    /// Held-out dataset path; defaults to `<out stem>.test.<ext>`.
    #[arg(long)]
    pub test_out: Option<PathBuf>,
    /// File format; inferred from the extension when omitted.
    #[arg(long, value_enum)]
    pub format: Option<DataFormat>,
}

/// Training hyperparameters shared by `train` and `sweep`.
#[derive(Debug, Clone, Args)]
pub struct HyperArgs {
    /// TOML or JSON config (or a run manifest); flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = TrainConfig::default().seed)]
    pub seed: u64,
    /// Entropy weight of the transport problem.
    #[arg(long, default_value_t = TrainConfig::default().sinkhorn.eta)]
    pub eta: f64,
    /// Softmax temperature.
    #[arg(long, default_value_t = TrainConfig::default().weights.tau)]
    pub tau: f64,
    /// Intra-cluster weight; the inter-cluster term gets 1 - alpha.
    #[arg(long, default_value_t = TrainConfig::default().weights.alpha)]
    pub alpha: f64,
    /// Class-prior momentum.
    #[arg(long, default_value_t = TrainConfig::default().lambda1)]
    pub lambda1: f64,
    /// Prototype momentum.
    #[arg(long, default_value_t = TrainConfig::default().lambda2)]
    pub lambda2: f64,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    pub batch_size: usize,
    #[arg(long, value_enum, default_value_t = TrainConfig::default().ablation)]
    pub ablation: Ablation,
    /// Head learning rate.
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    pub learning_rate: f64,
    /// Learning rate of the inter-cluster step on the prototypes.
    #[arg(long, default_value_t = TrainConfig::default().prototype_learning_rate)]
    pub prototype_learning_rate: f64,
    #[arg(long, default_value_t = TrainConfig::default().sgd_momentum)]
    pub sgd_momentum: f64,
    /// Width of the normalized representation.
    #[arg(long, default_value_t = TrainConfig::default().representation_dim)]
    pub representation_dim: usize,
    /// Use a two-layer head with this hidden width (default: single affine layer).
    #[arg(long)]
    pub mlp_hidden: Option<usize>,
    #[arg(long, default_value_t = TrainConfig::default().sinkhorn.max_iterations)]
    pub sinkhorn_max_iterations: usize,
    #[arg(long, default_value_t = TrainConfig::default().sinkhorn.tolerance)]
    pub sinkhorn_tolerance: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training dataset.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub format: Option<DataFormat>,
    /// Output directory; defaults to `<output root>/train`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Also save a checkpoint every k epochs.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Write the per-iteration Sinkhorn residuals to `residual_trace.csv`.
    #[arg(long)]
    pub trace: bool,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to score; repeat for several seeds.
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<PathBuf>,
    /// Dataset with ground truth on every row.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub format: Option<DataFormat>,
    /// Output directory; defaults to `<output root>/eval`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Dataset with ground truth on every row; re-split for every run.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub format: Option<DataFormat>,
    /// Held-out evaluation set from the same classes; without it the
    /// unlabeled training rows are scored.
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    /// Known-class ratios.
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75")]
    pub ratios: Vec<f64>,
    /// Seeds, used for both the split and training.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    /// Fraction of known-class rows marked labeled in each split.
    #[arg(long, default_value_t = 0.1)]
    pub labeled_fraction: f64,
    /// Output directory; defaults to `<output root>/sweep`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Debug, Args)]
pub struct PseudoLabelArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub format: Option<DataFormat>,
    /// Output directory; defaults to `<output root>/pseudo-label`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = SinkhornConfig::default().max_iterations)]
    pub sinkhorn_max_iterations: usize,
    #[arg(long, default_value_t = SinkhornConfig::default().tolerance)]
    pub sinkhorn_tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub path: PathBuf,
    /// SHA-256 of the canonical CSV encoding.
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    #[serde(default)]
    pub config: Option<TrainConfig>,
    #[serde(default)]
    pub datasets: Vec<DatasetRef>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub outputs: Vec<PathBuf>,
    /// Command-specific parameters.
    #[serde(default)]
    pub parameters: serde_json::Value,
}

impl RunManifest {
    fn new(command: &str) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config: None,
            datasets: Vec::new(),
            seeds: Vec::new(),
            outputs: Vec::new(),
            parameters: serde_json::Value::Null,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

/// Parse the process arguments and run; returns the exit code.
pub fn main_entry() -> i32 {
    let matches = Cli::command().get_matches();
    match run(&matches) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(matches: &ArgMatches) -> Result<()> {
    let cli = Cli::from_arg_matches(matches).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let sub = matches.subcommand().map(|(_, m)| m).expect("subcommand is required");
    match &cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => cmd_train(args, sub, &cli.output_root),
        Command::Eval(args) => cmd_eval(args, &cli.output_root),
        Command::Sweep(args) => cmd_sweep(args, sub, &cli.output_root),
        Command::PseudoLabel(args) => cmd_pseudo_label(args, &cli.output_root),
    }
}

fn format_for(path: &Path, format: Option<DataFormat>) -> DataFormat {
    format.unwrap_or_else(|| DataFormat::from_path(path))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load(path: &Path, format: Option<DataFormat>) -> Result<(EmbeddingDataset, DatasetRef)> {
    let ds = load_dataset(path, format_for(path, format))?;
    let reference = DatasetRef {
        path: path.to_path_buf(),
        fingerprint: ds.fingerprint(),
    };
    Ok((ds, reference))
}

fn gen_data(args: &GenDataArgs) -> Result<()> {
    let spec = SyntheticSpec {
        class_count: args.classes,
        dim: args.dim,
        samples_per_class: args.per_class + args.test_per_class,
        cluster_spread: args.spread,
        center_scale: args.center_scale,
        seed: args.seed,
    };
    spec.validate()?;
    if args.per_class == 0 {
        return Err(Error::InvalidConfig("per-class must be >= 1".into()));
    }
    let split = SplitSpec::new(args.labeled_fraction, args.known_ratio, args.seed);
    split.validate()?;
    let full = generate_synthetic(&spec)?;
    let format = format_for(&args.out, args.format);
    let mut manifest = RunManifest::new("gen-data");
    manifest.seeds = vec![args.seed];

    let train = if args.test_per_class > 0 {
        let fraction = args.test_per_class as f64 / spec.samples_per_class as f64;
        let (train, test) = holdout_split(&full, fraction, args.seed)?;
        let test = apply_class_split(&test, &split)?;
        let test_path = args.test_out.clone().unwrap_or_else(|| sibling(&args.out, "test"));
        save_dataset(&test, &test_path, format_for(&test_path, args.format))?;
        manifest.datasets.push(DatasetRef {
            path: test_path.clone(),
            fingerprint: test.fingerprint(),
        });
        manifest.outputs.push(test_path);
        train
    } else {
        full
    };
    let train = make_split(&train, &split)?;
    save_dataset(&train, &args.out, format)?;
    manifest.datasets.insert(
        0,
        DatasetRef {
            path: args.out.clone(),
            fingerprint: train.fingerprint(),
        },
    );
    manifest.outputs.insert(0, args.out.clone());
    manifest.parameters = serde_json::json!({
        "synthetic": spec,
        "split": split,
        "train_per_class": args.per_class,
        "test_per_class": args.test_per_class,
    });
    let manifest_path = sibling(&args.out, "manifest").with_extension("json");
    manifest.save(&manifest_path)?;
    say(&format!(
        "wrote {} rows (K={}, known={}, labeled={}) to {}\n",
        train.len(),
        train.num_classes(),
        train.class_count_known(),
        train.labeled_count(),
        args.out.display()
    ))?;
    Ok(())
}

/// `dir/stem.tag.ext` next to `path`.
fn sibling(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
    let name = match path.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{stem}.{tag}.{ext}"),
        None => format!("{stem}.{tag}"),
    };
    path.with_file_name(name)
}

/// Read a config file: TOML by extension, otherwise JSON holding either a
/// bare config or a run manifest with a `config` field.
pub fn load_config_file(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let is_toml = path.extension().and_then(|e| e.to_str()) == Some("toml");
    if is_toml {
        return toml::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())));
    }
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let config = match value.get("config") {
        Some(inner) if value.get("tool").is_some() => inner.clone(),
        _ => value,
    };
    Ok(serde_json::from_value(config)?)
}

fn given(matches: &ArgMatches, id: &str) -> bool {
    matches!(
        matches.value_source(id),
        Some(ValueSource::CommandLine | ValueSource::EnvVariable)
    )
}

impl HyperArgs {
    /// Defaults, then the config file, then explicitly given flags.
    pub fn resolve(&self, matches: &ArgMatches) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(path) => load_config_file(path)?,
            None => TrainConfig::default(),
        };
        macro_rules! take {
            ($id:literal, $field:expr, $value:expr) => {
                if given(matches, $id) {
                    $field = $value;
                }
            };
        }
        take!("seed", c.seed, self.seed);
        take!("eta", c.sinkhorn.eta, self.eta);
        take!("tau", c.weights.tau, self.tau);
        take!("alpha", c.weights.alpha, self.alpha);
        take!("lambda1", c.lambda1, self.lambda1);
        take!("lambda2", c.lambda2, self.lambda2);
        take!("epochs", c.epochs, self.epochs);
        take!("batch_size", c.batch_size, self.batch_size);
        take!("ablation", c.ablation, self.ablation);
        take!("learning_rate", c.learning_rate, self.learning_rate);
        take!("prototype_learning_rate", c.prototype_learning_rate, self.prototype_learning_rate);
        take!("sgd_momentum", c.sgd_momentum, self.sgd_momentum);
        take!("representation_dim", c.representation_dim, self.representation_dim);
        take!("sinkhorn_max_iterations", c.sinkhorn.max_iterations, self.sinkhorn_max_iterations);
        take!("sinkhorn_tolerance", c.sinkhorn.tolerance, self.sinkhorn_tolerance);
        if let Some(hidden) = self.mlp_hidden {
            c.head = HeadArch::Mlp { hidden };
        }
        let c = c.with_ablation(c.ablation);
        c.validate()?;
        Ok(c)
    }
}

fn cmd_train(args: &TrainArgs, matches: &ArgMatches, root: &Path) -> Result<()> {
    let config = args.hyper.resolve(matches)?;
    let (dataset, data_ref) = load(&args.data, args.format)?;
    let out_dir = args.out_dir.clone().unwrap_or_else(|| root.join("train"));
    create_dir(&out_dir)?;
    if args.checkpoint_every == Some(0) {
        return Err(Error::InvalidConfig("checkpoint-every must be >= 1".into()));
    }

    let mut outputs = Vec::new();
    let fingerprint = Some(data_ref.fingerprint.clone());
    let options = TrainOptions {
        record_trace: args.trace,
    };
    let out = train_with(&dataset, &config, options, |model, t| {
        if let Some(every) = args.checkpoint_every {
            if t.epoch % every == 0 && t.epoch != config.epochs {
                let path = out_dir.join(format!("checkpoint_epoch{:04}.json", t.epoch));
                Checkpoint::from_model(model, &config, &dataset, fingerprint.clone()).save(&path)?;
                outputs.push(path);
            }
        }
        Ok(())
    })?;

    let ckpt_path = out_dir.join("checkpoint.json");
    Checkpoint::from_model(&out.model, &config, &dataset, fingerprint).save(&ckpt_path)?;
    let csv_path = out_dir.join("telemetry.csv");
    let json_path = out_dir.join("telemetry.json");
    save_telemetry(&out.telemetry, &csv_path, &json_path)?;
    outputs.extend([ckpt_path, csv_path, json_path]);
    if args.trace {
        let path = out_dir.join("residual_trace.csv");
        write_residual_trace(&path, &out.residual_trace)?;
        outputs.push(path);
    }

    let mut manifest = RunManifest::new("train");
    manifest.config = Some(config);
    manifest.datasets = vec![data_ref];
    manifest.seeds = vec![config.seed];
    manifest.outputs = outputs;
    manifest.save(&out_dir.join("manifest.json"))?;

    match out.telemetry.last() {
        Some(t) => say(&format!(
            "epoch {}: loss {:.6} pseudo-label acc {} residual {:.3e}\n",
            t.epoch,
            t.loss_total,
            t.pseudo_label_accuracy.map_or("n/a".to_string(), |a| format!("{a:.4}")),
            t.sinkhorn_residual
        ))?,
        None => say("no epochs run; saved the initial model\n")?,
    }
    say(&format!("outputs in {}\n", out_dir.display()))?;
    Ok(())
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn say(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e)),
        _ => Ok(()),
    }
}

fn opt_cell(v: Option<f64>) -> String {
    fmt_opt_float(v)
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub const EVAL_HEADER: &str = "seed,acc,nmi,ari,acc_known,acc_novel";

fn eval_checkpoint(ckpt: &Checkpoint, dataset: &EmbeddingDataset) -> Result<MetricsReport> {
    ckpt.check_compatible(dataset)?;
    let model = ckpt.model()?;
    let truth = dataset
        .ground_truth()
        .ok_or_else(|| Error::InvalidInput("evaluation needs ground truth on every row".into()))?;
    let predicted = assign_clusters(&model.head, &model.bank, model.tau, dataset.embeddings())?;
    report(&predicted, &truth, ckpt.class_count_known)
}

fn cmd_eval(args: &EvalArgs, root: &Path) -> Result<()> {
    let (dataset, data_ref) = load(&args.data, args.format)?;
    let out_dir = args.out_dir.clone().unwrap_or_else(|| root.join("eval"));
    create_dir(&out_dir)?;
    let mut manifest = RunManifest::new("eval");
    manifest.datasets = vec![data_ref];

    let mut rows = Vec::new();
    for (i, path) in args.checkpoints.iter().enumerate() {
        let ckpt = Checkpoint::load(path)?;
        let r = eval_checkpoint(&ckpt, &dataset)?;
        let report_path = if args.checkpoints.len() == 1 {
            out_dir.join("report.json")
        } else {
            out_dir.join(format!("report_{i:02}_seed{}.json", ckpt.seed))
        };
        fs::write(&report_path, serde_json::to_vec_pretty(&r)?).map_err(|e| Error::io(&report_path, e))?;
        manifest.outputs.push(report_path);
        manifest.seeds.push(ckpt.seed);
        rows.push((ckpt.seed, r));
    }

    if rows.len() == 1 {
        say(&format!("{}\n", serde_json::to_string_pretty(&rows[0].1)?))?;
    }
    let mut table = String::from(EVAL_HEADER);
    table.push('\n');
    for (seed, r) in &rows {
        table.push_str(&format!(
            "{seed},{},{},{},{},{}\n",
            fmt_float(r.acc),
            fmt_float(r.nmi),
            fmt_float(r.ari),
            opt_cell(r.acc_known),
            opt_cell(r.acc_novel)
        ));
    }
    let col = |f: &dyn Fn(&MetricsReport) -> Option<f64>| opt_cell(mean(rows.iter().filter_map(|(_, r)| f(r))));
    table.push_str(&format!(
        "mean,{},{},{},{},{}\n",
        col(&|r| Some(r.acc)),
        col(&|r| Some(r.nmi)),
        col(&|r| Some(r.ari)),
        col(&|r| r.acc_known),
        col(&|r| r.acc_novel)
    ));
    let csv_path = out_dir.join("metrics.csv");
    fs::write(&csv_path, &table).map_err(|e| Error::io(&csv_path, e))?;
    manifest.outputs.push(csv_path);
    manifest.save(&out_dir.join("manifest.json"))?;
    if rows.len() > 1 {
        say(&table)?;
    }
    Ok(())
}

pub const SWEEP_HEADER: &str = "ratio,seed,known_classes,acc,nmi,ari,acc_known,acc_novel";

/// One sweep cell: split, train, score.
pub fn sweep_run(
    dataset: &EmbeddingDataset,
    test: Option<&EmbeddingDataset>,
    ratio: f64,
    labeled_fraction: f64,
    config: &TrainConfig,
) -> Result<(EmbeddingDataset, crate::trainer::TrainOutput, MetricsReport)> {
    let spec = SplitSpec::new(labeled_fraction, ratio, config.seed);
    let split = make_split(dataset, &spec)?;
    let out = train_with(&split, config, TrainOptions::default(), |_, _| Ok(()))?;
    let model = &out.model;
    let r = match test {
        Some(test) => {
            let test = apply_class_split(test, &spec)?;
            let truth = test.ground_truth().expect("renumbered from full ground truth");
            let pred = assign_clusters(&model.head, &model.bank, model.tau, test.embeddings())?;
            report(&pred, &truth, split.class_count_known())?
        }
        None => {
            let rows = split.unlabeled_indices();
            let truth = split.ground_truth().expect("split keeps ground truth");
            let truth: Vec<usize> = rows.iter().map(|&i| truth[i]).collect();
            let x = split.embeddings().select(ndarray::Axis(0), &rows);
            let pred = assign_clusters(&model.head, &model.bank, model.tau, x.view())?;
            report(&pred, &truth, split.class_count_known())?
        }
    };
    Ok((split, out, r))
}

fn cmd_sweep(args: &SweepArgs, matches: &ArgMatches, root: &Path) -> Result<()> {
    let base = args.hyper.resolve(matches)?;
    if args.ratios.is_empty() || args.seeds.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one ratio and one seed".into()));
    }
    let (dataset, data_ref) = load(&args.data, args.format)?;
    let test = match &args.test_data {
        Some(path) => Some(load(path, args.format)?),
        None => None,
    };
    let out_dir = args.out_dir.clone().unwrap_or_else(|| root.join("sweep"));
    create_dir(&out_dir)?;

    let cells: Vec<(f64, u64)> = args
        .ratios
        .iter()
        .flat_map(|&r| args.seeds.iter().map(move |&s| (r, s)))
        .collect();
    let results: Vec<Result<(f64, u64, usize, MetricsReport)>> = cells
        .par_iter()
        .map(|&(ratio, seed)| {
            let config = TrainConfig { seed, ..base };
            let (split, out, r) =
                sweep_run(&dataset, test.as_ref().map(|t| &t.0), ratio, args.labeled_fraction, &config)?;
            let run_dir = out_dir.join(format!("ratio{ratio}_seed{seed}"));
            create_dir(&run_dir)?;
            save_telemetry(&out.telemetry, &run_dir.join("telemetry.csv"), &run_dir.join("telemetry.json"))?;
            Checkpoint::from_model(&out.model, &config, &split, None).save(&run_dir.join("checkpoint.json"))?;
            Ok((ratio, seed, split.class_count_known(), r))
        })
        .collect();

    let mut table = String::from(SWEEP_HEADER);
    table.push('\n');
    for result in results {
        let (ratio, seed, known, r) = result?;
        table.push_str(&format!(
            "{ratio},{seed},{known},{},{},{},{},{}\n",
            fmt_float(r.acc),
            fmt_float(r.nmi),
            fmt_float(r.ari),
            opt_cell(r.acc_known),
            opt_cell(r.acc_novel)
        ));
    }
    let csv_path = out_dir.join("sweep.csv");
    fs::write(&csv_path, &table).map_err(|e| Error::io(&csv_path, e))?;

    let mut manifest = RunManifest::new("sweep");
    manifest.config = Some(base);
    manifest.datasets.push(data_ref);
    if let Some((_, r)) = test {
        manifest.datasets.push(r);
    }
    manifest.seeds = args.seeds.clone();
    manifest.outputs = vec![csv_path];
    manifest.parameters = serde_json::json!({
        "ratios": args.ratios,
        "labeled_fraction": args.labeled_fraction,
    });
    manifest.save(&out_dir.join("manifest.json"))?;
    say(&table)
}

fn cmd_pseudo_label(args: &PseudoLabelArgs, root: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let (dataset, data_ref) = load(&args.data, args.format)?;
    ckpt.check_compatible(&dataset)?;
    let model = ckpt.model()?;
    let out_dir = args.out_dir.clone().unwrap_or_else(|| root.join("pseudo-label"));
    create_dir(&out_dir)?;

    let mut rows = dataset.unlabeled_indices();
    if rows.is_empty() {
        rows = (0..dataset.len()).collect();
    }
    let x = dataset.embeddings().select(ndarray::Axis(0), &rows);
    let reps = model.head.forward(x.view())?.representations;
    let probs = predict_probs(reps.view(), &model.bank, model.tau)?;
    let config = SinkhornConfig {
        eta: ckpt.eta,
        max_iterations: args.sinkhorn_max_iterations,
        tolerance: args.sinkhorn_tolerance,
    };
    let out = estep_traced(probs.view(), &model.prior, &config)?;

    let plan_path = out_dir.join("plan.csv");
    write_plan(&plan_path, &out.plan, &out.pseudo_labels, &rows)?;
    let trace_path = out_dir.join("residual_trace.csv");
    let trace = out.trace.as_ref().expect("traced E-step");
    let trace_rows: Vec<(usize, usize, f64)> = trace
        .residuals
        .iter()
        .enumerate()
        .map(|(i, &r)| (ckpt.epoch, i + 1, r))
        .collect();
    write_residual_trace(&trace_path, &trace_rows)?;

    let mut manifest = RunManifest::new("pseudo-label");
    manifest.datasets = vec![data_ref];
    manifest.seeds = vec![ckpt.seed];
    manifest.outputs = vec![plan_path, trace_path];
    manifest.parameters = serde_json::json!({
        "checkpoint": args.checkpoint,
        "sinkhorn": config,
        "class_prior": out.prior.beta,
    });
    manifest.save(&out_dir.join("manifest.json"))?;
    say(&format!(
        "{} rows labeled; Sinkhorn {} after {} iterations (residual {:.3e})\n",
        rows.len(),
        if out.plan.converged { "converged" } else { "stopped" },
        out.plan.iterations,
        out.plan.marginal_residual
    ))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn help_lists_published_defaults() {
        let help = Cli::command()
            .find_subcommand_mut("train")
            .unwrap()
            .render_long_help()
            .to_string();
        let d = TrainConfig::default();
        for (flag, value) in [
            ("--eta", d.sinkhorn.eta.to_string()),
            ("--tau", d.weights.tau.to_string()),
            ("--alpha", d.weights.alpha.to_string()),
            ("--lambda1", d.lambda1.to_string()),
            ("--lambda2", d.lambda2.to_string()),
            ("--epochs", d.epochs.to_string()),
            ("--batch-size", d.batch_size.to_string()),
            ("--seed", d.seed.to_string()),
        ] {
            let pos = help.find(&format!("{flag} <")).unwrap_or_else(|| panic!("{flag} missing"));
            let rest = &help[pos..];
            let end = rest.find("\n  -").unwrap_or(rest.len());
            assert!(rest[..end].contains(&format!("[default: {value}]")), "{flag}: {}", &rest[..end]);
        }
        assert!(help.contains("[default: full]"));
    }

    fn parse(args: &[&str]) -> (Cli, ArgMatches) {
        let matches = Cli::command().try_get_matches_from(args).unwrap();
        (Cli::from_arg_matches(&matches).unwrap(), matches)
    }

    fn resolve(args: &[&str]) -> TrainConfig {
        let (cli, matches) = parse(args);
        let sub = matches.subcommand().unwrap().1;
        match cli.command {
            Command::Train(t) => t.hyper.resolve(sub).unwrap(),
            _ => unreachable!(),
        }
    }

    #[test]
    fn flags_override_config_file_which_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "epochs = 7\nlambda1 = 0.5\n[weights]\ntau = 0.2\n").unwrap();
        let p = path.to_str().unwrap();
        let c = resolve(&["nid", "train", "--data", "x.csv", "--config", p, "--lambda1", "0.9"]);
        assert_eq!(c.epochs, 7);
        assert_eq!(c.lambda1, 0.9);
        assert_eq!(c.weights.tau, 0.2);
        assert_eq!(c.weights.alpha, 0.7);
        let c = resolve(&["nid", "train", "--data", "x.csv"]);
        assert_eq!(c, TrainConfig::default());
    }

    #[test]
    fn config_file_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"epoch": 3}"#).unwrap();
        assert!(load_config_file(&path).is_err());
    }

    #[test]
    fn manifest_doubles_as_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let mut m = RunManifest::new("train");
        m.config = Some(TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        });
        m.save(&path).unwrap();
        assert_eq!(load_config_file(&path).unwrap().epochs, 3);
    }

    #[test]
    fn ablation_flag_sets_weights() {
        let c = resolve(&["nid", "train", "--data", "x.csv", "--ablation", "no_intra"]);
        assert_eq!(c.ablation, Ablation::NoIntra);
        assert_eq!(c.weights.alpha, 0.0);
    }

    #[test]
    fn sibling_paths() {
        assert_eq!(sibling(Path::new("a/data.csv"), "test"), PathBuf::from("a/data.test.csv"));
        assert_eq!(
            sibling(Path::new("data.jsonl"), "manifest").with_extension("json"),
            PathBuf::from("data.manifest.json")
        );
    }
}
