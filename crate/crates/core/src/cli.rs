//! Command-line front end: `gen`, `train`, `segment`, `probe`, `perturb` and `verify`.
//!
//! Configuration is a JSON object with flat dotted keys (`"train.lr": 0.02`) layered over the
//! defaults; `--set key=value` and `--seed` override the file. Every run writes `run.json` with
//! the resolved configuration, the seed and the file-format versions.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::autograd::{evaluate_decoder, evaluate_linear, train_depict, train_linear, TrainConfig};
use crate::datagen::{
    gen_range, label_map_pgm, read_embeddings, write_embeddings, LabeledImage, SynthConfig, EMBEDDING_VERSION,
};
use crate::decoder::{
    forward, layerwise_rate_probe, load_checkpoint, perturb_params, predict_labels, refinement_gaps,
    save_checkpoint, DecoderConfig, DecoderParams, Perturbation, Variant, CHECKPOINT_VERSION,
};
use crate::error::{Error, Result};
use crate::matcore::Seed;
use crate::operators::StepForm;
use crate::subspace::{matched_accuracy, pca_segment};
use crate::verify::{run_all_with, spearman, VerifyConfig};

/// Exit status for success.
pub const EXIT_OK: i32 = 0;
/// Hard-check failure or runtime (IO, data) failure.
pub const EXIT_FAILURE: i32 = 1;
/// Malformed invocation or configuration.
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "depict", version, about = "White-box subspace-attention segmentation decoder")]
pub struct Cli {
    /// JSON file of flat dotted configuration keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides `seed`, `synth.seed` and `train.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, created if absent.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Override one configuration key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset as embedding files plus ground-truth label maps.
    Gen(GenArgs),
    /// Train a decoder and write a checkpoint with per-epoch metrics.
    Train(TrainArgs),
    /// Segment one embedding file with a checkpoint, PCA, or both.
    Segment(SegmentArgs),
    /// Layer-wise projected-rate probe of a checkpoint.
    Probe(ProbeArgs),
    /// Prediction agreement under dictionary perturbations.
    Perturb(PerturbArgs),
    /// Run every verification check.
    Verify,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Number of images.
    #[arg(long, default_value_t = 640)]
    pub count: usize,
    /// Index of the first image.
    #[arg(long, default_value_t = 0)]
    pub start: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of `.depr` training files; generated from `synth.*` when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Directory of `.depr` test files; generated from `synth.*` when absent.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Also train the linear baseline and score the PCA baseline.
    #[arg(long)]
    pub baselines: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Depict,
    Pca,
    Both,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    /// Embedding file to segment.
    #[arg(long)]
    pub input: PathBuf,
    /// Checkpoint; required unless `--method pca`. PCA uses `synth.classes` directions.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Method::Depict)]
    pub method: Method,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Embedding file; a synthetic image at `--index` is used when absent.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub index: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PerturbKind {
    PerHeadOrthogonal,
    FullOrthogonal,
    OrthogonalizeHeads,
    GaussianNoise,
    All,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value_t = PerturbKind::All)]
    pub kind: PerturbKind,
    /// Noise level for `gaussian-noise`; `all` sweeps 0.01, 0.05 and 0.1.
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
    /// Directory of `.depr` files; synthetic test images are used when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

/// Model hyperparameters; `dim` and `num_classes` come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub variant: Variant,
    /// Defaults to 2 for CA and 3 for SA.
    pub sa_layers: Option<usize>,
    pub ca_layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub epsilon: f64,
    pub step_form: StepForm,
    pub final_norm: bool,
    pub normalize_queries: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = DecoderConfig::default_ca(1, 1);
        Self {
            variant: Variant::Ca,
            sa_layers: None,
            ca_layers: d.ca_layers,
            heads: d.heads,
            head_dim: d.head_dim,
            epsilon: d.epsilon,
            step_form: d.step_form,
            final_norm: d.final_norm,
            normalize_queries: d.normalize_queries,
        }
    }
}

impl ModelSection {
    pub fn decoder(&self, dim: usize, num_classes: usize) -> DecoderConfig {
        let base = match self.variant {
            Variant::Ca => DecoderConfig::default_ca(dim, num_classes),
            Variant::Sa => DecoderConfig::default_sa(dim, num_classes),
        };
        DecoderConfig {
            sa_layers: self.sa_layers.unwrap_or(base.sa_layers),
            ca_layers: if self.variant == Variant::Ca { self.ca_layers } else { 0 },
            heads: self.heads,
            head_dim: self.head_dim,
            epsilon: self.epsilon,
            step_form: self.step_form,
            final_norm: self.final_norm,
            normalize_queries: self.normalize_queries,
            ..base
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    /// Synthetic training images (indices `0..train_images`).
    pub train_images: usize,
    /// Synthetic test images (the indices after the training ones).
    pub test_images: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train_images: 512,
            test_images: 128,
        }
    }
}

/// Fully resolved configuration of one invocation.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub verify: VerifyConfig,
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for p in &parts[..parts.len() - 1] {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("intermediate config node is an object");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

impl RunConfig {
    /// Defaults, then the flat keys of `file`, then `overrides`, then the master seed.
    pub fn resolve(file: Option<&Value>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut flat = BTreeMap::new();
        flatten("", &serde_json::to_value(RunConfig::default())?, &mut flat);
        let mut apply = |key: &str, v: Value| -> Result<()> {
            if !flat.contains_key(key) {
                return Err(Error::Config(format!("unknown configuration key `{key}`")));
            }
            flat.insert(key.to_string(), v);
            Ok(())
        };
        if let Some(file) = file {
            if !file.is_object() {
                return Err(Error::Config("configuration file must hold a JSON object".into()));
            }
            let mut given = BTreeMap::new();
            flatten("", file, &mut given);
            for (k, v) in given {
                apply(&k, v)?;
            }
        }
        for o in overrides {
            let (k, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not KEY=VALUE")))?;
            let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            apply(k.trim(), v)?;
        }
        if let Some(s) = seed {
            for k in ["seed", "synth.seed", "train.seed"] {
                apply(k, Value::from(s))?;
            }
        }
        let cfg: RunConfig =
            serde_json::from_value(unflatten(&flat)).map_err(|e| Error::Config(e.to_string()))?;
        cfg.synth.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn decoder(&self) -> DecoderConfig {
        self.model.decoder(self.synth.ambient_dim, self.synth.classes)
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    seed: u64,
    config: &'a RunConfig,
    embedding_format_version: u32,
    checkpoint_format_version: u32,
    package_version: &'a str,
    outputs: Vec<String>,
}

fn write_manifest(out: &Path, command: &str, cfg: &RunConfig, outputs: &[PathBuf]) -> Result<()> {
    let m = Manifest {
        command,
        seed: cfg.seed,
        config: cfg,
        embedding_format_version: EMBEDDING_VERSION,
        checkpoint_format_version: CHECKPOINT_VERSION,
        package_version: env!("CARGO_PKG_VERSION"),
        outputs: outputs
            .iter()
            .map(|p| p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default())
            .collect(),
    };
    fs::write(out.join("run.json"), serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(())
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// `.depr` files of a directory in name order.
pub fn read_dir_images(dir: &Path) -> Result<Vec<(PathBuf, LabeledImage)>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "depr"));
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidArgument(format!("no .depr files in {}", dir.display())));
    }
    files
        .into_iter()
        .map(|p| {
            let img = read_embeddings(&p)?;
            Ok((p, img))
        })
        .collect()
}

fn load_or_generate(dir: Option<&Path>, cfg: &SynthConfig, start: u64, count: usize) -> Result<Vec<LabeledImage>> {
    match dir {
        Some(d) => Ok(read_dir_images(d)?.into_iter().map(|(_, i)| i).collect()),
        None => gen_range(cfg, start, count),
    }
}

fn cmd_gen(cfg: &RunConfig, args: &GenArgs, out: &Path) -> Result<Vec<PathBuf>> {
    let images = gen_range(&cfg.synth, args.start, args.count)?;
    let mut written = Vec::with_capacity(2 * images.len());
    for (k, img) in images.iter().enumerate() {
        let stem = format!("img_{:05}", args.start + k as u64);
        let depr = out.join(format!("{stem}.depr"));
        write_embeddings(&depr, img)?;
        let pgm = out.join(format!("{stem}.pgm"));
        fs::write(&pgm, label_map_pgm(&img.labels, img.grid)?)?;
        written.push(depr);
        written.push(pgm);
    }
    println!("wrote {} images to {}", images.len(), out.display());
    Ok(written)
}

#[derive(Serialize)]
struct EpochRow {
    epoch: usize,
    loss: f64,
    train_accuracy: f64,
}

#[derive(Serialize)]
struct EvalRow {
    method: &'static str,
    split: &'static str,
    accuracy: f64,
}

fn pca_accuracy(images: &[LabeledImage], classes: usize) -> Result<f64> {
    let mut total = 0.0;
    for img in images {
        let seg = pca_segment(&img.embeddings, classes.max(2))?;
        total += matched_accuracy(&seg, &img.labels);
    }
    Ok(total / images.len().max(1) as f64)
}

fn cmd_train(cfg: &RunConfig, args: &TrainArgs, out: &Path) -> Result<Vec<PathBuf>> {
    let n_train = cfg.data.train_images;
    let train = load_or_generate(args.data.as_deref(), &cfg.synth, 0, n_train)?;
    let test = load_or_generate(args.test.as_deref(), &cfg.synth, n_train as u64, cfg.data.test_images)?;
    let model = cfg.decoder();
    let outcome = train_depict(&train, &model, &cfg.train, Seed(cfg.seed).derive("init"))?;
    let ckpt = out.join("model.dpct");
    save_checkpoint(&ckpt, &model, &outcome.params)?;
    let metrics = out.join("metrics.csv");
    let rows: Vec<EpochRow> = outcome
        .history
        .iter()
        .map(|h| EpochRow {
            epoch: h.epoch,
            loss: h.loss,
            train_accuracy: h.accuracy,
        })
        .collect();
    write_csv(&metrics, &rows)?;
    let (_, test_acc) = evaluate_decoder(&outcome.params, &model, &test)?;
    let mut eval = vec![EvalRow {
        method: "depict",
        split: "test",
        accuracy: test_acc,
    }];
    if args.baselines {
        let (linear, _) = train_linear(&train, model.dim, model.num_classes, &cfg.train)?;
        eval.push(EvalRow {
            method: "linear",
            split: "test",
            accuracy: evaluate_linear(&linear, &test),
        });
        eval.push(EvalRow {
            method: "pca",
            split: "test",
            accuracy: pca_accuracy(&test, model.num_classes)?,
        });
    }
    let eval_path = out.join("eval.csv");
    write_csv(&eval_path, &eval)?;
    for r in &eval {
        println!("{} test accuracy {:.4}", r.method, r.accuracy);
    }
    Ok(vec![ckpt, metrics, eval_path])
}

#[derive(Serialize)]
struct SegmentRow {
    input: String,
    depict_accuracy: Option<f64>,
    pca_accuracy: Option<f64>,
}

fn cmd_segment(cfg: &RunConfig, args: &SegmentArgs, out: &Path) -> Result<Vec<PathBuf>> {
    let img = read_embeddings(&args.input)?;
    let stem = args
        .input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "input".into());
    let mut written = Vec::new();
    let mut row = SegmentRow {
        input: args.input.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
        depict_accuracy: None,
        pca_accuracy: None,
    };
    if matches!(args.method, Method::Depict | Method::Both) {
        let path = args
            .model
            .as_deref()
            .ok_or_else(|| Error::Config("--model is required for --method depict or both".into()))?;
        let (cfg, params) = load_checkpoint(path)?;
        let labels = predict_labels(&forward(&img.embeddings, &params, &cfg)?.masks);
        let pgm = out.join(format!("{stem}_depict.pgm"));
        fs::write(&pgm, label_map_pgm(&labels, img.grid)?)?;
        written.push(pgm);
        let hits = labels.iter().zip(&img.labels).filter(|(a, b)| a == b).count();
        row.depict_accuracy = Some(hits as f64 / labels.len() as f64);
    }
    if matches!(args.method, Method::Pca | Method::Both) {
        let labels = pca_segment(&img.embeddings, cfg.synth.classes.max(2))?;
        let pgm = out.join(format!("{stem}_pca.pgm"));
        fs::write(&pgm, label_map_pgm(&labels, img.grid)?)?;
        written.push(pgm);
        row.pca_accuracy = Some(matched_accuracy(&labels, &img.labels));
    }
    let csv_path = out.join("segment.csv");
    write_csv(&csv_path, &[&row])?;
    written.push(csv_path);
    Ok(written)
}

#[derive(Serialize)]
struct OwnLayerRow {
    layer: usize,
    head: usize,
    alpha: f64,
    delta_rate: f64,
    expected_sign: f64,
    agrees: bool,
}

fn cmd_probe(cfg: &RunConfig, args: &ProbeArgs, out: &Path) -> Result<Vec<PathBuf>> {
    let (model, params) = load_checkpoint(&args.model)?;
    let z = match &args.input {
        Some(p) => read_embeddings(p)?.embeddings,
        None => gen_range(&cfg.synth, args.index, 1)?.remove(0).embeddings,
    };
    let report = layerwise_rate_probe(&params, &model, &z)?;
    let rows_path = out.join("probe.csv");
    write_csv(&rows_path, &report.rows)?;
    let kappa = match model.step_form {
        StepForm::Simplified => 1.0,
        StepForm::Full => -1.0,
    };
    let own: Vec<OwnLayerRow> = report
        .own_layer
        .iter()
        .map(|d| {
            let expected = -(d.alpha.signum() * kappa);
            OwnLayerRow {
                layer: d.layer,
                head: d.head,
                alpha: d.alpha,
                delta_rate: d.delta_rate,
                expected_sign: expected,
                agrees: d.alpha != 0.0 && d.delta_rate.signum() == expected,
            }
        })
        .collect();
    let own_path = out.join("probe_own_layer.csv");
    write_csv(&own_path, &own)?;
    let gaps = refinement_gaps(&params, &model, &z)?;
    let gap_path = out.join("refinement.csv");
    write_csv(&gap_path, &gaps)?;
    let points: Vec<f64> = gaps.iter().map(|g| g.point as f64).collect();
    let values: Vec<f64> = gaps.iter().map(|g| g.gap).collect();
    println!(
        "sign agreement {:.3}; both signs present: {}; depth-gap Spearman {:.3}",
        report.sign_agreement(model.step_form),
        report.has_both_signs(),
        spearman(&points, &values)
    );
    Ok(vec![rows_path, own_path, gap_path])
}

#[derive(Serialize)]
struct PerturbRow {
    kind: &'static str,
    sigma: Option<f64>,
    agreement: f64,
    accuracy_before: f64,
    accuracy_after: f64,
}

fn cmd_perturb(cfg: &RunConfig, args: &PerturbArgs, out: &Path) -> Result<Vec<PathBuf>> {
    let (model, params) = load_checkpoint(&args.model)?;
    let images = load_or_generate(
        args.data.as_deref(),
        &cfg.synth,
        cfg.data.train_images as u64,
        cfg.data.test_images,
    )?;
    let kinds: Vec<(&'static str, Perturbation)> = match args.kind {
        PerturbKind::PerHeadOrthogonal => vec![("per_head_orthogonal", Perturbation::PerHeadOrthogonal)],
        PerturbKind::FullOrthogonal => vec![("full_orthogonal", Perturbation::FullOrthogonal)],
        PerturbKind::OrthogonalizeHeads => vec![("orthogonalize_heads", Perturbation::OrthogonalizeHeads)],
        PerturbKind::GaussianNoise => vec![("gaussian_noise", Perturbation::GaussianNoise(args.sigma))],
        PerturbKind::All => vec![
            ("per_head_orthogonal", Perturbation::PerHeadOrthogonal),
            ("full_orthogonal", Perturbation::FullOrthogonal),
            ("orthogonalize_heads", Perturbation::OrthogonalizeHeads),
            ("gaussian_noise", Perturbation::GaussianNoise(0.01)),
            ("gaussian_noise", Perturbation::GaussianNoise(0.05)),
            ("gaussian_noise", Perturbation::GaussianNoise(0.1)),
        ],
    };
    let before: Vec<Vec<usize>> = images
        .iter()
        .map(|img| Ok(predict_labels(&forward(&img.embeddings, &params, &model)?.masks)))
        .collect::<Result<_>>()?;
    let truth_acc = |preds: &[Vec<usize>]| accuracy(preds, images.iter().map(|i| i.labels.as_slice()));
    let acc_before = truth_acc(&before);
    let mut rows = Vec::with_capacity(kinds.len());
    for (name, kind) in kinds {
        let p: DecoderParams = perturb_params(&params, kind, Seed(cfg.seed))?;
        let after: Vec<Vec<usize>> = images
            .iter()
            .map(|img| Ok(predict_labels(&forward(&img.embeddings, &p, &model)?.masks)))
            .collect::<Result<_>>()?;
        let sigma = match kind {
            Perturbation::GaussianNoise(s) => Some(s),
            _ => None,
        };
        rows.push(PerturbRow {
            kind: name,
            sigma,
            agreement: accuracy(&after, before.iter().map(Vec::as_slice)),
            accuracy_before: acc_before,
            accuracy_after: truth_acc(&after),
        });
    }
    let path = out.join("perturb.csv");
    write_csv(&path, &rows)?;
    Ok(vec![path])
}

fn accuracy<'a>(preds: &[Vec<usize>], truth: impl Iterator<Item = &'a [usize]>) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for (p, t) in preds.iter().zip(truth) {
        hit += p.iter().zip(t).filter(|(a, b)| a == b).count();
        total += t.len();
    }
    hit as f64 / total.max(1) as f64
}

fn cmd_verify(cfg: &RunConfig, out: &Path) -> Result<(Vec<PathBuf>, bool)> {
    let outcome = run_all_with(cfg.seed, &cfg.verify)?;
    let json = out.join("verify.json");
    let csv_path = out.join("verify.csv");
    outcome.write(&json, &csv_path)?;
    for r in &outcome.reports {
        println!(
            "{:<28} {:<6} {} trials={} failures={}",
            r.name,
            serde_json::to_value(r.kind)?.as_str().unwrap_or(""),
            if r.pass { "PASS" } else { "FAIL" },
            r.trials,
            r.failures
        );
    }
    println!("overall: {}", if outcome.pass { "PASS" } else { "FAIL" });
    Ok((vec![json, csv_path], outcome.pass))
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Gen(_) => "gen",
        Command::Train(_) => "train",
        Command::Segment(_) => "segment",
        Command::Probe(_) => "probe",
        Command::Perturb(_) => "perturb",
        Command::Verify => "verify",
    }
}

/// Runs a parsed invocation; returns whether every hard check passed (always true outside
/// `verify`).
pub fn run(cli: &Cli) -> Result<bool> {
    let file = match &cli.config {
        Some(p) => Some(serde_json::from_str::<Value>(&fs::read_to_string(p)?)?),
        None => None,
    };
    let cfg = RunConfig::resolve(file.as_ref(), &cli.overrides, cli.seed)?;
    fs::create_dir_all(&cli.out)?;
    let out = cli.out.as_path();
    let (outputs, pass) = match &cli.command {
        Command::Gen(a) => (cmd_gen(&cfg, a, out)?, true),
        Command::Train(a) => (cmd_train(&cfg, a, out)?, true),
        Command::Segment(a) => (cmd_segment(&cfg, a, out)?, true),
        Command::Probe(a) => (cmd_probe(&cfg, a, out)?, true),
        Command::Perturb(a) => (cmd_perturb(&cfg, a, out)?, true),
        Command::Verify => cmd_verify(&cfg, out)?,
    };
    write_manifest(out, command_name(&cli.command), &cfg, &outputs)?;
    Ok(pass)
}

/// Parses `argv`, runs the command and maps the outcome to an exit status.
pub fn main_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Json(_) => EXIT_USAGE,
                _ => EXIT_FAILURE,
            }
        }
    }
}
