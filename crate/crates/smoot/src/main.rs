//! Command-line front end: `train`, `eval`, `diagnose` and
//! `export-saliency`, all driven by a JSON run configuration and fully
//! reproducible for a fixed seed.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric failure,
//! 4 I/O or file-format error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use smoot::checkpoint;
use smoot::data::{generate_planted, load_idx, Dataset, PlantedSpec};
use smoot::eval::{accuracy_drop_curve, class2_fraction, default_fractions, diagnose_dataset};
use smoot::model::MnistCnn;
use smoot::saliency::{
    input_gradient_batch, saliency_map_export, RankBy, SaliencyTarget,
};
use smoot::train::{train, SampleMaskState, TrainConfig};
use smoot::{Error, Result};

#[derive(Parser)]
#[command(name = "smoot", version, about = "Saliency-guided training laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a JSON run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint: accuracy plus the accuracy-drop curve.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory holding the IDX image/label files.
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated masked fractions, ascending from 0.
        #[arg(long)]
        fractions: Option<String>,
        /// Mask-state sidecar of the evaluated run, if any.
        #[arg(long)]
        mask_state: Option<PathBuf>,
        /// Method label for the summary (defaults from the run config
        /// next to the checkpoint, else "unknown").
        #[arg(long)]
        method: Option<String>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Evaluate only the first N samples.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value_t = 256)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Classify images as class I / class II by their masking response.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Fraction step of the masking sweep over [0, 0.8].
        #[arg(long, default_value_t = 0.1)]
        step: f64,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value_t = 256)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Export input-gradient saliency maps as 16-bit PGM images.
    ExportSaliency {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated sample ids.
        #[arg(long)]
        ids: String,
        #[arg(long)]
        method: Option<String>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

/// Synthetic-data source: the planted-feature dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct PlantedRun {
    n_train: usize,
    n_test: usize,
    #[serde(default = "default_noise")]
    noise: f64,
    #[serde(default = "default_data_seed")]
    data_seed: u64,
}

fn default_noise() -> f64 {
    0.3
}
fn default_data_seed() -> u64 {
    1
}
fn default_hidden() -> usize {
    128
}

/// File form of the training configuration: hyperparameters plus data
/// source and output directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct RunConfig {
    #[serde(flatten)]
    train: TrainConfig,
    /// Directory with IDX files; mutually exclusive with `planted`.
    #[serde(default)]
    data_dir: Option<PathBuf>,
    #[serde(default)]
    planted: Option<PlantedRun>,
    out_dir: PathBuf,
    /// Use only the first N training / test samples.
    #[serde(default)]
    train_limit: Option<usize>,
    #[serde(default)]
    test_limit: Option<usize>,
    /// Width of the first fully connected layer.
    #[serde(default = "default_hidden")]
    hidden: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(match e {
                Error::Numeric(_) => 3,
                Error::Io(_) | Error::Format(_) | Error::Consistency(_) => 4,
                _ => 2,
            })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { config } => cmd_train(&config),
        Cmd::Eval {
            checkpoint,
            data,
            fractions,
            mask_state,
            method,
            split,
            limit,
            batch,
            seed,
            out,
        } => cmd_eval(
            &checkpoint,
            &data,
            fractions.as_deref(),
            mask_state.as_deref(),
            method,
            &split,
            limit,
            batch,
            env_seed(seed),
            &out,
        ),
        Cmd::Diagnose {
            checkpoint,
            data,
            step,
            split,
            limit,
            batch,
            seed,
            out,
        } => cmd_diagnose(&checkpoint, &data, step, &split, limit, batch, env_seed(seed), &out),
        Cmd::ExportSaliency {
            checkpoint,
            data,
            ids,
            method,
            split,
            out,
        } => cmd_export_saliency(&checkpoint, &data, &ids, method, &split, &out),
    }
}

/// `SMOOT_SEED` overrides any configured or flagged seed.
fn env_seed(fallback: u64) -> u64 {
    match std::env::var("SMOOT_SEED") {
        Ok(v) => v.parse().unwrap_or(fallback),
        Err(_) => fallback,
    }
}

fn read_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if let Ok(v) = std::env::var("SMOOT_SEED") {
        cfg.train.seed = v
            .parse()
            .map_err(|_| Error::Config(format!("SMOOT_SEED: '{v}' is not a u64")))?;
    }
    cfg.train.validate()?;
    match (&cfg.data_dir, &cfg.planted) {
        (Some(_), Some(_)) => Err(Error::Config(
            "data_dir/planted: exactly one data source, got both".into(),
        )),
        (None, None) => Err(Error::Config(
            "data_dir/planted: one data source is required".into(),
        )),
        _ => Ok(cfg),
    }
}

fn find_idx(dir: &Path, base: &str) -> Result<PathBuf> {
    for candidate in [format!("{base}.gz"), base.to_string()] {
        let path = dir.join(&candidate);
        if path.exists() {
            return Ok(path);
        }
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("{}: no {base}[.gz]", dir.display()),
    )))
}

fn load_split(dir: &Path, split: &str, limit: Option<usize>) -> Result<Dataset<f32>> {
    let (images, labels) = match split {
        "train" => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        "test" => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        other => {
            return Err(Error::Config(format!(
                "split: '{other}' is neither 'train' nor 'test'"
            )))
        }
    };
    let ds = load_idx(find_idx(dir, images)?, find_idx(dir, labels)?)?;
    match limit {
        Some(n) => ds.take(n),
        None => Ok(ds),
    }
}

fn planted_pair(spec: &PlantedRun) -> Result<(Dataset<f32>, Dataset<f32>)> {
    let mut layout = PlantedSpec::default_28x28();
    layout.noise = spec.noise;
    layout.seed = spec.data_seed;
    let (all, _) = generate_planted::<f32>(&layout, spec.n_train + spec.n_test)?;
    let train_pos: Vec<usize> = (0..spec.n_train).collect();
    let test_pos: Vec<usize> = (spec.n_train..spec.n_train + spec.n_test).collect();
    let split = |positions: &[usize]| -> Result<Dataset<f32>> {
        let (_, images, labels) = all.gather(positions)?;
        Ok(Dataset {
            images,
            labels,
            ids: (0..positions.len()).collect(),
        })
    };
    Ok((split(&train_pos)?, split(&test_pos)?))
}

fn cmd_train(config_path: &Path) -> Result<()> {
    let cfg = read_config(config_path)?;
    let (train_set, test_set) = match (&cfg.data_dir, &cfg.planted) {
        (Some(dir), None) => (
            load_split(dir, "train", cfg.train_limit)?,
            load_split(dir, "test", cfg.test_limit)?,
        ),
        (None, Some(spec)) => {
            let (a, b) = planted_pair(spec)?;
            (
                match cfg.train_limit {
                    Some(n) => a.take(n)?,
                    None => a,
                },
                match cfg.test_limit {
                    Some(n) => b.take(n)?,
                    None => b,
                },
            )
        }
        _ => unreachable!("read_config enforces one source"),
    };

    let outcome = train(&train_set, Some(&test_set), &cfg.train, cfg.hidden)?;
    std::fs::create_dir_all(&cfg.out_dir)?;

    let mut metrics = std::io::BufWriter::new(std::fs::File::create(
        cfg.out_dir.join("metrics.csv"),
    )?);
    writeln!(
        metrics,
        "epoch,train_acc,test_acc,ce_loss,kl_loss,k_min,k_median,k_max"
    )?;
    for m in &outcome.metrics {
        writeln!(
            metrics,
            "{},{},{},{},{},{},{},{}",
            m.epoch, m.train_acc, m.test_acc, m.ce_loss, m.kl_loss, m.k_min, m.k_median, m.k_max
        )?;
    }
    metrics.flush()?;

    outcome
        .mask_state
        .save_csv(cfg.out_dir.join("mask_state.csv"))?;
    let named: Vec<_> = outcome.model.params().collect();
    checkpoint::save(cfg.out_dir.join("model.smot"), &named)?;

    // Echo the fully resolved configuration (defaults filled in).
    let mut resolved = cfg.clone();
    let p = train_set.features();
    resolved.train.k_init = Some(resolved.train.mask_bounds(p)?.k_init);
    let text = serde_json::to_string_pretty(&resolved)
        .map_err(|e| Error::Config(format!("resolved config: {e}")))?;
    std::fs::write(cfg.out_dir.join("config.json"), text + "\n")?;

    if let Some(last) = outcome.metrics.last() {
        println!(
            "method={} epochs={} train_acc={:.2} test_acc={:.2}",
            cfg.train.method,
            outcome.metrics.len(),
            last.train_acc,
            last.test_acc
        );
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<MnistCnn<f32>> {
    MnistCnn::from_params(checkpoint::load(path)?)
}

/// Method label: explicit flag, else the run config sitting next to the
/// checkpoint, else "unknown".
fn resolve_method(flag: Option<String>, checkpoint: &Path) -> String {
    if let Some(m) = flag {
        return m;
    }
    let sibling = checkpoint.parent().map(|d| d.join("config.json"));
    if let Some(path) = sibling {
        if let Ok(text) = std::fs::read_to_string(path) {
            if let Ok(v) = serde_json::from_str::<serde_json::Value>(&text) {
                if let Some(m) = v.get("method").and_then(|m| m.as_str()) {
                    return m.to_string();
                }
            }
        }
    }
    "unknown".to_string()
}

fn parse_fractions(arg: Option<&str>) -> Result<Vec<f64>> {
    match arg {
        None => Ok(default_fractions()),
        Some(list) => list
            .split(',')
            .map(|v| {
                v.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("fractions: '{v}' is not a number")))
            })
            .collect(),
    }
}

#[derive(Serialize)]
struct EvalSummary {
    method: String,
    accuracy: f64,
    auc: f64,
    k_min: usize,
    k_median: f64,
    k_max: usize,
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    fractions: Option<&str>,
    mask_state: Option<&Path>,
    method: Option<String>,
    split: &str,
    limit: Option<usize>,
    batch: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let model = load_model(checkpoint)?;
    let dataset = load_split(data, split, limit)?;
    let fractions = parse_fractions(fractions)?;
    let curve = accuracy_drop_curve(
        &model,
        &dataset,
        &fractions,
        SaliencyTarget::PredictedLogProb,
        RankBy::Signed,
        batch,
        seed,
    )?;
    let (k_min, k_median, k_max) = match mask_state {
        Some(path) => SampleMaskState::load_csv(path)?.summary(),
        None => (0, 0.0, 0),
    };
    let summary = EvalSummary {
        method: resolve_method(method, checkpoint),
        accuracy: curve.points[0].1,
        auc: curve.auc,
        k_min,
        k_median,
        k_max,
    };

    std::fs::create_dir_all(out)?;
    let mut csv = std::io::BufWriter::new(std::fs::File::create(out.join("drop_curve.csv"))?);
    writeln!(csv, "fraction,accuracy_percent")?;
    for (fraction, acc) in &curve.points {
        writeln!(csv, "{fraction},{acc}")?;
    }
    csv.flush()?;
    let text = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Format(format!("summary: {e}")))?;
    std::fs::write(out.join("eval_summary.json"), text + "\n")?;
    println!(
        "method={} accuracy={:.2} auc={:.2}",
        summary.method, summary.accuracy, summary.auc
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_diagnose(
    checkpoint: &Path,
    data: &Path,
    step: f64,
    split: &str,
    limit: Option<usize>,
    batch: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let model = load_model(checkpoint)?;
    let dataset = load_split(data, split, limit)?;
    let profiles = diagnose_dataset(
        &model,
        &dataset,
        step,
        SaliencyTarget::PredictedLogProb,
        RankBy::Signed,
        batch,
        seed,
    )?;
    let pct = class2_fraction(&profiles);

    std::fs::create_dir_all(out)?;
    let mut csv = std::io::BufWriter::new(std::fs::File::create(out.join("profiles.csv"))?);
    writeln!(csv, "sample_id,peak_fraction,class")?;
    for p in &profiles {
        writeln!(
            csv,
            "{},{},{}",
            p.sample_id,
            p.peak_fraction,
            if p.class_two { "II" } else { "I" }
        )?;
    }
    csv.flush()?;
    let summary = serde_json::json!({
        "step": step,
        "samples": profiles.len(),
        "class_two_percent": pct,
    });
    std::fs::write(
        out.join("diagnose_summary.json"),
        serde_json::to_string_pretty(&summary)
            .map_err(|e| Error::Format(format!("summary: {e}")))?
            + "\n",
    )?;
    println!("samples={} class_two_percent={:.2}", profiles.len(), pct);
    Ok(())
}

fn cmd_export_saliency(
    checkpoint: &Path,
    data: &Path,
    ids: &str,
    method: Option<String>,
    split: &str,
    out: &Path,
) -> Result<()> {
    let model = load_model(checkpoint)?;
    let dataset = load_split(data, split, None)?;
    let method = resolve_method(method, checkpoint);
    let ids: Vec<usize> = ids
        .split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("ids: '{v}' is not a sample id")))
        })
        .collect::<Result<_>>()?;
    for &id in &ids {
        if id >= dataset.len() {
            return Err(Error::Parameter(format!(
                "ids: {id} out of range for {} samples",
                dataset.len()
            )));
        }
    }
    std::fs::create_dir_all(out)?;
    let (_, h, w) = dataset.image_dims();
    for &id in &ids {
        let (_, images, labels) = dataset.gather(&[id])?;
        let sal = input_gradient_batch(
            |g, x| {
                let bound = model.bind(g, false);
                model.forward::<smoot::model::NoRng>(g, &bound, x, None)
            },
            &images,
            Some(&labels),
            SaliencyTarget::PredictedLogProb,
        )?;
        saliency_map_export(&sal.grads[0], (h, w), out.join(format!("{id}_{method}.pgm")))?;
    }
    println!("exported {} saliency maps to {}", ids.len(), out.display());
    Ok(())
}
