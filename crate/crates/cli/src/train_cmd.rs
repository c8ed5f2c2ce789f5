use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use log::info;
use serde::{Deserialize, Serialize};
use strassennet::model_file::{digest, ModelFile, Provenance};
use strassennet::train::{run_training, Dataset, Network, NetworkSpec, TrainConfig};

use crate::io::{read_text, write_atomic};
use crate::Outcome;

/// A training run: the model to build and how to train it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub architecture: String,
    pub model: NetworkSpec,
    pub training: TrainConfig,
}

const BUNDLED: [(&str, &str); 3] = [
    ("desk-mlp", include_str!("../data/configs/desk-mlp.json")),
    ("desk-st-mlp", include_str!("../data/configs/desk-st-mlp.json")),
    ("desk-st-conv", include_str!("../data/configs/desk-st-conv.json")),
];

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration file, or a bundled name (desk-mlp, desk-st-mlp, desk-st-conv).
    #[arg(long)]
    config: String,
    /// Directory holding `images.idx` and `labels.idx`.
    #[arg(long)]
    data: PathBuf,
    /// Trained full-precision model to distill from; enables knowledge distillation.
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Metrics log, one JSON object per epoch. Defaults to `<out>.metrics.jsonl`.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

pub fn load_config(name: &str) -> Result<RunConfig> {
    let text = match BUNDLED.iter().find(|(n, _)| *n == name) {
        Some((_, t)) => t.to_string(),
        None => read_text(Path::new(name))?,
    };
    serde_json::from_str(&text).with_context(|| format!("parsing run configuration {name}"))
}

/// Finds the image and label files in `dir`.
pub fn data_files(dir: &Path) -> Result<(PathBuf, PathBuf)> {
    for (images, labels) in [("images.idx", "labels.idx"), ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")] {
        let (i, l) = (dir.join(images), dir.join(labels));
        if i.is_file() && l.is_file() {
            return Ok((i, l));
        }
    }
    bail!("{} holds neither images.idx/labels.idx nor train-images-idx3-ubyte/train-labels-idx1-ubyte", dir.display())
}

fn metrics_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
    out.with_file_name(format!("{stem}.metrics.jsonl"))
}

pub fn run(args: TrainArgs, seed: Option<u64>) -> Result<Outcome> {
    let mut cfg = load_config(&args.config)?;
    if let Some(s) = seed {
        cfg.training.plan.seed = s;
    }
    let teacher = match &args.teacher {
        Some(p) => {
            let text = read_text(p)?;
            let net = ModelFile::from_json(&text)?.to_network().with_context(|| format!("loading teacher {}", p.display()))?;
            cfg.training.kd.enabled = true;
            Some((net, digest(text.as_bytes())))
        }
        None => None,
    };
    let (images, labels) = data_files(&args.data)?;
    let data = Dataset::load(&images, &labels)?;
    info!("{} samples of {}x{} from {}", data.len(), data.rows, data.cols, args.data.display());

    let mut net = Network::build(&cfg.model, cfg.training.plan.seed)?;
    let log = run_training(&mut net, &data, &cfg.training, teacher.as_ref().map(|(n, _)| n), |m| {
        info!("{:?} epoch {} lr {} loss {:.5} accuracy {:.4}", m.phase, m.epoch, m.lr, m.loss, m.accuracy);
        Ok(())
    })?;

    let provenance = Provenance {
        seed: Some(cfg.training.plan.seed),
        plan_digest: Some(digest(serde_json::to_string(&cfg)?.as_bytes())),
        kd_weight: cfg.training.kd.enabled.then_some(cfg.training.kd.weight),
        teacher_digest: teacher.map(|(_, d)| d),
    };
    let model = ModelFile::from_network(&net, &cfg.architecture, provenance)?;
    let mut metrics = String::new();
    for m in &log {
        metrics.push_str(&serde_json::to_string(m)?);
        metrics.push('\n');
    }
    write_atomic(&args.metrics.unwrap_or_else(|| metrics_path(&args.out)), metrics.as_bytes())?;
    write_atomic(&args.out, model.to_json()?.as_bytes())?;
    if let Some(last) = log.last() {
        eprintln!("final accuracy {:.4} after {} epochs", last.accuracy, log.len());
    }
    Ok(Outcome::Success)
}

