use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use strassennet::model_file::{ExportedModel, ModelFile};
use strassennet::train::{network::accuracy, Dataset};
use strassennet::Tensor;

use crate::io::{emit, read_text, to_json, write_atomic};
use crate::train_cmd::data_files;
use crate::Outcome;

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Trained model file.
    #[arg(long = "in")]
    input: PathBuf,
    /// Exported model with folded scales and packed ternary weights.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Exported model file.
    #[arg(long = "in")]
    model: PathBuf,
    /// JSON tensor `{"shape": [...], "data": [...]}`, with or without the batch dimension.
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    input: Option<PathBuf>,
    /// IDX dataset directory; reports accuracy as well.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Use only the first N samples of `--data`.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorFile {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LayerCount {
    pub kind: String,
    pub multiplications: u64,
    pub additions: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InferReport {
    pub output: TensorFile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    pub multiplications: u64,
    pub additions: u64,
    pub layers: Vec<LayerCount>,
}

pub fn run_export(args: ExportArgs) -> Result<Outcome> {
    let text = read_text(&args.input)?;
    let model = ModelFile::from_json(&text).with_context(|| format!("loading {}", args.input.display()))?;
    let exported = model.export()?;
    // Refuse to write something the kernel cannot load.
    ExportedModel::from_file(&exported)?;
    write_atomic(&args.out, exported.to_json()?.as_bytes())?;
    Ok(Outcome::Success)
}

pub fn run_infer(args: InferArgs) -> Result<Outcome> {
    let file = ModelFile::from_json(&read_text(&args.model)?).with_context(|| format!("loading {}", args.model.display()))?;
    let model = ExportedModel::from_file(&file)?;
    let (x, labels) = match (&args.input, &args.data) {
        (Some(p), _) => {
            let t: TensorFile = serde_json::from_str(&read_text(p)?).with_context(|| format!("parsing tensor {}", p.display()))?;
            let mut shape = t.shape;
            if shape == model.input_shape {
                shape.insert(0, 1);
            }
            (Tensor::new(shape, t.data)?, None)
        }
        (None, Some(dir)) => {
            let (images, labels) = data_files(dir)?;
            let data = Dataset::load(&images, &labels)?;
            let n = args.limit.unwrap_or(data.len()).min(data.len());
            if n == 0 {
                bail!("no samples selected");
            }
            let (x, y) = data.batch(&(0..n).collect::<Vec<_>>(), &model.input_shape)?;
            (x, Some(y))
        }
        (None, None) => bail!("pass --input or --data"),
    };
    let (y, counts) = model.infer(&x)?;
    let report = InferReport {
        accuracy: labels.map(|l| accuracy(&y, &l)),
        multiplications: counts.iter().map(|c| c.mults).sum(),
        additions: counts.iter().map(|c| c.adds).sum(),
        layers: model
            .layers
            .iter()
            .zip(&counts)
            .map(|(l, c)| LayerCount { kind: l.kind().into(), multiplications: c.mults, additions: c.adds })
            .collect(),
        output: TensorFile { shape: y.shape().to_vec(), data: y.data().to_vec() },
    };
    emit(args.out.as_deref(), &to_json(&report)?)?;
    Ok(Outcome::Success)
}
