use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use strassennet::budget::{compare, reduction, ArchSpec, BudgetReport, CompressionConfig};

use crate::io::{emit, read_text, to_json};
use crate::Outcome;

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Format {
    Text,
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct BudgetArgs {
    /// Bundled architecture name (a unique prefix works) or a JSON file.
    #[arg(long)]
    arch: String,
    /// SPN width per conv layer as a multiple of its output channels.
    #[arg(long, default_value_t = 1.0)]
    r_ratio: f64,
    /// Output patch size.
    #[arg(long, default_value_t = 1)]
    p: usize,
    /// Groups of the ternary input map.
    #[arg(long, default_value_t = 1)]
    g: usize,
    /// Count strided convolutions at p = 1.
    #[arg(long)]
    strided_at_p1: bool,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    /// Add one row per layer.
    #[arg(long)]
    per_layer: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Resolves a bundled name, a unique bundled prefix such as `resnet20`, or a file.
pub fn load_arch(arch: &str) -> Result<ArchSpec> {
    let path = Path::new(arch);
    if path.is_file() {
        return ArchSpec::from_json(&read_text(path)?).with_context(|| format!("architecture {arch}"));
    }
    let names = ArchSpec::bundled_names();
    if names.contains(&arch) {
        return Ok(ArchSpec::bundled(arch)?);
    }
    let matches: Vec<_> = names.iter().filter(|n| n.starts_with(&format!("{arch}-"))).collect();
    match matches.as_slice() {
        [one] => Ok(ArchSpec::bundled(one)?),
        _ => bail!("{arch:?} is neither a file nor a bundled architecture ({})", names.join(", ")),
    }
}

pub fn run(args: BudgetArgs) -> Result<Outcome> {
    let spec = load_arch(&args.arch)?;
    let cfg = CompressionConfig { r_ratio: args.r_ratio, p: args.p, g: args.g, strided_at_p1: args.strided_at_p1 };
    let mut report = compare(&spec, &cfg)?;
    let text = match args.format {
        Format::Json => {
            if !args.per_layer {
                report.layers.clear();
            }
            to_json(&report)?
        }
        Format::Csv => {
            let csv = report.to_csv();
            if args.per_layer {
                csv
            } else {
                let mut lines = csv.lines();
                format!("{}\n{}\n", lines.next().unwrap_or_default(), csv.lines().last().unwrap_or_default())
            }
        }
        Format::Text => text_report(&report, args.per_layer),
    };
    emit(args.out.as_deref(), &text)?;
    Ok(Outcome::Success)
}

fn text_report(r: &BudgetReport, per_layer: bool) -> String {
    let c = &r.config;
    let mut s = String::new();
    let _ = writeln!(s, "{}: r_ratio {}, p {}, g {}{}", r.arch, c.r_ratio, c.p, c.g, if c.strided_at_p1 { ", strided at p 1" } else { "" });
    if per_layer {
        let _ = writeln!(s, "{:<28} {:>5} {:>3} {:>3} {:>14} {:>12} {:>10}", "layer", "r", "p", "g", "fp mults", "spn mults", "factor");
        for l in &r.layers {
            let factor = if l.compressed { format!("{:.2}", l.mult_factor()) } else { "-".into() };
            let _ = write!(s, "{:<28} {:>5} {:>3} {:>3} {:>14} {:>12} {:>10}", l.name, l.r, l.p, l.g, l.fp.multiplications, l.spn.multiplications, factor);
            if let Some(note) = &l.note {
                let _ = write!(s, "  ({note})");
            }
            s.push('\n');
        }
    }
    let _ = writeln!(s, "{:<18} {:>16} {:>16} {:>10}", "", "full precision", "spn", "reduction");
    let (fp, spn) = (&r.total_fp, &r.total_spn);
    let _ = writeln!(s, "{:<18} {:>16} {:>16} {:>9.2}%", "multiplications", fp.multiplications, spn.multiplications, r.reductions.multiplications);
    let _ = writeln!(s, "{:<18} {:>16} {:>16} {:>9.2}%", "additions", fp.additions, spn.additions, r.reductions.additions);
    let _ = writeln!(
        s,
        "{:<18} {:>16.2} {:>16.2} {:>9.2}%",
        "size (Mibit)",
        r.fp_model_mebibits,
        r.spn_model_mebibits,
        reduction(fp.model_bytes, spn.model_bytes)
    );
    s
}
