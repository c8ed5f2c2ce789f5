use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Subcommand, ValueEnum};
use log::info;
use strassennet::strassen::{search, verify_exact, BilinearSolution, SearchInit, SearchPlan};

use crate::io::{emit, read_text, to_json, write_atomic};
use crate::Outcome;

#[derive(Debug, Subcommand)]
pub enum StrassenCmd {
    /// Search for an exact ternary rank-r algorithm by training SPNs from random restarts.
    Search(SearchArgs),
    /// Check a solution against the matrix multiplication tensor with integer arithmetic.
    Verify(VerifyArgs),
    /// Print a bundled solution.
    Fixture {
        #[arg(value_enum)]
        name: Fixture,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Fixture {
    /// The textbook seven-product algorithm.
    Strassen,
    /// A seven-product algorithm found by training.
    Learned,
}

impl Fixture {
    fn solution(self) -> BilinearSolution {
        match self {
            Fixture::Strassen => BilinearSolution::strassen(),
            Fixture::Learned => BilinearSolution::learned_fixture(),
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Init {
    Uniform,
    Naive,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long, default_value_t = 2)]
    n: usize,
    #[arg(long, default_value_t = 7)]
    rank: usize,
    #[arg(long, default_value_t = 100)]
    restarts: usize,
    /// Training pairs per restart; overrides the plan.
    #[arg(long)]
    pairs: Option<usize>,
    /// JSON search plan (phases, batch, momentum, pairs).
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Init::Uniform)]
    init: Init,
    /// Solution file; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-restart loss report. Defaults to `<out>.report.json` when `--out` is given.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long = "in", conflicts_with = "fixture", required_unless_present = "fixture")]
    input: Option<PathBuf>,
    #[arg(long, value_enum)]
    fixture: Option<Fixture>,
}

pub fn run(cmd: StrassenCmd, seed: Option<u64>) -> Result<Outcome> {
    match cmd {
        StrassenCmd::Search(args) => run_search(args, seed.unwrap_or(0)),
        StrassenCmd::Verify(args) => run_verify(args),
        StrassenCmd::Fixture { name, out } => {
            emit(out.as_deref(), &to_json(&name.solution())?)?;
            Ok(Outcome::Success)
        }
    }
}

fn report_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "solution".into());
    out.with_file_name(format!("{stem}.report.json"))
}

fn run_search(args: SearchArgs, seed: u64) -> Result<Outcome> {
    let mut plan = match &args.plan {
        Some(p) => serde_json::from_str::<SearchPlan>(&read_text(p)?).with_context(|| format!("parsing plan {}", p.display()))?,
        None => SearchPlan::default(),
    };
    if let Some(pairs) = args.pairs {
        plan.pairs = pairs;
    }
    let init = match args.init {
        Init::Uniform => SearchInit::Uniform,
        Init::Naive => SearchInit::Naive,
    };
    info!("searching n = {}, r = {}, {} restarts, seed {seed}", args.n, args.rank, args.restarts);
    let report = search(args.n, args.rank, args.restarts, seed, &plan, init)?;
    for o in &report.restarts {
        info!("restart {:3}: loss {:.3e}, ternary loss {:.3e}, exact {}", o.restart_index, o.final_loss, o.ternary_loss, o.exact);
    }

    let report_out = args.report.clone().or_else(|| args.out.as_deref().map(report_path));
    if let Some(p) = &report_out {
        write_atomic(p, to_json(&report)?.as_bytes())?;
    }
    match &report.solution {
        Some(sol) => {
            eprintln!(
                "exact solution at restart {} ({} of {} restarts exact)",
                sol.restart_index.unwrap_or(0),
                report.successes(),
                report.restarts.len()
            );
            emit(args.out.as_deref(), &to_json(sol)?)?;
            Ok(Outcome::Success)
        }
        None => {
            eprintln!("no exact solution in {} restarts", report.restarts.len());
            Ok(Outcome::Failure)
        }
    }
}

/// Parses a solution file. Errors carry the line and column.
pub fn parse_solution(text: &str, origin: &str) -> Result<BilinearSolution> {
    serde_json::from_str(text).map_err(|e| anyhow!("{origin}: parse error: {e}"))
}

fn run_verify(args: VerifyArgs) -> Result<Outcome> {
    let sol = match (&args.input, args.fixture) {
        (Some(p), _) => parse_solution(&read_text(p)?, &p.display().to_string())?,
        (None, Some(f)) => f.solution(),
        (None, None) => bail!("pass --in or --fixture"),
    };
    if verify_exact(&sol)? {
        println!("exact");
        Ok(Outcome::Success)
    } else {
        println!("inexact");
        Ok(Outcome::Failure)
    }
}
