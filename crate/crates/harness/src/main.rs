use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rectattn::{Precision, SparsityConfig};
use rectattn_harness::experiment::Variant;
use rectattn_harness::io::{read_json, save_problem};
use rectattn_harness::plot::render_plots;
use rectattn_harness::runner::{run_experiment, sweep_sparsity, ExperimentConfig, ProblemSource};
use rectattn_harness::synth::{gen_synthetic, SyntheticSpec};
use rectattn_harness::verify;

#[derive(Parser)]
#[command(name = "rectattn", version, about = "Rectified block-sparse attention experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic problem as RSAT tensors.
    Gen(GenArgs),
    /// Run pipeline variants against dense attention.
    Run(RunArgs),
    /// Run variants over a list of top-k fractions.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated top-k fractions.
        #[arg(long, value_delimiter = ',', default_values_t = [0.5, 0.2, 0.1])]
        topk_list: Vec<f64>,
    },
    /// Render SVG charts from a sweep CSV.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the kernel against the oracle and the pipeline invariants.
    Verify {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Args)]
struct SpecArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    tv: usize,
    #[arg(long, default_value_t = 16)]
    tt: usize,
    #[arg(long, default_value_t = 32)]
    d: usize,
    #[arg(long, default_value_t = 8)]
    block: usize,
    /// Video grid as t,h,w.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [4, 8, 8])]
    grid: Vec<usize>,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 2.0)]
    beta: f64,
    #[arg(long, default_value_t = 0.3)]
    sigma: f64,
    #[arg(long, default_value = "double")]
    precision: Precision,
}

impl SpecArgs {
    fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            seed: self.seed,
            t_v: self.tv,
            t_t: self.tt,
            d: self.d,
            block: self.block,
            grid: (self.grid[0], self.grid[1], self.grid[2]),
            alpha: self.alpha,
            beta: self.beta,
            sigma: self.sigma,
            precision: self.precision,
        }
    }
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    spec: SpecArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config; replaces the inline flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Problem directory written by `gen`; a synthetic problem is generated
    /// from the spec flags when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    #[command(flatten)]
    spec: SpecArgs,
    #[arg(long, default_value_t = 0.2)]
    topk: f64,
    #[arg(long, default_value_t = 0.0)]
    p: f64,
    #[arg(long, default_value_t = 1)]
    adj_radius: usize,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    force_text: bool,
    /// Reorder video tokens along the Morton curve.
    #[arg(long)]
    reorder: bool,
    /// Write the implicit block attention to `a_pool.rsat`.
    #[arg(long)]
    dump_a_pool: bool,
    #[arg(
        long,
        value_delimiter = ',',
        default_values_t = ["sparse-unrectified".to_string(), "sparse-rectified-no-gapr".to_string(), "sparse-rectified".to_string()]
    )]
    variants: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self) -> anyhow::Result<ExperimentConfig> {
        if let Some(path) = &self.config {
            let mut config: ExperimentConfig = read_json(path)?;
            if let Some(out) = &self.out {
                config.out_dir = out.clone();
            }
            return Ok(config);
        }
        let Some(out) = &self.out else {
            bail!("--out is required without --config");
        };
        let variants = self
            .variants
            .iter()
            .map(|v| v.parse::<Variant>())
            .collect::<Result<Vec<_>, _>>()?;
        let source = match &self.input {
            Some(dir) => ProblemSource::Rsat(dir.clone()),
            None => ProblemSource::Synthetic(self.spec.spec()),
        };
        Ok(ExperimentConfig {
            source,
            sparsity: SparsityConfig {
                top_k_fraction: self.topk,
                weight_threshold: self.p,
                adjacency_radius: self.adj_radius,
                force_text_blocks: self.force_text,
            },
            variants,
            out_dir: out.clone(),
            reorder: self.reorder,
            dump_a_pool: self.dump_a_pool,
        })
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let threads = match std::env::var("RECTATTN_THREADS") {
        Ok(s) => s
            .trim()
            .parse::<usize>()
            .with_context(|| format!("RECTATTN_THREADS must be a non-negative integer, got `{s}`"))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    configure_threads()?;
    match cli.command {
        Command::Gen(args) => {
            let spec = args.spec.spec();
            let problem = gen_synthetic(&spec)?;
            save_problem(&args.out, &problem, Some(&spec))?;
            println!("wrote problem to {}", args.out.display());
        }
        Command::Run(args) => {
            let config = args.config()?;
            for r in run_experiment(&config)? {
                println!(
                    "{:<26} sparsity {:.4}  l1 {:.6}  cosine {:.6}  checks {}",
                    r.variant.name(),
                    r.sparsity,
                    r.normalized_l1,
                    r.cosine_similarity,
                    if r.checks_passed { "ok" } else { "FAILED" }
                );
            }
            println!("reports in {}", config.out_dir.display());
        }
        Command::Sweep { run, topk_list } => {
            let config = run.config()?;
            let path = sweep_sparsity(&config, &topk_list)?;
            println!("wrote {}", path.display());
        }
        Command::Plot { csv, out } => {
            for path in render_plots(&csv, &out)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Verify { seed } => {
            let checks = verify::run_all(seed)?;
            for c in &checks {
                println!("{c}");
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            println!("{} passed, {failed} failed", checks.len() - failed);
            return Ok(failed == 0);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
