use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use chartatlas::config::RunConfig;
use chartatlas::pipeline;
use clap::{Args, Parser, Subcommand};

/// Surface reconstruction from point clouds with an atlas of overfitted ReLU
/// charts.
#[derive(Parser, Debug)]
#[command(name = "chartatlas", version)]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Reconstruct a dense oriented point cloud from an input cloud.
    Reconstruct(Common),
    /// Overfit a single chart to a small input cloud.
    FitPatch(Common),
    /// Measure distances between a reconstruction, its input and a ground truth.
    Evaluate {
        /// Reconstructed cloud (.ply or .xyz).
        #[arg(long)]
        reconstruction: PathBuf,
        /// Ground-truth mesh or cloud; without it the reconstruction is
        /// compared back to the input.
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        /// Method label in the statistics table.
        #[arg(long, default_value = "atlas")]
        method: String,
        #[command(flatten)]
        common: Common,
    },
    /// Repeat the single-chart fit for several values of lambda.
    LambdaSweep {
        /// Comma-separated lambda values (eps = 1/lambda).
        #[arg(long, value_delimiter = ',', required = true)]
        lambdas: Vec<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Estimate oriented normals for the input cloud.
    EstimateNormals {
        /// Output PLY, default <out>/normals.ply.
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

/// Run parameters. Flags override values read from `--config`.
#[derive(Args, Debug, Default)]
struct Common {
    /// key = value file, for example a config.txt echoed by an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Center spacing as a fraction of the bounding-box diagonal.
    #[arg(long)]
    r: Option<f64>,
    /// Core ball radius factor.
    #[arg(long)]
    c: Option<f64>,
    /// Fit ball radius factor.
    #[arg(long)]
    c_tilde: Option<f64>,
    /// Normal filter angle in degrees.
    #[arg(long)]
    alpha_deg: Option<f64>,
    /// Inverse entropy weight of the transport loss, eps = 1/lambda.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Adam betas as "beta1,beta2".
    #[arg(long)]
    betas: Option<String>,
    #[arg(long)]
    eps_adam: Option<f64>,
    /// Chart layer widths, e.g. "2,128,256,512,512,3".
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    phase1_iters: Option<usize>,
    #[arg(long)]
    phase2_iters: Option<usize>,
    #[arg(long)]
    w_fit: Option<f64>,
    /// Phase-two re-matching period in sweeps, 0 for never.
    #[arg(long)]
    refresh_interval: Option<usize>,
    #[arg(long)]
    sinkhorn_iters: Option<usize>,
    /// Dense samples per chart side.
    #[arg(long)]
    grid_m: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads, 0 for all cores.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    normals_k: Option<usize>,
    #[arg(long)]
    n_bins: Option<usize>,
    #[arg(long)]
    gt_samples: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.merge_file(path)?;
        }
        let flags = [
            (
                "input",
                self.input.as_ref().map(|p| p.display().to_string()),
            ),
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
            ("r", self.r.map(|v| format!("{v:?}"))),
            ("c", self.c.map(|v| format!("{v:?}"))),
            ("c-tilde", self.c_tilde.map(|v| format!("{v:?}"))),
            ("alpha-deg", self.alpha_deg.map(|v| format!("{v:?}"))),
            ("lambda", self.lambda.map(|v| format!("{v:?}"))),
            ("lr", self.lr.map(|v| format!("{v:?}"))),
            ("betas", self.betas.clone()),
            ("eps-adam", self.eps_adam.map(|v| format!("{v:?}"))),
            ("layers", self.layers.clone()),
            ("phase1-iters", self.phase1_iters.map(|v| v.to_string())),
            ("phase2-iters", self.phase2_iters.map(|v| v.to_string())),
            ("w-fit", self.w_fit.map(|v| format!("{v:?}"))),
            (
                "refresh-interval",
                self.refresh_interval.map(|v| v.to_string()),
            ),
            ("sinkhorn-iters", self.sinkhorn_iters.map(|v| v.to_string())),
            ("grid-m", self.grid_m.map(|v| v.to_string())),
            ("margin", self.margin.map(|v| format!("{v:?}"))),
            ("seed", self.seed.map(|v| v.to_string())),
            ("threads", self.threads.map(|v| v.to_string())),
            ("normals-k", self.normals_k.map(|v| v.to_string())),
            ("n-bins", self.n_bins.map(|v| v.to_string())),
            ("gt-samples", self.gt_samples.map(|v| v.to_string())),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, &v).with_context(|| format!("--{key}"))?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Reconstruct(common) => {
            let cfg = common.resolve()?;
            let outcome = pipeline::reconstruct(&cfg)?;
            println!(
                "{} charts, {} dense points, consistency {:.3e} -> {:.3e}; outputs in {}",
                outcome.atlas.patches.len(),
                outcome.dense.len(),
                outcome.consistency_before,
                outcome.consistency_after,
                cfg.out.display()
            );
        }
        Command::FitPatch(common) => {
            let cfg = common.resolve()?;
            let outcome = pipeline::fit_patch(&cfg)?;
            println!(
                "{} iterations, transport cost per point {:.3e}; outputs in {}",
                outcome.fitted.report.iterations,
                outcome.emd_per_point(),
                cfg.out.display()
            );
        }
        Command::Evaluate {
            reconstruction,
            ground_truth,
            method,
            common,
        } => {
            let cfg = common.resolve()?;
            let eval = pipeline::evaluate(&cfg, &reconstruction, ground_truth.as_deref(), &method)?;
            for row in &eval.stats {
                println!(
                    "{:<9} min {:.3e} avg {:.3e} std {:.3e} max {:.3e}",
                    row.direction.label(),
                    row.min,
                    row.avg,
                    row.std,
                    row.max
                );
            }
        }
        Command::LambdaSweep { lambdas, common } => {
            if lambdas.is_empty() {
                bail!("--lambdas needs at least one value");
            }
            let cfg = common.resolve()?;
            for row in pipeline::lambda_sweep(&cfg, &lambdas)? {
                println!(
                    "lambda {:<10} transport cost per point {:.3e}",
                    row.lambda, row.emd_per_point
                );
            }
        }
        Command::EstimateNormals { output, common } => {
            let cfg = common.resolve()?;
            let path = pipeline::estimate_input_normals(&cfg, output.as_deref())?;
            println!("normals written to {}", path.display());
        }
    }
    Ok(())
}

/// 3 for numerical failures, 2 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err.chain().any(|e| {
        matches!(
            e.downcast_ref::<chartatlas::Error>(),
            Some(chartatlas::Error::Numerical { .. } | chartatlas::Error::Diverged(_))
        )
    });
    if numerical {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
