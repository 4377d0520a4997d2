use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use catp_core::config::read_config;
use catp_core::cost::parse_grid;
use catp_core::harness::{self, compute_mae, default_image, load_model, to_json};
use catp_core::image::{read_pnm, write_bytes};
use catp_core::refill::PredictionMap;
use catp_core::{Error, Result, RunConfig};

#[derive(Parser)]
#[command(name = "catp", version, about = "Confidence-aware token pruning for ViT encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pruned pipeline on one image and write prediction, masks,
    /// heatmaps and report.json.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        /// Output directory; defaults to the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cost reports over a grid of threshold pairs, written to sweep.json.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated theta_d/theta_u pairs, e.g. "0.2/0.8,0.3/0.7".
        #[arg(long, allow_hyphen_values = true)]
        grid: String,
        /// Input image; a synthetic disk scene is used when omitted.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the analytic score Jacobian with central finite differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        draws: usize,
    },
    /// Mean absolute error between two gray images.
    Mae {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => read_config(p)?,
        None => RunConfig::default(),
    };
    if let Ok(seed) = std::env::var("CATP_SEED") {
        cfg.seed = seed.trim().parse().map_err(|_| Error::Config {
            line: 0,
            message: format!("CATP_SEED {seed:?} is not an unsigned integer"),
        })?;
    }
    Ok(cfg)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run { config, image, out } => {
            let cfg = load_config(config.as_deref())?;
            let model = load_model(&cfg)?;
            let img = read_pnm(&image)?;
            let started = Instant::now();
            let artifacts = harness::run(&cfg, &model, &img)?;
            let elapsed = started.elapsed();
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            artifacts.write_to(&dir)?;
            let cost = &artifacts.report.cost;
            println!("token counts per stage: {:?}", artifacts.report.token_counts);
            println!(
                "flops: {} pruned vs {} baseline ({:+.1}% reduction)",
                cost.total_pruned,
                cost.total_baseline,
                100.0 * cost.reduction_ratio
            );
            println!("forward pass: {:.1} ms", elapsed.as_secs_f64() * 1e3);
            println!("wrote {} files to {}", artifacts.files.len(), dir.display());
        }
        Command::Sweep { config, grid, image, out } => {
            let cfg = load_config(config.as_deref())?;
            let pairs = parse_grid(&grid).map_err(|e| Error::Config {
                line: 0,
                message: format!("--grid: {e}"),
            })?;
            let model = load_model(&cfg)?;
            let img = match image {
                Some(p) => read_pnm(&p)?,
                None => default_image(&cfg.encoder, cfg.seed),
            };
            let report = harness::sweep(&cfg, &model, &img, &pairs);
            for e in &report.entries {
                match (&e.cost, &e.diagnostic) {
                    (Some(c), _) => println!(
                        "{}/{}: tokens {:?}, flops {} ({:+.1}%)",
                        e.theta_d,
                        e.theta_u,
                        e.token_counts.as_deref().unwrap_or(&[]),
                        c.total_pruned,
                        100.0 * c.reduction_ratio
                    ),
                    (None, Some(d)) => println!("{}/{}: skipped: {d}", e.theta_d, e.theta_u),
                    (None, None) => {}
                }
            }
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
                path: dir.clone(),
                source: e,
            })?;
            write_bytes(&dir.join("sweep.json"), &to_json(&report)?)?;
        }
        Command::Gradcheck { config, draws } => {
            let cfg = load_config(config.as_deref())?;
            let report = harness::gradcheck(&cfg, draws)?;
            println!("draws: {}, tau: {}, step: {:e}", report.draws, report.tau, report.step);
            println!("max relative error: {:.3e} (tolerance {:e})", report.max_rel_error, report.tolerance);
            println!("zero-weight max |jacobian|: {:e}", report.zero_weight_max_abs);
            for s in &report.tau_scaling {
                println!("tau {:>8}: |J| = {:.6e}", s.tau, s.jacobian_norm);
            }
            if !report.passed {
                return Err(Error::Validation(format!(
                    "max relative error {:.3e} exceeds {:e}",
                    report.max_rel_error, report.tolerance
                )));
            }
            println!("PASS");
        }
        Command::Mae { pred, reference } => {
            let p = PredictionMap::from_image(&read_pnm(&pred)?)?;
            let r = read_pnm(&reference)?;
            println!("{:.6}", compute_mae(&p, &r)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
