//! Command-line experiment runner.
//!
//! Subcommands: `verify` (theorem/identity suite), `ntk` (kernel inspection
//! for seeded input pairs), `manifold` (the rank/variance entropy grid), and
//! `attack-sweep` (training grids under label flipping or backdoors).
//!
//! Exit codes: 0 success, 2 configuration error, 3 verification failure,
//! 4 training divergence.

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use ttrlab::config::ExperimentConfig;
use ttrlab::infogeo::{entropy_manifold, manifold_csv};
use ttrlab::kernels::KernelReport;
use ttrlab::linalg::{derive_seed, sample_std_normal_vec, InitSpec};
use ttrlab::network::{LoraConfig, Network, NetworkSpec};
use ttrlab::sweep::run_attack_sweep;
use ttrlab::verify::{fast_checks, training_checks, VerifyReport};
use ttrlab::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_VERIFY: u8 = 3;
const EXIT_DIVERGED: u8 = 4;

#[derive(Parser)]
#[command(name = "ttrlab", version, about = "Kernel, information-geometry, and robustness experiments for low-rank adaptation vs full fine-tuning")]
struct Cli {
    /// Config file (key = value lines; see README for the schema).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output path (CSV or JSON depending on the subcommand).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Comma-separated seed list override.
    #[arg(long, global = true)]
    seeds: Option<String>,

    /// Worker threads for grid cells (0 = rayon default).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// KEY=VALUE config overrides (repeatable).
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the kernel/spectrum verification suite; nonzero exit on failure.
    Verify {
        /// Also run the four training-based direction/trend checks.
        #[arg(long)]
        full: bool,
    },
    /// Kernel inspection: empirical vs analytic values for seeded pairs.
    Ntk,
    /// Entropy manifold over the (rank, variance-scale) grid.
    Manifold,
    /// Training grid under the configured attack.
    AttackSweep,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            ExperimentConfig::from_text(&text)?
        }
        None => ExperimentConfig::upa_default(),
    };
    if let Some(seeds) = &cli.seeds {
        cfg.apply_override("seeds", seeds)?;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    for ov in &cli.overrides {
        let (k, v) = ov
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{ov}' is not KEY=VALUE")))?;
        cfg.apply_override(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_or_print(out: &Option<PathBuf>, content: &str) -> Result<(), Error> {
    match out {
        Some(path) => {
            if let Some(parent) = path.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            std::fs::write(path, content)?;
            eprintln!("wrote {}", path.display());
            Ok(())
        }
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn run() -> Result<u8, Error> {
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;

    match cli.command {
        Command::Verify { full } => {
            let mut checks = fast_checks();
            if full {
                checks.extend(training_checks());
            }
            for c in &checks {
                println!("{}", c.line());
                for d in &c.details {
                    println!("       {d}");
                }
            }
            let report = VerifyReport::from_checks(checks);
            println!(
                "verify: {}/{} checks passed (config_hash={})",
                report.checks.iter().filter(|c| c.passed).count(),
                report.checks.len(),
                cfg.hash_hex()
            );
            if let Some(out) = &cli.out {
                write_or_print(&Some(out.clone()), &report.to_json())?;
            }
            Ok(if report.all_passed { 0 } else { EXIT_VERIFY })
        }
        Command::Ntk => {
            let seed = cfg.seeds[0];
            let spec = NetworkSpec {
                layer_dims: cfg.net.dims.clone(),
                activation: cfg.net.activation,
                use_bias: false,
                weight_init: InitSpec::new(
                    cfg.net.init_distribution,
                    cfg.net.init_scale,
                    derive_seed(seed, 4),
                ),
                parameterization: cfg.net.parameterization,
            };
            let base = Network::build_base(&spec)?;
            let lora = base.attach_lora(&LoraConfig {
                adapted_layers: cfg.lora.layers.clone(),
                rank: cfg.lora.rank,
                a_init: InitSpec::kaiming(cfg.lora.scale_k, derive_seed(seed, 8)),
                b_init: InitSpec::zero(),
                alpha: cfg.lora.alpha.unwrap_or(cfg.lora.rank as f64),
                freeze_a: cfg.lora.freeze_a,
                freeze_base: true,
                allow_full_rank: false,
            })?;
            let d = cfg.net.dims[0];
            let mut reports = Vec::new();
            for p in 0..cfg.ntk.pairs as u64 {
                let x = sample_std_normal_vec(d, derive_seed(seed, 100 + 2 * p));
                let xp = sample_std_normal_vec(d, derive_seed(seed, 101 + 2 * p));
                reports.push(serde_json::json!({
                    "pair": p,
                    "ff": KernelReport::build(&base, &x, &xp)?,
                    "lora": KernelReport::build(&lora, &x, &xp)?,
                }));
            }
            let doc = serde_json::json!({
                "config_hash": cfg.hash_hex(),
                "seed": seed,
                "pairs": reports,
            });
            write_or_print(&cli.out, &format!("{:#}\n", doc))?;
            Ok(0)
        }
        Command::Manifold => {
            let cells = entropy_manifold(
                cfg.manifold.n,
                &cfg.manifold.ranks,
                &cfg.manifold.scales,
                cfg.manifold.trials,
                cfg.seeds[0],
            )?;
            let header = format!(
                "# ttrlab manifold v{} config_hash={} seed={}\n",
                env!("CARGO_PKG_VERSION"),
                cfg.hash_hex(),
                cfg.seeds[0]
            );
            write_or_print(&cli.out, &format!("{header}{}", manifold_csv(&cells)))?;
            Ok(0)
        }
        Command::AttackSweep => {
            let out = run_attack_sweep(&cfg)?;
            let diverged = out.outcomes.iter().filter(|o| o.diverged.is_some()).count();
            match &cli.out {
                Some(path) => {
                    write_or_print(&Some(path.clone()), &out.raw_csv)?;
                    let summary_path = summary_path(path);
                    write_or_print(&Some(summary_path), &out.summary_csv)?;
                }
                None => {
                    print!("{}", out.summary_csv);
                }
            }
            if diverged > 0 {
                eprintln!("{diverged} cells diverged (rows carry the step index)");
                return Ok(EXIT_DIVERGED);
            }
            Ok(0)
        }
    }
}

fn summary_path(raw: &PathBuf) -> PathBuf {
    let stem = raw.file_stem().and_then(|s| s.to_str()).unwrap_or("sweep");
    let ext = raw.extension().and_then(|s| s.to_str()).unwrap_or("csv");
    raw.with_file_name(format!("{stem}_summary.{ext}"))
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code),
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(e @ Error::TrainingDiverged { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_DIVERGED)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
