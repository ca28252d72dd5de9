//! Command-line entry points: `run`, `ablate`, `probe`, `gen`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, Variant};
use crate::harness::io::{load_checkpoint, metrics_csv, write_atomic, write_run};
use crate::harness::probe::{flatness_probe, ProbeAccuracy, DEFAULT_PROBE_SAMPLES};
use crate::harness::train::train;
use crate::taxdata::generate;

pub const ABLATION_CSV: &str = "ablation.csv";
pub const PROBE_JSON: &str = "probe.json";
pub const PROBE_CSV: &str = "probe.csv";
pub const DATASET_CSV: &str = "dataset.csv";
pub const PROBE_STREAM: u64 = 0x7072_6f62_655f_7631;

#[derive(Debug, Parser)]
#[command(name = "trajdistill", version, about = "Trajectory distillation experiments on synthetic cross-domain benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Flat TOML experiment config; defaults are used for missing keys.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the environment and the config file).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one experiment and write its artifacts.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Train every variant on a shared set of consecutive seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Number of seeds, starting at the configured seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Flatness probe of a checkpoint on the regenerated target test split.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.01, 0.03, 0.05])]
        rho: Vec<f64>,
        #[arg(long, default_value_t = DEFAULT_PROBE_SAMPLES)]
        samples: usize,
        #[arg(long, value_enum, default_value_t = ProbeAccuracy::Overall)]
        accuracy: ProbeAccuracy,
    },
    /// Write the benchmark dataset as delimited text.
    Gen {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let out = cfg.resolve_output_dir(common.out.as_deref());
    Ok((cfg, out))
}

fn run_one(cfg: &ExperimentConfig, dir: &Path) -> Result<crate::harness::metrics::MetricsReport> {
    let outcome = train(cfg)?;
    write_run(dir, &outcome.report, &outcome.log, &outcome.params, &cfg.to_toml_string())?;
    Ok(outcome.report)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run { common, variant } => {
            let (mut cfg, out) = load(&common)?;
            if let Some(v) = variant {
                cfg.variant = v;
            }
            let r = run_one(&cfg, &out)?;
            println!(
                "{} seed {}: mAcc {:.2} mAcc* {:.2} mF1 {:.2} mF1* {:.2} -> {}",
                r.variant,
                r.seed,
                r.macc,
                r.macc_star,
                r.mf1,
                r.mf1_star,
                out.display()
            );
        }
        Command::Ablate { common, seeds } => {
            let (base, out) = load(&common)?;
            let cells: Vec<ExperimentConfig> = (0..seeds)
                .flat_map(|k| {
                    let base = &base;
                    Variant::ALL.into_iter().map(move |variant| ExperimentConfig {
                        variant,
                        seed: base.seed + k,
                        ..base.clone()
                    })
                })
                .collect();
            let reports: Vec<_> = cells
                .par_iter()
                .map(|cfg| run_one(cfg, &out.join(cfg.variant.as_str()).join(format!("seed{}", cfg.seed))))
                .collect::<Result<_>>()?;
            write_atomic(&out.join(ABLATION_CSV), metrics_csv(&reports).as_bytes())?;
            for v in Variant::ALL {
                let rows: Vec<_> = reports.iter().filter(|r| r.variant == v).collect();
                let mean = |f: fn(&&crate::harness::metrics::MetricsReport) -> f64| {
                    rows.iter().map(f).sum::<f64>() / rows.len() as f64
                };
                println!(
                    "{:<16} mAcc {:6.2}  mAcc* {:6.2}  mF1 {:6.2}  mF1* {:6.2}",
                    v.as_str(),
                    mean(|r| r.macc),
                    mean(|r| r.macc_star),
                    mean(|r| r.mf1),
                    mean(|r| r.mf1_star)
                );
            }
        }
        Command::Probe {
            common,
            checkpoint,
            rho,
            samples,
            accuracy,
        } => {
            let (cfg, out) = load(&common)?;
            let params = load_checkpoint(&checkpoint)?;
            let data = generate(&cfg.benchmark())?;
            let res = flatness_probe(&params, &data.target_test(), &rho, samples, cfg.seed ^ PROBE_STREAM, accuracy)?;
            write_atomic(&out.join(PROBE_JSON), serde_json::to_string_pretty(&res)?.as_bytes())?;
            let mut csv = String::from("rho,gap,stderr,n_samples\n");
            for (i, r) in res.rhos.iter().enumerate() {
                let g = &res.per_sample[i];
                let n = g.len() as f64;
                let var = if g.len() > 1 {
                    g.iter().map(|x| (x - res.gaps[i]).powi(2)).sum::<f64>() / (n - 1.0)
                } else {
                    0.0
                };
                csv.push_str(&format!("{r},{},{},{}\n", res.gaps[i], (var / n).sqrt(), g.len()));
            }
            write_atomic(&out.join(PROBE_CSV), csv.as_bytes())?;
            println!("base accuracy {:.4}", res.base_acc);
            for (r, g) in res.rhos.iter().zip(&res.gaps) {
                println!("rho {r}: F = {g:.4}");
            }
        }
        Command::Gen { common } => {
            let (cfg, out) = load(&common)?;
            let data = generate(&cfg.benchmark())?;
            let mut buf = Vec::new();
            data.write_to(&mut buf)?;
            let path = out.join(DATASET_CSV);
            write_atomic(&path, &buf)?;
            println!("{} samples -> {}", data.samples.len(), path.display());
        }
    }
    Ok(())
}

/// Parses `argv` (including the program name) and runs the command. Returns
/// the process exit code; failures print a one-line diagnostic to stderr.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            if e.use_stderr() {
                eprintln!("{}", e.to_string().lines().next().unwrap_or("invalid arguments"));
            } else {
                print!("{e}");
            }
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            1
        }
    }
}

fn one_line(e: &Error) -> String {
    e.to_string().replace('\n', " ")
}
