use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context as _};
use clap::{Parser, Subcommand};

use neuroprobe::eval::{load_weight_stats, weight_fingerprint};
use neuroprobe::experiment::{
    read_records, run_experiment, summarize, write_summary, ExperimentConfig, Grouping,
    RunOptions,
};
use neuroprobe::lab::{build_circle_embedding, proxy_metric, synthesize, verify_recovery, SynthSpec};

#[derive(Debug, Parser)]
#[command(name = "probe", version, about = "Sparse probing experiments over neuron activations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a (feature, layer, method, k) grid from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads; results do not depend on this.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Validate the config and print the grid without training.
        #[arg(long)]
        dry_run: bool,
        /// Exit 0 even if some cells failed.
        #[arg(long)]
        allow_failures: bool,
    },
    /// Aggregate a records file into summary_<grouping>.csv.
    Summarize {
        #[arg(long)]
        records: PathBuf,
        /// method_k, layer or feature.
        #[arg(long = "by", value_parser = parse_grouping)]
        by: Grouping,
        /// Output directory (default: next to the records file).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a planted-feature dataset from a JSON spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        /// Output directory (default: next to the spec).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer distribution of input bias × input weight norm.
    Fingerprint {
        #[arg(long)]
        stats: PathBuf,
        #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
        cutoff: f64,
    },
    /// Check the circle superposition construction for n = 3..=max_n.
    VerifyConstruction {
        #[arg(long, default_value_t = 64)]
        max_n: usize,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
    },
}

fn parse_grouping(s: &str) -> Result<Grouping, String> {
    s.parse().map_err(|e: neuroprobe::ProbeError| e.to_string())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run {
            config,
            workers,
            dry_run,
            allow_failures,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let outcome = run_experiment(&cfg, RunOptions { workers, dry_run })
                .with_context(|| format!("running {}", config.display()))?;
            let plan = &outcome.plan;
            println!(
                "grid: {} features x {} layers x {} methods x {} k = {} cells",
                plan.features.len(),
                plan.layers.len(),
                plan.methods.len(),
                plan.k_grid.len(),
                plan.cells
            );
            if dry_run {
                return Ok(ExitCode::SUCCESS);
            }
            let failed = outcome.failed();
            println!("ok: {}, failed: {failed}", outcome.records.len() - failed);
            if let Some(path) = &outcome.records_path {
                println!("records: {}", path.display());
            }
            if !outcome.records.is_empty() {
                let table = summarize(&outcome.records, Grouping::MethodK)?;
                let path = write_summary(&table, Grouping::MethodK, &cfg.output_dir)?;
                println!("summary: {}", path.display());
            }
            for r in outcome.records.iter().filter(|r| !r.is_ok()) {
                eprintln!(
                    "failed: feature={} layer={} method={} k={}: {}",
                    r.feature,
                    r.layer,
                    r.method.name(),
                    r.k,
                    r.reason.as_deref().unwrap_or("unknown")
                );
            }
            if failed > 0 && !allow_failures {
                return Ok(ExitCode::FAILURE);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Summarize { records, by, out } => {
            let recs = read_records(&records)
                .with_context(|| format!("reading {}", records.display()))?;
            let table = summarize(&recs, by)?;
            let dir = out.unwrap_or_else(|| {
                records
                    .parent()
                    .map(PathBuf::from)
                    .unwrap_or_else(|| PathBuf::from("."))
            });
            std::fs::create_dir_all(&dir)?;
            let path = write_summary(&table, by, &dir)?;
            print!("{}", table.to_csv()?);
            eprintln!("wrote {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Synth { spec, out } => {
            let text = std::fs::read_to_string(&spec)
                .with_context(|| format!("reading {}", spec.display()))?;
            let parsed: SynthSpec = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", spec.display()))?;
            let dir = out.unwrap_or_else(|| {
                spec.parent()
                    .map(PathBuf::from)
                    .unwrap_or_else(|| PathBuf::from("."))
            });
            let written = synthesize(&parsed, &dir)?;
            println!("{}", serde_json::to_string_pretty(&written)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Fingerprint { stats, cutoff } => {
            let rows = load_weight_stats(&stats)
                .with_context(|| format!("reading {}", stats.display()))?;
            for layer in weight_fingerprint(&rows, cutoff)? {
                println!("{}", serde_json::to_string(&layer)?);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::VerifyConstruction { max_n, tolerance } => {
            if max_n < 3 {
                bail!("max-n must be at least 3");
            }
            let start = Instant::now();
            let mut worst = 0.0f64;
            let mut previous = f64::INFINITY;
            let mut decreasing = true;
            println!("n,alpha,bias,max_error,proxy");
            for n in 3..=max_n {
                let emb = build_circle_embedding(n)?;
                let err = verify_recovery(&emb);
                let proxy = proxy_metric(n)?;
                decreasing &= proxy < previous;
                previous = proxy;
                worst = worst.max(err);
                println!("{n},{},{},{err:e},{proxy}", emb.alpha, emb.bias);
            }
            let ok = worst <= tolerance && decreasing;
            println!("max recovery error: {worst:e} (tolerance {tolerance:e})");
            println!("proxy strictly decreasing: {decreasing}");
            println!("elapsed: {:.3} s", start.elapsed().as_secs_f64());
            println!("{}", if ok { "PASS" } else { "FAIL" });
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}
