//! `sentinel`: pipeline subcommands from capture files to open-set detection
//! reports. Stages hand results to each other through files; every artifact
//! is stamped with the producing config hash and seed so runs stay auditable
//! and reproducible.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use sentinel_core::config::RunConfig;
use sentinel_core::pipeline;
use sentinel_core::synth::{gaussian_cluster_spec, SynthSpec};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "sentinel",
    about = "Open-set network intrusion detection toolkit",
    version
)]
struct Cli {
    /// Flat key=value config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override (also honored as the SENTINEL_SEED env var).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decode a classic pcap into flow and packet feature CSVs.
    Extract {
        #[arg(long)]
        pcap: PathBuf,
        /// Output directory (defaults to the capture's directory).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Join flow and packet CSVs into the unified 60-feature table.
    Fuse {
        #[arg(long)]
        flows: PathBuf,
        #[arg(long)]
        packets: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the preprocessing pipeline on labeled training data.
    Preprocess {
        /// Labeled fused CSV to fit on.
        #[arg(long = "fit")]
        fit: PathBuf,
        /// Importance threshold: none, 0.01 or 0.02 (overrides config).
        #[arg(long)]
        threshold: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one similarity model per known attack class.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        pipeline: PathBuf,
        /// Directory receiving one model file per attack class.
        #[arg(long)]
        out: PathBuf,
    },
    /// Select the diversity-maximizing support set from training data.
    Support {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        pipeline: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibrate the unknown-rejection threshold by pseudo-unknown simulation.
    Calibrate {
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        pipeline: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify queries as benign, a known attack class, or unknown.
    Detect {
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        pipeline: PathBuf,
        #[arg(long)]
        support: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against truth labels.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a seeded synthetic dataset from a spec file.
    Synth {
        #[arg(long, conflicts_with = "write_example")]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write an example six-class spec (benign + 4 known + 1 withheld).
        #[arg(long)]
        write_example: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = RunConfig::load(cli.config.as_deref())
        .with_context(|| "loading configuration".to_string())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli)?;
    match cli.command {
        Command::Extract { pcap, out_dir } => {
            let out_dir = out_dir
                .or_else(|| pcap.parent().map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("."));
            let report = pipeline::run_extract(&pcap, &out_dir, &config)?;
            for (index, reason) in &report.skipped {
                eprintln!("warning: packet {index} skipped: {reason}");
            }
            println!(
                "decoded {} packets ({} skipped), {} flows",
                report.packets_decoded, report.packets_skipped, report.flows
            );
            println!("wrote {}", report.flows_csv.display());
            println!("wrote {}", report.packets_csv.display());
        }
        Command::Fuse { flows, packets, out } => {
            let quality = pipeline::run_fuse(&flows, &packets, &out, &config)?;
            println!(
                "fused {} flows with {} packets ({} matched, {} unmatched)",
                quality.flows, quality.packets, quality.matched_packets, quality.unmatched_packets
            );
            if !quality.zero_packet_flows.is_empty() {
                eprintln!(
                    "warning: {} flows matched no packets: {:?}",
                    quality.zero_packet_flows.len(),
                    quality.zero_packet_flows
                );
            }
            println!("wrote {}", out.display());
        }
        Command::Preprocess { fit, threshold, out } => {
            let mut config = config;
            if let Some(t) = threshold {
                config.importance_threshold = match t.as_str() {
                    "none" => None,
                    other => Some(other.parse().context("bad --threshold")?),
                };
                config.validate()?;
            }
            let artifact = pipeline::run_preprocess_fit(&fit, &out, &config)?;
            let kept = artifact.pipeline.selected_mask.iter().filter(|&&k| k).count();
            println!(
                "fitted pipeline: {} expanded columns, {kept} selected",
                artifact.pipeline.expanded_names.len()
            );
            println!("wrote {}", out.display());
        }
        Command::Train { train, pipeline: pipe, out } => {
            let written = pipeline::run_train(&train, &pipe, &out, &config)?;
            println!("trained {} task models:", written.len());
            for path in written {
                println!("  {}", path.display());
            }
        }
        Command::Support { train, pipeline: pipe, out } => {
            pipeline::run_support(&train, &pipe, &out, &config)?;
            println!("wrote {}", out.display());
        }
        Command::Calibrate { models, pipeline: pipe, train, out } => {
            let calibration = pipeline::run_calibrate(&models, &pipe, &train, &out, &config)?;
            for c in &calibration.per_class {
                println!(
                    "class {:<20} tau {:.2}  unknown-F1 {:.3}",
                    c.class, c.tau, c.best_unknown_f1
                );
            }
            println!("tau* = {}", calibration.tau_star);
            println!("wrote {}", out.display());
        }
        Command::Detect { models, pipeline: pipe, support, calib, queries, out } => {
            let predictions =
                pipeline::run_detect(&models, &pipe, &support, &calib, &queries, &out, &config)?;
            let unknown = predictions
                .iter()
                .filter(|p| p.label == sentinel_core::inference::UNKNOWN_LABEL)
                .count();
            println!(
                "classified {} queries ({unknown} unknown)",
                predictions.len()
            );
            println!("wrote {}", out.display());
        }
        Command::Evaluate { pred, truth, out } => {
            let report = pipeline::run_evaluate(&pred, &truth, &out)?;
            print!("{}", report.render_text());
            println!("wrote {}", out.display());
        }
        Command::Synth { spec, out, write_example } => {
            if let Some(path) = write_example {
                let example = gaussian_cluster_spec(
                    &["Benign", "Flood", "Scan", "Brute", "Exfil", "Mirai"],
                    &["Mirai"],
                    100,
                    50,
                    10.0,
                    config.seed,
                );
                sentinel_core::artifacts::write_atomic(
                    &path,
                    serde_json::to_string_pretty(&example)?.as_bytes(),
                )?;
                println!("wrote {}", path.display());
                return Ok(());
            }
            let (Some(spec), Some(out)) = (spec, out) else {
                bail!("synth needs --spec and --out (or --write-example)");
            };
            let text = std::fs::read_to_string(&spec)
                .with_context(|| format!("reading {}", spec.display()))?;
            let spec: SynthSpec = serde_json::from_str(&text)
                .with_context(|| "parsing synth spec".to_string())?;
            let outputs = pipeline::run_synth(&spec, &out, &config)?;
            println!("wrote {}", outputs.train_csv.display());
            println!("wrote {}", outputs.test_csv.display());
            println!("wrote {}", outputs.truth_csv.display());
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
