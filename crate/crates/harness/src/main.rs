use std::fs::{self, File};
use std::io::BufWriter;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use cloudqos_core::simnet::write_jsonl;
use cloudqos_harness::{feasibility, run_scenario, whatif, ScenarioConfig};

#[derive(Parser)]
#[command(name = "cloudqos", version, about = "Cloud-assisted loss recovery simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and write metrics, summary, event log and direct trace.
    Run {
        scenario: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Compare a direct-path trace against on-path FEC at fixed overheads.
    Whatif {
        trace: PathBuf,
        #[arg(long, default_value = "1/5,2/5,5/5")]
        levels: String,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute per-service delays and within-budget fractions for a latency dataset.
    Feasibility {
        dataset: PathBuf,
        #[arg(long, default_value_t = 200.0)]
        budget_ms: f64,
        /// Egress wait applied to rows without a `delta` column.
        #[arg(long, default_value_t = 0.0)]
        delta_ms: f64,
        /// Directory for per-path delays and summary; stdout summary only if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a scenario file without running it.
    Validate { scenario: PathBuf },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = real_main(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn real_main(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Run { scenario, seed, out } => {
            let mut cfg = ScenarioConfig::load(&scenario)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let run = run_scenario(&cfg)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            run.report
                .write_csv(File::create(out.join("metrics.csv"))?)
                .context("writing metrics.csv")?;
            fs::write(out.join("summary.json"), run.report.to_json())?;
            write_jsonl(&run.log, BufWriter::new(File::create(out.join("events.jsonl"))?))
                .context("writing events.jsonl")?;
            let trace = whatif::direct_trace(&run.log, &run.flows, &run.report);
            whatif::write_trace(&trace, File::create(out.join("direct_trace.csv"))?)?;
            for f in &run.report.flows {
                println!(
                    "{:<24} {:<12} sent={} lost={} recovered_within_rtt={}",
                    f.path, f.service, f.sent, f.lost, f.recovered_within_rtt
                );
            }
            log::info!("wrote results to {}", out.display());
        }
        Cmd::Whatif { trace, levels, out } => {
            let levels = whatif::parse_levels(&levels)?;
            let rows = whatif::read_trace(
                File::open(&trace).with_context(|| format!("opening {}", trace.display()))?,
            )?;
            let rep = whatif::fec_whatif(&rows, &levels)?;
            match out {
                Some(p) => rep.write_csv(File::create(p)?)?,
                None => rep.write_csv(std::io::stdout())?,
            }
        }
        Cmd::Feasibility {
            dataset,
            budget_ms,
            delta_ms,
            out,
        } => {
            let rows = feasibility::read_dataset(
                File::open(&dataset).with_context(|| format!("opening {}", dataset.display()))?,
                delta_ms,
            )?;
            let rep = feasibility::feasibility_analysis(&rows, budget_ms);
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                rep.write_delays_csv(File::create(dir.join("delays.csv"))?)?;
                rep.write_summary_csv(File::create(dir.join("summary.csv"))?)?;
                fs::write(dir.join("cdf.json"), serde_json::to_string_pretty(&rep.cdf)?)?;
            }
            rep.write_summary_csv(std::io::stdout())?;
        }
        Cmd::Validate { scenario } => {
            let cfg = ScenarioConfig::load(&scenario)?;
            cloudqos_harness::World::build(&cfg)?;
            println!("ok: {} nodes, {} links, {} flows", cfg.nodes.len(), cfg.links.len(), cfg.flows.len());
        }
    }
    Ok(())
}
