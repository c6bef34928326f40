//! Command-line front end for the Proteus simulator: committee-sizing math,
//! single runs with metrics and traces, and n-sweeps emitting CSV.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use proteus_core::{default_f, failure_probability, min_committee_size};
use proteus_sim::{run_simulation, Protocol, SimError, SimulationConfig};

#[derive(Parser)]
#[command(name = "proteus", about = "Proteus BFT consensus simulator", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Committee failure probability and minimal size queries.
    Committee(CommitteeArgs),
    /// Execute one simulation from a JSON config.
    Run(RunArgs),
    /// Execute a sweep over network sizes, block sizes and protocols.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct CommitteeArgs {
    /// Total number of replicas.
    #[arg(long)]
    n: u32,
    /// Byzantine bound; defaults to floor((n-1)/3).
    #[arg(long)]
    f: Option<u32>,
    /// Committee size to evaluate.
    #[arg(long, conflicts_with = "target")]
    c: Option<u32>,
    /// Failure-probability target to size the committee for.
    #[arg(long)]
    target: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    /// JSON simulation config.
    #[arg(long)]
    config: PathBuf,
    /// Write metrics JSON here (always printed to stdout).
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Write the JSONL trace here.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    /// JSON sweep spec.
    #[arg(long)]
    spec: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Optional directory for per-cell traces.
    #[arg(long)]
    trace_dir: Option<PathBuf>,
    /// Override every cell's seed list with a single seed.
    #[arg(long)]
    seed: Option<String>,
}

/// Sweep description: every (protocol, n, block size, seed) combination runs
/// once, and paired protocol cells share seeds.
#[derive(Deserialize)]
struct SweepSpec {
    ns: Vec<u32>,
    #[serde(default = "default_block_sizes")]
    block_sizes: Vec<u32>,
    #[serde(default = "default_protocols")]
    protocols: Vec<String>,
    #[serde(default = "default_pf_target")]
    pf_target: f64,
    #[serde(default = "default_epochs")]
    epochs: u64,
    #[serde(default = "default_seeds")]
    seeds: Vec<String>,
    #[serde(default)]
    drop_rate: f64,
}

fn default_block_sizes() -> Vec<u32> {
    vec![100]
}
fn default_protocols() -> Vec<String> {
    vec!["proteus".into(), "pbft".into()]
}
fn default_pf_target() -> f64 {
    8.9e-7
}
fn default_epochs() -> u64 {
    3
}
fn default_seeds() -> Vec<String> {
    vec!["sweep-0".into()]
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Committee(args) => cmd_committee(args),
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
    }
}

fn fail(msg: String, code: u8) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn cmd_committee(args: CommitteeArgs) -> ExitCode {
    let n = args.n;
    let f = args.f.unwrap_or_else(|| default_f(n));
    let (c, pf) = match (args.c, args.target) {
        (Some(c), None) => match failure_probability(n, f, c) {
            Ok(pf) => (c, pf.to_f64()),
            Err(e) => return fail(e.to_string(), 2),
        },
        (None, Some(target)) => match min_committee_size(n, f, target) {
            Ok(c) => match failure_probability(n, f, c) {
                Ok(pf) => (c, pf.to_f64()),
                Err(e) => return fail(e.to_string(), 2),
            },
            Err(e) => return fail(e.to_string(), 2),
        },
        _ => return fail("pass exactly one of --c or --target".into(), 2),
    };
    let out = serde_json::json!({ "n": n, "f": f, "c": c, "pf": pf });
    println!("{out}");
    ExitCode::SUCCESS
}

fn load_config(path: &PathBuf) -> Result<SimulationConfig, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("cannot parse {}: {e}", path.display()))
}

fn cmd_run(args: RunArgs) -> ExitCode {
    let mut config = match load_config(&args.config) {
        Ok(c) => c,
        Err(e) => return fail(e, 2),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if args.trace.is_some() {
        config.emit_trace = true;
    }
    match run_simulation(&config) {
        Ok(outcome) => {
            let json = outcome.metrics.to_json();
            println!("{json}");
            if let Some(path) = args.metrics {
                if let Err(e) = std::fs::write(&path, &json) {
                    return fail(format!("cannot write {}: {e}", path.display()), 2);
                }
            }
            if let (Some(path), Some(trace)) = (args.trace, outcome.trace) {
                if let Err(e) = std::fs::write(&path, trace) {
                    return fail(format!("cannot write {}: {e}", path.display()), 2);
                }
            }
            ExitCode::SUCCESS
        }
        Err(SimError::Config(e)) => fail(e.to_string(), 2),
        Err(e @ SimError::SafetyViolation { .. })
        | Err(e @ SimError::DoubleVote { .. })
        | Err(e @ SimError::BadChain { .. }) => fail(e.to_string(), 3),
        Err(e) => fail(e.to_string(), 2),
    }
}

fn cmd_sweep(args: SweepArgs) -> ExitCode {
    let text = match std::fs::read_to_string(&args.spec) {
        Ok(t) => t,
        Err(e) => return fail(format!("cannot read {}: {e}", args.spec.display()), 2),
    };
    let mut spec: SweepSpec = match serde_json::from_str(&text) {
        Ok(s) => s,
        Err(e) => return fail(format!("cannot parse {}: {e}", args.spec.display()), 2),
    };
    if let Some(seed) = args.seed {
        spec.seeds = vec![seed];
    }
    if spec.ns.is_empty() || spec.seeds.is_empty() || spec.protocols.is_empty() {
        return fail("sweep spec needs ns, protocols and seeds".into(), 2);
    }

    let file = match std::fs::File::create(&args.out) {
        Ok(f) => f,
        Err(e) => return fail(format!("cannot create {}: {e}", args.out.display()), 2),
    };
    let mut file = std::io::BufWriter::new(file);
    let header = "\
# One row per (protocol, n, block_size, seed) cell; paired protocol cells share seeds.
# c: committee size from pf_target; latency in simulator ticks (not wall time);
# messages_per_epoch: normal-mode sends excluding self-delivery;
# tx_per_10k_ticks: committed transactions per 10000 ticks.
protocol,n,c,f,block_size,seed,epochs,committed_epochs,median_latency_ticks,messages_per_epoch,tx_per_10k_ticks,view_changes
";
    if let Err(e) = file.write_all(header.as_bytes()) {
        return fail(format!("write failed: {e}"), 2);
    }

    for &n in &spec.ns {
        let f = default_f(n);
        let c = match min_committee_size(n, f, spec.pf_target) {
            Ok(c) => c,
            Err(e) => return fail(e.to_string(), 2),
        };
        for &block_size in &spec.block_sizes {
            for protocol in &spec.protocols {
                let proto = match protocol.as_str() {
                    "proteus" => Protocol::Proteus,
                    "pbft" => Protocol::Pbft,
                    other => return fail(format!("unknown protocol '{other}'"), 2),
                };
                for seed in &spec.seeds {
                    let config = SimulationConfig {
                        n,
                        f: None,
                        c,
                        block_size,
                        epochs: spec.epochs,
                        seed: seed.clone(),
                        latency: Default::default(),
                        drop_rate: spec.drop_rate,
                        adversaries: vec![],
                        timeouts: Default::default(),
                        send_cost: Default::default(),
                        protocol: proto,
                        max_ticks: None,
                        emit_trace: args.trace_dir.is_some(),
                    };
                    let outcome = match run_simulation(&config) {
                        Ok(o) => o,
                        Err(SimError::Config(e)) => return fail(e.to_string(), 2),
                        Err(e) => return fail(e.to_string(), 3),
                    };
                    if let (Some(dir), Some(trace)) = (&args.trace_dir, &outcome.trace) {
                        let name = format!("{}-n{}-b{}-{}.jsonl", protocol, n, block_size, seed);
                        let _ = std::fs::create_dir_all(dir);
                        if let Err(e) = std::fs::write(dir.join(&name), trace) {
                            return fail(format!("cannot write trace {name}: {e}"), 2);
                        }
                    }
                    let m = &outcome.metrics;
                    let row = format!(
                        "{},{},{},{},{},{},{},{},{},{:.1},{:.3},{}\n",
                        protocol,
                        n,
                        c,
                        f,
                        block_size,
                        seed,
                        spec.epochs,
                        m.committed_epochs,
                        m.median_epoch_latency(),
                        m.messages_per_epoch(),
                        m.committed_tx_per_10k_ticks(),
                        m.view_changes,
                    );
                    if let Err(e) = file.write_all(row.as_bytes()) {
                        return fail(format!("write failed: {e}"), 2);
                    }
                    // Flush per completed cell so partial sweeps are usable.
                    let _ = file.flush();
                }
            }
        }
    }
    ExitCode::SUCCESS
}
