use std::path::PathBuf;
use std::time::Duration;

use anyhow::{bail, Context};
use causal_kv::bench::{self, BenchConfig};
use causal_kv::server::{self, ServeConfig};
use causal_kv_core::durability::FsyncPolicy;
use causal_kv_core::{RevisionMode, ValueSchema};
use causal_kv_sim::{metrics, report, run_scenario, Scenario, WorkloadSpec};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "causal-kv", version, about = "Causally consistent key-value store")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Run one node.
    Serve {
        #[arg(long)]
        node_id: u64,
        #[arg(long, default_value = "hash")]
        mode: RevisionMode,
        #[arg(long, default_value = "bytes")]
        schema: ValueSchema,
        #[arg(long, default_value = "127.0.0.1:2379")]
        listen: String,
        /// Direct peer as ID=ADDR; repeat for each peer.
        #[arg(long = "peer", value_parser = parse_peer, num_args = 1..)]
        peers: Vec<(u64, String)>,
        /// Change log directory; without it state is memory only.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// 0 disables periodic sync.
        #[arg(long, default_value_t = 100)]
        sync_interval_ms: u64,
        #[arg(long, value_enum, default_value = "on")]
        fsync: Switch,
    },
    /// Run a scenario on the simulated network.
    Sim {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Drive open-loop load at a live node.
    Bench {
        #[arg(long)]
        target: String,
        #[arg(long)]
        rate: f64,
        #[arg(long)]
        duration_s: f64,
        #[arg(long, default_value_t = 1000)]
        keys: usize,
        #[arg(long, default_value_t = 18)]
        key_size: usize,
        #[arg(long, default_value_t = 32)]
        value_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a metrics file.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn parse_peer(s: &str) -> Result<(u64, String), String> {
    let (id, addr) = s.split_once('=').ok_or_else(|| format!("expected ID=ADDR, got {s:?}"))?;
    let id = id.parse().map_err(|e| format!("peer id {id:?}: {e}"))?;
    if addr.is_empty() {
        return Err(format!("peer {id} has an empty address"));
    }
    Ok((id, addr.to_string()))
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Serve { node_id, mode, schema, listen, peers, data_dir, sync_interval_ms, fsync } => {
            let sync_interval = match sync_interval_ms {
                0 => None,
                ms if ms < 10 => bail!("--sync-interval-ms must be 0 or at least 10"),
                ms => Some(Duration::from_millis(ms)),
            };
            let config = ServeConfig {
                peers,
                data_dir,
                sync_interval,
                fsync: match fsync {
                    Switch::On => FsyncPolicy::PerChange,
                    Switch::Off => FsyncPolicy::Never,
                },
                ..ServeConfig::new(node_id, mode, schema)
            };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let server = server::start(&listen, config).await?;
                server.wait().await;
                Ok(())
            })
        }
        Command::Sim { scenario, seed, out } => {
            let s = Scenario::load(&scenario).with_context(|| format!("loading {}", scenario.display()))?;
            let run = run_scenario(&s, seed)?;
            metrics::write_file(&out, &run.metrics)?;
            println!("{}", serde_json::to_string_pretty(&run)?);
            print!("{}", report::summarize(&run.metrics).to_table());
            Ok(())
        }
        Command::Bench { target, rate, duration_s, keys, key_size, value_size, seed, out } => {
            if !(rate > 0.0) || !(duration_s > 0.0) || keys == 0 {
                bail!("--rate, --duration-s and --keys must be positive");
            }
            let config = BenchConfig {
                target,
                workload: WorkloadSpec { key_count: keys, key_size, value_size, ..WorkloadSpec::ycsb_a(rate, duration_s) },
                seed,
                drain: Duration::from_secs(5),
            };
            let rt = tokio::runtime::Runtime::new()?;
            let records = rt.block_on(bench::run(&config))?;
            metrics::write_file(&out, &records)?;
            print!("{}", report::summarize(&records).to_table());
            Ok(())
        }
        Command::Report { input } => {
            let records = metrics::read_file(&input).with_context(|| format!("reading {}", input.display()))?;
            print!("{}", report::summarize(&records).to_table());
            Ok(())
        }
    }
}
