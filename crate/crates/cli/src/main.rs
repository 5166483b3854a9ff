use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;
use serde_json::{json, Value};

use lodstream_core::backend::{serve, ServerConfig, SessionConfig};
use lodstream_core::client::{run_explore, ExploreScript};
use lodstream_core::model::{DatasetMeta, NodeId};
use lodstream_core::preprocess::{
    build_octree, overhead_ratio, synth_generate, OctreeStore, RawDataset, SynthSpec,
};

#[derive(Debug, Parser)]
#[command(
    name = "lodstream",
    version,
    about = "Octree level-of-detail streaming for time-dependent volumes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build an octree store from a raw dataset directory
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        /// Samples per leaf block edge
        #[arg(long)]
        block_size: u32,
        #[arg(long)]
        output: PathBuf,
    },
    /// Write a synthetic raw dataset described by a JSON spec
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Serve a store over TCP and optionally WebSocket
    Serve {
        #[arg(long, env = "LODSTREAM_STORE")]
        store: PathBuf,
        #[arg(long, env = "LODSTREAM_LISTEN", default_value = "127.0.0.1:7878")]
        listen: SocketAddr,
        #[arg(long, env = "LODSTREAM_WS_LISTEN")]
        ws_listen: Option<SocketAddr>,
        /// Extraction threads per session [default: available cores]
        #[arg(long, env = "LODSTREAM_WORKERS")]
        workers: Option<usize>,
        #[arg(long, env = "LODSTREAM_CACHE_BYTES", default_value_t = 256 << 20)]
        cache_bytes: usize,
        /// Artificial delay per work item, for demonstrations and tests
        #[arg(long, env = "LODSTREAM_WORK_DELAY_MS", default_value_t = 0)]
        work_delay_ms: u64,
    },
    /// Run a scripted camera path against a server and write a metrics report
    Explore {
        #[arg(long)]
        script: PathBuf,
        #[arg(long, env = "LODSTREAM_SERVER", default_value = "127.0.0.1:7878")]
        server: String,
        /// Report path; falls back to the script's `report`, then stdout
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print store metadata, per-level node counts and optional node statistics
    Inspect {
        #[arg(long)]
        store: PathBuf,
        /// Node as `L,ix,iy,iz`
        #[arg(long)]
        node: Option<String>,
        #[arg(long, default_value_t = 0)]
        timestep: u32,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess {
            input,
            block_size,
            output,
        } => preprocess(&input, block_size, &output),
        Command::Synth { spec, output } => {
            let spec = SynthSpec::load(&spec)?;
            let meta = synth_generate(&spec, &output)?;
            print_json(&json!({
                "output": output,
                "dims": meta.dims,
                "fields": meta.fields,
                "timesteps": meta.timesteps,
            }))
        }
        Command::Serve {
            store,
            listen,
            ws_listen,
            workers,
            cache_bytes,
            work_delay_ms,
        } => {
            let store = Arc::new(OctreeStore::open(&store)?);
            let mut session = SessionConfig {
                work_delay: Duration::from_millis(work_delay_ms),
                ..SessionConfig::default()
            };
            if let Some(w) = workers {
                if w == 0 {
                    bail!("--workers must be at least 1");
                }
                session.workers = w;
            }
            let server = serve(
                store.clone(),
                ServerConfig {
                    listen,
                    ws_listen,
                    cache_bytes,
                    session,
                },
            )?;
            info!(
                "serving `{}` ({} nodes per timestep) on tcp {}{}, {} workers per session",
                store.id(),
                store.meta().total_nodes(),
                server.local_addr(),
                server
                    .ws_addr()
                    .map(|a| format!(" and ws {a}"))
                    .unwrap_or_default(),
                session.workers,
            );
            server.wait();
            Ok(())
        }
        Command::Explore {
            script,
            server,
            report,
        } => {
            let script = ExploreScript::load(&script)?;
            let result = run_explore(&script, server.as_str())
                .with_context(|| format!("exploring against {server}"))?;
            if result.partial {
                log::warn!("report is partial: the cut did not settle or the connection failed");
            }
            match report.or_else(|| script.report.clone()) {
                Some(path) => {
                    result.write(&path)?;
                    info!("report written to {}", path.display());
                    Ok(())
                }
                None => print_json(&serde_json::to_value(&result)?),
            }
        }
        Command::Inspect {
            store,
            node,
            timestep,
        } => inspect(&store, node.as_deref(), timestep),
    }
}

fn print_json(v: &Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn level_counts(meta: &DatasetMeta) -> Vec<Value> {
    (0..meta.levels)
        .map(|l| json!({ "level": l, "nodes_per_axis": meta.nodes_per_axis(l), "nodes": meta.nodes_at_level(l) }))
        .collect()
}

fn preprocess(input: &Path, block_size: u32, output: &Path) -> Result<()> {
    let raw = RawDataset::open(input)?;
    // Validates b and the grid before anything is written.
    let ratio = overhead_ratio(raw.meta().dims, block_size)?;
    let store = build_octree(&raw, block_size, output)?;
    let meta = store.meta();
    print_json(&json!({
        "store": output,
        "id": store.id(),
        "blocks": meta.blocks(),
        "levels": level_counts(meta),
        "nodes_per_timestep": meta.total_nodes(),
        "timesteps": meta.timesteps,
        "overhead_ratio": ratio,
    }))
}

fn parse_node(s: &str) -> Result<NodeId> {
    let parts: Vec<u32> = s
        .split(',')
        .map(|p| p.trim().parse::<u32>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("node `{s}` is not `L,ix,iy,iz`"))?;
    let [l, x, y, z] = parts[..] else {
        bail!("node `{s}` is not `L,ix,iy,iz`");
    };
    let narrow = |v: u32| u16::try_from(v).with_context(|| format!("node index {v} out of range"));
    let level = u8::try_from(l).with_context(|| format!("level {l} out of range"))?;
    Ok(NodeId::new(level, narrow(x)?, narrow(y)?, narrow(z)?))
}

fn inspect(path: &Path, node: Option<&str>, timestep: u32) -> Result<()> {
    let store = OctreeStore::open(path)?;
    let meta = store.meta();
    let mut out = json!({
        "id": store.id(),
        "meta": meta,
        "levels": level_counts(meta),
        "nodes_per_timestep": meta.total_nodes(),
    });
    if let Some(node) = node {
        let node = parse_node(node)?;
        meta.check_node(node)?;
        if timestep >= meta.timesteps {
            bail!(
                "timestep {timestep} out of range (dataset has {})",
                meta.timesteps
            );
        }
        let block = store.read_block(timestep, node)?;
        let fields: Vec<Value> = meta
            .fields
            .iter()
            .zip(&block.samples)
            .map(|(name, values)| {
                let (min, max, sum) = values.iter().fold(
                    (f64::INFINITY, f64::NEG_INFINITY, 0.0),
                    |(lo, hi, s), &v| {
                        let v = v as f64;
                        (lo.min(v), hi.max(v), s + v)
                    },
                );
                json!({ "field": name, "min": min, "max": max, "mean": sum / values.len() as f64 })
            })
            .collect();
        out["node"] = json!({ "node": node.to_string(), "timestep": timestep, "fields": fields });
    }
    print_json(&out)
}
