use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use inot::command::CommandError;
use inot::config::{AppConfig, ConfigError, CONFIG_ENV};
use inot::model::Landmark;
use inot::pipeline::{self, Engines, Mode, PipelineError};
use inot::service;
use inot::session::SessionStore;
use inot::sim::{spawn_fleet, FaultPlan, FleetConfig};

#[derive(Parser)]
#[command(name = "inot", version, about = "Spatially aware smart-device control")]
struct Cli {
    /// Config file; defaults to $INOT_CONFIG, then ./inot.json if present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Session directory; overrides the config's session_root.
    #[arg(long, global = true)]
    store: Option<PathBuf>,
    #[command(subcommand)]
    command: Sub,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ModeArg {
    Deterministic,
    Llm,
    Vlm,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Deterministic => Mode::Deterministic,
            ModeArg::Llm | ModeArg::Vlm => Mode::Llm,
        }
    }
}

#[derive(Subcommand)]
enum Sub {
    /// Create a session from an image and an inventory description.
    Onboard {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        inventory: String,
        /// Directory with detections.json, optional landmarks.json and recorded model replies.
        #[arg(long)]
        fixtures: Option<PathBuf>,
        /// JSON list of landmarks (`[{"name","box"}]`).
        #[arg(long)]
        landmarks: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "deterministic")]
        mode: ModeArg,
        /// Room type used to specialize detection prompts (e.g. kitchen).
        #[arg(long)]
        room: Option<String>,
    },
    /// Write the session's annotated image.
    Annotate {
        #[arg(long)]
        session: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute and print the spatial graph and report.
    Topology {
        #[arg(long)]
        session: String,
        #[arg(long, value_enum, default_value = "deterministic")]
        mode: ModeArg,
    },
    /// Bind records (uuid or name) to backend device ids: `light_01=dev-7`.
    Bind {
        #[arg(long)]
        session: String,
        #[arg(required = true)]
        pairs: Vec<String>,
    },
    /// Resolve a command and, unless --dry-run, execute it.
    Cmd {
        #[arg(long)]
        session: String,
        text: String,
        #[arg(long, value_enum, default_value = "deterministic")]
        mode: ModeArg,
        #[arg(long)]
        dry_run: bool,
    },
    /// Run the device simulator.
    Sim {
        #[arg(long)]
        fleet: PathBuf,
        #[arg(long, default_value_t = 7070)]
        port: u16,
        #[arg(long, default_value_t = 0.0)]
        fault_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the HTTP service.
    Serve,
}

enum Failure {
    Ambiguous(String),
    Other(String),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match &e {
            PipelineError::Command(CommandError::AmbiguousTarget(c)) => {
                let list: Vec<String> = c.iter().map(|c| format!("  {} ({})", c.name, c.uuid)).collect();
                Failure::Ambiguous(format!("{e}\ncandidates:\n{}", list.join("\n")))
            }
            _ => Failure::Other(format!("{}: {e}", e.kind())),
        }
    }
}

macro_rules! impl_other {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::Other(e.to_string())
            }
        }
    )*};
}
impl_other!(
    ConfigError,
    inot::session::StoreError,
    inot::sim::SimError,
    service::ServiceError,
    std::io::Error,
    serde_json::Error
);

/// Explicit --config must load; otherwise $INOT_CONFIG must load if set;
/// otherwise ./inot.json if present, else defaults.
fn load_config(explicit: Option<&Path>, required: bool) -> Result<AppConfig, Failure> {
    let env_set = std::env::var_os(CONFIG_ENV).map(|v| !v.is_empty()).unwrap_or(false);
    let path = AppConfig::resolve_path(explicit);
    if explicit.is_some() || env_set || path.is_file() || required {
        return Ok(AppConfig::load(&path)?);
    }
    Ok(AppConfig::default())
}

fn open_store(cli_store: Option<&Path>, cfg: &AppConfig) -> Result<SessionStore, Failure> {
    Ok(SessionStore::open(cli_store.unwrap_or(&cfg.session_root))?)
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json values serialize"));
}

async fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Sub::Serve => {
            let mut cfg = load_config(cli.config.as_deref(), true)?;
            if let Some(store) = cli.store {
                cfg.session_root = store;
            }
            service::serve(&cfg).await?;
        }
        Sub::Sim {
            fleet,
            port,
            fault_rate,
            seed,
        } => {
            if !(0.0..=1.0).contains(&fault_rate) {
                return Err(Failure::Other(format!("--fault-rate {fault_rate} outside [0, 1]")));
            }
            let text = std::fs::read_to_string(&fleet)?;
            let handle = spawn_fleet(&FleetConfig::from_json(&text)?, port).await?;
            if fault_rate > 0.0 {
                handle.inject_faults(FaultPlan::transient(fault_rate, seed)).await;
            }
            let (client_id, secret) = handle.credentials();
            eprintln!("simulator on {} (client_id {client_id}, secret {secret})", handle.base_url());
            tokio::select! {
                _ = tokio::signal::ctrl_c() => {}
                _ = handle.wait() => {}
            }
        }
        Sub::Onboard {
            image,
            inventory,
            fixtures,
            landmarks,
            mode,
            room,
        } => {
            let cfg = load_config(cli.config.as_deref(), false)?;
            let store = open_store(cli.store.as_deref(), &cfg)?;
            let mut engines = Engines::from_config(&cfg)?;
            if let Some(dir) = &fixtures {
                engines = engines.with_fixtures(dir)?;
            }
            let landmark_file = landmarks.or_else(|| {
                fixtures
                    .as_ref()
                    .map(|d| d.join("landmarks.json"))
                    .filter(|p| p.is_file())
            });
            let bytes = std::fs::read(&image)?;
            let mut session = store.create()?;
            if let Some(path) = landmark_file {
                session.landmarks = serde_json::from_str::<Vec<Landmark>>(&std::fs::read_to_string(path)?)?;
            }
            session.meta.room_context = room;
            pipeline::set_inventory(&store, &mut session, &inventory, mode.into(), &engines).await?;
            pipeline::ingest_image(&store, &mut session, &bytes, &engines).await?;
            print_json(&json!({
                "session_id": session.id(),
                "inventory": session.meta.inventory,
                "records": session.records,
                "landmarks": session.landmarks,
            }));
        }
        Sub::Annotate { session, out } => {
            let cfg = load_config(cli.config.as_deref(), false)?;
            let store = open_store(cli.store.as_deref(), &cfg)?;
            store.load(&session)?;
            let src = store.annotated_path(&session)?;
            if !src.is_file() {
                return Err(Failure::Other("session has no annotated image yet".into()));
            }
            std::fs::copy(&src, &out)?;
            eprintln!("wrote {}", out.display());
        }
        Sub::Topology { session, mode } => {
            let cfg = load_config(cli.config.as_deref(), false)?;
            let store = open_store(cli.store.as_deref(), &cfg)?;
            let engines = Engines::from_config(&cfg)?;
            let mut s = store.load(&session)?;
            let report = pipeline::run_topology(&store, &mut s, mode.into(), &engines).await?;
            print_json(&json!({ "graph": s.graph, "report": report }));
        }
        Sub::Bind { session, pairs } => {
            let cfg = load_config(cli.config.as_deref(), false)?;
            let store = open_store(cli.store.as_deref(), &cfg)?;
            let mut s = store.load(&session)?;
            let mut map = BTreeMap::new();
            for p in &pairs {
                let (k, v) = p
                    .split_once('=')
                    .ok_or_else(|| Failure::Other(format!("expected record=device_id, got {p:?}")))?;
                map.insert(k.trim().to_string(), v.trim().to_string());
            }
            pipeline::set_bindings(&store, &mut s, &map)?;
            print_json(&json!({ "bindings": s.bindings }));
        }
        Sub::Cmd {
            session,
            text,
            mode,
            dry_run,
        } => {
            let cfg = load_config(cli.config.as_deref(), false)?;
            let store = open_store(cli.store.as_deref(), &cfg)?;
            let engines = Engines::from_config(&cfg)?;
            let s = store.load(&session)?;
            let commands = pipeline::resolve_command(&s, &text, mode.into(), &engines).await?;
            let names: BTreeMap<&str, &str> = s.records.iter().map(|r| (r.uuid.as_str(), r.name.as_str())).collect();
            for c in &commands {
                println!("{} {} {}", c.uuid, names.get(c.uuid.as_str()).unwrap_or(&"?"), c.action);
            }
            if dry_run {
                return Ok(());
            }
            let (state, _sim) = service::build_state(&cfg).await?;
            let Some(client) = &state.backend else {
                return Err(Failure::Other("no backend configured".into()));
            };
            let results = client.execute_all(&commands, &s.bindings, &cfg.retry).await;
            print_json(&json!({ "results": results }));
            if results.iter().any(|r| r.status != inot::actuation::Status::Success) {
                return Err(Failure::Other("some commands failed".into()));
            }
        }
    }
    Ok(())
}

#[tokio::main]
async fn main() -> ExitCode {
    // Exit code 2 is reserved for ambiguity, so usage errors exit 1.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let default_level = match cli.command {
        Sub::Serve | Sub::Sim { .. } => "info",
        _ => "warn",
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default_level)),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(cli).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Ambiguous(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Other(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
