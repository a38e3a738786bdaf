use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use mitigraph_core::ingest::{ingest_batch, IngestOptions};
use mitigraph_core::kb_compiler::{
    apply_patches, enhance_from_history, HistoryPatch, HistoryRecord,
};
use mitigraph_core::{
    parse_structured_tsg, validate_quality, HashEmbedder, KbStore, SessionState, StructuredTsg,
};
use serde_json::json;

use crate::config::ServiceConfig;
use crate::runtime::{build_provider, open_kb, Runtime};
use crate::script::ChatScript;
use crate::view::ApiSessionView;

#[derive(Debug, Parser)]
#[command(
    name = "mitigraph",
    version,
    about = "Troubleshooting-guide knowledge graph and mitigation copilot"
)]
pub struct Cli {
    /// Service configuration file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override the configured data directory.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    /// Machine-readable output; errors go to stderr as JSON.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Add structured TSG files (or directories of `*.tsg.json`) to the knowledge base.
    Ingest {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        /// Replace TSGs that are already ingested.
        #[arg(long)]
        replace: bool,
    },
    /// Validate and compile TSGs without touching the knowledge base.
    Compile {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        /// Print quality findings and linker resolution in full.
        #[arg(long)]
        report: bool,
    },
    /// Run the HTTP service.
    Serve {
        /// Override the configured listen address.
        #[arg(long)]
        listen: Option<std::net::SocketAddr>,
    },
    /// Run a headless session from a script of OCE turns; fails unless it ends Resolved.
    Chat {
        #[arg(long)]
        script: PathBuf,
        /// Also write the session's event log here as JSON lines.
        #[arg(long)]
        events: Option<PathBuf>,
    },
    /// Look at the knowledge graph.
    Inspect {
        #[command(subcommand)]
        target: InspectTarget,
    },
    /// Mine incident discussions for staged knowledge-base patches.
    Enhance {
        /// JSON array of `{discussion_id, text}`.
        #[arg(long)]
        history: PathBuf,
        /// Where to write the staged patches; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Apply staged patches to the knowledge base, all or nothing.
    ApplyPatches { patches: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum InspectTarget {
    Graph {
        #[arg(long, value_enum, default_value_t = GraphFormat::Dot)]
        format: GraphFormat,
    },
    Node {
        node_id: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GraphFormat {
    Dot,
    Json,
}

/// A failed command: exit status plus a short machine-readable code.
#[derive(Debug)]
pub struct CliError {
    pub exit_code: i32,
    pub code: &'static str,
    pub message: String,
}

impl CliError {
    fn failed(message: impl ToString) -> Self {
        Self {
            exit_code: 1,
            code: "failed",
            message: message.to_string(),
        }
    }

    fn not_found(message: impl ToString) -> Self {
        Self {
            exit_code: 2,
            code: "NotFound",
            message: message.to_string(),
        }
    }

    pub fn report(&self, json: bool) {
        if json {
            eprintln!(
                "{}",
                json!({"error": {"code": self.code, "message": self.message}})
            );
        } else {
            eprintln!("error: {}", self.message);
        }
    }
}

fn config_for(cli: &Cli) -> Result<ServiceConfig, CliError> {
    let mut config = match &cli.config {
        Some(path) => ServiceConfig::load(path).map_err(CliError::failed)?,
        None => ServiceConfig::default(),
    };
    if let Some(dir) = &cli.data_dir {
        config.data_dir = dir.clone();
    }
    Ok(config)
}

fn print_json(value: &impl serde::Serialize) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("output serializes")
    );
}

/// Files named on the command line, with directories expanded to their
/// `*.tsg.json` entries in name order.
fn tsg_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut files = Vec::new();
    for path in paths {
        if path.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(path)
                .map_err(|e| CliError::failed(format!("{}: {e}", path.display())))?
                .filter_map(|entry| entry.ok().map(|e| e.path()))
                .filter(|p| p.to_string_lossy().ends_with(".tsg.json"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(path.clone());
        }
    }
    Ok(files)
}

fn read_tsgs(paths: &[PathBuf]) -> Result<Vec<StructuredTsg>, CliError> {
    tsg_files(paths)?
        .iter()
        .map(|path| {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::failed(format!("{}: {e}", path.display())))?;
            parse_structured_tsg(&text)
                .map_err(|e| CliError::failed(format!("{}: {e}", path.display())))
        })
        .collect()
}

pub async fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Ingest { paths, replace } => ingest(&cli, paths, *replace).await,
        Command::Compile { paths, report } => compile(&cli, paths, *report).await,
        Command::Serve { listen } => serve(&cli, *listen).await,
        Command::Chat { script, events } => chat(&cli, script, events.as_deref()).await,
        Command::Inspect { target } => inspect(&cli, target).await,
        Command::Enhance { history, out } => enhance(&cli, history, out.as_deref()).await,
        Command::ApplyPatches { patches } => apply(&cli, patches).await,
    }
}

async fn ingest(cli: &Cli, paths: &[PathBuf], replace: bool) -> Result<(), CliError> {
    let config = config_for(cli)?;
    std::fs::create_dir_all(&config.data_dir).map_err(CliError::failed)?;
    let store = open_kb(&config).await.map_err(CliError::failed)?;
    let tsgs = read_tsgs(paths)?;
    let options = IngestOptions {
        replace,
        resolution_threshold: config.thresholds.resolution,
        persist_to: Some(config.kb_path()),
    };
    let report = ingest_batch(&store, &tsgs, &options)
        .await
        .map_err(CliError::failed)?;
    if cli.json {
        print_json(&report);
    } else {
        for doc in &report.documents {
            println!(
                "tsg_id={} nodes_added={} nodes_removed={} warnings={}",
                doc.tsg_id,
                doc.nodes_added,
                doc.nodes_removed,
                doc.quality.violations.len()
            );
        }
        println!(
            "linkers resolved={} unresolved={}",
            report.resolution.resolved.len(),
            report.resolution.unresolved.len()
        );
    }
    Ok(())
}

async fn compile(cli: &Cli, paths: &[PathBuf], full: bool) -> Result<(), CliError> {
    let config = config_for(cli)?;
    let tsgs = read_tsgs(paths)?;
    let qualities: Vec<_> = tsgs.iter().map(validate_quality).collect();
    let failed: Vec<&str> = qualities
        .iter()
        .filter(|q| !q.passed)
        .map(|q| q.tsg_id.as_str())
        .collect();
    let store = KbStore::new(Arc::new(HashEmbedder));
    let batch = if failed.is_empty() {
        let options = IngestOptions {
            resolution_threshold: config.thresholds.resolution,
            ..Default::default()
        };
        Some(
            ingest_batch(&store, &tsgs, &options)
                .await
                .map_err(CliError::failed)?,
        )
    } else {
        None
    };
    let kb = store.snapshot();
    if full || cli.json {
        print_json(&json!({
            "quality": qualities,
            "nodes": kb.nodes().collect::<Vec<_>>(),
            "resolution": batch.as_ref().map(|b| &b.resolution),
        }));
    } else {
        for q in &qualities {
            println!(
                "{} passed={} violations={}",
                q.tsg_id,
                q.passed,
                q.violations.len()
            );
        }
        if let Some(batch) = &batch {
            println!(
                "nodes={} resolved={} unresolved={}",
                kb.len(),
                batch.resolution.resolved.len(),
                batch.resolution.unresolved.len()
            );
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::failed(format!(
            "quality checks failed for {}",
            failed.join(", ")
        )))
    }
}

async fn serve(cli: &Cli, listen: Option<std::net::SocketAddr>) -> Result<(), CliError> {
    let mut config = config_for(cli)?;
    if let Some(addr) = listen {
        config.listen = addr;
    }
    let runtime = Arc::new(Runtime::open(config).await.map_err(CliError::failed)?);
    let listener = tokio::net::TcpListener::bind(runtime.config.listen)
        .await
        .map_err(|e| {
            CliError::failed(format!("cannot listen on {}: {e}", runtime.config.listen))
        })?;
    let addr = listener.local_addr().map_err(CliError::failed)?;
    println!("listening on http://{addr}");
    tracing::info!(%addr, data_dir = %runtime.config.data_dir.display(), "serving");
    axum::serve(listener, crate::api::router(runtime))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(CliError::failed)
}

async fn chat(cli: &Cli, path: &Path, events_out: Option<&Path>) -> Result<(), CliError> {
    let script = ChatScript::load(path).map_err(CliError::failed)?;
    let outcome = script.run().await.map_err(CliError::failed)?;
    if let Some(out) = events_out {
        std::fs::write(out, mitigraph_core::orchestrator::to_jsonl(&outcome.events))
            .map_err(CliError::failed)?;
    }
    let view = ApiSessionView::from_events(&outcome.events).map_err(CliError::failed)?;
    if cli.json {
        print_json(&view);
    } else {
        for entry in &view.transcript {
            let role = serde_json::to_value(entry.role).expect("role serializes");
            println!("[{}] {}", role.as_str().unwrap_or("?"), entry.text);
        }
        println!("final state: {}", view.state);
    }
    match view.state {
        SessionState::Resolved => Ok(()),
        state => Err(CliError::failed(format!(
            "session ended {state}, not Resolved"
        ))),
    }
}

async fn inspect(cli: &Cli, target: &InspectTarget) -> Result<(), CliError> {
    let config = config_for(cli)?;
    let kb = open_kb(&config).await.map_err(CliError::failed)?.snapshot();
    match target {
        InspectTarget::Graph { format } => {
            let graph = kb.graph();
            if *format == GraphFormat::Json || cli.json {
                print_json(&graph);
            } else {
                print!("{}", graph.to_dot());
            }
        }
        InspectTarget::Node { node_id } => {
            let node = kb
                .node(node_id)
                .ok_or_else(|| CliError::not_found(format!("unknown node {node_id}")))?;
            print_json(node);
        }
    }
    Ok(())
}

async fn enhance(cli: &Cli, history: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let config = config_for(cli)?;
    let store = open_kb(&config).await.map_err(CliError::failed)?;
    let text = std::fs::read_to_string(history)
        .map_err(|e| CliError::failed(format!("{}: {e}", history.display())))?;
    let records: Vec<HistoryRecord> = serde_json::from_str(&text).map_err(CliError::failed)?;
    let provider = build_provider(&config.provider).map_err(CliError::failed)?;
    let patches = enhance_from_history(
        &records,
        &store.snapshot(),
        provider.as_ref(),
        store.embedder().as_ref(),
        config.thresholds.duplicate,
    )
    .await
    .map_err(CliError::failed)?;
    let body = serde_json::to_string_pretty(&patches).expect("patches serialize");
    match out {
        Some(path) => std::fs::write(path, body).map_err(CliError::failed)?,
        None => println!("{body}"),
    }
    Ok(())
}

async fn apply(cli: &Cli, path: &Path) -> Result<(), CliError> {
    let config = config_for(cli)?;
    let store = open_kb(&config).await.map_err(CliError::failed)?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::failed(format!("{}: {e}", path.display())))?;
    let patches: Vec<HistoryPatch> = serde_json::from_str(&text).map_err(CliError::failed)?;
    let threshold = config.thresholds.resolution;
    let kb_path = config.kb_path();
    let added = store
        .update(|kb, embedder| async move {
            let next = apply_patches(&patches, &kb, embedder.as_ref(), threshold).await?;
            next.save(&kb_path)?;
            let added = next.len() - kb.len();
            Ok::<_, mitigraph_core::kb_compiler::PatchError>((next, added))
        })
        .await
        .map_err(CliError::failed)?;
    println!("patches applied; nodes_added={added}");
    Ok(())
}
