use anyhow::{bail, Context, Result};
use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand, ValueEnum};
use ecometer::{http, proxy, Service, ServiceConfig, SystemClock};
use ecometer_core::event_log::{self, ExportFormat, TimeWindow};
use ecometer_core::history::{self, AnalysisWindow};
use ecometer_core::{replay, timefmt, Profile};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "ecometer", version, about = "Local eco-feedback gateway for LLM chat usage")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML config file; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Resource profile, overriding the config file.
    #[arg(long)]
    profile: Option<Profile>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP API (and the proxy, when enabled).
    Serve {
        #[command(flatten)]
        config: ConfigArgs,
        /// Listen address, overriding config and ECOMETER_LISTEN.
        #[arg(long)]
        listen: Option<String>,
        /// Storage directory, overriding config and ECOMETER_STORAGE_DIR.
        #[arg(long)]
        storage_dir: Option<PathBuf>,
    },
    /// Replay a JSONL event trace and print the trajectory as JSON.
    Replay {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Count user messages in a conversation export around a trial window.
    Analyze {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        export: PathBuf,
        /// Day the export was downloaded (YYYY-MM-DD).
        #[arg(long)]
        download_date: NaiveDate,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        format: ReportFormat,
    },
    /// Export the event log, or its popup dwell report.
    Export {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        storage_dir: Option<PathBuf>,
        /// Read this log file instead of the one in the storage dir.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Inclusive lower bound (RFC 3339).
        #[arg(long)]
        from: Option<String>,
        /// Exclusive upper bound (RFC 3339).
        #[arg(long)]
        to: Option<String>,
        #[arg(long, value_enum, default_value_t = LogFormat::Csv)]
        format: LogFormat,
        /// Print the popup dwell report as JSON instead of log rows.
        #[arg(long)]
        dwell: bool,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Validate a config file and print the effective settings.
    ConfigCheck {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Text,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum LogFormat {
    Csv,
    Jsonl,
}

fn load_config(args: &ConfigArgs) -> Result<ServiceConfig> {
    let mut cfg = match &args.config {
        Some(path) => ServiceConfig::load(path)?,
        None => ServiceConfig::default(),
    };
    cfg.apply_env();
    if let Some(profile) = args.profile {
        cfg.profile = profile;
    }
    Ok(cfg)
}

fn write_output(output: Option<&Path>, text: &str) -> Result<()> {
    match output {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
            Ok(())
        }
    }
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();

    match Cli::parse().command {
        Command::Serve { config, listen, storage_dir } => {
            let mut cfg = load_config(&config)?;
            if let Some(listen) = listen {
                cfg.server.listen = listen;
            }
            if let Some(dir) = storage_dir {
                cfg.storage.dir = dir;
            }
            cfg.validate()?;
            tokio::runtime::Runtime::new()?.block_on(serve(cfg))
        }
        Command::Replay { config, trace, output } => {
            let cfg = load_config(&config)?;
            cfg.validate()?;
            let text = std::fs::read_to_string(&trace).with_context(|| format!("reading {}", trace.display()))?;
            let events = replay::parse_trace(&text)?;
            let report = replay::replay(&events, &cfg.engine())?;
            let mut json = serde_json::to_string_pretty(&report)?;
            json.push('\n');
            write_output(output.as_deref(), &json)
        }
        Command::Analyze { config, export, download_date, format } => {
            let cfg = load_config(&config)?;
            cfg.validate()?;
            let text = std::fs::read_to_string(&export).with_context(|| format!("reading {}", export.display()))?;
            let parsed = history::parse_export(&text)?;
            let window = AnalysisWindow::from_date(download_date);
            let report = history::footprint_report(&history::count_windows(&parsed, &window), &cfg.resource_model());
            let text = match format {
                ReportFormat::Text => report.to_text(),
                ReportFormat::Json => serde_json::to_string_pretty(&report)? + "\n",
            };
            write_output(None, &text)
        }
        Command::Export { config, storage_dir, log, from, to, format, dwell, output } => {
            let mut cfg = load_config(&config)?;
            if let Some(dir) = storage_dir {
                cfg.storage.dir = dir;
            }
            let path = log.unwrap_or_else(|| cfg.storage.log_path());
            let records = event_log::read_all(&path).with_context(|| format!("reading {}", path.display()))?;
            let parse = |s: Option<String>| -> Result<_> {
                s.map(|s| timefmt::parse(&s).with_context(|| format!("bad timestamp `{s}`"))).transpose()
            };
            let window = TimeWindow { from: parse(from)?, to: parse(to)? };
            let text = if dwell {
                let in_window: Vec<_> = records.into_iter().filter(|r| window.contains(r.timestamp)).collect();
                serde_json::to_string_pretty(&event_log::popup_dwell_report(&in_window))? + "\n"
            } else {
                let format = match format {
                    LogFormat::Csv => ExportFormat::Csv,
                    LogFormat::Jsonl => ExportFormat::Jsonl,
                };
                event_log::export(&records, window, format)
            };
            write_output(output.as_deref(), &text)
        }
        Command::ConfigCheck { config } => {
            let cfg = load_config(&config)?;
            cfg.validate()?;
            let text = toml::to_string_pretty(&cfg.redacted()).context("rendering config")?;
            write_output(None, &text)
        }
    }
}

async fn serve(cfg: ServiceConfig) -> Result<()> {
    let svc = Arc::new(Service::open(cfg.clone(), Arc::new(SystemClock))?);
    let listener = tokio::net::TcpListener::bind(&cfg.server.listen)
        .await
        .with_context(|| format!("binding {}", cfg.server.listen))?;
    let addr = listener.local_addr()?;
    println!("listening on http://{addr}");

    let mut proxy_task = None;
    if cfg.ingest.proxy.enabled {
        let (tx, mut rx) = tokio::sync::mpsc::unbounded_channel();
        let router = proxy::router(cfg.ingest.proxy.clone(), Arc::new(SystemClock), tx)?;
        let proxy_listener = tokio::net::TcpListener::bind(&cfg.ingest.proxy.listen)
            .await
            .with_context(|| format!("binding proxy {}", cfg.ingest.proxy.listen))?;
        println!("proxy listening on http://{}", proxy_listener.local_addr()?);
        let sink = svc.clone();
        tokio::spawn(async move {
            while let Some(record) = rx.recv().await {
                if let Err(e) = sink.observe(record) {
                    tracing::warn!(error = %e, "proxied transaction rejected");
                }
            }
        });
        proxy_task = Some(tokio::spawn(async move { axum::serve(proxy_listener, router).await }));
    }
    std::io::stdout().flush()?;

    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
        tracing::info!("shutting down");
    };
    axum::serve(listener, http::router(svc.clone()))
        .with_graceful_shutdown(shutdown)
        .await?;
    if let Some(task) = proxy_task {
        task.abort();
    }
    svc.shutdown();
    if svc.health().append_failures > 0 {
        bail!("event log appends failed during this run; see the log above");
    }
    Ok(())
}
