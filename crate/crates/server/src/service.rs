//! The running service: ingest, per-user state, the event log, snapshots
//! and the idempotency journal.
//!
//! All mutations go through one writer lock, which makes the log sink
//! single-writer and applies each user's events in arrival order. Readers
//! work from a published copy of the sessions and never take that lock.

use crate::clock::Clock;
use crate::config::{AliasMode, ServiceConfig};
use chrono::{DateTime, Duration, Utc};
use ecometer_core::event_log::{self, AliasBook, EventLog, LogRecord};
use ecometer_core::popup::PopupTrigger;
use ecometer_core::score::ClockSkew;
use ecometer_core::session::{apply_log_record, DisplayBundle, EngineConfig, UiEventKind, UserSession};
use ecometer_core::{timefmt, HttpTransactionRecord, PopupPayload, QueryFilter, QuerySource};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use thiserror::Error;
use tokio::sync::broadcast;

const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{0}")]
    Validation(String),
    #[error("event at {} precedes the user's last event at {}", timefmt::format(&.0.at), timefmt::format(&.0.last))]
    OutOfOrder(ClockSkew),
    #[error("storage: {0}")]
    Storage(String),
}

#[derive(Debug, Error)]
pub enum StartupError {
    #[error("creating storage dir {path}: {source}")]
    StorageDir {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("alias keyfile: {0}")]
    Aliases(#[source] io::Error),
    #[error("opening event log: {0}")]
    Log(#[source] io::Error),
    #[error("reading event log: {0}")]
    LogRead(#[from] event_log::LogError),
    #[error("rebuilding from event log: row for {user}: {source}")]
    Rebuild {
        user: String,
        #[source]
        source: ClockSkew,
    },
    #[error("idempotency journal: {0}")]
    Journal(#[source] io::Error),
}

/// Body of `POST /v1/events/transaction`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransactionReport {
    #[serde(default)]
    pub user_id: Option<String>,
    pub method: String,
    pub url: String,
    pub status: u16,
    #[serde(with = "ecometer_core::timefmt")]
    pub observed_at: DateTime<Utc>,
    #[serde(default)]
    pub idempotency_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransactionAck {
    pub accepted: bool,
    pub query: bool,
    pub duplicate: bool,
    pub query_count: Option<u64>,
    pub eco_score: Option<u32>,
    pub popup: Option<PopupPayload>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UiAck {
    pub accepted: bool,
    pub logged: bool,
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub users: usize,
    pub log_bytes: u64,
    pub events_logged: u64,
    pub transactions_received: u64,
    pub queries_detected: u64,
    pub duplicates_ignored: u64,
    pub append_failures: u64,
    pub last_append_error: Option<String>,
    pub last_snapshot_error: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Snapshot {
    version: u32,
    config_fingerprint: String,
    log_offset: u64,
    sessions: BTreeMap<String, UserSession>,
}

enum Aliases {
    Book(AliasBook),
    Passthrough,
}

impl Aliases {
    fn lookup(&self, external: &str) -> Option<String> {
        match self {
            Aliases::Book(book) => book.lookup(external).map(str::to_string),
            Aliases::Passthrough => Some(external.to_string()),
        }
    }

    fn alias_for(&mut self, external: &str) -> io::Result<String> {
        match self {
            Aliases::Book(book) => book.alias_for(external),
            Aliases::Passthrough => Ok(external.to_string()),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct JournalEntry {
    digest: String,
    #[serde(with = "ecometer_core::timefmt")]
    at: DateTime<Utc>,
}

/// Idempotency keys seen within the window, keyed by sha256(user, key).
struct Dedup {
    window: Duration,
    seen: HashMap<String, DateTime<Utc>>,
    journal: File,
}

impl Dedup {
    fn open(path: &Path, window: Duration, now: DateTime<Utc>) -> io::Result<Self> {
        let mut seen = HashMap::new();
        match File::open(path) {
            Ok(f) => {
                for line in BufReader::new(f).lines() {
                    let line = line?;
                    // A torn last line is just a key we forget.
                    if let Ok(entry) = serde_json::from_str::<JournalEntry>(&line) {
                        if now - entry.at < window {
                            seen.insert(entry.digest, entry.at);
                        }
                    }
                }
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e),
        }
        // Rewrite with only the live entries.
        let tmp = path.with_extension("tmp");
        {
            let mut out = File::create(&tmp)?;
            for (digest, at) in &seen {
                let entry = JournalEntry { digest: digest.clone(), at: *at };
                writeln!(out, "{}", serde_json::to_string(&entry)?)?;
            }
            out.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        let journal = OpenOptions::new().append(true).open(path)?;
        Ok(Self { window, seen, journal })
    }

    fn digest(user: &str, key: &str) -> String {
        let mut h = Sha256::new();
        h.update(user.as_bytes());
        h.update([0u8]);
        h.update(key.as_bytes());
        hex::encode(h.finalize())
    }

    fn is_duplicate(&mut self, digest: &str, now: DateTime<Utc>) -> bool {
        let window = self.window;
        self.seen.retain(|_, at| now - *at < window);
        self.seen.contains_key(digest)
    }

    fn remember(&mut self, digest: String, now: DateTime<Utc>) -> io::Result<()> {
        let entry = JournalEntry { digest: digest.clone(), at: now };
        self.seen.insert(digest, now);
        writeln!(self.journal, "{}", serde_json::to_string(&entry)?)?;
        self.journal.flush()
    }
}

/// Where committed rows go; the event log outside of tests.
trait LogSink: Send {
    fn append(&mut self, record: &LogRecord) -> io::Result<u64>;
    fn len(&self) -> u64;
}

impl LogSink for EventLog {
    fn append(&mut self, record: &LogRecord) -> io::Result<u64> {
        EventLog::append(self, record)
    }

    fn len(&self) -> u64 {
        EventLog::len(self)
    }
}

struct Writer {
    sessions: BTreeMap<String, UserSession>,
    log: Box<dyn LogSink>,
    dedup: Dedup,
    /// Per-user engines, for aliases with their own popup limit.
    engines: HashMap<String, EngineConfig>,
    since_snapshot: u64,
}

#[derive(Default)]
struct Counters {
    transactions: AtomicU64,
    queries: AtomicU64,
    duplicates: AtomicU64,
    events_logged: AtomicU64,
    append_failures: AtomicU64,
}

#[derive(Default)]
struct Faults {
    last_append_error: Option<String>,
    last_snapshot_error: Option<String>,
}

pub struct Service {
    cfg: ServiceConfig,
    engine: EngineConfig,
    filter: QueryFilter,
    fingerprint: String,
    clock: Arc<dyn Clock>,
    writer: Mutex<Writer>,
    aliases: RwLock<Aliases>,
    view: RwLock<HashMap<String, Arc<UserSession>>>,
    updates: broadcast::Sender<String>,
    counters: Counters,
    faults: Mutex<Faults>,
}

fn fingerprint(cfg: &ServiceConfig) -> String {
    let material = serde_json::json!({
        "engine": cfg.engine(),
        "user_limits": cfg.popup.user_limits,
    });
    hex::encode(Sha256::digest(material.to_string().as_bytes()))
}

fn user_engine(base: &EngineConfig, cfg: &ServiceConfig, limit: u32) -> EngineConfig {
    let mut engine = base.clone();
    if matches!(engine.popup.trigger, PopupTrigger::Count { .. }) {
        engine.popup.trigger = cfg.popup_trigger(Some(limit));
    }
    engine
}

fn load_snapshot(path: &Path, fingerprint: &str, log_len: u64) -> Option<Snapshot> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return None,
        Err(e) => {
            tracing::warn!(error = %e, "cannot read snapshot; rebuilding from the full log");
            return None;
        }
    };
    let snap: Snapshot = match serde_json::from_slice(&bytes) {
        Ok(s) => s,
        Err(e) => {
            tracing::warn!(error = %e, "unreadable snapshot; rebuilding from the full log");
            return None;
        }
    };
    if snap.version != SNAPSHOT_VERSION || snap.config_fingerprint != fingerprint {
        tracing::info!("snapshot was taken under different settings; rebuilding from the full log");
        return None;
    }
    if snap.log_offset > log_len {
        tracing::warn!(offset = snap.log_offset, log_len, "snapshot is ahead of the log; rebuilding from the full log");
        return None;
    }
    Some(snap)
}

impl Service {
    /// Opens storage and rebuilds state from the latest snapshot plus the
    /// log written after it.
    pub fn open(cfg: ServiceConfig, clock: Arc<dyn Clock>) -> Result<Self, StartupError> {
        let storage = &cfg.storage;
        fs::create_dir_all(&storage.dir).map_err(|source| StartupError::StorageDir {
            path: storage.dir.clone(),
            source,
        })?;
        let aliases = match storage.alias_mode {
            AliasMode::Keyfile => Aliases::Book(AliasBook::open(storage.keyfile_path()).map_err(StartupError::Aliases)?),
            AliasMode::Passthrough => Aliases::Passthrough,
        };

        let engine = cfg.engine();
        let mut engines = HashMap::new();
        for (external, limit) in &cfg.popup.user_limits {
            if let Some(alias) = aliases.lookup(external) {
                engines.insert(alias, user_engine(&engine, &cfg, *limit));
            }
        }

        let log = EventLog::open(storage.log_path(), storage.fsync).map_err(StartupError::Log)?;
        let fingerprint = fingerprint(&cfg);
        let (mut sessions, offset) = match load_snapshot(&storage.snapshot_path(), &fingerprint, log.len()) {
            Some(s) => (s.sessions, s.log_offset),
            None => (BTreeMap::new(), 0),
        };
        let tail = event_log::read_from(storage.log_path(), offset)?;
        for record in &tail {
            let e = engines.get(&record.user_id).unwrap_or(&engine);
            apply_log_record(&mut sessions, e, record).map_err(|source| StartupError::Rebuild {
                user: record.user_id.clone(),
                source,
            })?;
        }
        tracing::info!(users = sessions.len(), snapshot_offset = offset, replayed = tail.len(), "state rebuilt");

        let window = Duration::hours(i64::from(cfg.ingest.idempotency_window_hours));
        let dedup = Dedup::open(&storage.idempotency_path(), window, clock.now()).map_err(StartupError::Journal)?;

        let view = sessions.iter().map(|(k, v)| (k.clone(), Arc::new(v.clone()))).collect();
        let (updates, _) = broadcast::channel(1024);
        Ok(Self {
            filter: cfg.query_filter(),
            engine,
            fingerprint,
            clock,
            writer: Mutex::new(Writer {
                sessions,
                log: Box::new(log),
                dedup,
                engines,
                since_snapshot: tail.len() as u64,
            }),
            aliases: RwLock::new(aliases),
            view: RwLock::new(view),
            updates,
            counters: Counters::default(),
            faults: Mutex::new(Faults::default()),
            cfg,
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.cfg
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.clock.now()
    }

    /// Receives the alias of every user whose state changed.
    pub fn subscribe(&self) -> broadcast::Receiver<String> {
        self.updates.subscribe()
    }

    pub fn alias_of(&self, external: &str) -> Option<String> {
        self.aliases.read().unwrap().lookup(external)
    }

    fn mint_alias(&self, w: &mut Writer, external: &str) -> Result<String, ServiceError> {
        if let Some(alias) = self.alias_of(external) {
            return Ok(alias);
        }
        let alias = self
            .aliases
            .write()
            .unwrap()
            .alias_for(external)
            .map_err(|e| ServiceError::Storage(format!("alias keyfile: {e}")))?;
        if let Some(limit) = self.cfg.popup.user_limits.get(external) {
            w.engines.insert(alias.clone(), user_engine(&self.engine, &self.cfg, *limit));
        }
        Ok(alias)
    }

    /// The panel contents for `external` at `at` (default: now).
    pub fn state(&self, external: &str, at: Option<DateTime<Utc>>) -> DisplayBundle {
        let at = at.unwrap_or_else(|| self.clock.now());
        let session = self.alias_of(external).and_then(|alias| self.view.read().unwrap().get(&alias).cloned());
        let mut bundle = match session {
            Some(s) => s.bundle_at(&self.engine, at),
            None => DisplayBundle::pristine(external, &self.engine, at),
        };
        bundle.user_id = external.to_string();
        bundle
    }

    /// The raw per-user state behind the panel, if the user has any.
    pub fn session(&self, external: &str) -> Option<UserSession> {
        let alias = self.alias_of(external)?;
        self.view.read().unwrap().get(&alias).map(|s| (**s).clone())
    }

    pub fn ingest_transaction(&self, report: TransactionReport) -> Result<TransactionAck, ServiceError> {
        let user = match report.user_id.as_deref().map(str::trim) {
            Some(u) if !u.is_empty() => u.to_string(),
            _ => return Err(ServiceError::Validation("user_id is required".into())),
        };
        let tx = HttpTransactionRecord {
            user_id: user,
            method: report.method,
            url: report.url,
            status: report.status,
            observed_at: timefmt::truncate_ms(report.observed_at),
        };
        self.ingest(tx, QuerySource::Webhook, report.idempotency_key)
    }

    /// Records one transaction seen by the embedded proxy.
    pub fn observe(&self, tx: HttpTransactionRecord) -> Result<TransactionAck, ServiceError> {
        self.ingest(tx, QuerySource::Proxy, None)
    }

    fn ingest(
        &self,
        tx: HttpTransactionRecord,
        source: QuerySource,
        idempotency_key: Option<String>,
    ) -> Result<TransactionAck, ServiceError> {
        self.counters.transactions.fetch_add(1, Ordering::Relaxed);
        let query = self.filter.classify(&tx, source);
        let mut w = self.writer.lock().unwrap();

        let digest = idempotency_key.map(|k| Dedup::digest(&tx.user_id, &k));
        if let Some(d) = &digest {
            if w.dedup.is_duplicate(d, self.clock.now()) {
                self.counters.duplicates.fetch_add(1, Ordering::Relaxed);
                return Ok(TransactionAck {
                    accepted: true,
                    query: false,
                    duplicate: true,
                    query_count: None,
                    eco_score: None,
                    popup: None,
                });
            }
        }

        let Some(event) = query else {
            return Ok(TransactionAck {
                accepted: true,
                query: false,
                duplicate: false,
                query_count: None,
                eco_score: None,
                popup: None,
            });
        };

        let alias = self.mint_alias(&mut w, &event.user_id)?;
        let engine = w.engines.get(&alias).unwrap_or(&self.engine).clone();
        let mut session = w
            .sessions
            .get(&alias)
            .cloned()
            .unwrap_or_else(|| UserSession::new(&alias, &engine, event.occurred_at));
        let (outcome, rows) = session.on_query(&engine, event.occurred_at).map_err(ServiceError::OutOfOrder)?;
        self.counters.queries.fetch_add(1, Ordering::Relaxed);
        self.commit(&mut w, &alias, session, &rows);
        if let Some(d) = digest {
            if let Err(e) = w.dedup.remember(d, self.clock.now()) {
                tracing::warn!(error = %e, "idempotency journal append failed");
            }
        }
        Ok(TransactionAck {
            accepted: true,
            query: true,
            duplicate: false,
            query_count: Some(outcome.query_count),
            eco_score: Some(outcome.score.after),
            popup: outcome.popup,
        })
    }

    pub fn ui_event(&self, external: &str, kind: &str, at: Option<DateTime<Utc>>) -> Result<UiAck, ServiceError> {
        if external.trim().is_empty() {
            return Err(ServiceError::Validation("user_id is required".into()));
        }
        let kind: UiEventKind = kind.parse().map_err(|e: ecometer_core::session::UnknownUiEvent| {
            ServiceError::Validation(e.to_string())
        })?;
        let at = timefmt::truncate_ms(at.unwrap_or_else(|| self.clock.now()));
        let mut w = self.writer.lock().unwrap();

        let existing = self.alias_of(external).filter(|a| w.sessions.contains_key(a));
        let alias = match (existing, kind) {
            (Some(alias), _) => alias,
            (None, UiEventKind::PopupClosed) => {
                return Ok(UiAck {
                    accepted: true,
                    logged: false,
                    diagnostic: Some("no popup is open".into()),
                })
            }
            (None, UiEventKind::ReadmoreClicked) => self.mint_alias(&mut w, external)?,
        };
        let engine = w.engines.get(&alias).unwrap_or(&self.engine).clone();
        let mut session = w
            .sessions
            .get(&alias)
            .cloned()
            .unwrap_or_else(|| UserSession::new(&alias, &engine, at));
        let rows = session.on_ui_event(kind, at).map_err(ServiceError::OutOfOrder)?;
        if rows.is_empty() {
            return Ok(UiAck {
                accepted: true,
                logged: false,
                diagnostic: Some("no popup is open".into()),
            });
        }
        self.commit(&mut w, &alias, session, &rows);
        Ok(UiAck { accepted: true, logged: true, diagnostic: None })
    }

    fn commit(&self, w: &mut Writer, alias: &str, session: UserSession, rows: &[LogRecord]) {
        for row in rows {
            match w.log.append(row) {
                Ok(_) => {
                    self.counters.events_logged.fetch_add(1, Ordering::Relaxed);
                }
                Err(e) => {
                    // Delivery to the panel goes ahead; the failure shows on
                    // the health endpoint.
                    tracing::error!(error = %e, "event log append failed");
                    self.counters.append_failures.fetch_add(1, Ordering::Relaxed);
                    self.faults.lock().unwrap().last_append_error = Some(e.to_string());
                }
            }
        }
        self.view.write().unwrap().insert(alias.to_string(), Arc::new(session.clone()));
        w.sessions.insert(alias.to_string(), session);
        w.since_snapshot += rows.len() as u64;
        if w.since_snapshot >= self.cfg.storage.snapshot_every {
            self.write_snapshot(w);
        }
        let _ = self.updates.send(alias.to_string());
    }

    fn write_snapshot(&self, w: &mut Writer) {
        let snap = Snapshot {
            version: SNAPSHOT_VERSION,
            config_fingerprint: self.fingerprint.clone(),
            log_offset: w.log.len(),
            sessions: w.sessions.clone(),
        };
        let path = self.cfg.storage.snapshot_path();
        let result = (|| -> io::Result<()> {
            let tmp = path.with_extension("tmp");
            {
                let mut f = File::create(&tmp)?;
                f.write_all(&serde_json::to_vec(&snap)?)?;
                f.sync_all()?;
            }
            fs::rename(&tmp, &path)
        })();
        match result {
            Ok(()) => {
                w.since_snapshot = 0;
                self.faults.lock().unwrap().last_snapshot_error = None;
            }
            Err(e) => {
                tracing::error!(error = %e, "snapshot write failed");
                self.faults.lock().unwrap().last_snapshot_error = Some(e.to_string());
            }
        }
    }

    /// Writes a final snapshot.
    pub fn shutdown(&self) {
        let mut w = self.writer.lock().unwrap();
        self.write_snapshot(&mut w);
    }

    pub fn health(&self) -> Health {
        let (users, log_bytes) = {
            let w = self.writer.lock().unwrap();
            (w.sessions.len(), w.log.len())
        };
        let faults = self.faults.lock().unwrap();
        let append_failures = self.counters.append_failures.load(Ordering::Relaxed);
        Health {
            status: if faults.last_append_error.is_some() { "degraded" } else { "ok" }.to_string(),
            users,
            log_bytes,
            events_logged: self.counters.events_logged.load(Ordering::Relaxed),
            transactions_received: self.counters.transactions.load(Ordering::Relaxed),
            queries_detected: self.counters.queries.load(Ordering::Relaxed),
            duplicates_ignored: self.counters.duplicates.load(Ordering::Relaxed),
            append_failures,
            last_append_error: faults.last_append_error.clone(),
            last_snapshot_error: faults.last_snapshot_error.clone(),
        }
    }
}
