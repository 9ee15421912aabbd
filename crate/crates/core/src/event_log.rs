//! Append-only usage log.
//!
//! One JSON object per line with exactly three fields: pseudonymous user
//! alias, ISO-8601 UTC timestamp (milliseconds) and one of four event
//! labels. The log doubles as the event store that service state is rebuilt
//! from.

use chrono::{DateTime, Utc};
use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use thiserror::Error;

pub const CSV_HEADER: [&str; 3] = ["user_id", "timestamp", "event_type"];
const ALIAS_PREFIX: &str = "user_";

#[derive(Debug, Error)]
pub enum LogError {
    #[error("log I/O: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown event type `{0}`")]
    UnknownEventType(String),
    #[error("unknown export format `{0}` (expected csv or jsonl)")]
    UnknownFormat(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventType {
    Query,
    PopupOpening,
    PopupClosed,
    ReadmoreClicked,
}

impl EventType {
    pub const ALL: [EventType; 4] = [
        EventType::Query,
        EventType::PopupOpening,
        EventType::PopupClosed,
        EventType::ReadmoreClicked,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventType::Query => "query",
            EventType::PopupOpening => "popup_opening",
            EventType::PopupClosed => "popup_closed",
            EventType::ReadmoreClicked => "readmore_clicked",
        }
    }
}

impl FromStr for EventType {
    type Err = LogError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EventType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| LogError::UnknownEventType(s.to_string()))
    }
}

impl fmt::Display for EventType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogRecord {
    pub user_id: String,
    #[serde(with = "crate::timefmt")]
    pub timestamp: DateTime<Utc>,
    pub event_type: EventType,
}

impl LogRecord {
    pub fn new(user_id: impl Into<String>, timestamp: DateTime<Utc>, event_type: EventType) -> Self {
        Self {
            user_id: user_id.into(),
            timestamp: crate::timefmt::truncate_ms(timestamp),
            event_type,
        }
    }

    pub fn to_json_line(&self) -> String {
        let mut line = serde_json::to_string(self).expect("log records always serialize");
        line.push('\n');
        line
    }
}

/// Writer half of the log. Single writer per file.
#[derive(Debug)]
pub struct EventLog {
    path: PathBuf,
    file: File,
    len: u64,
    fsync: bool,
}

impl EventLog {
    /// Opens (creating if needed) the log at `path`. A trailing partial line
    /// left by an interrupted write is cut off.
    pub fn open(path: impl AsRef<Path>, fsync: bool) -> io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(&path)?;
        let mut contents = Vec::new();
        file.read_to_end(&mut contents)?;
        let complete = contents.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1) as u64;
        if complete != contents.len() as u64 {
            tracing::warn!(path = %path.display(), dropped = contents.len() as u64 - complete,
                "truncating torn tail of event log");
            file.set_len(complete)?;
        }
        file.seek(SeekFrom::End(0))?;
        Ok(Self { path, file, len: complete, fsync })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Byte length of the complete records written so far.
    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends and flushes one record; returns the log length afterwards.
    pub fn append(&mut self, record: &LogRecord) -> io::Result<u64> {
        let line = record.to_json_line();
        self.file.write_all(line.as_bytes())?;
        self.file.flush()?;
        if self.fsync {
            self.file.sync_data()?;
        }
        self.len += line.len() as u64;
        Ok(self.len)
    }
}

/// Reads every complete record starting at byte `offset`.
pub fn read_from(path: impl AsRef<Path>, offset: u64) -> Result<Vec<LogRecord>, LogError> {
    let mut file = match File::open(path.as_ref()) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    file.seek(SeekFrom::Start(offset))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).split(b'\n').enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let record = serde_json::from_slice(&line).map_err(|e| LogError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn read_all(path: impl AsRef<Path>) -> Result<Vec<LogRecord>, LogError> {
    read_from(path, 0)
}

/// Inclusive lower bound, exclusive upper bound; either side may be open.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TimeWindow {
    pub from: Option<DateTime<Utc>>,
    pub to: Option<DateTime<Utc>>,
}

impl TimeWindow {
    pub fn contains(&self, at: DateTime<Utc>) -> bool {
        self.from.is_none_or(|f| at >= f) && self.to.is_none_or(|t| at < t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Jsonl,
}

impl FromStr for ExportFormat {
    type Err = LogError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ExportFormat::Csv),
            "jsonl" => Ok(ExportFormat::Jsonl),
            other => Err(LogError::UnknownFormat(other.to_string())),
        }
    }
}

/// Renders the records inside `window`, keeping log order.
pub fn export(records: &[LogRecord], window: TimeWindow, format: ExportFormat) -> String {
    let rows = records.iter().filter(|r| window.contains(r.timestamp));
    match format {
        ExportFormat::Jsonl => rows.map(LogRecord::to_json_line).collect(),
        ExportFormat::Csv => {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
            w.write_record(CSV_HEADER).expect("in-memory csv write");
            for r in rows {
                w.serialize(r).expect("in-memory csv write");
            }
            String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
        }
    }
}

/// Parses an export back into records.
pub fn import(text: &str, format: ExportFormat) -> Result<Vec<LogRecord>, LogError> {
    match format {
        ExportFormat::Jsonl => text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| LogError::Parse { line: i + 1, message: e.to_string() })
            })
            .collect(),
        ExportFormat::Csv => {
            let mut r = csv::Reader::from_reader(text.as_bytes());
            let header = r.headers().map_err(|e| LogError::Parse { line: 1, message: e.to_string() })?;
            if header.iter().ne(CSV_HEADER) {
                return Err(LogError::Parse {
                    line: 1,
                    message: format!("expected header {}", CSV_HEADER.join(",")),
                });
            }
            r.deserialize()
                .enumerate()
                .map(|(i, row)| row.map_err(|e| LogError::Parse { line: i + 2, message: e.to_string() }))
                .collect()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayBucket {
    UnderTenMinutes,
    TenMinutesOrMore,
    NoFollowUp,
}

const TEN_MINUTES_MS: i64 = 10 * 60_000;

impl DelayBucket {
    pub fn for_delay(delay_ms: Option<i64>) -> Self {
        match delay_ms {
            None => DelayBucket::NoFollowUp,
            Some(d) if d < TEN_MINUTES_MS => DelayBucket::UnderTenMinutes,
            Some(_) => DelayBucket::TenMinutesOrMore,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopupDwell {
    pub user_id: String,
    #[serde(with = "crate::timefmt")]
    pub opened_at: DateTime<Utc>,
    #[serde(with = "crate::timefmt::option")]
    pub closed_at: Option<DateTime<Utc>>,
    /// `None` when the popup was never closed in the log.
    pub dwell_ms: Option<i64>,
    #[serde(with = "crate::timefmt::option")]
    pub next_query_at: Option<DateTime<Utc>>,
    /// `None` stands for "no later query": an unbounded delay.
    pub next_query_delay_ms: Option<i64>,
    pub bucket: DelayBucket,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DwellReport {
    pub popups: Vec<PopupDwell>,
    pub under_ten_minutes: usize,
    pub ten_minutes_or_more: usize,
    pub no_follow_up: usize,
    /// Openings without a matching close.
    pub incomplete: usize,
    /// Closes without a preceding opening.
    pub unmatched_closes: usize,
}

/// Pairs each `popup_opening` with the next `popup_closed` and the next
/// `query` of the same user, walking the log in file order.
pub fn popup_dwell_report(records: &[LogRecord]) -> DwellReport {
    let mut popups: Vec<PopupDwell> = Vec::new();
    let mut awaiting_close: HashMap<&str, Vec<usize>> = HashMap::new();
    let mut awaiting_query: HashMap<&str, Vec<usize>> = HashMap::new();
    let mut unmatched_closes = 0;

    for r in records {
        let user = r.user_id.as_str();
        match r.event_type {
            EventType::PopupOpening => {
                awaiting_close.entry(user).or_default().push(popups.len());
                awaiting_query.entry(user).or_default().push(popups.len());
                popups.push(PopupDwell {
                    user_id: r.user_id.clone(),
                    opened_at: r.timestamp,
                    closed_at: None,
                    dwell_ms: None,
                    next_query_at: None,
                    next_query_delay_ms: None,
                    bucket: DelayBucket::NoFollowUp,
                });
            }
            EventType::PopupClosed => {
                let pending = awaiting_close.remove(user).unwrap_or_default();
                if pending.is_empty() {
                    unmatched_closes += 1;
                }
                for i in pending {
                    let p = &mut popups[i];
                    p.closed_at = Some(r.timestamp);
                    p.dwell_ms = Some((r.timestamp - p.opened_at).num_milliseconds());
                }
            }
            EventType::Query => {
                for i in awaiting_query.remove(user).unwrap_or_default() {
                    let p = &mut popups[i];
                    let delay = (r.timestamp - p.opened_at).num_milliseconds();
                    p.next_query_at = Some(r.timestamp);
                    p.next_query_delay_ms = Some(delay);
                    p.bucket = DelayBucket::for_delay(Some(delay));
                }
            }
            EventType::ReadmoreClicked => {}
        }
    }

    let count = |b| popups.iter().filter(|p| p.bucket == b).count();
    DwellReport {
        under_ten_minutes: count(DelayBucket::UnderTenMinutes),
        ten_minutes_or_more: count(DelayBucket::TenMinutesOrMore),
        no_follow_up: count(DelayBucket::NoFollowUp),
        incomplete: popups.iter().filter(|p| p.closed_at.is_none()).count(),
        unmatched_closes,
        popups,
    }
}

/// True for identifiers of the form `user_<hex digits>`.
pub fn is_alias(id: &str) -> bool {
    id.strip_prefix(ALIAS_PREFIX)
        .is_some_and(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_hexdigit()))
}

/// External identity → random alias. The mapping lives only in the optional
/// keyfile, never in the log.
#[derive(Debug, Default)]
pub struct AliasBook {
    keyfile: Option<PathBuf>,
    by_external: BTreeMap<String, String>,
}

impl AliasBook {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(keyfile: impl AsRef<Path>) -> io::Result<Self> {
        let keyfile = keyfile.as_ref().to_path_buf();
        let by_external = match fs::read(&keyfile) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(e),
        };
        Ok(Self { keyfile: Some(keyfile), by_external })
    }

    pub fn lookup(&self, external: &str) -> Option<&str> {
        self.by_external.get(external).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.by_external.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_external.is_empty()
    }

    /// Returns the alias for `external`, minting and persisting a new one on
    /// first sight.
    pub fn alias_for(&mut self, external: &str) -> io::Result<String> {
        if let Some(alias) = self.by_external.get(external) {
            return Ok(alias.clone());
        }
        let alias = loop {
            let candidate = format!("{ALIAS_PREFIX}{:08x}", OsRng.next_u32());
            if !self.by_external.values().any(|a| *a == candidate) {
                break candidate;
            }
        };
        self.by_external.insert(external.to_string(), alias.clone());
        if let Err(e) = self.persist() {
            self.by_external.remove(external);
            return Err(e);
        }
        Ok(alias)
    }

    fn persist(&self) -> io::Result<()> {
        let Some(path) = &self.keyfile else { return Ok(()) };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(&self.by_external)?)?;
        fs::rename(tmp, path)
    }
}
