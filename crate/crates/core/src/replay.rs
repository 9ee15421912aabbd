//! Deterministic replay of a timestamped event trace.
//!
//! A trace is JSON Lines; each line names a user, an instant and an event
//! kind. Plain query events (`{"user_id", "occurred_at", "source"}`) are
//! valid lines, with `kind` defaulting to `query`. The `observe` kind records
//! what the panel would show at that instant without changing any state.

use crate::event_log::LogRecord;
use crate::session::{DisplayBundle, EngineConfig, UiEventKind, UserSession};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReplayError {
    #[error("trace line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("trace line {line}: event for {user} at {at} precedes that user's previous event at {previous}")]
    Unsorted {
        line: usize,
        user: String,
        at: String,
        previous: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    #[default]
    Query,
    PopupClosed,
    ReadmoreClicked,
    Observe,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub user_id: String,
    #[serde(with = "crate::timefmt")]
    pub occurred_at: DateTime<Utc>,
    #[serde(default)]
    pub kind: TraceKind,
}

impl TraceEvent {
    pub fn new(user_id: impl Into<String>, occurred_at: DateTime<Utc>, kind: TraceKind) -> Self {
        Self { user_id: user_id.into(), occurred_at, kind }
    }
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceEvent>, ReplayError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ReplayError::Parse { line: i + 1, message: e.to_string() })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub index: usize,
    pub user_id: String,
    #[serde(with = "crate::timefmt")]
    pub at: DateTime<Utc>,
    pub kind: TraceKind,
    /// Score after the event (for `observe`, the score read at `at`).
    pub score: u32,
    pub penalty: Option<u32>,
    pub pause_ms: Option<i64>,
    pub query_count: u64,
    pub popup_fired: bool,
    pub popup_dismissed: bool,
    pub popups_fired: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryReport {
    pub steps: Vec<TrajectoryStep>,
    pub popups_fired: BTreeMap<String, u64>,
    /// Each user's panel at the last instant of the trace.
    pub final_bundles: BTreeMap<String, DisplayBundle>,
    pub log: Vec<LogRecord>,
}

/// Runs `trace` through fresh per-user sessions. Each user's clock starts at
/// that user's first event. Fails if any user's events go back in time.
pub fn replay(trace: &[TraceEvent], cfg: &EngineConfig) -> Result<TrajectoryReport, ReplayError> {
    let mut previous: HashMap<&str, DateTime<Utc>> = HashMap::new();
    for (i, ev) in trace.iter().enumerate() {
        let at = crate::timefmt::truncate_ms(ev.occurred_at);
        if let Some(prev) = previous.insert(&ev.user_id, at).filter(|prev| *prev > at) {
            return Err(ReplayError::Unsorted {
                line: i + 1,
                user: ev.user_id.clone(),
                at: crate::timefmt::format(&at),
                previous: crate::timefmt::format(&prev),
            });
        }
    }

    let mut sessions: BTreeMap<String, UserSession> = BTreeMap::new();
    let mut steps = Vec::with_capacity(trace.len());
    let mut log = Vec::new();
    let mut end: Option<DateTime<Utc>> = None;

    for (index, ev) in trace.iter().enumerate() {
        end = end.max(Some(ev.occurred_at));
        let mut step = TrajectoryStep {
            index,
            user_id: ev.user_id.clone(),
            at: crate::timefmt::truncate_ms(ev.occurred_at),
            kind: ev.kind,
            score: 0,
            penalty: None,
            pause_ms: None,
            query_count: 0,
            popup_fired: false,
            popup_dismissed: false,
            popups_fired: 0,
        };
        // A session starts at the user's first query, as it does live. Until
        // then observations see the pristine score and UI events are ignored.
        if ev.kind != TraceKind::Query && !sessions.contains_key(&ev.user_id) {
            step.score = cfg.schedule.initial_score.min(crate::score::MAX_SCORE);
            steps.push(step);
            continue;
        }
        let session = sessions
            .entry(ev.user_id.clone())
            .or_insert_with(|| UserSession::new(&ev.user_id, cfg, ev.occurred_at));
        // Ordering was checked above, so transitions cannot fail.
        match ev.kind {
            TraceKind::Query => {
                let (outcome, rows) = session.on_query(cfg, ev.occurred_at).expect("trace is sorted");
                step.score = outcome.score.after;
                step.penalty = Some(outcome.score.penalty);
                step.pause_ms = outcome.score.pause_ms;
                step.popup_fired = outcome.popup.is_some();
                log.extend(rows);
            }
            TraceKind::PopupClosed | TraceKind::ReadmoreClicked => {
                let kind = if ev.kind == TraceKind::PopupClosed {
                    UiEventKind::PopupClosed
                } else {
                    UiEventKind::ReadmoreClicked
                };
                let was_open = session.popup.popup_open;
                let rows = session.on_ui_event(kind, ev.occurred_at).expect("trace is sorted");
                step.popup_dismissed = was_open && !session.popup.popup_open;
                step.score = session.score_at(cfg, ev.occurred_at);
                log.extend(rows);
            }
            TraceKind::Observe => {
                step.score = session.score_at(cfg, ev.occurred_at);
            }
        }
        step.query_count = session.ledger.query_count;
        step.popups_fired = session.popup.popups_fired;
        steps.push(step);
    }

    let end = end.unwrap_or_default();
    Ok(TrajectoryReport {
        steps,
        popups_fired: sessions.iter().map(|(u, s)| (u.clone(), s.popup.popups_fired)).collect(),
        final_bundles: sessions.iter().map(|(u, s)| (u.clone(), s.bundle_at(cfg, end))).collect(),
        log,
    })
}
