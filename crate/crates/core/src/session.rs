//! Per-user state (ledger, Eco Score, popup policy) and the transitions the
//! service and the trace replayer share.
//!
//! Each transition also yields the log rows it implies, and replaying those
//! rows through [`rebuild`] reproduces the same state.

use crate::event_log::{EventType, LogRecord};
use crate::footprint::{format_kwh, format_liters, HumanScaleReading, ModelError, ResourceModel, UsageLedger};
use crate::popup::{PopupConfigError, PopupPayload, PopupPolicy, PopupPolicyState};
use crate::score::{image_bracket, ClockSkew, EcoScoreState, PenaltySchedule, QueryScore, ScheduleError};
use crate::timefmt::truncate_ms;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EngineConfigError {
    #[error("resources: {0}")]
    Model(#[from] ModelError),
    #[error("score: {0}")]
    Schedule(#[from] ScheduleError),
    #[error("popup: {0}")]
    Popup(#[from] PopupConfigError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub model: ResourceModel,
    pub schedule: PenaltySchedule,
    pub popup: PopupPolicy,
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineConfigError> {
        self.model.validate()?;
        self.schedule.validate()?;
        self.popup.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UiEventKind {
    PopupClosed,
    ReadmoreClicked,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown UI event kind `{0}` (expected popup_closed or readmore_clicked)")]
pub struct UnknownUiEvent(pub String);

impl FromStr for UiEventKind {
    type Err = UnknownUiEvent;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "popup_closed" => Ok(UiEventKind::PopupClosed),
            "readmore_clicked" => Ok(UiEventKind::ReadmoreClicked),
            other => Err(UnknownUiEvent(other.to_string())),
        }
    }
}

impl fmt::Display for UiEventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UiEventKind::PopupClosed => "popup_closed",
            UiEventKind::ReadmoreClicked => "readmore_clicked",
        })
    }
}

/// Everything the side panel renders, taken from one consistent snapshot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisplayBundle {
    pub user_id: String,
    #[serde(with = "crate::timefmt")]
    pub as_of: DateTime<Utc>,
    pub eco_score: u32,
    pub image_bracket: u8,
    pub query_count: u64,
    pub energy: HumanScaleReading,
    pub water: HumanScaleReading,
    pub energy_sentence: String,
    pub water_sentence: String,
    pub energy_kwh_text: String,
    pub water_liters_text: String,
    pub popup: Option<PopupPayload>,
    pub read_more_url: String,
}

impl DisplayBundle {
    /// Bundle for a user with no recorded activity.
    pub fn pristine(user_id: &str, cfg: &EngineConfig, now: DateTime<Utc>) -> Self {
        let session = UserSession::new(user_id, cfg, now);
        session.bundle_at(cfg, now)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub score: QueryScore,
    pub query_count: u64,
    pub popup: Option<PopupPayload>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSession {
    pub user_id: String,
    pub ledger: UsageLedger,
    pub score: EcoScoreState,
    pub popup: PopupPolicyState,
    #[serde(with = "crate::timefmt")]
    pub last_event_at: DateTime<Utc>,
}

impl UserSession {
    /// A fresh user whose regeneration clock starts at `at`.
    pub fn new(user_id: &str, cfg: &EngineConfig, at: DateTime<Utc>) -> Self {
        let at = truncate_ms(at);
        Self {
            user_id: user_id.to_string(),
            ledger: UsageLedger::new(user_id),
            score: EcoScoreState::new(&cfg.schedule, at),
            popup: PopupPolicyState::default(),
            last_event_at: at,
        }
    }

    fn check_order(&self, at: DateTime<Utc>) -> Result<(), ClockSkew> {
        if at < self.last_event_at {
            Err(ClockSkew { at, last: self.last_event_at })
        } else {
            Ok(())
        }
    }

    /// Applies one detected query. Returns the outcome and the log rows it
    /// produces (`query`, plus `popup_opening` when the popup fires).
    pub fn on_query(
        &mut self,
        cfg: &EngineConfig,
        at: DateTime<Utc>,
    ) -> Result<(QueryOutcome, Vec<LogRecord>), ClockSkew> {
        let at = truncate_ms(at);
        self.check_order(at)?;
        let (score, effect) = self.score.on_query(&cfg.schedule, at)?;
        self.score = score;
        self.ledger.record_query(&cfg.model, at);
        let popup = self.popup.on_query(&cfg.popup, &self.ledger, &cfg.model, at);
        self.last_event_at = at;

        let mut rows = vec![LogRecord::new(&self.user_id, at, EventType::Query)];
        if popup.is_some() {
            rows.push(LogRecord::new(&self.user_id, at, EventType::PopupOpening));
        }
        let outcome = QueryOutcome { score: effect, query_count: self.ledger.query_count, popup };
        Ok((outcome, rows))
    }

    /// Applies a UI event. A `popup_closed` with no open popup changes
    /// nothing and logs nothing.
    pub fn on_ui_event(&mut self, kind: UiEventKind, at: DateTime<Utc>) -> Result<Vec<LogRecord>, ClockSkew> {
        let at = truncate_ms(at);
        self.check_order(at)?;
        let rows = match kind {
            UiEventKind::PopupClosed if self.popup.on_dismiss(at) => {
                vec![LogRecord::new(&self.user_id, at, EventType::PopupClosed)]
            }
            UiEventKind::PopupClosed => Vec::new(),
            UiEventKind::ReadmoreClicked => {
                vec![LogRecord::new(&self.user_id, at, EventType::ReadmoreClicked)]
            }
        };
        // Only logged events advance the ordering clock, so a rebuild from
        // the log lands on the same state.
        if !rows.is_empty() {
            self.last_event_at = at;
        }
        Ok(rows)
    }

    /// Score as it would read at `now`, without mutating the session.
    /// Instants before the last accrual read the last accrued value.
    pub fn score_at(&self, cfg: &EngineConfig, now: DateTime<Utc>) -> u32 {
        let now = truncate_ms(now).max(self.score.last_accrual_at);
        self.score
            .accrue(&cfg.schedule, now)
            .map(|s| s.score)
            .unwrap_or(self.score.score)
    }

    pub fn bundle_at(&self, cfg: &EngineConfig, now: DateTime<Utc>) -> DisplayBundle {
        let eco_score = self.score_at(cfg, now);
        let energy = self.ledger.human_energy(&cfg.model);
        let water = self.ledger.human_water(&cfg.model);
        DisplayBundle {
            user_id: self.user_id.clone(),
            as_of: truncate_ms(now),
            eco_score,
            image_bracket: image_bracket(eco_score),
            query_count: self.ledger.query_count,
            energy_sentence: energy.panel_sentence(),
            water_sentence: water.panel_sentence(),
            energy,
            water,
            energy_kwh_text: format_kwh(self.ledger.energy_total_wh),
            water_liters_text: format_liters(self.ledger.water_total_ml),
            popup: self.popup.open_payload.clone(),
            read_more_url: cfg.popup.read_more_url.clone(),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RebuildError {
    #[error("log row {index} for {user}: {source}")]
    OutOfOrder {
        index: usize,
        user: String,
        #[source]
        source: ClockSkew,
    },
}

/// Folds one log row into the session map.
pub fn apply_log_record(
    sessions: &mut BTreeMap<String, UserSession>,
    cfg: &EngineConfig,
    record: &LogRecord,
) -> Result<(), ClockSkew> {
    let session = sessions
        .entry(record.user_id.clone())
        .or_insert_with(|| UserSession::new(&record.user_id, cfg, record.timestamp));
    match record.event_type {
        EventType::Query => session.on_query(cfg, record.timestamp).map(drop),
        EventType::PopupClosed => session.on_ui_event(UiEventKind::PopupClosed, record.timestamp).map(drop),
        EventType::ReadmoreClicked => {
            session.on_ui_event(UiEventKind::ReadmoreClicked, record.timestamp).map(drop)
        }
        // Re-derived from the query rows.
        EventType::PopupOpening => Ok(()),
    }
}

/// Rebuilds every user's state from the log.
pub fn rebuild(records: &[LogRecord], cfg: &EngineConfig) -> Result<BTreeMap<String, UserSession>, RebuildError> {
    let mut sessions = BTreeMap::new();
    for (index, record) in records.iter().enumerate() {
        apply_log_record(&mut sessions, cfg, record).map_err(|source| RebuildError::OutOfOrder {
            index,
            user: record.user_id.clone(),
            source,
        })?;
    }
    Ok(sessions)
}
