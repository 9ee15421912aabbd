//! Usage audit over a ChatGPT data export (`conversations.json`).
//!
//! Counts user-authored messages in the week before and the week after a
//! download date, with the same boundary rules as the audit notebook:
//! `pre_start <= t < download` and `download <= t <= trial_end`, all in UTC.

use crate::footprint::{format_kwh, format_liters, HumanScaleReading, ResourceModel};
use chrono::{DateTime, Duration, NaiveDate, TimeZone, Utc};
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HistoryError {
    #[error("invalid JSON at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("export must be a JSON array of conversations, found {0}")]
    NotAnArray(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportMessage {
    pub role: Option<String>,
    /// Seconds since the Unix epoch, UTC.
    pub create_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportNode {
    pub message_id: String,
    pub message: Option<ExportMessage>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub nodes: Vec<ExportNode>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConversationExport {
    pub conversations: Vec<Conversation>,
}

impl ConversationExport {
    /// Creation instants (microseconds) of every user-authored message.
    pub fn user_message_times(&self) -> impl Iterator<Item = i64> + '_ {
        self.conversations
            .iter()
            .flat_map(|c| c.nodes.iter())
            .filter_map(|n| n.message.as_ref())
            .filter(|m| m.role.as_deref() == Some("user"))
            .filter_map(|m| m.create_time.and_then(epoch_seconds_to_micros))
    }
}

/// Extracts conversations tolerantly: missing or malformed `mapping`,
/// `message`, `author` or `create_time` entries are skipped.
pub fn parse_export(document: &str) -> Result<ConversationExport, HistoryError> {
    let value: Value = serde_json::from_str(document).map_err(|e| HistoryError::Syntax {
        offset: byte_offset(document, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let Value::Array(items) = value else {
        return Err(HistoryError::NotAnArray(json_kind(&value)));
    };
    let conversations = items
        .iter()
        .map(|conv| {
            let nodes = conv
                .get("mapping")
                .and_then(Value::as_object)
                .map(|mapping| {
                    mapping
                        .iter()
                        .map(|(id, node)| ExportNode {
                            message_id: id.clone(),
                            message: node.get("message").and_then(parse_message),
                        })
                        .collect()
                })
                .unwrap_or_default();
            Conversation { nodes }
        })
        .collect();
    Ok(ConversationExport { conversations })
}

fn parse_message(message: &Value) -> Option<ExportMessage> {
    let message = message.as_object()?;
    Some(ExportMessage {
        role: message
            .get("author")
            .and_then(|a| a.get("role"))
            .and_then(Value::as_str)
            .map(str::to_string),
        create_time: message.get("create_time").and_then(Value::as_f64),
    })
}

fn json_kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    }
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

/// Converts float epoch seconds to whole microseconds the way Python's
/// `datetime.fromtimestamp` does: the fractional part is rounded half to
/// even at microsecond resolution.
pub fn epoch_seconds_to_micros(seconds: f64) -> Option<i64> {
    if !seconds.is_finite() {
        return None;
    }
    let whole = seconds.trunc();
    let mut frac_us = ((seconds - whole) * 1e6).round_ties_even();
    let mut whole = whole;
    if frac_us >= 1e6 {
        frac_us -= 1e6;
        whole += 1.0;
    } else if frac_us < 0.0 {
        frac_us += 1e6;
        whole -= 1.0;
    }
    if whole.abs() > 1e13 {
        return None;
    }
    Some(whole as i64 * 1_000_000 + frac_us as i64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisWindow {
    #[serde(with = "crate::timefmt")]
    pub download_date: DateTime<Utc>,
}

impl AnalysisWindow {
    /// Anchors a calendar date at 00:00:00 UTC.
    pub fn from_date(date: NaiveDate) -> Self {
        let midnight = date.and_hms_opt(0, 0, 0).expect("midnight exists");
        Self { download_date: Utc.from_utc_datetime(&midnight) }
    }

    pub fn pre_start(&self) -> DateTime<Utc> {
        self.download_date - Duration::days(7)
    }

    pub fn trial_end(&self) -> DateTime<Utc> {
        self.download_date + Duration::days(7)
    }

    fn bounds_us(&self) -> (i64, i64, i64) {
        (
            self.pre_start().timestamp_micros(),
            self.download_date.timestamp_micros(),
            self.trial_end().timestamp_micros(),
        )
    }

    /// `[pre_start, download)`
    pub fn in_pre(&self, t_us: i64) -> bool {
        let (lo, mid, _) = self.bounds_us();
        lo <= t_us && t_us < mid
    }

    /// `[download, trial_end]`
    pub fn in_trial(&self, t_us: i64) -> bool {
        let (_, mid, hi) = self.bounds_us();
        mid <= t_us && t_us <= hi
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageReport {
    pub queries_in_trial: u64,
    pub queries_before_trial: u64,
    pub total_user_messages: u64,
}

pub fn count_windows(export: &ConversationExport, window: &AnalysisWindow) -> UsageReport {
    let mut report = UsageReport::default();
    for t in export.user_message_times() {
        report.total_user_messages += 1;
        if window.in_pre(t) {
            report.queries_before_trial += 1;
        } else if window.in_trial(t) {
            report.queries_in_trial += 1;
        }
    }
    report
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowFootprint {
    pub queries: u64,
    #[serde(with = "crate::decimal")]
    pub energy_wh: Decimal,
    #[serde(with = "crate::decimal")]
    pub water_ml: Decimal,
    pub energy_kwh: String,
    pub water_liters: String,
    pub human_energy: HumanScaleReading,
    pub human_water: HumanScaleReading,
}

impl WindowFootprint {
    fn new(queries: u64, model: &ResourceModel) -> Self {
        let energy_wh = model.energy_for(queries);
        let water_ml = model.water_for(queries);
        Self {
            queries,
            energy_kwh: format_kwh(energy_wh),
            water_liters: format_liters(water_ml),
            human_energy: model.to_human_energy(energy_wh),
            human_water: model.to_human_water(water_ml),
            energy_wh,
            water_ml,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FootprintReport {
    pub counts: UsageReport,
    pub trial: WindowFootprint,
    pub before_trial: WindowFootprint,
}

impl FootprintReport {
    /// The two count lines exactly as the audit notebook prints them.
    pub fn count_lines(&self) -> String {
        format!(
            "Number of queries within study period: {}\nNumber of queries before study period: {}\n",
            self.counts.queries_in_trial, self.counts.queries_before_trial
        )
    }

    pub fn to_text(&self) -> String {
        let mut out = self.count_lines();
        for (label, w) in [("within", &self.trial), ("before", &self.before_trial)] {
            out.push_str(&format!(
                "Energy {label} study period: {} kWh ({})\nWater {label} study period: {} liters ({})\n",
                w.energy_kwh,
                w.human_energy.phrase(),
                w.water_liters,
                w.human_water.phrase(),
            ));
        }
        out
    }
}

pub fn footprint_report(report: &UsageReport, model: &ResourceModel) -> FootprintReport {
    FootprintReport {
        counts: *report,
        trial: WindowFootprint::new(report.queries_in_trial, model),
        before_trial: WindowFootprint::new(report.queries_before_trial, model),
    }
}

/// Synthetic exports for tests and demos. No real user data ships with the
/// repository.
pub mod synth {
    use super::AnalysisWindow;
    use rand::seq::SliceRandom;
    use rand::Rng;
    use serde_json::{json, Map, Value};

    const ROLES: [&str; 4] = ["user", "assistant", "system", "tool"];

    fn node(id: &str, role: Option<&str>, create_time: Value) -> Value {
        let mut message = Map::new();
        message.insert("id".into(), json!(id));
        if let Some(role) = role {
            message.insert("author".into(), json!({ "role": role, "name": null, "metadata": {} }));
        }
        message.insert("create_time".into(), create_time);
        message.insert("content".into(), json!({ "content_type": "text", "parts": ["…"] }));
        json!({ "id": id, "message": Value::Object(message), "parent": null, "children": [] })
    }

    /// A random export around `window`: mixes roles, null messages, missing
    /// authors and mappings, times on and near every window boundary, and
    /// times far outside the 14-day span.
    pub fn random_export<R: Rng>(rng: &mut R, window: &AnalysisWindow) -> Value {
        let (lo, mid, hi) = window.bounds_us();
        let edges_ms = [lo / 1000, mid / 1000, hi / 1000];
        let conversations = rng.gen_range(0..8);
        let mut out = Vec::new();
        let mut next_id = 0u64;
        for c in 0..conversations {
            if rng.gen_ratio(1, 15) {
                out.push(json!({ "title": format!("conversation {c}") }));
                continue;
            }
            let mut mapping = Map::new();
            for _ in 0..rng.gen_range(0..30) {
                next_id += 1;
                let id = format!("msg-{next_id:06}");
                let time_ms: i64 = match rng.gen_range(0..10) {
                    0 => *edges_ms.choose(rng).unwrap(),
                    1 => *edges_ms.choose(rng).unwrap() + *[-1i64, 1].choose(rng).unwrap(),
                    2 => lo / 1000 - rng.gen_range(1..30 * 86_400_000),
                    3 => hi / 1000 + rng.gen_range(1..30 * 86_400_000),
                    _ => rng.gen_range(lo / 1000..=hi / 1000),
                };
                let create_time = match rng.gen_range(0..40) {
                    0 => Value::Null,
                    1 => json!("yesterday"),
                    _ if time_ms % 1000 == 0 && rng.gen_bool(0.5) => json!(time_ms / 1000),
                    _ => json!(time_ms as f64 / 1000.0),
                };
                let value = match rng.gen_range(0..20) {
                    0 => json!({ "id": id, "message": null, "children": [] }),
                    1 => json!({ "id": id, "children": [] }),
                    2 => node(&id, None, create_time),
                    _ => node(&id, Some(ROLES.choose(rng).unwrap()), create_time),
                };
                mapping.insert(id, value);
            }
            out.push(json!({ "title": format!("conversation {c}"), "mapping": Value::Object(mapping) }));
        }
        Value::Array(out)
    }

    /// An export with exactly `pre` user messages spread over the week before
    /// the download date and `trial` over the week after, each followed by an
    /// assistant reply.
    pub fn fixed_counts_export(window: &AnalysisWindow, pre: u64, trial: u64) -> Value {
        let (lo, mid, _) = window.bounds_us();
        let week_ms = (mid - lo) / 1000;
        let mut mapping = Map::new();
        let mut push = |idx: u64, base_ms: i64, span: u64| {
            let t = base_ms + (week_ms - 60_000) * idx as i64 / span.max(1) as i64;
            let user = format!("u-{base_ms}-{idx:04}");
            let reply = format!("a-{base_ms}-{idx:04}");
            mapping.insert(user.clone(), node(&user, Some("user"), json!(t as f64 / 1000.0)));
            mapping.insert(reply.clone(), node(&reply, Some("assistant"), json!((t + 5_000) as f64 / 1000.0)));
        };
        for i in 0..pre {
            push(i, lo / 1000, pre);
        }
        for i in 0..trial {
            push(i, mid / 1000, trial);
        }
        json!([{ "title": "fixture", "mapping": Value::Object(mapping) }])
    }
}
