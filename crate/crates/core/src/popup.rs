//! Limit Reached popup: fires every `limit` queries (or, in threshold mode,
//! whenever usage since the last popup crosses an energy or water budget)
//! and stays open until the user dismisses it.

use crate::footprint::{format_kwh, format_liters, HumanScaleReading, ResourceModel, UsageLedger};
use chrono::{DateTime, Utc};
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_LIMIT: u32 = 7;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PopupConfigError {
    #[error("popup limit must be at least 1")]
    ZeroLimit,
    #[error("resource-threshold mode needs a positive energy or water limit")]
    NoThreshold,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PopupTrigger {
    Count {
        limit: u32,
    },
    ResourceThreshold {
        #[serde(with = "crate::decimal::option", default)]
        energy_limit_wh: Option<Decimal>,
        #[serde(with = "crate::decimal::option", default)]
        water_limit_ml: Option<Decimal>,
    },
}

impl Default for PopupTrigger {
    fn default() -> Self {
        PopupTrigger::Count { limit: DEFAULT_LIMIT }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopupPolicy {
    pub trigger: PopupTrigger,
    pub read_more_url: String,
}

impl PopupPolicy {
    pub fn validate(&self) -> Result<(), PopupConfigError> {
        match &self.trigger {
            PopupTrigger::Count { limit: 0 } => Err(PopupConfigError::ZeroLimit),
            PopupTrigger::Count { .. } => Ok(()),
            PopupTrigger::ResourceThreshold { energy_limit_wh, water_limit_ml } => {
                let positive = |v: &Option<Decimal>| v.is_some_and(|v| v > Decimal::ZERO);
                if positive(energy_limit_wh) || positive(water_limit_ml) {
                    Ok(())
                } else {
                    Err(PopupConfigError::NoThreshold)
                }
            }
        }
    }
}

/// Totals shown by the popup, captured when it fired.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopupPayload {
    pub energy_kwh: String,
    pub water_liters: String,
    pub human_energy: HumanScaleReading,
    pub human_water: HumanScaleReading,
    pub read_more_url: String,
    pub query_count: u64,
    #[serde(with = "crate::timefmt")]
    pub opened_at: DateTime<Utc>,
}

impl PopupPayload {
    pub fn from_ledger(
        ledger: &UsageLedger,
        model: &ResourceModel,
        read_more_url: &str,
        opened_at: DateTime<Utc>,
    ) -> Self {
        Self {
            energy_kwh: format_kwh(ledger.energy_total_wh),
            water_liters: format_liters(ledger.water_total_ml),
            human_energy: ledger.human_energy(model),
            human_water: ledger.human_water(model),
            read_more_url: read_more_url.to_string(),
            query_count: ledger.query_count,
            opened_at,
        }
    }

    /// The popup body, line by line.
    pub fn lines(&self) -> Vec<String> {
        vec![
            "Limit Reached".to_string(),
            format!("Energy used: {} kWh", self.energy_kwh),
            self.human_energy.popup_sentence(),
            format!("Water used: {} liters", self.water_liters),
            self.human_water.popup_sentence(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopupPolicyState {
    pub queries_since_last_popup: u32,
    pub popup_open: bool,
    pub popups_fired: u64,
    #[serde(with = "crate::timefmt::option", default)]
    pub last_popup_opened_at: Option<DateTime<Utc>>,
    #[serde(with = "crate::timefmt::option", default)]
    pub last_popup_closed_at: Option<DateTime<Utc>>,
    /// Payload of the popup currently on screen.
    #[serde(default)]
    pub open_payload: Option<PopupPayload>,
    #[serde(with = "crate::decimal")]
    pub energy_mark_wh: Decimal,
    #[serde(with = "crate::decimal")]
    pub water_mark_ml: Decimal,
}

impl Default for PopupPolicyState {
    fn default() -> Self {
        Self {
            queries_since_last_popup: 0,
            popup_open: false,
            popups_fired: 0,
            last_popup_opened_at: None,
            last_popup_closed_at: None,
            open_payload: None,
            energy_mark_wh: Decimal::ZERO,
            water_mark_ml: Decimal::ZERO,
        }
    }
}

impl PopupPolicyState {
    /// Call once per detected query, after the ledger has been updated.
    /// Returns the payload when the popup fires. A popup that fires while
    /// another is still open replaces it.
    pub fn on_query(
        &mut self,
        policy: &PopupPolicy,
        ledger: &UsageLedger,
        model: &ResourceModel,
        at: DateTime<Utc>,
    ) -> Option<PopupPayload> {
        self.queries_since_last_popup += 1;
        let fire = match &policy.trigger {
            PopupTrigger::Count { limit } => self.queries_since_last_popup >= *limit,
            PopupTrigger::ResourceThreshold { energy_limit_wh, water_limit_ml } => {
                let crossed = |limit: &Option<Decimal>, total: Decimal, mark: Decimal| {
                    limit.is_some_and(|l| l > Decimal::ZERO && total - mark >= l)
                };
                crossed(energy_limit_wh, ledger.energy_total_wh, self.energy_mark_wh)
                    || crossed(water_limit_ml, ledger.water_total_ml, self.water_mark_ml)
            }
        };
        if !fire {
            return None;
        }
        let payload = PopupPayload::from_ledger(ledger, model, &policy.read_more_url, at);
        self.queries_since_last_popup = 0;
        self.energy_mark_wh = ledger.energy_total_wh;
        self.water_mark_ml = ledger.water_total_ml;
        self.popup_open = true;
        self.popups_fired += 1;
        self.last_popup_opened_at = Some(at);
        self.open_payload = Some(payload.clone());
        Some(payload)
    }

    /// Closes the open popup. Returns false (and changes nothing) if none is
    /// open.
    pub fn on_dismiss(&mut self, at: DateTime<Utc>) -> bool {
        if !self.popup_open {
            tracing::debug!(%at, "popup dismiss with no open popup ignored");
            return false;
        }
        self.popup_open = false;
        self.open_payload = None;
        self.last_popup_closed_at = Some(at);
        true
    }
}
