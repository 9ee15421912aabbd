//! Per-query resource constants, cumulative usage accounting and conversion
//! of totals into everyday units (lightbulb-hours, Tesla-miles, cups,
//! bathtubs, hot tubs).
//!
//! All arithmetic is exact decimal so that the rendered strings do not
//! depend on float formatting.

use chrono::{DateTime, Utc};
use rust_decimal::{Decimal, RoundingStrategy};
use rust_decimal::prelude::ToPrimitive;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

const THOUSAND: Decimal = Decimal::from_parts(1000, 0, 0, false, 0);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("resource constant `{0}` must be strictly positive")]
    NotPositive(&'static str),
    #[error("water tier thresholds must be strictly increasing")]
    TiersNotIncreasing,
    #[error("unknown resource profile `{0}` (expected paper-text or paper-figures)")]
    UnknownProfile(String),
}

/// Named presets for the per-query constants.
///
/// `PaperText` uses the published per-query averages (2.9 Wh, 16.9 mL).
/// `PaperFigures` pins water at 17.0 mL, the value the rendered panel and
/// popup screenshots are consistent with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    #[default]
    PaperText,
    PaperFigures,
}

impl Profile {
    pub fn as_str(self) -> &'static str {
        match self {
            Profile::PaperText => "paper-text",
            Profile::PaperFigures => "paper-figures",
        }
    }

    pub fn model(self) -> ResourceModel {
        let mut model = ResourceModel::default();
        if self == Profile::PaperFigures {
            model.water_per_query_ml = Decimal::new(170, 1);
        }
        model
    }
}

impl FromStr for Profile {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper-text" => Ok(Profile::PaperText),
            "paper-figures" => Ok(Profile::PaperFigures),
            other => Err(ModelError::UnknownProfile(other.to_string())),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-query footprint and the anchors used for human-scale conversion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceModel {
    /// Watt-hours consumed per query.
    #[serde(with = "crate::decimal")]
    pub energy_per_query_wh: Decimal,
    /// Milliliters of water consumed per query.
    #[serde(with = "crate::decimal")]
    pub water_per_query_ml: Decimal,
    /// Watts drawn by the reference lightbulb.
    #[serde(with = "crate::decimal")]
    pub bulb_power_w: Decimal,
    #[serde(with = "crate::decimal")]
    pub cup_volume_ml: Decimal,
    /// Watt-hours per mile for the reference electric vehicle.
    #[serde(with = "crate::decimal")]
    pub vehicle_efficiency_wh_per_mile: Decimal,
    #[serde(with = "crate::decimal")]
    pub bathtub_volume_l: Decimal,
    #[serde(with = "crate::decimal")]
    pub hottub_volume_l: Decimal,
    /// Lightbulb-hours at which the energy reading switches to vehicle-miles.
    #[serde(with = "crate::decimal")]
    pub energy_tier_threshold_bulb_hours: Decimal,
    /// Liters at which the water reading switches to bathtubs, then hot tubs.
    #[serde(with = "crate::decimal::pair")]
    pub water_tier_thresholds_l: (Decimal, Decimal),
}

impl Default for ResourceModel {
    fn default() -> Self {
        Self {
            energy_per_query_wh: Decimal::new(29, 1),
            water_per_query_ml: Decimal::new(169, 1),
            bulb_power_w: Decimal::new(10, 0),
            cup_volume_ml: Decimal::new(240, 0),
            vehicle_efficiency_wh_per_mile: Decimal::new(250, 0),
            bathtub_volume_l: Decimal::new(150, 0),
            hottub_volume_l: Decimal::new(1000, 0),
            energy_tier_threshold_bulb_hours: Decimal::new(100, 0),
            water_tier_thresholds_l: (Decimal::new(150, 0), Decimal::new(1000, 0)),
        }
    }
}

impl ResourceModel {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fields = [
            ("energy_per_query_wh", self.energy_per_query_wh),
            ("water_per_query_ml", self.water_per_query_ml),
            ("bulb_power_w", self.bulb_power_w),
            ("cup_volume_ml", self.cup_volume_ml),
            ("vehicle_efficiency_wh_per_mile", self.vehicle_efficiency_wh_per_mile),
            ("bathtub_volume_l", self.bathtub_volume_l),
            ("hottub_volume_l", self.hottub_volume_l),
            ("energy_tier_threshold_bulb_hours", self.energy_tier_threshold_bulb_hours),
            ("water_tier_thresholds_l", self.water_tier_thresholds_l.0),
            ("water_tier_thresholds_l", self.water_tier_thresholds_l.1),
        ];
        for (name, value) in fields {
            if value <= Decimal::ZERO {
                return Err(ModelError::NotPositive(name));
            }
        }
        if self.water_tier_thresholds_l.0 >= self.water_tier_thresholds_l.1 {
            return Err(ModelError::TiersNotIncreasing);
        }
        Ok(())
    }

    pub fn energy_for(&self, queries: u64) -> Decimal {
        self.energy_per_query_wh * Decimal::from(queries)
    }

    pub fn water_for(&self, queries: u64) -> Decimal {
        self.water_per_query_ml * Decimal::from(queries)
    }

    /// Energy reading: lightbulb-hours until the tier threshold, then
    /// vehicle-miles.
    pub fn to_human_energy(&self, energy_wh: Decimal) -> HumanScaleReading {
        let bulb_hours = energy_wh / self.bulb_power_w;
        if bulb_hours < self.energy_tier_threshold_bulb_hours {
            HumanScaleReading::new(bulb_hours, HumanUnit::LightbulbHours)
        } else {
            HumanScaleReading::new(
                energy_wh / self.vehicle_efficiency_wh_per_mile,
                HumanUnit::VehicleMiles,
            )
        }
    }

    /// Water reading: cups below the first threshold, bathtubs between the
    /// two, hot tubs above the second.
    pub fn to_human_water(&self, water_ml: Decimal) -> HumanScaleReading {
        let liters = water_ml / THOUSAND;
        let (low, high) = self.water_tier_thresholds_l;
        if liters < low {
            HumanScaleReading::new(water_ml / self.cup_volume_ml, HumanUnit::Cups)
        } else if liters < high {
            HumanScaleReading::new(liters / self.bathtub_volume_l, HumanUnit::Bathtubs)
        } else {
            HumanScaleReading::new(liters / self.hottub_volume_l, HumanUnit::HotTubs)
        }
    }
}

/// Renders a non-negative value with exactly three decimals, rounding half
/// away from zero.
pub fn format_metric(value: Decimal) -> String {
    let mut rounded = value.round_dp_with_strategy(3, RoundingStrategy::MidpointAwayFromZero);
    rounded.rescale(3);
    if rounded.is_zero() {
        rounded.set_sign_positive(true);
    }
    rounded.to_string()
}

/// `energy_wh` expressed in kWh, three decimals.
pub fn format_kwh(energy_wh: Decimal) -> String {
    format_metric(energy_wh / THOUSAND)
}

/// `water_ml` expressed in liters, three decimals.
pub fn format_liters(water_ml: Decimal) -> String {
    format_metric(water_ml / THOUSAND)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HumanUnit {
    LightbulbHours,
    VehicleMiles,
    Cups,
    Bathtubs,
    HotTubs,
}

impl HumanUnit {
    pub fn as_str(self) -> &'static str {
        match self {
            HumanUnit::LightbulbHours => "lightbulb-hours",
            HumanUnit::VehicleMiles => "vehicle-miles",
            HumanUnit::Cups => "cups",
            HumanUnit::Bathtubs => "bathtubs",
            HumanUnit::HotTubs => "hot-tubs",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanScaleReading {
    #[serde(with = "crate::decimal")]
    pub quantity: Decimal,
    pub unit_label: HumanUnit,
    pub pictogram_count: u64,
    pub formatted: String,
}

impl HumanScaleReading {
    pub fn new(quantity: Decimal, unit_label: HumanUnit) -> Self {
        let pictogram_count = quantity.floor().to_u64().unwrap_or(0);
        Self {
            formatted: format_metric(quantity),
            quantity,
            unit_label,
            pictogram_count,
        }
    }

    /// The verb phrase used in panel and popup sentences, e.g.
    /// `power a lightbulb for 14.500 hours`.
    pub fn phrase(&self) -> String {
        let q = &self.formatted;
        match self.unit_label {
            HumanUnit::LightbulbHours => format!("power a lightbulb for {q} hours"),
            HumanUnit::VehicleMiles => format!("drive a Tesla for {q} miles"),
            HumanUnit::Cups => format!("fill {q} cups"),
            HumanUnit::Bathtubs => format!("fill {q} bathtubs"),
            HumanUnit::HotTubs => format!("fill {q} hot tubs"),
        }
    }

    fn resource(&self) -> &'static str {
        match self.unit_label {
            HumanUnit::LightbulbHours | HumanUnit::VehicleMiles => "energy",
            _ => "water",
        }
    }

    /// Side panel sentence.
    pub fn panel_sentence(&self) -> String {
        format!("You've used enough {} to {}!", self.resource(), self.phrase())
    }

    /// Popup sentence.
    pub fn popup_sentence(&self) -> String {
        format!("That's enough {} to {}!", self.resource(), self.phrase())
    }
}

/// Running totals for one user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageLedger {
    pub user_id: String,
    pub query_count: u64,
    #[serde(with = "crate::decimal")]
    pub energy_total_wh: Decimal,
    #[serde(with = "crate::decimal")]
    pub water_total_ml: Decimal,
    #[serde(with = "crate::timefmt::option", default)]
    pub first_query_at: Option<DateTime<Utc>>,
    #[serde(with = "crate::timefmt::option", default)]
    pub last_query_at: Option<DateTime<Utc>>,
}

impl UsageLedger {
    pub fn new(user_id: impl Into<String>) -> Self {
        Self {
            user_id: user_id.into(),
            query_count: 0,
            energy_total_wh: Decimal::ZERO,
            water_total_ml: Decimal::ZERO,
            first_query_at: None,
            last_query_at: None,
        }
    }

    /// Counts one query at `at` and advances the totals by the model's
    /// per-query constants.
    pub fn record_query(&mut self, model: &ResourceModel, at: DateTime<Utc>) {
        self.query_count += 1;
        self.energy_total_wh += model.energy_per_query_wh;
        self.water_total_ml += model.water_per_query_ml;
        self.first_query_at.get_or_insert(at);
        self.last_query_at = Some(match self.last_query_at {
            Some(prev) if prev > at => prev,
            _ => at,
        });
    }

    pub fn human_energy(&self, model: &ResourceModel) -> HumanScaleReading {
        model.to_human_energy(self.energy_total_wh)
    }

    pub fn human_water(&self, model: &ResourceModel) -> HumanScaleReading {
        model.to_human_water(self.water_total_ml)
    }
}
