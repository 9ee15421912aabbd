//! Eco Score: a 0..=100 grade that loses points on every query, more for
//! shorter pauses since the previous query, and regenerates with wall-clock
//! time.
//!
//! Scores move in whole points (both penalties and regeneration are
//! integral), so the state holds an exact integer. Regeneration keeps the
//! unspent part of the current period as a remainder so that accruing over
//! one interval or any partition of it gives the same result.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_SCORE: u32 = 100;

const MS_PER_MINUTE: i64 = 60_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("penalty schedule needs at least one tier")]
    Empty,
    #[error("tier min pauses must be strictly decreasing")]
    PausesNotDecreasing,
    #[error("tier penalties must be strictly increasing as pauses shrink")]
    PenaltiesNotIncreasing,
    #[error("last tier must start at a pause of 0 minutes so every pause is covered")]
    Uncovered,
    #[error("regeneration period must be at least one minute")]
    ZeroPeriod,
    #[error("initial score {0} exceeds {MAX_SCORE}")]
    InitialScore(u32),
}

/// Time ran backwards relative to the state's clock.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("event at {at} precedes last accounted instant {last}")]
pub struct ClockSkew {
    pub at: DateTime<Utc>,
    pub last: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltyTier {
    pub min_pause_minutes: u32,
    pub penalty: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PenaltySchedule {
    /// Ordered from the longest pause to the shortest.
    pub tiers: Vec<PenaltyTier>,
    pub regen_period_minutes: u32,
    pub regen_points: u32,
    pub initial_score: u32,
}

impl Default for PenaltySchedule {
    fn default() -> Self {
        let tiers = [(60, 7), (30, 8), (15, 9), (7, 10), (3, 11), (1, 12), (0, 13)]
            .into_iter()
            .map(|(min_pause_minutes, penalty)| PenaltyTier { min_pause_minutes, penalty })
            .collect();
        Self {
            tiers,
            regen_period_minutes: 20,
            regen_points: 1,
            initial_score: MAX_SCORE,
        }
    }
}

impl PenaltySchedule {
    pub fn validate(&self) -> Result<(), ScheduleError> {
        let last = self.tiers.last().ok_or(ScheduleError::Empty)?;
        for pair in self.tiers.windows(2) {
            if pair[0].min_pause_minutes <= pair[1].min_pause_minutes {
                return Err(ScheduleError::PausesNotDecreasing);
            }
            if pair[0].penalty >= pair[1].penalty {
                return Err(ScheduleError::PenaltiesNotIncreasing);
            }
        }
        if last.min_pause_minutes != 0 {
            return Err(ScheduleError::Uncovered);
        }
        if self.regen_period_minutes == 0 {
            return Err(ScheduleError::ZeroPeriod);
        }
        if self.initial_score > MAX_SCORE {
            return Err(ScheduleError::InitialScore(self.initial_score));
        }
        Ok(())
    }

    pub fn regen_period_ms(&self) -> i64 {
        i64::from(self.regen_period_minutes) * MS_PER_MINUTE
    }

    /// Penalty for a pause since the previous query. `None` (no previous
    /// query) is charged like the longest-pause tier.
    pub fn penalty_for(&self, pause_ms: Option<i64>) -> u32 {
        let Some(pause_ms) = pause_ms else {
            return self.tiers.first().map_or(0, |t| t.penalty);
        };
        self.tiers
            .iter()
            .find(|t| pause_ms >= i64::from(t.min_pause_minutes) * MS_PER_MINUTE)
            .or(self.tiers.last())
            .map_or(0, |t| t.penalty)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EcoScoreState {
    pub score: u32,
    #[serde(with = "crate::timefmt::option", default)]
    pub last_query_at: Option<DateTime<Utc>>,
    #[serde(with = "crate::timefmt")]
    pub last_accrual_at: DateTime<Utc>,
    /// Milliseconds accumulated toward the next regeneration step.
    pub regen_remainder_ms: i64,
}

/// What a single query did to the score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryScore {
    /// Score after accrual, immediately before the penalty.
    pub before: u32,
    pub after: u32,
    pub penalty: u32,
    pub pause_ms: Option<i64>,
}

impl EcoScoreState {
    pub fn new(schedule: &PenaltySchedule, at: DateTime<Utc>) -> Self {
        Self {
            score: schedule.initial_score.min(MAX_SCORE),
            last_query_at: None,
            last_accrual_at: at,
            regen_remainder_ms: 0,
        }
    }

    /// Regenerates up to `now`: one step of `regen_points` per full period
    /// elapsed (carrying the remainder), saturating at [`MAX_SCORE`].
    pub fn accrue(&self, schedule: &PenaltySchedule, now: DateTime<Utc>) -> Result<Self, ClockSkew> {
        let elapsed = now.timestamp_millis() - self.last_accrual_at.timestamp_millis();
        if elapsed < 0 {
            return Err(ClockSkew { at: now, last: self.last_accrual_at });
        }
        let period = schedule.regen_period_ms();
        let total = elapsed + self.regen_remainder_ms;
        let steps = (total / period) as u64;
        let gained = steps.saturating_mul(u64::from(schedule.regen_points));
        let score = (u64::from(self.score).saturating_add(gained)).min(u64::from(MAX_SCORE)) as u32;
        Ok(Self {
            score,
            last_query_at: self.last_query_at,
            last_accrual_at: now,
            regen_remainder_ms: total % period,
        })
    }

    /// Charges the pause-tier penalty for a query at `query_at`, clamping at 0.
    /// Expects the state to be accrued up to `query_at`.
    pub fn apply_query(&self, schedule: &PenaltySchedule, query_at: DateTime<Utc>) -> Self {
        let pause_ms = self.pause_before(query_at);
        let penalty = schedule.penalty_for(pause_ms);
        Self {
            score: self.score.saturating_sub(penalty),
            last_query_at: Some(query_at),
            last_accrual_at: self.last_accrual_at,
            regen_remainder_ms: self.regen_remainder_ms,
        }
    }

    /// Accrues to `query_at`, then applies the query penalty.
    pub fn on_query(
        &self,
        schedule: &PenaltySchedule,
        query_at: DateTime<Utc>,
    ) -> Result<(Self, QueryScore), ClockSkew> {
        let accrued = self.accrue(schedule, query_at)?;
        let pause_ms = accrued.pause_before(query_at);
        let next = accrued.apply_query(schedule, query_at);
        let effect = QueryScore {
            before: accrued.score,
            after: next.score,
            penalty: schedule.penalty_for(pause_ms),
            pause_ms,
        };
        Ok((next, effect))
    }

    fn pause_before(&self, query_at: DateTime<Utc>) -> Option<i64> {
        self.last_query_at
            .map(|prev| (query_at.timestamp_millis() - prev.timestamp_millis()).max(0))
    }
}

/// Which of the five panel illustrations a score maps to: 1 for 80..=100
/// down to 5 for 0..20.
pub fn image_bracket(score: u32) -> u8 {
    match score {
        80.. => 1,
        60..=79 => 2,
        40..=59 => 3,
        20..=39 => 4,
        _ => 5,
    }
}
