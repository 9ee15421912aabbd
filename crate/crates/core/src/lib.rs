//! Domain logic for metering LLM chat usage: per-query footprint accounting,
//! the Eco Score state machine, query detection, the limit popup policy, the
//! append-only usage log and the conversation-export audit.
//!
//! Everything in this crate is a pure value transformation except
//! [`event_log::EventLog`] and [`event_log::AliasBook`], which own files.

pub mod decimal;
pub mod event_log;
pub mod footprint;
pub mod history;
pub mod ingest;
pub mod popup;
pub mod replay;
pub mod score;
pub mod session;
pub mod timefmt;

pub use footprint::{HumanScaleReading, HumanUnit, Profile, ResourceModel, UsageLedger};
pub use ingest::{HttpTransactionRecord, QueryEvent, QueryFilter, QuerySource};
pub use popup::{PopupPayload, PopupPolicy, PopupPolicyState, PopupTrigger};
pub use score::{EcoScoreState, PenaltySchedule, PenaltyTier};
pub use session::{DisplayBundle, EngineConfig, UserSession};
