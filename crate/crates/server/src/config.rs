//! Service configuration, loaded from TOML.
//!
//! Every table rejects unknown keys so a typo fails startup with the key
//! named. See `config/ecometer.example.toml` for the documented key set.

use ecometer_core::popup::{PopupPolicy, PopupTrigger, DEFAULT_LIMIT};
use ecometer_core::session::{EngineConfig, EngineConfigError};
use ecometer_core::{PenaltySchedule, Profile, QueryFilter, ResourceModel};
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const ENV_LISTEN: &str = "ECOMETER_LISTEN";
pub const ENV_STORAGE_DIR: &str = "ECOMETER_STORAGE_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Engine(#[from] EngineConfigError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceConfig {
    pub profile: Profile,
    pub read_more_url: String,
    pub resources: ResourceOverrides,
    pub score: PenaltySchedule,
    pub popup: PopupSettings,
    pub ingest: IngestSettings,
    pub server: ServerSettings,
    pub storage: StorageSettings,
}

/// Optional per-field overrides on top of the selected profile.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResourceOverrides {
    #[serde(with = "ecometer_core::decimal::option", skip_serializing_if = "Option::is_none")]
    pub energy_per_query_wh: Option<Decimal>,
    #[serde(with = "ecometer_core::decimal::option", skip_serializing_if = "Option::is_none")]
    pub water_per_query_ml: Option<Decimal>,
    #[serde(with = "ecometer_core::decimal::option", skip_serializing_if = "Option::is_none")]
    pub bulb_power_w: Option<Decimal>,
    #[serde(with = "ecometer_core::decimal::option", skip_serializing_if = "Option::is_none")]
    pub cup_volume_ml: Option<Decimal>,
    #[serde(with = "ecometer_core::decimal::option", skip_serializing_if = "Option::is_none")]
    pub vehicle_efficiency_wh_per_mile: Option<Decimal>,
    #[serde(with = "ecometer_core::decimal::option", skip_serializing_if = "Option::is_none")]
    pub bathtub_volume_l: Option<Decimal>,
    #[serde(with = "ecometer_core::decimal::option", skip_serializing_if = "Option::is_none")]
    pub hottub_volume_l: Option<Decimal>,
    #[serde(with = "ecometer_core::decimal::option", skip_serializing_if = "Option::is_none")]
    pub energy_tier_threshold_bulb_hours: Option<Decimal>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub water_tier_thresholds_l: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PopupMode {
    #[default]
    Count,
    ResourceThreshold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PopupSettings {
    pub mode: PopupMode,
    /// Queries per popup in `count` mode.
    pub limit: u32,
    /// Watt-hours per popup in `resource-threshold` mode.
    #[serde(with = "ecometer_core::decimal::option", skip_serializing_if = "Option::is_none")]
    pub energy_limit_wh: Option<Decimal>,
    /// Milliliters per popup in `resource-threshold` mode.
    #[serde(with = "ecometer_core::decimal::option", skip_serializing_if = "Option::is_none")]
    pub water_limit_ml: Option<Decimal>,
    /// Per-user `count` limits, keyed by the user id clients send.
    pub user_limits: BTreeMap<String, u32>,
}

impl Default for PopupSettings {
    fn default() -> Self {
        Self {
            mode: PopupMode::Count,
            limit: DEFAULT_LIMIT,
            energy_limit_wh: None,
            water_limit_ml: None,
            user_limits: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestSettings {
    pub api_path_prefix: String,
    pub ignore_substrings: Vec<String>,
    pub webhook: bool,
    pub idempotency_window_hours: u32,
    pub proxy: ProxySettings,
}

impl Default for IngestSettings {
    fn default() -> Self {
        let filter = QueryFilter::default();
        Self {
            api_path_prefix: filter.api_path_prefix,
            ignore_substrings: filter.ignore_substrings,
            webhook: true,
            idempotency_window_hours: 24,
            proxy: ProxySettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProxySettings {
    pub enabled: bool,
    pub listen: String,
    /// Plain-HTTP upstream the proxy forwards to, e.g. `http://127.0.0.1:9000`.
    pub upstream: String,
    /// Scheme and host the observed URL is reported under.
    pub public_base_url: String,
    /// Request header naming the user; stripped before forwarding.
    pub user_header: String,
    pub default_user: Option<String>,
}

impl Default for ProxySettings {
    fn default() -> Self {
        Self {
            enabled: false,
            listen: "127.0.0.1:8788".to_string(),
            upstream: "http://127.0.0.1:9000".to_string(),
            public_base_url: "https://chatgpt.com".to_string(),
            user_header: "x-ecometer-user".to_string(),
            default_user: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerSettings {
    pub listen: String,
    /// When set, every endpoint except `/v1/healthz` requires
    /// `Authorization: Bearer <token>`.
    pub bearer_token: Option<String>,
    /// Seconds between unsolicited pushes on the update stream.
    pub stream_tick_seconds: u64,
}

impl Default for ServerSettings {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8787".to_string(),
            bearer_token: None,
            stream_tick_seconds: 20 * 60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AliasMode {
    /// Client ids are mapped to random aliases kept in `aliases.json`.
    #[default]
    Keyfile,
    /// Client ids are already pseudonymous and are logged as given.
    Passthrough,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StorageSettings {
    pub dir: PathBuf,
    /// fsync the log after every append.
    pub fsync: bool,
    /// Logged events between state snapshots.
    pub snapshot_every: u64,
    pub alias_mode: AliasMode,
}

impl Default for StorageSettings {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("ecometer-data"),
            fsync: true,
            snapshot_every: 100,
            alias_mode: AliasMode::Keyfile,
        }
    }
}

impl StorageSettings {
    pub fn log_path(&self) -> PathBuf {
        self.dir.join("events.jsonl")
    }

    pub fn snapshot_path(&self) -> PathBuf {
        self.dir.join("snapshot.json")
    }

    pub fn keyfile_path(&self) -> PathBuf {
        self.dir.join("aliases.json")
    }

    pub fn idempotency_path(&self) -> PathBuf {
        self.dir.join("idempotency.jsonl")
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    /// Applies `ECOMETER_LISTEN` / `ECOMETER_STORAGE_DIR` when set.
    pub fn apply_env(&mut self) {
        if let Ok(listen) = std::env::var(ENV_LISTEN) {
            self.server.listen = listen;
        }
        if let Ok(dir) = std::env::var(ENV_STORAGE_DIR) {
            self.storage.dir = PathBuf::from(dir);
        }
    }

    pub fn resource_model(&self) -> ResourceModel {
        let mut m = self.profile.model();
        let o = &self.resources;
        let set = |slot: &mut Decimal, v: Option<Decimal>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut m.energy_per_query_wh, o.energy_per_query_wh);
        set(&mut m.water_per_query_ml, o.water_per_query_ml);
        set(&mut m.bulb_power_w, o.bulb_power_w);
        set(&mut m.cup_volume_ml, o.cup_volume_ml);
        set(&mut m.vehicle_efficiency_wh_per_mile, o.vehicle_efficiency_wh_per_mile);
        set(&mut m.bathtub_volume_l, o.bathtub_volume_l);
        set(&mut m.hottub_volume_l, o.hottub_volume_l);
        set(&mut m.energy_tier_threshold_bulb_hours, o.energy_tier_threshold_bulb_hours);
        if let Some((low, high)) = o.water_tier_thresholds_l {
            let to_dec = |v: f64| v.to_string().parse::<Decimal>().unwrap_or(Decimal::ZERO);
            m.water_tier_thresholds_l = (to_dec(low), to_dec(high));
        }
        m
    }

    pub fn popup_trigger(&self, limit_override: Option<u32>) -> PopupTrigger {
        match self.popup.mode {
            PopupMode::Count => PopupTrigger::Count { limit: limit_override.unwrap_or(self.popup.limit) },
            PopupMode::ResourceThreshold => PopupTrigger::ResourceThreshold {
                energy_limit_wh: self.popup.energy_limit_wh,
                water_limit_ml: self.popup.water_limit_ml,
            },
        }
    }

    pub fn engine(&self) -> EngineConfig {
        EngineConfig {
            model: self.resource_model(),
            schedule: self.score.clone(),
            popup: PopupPolicy {
                trigger: self.popup_trigger(None),
                read_more_url: self.read_more_url.clone(),
            },
        }
    }

    pub fn query_filter(&self) -> QueryFilter {
        QueryFilter {
            api_path_prefix: self.ingest.api_path_prefix.clone(),
            ignore_substrings: self.ingest.ignore_substrings.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.engine().validate()?;
        for (user, limit) in &self.popup.user_limits {
            if *limit == 0 {
                return Err(ConfigError::Invalid(format!("popup.user_limits.{user} must be at least 1")));
            }
        }
        if self.storage.snapshot_every == 0 {
            return Err(ConfigError::Invalid("storage.snapshot_every must be at least 1".into()));
        }
        if self.server.stream_tick_seconds == 0 {
            return Err(ConfigError::Invalid("server.stream_tick_seconds must be at least 1".into()));
        }
        if !self.ingest.api_path_prefix.starts_with('/') {
            return Err(ConfigError::Invalid("ingest.api_path_prefix must start with '/'".into()));
        }
        if self.ingest.proxy.enabled && !self.ingest.proxy.upstream.starts_with("http://") {
            return Err(ConfigError::Invalid("ingest.proxy.upstream must be an http:// URL".into()));
        }
        Ok(())
    }

    /// The config as served on `/v1/config`, with secrets removed.
    pub fn redacted(&self) -> Self {
        let mut c = self.clone();
        if c.server.bearer_token.is_some() {
            c.server.bearer_token = Some("<redacted>".into());
        }
        c
    }
}
