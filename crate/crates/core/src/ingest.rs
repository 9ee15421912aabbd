//! Query detection from HTTP transaction metadata.
//!
//! A transaction counts as a billable query when it is a successful `POST`
//! to the conversation endpoint whose URL does not mention one of the
//! ignored substrings. Only method, URL and status are consulted; request
//! and response bodies are never part of a record.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use url::Url;

/// One completed request/response exchange, as observed by the proxy or
/// reported to the webhook.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpTransactionRecord {
    pub user_id: String,
    pub method: String,
    pub url: String,
    pub status: u16,
    #[serde(with = "crate::timefmt")]
    pub observed_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySource {
    Proxy,
    Webhook,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryEvent {
    pub user_id: String,
    #[serde(with = "crate::timefmt")]
    pub occurred_at: DateTime<Utc>,
    pub source: QuerySource,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QueryFilter {
    /// URL path that identifies the chat endpoint; matches when the path
    /// equals it or starts with it.
    pub api_path_prefix: String,
    /// Case-sensitive substrings that disqualify a URL anywhere in its text.
    pub ignore_substrings: Vec<String>,
}

impl Default for QueryFilter {
    fn default() -> Self {
        Self {
            api_path_prefix: "/backend-api/conversation".to_string(),
            ignore_substrings: vec!["init".to_string(), "implicit".to_string()],
        }
    }
}

impl QueryFilter {
    pub fn is_query(&self, method: &str, url: &str, status: u16) -> bool {
        if method != "POST" || status != 200 {
            return false;
        }
        if self.ignore_substrings.iter().any(|s| url.contains(s.as_str())) {
            return false;
        }
        match Url::parse(url) {
            Ok(parsed) => parsed.path().starts_with(&self.api_path_prefix),
            Err(err) => {
                tracing::debug!(%url, %err, "unparseable transaction URL treated as non-query");
                false
            }
        }
    }

    pub fn classify(&self, tx: &HttpTransactionRecord, source: QuerySource) -> Option<QueryEvent> {
        self.is_query(&tx.method, &tx.url, tx.status).then(|| QueryEvent {
            user_id: tx.user_id.clone(),
            occurred_at: tx.observed_at,
            source,
        })
    }
}
