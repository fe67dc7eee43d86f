//! Request and response bodies. `openapi.yaml` at the crate root documents
//! the same shapes for client authors.

use nestpref::pool::PoolRecord;
use nestpref::{SessionConfig, StopReason};
use serde::{Deserialize, Serialize};

/// `POST /sessions`. Exactly one of `instances` and `csv` must be present.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instances: Option<Vec<PoolRecord>>,
    /// Pool CSV with `id`, `nest`, optional `label` and numeric feature columns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<String>,
    /// Names for the JSON instances' features; ignored for CSV.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub feature_names: Vec<String>,
    #[serde(default)]
    pub config: SessionConfig,
}

/// `POST /sessions/{id}/answer`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerRequest {
    pub winner_id: u64,
    pub query_token: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    AwaitingAnswer,
    Fitting,
    Converged,
    Exhausted,
}

impl Status {
    pub fn finished(reason: StopReason) -> Self {
        match reason {
            StopReason::Budget | StopReason::PoolExhausted => Self::Exhausted,
            StopReason::BelowThreshold | StopReason::PredictedBest { .. } => Self::Converged,
        }
    }
}

/// An instance as the client sees it, with its external id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceView {
    pub id: u64,
    pub nest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Values in the order of the session's `feature_names`.
    pub features: Vec<f64>,
}

impl From<&PoolRecord> for InstanceView {
    fn from(r: &PoolRecord) -> Self {
        Self { id: r.id, nest: r.nest.clone(), label: r.label.clone(), features: r.features.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryPhase {
    Initialization,
    Active,
}

/// The outstanding comparison. For active queries `a` is the candidate and
/// `b` the current best.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryView {
    pub token: String,
    pub phase: QueryPhase,
    pub a: InstanceView,
    pub b: InstanceView,
}

/// Returned by session creation and by every answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub session_id: String,
    pub status: Status,
    pub query: Option<QueryView>,
    /// Answers recorded so far, initialization included.
    pub queries_answered: usize,
    /// Active queries answered; this is what the budget counts.
    pub active_queries: usize,
    pub budget: usize,
    pub best: Option<InstanceView>,
    pub stop_reason: Option<StopReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub seq: usize,
    pub phase: QueryPhase,
    pub a: u64,
    pub b: u64,
    pub winner: u64,
    pub at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub id: u64,
    pub mean: f64,
    pub variance: f64,
}

/// `GET /sessions/{id}/state`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateView {
    pub session_id: String,
    pub status: Status,
    pub created_at_ms: u64,
    pub updated_at_ms: u64,
    pub config: SessionConfig,
    pub feature_names: Vec<String>,
    pub nest_names: Vec<String>,
    pub instance_count: usize,
    pub queries_answered: usize,
    pub active_queries: usize,
    pub budget: usize,
    pub query: Option<QueryView>,
    pub best: Option<InstanceView>,
    /// Predictive mean and variance of the labeled instances; absent until
    /// the first surrogate fit.
    pub estimates: Option<Vec<Estimate>>,
    pub history: Vec<HistoryEntry>,
    pub stop_reason: Option<StopReason>,
    /// Set when the last fit failed. Resubmitting the last answer retries it.
    pub last_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stop_reasons_map_to_terminal_statuses() {
        assert_eq!(Status::finished(StopReason::Budget), Status::Exhausted);
        assert_eq!(Status::finished(StopReason::PoolExhausted), Status::Exhausted);
        assert_eq!(Status::finished(StopReason::BelowThreshold), Status::Converged);
        assert_eq!(Status::finished(StopReason::PredictedBest { candidate: 3 }), Status::Converged);
        assert_eq!(serde_json::to_string(&Status::AwaitingAnswer).unwrap(), "\"awaiting_answer\"");
    }

    #[test]
    fn create_request_defaults_config() {
        let req: CreateRequest = serde_json::from_str(r#"{"csv":"id,nest,x\n"}"#).unwrap();
        assert_eq!(req.config, SessionConfig::default());
        assert!(serde_json::from_str::<CreateRequest>(r#"{"csv":"","budget":3}"#).is_err());
    }
}
