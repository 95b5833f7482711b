//! Human verification: concept-wise sampling, leased tasks, expert review
//! packages and the metrics derived from their outcomes.

mod board;
mod clock;
pub mod http;
mod metrics;
mod sampling;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::region::{QaPair, QaStatus};

pub use board::{Board, BoardConfig, BoardSnapshot};
pub use clock::{Clock, ManualClock, SystemClock};
pub use metrics::{verification_metrics, MetricsReport, VerificationMetrics, VqaFractions};
pub use sampling::{sample_count, sample_for_verification, Sample, SamplingLedger, SamplingParams};

/// Answer stored for a question marked unanswerable.
pub const UNANSWERABLE_ANSWER: &str = "This question is unanswerable according to the image";
/// Answer stored for a question whose region tag is wrong.
pub const WRONG_SEMANTIC_ANSWER: &str = "The object in this region is incorrectly labeled";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifyError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("forbidden: {0}")]
    Forbidden(String),
    #[error("lease expired: {0}")]
    Expired(String),
    #[error("invalid: {0}")]
    Invalid(String),
    #[error("missing or unknown bearer token")]
    Unauthorized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    TagFilter,
    VqaCheck,
    /// Second stage: a human writes the right answer after `wrong_answer`.
    VqaCorrect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Pending,
    Leased,
    Submitted,
    Reviewed,
    Requeued,
}

impl TaskState {
    /// Edges of the task lifecycle.
    pub fn can_transition(self, next: TaskState) -> bool {
        use TaskState::*;
        matches!(
            (self, next),
            (Pending, Leased)
                | (Requeued, Leased)
                | (Leased, Submitted)
                | (Leased, Pending)
                | (Submitted, Reviewed)
                | (Submitted, Requeued)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VqaOutcome {
    Correct,
    WrongAnswer,
    Unanswerable,
    WrongSemantic,
}

impl VqaOutcome {
    pub fn status(self) -> QaStatus {
        match self {
            VqaOutcome::Correct => QaStatus::Correct,
            VqaOutcome::WrongAnswer => QaStatus::WrongAnswer,
            VqaOutcome::Unanswerable => QaStatus::Unanswerable,
            VqaOutcome::WrongSemantic => QaStatus::WrongSemantic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskPayload {
    /// Top-5 candidates shown for filtering.
    TagFilter { candidates: Vec<String> },
    VqaCheck { qa_index: usize, qa: QaPair },
    VqaCorrect { qa_index: usize, qa: QaPair },
}

impl TaskPayload {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskPayload::TagFilter { .. } => TaskKind::TagFilter,
            TaskPayload::VqaCheck { .. } => TaskKind::VqaCheck,
            TaskPayload::VqaCorrect { .. } => TaskKind::VqaCorrect,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TaskResult {
    TagFilter {
        selected: Vec<String>,
    },
    VqaCheck {
        outcome: VqaOutcome,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        correction: Option<String>,
    },
    VqaCorrect {
        answer: String,
    },
}

impl TaskResult {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskResult::TagFilter { .. } => TaskKind::TagFilter,
            TaskResult::VqaCheck { .. } => TaskKind::VqaCheck,
            TaskResult::VqaCorrect { .. } => TaskKind::VqaCorrect,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lease {
    pub worker_id: String,
    pub expires_at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationTask {
    pub task_id: String,
    pub region_id: String,
    pub image_id: String,
    /// Concept the region was sampled for.
    pub concept: String,
    #[serde(flatten)]
    pub payload: TaskPayload,
    pub state: TaskState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lease: Option<Lease>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<TaskResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub submitted_by: Option<String>,
    /// Workers whose work on this task failed review.
    #[serde(default)]
    pub excluded_workers: Vec<String>,
}

impl VerificationTask {
    pub fn kind(&self) -> TaskKind {
        self.payload.kind()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PackageState {
    Open,
    Passed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewPackage {
    pub package_id: String,
    pub task_ids: Vec<String>,
    #[serde(default)]
    pub expert_id: Option<String>,
    #[serde(default)]
    pub accuracy: Option<f64>,
    #[serde(default)]
    pub confirmed: Option<usize>,
    pub state: PackageState,
}
