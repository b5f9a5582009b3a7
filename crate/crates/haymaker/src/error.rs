//! Crate-wide error type.

use std::path::PathBuf;

/// One failed delivery attempt inside the gateway's retry loop.
#[derive(Debug, Clone)]
pub struct AttemptFailure {
    pub attempt: u32,
    pub reason: String,
}

impl std::fmt::Display for AttemptFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "attempt {}: {}", self.attempt, self.reason)
    }
}

fn fmt_trace(trace: &[AttemptFailure]) -> String {
    trace
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("goal text is blank")]
    EmptyGoal,

    #[error("passage generation failed after {attempts} attempts: {last_reason}")]
    GenerationFailed { attempts: u32, last_reason: String },

    #[error("goal leakage persisted across {attempts} regeneration attempts for behavior {behavior_id}")]
    LeakageUnresolvable { behavior_id: String, attempts: u32 },

    #[error("invalid goal position: {0}")]
    InvalidPosition(String),

    #[error("haystack has fewer than two passages; no interior split point exists")]
    UnsplittableHaystack,

    #[error("haystack {haystack_id} was generated for behavior {haystack_behavior}, not {requested}")]
    HaystackMismatch {
        haystack_id: String,
        haystack_behavior: String,
        requested: String,
    },

    #[error("backend exhausted retries ({})", fmt_trace(.trace))]
    Backend { trace: Vec<AttemptFailure> },

    #[error("authentication failed: {reason}")]
    Auth { reason: String },

    #[error("request timed out on every attempt ({})", fmt_trace(.trace))]
    Timeout { trace: Vec<AttemptFailure> },

    #[error("judge output is unparseable: {raw:?}")]
    JudgeUnparseable { raw: String },

    #[error("no records for condition {0}")]
    EmptyCondition(String),

    #[error("success profile is for context length {profile_length}, not {requested_length}")]
    ProfileMismatch {
        profile_length: u64,
        requested_length: u64,
    },

    #[error("profiles disagree on {field}: {left} vs {right}")]
    InconsistentProfiles {
        field: &'static str,
        left: String,
        right: String,
    },

    #[error("parse error in {path} at {location}: {message}")]
    Parse {
        path: String,
        location: String,
        message: String,
    },

    #[error("duplicate behavior id {0:?}")]
    DuplicateId(String),

    #[error("missing inputs: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingInputs(Vec<PathBuf>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("live endpoints are disabled; pass --live to allow non-mock endpoint {0}")]
    LiveRequired(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
