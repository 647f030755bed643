//! Bag-of-tasks master/worker execution.
//!
//! The master owns a single [`Scheduler`] state machine. Network sessions and
//! timers feed it commands one at a time; it never interleaves two mutations.
//! Workers register over TCP, receive `ASSIGN` frames for free slots, report
//! `RESULT` frames, and heartbeat in between. A worker that drops its
//! connection or misses enough heartbeats is declared dead and its in-flight
//! tasks are queued again.

pub mod client;
pub mod master;
pub mod state;
pub mod wire;
pub mod worker;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::classifier::TrainConfig;
use crate::error::{Error, Result};

pub use client::MasterClient;
pub use master::{Master, MasterConfig, MasterHandle};
pub use state::{Scheduler, SchedulerConfig};
pub use worker::{run_worker, spawn_worker, ExecOutcome, TaskExecutor, WorkerConfig, WorkerHandle};

/// Upper bound on object keys per task.
pub const MAX_TASK_KEYS: usize = 1000;
pub const DEFAULT_BATCH_SIZE: usize = 1000;
pub const DEFAULT_MASTER_PORT: u16 = 7070;
pub const DEFAULT_HTTP_PORT: u16 = 8080;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Process,
    Train,
    ExtractStub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: Uuid,
    pub kind: TaskKind,
    pub keys: Vec<String>,
    pub submitted_at: DateTime<Utc>,
    pub attempt: u32,
    /// Model used by `process` tasks; fixed per job so every batch sees the same model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, keys: Vec<String>) -> TaskSpec {
        TaskSpec {
            task_id: Uuid::new_v4(),
            kind,
            keys,
            submitted_at: Utc::now(),
            attempt: 1,
            model_key: None,
            train: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.keys.len() > MAX_TASK_KEYS {
            return Err(Error::validation(format!(
                "task {} has {} keys, limit is {MAX_TASK_KEYS}",
                self.task_id,
                self.keys.len()
            )));
        }
        if self.attempt == 0 {
            return Err(Error::validation("task attempt starts at 1"));
        }
        match self.kind {
            TaskKind::Process | TaskKind::ExtractStub if self.keys.is_empty() => Err(Error::validation(format!(
                "{:?} task {} has no keys",
                self.kind, self.task_id
            ))),
            TaskKind::Train if self.keys.len() != 1 => {
                Err(Error::validation("train task takes exactly one training-data key"))
            }
            _ => Ok(()),
        }
    }
}

/// Splits `keys` into order-preserving `process` tasks of at most
/// `batch_size` keys.
///
/// # Panics
///
/// If `batch_size` is 0 or above [`MAX_TASK_KEYS`].
pub fn make_batches(keys: &[String], batch_size: usize) -> Vec<TaskSpec> {
    assert!(
        (1..=MAX_TASK_KEYS).contains(&batch_size),
        "batch size must be within 1..={MAX_TASK_KEYS}"
    );
    keys.chunks(batch_size)
        .map(|chunk| TaskSpec::new(TaskKind::Process, chunk.to_vec()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyOutcome {
    Ok,
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyResult {
    pub key: String,
    pub outcome: KeyOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl KeyResult {
    pub fn ok(key: impl Into<String>) -> KeyResult {
        KeyResult {
            key: key.into(),
            outcome: KeyOutcome::Ok,
            reason: None,
        }
    }

    pub fn skipped(key: impl Into<String>, reason: impl Into<String>) -> KeyResult {
        KeyResult {
            key: key.into(),
            outcome: KeyOutcome::Skipped,
            reason: Some(reason.into()),
        }
    }

    pub fn failed(key: impl Into<String>, reason: impl Into<String>) -> KeyResult {
        KeyResult {
            key: key.into(),
            outcome: KeyOutcome::Failed,
            reason: Some(reason.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: Uuid,
    pub per_key: Vec<KeyResult>,
    pub elapsed_ms: u64,
    pub worker_id: Uuid,
    /// Set when the task as a whole could not run; the task is retried.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Task-specific output, e.g. the model key chosen by a `train` task.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkerState {
    Idle,
    Busy,
    Dead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerInfo {
    pub worker_id: Uuid,
    pub address: String,
    pub slots: u32,
    pub last_heartbeat: DateTime<Utc>,
    pub state: WorkerState,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KeyTally {
    pub ok: u64,
    pub skipped: u64,
    pub failed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSummary {
    pub job_id: Uuid,
    pub total_tasks: u64,
    pub completed: u64,
    pub failed_permanently: u64,
    /// Submit to completion (or to now, while running), measured at the master.
    pub wall_time_ms: f64,
    pub done: bool,
    /// Tasks put back in the queue after a worker failure or task error.
    pub rescheduled: u64,
    pub keys: KeyTally,
    /// Outputs of completed tasks, in completion order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub outputs: Vec<String>,
}
