//! The master's task ledger as a pure state machine.
//!
//! Every method takes the current instant from the caller, so tests can drive
//! time explicitly and the master can feed it from a single command loop.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::time::{Duration, Instant};

use chrono::Utc;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use super::{JobSummary, KeyOutcome, KeyTally, TaskKind, TaskResult, TaskSpec, WorkerInfo, WorkerState};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    #[serde(with = "millis")]
    pub heartbeat_interval: Duration,
    pub missed_heartbeats: u32,
    #[serde(with = "millis")]
    pub task_timeout: Duration,
    pub max_attempts: u32,
}

impl Default for SchedulerConfig {
    fn default() -> SchedulerConfig {
        SchedulerConfig {
            heartbeat_interval: Duration::from_secs(2),
            missed_heartbeats: 3,
            task_timeout: Duration::from_secs(600),
            max_attempts: 5,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heartbeat_interval.is_zero() || self.task_timeout.is_zero() {
            return Err(Error::validation("scheduler intervals must be positive"));
        }
        if self.missed_heartbeats == 0 || self.max_attempts == 0 {
            return Err(Error::validation(
                "missed_heartbeats and max_attempts must be at least 1",
            ));
        }
        Ok(())
    }

    /// Silence after which a worker is declared dead.
    pub fn liveness_window(&self) -> Duration {
        self.heartbeat_interval * self.missed_heartbeats
    }
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum TaskState {
    Queued,
    InFlight { worker: Uuid, deadline: Instant },
    Done,
    Failed,
}

#[derive(Debug)]
struct TaskEntry {
    spec: TaskSpec,
    job: Uuid,
    state: TaskState,
}

#[derive(Debug)]
struct WorkerEntry {
    info: WorkerInfo,
    last_seen: Instant,
    in_flight: BTreeSet<Uuid>,
}

#[derive(Debug)]
struct JobEntry {
    total: u64,
    completed: u64,
    failed: u64,
    rescheduled: u64,
    keys: KeyTally,
    outputs: Vec<String>,
    started: Instant,
    finished: Option<Instant>,
}

impl JobEntry {
    fn settle(&mut self, now: Instant) {
        if self.finished.is_none() && self.completed + self.failed == self.total {
            self.finished = Some(now);
        }
    }
}

#[derive(Debug, Default)]
pub struct Scheduler {
    config: SchedulerConfig,
    queue: VecDeque<Uuid>,
    tasks: HashMap<Uuid, TaskEntry>,
    workers: HashMap<Uuid, WorkerEntry>,
    jobs: HashMap<Uuid, JobEntry>,
}

impl Scheduler {
    pub fn new(config: SchedulerConfig) -> Scheduler {
        Scheduler {
            config,
            ..Scheduler::default()
        }
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    pub fn register(&mut self, worker_id: Uuid, address: &str, slots: u32, now: Instant) -> Result<()> {
        if slots == 0 {
            return Err(Error::validation("worker needs at least one slot"));
        }
        if let Some(w) = self.workers.get(&worker_id) {
            if w.info.state != WorkerState::Dead {
                return Err(Error::Conflict(format!("worker {worker_id} is already registered")));
            }
        }
        self.workers.insert(
            worker_id,
            WorkerEntry {
                info: WorkerInfo {
                    worker_id,
                    address: address.to_owned(),
                    slots,
                    last_heartbeat: Utc::now(),
                    state: WorkerState::Idle,
                },
                last_seen: now,
                in_flight: BTreeSet::new(),
            },
        );
        Ok(())
    }

    fn live_worker(&mut self, worker_id: Uuid) -> Result<&mut WorkerEntry> {
        match self.workers.get_mut(&worker_id) {
            None => Err(Error::not_found(format!("worker {worker_id}"))),
            Some(w) if w.info.state == WorkerState::Dead => {
                Err(Error::Conflict(format!("worker {worker_id} was declared dead")))
            }
            Some(w) => Ok(w),
        }
    }

    pub fn heartbeat(&mut self, worker_id: Uuid, now: Instant) -> Result<()> {
        let w = self.live_worker(worker_id)?;
        w.last_seen = now;
        w.info.last_heartbeat = Utc::now();
        Ok(())
    }

    /// Enqueues a job. Task ids already known to the ledger are replaced with
    /// fresh ones, so resubmitting a payload creates an independent job.
    pub fn submit(&mut self, tasks: Vec<TaskSpec>, now: Instant) -> Result<Uuid> {
        for t in &tasks {
            t.validate()?;
        }
        let trains = tasks.iter().filter(|t| t.kind == TaskKind::Train).count();
        if trains > 1 || (trains == 1 && self.training_active()) {
            return Err(Error::Conflict("a training job is already running".into()));
        }
        let job_id = Uuid::new_v4();
        let mut job = JobEntry {
            total: tasks.len() as u64,
            completed: 0,
            failed: 0,
            rescheduled: 0,
            keys: KeyTally::default(),
            outputs: Vec::new(),
            started: now,
            finished: None,
        };
        job.settle(now);
        self.jobs.insert(job_id, job);
        for mut spec in tasks {
            while self.tasks.contains_key(&spec.task_id) {
                spec.task_id = Uuid::new_v4();
            }
            spec.attempt = 1;
            self.queue.push_back(spec.task_id);
            self.tasks.insert(
                spec.task_id,
                TaskEntry {
                    spec,
                    job: job_id,
                    state: TaskState::Queued,
                },
            );
        }
        Ok(job_id)
    }

    fn training_active(&self) -> bool {
        self.tasks.values().any(|t| {
            t.spec.kind == TaskKind::Train && matches!(t.state, TaskState::Queued | TaskState::InFlight { .. })
        })
    }

    /// Hands the earliest queued task to `worker_id` if it has a free slot.
    pub fn assign_next(&mut self, worker_id: Uuid, now: Instant) -> Result<Option<TaskSpec>> {
        let timeout = self.config.task_timeout;
        let w = self.live_worker(worker_id)?;
        if w.in_flight.len() >= w.info.slots as usize {
            return Ok(None);
        }
        let Some(task_id) = self.queue.pop_front() else {
            return Ok(None);
        };
        let w = self.workers.get_mut(&worker_id).expect("checked live");
        w.in_flight.insert(task_id);
        w.info.state = WorkerState::Busy;
        let entry = self.tasks.get_mut(&task_id).expect("queued tasks are in the ledger");
        entry.state = TaskState::InFlight {
            worker: worker_id,
            deadline: now + timeout,
        };
        Ok(Some(entry.spec.clone()))
    }

    /// Live workers with at least one free slot, in a stable order.
    pub fn free_workers(&self) -> Vec<Uuid> {
        let mut ids: Vec<_> = self
            .workers
            .values()
            .filter(|w| w.info.state != WorkerState::Dead && w.in_flight.len() < w.info.slots as usize)
            .map(|w| w.info.worker_id)
            .collect();
        ids.sort();
        ids
    }

    pub fn queued(&self) -> usize {
        self.queue.len()
    }

    /// Records a task result. Returns `false` for stale results: tasks no
    /// longer held by the reporting worker, e.g. after it was declared dead.
    pub fn complete(&mut self, worker_id: Uuid, result: TaskResult, now: Instant) -> Result<bool> {
        let holder = match self.tasks.get(&result.task_id) {
            None => return Err(Error::not_found(format!("task {}", result.task_id))),
            Some(t) => match t.state {
                TaskState::InFlight { worker, .. } => worker,
                _ => return Ok(false),
            },
        };
        if holder != worker_id {
            return Ok(false);
        }
        self.release(worker_id, result.task_id);

        let entry = self.tasks.get_mut(&result.task_id).expect("present");
        let covers = result.per_key.len() == entry.spec.keys.len()
            && result.per_key.iter().zip(&entry.spec.keys).all(|(r, k)| &r.key == k);
        if result.error.is_some() || !covers {
            self.retry(result.task_id, now);
            return Ok(true);
        }
        entry.state = TaskState::Done;
        let job = self.jobs.get_mut(&entry.job).expect("task belongs to a job");
        job.completed += 1;
        for r in &result.per_key {
            match r.outcome {
                KeyOutcome::Ok => job.keys.ok += 1,
                KeyOutcome::Skipped => job.keys.skipped += 1,
                KeyOutcome::Failed => job.keys.failed += 1,
            }
        }
        job.outputs.extend(result.output);
        job.settle(now);
        Ok(true)
    }

    fn release(&mut self, worker_id: Uuid, task_id: Uuid) {
        if let Some(w) = self.workers.get_mut(&worker_id) {
            w.in_flight.remove(&task_id);
            if w.in_flight.is_empty() && w.info.state == WorkerState::Busy {
                w.info.state = WorkerState::Idle;
            }
        }
    }

    /// Bumps the attempt count and puts the task back at the queue front,
    /// or fails it permanently once it has used up its attempts.
    fn retry(&mut self, task_id: Uuid, now: Instant) -> Option<TaskSpec> {
        let max = self.config.max_attempts;
        let entry = self.tasks.get_mut(&task_id).expect("present");
        let job = self.jobs.get_mut(&entry.job).expect("task belongs to a job");
        if entry.spec.attempt >= max {
            entry.state = TaskState::Failed;
            job.failed += 1;
            job.settle(now);
            None
        } else {
            entry.spec.attempt += 1;
            entry.state = TaskState::Queued;
            job.rescheduled += 1;
            self.queue.push_front(task_id);
            Some(entry.spec.clone())
        }
    }

    /// Declares a worker dead and requeues its in-flight tasks.
    pub fn handle_failure(&mut self, worker_id: Uuid, now: Instant) -> Vec<TaskSpec> {
        let Some(w) = self.workers.get_mut(&worker_id) else {
            return Vec::new();
        };
        w.info.state = WorkerState::Dead;
        let held: Vec<Uuid> = std::mem::take(&mut w.in_flight).into_iter().collect();
        // Sorted by original submission so requeued tasks keep FIFO order at the front.
        let mut held: Vec<(chrono::DateTime<Utc>, usize, Uuid)> = held
            .into_iter()
            .enumerate()
            .map(|(i, id)| (self.tasks[&id].spec.submitted_at, i, id))
            .collect();
        held.sort();
        let mut rescheduled = Vec::new();
        for (_, _, id) in held.into_iter().rev() {
            rescheduled.extend(self.retry(id, now));
        }
        rescheduled.reverse();
        rescheduled
    }

    /// Expires silent workers and workers holding a task past its deadline.
    /// Returns the workers declared dead.
    pub fn tick(&mut self, now: Instant) -> Vec<Uuid> {
        let window = self.config.liveness_window();
        let mut dead: Vec<Uuid> = self
            .workers
            .values()
            .filter(|w| w.info.state != WorkerState::Dead)
            .filter(|w| {
                now.saturating_duration_since(w.last_seen) > window
                    || w.in_flight.iter().any(
                        |id| matches!(self.tasks[id].state, TaskState::InFlight { deadline, .. } if now > deadline),
                    )
            })
            .map(|w| w.info.worker_id)
            .collect();
        dead.sort();
        for &id in &dead {
            self.handle_failure(id, now);
        }
        dead
    }

    pub fn job_status(&self, job_id: Uuid, now: Instant) -> Result<JobSummary> {
        let job = self
            .jobs
            .get(&job_id)
            .ok_or_else(|| Error::not_found(format!("job {job_id}")))?;
        let end = job.finished.unwrap_or(now);
        Ok(JobSummary {
            job_id,
            total_tasks: job.total,
            completed: job.completed,
            failed_permanently: job.failed,
            wall_time_ms: end.saturating_duration_since(job.started).as_secs_f64() * 1e3,
            done: job.finished.is_some(),
            rescheduled: job.rescheduled,
            keys: job.keys.clone(),
            outputs: job.outputs.clone(),
        })
    }

    pub fn workers(&self) -> Vec<WorkerInfo> {
        let mut out: Vec<_> = self.workers.values().map(|w| w.info.clone()).collect();
        out.sort_by_key(|w| w.worker_id);
        out
    }

    pub fn in_flight(&self, worker_id: Uuid) -> Vec<Uuid> {
        self.workers
            .get(&worker_id)
            .map(|w| w.in_flight.iter().copied().collect())
            .unwrap_or_default()
    }
}
