//! Worker side of the protocol: register, heartbeat, run assigned tasks on a
//! fixed number of slot threads, report results.

use std::io::BufReader;
use std::net::{Shutdown, TcpStream};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use uuid::Uuid;

use super::wire::{read_frame, write_frame, Message};
use super::{KeyResult, TaskResult, TaskSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct ExecOutcome {
    pub per_key: Vec<KeyResult>,
    pub output: Option<String>,
}

/// Runs one task. An `Err` means the task as a whole did not run and should
/// be retried; per-key failures belong in [`ExecOutcome::per_key`].
pub trait TaskExecutor: Send + Sync {
    fn execute(&self, task: &TaskSpec) -> Result<ExecOutcome>;
}

impl<F> TaskExecutor for F
where
    F: Fn(&TaskSpec) -> Result<ExecOutcome> + Send + Sync,
{
    fn execute(&self, task: &TaskSpec) -> Result<ExecOutcome> {
        self(task)
    }
}

#[derive(Debug, Clone)]
pub struct WorkerConfig {
    pub master: String,
    pub slots: u32,
    pub heartbeat_interval: Duration,
    /// How long to keep retrying the initial connection.
    pub connect_timeout: Duration,
    pub worker_id: Uuid,
}

impl WorkerConfig {
    pub fn new(master: impl Into<String>) -> WorkerConfig {
        WorkerConfig {
            master: master.into(),
            slots: 1,
            heartbeat_interval: Duration::from_secs(2),
            connect_timeout: Duration::from_secs(10),
            worker_id: Uuid::new_v4(),
        }
    }
}

fn connect(config: &WorkerConfig) -> Result<TcpStream> {
    let end = Instant::now() + config.connect_timeout;
    loop {
        match TcpStream::connect(&config.master) {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() >= end => {
                return Err(Error::Connection(format!("connect {}: {e}", config.master)))
            }
            Err(_) => thread::sleep(Duration::from_millis(100)),
        }
    }
}

/// Connects and serves until the master sends `SHUTDOWN` (returns `Ok`) or
/// the connection breaks (returns `Err`).
pub fn run_worker(config: WorkerConfig, executor: Arc<dyn TaskExecutor>) -> Result<()> {
    let stream = connect(&config)?;
    serve(config, stream, executor)
}

fn serve(config: WorkerConfig, stream: TcpStream, executor: Arc<dyn TaskExecutor>) -> Result<()> {
    if config.slots == 0 {
        return Err(Error::validation("worker needs at least one slot"));
    }
    stream.set_nodelay(true)?;
    let worker_id = config.worker_id;
    let writer = Arc::new(Mutex::new(stream.try_clone()?));
    let address = stream.local_addr()?.to_string();
    write_frame(
        &mut *writer.lock().expect("writer lock"),
        &Message::Register {
            worker_id,
            address,
            slots: config.slots,
        },
    )?;
    info!(
        "worker {worker_id} registered with {} ({} slot(s))",
        config.master, config.slots
    );

    let (task_tx, task_rx) = mpsc::channel::<TaskSpec>();
    let task_rx = Arc::new(Mutex::new(task_rx));
    let mut slots = Vec::new();
    for i in 0..config.slots {
        let rx = task_rx.clone();
        let writer = writer.clone();
        let executor = executor.clone();
        slots.push(thread::Builder::new().name(format!("slot-{i}")).spawn(move || loop {
            let task = match rx.lock().expect("task queue lock").recv() {
                Ok(t) => t,
                Err(_) => break,
            };
            let result = run_task(worker_id, &task, executor.as_ref());
            let mut w = writer.lock().expect("writer lock");
            if let Err(e) = write_frame(&mut *w, &Message::Result { result }) {
                warn!("could not report task {}: {e}", task.task_id);
            }
        })?);
    }

    let (stop_tx, stop_rx) = mpsc::channel::<()>();
    let hb_writer = writer.clone();
    let interval = config.heartbeat_interval;
    let heartbeat = thread::Builder::new().name("heartbeat".into()).spawn(move || {
        while let Err(mpsc::RecvTimeoutError::Timeout) = stop_rx.recv_timeout(interval) {
            let mut w = hb_writer.lock().expect("writer lock");
            if write_frame(&mut *w, &Message::Heartbeat { worker_id }).is_err() {
                break;
            }
        }
    })?;

    let mut reader = BufReader::new(stream.try_clone()?);
    let outcome = loop {
        match read_frame(&mut reader) {
            Ok(Some(Message::Assign { task })) => {
                debug!(
                    "task {} assigned ({} keys, attempt {})",
                    task.task_id,
                    task.keys.len(),
                    task.attempt
                );
                let _ = task_tx.send(task);
            }
            Ok(Some(Message::Shutdown)) => break Ok(()),
            Ok(Some(Message::Error { kind, message })) => break Err(Message::into_error(kind, message)),
            Ok(Some(other)) => break Err(Error::Protocol(format!("unexpected message {other:?}"))),
            Ok(None) => break Err(Error::Connection("master closed the connection".into())),
            Err(e) => break Err(e),
        }
    };
    drop(task_tx);
    drop(stop_tx);
    let _ = heartbeat.join();
    if outcome.is_err() {
        let _ = stream.shutdown(Shutdown::Both);
    }
    for s in slots {
        let _ = s.join();
    }
    let _ = stream.shutdown(Shutdown::Both);
    info!("worker {worker_id} stopped");
    outcome
}

fn run_task(worker_id: Uuid, task: &TaskSpec, executor: &dyn TaskExecutor) -> TaskResult {
    let started = Instant::now();
    let (per_key, output, error) = match executor.execute(task) {
        Ok(o) => (o.per_key, o.output, None),
        Err(e) => (Vec::new(), None, Some(e.to_string())),
    };
    TaskResult {
        task_id: task.task_id,
        per_key,
        elapsed_ms: started.elapsed().as_millis() as u64,
        worker_id,
        error,
        output,
    }
}

/// An in-process worker running on its own thread.
pub struct WorkerHandle {
    pub worker_id: Uuid,
    stream: TcpStream,
    thread: Option<JoinHandle<Result<()>>>,
}

impl WorkerHandle {
    /// Drops the connection without a goodbye, as a crashed worker would.
    pub fn kill(&self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }

    pub fn join(mut self) -> Result<()> {
        self.thread
            .take()
            .expect("joined once")
            .join()
            .unwrap_or_else(|_| Err(Error::Protocol("worker thread panicked".into())))
    }
}

pub fn spawn_worker(config: WorkerConfig, executor: Arc<dyn TaskExecutor>) -> Result<WorkerHandle> {
    let stream = connect(&config)?;
    let handle = stream.try_clone()?;
    let worker_id = config.worker_id;
    let thread = thread::Builder::new()
        .name(format!("worker-{worker_id}"))
        .spawn(move || serve(config, stream, executor))?;
    Ok(WorkerHandle {
        worker_id,
        stream: handle,
        thread: Some(thread),
    })
}
