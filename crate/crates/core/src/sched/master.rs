//! TCP master: one core thread owns the [`Scheduler`]; connection threads
//! and timers talk to it through a command channel.

use std::collections::HashMap;
use std::io::BufReader;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use uuid::Uuid;

use super::state::{Scheduler, SchedulerConfig};
use super::wire::{read_frame, write_frame, Message};
use super::{JobSummary, TaskResult, TaskSpec, WorkerInfo};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct MasterConfig {
    pub listen: String,
    /// Address for the `GET /jobs/<id>` status endpoint; `None` disables it.
    pub http: Option<String>,
    pub scheduler: SchedulerConfig,
}

impl Default for MasterConfig {
    fn default() -> MasterConfig {
        MasterConfig {
            listen: format!("0.0.0.0:{}", super::DEFAULT_MASTER_PORT),
            http: Some(format!("0.0.0.0:{}", super::DEFAULT_HTTP_PORT)),
            scheduler: SchedulerConfig::default(),
        }
    }
}

enum Cmd {
    Register {
        worker_id: Uuid,
        address: String,
        slots: u32,
        stream: TcpStream,
        reply: Sender<Result<()>>,
    },
    Heartbeat(Uuid),
    Result(Uuid, TaskResult),
    Disconnected(Uuid),
    Submit(Vec<TaskSpec>, Sender<Result<Uuid>>),
    Status {
        job_id: Uuid,
        wait: bool,
        reply: Sender<Result<JobSummary>>,
    },
    Workers(Sender<Vec<WorkerInfo>>),
    Shutdown,
}

pub struct Master;

impl Master {
    pub fn start(config: MasterConfig) -> Result<MasterHandle> {
        config.scheduler.validate()?;
        let listener =
            TcpListener::bind(&config.listen).map_err(|e| Error::Connection(format!("bind {}: {e}", config.listen)))?;
        let addr = listener.local_addr()?;
        let (tx, rx) = mpsc::channel();
        let stopping = Arc::new(AtomicBool::new(false));
        let mut threads = Vec::new();

        let tick = (config.scheduler.heartbeat_interval / 4).max(Duration::from_millis(50));
        let sched = Scheduler::new(config.scheduler);
        threads.push(
            thread::Builder::new()
                .name("master-core".into())
                .spawn(move || core(sched, rx, tick))?,
        );

        let accept_tx = tx.clone();
        let accept_stop = stopping.clone();
        threads.push(
            thread::Builder::new()
                .name("master-accept".into())
                .spawn(move || accept(listener, accept_tx, accept_stop))?,
        );

        let mut http_addr = None;
        let mut http_server = None;
        if let Some(http) = &config.http {
            let server =
                tiny_http::Server::http(http).map_err(|e| Error::Connection(format!("bind http {http}: {e}")))?;
            http_addr = server.server_addr().to_ip();
            let server = Arc::new(server);
            http_server = Some(server.clone());
            let http_tx = tx.clone();
            threads.push(
                thread::Builder::new()
                    .name("master-http".into())
                    .spawn(move || serve_status(server, http_tx))?,
            );
        }
        info!("master listening on {addr}");
        Ok(MasterHandle {
            addr,
            http_addr,
            tx,
            stopping,
            http_server,
            threads,
        })
    }
}

pub struct MasterHandle {
    addr: SocketAddr,
    http_addr: Option<SocketAddr>,
    tx: Sender<Cmd>,
    stopping: Arc<AtomicBool>,
    http_server: Option<Arc<tiny_http::Server>>,
    threads: Vec<JoinHandle<()>>,
}

impl MasterHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Address workers and clients on this host should dial.
    pub fn connect_addr(&self) -> SocketAddr {
        let mut a = self.addr;
        if a.ip().is_unspecified() {
            a.set_ip([127, 0, 0, 1].into());
        }
        a
    }

    pub fn http_addr(&self) -> Option<SocketAddr> {
        self.http_addr
    }

    fn ask<T>(&self, make: impl FnOnce(Sender<T>) -> Cmd) -> Result<T> {
        let (tx, rx) = mpsc::channel();
        self.tx
            .send(make(tx))
            .map_err(|_| Error::Connection("master has stopped".into()))?;
        rx.recv().map_err(|_| Error::Connection("master has stopped".into()))
    }

    pub fn submit(&self, tasks: Vec<TaskSpec>) -> Result<Uuid> {
        self.ask(|r| Cmd::Submit(tasks, r))?
    }

    pub fn status(&self, job_id: Uuid) -> Result<JobSummary> {
        self.ask(|reply| Cmd::Status {
            job_id,
            wait: false,
            reply,
        })?
    }

    /// Blocks until the job has finished.
    pub fn wait(&self, job_id: Uuid) -> Result<JobSummary> {
        self.ask(|reply| Cmd::Status {
            job_id,
            wait: true,
            reply,
        })?
    }

    pub fn workers(&self) -> Result<Vec<WorkerInfo>> {
        self.ask(Cmd::Workers)
    }

    /// Blocks until `n` live workers are registered or `timeout` passes.
    pub fn wait_for_workers(&self, n: usize, timeout: Duration) -> Result<()> {
        let end = Instant::now() + timeout;
        loop {
            let live = self
                .workers()?
                .iter()
                .filter(|w| w.state != super::WorkerState::Dead)
                .count();
            if live >= n {
                return Ok(());
            }
            if Instant::now() > end {
                return Err(Error::Connection(format!("only {live} of {n} workers registered")));
            }
            thread::sleep(Duration::from_millis(10));
        }
    }

    /// Tells workers to exit, stops listening, and joins every master thread.
    pub fn shutdown(mut self) {
        self.stop();
    }

    /// Blocks until the master stops, e.g. after a client sends `SHUTDOWN`.
    pub fn join(mut self) {
        for t in self.threads.drain(..1.min(self.threads.len())) {
            let _ = t.join();
        }
        self.stop();
    }

    fn stop(&mut self) {
        if !self.stopping.swap(true, Ordering::SeqCst) {
            let _ = self.tx.send(Cmd::Shutdown);
            let _ = TcpStream::connect(self.connect_addr());
        }
        if let Some(s) = &self.http_server {
            s.unblock();
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for MasterHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

fn accept(listener: TcpListener, tx: Sender<Cmd>, stopping: Arc<AtomicBool>) {
    for stream in listener.incoming() {
        if stopping.load(Ordering::SeqCst) {
            break;
        }
        let Ok(stream) = stream else { continue };
        let tx = tx.clone();
        let stopping = stopping.clone();
        let _ = thread::Builder::new().name("master-conn".into()).spawn(move || {
            if let Err(e) = session(stream, &tx, &stopping) {
                debug!("session ended: {e}");
            }
        });
    }
}

fn session(stream: TcpStream, tx: &Sender<Cmd>, stopping: &AtomicBool) -> Result<()> {
    stream.set_nodelay(true)?;
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let send = |cmd: Cmd| tx.send(cmd).map_err(|_| Error::Connection("master has stopped".into()));
    let Some(first) = read_frame(&mut reader)? else {
        return Ok(());
    };
    if let Message::Register {
        worker_id,
        address,
        slots,
    } = first
    {
        let (reply, ack) = mpsc::channel();
        send(Cmd::Register {
            worker_id,
            address,
            slots,
            stream: stream.try_clone()?,
            reply,
        })?;
        if let Err(e) = ack.recv().map_err(|_| Error::Connection("master has stopped".into()))? {
            write_frame(&mut writer, &Message::from_error(&e))?;
            return Err(e);
        }
        let outcome = worker_session(worker_id, &mut reader, &send);
        let _ = send(Cmd::Disconnected(worker_id));
        return outcome;
    }

    let mut msg = first;
    loop {
        let reply = match msg {
            Message::Submit { tasks } => {
                let (r, rx) = mpsc::channel();
                send(Cmd::Submit(tasks, r))?;
                match rx.recv() {
                    Ok(Ok(job_id)) => Message::Submitted { job_id },
                    Ok(Err(e)) => Message::from_error(&e),
                    Err(_) => return Err(Error::Connection("master has stopped".into())),
                }
            }
            Message::Status { job_id, wait } => {
                let (reply, rx) = mpsc::channel();
                send(Cmd::Status { job_id, wait, reply })?;
                match rx.recv() {
                    Ok(Ok(summary)) => Message::Job { summary },
                    Ok(Err(e)) => Message::from_error(&e),
                    Err(_) => return Err(Error::Connection("master has stopped".into())),
                }
            }
            Message::Shutdown => {
                if !stopping.swap(true, Ordering::SeqCst) {
                    send(Cmd::Shutdown)?;
                    let _ = TcpStream::connect(writer.local_addr()?);
                }
                write_frame(&mut writer, &Message::Shutdown)?;
                return Ok(());
            }
            other => Message::from_error(&Error::Protocol(format!("unexpected client message {other:?}"))),
        };
        write_frame(&mut writer, &reply)?;
        match read_frame(&mut reader)? {
            Some(m) => msg = m,
            None => return Ok(()),
        }
    }
}

fn worker_session(worker_id: Uuid, reader: &mut BufReader<TcpStream>, send: &impl Fn(Cmd) -> Result<()>) -> Result<()> {
    while let Some(msg) = read_frame(reader)? {
        match msg {
            Message::Heartbeat { .. } => send(Cmd::Heartbeat(worker_id))?,
            Message::Result { result } => send(Cmd::Result(worker_id, result))?,
            other => return Err(Error::Protocol(format!("unexpected worker message {other:?}"))),
        }
    }
    Ok(())
}

struct Core {
    sched: Scheduler,
    streams: HashMap<Uuid, TcpStream>,
    waiters: Vec<(Uuid, Sender<Result<JobSummary>>)>,
}

impl Core {
    fn fail(&mut self, worker_id: Uuid, now: Instant) {
        let back = self.sched.handle_failure(worker_id, now);
        if !back.is_empty() {
            warn!("worker {worker_id} lost, {} task(s) requeued", back.len());
        }
        if let Some(s) = self.streams.remove(&worker_id) {
            let _ = s.shutdown(Shutdown::Both);
        }
    }

    fn dispatch(&mut self, now: Instant) {
        while self.sched.queued() > 0 {
            let free = self.sched.free_workers();
            if free.is_empty() {
                break;
            }
            for worker_id in free {
                let Ok(Some(task)) = self.sched.assign_next(worker_id, now) else {
                    continue;
                };
                let sent = match self.streams.get_mut(&worker_id) {
                    Some(s) => write_frame(s, &Message::Assign { task }).is_ok(),
                    None => false,
                };
                if !sent {
                    self.fail(worker_id, now);
                }
            }
        }
    }

    fn answer_waiters(&mut self, now: Instant) {
        let sched = &self.sched;
        self.waiters.retain(|(job, reply)| match sched.job_status(*job, now) {
            Ok(s) if s.done => {
                let _ = reply.send(Ok(s));
                false
            }
            Ok(_) => true,
            Err(e) => {
                let _ = reply.send(Err(e));
                false
            }
        });
    }
}

fn core(sched: Scheduler, rx: Receiver<Cmd>, tick: Duration) {
    let mut core = Core {
        sched,
        streams: HashMap::new(),
        waiters: Vec::new(),
    };
    let mut next_tick = Instant::now() + tick;
    loop {
        let wait = next_tick.saturating_duration_since(Instant::now());
        let cmd = rx.recv_timeout(wait);
        let now = Instant::now();
        match cmd {
            Ok(Cmd::Register {
                worker_id,
                address,
                slots,
                stream,
                reply,
            }) => {
                let r = core.sched.register(worker_id, &address, slots, now);
                if r.is_ok() {
                    let _ = stream.set_write_timeout(Some(Duration::from_secs(30)));
                    core.streams.insert(worker_id, stream);
                    info!("worker {worker_id} registered from {address} with {slots} slot(s)");
                }
                let _ = reply.send(r);
            }
            Ok(Cmd::Heartbeat(id)) => {
                let _ = core.sched.heartbeat(id, now);
            }
            Ok(Cmd::Result(id, result)) => {
                debug!(
                    "task {} reported by {id} after {} ms",
                    result.task_id, result.elapsed_ms
                );
                if let Err(e) = core.sched.complete(id, result, now) {
                    warn!("result from {id} rejected: {e}");
                }
            }
            Ok(Cmd::Disconnected(id)) => core.fail(id, now),
            Ok(Cmd::Submit(tasks, reply)) => {
                let _ = reply.send(core.sched.submit(tasks, now));
            }
            Ok(Cmd::Status { job_id, wait, reply }) => match core.sched.job_status(job_id, now) {
                Ok(s) if wait && !s.done => core.waiters.push((job_id, reply)),
                other => {
                    let _ = reply.send(other);
                }
            },
            Ok(Cmd::Workers(reply)) => {
                let _ = reply.send(core.sched.workers());
            }
            Ok(Cmd::Shutdown) | Err(RecvTimeoutError::Disconnected) => break,
            Err(RecvTimeoutError::Timeout) => {}
        }
        if now >= next_tick {
            for id in core.sched.tick(now) {
                warn!("worker {id} declared dead");
                core.fail(id, now);
            }
            next_tick = now + tick;
        }
        core.dispatch(now);
        core.answer_waiters(now);
    }
    for s in core.streams.values_mut() {
        let _ = write_frame(s, &Message::Shutdown);
        let _ = s.shutdown(Shutdown::Write);
    }
    for (_, reply) in core.waiters.drain(..) {
        let _ = reply.send(Err(Error::Connection("master shut down".into())));
    }
    info!("master stopped");
}

fn serve_status(server: Arc<tiny_http::Server>, tx: Sender<Cmd>) {
    for request in server.incoming_requests() {
        let id = request
            .url()
            .strip_prefix("/jobs/")
            .and_then(|s| s.split('?').next())
            .map(Uuid::parse_str);
        let (code, body) = match id {
            Some(Ok(job_id)) if *request.method() == tiny_http::Method::Get => {
                let (reply, rx) = mpsc::channel();
                if tx
                    .send(Cmd::Status {
                        job_id,
                        wait: false,
                        reply,
                    })
                    .is_err()
                {
                    break;
                }
                match rx.recv() {
                    Ok(Ok(s)) => (200, serde_json::to_string(&s).unwrap_or_default()),
                    Ok(Err(e)) => (404, serde_json::json!({ "error": e.to_string() }).to_string()),
                    Err(_) => break,
                }
            }
            Some(Err(_)) => (400, r#"{"error":"bad job id"}"#.to_owned()),
            _ => (404, r#"{"error":"not found"}"#.to_owned()),
        };
        let header = tiny_http::Header::from_bytes("Content-Type", "application/json").expect("static header");
        let _ = request.respond(
            tiny_http::Response::from_string(body)
                .with_status_code(code)
                .with_header(header),
        );
    }
}

/// Resolves `host:port` to the first socket address.
pub fn resolve(addr: &str) -> Result<SocketAddr> {
    addr.to_socket_addrs()
        .map_err(|e| Error::Connection(format!("resolve {addr}: {e}")))?
        .next()
        .ok_or_else(|| Error::Connection(format!("{addr} resolves to nothing")))
}
