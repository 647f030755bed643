//! A master plus workers on this machine, as threads or child processes.

use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use log::warn;

use super::config::PipelineConfig;
use super::executor::PipelineExecutor;
use super::Orchestrator;
use crate::error::{Error, Result};
use crate::sched::{spawn_worker, Master, MasterConfig, MasterHandle, SchedulerConfig, WorkerConfig, WorkerHandle};
use crate::store::Store;

#[derive(Debug, Clone)]
pub enum WorkerLauncher {
    Threads,
    /// Runs `<exe> worker ...` per worker; `exe` is the `litmine` binary.
    Processes {
        exe: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WorkerOptions {
    pub crash_after_keys: Option<usize>,
}

enum Running {
    Thread(WorkerHandle),
    Process(Child),
}

pub struct LocalCluster {
    store: Store,
    master: Option<MasterHandle>,
    workers: Vec<Running>,
    launcher: WorkerLauncher,
    config: PipelineConfig,
}

impl LocalCluster {
    /// Starts a master on an ephemeral localhost port with one worker per
    /// entry in `workers`, and waits until all of them have registered.
    pub fn start(
        store: Store,
        launcher: WorkerLauncher,
        workers: &[WorkerOptions],
        scheduler: SchedulerConfig,
    ) -> Result<LocalCluster> {
        let master = Master::start(MasterConfig {
            listen: "127.0.0.1:0".into(),
            http: None,
            scheduler,
        })?;
        let config = PipelineConfig {
            store_root: store.root().to_path_buf(),
            master_addr: master.connect_addr().to_string(),
            scheduler,
            ..PipelineConfig::default()
        };
        let mut cluster = LocalCluster {
            store,
            master: Some(master),
            workers: Vec::new(),
            launcher,
            config,
        };
        for w in workers {
            cluster.add_worker(*w)?;
        }
        cluster
            .master()
            .wait_for_workers(workers.len(), Duration::from_secs(60))?;
        Ok(cluster)
    }

    pub fn master(&self) -> &MasterHandle {
        self.master.as_ref().expect("master runs until shutdown")
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn orchestrator(&self) -> Orchestrator {
        Orchestrator::new(self.store.clone(), &self.config)
    }

    pub fn orchestrator_with(&self, config: &PipelineConfig) -> Orchestrator {
        let mut config = config.clone();
        config.master_addr = self.config.master_addr.clone();
        Orchestrator::new(self.store.clone(), &config)
    }

    pub fn add_worker(&mut self, options: WorkerOptions) -> Result<()> {
        let heartbeat = self.config.scheduler.heartbeat_interval;
        match &self.launcher {
            WorkerLauncher::Threads => {
                if options.crash_after_keys.is_some() {
                    return Err(Error::validation("fault injection needs process workers"));
                }
                let exec = PipelineExecutor::new(self.store.clone());
                exec.preload()?;
                let mut wc = WorkerConfig::new(self.config.master_addr.clone());
                wc.heartbeat_interval = heartbeat;
                self.workers.push(Running::Thread(spawn_worker(wc, Arc::new(exec))?));
            }
            WorkerLauncher::Processes { exe } => {
                let mut cmd = Command::new(exe);
                cmd.arg("--store")
                    .arg(self.store.root())
                    .arg("worker")
                    .arg("--master")
                    .arg(&self.config.master_addr)
                    .arg("--slots")
                    .arg("1")
                    .arg("--heartbeat-ms")
                    .arg(heartbeat.as_millis().to_string())
                    .stdin(Stdio::null())
                    .stdout(Stdio::null());
                if let Some(k) = options.crash_after_keys {
                    cmd.arg("--crash-after-keys").arg(k.to_string());
                }
                let child = cmd
                    .spawn()
                    .map_err(|e| Error::Connection(format!("spawn worker {}: {e}", exe.display())))?;
                self.workers.push(Running::Process(child));
            }
        }
        Ok(())
    }

    /// Stops the master (which tells workers to exit) and reaps every worker.
    pub fn shutdown(mut self) -> Result<()> {
        self.stop()
    }

    fn stop(&mut self) -> Result<()> {
        if let Some(m) = self.master.take() {
            m.shutdown();
        }
        for w in self.workers.drain(..) {
            match w {
                Running::Thread(h) => {
                    let _ = h.join();
                }
                Running::Process(mut child) => {
                    let end = Instant::now() + Duration::from_secs(10);
                    loop {
                        match child.try_wait()? {
                            Some(_) => break,
                            None if Instant::now() > end => {
                                warn!("worker process {} did not exit, killing it", child.id());
                                let _ = child.kill();
                                let _ = child.wait();
                                break;
                            }
                            None => std::thread::sleep(Duration::from_millis(20)),
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

impl Drop for LocalCluster {
    fn drop(&mut self) {
        let _ = self.stop();
    }
}
