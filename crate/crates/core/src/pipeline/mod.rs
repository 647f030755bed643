//! End-to-end orchestration: turning bucket contents into scheduler jobs,
//! the worker-side task logic, a local cluster for single-machine runs, and
//! the read-only search service.

pub mod cluster;
pub mod config;
pub mod executor;
pub mod serve;

use log::info;

use crate::classifier::{TrainConfig, CURRENT_POINTER};
use crate::error::{Error, Result};
use crate::ingest::{ingest_dataset, DatasetSource, IngestReport};
use crate::sched::{make_batches, JobSummary, MasterClient, TaskKind, TaskSpec};
use crate::store::{BucketId, ObjectRef, Store};

pub use cluster::{LocalCluster, WorkerLauncher};
pub use config::PipelineConfig;
pub use executor::{
    index_dir, process_batch, process_one, Extractor, PipelineExecutor, TrainReport, UnconfiguredExtractor,
};
pub use serve::{serve_index, ServeHandle};

/// Control loop for one command invocation: reads bucket state, submits a
/// job to the master and waits for it.
#[derive(Debug, Clone)]
pub struct Orchestrator {
    store: Store,
    master_addr: String,
    batch_size: usize,
    model_ref: String,
    train: TrainConfig,
}

impl Orchestrator {
    pub fn new(store: Store, config: &PipelineConfig) -> Orchestrator {
        Orchestrator {
            store,
            master_addr: config.master_addr.clone(),
            batch_size: config.batch_size,
            model_ref: config.model_ref.clone(),
            train: config.train,
        }
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn master_addr(&self) -> &str {
        &self.master_addr
    }

    fn submit_and_wait(&self, tasks: Vec<TaskSpec>) -> Result<JobSummary> {
        let mut client = MasterClient::connect(&self.master_addr)?;
        let job = client.submit(tasks)?;
        info!("submitted job {job}");
        client.wait(job)
    }

    /// Key of the model a processing job should use.
    pub fn resolve_model(&self) -> Result<String> {
        if self.model_ref != CURRENT_POINTER {
            if !self.store.exists(BucketId::MlModels, &self.model_ref)? {
                return Err(Error::not_found(format!("model {}", self.model_ref)));
            }
            return Ok(self.model_ref.clone());
        }
        self.store
            .pointer(BucketId::MlModels, CURRENT_POINTER)?
            .map(|o| o.key)
            .ok_or_else(|| Error::validation("no current model; run `litmine train` first"))
    }

    /// Classifies and indexes everything in `staging`, in batches.
    pub fn run_processing_job(&self) -> Result<JobSummary> {
        let model_key = self.resolve_model()?;
        let keys = self.store.list_all(BucketId::Staging)?;
        let mut tasks = make_batches(&keys, self.batch_size);
        for t in &mut tasks {
            t.model_key = Some(model_key.clone());
        }
        info!(
            "processing {} staged keys in {} tasks with model {model_key}",
            keys.len(),
            tasks.len()
        );
        self.submit_and_wait(tasks)
    }

    /// Stores JSON-lines training data in `ml_models` and returns its key.
    pub fn upload_training_data(&self, bytes: &[u8]) -> Result<String> {
        crate::classifier::parse_training_data(bytes)?;
        Ok(self.store.put_content(BucketId::MlModels, "json", bytes)?.key)
    }

    /// Trains on `data_key` as a single `train` task; the worker keeps the
    /// better of the new and current model.
    pub fn run_training_job(&self, data_key: &str) -> Result<TrainReport> {
        if !self.store.exists(BucketId::MlModels, data_key)? {
            return Err(Error::not_found(format!(
                "training data {}",
                ObjectRef::new(BucketId::MlModels, data_key)
            )));
        }
        let mut task = TaskSpec::new(TaskKind::Train, vec![data_key.to_owned()]);
        task.train = Some(self.train);
        let summary = self.submit_and_wait(vec![task])?;
        let output = summary
            .outputs
            .first()
            .ok_or_else(|| Error::Protocol(format!("training task did not complete: {summary:?}")))?;
        let report: TrainReport = serde_json::from_str(output)?;
        match &report.error {
            Some(e) => Err(Error::validation(e.clone())),
            None => Ok(report),
        }
    }

    /// Sends every raw PDF through the extractor.
    pub fn run_extraction_job(&self) -> Result<JobSummary> {
        let keys: Vec<String> = self
            .store
            .list_all(BucketId::Raw)?
            .into_iter()
            .filter(|k| k.ends_with(".pdf"))
            .collect();
        let mut tasks = make_batches(&keys, self.batch_size);
        for t in &mut tasks {
            t.kind = TaskKind::ExtractStub;
        }
        self.submit_and_wait(tasks)
    }
}

/// Runs one incremental ingest. Failures come back inside the report and
/// leave the buckets untouched.
pub fn check_update(store: &Store, source: &DatasetSource) -> IngestReport {
    ingest_dataset(store, source).unwrap_or_else(|e| IngestReport::failed(&e))
}
