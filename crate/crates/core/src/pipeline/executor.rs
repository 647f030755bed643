//! What a worker does with each task kind.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::classifier::{self, parse_training_data, CURRENT_POINTER};
use crate::error::{Error, Result};
use crate::index::{IndexWriter, IndexedDoc};
use crate::ingest::{stage_article, ArticleDoc};
use crate::sched::{ExecOutcome, KeyResult, TaskExecutor, TaskKind, TaskSpec};
use crate::store::{validate_key, BucketId, ObjectRef, Store};
use crate::Model;

/// Turns a raw PDF into an article.
pub trait Extractor: Send + Sync {
    fn extract(&self, pdf: &[u8]) -> Result<ArticleDoc>;
}

/// The default extractor: every PDF is rejected.
#[derive(Debug, Default, Clone, Copy)]
pub struct UnconfiguredExtractor;

impl Extractor for UnconfiguredExtractor {
    fn extract(&self, _pdf: &[u8]) -> Result<ArticleDoc> {
        Err(Error::validation("extractor not configured"))
    }
}

pub fn index_dir(store_root: &Path) -> PathBuf {
    store_root.join("index")
}

/// Outcome of a `train` task, carried back to the master as the task output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub data_key: String,
    pub candidate_accuracy: f64,
    /// Accuracy of the model that was current before this run.
    pub previous_accuracy: Option<f64>,
    pub promoted: bool,
    /// Model `current` points at after selection.
    pub current_key: Option<String>,
    pub labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub struct PipelineExecutor {
    store: Store,
    index_dir: PathBuf,
    models: Mutex<HashMap<String, Arc<Model>>>,
    extractor: Arc<dyn Extractor>,
    crash_after_keys: Option<usize>,
    moved: AtomicUsize,
}

impl PipelineExecutor {
    pub fn new(store: Store) -> PipelineExecutor {
        let index_dir = index_dir(store.root());
        PipelineExecutor {
            store,
            index_dir,
            models: Mutex::new(HashMap::new()),
            extractor: Arc::new(UnconfiguredExtractor),
            crash_after_keys: None,
            moved: AtomicUsize::new(0),
        }
    }

    pub fn with_extractor(mut self, extractor: Arc<dyn Extractor>) -> PipelineExecutor {
        self.extractor = extractor;
        self
    }

    /// Fault injection: exit the process abruptly once this many keys have
    /// been moved to `completed`.
    pub fn crash_after_keys(mut self, keys: Option<usize>) -> PipelineExecutor {
        self.crash_after_keys = keys;
        self
    }

    /// Loads the current model into the cache so the first task does not pay for it.
    pub fn preload(&self) -> Result<Option<String>> {
        match self.store.pointer(BucketId::MlModels, CURRENT_POINTER)? {
            Some(object) => {
                self.model(&object.key)?;
                Ok(Some(object.key))
            }
            None => Ok(None),
        }
    }

    fn model(&self, key: &str) -> Result<Arc<Model>> {
        if let Some(m) = self.models.lock().expect("model cache lock").get(key) {
            return Ok(m.clone());
        }
        let model: Model = classifier::load_model(&self.store, &ObjectRef::new(BucketId::MlModels, key))?;
        model.check_compatible()?;
        let model = Arc::new(model);
        self.models
            .lock()
            .expect("model cache lock")
            .insert(key.to_owned(), model.clone());
        Ok(model)
    }

    fn resolve_model_key(&self, task: &TaskSpec) -> Result<String> {
        match &task.model_key {
            Some(k) => Ok(k.clone()),
            None => self
                .store
                .pointer(BucketId::MlModels, CURRENT_POINTER)?
                .map(|o| o.key)
                .ok_or_else(|| Error::validation("no current model; train one first")),
        }
    }

    fn process(&self, task: &TaskSpec) -> Result<ExecOutcome> {
        let model = self.model(&self.resolve_model_key(task)?)?;
        let mut writer = IndexWriter::new(&self.index_dir);
        let per_key = process_batch(&self.store, &model, &mut writer, &task.keys, &|| self.after_move())?;
        Ok(ExecOutcome { per_key, output: None })
    }

    fn after_move(&self) {
        let n = self.moved.fetch_add(1, Ordering::SeqCst) + 1;
        if self.crash_after_keys == Some(n) {
            warn!("fault injection: exiting after {n} moved keys");
            std::process::exit(137);
        }
    }

    fn train(&self, task: &TaskSpec) -> Result<ExecOutcome> {
        let data_key = task.keys[0].clone();
        let config = task.train.unwrap_or_default();
        let report = match self.train_inner(&data_key, &config) {
            Ok(r) => r,
            Err(e @ (Error::Io(_) | Error::Connection(_))) => return Err(e),
            Err(e) => TrainReport {
                data_key: data_key.clone(),
                candidate_accuracy: 0.0,
                previous_accuracy: None,
                promoted: false,
                current_key: self.store.pointer(BucketId::MlModels, CURRENT_POINTER)?.map(|o| o.key),
                labels: Vec::new(),
                error: Some(e.to_string()),
            },
        };
        let key_result = match &report.error {
            None => KeyResult::ok(&data_key),
            Some(e) => KeyResult::failed(&data_key, e.clone()),
        };
        Ok(ExecOutcome {
            per_key: vec![key_result],
            output: Some(serde_json::to_string(&report)?),
        })
    }

    fn train_inner(&self, data_key: &str, config: &classifier::TrainConfig) -> Result<TrainReport> {
        let bytes = self.store.get(&ObjectRef::new(BucketId::MlModels, data_key))?;
        let examples = parse_training_data(&bytes)?;
        let candidate: Model = classifier::train(&examples, config)?;
        let candidate_accuracy = candidate.eval_accuracy;
        let labels = candidate.labels.clone();
        let previous = classifier::current_model::<f64>(&self.store)?;
        let previous_accuracy = previous.as_ref().map(|(_, m)| m.eval_accuracy);
        let previous_key = previous.as_ref().map(|(o, _)| o.key.clone());
        classifier::select_model(&self.store, candidate, previous.map(|(_, m)| m))?;
        let current_key = self.store.pointer(BucketId::MlModels, CURRENT_POINTER)?.map(|o| o.key);
        let promoted = current_key != previous_key;
        info!(
            "trained on {data_key}: accuracy {candidate_accuracy:.4}, previous {previous_accuracy:?}, promoted {promoted}"
        );
        Ok(TrainReport {
            data_key: data_key.to_owned(),
            candidate_accuracy,
            previous_accuracy,
            promoted,
            current_key,
            labels,
            error: None,
        })
    }

    fn extract(&self, task: &TaskSpec) -> Result<ExecOutcome> {
        let mut per_key = Vec::with_capacity(task.keys.len());
        for key in &task.keys {
            let raw = ObjectRef::new(BucketId::Raw, key.clone());
            let outcome = self
                .store
                .get(&raw)
                .and_then(|pdf| self.extractor.extract(&pdf))
                .and_then(|doc| stage_article(&self.store, &doc));
            per_key.push(match outcome {
                Ok(_) => {
                    self.store.delete(&raw)?;
                    self.store.remove_sidecar(BucketId::Raw, key)?;
                    KeyResult::ok(key)
                }
                Err(e @ Error::Io(_)) => return Err(e),
                Err(e) => {
                    let reason = format!("extract: {e}");
                    if self.store.exists(BucketId::Raw, key)? {
                        self.store.put_sidecar(BucketId::Raw, key, &reason)?;
                    }
                    KeyResult::failed(key, reason)
                }
            });
        }
        Ok(ExecOutcome { per_key, output: None })
    }
}

impl TaskExecutor for PipelineExecutor {
    fn execute(&self, task: &TaskSpec) -> Result<ExecOutcome> {
        debug!(
            "executing {:?} task {} ({} keys)",
            task.kind,
            task.task_id,
            task.keys.len()
        );
        match task.kind {
            TaskKind::Process => self.process(task),
            TaskKind::Train => self.train(task),
            TaskKind::ExtractStub => self.extract(task),
        }
    }
}

enum Prepared {
    Index(String, IndexedDoc),
    Done(KeyResult),
}

/// Reads, classifies and builds the index entry for one staged key. Keys
/// already in `completed` are re-deliveries and are skipped, finishing any
/// half-done move.
fn prepare_one(store: &Store, model: &Model, key: &str) -> Result<Prepared> {
    if let Err(e) = validate_key(key) {
        return Ok(Prepared::Done(KeyResult::failed(key, format!("key: {e}"))));
    }
    let staged = ObjectRef::new(BucketId::Staging, key);
    if store.exists(BucketId::Completed, key)? {
        store.move_object(&staged, BucketId::Completed)?;
        return Ok(Prepared::Done(KeyResult::skipped(key, "already completed")));
    }
    let bytes = match store.get(&staged) {
        Ok(b) => b,
        Err(Error::NotFound(_)) => {
            return Ok(Prepared::Done(KeyResult::failed(key, "store: not in staging")));
        }
        Err(e) => return Err(e),
    };
    let fail = |reason: String| -> Result<Prepared> {
        store.put_sidecar(BucketId::Staging, key, &reason)?;
        Ok(Prepared::Done(KeyResult::failed(key, reason)))
    };
    let doc = match ArticleDoc::from_json_bytes(&bytes) {
        Ok(d) => d,
        Err(e) => return fail(format!("parse: {e}")),
    };
    if doc.staging_key() != key {
        return fail(format!("parse: article sha {} does not match key", doc.sha));
    }
    let prediction = match model.predict(&doc) {
        Ok(p) => p,
        Err(e) => return fail(format!("model: {e}")),
    };
    Ok(Prepared::Index(
        key.to_owned(),
        IndexedDoc::from_article(&doc, &prediction.label),
    ))
}

/// Processes one batch: every indexable key is written to a single index
/// segment, and only after that segment is durable are the keys moved to
/// `completed`. A crash at any point leaves a state that re-running the
/// batch converges from. `after_move` runs after each successful move.
pub fn process_batch(
    store: &Store,
    model: &Model,
    writer: &mut IndexWriter,
    keys: &[String],
    after_move: &dyn Fn(),
) -> Result<Vec<KeyResult>> {
    let mut results: Vec<Option<KeyResult>> = Vec::with_capacity(keys.len());
    let mut to_move = Vec::new();
    for (i, key) in keys.iter().enumerate() {
        match prepare_one(store, model, key)? {
            Prepared::Done(r) => results.push(Some(r)),
            Prepared::Index(key, doc) => {
                writer.add(doc)?;
                to_move.push((i, key));
                results.push(None);
            }
        }
    }
    writer.commit()?;
    for (i, key) in to_move {
        let staged = ObjectRef::new(BucketId::Staging, key.clone());
        results[i] = Some(match store.move_object(&staged, BucketId::Completed) {
            Ok(_) => {
                after_move();
                KeyResult::ok(key)
            }
            Err(e @ Error::Io(_)) => return Err(e),
            Err(e) => KeyResult::failed(key, format!("store: {e}")),
        });
    }
    Ok(results
        .into_iter()
        .map(|r| r.expect("every key has a result"))
        .collect())
}

/// [`process_batch`] for a single key.
pub fn process_one(store: &Store, model: &Model, writer: &mut IndexWriter, key: &str) -> Result<KeyResult> {
    let mut r = process_batch(store, model, writer, &[key.to_owned()], &|| {})?;
    Ok(r.pop().expect("one key"))
}
