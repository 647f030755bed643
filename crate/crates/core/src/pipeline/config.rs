use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;

use crate::classifier::{TrainConfig, CURRENT_POINTER};
use crate::error::{Error, Result};
use crate::ingest::{DatasetSource, DEFAULT_SOURCE};
use crate::sched::{SchedulerConfig, DEFAULT_BATCH_SIZE, DEFAULT_HTTP_PORT, DEFAULT_MASTER_PORT, MAX_TASK_KEYS};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub store_root: PathBuf,
    pub master_addr: String,
    pub batch_size: usize,
    /// `current` to follow the pointer, or an explicit `ml_models` key.
    pub model_ref: String,
    pub http_port: u16,
    pub slots: u32,
    pub scheduler: SchedulerConfig,
    pub train: TrainConfig,
    /// Metadata CSV path or URL for `update`.
    pub metadata: Option<String>,
    pub articles: Option<PathBuf>,
    pub source: String,
}

impl Default for PipelineConfig {
    fn default() -> PipelineConfig {
        PipelineConfig {
            store_root: PathBuf::from("litmine-data"),
            master_addr: format!("127.0.0.1:{DEFAULT_MASTER_PORT}"),
            batch_size: DEFAULT_BATCH_SIZE,
            model_ref: CURRENT_POINTER.into(),
            http_port: DEFAULT_HTTP_PORT,
            slots: 1,
            scheduler: SchedulerConfig::default(),
            train: TrainConfig::default(),
            metadata: None,
            articles: None,
            source: DEFAULT_SOURCE.into(),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::validation(format!("config key {key}: cannot parse {value:?}")))
}

impl PipelineConfig {
    /// Reads a config file. TOML is tried first (nested tables flatten to
    /// dotted keys); otherwise each non-comment line is `key = value`.
    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text = fs::read_to_string(path)?;
        let mut config = PipelineConfig::default();
        config.apply_text(&text)?;
        Ok(config)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        match text.parse::<toml::Table>() {
            Ok(table) => {
                let mut flat = Vec::new();
                flatten("", &table, &mut flat);
                for (k, v) in flat {
                    self.set(&k, &v)?;
                }
            }
            Err(_) => {
                for (i, line) in text.lines().enumerate() {
                    let line = line.trim();
                    if line.is_empty() || line.starts_with('#') {
                        continue;
                    }
                    let (k, v) = line
                        .split_once('=')
                        .ok_or_else(|| Error::validation(format!("config line {}: expected key = value", i + 1)))?;
                    self.set(k.trim(), v.trim().trim_matches('"'))?;
                }
            }
        }
        self.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "store_root" | "store" => self.store_root = PathBuf::from(value),
            "master_addr" | "master" => self.master_addr = value.to_owned(),
            "batch_size" => self.batch_size = num(key, value)?,
            "model_ref" => self.model_ref = value.to_owned(),
            "http_port" => self.http_port = num(key, value)?,
            "slots" => self.slots = num(key, value)?,
            "heartbeat_ms" | "scheduler.heartbeat_ms" => {
                self.scheduler.heartbeat_interval = Duration::from_millis(num(key, value)?)
            }
            "missed_heartbeats" | "scheduler.missed_heartbeats" => self.scheduler.missed_heartbeats = num(key, value)?,
            "task_timeout_ms" | "scheduler.task_timeout_ms" => {
                self.scheduler.task_timeout = Duration::from_millis(num(key, value)?)
            }
            "max_attempts" | "scheduler.max_attempts" => self.scheduler.max_attempts = num(key, value)?,
            "l2" | "train.l2" => self.train.l2 = num(key, value)?,
            "epochs" | "train.epochs" => self.train.epochs = num(key, value)?,
            "seed" | "train.seed" => self.train.seed = num(key, value)?,
            "metadata" | "dataset.metadata" => self.metadata = Some(value.to_owned()),
            "articles" | "dataset.articles" => self.articles = Some(PathBuf::from(value)),
            "source" | "dataset.source" => self.source = value.to_owned(),
            other => return Err(Error::validation(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_TASK_KEYS).contains(&self.batch_size) {
            return Err(Error::validation(format!(
                "batch_size must be within 1..={MAX_TASK_KEYS}, got {}",
                self.batch_size
            )));
        }
        if self.slots == 0 {
            return Err(Error::validation("slots must be at least 1"));
        }
        self.scheduler.validate()?;
        self.train.validate()
    }

    pub fn dataset(&self) -> Result<DatasetSource> {
        let metadata = self
            .metadata
            .clone()
            .ok_or_else(|| Error::validation("no dataset configured; set metadata (and articles)"))?;
        Ok(DatasetSource {
            metadata,
            articles: self.articles.clone(),
            default_source: self.source.clone(),
        })
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, String)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            toml::Value::String(s) => out.push((key, s.clone())),
            other => out.push((key, other.to_string())),
        }
    }
}
