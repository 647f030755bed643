//! Scaling benchmark: processing wall time over a grid of corpus sizes and
//! worker counts.

pub mod corpus;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use log::info;
use serde::{Deserialize, Serialize};

use crate::classifier::{self, CURRENT_POINTER};
use crate::error::{Error, Result};
use crate::index::Index;
use crate::pipeline::cluster::WorkerOptions;
use crate::pipeline::{index_dir, LocalCluster, WorkerLauncher};
use crate::sched::{SchedulerConfig, DEFAULT_BATCH_SIZE};
use crate::store::{BucketId, Store};
use crate::Model;

pub use corpus::{gen_articles, gen_corpus, training_examples, write_dataset, CorpusGenerator, TOPICS};

/// Accuracy the demo model must reach on its held-out split.
pub const SELF_CHECK_ACCURACY: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares of `y` on `x`.
pub fn linear_fit(points: &[(f64, f64)]) -> Option<LinearFit> {
    let n = points.len() as f64;
    if points.len() < 2 {
        return None;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = points.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let ss_tot: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Some(LinearFit { slope, intercept, r2 })
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.is_empty() {
        f64::NAN
    } else if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub n_articles: usize,
    pub m_workers: usize,
    /// Median over repeats.
    pub wall_ms: f64,
    pub per_article_ms: f64,
    /// `wall_ms` at one worker divided by `wall_ms` here, same `n`.
    pub speedup: f64,
    pub runs_ms: Vec<f64>,
    pub valid: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub grid: Vec<BenchPoint>,
    /// Fit of `wall_ms` against `n` at one worker.
    pub linear_fit: Option<LinearFit>,
    pub model_accuracy: f64,
    /// Whether every run at the same `n` produced the same `doc_id -> label` map.
    pub outputs_equivalent: bool,
    pub notes: Vec<String>,
}

impl BenchReport {
    pub fn point(&self, n: usize, m: usize) -> Option<&BenchPoint> {
        self.grid.iter().find(|p| p.n_articles == n && p.m_workers == m)
    }

    /// Largest over smallest `per_article_ms` at one worker.
    pub fn per_article_spread(&self) -> Option<f64> {
        let xs: Vec<f64> = self
            .grid
            .iter()
            .filter(|p| p.m_workers == 1 && p.valid)
            .map(|p| p.per_article_ms)
            .collect();
        if xs.is_empty() {
            return None;
        }
        let max = xs.iter().cloned().fold(f64::MIN, f64::max);
        let min = xs.iter().cloned().fold(f64::MAX, f64::min);
        Some(max / min)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "n_articles",
            "m_workers",
            "wall_ms",
            "per_article_ms",
            "speedup",
            "valid",
        ])
        .expect("in-memory csv");
        for p in &self.grid {
            w.write_record([
                p.n_articles.to_string(),
                p.m_workers.to_string(),
                format!("{:.3}", p.wall_ms),
                format!("{:.4}", p.per_article_ms),
                format!("{:.4}", p.speedup),
                p.valid.to_string(),
            ])
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
    }

    /// Writes `path` as JSON and the same table as CSV next to it.
    pub fn write(&self, path: &Path) -> Result<PathBuf> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        let csv_path = path.with_extension("csv");
        fs::write(&csv_path, self.to_csv())?;
        Ok(csv_path)
    }
}

#[derive(Debug, Clone)]
pub struct GridConfig {
    pub ns: Vec<usize>,
    pub ms: Vec<usize>,
    pub repeats: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub launcher: WorkerLauncher,
    /// Scratch directory; one store per run is created beneath it.
    pub workdir: PathBuf,
    pub training_examples: usize,
}

impl GridConfig {
    pub fn new(workdir: impl Into<PathBuf>, launcher: WorkerLauncher) -> GridConfig {
        GridConfig {
            ns: vec![1000, 2000, 3000, 4000, 5000],
            ms: vec![1, 2, 3, 4],
            repeats: 3,
            seed: 7,
            batch_size: DEFAULT_BATCH_SIZE,
            launcher,
            workdir: workdir.into(),
            training_examples: 800,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ns.is_empty() || self.ms.is_empty() || self.ns.contains(&0) || self.ms.contains(&0) {
            return Err(Error::validation("grid needs non-empty positive n and m sets"));
        }
        if self.repeats == 0 {
            return Err(Error::validation("repeats must be at least 1"));
        }
        Ok(())
    }
}

/// Trains the demo model on synthetic data and checks that it clears
/// [`SELF_CHECK_ACCURACY`] on held-out examples.
pub fn self_check(examples: usize, seed: u64) -> Result<Model> {
    let data = training_examples(examples, seed.wrapping_add(1));
    let model: Model = classifier::train(&data, &classifier::TrainConfig::default())?;
    if model.eval_accuracy < SELF_CHECK_ACCURACY {
        return Err(Error::validation(format!(
            "demo model reached {:.3} held-out accuracy, needs {SELF_CHECK_ACCURACY}",
            model.eval_accuracy
        )));
    }
    Ok(model)
}

fn copy_tree(src: &Path, dst: &Path) -> Result<()> {
    fs::create_dir_all(dst)?;
    for entry in fs::read_dir(src)? {
        let entry = entry?;
        let to = dst.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            copy_tree(&entry.path(), &to)?;
        } else {
            fs::copy(entry.path(), &to)?;
        }
    }
    Ok(())
}

/// Flushes dirty pages left by earlier runs so their writeback does not land
/// inside the timed region; every key move waits on a journal commit.
fn settle() {
    if let Err(e) = std::process::Command::new("sync").status() {
        log::debug!("sync unavailable: {e}");
    }
}

struct RunOutput {
    wall_ms: f64,
    labels: BTreeMap<String, String>,
}

fn run_point(config: &GridConfig, template: &Path, run_dir: &Path, n: usize, m: usize) -> Result<RunOutput> {
    if run_dir.exists() {
        fs::remove_dir_all(run_dir)?;
    }
    // Copies rather than hard links: unlinking an inode shared with the
    // template costs extra journaled metadata inside the timed region.
    copy_tree(template, run_dir)?;
    let store = Store::open(run_dir)?;
    let scheduler = SchedulerConfig {
        heartbeat_interval: Duration::from_millis(500),
        ..SchedulerConfig::default()
    };
    let cluster = LocalCluster::start(
        store.clone(),
        config.launcher.clone(),
        &vec![WorkerOptions::default(); m],
        scheduler,
    )?;
    let mut pc = cluster.config().clone();
    pc.batch_size = config.batch_size;
    settle();
    let summary = cluster.orchestrator_with(&pc).run_processing_job()?;
    cluster.shutdown()?;
    if summary.failed_permanently > 0 || summary.keys.failed > 0 || summary.keys.ok as usize != n {
        return Err(Error::Integrity(format!(
            "job did not process every article: {summary:?}"
        )));
    }
    let staged = store.count(BucketId::Staging)?;
    let completed = store.count(BucketId::Completed)?;
    let index = Index::open(index_dir(store.root()))?;
    if staged != 0 || completed != n || index.doc_count() != n {
        return Err(Error::Integrity(format!(
            "after run: staging {staged}, completed {completed}, indexed {}",
            index.doc_count()
        )));
    }
    Ok(RunOutput {
        wall_ms: summary.wall_time_ms,
        labels: index.labels(),
    })
}

/// Runs the grid. Every (n, m, repeat) starts from a fresh copy of a
/// per-`n` template store and a fresh master and workers; wall time is the
/// master's submit-to-completion time.
pub fn run_grid(config: &GridConfig) -> Result<BenchReport> {
    config.validate()?;
    fs::create_dir_all(&config.workdir)?;
    let model = self_check(config.training_examples, config.seed)?;
    info!("demo model held-out accuracy {:.4}", model.eval_accuracy);

    let mut templates = Vec::with_capacity(config.ns.len());
    for &n in &config.ns {
        let template = config.workdir.join(format!("template-{n}"));
        if template.exists() {
            fs::remove_dir_all(&template)?;
        }
        let store = Store::open(&template)?;
        gen_corpus(&store, n, config.seed)?;
        let object = classifier::save_model(&store, &model)?;
        store.set_pointer(BucketId::MlModels, CURRENT_POINTER, &object.key)?;
        templates.push(template);
    }

    // Each repeat sweeps the whole grid, so slow drift in machine speed is
    // spread over every point instead of biasing whichever ran last.
    let cells: Vec<(usize, usize)> = config
        .ns
        .iter()
        .flat_map(|&n| config.ms.iter().map(move |&m| (n, m)))
        .collect();
    let mut runs: Vec<Vec<f64>> = vec![Vec::new(); cells.len()];
    let mut errors: Vec<Option<String>> = vec![None; cells.len()];
    let mut references: BTreeMap<usize, BTreeMap<String, String>> = BTreeMap::new();
    let mut notes = Vec::new();
    let mut equivalent = true;
    for r in 0..config.repeats {
        for (i, &(n, m)) in cells.iter().enumerate() {
            let template = &templates[config.ns.iter().position(|&x| x == n).expect("n in grid")];
            let run_dir = config.workdir.join(format!("run-{n}-{m}-{r}"));
            match run_point(config, template, &run_dir, n, m) {
                Ok(out) => {
                    info!("n={n} m={m} repeat={r}: {:.1} ms", out.wall_ms);
                    runs[i].push(out.wall_ms);
                    match references.get(&n) {
                        None => {
                            references.insert(n, out.labels);
                        }
                        Some(reference) if *reference != out.labels => {
                            equivalent = false;
                            notes.push(format!("labels differ at n={n} m={m} repeat={r}"));
                        }
                        Some(_) => {}
                    }
                }
                Err(e) => {
                    notes.push(format!("n={n} m={m} repeat={r} failed: {e}"));
                    errors[i] = Some(e.to_string());
                }
            }
            let _ = fs::remove_dir_all(&run_dir);
        }
    }
    for template in &templates {
        fs::remove_dir_all(template)?;
    }

    let mut grid: Vec<BenchPoint> = cells
        .iter()
        .zip(runs.into_iter().zip(errors))
        .map(|(&(n, m), (runs, error))| {
            let wall_ms = median(&runs);
            BenchPoint {
                n_articles: n,
                m_workers: m,
                wall_ms,
                per_article_ms: wall_ms / n as f64,
                speedup: f64::NAN,
                runs_ms: runs,
                valid: error.is_none(),
                error,
            }
        })
        .collect();
    let base: BTreeMap<usize, f64> = grid
        .iter()
        .filter(|p| p.m_workers == 1 && p.valid)
        .map(|p| (p.n_articles, p.wall_ms))
        .collect();
    for p in &mut grid {
        p.speedup = match base.get(&p.n_articles) {
            Some(b) if p.valid => b / p.wall_ms,
            _ => f64::NAN,
        };
    }

    let single: Vec<(f64, f64)> = grid
        .iter()
        .filter(|p| p.m_workers == 1 && p.valid)
        .map(|p| (p.n_articles as f64, p.wall_ms))
        .collect();
    Ok(BenchReport {
        grid,
        linear_fit: linear_fit(&single),
        model_accuracy: model.eval_accuracy,
        outputs_equivalent: equivalent,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_recovers_a_line() {
        let pts: Vec<(f64, f64)> = (1..=5)
            .map(|i| (i as f64 * 1000.0, 3.0 * i as f64 * 1000.0 + 50.0))
            .collect();
        let f = linear_fit(&pts).unwrap();
        assert!((f.slope - 3.0).abs() < 1e-9);
        assert!((f.intercept - 50.0).abs() < 1e-6);
        assert!((f.r2 - 1.0).abs() < 1e-12);
        assert!(linear_fit(&pts[..1]).is_none());
    }

    #[test]
    fn fit_matches_hand_computation() {
        // x = 1,2,3; y = 1,3,2: slope 0.5, intercept 1, r2 = 0.25.
        let f = linear_fit(&[(1.0, 1.0), (2.0, 3.0), (3.0, 2.0)]).unwrap();
        assert!((f.slope - 0.5).abs() < 1e-12);
        assert!((f.intercept - 1.0).abs() < 1e-12);
        assert!((f.r2 - 0.25).abs() < 1e-12);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn self_check_passes() {
        let m = self_check(400, 3).unwrap();
        assert!(m.eval_accuracy >= SELF_CHECK_ACCURACY);
        assert_eq!(m.labels.len(), TOPICS.len());
    }

    #[test]
    fn tiny_grid_with_threads() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = GridConfig::new(dir.path(), WorkerLauncher::Threads);
        cfg.ns = vec![20, 40];
        cfg.ms = vec![1, 2];
        cfg.repeats = 1;
        cfg.batch_size = 10;
        cfg.training_examples = 200;
        let report = run_grid(&cfg).unwrap();
        assert_eq!(report.grid.len(), 4);
        assert!(report.grid.iter().all(|p| p.valid), "{:?}", report.notes);
        assert!(report.outputs_equivalent);
        assert_eq!(report.point(20, 1).unwrap().speedup, 1.0);
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 5);
    }
}
