use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;
use uuid::Uuid;

use litmine::bench::{run_grid, GridConfig};
use litmine::index::{AggField, Index};
use litmine::ingest::{enqueue_raw_pdf, ingest_dataset, DatasetSource};
use litmine::pipeline::cluster::WorkerOptions;
use litmine::pipeline::{
    check_update, index_dir, serve_index, LocalCluster, Orchestrator, PipelineConfig, PipelineExecutor, WorkerLauncher,
};
use litmine::sched::{run_worker, spawn_worker, Master, MasterClient, MasterConfig, WorkerConfig};
use litmine::store::Store;
use litmine::{Error, Result};

#[derive(Parser)]
#[command(
    name = "litmine",
    version,
    about = "Scholarly article ingestion, classification and search"
)]
struct Cli {
    /// Config file: TOML, or one `key = value` per line.
    #[arg(long, global = true, env = "LITMINE_CONFIG")]
    config: Option<PathBuf>,
    /// Store root directory.
    #[arg(long, global = true, env = "LITMINE_STORE")]
    store: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct MasterArg {
    /// Master address, host:port.
    #[arg(long, env = "LITMINE_MASTER_ADDR")]
    master: Option<String>,
    /// Run an in-process cluster with this many workers instead of using a master.
    #[arg(long, conflicts_with = "master")]
    local: Option<usize>,
}

#[derive(Args)]
struct DatasetArgs {
    /// Metadata CSV path or http(s) URL.
    #[arg(long)]
    metadata: Option<String>,
    /// Directory of `<sha>.json` article files.
    #[arg(long)]
    articles: Option<PathBuf>,
    /// Source label for rows that do not name one.
    #[arg(long)]
    source: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest whatever is new in the configured dataset; failures are reported, not raised.
    Update(DatasetArgs),
    /// Ingest a dataset, or queue raw PDFs, failing on the first hard error.
    Ingest {
        #[command(flatten)]
        dataset: DatasetArgs,
        /// PDF files to place in the raw bucket.
        #[arg(long = "pdf")]
        pdfs: Vec<PathBuf>,
    },
    /// Train a model and keep it if it beats the current one.
    Train {
        /// JSON-lines file of {"text", "label"} objects.
        #[arg(long, required_unless_present = "data_key")]
        data: Option<PathBuf>,
        /// Training data already in the ml_models bucket.
        #[arg(long)]
        data_key: Option<String>,
        #[command(flatten)]
        master: MasterArg,
    },
    /// Classify and index everything in staging.
    Process {
        #[command(flatten)]
        master: MasterArg,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Run raw PDFs through the extractor.
    Extract {
        #[command(flatten)]
        master: MasterArg,
    },
    /// Run the master; it also runs a worker unless --no-local-worker.
    Master {
        #[arg(long)]
        listen: Option<String>,
        /// Status endpoint address; defaults to the configured http port.
        #[arg(long)]
        http: Option<String>,
        #[arg(long)]
        no_http: bool,
        #[arg(long)]
        no_local_worker: bool,
    },
    /// Run a worker against a master.
    Worker {
        #[arg(long, env = "LITMINE_MASTER_ADDR")]
        master: Option<String>,
        #[arg(long)]
        slots: Option<u32>,
        #[arg(long)]
        heartbeat_ms: Option<u64>,
        /// Fault injection: exit abruptly after moving this many keys.
        #[arg(long, hide = true)]
        crash_after_keys: Option<usize>,
    },
    /// Print a job's summary.
    Status {
        job_id: Uuid,
        #[arg(long, env = "LITMINE_MASTER_ADDR")]
        master: Option<String>,
        /// Block until the job finishes.
        #[arg(long)]
        wait: bool,
    },
    /// Ask a master to stop.
    Shutdown {
        #[arg(long, env = "LITMINE_MASTER_ADDR")]
        master: Option<String>,
    },
    /// Serve /search, /agg and /stats over HTTP.
    Serve {
        #[arg(long)]
        listen: Option<String>,
        /// Serve a snapshot archive instead of the live index.
        #[arg(long)]
        snapshot: Option<PathBuf>,
    },
    /// Full-text search.
    Query {
        text: String,
        #[arg(long, default_value_t = 10)]
        limit: usize,
    },
    /// Terms aggregation over category, countries or source.
    Agg {
        #[arg(long)]
        field: AggField,
        #[arg(long, default_value_t = 10)]
        top: usize,
        /// Emit CSV instead of JSON.
        #[arg(long)]
        csv: bool,
    },
    /// Write an index snapshot archive.
    Snapshot { dst: PathBuf },
    /// Replace the index with a snapshot archive.
    Restore {
        src: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Measure processing time over corpus sizes and worker counts.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = [1000, 2000, 3000, 4000, 5000])]
        n: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 3, 4])]
        m: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value = "bench-report.json")]
        out: PathBuf,
        /// Scratch directory for per-run stores.
        #[arg(long)]
        workdir: Option<PathBuf>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Run workers as threads rather than processes.
        #[arg(long)]
        threads: bool,
    },
}

fn emit<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(store) = &cli.store {
        config.store_root = store.clone();
    }
    Ok(config)
}

fn apply_dataset(config: &mut PipelineConfig, args: &DatasetArgs) {
    if let Some(m) = &args.metadata {
        config.metadata = Some(m.clone());
    }
    if let Some(a) = &args.articles {
        config.articles = Some(a.clone());
    }
    if let Some(s) = &args.source {
        config.source = s.clone();
    }
}

/// Runs `f` against either the configured master or a throwaway local cluster.
fn with_orchestrator<T>(
    config: &PipelineConfig,
    store: &Store,
    master: &MasterArg,
    f: impl FnOnce(&Orchestrator) -> Result<T>,
) -> Result<T> {
    match master.local {
        Some(m) => {
            let cluster = LocalCluster::start(
                store.clone(),
                WorkerLauncher::Threads,
                &vec![WorkerOptions::default(); m.max(1)],
                config.scheduler,
            )?;
            let out = f(&cluster.orchestrator_with(config));
            cluster.shutdown()?;
            out
        }
        None => {
            let mut config = config.clone();
            if let Some(addr) = &master.master {
                config.master_addr = addr.clone();
            }
            f(&Orchestrator::new(store.clone(), &config))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = load_config(&cli)?;
    let store = || Store::open(&config.store_root);
    match cli.command {
        Command::Update(args) => {
            apply_dataset(&mut config, &args);
            let store = Store::open(&config.store_root)?;
            let report = check_update(&store, &config.dataset()?);
            emit(&report)?;
            if let Some(e) = report.error {
                return Err(Error::Connection(e));
            }
        }
        Command::Ingest { dataset, pdfs } => {
            apply_dataset(&mut config, &dataset);
            let store = Store::open(&config.store_root)?;
            for pdf in &pdfs {
                let object = enqueue_raw_pdf(&store, &std::fs::read(pdf)?)?;
                emit(&json!({ "pdf": pdf, "object": object.to_string() }))?;
            }
            if config.metadata.is_some() || pdfs.is_empty() {
                let source: DatasetSource = config.dataset()?;
                emit(&ingest_dataset(&store, &source)?)?;
            }
        }
        Command::Train { data, data_key, master } => {
            let store = store()?;
            with_orchestrator(&config, &store, &master, |o| {
                let key = match (data, data_key) {
                    (Some(path), _) => o.upload_training_data(&std::fs::read(path)?)?,
                    (None, Some(key)) => key,
                    (None, None) => return Err(Error::validation("pass --data or --data-key")),
                };
                emit(&o.run_training_job(&key)?)
            })?;
        }
        Command::Process { master, batch_size } => {
            if let Some(b) = batch_size {
                config.batch_size = b;
                config.validate()?;
            }
            let store = store()?;
            with_orchestrator(&config, &store, &master, |o| emit(&o.run_processing_job()?))?;
        }
        Command::Extract { master } => {
            let store = store()?;
            with_orchestrator(&config, &store, &master, |o| emit(&o.run_extraction_job()?))?;
        }
        Command::Master {
            listen,
            http,
            no_http,
            no_local_worker,
        } => {
            let store = store()?;
            let listen = listen.unwrap_or_else(|| {
                let port = config.master_addr.rsplit(':').next().unwrap_or("7070");
                format!("0.0.0.0:{port}")
            });
            let http = (!no_http).then(|| http.unwrap_or_else(|| format!("0.0.0.0:{}", config.http_port)));
            let master = Master::start(MasterConfig {
                listen,
                http,
                scheduler: config.scheduler,
            })?;
            emit(&json!({
                "master": master.addr().to_string(),
                "http": master.http_addr().map(|a| a.to_string()),
                "local_worker": !no_local_worker,
            }))?;
            let local = if no_local_worker {
                None
            } else {
                let exec = PipelineExecutor::new(store);
                exec.preload()?;
                let mut wc = WorkerConfig::new(master.connect_addr().to_string());
                wc.slots = config.slots;
                wc.heartbeat_interval = config.scheduler.heartbeat_interval;
                Some(spawn_worker(wc, Arc::new(exec))?)
            };
            master.join();
            if let Some(w) = local {
                let _ = w.join();
            }
        }
        Command::Worker {
            master,
            slots,
            heartbeat_ms,
            crash_after_keys,
        } => {
            let store = store()?;
            let exec = PipelineExecutor::new(store).crash_after_keys(crash_after_keys);
            exec.preload()?;
            let mut wc = WorkerConfig::new(master.unwrap_or(config.master_addr.clone()));
            wc.slots = slots.unwrap_or(config.slots);
            wc.heartbeat_interval = heartbeat_ms
                .map(Duration::from_millis)
                .unwrap_or(config.scheduler.heartbeat_interval);
            emit(&json!({ "worker_id": wc.worker_id, "master": wc.master }))?;
            run_worker(wc, Arc::new(exec))?;
        }
        Command::Status { job_id, master, wait } => {
            let mut client = MasterClient::connect(&master.unwrap_or(config.master_addr.clone()))?;
            let summary = if wait {
                client.wait(job_id)?
            } else {
                client.status(job_id)?
            };
            emit(&summary)?;
        }
        Command::Shutdown { master } => {
            MasterClient::connect(&master.unwrap_or(config.master_addr.clone()))?.shutdown()?;
        }
        Command::Serve { listen, snapshot } => {
            let index = match snapshot {
                Some(src) => {
                    let mut index = Index::in_memory();
                    index.restore(src, false)?;
                    index
                }
                None => Index::open(index_dir(&config.store_root))?,
            };
            let listen = listen.unwrap_or_else(|| format!("0.0.0.0:{}", config.http_port));
            let handle = serve_index(index, &listen)?;
            emit(&json!({ "listening": handle.addr().to_string() }))?;
            handle.join();
        }
        Command::Query { text, limit } => {
            let index = Index::open(index_dir(&config.store_root))?;
            for hit in index.search(&text, limit)? {
                emit(&hit)?;
            }
        }
        Command::Agg { field, top, csv } => {
            let index = Index::open(index_dir(&config.store_root))?;
            let result = index.aggregate(field, top);
            if csv {
                print!("{}", result.to_csv());
            } else {
                emit(&result)?;
            }
        }
        Command::Snapshot { dst } => {
            let index = Index::open(index_dir(&config.store_root))?;
            emit(&index.snapshot(dst)?)?;
        }
        Command::Restore { src, force } => {
            let mut index = Index::open(index_dir(&config.store_root))?;
            index.restore(src, force)?;
            emit(&json!({ "doc_count": index.doc_count() }))?;
        }
        Command::Bench {
            n,
            m,
            repeats,
            out,
            workdir,
            seed,
            threads,
        } => {
            let launcher = if threads {
                WorkerLauncher::Threads
            } else {
                WorkerLauncher::Processes {
                    exe: std::env::current_exe()?,
                }
            };
            // A scratch directory we create is removed with its guard; a
            // caller's --workdir is left in place.
            let temp = match workdir {
                Some(_) => None,
                None => Some(tempfile::Builder::new().prefix("litmine-bench").tempdir()?),
            };
            let scratch = workdir.unwrap_or_else(|| temp.as_ref().expect("temp dir").path().to_path_buf());
            let mut grid = GridConfig::new(&scratch, launcher);
            grid.ns = n;
            grid.ms = m;
            grid.repeats = repeats;
            grid.seed = seed;
            grid.batch_size = config.batch_size;
            let report = run_grid(&grid)?;
            let csv = report.write(&out)?;
            drop(temp);
            for p in &report.grid {
                emit(p)?;
            }
            emit(&json!({
                "linear_fit": report.linear_fit,
                "per_article_spread": report.per_article_spread(),
                "outputs_equivalent": report.outputs_equivalent,
                "report": out,
                "csv": csv,
            }))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "{}",
                json!({ "error": e.to_string(), "kind": e.kind(), "exit_code": e.exit_code() })
            );
            ExitCode::from(e.exit_code())
        }
    }
}
