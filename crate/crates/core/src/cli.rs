//! Command-line surface and the config-driven pipeline behind it.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{init_params, Hyper, ModelParams};
use crate::dataio::{
    generate_synthetic, l2_normalize, load_embeddings, save_embeddings_with_hash, EmbeddingSet,
    Format, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metrics::{group_report, FairnessReport, Metric};
use crate::neighborhood::{knn_all, NeighborCluster};
use crate::postprocess::{
    extract_links, merge, read_partition_csv, write_partition_csv, Partition, DEFAULT_THRESHOLD,
};
use crate::trainer::{
    gradient_check, predict, train_on_clusters, EpochLog, GradCheckConfig, GradCheckReport,
    TrainConfig,
};

/// Where embeddings come from: a file on disk or a synthetic recipe.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub format: Option<Format>,
    pub synthetic: Option<SyntheticSpec>,
}

impl DataConfig {
    fn validate(&self, what: &str) -> Result<()> {
        match (&self.path, &self.synthetic) {
            (Some(_), Some(_)) => Err(Error::Config(format!(
                "{what}: set either path or synthetic, not both"
            ))),
            (None, None) => Err(Error::Config(format!(
                "{what}: needs a path or a synthetic spec"
            ))),
            (None, Some(s)) => s.validate(),
            (Some(p), None) if !p.exists() => Err(Error::Config(format!(
                "{what}: {} does not exist",
                p.display()
            ))),
            _ => Ok(()),
        }
    }

    /// Files are L2-normalized after loading.
    pub fn load(&self) -> Result<EmbeddingSet> {
        match (&self.path, &self.synthetic) {
            (Some(p), _) => l2_normalize(&load_embeddings(
                p,
                self.format.unwrap_or_else(|| Format::from_path(p)),
            )?),
            (None, Some(s)) => generate_synthetic(s),
            (None, None) => Err(Error::Config("no data source".into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnnConfig {
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub k: usize,
    pub n_block: usize,
    pub n_head: usize,
    pub ff_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: 4,
            n_block: 6,
            n_head: 4,
            ff_dim: 1024,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocessConfig {
    pub threshold: f64,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub delta_dp_metric: Metric,
}

/// One experiment bundle. The embedding width comes from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub data: DataConfig,
    /// Held-out set for clustering and evaluation; the training data is used when absent.
    pub eval_data: Option<DataConfig>,
    pub knn: KnnConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub postprocess: PostprocessConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn hyper(&self, d: usize) -> Hyper {
        Hyper {
            d,
            n: self.knn.n,
            k: self.model.k,
            n_block: self.model.n_block,
            n_head: self.model.n_head,
            ff_dim: self.model.ff_dim,
        }
    }

    /// Checks that need no data on disk.
    pub fn validate(&self) -> Result<()> {
        self.data.validate("data")?;
        if let Some(e) = &self.eval_data {
            e.validate("eval_data")?;
        }
        if self.knn.n < 2 {
            return Err(Error::Config("knn.n must be at least 2".into()));
        }
        if self.model.k == 0 || !self.knn.n.is_multiple_of(self.model.k) {
            return Err(Error::Config(format!(
                "k={} must divide n={}",
                self.model.k, self.knn.n
            )));
        }
        if self.model.n_head == 0 || self.model.n_block == 0 || self.model.ff_dim == 0 {
            return Err(Error::Config(
                "n_head, n_block and ff_dim must be positive".into(),
            ));
        }
        let t = self.postprocess.threshold;
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::Config(format!("threshold {t} outside (0, 1)")));
        }
        self.train_config().validate()
    }

    /// Training settings with the pipeline seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// SHA-256 over the canonical JSON form, ignoring the output location.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Everything a full in-memory run produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
    pub partition: Partition,
    pub report: FairnessReport,
}

pub fn truth_partition(set: &EmbeddingSet) -> Result<Partition> {
    set.labels
        .as_deref()
        .map(Partition::from_labels)
        .ok_or_else(|| Error::Invalid("evaluation needs identity labels".into()))
}

pub fn evaluate(pred: &Partition, set: &EmbeddingSet, metric: Metric) -> Result<FairnessReport> {
    let truth = truth_partition(set)?;
    let groups = set.groups.clone().unwrap_or_else(|| vec![0; set.len()]);
    group_report(pred, &truth, &groups, metric)
}

pub fn cluster_set(
    set: &EmbeddingSet,
    params: &ModelParams,
    threshold: f64,
    exec: Exec,
) -> Result<Partition> {
    let clusters = knn_all(set, params.hyper.n, exec)?;
    let q = predict(set, &clusters, params, exec)?;
    merge(&extract_links(&clusters, &q, threshold, exec)?, set.len())
}

/// Train, cluster the evaluation set and score it, without touching disk.
pub fn run_in_memory(cfg: &PipelineConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let train_set = cfg.data.load()?;
    let eval_set = match &cfg.eval_data {
        Some(e) => e.load()?,
        None => train_set.clone(),
    };
    let hyper = cfg.hyper(train_set.dim());
    hyper.validate()?;
    let tc = cfg.train_config();
    let clusters = knn_all(&train_set, hyper.n, tc.exec)?;
    let (params, log) =
        train_on_clusters(&train_set, &clusters, init_params(hyper, cfg.seed)?, &tc)?;
    let partition = cluster_set(&eval_set, &params, cfg.postprocess.threshold, tc.exec)?;
    let report = evaluate(&partition, &eval_set, cfg.eval.delta_dp_metric)?;
    Ok(RunOutcome {
        params,
        log,
        partition,
        report,
    })
}

#[derive(Debug, Parser)]
#[command(
    name = "fairclust",
    version,
    about = "Fair clustering of face-style embeddings"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Pipeline config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for data-parallel stages.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Materialize the configured embeddings to disk.
    Generate,
    /// Build and cache the kNN clusters of the training data.
    Knn,
    /// Train a model; writes a checkpoint and a JSONL log.
    Train,
    /// Cluster the evaluation data with a trained checkpoint.
    Cluster {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Score a partition against the evaluation labels.
    Evaluate {
        #[arg(long)]
        partition: Option<PathBuf>,
    },
    /// Finite-difference check of the training gradients.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
    },
    /// Train, cluster and evaluate in one go.
    Pipeline,
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::NonFinite { .. } => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
pub const EVAL_EMBEDDINGS_FILE: &str = "eval_embeddings.bin";
pub const CLUSTERS_FILE: &str = "clusters.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CHECKPOINT_META_FILE: &str = "model.meta.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const PARTITION_FILE: &str = "partition.csv";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const REPORT_CSV_FILE: &str = "report.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.json";

#[derive(Debug, Serialize, Deserialize)]
struct ClusterCache {
    config_hash: String,
    n: usize,
    clusters: Vec<NeighborCluster>,
}

#[derive(Serialize)]
struct LogLine<'a> {
    config_hash: &'a str,
    #[serde(flatten)]
    entry: &'a EpochLog,
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    config_hash: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

/// Tracks files written during one command so a failure can remove them.
struct Run {
    cfg: PipelineConfig,
    hash: String,
    dir: PathBuf,
    exec: Exec,
    written: Vec<PathBuf>,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(name);
        self.written.push(path.clone());
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    fn json<T: Serialize>(&mut self, name: &str, body: &T) -> Result<PathBuf> {
        let stamped = Stamped {
            config_hash: &self.hash,
            body,
        };
        let text =
            serde_json::to_vec_pretty(&stamped).map_err(|e| Error::Invalid(e.to_string()))?;
        self.write(name, &text)
    }

    fn train_set(&self) -> Result<EmbeddingSet> {
        self.cfg.data.load()
    }

    fn eval_set(&self) -> Result<EmbeddingSet> {
        self.cfg.eval_data.as_ref().unwrap_or(&self.cfg.data).load()
    }

    fn generate(&mut self) -> Result<()> {
        let set = self.train_set()?;
        let path = self.path(EMBEDDINGS_FILE);
        self.written.push(path.clone());
        save_embeddings_with_hash(&set, &path, Format::Binary, Some(&self.hash))?;
        if let Some(e) = &self.cfg.eval_data {
            let set = e.load()?;
            let path = self.path(EVAL_EMBEDDINGS_FILE);
            self.written.push(path.clone());
            save_embeddings_with_hash(&set, &path, Format::Binary, Some(&self.hash))?;
        }
        Ok(())
    }

    fn clusters(&mut self, set: &EmbeddingSet, write: bool) -> Result<Vec<NeighborCluster>> {
        let cache_path = self.path(CLUSTERS_FILE);
        if !write {
            if let Ok(text) = fs::read(&cache_path) {
                if let Ok(cache) = serde_json::from_slice::<ClusterCache>(&text) {
                    if cache.config_hash == self.hash
                        && cache.n == self.cfg.knn.n
                        && cache.clusters.len() == set.len()
                    {
                        log::info!("reusing {}", cache_path.display());
                        return Ok(cache.clusters);
                    }
                }
            }
        }
        let clusters = knn_all(set, self.cfg.knn.n, self.exec)?;
        let cache = ClusterCache {
            config_hash: self.hash.clone(),
            n: self.cfg.knn.n,
            clusters,
        };
        let text = serde_json::to_vec(&cache).map_err(|e| Error::Invalid(e.to_string()))?;
        self.write(CLUSTERS_FILE, &text)?;
        Ok(cache.clusters)
    }

    fn train(&mut self) -> Result<ModelParams> {
        let set = self.train_set()?;
        let hyper = self.cfg.hyper(set.dim());
        hyper.validate()?;
        let clusters = self.clusters(&set, false)?;
        let tc = TrainConfig {
            exec: self.exec,
            ..self.cfg.train_config()
        };
        let (params, log) =
            train_on_clusters(&set, &clusters, init_params(hyper, self.cfg.seed)?, &tc)?;
        let mut lines = Vec::new();
        for entry in &log {
            serde_json::to_writer(
                &mut lines,
                &LogLine {
                    config_hash: &self.hash,
                    entry,
                },
            )
            .map_err(|e| Error::Invalid(e.to_string()))?;
            lines.push(b'\n');
        }
        self.write(TRAIN_LOG_FILE, &lines)?;
        let ckpt = self.path(CHECKPOINT_FILE);
        self.written.push(ckpt.clone());
        params.save(&ckpt)?;
        self.json(CHECKPOINT_META_FILE, &hyper)?;
        Ok(params)
    }

    fn cluster(&mut self, params: &ModelParams, threshold: Option<f64>) -> Result<Partition> {
        let set = self.eval_set()?;
        if set.dim() != params.hyper.d {
            return Err(Error::DimensionMismatch {
                expected: params.hyper.d,
                got: set.dim(),
            });
        }
        let threshold = threshold.unwrap_or(self.cfg.postprocess.threshold);
        let partition = cluster_set(&set, params, threshold, self.exec)?;
        let path = self.path(PARTITION_FILE);
        self.written.push(path.clone());
        write_partition_csv(&partition, &path, Some(&self.hash))?;
        Ok(partition)
    }

    fn evaluate(&mut self, partition: &Partition) -> Result<FairnessReport> {
        let set = self.eval_set()?;
        if partition.len() != set.len() {
            return Err(Error::LengthMismatch {
                what: "partition",
                expected: set.len(),
                got: partition.len(),
            });
        }
        let report = evaluate(partition, &set, self.cfg.eval.delta_dp_metric)?;
        self.json(REPORT_JSON_FILE, &report)?;
        let csv = format!("# config_hash={}\n{}", self.hash, report.to_csv());
        self.write(REPORT_CSV_FILE, csv.as_bytes())?;
        Ok(report)
    }

    fn gradcheck(&mut self, trials: usize, lambda: f64) -> Result<GradCheckReport> {
        let gc = GradCheckConfig {
            trials,
            lambda,
            seed: self.cfg.seed,
            ..GradCheckConfig::default()
        };
        let report = gradient_check(&gc)?;
        self.json(GRADCHECK_FILE, &report)?;
        Ok(report)
    }

    fn execute(&mut self, command: &Command) -> Result<()> {
        match command {
            Command::Generate => self.generate(),
            Command::Knn => {
                let set = self.train_set()?;
                self.clusters(&set, true).map(|_| ())
            }
            Command::Train => self.train().map(|_| ()),
            Command::Cluster {
                checkpoint,
                threshold,
            } => {
                let ckpt = checkpoint
                    .clone()
                    .unwrap_or_else(|| self.path(CHECKPOINT_FILE));
                let params = ModelParams::load(&ckpt)?;
                self.cluster(&params, *threshold).map(|_| ())
            }
            Command::Evaluate { partition } => {
                let path = partition
                    .clone()
                    .unwrap_or_else(|| self.path(PARTITION_FILE));
                let partition = read_partition_csv(&path)?;
                self.evaluate(&partition).map(|_| ())
            }
            Command::Gradcheck { trials, lambda } => {
                let r = self.gradcheck(*trials, *lambda)?;
                println!(
                    "max relative error {:.3e} over {} trial(s)",
                    r.max_rel_error(),
                    r.trials_run
                );
                Ok(())
            }
            Command::Pipeline => {
                self.generate()?;
                let params = self.train()?;
                let partition = self.cluster(&params, None)?;
                let report = self.evaluate(&partition)?;
                let mut out = std::io::stdout().lock();
                let _ = writeln!(
                    out,
                    "F_P {:.4}  F_B {:.4}  NMI {:.4}  F_P std over groups {:.4}",
                    report.overall.pairwise_f,
                    report.overall.bcubed_f,
                    report.overall.nmi,
                    report.std.pairwise_f
                );
                Ok(())
            }
        }
    }

    fn cleanup(&self) {
        for p in &self.written {
            let _ = fs::remove_file(p);
        }
    }
}

fn prepare(cli: &Cli) -> Result<Run> {
    let path = cli
        .common
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(seed) = cli.common.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.common.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Command::Cluster {
        threshold: Some(t), ..
    } = cli.command
    {
        cfg.postprocess.threshold = t;
    }
    cfg.validate()?;
    if let Some(threads) = cli.common.threads {
        set_threads(threads)?;
    }
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(Run {
        hash: cfg.hash(),
        exec: cfg.train.exec,
        cfg,
        dir,
        written: Vec::new(),
    })
}

#[cfg(feature = "parallel")]
fn set_threads(threads: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

#[cfg(not(feature = "parallel"))]
fn set_threads(_threads: usize) -> Result<()> {
    Ok(())
}

/// Run one parsed command line; returns the process exit status.
pub fn run(cli: &Cli) -> i32 {
    let mut run = match prepare(cli) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    match run.execute(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            run.cleanup();
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
