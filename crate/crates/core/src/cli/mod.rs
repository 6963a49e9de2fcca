//! `scs` command line: gen-synth, cluster, build-pool, train, select, analyze.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data error,
//! 3 oracle or transport error.

pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::agent::{init_agent, score_candidates, select_top_n, AgentError, AgentParams};
use crate::analysis::{self, AnalysisError, SimilarityMode};
use crate::clustering::{kmeans_fit, ClusterError, KMeansModel};
use crate::features::{self, FeatureError, FeatureFormat, FeatureSet, SyntheticWorldConfig};
use crate::oracle::{CachedOracle, MatrixOracle, Oracle, OracleError, RemoteOracle, SimulatedOracle};
use crate::pool::{build_pool, read_manifest, CandidatePool, PoolError};
use crate::rng;
use crate::training::{train_from, TrainError};

use config::{ConfigError, OracleMode, PipelineConfig, RawConfig};

pub const MODEL_FILE: &str = "kmeans.model";
pub const SIZES_FILE: &str = "cluster_sizes.csv";
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const POOL_FILE: &str = "pool.scsf";
pub const AGENT_FILE: &str = "agent.scsa";
pub const REPORT_FILE: &str = "train_report.csv";
pub const SELECTIONS_FILE: &str = "selections.csv";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(String),
    Data(String),
    Oracle(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Oracle(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Config(m) | CliError::Data(m) | CliError::Oracle(m) => m,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match self {
            CliError::Usage(_) => "usage error",
            CliError::Config(_) => "config error",
            CliError::Data(_) => "data error",
            CliError::Oracle(_) => "oracle error",
        };
        write!(f, "{kind}: {}", self.message())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.0)
    }
}

impl From<FeatureError> for CliError {
    fn from(e: FeatureError) -> Self {
        match e {
            FeatureError::InvalidConfig(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ClusterError> for CliError {
    fn from(e: ClusterError) -> Self {
        match e {
            ClusterError::InvalidConfig(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<PoolError> for CliError {
    fn from(e: PoolError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<AgentError> for CliError {
    fn from(e: AgentError) -> Self {
        match e {
            AgentError::InvalidConfig(_) | AgentError::TooMany { .. } => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::Io { .. } | OracleError::Table { .. } => CliError::Data(e.to_string()),
            OracleError::Invalid(_) => CliError::Config(e.to_string()),
            _ => CliError::Oracle(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Oracle { .. } => CliError::Oracle(e.to_string()),
            TrainError::InvalidConfig(_) => CliError::Config(e.to_string()),
            TrainError::Agent(a) => a.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Oracle(o) => o.into(),
            AnalysisError::Feature(f) => f.into(),
            AnalysisError::TooFewCandidates { .. } | AnalysisError::ZeroShot | AnalysisError::NoSeeds => {
                CliError::Config(e.to_string())
            }
            AnalysisError::Misaligned(_) => CliError::Data(e.to_string()),
        }
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Parser)]
#[command(name = "scs", version, about = "Cluster-based candidate pools and a learned context selector")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct CommonArgs {
    /// Pipeline config file (key = value with [section] headers).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed; overrides [run] seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides [run] out.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FileFormat {
    Scsf,
    Csv,
}

#[derive(Debug, Args)]
struct GenSynthArgs {
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 40)]
    per_class: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "data")]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "scsf")]
    format: FileFormat,
}

#[derive(Debug, Args)]
struct SelectArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Query ids (comma-separated or repeated); defaults to every query.
    #[arg(long = "query", value_delimiter = ',')]
    queries: Vec<String>,
    #[arg(long)]
    n_shot: Option<usize>,
    /// Score with an all-zero agent instead of the checkpoint.
    #[arg(long)]
    untrained: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Protocol {
    Random,
    Similarity,
    Diversity,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_enum)]
    protocol: Protocol,
    #[arg(long)]
    n_shot: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic feature set and its class labels.
    GenSynth(GenSynthArgs),
    /// Fit k-means on the training features.
    Cluster(CommonArgs),
    /// Select per-cluster nearest and farthest samples.
    BuildPool(CommonArgs),
    /// Train the search agent with REINFORCE.
    Train(CommonArgs),
    /// Rank pool candidates for queries with a trained agent.
    Select(SelectArgs),
    /// Run a context-selection protocol and write reports.
    Analyze(AnalyzeArgs),
}

/// Parses arguments, runs the command and returns the exit code.
pub fn run<I, T>(args: I, env: &BTreeMap<String, String>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli, env) {
        Ok(lines) => {
            print!("{lines}");
            0
        }
        Err(e) => {
            eprintln!("scs: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli, env: &BTreeMap<String, String>) -> Result<String> {
    match cli.command {
        Command::GenSynth(a) => cmd_gen_synth(&a),
        Command::Cluster(c) => cmd_cluster(&load_config(&c, env)?),
        Command::BuildPool(c) => cmd_build_pool(&load_config(&c, env)?),
        Command::Train(c) => cmd_train(&load_config(&c, env)?),
        Command::Select(a) => {
            let cfg = load_config(&a.common, env)?;
            cmd_select(&cfg, &a.queries, a.n_shot.unwrap_or(cfg.n_shot), a.untrained)
        }
        Command::Analyze(a) => {
            let cfg = load_config(&a.common, env)?;
            cmd_analyze(&cfg, a.protocol, a.n_shot.unwrap_or(cfg.n_shot))
        }
    }
}

/// Defaults, then the file, then `SCS_*` variables, then flags.
pub fn load_config(args: &CommonArgs, env: &BTreeMap<String, String>) -> Result<PipelineConfig> {
    let (mut raw, base) = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
            let raw = RawConfig::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
            (raw, base)
        }
        None => (RawConfig::default(), PathBuf::new()),
    };
    raw.apply_env(env.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    let mut cfg = PipelineConfig::from_raw(&raw, &base)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn require<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| CliError::Config(format!("{what} is not set")))
}

fn load_set(path: &Path, normalize: bool) -> Result<FeatureSet> {
    let set = features::load_features(path, FeatureFormat::from_path(path))?;
    Ok(if normalize { features::l2_normalize(&set)? } else { set })
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

/// `id,label` rows.
pub fn read_labels(path: &Path) -> Result<Vec<(String, usize)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read labels {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = line
            .rsplit_once(',')
            .and_then(|(id, l)| l.trim().parse().ok().map(|l| (id.to_string(), l)));
        match parsed {
            Some(row) => out.push(row),
            None => {
                return Err(CliError::Data(format!("{}:{}: expected id,label", path.display(), i + 1)));
            }
        }
    }
    Ok(out)
}

pub fn render_labels(labels: &features::ClassLabels) -> String {
    let mut out = String::from("id,label\n");
    for (id, l) in labels {
        let _ = writeln!(out, "{id},{l}");
    }
    out
}

struct OracleHandle {
    oracle: CachedOracle<Box<dyn Oracle>>,
    sidecar: Option<PathBuf>,
}

impl OracleHandle {
    fn open(cfg: &PipelineConfig) -> Result<Self> {
        let spec = &cfg.oracle;
        let seed = rng::substream_seed(cfg.seed, rng::ORACLE);
        let inner: Box<dyn Oracle> = match spec.mode {
            OracleMode::ClassMatch => {
                let labels = read_labels(require(&spec.labels, "[oracle] labels")?)?;
                Box::new(SimulatedOracle::class_match(labels, spec.noise, seed)?)
            }
            OracleMode::CosineSigmoid => {
                let mut sets = vec![load_set(require(&cfg.train_path, "[paths] train")?, cfg.normalize)?];
                if let Some(q) = &cfg.query_path {
                    if Some(q) != cfg.train_path.as_ref() {
                        sets.push(load_set(q, cfg.normalize)?);
                    }
                }
                let refs: Vec<&FeatureSet> = sets.iter().collect();
                Box::new(SimulatedOracle::cosine_sigmoid(&refs, spec.alpha, spec.beta, spec.noise, seed)?)
            }
            OracleMode::Matrix => Box::new(MatrixOracle::load(require(&spec.matrix, "[oracle] matrix")?)?),
            OracleMode::Remote => {
                let endpoint = spec
                    .endpoint
                    .clone()
                    .ok_or_else(|| CliError::Config("[oracle] endpoint is not set".into()))?;
                Box::new(RemoteOracle::new(endpoint, spec.timeout, spec.retry.clone(), spec.max_in_flight))
            }
        };
        let oracle = CachedOracle::new(inner);
        if let Some(path) = &spec.cache {
            if path.exists() {
                oracle.load_sidecar(path)?;
            }
        }
        Ok(Self {
            oracle,
            sidecar: spec.cache.clone(),
        })
    }

    fn finish(&self) -> Result<()> {
        if let Some(path) = &self.sidecar {
            self.oracle.save_sidecar(path)?;
        }
        Ok(())
    }
}

fn load_pool(dir: &Path) -> Result<CandidatePool> {
    let manifest = dir.join(MANIFEST_FILE);
    let entries = read_manifest(&manifest)?;
    let features = features::load_features(&dir.join(POOL_FILE), FeatureFormat::Binary)?;
    Ok(CandidatePool::from_parts(entries, features)?)
}

fn cmd_gen_synth(a: &GenSynthArgs) -> Result<String> {
    let world = SyntheticWorldConfig {
        num_classes: a.classes,
        samples_per_class: a.per_class,
        dim: a.dim,
        noise_scale: a.noise,
        seed: rng::substream_seed(a.seed, rng::SYNTH),
    };
    let (set, labels) = features::generate_synthetic(&world)?;
    ensure_dir(&a.out)?;
    let (name, fmt) = match a.format {
        FileFormat::Scsf => ("train.scsf", FeatureFormat::Binary),
        FileFormat::Csv => ("train.csv", FeatureFormat::Csv),
    };
    let path = a.out.join(name);
    features::save_features(&set, &path, fmt)?;
    write_file(&a.out.join("labels.csv"), render_labels(&labels))?;
    Ok(format!(
        "wrote {} samples ({} classes, d={}) to {}\n",
        set.len(),
        a.classes,
        a.dim,
        path.display()
    ))
}

pub fn cmd_cluster(cfg: &PipelineConfig) -> Result<String> {
    let set = load_set(require(&cfg.train_path, "[paths] train")?, cfg.normalize)?;
    let model = kmeans_fit(&set, &cfg.kmeans_config())?;
    ensure_dir(&cfg.out_dir)?;
    model.save(&cfg.out_dir.join(MODEL_FILE))?;
    let mut sizes = String::from("cluster,size\n");
    for (k, s) in model.cluster_sizes().iter().enumerate() {
        let _ = writeln!(sizes, "{k},{s}");
    }
    write_file(&cfg.out_dir.join(SIZES_FILE), sizes)?;
    Ok(format!(
        "{} clusters over {} samples, objective {}, {} iterations{}\n",
        model.num_clusters(),
        set.len(),
        model.objective(),
        model.iterations_run(),
        if model.converged() { "" } else { " (not converged)" }
    ))
}

pub fn cmd_build_pool(cfg: &PipelineConfig) -> Result<String> {
    let model_path = cfg.out_dir.join(MODEL_FILE);
    if !model_path.exists() {
        return Err(CliError::Data(format!("model {} not found; run cluster first", model_path.display())));
    }
    let model = KMeansModel::load(&model_path)?;
    let set = load_set(require(&cfg.train_path, "[paths] train")?, cfg.normalize)?;
    let pool = build_pool(&model, &set)?;
    pool.write_manifest(&cfg.out_dir.join(MANIFEST_FILE))?;
    features::save_features(pool.features(), &cfg.out_dir.join(POOL_FILE), FeatureFormat::Binary)?;
    let singletons = model.cluster_sizes().iter().filter(|&&s| s == 1).count();
    Ok(format!(
        "pool of {} candidates from {} clusters ({} singletons)\n",
        pool.len(),
        model.num_clusters(),
        singletons
    ))
}

pub fn cmd_train(cfg: &PipelineConfig) -> Result<String> {
    let pool = load_pool(&cfg.out_dir)?;
    let queries = load_set(require(&cfg.query_path, "[paths] query")?, cfg.normalize)?;
    let handle = OracleHandle::open(cfg)?;
    let agent_cfg = cfg.agent_config(pool.dim());
    let params = if cfg.zero_init {
        AgentParams::zeros(&agent_cfg)?
    } else {
        init_agent(&agent_cfg)?
    };
    let out_dir = cfg.out_dir.clone();
    let checkpoints = cfg.epoch_checkpoints;
    let result = train_from(params, &queries, &pool, &handle.oracle, &cfg.train_config(), |epoch, p| {
        if checkpoints {
            p.save(&out_dir.join(format!("agent_epoch{epoch:03}.scsa")))?;
        }
        Ok(())
    });
    handle.finish()?;
    let (params, report) = result?;
    params.save(&cfg.out_dir.join(AGENT_FILE))?;
    write_file(&cfg.out_dir.join(REPORT_FILE), report.to_csv())?;
    Ok(format!(
        "trained {} epochs on {} queries; mean top-1 reward {:.6} (initial {:.6}); checksum {}\n",
        report.epochs.len(),
        queries.len(),
        report.final_top1_reward(),
        report.initial_top1_reward,
        report.checksum
    ))
}

pub fn cmd_select(cfg: &PipelineConfig, query_ids: &[String], n_shot: usize, untrained: bool) -> Result<String> {
    let pool = load_pool(&cfg.out_dir)?;
    let queries = load_set(require(&cfg.query_path, "[paths] query")?, cfg.normalize)?;
    let params = if untrained {
        AgentParams::zeros(&cfg.agent_config(pool.dim()))?
    } else {
        AgentParams::load(&cfg.out_dir.join(AGENT_FILE))?
    };
    if n_shot == 0 || n_shot > pool.len() {
        return Err(CliError::Usage(format!("n_shot {n_shot} must lie in 1..={}", pool.len())));
    }
    let chosen: Vec<&features::FeatureVector> = if query_ids.is_empty() {
        queries.iter().collect()
    } else {
        query_ids
            .iter()
            .map(|id| {
                queries
                    .get(id)
                    .ok_or_else(|| CliError::Data(format!("unknown query id {id:?}")))
            })
            .collect::<Result<_>>()?
    };
    let mut out = String::from("query_id,rank,candidate_id,prob\n");
    for q in &chosen {
        let dist = score_candidates(&params, &pool, q)?;
        let top = select_top_n(&dist, n_shot)?;
        for (rank, id) in top.iter().enumerate() {
            let i = dist.pool_ids().iter().position(|p| p == id).expect("selected id is in the pool");
            let _ = writeln!(out, "{},{},{},{}", q.id(), rank, id, dist.probs()[i]);
        }
    }
    write_file(&cfg.out_dir.join(SELECTIONS_FILE), out)?;
    Ok(format!("selected {n_shot} of {} candidates for {} queries\n", pool.len(), chosen.len()))
}

fn cmd_analyze(cfg: &PipelineConfig, protocol: Protocol, n_shot: usize) -> Result<String> {
    let candidates = load_set(require(&cfg.train_path, "[paths] train")?, cfg.normalize)?;
    let queries = load_set(require(&cfg.query_path, "[paths] query")?, cfg.normalize)?;
    let handle = OracleHandle::open(cfg)?;
    let oracle = &handle.oracle;
    ensure_dir(&cfg.out_dir)?;
    let dir = &cfg.out_dir;
    let text = match protocol {
        Protocol::Random => {
            let report = analysis::random_baseline(&queries, &candidates, oracle, n_shot, &cfg.analysis_seeds)?;
            let runs: Vec<_> = report.runs().iter().collect();
            write_file(&dir.join("analysis_random.csv"), analysis::results_csv(&runs))?;
            write_file(&dir.join("analysis_random_seeds.csv"), report.seeds_csv())?;
            report.summary()
        }
        Protocol::Similarity => {
            let near = analysis::similarity_baseline(&queries, &candidates, oracle, SimilarityMode::Nearest, n_shot)?;
            let far = analysis::similarity_baseline(&queries, &candidates, oracle, SimilarityMode::Farthest, n_shot)?;
            let w = analysis::winner_proportions(&near, &far)?;
            write_file(&dir.join("analysis_similarity.csv"), analysis::results_csv(&[&near, &far]))?;
            write_file(&dir.join("analysis_winners.csv"), w.to_csv())?;
            format!(
                "{}nearest wins {:.6}, farthest wins {:.6}, ties {:.6}\n",
                analysis::summary(&[&near, &far]),
                w.nearest_wins,
                w.farthest_wins,
                w.ties
            )
        }
        Protocol::Diversity => {
            let (nn, ff, nf) = analysis::diversity_comparison(&queries, &candidates, oracle)?;
            write_file(&dir.join("analysis_diversity.csv"), analysis::results_csv(&[&nn, &ff, &nf]))?;
            analysis::summary(&[&nn, &ff, &nf])
        }
    };
    handle.finish()?;
    let name = match protocol {
        Protocol::Random => "random",
        Protocol::Similarity => "similarity",
        Protocol::Diversity => "diversity",
    };
    write_file(&dir.join(format!("analysis_{name}.txt")), &text)?;
    Ok(text)
}
