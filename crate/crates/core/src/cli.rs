//! Command-line surface: `gen`, `train`, `cluster`, `eval` and `pipeline`.
//!
//! Failures print one JSON line `{"error": kind, "message": ...}` to stderr
//! and map to exit codes 1 (usage), 2 (data) and 3 (numeric).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::clustering::{kmeans, threshold_cluster, KMeansParams};
use crate::config::{LossReduction, TrainConfig};
use crate::datagen::{generate, SynthConfig};
use crate::dataset::{Assignment, Dataset, EmbeddingMatrix};
use crate::encoder::encoder_init;
use crate::error::{Error, Result};
use crate::io::{
    load_dataset, read_assignment, read_embeddings, read_json, save_dataset, train_log_line, write_checkpoint,
    write_embeddings, write_json, AssignmentFile, ClusteringEcho, Layout, ReportFile, TrainEcho, TruthAccess,
    TRAIN_LOG_HEADER,
};
use crate::metrics::subset_report;
use crate::trainer::train_with;

#[derive(Debug, Parser)]
#[command(name = "gcd", version, about = "Generalized category discovery over precomputed embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (features.gcde + metadata.csv).
    Gen(GenArgs),
    /// Train the encoder; writes checkpoint, final embeddings, log and config.
    Train(TrainArgs),
    /// Cluster an embedding file into an assignment file.
    Cluster(ClusterArgs),
    /// Score an assignment against the metadata ground truth.
    Eval(EvalArgs),
    /// Train, cluster and evaluate in one go.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub n_old: usize,
    #[arg(long, default_value_t = 4)]
    pub n_new: usize,
    #[arg(long, default_value_t = 6)]
    pub sources_per_class: usize,
    #[arg(long, default_value_t = 10)]
    pub clips_per_source: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 10.0)]
    pub class_spread: f64,
    #[arg(long, default_value_t = 0.5)]
    pub source_sigma: f64,
    #[arg(long, default_value_t = 0.5)]
    pub clip_sigma: f64,
    /// Place classes 0 and 1 this close (in units of the class spread).
    #[arg(long, num_args = 0..=1, default_missing_value = "0.3")]
    pub overlap: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Embedding file with the input features.
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub metadata: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ReductionArg {
    Sum,
    Mean,
}

impl From<ReductionArg> for LossReduction {
    fn from(r: ReductionArg) -> Self {
        match r {
            ReductionArg::Sum => LossReduction::Sum,
            ReductionArg::Mean => LossReduction::Mean,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long, default_value_t = 0.1)]
    pub tau: f64,
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub n_pos: usize,
    #[arg(long, default_value_t = 50)]
    pub n_neg: usize,
    #[arg(long, value_enum, default_value = "mean")]
    pub loss_reduction: ReductionArg,
    #[arg(long, default_value_t = 256)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 2)]
    pub blocks: usize,
}

impl TrainFlags {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            tau: self.tau,
            lambda: self.lambda,
            n_pos_unsup: self.n_pos,
            n_neg: self.n_neg,
            epochs: self.epochs,
            learning_rate: self.lr,
            loss_reduction: self.loss_reduction.into(),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Kmeans,
    Threshold,
}

#[derive(Debug, Args)]
pub struct ClusterFlags {
    #[arg(long, value_enum, default_value = "kmeans")]
    pub method: Method,
    /// Number of clusters for k-means.
    #[arg(long)]
    pub k: Option<usize>,
    /// Cosine similarity threshold for threshold clustering.
    #[arg(long, allow_negative_numbers = true)]
    pub delta: Option<f64>,
    #[arg(long, default_value_t = 300)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 10)]
    pub restarts: usize,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cluster: ClusterFlags,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub assignment: PathBuf,
    #[arg(long)]
    pub metadata: PathBuf,
    /// Embeddings that were clustered (used for the silhouette score).
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Features file paired with the metadata.
    #[arg(long)]
    pub features: PathBuf,
    /// `train_config.json` written by `train`, echoed into the report.
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Record wall-clock duration (makes the report run-dependent).
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub cluster: ClusterFlags,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub timing: bool,
}

fn exit_code(e: &Error) -> i32 {
    match e.kind() {
        "usage" => 1,
        "numeric" => 3,
        _ => 2,
    }
}

fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": kind, "message": message }).to_string()
}

/// Parse `argv` (including the program name) and run. Returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let message = e.to_string();
            let first = message.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            return 1;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Cluster(a) => cmd_cluster(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Pipeline(a) => cmd_pipeline(&a),
    }
}

fn cmd_gen(a: &GenArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_old_classes: a.n_old,
        n_new_classes: a.n_new,
        sources_per_class: a.sources_per_class,
        clips_per_source: a.clips_per_source,
        dim: a.dim,
        class_spread: a.class_spread,
        source_sigma: a.source_sigma,
        clip_sigma: a.clip_sigma,
        overlap: a.overlap,
        seed: a.seed,
    };
    let d = generate(&cfg)?;
    let out = Layout::new(&a.out_dir);
    out.create()?;
    save_dataset(&out.features(), &out.metadata(), &d)
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

/// Train on a truth-stripped view of the data and write the training outputs.
fn cmd_train(a: &TrainArgs) -> Result<(TrainEcho, EmbeddingMatrix)> {
    let cfg = a.train.config();
    cfg.validate()?;
    let d = load_dataset(&a.data.features, &a.data.metadata, TruthAccess::Training)?;
    let out = Layout::new(&a.out_dir);
    out.create()?;
    train_to(&d, &cfg, &a.train, &out)
}

fn train_to(d: &Dataset, cfg: &TrainConfig, flags: &TrainFlags, out: &Layout) -> Result<(TrainEcho, EmbeddingMatrix)> {
    let init = encoder_init(d.features.dim(), flags.hidden_dim, flags.blocks, cfg.seed)?;
    let log_path = out.train_log();
    let mut log = BufWriter::new(File::create(&log_path).map_err(io_err(&log_path))?);
    writeln!(log, "{TRAIN_LOG_HEADER}").map_err(io_err(&log_path))?;
    let mut log_err = None;
    let (state, z) = train_with(d, cfg, init, |e| {
        if log_err.is_none() {
            log_err = writeln!(log, "{}", train_log_line(e)).err();
        }
    })?;
    if let Some(e) = log_err {
        return Err(Error::io(&log_path, e));
    }
    log.flush().map_err(io_err(&log_path))?;
    let echo = TrainEcho {
        config: cfg.clone(),
        input_dim: d.features.dim(),
        hidden_dim: flags.hidden_dim,
        n_blocks: flags.blocks,
        init_seed: cfg.seed,
    };
    write_checkpoint(&out.checkpoint(), &state.params)?;
    write_embeddings(&out.embeddings(), &z)?;
    write_json(&out.train_config(), &echo)?;
    Ok((echo, z))
}

fn cluster_embeddings(z: &EmbeddingMatrix, flags: &ClusterFlags, k_default: Option<usize>, seed: u64) -> Result<AssignmentFile> {
    match flags.method {
        Method::Kmeans => {
            let k = flags
                .k
                .or(k_default)
                .ok_or_else(|| Error::InvalidArgument("--k is required for k-means".into()))?;
            let params = KMeansParams {
                k,
                seed,
                max_iter: flags.max_iter,
                n_restarts: flags.restarts,
            };
            let r = kmeans(z, &params)?;
            Ok(AssignmentFile {
                clustering: ClusteringEcho {
                    method: "kmeans".into(),
                    k: Some(k),
                    delta: None,
                    seed: Some(seed),
                    max_iter: Some(params.max_iter),
                    n_restarts: Some(params.n_restarts),
                    inertia: Some(r.inertia),
                },
                assignment: r.assignment,
            })
        }
        Method::Threshold => {
            let delta = flags
                .delta
                .ok_or_else(|| Error::InvalidArgument("--delta is required for threshold clustering".into()))?;
            Ok(AssignmentFile {
                clustering: ClusteringEcho {
                    method: "threshold".into(),
                    k: None,
                    delta: Some(delta),
                    seed: None,
                    max_iter: None,
                    n_restarts: None,
                    inertia: None,
                },
                assignment: threshold_cluster(z, delta)?,
            })
        }
    }
}

fn cmd_cluster(a: &ClusterArgs) -> Result<()> {
    let z = read_embeddings(&a.embeddings)?;
    let file = cluster_embeddings(&z, &a.cluster, None, a.seed)?;
    write_json(&a.out, &file)
}

fn evaluate(
    d: &Dataset,
    z: &EmbeddingMatrix,
    file: &AssignmentFile,
    train: Option<TrainEcho>,
    seed: u64,
) -> Result<ReportFile> {
    let a: &Assignment = &file.assignment;
    let metrics = subset_report(a, d, z)?;
    Ok(ReportFile::new(seed, d, train, file.clustering.clone(), a.n_clusters, metrics))
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let start = Instant::now();
    let file = read_assignment(&a.assignment)?;
    let d = load_dataset(&a.features, &a.metadata, TruthAccess::Evaluation)?;
    let z = read_embeddings(&a.embeddings)?;
    let train = a.train_config.as_deref().map(read_json::<TrainEcho>).transpose()?;
    let mut report = evaluate(&d, &z, &file, train, a.seed)?;
    if a.timing {
        report.duration_secs = Some(start.elapsed().as_secs_f64());
    }
    write_json(&a.out, &report)
}

fn cmd_pipeline(a: &PipelineArgs) -> Result<()> {
    let start = Instant::now();
    let cfg = a.train.config();
    cfg.validate()?;
    let out = Layout::new(&a.out_dir);
    out.create()?;
    let train_view = load_dataset(&a.data.features, &a.data.metadata, TruthAccess::Training)?;
    let (echo, z) = train_to(&train_view, &cfg, &a.train, &out)?;
    drop(train_view);

    let d = load_dataset(&a.data.features, &a.data.metadata, TruthAccess::Evaluation)?;
    // k is taken as known: the number of ground-truth classes
    let file = cluster_embeddings(&z, &a.cluster, Some(d.n_truth_classes()), cfg.seed)?;
    write_json(&out.assignment(), &file)?;
    let mut report = evaluate(&d, &z, &file, Some(echo), cfg.seed)?;
    if a.timing {
        report.duration_secs = Some(start.elapsed().as_secs_f64());
    }
    write_json(&out.report(), &report)
}
