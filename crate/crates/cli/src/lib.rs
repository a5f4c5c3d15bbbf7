//! Command-line front end: every pipeline stage as a subcommand reading and
//! writing the text formats of [`hierpart::formats`].

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
pub mod io;

pub use io::{CliError, CliResult, Failure};

/// Default flag values.
pub mod defaults {
    /// Voxel edge length in meters.
    pub const RESOLUTION: f64 = 0.05;
    /// Resolutions the dataset is published at.
    pub const RESOLUTIONS: [f64; 2] = [0.02, 0.05];
    pub const IOU_THRESHOLD: f64 = 0.5;
    /// Instances below this confidence are dropped.
    pub const MIN_CONFIDENCE: f64 = 0.25;
    /// Occurrence threshold used to prune the part taxonomy.
    pub const PRUNE_THRESHOLD: u64 = 1800;
    pub const ALPHA: &str = "mtt-123-fine";
    pub const ALPHA_PULL: f64 = 1.0;
    pub const ALPHA_PUSH: f64 = 1.0;
    pub const GAMMA: f64 = 0.001;
    pub const ALPHA_REG: f64 = 1e-3;
    pub const ALPHA_SEP: f64 = 1e-3;
    pub const DELTA_V: f64 = 0.5;
    pub const DELTA_D: f64 = 1.5;
    pub const SEP_DELTA: f64 = 0.5;
    /// 1.5 · δ_v.
    pub const BANDWIDTH: f64 = 0.75;
    pub const GRADCHECK_SEEDS: u64 = 20;
    pub const SEED: u64 = 1;
    pub const OBJECTS: usize = 4;
}

#[derive(Debug, Parser)]
#[command(name = "hierpart", version, about = "Hierarchical part labeling of voxelized 3D scenes")]
pub struct Cli {
    /// Worker threads; 0 uses every core. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Prune, collapse or inspect a part taxonomy.
    #[command(subcommand)]
    Taxonomy(TaxonomyCmd),
    /// Rigidly align point clouds.
    #[command(subcommand)]
    Align(AlignCmd),
    /// Voxelize meshes into an unlabeled scene.
    Voxelize(VoxelizeArgs),
    /// Vote mesh labels into the voxels of a scene.
    Transfer(TransferArgs),
    /// Turn score tensors into label predictions.
    #[command(subcommand)]
    Infer(InferCmd),
    /// Mean-shift embeddings into part instances.
    Cluster(ClusterArgs),
    /// Evaluate or gradient-check the loss kernels.
    #[command(subcommand)]
    Loss(LossCmd),
    /// Score predictions against ground truth.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Generate a synthetic furniture scene.
    Gen(GenArgs),
    /// Render semantic reports as a results table.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum IcpScoreArg {
    Rmse,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PruneRelabelArg {
    Unlabeled,
    Parent,
}

#[derive(Debug, Subcommand)]
pub enum TaxonomyCmd {
    /// Drop every node (and its subtree) occurring less than the threshold.
    Prune(PruneArgs),
    /// Remove non-root nodes with a single child.
    Collapse(TaxonomyIo),
    /// List the classes of every level.
    Levels(LevelsArgs),
    /// Recount occurrences from the leaf labels of a scene.
    Count(CountArgs),
}

#[derive(Debug, Args)]
pub struct TaxonomyIo {
    #[arg(long)]
    pub taxonomy: PathBuf,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[command(flatten)]
    pub io: TaxonomyIo,
    #[arg(long, default_value_t = defaults::PRUNE_THRESHOLD)]
    pub threshold: u64,
    /// Scene to relabel against the pruned taxonomy.
    #[arg(long, requires = "scene_out")]
    pub scene: Option<PathBuf>,
    #[arg(long, requires = "scene")]
    pub scene_out: Option<PathBuf>,
    /// What voxels of removed classes become.
    #[arg(long, value_enum, default_value_t = PruneRelabelArg::Unlabeled)]
    pub prune_relabel: PruneRelabelArg,
}

#[derive(Debug, Args)]
pub struct LevelsArgs {
    #[arg(long)]
    pub taxonomy: PathBuf,
    /// Print an indented tree instead of JSON.
    #[arg(long)]
    pub tree: bool,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    #[command(flatten)]
    pub io: TaxonomyIo,
    #[arg(long)]
    pub scene: Vec<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum AlignCmd {
    /// Point-to-point ICP from one initial rotation.
    Icp(IcpArgs),
    /// ICP from the 20 dodecahedron starts, keeping the best.
    Best(BestArgs),
}

#[derive(Debug, Args)]
pub struct AlignIo {
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub dst: PathBuf,
    /// Transform file mapping src onto dst.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub max_iterations: usize,
    #[arg(long, default_value_t = 1e-7)]
    pub convergence_eps: f64,
}

#[derive(Debug, Args)]
pub struct IcpArgs {
    #[command(flatten)]
    pub io: AlignIo,
    /// Initial rotation quaternion `w,x,y,z`.
    #[arg(long, value_delimiter = ',', num_args = 4, default_values_t = [1.0, 0.0, 0.0, 0.0])]
    pub init_rotation: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct BestArgs {
    #[command(flatten)]
    pub io: AlignIo,
    #[arg(long, value_enum, default_value_t = IcpScoreArg::Rmse)]
    pub icp_score: IcpScoreArg,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long, default_value_t = defaults::RESOLUTION)]
    pub resolution: f64,
    /// Distance cut-off in meters; defaults to the resolution.
    #[arg(long)]
    pub truncation: Option<f64>,
}

impl GridArgs {
    pub fn truncation(&self) -> f64 {
        self.truncation.unwrap_or(self.resolution)
    }
}

#[derive(Debug, Args)]
pub struct VoxelizeArgs {
    #[arg(long)]
    pub meshes: PathBuf,
    /// Transform applied to every mesh first.
    #[arg(long)]
    pub transform: Option<PathBuf>,
    #[command(flatten)]
    pub grid: GridArgs,
    /// Grid origin `x,y,z`.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.0, 0.0, 0.0])]
    pub origin: Vec<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub meshes: PathBuf,
    /// Transform applied to every mesh first.
    #[arg(long)]
    pub transform: Option<PathBuf>,
    /// Also vote with triangle surface samples in voxels without vertices.
    #[arg(long)]
    pub sample_faces: bool,
    /// Keep voxels that received no label.
    #[arg(long)]
    pub keep_background: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum InferCmd {
    /// Argmax over the classes of one level.
    Flat(FlatArgs),
    /// Level-k argmax restricted to children of the parent label.
    Topdown(TopDownArgs),
    /// Sum leaf probabilities up to level k, then argmax.
    Bottomup(BottomUpArgs),
}

#[derive(Debug, Args)]
pub struct FlatArgs {
    #[arg(long)]
    pub taxonomy: PathBuf,
    /// Score tensor; its header level selects the classes.
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TopDownArgs {
    #[arg(long)]
    pub taxonomy: PathBuf,
    /// Score tensors; one per level from 1 with --predicted-parent.
    #[arg(long, required = true)]
    pub scores: Vec<PathBuf>,
    /// Parent labels at level k-1 (prediction file or ground-truth scene).
    #[arg(long, required_unless_present = "predicted_parent", conflicts_with = "predicted_parent")]
    pub parents: Option<PathBuf>,
    /// Chain own predictions level by level instead of masking with given parents.
    #[arg(long)]
    pub predicted_parent: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BottomUpArgs {
    #[arg(long)]
    pub taxonomy: PathBuf,
    /// Leaf score tensor (header level 0, columns in ascending leaf id).
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub level: usize,
    /// Scores are logits; apply a softmax first.
    #[arg(long)]
    pub logits: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    /// Embedding tensor.
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Semantic labels (prediction file or scene) for instance classes.
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub taxonomy: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub level: usize,
    #[arg(long, default_value_t = defaults::BANDWIDTH)]
    pub bandwidth: f64,
    #[arg(long, default_value_t = defaults::MIN_CONFIDENCE)]
    pub min_confidence: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum LossCmd {
    /// Loss values on given tensors and ground truth.
    Eval(LossEvalArgs),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args, Clone)]
pub struct LossWeights {
    /// Level weights: a preset name or `a1,a2,a3`.
    #[arg(long, default_value = defaults::ALPHA)]
    pub alpha: String,
    #[arg(long, default_value_t = defaults::ALPHA_PULL)]
    pub alpha_pull: f64,
    #[arg(long, default_value_t = defaults::ALPHA_PUSH)]
    pub alpha_push: f64,
    #[arg(long, default_value_t = defaults::GAMMA)]
    pub gamma: f64,
    #[arg(long, default_value_t = defaults::ALPHA_REG)]
    pub alpha_reg: f64,
    #[arg(long, default_value_t = defaults::ALPHA_SEP)]
    pub alpha_sep: f64,
    #[arg(long, default_value_t = defaults::DELTA_V)]
    pub delta_v: f64,
    #[arg(long, default_value_t = defaults::DELTA_D)]
    pub delta_d: f64,
    #[arg(long, default_value_t = defaults::SEP_DELTA)]
    pub sep_delta: f64,
    /// Sum the separation term over parts instead of averaging.
    #[arg(long)]
    pub sep_sum: bool,
}

#[derive(Debug, Args)]
pub struct LossEvalArgs {
    #[arg(long)]
    pub taxonomy: PathBuf,
    /// Ground-truth scene.
    #[arg(long)]
    pub gt: PathBuf,
    /// Logit tensors, one per level starting at 1.
    #[arg(long)]
    pub scores: Vec<PathBuf>,
    /// Embedding tensor.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Weight classes by inverse frequency.
    #[arg(long)]
    pub class_weights: bool,
    #[command(flatten)]
    pub weights: LossWeights,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Check every kernel.
    #[arg(long, conflicts_with = "kernel")]
    pub all: bool,
    /// Kernel names: cross-entropy, discriminative, separation, instance-total.
    #[arg(long, value_delimiter = ',')]
    pub kernel: Vec<String>,
    /// Seeds 0..N.
    #[arg(long, default_value_t = defaults::GRADCHECK_SEEDS)]
    pub seeds: u64,
    #[arg(long, value_delimiter = ',', default_values_t = hierpart::gradcheck::DIMS)]
    pub dims: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = hierpart::gradcheck::GROUPS)]
    pub groups: Vec<usize>,
    /// Full per-case JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum EvalCmd {
    /// IoU and accuracy per class at one level.
    Semantic(SemanticArgs),
    /// Semantic metrics at every level plus their mean.
    Hier(HierArgs),
    /// Instance AP at an IoU threshold.
    Instance(InstanceArgs),
}

#[derive(Debug, Args)]
pub struct SemanticArgs {
    #[arg(long)]
    pub taxonomy: PathBuf,
    /// Ground-truth scene or prediction file.
    #[arg(long)]
    pub gt: PathBuf,
    /// Prediction file or scene.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub level: usize,
    /// Accuracy as (recall + specificity) / 2 instead of recall.
    #[arg(long)]
    pub balanced_binary: bool,
    /// JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Aligned CSV table.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HierArgs {
    #[arg(long)]
    pub taxonomy: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// One scene, or one prediction file per level.
    #[arg(long, required = true)]
    pub pred: Vec<PathBuf>,
    #[arg(long)]
    pub balanced_binary: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InstanceArgs {
    /// Ground-truth instance file or scene.
    #[arg(long)]
    pub gt: PathBuf,
    /// Predicted instance file or scene.
    #[arg(long)]
    pub pred: PathBuf,
    /// Needed when an input is a scene.
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub level: usize,
    #[arg(long, default_value_t = defaults::IOU_THRESHOLD)]
    pub iou_threshold: f64,
    #[arg(long, default_value_t = defaults::MIN_CONFIDENCE)]
    pub min_confidence: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = defaults::SEED)]
    pub seed: u64,
    #[arg(long, default_value_t = defaults::OBJECTS)]
    pub objects: usize,
    #[command(flatten)]
    pub grid: GridArgs,
    /// Give labeled voxels a per-object color.
    #[arg(long)]
    pub color: bool,
    /// Also write instance-separated embeddings of this dimension.
    #[arg(long, default_value_t = 0)]
    pub embedding_dim: usize,
    /// Directory for taxonomy.json, meshes.txt, gt.s2p and embeddings.tensor.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `name=report.json` per column, in order.
    #[arg(long, required = true)]
    pub column: Vec<String>,
    /// Combined JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Aligned CSV table; stdout when omitted.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { Failure::Validation.code() } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.kind.code()
        }
    }
}

/// Runs a parsed command on a pool of `cli.threads` workers.
pub fn execute(cli: &Cli) -> CliResult<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| CliError::validation(format!("thread pool: {e}")))?;
    pool.install(|| commands::dispatch(&cli.command))
}
