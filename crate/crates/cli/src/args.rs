//! Command-line surface. Every flag overrides the matching config-file field.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use gptree::{ExpansionMode, KernelFamily, PredictMode, TreeBuildMethod};
use serde::de::DeserializeOwned;

use crate::config::{Command, FeatureFormat, Inference, RunConfig, SweepMethod};
use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "gptree", version, about = "Hierarchical GP classification experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Fit a base tree and save it as an artifact.
    TrainBase(Overrides),
    /// Accuracy of tree variants over increasing class counts.
    ClassSweep(Overrides),
    /// Few-shot class-incremental sessions on top of a base tree.
    Incremental(Overrides),
    /// Accuracy as a function of the number of Gibbs chains.
    ChainSweep(Overrides),
    /// Score a saved artifact on a labelled feature file.
    Eval(Overrides),
    /// Print the structure of a saved artifact.
    InspectArtifact(Overrides),
    /// Write Gaussian-blob train/test feature files.
    GenSynthetic(Overrides),
}

impl Cmd {
    pub fn split(self) -> (Command, Overrides) {
        match self {
            Cmd::TrainBase(o) => (Command::TrainBase, o),
            Cmd::ClassSweep(o) => (Command::ClassSweep, o),
            Cmd::Incremental(o) => (Command::Incremental, o),
            Cmd::ChainSweep(o) => (Command::ChainSweep, o),
            Cmd::Eval(o) => (Command::Eval, o),
            Cmd::InspectArtifact(o) => (Command::InspectArtifact, o),
            Cmd::GenSynthetic(o) => (Command::GenSynthetic, o),
        }
    }
}

fn kebab<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|e| e.to_string())
}

#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// JSON run configuration; flags take precedence over its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: GPTREE_WORKERS, else all cores).
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub artifact: Option<PathBuf>,

    #[arg(long)]
    pub train_features: Option<PathBuf>,
    #[arg(long)]
    pub train_labels: Option<PathBuf>,
    #[arg(long)]
    pub test_features: Option<PathBuf>,
    #[arg(long)]
    pub test_labels: Option<PathBuf>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    #[arg(long)]
    pub val_fraction: Option<f64>,

    #[arg(long, value_enum)]
    pub inference: Option<Inference>,
    /// kmeans-bisect, random-balanced or stick-break-chain.
    #[arg(long, value_parser = kebab::<TreeBuildMethod>)]
    pub tree_method: Option<TreeBuildMethod>,
    /// rbf, matern52 or linear.
    #[arg(long, value_parser = kebab::<KernelFamily>)]
    pub kernel: Option<KernelFamily>,
    #[arg(long, allow_negative_numbers = true)]
    pub lengthscale: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub outputscale: Option<f64>,
    /// Feed raw features to the kernels instead of L2-normalized ones.
    #[arg(long)]
    pub no_normalize: bool,
    #[arg(long, allow_negative_numbers = true)]
    pub novel_lengthscale: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub novel_outputscale: Option<f64>,

    #[arg(long)]
    pub n_chains: Option<usize>,
    #[arg(long)]
    pub n_steps: Option<usize>,
    /// quadrature or mean-point.
    #[arg(long, value_parser = kebab::<PredictMode>)]
    pub predict_mode: Option<PredictMode>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub inducing_per_class: Option<usize>,

    #[arg(long, value_delimiter = ',')]
    pub class_counts: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub chain_counts: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', value_enum)]
    pub methods: Option<Vec<SweepMethod>>,
    #[arg(long)]
    pub n_seeds: Option<usize>,

    #[arg(long)]
    pub n_base: Option<usize>,
    #[arg(long)]
    pub way: Option<usize>,
    #[arg(long)]
    pub shot: Option<usize>,
    #[arg(long)]
    pub n_sessions: Option<usize>,
    /// accumulated, session-tree or rebuild-tree.
    #[arg(long, value_parser = kebab::<ExpansionMode>)]
    pub mode: Option<ExpansionMode>,

    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub train_per_class: Option<usize>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub class_spread: Option<f64>,
    #[arg(long, value_enum)]
    pub format: Option<FeatureFormat>,
}

macro_rules! set {
    ($src:expr => $dst:expr) => {
        if let Some(v) = $src {
            $dst = v;
        }
    };
    ($src:expr => some $dst:expr) => {
        if let Some(v) = $src {
            $dst = Some(v);
        }
    };
}

impl Overrides {
    /// Loads the config file (if any) and applies the flags on top.
    pub fn into_config(self) -> Result<RunConfig, CliError> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        set!(self.seed => some c.seed);
        set!(self.out => some c.output);
        set!(self.workers => some c.workers);
        set!(self.artifact => some c.artifact);
        set!(self.train_features => some c.data.train_features);
        set!(self.train_labels => some c.data.train_labels);
        set!(self.test_features => some c.data.test_features);
        set!(self.test_labels => some c.data.test_labels);
        set!(self.test_fraction => c.data.test_fraction);
        set!(self.val_fraction => c.data.val_fraction);
        set!(self.inference => some c.inference);
        set!(self.tree_method => c.tree_method);
        set!(self.kernel => c.kernel.family);
        set!(self.lengthscale => c.kernel.lengthscale);
        set!(self.outputscale => c.kernel.outputscale);
        set!(self.novel_lengthscale => c.novel_kernel.lengthscale);
        set!(self.novel_outputscale => c.novel_kernel.outputscale);
        if self.no_normalize {
            c.kernel.normalize_inputs = false;
            c.novel_kernel.normalize_inputs = false;
        }
        set!(self.n_chains => c.gibbs.n_chains);
        set!(self.n_steps => c.gibbs.n_steps);
        if let Some(m) = self.predict_mode {
            c.gibbs.predict_mode = m;
            c.vi.predict_mode = m;
        }
        set!(self.epochs => c.vi.epochs);
        set!(self.batch_size => c.vi.batch_size);
        set!(self.lr => c.vi.lr);
        set!(self.inducing_per_class => c.inducing_per_class);
        set!(self.class_counts => c.class_counts);
        set!(self.chain_counts => c.chain_counts);
        set!(self.methods => c.methods);
        set!(self.n_seeds => c.n_seeds);
        set!(self.n_base => c.sessions.n_base);
        set!(self.way => c.sessions.way);
        set!(self.shot => c.sessions.shot);
        set!(self.n_sessions => c.sessions.n_sessions);
        set!(self.mode => c.sessions.mode);
        set!(self.classes => c.synthetic.classes);
        set!(self.clusters => c.synthetic.clusters);
        set!(self.dim => c.synthetic.dim);
        set!(self.train_per_class => c.synthetic.train_per_class);
        set!(self.test_per_class => c.synthetic.test_per_class);
        set!(self.noise => c.synthetic.noise);
        set!(self.radius => c.synthetic.radius);
        set!(self.class_spread => c.synthetic.class_spread);
        set!(self.format => c.synthetic.format);
        Ok(c)
    }
}
