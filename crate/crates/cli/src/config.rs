//! Run configuration: a JSON file merged with command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use gptree::{ExpansionMode, GibbsConfig, KernelSpec, TreeBuildMethod, ViConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    TrainBase,
    ClassSweep,
    Incremental,
    ChainSweep,
    Eval,
    InspectArtifact,
    GenSynthetic,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::TrainBase => "train-base",
            Command::ClassSweep => "class-sweep",
            Command::Incremental => "incremental",
            Command::ChainSweep => "chain-sweep",
            Command::Eval => "eval",
            Command::InspectArtifact => "inspect-artifact",
            Command::GenSynthetic => "gen-synthetic",
        }
    }

    fn needs_seed(self) -> bool {
        !matches!(self, Command::Eval | Command::InspectArtifact)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Inference {
    Gibbs,
    Vi,
}

/// Tree variants compared by the class sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SweepMethod {
    GpTree,
    GpTreeRnd,
    StickBreak,
}

impl SweepMethod {
    pub const ALL: [SweepMethod; 3] = [SweepMethod::GpTree, SweepMethod::GpTreeRnd, SweepMethod::StickBreak];

    pub fn name(self) -> &'static str {
        match self {
            SweepMethod::GpTree => "gp-tree",
            SweepMethod::GpTreeRnd => "gp-tree-rnd",
            SweepMethod::StickBreak => "stick-break",
        }
    }

    pub fn tree_method(self) -> TreeBuildMethod {
        match self {
            SweepMethod::GpTree => TreeBuildMethod::KMeansBisect,
            SweepMethod::GpTreeRnd => TreeBuildMethod::RandomBalanced,
            SweepMethod::StickBreak => TreeBuildMethod::StickBreakChain,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureFormat {
    Csv,
    Bin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_features: Option<PathBuf>,
    /// Absent for CSV files whose last column holds the label.
    pub train_labels: Option<PathBuf>,
    pub test_features: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// Held-out share of the training rows when no test files are given.
    pub test_fraction: f64,
    /// Validation share carved out of the training rows by `train-base`.
    pub val_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_features: None,
            train_labels: None,
            test_features: None,
            test_labels: None,
            test_fraction: 0.25,
            val_fraction: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub n_base: usize,
    pub way: usize,
    pub shot: usize,
    pub n_sessions: usize,
    pub mode: ExpansionMode,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self { n_base: 100, way: 10, shot: 5, n_sessions: 10, mode: ExpansionMode::Accumulated }
    }
}

/// Gaussian-blob generator settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    /// Number of well-separated groups the class centers fall into; 0 places
    /// every class center on a ring.
    pub clusters: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Ring radius, or the scale of cluster centers.
    pub radius: f64,
    /// Spread of class centers around their cluster center.
    pub class_spread: f64,
    /// Standard deviation of samples around their class center.
    pub noise: f64,
    pub format: FeatureFormat,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            clusters: 0,
            dim: 2,
            train_per_class: 200,
            test_per_class: 100,
            radius: 4.0,
            class_spread: 1.0,
            noise: 0.5,
            format: FeatureFormat::Csv,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: Option<Command>,
    pub data: DataConfig,
    pub kernel: KernelSpec,
    pub novel_kernel: KernelSpec,
    /// Defaults to VI for base training and incremental runs, Gibbs for sweeps.
    pub inference: Option<Inference>,
    pub tree_method: TreeBuildMethod,
    pub gibbs: GibbsConfig,
    pub vi: ViConfig,
    pub inducing_per_class: usize,
    pub sessions: SessionConfig,
    pub class_counts: Vec<usize>,
    pub chain_counts: Vec<usize>,
    pub methods: Vec<SweepMethod>,
    pub n_seeds: usize,
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub artifact: Option<PathBuf>,
    pub workers: Option<usize>,
    pub synthetic: SyntheticConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: None,
            data: DataConfig::default(),
            kernel: KernelSpec::default(),
            novel_kernel: KernelSpec::novel_session_default(),
            inference: None,
            tree_method: TreeBuildMethod::KMeansBisect,
            gibbs: GibbsConfig::default(),
            vi: ViConfig::default(),
            inducing_per_class: 5,
            sessions: SessionConfig::default(),
            class_counts: Vec::new(),
            chain_counts: vec![1, 4],
            methods: SweepMethod::ALL.to_vec(),
            n_seeds: 10,
            seed: None,
            output: None,
            artifact: None,
            workers: None,
            synthetic: SyntheticConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn command(&self) -> Command {
        self.command.expect("resolved configs carry their command")
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn inference(&self) -> Inference {
        self.inference.unwrap_or(Inference::Gibbs)
    }

    /// Fills command-dependent defaults and checks every setting the command uses.
    pub fn resolve(mut self, command: Command) -> Result<Self, CliError> {
        self.command = Some(command);
        if self.inference.is_none() {
            self.inference = Some(match command {
                Command::TrainBase | Command::Incremental => Inference::Vi,
                _ => Inference::Gibbs,
            });
        }
        if command.needs_seed() && self.seed.is_none() {
            return Err(CliError::Config("a seed is required (--seed or \"seed\" in the config file)".into()));
        }
        if command != Command::InspectArtifact && self.output.is_none() {
            return Err(CliError::Config("an output directory is required (--out)".into()));
        }
        self.kernel.validate()?;
        self.novel_kernel.validate()?;
        self.gibbs.validate()?;
        self.vi.validate()?;
        let d = &self.data;
        for (name, f) in [("test_fraction", d.test_fraction), ("val_fraction", d.val_fraction)] {
            if !(f > 0.0 && f < 1.0) {
                return Err(CliError::Config(format!("{name} must lie in (0, 1), got {f}")));
            }
        }
        if self.inducing_per_class == 0 {
            return Err(CliError::Config("inducing_per_class must be at least 1".into()));
        }
        if self.workers == Some(0) {
            return Err(CliError::Config("workers must be at least 1".into()));
        }
        match command {
            Command::TrainBase | Command::ClassSweep | Command::Incremental | Command::ChainSweep => {
                if d.train_features.is_none() {
                    return Err(CliError::Config("data.train_features is required".into()));
                }
            }
            Command::Eval => {
                if self.artifact.is_none() || d.test_features.is_none() {
                    return Err(CliError::Config("eval needs --artifact and --test-features".into()));
                }
            }
            Command::InspectArtifact => {
                if self.artifact.is_none() {
                    return Err(CliError::Config("inspect-artifact needs --artifact".into()));
                }
            }
            Command::GenSynthetic => {
                let s = &self.synthetic;
                if s.classes < 2 || s.dim < 2 || s.train_per_class == 0 || s.test_per_class == 0 {
                    return Err(CliError::Config("synthetic data needs >= 2 classes, >= 2 dims and rows in both splits".into()));
                }
                if !(s.noise >= 0.0 && s.class_spread >= 0.0 && s.radius > 0.0) {
                    return Err(CliError::Config("synthetic scales must be non-negative (radius positive)".into()));
                }
            }
        }
        match command {
            Command::ClassSweep => {
                if self.class_counts.is_empty() || self.class_counts.iter().any(|&c| c < 2) {
                    return Err(CliError::Config("class_counts needs entries of at least 2".into()));
                }
                if self.methods.is_empty() {
                    return Err(CliError::Config("methods must not be empty".into()));
                }
            }
            Command::ChainSweep => {
                if self.chain_counts.is_empty() || self.chain_counts.contains(&0) {
                    return Err(CliError::Config("chain_counts needs positive entries".into()));
                }
                if self.class_counts.len() > 1 || self.class_counts.iter().any(|&c| c < 2) {
                    return Err(CliError::Config("chain-sweep takes at most one class count (>= 2)".into()));
                }
            }
            _ => {}
        }
        if matches!(command, Command::ClassSweep | Command::ChainSweep) && self.n_seeds == 0 {
            return Err(CliError::Config("n_seeds must be at least 1".into()));
        }
        if command == Command::Incremental {
            let s = &self.sessions;
            if s.n_base < 2 || s.way == 0 || s.shot == 0 || s.n_sessions == 0 {
                return Err(CliError::Config("sessions need n_base >= 2 and positive way, shot, n_sessions".into()));
            }
        }
        Ok(self)
    }
}
