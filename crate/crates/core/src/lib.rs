//! Hierarchical multi-class Gaussian-process classification.
//!
//! Classes sit at the leaves of a binary label tree and every internal node
//! holds a binary GP classifier with a logistic link. Pólya-Gamma
//! augmentation makes each node conditionally Gaussian, which gives exact
//! block Gibbs sampling ([`node_gibbs`]) and closed-form coordinate updates for
//! sparse variational inference ([`node_vi`]). [`incremental`] grows a frozen
//! base tree with few-shot sessions of new classes.
//!
//! Numerical code is generic over [`Real`] (`f32` or `f64`); the `*F64` and
//! `*F32` aliases below name the common instantiations.

// NaN-rejecting comparisons are written as negated orderings on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cluster;
pub mod data_io;
pub mod error;
pub mod incremental;
pub mod kernels;
pub mod linalg;
pub mod node_gibbs;
pub mod node_vi;
pub mod pg;
pub mod quadrature;
pub mod rng;
pub mod scalar;
pub mod tree;

pub use data_io::{Dataset, ModelArtifact, SessionPlan};
pub use error::{Error, ErrorKind, Result};
pub use incremental::{
    average_forgetting, evaluate_sessions, finalize_base, BaseArtifact, ClassPredictor, ExpandedModel, ExpansionMode,
    IncrementalConfig, IncrementalLearner, NovelStore, SessionReport,
};
pub use kernels::{KernelFamily, KernelSpec};
pub use linalg::{cholesky_psd, Cholesky, JitterSchedule, Matrix, PsdMatrix};
pub use node_gibbs::{ChainState, GibbsConfig, NodeGibbsModel, PredictMode};
pub use node_vi::{init_inducing, BatchAugState, InducingStore, NodeBatch, NodeVIModel};
pub use pg::{pg_mean, sample_pg1, sample_pg_vector, PgDraw};
pub use quadrature::{expected_sigmoid, gauss_hermite, sigmoid, QuadratureRule};
pub use rng::RngStream;
pub use scalar::Real;
pub use tree::{
    build_tree, class_prototypes, fit_tree_gibbs, fit_tree_vi, ClassPrototypes, LabelTree, NodeClassifier, TreeBuildMethod,
    ViConfig,
};

/// Library version recorded in artifacts and reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub type MatrixF64 = Matrix<f64>;
pub type MatrixF32 = Matrix<f32>;
pub type DatasetF64 = Dataset<f64>;
pub type DatasetF32 = Dataset<f32>;
pub type LabelTreeF64 = LabelTree<f64>;
pub type LabelTreeF32 = LabelTree<f32>;
pub type NodeGibbsModelF64 = NodeGibbsModel<f64>;
pub type NodeGibbsModelF32 = NodeGibbsModel<f32>;
pub type NodeVIModelF64 = NodeVIModel<f64>;
pub type NodeVIModelF32 = NodeVIModel<f32>;
pub type BaseArtifactF64 = BaseArtifact<f64>;
pub type BaseArtifactF32 = BaseArtifact<f32>;
