//! Datasets, feature files, session plans and model artifacts.

mod artifact;
mod dataset;
mod features;
mod session;

pub use artifact::{
    artifact_from_bytes, artifact_to_bytes, load_artifact, save_artifact, ExpansionInfo, ModelArtifact,
    ARTIFACT_FORMAT_VERSION, ARTIFACT_MAGIC,
};
pub use dataset::Dataset;
pub use features::{
    header_path, load_dataset, read_labels, write_csv, write_features_bin, write_labels, Dtype, FeatureHeader,
    FEATURE_FORMAT, FEATURE_FORMAT_VERSION,
};
pub use session::{make_session_plan, NovelSession, SessionData, SessionPlan};
