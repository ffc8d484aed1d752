//! Single-file model container: magic, format version, JSON manifest, and a
//! payload of little-endian `f64` tensors referenced from the manifest.
//!
//! Only stored state is written. Gram matrices, factorizations and other
//! caches are recomputed on load by the same code paths used in memory, so
//! a loaded model predicts bit-for-bit like the one that was saved.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::incremental::{BaseArtifact, ExpandedModel, ExpansionMode, NovelStore};
use crate::kernels::KernelSpec;
use crate::linalg::Matrix;
use crate::node_gibbs::{ChainState, GibbsConfig, NodeGibbsModel, PredictMode};
use crate::node_vi::{InducingStore, NodeVIModel};
use crate::rng::RngStream;
use crate::scalar::Real;
use crate::tree::{LabelTree, NodeClassifier, NodeKind, TreeNode};

pub const ARTIFACT_MAGIC: &[u8; 8] = b"GPTREEAR";
pub const ARTIFACT_FORMAT_VERSION: u32 = 1;

/// A stored model: a label tree plus whatever the incremental engine needs.
#[derive(Clone, Debug)]
pub struct ModelArtifact<T> {
    pub base_spec: KernelSpec,
    pub novel_spec: KernelSpec,
    pub tree: LabelTree<T>,
    pub inducing: Option<InducingStore<T>>,
    pub novel: Option<NovelStore<T>>,
    /// Present when `tree` is an expanded model.
    pub expansion: Option<ExpansionInfo>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionInfo {
    pub mode: ExpansionMode,
    pub base_offset: Option<usize>,
}

impl<T: Real> ModelArtifact<T> {
    pub fn from_base(base: &BaseArtifact<T>) -> Self {
        Self {
            base_spec: *base.base_spec(),
            novel_spec: *base.novel_spec(),
            tree: base.tree().clone(),
            inducing: Some(base.inducing().clone()),
            novel: None,
            expansion: None,
        }
    }

    pub fn from_expanded(base: &BaseArtifact<T>, model: &ExpandedModel<T>, novel: &NovelStore<T>) -> Self {
        Self {
            tree: model.tree().clone(),
            novel: Some(novel.clone()),
            expansion: Some(ExpansionInfo { mode: model.mode(), base_offset: model.base_offset() }),
            ..Self::from_base(base)
        }
    }

    /// Reinterprets a stored base model as a frozen [`BaseArtifact`].
    pub fn into_base(self) -> Result<BaseArtifact<T>> {
        if self.expansion.is_some() {
            return Err(Error::Format("artifact holds an expanded model, not a base model".into()));
        }
        let inducing = self.inducing.ok_or_else(|| Error::Format("base artifact lacks an inducing store".into()))?;
        crate::incremental::finalize_base(self.tree, inducing, self.base_spec, self.novel_spec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct TensorRef {
    offset: usize,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct ChainManifest {
    omega: TensorRef,
    f: TensorRef,
    steps_taken: usize,
    seed: u64,
    stream_id: u64,
    /// Decimal string: JSON numbers cannot hold a u128 exactly.
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum ClassifierManifest {
    Gibbs {
        spec: KernelSpec,
        config: GibbsConfig,
        x: TensorRef,
        y: Vec<bool>,
        chains: Vec<ChainManifest>,
    },
    Vi {
        spec: KernelSpec,
        predict_mode: PredictMode,
        quadrature_order: usize,
        inducing_rows: Vec<usize>,
        z: TensorRef,
        eta: TensorRef,
        h: TensorRef,
        mu: TensorRef,
        sigma: TensorRef,
    },
}

#[derive(Serialize, Deserialize)]
struct NodeManifest {
    classes: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    leaf: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    left: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    right: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    classifier: Option<ClassifierManifest>,
}

#[derive(Serialize, Deserialize)]
struct InducingManifest {
    xbar: TensorRef,
    ybar: Vec<usize>,
    m_per_class: usize,
}

#[derive(Serialize, Deserialize)]
struct NovelManifest {
    features: Option<TensorRef>,
    labels: Vec<usize>,
    n_classes: usize,
    sessions: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    library_version: String,
    scalar_bits: u32,
    base_spec: KernelSpec,
    novel_spec: KernelSpec,
    root: usize,
    nodes: Vec<NodeManifest>,
    inducing: Option<InducingManifest>,
    novel: Option<NovelManifest>,
    expansion: Option<ExpansionInfo>,
}

#[derive(Default)]
struct Writer {
    payload: Vec<f64>,
}

impl Writer {
    fn put<T: Real>(&mut self, rows: usize, cols: usize, data: &[T]) -> TensorRef {
        let offset = self.payload.len();
        self.payload.extend(data.iter().map(|v| v.as_f64()));
        TensorRef { offset, rows, cols }
    }

    fn matrix<T: Real>(&mut self, m: &Matrix<T>) -> TensorRef {
        self.put(m.rows(), m.cols(), m.as_slice())
    }

    fn vector<T: Real>(&mut self, v: &[T]) -> TensorRef {
        self.put(v.len(), 1, v)
    }
}

struct Reader<'a> {
    payload: &'a [f64],
}

impl Reader<'_> {
    fn values<T: Real>(&self, t: TensorRef) -> Result<Vec<T>> {
        let len = t.rows.checked_mul(t.cols).ok_or_else(|| Error::Format("tensor shape overflows".into()))?;
        let end = t.offset.checked_add(len).filter(|&e| e <= self.payload.len()).ok_or_else(|| {
            Error::Format(format!("tensor at {}..{} exceeds the {}-value payload", t.offset, t.offset + len, self.payload.len()))
        })?;
        Ok(self.payload[t.offset..end].iter().map(|&v| T::lit(v)).collect())
    }

    fn matrix<T: Real>(&self, t: TensorRef) -> Result<Matrix<T>> {
        Matrix::from_vec(t.rows, t.cols, self.values(t)?)
    }

    fn vector<T: Real>(&self, t: TensorRef) -> Result<Vec<T>> {
        if t.cols != 1 {
            return Err(Error::Format("expected a column tensor".into()));
        }
        self.values(t)
    }
}

fn classifier_manifest<T: Real>(c: &NodeClassifier<T>, w: &mut Writer) -> ClassifierManifest {
    match c {
        NodeClassifier::Gibbs(m) => ClassifierManifest::Gibbs {
            spec: *m.spec(),
            config: *m.config(),
            x: w.matrix(m.inputs()),
            y: m.labels().to_vec(),
            chains: m
                .chains()
                .iter()
                .map(|ch| ChainManifest {
                    omega: w.vector(&ch.omega),
                    f: w.vector(&ch.f),
                    steps_taken: ch.steps_taken,
                    seed: ch.rng.seed(),
                    stream_id: ch.rng.stream_id(),
                    word_pos: ch.rng.word_pos().to_string(),
                })
                .collect(),
        },
        NodeClassifier::Vi(m) => ClassifierManifest::Vi {
            spec: *m.spec(),
            predict_mode: m.predict_mode(),
            quadrature_order: m.quadrature_order(),
            inducing_rows: m.inducing_rows().to_vec(),
            z: w.matrix(m.inducing_inputs()),
            eta: w.vector(m.eta()),
            h: w.matrix(m.h()),
            mu: w.vector(m.mean()),
            sigma: w.matrix(m.cov()),
        },
    }
}

fn classifier_from<T: Real>(c: ClassifierManifest, r: &Reader) -> Result<NodeClassifier<T>> {
    Ok(match c {
        ClassifierManifest::Gibbs { spec, config, x, y, chains } => {
            let chains = chains
                .into_iter()
                .map(|ch| {
                    let pos: u128 =
                        ch.word_pos.parse().map_err(|_| Error::Format(format!("bad stream position `{}`", ch.word_pos)))?;
                    Ok(ChainState {
                        omega: r.vector(ch.omega)?,
                        f: r.vector(ch.f)?,
                        steps_taken: ch.steps_taken,
                        rng: RngStream::at_position(ch.seed, ch.stream_id, pos),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            NodeClassifier::Gibbs(NodeGibbsModel::from_parts(spec, config, r.matrix(x)?, y, chains)?)
        }
        ClassifierManifest::Vi { spec, predict_mode, quadrature_order, inducing_rows, z, eta, h, mu, sigma } => {
            NodeClassifier::Vi(NodeVIModel::from_parts(
                spec,
                predict_mode,
                quadrature_order,
                inducing_rows,
                r.matrix(z)?,
                r.vector(eta)?,
                r.matrix(h)?,
                r.vector(mu)?,
                r.matrix(sigma)?,
            )?)
        }
    })
}

/// Serializes `model` into the container byte layout.
pub fn artifact_to_bytes<T: Real>(model: &ModelArtifact<T>) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    let nodes = model
        .tree
        .nodes()
        .iter()
        .map(|n| match &n.kind {
            NodeKind::Leaf { class } => NodeManifest {
                classes: n.classes.clone(),
                leaf: Some(*class),
                left: None,
                right: None,
                classifier: None,
            },
            NodeKind::Internal { left, right, classifier } => NodeManifest {
                classes: n.classes.clone(),
                leaf: None,
                left: Some(*left),
                right: Some(*right),
                classifier: classifier.as_ref().map(|c| classifier_manifest(c, &mut w)),
            },
        })
        .collect();
    let inducing = model.inducing.as_ref().map(|s| InducingManifest {
        xbar: w.matrix(&s.xbar),
        ybar: s.ybar.clone(),
        m_per_class: s.m_per_class,
    });
    let novel = model.novel.as_ref().map(|s| NovelManifest {
        features: s.data().map(|d| w.matrix(d.features())),
        labels: s.data().map(|d| d.labels().to_vec()).unwrap_or_default(),
        n_classes: s.data().map_or(0, Dataset::n_classes),
        sessions: s.sessions().to_vec(),
    });
    let manifest = Manifest {
        format_version: ARTIFACT_FORMAT_VERSION,
        library_version: crate::VERSION.to_string(),
        scalar_bits: 8 * std::mem::size_of::<T>() as u32,
        base_spec: model.base_spec,
        novel_spec: model.novel_spec,
        root: model.tree.root(),
        nodes,
        inducing,
        novel,
        expansion: model.expansion,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(28 + json.len() + 8 * w.payload.len());
    out.extend_from_slice(ARTIFACT_MAGIC);
    out.extend_from_slice(&ARTIFACT_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(w.payload.len() as u64 * 8).to_le_bytes());
    for v in &w.payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format(format!("artifact truncated while reading {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

/// Parses the container byte layout.
pub fn artifact_from_bytes<T: Real>(mut bytes: &[u8]) -> Result<ModelArtifact<T>> {
    if take(&mut bytes, 8, "magic")? != ARTIFACT_MAGIC {
        return Err(Error::Format("not a model artifact (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(&mut bytes, 4, "version")?.try_into().expect("4 bytes"));
    if version != ARTIFACT_FORMAT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: ARTIFACT_FORMAT_VERSION });
    }
    let mlen = u64::from_le_bytes(take(&mut bytes, 8, "manifest length")?.try_into().expect("8 bytes")) as usize;
    let manifest: Manifest = serde_json::from_slice(take(&mut bytes, mlen, "manifest")?)
        .map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let plen = u64::from_le_bytes(take(&mut bytes, 8, "payload length")?.try_into().expect("8 bytes")) as usize;
    if plen != bytes.len() || !plen.is_multiple_of(8) {
        return Err(Error::Format(format!("payload length field says {plen} bytes, {} present", bytes.len())));
    }
    let payload: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let r = Reader { payload: &payload };
    let nodes = manifest
        .nodes
        .into_iter()
        .map(|n| {
            let kind = match (n.leaf, n.left, n.right) {
                (Some(class), None, None) => NodeKind::Leaf { class },
                (None, Some(left), Some(right)) => NodeKind::Internal {
                    left,
                    right,
                    classifier: n.classifier.map(|c| classifier_from(c, &r)).transpose()?,
                },
                _ => return Err(Error::Format("node is neither a leaf nor an internal node".into())),
            };
            Ok(TreeNode { classes: n.classes, kind })
        })
        .collect::<Result<Vec<_>>>()?;
    let tree = LabelTree::from_nodes(nodes, manifest.root)?;
    let inducing = manifest
        .inducing
        .map(|m| Ok::<_, Error>(InducingStore { xbar: r.matrix(m.xbar)?, ybar: m.ybar, m_per_class: m.m_per_class }))
        .transpose()?;
    let novel = manifest
        .novel
        .map(|m| {
            let data = match m.features {
                Some(t) => Some(Dataset::new(r.matrix(t)?, m.labels, m.n_classes)?),
                None => None,
            };
            NovelStore::from_parts(data, m.sessions)
        })
        .transpose()?;
    Ok(ModelArtifact {
        base_spec: manifest.base_spec,
        novel_spec: manifest.novel_spec,
        tree,
        inducing,
        novel,
        expansion: manifest.expansion,
    })
}

pub fn save_artifact<T: Real>(model: &ModelArtifact<T>, path: &Path) -> Result<()> {
    Ok(fs::write(path, artifact_to_bytes(model)?)?)
}

pub fn load_artifact<T: Real>(path: &Path) -> Result<ModelArtifact<T>> {
    artifact_from_bytes(&fs::read(path)?)
}
