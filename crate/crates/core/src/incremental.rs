//! Few-shot class-incremental learning on top of a frozen variational base tree.
//!
//! Novel sessions never touch the base tree. New classes get a Gibbs-fitted
//! subtree built from stored embeddings, and a new Gibbs root separates them
//! from the base side. The root is trained on the base inducing inputs
//! (labelled `y = 0`, right) against the novel embeddings (`y = 1`, left).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data_io::Dataset;
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::linalg::Matrix;
use crate::node_gibbs::{GibbsConfig, NodeGibbsModel};
use crate::node_vi::InducingStore;
use crate::rng::RngStream;
use crate::scalar::Real;
use crate::tree::{argmax, build_tree, class_prototypes, fit_tree_gibbs, LabelTree, NodeClassifier, TreeBuildMethod};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpansionMode {
    /// One novel subtree over every novel class seen so far, under a shared root.
    #[default]
    Accumulated,
    /// A subtree per session, each joined above the previous whole tree.
    SessionTree,
    /// A fresh Gibbs tree over inducing inputs and all novel embeddings.
    RebuildTree,
}

/// Anything that maps inputs to a distribution over a fixed class list.
pub trait ClassPredictor<T: Real>: Sync {
    /// Classes scored by [`ClassPredictor::predict_proba`], ascending.
    fn classes(&self) -> Vec<usize>;

    fn predict_proba(&self, x: &Matrix<T>) -> Result<Vec<Vec<T>>>;

    fn predict_labels(&self, x: &Matrix<T>) -> Result<Vec<usize>> {
        let classes = self.classes();
        Ok(self.predict_proba(x)?.iter().map(|p| classes[argmax(p)]).collect())
    }
}

impl<T: Real> ClassPredictor<T> for LabelTree<T> {
    fn classes(&self) -> Vec<usize> {
        LabelTree::classes(self).to_vec()
    }

    fn predict_proba(&self, x: &Matrix<T>) -> Result<Vec<Vec<T>>> {
        self.predict(x)
    }
}

/// SHA-256 over a node classifier's stored numbers and settings.
pub fn classifier_digest<T: Real>(c: &NodeClassifier<T>) -> [u8; 32] {
    let mut h = Sha256::new();
    let mut put = |xs: &[T]| {
        h.update((xs.len() as u64).to_le_bytes());
        for x in xs {
            h.update(x.as_f64().to_le_bytes());
        }
    };
    match c {
        NodeClassifier::Gibbs(m) => {
            put(m.inputs().as_slice());
            put(m.kappa());
            for ch in m.chains() {
                put(&ch.omega);
                put(&ch.f);
            }
        }
        NodeClassifier::Vi(m) => {
            put(m.inducing_inputs().as_slice());
            put(m.eta());
            put(m.h().as_slice());
            put(m.mean());
            put(m.cov().as_slice());
        }
    }
    let settings = match c {
        NodeClassifier::Gibbs(m) => serde_json::to_string(&(m.spec(), m.config())),
        NodeClassifier::Vi(m) => serde_json::to_string(&(m.spec(), m.predict_mode(), m.inducing_rows())),
    };
    h.update(settings.expect("settings serialize").as_bytes());
    h.finalize().into()
}

fn tree_digests<T: Real>(tree: &LabelTree<T>, offset: usize) -> Vec<(usize, [u8; 32])> {
    tree.internal_in_order()
        .into_iter()
        .filter_map(|id| tree.classifier(id).map(|c| (id + offset, classifier_digest(c))))
        .collect()
}

/// Frozen output of base training.
#[derive(Clone, Debug)]
pub struct BaseArtifact<T> {
    tree: LabelTree<T>,
    inducing: InducingStore<T>,
    base_spec: KernelSpec,
    novel_spec: KernelSpec,
}

/// Freezes a fully fitted base tree with its inducing store.
pub fn finalize_base<T: Real>(
    tree: LabelTree<T>,
    inducing: InducingStore<T>,
    base_spec: KernelSpec,
    novel_spec: KernelSpec,
) -> Result<BaseArtifact<T>> {
    if !tree.is_fitted() {
        return Err(Error::NotFitted("base tree has unfitted internal nodes".into()));
    }
    base_spec.validate()?;
    novel_spec.validate()?;
    if let Some(&c) = tree.classes().iter().find(|&&c| inducing.count_for_class(c) == 0) {
        return Err(Error::EmptyClass(c));
    }
    Ok(BaseArtifact { tree, inducing, base_spec, novel_spec })
}

impl<T: Real> BaseArtifact<T> {
    pub fn tree(&self) -> &LabelTree<T> {
        &self.tree
    }

    pub fn inducing(&self) -> &InducingStore<T> {
        &self.inducing
    }

    pub fn base_spec(&self) -> &KernelSpec {
        &self.base_spec
    }

    pub fn novel_spec(&self) -> &KernelSpec {
        &self.novel_spec
    }

    /// `(node id, digest)` for every base internal node.
    pub fn payload_digests(&self) -> Vec<(usize, [u8; 32])> {
        tree_digests(&self.tree, 0)
    }

    /// Inducing inputs labelled with their base classes.
    pub fn exemplars(&self) -> Result<Dataset<T>> {
        let n_classes = self.inducing.ybar.iter().max().map_or(0, |&m| m + 1);
        Dataset::new(self.inducing.xbar.clone(), self.inducing.ybar.clone(), n_classes)
    }
}

impl<T: Real> ClassPredictor<T> for BaseArtifact<T> {
    fn classes(&self) -> Vec<usize> {
        self.tree.classes().to_vec()
    }

    fn predict_proba(&self, x: &Matrix<T>) -> Result<Vec<Vec<T>>> {
        self.tree.predict(x)
    }
}

/// Stored embeddings of every novel session so far.
#[derive(Clone, Debug, Default)]
pub struct NovelStore<T> {
    data: Option<Dataset<T>>,
    sessions: Vec<Vec<usize>>,
}

impl<T: Real> NovelStore<T> {
    pub fn new() -> Self {
        Self { data: None, sessions: Vec::new() }
    }

    pub fn from_parts(data: Option<Dataset<T>>, sessions: Vec<Vec<usize>>) -> Result<Self> {
        let stored: BTreeSet<usize> = data.iter().flat_map(|d| d.labels().iter().copied()).collect();
        let listed: Vec<usize> = sessions.iter().flatten().copied().collect();
        let listed_set: BTreeSet<usize> = listed.iter().copied().collect();
        if listed_set.len() != listed.len() {
            return Err(Error::Format("novel sessions repeat a class".into()));
        }
        if !stored.is_subset(&listed_set) {
            return Err(Error::Format("stored novel rows belong to no session".into()));
        }
        Ok(Self { data, sessions })
    }

    pub fn data(&self) -> Option<&Dataset<T>> {
        self.data.as_ref()
    }

    /// Class sets per stored session, in arrival order.
    pub fn sessions(&self) -> &[Vec<usize>] {
        &self.sessions
    }

    pub fn classes(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.sessions.iter().flatten().copied().collect();
        all.sort_unstable();
        all
    }

    pub fn len(&self) -> usize {
        self.data.as_ref().map_or(0, Dataset::n)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&mut self, session: &Dataset<T>, classes: Vec<usize>) -> Result<()> {
        self.data = Some(match &self.data {
            Some(d) => d.concat(session)?,
            None => session.clone(),
        });
        self.sessions.push(classes);
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IncrementalConfig {
    pub mode: ExpansionMode,
    pub gibbs: GibbsConfig,
    pub tree_method: TreeBuildMethod,
}

/// Model after a novel session.
#[derive(Clone, Debug)]
pub struct ExpandedModel<T> {
    tree: LabelTree<T>,
    mode: ExpansionMode,
    /// Id shift from base-tree node ids to ids in `tree`; `None` when rebuilt.
    base_offset: Option<usize>,
}

impl<T: Real> ExpandedModel<T> {
    pub fn from_parts(tree: LabelTree<T>, mode: ExpansionMode, base_offset: Option<usize>) -> Result<Self> {
        if !tree.is_fitted() {
            return Err(Error::NotFitted("expanded tree has unfitted internal nodes".into()));
        }
        Ok(Self { tree, mode, base_offset })
    }

    pub fn tree(&self) -> &LabelTree<T> {
        &self.tree
    }

    pub fn mode(&self) -> ExpansionMode {
        self.mode
    }

    pub fn base_offset(&self) -> Option<usize> {
        self.base_offset
    }

    /// Digests of the embedded base nodes, keyed by their base-tree ids.
    pub fn base_payload_digests(&self, base: &BaseArtifact<T>) -> Vec<(usize, [u8; 32])> {
        let Some(off) = self.base_offset else { return Vec::new() };
        base.tree
            .internal_in_order()
            .into_iter()
            .filter_map(|id| self.tree.classifier(id + off).map(|c| (id, classifier_digest(c))))
            .collect()
    }

    /// Product of node probabilities from the root down to the base subtree
    /// root, per input row. `None` when the base subtree was rebuilt.
    pub fn base_side_probs(&self, base: &BaseArtifact<T>, x: &Matrix<T>) -> Result<Option<Vec<T>>> {
        let Some(off) = self.base_offset else { return Ok(None) };
        let some_class = base.tree.classes()[0];
        let full = self.tree.path(some_class).ok_or(Error::UnknownClass(some_class))?;
        let within = base.tree.path(some_class).map_or(0, <[_]>::len);
        let above = &full[..full.len() - within];
        let mut out = vec![T::one(); x.rows()];
        for &(node, left) in above {
            let c = self.tree.classifier(node).ok_or_else(|| Error::NotFitted(format!("node {node}")))?;
            for (o, p) in out.iter_mut().zip(c.predict_probs(x)?) {
                *o *= if left { p } else { T::one() - p };
            }
        }
        debug_assert!(above.iter().all(|&(n, _)| n < off || n >= off + base.tree.nodes().len()));
        Ok(Some(out))
    }
}

impl<T: Real> ClassPredictor<T> for ExpandedModel<T> {
    fn classes(&self) -> Vec<usize> {
        self.tree.classes().to_vec()
    }

    fn predict_proba(&self, x: &Matrix<T>) -> Result<Vec<Vec<T>>> {
        self.tree.predict(x)
    }
}

/// Session-by-session driver holding the base artifact and the novel store.
#[derive(Clone, Debug)]
pub struct IncrementalLearner<T> {
    base: BaseArtifact<T>,
    store: NovelStore<T>,
    cfg: IncrementalConfig,
    rng: RngStream,
    current: Option<ExpandedModel<T>>,
}

fn gibbs_subtree<T: Real>(
    data: &Dataset<T>,
    classes: &[usize],
    spec: &KernelSpec,
    cfg: &IncrementalConfig,
    rng: &RngStream,
) -> Result<LabelTree<T>> {
    if classes.len() == 1 {
        return Ok(LabelTree::leaf(classes[0]));
    }
    let protos = class_prototypes(data)?;
    let mut tree = build_tree(&protos, cfg.tree_method, classes, rng)?;
    fit_tree_gibbs(&mut tree, data, spec, &cfg.gibbs, rng)?;
    Ok(tree)
}

impl<T: Real> IncrementalLearner<T> {
    pub fn new(base: BaseArtifact<T>, cfg: IncrementalConfig, rng: RngStream) -> Result<Self> {
        cfg.gibbs.validate()?;
        Ok(Self { base, store: NovelStore::new(), cfg, rng, current: None })
    }

    pub fn base(&self) -> &BaseArtifact<T> {
        &self.base
    }

    pub fn store(&self) -> &NovelStore<T> {
        &self.store
    }

    pub fn current(&self) -> Option<&ExpandedModel<T>> {
        self.current.as_ref()
    }

    /// Number of novel sessions added so far.
    pub fn sessions_done(&self) -> usize {
        self.store.sessions().len()
    }

    /// Classes the current model predicts over.
    pub fn seen_classes(&self) -> Vec<usize> {
        let mut all = self.base.tree.classes().to_vec();
        all.extend(self.store.classes());
        all.sort_unstable();
        all
    }

    /// Adds one novel session whose classes are `classes` (each must have rows
    /// in `session` and be new).
    pub fn add_novel_session(&mut self, session: &Dataset<T>, classes: &[usize]) -> Result<&ExpandedModel<T>> {
        let seen: BTreeSet<usize> = self.seen_classes().into_iter().collect();
        let mut new_classes = classes.to_vec();
        new_classes.sort_unstable();
        new_classes.dedup();
        if new_classes.is_empty() {
            return Err(Error::InvalidConfig("a novel session needs at least one class".into()));
        }
        if let Some(&c) = new_classes.iter().find(|c| seen.contains(c)) {
            return Err(Error::ClassCollision(c));
        }
        if let Some(&c) = session.labels().iter().find(|c| new_classes.binary_search(c).is_err()) {
            return Err(Error::UnknownClass(c));
        }
        if let Some(&c) = new_classes.iter().find(|&&c| session.class_indices(c).is_empty()) {
            return Err(Error::EmptyClass(c));
        }
        let rng = self.rng.derive(self.store.sessions().len() as u64);
        self.store.push(session, new_classes.clone())?;
        let model = self.expand(session, &new_classes, &rng)?;
        Ok(self.current.insert(model))
    }

    fn expand(&self, session: &Dataset<T>, new_classes: &[usize], rng: &RngStream) -> Result<ExpandedModel<T>> {
        let spec = self.base.novel_spec;
        let cfg = &self.cfg;
        let novel = self.store.data().expect("store holds the current session");
        let inducing = &self.base.inducing.xbar;
        match cfg.mode {
            ExpansionMode::Accumulated => {
                let sub = gibbs_subtree(novel, &self.store.classes(), &spec, cfg, &rng.derive_named("novel-tree"))?;
                let (_, off) = LabelTree::join_offsets(&sub);
                let mut tree = LabelTree::join(sub, self.base.tree.clone())?;
                let x = inducing.vstack(novel.features())?;
                let y: Vec<bool> = (0..x.rows()).map(|i| i >= inducing.rows()).collect();
                let root = NodeGibbsModel::fit(&x, &y, &spec, &cfg.gibbs, &rng.derive_named("root"))?;
                tree.set_classifier(tree.root(), NodeClassifier::Gibbs(root))?;
                Ok(ExpandedModel { tree, mode: cfg.mode, base_offset: Some(off) })
            }
            ExpansionMode::SessionTree => {
                let sub = gibbs_subtree(session, new_classes, &spec, cfg, &rng.derive_named("novel-tree"))?;
                let (previous, prev_off) = match &self.current {
                    Some(m) => (m.tree.clone(), m.base_offset.expect("session trees keep the base subtree")),
                    None => (self.base.tree.clone(), 0),
                };
                let (_, off) = LabelTree::join_offsets(&sub);
                let mut tree = LabelTree::join(sub, previous)?;
                // earlier novel embeddings sit on the old side together with the exemplars
                let n_old = novel.n() - session.n();
                let old_idx: Vec<usize> = (0..n_old).collect();
                let x = inducing.vstack(&novel.features().select_rows(&old_idx))?.vstack(session.features())?;
                let y: Vec<bool> = (0..x.rows()).map(|i| i >= inducing.rows() + n_old).collect();
                let root = NodeGibbsModel::fit(&x, &y, &spec, &cfg.gibbs, &rng.derive_named("root"))?;
                tree.set_classifier(tree.root(), NodeClassifier::Gibbs(root))?;
                Ok(ExpandedModel { tree, mode: cfg.mode, base_offset: Some(prev_off + off) })
            }
            ExpansionMode::RebuildTree => {
                let all = self.base.exemplars()?.concat(novel)?;
                let classes = self.seen_classes();
                let protos = class_prototypes(&all)?;
                let mut tree = build_tree(&protos, TreeBuildMethod::KMeansBisect, &classes, &rng.derive_named("rebuild"))?;
                fit_tree_gibbs(&mut tree, &all, &spec, &cfg.gibbs, &rng.derive_named("rebuild"))?;
                Ok(ExpandedModel { tree, mode: cfg.mode, base_offset: None })
            }
        }
    }
}

/// Accuracies `α_j^k` of session-`j` test classes under the model of session
/// `k` (`k ≥ j`), plus joint accuracy over everything seen at session `k`.
/// Sessions are indexed from 0 (the base session).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    /// `acc[j][k]`; `None` for `k < j` or an empty test set.
    pub acc: Vec<Vec<Option<f64>>>,
    pub joint: Vec<f64>,
}

impl SessionReport {
    pub fn n_sessions(&self) -> usize {
        self.joint.len()
    }

    pub fn alpha(&self, j: usize, k: usize) -> Option<f64> {
        self.acc.get(j).and_then(|r| r.get(k)).copied().flatten()
    }

    /// `g_j^k = max_{j ≤ l < k} α_j^l − α_j^k`, clamped at zero.
    pub fn forgetting(&self, j: usize, k: usize) -> Option<f64> {
        if j >= k {
            return None;
        }
        let now = self.alpha(j, k)?;
        let best = (j..k).filter_map(|l| self.alpha(j, l)).fold(f64::NEG_INFINITY, f64::max);
        if best == f64::NEG_INFINITY {
            return None;
        }
        Some((best - now).max(0.0))
    }
}

fn accuracy(pred: &[usize], truth: &[usize]) -> Option<f64> {
    if truth.is_empty() {
        return None;
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Some(hits as f64 / truth.len() as f64)
}

/// `models[k]` is the model after session `k`; `tests[j]` holds the test rows
/// of the classes introduced in session `j`.
pub fn evaluate_sessions<T: Real>(models: &[&dyn ClassPredictor<T>], tests: &[Dataset<T>]) -> Result<SessionReport> {
    let s = models.len();
    if tests.len() != s {
        return Err(Error::DimensionMismatch(format!("{s} models but {} test sets", tests.len())));
    }
    let mut acc = vec![vec![None; s]; s];
    let mut joint = Vec::with_capacity(s);
    for (k, model) in models.iter().enumerate() {
        let mut hits = 0.0;
        let mut total = 0usize;
        for (j, test) in tests.iter().enumerate().take(k + 1) {
            if test.n() == 0 {
                continue;
            }
            let a = accuracy(&model.predict_labels(test.features())?, test.labels());
            acc[j][k] = a;
            hits += a.unwrap_or(0.0) * test.n() as f64;
            total += test.n();
        }
        joint.push(if total == 0 { 0.0 } else { hits / total as f64 });
    }
    Ok(SessionReport { acc, joint })
}

/// Mean of `g_j^k` over earlier sessions `j < k`; requires `k ≥ 1`.
pub fn average_forgetting(report: &SessionReport, k: usize) -> Result<f64> {
    if k == 0 || k >= report.n_sessions() {
        return Err(Error::InvalidConfig(format!(
            "forgetting needs 1 <= k < {} (got {k})",
            report.n_sessions()
        )));
    }
    let g: Vec<f64> = (0..k).filter_map(|j| report.forgetting(j, k)).collect();
    if g.is_empty() {
        return Ok(0.0);
    }
    Ok(g.iter().sum::<f64>() / g.len() as f64)
}
