//! Label trees: construction, path likelihood, per-node fitting and prediction.
//!
//! Node ids are indices into the node list. Randomness used at node `v`
//! (during construction and fitting) comes from `rng.derive(v)`, so results
//! do not depend on traversal or thread scheduling. For k-means and random
//! splits the left child is always the side holding the smallest class id.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::kmeans;
use crate::data_io::Dataset;
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::linalg::{dot, Matrix};
use crate::node_gibbs::{GibbsConfig, NodeGibbsModel, PredictMode};
use crate::node_vi::{InducingStore, NodeVIModel};
use crate::quadrature::DEFAULT_QUADRATURE_ORDER;
use crate::rng::RngStream;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TreeBuildMethod {
    /// Recursive 2-means++ on class prototypes.
    #[default]
    KMeansBisect,
    /// Seeded random halving of each node's classes.
    RandomBalanced,
    /// Chain peeling one class per level, in the given class order.
    StickBreakChain,
}

/// L2-normalized per-class mean feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrototypes<T> {
    pub classes: Vec<usize>,
    /// Row i is the prototype of `classes[i]`.
    pub vectors: Matrix<T>,
}

impl<T: Real> ClassPrototypes<T> {
    pub fn get(&self, class: usize) -> Option<&[T]> {
        self.classes.iter().position(|&c| c == class).map(|i| self.vectors.row(i))
    }
}

/// Prototypes of every class present in `dataset`, in ascending class order.
pub fn class_prototypes<T: Real>(dataset: &Dataset<T>) -> Result<ClassPrototypes<T>> {
    class_prototypes_for(dataset, &dataset.classes_present())
}

pub fn class_prototypes_for<T: Real>(dataset: &Dataset<T>, classes: &[usize]) -> Result<ClassPrototypes<T>> {
    let mut sorted = classes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let d = dataset.dim();
    let mut vectors = Matrix::<T>::zeros(sorted.len(), d);
    for (r, &c) in sorted.iter().enumerate() {
        let idx = dataset.class_indices(c);
        if idx.is_empty() {
            return Err(Error::EmptyClass(c));
        }
        let row = vectors.row_mut(r);
        for &i in &idx {
            for (acc, &v) in row.iter_mut().zip(dataset.features().row(i)) {
                *acc += v;
            }
        }
        let inv = T::one() / T::lit(idx.len() as f64);
        row.iter_mut().for_each(|v| *v *= inv);
        let norm = dot(row, row).sqrt();
        if !(norm >= T::lit(1e-12)) {
            return Err(Error::ZeroRow(r));
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(ClassPrototypes { classes: sorted, vectors })
}

#[derive(Debug)]
pub enum NodeClassifier<T> {
    Gibbs(NodeGibbsModel<T>),
    Vi(NodeVIModel<T>),
}

impl<T: Clone> Clone for NodeClassifier<T> {
    fn clone(&self) -> Self {
        match self {
            Self::Gibbs(m) => Self::Gibbs(m.clone()),
            Self::Vi(m) => Self::Vi(m.clone()),
        }
    }
}

impl<T: Real> NodeClassifier<T> {
    /// Probability of going left for each row of raw inputs.
    pub fn predict_probs(&self, x: &Matrix<T>) -> Result<Vec<T>> {
        match self {
            NodeClassifier::Gibbs(m) => m.predict_probs(x),
            NodeClassifier::Vi(m) => m.predict_probs(x),
        }
    }

    pub fn predict_prob(&self, x_star: &[T]) -> Result<T> {
        match self {
            NodeClassifier::Gibbs(m) => m.predict_prob(x_star),
            NodeClassifier::Vi(m) => m.predict_prob(x_star),
        }
    }
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum NodeKind<T> {
    Leaf { class: usize },
    Internal { left: usize, right: usize, classifier: Option<NodeClassifier<T>> },
}

#[derive(Clone, Debug)]
pub struct TreeNode<T> {
    /// Classes below this node, ascending.
    pub classes: Vec<usize>,
    pub kind: NodeKind<T>,
}

#[derive(Clone, Debug)]
pub struct LabelTree<T> {
    nodes: Vec<TreeNode<T>>,
    root: usize,
    /// Root-to-leaf `(node, went_left)` pairs per class.
    paths: BTreeMap<usize, Vec<(usize, bool)>>,
}

/// Training rows routed to one internal node; `y[i]` is true for the left side.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeData {
    pub node: usize,
    pub indices: Vec<usize>,
    pub y: Vec<bool>,
}

impl<T: Real> LabelTree<T> {
    /// A tree holding a single class and no classifiers.
    pub fn leaf(class: usize) -> Self {
        Self::from_nodes(vec![TreeNode { classes: vec![class], kind: NodeKind::Leaf { class } }], 0)
            .expect("a single leaf is a valid tree")
    }

    /// Assembles a tree from a node list, checking the structural invariants.
    pub fn from_nodes(nodes: Vec<TreeNode<T>>, root: usize) -> Result<Self> {
        let mut tree = Self { nodes, root, paths: BTreeMap::new() };
        if root >= tree.nodes.len() {
            return Err(Error::Format(format!("root {root} outside {} nodes", tree.nodes.len())));
        }
        let mut seen = vec![false; tree.nodes.len()];
        let mut stack = vec![(root, Vec::new())];
        while let Some((id, path)) = stack.pop() {
            if std::mem::replace(&mut seen[id], true) {
                return Err(Error::Format(format!("node {id} is reachable twice")));
            }
            match &tree.nodes[id].kind {
                NodeKind::Leaf { class } => {
                    if tree.nodes[id].classes != [*class] {
                        return Err(Error::Format(format!("leaf {id} has an inconsistent class set")));
                    }
                    if tree.paths.insert(*class, path).is_some() {
                        return Err(Error::ClassCollision(*class));
                    }
                }
                NodeKind::Internal { left, right, .. } => {
                    let (l, r) = (*left, *right);
                    if l >= tree.nodes.len() || r >= tree.nodes.len() {
                        return Err(Error::Format(format!("node {id} points outside the node list")));
                    }
                    let mut union = tree.nodes[l].classes.clone();
                    union.extend_from_slice(&tree.nodes[r].classes);
                    union.sort_unstable();
                    if union != tree.nodes[id].classes || union.windows(2).any(|w| w[0] == w[1]) {
                        return Err(Error::Format(format!("children of node {id} do not partition its classes")));
                    }
                    let mut pl = path.clone();
                    pl.push((id, true));
                    let mut pr = path;
                    pr.push((id, false));
                    stack.push((r, pr));
                    stack.push((l, pl));
                }
            }
        }
        Ok(tree)
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn nodes(&self) -> &[TreeNode<T>] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &TreeNode<T> {
        &self.nodes[id]
    }

    pub fn into_nodes(self) -> (Vec<TreeNode<T>>, usize) {
        (self.nodes, self.root)
    }

    /// Every class covered by the tree, ascending.
    pub fn classes(&self) -> &[usize] {
        &self.nodes[self.root].classes
    }

    pub fn n_classes(&self) -> usize {
        self.classes().len()
    }

    pub fn path(&self, class: usize) -> Option<&[(usize, bool)]> {
        self.paths.get(&class).map(Vec::as_slice)
    }

    pub fn depth(&self) -> usize {
        self.paths.values().map(Vec::len).max().unwrap_or(0)
    }

    pub fn children(&self, id: usize) -> Option<(usize, usize)> {
        match self.nodes[id].kind {
            NodeKind::Internal { left, right, .. } => Some((left, right)),
            NodeKind::Leaf { .. } => None,
        }
    }

    pub fn left_classes(&self, id: usize) -> &[usize] {
        self.children(id).map_or(&[], |(l, _)| &self.nodes[l].classes)
    }

    pub fn right_classes(&self, id: usize) -> &[usize] {
        self.children(id).map_or(&[], |(_, r)| &self.nodes[r].classes)
    }

    /// Internal node ids in in-order (left subtree, node, right subtree).
    pub fn internal_in_order(&self) -> Vec<usize> {
        fn walk<T>(t: &LabelTree<T>, id: usize, out: &mut Vec<usize>) {
            if let NodeKind::Internal { left, right, .. } = t.nodes[id].kind {
                walk(t, left, out);
                out.push(id);
                walk(t, right, out);
            }
        }
        let mut out = Vec::new();
        walk(self, self.root, &mut out);
        out
    }

    pub fn classifier(&self, id: usize) -> Option<&NodeClassifier<T>> {
        match &self.nodes[id].kind {
            NodeKind::Internal { classifier, .. } => classifier.as_ref(),
            NodeKind::Leaf { .. } => None,
        }
    }

    pub fn set_classifier(&mut self, id: usize, model: NodeClassifier<T>) -> Result<()> {
        match &mut self.nodes[id].kind {
            NodeKind::Internal { classifier, .. } => {
                *classifier = Some(model);
                Ok(())
            }
            NodeKind::Leaf { .. } => Err(Error::InvalidConfig(format!("node {id} is a leaf"))),
        }
    }

    pub fn is_fitted(&self) -> bool {
        self.internal_in_order().into_iter().all(|id| self.classifier(id).is_some())
    }

    /// A new tree whose root splits `left`'s classes from `right`'s.
    /// Nodes of `left` keep their relative order after the new root, followed
    /// by those of `right`. The root has no classifier yet.
    pub fn join(left: Self, right: Self) -> Result<Self> {
        if let Some(&c) = left.classes().iter().find(|c| right.classes().contains(c)) {
            return Err(Error::ClassCollision(c));
        }
        let off_l = 1;
        let off_r = 1 + left.nodes.len();
        let shift = |node: TreeNode<T>, off: usize| TreeNode {
            classes: node.classes,
            kind: match node.kind {
                NodeKind::Internal { left, right, classifier } => {
                    NodeKind::Internal { left: left + off, right: right + off, classifier }
                }
                leaf => leaf,
            },
        };
        let mut classes = left.classes().to_vec();
        classes.extend_from_slice(right.classes());
        classes.sort_unstable();
        let root = TreeNode {
            classes,
            kind: NodeKind::Internal { left: left.root + off_l, right: right.root + off_r, classifier: None },
        };
        let mut nodes = vec![root];
        nodes.extend(left.nodes.into_iter().map(|n| shift(n, off_l)));
        nodes.extend(right.nodes.into_iter().map(|n| shift(n, off_r)));
        Self::from_nodes(nodes, 0)
    }

    /// Node id offsets applied by [`LabelTree::join`]: `(left, right)`.
    pub fn join_offsets(left: &Self) -> (usize, usize) {
        (1, 1 + left.nodes.len())
    }

    /// Splits each internal node's training rows into its binary subproblem.
    pub fn assign_node_data(&self, dataset: &Dataset<T>) -> Result<Vec<NodeData>> {
        if let Some(&c) = dataset.labels().iter().find(|c| !self.paths.contains_key(c)) {
            return Err(Error::UnknownClass(c));
        }
        Ok(self
            .internal_in_order()
            .into_iter()
            .map(|node| {
                let left = self.left_classes(node);
                let all = &self.nodes[node].classes;
                let mut indices = Vec::new();
                let mut y = Vec::new();
                for (i, &c) in dataset.labels().iter().enumerate() {
                    if all.binary_search(&c).is_ok() {
                        indices.push(i);
                        y.push(left.binary_search(&c).is_ok());
                    }
                }
                NodeData { node, indices, y }
            })
            .collect())
    }

    /// Per-class log-probabilities aligned with [`LabelTree::classes`], given
    /// each internal node's probability of going left (indexed by node id;
    /// entries for leaves are ignored).
    pub fn class_log_probs(&self, node_probs: &[T]) -> Vec<T> {
        self.classes()
            .iter()
            .map(|c| {
                self.paths[c]
                    .iter()
                    .map(|&(v, left)| {
                        let p = node_probs[v];
                        if left {
                            p.ln()
                        } else {
                            (-p).ln_1p()
                        }
                    })
                    .sum()
            })
            .collect()
    }

    /// Left-probabilities of every fitted internal node for each row of `x`;
    /// `out[node][row]`, empty for leaves.
    pub fn node_probs(&self, x: &Matrix<T>) -> Result<Vec<Vec<T>>> {
        (0..self.nodes.len())
            .into_par_iter()
            .map(|id| match &self.nodes[id].kind {
                NodeKind::Leaf { .. } => Ok(Vec::new()),
                NodeKind::Internal { classifier: Some(c), .. } => c.predict_probs(x),
                NodeKind::Internal { classifier: None, .. } => {
                    Err(Error::NotFitted(format!("internal node {id} has no classifier")))
                }
            })
            .collect()
    }

    /// Class-probability rows aligned with [`LabelTree::classes`].
    pub fn predict(&self, x: &Matrix<T>) -> Result<Vec<Vec<T>>> {
        let probs = self.node_probs(x)?;
        let mut per_node = vec![T::zero(); self.nodes.len()];
        Ok((0..x.rows())
            .map(|i| {
                for (id, p) in probs.iter().enumerate() {
                    if let Some(&v) = p.get(i) {
                        per_node[id] = v;
                    }
                }
                self.class_log_probs(&per_node).into_iter().map(|l| l.exp()).collect()
            })
            .collect())
    }

    /// Most probable class per row (ties go to the smaller class id).
    pub fn predict_labels(&self, x: &Matrix<T>) -> Result<Vec<usize>> {
        let classes = self.classes();
        Ok(self.predict(x)?.iter().map(|p| classes[argmax(p)]).collect())
    }
}

pub(crate) fn argmax<T: Real>(p: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

fn balanced_split(classes: &[usize], rng: &mut RngStream) -> (Vec<usize>, Vec<usize>) {
    let mut shuffled = classes.to_vec();
    shuffled.shuffle(rng);
    let half = shuffled.len() / 2;
    let mut a = shuffled[..half].to_vec();
    let mut b = shuffled[half..].to_vec();
    a.sort_unstable();
    b.sort_unstable();
    (a, b)
}

fn kmeans_split<T: Real>(
    classes: &[usize],
    prototypes: &ClassPrototypes<T>,
    rng: &mut RngStream,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let rows: Vec<Vec<T>> = classes
        .iter()
        .map(|&c| prototypes.get(c).map(<[T]>::to_vec).ok_or(Error::UnknownClass(c)))
        .collect::<Result<_>>()?;
    let km = kmeans(&Matrix::from_rows(&rows)?, 2, rng);
    let (a, b): (Vec<usize>, Vec<usize>) = (0..classes.len()).partition(|&i| km.assignment[i] == 0);
    if a.is_empty() || b.is_empty() {
        return Ok(balanced_split(classes, rng));
    }
    Ok((a.into_iter().map(|i| classes[i]).collect(), b.into_iter().map(|i| classes[i]).collect()))
}

/// Builds the tree structure (no classifiers) over `class_order`.
///
/// `class_order` fixes the class set for every method and the leaf order of
/// the stick-break chain.
pub fn build_tree<T: Real>(
    prototypes: &ClassPrototypes<T>,
    method: TreeBuildMethod,
    class_order: &[usize],
    rng: &RngStream,
) -> Result<LabelTree<T>> {
    let mut sorted = class_order.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidConfig("class order lists a class twice".into()));
    }
    if sorted.len() < 2 {
        return Err(Error::InvalidConfig("a label tree needs at least two classes".into()));
    }
    if method != TreeBuildMethod::StickBreakChain {
        if let Some(&c) = sorted.iter().find(|&&c| prototypes.get(c).is_none()) {
            return Err(Error::UnknownClass(c));
        }
    }
    let build_rng = rng.derive_named("tree-build");
    let mut nodes: Vec<TreeNode<T>> = Vec::new();
    // (node id, classes in split order) awaiting expansion
    let mut pending = vec![(0usize, class_order.to_vec())];
    nodes.push(TreeNode { classes: sorted, kind: NodeKind::Leaf { class: 0 } });
    while let Some((id, order)) = pending.pop() {
        if order.len() == 1 {
            nodes[id].kind = NodeKind::Leaf { class: order[0] };
            continue;
        }
        let mut node_rng = build_rng.derive(id as u64);
        let (left, right) = match method {
            TreeBuildMethod::StickBreakChain => (vec![order[0]], order[1..].to_vec()),
            TreeBuildMethod::RandomBalanced | TreeBuildMethod::KMeansBisect => {
                let mut cs = order.clone();
                cs.sort_unstable();
                let (a, b) = if method == TreeBuildMethod::KMeansBisect {
                    kmeans_split(&cs, prototypes, &mut node_rng)?
                } else {
                    balanced_split(&cs, &mut node_rng)
                };
                if a.contains(&cs[0]) {
                    (a, b)
                } else {
                    (b, a)
                }
            }
        };
        let mk = |cs: &[usize]| {
            let mut s = cs.to_vec();
            s.sort_unstable();
            TreeNode { classes: s, kind: NodeKind::Leaf { class: cs[0] } }
        };
        let l = nodes.len();
        nodes.push(mk(&left));
        let r = nodes.len();
        nodes.push(mk(&right));
        nodes[id].kind = NodeKind::Internal { left: l, right: r, classifier: None };
        pending.push((r, right));
        pending.push((l, left));
    }
    LabelTree::from_nodes(nodes, 0)
}

/// Fits a Gibbs classifier at every internal node; node `v` uses `rng.derive(v)`.
pub fn fit_tree_gibbs<T: Real>(
    tree: &mut LabelTree<T>,
    dataset: &Dataset<T>,
    spec: &KernelSpec,
    cfg: &GibbsConfig,
    rng: &RngStream,
) -> Result<()> {
    let data = tree.assign_node_data(dataset)?;
    let fitted: Vec<(usize, NodeGibbsModel<T>)> = data
        .par_iter()
        .map(|nd| {
            let x = dataset.features().select_rows(&nd.indices);
            NodeGibbsModel::fit(&x, &nd.y, spec, cfg, &rng.derive(nd.node as u64)).map(|m| (nd.node, m))
        })
        .collect::<Result<_>>()?;
    for (id, m) in fitted {
        tree.set_classifier(id, NodeClassifier::Gibbs(m))?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub predict_mode: PredictMode,
    pub quadrature_order: usize,
}

impl Default for ViConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 128,
            lr: 0.05,
            predict_mode: PredictMode::Quadrature,
            quadrature_order: DEFAULT_QUADRATURE_ORDER,
        }
    }
}

impl ViConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr <= 1.0) {
            return Err(Error::InvalidConfig(format!("learning rate must lie in (0, 1], got {}", self.lr)));
        }
        crate::quadrature::gauss_hermite::<f64>(self.quadrature_order).map(|_| ())
    }
}

/// Sum over nodes of the full-data bound divided by the node's relevant
/// sample count, recorded after every epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ViTrace {
    pub epoch_elbo: Vec<f64>,
}

struct ViNodeState<T> {
    node: usize,
    model: NodeVIModel<T>,
    /// Dataset row -> label for rows relevant to this node.
    relevant: Vec<Option<bool>>,
    n_relevant: usize,
    full_x: Matrix<T>,
    full_y: Vec<bool>,
}

impl<T: Real> ViNodeState<T> {
    fn weighted_elbo(&self) -> Result<f64> {
        let b = self.model.batch(&self.full_x, &self.full_y)?;
        let aug = self.model.update_c(&b);
        Ok(self.model.elbo(&b, &aug, self.n_relevant).as_f64() / self.n_relevant as f64)
    }
}

/// Minibatch VI over every internal node. Each epoch visits a fresh
/// permutation of the rows; for each batch and node (in-order), the node's
/// relevant subset gets a closed-form `c` update and one natural-gradient
/// step. Nodes with no rows in a batch are skipped.
pub fn fit_tree_vi<T: Real>(
    tree: &mut LabelTree<T>,
    dataset: &Dataset<T>,
    inducing: &InducingStore<T>,
    spec: &KernelSpec,
    cfg: &ViConfig,
    rng: &RngStream,
) -> Result<ViTrace> {
    cfg.validate()?;
    let data = tree.assign_node_data(dataset)?;
    let mut states: Vec<ViNodeState<T>> = data
        .into_iter()
        .map(|nd| {
            let rows = inducing.rows_for_classes(&tree.node(nd.node).classes);
            let model = NodeVIModel::new(inducing, &rows, spec, cfg.predict_mode, cfg.quadrature_order)?;
            let mut relevant = vec![None; dataset.n()];
            for (&i, &y) in nd.indices.iter().zip(&nd.y) {
                relevant[i] = Some(y);
            }
            Ok(ViNodeState {
                node: nd.node,
                model,
                relevant,
                n_relevant: nd.indices.len(),
                full_x: dataset.features().select_rows(&nd.indices),
                full_y: nd.y,
            })
        })
        .collect::<Result<_>>()?;
    let lr = T::lit(cfg.lr);
    let epoch_rng = rng.derive_named("vi-epochs");
    let mut trace = ViTrace::default();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.n()).collect();
        order.shuffle(&mut epoch_rng.derive(epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            states.par_iter_mut().try_for_each(|st| -> Result<()> {
                let (idx, y): (Vec<usize>, Vec<bool>) =
                    chunk.iter().filter_map(|&i| st.relevant[i].map(|y| (i, y))).unzip();
                if idx.is_empty() {
                    return Ok(());
                }
                let batch = st.model.batch(&dataset.features().select_rows(&idx), &y)?;
                let aug = st.model.update_c(&batch);
                st.model.natural_gradient_step(&batch, &aug, lr, st.n_relevant)
            })?;
        }
        let elbos: Vec<f64> = states.par_iter().map(ViNodeState::weighted_elbo).collect::<Result<_>>()?;
        trace.epoch_elbo.push(elbos.iter().sum());
    }
    for st in states {
        tree.set_classifier(st.node, NodeClassifier::Vi(st.model))?;
    }
    Ok(trace)
}
