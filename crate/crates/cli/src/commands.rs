//! Command implementations. Every command reads a resolved [`RunConfig`] and
//! writes its outputs through [`RunOutput`].

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use gptree::data_io::{load_artifact, load_dataset, save_artifact, write_csv, write_features_bin, write_labels, ModelArtifact};
use gptree::node_vi::InducingStore;
use gptree::tree::{NodeClassifier, NodeKind};
use gptree::{
    average_forgetting, build_tree, class_prototypes, evaluate_sessions, finalize_base, fit_tree_gibbs, fit_tree_vi,
    init_inducing, ClassPredictor, Dataset, GibbsConfig, IncrementalConfig, IncrementalLearner, LabelTree, RngStream,
    TreeBuildMethod,
};
use log::info;
use rayon::prelude::*;
use serde_json::json;

use crate::config::{Command, FeatureFormat, Inference, RunConfig};
use crate::output::{fmt, RunOutput, Table};
use crate::synthetic;
use crate::CliError;

pub fn execute(cfg: &RunConfig) -> Result<(), CliError> {
    match cfg.command() {
        Command::TrainBase => train_base(cfg),
        Command::ClassSweep => class_sweep(cfg),
        Command::Incremental => incremental(cfg),
        Command::ChainSweep => chain_sweep(cfg),
        Command::Eval => eval(cfg),
        Command::InspectArtifact => inspect_artifact(cfg),
        Command::GenSynthetic => gen_synthetic(cfg),
    }
}

fn out_dir(cfg: &RunConfig) -> &Path {
    cfg.output.as_deref().expect("resolved configs carry an output directory")
}

fn root(cfg: &RunConfig) -> RngStream {
    RngStream::new(cfg.seed(), 0)
}

fn load_train(cfg: &RunConfig) -> Result<Dataset<f64>, CliError> {
    let d = &cfg.data;
    let path = d.train_features.as_deref().expect("validated");
    Ok(load_dataset(path, d.train_labels.as_deref())?)
}

fn load_test(cfg: &RunConfig) -> Result<Option<Dataset<f64>>, CliError> {
    let d = &cfg.data;
    match &d.test_features {
        Some(p) => Ok(Some(load_dataset(p, d.test_labels.as_deref())?)),
        None => Ok(None),
    }
}

/// Training rows and test rows; without test files a stratified share of
/// the training rows is held out.
fn train_test(cfg: &RunConfig) -> Result<(Dataset<f64>, Dataset<f64>), CliError> {
    let train = load_train(cfg)?;
    match load_test(cfg)? {
        Some(test) => Ok((train, test)),
        None => Ok(train.split_stratified(cfg.data.test_fraction, &mut root(cfg).derive_named("holdout"))?),
    }
}

/// Accuracy in percent; rows whose label the model cannot predict count as errors.
fn accuracy_pct(model: &dyn ClassPredictor<f64>, data: &Dataset<f64>) -> Result<f64, CliError> {
    if data.n() == 0 {
        return Ok(0.0);
    }
    let pred = model.predict_labels(data.features())?;
    let hits = pred.iter().zip(data.labels()).filter(|(a, b)| a == b).count();
    Ok(100.0 * hits as f64 / data.n() as f64)
}

pub struct FittedTree {
    pub tree: LabelTree<f64>,
    pub inducing: InducingStore<f64>,
    /// Weighted bound after each epoch (VI only).
    pub elbo: Vec<f64>,
}

/// Builds and fits a tree over `classes` of `train`.
pub fn fit_tree(
    train: &Dataset<f64>,
    classes: &[usize],
    method: TreeBuildMethod,
    cfg: &RunConfig,
    gibbs: &GibbsConfig,
    stream: &RngStream,
) -> Result<FittedTree, CliError> {
    let protos = class_prototypes(train)?;
    let mut tree = build_tree(&protos, method, classes, stream)?;
    let inducing = init_inducing(train, cfg.inducing_per_class, stream)?;
    let elbo = match cfg.inference() {
        Inference::Gibbs => {
            fit_tree_gibbs(&mut tree, train, &cfg.kernel, gibbs, stream)?;
            Vec::new()
        }
        Inference::Vi => fit_tree_vi(&mut tree, train, &inducing, &cfg.kernel, &cfg.vi, stream)?.epoch_elbo,
    };
    Ok(FittedTree { tree, inducing, elbo })
}

/// One sweep cell: restrict to the first `n_classes` classes, fit, and
/// return test accuracy in percent. The RNG stream depends only on the class
/// count and the seed index, so sweeps that share a cell agree exactly.
pub fn trial(
    train: &Dataset<f64>,
    test: &Dataset<f64>,
    n_classes: usize,
    method: TreeBuildMethod,
    cfg: &RunConfig,
    gibbs: &GibbsConfig,
    seed_index: usize,
) -> Result<f64, CliError> {
    let available = train.classes_present();
    if available.len() < n_classes {
        return Err(gptree::Error::InsufficientClasses { needed: n_classes, available: available.len() }.into());
    }
    let classes = &available[..n_classes];
    let tr = train.filter_classes(classes);
    let te = test.filter_classes(classes);
    let stream = root(cfg).derive_named("trial").derive(n_classes as u64).derive(seed_index as u64);
    let fitted = fit_tree(&tr, classes, method, cfg, gibbs, &stream)?;
    accuracy_pct(&fitted.tree, &te)
}

fn mean_sem(v: &[f64]) -> (f64, f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt(), var)
}

fn train_base(cfg: &RunConfig) -> Result<(), CliError> {
    let all = load_train(cfg)?;
    let test = load_test(cfg)?;
    let (train, val) = all.split_stratified(cfg.data.val_fraction, &mut root(cfg).derive_named("validation"))?;
    let classes = train.classes_present();
    info!("training base tree over {} classes on {} rows", classes.len(), train.n());
    let fitted = fit_tree(&train, &classes, cfg.tree_method, cfg, &cfg.gibbs, &root(cfg).derive_named("base"))?;
    let base = finalize_base(fitted.tree, fitted.inducing, cfg.kernel, cfg.novel_kernel)?;

    let mut metrics = Table::new(&["metric", "value"]);
    metrics.push(vec!["n_classes".into(), classes.len().to_string()]);
    metrics.push(vec!["n_train".into(), train.n().to_string()]);
    metrics.push(vec!["n_val".into(), val.n().to_string()]);
    metrics.push(vec!["train_accuracy".into(), fmt(accuracy_pct(&base, &train)?)]);
    metrics.push(vec!["val_accuracy".into(), fmt(accuracy_pct(&base, &val)?)]);
    if let Some(t) = &test {
        metrics.push(vec!["test_accuracy".into(), fmt(accuracy_pct(&base, t)?)]);
    }
    if let Some(&e) = fitted.elbo.last() {
        metrics.push(vec!["final_weighted_elbo".into(), fmt(e)]);
    }
    let mut out = RunOutput::new(out_dir(cfg), "train-base", metrics);
    if !fitted.elbo.is_empty() {
        let mut t = Table::new(&["epoch", "weighted_elbo"]);
        for (i, e) in fitted.elbo.iter().enumerate() {
            t.push(vec![(i + 1).to_string(), fmt(*e)]);
        }
        out.table("elbo", t);
    }
    let artifact = cfg.artifact.clone().unwrap_or_else(|| out_dir(cfg).join("model.gpt"));
    fs::create_dir_all(out_dir(cfg))?;
    save_artifact(&ModelArtifact::from_base(&base), &artifact)?;
    out.note(format!("artifact: {}", artifact.display()));
    out.write(cfg)
}

fn class_sweep(cfg: &RunConfig) -> Result<(), CliError> {
    let (train, test) = train_test(cfg)?;
    let mut trials = Table::new(&["method", "classes", "seed", "accuracy"]);
    let mut summary = Table::new(&["method", "classes", "n_seeds", "mean", "sem"]);
    for &c in &cfg.class_counts {
        for &m in &cfg.methods {
            let accs = (0..cfg.n_seeds)
                .into_par_iter()
                .map(|s| trial(&train, &test, c, m.tree_method(), cfg, &cfg.gibbs, s))
                .collect::<Result<Vec<_>, _>>()?;
            for (s, a) in accs.iter().enumerate() {
                trials.push(vec![m.name().into(), c.to_string(), s.to_string(), fmt(*a)]);
            }
            let (mean, sem, _) = mean_sem(&accs);
            info!("{} with {c} classes: {mean:.2} ± {sem:.2}", m.name());
            summary.push(vec![m.name().into(), c.to_string(), cfg.n_seeds.to_string(), fmt(mean), fmt(sem)]);
        }
    }
    let mut out = RunOutput::new(out_dir(cfg), "class-sweep", summary);
    out.table("trials", trials);
    out.write(cfg)
}

fn chain_sweep(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.inference() != Inference::Gibbs {
        return Err(CliError::Config("chain-sweep requires Gibbs inference".into()));
    }
    let (train, test) = train_test(cfg)?;
    let n_classes = cfg.class_counts.first().copied().unwrap_or_else(|| train.classes_present().len());
    let mut trials = Table::new(&["chains", "seed", "accuracy"]);
    let mut summary = Table::new(&["chains", "n_seeds", "mean", "sem", "variance"]);
    for &chains in &cfg.chain_counts {
        let gibbs = GibbsConfig { n_chains: chains, ..cfg.gibbs };
        let accs = (0..cfg.n_seeds)
            .into_par_iter()
            .map(|s| trial(&train, &test, n_classes, cfg.tree_method, cfg, &gibbs, s))
            .collect::<Result<Vec<_>, _>>()?;
        for (s, a) in accs.iter().enumerate() {
            trials.push(vec![chains.to_string(), s.to_string(), fmt(*a)]);
        }
        let (mean, sem, var) = mean_sem(&accs);
        summary.push(vec![chains.to_string(), cfg.n_seeds.to_string(), fmt(mean), fmt(sem), fmt(var)]);
    }
    let mut out = RunOutput::new(out_dir(cfg), "chain-sweep", summary);
    out.note(format!("{n_classes} classes"));
    out.table("trials", trials);
    out.write(cfg)
}

fn incremental(cfg: &RunConfig) -> Result<(), CliError> {
    let (train, test) = train_test(cfg)?;
    let s = &cfg.sessions;
    let (plan, data) = gptree::data_io::make_session_plan(&train, &test, s.n_base, s.way, s.shot, s.n_sessions, cfg.seed())?;
    let dir = out_dir(cfg);
    let art_dir = dir.join("artifacts");
    fs::create_dir_all(&art_dir)?;
    let plan_json = serde_json::to_string_pretty(&plan).map_err(|e| CliError::Config(e.to_string()))?;
    fs::write(dir.join("session_plan.json"), plan_json + "\n")?;

    info!("base session: {} classes, {} rows", plan.base_classes.len(), data.base_train.n());
    let fitted = fit_tree(&data.base_train, &plan.base_classes, cfg.tree_method, cfg, &cfg.gibbs, &root(cfg).derive_named("base"))?;
    let base = finalize_base(fitted.tree, fitted.inducing, cfg.kernel, cfg.novel_kernel)?;
    save_artifact(&ModelArtifact::from_base(&base), &art_dir.join("session_00.gpt"))?;

    let inc = IncrementalConfig { mode: s.mode, gibbs: cfg.gibbs, tree_method: cfg.tree_method };
    let mut learner = IncrementalLearner::new(base.clone(), inc, root(cfg).derive_named("sessions"))?;
    let mut models: Vec<Box<dyn ClassPredictor<f64>>> = vec![Box::new(base.clone())];
    for (k, session) in data.novel_train.iter().enumerate() {
        info!("session {}: classes {:?}", k + 1, plan.session_classes(k + 1));
        let model = learner.add_novel_session(session, plan.session_classes(k + 1))?.clone();
        let artifact = ModelArtifact::from_expanded(&base, &model, learner.store());
        save_artifact(&artifact, &art_dir.join(format!("session_{:02}.gpt", k + 1)))?;
        models.push(Box::new(model));
    }
    let refs: Vec<&dyn ClassPredictor<f64>> = models.iter().map(|m| m.as_ref()).collect();
    let report = evaluate_sessions(&refs, &data.tests)?;

    let n = report.n_sessions();
    let mut metrics = Table::new(&["session", "n_classes", "joint_accuracy", "avg_forgetting"]);
    let mut forgetting = Table::new(&["session", "avg_forgetting"]);
    let mut seen = 0;
    for k in 0..n {
        seen += plan.session_classes(k).len();
        let g = if k == 0 { String::new() } else { fmt(100.0 * average_forgetting(&report, k)?) };
        if k > 0 {
            forgetting.push(vec![k.to_string(), g.clone()]);
        }
        metrics.push(vec![k.to_string(), seen.to_string(), fmt(100.0 * report.joint[k]), g]);
    }
    let mut acc = Table::new(&["task", "session", "accuracy"]);
    for j in 0..n {
        for k in j..n {
            if let Some(a) = report.alpha(j, k) {
                acc.push(vec![j.to_string(), k.to_string(), fmt(100.0 * a)]);
            }
        }
    }
    let mut header = vec!["mode".to_string()];
    header.extend((0..n).map(|k| format!("session_{k}")));
    let mut wide = Table { header, rows: Vec::new() };
    let mode = serde_json::to_value(s.mode).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
    let mut row = vec![mode];
    row.extend(report.joint.iter().map(|a| fmt(100.0 * a)));
    wide.push(row);

    let mut out = RunOutput::new(dir, "incremental", metrics);
    out.table("sessions", wide);
    out.table("accuracy", acc);
    out.table("forgetting", forgetting);
    out.write(cfg)
}

fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    let artifact: ModelArtifact<f64> = load_artifact(cfg.artifact.as_deref().expect("validated"))?;
    let test = load_test(cfg)?.expect("validated");
    let probs = artifact.tree.predict(test.features())?;
    let classes = artifact.tree.classes();
    let mut preds = Table::new(&["row", "label", "predicted", "probability"]);
    let mut hits = 0;
    for (i, p) in probs.iter().enumerate() {
        let best = (0..p.len()).fold(0, |b, j| if p[j] > p[b] { j } else { b });
        let label = test.labels()[i];
        hits += usize::from(classes[best] == label);
        preds.push(vec![i.to_string(), label.to_string(), classes[best].to_string(), fmt(p[best])]);
    }
    let mut metrics = Table::new(&["metric", "value"]);
    metrics.push(vec!["n_test".into(), test.n().to_string()]);
    metrics.push(vec!["n_classes".into(), classes.len().to_string()]);
    metrics.push(vec!["accuracy".into(), fmt(100.0 * hits as f64 / test.n().max(1) as f64)]);
    let mut out = RunOutput::new(out_dir(cfg), "eval", metrics);
    out.table("predictions", preds);
    out.write(cfg)
}

/// Structural summary of an artifact as JSON.
pub fn describe_artifact(path: &Path) -> Result<serde_json::Value, CliError> {
    let a: ModelArtifact<f64> = load_artifact(path)?;
    let nodes: Vec<serde_json::Value> = a
        .tree
        .nodes()
        .iter()
        .enumerate()
        .map(|(id, n)| match &n.kind {
            NodeKind::Leaf { class } => json!({ "id": id, "leaf": class }),
            NodeKind::Internal { left, right, classifier } => {
                let c = match classifier {
                    Some(NodeClassifier::Gibbs(m)) => {
                        json!({ "kind": "gibbs", "n_train": m.n_train(), "chains": m.chains().len() })
                    }
                    Some(NodeClassifier::Vi(m)) => json!({ "kind": "vi", "inducing": m.m() }),
                    None => serde_json::Value::Null,
                };
                json!({ "id": id, "classes": n.classes, "left": left, "right": right, "classifier": c })
            }
        })
        .collect();
    Ok(json!({
        "format_version": gptree::data_io::ARTIFACT_FORMAT_VERSION,
        "classes": a.tree.classes(),
        "depth": a.tree.depth(),
        "base_kernel": a.base_spec,
        "novel_kernel": a.novel_spec,
        "inducing_points": a.inducing.as_ref().map(InducingStore::len),
        "novel_rows": a.novel.as_ref().map(|s| s.len()),
        "expansion": a.expansion,
        "nodes": nodes,
    }))
}

fn inspect_artifact(cfg: &RunConfig) -> Result<(), CliError> {
    let path = cfg.artifact.as_deref().expect("validated");
    let summary = describe_artifact(path)?;
    let text = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Config(e.to_string()))?;
    let mut stdout = std::io::stdout().lock();
    match writeln!(stdout, "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => return Err(e.into()),
        _ => {}
    }
    if let Some(dir) = &cfg.output {
        let mut metrics = Table::new(&["metric", "value"]);
        metrics.push(vec!["n_classes".into(), summary["classes"].as_array().map_or(0, Vec::len).to_string()]);
        metrics.push(vec!["n_nodes".into(), summary["nodes"].as_array().map_or(0, Vec::len).to_string()]);
        metrics.push(vec!["depth".into(), summary["depth"].to_string()]);
        let mut out = RunOutput::new(dir, "inspect-artifact", metrics);
        out.note(format!("artifact: {}", path.display()));
        fs::create_dir_all(dir)?;
        fs::write(dir.join("artifact.json"), text + "\n")?;
        out.write(cfg)?;
    }
    Ok(())
}

fn write_split(dir: &Path, name: &str, data: &Dataset<f64>, format: FeatureFormat) -> Result<PathBuf, CliError> {
    Ok(match format {
        FeatureFormat::Csv => {
            let p = dir.join(format!("{name}.csv"));
            write_csv(&p, data)?;
            p
        }
        FeatureFormat::Bin => {
            let p = dir.join(format!("{name}.bin"));
            write_features_bin(&p, data.features(), data.n_classes())?;
            write_labels(&dir.join(format!("{name}.labels")), data.labels())?;
            p
        }
    })
}

fn gen_synthetic(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = out_dir(cfg);
    fs::create_dir_all(dir)?;
    let (train, test) = synthetic::generate(&cfg.synthetic, cfg.seed());
    let mut metrics = Table::new(&["split", "rows", "classes", "dim", "file"]);
    for (name, d) in [("train", &train), ("test", &test)] {
        let p = write_split(dir, name, d, cfg.synthetic.format)?;
        let file = p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
        metrics.push(vec![name.into(), d.n().to_string(), d.n_classes().to_string(), d.dim().to_string(), file]);
    }
    RunOutput::new(dir, "gen-synthetic", metrics).write(cfg)
}
