use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NovelSession {
    pub classes: Vec<usize>,
    pub shots: usize,
}

/// Base classes followed by disjoint few-shot sessions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionPlan {
    pub base_classes: Vec<usize>,
    pub novel_sessions: Vec<NovelSession>,
    pub seed: u64,
}

impl SessionPlan {
    /// Base session plus novel sessions.
    pub fn total_sessions(&self) -> usize {
        1 + self.novel_sessions.len()
    }

    /// Classes first introduced in session `s` (0 = base).
    pub fn session_classes(&self, s: usize) -> &[usize] {
        if s == 0 {
            &self.base_classes
        } else {
            &self.novel_sessions[s - 1].classes
        }
    }
}

/// Training and test rows for every session of a plan.
#[derive(Clone, Debug)]
pub struct SessionData<T> {
    pub base_train: Dataset<T>,
    /// Exactly `shots` rows per class for each novel session.
    pub novel_train: Vec<Dataset<T>>,
    /// Test rows of the classes introduced in each session (base first).
    pub tests: Vec<Dataset<T>>,
}

/// Splits the sorted class list into the first `n_base` classes and
/// `n_sessions` consecutive groups of `way`. Shots for class `c` are the
/// first `shot` rows of a shuffle drawn from `RngStream::new(seed, 0).derive(c)`.
pub fn make_session_plan<T: Real>(
    train: &Dataset<T>,
    test: &Dataset<T>,
    n_base: usize,
    way: usize,
    shot: usize,
    n_sessions: usize,
    seed: u64,
) -> Result<(SessionPlan, SessionData<T>)> {
    if shot == 0 || way == 0 {
        return Err(Error::InvalidConfig("way and shot must be at least 1".into()));
    }
    if n_base < 2 {
        return Err(Error::InvalidConfig("the base session needs at least two classes".into()));
    }
    let classes = train.classes_present();
    let needed = n_base + way * n_sessions;
    if needed > classes.len() {
        return Err(Error::InsufficientClasses { needed, available: classes.len() });
    }
    let base_classes = classes[..n_base].to_vec();
    let root = RngStream::new(seed, 0);
    let mut novel_sessions = Vec::with_capacity(n_sessions);
    let mut novel_train = Vec::with_capacity(n_sessions);
    for s in 0..n_sessions {
        let cs = classes[n_base + s * way..n_base + (s + 1) * way].to_vec();
        let mut idx = Vec::with_capacity(way * shot);
        for &c in &cs {
            let mut rows = train.class_indices(c);
            if rows.len() < shot {
                return Err(Error::InsufficientShots { class: c, available: rows.len(), needed: shot });
            }
            rows.shuffle(&mut root.derive(c as u64));
            let mut picked = rows[..shot].to_vec();
            picked.sort_unstable();
            idx.extend(picked);
        }
        novel_train.push(train.subset(&idx));
        novel_sessions.push(NovelSession { classes: cs, shots: shot });
    }
    let plan = SessionPlan { base_classes, novel_sessions, seed };
    let tests = (0..plan.total_sessions()).map(|s| test.filter_classes(plan.session_classes(s))).collect();
    let data = SessionData { base_train: train.filter_classes(&plan.base_classes), novel_train, tests };
    Ok((plan, data))
}
