//! Tabular learners: Q-tables for options and the meta-controller, policy
//! reuse from demonstrations, a scripted meta-controller, and a
//! value-iteration solver used as a test oracle.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::demos::DemoSet;
use crate::error::{Error, Result};
use crate::hrl::{AbstractMdp, AbstractState};
use crate::rng::Rng;

pub const META_ALPHA: f64 = 0.2;
pub const META_EPSILON: f64 = 0.1;
pub const GAMMA: f64 = 0.99;
pub const LOW_ALPHA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
struct Row {
    q: Vec<f64>,
    seen: Vec<bool>,
}

/// Sparse action-value table keyed by canonical state strings. Unknown
/// entries read as 0.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    rows: HashMap<String, Row>,
    pub n_actions: usize,
    pub alpha: f64,
    pub epsilon: f64,
    pub gamma: f64,
}

/// Canonical key of a feature vector: components joined by commas.
pub fn state_key(features: &[f64]) -> String {
    let mut s = String::with_capacity(features.len() * 3);
    for (i, v) in features.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let v = if *v == 0.0 { 0.0 } else { *v };
        s.push_str(&v.to_string());
    }
    s
}

#[derive(Serialize, Deserialize)]
struct Entry {
    s: String,
    a: usize,
    q: f64,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    entries: Vec<Entry>,
    alpha: f64,
    epsilon: f64,
    gamma: f64,
}

impl QTable {
    pub fn new(n_actions: usize, alpha: f64, epsilon: f64, gamma: f64) -> Result<Self> {
        if n_actions == 0 {
            return Err(Error::config("a Q-table needs at least one action"));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::config(format!("alpha {alpha} outside (0, 1]")));
        }
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::config(format!("epsilon {epsilon} outside [0, 1]")));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::config(format!("gamma {gamma} outside [0, 1]")));
        }
        Ok(QTable {
            rows: HashMap::new(),
            n_actions,
            alpha,
            epsilon,
            gamma,
        })
    }

    pub fn get(&self, s: &str, a: usize) -> f64 {
        self.rows.get(s).map_or(0.0, |r| r.q[a])
    }

    /// Maximum over all actions; 0 for an unseen state.
    pub fn max_value(&self, s: &str) -> f64 {
        match self.rows.get(s) {
            Some(r) => r.q.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            None => 0.0,
        }
    }

    /// Number of stored (state, action) pairs.
    pub fn len(&self) -> usize {
        self.rows.values().map(|r| r.seen.iter().filter(|&&b| b).count()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn set(&mut self, s: &str, a: usize, q: f64) {
        let n = self.n_actions;
        let row = self.rows.entry(s.to_string()).or_insert_with(|| Row {
            q: vec![0.0; n],
            seen: vec![false; n],
        });
        row.q[a] = q;
        row.seen[a] = true;
    }

    /// `Q(s,a) += alpha (r + [not terminal] gamma^pow max Q(s',.) - Q(s,a))`.
    /// Returns the new value.
    pub fn q_update(
        &mut self,
        s: &str,
        a: usize,
        r: f64,
        s_next: &str,
        terminal: bool,
        discount_pow: u32,
    ) -> Result<f64> {
        if !r.is_finite() {
            return Err(Error::runtime(format!("non-finite reward {r} in Q update")));
        }
        if discount_pow == 0 {
            return Err(Error::runtime("discount exponent must be at least 1"));
        }
        if a >= self.n_actions {
            return Err(Error::runtime(format!("action {a} out of range")));
        }
        let bootstrap = if terminal {
            0.0
        } else {
            self.gamma.powi(discount_pow as i32) * self.max_value(s_next)
        };
        let old = self.get(s, a);
        let new = old + self.alpha * (r + bootstrap - old);
        if !new.is_finite() {
            return Err(Error::runtime("Q value became non-finite"));
        }
        self.set(s, a, new);
        Ok(new)
    }

    /// Maximizers of `Q(s,.)` within `allowed`.
    pub fn greedy_set(&self, s: &str, allowed: &[usize]) -> Vec<usize> {
        let best = allowed
            .iter()
            .map(|&a| self.get(s, a))
            .fold(f64::NEG_INFINITY, f64::max);
        allowed
            .iter()
            .copied()
            .filter(|&a| self.get(s, a) == best)
            .collect()
    }

    /// Epsilon-greedy choice restricted to `allowed`, ties broken uniformly.
    pub fn select_action(&self, s: &str, allowed: &[usize], rng: &mut Rng) -> Result<usize> {
        self.select_with_epsilon(s, allowed, self.epsilon, rng)
    }

    pub fn select_with_epsilon(
        &self,
        s: &str,
        allowed: &[usize],
        epsilon: f64,
        rng: &mut Rng,
    ) -> Result<usize> {
        if allowed.is_empty() {
            return Err(Error::runtime("select_action called with no allowed actions"));
        }
        if rng.random::<f64>() < epsilon {
            return Ok(allowed[rng.random_range(0..allowed.len())]);
        }
        let best = self.greedy_set(s, allowed);
        Ok(best[rng.random_range(0..best.len())])
    }

    /// All stored entries sorted by state key then action.
    pub fn entries(&self) -> Vec<(String, usize, f64)> {
        let mut out: Vec<(String, usize, f64)> = self
            .rows
            .iter()
            .flat_map(|(s, r)| {
                (0..self.n_actions)
                    .filter(|&a| r.seen[a])
                    .map(move |a| (s.clone(), a, r.q[a]))
            })
            .collect();
        out.sort_by(|x, y| x.0.cmp(&y.0).then(x.1.cmp(&y.1)));
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.rows
            .values()
            .flat_map(|r| r.q.iter())
            .fold(0.0, |m, q| m.max(q.abs()))
    }

    pub fn to_json(&self) -> String {
        let cp = Checkpoint {
            entries: self
                .entries()
                .into_iter()
                .map(|(s, a, q)| Entry { s, a, q })
                .collect(),
            alpha: self.alpha,
            epsilon: self.epsilon,
            gamma: self.gamma,
        };
        serde_json::to_string_pretty(&cp).expect("serializable") + "\n"
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, n_actions: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cp: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        let mut t = QTable::new(n_actions, cp.alpha, cp.epsilon, cp.gamma)?;
        for e in cp.entries {
            if e.a >= n_actions || !e.q.is_finite() {
                return Err(Error::data(format!(
                    "{}: invalid entry for state {:?}",
                    path.display(),
                    e.s
                )));
            }
            t.set(&e.s, e.a, e.q);
        }
        Ok(t)
    }
}

/// Linear interpolation from `start` to `end` over `horizon` steps, then flat.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearSchedule {
    pub start: f64,
    pub end: f64,
    pub horizon: u64,
}

impl LinearSchedule {
    pub fn value(&self, n: u64) -> f64 {
        if self.horizon == 0 || n >= self.horizon {
            return self.end;
        }
        self.start + (self.end - self.start) * (n as f64 / self.horizon as f64)
    }
}

/// Probabilistic reuse of the option observed in demonstrations.
#[derive(Debug, Clone, PartialEq)]
pub struct ReusePolicy {
    pub demo_meta_actions: BTreeMap<AbstractState, usize>,
    pub schedule: LinearSchedule,
    pub decisions: u64,
}

impl ReusePolicy {
    pub fn new(demo_meta_actions: BTreeMap<AbstractState, usize>, schedule: LinearSchedule) -> Self {
        ReusePolicy {
            demo_meta_actions,
            schedule,
            decisions: 0,
        }
    }

    pub fn reuse_prob(&self) -> f64 {
        self.schedule.value(self.decisions).clamp(0.0, 1.0)
    }
}

/// With the current reuse probability copy the demonstrated option (when
/// present and allowed), otherwise defer to `table`. Advances the schedule.
pub fn reuse_select(
    reuse: &mut ReusePolicy,
    table: &QTable,
    s_mu: &AbstractState,
    allowed: &[usize],
    rng: &mut Rng,
) -> Result<usize> {
    let p = reuse.reuse_prob();
    reuse.decisions += 1;
    if rng.random::<f64>() < p {
        if let Some(&o) = reuse.demo_meta_actions.get(s_mu) {
            if allowed.contains(&o) {
                return Ok(o);
            }
        }
    }
    table.select_action(&s_mu.key(), allowed, rng)
}

/// Scripted meta-controller: skip plan entries whose subgoal is currently
/// achieved, then return the next one. Past the end the last entry repeats.
/// Returns the option and the updated progress index.
pub fn fixed_meta(
    sequence: &[usize],
    mdp: &AbstractMdp,
    s_mu: &AbstractState,
    progress: usize,
) -> Result<(usize, usize)> {
    if sequence.is_empty() {
        return Err(Error::config("fixed meta-controller needs a nonempty plan"));
    }
    if let Some(&bad) = sequence.iter().find(|&&o| o >= mdp.n_options()) {
        return Err(Error::config(format!("infeasible fixed plan: unknown option {bad}")));
    }
    let mut p = progress;
    while p < sequence.len() && !mdp.initiation_allowed(mdp.option(sequence[p]), s_mu) {
        p += 1;
    }
    let o = sequence[p.min(sequence.len() - 1)];
    Ok((o, p))
}

/// Replay demonstrations through the abstract state map and record, for each
/// abstract state left, the option whose subgoal was achieved next.
/// Conflicts go to the majority, ties to the lowest option id.
pub fn extract_demo_meta_actions(
    demos: &DemoSet,
    mdp: &AbstractMdp,
) -> Result<BTreeMap<AbstractState, usize>> {
    let mut votes: BTreeMap<AbstractState, BTreeMap<usize, usize>> = BTreeMap::new();
    for traj in &demos.trajectories {
        let mut s = mdp.initial_state();
        for step in &traj.steps {
            let next = mdp.abstract_state(&step.features, &s)?;
            if next != s {
                for f in 0..mdp.n_factors() {
                    if next.0[f] != s.0[f] {
                        let o = mdp.achieved_option(&next, f).expect("entry just set");
                        *votes.entry(s.clone()).or_default().entry(o).or_insert(0) += 1;
                    }
                }
                s = next;
            }
        }
    }
    Ok(votes
        .into_iter()
        .map(|(s, v)| {
            let best = v
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(&o, _)| o)
                .expect("nonempty votes");
            (s, best)
        })
        .collect())
}

/// Follow the demonstrated option map from `start`, applying each option's
/// subgoal to the abstract state, until no entry exists or a state repeats.
pub fn plan_from_demo_actions(
    actions: &BTreeMap<AbstractState, usize>,
    mdp: &AbstractMdp,
    start: &AbstractState,
) -> Vec<usize> {
    let mut plan = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    let mut s = start.clone();
    while let Some(&o) = actions.get(&s) {
        if !seen.insert(s.clone()) {
            break;
        }
        plan.push(o);
        let opt = mdp.option(o);
        s.0[opt.factor_id] = Some(opt.index);
    }
    plan
}

pub const VI_TOLERANCE: f64 = 1e-10;
pub const VI_MAX_SWEEPS: usize = 1_000_000;
/// Two action values closer than this count as tied in the greedy set.
pub const ARGMAX_TOLERANCE: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct ValueIteration {
    pub values: Vec<f64>,
    /// Per state, every action whose value is within [`ARGMAX_TOLERANCE`] of the best.
    pub greedy: Vec<Vec<usize>>,
    /// Sup-norm change of each sweep.
    pub deltas: Vec<f64>,
}

/// Synchronous value iteration over `n_states x n_actions`.
/// `transitions(s, a)` yields `(s', p)` pairs; terminal states have value 0.
pub fn value_iteration(
    n_states: usize,
    n_actions: usize,
    transitions: impl Fn(usize, usize) -> Vec<(usize, f64)>,
    reward: impl Fn(usize, usize, usize) -> f64,
    terminal: impl Fn(usize) -> bool,
    gamma: f64,
    tol: f64,
) -> Result<ValueIteration> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::config(format!("gamma {gamma} outside [0, 1)")));
    }
    if n_actions == 0 {
        return Err(Error::config("value iteration needs at least one action"));
    }
    let model: Vec<Vec<Vec<(usize, f64, f64)>>> = (0..n_states)
        .map(|s| {
            (0..n_actions)
                .map(|a| {
                    transitions(s, a)
                        .into_iter()
                        .map(|(s2, p)| (s2, p, reward(s, a, s2)))
                        .collect()
                })
                .collect()
        })
        .collect();
    let q_of = |v: &[f64], s: usize, a: usize| -> f64 {
        model[s][a]
            .iter()
            .map(|&(s2, p, r)| p * (r + gamma * v[s2]))
            .sum()
    };
    let mut v = vec![0.0; n_states];
    let mut deltas = Vec::new();
    loop {
        let mut next = vec![0.0; n_states];
        let mut delta: f64 = 0.0;
        for s in 0..n_states {
            if !terminal(s) {
                next[s] = (0..n_actions)
                    .map(|a| q_of(&v, s, a))
                    .fold(f64::NEG_INFINITY, f64::max);
            }
            delta = delta.max((next[s] - v[s]).abs());
        }
        v = next;
        deltas.push(delta);
        if delta < tol {
            break;
        }
        if deltas.len() >= VI_MAX_SWEEPS {
            return Err(Error::runtime("value iteration did not converge"));
        }
    }
    let greedy = (0..n_states)
        .map(|s| {
            let qs: Vec<f64> = (0..n_actions).map(|a| q_of(&v, s, a)).collect();
            let best = qs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (0..n_actions)
                .filter(|&a| qs[a] >= best - ARGMAX_TOLERANCE)
                .collect()
        })
        .collect();
    Ok(ValueIteration {
        values: v,
        greedy,
        deltas,
    })
}
