//! Synthetic switching-dynamics data with known switch times, recovery
//! scoring, brute-force recomputation of training bookkeeping, and small
//! statistics helpers shared by tests.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::demos::{DemoSet, Step, Trajectory};
use crate::error::{Error, Result};
use crate::hrl::{intrinsic_reward, AbstractMdp};
use crate::learners::{state_key, QTable};
use crate::rng::derived;
use crate::train::{RunConfig, Trace};

/// Regime sequence of one trajectory: the regime in force from step 0 and
/// `(time, regime)` pairs. A switch at time `τ` means the transition
/// `x_τ -> x_{τ+1}` is the first one driven by the new regime.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub initial: usize,
    pub switches: Vec<(usize, usize)>,
}

impl Schedule {
    pub fn times(&self) -> Vec<usize> {
        self.switches.iter().map(|&(t, _)| t).collect()
    }

    fn regime_at(&self, t: usize) -> usize {
        self.switches
            .iter()
            .take_while(|&&(s, _)| s <= t)
            .last()
            .map_or(self.initial, |&(_, r)| r)
    }
}

/// `x_{t+1} = x_t + drift[z] + N(0, sigma^2 I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSlds {
    pub drifts: Vec<Vec<f64>>,
    pub sigma: f64,
    /// Used cyclically over trajectories.
    pub schedules: Vec<Schedule>,
    pub seed: u64,
}

impl SyntheticSlds {
    /// Three planar regimes with unit drifts (pairwise separation well above
    /// `5 sigma`) and two switches per trajectory at random times.
    pub fn three_regime(n_traj: usize, horizon: usize, sigma: f64, seed: u64) -> Self {
        let drifts = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]];
        let mut rng = derived(seed, &[0x5c]);
        let margin = horizon / 8;
        let schedules = (0..n_traj)
            .map(|_| {
                let initial = rng.random_range(0..3);
                let a = rng.random_range(margin..horizon / 2 - margin / 2);
                let b = rng.random_range(horizon / 2 + margin / 2..horizon - margin);
                let r1 = (initial + rng.random_range(1..3)) % 3;
                let r2 = (r1 + rng.random_range(1..3)) % 3;
                Schedule {
                    initial,
                    switches: vec![(a, r1), (b, r2)],
                }
            })
            .collect();
        SyntheticSlds {
            drifts,
            sigma,
            schedules,
            seed,
        }
    }

    pub fn regimes(&self) -> usize {
        self.drifts.len()
    }

    pub fn dim(&self) -> usize {
        self.drifts.first().map_or(0, Vec::len)
    }

    fn validate(&self, horizon: usize) -> Result<()> {
        let d = self.dim();
        if d == 0 || self.drifts.iter().any(|v| v.len() != d) {
            return Err(Error::config("drift vectors must be nonempty and equal length"));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::config("sigma must be finite and non-negative"));
        }
        if self.schedules.is_empty() {
            return Err(Error::config("at least one schedule is required"));
        }
        for s in &self.schedules {
            let mut prev = None;
            if s.initial >= self.regimes() {
                return Err(Error::config("schedule names an unknown regime"));
            }
            for &(t, r) in &s.switches {
                if r >= self.regimes() {
                    return Err(Error::config("schedule names an unknown regime"));
                }
                if t == 0 || prev.is_some_and(|p| t <= p) {
                    return Err(Error::config("switch times must be positive and strictly increasing"));
                }
                if t + 1 >= horizon {
                    return Err(Error::config("switch time beyond the trajectory length"));
                }
                prev = Some(t);
            }
        }
        Ok(())
    }
}

/// Simulate `n_traj` trajectories of `horizon` states each. Returns the demos
/// and, per trajectory, the true switch times.
pub fn generate_slds(spec: &SyntheticSlds, n_traj: usize, horizon: usize) -> Result<(DemoSet, Vec<Vec<usize>>)> {
    if n_traj == 0 || horizon < 2 {
        return Err(Error::config("need at least one trajectory of two steps"));
    }
    spec.validate(horizon)?;
    let d = spec.dim();
    let noise = Normal::new(0.0, spec.sigma).map_err(|e| Error::config(e.to_string()))?;
    let mut truth = Vec::with_capacity(n_traj);
    let mut trajectories = Vec::with_capacity(n_traj);
    for i in 0..n_traj {
        let schedule = &spec.schedules[i % spec.schedules.len()];
        let mut rng = derived(spec.seed, &[i as u64]);
        let mut x = vec![0.0; d];
        let mut steps = Vec::with_capacity(horizon);
        for t in 0..horizon {
            steps.push(Step {
                t,
                features: x.clone(),
                action: if t + 1 < horizon { 0 } else { -1 },
                reward: 0.0,
                done: false,
            });
            let z = schedule.regime_at(t);
            for (xj, bj) in x.iter_mut().zip(&spec.drifts[z]) {
                *xj += bj + noise.sample(&mut rng);
            }
        }
        trajectories.push(Trajectory {
            traj_id: format!("slds-{i:03}"),
            steps,
        });
        truth.push(schedule.times());
    }
    let names = (0..d).map(|j| format!("x{j}")).collect();
    Ok((DemoSet::new(trajectories, names, 1)?, truth))
}

/// Size of a greedy one-to-one matching of detected and true times within
/// `tol`, closest pairs first (ties broken by earlier true, then detected, time).
pub fn match_count(detected: &[usize], truth: &[usize], tol: usize) -> usize {
    let mut pairs: Vec<(usize, usize, usize)> = Vec::new();
    for (i, &g) in truth.iter().enumerate() {
        for (j, &d) in detected.iter().enumerate() {
            let gap = g.abs_diff(d);
            if gap <= tol {
                pairs.push((gap, i, j));
            }
        }
    }
    pairs.sort_unstable();
    let mut used_t = vec![false; truth.len()];
    let mut used_d = vec![false; detected.len()];
    let mut matched = 0;
    for (_, i, j) in pairs {
        if !used_t[i] && !used_d[j] {
            used_t[i] = true;
            used_d[j] = true;
            matched += 1;
        }
    }
    matched
}

/// `(recall, precision)`. An empty truth set gives recall 1; no detections
/// give precision 1.
pub fn score_recovery(detected: &[usize], truth: &[usize], tol: usize) -> (f64, f64) {
    let m = match_count(detected, truth, tol) as f64;
    let ratio = |n: usize| if n == 0 { 1.0 } else { m / n as f64 };
    (ratio(truth.len()), ratio(detected.len()))
}

/// Recall and precision pooled over several trajectories.
pub fn score_recovery_pooled(detected: &[Vec<usize>], truth: &[Vec<usize>], tol: usize) -> (f64, f64) {
    let (mut m, mut nt, mut nd) = (0, 0, 0);
    for (d, g) in detected.iter().zip(truth) {
        m += match_count(d, g, tol);
        nt += g.len();
        nd += d.len();
    }
    let ratio = |n: usize| if n == 0 { 1.0 } else { m as f64 / n as f64 };
    (ratio(nt), ratio(nd))
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Median (mean of the middle pair for even lengths).
pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Steps of each execution, in order, taken from the raw step log.
fn steps_by_execution(trace: &Trace) -> std::result::Result<Vec<Vec<usize>>, String> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, st) in trace.steps.iter().enumerate() {
        let x = st.execution.ok_or_else(|| format!("step {i} has no active option"))?;
        match x.cmp(&groups.len()) {
            std::cmp::Ordering::Less if x + 1 == groups.len() => groups[x].push(i),
            std::cmp::Ordering::Equal => groups.push(vec![i]),
            _ => return Err(format!("step {i} jumps to execution {x}")),
        }
    }
    Ok(groups)
}

/// Discounted environmental return of every execution, rebuilt from the
/// step log by backward accumulation.
pub fn recompute_meta_rewards(trace: &Trace, gamma: f64) -> std::result::Result<Vec<f64>, String> {
    Ok(steps_by_execution(trace)?
        .iter()
        .map(|idx| idx.iter().rev().fold(0.0, |acc, &i| trace.steps[i].env_reward + gamma * acc))
        .collect())
}

/// Check recorded executions and meta updates against the step log.
/// Returns one message per violation; empty means the books balance.
pub fn audit_meta_accounting(trace: &Trace, gamma: f64, tol: f64, learns_meta: bool) -> Vec<String> {
    let mut bad = Vec::new();
    let groups = match steps_by_execution(trace) {
        Ok(g) => g,
        Err(e) => return vec![e],
    };
    if groups.len() != trace.executions.len() {
        bad.push(format!("{} executions logged, {} seen in steps", trace.executions.len(), groups.len()));
        return bad;
    }
    let rewards = recompute_meta_rewards(trace, gamma).expect("grouping succeeded");
    for (i, ex) in trace.executions.iter().enumerate() {
        if ex.duration != groups[i].len() {
            bad.push(format!("execution {i}: duration {} but {} steps", ex.duration, groups[i].len()));
        }
        if groups[i].iter().any(|&k| trace.steps[k].option != Some(ex.option_id)) {
            bad.push(format!("execution {i}: steps attributed to another option"));
        }
        if (ex.meta_reward - rewards[i]).abs() > tol {
            bad.push(format!("execution {i}: meta_reward {} recomputed {}", ex.meta_reward, rewards[i]));
        }
    }
    if !learns_meta {
        if !trace.meta_updates.is_empty() {
            bad.push(format!("{} meta updates from a non-learning controller", trace.meta_updates.len()));
        }
        return bad;
    }
    if trace.meta_updates.len() != trace.executions.len() {
        bad.push(format!(
            "{} meta updates for {} executions",
            trace.meta_updates.len(),
            trace.executions.len()
        ));
        return bad;
    }
    for (i, (u, ex)) in trace.meta_updates.iter().zip(&trace.executions).enumerate() {
        if u.discount_pow as usize != ex.duration {
            bad.push(format!("update {i}: discount exponent {} for duration {}", u.discount_pow, ex.duration));
        }
        if u.option != ex.option_id || u.state != ex.start_abstract.key() || u.next != ex.end_abstract.key() {
            bad.push(format!("update {i}: does not match its execution"));
        }
        if (u.reward - rewards[i]).abs() > tol {
            bad.push(format!("update {i}: reward {} recomputed {}", u.reward, rewards[i]));
        }
        let last = &trace.steps[*groups[i].last().expect("nonempty")];
        if u.terminal != (last.done && !last.truncated) {
            bad.push(format!("update {i}: terminal flag {} disagrees with the environment", u.terminal));
        }
    }
    bad
}

/// Rebuild every option's table from the step log alone: each step updates
/// the executing option, and when a step enters other options' subgoal
/// regions the steps since the episode start or the last such entry are
/// relabeled and replayed into those options, lowest id first.
pub fn replay_option_learning(trace: &Trace, mdp: &AbstractMdp, config: &RunConfig, n_actions: usize) -> Result<Vec<QTable>> {
    let (g, b) = (config.gamma, config.bonus);
    let mut tables = (0..mdp.n_options())
        .map(|_| QTable::new(n_actions, config.low_alpha, config.low_eps_start, g))
        .collect::<Result<Vec<_>>>()?;
    let mut segment: Vec<usize> = Vec::new();
    let mut episode = None;
    for (i, st) in trace.steps.iter().enumerate() {
        if episode != Some(st.episode) {
            segment.clear();
            episode = Some(st.episode);
        }
        let o = st.option.ok_or_else(|| Error::runtime(format!("step {i} has no option")))?;
        let opt = mdp.option(o);
        let env_terminal = st.done && !st.truncated;
        let r = intrinsic_reward(opt, &st.state, &st.next_state, g, b);
        let terminal = opt.reached(&st.next_state) || env_terminal;
        tables[o].q_update(&state_key(&st.state), st.action, r, &state_key(&st.next_state), terminal, 1)?;
        segment.push(i);
        let entered: Vec<usize> = (0..mdp.n_options()).filter(|&x| mdp.option(x).reached(&st.next_state)).collect();
        if config.share_experience {
            for &o2 in entered.iter().filter(|&&x| x != o) {
                let target = mdp.option(o2);
                for &k in &segment {
                    let t = &trace.steps[k];
                    let r2 = intrinsic_reward(target, &t.state, &t.next_state, g, b);
                    let term2 = target.reached(&t.next_state) || (t.done && !t.truncated);
                    tables[o2].q_update(&state_key(&t.state), t.action, r2, &state_key(&t.next_state), term2, 1)?;
                }
            }
        }
        if !entered.is_empty() {
            segment.clear();
        }
    }
    Ok(tables)
}
