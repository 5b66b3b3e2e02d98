//! The abstract MDP over subgoal options and the shaped base problems each
//! option solves.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tsc::SubgoalSet;

pub const DEFAULT_TIMEOUT: usize = 1000;
pub const DEFAULT_BONUS: f64 = 10.0;

/// Per-factor index (into that factor's subgoal list) of the last achieved
/// subgoal, `None` before any has been reached.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AbstractState(pub Vec<Option<usize>>);

impl AbstractState {
    pub fn initial(n_factors: usize) -> Self {
        AbstractState(vec![None; n_factors])
    }

    /// Table key: entries joined by commas, `N` for none.
    pub fn key(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for AbstractState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            match e {
                Some(h) => write!(f, "{h}")?,
                None => f.write_str("N")?,
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Outcome {
    SubgoalReached,
    Timeout,
    EpisodeEnd,
}

/// Option that drives the masked features of one factor to a subgoal.
#[derive(Debug, Clone, PartialEq)]
pub struct SubgoalOption {
    /// Equal to the subgoal's global id.
    pub option_id: usize,
    pub factor_id: usize,
    /// Position of the subgoal within its factor's list.
    pub index: usize,
    pub mask: Vec<usize>,
    pub target: Vec<f64>,
    pub threshold: f64,
    pub timeout: usize,
}

impl SubgoalOption {
    pub fn distance(&self, features: &[f64]) -> f64 {
        self.mask
            .iter()
            .zip(&self.target)
            .map(|(&i, t)| (features[i] - t).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn reached(&self, features: &[f64]) -> bool {
        self.distance(features) <= self.threshold
    }
}

/// Decide whether a running option stops. Subgoal attainment takes
/// precedence over episode end, which takes precedence over timeout.
pub fn termination_check(
    option: &SubgoalOption,
    features: &[f64],
    steps_in_option: usize,
    episode_done: bool,
) -> Option<Outcome> {
    if option.reached(features) {
        Some(Outcome::SubgoalReached)
    } else if episode_done {
        Some(Outcome::EpisodeEnd)
    } else if steps_in_option >= option.timeout {
        Some(Outcome::Timeout)
    } else {
        None
    }
}

/// Potential-based shaping toward the option's subgoal, `phi = -distance`,
/// plus `bonus` when `next` is within threshold.
pub fn intrinsic_reward(option: &SubgoalOption, s: &[f64], next: &[f64], gamma: f64, bonus: f64) -> f64 {
    let phi = -option.distance(s);
    let phi_next = -option.distance(next);
    let hit = if option.reached(next) { bonus } else { 0.0 };
    gamma * phi_next - phi + hit
}

/// `partial + gamma^t * r`.
pub fn accumulate_meta_reward(partial: f64, t: usize, r: f64, gamma: f64) -> f64 {
    partial + gamma.powi(t as i32) * r
}

/// One environment step taken inside an option.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub next_state: Vec<f64>,
    pub env_reward: f64,
    pub intrinsic_reward: f64,
    /// The environment ended the episode on this step.
    #[serde(default)]
    pub done: bool,
}

/// Record of one call-and-return option execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionExecution {
    pub option_id: usize,
    pub start_abstract: AbstractState,
    pub end_abstract: AbstractState,
    pub duration: usize,
    pub meta_reward: f64,
    pub outcome: Outcome,
    #[serde(skip)]
    pub transitions: Vec<Transition>,
}

impl OptionExecution {
    /// Discounted environmental return recomputed from the transitions.
    pub fn recompute_meta_reward(&self, gamma: f64) -> f64 {
        self.transitions
            .iter()
            .enumerate()
            .fold(0.0, |acc, (k, tr)| accumulate_meta_reward(acc, k, tr.env_reward, gamma))
    }
}

/// Abstract states, one option per subgoal, and the shared discount.
#[derive(Debug, Clone)]
pub struct AbstractMdp {
    pub subgoals: SubgoalSet,
    pub options: Vec<SubgoalOption>,
    pub gamma: f64,
    feature_dim: usize,
}

impl AbstractMdp {
    pub fn new(subgoals: SubgoalSet, gamma: f64, timeout: usize, feature_dim: usize) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::config(format!("gamma {gamma} must lie in (0, 1)")));
        }
        if timeout == 0 {
            return Err(Error::config("option timeout must be at least 1"));
        }
        subgoals.validate()?;
        if subgoals.feature_dim() > feature_dim {
            return Err(Error::data(format!(
                "subgoal masks reference feature {} but the environment has {feature_dim}",
                subgoals.feature_dim() - 1
            )));
        }
        let mut options: Vec<SubgoalOption> = Vec::new();
        for f in &subgoals.factors {
            for (index, s) in f.subgoals.iter().enumerate() {
                options.push(SubgoalOption {
                    option_id: s.subgoal_id,
                    factor_id: f.factor_id,
                    index,
                    mask: f.mask.clone(),
                    target: s.target.clone(),
                    threshold: s.threshold,
                    timeout,
                });
            }
        }
        options.sort_by_key(|o| o.option_id);
        if options.iter().enumerate().any(|(i, o)| o.option_id != i) {
            return Err(Error::data("subgoal ids must be 0..n without gaps"));
        }
        Ok(AbstractMdp {
            subgoals,
            options,
            gamma,
            feature_dim,
        })
    }

    pub fn n_factors(&self) -> usize {
        self.subgoals.factors.len()
    }

    pub fn n_options(&self) -> usize {
        self.options.len()
    }

    pub fn option(&self, id: usize) -> &SubgoalOption {
        &self.options[id]
    }

    pub fn initial_state(&self) -> AbstractState {
        AbstractState::initial(self.n_factors())
    }

    /// Update `previous` with every factor whose masked features are within
    /// threshold of one of its subgoals (nearest wins, ties to lowest id).
    pub fn abstract_state(&self, features: &[f64], previous: &AbstractState) -> Result<AbstractState> {
        if features.len() != self.feature_dim {
            return Err(Error::data(format!(
                "dimension mismatch: {} features, expected {}",
                features.len(),
                self.feature_dim
            )));
        }
        if previous.0.len() != self.n_factors() {
            return Err(Error::data("abstract state has the wrong number of factors"));
        }
        let mut next = previous.clone();
        let mut best: Vec<Option<(f64, usize)>> = vec![None; self.n_factors()];
        // Options are sorted by id, so a strict comparison keeps the lowest id on ties.
        for o in &self.options {
            let d = o.distance(features);
            if d <= o.threshold && best[o.factor_id].is_none_or(|(bd, _)| d < bd) {
                best[o.factor_id] = Some((d, o.index));
            }
        }
        for (f, b) in best.into_iter().enumerate() {
            if let Some((_, index)) = b {
                next.0[f] = Some(index);
            }
        }
        Ok(next)
    }

    pub fn initiation_allowed(&self, option: &SubgoalOption, s_mu: &AbstractState) -> bool {
        s_mu.0[option.factor_id] != Some(option.index)
    }

    pub fn allowed_options(&self, s_mu: &AbstractState) -> Vec<usize> {
        self.options
            .iter()
            .filter(|o| self.initiation_allowed(o, s_mu))
            .map(|o| o.option_id)
            .collect()
    }

    /// Option id of the subgoal recorded for `factor` in `s_mu`.
    pub fn achieved_option(&self, s_mu: &AbstractState, factor: usize) -> Option<usize> {
        s_mu.0[factor].map(|index| self.subgoals.factors[factor].subgoals[index].subgoal_id)
    }

    /// Enumerate every abstract state (product of `NONE` plus each factor's subgoals).
    pub fn all_states(&self) -> Vec<AbstractState> {
        let mut states = vec![AbstractState(Vec::new())];
        for f in &self.subgoals.factors {
            let mut next = Vec::new();
            for s in &states {
                for e in std::iter::once(None).chain((0..f.subgoals.len()).map(Some)) {
                    let mut v = s.0.clone();
                    v.push(e);
                    next.push(AbstractState(v));
                }
            }
            states = next;
        }
        states
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tsc::{FactorSubgoals, Subgoal};

    fn sg(id: usize, factor: usize, target: Vec<f64>, threshold: f64) -> Subgoal {
        Subgoal {
            subgoal_id: id,
            factor_id: factor,
            target,
            threshold,
            support: 1.0,
        }
    }

    fn mdp() -> AbstractMdp {
        let set = SubgoalSet {
            factors: vec![
                FactorSubgoals {
                    factor_id: 0,
                    name: "x+y".into(),
                    mask: vec![0, 1],
                    subgoals: vec![
                        sg(0, 0, vec![1.0, 1.0], 0.5),
                        sg(1, 0, vec![5.0, 5.0], 0.5),
                        sg(2, 0, vec![10.0, 0.0], 2.0),
                        sg(3, 0, vec![10.0, 2.0], 2.0),
                    ],
                },
                FactorSubgoals {
                    factor_id: 1,
                    name: "has_key".into(),
                    mask: vec![2],
                    subgoals: vec![sg(4, 1, vec![1.0], 1e-6)],
                },
            ],
            seed: 0,
            config_hash: String::new(),
        };
        AbstractMdp::new(set, 0.99, 1000, 3).unwrap()
    }

    #[test]
    fn abstract_state_updates_and_keeps() {
        let m = mdp();
        let s0 = m.initial_state();
        let s1 = m.abstract_state(&[1.0, 1.0, 0.0], &s0).unwrap();
        assert_eq!(s1, AbstractState(vec![Some(0), None]));
        let s2 = m.abstract_state(&[3.0, 3.0, 0.0], &s1).unwrap();
        assert_eq!(s2, s1);
        // Equidistant from subgoals 2 and 3: lowest id wins.
        let s3 = m.abstract_state(&[10.0, 1.0, 1.0], &s2).unwrap();
        assert_eq!(s3, AbstractState(vec![Some(2), Some(0)]));
        assert_eq!(s3.key(), "2,0");
        assert_eq!(s0.key(), "N,N");
        assert!(m.abstract_state(&[1.0, 1.0], &s0).is_err());
    }

    #[test]
    fn initiation_excludes_own_subgoal() {
        let m = mdp();
        let none = m.initial_state();
        assert!(m.options.iter().all(|o| m.initiation_allowed(o, &none)));
        let key = AbstractState(vec![None, Some(0)]);
        assert!(!m.initiation_allowed(m.option(4), &key));
        let pos = AbstractState(vec![Some(1), None]);
        assert!(m.initiation_allowed(m.option(2), &pos));
        assert!(!m.initiation_allowed(m.option(1), &pos));
        assert_eq!(m.allowed_options(&pos), vec![0, 2, 3, 4]);
    }

    #[test]
    fn termination_precedence() {
        let m = mdp();
        let o = m.option(0);
        assert_eq!(termination_check(o, &[1.0, 1.0, 0.0], 0, false), Some(Outcome::SubgoalReached));
        assert_eq!(termination_check(o, &[1.0, 1.0, 0.0], 5, true), Some(Outcome::SubgoalReached));
        assert_eq!(termination_check(o, &[9.0, 9.0, 0.0], 1000, false), Some(Outcome::Timeout));
        assert_eq!(termination_check(o, &[9.0, 9.0, 0.0], 1000, true), Some(Outcome::EpisodeEnd));
        assert_eq!(termination_check(o, &[9.0, 9.0, 0.0], 999, false), None);
    }

    #[test]
    fn intrinsic_reward_formula() {
        let o = SubgoalOption {
            option_id: 0,
            factor_id: 0,
            index: 0,
            mask: vec![0],
            target: vec![0.0],
            threshold: 0.5,
            timeout: 10,
        };
        assert!((intrinsic_reward(&o, &[5.0], &[4.0], 0.99, 10.0) - 1.04).abs() < 1e-12);
        assert!((intrinsic_reward(&o, &[1.0], &[0.0], 0.99, 10.0) - 11.0).abs() < 1e-12);
        assert_eq!(intrinsic_reward(&o, &[3.0], &[3.0], 1.0, 10.0), 0.0);
    }

    #[test]
    fn meta_reward_accumulation() {
        let g = 0.99;
        let total = [0.0, 0.0, 1.0]
            .iter()
            .enumerate()
            .fold(0.0, |acc, (t, &r)| accumulate_meta_reward(acc, t, r, g));
        assert!((total - 0.9801).abs() < 1e-12);
        let ones = (0..3).fold(0.0, |acc, t| accumulate_meta_reward(acc, t, 1.0, 1.0));
        assert_eq!(ones, 3.0);
        assert_eq!((0..5).fold(0.0, |acc, t| accumulate_meta_reward(acc, t, 0.0, g)), 0.0);
    }

    #[test]
    fn gamma_must_be_open_interval() {
        let set = mdp().subgoals;
        assert!(AbstractMdp::new(set.clone(), 1.0, 10, 3).is_err());
        assert!(AbstractMdp::new(set.clone(), 0.0, 10, 3).is_err());
        assert!(AbstractMdp::new(set, 0.5, 0, 3).is_err());
    }

    #[test]
    fn all_states_is_the_product() {
        let m = mdp();
        assert_eq!(m.all_states().len(), 5 * 2);
    }
}
