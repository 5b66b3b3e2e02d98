//! Transition state clustering: per-factor switch detection, propagation of
//! switch times across factors, and clustering of switch states into subgoals.

pub mod kmeans;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::demos::DemoSet;
use crate::error::{Error, Result, StageExt};
use crate::factors::{Factor, Factorization};
use crate::rng::derive_seed;
use crate::segmentation::{
    self, FactorSegmentation, SwitchPoint, SwitchPointRecord, DEFAULT_K_MAX, DEFAULT_RESTARTS,
    DEFAULT_W_MIN,
};

pub const DEFAULT_MIN_SUPPORT: f64 = 0.4;
pub const DEFAULT_CLUSTER_K_MAX: usize = 8;
pub const THRESHOLD_SCALE: f64 = 1.5;
pub const THRESHOLD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subgoal {
    pub subgoal_id: usize,
    #[serde(skip)]
    pub factor_id: usize,
    pub target: Vec<f64>,
    pub threshold: f64,
    pub support: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSubgoals {
    pub factor_id: usize,
    pub name: String,
    pub mask: Vec<usize>,
    pub subgoals: Vec<Subgoal>,
}

/// Subgoals per factor; the on-disk contract between discovery and training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgoalSet {
    pub factors: Vec<FactorSubgoals>,
    pub seed: u64,
    pub config_hash: String,
}

impl SubgoalSet {
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for (i, f) in self.factors.iter().enumerate() {
            if f.factor_id != i {
                return Err(Error::data(format!(
                    "factor entries must be ordered by id: found {} at position {i}",
                    f.factor_id
                )));
            }
            for s in &f.subgoals {
                if !ids.insert(s.subgoal_id) {
                    return Err(Error::data(format!("duplicate subgoal_id {}", s.subgoal_id)));
                }
                if s.target.len() != f.mask.len() {
                    return Err(Error::data(format!(
                        "subgoal {}: target has {} dims, mask has {}",
                        s.subgoal_id,
                        s.target.len(),
                        f.mask.len()
                    )));
                }
                if !(s.threshold > 0.0 && s.threshold.is_finite()) {
                    return Err(Error::data(format!("subgoal {}: threshold must be > 0", s.subgoal_id)));
                }
                if !(s.support > 0.0 && s.support <= 1.0) {
                    return Err(Error::data(format!("subgoal {}: support outside (0, 1]", s.subgoal_id)));
                }
                if s.factor_id != f.factor_id {
                    return Err(Error::data(format!(
                        "subgoal {} is listed under factor {} but belongs to {}",
                        s.subgoal_id, f.factor_id, s.factor_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn subgoals(&self) -> impl Iterator<Item = &Subgoal> {
        self.factors.iter().flat_map(|f| f.subgoals.iter())
    }

    pub fn subgoal_count(&self) -> usize {
        self.factors.iter().map(|f| f.subgoals.len()).sum()
    }

    pub fn subgoal(&self, id: usize) -> Option<&Subgoal> {
        self.subgoals().find(|s| s.subgoal_id == id)
    }

    pub fn mask(&self, factor_id: usize) -> &[usize] {
        &self.factors[factor_id].mask
    }

    pub fn feature_dim(&self) -> usize {
        self.factors
            .iter()
            .flat_map(|f| f.mask.iter())
            .map(|&i| i + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("serializable");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut set: SubgoalSet = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        for f in &mut set.factors {
            for s in &mut f.subgoals {
                s.factor_id = f.factor_id;
            }
        }
        set.validate()?;
        Ok(set)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscoverConfig {
    pub k_max: usize,
    pub restarts: usize,
    pub w_min: usize,
    pub cluster_k_max: usize,
    pub min_support: f64,
    pub demo_copies: usize,
    /// Add a switch at the final time of trajectories that end with `done`.
    pub terminal_switch: bool,
}

impl Default for DiscoverConfig {
    fn default() -> Self {
        DiscoverConfig {
            k_max: DEFAULT_K_MAX,
            restarts: DEFAULT_RESTARTS,
            w_min: DEFAULT_W_MIN,
            cluster_k_max: DEFAULT_CLUSTER_K_MAX,
            min_support: DEFAULT_MIN_SUPPORT,
            demo_copies: 1,
            terminal_switch: true,
        }
    }
}

impl DiscoverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_max == 0 || self.cluster_k_max == 0 {
            return Err(Error::config("k_max and cluster_k_max must be at least 1"));
        }
        if self.restarts == 0 {
            return Err(Error::config("restarts must be at least 1"));
        }
        if !(self.min_support >= 0.0 && self.min_support <= 1.0) {
            return Err(Error::config("min_support must lie in [0, 1]"));
        }
        if self.demo_copies == 0 {
            return Err(Error::config("demo_copies must be at least 1"));
        }
        Ok(())
    }
}

/// Copy every switch time to all other factors of the same trajectory.
/// Duplicates on `(traj_id, t, factor_id)` keep the non-propagated entry.
pub fn propagate_switch_times(
    switches: &[SwitchPoint],
    demos: &DemoSet,
    factorization: &Factorization,
) -> Result<Vec<SwitchPoint>> {
    let mut out: BTreeMap<(String, usize, usize), SwitchPoint> = BTreeMap::new();
    for sp in switches {
        if factorization.get(sp.factor_id).is_none() {
            return Err(Error::data(format!("switch references unknown factor {}", sp.factor_id)));
        }
        let traj = demos
            .trajectory(&sp.traj_id)
            .ok_or_else(|| Error::data(format!("switch references dangling traj_id {:?}", sp.traj_id)))?;
        if sp.t >= traj.len() {
            return Err(Error::data(format!(
                "switch time {} outside trajectory {:?}",
                sp.t, sp.traj_id
            )));
        }
        out.insert((sp.traj_id.clone(), sp.t, sp.factor_id), sp.clone());
    }
    for sp in switches {
        let traj = demos.trajectory(&sp.traj_id).expect("checked above");
        for f in &factorization.factors {
            if f.factor_id == sp.factor_id {
                continue;
            }
            out.entry((sp.traj_id.clone(), sp.t, f.factor_id))
                .or_insert_with(|| SwitchPoint {
                    traj_id: sp.traj_id.clone(),
                    t: sp.t,
                    factor_id: f.factor_id,
                    state: f.project(&traj.steps[sp.t].features),
                    propagated: true,
                });
        }
    }
    Ok(out.into_values().collect())
}

/// Outcome of clustering one factor's switch states.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorClusters {
    pub subgoals: Vec<Subgoal>,
    /// Mean switch time of each subgoal's members, parallel to `subgoals`.
    pub mean_times: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Whether `sw` sits on the final state of a trajectory that ends `done`.
fn is_terminal(sw: &SwitchPoint, demos: &DemoSet) -> bool {
    demos
        .trajectory(&sw.traj_id)
        .is_some_and(|t| t.ends_done() && sw.t + 1 == t.len())
}

/// Cluster switch states of one factor into subgoals. Subgoal ids are left
/// at 0; [`discover`] numbers them globally. Output is ordered by mean
/// switch time.
///
/// Switches on the final state of successful demonstrations are clustered
/// apart from the rest, so that the task's end state gets its own subgoal
/// instead of being averaged with nearby interior switches.
pub fn cluster_subgoals(
    switches: &[SwitchPoint],
    factor: &Factor,
    demos: &DemoSet,
    k_max: usize,
    min_support: f64,
    seed: u64,
) -> FactorClusters {
    let mut result = FactorClusters {
        subgoals: Vec::new(),
        mean_times: Vec::new(),
        warnings: Vec::new(),
    };
    if switches.is_empty() {
        return result;
    }
    let (mut terminal, mut interior): (Vec<&SwitchPoint>, Vec<&SwitchPoint>) =
        switches.iter().partition(|s| is_terminal(s, demos));
    if k_max < 2 {
        interior.append(&mut terminal);
    }
    let n_demos = demos.trajectories.len() as f64;
    let mut kept: Vec<(f64, Subgoal, bool)> = Vec::new();
    let mut total_clusters = 0;
    // Terminal clusters come out of the same k_max budget as interior ones.
    let terminal_budget = if interior.is_empty() { k_max } else { k_max.saturating_sub(1) };
    for (group, group_seed, end) in [(terminal, derive_seed(seed, &[1]), true), (interior, seed, false)] {
        if group.is_empty() {
            continue;
        }
        let points: Vec<Vec<f64>> = group.iter().map(|s| s.state.clone()).collect();
        let budget = if end { terminal_budget } else { k_max - total_clusters };
        let (clustering, _) = kmeans::select_clustering(&points, budget, group_seed);
        total_clusters += clustering.k();
        for c in 0..clustering.k() {
            let members = clustering.members(c);
            if members.is_empty() {
                continue;
            }
            let trajs: BTreeSet<&str> = members.iter().map(|&i| group[i].traj_id.as_str()).collect();
            let support = trajs.len() as f64 / n_demos;
            if support < min_support {
                continue;
            }
            let center = &clustering.centers[c];
            let spread = members
                .iter()
                .map(|&i| kmeans::dist(&points[i], center))
                .sum::<f64>()
                / members.len() as f64;
            let mean_t = members.iter().map(|&i| group[i].t as f64).sum::<f64>() / members.len() as f64;
            kept.push((
                mean_t,
                Subgoal {
                    subgoal_id: 0,
                    factor_id: factor.factor_id,
                    target: center.clone(),
                    threshold: factor.threshold.max(THRESHOLD_SCALE * spread).max(THRESHOLD_FLOOR),
                    support,
                },
                end,
            ));
        }
    }
    // An interior region that already covers an end state is superseded by it.
    let ends: Vec<Vec<f64>> = kept.iter().filter(|k| k.2).map(|k| k.1.target.clone()).collect();
    kept.retain(|(_, sg, end)| *end || !ends.iter().any(|e| kmeans::dist(e, &sg.target) <= sg.threshold));
    if kept.is_empty() {
        result.warnings.push(format!(
            "factor {} ({}): all {total_clusters} clusters pruned below min_support {min_support}",
            factor.factor_id, factor.name,
        ));
        return result;
    }
    kept.sort_by(|a, b| a.0.total_cmp(&b.0));
    for (t, s, _) in kept {
        result.mean_times.push(t);
        result.subgoals.push(s);
    }
    result
}

/// Everything produced by a discovery run.
#[derive(Debug, Clone, PartialEq)]
pub struct Discovery {
    pub subgoals: SubgoalSet,
    pub segmentation: Vec<FactorSegmentation>,
    /// Switch points after propagation.
    pub switches: Vec<SwitchPoint>,
    pub warnings: Vec<String>,
}

const STAGE_GMM: u64 = 1;
const STAGE_KMEANS: u64 = 2;

/// Full discovery pipeline. Trajectories are processed in `traj_id` order,
/// so the result does not depend on the order of the input file.
pub fn discover(
    demos: &DemoSet,
    factorization: &Factorization,
    config: &DiscoverConfig,
    seed: u64,
    config_hash: &str,
) -> Result<Discovery> {
    config.validate()?;
    if factorization.feature_dim != demos.feature_dim() {
        return Err(Error::data(format!(
            "factorization covers {} features, demos have {}",
            factorization.feature_dim,
            demos.feature_dim()
        )));
    }
    let mut sorted = demos.replicated(config.demo_copies);
    sorted.trajectories.sort_by(|a, b| a.traj_id.cmp(&b.traj_id));
    let demos = &sorted;

    let detections: Vec<(FactorSegmentation, Vec<SwitchPoint>)> = factorization
        .factors
        .par_iter()
        .map(|factor| -> Result<_> {
            let stage = format!("segmentation[factor {}]", factor.factor_id);
            let model = segmentation::fit_factor_model(
                demos,
                &factor.mask,
                config.k_max,
                config.restarts,
                derive_seed(seed, &[STAGE_GMM, factor.factor_id as u64]),
            )
            .stage(&stage)?;
            let mut switches = Vec::new();
            for traj in demos.trajectories.iter().filter(|t| t.len() >= 2) {
                switches.extend(
                    segmentation::detect_switches(traj, factor, &model, config.w_min, config.terminal_switch)
                        .stage(&stage)?,
                );
            }
            let seg = FactorSegmentation {
                factor_id: factor.factor_id,
                k: model.k(),
                bic_per_k: model.bic_per_k.clone(),
                switch_points: switches
                    .iter()
                    .map(|s| SwitchPointRecord {
                        traj_id: s.traj_id.clone(),
                        t: s.t,
                        state: s.state.clone(),
                    })
                    .collect(),
            };
            Ok((seg, switches))
        })
        .collect::<Result<_>>()?;

    let mut segmentation = Vec::new();
    let mut raw = Vec::new();
    for (seg, sw) in detections {
        segmentation.push(seg);
        raw.extend(sw);
    }
    let switches = propagate_switch_times(&raw, demos, factorization).stage("propagation")?;

    let clustered: Vec<FactorClusters> = factorization
        .factors
        .par_iter()
        .map(|factor| {
            let own: Vec<SwitchPoint> = switches
                .iter()
                .filter(|s| s.factor_id == factor.factor_id)
                .cloned()
                .collect();
            cluster_subgoals(
                &own,
                factor,
                demos,
                config.cluster_k_max,
                config.min_support,
                derive_seed(seed, &[STAGE_KMEANS, factor.factor_id as u64]),
            )
        })
        .collect();

    let mut next_id = 0;
    let mut factors = Vec::new();
    let mut warnings = Vec::new();
    for (factor, mut fc) in factorization.factors.iter().zip(clustered) {
        for s in &mut fc.subgoals {
            s.subgoal_id = next_id;
            next_id += 1;
        }
        warnings.append(&mut fc.warnings);
        factors.push(FactorSubgoals {
            factor_id: factor.factor_id,
            name: factor.name.clone(),
            mask: factor.mask.clone(),
            subgoals: fc.subgoals,
        });
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let subgoals = SubgoalSet {
        factors,
        seed,
        config_hash: config_hash.to_string(),
    };
    subgoals.validate()?;
    Ok(Discovery {
        subgoals,
        segmentation,
        switches,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demos::{Step, Trajectory};
    use crate::factors::FactorSpec;

    fn demo_set(n_traj: usize, len: usize) -> DemoSet {
        let trajectories = (0..n_traj)
            .map(|k| Trajectory {
                traj_id: format!("d{k}"),
                steps: (0..len)
                    .map(|t| Step {
                        t,
                        features: vec![t as f64, (t as f64) * 0.5, k as f64],
                        action: if t + 1 == len { -1 } else { 0 },
                        reward: 0.0,
                        done: false,
                    })
                    .collect(),
            })
            .collect();
        DemoSet::new(trajectories, vec!["a".into(), "b".into(), "c".into()], 4).unwrap()
    }

    fn two_factors() -> Factorization {
        crate::factors::override_factors(
            &[
                FactorSpec { name: "ab".into(), mask: vec![0, 1], threshold: 0.0 },
                FactorSpec { name: "c".into(), mask: vec![2], threshold: 0.0 },
            ],
            3,
        )
        .unwrap()
    }

    fn sp(traj: &str, t: usize, factor: usize, state: Vec<f64>) -> SwitchPoint {
        SwitchPoint {
            traj_id: traj.into(),
            t,
            factor_id: factor,
            state,
            propagated: false,
        }
    }

    #[test]
    fn propagation_copies_to_other_factor() {
        let demos = demo_set(1, 10);
        let fz = two_factors();
        let out = propagate_switch_times(&[sp("d0", 4, 0, vec![4.0, 2.0])], &demos, &fz).unwrap();
        assert_eq!(out.len(), 2);
        let prop = out.iter().find(|s| s.factor_id == 1).unwrap();
        assert!(prop.propagated);
        assert_eq!(prop.t, 4);
        assert_eq!(prop.state, vec![0.0]);
        assert!(propagate_switch_times(&[], &demos, &fz).unwrap().is_empty());
    }

    #[test]
    fn propagation_keeps_original_on_collision() {
        let demos = demo_set(1, 10);
        let fz = two_factors();
        let out = propagate_switch_times(
            &[sp("d0", 4, 0, vec![4.0, 2.0]), sp("d0", 4, 1, vec![0.0])],
            &demos,
            &fz,
        )
        .unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|s| !s.propagated));
    }

    #[test]
    fn dangling_traj_rejected() {
        let demos = demo_set(1, 10);
        let err = propagate_switch_times(&[sp("nope", 1, 0, vec![0.0, 0.0])], &demos, &two_factors())
            .unwrap_err();
        assert!(err.to_string().contains("dangling"));
    }

    #[test]
    fn identical_switch_states_make_one_subgoal() {
        let demos = demo_set(10, 5);
        let fz = two_factors();
        let switches: Vec<SwitchPoint> = (0..10).map(|k| sp(&format!("d{k}"), 2, 0, vec![3.0, 1.0])).collect();
        let fc = cluster_subgoals(&switches, &fz.factors[0], &demos, 8, 0.4, 1);
        assert_eq!(fc.subgoals.len(), 1);
        assert_eq!(fc.subgoals[0].target, vec![3.0, 1.0]);
        assert_eq!(fc.subgoals[0].support, 1.0);
        assert_eq!(fc.subgoals[0].threshold, THRESHOLD_FLOOR);
    }

    #[test]
    fn low_support_cluster_pruned() {
        let demos = demo_set(10, 5);
        let fz = two_factors();
        let mut switches: Vec<SwitchPoint> =
            (0..10).map(|k| sp(&format!("d{k}"), 1, 0, vec![0.0, 0.0])).collect();
        switches.extend((0..3).map(|t| sp("d0", t + 2, 0, vec![50.0, 50.0])));
        let fc = cluster_subgoals(&switches, &fz.factors[0], &demos, 8, 0.4, 1);
        assert_eq!(fc.subgoals.len(), 1);
        assert_eq!(fc.subgoals[0].target, vec![0.0, 0.0]);
    }

    #[test]
    fn all_pruned_warns() {
        let demos = demo_set(10, 5);
        let fz = two_factors();
        let switches = vec![sp("d0", 1, 0, vec![0.0, 0.0])];
        let fc = cluster_subgoals(&switches, &fz.factors[0], &demos, 8, 0.4, 1);
        assert!(fc.subgoals.is_empty());
        assert_eq!(fc.warnings.len(), 1);
    }

    #[test]
    fn factor_threshold_is_a_floor() {
        let demos = demo_set(4, 5);
        let mut fz = two_factors();
        fz.factors[0].threshold = 6.0;
        let switches: Vec<SwitchPoint> = (0..4).map(|k| sp(&format!("d{k}"), 2, 0, vec![k as f64, 0.0])).collect();
        let fc = cluster_subgoals(&switches, &fz.factors[0], &demos, 1, 0.4, 1);
        assert_eq!(fc.subgoals[0].threshold, 6.0);
    }
}
