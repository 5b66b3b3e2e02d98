//! Factored feature representation: groups of features that change together.
//!
//! Identification is a heuristic: feature `i` "changes" at transition `t`
//! when `|y[t+1][i] - y[t][i]| > 1e-9`; each change is dilated by
//! [`DILATION`] steps on both sides (so that alternating axis moves on a grid
//! still count as co-changing), and two features are linked when the Jaccard
//! similarity of their dilated change sets reaches the threshold. Factors are
//! the connected components of that link graph.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::demos::DemoSet;
use crate::error::{Error, Result};

pub const CHANGE_EPS: f64 = 1e-9;
pub const DILATION: usize = 2;
pub const DEFAULT_CORR_THRESHOLD: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Factor {
    pub factor_id: usize,
    pub name: String,
    /// Sorted feature indices.
    pub mask: Vec<usize>,
    /// Distance threshold for subgoal achievement in this factor's subspace.
    pub threshold: f64,
}

impl Factor {
    pub fn project(&self, features: &[f64]) -> Vec<f64> {
        self.mask.iter().map(|&i| features[i]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Factorization {
    pub factors: Vec<Factor>,
    pub feature_dim: usize,
}

/// One entry of a manual factor override.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub name: String,
    pub mask: Vec<usize>,
    #[serde(default)]
    pub threshold: f64,
}

impl Factorization {
    /// Validate the partition property and order factors by smallest index.
    pub fn new(mut factors: Vec<Factor>, feature_dim: usize) -> Result<Self> {
        let mut covered = vec![false; feature_dim];
        for f in &mut factors {
            if f.mask.is_empty() {
                return Err(Error::config(format!("factor {:?} has an empty mask", f.name)));
            }
            if !(f.threshold >= 0.0 && f.threshold.is_finite()) {
                return Err(Error::config(format!("factor {:?}: invalid threshold", f.name)));
            }
            f.mask.sort_unstable();
            for &i in &f.mask {
                if i >= feature_dim {
                    return Err(Error::config(format!(
                        "factor {:?}: feature index {i} out of range for d={feature_dim}",
                        f.name
                    )));
                }
                if covered[i] {
                    return Err(Error::config(format!(
                        "factor masks overlap on feature {i}"
                    )));
                }
                covered[i] = true;
            }
        }
        if let Some(missing) = covered.iter().position(|c| !c) {
            return Err(Error::config(format!(
                "incomplete partition: feature {missing} is in no factor"
            )));
        }
        factors.sort_by_key(|f| f.mask[0]);
        for (id, f) in factors.iter_mut().enumerate() {
            f.factor_id = id;
        }
        Ok(Factorization {
            factors,
            feature_dim,
        })
    }

    pub fn get(&self, factor_id: usize) -> Option<&Factor> {
        self.factors.get(factor_id)
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    /// Factor whose mask contains all of `features`, by feature name.
    pub fn containing(&self, indices: &[usize]) -> Option<&Factor> {
        self.factors
            .iter()
            .find(|f| indices.iter().all(|i| f.mask.contains(i)))
    }
}

/// Build a factorization exactly as specified.
pub fn override_factors(spec: &[FactorSpec], feature_dim: usize) -> Result<Factorization> {
    let factors = spec
        .iter()
        .map(|s| Factor {
            factor_id: 0,
            name: s.name.clone(),
            mask: s.mask.clone(),
            threshold: s.threshold,
        })
        .collect();
    Factorization::new(factors, feature_dim)
}

/// Dilated change-indicator sets, one per feature, keyed by global
/// transition index (trajectory offset + t).
fn dilated_change_sets(demos: &DemoSet) -> Vec<BTreeSet<usize>> {
    let d = demos.feature_dim();
    let mut sets = vec![BTreeSet::new(); d];
    let mut offset = 0;
    for traj in &demos.trajectories {
        let n = traj.len().saturating_sub(1);
        for t in 0..n {
            let (a, b) = (&traj.steps[t].features, &traj.steps[t + 1].features);
            for i in 0..d {
                if (b[i] - a[i]).abs() > CHANGE_EPS {
                    let lo = t.saturating_sub(DILATION);
                    let hi = (t + DILATION).min(n - 1);
                    sets[i].extend((lo..=hi).map(|u| offset + u));
                }
            }
        }
        offset += n;
    }
    sets
}

fn jaccard(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Pairwise dilated-Jaccard similarity matrix between features.
pub fn change_similarity(demos: &DemoSet) -> Vec<Vec<f64>> {
    let sets = dilated_change_sets(demos);
    let d = sets.len();
    let mut sim = vec![vec![0.0; d]; d];
    for i in 0..d {
        sim[i][i] = 1.0;
        for j in (i + 1)..d {
            let s = jaccard(&sets[i], &sets[j]);
            sim[i][j] = s;
            sim[j][i] = s;
        }
    }
    sim
}

/// Group features into factors by change co-occurrence.
pub fn identify_factors(demos: &DemoSet, corr_threshold: f64) -> Result<Factorization> {
    if !(corr_threshold > 0.0 && corr_threshold <= 1.0) {
        return Err(Error::config(format!(
            "corr_threshold {corr_threshold} outside (0, 1]"
        )));
    }
    if demos.total_transitions() < 1 {
        return Err(Error::data("identify_factors needs at least 2 timesteps"));
    }
    let sets = dilated_change_sets(demos);
    if sets.iter().all(BTreeSet::is_empty) {
        return Err(Error::data("degenerate demos: no feature ever changes"));
    }
    let d = sets.len();
    // Union-find over the link graph.
    let mut parent: Vec<usize> = (0..d).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for i in 0..d {
        for j in (i + 1)..d {
            if jaccard(&sets[i], &sets[j]) >= corr_threshold {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut root_of_group: Vec<usize> = Vec::new();
    for i in 0..d {
        let r = find(&mut parent, i);
        match root_of_group.iter().position(|&x| x == r) {
            Some(g) => groups[g].push(i),
            None => {
                root_of_group.push(r);
                groups.push(vec![i]);
            }
        }
    }
    let factors = groups
        .into_iter()
        .map(|mask| Factor {
            factor_id: 0,
            name: mask
                .iter()
                .map(|&i| demos.feature_names[i].as_str())
                .collect::<Vec<_>>()
                .join("+"),
            mask,
            threshold: 0.0,
        })
        .collect();
    Factorization::new(factors, d)
}
