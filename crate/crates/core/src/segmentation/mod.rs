//! Switch-point detection in per-factor dynamics.
//!
//! Each transition is represented by the stacked vector `[x_t; x_{t+1} - x_t]`
//! over the factor's features. A Gaussian mixture over these vectors plays the
//! role of the regime model; a switch is a change of hard label between
//! consecutive transitions.

pub mod gmm;

use serde::{Deserialize, Serialize};

use crate::demos::{DemoSet, Trajectory};
use crate::error::{Error, Result};
use crate::factors::Factor;
pub use gmm::{Component, Mixture};

pub const DEFAULT_K_MAX: usize = 8;
pub const DEFAULT_RESTARTS: usize = 5;
pub const DEFAULT_W_MIN: usize = 3;
const STD_FLOOR: f64 = 1e-12;

/// Per-dimension affine standardization. Dimensions whose spread is below
/// 1e-12 are passed through untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Population mean and standard deviation of each dimension.
    pub fn fit(vectors: &[Vec<f64>]) -> Self {
        let dim = vectors.first().map_or(0, Vec::len);
        let n = vectors.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for v in vectors {
            for i in 0..dim {
                mean[i] += v[i];
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; dim];
        for v in vectors {
            for i in 0..dim {
                var[i] += (v[i] - mean[i]).powi(2);
            }
        }
        let mut std: Vec<f64> = var.iter().map(|s| (s / n).sqrt()).collect();
        for i in 0..dim {
            if std[i] < STD_FLOOR {
                mean[i] = 0.0;
                std[i] = 1.0;
            }
        }
        Standardizer { mean, std }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }
}

/// Unstandardized stacked vectors `[x_t[mask]; x_{t+1}[mask] - x_t[mask]]`.
pub fn raw_transition_vectors(traj: &Trajectory, mask: &[usize]) -> Result<Vec<Vec<f64>>> {
    if traj.len() < 2 {
        return Err(Error::data(format!(
            "trajectory {:?} has length {}; at least 2 steps needed",
            traj.traj_id,
            traj.len()
        )));
    }
    if let Some(&bad) = mask.iter().find(|&&i| i >= traj.dim()) {
        return Err(Error::data(format!(
            "mask index {bad} out of range for d={}",
            traj.dim()
        )));
    }
    Ok(traj
        .steps
        .windows(2)
        .map(|w| {
            let (a, b) = (&w[0].features, &w[1].features);
            let mut v: Vec<f64> = mask.iter().map(|&i| a[i]).collect();
            v.extend(mask.iter().map(|&i| b[i] - a[i]));
            v
        })
        .collect())
}

/// Standardizer fitted over every transition of the demo set for one mask.
/// Trajectories shorter than 2 steps contribute nothing.
pub fn fit_standardizer(demos: &DemoSet, mask: &[usize]) -> Result<Standardizer> {
    let mut all = Vec::new();
    for traj in demos.trajectories.iter().filter(|t| t.len() >= 2) {
        all.extend(raw_transition_vectors(traj, mask)?);
    }
    Ok(Standardizer::fit(&all))
}

/// Standardized transition vectors for one trajectory.
pub fn build_transition_vectors(
    traj: &Trajectory,
    mask: &[usize],
    standardizer: &Standardizer,
) -> Result<Vec<Vec<f64>>> {
    let raw = raw_transition_vectors(traj, mask)?;
    if standardizer.mean.len() != 2 * mask.len() {
        return Err(Error::data("standardizer dimension does not match mask"));
    }
    Ok(raw.iter().map(|v| standardizer.apply(v)).collect())
}

/// Regime model over transition vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SldsModel {
    pub mixture: Mixture,
    /// `trans_counts[i][j]`: consecutive hard labels `i -> j` in the fitting data.
    pub trans_counts: Vec<Vec<u64>>,
    pub bic_per_k: Vec<f64>,
    pub log_likelihood: f64,
    pub standardizer: Standardizer,
}

impl SldsModel {
    pub fn k(&self) -> usize {
        self.mixture.k()
    }

    pub fn dim(&self) -> usize {
        self.mixture.dim()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.mixture.components.iter().map(|c| c.weight).collect()
    }

    pub fn means(&self) -> Vec<&[f64]> {
        self.mixture.components.iter().map(|c| c.mean.as_slice()).collect()
    }

    pub fn covariances(&self) -> Vec<&[f64]> {
        self.mixture
            .components
            .iter()
            .map(|c| c.covariance.as_slice())
            .collect()
    }

    /// Row-normalized `trans_counts`; rows without observations are uniform.
    pub fn transition_matrix(&self) -> Vec<Vec<f64>> {
        let k = self.k();
        self.trans_counts
            .iter()
            .map(|row| {
                let total: u64 = row.iter().sum();
                if total == 0 {
                    vec![1.0 / k as f64; k]
                } else {
                    row.iter().map(|&c| c as f64 / total as f64).collect()
                }
            })
            .collect()
    }

    pub fn labels(&self, vectors: &[Vec<f64>]) -> Vec<usize> {
        vectors.iter().map(|v| self.mixture.label(v)).collect()
    }
}

/// Fit the mixture with BIC selection of `K` in `1..=k_max`. The vectors are
/// taken as already standardized; `trans_counts` follow their input order.
pub fn fit_gmm(vectors: &[Vec<f64>], k_max: usize, restarts: usize, seed: u64) -> Result<SldsModel> {
    let sel = gmm::select_by_bic(vectors, k_max, restarts, seed)?;
    let k = sel.mixture.k();
    let mut trans_counts = vec![vec![0u64; k]; k];
    let labels: Vec<usize> = vectors.iter().map(|v| sel.mixture.label(v)).collect();
    for w in labels.windows(2) {
        trans_counts[w[0]][w[1]] += 1;
    }
    Ok(SldsModel {
        mixture: sel.mixture,
        trans_counts,
        bic_per_k: sel.bic_per_k,
        log_likelihood: sel.log_likelihood,
        standardizer: Standardizer::identity(vectors[0].len()),
    })
}

/// Fit a regime model for one factor over the whole demo set.
pub fn fit_factor_model(
    demos: &DemoSet,
    mask: &[usize],
    k_max: usize,
    restarts: usize,
    seed: u64,
) -> Result<SldsModel> {
    let standardizer = fit_standardizer(demos, mask)?;
    let mut vectors = Vec::new();
    for traj in demos.trajectories.iter().filter(|t| t.len() >= 2) {
        vectors.extend(build_transition_vectors(traj, mask, &standardizer)?);
    }
    let mut model = fit_gmm(&vectors, k_max, restarts, seed)?;
    model.standardizer = standardizer;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchPoint {
    pub traj_id: String,
    pub t: usize,
    pub factor_id: usize,
    pub state: Vec<f64>,
    pub propagated: bool,
}

/// Keep a time only when it is at least `w_min` after the last kept one.
pub fn merge_close(times: &[usize], w_min: usize) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for &t in times {
        match kept.last() {
            Some(&last) if t < last + w_min => {}
            _ => kept.push(t),
        }
    }
    kept
}

/// Switch times from a hard-label sequence: every `t >= 1` where the label
/// differs from the previous one.
pub fn label_changes(labels: &[usize]) -> Vec<usize> {
    (1..labels.len())
        .filter(|&t| labels[t] != labels[t - 1])
        .collect()
}

/// Detect switch points in one trajectory.
///
/// With `terminal_switch`, a trajectory that ends with `done` also gets a
/// switch at its final time `T-1`: the final state is where the dynamics
/// stop, but no transition vector exists after it to carry a label change.
/// The terminal switch survives merging; label changes within `w_min` of it
/// are dropped instead.
pub fn detect_switches(
    traj: &Trajectory,
    factor: &Factor,
    model: &SldsModel,
    w_min: usize,
    terminal_switch: bool,
) -> Result<Vec<SwitchPoint>> {
    if model.dim() != 2 * factor.mask.len() {
        return Err(Error::data(format!(
            "dimension mismatch: model has {} dims, factor {:?} needs {}",
            model.dim(),
            factor.name,
            2 * factor.mask.len()
        )));
    }
    let vectors = build_transition_vectors(traj, &factor.mask, &model.standardizer)?;
    let labels = model.labels(&vectors);
    let w_min = w_min.max(1);
    let mut times = merge_close(&label_changes(&labels), w_min);
    if terminal_switch && traj.ends_done() {
        let end = traj.len() - 1;
        while times.last().is_some_and(|&t| t + w_min > end) {
            times.pop();
        }
        times.push(end);
    }
    Ok(times
        .into_iter()
        .map(|t| SwitchPoint {
            traj_id: traj.traj_id.clone(),
            t,
            factor_id: factor.factor_id,
            state: factor.project(&traj.steps[t].features),
            propagated: false,
        })
        .collect())
}

/// Diagnostic record for one factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSegmentation {
    pub factor_id: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub bic_per_k: Vec<f64>,
    pub switch_points: Vec<SwitchPointRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchPointRecord {
    pub traj_id: String,
    pub t: usize,
    pub state: Vec<f64>,
}
