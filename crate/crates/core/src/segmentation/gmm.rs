//! Full-covariance Gaussian mixture fitted by EM, with k-means++ seeding,
//! seeded restarts and BIC model selection over the component count.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derived, Rng};

pub const RIDGE: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-7;
pub const MAX_ITER: usize = 300;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const WEIGHT_FLOOR: f64 = 1e-12;

/// Lower Cholesky factor of a symmetric positive-definite `d x d` matrix
/// stored row-major, or `None` when the matrix is not positive definite.
pub(crate) fn cholesky(a: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Some(l)
}

/// One mixture component with its cached Cholesky factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Row-major `d x d` covariance.
    pub covariance: Vec<f64>,
    #[serde(skip)]
    chol: Vec<f64>,
    #[serde(skip)]
    log_det: f64,
}

impl Component {
    fn new(weight: f64, mean: Vec<f64>, mut covariance: Vec<f64>) -> Self {
        let d = mean.len();
        let mut jitter = 0.0;
        let chol = loop {
            if let Some(l) = cholesky(&covariance, d) {
                break l;
            }
            // Only reached when rounding breaks positive definiteness.
            jitter = if jitter == 0.0 { RIDGE } else { jitter * 10.0 };
            for i in 0..d {
                covariance[i * d + i] += jitter;
            }
        };
        let log_det = 2.0 * (0..d).map(|i| chol[i * d + i].ln()).sum::<f64>();
        Component {
            weight,
            mean,
            covariance,
            chol,
            log_det,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `ln N(x | mean, covariance)`.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let mut z = [0.0f64; 16];
        let mut heap;
        let z: &mut [f64] = if d <= 16 {
            &mut z[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        let mut maha = 0.0;
        for i in 0..d {
            let mut s = x[i] - self.mean[i];
            for k in 0..i {
                s -= self.chol[i * d + k] * z[k];
            }
            z[i] = s / self.chol[i * d + i];
            maha += z[i] * z[i];
        }
        -0.5 * (d as f64 * LN_2PI + self.log_det + maha)
    }

    fn rebuild(&mut self) {
        *self = Component::new(self.weight, self.mean.clone(), self.covariance.clone());
    }
}

/// A fitted mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    pub components: Vec<Component>,
}

impl Mixture {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components.first().map_or(0, Component::dim)
    }

    /// Rebuild cached factors after deserialization.
    pub fn refresh(&mut self) {
        for c in &mut self.components {
            c.rebuild();
        }
    }

    fn log_joint(&self, x: &[f64], out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.components) {
            *o = c.weight.max(WEIGHT_FLOOR).ln() + c.log_density(x);
        }
    }

    /// Index of the component with the largest responsibility (lowest index on ties).
    pub fn label(&self, x: &[f64]) -> usize {
        let mut buf = vec![0.0; self.k()];
        self.log_joint(x, &mut buf);
        let mut best = 0;
        for (i, &v) in buf.iter().enumerate() {
            if v > buf[best] {
                best = i;
            }
        }
        best
    }

    pub fn log_likelihood(&self, data: &[Vec<f64>]) -> f64 {
        let mut buf = vec![0.0; self.k()];
        data.iter()
            .map(|x| {
                self.log_joint(x, &mut buf);
                log_sum_exp(&buf)
            })
            .sum()
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Free parameters of a `k`-component full-covariance mixture in dimension `d`.
pub fn parameter_count(k: usize, d: usize) -> usize {
    k * (1 + d + d * (d + 1) / 2) - 1
}

pub fn bic(log_likelihood: f64, k: usize, d: usize, n: usize) -> f64 {
    -2.0 * log_likelihood + parameter_count(k, d) as f64 * (n as f64).ln()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding: first center uniform, the rest by squared-distance sampling.
pub fn kmeans_plus_plus(data: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = data.len();
    let mut centers = vec![data[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = data.iter().map(|x| sq_dist(x, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = data[idx].clone();
        for (i, x) in data.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(x, &c));
        }
        centers.push(c);
    }
    centers
}

/// Result of a single EM run.
#[derive(Debug, Clone)]
pub struct EmRun {
    pub mixture: Mixture,
    pub log_likelihood: f64,
    /// Log-likelihood after initialization and after every M-step.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn global_covariance(data: &[Vec<f64>]) -> Vec<f64> {
    let d = data[0].len();
    let n = data.len() as f64;
    let mut mean = vec![0.0; d];
    for x in data {
        for i in 0..d {
            mean[i] += x[i] / n;
        }
    }
    let mut cov = vec![0.0; d * d];
    for x in data {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += (x[i] - mean[i]) * (x[j] - mean[j]) / n;
            }
        }
    }
    for i in 0..d {
        cov[i * d + i] += RIDGE;
    }
    cov
}

fn m_step(data: &[Vec<f64>], resp: &[f64], k: usize, prev: Option<&Mixture>, fallback: &[f64]) -> Mixture {
    let n = data.len();
    let d = data[0].len();
    let mut components = Vec::with_capacity(k);
    for c in 0..k {
        let nk: f64 = (0..n).map(|i| resp[i * k + c]).sum();
        let weight = (nk / n as f64).max(WEIGHT_FLOOR);
        if nk < 1e-10 {
            let (mean, cov) = match prev {
                Some(m) => (m.components[c].mean.clone(), m.components[c].covariance.clone()),
                None => (data[0].clone(), fallback.to_vec()),
            };
            components.push(Component::new(weight, mean, cov));
            continue;
        }
        let mut mean = vec![0.0; d];
        for (i, x) in data.iter().enumerate() {
            let r = resp[i * k + c];
            if r == 0.0 {
                continue;
            }
            for j in 0..d {
                mean[j] += r * x[j];
            }
        }
        for m in &mut mean {
            *m /= nk;
        }
        let mut cov = vec![0.0; d * d];
        let mut diff = vec![0.0; d];
        for (i, x) in data.iter().enumerate() {
            let r = resp[i * k + c];
            if r == 0.0 {
                continue;
            }
            for j in 0..d {
                diff[j] = x[j] - mean[j];
            }
            for a in 0..d {
                for b in 0..=a {
                    cov[a * d + b] += r * diff[a] * diff[b];
                }
            }
        }
        for a in 0..d {
            for b in 0..=a {
                let v = cov[a * d + b] / nk;
                cov[a * d + b] = v;
                cov[b * d + a] = v;
            }
            cov[a * d + a] += RIDGE;
        }
        components.push(Component::new(weight, mean, cov));
    }
    let total: f64 = components.iter().map(|c| c.weight).sum();
    for c in &mut components {
        c.weight /= total;
    }
    Mixture { components }
}

fn e_step(mixture: &Mixture, data: &[Vec<f64>], resp: &mut [f64]) -> f64 {
    let k = mixture.k();
    let mut ll = 0.0;
    for (i, x) in data.iter().enumerate() {
        let row = &mut resp[i * k..(i + 1) * k];
        mixture.log_joint(x, row);
        let lse = log_sum_exp(row);
        ll += lse;
        for v in row.iter_mut() {
            *v = (*v - lse).exp();
        }
    }
    ll
}

/// One EM run from a k-means++ hard-assignment start.
pub fn em(data: &[Vec<f64>], k: usize, rng: &mut Rng) -> EmRun {
    let n = data.len();
    let centers = kmeans_plus_plus(data, k, rng);
    let mut resp = vec![0.0; n * k];
    for (i, x) in data.iter().enumerate() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, center) in centers.iter().enumerate() {
            let dd = sq_dist(x, center);
            if dd < best_d {
                best_d = dd;
                best = c;
            }
        }
        resp[i * k + best] = 1.0;
    }
    let fallback = global_covariance(data);
    let mut mixture = m_step(data, &resp, k, None, &fallback);
    // Components left empty by the hard start sit on their seed center.
    for (c, center) in centers.iter().enumerate() {
        if (0..n).all(|i| resp[i * k + c] == 0.0) {
            mixture.components[c] = Component::new(
                mixture.components[c].weight,
                center.clone(),
                fallback.clone(),
            );
        }
    }
    let mut ll = e_step(&mixture, data, &mut resp);
    let mut trace = vec![ll];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < MAX_ITER {
        iterations += 1;
        let next = m_step(data, &resp, k, Some(&mixture), &fallback);
        let next_ll = e_step(&next, data, &mut resp);
        trace.push(next_ll);
        let gain = (next_ll - ll) / n as f64;
        mixture = next;
        ll = next_ll;
        if gain < TOLERANCE {
            converged = true;
            break;
        }
    }
    EmRun {
        mixture,
        log_likelihood: ll,
        trace,
        iterations,
        converged,
    }
}

/// Best-of-`restarts` EM for a fixed component count. The winner is the
/// run with the highest log-likelihood, ties going to the lower restart index.
pub fn fit_k(data: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> EmRun {
    let runs: Vec<EmRun> = (0..restarts.max(1))
        .into_par_iter()
        .map(|r| em(data, k, &mut derived(seed, &[k as u64, r as u64])))
        .collect();
    let mut best = 0;
    for (i, run) in runs.iter().enumerate() {
        if run.log_likelihood > runs[best].log_likelihood {
            best = i;
        }
    }
    runs.into_iter().nth(best).expect("at least one restart")
}

/// Mixture selected by BIC over `k = 1..=k_max`.
#[derive(Debug, Clone)]
pub struct GmmSelection {
    pub mixture: Mixture,
    pub log_likelihood: f64,
    pub bic_per_k: Vec<f64>,
}

pub fn select_by_bic(
    data: &[Vec<f64>],
    k_max: usize,
    restarts: usize,
    seed: u64,
) -> Result<GmmSelection> {
    if k_max == 0 {
        return Err(Error::config("k_max must be at least 1"));
    }
    if data.len() < 2 * k_max {
        return Err(Error::data(format!(
            "insufficient data: {} vectors for k_max={k_max}",
            data.len()
        )));
    }
    let d = data[0].len();
    if d == 0 || data.iter().any(|x| x.len() != d) {
        return Err(Error::data("transition vectors have inconsistent dimensions"));
    }
    if data.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::data("non-finite transition vector"));
    }
    let n = data.len();
    let runs: Vec<EmRun> = (1..=k_max)
        .into_par_iter()
        .map(|k| fit_k(data, k, restarts, seed))
        .collect();
    let bic_per_k: Vec<f64> = runs
        .iter()
        .enumerate()
        .map(|(i, r)| bic(r.log_likelihood, i + 1, d, n))
        .collect();
    let mut best = 0;
    for (i, &b) in bic_per_k.iter().enumerate() {
        if b < bic_per_k[best] {
            best = i;
        }
    }
    let run = runs.into_iter().nth(best).expect("k_max >= 1");
    Ok(GmmSelection {
        mixture: run.mixture,
        log_likelihood: run.log_likelihood,
        bic_per_k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_blob(rng: &mut Rng, n: usize, center: &[f64], sigma: f64) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                center
                    .iter()
                    .map(|c| {
                        let z: f64 = StandardNormal.sample(rng);
                        c + sigma * z
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn cholesky_reconstructs() {
        let a = [4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0];
        let l = cholesky(&a, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| l[i * 3 + k] * l[j * 3 + k]).sum();
                assert!((v - a[i * 3 + j]).abs() < 1e-12);
            }
        }
        assert!(cholesky(&[1.0, 2.0, 2.0, 1.0], 2).is_none());
    }

    #[test]
    fn log_density_matches_closed_form_1d() {
        let c = Component::new(1.0, vec![1.0], vec![4.0]);
        let x = 2.0;
        let expected = -0.5 * (LN_2PI + 4.0f64.ln() + (x - 1.0) * (x - 1.0) / 4.0);
        assert!((c.log_density(&[x]) - expected).abs() < 1e-12);
    }

    #[test]
    fn parameter_count_formula() {
        // k (1 + 2m + m(2m+1)) - 1 with d = 2m.
        for m in 1..4 {
            for k in 1..5 {
                assert_eq!(parameter_count(k, 2 * m), k * (1 + 2 * m + m * (2 * m + 1)) - 1);
            }
        }
    }

    #[test]
    fn em_log_likelihood_is_monotone() {
        let mut rng = seeded(11);
        let mut data = gaussian_blob(&mut rng, 150, &[0.0, 0.0], 1.0);
        data.extend(gaussian_blob(&mut rng, 150, &[3.0, 1.0], 0.7));
        data.extend(gaussian_blob(&mut rng, 100, &[-2.0, 4.0], 1.5));
        for k in 1..=5 {
            let run = em(&data, k, &mut seeded(k as u64));
            for w in run.trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0), "k={k}: {w:?}");
            }
        }
    }

    #[test]
    fn insufficient_data_rejected() {
        let data = vec![vec![0.0, 1.0]; 5];
        let err = select_by_bic(&data, 3, 1, 0).unwrap_err();
        assert!(err.to_string().contains("insufficient data"));
    }

    #[test]
    fn weights_sum_to_one_and_covariances_spd() {
        let mut rng = seeded(5);
        let mut data = gaussian_blob(&mut rng, 200, &[0.0, 0.0, 0.0], 1.0);
        data.extend(gaussian_blob(&mut rng, 200, &[5.0, 5.0, 0.0], 1.0));
        let sel = select_by_bic(&data, 4, 2, 1).unwrap();
        let total: f64 = sel.mixture.components.iter().map(|c| c.weight).sum();
        assert!((total - 1.0).abs() < 1e-9);
        for c in &sel.mixture.components {
            let m = nalgebra::DMatrix::from_row_slice(3, 3, &c.covariance);
            assert!((m.clone() - m.transpose()).abs().max() < 1e-12);
            let min_eig = m.symmetric_eigen().eigenvalues.min();
            assert!(min_eig >= 1e-9, "{min_eig}");
        }
    }
}
