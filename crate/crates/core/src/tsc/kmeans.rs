//! Lloyd's k-means with k-means++ seeding and silhouette model selection.

use crate::rng::{derived, Rng};
use crate::segmentation::gmm::kmeans_plus_plus;

pub const RESTARTS: usize = 10;
pub const MAX_ITER: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub centers: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub inertia: f64,
}

impl Clustering {
    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn members(&self, c: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == c)
            .collect()
    }
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn nearest(x: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d: f64 = x.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// One Lloyd run. Clusters that lose all members keep their previous center.
pub fn lloyd(points: &[Vec<f64>], k: usize, rng: &mut Rng) -> Clustering {
    let mut centers = kmeans_plus_plus(points, k, rng);
    let mut assignment = vec![usize::MAX; points.len()];
    for _ in 0..MAX_ITER {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let (c, _) = nearest(p, &centers);
            if assignment[i] != c {
                assignment[i] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignment) {
            counts[c] += 1;
            for j in 0..dim {
                sums[c][j] += p[j];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    let inertia = points.iter().map(|p| nearest(p, &centers).1).sum();
    Clustering {
        centers,
        assignment,
        inertia,
    }
}

/// Best of [`RESTARTS`] runs by inertia; ties keep the lower restart index.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Clustering {
    let mut best: Option<Clustering> = None;
    for r in 0..RESTARTS {
        let run = lloyd(points, k, &mut derived(seed, &[k as u64, r as u64]));
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    best.expect("RESTARTS >= 1")
}

/// Mean silhouette. `k = 1` scores -1 so that it is only chosen when forced;
/// singleton clusters contribute 0.
pub fn silhouette(points: &[Vec<f64>], clustering: &Clustering) -> f64 {
    let k = clustering.k();
    if k < 2 {
        return -1.0;
    }
    let n = points.len();
    let mut sizes = vec![0usize; k];
    for &c in &clustering.assignment {
        sizes[c] += 1;
    }
    let mut total = 0.0;
    for i in 0..n {
        let own = clustering.assignment[i];
        if sizes[own] <= 1 {
            continue;
        }
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if j != i {
                sums[clustering.assignment[j]] += dist(&points[i], &points[j]);
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if !b.is_finite() {
            continue;
        }
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    total / n as f64
}

/// Number of distinct points (exact equality).
pub fn distinct_count(points: &[Vec<f64>]) -> usize {
    let mut seen: Vec<&Vec<f64>> = Vec::new();
    for p in points {
        if !seen.contains(&p) {
            seen.push(p);
        }
    }
    seen.len()
}

/// Cluster with `k` chosen in `1..=min(k_max, distinct points)` by maximum
/// mean silhouette, ties going to the smaller `k`.
pub fn select_clustering(points: &[Vec<f64>], k_max: usize, seed: u64) -> (Clustering, f64) {
    let k_hi = k_max.max(1).min(distinct_count(points));
    let mut best: Option<(Clustering, f64)> = None;
    for k in 1..=k_hi {
        let c = kmeans(points, k, seed);
        let s = silhouette(points, &c);
        if best.as_ref().is_none_or(|(_, bs)| s > *bs) {
            best = Some((c, s));
        }
    }
    best.expect("at least one point")
}
