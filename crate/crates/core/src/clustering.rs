//! K-means over semantic node vectors. Cluster centroids are the latent
//! concept representations shared by every member node.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
    /// Independent k-means++ restarts; the lowest-inertia run is kept.
    pub n_init: usize,
    /// Cluster unit-length rows; centroids are still means of raw rows.
    pub normalize_before_clustering: bool,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            k: 1200,
            max_iter: 100,
            tol: 1e-4,
            seed: 0,
            n_init: 10,
            normalize_before_clustering: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub assignment: Vec<usize>,
    pub centroids: Array2<f64>,
    /// Sum of squared distances of every point to its assigned centroid.
    pub inertia: f64,
    /// Inertia after each Lloyd iteration.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid, ties broken by the lowest cluster id.
fn nearest(point: ArrayView1<f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.axis_iter(Axis(0)).enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init(data: ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = data.nrows();
    let mut centroids = Array2::zeros((k, data.ncols()));
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).assign(&data.row(first));
    let mut closest: Vec<f64> = data
        .axis_iter(Axis(0))
        .map(|p| sq_dist(p, data.row(first)))
        .collect();
    for c in 1..k {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &d) in closest.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centroids.row_mut(c).assign(&data.row(pick));
        for (i, p) in data.axis_iter(Axis(0)).enumerate() {
            closest[i] = closest[i].min(sq_dist(p, data.row(pick)));
        }
    }
    centroids
}

/// Means of member rows; empty clusters keep their previous centroid.
fn update_centroids(data: ArrayView2<f64>, assignment: &[usize], previous: &Array2<f64>) -> Array2<f64> {
    let k = previous.nrows();
    let mut sums = Array2::zeros(previous.dim());
    let mut counts = vec![0usize; k];
    for (i, &c) in assignment.iter().enumerate() {
        sums.row_mut(c).scaled_add(1.0, &data.row(i));
        counts[c] += 1;
    }
    for c in 0..k {
        if counts[c] > 0 {
            let mut row = sums.row_mut(c);
            row /= counts[c] as f64;
        } else {
            sums.row_mut(c).assign(&previous.row(c));
        }
    }
    sums
}

fn inertia_of(data: ArrayView2<f64>, assignment: &[usize], centroids: &Array2<f64>) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(i, &c)| sq_dist(data.row(i), centroids.row(c)))
        .sum()
}

/// Moves the point farthest from its centroid into each empty cluster.
fn reseed_empty(data: ArrayView2<f64>, assignment: &mut [usize], centroids: &mut Array2<f64>) {
    let k = centroids.nrows();
    let mut counts = vec![0usize; k];
    for &c in assignment.iter() {
        counts[c] += 1;
    }
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        // Identical points move together so they never end up split.
        let twins = |i: usize, assignment: &[usize]| -> Vec<usize> {
            (0..assignment.len())
                .filter(|&j| assignment[j] == assignment[i] && data.row(j) == data.row(i))
                .collect()
        };
        let mut far: Option<Vec<usize>> = None;
        let mut far_d = 0.0;
        for (i, &c) in assignment.iter().enumerate() {
            if counts[c] < 2 {
                continue;
            }
            let d = sq_dist(data.row(i), centroids.row(c));
            if d > far_d {
                let group = twins(i, assignment);
                if group.len() < counts[c] {
                    far = Some(group);
                    far_d = d;
                }
            }
        }
        // Only duplicate points remain; the cluster stays empty.
        let Some(group) = far else { continue };
        let source = assignment[group[0]];
        counts[source] -= group.len();
        counts[empty] = group.len();
        centroids.row_mut(empty).assign(&data.row(group[0]));
        for j in group {
            assignment[j] = empty;
        }
    }
}

/// Lloyd's algorithm with k-means++ seeding. Stops when the relative
/// inertia improvement falls below `tol`, the assignment is stable, or
/// `max_iter` iterations ran.
pub fn kmeans(data: ArrayView2<f64>, k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<ClusterAssignment> {
    let n = data.nrows();
    if k == 0 || k > n {
        return Err(Error::Argument(format!("k = {k} must be in [1, {n}]")));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite value in clustering input".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(data, k, &mut rng);
    let mut assignment: Vec<usize> = vec![usize::MAX; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iter.max(1) {
        iterations += 1;
        let mut next: Vec<usize> = (0..n)
            .into_par_iter()
            .map(|i| nearest(data.row(i), &centroids).0)
            .collect();
        reseed_empty(data, &mut next, &mut centroids);
        let stable = next == assignment;
        assignment = next;
        centroids = update_centroids(data, &assignment, &centroids);
        let inertia = inertia_of(data, &assignment, &centroids);
        let improvement = trace.last().map(|&prev: &f64| {
            if prev > 0.0 {
                (prev - inertia) / prev
            } else {
                0.0
            }
        });
        trace.push(inertia);
        if stable || inertia == 0.0 || improvement.is_some_and(|r| r < tol) {
            break;
        }
    }
    Ok(ClusterAssignment {
        inertia: *trace.last().expect("at least one iteration"),
        assignment,
        centroids,
        inertia_trace: trace,
        iterations,
    })
}

/// Best of `n_init` runs. Restart 0 uses `seed` itself, so `n_init = 1`
/// is exactly [`kmeans`]; ties keep the earliest restart.
pub fn kmeans_restarts(
    data: ArrayView2<f64>,
    k: usize,
    seed: u64,
    n_init: usize,
    max_iter: usize,
    tol: f64,
) -> Result<ClusterAssignment> {
    let mut best = kmeans(data, k, seed, max_iter, tol)?;
    for r in 1..n_init as u64 {
        let run = kmeans(data, k, seed ^ r.wrapping_mul(0x9E37_79B9_7F4A_7C15), max_iter, tol)?;
        if run.inertia < best.inertia {
            best = run;
        }
    }
    Ok(best)
}

/// Runs k-means per `cfg` on the rows of `embeddings`.
pub fn cluster(embeddings: ArrayView2<f64>, cfg: &KMeansConfig) -> Result<ClusterAssignment> {
    if cfg.n_init == 0 {
        return Err(Error::Config("n_init must be positive".into()));
    }
    if !cfg.normalize_before_clustering {
        return kmeans_restarts(embeddings, cfg.k, cfg.seed, cfg.n_init, cfg.max_iter, cfg.tol);
    }
    let mut unit = embeddings.to_owned();
    for mut row in unit.axis_iter_mut(Axis(0)) {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    let mut result = kmeans_restarts(unit.view(), cfg.k, cfg.seed, cfg.n_init, cfg.max_iter, cfg.tol)?;
    result.centroids = update_centroids(embeddings, &result.assignment, &result.centroids);
    result.inertia = inertia_of(embeddings, &result.assignment, &result.centroids);
    Ok(result)
}

impl ClusterAssignment {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn cluster_of(&self, node: usize) -> Result<usize> {
        self.assignment
            .get(node)
            .copied()
            .ok_or_else(|| Error::Lookup(format!("node {node} has no cluster assignment")))
    }

    /// Centroid of the node's cluster.
    pub fn latent_concept(&self, node: usize) -> Result<ArrayView1<'_, f64>> {
        Ok(self.centroids.row(self.cluster_of(node)?))
    }

    /// Row `i` is the latent concept vector of node `i`.
    pub fn latent_matrix(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.assignment.len(), self.centroids.ncols()));
        for (i, &c) in self.assignment.iter().enumerate() {
            out.row_mut(i).assign(&self.centroids.row(c));
        }
        out
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &c in &self.assignment {
            sizes[c] += 1;
        }
        sizes
    }

    /// Maps cluster size to the number of clusters of that size.
    pub fn size_histogram(&self) -> std::collections::BTreeMap<usize, usize> {
        let mut hist = std::collections::BTreeMap::new();
        for s in self.sizes() {
            *hist.entry(s).or_insert(0) += 1;
        }
        hist
    }

    /// Recomputes inertia from scratch against `data`.
    pub fn recompute_inertia(&self, data: ArrayView2<f64>) -> f64 {
        inertia_of(data, &self.assignment, &self.centroids)
    }

    /// Exact member means for every non-empty cluster.
    pub fn member_means(&self, data: ArrayView2<f64>) -> Vec<Option<Array1<f64>>> {
        let sizes = self.sizes();
        let mut sums = Array2::<f64>::zeros(self.centroids.dim());
        for (i, &c) in self.assignment.iter().enumerate() {
            sums.row_mut(c).scaled_add(1.0, &data.row(i));
        }
        (0..self.k())
            .map(|c| (sizes[c] > 0).then(|| sums.row(c).mapv(|v| v / sizes[c] as f64)))
            .collect()
    }
}
