use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::linalg::sq_dist;
use crate::numcore::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub clusters: usize,
    /// Mini-batch size; `None` means `min(256, N)`. A size of at least `N`
    /// runs exact Lloyd iterations.
    pub batch_size: Option<usize>,
    pub iters: usize,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(clusters: usize, seed: u64) -> Self {
        Self {
            clusters,
            batch_size: None,
            iters: 50,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub centroids: Tensor,
    pub sizes: Vec<usize>,
    /// Sum of squared distances to the assigned centroid.
    pub objective: f64,
    /// Objective of the k-means++ seeds.
    pub seeding_objective: f64,
    /// Objective after each Lloyd step; empty in mini-batch mode.
    pub objective_history: Vec<f64>,
}

impl ClusterAssignment {
    pub fn clusters(&self) -> usize {
        self.sizes.len()
    }
}

/// Nearest centroid per point (lowest index on ties) and its squared distance.
fn assign(points: &Tensor, centroids: &[Vec<f32>]) -> Vec<(usize, f64)> {
    (0..points.rows())
        .into_par_iter()
        .map(|i| nearest(points.row(i), centroids))
        .collect()
}

fn nearest(x: &[f32], centroids: &[Vec<f32>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// k-means++ over the rows listed in `pool`.
fn seed_plus_plus(points: &Tensor, pool: &[usize], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
    let mut chosen = vec![pool[rng.random_range(0..pool.len())]];
    let mut d2: Vec<f64> = pool
        .iter()
        .map(|&i| sq_dist(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(w) => pool[w.sample(rng)],
            // Every remaining pool point coincides with a seed.
            Err(_) => {
                let free: Vec<usize> = pool.iter().copied().filter(|i| !chosen.contains(i)).collect();
                free[rng.random_range(0..free.len())]
            }
        };
        chosen.push(next);
        for (d, &i) in d2.iter_mut().zip(pool) {
            *d = d.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    chosen.iter().map(|&i| points.row(i).to_vec()).collect()
}

/// Moves every empty centroid onto the point farthest from its own centroid,
/// then reassigns. Each move can only lower the objective.
fn fill_empty(points: &Tensor, centroids: &mut [Vec<f32>], mut assigned: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    let k = centroids.len();
    let mut pins: Vec<(usize, usize)> = Vec::new();
    for _ in 0..k {
        let mut sizes = vec![0usize; k];
        for &(l, _) in &assigned {
            sizes[l] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            break;
        };
        // Farthest point among clusters that can spare one.
        let far = assigned
            .iter()
            .enumerate()
            .filter(|(_, (l, _))| sizes[*l] > 1)
            .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i);
        let Some(far) = far else { break };
        centroids[empty] = points.row(far).to_vec();
        assigned = assign(points, centroids);
        // Coincident points can tie with an existing centroid; pin each
        // chosen point to its new cluster.
        pins.push((far, empty));
        for &(i, j) in &pins {
            assigned[i] = (j, 0.0);
        }
    }
    assigned
}

fn objective(assigned: &[(usize, f64)]) -> f64 {
    assigned.iter().map(|&(_, d)| d).sum()
}

fn finish(
    points: &Tensor,
    centroids: Vec<Vec<f32>>,
    assigned: Vec<(usize, f64)>,
    seeding_objective: f64,
    objective_history: Vec<f64>,
) -> Result<ClusterAssignment> {
    let k = centroids.len();
    let mut sizes = vec![0usize; k];
    for &(l, _) in &assigned {
        sizes[l] += 1;
    }
    let f = points.cols();
    let flat: Vec<f32> = centroids.into_iter().flatten().collect();
    Ok(ClusterAssignment {
        objective: objective(&assigned),
        labels: assigned.into_iter().map(|(l, _)| l).collect(),
        centroids: Tensor::matrix(k, f, flat)?,
        sizes,
        seeding_objective,
        objective_history,
    })
}

fn lloyd_means(points: &Tensor, assigned: &[(usize, f64)], centroids: &mut [Vec<f32>]) {
    let f = points.cols();
    let k = centroids.len();
    let mut sums = vec![vec![0.0f64; f]; k];
    let mut counts = vec![0usize; k];
    for (i, &(l, _)) in assigned.iter().enumerate() {
        counts[l] += 1;
        for (s, &v) in sums[l].iter_mut().zip(points.row(i)) {
            *s += v as f64;
        }
    }
    for j in 0..k {
        if counts[j] > 0 {
            for (c, s) in centroids[j].iter_mut().zip(&sums[j]) {
                *c = (s / counts[j] as f64) as f32;
            }
        }
    }
}

/// Mini-batch k-means with k-means++ seeding on a subsample.
pub fn minibatch_kmeans(points: &Tensor, cfg: &KMeansConfig) -> Result<ClusterAssignment> {
    let (n, _) = points.require_matrix("clustering points")?;
    points.ensure_finite("clustering points")?;
    let k = cfg.clusters;
    if k == 0 || n < k {
        return Err(Error::Config(format!("cannot form {k} clusters from {n} points")));
    }
    let batch = cfg.batch_size.unwrap_or(256).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let pool_size = n.min((3 * batch).max(10 * k));
    let mut pool = index::sample(&mut rng, n, pool_size).into_vec();
    pool.sort_unstable();
    let seeds = seed_plus_plus(points, &pool, k, &mut rng);
    let seeded = assign(points, &seeds);
    let seeding_objective = objective(&seeded);

    let mut centroids = seeds.clone();
    let mut history = Vec::new();
    if batch >= n {
        let mut assigned = fill_empty(points, &mut centroids, seeded.clone());
        for _ in 0..cfg.iters {
            history.push(objective(&assigned));
            lloyd_means(points, &assigned, &mut centroids);
            let raw = assign(points, &centroids);
            let next = fill_empty(points, &mut centroids, raw);
            let unchanged = next.iter().zip(&assigned).all(|(a, b)| a.0 == b.0);
            assigned = next;
            if unchanged {
                break;
            }
        }
        history.push(objective(&assigned));
    } else {
        let mut counts = vec![0usize; k];
        for _ in 0..cfg.iters {
            let idx = index::sample(&mut rng, n, batch).into_vec();
            let nearest_of: Vec<usize> = idx.iter().map(|&i| nearest(points.row(i), &centroids).0).collect();
            for (&i, &j) in idx.iter().zip(&nearest_of) {
                counts[j] += 1;
                let eta = 1.0 / counts[j] as f32;
                for (c, &x) in centroids[j].iter_mut().zip(points.row(i)) {
                    *c += eta * (x - *c);
                }
            }
        }
    }

    let raw = assign(points, &centroids);
    let assigned = fill_empty(points, &mut centroids, raw);
    if objective(&assigned) <= seeding_objective {
        return finish(points, centroids, assigned, seeding_objective, history);
    }
    let mut centroids = seeds;
    let assigned = fill_empty(points, &mut centroids, seeded);
    finish(points, centroids, assigned, seeding_objective, history)
}
