use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::parallel::{map_chunks, ExecMode};

/// Cluster assignment for a fixed point set.
#[derive(Debug, Clone)]
pub struct Partition {
    /// Label per point, in 0..k.
    pub labels: Vec<usize>,
    pub k: usize,
    pub seed: u64,
    /// Sum of squared distances to assigned centroids.
    pub inertia: f64,
    /// Mean silhouette; `None` when k = 1.
    pub silhouette: Option<f64>,
    pub centroids: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding. Iterates to an assignment
/// fixpoint or 300 rounds; an emptied cluster is re-seeded from the point
/// farthest from its centroid. Euclidean distance (monotone in cosine for
/// unit-norm embeddings).
pub fn kmeans(points: &[f64], dim: usize, k: usize, seed: u64) -> Result<Partition> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(Error::shape("kmeans points", format!("multiple of {dim}"), points.len()));
    }
    let n = points.len() / dim;
    let distinct = count_distinct(points, dim, n);
    if k == 0 || k > distinct {
        return Err(Error::contract(format!(
            "k = {k} must be in 1..={distinct} (distinct points)"
        )));
    }
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding
    let mut centroids = vec![0.0; k * dim];
    let first = rng.random_range(0..n);
    centroids[..dim].copy_from_slice(row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centroids[..dim])).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        };
        centroids[c * dim..(c + 1) * dim].copy_from_slice(row(next));
        for i in 0..n {
            let d = sq_dist(row(i), &centroids[c * dim..(c + 1) * dim]);
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }

    let mut labels = vec![0usize; n];
    for _round in 0..300 {
        // assignment step, chunked for determinism under parallelism
        let new_labels: Vec<usize> = map_chunks(n, 256, ExecMode::Auto, |range| {
            let mut out = Vec::with_capacity(range.len());
            for i in range {
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for c in 0..k {
                    let d = sq_dist(row(i), &centroids[c * dim..(c + 1) * dim]);
                    if d < best_d {
                        best_d = d;
                        best = c;
                    }
                }
                out.push(best);
            }
            out
        })
        .into_iter()
        .flatten()
        .collect();

        let changed = new_labels != labels;
        labels = new_labels;

        // update step
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            let c = labels[i];
            for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // re-seed from the point farthest from its assigned centroid
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(row(a), &centroids[labels[a] * dim..(labels[a] + 1) * dim]);
                        let db = sq_dist(row(b), &centroids[labels[b] * dim..(labels[b] + 1) * dim]);
                        da.partial_cmp(&db).expect("finite distance")
                    })
                    .expect("non-empty points");
                centroids[c * dim..(c + 1) * dim].copy_from_slice(row(far));
                labels[far] = c;
            } else {
                for (j, s) in sums[c * dim..(c + 1) * dim].iter().enumerate() {
                    centroids[c * dim + j] = s / counts[c] as f64;
                }
            }
        }
        if !changed && _round > 0 {
            break;
        }
    }

    let inertia: f64 = (0..n)
        .map(|i| sq_dist(row(i), &centroids[labels[i] * dim..(labels[i] + 1) * dim]))
        .sum();
    let sil = if k >= 2 {
        Some(silhouette(points, dim, &labels, k)?)
    } else {
        None
    };
    Ok(Partition {
        labels,
        k,
        seed,
        inertia,
        silhouette: sil,
        centroids,
    })
}

fn count_distinct(points: &[f64], dim: usize, n: usize) -> usize {
    let mut rows: Vec<&[f64]> = (0..n).map(|i| &points[i * dim..(i + 1) * dim]).collect();
    rows.sort_by(|a, b| a.partial_cmp(b).expect("finite coordinates"));
    rows.dedup();
    rows.len()
}

/// Mean silhouette score: per point, (b − a)/max(a, b) where a is the mean
/// distance to its own cluster and b the mean distance to the nearest other
/// cluster. Singleton clusters score 0 by convention. Requires k ≥ 2.
pub fn silhouette(points: &[f64], dim: usize, labels: &[usize], k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::contract("silhouette requires k >= 2"));
    }
    let n = labels.len();
    if points.len() != n * dim {
        return Err(Error::shape("silhouette points", n * dim, points.len()));
    }
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let counts = {
        let mut c = vec![0usize; k];
        for &l in labels {
            c[l] += 1;
        }
        c
    };
    let scores: Vec<f64> = map_chunks(n, 128, ExecMode::Auto, |range| {
        let mut out = Vec::with_capacity(range.len());
        for i in range {
            if counts[labels[i]] <= 1 {
                out.push(0.0);
                continue;
            }
            let mut dist_sum = vec![0.0f64; k];
            for j in 0..n {
                if j != i {
                    dist_sum[labels[j]] += sq_dist(row(i), row(j)).sqrt();
                }
            }
            let own = labels[i];
            let a = dist_sum[own] / (counts[own] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != own && counts[c] > 0)
                .map(|c| dist_sum[c] / counts[c] as f64)
                .fold(f64::INFINITY, f64::min);
            out.push(if a.max(b) > 0.0 { (b - a) / a.max(b) } else { 0.0 });
        }
        out
    })
    .into_iter()
    .flatten()
    .collect();
    Ok(scores.iter().sum::<f64>() / n as f64)
}
