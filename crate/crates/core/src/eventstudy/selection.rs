use super::cluster::{kmeans, Partition};
use crate::error::{Error, Result};

/// Outcome of silhouette-based K selection under a volume viability filter.
#[derive(Debug, Clone)]
pub struct KSelectionReport {
    pub chosen_k: usize,
    pub chosen: Partition,
    /// (k, silhouette, min cluster daily volume, passed filter)
    pub candidates: Vec<(usize, f64, f64, bool)>,
}

/// Picks the K with maximal silhouette among candidates whose every cluster
/// averages at least `min_daily_txn` daily transactions in the pre-shock
/// window. `unit_daily_txn[i]` is unit i's mean daily transaction count over
/// that window.
pub fn k_selection(
    points: &[f64],
    dim: usize,
    candidate_ks: &[usize],
    unit_daily_txn: &[f64],
    min_daily_txn: f64,
    seed: u64,
) -> Result<KSelectionReport> {
    let n = points.len() / dim;
    if unit_daily_txn.len() != n {
        return Err(Error::shape("k_selection unit volumes", n, unit_daily_txn.len()));
    }
    let mut candidates = Vec::new();
    let mut best: Option<(f64, Partition)> = None;
    for &k in candidate_ks {
        let part = kmeans(points, dim, k, seed)?;
        let sil = part.silhouette.unwrap_or(f64::NEG_INFINITY);
        let mut volume = vec![0.0; k];
        for (i, &label) in part.labels.iter().enumerate() {
            volume[label] += unit_daily_txn[i];
        }
        let min_volume = volume.iter().cloned().fold(f64::INFINITY, f64::min);
        let pass = min_volume >= min_daily_txn;
        candidates.push((k, sil, min_volume, pass));
        if pass {
            let better = match &best {
                None => true,
                Some((s, _)) => sil > *s,
            };
            if better {
                best = Some((sil, part));
            }
        }
    }
    match best {
        Some((_, part)) => Ok(KSelectionReport {
            chosen_k: part.k,
            chosen: part,
            candidates,
        }),
        None => Err(Error::Selection(format!(
            "no candidate K passed the {min_daily_txn}/day viability filter"
        ))),
    }
}

/// Seed-stability check: refit the partition under `n_seeds` initialisations,
/// map each to per-cluster effects via `effects_of`, and record the spread
/// (max − min) per seed.
#[derive(Debug, Clone)]
pub struct SeedStabilityReport {
    pub ranges: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
    pub p5: f64,
    pub p95: f64,
}

pub fn seed_stability<F>(
    points: &[f64],
    dim: usize,
    k: usize,
    n_seeds: usize,
    master_seed: u64,
    mut effects_of: F,
) -> Result<SeedStabilityReport>
where
    F: FnMut(&Partition) -> Result<Vec<f64>>,
{
    if n_seeds == 0 {
        return Err(Error::contract("seed_stability needs at least one seed"));
    }
    let mut ranges = Vec::with_capacity(n_seeds);
    for s in 0..n_seeds {
        let part = kmeans(points, dim, k, master_seed.wrapping_add(s as u64))?;
        let effects = effects_of(&part)?;
        let hi = effects.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = effects.iter().cloned().fold(f64::INFINITY, f64::min);
        ranges.push(hi - lo);
    }
    let mean = ranges.iter().sum::<f64>() / ranges.len() as f64;
    let sd = (ranges.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>()
        / ranges.len().max(1) as f64)
        .sqrt();
    let mut sorted = ranges.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite range"));
    let pct = |q: f64| sorted[((q * (sorted.len() - 1) as f64).round() as usize).min(sorted.len() - 1)];
    Ok(SeedStabilityReport {
        ranges,
        mean,
        sd,
        p5: pct(0.05),
        p95: pct(0.95),
    })
}
