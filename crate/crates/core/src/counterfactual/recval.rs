use std::collections::{HashMap, HashSet};

use crate::demand::CompiledDemand;
use crate::error::{Error, Result};
use crate::parallel::{map_chunks, ExecMode, CONSUMER_CHUNK};

#[derive(Debug, Clone, Copy, Default)]
pub struct SliceRates {
    pub all: f64,
    pub warm: f64,
    pub cold: f64,
}

#[derive(Debug, Clone)]
pub struct RecallReport {
    pub model: SliceRates,
    pub popularity: SliceRates,
    pub cf_default: SliceRates,
    pub cf_best: SliceRates,
    /// (neighbors, shrinkage, min co-count) of the best-of-grid filter.
    pub cf_best_config: (usize, f64, usize),
    pub skipped_users: usize,
}

/// Recall@k of the fitted taste channel against popularity and item-item
/// collaborative-filter baselines on the same split. Rankings use the
/// mixture-weighted taste score at a fixed price band (prices held fixed, so
/// only taste moves the ranking); warm = held-out items the user bought in
/// training, cold = the complement. Ties break by ascending item index.
pub fn recall_at_k(
    compiled: &CompiledDemand,
    train: &[(usize, usize)],
    heldout: &[(usize, usize)],
    k: usize,
) -> Result<RecallReport> {
    let j_n = compiled.n_items;
    if heldout.is_empty() {
        return Err(Error::contract("recall_at_k needs held-out events"));
    }
    for &(u, j) in train.iter().chain(heldout) {
        if u >= compiled.n_consumers || j >= j_n {
            return Err(Error::contract(format!("event ({u},{j}) out of range")));
        }
    }

    let mut train_items: HashMap<usize, HashSet<usize>> = HashMap::new();
    let mut pop = vec![0usize; j_n];
    for &(u, j) in train {
        train_items.entry(u).or_default().insert(j);
        pop[j] += 1;
    }
    let mut held: HashMap<usize, Vec<usize>> = HashMap::new();
    for &(u, j) in heldout {
        held.entry(u).or_default().push(j);
    }
    let mut users: Vec<usize> = held.keys().cloned().collect();
    users.sort_unstable();
    let skipped_users = compiled.n_consumers - users.len();

    // popularity ranking shared by all users
    let pop_rank = rank_desc(&pop.iter().map(|&c| c as f64).collect::<Vec<_>>());
    let top_pop: Vec<usize> = pop_rank[..k.min(j_n)].to_vec();

    // model scores per user: Σ_c π_c·(r_i^c · t_j^c)
    let model_rates = slice_rates(&users, &held, &train_items, |u| {
        let mut scores = vec![0.0; j_n];
        for c in 0..compiled.n_classes {
            let r = compiled.r_of(u, c);
            let w = compiled.pi[c];
            for (j, s) in scores.iter_mut().enumerate() {
                let t = compiled.t_of(c, j);
                *s += w * r.iter().zip(t).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        rank_desc(&scores)[..k.min(j_n)].to_vec()
    });
    let pop_rates = slice_rates(&users, &held, &train_items, |_| top_pop.clone());

    // item-item cosine collaborative filter over an 8-point tuning grid
    let co = co_counts(&train_items, j_n);
    let mut cf_default = SliceRates::default();
    let mut best: Option<(SliceRates, (usize, f64, usize))> = None;
    for &neighbors in &[10usize, 20] {
        for &shrink in &[0.0f64, 10.0] {
            for &min_co in &[1usize, 2] {
                let sims = similarity(&co, &pop, j_n, shrink, min_co, neighbors);
                let rates = slice_rates(&users, &held, &train_items, |u| {
                    let bought = &train_items.get(&u).cloned().unwrap_or_default();
                    let mut scores = vec![0.0; j_n];
                    for (j, s) in scores.iter_mut().enumerate() {
                        for &(nbr, sim) in &sims[j] {
                            if bought.contains(&nbr) {
                                *s += sim;
                            }
                        }
                    }
                    rank_desc(&scores)[..k.min(j_n)].to_vec()
                });
                if neighbors == 20 && shrink == 10.0 && min_co == 1 {
                    cf_default = rates;
                }
                let better = match &best {
                    None => true,
                    Some((b, _)) => rates.cold > b.cold,
                };
                if better {
                    best = Some((rates, (neighbors, shrink, min_co)));
                }
            }
        }
    }
    let (cf_best, cf_best_config) = best.expect("grid is non-empty");

    Ok(RecallReport {
        model: model_rates,
        popularity: pop_rates,
        cf_default,
        cf_best,
        cf_best_config,
        skipped_users,
    })
}

fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite score")
            .then(a.cmp(&b))
    });
    order
}

fn co_counts(train_items: &HashMap<usize, HashSet<usize>>, j_n: usize) -> Vec<u32> {
    let mut co = vec![0u32; j_n * j_n];
    for items in train_items.values() {
        let mut v: Vec<usize> = items.iter().cloned().collect();
        v.sort_unstable();
        for (a, &ja) in v.iter().enumerate() {
            for &jb in &v[a + 1..] {
                co[ja * j_n + jb] += 1;
                co[jb * j_n + ja] += 1;
            }
        }
    }
    co
}

fn similarity(
    co: &[u32],
    pop: &[usize],
    j_n: usize,
    shrink: f64,
    min_co: usize,
    neighbors: usize,
) -> Vec<Vec<(usize, f64)>> {
    (0..j_n)
        .map(|j| {
            let mut sims: Vec<(usize, f64)> = (0..j_n)
                .filter(|&l| l != j)
                .filter_map(|l| {
                    let c = co[j * j_n + l] as f64;
                    if (co[j * j_n + l] as usize) < min_co || c == 0.0 {
                        return None;
                    }
                    let denom = ((pop[j] as f64) * (pop[l] as f64)).sqrt() + shrink;
                    if denom > 0.0 {
                        Some((l, c / denom))
                    } else {
                        None
                    }
                })
                .collect();
            sims.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite sim").then(a.0.cmp(&b.0)));
            sims.truncate(neighbors);
            sims
        })
        .collect()
}

fn slice_rates<F>(
    users: &[usize],
    held: &HashMap<usize, Vec<usize>>,
    train_items: &HashMap<usize, HashSet<usize>>,
    top_k_of: F,
) -> SliceRates
where
    F: Fn(usize) -> Vec<usize> + Sync,
{
    let per_user: Vec<(Option<f64>, Option<f64>, Option<f64>)> =
        map_chunks(users.len(), CONSUMER_CHUNK, ExecMode::Auto, |range| {
            let mut out = Vec::with_capacity(range.len());
            for slot in range {
                let u = users[slot];
                let top: HashSet<usize> = top_k_of(u).into_iter().collect();
                let bought = train_items.get(&u).cloned().unwrap_or_default();
                let (mut warm_n, mut warm_hit, mut cold_n, mut cold_hit) = (0, 0, 0, 0);
                for &j in &held[&u] {
                    let hit = top.contains(&j) as usize;
                    if bought.contains(&j) {
                        warm_n += 1;
                        warm_hit += hit;
                    } else {
                        cold_n += 1;
                        cold_hit += hit;
                    }
                }
                let all_n = warm_n + cold_n;
                let all = if all_n > 0 {
                    Some((warm_hit + cold_hit) as f64 / all_n as f64)
                } else {
                    None
                };
                let warm = if warm_n > 0 {
                    Some(warm_hit as f64 / warm_n as f64)
                } else {
                    None
                };
                let cold = if cold_n > 0 {
                    Some(cold_hit as f64 / cold_n as f64)
                } else {
                    None
                };
                out.push((all, warm, cold));
            }
            out
        })
        .into_iter()
        .flatten()
        .collect();
    let mean = |sel: &dyn Fn(&(Option<f64>, Option<f64>, Option<f64>)) -> Option<f64>| -> f64 {
        let vals: Vec<f64> = per_user.iter().filter_map(sel).collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    SliceRates {
        all: mean(&|t| t.0),
        warm: mean(&|t| t.1),
        cold: mean(&|t| t.2),
    }
}
