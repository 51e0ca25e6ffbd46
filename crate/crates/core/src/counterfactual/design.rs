use crate::demand::{CompiledDemand, DemandModel};
use crate::error::{Error, Result};

/// Per-class score and rank of one candidate design among the candidate set.
#[derive(Debug, Clone)]
pub struct DesignScore {
    pub design: usize,
    pub scores: Vec<f64>,
    /// 1-based rank per class; lower is more preferred. Ranks within each
    /// class are a permutation of 1..=N.
    pub ranks: Vec<usize>,
    pub rank_gap: usize,
}

/// Scores unseen feature vectors through the frozen item projection: the
/// class-c score is the inner product of the design's normalized t-net
/// output with the class's grand-mean user projection (δ off). Ranks are
/// computed within the candidate set, ties by candidate index.
pub fn score_new_designs(
    model: &DemandModel,
    compiled: &CompiledDemand,
    candidates: &[Vec<f64>],
) -> Result<Vec<DesignScore>> {
    if candidates.is_empty() {
        return Err(Error::contract("empty candidate set"));
    }
    if !model.config.taste_enabled {
        return Err(Error::contract("design scoring requires the taste channel"));
    }
    for (i, x) in candidates.iter().enumerate() {
        if x.len() != model.config.item_dim {
            return Err(Error::shape(
                format!("design {i} feature width"),
                model.config.item_dim,
                x.len(),
            ));
        }
    }
    let c_n = compiled.n_classes;
    let k = compiled.taste_rank;
    // grand-mean user projection per class
    let mut r_bar = vec![0.0; c_n * k];
    for i in 0..compiled.n_consumers {
        for c in 0..c_n {
            for (acc, v) in r_bar[c * k..(c + 1) * k].iter_mut().zip(compiled.r_of(i, c)) {
                *acc += v;
            }
        }
    }
    for v in &mut r_bar {
        *v /= compiled.n_consumers as f64;
    }

    let n = candidates.len();
    let mut scores = vec![vec![0.0; n]; c_n];
    for (d, x) in candidates.iter().enumerate() {
        for c in 0..c_n {
            let t = model.item_taste(c, x).map_err(|_| {
                Error::contract(format!("t-net produced a zero vector for design {d}"))
            })?;
            scores[c][d] = r_bar[c * k..(c + 1) * k]
                .iter()
                .zip(&t)
                .map(|(a, b)| a * b)
                .sum();
        }
    }
    let mut ranks = vec![vec![0usize; n]; c_n];
    for c in 0..c_n {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            scores[c][b]
                .partial_cmp(&scores[c][a])
                .expect("finite score")
                .then(a.cmp(&b))
        });
        for (pos, &d) in order.iter().enumerate() {
            ranks[c][d] = pos + 1;
        }
    }
    Ok((0..n)
        .map(|d| {
            let rs: Vec<usize> = (0..c_n).map(|c| ranks[c][d]).collect();
            let gap = if c_n > 1 {
                rs[0].abs_diff(rs[1])
            } else {
                0
            };
            DesignScore {
                design: d,
                scores: (0..c_n).map(|c| scores[c][d]).collect(),
                ranks: rs,
                rank_gap: gap,
            }
        })
        .collect())
}

/// Kendall rank correlation between two rankings (pairwise concordance).
pub fn kendall_tau(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            let x = (a[i] as i64 - a[j] as i64).signum();
            let y = (b[i] as i64 - b[j] as i64).signum();
            if x * y > 0 {
                concordant += 1;
            } else if x * y < 0 {
                discordant += 1;
            }
        }
    }
    (concordant - discordant) as f64 / (n * (n - 1) / 2) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demand::{ChoiceEvent, ChoicePanel, DemandConfig};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn world(identical_classes: bool, seed: u64) -> (DemandModel, CompiledDemand) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (i_n, j_n) = (6, 4);
        let user_dim = 4;
        let item_dim = 3;
        let panel = ChoicePanel {
            consumer_ids: (0..i_n as u64).collect(),
            item_ids: (0..j_n as u64).collect(),
            consumer_embeddings: (0..i_n * user_dim).map(|_| rng.random::<f64>() - 0.5).collect(),
            user_dim,
            item_features: (0..j_n * item_dim).map(|_| rng.random::<f64>() - 0.5).collect(),
            item_dim,
            prices: vec![10.0; j_n],
            n_weeks: 1,
            events: vec![ChoiceEvent { consumer: 0, item: 0, week: 0 }],
            week_month: vec![8],
            lambda_hat: vec![0.0; j_n],
        };
        let config = DemandConfig {
            n_classes: 2,
            alpha_hidden: Some(4),
            rt_hidden: 5,
            taste_rank: 3,
            seasonal_rank: 2,
            ..DemandConfig::new(user_dim, item_dim)
        };
        let mut model = DemandModel::init(config, &mut rng).unwrap();
        if identical_classes {
            let first = model.classes[0].clone();
            model.classes[1] = first;
        }
        let compiled = CompiledDemand::compile(&model, &panel).unwrap();
        (model, compiled)
    }

    fn candidates(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..dim).map(|_| rng.random::<f64>() - 0.5).collect())
            .collect()
    }

    #[test]
    fn ranks_are_permutations() {
        let (model, compiled) = world(false, 61);
        let cands = candidates(10, 3, 62);
        let scores = score_new_designs(&model, &compiled, &cands).unwrap();
        for c in 0..2 {
            let mut ranks: Vec<usize> = scores.iter().map(|s| s.ranks[c]).collect();
            ranks.sort_unstable();
            assert_eq!(ranks, (1..=10).collect::<Vec<_>>());
        }
    }

    #[test]
    fn duplicated_candidate_gets_adjacent_ranks() {
        let (model, compiled) = world(false, 63);
        let mut cands = candidates(5, 3, 64);
        let dup = cands[2].clone();
        cands.push(dup);
        let scores = score_new_designs(&model, &compiled, &cands).unwrap();
        for c in 0..2 {
            assert_eq!(scores[2].scores[c], scores[5].scores[c]);
            // identical scores tie-break by index: ranks adjacent
            assert_eq!(scores[5].ranks[c], scores[2].ranks[c] + 1);
        }
    }

    #[test]
    fn identical_classes_have_zero_rank_gap() {
        let (model, compiled) = world(true, 65);
        let cands = candidates(8, 3, 66);
        let scores = score_new_designs(&model, &compiled, &cands).unwrap();
        for s in &scores {
            assert_eq!(s.rank_gap, 0);
        }
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let (model, compiled) = world(false, 67);
        let cands = vec![vec![0.0; 2]];
        assert!(score_new_designs(&model, &compiled, &cands).is_err());
    }

    #[test]
    fn kendall_tau_extremes() {
        assert_eq!(kendall_tau(&[1, 2, 3, 4], &[1, 2, 3, 4]), 1.0);
        assert_eq!(kendall_tau(&[1, 2, 3, 4], &[4, 3, 2, 1]), -1.0);
    }
}
