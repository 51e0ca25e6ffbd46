use crate::demand::{CompiledDemand, MarketView};
use crate::error::{Error, Result};
use crate::eventstudy::kmeans;
use crate::market::{solve_bertrand_nash, Ownership};

#[derive(Debug, Clone)]
pub struct LadderResult {
    pub requested_segments: usize,
    /// Effective segment count after merging the under-10-consumer ones.
    pub segments: usize,
    pub merged: usize,
    pub profit_gain_pct: f64,
    pub mean_price_shift_pct: f64,
    pub converged: usize,
    pub solves: usize,
}

/// Personalized-pricing ladder: clusters consumers by k-means on the user
/// embedding, solves the multi-product Bertrand–Nash problem inside each
/// segment, and reports total-profit gains relative to uniform (N_s = 1)
/// pricing. Segments smaller than 10 consumers are merged into the nearest
/// centroid and reported.
pub fn segment_pricing_ladder(
    compiled: &CompiledDemand,
    view: &MarketView,
    marginal_costs: &[f64],
    ownership: Ownership,
    user_embeddings: &[f64],
    user_dim: usize,
    segment_counts: &[usize],
    seed: u64,
) -> Result<Vec<LadderResult>> {
    let n = view.items.len();
    if marginal_costs.len() != n {
        return Err(Error::shape("ladder marginal costs", n, marginal_costs.len()));
    }
    for &ns in segment_counts {
        if ns < 1 {
            return Err(Error::contract("segment counts must be >= 1"));
        }
    }
    // uniform benchmark
    let uniform = solve_bertrand_nash(compiled, view, marginal_costs, ownership, &view.prices)?;
    let i_total = view.consumers.len() as f64;
    let uniform_profit: f64 = uniform
        .prices
        .iter()
        .zip(&uniform.shares)
        .zip(marginal_costs)
        .map(|((p, s), c)| (p - c) * s)
        .sum::<f64>()
        * i_total;

    let mut out = Vec::with_capacity(segment_counts.len());
    for &ns in segment_counts {
        if ns == 1 {
            out.push(LadderResult {
                requested_segments: 1,
                segments: 1,
                merged: 0,
                profit_gain_pct: 0.0,
                mean_price_shift_pct: 0.0,
                converged: if uniform.converged { 1 } else { 0 },
                solves: 1,
            });
            continue;
        }
        // cluster the view's consumers on their embeddings
        let emb: Vec<f64> = view
            .consumers
            .iter()
            .flat_map(|&i| user_embeddings[i * user_dim..(i + 1) * user_dim].iter().cloned())
            .collect();
        let part = kmeans(&emb, user_dim, ns.min(view.consumers.len()), seed)?;
        let mut labels = part.labels.clone();

        // merge sub-10 segments into the nearest other centroid
        let mut merged = 0usize;
        loop {
            let mut counts = vec![0usize; part.k];
            for &l in &labels {
                counts[l] += 1;
            }
            let small = (0..part.k).find(|&g| counts[g] > 0 && counts[g] < 10);
            let g = match small {
                Some(g) => g,
                None => break,
            };
            // nearest other non-empty centroid
            let target = (0..part.k)
                .filter(|&h| h != g && counts[h] > 0)
                .min_by(|&a, &b| {
                    let da = centroid_dist(&part.centroids, user_dim, g, a);
                    let db = centroid_dist(&part.centroids, user_dim, g, b);
                    da.partial_cmp(&db).expect("finite distance")
                });
            let target = match target {
                Some(t) => t,
                None => break,
            };
            for l in labels.iter_mut() {
                if *l == g {
                    *l = target;
                }
            }
            merged += 1;
        }

        let mut segments: Vec<Vec<usize>> = vec![Vec::new(); part.k];
        for (slot, &l) in labels.iter().enumerate() {
            segments[l].push(view.consumers[slot]);
        }
        segments.retain(|s| !s.is_empty());

        let mut total_profit = 0.0;
        let mut converged = 0usize;
        let mut price_shift_acc = 0.0;
        for seg in &segments {
            let seg_view = MarketView {
                consumers: seg.clone(),
                ..view.clone()
            };
            let solve = solve_bertrand_nash(compiled, &seg_view, marginal_costs, ownership, &uniform.prices)?;
            if solve.converged {
                converged += 1;
            }
            let seg_profit: f64 = solve
                .prices
                .iter()
                .zip(&solve.shares)
                .zip(marginal_costs)
                .map(|((p, s), c)| (p - c) * s)
                .sum::<f64>()
                * seg.len() as f64;
            total_profit += seg_profit;
            let seg_shift: f64 = solve
                .prices
                .iter()
                .zip(&uniform.prices)
                .map(|(pg, pu)| (pg - pu) / pu)
                .sum::<f64>()
                / n as f64;
            price_shift_acc += seg_shift * seg.len() as f64;
        }
        out.push(LadderResult {
            requested_segments: ns,
            segments: segments.len(),
            merged,
            profit_gain_pct: 100.0 * (total_profit - uniform_profit) / uniform_profit,
            mean_price_shift_pct: 100.0 * price_shift_acc / i_total,
            converged,
            solves: segments.len(),
        });
    }
    Ok(out)
}

fn centroid_dist(centroids: &[f64], dim: usize, a: usize, b: usize) -> f64 {
    centroids[a * dim..(a + 1) * dim]
        .iter()
        .zip(&centroids[b * dim..(b + 1) * dim])
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// Total profit when every consumer gets individual prices: the upper bound
/// of the ladder, computable on tiny instances.
pub fn per_consumer_pricing_bound(
    compiled: &CompiledDemand,
    view: &MarketView,
    marginal_costs: &[f64],
    ownership: Ownership,
) -> Result<f64> {
    let mut total = 0.0;
    for &i in &view.consumers {
        let single = MarketView {
            consumers: vec![i],
            ..view.clone()
        };
        let solve = solve_bertrand_nash(compiled, &single, marginal_costs, ownership, &view.prices)?;
        total += solve
            .prices
            .iter()
            .zip(&solve.shares)
            .zip(marginal_costs)
            .map(|((p, s), c)| (p - c) * s)
            .sum::<f64>();
    }
    Ok(total)
}
