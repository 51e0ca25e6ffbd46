use crate::demand::{CompiledDemand, MarketView};
use crate::error::{Error, Result};
use crate::market::{solve_bertrand_nash, welfare_delta, Ownership};

#[derive(Debug, Clone)]
pub struct CollapseResult {
    pub sigma_steps: f64,
    pub delta_profit_pct: f64,
    pub delta_cs_per_consumer: f64,
    pub delta_total_welfare: f64,
    pub delta_mean_price_pct: f64,
    /// Mean within-class cosine of item projections to the class centroid,
    /// before and after the collapse.
    pub cosine_before: Vec<f64>,
    pub cosine_after: Vec<f64>,
    pub converged: bool,
}

/// Pushes each class's item taste projections toward the class centroid by
/// `sigma_steps` times the within-class standard deviation of
/// centroid distances (capped at full collapse), re-normalizes onto the
/// sphere, and re-solves the equilibrium on the flattened taste space.
/// The step is applied pre-normalization since t_j^c lives on the sphere.
pub fn collapse_taste(
    compiled: &CompiledDemand,
    view: &MarketView,
    marginal_costs: &[f64],
    ownership: Ownership,
    sigma_steps: f64,
    market_size: f64,
) -> Result<CollapseResult> {
    if sigma_steps < 0.0 {
        return Err(Error::contract("sigma_steps must be non-negative"));
    }
    let n = view.items.len();
    let k = compiled.taste_rank;
    if k == 0 {
        return Err(Error::contract("collapse requires the taste channel"));
    }
    if marginal_costs.len() != n {
        return Err(Error::shape("collapse marginal costs", n, marginal_costs.len()));
    }

    let mut t_new = vec![0.0; compiled.n_classes * n * k];
    let mut cosine_before = Vec::with_capacity(compiled.n_classes);
    let mut cosine_after = Vec::with_capacity(compiled.n_classes);
    for c in 0..compiled.n_classes {
        // class centroid of the current projections
        let mut centroid = vec![0.0; k];
        for &j in &view.items {
            for (ce, v) in centroid.iter_mut().zip(compiled.t_of(c, j)) {
                *ce += v;
            }
        }
        for ce in &mut centroid {
            *ce /= n as f64;
        }
        let cnorm = centroid.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dists: Vec<f64> = view
            .items
            .iter()
            .map(|&j| {
                compiled
                    .t_of(c, j)
                    .iter()
                    .zip(&centroid)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let mean_d = dists.iter().sum::<f64>() / n as f64;
        let sd = (dists.iter().map(|d| (d - mean_d) * (d - mean_d)).sum::<f64>() / n as f64).sqrt();
        let step_len = sigma_steps * sd;

        let mut cos_b = 0.0;
        let mut cos_a = 0.0;
        for (slot, &j) in view.items.iter().enumerate() {
            let t = compiled.t_of(c, j);
            if cnorm > 0.0 {
                cos_b += t.iter().zip(&centroid).map(|(a, b)| a * b).sum::<f64>() / cnorm;
            }
            let out = &mut t_new[(c * n + slot) * k..(c * n + slot + 1) * k];
            if step_len == 0.0 || dists[slot] <= 1e-12 {
                out.copy_from_slice(t);
            } else {
                let step = step_len.min(dists[slot]);
                let scale = step / dists[slot];
                let mut moved: Vec<f64> = t
                    .iter()
                    .zip(&centroid)
                    .map(|(tv, cv)| tv + scale * (cv - tv))
                    .collect();
                let norm = moved.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm <= 0.0 {
                    return Err(Error::contract(format!(
                        "collapse produced a zero taste vector for item slot {slot}"
                    )));
                }
                for v in &mut moved {
                    *v /= norm;
                }
                out.copy_from_slice(&moved);
            }
            if cnorm > 0.0 {
                cos_a += out.iter().zip(&centroid).map(|(a, b)| a * b).sum::<f64>() / cnorm;
            }
        }
        cosine_before.push(cos_b / n as f64);
        cosine_after.push(cos_a / n as f64);
    }

    // baseline equilibrium and collapsed equilibrium
    let base = solve_bertrand_nash(compiled, view, marginal_costs, ownership, &view.prices)?;
    let mut collapsed_view = view.clone();
    collapsed_view.t_override = Some(t_new);
    let coll = solve_bertrand_nash(compiled, &collapsed_view, marginal_costs, ownership, &view.prices)?;

    let base_view = view.with_prices(base.prices.clone());
    let coll_view = MarketView {
        prices: coll.prices.clone(),
        ..collapsed_view.clone()
    };
    let profit = |prices: &[f64], shares: &[f64]| -> f64 {
        prices
            .iter()
            .zip(shares)
            .zip(marginal_costs)
            .map(|((p, s), c)| (p - c) * s)
            .sum::<f64>()
            * market_size
    };
    let profit_base = profit(&base.prices, &base.shares);
    let profit_coll = profit(&coll.prices, &coll.shares);
    let welfare = welfare_delta(
        compiled,
        &base_view,
        &base.shares,
        &coll_view,
        &coll.shares,
        marginal_costs,
        marginal_costs,
        market_size,
    )?;
    let mean_p_base: f64 = base.prices.iter().sum::<f64>() / n as f64;
    let mean_p_coll: f64 = coll.prices.iter().sum::<f64>() / n as f64;
    Ok(CollapseResult {
        sigma_steps,
        delta_profit_pct: 100.0 * (profit_coll - profit_base) / profit_base,
        delta_cs_per_consumer: welfare.mean_cv,
        delta_total_welfare: welfare.total_welfare,
        delta_mean_price_pct: 100.0 * (mean_p_coll - mean_p_base) / mean_p_base,
        cosine_before,
        cosine_after,
        converged: base.converged && coll.converged,
    })
}
