use super::derivatives::share_derivatives;
use super::inversion::invert_markups;
use super::{MarketState, Ownership};
use crate::demand::{CompiledDemand, MarketView};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct BnSolve {
    pub prices: Vec<f64>,
    pub shares: Vec<f64>,
    pub markups: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

const DAMPING: f64 = 0.5;
const PRICE_TOL: f64 = 1e-8;
const MAX_ITER: usize = 500;

/// Damped fixed-point solve of the multi-product Bertrand–Nash first-order
/// condition: p ← (1−ω)p + ω(mc − Δ(p)⁻¹S(p)) with ω = 0.5, until the max
/// absolute price change falls below 1e-8 or 500 iterations. Non-convergence
/// returns the last iterate with the flag down.
pub fn solve_bertrand_nash(
    compiled: &CompiledDemand,
    view: &MarketView,
    marginal_costs: &[f64],
    ownership: Ownership,
    p_init: &[f64],
) -> Result<BnSolve> {
    let n = view.items.len();
    if marginal_costs.len() != n || p_init.len() != n {
        return Err(Error::shape("solve_bertrand_nash", n, marginal_costs.len()));
    }
    if marginal_costs.iter().any(|mc| !mc.is_finite()) {
        return Err(Error::contract("marginal costs must be finite"));
    }
    if p_init.iter().any(|p| !(*p > 0.0)) {
        return Err(Error::contract("initial prices must be positive"));
    }
    let mut prices = p_init.to_vec();
    let mut work = view.clone();
    for iter in 0..MAX_ITER {
        work.prices.clone_from(&prices);
        let (shares, jacobian) = share_derivatives(compiled, &work)?;
        let state = MarketState {
            items: view.items.clone(),
            prices: prices.clone(),
            shares: shares.clone(),
            jacobian,
            ownership,
        };
        let supply = invert_markups(&state)?;
        let mut max_change = 0.0f64;
        for j in 0..n {
            let target = marginal_costs[j] + supply.markups[j];
            let next = (1.0 - DAMPING) * prices[j] + DAMPING * target;
            max_change = max_change.max((next - prices[j]).abs());
            prices[j] = next;
        }
        if max_change < PRICE_TOL {
            work.prices.clone_from(&prices);
            let (shares, jacobian) = share_derivatives(compiled, &work)?;
            let state = MarketState {
                items: view.items.clone(),
                prices: prices.clone(),
                shares: shares.clone(),
                jacobian,
                ownership,
            };
            let supply = invert_markups(&state)?;
            return Ok(BnSolve {
                prices,
                shares,
                markups: supply.markups,
                converged: true,
                iterations: iter + 1,
            });
        }
    }
    work.prices.clone_from(&prices);
    let (shares, jacobian) = share_derivatives(compiled, &work)?;
    let state = MarketState {
        items: view.items.clone(),
        prices: prices.clone(),
        shares: shares.clone(),
        jacobian,
        ownership,
    };
    let supply = invert_markups(&state)?;
    Ok(BnSolve {
        prices,
        shares,
        markups: supply.markups,
        converged: false,
        iterations: MAX_ITER,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demand::{AlphaNet, ChoiceEvent, ChoicePanel, DemandConfig, DemandModel};
    use crate::numcore::Tensor;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn homogeneous_world(j_n: usize, alpha_raw: f64, v0: f64) -> (CompiledDemand, ChoicePanel) {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let user_dim = 3;
        let panel = ChoicePanel {
            consumer_ids: vec![0, 1, 2],
            item_ids: (0..j_n as u64).collect(),
            consumer_embeddings: (0..3 * user_dim).map(|_| rng.random::<f64>()).collect(),
            user_dim,
            item_features: (0..j_n * 2).map(|_| rng.random::<f64>()).collect(),
            item_dim: 2,
            prices: (0..j_n).map(|_| 10.0).collect(),
            n_weeks: 1,
            events: vec![ChoiceEvent { consumer: 0, item: 0, week: 0 }],
            week_month: vec![5],
            lambda_hat: vec![0.0; j_n],
        };
        let config = DemandConfig {
            epochs: 1,
            ..DemandConfig::plain_logit(user_dim, 2)
        };
        let mut model = DemandModel::init(config, &mut rng).unwrap();
        model.classes[0].alpha = AlphaNet::Constant { raw: Tensor::scalar(alpha_raw) };
        model.v0 = v0;
        let compiled = CompiledDemand::compile(&model, &panel).unwrap();
        (compiled, panel)
    }

    #[test]
    fn single_product_equilibrium_matches_scalar_bisection() {
        // p = mc + 1/(|α|(1−s(p))) has a unique root; cross-check by bisection
        let (compiled, panel) = homogeneous_world(1, 0.0, 2.0);
        let view = MarketView::for_week(&compiled, &panel, 0).unwrap();
        let alpha = compiled.alpha_of(0, 0); // −ln2 − 0.1, same for everyone
        let mc = 8.0;
        let solve = solve_bertrand_nash(&compiled, &view, &[mc], Ownership::SingleProduct, &[10.0]).unwrap();
        assert!(solve.converged);

        let share = |p: f64| {
            let u = alpha * p;
            u.exp() / (compiled.v0.exp() + u.exp())
        };
        let f = |p: f64| p - mc - 1.0 / (alpha.abs() * (1.0 - share(p)));
        let (mut lo, mut hi) = (mc, mc + 100.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let oracle = 0.5 * (lo + hi);
        assert!(
            (solve.prices[0] - oracle).abs() < 1e-6,
            "{} vs {}",
            solve.prices[0],
            oracle
        );
    }

    #[test]
    fn high_cost_limit_approaches_logit_markup() {
        // mc → large: share → 0 and markup → 1/|α|·(1+o(1)). V0 sits on the
        // same utility scale so the vanishing share stays representable.
        let (compiled, panel) = homogeneous_world(1, -60.0, -992.0);
        let view = MarketView::for_week(&compiled, &panel, 0).unwrap();
        let alpha = compiled.alpha_of(0, 0); // ≈ −0.1
        let mc = 1e4;
        let solve =
            solve_bertrand_nash(&compiled, &view, &[mc], Ownership::SingleProduct, &[mc + 1.0]).unwrap();
        assert!(solve.converged);
        let markup = solve.prices[0] - mc;
        assert!(
            (markup - 1.0 / alpha.abs()).abs() / (1.0 / alpha.abs()) < 1e-3,
            "markup {markup} vs {}",
            1.0 / alpha.abs()
        );
        assert!(solve.shares[0] < 1e-2);
    }

    #[test]
    fn identical_products_get_identical_prices() {
        let (compiled, mut panel) = homogeneous_world(3, 0.3, 1.0);
        // make items true clones (identical features don't matter here since
        // taste is off, but keep prices symmetric too)
        for p in panel.prices.iter_mut() {
            *p = 12.0;
        }
        let compiled2 = compiled;
        let view = MarketView::for_week(&compiled2, &panel, 0).unwrap();
        let mc = vec![6.0; 3];
        let solve =
            solve_bertrand_nash(&compiled2, &view, &mc, Ownership::Monopolist, &[9.0, 14.0, 11.0])
                .unwrap();
        assert!(solve.converged);
        for j in 1..3 {
            assert!((solve.prices[j] - solve.prices[0]).abs() < 1e-8);
        }
    }

    #[test]
    fn round_trip_recovers_planted_costs() {
        // plant mc, solve, re-invert at the equilibrium → recover mc
        for ownership in [Ownership::SingleProduct, Ownership::Monopolist] {
            let (compiled, panel) = homogeneous_world(4, 0.5, 1.5);
            let view = MarketView::for_week(&compiled, &panel, 0).unwrap();
            let mc = vec![4.0, 6.0, 8.0, 5.0];
            let solve = solve_bertrand_nash(&compiled, &view, &mc, ownership, &[10.0; 4]).unwrap();
            assert!(solve.converged);
            let work = view.with_prices(solve.prices.clone());
            let (shares, jacobian) = share_derivatives(&compiled, &work).unwrap();
            let state = MarketState {
                items: view.items.clone(),
                prices: solve.prices.clone(),
                shares,
                jacobian,
                ownership,
            };
            let supply = invert_markups(&state).unwrap();
            for j in 0..4 {
                assert!(
                    (supply.marginal_costs[j] - mc[j]).abs() < 1e-6,
                    "{:?}: mc[{j}] {} vs {}",
                    ownership,
                    supply.marginal_costs[j],
                    mc[j]
                );
            }
        }
    }
}
