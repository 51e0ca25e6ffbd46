use crate::demand::{CompiledDemand, MarketView};
use crate::error::{Error, Result};
use crate::market::{solve_bertrand_nash, Ownership};

#[derive(Debug, Clone)]
pub struct PruneResult {
    pub depth: f64,
    pub dropped: usize,
    /// Profit change holding prices at observed values (Method A), percent.
    pub delta_profit_a_pct: f64,
    /// Profit change after re-solving the equilibrium on survivors
    /// (Method B), percent.
    pub delta_profit_b_pct: f64,
    /// Mean retained-item price change under Method B, percent.
    pub retained_price_shift_pct: f64,
    pub converged: bool,
}

/// Orders items by baseline share and drops the bottom quantile at each
/// depth. Method A recomputes shares at observed prices; Method B re-solves
/// the Bertrand–Nash equilibrium on the survivors. Deltas are relative to
/// baseline profit at the view's prices — when `marginal_costs` come from
/// inverting that same market, the observed prices satisfy the first-order
/// condition and depth 0 is a no-op for both methods.
pub fn prune_assortment(
    compiled: &CompiledDemand,
    view: &MarketView,
    marginal_costs: &[f64],
    ownership: Ownership,
    depths: &[f64],
) -> Result<Vec<PruneResult>> {
    let n = view.items.len();
    if marginal_costs.len() != n {
        return Err(Error::shape("prune marginal costs", n, marginal_costs.len()));
    }
    for &d in depths {
        if !(0.0..1.0).contains(&d) {
            return Err(Error::contract(format!("prune depth {d} must be in [0,1)")));
        }
    }
    let baseline_shares = view.aggregate_shares(compiled);
    let baseline_profit: f64 = (0..n)
        .map(|j| (view.prices[j] - marginal_costs[j]) * baseline_shares[j])
        .sum();
    if baseline_profit <= 0.0 {
        return Err(Error::contract(format!(
            "baseline profit {baseline_profit} must be positive for percentage deltas"
        )));
    }
    // ascending share order, ties by item index for determinism
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        baseline_shares[a]
            .partial_cmp(&baseline_shares[b])
            .expect("finite share")
            .then(view.items[a].cmp(&view.items[b]))
    });

    let mut out = Vec::with_capacity(depths.len());
    for &depth in depths {
        let n_drop = ((depth * n as f64).floor() as usize).min(n - 1);
        let mut keep: Vec<usize> = order[n_drop..].to_vec();
        keep.sort_unstable();
        let sub = view.restrict(&keep, compiled);
        let mc_sub: Vec<f64> = keep.iter().map(|&s| marginal_costs[s]).collect();

        // Method A: observed prices, redistributed shares
        let shares_a = sub.aggregate_shares(compiled);
        let profit_a: f64 = sub
            .prices
            .iter()
            .zip(&shares_a)
            .zip(&mc_sub)
            .map(|((p, s), c)| (p - c) * s)
            .sum();

        // Method B: re-solved equilibrium on survivors
        let solve = solve_bertrand_nash(compiled, &sub, &mc_sub, ownership, &sub.prices)?;
        let profit_b: f64 = solve
            .prices
            .iter()
            .zip(&solve.shares)
            .zip(&mc_sub)
            .map(|((p, s), c)| (p - c) * s)
            .sum();
        let price_shift = 100.0
            * solve
                .prices
                .iter()
                .zip(&sub.prices)
                .map(|(new, old)| (new - old) / old)
                .sum::<f64>()
            / keep.len() as f64;

        out.push(PruneResult {
            depth,
            dropped: n_drop,
            delta_profit_a_pct: 100.0 * (profit_a - baseline_profit) / baseline_profit,
            delta_profit_b_pct: 100.0 * (profit_b - baseline_profit) / baseline_profit,
            retained_price_shift_pct: price_shift,
            converged: solve.converged,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demand::{AlphaNet, ChoiceEvent, ChoicePanel, DemandConfig, DemandModel, MarketView};
    use crate::market::{invert_markups, share_derivatives, MarketState};
    use crate::numcore::Tensor;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn world(j_n: usize, seed: u64) -> (CompiledDemand, ChoicePanel) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let user_dim = 4;
        let item_dim = 3;
        let panel = ChoicePanel {
            consumer_ids: (0..6u64).collect(),
            item_ids: (0..j_n as u64).collect(),
            consumer_embeddings: (0..6 * user_dim).map(|_| rng.random::<f64>() - 0.5).collect(),
            user_dim,
            item_features: (0..j_n * item_dim).map(|_| rng.random::<f64>() - 0.5).collect(),
            item_dim,
            prices: (0..j_n).map(|_| 8.0 + 6.0 * rng.random::<f64>()).collect(),
            n_weeks: 1,
            events: vec![ChoiceEvent { consumer: 0, item: 0, week: 0 }],
            week_month: vec![6],
            lambda_hat: vec![0.0; j_n],
        };
        let config = DemandConfig {
            n_classes: 2,
            alpha_hidden: Some(5),
            rt_hidden: 5,
            taste_rank: 3,
            seasonal_rank: 2,
            ..DemandConfig::new(user_dim, item_dim)
        };
        let mut model = DemandModel::init(config, &mut rng).unwrap();
        model.classes[0].alpha = AlphaNet::Constant { raw: Tensor::scalar(0.5) };
        model.classes[1].alpha = AlphaNet::Constant { raw: Tensor::scalar(-1.0) };
        model.v0 = 1.0;
        let compiled = CompiledDemand::compile(&model, &panel).unwrap();
        (compiled, panel)
    }

    fn equilibrium_view(compiled: &CompiledDemand, panel: &ChoicePanel) -> (MarketView, Vec<f64>) {
        // put the market at its own equilibrium: invert costs at observed
        // prices, so the observed prices satisfy the FOC
        let view = MarketView::for_week(compiled, panel, 0).unwrap();
        let (shares, jacobian) = share_derivatives(compiled, &view).unwrap();
        let state = MarketState {
            items: view.items.clone(),
            prices: view.prices.clone(),
            shares,
            jacobian,
            ownership: Ownership::Monopolist,
        };
        let supply = invert_markups(&state).unwrap();
        (view, supply.marginal_costs)
    }

    #[test]
    fn depth_zero_is_a_no_op_for_both_methods() {
        let (compiled, panel) = world(5, 3);
        let (view, mc) = equilibrium_view(&compiled, &panel);
        let res = prune_assortment(&compiled, &view, &mc, Ownership::Monopolist, &[0.0]).unwrap();
        assert_eq!(res[0].dropped, 0);
        assert!(res[0].delta_profit_a_pct.abs() < 1e-10);
        assert!(res[0].delta_profit_b_pct.abs() < 1e-5, "B delta {}", res[0].delta_profit_b_pct);
    }

    #[test]
    fn method_b_weakly_dominates_method_a() {
        let (compiled, panel) = world(6, 4);
        let (view, mc) = equilibrium_view(&compiled, &panel);
        let res = prune_assortment(
            &compiled,
            &view,
            &mc,
            Ownership::Monopolist,
            &[0.0, 0.2, 0.4, 0.6],
        )
        .unwrap();
        for r in &res {
            assert!(
                r.delta_profit_b_pct >= r.delta_profit_a_pct - 1e-6,
                "depth {}: B {} < A {}",
                r.depth,
                r.delta_profit_b_pct,
                r.delta_profit_a_pct
            );
            assert!(r.converged);
        }
    }

    #[test]
    fn depth_one_rejected() {
        let (compiled, panel) = world(4, 5);
        let (view, mc) = equilibrium_view(&compiled, &panel);
        assert!(prune_assortment(&compiled, &view, &mc, Ownership::Monopolist, &[1.0]).is_err());
    }

    #[test]
    fn dropping_near_duplicate_raises_survivor_price() {
        // J=3 with one near-duplicate pair sharing tastes: dropping one
        // duplicate relaxes competition for its twin under re-pricing.
        // cross-checked against grid-search profit maximization.
        let (_compiled, mut panel) = world(3, 6);
        // make items 0 and 1 near-duplicates in features and price
        let f: Vec<f64> = panel.item_feature_row(0).to_vec();
        panel.item_features[3..6].copy_from_slice(&f);
        panel.prices = vec![10.0, 10.0, 14.0];
        let compiled = {
            // recompile after feature surgery
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let config = DemandConfig {
                n_classes: 2,
                alpha_hidden: Some(5),
                rt_hidden: 5,
                taste_rank: 3,
                seasonal_rank: 2,
                ..DemandConfig::new(panel.user_dim, panel.item_dim)
            };
            let mut model = DemandModel::init(config, &mut rng).unwrap();
            model.classes[0].alpha = AlphaNet::Constant { raw: Tensor::scalar(0.5) };
            model.classes[1].alpha = AlphaNet::Constant { raw: Tensor::scalar(-1.0) };
            model.v0 = 1.0;
            CompiledDemand::compile(&model, &panel).unwrap()
        };
        let _ = compiled.alpha_bar();
        let view = MarketView::for_week(&compiled, &panel, 0).unwrap();
        let mc = vec![5.0, 5.0, 7.0];

        // under single-product conduct the twins compete; removal relaxes
        // that competition and lifts the survivor's price
        let conduct = Ownership::SingleProduct;
        let full = solve_bertrand_nash(&compiled, &view, &mc, conduct, &view.prices).unwrap();
        let sub = view.restrict(&[0, 2], &compiled);
        let solve = solve_bertrand_nash(&compiled, &sub, &[5.0, 7.0], conduct, &sub.prices).unwrap();
        assert!(
            solve.prices[0] > full.prices[0] + 1e-6,
            "survivor price should rise: {} vs {}",
            solve.prices[0],
            full.prices[0]
        );

        // grid-search best-response oracle for the two-survivor Nash
        // equilibrium under single-product conduct
        let profit_slot = |slot: usize, prices: &Vec<f64>| -> f64 {
            let trial = sub.with_prices(prices.clone());
            let s = trial.aggregate_shares(&compiled);
            let mc_s = [5.0, 7.0];
            (prices[slot] - mc_s[slot]) * s[slot]
        };
        let grid: Vec<f64> = (0..600).map(|g| 6.0 + 0.05 * g as f64).collect();
        let mut prices = sub.prices.clone();
        for _ in 0..50 {
            let mut moved = 0.0f64;
            for slot in 0..2 {
                let mut best = (prices[slot], f64::NEG_INFINITY);
                for &cand in &grid {
                    let mut trial = prices.clone();
                    trial[slot] = cand;
                    let pr = profit_slot(slot, &trial);
                    if pr > best.1 {
                        best = (cand, pr);
                    }
                }
                moved = moved.max((best.0 - prices[slot]).abs());
                prices[slot] = best.0;
            }
            if moved < 0.051 {
                break;
            }
        }
        assert!(
            (solve.prices[0] - prices[0]).abs() < 0.06,
            "{} vs grid Nash {}",
            solve.prices[0],
            prices[0]
        );
        assert!((solve.prices[1] - prices[1]).abs() < 0.06);
    }
}
