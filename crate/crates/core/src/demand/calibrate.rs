use super::em::mean_inside_share;
use super::eval::{CompiledDemand, MarketView};
use crate::error::{Error, Result};

const TOL: f64 = 1e-6;
const MAX_BRACKET: f64 = 1e4;

/// Calibrates the shared outside-good utility by bisection so the mean
/// inside share on `view` hits `tau_target` within 1e-6. V₀ is not part of
/// the likelihood; it is set post-estimation. The share is strictly
/// decreasing in V₀, so the root is unique. Starts from [−30, 30] and
/// expands the bracket when the target lies outside.
pub fn calibrate_v0(compiled: &CompiledDemand, view: &MarketView, tau_target: f64) -> Result<f64> {
    if !(0.0 < tau_target && tau_target < 1.0) {
        return Err(Error::contract(format!(
            "tau target {tau_target} must be in (0,1)"
        )));
    }
    if view.consumers.is_empty() || view.items.is_empty() {
        return Err(Error::Calibration("empty market view".into()));
    }
    let share_at = |v0: f64| mean_inside_share(compiled, view, v0);

    let mut lo = -30.0; // high inside share end
    let mut hi = 30.0; // low inside share end
    let mut s_lo = share_at(lo);
    let mut s_hi = share_at(hi);
    while s_lo < tau_target {
        lo *= 2.0;
        if lo.abs() > MAX_BRACKET {
            return Err(Error::Calibration(format!(
                "inside share {s_lo:.6} below target {tau_target} even at V0 = {lo}"
            )));
        }
        s_lo = share_at(lo);
    }
    while s_hi > tau_target {
        hi *= 2.0;
        if hi > MAX_BRACKET {
            return Err(Error::Calibration(format!(
                "inside share {s_hi:.6} above target {tau_target} even at V0 = {hi}"
            )));
        }
        s_hi = share_at(hi);
    }

    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let s = share_at(mid);
        if (s - tau_target).abs() < TOL {
            return Ok(mid);
        }
        if s > tau_target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mid = 0.5 * (lo + hi);
    let s = share_at(mid);
    if (s - tau_target).abs() < TOL {
        Ok(mid)
    } else {
        Err(Error::Calibration(format!(
            "bisection stalled at share {s:.8} for target {tau_target}"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demand::{ChoiceEvent, ChoicePanel, DemandConfig, DemandModel};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (CompiledDemand, ChoicePanel) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (i_n, j_n, t_n) = (20, 8, 4);
        let user_dim = 4;
        let item_dim = 3;
        let panel = ChoicePanel {
            consumer_ids: (0..i_n as u64).collect(),
            item_ids: (0..j_n as u64).collect(),
            consumer_embeddings: (0..i_n * user_dim).map(|_| rng.random::<f64>() - 0.5).collect(),
            user_dim,
            item_features: (0..j_n * item_dim).map(|_| rng.random::<f64>() - 0.5).collect(),
            item_dim,
            prices: (0..j_n * t_n).map(|_| 5.0 + 10.0 * rng.random::<f64>()).collect(),
            n_weeks: t_n,
            events: vec![ChoiceEvent { consumer: 0, item: 0, week: 0 }],
            week_month: vec![1, 2, 3, 4],
            lambda_hat: vec![0.0; j_n],
        };
        let config = DemandConfig {
            alpha_hidden: Some(6),
            rt_hidden: 6,
            taste_rank: 4,
            seasonal_rank: 2,
            ..DemandConfig::new(user_dim, item_dim)
        };
        let model = DemandModel::init(config, &mut rng).unwrap();
        let compiled = CompiledDemand::compile(&model, &panel).unwrap();
        (compiled, panel)
    }

    #[test]
    fn raising_v0_lowers_inside_share() {
        let (compiled, panel) = setup();
        let view = MarketView::pooled(&compiled, &panel).unwrap();
        let s_low = mean_inside_share(&compiled, &view, -5.0);
        let s_mid = mean_inside_share(&compiled, &view, 0.0);
        let s_high = mean_inside_share(&compiled, &view, 5.0);
        assert!(s_low > s_mid && s_mid > s_high);
    }

    #[test]
    fn calibration_hits_target_within_tolerance() {
        let (compiled, panel) = setup();
        let view = MarketView::pooled(&compiled, &panel).unwrap();
        for tau in [0.02, 0.04, 0.30, 0.8] {
            let v0 = calibrate_v0(&compiled, &view, tau).unwrap();
            let achieved = mean_inside_share(&compiled, &view, v0);
            assert!((achieved - tau).abs() < 1e-6, "tau {tau}: got {achieved}");
        }
    }

    #[test]
    fn v0_decreasing_in_tau() {
        // direction matches the reported sweep: V0(0.02) > V0(0.30)
        let (compiled, panel) = setup();
        let view = MarketView::pooled(&compiled, &panel).unwrap();
        let v_low_tau = calibrate_v0(&compiled, &view, 0.02).unwrap();
        let v_high_tau = calibrate_v0(&compiled, &view, 0.30).unwrap();
        assert!(v_low_tau > v_high_tau);
    }

    #[test]
    fn invalid_target_rejected() {
        let (compiled, panel) = setup();
        let view = MarketView::pooled(&compiled, &panel).unwrap();
        assert!(calibrate_v0(&compiled, &view, 0.0).is_err());
        assert!(calibrate_v0(&compiled, &view, 1.0).is_err());
    }
}
