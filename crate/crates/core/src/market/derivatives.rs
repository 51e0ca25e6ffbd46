use crate::demand::{CompiledDemand, MarketView};
use crate::error::{Error, Result};
use crate::parallel::{map_chunks, ExecMode, CONSUMER_CHUNK};

/// Aggregate shares and the share Jacobian ∂S_j/∂p_ℓ, averaged over the
/// view's consumers. Individual terms: own Σ_c π_c α_c s(1−s), cross
/// −Σ_c π_c α_c s_j s_ℓ — the own derivative is strictly negative and the
/// cross strictly positive because α < 0. Deterministic chunked reduction.
pub fn share_derivatives(compiled: &CompiledDemand, view: &MarketView) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = view.items.len();
    if n == 0 {
        return Err(Error::contract("empty choice set"));
    }
    if view.prices.iter().any(|p| !(*p > 0.0)) {
        return Err(Error::contract("prices must be positive"));
    }
    let i_n = view.consumers.len();
    let parts = map_chunks(i_n, CONSUMER_CHUNK, ExecMode::Auto, |range| {
        let mut shares = vec![0.0; n];
        let mut jac = vec![0.0; n * n];
        let mut u = vec![0.0; n];
        for slot in range {
            let i = view.consumers[slot];
            for c in 0..compiled.n_classes {
                view.class_utilities(compiled, i, c, &mut u);
                let (s, _) = crate::demand::class_share_from_utilities(&u, compiled.v0);
                let w = compiled.pi[c];
                let a = compiled.alpha_of(i, c);
                for j in 0..n {
                    shares[j] += w * s[j];
                    let wasj = w * a * s[j];
                    // cross terms first, then fix the diagonal
                    for l in 0..n {
                        jac[j * n + l] -= wasj * s[l];
                    }
                    jac[j * n + j] += wasj;
                }
            }
        }
        (shares, jac)
    });
    let mut shares = vec![0.0; n];
    let mut jac = vec![0.0; n * n];
    for (s_part, j_part) in parts {
        for (a, b) in shares.iter_mut().zip(&s_part) {
            *a += b;
        }
        for (a, b) in jac.iter_mut().zip(&j_part) {
            *a += b;
        }
    }
    let scale = 1.0 / i_n as f64;
    for v in shares.iter_mut().chain(jac.iter_mut()) {
        *v *= scale;
    }
    Ok((shares, jac))
}

/// ε_{jℓ} = (p_ℓ/S_j)·∂S_j/∂p_ℓ.
pub fn elasticity_matrix(shares: &[f64], jacobian: &[f64], prices: &[f64]) -> Result<Vec<f64>> {
    let n = shares.len();
    if jacobian.len() != n * n || prices.len() != n {
        return Err(Error::shape("elasticity_matrix", n * n, jacobian.len()));
    }
    let zero_items: Vec<usize> = (0..n).filter(|&j| shares[j] <= 0.0).collect();
    if !zero_items.is_empty() {
        return Err(Error::contract(format!(
            "singular shares for item slots {zero_items:?}"
        )));
    }
    let mut eps = vec![0.0; n * n];
    for j in 0..n {
        for l in 0..n {
            eps[j * n + l] = prices[l] / shares[j] * jacobian[j * n + l];
        }
    }
    Ok(eps)
}

/// Aggregates a cross-elasticity matrix over item clusters: entry (g, h) is
/// the mean ε_{jℓ} for j ∈ g, ℓ ∈ h, j ≠ ℓ, column-normalized so 1.0 is the
/// independence baseline.
pub fn cluster_substitution(eps: &[f64], labels: &[usize], k: usize) -> Result<Vec<f64>> {
    let n = labels.len();
    if eps.len() != n * n {
        return Err(Error::shape("cluster_substitution", n * n, eps.len()));
    }
    let mut sums = vec![0.0; k * k];
    let mut counts = vec![0usize; k * k];
    for j in 0..n {
        for l in 0..n {
            if j == l {
                continue;
            }
            let cell = labels[j] * k + labels[l];
            sums[cell] += eps[j * n + l];
            counts[cell] += 1;
        }
    }
    let mut m = vec![0.0; k * k];
    for cell in 0..k * k {
        if counts[cell] > 0 {
            m[cell] = sums[cell] / counts[cell] as f64;
        }
    }
    for h in 0..k {
        let col_mean: f64 = (0..k).map(|g| m[g * k + h]).sum::<f64>() / k as f64;
        if col_mean.abs() > 0.0 {
            for g in 0..k {
                m[g * k + h] /= col_mean;
            }
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demand::{ChoiceEvent, ChoicePanel, CompiledDemand, DemandConfig, DemandModel, MarketView};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn setup(i_n: usize, j_n: usize, k: usize, seed: u64) -> (CompiledDemand, ChoicePanel) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let user_dim = 4;
        let item_dim = 3;
        let t_n = 2;
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
            week_month: vec![3, 4],
            lambda_hat: vec![0.0; j_n],
        };
        let config = DemandConfig {
            n_classes: k,
            alpha_hidden: Some(6),
            rt_hidden: 6,
            taste_rank: 4,
            seasonal_rank: 2,
            ..DemandConfig::new(user_dim, item_dim)
        };
        let mut model = DemandModel::init(config, &mut rng).unwrap();
        model.v0 = 1.0;
        let compiled = CompiledDemand::compile(&model, &panel).unwrap();
        (compiled, panel)
    }

    #[test]
    fn own_derivative_negative_cross_non_negative() {
        let (compiled, panel) = setup(5, 1, 2, 1);
        let view = MarketView::for_week(&compiled, &panel, 0).unwrap();
        let (s, jac) = share_derivatives(&compiled, &view).unwrap();
        assert!(jac[0] < 0.0);
        assert!(s[0] > 0.0 && s[0] < 1.0);

        let (compiled, panel) = setup(5, 4, 2, 2);
        let view = MarketView::for_week(&compiled, &panel, 0).unwrap();
        let (_, jac) = share_derivatives(&compiled, &view).unwrap();
        for j in 0..4 {
            for l in 0..4 {
                if j == l {
                    assert!(jac[j * 4 + l] < 0.0);
                } else {
                    assert!(jac[j * 4 + l] >= 0.0);
                }
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences_of_mixture_share() {
        // J=3, I=5: central differences of the aggregate mixture share
        let (compiled, panel) = setup(5, 3, 2, 3);
        let view = MarketView::for_week(&compiled, &panel, 0).unwrap();
        let (_, jac) = share_derivatives(&compiled, &view).unwrap();
        let h = 1e-5;
        let mut max_err = 0.0f64;
        for l in 0..3 {
            let mut up = view.clone();
            up.prices[l] += h;
            let mut dn = view.clone();
            dn.prices[l] -= h;
            let s_up = up.aggregate_shares(&compiled);
            let s_dn = dn.aggregate_shares(&compiled);
            for j in 0..3 {
                let fd = (s_up[j] - s_dn[j]) / (2.0 * h);
                max_err = max_err.max((fd - jac[j * 3 + l]).abs());
            }
        }
        assert!(max_err < 1e-6, "max abs deviation {max_err}");
    }

    #[test]
    fn jacobian_columns_conserve_probability() {
        // Σ_j ∂S_j/∂p_ℓ + ∂S_out/∂p_ℓ = 0: the outside derivative computed
        // independently as Σ_c −π α s_out s_ℓ averaged over consumers
        let (compiled, panel) = setup(6, 4, 2, 4);
        let view = MarketView::for_week(&compiled, &panel, 0).unwrap();
        let (_, jac) = share_derivatives(&compiled, &view).unwrap();
        let n = 4;
        let i_n = view.consumers.len() as f64;
        for l in 0..n {
            let mut outside_deriv = 0.0;
            for &i in &view.consumers {
                for c in 0..compiled.n_classes {
                    let (s, s0) = view.class_share(&compiled, i, c);
                    outside_deriv += -compiled.pi[c] * compiled.alpha_of(i, c) * s0 * s[l];
                }
            }
            outside_deriv /= i_n;
            let col_sum: f64 = (0..n).map(|j| jac[j * n + l]).sum();
            assert!(
                (col_sum + outside_deriv).abs() < 1e-10,
                "column {l}: {col_sum} + {outside_deriv}"
            );
        }
    }

    #[test]
    fn elasticity_scales_with_price_column() {
        let (compiled, panel) = setup(4, 3, 1, 5);
        let view = MarketView::for_week(&compiled, &panel, 0).unwrap();
        let (s, jac) = share_derivatives(&compiled, &view).unwrap();
        let eps = elasticity_matrix(&s, &jac, &view.prices).unwrap();
        let mut doubled = view.prices.clone();
        doubled[1] *= 2.0;
        let eps2 = elasticity_matrix(&s, &jac, &doubled).unwrap();
        for j in 0..3 {
            assert!((eps2[j * 3 + 1] - 2.0 * eps[j * 3 + 1]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_share_is_singular_error() {
        let shares = vec![0.4, 0.0];
        let jac = vec![-0.1, 0.01, 0.01, -0.1];
        let prices = vec![10.0, 12.0];
        assert!(elasticity_matrix(&shares, &jac, &prices).is_err());
    }

    #[test]
    fn homogeneous_logit_cross_elasticities_column_constant() {
        // IIA proportional substitution: with one class, constant α, and no
        // taste heterogeneity, ε_{jℓ} is constant down each column (j ≠ ℓ)
        use crate::demand::AlphaNet;
        use crate::numcore::Tensor;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (i_n, j_n) = (4, 5);
        let user_dim = 3;
        let panel = ChoicePanel {
            consumer_ids: (0..i_n as u64).collect(),
            item_ids: (0..j_n as u64).collect(),
            consumer_embeddings: (0..i_n * user_dim).map(|_| rng.random::<f64>()).collect(),
            user_dim,
            item_features: (0..j_n * 2).map(|_| rng.random::<f64>()).collect(),
            item_dim: 2,
            prices: (0..j_n).map(|_| 5.0 + 10.0 * rng.random::<f64>()).collect(),
            n_weeks: 1,
            events: vec![ChoiceEvent { consumer: 0, item: 0, week: 0 }],
            week_month: vec![6],
            lambda_hat: vec![0.0; j_n],
        };
        let config = DemandConfig {
            epochs: 1,
            ..DemandConfig::plain_logit(user_dim, 2)
        };
        let mut model = DemandModel::init(config, &mut rng).unwrap();
        model.classes[0].alpha = AlphaNet::Constant { raw: Tensor::scalar(-0.5) };
        model.v0 = 2.0;
        let compiled = CompiledDemand::compile(&model, &panel).unwrap();
        let view = MarketView::for_week(&compiled, &panel, 0).unwrap();
        let (s, jac) = share_derivatives(&compiled, &view).unwrap();
        let eps = elasticity_matrix(&s, &jac, &view.prices).unwrap();
        for l in 0..j_n {
            let vals: Vec<f64> = (0..j_n).filter(|&j| j != l).map(|j| eps[j * j_n + l]).collect();
            for v in &vals {
                assert!((v - vals[0]).abs() < 1e-10, "column {l} not constant: {vals:?}");
            }
        }
    }

    #[test]
    fn cluster_matrix_independence_baseline() {
        // uniform elasticities → every normalized cell is exactly 1
        let n = 6;
        let eps = vec![0.5; n * n];
        let labels = vec![0, 0, 1, 1, 2, 2];
        let m = cluster_substitution(&eps, &labels, 3).unwrap();
        for v in m {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }
}
