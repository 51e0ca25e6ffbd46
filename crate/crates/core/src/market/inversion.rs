use nalgebra::DMatrix;

use super::MarketState;
use crate::error::{Error, Result};

/// Markup inversion output. Negative marginal costs are permitted and
/// counted, never clamped — items with |ε_jj| < 1 under single-product
/// conduct genuinely imply mc < 0.
#[derive(Debug, Clone)]
pub struct SupplyResult {
    pub markups: Vec<f64>,
    pub marginal_costs: Vec<f64>,
    pub lerner: Vec<f64>,
    pub mc_positive: usize,
    pub delta_condition: f64,
}

const COND_LIMIT: f64 = 1e12;

/// η = −Δ⁻¹S with Δ = Ω ⊙ Jᵀ, mc = p − η, L = η/p. LU with partial
/// pivoting; a condition number above 1e12 is a loud failure, not a
/// pseudo-inverse fallback.
pub fn invert_markups(state: &MarketState) -> Result<SupplyResult> {
    let n = state.n();
    if n == 0 {
        return Err(Error::contract("empty market"));
    }
    let mut delta = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        for k in 0..n {
            // Δ_jk = Ω_jk · ∂S_k/∂p_j
            delta[(j, k)] = state.ownership.entry(j, k) * state.jacobian[k * n + j];
        }
    }
    let norm1 = matrix_norm1(&delta);
    let lu = delta.clone().lu();
    let inv = lu
        .try_inverse()
        .ok_or_else(|| Error::Inversion("Δ is singular".into()))?;
    let cond = norm1 * matrix_norm1(&inv);
    if !cond.is_finite() || cond > COND_LIMIT {
        return Err(Error::Inversion(format!(
            "Δ condition number {cond:.3e} exceeds {COND_LIMIT:.0e}"
        )));
    }
    let mut markups = vec![0.0; n];
    for j in 0..n {
        let mut acc = 0.0;
        for k in 0..n {
            acc += inv[(j, k)] * state.shares[k];
        }
        markups[j] = -acc;
    }
    let marginal_costs: Vec<f64> = state.prices.iter().zip(&markups).map(|(p, e)| p - e).collect();
    let lerner: Vec<f64> = markups.iter().zip(&state.prices).map(|(e, p)| e / p).collect();
    let mc_positive = marginal_costs.iter().filter(|&&mc| mc > 0.0).count();
    Ok(SupplyResult {
        markups,
        marginal_costs,
        lerner,
        mc_positive,
        delta_condition: cond,
    })
}

fn matrix_norm1(m: &DMatrix<f64>) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::Ownership;

    #[test]
    fn single_product_closed_form() {
        // one class, α = −0.2, s = 0.04: ∂S/∂p = αs(1−s) → η = 1/(|α|(1−s))
        let alpha = -0.2;
        let s = 0.04;
        let state = MarketState {
            items: vec![0],
            prices: vec![20.0],
            shares: vec![s],
            jacobian: vec![alpha * s * (1.0 - s)],
            ownership: Ownership::Monopolist,
        };
        state.validate().unwrap();
        let res = invert_markups(&state).unwrap();
        assert!((res.markups[0] - 5.2083333333333330).abs() < 1e-10);
        assert!((res.marginal_costs[0] - (20.0 - res.markups[0])).abs() < 1e-12);
    }

    #[test]
    fn identity_ownership_lerner_is_inverse_own_elasticity() {
        // single-product conduct: L_j = 1/|ε_jj| exactly
        let shares = vec![0.05, 0.08];
        let prices = vec![15.0, 22.0];
        let jacobian = vec![-0.004, 0.0006, 0.0005, -0.006];
        let state = MarketState {
            items: vec![0, 1],
            prices: prices.clone(),
            shares: shares.clone(),
            jacobian: jacobian.clone(),
            ownership: Ownership::SingleProduct,
        };
        let res = invert_markups(&state).unwrap();
        for j in 0..2 {
            let eps_own = prices[j] / shares[j] * jacobian[j * 2 + j];
            assert!((res.lerner[j] - 1.0 / eps_own.abs()).abs() < 1e-12);
        }
    }

    #[test]
    fn inelastic_item_yields_negative_mc_counted_not_clamped() {
        // |ε| < 1 → markup exceeds price → mc < 0
        let s = 0.3;
        let alpha = -0.05;
        let p = 10.0;
        let state = MarketState {
            items: vec![0],
            prices: vec![p],
            shares: vec![s],
            jacobian: vec![alpha * s * (1.0 - s)],
            ownership: Ownership::SingleProduct,
        };
        let res = invert_markups(&state).unwrap();
        assert!(res.marginal_costs[0] < 0.0);
        assert_eq!(res.mc_positive, 0);
    }

    #[test]
    fn singular_delta_is_loud() {
        let state = MarketState {
            items: vec![0, 1],
            prices: vec![10.0, 10.0],
            shares: vec![0.1, 0.1],
            jacobian: vec![-0.01, 0.01, -0.01, 0.01], // rank 1 after transpose/ownership
            ownership: Ownership::Monopolist,
        };
        assert!(invert_markups(&state).is_err());
    }
}
