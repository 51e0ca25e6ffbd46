/// Semi-elasticity: 100·(exp(κ) − 1), the proportional change in expected
/// counts implied by coefficient κ.
pub fn effect_pct(kappa: f64) -> f64 {
    100.0 * (kappa.exp() - 1.0)
}

#[derive(Debug, Clone)]
pub struct FdrResult {
    pub reject: Vec<bool>,
    pub adjusted_p: Vec<f64>,
}

/// Benjamini–Hochberg step-up rule at level `q`. Adjusted p-values are
/// min over j ≥ i of m·p₍ⱼ₎/j, capped at 1.
pub fn bh_fdr(p_values: &[f64], q: f64) -> FdrResult {
    let m = p_values.len();
    if m == 0 {
        return FdrResult {
            reject: vec![],
            adjusted_p: vec![],
        };
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].partial_cmp(&p_values[b]).expect("finite p"));

    let mut adjusted_sorted = vec![0.0; m];
    let mut running = 1.0f64;
    for rank in (0..m).rev() {
        let i = order[rank];
        let candidate = (m as f64) * p_values[i] / (rank as f64 + 1.0);
        running = running.min(candidate).min(1.0);
        adjusted_sorted[rank] = running;
    }

    // step-up: largest rank with p_(i) <= q * i / m; reject everything below
    let mut cut: Option<usize> = None;
    for rank in (0..m).rev() {
        if p_values[order[rank]] <= q * (rank as f64 + 1.0) / m as f64 {
            cut = Some(rank);
            break;
        }
    }
    let mut reject = vec![false; m];
    let mut adjusted_p = vec![1.0; m];
    for rank in 0..m {
        adjusted_p[order[rank]] = adjusted_sorted[rank];
        if let Some(c) = cut {
            if rank <= c {
                reject[order[rank]] = true;
            }
        }
    }
    FdrResult { reject, adjusted_p }
}

/// Significance stars at the {0.001, 0.01, 0.05} thresholds, applied to
/// BH-adjusted p-values.
pub fn significance_stars(adjusted_p: f64) -> &'static str {
    if adjusted_p < 0.001 {
        "***"
    } else if adjusted_p < 0.01 {
        "**"
    } else if adjusted_p < 0.05 {
        "*"
    } else {
        ""
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn effect_pct_fixed_points() {
        assert_eq!(effect_pct(0.0), 0.0);
        assert!((effect_pct(2.0f64.ln()) - 100.0).abs() < 1e-12);
    }

    #[test]
    fn effect_pct_matches_reported_mapping() {
        // κ = −0.478 → −38.0%
        assert!((effect_pct(-0.478) - -38.0).abs() < 0.05);
    }

    #[test]
    fn all_zero_pvalues_all_rejected() {
        let res = bh_fdr(&[0.0, 0.0, 0.0], 0.05);
        assert!(res.reject.iter().all(|&r| r));
    }

    #[test]
    fn single_test_rejects_iff_p_below_q() {
        assert!(bh_fdr(&[0.04], 0.05).reject[0]);
        assert!(!bh_fdr(&[0.06], 0.05).reject[0]);
    }

    #[test]
    fn step_up_hand_instance() {
        // p = (0.01, 0.02, 0.04), q = 0.05, thresholds (0.0167, 0.0333, 0.05):
        // p_(3) = 0.04 <= 0.05, so all three rejected.
        let res = bh_fdr(&[0.01, 0.02, 0.04], 0.05);
        assert_eq!(res.reject, vec![true, true, true]);
        assert!((res.adjusted_p[0] - 0.03).abs() < 1e-12);
        assert!((res.adjusted_p[1] - 0.03).abs() < 1e-12);
        assert!((res.adjusted_p[2] - 0.04).abs() < 1e-12);
    }

    #[test]
    fn adjusted_p_monotone_in_raw_p() {
        let p = [0.001, 0.011, 0.02, 0.8, 0.4, 0.03];
        let res = bh_fdr(&p, 0.05);
        let mut pairs: Vec<(f64, f64)> = p.iter().cloned().zip(res.adjusted_p).collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for w in pairs.windows(2) {
            assert!(w[0].1 <= w[1].1 + 1e-15);
        }
    }
}
