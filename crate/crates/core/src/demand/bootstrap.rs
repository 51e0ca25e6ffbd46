use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::em::em_fit;
use super::{ChoicePanel, DemandConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct BootstrapDraw {
    pub alpha_bar: Vec<f64>,
    pub alpha_gap: f64,
    pub pi1: f64,
    pub val_nll: f64,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct BootstrapResult {
    pub draws: Vec<BootstrapDraw>,
    pub se_alpha1: f64,
    pub se_alpha2: f64,
    pub se_gap: f64,
    pub se_pi1: f64,
    pub non_converged: usize,
}

/// Consumer bootstrap: resample consumers with replacement (embeddings held
/// fixed), refit, reorder classes so the more price-sensitive one is class
/// 0, and report sample standard errors over draws. Non-converged draws are
/// flagged, never dropped.
pub fn bootstrap_fit(
    panel: &ChoicePanel,
    config: &DemandConfig,
    n_draws: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    if n_draws < 2 {
        return Err(Error::contract("bootstrap needs B >= 2 draws"));
    }
    panel.validate()?;
    let mut draws = Vec::with_capacity(n_draws);
    for b in 0..n_draws {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(b as u64 + 1);
        let resampled = resample_consumers(panel, &mut rng);
        let (_, report) = em_fit(&resampled, config, seed ^ (b as u64 + 1))?;
        // em_fit canonicalizes: class 0 carries the more negative mean α
        let gap = if report.alpha_bar.len() > 1 {
            (report.alpha_bar[0] - report.alpha_bar[1]).abs()
        } else {
            0.0
        };
        draws.push(BootstrapDraw {
            alpha_bar: report.alpha_bar.clone(),
            alpha_gap: gap,
            pi1: report.pi1,
            val_nll: report.val_nll,
            converged: report.converged,
        });
    }
    let sd = |xs: Vec<f64>| -> f64 {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    let non_converged = draws.iter().filter(|d| !d.converged).count();
    Ok(BootstrapResult {
        se_alpha1: sd(draws.iter().map(|d| d.alpha_bar[0]).collect()),
        se_alpha2: sd(draws
            .iter()
            .map(|d| d.alpha_bar.get(1).cloned().unwrap_or(0.0))
            .collect()),
        se_gap: sd(draws.iter().map(|d| d.alpha_gap).collect()),
        se_pi1: sd(draws.iter().map(|d| d.pi1).collect()),
        non_converged,
        draws,
    })
}

/// Rebuilds the panel with consumers drawn with replacement. Item-side data
/// and the embedding of each sampled consumer are copied as-is.
pub fn resample_consumers(panel: &ChoicePanel, rng: &mut ChaCha8Rng) -> ChoicePanel {
    let i_n = panel.n_consumers();
    let picks: Vec<usize> = (0..i_n).map(|_| rng.random_range(0..i_n)).collect();
    let mut embeddings = Vec::with_capacity(i_n * panel.user_dim);
    for &orig in &picks {
        embeddings.extend_from_slice(panel.consumer_embedding(orig));
    }
    let mut events_by_consumer: Vec<Vec<(usize, usize)>> = vec![Vec::new(); i_n];
    for ev in &panel.events {
        events_by_consumer[ev.consumer].push((ev.item, ev.week));
    }
    let mut events = Vec::new();
    for (slot, &orig) in picks.iter().enumerate() {
        for &(item, week) in &events_by_consumer[orig] {
            events.push(super::ChoiceEvent {
                consumer: slot,
                item,
                week,
            });
        }
    }
    ChoicePanel {
        consumer_ids: (0..i_n as u64).collect(),
        consumer_embeddings: embeddings,
        events,
        ..panel.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_resample_gives_zero_se() {
        // identical draws (no resampling randomness once the panel has one
        // consumer) → sample std 0
        use crate::demand::ChoiceEvent;
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let user_dim = 3;
        let item_dim = 2;
        let (j_n, t_n) = (4, 5);
        let panel = ChoicePanel {
            consumer_ids: vec![0],
            item_ids: (0..j_n as u64).collect(),
            consumer_embeddings: (0..user_dim).map(|_| rng.random::<f64>()).collect(),
            user_dim,
            item_features: (0..j_n * item_dim).map(|_| rng.random::<f64>()).collect(),
            item_dim,
            prices: (0..j_n * t_n).map(|_| 5.0 + rng.random::<f64>()).collect(),
            n_weeks: t_n,
            events: (0..t_n)
                .map(|t| ChoiceEvent {
                    consumer: 0,
                    item: t % j_n,
                    week: t,
                })
                .collect(),
            week_month: vec![1, 2, 3, 4, 5],
            lambda_hat: vec![0.0; j_n],
        };
        let config = DemandConfig {
            n_classes: 1,
            alpha_hidden: None,
            taste_enabled: false,
            use_control_function: false,
            epochs: 5,
            ..DemandConfig::new(user_dim, item_dim)
        };
        let res = bootstrap_fit(&panel, &config, 3, 11).unwrap();
        assert!(res.se_alpha1.abs() < 1e-12);
        assert!(res.se_pi1.abs() < 1e-12);
    }
}
