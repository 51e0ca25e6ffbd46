use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::hedonic::{HedonicPanel, HedonicRow};
use crate::numcore::standard_normal;

/// Synthetic turnover panel with constant quality-adjusted prices: each
/// article enters at a price determined by its quality features, is marked
/// down a fixed rate per month of age, and exits after a fixed lifespan to
/// be replaced by an entrant with slightly pricier features. The age mix is
/// stationary (the panel starts mid-stream), so the surface's month effect
/// is flat while matched-model relatives all carry the markdown — the
/// composition-bias mechanism in isolation.
pub fn simulate_turnover_panel(
    cohort_size: usize,
    lifespan_months: usize,
    n_months: usize,
    markdown_per_month: f64,
    quality_trend: f64,
    seed: u64,
) -> Result<HedonicPanel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut next_id: u64 = 0;
    // live set: (article id, quality, entry month as i64 so pre-panel
    // entries give a stationary age mix)
    let mut live: Vec<(u64, f64, i64)> = Vec::new();
    for age in (0..lifespan_months).rev() {
        for _ in 0..cohort_size {
            let entry = -(age as i64);
            let q = quality_trend * entry as f64 + standard_normal(&mut rng);
            live.push((next_id, q, entry));
            next_id += 1;
        }
    }
    for month in 0..n_months as i64 {
        // retire exhausted articles, enroll a fresh cohort
        live.retain(|&(_, _, entry)| month - entry < lifespan_months as i64);
        if month > 0 {
            for _ in 0..cohort_size {
                let q = quality_trend * month as f64 + standard_normal(&mut rng);
                live.push((next_id, q, month));
                next_id += 1;
            }
        }
        for &(id, q, entry) in &live {
            let age = (month - entry) as f64;
            let log_price = 2.5 + 0.4 * q + age * (1.0 - markdown_per_month).ln()
                + 0.01 * standard_normal(&mut rng);
            rows.push(HedonicRow {
                article_id: id,
                month: month as u32,
                log_price,
                quantity: 1.0 + rng.random::<f64>().floor(),
                features: vec![q, 0.3 * q + 0.1 * standard_normal(&mut rng), month as f64],
            });
        }
    }
    let panel = HedonicPanel {
        rows,
        n_features: 3,
        month_col: Some(2),
    };
    panel.validate()?;
    Ok(panel)
}
