use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{GbtConfig, GbtEnsemble, HedonicPanel};
use crate::error::{Error, Result};

/// One adjacent-month link. Fisher = √(L·P) by construction; a link with an
/// empty matched set or zero denominator is flagged and the chain carries
/// forward.
#[derive(Debug, Clone)]
pub struct IndexLink {
    pub from_month: u32,
    pub to_month: u32,
    pub jevons: Option<f64>,
    pub laspeyres: Option<f64>,
    pub paasche: Option<f64>,
    pub fisher: Option<f64>,
    pub matched: usize,
}

#[derive(Debug, Clone)]
pub struct IndexSeries {
    pub links: Vec<IndexLink>,
    /// Chained values, one per month, first month = 1.
    pub months: Vec<u32>,
    pub chained_jevons: Vec<f64>,
    pub chained_fisher: Vec<f64>,
    /// Months whose incoming link was undefined.
    pub gap_flags: Vec<bool>,
    /// Stress-band bounds on the chained Fisher, when computed.
    pub band_low: Option<Vec<f64>>,
    pub band_high: Option<Vec<f64>>,
}

fn observed_price_maps(panel: &HedonicPanel) -> HashMap<u32, HashMap<u64, (f64, f64)>> {
    // month -> article -> (price, quantity); zero-quantity months excluded
    let mut by_month: HashMap<u32, HashMap<u64, (f64, f64)>> = HashMap::new();
    for row in &panel.rows {
        if row.quantity > 0.0 {
            by_month
                .entry(row.month)
                .or_default()
                .insert(row.article_id, (row.log_price.exp(), row.quantity));
        }
    }
    by_month
}

/// Matched-model Jevons index: per link, the geometric mean of raw price
/// relatives over articles present in both adjacent months.
pub fn jevons_index(panel: &HedonicPanel) -> Result<IndexSeries> {
    panel.validate()?;
    let by_month = observed_price_maps(panel);
    let months = panel.months();
    let links = link_months(&months)
        .into_iter()
        .map(|(a, b)| {
            let (ma, mb) = (by_month.get(&a), by_month.get(&b));
            let mut sum_log = 0.0;
            let mut count = 0usize;
            if let (Some(ma), Some(mb)) = (ma, mb) {
                for (id, (pa, _)) in ma {
                    if let Some((pb, _)) = mb.get(id) {
                        sum_log += (pb / pa).ln();
                        count += 1;
                    }
                }
            }
            let jevons = if count > 0 {
                Some((sum_log / count as f64).exp())
            } else {
                None
            };
            IndexLink {
                from_month: a,
                to_month: b,
                jevons,
                laspeyres: None,
                paasche: None,
                fisher: None,
                matched: count,
            }
        })
        .collect();
    Ok(chain(links, months))
}

fn link_months(months: &[u32]) -> Vec<(u32, u32)> {
    months.windows(2).map(|w| (w[0], w[1])).collect()
}

fn chain(links: Vec<IndexLink>, months: Vec<u32>) -> IndexSeries {
    let mut chained_jevons = vec![1.0];
    let mut chained_fisher = vec![1.0];
    let mut gap_flags = vec![false];
    for link in &links {
        let last_j = *chained_jevons.last().unwrap();
        let last_f = *chained_fisher.last().unwrap();
        chained_jevons.push(last_j * link.jevons.unwrap_or(1.0));
        chained_fisher.push(last_f * link.fisher.unwrap_or(1.0));
        gap_flags.push(link.jevons.is_none() && link.fisher.is_none());
    }
    IndexSeries {
        links,
        months,
        chained_jevons,
        chained_fisher,
        gap_flags,
        band_low: None,
        band_high: None,
    }
}

/// Hedonic Fisher index: Laspeyres and Paasche links built from predicted
/// prices on the common article set with observed quantity weights, chained
/// from 1. The prediction for both endpoint months comes from the pooled
/// surface with only the month feature changed. Jevons links from observed
/// prices ride along for comparison.
pub fn fisher_chained(ensemble: &GbtEnsemble, panel: &HedonicPanel) -> Result<IndexSeries> {
    panel.validate()?;
    let month_col = panel
        .month_col
        .ok_or_else(|| Error::contract("fisher_chained needs a pooled panel with a month column"))?;
    let by_month = observed_price_maps(panel);
    // article features per month (for the common-set predictions)
    let mut features: HashMap<(u32, u64), &[f64]> = HashMap::new();
    for row in &panel.rows {
        if row.quantity > 0.0 {
            features.insert((row.month, row.article_id), &row.features);
        }
    }
    let months = panel.months();
    let mut links = Vec::new();
    for (a, b) in link_months(&months) {
        let (ma, mb) = match (by_month.get(&a), by_month.get(&b)) {
            (Some(ma), Some(mb)) => (ma, mb),
            _ => {
                links.push(empty_link(a, b));
                continue;
            }
        };
        let mut l_num = 0.0;
        let mut l_den = 0.0;
        let mut p_num = 0.0;
        let mut p_den = 0.0;
        let mut jl_sum = 0.0;
        let mut matched = 0usize;
        let mut ids: Vec<u64> = ma.keys().filter(|id| mb.contains_key(id)).cloned().collect();
        ids.sort_unstable();
        for id in ids {
            let (pa_obs, qa) = ma[&id];
            let (pb_obs, qb) = mb[&id];
            let mut x = features[&(a, id)].to_vec();
            x[month_col] = a as f64;
            let pa_hat = ensemble.predict(&x)?.exp();
            x[month_col] = b as f64;
            let pb_hat = ensemble.predict(&x)?.exp();
            l_num += pb_hat * qa;
            l_den += pa_hat * qa;
            p_num += pb_hat * qb;
            p_den += pa_hat * qb;
            jl_sum += (pb_obs / pa_obs).ln();
            matched += 1;
        }
        if matched == 0 || l_den <= 0.0 || p_den <= 0.0 {
            links.push(empty_link(a, b));
            continue;
        }
        let l = l_num / l_den;
        let p = p_num / p_den;
        links.push(IndexLink {
            from_month: a,
            to_month: b,
            jevons: Some((jl_sum / matched as f64).exp()),
            laspeyres: Some(l),
            paasche: Some(p),
            fisher: Some((l * p).sqrt()),
            matched,
        });
    }
    Ok(chain(links, months))
}

fn empty_link(a: u32, b: u32) -> IndexLink {
    IndexLink {
        from_month: a,
        to_month: b,
        jevons: None,
        laspeyres: None,
        paasche: None,
        fisher: None,
        matched: 0,
    }
}

/// Per-period variant: one surface per month (time dropped from the feature
/// block), Fisher links from period-specific predictions. Months with fewer
/// than 30 rows fall back to the pooled surface, reported in `warnings`.
pub fn per_period_index(
    panel: &HedonicPanel,
    cfg: &GbtConfig,
    seed: u64,
) -> Result<(IndexSeries, Vec<String>)> {
    panel.validate()?;
    let months = panel.months();
    if months.len() == 1 {
        return Ok((
            IndexSeries {
                links: vec![],
                months,
                chained_jevons: vec![1.0],
                chained_fisher: vec![1.0],
                gap_flags: vec![false],
                band_low: None,
                band_high: None,
            },
            vec![],
        ));
    }
    let mut warnings = Vec::new();

    // drop the month column for period-specific fits
    let strip = |row: &super::HedonicRow| -> Vec<f64> {
        match panel.month_col {
            Some(c) => {
                let mut f = row.features.clone();
                f.remove(c);
                f
            }
            None => row.features.clone(),
        }
    };
    let stripped_width = if panel.month_col.is_some() {
        panel.n_features - 1
    } else {
        panel.n_features
    };

    let mut pooled: Option<GbtEnsemble> = None;
    let mut surfaces: HashMap<u32, GbtEnsemble> = HashMap::new();
    for &m in &months {
        let rows: Vec<&super::HedonicRow> = panel.rows.iter().filter(|r| r.month == m).collect();
        if rows.len() < 30 {
            warnings.push(format!("month {m}: {} rows, falling back to pooled surface", rows.len()));
            if pooled.is_none() {
                let mut x = Vec::new();
                let mut y = Vec::new();
                for r in &panel.rows {
                    x.extend_from_slice(&strip(r));
                    y.push(r.log_price);
                }
                pooled = Some(super::fit_gbt_any_size(&x, stripped_width, &y, cfg, seed)?);
            }
            surfaces.insert(m, pooled.clone().unwrap());
        } else {
            let mut x = Vec::new();
            let mut y = Vec::new();
            for r in &rows {
                x.extend_from_slice(&strip(r));
                y.push(r.log_price);
            }
            surfaces.insert(m, super::fit_gbt_any_size(&x, stripped_width, &y, cfg, seed ^ m as u64)?);
        }
    }

    let by_month = observed_price_maps(panel);
    let mut features: HashMap<(u32, u64), Vec<f64>> = HashMap::new();
    for row in &panel.rows {
        if row.quantity > 0.0 {
            features.insert((row.month, row.article_id), strip(row));
        }
    }
    let mut links = Vec::new();
    for (a, b) in link_months(&months) {
        let (ma, mb) = match (by_month.get(&a), by_month.get(&b)) {
            (Some(ma), Some(mb)) => (ma, mb),
            _ => {
                links.push(empty_link(a, b));
                continue;
            }
        };
        let (fa, fb) = (&surfaces[&a], &surfaces[&b]);
        let mut l_num = 0.0;
        let mut l_den = 0.0;
        let mut p_num = 0.0;
        let mut p_den = 0.0;
        let mut jl_sum = 0.0;
        let mut matched = 0usize;
        let mut ids: Vec<u64> = ma.keys().filter(|id| mb.contains_key(id)).cloned().collect();
        ids.sort_unstable();
        for id in ids {
            let (pa_obs, qa) = ma[&id];
            let (pb_obs, qb) = mb[&id];
            let x = &features[&(a, id)];
            let pa_hat = fa.predict(x)?.exp();
            let pb_hat = fb.predict(x)?.exp();
            l_num += pb_hat * qa;
            l_den += pa_hat * qa;
            p_num += pb_hat * qb;
            p_den += pa_hat * qb;
            jl_sum += (pb_obs / pa_obs).ln();
            matched += 1;
        }
        if matched == 0 || l_den <= 0.0 || p_den <= 0.0 {
            links.push(empty_link(a, b));
            continue;
        }
        let l = l_num / l_den;
        let p = p_num / p_den;
        links.push(IndexLink {
            from_month: a,
            to_month: b,
            jevons: Some((jl_sum / matched as f64).exp()),
            laspeyres: Some(l),
            paasche: Some(p),
            fisher: Some((l * p).sqrt()),
            matched,
        });
    }
    Ok((chain(links, months), warnings))
}

/// Monte Carlo stress band on the chained Fisher: each draw perturbs the
/// predicted prices with residuals resampled from the out-of-fold pool and
/// re-chains the index; returns per-month (p5, p95).
pub fn index_stress_band(
    ensemble: &GbtEnsemble,
    panel: &HedonicPanel,
    oof_residuals: &[f64],
    n_draws: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if oof_residuals.is_empty() {
        return Err(Error::contract("stress band needs out-of-fold residuals"));
    }
    let base = fisher_chained(ensemble, panel)?;
    let n_months = base.months.len();
    let mut draws: Vec<Vec<f64>> = Vec::with_capacity(n_draws);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..n_draws {
        // perturb each link's Fisher by resampled prediction noise on both
        // endpoints (noise enters prices multiplicatively in exp space)
        let mut chained = vec![1.0];
        for link in &base.links {
            let f = match link.fisher {
                Some(f) => {
                    let e0 = oof_residuals[rng.random_range(0..oof_residuals.len())];
                    let e1 = oof_residuals[rng.random_range(0..oof_residuals.len())];
                    // mean residual shift across the matched set scales as 1/√m
                    let scale = 1.0 / (link.matched.max(1) as f64).sqrt();
                    f * ((e1 - e0) * scale).exp()
                }
                None => 1.0,
            };
            chained.push(chained.last().unwrap() * f);
        }
        draws.push(chained);
    }
    let mut low = Vec::with_capacity(n_months);
    let mut high = Vec::with_capacity(n_months);
    for m in 0..n_months {
        let mut vals: Vec<f64> = draws.iter().map(|d| d[m]).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).expect("finite index"));
        let lo_idx = ((n_draws as f64) * 0.05) as usize;
        let hi_idx = (((n_draws as f64) * 0.95) as usize).min(n_draws - 1);
        low.push(vals[lo_idx]);
        high.push(vals[hi_idx]);
    }
    Ok((low, high))
}
