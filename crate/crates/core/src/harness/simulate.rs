use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use super::{SimConfig, SimTruth};
use crate::demand::{ChoiceEvent, ChoicePanel};
use crate::error::Result;
use crate::eventstudy::{EventPanel, EventRow, EventSeries};
use crate::hedonic::{HedonicPanel, HedonicRow};
use crate::numcore::standard_normal;
use crate::parallel::{map_chunks, ExecMode};
use crate::threetower::{ItemCatalog, PurchaseRecord, UserCatalog};

/// Everything one simulated market produces.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub choice_panel: ChoicePanel,
    pub hedonic_panel: HedonicPanel,
    pub event_panel: EventPanel,
    /// Per-unit embeddings for the event units (two planted regimes).
    pub event_unit_points: Vec<f64>,
    pub event_unit_dim: usize,
    pub truth: SimTruth,
    pub purchases: Vec<PurchaseRecord>,
    pub item_catalog: ItemCatalog,
    pub user_catalog: UserCatalog,
}

// rng stream tags so parallel generation never shares a stream
const STREAM_STRUCTURE: u64 = 1;
const STREAM_PRICES: u64 = 2;
const STREAM_EVENTS: u64 = 3;
const STREAM_CONSUMER_BASE: u64 = 1000;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn unit_vector<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| standard_normal(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn clustered_point<R: Rng>(centroid: &[f64], separation: f64, rng: &mut R) -> Vec<f64> {
    let mut v: Vec<f64> = centroid
        .iter()
        .map(|&c| separation * c + standard_normal(rng))
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    v
}

/// Draws the full synthetic market: purchases come exactly from the planted
/// latent-class logit (class fixed per consumer, occasions drawn against
/// the outside good), prices carry within-product markdown variation, and
/// the hedonic/event panels are derived views plus a planted daily count
/// process. Per-consumer counter-based RNG streams keep parallel generation
/// bit-reproducible.
pub fn simulate_market(config: &SimConfig) -> Result<SimOutput> {
    config.validate()?;
    let c = config;
    let (i_n, j_n, t_n) = (c.n_consumers, c.n_items, c.n_weeks);
    let k = 16usize;
    let c_n = c.n_classes;
    let mut structure = stream_rng(c.seed, STREAM_STRUCTURE);

    // planted cluster geometry
    let g = c.taste_clusters;
    let item_centroids: Vec<Vec<f64>> = (0..g).map(|_| unit_vector(c.item_dim, &mut structure)).collect();
    let user_centroids: Vec<Vec<f64>> = (0..g).map(|_| unit_vector(c.user_dim, &mut structure)).collect();
    let item_cluster: Vec<usize> = (0..j_n).map(|j| j % g).collect();
    let consumer_cluster: Vec<usize> = (0..i_n).map(|i| i % g).collect();

    let mut item_features = Vec::with_capacity(j_n * c.item_dim);
    for j in 0..j_n {
        item_features.extend(clustered_point(
            &item_centroids[item_cluster[j]],
            c.taste_separation,
            &mut structure,
        ));
    }
    let mut consumer_embeddings = Vec::with_capacity(i_n * c.user_dim);
    for i in 0..i_n {
        consumer_embeddings.extend(clustered_point(
            &user_centroids[consumer_cluster[i]],
            c.taste_separation,
            &mut structure,
        ));
    }

    // planted taste maps per class: t_j^c = normalize(A_c x_j),
    // r_i^c = scale · normalize(B_c d_i)
    let a_maps: Vec<Vec<f64>> = (0..c_n)
        .map(|_| (0..k * c.item_dim).map(|_| standard_normal(&mut structure)).collect())
        .collect();
    let b_maps: Vec<Vec<f64>> = (0..c_n)
        .map(|_| (0..k * c.user_dim).map(|_| standard_normal(&mut structure)).collect())
        .collect();
    let project_unit = |map: &[f64], x: &[f64], in_dim: usize| -> Vec<f64> {
        let mut out = vec![0.0; k];
        crate::numcore::matvec_into(map, k, in_dim, x, &mut out);
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        out.into_iter().map(|v| v / norm).collect()
    };
    let mut taste_t = vec![0.0; c_n * j_n * k];
    for cls in 0..c_n {
        for j in 0..j_n {
            let t = project_unit(&a_maps[cls], &item_features[j * c.item_dim..(j + 1) * c.item_dim], c.item_dim);
            taste_t[(cls * j_n + j) * k..(cls * j_n + j + 1) * k].copy_from_slice(&t);
        }
    }
    let mut taste_r = vec![0.0; i_n * c_n * k];
    for i in 0..i_n {
        for cls in 0..c_n {
            let mut r = project_unit(&b_maps[cls], &consumer_embeddings[i * c.user_dim..(i + 1) * c.user_dim], c.user_dim);
            for v in &mut r {
                *v *= c.taste_scale;
            }
            taste_r[(i * c_n + cls) * k..(i * c_n + cls + 1) * k].copy_from_slice(&r);
        }
    }

    // planted seasonal shift δ_m = W z_m with zero-sum codes
    let seasonal_rank = 8usize;
    let mut w0: Vec<f64> = (0..k * seasonal_rank)
        .map(|_| standard_normal(&mut structure) * c.seasonal_amplitude / (seasonal_rank as f64).sqrt())
        .collect();
    let mut z0: Vec<f64> = (0..12 * seasonal_rank).map(|_| standard_normal(&mut structure)).collect();
    for s in 0..seasonal_rank {
        let mean: f64 = (0..12).map(|m| z0[m * seasonal_rank + s]).sum::<f64>() / 12.0;
        for m in 0..12 {
            z0[m * seasonal_rank + s] -= mean;
        }
    }
    if c.seasonal_amplitude == 0.0 {
        w0.iter_mut().for_each(|v| *v = 0.0);
    }
    let mut delta = vec![0.0; 12 * k];
    for m in 0..12 {
        crate::numcore::matvec_into(
            &w0,
            k,
            seasonal_rank,
            &z0[m * seasonal_rank..(m + 1) * seasonal_rank],
            &mut delta[m * k..(m + 1) * k],
        );
    }

    // class membership per consumer
    let class_labels: Vec<usize> = (0..i_n)
        .map(|i| {
            let mut rng = stream_rng(c.seed, STREAM_CONSUMER_BASE + i as u64);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (cls, &p) in c.pi.iter().enumerate() {
                acc += p;
                if u <= acc {
                    return cls;
                }
            }
            c_n - 1
        })
        .collect();
    let alpha_by_consumer: Vec<f64> = class_labels.iter().map(|&z| c.alpha[z]).collect();

    // prices: lognormal base matched to the (median, p90) quantiles, with
    // weekly markdown shocks
    let mut price_rng = stream_rng(c.seed, STREAM_PRICES);
    let sigma = (c.price_p90.ln() - c.price_median.ln()) / 1.2815515655446004;
    let base_price: Vec<f64> = (0..j_n)
        .map(|_| (c.price_median.ln() + sigma * standard_normal(&mut price_rng)).exp())
        .collect();
    let mut prices = vec![0.0; j_n * t_n];
    for j in 0..j_n {
        for t in 0..t_n {
            let markdown = if price_rng.random::<f64>() < c.markdown_freq {
                1.0 - price_rng.random_range(0.1..c.markdown_depth_max)
            } else {
                1.0
            };
            prices[j * t_n + t] = base_price[j] * markdown;
        }
    }
    let week_month: Vec<u8> = (0..t_n).map(|t| (((t * 7 + 3) / 30) % 12 + 1) as u8).collect();

    // class biases: bisect b_c so each class's mean inside share hits the
    // target — purchase counts then carry no class signal, matching the
    // estimator's purchase-conditional likelihood
    let utility = |i: usize, cls: usize, j: usize, t: usize, bias: f64| -> f64 {
        let month = week_month[t] as usize - 1;
        let r = &taste_r[(i * c_n + cls) * k..(i * c_n + cls + 1) * k];
        let tv = &taste_t[(cls * j_n + j) * k..(cls * j_n + j + 1) * k];
        let d = &delta[month * k..(month + 1) * k];
        let taste: f64 = r.iter().zip(d).zip(tv).map(|((a, b), t)| (a + b) * t).sum();
        c.alpha[cls] * prices[j * t_n + t] + taste + bias
    };
    // representative consumer subsample keeps the bisection cheap
    let calib_sample: Vec<usize> = (0..i_n).step_by((i_n / 200).max(1)).collect();
    let mut class_bias = vec![0.0; c_n];
    for (cls, bias_slot) in class_bias.iter_mut().enumerate() {
        let share_at = |b: f64| -> f64 {
            let mut total = 0.0;
            let mut count = 0usize;
            for &i in &calib_sample {
                for t in 0..t_n {
                    let mut denom = 1.0; // exp(v0 = 0)
                    let mut inside = 0.0;
                    for j in 0..j_n {
                        let e = utility(i, cls, j, t, b).exp();
                        inside += e;
                        denom += e;
                    }
                    total += inside / denom;
                    count += 1;
                }
            }
            total / count as f64
        };
        let (mut lo, mut hi) = (-30.0, 30.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if share_at(mid) > c.inside_share {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        *bias_slot = 0.5 * (lo + hi);
    }

    // choice occasions: exact planted-logit draws per consumer stream
    let per_consumer: Vec<(Vec<ChoiceEvent>, usize)> =
        map_chunks(i_n, 64, ExecMode::Auto, |range| {
            let mut out = Vec::with_capacity(range.len());
            for i in range {
                let mut rng = stream_rng(c.seed, STREAM_CONSUMER_BASE + i as u64);
                let _burn: f64 = rng.random(); // class draw consumed this stream's first value
                let cls = class_labels[i];
                let mut events = Vec::new();
                let mut occasions = 0usize;
                let mut probs = vec![0.0; j_n + 1];
                for t in 0..t_n {
                    // choice probabilities for this consumer-week
                    let mut max_u = 0.0f64; // outside utility 0
                    let mut us = vec![0.0; j_n];
                    for j in 0..j_n {
                        us[j] = utility(i, cls, j, t, class_bias[cls]);
                        max_u = max_u.max(us[j]);
                    }
                    let mut denom = (0.0 - max_u).exp();
                    for j in 0..j_n {
                        probs[j] = (us[j] - max_u).exp();
                        denom += probs[j];
                    }
                    for p in probs.iter_mut().take(j_n) {
                        *p /= denom;
                    }
                    for _ in 0..c.occasions_per_week {
                        occasions += 1;
                        let mut u: f64 = rng.random();
                        let mut chosen = None;
                        for j in 0..j_n {
                            u -= probs[j];
                            if u <= 0.0 {
                                chosen = Some(j);
                                break;
                            }
                        }
                        if let Some(j) = chosen {
                            events.push(ChoiceEvent { consumer: i, item: j, week: t });
                        }
                    }
                }
                out.push((events, occasions));
            }
            out
        })
        .into_iter()
        .flatten()
        .collect();
    let mut events = Vec::new();
    let mut total_occasions = 0usize;
    for (ev, occ) in per_consumer {
        events.extend(ev);
        total_occasions += occ;
    }
    let realized_inside_share = events.len() as f64 / total_occasions as f64;

    let choice_panel = ChoicePanel {
        consumer_ids: (0..i_n as u64).collect(),
        item_ids: (0..j_n as u64).collect(),
        consumer_embeddings: consumer_embeddings.clone(),
        user_dim: c.user_dim,
        item_features: item_features.clone(),
        item_dim: c.item_dim,
        prices: prices.clone(),
        n_weeks: t_n,
        events: events.clone(),
        week_month: week_month.clone(),
        lambda_hat: vec![0.0; j_n],
    };
    choice_panel.validate()?;

    // purchase records for the three-tower stage; categories are the
    // planted item clusters
    let purchases: Vec<PurchaseRecord> = events
        .iter()
        .map(|ev| PurchaseRecord {
            consumer_id: ev.consumer as u64,
            item_id: ev.item as u64,
            category_id: item_cluster[ev.item] as u32,
            week: ev.week as u32,
            price: prices[ev.item * t_n + ev.week],
            log_ref_price: base_price[ev.item].ln(),
        })
        .collect();
    let item_catalog = ItemCatalog::new(
        (0..j_n as u64).collect(),
        item_features.clone(),
        c.item_dim,
        item_cluster.iter().map(|&g| g as u32).collect(),
        base_price.iter().map(|p| p.ln()).collect(),
    )?;
    // raw user features: noisy random rotation of the planted embedding
    let rot: Vec<f64> = (0..c.user_feature_dim * c.user_dim)
        .map(|_| standard_normal(&mut structure) / (c.user_dim as f64).sqrt())
        .collect();
    let mut user_features = Vec::with_capacity(i_n * c.user_feature_dim);
    for i in 0..i_n {
        let mut rng = stream_rng(c.seed, STREAM_CONSUMER_BASE + i as u64);
        for _ in 0..2 {
            let _burn: f64 = rng.random();
        }
        let d = &consumer_embeddings[i * c.user_dim..(i + 1) * c.user_dim];
        for rrow in 0..c.user_feature_dim {
            let mut acc = 0.0;
            for (col, dv) in d.iter().enumerate() {
                acc += rot[rrow * c.user_dim + col] * dv;
            }
            user_features.push(acc + 0.05 * standard_normal(&mut rng));
        }
    }
    let user_catalog = UserCatalog::new((0..i_n as u64).collect(), user_features, c.user_feature_dim)?;

    // hedonic panel: article-month rows (mean log price, purchase counts)
    // with features = item vector + absolute month index
    let n_months = *week_month.iter().max().unwrap() as usize;
    let mut hedonic_rows = Vec::new();
    for j in 0..j_n {
        for m in 1..=n_months {
            let weeks: Vec<usize> = (0..t_n).filter(|&t| week_month[t] as usize == m).collect();
            if weeks.is_empty() {
                continue;
            }
            let mean_log_p = weeks.iter().map(|&t| prices[j * t_n + t].ln()).sum::<f64>()
                / weeks.len() as f64;
            let qty = events
                .iter()
                .filter(|e| e.item == j && weeks.contains(&e.week))
                .count() as f64;
            let mut feats = item_features[j * c.item_dim..(j + 1) * c.item_dim].to_vec();
            feats.push(m as f64);
            hedonic_rows.push(HedonicRow {
                article_id: j as u64,
                month: m as u32,
                log_price: mean_log_p,
                quantity: qty,
                features: feats,
            });
        }
    }
    let hedonic_panel = HedonicPanel {
        rows: hedonic_rows,
        n_features: c.item_dim + 1,
        month_col: Some(c.item_dim),
    };

    // true marginal costs for supply round trips: a stable fraction of base
    // price
    let marginal_costs: Vec<f64> = base_price.iter().map(|p| 0.4 * p).collect();

    // event-study panel: planted Poisson process over two response regimes
    let (event_panel, event_kappa, event_regime, event_unit_points) =
        simulate_event_panel(c, &mut stream_rng(c.seed, STREAM_EVENTS))?;

    let truth = SimTruth {
        alpha_class: c.alpha.clone(),
        alpha_by_consumer,
        class_labels,
        pi: c.pi.clone(),
        v0: 0.0,
        class_bias,
        taste_r,
        taste_t,
        delta,
        taste_rank: k,
        item_cluster,
        consumer_cluster,
        marginal_costs,
        event_kappa,
        event_regime,
        realized_inside_share,
    };
    Ok(SimOutput {
        choice_panel,
        hedonic_panel,
        event_panel,
        event_unit_points,
        event_unit_dim: 2,
        truth,
        purchases,
        item_catalog,
        user_catalog,
    })
}

type EventSim = (EventPanel, Vec<Vec<f64>>, Vec<usize>, Vec<f64>);

/// Daily counts per unit with a planted structural break: trend, month
/// seasonality, four post-shock periods, day-of-week effects, and a
/// deep-discount flag. Units split into two response regimes whose lockdown
/// coefficients differ sharply; unit embeddings are two planted blobs so
/// clustering recovers the regimes.
fn simulate_event_panel(config: &SimConfig, rng: &mut ChaCha8Rng) -> Result<EventSim> {
    let n_units = config.event_units;
    let days = config.event_days;
    let labels = ["WHO", "Lockdown", "Reopening", "PostRecovery"];
    // period windows as day ranges near the end of the panel
    let shock = (days as f64 * 0.66) as u32;
    let spans = [
        (shock, shock + 14),
        (shock + 14, shock + 63),
        (shock + 63, shock + 140),
        (shock + 140, days as u32),
    ];
    let regime_kappa = [
        [-0.15, -0.5, -0.2, -0.05],
        [0.05, 0.1, 0.05, 0.02],
    ];
    let mut units = Vec::with_capacity(n_units);
    let mut kappas = Vec::with_capacity(n_units);
    let mut regimes = Vec::with_capacity(n_units);
    let mut points = Vec::with_capacity(n_units * 2);
    for u in 0..n_units {
        let regime = if u < n_units.div_ceil(2) { 0 } else { 1 };
        regimes.push(regime);
        points.push(regime as f64 * 6.0 + 0.3 * standard_normal(rng));
        points.push(0.3 * standard_normal(rng));
        let mu0: f64 = 3.2 + 0.3 * standard_normal(rng);
        let trend = 0.1;
        let month_amp = 0.2;
        let dow_effect = [0.0, -0.05, -0.08, -0.02, 0.05, 0.15, 0.1];
        let discount_effect = 0.25;
        let kappa: Vec<f64> = regime_kappa[regime].to_vec();
        let mut rows = Vec::with_capacity(days);
        for d in 0..days as u32 {
            let month = ((d / 30) % 12 + 1) as u8;
            let dow = (d % 7) as u8;
            let period = spans.iter().position(|&(a, b)| d >= a && d < b);
            let discount = rng.random::<f64>() < 0.1;
            let t_frac = d as f64 / (days as f64 - 1.0);
            let mut log_mu = mu0
                + trend * t_frac
                + month_amp * (2.0 * std::f64::consts::PI * (month as f64 - 1.0) / 12.0).sin()
                + dow_effect[dow as usize]
                + if discount { discount_effect } else { 0.0 };
            if let Some(p) = period {
                log_mu += kappa[p];
            }
            let mu = log_mu.exp();
            let count = if mu > 0.0 {
                Poisson::new(mu)
                    .map(|d| d.sample(rng))
                    .unwrap_or(0.0) as u64
            } else {
                0
            };
            rows.push(EventRow {
                day: d,
                count,
                month,
                dow,
                period,
                discount,
            });
        }
        units.push(EventSeries {
            unit_id: u as u64,
            rows,
        });
        kappas.push(kappa);
    }
    let panel = EventPanel {
        units,
        period_labels: labels.iter().map(|s| s.to_string()).collect(),
    };
    panel.validate()?;
    Ok((panel, kappas, regimes, points))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_determinism_identical_outputs() {
        let config = SimConfig::smoke(7);
        let a = simulate_market(&config).unwrap();
        let b = simulate_market(&config).unwrap();
        assert_eq!(a.choice_panel.events, b.choice_panel.events);
        assert_eq!(a.choice_panel.prices, b.choice_panel.prices);
        assert_eq!(a.truth.class_labels, b.truth.class_labels);
        assert_eq!(
            a.truth.realized_inside_share.to_bits(),
            b.truth.realized_inside_share.to_bits()
        );
    }

    #[test]
    fn realized_inside_share_near_target() {
        let config = SimConfig {
            n_consumers: 600,
            occasions_per_week: 20,
            ..SimConfig::smoke(11)
        };
        let out = simulate_market(&config).unwrap();
        assert!(
            (out.truth.realized_inside_share - config.inside_share).abs() < 0.005,
            "realized {} vs target {}",
            out.truth.realized_inside_share,
            config.inside_share
        );
    }

    #[test]
    fn tiny_instance_frequencies_match_planted_probabilities() {
        // I=3, J=2, T=1, many occasions: empirical choice frequencies within
        // 3σ binomial bands of the exact planted probabilities
        let config = SimConfig {
            n_consumers: 3,
            n_items: 2,
            n_weeks: 1,
            user_dim: 8,
            item_dim: 8,
            user_feature_dim: 4,
            taste_clusters: 2,
            occasions_per_week: 1_000_000,
            inside_share: 0.3,
            event_units: 2,
            event_days: 60,
            ..SimConfig::smoke(13)
        };
        let out = simulate_market(&config).unwrap();
        let c = &config;
        let truth = &out.truth;
        let prices = &out.choice_panel.prices;
        let k = truth.taste_rank;
        for i in 0..3usize {
            let cls = truth.class_labels[i];
            // exact probabilities from the planted parameters
            let mut us = [0.0f64; 2];
            for j in 0..2usize {
                let r = &truth.taste_r[(i * c.n_classes + cls) * k..(i * c.n_classes + cls + 1) * k];
                let tv = &truth.taste_t[(cls * 2 + j) * k..(cls * 2 + j + 1) * k];
                let d = &truth.delta[(out.choice_panel.week_month[0] as usize - 1) * k..];
                let taste: f64 = r.iter().zip(&d[..k]).zip(tv).map(|((a, b), t)| (a + b) * t).sum();
                us[j] = c.alpha[cls] * prices[j] + taste + truth.class_bias[cls];
            }
            let denom = 1.0 + us[0].exp() + us[1].exp();
            for j in 0..2usize {
                let p = us[j].exp() / denom;
                let n_ij = out
                    .choice_panel
                    .events
                    .iter()
                    .filter(|e| e.consumer == i && e.item == j)
                    .count() as f64;
                let n = 1_000_000.0;
                let band = 3.0 * (p * (1.0 - p) * n).sqrt();
                assert!(
                    (n_ij - p * n).abs() < band,
                    "consumer {i} item {j}: {} vs {} ± {band}",
                    n_ij,
                    p * n
                );
            }
        }
    }

    #[test]
    fn event_panel_has_planted_heterogeneity() {
        let config = SimConfig::smoke(17);
        let out = simulate_market(&config).unwrap();
        assert_eq!(out.truth.event_kappa.len(), config.event_units);
        let lockdown: Vec<f64> = out.truth.event_kappa.iter().map(|k| k[1]).collect();
        let lo = lockdown.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = lockdown.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(hi - lo > 0.5, "planted range {}-{}", lo, hi);
    }
}
