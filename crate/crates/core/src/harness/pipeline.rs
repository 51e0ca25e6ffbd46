use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::io;
use super::modelio;
use super::{simulate_market, KvConfig, SimConfig, SimOutput};
use crate::counterfactual::{
    collapse_taste, prune_assortment, recall_at_k, score_new_designs, segment_pricing_ladder,
};
use crate::demand::{
    calibrate_v0, control_function_residual, em_fit, CompiledDemand, DemandConfig, MarketView,
};
use crate::error::{Error, Result};
use crate::eventstudy::{
    ari, bh_fdr, build_design, effect_pct, kmeans, nmi, poisson_qmle_hac, seed_stability,
    significance_stars,
};
use crate::hedonic::{
    conformal_band, fisher_chained, fit_gbt_any_size, fit_hedonic_surface, index_stress_band,
    jevons_index, ob_decompose, per_period_index, time_dummy_index, GbtConfig, HedonicPanel,
};
use crate::market::{
    cluster_substitution, decomposition_r2, elasticity_matrix, invert_markups, share_derivatives,
    MarketState, Ownership,
};
use crate::threetower::{extract_embeddings, hit_at_k, train_three_tower, TowerConfig};

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub sim: SimConfig,
    pub tau: f64,
    pub demand_epochs: usize,
    pub demand_lr: f64,
    pub tower_epochs: usize,
    pub tower_emb_dim: usize,
    pub tower_hidden: usize,
    pub prune_depths: Vec<f64>,
    pub ladder_segments: Vec<usize>,
    pub collapse_sigma: f64,
    pub recall_k: usize,
    pub n_designs: usize,
    pub tau_sweep: Vec<f64>,
    pub event_lag: usize,
    pub fdr_q: f64,
    /// Seed for the clustering stages (the ladder shares it).
    pub kmeans_seed: u64,
}

impl PipelineConfig {
    pub fn smoke(seed: u64) -> Self {
        PipelineConfig {
            sim: SimConfig::smoke(seed),
            tau: 0.04,
            demand_epochs: 60,
            demand_lr: 0.03,
            tower_epochs: 6,
            tower_emb_dim: 16,
            tower_hidden: 32,
            prune_depths: vec![0.0, 0.2, 0.4],
            ladder_segments: vec![1, 2, 4],
            collapse_sigma: 1.0,
            recall_k: 10,
            n_designs: 12,
            tau_sweep: vec![0.02, 0.04, 0.10, 0.30],
            event_lag: 7,
            fdr_q: 0.05,
            kmeans_seed: 7,
        }
    }

    /// Reads overrides from a plain key=value config.
    pub fn from_kv(kv: &KvConfig, seed: u64) -> Result<Self> {
        let mut cfg = PipelineConfig::smoke(seed);
        let sim = &mut cfg.sim;
        sim.n_consumers = kv.get_or("consumers", sim.n_consumers)?;
        sim.n_items = kv.get_or("items", sim.n_items)?;
        sim.n_weeks = kv.get_or("weeks", sim.n_weeks)?;
        sim.user_dim = kv.get_or("user_dim", sim.user_dim)?;
        sim.item_dim = kv.get_or("item_dim", sim.item_dim)?;
        sim.user_feature_dim = kv.get_or("user_feature_dim", sim.user_feature_dim)?;
        sim.occasions_per_week = kv.get_or("occasions_per_week", sim.occasions_per_week)?;
        sim.inside_share = kv.get_or("inside_share", sim.inside_share)?;
        sim.taste_clusters = kv.get_or("taste_clusters", sim.taste_clusters)?;
        sim.seasonal_amplitude = kv.get_or("seasonal_amplitude", sim.seasonal_amplitude)?;
        sim.event_units = kv.get_or("event_units", sim.event_units)?;
        sim.event_days = kv.get_or("event_days", sim.event_days)?;
        sim.seed = seed;
        cfg.tau = kv.get_or("tau", cfg.tau)?;
        cfg.demand_epochs = kv.get_or("demand_epochs", cfg.demand_epochs)?;
        cfg.demand_lr = kv.get_or("demand_lr", cfg.demand_lr)?;
        cfg.tower_epochs = kv.get_or("tower_epochs", cfg.tower_epochs)?;
        cfg.event_lag = kv.get_or("event_lag", cfg.event_lag)?;
        cfg.fdr_q = kv.get_or("fdr", cfg.fdr_q)?;
        cfg.kmeans_seed = kv.get_or("kmeans_seed", cfg.kmeans_seed)?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub files: Vec<PathBuf>,
    pub convergence_flags: usize,
}

fn fmt(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.8}")
    } else {
        "nan".to_string()
    }
}

/// Runs the whole pipeline on a synthetic market and writes every report
/// file under `out_dir`. Byte-reproducible given the seed (no timestamps,
/// ordered iteration everywhere).
pub fn run_pipeline(config: &PipelineConfig, out_dir: &Path) -> Result<PipelineReport> {
    std::fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();
    let mut flags = 0usize;

    // ── simulate ──
    let sim = simulate_market(&config.sim)?;
    let panel_dir = out_dir.join("panel");
    io::write_choice_panel(&panel_dir, &sim.choice_panel)?;
    io::write_purchases_csv(&panel_dir.join("purchases.csv"), &sim.purchases)?;
    io::write_embeddings(
        &panel_dir.join("user_features.emb"),
        &io::EmbeddingFile {
            ids: sim.user_catalog.ids.clone(),
            dim: sim.user_catalog.dim,
            values: sim.user_catalog.features.clone(),
        },
    )?;
    io::write_hedonic_panel_csv(&out_dir.join("hedonic_panel.csv"), &sim.hedonic_panel)?;
    io::write_events_daily_csv(&out_dir.join("events_daily.csv"), &sim.event_panel)?;
    for name in [
        "panel/consumers.emb",
        "panel/items.emb",
        "panel/prices.csv",
        "panel/events.csv",
        "panel/months.csv",
        "panel/purchases.csv",
        "hedonic_panel.csv",
        "events_daily.csv",
    ] {
        files.push(out_dir.join(name));
    }

    // ── three-tower stage + retrieval/embedding diagnostics ──
    let tower_cfg = TowerConfig {
        emb_dim: config.tower_emb_dim,
        user_hidden: config.tower_hidden,
        item_hidden: config.tower_hidden,
        price_hidden: 8,
        epochs: config.tower_epochs,
        negatives: 32,
        ..TowerConfig::new(config.sim.item_dim, config.sim.user_feature_dim)
    };
    let split = (sim.purchases.len() * 9) / 10;
    let (tower_model, tower_report) = train_three_tower(
        &sim.purchases[..split],
        &sim.item_catalog,
        &sim.user_catalog,
        &tower_cfg,
        config.sim.seed,
    )?;
    let emb = extract_embeddings(&tower_model, &sim.item_catalog, &sim.user_catalog)?;
    io::write_embeddings(
        &out_dir.join("tower_items.emb"),
        &io::EmbeddingFile {
            ids: emb.item_ids.clone(),
            dim: emb.dim,
            values: emb.item.clone(),
        },
    )?;
    io::write_embeddings(
        &out_dir.join("tower_users.emb"),
        &io::EmbeddingFile {
            ids: emb.user_ids.clone(),
            dim: emb.dim,
            values: emb.user.clone(),
        },
    )?;
    files.push(out_dir.join("tower_items.emb"));
    files.push(out_dir.join("tower_users.emb"));
    {
        let heldout = &sim.purchases[split..];
        let mut rows = Vec::new();
        for k in [1usize, 5, 10] {
            let rate = hit_at_k(&tower_model, heldout, &sim.item_catalog, &sim.user_catalog, k)?;
            let cat_size = config.sim.n_items as f64 / config.sim.taste_clusters as f64;
            rows.push(format!("hit_at_{k},{},{}", fmt(rate), fmt(k as f64 / cat_size)));
        }
        rows.push(format!(
            "train_skipped,{},0",
            tower_report.skipped_records
        ));
        rows.push(format!(
            "best_epoch,{},0",
            tower_report.best_epoch
        ));
        // embedding diagnostics: share/price prediction R² and cluster profiles
        let shares = item_sales_share(&sim);
        let log_shares: Vec<f64> = shares.iter().map(|s| (s + 1e-9).ln()).collect();
        let mean_prices: Vec<f64> = sim.choice_panel.mean_prices();
        let log_prices: Vec<f64> = mean_prices.iter().map(|p| p.ln()).collect();
        rows.push(format!(
            "r2_log_shares_ols,{},0",
            fmt(ols_r2(&emb.item, emb.dim, &log_shares))
        ));
        rows.push(format!(
            "r2_log_prices_ols,{},0",
            fmt(ols_r2(&emb.item, emb.dim, &log_prices))
        ));
        let gbt_cfg = GbtConfig {
            n_trees: 80,
            min_leaf: 5,
            ..GbtConfig::default()
        };
        rows.push(format!(
            "r2_log_shares_gbt,{},0",
            fmt(gbt_r2(&emb.item, emb.dim, &log_shares, &gbt_cfg))
        ));
        rows.push(format!(
            "r2_log_prices_gbt,{},0",
            fmt(gbt_r2(&emb.item, emb.dim, &log_prices, &gbt_cfg))
        ));
        let profile = kmeans(&emb.item, emb.dim, 4.min(config.sim.n_items), config.kmeans_seed)?;
        let mut volume = vec![0.0; profile.k];
        let mut price_sum = vec![0.0; profile.k];
        let mut count = vec![0usize; profile.k];
        for j in 0..config.sim.n_items {
            volume[profile.labels[j]] += shares[j];
            price_sum[profile.labels[j]] += mean_prices[j];
            count[profile.labels[j]] += 1;
        }
        let total_volume: f64 = volume.iter().sum();
        for g in 0..profile.k {
            rows.push(format!(
                "cluster_{g}_profile,{},{}",
                fmt(price_sum[g] / count[g].max(1) as f64),
                fmt(volume[g] / total_volume.max(1e-12))
            ));
        }
        io::write_csv(&out_dir.join("embed_diagnostics.csv"), "metric,value,baseline", &rows)?;
        files.push(out_dir.join("embed_diagnostics.csv"));
    }

    // ── control function ──
    let mut panel = sim.choice_panel.clone();
    let lambda = control_function_residual(
        &panel.item_features,
        panel.item_dim,
        &panel.mean_log_prices(),
        config.sim.seed ^ 0xCF,
    )?;
    panel.lambda_hat = lambda.clone();
    {
        let rows: Vec<String> = panel
            .item_ids
            .iter()
            .zip(&lambda)
            .map(|(id, l)| format!("{id},{}", fmt(*l)))
            .collect();
        io::write_csv(&out_dir.join("lambda.csv"), "item_id,lambda_hat", &rows)?;
        files.push(out_dir.join("lambda.csv"));
    }

    // ── demand fit ──
    let demand_cfg = DemandConfig {
        epochs: config.demand_epochs,
        lr: config.demand_lr,
        ..DemandConfig::new(panel.user_dim, panel.item_dim)
    };
    let (mut model, fit_report) = em_fit(&panel, &demand_cfg, config.sim.seed)?;
    if fit_report.class_collapse {
        flags += 1;
    }
    {
        let rows: Vec<String> = fit_report
            .trace
            .iter()
            .map(|e| {
                format!(
                    "{},{},{},{}",
                    e.epoch,
                    fmt(e.train_nll),
                    fmt(e.val_nll),
                    fmt(e.pi1)
                )
            })
            .collect();
        io::write_csv(&out_dir.join("fit_trace.csv"), "epoch,train_nll,val_nll,pi1", &rows)?;
        files.push(out_dir.join("fit_trace.csv"));
    }

    // ── V0 calibration + supply ──
    let compiled_pre = CompiledDemand::compile(&model, &panel)?;
    let pooled = MarketView::pooled(&compiled_pre, &panel)?;
    model.v0 = calibrate_v0(&compiled_pre, &pooled, config.tau)?;
    modelio::save_model(&out_dir.join("model.bin"), &model)?;
    modelio::write_model_sidecar(&out_dir.join("model.bin.txt"), &model, Some(&fit_report))?;
    files.push(out_dir.join("model.bin"));
    files.push(out_dir.join("model.bin.txt"));

    let compiled = CompiledDemand::compile(&model, &panel)?;
    let pooled = MarketView::pooled(&compiled, &panel)?;
    let (shares, jacobian) = share_derivatives(&compiled, &pooled)?;
    let eps = elasticity_matrix(&shares, &jacobian, &pooled.prices)?;
    let n = pooled.items.len();
    let state = MarketState {
        items: pooled.items.clone(),
        prices: pooled.prices.clone(),
        shares: shares.clone(),
        jacobian: jacobian.clone(),
        ownership: Ownership::Monopolist,
    };
    let supply = invert_markups(&state)?;
    {
        let rows: Vec<String> = (0..n)
            .map(|slot| {
                let j = pooled.items[slot];
                format!(
                    "{},{},{},{},{},{},{}",
                    panel.item_ids[j],
                    fmt(pooled.prices[slot]),
                    fmt(shares[slot]),
                    fmt(eps[slot * n + slot]),
                    fmt(supply.markups[slot]),
                    fmt(supply.marginal_costs[slot]),
                    fmt(supply.lerner[slot])
                )
            })
            .collect();
        io::write_csv(
            &out_dir.join("supply.csv"),
            "item_id,price,share,eps_own,markup,mc,lerner",
            &rows,
        )?;
        files.push(out_dir.join("supply.csv"));
    }
    {
        // τ-sensitivity sweep: recalibrate V0 per τ and re-invert
        let mut rows = Vec::new();
        for &tau in &config.tau_sweep {
            let v0 = calibrate_v0(&compiled, &pooled, tau)?;
            let mut c2 = compiled.clone();
            c2.v0 = v0;
            let (s2, j2) = share_derivatives(&c2, &pooled)?;
            let e2 = elasticity_matrix(&s2, &j2, &pooled.prices)?;
            let st = MarketState {
                items: pooled.items.clone(),
                prices: pooled.prices.clone(),
                shares: s2,
                jacobian: j2,
                ownership: Ownership::Monopolist,
            };
            let sup = invert_markups(&st)?;
            let mean_abs_eps =
                (0..n).map(|k| e2[k * n + k].abs()).sum::<f64>() / n as f64;
            let mean_mc_pos: f64 = sup
                .marginal_costs
                .iter()
                .filter(|&&m| m > 0.0)
                .sum::<f64>()
                / sup.mc_positive.max(1) as f64;
            let mean_lerner = sup.lerner.iter().sum::<f64>() / n as f64;
            rows.push(format!(
                "{},{},{},{},{},{}/{n}",
                fmt(tau),
                fmt(v0),
                fmt(mean_abs_eps),
                fmt(mean_mc_pos),
                fmt(mean_lerner),
                sup.mc_positive
            ));
        }
        io::write_csv(
            &out_dir.join("supply_sensitivity.csv"),
            "tau,v0,mean_abs_eps,mean_mc_positive,mean_lerner,mc_positive",
            &rows,
        )?;
        files.push(out_dir.join("supply_sensitivity.csv"));
    }

    // ── substitution structure + heterogeneity decomposition ──
    {
        let g = 4.min(config.sim.n_items);
        let part = kmeans(&panel.item_features, panel.item_dim, g, config.kmeans_seed)?;
        let labels: Vec<usize> = pooled.items.iter().map(|&j| part.labels[j]).collect();
        let m = cluster_substitution(&eps, &labels, g)?;
        let rows: Vec<String> = (0..g)
            .map(|row| {
                let vals: Vec<String> = (0..g).map(|col| fmt(m[row * g + col])).collect();
                format!("{row},{}", vals.join(","))
            })
            .collect();
        let header = format!(
            "cluster,{}",
            (0..g).map(|c| format!("to_{c}")).collect::<Vec<_>>().join(",")
        );
        io::write_csv(&out_dir.join("substitution.csv"), &header, &rows)?;
        files.push(out_dir.join("substitution.csv"));

        let dec = decomposition_r2(&compiled, &pooled)?;
        io::write_csv(
            &out_dir.join("decomposition.csv"),
            "channel,r2",
            &[
                format!("price,{}", fmt(dec.r2_price)),
                format!("taste,{}", fmt(dec.r2_taste)),
                format!("both,{}", fmt(dec.r2_both)),
            ],
        )?;
        files.push(out_dir.join("decomposition.csv"));
    }

    // ── counterfactuals ──
    {
        let res = prune_assortment(
            &compiled,
            &pooled,
            &supply.marginal_costs,
            Ownership::Monopolist,
            &config.prune_depths,
        )?;
        let rows: Vec<String> = res
            .iter()
            .map(|r| {
                if !r.converged {
                    flags += 1;
                }
                format!(
                    "{},{},{},{},{},{}",
                    fmt(r.depth),
                    r.dropped,
                    fmt(r.delta_profit_a_pct),
                    fmt(r.delta_profit_b_pct),
                    fmt(r.retained_price_shift_pct),
                    r.converged
                )
            })
            .collect();
        io::write_csv(
            &out_dir.join("cf_prune.csv"),
            "depth,dropped,delta_profit_a_pct,delta_profit_b_pct,retained_price_shift_pct,converged",
            &rows,
        )?;
        files.push(out_dir.join("cf_prune.csv"));

        let coll = collapse_taste(
            &compiled,
            &pooled,
            &supply.marginal_costs,
            Ownership::Monopolist,
            config.collapse_sigma,
            panel.n_consumers() as f64,
        )?;
        if !coll.converged {
            flags += 1;
        }
        let rows = vec![format!(
            "{},{},{},{},{},{},{},{},{},{}",
            fmt(coll.sigma_steps),
            fmt(coll.delta_profit_pct),
            fmt(coll.delta_cs_per_consumer),
            fmt(coll.delta_total_welfare),
            fmt(coll.delta_mean_price_pct),
            fmt(coll.cosine_before[0]),
            fmt(coll.cosine_after[0]),
            fmt(coll.cosine_before.get(1).cloned().unwrap_or(f64::NAN)),
            fmt(coll.cosine_after.get(1).cloned().unwrap_or(f64::NAN)),
            coll.converged
        )];
        io::write_csv(
            &out_dir.join("cf_collapse.csv"),
            "sigma,delta_profit_pct,delta_cs_per_consumer,delta_tw,delta_mean_price_pct,cos_before_1,cos_after_1,cos_before_2,cos_after_2,converged",
            &rows,
        )?;
        files.push(out_dir.join("cf_collapse.csv"));

        let ladder = segment_pricing_ladder(
            &compiled,
            &pooled,
            &supply.marginal_costs,
            Ownership::Monopolist,
            &panel.consumer_embeddings,
            panel.user_dim,
            &config.ladder_segments,
            config.kmeans_seed,
        )?;
        let rows: Vec<String> = ladder
            .iter()
            .map(|r| {
                if r.converged < r.solves {
                    flags += 1;
                }
                format!(
                    "{},{},{},{},{},{}/{}",
                    r.requested_segments,
                    r.segments,
                    r.merged,
                    fmt(r.profit_gain_pct),
                    fmt(r.mean_price_shift_pct),
                    r.converged,
                    r.solves
                )
            })
            .collect();
        io::write_csv(
            &out_dir.join("cf_ladder.csv"),
            "requested,segments,merged,profit_gain_pct,mean_price_shift_pct,converged",
            &rows,
        )?;
        files.push(out_dir.join("cf_ladder.csv"));

        // recommender validation on the fit's own week split
        let (train_weeks, val_weeks) = panel.week_split(demand_cfg.val_week_frac);
        let trainset: std::collections::HashSet<usize> = train_weeks.into_iter().collect();
        let valset: std::collections::HashSet<usize> = val_weeks.into_iter().collect();
        let train_ev: Vec<(usize, usize)> = panel
            .events
            .iter()
            .filter(|e| trainset.contains(&e.week))
            .map(|e| (e.consumer, e.item))
            .collect();
        let held_ev: Vec<(usize, usize)> = panel
            .events
            .iter()
            .filter(|e| valset.contains(&e.week))
            .map(|e| (e.consumer, e.item))
            .collect();
        let rec = recall_at_k(&compiled, &train_ev, &held_ev, config.recall_k)?;
        let rows = vec![
            format!("model,{},{},{}", fmt(rec.model.all), fmt(rec.model.warm), fmt(rec.model.cold)),
            format!(
                "popularity,{},{},{}",
                fmt(rec.popularity.all),
                fmt(rec.popularity.warm),
                fmt(rec.popularity.cold)
            ),
            format!(
                "cf_default,{},{},{}",
                fmt(rec.cf_default.all),
                fmt(rec.cf_default.warm),
                fmt(rec.cf_default.cold)
            ),
            format!(
                "cf_best,{},{},{}",
                fmt(rec.cf_best.all),
                fmt(rec.cf_best.warm),
                fmt(rec.cf_best.cold)
            ),
        ];
        io::write_csv(&out_dir.join("cf_recval.csv"), "method,all,warm,cold", &rows)?;
        files.push(out_dir.join("cf_recval.csv"));

        // new-design scoring: perturbed cluster centroids as candidates
        let mut design_rng = ChaCha8Rng::seed_from_u64(config.sim.seed ^ 0xDE51);
        let candidates: Vec<Vec<f64>> = (0..config.n_designs)
            .map(|d| {
                let base = (d % config.sim.n_items) * panel.item_dim;
                let mut x: Vec<f64> = panel.item_features[base..base + panel.item_dim].to_vec();
                for v in &mut x {
                    *v += 0.3 * crate::numcore::standard_normal(&mut design_rng);
                }
                x
            })
            .collect();
        let scores = score_new_designs(&model, &compiled, &candidates)?;
        let rows: Vec<String> = scores
            .iter()
            .map(|s| {
                format!(
                    "{},{},{},{},{},{}",
                    s.design,
                    fmt(s.scores[0]),
                    fmt(s.scores.get(1).cloned().unwrap_or(f64::NAN)),
                    s.ranks[0],
                    s.ranks.get(1).cloned().unwrap_or(0),
                    s.rank_gap
                )
            })
            .collect();
        io::write_csv(
            &out_dir.join("cf_designs.csv"),
            "design,score_class1,score_class2,rank_class1,rank_class2,rank_gap",
            &rows,
        )?;
        files.push(out_dir.join("cf_designs.csv"));
    }

    // ── hedonic indices ──
    {
        let hp = &sim.hedonic_panel;
        let gbt_cfg = GbtConfig {
            n_trees: 150,
            min_leaf: 5,
            ..GbtConfig::default()
        };
        let (surface, oof) = fit_hedonic_surface(hp, &gbt_cfg, config.sim.seed ^ 0xBED)?;
        let residuals: Vec<f64> = hp
            .rows
            .iter()
            .zip(&oof)
            .map(|(r, p)| r.log_price - p)
            .collect();
        let hw = conformal_band(&residuals, 0.10)?;
        let jev = jevons_index(hp)?;
        let mut fisher = fisher_chained(&surface, hp)?;
        let (lo, hi) = index_stress_band(&surface, hp, &residuals, 200, config.sim.seed ^ 0xBA)?;
        fisher.band_low = Some(lo);
        fisher.band_high = Some(hi);
        let rows: Vec<String> = fisher
            .months
            .iter()
            .enumerate()
            .map(|(k, m)| {
                format!(
                    "{m},{},{},{},{},{}",
                    fmt(jev.chained_jevons[k]),
                    fmt(fisher.chained_fisher[k]),
                    fmt(fisher.band_low.as_ref().unwrap()[k]),
                    fmt(fisher.band_high.as_ref().unwrap()[k]),
                    fmt(hw)
                )
            })
            .collect();
        io::write_csv(
            &out_dir.join("hedonic_index.csv"),
            "month,jevons_chain,fisher_chain,band_low,band_high,conformal_halfwidth_log",
            &rows,
        )?;
        files.push(out_dir.join("hedonic_index.csv"));

        // variants: pooled time-dummy and per-period imputation
        let td = time_dummy_index(hp, &[0, 1])?;
        let (pp, warnings) = per_period_index(hp, &gbt_cfg, config.sim.seed ^ 0xBEE)?;
        let mut rows = Vec::new();
        for (k, m) in td.months.iter().enumerate() {
            let pp_val = pp
                .months
                .iter()
                .position(|x| x == m)
                .map(|p| pp.chained_fisher[p])
                .unwrap_or(f64::NAN);
            rows.push(format!("{m},{},{}", fmt(td.index[k]), fmt(pp_val)));
        }
        for w in &warnings {
            rows.push(format!("warning,{w},"));
        }
        io::write_csv(
            &out_dir.join("hedonic_variants.csv"),
            "month,time_dummy_index,per_period_fisher",
            &rows,
        )?;
        files.push(out_dir.join("hedonic_variants.csv"));

        // Oaxaca–Blinder on early/late halves with period-specific fits
        let months = hp.months();
        if months.len() >= 2 {
            let cut = months[months.len() / 2];
            let strip = |r: &crate::hedonic::HedonicRow| {
                let mut f = r.features.clone();
                f.pop(); // month column is last by construction
                f
            };
            let window = |pred: &dyn Fn(u32) -> bool| HedonicPanel {
                rows: hp
                    .rows
                    .iter()
                    .filter(|r| pred(r.month))
                    .map(|r| crate::hedonic::HedonicRow {
                        features: strip(r),
                        ..r.clone()
                    })
                    .collect(),
                n_features: hp.n_features - 1,
                month_col: None,
            };
            let t1 = window(&|m| m < cut);
            let t2 = window(&|m| m >= cut);
            let fit_window = |p: &HedonicPanel, s: u64| {
                let (x, y, _) = p.design();
                fit_gbt_any_size(&x, p.n_features, &y, &gbt_cfg, s)
            };
            let f1 = fit_window(&t1, config.sim.seed ^ 0x0B1)?;
            let f2 = fit_window(&t2, config.sim.seed ^ 0x0B2)?;
            let ob = ob_decompose(&f1, &f2, &t1, &t2)?;
            io::write_csv(
                &out_dir.join("ob.csv"),
                "total,composition,valuation,xi",
                &[format!(
                    "{},{},{},{}",
                    fmt(ob.total),
                    fmt(ob.composition),
                    fmt(ob.valuation),
                    fmt(ob.xi)
                )],
            )?;
            files.push(out_dir.join("ob.csv"));
        }
    }

    // ── event study ──
    {
        let ep = &sim.event_panel;
        let mut rows = Vec::new();
        let mut pvals = Vec::new();
        let mut fits = Vec::new();
        let aggregate = ep.aggregate()?;
        for series in std::iter::once(&aggregate).chain(ep.units.iter()) {
            let design = build_design(series, &ep.period_labels)?;
            let fit = poisson_qmle_hac(&design, config.event_lag)?;
            let lockdown = fit.coef_by_name("period_Lockdown").unwrap_or(f64::NAN);
            let se = fit.se_by_name("period_Lockdown").unwrap_or(f64::NAN);
            let p = fit
                .names
                .iter()
                .position(|n| n == "period_Lockdown")
                .map(|i| fit.p[i])
                .unwrap_or(f64::NAN);
            pvals.push(p);
            fits.push((series.unit_id, lockdown, se, fit.converged));
        }
        let fdr = bh_fdr(&pvals, config.fdr_q);
        for (k, &(unit, coef, se, converged)) in fits.iter().enumerate() {
            if !converged {
                flags += 1;
            }
            let name = if k == 0 {
                "aggregate".to_string()
            } else {
                format!("unit_{unit}")
            };
            rows.push(format!(
                "{name},{},{},{},{},{},{},{}",
                fmt(coef),
                fmt(se),
                fmt(effect_pct(coef)),
                fmt(pvals[k]),
                fmt(fdr.adjusted_p[k]),
                significance_stars(fdr.adjusted_p[k]),
                converged
            ));
        }
        io::write_csv(
            &out_dir.join("event_effects.csv"),
            "unit,kappa_lockdown,se,effect_pct,p,p_adj,stars,converged",
            &rows,
        )?;
        files.push(out_dir.join("event_effects.csv"));

        // cluster the units on their planted embeddings and compare to truth
        let part = kmeans(&sim.event_unit_points, sim.event_unit_dim, 2, config.kmeans_seed)?;
        let ari_v = ari(&part.labels, &sim.truth.event_regime)?;
        let nmi_v = nmi(&part.labels, &sim.truth.event_regime)?;
        let stability = seed_stability(
            &sim.event_unit_points,
            sim.event_unit_dim,
            2,
            10,
            config.kmeans_seed,
            |p| {
                let mut effects = Vec::new();
                for g in 0..p.k {
                    let members: Vec<usize> = (0..ep.units.len()).filter(|&u| p.labels[u] == g).collect();
                    if members.is_empty() {
                        continue;
                    }
                    // pooled counts within the cluster
                    let pooled_panel = crate::eventstudy::EventPanel {
                        units: members.iter().map(|&u| ep.units[u].clone()).collect(),
                        period_labels: ep.period_labels.clone(),
                    };
                    let series = pooled_panel.aggregate()?;
                    let design = build_design(&series, &ep.period_labels)?;
                    let fit = poisson_qmle_hac(&design, config.event_lag)?;
                    effects.push(effect_pct(fit.coef_by_name("period_Lockdown").unwrap_or(0.0)));
                }
                Ok(effects)
            },
        )?;
        io::write_csv(
            &out_dir.join("event_clusters.csv"),
            "metric,value",
            &[
                format!("ari_vs_truth,{}", fmt(ari_v)),
                format!("nmi_vs_truth,{}", fmt(nmi_v)),
                format!("silhouette,{}", fmt(part.silhouette.unwrap_or(f64::NAN))),
                format!("stability_mean_range,{}", fmt(stability.mean)),
                format!("stability_sd_range,{}", fmt(stability.sd)),
            ],
        )?;
        files.push(out_dir.join("event_clusters.csv"));
    }

    // ── manifest ──
    {
        let mut lines = vec![
            format!("version: {}", env!("CARGO_PKG_VERSION")),
            format!("seed: {}", config.sim.seed),
            format!("consumers: {}", config.sim.n_consumers),
            format!("items: {}", config.sim.n_items),
            format!("weeks: {}", config.sim.n_weeks),
            format!("tau: {}", config.tau),
            format!("inside_share_realized: {}", fmt(sim.truth.realized_inside_share)),
            format!("convergence_flags: {flags}"),
        ];
        lines.push("files:".to_string());
        let mut names: Vec<String> = files
            .iter()
            .map(|f| f.strip_prefix(out_dir).unwrap_or(f).display().to_string())
            .collect();
        names.sort();
        for name in names {
            lines.push(format!("  - {name}"));
        }
        std::fs::write(out_dir.join("manifest.txt"), lines.join("\n") + "\n")?;
        files.push(out_dir.join("manifest.txt"));
    }

    Ok(PipelineReport {
        files,
        convergence_flags: flags,
    })
}

fn item_sales_share(sim: &SimOutput) -> Vec<f64> {
    let j_n = sim.choice_panel.n_items();
    let mut counts = vec![0.0; j_n];
    for ev in &sim.choice_panel.events {
        counts[ev.item] += 1.0;
    }
    let total: f64 = counts.iter().sum::<f64>().max(1.0);
    counts.into_iter().map(|c| c / total).collect()
}

fn ols_r2(x: &[f64], dim: usize, y: &[f64]) -> f64 {
    use nalgebra::{DMatrix, DVector};
    let n = y.len();
    let mut xm = DMatrix::<f64>::zeros(n, dim + 1);
    for i in 0..n {
        xm[(i, 0)] = 1.0;
        for d in 0..dim {
            xm[(i, d + 1)] = x[i * dim + d];
        }
    }
    let yv = DVector::from_column_slice(y);
    let svd = xm.clone().svd(true, true);
    match svd.solve(&yv, 1e-10) {
        Ok(beta) => {
            let fitted = xm * beta;
            let mean = yv.mean();
            let sst: f64 = yv.iter().map(|v| (v - mean) * (v - mean)).sum();
            let sse: f64 = yv
                .iter()
                .zip(fitted.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if sst > 0.0 {
                1.0 - sse / sst
            } else {
                0.0
            }
        }
        Err(_) => f64::NAN,
    }
}

fn gbt_r2(x: &[f64], dim: usize, y: &[f64], cfg: &GbtConfig) -> f64 {
    match fit_gbt_any_size(x, dim, y, cfg, 97) {
        Ok(model) => {
            let n = y.len();
            let mean = y.iter().sum::<f64>() / n as f64;
            let sst: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
            let sse: f64 = (0..n)
                .map(|i| {
                    let e = model.predict(&x[i * dim..(i + 1) * dim]).unwrap_or(mean) - y[i];
                    e * e
                })
                .sum();
            if sst > 0.0 {
                1.0 - sse / sst
            } else {
                0.0
            }
        }
        Err(_) => f64::NAN,
    }
}

/// Convenience for the determinism gate: byte-compares every report file of
/// two pipeline runs.
pub fn reports_identical(dir_a: &Path, dir_b: &Path, report: &PipelineReport) -> Result<bool> {
    for file in &report.files {
        let rel = file.strip_prefix(dir_a).map_err(|_| {
            Error::contract(format!("file {} outside report dir", file.display()))
        })?;
        let a = io::file_bytes(&dir_a.join(rel))?;
        let b = io::file_bytes(&dir_b.join(rel))?;
        if a != b {
            return Ok(false);
        }
    }
    Ok(true)
}
