use super::{ChoicePanel, DemandModel};
use crate::error::{Error, Result};
use crate::numcore::log_sum_exp;
use crate::parallel::{map_chunks, ExecMode, CONSUMER_CHUNK};

/// Model evaluated against a fixed panel: per-consumer α and taste
/// projections, per-item normalized taste rows, monthly shifts, and the
/// control-function terms. All downstream market work (shares, derivatives,
/// counterfactuals) runs on this immutable compiled form.
#[derive(Debug, Clone)]
pub struct CompiledDemand {
    pub n_classes: usize,
    pub n_consumers: usize,
    pub n_items: usize,
    pub taste_rank: usize,
    /// α_c(d_i), laid out [i·C + c].
    pub alpha: Vec<f64>,
    /// r_i^c, laid out [(i·C + c)·K ..].
    pub r: Vec<f64>,
    /// t_j^c (unit rows), laid out [(c·J + j)·K ..].
    pub t: Vec<f64>,
    /// δ_m per calendar month, laid out [(m−1)·K ..].
    pub delta: Vec<f64>,
    /// γ_c·λ̂_j, laid out [c·J + j].
    pub gl: Vec<f64>,
    pub bias: Vec<f64>,
    pub pi: Vec<f64>,
    pub v0: f64,
}

impl CompiledDemand {
    pub fn compile(model: &DemandModel, panel: &ChoicePanel) -> Result<Self> {
        panel.validate()?;
        let c_n = model.config.n_classes;
        let i_n = panel.n_consumers();
        let j_n = panel.n_items();
        let k = if model.config.taste_enabled {
            model.config.taste_rank
        } else {
            0
        };

        let alpha_rows: Vec<Vec<f64>> = map_chunks(i_n, CONSUMER_CHUNK, ExecMode::Auto, |range| {
            let mut out = Vec::with_capacity(range.len() * c_n);
            for i in range {
                let d = panel.consumer_embedding(i);
                for c in 0..c_n {
                    out.push(model.alpha(c, d).expect("alpha eval"));
                }
            }
            out
        });
        let alpha: Vec<f64> = alpha_rows.concat();

        let r: Vec<f64> = if k > 0 {
            map_chunks(i_n, CONSUMER_CHUNK, ExecMode::Auto, |range| {
                let mut out = Vec::with_capacity(range.len() * c_n * k);
                for i in range {
                    let d = panel.consumer_embedding(i);
                    for c in 0..c_n {
                        out.extend(model.user_taste(c, d).expect("r-net eval"));
                    }
                }
                out
            })
            .concat()
        } else {
            vec![]
        };

        let mut t = vec![0.0; c_n * j_n * k];
        if k > 0 {
            for c in 0..c_n {
                for j in 0..j_n {
                    let row = model
                        .item_taste(c, panel.item_feature_row(j))
                        .map_err(|_| {
                            Error::contract(format!(
                                "t-net produced a zero vector for item {}",
                                panel.item_ids[j]
                            ))
                        })?;
                    t[(c * j_n + j) * k..(c * j_n + j + 1) * k].copy_from_slice(&row);
                }
            }
        }

        let mut delta = vec![0.0; 12 * k];
        if k > 0 {
            for m in 1..=12u8 {
                let row = model.seasonal_shift(m)?;
                delta[(m as usize - 1) * k..m as usize * k].copy_from_slice(&row);
            }
        }

        let mut gl = vec![0.0; c_n * j_n];
        for c in 0..c_n {
            let gamma = model.classes[c].gamma.item()?;
            for j in 0..j_n {
                gl[c * j_n + j] = gamma * panel.lambda_hat[j];
            }
        }
        let bias = model.classes.iter().map(|cl| cl.bias).collect();
        Ok(CompiledDemand {
            n_classes: c_n,
            n_consumers: i_n,
            n_items: j_n,
            taste_rank: k,
            alpha,
            r,
            t,
            delta,
            gl,
            bias,
            pi: model.pi.clone(),
            v0: model.v0,
        })
    }

    pub fn alpha_of(&self, i: usize, c: usize) -> f64 {
        self.alpha[i * self.n_classes + c]
    }

    pub fn r_of(&self, i: usize, c: usize) -> &[f64] {
        let k = self.taste_rank;
        &self.r[(i * self.n_classes + c) * k..(i * self.n_classes + c + 1) * k]
    }

    pub fn t_of(&self, c: usize, j: usize) -> &[f64] {
        let k = self.taste_rank;
        &self.t[(c * self.n_items + j) * k..(c * self.n_items + j + 1) * k]
    }

    pub fn delta_of(&self, month: u8) -> &[f64] {
        let k = self.taste_rank;
        &self.delta[(month as usize - 1) * k..month as usize * k]
    }

    /// Mean consumer-level α weighted by mixture weights, per class.
    pub fn alpha_bar(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_classes];
        for i in 0..self.n_consumers {
            for (c, o) in out.iter_mut().enumerate() {
                *o += self.alpha_of(i, c);
            }
        }
        for o in &mut out {
            *o /= self.n_consumers as f64;
        }
        out
    }
}

/// One market: a choice set with prices and a seasonal position, over a
/// consumer subset. Counterfactuals override the taste rows; the
/// equilibrium solver overrides prices.
#[derive(Debug, Clone)]
pub struct MarketView {
    /// Item indices (into the compiled panel) forming the choice set.
    pub items: Vec<usize>,
    /// Price per entry of `items`.
    pub prices: Vec<f64>,
    /// Taste shift applied to every consumer's r (a month's δ or an
    /// average); empty when taste is off.
    pub delta: Vec<f64>,
    /// Consumer subset evaluated (deterministic order).
    pub consumers: Vec<usize>,
    /// Optional replacement taste rows, laid out [(c·|items| + slot)·K ..].
    pub t_override: Option<Vec<f64>>,
}

impl MarketView {
    pub fn pooled(compiled: &CompiledDemand, panel: &ChoicePanel) -> Result<Self> {
        let prices_all = panel.mean_prices();
        let items: Vec<usize> = (0..panel.n_items())
            .filter(|&j| prices_all[j].is_finite())
            .collect();
        let prices = items.iter().map(|&j| prices_all[j]).collect();
        // seasonal position of the pooled market: week-weighted mean δ
        let k = compiled.taste_rank;
        let mut delta = vec![0.0; k];
        if k > 0 {
            for &m in &panel.week_month {
                for (d, v) in delta.iter_mut().zip(compiled.delta_of(m)) {
                    *d += v;
                }
            }
            for d in &mut delta {
                *d /= panel.week_month.len() as f64;
            }
        }
        Ok(MarketView {
            items,
            prices,
            delta,
            consumers: (0..compiled.n_consumers).collect(),
            t_override: None,
        })
    }

    pub fn for_week(compiled: &CompiledDemand, panel: &ChoicePanel, week: usize) -> Result<Self> {
        if week >= panel.n_weeks {
            return Err(Error::contract(format!("week {week} out of range")));
        }
        let items = panel.choice_set(week);
        if items.is_empty() {
            return Err(Error::data_msg(format!("week {week} has an empty choice set")));
        }
        let prices = items.iter().map(|&j| panel.price(j, week)).collect();
        let delta = if compiled.taste_rank > 0 {
            compiled.delta_of(panel.week_month[week]).to_vec()
        } else {
            vec![]
        };
        Ok(MarketView {
            items,
            prices,
            delta,
            consumers: (0..compiled.n_consumers).collect(),
            t_override: None,
        })
    }

    pub fn with_prices(&self, prices: Vec<f64>) -> Self {
        MarketView {
            prices,
            ..self.clone()
        }
    }

    /// Restricts to a subset of the current choice set, by positions.
    pub fn restrict(&self, keep_slots: &[usize], compiled: &CompiledDemand) -> Self {
        let items = keep_slots.iter().map(|&s| self.items[s]).collect();
        let prices = keep_slots.iter().map(|&s| self.prices[s]).collect();
        let t_override = self.t_override.as_ref().map(|t| {
            let k = compiled.taste_rank;
            let mut out = Vec::with_capacity(compiled.n_classes * keep_slots.len() * k);
            for c in 0..compiled.n_classes {
                for &s in keep_slots {
                    out.extend_from_slice(&t[(c * self.items.len() + s) * k..(c * self.items.len() + s + 1) * k]);
                }
            }
            out
        });
        MarketView {
            items,
            prices,
            delta: self.delta.clone(),
            consumers: self.consumers.clone(),
            t_override,
        }
    }

    fn t_row<'a>(&'a self, compiled: &'a CompiledDemand, c: usize, slot: usize) -> &'a [f64] {
        let k = compiled.taste_rank;
        match &self.t_override {
            Some(t) => &t[(c * self.items.len() + slot) * k..(c * self.items.len() + slot + 1) * k],
            None => compiled.t_of(c, self.items[slot]),
        }
    }

    /// Fills u_{ij|c} for every item in the view.
    pub fn class_utilities(&self, compiled: &CompiledDemand, i: usize, c: usize, out: &mut [f64]) {
        let k = compiled.taste_rank;
        let alpha = compiled.alpha_of(i, c);
        let bias = compiled.bias[c];
        if k > 0 {
            let r = compiled.r_of(i, c);
            let mut rd = vec![0.0; k];
            for (x, (a, b)) in rd.iter_mut().zip(r.iter().zip(&self.delta)) {
                *x = a + b;
            }
            for (slot, o) in out.iter_mut().enumerate() {
                let t = self.t_row(compiled, c, slot);
                let taste: f64 = rd.iter().zip(t).map(|(a, b)| a * b).sum();
                *o = alpha * self.prices[slot]
                    + taste
                    + compiled.gl[c * compiled.n_items + self.items[slot]]
                    + bias;
            }
        } else {
            for (slot, o) in out.iter_mut().enumerate() {
                *o = alpha * self.prices[slot]
                    + compiled.gl[c * compiled.n_items + self.items[slot]]
                    + bias;
            }
        }
    }

    /// Class-conditional choice probabilities over items ∪ {outside}:
    /// (inside probabilities, outside share). Max-subtraction throughout.
    pub fn class_share(&self, compiled: &CompiledDemand, i: usize, c: usize) -> (Vec<f64>, f64) {
        let mut u = vec![0.0; self.items.len()];
        self.class_utilities(compiled, i, c, &mut u);
        class_share_from_utilities(&u, compiled.v0)
    }

    /// Mixture share vector Σ_c π_c s_{ij|c} plus the outside share.
    pub fn mixture_share(&self, compiled: &CompiledDemand, i: usize) -> (Vec<f64>, f64) {
        let mut inside = vec![0.0; self.items.len()];
        let mut outside = 0.0;
        for c in 0..compiled.n_classes {
            let (s, s0) = self.class_share(compiled, i, c);
            let w = compiled.pi[c];
            for (acc, v) in inside.iter_mut().zip(&s) {
                *acc += w * v;
            }
            outside += w * s0;
        }
        (inside, outside)
    }

    /// Aggregate shares S_j = (1/|consumers|) Σ_i s_ij, deterministic
    /// chunked reduction.
    pub fn aggregate_shares(&self, compiled: &CompiledDemand) -> Vec<f64> {
        let n = self.consumers.len();
        let totals = map_chunks(n, CONSUMER_CHUNK, ExecMode::Auto, |range| {
            let mut acc = vec![0.0; self.items.len()];
            for slot in range {
                let i = self.consumers[slot];
                let (s, _) = self.mixture_share(compiled, i);
                for (a, v) in acc.iter_mut().zip(&s) {
                    *a += v;
                }
            }
            acc
        });
        let mut out = vec![0.0; self.items.len()];
        for part in totals {
            for (o, v) in out.iter_mut().zip(&part) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        out
    }
}

pub fn class_share_from_utilities(u: &[f64], v0: f64) -> (Vec<f64>, f64) {
    let m = u.iter().cloned().fold(v0, f64::max);
    let e0 = (v0 - m).exp();
    let exps: Vec<f64> = u.iter().map(|&x| (x - m).exp()).collect();
    let denom: f64 = e0 + exps.iter().sum::<f64>();
    (exps.iter().map(|&e| e / denom).collect(), e0 / denom)
}

/// Eq.-11 style log-likelihood of observed purchases under the mixture with
/// the outside good in the denominator, summed over events.
pub fn log_likelihood(compiled: &CompiledDemand, panel: &ChoicePanel) -> Result<f64> {
    let mut groups: std::collections::HashMap<(usize, usize), Vec<usize>> =
        std::collections::HashMap::new();
    for ev in &panel.events {
        groups.entry((ev.consumer, ev.week)).or_default().push(ev.item);
    }
    let mut keys: Vec<(usize, usize)> = groups.keys().cloned().collect();
    keys.sort_unstable();
    let total: f64 = {
        let parts = map_chunks(keys.len(), CONSUMER_CHUNK, ExecMode::Auto, |range| {
            let mut acc = 0.0;
            for gi in range {
                let (i, week) = keys[gi];
                let view = MarketView::for_week(compiled, panel, week).expect("validated panel");
                let (s, _) = view.mixture_share(compiled, i);
                let slot_of: std::collections::HashMap<usize, usize> =
                    view.items.iter().enumerate().map(|(s, &j)| (j, s)).collect();
                for &item in &groups[&(i, week)] {
                    let slot = slot_of[&item];
                    let p = s[slot];
                    if p <= 0.0 {
                        return f64::NEG_INFINITY;
                    }
                    acc += p.ln();
                }
            }
            acc
        });
        parts.iter().sum()
    };
    if !total.is_finite() {
        return Err(Error::contract(
            "zero-probability event in log-likelihood".to_string(),
        ));
    }
    Ok(total)
}

/// Conditional-on-purchase NLL per event over given weeks: the estimation
/// objective (no outside good — V₀ is calibrated post-fit, not estimated).
pub fn conditional_nll(
    compiled: &CompiledDemand,
    panel: &ChoicePanel,
    weeks: &[usize],
) -> Result<(f64, usize)> {
    let weekset: std::collections::HashSet<usize> = weeks.iter().cloned().collect();
    let mut by_consumer: std::collections::HashMap<usize, Vec<(usize, usize)>> =
        std::collections::HashMap::new();
    let mut n_events = 0usize;
    for ev in &panel.events {
        if weekset.contains(&ev.week) {
            by_consumer.entry(ev.consumer).or_default().push((ev.week, ev.item));
            n_events += 1;
        }
    }
    if n_events == 0 {
        return Ok((0.0, 0));
    }
    let mut consumers: Vec<usize> = by_consumer.keys().cloned().collect();
    consumers.sort_unstable();
    let parts = map_chunks(consumers.len(), CONSUMER_CHUNK, ExecMode::Auto, |range| {
        let mut acc = 0.0;
        for slot in range {
            let i = consumers[slot];
            let lls = consumer_class_loglik(compiled, panel, i, &by_consumer[&i]);
            // mixture over classes of the conditional likelihood
            let terms: Vec<f64> = lls
                .iter()
                .enumerate()
                .map(|(c, ll)| compiled.pi[c].ln() + ll)
                .collect();
            acc += log_sum_exp(&terms);
        }
        acc
    });
    let total: f64 = parts.iter().sum();
    Ok((-total / n_events as f64, n_events))
}

/// Per-class conditional log-likelihood Σ_t log softmax(u)_y for one
/// consumer's events (week, item), V₀-free.
pub fn consumer_class_loglik(
    compiled: &CompiledDemand,
    panel: &ChoicePanel,
    i: usize,
    events: &[(usize, usize)],
) -> Vec<f64> {
    let mut out = vec![0.0; compiled.n_classes];
    // group events by week to reuse the denominator
    let mut by_week: std::collections::HashMap<usize, Vec<usize>> = std::collections::HashMap::new();
    for &(w, j) in events {
        by_week.entry(w).or_default().push(j);
    }
    let mut weeks: Vec<usize> = by_week.keys().cloned().collect();
    weeks.sort_unstable();
    for week in weeks {
        let view = MarketView::for_week(compiled, panel, week).expect("validated panel");
        let slot_of: std::collections::HashMap<usize, usize> =
            view.items.iter().enumerate().map(|(s, &j)| (j, s)).collect();
        let mut u = vec![0.0; view.items.len()];
        for c in 0..compiled.n_classes {
            view.class_utilities(compiled, i, c, &mut u);
            let lse = log_sum_exp(&u);
            for &j in &by_week[&week] {
                out[c] += u[slot_of[&j]] - lse;
            }
        }
    }
    out
}

/// Textbook conditional-logit NLL by direct enumeration: utilities per
/// choice occasion, chosen index per occasion. The plain-logit route used
/// by the InfoNCE equivalence and the K = 1 oracle checks.
pub fn plain_logit_nll(utilities: &[Vec<f64>], chosen: &[usize]) -> Result<f64> {
    if utilities.len() != chosen.len() {
        return Err(Error::shape("plain_logit_nll", utilities.len(), chosen.len()));
    }
    let mut total = 0.0;
    for (u, &y) in utilities.iter().zip(chosen) {
        if y >= u.len() {
            return Err(Error::contract(format!("chosen index {y} out of range")));
        }
        total += log_sum_exp(u) - u[y];
    }
    Ok(total)
}
