use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::eval::{class_share_from_utilities, CompiledDemand, MarketView};
use super::{recenter_monthly_codes, AlphaNet, ChoicePanel, DemandConfig, DemandModel};
use crate::error::{Error, Result};
use crate::numcore::{log_sum_exp, MlpBinding, OptState, Tape, Tensor, Var};
use crate::parallel::{map_chunks, ExecMode, CONSUMER_CHUNK};

#[derive(Debug, Clone)]
pub struct EmEpoch {
    pub epoch: usize,
    /// Observed-data mixture NLL per train event (conditional on purchase).
    pub train_nll: f64,
    pub val_nll: f64,
    pub pi1: f64,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub train_nll: f64,
    pub val_nll: f64,
    pub mcfadden_r2: f64,
    pub alpha_bar: Vec<f64>,
    pub pi1: f64,
    pub trace: Vec<EmEpoch>,
    pub converged: bool,
    pub class_collapse: bool,
    pub epochs_run: usize,
    pub n_train_events: usize,
    pub n_val_events: usize,
}

struct WeekCache {
    /// item indices per week
    sets: Vec<Vec<usize>>,
    /// item → slot within the week's set
    slots: Vec<HashMap<usize, usize>>,
    /// prices aligned with each week's set
    prices: Vec<Vec<f64>>,
    /// λ̂ aligned with each week's set
    lambda: Vec<Vec<f64>>,
}

impl WeekCache {
    fn build(panel: &ChoicePanel) -> Result<Self> {
        let mut sets = Vec::with_capacity(panel.n_weeks);
        let mut slots = Vec::with_capacity(panel.n_weeks);
        let mut prices = Vec::with_capacity(panel.n_weeks);
        let mut lambda = Vec::with_capacity(panel.n_weeks);
        for t in 0..panel.n_weeks {
            let set = panel.choice_set(t);
            if set.is_empty() {
                return Err(Error::data_msg(format!("week {t} has an empty choice set")));
            }
            slots.push(set.iter().enumerate().map(|(s, &j)| (j, s)).collect());
            prices.push(set.iter().map(|&j| panel.price(j, t)).collect());
            lambda.push(set.iter().map(|&j| panel.lambda_hat[j]).collect());
            sets.push(set);
        }
        Ok(WeekCache {
            sets,
            slots,
            prices,
            lambda,
        })
    }
}

type ConsumerEvents = Vec<(usize, Vec<(usize, Vec<usize>)>)>;

/// Groups events as consumer → [(week, chosen slots within the week's set)].
fn group_events(panel: &ChoicePanel, weeks: &[usize], cache: &WeekCache) -> (ConsumerEvents, usize) {
    let weekset: std::collections::HashSet<usize> = weeks.iter().cloned().collect();
    let mut map: HashMap<usize, HashMap<usize, Vec<usize>>> = HashMap::new();
    let mut n = 0usize;
    for ev in &panel.events {
        if weekset.contains(&ev.week) {
            let slot = cache.slots[ev.week][&ev.item];
            map.entry(ev.consumer).or_default().entry(ev.week).or_default().push(slot);
            n += 1;
        }
    }
    let mut out: ConsumerEvents = map
        .into_iter()
        .map(|(i, weeks)| {
            let mut ws: Vec<(usize, Vec<usize>)> = weeks.into_iter().collect();
            ws.sort_by_key(|(w, _)| *w);
            (i, ws)
        })
        .collect();
    out.sort_by_key(|(i, _)| *i);
    (out, n)
}

/// Per-class conditional log-likelihood for one consumer's grouped events.
fn class_loglik(
    compiled: &CompiledDemand,
    panel: &ChoicePanel,
    cache: &WeekCache,
    i: usize,
    weeks: &[(usize, Vec<usize>)],
) -> Vec<f64> {
    let c_n = compiled.n_classes;
    let mut out = vec![0.0; c_n];
    for (week, chosen_slots) in weeks {
        let set = &cache.sets[*week];
        let view = MarketView {
            items: set.clone(),
            prices: cache.prices[*week].clone(),
            delta: if compiled.taste_rank > 0 {
                compiled.delta_of(panel.week_month[*week]).to_vec()
            } else {
                vec![]
            },
            consumers: vec![],
            t_override: None,
        };
        let mut u = vec![0.0; set.len()];
        for c in 0..c_n {
            view.class_utilities(compiled, i, c, &mut u);
            let lse = log_sum_exp(&u);
            for &slot in chosen_slots {
                out[c] += u[slot] - lse;
            }
        }
    }
    out
}

/// E step: posterior class weights q_ic ∝ π_c·exp(ll_ic), log-space, plus
/// the observed-data mixture NLL per event.
fn e_step(
    compiled: &CompiledDemand,
    panel: &ChoicePanel,
    cache: &WeekCache,
    grouped: &ConsumerEvents,
    n_events: usize,
) -> (Vec<f64>, f64) {
    let c_n = compiled.n_classes;
    let i_n = compiled.n_consumers;
    let mut q = vec![0.0; i_n * c_n];
    // consumers with no train events keep the prior
    for i in 0..i_n {
        q[i * c_n..(i + 1) * c_n].copy_from_slice(&compiled.pi);
    }
    let results: Vec<(usize, Vec<f64>, f64)> = map_chunks(
        grouped.len(),
        CONSUMER_CHUNK,
        ExecMode::Auto,
        |range| {
            let mut out = Vec::with_capacity(range.len());
            for gi in range {
                let (i, weeks) = &grouped[gi];
                let lls = class_loglik(compiled, panel, cache, *i, weeks);
                let terms: Vec<f64> = lls
                    .iter()
                    .enumerate()
                    .map(|(c, ll)| compiled.pi[c].max(1e-300).ln() + ll)
                    .collect();
                let lse = log_sum_exp(&terms);
                let weights: Vec<f64> = terms.iter().map(|t| (t - lse).exp()).collect();
                out.push((*i, weights, lse));
            }
            out
        },
    )
    .into_iter()
    .flatten()
    .collect();
    let mut loglik = 0.0;
    for (i, weights, lse) in results {
        q[i * c_n..(i + 1) * c_n].copy_from_slice(&weights);
        loglik += lse;
    }
    (q, -loglik / n_events.max(1) as f64)
}

struct ClassBinding {
    alpha_const: Option<Var>,
    alpha_net: Option<MlpBinding>,
    r_net: Option<MlpBinding>,
    t_net: Option<MlpBinding>,
    gamma: Var,
}

struct DemandBinding {
    classes: Vec<ClassBinding>,
    w: Option<Var>,
    z: Option<Var>,
}

impl DemandBinding {
    fn bind(model: &DemandModel, tape: &mut Tape) -> Self {
        let classes = model
            .classes
            .iter()
            .map(|class| {
                let (alpha_const, alpha_net) = match &class.alpha {
                    AlphaNet::Constant { raw } => (Some(tape.leaf(raw.clone())), None),
                    AlphaNet::Network(mlp) => (None, Some(mlp.bind(tape))),
                };
                ClassBinding {
                    alpha_const,
                    alpha_net,
                    r_net: class.r_net.as_ref().map(|m| m.bind(tape)),
                    t_net: class.t_net.as_ref().map(|m| m.bind(tape)),
                    gamma: tape.leaf(class.gamma.clone()),
                }
            })
            .collect();
        let (w, z) = if model.config.taste_enabled {
            (
                Some(tape.leaf(model.seasonal_w.clone())),
                Some(tape.leaf(model.monthly_codes.clone())),
            )
        } else {
            (None, None)
        };
        DemandBinding { classes, w, z }
    }

    /// Leaf vars in the same order as `DemandModel::trainable_tensors_mut`.
    fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for class in &self.classes {
            if let Some(v) = class.alpha_const {
                out.push(v);
            }
            if let Some(net) = &class.alpha_net {
                out.extend(net.vars());
            }
            if let Some(net) = &class.r_net {
                out.extend(net.vars());
            }
            if let Some(net) = &class.t_net {
                out.extend(net.vars());
            }
            out.push(class.gamma);
        }
        if let Some(w) = self.w {
            out.push(w);
        }
        if let Some(z) = self.z {
            out.push(z);
        }
        out
    }
}

/// Gradient of the q-weighted conditional NLL over one consumer chunk,
/// computed on a private tape. Returns gradients in registry order plus the
/// chunk's loss contribution.
#[allow(clippy::too_many_arguments)]
fn chunk_gradient(
    model: &DemandModel,
    panel: &ChoicePanel,
    cache: &WeekCache,
    grouped: &ConsumerEvents,
    range: std::ops::Range<usize>,
    q: &[f64],
    n_events: usize,
) -> Result<(Vec<Tensor>, f64)> {
    let mut tape = Tape::new();
    let binding = DemandBinding::bind(model, &mut tape);
    let c_n = model.config.n_classes;
    let taste = model.config.taste_enabled;
    let use_cf = model.config.use_control_function;
    let j_n = panel.n_items();

    // per-class stacked taste matrix (J×K, unit rows), built once per chunk
    let mut t_mats: Vec<Option<Var>> = vec![None; c_n];
    if taste {
        for c in 0..c_n {
            let t_bind = binding.classes[c].t_net.as_ref().expect("taste on");
            let mut rows = Vec::with_capacity(j_n);
            for j in 0..j_n {
                let x = tape.constant_vector(panel.item_feature_row(j).to_vec());
                let raw = t_bind.forward(&mut tape, x)?;
                let row = tape.l2_normalize(raw).map_err(|_| {
                    Error::contract(format!(
                        "t-net produced a zero vector for item {}",
                        panel.item_ids[j]
                    ))
                })?;
                rows.push(row);
            }
            t_mats[c] = Some(tape.stack_rows(&rows)?);
        }
    }

    // month shifts needed by this chunk
    let mut delta_nodes: HashMap<u8, Var> = HashMap::new();
    if taste {
        let months: std::collections::BTreeSet<u8> = range
            .clone()
            .flat_map(|gi| grouped[gi].1.iter().map(|(w, _)| panel.week_month[*w]))
            .collect();
        for m in months {
            let zrow = tape.row(binding.z.unwrap(), (m - 1) as usize)?;
            let node = tape.matvec(binding.w.unwrap(), zrow)?;
            delta_nodes.insert(m, node);
        }
    }

    let inv_n = 1.0 / n_events as f64;
    let mut terms: Vec<Var> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();

    for gi in range {
        let (i, weeks) = &grouped[gi];
        let d_const = tape.constant_vector(panel.consumer_embedding(*i).to_vec());
        for c in 0..c_n {
            let w_ic = q[i * c_n + c] * inv_n;
            if w_ic < 1e-14 {
                continue;
            }
            let cb = &binding.classes[c];
            // α = −softplus(raw) − 0.1
            let raw = match (cb.alpha_const, &cb.alpha_net) {
                (Some(v), _) => v,
                (None, Some(net)) => net.forward(&mut tape, d_const)?,
                _ => unreachable!("alpha binding"),
            };
            let sp = tape.softplus(raw);
            let neg = tape.scale(sp, -1.0);
            let alpha = tape.add_const(neg, -super::ALPHA_FLOOR);
            let r_node = match &cb.r_net {
                Some(net) => Some(net.forward(&mut tape, d_const)?),
                None => None,
            };
            for (week, chosen_slots) in weeks {
                let set = &cache.sets[*week];
                let full = set.len() == j_n;
                let mut parts: Vec<Var> = Vec::with_capacity(3);
                if taste {
                    let month = panel.week_month[*week];
                    let rd = tape.add(r_node.unwrap(), delta_nodes[&month])?;
                    let tmat = t_mats[c].unwrap();
                    let tsub = if full {
                        tmat
                    } else {
                        tape.gather_rows(tmat, set.clone())?
                    };
                    parts.push(tape.matvec(tsub, rd)?);
                }
                let p_const = tape.constant_vector(cache.prices[*week].clone());
                parts.push(tape.mul_scalar(p_const, alpha)?);
                if use_cf {
                    let l_const = tape.constant_vector(cache.lambda[*week].clone());
                    parts.push(tape.mul_scalar(l_const, cb.gamma)?);
                }
                let u = if parts.len() == 1 {
                    parts[0]
                } else {
                    tape.add_n(&parts)?
                };
                let lse = tape.log_sum_exp(u)?;
                let picked = tape.gather(u, chosen_slots.clone())?;
                let s = tape.sum(picked)?;
                terms.push(lse);
                weights.push(w_ic * chosen_slots.len() as f64);
                terms.push(s);
                weights.push(-w_ic);
            }
        }
    }
    if terms.is_empty() {
        // chunk had only negligible-weight cells; zero gradient
        let zeros: Vec<Tensor> = binding
            .vars()
            .iter()
            .map(|&v| Tensor::zeros_like(tape.value(v)))
            .collect();
        return Ok((zeros, 0.0));
    }
    let loss = tape.weighted_sum(&terms, &weights)?;
    let loss_val = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;
    let out: Vec<Tensor> = binding
        .vars()
        .iter()
        .map(|&v| grads.get(v, tape.value(v)))
        .collect();
    Ok((out, loss_val))
}

/// Latent-class EM: each epoch runs an E step (posterior class weights in
/// log space) and an M step taking one AdamW update on the class-weighted
/// purchase-conditional log-likelihood, then updates π as the clipped mean
/// posterior. Early stopping watches validation NLL on the held-out trailing
/// weeks; class labels are canonicalized so class 0 is the more
/// price-sensitive one.
pub fn em_fit(
    panel: &ChoicePanel,
    config: &DemandConfig,
    seed: u64,
) -> Result<(DemandModel, FitReport)> {
    config.validate()?;
    panel.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = DemandModel::init(config.clone(), &mut rng)?;
    let cache = WeekCache::build(panel)?;
    let (train_weeks, val_weeks) = panel.week_split(config.val_week_frac);
    let (grouped, n_train) = group_events(panel, &train_weeks, &cache);
    let (val_grouped, n_val) = group_events(panel, &val_weeks, &cache);
    if n_train == 0 {
        return Err(Error::contract("no training events in the panel"));
    }

    let names = model.trainable_names();
    let mut opt = {
        let tensors = model.trainable_tensors_mut();
        let views: Vec<&Tensor> = tensors.iter().map(|t| &**t).collect();
        OptState::new(&views, config.lr, config.weight_decay)
    };

    let mut trace: Vec<EmEpoch> = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_snapshot: Option<(Vec<Tensor>, Vec<f64>)> = None;
    let mut bad_epochs = 0usize;
    let mut collapse_run = 0usize;
    let mut class_collapse = false;
    let mut stopped_early = false;
    let mut epochs_run = 0usize;

    for epoch in 0..config.epochs {
        epochs_run = epoch + 1;
        let compiled = CompiledDemand::compile(&model, panel)?;
        let (q, train_nll) = e_step(&compiled, panel, &cache, &grouped, n_train);

        // M step: one full-batch AdamW update on the q-weighted objective
        let chunk_results: Vec<Result<(Vec<Tensor>, f64)>> = map_chunks(
            grouped.len(),
            CONSUMER_CHUNK,
            ExecMode::Auto,
            |range| chunk_gradient(&model, panel, &cache, &grouped, range, &q, n_train),
        );
        let mut grads: Option<Vec<Tensor>> = None;
        for res in chunk_results {
            let (g, _) = res?;
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        for (x, y) in a.values_mut().iter_mut().zip(b.values()) {
                            *x += y;
                        }
                    }
                }
            }
        }
        let grads = grads.expect("at least one chunk");
        {
            let mut tensors = model.trainable_tensors_mut();
            opt.step(&mut tensors, &grads, &names)?;
        }
        recenter_monthly_codes(&mut model.monthly_codes);

        // π update: mean posterior, clipped into the open simplex
        if config.n_classes == 2 {
            let c_n = 2;
            let mut mean = vec![0.0; c_n];
            for i in 0..panel.n_consumers() {
                for c in 0..c_n {
                    mean[c] += q[i * c_n + c];
                }
            }
            for m in &mut mean {
                *m /= panel.n_consumers() as f64;
            }
            let (lo, hi) = config.pi_clip;
            let outside = mean[0] < lo || mean[0] > hi;
            if outside {
                collapse_run += 1;
                if collapse_run >= 20 {
                    class_collapse = true;
                }
            } else {
                collapse_run = 0;
            }
            let clipped: Vec<f64> = mean.iter().map(|&m| m.clamp(lo, hi)).collect();
            let total: f64 = clipped.iter().sum();
            model.pi = clipped.iter().map(|&c| c / total).collect();
        }

        // validation NLL at the updated parameters
        let compiled_after = CompiledDemand::compile(&model, panel)?;
        let val_nll = if n_val > 0 {
            let parts = map_chunks(val_grouped.len(), CONSUMER_CHUNK, ExecMode::Auto, |range| {
                let mut acc = 0.0;
                for gi in range {
                    let (i, weeks) = &val_grouped[gi];
                    let lls = class_loglik(&compiled_after, panel, &cache, *i, weeks);
                    let terms: Vec<f64> = lls
                        .iter()
                        .enumerate()
                        .map(|(c, ll)| compiled_after.pi[c].max(1e-300).ln() + ll)
                        .collect();
                    acc += log_sum_exp(&terms);
                }
                acc
            });
            -parts.iter().sum::<f64>() / n_val as f64
        } else {
            f64::NAN
        };

        trace.push(EmEpoch {
            epoch,
            train_nll,
            val_nll,
            pi1: model.pi[0],
        });

        if n_val > 0 && epoch + 1 > config.min_epochs.min(config.epochs.saturating_sub(1)) {
            if val_nll < best_val - 1e-9 {
                best_val = val_nll;
                best_snapshot = Some((
                    model.trainable_tensors_mut().iter().map(|t| (**t).clone()).collect(),
                    model.pi.clone(),
                ));
                bad_epochs = 0;
            } else {
                bad_epochs += 1;
                if bad_epochs >= config.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }

    if let Some((tensors, pi)) = best_snapshot {
        for (dst, src) in model.trainable_tensors_mut().into_iter().zip(tensors) {
            *dst = src;
        }
        model.pi = pi;
    }
    model.canonicalize_classes(&panel.consumer_embeddings, panel.user_dim)?;

    let compiled = CompiledDemand::compile(&model, panel)?;
    let (_, train_nll) = e_step(&compiled, panel, &cache, &grouped, n_train);
    let val_nll = if n_val > 0 {
        let (nll, _) = super::eval::conditional_nll(&compiled, panel, &val_weeks)?;
        nll
    } else {
        f64::NAN
    };
    // null: equal shares over each week's choice set including the outside good
    let null_nll = if n_val > 0 {
        let mut total = 0.0;
        for (_, weeks) in &val_grouped {
            for (w, slots) in weeks {
                total += slots.len() as f64 * ((cache.sets[*w].len() + 1) as f64).ln();
            }
        }
        total / n_val as f64
    } else {
        f64::NAN
    };
    let report = FitReport {
        train_nll,
        val_nll,
        mcfadden_r2: if n_val > 0 { 1.0 - val_nll / null_nll } else { f64::NAN },
        alpha_bar: compiled.alpha_bar(),
        pi1: model.pi[0],
        trace,
        converged: stopped_early,
        class_collapse,
        epochs_run,
        n_train_events: n_train,
        n_val_events: n_val,
    };
    Ok((model, report))
}

/// Calibration utility shared with the market module: mean inside share on a
/// view at a given V₀.
pub(crate) fn mean_inside_share(compiled: &CompiledDemand, view: &MarketView, v0: f64) -> f64 {
    let n = view.consumers.len();
    let parts = map_chunks(n, CONSUMER_CHUNK, ExecMode::Auto, |range| {
        let mut acc = 0.0;
        let mut u = vec![0.0; view.items.len()];
        for slot in range {
            let i = view.consumers[slot];
            for c in 0..compiled.n_classes {
                view.class_utilities(compiled, i, c, &mut u);
                let (s, _) = class_share_from_utilities(&u, v0);
                acc += compiled.pi[c] * s.iter().sum::<f64>();
            }
        }
        acc
    });
    parts.iter().sum::<f64>() / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demand::ChoiceEvent;
    use rand::Rng;

    fn synthetic_conditional_logit_panel(
        i_n: usize,
        j_n: usize,
        t_n: usize,
        alpha_true: f64,
        seed: u64,
    ) -> ChoicePanel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let user_dim = 4;
        let item_dim = 3;
        let prices: Vec<f64> = (0..j_n * t_n).map(|_| 5.0 + 10.0 * rng.random::<f64>()).collect();
        let mut events = Vec::new();
        for i in 0..i_n {
            for t in 0..t_n {
                // conditional-on-purchase draw from softmax(α·p)
                let u: Vec<f64> = (0..j_n).map(|j| alpha_true * prices[j * t_n + t]).collect();
                let m = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = u.iter().map(|x| (x - m).exp()).collect();
                let total: f64 = w.iter().sum();
                let mut pick = rng.random::<f64>() * total;
                let mut y = j_n - 1;
                for (j, &wj) in w.iter().enumerate() {
                    pick -= wj;
                    if pick <= 0.0 {
                        y = j;
                        break;
                    }
                }
                events.push(ChoiceEvent { consumer: i, item: y, week: t });
            }
        }
        ChoicePanel {
            consumer_ids: (0..i_n as u64).collect(),
            item_ids: (0..j_n as u64).collect(),
            consumer_embeddings: (0..i_n * user_dim).map(|_| rng.random::<f64>() - 0.5).collect(),
            user_dim,
            item_features: (0..j_n * item_dim).map(|_| rng.random::<f64>() - 0.5).collect(),
            item_dim,
            prices,
            n_weeks: t_n,
            events,
            week_month: (0..t_n).map(|t| ((t * 12) / t_n + 1) as u8).collect(),
            lambda_hat: vec![0.0; j_n],
        }
    }

    /// Full-objective gradient check: chunked tape gradients vs central
    /// finite differences of the q-weighted conditional NLL.
    #[test]
    fn m_step_gradient_matches_finite_differences() {
        let panel = synthetic_conditional_logit_panel(6, 4, 3, -0.3, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let config = DemandConfig {
            n_classes: 2,
            alpha_hidden: Some(5),
            rt_hidden: 5,
            taste_rank: 3,
            seasonal_rank: 2,
            use_control_function: true,
            ..DemandConfig::new(panel.user_dim, panel.item_dim)
        };
        let mut panel = panel;
        panel.lambda_hat = (0..4).map(|j| 0.05 * j as f64).collect();
        let mut model = DemandModel::init(config.clone(), &mut rng).unwrap();
        let cache = WeekCache::build(&panel).unwrap();
        let weeks: Vec<usize> = (0..panel.n_weeks).collect();
        let (grouped, n_events) = group_events(&panel, &weeks, &cache);
        let compiled = CompiledDemand::compile(&model, &panel).unwrap();
        let (q, _) = e_step(&compiled, &panel, &cache, &grouped, n_events);

        let objective = |m: &DemandModel| -> f64 {
            let compiled = CompiledDemand::compile(m, &panel).unwrap();
            let mut total = 0.0;
            for (i, weeks) in &grouped {
                let lls = class_loglik(&compiled, &panel, &cache, *i, weeks);
                for (c, ll) in lls.iter().enumerate() {
                    total -= q[i * config.n_classes + c] * ll;
                }
            }
            total / n_events as f64
        };

        let (grads, _) = chunk_gradient(&model, &panel, &cache, &grouped, 0..grouped.len(), &q, n_events).unwrap();
        let h = 1e-6;
        let n_tensors = model.trainable_tensors_mut().len();
        let mut max_rel = 0.0f64;
        for ti in 0..n_tensors {
            let len = model.trainable_tensors_mut()[ti].len();
            for k in 0..len {
                let orig = model.trainable_tensors_mut()[ti].values()[k];
                model.trainable_tensors_mut()[ti].values_mut()[k] = orig + h;
                let up = objective(&model);
                model.trainable_tensors_mut()[ti].values_mut()[k] = orig - h;
                let dn = objective(&model);
                model.trainable_tensors_mut()[ti].values_mut()[k] = orig;
                let fd = (up - dn) / (2.0 * h);
                let an = grads[ti].values()[k];
                let rel = (an - fd).abs() / fd.abs().max(1e-4);
                if rel > max_rel {
                    max_rel = rel;
                }
            }
        }
        assert!(max_rel < 1e-4, "max relative gradient error {max_rel}");
    }

    #[test]
    fn plain_logit_configuration_recovers_alpha() {
        let alpha_true = -0.3;
        let panel = synthetic_conditional_logit_panel(60, 8, 10, alpha_true, 31);
        let config = DemandConfig {
            epochs: 300,
            lr: 0.05,
            ..DemandConfig::plain_logit(panel.user_dim, panel.item_dim)
        };
        let (model, report) = em_fit(&panel, &config, 5).unwrap();
        let d = vec![0.0; panel.user_dim];
        let alpha_hat = model.alpha(0, &d).unwrap();
        // ~600 events at price sd ≈ 2.9: SE(α̂) well under 0.02
        assert!(
            (alpha_hat - alpha_true).abs() < 0.04,
            "alpha {alpha_hat} vs {alpha_true} (val nll {})",
            report.val_nll
        );
        assert_eq!(report.pi1, 1.0);
    }

    #[test]
    fn plain_logit_probabilities_match_enumeration_oracle() {
        // K=1 + constant-α reproduces textbook conditional logit to 1e-12
        let panel = synthetic_conditional_logit_panel(4, 5, 2, -0.4, 41);
        let config = DemandConfig {
            epochs: 3,
            ..DemandConfig::plain_logit(panel.user_dim, panel.item_dim)
        };
        let (model, _) = em_fit(&panel, &config, 7).unwrap();
        let compiled = CompiledDemand::compile(&model, &panel).unwrap();
        let d = vec![0.0; panel.user_dim];
        let alpha = model.alpha(0, &d).unwrap();
        for week in 0..panel.n_weeks {
            let view = MarketView::for_week(&compiled, &panel, week).unwrap();
            let mut u = vec![0.0; view.items.len()];
            view.class_utilities(&compiled, 0, 0, &mut u);
            // conditional probabilities via direct enumeration
            let exps: Vec<f64> = view
                .prices
                .iter()
                .map(|&p| (alpha * p).exp())
                .collect();
            let total: f64 = exps.iter().sum();
            let lse = log_sum_exp(&u);
            for (slot, &e) in exps.iter().enumerate() {
                let model_prob = (u[slot] - lse).exp();
                assert!((model_prob - e / total).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn seed_determinism_identical_reports() {
        let panel = synthetic_conditional_logit_panel(12, 5, 4, -0.25, 51);
        let config = DemandConfig {
            n_classes: 2,
            alpha_hidden: Some(4),
            rt_hidden: 4,
            taste_rank: 3,
            seasonal_rank: 2,
            epochs: 6,
            ..DemandConfig::new(panel.user_dim, panel.item_dim)
        };
        let (_, a) = em_fit(&panel, &config, 99).unwrap();
        let (_, b) = em_fit(&panel, &config, 99).unwrap();
        assert_eq!(a.val_nll.to_bits(), b.val_nll.to_bits());
        assert_eq!(a.pi1.to_bits(), b.pi1.to_bits());
        for (x, y) in a.trace.iter().zip(&b.trace) {
            assert_eq!(x.train_nll.to_bits(), y.train_nll.to_bits());
        }
    }

    #[test]
    fn em_objective_trend_non_increasing_on_average() {
        let panel = synthetic_conditional_logit_panel(30, 6, 6, -0.35, 61);
        let config = DemandConfig {
            n_classes: 2,
            alpha_hidden: Some(4),
            rt_hidden: 4,
            taste_rank: 3,
            seasonal_rank: 2,
            epochs: 40,
            patience: 40,
            ..DemandConfig::new(panel.user_dim, panel.item_dim)
        };
        let (_, report) = em_fit(&panel, &config, 13).unwrap();
        // moving average over 10 epochs of the observed-data train NLL
        let nll: Vec<f64> = report.trace.iter().map(|e| e.train_nll).collect();
        let window = 10;
        let avg = |lo: usize| nll[lo..lo + window].iter().sum::<f64>() / window as f64;
        let first = avg(0);
        let last = avg(nll.len() - window);
        assert!(
            last <= first + 1e-6,
            "EM objective should trend down: {first} → {last}"
        );
    }
}
