use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{infonce_loss, EmbeddingModel, ItemCatalog, PurchaseRecord, TowerConfig, UserCatalog};
use crate::error::{Error, Result};
use crate::numcore::{OptState, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Records skipped because their category holds a single item.
    pub skipped_records: usize,
    pub epoch_train_loss: Vec<f64>,
    pub epoch_val_loss: Vec<f64>,
    pub stopped_early: bool,
    pub best_epoch: usize,
}

/// Trains the three towers jointly on purchase records with in-category
/// negative sampling. Held-out split is the last 10% of a seeded shuffle;
/// early stopping restores the best held-out parameters.
pub fn train_three_tower(
    records: &[PurchaseRecord],
    items: &ItemCatalog,
    users: &UserCatalog,
    config: &TowerConfig,
    seed: u64,
) -> Result<(EmbeddingModel, TrainReport)> {
    config.validate()?;
    let by_category = items.by_category();

    let mut usable = Vec::new();
    let mut skipped = 0usize;
    for rec in records {
        if rec.price <= 0.0 {
            return Err(Error::data_msg(format!(
                "purchase of item {} has non-positive price",
                rec.item_id
            )));
        }
        let item_idx = items.resolve(rec.item_id)?;
        users.resolve(rec.consumer_id)?;
        let cat = items.category[item_idx];
        if rec.category_id != cat {
            return Err(Error::data_msg(format!(
                "record category {} disagrees with catalog ({cat}) for item {}",
                rec.category_id, rec.item_id
            )));
        }
        if by_category.get(&cat).map(|v| v.len()).unwrap_or(0) < 2 {
            skipped += 1;
            continue;
        }
        usable.push(rec.clone());
    }
    if usable.is_empty() {
        return Err(Error::contract("no trainable records after category filter"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = EmbeddingModel::init(config.clone(), &mut rng)?;

    let mut order: Vec<usize> = (0..usable.len()).collect();
    order.shuffle(&mut rng);
    let n_val = (usable.len() / 10).max(1).min(usable.len() - 1);
    let (train_idx, val_idx) = order.split_at(usable.len() - n_val);
    let train_idx = train_idx.to_vec();
    let val_idx = val_idx.to_vec();

    // fixed negatives for the held-out records keep val losses comparable
    let val_negatives: Vec<Vec<u64>> = val_idx
        .iter()
        .map(|&i| {
            let rec = &usable[i];
            let pos = items.resolve(rec.item_id).expect("resolved above");
            sample_negatives(&by_category[&rec.category_id], pos, config.negatives, &mut rng)
                .iter()
                .map(|&idx| items.ids[idx])
                .collect()
        })
        .collect();

    let names = model.param_names();
    let mut opt = {
        let tensors = model.all_tensors_mut();
        let views: Vec<&Tensor> = tensors.iter().map(|t| &**t).collect();
        let mut o = OptState::new(&views, config.lr, config.weight_decay);
        o.beta1 = 0.9;
        o.beta2 = 0.999;
        o
    };

    let mut report = TrainReport {
        skipped_records: skipped,
        epoch_train_loss: Vec::new(),
        epoch_val_loss: Vec::new(),
        stopped_early: false,
        best_epoch: 0,
    };
    let mut best_val = f64::INFINITY;
    let mut best_snapshot: Option<Vec<Tensor>> = None;
    let mut bad_epochs = 0usize;

    let mut epoch_order = train_idx.clone();
    for epoch in 0..config.epochs {
        epoch_order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for batch in epoch_order.chunks(config.batch_size) {
            let loss = train_batch(&mut model, &mut opt, &names, &usable, batch, items, users, &by_category, &mut rng)?;
            epoch_loss += loss * batch.len() as f64;
            seen += batch.len();
        }
        report.epoch_train_loss.push(epoch_loss / seen as f64);

        let mut val_loss = 0.0;
        for (slot, &i) in val_idx.iter().enumerate() {
            val_loss += infonce_loss(&model, items, users, &usable[i], &val_negatives[slot])?;
        }
        val_loss /= val_idx.len() as f64;
        report.epoch_val_loss.push(val_loss);

        if val_loss < best_val - 1e-9 {
            best_val = val_loss;
            report.best_epoch = epoch;
            best_snapshot = Some(model.all_tensors_mut().iter().map(|t| (**t).clone()).collect());
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= config.patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    if let Some(snapshot) = best_snapshot {
        for (dst, src) in model.all_tensors_mut().into_iter().zip(snapshot) {
            *dst = src;
        }
    }
    Ok((model, report))
}

fn sample_negatives(
    category_items: &[usize],
    positive: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut pool: Vec<usize> = category_items.iter().cloned().filter(|&i| i != positive).collect();
    let take = k.min(pool.len());
    // partial Fisher–Yates: uniform without replacement
    for slot in 0..take {
        let pick = slot + rng.random_range(0..pool.len() - slot);
        pool.swap(slot, pick);
    }
    pool.truncate(take);
    pool
}

#[allow(clippy::too_many_arguments)]
fn train_batch(
    model: &mut EmbeddingModel,
    opt: &mut OptState,
    names: &[String],
    records: &[PurchaseRecord],
    batch: &[usize],
    items: &ItemCatalog,
    users: &UserCatalog,
    by_category: &HashMap<u32, Vec<usize>>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let user_b = model.user_tower.bind(&mut tape);
    let item_b = model.item_tower.bind(&mut tape);
    let price_b = model.price_tower.bind(&mut tape);
    let inv_tau = 1.0 / model.config.tau;

    // negatives drawn per positive, then all needed embeddings computed once
    let draws: Vec<(usize, Vec<usize>)> = batch
        .iter()
        .map(|&ri| {
            let rec = &records[ri];
            let pos = items.resolve(rec.item_id).expect("resolved in train");
            let negs = sample_negatives(&by_category[&rec.category_id], pos, model.config.negatives, rng);
            (pos, negs)
        })
        .collect();

    let mut item_nodes: HashMap<usize, (Var, Var)> = HashMap::new();
    for (pos, negs) in &draws {
        for &idx in std::iter::once(pos).chain(negs.iter()) {
            if let std::collections::hash_map::Entry::Vacant(e) = item_nodes.entry(idx) {
                let x = tape.constant_vector(items.features_of(idx).to_vec());
                let raw = item_b.forward(&mut tape, x)?;
                let v = tape.l2_normalize(raw)?;
                let px = tape.constant_vector(vec![items.log_ref_price[idx]]);
                let p = price_b.forward(&mut tape, px)?;
                e.insert((v, p));
            }
        }
    }
    let mut user_nodes: HashMap<usize, Var> = HashMap::new();
    for &ri in batch {
        let u = users.resolve(records[ri].consumer_id).expect("resolved in train");
        if let std::collections::hash_map::Entry::Vacant(e) = user_nodes.entry(u) {
            let x = tape.constant_vector(users.features_of(u).to_vec());
            let raw = user_b.forward(&mut tape, x)?;
            e.insert(tape.l2_normalize(raw)?);
        }
    }

    let mut rec_losses = Vec::with_capacity(batch.len());
    for (slot, &ri) in batch.iter().enumerate() {
        let rec = &records[ri];
        let d = user_nodes[&users.resolve(rec.consumer_id)?];
        let (pos, negs) = &draws[slot];
        let mut scores = Vec::with_capacity(1 + negs.len());
        for &idx in std::iter::once(pos).chain(negs.iter()) {
            let (v, p) = item_nodes[&idx];
            let dv = tape.dot(d, v)?;
            let dp = tape.dot(d, p)?;
            let sp = tape.softplus(dp);
            let a = tape.weighted_sum(&[dv, sp], &[inv_tau, -inv_tau])?;
            scores.push(a);
        }
        let stacked = tape.stack_scalars(&scores)?;
        let lse = tape.log_sum_exp(stacked)?;
        let loss = tape.weighted_sum(&[lse, scores[0]], &[1.0, -1.0])?;
        rec_losses.push(loss);
    }
    let w = vec![1.0 / batch.len() as f64; batch.len()];
    let batch_loss = tape.weighted_sum(&rec_losses, &w)?;
    let loss_val = tape.value(batch_loss).item()?;
    if !loss_val.is_finite() {
        return Err(Error::Training {
            path: "infonce batch loss".into(),
            msg: format!("non-finite loss {loss_val}"),
        });
    }

    let grads = tape.backward(batch_loss)?;
    let mut all_vars = user_b.vars();
    all_vars.extend(item_b.vars());
    all_vars.extend(price_b.vars());
    let mut tensors = model.all_tensors_mut();
    let grad_tensors: Vec<Tensor> = all_vars
        .iter()
        .zip(tensors.iter())
        .map(|(&v, t)| grads.get(v, t))
        .collect();
    opt.step(&mut tensors, &grad_tensors, names)?;
    Ok(loss_val)
}
