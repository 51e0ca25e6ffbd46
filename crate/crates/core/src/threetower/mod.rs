//! Three-tower contrastive embedding model: user, item, and price towers
//! trained jointly with an InfoNCE purchase-prediction objective over
//! within-category negatives. The item tower never receives price as an
//! input; price lives in its own channel so the learned item embedding
//! carries no direct price signal.

mod retrieval;
mod train;

pub use retrieval::{extract_embeddings, hit_at_k, EmbeddingMatrices};
pub use train::{train_three_tower, TrainReport};

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numcore::{softplus, Activation, MlpParams};

/// Tower architecture and training hyperparameters. The paper's temperature,
/// batch size, and negative count are unrendered macros; the defaults here
/// (τ = 0.07, 64 negatives) are the conventional contrastive choices and all
/// of them are config fields.
#[derive(Debug, Clone)]
pub struct TowerConfig {
    pub item_input_dim: usize,
    pub user_input_dim: usize,
    pub emb_dim: usize,
    pub user_hidden: usize,
    pub item_hidden: usize,
    pub price_hidden: usize,
    pub tau: f64,
    pub negatives: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub patience: usize,
}

impl TowerConfig {
    pub fn new(item_input_dim: usize, user_input_dim: usize) -> Self {
        TowerConfig {
            item_input_dim,
            user_input_dim,
            emb_dim: 64,
            user_hidden: 256,
            item_hidden: 256,
            price_hidden: 16,
            tau: 0.07,
            negatives: 64,
            epochs: 30,
            batch_size: 256,
            lr: 1e-3,
            weight_decay: 1e-4,
            patience: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.emb_dim < 1 {
            return Err(Error::contract("emb_dim must be >= 1"));
        }
        if self.tau <= 0.0 {
            return Err(Error::contract(format!("tau {} must be > 0", self.tau)));
        }
        if self.negatives < 1 {
            return Err(Error::contract("negatives per positive must be >= 1"));
        }
        Ok(())
    }
}

/// One observed purchase.
#[derive(Debug, Clone)]
pub struct PurchaseRecord {
    pub consumer_id: u64,
    pub item_id: u64,
    pub category_id: u32,
    pub week: u32,
    /// Paid price in EUR; must be positive.
    pub price: f64,
    pub log_ref_price: f64,
}

/// Item side of the training data: features, category membership, and the
/// log reference price feeding the price tower.
#[derive(Debug, Clone)]
pub struct ItemCatalog {
    pub ids: Vec<u64>,
    /// Row-major n×dim.
    pub features: Vec<f64>,
    pub dim: usize,
    pub category: Vec<u32>,
    pub log_ref_price: Vec<f64>,
    index: HashMap<u64, usize>,
}

impl ItemCatalog {
    pub fn new(
        ids: Vec<u64>,
        features: Vec<f64>,
        dim: usize,
        category: Vec<u32>,
        log_ref_price: Vec<f64>,
    ) -> Result<Self> {
        let n = ids.len();
        if features.len() != n * dim || category.len() != n || log_ref_price.len() != n {
            return Err(Error::shape("ItemCatalog", n, features.len() / dim.max(1)));
        }
        let index = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        Ok(ItemCatalog {
            ids,
            features,
            dim,
            category,
            log_ref_price,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn resolve(&self, id: u64) -> Result<usize> {
        self.index
            .get(&id)
            .copied()
            .ok_or_else(|| Error::data_msg(format!("item id {id} not in catalog")))
    }

    pub fn features_of(&self, idx: usize) -> &[f64] {
        &self.features[idx * self.dim..(idx + 1) * self.dim]
    }

    /// Item indices per category id, ascending by item id within category.
    pub fn by_category(&self) -> HashMap<u32, Vec<usize>> {
        let mut map: HashMap<u32, Vec<usize>> = HashMap::new();
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by_key(|&i| self.ids[i]);
        for i in order {
            map.entry(self.category[i]).or_default().push(i);
        }
        map
    }
}

#[derive(Debug, Clone)]
pub struct UserCatalog {
    pub ids: Vec<u64>,
    pub features: Vec<f64>,
    pub dim: usize,
    index: HashMap<u64, usize>,
}

impl UserCatalog {
    pub fn new(ids: Vec<u64>, features: Vec<f64>, dim: usize) -> Result<Self> {
        let n = ids.len();
        if features.len() != n * dim {
            return Err(Error::shape("UserCatalog", n * dim, features.len()));
        }
        let index = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        Ok(UserCatalog {
            ids,
            features,
            dim,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn resolve(&self, id: u64) -> Result<usize> {
        self.index
            .get(&id)
            .copied()
            .ok_or_else(|| Error::data_msg(format!("consumer id {id} not in catalog")))
    }

    pub fn features_of(&self, idx: usize) -> &[f64] {
        &self.features[idx * self.dim..(idx + 1) * self.dim]
    }
}

/// Trained three-tower parameters plus the config that shaped them.
#[derive(Debug, Clone)]
pub struct EmbeddingModel {
    pub user_tower: MlpParams,
    pub item_tower: MlpParams,
    pub price_tower: MlpParams,
    pub config: TowerConfig,
}

impl EmbeddingModel {
    pub fn init<R: rand::Rng>(config: TowerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut user_tower = MlpParams::init(
            &[config.user_input_dim, config.user_hidden, config.emb_dim],
            &[Activation::Relu, Activation::Identity],
            rng,
        );
        let mut item_tower = MlpParams::init(
            &[config.item_input_dim, config.item_hidden, config.emb_dim],
            &[Activation::Relu, Activation::Identity],
            rng,
        );
        let price_tower = MlpParams::init(
            &[1, config.price_hidden, config.emb_dim],
            &[Activation::Relu, Activation::Identity],
            rng,
        );
        // tower outputs are L2-normalized; jitter the output biases so a
        // dead ReLU block cannot produce the zero vector
        for tower in [&mut user_tower, &mut item_tower] {
            if let Some(last) = tower.layers.last_mut() {
                for v in last.bias.values_mut() {
                    *v = 0.05 * crate::numcore::standard_normal(rng);
                }
            }
        }
        Ok(EmbeddingModel {
            user_tower,
            item_tower,
            price_tower,
            config,
        })
    }

    /// L2-normalized user embedding.
    pub fn user_embedding(&self, features: &[f64]) -> Result<Vec<f64>> {
        normalize(self.user_tower.forward(features)?)
    }

    /// L2-normalized item embedding (price never enters this tower).
    pub fn item_embedding(&self, features: &[f64]) -> Result<Vec<f64>> {
        normalize(self.item_tower.forward(features)?)
    }

    /// Price embedding from the log reference price; not normalized.
    pub fn price_embedding(&self, log_ref_price: f64) -> Result<Vec<f64>> {
        self.price_tower.forward(&[log_ref_price])
    }

    pub fn all_tensors_mut(&mut self) -> Vec<&mut crate::numcore::Tensor> {
        let mut out = self.user_tower.tensors_mut();
        out.extend(self.item_tower.tensors_mut());
        out.extend(self.price_tower.tensors_mut());
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (tower, mlp) in [
            ("user", &self.user_tower),
            ("item", &self.item_tower),
            ("price", &self.price_tower),
        ] {
            for k in 0..mlp.layers.len() {
                names.push(format!("{tower}.layer{k}.weight"));
                names.push(format!("{tower}.layer{k}.bias"));
            }
        }
        names
    }
}

fn normalize(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= 0.0 || !norm.is_finite() {
        return Err(Error::contract("embedding with zero norm"));
    }
    for x in &mut v {
        *x /= norm;
    }
    Ok(v)
}

/// Predicted affinity (d·v − softplus(d·p))/τ between a user and an item.
/// Strictly less than d·v/τ because the price term always subtracts.
pub fn affinity(d: &[f64], v: &[f64], p: &[f64], tau: f64) -> Result<f64> {
    if tau <= 0.0 {
        return Err(Error::contract(format!("tau {tau} must be > 0")));
    }
    if d.len() != v.len() || d.len() != p.len() {
        return Err(Error::shape("affinity", d.len(), v.len().max(p.len())));
    }
    let dv: f64 = d.iter().zip(v).map(|(a, b)| a * b).sum();
    let dp: f64 = d.iter().zip(p).map(|(a, b)| a * b).sum();
    Ok((dv - softplus(dp)) / tau)
}

/// InfoNCE loss for one purchase against a sampled negative set: the
/// negative log-softmax of the positive's affinity over {positive ∪
/// negatives}. With negatives covering the full category this is exactly
/// the multinomial-logit negative log-likelihood over that choice set.
pub fn infonce_loss(
    model: &EmbeddingModel,
    items: &ItemCatalog,
    users: &UserCatalog,
    positive: &PurchaseRecord,
    negatives: &[u64],
) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::contract("infonce_loss needs a non-empty negative set"));
    }
    let pos_idx = items.resolve(positive.item_id)?;
    if negatives.contains(&positive.item_id) {
        return Err(Error::contract("positive item must be excluded from negatives"));
    }
    for &id in negatives {
        let idx = items.resolve(id)?;
        if items.category[idx] != positive.category_id {
            return Err(Error::contract(format!(
                "negative {id} is outside category {}",
                positive.category_id
            )));
        }
    }
    let user_idx = users.resolve(positive.consumer_id)?;
    let d = model.user_embedding(users.features_of(user_idx))?;
    let tau = model.config.tau;

    let score = |idx: usize| -> Result<f64> {
        let v = model.item_embedding(items.features_of(idx))?;
        let p = model.price_embedding(items.log_ref_price[idx])?;
        affinity(&d, &v, &p, tau)
    };
    let a_pos = score(pos_idx)?;
    let mut scores = vec![a_pos];
    for &id in negatives {
        scores.push(score(items.resolve(id)?)?);
    }
    Ok(crate::numcore::log_sum_exp(&scores) - a_pos)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affinity_at_zero_is_minus_log_two() {
        let d = [1.0, 0.0];
        let v = [0.0, 1.0];
        let p = [0.0, 1.0];
        // d·v = 0, d·p = 0, τ = 1 → −softplus(0) = −ln 2
        let a = affinity(&d, &v, &p, 1.0).unwrap();
        assert!((a - (-(2.0f64.ln()))).abs() < 1e-15);
    }

    #[test]
    fn affinity_price_limit_vanishes() {
        // d = v unit, d·p → −∞ → softplus → 0 → affinity → 1
        let d = [1.0, 0.0];
        let p = [-60.0, 0.0];
        let a = affinity(&d, &d, &p, 1.0).unwrap();
        assert!((a - 1.0).abs() < 1e-12);
    }

    #[test]
    fn affinity_rejects_non_positive_tau() {
        let d = [1.0];
        assert!(affinity(&d, &d, &d, 0.0).is_err());
        assert!(affinity(&d, &d, &d, -1.0).is_err());
    }

    #[test]
    fn affinity_matches_straight_line_recomputation() {
        // independent scalar oracle over random unit vectors
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let mut d: Vec<f64> = (0..8).map(|_| rng.random::<f64>() - 0.5).collect();
            let mut v: Vec<f64> = (0..8).map(|_| rng.random::<f64>() - 0.5).collect();
            let p: Vec<f64> = (0..8).map(|_| rng.random::<f64>() - 0.5).collect();
            let nd = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            d.iter_mut().for_each(|x| *x /= nd);
            v.iter_mut().for_each(|x| *x /= nv);
            let tau = 0.07;
            let mut dv = 0.0;
            let mut dp = 0.0;
            for i in 0..8 {
                dv += d[i] * v[i];
                dp += d[i] * p[i];
            }
            let oracle = (dv - (1.0 + dp.exp()).ln()) / tau;
            let got = affinity(&d, &v, &p, tau).unwrap();
            assert!((got - oracle).abs() < 1e-12);
        }
    }

    fn toy_world() -> (EmbeddingModel, ItemCatalog, UserCatalog) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let config = TowerConfig {
            emb_dim: 4,
            user_hidden: 8,
            item_hidden: 8,
            price_hidden: 4,
            ..TowerConfig::new(3, 3)
        };
        let model = EmbeddingModel::init(config, &mut rng).unwrap();
        let n = 5;
        let items = ItemCatalog::new(
            (0..n as u64).collect(),
            (0..n * 3).map(|i| (i as f64 * 0.37).sin()).collect(),
            3,
            vec![0; n],
            vec![2.0; n],
        )
        .unwrap();
        let users = UserCatalog::new(vec![100], vec![0.2, -0.4, 0.9], 3).unwrap();
        (model, items, users)
    }

    #[test]
    fn equal_affinities_give_log_n() {
        // force all items identical → affinities equal → loss = ln n
        let (model, _, users) = toy_world();
        let n = 4usize;
        let items = ItemCatalog::new(
            (0..n as u64).collect(),
            [0.5, -0.3, 0.8].repeat(n),
            3,
            vec![0; n],
            vec![2.0; n],
        )
        .unwrap();
        let record = PurchaseRecord {
            consumer_id: 100,
            item_id: 0,
            category_id: 0,
            week: 0,
            price: 10.0,
            log_ref_price: 2.0,
        };
        let loss = infonce_loss(&model, &items, &users, &record, &[1, 2, 3]).unwrap();
        assert!((loss - (n as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_negative_set_rejected() {
        let (model, items, users) = toy_world();
        let record = PurchaseRecord {
            consumer_id: 100,
            item_id: 0,
            category_id: 0,
            week: 0,
            price: 10.0,
            log_ref_price: 2.0,
        };
        assert!(infonce_loss(&model, &items, &users, &record, &[]).is_err());
    }

    #[test]
    fn full_category_negatives_match_enumeration_softmax() {
        let (model, items, users) = toy_world();
        let record = PurchaseRecord {
            consumer_id: 100,
            item_id: 2,
            category_id: 0,
            week: 0,
            price: 10.0,
            log_ref_price: 2.0,
        };
        let negatives: Vec<u64> = (0..5u64).filter(|&i| i != 2).collect();
        let loss = infonce_loss(&model, &items, &users, &record, &negatives).unwrap();

        // enumeration oracle
        let d = model.user_embedding(users.features_of(0)).unwrap();
        let scores: Vec<f64> = (0..5)
            .map(|idx| {
                let v = model.item_embedding(items.features_of(idx)).unwrap();
                let p = model.price_embedding(items.log_ref_price[idx]).unwrap();
                affinity(&d, &v, &p, model.config.tau).unwrap()
            })
            .collect();
        let denom: f64 = scores.iter().map(|s| (s - scores[2]).exp()).sum();
        let oracle = denom.ln();
        assert!((loss - oracle).abs() < 1e-12);
    }
}
