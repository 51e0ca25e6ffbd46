use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::parallel::{map_chunks, ExecMode};

/// Gradient-boosting hyperparameters. The paper names only the method, not
/// settings; these defaults are pinned once here.
#[derive(Debug, Clone)]
pub struct GbtConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_leaf: usize,
    pub feature_subsample: f64,
    /// Minimum sum-of-squares reduction to accept a split.
    pub min_gain: f64,
}

impl Default for GbtConfig {
    fn default() -> Self {
        GbtConfig {
            n_trees: 300,
            max_depth: 6,
            learning_rate: 0.05,
            min_leaf: 20,
            feature_subsample: 0.8,
            min_gain: 1e-9,
        }
    }
}

#[derive(Debug, Clone)]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }
}

/// Least-squares boosted regression trees: prediction = base + lr·Σ leaf
/// values. Exact greedy splits over sorted unique values.
#[derive(Debug, Clone)]
pub struct GbtEnsemble {
    pub trees: Vec<Tree>,
    pub learning_rate: f64,
    pub base: f64,
    pub n_features: usize,
}

impl GbtEnsemble {
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_features {
            return Err(Error::shape("gbt predict", self.n_features, x.len()));
        }
        let mut out = self.base;
        for tree in &self.trees {
            out += self.learning_rate * tree.predict(x);
        }
        Ok(out)
    }
}

/// Fits a boosted ensemble on row-major features. Spec-facing entry: refuses
/// panels under 50 rows. Training MSE is non-increasing per round by
/// construction of least-squares boosting.
pub fn fit_gbt(x: &[f64], n_features: usize, y: &[f64], cfg: &GbtConfig, seed: u64) -> Result<GbtEnsemble> {
    let n = y.len();
    if n < 50 {
        return Err(Error::contract(format!("fit_gbt needs >= 50 rows, got {n}")));
    }
    fit_gbt_any_size(x, n_features, y, cfg, seed)
}

/// Same learner without the 50-row floor (used by the control-function first
/// stage, whose own contract is J >= 10).
pub fn fit_gbt_any_size(
    x: &[f64],
    n_features: usize,
    y: &[f64],
    cfg: &GbtConfig,
    seed: u64,
) -> Result<GbtEnsemble> {
    let n = y.len();
    if n_features == 0 || x.len() != n * n_features {
        return Err(Error::shape("fit_gbt features", n * n_features, x.len()));
    }
    if n == 0 {
        return Err(Error::contract("fit_gbt on empty panel"));
    }
    let base = y.iter().sum::<f64>() / n as f64;
    let mut residual: Vec<f64> = y.iter().map(|v| v - base).collect();

    // presort row indices per feature once
    let sorted: Vec<Vec<u32>> = (0..n_features)
        .map(|f| {
            let mut idx: Vec<u32> = (0..n as u32).collect();
            idx.sort_by(|&a, &b| {
                x[a as usize * n_features + f]
                    .partial_cmp(&x[b as usize * n_features + f])
                    .expect("finite feature")
            });
            idx
        })
        .collect();

    let n_sub = ((n_features as f64 * cfg.feature_subsample).ceil() as usize)
        .clamp(1, n_features);
    let mut trees = Vec::new();
    for t in 0..cfg.n_trees {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (t as u64).wrapping_mul(0x9e3779b97f4a7c15));
        let mut feats: Vec<usize> = (0..n_features).collect();
        feats.shuffle(&mut rng);
        feats.truncate(n_sub);
        feats.sort_unstable();

        let tree = grow_tree(x, n_features, &residual, &sorted, &feats, cfg);
        let trivial = matches!(&tree.nodes[0], TreeNode::Leaf { value } if value.abs() < 1e-300);
        if trivial {
            // nothing left to fit (constant residual); stop boosting
            break;
        }
        for i in 0..n {
            residual[i] -= cfg.learning_rate * tree.predict(&x[i * n_features..(i + 1) * n_features]);
        }
        trees.push(tree);
    }
    Ok(GbtEnsemble {
        trees,
        learning_rate: cfg.learning_rate,
        base,
        n_features,
    })
}

struct NodeStats {
    sum: f64,
    count: usize,
}

#[derive(Clone, Copy)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

fn grow_tree(
    x: &[f64],
    n_features: usize,
    residual: &[f64],
    sorted: &[Vec<u32>],
    feats: &[usize],
    cfg: &GbtConfig,
) -> Tree {
    let n = residual.len();
    const NO_NODE: u32 = u32::MAX;
    // node assignment per row; nodes are processed level by level
    let mut node_of_row: Vec<u32> = vec![0; n];
    let mut nodes: Vec<TreeNode> = vec![TreeNode::Leaf { value: 0.0 }];
    let mut active: Vec<usize> = vec![0];

    for _depth in 0..cfg.max_depth {
        if active.is_empty() {
            break;
        }
        let node_index: std::collections::HashMap<usize, usize> =
            active.iter().enumerate().map(|(k, &id)| (id, k)).collect();
        let mut stats: Vec<NodeStats> = active.iter().map(|_| NodeStats { sum: 0.0, count: 0 }).collect();
        for i in 0..n {
            if node_of_row[i] == NO_NODE {
                continue;
            }
            if let Some(&k) = node_index.get(&(node_of_row[i] as usize)) {
                stats[k].sum += residual[i];
                stats[k].count += 1;
            }
        }

        // best split per active node for each feature, scanned in parallel
        // over features; ties resolved by (feature, threshold) order so the
        // result is scheduling-independent.
        let per_feature: Vec<Vec<Option<Candidate>>> =
            map_chunks(feats.len(), 1, ExecMode::Auto, |range| {
                let f = feats[range.start];
                let mut best: Vec<Option<Candidate>> = vec![None; active.len()];
                let mut left_sum = vec![0.0f64; active.len()];
                let mut left_cnt = vec![0usize; active.len()];
                let mut prev_val = vec![f64::NAN; active.len()];
                for &r in &sorted[f] {
                    let r = r as usize;
                    if node_of_row[r] == NO_NODE {
                        continue;
                    }
                    let k = match node_index.get(&(node_of_row[r] as usize)) {
                        Some(&k) => k,
                        None => continue,
                    };
                    let val = x[r * n_features + f];
                    if left_cnt[k] > 0 && val > prev_val[k] {
                        let lc = left_cnt[k];
                        let rc = stats[k].count - lc;
                        if lc >= cfg.min_leaf && rc >= cfg.min_leaf {
                            let ls = left_sum[k];
                            let rs = stats[k].sum - ls;
                            let total = stats[k].sum;
                            let gain = ls * ls / lc as f64 + rs * rs / rc as f64
                                - total * total / stats[k].count as f64;
                            let threshold = 0.5 * (prev_val[k] + val);
                            let better = match best[k] {
                                None => gain > cfg.min_gain,
                                Some(b) => gain > b.gain + 1e-15 * b.gain.abs(),
                            };
                            if better && gain > cfg.min_gain {
                                best[k] = Some(Candidate { gain, feature: f, threshold });
                            }
                        }
                    }
                    left_sum[k] += residual[r];
                    left_cnt[k] += 1;
                    prev_val[k] = val;
                }
                vec![best]
            })
            .into_iter()
            .flatten()
            .collect();

        let mut chosen: Vec<Option<Candidate>> = vec![None; active.len()];
        for feature_best in &per_feature {
            for (k, cand) in feature_best.iter().enumerate() {
                if let Some(c) = cand {
                    let take = match chosen[k] {
                        None => true,
                        Some(cur) => {
                            c.gain > cur.gain * (1.0 + 1e-12) + 1e-15
                                || (c.gain >= cur.gain - 1e-15 * cur.gain.abs() - 1e-300
                                    && c.gain <= cur.gain + 1e-15 * cur.gain.abs() + 1e-300
                                    && (c.feature, ord(c.threshold)) < (cur.feature, ord(cur.threshold)))
                        }
                    };
                    if take {
                        chosen[k] = Some(*c);
                    }
                }
            }
        }

        // materialize splits and reassign rows
        let mut next_active = Vec::new();
        let mut split_of: Vec<Option<(usize, f64, u32, u32)>> = vec![None; active.len()];
        for (k, &node_id) in active.iter().enumerate() {
            match chosen[k] {
                Some(c) => {
                    let left = nodes.len();
                    nodes.push(TreeNode::Leaf { value: 0.0 });
                    let right = nodes.len();
                    nodes.push(TreeNode::Leaf { value: 0.0 });
                    nodes[node_id] = TreeNode::Split {
                        feature: c.feature,
                        threshold: c.threshold,
                        left,
                        right,
                    };
                    split_of[k] = Some((c.feature, c.threshold, left as u32, right as u32));
                    next_active.push(left);
                    next_active.push(right);
                }
                None => {
                    // finalize leaf value = mean residual
                    let value = if stats[k].count > 0 {
                        stats[k].sum / stats[k].count as f64
                    } else {
                        0.0
                    };
                    nodes[node_id] = TreeNode::Leaf { value };
                }
            }
        }
        for i in 0..n {
            if node_of_row[i] == NO_NODE {
                continue;
            }
            if let Some(&k) = node_index.get(&(node_of_row[i] as usize)) {
                match split_of[k] {
                    Some((f, thr, left, right)) => {
                        node_of_row[i] = if x[i * n_features + f] <= thr { left } else { right };
                    }
                    None => node_of_row[i] = NO_NODE, // leaf finalized
                }
            }
        }
        active = next_active;
    }

    // depth limit reached: finalize remaining active nodes as leaves
    if !active.is_empty() {
        let node_index: std::collections::HashMap<usize, usize> =
            active.iter().enumerate().map(|(k, &id)| (id, k)).collect();
        let mut sums = vec![0.0; active.len()];
        let mut counts = vec![0usize; active.len()];
        for i in 0..n {
            if node_of_row[i] == NO_NODE {
                continue;
            }
            if let Some(&k) = node_index.get(&(node_of_row[i] as usize)) {
                sums[k] += residual[i];
                counts[k] += 1;
            }
        }
        for (k, &node_id) in active.iter().enumerate() {
            nodes[node_id] = TreeNode::Leaf {
                value: if counts[k] > 0 { sums[k] / counts[k] as f64 } else { 0.0 },
            };
        }
    }
    Tree { nodes }
}

fn ord(x: f64) -> ordered::OrdF64 {
    ordered::OrdF64(x)
}

mod ordered {
    #[derive(PartialEq, PartialOrd)]
    pub struct OrdF64(pub f64);
    impl Eq for OrdF64 {}
    #[allow(clippy::derive_ord_xor_partial_ord)]
    impl Ord for OrdF64 {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            self.partial_cmp(other).expect("finite threshold")
        }
    }
}

/// Out-of-fold predictions from a 5-fold article-level cross-fit: each
/// article's rows are predicted by the ensemble trained on the other folds.
pub fn cross_fit_oof(
    x: &[f64],
    n_features: usize,
    y: &[f64],
    article_ids: &[u64],
    cfg: &GbtConfig,
    n_folds: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let n = y.len();
    if article_ids.len() != n {
        return Err(Error::shape("cross_fit articles", n, article_ids.len()));
    }
    let mut distinct: Vec<u64> = article_ids.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < n_folds {
        return Err(Error::contract(format!(
            "{} distinct articles cannot fill {n_folds} folds",
            distinct.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = distinct.clone();
    shuffled.shuffle(&mut rng);
    let fold_of = |article: u64| -> usize {
        let pos = shuffled.iter().position(|&a| a == article).expect("known article");
        pos % n_folds
    };

    let mut oof = vec![0.0; n];
    for fold in 0..n_folds {
        let train_rows: Vec<usize> = (0..n).filter(|&i| fold_of(article_ids[i]) != fold).collect();
        let test_rows: Vec<usize> = (0..n).filter(|&i| fold_of(article_ids[i]) == fold).collect();
        let mut tx = Vec::with_capacity(train_rows.len() * n_features);
        let mut ty = Vec::with_capacity(train_rows.len());
        for &i in &train_rows {
            tx.extend_from_slice(&x[i * n_features..(i + 1) * n_features]);
            ty.push(y[i]);
        }
        let model = fit_gbt_any_size(&tx, n_features, &ty, cfg, seed ^ fold as u64)?;
        for &i in &test_rows {
            oof[i] = model.predict(&x[i * n_features..(i + 1) * n_features])?;
        }
    }
    Ok(oof)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn constant_target_gives_zero_trees() {
        let n = 60;
        let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let y = vec![3.5; n];
        let model = fit_gbt(&x, 1, &y, &GbtConfig::default(), 1).unwrap();
        assert_eq!(model.trees.len(), 0);
        assert_eq!(model.base, 3.5);
        assert_eq!(model.predict(&[10.0]).unwrap(), 3.5);
    }

    #[test]
    fn pure_noise_stays_near_global_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 400;
        let x: Vec<f64> = (0..n * 3).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        let sd_y = {
            let m = y.iter().sum::<f64>() / n as f64;
            (y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64).sqrt()
        };
        let model = fit_gbt(&x, 3, &y, &GbtConfig::default(), 2).unwrap();
        let mean_y = y.iter().sum::<f64>() / n as f64;
        let preds: Vec<f64> = (0..n)
            .map(|i| model.predict(&x[i * 3..(i + 1) * 3]).unwrap())
            .collect();
        let sd_pred = {
            let m = preds.iter().sum::<f64>() / n as f64;
            (preds.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64).sqrt()
        };
        let mean_pred = preds.iter().sum::<f64>() / n as f64;
        assert!((mean_pred - mean_y).abs() < 1e-10);
        assert!(sd_pred < 0.6 * sd_y, "noise fit too aggressive: {sd_pred} vs {sd_y}");
        // no out-of-sample power: R² vs the mean on fresh noise is ~0
        let x_new: Vec<f64> = (0..n * 3).map(|_| rng.random::<f64>()).collect();
        let y_new: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        let sse: f64 = (0..n)
            .map(|i| {
                let e = model.predict(&x_new[i * 3..(i + 1) * 3]).unwrap() - y_new[i];
                e * e
            })
            .sum();
        let sst: f64 = {
            let m = y_new.iter().sum::<f64>() / n as f64;
            y_new.iter().map(|v| (v - m) * (v - m)).sum()
        };
        assert!(1.0 - sse / sst < 0.05, "noise R²_oos = {}", 1.0 - sse / sst);
    }

    #[test]
    fn exact_function_interpolated_with_deep_trees() {
        let n = 200;
        let x: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| (6.0 * v).sin()).collect();
        let cfg = GbtConfig {
            n_trees: 400,
            max_depth: 10,
            learning_rate: 0.3,
            min_leaf: 1,
            feature_subsample: 1.0,
            min_gain: 1e-12,
        };
        let model = fit_gbt(&x, 1, &y, &cfg, 3).unwrap();
        let sse: f64 = (0..n)
            .map(|i| {
                let e = model.predict(&[x[i]]).unwrap() - y[i];
                e * e
            })
            .sum();
        let sst: f64 = {
            let m = y.iter().sum::<f64>() / n as f64;
            y.iter().map(|v| (v - m) * (v - m)).sum()
        };
        assert!(1.0 - sse / sst > 0.999, "training R² = {}", 1.0 - sse / sst);
    }

    #[test]
    fn training_loss_non_increasing_across_rounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 150;
        let x: Vec<f64> = (0..n * 2).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| 2.0 * x[i * 2] - x[i * 2 + 1] + 0.1 * rng.random::<f64>())
            .collect();
        let cfg = GbtConfig {
            n_trees: 50,
            min_leaf: 5,
            ..GbtConfig::default()
        };
        let model = fit_gbt(&x, 2, &y, &cfg, 4).unwrap();
        let mut pred = vec![model.base; n];
        let mut prev_mse = f64::INFINITY;
        for tree in &model.trees {
            for i in 0..n {
                pred[i] += model.learning_rate * tree.predict(&x[i * 2..(i + 1) * 2]);
            }
            let mse: f64 = (0..n).map(|i| (pred[i] - y[i]) * (pred[i] - y[i])).sum::<f64>() / n as f64;
            assert!(mse <= prev_mse + 1e-12);
            prev_mse = mse;
        }
    }

    #[test]
    fn small_panels_rejected_by_spec_entry() {
        let x: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let y = x.clone();
        assert!(fit_gbt(&x, 1, &y, &GbtConfig::default(), 0).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 120;
        let x: Vec<f64> = (0..n * 4).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = (0..n).map(|i| x[i * 4] * 3.0 + rng.random::<f64>()).collect();
        let a = fit_gbt(&x, 4, &y, &GbtConfig::default(), 77).unwrap();
        let b = fit_gbt(&x, 4, &y, &GbtConfig::default(), 77).unwrap();
        for i in 0..n {
            let pa = a.predict(&x[i * 4..(i + 1) * 4]).unwrap();
            let pb = b.predict(&x[i * 4..(i + 1) * 4]).unwrap();
            assert_eq!(pa.to_bits(), pb.to_bits());
        }
    }

    #[test]
    fn oof_predictions_differ_from_in_fold() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 100;
        let articles: Vec<u64> = (0..n as u64).map(|i| i / 2).collect();
        let x: Vec<f64> = (0..n * 2).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = (0..n).map(|i| x[i * 2] + 0.05 * rng.random::<f64>()).collect();
        let oof = cross_fit_oof(&x, 2, &y, &articles, &GbtConfig::default(), 5, 10).unwrap();
        assert_eq!(oof.len(), n);
        assert!(oof.iter().all(|v| v.is_finite()));
    }
}
