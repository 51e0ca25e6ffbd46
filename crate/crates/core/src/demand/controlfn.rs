use crate::error::{Error, Result};
use crate::hedonic::{cross_fit_oof, GbtConfig};

/// Control-function residual λ̂_j = mean log price − out-of-fold ĝ(v_j),
/// where ĝ is a 5-fold cross-validated boosted-tree regression of mean log
/// price on the item embedding. The residual is constant within product and
/// proxies price-correlated unobserved quality.
pub fn control_function_residual(
    item_embeddings: &[f64],
    emb_dim: usize,
    mean_log_prices: &[f64],
    seed: u64,
) -> Result<Vec<f64>> {
    let j_n = mean_log_prices.len();
    if j_n < 10 {
        return Err(Error::contract(format!(
            "control function needs at least 10 products (folds degenerate), got {j_n}"
        )));
    }
    if item_embeddings.len() != j_n * emb_dim {
        return Err(Error::shape(
            "control function embeddings",
            j_n * emb_dim,
            item_embeddings.len(),
        ));
    }
    if mean_log_prices.iter().any(|p| !p.is_finite()) {
        return Err(Error::data_msg("non-finite mean log price".to_string()));
    }
    let ids: Vec<u64> = (0..j_n as u64).collect();
    let cfg = GbtConfig {
        n_trees: 200,
        max_depth: 4,
        min_leaf: 8.min(j_n / 5).max(1),
        ..GbtConfig::default()
    };
    let oof = cross_fit_oof(item_embeddings, emb_dim, mean_log_prices, &ids, &cfg, 5, seed)?;
    Ok(mean_log_prices.iter().zip(&oof).map(|(y, g)| y - g).collect())
}
