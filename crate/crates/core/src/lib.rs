//! Embedding-based demand estimation at desk scale: contrastive three-tower
//! training, a two-class latent deep-logit demand system with EM estimation,
//! Bertrand–Nash supply inversion and counterfactuals, gradient-boosted
//! hedonic price indices with split-conformal bands, Poisson event-study
//! regressions, and a synthetic-market generator with known primitives that
//! serves as the oracle for every recovery test.

pub mod counterfactual;
pub mod demand;
pub mod error;
pub mod eventstudy;
pub mod harness;
pub mod hedonic;
pub mod market;
pub mod numcore;
pub mod parallel;
pub mod threetower;

pub use error::{Error, Result};
