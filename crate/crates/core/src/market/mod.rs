//! Demand derivatives, elasticity matrices, Bertrand–Nash markup/cost
//! inversion, equilibrium price solving, and welfare computation on a fitted
//! demand system.

mod derivatives;
mod equilibrium;
mod inversion;
mod reports;
mod welfare;

pub use derivatives::{cluster_substitution, elasticity_matrix, share_derivatives};
pub use equilibrium::{solve_bertrand_nash, BnSolve};
pub use inversion::{invert_markups, SupplyResult};
pub use reports::{decomposition_r2, iia_column_cv, DecompositionR2};
pub use welfare::{consumer_surplus, welfare_delta, WelfareDelta};

use crate::error::{Error, Result};

/// Ownership structure: which cross-price effects the firm internalises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ownership {
    /// Ω = 11ᵀ — multi-product monopolist (the baseline conduct).
    Monopolist,
    /// Ω = I — independent single-product pricing.
    SingleProduct,
}

impl Ownership {
    pub fn entry(&self, j: usize, k: usize) -> f64 {
        match self {
            Ownership::Monopolist => 1.0,
            Ownership::SingleProduct => {
                if j == k {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "monopolist" => Ok(Ownership::Monopolist),
            "single" => Ok(Ownership::SingleProduct),
            other => Err(Error::contract(format!(
                "unknown ownership '{other}' (expected monopolist|single)"
            ))),
        }
    }
}

/// Snapshot of one market: prices, aggregate shares, the share Jacobian
/// (∂S_j/∂p_ℓ row-major), and the conduct matrix.
#[derive(Debug, Clone)]
pub struct MarketState {
    pub items: Vec<usize>,
    pub prices: Vec<f64>,
    pub shares: Vec<f64>,
    pub jacobian: Vec<f64>,
    pub ownership: Ownership,
}

impl MarketState {
    pub fn n(&self) -> usize {
        self.items.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.prices.len() != n || self.shares.len() != n || self.jacobian.len() != n * n {
            return Err(Error::shape("MarketState", n, self.prices.len()));
        }
        let total: f64 = self.shares.iter().sum();
        if !(total < 1.0) {
            return Err(Error::contract(format!(
                "inside shares sum to {total}, outside good requires < 1"
            )));
        }
        for (j, &s) in self.shares.iter().enumerate() {
            if !(0.0 < s && s < 1.0) {
                return Err(Error::contract(format!("share of item slot {j} is {s}")));
            }
        }
        for j in 0..n {
            if self.jacobian[j * n + j] >= 0.0 {
                return Err(Error::contract(format!(
                    "own-price derivative of slot {j} must be negative"
                )));
            }
            for l in 0..n {
                if l != j && self.jacobian[j * n + l] < 0.0 {
                    return Err(Error::contract(format!(
                        "cross-price derivative ({j},{l}) must be non-negative"
                    )));
                }
            }
        }
        Ok(())
    }
}
