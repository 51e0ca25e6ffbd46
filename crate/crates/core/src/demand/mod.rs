//! Two-class latent deep-logit demand: per-class utilities built from an
//! α-net price channel, a rank-16 taste bottleneck with a low-rank monthly
//! shift, a control-function term, and a shared outside good calibrated by
//! bisection after estimation.

mod bootstrap;
mod calibrate;
mod controlfn;
mod em;
mod eval;
mod panel;

pub use bootstrap::{bootstrap_fit, BootstrapDraw, BootstrapResult};
pub use calibrate::calibrate_v0;
pub use controlfn::control_function_residual;
pub use em::{em_fit, EmEpoch, FitReport};
pub use eval::{class_share_from_utilities, conditional_nll, log_likelihood, plain_logit_nll, CompiledDemand, MarketView};
pub use panel::{ChoiceEvent, ChoicePanel};

use crate::error::{Error, Result};
use crate::numcore::{softplus, Activation, MlpParams, Tensor};

pub const ALPHA_FLOOR: f64 = 0.1;

/// Estimation configuration. The K = 1 + constant-α corner is the plain
/// conditional-logit baseline; the full model is K = 2 with networks on.
#[derive(Debug, Clone)]
pub struct DemandConfig {
    pub n_classes: usize,
    /// `None` trains a single scalar (constant price sensitivity);
    /// `Some(width)` uses a one-hidden-layer α-net.
    pub alpha_hidden: Option<usize>,
    pub taste_enabled: bool,
    pub taste_rank: usize,
    pub rt_hidden: usize,
    pub seasonal_rank: usize,
    pub user_dim: usize,
    pub item_dim: usize,
    pub use_control_function: bool,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub patience: usize,
    /// Epochs before early stopping starts tracking (mixture weights need a
    /// few EM rounds to mature before the validation signal takes over).
    pub min_epochs: usize,
    pub pi_clip: (f64, f64),
    /// Held-out validation = last fraction of weeks (time structure kept).
    pub val_week_frac: f64,
}

impl DemandConfig {
    pub fn new(user_dim: usize, item_dim: usize) -> Self {
        DemandConfig {
            n_classes: 2,
            alpha_hidden: Some(64),
            taste_enabled: true,
            taste_rank: 16,
            rt_hidden: 64,
            seasonal_rank: 8,
            user_dim,
            item_dim,
            use_control_function: true,
            lr: 0.02,
            weight_decay: 1e-4,
            epochs: 200,
            patience: 10,
            min_epochs: 30,
            pi_clip: (0.01, 0.99),
            val_week_frac: 0.2,
        }
    }

    /// Plain-logit degenerate baseline: one class, constant α, no taste.
    pub fn plain_logit(user_dim: usize, item_dim: usize) -> Self {
        DemandConfig {
            n_classes: 1,
            alpha_hidden: None,
            taste_enabled: false,
            use_control_function: false,
            ..DemandConfig::new(user_dim, item_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.n_classes > 2 {
            return Err(Error::contract(format!(
                "n_classes {} must be 1 or 2",
                self.n_classes
            )));
        }
        if !(0.0 < self.val_week_frac && self.val_week_frac < 1.0) {
            return Err(Error::contract("val_week_frac must be in (0,1)"));
        }
        Ok(())
    }
}

/// Price-sensitivity head: α(d) = −softplus(raw(d)) − 0.1, so every
/// consumer's coefficient stays below −0.1 and the markup inversion stays
/// conditioned.
#[derive(Debug, Clone)]
pub enum AlphaNet {
    Constant { raw: Tensor },
    Network(MlpParams),
}

impl AlphaNet {
    pub fn raw_value(&self, d: &[f64]) -> Result<f64> {
        match self {
            AlphaNet::Constant { raw } => raw.item(),
            AlphaNet::Network(mlp) => Ok(mlp.forward(d)?[0]),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            AlphaNet::Constant { raw } => vec![raw],
            AlphaNet::Network(mlp) => mlp.tensors_mut(),
        }
    }

    pub fn tensor_count(&self) -> usize {
        match self {
            AlphaNet::Constant { .. } => 1,
            AlphaNet::Network(mlp) => mlp.tensors().len(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClassParams {
    pub alpha: AlphaNet,
    pub r_net: Option<MlpParams>,
    pub t_net: Option<MlpParams>,
    /// Class intercept. The purchase-conditional likelihood is invariant to
    /// it, so it stays at its initial value during EM; it enters the
    /// market-level share equations.
    pub bias: f64,
    /// Control-function loading γ_c (scalar tensor, trained).
    pub gamma: Tensor,
}

#[derive(Debug, Clone)]
pub struct DemandModel {
    pub classes: Vec<ClassParams>,
    /// Taste-shift basis W (taste_rank × seasonal_rank); zero-sized when
    /// taste is off.
    pub seasonal_w: Tensor,
    /// Monthly codes z_m (12 × seasonal_rank), re-centered to sum to zero
    /// across months after every update.
    pub monthly_codes: Tensor,
    pub pi: Vec<f64>,
    pub v0: f64,
    pub config: DemandConfig,
}

impl DemandModel {
    pub fn init<R: rand::Rng>(config: DemandConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut classes = Vec::with_capacity(config.n_classes);
        for cls in 0..config.n_classes {
            // stagger the initial price sensitivity across classes: EM with
            // symmetric class parameters differentiates too slowly to beat
            // early stopping, so the mixture needs its symmetry broken at
            // the start (the analogue of spread centroid seeding)
            let raw0 = if config.n_classes == 1 {
                -1.5
            } else {
                -0.8 - 2.0 * cls as f64 / (config.n_classes as f64 - 1.0)
            };
            let alpha = match config.alpha_hidden {
                Some(h) => {
                    let mut net = MlpParams::init(
                        &[config.user_dim, h, 1],
                        &[Activation::Relu, Activation::Identity],
                        rng,
                    );
                    net.layers.last_mut().expect("output layer").bias.values_mut()[0] = raw0;
                    AlphaNet::Network(net)
                }
                None => AlphaNet::Constant {
                    raw: Tensor::scalar(raw0),
                },
            };
            let (r_net, t_net) = if config.taste_enabled {
                let r = MlpParams::init(
                    &[config.user_dim, config.rt_hidden, config.taste_rank],
                    &[Activation::Relu, Activation::Identity],
                    rng,
                );
                let mut t = MlpParams::init(
                    &[config.item_dim, config.rt_hidden, config.taste_rank],
                    &[Activation::Relu, Activation::Identity],
                    rng,
                );
                // the t-net output is normalized onto the sphere; jitter the
                // output bias so a dead ReLU block cannot yield a zero vector
                if let Some(last) = t.layers.last_mut() {
                    for v in last.bias.values_mut() {
                        *v = 0.05 * crate::numcore::standard_normal(rng);
                    }
                }
                (Some(r), Some(t))
            } else {
                (None, None)
            };
            classes.push(ClassParams {
                alpha,
                r_net,
                t_net,
                bias: 0.0,
                gamma: Tensor::scalar(0.0),
            });
        }
        let (w, z) = if config.taste_enabled {
            let mut w = Tensor::zeros(vec![config.taste_rank, config.seasonal_rank]);
            let mut z = Tensor::zeros(vec![12, config.seasonal_rank]);
            for v in w.values_mut() {
                *v = 0.01 * crate::numcore::standard_normal(rng);
            }
            for v in z.values_mut() {
                *v = 0.01 * crate::numcore::standard_normal(rng);
            }
            let mut model_z = z;
            recenter_monthly_codes(&mut model_z);
            (w, model_z)
        } else {
            (Tensor::zeros(vec![0, 0]), Tensor::zeros(vec![0, 0]))
        };
        let pi = vec![1.0 / config.n_classes as f64; config.n_classes];
        Ok(DemandModel {
            classes,
            seasonal_w: w,
            monthly_codes: z,
            pi,
            v0: 0.0,
            config,
        })
    }

    /// α_c(d) = −softplus(MLP_α^c(d)) − 0.1 ≤ −0.1.
    pub fn alpha(&self, class: usize, d: &[f64]) -> Result<f64> {
        let raw = self.classes[class].alpha.raw_value(d)?;
        Ok(-softplus(raw) - ALPHA_FLOOR)
    }

    /// δ_m = W z_m. Zero when taste is disabled. `month` is 1..=12.
    pub fn seasonal_shift(&self, month: u8) -> Result<Vec<f64>> {
        if !(1..=12).contains(&month) {
            return Err(Error::contract(format!("month {month} out of 1..=12")));
        }
        if !self.config.taste_enabled {
            return Ok(vec![]);
        }
        let k = self.config.taste_rank;
        let s = self.config.seasonal_rank;
        let z = self.monthly_codes.row((month - 1) as usize);
        let mut out = vec![0.0; k];
        crate::numcore::matvec_into(self.seasonal_w.values(), k, s, z, &mut out);
        Ok(out)
    }

    /// Unit-normalized item taste projection t_j^c; errors (with no item
    /// context) on a zero raw vector — callers attach the item id.
    pub fn item_taste(&self, class: usize, x: &[f64]) -> Result<Vec<f64>> {
        let t_net = self.classes[class]
            .t_net
            .as_ref()
            .ok_or_else(|| Error::contract("taste channel disabled"))?;
        let mut raw = t_net.forward(x)?;
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 0.0 || !norm.is_finite() {
            return Err(Error::contract("t-net produced a zero vector".to_string()));
        }
        for v in &mut raw {
            *v /= norm;
        }
        Ok(raw)
    }

    pub fn user_taste(&self, class: usize, d: &[f64]) -> Result<Vec<f64>> {
        let r_net = self.classes[class]
            .r_net
            .as_ref()
            .ok_or_else(|| Error::contract("taste channel disabled"))?;
        r_net.forward(d)
    }

    /// Taste channel (r_i^c + δ_m)·t_j^c.
    pub fn taste_match(&self, class: usize, d: &[f64], x: &[f64], month: u8) -> Result<f64> {
        let r = self.user_taste(class, d)?;
        let delta = self.seasonal_shift(month)?;
        let t = self.item_taste(class, x)?;
        Ok(r
            .iter()
            .zip(delta.iter().chain(std::iter::repeat(&0.0)))
            .map(|(a, b)| a + b)
            .zip(&t)
            .map(|(rd, t)| rd * t)
            .sum())
    }

    /// δ-free taste score r_i^c · t_j^c.
    pub fn taste_match_static(&self, class: usize, d: &[f64], x: &[f64]) -> Result<f64> {
        let r = self.user_taste(class, d)?;
        let t = self.item_taste(class, x)?;
        Ok(r.iter().zip(&t).map(|(a, b)| a * b).sum())
    }

    /// Trainable tensors in registry order (the tape binding and the
    /// optimizer both follow it).
    pub fn trainable_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for class in &mut self.classes {
            out.extend(class.alpha.tensors_mut());
            if let Some(r) = &mut class.r_net {
                out.extend(r.tensors_mut());
            }
            if let Some(t) = &mut class.t_net {
                out.extend(t.tensors_mut());
            }
            out.push(&mut class.gamma);
        }
        if self.config.taste_enabled {
            out.push(&mut self.seasonal_w);
            out.push(&mut self.monthly_codes);
        }
        out
    }

    pub fn trainable_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (c, class) in self.classes.iter().enumerate() {
            match &class.alpha {
                AlphaNet::Constant { .. } => out.push(format!("class{c}.alpha.raw")),
                AlphaNet::Network(mlp) => {
                    for k in 0..mlp.layers.len() {
                        out.push(format!("class{c}.alpha.layer{k}.weight"));
                        out.push(format!("class{c}.alpha.layer{k}.bias"));
                    }
                }
            }
            if let Some(r) = &class.r_net {
                for k in 0..r.layers.len() {
                    out.push(format!("class{c}.r.layer{k}.weight"));
                    out.push(format!("class{c}.r.layer{k}.bias"));
                }
            }
            if let Some(t) = &class.t_net {
                for k in 0..t.layers.len() {
                    out.push(format!("class{c}.t.layer{k}.weight"));
                    out.push(format!("class{c}.t.layer{k}.bias"));
                }
            }
            out.push(format!("class{c}.gamma"));
        }
        if self.config.taste_enabled {
            out.push("seasonal.w".into());
            out.push("seasonal.z".into());
        }
        out
    }

    /// Swaps class labels so class 0 carries the more negative mean α.
    pub fn canonicalize_classes(&mut self, consumer_embeddings: &[f64], user_dim: usize) -> Result<()> {
        if self.classes.len() < 2 {
            return Ok(());
        }
        let n = consumer_embeddings.len() / user_dim;
        let mut means = vec![0.0; self.classes.len()];
        for i in 0..n {
            let d = &consumer_embeddings[i * user_dim..(i + 1) * user_dim];
            for (c, m) in means.iter_mut().enumerate() {
                *m += self.alpha(c, d)?;
            }
        }
        for m in &mut means {
            *m /= n as f64;
        }
        if means[1] < means[0] {
            self.classes.swap(0, 1);
            self.pi.swap(0, 1);
        }
        Ok(())
    }
}

/// Projects the monthly codes back onto the zero-sum constraint
/// (column means subtracted), making Σ_m δ_m = 0 exact.
pub fn recenter_monthly_codes(z: &mut Tensor) {
    if z.is_empty() {
        return;
    }
    let cols = z.cols();
    let rows = z.rows();
    for j in 0..cols {
        let mean: f64 = (0..rows).map(|m| z.values()[m * cols + j]).sum::<f64>() / rows as f64;
        for m in 0..rows {
            z.values_mut()[m * cols + j] -= mean;
        }
    }
}
