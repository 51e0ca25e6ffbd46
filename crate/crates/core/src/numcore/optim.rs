use super::tensor::Tensor;
use crate::error::{Error, Result};

/// AdamW state: first/second moment accumulators per parameter tensor plus
/// the shared step count and hyperparameters. Weight decay is decoupled —
/// applied multiplicatively to the parameters before the adaptive step.
#[derive(Debug, Clone)]
pub struct OptState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptState {
    pub fn new(params: &[&Tensor], lr: f64, weight_decay: f64) -> Self {
        OptState {
            m: params.iter().map(|p| Tensor::zeros_like(p)).collect(),
            v: params.iter().map(|p| Tensor::zeros_like(p)).collect(),
            step: 0,
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Paper never states optimizer hyperparameters; these are the
    /// conventional AdamW defaults.
    pub fn with_defaults(params: &[&Tensor]) -> Self {
        OptState::new(params, 1e-3, 1e-4)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One AdamW update. `names` labels each tensor for error reporting; a
    /// NaN gradient aborts with the offending parameter path.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Tensor],
        names: &[String],
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape("adamw_step", self.m.len(), params.len()));
        }
        for (k, g) in grads.iter().enumerate() {
            if g.shape() != params[k].shape() {
                return Err(Error::shape(
                    format!("adamw_step gradient for {}", label(names, k)),
                    format!("{:?}", params[k].shape()),
                    format!("{:?}", g.shape()),
                ));
            }
            if !g.all_finite() {
                return Err(Error::Training {
                    path: label(names, k),
                    msg: "NaN or infinite gradient".into(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - self.lr * self.weight_decay;

        for (k, p) in params.iter_mut().enumerate() {
            let g = grads[k].values();
            let m = self.m[k].values_mut();
            let v = self.v[k].values_mut();
            for ((pv, (mv, vv)), gv) in p
                .values_mut()
                .iter_mut()
                .zip(m.iter_mut().zip(v.iter_mut()))
                .zip(g)
            {
                *pv *= decay;
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            if !p.all_finite() {
                return Err(Error::Training {
                    path: label(names, k),
                    msg: "non-finite parameter after update".into(),
                });
            }
        }
        Ok(())
    }
}

fn label(names: &[String], k: usize) -> String {
    names.get(k).cloned().unwrap_or_else(|| format!("param[{k}]"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(x: f64) -> Tensor {
        Tensor::scalar(x)
    }

    #[test]
    fn zero_gradient_zero_decay_leaves_params_unchanged() {
        let mut p = scalar_param(1.5);
        let mut opt = OptState::new(&[&p], 1e-3, 0.0);
        opt.step(&mut [&mut p], &[Tensor::scalar(0.0)], &["x".into()])
            .unwrap();
        assert_eq!(p.values()[0], 1.5);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn zero_gradient_with_decay_scales_params() {
        // Decoupled decay definition: params scaled by (1 − ηλ).
        let (lr, wd) = (0.01, 0.1);
        let mut p = scalar_param(2.0);
        let mut opt = OptState::new(&[&p], lr, wd);
        opt.step(&mut [&mut p], &[Tensor::scalar(0.0)], &["x".into()])
            .unwrap();
        assert!((p.values()[0] - 2.0 * (1.0 - lr * wd)).abs() < 1e-15);
    }

    #[test]
    fn single_step_matches_hand_trace() {
        // f(x) = x² from x = 1: g = 2. Hand-stepped AdamW with lr 1e-3,
        // β = (0.9, 0.999), ε = 1e-8, decay 1e-4:
        //   x ← x(1 − lr·wd) = 0.9999999
        //   m = 0.2, v = 0.004, m̂ = 2, v̂ = 4
        //   x ← x − lr·2/(2 + 1e-8)
        let mut p = scalar_param(1.0);
        let mut opt = OptState::with_defaults(&[&p]);
        opt.step(&mut [&mut p], &[Tensor::scalar(2.0)], &["x".into()])
            .unwrap();
        let expect = 1.0 * (1.0 - 1e-3 * 1e-4) - 1e-3 * 2.0 / (4.0f64.sqrt() + 1e-8);
        assert!((p.values()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_reports_parameter_path() {
        let mut p = scalar_param(1.0);
        let mut opt = OptState::with_defaults(&[&p]);
        let err = opt
            .step(&mut [&mut p], &[Tensor::scalar(f64::NAN)], &["alpha.w0".into()])
            .unwrap_err();
        assert!(err.to_string().contains("alpha.w0"));
    }
}
