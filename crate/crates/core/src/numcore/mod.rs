//! Minimal reverse-mode autodiff over dense tensors, feedforward networks,
//! and an AdamW optimizer. Everything downstream builds on this module.

mod mlp;
mod optim;
mod tape;
mod tensor;

pub use mlp::{standard_normal, Activation, Layer, MlpBinding, MlpParams};
pub use optim::OptState;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{log_sum_exp, Tensor};

pub(crate) use tensor::{matvec_into, softplus};

#[cfg(test)]
mod gradcheck {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of a scalar-valued closure over an MLP's
    /// parameters; the independent oracle for backward().
    fn finite_diff_grads(
        mlp: &MlpParams,
        loss_fn: &dyn Fn(&MlpParams) -> f64,
        h: f64,
    ) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        let mut probe = mlp.clone();
        for t in 0..probe.tensors().len() {
            let n = probe.tensors()[t].len();
            let mut g = vec![0.0; n];
            for i in 0..n {
                let orig = probe.tensors()[t].values()[i];
                probe.tensors_mut()[t].values_mut()[i] = orig + h;
                let up = loss_fn(&probe);
                probe.tensors_mut()[t].values_mut()[i] = orig - h;
                let dn = loss_fn(&probe);
                probe.tensors_mut()[t].values_mut()[i] = orig;
                g[i] = (up - dn) / (2.0 * h);
            }
            out.push(g);
        }
        out
    }

    fn tape_loss(mlp: &MlpParams, x: &[f64]) -> (f64, Vec<Tensor>) {
        let mut tape = Tape::new();
        let binding = mlp.bind(&mut tape);
        let xin = tape.constant_vector(x.to_vec());
        let out = binding.forward(&mut tape, xin).unwrap();
        // loss = sum(softplus(out)) keeps everything smooth
        let sp = tape.softplus(out);
        let loss = tape.sum(sp).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gs = binding
            .vars()
            .iter()
            .zip(mlp.tensors())
            .map(|(&v, t)| grads.get(v, t))
            .collect();
        (tape.value(loss).item().unwrap(), gs)
    }

    #[test]
    fn mlp_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for arch in [
            (vec![3usize, 4, 1], vec![Activation::Relu, Activation::Identity]),
            (vec![5, 6, 2], vec![Activation::Tanh, Activation::Softplus]),
        ] {
            let mlp = MlpParams::init(&arch.0, &arch.1, &mut rng);
            let x: Vec<f64> = (0..arch.0[0]).map(|i| 0.4 * (i as f64) - 0.3).collect();
            let (_, analytic) = tape_loss(&mlp, &x);
            let numeric = finite_diff_grads(
                &mlp,
                &|m| {
                    let y = m.forward(&x).unwrap();
                    y.iter().map(|&v| v.exp().ln_1p()).sum()
                },
                1e-5,
            );
            for (a, n) in analytic.iter().zip(&numeric) {
                for (av, nv) in a.values().iter().zip(n) {
                    let denom = nv.abs().max(1e-6);
                    assert!(
                        (av - nv).abs() / denom < 1e-5,
                        "gradient mismatch: {av} vs {nv}"
                    );
                }
            }
        }
    }
}
