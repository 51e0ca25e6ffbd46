//! Reverse-mode automatic differentiation on a per-batch tape.
//!
//! A `Tape` records operations in topological order during the forward pass
//! and replays them backwards to accumulate exact gradients. Tapes are cheap,
//! short-lived objects: build one per batch, call [`Tape::backward`], read the
//! gradients for the leaves you registered, drop the tape. Distinct tapes may
//! run on different threads; parameters are bound by value (copied in), so a
//! tape never aliases live model state.

use super::tensor::{dot, log_sum_exp, matvec_into, sigmoid, softplus, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Leaf tensor; `grad` marks whether backward should accumulate into it.
    Leaf { grad: bool },
    /// W x for matrix W and vector x.
    MatVec { w: Var, x: Var },
    /// W x + b.
    Affine { w: Var, x: Var, b: Var },
    AddVec { a: Var, b: Var },
    AddN { xs: Vec<Var> },
    MulElem { a: Var, b: Var },
    ScaleConst { x: Var, k: f64 },
    AddConst { x: Var },
    /// Broadcast multiply by a scalar node.
    MulScalar { x: Var, s: Var },
    Relu { x: Var },
    Tanh { x: Var },
    Softplus { x: Var },
    Dot { a: Var, b: Var },
    L2Normalize { x: Var },
    LogSumExp { x: Var },
    Sum { x: Var },
    Gather { x: Var, idx: Vec<usize> },
    /// Rows (equal-length vectors) stacked into a matrix.
    StackRows { rows: Vec<Var> },
    GatherRows { m: Var, idx: Vec<usize> },
    /// Row `i` of a matrix as a vector.
    Row { m: Var, i: usize },
    StackScalars { xs: Vec<Var> },
    /// Σ w_k x_k over scalar nodes with constant weights.
    WeightedSum { xs: Vec<Var>, w: Vec<f64> },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients produced by [`Tape::backward`], indexed by the `Var`s of the
/// tape that produced them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, zero tensor if the node was never reached.
    pub fn get(&self, v: Var, like: &Tensor) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros_like(like),
        }
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf: no gradient accumulated.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf { grad: false }, t)
    }

    /// Parameter leaf: gradient accumulated during backward.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf { grad: true }, t)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(x))
    }

    pub fn constant_vector(&mut self, xs: Vec<f64>) -> Var {
        self.constant(Tensor::vector(xs))
    }

    fn check_vec(&self, v: Var, context: &str) -> Result<usize> {
        let t = self.value(v);
        if t.shape().len() != 1 {
            return Err(Error::shape(context, "rank-1 tensor", format!("{:?}", t.shape())));
        }
        Ok(t.len())
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (rows, cols) = {
            let wt = self.value(w);
            if !wt.is_matrix() {
                return Err(Error::shape("matvec", "matrix", format!("{:?}", wt.shape())));
            }
            (wt.rows(), wt.cols())
        };
        let n = self.check_vec(x, "matvec input")?;
        if n != cols {
            return Err(Error::shape("matvec", cols, n));
        }
        let mut out = vec![0.0; rows];
        matvec_into(self.value(w).values(), rows, cols, self.value(x).values(), &mut out);
        Ok(self.push(Op::MatVec { w, x }, Tensor::vector(out)))
    }

    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let (rows, cols) = {
            let wt = self.value(w);
            if !wt.is_matrix() {
                return Err(Error::shape("affine", "matrix", format!("{:?}", wt.shape())));
            }
            (wt.rows(), wt.cols())
        };
        let n = self.check_vec(x, "affine input")?;
        if n != cols {
            return Err(Error::shape("affine input", cols, n));
        }
        if self.check_vec(b, "affine bias")? != rows {
            return Err(Error::shape("affine bias", rows, self.value(b).len()));
        }
        let mut out = self.value(b).values().to_vec();
        matvec_into(self.value(w).values(), rows, cols, self.value(x).values(), &mut out);
        Ok(self.push(Op::Affine { w, x, b }, Tensor::vector(out)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let na = self.check_vec(a, "add lhs")?;
        let nb = self.check_vec(b, "add rhs")?;
        if na != nb {
            return Err(Error::shape("add", na, nb));
        }
        let out: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Op::AddVec { a, b }, Tensor::vector(out)))
    }

    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::contract("add_n over empty set"));
        }
        let n = self.check_vec(xs[0], "add_n")?;
        let mut out = vec![0.0; n];
        for &v in xs {
            if self.check_vec(v, "add_n")? != n {
                return Err(Error::shape("add_n", n, self.value(v).len()));
            }
            for (o, x) in out.iter_mut().zip(self.value(v).values()) {
                *o += x;
            }
        }
        Ok(self.push(Op::AddN { xs: xs.to_vec() }, Tensor::vector(out)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let na = self.check_vec(a, "mul lhs")?;
        if na != self.check_vec(b, "mul rhs")? {
            return Err(Error::shape("mul", na, self.value(b).len()));
        }
        let out: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(Op::MulElem { a, b }, Tensor::vector(out)))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out: Vec<f64> = self.value(x).values().iter().map(|v| v * k).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::ScaleConst { x, k }, Tensor::new(shape, out).expect("same shape"))
    }

    pub fn add_const(&mut self, x: Var, k: f64) -> Var {
        let out: Vec<f64> = self.value(x).values().iter().map(|v| v + k).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::AddConst { x }, Tensor::new(shape, out).expect("same shape"))
    }

    /// Broadcast-multiplies `x` by scalar node `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        let out: Vec<f64> = self.value(x).values().iter().map(|v| v * sv).collect();
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Op::MulScalar { x, s }, Tensor::new(shape, out).expect("same shape")))
    }

    fn unary_elementwise(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self.value(x).values().iter().map(|&v| f(v)).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(op, Tensor::new(shape, out).expect("same shape"))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary_elementwise(x, |v| v.max(0.0), Op::Relu { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary_elementwise(x, f64::tanh, Op::Tanh { x })
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary_elementwise(x, softplus, Op::Softplus { x })
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let na = self.check_vec(a, "dot lhs")?;
        if na != self.check_vec(b, "dot rhs")? {
            return Err(Error::shape("dot", na, self.value(b).len()));
        }
        let out = dot(self.value(a).values(), self.value(b).values());
        Ok(self.push(Op::Dot { a, b }, Tensor::scalar(out)))
    }

    /// x / ‖x‖₂. Errors on a zero vector.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        self.check_vec(x, "l2_normalize")?;
        let norm = self.value(x).values().iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 0.0 || !norm.is_finite() {
            return Err(Error::contract(format!(
                "l2_normalize of vector with norm {norm}"
            )));
        }
        let out: Vec<f64> = self.value(x).values().iter().map(|v| v / norm).collect();
        Ok(self.push(Op::L2Normalize { x }, Tensor::vector(out)))
    }

    pub fn log_sum_exp(&mut self, x: Var) -> Result<Var> {
        self.check_vec(x, "log_sum_exp")?;
        let out = log_sum_exp(self.value(x).values());
        Ok(self.push(Op::LogSumExp { x }, Tensor::scalar(out)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check_vec(x, "sum")?;
        let out = self.value(x).values().iter().sum();
        Ok(self.push(Op::Sum { x }, Tensor::scalar(out)))
    }

    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let n = self.check_vec(x, "gather")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::contract(format!("gather index {bad} out of range {n}")));
        }
        let out: Vec<f64> = idx.iter().map(|&i| self.value(x).values()[i]).collect();
        Ok(self.push(Op::Gather { x, idx }, Tensor::vector(out)))
    }

    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::contract("stack_rows over empty set"));
        }
        let d = self.check_vec(rows[0], "stack_rows")?;
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if self.check_vec(r, "stack_rows")? != d {
                return Err(Error::shape("stack_rows", d, self.value(r).len()));
            }
            out.extend_from_slice(self.value(r).values());
        }
        let t = Tensor::matrix(rows.len(), d, out)?;
        Ok(self.push(Op::StackRows { rows: rows.to_vec() }, t))
    }

    pub fn gather_rows(&mut self, m: Var, idx: Vec<usize>) -> Result<Var> {
        let (rows, cols) = {
            let t = self.value(m);
            if !t.is_matrix() {
                return Err(Error::shape("gather_rows", "matrix", format!("{:?}", t.shape())));
            }
            (t.rows(), t.cols())
        };
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(format!(
                "gather_rows index {bad} out of range {rows}"
            )));
        }
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in &idx {
            out.extend_from_slice(self.value(m).row(i));
        }
        let t = Tensor::matrix(idx.len(), cols, out)?;
        Ok(self.push(Op::GatherRows { m, idx }, t))
    }

    pub fn row(&mut self, m: Var, i: usize) -> Result<Var> {
        let t = self.value(m);
        if !t.is_matrix() {
            return Err(Error::shape("row", "matrix", format!("{:?}", t.shape())));
        }
        if i >= t.rows() {
            return Err(Error::contract(format!("row {i} out of range {}", t.rows())));
        }
        let out = t.row(i).to_vec();
        Ok(self.push(Op::Row { m, i }, Tensor::vector(out)))
    }

    pub fn stack_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        let mut out = Vec::with_capacity(xs.len());
        for &v in xs {
            out.push(self.value(v).item()?);
        }
        Ok(self.push(Op::StackScalars { xs: xs.to_vec() }, Tensor::vector(out)))
    }

    /// Σ w_k x_k over scalar nodes.
    pub fn weighted_sum(&mut self, xs: &[Var], w: &[f64]) -> Result<Var> {
        if xs.len() != w.len() {
            return Err(Error::shape("weighted_sum", xs.len(), w.len()));
        }
        let mut out = 0.0;
        for (&v, &wk) in xs.iter().zip(w) {
            out += wk * self.value(v).item()?;
        }
        Ok(self.push(
            Op::WeightedSum {
                xs: xs.to_vec(),
                w: w.to_vec(),
            },
            Tensor::scalar(out),
        ))
    }

    /// Reverse pass from a scalar loss. Gradients are exact for the recorded
    /// graph; the tape stays intact (values remain readable afterwards).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let keep = matches!(self.nodes[id].op, Op::Leaf { grad: true });
            self.accumulate(id, &g, &mut grads);
            if keep {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn add_grad(&self, grads: &mut Vec<Option<Tensor>>, v: Var, delta: &[f64]) {
        match &mut grads[v.0] {
            Some(t) => {
                for (a, b) in t.values_mut().iter_mut().zip(delta) {
                    *a += b;
                }
            }
            None => {
                let shape = self.value(v).shape().to_vec();
                grads[v.0] = Some(Tensor::new(shape, delta.to_vec()).expect("grad shape"));
            }
        }
    }

    fn add_grad_at(&self, grads: &mut Vec<Option<Tensor>>, v: Var, pos: &[usize], delta: &[f64]) {
        if grads[v.0].is_none() {
            grads[v.0] = Some(Tensor::zeros_like(self.value(v)));
        }
        let t = grads[v.0].as_mut().unwrap();
        for (&p, d) in pos.iter().zip(delta) {
            t.values_mut()[p] += d;
        }
    }

    fn accumulate(&self, id: usize, g: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        let gv = g.values();
        match &self.nodes[id].op {
            Op::Leaf { .. } => {}
            Op::MatVec { w, x } | Op::Affine { w, x, b: _ } => {
                let (rows, cols) = (self.value(*w).rows(), self.value(*w).cols());
                let xv = self.value(*x).values();
                let wv = self.value(*w).values();
                // dW += g ⊗ x
                let mut dw = vec![0.0; rows * cols];
                for r in 0..rows {
                    let gr = gv[r];
                    if gr != 0.0 {
                        for (c, xc) in xv.iter().enumerate() {
                            dw[r * cols + c] = gr * xc;
                        }
                    }
                }
                self.add_grad(grads, *w, &dw);
                // dx += Wᵀ g
                let mut dx = vec![0.0; cols];
                for (r, wrow) in wv.chunks_exact(cols).enumerate() {
                    let gr = gv[r];
                    if gr != 0.0 {
                        for (c, wc) in wrow.iter().enumerate() {
                            dx[c] += gr * wc;
                        }
                    }
                }
                self.add_grad(grads, *x, &dx);
                if let Op::Affine { b, .. } = &self.nodes[id].op {
                    self.add_grad(grads, *b, gv);
                }
            }
            Op::AddVec { a, b } => {
                self.add_grad(grads, *a, gv);
                self.add_grad(grads, *b, gv);
            }
            Op::AddN { xs } => {
                for &v in xs {
                    self.add_grad(grads, v, gv);
                }
            }
            Op::MulElem { a, b } => {
                let av = self.value(*a).values();
                let bv = self.value(*b).values();
                let da: Vec<f64> = gv.iter().zip(bv).map(|(g, b)| g * b).collect();
                let db: Vec<f64> = gv.iter().zip(av).map(|(g, a)| g * a).collect();
                self.add_grad(grads, *a, &da);
                self.add_grad(grads, *b, &db);
            }
            Op::ScaleConst { x, k } => {
                let dx: Vec<f64> = gv.iter().map(|g| g * k).collect();
                self.add_grad(grads, *x, &dx);
            }
            Op::AddConst { x } => {
                self.add_grad(grads, *x, gv);
            }
            Op::MulScalar { x, s } => {
                let sv = self.value(*s).values()[0];
                let xv = self.value(*x).values();
                let dx: Vec<f64> = gv.iter().map(|g| g * sv).collect();
                let ds = dot(gv, xv);
                self.add_grad(grads, *x, &dx);
                self.add_grad(grads, *s, &[ds]);
            }
            Op::Relu { x } => {
                let xv = self.value(*x).values();
                let dx: Vec<f64> = gv
                    .iter()
                    .zip(xv)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.add_grad(grads, *x, &dx);
            }
            Op::Tanh { x } => {
                let yv = self.nodes[id].value.values();
                let dx: Vec<f64> = gv.iter().zip(yv).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.add_grad(grads, *x, &dx);
            }
            Op::Softplus { x } => {
                let xv = self.value(*x).values();
                let dx: Vec<f64> = gv.iter().zip(xv).map(|(g, &x)| g * sigmoid(x)).collect();
                self.add_grad(grads, *x, &dx);
            }
            Op::Dot { a, b } => {
                let gs = gv[0];
                let av = self.value(*a).values();
                let bv = self.value(*b).values();
                let da: Vec<f64> = bv.iter().map(|b| gs * b).collect();
                let db: Vec<f64> = av.iter().map(|a| gs * a).collect();
                self.add_grad(grads, *a, &da);
                self.add_grad(grads, *b, &db);
            }
            Op::L2Normalize { x } => {
                // y = x/‖x‖, dx = (g − (g·y) y)/‖x‖
                let xv = self.value(*x).values();
                let yv = self.nodes[id].value.values();
                let norm = xv.iter().map(|v| v * v).sum::<f64>().sqrt();
                let gy = dot(gv, yv);
                let dx: Vec<f64> = gv.iter().zip(yv).map(|(g, y)| (g - gy * y) / norm).collect();
                self.add_grad(grads, *x, &dx);
            }
            Op::LogSumExp { x } => {
                let gs = gv[0];
                let xv = self.value(*x).values();
                let lse = self.nodes[id].value.values()[0];
                let dx: Vec<f64> = xv.iter().map(|&v| gs * (v - lse).exp()).collect();
                self.add_grad(grads, *x, &dx);
            }
            Op::Sum { x } => {
                let gs = gv[0];
                let n = self.value(*x).len();
                self.add_grad(grads, *x, &vec![gs; n]);
            }
            Op::Gather { x, idx } => {
                self.add_grad_at(grads, *x, idx, gv);
            }
            Op::StackRows { rows } => {
                let d = self.value(rows[0]).len();
                for (r, &v) in rows.iter().enumerate() {
                    self.add_grad(grads, v, &gv[r * d..(r + 1) * d]);
                }
            }
            Op::GatherRows { m, idx } => {
                let cols = self.value(*m).cols();
                let pos: Vec<usize> = idx
                    .iter()
                    .flat_map(|&i| (i * cols)..(i * cols + cols))
                    .collect();
                self.add_grad_at(grads, *m, &pos, gv);
            }
            Op::Row { m, i } => {
                let cols = self.value(*m).cols();
                let pos: Vec<usize> = (i * cols..(i + 1) * cols).collect();
                self.add_grad_at(grads, *m, &pos, gv);
            }
            Op::StackScalars { xs } => {
                for (k, &v) in xs.iter().enumerate() {
                    self.add_grad(grads, v, &[gv[k]]);
                }
            }
            Op::WeightedSum { xs, w } => {
                let gs = gv[0];
                for (&v, &wk) in xs.iter().zip(w) {
                    self.add_grad(grads, v, &[gs * wk]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        // loss = x², x = 3 → grad 6
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let loss = tape.mul(x, x).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        assert_eq!(grads.take(x).unwrap().values(), &[6.0]);
    }

    #[test]
    fn softplus_gradient_at_zero() {
        // loss = softplus(x), x = 0 → grad sigmoid(0) = 0.5
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let loss = tape.softplus(x);
        let mut grads = tape.backward(loss).unwrap();
        assert!((grads.take(x).unwrap().values()[0] - 0.5).abs() < 1e-15);
        assert!((tape.value(loss).item().unwrap() - 2.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn l2_normalize_zero_vector_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
        assert!(tape.l2_normalize(x).is_err());
    }

    #[test]
    fn logsumexp_softmax_gradient_sums_to_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.3, -1.2, 2.0]));
        let lse = tape.log_sum_exp(x).unwrap();
        let mut grads = tape.backward(lse).unwrap();
        let g = grads.take(x).unwrap();
        assert!((g.values().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
