//! Reverse-mode differentiation over a fixed set of batched primitives.
//!
//! A [`Tape`] records every forward operation with its cached output.
//! [`Tape::backward`] walks the record in reverse and returns exact
//! gradients for every node that depends on a parameter leaf.
//!
//! Supported primitives: `linear`, `relu`, `tanh`, `concat`, `add`,
//! `scale` and `mse`. Batches are stacked as matrix rows.

use std::sync::atomic::{AtomicU64, Ordering};

use super::matrix::{gemm_accumulate, Matrix};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Linear { x: usize, w: usize, b: Option<usize> },
    Relu(usize),
    Tanh(usize),
    Concat(usize, usize),
    Add(usize, usize),
    Scale(usize, f64),
    Mse(usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input that is never differentiated.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf (a parameter, or an input under test).
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[self.index(v).expect("variable from another tape")].value
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::State(
                "variable was not recorded by a forward pass on this tape".into(),
            ));
        }
        Ok(v.idx)
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    /// `x · wᵀ + b` with `x: batch × in`, `w: out × in`, `b: 1 × out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xi, wi) = (self.index(x)?, self.index(w)?);
        let bi = b.map(|b| self.index(b)).transpose()?;
        let xv = &self.nodes[xi].value;
        let wv = &self.nodes[wi].value;
        if xv.cols() != wv.cols() {
            return Err(Error::shape("linear", xv.shape(), wv.shape()));
        }
        let (batch, inp, out) = (xv.rows(), xv.cols(), wv.rows());
        let mut y = Matrix::zeros(batch, out);
        if let Some(bi) = bi {
            let bv = &self.nodes[bi].value;
            if bv.shape() != (1, out) {
                return Err(Error::shape("linear bias", (1, out), bv.shape()));
            }
            for r in 0..batch {
                y.row_mut(r).copy_from_slice(bv.data());
            }
        }
        let wt = wv.transpose();
        gemm_accumulate(xv.data(), wt.data(), y.data_mut(), batch, inp, out);
        let needs = self.needs(xi) || self.needs(wi) || bi.is_some_and(|b| self.needs(b));
        Ok(self.push(y, Op::Linear { x: xi, w: wi, b: bi }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let y = self.nodes[xi].value.map(|v| if v > 0.0 { v } else { 0.0 });
        let needs = self.needs(xi);
        Ok(self.push(y, Op::Relu(xi), needs))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let y = self.nodes[xi].value.map(f64::tanh);
        let needs = self.needs(xi);
        Ok(self.push(y, Op::Tanh(xi), needs))
    }

    /// Column-wise concatenation of two batches with equal row counts.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if av.rows() != bv.rows() {
            return Err(Error::shape("concat", av.shape(), bv.shape()));
        }
        let mut y = Matrix::zeros(av.rows(), av.cols() + bv.cols());
        for r in 0..av.rows() {
            let row = y.row_mut(r);
            row[..av.cols()].copy_from_slice(av.row(r));
            row[av.cols()..].copy_from_slice(bv.row(r));
        }
        let needs = self.needs(ai) || self.needs(bi);
        Ok(self.push(y, Op::Concat(ai, bi), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        let y = self.nodes[ai].value.add(&self.nodes[bi].value)?;
        let needs = self.needs(ai) || self.needs(bi);
        Ok(self.push(y, Op::Add(ai, bi), needs))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let xi = self.index(x)?;
        let y = self.nodes[xi].value.scale(s);
        let needs = self.needs(xi);
        Ok(self.push(y, Op::Scale(xi, s), needs))
    }

    /// Mean of squared differences over every entry; a `1 × 1` node.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if av.shape() != bv.shape() {
            return Err(Error::shape("mse", av.shape(), bv.shape()));
        }
        let n = av.len().max(1) as f64;
        let s: f64 = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let needs = self.needs(ai) || self.needs(bi);
        Ok(self.push(Matrix::filled(1, 1, s / n), Op::Mse(ai, bi), needs))
    }

    /// Sum of several `1 × 1` nodes, left to right.
    pub fn sum(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::Invalid("sum of zero terms".into()))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Gradients of the scalar `root` with respect to every recorded node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let ri = self.index(root)?;
        let rv = &self.nodes[ri].value;
        if rv.shape() != (1, 1) {
            return Err(Error::shape("backward root", (1, 1), rv.shape()));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; ri + 1];
        grads[ri] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=ri).rev() {
            if !self.nodes[i].needs_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match self.nodes[i].op {
                Op::Leaf => unreachable!(),
                Op::Linear { x, w, b } => {
                    let xv = &self.nodes[x].value;
                    let wv = &self.nodes[w].value;
                    if self.needs(x) {
                        let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                        gemm_accumulate(g.data(), wv.data(), dx.data_mut(), g.rows(), g.cols(), wv.cols());
                        accumulate(&mut grads, x, dx);
                    }
                    if self.needs(w) {
                        let gt = g.transpose();
                        let mut dw = Matrix::zeros(wv.rows(), wv.cols());
                        gemm_accumulate(gt.data(), xv.data(), dw.data_mut(), gt.rows(), gt.cols(), xv.cols());
                        accumulate(&mut grads, w, dw);
                    }
                    if let Some(b) = b.filter(|&b| self.needs(b)) {
                        let mut db = Matrix::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (d, &v) in db.data_mut().iter_mut().zip(g.row(r)) {
                                *d += v;
                            }
                        }
                        accumulate(&mut grads, b, db);
                    }
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[x].value;
                    let mut dx = g;
                    for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, x, dx);
                }
                Op::Tanh(x) => {
                    let yv = &self.nodes[i].value;
                    let mut dx = g;
                    for (d, &y) in dx.data_mut().iter_mut().zip(yv.data()) {
                        *d *= 1.0 - y * y;
                    }
                    accumulate(&mut grads, x, dx);
                }
                Op::Concat(a, b) => {
                    let ac = self.nodes[a].value.cols();
                    let bc = self.nodes[b].value.cols();
                    if self.needs(a) {
                        let da = Matrix::from_fn(g.rows(), ac, |r, c| g.get(r, c));
                        accumulate(&mut grads, a, da);
                    }
                    if self.needs(b) {
                        let db = Matrix::from_fn(g.rows(), bc, |r, c| g.get(r, ac + c));
                        accumulate(&mut grads, b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(a) && self.needs(b) {
                        accumulate(&mut grads, a, g.clone());
                        accumulate(&mut grads, b, g);
                    } else if self.needs(a) {
                        accumulate(&mut grads, a, g);
                    } else if self.needs(b) {
                        accumulate(&mut grads, b, g);
                    }
                }
                Op::Scale(x, s) => accumulate(&mut grads, x, g.scale(s)),
                Op::Mse(a, b) => {
                    let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
                    let k = 2.0 * g.data()[0] / av.len().max(1) as f64;
                    let da = av.sub(bv)?.scale(k);
                    if self.needs(b) {
                        accumulate(&mut grads, b, da.scale(-1.0));
                    }
                    if self.needs(a) {
                        accumulate(&mut grads, a, da);
                    }
                }
            }
        }
        Ok(Gradients { tape: self.id, grads })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], i: usize, g: Matrix) {
    match &mut grads[i] {
        Some(acc) => {
            for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, or `None` when the root
    /// does not depend on `v`.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but materializes a zero gradient of the
    /// given shape for unreachable nodes.
    pub fn get_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(rows, cols))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn mse_of_identical_inputs_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Matrix::row_vector(&[1.0, -2.0, 0.5]));
        let loss = tape.mse(x, x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(tape.scalar(loss), 0.0);
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mse_of_identity_map_against_zero() {
        let xs = [0.5, -1.0, 2.0, 0.25];
        let mut tape = Tape::new();
        let x = tape.param(Matrix::row_vector(&xs));
        let w = tape.constant(Matrix::identity(4));
        let t = tape.constant(Matrix::zeros(1, 4));
        let y = tape.linear(x, w, None).unwrap();
        let loss = tape.mse(y, t).unwrap();
        let g = tape.backward(loss).unwrap();
        for (gv, xv) in g.get(x).unwrap().data().iter().zip(xs) {
            assert_eq!(*gv, 2.0 * xv / 4.0);
        }
    }

    #[test]
    fn backward_on_foreign_variable_is_a_state_error() {
        let mut other = Tape::new();
        let v = other.param(Matrix::zeros(1, 1));
        let tape = Tape::new();
        assert!(matches!(tape.backward(v), Err(Error::State(_))));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let v = tape.param(Matrix::zeros(2, 2));
        assert!(matches!(tape.backward(v), Err(Error::Shape { .. })));
    }

    /// Two-layer network with every primitive in the supported set.
    fn every_primitive(ps: &[Matrix], x: &Matrix, t: &Matrix) -> Result<(f64, Vec<Matrix>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let xi = tape.param(x.clone());
        let ti = tape.constant(t.clone());
        let h = tape.linear(xi, vars[0], Some(vars[1]))?;
        let h = tape.relu(h)?;
        let z = tape.tanh(xi)?;
        let hz = tape.concat(h, z)?;
        let y = tape.linear(hz, vars[2], Some(vars[3]))?;
        let y2 = tape.scale(y, 0.7)?;
        let out = tape.add(y2, y)?;
        let l1 = tape.mse(out, ti)?;
        let l2 = tape.mse(ti, y)?;
        let l = tape.sum(&[l1, l2])?;
        let loss = tape.scale(l, 1.3)?;
        let g = tape.backward(loss)?;
        let mut grads: Vec<Matrix> = vars.iter().zip(ps).map(|(&v, p)| g.get_or_zeros(v, p.rows(), p.cols())).collect();
        grads.push(g.get(xi).unwrap().clone());
        Ok((tape.scalar(loss), grads))
    }

    #[test]
    fn random_two_layer_network_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..5 {
            let x = rand_matrix(3, 4, &mut rng);
            let t = rand_matrix(3, 2, &mut rng);
            let mut params = vec![
                rand_matrix(5, 4, &mut rng),
                rand_matrix(1, 5, &mut rng),
                rand_matrix(2, 9, &mut rng),
                rand_matrix(1, 2, &mut rng),
            ];
            params.push(x.clone());
            let report = grad_check(&params, 1e-5, |ps| {
                let (v, g) = every_primitive(&ps[..4], &ps[4], &t)?;
                Ok((v, g))
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        // f = mse(x + x, 0) = mean(4x²) → df/dx = 8x/n
        let mut tape = Tape::new();
        let x = tape.param(Matrix::row_vector(&[1.0, 3.0]));
        let zero = tape.constant(Matrix::zeros(1, 2));
        let s = tape.add(x, x).unwrap();
        let loss = tape.mse(s, zero).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[4.0, 12.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Matrix::row_vector(&[1.0]));
        let p = tape.param(Matrix::row_vector(&[2.0]));
        let loss = tape.mse(c, p).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap().data(), &[2.0]);
    }
}
