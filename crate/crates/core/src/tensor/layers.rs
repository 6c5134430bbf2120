//! Dense layer parameters and their tape bindings.

use rand::Rng;

use super::matrix::Matrix;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Weight (`out × in`) and bias (`1 × out`) of a fully connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl LayerParams {
    pub fn zeros(inp: usize, out: usize) -> Self {
        Self {
            weight: Matrix::zeros(out, inp),
            bias: Matrix::zeros(1, out),
        }
    }

    /// Uniform `±1/√fan_in` initialization for weight and bias.
    pub fn init_uniform(inp: usize, out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inp.max(1) as f64).sqrt();
        Self {
            weight: Matrix::from_fn(out, inp, |_, _| rng.gen_range(-bound..bound)),
            bias: Matrix::from_fn(1, out, |_, _| rng.gen_range(-bound..bound)),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn check(&self) -> Result<()> {
        if self.bias.shape() != (1, self.weight.rows()) {
            return Err(Error::shape("layer bias", (1, self.weight.rows()), self.bias.shape()));
        }
        Ok(())
    }

    /// Records both tensors on `tape` as differentiable leaves.
    pub fn bind(&self, tape: &mut Tape) -> BoundLayer {
        BoundLayer {
            weight: tape.param(self.weight.clone()),
            bias: tape.param(self.bias.clone()),
        }
    }

    /// Records both tensors as constants (no gradient flows into them).
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundLayer {
        BoundLayer {
            weight: tape.constant(self.weight.clone()),
            bias: tape.constant(self.bias.clone()),
        }
    }
}

/// Tape handles for a [`LayerParams`].
#[derive(Debug, Clone, Copy)]
pub struct BoundLayer {
    pub weight: Var,
    pub bias: Var,
}

impl BoundLayer {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.linear(x, self.weight, Some(self.bias))
    }
}

/// `weight · x + bias` for a single input vector.
pub fn linear_forward(p: &LayerParams, x: &[f64]) -> Result<Vec<f64>> {
    p.check()?;
    if x.len() != p.weight.cols() {
        return Err(Error::shape("linear_forward", p.weight.shape(), (x.len(), 1)));
    }
    Ok((0..p.weight.rows())
        .map(|o| {
            let mut acc = 0.0;
            for (w, v) in p.weight.row(o).iter().zip(x) {
                acc += w * v;
            }
            acc + p.bias.data()[o]
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weight_returns_bias() {
        let mut p = LayerParams::zeros(3, 2);
        p.bias = Matrix::row_vector(&[0.5, -1.5]);
        assert_eq!(linear_forward(&p, &[9.0, 8.0, 7.0]).unwrap(), vec![0.5, -1.5]);
    }

    #[test]
    fn identity_weight_returns_input() {
        let p = LayerParams {
            weight: Matrix::identity(3),
            bias: Matrix::zeros(1, 3),
        };
        assert_eq!(linear_forward(&p, &[1.0, -2.0, 3.5]).unwrap(), vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn agrees_with_matmul_plus_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = LayerParams::init_uniform(6, 4, &mut rng);
        let x: Vec<f64> = (0..6).map(|i| (i as f64 * 0.37).sin()).collect();
        let col = Matrix::from_vec(6, 1, x.clone()).unwrap();
        let oracle = p.weight.matmul(&col).unwrap().transpose().add(&p.bias).unwrap();
        let got = linear_forward(&p, &x).unwrap();
        assert_eq!(got, oracle.data());

        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let input = tape.constant(Matrix::row_vector(&x));
        let y = bound.forward(&mut tape, input).unwrap();
        // the batched kernel seeds the accumulator with the bias
        assert!(tape.value(y).max_abs_diff(&oracle).unwrap() < 1e-14);
    }

    #[test]
    fn rejects_wrong_input_length() {
        let p = LayerParams::zeros(3, 2);
        assert!(matches!(linear_forward(&p, &[1.0]), Err(Error::Shape { .. })));
    }
}
