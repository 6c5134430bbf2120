//! Encoder, auxiliary decoder and pose regression head.
//!
//! All three are relu perceptrons with a linear output layer:
//!
//! * encoder: `img² → hidden1 → hidden2 → d`
//! * decoder: `d → hidden2 → hidden1 → img²`
//! * head: `d → head_hidden → head_hidden → 42` (21 joints × 2)

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, SeedTag};
use crate::tensor::{BoundLayer, LayerParams, Matrix, Tape, Var};

pub const NUM_JOINTS: usize = 21;
pub const POSE_DIM: usize = NUM_JOINTS * 2;

/// Architecture sizes shared by every model component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub img_size: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub latent: usize,
    pub head_hidden: usize,
}

impl ModelDims {
    pub fn pixels(&self) -> usize {
        self.img_size * self.img_size
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("img_size", self.img_size),
            ("hidden1", self.hidden1),
            ("hidden2", self.hidden2),
            ("d", self.latent),
            ("head_hidden", self.head_hidden),
        ];
        for (name, v) in named {
            if v == 0 {
                return Err(Error::Invalid(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Perceptron with relu between layers and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<LayerParams>,
}

impl Mlp {
    pub fn init(sizes: &[usize], rng: &mut ChaCha8Rng) -> Self {
        Self {
            layers: sizes
                .windows(2)
                .map(|w| LayerParams::init_uniform(w[0], w[1], rng))
                .collect(),
        }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        Self {
            layers: sizes.windows(2).map(|w| LayerParams::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, LayerParams::inputs)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, LayerParams::outputs)
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundMlp {
        BoundMlp(self.layers.iter().map(|l| l.bind(tape)).collect())
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundMlp {
        BoundMlp(self.layers.iter().map(|l| l.bind_frozen(tape)).collect())
    }

    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{i}.w"), &l.weight));
            out.push((format!("{i}.b"), &l.bias));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Forward pass on a batch without recording gradients.
    pub fn eval(&self, x: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let xi = tape.constant(x.clone());
        let y = bound.forward(&mut tape, xi)?;
        Ok(tape.value(y).clone())
    }
}

#[derive(Debug, Clone)]
pub struct BoundMlp(pub Vec<BoundLayer>);

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.0.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i + 1 < self.0.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}

/// Encoder, decoder and head parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub head: Mlp,
}

impl ModelParams {
    /// Fan-in scaled uniform initialization, deterministic in `seed`.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut enc_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SeedTag::Model, 0));
        let mut dec_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SeedTag::Model, 1));
        let mut head_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SeedTag::Head, 0));
        Ok(Self {
            dims,
            encoder: Mlp::init(&encoder_sizes(&dims), &mut enc_rng),
            decoder: Mlp::init(&decoder_sizes(&dims), &mut dec_rng),
            head: Mlp::init(&head_sizes(&dims), &mut head_rng),
        })
    }

    pub fn zeros(dims: ModelDims) -> Self {
        Self {
            dims,
            encoder: Mlp::zeros(&encoder_sizes(&dims)),
            decoder: Mlp::zeros(&decoder_sizes(&dims)),
            head: Mlp::zeros(&head_sizes(&dims)),
        }
    }

    /// Re-draws only the head, from its own seed stream.
    pub fn reinit_head(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SeedTag::Head, 0));
        self.head = Mlp::init(&head_sizes(&self.dims), &mut rng);
    }
}

pub fn encoder_sizes(d: &ModelDims) -> Vec<usize> {
    vec![d.pixels(), d.hidden1, d.hidden2, d.latent]
}

pub fn decoder_sizes(d: &ModelDims) -> Vec<usize> {
    vec![d.latent, d.hidden2, d.hidden1, d.pixels()]
}

pub fn head_sizes(d: &ModelDims) -> Vec<usize> {
    vec![d.latent, d.head_hidden, d.head_hidden, POSE_DIM]
}

/// Flattens a batch of square images into rows.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Matrix>, img_size: usize) -> Result<Matrix> {
    let px = img_size * img_size;
    let mut data = Vec::new();
    let mut n = 0;
    for img in images {
        if img.shape() != (img_size, img_size) {
            return Err(Error::shape("image", (img_size, img_size), img.shape()));
        }
        data.extend_from_slice(img.data());
        n += 1;
    }
    Matrix::from_vec(n, px, data)
}

pub fn encode(encoder: &Mlp, img: &Matrix) -> Result<Vec<f64>> {
    let n = img.rows();
    if img.cols() != n || n * n != encoder.input_dim() {
        return Err(Error::shape("encode", (encoder.input_dim(), 1), img.shape()));
    }
    Ok(encoder.eval(&stack_images([img], n)?)?.into_vec())
}

pub fn decode(decoder: &Mlp, v: &[f64]) -> Result<Matrix> {
    if v.len() != decoder.input_dim() {
        return Err(Error::shape("decode", (1, decoder.input_dim()), (1, v.len())));
    }
    let out = decoder.eval(&Matrix::row_vector(v))?.into_vec();
    let side = (out.len() as f64).sqrt().round() as usize;
    Matrix::from_vec(side, side, out)
}

/// Predicted joints `(x, y)` in normalized image coordinates.
pub fn regress_pose(head: &Mlp, v: &[f64]) -> Result<Vec<(f64, f64)>> {
    if v.len() != head.input_dim() {
        return Err(Error::shape("regress_pose", (1, head.input_dim()), (1, v.len())));
    }
    let out = head.eval(&Matrix::row_vector(v))?;
    Ok(out.data().chunks_exact(2).map(|c| (c[0], c[1])).collect())
}
