//! Learnable latent counterparts of the flip, rotation and flip+rotation
//! image transforms.
//!
//! Each latent transform is a low-rank residual linear map
//! `v ↦ v + M · (N · u)`, where `u = v` for the flip and
//! `u = cat(v, K(cos α, sin α))` for the two rotation-parameterized maps.
//! `K` is a two-layer tanh perceptron shared by both rotation maps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::group::{Transform, TransformKind};
use crate::rng::{derive_seed, SeedTag};
use crate::tensor::{BoundLayer, LayerParams, Matrix, Tape, Var};

/// Factors of a rank-`r` residual: `m: d × r`, `n: r × d_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankParams {
    pub m: Matrix,
    pub n: Matrix,
}

impl LowRankParams {
    pub fn latent_dim(&self) -> usize {
        self.m.rows()
    }

    pub fn rank(&self) -> usize {
        self.m.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.n.cols()
    }

    fn check(&self) -> Result<()> {
        if self.m.cols() != self.n.rows() {
            return Err(Error::shape("low-rank factors", self.m.shape(), self.n.shape()));
        }
        Ok(())
    }

    /// Dense `d × d_in` residual `M · N`.
    pub fn residual(&self) -> Result<Matrix> {
        self.m.matmul(&self.n)
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundLowRank {
        BoundLowRank {
            m: tape.param(self.m.clone()),
            n: tape.param(self.n.clone()),
        }
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundLowRank {
        BoundLowRank {
            m: tape.constant(self.m.clone()),
            n: tape.constant(self.n.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLowRank {
    pub m: Var,
    pub n: Var,
}

impl BoundLowRank {
    /// `v + M · (N · u)` for a batch `v` with matching residual input `u`.
    pub fn apply(&self, tape: &mut Tape, v: Var, u: Var) -> Result<Var> {
        let low = tape.linear(u, self.n, None)?;
        let res = tape.linear(low, self.m, None)?;
        tape.add(v, res)
    }
}

/// Rotation embedding network `R² → R^{n_emb}`, tanh hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RotEmbedParams {
    pub hidden: LayerParams,
    pub out: LayerParams,
}

impl RotEmbedParams {
    pub fn embedding_dim(&self) -> usize {
        self.out.outputs()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundRotEmbed {
        BoundRotEmbed {
            hidden: self.hidden.bind(tape),
            out: self.out.bind(tape),
        }
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundRotEmbed {
        BoundRotEmbed {
            hidden: self.hidden.bind_frozen(tape),
            out: self.out.bind_frozen(tape),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundRotEmbed {
    pub hidden: BoundLayer,
    pub out: BoundLayer,
}

impl BoundRotEmbed {
    /// Embeds one angle per batch row.
    pub fn embed(&self, tape: &mut Tape, angles: &[f64]) -> Result<Var> {
        let mut r = Matrix::zeros(angles.len(), 2);
        for (i, &a) in angles.iter().enumerate() {
            r.row_mut(i).copy_from_slice(&rotation_vector(a));
        }
        let r = tape.constant(r);
        let h = self.hidden.forward(tape, r)?;
        let h = tape.tanh(h)?;
        self.out.forward(tape, h)
    }
}

/// The three latent transforms with their shared rotation embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTransformSet {
    pub gamma: LowRankParams,
    pub eta: LowRankParams,
    pub lambda: LowRankParams,
    pub xi: RotEmbedParams,
}

impl LatentTransformSet {
    pub fn latent_dim(&self) -> usize {
        self.gamma.latent_dim()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundLatents {
        BoundLatents {
            gamma: self.gamma.bind(tape),
            eta: self.eta.bind(tape),
            lambda: self.lambda.bind(tape),
            xi: self.xi.bind(tape),
        }
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundLatents {
        BoundLatents {
            gamma: self.gamma.bind_frozen(tape),
            eta: self.eta.bind_frozen(tape),
            lambda: self.lambda.bind_frozen(tape),
            xi: self.xi.bind_frozen(tape),
        }
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        vec![
            ("gamma.m".into(), &self.gamma.m),
            ("gamma.n".into(), &self.gamma.n),
            ("eta.m".into(), &self.eta.m),
            ("eta.n".into(), &self.eta.n),
            ("lambda.m".into(), &self.lambda.m),
            ("lambda.n".into(), &self.lambda.n),
            ("xi.0.w".into(), &self.xi.hidden.weight),
            ("xi.0.b".into(), &self.xi.hidden.bias),
            ("xi.1.w".into(), &self.xi.out.weight),
            ("xi.1.b".into(), &self.xi.out.bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![
            &mut self.gamma.m,
            &mut self.gamma.n,
            &mut self.eta.m,
            &mut self.eta.n,
            &mut self.lambda.m,
            &mut self.lambda.n,
            &mut self.xi.hidden.weight,
            &mut self.xi.hidden.bias,
            &mut self.xi.out.weight,
            &mut self.xi.out.bias,
        ]
    }
}

/// Tape handles for a [`LatentTransformSet`].
#[derive(Debug, Clone, Copy)]
pub struct BoundLatents {
    pub gamma: BoundLowRank,
    pub eta: BoundLowRank,
    pub lambda: BoundLowRank,
    pub xi: BoundRotEmbed,
}

/// Which latent map realizes an image-space transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentBranch {
    Flip,
    Rot,
    FlipRot,
}

impl LatentBranch {
    pub fn for_transform(t: &Transform) -> Self {
        match t.kind() {
            TransformKind::Rot => LatentBranch::Rot,
            TransformKind::FlipRot if t.angle() == 0.0 => LatentBranch::Flip,
            TransformKind::FlipRot => LatentBranch::FlipRot,
        }
    }
}

impl BoundLatents {
    pub fn flip(&self, tape: &mut Tape, v: Var) -> Result<Var> {
        self.gamma.apply(tape, v, v)
    }

    /// Rotation map, given a precomputed embedding batch.
    pub fn rot(&self, tape: &mut Tape, v: Var, emb: Var) -> Result<Var> {
        let u = tape.concat(v, emb)?;
        self.eta.apply(tape, v, u)
    }

    pub fn flip_rot(&self, tape: &mut Tape, v: Var, emb: Var) -> Result<Var> {
        let u = tape.concat(v, emb)?;
        self.lambda.apply(tape, v, u)
    }

    pub fn embed(&self, tape: &mut Tape, angles: &[f64]) -> Result<Var> {
        self.xi.embed(tape, angles)
    }

    /// Applies `branch` with per-row angles (ignored by the flip branch).
    pub fn apply(&self, tape: &mut Tape, branch: LatentBranch, v: Var, angles: &[f64]) -> Result<Var> {
        match branch {
            LatentBranch::Flip => self.flip(tape, v),
            LatentBranch::Rot => {
                let e = self.embed(tape, angles)?;
                self.rot(tape, v, e)
            }
            LatentBranch::FlipRot => {
                let e = self.embed(tape, angles)?;
                self.flip_rot(tape, v, e)
            }
        }
    }
}

/// `[cos α, sin α]`.
pub fn rotation_vector(alpha: f64) -> [f64; 2] {
    let (s, c) = alpha.sin_cos();
    [c, s]
}

fn single_row(v: &[f64], d: usize) -> Result<Matrix> {
    if v.len() != d {
        return Err(Error::shape("latent vector", (1, d), (1, v.len())));
    }
    Ok(Matrix::row_vector(v))
}

fn eval_single(set: &LatentTransformSet, branch: LatentBranch, v: &[f64], alpha: f64) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = set.bind_frozen(&mut tape);
    let x = tape.constant(single_row(v, set.latent_dim())?);
    let y = bound.apply(&mut tape, branch, x, &[alpha])?;
    Ok(tape.value(y).data().to_vec())
}

pub fn embed_rotation(xi: &RotEmbedParams, alpha: f64) -> Result<Vec<f64>> {
    let alpha = crate::group::normalize_angle(alpha)?;
    let mut tape = Tape::new();
    let bound = xi.bind_frozen(&mut tape);
    let e = bound.embed(&mut tape, &[alpha])?;
    Ok(tape.value(e).data().to_vec())
}

pub fn apply_flip_latent(gamma: &LowRankParams, v: &[f64]) -> Result<Vec<f64>> {
    gamma.check()?;
    if gamma.input_dim() != gamma.latent_dim() {
        return Err(Error::shape("flip factors", gamma.m.shape(), gamma.n.shape()));
    }
    let mut tape = Tape::new();
    let g = gamma.bind_frozen(&mut tape);
    let x = tape.constant(single_row(v, gamma.latent_dim())?);
    let y = g.apply(&mut tape, x, x)?;
    Ok(tape.value(y).data().to_vec())
}

fn apply_rotating(p: &LowRankParams, xi: &RotEmbedParams, v: &[f64], alpha: f64) -> Result<Vec<f64>> {
    p.check()?;
    let alpha = crate::group::normalize_angle(alpha)?;
    let mut tape = Tape::new();
    let lr = p.bind_frozen(&mut tape);
    let k = xi.bind_frozen(&mut tape);
    let x = tape.constant(single_row(v, p.latent_dim())?);
    let e = k.embed(&mut tape, &[alpha])?;
    let u = tape.concat(x, e)?;
    let y = lr.apply(&mut tape, x, u)?;
    Ok(tape.value(y).data().to_vec())
}

pub fn apply_rot_latent(eta: &LowRankParams, xi: &RotEmbedParams, v: &[f64], alpha: f64) -> Result<Vec<f64>> {
    apply_rotating(eta, xi, v, alpha)
}

pub fn apply_fliprot_latent(lambda: &LowRankParams, xi: &RotEmbedParams, v: &[f64], alpha: f64) -> Result<Vec<f64>> {
    apply_rotating(lambda, xi, v, alpha)
}

/// Routes `t` to its latent counterpart.
pub fn apply_latent_for(set: &LatentTransformSet, t: &Transform, v: &[f64]) -> Result<Vec<f64>> {
    eval_single(set, LatentBranch::for_transform(t), v, t.angle())
}

/// Identity-initialized set: every `M` is zero, `N` and the embedding use
/// uniform fan-in initialization.
pub fn init_latent_transforms(d: usize, r: usize, n_emb: usize, emb_hidden: usize, seed: u64) -> Result<LatentTransformSet> {
    if r == 0 || r >= d {
        return Err(Error::Invalid(format!("latent rank must satisfy 0 < r < d, got r={r}, d={d}")));
    }
    if n_emb == 0 || emb_hidden == 0 {
        return Err(Error::Invalid("rotation embedding sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SeedTag::Latent, 0));
    let bound = |inp: usize| 1.0 / (inp as f64).sqrt();
    let mut factor = |inp: usize| {
        use rand::Rng;
        let b = bound(inp);
        LowRankParams {
            m: Matrix::zeros(d, r),
            n: Matrix::from_fn(r, inp, |_, _| rng.gen_range(-b..b)),
        }
    };
    let gamma = factor(d);
    let eta = factor(d + n_emb);
    let lambda = factor(d + n_emb);
    let xi = RotEmbedParams {
        hidden: LayerParams::init_uniform(2, emb_hidden, &mut rng),
        out: LayerParams::init_uniform(emb_hidden, n_emb, &mut rng),
    };
    Ok(LatentTransformSet { gamma, eta, lambda, xi })
}

/// Largest singular value by power iteration on `AᵀA`.
pub fn spectral_norm(a: &Matrix) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let at = a.transpose();
    let mut x = Matrix::from_fn(a.cols(), 1, |i, _| 1.0 + (i as f64 * 0.618).fract());
    let mut sigma = 0.0;
    for _ in 0..200 {
        let y = a.matmul(&x).expect("shapes");
        let z = at.matmul(&y).expect("shapes");
        let nz = z.norm();
        if nz == 0.0 {
            return 0.0;
        }
        let next = nz.sqrt();
        x = z.scale(1.0 / nz);
        if (next - sigma).abs() <= 1e-14 * next {
            sigma = next;
            break;
        }
        sigma = next;
    }
    // σ = ‖A x‖ for the converged unit vector x
    let _ = sigma;
    a.matmul(&x).expect("shapes").norm()
}
