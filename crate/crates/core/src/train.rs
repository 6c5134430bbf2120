//! Transformation-isomorphism pretraining, its baselines, and supervised
//! pose finetuning.
//!
//! The pretraining objective is `classic + w·(ord + sec)`:
//!
//! * `classic`: decoder reconstruction of the original and the flipped,
//!   rotated and flip-rotated images;
//! * `ord`: one latent transform versus the encoding of the transformed image;
//! * `sec`: two latent transforms in sequence versus the encoding of the
//!   image transformed by the matching composition, over all nine ordered
//!   pairs with fresh angles.
//!
//! Every term is a mean-squared error over entries.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{DataConfig, Dataset, HandPose2D, SynthSample};
use crate::error::{Error, Result};
use crate::group::Transform;
use crate::latent::{init_latent_transforms, BoundLatents, LatentTransformSet};
use crate::metrics::{mean_pose_errors, MetricsRow};
use crate::model::{head_sizes, stack_images, BoundMlp, Mlp, ModelDims, ModelParams, POSE_DIM};
use crate::rng::{derive_seed, SeedTag};
use crate::tensor::{grad_check, AdamConfig, AdamState, GradCheckReport, Matrix, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Full objective; every parameter group is trained.
    Ti,
    /// Reconstruction only (`w = 0`); latent transforms stay at init.
    ReconOnly,
    /// Reconstruction plus `w·Σ‖E(F(I)) − E(I)‖²`: latent transforms
    /// replaced by the identity.
    Invariance,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Ti, Mode::ReconOnly, Mode::Invariance];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Ti => "ti",
            Mode::ReconOnly => "recon_only",
            Mode::Invariance => "invariance",
        }
    }

    pub fn trains_latents(&self) -> bool {
        *self == Mode::Ti
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ti" => Ok(Mode::Ti),
            "recon_only" => Ok(Mode::ReconOnly),
            "invariance" => Ok(Mode::Invariance),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected ti, recon_only or invariance)"
            ))),
        }
    }
}

/// Every knob of a run. The flat `key = value` file form lives in
/// [`crate::config`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Weight of the consistency terms.
    pub w: f64,
    pub d: usize,
    pub r: usize,
    pub n_emb: usize,
    pub emb_hidden: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub head_hidden: usize,
    pub img_size: usize,
    pub sigma: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub data_seed: u64,
    /// Reconstruct the untransformed image as well as the three transformed ones.
    pub classic_include_original: bool,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub finetune_batch_size: usize,
    /// Number of seeds in multi-seed comparisons.
    pub n_seeds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: Mode::Ti,
            epochs: 30,
            batch_size: 32,
            learning_rate: 1.5e-3,
            weight_decay: 0.01,
            w: 0.001,
            d: 64,
            r: 8,
            n_emb: 16,
            emb_hidden: 16,
            hidden1: 256,
            hidden2: 128,
            head_hidden: 128,
            img_size: 32,
            sigma: 1.2,
            n_train: 2000,
            n_val: 200,
            n_test: 200,
            data_seed: 0,
            classic_include_original: true,
            finetune_epochs: 20,
            finetune_lr: 1.5e-3,
            finetune_batch_size: 32,
            n_seeds: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("d", self.d),
            ("r", self.r),
            ("n_emb", self.n_emb),
            ("emb_hidden", self.emb_hidden),
            ("hidden1", self.hidden1),
            ("hidden2", self.hidden2),
            ("head_hidden", self.head_hidden),
            ("img_size", self.img_size),
            ("n_train", self.n_train),
            ("n_val", self.n_val),
            ("n_test", self.n_test),
            ("finetune_batch_size", self.finetune_batch_size),
            ("n_seeds", self.n_seeds),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if self.r >= self.d {
            return Err(Error::Config(format!("r must be below d (r={}, d={})", self.r, self.d)));
        }
        let nonneg = [
            ("w", self.w),
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
            ("finetune_lr", self.finetune_lr),
        ];
        for (k, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be finite and nonnegative, got {v}")));
            }
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            img_size: self.img_size,
            hidden1: self.hidden1,
            hidden2: self.hidden2,
            latent: self.d,
            head_hidden: self.head_hidden,
        }
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            n_train: self.n_train,
            n_val: self.n_val,
            n_test: self.n_test,
            base_seed: self.data_seed,
            img_size: self.img_size,
            sigma: self.sigma,
        }
    }

    /// Consistency weight actually optimized in this mode.
    pub fn effective_w(&self) -> f64 {
        match self.mode {
            Mode::ReconOnly => 0.0,
            _ => self.w,
        }
    }

    pub fn pretrain_adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    pub fn finetune_adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.finetune_lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_classic: f64,
    pub l_ord: f64,
    pub l_sec: f64,
    pub l_ti: f64,
}

impl LossBreakdown {
    pub fn assemble(l_classic: f64, l_ord: f64, l_sec: f64, w: f64) -> Self {
        Self {
            l_classic,
            l_ord,
            l_sec,
            l_ti: l_classic + w * (l_ord + l_sec),
        }
    }
}

/// Angles for one sample: `(alpha, beta)` for the ordinary and classic
/// terms, `(alpha2, beta2)` redrawn for the secondary term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Draws {
    pub alpha: f64,
    pub beta: f64,
    pub alpha2: f64,
    pub beta2: f64,
}

impl Draws {
    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            alpha: rng.gen_range(0.0..TAU),
            beta: rng.gen_range(0.0..TAU),
            alpha2: rng.gen_range(0.0..TAU),
            beta2: rng.gen_range(0.0..TAU),
        }
    }

    /// Fixed per-sample draws for held-out evaluation.
    pub fn held_out(seed: u64, index: usize) -> Self {
        Self::sample(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, SeedTag::Eval, index as u64)))
    }
}

/// The three generators of the image-side transforms used by the losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Generator {
    H,
    R,
    Hr,
}

impl Generator {
    pub const ALL: [Generator; 3] = [Generator::H, Generator::R, Generator::Hr];

    /// Image transform for this generator: `H`, `R_a` or `HR_b`.
    pub fn transform(&self, a: f64, b: f64) -> Transform {
        match self {
            Generator::H => Transform::FLIP,
            Generator::R => Transform::rot(a),
            Generator::Hr => Transform::flip_rot(b),
        }
    }
}

/// Encoder, decoder, head and latent transforms.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub model: ModelParams,
    pub latents: LatentTransformSet,
}

impl Network {
    pub fn init(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            model: ModelParams::init(config.dims(), config.seed)?,
            latents: init_latent_transforms(config.d, config.r, config.n_emb, config.emb_hidden, config.seed)?,
        })
    }

    /// Named tensors: `enc.*`, `dec.*`, `head.*`, then the latent set.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (prefix, mlp) in [("enc", &self.model.encoder), ("dec", &self.model.decoder), ("head", &self.model.head)] {
            out.extend(mlp.tensors().into_iter().map(|(n, m)| (format!("{prefix}.{n}"), m)));
        }
        out.extend(self.latents.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.model.encoder.tensors_mut();
        out.extend(self.model.decoder.tensors_mut());
        out.extend(self.model.head.tensors_mut());
        out.extend(self.latents.tensors_mut());
        out
    }

    /// Tensors updated by pretraining in `mode`, in optimizer order.
    pub fn pretrain_tensors_mut(&mut self, mode: Mode) -> Vec<&mut Matrix> {
        let mut out = self.model.encoder.tensors_mut();
        out.extend(self.model.decoder.tensors_mut());
        if mode.trains_latents() {
            out.extend(self.latents.tensors_mut());
        }
        out
    }
}

fn mlp_vars(b: &BoundMlp) -> Vec<Var> {
    b.0.iter().flat_map(|l| [l.weight, l.bias]).collect()
}

fn latent_vars(b: &BoundLatents) -> Vec<Var> {
    vec![
        b.gamma.m,
        b.gamma.n,
        b.eta.m,
        b.eta.n,
        b.lambda.m,
        b.lambda.n,
        b.xi.hidden.weight,
        b.xi.hidden.bias,
        b.xi.out.weight,
        b.xi.out.bias,
    ]
}

fn transformed_batch(images: &[&Matrix], ts: &[Transform], img_size: usize) -> Result<Matrix> {
    let moved = images
        .iter()
        .zip(ts)
        .map(|(img, t)| t.apply_image(img, 0.0))
        .collect::<Result<Vec<_>>>()?;
    stack_images(&moved, img_size)
}

/// Tape nodes for the three loss terms of one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub classic: Option<Var>,
    pub ord: Option<Var>,
    pub sec: Option<Var>,
}

/// Which parts of the objective to record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossPlan {
    pub classic: bool,
    pub consistency: bool,
    pub include_original: bool,
}

/// Records the batch objective on `tape`.
///
/// `latents = None` substitutes the identity for every latent transform
/// (the invariance objective). `decoder` is required when
/// `plan.classic` is set.
pub fn record_losses(
    tape: &mut Tape,
    encoder: &BoundMlp,
    decoder: Option<&BoundMlp>,
    latents: Option<&BoundLatents>,
    images: &[&Matrix],
    draws: &[Draws],
    plan: LossPlan,
) -> Result<LossVars> {
    if images.is_empty() || images.len() != draws.len() {
        return Err(Error::Invalid(format!(
            "need one draw per image, got {} images and {} draws",
            images.len(),
            draws.len()
        )));
    }
    let n = images[0].rows();
    let alphas: Vec<f64> = draws.iter().map(|d| d.alpha).collect();
    let betas: Vec<f64> = draws.iter().map(|d| d.beta).collect();
    let x0 = tape.constant(stack_images(images.iter().copied(), n)?);
    let v0 = encoder.forward(tape, x0)?;

    // ordinary-pass images, shared with the reconstruction term
    let mut xs = Vec::with_capacity(3);
    let mut vs = Vec::with_capacity(3);
    for g in Generator::ALL {
        let ts: Vec<Transform> = draws.iter().map(|d| g.transform(d.alpha, d.beta)).collect();
        let x = tape.constant(transformed_batch(images, &ts, n)?);
        vs.push(encoder.forward(tape, x)?);
        xs.push(x);
    }

    let classic = if plan.classic {
        let dec = decoder.ok_or_else(|| Error::Invalid("reconstruction needs a decoder".into()))?;
        let mut targets: Vec<(Var, Var)> = xs.iter().copied().zip(vs.iter().copied()).collect();
        if plan.include_original {
            targets.insert(0, (x0, v0));
        }
        let mut terms = Vec::with_capacity(targets.len());
        for (x, v) in targets {
            let rec = dec.forward(tape, v)?;
            terms.push(tape.mse(rec, x)?);
        }
        Some(tape.sum(&terms)?)
    } else {
        None
    };

    if !plan.consistency {
        return Ok(LossVars {
            classic,
            ord: None,
            sec: None,
        });
    }

    let emb_a = latents.map(|l| l.embed(tape, &alphas)).transpose()?;
    let emb_b = latents.map(|l| l.embed(tape, &betas)).transpose()?;
    let mut ord_terms = Vec::with_capacity(3);
    for (g, &v) in Generator::ALL.iter().zip(&vs) {
        let t = apply_generator(tape, latents, *g, v0, emb_a, emb_b)?;
        ord_terms.push(tape.mse(v, t)?);
    }
    let ord = tape.sum(&ord_terms)?;

    let alphas2: Vec<f64> = draws.iter().map(|d| d.alpha2).collect();
    let betas2: Vec<f64> = draws.iter().map(|d| d.beta2).collect();
    let emb_a2 = latents.map(|l| l.embed(tape, &alphas2)).transpose()?;
    let emb_b2 = latents.map(|l| l.embed(tape, &betas2)).transpose()?;
    let mut sec_terms = Vec::with_capacity(9);
    for g1 in Generator::ALL {
        let first = apply_generator(tape, latents, g1, v0, emb_a2, emb_b2)?;
        for g2 in Generator::ALL {
            let ts: Vec<Transform> = draws
                .iter()
                .map(|d| g2.transform(d.alpha2, d.beta2).compose(&g1.transform(d.alpha2, d.beta2)))
                .collect();
            let target = if ts.iter().all(|t| *t == Transform::IDENTITY) {
                v0
            } else {
                let x = tape.constant(transformed_batch(images, &ts, n)?);
                encoder.forward(tape, x)?
            };
            let latent = apply_generator(tape, latents, g2, first, emb_a2, emb_b2)?;
            sec_terms.push(tape.mse(target, latent)?);
        }
    }
    let sec = tape.sum(&sec_terms)?;
    Ok(LossVars {
        classic,
        ord: Some(ord),
        sec: Some(sec),
    })
}

fn apply_generator(
    tape: &mut Tape,
    latents: Option<&BoundLatents>,
    g: Generator,
    v: Var,
    emb_a: Option<Var>,
    emb_b: Option<Var>,
) -> Result<Var> {
    let Some(l) = latents else { return Ok(v) };
    let missing = || Error::State("rotation embedding was not recorded".into());
    match g {
        Generator::H => l.flip(tape, v),
        Generator::R => l.rot(tape, v, emb_a.ok_or_else(missing)?),
        Generator::Hr => l.flip_rot(tape, v, emb_b.ok_or_else(missing)?),
    }
}

const FULL_PLAN: LossPlan = LossPlan {
    classic: true,
    consistency: true,
    include_original: true,
};

fn eval_single(net: &Network, latents: bool, img: &Matrix, draws: Draws, plan: LossPlan) -> Result<(Tape, LossVars)> {
    let mut tape = Tape::new();
    let enc = net.model.encoder.bind_frozen(&mut tape);
    let dec = net.model.decoder.bind_frozen(&mut tape);
    let lat = latents.then(|| net.latents.bind_frozen(&mut tape));
    let vars = record_losses(&mut tape, &enc, Some(&dec), lat.as_ref(), &[img], &[draws], plan)?;
    Ok((tape, vars))
}

fn fixed_draws(alpha: f64, beta: f64) -> Draws {
    Draws {
        alpha,
        beta,
        alpha2: alpha,
        beta2: beta,
    }
}

/// `Σ_F ‖E(F(I)) − T_F(E(I))‖²` over `F ∈ {H, R_α, HR_β}`.
pub fn ordinary_loss(net: &Network, img: &Matrix, alpha: f64, beta: f64) -> Result<f64> {
    let plan = LossPlan { classic: false, ..FULL_PLAN };
    let (tape, v) = eval_single(net, true, img, fixed_draws(alpha, beta), plan)?;
    Ok(tape.scalar(v.ord.expect("recorded")))
}

/// Nine-pair composition term with angles `alpha`, `beta`.
pub fn secondary_loss(net: &Network, img: &Matrix, alpha: f64, beta: f64) -> Result<f64> {
    let plan = LossPlan { classic: false, ..FULL_PLAN };
    let (tape, v) = eval_single(net, true, img, fixed_draws(alpha, beta), plan)?;
    Ok(tape.scalar(v.sec.expect("recorded")))
}

/// Reconstruction term for `I` (optionally), `H(I)`, `R_α(I)`, `HR_β(I)`.
pub fn classic_loss(model: &ModelParams, img: &Matrix, alpha: f64, beta: f64, include_original: bool) -> Result<f64> {
    let mut tape = Tape::new();
    let enc = model.encoder.bind_frozen(&mut tape);
    let dec = model.decoder.bind_frozen(&mut tape);
    let plan = LossPlan {
        classic: true,
        consistency: false,
        include_original,
    };
    let v = record_losses(&mut tape, &enc, Some(&dec), None, &[img], &[fixed_draws(alpha, beta)], plan)?;
    Ok(tape.scalar(v.classic.expect("recorded")))
}

/// Full objective for one image with angles drawn from `rng`.
pub fn ti_loss(net: &Network, img: &Matrix, rng: &mut impl Rng, w: f64) -> Result<LossBreakdown> {
    let (tape, v) = eval_single(net, true, img, Draws::sample(rng), FULL_PLAN)?;
    Ok(breakdown(&tape, &v, w))
}

/// Consistency terms with identity latent maps: the invariance objective
/// (ordinary plus secondary part).
pub fn invariance_loss(net: &Network, img: &Matrix, rng: &mut impl Rng) -> Result<f64> {
    let plan = LossPlan { classic: false, ..FULL_PLAN };
    let (tape, v) = eval_single(net, false, img, Draws::sample(rng), plan)?;
    Ok(tape.scalar(v.ord.expect("recorded")) + tape.scalar(v.sec.expect("recorded")))
}

/// Finite-difference check of the full objective on one image, over every
/// tensor of `net` (encoder, decoder, head, latent transforms).
pub fn objective_grad_check(net: &Network, img: &Matrix, draws: Draws, w: f64, step: f64) -> Result<GradCheckReport> {
    let start: Vec<Matrix> = net.tensors().into_iter().map(|(_, m)| m.clone()).collect();
    let mut scratch = net.clone();
    grad_check(&start, step, |vals| {
        for (dst, src) in scratch.tensors_mut().into_iter().zip(vals) {
            *dst = src.clone();
        }
        let mut tape = Tape::new();
        let enc = scratch.model.encoder.bind(&mut tape);
        let dec = scratch.model.decoder.bind(&mut tape);
        let head = scratch.model.head.bind(&mut tape);
        let lat = scratch.latents.bind(&mut tape);
        let v = record_losses(&mut tape, &enc, Some(&dec), Some(&lat), &[img], &[draws], FULL_PLAN)?;
        let c = tape.add(v.ord.expect("recorded"), v.sec.expect("recorded"))?;
        let c = tape.scale(c, w)?;
        let root = tape.add(v.classic.expect("recorded"), c)?;
        let grads = tape.backward(root)?;
        let mut vars = mlp_vars(&enc);
        vars.extend(mlp_vars(&dec));
        vars.extend(mlp_vars(&head));
        vars.extend(latent_vars(&lat));
        let g = vars
            .iter()
            .map(|&x| {
                let (r, c) = tape.value(x).shape();
                grads.get_or_zeros(x, r, c)
            })
            .collect();
        Ok((tape.scalar(root), g))
    })
}

fn breakdown(tape: &Tape, v: &LossVars, w: f64) -> LossBreakdown {
    let get = |x: Option<Var>| x.map(|x| tape.scalar(x)).unwrap_or(0.0);
    LossBreakdown::assemble(get(v.classic), get(v.ord), get(v.sec), w)
}

/// Everything needed to continue pretraining bit-identically.
#[derive(Debug, Clone)]
pub struct PretrainState {
    pub config: TrainConfig,
    pub net: Network,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    /// Number of completed epochs.
    pub epoch: usize,
}

impl PretrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        let mut net = Network::init(config)?;
        let shapes: Vec<(usize, usize)> = net.pretrain_tensors_mut(config.mode).iter().map(|m| m.shape()).collect();
        Ok(Self {
            config: config.clone(),
            net,
            adam: AdamState::new(config.pretrain_adam(), &shapes),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, SeedTag::Pretrain, 0)),
            epoch: 0,
        })
    }

    fn plan(&self) -> LossPlan {
        LossPlan {
            classic: true,
            consistency: self.config.mode != Mode::ReconOnly,
            include_original: self.config.classic_include_original,
        }
    }

    /// One optimizer step on `batch`. Returns the pre-step loss values.
    pub fn step(&mut self, batch: &[&Matrix], draws: &[Draws]) -> Result<LossBreakdown> {
        let mode = self.config.mode;
        let w = self.config.effective_w();
        let plan = self.plan();
        let mut tape = Tape::new();
        let enc = self.net.model.encoder.bind(&mut tape);
        let dec = self.net.model.decoder.bind(&mut tape);
        let lat = match mode {
            Mode::Ti => Some(self.net.latents.bind(&mut tape)),
            _ => None,
        };
        let v = record_losses(&mut tape, &enc, Some(&dec), lat.as_ref(), batch, draws, plan)?;
        let classic = v.classic.expect("recorded");
        let root = match (v.ord, v.sec) {
            (Some(o), Some(s)) if w != 0.0 => {
                let c = tape.add(o, s)?;
                let c = tape.scale(c, w)?;
                tape.add(classic, c)?
            }
            _ => classic,
        };
        let losses = breakdown(&tape, &v, w);
        if !tape.scalar(root).is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        let grads = tape.backward(root)?;
        let mut vars = mlp_vars(&enc);
        vars.extend(mlp_vars(&dec));
        if let Some(l) = &lat {
            vars.extend(latent_vars(l));
        }
        let g: Vec<Matrix> = vars
            .iter()
            .map(|&x| {
                let (r, c) = tape.value(x).shape();
                grads.get_or_zeros(x, r, c)
            })
            .collect();
        let grefs: Vec<&Matrix> = g.iter().collect();
        let mut params = self.net.pretrain_tensors_mut(mode);
        self.adam.update(&mut params, &grefs)?;
        Ok(losses)
    }
}

/// Held-out loss terms over `samples` with fixed per-sample draws.
/// Consistency terms always use the current latent transforms, so they
/// serve as a probe in the baseline modes too.
pub fn evaluate_pretrain(net: &Network, config: &TrainConfig, samples: &[SynthSample]) -> Result<LossBreakdown> {
    if samples.is_empty() {
        return Err(Error::Invalid("no samples to evaluate".into()));
    }
    let plan = LossPlan {
        classic: true,
        consistency: true,
        include_original: config.classic_include_original,
    };
    let (mut c, mut o, mut s) = (0.0, 0.0, 0.0);
    for (chunk_idx, chunk) in samples.chunks(config.batch_size).enumerate() {
        let base = chunk_idx * config.batch_size;
        let imgs: Vec<&Matrix> = chunk.iter().map(|s| &s.image).collect();
        let draws: Vec<Draws> = (0..chunk.len()).map(|i| Draws::held_out(config.seed, base + i)).collect();
        let mut tape = Tape::new();
        let enc = net.model.encoder.bind_frozen(&mut tape);
        let dec = net.model.decoder.bind_frozen(&mut tape);
        let lat = net.latents.bind_frozen(&mut tape);
        let v = record_losses(&mut tape, &enc, Some(&dec), Some(&lat), &imgs, &draws, plan)?;
        let k = chunk.len() as f64;
        c += k * tape.scalar(v.classic.expect("recorded"));
        o += k * tape.scalar(v.ord.expect("recorded"));
        s += k * tape.scalar(v.sec.expect("recorded"));
    }
    let n = samples.len() as f64;
    Ok(LossBreakdown::assemble(c / n, o / n, s / n, config.effective_w()))
}

fn loss_row(config: &TrainConfig, run_id: &str, epoch: usize, split: &str, l: &LossBreakdown, with_consistency: bool) -> MetricsRow {
    MetricsRow {
        run_id: run_id.to_string(),
        mode: config.mode.to_string(),
        seed: config.seed,
        epoch,
        split: split.to_string(),
        l_classic: Some(l.l_classic),
        l_ord: with_consistency.then_some(l.l_ord),
        l_sec: with_consistency.then_some(l.l_sec),
        l_ti: Some(l.l_ti),
        mpjpe: None,
        pa_mpjpe: None,
    }
}

/// Trains until `state.config.epochs` epochs are complete. A fresh state
/// first logs a held-out row for epoch 0; each epoch then logs the mean
/// training losses and the held-out losses. `on_epoch` sees the state after
/// every completed epoch.
pub fn run_pretrain(
    state: &mut PretrainState,
    dataset: &Dataset,
    run_id: &str,
    mut on_epoch: impl FnMut(&PretrainState, &[MetricsRow]) -> Result<()>,
) -> Result<Vec<MetricsRow>> {
    check_dataset(&state.config, dataset)?;
    let cfg = state.config.clone();
    let mut rows = Vec::new();
    if state.epoch == 0 {
        let held = evaluate_pretrain(&state.net, &cfg, &dataset.val)?;
        rows.push(loss_row(&cfg, run_id, 0, "val", &held, true));
        on_epoch(state, &rows)?;
    }
    let consistency = cfg.mode != Mode::ReconOnly;
    while state.epoch < cfg.epochs {
        let epoch = state.epoch + 1;
        let mut order: Vec<usize> = (0..dataset.train.len()).collect();
        order.shuffle(&mut state.rng);
        let mut sum = LossBreakdown::default();
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let imgs: Vec<&Matrix> = idx.iter().map(|&i| &dataset.train[i].image).collect();
            let draws: Vec<Draws> = idx.iter().map(|_| Draws::sample(&mut state.rng)).collect();
            let l = state.step(&imgs, &draws).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} at epoch {epoch}, batch {b}")),
                other => other,
            })?;
            let k = idx.len() as f64;
            sum.l_classic += k * l.l_classic;
            sum.l_ord += k * l.l_ord;
            sum.l_sec += k * l.l_sec;
        }
        let n = dataset.train.len() as f64;
        let train = LossBreakdown::assemble(sum.l_classic / n, sum.l_ord / n, sum.l_sec / n, cfg.effective_w());
        state.epoch = epoch;
        let held = evaluate_pretrain(&state.net, &cfg, &dataset.val)?;
        let new = [
            loss_row(&cfg, run_id, epoch, "train", &train, consistency),
            loss_row(&cfg, run_id, epoch, "val", &held, true),
        ];
        log::info!(
            "{run_id} epoch {epoch}: train l_ti {:.6}, val l_classic {:.6} l_ord {:.6} l_sec {:.6}",
            train.l_ti,
            held.l_classic,
            held.l_ord,
            held.l_sec
        );
        rows.extend(new.iter().cloned());
        on_epoch(state, &new)?;
    }
    Ok(rows)
}

fn check_dataset(config: &TrainConfig, dataset: &Dataset) -> Result<()> {
    if dataset.config.img_size != config.img_size {
        return Err(Error::Data(format!(
            "dataset images are {0}×{0}, config expects {1}×{1}",
            dataset.config.img_size, config.img_size
        )));
    }
    if dataset.train.is_empty() || dataset.val.is_empty() {
        return Err(Error::Data("dataset needs train and validation samples".into()));
    }
    Ok(())
}

/// Encoder plus pose head being finetuned.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseModel {
    pub encoder: Mlp,
    pub head: Mlp,
}

impl PoseModel {
    /// Takes the encoder from `init` and draws a fresh head from `seed`, so
    /// every init variant starts from the same head.
    pub fn from_pretrained(init: &ModelParams, seed: u64) -> Self {
        let mut m = init.clone();
        m.reinit_head(seed);
        Self {
            encoder: m.encoder,
            head: m.head,
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> =
            self.encoder.tensors().into_iter().map(|(n, m)| (format!("enc.{n}"), m)).collect();
        out.extend(self.head.tensors().into_iter().map(|(n, m)| (format!("head.{n}"), m)));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.head.tensors_mut());
        out
    }

    /// Flat pose predictions, one row per input row.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        self.head.eval(&self.encoder.eval(x)?)
    }
}

fn rows_to_poses(m: &Matrix) -> Vec<Vec<(f64, f64)>> {
    (0..m.rows())
        .map(|r| m.row(r).chunks_exact(2).map(|c| (c[0], c[1])).collect())
        .collect()
}

/// Mean MPJPE and PA-MPJPE of `model` on paired inputs and flat targets.
pub fn evaluate_pose_rows(model: &PoseModel, inputs: &Matrix, targets: &Matrix) -> Result<(f64, f64)> {
    let pred = model.predict(inputs)?;
    let p = rows_to_poses(&pred);
    let t = rows_to_poses(targets);
    let gts: Vec<&[(f64, f64)]> = t.iter().map(|v| v.as_slice()).collect();
    mean_pose_errors(&p, &gts)
}

pub fn evaluate_pose(model: &PoseModel, samples: &[SynthSample]) -> Result<(f64, f64)> {
    let (x, y) = supervised_arrays(samples)?;
    evaluate_pose_rows(model, &x, &y)
}

fn supervised_arrays(samples: &[SynthSample]) -> Result<(Matrix, Matrix)> {
    let n = samples.first().ok_or_else(|| Error::Invalid("no samples".into()))?.image.rows();
    let x = stack_images(samples.iter().map(|s| &s.image), n)?;
    let flat: Vec<Vec<f64>> = samples.iter().map(|s| s.pose.flat()).collect();
    let y = Matrix::stack_rows(POSE_DIM, flat.iter().map(|v| v.as_slice()))?;
    Ok((x, y))
}

/// Supervised fit of encoder and head on `inputs → targets` with mean
/// squared joint error. Logs validation MPJPE/PA-MPJPE for epoch 0 and after
/// every epoch.
pub struct FinetuneRun<'a> {
    pub config: &'a TrainConfig,
    pub run_id: &'a str,
    /// Label written to the `mode` column.
    pub label: &'a str,
}

/// Log and final optimizer state of a finetuning run.
#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub rows: Vec<MetricsRow>,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
}

impl FinetuneRun<'_> {
    pub fn fit(&self, model: &mut PoseModel, train: (&Matrix, &Matrix), val: (&Matrix, &Matrix)) -> Result<FinetuneOutcome> {
        let cfg = self.config;
        if model.encoder.output_dim() != model.head.input_dim() {
            return Err(Error::shape(
                "finetune latent",
                (1, model.encoder.output_dim()),
                (1, model.head.input_dim()),
            ));
        }
        if model.head.output_dim() != train.1.cols() || train.0.rows() != train.1.rows() {
            return Err(Error::shape("finetune targets", train.1.shape(), (train.0.rows(), model.head.output_dim())));
        }
        let shapes: Vec<(usize, usize)> = model.tensors_mut().iter().map(|m| m.shape()).collect();
        let mut adam = AdamState::new(cfg.finetune_adam(), &shapes);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SeedTag::Finetune, 0));
        let row = |epoch: usize, split: &str, (m, pa): (f64, f64)| MetricsRow {
            run_id: self.run_id.to_string(),
            mode: self.label.to_string(),
            seed: cfg.seed,
            epoch,
            split: split.to_string(),
            l_classic: None,
            l_ord: None,
            l_sec: None,
            l_ti: None,
            mpjpe: Some(m),
            pa_mpjpe: Some(pa),
        };
        let mut rows = vec![row(0, "val", evaluate_pose_rows(model, val.0, val.1)?)];
        let (x, y) = train;
        for epoch in 1..=cfg.finetune_epochs {
            let mut order: Vec<usize> = (0..x.rows()).collect();
            order.shuffle(&mut rng);
            for (b, idx) in order.chunks(cfg.finetune_batch_size).enumerate() {
                let xb = Matrix::stack_rows(x.cols(), idx.iter().map(|&i| x.row(i)))?;
                let yb = Matrix::stack_rows(y.cols(), idx.iter().map(|&i| y.row(i)))?;
                let mut tape = Tape::new();
                let enc = model.encoder.bind(&mut tape);
                let head = model.head.bind(&mut tape);
                let xv = tape.constant(xb);
                let yv = tape.constant(yb);
                let z = enc.forward(&mut tape, xv)?;
                let p = head.forward(&mut tape, z)?;
                let loss = tape.mse(p, yv)?;
                if !tape.scalar(loss).is_finite() {
                    return Err(Error::NonFinite(format!("finetune loss at epoch {epoch}, batch {b}")));
                }
                let grads = tape.backward(loss)?;
                let mut vars = mlp_vars(&enc);
                vars.extend(mlp_vars(&head));
                let g: Vec<Matrix> = vars
                    .iter()
                    .map(|&v| {
                        let (r, c) = tape.value(v).shape();
                        grads.get_or_zeros(v, r, c)
                    })
                    .collect();
                let grefs: Vec<&Matrix> = g.iter().collect();
                adam.update(&mut model.tensors_mut(), &grefs)?;
            }
            let val_metrics = evaluate_pose_rows(model, val.0, val.1)?;
            log::info!("{} epoch {epoch}: val mpjpe {:.6}", self.run_id, val_metrics.0);
            rows.push(row(epoch, "val", val_metrics));
        }
        Ok(FinetuneOutcome { rows, adam, rng })
    }
}

/// Finetunes the encoder of `init` with a fresh head on the pose task.
pub fn run_finetune(
    init: &ModelParams,
    config: &TrainConfig,
    dataset: &Dataset,
    run_id: &str,
    label: &str,
) -> Result<(PoseModel, FinetuneOutcome)> {
    config.validate()?;
    check_dataset(config, dataset)?;
    if init.dims.latent != config.d {
        return Err(Error::shape("finetune latent", (1, config.d), (1, init.dims.latent)));
    }
    if init.head.layers.iter().map(|l| l.weight.shape()).ne(head_sizes(&init.dims).windows(2).map(|w| (w[1], w[0]))) {
        return Err(Error::State("checkpoint head does not match its dimensions".into()));
    }
    let mut model = PoseModel::from_pretrained(init, config.seed);
    let train = supervised_arrays(&dataset.train)?;
    let val = supervised_arrays(&dataset.val)?;
    let out = FinetuneRun { config, run_id, label }.fit(&mut model, (&train.0, &train.1), (&val.0, &val.1))?;
    Ok((model, out))
}

/// Pose predicted for one image.
pub fn predict_pose(model: &PoseModel, img: &Matrix) -> Result<HandPose2D> {
    let x = stack_images([img], img.rows())?;
    HandPose2D::from_flat(model.predict(&x)?.data())
}
