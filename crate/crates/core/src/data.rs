//! Synthetic 2D hand dataset.
//!
//! Poses come from a small forward-kinematics model (wrist plus five
//! four-joint fingers). Images are heatmap renderings of the skeleton, so
//! transforming a pose and re-rendering it matches transforming the image.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::group::Transform;
use crate::model::{NUM_JOINTS, POSE_DIM};
use crate::rng::{derive_seed, SeedTag};
use crate::tensor::Matrix;

pub type Point = (f64, f64);

/// Bones as `(parent, child)` joint indices.
pub fn skeleton_edges() -> Vec<(usize, usize)> {
    let mut edges = Vec::with_capacity(20);
    for f in 0..5 {
        let base = 1 + 4 * f;
        edges.push((0, base));
        for k in 0..3 {
            edges.push((base + k, base + k + 1));
        }
    }
    edges
}

/// 21 joints in normalized, centered coordinates (`y` up); index 0 is the
/// wrist, then four joints per finger from thumb to pinky.
#[derive(Debug, Clone, PartialEq)]
pub struct HandPose2D {
    joints: Vec<Point>,
}

impl HandPose2D {
    pub fn new(joints: Vec<Point>) -> Result<Self> {
        if joints.len() != NUM_JOINTS {
            return Err(Error::Invalid(format!("hand pose needs {NUM_JOINTS} joints, got {}", joints.len())));
        }
        if joints.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::NonFinite("joint coordinate".into()));
        }
        Ok(Self { joints })
    }

    /// Interprets a flat `[x0, y0, x1, y1, …]` vector.
    pub fn from_flat(v: &[f64]) -> Result<Self> {
        if v.len() != POSE_DIM {
            return Err(Error::Invalid(format!("flat pose needs {POSE_DIM} values, got {}", v.len())));
        }
        Self::new(v.chunks_exact(2).map(|c| (c[0], c[1])).collect())
    }

    pub fn joints(&self) -> &[Point] {
        &self.joints
    }

    pub fn flat(&self) -> Vec<f64> {
        self.joints.iter().flat_map(|&(x, y)| [x, y]).collect()
    }

    pub fn transformed(&self, t: &Transform) -> Self {
        Self {
            joints: t.apply_points(&self.joints),
        }
    }

    pub fn max_radius(&self) -> f64 {
        self.joints.iter().map(|(x, y)| x.hypot(*y)).fold(0.0, f64::max)
    }
}

/// Radius of the centered disk every generated skeleton fits in.
pub const MAX_RADIUS: f64 = 0.9;

const METACARPAL: [f64; 5] = [0.26, 0.40, 0.42, 0.40, 0.36];
const PHALANX: [f64; 5] = [0.20, 0.22, 0.24, 0.22, 0.18];
const PHALANX_RATIO: [f64; 3] = [1.0, 0.7, 0.5];

/// Draws a random hand pose. Deterministic in `seed`.
pub fn sample_hand_pose(seed: u64) -> HandPose2D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let deg = PI / 180.0;
    let wrist = (rng.gen_range(-0.05..0.05), -0.45 + rng.gen_range(-0.05..0.05));
    let mut joints = Vec::with_capacity(NUM_JOINTS);
    joints.push(wrist);
    for f in 0..5 {
        // thumb fans to +60°, pinky to −60°, measured from straight up
        let fan = (60.0 - 30.0 * f as f64 + rng.gen_range(-8.0..8.0)) * deg;
        let mut dir = PI / 2.0 + fan;
        let scale = rng.gen_range(0.9..1.1);
        let mut p = wrist;
        let l0 = METACARPAL[f] * scale;
        p = (p.0 + l0 * dir.cos(), p.1 + l0 * dir.sin());
        joints.push(p);
        for ratio in PHALANX_RATIO {
            dir -= rng.gen_range(0.0..70.0) * deg;
            let l = PHALANX[f] * ratio * scale;
            p = (p.0 + l * dir.cos(), p.1 + l * dir.sin());
            joints.push(p);
        }
    }
    let mut pose = HandPose2D { joints };
    let r = pose.max_radius();
    if r > MAX_RADIUS {
        let s = MAX_RADIUS / r;
        for j in &mut pose.joints {
            *j = (j.0 * s, j.1 * s);
        }
    }
    pose
}

/// Amplitude of bone segments relative to joint blobs.
const BONE_GAIN: f64 = 0.5;

/// Heatmap rendering: Gaussian blobs at joints and Gaussian-falloff bones,
/// clamped to `[0, 1]`. `sigma` is in pixels.
pub fn render_pose(pose: &HandPose2D, img_size: usize, sigma: f64) -> Result<Matrix> {
    if !(sigma > 0.0) {
        return Err(Error::Invalid(format!("sigma must be positive, got {sigma}")));
    }
    let half = img_size as f64 / 2.0;
    let center = (img_size as f64 - 1.0) / 2.0;
    let pix: Vec<Point> = pose.joints.iter().map(|&(x, y)| (x * half, y * half)).collect();
    let edges = skeleton_edges();
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut img = Matrix::zeros(img_size, img_size);
    for i in 0..img_size {
        let py = center - i as f64;
        for j in 0..img_size {
            let px = j as f64 - center;
            let mut v = 0.0;
            for &(jx, jy) in &pix {
                let (dx, dy) = (px - jx, py - jy);
                v += (-(dx * dx + dy * dy) * inv).exp();
            }
            for &(a, b) in &edges {
                v += BONE_GAIN * (-segment_dist2((px, py), pix[a], pix[b]) * inv).exp();
            }
            img.set(i, j, v.min(1.0));
        }
    }
    Ok(img)
}

fn segment_dist2(p: Point, a: Point, b: Point) -> f64 {
    let (ex, ey) = (b.0 - a.0, b.1 - a.1);
    let (qx, qy) = (p.0 - a.0, p.1 - a.1);
    let len2 = ex * ex + ey * ey;
    let t = if len2 > 0.0 {
        ((qx * ex + qy * ey) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (rx, ry) = (qx - t * ex, qy - t * ey);
    rx * rx + ry * ry
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub image: Matrix,
    pub pose: HandPose2D,
    pub seed: u64,
}

impl SynthSample {
    pub fn generate(seed: u64, img_size: usize, sigma: f64) -> Result<Self> {
        let pose = sample_hand_pose(seed);
        let image = render_pose(&pose, img_size, sigma)?;
        Ok(Self { image, pose, seed })
    }
}

/// Applies the same transform to the image and to the pose.
pub fn transform_sample(t: &Transform, s: &SynthSample) -> Result<SynthSample> {
    Ok(SynthSample {
        image: t.apply_image(&s.image, 0.0)?,
        pose: s.pose.transformed(t),
        seed: s.seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub base_seed: u64,
    pub img_size: usize,
    pub sigma: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_val: 200,
            n_test: 200,
            base_seed: 0,
            img_size: 32,
            sigma: 1.2,
        }
    }
}

impl DataConfig {
    /// Stable hash of every field that affects the generated bytes.
    pub fn hash(&self) -> u64 {
        let canon = format!(
            "n_train={};n_val={};n_test={};base_seed={};img_size={};sigma={:016x}",
            self.n_train,
            self.n_val,
            self.n_test,
            self.base_seed,
            self.img_size,
            self.sigma.to_bits()
        );
        let digest = Sha256::digest(canon.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DataConfig,
    pub train: Vec<SynthSample>,
    pub val: Vec<SynthSample>,
    pub test: Vec<SynthSample>,
}

pub fn make_dataset(config: &DataConfig) -> Result<Dataset> {
    if config.n_train == 0 || config.n_val == 0 || config.n_test == 0 {
        return Err(Error::Invalid("every split needs at least one sample".into()));
    }
    let split = |tag: SeedTag, n: usize| -> Result<Vec<SynthSample>> {
        (0..n as u64)
            .map(|i| SynthSample::generate(derive_seed(config.base_seed, tag, i), config.img_size, config.sigma))
            .collect()
    };
    Ok(Dataset {
        config: *config,
        train: split(SeedTag::Train, config.n_train)?,
        val: split(SeedTag::Val, config.n_val)?,
        test: split(SeedTag::Test, config.n_test)?,
    })
}

const DATA_MAGIC: &[u8; 4] = b"TIDS";
pub const DATA_VERSION: u32 = 1;

impl Dataset {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let c = &self.config;
        w.write_all(DATA_MAGIC)?;
        w.write_all(&DATA_VERSION.to_le_bytes())?;
        w.write_all(&c.hash().to_le_bytes())?;
        w.write_all(&(c.img_size as u32).to_le_bytes())?;
        w.write_all(&c.sigma.to_le_bytes())?;
        w.write_all(&c.base_seed.to_le_bytes())?;
        for n in [c.n_train, c.n_val, c.n_test] {
            w.write_all(&(n as u64).to_le_bytes())?;
        }
        for s in self.train.iter().chain(&self.val).chain(&self.test) {
            w.write_all(&s.seed.to_le_bytes())?;
            for v in s.pose.flat() {
                w.write_all(&v.to_le_bytes())?;
            }
            for v in s.image.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != DATA_MAGIC {
            return Err(Error::Data("not a dataset cache (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != DATA_VERSION {
            return Err(Error::Data(format!("unsupported dataset version {version}, expected {DATA_VERSION}")));
        }
        let hash = read_u64(r)?;
        let img_size = read_u32(r)? as usize;
        let sigma = read_f64(r)?;
        let base_seed = read_u64(r)?;
        let n_train = read_u64(r)? as usize;
        let n_val = read_u64(r)? as usize;
        let n_test = read_u64(r)? as usize;
        let config = DataConfig {
            n_train,
            n_val,
            n_test,
            base_seed,
            img_size,
            sigma,
        };
        if config.hash() != hash {
            return Err(Error::Data("dataset header hash does not match its fields".into()));
        }
        let mut read_split = |n: usize| -> Result<Vec<SynthSample>> {
            (0..n)
                .map(|_| {
                    let seed = read_u64(r)?;
                    let flat = (0..POSE_DIM).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
                    let px = (0..img_size * img_size).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
                    Ok(SynthSample {
                        image: Matrix::from_vec(img_size, img_size, px)?,
                        pose: HandPose2D::from_flat(&flat)?,
                        seed,
                    })
                })
                .collect()
        };
        let train = read_split(n_train)?;
        let val = read_split(n_val)?;
        let test = read_split(n_test)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Data("trailing bytes after dataset records".into()));
        }
        Ok(Self { config, train, val, test })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?);
        Self::read_from(&mut r)
    }

    /// Loads a cache and checks that it was generated from `expected`.
    pub fn load_checked(path: &Path, expected: &DataConfig) -> Result<Self> {
        let ds = Self::load(path)?;
        if ds.config.hash() != expected.hash() {
            return Err(Error::Data(format!(
                "dataset {} was generated with a different config (hash {:016x}, expected {:016x})",
                path.display(),
                ds.config.hash(),
                expected.hash()
            )));
        }
        Ok(ds)
    }
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Data("dataset cache is truncated".into())
    } else {
        Error::Io(e)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

/// Mean absolute difference between two equally sized images.
pub fn mean_abs_diff(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mean_abs_diff", a.shape(), b.shape()));
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
    Ok(s / a.len().max(1) as f64)
}
