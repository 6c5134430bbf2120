//! The image/pose transformation group generated by a horizontal flip and
//! rotations about the image center.
//!
//! Every element is stored in one of two canonical forms:
//!
//! * `Rot(a)`: counterclockwise rotation by `a`;
//! * `FlipRot(a)`: horizontal flip followed by rotation by `a`. The plain
//!   flip is `FlipRot(0)`.
//!
//! Angles are kept in `[0, 2π)`. [`Transform::compose`] follows ordinary
//! function composition: `f.compose(g)` applies `g` first.

use std::f64::consts::{FRAC_PI_2, TAU};
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Default tolerance for angle comparisons, in radians.
pub const ANGLE_TOL: f64 = 1e-9;

/// Reduces `a` modulo 2π into `[0, 2π)`.
pub fn normalize_angle(a: f64) -> Result<f64> {
    if !a.is_finite() {
        return Err(Error::NonFinite(format!("angle {a}")));
    }
    Ok(wrap(a))
}

fn wrap(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Circular distance between two angles.
pub fn angle_distance(a: f64, b: f64) -> f64 {
    let d = wrap(a - b);
    d.min(TAU - d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TransformKind {
    Rot,
    FlipRot,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    kind: TransformKind,
    angle: f64,
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            TransformKind::Rot => write!(f, "R({:.6})", self.angle),
            TransformKind::FlipRot if self.angle == 0.0 => write!(f, "H"),
            TransformKind::FlipRot => write!(f, "HR({:.6})", self.angle),
        }
    }
}

impl Transform {
    /// `R_0`.
    pub const IDENTITY: Transform = Transform {
        kind: TransformKind::Rot,
        angle: 0.0,
    };

    /// `H`, stored as `HR_0`.
    pub const FLIP: Transform = Transform {
        kind: TransformKind::FlipRot,
        angle: 0.0,
    };

    /// Panics on a non-finite angle; use [`Transform::try_new`] otherwise.
    pub fn new(kind: TransformKind, angle: f64) -> Self {
        Self::try_new(kind, angle).expect("finite angle")
    }

    pub fn try_new(kind: TransformKind, angle: f64) -> Result<Self> {
        Ok(Self {
            kind,
            angle: normalize_angle(angle)?,
        })
    }

    pub fn rot(angle: f64) -> Self {
        Self::new(TransformKind::Rot, angle)
    }

    pub fn flip_rot(angle: f64) -> Self {
        Self::new(TransformKind::FlipRot, angle)
    }

    pub fn kind(&self) -> TransformKind {
        self.kind
    }

    pub fn angle(&self) -> f64 {
        self.angle
    }

    pub fn is_flip(&self) -> bool {
        self.kind == TransformKind::FlipRot
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Transform) -> Transform {
        use TransformKind::{FlipRot, Rot};
        let (a, b) = (self.angle, other.angle);
        // With F the flip, R_a F R_b = R_{a-b} F and F F = I.
        match (self.kind, other.kind) {
            (Rot, Rot) => Transform::rot(a + b),
            (Rot, FlipRot) => Transform::flip_rot(a + b),
            (FlipRot, Rot) => Transform::flip_rot(a - b),
            (FlipRot, FlipRot) => Transform::rot(a - b),
        }
    }

    pub fn inverse(&self) -> Transform {
        match self.kind {
            TransformKind::Rot => Transform::rot(-self.angle),
            // R_a F is a reflection, hence an involution
            TransformKind::FlipRot => *self,
        }
    }

    /// 2×2 linear map acting on column vectors `(x, y)`.
    pub fn linear_map(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.angle.sin_cos();
        match self.kind {
            TransformKind::Rot => [[c, -s], [s, c]],
            TransformKind::FlipRot => [[-c, -s], [-s, c]],
        }
    }

    pub fn apply_point(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        match self.kind {
            TransformKind::Rot => (x * c - y * s, x * s + y * c),
            TransformKind::FlipRot => (-x * c - y * s, -x * s + y * c),
        }
    }

    pub fn apply_points(&self, points: &[(f64, f64)]) -> Vec<(f64, f64)> {
        points.iter().map(|&p| self.apply_point(p)).collect()
    }

    /// Same kind and angles within `tol` modulo 2π.
    pub fn approx_eq(&self, other: &Transform, tol: f64) -> bool {
        self.kind == other.kind && angle_distance(self.angle, other.angle) < tol
    }

    /// Number of quarter turns when the rotation part is a multiple of π/2.
    pub fn quarter_turns(&self) -> Option<u8> {
        let k = (self.angle / FRAC_PI_2).round();
        if (self.angle - k * FRAC_PI_2).abs() < ANGLE_TOL {
            Some((k as i64).rem_euclid(4) as u8)
        } else {
            None
        }
    }

    /// Resamples a square image under this transform.
    ///
    /// Output pixel `p` takes the input value at `self⁻¹(p)` about the image
    /// center, with rows pointing down and `y` pointing up. Flips and
    /// quarter-turn rotations are exact pixel permutations; other angles use
    /// bilinear interpolation with `fill` outside the grid.
    pub fn apply_image(&self, img: &Matrix, fill: f64) -> Result<Matrix> {
        if img.rows() != img.cols() {
            return Err(Error::Invalid(format!(
                "image must be square, got {}x{}",
                img.rows(),
                img.cols()
            )));
        }
        let n = img.rows();
        let inv = self.inverse();
        if let Some(k) = inv.quarter_turns() {
            return Ok(permute(img, inv.kind, k));
        }
        let [[a, b], [c, d]] = inv.linear_map();
        let center = (n as f64 - 1.0) / 2.0;
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            let y = center - i as f64;
            for j in 0..n {
                let x = j as f64 - center;
                let sx = a * x + b * y;
                let sy = c * x + d * y;
                let col = sx + center;
                let row = center - sy;
                out.set(i, j, bilinear(img, row, col, fill));
            }
        }
        Ok(out)
    }
}

/// Exact pixel permutation for `kind` with a rotation of `k` quarter turns.
fn permute(img: &Matrix, kind: TransformKind, k: u8) -> Matrix {
    let n = img.rows() as i64;
    let m = n - 1;
    // doubled centered coordinates keep everything integral
    let rot = |x: i64, y: i64| -> (i64, i64) {
        match k {
            0 => (x, y),
            1 => (-y, x),
            2 => (-x, -y),
            _ => (y, -x),
        }
    };
    let mut out = Matrix::zeros(img.rows(), img.cols());
    for i in 0..n {
        for j in 0..n {
            let x = 2 * j - m;
            let y = m - 2 * i;
            let (fx, fy) = match kind {
                TransformKind::Rot => (x, y),
                TransformKind::FlipRot => (-x, y),
            };
            let (sx, sy) = rot(fx, fy);
            let sj = (sx + m) / 2;
            let si = (m - sy) / 2;
            out.set(i as usize, j as usize, img.get(si as usize, sj as usize));
        }
    }
    out
}

fn bilinear(img: &Matrix, row: f64, col: f64, fill: f64) -> f64 {
    let n = img.rows() as i64;
    let r0 = row.floor();
    let c0 = col.floor();
    let fr = row - r0;
    let fc = col - c0;
    let (r0, c0) = (r0 as i64, c0 as i64);
    let tap = |r: i64, c: i64| -> f64 {
        if r < 0 || c < 0 || r >= n || c >= n {
            fill
        } else {
            img.get(r as usize, c as usize)
        }
    };
    let top = tap(r0, c0) * (1.0 - fc) + tap(r0, c0 + 1) * fc;
    let bottom = tap(r0 + 1, c0) * (1.0 - fc) + tap(r0 + 1, c0 + 1) * fc;
    top * (1.0 - fr) + bottom * fr
}

/// Free-function form of [`Transform::compose`].
pub fn compose(f: &Transform, g: &Transform) -> Transform {
    f.compose(g)
}

pub fn transform_equal(a: &Transform, b: &Transform, tol: f64) -> bool {
    a.approx_eq(b, tol)
}
