//! Randomized check of the group laws of flips and rotations.
//!
//! Every law is evaluated through an injectable composition function so the
//! suite itself can be mutation-tested.

use std::f64::consts::TAU;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::group::{angle_distance, Transform, TransformKind, ANGLE_TOL};
use crate::rng::{derive_seed, SeedTag};

pub type ComposeFn = fn(&Transform, &Transform) -> Transform;

pub fn correct_compose(f: &Transform, g: &Transform) -> Transform {
    f.compose(g)
}

/// Deliberately wrong composition (flip-after-rotation adds the angles)
/// used to show the suite catches sign errors.
pub fn sign_flipped_compose(f: &Transform, g: &Transform) -> Transform {
    match (f.kind(), g.kind()) {
        (TransformKind::FlipRot, TransformKind::Rot) => Transform::flip_rot(f.angle() + g.angle()),
        _ => f.compose(g),
    }
}

/// Distance between two transforms: the larger of their 2×2 matrix
/// difference and, for equal kinds, the wrapped angle difference.
pub fn deviation(a: &Transform, b: &Transform) -> f64 {
    let (ma, mb) = (a.linear_map(), b.linear_map());
    let mut d: f64 = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            d = d.max((ma[i][j] - mb[i][j]).abs());
        }
    }
    if a.kind() == b.kind() {
        d.max(angle_distance(a.angle(), b.angle()))
    } else {
        d.max(1.0)
    }
}

fn mat_mul(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

fn mat_dev(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> f64 {
    let mut d: f64 = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            d = d.max((a[i][j] - b[i][j]).abs());
        }
    }
    d
}

/// First-then-second composition of the three generator families, worked
/// out by hand from `R_a H = H R_{−a}`. Angles: `a`, `b` for the first
/// operand's `R`/`HR`, `c`, `d` for the second's.
pub fn table_cell(first: usize, second: usize, a: f64, b: f64, c: f64, d: f64) -> Transform {
    match (first, second) {
        (0, 0) => Transform::IDENTITY,
        (0, 1) => Transform::flip_rot(c),
        (0, 2) => Transform::rot(d),
        (1, 0) => Transform::flip_rot(-a),
        (1, 1) => Transform::rot(a + c),
        (1, 2) => Transform::flip_rot(d - a),
        (2, 0) => Transform::rot(-b),
        (2, 1) => Transform::flip_rot(b + c),
        (2, 2) => Transform::rot(d - b),
        _ => panic!("generator index out of range"),
    }
}

fn generator(i: usize, rot: f64, fliprot: f64) -> Transform {
    match i {
        0 => Transform::FLIP,
        1 => Transform::rot(rot),
        _ => Transform::flip_rot(fliprot),
    }
}

const GEN_NAMES: [&str; 3] = ["H", "R", "HR"];

#[derive(Debug, Clone, PartialEq)]
pub struct LawResult {
    pub law: String,
    pub max_deviation: f64,
    /// Operands of the worst case.
    pub worst: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub trials: usize,
    pub laws: Vec<LawResult>,
}

impl VerifyReport {
    pub fn failures(&self, tol: f64) -> Vec<&LawResult> {
        self.laws.iter().filter(|l| !(l.max_deviation < tol)).collect()
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.failures(tol).is_empty()
    }

    pub fn max_deviation(&self) -> f64 {
        self.laws.iter().map(|l| l.max_deviation).fold(0.0, f64::max)
    }

    pub fn render(&self, tol: f64) -> String {
        let mut s = format!("group verification, {} trials, tolerance {tol:e}\n", self.trials);
        for l in &self.laws {
            let status = if l.max_deviation < tol { "ok" } else { "FAIL" };
            let _ = writeln!(s, "{:<28} max deviation {:.3e}  {status}", l.law, l.max_deviation);
        }
        for l in self.failures(tol) {
            let _ = writeln!(s, "violation: {} at {} (deviation {:.3e})", l.law, l.worst, l.max_deviation);
        }
        s
    }
}

struct Tracker {
    laws: Vec<LawResult>,
}

impl Tracker {
    fn record(&mut self, law: &str, dev: f64, operands: impl FnOnce() -> String) {
        let e = match self.laws.iter_mut().position(|l| l.law == law) {
            Some(i) => &mut self.laws[i],
            None => {
                self.laws.push(LawResult {
                    law: law.to_string(),
                    max_deviation: 0.0,
                    worst: String::new(),
                });
                self.laws.last_mut().unwrap()
            }
        };
        if dev > e.max_deviation || (dev.is_nan() && !e.max_deviation.is_nan()) || e.worst.is_empty() {
            if dev > e.max_deviation || dev.is_nan() {
                e.max_deviation = dev;
            }
            e.worst = operands();
        }
    }
}

fn random_transform(rng: &mut ChaCha8Rng) -> Transform {
    let angle = rng.gen_range(0.0..TAU);
    if rng.gen_bool(0.5) {
        Transform::rot(angle)
    } else {
        Transform::flip_rot(angle)
    }
}

/// Runs every law `trials` times with operands drawn from `seed`.
pub fn verify_group(trials: usize, seed: u64, compose: ComposeFn) -> Result<VerifyReport> {
    if trials == 0 {
        return Err(Error::Config("trials must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SeedTag::Verify, 0));
    let mut t = Tracker { laws: Vec::new() };
    let e = Transform::IDENTITY;
    let h = Transform::FLIP;
    for _ in 0..trials {
        let (f, g, k) = (random_transform(&mut rng), random_transform(&mut rng), random_transform(&mut rng));
        let ops3 = || format!("f={f}, g={g}, h={k}");
        let ops2 = || format!("f={f}, g={g}");
        let ops1 = || format!("f={f}");

        let fg = compose(&f, &g);
        t.record("closure (matrix product)", mat_dev(fg.linear_map(), mat_mul(f.linear_map(), g.linear_map())), ops2);
        let canonical = fg.angle() >= 0.0 && fg.angle() < TAU;
        t.record("closure (canonical form)", if canonical { 0.0 } else { 1.0 }, ops2);
        t.record(
            "associativity",
            deviation(&compose(&compose(&f, &g), &k), &compose(&f, &compose(&g, &k))),
            ops3,
        );
        t.record("left identity", deviation(&compose(&e, &f), &f), ops1);
        t.record("right identity", deviation(&compose(&f, &e), &f), ops1);
        t.record("left inverse", deviation(&compose(&f.inverse(), &f), &e), ops1);
        t.record("right inverse", deviation(&compose(&f, &f.inverse()), &e), ops1);

        let a = rng.gen_range(0.0..TAU);
        let b = rng.gen_range(0.0..TAU);
        let c = rng.gen_range(0.0..TAU);
        let d = rng.gen_range(0.0..TAU);
        t.record(
            "anti-commutation R_a H = H R_-a",
            deviation(&compose(&Transform::rot(a), &h), &compose(&h, &Transform::rot(-a))),
            || format!("a={a}"),
        );
        t.record("flip involution H H = I", deviation(&compose(&h, &h), &e), String::new);
        t.record(
            "rotation additivity",
            deviation(&compose(&Transform::rot(a), &Transform::rot(b)), &Transform::rot(a + b)),
            || format!("a={a}, b={b}"),
        );
        for first in 0..3 {
            for second in 0..3 {
                let x = generator(first, a, b);
                let y = generator(second, c, d);
                let got = compose(&y, &x);
                let want = table_cell(first, second, a, b, c, d);
                let law = format!("table {} then {}", GEN_NAMES[first], GEN_NAMES[second]);
                t.record(&law, deviation(&got, &want), || format!("first={x}, second={y}"));
            }
        }
    }
    Ok(VerifyReport { trials, laws: t.laws })
}

pub const VERIFY_TOL: f64 = ANGLE_TOL;
