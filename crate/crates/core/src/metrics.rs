//! Pose error metrics: root-aligned MPJPE and Procrustes-aligned PA-MPJPE.

use serde::{Deserialize, Serialize};

use crate::data::Point;
use crate::error::{Error, Result};

/// Root-point centered sets whose RMS spread is below this are degenerate.
pub const DEGENERATE_TOL: f64 = 1e-12;

fn check_counts(pred: &[Point], gt: &[Point]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Invalid(format!(
            "joint count mismatch: pred has {}, gt has {}",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Invalid("pose has no joints".into()));
    }
    Ok(())
}

fn mean_distance(a: &[Point], b: &[Point]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(p, q)| (p.0 - q.0).hypot(p.1 - q.1)).sum();
    s / a.len() as f64
}

/// Mean joint distance after translating `pred` so its root (joint 0)
/// coincides with the root of `gt`.
pub fn mpjpe(pred: &[Point], gt: &[Point]) -> Result<f64> {
    check_counts(pred, gt)?;
    let s: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, q)| {
            // compare offsets from the root so the shift cancels exactly
            let (px, py) = (p.0 - pred[0].0, p.1 - pred[0].1);
            let (qx, qy) = (q.0 - gt[0].0, q.1 - gt[0].1);
            (px - qx).hypot(py - qy)
        })
        .sum();
    Ok(s / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlignOptions {
    /// Permit an improper orthogonal factor (a mirror). On by default.
    pub allow_reflection: bool,
}

impl Default for AlignOptions {
    fn default() -> Self {
        Self { allow_reflection: true }
    }
}

/// Result of a similarity fit `p ↦ scale·Ω·(p − mean_pred) + mean_gt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    /// Row-major 2×2 orthogonal factor.
    pub omega: [[f64; 2]; 2],
    pub mean_pred: Point,
    pub mean_gt: Point,
}

impl Similarity {
    pub fn apply(&self, p: Point) -> Point {
        let (x, y) = (p.0 - self.mean_pred.0, p.1 - self.mean_pred.1);
        let o = &self.omega;
        (
            self.scale * (o[0][0] * x + o[0][1] * y) + self.mean_gt.0,
            self.scale * (o[1][0] * x + o[1][1] * y) + self.mean_gt.1,
        )
    }

    pub fn is_reflection(&self) -> bool {
        let o = &self.omega;
        o[0][0] * o[1][1] - o[0][1] * o[1][0] < 0.0
    }
}

fn centroid(pts: &[Point]) -> Point {
    let n = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    (sx / n, sy / n)
}

/// Least-squares similarity from `pred` onto `gt`.
///
/// Writes the cross-covariance `C = Σ yᵢxᵢᵀ` as a rotation-like part plus a
/// reflection-like part; their magnitudes `r` and `m` give the singular
/// values `(r + m)/2` and `|r − m|/2`. The best rotation attains trace `r`,
/// the best reflection attains `m`, so the optimal orthogonal factor and
/// its trace of singular values follow without an iterative SVD.
pub fn fit_similarity(pred: &[Point], gt: &[Point], opts: AlignOptions) -> Result<Similarity> {
    check_counts(pred, gt)?;
    let mp = centroid(pred);
    let mg = centroid(gt);
    let n = pred.len() as f64;
    let (mut a, mut b, mut c, mut d, mut sxx, mut syy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for (p, q) in pred.iter().zip(gt) {
        let (x0, x1) = (p.0 - mp.0, p.1 - mp.1);
        let (y0, y1) = (q.0 - mg.0, q.1 - mg.1);
        a += y0 * x0;
        b += y0 * x1;
        c += y1 * x0;
        d += y1 * x1;
        sxx += x0 * x0 + x1 * x1;
        syy += y0 * y0 + y1 * y1;
    }
    if (sxx / n).sqrt() < DEGENERATE_TOL {
        return Err(Error::Degenerate("predicted joints all coincide".into()));
    }
    if (syy / n).sqrt() < DEGENERATE_TOL {
        return Err(Error::Degenerate("ground-truth joints all coincide".into()));
    }
    let rot = (a + d).hypot(c - b);
    let refl = (a - d).hypot(b + c);
    let (omega, trace) = if opts.allow_reflection && refl > rot {
        let phi = (b + c).atan2(a - d);
        let (s, co) = phi.sin_cos();
        ([[co, s], [s, -co]], refl)
    } else {
        let th = (c - b).atan2(a + d);
        let (s, co) = th.sin_cos();
        ([[co, -s], [s, co]], rot)
    };
    Ok(Similarity {
        scale: trace / sxx,
        omega,
        mean_pred: mp,
        mean_gt: mg,
    })
}

pub fn procrustes_align(pred: &[Point], gt: &[Point], opts: AlignOptions) -> Result<Vec<Point>> {
    let sim = fit_similarity(pred, gt, opts)?;
    Ok(pred.iter().map(|&p| sim.apply(p)).collect())
}

/// Mean joint distance after similarity Procrustes alignment (reflections
/// allowed).
pub fn pa_mpjpe(pred: &[Point], gt: &[Point]) -> Result<f64> {
    pa_mpjpe_with(pred, gt, AlignOptions::default())
}

pub fn pa_mpjpe_with(pred: &[Point], gt: &[Point], opts: AlignOptions) -> Result<f64> {
    let aligned = procrustes_align(pred, gt, opts)?;
    Ok(mean_distance(&aligned, gt))
}

/// Averages both metrics over paired prediction and ground-truth sets.
pub fn mean_pose_errors(preds: &[Vec<Point>], gts: &[&[Point]]) -> Result<(f64, f64)> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::Invalid(format!(
            "need equal, nonzero numbers of predictions and targets, got {} and {}",
            preds.len(),
            gts.len()
        )));
    }
    let (mut m, mut pa) = (0.0, 0.0);
    for (p, g) in preds.iter().zip(gts) {
        m += mpjpe(p, g)?;
        pa += pa_mpjpe(p, g)?;
    }
    let n = preds.len() as f64;
    Ok((m / n, pa / n))
}

/// One row of the metrics CSV. Columns that do not apply stay empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub mode: String,
    pub seed: u64,
    pub epoch: usize,
    pub split: String,
    pub l_classic: Option<f64>,
    pub l_ord: Option<f64>,
    pub l_sec: Option<f64>,
    pub l_ti: Option<f64>,
    pub mpjpe: Option<f64>,
    pub pa_mpjpe: Option<f64>,
}

pub const CSV_COLUMNS: [&str; 11] = [
    "run_id", "mode", "seed", "epoch", "split", "l_classic", "l_ord", "l_sec", "l_ti", "mpjpe", "pa_mpjpe",
];

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng) -> Vec<Point> {
        (0..21).map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()
    }

    fn similar(p: &[Point], s: f64, th: f64, t: Point, mirror: bool) -> Vec<Point> {
        p.iter()
            .map(|&(x, y)| {
                let x = if mirror { -x } else { x };
                let (sn, c) = th.sin_cos();
                (s * (c * x - sn * y) + t.0, s * (sn * x + c * y) + t.1)
            })
            .collect()
    }

    #[test]
    fn mpjpe_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = random_pose(&mut rng);
        assert_eq!(mpjpe(&gt, &gt).unwrap(), 0.0);
        let shifted: Vec<Point> = gt.iter().map(|&(x, y)| (x + 0.25, y - 0.5)).collect();
        assert!(mpjpe(&shifted, &gt).unwrap() < 1e-12);
        // quarter-turn about the root: distance of each joint is √2·|offset|
        let r = gt[0];
        let rotated: Vec<Point> = gt.iter().map(|&(x, y)| (r.0 - (y - r.1), r.1 + (x - r.0))).collect();
        let brute: f64 = gt
            .iter()
            .zip(&rotated)
            .map(|(a, b)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt())
            .sum::<f64>()
            / 21.0;
        let closed: f64 = gt.iter().map(|&(x, y)| 2f64.sqrt() * (x - r.0).hypot(y - r.1)).sum::<f64>() / 21.0;
        let m = mpjpe(&rotated, &gt).unwrap();
        assert!((m - brute).abs() < 1e-12);
        assert!((m - closed).abs() < 1e-12);
        assert!(mpjpe(&gt[..20], &gt).is_err());
    }

    #[test]
    fn procrustes_recovers_similarities() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for i in 0..200 {
            let pred = random_pose(&mut rng);
            let s = rng.gen_range(0.5..2.0);
            let th = rng.gen_range(0.0..std::f64::consts::TAU);
            let t = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let mirror = i % 2 == 1;
            let gt = similar(&pred, s, th, t, mirror);
            let sim = fit_similarity(&pred, &gt, AlignOptions::default()).unwrap();
            assert!((sim.scale - s).abs() < 1e-10);
            assert_eq!(sim.is_reflection(), mirror);
            let aligned = procrustes_align(&pred, &gt, AlignOptions::default()).unwrap();
            for (a, g) in aligned.iter().zip(&gt) {
                assert!((a.0 - g.0).abs() < 1e-10 && (a.1 - g.1).abs() < 1e-10);
            }
            assert!(pa_mpjpe(&pred, &gt).unwrap() < 1e-8);
        }
    }

    #[test]
    fn proper_rotation_flag_refuses_mirrors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pred = random_pose(&mut rng);
        let gt = similar(&pred, 1.0, 0.3, (0.0, 0.0), true);
        let proper = AlignOptions { allow_reflection: false };
        let sim = fit_similarity(&pred, &gt, proper).unwrap();
        assert!(!sim.is_reflection());
        assert!(pa_mpjpe_with(&pred, &gt, proper).unwrap() > 1e-3);
        assert!(pa_mpjpe(&pred, &gt).unwrap() < 1e-8);
    }

    #[test]
    fn identity_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_pose(&mut rng);
        let sim = fit_similarity(&p, &p, AlignOptions::default()).unwrap();
        assert!((sim.scale - 1.0).abs() < 1e-12);
        assert!((sim.omega[0][0] - 1.0).abs() < 1e-12 && sim.omega[0][1].abs() < 1e-12);
        assert!(pa_mpjpe(&p, &p).unwrap() < 1e-12);
    }

    #[test]
    fn degenerate_sets_are_rejected() {
        let p = vec![(0.3, 0.3); 21];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random_pose(&mut rng);
        assert!(matches!(fit_similarity(&p, &q, AlignOptions::default()), Err(Error::Degenerate(_))));
        assert!(matches!(fit_similarity(&q, &p, AlignOptions::default()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn pa_never_exceeds_mpjpe_on_1000_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..1000 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            assert!(pa_mpjpe(&a, &b).unwrap() <= mpjpe(&a, &b).unwrap() + 1e-12);
        }
    }

    #[test]
    fn pa_can_exceed_mpjpe_on_near_exact_predictions() {
        // the fit minimizes squared error, so one displaced joint gets
        // spread over all of them and the mean distance can grow
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gt = random_pose(&mut rng);
        let mut pred = gt.clone();
        pred[20].0 += 0.1;
        let m = mpjpe(&pred, &gt).unwrap();
        let pa = pa_mpjpe(&pred, &gt).unwrap();
        assert!(pa > m, "{pa} <= {m}");
    }

    #[test]
    fn aligned_residual_not_worse_than_identity() {
        // squared-error optimality, compared against the centered identity fit
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let al = procrustes_align(&a, &b, AlignOptions::default()).unwrap();
            let ma = centroid(&a);
            let mb = centroid(&b);
            let sq = |x: &[Point]| -> f64 { x.iter().zip(&b).map(|(p, q)| (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sum() };
            let shifted: Vec<Point> = a.iter().map(|p| (p.0 - ma.0 + mb.0, p.1 - ma.1 + mb.1)).collect();
            assert!(sq(&al) <= sq(&shifted) + 1e-12);
            assert!(sq(&al) <= sq(&a) + 1e-12);
        }
    }

    proptest! {
        #[test]
        fn pa_is_similarity_invariant(seed in 0u64..10_000, s in 0.5f64..2.0, th in 0.0f64..std::f64::consts::TAU,
                                      tx in -1.0f64..1.0, ty in -1.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let moved = similar(&a, s, th, (tx, ty), false);
            let x = pa_mpjpe(&a, &b).unwrap();
            let y = pa_mpjpe(&moved, &b).unwrap();
            prop_assert!((x - y).abs() < 1e-9);
        }

        #[test]
        fn mpjpe_is_translation_invariant(seed in 0u64..10_000, tx in -1.0f64..1.0, ty in -1.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let moved: Vec<Point> = a.iter().map(|p| (p.0 + tx, p.1 + ty)).collect();
            prop_assert!((mpjpe(&a, &b).unwrap() - mpjpe(&moved, &b).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn metrics_vanish_only_on_coincidence(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            prop_assert!(mpjpe(&a, &b).unwrap() > 0.0);
            prop_assert!(pa_mpjpe(&a, &b).unwrap() > 0.0);
            prop_assert_eq!(mpjpe(&a, &a).unwrap(), 0.0);
        }
    }

    #[test]
    fn csv_row_leaves_missing_cells_empty() {
        let row = MetricsRow {
            run_id: "r".into(),
            mode: "ti".into(),
            seed: 1,
            epoch: 0,
            split: "val".into(),
            l_classic: Some(0.5),
            l_ord: None,
            l_sec: None,
            l_ti: Some(0.5),
            mpjpe: None,
            pa_mpjpe: None,
        };
        let mut w = csv::Writer::from_writer(Vec::new());
        w.serialize(&row).unwrap();
        let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_COLUMNS.join(","));
        assert_eq!(lines.next().unwrap(), "r,ti,1,0,val,0.5,,,0.5,,");
    }
}
