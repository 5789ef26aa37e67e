//! Pose and surface error metrics. Inputs are meters (3D) or pixels (2D);
//! 3D errors are reported in millimeters.

use std::collections::HashMap;

use nalgebra::{Matrix3, Vector3};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Thresholds averaged by [`avg_pck`], as fractions of the bounding-box side.
pub const PCK_THRESHOLDS: [f64; 5] = [0.01, 0.025, 0.05, 0.075, 0.1];

const MM: f64 = 1000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Align {
    None,
    /// Subtract the point at this index (pelvis, or wrist for hands).
    Root(usize),
}

fn check_pair(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Dimension {
            what: "point count",
            expected: gt.len(),
            got: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::Degenerate("no points".into()));
    }
    Ok(())
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Mean per-joint position error in mm.
pub fn mpjpe(pred: &[[f64; 3]], gt: &[[f64; 3]], align: Align) -> Result<f64> {
    check_pair(pred, gt)?;
    let (rp, rg) = match align {
        Align::None => ([0.0; 3], [0.0; 3]),
        Align::Root(i) => {
            if i >= gt.len() {
                return Err(Error::MissingKeypoint(format!("root index {i}")));
            }
            (pred[i], gt[i])
        }
    };
    let sum: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            dist(
                [p[0] - rp[0], p[1] - rp[1], p[2] - rp[2]],
                [g[0] - rg[0], g[1] - rg[1], g[2] - rg[2]],
            )
        })
        .sum();
    Ok(MM * sum / pred.len() as f64)
}

/// `x ↦ s R x + t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Similarity {
    pub rotation: [[f64; 3]; 3],
    pub scale: f64,
    pub translation: [f64; 3],
}

impl Similarity {
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let mut out = [0.0; 3];
        for i in 0..3 {
            out[i] = self.scale * (r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2]) + self.translation[i];
        }
        out
    }

    pub fn apply_all(&self, pts: &[[f64; 3]]) -> Vec<[f64; 3]> {
        pts.iter().map(|p| self.apply(*p)).collect()
    }
}

fn centroid(pts: &[[f64; 3]]) -> Vector3<f64> {
    pts.iter().fold(Vector3::zeros(), |acc, p| acc + Vector3::from(*p)) / pts.len() as f64
}

/// Least-squares similarity taking `pred` onto `gt` (Umeyama), with the
/// reflection removed so the rotation is proper.
pub fn procrustes_align(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<Similarity> {
    check_pair(pred, gt)?;
    if pred.len() < 3 {
        return Err(Error::Degenerate("need at least 3 points".into()));
    }
    let mp = centroid(pred);
    let mg = centroid(gt);
    let mut cov = Matrix3::zeros();
    let mut pp = Matrix3::zeros();
    let mut var_p = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let x = Vector3::from(*p) - mp;
        let y = Vector3::from(*g) - mg;
        cov += y * x.transpose();
        pp += x * x.transpose();
        var_p += x.norm_squared();
    }
    let spread = pp.symmetric_eigenvalues();
    let mut ev: Vec<f64> = spread.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= 1e-12 * ev[0] {
        return Err(Error::Degenerate("points are coincident or collinear".into()));
    }
    let svd = cov.svd(true, true);
    let u = svd.u.expect("requested");
    let vt = svd.v_t.expect("requested");
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    let scale = (Matrix3::from_diagonal(&svd.singular_values) * d).trace() / var_p;
    let t = mg - r * mp * scale;
    let mut rotation = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            rotation[i][j] = r[(i, j)];
        }
    }
    Ok(Similarity {
        rotation,
        scale,
        translation: [t[0], t[1], t[2]],
    })
}

/// MPJPE after Procrustes alignment, in mm.
pub fn pa_mpjpe(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<f64> {
    let s = procrustes_align(pred, gt)?;
    mpjpe(&s.apply_all(pred), gt, Align::None)
}

/// Mean per-vertex error after subtracting each cloud's root joint, in mm.
pub fn pve(pred: &[[f64; 3]], gt: &[[f64; 3]], pred_root: [f64; 3], gt_root: [f64; 3]) -> Result<f64> {
    check_pair(pred, gt)?;
    let shift = |pts: &[[f64; 3]], r: [f64; 3]| -> Vec<[f64; 3]> {
        pts.iter().map(|p| [p[0] - r[0], p[1] - r[1], p[2] - r[2]]).collect()
    };
    mpjpe(&shift(pred, pred_root), &shift(gt, gt_root), Align::None)
}

/// Side of the tight box around the visible ground-truth keypoints.
pub fn bbox_side(gt: &[[f64; 2]], visible: &[bool]) -> Option<f64> {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    let mut any = false;
    for (p, _) in gt.iter().zip(visible).filter(|(_, v)| **v) {
        any = true;
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    any.then(|| (hi[0] - lo[0]).max(hi[1] - lo[1]))
}

/// Fraction of visible keypoints with pixel error strictly below
/// `alpha · bbox_side`. `None` when no keypoint is visible.
pub fn pck(pred: &[[f64; 2]], gt: &[[f64; 2]], visible: &[bool], bbox_side: f64, alpha: f64) -> Result<Option<f64>> {
    if pred.len() != gt.len() || visible.len() != gt.len() {
        return Err(Error::Dimension {
            what: "2D keypoint count",
            expected: gt.len(),
            got: pred.len().min(visible.len()),
        });
    }
    if !(alpha > 0.0) || !(bbox_side > 0.0) {
        return Err(Error::InvalidParam(format!(
            "PCK needs alpha > 0 and a positive box side, got {alpha} and {bbox_side}"
        )));
    }
    let thr = alpha * bbox_side;
    let mut n = 0usize;
    let mut hit = 0usize;
    for ((p, g), v) in pred.iter().zip(gt).zip(visible) {
        if !*v {
            continue;
        }
        n += 1;
        if ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt() < thr {
            hit += 1;
        }
    }
    Ok((n > 0).then(|| hit as f64 / n as f64))
}

/// Mean PCK over [`PCK_THRESHOLDS`].
pub fn avg_pck(pred: &[[f64; 2]], gt: &[[f64; 2]], visible: &[bool], bbox_side: f64) -> Result<Option<f64>> {
    let mut acc = 0.0;
    for a in PCK_THRESHOLDS {
        match pck(pred, gt, visible, bbox_side, a)? {
            Some(v) => acc += v,
            None => return Ok(None),
        }
    }
    Ok(Some(acc / PCK_THRESHOLDS.len() as f64))
}

/// Uniform hash grid for fixed-radius nearest-neighbor queries.
struct Grid<'a> {
    cell: f64,
    pts: &'a [[f64; 3]],
    map: HashMap<[i64; 3], Vec<usize>>,
}

impl<'a> Grid<'a> {
    fn new(pts: &'a [[f64; 3]], cell: f64) -> Self {
        let mut map: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in pts.iter().enumerate() {
            map.entry(Self::key(p, cell)).or_default().push(i);
        }
        Self { cell, pts, map }
    }

    fn key(p: &[f64; 3], cell: f64) -> [i64; 3] {
        [
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        ]
    }

    /// True when some point lies strictly within `d` (≤ cell) of `q`.
    fn any_within(&self, q: &[f64; 3], d: f64) -> bool {
        let k = Self::key(q, self.cell);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(ids) = self.map.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        if ids.iter().any(|&i| dist(self.pts[i], *q) < d) {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }
}

/// Precision, recall and F-score at distance `d` meters between two clouds,
/// without correspondence.
pub fn fscore_unaligned(pred: &[[f64; 3]], gt: &[[f64; 3]], d: f64) -> Result<FScore> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::Degenerate("F-score needs non-empty clouds".into()));
    }
    if !(d > 0.0) {
        return Err(Error::InvalidParam(format!("F-score distance must be > 0, got {d}")));
    }
    let gg = Grid::new(gt, d);
    let pg = Grid::new(pred, d);
    let precision = pred.iter().filter(|p| gg.any_within(p, d)).count() as f64 / pred.len() as f64;
    let recall = gt.iter().filter(|g| pg.any_within(g, d)).count() as f64 / gt.len() as f64;
    let f = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(FScore { precision, recall, f })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct FScore {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

/// F-score at `d` meters after Procrustes-aligning `pred` onto `gt` (the
/// clouds must correspond point by point for the alignment).
pub fn fscore(pred: &[[f64; 3]], gt: &[[f64; 3]], d: f64) -> Result<FScore> {
    let s = procrustes_align(pred, gt)?;
    fscore_unaligned(&s.apply_all(pred), gt, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::rodrigues;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect()
    }

    fn random_similarity(rng: &mut ChaCha8Rng) -> Similarity {
        let w = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        Similarity {
            rotation: rodrigues(w),
            scale: rng.random_range(0.2..3.0),
            translation: [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
        }
    }

    fn sse(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
        a.iter().zip(b).map(|(p, q)| dist(*p, *q).powi(2)).sum()
    }

    #[test]
    fn mpjpe_matches_loop_and_root_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = cloud(&mut rng, 24);
        let b = cloud(&mut rng, 24);
        let mut oracle = 0.0;
        for i in 0..24 {
            let mut s = 0.0;
            for k in 0..3 {
                s += (a[i][k] - b[i][k]) * (a[i][k] - b[i][k]);
            }
            oracle += s.sqrt();
        }
        oracle *= 1000.0 / 24.0;
        assert!((mpjpe(&a, &b, Align::None).unwrap() - oracle).abs() < 1e-9);
        let shifted: Vec<_> = b.iter().map(|p| [p[0] + 0.01, p[1], p[2]]).collect();
        assert!(mpjpe(&shifted, &b, Align::Root(0)).unwrap() < 1e-9);
        assert!((mpjpe(&shifted, &b, Align::None).unwrap() - 10.0).abs() < 1e-9);
        assert_eq!(mpjpe(&b, &b, Align::None).unwrap(), 0.0);
        assert!(mpjpe(&a[..3], &b, Align::None).is_err());
    }

    #[test]
    fn procrustes_recovers_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = cloud(&mut rng, 30);
        let s = random_similarity(&mut rng);
        let g = s.apply_all(&p);
        let est = procrustes_align(&p, &g).unwrap();
        assert!((est.scale - s.scale).abs() < 1e-9);
        for i in 0..3 {
            assert!((est.translation[i] - s.translation[i]).abs() < 1e-9);
            for j in 0..3 {
                assert!((est.rotation[i][j] - s.rotation[i][j]).abs() < 1e-9);
            }
        }
        assert!(pa_mpjpe(&p, &g).unwrap() < 1e-9);
    }

    #[test]
    fn procrustes_beats_random_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = cloud(&mut rng, 24);
        let g = cloud(&mut rng, 24);
        let best = sse(&procrustes_align(&p, &g).unwrap().apply_all(&p), &g);
        for _ in 0..1000 {
            let s = random_similarity(&mut rng);
            assert!(best <= sse(&s.apply_all(&p), &g) + 1e-12);
        }
    }

    #[test]
    fn reflection_is_removed() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = cloud(&mut rng, 20);
        let g: Vec<_> = p.iter().map(|q| [-q[0], q[1], q[2]]).collect();
        let s = procrustes_align(&p, &g).unwrap();
        let det = crate::geom::to_na(&s.rotation).determinant();
        assert!((det - 1.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_inputs_rejected() {
        let line: Vec<_> = (0..5).map(|i| [i as f64, 0.0, 0.0]).collect();
        assert!(procrustes_align(&line, &line).is_err());
        let same = vec![[1.0, 2.0, 3.0]; 5];
        assert!(procrustes_align(&same, &same).is_err());
    }

    #[test]
    fn pck_boundary_is_strict() {
        let gt = [[0.0, 0.0], [100.0, 0.0]];
        let pred = [[10.0, 0.0], [100.0, 0.0]];
        let vis = [true, true];
        assert_eq!(pck(&pred, &gt, &vis, 100.0, 0.1).unwrap(), Some(0.5));
        assert_eq!(pck(&gt, &gt, &vis, 100.0, 0.01).unwrap(), Some(1.0));
        assert_eq!(pck(&pred, &gt, &[false, false], 100.0, 0.1).unwrap(), None);
        assert_eq!(bbox_side(&gt, &vis), Some(100.0));
        assert_eq!(bbox_side(&gt, &[false, false]), None);
    }

    #[test]
    fn fscore_threshold_sandwich() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g: Vec<_> = cloud(&mut rng, 200).iter().map(|p| [p[0], p[1], p[2]]).collect();
        // Space points far apart relative to 15 mm so the offset copy is the only neighbor.
        let g: Vec<_> = g.iter().map(|p| [p[0] * 10.0, p[1] * 10.0, p[2] * 10.0]).collect();
        let p: Vec<_> = g.iter().map(|q| [q[0] + 0.01, q[1], q[2]]).collect();
        assert_eq!(fscore_unaligned(&p, &g, 0.005).unwrap().f, 0.0);
        assert_eq!(fscore_unaligned(&p, &g, 0.015).unwrap().f, 1.0);
        assert_eq!(fscore(&g, &g, 0.005).unwrap().f, 1.0);
    }

    fn fscore_oracle(p: &[[f64; 3]], g: &[[f64; 3]], d: f64) -> (f64, f64) {
        let near = |a: &[[f64; 3]], b: &[[f64; 3]]| {
            a.iter()
                .filter(|x| b.iter().map(|y| dist(**x, *y)).fold(f64::INFINITY, f64::min) < d)
                .count() as f64
                / a.len() as f64
        };
        (near(p, g), near(g, p))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn fscore_matches_brute_force(seed in 0u64..10_000, d in 0.01f64..0.3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = cloud(&mut rng, 120);
            let g = cloud(&mut rng, 90);
            let fs = fscore_unaligned(&p, &g, d).unwrap();
            let (pr, rc) = fscore_oracle(&p, &g, d);
            prop_assert_eq!(fs.precision, pr);
            prop_assert_eq!(fs.recall, rc);
            let swapped = fscore_unaligned(&g, &p, d).unwrap();
            prop_assert_eq!(swapped.precision, fs.recall);
            prop_assert!((swapped.f - fs.f).abs() < 1e-15);
        }

        #[test]
        fn pa_mpjpe_similarity_invariant(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = cloud(&mut rng, 24);
            let g = cloud(&mut rng, 24);
            let s = random_similarity(&mut rng);
            let a = pa_mpjpe(&p, &g).unwrap();
            let b = pa_mpjpe(&s.apply_all(&p), &g).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
            // Root alignment is one feasible similarity.
            let root: Vec<_> = p.iter().map(|q| [q[0] - p[0][0] + g[0][0], q[1] - p[0][1] + g[0][1], q[2] - p[0][2] + g[0][2]]).collect();
            let best = sse(&procrustes_align(&p, &g).unwrap().apply_all(&p), &g);
            prop_assert!(best <= sse(&root, &g) + 1e-12);
        }

        #[test]
        fn pck_monotone_and_counted(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 23;
            let gt: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(0.0..500.0), rng.random_range(0.0..500.0)]).collect();
            let pred: Vec<[f64; 2]> = gt.iter().map(|g| [g[0] + rng.random_range(-40.0..40.0), g[1] + rng.random_range(-40.0..40.0)]).collect();
            let vis: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.8).collect();
            prop_assume!(vis.iter().any(|v| *v));
            let side = bbox_side(&gt, &vis).unwrap();
            prop_assume!(side > 0.0);
            let mut prev = 0.0;
            let mut vals = Vec::new();
            for a in PCK_THRESHOLDS {
                let v = pck(&pred, &gt, &vis, side, a).unwrap().unwrap();
                let mut hit = 0;
                let mut tot = 0;
                for i in 0..n {
                    if vis[i] {
                        tot += 1;
                        let e = ((pred[i][0] - gt[i][0]).powi(2) + (pred[i][1] - gt[i][1]).powi(2)).sqrt();
                        if e < a * side { hit += 1; }
                    }
                }
                prop_assert_eq!(v, hit as f64 / tot as f64);
                prop_assert!(v >= prev);
                prev = v;
                vals.push(v);
            }
            let avg = avg_pck(&pred, &gt, &vis, side).unwrap().unwrap();
            prop_assert!(avg >= vals[0] - 1e-15 && avg <= vals[4] + 1e-15);
        }
    }
}
