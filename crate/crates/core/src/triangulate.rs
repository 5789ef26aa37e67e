//! Linear triangulation and a RANSAC wrapper around it.

use nalgebra::{DMatrix, Vector4};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::geom;

/// Rays closer to parallel than this (sine of the angle) carry no depth.
pub const PARALLEL_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct TriangulatedPoint {
    pub id: usize,
    pub position: [f64; 3],
    /// Indices into the view list passed to the triangulator.
    pub inliers: Vec<usize>,
    /// Mean reprojection error over the inlier views, px.
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    pub threshold_px: f64,
    pub iters: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            threshold_px: 4.0,
            iters: 64,
            seed: 0,
        }
    }
}

/// Mean reprojection error of `p`; infinite if any view sees it from behind.
pub fn mean_reprojection(cameras: &[&Camera], pixels: &[[f64; 2]], p: [f64; 3]) -> f64 {
    let mut sum = 0.0;
    for (c, px) in cameras.iter().zip(pixels) {
        match c.project(p) {
            Ok(uv) => sum += (uv[0] - px[0]).hypot(uv[1] - px[1]),
            Err(_) => return f64::INFINITY,
        }
    }
    sum / cameras.len() as f64
}

fn reprojection(c: &Camera, px: [f64; 2], p: [f64; 3]) -> f64 {
    c.project(p)
        .map(|uv| (uv[0] - px[0]).hypot(uv[1] - px[1]))
        .unwrap_or(f64::INFINITY)
}

fn max_ray_sine(cameras: &[&Camera], pixels: &[[f64; 2]]) -> f64 {
    let rays: Vec<_> = cameras.iter().zip(pixels).map(|(c, px)| c.ray_direction(*px)).collect();
    let mut best: f64 = 0.0;
    for i in 0..rays.len() {
        for j in i + 1..rays.len() {
            best = best.max(geom::norm(geom::cross(rays[i], rays[j])));
        }
    }
    best
}

/// Direct linear transform in normalized image coordinates. Returns the
/// point and its mean reprojection error in pixels.
pub fn triangulate_dlt(cameras: &[&Camera], pixels: &[[f64; 2]]) -> Result<([f64; 3], f64)> {
    if cameras.len() != pixels.len() {
        return Err(Error::Dimension {
            what: "pixel list",
            expected: cameras.len(),
            got: pixels.len(),
        });
    }
    if cameras.len() < 2 {
        return Err(Error::Degenerate(format!("{} view(s), need at least 2", cameras.len())));
    }
    if max_ray_sine(cameras, pixels) < PARALLEL_TOL {
        return Err(Error::Degenerate("viewing rays are parallel".into()));
    }
    let mut a = DMatrix::zeros(2 * cameras.len(), 4);
    for (k, (c, px)) in cameras.iter().zip(pixels).enumerate() {
        let x = (px[0] - c.cx) / c.fx;
        let y = (px[1] - c.cy) / c.fy;
        let r = &c.rotation;
        let t = &c.translation;
        for col in 0..3 {
            a[(2 * k, col)] = x * r[2][col] - r[0][col];
            a[(2 * k + 1, col)] = y * r[2][col] - r[1][col];
        }
        a[(2 * k, 3)] = x * t[2] - t[0];
        a[(2 * k + 1, 3)] = y * t[2] - t[1];
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("requested");
    let k = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |b, (i, &s)| if s < b.1 { (i, s) } else { b })
        .0;
    let h = Vector4::new(v_t[(k, 0)], v_t[(k, 1)], v_t[(k, 2)], v_t[(k, 3)]);
    if h[3].abs() < f64::EPSILON * h.norm() {
        return Err(Error::Degenerate("point at infinity".into()));
    }
    let p = [h[0] / h[3], h[1] / h[3], h[2] / h[3]];
    let residual = mean_reprojection(cameras, pixels, p);
    if !residual.is_finite() {
        return Err(Error::Degenerate("triangulated point lies behind a camera".into()));
    }
    Ok((p, residual))
}

/// Robust triangulation of keypoint `id` from two-view hypotheses.
///
/// Every view pair is tried when there are no more pairs than `iters`;
/// otherwise `iters` pairs are drawn from a generator seeded by `cfg.seed`.
pub fn triangulate_ransac(
    id: usize,
    cameras: &[&Camera],
    pixels: &[[f64; 2]],
    cfg: &RansacConfig,
) -> Result<TriangulatedPoint> {
    if cameras.len() != pixels.len() {
        return Err(Error::Dimension {
            what: "pixel list",
            expected: cameras.len(),
            got: pixels.len(),
        });
    }
    let n = cameras.len();
    if n < 2 {
        return Err(Error::NoConsensus(format!("keypoint {id}: {n} view(s)")));
    }
    if !(cfg.threshold_px > 0.0) {
        return Err(Error::InvalidParam(format!("RANSAC threshold must be > 0, got {}", cfg.threshold_px)));
    }

    let pairs: Vec<(usize, usize)> = if n * (n - 1) / 2 <= cfg.iters {
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        (0..cfg.iters)
            .map(|_| {
                let s = index::sample(&mut rng, n, 2);
                (s.index(0), s.index(1))
            })
            .collect()
    };

    let consensus = |p: [f64; 3]| -> (Vec<usize>, f64) {
        let mut inl = Vec::new();
        let mut err = 0.0;
        for k in 0..n {
            let e = reprojection(cameras[k], pixels[k], p);
            if e < cfg.threshold_px {
                inl.push(k);
                err += e;
            }
        }
        let mean = if inl.is_empty() { f64::INFINITY } else { err / inl.len() as f64 };
        (inl, mean)
    };

    let mut best: Option<(Vec<usize>, f64)> = None;
    for (i, j) in pairs {
        let Ok((p, _)) = triangulate_dlt(&[cameras[i], cameras[j]], &[pixels[i], pixels[j]]) else {
            continue;
        };
        let (inl, err) = consensus(p);
        let better = match &best {
            None => true,
            Some((b, be)) => inl.len() > b.len() || (inl.len() == b.len() && err < *be),
        };
        if better {
            best = Some((inl, err));
        }
    }
    let inliers = match best {
        Some((inl, _)) if inl.len() >= 2 => inl,
        _ => return Err(Error::NoConsensus(format!("keypoint {id}: fewer than 2 agreeing views"))),
    };

    let cams: Vec<&Camera> = inliers.iter().map(|&k| cameras[k]).collect();
    let pxs: Vec<[f64; 2]> = inliers.iter().map(|&k| pixels[k]).collect();
    let (position, residual) = triangulate_dlt(&cams, &pxs)?;
    Ok(TriangulatedPoint {
        id,
        position,
        inliers,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera;
    use proptest::prelude::*;
    use rand::Rng;

    fn ring(n: usize) -> Vec<Camera> {
        let k = camera::intrinsics_from_fov(50.0, 1024, 1024).unwrap();
        camera::camera_ring(n, 3.5, [0.0, 0.9, 0.0], &k)
    }

    fn refs(c: &[Camera]) -> Vec<&Camera> {
        c.iter().collect()
    }

    #[test]
    fn exact_projections_recover_point() {
        let cams = ring(4);
        let p = [0.13, 1.21, -0.27];
        let px: Vec<_> = cams.iter().map(|c| c.project(p).unwrap()).collect();
        let (q, res) = triangulate_dlt(&refs(&cams), &px).unwrap();
        let err = geom::norm(geom::sub(p, q));
        assert!(err < 1e-9, "{err}");
        assert!(res < 1e-6);
    }

    #[test]
    fn identical_cameras_are_degenerate() {
        let cams = ring(1);
        let px = cams[0].project([0.0, 1.0, 0.0]).unwrap();
        let r = triangulate_dlt(&[&cams[0], &cams[0]], &[px, px]);
        assert!(matches!(r, Err(Error::Degenerate(_))), "{r:?}");
    }

    #[test]
    fn one_view_is_rejected() {
        let cams = ring(1);
        let px = cams[0].project([0.0, 1.0, 0.0]).unwrap();
        assert!(triangulate_dlt(&[&cams[0]], &[px]).is_err());
        assert!(matches!(
            triangulate_ransac(0, &[&cams[0]], &[px], &RansacConfig::default()),
            Err(Error::NoConsensus(_))
        ));
    }

    #[test]
    fn planted_outliers_are_excluded() {
        let cams = ring(8);
        let mut excluded = 0;
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = [rng.random_range(-0.4..0.4), rng.random_range(0.2..1.6), rng.random_range(-0.4..0.4)];
            let mut px: Vec<_> = cams.iter().map(|c| c.project(p).unwrap()).collect();
            let bad = index::sample(&mut rng, 8, 2).into_vec();
            for &b in &bad {
                let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                px[b][0] += 50.0 * a.cos();
                px[b][1] += 50.0 * a.sin();
            }
            let t = triangulate_ransac(3, &refs(&cams), &px, &RansacConfig { seed, ..Default::default() }).unwrap();
            if bad.iter().all(|b| !t.inliers.contains(b)) && t.inliers.len() == 6 {
                excluded += 1;
            }
            assert!(geom::norm(geom::sub(t.position, p)) < 1e-8);
        }
        assert_eq!(excluded, 20);
    }

    #[test]
    fn exact_views_are_all_inliers() {
        let cams = ring(5);
        let p = [0.0, 0.5, 0.1];
        let px: Vec<_> = cams.iter().map(|c| c.project(p).unwrap()).collect();
        let t = triangulate_ransac(0, &refs(&cams), &px, &RansacConfig::default()).unwrap();
        assert_eq!(t.inliers, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn infinite_threshold_matches_plain_dlt() {
        let cams = ring(6);
        let p = [0.2, 1.0, 0.0];
        let mut px: Vec<_> = cams.iter().map(|c| c.project(p).unwrap()).collect();
        px[2][0] += 30.0;
        px[4][1] -= 12.0;
        let cfg = RansacConfig {
            threshold_px: f64::INFINITY,
            ..Default::default()
        };
        let t = triangulate_ransac(0, &refs(&cams), &px, &cfg).unwrap();
        let (q, r) = triangulate_dlt(&refs(&cams), &px).unwrap();
        assert_eq!(t.inliers.len(), 6);
        assert_eq!(t.position, q);
        assert_eq!(t.residual, r);
    }

    #[test]
    fn sampled_hypotheses_are_seeded() {
        let cams = ring(12);
        let p = [0.0, 1.0, 0.0];
        let mut px: Vec<_> = cams.iter().map(|c| c.project(p).unwrap()).collect();
        px[0][0] += 80.0;
        let cfg = RansacConfig {
            iters: 10,
            seed: 5,
            ..Default::default()
        };
        let a = triangulate_ransac(0, &refs(&cams), &px, &cfg).unwrap();
        let b = triangulate_ransac(0, &refs(&cams), &px, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(!a.inliers.contains(&0));
    }

    proptest! {
        #[test]
        fn translation_equivariance(tx in -2.0..2.0f64, ty in -2.0..2.0f64, tz in -2.0..2.0f64) {
            let cams = ring(3);
            let p = [0.1, 0.9, -0.2];
            let t = [tx, ty, tz];
            let px: Vec<_> = cams.iter().map(|c| c.project(p).unwrap()).collect();
            // Shifting every camera center by t: x_cam = R(x - t) + T.
            let moved: Vec<Camera> = cams
                .iter()
                .map(|c| {
                    let shift = geom::mat_vec(&c.rotation, t);
                    c.with_extrinsics(c.rotation, geom::sub(c.translation, shift))
                })
                .collect();
            let (a, _) = triangulate_dlt(&refs(&cams), &px).unwrap();
            let (b, _) = triangulate_dlt(&refs(&moved), &px).unwrap();
            for k in 0..3 {
                prop_assert!((b[k] - a[k] - t[k]).abs() < 1e-9);
            }
        }
    }
}
