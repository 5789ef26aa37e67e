//! Multi-view, multi-frame fitting: robust triangulation, initialization from
//! the triangulated tracks, and block-alternating refinement with skeleton
//! and shape shared by every frame.

use nalgebra::DMatrix;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, MIN_DEPTH};
use crate::dual::Real;
use crate::error::{Error, Result};
use crate::fit_single::{self, FitConfig, FitResult, Observation2D, Solver, MIN_VISIBLE};
use crate::geom::{self, Mat3, Vec3};
use crate::optim::{self, LmConfig, ParamLayout, Residuals, StopReason};
use crate::priors::GmmPrior;
use crate::rig::{self, KinematicRig, RigParams};
use crate::terms::{self, BodyDims, Kp2d, LossBreakdown, RowMap, Term};
use crate::triangulate::{self, RansacConfig, TriangulatedPoint};

/// Synchronized observations: `frames[t][view]` pairs with `cameras[view]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct MultiViewSequence {
    pub cameras: Vec<Camera>,
    pub frames: Vec<Vec<Vec<Observation2D>>>,
    pub fps: f64,
}

impl MultiViewSequence {
    pub fn validate(&self, rig: &KinematicRig) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(Error::InvalidParam("sequence has no cameras".into()));
        }
        if self.frames.is_empty() {
            return Err(Error::InvalidParam("sequence has no frames".into()));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::InvalidParam(format!("frame rate must be > 0, got {}", self.fps)));
        }
        for c in &self.cameras {
            c.validate()?;
        }
        for (t, f) in self.frames.iter().enumerate() {
            if f.len() != self.cameras.len() {
                return Err(Error::InvalidParam(format!(
                    "frame {t} has {} views for {} cameras",
                    f.len(),
                    self.cameras.len()
                )));
            }
            for o in f.iter().flatten() {
                o.validate(rig)?;
            }
        }
        Ok(())
    }
}

/// Smoothness weight used when none is configured. Keypoint residuals are
/// in pixels and number in the thousands per frame, so the weight has to be
/// large for the smoothness term to reach the noise floor.
pub fn default_smooth_weight(fps: f64) -> f64 {
    10.0 * fps / 30.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct MultiFitConfig {
    pub lambda_kp2d: f64,
    /// Weight of the distance, in meters, to triangulated keypoints.
    pub lambda_kp3d: f64,
    pub lambda_anchor_param: f64,
    pub lambda_anchor_3d: f64,
    pub lambda_gmm: f64,
    pub lambda_shape_l2: f64,
    pub lambda_limits: f64,
    /// First-difference weight; `None` means [`default_smooth_weight`].
    pub lambda_smooth: Option<f64>,
    /// Second-difference weight, off by default.
    pub lambda_accel: f64,
    pub prompt_upweight: f64,
    pub huber_delta: Option<f64>,
    pub ransac: RansacConfig,
    /// Centered moving-average window over triangulated tracks (odd).
    pub track_window: usize,
    /// Remove 2D observations that RANSAC rejected from the 2D loss.
    pub drop_outlier_views: bool,
    /// Refine extrinsics of every camera but the first.
    pub refine_cameras: bool,
    /// Pull of the extrinsic corrections `[δω rad, δt m]` toward zero.
    /// Without it the body and the free cameras drift together along a
    /// nearly flat direction.
    pub lambda_camera: f64,
    /// Solver settings of each block update.
    pub lm: LmConfig,
    pub max_rounds: usize,
    /// Stop when a full round lowers the cost by less than this fraction.
    pub tol: f64,
    /// Iteration cap of a final LM pass over all free blocks together;
    /// 0 skips it. Alternation alone crawls along the skeleton/pose valley.
    pub joint_iters: usize,
    pub frozen_blocks: Vec<String>,
}

impl Default for MultiFitConfig {
    fn default() -> Self {
        Self {
            lambda_kp2d: 1.0,
            lambda_kp3d: 1.0,
            lambda_anchor_param: 1e-2,
            lambda_anchor_3d: 1e-1,
            lambda_gmm: 1e-3,
            lambda_shape_l2: 1e-2,
            lambda_limits: 1.0,
            lambda_smooth: None,
            lambda_accel: 0.0,
            prompt_upweight: 10.0,
            huber_delta: Some(5.0),
            ransac: RansacConfig::default(),
            track_window: 3,
            drop_outlier_views: true,
            refine_cameras: true,
            lambda_camera: 1e5,
            lm: LmConfig {
                max_iters: 50,
                ..LmConfig::default()
            },
            max_rounds: 8,
            tol: 1e-3,
            joint_iters: 100,
            frozen_blocks: Vec::new(),
        }
    }
}

impl MultiFitConfig {
    pub fn validate(&self) -> Result<()> {
        self.single_view().validate()?;
        for (name, w) in [
            ("lambda_kp3d", self.lambda_kp3d),
            ("lambda_smooth", self.lambda_smooth.unwrap_or(0.0)),
            ("lambda_accel", self.lambda_accel),
            ("lambda_camera", self.lambda_camera),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidParam(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        if self.track_window % 2 == 0 {
            return Err(Error::InvalidParam(format!(
                "track_window must be odd, got {}",
                self.track_window
            )));
        }
        if self.max_rounds == 0 {
            return Err(Error::InvalidParam("max_rounds must be >= 1".into()));
        }
        Ok(())
    }

    pub fn smooth_weight(&self, fps: f64) -> f64 {
        self.lambda_smooth.unwrap_or_else(|| default_smooth_weight(fps))
    }

    /// Single-view settings with the same per-frame weights.
    pub fn single_view(&self) -> FitConfig {
        FitConfig {
            lambda_kp2d: self.lambda_kp2d,
            lambda_anchor_param: self.lambda_anchor_param,
            lambda_anchor_3d: self.lambda_anchor_3d,
            lambda_gmm: self.lambda_gmm,
            lambda_shape_l2: self.lambda_shape_l2,
            lambda_limits: self.lambda_limits,
            prompt_upweight: self.prompt_upweight,
            huber_delta: self.huber_delta,
            solver: Solver::Lm(self.lm.clone()),
            optimize_camera: false,
            frozen_blocks: Vec::new(),
        }
    }
}

/// `√λ · fps · (mₜ − mₜ₋₁)` for consecutive motion vectors, concatenated.
pub fn temporal_smoothness_residuals(motion: &[Vec<f64>], lambda: f64, fps: f64) -> Result<Vec<f64>> {
    if motion.len() < 2 {
        return Err(Error::InvalidParam(format!("{} frame(s), need at least 2", motion.len())));
    }
    let n = motion[0].len();
    if let Some(bad) = motion.iter().find(|m| m.len() != n) {
        return Err(Error::Dimension {
            what: "motion vector",
            expected: n,
            got: bad.len(),
        });
    }
    let mut out = vec![0.0; (motion.len() - 1) * n];
    for t in 1..motion.len() {
        write_difference(&motion[t], &motion[t - 1], lambda.sqrt() * fps, &mut out[(t - 1) * n..]);
    }
    Ok(out)
}

fn write_difference<T: Real>(a: &[T], b: &[T], scale: f64, out: &mut [T]) -> usize {
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o = (*x - *y) * scale;
    }
    a.len()
}

/// Triangulated tracks of a sequence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Triangulation {
    /// Per frame, one point per keypoint id seen in at least two views.
    pub points: Vec<Vec<TriangulatedPoint>>,
    /// `(frame, view, keypoint id)` observations outside the consensus.
    pub rejected: Vec<(usize, usize, usize)>,
    /// `(frame, keypoint id)` pairs that could not be triangulated.
    pub failed: Vec<(usize, usize)>,
}

/// RANSAC triangulation of every keypoint in every frame, followed by a
/// centered moving average of each track over `window` frames.
pub fn triangulate_sequence(seq: &MultiViewSequence, ransac: &RansacConfig, window: usize) -> Result<Triangulation> {
    let mut out = Triangulation::default();
    for (t, views) in seq.frames.iter().enumerate() {
        let mut by_id: std::collections::BTreeMap<usize, Vec<(usize, [f64; 2])>> = Default::default();
        for (v, obs) in views.iter().enumerate() {
            for o in obs.iter().filter(|o| o.usable()) {
                let e = by_id.entry(o.id).or_default();
                if e.iter().all(|(w, _)| *w != v) {
                    e.push((v, [o.u, o.v]));
                }
            }
        }
        let mut pts = Vec::new();
        for (id, seen) in by_id {
            if seen.len() < 2 {
                continue;
            }
            let cams: Vec<&Camera> = seen.iter().map(|(v, _)| &seq.cameras[*v]).collect();
            let px: Vec<[f64; 2]> = seen.iter().map(|(_, p)| *p).collect();
            let cfg = RansacConfig {
                seed: ransac.seed ^ ((t as u64) << 32 | id as u64),
                ..ransac.clone()
            };
            match triangulate::triangulate_ransac(id, &cams, &px, &cfg) {
                Ok(mut p) => {
                    for (k, (v, _)) in seen.iter().enumerate() {
                        if !p.inliers.contains(&k) {
                            out.rejected.push((t, *v, id));
                        }
                    }
                    p.inliers = p.inliers.iter().map(|&k| seen[k].0).collect();
                    pts.push(p);
                }
                Err(_) => out.failed.push((t, id)),
            }
        }
        out.points.push(pts);
    }
    if !out.failed.is_empty() {
        log::warn!("{} keypoint tracks could not be triangulated", out.failed.len());
    }
    smooth_tracks(&mut out.points, window);
    Ok(out)
}

/// Local linear fit per keypoint id over a centered window, evaluated at
/// the frame itself. Linear motion passes through unchanged, including at
/// the ends of the sequence where the window is one-sided.
pub fn smooth_tracks(points: &mut [Vec<TriangulatedPoint>], window: usize) {
    let h = window / 2;
    if h == 0 {
        return;
    }
    let lookup = |f: &Vec<TriangulatedPoint>, id: usize| f.iter().find(|p| p.id == id).map(|p| p.position);
    let original: Vec<Vec<TriangulatedPoint>> = points.to_vec();
    for t in 0..points.len() {
        for p in &mut points[t] {
            let lo = t.saturating_sub(h);
            let hi = (t + h).min(original.len() - 1);
            let near: Vec<(f64, [f64; 3])> = (lo..=hi)
                .filter_map(|s| Some((s as f64 - t as f64, lookup(&original[s], p.id)?)))
                .collect();
            let n = near.len() as f64;
            let ds = near.iter().map(|(d, _)| d).sum::<f64>() / n;
            let mean = near.iter().fold([0.0; 3], |a, (_, q)| geom::add(a, *q)).map(|v| v / n);
            let sxx: f64 = near.iter().map(|(d, _)| (d - ds).powi(2)).sum();
            let slope = if sxx > 0.0 {
                near.iter()
                    .fold([0.0; 3], |a, (d, q)| geom::add(a, geom::scale(geom::sub(*q, mean), d - ds)))
                    .map(|v| v / sxx)
            } else {
                [0.0; 3]
            };
            p.position = geom::sub(mean, geom::scale(slope, ds));
        }
    }
}

/// Initial per-frame parameters from triangulated joints.
///
/// Bone scales are median triangulated lengths over rest lengths and are
/// shared by all frames; the root follows the pelvis; each joint's rotation
/// aligns its rest child directions with the observed ones, in tree order.
pub fn init_from_triangulation(
    rig: &KinematicRig,
    points: &[Vec<TriangulatedPoint>],
) -> Result<(Vec<RigParams>, Vec<f64>)> {
    let nj = rig.joint_count();
    let pos: Vec<Vec<Option<[f64; 3]>>> = points
        .iter()
        .map(|f| {
            let mut v = vec![None; nj];
            for p in f.iter().filter(|p| p.id < nj) {
                v[p.id] = Some(p.position);
            }
            v
        })
        .collect();
    let root = 0;
    let with_root: Vec<usize> = (0..pos.len()).filter(|&t| pos[t][root].is_some()).collect();
    if with_root.is_empty() {
        return Err(Error::MissingKeypoint(format!(
            "root joint {:?} is not triangulated in any frame",
            rig.joints()[root].name
        )));
    }

    let mut skeleton = vec![1.0; rig.bone_count()];
    for (b, s) in skeleton.iter_mut().enumerate() {
        let j = b + 1;
        let p = rig.parent(j).expect("non-root joint");
        let mut lengths: Vec<f64> = pos
            .iter()
            .filter_map(|f| Some(geom::norm(geom::sub(f[j]?, f[p]?))))
            .collect();
        let rest = rig.rest_bone_length(j);
        if lengths.is_empty() || rest < 1e-9 {
            continue;
        }
        lengths.sort_by(f64::total_cmp);
        let m = lengths.len();
        let median = if m % 2 == 1 {
            lengths[m / 2]
        } else {
            0.5 * (lengths[m / 2 - 1] + lengths[m / 2])
        };
        *s = (median / rest).clamp(0.25, 4.0);
    }

    // Each vertex helps solve its dominant joint. Influences of joints
    // solved earlier are subtracted exactly; later ones (children) are
    // assumed to share the joint's rotation, which is off only by the
    // child's relative rotation times a short lever.
    let mut owned: Vec<Vec<usize>> = vec![Vec::new(); nj];
    for (v, w) in rig.skinning().iter().enumerate() {
        if let Some(&(j, _)) = w.iter().max_by(|a, b| a.1.total_cmp(&b.1)) {
            owned[j].push(v);
        }
    }
    let rest = rig.rest_positions();
    let template = rig.template_vertices();

    let mut frames = Vec::with_capacity(pos.len());
    for (t, f) in pos.iter().enumerate() {
        let nearest = *with_root.iter().min_by_key(|&&s| s.abs_diff(t)).expect("non-empty");
        let pelvis = pos[nearest][root].expect("filtered");
        let mut params = RigParams::rest(rig);
        params.skeleton = skeleton.clone();
        params.root_translation = geom::sub(pelvis, rig.joints()[root].rest_offset);
        let verts: std::collections::HashMap<usize, [f64; 3]> = points[t]
            .iter()
            .filter(|p| p.id >= nj)
            .map(|p| (p.id - nj, p.position))
            .collect();

        let mut global: Vec<Mat3<f64>> = Vec::with_capacity(nj);
        let mut at: Vec<[f64; 3]> = Vec::with_capacity(nj);
        for j in 0..nj {
            let parent = rig.parent(j);
            let parent_rot = parent.map_or_else(geom::identity, |p| global[p]);
            let xj = f[j].unwrap_or_else(|| match parent {
                Some(p) => geom::add(at[p], geom::mat_vec(&parent_rot, geom::scale(rig.joints()[j].rest_offset, skeleton[j - 1]))),
                None => pelvis,
            });
            // pairs of (rest vector, observed vector, weight)
            let mut pairs: Vec<([f64; 3], [f64; 3], f64)> = Vec::new();
            for &c in rig.children(j) {
                if let Some(xc) = f[c] {
                    pairs.push((rig.joints()[c].rest_offset, geom::sub(xc, xj), 1.0));
                }
            }
            for v in &owned[j] {
                let Some(&xv) = verts.get(v) else { continue };
                let p = template[*v];
                let mut y = xv;
                let mut a = [0.0; 3];
                let mut ok = true;
                for &(k, w) in &rig.skinning()[*v] {
                    if k < j {
                        y = geom::sub(y, geom::scale(geom::add(geom::mat_vec(&global[k], geom::sub(p, rest[k])), at[k]), w));
                    } else {
                        let xk = if k == j { Some(xj) } else { f[k] };
                        let Some(xk) = xk else {
                            ok = false;
                            break;
                        };
                        y = geom::sub(y, geom::scale(xk, w));
                        a = geom::add(a, geom::scale(geom::sub(p, rest[k]), w));
                    }
                }
                if ok {
                    pairs.push((a, y, 1.0));
                }
            }
            pairs.retain(|(a, b, _)| geom::norm(*a) > 1e-12 && geom::norm(*b) > 1e-12);
            let rot = match pairs.first() {
                None => parent_rot,
                Some(&(a, b, _)) => geom::best_rotation(&pairs).unwrap_or_else(|| {
                    let a = geom::mat_vec(&parent_rot, a);
                    geom::mat_mul(&geom::minimal_rotation(a, b), &parent_rot)
                }),
            };
            global.push(rot);
            at.push(xj);
            params.pose[j] = geom::log_rotation(&geom::mat_mul(&geom::transpose(&parent_rot), &rot));
        }
        frames.push(params);
    }
    Ok((frames, skeleton))
}

struct FrameTerms {
    ids: Vec<usize>,
    views: Vec<(usize, Vec<Kp2d>)>,
    kp3d: Vec<(usize, [f64; 3])>,
    init: Vec<f64>,
    init_joints: Vec<[f64; 3]>,
    dropped: usize,
}

/// Which residual rows a problem evaluates.
#[derive(Clone, Debug)]
struct Scope {
    frames: Vec<usize>,
    /// `t` stands for the pair `(t − 1, t)`.
    pairs: Vec<usize>,
    /// `t` stands for the triple centered on `t`.
    triples: Vec<usize>,
    /// Include the camera anchor rows.
    cameras: bool,
    rows: RowMap,
}

impl Scope {
    fn with_cameras(mut self, cam_rows: usize) -> Self {
        self.cameras = true;
        self.rows.push(Term::AnchorParam, cam_rows);
        self
    }
}

/// The joint objective over cameras, shared body parameters and per-frame
/// motion. Parameter blocks: `camera/<c>` (six each), `skeleton` (log
/// scales), `shape`, then `frame/<t>/translation` and `frame/<t>/pose/<joint>`.
pub struct MultiViewProblem<'a> {
    rig: &'a KinematicRig,
    cameras: &'a [Camera],
    prior: Option<&'a GmmPrior>,
    cfg: &'a MultiFitConfig,
    dims: BodyDims,
    fps: f64,
    lambda_smooth: f64,
    frames: Vec<FrameTerms>,
    layout: ParamLayout,
    x0: Vec<f64>,
    shared_off: usize,
    frame_off: Vec<usize>,
    scope: Scope,
}

impl<'a> MultiViewProblem<'a> {
    /// Builds the objective around `init` (one entry per frame; skeleton and
    /// shape are taken from the first). Observations listed in
    /// `rejected` as `(frame, view, id)` are left out of the 2D loss.
    pub fn new(
        rig: &'a KinematicRig,
        seq: &'a MultiViewSequence,
        init: &[RigParams],
        tracks: Option<&[Vec<TriangulatedPoint>]>,
        rejected: &[(usize, usize, usize)],
        prior: Option<&'a GmmPrior>,
        cfg: &'a MultiFitConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        seq.validate(rig)?;
        if init.len() != seq.frames.len() {
            return Err(Error::Dimension {
                what: "initial frames",
                expected: seq.frames.len(),
                got: init.len(),
            });
        }
        for p in init {
            p.validate(rig)?;
        }
        let dims = BodyDims::of(rig);
        if let (Some(p), true) = (prior, cfg.lambda_gmm > 0.0) {
            if p.dim() != dims.prior_pose().len() {
                return Err(Error::Dimension {
                    what: "pose prior",
                    expected: dims.prior_pose().len(),
                    got: p.dim(),
                });
            }
        }
        let n_frames = seq.frames.len();
        let shared = &init[0];

        let mut frames = Vec::with_capacity(n_frames);
        for (t, views) in seq.frames.iter().enumerate() {
            // Shared parameters enter every frame, so the anchor refers to them too.
            let mut p = init[t].clone();
            p.skeleton = shared.skeleton.clone();
            p.shape = shared.shape.clone();
            frames.push(frame_terms(rig, seq, t, views, &p, tracks, rejected, cfg)?);
        }

        let mut layout = ParamLayout::new();
        for c in 0..seq.cameras.len() {
            layout.push(format!("camera/{c}"), 6);
        }
        let shared_off = layout.push("skeleton", dims.bones);
        layout.push("shape", dims.shapes);
        let mut frame_off = Vec::with_capacity(n_frames);
        for t in 0..n_frames {
            frame_off.push(terms::push_motion_blocks(&mut layout, rig, &format!("frame/{t}/")));
        }
        for name in &cfg.frozen_blocks {
            layout.set_frozen(name, true)?;
        }

        let mut x0 = vec![0.0; layout.total()];
        let enc = terms::encode_body(shared);
        x0[shared_off..shared_off + dims.bones].copy_from_slice(&enc[dims.skeleton()]);
        x0[shared_off + dims.bones..shared_off + dims.bones + dims.shapes].copy_from_slice(&enc[dims.shape()]);
        for t in 0..n_frames {
            let enc = terms::encode_body(&init[t]);
            x0[frame_off[t]..frame_off[t] + 3 + 3 * dims.joints].copy_from_slice(&enc[..3 + 3 * dims.joints]);
        }

        let mut problem = Self {
            rig,
            cameras: &seq.cameras,
            prior,
            cfg,
            dims,
            fps: seq.fps,
            lambda_smooth: cfg.smooth_weight(seq.fps),
            frames,
            layout,
            x0,
            shared_off,
            frame_off,
            scope: Scope {
                frames: Vec::new(),
                pairs: Vec::new(),
                triples: Vec::new(),
                cameras: false,
                rows: RowMap::default(),
            },
        };
        problem.scope = problem
            .scope_of((0..n_frames).collect(), (1..n_frames).collect(), (1..n_frames.saturating_sub(1)).collect())
            .with_cameras(problem.camera_rows());
        Ok(problem)
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn initial_point(&self) -> Vec<f64> {
        self.x0.clone()
    }

    /// Per-term breakdown of the whole objective at `x`.
    pub fn breakdown(&self, x: &[f64]) -> Result<LossBreakdown> {
        let r = optim::evaluate(self, x)?;
        Ok(self.scope.rows.breakdown(&r))
    }

    /// Cost of frame `t`: its own terms plus the smoothness linking it to
    /// the previous frame (and the second difference centered on it).
    pub fn frame_breakdown(&self, x: &[f64], t: usize) -> Result<(LossBreakdown, usize)> {
        let n = self.frames.len();
        let scope = self.scope_of(
            vec![t],
            if t > 0 { vec![t] } else { vec![] },
            if t > 0 && t + 1 < n { vec![t] } else { vec![] },
        );
        let view = Scoped { problem: self, scope: &scope };
        let r = optim::evaluate(&view, x)?;
        Ok((scope.rows.breakdown(&r), r.len()))
    }

    /// Parameters of frame `t` at `x`.
    pub fn frame_params(&self, x: &[f64], t: usize) -> Result<RigParams> {
        let d = &self.dims;
        let m = 3 + 3 * d.joints;
        let mut body = x[self.frame_off[t]..self.frame_off[t] + m].to_vec();
        body.extend_from_slice(&x[self.shared_off..self.shared_off + d.bones + d.shapes]);
        terms::decode_body(self.rig, &body)
    }

    /// Cameras at `x`.
    pub fn cameras_at(&self, x: &[f64]) -> Vec<Camera> {
        self.cameras
            .iter()
            .enumerate()
            .map(|(c, cam)| {
                let d = &x[6 * c..6 * c + 6];
                if d.iter().all(|v| *v == 0.0) {
                    cam.clone()
                } else {
                    cam.perturbed([d[0], d[1], d[2]], [d[3], d[4], d[5]])
                }
            })
            .collect()
    }

    fn camera_rows(&self) -> usize {
        if self.cfg.lambda_camera > 0.0 {
            6 * self.cameras.len()
        } else {
            0
        }
    }

    fn smoothing(&self) -> bool {
        self.lambda_smooth > 0.0
    }

    fn scope_of(&self, frames: Vec<usize>, pairs: Vec<usize>, triples: Vec<usize>) -> Scope {
        let d = &self.dims;
        let cfg = self.cfg;
        let on = |w: f64| w > 0.0;
        let mut rows = RowMap::default();
        for &t in &frames {
            let f = &self.frames[t];
            rows.push(Term::Kp2d, f.views.iter().map(|(_, k)| 2 * k.len()).sum());
            rows.push(Term::Kp3d, 3 * f.kp3d.len());
            rows.push(Term::AnchorParam, if on(cfg.lambda_anchor_param) { d.len() } else { 0 });
            rows.push(Term::Anchor3d, if on(cfg.lambda_anchor_3d) { 3 * d.joints } else { 0 });
            rows.push(Term::Gmm, usize::from(self.prior.is_some() && on(cfg.lambda_gmm)));
            rows.push(Term::ShapeL2, if on(cfg.lambda_shape_l2) { d.shapes } else { 0 });
            rows.push(Term::Limits, if on(cfg.lambda_limits) { 3 * d.joints } else { 0 });
        }
        let m = 3 + 3 * d.joints;
        let pairs = if self.smoothing() { pairs } else { Vec::new() };
        let triples = if on(cfg.lambda_accel) { triples } else { Vec::new() };
        rows.push(Term::Smooth, m * (pairs.len() + triples.len()));
        Scope {
            frames,
            pairs,
            triples,
            cameras: false,
            rows,
        }
    }

    fn eval_scope<T: Real>(&self, x: &[T], scope: &Scope, out: &mut [T]) {
        let d = &self.dims;
        let cfg = self.cfg;
        let m = 3 + 3 * d.joints;
        let skel = &x[self.shared_off..self.shared_off + d.bones];
        let shape = &x[self.shared_off + d.bones..self.shared_off + d.bones + d.shapes];
        let extr: Vec<(Mat3<T>, Vec3<T>)> = self
            .cameras
            .iter()
            .enumerate()
            .map(|(c, cam)| terms::extrinsics(cam, Some(&x[6 * c..6 * c + 6])))
            .collect();
        let mut at = 0;
        for &t in &scope.frames {
            let f = &self.frames[t];
            let mo = &x[self.frame_off[t]..self.frame_off[t] + m];
            let (globals, pts) = terms::keypoints_generic(self.rig, &mo[..3], &mo[3..], skel, shape, &f.ids);
            for (c, kp) in &f.views {
                at += terms::write_kp2d(&self.cameras[*c], &extr[*c], &pts, kp, cfg.huber_delta, &mut out[at..]);
            }
            let s3 = cfg.lambda_kp3d.sqrt();
            for (slot, target) in &f.kp3d {
                for k in 0..3 {
                    out[at + k] = (pts[*slot][k] - target[k]) * s3;
                }
                at += 3;
            }
            if cfg.lambda_anchor_param > 0.0 {
                let body: Vec<T> = mo.iter().chain(skel).chain(shape).copied().collect();
                at += terms::write_anchor(&body, &f.init, cfg.lambda_anchor_param.sqrt(), &mut out[at..]);
            }
            if cfg.lambda_anchor_3d > 0.0 {
                let joints: Vec<_> = globals.iter().map(|g| g.translation).collect();
                at += terms::write_points(&joints, &f.init_joints, cfg.lambda_anchor_3d.sqrt(), &mut out[at..]);
            }
            if let (Some(prior), true) = (self.prior, cfg.lambda_gmm > 0.0) {
                at += terms::write_gmm(prior, &mo[6..], cfg.lambda_gmm, &mut out[at..]);
            }
            if cfg.lambda_shape_l2 > 0.0 {
                let s = cfg.lambda_shape_l2.sqrt();
                for (o, v) in out[at..].iter_mut().zip(shape) {
                    *o = *v * s;
                }
                at += d.shapes;
            }
            if cfg.lambda_limits > 0.0 {
                at += terms::write_limits(self.rig, &mo[3..], cfg.lambda_limits.sqrt(), &mut out[at..]);
            }
        }
        let motion = |t: usize| &x[self.frame_off[t]..self.frame_off[t] + m];
        let s1 = self.lambda_smooth.sqrt() * self.fps;
        for &t in &scope.pairs {
            at += write_difference(motion(t), motion(t - 1), s1, &mut out[at..]);
        }
        let s2 = cfg.lambda_accel.sqrt() * self.fps * self.fps;
        for &t in &scope.triples {
            let (a, b, c) = (motion(t - 1), motion(t), motion(t + 1));
            for k in 0..m {
                out[at + k] = (c[k] - b[k] * 2.0 + a[k]) * s2;
            }
            at += m;
        }
        if scope.cameras && cfg.lambda_camera > 0.0 {
            let n = 6 * self.cameras.len();
            at += terms::write_anchor(&x[..n], &vec![0.0; n], cfg.lambda_camera.sqrt(), &mut out[at..]);
        }
        debug_assert_eq!(at, scope.rows.total());
    }
}

#[allow(clippy::too_many_arguments)]
fn frame_terms(
    rig: &KinematicRig,
    seq: &MultiViewSequence,
    t: usize,
    views: &[Vec<Observation2D>],
    init: &RigParams,
    tracks: Option<&[Vec<TriangulatedPoint>]>,
    rejected: &[(usize, usize, usize)],
    cfg: &MultiFitConfig,
) -> Result<FrameTerms> {
    let kp3d_src: Vec<&TriangulatedPoint> = match tracks {
        Some(tr) if cfg.lambda_kp3d > 0.0 => tr.get(t).map(|v| v.iter().collect()).unwrap_or_default(),
        _ => Vec::new(),
    };
    let mut ids: Vec<usize> = views
        .iter()
        .flatten()
        .filter(|o| o.usable())
        .map(|o| o.id)
        .chain(kp3d_src.iter().map(|p| p.id))
        .collect();
    ids.sort_unstable();
    ids.dedup();
    let init_pts = rig::keypoint_positions(rig, init, &ids)?;
    let slot = |id: usize| ids.binary_search(&id).expect("collected above");

    let mut dropped = 0;
    let mut observations = 0;
    let mut out_views = Vec::new();
    for (c, obs) in views.iter().enumerate() {
        let cam = &seq.cameras[c];
        let mut kp = Vec::new();
        for o in obs.iter().filter(|o| o.usable()) {
            if rejected.contains(&(t, c, o.id)) {
                continue;
            }
            if cam.to_camera_frame(init_pts[slot(o.id)])[2] <= MIN_DEPTH {
                dropped += 1;
                continue;
            }
            let mut scale = cfg.lambda_kp2d.sqrt() * o.conf;
            if o.prompt {
                scale *= cfg.prompt_upweight.sqrt();
            }
            observations += 1;
            if cfg.lambda_kp2d > 0.0 {
                kp.push(Kp2d {
                    slot: slot(o.id),
                    target: [o.u, o.v],
                    scale,
                });
            }
        }
        if !kp.is_empty() {
            out_views.push((c, kp));
        }
    }
    if dropped > 0 {
        log::warn!("frame {t}: dropped {dropped} keypoints behind a camera");
    }
    let kp3d: Vec<(usize, [f64; 3])> = kp3d_src.iter().map(|p| (slot(p.id), p.position)).collect();
    if observations + kp3d.len() < MIN_VISIBLE {
        return Err(Error::UnderConstrained {
            visible: observations + kp3d.len(),
            required: MIN_VISIBLE,
        });
    }
    Ok(FrameTerms {
        ids,
        views: out_views,
        kp3d,
        init: terms::encode_body(init),
        init_joints: rig::forward_kinematics(rig, init)?.positions,
        dropped,
    })
}

impl Residuals for MultiViewProblem<'_> {
    fn num_params(&self) -> usize {
        self.layout.total()
    }

    fn num_residuals(&self) -> usize {
        self.scope.rows.total()
    }

    fn eval<T: Real>(&self, x: &[T], out: &mut [T]) {
        self.eval_scope(x, &self.scope, out);
    }
}

/// The rows of one block update; the rest of the objective is constant in
/// that block's parameters.
struct Scoped<'p, 'a> {
    problem: &'p MultiViewProblem<'a>,
    scope: &'p Scope,
}

impl Residuals for Scoped<'_, '_> {
    fn num_params(&self) -> usize {
        self.problem.layout.total()
    }

    fn num_residuals(&self) -> usize {
        self.scope.rows.total()
    }

    fn eval<T: Real>(&self, x: &[T], out: &mut [T]) {
        self.problem.eval_scope(x, self.scope, out);
    }

    // Each frame's rows depend only on the cameras, the shared block and that
    // frame; smoothness rows only on neighbouring frames. Differentiating row
    // groups against their own columns avoids pushing every dual chunk
    // through the whole sequence.
    fn linearize_active(&self, x: &[f64], active: &[usize]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let p = self.problem;
        let sc = self.scope;
        if sc.frames.len() + sc.pairs.len() + sc.triples.len() + usize::from(sc.cameras) <= 1 {
            return optim::jacobian_active(self, x, active);
        }
        let m = 3 + 3 * p.dims.joints;
        let shared_end = p.shared_off + p.dims.bones + p.dims.shapes;
        let in_frames = |i: usize, fr: &[usize]| fr.iter().any(|&t| (p.frame_off[t]..p.frame_off[t] + m).contains(&i));
        let mut groups: Vec<(Scope, Vec<usize>)> = Vec::new();
        for &t in &sc.frames {
            let cols = active.iter().copied().filter(|&i| i < shared_end || in_frames(i, &[t])).collect();
            groups.push((p.scope_of(vec![t], vec![], vec![]), cols));
        }
        for &t in &sc.pairs {
            let cols = active.iter().copied().filter(|&i| in_frames(i, &[t - 1, t])).collect();
            groups.push((p.scope_of(vec![], vec![t], vec![]), cols));
        }
        for &t in &sc.triples {
            let cols = active.iter().copied().filter(|&i| in_frames(i, &[t - 1, t, t + 1])).collect();
            groups.push((p.scope_of(vec![], vec![], vec![t]), cols));
        }
        if sc.cameras {
            let cols = active.iter().copied().filter(|&i| i < 6 * p.cameras.len()).collect();
            groups.push((p.scope_of(vec![], vec![], vec![]).with_cameras(p.camera_rows()), cols));
        }
        let mut pos = vec![usize::MAX; x.len()];
        for (k, &i) in active.iter().enumerate() {
            pos[i] = k;
        }
        let mut r = Vec::with_capacity(sc.rows.total());
        let mut jac = DMatrix::zeros(sc.rows.total(), active.len());
        for (scope, cols) in &groups {
            let (rg, jg) = optim::jacobian_active(&Scoped { problem: p, scope }, x, cols)?;
            let at = r.len();
            r.extend_from_slice(&rg);
            for (c, &i) in cols.iter().enumerate() {
                jac.view_mut((at, pos[i]), (rg.len(), 1)).copy_from(&jg.column(c));
            }
        }
        debug_assert_eq!(r.len(), sc.rows.total());
        Ok((r, jac))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct MultiFitResult {
    /// Per-frame results; `losses.smooth` holds the link to the previous frame.
    pub frames: Vec<FitResult>,
    pub skeleton: Vec<f64>,
    pub shape: Vec<f64>,
    pub cameras: Vec<Camera>,
    pub losses: LossBreakdown,
    pub total_cost: f64,
    /// Objective after initialization and after every block update.
    pub trace: Vec<f64>,
    pub rounds: usize,
    pub converged: bool,
    pub triangulated: Vec<Vec<TriangulatedPoint>>,
    pub rejected_views: usize,
    pub failed_tracks: usize,
}

/// Triangulates, initializes from the tracks and refines.
pub fn fit_multi_view(
    rig: &KinematicRig,
    seq: &MultiViewSequence,
    prior: Option<&GmmPrior>,
    cfg: &MultiFitConfig,
) -> Result<MultiFitResult> {
    cfg.validate()?;
    seq.validate(rig)?;
    if seq.cameras.len() < 2 {
        return Err(Error::Degenerate(format!(
            "{} camera(s): triangulation needs at least 2",
            seq.cameras.len()
        )));
    }
    let tri = triangulate_sequence(seq, &cfg.ransac, cfg.track_window)?;
    let (init, _) = init_from_triangulation(rig, &tri.points)?;
    fit_multi_view_from(rig, seq, &init, Some(&tri), prior, cfg)
}

/// Block-alternating refinement from given initial parameters.
///
/// Each round updates every frame's motion in turn, then the shared
/// skeleton and shape, then the cameras; each update is an LM descent on
/// the rows that depend on its block, so the objective never increases.
pub fn fit_multi_view_from(
    rig: &KinematicRig,
    seq: &MultiViewSequence,
    init: &[RigParams],
    tri: Option<&Triangulation>,
    prior: Option<&GmmPrior>,
    cfg: &MultiFitConfig,
) -> Result<MultiFitResult> {
    let rejected: &[(usize, usize, usize)] = match tri {
        Some(t) if cfg.drop_outlier_views => &t.rejected,
        _ => &[],
    };
    let problem = MultiViewProblem::new(rig, seq, init, tri.map(|t| t.points.as_slice()), rejected, prior, cfg)?;
    let n = seq.frames.len();
    let mut x = problem.initial_point();
    let global_cost = |x: &[f64]| optim::evaluate(&problem, x).map(|r| optim::half_squared_norm(&r));
    let mut cost = global_cost(&x)?;
    let mut trace = vec![cost];

    let user_frozen = |name: &str| cfg.frozen_blocks.iter().any(|f| f == name);
    let mut blocks: Vec<(ParamLayout, Scope)> = Vec::new();
    for t in 0..n {
        let prefix = format!("frame/{t}/");
        let mut l = problem.layout.clone();
        l.freeze_where(|name| !name.starts_with(&prefix) || user_frozen(name));
        let pairs = [t, t + 1].into_iter().filter(|&s| s >= 1 && s < n).collect();
        let triples = [t.wrapping_sub(1), t, t + 1]
            .into_iter()
            .filter(|&s| s >= 1 && s < n.saturating_sub(1))
            .collect();
        blocks.push((l, problem.scope_of(vec![t], pairs, triples)));
    }
    {
        let mut l = problem.layout.clone();
        l.freeze_where(|name| !(name == "skeleton" || name == "shape") || user_frozen(name));
        blocks.push((l, problem.scope_of((0..n).collect(), vec![], vec![]).with_cameras(problem.camera_rows())));
    }
    if cfg.refine_cameras && seq.cameras.len() > 1 {
        let mut l = problem.layout.clone();
        l.freeze_where(|name| !name.starts_with("camera/") || name == "camera/0" || user_frozen(name));
        blocks.push((l, problem.scope_of((0..n).collect(), vec![], vec![]).with_cameras(problem.camera_rows())));
    }

    let mut frame_iters = vec![0; n];
    let mut frame_stop = vec![StopReason::MaxIterations; n];
    let mut converged = false;
    let mut rounds = 0;
    while rounds < cfg.max_rounds {
        rounds += 1;
        let start = cost;
        for (k, (layout, scope)) in blocks.iter().enumerate() {
            if layout.active_indices().is_empty() {
                continue;
            }
            let view = Scoped {
                problem: &problem,
                scope,
            };
            let rep = optim::solve_lm(&view, layout, &x, &cfg.lm)?;
            log::debug!("block {k}: {} iterations, {:?}, cost {:.3} -> {:.3}", rep.iterations, rep.stop, rep.trace[0], rep.cost);
            if k < n {
                frame_iters[k] += rep.iterations;
                frame_stop[k] = rep.stop;
            }
            x = rep.x;
            cost = global_cost(&x)?;
            trace.push(cost);
        }
        log::debug!("round {rounds}: cost {cost:.6e}");
        if start - cost <= cfg.tol * start.max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }
    if cfg.joint_iters > 0 {
        let mut l = problem.layout.clone();
        l.freeze_where(|name| name == "camera/0" || !cfg.refine_cameras && name.starts_with("camera/") || user_frozen(name));
        let lm = LmConfig {
            max_iters: cfg.joint_iters,
            ..cfg.lm.clone()
        };
        let view = Scoped {
            problem: &problem,
            scope: &problem.scope,
        };
        let rep = optim::solve_lm(&view, &l, &x, &lm)?;
        log::debug!("joint: {} iterations, {:?}, cost {:.3} -> {:.3}", rep.iterations, rep.stop, rep.trace[0], rep.cost);
        converged = rep.stop != StopReason::MaxIterations && rep.stop != StopReason::Stalled;
        x = rep.x;
        cost = global_cost(&x)?;
        trace.push(cost);
    }

    let cameras = problem.cameras_at(&x);
    let mut frames = Vec::with_capacity(n);
    for t in 0..n {
        let params = problem.frame_params(&x, t)?;
        let (losses, residual_count) = problem.frame_breakdown(&x, t)?;
        let mut err_sum = 0.0;
        let mut err_n = 0usize;
        for (c, obs) in seq.frames[t].iter().enumerate() {
            let kept: Vec<Observation2D> = obs
                .iter()
                .filter(|o| !rejected.contains(&(t, c, o.id)))
                .cloned()
                .collect();
            for (_, e) in fit_single::reprojection_errors(rig, &params, &cameras[c], &kept)? {
                err_sum += e;
                err_n += 1;
            }
        }
        frames.push(FitResult {
            params,
            camera: None,
            total_cost: losses.total(),
            losses,
            trace: Vec::new(),
            converged,
            stop: frame_stop[t],
            iterations: frame_iters[t],
            dropped_keypoints: problem.frames[t].dropped,
            residual_count,
            mean_reprojection_px: if err_n > 0 { err_sum / err_n as f64 } else { 0.0 },
        });
    }
    let shared = frames[0].params.clone();
    Ok(MultiFitResult {
        skeleton: shared.skeleton,
        shape: shared.shape,
        cameras,
        losses: problem.breakdown(&x)?,
        total_cost: cost,
        trace,
        rounds,
        converged,
        triangulated: tri.map(|t| t.points.clone()).unwrap_or_default(),
        rejected_views: rejected.len(),
        failed_tracks: tri.map_or(0, |t| t.failed.len()),
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{self, Align};
    use crate::synth::{self, RenderConfig, SceneConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn exact_points(rig: &KinematicRig, params: &RigParams) -> Vec<TriangulatedPoint> {
        rig::forward_kinematics(rig, params)
            .unwrap()
            .positions
            .into_iter()
            .enumerate()
            .map(|(id, position)| TriangulatedPoint {
                id,
                position,
                inliers: vec![0, 1],
                residual: 0.0,
            })
            .collect()
    }

    #[test]
    fn smoothness_of_constant_and_linear_sequences() {
        let c = vec![vec![0.3, -0.1, 2.0]; 4];
        assert!(temporal_smoothness_residuals(&c, 0.5, 30.0).unwrap().iter().all(|r| *r == 0.0));
        let lin: Vec<Vec<f64>> = (0..5).map(|t| vec![0.1 * t as f64, -0.2 * t as f64]).collect();
        let r = temporal_smoothness_residuals(&lin, 1.0, 10.0).unwrap();
        for pair in r.chunks(2) {
            assert!((pair[0] - 1.0).abs() < 1e-12 && (pair[1] + 2.0).abs() < 1e-12);
        }
        assert!(temporal_smoothness_residuals(&lin[..1], 1.0, 10.0).is_err());
    }

    #[test]
    fn smoothness_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seq: Vec<Vec<f64>> = (0..6).map(|_| (0..7).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let (lambda, fps) = (0.04, 25.0);
        let r = temporal_smoothness_residuals(&seq, lambda, fps).unwrap();
        let mut k = 0;
        for t in 1..seq.len() {
            for i in 0..7 {
                let want = lambda.sqrt() * fps * (seq[t][i] - seq[t - 1][i]);
                assert!((r[k] - want).abs() < 1e-14);
                k += 1;
            }
        }
    }

    #[test]
    fn init_recovers_bone_lengths_and_rest_pose() {
        let rig = synth::make_default_rig(0);
        let gt = synth::sample_motion(&rig, 3, 0.25, 0.02, 11);
        let pts: Vec<_> = gt.iter().map(|p| exact_points(&rig, p)).collect();
        let (init, skel) = init_from_triangulation(&rig, &pts).unwrap();
        for b in 0..rig.bone_count() {
            let rel = (skel[b] - gt[0].skeleton[b]).abs() / gt[0].skeleton[b];
            assert!(rel < 0.01, "bone {b}: {rel}");
        }
        for (t, p) in init.iter().enumerate() {
            let a = rig::forward_kinematics(&rig, p).unwrap().positions;
            let b = rig::forward_kinematics(&rig, &gt[t]).unwrap().positions;
            // Directions are exact; only twist about single-child bones is free.
            assert!(metrics::mpjpe(&a, &b, Align::None).unwrap() < 1e-6);
        }

        let rest = RigParams::rest(&rig);
        let (init, _) = init_from_triangulation(&rig, &[exact_points(&rig, &rest)]).unwrap();
        for (j, w) in init[0].pose.iter().enumerate() {
            assert!(geom::norm(*w) < 0.05, "joint {j}: {w:?}");
        }
    }

    #[test]
    fn single_frame_init_uses_that_frame() {
        let rig = synth::make_default_rig(0);
        let gt = synth::sample_motion(&rig, 2, 0.25, 0.02, 5);
        let pts: Vec<_> = gt.iter().map(|p| exact_points(&rig, p)).collect();
        let (_, alone) = init_from_triangulation(&rig, &pts[1..]).unwrap();
        let ratio: Vec<f64> = (0..rig.bone_count())
            .map(|b| {
                let j = b + 1;
                let p = rig.parent(j).unwrap();
                geom::norm(geom::sub(pts[1][j].position, pts[1][p].position)) / rig.rest_bone_length(j)
            })
            .collect();
        for (a, b) in alone.iter().zip(&ratio) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_root_is_an_error() {
        let rig = synth::make_default_rig(0);
        let mut pts = exact_points(&rig, &RigParams::rest(&rig));
        pts.retain(|p| p.id != 0);
        assert!(matches!(
            init_from_triangulation(&rig, &[pts]),
            Err(Error::MissingKeypoint(_))
        ));
    }

    #[test]
    fn smoothing_keeps_linear_tracks() {
        let mk = |t: usize| TriangulatedPoint {
            id: 4,
            position: [t as f64, 2.0 * t as f64, 0.0],
            inliers: vec![0, 1],
            residual: 0.0,
        };
        let mut pts: Vec<Vec<_>> = (0..5).map(|t| vec![mk(t)]).collect();
        smooth_tracks(&mut pts, 3);
        for t in 0..5 {
            for k in 0..3 {
                assert!((pts[t][0].position[k] - mk(t).position[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn smoothing_averages_a_jittered_constant_track() {
        let mk = |z: f64| TriangulatedPoint {
            id: 4,
            position: [1.0, 1.0, z],
            inliers: vec![0, 1],
            residual: 0.0,
        };
        let z = [0.1, -0.1, 0.1, -0.1, 0.1];
        let mut pts: Vec<Vec<_>> = z.iter().map(|z| vec![mk(*z)]).collect();
        smooth_tracks(&mut pts, 3);
        // interior: mean of three, the linear term cancels by symmetry
        assert!((pts[2][0].position[2] - (-0.1 / 3.0)).abs() < 1e-12);
        // end: line through (0, 0.1) and (1, -0.1) evaluated at 0
        assert!((pts[0][0].position[2] - 0.1).abs() < 1e-12);
    }

    fn scene(seed: u64, cameras: usize, frames: usize, render: RenderConfig) -> synth::Scene {
        let rig = synth::make_default_rig(0);
        let cfg = SceneConfig {
            seed,
            cameras,
            frames,
            render,
            ..SceneConfig::default()
        };
        synth::make_scene(&rig, &cfg).unwrap()
    }

    fn sequence(s: &synth::Scene) -> MultiViewSequence {
        MultiViewSequence {
            cameras: s.cameras.clone(),
            frames: s.frames.clone(),
            fps: s.fps,
        }
    }

    #[test]
    fn noiseless_sequence_is_recovered() {
        let s = scene(1, 4, 5, RenderConfig::exact());
        let seq = sequence(&s);
        let res = fit_multi_view(&s.rig, &seq, None, &MultiFitConfig::default()).unwrap();
        for (t, f) in res.frames.iter().enumerate() {
            let a = rig::forward_kinematics(&s.rig, &f.params).unwrap().positions;
            let e = metrics::mpjpe(&a, &s.gt[t].joints, Align::None).unwrap();
            assert!(e < 2.0, "frame {t}: {e} mm");
            assert_eq!(f.params.skeleton, res.skeleton);
            assert_eq!(f.params.shape, res.shape);
        }
        for w in res.trace.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{w:?}");
        }
    }

    #[test]
    fn one_camera_one_frame_matches_single_view_objective() {
        let s = scene(2, 1, 1, RenderConfig::exact());
        let seq = sequence(&s);
        let init = synth::perturb_pose(&s.gt[0].params, 0.1, 2);
        let cfg = MultiFitConfig {
            lambda_kp3d: 0.0,
            lambda_smooth: Some(0.0),
            refine_cameras: false,
            ..MultiFitConfig::default()
        };
        let single_cfg = cfg.single_view();
        let problem = MultiViewProblem::new(&s.rig, &seq, &[init.clone()], None, &[], None, &cfg).unwrap();
        // same objective at arbitrary parameters
        let probe = synth::perturb_pose(&s.gt[0].params, 0.05, 9);
        let mut x = problem.initial_point();
        let enc = terms::encode_body(&probe);
        let d = BodyDims::of(&s.rig);
        x[problem.frame_off[0]..problem.frame_off[0] + 3 + 3 * d.joints].copy_from_slice(&enc[..3 + 3 * d.joints]);
        x[problem.shared_off..problem.shared_off + d.bones + d.shapes].copy_from_slice(&enc[d.skeleton().start..]);
        let multi = optim::half_squared_norm(&optim::evaluate(&problem, &x).unwrap());
        let single = optim::half_squared_norm(
            &fit_single::single_view_residuals(&s.rig, &probe, &init, &s.cameras[0], &s.frames[0][0], None, &single_cfg)
                .unwrap(),
        );
        assert!((multi - single).abs() <= 1e-9 * single.max(1.0), "{multi} vs {single}");

        let a = fit_multi_view_from(&s.rig, &seq, &[init.clone()], None, None, &cfg).unwrap();
        let at_solution = optim::half_squared_norm(
            &fit_single::single_view_residuals(&s.rig, &a.frames[0].params, &init, &s.cameras[0], &s.frames[0][0], None, &single_cfg)
                .unwrap(),
        );
        assert!((a.total_cost - at_solution).abs() <= 1e-9 * at_solution.max(1.0));
        assert!((a.frames[0].total_cost - at_solution).abs() <= 1e-9 * at_solution.max(1.0));
        assert!(a.total_cost < a.trace[0]);
    }

    #[test]
    fn block_jacobian_matches_dense() {
        let s = scene(4, 3, 3, RenderConfig::exact());
        let seq = sequence(&s);
        let cfg = MultiFitConfig {
            lambda_accel: 0.5,
            ..MultiFitConfig::default()
        };
        let init: Vec<RigParams> = s.gt.iter().map(|g| synth::perturb_pose(&g.params, 0.05, 1)).collect();
        let problem = MultiViewProblem::new(&s.rig, &seq, &init, None, &[], None, &cfg).unwrap();
        let x = problem.initial_point();
        let view = Scoped {
            problem: &problem,
            scope: &problem.scope,
        };
        // every other column, so groups see partial active sets
        let active: Vec<usize> = (0..x.len()).step_by(2).collect();
        let (r0, j0) = optim::jacobian_active(&view, &x, &active).unwrap();
        let (r1, j1) = view.linearize_active(&x, &active).unwrap();
        assert_eq!(r0, r1);
        assert_eq!(j0, j1);
    }

    #[test]
    fn rigid_change_of_world_frame_moves_the_solution_with_it() {
        let s = scene(5, 3, 2, RenderConfig::exact());
        let q = geom::rodrigues([0.3, -0.7, 0.2]);
        let d = [0.4, -0.1, 1.5];
        let mut moved = sequence(&s);
        for cam in &mut moved.cameras {
            // x_cam = R X + t with X = Qᵀ (X' − d)
            let r = geom::mat_mul(&cam.rotation, &geom::transpose(&q));
            cam.translation = geom::sub(cam.translation, geom::mat_vec(&r, d));
            cam.rotation = r;
        }
        // Cameras are given, so no extrinsic refinement. The parameter anchor
        // and the smoothness term difference root axis-angle coordinates,
        // which a world rotation does not preserve; both are off here.
        let cfg = MultiFitConfig {
            refine_cameras: false,
            lambda_anchor_param: 0.0,
            lambda_smooth: Some(0.0),
            lm: LmConfig {
                max_iters: 100,
                tol: 1e-14,
                ..LmConfig::default()
            },
            tol: 1e-9,
            ..MultiFitConfig::default()
        };
        let a = fit_multi_view(&s.rig, &sequence(&s), None, &cfg).unwrap();
        let b = fit_multi_view(&s.rig, &moved, None, &cfg).unwrap();
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            let ja = rig::forward_kinematics(&s.rig, &fa.params).unwrap().positions;
            let jb = rig::forward_kinematics(&s.rig, &fb.params).unwrap().positions;
            for (p, p2) in ja.iter().zip(&jb) {
                let expect = geom::add(geom::mat_vec(&q, *p), d);
                assert!(geom::norm(geom::sub(expect, *p2)) < 1e-6, "{expect:?} vs {p2:?}");
            }
        }
    }

    #[test]
    fn fitting_needs_two_cameras() {
        let s = scene(3, 1, 1, RenderConfig::exact());
        assert!(matches!(
            fit_multi_view(&s.rig, &sequence(&s), None, &MultiFitConfig::default()),
            Err(Error::Degenerate(_))
        ));
    }
}
