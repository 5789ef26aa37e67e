//! Single-image fitting: composite loss over 2D keypoints, anchors to the
//! initial estimate, pose prior, shape regularizer and joint limits.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, MIN_DEPTH};
use crate::dual::Real;
use crate::error::{Error, Result};
use crate::optim::{self, AdamConfig, LmConfig, ParamLayout, Residuals, SolveReport, StopReason};
use crate::priors::GmmPrior;
use crate::rig::{self, KinematicRig, RigParams};
use crate::terms::{self, BodyDims, Kp2d, LossBreakdown, RowMap, Term};

/// Fewest usable keypoints a fit accepts.
pub const MIN_VISIBLE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Observation2D {
    pub id: usize,
    pub u: f64,
    pub v: f64,
    #[serde(default = "one")]
    pub conf: f64,
    #[serde(default = "yes")]
    pub visible: bool,
    #[serde(default)]
    pub prompt: bool,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

impl Observation2D {
    pub fn new(id: usize, uv: [f64; 2]) -> Self {
        Self {
            id,
            u: uv[0],
            v: uv[1],
            conf: 1.0,
            visible: true,
            prompt: false,
        }
    }

    /// Whether the keypoint contributes to the loss.
    pub fn usable(&self) -> bool {
        self.visible && self.conf > 0.0
    }

    pub fn validate(&self, rig: &KinematicRig) -> Result<()> {
        if self.id >= rig.keypoint_count() {
            return Err(Error::MissingKeypoint(format!("keypoint id {}", self.id)));
        }
        if !(0.0..=1.0).contains(&self.conf) {
            return Err(Error::InvalidParam(format!(
                "keypoint {} confidence {} outside [0, 1]",
                self.id, self.conf
            )));
        }
        if !(self.u.is_finite() && self.v.is_finite()) {
            return Err(Error::InvalidParam(format!("keypoint {} has non-finite pixels", self.id)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Solver {
    Lm(LmConfig),
    Adam(AdamConfig),
}

impl Default for Solver {
    fn default() -> Self {
        Solver::Lm(LmConfig::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub lambda_kp2d: f64,
    pub lambda_anchor_param: f64,
    pub lambda_anchor_3d: f64,
    pub lambda_gmm: f64,
    pub lambda_shape_l2: f64,
    pub lambda_limits: f64,
    pub prompt_upweight: f64,
    /// Huber threshold in pixels; `None` for plain least squares.
    pub huber_delta: Option<f64>,
    pub solver: Solver,
    /// Also refine the camera extrinsics.
    pub optimize_camera: bool,
    /// Parameter blocks held fixed, by name (`translation`, `pose/<joint>`,
    /// `skeleton`, `shape`, `camera`).
    pub frozen_blocks: Vec<String>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lambda_kp2d: 1.0,
            lambda_anchor_param: 1e-2,
            lambda_anchor_3d: 1e-1,
            lambda_gmm: 1e-3,
            lambda_shape_l2: 1e-2,
            lambda_limits: 1.0,
            prompt_upweight: 10.0,
            huber_delta: Some(5.0),
            solver: Solver::default(),
            optimize_camera: false,
            frozen_blocks: Vec::new(),
        }
    }
}

impl FitConfig {
    /// Settings for local refinement around an existing solution: the
    /// population priors were already applied by the fit that produced it.
    pub fn refinement() -> Self {
        Self {
            lambda_gmm: 0.0,
            lambda_shape_l2: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("lambda_kp2d", self.lambda_kp2d),
            ("lambda_anchor_param", self.lambda_anchor_param),
            ("lambda_anchor_3d", self.lambda_anchor_3d),
            ("lambda_gmm", self.lambda_gmm),
            ("lambda_shape_l2", self.lambda_shape_l2),
            ("lambda_limits", self.lambda_limits),
        ];
        for (name, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidParam(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        if !(self.prompt_upweight >= 1.0 && self.prompt_upweight.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "prompt_upweight must be >= 1, got {}",
                self.prompt_upweight
            )));
        }
        if let Some(d) = self.huber_delta {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::InvalidParam(format!("huber_delta must be > 0, got {d}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct FitResult {
    pub params: RigParams,
    /// Refined camera, present when the camera was optimized.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub camera: Option<Camera>,
    pub losses: LossBreakdown,
    pub total_cost: f64,
    pub trace: Vec<f64>,
    pub converged: bool,
    pub stop: StopReason,
    pub iterations: usize,
    /// Keypoints dropped for lying behind the camera at the initial estimate.
    pub dropped_keypoints: usize,
    pub residual_count: usize,
    /// Mean unweighted pixel error over usable keypoints.
    pub mean_reprojection_px: f64,
}

#[derive(Clone, Debug)]
struct Scaled {
    id: usize,
    target: [f64; 2],
    scale: f64,
}

/// Composite single-view objective as a residual problem.
///
/// Parameters are the body vector in [`BodyDims`] order (log skeleton
/// scales), followed by six camera perturbation entries when the camera is
/// optimized.
pub struct SingleViewProblem<'a> {
    rig: &'a KinematicRig,
    camera: &'a Camera,
    prior: Option<&'a GmmPrior>,
    cfg: &'a FitConfig,
    dims: BodyDims,
    init: Vec<f64>,
    init_joints: Vec<[f64; 3]>,
    ids: Vec<usize>,
    kp: Vec<Kp2d>,
    rows: RowMap,
    layout: ParamLayout,
    dropped: usize,
}

impl<'a> SingleViewProblem<'a> {
    pub fn new(
        rig: &'a KinematicRig,
        init: &RigParams,
        camera: &'a Camera,
        observations: &[Observation2D],
        prior: Option<&'a GmmPrior>,
        cfg: &'a FitConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        camera.validate()?;
        init.validate(rig)?;
        let dims = BodyDims::of(rig);
        if let Some(p) = prior {
            if cfg.lambda_gmm > 0.0 && p.dim() != dims.prior_pose().len() {
                return Err(Error::Dimension {
                    what: "pose prior",
                    expected: dims.prior_pose().len(),
                    got: p.dim(),
                });
            }
        }
        for o in observations {
            o.validate(rig)?;
        }

        let usable: Vec<&Observation2D> = observations.iter().filter(|o| o.usable()).collect();
        let ids_all: Vec<usize> = usable.iter().map(|o| o.id).collect();
        let init_pts = rig::keypoint_positions(rig, init, &ids_all)?;
        let mut dropped = 0;
        let mut scaled = Vec::new();
        for (o, p) in usable.iter().zip(&init_pts) {
            let depth = camera.to_camera_frame(*p)[2];
            if depth <= MIN_DEPTH {
                dropped += 1;
                continue;
            }
            let mut scale = cfg.lambda_kp2d.sqrt() * o.conf;
            if o.prompt {
                scale *= cfg.prompt_upweight.sqrt();
            }
            scaled.push(Scaled {
                id: o.id,
                target: [o.u, o.v],
                scale,
            });
        }
        if dropped > 0 {
            log::warn!("dropped {dropped} keypoints behind the camera");
        }
        if scaled.len() < MIN_VISIBLE {
            return Err(Error::UnderConstrained {
                visible: scaled.len(),
                required: MIN_VISIBLE,
            });
        }

        let mut ids: Vec<usize> = scaled.iter().map(|s| s.id).collect();
        ids.sort_unstable();
        ids.dedup();
        let kp: Vec<Kp2d> = if cfg.lambda_kp2d > 0.0 {
            scaled
                .iter()
                .map(|s| Kp2d {
                    slot: ids.binary_search(&s.id).expect("id collected above"),
                    target: s.target,
                    scale: s.scale,
                })
                .collect()
        } else {
            Vec::new()
        };

        let mut rows = RowMap::default();
        rows.push(Term::Kp2d, 2 * kp.len());
        let on = |w: f64| w > 0.0;
        rows.push(Term::AnchorParam, if on(cfg.lambda_anchor_param) { dims.len() } else { 0 });
        rows.push(Term::Anchor3d, if on(cfg.lambda_anchor_3d) { 3 * dims.joints } else { 0 });
        rows.push(Term::Gmm, usize::from(prior.is_some() && on(cfg.lambda_gmm)));
        rows.push(Term::ShapeL2, if on(cfg.lambda_shape_l2) { dims.shapes } else { 0 });
        rows.push(Term::Limits, if on(cfg.lambda_limits) { 3 * dims.joints } else { 0 });

        let mut layout = terms::body_layout(rig);
        if cfg.optimize_camera {
            layout.push("camera", 6);
        }
        for name in &cfg.frozen_blocks {
            if name == "camera" && !cfg.optimize_camera {
                continue;
            }
            layout.set_frozen(name, true)?;
        }

        Ok(Self {
            rig,
            camera,
            prior,
            cfg,
            dims,
            init: terms::encode_body(init),
            init_joints: rig::forward_kinematics(rig, init)?.positions,
            ids,
            kp,
            rows,
            layout,
            dropped,
        })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    /// Starting point: the initial body vector, zero camera perturbation.
    pub fn initial_point(&self) -> Vec<f64> {
        let mut x = self.init.clone();
        if self.cfg.optimize_camera {
            x.extend([0.0; 6]);
        }
        x
    }

    pub fn dropped(&self) -> usize {
        self.dropped
    }

    pub fn breakdown(&self, r: &[f64]) -> LossBreakdown {
        self.rows.breakdown(r)
    }

    fn camera_at(&self, x: &[f64]) -> Option<Camera> {
        self.cfg.optimize_camera.then(|| {
            let d = &x[self.dims.len()..];
            self.camera.perturbed([d[0], d[1], d[2]], [d[3], d[4], d[5]])
        })
    }
}

impl Residuals for SingleViewProblem<'_> {
    fn num_params(&self) -> usize {
        self.layout.total()
    }

    fn num_residuals(&self) -> usize {
        self.rows.total()
    }

    fn eval<T: Real>(&self, x: &[T], out: &mut [T]) {
        let d = &self.dims;
        let (globals, pts) = terms::keypoints_generic(
            self.rig,
            &x[0..3],
            &x[d.pose()],
            &x[d.skeleton()],
            &x[d.shape()],
            &self.ids,
        );
        let cam_delta = self.cfg.optimize_camera.then(|| &x[d.len()..d.len() + 6]);
        let extr = terms::extrinsics(self.camera, cam_delta);
        let mut at = terms::write_kp2d(self.camera, &extr, &pts, &self.kp, self.cfg.huber_delta, out);
        let cfg = self.cfg;
        if cfg.lambda_anchor_param > 0.0 {
            at += terms::write_anchor(&x[..d.len()], &self.init, cfg.lambda_anchor_param.sqrt(), &mut out[at..]);
        }
        if cfg.lambda_anchor_3d > 0.0 {
            let joints: Vec<_> = globals.iter().map(|g| g.translation).collect();
            at += terms::write_points(&joints, &self.init_joints, cfg.lambda_anchor_3d.sqrt(), &mut out[at..]);
        }
        if let (Some(prior), true) = (self.prior, cfg.lambda_gmm > 0.0) {
            at += terms::write_gmm(prior, &x[d.prior_pose()], cfg.lambda_gmm, &mut out[at..]);
        }
        if cfg.lambda_shape_l2 > 0.0 {
            let s = cfg.lambda_shape_l2.sqrt();
            for (o, v) in out[at..].iter_mut().zip(&x[d.shape()]) {
                *o = *v * s;
            }
            at += d.shapes;
        }
        if cfg.lambda_limits > 0.0 {
            at += terms::write_limits(self.rig, &x[d.pose()], cfg.lambda_limits.sqrt(), &mut out[at..]);
        }
        debug_assert_eq!(at, self.rows.total());
    }
}

/// Residual vector of the composite loss at `params`, anchored to `init`.
pub fn single_view_residuals(
    rig: &KinematicRig,
    params: &RigParams,
    init: &RigParams,
    camera: &Camera,
    observations: &[Observation2D],
    prior: Option<&GmmPrior>,
    cfg: &FitConfig,
) -> Result<Vec<f64>> {
    params.validate(rig)?;
    let problem = SingleViewProblem::new(rig, init, camera, observations, prior, cfg)?;
    let mut x = terms::encode_body(params);
    if cfg.optimize_camera {
        x.extend([0.0; 6]);
    }
    optim::evaluate(&problem, &x)
}

/// Fits rig parameters to one view starting from `init`.
pub fn fit_single_view(
    rig: &KinematicRig,
    init: &RigParams,
    camera: &Camera,
    observations: &[Observation2D],
    prior: Option<&GmmPrior>,
    cfg: &FitConfig,
) -> Result<FitResult> {
    let problem = SingleViewProblem::new(rig, init, camera, observations, prior, cfg)?;
    let x0 = problem.initial_point();
    let report = match &cfg.solver {
        Solver::Lm(c) => optim::solve_lm(&problem, problem.layout(), &x0, c)?,
        Solver::Adam(c) => optim::solve_first_order(&problem, problem.layout(), &x0, c)?,
    };
    finish(rig, &problem, camera, observations, report)
}

fn finish(
    rig: &KinematicRig,
    problem: &SingleViewProblem,
    camera: &Camera,
    observations: &[Observation2D],
    report: SolveReport,
) -> Result<FitResult> {
    let params = terms::decode_body(rig, &report.x)?;
    params.validate(rig)?;
    let r = optim::evaluate(problem, &report.x)?;
    let losses = problem.breakdown(&r);
    let refined = problem.camera_at(&report.x);
    let cam = refined.as_ref().unwrap_or(camera);
    Ok(FitResult {
        mean_reprojection_px: mean_reprojection_error(rig, &params, cam, observations)?,
        params,
        camera: refined,
        total_cost: optim::half_squared_norm(&r),
        losses,
        trace: report.trace,
        converged: report.stop.converged(),
        stop: report.stop,
        iterations: report.iterations,
        dropped_keypoints: problem.dropped(),
        residual_count: r.len(),
    })
}

/// Pixel error per usable observation; keypoints behind the camera are skipped.
pub fn reprojection_errors(
    rig: &KinematicRig,
    params: &RigParams,
    camera: &Camera,
    observations: &[Observation2D],
) -> Result<Vec<(usize, f64)>> {
    let usable: Vec<&Observation2D> = observations.iter().filter(|o| o.usable()).collect();
    let ids: Vec<usize> = usable.iter().map(|o| o.id).collect();
    let pts = rig::keypoint_positions(rig, params, &ids)?;
    Ok(usable
        .iter()
        .zip(pts)
        .filter_map(|(o, p)| {
            camera
                .project(p)
                .ok()
                .map(|uv| (o.id, ((uv[0] - o.u).powi(2) + (uv[1] - o.v).powi(2)).sqrt()))
        })
        .collect())
}

pub fn mean_reprojection_error(
    rig: &KinematicRig,
    params: &RigParams,
    camera: &Camera,
    observations: &[Observation2D],
) -> Result<f64> {
    let e = reprojection_errors(rig, params, camera, observations)?;
    if e.is_empty() {
        return Ok(0.0);
    }
    Ok(e.iter().map(|(_, v)| v).sum::<f64>() / e.len() as f64)
}

/// A user-supplied pixel location for one keypoint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Prompt {
    pub id: usize,
    pub u: f64,
    pub v: f64,
}

/// Observations that hold the current solution in place: projections of
/// every joint that is neither prompted nor below a prompted keypoint.
pub fn refinement_context(
    rig: &KinematicRig,
    params: &RigParams,
    camera: &Camera,
    prompts: &[Prompt],
) -> Result<Vec<Observation2D>> {
    let nj = rig.joint_count();
    let mut roots = Vec::new();
    for p in prompts {
        if p.id >= rig.keypoint_count() {
            return Err(Error::MissingKeypoint(format!("keypoint id {}", p.id)));
        }
        roots.push(if p.id < nj {
            p.id
        } else {
            dominant_joint(rig, p.id - nj)
        });
    }
    let fk = rig::forward_kinematics(rig, params)?;
    let mut out = Vec::new();
    for (j, pos) in fk.positions.iter().enumerate() {
        if roots.iter().any(|&r| rig.is_descendant(j, r)) {
            continue;
        }
        if let Ok(uv) = camera.project(*pos) {
            out.push(Observation2D::new(j, uv));
        }
    }
    Ok(out)
}

fn dominant_joint(rig: &KinematicRig, vertex: usize) -> usize {
    rig.skinning()[vertex]
        .iter()
        .fold((0, f64::NEG_INFINITY), |best, &(j, w)| if w > best.1 { (j, w) } else { best })
        .0
}

/// Refits around `params` with prompt-flagged observations at the given
/// pixels and the current projections of unaffected joints as context.
pub fn prompted_refine(
    rig: &KinematicRig,
    params: &RigParams,
    camera: &Camera,
    prompts: &[Prompt],
    prior: Option<&GmmPrior>,
    cfg: &FitConfig,
) -> Result<FitResult> {
    let context = refinement_context(rig, params, camera, prompts)?;
    prompted_refine_with_context(rig, params, camera, prompts, &context, prior, cfg)
}

/// As [`prompted_refine`] with caller-supplied context observations; a
/// context entry for a prompted id is replaced by the prompt.
pub fn prompted_refine_with_context(
    rig: &KinematicRig,
    params: &RigParams,
    camera: &Camera,
    prompts: &[Prompt],
    context: &[Observation2D],
    prior: Option<&GmmPrior>,
    cfg: &FitConfig,
) -> Result<FitResult> {
    let mut obs: Vec<Observation2D> = context
        .iter()
        .filter(|o| prompts.iter().all(|p| p.id != o.id))
        .cloned()
        .collect();
    for p in prompts {
        obs.push(Observation2D {
            prompt: true,
            ..Observation2D::new(p.id, [p.u, p.v])
        });
    }
    fit_single_view(rig, params, camera, &obs, prior, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera;
    use crate::metrics;
    use crate::synth::{self, PoseSampler, RenderConfig};

    struct Setup {
        rig: KinematicRig,
        cam: Camera,
        gt: RigParams,
        obs: Vec<Observation2D>,
    }

    fn setup(seed: u64) -> Setup {
        let rig = synth::make_default_rig(0);
        let k = camera::intrinsics_from_fov(50.0, 1024, 1024).unwrap();
        let cam = camera::camera_ring(1, 3.5, [0.0, 0.9, 0.0], &k).remove(0);
        let mut gt = synth::sample_params(&rig, &PoseSampler::Natural { spread: 0.25 }, seed);
        gt.pose[0][1] = 0.3;
        let ids = synth::dense_keypoint_ids(&rig, 4);
        let (mut views, _) =
            synth::render_observations(&rig, &gt, std::slice::from_ref(&cam), &ids, &RenderConfig::exact(), seed).unwrap();
        Setup {
            rig,
            cam,
            gt,
            obs: views.remove(0),
        }
    }

    fn no_priors() -> FitConfig {
        FitConfig {
            lambda_gmm: 0.0,
            lambda_shape_l2: 0.0,
            ..FitConfig::default()
        }
    }

    #[test]
    fn exact_observations_give_zero_residuals() {
        let s = setup(1);
        let cfg = no_priors();
        let r = single_view_residuals(&s.rig, &s.gt, &s.gt, &s.cam, &s.obs, None, &cfg).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-9));
        let with_shape = FitConfig::default();
        let r = single_view_residuals(&s.rig, &s.gt, &s.gt, &s.cam, &s.obs, None, &with_shape).unwrap();
        let n = s.rig.shape_count() + 3 * s.rig.joint_count();
        let tail_start = r.len() - n;
        assert!(r[..tail_start].iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn invisible_keypoint_removes_one_pair() {
        let s = setup(2);
        let cfg = FitConfig::default();
        let full = single_view_residuals(&s.rig, &s.gt, &s.gt, &s.cam, &s.obs, None, &cfg).unwrap();
        let mut obs = s.obs.clone();
        obs[5].visible = false;
        let less = single_view_residuals(&s.rig, &s.gt, &s.gt, &s.cam, &obs, None, &cfg).unwrap();
        assert_eq!(full.len(), less.len() + 2);
    }

    #[test]
    fn prompt_upweight_scales_share() {
        let s = setup(3);
        let init = synth::perturb_pose(&s.gt, 0.05, 9);
        let cfg = FitConfig {
            prompt_upweight: 4.0,
            huber_delta: None,
            ..FitConfig::default()
        };
        let mut obs = s.obs.clone();
        let plain = single_view_residuals(&s.rig, &init, &s.gt, &s.cam, &obs, None, &cfg).unwrap();
        obs[7].prompt = true;
        let prompted = single_view_residuals(&s.rig, &init, &s.gt, &s.cam, &obs, None, &cfg).unwrap();
        let share = |r: &[f64]| r[14] * r[14] + r[15] * r[15];
        assert!((share(&prompted) - 4.0 * share(&plain)).abs() <= 1e-9 * share(&plain).max(1.0));
        for i in (0..plain.len()).filter(|i| *i != 14 && *i != 15) {
            assert_eq!(plain[i], prompted[i]);
        }
    }

    #[test]
    fn noisy_init_recovers_ground_truth() {
        // A single view leaves depth flips as local minima; this draw is
        // one of the majority that start in the right basin.
        let s = setup(5);
        let init = synth::perturb_pose(&s.gt, 0.1, 44);
        let res = fit_single_view(&s.rig, &init, &s.cam, &s.obs, None, &FitConfig::default()).unwrap();
        assert!(res.mean_reprojection_px < 0.5, "reprojection {}", res.mean_reprojection_px);
        let ids = &s.rig.keypoint_maps().eval24;
        let fit = rig::keypoint_positions(&s.rig, &res.params, ids).unwrap();
        let gt = rig::keypoint_positions(&s.rig, &s.gt, ids).unwrap();
        let pa = metrics::pa_mpjpe(&fit, &gt).unwrap();
        assert!(pa < 5.0, "PA-MPJPE {pa}");
        assert!(res.total_cost <= res.trace[0]);
        assert!((res.losses.total() - res.total_cost).abs() < 1e-9);
    }

    #[test]
    fn ground_truth_is_a_fixed_point() {
        let s = setup(5);
        let res = fit_single_view(&s.rig, &s.gt, &s.cam, &s.obs, None, &no_priors()).unwrap();
        let a = res.params.to_vector();
        let b = s.gt.to_vector();
        let drift = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(drift < 1e-6, "drift {drift}");
    }

    #[test]
    fn no_keypoint_weight_returns_init() {
        let s = setup(6);
        let init = synth::perturb_pose(&s.gt, 0.1, 6);
        let cfg = FitConfig {
            lambda_kp2d: 0.0,
            ..no_priors()
        };
        let res = fit_single_view(&s.rig, &init, &s.cam, &s.obs, None, &cfg).unwrap();
        assert_eq!(res.params, init);
    }

    #[test]
    fn scaling_one_weight_scales_its_term() {
        let s = setup(7);
        let init = synth::perturb_pose(&s.gt, 0.1, 7);
        let prior = synth::default_prior(&s.rig, 1, 400, 3).unwrap();
        let base = FitConfig::default();
        let problem = SingleViewProblem::new(&s.rig, &s.gt, &s.cam, &s.obs, Some(&prior), &base).unwrap();
        let x = terms::encode_body(&init);
        let b0 = problem.breakdown(&optim::evaluate(&problem, &x).unwrap());
        assert!(b0.gmm > 0.0 && b0.anchor_param > 0.0 && b0.kp2d > 0.0);
        let scaled = FitConfig {
            lambda_gmm: 3.0 * base.lambda_gmm,
            ..base.clone()
        };
        let problem = SingleViewProblem::new(&s.rig, &s.gt, &s.cam, &s.obs, Some(&prior), &scaled).unwrap();
        let b1 = problem.breakdown(&optim::evaluate(&problem, &x).unwrap());
        assert!((b1.gmm - 3.0 * b0.gmm).abs() < 1e-9 * b0.gmm.max(1.0));
        assert_eq!(b1.kp2d, b0.kp2d);
        assert_eq!(b1.anchor_param, b0.anchor_param);
        assert_eq!(b1.limits, b0.limits);
    }

    #[test]
    fn image_translation_equivariance() {
        let s = setup(8);
        let init = synth::perturb_pose(&s.gt, 0.1, 8);
        let cfg = no_priors();
        let a = fit_single_view(&s.rig, &init, &s.cam, &s.obs, None, &cfg).unwrap();
        let mut cam = s.cam.clone();
        cam.cx += 37.0;
        cam.cy -= 12.0;
        let obs: Vec<_> = s
            .obs
            .iter()
            .map(|o| Observation2D {
                u: o.u + 37.0,
                v: o.v - 12.0,
                ..o.clone()
            })
            .collect();
        let b = fit_single_view(&s.rig, &init, &cam, &obs, None, &cfg).unwrap();
        let d = a
            .params
            .to_vector()
            .iter()
            .zip(b.params.to_vector())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        // identical up to rounding in u - cx, amplified by the stopping tolerance
        assert!(d < 1e-6, "difference {d}");
    }

    #[test]
    fn too_few_keypoints_is_under_constrained() {
        let s = setup(9);
        let mut obs = s.obs.clone();
        for o in obs.iter_mut().skip(3) {
            o.visible = false;
        }
        match fit_single_view(&s.rig, &s.gt, &s.cam, &obs, None, &FitConfig::default()) {
            Err(Error::UnderConstrained { visible: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn behind_camera_keypoints_are_dropped() {
        let s = setup(10);
        let mut gt = s.gt.clone();
        // Move the body so the camera sits inside it: some keypoints fall behind.
        gt.root_translation = [0.0, 0.0, 3.4];
        let res = single_view_residuals(&s.rig, &gt, &gt, &s.cam, &s.obs, None, &FitConfig::default());
        let cfg = FitConfig::default();
        let problem = SingleViewProblem::new(&s.rig, &gt, &s.cam, &s.obs, None, &cfg).unwrap();
        assert!(problem.dropped() > 0);
        assert!(res.unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn prompt_at_current_location_is_fixed_point() {
        let s = setup(11);
        let uv = s.cam.project(rig::forward_kinematics(&s.rig, &s.gt).unwrap().positions[20]).unwrap();
        let prompts = [Prompt { id: 20, u: uv[0], v: uv[1] }];
        let res = prompted_refine(&s.rig, &s.gt, &s.cam, &prompts, None, &FitConfig::refinement()).unwrap();
        let d = res
            .params
            .to_vector()
            .iter()
            .zip(s.gt.to_vector())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(d < 1e-6, "drift {d}");
    }

    #[test]
    fn wrist_and_elbow_prompts_are_met() {
        let s = setup(12);
        let mut wrong = s.gt.clone();
        wrong.pose[16] = [wrong.pose[16][0] + 0.3, wrong.pose[16][1] - 0.2, wrong.pose[16][2] + 0.25];
        let gt_pos = rig::forward_kinematics(&s.rig, &s.gt).unwrap().positions;
        let target = |j: usize| s.cam.project(gt_pos[j]).unwrap();
        let prompts: Vec<Prompt> = [18, 20]
            .iter()
            .map(|&j| {
                let uv = target(j);
                Prompt { id: j, u: uv[0], v: uv[1] }
            })
            .collect();
        let res = prompted_refine(&s.rig, &wrong, &s.cam, &prompts, None, &FitConfig::refinement()).unwrap();
        let pos = rig::forward_kinematics(&s.rig, &res.params).unwrap().positions;
        for p in &prompts {
            let uv = s.cam.project(pos[p.id]).unwrap();
            let e = ((uv[0] - p.u).powi(2) + (uv[1] - p.v).powi(2)).sqrt();
            assert!(e < 2.0, "joint {} error {e}", p.id);
        }
    }
}
