//! Deterministic synthetic scenes: the default rig, parameter sampling and
//! keypoint rendering with noise, outliers and occlusion.
//!
//! Every generator takes an explicit seed and draws from ChaCha8, so a scene
//! is a pure function of its seed and configuration.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::camera::{self, Camera};
use crate::error::{Error, Result};
use crate::fit_single::Observation2D;
use crate::geom;
use crate::priors::{self, EmConfig, GmmPrior};
use crate::rig::{
    self, HandSubtree, HandSubtrees, Joint, KeypointMaps, KinematicRig, RigDefinition, RigParams,
};

const BODY: [(&str, Option<usize>, [f64; 3]); 24] = [
    ("pelvis", None, [0.0, 0.95, 0.0]),
    ("l_hip", Some(0), [0.09, -0.09, 0.0]),
    ("r_hip", Some(0), [-0.09, -0.09, 0.0]),
    ("spine1", Some(0), [0.0, 0.12, -0.02]),
    ("l_knee", Some(1), [0.01, -0.40, 0.01]),
    ("r_knee", Some(2), [-0.01, -0.40, 0.01]),
    ("spine2", Some(3), [0.0, 0.14, 0.01]),
    ("l_ankle", Some(4), [0.0, -0.40, -0.03]),
    ("r_ankle", Some(5), [0.0, -0.40, -0.03]),
    ("spine3", Some(6), [0.0, 0.06, 0.02]),
    ("l_foot", Some(7), [0.02, -0.05, 0.12]),
    ("r_foot", Some(8), [-0.02, -0.05, 0.12]),
    ("neck", Some(9), [0.0, 0.22, -0.03]),
    ("l_collar", Some(9), [0.07, 0.12, -0.01]),
    ("r_collar", Some(9), [-0.07, 0.12, -0.01]),
    ("head", Some(12), [0.0, 0.12, 0.04]),
    ("l_shoulder", Some(13), [0.12, 0.03, -0.01]),
    ("r_shoulder", Some(14), [-0.12, 0.03, -0.01]),
    ("l_elbow", Some(16), [0.26, 0.0, -0.02]),
    ("r_elbow", Some(17), [-0.26, 0.0, -0.02]),
    ("l_wrist", Some(18), [0.25, 0.0, 0.0]),
    ("r_wrist", Some(19), [-0.25, 0.0, 0.0]),
    ("l_hand", Some(20), [0.08, -0.01, 0.0]),
    ("r_hand", Some(21), [-0.08, -0.01, 0.0]),
];

/// Finger bases relative to the left wrist; segment lengths per phalanx.
const FINGERS: [(&str, [f64; 3]); 5] = [
    ("thumb", [0.025, -0.015, 0.03]),
    ("index", [0.09, 0.0, 0.025]),
    ("middle", [0.095, 0.0, 0.005]),
    ("ring", [0.09, 0.0, -0.015]),
    ("pinky", [0.08, 0.0, -0.035]),
];
const PHALANX: [f64; 3] = [0.035, 0.025, 0.02];

pub const LEFT_WRIST: usize = 20;
pub const RIGHT_WRIST: usize = 21;
pub const LEFT_ELBOW: usize = 18;
pub const RIGHT_ELBOW: usize = 19;
pub const PELVIS: usize = 0;

/// Capsule radius of the bone ending at `joint`.
fn bone_radius(name: &str) -> f64 {
    let base = name.trim_start_matches("l_").trim_start_matches("r_");
    match base {
        "hip" => 0.08,
        "knee" => 0.07,
        "ankle" => 0.05,
        "foot" => 0.04,
        "spine1" | "spine2" | "spine3" => 0.12,
        "neck" => 0.05,
        "head" => 0.09,
        "collar" => 0.05,
        "shoulder" => 0.05,
        "elbow" => 0.045,
        "wrist" => 0.04,
        "hand" => 0.03,
        _ => 0.009,
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Region {
    Leg,
    Torso,
    Arm,
    Head,
    Hand,
    Hips,
    Shoulders,
}

fn region(name: &str) -> Region {
    let base = name.trim_start_matches("l_").trim_start_matches("r_");
    match base {
        "knee" | "ankle" | "foot" => Region::Leg,
        "spine1" | "spine2" | "spine3" => Region::Torso,
        "elbow" | "wrist" => Region::Arm,
        "neck" | "head" => Region::Head,
        "hip" => Region::Hips,
        "collar" | "shoulder" => Region::Shoulders,
        _ => Region::Hand,
    }
}

struct SurfacePoint {
    pos: [f64; 3],
    normal: [f64; 3],
    /// Distance to the bone axis; radial shape fields scale with it so no
    /// coefficient in range turns a thin capsule inside out.
    radius: f64,
    weights: Vec<(usize, f64)>,
    region: Region,
}

fn ring_basis(d: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let a = if d[2].abs() < 0.9 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
    let u = geom::cross(d, a);
    let u = geom::scale(u, 1.0 / geom::norm(u));
    (u, geom::cross(d, u))
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    geom::scale(v, 1.0 / geom::norm(v))
}

/// Named landmark vertices appended after the capsule surface.
pub const LANDMARKS: [&str; 11] = [
    "nose", "l_eye", "r_eye", "l_ear", "r_ear", "l_big_toe", "l_small_toe", "l_heel", "r_big_toe",
    "r_small_toe", "r_heel",
];

/// The desk-scale rig: 24 body joints, 15 finger joints per hand, capsule
/// surface with 8-vertex rings, 10 shape fields. `seed` jitters the shape
/// field amplitudes only.
pub fn make_default_rig(seed: u64) -> KinematicRig {
    let mut joints: Vec<Joint> = BODY
        .iter()
        .map(|(n, p, o)| Joint {
            name: n.to_string(),
            parent: *p,
            rest_offset: *o,
        })
        .collect();
    for (side, wrist, mirror) in [("l", LEFT_WRIST, 1.0), ("r", RIGHT_WRIST, -1.0)] {
        for (finger, base) in FINGERS {
            let base = [mirror * base[0], base[1], base[2]];
            let dir = normalize(base);
            let mut parent = wrist;
            for (k, len) in PHALANX.iter().enumerate() {
                let offset = if k == 0 { base } else { geom::scale(dir, *len) };
                joints.push(Joint {
                    name: format!("{side}_{finger}{}", k + 1),
                    parent: Some(parent),
                    rest_offset: offset,
                });
                parent = joints.len() - 1;
            }
        }
    }
    let n = joints.len();
    let mut rest = vec![[0.0; 3]; n];
    let mut children = vec![Vec::new(); n];
    for j in 0..n {
        rest[j] = match joints[j].parent {
            None => joints[j].rest_offset,
            Some(p) => {
                children[p].push(j);
                geom::add(rest[p], joints[j].rest_offset)
            }
        };
    }

    let mut surface: Vec<SurfacePoint> = Vec::new();
    for j in 1..n {
        let p = joints[j].parent.expect("non-root");
        let d = normalize(joints[j].rest_offset);
        let (u, v) = ring_basis(d);
        let r = bone_radius(&joints[j].name);
        let reg = region(&joints[j].name);
        for (t, weights) in [
            (0.25, match joints[p].parent {
                Some(gp) => vec![(gp, 0.3), (p, 0.7)],
                None => vec![(p, 1.0)],
            }),
            (0.75, vec![(p, 0.7), (j, 0.3)]),
        ] {
            let c = geom::add(rest[p], geom::scale(joints[j].rest_offset, t));
            for k in 0..8 {
                let a = 2.0 * PI * k as f64 / 8.0;
                let nrm = geom::add(geom::scale(u, a.cos()), geom::scale(v, a.sin()));
                surface.push(SurfacePoint {
                    pos: geom::add(c, geom::scale(nrm, r)),
                    normal: nrm,
                    radius: r,
                    weights: weights.clone(),
                    region: reg,
                });
            }
        }
        if children[j].is_empty() {
            // End cap carried by the leaf itself so its rotation is observable.
            let tip = geom::add(rest[j], geom::scale(d, r.max(0.5 * geom::norm(joints[j].rest_offset))));
            for k in 0..4 {
                let a = 2.0 * PI * k as f64 / 4.0;
                let nrm = geom::add(geom::scale(u, a.cos()), geom::scale(v, a.sin()));
                surface.push(SurfacePoint {
                    pos: geom::add(tip, geom::scale(nrm, 0.6 * r)),
                    normal: nrm,
                    radius: 0.6 * r,
                    weights: vec![(j, 1.0)],
                    region: reg,
                });
            }
        }
    }
    let head = 15;
    let landmark_specs: [(usize, [f64; 3]); 11] = [
        (head, [0.0, 0.0, 0.1]),
        (head, [0.03, 0.03, 0.085]),
        (head, [-0.03, 0.03, 0.085]),
        (head, [0.075, 0.0, 0.0]),
        (head, [-0.075, 0.0, 0.0]),
        (10, [-0.015, -0.01, 0.05]),
        (10, [0.035, -0.01, 0.03]),
        (7, [0.0, -0.05, -0.05]),
        (11, [0.015, -0.01, 0.05]),
        (11, [-0.035, -0.01, 0.03]),
        (8, [0.0, -0.05, -0.05]),
    ];
    let landmark_base = surface.len();
    for (j, off) in landmark_specs {
        surface.push(SurfacePoint {
            pos: geom::add(rest[j], off),
            normal: normalize(off),
            radius: geom::norm(off),
            weights: vec![(j, 1.0)],
            region: Region::Head,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amp: Vec<f64> = (0..10).map(|_| 1.0 + 0.1 * rng.random_range(-1.0..1.0)).collect();
    let field = |b: usize, s: &SurfacePoint| -> [f64; 3] {
        let n = s.normal;
        let inside = |r: Region, k: f64| if s.region == r { geom::scale(n, k) } else { [0.0; 3] };
        let raw = match b {
            0 => geom::scale(n, 0.1 * s.radius),
            1 => inside(Region::Leg, 0.012),
            2 => inside(Region::Arm, 0.01),
            3 if s.region == Region::Torso => [0.015 * n[0], 0.0, 0.0],
            4 if s.region == Region::Torso => [0.0, 0.0, 0.015 * n[2]],
            5 if s.region == Region::Torso && n[2] > 0.0 => geom::scale(n, 0.02 * n[2]),
            6 => inside(Region::Head, 0.008),
            7 => inside(Region::Hand, 0.2 * s.radius),
            8 if s.region == Region::Hips && n[2] < 0.0 => geom::scale(n, -0.015 * n[2]),
            9 => inside(Region::Shoulders, 0.01),
            _ => [0.0; 3],
        };
        geom::scale(raw, amp[b])
    };
    let shape_basis = (0..10)
        .map(|b| surface.iter().map(|s| field(b, s)).collect())
        .collect();

    let joint_limits = joints
        .iter()
        .enumerate()
        .map(|(j, _)| {
            let l = if j == 0 {
                2.0 * PI
            } else if j >= 24 {
                1.6
            } else {
                2.8
            };
            [[-l, l]; 3]
        })
        .collect();

    let subtree = |root: usize| {
        let mut js: Vec<usize> = (0..n)
            .filter(|&j| {
                let mut cur = Some(j);
                while let Some(c) = cur {
                    if c == root {
                        return true;
                    }
                    cur = joints[c].parent;
                }
                false
            })
            .collect();
        js.sort_unstable();
        HandSubtree { root, joints: js }
    };
    let lm = |name: &str| n + landmark_base + LANDMARKS.iter().position(|l| *l == name).expect("landmark");
    let body17 = vec![
        lm("nose"),
        lm("l_eye"),
        lm("r_eye"),
        lm("l_ear"),
        lm("r_ear"),
        16,
        17,
        18,
        19,
        20,
        21,
        1,
        2,
        4,
        5,
        7,
        8,
    ];
    let feet6 = ["l_big_toe", "l_small_toe", "l_heel", "r_big_toe", "r_small_toe", "r_heel"]
        .iter()
        .map(|s| lm(s))
        .collect();

    let def = RigDefinition {
        hand_subtrees: HandSubtrees {
            left: subtree(LEFT_WRIST),
            right: subtree(RIGHT_WRIST),
        },
        keypoint_maps: KeypointMaps {
            eval24: (0..24).collect(),
            body17,
            feet6,
        },
        template_vertices: surface.iter().map(|s| s.pos).collect(),
        skinning: surface.iter().map(|s| s.weights.clone()).collect(),
        shape_basis,
        joint_limits,
        joints,
    };
    KinematicRig::new(def).expect("default rig is valid")
}

/// Keypoint ids for dense fitting: every joint, every `stride`-th capsule
/// vertex and all landmarks.
pub fn dense_keypoint_ids(rig: &KinematicRig, stride: usize) -> Vec<usize> {
    let nj = rig.joint_count();
    let nv = rig.vertex_count();
    let stride = stride.max(1);
    let landmark_start = nv.saturating_sub(LANDMARKS.len());
    let mut ids: Vec<usize> = (0..nj).collect();
    ids.extend((0..nv).filter(|v| v % stride == 0 || *v >= landmark_start).map(|v| nj + v));
    ids
}

/// How [`sample_params`] draws joint rotations.
#[derive(Clone, Debug)]
pub enum PoseSampler<'a> {
    /// Every axis uniform within its joint limits.
    UniformInLimits,
    /// Gaussian around the rest pose with per-axis standard deviation
    /// `spread` (fingers use `spread`, too); clamped to limits. Root yaw is
    /// uniform, root tilt small.
    Natural { spread: f64 },
    /// Non-root rotations from a fitted prior, clamped to limits.
    Prior(&'a GmmPrior),
}

/// Random rig parameters; skeleton scales in [0.9, 1.1], shape in [-2, 2].
pub fn sample_params(rig: &KinematicRig, sampler: &PoseSampler, seed: u64) -> RigParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = RigParams::rest(rig);
    let limits = rig.joint_limits();
    let clamp = |v: f64, j: usize, a: usize| v.clamp(limits[j][a][0], limits[j][a][1]);
    match sampler {
        PoseSampler::UniformInLimits => {
            for j in 0..rig.joint_count() {
                for a in 0..3 {
                    let [lo, hi] = limits[j][a];
                    p.pose[j][a] = if lo < hi { rng.random_range(lo..hi) } else { lo };
                }
            }
        }
        PoseSampler::Natural { spread } => {
            let normal = Normal::new(0.0, spread.max(0.0)).expect("finite spread");
            let tilt = Normal::new(0.0, 0.1).expect("valid");
            let yaw = rng.random_range(-PI..PI);
            p.pose[0] = [tilt.sample(&mut rng), yaw, tilt.sample(&mut rng)];
            for j in 1..rig.joint_count() {
                for a in 0..3 {
                    p.pose[j][a] = clamp(normal.sample(&mut rng), j, a);
                }
            }
        }
        PoseSampler::Prior(prior) => {
            let tail = prior.sample(&mut rng);
            let yaw = rng.random_range(-PI..PI);
            p.pose[0] = [0.0, yaw, 0.0];
            for j in 1..rig.joint_count() {
                for a in 0..3 {
                    p.pose[j][a] = clamp(tail.get(3 * (j - 1) + a).copied().unwrap_or(0.0), j, a);
                }
            }
        }
    }
    for s in &mut p.skeleton {
        *s = rng.random_range(0.9..1.1);
    }
    let unit = Normal::new(0.0, 1.0).expect("valid");
    for s in &mut p.shape {
        *s = Distribution::<f64>::sample(&unit, &mut rng).clamp(-2.0, 2.0);
    }
    p
}

/// Adds `N(0, σ²)` to every pose entry, leaving the rest untouched.
pub fn perturb_pose(params: &RigParams, sigma: f64, seed: u64) -> RigParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
    let mut out = params.clone();
    for r in &mut out.pose {
        for v in r.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    out
}

/// Pose-prior training set: non-root pose vectors of natural samples.
pub fn prior_training_set(rig: &KinematicRig, count: usize, spread: f64, seed: u64) -> Vec<Vec<f64>> {
    (0..count)
        .map(|i| {
            let p = sample_params(rig, &PoseSampler::Natural { spread }, seed.wrapping_add(i as u64));
            p.flat_pose()[3..].to_vec()
        })
        .collect()
}

/// The shipped prior: a `components`-way mixture fit by EM to natural poses.
pub fn default_prior(rig: &KinematicRig, components: usize, samples: usize, seed: u64) -> Result<GmmPrior> {
    let data = prior_training_set(rig, samples, 0.25, seed);
    let cfg = EmConfig {
        max_iters: 30,
        ..EmConfig::new(components, seed)
    };
    Ok(priors::fit_gmm_with(&data, &cfg)?.0)
}

/// Ground truth for one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct GtRecord {
    pub params: RigParams,
    pub joints: Vec<[f64; 3]>,
    pub vertices: Vec<[f64; 3]>,
}

impl GtRecord {
    pub fn new(rig: &KinematicRig, params: &RigParams) -> Result<Self> {
        Ok(Self {
            params: params.clone(),
            joints: rig::forward_kinematics(rig, params)?.positions,
            vertices: rig::skin_vertices(rig, params)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct RenderConfig {
    pub noise_px: f64,
    pub outlier_rate: f64,
    pub occlusion_rate: f64,
}

impl RenderConfig {
    pub fn exact() -> Self {
        Self {
            noise_px: 0.0,
            outlier_rate: 0.0,
            occlusion_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_px >= 0.0 && self.noise_px.is_finite()) {
            return Err(Error::InvalidParam(format!("noise must be >= 0, got {}", self.noise_px)));
        }
        for (name, r) in [("outlier rate", self.outlier_rate), ("occlusion rate", self.occlusion_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::InvalidParam(format!("{name} must lie in [0, 1], got {r}")));
            }
        }
        Ok(())
    }
}

/// Per-view observations of `ids`, plus the ground-truth record.
///
/// For each view and keypoint, in order: occlusion draw, noise draws, then
/// outlier draw. Keypoints behind a camera are invisible.
pub fn render_observations(
    rig: &KinematicRig,
    params: &RigParams,
    cameras: &[Camera],
    ids: &[usize],
    cfg: &RenderConfig,
    seed: u64,
) -> Result<(Vec<Vec<Observation2D>>, GtRecord)> {
    cfg.validate()?;
    let gt = GtRecord::new(rig, params)?;
    let pts = rig::keypoint_positions(rig, params, ids)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.noise_px).expect("validated");
    let views = cameras
        .iter()
        .map(|cam| {
            ids.iter()
                .zip(&pts)
                .map(|(&id, p)| {
                    let occluded = rng.random::<f64>() < cfg.occlusion_rate;
                    let (nu, nv): (f64, f64) = (noise.sample(&mut rng), noise.sample(&mut rng));
                    let outlier = rng.random::<f64>() < cfg.outlier_rate;
                    let (ou, ov): (f64, f64) = (rng.random(), rng.random());
                    match cam.project(*p) {
                        Ok(uv) => {
                            let (u, v) = if outlier {
                                (ou * cam.width as f64, ov * cam.height as f64)
                            } else {
                                (uv[0] + nu, uv[1] + nv)
                            };
                            Observation2D {
                                visible: !occluded,
                                ..Observation2D::new(id, [u, v])
                            }
                        }
                        Err(_) => Observation2D {
                            visible: false,
                            conf: 0.0,
                            ..Observation2D::new(id, [0.0, 0.0])
                        },
                    }
                })
                .collect()
        })
        .collect();
    Ok((views, gt))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SceneConfig {
    pub seed: u64,
    pub cameras: usize,
    pub frames: usize,
    pub render: RenderConfig,
    pub fps: f64,
    pub hfov_deg: f64,
    pub width: u32,
    pub height: u32,
    pub radius: f64,
    pub keypoint_stride: usize,
    pub pose_spread: f64,
    /// Per-frame speed scale of [`sample_motion`].
    pub motion_rate: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            cameras: 4,
            frames: 1,
            render: RenderConfig::exact(),
            fps: 30.0,
            hfov_deg: 50.0,
            width: 1024,
            height: 1024,
            radius: 3.5,
            keypoint_stride: 4,
            pose_spread: 0.25,
            motion_rate: 0.01,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cameras == 0 {
            return Err(Error::InvalidParam("need at least one camera".into()));
        }
        if self.frames == 0 {
            return Err(Error::InvalidParam("need at least one frame".into()));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::InvalidParam(format!("fps must be > 0, got {}", self.fps)));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::InvalidParam(format!("radius must be > 0, got {}", self.radius)));
        }
        if !(self.motion_rate >= 0.0 && self.motion_rate.is_finite()) {
            return Err(Error::InvalidParam(format!("motion_rate must be finite and >= 0, got {}", self.motion_rate)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidParam("image size must be nonzero".into()));
        }
        self.render.validate()
    }
}

/// A multi-view, multi-frame synthetic capture.
#[derive(Clone, Debug)]
pub struct Scene {
    pub rig: KinematicRig,
    pub cameras: Vec<Camera>,
    /// `frames[t][view]` observations.
    pub frames: Vec<Vec<Vec<Observation2D>>>,
    pub gt: Vec<GtRecord>,
    pub fps: f64,
    pub keypoint_ids: Vec<usize>,
}

/// Slow, smooth motion around a sampled base pose; skeleton and shape are
/// shared by every frame. Each pose axis moves at a constant rate, turned
/// around or slowed where needed so the whole track stays within limits.
/// `rate` is the standard deviation of each axis' speed in radians (and
/// root drift in meters) per frame.
pub fn sample_motion(rig: &KinematicRig, frames: usize, spread: f64, rate: f64, seed: u64) -> Vec<RigParams> {
    let base = sample_params(rig, &PoseSampler::Natural { spread }, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6f_7469_6f6e);
    let vel = Normal::new(0.0, rate.abs()).expect("finite rate");
    let nj = rig.joint_count();
    let limits = rig.joint_limits();
    let span = frames.saturating_sub(1).max(1) as f64;
    let rates: Vec<[f64; 3]> = (0..nj)
        .map(|j| {
            [0, 1, 2].map(|a| {
                let r: f64 = vel.sample(&mut rng);
                let [lo, hi] = limits[j][a];
                let x = base.pose[j][a];
                let (up, down) = ((hi - x).max(0.0), (x - lo).max(0.0));
                let room = if r >= 0.0 { up } else { down };
                let (sign, room) = if r.abs() * span <= room || room >= up.max(down) {
                    (r.signum(), room)
                } else {
                    (-r.signum(), up.max(down))
                };
                sign * r.abs().min(room / span)
            })
        })
        .collect();
    let drift = [vel.sample(&mut rng), 0.0, vel.sample(&mut rng)];
    (0..frames)
        .map(|t| {
            let tf = t as f64;
            let mut p = base.clone();
            for j in 0..nj {
                for a in 0..3 {
                    p.pose[j][a] = base.pose[j][a] + rates[j][a] * tf;
                }
            }
            for a in 0..3 {
                p.root_translation[a] += drift[a] * tf;
            }
            p
        })
        .collect()
}

/// Scene with a camera ring around the pelvis height.
pub fn make_scene(rig: &KinematicRig, cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let k = camera::intrinsics_from_fov(cfg.hfov_deg, cfg.width, cfg.height)?;
    let cameras = camera::camera_ring(cfg.cameras, cfg.radius, [0.0, 0.9, 0.0], &k);
    let motion = sample_motion(rig, cfg.frames, cfg.pose_spread, cfg.motion_rate, cfg.seed);
    let ids = dense_keypoint_ids(rig, cfg.keypoint_stride);
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut gt = Vec::with_capacity(cfg.frames);
    for (t, p) in motion.iter().enumerate() {
        let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(t as u64 + 1);
        let (views, record) = render_observations(rig, p, &cameras, &ids, &cfg.render, seed)?;
        frames.push(views);
        gt.push(record);
    }
    Ok(Scene {
        rig: rig.clone(),
        cameras,
        frames,
        gt,
        fps: cfg.fps,
        keypoint_ids: ids,
    })
}
