//! Residual building blocks shared by the single- and multi-view fits.

use std::ops::Range;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::camera::{self, Camera};
use crate::dual::Real;
use crate::geom::{self, Mat3, Rigid, Vec3};
use crate::optim::{robustify, ParamLayout};
use crate::priors::{limit_excess, GmmPrior};
use crate::rig::KinematicRig;

/// Sizes of the flattened body parameter vector
/// `[translation 3, pose 3J, skeleton J-1, shape B]`. Inside residual
/// problems the skeleton entries are log-scales.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BodyDims {
    pub joints: usize,
    pub bones: usize,
    pub shapes: usize,
}

impl BodyDims {
    pub fn of(rig: &KinematicRig) -> Self {
        Self {
            joints: rig.joint_count(),
            bones: rig.bone_count(),
            shapes: rig.shape_count(),
        }
    }

    pub fn len(&self) -> usize {
        3 + 3 * self.joints + self.bones + self.shapes
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pose(&self) -> Range<usize> {
        3..3 + 3 * self.joints
    }

    /// Pose entries of every joint except the root.
    pub fn prior_pose(&self) -> Range<usize> {
        6..3 + 3 * self.joints
    }

    pub fn skeleton(&self) -> Range<usize> {
        let s = 3 + 3 * self.joints;
        s..s + self.bones
    }

    pub fn shape(&self) -> Range<usize> {
        let s = 3 + 3 * self.joints + self.bones;
        s..s + self.shapes
    }
}

/// Body vector with skeleton scales replaced by their logarithms, the form
/// the solvers work in so scales stay positive.
pub fn encode_body(params: &crate::rig::RigParams) -> Vec<f64> {
    let mut v = params.to_vector();
    let off = 3 + 3 * params.pose.len();
    for s in &mut v[off..off + params.skeleton.len()] {
        *s = s.ln();
    }
    v
}

/// Inverse of [`encode_body`].
pub fn decode_body(rig: &KinematicRig, x: &[f64]) -> crate::error::Result<crate::rig::RigParams> {
    let dims = BodyDims::of(rig);
    let mut v = x[..dims.len()].to_vec();
    for s in &mut v[dims.skeleton()] {
        *s = s.exp();
    }
    crate::rig::RigParams::from_vector(rig, &v)
}

/// Block name of a joint's rotation.
pub fn pose_block_name(rig: &KinematicRig, joint: usize) -> String {
    format!("pose/{}", rig.joints()[joint].name)
}

/// Appends `translation` and one pose block per joint, each name prefixed.
pub fn push_motion_blocks(layout: &mut ParamLayout, rig: &KinematicRig, prefix: &str) -> usize {
    let off = layout.push(format!("{prefix}translation"), 3);
    for j in 0..rig.joint_count() {
        layout.push(format!("{prefix}{}", pose_block_name(rig, j)), 3);
    }
    off
}

/// Layout matching [`BodyDims`] order.
pub fn body_layout(rig: &KinematicRig) -> ParamLayout {
    let mut layout = ParamLayout::new();
    push_motion_blocks(&mut layout, rig, "");
    layout.push("skeleton", rig.bone_count());
    layout.push("shape", rig.shape_count());
    layout
}

/// Global transforms and keypoint positions for generic parameter slices;
/// `log_skeleton` holds log-scales.
pub fn keypoints_generic<T: Real>(
    rig: &KinematicRig,
    translation: &[T],
    pose: &[T],
    log_skeleton: &[T],
    shape: &[T],
    ids: &[usize],
) -> (Vec<Rigid<T>>, Vec<Vec3<T>>) {
    let skeleton: Vec<T> = log_skeleton.iter().map(|s| s.exp()).collect();
    let globals = rig.fk_generic([translation[0], translation[1], translation[2]], pose, &skeleton);
    let nj = rig.joint_count();
    let pts = ids
        .iter()
        .map(|&id| {
            if id < nj {
                globals[id].translation
            } else {
                rig.skin_vertex_generic(&globals, shape, id - nj)
            }
        })
        .collect();
    (globals, pts)
}

/// Camera extrinsics as seen by a residual: fixed, or perturbed by six
/// parameters `[δω, δt]` in the camera frame.
pub fn extrinsics<T: Real>(cam: &Camera, delta: Option<&[T]>) -> (Mat3<T>, Vec3<T>) {
    match delta {
        Some(d) => camera::perturbed_extrinsics(cam, [d[0], d[1], d[2]], [d[3], d[4], d[5]]),
        None => (
            cam.rotation.map(|row| row.map(T::cst)),
            geom::lift3(cam.translation),
        ),
    }
}

/// One weighted 2D keypoint residual pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Kp2d {
    /// Index into the keypoint id list the problem evaluates.
    pub slot: usize,
    pub target: [f64; 2],
    /// Combined `√λ · conf · √upweight` factor.
    pub scale: f64,
}

/// Writes `scale · ρ(π(p) − target)` for every term; returns rows written.
pub fn write_kp2d<T: Real>(
    cam: &Camera,
    extr: &(Mat3<T>, Vec3<T>),
    points: &[Vec3<T>],
    terms: &[Kp2d],
    huber_delta: Option<f64>,
    out: &mut [T],
) -> usize {
    for (i, k) in terms.iter().enumerate() {
        let uv = camera::project_generic(cam, &extr.0, &extr.1, points[k.slot]);
        let mut e = [uv[0] - k.target[0], uv[1] - k.target[1]];
        if let Some(d) = huber_delta {
            robustify(&mut e, d);
        }
        out[2 * i] = e[0] * k.scale;
        out[2 * i + 1] = e[1] * k.scale;
    }
    2 * terms.len()
}

/// `√λ (x − x₀)` entrywise.
pub fn write_anchor<T: Real>(x: &[T], x0: &[f64], sqrt_lambda: f64, out: &mut [T]) -> usize {
    for ((o, xi), x0i) in out.iter_mut().zip(x).zip(x0) {
        *o = (*xi - *x0i) * sqrt_lambda;
    }
    x.len()
}

/// `√λ (p − p₀)` per 3D point.
pub fn write_points<T: Real>(p: &[Vec3<T>], p0: &[[f64; 3]], sqrt_lambda: f64, out: &mut [T]) -> usize {
    for (i, (a, b)) in p.iter().zip(p0).enumerate() {
        for k in 0..3 {
            out[3 * i + k] = (a[k] - b[k]) * sqrt_lambda;
        }
    }
    3 * p.len()
}

/// Single residual whose half-square is `λ (nll − bound)`.
pub fn write_gmm<T: Real>(prior: &GmmPrior, pose_tail: &[T], lambda: f64, out: &mut [T]) -> usize {
    let shifted = prior.nll_generic(pose_tail) - prior.nll_lower_bound();
    let shifted = if shifted.value() > 0.0 { shifted } else { shifted * 0.0 };
    out[0] = (shifted * (2.0 * lambda)).sqrt();
    1
}

/// `√λ · excess` per pose axis, so the half-square is `½ λ hinge²`.
pub fn write_limits<T: Real>(rig: &KinematicRig, pose: &[T], sqrt_lambda: f64, out: &mut [T]) -> usize {
    for (j, lim) in rig.joint_limits().iter().enumerate() {
        for a in 0..3 {
            out[3 * j + a] = limit_excess(pose[3 * j + a], lim[a][0], lim[a][1]) * sqrt_lambda;
        }
    }
    pose.len()
}

/// Per-term share of `½ Σ r²`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct LossBreakdown {
    pub kp2d: f64,
    pub kp3d: f64,
    pub anchor_param: f64,
    pub anchor_3d: f64,
    pub gmm: f64,
    pub shape_l2: f64,
    pub limits: f64,
    pub smooth: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.kp2d
            + self.kp3d
            + self.anchor_param
            + self.anchor_3d
            + self.gmm
            + self.shape_l2
            + self.limits
            + self.smooth
    }

    pub fn add(&mut self, other: &LossBreakdown) {
        self.kp2d += other.kp2d;
        self.kp3d += other.kp3d;
        self.anchor_param += other.anchor_param;
        self.anchor_3d += other.anchor_3d;
        self.gmm += other.gmm;
        self.shape_l2 += other.shape_l2;
        self.limits += other.limits;
        self.smooth += other.smooth;
    }
}

/// Term kinds, used to attribute residual rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Term {
    Kp2d,
    Kp3d,
    AnchorParam,
    Anchor3d,
    Gmm,
    ShapeL2,
    Limits,
    Smooth,
}

/// Residual row ranges tagged with their term.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RowMap {
    spans: Vec<(Term, Range<usize>)>,
    total: usize,
}

impl RowMap {
    pub fn push(&mut self, term: Term, rows: usize) -> Range<usize> {
        let r = self.total..self.total + rows;
        if rows > 0 {
            self.spans.push((term, r.clone()));
        }
        self.total += rows;
        r
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn breakdown(&self, r: &[f64]) -> LossBreakdown {
        let mut b = LossBreakdown::default();
        for (term, range) in &self.spans {
            let v = 0.5 * r[range.clone()].iter().map(|x| x * x).sum::<f64>();
            let slot = match term {
                Term::Kp2d => &mut b.kp2d,
                Term::Kp3d => &mut b.kp3d,
                Term::AnchorParam => &mut b.anchor_param,
                Term::Anchor3d => &mut b.anchor_3d,
                Term::Gmm => &mut b.gmm,
                Term::ShapeL2 => &mut b.shape_l2,
                Term::Limits => &mut b.limits,
                Term::Smooth => &mut b.smooth,
            };
            *slot += v;
        }
        b
    }
}
