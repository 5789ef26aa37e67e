//! Composing a hand solution into a body solution.
//!
//! A hand model predicts the local rotations of one hand subtree plus the
//! wrist location in the image. Writing the rotations into the body is the
//! naive merge; the wrist/elbow prompted refinement then moves the arm so
//! the wrist lands where the hand model put it.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::fit_single::{self, FitConfig, FitResult, Prompt};
use crate::priors::GmmPrior;
use crate::rig::{self, Handedness, KinematicRig, RigParams};
use crate::terms::pose_block_name;

pub const DEFAULT_GATE_THRESHOLD: f64 = 0.5;

/// Replaces the rotations of one hand subtree (wrist included, ascending
/// joint order) and leaves every other block untouched.
pub fn merge_hand_into_body(
    body: &RigParams,
    hand_local_pose: &[[f64; 3]],
    handedness: Handedness,
    rig: &KinematicRig,
) -> Result<RigParams> {
    let tree = rig.hand_subtrees().get(handedness);
    rig::write_subtree_params(rig, body, &tree.joints, hand_local_pose)
}

/// Accept a hand solution iff its confidence reaches the threshold. NaN
/// confidences are rejected.
pub fn hand_gate(confidence: f64, threshold: f64) -> bool {
    confidence >= threshold
}

/// Output of a hand model for one hand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct HandSolution {
    pub hand: Handedness,
    /// Local rotations of the hand subtree, ascending joint order.
    pub local_pose: Vec<[f64; 3]>,
    /// Wrist location predicted by the hand model, pixels.
    pub wrist_px: [f64; 2],
    pub confidence: f64,
}

/// One hand's prompt pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct HandPrompt {
    pub hand: Handedness,
    pub wrist_px: [f64; 2],
    pub elbow_px: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default)]
pub struct MergeConfig {
    pub gate_threshold: f64,
    /// Refine the hands one after the other instead of in a single solve.
    pub sequential: bool,
    pub fit: FitConfig,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            gate_threshold: DEFAULT_GATE_THRESHOLD,
            sequential: false,
            fit: FitConfig::refinement(),
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gate_threshold) {
            return Err(Error::InvalidParam(format!(
                "gate_threshold must lie in [0, 1], got {}",
                self.gate_threshold
            )));
        }
        self.fit.validate()
    }
}

/// Elbow joint of a hand: the parent of its wrist.
pub fn elbow_joint(rig: &KinematicRig, hand: Handedness) -> Result<usize> {
    let wrist = rig.hand_subtrees().get(hand).root;
    rig.parent(wrist)
        .ok_or_else(|| Error::MissingKeypoint(format!("wrist {wrist} has no parent joint")))
}

/// Projection of a body joint.
pub fn projected_joint(rig: &KinematicRig, params: &RigParams, camera: &Camera, joint: usize) -> Result<[f64; 2]> {
    let p = rig::keypoint_positions(rig, params, &[joint])?;
    camera.project(p[0])
}

/// Prompt pair for one hand, with the elbow at the body's own projection.
pub fn hand_prompt(
    rig: &KinematicRig,
    body: &RigParams,
    camera: &Camera,
    hand: Handedness,
    wrist_px: [f64; 2],
) -> Result<HandPrompt> {
    let elbow = elbow_joint(rig, hand)?;
    Ok(HandPrompt {
        hand,
        wrist_px,
        elbow_px: projected_joint(rig, body, camera, elbow)?,
    })
}

fn frozen_subtree_blocks(rig: &KinematicRig, hands: &[Handedness], cfg: &FitConfig) -> FitConfig {
    let mut cfg = cfg.clone();
    for &h in hands {
        for &j in &rig.hand_subtrees().get(h).joints {
            let name = pose_block_name(rig, j);
            if !cfg.frozen_blocks.contains(&name) {
                cfg.frozen_blocks.push(name);
            }
        }
    }
    cfg
}

fn prompts_for(rig: &KinematicRig, p: &HandPrompt) -> Result<[Prompt; 2]> {
    let wrist = rig.hand_subtrees().get(p.hand).root;
    let elbow = elbow_joint(rig, p.hand)?;
    Ok([
        Prompt {
            id: wrist,
            u: p.wrist_px[0],
            v: p.wrist_px[1],
        },
        Prompt {
            id: elbow,
            u: p.elbow_px[0],
            v: p.elbow_px[1],
        },
    ])
}

/// Prompted refinement with the wrist and elbow of one hand; the hand
/// subtree's rotations stay fixed.
pub fn prompted_wrist_elbow_refine(
    rig: &KinematicRig,
    merged: &RigParams,
    camera: &Camera,
    prompt: &HandPrompt,
    prior: Option<&GmmPrior>,
    cfg: &FitConfig,
) -> Result<FitResult> {
    let prompts = prompts_for(rig, prompt)?;
    let cfg = frozen_subtree_blocks(rig, &[prompt.hand], cfg);
    fit_single::prompted_refine(rig, merged, camera, &prompts, prior, &cfg)
}

/// Refines several hands, either in one solve with all prompts or one hand
/// at a time. In sequential mode the last result is returned, with the
/// iteration counts of all passes summed.
pub fn refine_hands(
    rig: &KinematicRig,
    merged: &RigParams,
    camera: &Camera,
    prompts: &[HandPrompt],
    prior: Option<&GmmPrior>,
    cfg: &MergeConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(Error::InvalidParam("no hand prompts".into()));
    }
    for (i, a) in prompts.iter().enumerate() {
        if prompts[..i].iter().any(|b| b.hand == a.hand) {
            return Err(Error::InvalidParam(format!("{:?} hand prompted twice", a.hand)));
        }
    }
    // Every subtree stays frozen in every pass so sequential mode cannot
    // disturb a hand that was already placed.
    let hands: Vec<Handedness> = prompts.iter().map(|p| p.hand).collect();
    let fit = frozen_subtree_blocks(rig, &hands, &cfg.fit);
    if !cfg.sequential {
        let mut all = Vec::new();
        for p in prompts {
            all.extend(prompts_for(rig, p)?);
        }
        return fit_single::prompted_refine(rig, merged, camera, &all, prior, &fit);
    }
    let mut current = merged.clone();
    let mut last: Option<FitResult> = None;
    let mut iterations = 0;
    for p in prompts {
        let r = fit_single::prompted_refine(rig, &current, camera, &prompts_for(rig, p)?, prior, &fit)?;
        iterations += r.iterations;
        current = r.params.clone();
        last = Some(r);
    }
    let mut out = last.expect("at least one prompt");
    out.iterations = iterations;
    Ok(out)
}

/// Result of gating, merging and refining a set of hand solutions.
#[derive(Clone, Debug, Serialize, Deserialize, JsonSchema)]
pub struct Integration {
    pub params: RigParams,
    pub accepted: Vec<Handedness>,
    pub rejected: Vec<Handedness>,
    /// Parameters after the naive merge, before refinement.
    pub merged: RigParams,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub refinement: Option<FitResult>,
}

/// Full-body composition: gate each hand, merge the accepted ones and
/// prompt the body with their wrists and its own elbows.
pub fn integrate_hands(
    rig: &KinematicRig,
    body: &RigParams,
    camera: &Camera,
    hands: &[HandSolution],
    prior: Option<&GmmPrior>,
    cfg: &MergeConfig,
) -> Result<Integration> {
    cfg.validate()?;
    let mut merged = body.clone();
    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    let mut prompts = Vec::new();
    for h in hands {
        if !hand_gate(h.confidence, cfg.gate_threshold) {
            rejected.push(h.hand);
            continue;
        }
        merged = merge_hand_into_body(&merged, &h.local_pose, h.hand, rig)?;
        prompts.push(hand_prompt(rig, body, camera, h.hand, h.wrist_px)?);
        accepted.push(h.hand);
    }
    let refinement = if prompts.is_empty() {
        None
    } else {
        Some(refine_hands(rig, &merged, camera, &prompts, prior, cfg)?)
    };
    Ok(Integration {
        params: refinement.as_ref().map_or_else(|| merged.clone(), |r| r.params.clone()),
        accepted,
        rejected,
        merged,
        refinement,
    })
}
