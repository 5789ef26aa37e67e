//! Kinematic rig with decoupled skeleton and surface shape.
//!
//! Joint positions depend only on pose, skeleton scales and root translation;
//! shape coefficients move surface vertices and nothing else.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::dual::Real;
use crate::error::{Error, Result};
use crate::geom::{self, Rigid, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
    /// Offset from the parent joint in the parent's frame, meters.
    pub rest_offset: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum Handedness {
    Left,
    Right,
}

impl std::str::FromStr for Handedness {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(Handedness::Left),
            "right" => Ok(Handedness::Right),
            other => Err(Error::Handedness(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct HandSubtree {
    /// Wrist joint the subtree hangs from.
    pub root: usize,
    /// All joints of the subtree, root included, ascending.
    pub joints: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct HandSubtrees {
    pub left: HandSubtree,
    pub right: HandSubtree,
}

impl HandSubtrees {
    pub fn get(&self, hand: Handedness) -> &HandSubtree {
        match hand {
            Handedness::Left => &self.left,
            Handedness::Right => &self.right,
        }
    }
}

/// Keypoint id lists used by evaluation. Ids below the joint count are joints,
/// the rest address template vertices (`id - joint_count`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct KeypointMaps {
    pub eval24: Vec<usize>,
    pub body17: Vec<usize>,
    pub feet6: Vec<usize>,
}

/// Serializable rig content. Use [`KinematicRig::new`] to validate it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct RigDefinition {
    pub joints: Vec<Joint>,
    pub template_vertices: Vec<[f64; 3]>,
    /// Per-vertex sparse `(joint, weight)` pairs.
    pub skinning: Vec<Vec<(usize, f64)>>,
    /// `shape_basis[b][v]` is the offset of vertex `v` for unit coefficient `b`.
    pub shape_basis: Vec<Vec<[f64; 3]>>,
    /// Per joint, per axis `[lo, hi]` in radians.
    pub joint_limits: Vec<[[f64; 2]; 3]>,
    pub hand_subtrees: HandSubtrees,
    pub keypoint_maps: KeypointMaps,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KinematicRig {
    def: RigDefinition,
    rest_positions: Vec<[f64; 3]>,
    children: Vec<Vec<usize>>,
}

impl KinematicRig {
    pub fn new(def: RigDefinition) -> Result<Self> {
        validate_definition(&def)?;
        let n = def.joints.len();
        let mut rest_positions = vec![[0.0; 3]; n];
        let mut children = vec![Vec::new(); n];
        for (j, joint) in def.joints.iter().enumerate() {
            match joint.parent {
                None => rest_positions[j] = joint.rest_offset,
                Some(p) => {
                    rest_positions[j] = geom::add(rest_positions[p], joint.rest_offset);
                    children[p].push(j);
                }
            }
        }
        Ok(Self {
            def,
            rest_positions,
            children,
        })
    }

    pub fn definition(&self) -> &RigDefinition {
        &self.def
    }

    pub fn joints(&self) -> &[Joint] {
        &self.def.joints
    }

    pub fn joint_count(&self) -> usize {
        self.def.joints.len()
    }

    pub fn bone_count(&self) -> usize {
        self.def.joints.len() - 1
    }

    pub fn vertex_count(&self) -> usize {
        self.def.template_vertices.len()
    }

    pub fn shape_count(&self) -> usize {
        self.def.shape_basis.len()
    }

    /// Joints plus template vertices.
    pub fn keypoint_count(&self) -> usize {
        self.joint_count() + self.vertex_count()
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.def.joints[joint].parent
    }

    pub fn children(&self, joint: usize) -> &[usize] {
        &self.children[joint]
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.def.joints.iter().position(|j| j.name == name)
    }

    pub fn rest_positions(&self) -> &[[f64; 3]] {
        &self.rest_positions
    }

    pub fn template_vertices(&self) -> &[[f64; 3]] {
        &self.def.template_vertices
    }

    pub fn skinning(&self) -> &[Vec<(usize, f64)>] {
        &self.def.skinning
    }

    pub fn shape_basis(&self) -> &[Vec<[f64; 3]>] {
        &self.def.shape_basis
    }

    pub fn joint_limits(&self) -> &[[[f64; 2]; 3]] {
        &self.def.joint_limits
    }

    pub fn hand_subtrees(&self) -> &HandSubtrees {
        &self.def.hand_subtrees
    }

    pub fn keypoint_maps(&self) -> &KeypointMaps {
        &self.def.keypoint_maps
    }

    /// Length of the bone ending at `joint` under unit scales.
    pub fn rest_bone_length(&self, joint: usize) -> f64 {
        geom::norm(self.def.joints[joint].rest_offset)
    }

    /// True when `joint` is `ancestor` or lies below it.
    pub fn is_descendant(&self, joint: usize, ancestor: usize) -> bool {
        let mut cur = Some(joint);
        while let Some(j) = cur {
            if j == ancestor {
                return true;
            }
            cur = self.parent(j);
        }
        false
    }

    /// Bone index of the bone ending at `joint` (the root has none).
    pub fn bone_of(&self, joint: usize) -> Option<usize> {
        (joint > 0).then(|| joint - 1)
    }

    /// Global joint transforms for flat parameter slices.
    ///
    /// `pose` holds 3 axis-angle values per joint, `skeleton` one scale per
    /// bone (bone `b` ends at joint `b + 1`).
    pub fn fk_generic<T: Real>(
        &self,
        translation: Vec3<T>,
        pose: &[T],
        skeleton: &[T],
    ) -> Vec<Rigid<T>> {
        let n = self.joint_count();
        let mut globals: Vec<Rigid<T>> = Vec::with_capacity(n);
        for (j, joint) in self.def.joints.iter().enumerate() {
            let rot = geom::rodrigues([pose[3 * j], pose[3 * j + 1], pose[3 * j + 2]]);
            match joint.parent {
                None => globals.push(Rigid {
                    rotation: rot,
                    translation: geom::add(translation, geom::lift3(joint.rest_offset)),
                }),
                Some(p) => {
                    let s = skeleton[j - 1];
                    let off = geom::scale(geom::lift3(joint.rest_offset), s);
                    let parent = &globals[p];
                    let g = Rigid {
                        rotation: geom::mat_mul(&parent.rotation, &rot),
                        translation: parent.apply(off),
                    };
                    globals.push(g);
                }
            }
        }
        globals
    }

    /// Posed position of template vertex `v` by linear blend skinning.
    ///
    /// Shape offsets are added in the rest frame before the bind inverse, so
    /// they are carried by each bone's rotation.
    pub fn skin_vertex_generic<T: Real>(
        &self,
        globals: &[Rigid<T>],
        shape: &[T],
        v: usize,
    ) -> Vec3<T> {
        let mut rest = geom::lift3::<T>(self.def.template_vertices[v]);
        for (b, field) in self.def.shape_basis.iter().enumerate() {
            let off = field[v];
            if off == [0.0; 3] {
                continue;
            }
            rest = geom::add(rest, geom::scale(geom::lift3(off), shape[b]));
        }
        let mut out = [T::zero(); 3];
        for &(k, w) in &self.def.skinning[v] {
            let local = geom::sub(rest, geom::lift3(self.rest_positions[k]));
            let posed = globals[k].apply(local);
            out = geom::add(out, geom::scale(posed, T::cst(w)));
        }
        out
    }
}

fn validate_definition(def: &RigDefinition) -> Result<()> {
    let bad = |m: String| Err(Error::InvalidRig(m));
    let n = def.joints.len();
    if n == 0 {
        return bad("rig has no joints".into());
    }
    for (j, joint) in def.joints.iter().enumerate() {
        match joint.parent {
            None if j != 0 => return bad(format!("joint {j} has no parent but is not the root")),
            Some(_) if j == 0 => return bad("joint 0 must be the root".into()),
            Some(p) if p >= j => {
                return bad(format!("joint {j} has parent {p}; parents must precede children"))
            }
            _ => {}
        }
        if joint.rest_offset.iter().any(|x| !x.is_finite()) {
            return bad(format!("joint {j} has a non-finite rest offset"));
        }
    }
    let nv = def.template_vertices.len();
    if def.skinning.len() != nv {
        return bad(format!(
            "{} skinning rows for {} vertices",
            def.skinning.len(),
            nv
        ));
    }
    for (v, row) in def.skinning.iter().enumerate() {
        let mut sum = 0.0;
        for &(k, w) in row {
            if k >= n {
                return bad(format!("vertex {v} skinned to unknown joint {k}"));
            }
            if !(w >= 0.0) {
                return bad(format!("vertex {v} has negative skinning weight"));
            }
            sum += w;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("vertex {v} skinning weights sum to {sum}"));
        }
    }
    for (b, field) in def.shape_basis.iter().enumerate() {
        if field.len() != nv {
            return bad(format!("shape basis {b} has {} offsets, expected {nv}", field.len()));
        }
    }
    if def.joint_limits.len() != n {
        return bad(format!("{} joint limit rows for {n} joints", def.joint_limits.len()));
    }
    for (j, lim) in def.joint_limits.iter().enumerate() {
        if lim.iter().any(|[lo, hi]| !(lo <= hi)) {
            return bad(format!("joint {j} has an empty limit interval"));
        }
    }
    let hands = &def.hand_subtrees;
    for tree in [&hands.left, &hands.right] {
        if !tree.joints.contains(&tree.root) {
            return bad("hand subtree does not contain its root".into());
        }
        for &j in &tree.joints {
            if j >= n {
                return bad(format!("hand subtree references joint {j}"));
            }
            if j != tree.root {
                match def.joints[j].parent {
                    Some(p) if tree.joints.contains(&p) => {}
                    _ => return bad(format!("hand subtree joint {j} is not connected to its root")),
                }
            }
        }
    }
    if hands.left.joints.iter().any(|j| hands.right.joints.contains(j)) {
        return bad("hand subtrees overlap".into());
    }
    let nk = n + nv;
    let maps = &def.keypoint_maps;
    for id in maps.eval24.iter().chain(&maps.body17).chain(&maps.feet6) {
        if *id >= nk {
            return bad(format!("keypoint map references unknown keypoint {id}"));
        }
    }
    Ok(())
}

/// Rig parameters: pose, root translation, skeleton scales and shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct RigParams {
    /// Axis-angle per joint, radians.
    pub pose: Vec<[f64; 3]>,
    pub root_translation: [f64; 3],
    /// One positive scale per bone.
    pub skeleton: Vec<f64>,
    pub shape: Vec<f64>,
}

impl RigParams {
    /// Rest pose, unit scales, zero shape and translation.
    pub fn rest(rig: &KinematicRig) -> Self {
        Self {
            pose: vec![[0.0; 3]; rig.joint_count()],
            root_translation: [0.0; 3],
            skeleton: vec![1.0; rig.bone_count()],
            shape: vec![0.0; rig.shape_count()],
        }
    }

    pub fn validate(&self, rig: &KinematicRig) -> Result<()> {
        let check = |what, expected, got| {
            if expected != got {
                Err(Error::Dimension {
                    what,
                    expected,
                    got,
                })
            } else {
                Ok(())
            }
        };
        check("pose", rig.joint_count(), self.pose.len())?;
        check("skeleton", rig.bone_count(), self.skeleton.len())?;
        check("shape", rig.shape_count(), self.shape.len())?;
        if let Some(b) = self.skeleton.iter().position(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "skeleton scale of bone {b} must be positive, got {}",
                self.skeleton[b]
            )));
        }
        let finite = self.pose.iter().flatten().all(|x| x.is_finite())
            && self.root_translation.iter().all(|x| x.is_finite())
            && self.shape.iter().all(|x| x.is_finite());
        if !finite {
            return Err(Error::InvalidParam("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn flat_pose(&self) -> Vec<f64> {
        self.pose.iter().flatten().copied().collect()
    }

    /// Flattened `[translation, pose, skeleton, shape]`.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(3 + 3 * self.pose.len() + self.skeleton.len() + self.shape.len());
        v.extend_from_slice(&self.root_translation);
        v.extend(self.pose.iter().flatten());
        v.extend_from_slice(&self.skeleton);
        v.extend_from_slice(&self.shape);
        v
    }

    pub fn from_vector(rig: &KinematicRig, v: &[f64]) -> Result<Self> {
        let (nj, nb, ns) = (rig.joint_count(), rig.bone_count(), rig.shape_count());
        let expected = 3 + 3 * nj + nb + ns;
        if v.len() != expected {
            return Err(Error::Dimension {
                what: "parameter vector",
                expected,
                got: v.len(),
            });
        }
        let pose = v[3..3 + 3 * nj]
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        Ok(Self {
            pose,
            root_translation: [v[0], v[1], v[2]],
            skeleton: v[3 + 3 * nj..3 + 3 * nj + nb].to_vec(),
            shape: v[3 + 3 * nj + nb..].to_vec(),
        })
    }
}

/// Global transforms and joint positions.
#[derive(Clone, Debug, PartialEq)]
pub struct FkResult {
    pub transforms: Vec<Rigid<f64>>,
    pub positions: Vec<[f64; 3]>,
}

pub fn forward_kinematics(rig: &KinematicRig, params: &RigParams) -> Result<FkResult> {
    params.validate(rig)?;
    let transforms = rig.fk_generic(
        params.root_translation,
        &params.flat_pose(),
        &params.skeleton,
    );
    let positions = transforms.iter().map(|g| g.translation).collect();
    Ok(FkResult {
        transforms,
        positions,
    })
}

pub fn skin_vertices(rig: &KinematicRig, params: &RigParams) -> Result<Vec<[f64; 3]>> {
    let fk = forward_kinematics(rig, params)?;
    Ok((0..rig.vertex_count())
        .map(|v| rig.skin_vertex_generic(&fk.transforms, &params.shape, v))
        .collect())
}

/// 3D positions of arbitrary keypoint ids (joints, then vertices).
pub fn keypoint_positions(
    rig: &KinematicRig,
    params: &RigParams,
    ids: &[usize],
) -> Result<Vec<[f64; 3]>> {
    let fk = forward_kinematics(rig, params)?;
    let nj = rig.joint_count();
    ids.iter()
        .map(|&id| {
            if id < nj {
                Ok(fk.positions[id])
            } else if id < rig.keypoint_count() {
                Ok(rig.skin_vertex_generic(&fk.transforms, &params.shape, id - nj))
            } else {
                Err(Error::MissingKeypoint(format!("keypoint id {id}")))
            }
        })
        .collect()
}

fn registered_subtree<'a>(rig: &'a KinematicRig, joints: &[usize]) -> Result<&'a HandSubtree> {
    let hands = rig.hand_subtrees();
    [&hands.left, &hands.right]
        .into_iter()
        .find(|t| t.joints == joints)
        .ok_or(Error::UnknownSubtree)
}

/// Pose rotations of a registered hand subtree, in subtree order.
pub fn extract_subtree_params(
    rig: &KinematicRig,
    params: &RigParams,
    subtree: &[usize],
) -> Result<Vec<[f64; 3]>> {
    params.validate(rig)?;
    let tree = registered_subtree(rig, subtree)?;
    Ok(tree.joints.iter().map(|&j| params.pose[j]).collect())
}

/// Inverse of [`extract_subtree_params`]: replaces only the subtree rotations.
pub fn write_subtree_params(
    rig: &KinematicRig,
    params: &RigParams,
    subtree: &[usize],
    values: &[[f64; 3]],
) -> Result<RigParams> {
    params.validate(rig)?;
    let tree = registered_subtree(rig, subtree)?;
    if values.len() != tree.joints.len() {
        return Err(Error::Dimension {
            what: "subtree pose",
            expected: tree.joints.len(),
            got: values.len(),
        });
    }
    let mut out = params.clone();
    for (&j, v) in tree.joints.iter().zip(values) {
        out.pose[j] = *v;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{mat_mul, mat_vec, rodrigues};

    /// Three-joint chain with one vertex per joint.
    pub(crate) fn chain_rig() -> KinematicRig {
        let joints = vec![
            Joint {
                name: "a".into(),
                parent: None,
                rest_offset: [0.0, 0.0, 0.0],
            },
            Joint {
                name: "b".into(),
                parent: Some(0),
                rest_offset: [0.0, 0.5, 0.0],
            },
            Joint {
                name: "c".into(),
                parent: Some(1),
                rest_offset: [0.3, 0.0, 0.1],
            },
        ];
        let template_vertices = vec![[0.1, 0.2, 0.0], [0.0, 0.7, 0.1], [0.35, 0.5, 0.1]];
        let skinning = vec![
            vec![(0, 1.0)],
            vec![(0, 0.25), (1, 0.75)],
            vec![(1, 0.4), (2, 0.6)],
        ];
        let shape_basis = vec![vec![[0.01, 0.0, 0.0], [0.0, 0.02, 0.0], [0.0, 0.0, 0.03]]];
        KinematicRig::new(RigDefinition {
            joints,
            template_vertices,
            skinning,
            shape_basis,
            joint_limits: vec![[[-2.8, 2.8]; 3]; 3],
            hand_subtrees: HandSubtrees {
                left: HandSubtree {
                    root: 1,
                    joints: vec![1],
                },
                right: HandSubtree {
                    root: 2,
                    joints: vec![2],
                },
            },
            keypoint_maps: KeypointMaps {
                eval24: vec![0, 1, 2],
                body17: vec![],
                feet6: vec![],
            },
        })
        .unwrap()
    }

    fn chain_params() -> RigParams {
        RigParams {
            pose: vec![[0.1, -0.4, 0.2], [0.7, 0.1, -0.3], [-0.2, 0.5, 0.9]],
            root_translation: [0.3, -0.1, 2.0],
            skeleton: vec![1.3, 0.8],
            shape: vec![0.5],
        }
    }

    #[test]
    fn identity_pose_gives_cumulative_offsets() {
        let rig = chain_rig();
        let fk = forward_kinematics(&rig, &RigParams::rest(&rig)).unwrap();
        assert_eq!(fk.positions[1], [0.0, 0.5, 0.0]);
        assert_eq!(fk.positions[2], [0.3, 0.5, 0.1]);
    }

    #[test]
    fn chain_matches_matrix_product_oracle() {
        let rig = chain_rig();
        let p = chain_params();
        let fk = forward_kinematics(&rig, &p).unwrap();
        // Brute force: p2 = T + R0 (s1 o1 + R1 (s2 o2))
        let r0 = rodrigues(p.pose[0]);
        let r1 = rodrigues(p.pose[1]);
        let o1 = [0.0, 0.5 * 1.3, 0.0];
        let o2 = [0.3 * 0.8, 0.0, 0.1 * 0.8];
        let inner = geom::add(o1, mat_vec(&r1, o2));
        let expect2 = geom::add(p.root_translation, mat_vec(&r0, inner));
        let expect1 = geom::add(p.root_translation, mat_vec(&r0, o1));
        for k in 0..3 {
            assert!((fk.positions[1][k] - expect1[k]).abs() < 1e-14);
            assert!((fk.positions[2][k] - expect2[k]).abs() < 1e-14);
        }
        let r2 = rodrigues(p.pose[2]);
        let expect_rot = mat_mul(&mat_mul(&r0, &r1), &r2);
        assert!(geom::rotation_angle_between(&expect_rot, &fk.transforms[2].rotation) < 1e-7);
    }

    #[test]
    fn doubling_scale_doubles_bone_only() {
        let rig = chain_rig();
        let mut p = chain_params();
        let before = forward_kinematics(&rig, &p).unwrap();
        p.skeleton[1] *= 2.0;
        let after = forward_kinematics(&rig, &p).unwrap();
        assert_eq!(before.positions[0], after.positions[0]);
        assert_eq!(before.positions[1], after.positions[1]);
        let l0 = geom::norm(geom::sub(before.positions[2], before.positions[1]));
        let l1 = geom::norm(geom::sub(after.positions[2], after.positions[1]));
        assert!((l1 - 2.0 * l0).abs() < 1e-14);
    }

    #[test]
    fn lbs_matches_direct_summation() {
        let rig = chain_rig();
        let p = chain_params();
        let fk = forward_kinematics(&rig, &p).unwrap();
        let verts = skin_vertices(&rig, &p).unwrap();
        let rest = rig.rest_positions();
        for v in 0..3 {
            let mut base = rig.template_vertices()[v];
            for k in 0..3 {
                base[k] += p.shape[0] * rig.shape_basis()[0][v][k];
            }
            let mut acc = [0.0; 3];
            for &(k, w) in &rig.skinning()[v] {
                let g = &fk.transforms[k];
                let local = geom::sub(base, rest[k]);
                let x = geom::add(mat_vec(&g.rotation, local), g.translation);
                for c in 0..3 {
                    acc[c] += w * x[c];
                }
            }
            for c in 0..3 {
                assert!((acc[c] - verts[v][c]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn rest_vertices_are_template() {
        let rig = chain_rig();
        let verts = skin_vertices(&rig, &RigParams::rest(&rig)).unwrap();
        assert_eq!(verts, rig.template_vertices());
    }

    #[test]
    fn single_weight_vertex_follows_joint() {
        let rig = chain_rig();
        let p = chain_params();
        let fk = forward_kinematics(&rig, &p).unwrap();
        let v0 = skin_vertices(&rig, &p).unwrap()[0];
        let mut base = rig.template_vertices()[0];
        base[0] += 0.5 * 0.01;
        let expect = fk.transforms[0].apply(base);
        for c in 0..3 {
            assert!((v0[c] - expect[c]).abs() < 1e-15);
        }
    }

    #[test]
    fn dimension_and_scale_errors() {
        let rig = chain_rig();
        let mut p = chain_params();
        p.skeleton[0] = 0.0;
        assert!(matches!(forward_kinematics(&rig, &p), Err(Error::InvalidParam(_))));
        let mut p = chain_params();
        p.pose.pop();
        assert!(matches!(forward_kinematics(&rig, &p), Err(Error::Dimension { .. })));
    }

    #[test]
    fn subtree_round_trip_and_registration() {
        let rig = chain_rig();
        let p = chain_params();
        let vals = extract_subtree_params(&rig, &p, &[1]).unwrap();
        assert_eq!(write_subtree_params(&rig, &p, &[1], &vals).unwrap(), p);
        let zeroed = write_subtree_params(&rig, &p, &[1], &[[0.0; 3]]).unwrap();
        assert_eq!(zeroed.pose[0], p.pose[0]);
        assert_eq!(zeroed.pose[2], p.pose[2]);
        assert!(matches!(
            extract_subtree_params(&rig, &p, &[0, 1]),
            Err(Error::UnknownSubtree)
        ));
    }

    #[test]
    fn rejects_bad_weights_and_ordering() {
        let mut def = chain_rig().definition().clone();
        def.skinning[1] = vec![(0, 0.5), (1, 0.6)];
        assert!(KinematicRig::new(def).is_err());
        let mut def = chain_rig().definition().clone();
        def.joints[1].parent = Some(2);
        assert!(KinematicRig::new(def).is_err());
    }
}
