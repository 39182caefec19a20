//! Articulated body model: kinematic tree, forward kinematics, capsule mesh
//! and linear blend skinning.

mod kinematics;
mod mesh;
pub mod rotation;

pub use kinematics::{
    fk_backward, fk_forward, forward_kinematics, shaped_offsets, shaped_offsets_backward,
    shaped_offsets_into, BodyState,
};
pub use mesh::{build_template, export_obj, lbs, rasterize_silhouette, regress_joints, MeshTemplate};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SHAPE_DIM: usize = 10;

#[derive(Debug, Error)]
pub enum BodyError {
    #[error("invalid kinematic tree: {0}")]
    InvalidTree(String),
    #[error("expected {expected} values for {what}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid mesh configuration: {0}")]
    MeshConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Semantic role of a joint. Metrics and datagen look joints up by role so
/// that both tree layouts work.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointRole {
    Pelvis,
    Spine,
    Spine2,
    Chest,
    Neck,
    Head,
    LeftHip,
    LeftKnee,
    LeftAnkle,
    LeftFoot,
    RightHip,
    RightKnee,
    RightAnkle,
    RightFoot,
    LeftCollar,
    LeftShoulder,
    LeftElbow,
    LeftWrist,
    LeftHand,
    RightCollar,
    RightShoulder,
    RightElbow,
    RightWrist,
    RightHand,
}

impl JointRole {
    pub fn name(self) -> &'static str {
        match self {
            JointRole::Pelvis => "pelvis",
            JointRole::Spine => "spine",
            JointRole::Spine2 => "spine2",
            JointRole::Chest => "chest",
            JointRole::Neck => "neck",
            JointRole::Head => "head",
            JointRole::LeftHip => "left_hip",
            JointRole::LeftKnee => "left_knee",
            JointRole::LeftAnkle => "left_ankle",
            JointRole::LeftFoot => "left_foot",
            JointRole::RightHip => "right_hip",
            JointRole::RightKnee => "right_knee",
            JointRole::RightAnkle => "right_ankle",
            JointRole::RightFoot => "right_foot",
            JointRole::LeftCollar => "left_collar",
            JointRole::LeftShoulder => "left_shoulder",
            JointRole::LeftElbow => "left_elbow",
            JointRole::LeftWrist => "left_wrist",
            JointRole::LeftHand => "left_hand",
            JointRole::RightCollar => "right_collar",
            JointRole::RightShoulder => "right_shoulder",
            JointRole::RightElbow => "right_elbow",
            JointRole::RightWrist => "right_wrist",
            JointRole::RightHand => "right_hand",
        }
    }
}

/// Parent-indexed joint hierarchy with rest offsets and a linear bone-length
/// shape basis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KinematicTree {
    parents: Vec<usize>,
    rest_offsets: Vec<[f64; 3]>,
    shape_basis: Vec<[f64; SHAPE_DIM]>,
    roles: Vec<JointRole>,
    /// Capsule radius of the bone ending at each joint (meters).
    bone_radius: Vec<f64>,
}

impl KinematicTree {
    pub fn new(
        parents: Vec<usize>,
        rest_offsets: Vec<[f64; 3]>,
        shape_basis: Vec<[f64; SHAPE_DIM]>,
        roles: Vec<JointRole>,
        bone_radius: Vec<f64>,
    ) -> Result<Self, BodyError> {
        let j = parents.len();
        if j == 0 {
            return Err(BodyError::InvalidTree("no joints".into()));
        }
        if rest_offsets.len() != j || shape_basis.len() != j || roles.len() != j || bone_radius.len() != j {
            return Err(BodyError::InvalidTree("per-joint arrays differ in length".into()));
        }
        if parents[0] != 0 {
            return Err(BodyError::InvalidTree("root must be its own parent".into()));
        }
        for (idx, &p) in parents.iter().enumerate().skip(1) {
            if p >= idx {
                return Err(BodyError::InvalidTree(format!(
                    "joint {idx} has parent {p}; parents must precede children"
                )));
            }
            let o = rest_offsets[idx];
            if !o.iter().all(|v| v.is_finite()) || o.iter().all(|v| *v == 0.0) {
                return Err(BodyError::InvalidTree(format!(
                    "joint {idx} needs a finite nonzero rest offset"
                )));
            }
        }
        Ok(Self {
            parents,
            rest_offsets,
            shape_basis,
            roles,
            bone_radius,
        })
    }

    /// 17-joint layout: pelvis, spine, chest, neck, head and the four limbs.
    ///
    /// Y points up, +Z is the direction the body faces, +X is the body's left.
    pub fn default_17() -> Self {
        use JointRole::*;
        let joints: [(JointRole, usize, [f64; 3], f64); 17] = [
            (Pelvis, 0, [0.0, 0.0, 0.0], 0.0),
            (Spine, 0, [0.0, 0.12, 0.0], 0.12),
            (Chest, 1, [0.0, 0.22, 0.0], 0.13),
            (Neck, 2, [0.0, 0.22, 0.0], 0.12),
            (Head, 3, [0.0, 0.16, 0.06], 0.06),
            (LeftHip, 0, [0.09, -0.06, 0.0], 0.08),
            (LeftKnee, 5, [0.0, -0.42, 0.0], 0.07),
            (LeftAnkle, 6, [0.0, -0.40, 0.0], 0.05),
            (RightHip, 0, [-0.09, -0.06, 0.0], 0.08),
            (RightKnee, 8, [0.0, -0.42, 0.0], 0.07),
            (RightAnkle, 9, [0.0, -0.40, 0.0], 0.05),
            (LeftShoulder, 2, [0.17, 0.17, 0.0], 0.06),
            (LeftElbow, 11, [0.0, -0.28, 0.0], 0.045),
            (LeftWrist, 12, [0.0, -0.25, 0.0], 0.04),
            (RightShoulder, 2, [-0.17, 0.17, 0.0], 0.06),
            (RightElbow, 14, [0.0, -0.28, 0.0], 0.045),
            (RightWrist, 15, [0.0, -0.25, 0.0], 0.04),
        ];
        let roles: Vec<_> = joints.iter().map(|j| j.0).collect();
        let basis = roles.iter().map(|&r| shape_row(r)).collect();
        Self::new(
            joints.iter().map(|j| j.1).collect(),
            joints.iter().map(|j| j.2).collect(),
            basis,
            roles,
            joints.iter().map(|j| j.3).collect(),
        )
        .expect("built-in tree is valid")
    }

    /// 24-joint layout matching the SMPL joint hierarchy (3·23 = 69 body-pose values).
    pub fn smpl_24() -> Self {
        use JointRole::*;
        let joints: [(JointRole, usize, [f64; 3], f64); 24] = [
            (Pelvis, 0, [0.0, 0.0, 0.0], 0.0),
            (LeftHip, 0, [0.09, -0.06, 0.0], 0.08),
            (RightHip, 0, [-0.09, -0.06, 0.0], 0.08),
            (Spine, 0, [0.0, 0.11, 0.0], 0.12),
            (LeftKnee, 1, [0.0, -0.42, 0.0], 0.07),
            (RightKnee, 2, [0.0, -0.42, 0.0], 0.07),
            (Spine2, 3, [0.0, 0.13, 0.0], 0.12),
            (LeftAnkle, 4, [0.0, -0.40, 0.0], 0.05),
            (RightAnkle, 5, [0.0, -0.40, 0.0], 0.05),
            (Chest, 6, [0.0, 0.06, 0.0], 0.13),
            (LeftFoot, 7, [0.0, -0.05, 0.12], 0.04),
            (RightFoot, 8, [0.0, -0.05, 0.12], 0.04),
            (Neck, 9, [0.0, 0.22, 0.0], 0.12),
            (LeftCollar, 9, [0.07, 0.15, 0.0], 0.06),
            (RightCollar, 9, [-0.07, 0.15, 0.0], 0.06),
            (Head, 12, [0.0, 0.16, 0.0], 0.06),
            (LeftShoulder, 13, [0.10, 0.02, 0.0], 0.06),
            (RightShoulder, 14, [-0.10, 0.02, 0.0], 0.06),
            (LeftElbow, 16, [0.0, -0.28, 0.0], 0.045),
            (RightElbow, 17, [0.0, -0.28, 0.0], 0.045),
            (LeftWrist, 18, [0.0, -0.25, 0.0], 0.04),
            (RightWrist, 19, [0.0, -0.25, 0.0], 0.04),
            (LeftHand, 20, [0.0, -0.08, 0.0], 0.03),
            (RightHand, 21, [0.0, -0.08, 0.0], 0.03),
        ];
        let roles: Vec<_> = joints.iter().map(|j| j.0).collect();
        let basis = roles.iter().map(|&r| shape_row(r)).collect();
        Self::new(
            joints.iter().map(|j| j.1).collect(),
            joints.iter().map(|j| j.2).collect(),
            basis,
            roles,
            joints.iter().map(|j| j.3).collect(),
        )
        .expect("built-in tree is valid")
    }

    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }

    /// Length of a body-pose vector: 3 per non-root joint.
    pub fn pose_dim(&self) -> usize {
        3 * (self.num_joints() - 1)
    }

    pub fn parents(&self) -> &[usize] {
        &self.parents
    }

    pub fn rest_offsets(&self) -> &[[f64; 3]] {
        &self.rest_offsets
    }

    pub fn shape_basis(&self) -> &[[f64; SHAPE_DIM]] {
        &self.shape_basis
    }

    pub fn roles(&self) -> &[JointRole] {
        &self.roles
    }

    pub fn bone_radius(&self) -> &[f64] {
        &self.bone_radius
    }

    pub fn joint(&self, role: JointRole) -> Option<usize> {
        self.roles.iter().position(|&r| r == role)
    }

    pub fn joint_names(&self) -> Vec<&'static str> {
        self.roles.iter().map(|r| r.name()).collect()
    }

    /// Rest-pose joint positions with the pelvis at the origin.
    pub fn rest_joints(&self) -> Vec<[f64; 3]> {
        let mut out: Vec<[f64; 3]> = Vec::with_capacity(self.num_joints());
        for (j, o) in self.rest_offsets.iter().enumerate() {
            if j == 0 {
                out.push(*o);
            } else {
                let p = out[self.parents[j]];
                out.push([p[0] + o[0], p[1] + o[1], p[2] + o[2]]);
            }
        }
        out
    }

    /// Short stable identifier of the tree geometry, used in checkpoints.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("tree serializes");
        format!("{:08x}", crc32fast::hash(&bytes))
    }
}

/// Shape-basis row: how each of the ten coefficients scales this joint's bone.
fn shape_row(role: JointRole) -> [f64; SHAPE_DIM] {
    use JointRole::*;
    let mut row = [0.0; SHAPE_DIM];
    // 0: overall size, 1: legs, 2: arms, 3: torso, 4: left/right asymmetry,
    // 5: shoulder width, 6: hip width, 7: head/neck, 8: shin vs thigh, 9: forearm vs upper arm
    row[0] = 0.06;
    match role {
        LeftHip | RightHip => {
            row[6] = 0.08;
        }
        LeftKnee | RightKnee => {
            row[1] = 0.07;
            row[8] = -0.04;
        }
        LeftAnkle | RightAnkle | LeftFoot | RightFoot => {
            row[1] = 0.07;
            row[8] = 0.05;
        }
        LeftShoulder | RightShoulder | LeftCollar | RightCollar => {
            row[5] = 0.08;
        }
        LeftElbow | RightElbow => {
            row[2] = 0.07;
            row[9] = -0.04;
        }
        LeftWrist | RightWrist | LeftHand | RightHand => {
            row[2] = 0.07;
            row[9] = 0.05;
        }
        Spine | Spine2 | Chest => {
            row[3] = 0.07;
        }
        Neck | Head => {
            row[7] = 0.07;
            row[3] = 0.02;
        }
        Pelvis => {}
    }
    match role {
        LeftHip | LeftKnee | LeftAnkle | LeftFoot | LeftShoulder | LeftElbow | LeftWrist | LeftHand
        | LeftCollar => row[4] = 0.03,
        RightHip | RightKnee | RightAnkle | RightFoot | RightShoulder | RightElbow | RightWrist
        | RightHand | RightCollar => row[4] = -0.03,
        _ => {}
    }
    row
}

/// Axis-angle rotations of the non-root joints, `3·(J−1)` values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyPose(pub Vec<f64>);

impl BodyPose {
    pub fn zeros(tree: &KinematicTree) -> Self {
        Self(vec![0.0; tree.pose_dim()])
    }

    pub fn joint(&self, i: usize) -> [f64; 3] {
        [self.0[3 * i], self.0[3 * i + 1], self.0[3 * i + 2]]
    }

    pub fn num_rotations(&self) -> usize {
        self.0.len() / 3
    }

    /// Per-joint axis-angle wrapped to norm ≤ π.
    pub fn canonicalized(&self) -> Self {
        let mut out = Vec::with_capacity(self.0.len());
        for i in 0..self.num_rotations() {
            out.extend_from_slice(&rotation::canonical_axis_angle(self.joint(i)));
        }
        Self(out)
    }

    pub fn check(&self, tree: &KinematicTree) -> Result<(), BodyError> {
        if self.0.len() != tree.pose_dim() {
            return Err(BodyError::Dimension {
                what: "body pose",
                expected: tree.pose_dim(),
                got: self.0.len(),
            });
        }
        Ok(())
    }
}

/// Root rotation as an axis-angle vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GlobalOrient(pub [f64; 3]);

/// Bone-length shape coefficients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BodyShape(pub [f64; SHAPE_DIM]);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn built_in_trees_are_topological() {
        for tree in [KinematicTree::default_17(), KinematicTree::smpl_24()] {
            for (j, &p) in tree.parents().iter().enumerate().skip(1) {
                assert!(p < j);
            }
        }
        assert_eq!(KinematicTree::default_17().pose_dim(), 48);
        assert_eq!(KinematicTree::smpl_24().pose_dim(), 69);
    }

    #[test]
    fn rejects_parent_after_child() {
        let err = KinematicTree::new(
            vec![0, 2, 1],
            vec![[0.0; 3], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0]],
            vec![[0.0; SHAPE_DIM]; 3],
            vec![JointRole::Pelvis, JointRole::Spine, JointRole::Chest],
            vec![0.1; 3],
        );
        assert!(matches!(err, Err(BodyError::InvalidTree(_))));
    }

    #[test]
    fn rejects_zero_offset() {
        let err = KinematicTree::new(
            vec![0, 0],
            vec![[0.0; 3], [0.0; 3]],
            vec![[0.0; SHAPE_DIM]; 2],
            vec![JointRole::Pelvis, JointRole::Spine],
            vec![0.1; 2],
        );
        assert!(err.is_err());
    }

    #[test]
    fn fingerprint_distinguishes_layouts() {
        assert_ne!(
            KinematicTree::default_17().fingerprint(),
            KinematicTree::smpl_24().fingerprint()
        );
    }
}
