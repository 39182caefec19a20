use serde::{Deserialize, Serialize};

use super::rotation::{self, Mat3};
use super::{BodyError, BodyPose, BodyShape, GlobalOrient, KinematicTree, SHAPE_DIM};

const SCALE_MIN: f64 = 0.2;
const SCALE_MAX: f64 = 3.0;

/// Posed skeleton: world joint positions and per-joint rigid transforms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyState {
    pub joints: Vec<[f64; 3]>,
    /// Global rotation of each joint frame.
    pub rotations: Vec<Mat3>,
}

impl BodyState {
    /// Joints relative to the pelvis.
    pub fn root_relative(&self) -> Vec<[f64; 3]> {
        let r = self.joints[0];
        self.joints
            .iter()
            .map(|p| [p[0] - r[0], p[1] - r[1], p[2] - r[2]])
            .collect()
    }
}

fn bone_scale(tree: &KinematicTree, beta: &[f64], j: usize) -> (f64, bool) {
    let row = &tree.shape_basis()[j];
    let raw = 1.0 + row.iter().zip(beta).map(|(b, x)| b * x).sum::<f64>();
    let clamped = raw.clamp(SCALE_MIN, SCALE_MAX);
    (clamped, raw > SCALE_MIN && raw < SCALE_MAX)
}

/// Writes `J×3` shaped bone offsets into `out`.
pub fn shaped_offsets_into(tree: &KinematicTree, beta: &[f64], out: &mut [f64]) {
    debug_assert_eq!(beta.len(), SHAPE_DIM);
    for (j, o) in tree.rest_offsets().iter().enumerate() {
        let (s, _) = bone_scale(tree, beta, j);
        for c in 0..3 {
            out[3 * j + c] = o[c] * s;
        }
    }
}

/// Shape-adjusted bone offsets: each rest offset scaled by
/// `clamp(1 + Σ_k β_k B[j,k], 0.2, 3.0)`.
pub fn shaped_offsets(tree: &KinematicTree, beta: &BodyShape) -> Vec<[f64; 3]> {
    let mut flat = vec![0.0; 3 * tree.num_joints()];
    shaped_offsets_into(tree, &beta.0, &mut flat);
    flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

/// Accumulates `dL/dβ` from `dL/d(offsets)`. Clamped bones pass no gradient.
pub fn shaped_offsets_backward(tree: &KinematicTree, beta: &[f64], grad_offsets: &[f64], grad_beta: &mut [f64]) {
    for (j, o) in tree.rest_offsets().iter().enumerate() {
        let (_, active) = bone_scale(tree, beta, j);
        if !active {
            continue;
        }
        let g: f64 = (0..3).map(|c| grad_offsets[3 * j + c] * o[c]).sum();
        if g == 0.0 {
            continue;
        }
        for (gb, b) in grad_beta.iter_mut().zip(&tree.shape_basis()[j]) {
            *gb += g * b;
        }
    }
}

/// Forward kinematics on flat buffers.
///
/// `local`: J×9 local rotations (root first), `offsets`: J×3, `transl`: 3.
/// Writes J×9 global rotations and J×3 joint positions.
pub fn fk_forward(
    parents: &[usize],
    local: &[f64],
    offsets: &[f64],
    transl: [f64; 3],
    globals: &mut [f64],
    joints: &mut [f64],
) {
    let n = parents.len();
    for j in 0..n {
        let r: Mat3 = local[9 * j..9 * j + 9].try_into().unwrap();
        let o = [offsets[3 * j], offsets[3 * j + 1], offsets[3 * j + 2]];
        if j == 0 {
            globals[..9].copy_from_slice(&r);
            for c in 0..3 {
                joints[c] = transl[c] + o[c];
            }
        } else {
            let p = parents[j];
            let gp: Mat3 = globals[9 * p..9 * p + 9].try_into().unwrap();
            let g = rotation::mul(&gp, &r);
            globals[9 * j..9 * j + 9].copy_from_slice(&g);
            let d = rotation::apply(&gp, o);
            for c in 0..3 {
                joints[3 * j + c] = joints[3 * p + c] + d[c];
            }
        }
    }
}

/// Reverse pass of [`fk_forward`]: accumulates gradients for local rotations,
/// offsets and translation from `dL/d(joints)`.
pub fn fk_backward(
    parents: &[usize],
    local: &[f64],
    offsets: &[f64],
    globals: &[f64],
    grad_joints: &[f64],
    grad_local: &mut [f64],
    grad_offsets: &mut [f64],
    grad_transl: &mut [f64; 3],
) {
    let n = parents.len();
    let mut gp_acc = grad_joints.to_vec();
    let mut gg_acc = vec![0.0; 9 * n];
    for j in (1..n).rev() {
        let p = parents[j];
        let gpar: Mat3 = globals[9 * p..9 * p + 9].try_into().unwrap();
        let r: Mat3 = local[9 * j..9 * j + 9].try_into().unwrap();
        let o = [offsets[3 * j], offsets[3 * j + 1], offsets[3 * j + 2]];
        let gpj = [gp_acc[3 * j], gp_acc[3 * j + 1], gp_acc[3 * j + 2]];
        let ggj: Mat3 = gg_acc[9 * j..9 * j + 9].try_into().unwrap();

        // p_j = p_parent + G_parent o_j
        for c in 0..3 {
            gp_acc[3 * p + c] += gpj[c];
        }
        for a in 0..3 {
            for b in 0..3 {
                gg_acc[9 * p + 3 * a + b] += gpj[a] * o[b];
            }
        }
        let go = rotation::apply_transpose(&gpar, gpj);
        for c in 0..3 {
            grad_offsets[3 * j + c] += go[c];
        }
        // G_j = G_parent R_j
        let to_parent = rotation::mul(&ggj, &rotation::transpose(&r));
        for m in 0..9 {
            gg_acc[9 * p + m] += to_parent[m];
        }
        let gr = rotation::mul(&rotation::transpose(&gpar), &ggj);
        for m in 0..9 {
            grad_local[9 * j + m] += gr[m];
        }
    }
    for m in 0..9 {
        grad_local[m] += gg_acc[m];
    }
    for c in 0..3 {
        grad_transl[c] += gp_acc[c];
        grad_offsets[c] += gp_acc[c];
    }
}

/// Local rotation matrices (root first) for an orientation and body pose.
pub(crate) fn local_rotations(orient: &GlobalOrient, pose: &BodyPose) -> Vec<f64> {
    let mut out = Vec::with_capacity(9 * (pose.num_rotations() + 1));
    out.extend_from_slice(&rotation::rodrigues(orient.0));
    for i in 0..pose.num_rotations() {
        out.extend_from_slice(&rotation::rodrigues(pose.joint(i)));
    }
    out
}

/// Poses the skeleton.
pub fn forward_kinematics(
    tree: &KinematicTree,
    pose: &BodyPose,
    orient: &GlobalOrient,
    beta: &BodyShape,
    root_transl: [f64; 3],
) -> Result<BodyState, BodyError> {
    pose.check(tree)?;
    let n = tree.num_joints();
    let local = local_rotations(orient, pose);
    let mut offsets = vec![0.0; 3 * n];
    shaped_offsets_into(tree, &beta.0, &mut offsets);
    let mut globals = vec![0.0; 9 * n];
    let mut joints = vec![0.0; 3 * n];
    fk_forward(tree.parents(), &local, &offsets, root_transl, &mut globals, &mut joints);
    Ok(BodyState {
        joints: joints.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        rotations: globals.chunks_exact(9).map(|c| c.try_into().unwrap()).collect(),
    })
}
