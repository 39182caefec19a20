use std::io::Write;

use serde::{Deserialize, Serialize};

use super::rotation::{self, Mat3};
use super::{BodyError, BodyState, KinematicTree};

/// Procedural capsule mesh with skinning weights and a joint regressor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshTemplate {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
    /// Dense `V×J` skinning weights.
    pub weights: Vec<f64>,
    pub num_joints: usize,
    /// Rest-pose joint positions the weights are bound to.
    pub rest_joints: Vec<[f64; 3]>,
    /// For each joint, the vertices whose mean regresses it.
    pub joint_regressor: Vec<Vec<usize>>,
    /// Non-root joints whose bone had zero length and got no geometry.
    pub skipped_bones: Vec<usize>,
}

impl MeshTemplate {
    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn weight_row(&self, v: usize) -> &[f64] {
        &self.weights[v * self.num_joints..(v + 1) * self.num_joints]
    }

    /// Dense `J×V` regressor matrix `W` with `X = W·M`.
    pub fn regressor_matrix(&self) -> Vec<Vec<f64>> {
        self.joint_regressor
            .iter()
            .map(|idx| {
                let mut row = vec![0.0; self.num_vertices()];
                let w = 1.0 / idx.len() as f64;
                for &i in idx {
                    row[i] += w;
                }
                row
            })
            .collect()
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

/// Builds a capsule of `rings_per_bone` vertex rings around every bone.
///
/// Rings are spaced from the parent joint (first ring) to the child joint
/// (last ring); a ring at fraction `f` is skinned `1 − f` to the parent and
/// `f` to the child.
pub fn build_template(
    tree: &KinematicTree,
    rings_per_bone: usize,
    ring_vertices: usize,
) -> Result<MeshTemplate, BodyError> {
    if rings_per_bone < 2 || ring_vertices < 3 {
        return Err(BodyError::MeshConfig(format!(
            "need at least 2 rings and 3 vertices per ring, got {rings_per_bone} and {ring_vertices}"
        )));
    }
    let nj = tree.num_joints();
    let rest = tree.rest_joints();
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut weights = Vec::new();
    let mut rings: Vec<([f64; 3], std::ops::Range<usize>)> = Vec::new();
    let mut skipped = Vec::new();

    for j in 1..nj {
        let p = tree.parents()[j];
        let (a, b) = (rest[p], rest[j]);
        let d = sub(b, a);
        let len = norm(d);
        if len < 1e-9 {
            skipped.push(j);
            continue;
        }
        let axis = scale(d, 1.0 / len);
        let helper = if axis[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        let u = cross(axis, helper);
        let u = scale(u, 1.0 / norm(u));
        let v = cross(axis, u);
        let radius = tree.bone_radius()[j];
        let base = vertices.len();
        for r in 0..rings_per_bone {
            let f = r as f64 / (rings_per_bone - 1) as f64;
            let center = [a[0] + f * d[0], a[1] + f * d[1], a[2] + f * d[2]];
            let start = vertices.len();
            for k in 0..ring_vertices {
                let phi = std::f64::consts::TAU * k as f64 / ring_vertices as f64;
                let (s, c) = phi.sin_cos();
                vertices.push([
                    center[0] + radius * (c * u[0] + s * v[0]),
                    center[1] + radius * (c * u[1] + s * v[1]),
                    center[2] + radius * (c * u[2] + s * v[2]),
                ]);
                let mut row = vec![0.0; nj];
                row[p] += 1.0 - f;
                row[j] += f;
                weights.extend(row);
            }
            rings.push((center, start..vertices.len()));
        }
        let n = ring_vertices;
        for r in 0..rings_per_bone - 1 {
            let r0 = base + r * n;
            let r1 = r0 + n;
            for k in 0..n {
                let k1 = (k + 1) % n;
                faces.push([r0 + k, r0 + k1, r1 + k]);
                faces.push([r0 + k1, r1 + k1, r1 + k]);
            }
        }
        let last = base + (rings_per_bone - 1) * n;
        for k in 1..n - 1 {
            faces.push([base, base + k + 1, base + k]);
            faces.push([last, last + k, last + k + 1]);
        }
    }

    let joint_regressor = rest
        .iter()
        .map(|jp| {
            rings
                .iter()
                .min_by(|x, y| norm(sub(x.0, *jp)).total_cmp(&norm(sub(y.0, *jp))))
                .map(|(_, r)| r.clone().collect())
                .unwrap_or_default()
        })
        .collect();

    Ok(MeshTemplate {
        vertices,
        faces,
        weights,
        num_joints: nj,
        rest_joints: rest,
        joint_regressor,
        skipped_bones: skipped,
    })
}

/// Linear blend skinning: `v' = Σ_j w_vj (G_j (v − J_j^rest) + p_j)`.
pub fn lbs(template: &MeshTemplate, state: &BodyState) -> Vec<[f64; 3]> {
    assert_eq!(state.joints.len(), template.num_joints, "state/template joint count");
    template
        .vertices
        .iter()
        .enumerate()
        .map(|(vi, v)| {
            let mut out = [0.0; 3];
            for (j, &w) in template.weight_row(vi).iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let g: &Mat3 = &state.rotations[j];
                let local = rotation::apply(g, sub(*v, template.rest_joints[j]));
                let p = state.joints[j];
                for c in 0..3 {
                    out[c] += w * (local[c] + p[c]);
                }
            }
            out
        })
        .collect()
}

/// `X = W·M`: each joint is the mean of its regressor vertices.
pub fn regress_joints(template: &MeshTemplate, posed: &[[f64; 3]]) -> Vec<[f64; 3]> {
    assert_eq!(posed.len(), template.num_vertices(), "vertex count");
    template
        .joint_regressor
        .iter()
        .map(|idx| {
            let mut acc = [0.0; 3];
            for &i in idx {
                for c in 0..3 {
                    acc[c] += posed[i][c];
                }
            }
            scale(acc, 1.0 / idx.len().max(1) as f64)
        })
        .collect()
}

/// Writes a Wavefront OBJ with 1-based face indices.
pub fn export_obj<W: Write>(mut w: W, vertices: &[[f64; 3]], faces: &[[usize; 3]]) -> Result<(), BodyError> {
    for v in vertices {
        writeln!(w, "v {:.6} {:.6} {:.6}", v[0], v[1], v[2])?;
    }
    for f in faces {
        writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    Ok(())
}

/// Fills a `res×res` binary mask of triangles given 2D vertices in normalized
/// image coordinates (`[−1, 1]`, row 0 at `y = +1`).
pub fn rasterize_silhouette(points: &[[f64; 2]], faces: &[[usize; 3]], res: usize) -> Vec<f64> {
    let mut mask = vec![0.0; res * res];
    let px = 2.0 / res as f64;
    let to_col = |x: f64| ((x + 1.0) / px - 0.5).floor();
    let to_row = |y: f64| ((1.0 - y) / px - 0.5).floor();
    for f in faces {
        let (a, b, c) = (points[f[0]], points[f[1]], points[f[2]]);
        let area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
        if area.abs() < 1e-15 {
            continue;
        }
        let xmin = a[0].min(b[0]).min(c[0]);
        let xmax = a[0].max(b[0]).max(c[0]);
        let ymin = a[1].min(b[1]).min(c[1]);
        let ymax = a[1].max(b[1]).max(c[1]);
        let c0 = to_col(xmin).max(0.0) as usize;
        let c1 = (to_col(xmax) + 1.0).clamp(0.0, (res - 1) as f64) as usize;
        let r0 = to_row(ymax).max(0.0) as usize;
        let r1 = (to_row(ymin) + 1.0).clamp(0.0, (res - 1) as f64) as usize;
        if xmax < -1.0 || xmin > 1.0 || ymax < -1.0 || ymin > 1.0 {
            continue;
        }
        for row in r0..=r1 {
            let y = 1.0 - (row as f64 + 0.5) * px;
            for col in c0..=c1 {
                let x = -1.0 + (col as f64 + 0.5) * px;
                let e0 = (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]);
                let e1 = (c[0] - b[0]) * (y - b[1]) - (c[1] - b[1]) * (x - b[0]);
                let e2 = (a[0] - c[0]) * (y - c[1]) - (a[1] - c[1]) * (x - c[0]);
                let inside = if area > 0.0 {
                    e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0
                } else {
                    e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0
                };
                if inside {
                    mask[row * res + col] = 1.0;
                }
            }
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::{forward_kinematics, BodyPose, BodyShape, GlobalOrient, JointRole, SHAPE_DIM};

    fn rest_state(tree: &KinematicTree) -> BodyState {
        forward_kinematics(tree, &BodyPose::zeros(tree), &GlobalOrient::default(), &BodyShape::default(), [0.0; 3])
            .unwrap()
    }

    #[test]
    fn default_template_has_384_vertices() {
        let tree = KinematicTree::default_17();
        let t = build_template(&tree, 3, 8).unwrap();
        assert_eq!(t.num_vertices(), 16 * 3 * 8);
        assert!(t.faces.iter().all(|f| f.iter().all(|&i| i < t.num_vertices())));
    }

    #[test]
    fn weights_partition_unity() {
        for (rings, n) in [(2, 3), (3, 8), (5, 6)] {
            let t = build_template(&KinematicTree::smpl_24(), rings, n).unwrap();
            for v in 0..t.num_vertices() {
                let row = t.weight_row(v);
                assert!(row.iter().all(|w| *w >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
            for row in t.regressor_matrix() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn single_bone_weights_on_root_and_child() {
        let tree = KinematicTree::new(
            vec![0, 0],
            vec![[0.0; 3], [0.0, 0.5, 0.0]],
            vec![[0.0; SHAPE_DIM]; 2],
            vec![JointRole::Pelvis, JointRole::Spine],
            vec![0.1, 0.1],
        )
        .unwrap();
        let t = build_template(&tree, 3, 4).unwrap();
        assert_eq!(t.num_vertices(), 12);
        assert_eq!(t.weights.len(), 24);
    }

    #[test]
    fn rejects_degenerate_config() {
        assert!(build_template(&KinematicTree::default_17(), 1, 8).is_err());
        assert!(build_template(&KinematicTree::default_17(), 3, 2).is_err());
    }

    #[test]
    fn rest_pose_lbs_is_identity() {
        let tree = KinematicTree::default_17();
        let t = build_template(&tree, 3, 8).unwrap();
        let posed = lbs(&t, &rest_state(&tree));
        for (a, b) in posed.iter().zip(&t.vertices) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn rigid_root_rotation_moves_mesh_rigidly() {
        let tree = KinematicTree::default_17();
        let t = build_template(&tree, 3, 8).unwrap();
        let q = [0.4, 1.0, -0.3];
        let st = forward_kinematics(&tree, &BodyPose::zeros(&tree), &GlobalOrient(q), &BodyShape::default(), [0.0; 3])
            .unwrap();
        let posed = lbs(&t, &st);
        let r = rotation::rodrigues(q);
        for (a, b) in posed.iter().zip(&t.vertices) {
            let rb = rotation::apply(&r, *b);
            for c in 0..3 {
                assert!((a[c] - rb[c]).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn unit_weight_vertex_follows_its_joint() {
        let tree = KinematicTree::default_17();
        let t = build_template(&tree, 3, 8).unwrap();
        let pose = BodyPose((0..tree.pose_dim()).map(|i| 0.3 * ((i as f64) * 1.3).cos()).collect());
        let st = forward_kinematics(&tree, &pose, &GlobalOrient([0.1, 0.2, 0.3]), &BodyShape::default(), [0.0; 3])
            .unwrap();
        let posed = lbs(&t, &st);
        for v in 0..t.num_vertices() {
            if let Some(j) = t.weight_row(v).iter().position(|w| *w == 1.0) {
                let expect = rotation::apply(&st.rotations[j], sub(t.vertices[v], t.rest_joints[j]));
                for c in 0..3 {
                    assert!((posed[v][c] - (expect[c] + st.joints[j][c])).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn regressed_joints_track_kinematics() {
        let tree = KinematicTree::default_17();
        let t = build_template(&tree, 3, 8).unwrap();
        let rest = regress_joints(&t, &lbs(&t, &rest_state(&tree)));
        let bias = rest
            .iter()
            .zip(&t.rest_joints)
            .map(|(a, b)| norm(sub(*a, *b)))
            .fold(0.0, f64::max);
        assert!(bias <= 0.02);
        let pose = BodyPose((0..tree.pose_dim()).map(|i| 0.8 * ((i as f64) * 0.9).sin()).collect());
        let beta = BodyShape([0.5, 1.0, -1.0, 0.3, 0.0, 0.2, -0.4, 0.1, 0.0, 0.6]);
        let st = forward_kinematics(&tree, &pose, &GlobalOrient([0.5, 0.0, 0.2]), &beta, [0.1, 0.0, 2.0]).unwrap();
        let reg = regress_joints(&t, &lbs(&t, &st));
        for (a, b) in reg.iter().zip(&st.joints) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= bias + 1e-6);
            }
        }
    }

    #[test]
    fn obj_uses_one_based_indices() {
        let mut buf = Vec::new();
        export_obj(&mut buf, &[[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], &[[0, 1, 2]]).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().filter(|l| l.starts_with("v ")).count(), 3);
        assert_eq!(s.lines().last().unwrap(), "f 1 2 3");
    }

    #[test]
    fn silhouette_covers_triangle_interior() {
        let pts = [[-0.5, -0.5], [0.5, -0.5], [0.0, 0.5]];
        let mask = rasterize_silhouette(&pts, &[[0, 1, 2]], 64);
        assert_eq!(mask[32 * 64 + 32], 1.0);
        assert_eq!(mask[0], 0.0);
        let filled = mask.iter().sum::<f64>();
        // triangle area 0.5 of a 4.0 square → 1/8 of 4096 pixels
        assert!((filled - 512.0).abs() < 40.0, "{filled}");
    }
}
