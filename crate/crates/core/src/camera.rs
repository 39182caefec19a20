//! Weak-perspective camera: `p = s·(x, y) + (t_x, t_y)`, depth dropped.
//!
//! Image coordinates are normalized to `[−1, 1]`.

use serde::{Deserialize, Serialize};

pub const MAX_SCALE: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakPerspective {
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Default for WeakPerspective {
    fn default() -> Self {
        Self {
            scale: 1.0,
            tx: 0.0,
            ty: 0.0,
        }
    }
}

impl WeakPerspective {
    pub fn new(scale: f64, tx: f64, ty: f64) -> Self {
        Self { scale, tx, ty }
    }

    pub fn is_valid(&self) -> bool {
        self.scale > 0.0 && self.scale <= MAX_SCALE && self.tx.is_finite() && self.ty.is_finite()
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.scale, self.tx, self.ty]
    }

    pub fn project_point(&self, p: [f64; 3]) -> [f64; 2] {
        [self.scale * p[0] + self.tx, self.scale * p[1] + self.ty]
    }
}

pub fn project(points: &[[f64; 3]], cam: &WeakPerspective) -> Vec<[f64; 2]> {
    points.iter().map(|p| cam.project_point(*p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check, Tensor};
    use proptest::prelude::*;

    #[test]
    fn unit_camera_drops_depth() {
        let out = project(&[[0.3, -0.2, 5.0]], &WeakPerspective::default());
        assert_eq!(out, vec![[0.3, -0.2]]);
    }

    #[test]
    fn hand_computed_point() {
        let out = WeakPerspective::new(2.0, 0.1, 0.2).project_point([0.5, -0.25, 3.0]);
        assert!((out[0] - 1.1).abs() < 1e-15 && (out[1] + 0.3).abs() < 1e-15);
    }

    #[test]
    fn reprojection_gradient_wrt_camera() {
        let pts = Tensor::matrix(1, 9, vec![0.1, 0.5, 0.3, -0.4, 0.2, 1.0, 0.7, -0.6, -0.2]);
        let target = Tensor::matrix(1, 6, vec![0.3, 0.9, -0.5, 0.1, 1.2, -1.0]);
        let report = grad_check(
            |tape, p| {
                let pv = tape.leaf(pts.clone());
                let proj = tape.project(pv, p[0]);
                tape.sq_err(proj, target.clone(), Tensor::full(&[1, 6], 1.0))
            },
            &[Tensor::matrix(1, 3, vec![1.3, 0.05, -0.1])],
            1e-6,
        );
        assert!(report.passed(), "{:?}", report.max_rel_err);
    }

    proptest! {
        #[test]
        fn depth_invariant(x in -2.0f64..2.0, y in -2.0f64..2.0, z in -5.0f64..5.0, dz in -5.0f64..5.0,
                           s in 0.1f64..3.0, tx in -1.0f64..1.0, ty in -1.0f64..1.0) {
            let cam = WeakPerspective::new(s, tx, ty);
            prop_assert_eq!(cam.project_point([x, y, z]), cam.project_point([x, y, z + dz]));
        }

        #[test]
        fn linear_in_scale(x in -2.0f64..2.0, y in -2.0f64..2.0, s in 0.1f64..3.0, tx in -1.0f64..1.0, ty in -1.0f64..1.0) {
            let a = WeakPerspective::new(2.0 * s, tx, ty).project_point([x, y, 0.0]);
            let b = WeakPerspective::new(s, 0.0, 0.0).project_point([x, y, 0.0]);
            prop_assert!((a[0] - (2.0 * b[0] + tx)).abs() < 1e-12);
            prop_assert!((a[1] - (2.0 * b[1] + ty)).abs() < 1e-12);
        }
    }
}
