//! Axis-angle ↔ rotation matrix conversion.
//!
//! Rotations are stored as row-major `[f64; 9]` so they can live directly in
//! tape tensors. The Rodrigues coefficients `a = sin t / t` and
//! `b = (1 − cos t) / t²` and their derivatives switch to a Taylor series for
//! small angles, which keeps both the value and the Jacobian accurate at and
//! near the identity.

use nalgebra::Matrix3;

pub type Mat3 = [f64; 9];

pub const IDENTITY: Mat3 = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];

const SERIES_BELOW: f64 = 0.1;

/// `(a, b, a', b')` with `a' = (da/dt)/t`, `b' = (db/dt)/t`, as functions of `t²`.
fn coefficients(t2: f64) -> (f64, f64, f64, f64) {
    let t = t2.sqrt();
    if t < SERIES_BELOW {
        let t4 = t2 * t2;
        let t6 = t4 * t2;
        let t8 = t4 * t4;
        let a = 1.0 - t2 / 6.0 + t4 / 120.0 - t6 / 5040.0 + t8 / 362_880.0;
        let b = 0.5 - t2 / 24.0 + t4 / 720.0 - t6 / 40_320.0 + t8 / 3_628_800.0;
        let da = -1.0 / 3.0 + t2 / 30.0 - t4 / 840.0 + t6 / 45_360.0 - t8 / 3_991_680.0;
        let db = -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0 + t6 / 453_600.0 - t8 / 47_900_160.0;
        (a, b, da, db)
    } else {
        let (s, c) = t.sin_cos();
        let a = s / t;
        let b = (1.0 - c) / t2;
        let da = (t * c - s) / (t2 * t);
        let db = (t * s - 2.0 + 2.0 * c) / (t2 * t2);
        (a, b, da, db)
    }
}

fn skew(w: [f64; 3]) -> Mat3 {
    [0.0, -w[2], w[1], w[2], 0.0, -w[0], -w[1], w[0], 0.0]
}

pub fn mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            c[3 * i + j] = a[3 * i] * b[j] + a[3 * i + 1] * b[3 + j] + a[3 * i + 2] * b[6 + j];
        }
    }
    c
}

pub fn transpose(a: &Mat3) -> Mat3 {
    [a[0], a[3], a[6], a[1], a[4], a[7], a[2], a[5], a[8]]
}

pub fn apply(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        a[0] * v[0] + a[1] * v[1] + a[2] * v[2],
        a[3] * v[0] + a[4] * v[1] + a[5] * v[2],
        a[6] * v[0] + a[7] * v[1] + a[8] * v[2],
    ]
}

pub fn apply_transpose(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        a[0] * v[0] + a[3] * v[1] + a[6] * v[2],
        a[1] * v[0] + a[4] * v[1] + a[7] * v[2],
        a[2] * v[0] + a[5] * v[1] + a[8] * v[2],
    ]
}

/// Rotation matrix of an axis-angle vector.
pub fn rodrigues(omega: [f64; 3]) -> Mat3 {
    let t2 = omega[0] * omega[0] + omega[1] * omega[1] + omega[2] * omega[2];
    let (a, b, _, _) = coefficients(t2);
    let k = skew(omega);
    let k2 = mul(&k, &k);
    let mut r = IDENTITY;
    for i in 0..9 {
        r[i] += a * k[i] + b * k2[i];
    }
    r
}

/// Rotation matrix and its Jacobian `d R / d ω_i` (one `Mat3` per input component).
pub fn rodrigues_with_jacobian(omega: [f64; 3]) -> (Mat3, [Mat3; 3]) {
    let t2 = omega[0] * omega[0] + omega[1] * omega[1] + omega[2] * omega[2];
    let (a, b, da, db) = coefficients(t2);
    let k = skew(omega);
    let k2 = mul(&k, &k);
    let mut r = IDENTITY;
    for i in 0..9 {
        r[i] += a * k[i] + b * k2[i];
    }
    let mut jac = [[0.0; 9]; 3];
    for (i, d) in jac.iter_mut().enumerate() {
        let mut e = [0.0; 3];
        e[i] = 1.0;
        let ei = skew(e);
        let eik = mul(&ei, &k);
        let kei = mul(&k, &ei);
        for m in 0..9 {
            d[m] = da * omega[i] * k[m] + a * ei[m] + db * omega[i] * k2[m] + b * (eik[m] + kei[m]);
        }
    }
    (r, jac)
}

/// Axis-angle of a rotation matrix, with angle in `[0, π]`.
pub fn log_map(r: &Mat3) -> [f64; 3] {
    let rot = nalgebra::Rotation3::from_matrix_unchecked(to_matrix(r));
    let v = rot.scaled_axis();
    [v.x, v.y, v.z]
}

/// Wrap an axis-angle vector so its norm lies in `[0, π]` while representing
/// the same rotation.
pub fn canonical_axis_angle(omega: [f64; 3]) -> [f64; 3] {
    let t = (omega[0] * omega[0] + omega[1] * omega[1] + omega[2] * omega[2]).sqrt();
    if t <= std::f64::consts::PI {
        return omega;
    }
    log_map(&rodrigues(omega))
}

pub fn to_matrix(r: &Mat3) -> Matrix3<f64> {
    Matrix3::from_row_slice(r)
}

pub fn det(r: &Mat3) -> f64 {
    r[0] * (r[4] * r[8] - r[5] * r[7]) - r[1] * (r[3] * r[8] - r[5] * r[6])
        + r[2] * (r[3] * r[7] - r[4] * r[6])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn orthonormality_error(r: &Mat3) -> f64 {
        let rtr = mul(&transpose(r), r);
        rtr.iter()
            .zip(IDENTITY.iter())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    #[test]
    fn zero_is_identity() {
        assert_eq!(rodrigues([0.0; 3]), IDENTITY);
    }

    #[test]
    fn quarter_turn_about_z_maps_x_to_y() {
        let r = rodrigues([0.0, 0.0, FRAC_PI_2]);
        let y = apply(&r, [1.0, 0.0, 0.0]);
        assert!((y[0]).abs() < 1e-15 && (y[1] - 1.0).abs() < 1e-15 && y[2].abs() < 1e-15);
    }

    #[test]
    fn series_and_closed_form_agree_at_switch() {
        let below = [0.0, 0.0, SERIES_BELOW * (1.0 - 1e-12)];
        let above = [0.0, 0.0, SERIES_BELOW * (1.0 + 1e-12)];
        let (ra, ja) = rodrigues_with_jacobian(below);
        let (rb, jb) = rodrigues_with_jacobian(above);
        for i in 0..9 {
            assert!((ra[i] - rb[i]).abs() < 1e-12);
            for c in 0..3 {
                assert!((ja[c][i] - jb[c][i]).abs() < 1e-11);
            }
        }
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let h = 1e-6;
        for omega in [[0.3, -0.2, 0.9], [1e-9, 0.0, -2e-9], [0.01, 0.02, -0.03], [2.5, 1.0, -0.4]] {
            let (_, jac) = rodrigues_with_jacobian(omega);
            for c in 0..3 {
                let mut p = omega;
                let mut m = omega;
                p[c] += h;
                m[c] -= h;
                let rp = rodrigues(p);
                let rm = rodrigues(m);
                for i in 0..9 {
                    let fd = (rp[i] - rm[i]) / (2.0 * h);
                    assert!((fd - jac[c][i]).abs() < 1e-8, "ω={omega:?} c={c} i={i}");
                }
            }
        }
    }

    #[test]
    fn log_map_inverts_rodrigues() {
        let w = [0.4, -1.1, 0.7];
        let back = log_map(&rodrigues(w));
        for i in 0..3 {
            assert!((back[i] - w[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn canonicalization_preserves_rotation() {
        let w = [0.0, 4.0, 0.0];
        let c = canonical_axis_angle(w);
        let n = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
        assert!(n <= std::f64::consts::PI + 1e-9);
        let (a, b) = (rodrigues(w), rodrigues(c));
        for i in 0..9 {
            assert!((a[i] - b[i]).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn rodrigues_is_proper_rotation(x in -6.0f64..6.0, y in -6.0f64..6.0, z in -6.0f64..6.0) {
            let r = rodrigues([x, y, z]);
            prop_assert!(orthonormality_error(&r) <= 1e-12);
            prop_assert!((det(&r) - 1.0).abs() <= 1e-12);
        }
    }
}
