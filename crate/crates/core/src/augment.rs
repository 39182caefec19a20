//! Latent pose augmentation.
//!
//! A predicted pose is embedded with the prior, its latent code is scaled
//! away from the origin by `z̃ = z ⊙ (1 + s·ε)` with `ε ~ U[0, 1]^d`, and the
//! decoded pose is rendered onto the predicted body and camera to give a fully
//! labelled synthetic example.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::body::{forward_kinematics, BodyPose, BodyShape, GlobalOrient, KinematicTree, MeshTemplate, SHAPE_DIM};
use crate::camera::{project, WeakPerspective};
use crate::pose_prior::{norm, sample_posterior, PriorError, PriorParams};
use crate::regressor::{Modality, Observation};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("non-finite latent or pose after resampling")]
    NonFinite,
    #[error("noise scale must be finite and nonnegative, got {0}")]
    BadScale(f64),
    #[error("silhouette observations need a mesh template")]
    MissingTemplate,
    #[error(transparent)]
    Prior(#[from] PriorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    Dapa,
    ZeroPerturb,
    RandomPose,
}

impl AugmentMode {
    pub fn name(self) -> &'static str {
        match self {
            AugmentMode::Dapa => "dapa",
            AugmentMode::ZeroPerturb => "zero_perturb",
            AugmentMode::RandomPose => "random_pose",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub mode: AugmentMode,
    /// Multiplicative noise scale.
    pub s: f64,
    pub seed: u64,
    /// Use the posterior mean instead of a posterior sample.
    pub posterior_mean: bool,
    /// Draw `β_syn ~ N(0, 0.2²I)` instead of inheriting the prediction.
    pub sample_shape: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            mode: AugmentMode::Dapa,
            s: 0.5,
            seed: 0,
            posterior_mean: false,
            sample_shape: false,
        }
    }
}

impl AugmentConfig {
    /// Noise scale actually applied in this mode.
    pub fn effective_s(&self) -> f64 {
        match self.mode {
            AugmentMode::ZeroPerturb => 0.0,
            _ => self.s,
        }
    }
}

/// Latent trail of one synthetic pose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_id: String,
    pub z: Vec<f64>,
    pub z_tilde: Vec<f64>,
    pub eps: Vec<f64>,
}

/// One line of the optional provenance dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub step: usize,
    pub sample_id: String,
    pub z_norm: f64,
    pub z_tilde_norm: f64,
    pub mode: AugmentMode,
}

/// Applies `z̃ = z ⊙ (1 + s·ε)` for a given `ε`.
pub fn perturb_with(z: &[f64], s: f64, eps: &[f64]) -> Vec<f64> {
    z.iter().zip(eps).map(|(z, e)| z * (1.0 + s * e)).collect()
}

/// Draws fresh `ε ~ U[0, 1]^d` and perturbs `z`; returns `(z̃, ε)`.
pub fn perturb_latent<R: Rng>(z: &[f64], s: f64, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let eps: Vec<f64> = (0..z.len()).map(|_| rng.random::<f64>()).collect();
    (perturb_with(z, s, &eps), eps)
}

fn draw_latent<R: Rng>(
    prior: &PriorParams,
    theta_reg: &BodyPose,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), AugmentError> {
    let d = prior.latent_dim;
    match cfg.mode {
        AugmentMode::RandomPose => {
            let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            Ok((z.clone(), z, vec![0.0; d]))
        }
        AugmentMode::Dapa | AugmentMode::ZeroPerturb => {
            let post = prior.encode(theta_reg)?;
            let z = if cfg.posterior_mean {
                post.mu
            } else {
                sample_posterior(&post, rng)
            };
            let (zt, eps) = perturb_latent(&z, cfg.effective_s(), rng);
            Ok((z, zt, eps))
        }
    }
}

/// Synthesizes a pose from a predicted one. A non-finite draw is retried once.
pub fn dapa_augment<R: Rng>(
    prior: &PriorParams,
    theta_reg: &BodyPose,
    source_id: &str,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(BodyPose, Provenance), AugmentError> {
    let s = cfg.effective_s();
    if !(s.is_finite() && s >= 0.0) {
        return Err(AugmentError::BadScale(s));
    }
    for _ in 0..2 {
        let (z, z_tilde, eps) = draw_latent(prior, theta_reg, cfg, rng)?;
        if !z_tilde.iter().all(|v| v.is_finite()) {
            continue;
        }
        let pose = prior.decode(&z_tilde)?;
        if pose.0.iter().all(|v| v.is_finite()) {
            return Ok((
                pose,
                Provenance {
                    source_id: source_id.to_string(),
                    z,
                    z_tilde,
                    eps,
                },
            ));
        }
    }
    Err(AugmentError::NonFinite)
}

/// Predicted body and camera a synthetic pose is rendered with.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderContext {
    pub orient: GlobalOrient,
    pub shape: BodyShape,
    pub cam: WeakPerspective,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub pose: BodyPose,
    pub orient: GlobalOrient,
    pub shape: BodyShape,
    pub cam: WeakPerspective,
    /// Pelvis-rooted joints.
    pub joints3d: Vec<[f64; 3]>,
    pub joints2d: Vec<[f64; 2]>,
    pub observation: Observation,
    pub provenance: Provenance,
}

/// Poses, projects and observes a synthetic subject without noise.
pub fn make_synthetic_example<R: Rng>(
    tree: &KinematicTree,
    template: Option<&MeshTemplate>,
    pose: BodyPose,
    ctx: &RenderContext,
    modality: Modality,
    sample_shape: bool,
    provenance: Provenance,
    rng: &mut R,
) -> Result<SyntheticSample, AugmentError> {
    let shape = if sample_shape {
        let n = Normal::new(0.0, 0.2).unwrap();
        let mut b = [0.0; SHAPE_DIM];
        b.iter_mut().for_each(|v| *v = n.sample(rng));
        BodyShape(b)
    } else {
        ctx.shape
    };
    let state = forward_kinematics(tree, &pose, &ctx.orient, &shape, [0.0; 3])
        .map_err(|_| AugmentError::NonFinite)?;
    let joints2d = project(&state.joints, &ctx.cam);
    let observation = match modality {
        Modality::Keypoints2d => {
            let kp: Vec<[f64; 3]> = joints2d.iter().map(|p| [p[0], p[1], 1.0]).collect();
            Observation::from_keypoints(&kp)
        }
        Modality::Silhouette => {
            let t = template.ok_or(AugmentError::MissingTemplate)?;
            Observation::silhouette(t, &state, &ctx.cam)
        }
    };
    Ok(SyntheticSample {
        pose,
        orient: ctx.orient,
        shape,
        cam: ctx.cam,
        joints3d: state.joints,
        joints2d,
        observation,
        provenance,
    })
}

impl SyntheticSample {
    pub fn record(&self, step: usize, mode: AugmentMode) -> ProvenanceRecord {
        ProvenanceRecord {
            step,
            sample_id: self.provenance.source_id.clone(),
            z_norm: norm(&self.provenance.z),
            z_tilde_norm: norm(&self.provenance.z_tilde),
            mode,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose_prior::PriorConfig;
    use crate::rng;
    use proptest::prelude::*;

    fn prior(seed: u64) -> PriorParams {
        let cfg = PriorConfig {
            hidden: vec![16],
            ..PriorConfig::default()
        };
        PriorParams::init(&cfg, 48, &mut rng::stream(seed, 0))
    }

    fn ctx() -> RenderContext {
        RenderContext {
            orient: GlobalOrient([0.1, 0.4, -0.05]),
            shape: BodyShape([0.3; SHAPE_DIM]),
            cam: WeakPerspective::new(0.9, 0.05, -0.1),
        }
    }

    fn prov() -> Provenance {
        Provenance {
            source_id: "t".into(),
            z: vec![],
            z_tilde: vec![],
            eps: vec![],
        }
    }

    #[test]
    fn hand_computed_perturbation() {
        let zt = perturb_with(&[1.0, -2.0], 0.5, &[0.2, 1.0]);
        assert!((zt[0] - 1.1).abs() < 1e-15 && (zt[1] + 3.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn perturbation_keeps_sign_and_grows(z in prop::collection::vec(-5.0f64..5.0, 8), s in 0.0f64..3.0, seed in 0u64..1000) {
            let (zt, eps) = perturb_latent(&z, s, &mut rng::stream(seed, 1));
            for i in 0..8 {
                prop_assert!((0.0..1.0).contains(&eps[i]));
                prop_assert!(zt[i].abs() >= z[i].abs());
                prop_assert!(zt[i] == 0.0 || zt[i].signum() == z[i].signum());
            }
            prop_assert!(norm(&zt) >= norm(&z));
        }

        #[test]
        fn zero_scale_is_identity(z in prop::collection::vec(-5.0f64..5.0, 8), seed in 0u64..1000) {
            let (zt, _) = perturb_latent(&z, 0.0, &mut rng::stream(seed, 2));
            prop_assert_eq!(zt, z);
        }
    }

    #[test]
    fn perturbation_increases_expected_norm() {
        let mut r = rng::stream(4, 0);
        let (mut a, mut b) = (0.0, 0.0);
        for _ in 0..10_000 {
            let z: Vec<f64> = (0..8).map(|_| StandardNormal.sample(&mut r)).collect();
            let (zt, _) = perturb_latent(&z, 0.5, &mut r);
            a += norm(&z);
            b += norm(&zt);
        }
        assert!(b > a);
    }

    #[test]
    fn zero_perturb_with_collapsed_posterior_decodes_mu() {
        let mut p = prior(1);
        // log σ → −∞ turns the posterior into a point mass at μ.
        let last = p.encoder.layers.last_mut().unwrap();
        let out = last.bias.len();
        for r in 0..last.weight.shape()[0] {
            for c in out / 2..out {
                last.weight.data_mut()[r * out + c] = 0.0;
            }
        }
        for c in out / 2..out {
            last.bias.data_mut()[c] = -800.0;
        }
        let theta = BodyPose((0..48).map(|i| 0.01 * i as f64).collect());
        let cfg = AugmentConfig {
            mode: AugmentMode::ZeroPerturb,
            ..AugmentConfig::default()
        };
        let (a, pa) = dapa_augment(&p, &theta, "a", &cfg, &mut rng::stream(1, 1)).unwrap();
        let (b, _) = dapa_augment(&p, &theta, "a", &cfg, &mut rng::stream(2, 2)).unwrap();
        let mu = p.encode(&theta).unwrap().mu;
        assert_eq!(a, b);
        assert_eq!(a, p.decode(&mu).unwrap());
        assert_eq!(pa.z, pa.z_tilde);
    }

    #[test]
    fn random_pose_ignores_input_and_dapa_does_not() {
        let p = prior(2);
        let t1 = BodyPose(vec![0.0; 48]);
        let t2 = BodyPose(vec![0.8; 48]);
        let rand_cfg = AugmentConfig {
            mode: AugmentMode::RandomPose,
            ..AugmentConfig::default()
        };
        let (a, _) = dapa_augment(&p, &t1, "x", &rand_cfg, &mut rng::stream(5, 5)).unwrap();
        let (b, _) = dapa_augment(&p, &t2, "x", &rand_cfg, &mut rng::stream(5, 5)).unwrap();
        assert_eq!(a, b);
        let cfg = AugmentConfig::default();
        let (c, _) = dapa_augment(&p, &t1, "x", &cfg, &mut rng::stream(5, 5)).unwrap();
        let (d, _) = dapa_augment(&p, &t2, "x", &cfg, &mut rng::stream(5, 5)).unwrap();
        assert_ne!(c, d);
    }

    #[test]
    fn negative_scale_is_rejected() {
        let cfg = AugmentConfig {
            s: -0.1,
            ..AugmentConfig::default()
        };
        let r = dapa_augment(&prior(0), &BodyPose(vec![0.0; 48]), "x", &cfg, &mut rng::stream(0, 0));
        assert!(matches!(r, Err(AugmentError::BadScale(_))));
    }

    #[test]
    fn synthetic_labels_are_reproducible() {
        let tree = KinematicTree::default_17();
        let p = prior(3);
        let (pose, pv) = dapa_augment(&p, &BodyPose(vec![0.2; 48]), "x", &AugmentConfig::default(), &mut rng::stream(0, 0)).unwrap();
        let s = make_synthetic_example(&tree, None, pose, &ctx(), Modality::Keypoints2d, false, pv, &mut rng::stream(0, 1)).unwrap();
        let st = forward_kinematics(&tree, &s.pose, &s.orient, &s.shape, [0.0; 3]).unwrap();
        assert_eq!(st.joints, s.joints3d);
        assert_eq!(project(&s.joints3d, &s.cam), s.joints2d);
        assert_eq!(s.shape, ctx().shape);
        let kp = s.observation.keypoints().unwrap();
        assert!(kp.iter().zip(&s.joints2d).all(|(k, j)| k[0] == j[0] && k[1] == j[1] && k[2] == 1.0));
    }

    #[test]
    fn canonical_pose_gives_rotated_rest_joints() {
        let tree = KinematicTree::default_17();
        let s = make_synthetic_example(&tree, None, BodyPose::zeros(&tree), &ctx(), Modality::Keypoints2d, false, prov(), &mut rng::stream(0, 0)).unwrap();
        let c = ctx();
        let r = crate::body::rotation::rodrigues(c.orient.0);
        let rest = forward_kinematics(&tree, &BodyPose::zeros(&tree), &GlobalOrient([0.0; 3]), &c.shape, [0.0; 3]).unwrap();
        for (a, b) in s.joints3d.iter().zip(&rest.joints) {
            let rb = crate::body::rotation::apply(&r, *b);
            assert!((0..3).all(|k| (a[k] - rb[k]).abs() < 1e-12));
        }
    }

    #[test]
    fn sampled_shape_flag() {
        let tree = KinematicTree::default_17();
        let s = make_synthetic_example(&tree, None, BodyPose::zeros(&tree), &ctx(), Modality::Keypoints2d, true, prov(), &mut rng::stream(0, 0)).unwrap();
        assert_ne!(s.shape, ctx().shape);
        assert!(s.shape.0.iter().all(|b| b.abs() < 1.2));
    }
}
