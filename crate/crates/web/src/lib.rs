//! Browser bindings for three small views of the lab: posing and projecting
//! the body, perturbing a pose in the prior's latent space, and PCK of noisy
//! keypoint detections.
//!
//! Every exported method returns JSON (or SVG) text so the page needs no
//! extra glue.

use dapa_core::augment::perturb_latent;
use dapa_core::body::{build_template, forward_kinematics, lbs, rotation, BodyPose, BodyShape, GlobalOrient, KinematicTree, MeshTemplate, SHAPE_DIM};
use dapa_core::camera::{project, WeakPerspective};
use dapa_core::datagen::{corpus_weights, default_clusters, make_pose_corpus, synthesize_observation, NoiseParams, PoseCluster};
use dapa_core::metrics::{default_groups, mpjpe, pck_curve, torso_length, PckInput, PckTable};
use dapa_core::pose_prior::{norm, train_prior, PriorConfig, PriorParams};
use dapa_core::rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

pub const ALPHAS: [f64; 8] = [0.025, 0.05, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5];

#[derive(Debug, Serialize)]
pub struct Projection {
    pub joints: Vec<[f64; 2]>,
    pub vertices: Vec<[f64; 2]>,
}

#[derive(Debug, Serialize)]
pub struct PriorSummary {
    pub steps: usize,
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
}

#[derive(Debug, Serialize)]
pub struct Perturbation {
    pub base: Vec<[f64; 2]>,
    pub samples: Vec<Vec<[f64; 2]>>,
    pub z_norm: f64,
    pub z_tilde_norms: Vec<f64>,
    /// Mean joint displacement of each sample from the decoded base pose (mm).
    pub deviation_mm: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct DeviationCurve {
    pub s: Vec<f64>,
    pub mean_mm: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct PckDemo {
    pub table: PckTable,
    pub svg: String,
}

fn err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn to_json(v: &impl Serialize) -> String {
    serde_json::to_string(v).expect("demo payloads serialize")
}

#[wasm_bindgen]
pub struct Lab {
    tree: KinematicTree,
    template: MeshTemplate,
    clusters: Vec<PoseCluster>,
    prior: Option<PriorParams>,
}

impl Default for Lab {
    fn default() -> Self {
        Self::new()
    }
}

impl Lab {
    fn cluster(&self, name: &str) -> Result<&PoseCluster, String> {
        self.clusters
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| format!("unknown pose cluster {name:?}"))
    }

    fn joints3d(&self, pose: &BodyPose, orient: &GlobalOrient) -> Vec<[f64; 3]> {
        forward_kinematics(&self.tree, pose, orient, &BodyShape([0.0; SHAPE_DIM]), [0.0; 3])
            .expect("cluster poses match the tree")
            .joints
    }

    /// Cluster mean pose seen from `yaw`/`pitch` (radians) at camera `scale`.
    pub fn projection(&self, cluster: &str, yaw: f64, pitch: f64, scale: f64) -> Result<Projection, String> {
        let pose = self.cluster(cluster)?.mean.clone();
        let r = rotation::mul(&rotation::rodrigues([pitch, 0.0, 0.0]), &rotation::rodrigues([0.0, yaw, 0.0]));
        let orient = GlobalOrient(rotation::log_map(&r));
        let state = forward_kinematics(&self.tree, &pose, &orient, &BodyShape([0.0; SHAPE_DIM]), [0.0; 3])
            .map_err(|e| e.to_string())?;
        let cam = WeakPerspective::new(scale, 0.0, 0.0);
        Ok(Projection {
            joints: project(&state.joints, &cam),
            vertices: project(&lbs(&self.template, &state), &cam),
        })
    }

    pub fn fit_prior(&mut self, steps: usize, seed: u64) -> Result<PriorSummary, String> {
        let corpus = make_pose_corpus(&self.clusters, &corpus_weights(), 3000, seed).map_err(|e| e.to_string())?;
        let cfg = PriorConfig {
            hidden: vec![64, 64],
            steps: steps.max(1),
            batch_size: 64,
            seed,
            ..PriorConfig::default()
        };
        let (prior, log) = train_prior(&corpus.poses, &cfg).map_err(|e| e.to_string())?;
        self.prior = Some(prior);
        let last = log.last().expect("at least one step");
        Ok(PriorSummary {
            steps: cfg.steps,
            loss: last.loss,
            recon: last.recon,
            kl: last.kl,
        })
    }

    /// `count` perturbations `z ⊙ (1 + s·ε)` of the cluster mean's posterior mean.
    pub fn perturbation(&self, cluster: &str, s: f64, count: usize, seed: u64) -> Result<Perturbation, String> {
        let prior = self.prior.as_ref().ok_or("train the prior first")?;
        if !(s >= 0.0 && s.is_finite()) {
            return Err(format!("s must be finite and nonnegative, got {s}"));
        }
        let pose = &self.cluster(cluster)?.mean;
        let z = prior.encode(pose).map_err(|e| e.to_string())?.mu;
        let orient = GlobalOrient([0.0, 0.6, 0.0]);
        let base = self.joints3d(&prior.decode(&z).map_err(|e| e.to_string())?, &orient);
        let cam = WeakPerspective::new(0.9, 0.0, 0.0);
        let mut out = Perturbation {
            base: project(&base, &cam),
            samples: Vec::new(),
            z_norm: norm(&z),
            z_tilde_norms: Vec::new(),
            deviation_mm: Vec::new(),
        };
        for k in 0..count {
            let mut r = rng::stream(seed, rng::key(&[0xDE, k as u64]));
            let (zt, _) = perturb_latent(&z, s, &mut r);
            let j = self.joints3d(&prior.decode(&zt).map_err(|e| e.to_string())?, &orient);
            out.deviation_mm.push(1000.0 * mpjpe(&j, &base));
            out.z_tilde_norms.push(norm(&zt));
            out.samples.push(project(&j, &cam));
        }
        Ok(out)
    }

    pub fn deviation_curve(&self, cluster: &str, s_max: f64, points: usize, count: usize, seed: u64) -> Result<DeviationCurve, String> {
        let points = points.max(2);
        let mut curve = DeviationCurve {
            s: Vec::with_capacity(points),
            mean_mm: Vec::with_capacity(points),
        };
        for i in 0..points {
            let s = s_max * i as f64 / (points - 1) as f64;
            let p = self.perturbation(cluster, s, count.max(1), seed)?;
            curve.s.push(s);
            curve.mean_mm.push(p.deviation_mm.iter().sum::<f64>() / p.deviation_mm.len() as f64);
        }
        Ok(curve)
    }

    /// PCK of simulated detections against projected ground truth.
    pub fn detection_pck(&self, jitter: f64, dropout: f64, count: usize, seed: u64) -> Result<PckDemo, String> {
        if !(jitter >= 0.0 && (0.0..1.0).contains(&dropout)) {
            return Err("jitter must be nonnegative and dropout in [0, 1)".into());
        }
        let noise = NoiseParams {
            jitter_std: jitter,
            dropout,
            ..NoiseParams::none()
        };
        let mut inputs = Vec::with_capacity(count);
        for i in 0..count {
            let mut r = rng::stream(seed, rng::key(&[0x9C, i as u64]));
            let c = &self.clusters[i % self.clusters.len()];
            let yaw = 2.0 * std::f64::consts::PI * (i as f64 / count.max(1) as f64);
            let j = self.joints3d(&c.mean, &GlobalOrient([0.0, yaw, 0.0]));
            let gt = project(&j, &WeakPerspective::new(0.9, 0.0, 0.0));
            let det = synthesize_observation(&gt, &noise, &mut r);
            inputs.push(PckInput {
                torso: torso_length(&self.tree, &gt),
                visible: det.iter().map(|k| k[2] > 0.0).collect(),
                pred: det.iter().map(|k| [k[0], k[1]]).collect(),
                gt,
            });
        }
        let table = pck_curve(&inputs, &ALPHAS, &default_groups(&self.tree)).map_err(|e| e.to_string())?;
        let svg = table.to_svg(&format!("detections, jitter {jitter:.3}, dropout {dropout:.2}"));
        Ok(PckDemo { table, svg })
    }
}

#[wasm_bindgen]
impl Lab {
    #[wasm_bindgen(constructor)]
    pub fn new() -> Lab {
        let tree = KinematicTree::default_17();
        let template = build_template(&tree, 3, 8).expect("valid template settings");
        let clusters = default_clusters(&tree);
        Lab {
            tree,
            template,
            clusters,
            prior: None,
        }
    }

    #[wasm_bindgen(js_name = clusterNames)]
    pub fn cluster_names(&self) -> String {
        to_json(&self.clusters.iter().map(|c| c.name.as_str()).collect::<Vec<_>>())
    }

    /// Parent index of every joint (the root is its own parent).
    pub fn parents(&self) -> String {
        to_json(&self.tree.parents())
    }

    #[wasm_bindgen(js_name = hasPrior)]
    pub fn has_prior(&self) -> bool {
        self.prior.is_some()
    }

    #[wasm_bindgen(js_name = projectPose)]
    pub fn project_pose(&self, cluster: &str, yaw: f64, pitch: f64, scale: f64) -> Result<String, JsError> {
        self.projection(cluster, yaw, pitch, scale).map(|p| to_json(&p)).map_err(err)
    }

    #[wasm_bindgen(js_name = trainPrior)]
    pub fn train_prior(&mut self, steps: usize, seed: u64) -> Result<String, JsError> {
        self.fit_prior(steps, seed).map(|p| to_json(&p)).map_err(err)
    }

    pub fn perturb(&self, cluster: &str, s: f64, count: usize, seed: u64) -> Result<String, JsError> {
        self.perturbation(cluster, s, count, seed).map(|p| to_json(&p)).map_err(err)
    }

    #[wasm_bindgen(js_name = deviationCurve)]
    pub fn deviation_curve_json(&self, cluster: &str, s_max: f64, points: usize, count: usize, seed: u64) -> Result<String, JsError> {
        self.deviation_curve(cluster, s_max, points, count, seed).map(|c| to_json(&c)).map_err(err)
    }

    #[wasm_bindgen(js_name = pckCurve)]
    pub fn pck_curve_json(&self, jitter: f64, dropout: f64, count: usize, seed: u64) -> Result<String, JsError> {
        self.detection_pck(jitter, dropout, count, seed).map(|p| to_json(&p)).map_err(err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trained() -> Lab {
        let mut lab = Lab::new();
        lab.fit_prior(150, 1).unwrap();
        lab
    }

    #[test]
    fn projection_covers_joints_and_mesh() {
        let lab = Lab::new();
        let p = lab.projection("sitting", 0.4, 0.1, 0.9).unwrap();
        assert_eq!(p.joints.len(), 17);
        assert_eq!(p.vertices.len(), 384);
        assert!(lab.projection("flying", 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn camera_scale_scales_the_projection() {
        let lab = Lab::new();
        let a = lab.projection("walking", 0.3, 0.0, 0.5).unwrap();
        let b = lab.projection("walking", 0.3, 0.0, 1.0).unwrap();
        for (p, q) in a.joints.iter().zip(&b.joints) {
            assert!((2.0 * p[0] - q[0]).abs() < 1e-12 && (2.0 * p[1] - q[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn perturbation_needs_a_prior() {
        assert!(Lab::new().perturbation("standing", 0.5, 3, 0).is_err());
    }

    #[test]
    fn zero_scale_reproduces_the_base_pose() {
        let lab = trained();
        let p = lab.perturbation("kneeling", 0.0, 4, 3).unwrap();
        assert!(p.deviation_mm.iter().all(|d| d.abs() < 1e-9));
        assert!(p.z_tilde_norms.iter().all(|n| (n - p.z_norm).abs() < 1e-12));
        assert!(lab.perturbation("kneeling", -1.0, 1, 0).is_err());
    }

    #[test]
    fn deviation_grows_with_scale() {
        let lab = trained();
        let c = lab.deviation_curve("walking", 2.0, 3, 16, 5).unwrap();
        assert_eq!(c.mean_mm[0], 0.0);
        assert!(c.mean_mm[2] > c.mean_mm[1] && c.mean_mm[1] > 0.0, "{:?}", c.mean_mm);
    }

    #[test]
    fn clean_detections_score_perfectly() {
        let lab = Lab::new();
        let d = lab.detection_pck(0.0, 0.0, 20, 0).unwrap();
        assert!(d.table.overall.iter().all(|v| (*v - 1.0).abs() < 1e-12));
        let noisy = lab.detection_pck(0.05, 0.1, 40, 0).unwrap();
        assert!(noisy.table.overall[0] < 1.0);
        assert!(noisy.table.overall.windows(2).all(|w| w[1] >= w[0]));
        assert!(noisy.svg.starts_with("<svg"));
    }
}
