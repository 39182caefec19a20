//! Iterative body-parameter regressor.
//!
//! The parameter vector is laid out as `[orient (3) | body pose (3(J−1)) |
//! β (10) | camera pre-activation (3)]`. The camera scale is the softplus of
//! its pre-activation; translation is used as is.

mod observation;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::body::{BodyPose, BodyShape, GlobalOrient, KinematicTree, SHAPE_DIM};
use crate::camera::WeakPerspective;
use crate::datagen::Dataset;
use crate::nn::{MlpParams, MlpVars, NnError, Tape, Tensor, Var};

pub use observation::{Modality, Observation, SILHOUETTE_RES};

#[derive(Debug, Error)]
pub enum RegressorError {
    #[error("observation width {got} does not match the configured {expected}")]
    ObservationDim { expected: usize, got: usize },
    #[error("regressor expects {expected:?} observations, got {got:?}")]
    Modality { expected: Modality, got: Modality },
    #[error("no supervised samples to average")]
    EmptyDataset,
    #[error("regressor built for {expected} joints, tree has {got}")]
    Tree { expected: usize, got: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Length of the packed parameter vector for `num_joints` joints.
pub fn param_dim(num_joints: usize) -> usize {
    3 * num_joints + SHAPE_DIM + 3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressorConfig {
    pub iterations: usize,
    pub hidden: Vec<usize>,
    /// Factor applied to the initial output-layer weights.
    pub output_init_scale: f64,
    pub modality: Modality,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self {
            iterations: 3,
            hidden: vec![256, 256],
            output_init_scale: 0.01,
            modality: Modality::Keypoints2d,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressorParams {
    pub mlp: MlpParams,
    /// Iteration-0 estimate, `[P]`.
    pub mean_params: Tensor,
    pub iterations: usize,
    pub modality: Modality,
    pub num_joints: usize,
}

/// Typed view of a packed parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressorOutput {
    pub pose: BodyPose,
    pub orient: GlobalOrient,
    pub shape: BodyShape,
    pub cam: WeakPerspective,
    /// Packed parameters after each refinement iteration, `p_0..p_T`.
    pub trace: Vec<Vec<f64>>,
}

/// Unpacks `[orient | pose | β | cam pre-activation]`.
pub fn unpack(p: &[f64], num_joints: usize) -> (GlobalOrient, BodyPose, BodyShape, WeakPerspective) {
    let nj = num_joints;
    let orient = GlobalOrient([p[0], p[1], p[2]]);
    let pose = BodyPose(p[3..3 * nj].to_vec());
    let mut beta = [0.0; SHAPE_DIM];
    beta.copy_from_slice(&p[3 * nj..3 * nj + SHAPE_DIM]);
    let c = &p[3 * nj + SHAPE_DIM..];
    (orient, pose, BodyShape(beta), WeakPerspective::new(softplus(c[0]), c[1], c[2]))
}

/// Inverse of [`unpack`].
pub fn pack(orient: &GlobalOrient, pose: &BodyPose, shape: &BodyShape, cam: &WeakPerspective) -> Vec<f64> {
    let mut p = Vec::with_capacity(3 + pose.0.len() + SHAPE_DIM + 3);
    p.extend_from_slice(&orient.0);
    p.extend_from_slice(&pose.0);
    p.extend_from_slice(&shape.0);
    p.extend_from_slice(&[softplus_inv(cam.scale), cam.tx, cam.ty]);
    p
}

/// Elementwise mean of the supervised parameters of `ds`.
///
/// The camera scale is averaged in its natural units and then mapped back
/// through the softplus inverse.
pub fn init_mean_params(ds: &Dataset) -> Result<Vec<f64>, RegressorError> {
    let labels: Vec<_> = ds.samples.iter().filter_map(|s| s.training_labels()).collect();
    if labels.is_empty() {
        return Err(RegressorError::EmptyDataset);
    }
    let n = labels.len() as f64;
    let dim = 3 + labels[0].pose.0.len() + SHAPE_DIM + 3;
    let mut m = vec![0.0; dim];
    for l in &labels {
        let row: Vec<f64> = l
            .orient
            .0
            .iter()
            .chain(&l.pose.0)
            .chain(&l.shape.0)
            .chain(&l.cam.as_array())
            .copied()
            .collect();
        for (acc, v) in m.iter_mut().zip(row) {
            *acc += v / n;
        }
    }
    m[dim - 3] = softplus_inv(m[dim - 3]);
    Ok(m)
}

/// Tape handles for one batched forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// Final packed parameters `[B, P]`.
    pub params: Var,
    pub orient: Var,
    pub pose: Var,
    pub beta: Var,
    /// `(s, t_x, t_y)` after the softplus, `[B, 3]`.
    pub cam: Var,
    /// Local rotation matrices, root first, `[B, 9J]`.
    pub rotations: Var,
    /// Pelvis-rooted joints `[B, 3J]`.
    pub joints3d: Var,
    pub joints2d: Var,
    pub trace: Vec<Var>,
}

impl RegressorParams {
    pub fn init<R: Rng>(
        cfg: &RegressorConfig,
        tree: &KinematicTree,
        mean_params: Vec<f64>,
        rng: &mut R,
    ) -> Result<Self, RegressorError> {
        let nj = tree.num_joints();
        let p = param_dim(nj);
        if mean_params.len() != p {
            return Err(NnError::Shape {
                op: "init_regressor",
                expected: format!("{p} mean parameters"),
                got: format!("{}", mean_params.len()),
            }
            .into());
        }
        let obs = cfg.modality.dim(nj);
        let mut dims = vec![obs + p];
        dims.extend(&cfg.hidden);
        dims.push(p);
        let mut mlp = MlpParams::init(&dims, rng);
        mlp.scale_output_layer(cfg.output_init_scale);
        Ok(Self {
            mlp,
            mean_params: Tensor::vector(mean_params),
            iterations: cfg.iterations.max(1),
            modality: cfg.modality,
            num_joints: nj,
        })
    }

    pub fn param_dim(&self) -> usize {
        self.mean_params.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.mlp.input_dim() - self.param_dim()
    }

    fn check_tree(&self, tree: &KinematicTree) -> Result<(), RegressorError> {
        if tree.num_joints() != self.num_joints {
            return Err(RegressorError::Tree {
                expected: self.num_joints,
                got: tree.num_joints(),
            });
        }
        Ok(())
    }

    pub fn check_observation(&self, obs: &Observation) -> Result<(), RegressorError> {
        if obs.modality != self.modality {
            return Err(RegressorError::Modality {
                expected: self.modality,
                got: obs.modality,
            });
        }
        if obs.dim() != self.obs_dim() {
            return Err(RegressorError::ObservationDim {
                expected: self.obs_dim(),
                got: obs.dim(),
            });
        }
        Ok(())
    }

    /// Stacks observations into a `[B, obs_dim]` tensor after validation.
    pub fn stack_observations<'a>(
        &self,
        obs: impl IntoIterator<Item = &'a Observation>,
    ) -> Result<Tensor, RegressorError> {
        let mut rows = Vec::new();
        for o in obs {
            self.check_observation(o)?;
            rows.push(o.values.as_slice());
        }
        Ok(if rows.is_empty() {
            Tensor::zeros(&[0, self.obs_dim()])
        } else {
            Tensor::stack_rows(&rows)
        })
    }

    /// Records the unrolled refinement and the body/camera heads on `tape`.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        vars: &MlpVars,
        tree: &Arc<KinematicTree>,
        obs: Tensor,
    ) -> Result<ForwardVars, RegressorError> {
        self.check_tree(tree)?;
        if obs.cols() != self.obs_dim() {
            return Err(RegressorError::ObservationDim {
                expected: self.obs_dim(),
                got: obs.cols(),
            });
        }
        let b = obs.rows();
        let nj = self.num_joints;
        let pdim = self.param_dim();
        let x = tape.leaf(obs);
        let init: Vec<f64> = (0..b).flat_map(|_| self.mean_params.data().iter().copied()).collect();
        let mut p = tape.leaf(Tensor::matrix(b, pdim, init));
        let mut trace = vec![p];
        for _ in 0..self.iterations {
            let inp = tape.concat_cols(&[x, p]);
            let delta = self.mlp.forward_on(tape, vars, inp)?;
            p = tape.add(p, delta);
            trace.push(p);
        }
        let orient = tape.slice_cols(p, 0, 3);
        let pose = tape.slice_cols(p, 3, 3 * nj);
        let beta = tape.slice_cols(p, 3 * nj, 3 * nj + SHAPE_DIM);
        let cam_raw = tape.slice_cols(p, 3 * nj + SHAPE_DIM, pdim);
        let s_raw = tape.slice_cols(cam_raw, 0, 1);
        let s = tape.softplus(s_raw);
        let t = tape.slice_cols(cam_raw, 1, 3);
        let cam = tape.concat_cols(&[s, t]);
        let aa = tape.slice_cols(p, 0, 3 * nj);
        let rot = tape.rodrigues(aa);
        let rotations = tape.reshape(rot, &[b, 9 * nj]);
        let offsets = tape.shaped_offsets(beta, tree);
        let joints3d = tape.kinematics(rotations, offsets, tree);
        let joints2d = tape.project(joints3d, cam);
        Ok(ForwardVars {
            params: p,
            orient,
            pose,
            beta,
            cam,
            rotations,
            joints3d,
            joints2d,
            trace,
        })
    }

    /// Tape-free batched inference; returns the packed parameter trace
    /// `p_0..p_T`, each `[B, P]`.
    pub fn forward_params(&self, obs: &Tensor) -> Result<Vec<Tensor>, RegressorError> {
        if obs.cols() != self.obs_dim() {
            return Err(RegressorError::ObservationDim {
                expected: self.obs_dim(),
                got: obs.cols(),
            });
        }
        let b = obs.rows();
        let pdim = self.param_dim();
        let od = self.obs_dim();
        let init: Vec<f64> = (0..b).flat_map(|_| self.mean_params.data().iter().copied()).collect();
        let mut p = Tensor::matrix(b, pdim, init);
        let mut trace = vec![p.clone()];
        for _ in 0..self.iterations {
            let mut inp = Vec::with_capacity(b * (od + pdim));
            for r in 0..b {
                inp.extend_from_slice(obs.row(r));
                inp.extend_from_slice(p.row(r));
            }
            let delta = self.mlp.forward(&Tensor::matrix(b, od + pdim, inp))?;
            p.add_assign(&delta);
            trace.push(p.clone());
        }
        Ok(trace)
    }

    /// Regresses one observation.
    pub fn regress(&self, obs: &Observation) -> Result<RegressorOutput, RegressorError> {
        Ok(self.regress_batch(std::slice::from_ref(obs))?.remove(0))
    }

    pub fn regress_batch(&self, obs: &[Observation]) -> Result<Vec<RegressorOutput>, RegressorError> {
        let x = self.stack_observations(obs)?;
        let trace = self.forward_params(&x)?;
        Ok((0..obs.len())
            .map(|r| {
                let last = trace.last().unwrap().row(r);
                let (orient, pose, shape, cam) = unpack(last, self.num_joints);
                RegressorOutput {
                    pose,
                    orient,
                    shape,
                    cam,
                    trace: trace.iter().map(|t| t.row(r).to_vec()).collect(),
                }
            })
            .collect())
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.mlp.tensors()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.mlp.tensors_mut()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::{build_template, forward_kinematics};
    use crate::camera::project;
    use crate::datagen::{sample_domain, Domain, DomainSpec, Labels, Sample};
    use crate::nn::grad_check;
    use crate::rng;

    fn small_cfg() -> RegressorConfig {
        RegressorConfig {
            iterations: 3,
            hidden: vec![12],
            output_init_scale: 1.0,
            modality: Modality::Keypoints2d,
        }
    }

    fn zero_net(params: &mut RegressorParams) {
        for t in params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn labelled(pose_val: f64, scale: f64, tree: &KinematicTree) -> Sample {
        let pose = BodyPose(vec![pose_val; tree.pose_dim()]);
        let labels = Labels {
            pose,
            orient: GlobalOrient([0.1, pose_val, 0.0]),
            shape: BodyShape([pose_val; SHAPE_DIM]),
            cam: WeakPerspective::new(scale, 0.02, -0.01),
            joints3d: vec![[0.0; 3]; tree.num_joints()],
        };
        let kp = vec![[0.0, 0.0, 1.0]; tree.num_joints()];
        Sample::new("x".into(), Domain::Source, Observation::from_keypoints(&kp), kp, Some(labels))
    }

    fn ds(samples: Vec<Sample>) -> Dataset {
        Dataset {
            name: "t".into(),
            fingerprint: String::new(),
            seed: 0,
            samples,
        }
    }

    #[test]
    fn softplus_inverse_round_trip() {
        for y in [1e-3, 0.5, 1.0, 3.0, 40.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
    }

    #[test]
    fn mean_params_of_identical_samples() {
        let tree = KinematicTree::default_17();
        let s = labelled(0.2, 0.9, &tree);
        let m = init_mean_params(&ds(vec![s.clone(), s.clone(), s])).unwrap();
        let (o, p, b, c) = unpack(&m, 17);
        assert!(p.0.iter().all(|v| (v - 0.2).abs() < 1e-15));
        assert_eq!(o.0, [0.1, 0.2, 0.0]);
        assert!(b.0.iter().all(|v| (v - 0.2).abs() < 1e-15));
        assert!((c.scale - 0.9).abs() < 1e-12);
    }

    #[test]
    fn mean_params_midpoint() {
        let tree = KinematicTree::default_17();
        let m = init_mean_params(&ds(vec![labelled(0.2, 0.8, &tree), labelled(-0.4, 1.0, &tree)])).unwrap();
        let (_, p, _, c) = unpack(&m, 17);
        assert!(p.0.iter().all(|v| (v + 0.1).abs() < 1e-15));
        assert!((c.scale - 0.9).abs() < 1e-12);
    }

    #[test]
    fn mean_params_need_supervision() {
        assert!(matches!(init_mean_params(&ds(vec![])), Err(RegressorError::EmptyDataset)));
    }

    #[test]
    fn default_source_mean_is_finite() {
        let tree = KinematicTree::default_17();
        let t = build_template(&tree, 3, 8).unwrap();
        let src = sample_domain(&DomainSpec { count: 300, ..DomainSpec::default_source() }, &tree, &t).unwrap();
        let m = init_mean_params(&src).unwrap();
        assert_eq!(m.len(), param_dim(17));
        assert!(m.iter().all(|v| v.is_finite()));
        let (.., cam) = unpack(&m, 17);
        assert!(cam.scale > 0.8 && cam.scale < 1.1, "{}", cam.scale);
    }

    #[test]
    fn zero_network_returns_mean_params() {
        let tree = KinematicTree::default_17();
        let mean: Vec<f64> = (0..param_dim(17)).map(|i| 0.01 * i as f64).collect();
        let mut params = RegressorParams::init(&small_cfg(), &tree, mean.clone(), &mut rng::stream(0, 0)).unwrap();
        zero_net(&mut params);
        let kp: Vec<[f64; 3]> = (0..17).map(|i| [0.1 * i as f64, -0.3, 0.9]).collect();
        let out = params.regress(&Observation::from_keypoints(&kp)).unwrap();
        assert_eq!(out.trace.last().unwrap(), &mean);
        assert_eq!(out.trace.len(), 4);
    }

    #[test]
    fn extra_iterations_with_zero_effect_change_nothing() {
        let tree = KinematicTree::default_17();
        let mean = vec![0.05; param_dim(17)];
        let mut params = RegressorParams::init(&small_cfg(), &tree, mean, &mut rng::stream(0, 0)).unwrap();
        zero_net(&mut params);
        let obs = Observation::from_keypoints(&vec![[0.2, 0.1, 1.0]; 17]);
        let one = RegressorParams { iterations: 1, ..params.clone() }.regress(&obs).unwrap();
        let two = RegressorParams { iterations: 2, ..params }.regress(&obs).unwrap();
        assert_eq!(one.pose, two.pose);
        assert_eq!(one.cam, two.cam);
    }

    #[test]
    fn tape_forward_agrees_with_fk() {
        let tree = Arc::new(KinematicTree::default_17());
        let mean = vec![0.0; param_dim(17)];
        let params = RegressorParams::init(&small_cfg(), &tree, mean, &mut rng::stream(3, 0)).unwrap();
        let obs: Vec<Observation> = (0..3)
            .map(|b| Observation::from_keypoints(&vec![[0.1 * b as f64, 0.2, 1.0]; 17]))
            .collect();
        let outs = params.regress_batch(&obs).unwrap();
        let mut tape = Tape::new();
        let vars = params.mlp.register(&mut tape);
        let fwd = params
            .forward_on(&mut tape, &vars, &tree, params.stack_observations(&obs).unwrap())
            .unwrap();
        for (b, out) in outs.iter().enumerate() {
            let st = forward_kinematics(&tree, &out.pose, &out.orient, &out.shape, [0.0; 3]).unwrap();
            let j3 = tape.value(fwd.joints3d).row(b).to_vec();
            let j2 = tape.value(fwd.joints2d).row(b).to_vec();
            let p2 = project(&st.joints, &out.cam);
            for j in 0..17 {
                for c in 0..3 {
                    assert!((j3[3 * j + c] - st.joints[j][c]).abs() < 1e-12);
                }
                for c in 0..2 {
                    assert!((j2[2 * j + c] - p2[j][c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn camera_scale_stays_positive() {
        let tree = KinematicTree::default_17();
        let mut mean = vec![0.0; param_dim(17)];
        let n = mean.len();
        mean[n - 3] = -50.0;
        let params = RegressorParams::init(&small_cfg(), &tree, mean, &mut rng::stream(1, 0)).unwrap();
        let out = params.regress(&Observation::from_keypoints(&vec![[5.0, -5.0, 1.0]; 17])).unwrap();
        assert!(out.cam.scale > 0.0);
    }

    #[test]
    fn unrolled_refinement_gradients() {
        let tree = Arc::new(KinematicTree::default_17());
        let mut mean = vec![0.0; param_dim(17)];
        let n = mean.len();
        mean[n - 3] = 0.5;
        let mut params = RegressorParams::init(&small_cfg(), &tree, mean, &mut rng::stream(7, 0)).unwrap();
        params.mlp.scale_output_layer(0.2);
        let obs = Tensor::stack_rows(&[
            Observation::from_keypoints(&vec![[0.3, -0.2, 1.0]; 17]).values,
            Observation::from_keypoints(&vec![[-0.1, 0.4, 0.5]; 17]).values,
        ]);
        let target2 = Tensor::full(&[2, 34], 0.1);
        let target3 = Tensor::full(&[2, 51], -0.05);
        let init: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
        let p0 = params.clone();
        let report = grad_check(
            |tape, vars| {
                let mut p = p0.clone();
                for (t, v) in p.mlp.tensors_mut().into_iter().zip(vars) {
                    *t = tape.value(*v).clone();
                }
                let mv = MlpVars {
                    weights: vars.iter().step_by(2).copied().collect(),
                    biases: vars.iter().skip(1).step_by(2).copied().collect(),
                };
                let f = p.forward_on(tape, &mv, &tree, obs.clone()).unwrap();
                let a = tape.sq_err(f.joints2d, target2.clone(), Tensor::full(&[2, 34], 1.0));
                let b = tape.sq_err(f.joints3d, target3.clone(), Tensor::full(&[2, 51], 1.0));
                tape.add(a, b)
            },
            &init,
            1e-4,
        );
        assert!(report.passed(), "{:?}", report.max_rel_err);
    }

    #[test]
    fn observation_mismatch_is_rejected() {
        let tree = KinematicTree::default_17();
        let params = RegressorParams::init(&small_cfg(), &tree, vec![0.0; 64], &mut rng::stream(0, 0)).unwrap();
        let short = Observation::from_keypoints(&vec![[0.0; 3]; 5]);
        assert!(matches!(params.regress(&short), Err(RegressorError::ObservationDim { .. })));
        let sil = Observation {
            modality: Modality::Silhouette,
            values: vec![0.0; 51],
        };
        assert!(matches!(params.regress(&sil), Err(RegressorError::Modality { .. })));
    }

    #[test]
    fn deterministic_output() {
        let tree = KinematicTree::default_17();
        let params = RegressorParams::init(&small_cfg(), &tree, vec![0.1; 64], &mut rng::stream(2, 0)).unwrap();
        let obs = Observation::from_keypoints(&vec![[0.3, 0.1, 0.8]; 17]);
        assert_eq!(params.regress(&obs).unwrap(), params.regress(&obs).unwrap());
    }
}
