//! Adaptation losses.
//!
//! Conventions: point terms are the mean over points of the squared
//! Euclidean distance; the pose term is the mean over body joints of the
//! squared Frobenius distance between rotation matrices (global orientation
//! excluded); the shape term is the mean over the ten coefficients. Batch
//! losses are means over contributing samples. Reported terms include their
//! λ factor, so `total` is their plain sum.

use serde::{Deserialize, Serialize};

use crate::augment::SyntheticSample;
use crate::body::{rotation, BodyPose, BodyShape, SHAPE_DIM};
use crate::datagen::Labels;
use crate::nn::{Tape, Tensor, Var};
use crate::regressor::ForwardVars;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_2d: f64,
    pub lambda_3d: f64,
    pub lambda_theta: f64,
    pub lambda_beta: f64,
    /// Weight real keypoints by detection confidence; otherwise every
    /// visible keypoint counts equally.
    pub confidence_weighting: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_2d: 5.0,
            lambda_3d: 5.0,
            lambda_theta: 1.0,
            lambda_beta: 0.001,
            confidence_weighting: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        let all = [self.lambda_2d, self.lambda_3d, self.lambda_theta, self.lambda_beta];
        if all.iter().all(|l| l.is_finite() && *l >= 0.0) {
            Ok(())
        } else {
            Err(format!("loss weights must be finite and nonnegative: {all:?}"))
        }
    }
}

/// Full supervision of one example, used for both source labels and
/// synthetic examples.
#[derive(Clone, Debug, PartialEq)]
pub struct Supervision {
    pub joints2d: Vec<[f64; 2]>,
    pub joints3d: Vec<[f64; 3]>,
    pub pose: BodyPose,
    pub shape: BodyShape,
}

impl From<&SyntheticSample> for Supervision {
    fn from(s: &SyntheticSample) -> Self {
        Self {
            joints2d: s.joints2d.clone(),
            joints3d: s.joints3d.clone(),
            pose: s.pose.clone(),
            shape: s.shape,
        }
    }
}

impl From<&Labels> for Supervision {
    fn from(l: &Labels) -> Self {
        Self {
            joints2d: l.joints2d(),
            joints3d: l.joints3d.clone(),
            pose: l.pose.clone(),
            shape: l.shape,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SynTerms {
    pub d2: f64,
    pub d3: f64,
    pub theta: f64,
    pub beta: f64,
}

impl SynTerms {
    pub fn total(&self) -> f64 {
        self.d2 + self.d3 + self.theta + self.beta
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub real_2d: f64,
    pub syn_2d: f64,
    pub syn_3d: f64,
    pub syn_theta: f64,
    pub syn_beta: f64,
    pub n_real: usize,
    pub n_syn: usize,
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Effective per-keypoint weights.
fn keypoint_weights(conf: &[f64], w: &LossWeights) -> Vec<f64> {
    conf.iter()
        .map(|&c| {
            if c <= 0.0 {
                0.0
            } else if w.confidence_weighting {
                c
            } else {
                1.0
            }
        })
        .collect()
}

/// `λ_2D · Σ c_i ‖J_reg,i − J_gt,i‖² / Σ c_i`; `None` when no keypoint has
/// positive confidence.
pub fn loss_real(j_reg: &[[f64; 2]], j_gt: &[[f64; 2]], conf: &[f64], w: &LossWeights) -> Option<f64> {
    let c = keypoint_weights(conf, w);
    let total: f64 = c.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let s: f64 = j_reg.iter().zip(j_gt).zip(&c).map(|((a, b), c)| c * sq(a, b)).sum();
    Some(w.lambda_2d * s / total)
}

fn centered(p: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let r = p[0];
    p.iter().map(|q| [q[0] - r[0], q[1] - r[1], q[2] - r[2]]).collect()
}

fn pose_rotations(pose: &BodyPose) -> Vec<f64> {
    (0..pose.num_rotations()).flat_map(|i| rotation::rodrigues(pose.joint(i))).collect()
}

/// Synthetic-style loss of one prediction against full supervision.
pub fn loss_syn(pred: &Supervision, target: &Supervision, w: &LossWeights) -> SynTerms {
    let k = target.joints2d.len() as f64;
    let d2 = pred.joints2d.iter().zip(&target.joints2d).map(|(a, b)| sq(a, b)).sum::<f64>() / k;
    let (pc, tc) = (centered(&pred.joints3d), centered(&target.joints3d));
    let d3 = pc.iter().zip(&tc).map(|(a, b)| sq(a, b)).sum::<f64>() / k;
    let nr = target.pose.num_rotations().max(1) as f64;
    let theta = sq(&pose_rotations(&pred.pose), &pose_rotations(&target.pose)) / nr;
    let beta = sq(&pred.shape.0, &target.shape.0) / SHAPE_DIM as f64;
    SynTerms {
        d2: w.lambda_2d * d2,
        d3: w.lambda_3d * d3,
        theta: w.lambda_theta * theta,
        beta: w.lambda_beta * beta,
    }
}

/// Batch means of per-sample losses; an empty side contributes 0.
pub fn total_loss(real: &[f64], syn: &[SynTerms]) -> LossReport {
    let mean = |f: &dyn Fn(&SynTerms) -> f64| {
        if syn.is_empty() {
            0.0
        } else {
            syn.iter().map(f).sum::<f64>() / syn.len() as f64
        }
    };
    let real_2d = if real.is_empty() {
        0.0
    } else {
        real.iter().sum::<f64>() / real.len() as f64
    };
    let (syn_2d, syn_3d, syn_theta, syn_beta) = (mean(&|t| t.d2), mean(&|t| t.d3), mean(&|t| t.theta), mean(&|t| t.beta));
    LossReport {
        total: real_2d + syn_2d + syn_3d + syn_theta + syn_beta,
        real_2d,
        syn_2d,
        syn_3d,
        syn_theta,
        syn_beta,
        n_real: real.len(),
        n_syn: syn.len(),
    }
}

/// Tape form of the batch-mean real loss over `joints2d` (`[B, 2K]`).
/// Returns the loss node (if any sample contributes) and the number of
/// contributing samples.
pub fn real_loss_on(tape: &mut Tape, joints2d: Var, keypoints: &[&[[f64; 3]]], w: &LossWeights) -> (Option<Var>, usize) {
    let b = keypoints.len();
    let k2 = tape.value(joints2d).cols();
    let mut target = vec![0.0; b * k2];
    let mut weights = vec![0.0; b * k2];
    let mut used = 0;
    let rows: Vec<(usize, Vec<f64>, f64)> = keypoints
        .iter()
        .enumerate()
        .filter_map(|(r, kp)| {
            let c = keypoint_weights(&kp.iter().map(|k| k[2]).collect::<Vec<_>>(), w);
            let total: f64 = c.iter().sum();
            (total > 0.0).then_some((r, c, total))
        })
        .collect();
    for (r, c, total) in &rows {
        used += 1;
        for (i, kp) in keypoints[*r].iter().enumerate() {
            for d in 0..2 {
                target[r * k2 + 2 * i + d] = kp[d];
                weights[r * k2 + 2 * i + d] = c[i] / total;
            }
        }
    }
    if used == 0 {
        return (None, 0);
    }
    let scale = w.lambda_2d / used as f64;
    weights.iter_mut().for_each(|v| *v *= scale);
    let loss = tape.sq_err(joints2d, Tensor::matrix(b, k2, target), Tensor::matrix(b, k2, weights));
    (Some(loss), used)
}

/// Loss nodes of the four supervised terms, λ-weighted and batch-averaged.
#[derive(Clone, Copy, Debug)]
pub struct SynVars {
    pub d2: Var,
    pub d3: Var,
    pub theta: Var,
    pub beta: Var,
}

impl SynVars {
    pub fn sum(&self, tape: &mut Tape) -> Var {
        let a = tape.add(self.d2, self.d3);
        let b = tape.add(self.theta, self.beta);
        tape.add(a, b)
    }

    pub fn terms(&self, tape: &Tape) -> SynTerms {
        SynTerms {
            d2: tape.value(self.d2).item(),
            d3: tape.value(self.d3).item(),
            theta: tape.value(self.theta).item(),
            beta: tape.value(self.beta).item(),
        }
    }
}

/// Tape form of the batch-mean [`loss_syn`] for a forward pass over
/// `targets.len()` examples.
pub fn syn_loss_on(tape: &mut Tape, fwd: &ForwardVars, targets: &[Supervision], w: &LossWeights) -> SynVars {
    let b = targets.len();
    let k = targets[0].joints2d.len();
    let nr = targets[0].pose.num_rotations();
    let bf = b as f64;
    let t2: Vec<f64> = targets.iter().flat_map(|t| t.joints2d.iter().flatten().copied()).collect();
    let t3: Vec<f64> = targets.iter().flat_map(|t| centered(&t.joints3d).into_iter().flatten()).collect();
    let tr: Vec<f64> = targets.iter().flat_map(|t| pose_rotations(&t.pose)).collect();
    let tb: Vec<f64> = targets.iter().flat_map(|t| t.shape.0).collect();

    let d2 = tape.sq_err(fwd.joints2d, Tensor::matrix(b, 2 * k, t2), Tensor::full(&[b, 2 * k], w.lambda_2d / (bf * k as f64)));
    let c3 = tape.center_root(fwd.joints3d);
    let d3 = tape.sq_err(c3, Tensor::matrix(b, 3 * k, t3), Tensor::full(&[b, 3 * k], w.lambda_3d / (bf * k as f64)));
    let body_rot = tape.slice_cols(fwd.rotations, 9, 9 * (nr + 1));
    let theta = tape.sq_err(
        body_rot,
        Tensor::matrix(b, 9 * nr, tr),
        Tensor::full(&[b, 9 * nr], w.lambda_theta / (bf * nr.max(1) as f64)),
    );
    let beta = tape.sq_err(
        fwd.beta,
        Tensor::matrix(b, SHAPE_DIM, tb),
        Tensor::full(&[b, SHAPE_DIM], w.lambda_beta / (bf * SHAPE_DIM as f64)),
    );
    SynVars { d2, d3, theta, beta }
}

/// Combines optional real and synthetic loss nodes into the total.
pub fn total_on(
    tape: &mut Tape,
    real: Option<(Var, usize)>,
    syn: Option<(SynVars, usize)>,
) -> (Option<Var>, LossReport) {
    let mut report = LossReport::default();
    let mut total: Option<Var> = None;
    if let Some((r, n)) = real {
        report.real_2d = tape.value(r).item();
        report.n_real = n;
        total = Some(r);
    }
    if let Some((s, n)) = syn {
        let t = s.terms(tape);
        report.syn_2d = t.d2;
        report.syn_3d = t.d3;
        report.syn_theta = t.theta;
        report.syn_beta = t.beta;
        report.n_syn = n;
        let sv = s.sum(tape);
        total = Some(match total {
            Some(r) => tape.add(r, sv),
            None => sv,
        });
    }
    report.total = total.map(|t| tape.value(t).item()).unwrap_or(0.0);
    (total, report)
}
