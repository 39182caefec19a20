//! Variational pose prior over body-pose vectors.
//!
//! The encoder maps a pose to `(μ, log σ)`; the decoder maps a latent code to a
//! pose whose components are squashed into `(−π, π)` by `π·tanh`. `σ` is a
//! per-dimension standard deviation.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::body::BodyPose;
use crate::nn::{AdamState, MlpParams, MlpVars, NnError, Tape, Tensor, Var};
use crate::rng;

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("expected {what} of length {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("pose corpus is empty")]
    EmptyCorpus,
    #[error("prior training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub beta_kl: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            hidden: vec![128, 128],
            beta_kl: 0.005,
            lr: 1e-3,
            steps: 8000,
            batch_size: 128,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorParams {
    /// `pose_dim → 2d` (μ then log σ).
    pub encoder: MlpParams,
    /// `d → pose_dim`, followed by `π·tanh`.
    pub decoder: MlpParams,
    pub latent_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Tape handles of both networks.
#[derive(Clone, Debug)]
pub struct PriorVars {
    pub encoder: MlpVars,
    pub decoder: MlpVars,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorLogRow {
    pub step: usize,
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
}

impl PriorParams {
    pub fn init<R: Rng>(cfg: &PriorConfig, pose_dim: usize, rng: &mut R) -> Self {
        let d = cfg.latent_dim;
        let mut enc_dims = vec![pose_dim];
        enc_dims.extend(&cfg.hidden);
        enc_dims.push(2 * d);
        let mut dec_dims = vec![d];
        dec_dims.extend(cfg.hidden.iter().rev());
        dec_dims.push(pose_dim);
        Self {
            encoder: MlpParams::init(&enc_dims, rng),
            decoder: MlpParams::init(&dec_dims, rng),
            latent_dim: d,
        }
    }

    pub fn pose_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn register(&self, tape: &mut Tape) -> PriorVars {
        PriorVars {
            encoder: self.encoder.register(tape),
            decoder: self.decoder.register(tape),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut t = self.encoder.tensors();
        t.extend(self.decoder.tensors());
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = self.encoder.tensors_mut();
        t.extend(self.decoder.tensors_mut());
        t
    }

    /// `(μ, log σ)` for a `[B, pose_dim]` batch.
    pub fn encode_on(&self, tape: &mut Tape, vars: &PriorVars, poses: Var) -> Result<(Var, Var), PriorError> {
        let h = self.encoder.forward_on(tape, &vars.encoder, poses)?;
        let d = self.latent_dim;
        Ok((tape.slice_cols(h, 0, d), tape.slice_cols(h, d, 2 * d)))
    }

    pub fn decode_on(&self, tape: &mut Tape, vars: &PriorVars, z: Var) -> Result<Var, PriorError> {
        let h = self.decoder.forward_on(tape, &vars.decoder, z)?;
        let t = tape.tanh(h);
        Ok(tape.scale(t, PI))
    }

    pub fn encode(&self, pose: &BodyPose) -> Result<Posterior, PriorError> {
        Ok(self.encode_batch(std::slice::from_ref(pose))?.remove(0))
    }

    pub fn encode_batch(&self, poses: &[BodyPose]) -> Result<Vec<Posterior>, PriorError> {
        let pd = self.pose_dim();
        if let Some(p) = poses.iter().find(|p| p.0.len() != pd) {
            return Err(PriorError::Dimension {
                what: "pose",
                expected: pd,
                got: p.0.len(),
            });
        }
        if poses.is_empty() {
            return Ok(vec![]);
        }
        let x = Tensor::stack_rows(&poses.iter().map(|p| p.0.as_slice()).collect::<Vec<_>>());
        let h = self.encoder.forward(&x)?;
        let d = self.latent_dim;
        Ok((0..poses.len())
            .map(|r| {
                let row = h.row(r);
                Posterior {
                    mu: row[..d].to_vec(),
                    sigma: row[d..2 * d].iter().map(|l| l.exp()).collect(),
                }
            })
            .collect())
    }

    pub fn decode(&self, z: &[f64]) -> Result<BodyPose, PriorError> {
        Ok(self.decode_batch(&[z.to_vec()])?.remove(0))
    }

    pub fn decode_batch(&self, z: &[Vec<f64>]) -> Result<Vec<BodyPose>, PriorError> {
        if let Some(bad) = z.iter().find(|z| z.len() != self.latent_dim) {
            return Err(PriorError::Dimension {
                what: "latent code",
                expected: self.latent_dim,
                got: bad.len(),
            });
        }
        if z.is_empty() {
            return Ok(vec![]);
        }
        let h = self.decoder.forward(&Tensor::stack_rows(z))?;
        Ok((0..z.len())
            .map(|r| BodyPose(h.row(r).iter().map(|v| PI * v.tanh()).collect()))
            .collect())
    }
}

/// `z = μ + σ ⊙ n` with `n` standard normal.
pub fn sample_posterior<R: Rng>(post: &Posterior, rng: &mut R) -> Vec<f64> {
    post.mu
        .iter()
        .zip(&post.sigma)
        .map(|(m, s)| {
            let n: f64 = StandardNormal.sample(rng);
            m + s * n
        })
        .collect()
}

/// `0.5·Σ(σ² + μ² − 1 − 2 log σ)`.
pub fn kl_to_standard_normal(post: &Posterior) -> f64 {
    post.mu
        .iter()
        .zip(&post.sigma)
        .map(|(m, s)| 0.5 * (s * s + m * m - 1.0 - 2.0 * s.ln()))
        .sum()
}

/// Fits the prior by minimizing per-sample squared reconstruction error plus
/// `beta_kl` times the KL term, both averaged over the batch.
pub fn train_prior(corpus: &[BodyPose], cfg: &PriorConfig) -> Result<(PriorParams, Vec<PriorLogRow>), PriorError> {
    if corpus.is_empty() {
        return Err(PriorError::EmptyCorpus);
    }
    let pd = corpus[0].0.len();
    if let Some(p) = corpus.iter().find(|p| p.0.len() != pd) {
        return Err(PriorError::Dimension {
            what: "pose",
            expected: pd,
            got: p.0.len(),
        });
    }
    let mut params = PriorParams::init(cfg, pd, &mut rng::stream(cfg.seed, rng::key(&[0x9A, 0])));
    let mut adam = AdamState::new(params.tensors(), cfg.lr);
    let b = cfg.batch_size.max(1);
    let d = cfg.latent_dim;
    let mut history = Vec::with_capacity(cfg.steps);
    let mut tape = Tape::new();
    for step in 0..cfg.steps {
        let mut r = rng::stream(cfg.seed, rng::key(&[0x9A, 1, step as u64]));
        let mut x = Vec::with_capacity(b * pd);
        for _ in 0..b {
            x.extend_from_slice(&corpus[r.random_range(0..corpus.len())].0);
        }
        let eps: Vec<f64> = (0..b * d).map(|_| StandardNormal.sample(&mut r)).collect();
        let x = Tensor::matrix(b, pd, x);

        tape.reset();
        let vars = params.register(&mut tape);
        let xv = tape.leaf(x.clone());
        let (mu, ls) = params.encode_on(&mut tape, &vars, xv)?;
        let sigma = tape.exp(ls);
        let ev = tape.leaf(Tensor::matrix(b, d, eps));
        let noise = tape.mul(sigma, ev);
        let z = tape.add(mu, noise);
        let recon_pose = params.decode_on(&mut tape, &vars, z)?;
        let recon = tape.sq_err(recon_pose, x, Tensor::full(&[b, pd], 1.0 / (b * pd) as f64));
        let kl = tape.kl_std_normal(mu, ls);
        let kl_w = tape.scale(kl, cfg.beta_kl / b as f64);
        let loss = tape.add(recon, kl_w);
        let lv = tape.value(loss).item();
        let (rv, kv) = (tape.value(recon).item(), tape.value(kl).item() / b as f64);
        if !lv.is_finite() {
            return Err(PriorError::Diverged { step, loss: lv });
        }
        let grads = tape.backward(loss)?;
        let mut all_vars = vars.encoder.vars();
        all_vars.extend(vars.decoder.vars());
        let g: Vec<Tensor> = all_vars.iter().map(|v| grads.get(*v)).collect();
        adam.step(&mut params.tensors_mut(), &g).map_err(|e| match e {
            NnError::NonFinite(_) => PriorError::Diverged { step, loss: lv },
            other => other.into(),
        })?;
        history.push(PriorLogRow {
            step,
            loss: lv,
            recon: rv,
            kl: kv,
        });
    }
    Ok((params, history))
}

/// Mean absolute per-component error of `decode(encode(θ).μ)` over `poses`.
pub fn reconstruction_mae(prior: &PriorParams, poses: &[BodyPose]) -> Result<f64, PriorError> {
    let post = prior.encode_batch(poses)?;
    let z: Vec<Vec<f64>> = post.into_iter().map(|p| p.mu).collect();
    let rec = prior.decode_batch(&z)?;
    Ok(mean_abs_err(poses, &rec))
}

/// Same error for the constant predictor that always outputs the mean of `train`.
pub fn mean_pose_mae(train: &[BodyPose], held_out: &[BodyPose]) -> f64 {
    let d = train[0].0.len();
    let mut mean = vec![0.0; d];
    for p in train {
        for (m, v) in mean.iter_mut().zip(&p.0) {
            *m += v / train.len() as f64;
        }
    }
    let pred = vec![BodyPose(mean); held_out.len()];
    mean_abs_err(held_out, &pred)
}

fn mean_abs_err(a: &[BodyPose], b: &[BodyPose]) -> f64 {
    let n: usize = a.iter().map(|p| p.0.len()).sum();
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.0.iter().zip(&y.0).map(|(u, v)| (u - v).abs()))
        .sum::<f64>()
        / n as f64
}

/// Euclidean norm.
pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
