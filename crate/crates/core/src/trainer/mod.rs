//! Pretraining, adaptation, evaluation and checkpoints.

mod checkpoint;

pub use checkpoint::{Checkpoint, CheckpointError, CheckpointKind, RngState, CHECKPOINT_VERSION};

use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{dapa_augment, make_synthetic_example, AugmentConfig, AugmentError, AugmentMode, ProvenanceRecord, RenderContext};
use crate::body::{forward_kinematics, lbs, BodyPose, BodyShape, GlobalOrient, KinematicTree, MeshTemplate};
use crate::camera::{project, WeakPerspective};
use crate::datagen::{Dataset, Sample, WeakSample};
use crate::metrics::{mpjpe, torso_length, EvalAccumulator, EvalReport, MetricsError, PckInput};
use crate::nn::{AdamState, NnError, Tape, Tensor};
use crate::objective::{real_loss_on, syn_loss_on, total_on, LossReport, LossWeights, Supervision};
use crate::pose_prior::{norm, PriorParams};
use crate::regressor::{unpack, RegressorError, RegressorParams};
use crate::rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },
    #[error("dataset {0:?} carries no usable supervision")]
    NoSupervision(String),
    #[error(transparent)]
    Regressor(#[from] RegressorError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Adapt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMode {
    Ft2d,
    Dapa,
    ZeroPerturb,
    RandomPose,
    RealOnly,
    SynOnly,
}

impl AdaptMode {
    pub const ALL: [AdaptMode; 6] = [
        AdaptMode::Ft2d,
        AdaptMode::Dapa,
        AdaptMode::ZeroPerturb,
        AdaptMode::RandomPose,
        AdaptMode::RealOnly,
        AdaptMode::SynOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AdaptMode::Ft2d => "ft2d",
            AdaptMode::Dapa => "dapa",
            AdaptMode::ZeroPerturb => "zero_perturb",
            AdaptMode::RandomPose => "random_pose",
            AdaptMode::RealOnly => "real_only",
            AdaptMode::SynOnly => "syn_only",
        }
    }

    /// Accepts both `zero_perturb` and `zero-perturb` spellings.
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.replace('-', "_");
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn uses_real(self) -> bool {
        !matches!(self, AdaptMode::SynOnly)
    }

    /// Augmentation mode of the synthetic branch, if any.
    pub fn augment_mode(self) -> Option<AugmentMode> {
        match self {
            AdaptMode::Dapa | AdaptMode::SynOnly => Some(AugmentMode::Dapa),
            AdaptMode::ZeroPerturb => Some(AugmentMode::ZeroPerturb),
            AdaptMode::RandomPose => Some(AugmentMode::RandomPose),
            AdaptMode::Ft2d | AdaptMode::RealOnly => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub phase: Phase,
    pub mode: AdaptMode,
    /// Total number of optimizer steps (a resumed run continues up to it).
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub augment: AugmentConfig,
    /// Steps between evaluation snapshots; 0 disables them.
    pub eval_interval: usize,
    /// Samples used per evaluation snapshot.
    pub eval_samples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pretrain()
    }
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            phase: Phase::Pretrain,
            mode: AdaptMode::Dapa,
            steps: 16000,
            batch_size: 32,
            lr: 1e-3,
            weights: LossWeights::default(),
            augment: AugmentConfig::default(),
            eval_interval: 0,
            eval_samples: 500,
            seed: 0,
        }
    }

    pub fn adapt(mode: AdaptMode) -> Self {
        Self {
            phase: Phase::Adapt,
            steps: 500,
            lr: 3e-4,
            eval_interval: 100,
            ..Self::pretrain()
        }
        .with_mode(mode)
    }

    /// Sets the adaptation mode and the augmentation settings it implies.
    pub fn with_mode(mut self, mode: AdaptMode) -> Self {
        self.mode = mode;
        if let Some(m) = mode.augment_mode() {
            self.augment.mode = m;
        }
        if mode == AdaptMode::ZeroPerturb {
            self.augment.s = 0.0;
        }
        self
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.augment.s >= 0.0 && self.augment.s.is_finite()) {
            return bad("augment.s must be finite and nonnegative");
        }
        self.weights.validate().map_err(TrainError::Config)?;
        Ok(())
    }
}

/// Mutable training state: parameters, optimizer and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub regressor: RegressorParams,
    pub adam: AdamState,
    pub step: usize,
}

impl TrainState {
    pub fn new(regressor: RegressorParams, lr: f64) -> Self {
        let adam = AdamState::new(regressor.tensors(), lr);
        Self {
            regressor,
            adam,
            step: 0,
        }
    }

    /// Starts a new phase from these parameters with a fresh optimizer.
    pub fn restart(&self, lr: f64) -> Self {
        Self::new(self.regressor.clone(), lr)
    }

    pub fn to_checkpoint(&self, tree: &KinematicTree, cfg: &TrainConfig, prior_ref: Option<String>) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            kind: CheckpointKind::Regressor,
            tree_fingerprint: tree.fingerprint(),
            step: self.step,
            rng: RngState {
                seed: cfg.seed,
                step: self.step,
            },
            config: serde_json::to_value(cfg).expect("config serializes"),
            prior_ref,
            regressor: Some(self.regressor.clone()),
            prior: None,
            optimizer: Some(self.adam.clone()),
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self, CheckpointError> {
        let regressor = c
            .regressor
            .clone()
            .ok_or_else(|| CheckpointError::Malformed("checkpoint has no regressor".into()))?;
        let adam = c
            .optimizer
            .clone()
            .ok_or_else(|| CheckpointError::Malformed("checkpoint has no optimizer state".into()))?;
        Ok(Self {
            regressor,
            adam,
            step: c.step,
        })
    }
}

/// One row of the training CSV log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: LossReport,
    pub mean_latent_norm: f64,
    pub eval_mpjpe: Option<f64>,
}

pub const LOG_HEADER: &str =
    "step,loss_total,loss_real,loss_syn_2d,loss_syn_3d,loss_syn_theta,loss_syn_beta,mean_latent_norm,eval_mpjpe";

impl LogRow {
    pub fn csv(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            l.total,
            l.real_2d,
            l.syn_2d,
            l.syn_3d,
            l.syn_theta,
            l.syn_beta,
            self.mean_latent_norm,
            self.eval_mpjpe.map(|v| v.to_string()).unwrap_or_default()
        )
    }
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

const TAG_PRETRAIN: u64 = 0x51;
const TAG_ADAPT: u64 = 0xAD;
const TAG_AUGMENT: u64 = 0xA6;

fn batch_indices<R: Rng>(n: usize, b: usize, rng: &mut R) -> Vec<usize> {
    if b <= n {
        index::sample(rng, n, b).into_vec()
    } else {
        (0..b).map(|_| rng.random_range(0..n)).collect()
    }
}

fn apply_step(state: &mut TrainState, grads: Vec<Tensor>, step: usize) -> Result<(), TrainError> {
    state
        .adam
        .step(&mut state.regressor.tensors_mut(), &grads)
        .map_err(|e| match e {
            NnError::NonFinite(what) => TrainError::Diverged { step, reason: what },
            other => other.into(),
        })
}

/// Fully supervised training on source samples, continuing from `state.step`
/// up to `cfg.steps`. `on_step` sees every log row as it is produced.
pub fn pretrain(
    state: &mut TrainState,
    tree: &Arc<KinematicTree>,
    source: &Dataset,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&LogRow),
) -> Result<Vec<LogRow>, TrainError> {
    cfg.validate()?;
    let supervised: Vec<(usize, Supervision)> = source
        .samples
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.training_labels().map(|l| (i, Supervision::from(l))))
        .collect();
    if supervised.is_empty() {
        return Err(TrainError::NoSupervision(source.name.clone()));
    }
    let mut history = Vec::new();
    let mut tape = Tape::new();
    state.adam.lr = cfg.lr;
    while state.step < cfg.steps {
        let step = state.step;
        let mut r = rng::stream(cfg.seed, rng::key(&[TAG_PRETRAIN, step as u64]));
        let idx = batch_indices(supervised.len(), cfg.batch_size, &mut r);
        let obs = state
            .regressor
            .stack_observations(idx.iter().map(|&i| &source.samples[supervised[i].0].observation))?;
        let targets: Vec<Supervision> = idx.iter().map(|&i| supervised[i].1.clone()).collect();
        tape.reset();
        let vars = state.regressor.mlp.register(&mut tape);
        let fwd = state.regressor.forward_on(&mut tape, &vars, tree, obs)?;
        let syn = syn_loss_on(&mut tape, &fwd, &targets, &cfg.weights);
        let (loss, mut report) = total_on(&mut tape, None, Some((syn, targets.len())));
        // Source supervision reported under the synthetic-term columns.
        report.n_syn = 0;
        let loss = loss.expect("nonempty batch");
        if !report.total.is_finite() {
            return Err(TrainError::Diverged {
                step,
                reason: format!("loss {}", report.total),
            });
        }
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> = vars.vars().iter().map(|v| grads.get(*v)).collect();
        apply_step(state, g, step)?;
        state.step += 1;
        let row = LogRow {
            step,
            loss: report,
            mean_latent_norm: 0.0,
            eval_mpjpe: None,
        };
        on_step(&row);
        history.push(row);
    }
    Ok(history)
}

/// Everything adaptation may read.
pub struct AdaptContext<'a> {
    pub tree: &'a Arc<KinematicTree>,
    pub template: Option<&'a MeshTemplate>,
    pub prior: &'a PriorParams,
    /// Adaptation-facing view of the target training split.
    pub target: &'a [WeakSample],
    /// Held-out target data for evaluation snapshots only.
    pub eval: Option<&'a Dataset>,
}

/// Output of one adaptation step besides the parameter update.
pub struct StepOutcome {
    pub row: LogRow,
    pub provenance: Vec<ProvenanceRecord>,
}

/// Weakly supervised adaptation, continuing from `state.step` up to
/// `cfg.steps`.
pub fn adapt(
    state: &mut TrainState,
    ctx: &AdaptContext,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepOutcome),
) -> Result<Vec<LogRow>, TrainError> {
    cfg.validate()?;
    if ctx.target.is_empty() {
        return Err(TrainError::NoSupervision("target".into()));
    }
    let nj = ctx.tree.num_joints();
    let aug_mode = cfg.mode.augment_mode();
    let aug_cfg = AugmentConfig {
        mode: aug_mode.unwrap_or(cfg.augment.mode),
        ..cfg.augment.clone()
    };
    let mut history = Vec::new();
    let mut tape = Tape::new();
    state.adam.lr = cfg.lr;
    while state.step < cfg.steps {
        let step = state.step;
        let mut r = rng::stream(cfg.seed, rng::key(&[TAG_ADAPT, step as u64]));
        let idx = batch_indices(ctx.target.len(), cfg.batch_size, &mut r);
        let batch: Vec<&WeakSample> = idx.iter().map(|&i| &ctx.target[i]).collect();
        let obs = state.regressor.stack_observations(batch.iter().map(|s| &s.observation))?;

        tape.reset();
        let vars = state.regressor.mlp.register(&mut tape);
        let fwd = state.regressor.forward_on(&mut tape, &vars, ctx.tree, obs)?;
        let real = if cfg.mode.uses_real() {
            let kps: Vec<&[[f64; 3]]> = batch.iter().map(|s| s.keypoints.as_slice()).collect();
            match real_loss_on(&mut tape, fwd.joints2d, &kps, &cfg.weights) {
                (Some(v), n) => Some((v, n)),
                _ => None,
            }
        } else {
            None
        };

        let mut provenance = Vec::new();
        let mut latent = 0.0;
        let syn = if let Some(mode) = aug_mode {
            // Values read off the tape: the augmenter input carries no gradient.
            let p = tape.value(fwd.params).clone();
            let mut synthetic = Vec::with_capacity(batch.len());
            for (b, s) in batch.iter().enumerate() {
                let (orient, pose, shape, cam) = unpack(p.row(b), nj);
                let mut ar = rng::stream(
                    cfg.seed,
                    rng::key(&[TAG_AUGMENT, cfg.augment.seed, step as u64, b as u64, crc32fast::hash(s.id.as_bytes()) as u64]),
                );
                let (theta, prov) = dapa_augment(ctx.prior, &pose, &s.id, &aug_cfg, &mut ar)?;
                let ex = make_synthetic_example(
                    ctx.tree,
                    ctx.template,
                    theta,
                    &RenderContext { orient, shape, cam },
                    state.regressor.modality,
                    aug_cfg.sample_shape,
                    prov,
                    &mut ar,
                )?;
                latent += norm(&ex.provenance.z_tilde);
                provenance.push(ex.record(step, mode));
                synthetic.push(ex);
            }
            latent /= synthetic.len() as f64;
            let sobs = state.regressor.stack_observations(synthetic.iter().map(|s| &s.observation))?;
            let targets: Vec<Supervision> = synthetic.iter().map(Supervision::from).collect();
            let sfwd = state.regressor.forward_on(&mut tape, &vars, ctx.tree, sobs)?;
            Some((syn_loss_on(&mut tape, &sfwd, &targets, &cfg.weights), targets.len()))
        } else {
            None
        };

        let (loss, report) = total_on(&mut tape, real, syn);
        if !report.total.is_finite() {
            return Err(TrainError::Diverged {
                step,
                reason: format!("loss {}", report.total),
            });
        }
        if let Some(loss) = loss {
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor> = vars.vars().iter().map(|v| grads.get(*v)).collect();
            apply_step(state, g, step)?;
        }
        state.step += 1;
        let snapshot = cfg.eval_interval > 0 && (state.step % cfg.eval_interval == 0 || state.step == cfg.steps);
        let eval_mpjpe = match (snapshot, ctx.eval) {
            (true, Some(ds)) => Some(quick_mpjpe(&state.regressor, ctx.tree, ds, cfg.eval_samples)?),
            _ => None,
        };
        let row = LogRow {
            step,
            loss: report,
            mean_latent_norm: latent,
            eval_mpjpe,
        };
        on_step(&StepOutcome {
            row: row.clone(),
            provenance,
        });
        history.push(row);
    }
    Ok(history)
}

/// Predicted body of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub orient: GlobalOrient,
    pub pose: BodyPose,
    pub shape: BodyShape,
    pub cam: WeakPerspective,
}

pub fn predict(reg: &RegressorParams, ds: &Dataset) -> Result<Vec<Prediction>, TrainError> {
    let run = |chunk: &[Sample]| -> Result<Vec<Prediction>, TrainError> {
        let obs: Vec<_> = chunk.iter().map(|s| s.observation.clone()).collect();
        Ok(reg
            .regress_batch(&obs)?
            .into_iter()
            .map(|o| Prediction {
                orient: o.orient,
                pose: o.pose,
                shape: o.shape,
                cam: o.cam,
            })
            .collect())
    };
    #[cfg(feature = "parallel")]
    let parts: Vec<_> = {
        use rayon::prelude::*;
        ds.samples.par_chunks(256).map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<_> = ds.samples.chunks(256).map(run).collect();
    let mut out = Vec::with_capacity(ds.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Mean root-aligned joint error in millimetres over the first `limit`
/// labelled samples.
pub fn quick_mpjpe(reg: &RegressorParams, tree: &KinematicTree, ds: &Dataset, limit: usize) -> Result<f64, TrainError> {
    let sub = Dataset {
        samples: ds.samples.iter().filter(|s| s.eval_labels().is_some()).take(limit).cloned().collect(),
        ..ds.clone()
    };
    let preds = predict(reg, &sub)?;
    let mut acc = 0.0;
    for (p, s) in preds.iter().zip(&sub.samples) {
        let st = forward_kinematics(tree, &p.pose, &p.orient, &p.shape, [0.0; 3]).map_err(|e| TrainError::Config(e.to_string()))?;
        acc += 1000.0 * mpjpe(&st.joints, &s.eval_labels().unwrap().joints3d);
    }
    Ok(acc / sub.len().max(1) as f64)
}

/// Per-sample evaluation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub id: String,
    pub mpjpe: f64,
    pub pck_02: Option<f64>,
}

/// Metrics of `preds` against the evaluation labels of `ds`.
pub fn evaluate_predictions(
    preds: &[Prediction],
    ds: &Dataset,
    tree: &KinematicTree,
    template: &MeshTemplate,
    alphas: &[f64],
) -> Result<(EvalReport, Vec<SampleEval>, EvalAccumulator), TrainError> {
    let mut acc = EvalAccumulator::default();
    let mut per = Vec::new();
    for (p, s) in preds.iter().zip(&ds.samples) {
        let Some(l) = s.eval_labels() else { continue };
        let ps = forward_kinematics(tree, &p.pose, &p.orient, &p.shape, [0.0; 3]).map_err(|e| TrainError::Config(e.to_string()))?;
        let gs = forward_kinematics(tree, &l.pose, &l.orient, &l.shape, [0.0; 3]).map_err(|e| TrainError::Config(e.to_string()))?;
        let (pv, gv) = (lbs(template, &ps), lbs(template, &gs));
        let gt2d = l.joints2d();
        let pred2d = project(&ps.joints, &p.cam);
        let input = PckInput {
            torso: torso_length(tree, &gt2d),
            visible: vec![true; gt2d.len()],
            pred: pred2d,
            gt: gt2d,
        };
        let sample_pck = crate::metrics::pck(&input.pred, &input.gt, 0.2, input.torso, &input.visible);
        per.push(SampleEval {
            id: s.id.clone(),
            mpjpe: 1000.0 * mpjpe(&ps.joints, &l.joints3d),
            pck_02: sample_pck,
        });
        acc.add((&ps.joints, &l.joints3d), (&pv, &gv), input)?;
    }
    let report = acc.finish(alphas)?;
    Ok((report, per, acc))
}

pub const DEFAULT_ALPHAS: [f64; 6] = [0.05, 0.1, 0.15, 0.2, 0.3, 0.5];

/// Regresses every sample of `ds` and scores it.
pub fn evaluate(
    reg: &RegressorParams,
    ds: &Dataset,
    tree: &KinematicTree,
    template: &MeshTemplate,
) -> Result<(EvalReport, Vec<SampleEval>, EvalAccumulator), TrainError> {
    let preds = predict(reg, ds)?;
    evaluate_predictions(&preds, ds, tree, template, &DEFAULT_ALPHAS)
}
