//! Synthetic source/target worlds.
//!
//! Poses come from a handful of hand-set clusters; a domain is a mixture over
//! clusters plus shape, camera and detection-noise settings. Source samples
//! carry full supervision. Target samples keep their ground truth only for
//! evaluation: the adaptation side sees them through [`WeakSample`].

mod io;

pub use io::{
    export_keypoint_json, load_dataset, load_keypoint_json, parse_keypoint_json, read_dataset, save_dataset,
    write_dataset, DatasetHeader, KeypointFile, KeypointPerson,
};

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::body::{
    forward_kinematics, rotation, BodyPose, BodyShape, GlobalOrient, JointRole, KinematicTree, MeshTemplate,
    SHAPE_DIM,
};
use crate::camera::{project, WeakPerspective};
use crate::regressor::{Modality, Observation};
use crate::rng;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid domain spec: {0}")]
    InvalidSpec(String),
    #[error("cannot read {path}: {source}")]
    Missing {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Schema { path: String, line: usize, message: String },
    #[error("keypoint count mismatch: file has {got}, tree has {expected}")]
    KeypointCount { expected: usize, got: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A mode of the pose distribution: mean pose plus per-component jitter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseCluster {
    pub name: String,
    pub mean: BodyPose,
    pub jitter: Vec<f64>,
}

fn set(pose: &mut [f64], tree: &KinematicTree, role: JointRole, w: [f64; 3]) {
    if let Some(j) = tree.joint(role) {
        if j > 0 {
            pose[3 * (j - 1)..3 * j].copy_from_slice(&w);
        }
    }
}

/// Jitter on the flexion axis of the spine and limb joints.
const FLEX_JITTER: f64 = 0.12;
/// Jitter on every other pose component.
const MINOR_JITTER: f64 = 0.015;

fn cluster(tree: &KinematicTree, name: &str, flex: f64, joints: &[(JointRole, [f64; 3])]) -> PoseCluster {
    use JointRole::*;
    let mut mean = vec![0.0; tree.pose_dim()];
    for (role, w) in joints {
        set(&mut mean, tree, *role, *w);
    }
    let mut jitter = vec![MINOR_JITTER; tree.pose_dim()];
    for role in [Spine, LeftHip, RightHip, LeftKnee, RightKnee, LeftShoulder, RightShoulder, LeftElbow, RightElbow] {
        if let Some(j) = tree.joint(role).filter(|&j| j > 0) {
            jitter[3 * (j - 1)] = flex;
        }
    }
    PoseCluster {
        name: name.to_string(),
        mean: BodyPose(mean),
        jitter,
    }
}

/// Standing, walking, sitting, kneeling and lying clusters.
///
/// Flexion conventions: a negative x-rotation at the hip swings the thigh
/// forward, a positive one at the knee folds the shank back; a negative
/// x-rotation at the shoulder raises the arm forward, at the elbow it folds
/// the forearm forward.
pub fn default_clusters(tree: &KinematicTree) -> Vec<PoseCluster> {
    use JointRole::*;
    vec![
        cluster(tree, "standing", 0.8 * FLEX_JITTER, &[]),
        cluster(
            tree,
            "walking",
            FLEX_JITTER,
            &[
                (LeftHip, [-0.45, 0.0, 0.0]),
                (RightHip, [0.35, 0.0, 0.0]),
                (LeftKnee, [0.4, 0.0, 0.0]),
                (RightKnee, [0.15, 0.0, 0.0]),
                (LeftShoulder, [0.35, 0.0, 0.0]),
                (RightShoulder, [-0.35, 0.0, 0.0]),
                (LeftElbow, [-0.3, 0.0, 0.0]),
                (RightElbow, [-0.4, 0.0, 0.0]),
            ],
        ),
        cluster(
            tree,
            "sitting",
            FLEX_JITTER,
            &[
                (Spine, [0.15, 0.0, 0.0]),
                (LeftHip, [-1.5, 0.0, -0.1]),
                (RightHip, [-1.5, 0.0, 0.1]),
                (LeftKnee, [1.5, 0.0, 0.0]),
                (RightKnee, [1.5, 0.0, 0.0]),
                (LeftShoulder, [-0.3, 0.0, 0.1]),
                (RightShoulder, [-0.3, 0.0, -0.1]),
                (LeftElbow, [-1.2, 0.0, 0.0]),
                (RightElbow, [-1.2, 0.0, 0.0]),
            ],
        ),
        cluster(
            tree,
            "kneeling",
            FLEX_JITTER,
            &[
                (Spine, [0.2, 0.0, 0.0]),
                (LeftHip, [-0.15, 0.0, 0.0]),
                (RightHip, [-0.15, 0.0, 0.0]),
                (LeftKnee, [1.7, 0.0, 0.0]),
                (RightKnee, [1.7, 0.0, 0.0]),
                (LeftShoulder, [-0.5, 0.0, 0.0]),
                (RightShoulder, [-0.5, 0.0, 0.0]),
                (LeftElbow, [-0.8, 0.0, 0.0]),
                (RightElbow, [-0.8, 0.0, 0.0]),
            ],
        ),
        cluster(
            tree,
            "lying",
            FLEX_JITTER,
            &[
                (Spine, [-0.2, 0.0, 0.0]),
                (LeftHip, [0.0, 0.0, 0.25]),
                (RightHip, [0.0, 0.0, -0.25]),
                (LeftKnee, [0.25, 0.0, 0.0]),
                (RightKnee, [0.25, 0.0, 0.0]),
                (LeftShoulder, [-2.8, 0.0, 0.0]),
                (RightShoulder, [-2.8, 0.0, 0.0]),
                (LeftElbow, [-0.2, 0.0, 0.0]),
                (RightElbow, [-0.2, 0.0, 0.0]),
            ],
        ),
    ]
}

/// Cluster name and mixture weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterWeight {
    pub cluster: String,
    pub weight: f64,
}

fn weights(pairs: &[(&str, f64)]) -> Vec<ClusterWeight> {
    pairs
        .iter()
        .map(|(c, w)| ClusterWeight {
            cluster: c.to_string(),
            weight: *w,
        })
        .collect()
}

/// Mixture over the broad pose corpus the prior is trained on; sitting,
/// kneeling and lying are the rare clusters.
pub fn corpus_weights() -> Vec<ClusterWeight> {
    weights(&[
        ("standing", 0.425),
        ("walking", 0.425),
        ("sitting", 0.05),
        ("kneeling", 0.05),
        ("lying", 0.05),
    ])
}

pub const RARE_CLUSTERS: [&str; 3] = ["sitting", "kneeling", "lying"];
pub const DOMINANT_CLUSTERS: [&str; 2] = ["standing", "walking"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

/// Detection noise applied to projected keypoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseParams {
    /// Per-coordinate Gaussian jitter (normalized image units).
    pub jitter_std: f64,
    pub dropout: f64,
    /// Jitter magnitude at which confidence bottoms out.
    pub confidence_cap: f64,
}

impl NoiseParams {
    pub fn none() -> Self {
        Self {
            jitter_std: 0.0,
            dropout: 0.0,
            confidence_cap: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub domain: Domain,
    pub clusters: Vec<ClusterWeight>,
    pub shape_std: f64,
    /// Root yaw drawn uniformly from `[−yaw_range, yaw_range]` (radians).
    pub yaw_range: f64,
    /// Std of root pitch and roll (radians).
    pub tilt_std: f64,
    pub scale_range: [f64; 2],
    /// Camera translation drawn uniformly from `[−t, t]` per axis.
    pub transl_range: f64,
    pub noise: NoiseParams,
    pub count: usize,
    pub seed: u64,
    pub modality: Modality,
}

impl DomainSpec {
    /// Mostly standing subjects, near-clean keypoints.
    pub fn default_source() -> Self {
        Self {
            name: "source".into(),
            domain: Domain::Source,
            clusters: weights(&[("standing", 0.8), ("walking", 0.2)]),
            shape_std: 0.8,
            yaw_range: 1.0,
            tilt_std: 0.1,
            scale_range: [0.8, 1.1],
            transl_range: 0.1,
            noise: NoiseParams {
                jitter_std: 0.005,
                dropout: 0.0,
                confidence_cap: 0.1,
            },
            count: 5000,
            seed: 1,
            modality: Modality::Keypoints2d,
        }
    }

    /// Mostly sitting and kneeling subjects seen through a noisy detector.
    pub fn default_target() -> Self {
        Self {
            name: "target".into(),
            domain: Domain::Target,
            clusters: weights(&[("sitting", 0.45), ("kneeling", 0.45), ("standing", 0.1)]),
            noise: NoiseParams {
                jitter_std: 0.02,
                dropout: 0.05,
                confidence_cap: 0.1,
            },
            count: 2000,
            seed: 2,
            ..Self::default_source()
        }
    }

    pub fn validate(&self, clusters: &[PoseCluster]) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidSpec(format!("{}: {m}", self.name)));
        if self.clusters.is_empty() {
            return bad("no clusters".into());
        }
        let total: f64 = self.clusters.iter().map(|c| c.weight).sum();
        if self.clusters.iter().any(|c| !(c.weight >= 0.0)) || (total - 1.0).abs() > 1e-6 {
            return bad(format!("cluster weights must be nonnegative and sum to 1 (sum {total})"));
        }
        if let Some(c) = self.clusters.iter().find(|c| !clusters.iter().any(|k| k.name == c.cluster)) {
            return bad(format!("unknown cluster {:?}", c.cluster));
        }
        let n = &self.noise;
        if !(n.jitter_std >= 0.0) || !(0.0..=1.0).contains(&n.dropout) || !(n.confidence_cap > 0.0) {
            return bad("noise needs jitter_std ≥ 0, dropout in [0,1], confidence_cap > 0".into());
        }
        if !(self.shape_std >= 0.0) || !(self.yaw_range >= 0.0) || !(self.tilt_std >= 0.0) || !(self.transl_range >= 0.0) {
            return bad("standard deviations and ranges must be nonnegative".into());
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= crate::camera::MAX_SCALE) {
            return bad(format!("scale range {lo}..{hi} outside (0, 10]"));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        format!("{:08x}", crc32fast::hash(&bytes))
    }
}

/// Full ground truth of one subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Labels {
    pub pose: BodyPose,
    pub orient: GlobalOrient,
    pub shape: BodyShape,
    pub cam: WeakPerspective,
    /// Pelvis-relative 3-D joints.
    pub joints3d: Vec<[f64; 3]>,
}

impl Labels {
    /// Noise-free projected joints.
    pub fn joints2d(&self) -> Vec<[f64; 2]> {
        project(&self.joints3d, &self.cam)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub domain: Domain,
    pub observation: Observation,
    /// 2-D keypoint annotation `(x, y, confidence)`; detections for target data.
    pub keypoints: Vec<[f64; 3]>,
    /// Index into the generating cluster list, when known.
    pub cluster: Option<usize>,
    labels: Option<Labels>,
}

/// What adaptation code may see of a target sample.
#[derive(Clone, Debug, PartialEq)]
pub struct WeakSample {
    pub id: String,
    pub observation: Observation,
    pub keypoints: Vec<[f64; 3]>,
}

impl Sample {
    pub fn new(
        id: String,
        domain: Domain,
        observation: Observation,
        keypoints: Vec<[f64; 3]>,
        labels: Option<Labels>,
    ) -> Self {
        Self {
            id,
            domain,
            observation,
            keypoints,
            cluster: None,
            labels,
        }
    }

    /// Supervision usable for training: present only on source samples.
    pub fn training_labels(&self) -> Option<&Labels> {
        match self.domain {
            Domain::Source => self.labels.as_ref(),
            Domain::Target => None,
        }
    }

    /// Ground truth for evaluation, regardless of domain.
    pub fn eval_labels(&self) -> Option<&Labels> {
        self.labels.as_ref()
    }

    pub(crate) fn labels_mut(&mut self) -> Option<&mut Labels> {
        self.labels.as_mut()
    }

    pub fn weak(&self) -> WeakSample {
        WeakSample {
            id: self.id.clone(),
            observation: self.observation.clone(),
            keypoints: self.keypoints.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub fingerprint: String,
    pub seed: u64,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Adaptation-facing copy: observations and 2-D keypoints only.
    pub fn weak_view(&self) -> Vec<WeakSample> {
        self.samples.iter().map(Sample::weak).collect()
    }

    /// Test hook: overwrite every hidden label with sentinel values.
    pub fn poison_labels(&mut self, sentinel: f64) {
        for s in &mut self.samples {
            if let Some(l) = s.labels_mut() {
                l.pose.0.iter_mut().for_each(|v| *v = sentinel);
                l.orient = GlobalOrient([sentinel; 3]);
                l.shape = BodyShape([sentinel; SHAPE_DIM]);
                l.joints3d.iter_mut().for_each(|p| *p = [sentinel; 3]);
            }
        }
    }
}

/// Pose corpus with the generating cluster of each entry.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseCorpus {
    pub poses: Vec<BodyPose>,
    pub cluster: Vec<usize>,
    pub cluster_names: Vec<String>,
}

fn pick_cluster<R: Rng>(cum: &[(usize, f64)], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    for &(idx, c) in cum {
        if u < c {
            return idx;
        }
    }
    cum.last().unwrap().0
}

fn cumulative(weights: &[ClusterWeight], clusters: &[PoseCluster]) -> Vec<(usize, f64)> {
    let mut acc = 0.0;
    weights
        .iter()
        .filter(|w| w.weight > 0.0)
        .map(|w| {
            acc += w.weight;
            let idx = clusters.iter().position(|c| c.name == w.cluster).expect("validated cluster");
            (idx, acc)
        })
        .collect()
}

fn draw_pose<R: Rng>(cluster: &PoseCluster, rng: &mut R) -> BodyPose {
    let raw: Vec<f64> = cluster
        .mean
        .0
        .iter()
        .zip(&cluster.jitter)
        .map(|(m, s)| {
            let n: f64 = StandardNormal.sample(rng);
            m + s * n
        })
        .collect();
    BodyPose(raw).canonicalized()
}

/// Draws `n` poses from a cluster mixture.
pub fn make_pose_corpus(
    clusters: &[PoseCluster],
    mixture: &[ClusterWeight],
    n: usize,
    seed: u64,
) -> Result<PoseCorpus, DataError> {
    if n == 0 {
        return Err(DataError::InvalidSpec("corpus size must be at least 1".into()));
    }
    let total: f64 = mixture.iter().map(|w| w.weight).sum();
    if (total - 1.0).abs() > 1e-6 || mixture.iter().any(|w| !clusters.iter().any(|c| c.name == w.cluster)) {
        return Err(DataError::InvalidSpec("corpus mixture must name known clusters and sum to 1".into()));
    }
    let cum = cumulative(mixture, clusters);
    let mut poses = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = rng::stream(seed, rng::key(&[0xC0, i as u64]));
        let c = pick_cluster(&cum, &mut r);
        poses.push(draw_pose(&clusters[c], &mut r));
        labels.push(c);
    }
    Ok(PoseCorpus {
        poses,
        cluster: labels,
        cluster_names: clusters.iter().map(|c| c.name.clone()).collect(),
    })
}

/// Size, seed and mixture of the prior's training corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub count: usize,
    pub seed: u64,
    pub clusters: Vec<ClusterWeight>,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            count: 20_000,
            seed: 7,
            clusters: corpus_weights(),
        }
    }
}

impl CorpusSpec {
    pub fn generate(&self, tree: &KinematicTree) -> Result<PoseCorpus, DataError> {
        make_pose_corpus(&default_clusters(tree), &self.clusters, self.count, self.seed)
    }
}

/// Every dataset of one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub source: DomainSpec,
    /// Split the regressor adapts on.
    pub target_train: DomainSpec,
    /// Held-out split used only for evaluation.
    pub target_test: DomainSpec,
    pub corpus: CorpusSpec,
}

impl Default for WorldSpec {
    fn default() -> Self {
        let target = DomainSpec::default_target();
        Self {
            source: DomainSpec::default_source(),
            target_train: DomainSpec {
                name: "target_train".into(),
                ..target.clone()
            },
            target_test: DomainSpec {
                name: "target_test".into(),
                count: 500,
                seed: 3,
                ..target
            },
            corpus: CorpusSpec::default(),
        }
    }
}

/// Jitters, drops and scores projected keypoints.
pub fn synthesize_observation<R: Rng>(gt2d: &[[f64; 2]], noise: &NoiseParams, rng: &mut R) -> Vec<[f64; 3]> {
    gt2d.iter()
        .map(|p| {
            let (dx, dy) = if noise.jitter_std > 0.0 {
                let n = Normal::new(0.0, noise.jitter_std).expect("validated std");
                (n.sample(rng), n.sample(rng))
            } else {
                (0.0, 0.0)
            };
            let dropped = noise.dropout > 0.0 && rng.random::<f64>() < noise.dropout;
            if dropped {
                [0.0, 0.0, 0.0]
            } else {
                let mag = (dx * dx + dy * dy).sqrt();
                let conf = (1.0 - mag / noise.confidence_cap).clamp(0.3, 1.0);
                [p[0] + dx, p[1] + dy, conf]
            }
        })
        .collect()
}

fn root_orient<R: Rng>(spec: &DomainSpec, rng: &mut R) -> GlobalOrient {
    let yaw = if spec.yaw_range > 0.0 {
        rng.random_range(-spec.yaw_range..=spec.yaw_range)
    } else {
        0.0
    };
    let (pitch, roll) = if spec.tilt_std > 0.0 {
        let n = Normal::new(0.0, spec.tilt_std).unwrap();
        (n.sample(rng), n.sample(rng))
    } else {
        (0.0, 0.0)
    };
    let r = rotation::mul(
        &rotation::rodrigues([0.0, yaw, 0.0]),
        &rotation::mul(&rotation::rodrigues([pitch, 0.0, 0.0]), &rotation::rodrigues([0.0, 0.0, roll])),
    );
    GlobalOrient(rotation::log_map(&r))
}

/// Generates one domain's dataset.
pub fn sample_domain(
    spec: &DomainSpec,
    tree: &KinematicTree,
    template: &MeshTemplate,
) -> Result<Dataset, DataError> {
    let clusters = default_clusters(tree);
    spec.validate(&clusters)?;
    let cum = cumulative(&spec.clusters, &clusters);
    let tag = match spec.domain {
        Domain::Source => 0x5u64,
        Domain::Target => 0x7u64,
    };
    let draw = |i: usize| -> Sample {
        let mut r = rng::stream(spec.seed, rng::key(&[tag, i as u64]));
        let c = pick_cluster(&cum, &mut r);
        let pose = draw_pose(&clusters[c], &mut r);
        let mut shape = [0.0; SHAPE_DIM];
        if spec.shape_std > 0.0 {
            let n = Normal::new(0.0, spec.shape_std).unwrap();
            for b in &mut shape {
                *b = n.sample(&mut r).clamp(-3.0, 3.0);
            }
        }
        let shape = BodyShape(shape);
        let orient = root_orient(spec, &mut r);
        let [lo, hi] = spec.scale_range;
        let scale = if hi > lo { r.random_range(lo..hi) } else { lo };
        let t = spec.transl_range;
        let (tx, ty) = if t > 0.0 {
            (r.random_range(-t..t), r.random_range(-t..t))
        } else {
            (0.0, 0.0)
        };
        let cam = WeakPerspective::new(scale, tx, ty);
        let state = forward_kinematics(tree, &pose, &orient, &shape, [0.0; 3]).expect("pose dim from tree");
        let gt2d = project(&state.joints, &cam);
        let keypoints = synthesize_observation(&gt2d, &spec.noise, &mut r);
        let observation = match spec.modality {
            Modality::Keypoints2d => Observation::from_keypoints(&keypoints),
            Modality::Silhouette => Observation::silhouette(template, &state, &cam),
        };
        let labels = Labels {
            pose,
            orient,
            shape,
            cam,
            joints3d: state.joints,
        };
        let mut s = Sample::new(format!("{}-{i:06}", spec.name), spec.domain, observation, keypoints, Some(labels));
        s.cluster = Some(c);
        s
    };
    // Every sample owns its own stream, so the thread count never changes the output.
    #[cfg(feature = "parallel")]
    let samples: Vec<Sample> = {
        use rayon::prelude::*;
        (0..spec.count).into_par_iter().map(draw).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let samples: Vec<Sample> = (0..spec.count).map(draw).collect();
    Ok(Dataset {
        name: spec.name.clone(),
        fingerprint: spec.fingerprint(),
        seed: spec.seed,
        samples,
    })
}

/// Mean over joints of the angle gap `‖ω̄_a − ω̄_b‖` between two pose sets'
/// mean axis-angles.
pub fn mean_pose_gap(a: &[&BodyPose], b: &[&BodyPose]) -> f64 {
    let mean = |set: &[&BodyPose]| {
        let d = set[0].0.len();
        let mut m = vec![0.0; d];
        for p in set {
            for (acc, v) in m.iter_mut().zip(&p.0) {
                *acc += v / set.len() as f64;
            }
        }
        m
    };
    let (ma, mb) = (mean(a), mean(b));
    let joints = ma.len() / 3;
    (0..joints)
        .map(|j| {
            (0..3)
                .map(|c| (ma[3 * j + c] - mb[3 * j + c]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / joints as f64
}
