//! Dataset JSON-lines files and the external keypoint annotation format.
//!
//! Dataset file: a header line followed by one sample per line:
//!
//! ```text
//! {"format":"dapa-lab-dataset","version":1,"name":"source","count":2,"seed":1,"fingerprint":"1a2b3c4d"}
//! {"id":"source-000000","domain":"source","obs":{"modality":"keypoints2d","values":[...]},"kp2d":[[x,y,c],...],"kp3d":[[x,y,z],...],"params":{...}}
//! ```
//!
//! Keypoint annotation file (normalized `[−1, 1]` coordinates, confidence in `[0, 1]`):
//!
//! ```text
//! {"keypoint_names":["pelvis",...],"people":[{"id":"p0","keypoints":[[x,y,c],...]}]}
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Domain, Labels, Sample};
use crate::body::{BodyPose, BodyShape, GlobalOrient, KinematicTree};
use crate::camera::WeakPerspective;
use crate::regressor::Observation;

pub const DATASET_FORMAT: &str = "dapa-lab-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub name: String,
    pub count: usize,
    pub seed: u64,
    pub fingerprint: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsRecord {
    pose: Vec<f64>,
    orient: [f64; 3],
    shape: [f64; crate::body::SHAPE_DIM],
    cam: [f64; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: String,
    domain: Domain,
    obs: Observation,
    kp2d: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kp3d: Option<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    params: Option<ParamsRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cluster: Option<usize>,
}

impl SampleRecord {
    fn from_sample(s: &Sample) -> Self {
        let labels = s.eval_labels();
        Self {
            id: s.id.clone(),
            domain: s.domain,
            obs: s.observation.clone(),
            kp2d: s.keypoints.clone(),
            kp3d: labels.map(|l| l.joints3d.clone()),
            params: labels.map(|l| ParamsRecord {
                pose: l.pose.0.clone(),
                orient: l.orient.0,
                shape: l.shape.0,
                cam: l.cam.as_array(),
            }),
            cluster: s.cluster,
        }
    }

    fn into_sample(self) -> Result<Sample, String> {
        let labels = match (self.kp3d, self.params) {
            (Some(kp3d), Some(p)) => Some(Labels {
                pose: BodyPose(p.pose),
                orient: GlobalOrient(p.orient),
                shape: BodyShape(p.shape),
                cam: WeakPerspective::new(p.cam[0], p.cam[1], p.cam[2]),
                joints3d: kp3d,
            }),
            (None, None) => None,
            _ => return Err("kp3d and params must be given together".into()),
        };
        let mut s = Sample::new(self.id, self.domain, self.obs, self.kp2d, labels);
        s.cluster = self.cluster;
        Ok(s)
    }
}

/// Writes the header and one line per sample.
pub fn write_dataset<W: Write>(mut w: W, ds: &Dataset) -> Result<(), DataError> {
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        name: ds.name.clone(),
        count: ds.samples.len(),
        seed: ds.seed,
        fingerprint: ds.fingerprint.clone(),
    };
    serde_json::to_writer(&mut w, &header).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    for s in &ds.samples {
        serde_json::to_writer(&mut w, &SampleRecord::from_sample(s)).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<(), DataError> {
    let f = fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_dataset(&mut w, ds)?;
    w.flush()?;
    Ok(())
}

/// Parses a dataset stream; `origin` names it in diagnostics.
pub fn read_dataset<R: Read>(r: R, origin: &str) -> Result<Dataset, DataError> {
    let schema = |line: usize, message: String| DataError::Schema {
        path: origin.to_string(),
        line,
        message,
    };
    let mut lines = BufReader::new(r).lines();
    let first = lines.next().ok_or_else(|| schema(1, "empty file, expected header".into()))??;
    let header: DatasetHeader = serde_json::from_str(&first).map_err(|e| schema(1, format!("header: {e}")))?;
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(schema(
            1,
            format!("unsupported format {:?} v{}", header.format, header.version),
        ));
    }
    let mut samples = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| schema(i + 2, e.to_string()))?;
        samples.push(rec.into_sample().map_err(|m| schema(i + 2, m))?);
    }
    if samples.len() != header.count {
        return Err(schema(
            1,
            format!("header count {} but {} samples", header.count, samples.len()),
        ));
    }
    Ok(Dataset {
        name: header.name,
        fingerprint: header.fingerprint,
        seed: header.seed,
        samples,
    })
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let f = fs::File::open(path).map_err(|source| DataError::Missing {
        path: path.display().to_string(),
        source,
    })?;
    read_dataset(f, &path.display().to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointPerson {
    pub id: serde_json::Value,
    pub keypoints: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointFile {
    pub keypoint_names: Vec<String>,
    pub people: Vec<KeypointPerson>,
}

/// Parses keypoint annotations into 2-D-only target samples.
pub fn parse_keypoint_json(text: &str, origin: &str, tree: &KinematicTree) -> Result<Dataset, DataError> {
    let schema = |line: usize, message: String| DataError::Schema {
        path: origin.to_string(),
        line,
        message,
    };
    let file: KeypointFile = serde_json::from_str(text).map_err(|e| schema(e.line(), e.to_string()))?;
    let k = tree.num_joints();
    if file.keypoint_names.len() != k {
        return Err(DataError::KeypointCount {
            expected: k,
            got: file.keypoint_names.len(),
        });
    }
    let expected = tree.joint_names();
    for (i, (got, want)) in file.keypoint_names.iter().zip(&expected).enumerate() {
        if got != want {
            return Err(schema(0, format!("keypoint_names[{i}]: expected {want:?}, got {got:?}")));
        }
    }
    let mut samples = Vec::with_capacity(file.people.len());
    for (pi, person) in file.people.iter().enumerate() {
        let id = match &person.id {
            serde_json::Value::String(s) => s.clone(),
            serde_json::Value::Number(n) => n.to_string(),
            other => return Err(schema(0, format!("people[{pi}].id: expected string or number, got {other}"))),
        };
        if person.keypoints.len() != k {
            return Err(DataError::KeypointCount {
                expected: k,
                got: person.keypoints.len(),
            });
        }
        let mut kp = Vec::with_capacity(k);
        for (ki, p) in person.keypoints.iter().enumerate() {
            let field = |c: usize| format!("people[{pi}].keypoints[{ki}][{c}]");
            if p.len() != 3 {
                return Err(schema(0, format!("people[{pi}].keypoints[{ki}]: expected [x, y, c]")));
            }
            for (c, v) in p.iter().enumerate() {
                if !v.is_finite() {
                    return Err(schema(0, format!("{}: not finite", field(c))));
                }
            }
            if !(0.0..=1.0).contains(&p[2]) {
                return Err(schema(0, format!("{}: confidence {} outside [0, 1]", field(2), p[2])));
            }
            kp.push([p[0], p[1], p[2]]);
        }
        samples.push(Sample::new(id, Domain::Target, Observation::from_keypoints(&kp), kp, None));
    }
    Ok(Dataset {
        name: origin.to_string(),
        fingerprint: format!("{:08x}", crc32fast::hash(text.as_bytes())),
        seed: 0,
        samples,
    })
}

pub fn load_keypoint_json(path: &Path, tree: &KinematicTree) -> Result<Dataset, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Missing {
        path: path.display().to_string(),
        source,
    })?;
    parse_keypoint_json(&text, &path.display().to_string(), tree)
}

/// Keypoint annotation file for a dataset's 2-D keypoints.
pub fn export_keypoint_json(ds: &Dataset, tree: &KinematicTree) -> String {
    let file = KeypointFile {
        keypoint_names: tree.joint_names().iter().map(|s| s.to_string()).collect(),
        people: ds
            .samples
            .iter()
            .map(|s| KeypointPerson {
                id: serde_json::Value::String(s.id.clone()),
                keypoints: s.keypoints.iter().map(|k| k.to_vec()).collect(),
            })
            .collect(),
    };
    serde_json::to_string(&file).expect("keypoint file serializes")
}
