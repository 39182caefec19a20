use serde::{Deserialize, Serialize};

use crate::body::{lbs, rasterize_silhouette, BodyState, MeshTemplate};
use crate::camera::WeakPerspective;

pub const SILHOUETTE_RES: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Keypoints2d,
    Silhouette,
}

impl Modality {
    pub fn dim(self, num_keypoints: usize) -> usize {
        match self {
            Modality::Keypoints2d => 3 * num_keypoints,
            Modality::Silhouette => SILHOUETTE_RES * SILHOUETTE_RES,
        }
    }
}

/// Regressor input: flattened `(x, y, confidence)` keypoints or a binary mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub modality: Modality,
    pub values: Vec<f64>,
}

impl Observation {
    pub fn from_keypoints(kp: &[[f64; 3]]) -> Self {
        Self {
            modality: Modality::Keypoints2d,
            values: kp.iter().flatten().copied().collect(),
        }
    }

    /// Silhouette of the posed mesh under `cam`.
    pub fn silhouette(template: &MeshTemplate, state: &BodyState, cam: &WeakPerspective) -> Self {
        let verts = lbs(template, state);
        let pts: Vec<[f64; 2]> = verts.iter().map(|v| cam.project_point(*v)).collect();
        Self {
            modality: Modality::Silhouette,
            values: rasterize_silhouette(&pts, &template.faces, SILHOUETTE_RES),
        }
    }

    pub fn keypoints(&self) -> Option<Vec<[f64; 3]>> {
        (self.modality == Modality::Keypoints2d)
            .then(|| self.values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}
