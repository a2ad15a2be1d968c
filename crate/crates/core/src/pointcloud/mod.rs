//! Point-cloud data model, file I/O, and a seeded synthetic scene generator.
//!
//! A cloud couples N positions with N spectral rows and N labels. Labels use
//! [`UNLABELED`] as the sparse-ground-truth sentinel. Clouds are immutable
//! after construction and safe to share across threads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

mod io;
mod synth;

pub use io::{load_cloud, save_cloud, CloudFormat};
pub use synth::generate_synthetic_scene;

/// Sentinel for points without ground truth.
pub const UNLABELED: i32 = -1;

/// N points with 3-D positions (meters), d spectral bands (reflectance in
/// [0,1]), and sparse class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MultispectralPointCloud {
    positions: Vec<[f32; 3]>,
    /// Row-major N x d.
    spectra: Vec<f32>,
    labels: Vec<i32>,
    class_names: Vec<String>,
    bands: usize,
}

impl MultispectralPointCloud {
    /// Build a cloud, checking the structural invariants: equal leading
    /// lengths, labels in range, finite spectra.
    pub fn new(
        positions: Vec<[f32; 3]>,
        spectra: Vec<f32>,
        labels: Vec<i32>,
        class_names: Vec<String>,
        bands: usize,
    ) -> Result<Self> {
        let n = positions.len();
        if n == 0 {
            return Err(Error::validation("positions", "cloud must have N >= 1"));
        }
        if bands == 0 {
            return Err(Error::validation("bands", "d must be >= 1"));
        }
        if spectra.len() != n * bands {
            return Err(Error::validation(
                "spectra",
                format!("expected {} values, got {}", n * bands, spectra.len()),
            ));
        }
        if labels.len() != n {
            return Err(Error::validation(
                "labels",
                format!("expected {n} labels, got {}", labels.len()),
            ));
        }
        let classes = class_names.len();
        for &label in &labels {
            if label != UNLABELED && (label < 0 || label as usize >= classes) {
                return Err(Error::LabelOutOfRange { label, classes });
            }
        }
        if let Some(bad) = spectra.iter().find(|v| !v.is_finite()) {
            return Err(Error::validation(
                "spectra",
                format!("non-finite value {bad}"),
            ));
        }
        Ok(Self {
            positions,
            spectra,
            labels,
            class_names,
            bands,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Spectral band count d.
    pub fn bands(&self) -> usize {
        self.bands
    }

    /// Class count L.
    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn positions(&self) -> &[[f32; 3]] {
        &self.positions
    }

    pub fn position(&self, i: usize) -> [f32; 3] {
        self.positions[i]
    }

    pub fn spectra_row(&self, i: usize) -> &[f32] {
        &self.spectra[i * self.bands..(i + 1) * self.bands]
    }

    pub fn labels(&self) -> &[i32] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> i32 {
        self.labels[i]
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// Per-class point counts with the UNLABELED bin appended: length L+1,
    /// summing to N.
    pub fn class_histogram(&self) -> Vec<u64> {
        let classes = self.classes();
        let mut counts = vec![0u64; classes + 1];
        for &label in &self.labels {
            if label == UNLABELED {
                counts[classes] += 1;
            } else {
                counts[label as usize] += 1;
            }
        }
        counts
    }
}

/// One synthetic class: how many points, how big its blobs are, and the
/// spectral signature its points scatter around.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub point_count: usize,
    /// Blob standard deviation in meters.
    pub object_scale: f64,
    /// One reflectance value per band.
    pub spectral_signature: Vec<f64>,
}

/// Recipe for a synthetic scene: class mix, labeling sparsity, spectral
/// noise, spatial extent, seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub classes: Vec<ClassSpec>,
    /// Fraction of points that keep their label, in (0,1].
    pub label_rate: f64,
    /// Spectral noise standard deviation.
    pub noise_sigma: f64,
    /// Scene cube edge length in meters.
    pub extent: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    /// A long-tailed five-class scene small enough for desk-scale runs.
    fn default() -> Self {
        let class = |name: &str, point_count, object_scale, signature: [f64; 3]| ClassSpec {
            name: name.to_string(),
            point_count,
            object_scale,
            spectral_signature: signature.to_vec(),
        };
        Self {
            classes: vec![
                class("ground", 4096, 6.0, [0.55, 0.45, 0.30]),
                class("vegetation", 1024, 2.0, [0.20, 0.55, 0.25]),
                class("building", 256, 1.5, [0.70, 0.70, 0.65]),
                class("vehicle", 64, 0.8, [0.35, 0.35, 0.80]),
                class("wire", 16, 0.4, [0.85, 0.20, 0.15]),
            ],
            label_rate: 0.3,
            noise_sigma: 0.05,
            extent: 50.0,
            seed: 7,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::validation("classes", "need at least 2 classes"));
        }
        let bands = self.classes[0].spectral_signature.len();
        if bands == 0 {
            return Err(Error::validation(
                "spectral_signature",
                "need at least 1 band",
            ));
        }
        for class in &self.classes {
            if class.point_count == 0 {
                return Err(Error::validation(
                    "point_count",
                    format!("class {:?} has zero points", class.name),
                ));
            }
            if !(class.object_scale > 0.0 && class.object_scale.is_finite()) {
                return Err(Error::validation(
                    "object_scale",
                    format!("class {:?} scale must be positive", class.name),
                ));
            }
            if class.spectral_signature.len() != bands {
                return Err(Error::validation(
                    "spectral_signature",
                    format!("class {:?} band count differs from first class", class.name),
                ));
            }
            if class.spectral_signature.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(
                    "spectral_signature",
                    format!("class {:?} has non-finite signature", class.name),
                ));
            }
        }
        if !(self.label_rate > 0.0 && self.label_rate <= 1.0) {
            return Err(Error::validation("label_rate", "must be in (0, 1]"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::validation("noise_sigma", "must be >= 0"));
        }
        if !(self.extent > 0.0 && self.extent.is_finite()) {
            return Err(Error::validation("extent", "must be positive"));
        }
        Ok(())
    }

    pub fn total_points(&self) -> usize {
        self.classes.iter().map(|c| c.point_count).sum()
    }

    pub fn bands(&self) -> usize {
        self.classes.first().map_or(0, |c| c.spectral_signature.len())
    }
}

#[cfg(test)]
mod tests;
