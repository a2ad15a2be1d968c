//! Grid-balanced sampling: grid sparsification, category-balanced centroid
//! selection, k-NN sample extraction, the random-sampling baseline, and the
//! per-point evaluation mask.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::{MultispectralPointCloud, UNLABELED};

mod knn;

pub use knn::{extract_samples, random_sampling_baseline};

/// Integer 3-D cell coordinate, floor(position / cell_size) per axis.
pub type CellCoord = (i64, i64, i64);

/// Whether a centroid seeds a training sample or a test sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Test,
}

/// Non-overlapping grid over a cloud. Cells partition the point indices.
#[derive(Debug, Clone)]
pub struct GridIndex {
    cell_size: f64,
    cells: BTreeMap<CellCoord, Vec<usize>>,
}

impl GridIndex {
    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn cells(&self) -> &BTreeMap<CellCoord, Vec<usize>> {
        &self.cells
    }

    pub fn cell_of(&self, position: [f32; 3]) -> CellCoord {
        cell_coord(position, self.cell_size)
    }
}

/// One downsampled point: the mean of a cell, its modal label, and its
/// train/test role.
#[derive(Debug, Clone, PartialEq)]
pub struct Centroid {
    pub cell: CellCoord,
    pub position: [f64; 3],
    /// Modal label among the cell's points; UNLABELED counts as a category
    /// but loses ties to any labeled class. Class ties go to the smaller id.
    pub majority_label: i32,
    pub role: Role,
}

/// One receptive field: a centroid and the indices of its k nearest points,
/// ordered by (distance, index).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Index into the centroid list (GBS) or the cloud (RS baseline).
    pub centroid: usize,
    pub indices: Vec<usize>,
    /// True when the cloud had fewer than k points and nearest points repeat.
    pub padded: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub samples: Vec<Sample>,
    pub k: usize,
    pub role: Role,
}

/// Outcome of training-centroid selection, including classes that could not
/// be sampled because no centroid carries their label.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SelectionReport {
    /// Labeled centroid count per class.
    pub labeled_centroids: Vec<u64>,
    /// TRAIN centroid count per class.
    pub train_centroids: Vec<u64>,
    pub unsampled_classes: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Manifest emitted by the `sample` CLI subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleManifest {
    pub strategy: String,
    pub cell_size: f64,
    pub train_ratio: f64,
    pub k: usize,
    pub seed: u64,
    pub centroid_roles: Vec<Role>,
    pub selection: SelectionReport,
    pub train_samples: usize,
    pub test_samples: usize,
    pub padded_samples: usize,
    pub eval_points: usize,
}

fn cell_coord(position: [f32; 3], cell_size: f64) -> CellCoord {
    let f = |v: f32| (v as f64 / cell_size).floor() as i64;
    (f(position[0]), f(position[1]), f(position[2]))
}

/// Cell edge length giving an expected k/16 points per cell, so one
/// receptive field spans roughly 16 cells. The extent is the largest
/// bounding-box span of the cloud.
pub fn default_cell_size(cloud: &MultispectralPointCloud, k: usize) -> f64 {
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    for p in cloud.positions() {
        for a in 0..3 {
            min[a] = min[a].min(p[a] as f64);
            max[a] = max[a].max(p[a] as f64);
        }
    }
    let extent = (0..3).map(|a| max[a] - min[a]).fold(0.0f64, f64::max);
    if extent <= 0.0 {
        return 1.0;
    }
    extent * (k as f64 / (16.0 * cloud.len() as f64)).cbrt()
}

/// Partition the cloud into non-overlapping cubic cells.
pub fn build_grid(cloud: &MultispectralPointCloud, cell_size: f64) -> Result<GridIndex> {
    if !(cell_size > 0.0 && cell_size.is_finite()) {
        return Err(Error::validation("cell_size", "must be positive"));
    }
    let mut cells: BTreeMap<CellCoord, Vec<usize>> = BTreeMap::new();
    for (i, &p) in cloud.positions().iter().enumerate() {
        cells.entry(cell_coord(p, cell_size)).or_default().push(i);
    }
    Ok(GridIndex { cell_size, cells })
}

/// One centroid per non-empty cell: mean position, modal label. Roles start
/// as TEST until [`select_training_centroids`] runs.
pub fn sparsify(grid: &GridIndex, cloud: &MultispectralPointCloud) -> Vec<Centroid> {
    let classes = cloud.classes();
    grid.cells
        .iter()
        .map(|(&cell, members)| {
            let mut sum = [0.0f64; 3];
            // Index classes 0..L-1, with slot L counting UNLABELED.
            let mut counts = vec![0u64; classes + 1];
            for &i in members {
                let p = cloud.position(i);
                for a in 0..3 {
                    sum[a] += p[a] as f64;
                }
                let label = cloud.label(i);
                if label == UNLABELED {
                    counts[classes] += 1;
                } else {
                    counts[label as usize] += 1;
                }
            }
            let n = members.len() as f64;
            let mut best = classes; // start from UNLABELED so any class with an equal count beats it
            for c in (0..classes).rev() {
                if counts[c] >= counts[best] && counts[c] > 0 {
                    best = c;
                }
            }
            let majority_label = if best == classes { UNLABELED } else { best as i32 };
            Centroid {
                cell,
                position: [sum[0] / n, sum[1] / n, sum[2] / n],
                majority_label,
                role: Role::Test,
            }
        })
        .collect()
}

/// Mark max(1, round(ratio * m_c)) centroids of each class as TRAIN, chosen
/// uniformly per class; everything else (including every UNLABELED-majority
/// centroid) stays TEST. Deterministic per seed.
pub fn select_training_centroids(
    centroids: &mut [Centroid],
    classes: usize,
    ratio: f64,
    seed: u64,
) -> Result<SelectionReport> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::validation("train_ratio", "must be in (0, 1)"));
    }
    for c in centroids.iter_mut() {
        c.role = Role::Test;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SelectionReport {
        labeled_centroids: vec![0; classes],
        train_centroids: vec![0; classes],
        ..Default::default()
    };
    for class in 0..classes {
        let mut members: Vec<usize> = centroids
            .iter()
            .enumerate()
            .filter(|(_, c)| c.majority_label == class as i32)
            .map(|(i, _)| i)
            .collect();
        report.labeled_centroids[class] = members.len() as u64;
        if members.is_empty() {
            report.unsampled_classes.push(class);
            report
                .warnings
                .push(format!("class {class} has no labeled centroids; unsampled"));
            continue;
        }
        let take = ((ratio * members.len() as f64).round() as usize).max(1);
        members.shuffle(&mut rng);
        for &i in &members[..take.min(members.len())] {
            centroids[i].role = Role::Train;
        }
        report.train_centroids[class] = take.min(members.len()) as u64;
    }
    Ok(report)
}

/// Per-point evaluation flags: a point is eligible for metrics iff its cell's
/// centroid has role TEST.
pub fn assign_eval_mask(
    grid: &GridIndex,
    centroids: &[Centroid],
    n_points: usize,
) -> Vec<bool> {
    let mut eval = vec![false; n_points];
    for centroid in centroids {
        if centroid.role == Role::Test {
            if let Some(members) = grid.cells.get(&centroid.cell) {
                for &i in members {
                    eval[i] = true;
                }
            }
        }
    }
    eval
}
