//! k-nearest-neighbor extraction around centroids, accelerated by the
//! sampling grid itself via an expanding-ring cell search.

use std::collections::BinaryHeap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pointcloud::MultispectralPointCloud;

use super::{Centroid, GridIndex, Role, Sample, SampleSet};

/// Ring search state shared across queries on one grid.
struct RingSearcher<'a> {
    cloud: &'a MultispectralPointCloud,
    grid: &'a GridIndex,
    cell_min: [i64; 3],
    cell_max: [i64; 3],
}

/// Heap key ordering matches (distance^2, index): for non-negative floats,
/// the bit pattern orders like the value.
fn d2_key(d2: f64, idx: usize) -> (u64, usize) {
    (d2.to_bits(), idx)
}

fn dist2(p: [f32; 3], q: [f64; 3]) -> f64 {
    let dx = p[0] as f64 - q[0];
    let dy = p[1] as f64 - q[1];
    let dz = p[2] as f64 - q[2];
    dx * dx + dy * dy + dz * dz
}

impl<'a> RingSearcher<'a> {
    fn new(cloud: &'a MultispectralPointCloud, grid: &'a GridIndex) -> Self {
        let mut cell_min = [i64::MAX; 3];
        let mut cell_max = [i64::MIN; 3];
        for &(x, y, z) in grid.cells().keys() {
            for (a, v) in [x, y, z].into_iter().enumerate() {
                cell_min[a] = cell_min[a].min(v);
                cell_max[a] = cell_max[a].max(v);
            }
        }
        Self {
            cloud,
            grid,
            cell_min,
            cell_max,
        }
    }

    /// Indices of the k nearest points to `query`, sorted by (distance^2,
    /// index). Pads by cycling through the neighbors when the cloud is
    /// smaller than k; the flag reports that.
    fn query(&self, query: [f64; 3], k: usize) -> (Vec<usize>, bool) {
        let n = self.cloud.len();
        let found = if n <= k {
            let mut all: Vec<(u64, usize)> = (0..n)
                .map(|i| d2_key(dist2(self.cloud.position(i), query), i))
                .collect();
            all.sort_unstable();
            all.into_iter().map(|(_, i)| i).collect()
        } else {
            self.ring_search(query, k)
        };
        let padded = found.len() < k;
        let mut indices = found;
        if padded {
            let cycle = indices.clone();
            let mut fill = cycle.iter().cycle();
            while indices.len() < k {
                indices.push(*fill.next().expect("non-empty cloud"));
            }
        }
        (indices, padded)
    }

    fn ring_search(&self, query: [f64; 3], k: usize) -> Vec<usize> {
        let s = self.grid.cell_size();
        let home = (
            (query[0] / s).floor() as i64,
            (query[1] / s).floor() as i64,
            (query[2] / s).floor() as i64,
        );
        let max_ring = [home.0, home.1, home.2]
            .iter()
            .enumerate()
            .map(|(a, &h)| (h - self.cell_min[a]).abs().max((h - self.cell_max[a]).abs()))
            .max()
            .unwrap_or(0);

        // Max-heap of the current k best (distance^2 bits, index); the root
        // is the worst kept candidate.
        let mut heap: BinaryHeap<(u64, usize)> = BinaryHeap::with_capacity(k + 1);
        for ring in 0..=max_ring {
            // Points in cells at Chebyshev ring r are at least (r-1) cell
            // widths away; once the kept set beats that bound, stop.
            if heap.len() == k && ring > 0 {
                let bound = (ring - 1) as f64 * s;
                let worst = f64::from_bits(heap.peek().unwrap().0);
                if worst <= bound * bound {
                    break;
                }
            }
            self.for_shell_cells(home, ring, |members| {
                for &i in members {
                    let key = d2_key(dist2(self.cloud.position(i), query), i);
                    if heap.len() < k {
                        heap.push(key);
                    } else if key < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(key);
                    }
                }
            });
        }
        let mut kept: Vec<(u64, usize)> = heap.into_vec();
        kept.sort_unstable();
        kept.into_iter().map(|(_, i)| i).collect()
    }

    /// Visit every occupied cell at exact Chebyshev distance `ring` from
    /// `home`, enumerating only the shell surface.
    fn for_shell_cells(&self, home: (i64, i64, i64), ring: i64, mut visit: impl FnMut(&[usize])) {
        let mut probe = |dx: i64, dy: i64, dz: i64| {
            let cell = (home.0 + dx, home.1 + dy, home.2 + dz);
            if let Some(members) = self.grid.cells().get(&cell) {
                visit(members);
            }
        };
        if ring == 0 {
            probe(0, 0, 0);
            return;
        }
        let r = ring;
        for &dx in &[-r, r] {
            for dy in -r..=r {
                for dz in -r..=r {
                    probe(dx, dy, dz);
                }
            }
        }
        for &dy in &[-r, r] {
            for dx in -(r - 1)..=(r - 1) {
                for dz in -r..=r {
                    probe(dx, dy, dz);
                }
            }
        }
        for &dz in &[-r, r] {
            for dx in -(r - 1)..=(r - 1) {
                for dy in -(r - 1)..=(r - 1) {
                    probe(dx, dy, dz);
                }
            }
        }
    }
}

/// Extract one k-NN sample per centroid carrying `role`. Samples keep
/// centroid order; parallel extraction collects in order, so the result is
/// thread-count independent.
pub fn extract_samples(
    cloud: &MultispectralPointCloud,
    grid: &GridIndex,
    centroids: &[Centroid],
    k: usize,
    role: Role,
) -> Result<SampleSet> {
    if k == 0 {
        return Err(Error::validation("k", "receptive field must be >= 1"));
    }
    let searcher = RingSearcher::new(cloud, grid);
    let picked: Vec<(usize, [f64; 3])> = centroids
        .iter()
        .enumerate()
        .filter(|(_, c)| c.role == role)
        .map(|(i, c)| (i, c.position))
        .collect();
    let samples: Vec<Sample> = picked
        .par_iter()
        .map(|&(centroid, position)| {
            let (indices, padded) = searcher.query(position, k);
            Sample {
                centroid,
                indices,
                padded,
            }
        })
        .collect();
    Ok(SampleSet { samples, k, role })
}

/// The RS baseline: uniformly chosen cloud points act as centroids, k-NN
/// extraction identical to GBS. Deterministic per seed.
pub fn random_sampling_baseline(
    cloud: &MultispectralPointCloud,
    grid: &GridIndex,
    n_samples: usize,
    k: usize,
    seed: u64,
) -> Result<SampleSet> {
    if k == 0 {
        return Err(Error::validation("k", "receptive field must be >= 1"));
    }
    if n_samples > cloud.len() {
        return Err(Error::validation(
            "n_samples",
            format!("{n_samples} exceeds cloud size {}", cloud.len()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, cloud.len(), n_samples);
    let searcher = RingSearcher::new(cloud, grid);
    let picked: Vec<usize> = picks.into_iter().collect();
    let samples: Vec<Sample> = picked
        .par_iter()
        .map(|&point| {
            let p = cloud.position(point);
            let (indices, padded) = searcher.query([p[0] as f64, p[1] as f64, p[2] as f64], k);
            Sample {
                centroid: point,
                indices,
                padded,
            }
        })
        .collect();
    Ok(SampleSet {
        samples,
        k,
        role: Role::Train,
    })
}
