//! Seeded synthetic scenes: Gaussian class blobs with spectral signatures
//! and class-stratified sparse labeling.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::Result;

use super::{MultispectralPointCloud, SceneSpec, UNLABELED};

/// Points per Gaussian blob before a class is split across several blobs.
const POINTS_PER_CLUSTER: usize = 2048;

/// Generate a cloud from `spec`: per class, points scatter around uniformly
/// placed cluster centers with the class's object scale; spectra are the
/// class signature plus Gaussian noise, clamped to [0,1]. Exactly
/// ceil(label_rate * N) points keep their label, allocated per class by
/// largest remainder so small classes are not wiped out. Bit-identical
/// output for identical specs.
pub fn generate_synthetic_scene(spec: &SceneSpec) -> Result<MultispectralPointCloud> {
    spec.validate()?;
    let n = spec.total_points();
    let bands = spec.bands();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = Normal::new(0.0f64, 1.0).expect("unit normal");
    let span = Uniform::new(0.0f64, spec.extent).expect("extent range");

    let mut positions = Vec::with_capacity(n);
    let mut spectra = Vec::with_capacity(n * bands);
    let mut labels = Vec::with_capacity(n);
    for (class_id, class) in spec.classes.iter().enumerate() {
        let clusters = class.point_count.div_ceil(POINTS_PER_CLUSTER);
        let centers: Vec<[f64; 3]> = (0..clusters)
            .map(|_| [span.sample(&mut rng), span.sample(&mut rng), span.sample(&mut rng)])
            .collect();
        // Spread the class count as evenly as possible across its blobs.
        let base = class.point_count / clusters;
        let extra = class.point_count % clusters;
        for (c, center) in centers.iter().enumerate() {
            let count = base + usize::from(c < extra);
            for _ in 0..count {
                positions.push([
                    (center[0] + class.object_scale * unit.sample(&mut rng)) as f32,
                    (center[1] + class.object_scale * unit.sample(&mut rng)) as f32,
                    (center[2] + class.object_scale * unit.sample(&mut rng)) as f32,
                ]);
                for &sig in &class.spectral_signature {
                    let v = sig + spec.noise_sigma * unit.sample(&mut rng);
                    spectra.push(v.clamp(0.0, 1.0) as f32);
                }
                labels.push(class_id as i32);
            }
        }
    }

    mask_labels(&mut labels, spec, &mut rng);

    let class_names = spec.classes.iter().map(|c| c.name.clone()).collect();
    MultispectralPointCloud::new(positions, spectra, labels, class_names, bands)
}

/// Unlabel points until exactly ceil(label_rate * N) remain labeled.
///
/// Per-class quotas start at min(count, max(1, floor(rate * count))) and the
/// largest fractional remainders absorb the difference to the exact total;
/// when the total is too small to give every class a point, the largest
/// classes give theirs up last.
fn mask_labels(labels: &mut [i32], spec: &SceneSpec, rng: &mut ChaCha8Rng) {
    let n = labels.len();
    let target = (spec.label_rate * n as f64).ceil() as usize;
    let counts: Vec<usize> = spec.classes.iter().map(|c| c.point_count).collect();
    let quotas: Vec<f64> = counts.iter().map(|&c| spec.label_rate * c as f64).collect();
    let mut keep: Vec<usize> = quotas
        .iter()
        .zip(&counts)
        .map(|(&q, &c)| (q.floor() as usize).max(1).min(c))
        .collect();

    let mut kept: usize = keep.iter().sum();
    if kept < target {
        let mut order: Vec<usize> = (0..counts.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = quotas[a] - quotas[a].floor();
            let rb = quotas[b] - quotas[b].floor();
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        while kept < target {
            let before = kept;
            for &c in &order {
                if kept == target {
                    break;
                }
                if keep[c] < counts[c] {
                    keep[c] += 1;
                    kept += 1;
                }
            }
            assert!(kept > before, "label quota cannot reach target");
        }
    } else if kept > target {
        // Forced only when per-class minimums overshoot (many tiny classes at
        // a very low rate); drain the largest classes first, to 1, then to 0.
        let mut order: Vec<usize> = (0..counts.len()).collect();
        order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
        for floor in [1usize, 0] {
            while kept > target {
                let before = kept;
                for &c in &order {
                    if kept == target {
                        break;
                    }
                    if keep[c] > floor {
                        keep[c] -= 1;
                        kept -= 1;
                    }
                }
                if kept == before {
                    break;
                }
            }
        }
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); counts.len()];
    for (i, &label) in labels.iter().enumerate() {
        by_class[label as usize].push(i);
    }
    for (c, mut members) in by_class.into_iter().enumerate() {
        members.shuffle(rng);
        for &i in &members[keep[c]..] {
            labels[i] = UNLABELED;
        }
    }
}
