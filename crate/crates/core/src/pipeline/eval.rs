//! Evaluation: per-point score aggregation across overlapping test samples,
//! then the metrics report over the masked points.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::loss::{predict, prediction_scores, TailSet};
use crate::metrics::{compute_report, ConfusionMatrix, MetricsReport};
use crate::network::{forward, ModuleToggles, NetworkConfig, NetworkParams, SampleInput, SamplingPlan};
use crate::pointcloud::MultispectralPointCloud;
use crate::sampling::SampleSet;
use crate::tensor::{Mat, Tape};

/// Per-point score accumulator. A point that lands in several test samples
/// gets one score row per occurrence; its final scores are the mean.
#[derive(Debug, Clone)]
pub struct Aggregator {
    sums: Mat,
    counts: Vec<u32>,
}

impl Aggregator {
    pub fn new(points: usize, classes: usize) -> Self {
        Self {
            sums: Mat::zeros((points, classes)),
            counts: vec![0; points],
        }
    }

    /// Accumulate one sample's score rows; `indices[j]` is the cloud point
    /// behind score row `j`. Padded duplicates accumulate once per
    /// occurrence.
    pub fn add_rows(&mut self, indices: &[usize], scores: &Mat) {
        assert_eq!(indices.len(), scores.nrows(), "row count mismatch");
        for (j, &i) in indices.iter().enumerate() {
            let mut row = self.sums.row_mut(i);
            row += &scores.row(j);
            self.counts[i] += 1;
        }
    }

    pub fn merge(&mut self, other: &Aggregator) {
        assert_eq!(self.counts.len(), other.counts.len(), "point count mismatch");
        self.sums += &other.sums;
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// How many samples contributed scores for point `i`.
    pub fn count(&self, i: usize) -> u32 {
        self.counts[i]
    }

    /// Mean score row for point `i`, or None when nothing scored it.
    pub fn averaged(&self, i: usize) -> Option<Vec<f64>> {
        if self.counts[i] == 0 {
            return None;
        }
        let inv = 1.0 / self.counts[i] as f64;
        Some(self.sums.row(i).iter().map(|v| v * inv).collect())
    }

    /// Argmax class per scored point (ties to the smallest id); unscored
    /// points get UNLABELED-agnostic class 0 but are masked out by callers.
    pub fn predictions(&self) -> Vec<i32> {
        let means = Mat::from_shape_fn(self.sums.dim(), |(i, l)| {
            if self.counts[i] == 0 {
                0.0
            } else {
                self.sums[(i, l)] / self.counts[i] as f64
            }
        });
        predict(&means)
    }
}

/// Everything one evaluation pass produces.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub confusion: ConfusionMatrix,
    /// Points the evaluation mask admits.
    pub masked_points: usize,
    /// Masked points that at least one test sample scored.
    pub scored_points: usize,
}

/// Score every test sample, average per-point scores, and compute metrics
/// over the masked points. Masked points no test sample covers are skipped.
pub fn evaluate(
    cloud: &MultispectralPointCloud,
    test_set: &SampleSet,
    params: &NetworkParams,
    net_config: &NetworkConfig,
    toggles: &ModuleToggles,
    tail_set: &TailSet,
    eval_mask: &[bool],
    seed: u64,
) -> Result<Evaluation> {
    net_config.validate()?;
    assert_eq!(eval_mask.len(), cloud.len(), "mask length mismatch");
    if test_set.samples.is_empty() {
        return Err(Error::Pipeline("evaluation set has no samples".into()));
    }
    if test_set.k != net_config.receptive_field {
        return Err(Error::Pipeline(format!(
            "sample size {} does not match the receptive field {}",
            test_set.k, net_config.receptive_field
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let seeds: Vec<u64> = test_set.samples.iter().map(|_| rng.random()).collect();

    let scored: Vec<Mat> = test_set
        .samples
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(sample, &plan_seed)| {
            let mut tape = Tape::new();
            let binding = params.bind(&mut tape);
            let input = SampleInput::from_cloud(cloud, &sample.indices);
            let plan = SamplingPlan::generate(net_config, plan_seed);
            let outputs = forward(&mut tape, &binding, net_config, &input, &plan, toggles.msff);
            let scores = prediction_scores(&mut tape, &binding, outputs.decoder[4], toggles.ltl);
            tape.value(scores).clone()
        })
        .collect();

    let mut aggregator = Aggregator::new(cloud.len(), net_config.classes);
    for (sample, scores) in test_set.samples.iter().zip(&scored) {
        aggregator.add_rows(&sample.indices, &scores);
    }

    let predictions = aggregator.predictions();
    let covered_mask: Vec<bool> = eval_mask
        .iter()
        .enumerate()
        .map(|(i, &m)| m && aggregator.count(i) > 0)
        .collect();
    let masked_points = eval_mask.iter().filter(|&&m| m).count();
    let scored_points = covered_mask.iter().filter(|&&m| m).count();
    if scored_points == 0 {
        return Err(Error::Pipeline(
            "no masked point was covered by a test sample".into(),
        ));
    }

    let mut confusion = ConfusionMatrix::new(net_config.classes);
    confusion.accumulate(cloud.labels(), &predictions, &covered_mask);
    let report = compute_report(&confusion, tail_set)?;

    Ok(Evaluation {
        report,
        confusion,
        masked_points,
        scored_points,
    })
}
