//! The experiment harnesses: single runs, the module ablation grid, the
//! hyperparameter sweeps, and the sampling-strategy comparison.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::determine_tail;
use crate::metrics::MetricsReport;
use crate::network::{ModuleToggles, NetworkParams};
use crate::pointcloud::MultispectralPointCloud;
use crate::sampling::{
    assign_eval_mask, build_grid, default_cell_size, extract_samples, random_sampling_baseline,
    select_training_centroids, sparsify, Centroid, GridIndex, Role, SampleSet, SelectionReport,
};

use super::eval::{evaluate, Evaluation};
use super::train::{train, train_label_histogram};
use super::{RunConfig, RunLog, SamplingConfig, SamplingStrategy};

/// Everything grid-balanced sampling produces for one cloud: the grid, the
/// labeled centroids with roles assigned, both sample sets, and the mask of
/// points eligible for evaluation.
#[derive(Debug, Clone)]
pub struct SamplingArtifacts {
    pub cell_size: f64,
    pub grid: GridIndex,
    pub centroids: Vec<Centroid>,
    pub selection: SelectionReport,
    pub train_set: SampleSet,
    pub test_set: SampleSet,
    pub eval_mask: Vec<bool>,
}

/// Run grid-balanced sampling end to end. The random-sampling baseline is
/// not prepared here; it substitutes only the training set (see
/// [`compare_sampling`]), keeping evaluation on the grid-defined TEST split
/// so both strategies are scored on identical points.
pub fn prepare_sampling(
    cloud: &MultispectralPointCloud,
    config: &SamplingConfig,
) -> Result<SamplingArtifacts> {
    config.validate()?;
    let cell_size = config
        .cell_size
        .unwrap_or_else(|| default_cell_size(cloud, config.k));
    let grid = build_grid(cloud, cell_size)?;
    let mut centroids = sparsify(&grid, cloud);
    let selection =
        select_training_centroids(&mut centroids, cloud.classes(), config.train_ratio, config.seed)?;
    let eval_mask = assign_eval_mask(&grid, &centroids, cloud.len());
    let train_set = extract_samples(cloud, &grid, &centroids, config.k, Role::Train)?;
    let test_set = extract_samples(cloud, &grid, &centroids, config.k, Role::Test)?;
    Ok(SamplingArtifacts {
        cell_size,
        grid,
        centroids,
        selection,
        train_set,
        test_set,
        eval_mask,
    })
}

/// One complete run: sampling, training, evaluation.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub params: NetworkParams,
    pub log: RunLog,
    pub evaluation: Evaluation,
    pub train_seconds: f64,
}

/// Execute one run config on a cloud. With the `rs` strategy the training
/// set is replaced by the random-sampling baseline (matched sample count);
/// evaluation always uses the grid-defined TEST split.
pub fn run_once(cloud: &MultispectralPointCloud, run: &RunConfig) -> Result<RunOutcome> {
    run.validate()?;
    let artifacts = prepare_sampling(cloud, &run.sampling)?;
    let train_set = match run.sampling.strategy {
        SamplingStrategy::Gbs => artifacts.train_set,
        SamplingStrategy::Rs => random_sampling_baseline(
            cloud,
            &artifacts.grid,
            artifacts.train_set.samples.len(),
            run.sampling.k,
            run.sampling.seed,
        )?,
    };
    run_prepared(cloud, run, &train_set, &artifacts.test_set, &artifacts.eval_mask)
}

/// Train and evaluate with sampling already done.
fn run_prepared(
    cloud: &MultispectralPointCloud,
    run: &RunConfig,
    train_set: &SampleSet,
    test_set: &SampleSet,
    eval_mask: &[bool],
) -> Result<RunOutcome> {
    let net_config = run.network_config(cloud);
    let started = Instant::now();
    let (params, mut log) = train(cloud, train_set, &net_config, &run.loss, &run.train)?;
    let train_seconds = started.elapsed().as_secs_f64();

    let histogram = train_label_histogram(cloud, train_set);
    let tail_set = determine_tail(&histogram, run.loss.tail_threshold)?;
    let evaluation = evaluate(
        cloud,
        test_set,
        &params,
        &net_config,
        &run.train.toggles,
        &tail_set,
        eval_mask,
        run.train.seed,
    )?;
    log.final_report = Some(evaluation.report.clone());

    Ok(RunOutcome {
        params,
        log,
        evaluation,
        train_seconds,
    })
}

/// Mean and population standard deviation of a metric across seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn from_values(values: &[f64]) -> Self {
        assert!(!values.is_empty(), "need at least one value");
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4}+-{:.4}", self.mean, self.std)
    }
}

/// Metric statistics for one ablation configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub toggles: ModuleToggles,
    pub oa: MeanStd,
    pub aa: MeanStd,
    pub kappa: MeanStd,
    pub miou: MeanStd,
    pub tail_avg: MeanStd,
    /// Mean OA minus the baseline row's mean OA.
    pub delta_oa: f64,
    /// Mean tail accuracy minus the baseline row's.
    pub delta_tail_avg: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

/// The six ablation configurations: the bare backbone, each module alone,
/// the two-loss combination, and the full model.
pub fn ablation_configs() -> Vec<(&'static str, ModuleToggles)> {
    let t = |msff, msl, ltl| ModuleToggles { msff, msl, ltl };
    vec![
        ("baseline", t(false, false, false)),
        ("+msff", t(true, false, false)),
        ("+msl", t(false, true, false)),
        ("+ltl", t(false, false, true)),
        ("+ahl", t(false, true, true)),
        ("ours", t(true, true, true)),
    ]
}

fn collect_stats(reports: &[MetricsReport]) -> (MeanStd, MeanStd, MeanStd, MeanStd, MeanStd) {
    let pull = |f: &dyn Fn(&MetricsReport) -> f64| {
        MeanStd::from_values(&reports.iter().map(f).collect::<Vec<_>>())
    };
    (
        pull(&|r| r.oa),
        pull(&|r| r.aa),
        pull(&|r| r.kappa),
        pull(&|r| r.miou),
        pull(&|r| r.tail_avg.unwrap_or(0.0)),
    )
}

/// Run the six-configuration module ablation over the given seeds. Each
/// seed re-runs sampling, initialization, and training end to end.
pub fn ablate(cloud: &MultispectralPointCloud, run: &RunConfig, seeds: &[u64]) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::validation("seeds", "need at least one seed"));
    }
    let mut rows = Vec::new();
    for (name, toggles) in ablation_configs() {
        let mut reports = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut config = run.clone();
            config.sampling.seed = seed;
            config.train.seed = seed;
            config.train.toggles = toggles;
            let outcome = run_once(cloud, &config)?;
            reports.push(outcome.evaluation.report);
        }
        let (oa, aa, kappa, miou, tail_avg) = collect_stats(&reports);
        rows.push(AblationRow {
            name: name.to_string(),
            toggles,
            oa,
            aa,
            kappa,
            miou,
            tail_avg,
            delta_oa: 0.0,
            delta_tail_avg: 0.0,
        });
    }
    let base_oa = rows[0].oa.mean;
    let base_tail = rows[0].tail_avg.mean;
    for row in &mut rows {
        row.delta_oa = row.oa.mean - base_oa;
        row.delta_tail_avg = row.tail_avg.mean - base_tail;
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("config,msff,msl,ltl,oa,aa,kappa,miou,tail_avg,delta_oa,delta_tail_avg\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{:+.4},{:+.4}\n",
                row.name,
                row.toggles.msff as u8,
                row.toggles.msl as u8,
                row.toggles.ltl as u8,
                row.oa,
                row.aa,
                row.kappa,
                row.miou,
                row.tail_avg,
                row.delta_oa,
                row.delta_tail_avg,
            ));
        }
        out
    }
}

/// Which hyperparameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    /// Points per sample; sampling is re-run per value.
    ReceptiveField,
    /// Class-weight truncation floor.
    WeightTruncation,
    /// Multi-scale term multiplier.
    Lambda,
}

impl SweepKind {
    pub fn default_values(self) -> Vec<f64> {
        match self {
            SweepKind::ReceptiveField => vec![1024.0, 2048.0, 4096.0, 10240.0, 40960.0],
            SweepKind::WeightTruncation => vec![0.01, 0.05, 0.10],
            SweepKind::Lambda => vec![0.1, 0.5, 1.0, 5.0, 10.0],
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            SweepKind::ReceptiveField => "receptive_field",
            SweepKind::WeightTruncation => "weight_truncation",
            SweepKind::Lambda => "lambda",
        }
    }
}

impl std::str::FromStr for SweepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "receptive_field" | "receptive-field" => Ok(SweepKind::ReceptiveField),
            "weight_truncation" | "weight-truncation" => Ok(SweepKind::WeightTruncation),
            "lambda" => Ok(SweepKind::Lambda),
            other => Err(Error::validation(
                "sweep",
                format!("unknown sweep {other:?} (expected receptive_field, weight_truncation, or lambda)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub oa: MeanStd,
    pub aa: MeanStd,
    pub kappa: MeanStd,
    pub miou: MeanStd,
    pub tail_avg: MeanStd,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepTable {
    pub kind: SweepKind,
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
}

/// Sweep one hyperparameter over `values` (the published grid when None),
/// averaging metrics over the seeds.
pub fn sweep(
    cloud: &MultispectralPointCloud,
    run: &RunConfig,
    kind: SweepKind,
    values: Option<&[f64]>,
    seeds: &[u64],
) -> Result<SweepTable> {
    if seeds.is_empty() {
        return Err(Error::validation("seeds", "need at least one seed"));
    }
    let values: Vec<f64> = match values {
        Some(v) if !v.is_empty() => v.to_vec(),
        _ => kind.default_values(),
    };
    let mut rows = Vec::new();
    for &value in &values {
        let mut reports = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut config = run.clone();
            config.sampling.seed = seed;
            config.train.seed = seed;
            match kind {
                SweepKind::ReceptiveField => {
                    if value < 1.0 || value.fract() != 0.0 {
                        return Err(Error::validation(
                            "values",
                            format!("receptive field {value} is not a positive integer"),
                        ));
                    }
                    config.sampling.k = value as usize;
                    config.network.receptive_field = None;
                }
                SweepKind::WeightTruncation => config.loss.weight_truncation = value,
                SweepKind::Lambda => config.loss.lambda = value,
            }
            let outcome = run_once(cloud, &config)?;
            reports.push(outcome.evaluation.report);
        }
        let (oa, aa, kappa, miou, tail_avg) = collect_stats(&reports);
        rows.push(SweepRow {
            value,
            oa,
            aa,
            kappa,
            miou,
            tail_avg,
        });
    }
    Ok(SweepTable {
        kind,
        seeds: seeds.to_vec(),
        rows,
    })
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{},oa,aa,kappa,miou,tail_avg\n", self.kind.label());
        for row in &self.rows {
            let value = if self.kind == SweepKind::ReceptiveField {
                format!("{}", row.value as usize)
            } else {
                format!("{}", row.value)
            };
            out.push_str(&format!(
                "{value},{},{},{},{},{}\n",
                row.oa, row.aa, row.kappa, row.miou, row.tail_avg,
            ));
        }
        out
    }
}

/// Metric statistics for one sampling strategy across seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategyStats {
    pub oa: MeanStd,
    pub aa: MeanStd,
    pub kappa: MeanStd,
    pub miou: MeanStd,
    /// Wall seconds spent constructing the training samples.
    pub sampling_seconds: MeanStd,
}

/// Side-by-side comparison of random sampling and grid-balanced sampling,
/// trained and scored identically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplingComparison {
    pub seeds: Vec<u64>,
    pub train_samples: usize,
    pub rs: StrategyStats,
    pub gbs: StrategyStats,
}

/// Train once per strategy per seed with equal sample counts and score both
/// on the grid-defined TEST split. The grid-balanced timing covers its full
/// pipeline (grid, sparsify, selection, extraction); the baseline reuses
/// the grid as a neighbor index and is timed over draw plus extraction.
pub fn compare_sampling(
    cloud: &MultispectralPointCloud,
    run: &RunConfig,
    seeds: &[u64],
) -> Result<SamplingComparison> {
    if seeds.is_empty() {
        return Err(Error::validation("seeds", "need at least one seed"));
    }
    run.validate()?;

    let mut gbs_reports = Vec::new();
    let mut rs_reports = Vec::new();
    let mut gbs_times = Vec::new();
    let mut rs_times = Vec::new();
    let mut train_samples = 0;

    for &seed in seeds {
        let mut config = run.clone();
        config.sampling.seed = seed;
        config.train.seed = seed;

        let sampling = &config.sampling;
        let started = Instant::now();
        let cell_size = sampling
            .cell_size
            .unwrap_or_else(|| default_cell_size(cloud, sampling.k));
        let grid = build_grid(cloud, cell_size)?;
        let mut centroids = sparsify(&grid, cloud);
        select_training_centroids(&mut centroids, cloud.classes(), sampling.train_ratio, seed)?;
        let gbs_train = extract_samples(cloud, &grid, &centroids, sampling.k, Role::Train)?;
        gbs_times.push(started.elapsed().as_secs_f64());

        let eval_mask = assign_eval_mask(&grid, &centroids, cloud.len());
        let test_set = extract_samples(cloud, &grid, &centroids, sampling.k, Role::Test)?;
        train_samples = gbs_train.samples.len();

        let started = Instant::now();
        let rs_train =
            random_sampling_baseline(cloud, &grid, gbs_train.samples.len(), sampling.k, seed)?;
        rs_times.push(started.elapsed().as_secs_f64());

        let gbs_outcome = run_prepared(cloud, &config, &gbs_train, &test_set, &eval_mask)?;
        gbs_reports.push(gbs_outcome.evaluation.report);
        let rs_outcome = run_prepared(cloud, &config, &rs_train, &test_set, &eval_mask)?;
        rs_reports.push(rs_outcome.evaluation.report);
    }

    let stats = |reports: &[MetricsReport], times: &[f64]| {
        let (oa, aa, kappa, miou, _) = collect_stats(reports);
        StrategyStats {
            oa,
            aa,
            kappa,
            miou,
            sampling_seconds: MeanStd::from_values(times),
        }
    };
    Ok(SamplingComparison {
        seeds: seeds.to_vec(),
        train_samples,
        rs: stats(&rs_reports, &rs_times),
        gbs: stats(&gbs_reports, &gbs_times),
    })
}

impl SamplingComparison {
    /// Two strategy columns, one row per metric.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,rs,gbs\n");
        let rows: [(&str, &MeanStd, &MeanStd); 5] = [
            ("oa", &self.rs.oa, &self.gbs.oa),
            ("aa", &self.rs.aa, &self.gbs.aa),
            ("kappa", &self.rs.kappa, &self.gbs.kappa),
            ("miou", &self.rs.miou, &self.gbs.miou),
            ("time_s", &self.rs.sampling_seconds, &self.gbs.sampling_seconds),
        ];
        for (name, rs, gbs) in rows {
            out.push_str(&format!("{name},{rs},{gbs}\n"));
        }
        out
    }
}
