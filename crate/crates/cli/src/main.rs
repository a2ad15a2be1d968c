//! Command-line front end for the segmentation pipeline: scene generation,
//! sample extraction, training, evaluation, gradient checking, and the
//! ablation and sampling-comparison experiments.
//!
//! Every experiment subcommand takes the same run-config JSON file with
//! sections {scene, sampling, network, loss, train}; missing fields fall
//! back to the documented defaults. Reports are written as a JSON and a CSV
//! file sharing the `--out` path's stem.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use mpcseg_core::loss::determine_tail;
use mpcseg_core::pipeline::{
    ablate, compare_sampling, evaluate, gradient_suite, prepare_sampling, run_once, sweep,
    train_label_histogram, RunConfig, SamplingConfig, SamplingStrategy, SweepKind,
};
use mpcseg_core::pointcloud::{
    generate_synthetic_scene, load_cloud, save_cloud, CloudFormat, SceneSpec,
};
use mpcseg_core::sampling::{random_sampling_baseline, SampleManifest, SampleSet};
use mpcseg_core::{MultispectralPointCloud, NetworkParams, UNLABELED};

#[derive(Parser, Debug)]
#[command(name = "mpcseg", version, about = "Multispectral point cloud segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic labeled cloud from a scene spec file.
    Gen {
        /// Scene spec JSON; the built-in long-tailed scene when omitted.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Cloud output path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "csv")]
        format: CloudFormat,
    },
    /// Run grid-balanced sampling on a cloud and emit the sample manifest.
    Sample {
        /// Input cloud path.
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long, default_value = "csv")]
        format: CloudFormat,
        /// Grid cell size in scene units; derived from the cloud when omitted.
        #[arg(long)]
        cell_size: Option<f64>,
        /// Fraction of labeled centroids per class that become TRAIN.
        #[arg(long, default_value_t = 0.05)]
        train_ratio: f64,
        /// Points per extracted sample (the receptive field).
        #[arg(long, default_value_t = 4096)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "gbs")]
        strategy: SamplingStrategy,
        /// Manifest JSON output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a cloud per the run config and evaluate on the TEST split.
    Train {
        /// Run config JSON with sections {scene, sampling, network, loss, train}.
        #[arg(long)]
        config: PathBuf,
        /// Load this cloud instead of generating one from the scene section.
        #[arg(long)]
        cloud: Option<PathBuf>,
        #[arg(long, default_value = "csv")]
        format: CloudFormat,
        /// Trained parameters output path (binary).
        #[arg(long)]
        out_params: PathBuf,
        /// Report path stem; writes .json, .csv, and .epochs.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate saved parameters on a cloud's TEST split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        cloud: Option<PathBuf>,
        #[arg(long, default_value = "csv")]
        format: CloudFormat,
        /// Trained parameters path (binary).
        #[arg(long)]
        params: PathBuf,
        /// Report path stem; writes .json and .csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare tape gradients against finite differences for every stage.
    Gradcheck {
        /// Seeds to run the suite under.
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
        /// Optional report path stem; writes .json and .csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the six-configuration module ablation, or one hyperparameter sweep.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        cloud: Option<PathBuf>,
        #[arg(long, default_value = "csv")]
        format: CloudFormat,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
        /// Sweep this hyperparameter instead of toggling modules:
        /// receptive_field, weight_truncation, or lambda.
        #[arg(long)]
        sweep: Option<SweepKind>,
        /// Sweep grid; the published grid for the swept parameter when omitted.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        /// Report path stem; writes .json and .csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on grid-balanced and random sampling and report both.
    CompareSampling {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        cloud: Option<PathBuf>,
        #[arg(long, default_value = "csv")]
        format: CloudFormat,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
        /// Report path stem; writes .json and .csv.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Gen { scene, out, format } => gen(scene.as_deref(), &out, format),
        Command::Sample {
            cloud,
            format,
            cell_size,
            train_ratio,
            k,
            seed,
            strategy,
            out,
        } => {
            let config = SamplingConfig {
                strategy,
                cell_size,
                train_ratio,
                k,
                seed,
            };
            sample(&cloud, format, &config, &out)
        }
        Command::Train {
            config,
            cloud,
            format,
            out_params,
            out,
        } => train(&config, cloud.as_deref(), format, &out_params, &out),
        Command::Eval {
            config,
            cloud,
            format,
            params,
            out,
        } => eval(&config, cloud.as_deref(), format, &params, &out),
        Command::Gradcheck { seeds, out } => gradcheck(&seeds, out.as_deref()),
        Command::Ablate {
            config,
            cloud,
            format,
            seeds,
            sweep,
            values,
            out,
        } => ablate_cmd(&config, cloud.as_deref(), format, &seeds, sweep, values.as_deref(), &out),
        Command::CompareSampling {
            config,
            cloud,
            format,
            seeds,
            out,
        } => compare_sampling_cmd(&config, cloud.as_deref(), format, &seeds, &out),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {what} {}", path.display()))
}

fn load_run_config(path: &Path) -> Result<RunConfig> {
    let run: RunConfig = read_json(path, "run config")?;
    run.validate()?;
    Ok(run)
}

/// Load the cloud file when given, otherwise generate the config's scene.
fn resolve_cloud(
    run: &RunConfig,
    cloud: Option<&Path>,
    format: CloudFormat,
) -> Result<MultispectralPointCloud> {
    match cloud {
        Some(path) => {
            load_cloud(path, format).with_context(|| format!("loading {}", path.display()))
        }
        None => Ok(generate_synthetic_scene(&run.scene)?),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Write `<stem>.json` and `<stem>.csv` for one report.
fn write_report<T: Serialize>(stem: &Path, report: &T, csv: &str) -> Result<()> {
    let json = serde_json::to_string_pretty(report)?;
    write_file(&stem.with_extension("json"), &(json + "\n"))?;
    write_file(&stem.with_extension("csv"), csv)?;
    Ok(())
}

fn gen(scene: Option<&Path>, out: &Path, format: CloudFormat) -> Result<ExitCode> {
    let spec: SceneSpec = match scene {
        Some(path) => read_json(path, "scene spec")?,
        None => SceneSpec::default(),
    };
    let cloud = generate_synthetic_scene(&spec)?;
    save_cloud(&cloud, out, format)?;
    let labeled = cloud.labels().iter().filter(|&&l| l != UNLABELED).count();
    println!(
        "{} points, {} classes, {} labeled -> {}",
        cloud.len(),
        cloud.classes(),
        labeled,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn count_padded(set: &SampleSet) -> usize {
    set.samples.iter().filter(|s| s.padded).count()
}

fn sample(
    cloud_path: &Path,
    format: CloudFormat,
    config: &SamplingConfig,
    out: &Path,
) -> Result<ExitCode> {
    let cloud = load_cloud(cloud_path, format)
        .with_context(|| format!("loading {}", cloud_path.display()))?;
    let artifacts = prepare_sampling(&cloud, config)?;
    let train_set = match config.strategy {
        SamplingStrategy::Gbs => artifacts.train_set,
        SamplingStrategy::Rs => random_sampling_baseline(
            &cloud,
            &artifacts.grid,
            artifacts.train_set.samples.len(),
            config.k,
            config.seed,
        )?,
    };
    let manifest = SampleManifest {
        strategy: match config.strategy {
            SamplingStrategy::Gbs => "gbs".into(),
            SamplingStrategy::Rs => "rs".into(),
        },
        cell_size: artifacts.cell_size,
        train_ratio: config.train_ratio,
        k: config.k,
        seed: config.seed,
        centroid_roles: artifacts.centroids.iter().map(|c| c.role).collect(),
        selection: artifacts.selection,
        train_samples: train_set.samples.len(),
        test_samples: artifacts.test_set.samples.len(),
        padded_samples: count_padded(&train_set) + count_padded(&artifacts.test_set),
        eval_points: artifacts.eval_mask.iter().filter(|&&m| m).count(),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    write_file(out, &(json + "\n"))?;
    println!(
        "{} train samples, {} test samples, {} eval points -> {}",
        manifest.train_samples,
        manifest.test_samples,
        manifest.eval_points,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn epochs_csv(log: &mpcseg_core::RunLog) -> String {
    let mut csv = String::from("epoch,lr,l_scale,l_tail,l_ce,total,wall_ms\n");
    for e in &log.epochs {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            e.epoch, e.lr, e.l_scale, e.l_tail, e.l_ce, e.total, e.wall_ms
        ));
    }
    csv
}

fn train(
    config: &Path,
    cloud: Option<&Path>,
    format: CloudFormat,
    out_params: &Path,
    out: &Path,
) -> Result<ExitCode> {
    let run = load_run_config(config)?;
    let cloud = resolve_cloud(&run, cloud, format)?;
    let outcome = run_once(&cloud, &run)?;
    outcome.params.save(out_params)?;

    let report = &outcome.evaluation.report;
    write_report(out, &outcome.log, &report.to_csv(cloud.class_names()))?;
    write_file(&out.with_extension("epochs.csv"), &epochs_csv(&outcome.log))?;
    println!(
        "trained {} epochs in {:.1}s; OA {:.4} kappa {:.4} ({} of {} masked points scored)",
        outcome.log.epochs.len(),
        outcome.train_seconds,
        report.oa,
        report.kappa,
        outcome.evaluation.scored_points,
        outcome.evaluation.masked_points,
    );
    println!("params -> {}", out_params.display());
    Ok(ExitCode::SUCCESS)
}

fn eval(
    config: &Path,
    cloud: Option<&Path>,
    format: CloudFormat,
    params_path: &Path,
    out: &Path,
) -> Result<ExitCode> {
    let run = load_run_config(config)?;
    let cloud = resolve_cloud(&run, cloud, format)?;
    let params = NetworkParams::load(params_path)?;

    let artifacts = prepare_sampling(&cloud, &run.sampling)?;
    let train_set = match run.sampling.strategy {
        SamplingStrategy::Gbs => artifacts.train_set,
        SamplingStrategy::Rs => random_sampling_baseline(
            &cloud,
            &artifacts.grid,
            artifacts.train_set.samples.len(),
            run.sampling.k,
            run.sampling.seed,
        )?,
    };
    let histogram = train_label_histogram(&cloud, &train_set);
    let tail_set = determine_tail(&histogram, run.loss.tail_threshold)?;
    let net_config = run.network_config(&cloud);
    let evaluation = evaluate(
        &cloud,
        &artifacts.test_set,
        &params,
        &net_config,
        &run.train.toggles,
        &tail_set,
        &artifacts.eval_mask,
        run.train.seed,
    )?;

    let report = &evaluation.report;
    write_report(out, report, &report.to_csv(cloud.class_names()))?;
    println!(
        "OA {:.4} AA {:.4} kappa {:.4} mIoU {:.4} ({} of {} masked points scored)",
        report.oa, report.aa, report.kappa, report.miou,
        evaluation.scored_points, evaluation.masked_points,
    );
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(seeds: &[u64], out: Option<&Path>) -> Result<ExitCode> {
    let cases = gradient_suite(seeds);
    for case in &cases {
        println!(
            "{} seed {}: max rel error {:.3e} over {} entries: {}",
            case.name,
            case.seed,
            case.max_rel_error,
            case.entries_checked,
            if case.passed() { "pass" } else { "FAIL" },
        );
    }
    let passed = cases.iter().filter(|c| c.passed()).count();
    println!("gradient suite: {passed}/{} cases passed", cases.len());

    if let Some(stem) = out {
        let rows: Vec<serde_json::Value> = cases
            .iter()
            .map(|c| {
                serde_json::json!({
                    "case": c.name,
                    "seed": c.seed,
                    "max_rel_error": c.max_rel_error,
                    "entries_checked": c.entries_checked,
                    "passed": c.passed(),
                })
            })
            .collect();
        let mut csv = String::from("case,seed,max_rel_error,entries_checked,passed\n");
        for c in &cases {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                c.name,
                c.seed,
                c.max_rel_error,
                c.entries_checked,
                c.passed()
            ));
        }
        write_report(stem, &rows, &csv)?;
    }

    Ok(if passed == cases.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn ablate_cmd(
    config: &Path,
    cloud: Option<&Path>,
    format: CloudFormat,
    seeds: &[u64],
    sweep_kind: Option<SweepKind>,
    values: Option<&[f64]>,
    out: &Path,
) -> Result<ExitCode> {
    let run = load_run_config(config)?;
    let cloud = resolve_cloud(&run, cloud, format)?;
    let csv = match sweep_kind {
        Some(kind) => {
            let table = sweep(&cloud, &run, kind, values, seeds)?;
            let csv = table.to_csv();
            write_report(out, &table, &csv)?;
            csv
        }
        None => {
            let table = ablate(&cloud, &run, seeds)?;
            let csv = table.to_csv();
            write_report(out, &table, &csv)?;
            csv
        }
    };
    print!("{csv}");
    Ok(ExitCode::SUCCESS)
}

fn compare_sampling_cmd(
    config: &Path,
    cloud: Option<&Path>,
    format: CloudFormat,
    seeds: &[u64],
    out: &Path,
) -> Result<ExitCode> {
    let run = load_run_config(config)?;
    let cloud = resolve_cloud(&run, cloud, format)?;
    let comparison = compare_sampling(&cloud, &run, seeds)?;
    let csv = comparison.to_csv();
    write_report(out, &comparison, &csv)?;
    print!("{csv}");
    Ok(ExitCode::SUCCESS)
}
