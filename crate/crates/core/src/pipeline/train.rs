//! The SGD training loop: per-sample forward/backward passes in parallel,
//! gradients averaged per batch, decoupled weight decay on weight matrices,
//! and a geometric learning-rate schedule.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::loss::{
    compute_class_weights, determine_tail, downsample_labels, final_head_loss, guard_gate_norms,
    hybrid_loss, longtail_loss, multiscale_loss, one_hot, ClassWeights, LossConfig, TailSet,
};
use crate::network::{forward, is_weight, NetworkConfig, NetworkParams, SampleInput, SamplingPlan};
use crate::pointcloud::{MultispectralPointCloud, UNLABELED};
use crate::sampling::{Sample, SampleSet};
use crate::tensor::{Mat, Tape};

use super::{EpochLog, RunLog, TrainConfig};

/// Learning rate at a given epoch: the base rate decayed geometrically.
pub fn lr_at(config: &TrainConfig, epoch: usize) -> f64 {
    config.learning_rate * config.lr_decay_per_epoch.powi(epoch as i32)
}

/// Labeled-point counts per class across every row of every training
/// sample. Points pulled into several samples (or duplicated by padding)
/// count once per occurrence, since that is how often the losses see them.
pub fn train_label_histogram(cloud: &MultispectralPointCloud, set: &SampleSet) -> Vec<u64> {
    let mut hist = vec![0u64; cloud.classes()];
    for sample in &set.samples {
        for &i in &sample.indices {
            let label = cloud.label(i);
            if label != UNLABELED {
                hist[label as usize] += 1;
            }
        }
    }
    hist
}

/// Loss components and gradients from one sample's forward/backward pass.
struct SamplePass {
    grads: BTreeMap<String, Mat>,
    l_scale: f64,
    l_tail: f64,
    l_ce: f64,
    total: f64,
}

fn sample_pass(
    cloud: &MultispectralPointCloud,
    sample: &Sample,
    params: &NetworkParams,
    net_config: &NetworkConfig,
    loss_config: &LossConfig,
    train_config: &TrainConfig,
    class_weights: &ClassWeights,
    tail_set: &TailSet,
    plan_seed: u64,
) -> SamplePass {
    let toggles = &train_config.toggles;
    let mut tape = Tape::new();
    let binding = params.bind(&mut tape);
    let input = SampleInput::from_cloud(cloud, &sample.indices);
    let plan = SamplingPlan::generate(net_config, plan_seed);
    let outputs = forward(&mut tape, &binding, net_config, &input, &plan, toggles.msff);
    let f5 = outputs.decoder[4];
    let y = one_hot(&input.labels, net_config.classes);

    let l_scale = toggles.msl.then(|| {
        let y_levels = downsample_labels(&y, &outputs.state);
        multiscale_loss(&mut tape, &binding, &outputs.decoder, &y_levels, &class_weights.w).total
    });
    let (l_tail, l_ce) = if toggles.ltl {
        let lt = longtail_loss(&mut tape, &binding, f5, &input.labels, tail_set);
        (Some(lt.total), None)
    } else {
        let fh = final_head_loss(&mut tape, &binding, f5, &y, &class_weights.w);
        (None, Some(fh.loss))
    };
    let supervised = l_tail.or(l_ce).expect("one supervised term");
    let total = match l_scale {
        Some(ls) => hybrid_loss(&mut tape, ls, supervised, loss_config.lambda),
        None => supervised,
    };

    tape.backward(total);
    let scalar = |id| tape.value(id)[(0, 0)];
    SamplePass {
        grads: binding.grads(&tape),
        l_scale: l_scale.map_or(0.0, scalar),
        l_tail: l_tail.map_or(0.0, scalar),
        l_ce: l_ce.map_or(0.0, scalar),
        total: scalar(total),
    }
}

/// Train a fresh network on the given samples. Returns the final parameters
/// and the per-epoch log; `epochs: 0` returns the initialization untouched.
pub fn train(
    cloud: &MultispectralPointCloud,
    train_set: &SampleSet,
    net_config: &NetworkConfig,
    loss_config: &LossConfig,
    train_config: &TrainConfig,
) -> Result<(NetworkParams, RunLog)> {
    net_config.validate()?;
    loss_config.validate()?;
    train_config.validate()?;
    if train_set.samples.is_empty() {
        return Err(Error::Pipeline("training set has no samples".into()));
    }
    if train_set.k != net_config.receptive_field {
        return Err(Error::Pipeline(format!(
            "sample size {} does not match the receptive field {}",
            train_set.k, net_config.receptive_field
        )));
    }

    let histogram = train_label_histogram(cloud, train_set);
    let class_weights = if loss_config.class_weighting {
        compute_class_weights(&histogram, loss_config.weight_truncation)?
    } else {
        ClassWeights::ones(cloud.classes())
    };
    let tail_set = determine_tail(&histogram, loss_config.tail_threshold)?;

    let mut params = NetworkParams::init_for(net_config, &train_config.toggles, train_config.seed);
    let mut log = RunLog::default();
    if train_config.epochs == 0 {
        return Ok((params, log));
    }

    // Stream 0 belongs to parameter initialization; the epoch loop draws
    // shuffles and downsampling-plan seeds from stream 1.
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    rng.set_stream(1);

    let n = train_set.samples.len();
    for epoch in 0..train_config.epochs {
        let started = Instant::now();
        let lr = lr_at(train_config, epoch);

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);

        let mut sums = [0.0f64; 4];
        for batch in order.chunks(train_config.batch_size) {
            let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
            let passes: Vec<SamplePass> = batch
                .par_iter()
                .zip(seeds.par_iter())
                .map(|(&s, &seed)| {
                    sample_pass(
                        cloud,
                        &train_set.samples[s],
                        &params,
                        net_config,
                        loss_config,
                        train_config,
                        &class_weights,
                        &tail_set,
                        seed,
                    )
                })
                .collect();

            let mut mean_grads: BTreeMap<String, Mat> = BTreeMap::new();
            for pass in &passes {
                if !pass.total.is_finite() {
                    return Err(Error::Pipeline(format!(
                        "non-finite loss {} at epoch {epoch}",
                        pass.total
                    )));
                }
                sums[0] += pass.l_scale;
                sums[1] += pass.l_tail;
                sums[2] += pass.l_ce;
                sums[3] += pass.total;
                for (name, g) in &pass.grads {
                    match mean_grads.get_mut(name) {
                        Some(acc) => *acc += g,
                        None => {
                            mean_grads.insert(name.clone(), g.clone());
                        }
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for (name, mut g) in mean_grads {
                g *= inv;
                let wd = if is_weight(&name) { train_config.weight_decay } else { 0.0 };
                params.update(&name, |p| {
                    p.zip_mut_with(&g, |p, &g| *p -= lr * (g + wd * *p));
                });
            }
            guard_gate_norms(&mut params);
        }

        log.epochs.push(EpochLog {
            epoch,
            lr,
            l_scale: sums[0] / n as f64,
            l_tail: sums[1] / n as f64,
            l_ce: sums[2] / n as f64,
            total: sums[3] / n as f64,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }

    Ok((params, log))
}
