//! The composed gradient suite: each network stage and loss term built into
//! a scalar objective and compared against central finite differences over
//! every registered parameter.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::loss::{
    downsample_labels, hybrid_loss, longtail_loss, multiscale_loss, one_hot, TailSet,
};
use crate::network::{
    decode, encode, local_feature_encode, msff, ModuleToggles, NetworkConfig, NetworkParams,
    ParamBinding, SampleInput, SamplingPlan,
};
use crate::pointcloud::UNLABELED;
use crate::tensor::{Mat, Tape, TensorId};

/// Maximum relative error any suite case may report.
pub const GRAD_SUITE_TOLERANCE: f64 = 1e-3;

const FD_EPSILON: f64 = 1e-5;
const ENTRIES_PER_PARAM: usize = 8;

/// One (stage, seed) finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradSuiteCase {
    pub name: &'static str,
    pub seed: u64,
    pub max_rel_error: f64,
    pub entries_checked: usize,
}

impl GradSuiteCase {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= GRAD_SUITE_TOLERANCE
    }
}

/// The shape every suite case runs at: 64 points, 2 bands, 2 base channels,
/// 3 classes.
pub fn tiny_config() -> NetworkConfig {
    let mut config = NetworkConfig::new(64, 2, 3);
    config.base_channels = 2;
    config.knn_neighbors = 4;
    config
}

fn tiny_input(config: &NetworkConfig, rng: &mut ChaCha8Rng) -> SampleInput {
    let n = config.receptive_field;
    let positions = (0..n)
        .map(|_| [rng.random::<f64>() * 10.0, rng.random::<f64>() * 10.0, rng.random::<f64>() * 10.0])
        .collect();
    let spectra = Mat::from_shape_fn((n, config.bands), |_| rng.random::<f64>());
    let labels = (0..n)
        .map(|_| {
            if rng.random::<f64>() < 0.3 {
                UNLABELED
            } else {
                rng.random_range(0..config.classes as i32)
            }
        })
        .collect();
    SampleInput {
        positions,
        spectra,
        labels,
    }
}

/// Mean squared magnitude of a feature map; turns any output into a scalar
/// with dense gradients.
fn scalarize(tape: &mut Tape, x: TensorId) -> TensorId {
    let target = Mat::zeros(tape.value(x).dim());
    tape.mse(x, &target)
}

/// Central finite differences over a strided subset of each parameter's
/// entries (up to [`ENTRIES_PER_PARAM`] per parameter), against the tape
/// gradients of the same objective.
fn check_all_params<F>(params: &NetworkParams, build: &F) -> (f64, usize)
where
    F: Fn(&mut Tape, &ParamBinding) -> TensorId,
{
    let grads = {
        let mut tape = Tape::new();
        let binding = params.bind(&mut tape);
        let loss = build(&mut tape, &binding);
        tape.backward(loss);
        binding.grads(&tape)
    };
    let eval = |p: &NetworkParams| -> f64 {
        let mut tape = Tape::new();
        let binding = p.bind(&mut tape);
        let loss = build(&mut tape, &binding);
        tape.scalar_value(loss)
    };

    let mut work = params.clone();
    let mut max_rel_error = 0.0f64;
    let mut entries_checked = 0;
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in &names {
        let grad = &grads[name];
        let cols = grad.ncols();
        let len = grad.len();
        let step = (len.div_ceil(ENTRIES_PER_PARAM)).max(1);
        for flat in (0..len).step_by(step) {
            let (r, c) = (flat / cols, flat % cols);
            let orig = params.get(name)[(r, c)];
            work.update(name, |m| m[(r, c)] = orig + FD_EPSILON);
            let plus = eval(&work);
            work.update(name, |m| m[(r, c)] = orig - FD_EPSILON);
            let minus = eval(&work);
            work.update(name, |m| m[(r, c)] = orig);

            let fd = (plus - minus) / (2.0 * FD_EPSILON);
            let ad = grad[(r, c)];
            let denom = fd.abs().max(ad.abs()).max(1e-4);
            max_rel_error = max_rel_error.max((fd - ad).abs() / denom);
            entries_checked += 1;
        }
    }
    (max_rel_error, entries_checked)
}

/// Offset every parameter entry uniformly within `amplitude`.
///
/// Freshly initialized biases are zero, and input rows that die under relu
/// stay zero through the encoder, leaving later pre-activations exactly on
/// the relu kink. There the analytic subgradient (zero) and the central
/// difference (the average of the two one-sided slopes) legitimately
/// disagree, so the check must run at a generic point instead.
fn offset_params(params: &mut NetworkParams, amplitude: f64, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in &names {
        params.update(name, |m| {
            m.mapv_inplace(|v| v + rng.random_range(-amplitude..amplitude));
        });
    }
}

/// Run the six composed stages under every seed. Each case initializes
/// fresh parameters and a fresh input from the seed, so the suite exercises
/// different activation patterns per seed.
pub fn gradient_suite(seeds: &[u64]) -> Vec<GradSuiteCase> {
    let config = tiny_config();
    let mut out = Vec::new();
    for &seed in seeds {
        let mut params = NetworkParams::init_for(&config, &ModuleToggles::all(), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(3);
        offset_params(&mut params, 0.25, &mut rng);
        let input = tiny_input(&config, &mut rng);
        let plan = SamplingPlan::generate(&config, rng.random());
        let y = one_hot(&input.labels, config.classes);
        let tail_set = TailSet {
            is_tail: vec![false, false, true],
            shares: vec![0.5, 0.4, 0.1],
            threshold: 0.2,
        };
        let class_weights = vec![1.0 / 3.0; 3];

        type Build<'a> = Box<dyn Fn(&mut Tape, &ParamBinding) -> TensorId + 'a>;
        let cases: Vec<(&'static str, Build)> = vec![
            (
                "local_feature_encode",
                Box::new(|tape: &mut Tape, binding: &ParamBinding| {
                    let f0 = local_feature_encode(tape, binding, &config, &input);
                    scalarize(tape, f0)
                }),
            ),
            (
                "msff",
                Box::new(|tape: &mut Tape, binding: &ParamBinding| {
                    let f0 = local_feature_encode(tape, binding, &config, &input);
                    let state = encode(tape, binding, &config, f0, &input.positions, &plan);
                    let trace = msff(tape, binding, 2, &state);
                    scalarize(tape, trace.f_o)
                }),
            ),
            (
                "decode",
                Box::new(|tape: &mut Tape, binding: &ParamBinding| {
                    let f0 = local_feature_encode(tape, binding, &config, &input);
                    let state = encode(tape, binding, &config, f0, &input.positions, &plan);
                    let (decoder, _) = decode(tape, binding, &state, true);
                    scalarize(tape, decoder[4])
                }),
            ),
            (
                "multiscale_loss",
                Box::new(|tape: &mut Tape, binding: &ParamBinding| {
                    let f0 = local_feature_encode(tape, binding, &config, &input);
                    let state = encode(tape, binding, &config, f0, &input.positions, &plan);
                    let (decoder, _) = decode(tape, binding, &state, true);
                    let y_levels = downsample_labels(&y, &state);
                    multiscale_loss(tape, binding, &decoder, &y_levels, &class_weights).total
                }),
            ),
            (
                "longtail_loss",
                Box::new(|tape: &mut Tape, binding: &ParamBinding| {
                    let f0 = local_feature_encode(tape, binding, &config, &input);
                    let state = encode(tape, binding, &config, f0, &input.positions, &plan);
                    let (decoder, _) = decode(tape, binding, &state, true);
                    longtail_loss(tape, binding, decoder[4], &input.labels, &tail_set).total
                }),
            ),
            (
                "hybrid_loss",
                Box::new(|tape: &mut Tape, binding: &ParamBinding| {
                    let f0 = local_feature_encode(tape, binding, &config, &input);
                    let state = encode(tape, binding, &config, f0, &input.positions, &plan);
                    let (decoder, _) = decode(tape, binding, &state, true);
                    let y_levels = downsample_labels(&y, &state);
                    let ms = multiscale_loss(tape, binding, &decoder, &y_levels, &class_weights);
                    let lt = longtail_loss(tape, binding, decoder[4], &input.labels, &tail_set);
                    hybrid_loss(tape, ms.total, lt.total, 0.7)
                }),
            ),
        ];

        for (name, build) in &cases {
            let (max_rel_error, entries_checked) = check_all_params(&params, build);
            out.push(GradSuiteCase {
                name,
                seed,
                max_rel_error,
                entries_checked,
            });
        }
    }
    out
}
