use approx::assert_relative_eq;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;

use super::*;
use crate::tensor::Mat;

fn small_config() -> NetworkConfig {
    let mut config = NetworkConfig::new(32, 2, 3);
    config.base_channels = 2;
    config.knn_neighbors = 4;
    config
}

fn random_input(rng: &mut ChaCha8Rng, n: usize, bands: usize) -> SampleInput {
    SampleInput {
        positions: (0..n)
            .map(|_| {
                [
                    rng.random_range(0.0..10.0),
                    rng.random_range(0.0..10.0),
                    rng.random_range(0.0..10.0),
                ]
            })
            .collect(),
        spectra: Mat::from_shape_fn((n, bands), |_| rng.random_range(0.0..1.0)),
        labels: vec![0; n],
    }
}

#[test]
fn identical_points_encode_to_identical_rows() {
    let mut config = small_config();
    config.receptive_field = 6;
    let params = NetworkParams::init(&config, 1);
    let mut tape = crate::tensor::Tape::new();
    let binding = params.bind(&mut tape);
    let input = SampleInput {
        positions: vec![[1.0, 2.0, 3.0]; 6],
        spectra: Mat::from_elem((6, 2), 0.25),
        labels: vec![0; 6],
    };
    let f0 = local_feature_encode(&mut tape, &binding, &config, &input);
    let v = tape.value(f0);
    for i in 1..6 {
        for c in 0..v.ncols() {
            assert_eq!(v[(i, c)], v[(0, c)]);
        }
    }
}

#[test]
fn local_encoding_is_translation_invariant() {
    let mut config = small_config();
    config.receptive_field = 8;
    let params = NetworkParams::init(&config, 2);
    // Positions on a coarse binary grid so the +64 shift is exact.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let positions: Vec<[f64; 3]> = (0..8)
        .map(|_| {
            [
                rng.random_range(0..32) as f64 * 0.25,
                rng.random_range(0..32) as f64 * 0.25,
                rng.random_range(0..32) as f64 * 0.25,
            ]
        })
        .collect();
    let spectra = Mat::from_shape_fn((8, 2), |_| rng.random_range(0.0..1.0));
    let base = SampleInput {
        positions: positions.clone(),
        spectra: spectra.clone(),
        labels: vec![0; 8],
    };
    let shifted = SampleInput {
        positions: positions.iter().map(|p| [p[0] + 64.0, p[1] + 64.0, p[2] + 64.0]).collect(),
        spectra,
        labels: vec![0; 8],
    };

    let mut tape_a = crate::tensor::Tape::new();
    let binding_a = params.bind(&mut tape_a);
    let fa = local_feature_encode(&mut tape_a, &binding_a, &config, &base);
    let mut tape_b = crate::tensor::Tape::new();
    let binding_b = params.bind(&mut tape_b);
    let fb = local_feature_encode(&mut tape_b, &binding_b, &config, &shifted);
    assert_eq!(tape_a.value(fa), tape_b.value(fb));
}

#[test]
fn single_neighbor_sees_only_its_own_spectra() {
    // With knn_neighbors = 1 the neighborhood is the point itself, so two
    // points sharing spectra encode identically regardless of position.
    let mut config = small_config();
    config.receptive_field = 2;
    config.knn_neighbors = 1;
    let params = NetworkParams::init(&config, 4);
    let mut tape = crate::tensor::Tape::new();
    let binding = params.bind(&mut tape);
    let input = SampleInput {
        positions: vec![[0.0, 0.0, 0.0], [5.0, -3.0, 2.0]],
        spectra: Mat::from_elem((2, 2), 0.7),
        labels: vec![0; 2],
    };
    let f0 = local_feature_encode(&mut tape, &binding, &config, &input);
    let v = tape.value(f0);
    for c in 0..v.ncols() {
        assert_eq!(v[(0, c)], v[(1, c)]);
    }
}

#[test]
fn encoder_shape_chain_matches_the_shape_law() {
    let mut config = NetworkConfig::new(256, 3, 4);
    config.base_channels = 4;
    let params = NetworkParams::init(&config, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let input = random_input(&mut rng, 256, 3);
    let plan = SamplingPlan::generate(&config, 7);
    let mut tape = crate::tensor::Tape::new();
    let binding = params.bind(&mut tape);
    let out = forward(&mut tape, &binding, &config, &input, &plan, true);

    let expect = [(256, 4), (64, 16), (16, 64), (4, 256), (1, 1024)];
    for (level, &(rows, cols)) in expect.iter().enumerate() {
        assert_eq!(tape.value(out.state.features[level]).dim(), (rows, cols));
    }
    // Decoder mirrors the chain in reverse.
    for (i, &(rows, cols)) in expect.iter().rev().enumerate() {
        assert_eq!(tape.value(out.decoder[i]).dim(), (rows, cols), "scale {}", i + 1);
    }
}

#[test]
fn ceiling_chain_handles_sizes_not_divisible_by_four() {
    let mut config = small_config();
    config.receptive_field = 100;
    assert_eq!(config.rows_at(0), 100);
    assert_eq!(config.rows_at(1), 25);
    assert_eq!(config.rows_at(2), 7);
    assert_eq!(config.rows_at(3), 2);
    assert_eq!(config.rows_at(4), 1);

    let params = NetworkParams::init(&config, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let input = random_input(&mut rng, 100, 2);
    let plan = SamplingPlan::generate(&config, 10);
    let mut tape = crate::tensor::Tape::new();
    let binding = params.bind(&mut tape);
    let out = forward(&mut tape, &binding, &config, &input, &plan, true);
    for level in 0..LEVELS {
        assert_eq!(
            tape.value(out.state.features[level]).dim(),
            (config.rows_at(level), config.width(level))
        );
    }
    assert_eq!(tape.value(out.decoder[LEVELS - 1]).nrows(), 100);
}

#[test]
fn sampling_plan_is_deterministic_per_seed() {
    let config = small_config();
    let a = SamplingPlan::generate(&config, 11);
    let b = SamplingPlan::generate(&config, 11);
    let c = SamplingPlan::generate(&config, 12);
    assert_eq!(a, b);
    assert_ne!(a, c);
    for (stage, kept) in a.kept.iter().enumerate() {
        assert_eq!(kept.len(), config.rows_at(stage + 1));
        assert!(kept.windows(2).all(|w| w[0] < w[1]), "sorted unique");
    }
}

#[test]
fn upsample_then_gather_is_identity_on_kept_rows() {
    let config = small_config();
    let params = NetworkParams::init(&config, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let input = random_input(&mut rng, 32, 2);
    let plan = SamplingPlan::generate(&config, 15);
    let mut tape = crate::tensor::Tape::new();
    let binding = params.bind(&mut tape);
    let out = forward(&mut tape, &binding, &config, &input, &plan, true);

    for stage in 0..LEVELS - 1 {
        let coarse = out.state.features[stage + 1];
        let up = tape.nearest_upsample(coarse, &out.state.parents[stage]);
        let back = tape.gather_rows(up, &out.state.kept[stage]);
        assert_eq!(tape.value(back), tape.value(coarse), "stage {stage}");
    }
}

#[test]
fn msff_output_has_the_level_shape_and_gates_stay_in_unit_interval() {
    let mut config = NetworkConfig::new(256, 3, 4);
    config.base_channels = 2;
    let params = NetworkParams::init(&config, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let input = random_input(&mut rng, 256, 3);
    let plan = SamplingPlan::generate(&config, 18);
    let mut tape = crate::tensor::Tape::new();
    let binding = params.bind(&mut tape);
    let out = forward(&mut tape, &binding, &config, &input, &plan, true);

    // Level 1 with C0 = 2: n = 64 rows, c = 8 channels.
    let trace = out.msff.iter().find(|t| t.level == 1).unwrap();
    assert_eq!(tape.value(trace.f_o).dim(), (64, 8));
    for t in &out.msff {
        for &g in tape.value(t.e_s).iter().chain(tape.value(t.e_d).iter()) {
            assert!(g > 0.0 && g < 1.0, "gate {g} outside (0,1)");
        }
    }
}

#[test]
fn unit_gate_passes_shallow_branch_through_unchanged() {
    let config = small_config();
    let params = NetworkParams::init(&config, 19);
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let input = random_input(&mut rng, 32, 2);
    let plan = SamplingPlan::generate(&config, 21);
    let mut tape = crate::tensor::Tape::new();
    let binding = params.bind(&mut tape);
    let out = forward(&mut tape, &binding, &config, &input, &plan, true);

    let trace = &out.msff[0];
    let width = tape.value(trace.f_s_prime).ncols();
    let ones = tape.constant(Mat::from_elem((1, width), 1.0));
    let passed = tape.mul_broadcast(trace.f_s_prime, ones);
    assert_eq!(tape.value(passed), tape.value(trace.f_s_prime));

    // And the learned gate reproduces elementwise multiplication.
    let fs = tape.value(trace.f_s_prime).clone();
    let gate = tape.value(trace.e_s).clone();
    let tilde = tape.value(trace.f_tilde_s);
    for ((j, c), &v) in tilde.indexed_iter() {
        assert_relative_eq!(v, fs[(j, c)] * gate[(0, c)], max_relative = 1e-15);
    }
}

#[test]
fn zero_branches_halve_the_gate_and_zero_the_fused_shallow_feature() {
    let mut config = small_config();
    config.receptive_field = 32;
    let mut params = NetworkParams::init(&config, 22);
    // Zero the whole feature path so F_L and F'_S are zero matrices.
    for name in ["local.w0", "local.b0", "local.w1", "local.b1"] {
        params.update(name, |m| m.fill(0.0));
    }
    for stage in 0..LEVELS - 1 {
        params.update(&format!("enc{stage}.w"), |m| m.fill(0.0));
        params.update(&format!("enc{stage}.b"), |m| m.fill(0.0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let input = random_input(&mut rng, 32, 2);
    let plan = SamplingPlan::generate(&config, 24);
    let mut tape = crate::tensor::Tape::new();
    let binding = params.bind(&mut tape);
    let out = forward(&mut tape, &binding, &config, &input, &plan, true);

    for trace in &out.msff {
        for &g in tape.value(trace.e_s).iter() {
            assert_relative_eq!(g, 0.5);
        }
        assert!(tape.value(trace.f_tilde_s).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn zeroed_decoder_weights_give_zero_output() {
    let config = small_config();
    let mut params = NetworkParams::init(&config, 25);
    for scale in 1..=LEVELS {
        params.update(&format!("dec{scale}.w"), |m| m.fill(0.0));
        params.update(&format!("dec{scale}.b"), |m| m.fill(0.0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let input = random_input(&mut rng, 32, 2);
    let plan = SamplingPlan::generate(&config, 27);
    let mut tape = crate::tensor::Tape::new();
    let binding = params.bind(&mut tape);
    let out = forward(&mut tape, &binding, &config, &input, &plan, true);
    assert!(tape.value(out.decoder[LEVELS - 1]).iter().all(|&v| v == 0.0));
}

#[test]
fn forward_is_equivariant_under_input_permutation() {
    let config = small_config();
    let params = NetworkParams::init(&config, 28);
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let input = random_input(&mut rng, 32, 2);
    let plan = SamplingPlan::generate(&config, 30);

    let mut sigma: Vec<usize> = (0..32).collect();
    sigma.shuffle(&mut rng);
    // Row j of the permuted input is row sigma[j] of the original.
    let permuted = SampleInput {
        positions: sigma.iter().map(|&s| input.positions[s]).collect(),
        spectra: Mat::from_shape_fn((32, 2), |(j, b)| input.spectra[(sigma[j], b)]),
        labels: sigma.iter().map(|&s| input.labels[s]).collect(),
    };
    // Remap stage-0 keeps onto permuted row numbers, preserving order, so
    // both runs keep the same physical points.
    let mut inverse = vec![0usize; 32];
    for (j, &s) in sigma.iter().enumerate() {
        inverse[s] = j;
    }
    let mut permuted_plan = plan.clone();
    permuted_plan.kept[0] = plan.kept[0].iter().map(|&i| inverse[i]).collect();

    let mut tape_a = crate::tensor::Tape::new();
    let binding_a = params.bind(&mut tape_a);
    let out_a = forward(&mut tape_a, &binding_a, &config, &input, &plan, true);
    let mut tape_b = crate::tensor::Tape::new();
    let binding_b = params.bind(&mut tape_b);
    let out_b = forward(&mut tape_b, &binding_b, &config, &permuted, &permuted_plan, true);

    let fine_a = tape_a.value(out_a.decoder[LEVELS - 1]);
    let fine_b = tape_b.value(out_b.decoder[LEVELS - 1]);
    for j in 0..32 {
        for c in 0..fine_a.ncols() {
            assert_eq!(fine_b[(j, c)], fine_a[(sigma[j], c)], "row {j} col {c}");
        }
    }
}

#[test]
fn params_init_is_deterministic_and_save_load_round_trips() {
    let config = small_config();
    let a = NetworkParams::init(&config, 31);
    let b = NetworkParams::init(&config, 31);
    let c = NetworkParams::init(&config, 32);
    assert_eq!(a.parameter_count(), b.parameter_count());
    for name in a.names() {
        assert_eq!(a.get(name), b.get(name));
    }
    assert!(a.names().any(|n| a.get(n) != c.get(n)));

    let dir = tempdir().unwrap();
    let path = dir.path().join("params.bin");
    a.save(&path).unwrap();
    let loaded = NetworkParams::load(&path).unwrap();
    assert_eq!(loaded.entry_count(), a.entry_count());
    for name in a.names() {
        assert_eq!(a.get(name), loaded.get(name), "{name}");
    }
}

#[test]
fn corrupted_params_file_is_rejected() {
    let config = small_config();
    let params = NetworkParams::init(&config, 33);
    let dir = tempdir().unwrap();
    let path = dir.path().join("params.bin");
    params.save(&path).unwrap();

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(NetworkParams::load(&path).is_err());

    params.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(NetworkParams::load(&path).is_err());
}

#[test]
fn weight_naming_convention_separates_decay_targets() {
    assert!(is_weight("enc0.w"));
    assert!(is_weight("local.w1"));
    assert!(is_weight("msff2.proj_s_w"));
    assert!(is_weight("msff2.mix_w"));
    assert!(is_weight("tail1.cls_w"));
    assert!(!is_weight("enc0.b"));
    assert!(!is_weight("local.b0"));
    assert!(!is_weight("head1.omega"));
    assert!(!is_weight("tail1.omega"));
    assert!(!is_weight("msff2.mix_b"));
}

#[test]
fn toggles_control_registered_parameters() {
    let config = small_config();
    let baseline = NetworkParams::init_for(&config, &ModuleToggles::none(), 1);
    assert!(baseline.names().all(|n| !n.starts_with("msff")));
    assert!(baseline.names().all(|n| !n.starts_with("tail")));
    let heads: Vec<&str> = baseline.names().filter(|n| n.starts_with("head")).collect();
    assert!(!heads.is_empty());
    assert!(heads.iter().all(|n| n.starts_with("head5.")));

    let full = NetworkParams::init(&config, 1);
    assert!(full.names().any(|n| n.starts_with("msff1.")));
    assert!(full.names().any(|n| n == "head1.omega"));
    assert!(full.names().all(|n| !n.starts_with("head5.")));
    assert!(full.names().any(|n| n == "tail2.cls_w"));
}

#[test]
fn msff_toggle_changes_decoder_path_only() {
    let mut config = small_config();
    config.receptive_field = 32;
    let params = NetworkParams::init(&config, 8);
    let input = random_input(&mut ChaCha8Rng::seed_from_u64(4), 32, config.bands);
    let plan = SamplingPlan::generate(&config, 9);

    let mut tape = crate::tensor::Tape::new();
    let binding = params.bind(&mut tape);
    let with = forward(&mut tape, &binding, &config, &input, &plan, true);
    assert_eq!(with.msff.len(), 3);

    let baseline_params = NetworkParams::init_for(&config, &ModuleToggles::none(), 8);
    let mut tape = crate::tensor::Tape::new();
    let binding = baseline_params.bind(&mut tape);
    let without = forward(&mut tape, &binding, &config, &input, &plan, false);
    assert!(without.msff.is_empty());
    assert_eq!(tape.value(without.decoder[4]).dim(), (32, config.base_channels));
}

#[test]
fn gate_parameters_start_at_one_and_biases_at_zero() {
    let config = small_config();
    let params = NetworkParams::init(&config, 34);
    assert!(params.get("head1.omega").iter().all(|&v| v == 1.0));
    assert!(params.get("tail1.omega").iter().all(|&v| v == 1.0));
    assert!(params.get("tail2.omega").iter().all(|&v| v == 1.0));
    assert!(params.get("dec3.b").iter().all(|&v| v == 0.0));
    assert_eq!(params.get("tail1.cls_w").dim(), (2, 3));
    assert_eq!(params.get("tail2.cls_w").dim(), (2, 3));
}
