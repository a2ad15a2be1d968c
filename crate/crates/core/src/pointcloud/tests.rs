use proptest::prelude::*;
use tempfile::tempdir;

use super::*;
use crate::error::Error;

fn two_class_spec(label_rate: f64) -> SceneSpec {
    SceneSpec {
        classes: vec![
            ClassSpec {
                name: "ground".into(),
                point_count: 100,
                object_scale: 1.0,
                spectral_signature: vec![0.2, 0.4, 0.6],
            },
            ClassSpec {
                name: "roof".into(),
                point_count: 100,
                object_scale: 0.5,
                spectral_signature: vec![0.8, 0.1, 0.3],
            },
        ],
        label_rate,
        noise_sigma: 0.02,
        extent: 50.0,
        seed: 42,
    }
}

fn long_tailed_spec(seed: u64) -> SceneSpec {
    let counts = [4096usize, 1024, 256, 64, 16];
    SceneSpec {
        classes: counts
            .iter()
            .enumerate()
            .map(|(i, &count)| ClassSpec {
                name: format!("c{i}"),
                point_count: count,
                object_scale: 0.5 + i as f64 * 0.3,
                spectral_signature: vec![0.1 * (i + 1) as f64, 0.9 - 0.1 * i as f64, 0.5],
            })
            .collect(),
        label_rate: 1.0,
        noise_sigma: 0.01,
        extent: 100.0,
        seed,
    }
}

/// Straight-loop label counter, independent of class_histogram.
fn count_labels(cloud: &MultispectralPointCloud) -> (Vec<u64>, u64) {
    let mut per_class = vec![0u64; cloud.classes()];
    let mut unlabeled = 0u64;
    for i in 0..cloud.len() {
        match cloud.label(i) {
            UNLABELED => unlabeled += 1,
            l => per_class[l as usize] += 1,
        }
    }
    (per_class, unlabeled)
}

#[test]
fn full_label_rate_leaves_nothing_unlabeled() {
    let cloud = generate_synthetic_scene(&two_class_spec(1.0)).unwrap();
    assert_eq!(cloud.len(), 200);
    let (_, unlabeled) = count_labels(&cloud);
    assert_eq!(unlabeled, 0);
}

#[test]
fn half_label_rate_unlabels_exactly_half() {
    let cloud = generate_synthetic_scene(&two_class_spec(0.5)).unwrap();
    let (per_class, unlabeled) = count_labels(&cloud);
    assert_eq!(unlabeled, 100);
    // Stratified: each class keeps its own half.
    assert_eq!(per_class, vec![50, 50]);
}

#[test]
fn long_tailed_histogram_matches_spec_counts() {
    let spec = long_tailed_spec(7);
    let cloud = generate_synthetic_scene(&spec).unwrap();
    let hist = cloud.class_histogram();
    let (oracle, unlabeled) = count_labels(&cloud);
    assert_eq!(&hist[..5], &oracle[..]);
    assert_eq!(hist[5], unlabeled);
    for (class, spec_class) in spec.classes.iter().enumerate() {
        assert_eq!(hist[class], spec_class.point_count as u64);
    }
}

#[test]
fn sparse_labeling_keeps_every_class_alive() {
    let mut spec = long_tailed_spec(3);
    spec.label_rate = 0.01;
    let cloud = generate_synthetic_scene(&spec).unwrap();
    let (per_class, _) = count_labels(&cloud);
    let total: u64 = per_class.iter().sum();
    assert_eq!(total, (0.01f64 * 5456.0).ceil() as u64);
    // The 16-point class keeps at least one label despite floor(0.16) = 0.
    assert!(per_class.iter().all(|&c| c >= 1), "counts {per_class:?}");
}

#[test]
fn generator_is_deterministic() {
    let spec = long_tailed_spec(99);
    let a = generate_synthetic_scene(&spec).unwrap();
    let b = generate_synthetic_scene(&spec).unwrap();
    assert_eq!(a, b);
    let mut other = spec.clone();
    other.seed = 100;
    let c = generate_synthetic_scene(&other).unwrap();
    assert_ne!(a.positions(), c.positions());
}

#[test]
fn generator_rejects_invalid_specs() {
    let mut spec = two_class_spec(0.5);
    spec.label_rate = 0.0;
    let err = generate_synthetic_scene(&spec).unwrap_err();
    assert!(err.to_string().contains("label_rate"), "{err}");

    let mut spec = two_class_spec(0.5);
    spec.classes[1].point_count = 0;
    let err = generate_synthetic_scene(&spec).unwrap_err();
    assert!(err.to_string().contains("point_count"), "{err}");

    let mut spec = two_class_spec(0.5);
    spec.classes.truncate(1);
    let err = generate_synthetic_scene(&spec).unwrap_err();
    assert!(err.to_string().contains("classes"), "{err}");
}

#[test]
fn csv_round_trip_is_identity() {
    let cloud = generate_synthetic_scene(&two_class_spec(0.4)).unwrap();
    let dir = tempdir().unwrap();
    let path = dir.path().join("cloud.csv");
    save_cloud(&cloud, &path, CloudFormat::Csv).unwrap();
    let loaded = load_cloud(&path, CloudFormat::Csv).unwrap();
    assert_eq!(loaded.positions(), cloud.positions());
    assert_eq!(loaded.labels(), cloud.labels());
    for i in 0..cloud.len() {
        assert_eq!(loaded.spectra_row(i), cloud.spectra_row(i));
    }
}

#[test]
fn bin_round_trip_is_identity() {
    let cloud = generate_synthetic_scene(&two_class_spec(0.4)).unwrap();
    let dir = tempdir().unwrap();
    let path = dir.path().join("cloud.bin");
    save_cloud(&cloud, &path, CloudFormat::Bin).unwrap();
    let loaded = load_cloud(&path, CloudFormat::Bin).unwrap();
    assert_eq!(loaded.positions(), cloud.positions());
    assert_eq!(loaded.labels(), cloud.labels());
    for i in 0..cloud.len() {
        assert_eq!(loaded.spectra_row(i), cloud.spectra_row(i));
    }
}

#[test]
fn awkward_float_values_survive_the_text_format() {
    let cloud = MultispectralPointCloud::new(
        vec![[0.1, 1e-8, 123456.78], [f32::MIN_POSITIVE, -0.0, 3.0]],
        vec![0.333_333_34, 1.0, 0.0, 0.999_999_94],
        vec![0, UNLABELED],
        vec!["a".into(), "b".into()],
        2,
    )
    .unwrap();
    let dir = tempdir().unwrap();
    let path = dir.path().join("cloud.csv");
    save_cloud(&cloud, &path, CloudFormat::Csv).unwrap();
    let loaded = load_cloud(&path, CloudFormat::Csv).unwrap();
    for i in 0..cloud.len() {
        for a in 0..3 {
            assert_eq!(loaded.position(i)[a].to_bits(), cloud.position(i)[a].to_bits());
        }
    }
}

#[test]
fn minus_one_label_loads_as_unlabeled() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("cloud.csv");
    std::fs::write(&path, "2 1 3\n0,0,0,0.5,-1\n1,1,1,0.25,2\n").unwrap();
    let cloud = load_cloud(&path, CloudFormat::Csv).unwrap();
    assert_eq!(cloud.label(0), UNLABELED);
    assert_eq!(cloud.label(1), 2);
}

#[test]
fn label_equal_to_class_count_is_rejected() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("cloud.csv");
    std::fs::write(&path, "1 1 12\n0,0,0,0.5,12\n").unwrap();
    let err = load_cloud(&path, CloudFormat::Csv).unwrap_err();
    assert!(matches!(err, Error::LabelOutOfRange { label: 12, classes: 12 }));
    assert!(err.to_string().contains("label out of range"));
}

#[test]
fn malformed_header_is_rejected() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("cloud.csv");
    std::fs::write(&path, "2 3\n").unwrap();
    let err = load_cloud(&path, CloudFormat::Csv).unwrap_err();
    assert!(err.to_string().contains("header"), "{err}");
}

#[test]
fn short_row_is_rejected() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("cloud.csv");
    std::fs::write(&path, "1 2 2\n0,0,0,0.5,1\n").unwrap();
    let err = load_cloud(&path, CloudFormat::Csv).unwrap_err();
    assert!(err.to_string().contains("columns"), "{err}");
}

#[test]
fn truncated_binary_body_is_rejected() {
    let cloud = generate_synthetic_scene(&two_class_spec(1.0)).unwrap();
    let dir = tempdir().unwrap();
    let path = dir.path().join("cloud.bin");
    save_cloud(&cloud, &path, CloudFormat::Bin).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
    assert!(load_cloud(&path, CloudFormat::Bin).is_err());
}

proptest! {
    #[test]
    fn histogram_always_sums_to_n(
        counts in prop::collection::vec(1usize..60, 2..5),
        label_rate in 0.05f64..1.0,
        seed in any::<u64>(),
    ) {
        let spec = SceneSpec {
            classes: counts
                .iter()
                .enumerate()
                .map(|(i, &count)| ClassSpec {
                    name: format!("c{i}"),
                    point_count: count,
                    object_scale: 1.0,
                    spectral_signature: vec![0.5, 0.5],
                })
                .collect(),
            label_rate,
            noise_sigma: 0.05,
            extent: 30.0,
            seed,
        };
        let cloud = generate_synthetic_scene(&spec).unwrap();
        let hist = cloud.class_histogram();
        prop_assert_eq!(hist.iter().sum::<u64>(), cloud.len() as u64);
        prop_assert_eq!(hist.len(), cloud.classes() + 1);
        let labeled: u64 = hist[..cloud.classes()].iter().sum();
        prop_assert_eq!(labeled, (label_rate * cloud.len() as f64).ceil() as u64);
    }
}
