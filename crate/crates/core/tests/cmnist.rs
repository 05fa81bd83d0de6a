use std::collections::BTreeMap;
use std::path::PathBuf;

use irm_core::cmnist::{
    build_colored_mnist, calibration_curve, downsample, grayscale_oracle, max_calibration_gap, parse_idx, read_labels,
    write_calibration_csv, write_idx_images, write_idx_labels, CmnistError, ColorConfig, Idx, IdxError, IdxImages,
    Mnist, TRAIN_LABELS,
};
use irm_core::learners::{EnvData, MlpModel};
use irm_core::numkit::Rng;
use proptest::prelude::*;

fn fake_mnist(n_train: usize, n_test: usize, side: usize, seed: u64) -> Mnist {
    let mut rng = Rng::new(seed);
    let mut images = |n: usize| IdxImages {
        count: n,
        rows: side,
        cols: side,
        pixels: (0..n * side * side).map(|_| (rng.uniform() * 256.0) as u8).collect(),
    };
    let train_images = images(n_train);
    let test_images = images(n_test);
    let mut rng = Rng::new(seed + 1);
    let mut labels = |n: usize| (0..n).map(|_| (rng.uniform() * 10.0) as u8).collect::<Vec<u8>>();
    Mnist { train_images, train_labels: labels(n_train), test_images, test_labels: labels(n_test) }
}

fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("IRM_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    dir.join(TRAIN_LABELS).is_file().then_some(dir)
}

/// Binomial count within 4σ of its mean.
fn within_4_sigma(hits: usize, n: usize, p: f64) -> bool {
    let mean = n as f64 * p;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    (hits as f64 - mean).abs() <= 4.0 * sd
}

#[test]
fn four_byte_file_is_truncated() {
    let err = parse_idx(&[0, 0, 8, 3]).unwrap_err();
    assert!(matches!(err, IdxError::Truncated { offset: 4, .. }), "{err}");
    assert!(matches!(parse_idx(&[0, 0]).unwrap_err(), IdxError::Truncated { offset: 0, .. }));
}

#[test]
fn idx_round_trip() {
    let im = IdxImages { count: 2, rows: 2, cols: 2, pixels: vec![0, 1, 2, 3, 250, 251, 252, 255] };
    let bytes = write_idx_images(&im);
    assert_eq!(bytes.len(), 16 + 8);
    assert_eq!(parse_idx(&bytes).unwrap(), Idx::Images(im));
    let labels = vec![3, 1, 4, 1, 5, 9];
    assert_eq!(parse_idx(&write_idx_labels(&labels)).unwrap(), Idx::Labels(labels));
}

#[test]
fn idx_errors_carry_offsets() {
    let mut bad = write_idx_labels(&[1, 2]);
    bad[3] = 0x02;
    assert!(matches!(parse_idx(&bad).unwrap_err(), IdxError::BadMagic { found: 0x0802, .. }));
    let short = &write_idx_images(&IdxImages { count: 1, rows: 2, cols: 2, pixels: vec![1; 4] })[..18];
    assert!(matches!(parse_idx(short).unwrap_err(), IdxError::Truncated { offset: 16, needed: 4, available: 2 }));
    let label = write_idx_labels(&[0, 12]);
    assert!(matches!(parse_idx(&label).unwrap_err(), IdxError::InvalidLabel { offset: 9, value: 12 }));
}

#[test]
fn missing_files_name_the_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let err = Mnist::load(dir.path(), &BTreeMap::new()).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, CmnistError::MissingFile { .. }));
    assert!(msg.contains("mnist_dir") && msg.contains("IRM_MNIST_DIR"), "{msg}");
}

#[test]
fn checksums_are_verified() {
    let dir = tempfile::tempdir().unwrap();
    let m = fake_mnist(4, 2, 2, 0);
    let files = [
        ("train-images-idx3-ubyte", write_idx_images(&m.train_images)),
        ("train-labels-idx1-ubyte", write_idx_labels(&m.train_labels)),
        ("t10k-images-idx3-ubyte", write_idx_images(&m.test_images)),
        ("t10k-labels-idx1-ubyte", write_idx_labels(&m.test_labels)),
    ];
    for (name, bytes) in &files {
        std::fs::write(dir.path().join(name), bytes).unwrap();
    }
    let loaded = Mnist::load(dir.path(), &BTreeMap::new()).unwrap();
    assert_eq!(loaded.train_labels, m.train_labels);
    let mut sums = BTreeMap::new();
    sums.insert(TRAIN_LABELS.to_string(), irm_core::cmnist::sha256_hex(&files[1].1));
    assert!(Mnist::load(dir.path(), &sums).is_ok());
    sums.insert(TRAIN_LABELS.to_string(), "00".repeat(32));
    assert!(matches!(Mnist::load(dir.path(), &sums), Err(CmnistError::Checksum { .. })));
}

#[test]
fn downsample_averages_blocks() {
    let img = [0u8, 255, 255, 255, 0, 0, 0, 0];
    assert_eq!(downsample(&img, 2, 4), vec![0.25, 0.5]);
}

#[test]
fn coloring_preserves_pixel_mass_and_uses_one_channel() {
    let m = fake_mnist(60, 20, 4, 1);
    let envs = build_colored_mnist(&m, &ColorConfig::default(), 3);
    let gray = grayscale_oracle(&m, &ColorConfig::default(), 3);
    for (c, g) in envs.iter().zip(&gray) {
        assert_eq!(c.channels, 2);
        assert_eq!(c.data.dim(), 2 * g.data.dim());
        assert_eq!(c.data.y, g.data.y);
        let side = g.data.dim();
        for i in 0..c.len() {
            let row = c.data.x.row(i);
            let (red, green) = row.split_at(side);
            let gsum: f64 = g.data.x.row(i).iter().sum();
            assert!((red.iter().sum::<f64>() + green.iter().sum::<f64>() - gsum).abs() < 1e-12);
            assert!(red.iter().zip(green).all(|(r, g)| *r == 0.0 || *g == 0.0));
            let active = if c.color[i] == 1 { red } else { green };
            assert_eq!(active, g.data.x.row(i));
            assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn training_environments_partition_the_subset() {
    let m = fake_mnist(101, 7, 2, 2);
    let envs = build_colored_mnist(&m, &ColorConfig::default(), 0);
    assert_eq!(envs[0].len(), 51);
    assert_eq!(envs[1].len(), 50);
    assert_eq!(envs[2].len(), 7);
    let mut seen: Vec<usize> = envs[0].source.iter().chain(&envs[1].source).copied().collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..101).collect::<Vec<_>>());
    for e in &envs[..2] {
        for (d, &i) in e.digits.iter().zip(&e.source) {
            assert_eq!(*d, m.train_labels[i]);
        }
    }
    assert_eq!(envs[2].source, (0..7).collect::<Vec<_>>());
    assert_eq!(envs[2].digits, m.test_labels);
    // the order depends on the seed, the grayscale variant shares it
    let other = build_colored_mnist(&m, &ColorConfig::default(), 1);
    assert_ne!(other[0].source, envs[0].source);
    assert_eq!(grayscale_oracle(&m, &ColorConfig::default(), 0)[0].source, envs[0].source);
}

#[test]
fn flip_rates_match_the_generative_chain() {
    let m = fake_mnist(100_000, 10_000, 2, 4);
    let envs = build_colored_mnist(&m, &ColorConfig::default(), 11);
    assert_eq!(envs[0].len() + envs[1].len(), 50_000);
    let mut noisy = 0;
    let mut total = 0;
    for (e, p) in envs.iter().zip([0.2, 0.1, 0.9]) {
        let y = e.labels();
        for i in 0..e.len() {
            assert_eq!(e.y_tilde[i], u8::from(e.digits[i] >= 5));
        }
        let label_flips = y.iter().zip(&e.y_tilde).filter(|(a, b)| a != b).count();
        let color_flips = y.iter().zip(&e.color).filter(|(a, b)| a != b).count();
        assert!(within_4_sigma(label_flips, e.len(), 0.25), "{}", e.data.env);
        assert!(within_4_sigma(color_flips, e.len(), p), "{}", e.data.env);
        assert_eq!(e.flip_prob, p);
        if e.data.env != "test" {
            noisy += label_flips;
            total += e.len();
        }
    }
    assert!((noisy as f64 / total as f64 - 0.25).abs() <= 0.01);
    let env1 = &envs[0];
    let rate = env1.labels().iter().zip(&env1.color).filter(|(a, b)| a != b).count() as f64 / env1.len() as f64;
    assert!((rate - 0.2).abs() <= 0.01, "{rate}");

    // predicting y from color alone inverts on the test environment
    let test = &envs[2];
    let color_acc = test.labels().iter().zip(&test.color).filter(|(a, b)| a == b).count() as f64 / test.len() as f64;
    assert!((0.08..0.12).contains(&color_acc), "{color_acc}");
}

#[test]
fn constant_logit_model_fills_one_bin() {
    let m = fake_mnist(40, 10, 2, 5);
    let envs = build_colored_mnist(&m, &ColorConfig::default(), 0);
    let data: Vec<EnvData<f32>> = envs.iter().map(|e| EnvData::from_dataset(&e.data)).collect();
    let mut model = MlpModel::new(&[2, 3, 1], &mut Rng::new(0));
    for p in model.params_mut() {
        *p = 0.0;
    }
    let named: Vec<(String, &EnvData<f32>)> = vec![("a".into(), &data[0]), ("b".into(), &data[1])];
    let rows = calibration_curve(&model, &named, 10);
    assert_eq!(rows.len(), 2);
    for (r, d) in rows.iter().zip(&data) {
        assert_eq!(r.n, d.n);
        assert_eq!(r.p, d.y.iter().sum::<f64>() / d.n as f64);
        assert_eq!(r.h, 0.0);
    }
    let mut csv = Vec::new();
    write_calibration_csv(&rows, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("env,h,p,n,low_support\n"));
    assert_eq!(text.lines().count(), 3);
    assert_eq!(max_calibration_gap(&rows, "a", "b", 1), Some((rows[0].p - rows[1].p).abs()));
    assert_eq!(max_calibration_gap(&rows, "a", "b", 1000), None);
}

#[test]
fn calibration_bins_partition_each_environment() {
    let m = fake_mnist(300, 50, 4, 6);
    let envs = grayscale_oracle(&m, &ColorConfig::default(), 1);
    let data: Vec<EnvData<f32>> = envs.iter().map(|e| EnvData::from_dataset(&e.data)).collect();
    let model = MlpModel::new(&[4, 8, 1], &mut Rng::new(2));
    let named: Vec<(String, &EnvData<f32>)> = ["x", "y", "z"].iter().map(|s| s.to_string()).zip(data.iter()).collect();
    let rows = calibration_curve(&model, &named, 7);
    for (name, d) in &named {
        let mine: Vec<_> = rows.iter().filter(|r| &r.env == name).collect();
        assert!(mine.len() <= 7);
        assert_eq!(mine.iter().map(|r| r.n).sum::<usize>(), d.n);
        assert!(mine.iter().all(|r| r.low_support == (r.n < 10) && (0.0..=1.0).contains(&r.p)));
    }
}

#[test]
fn canonical_train_labels_are_balanced() {
    let Some(dir) = mnist_dir() else {
        eprintln!("MNIST not found; skipping");
        return;
    };
    let labels = read_labels(&dir.join(TRAIN_LABELS)).unwrap();
    assert_eq!(labels.len(), 60_000);
    for d in 0..10u8 {
        assert!(labels.iter().filter(|&&l| l == d).count() >= 5000, "digit {d}");
    }
}

#[test]
fn canonical_training_environments_share_the_image_distribution() {
    let Some(dir) = mnist_dir() else {
        eprintln!("MNIST not found; skipping");
        return;
    };
    let m = Mnist::load(&dir, &BTreeMap::new()).unwrap();
    let envs = build_colored_mnist(&m, &ColorConfig::default(), 0);
    let ink = |e: &irm_core::cmnist::ColoredDataset| e.data.x.as_slice().iter().sum::<f64>() / e.len() as f64;
    let (a, b) = (ink(&envs[0]), ink(&envs[1]));
    // file-order even/odd halves differ by about 14% here
    assert!((a - b).abs() < 0.01 * a.max(b), "mean ink per image {a} vs {b}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn construction_is_deterministic_in_seed(seed in 0u64..1000, data_seed in 0u64..1000) {
        let m = fake_mnist(30, 10, 2, data_seed);
        let a = build_colored_mnist(&m, &ColorConfig::default(), seed);
        let b = build_colored_mnist(&m, &ColorConfig::default(), seed);
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(&x.data.x, &y.data.x);
            prop_assert_eq!(&x.data.y, &y.data.y);
            prop_assert_eq!(&x.color, &y.color);
        }
    }

    #[test]
    fn images_round_trip(count in 0usize..5, rows in 1usize..5, cols in 1usize..5, fill in any::<u8>()) {
        let pixels: Vec<u8> = (0..count * rows * cols).map(|i| fill.wrapping_add(i as u8)).collect();
        let im = IdxImages { count, rows, cols, pixels };
        prop_assert_eq!(parse_idx(&write_idx_images(&im)).unwrap(), Idx::Images(im));
    }
}
