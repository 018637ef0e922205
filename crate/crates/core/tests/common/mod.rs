//! Shared fixtures: the MNIST 3-vs-7 data, a trained fixture model cached on disk
//! between test binaries, and small synthetic IDX datasets for pipeline tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use advint::data::{filter_classes, load_idx, synth_generate, Dataset};
use advint::train::{train_sgd, TrainConfig};
use advint::weights::{load_weights, save_weights};
use advint::{NetworkSpec, SplitModel};

pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

fn mnist37(kind: &str) -> Dataset {
    let dir = data_dir();
    let ds = load_idx(
        dir.join(format!("{kind}-images-idx3-ubyte.gz")),
        dir.join(format!("{kind}-labels-idx1-ubyte.gz")),
    )
    .expect("MNIST files are present under data/mnist");
    filter_classes(&ds, &[3, 7]).unwrap()
}

pub fn mnist37_train() -> Dataset {
    mnist37("train")
}

pub fn mnist37_test() -> Dataset {
    mnist37("t10k")
}

pub fn fixture_path() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("fixture-mnist37-seed0-{}.netw", env!("CARGO_PKG_VERSION")))
}

/// Trains the fixture network (default training settings, seed 0) and stores it
/// where [`fixture_model`] finds it.
pub fn train_fixture() -> SplitModel {
    let model = train_sgd(NetworkSpec::mnist37(), &mnist37_train(), &TrainConfig::default()).unwrap();
    save_weights(&model, fixture_path()).unwrap();
    model
}

/// The trained fixture, loaded from disk when an earlier test binary already trained it.
pub fn fixture_model() -> &'static SplitModel {
    static MODEL: OnceLock<SplitModel> = OnceLock::new();
    MODEL.get_or_init(|| load_weights(fixture_path()).unwrap_or_else(|_| train_fixture()))
}

fn be(v: u32) -> [u8; 4] {
    v.to_be_bytes()
}

pub fn write_idx_images(path: &Path, images: &[u8], count: usize, rows: usize, cols: usize) {
    let mut bytes = Vec::with_capacity(16 + images.len());
    for v in [0x0803, count as u32, rows as u32, cols as u32] {
        bytes.extend(be(v));
    }
    bytes.extend_from_slice(images);
    std::fs::write(path, bytes).unwrap();
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) {
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend(be(0x0801));
    bytes.extend(be(labels.len() as u32));
    bytes.extend_from_slice(labels);
    std::fs::write(path, bytes).unwrap();
}

/// 28×28 "3" and "7" stand-ins: noisy blobs around two stroke templates, quantized
/// to bytes and labelled with the original digits.
fn synthetic_digits(seed: u64, per_class: usize) -> (Vec<u8>, Vec<u8>) {
    let seven: Vec<f32> = (0..784)
        .map(|i| {
            let (r, c) = (i / 28, i % 28);
            let top = (5..9).contains(&r) && (6..22).contains(&c);
            let diag = r >= 9 && r < 24 && (c as isize - (21 - (r as isize - 9) / 2)).abs() <= 1;
            if top || diag { 0.9 } else { 0.05 }
        })
        .collect();
    let three: Vec<f32> = (0..784)
        .map(|i| {
            let (r, c) = (i / 28, i % 28);
            let bars = [5usize, 13, 21].iter().any(|&b| (b..b + 3).contains(&r)) && (8..20).contains(&c);
            let side = (17..20).contains(&c) && (5..24).contains(&r);
            if bars || side { 0.9 } else { 0.05 }
        })
        .collect();
    let ds = synth_generate(seed, per_class, &[1, 28, 28], &[three, seven], 0.3).unwrap();
    let pixels = ds.images.data().iter().map(|&v| (v * 255.0).round() as u8).collect();
    let labels = ds.labels.iter().map(|&l| if l == 0 { 3 } else { 7 }).collect();
    (pixels, labels)
}

/// Writes a small synthetic train/test IDX pair into `dir` and returns the file paths
/// as `(train_images, train_labels, test_images, test_labels)`.
pub fn write_synthetic_mnist(dir: &Path, train_per_class: usize, test_per_class: usize) -> [PathBuf; 4] {
    let paths = [
        dir.join("train-images.idx"),
        dir.join("train-labels.idx"),
        dir.join("test-images.idx"),
        dir.join("test-labels.idx"),
    ];
    let (px, lb) = synthetic_digits(1, train_per_class);
    write_idx_images(&paths[0], &px, lb.len(), 28, 28);
    write_idx_labels(&paths[1], &lb);
    let (px, lb) = synthetic_digits(2, test_per_class);
    write_idx_images(&paths[2], &px, lb.len(), 28, 28);
    write_idx_labels(&paths[3], &lb);
    paths
}

/// A small run configuration over the synthetic data in `dir`, writing to `dir/run`.
pub fn synthetic_config_toml(dir: &Path) -> String {
    let p = write_synthetic_mnist(dir, 150, 40);
    let s = |p: &Path| p.display().to_string();
    format!(
        r#"
seed = 5
out_dir = "run"

[data]
train_images = "{}"
train_labels = "{}"
test_images = "{}"
test_labels = "{}"
max_attack_samples = 30

[train]
epochs = 1

[[attacks]]
kind = "pgd_linf"
epsilon = 0.3
steps = 10
step_size = 0.075
restarts = 1
random_start = true

[[attacks]]
kind = "l2_penalty"
steps = 30
step_size = 0.02
penalty = 10.0

[intervention]
gammas = [1, 2, 3, 15, 16]
sample_cap = 40

[analysis]
cross_attack_gammas = [1, 3]
"#,
        s(&p[0]),
        s(&p[1]),
        s(&p[2]),
        s(&p[3])
    )
}
