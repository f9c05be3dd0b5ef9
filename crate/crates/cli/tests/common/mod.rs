//! Shared fixtures for the CLI and acceptance suites: a deterministic
//! synthetic 10-class image set written through the real IDX format, plus a
//! helper for invoking the built binary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Class-distinct sinusoidal gratings at 28x28: each class has its own
/// spatial frequency pair, with per-sample phase jitter and pixel noise.
/// Linearly inseparable in pixel space but comfortably learnable by the
/// convolution/involution trunks at desk scale.
const CLASS_FREQS: [(f64, f64); 10] = [
    (1.0, 0.0),
    (0.0, 1.0),
    (2.0, 0.0),
    (0.0, 2.0),
    (1.0, 1.0),
    (2.0, 1.0),
    (1.0, 2.0),
    (2.0, 2.0),
    (3.0, 0.0),
    (0.0, 3.0),
];

pub fn synthetic_images(n: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n * 28 * 28);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 10;
        labels.push(class as u8);
        let (fx, fy) = CLASS_FREQS[class];
        let phase = rng.gen_range(0.0..std::f64::consts::FRAC_PI_4);
        for y in 0..28 {
            for x in 0..28 {
                let arg =
                    2.0 * std::f64::consts::PI * (fx * x as f64 + fy * y as f64) / 28.0 + phase;
                let v = 127.5 + 100.0 * arg.sin() + rng.gen_range(-20.0..20.0);
                images.push(v.clamp(0.0, 255.0) as u8);
            }
        }
    }
    (images, labels)
}

pub fn idx_image_bytes(n: usize, h: usize, w: usize, pixels: &[u8]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(16 + pixels.len());
    bytes.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(n as u32).to_be_bytes());
    bytes.extend_from_slice(&(h as u32).to_be_bytes());
    bytes.extend_from_slice(&(w as u32).to_be_bytes());
    bytes.extend_from_slice(pixels);
    bytes
}

pub fn idx_label_bytes(labels: &[u8]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend_from_slice(labels);
    bytes
}

/// Write a synthetic train/test pair under MNIST's distribution file names.
pub fn write_synthetic_mnist(dir: &Path, n_train: usize, n_test: usize, seed: u64) {
    fs::create_dir_all(dir).unwrap();
    let (imgs, labels) = synthetic_images(n_train, seed);
    fs::write(
        dir.join("train-images-idx3-ubyte"),
        idx_image_bytes(n_train, 28, 28, &imgs),
    )
    .unwrap();
    fs::write(dir.join("train-labels-idx1-ubyte"), idx_label_bytes(&labels)).unwrap();
    let (imgs, labels) = synthetic_images(n_test, seed.wrapping_add(1));
    fs::write(
        dir.join("t10k-images-idx3-ubyte"),
        idx_image_bytes(n_test, 28, 28, &imgs),
    )
    .unwrap();
    fs::write(dir.join("t10k-labels-idx1-ubyte"), idx_label_bytes(&labels)).unwrap();
}

pub fn ivmetric(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ivmetric"))
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}
