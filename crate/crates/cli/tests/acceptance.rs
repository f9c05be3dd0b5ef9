//! Acceptance suite: one test per release criterion, each printing a
//! PASS line (visible with `cargo test --test acceptance -- --nocapture`).
//!
//! Criterion 6 trains at desk scale (2,000 train / 1,000 test images,
//! 5 epochs, single thread) and is shared with criterion 7; the suite uses
//! real MNIST when `IVMETRIC_MNIST_DIR` (or `data/mnist` in the repository
//! root) provides it and otherwise falls back to the built-in synthetic
//! 10-class image set, reporting which one it used. The extended full-scale
//! runs are `#[ignore]`d and only run when pointed at real data.

mod common;

use common::{ivmetric, stderr_of, stdout_of, write_synthetic_mnist};
use ivmetric_core::data::{load_dataset, BatchPlan, DatasetKind, ImageDataset, Split};
use ivmetric_core::error::Error;
use ivmetric_core::layers::{ConvParams, InvolutionConfig};
use ivmetric_core::losses::{cross_entropy, ms_loss, MsLossConfig};
use ivmetric_core::models::{
    evaluate_loss, load_weights, save_weights, train, LossKind, ModelState, PresetName,
    TrainOptions,
};
use ivmetric_core::optim::AdamConfig;
use ivmetric_core::search::{build_index, recall_at_k};
use ivmetric_core::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};
use tempfile::tempdir;

// ---------------------------------------------------------------------------
// criterion 1: exact parameter-count reproduction through the params command
// ---------------------------------------------------------------------------

fn parse_params_table(text: &str, input: &str) -> Vec<(String, usize)> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("preset"))
        .filter_map(|l| {
            let cells: Vec<&str> = l.split_whitespace().collect();
            match cells.as_slice() {
                [preset, shape, params, _size] if *shape == input => {
                    Some((preset.to_string(), params.parse().ok()?))
                }
                _ => None,
            }
        })
        .collect()
}

#[test]
fn criterion_1_parameter_counts() {
    let expected_gray: &[(&str, usize)] = &[
        ("cnn3a", 116_320),
        ("cnn3b", 157_824),
        ("inn2", 560),
        ("inn3", 584),
        ("inn4", 608),
        ("hybrid1", 116_344),
        ("hybrid2", 116_368),
        ("hybrid3", 116_392),
    ];
    // The inn4 RGB entry is our reconstruction (1,128); the reference
    // tables list 1,158 there, a documented deviation. Every other entry
    // matches the reference exactly.
    let expected_rgb: &[(&str, usize)] = &[
        ("cnn3a", 116_608),
        ("cnn3b", 158_112),
        ("inn2", 1_076),
        ("inn3", 1_102),
        ("inn4", 1_128),
        ("hybrid1", 116_634),
        ("hybrid2", 116_660),
        ("hybrid3", 116_686),
    ];
    for (input, expected) in [("28x28x1", expected_gray), ("32x32x3", expected_rgb)] {
        let out = ivmetric(&["params", "--all", "--input", input]);
        assert!(out.status.success(), "{}", stderr_of(&out));
        let table = parse_params_table(&stdout_of(&out), input);
        for (preset, count) in expected {
            let got = table
                .iter()
                .find(|(p, _)| p == preset)
                .unwrap_or_else(|| panic!("{} missing from params output", preset));
            assert_eq!(got.1, *count, "{} @ {}", preset, input);
        }
    }
    println!("criterion 1 (parameter-count reproduction, 13 of 14 reference entries): PASS");
}

// ---------------------------------------------------------------------------
// criterion 2: serialized model size
// ---------------------------------------------------------------------------

/// Independent walk over the weight-file layout, returning the tensor
/// payload size in bytes.
fn payload_bytes_of(path: &Path) -> usize {
    let bytes = std::fs::read(path).unwrap();
    let u32_at = |off: usize| -> usize {
        u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize
    };
    assert_eq!(&bytes[..8], b"IVMETRC1");
    let name_len = u32_at(8);
    let mut pos = 12 + name_len + 16 + 8; // name, H/W/C/embedding, seed
    let mut payload = 0;
    while pos < bytes.len() {
        let rank = u32_at(pos);
        pos += 4;
        let mut numel = 1;
        for _ in 0..rank {
            numel *= u32_at(pos);
            pos += 4;
        }
        payload += numel * 4;
        pos += numel * 4;
    }
    assert_eq!(pos, bytes.len(), "no trailing bytes");
    payload
}

#[test]
fn criterion_2_model_size() {
    let started = Instant::now();
    let dir = tempdir().unwrap();
    let path = dir.path().join("hybrid1.ivw");
    let model = ModelState::<f32>::build_preset(PresetName::Hybrid1, (28, 28, 1), 0).unwrap();
    save_weights(&model, &path).unwrap();

    let payload = payload_bytes_of(&path);
    assert_eq!(payload, 465_376);
    let kb = payload as f64 / 1024.0;
    assert_eq!(format!("{:.2}", kb), "454.47");
    let file_len = std::fs::metadata(&path).unwrap().len();
    assert!(file_len < 1_048_576, "file is {} bytes", file_len);
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(1), "took {:?}", elapsed);
    println!(
        "criterion 2 (hybrid1 payload 465,376 bytes = 454.47 KB, file < 1 MB, {:?}): PASS",
        elapsed
    );
}

// ---------------------------------------------------------------------------
// criterion 3: gradient verification
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_gradient_verification() {
    let started = Instant::now();
    let out = ivmetric(&["gradcheck", "--seed", "0", "--seeds", "20"]);
    let elapsed = started.elapsed();
    assert!(out.status.success(), "{}", stdout_of(&out));
    let text = stdout_of(&out);
    assert!(!text.contains("FAIL"), "{}", text);
    for required in [
        "gelu",
        "involution-bilinear",
        "involution-kernel-chain",
        "conv2d",
        "global-avg-pool",
        "dense",
        "batch-norm-train",
        "cross-entropy",
        "ms-loss",
        "trunk-cross-entropy",
        "trunk-ms",
    ] {
        assert!(text.contains(required), "missing {}:\n{}", required, text);
    }
    assert!(elapsed < Duration::from_secs(120), "took {:?}", elapsed);
    println!(
        "criterion 3 (gradcheck, 20 seeds, layer 1e-4 / end-to-end 1e-3, {:?}): PASS",
        elapsed
    );
}

// ---------------------------------------------------------------------------
// criterion 4: oracle equivalence on random shapes
// ---------------------------------------------------------------------------

fn involution_oracle(x: &Tensor<f64>, kernels: &Tensor<f64>, cfg: &InvolutionConfig) -> Tensor<f64> {
    let (b, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let k = cfg.kernel_size;
    let r = (k / 2) as isize;
    let mut out = Tensor::zeros(&[b, h, w, c]);
    for s in 0..b {
        for i in 0..h as isize {
            for j in 0..w as isize {
                for ch in 0..c {
                    let grp = ch * cfg.groups / cfg.channels;
                    let mut acc = 0.0;
                    for u in -r..=r {
                        for v in -r..=r {
                            let (si, sj) = (i + u, j + v);
                            if si < 0 || si >= h as isize || sj < 0 || sj >= w as isize {
                                continue;
                            }
                            acc += kernels.at(&[
                                s,
                                i as usize,
                                j as usize,
                                (u + r) as usize,
                                (v + r) as usize,
                                grp,
                            ]) * x.at(&[s, si as usize, sj as usize, ch]);
                        }
                    }
                    out.set(&[s, i as usize, j as usize, ch], acc);
                }
            }
        }
    }
    out
}

fn conv_oracle(x: &Tensor<f64>, p: &ConvParams<f64>) -> Tensor<f64> {
    let (b, h, w, c_in) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let k = p.kernel_size();
    let c_out = p.out_channels();
    let r = (k / 2) as isize;
    let mut out = Tensor::zeros(&[b, h, w, c_out]);
    for s in 0..b {
        for i in 0..h as isize {
            for j in 0..w as isize {
                for o in 0..c_out {
                    let mut acc = p.bias.at(&[o]);
                    for u in -r..=r {
                        for v in -r..=r {
                            let (si, sj) = (i + u, j + v);
                            if si < 0 || si >= h as isize || sj < 0 || sj >= w as isize {
                                continue;
                            }
                            for ch in 0..c_in {
                                acc += p.weights.at(&[(u + r) as usize, (v + r) as usize, ch, o])
                                    * x.at(&[s, si as usize, sj as usize, ch]);
                            }
                        }
                    }
                    out.set(&[s, i as usize, j as usize, o], acc);
                }
            }
        }
    }
    out
}

#[test]
fn criterion_4_oracle_equivalence() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut shapes_checked = 0;
    while shapes_checked < 50 {
        let (b, h, w) = (
            rng.gen_range(1..3usize),
            rng.gen_range(2..8usize),
            rng.gen_range(2..8usize),
        );
        let c = rng.gen_range(1..5usize);
        let k = *[1usize, 3, 5].choose(&mut rng).unwrap();
        let groups = if rng.gen_bool(0.5) { 1 } else { c };

        let cfg = InvolutionConfig {
            kernel_size: k,
            groups,
            channels: c,
            bottleneck_channels: 1,
        };
        let x = Tensor::<f64>::from_fn(&[b, h, w, c], |_| rng.gen_range(-1.0..1.0));
        let kernels =
            Tensor::<f64>::from_fn(&[b, h, w, k, k, groups], |_| rng.gen_range(-1.0..1.0));
        let fast = ivmetric_core::layers::involution_forward(&x, &kernels, &cfg).unwrap();
        let slow = involution_oracle(&x, &kernels, &cfg);
        for (a, o) in fast.data().iter().zip(slow.data()) {
            assert!((a - o).abs() <= 1e-6, "involution {} vs {}", a, o);
        }

        let c_out = rng.gen_range(1..5usize);
        let conv = ConvParams::<f64> {
            weights: Tensor::from_fn(&[3, 3, c, c_out], |_| rng.gen_range(-1.0..1.0)),
            bias: Tensor::from_fn(&[c_out], |_| rng.gen_range(-1.0..1.0)),
        };
        let (fast, _) = conv.forward(&x).unwrap();
        let slow = conv_oracle(&x, &conv);
        for (a, o) in fast.data().iter().zip(slow.data()) {
            assert!((a - o).abs() <= 1e-6, "conv {} vs {}", a, o);
        }
        shapes_checked += 1;
    }
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(60), "took {:?}", elapsed);
    println!(
        "criterion 4 (involution+conv vs naive oracles, {} shapes, 1e-6, {:?}): PASS",
        shapes_checked, elapsed
    );
}

// ---------------------------------------------------------------------------
// criterion 5: analytic anchors
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_analytic_anchors() {
    let (uniform_ce, _) = cross_entropy(&Tensor::<f64>::zeros(&[3, 10]), &[1, 0, 9]).unwrap();
    assert!((uniform_ce - 10f64.ln()).abs() < 1e-6);

    let zero = ivmetric_core::layers::gelu_forward(&Tensor::from_vec(&[1], vec![0.0f64]).unwrap());
    assert_eq!(zero.data()[0], 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut emb = Tensor::<f64>::from_fn(&[4, 8], |_| rng.gen_range(-1.0..1.0));
    for r in 0..4 {
        let norm: f64 = emb.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in emb.data_mut()[r * 8..(r + 1) * 8].iter_mut() {
            *v /= norm;
        }
    }
    let (pairless, grad) = ms_loss(&emb, &[0, 1, 2, 3], &MsLossConfig::default()).unwrap();
    assert_eq!(pairless, 0.0);
    assert!(grad.data().iter().all(|&v| v == 0.0));

    let twin =
        Tensor::from_vec(&[2, 4], vec![0.5f64, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5]).unwrap();
    let (twin_loss, _) = ms_loss(&twin, &[2, 2], &MsLossConfig::default()).unwrap();
    assert!((twin_loss - 0.346574).abs() < 1e-6);

    println!("criterion 5 (ln 10 cross-entropy, exact GELU(0), 0 and 0.346574 ms anchors): PASS");
}

// ---------------------------------------------------------------------------
// criteria 6 and 7: desk-scale smoke training and retrieval, shared run
// ---------------------------------------------------------------------------

struct SmokeRun {
    source: String,
    initial_test_ce: f64,
    final_test_ce: f64,
    elapsed: Duration,
    model: ModelState<f32>,
    train_ds: ImageDataset,
    test_ds: ImageDataset,
}

static SMOKE: OnceLock<SmokeRun> = OnceLock::new();

fn seeded_subset(ds: &ImageDataset, limit: usize, seed: u64) -> ImageDataset {
    if ds.len() <= limit {
        return ds.clone();
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut picked = order[..limit].to_vec();
    picked.sort_unstable();
    ds.subset(&picked).unwrap()
}

fn real_mnist_dir() -> Option<PathBuf> {
    if let Ok(dir) = std::env::var("IVMETRIC_MNIST_DIR") {
        return Some(PathBuf::from(dir));
    }
    let repo = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    repo.join("train-images-idx3-ubyte").exists().then_some(repo)
}

fn smoke_run() -> &'static SmokeRun {
    SMOKE.get_or_init(|| {
        let (train_full, test_full, source) = match real_mnist_dir() {
            Some(dir) => (
                load_dataset(DatasetKind::Mnist, &dir, Split::Train).unwrap(),
                load_dataset(DatasetKind::Mnist, &dir, Split::Test).unwrap(),
                format!("real MNIST at {}", dir.display()),
            ),
            None => {
                let dir = tempdir().unwrap();
                write_synthetic_mnist(dir.path(), 2_000, 1_000, 42);
                (
                    load_dataset(DatasetKind::Mnist, dir.path(), Split::Train).unwrap(),
                    load_dataset(DatasetKind::Mnist, dir.path(), Split::Test).unwrap(),
                    "synthetic stand-in (no MNIST files available)".to_string(),
                )
            }
        };
        let train_ds = seeded_subset(&train_full, 2_000, 42);
        let test_ds = seeded_subset(&test_full, 1_000, 43);

        let opts = TrainOptions {
            loss: LossKind::CrossEntropy,
            epochs: 5,
            plan: BatchPlan::shuffled(64, 42).unwrap(),
            adam: AdamConfig::default(),
            ms: MsLossConfig::default(),
            n_classes: 10,
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        pool.install(|| {
            let mut model =
                ModelState::<f32>::build_preset(PresetName::Hybrid1, (28, 28, 1), 42).unwrap();
            model.ensure_head(10).unwrap();
            let initial_test_ce =
                evaluate_loss(&model, &test_ds, LossKind::CrossEntropy, &opts).unwrap();
            let started = Instant::now();
            let history = train(&mut model, &train_ds, Some(&test_ds), &opts).unwrap();
            let elapsed = started.elapsed();
            SmokeRun {
                source,
                initial_test_ce,
                final_test_ce: history.last().unwrap().test_loss.unwrap(),
                elapsed,
                model,
                train_ds,
                test_ds,
            }
        })
    })
}

#[test]
fn criterion_6_smoke_training() {
    let run = smoke_run();
    assert!(
        (run.initial_test_ce - 10f64.ln()).abs() < 0.2,
        "fresh-model test loss should sit near ln 10, got {}",
        run.initial_test_ce
    );
    assert!(
        run.final_test_ce <= 0.5 * run.initial_test_ce,
        "test CE {} did not halve from {}",
        run.final_test_ce,
        run.initial_test_ce
    );
    println!(
        "criterion 6 (hybrid1 desk-scale CE: {:.4} -> {:.4} in 5 epochs, single thread, \
         {:.0?} vs 10 min target, data: {}): PASS",
        run.initial_test_ce, run.final_test_ce, run.elapsed, run.source
    );
}

#[test]
fn criterion_7_retrieval_quality() {
    let run = smoke_run();
    let index = build_index(&run.model, &run.train_ds).unwrap();
    let all: Vec<usize> = (0..run.test_ds.len()).collect();
    let queries = run.model.embed(&run.test_ds.to_batch::<f32>(&all)).unwrap();
    let labels = run.test_ds.batch_labels(&all);

    let mut previous = 0.0;
    let mut recalls = Vec::new();
    for k in [1usize, 5, 10] {
        let recall = recall_at_k(&index, &queries, &labels, k, false).unwrap();
        assert!(recall >= previous, "recall must not decrease with k");
        previous = recall;
        recalls.push((k, recall));
    }
    assert!(
        recalls[0].1 >= 0.7,
        "recall@1 = {} below 0.7",
        recalls[0].1
    );
    println!(
        "criterion 7 (recall@1 {:.3}, @5 {:.3}, @10 {:.3}, non-decreasing): PASS",
        recalls[0].1, recalls[1].1, recalls[2].1
    );
}

// ---------------------------------------------------------------------------
// criterion 8: optional extended runs (not gated)
// ---------------------------------------------------------------------------

/// Full-protocol MNIST run. Not gated: requires real MNIST on disk and tens
/// of CPU-hours; run explicitly with
/// `cargo test --test acceptance -- --ignored criterion_8`.
#[test]
#[ignore = "extended run: needs real MNIST (IVMETRIC_MNIST_DIR) and a long budget"]
fn criterion_8_extended_mnist() {
    let dir = real_mnist_dir().expect("set IVMETRIC_MNIST_DIR to the MNIST directory");
    let train_ds = load_dataset(DatasetKind::Mnist, &dir, Split::Train).unwrap();
    let test_ds = load_dataset(DatasetKind::Mnist, &dir, Split::Test).unwrap();

    let ce_opts = TrainOptions {
        loss: LossKind::CrossEntropy,
        epochs: 20,
        plan: BatchPlan::shuffled(64, 0).unwrap(),
        adam: AdamConfig::default(),
        ms: MsLossConfig::default(),
        n_classes: 10,
    };
    let mut model = ModelState::<f32>::build_preset(PresetName::Hybrid1, (28, 28, 1), 0).unwrap();
    let history = train(&mut model, &train_ds, Some(&test_ds), &ce_opts).unwrap();
    let ce = history.last().unwrap().test_loss.unwrap();

    let ms_opts = TrainOptions {
        loss: LossKind::MultiSimilarity,
        epochs: 20,
        plan: BatchPlan::class_balanced(8, 8, 0).unwrap(),
        ..ce_opts
    };
    let mut model = ModelState::<f32>::build_preset(PresetName::Hybrid1, (28, 28, 1), 0).unwrap();
    let history = train(&mut model, &train_ds, Some(&test_ds), &ms_opts).unwrap();
    let ms = history.last().unwrap().test_loss.unwrap();

    println!(
        "criterion 8a (full MNIST, 20 epochs): ce {:.4} (reference 0.0749 +/- 50%), \
         ms {:.4} (reference 0.0707 +/- 25%)",
        ce, ms
    );
    assert!((0.5 * 0.0749..=1.5 * 0.0749).contains(&ce), "ce = {}", ce);
    assert!((0.75 * 0.0707..=1.25 * 0.0707).contains(&ms), "ms = {}", ms);
}

/// Full-protocol CIFAR-10 ordering check. Not gated.
#[test]
#[ignore = "extended run: needs real CIFAR-10 (IVMETRIC_CIFAR10_DIR) and a long budget"]
fn criterion_8_extended_cifar10() {
    let dir = PathBuf::from(
        std::env::var("IVMETRIC_CIFAR10_DIR").expect("set IVMETRIC_CIFAR10_DIR"),
    );
    let train_ds = load_dataset(DatasetKind::Cifar10, &dir, Split::Train).unwrap();
    let test_ds = load_dataset(DatasetKind::Cifar10, &dir, Split::Test).unwrap();
    let opts = TrainOptions {
        loss: LossKind::MultiSimilarity,
        epochs: 25,
        plan: BatchPlan::class_balanced(8, 8, 0).unwrap(),
        adam: AdamConfig::default(),
        ms: MsLossConfig::default(),
        n_classes: 10,
    };
    let mut losses = Vec::new();
    for preset in [PresetName::Hybrid1, PresetName::Cnn3a] {
        let mut model = ModelState::<f32>::build_preset(preset, (32, 32, 3), 0).unwrap();
        let history = train(&mut model, &train_ds, Some(&test_ds), &opts).unwrap();
        losses.push(history.last().unwrap().test_loss.unwrap());
    }
    println!(
        "criterion 8b (full CIFAR-10, 25 epochs): hybrid1 ms {:.4} vs cnn3a ms {:.4}",
        losses[0], losses[1]
    );
    assert!(losses[0] < losses[1], "reference ordering is hybrid1 < cnn3a");
}

// ---------------------------------------------------------------------------
// criterion 9: format robustness
// ---------------------------------------------------------------------------

#[test]
fn criterion_9_format_robustness() {
    let dir = tempdir().unwrap();
    write_synthetic_mnist(dir.path(), 8, 4, 9);

    // Corrupted IDX magic.
    let img_path = dir.path().join("train-images-idx3-ubyte");
    let mut bytes = std::fs::read(&img_path).unwrap();
    bytes[3] = 0x05;
    let bad_img = dir.path().join("bad-images");
    std::fs::write(&bad_img, &bytes).unwrap();
    let err = ivmetric_core::data::load_idx(&bad_img, &dir.path().join("train-labels-idx1-ubyte"))
        .unwrap_err();
    assert!(matches!(err, Error::Format(_)), "{:?}", err);

    // Truncated CIFAR record.
    let mut record = vec![3u8];
    record.extend(std::iter::repeat_n(7u8, 3071)); // one byte short
    let bad_cifar = dir.path().join("data_batch_1.bin");
    std::fs::write(&bad_cifar, &record).unwrap();
    let err = ivmetric_core::data::load_cifar10(&[&bad_cifar]).unwrap_err();
    assert!(matches!(err, Error::Truncated(_)), "{:?}", err);

    // Truncated weight file loads to an error, never a partial model.
    let weights = dir.path().join("m.ivw");
    let model = ModelState::<f32>::build_preset(PresetName::Inn2, (28, 28, 1), 1).unwrap();
    save_weights(&model, &weights).unwrap();
    let bytes = std::fs::read(&weights).unwrap();
    std::fs::write(&weights, &bytes[..bytes.len() - 10]).unwrap();
    let err = load_weights(&weights).unwrap_err();
    assert!(matches!(err, Error::Truncated(_)), "{:?}", err);

    // Through the CLI, a bad input leaves the output directory untouched.
    let outdir = tempdir().unwrap();
    std::fs::write(&img_path, &bytes[..16]).unwrap(); // truncate the real file
    let out = ivmetric(&[
        "train",
        "--dataset",
        "mnist",
        "--data-dir",
        dir.path().to_str().unwrap(),
        "--epochs",
        "1",
        "--out-dir",
        outdir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(std::fs::read_dir(outdir.path()).unwrap().count(), 0);

    println!(
        "criterion 9 (corrupted magic, truncated CIFAR record, truncated weights -> \
         designated errors, no partial outputs): PASS"
    );
}
