//! Finite-difference verification of every analytic gradient in the crate.
//!
//! Each check scalarizes a layer through a fixed random projection
//! `L = sum(w * forward(inputs))`, assembles the analytic gradient from the
//! layer's backward pass, and compares it against central differences of the
//! forward map, in double precision. The checks run here are the same ones
//! the CLI's `gradcheck` subcommand reports on.

use crate::error::Result;
use crate::layers::{
    gap_backward, gap_forward, gelu_backward, gelu_forward, involution_backward,
    involution_forward, l2_normalize_backward, l2_normalize_forward, BatchNorm, ConvParams,
    DenseParams, InvolutionConfig, InvolutionLayer, Mode,
};
use crate::losses::{cross_entropy, ms_loss, MsLossConfig};
use crate::models::{LayerKind, ModelSpec, ModelState};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central-difference step. With O(1) values and double precision this
/// leaves ~1e-10 of truncation plus roundoff noise, far below the
/// tolerances being enforced.
const FD_STEP: f64 = 1e-5;

/// Relative-error floor: components smaller than this are compared
/// absolutely, so finite-difference noise on near-zero gradients does not
/// register as relative error.
const REL_FLOOR: f64 = 1e-2;

pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const GELU_TOLERANCE: f64 = 1e-6;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

/// Outcome of one named check, aggregated over its seeds.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Worst relative error between `analytic` and central differences of `f`
/// over every component of `point`.
pub fn compare_gradient(
    f: &mut dyn FnMut(&[f64]) -> f64,
    point: &[f64],
    analytic: &[f64],
) -> f64 {
    compare_gradient_step(f, point, analytic, FD_STEP)
}

fn compare_gradient_step(
    f: &mut dyn FnMut(&[f64]) -> f64,
    point: &[f64],
    analytic: &[f64],
    step: f64,
) -> f64 {
    assert_eq!(point.len(), analytic.len());
    let mut x = point.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let plus = f(&x);
        x[i] = orig - step;
        let minus = f(&x);
        x[i] = orig;
        let fd = (plus - minus) / (2.0 * step);
        worst = worst.max(rel_err(analytic[i], fd));
    }
    worst
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Concatenate tensors into one flat parameter vector.
fn pack(tensors: &[&Tensor<f64>]) -> Vec<f64> {
    tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
}

/// Scatter a flat vector back into tensors of the given shapes.
fn unpack(flat: &[f64], shapes: &[Vec<usize>]) -> Vec<Tensor<f64>> {
    let mut out = Vec::with_capacity(shapes.len());
    let mut offset = 0;
    for shape in shapes {
        let n: usize = shape.iter().product();
        out.push(Tensor::from_vec(shape, flat[offset..offset + n].to_vec()).unwrap());
        offset += n;
    }
    assert_eq!(offset, flat.len());
    out
}

fn weighted_sum(y: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
    y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

fn check_gelu(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(&[9], &mut rng);
    let w = random_tensor(&[9], &mut rng);
    let analytic = gelu_backward(&x, &w).unwrap();
    compare_gradient(
        &mut |flat| weighted_sum(&gelu_forward(&Tensor::from_vec(&[9], flat.to_vec()).unwrap()), &w),
        x.data(),
        analytic.data(),
    )
}

fn check_dense(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(&[2, 3], &mut rng);
    let params = DenseParams::<f64> {
        weights: random_tensor(&[3, 4], &mut rng),
        bias: random_tensor(&[4], &mut rng),
    };
    let w = random_tensor(&[2, 4], &mut rng);

    let (_, cache) = params.forward(&x).unwrap();
    let (gx, grads) = params.backward(&cache, &w).unwrap();
    let analytic = pack(&[&gx, &grads.weights, &grads.bias]);
    let shapes = vec![vec![2, 3], vec![3, 4], vec![4]];
    let point = pack(&[&x, &params.weights, &params.bias]);
    compare_gradient(
        &mut |flat| {
            let parts = unpack(flat, &shapes);
            let p = DenseParams {
                weights: parts[1].clone(),
                bias: parts[2].clone(),
            };
            weighted_sum(&p.forward(&parts[0]).unwrap().0, &w)
        },
        &point,
        &analytic,
    )
}

fn check_conv(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(&[2, 4, 3, 2], &mut rng);
    let params = ConvParams::<f64> {
        weights: random_tensor(&[3, 3, 2, 3], &mut rng),
        bias: random_tensor(&[3], &mut rng),
    };
    let w = random_tensor(&[2, 4, 3, 3], &mut rng);

    let (_, cache) = params.forward(&x).unwrap();
    let (gx, grads) = params.backward(&cache, &w).unwrap();
    let analytic = pack(&[&gx, &grads.weights, &grads.bias]);
    let shapes = vec![vec![2, 4, 3, 2], vec![3, 3, 2, 3], vec![3]];
    let point = pack(&[&x, &params.weights, &params.bias]);
    compare_gradient(
        &mut |flat| {
            let parts = unpack(flat, &shapes);
            let p = ConvParams {
                weights: parts[1].clone(),
                bias: parts[2].clone(),
            };
            weighted_sum(&p.forward(&parts[0]).unwrap().0, &w)
        },
        &point,
        &analytic,
    )
}

fn check_gap(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(&[2, 3, 4, 2], &mut rng);
    let w = random_tensor(&[2, 2], &mut rng);
    let (_, cache) = gap_forward(&x).unwrap();
    let analytic = gap_backward(&cache, &w).unwrap();
    compare_gradient(
        &mut |flat| {
            let xt = Tensor::from_vec(&[2, 3, 4, 2], flat.to_vec()).unwrap();
            weighted_sum(&gap_forward(&xt).unwrap().0, &w)
        },
        x.data(),
        analytic.data(),
    )
}

fn check_batchnorm(seed: u64, mode: Mode) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c) = (6, 3);
    let x = random_tensor(&[n, c], &mut rng);
    let w = random_tensor(&[n, c], &mut rng);
    let mut bn = BatchNorm::<f64>::new(c);
    bn.gamma = random_tensor(&[c], &mut rng).map(|v| 0.5 + v.abs());
    bn.beta = random_tensor(&[c], &mut rng);
    bn.running_mean = random_tensor(&[c], &mut rng);
    bn.running_var = random_tensor(&[c], &mut rng).map(|v| 0.5 + v.abs());

    let (_, cache) = bn.clone().forward(&x, mode).unwrap();
    let (gx, grads) = bn.backward(&cache, &w).unwrap();
    let analytic = pack(&[&gx, &grads.gamma, &grads.beta]);
    let shapes = vec![vec![n, c], vec![c], vec![c]];
    let point = pack(&[&x, &bn.gamma, &bn.beta]);
    compare_gradient(
        &mut |flat| {
            let parts = unpack(flat, &shapes);
            let mut probe = bn.clone();
            probe.gamma = parts[1].clone();
            probe.beta = parts[2].clone();
            weighted_sum(&probe.forward(&parts[0], mode).unwrap().0, &w)
        },
        &point,
        &analytic,
    )
}

fn check_involution_apply(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = InvolutionConfig {
        kernel_size: 3,
        groups: 2,
        channels: 4,
        bottleneck_channels: 1,
    };
    let x = random_tensor(&[1, 4, 3, 4], &mut rng);
    let kernels = random_tensor(&[1, 4, 3, 3, 3, 2], &mut rng);
    let w = random_tensor(&[1, 4, 3, 4], &mut rng);

    let (gx, gh) = involution_backward(&x, &kernels, &cfg, &w).unwrap();
    let analytic = pack(&[&gx, &gh]);
    let shapes = vec![x.shape().to_vec(), kernels.shape().to_vec()];
    let point = pack(&[&x, &kernels]);
    compare_gradient(
        &mut |flat| {
            let parts = unpack(flat, &shapes);
            weighted_sum(&involution_forward(&parts[0], &parts[1], &cfg).unwrap(), &w)
        },
        &point,
        &analytic,
    )
}

fn check_involution_chain(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = InvolutionConfig::new(2);
    let mut layer = InvolutionLayer::<f64>::glorot(cfg, &mut rng).unwrap();
    layer.params.norm.gamma = random_tensor(&[1], &mut rng).map(|v| 0.5 + v.abs());
    layer.params.norm.beta = random_tensor(&[1], &mut rng);
    let x = random_tensor(&[1, 4, 4, 2], &mut rng);
    let w = random_tensor(&[1, 4, 4, 2], &mut rng);

    let (_, cache) = layer.clone().forward(&x, Mode::Train).unwrap();
    let (gx, grads) = layer.backward(&cache, &w).unwrap();
    let grads = grads.into_vec();
    let mut analytic_parts: Vec<&Tensor<f64>> = vec![&gx];
    analytic_parts.extend(grads.iter());
    let analytic = pack(&analytic_parts);

    let mut point_parts: Vec<&Tensor<f64>> = vec![&x];
    point_parts.extend(layer.params.trainable());
    let point = pack(&point_parts);
    let shapes: Vec<Vec<usize>> = point_parts.iter().map(|t| t.shape().to_vec()).collect();

    compare_gradient(
        &mut |flat| {
            let parts = unpack(flat, &shapes);
            let mut probe = layer.clone();
            for (dst, src) in probe.params.trainable_mut().into_iter().zip(&parts[1..]) {
                *dst = src.clone();
            }
            weighted_sum(&probe.forward(&parts[0], Mode::Train).unwrap().0, &w)
        },
        &point,
        &analytic,
    )
}

fn check_l2_normalize(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(&[3, 5], &mut rng).map(|v| v + 0.2 * v.signum());
    let w = random_tensor(&[3, 5], &mut rng);
    let (_, cache) = l2_normalize_forward(&x).unwrap();
    let analytic = l2_normalize_backward(&cache, &w).unwrap();
    compare_gradient(
        &mut |flat| {
            let xt = Tensor::from_vec(&[3, 5], flat.to_vec()).unwrap();
            weighted_sum(&l2_normalize_forward(&xt).unwrap().0, &w)
        },
        x.data(),
        analytic.data(),
    )
}

fn check_cross_entropy(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = random_tensor(&[4, 6], &mut rng).map(|v| 2.0 * v);
    let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..6)).collect();
    let (_, grad) = cross_entropy(&logits, &labels).unwrap();
    compare_gradient(
        &mut |flat| {
            let l = Tensor::from_vec(&[4, 6], flat.to_vec()).unwrap();
            cross_entropy(&l, &labels).unwrap().0
        },
        logits.data(),
        grad.data(),
    )
}

fn check_ms_loss(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = MsLossConfig::default();
    // Unit-normalized batch; finite differences tilt rows slightly off the
    // sphere, which the dot-product similarity handles smoothly.
    let mut emb = random_tensor(&[8, 4], &mut rng);
    for r in 0..8 {
        let norm: f64 = emb.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in emb.data_mut()[r * 4..(r + 1) * 4].iter_mut() {
            *v /= norm;
        }
    }
    let labels: Vec<usize> = (0..8).map(|i| i % 2).collect();
    let (_, grad) = ms_loss(&emb, &labels, &cfg).unwrap();
    compare_gradient(
        &mut |flat| {
            let e = Tensor::from_vec(&[8, 4], flat.to_vec()).unwrap();
            ms_loss(&e, &labels, &cfg).unwrap().0
        },
        emb.data(),
        grad.data(),
    )
}

/// Small trunk used for the end-to-end checks: one involution feeding a
/// three-convolution stack, pooled into a dense embedding.
fn verification_spec() -> ModelSpec {
    ModelSpec::custom(
        "gradcheck-trunk",
        (5, 5, 2),
        vec![
            LayerKind::Involution {
                kernel_size: 3,
                groups: 1,
                bottleneck_channels: 1,
            },
            LayerKind::Gelu,
            LayerKind::Conv {
                filters: 3,
                kernel_size: 3,
            },
            LayerKind::Gelu,
            LayerKind::Conv {
                filters: 4,
                kernel_size: 3,
            },
            LayerKind::Gelu,
            LayerKind::GlobalAvgPool,
            LayerKind::Dense { units: 6 },
        ],
        6,
    )
}

enum TrunkObjective {
    CrossEntropy,
    MultiSimilarity,
}

/// Gradient of the full training objective w.r.t. every trunk parameter
/// (and head parameters for cross-entropy), on a 2-image batch.
fn check_trunk(seed: u64, objective: TrunkObjective) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ModelState::<f64>::build(verification_spec(), seed).unwrap();
    // Jitter every trainable tensor. Fresh models have all-zero biases,
    // which for unlucky weight draws leaves near-zero embeddings where the
    // normalized objectives are badly conditioned for finite differences.
    for t in model.trainable_params_mut() {
        for v in t.data_mut().iter_mut() {
            *v += rng.gen_range(-0.25..0.25);
        }
    }
    let x = random_tensor(&[2, 5, 5, 2], &mut rng);
    let ms_cfg = MsLossConfig::default();

    let (labels, n_classes): (Vec<usize>, usize) = match objective {
        TrunkObjective::CrossEntropy => (vec![rng.gen_range(0..4), rng.gen_range(0..4)], 4),
        TrunkObjective::MultiSimilarity => (vec![3, 3], 0),
    };
    if matches!(objective, TrunkObjective::CrossEntropy) {
        model.ensure_head(n_classes).unwrap();
    }

    let loss_of = |probe: &mut ModelState<f64>, x: &Tensor<f64>| -> f64 {
        let (emb, _) = probe.forward_embedding(x, Mode::Train).unwrap();
        match objective {
            TrunkObjective::CrossEntropy => {
                let head = probe.head.as_ref().unwrap();
                let (logits, _) = head.forward(&emb).unwrap();
                cross_entropy(&logits, &labels).unwrap().0
            }
            TrunkObjective::MultiSimilarity => {
                let (normalized, _) = l2_normalize_forward(&emb).unwrap();
                ms_loss(&normalized, &labels, &ms_cfg).unwrap().0
            }
        }
    };

    // Analytic gradient through the full chain.
    let analytic = {
        let mut probe = model.clone();
        let (emb, caches) = probe.forward_embedding(&x, Mode::Train).unwrap();
        let (grad_emb, head_grads) = match objective {
            TrunkObjective::CrossEntropy => {
                let head = probe.head.as_ref().unwrap();
                let (logits, head_cache) = head.forward(&emb).unwrap();
                let (_, grad_logits) = cross_entropy(&logits, &labels).unwrap();
                let (grad_emb, hg) = head.backward(&head_cache, &grad_logits).unwrap();
                (grad_emb, Some(hg))
            }
            TrunkObjective::MultiSimilarity => {
                let (normalized, cache) = l2_normalize_forward(&emb).unwrap();
                let (_, grad_norm) = ms_loss(&normalized, &labels, &ms_cfg).unwrap();
                (l2_normalize_backward(&cache, &grad_norm).unwrap(), None)
            }
        };
        let (_, mut grads) = probe.backward(&caches, &grad_emb).unwrap();
        if let Some(hg) = head_grads {
            grads.extend(hg.into_vec());
        }
        let refs: Vec<&Tensor<f64>> = grads.iter().collect();
        pack(&refs)
    };

    let mut param_refs: Vec<&Tensor<f64>> = model.trainable_params();
    if let Some(head) = &model.head {
        param_refs.push(&head.weights);
        param_refs.push(&head.bias);
    }
    let shapes: Vec<Vec<usize>> = param_refs.iter().map(|t| t.shape().to_vec()).collect();
    let point = pack(&param_refs);

    compare_gradient_step(
        &mut |flat| {
            let parts = unpack(flat, &shapes);
            let mut probe = model.clone();
            {
                let ModelState { layers, head, .. } = &mut probe;
                let mut dsts: Vec<&mut Tensor<f64>> = layers
                    .iter_mut()
                    .flat_map(|l| l.trainable_params_mut())
                    .collect();
                if let Some(head) = head.as_mut() {
                    dsts.push(&mut head.weights);
                    dsts.push(&mut head.bias);
                }
                for (dst, src) in dsts.into_iter().zip(&parts) {
                    *dst = src.clone();
                }
            }
            loss_of(&mut probe, &x)
        },
        &point,
        &analytic,
        // Deep compositions square away more truncation error than single
        // layers; a finer step keeps it below the end-to-end tolerance while
        // staying far above double-precision roundoff.
        1e-6,
    )
}

fn aggregate(name: &str, tolerance: f64, base_seed: u64, seeds: usize, f: impl Fn(u64) -> f64) -> CheckReport {
    let max_rel_err = (0..seeds)
        .map(|i| f(base_seed.wrapping_add(i as u64)))
        .fold(0.0, f64::max)
        ;
    CheckReport {
        name: name.to_string(),
        max_rel_err,
        tolerance,
    }
}

/// Run every verification suite. `seeds` independent random instances per
/// check; the report carries the worst relative error seen.
pub fn run_all(base_seed: u64, seeds: usize) -> Result<Vec<CheckReport>> {
    let reports = vec![
        aggregate("gelu", GELU_TOLERANCE, base_seed, seeds, check_gelu),
        aggregate("dense", LAYER_TOLERANCE, base_seed, seeds, check_dense),
        aggregate("conv2d", LAYER_TOLERANCE, base_seed, seeds, check_conv),
        aggregate("global-avg-pool", LAYER_TOLERANCE, base_seed, seeds, check_gap),
        aggregate("batch-norm-train", LAYER_TOLERANCE, base_seed, seeds, |s| {
            check_batchnorm(s, Mode::Train)
        }),
        aggregate("batch-norm-infer", LAYER_TOLERANCE, base_seed, seeds, |s| {
            check_batchnorm(s, Mode::Infer)
        }),
        aggregate(
            "involution-bilinear",
            LAYER_TOLERANCE,
            base_seed,
            seeds,
            check_involution_apply,
        ),
        aggregate(
            "involution-kernel-chain",
            LAYER_TOLERANCE,
            base_seed,
            seeds,
            check_involution_chain,
        ),
        aggregate("l2-normalize", LAYER_TOLERANCE, base_seed, seeds, check_l2_normalize),
        aggregate("cross-entropy", LAYER_TOLERANCE, base_seed, seeds, check_cross_entropy),
        aggregate("ms-loss", LAYER_TOLERANCE, base_seed, seeds, check_ms_loss),
        aggregate("trunk-cross-entropy", END_TO_END_TOLERANCE, base_seed, seeds, |s| {
            check_trunk(s, TrunkObjective::CrossEntropy)
        }),
        aggregate("trunk-ms", END_TO_END_TOLERANCE, base_seed, seeds, |s| {
            check_trunk(s, TrunkObjective::MultiSimilarity)
        }),
    ];
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_passes_on_a_fresh_seed() {
        for report in run_all(2024, 2).unwrap() {
            assert!(
                report.passed(),
                "{}: max rel err {} over tolerance {}",
                report.name,
                report.max_rel_err,
                report.tolerance
            );
        }
    }

    #[test]
    fn corrupted_backward_is_detected() {
        // Fault injection: scale one analytic component and the harness must
        // report an error above any reasonable tolerance.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(&[6], &mut rng);
        let w = random_tensor(&[6], &mut rng);
        let mut corrupted = gelu_backward(&x, &w).unwrap();
        corrupted.data_mut()[2] = corrupted.data()[2] * 2.0 + 0.5;
        let err = compare_gradient(
            &mut |flat| {
                let xt = Tensor::from_vec(&[6], flat.to_vec()).unwrap();
                weighted_sum(&gelu_forward(&xt), &w)
            },
            x.data(),
            corrupted.data(),
        );
        assert!(err > LAYER_TOLERANCE, "corruption must be flagged, got {}", err);
    }
}
