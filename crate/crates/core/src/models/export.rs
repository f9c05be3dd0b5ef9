//! Kernel-map export: for each involution layer and input image, summarize
//! the generated per-pixel kernel by its L2 norm over the kernel axes and
//! write the min-max-scaled result as a grayscale PGM. Adjacent involution
//! layers of the same model can then be compared visually for information
//! loss.

use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::layers::Layer;
use crate::models::ModelState;
use crate::pnm::write_pgm;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::fs;
use std::path::{Path, PathBuf};

/// Per-pixel kernel magnitude of one generated kernel tensor
/// `[1, H, W, K, K, G]`, flattened to `[H, W]`.
fn kernel_magnitude<S: Scalar>(kernels: &Tensor<S>) -> (usize, usize, Vec<f64>) {
    let (h, w) = (kernels.shape()[1], kernels.shape()[2]);
    let taps: usize = kernels.shape()[3] * kernels.shape()[4] * kernels.shape()[5];
    let map = kernels
        .data()
        .chunks_exact(taps)
        .map(|px| px.iter().map(|v| v.to_double().powi(2)).sum::<f64>().sqrt())
        .collect();
    (h, w, map)
}

fn to_grayscale(map: &[f64]) -> Vec<u8> {
    let min = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max - min).is_normal() {
        return vec![0; map.len()];
    }
    map.iter()
        .map(|&v| (((v - min) / (max - min)) * 255.0).round() as u8)
        .collect()
}

/// Write one PGM per (input image, involution layer) pair into `out_dir`.
/// Returns the created paths in layer order per image.
pub fn export_kernel_maps<S: Scalar>(
    model: &ModelState<S>,
    ds: &ImageDataset,
    indices: &[usize],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if !model.has_involution() {
        return Err(Error::config(format!(
            "model '{}' has no involution layers to visualize",
            model.spec.name
        )));
    }
    if ds.dims() != model.spec.input_shape {
        return Err(Error::config(format!(
            "dataset images {:?} do not match model input {:?}",
            ds.dims(),
            model.spec.input_shape
        )));
    }
    for &i in indices {
        if i >= ds.len() {
            return Err(Error::config(format!(
                "image index {} out of range for dataset of {}",
                i,
                ds.len()
            )));
        }
    }

    fs::create_dir_all(out_dir)?;
    let mut paths = Vec::new();
    for &index in indices {
        let mut x = ds.to_batch::<S>(&[index]);
        let mut inv_counter = 0;
        for layer in &model.layers {
            if let Layer::Involution(inv) = layer {
                let kernels = inv.generate_kernels_infer(&x)?;
                let (h, w, map) = kernel_magnitude(&kernels);
                let path = out_dir.join(format!("img{:05}_inv{}.pgm", index, inv_counter));
                write_pgm(&path, w, h, &to_grayscale(&map))?;
                paths.push(path);
                inv_counter += 1;
            }
            x = layer.infer(&x)?;
        }
    }
    Ok(paths)
}
