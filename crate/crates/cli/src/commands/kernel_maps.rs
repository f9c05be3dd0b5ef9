//! `kernel-maps`: export per-pixel kernel magnitude maps for every
//! involution layer of a trained model on the selected images.

use crate::commands::{load_split, parse_indices, with_pool};
use crate::config::RunConfig;
use ivmetric_core::data::Split;
use ivmetric_core::error::Result;
use ivmetric_core::models::{export_kernel_maps, load_weights};
use std::path::Path;

pub fn run(cfg: &RunConfig, weights: &Path, indices: &str, split: Split) -> Result<()> {
    let indices = parse_indices(indices)?;
    with_pool(cfg.threads, || {
        let model = load_weights(weights)?;
        let ds = load_split(cfg.dataset, &cfg.data_dir, split, None, cfg.seed)?;
        let paths = export_kernel_maps(&model, &ds, &indices, &cfg.out_dir)?;
        for path in &paths {
            println!("{}", path.display());
        }
        Ok(())
    })
}
