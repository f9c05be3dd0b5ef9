//! `eval`: embedding-space metrics for a trained weight file — test-split
//! multi-similarity loss and recall@k against the train-split gallery.

use crate::commands::{load_split, with_pool};
use crate::config::RunConfig;
use ivmetric_core::data::Split;
use ivmetric_core::error::{Error, Result};
use ivmetric_core::models::{evaluate_loss, load_weights, LossKind};
use ivmetric_core::search::{build_index, recall_at_k};
use std::path::Path;

pub fn run(cfg: &RunConfig, weights: &Path, ks: &[usize]) -> Result<()> {
    if cfg.loss == LossKind::CrossEntropy {
        return Err(Error::config(
            "weight files carry the trunk only; the cross-entropy classifier head is \
             training-time state. Evaluate with --loss ms or use the retrieval metrics.",
        ));
    }
    with_pool(cfg.threads, || {
        let model = load_weights(weights)?;
        if model.spec.input_shape != cfg.dataset.dims() {
            return Err(Error::config(format!(
                "weights expect {:?} input but {} provides {:?}",
                model.spec.input_shape,
                cfg.dataset.as_str(),
                cfg.dataset.dims()
            )));
        }
        let train_ds = load_split(
            cfg.dataset,
            &cfg.data_dir,
            Split::Train,
            cfg.train_limit,
            cfg.seed,
        )?;
        let test_ds = load_split(
            cfg.dataset,
            &cfg.data_dir,
            Split::Test,
            cfg.test_limit,
            cfg.seed.wrapping_add(1),
        )?;

        let opts = super::train::train_options(cfg)?;
        let ms = evaluate_loss(&model, &test_ds, LossKind::MultiSimilarity, &opts)?;
        println!("test ms loss: {:.6}", ms);

        let index = build_index(&model, &train_ds)?;
        let all: Vec<usize> = (0..test_ds.len()).collect();
        let queries = {
            
            model.embed(&test_ds.to_batch::<f32>(&all))?
        };
        let labels = test_ds.batch_labels(&all);
        for &k in ks {
            let recall = recall_at_k(&index, &queries, &labels, k, false)?;
            println!("recall@{}: {:.4}", k, recall);
        }
        Ok(())
    })
}
