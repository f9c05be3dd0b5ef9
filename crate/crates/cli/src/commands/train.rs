//! `train`: fit a preset on a dataset and write the weight file plus the
//! per-epoch history CSV.

use crate::commands::{load_split, with_pool, write_history_csv};
use crate::config::RunConfig;
use ivmetric_core::data::{BatchPlan, Split};
use ivmetric_core::error::Result;
use ivmetric_core::models::{save_weights, train, LossKind, ModelState, TrainOptions};
use std::fs;

pub fn run(cfg: &RunConfig) -> Result<()> {
    with_pool(cfg.threads, || {
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

        let mut model = ModelState::<f32>::build_preset(cfg.preset, cfg.dataset.dims(), cfg.seed)?;
        let opts = train_options(cfg)?;
        let history = train(&mut model, &train_ds, Some(&test_ds), &opts)?;

        fs::create_dir_all(&cfg.out_dir)?;
        let weights_path = cfg.out_dir.join(format!(
            "{}-{}.ivw",
            cfg.preset.as_str(),
            cfg.loss.as_str()
        ));
        save_weights(&model, &weights_path)?;
        let history_path = cfg.out_dir.join("history.csv");
        write_history_csv(&history_path, &history)?;

        match history.last() {
            Some(last) => println!(
                "final train {} = {:.6}, test {} = {:.6}",
                cfg.loss.as_str(),
                last.train_loss,
                cfg.loss.as_str(),
                last.test_loss.unwrap_or(f64::NAN)
            ),
            None => println!("0 epochs requested; wrote initial weights"),
        }
        println!("weights: {}", weights_path.display());
        println!("history: {}", history_path.display());
        Ok(())
    })
}

pub fn train_options(cfg: &RunConfig) -> Result<TrainOptions> {
    let plan = match cfg.loss {
        LossKind::CrossEntropy => BatchPlan::shuffled(cfg.batch_size, cfg.seed)?,
        LossKind::MultiSimilarity => {
            BatchPlan::class_balanced(cfg.ms_classes, cfg.ms_per_class, cfg.seed)?
        }
    };
    Ok(TrainOptions {
        loss: cfg.loss,
        epochs: cfg.epochs,
        plan,
        adam: cfg.adam,
        ms: cfg.ms,
        n_classes: 10,
    })
}
