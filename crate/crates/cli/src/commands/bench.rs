//! `bench`: train every listed preset under both objectives at the
//! configured scale and emit one CSV row per preset with parameter count,
//! serialized size, mean seconds per epoch, and final test losses.

use crate::commands::{load_split, with_pool};
use crate::config::RunConfig;
use ivmetric_core::data::{BatchPlan, Split};
use ivmetric_core::error::Result;
use ivmetric_core::models::{train, LossKind, ModelState, PresetName, TrainOptions};
use std::fs::{self, File};
use std::io::{BufWriter, Write};

pub fn run(cfg: &RunConfig, presets: &[PresetName]) -> Result<()> {
    with_pool(cfg.threads, || {
        let mut rows = Vec::new();
        if !presets.is_empty() {
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

            for &preset in presets {
                let mut seconds = Vec::new();
                let mut final_loss = [f64::NAN, f64::NAN];
                for (slot, loss) in [LossKind::CrossEntropy, LossKind::MultiSimilarity]
                    .into_iter()
                    .enumerate()
                {
                    let mut model =
                        ModelState::<f32>::build_preset(preset, cfg.dataset.dims(), cfg.seed)?;
                    let plan = match loss {
                        LossKind::CrossEntropy => BatchPlan::shuffled(cfg.batch_size, cfg.seed)?,
                        LossKind::MultiSimilarity => {
                            BatchPlan::class_balanced(cfg.ms_classes, cfg.ms_per_class, cfg.seed)?
                        }
                    };
                    let opts = TrainOptions {
                        loss,
                        epochs: cfg.epochs,
                        plan,
                        adam: cfg.adam,
                        ms: cfg.ms,
                        n_classes: 10,
                    };
                    let history = train(&mut model, &train_ds, Some(&test_ds), &opts)?;
                    seconds.extend(history.iter().map(|e| e.seconds));
                    if let Some(last) = history.last() {
                        final_loss[slot] = last.test_loss.unwrap_or(f64::NAN);
                    }
                    eprintln!(
                        "bench: {} {} done ({} epochs)",
                        preset.as_str(),
                        loss.as_str(),
                        cfg.epochs
                    );
                }
                let model = ModelState::<f32>::build_preset(preset, cfg.dataset.dims(), cfg.seed)?;
                let mean_seconds = if seconds.is_empty() {
                    f64::NAN
                } else {
                    seconds.iter().sum::<f64>() / seconds.len() as f64
                };
                rows.push(format!(
                    "{},{},{:.2},{:.3},{:.6},{:.6}",
                    preset.as_str(),
                    model.count_parameters(),
                    model.size_kb(),
                    mean_seconds,
                    final_loss[0],
                    final_loss[1]
                ));
            }
        }

        fs::create_dir_all(&cfg.out_dir)?;
        let path = cfg.out_dir.join("bench.csv");
        let mut out = BufWriter::new(File::create(&path)?);
        writeln!(out, "model,params,size_kb,seconds_per_epoch,ce_loss,ms_loss")?;
        for row in &rows {
            writeln!(out, "{}", row)?;
        }
        out.flush()?;
        println!("bench results: {}", path.display());
        Ok(())
    })
}
