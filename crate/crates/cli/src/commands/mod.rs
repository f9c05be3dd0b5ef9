//! Subcommand implementations. Every command validates its full
//! configuration and loads its inputs before creating any output file, so a
//! failed invocation leaves nothing half-written.

pub mod bench;
pub mod eval;
pub mod gradcheck;
pub mod kernel_maps;
pub mod params;
pub mod query;
pub mod train;

use ivmetric_core::data::{load_dataset, DatasetKind, ImageDataset, Split};
use ivmetric_core::error::{Error, Result};
use ivmetric_core::models::EpochStats;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

/// Run a closure inside a rayon pool of the requested size (0 = one worker
/// per core). Nested operations inherit the pool, so `threads = 1` makes a
/// whole command run sequentially.
pub fn with_pool<T>(threads: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T>
where
    T: Send,
{
    let mut builder = rayon::ThreadPoolBuilder::new();
    if threads > 0 {
        builder = builder.num_threads(threads);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::config(format!("cannot build thread pool: {}", e)))?;
    pool.install(f)
}

/// Seeded sample of `limit` rows (dataset order preserved), or the whole
/// dataset when no limit applies.
pub fn seeded_subset(ds: &ImageDataset, limit: Option<usize>, seed: u64) -> Result<ImageDataset> {
    let Some(limit) = limit else {
        return Ok(ds.clone());
    };
    if limit == 0 {
        return Err(Error::config("subset limit must be positive"));
    }
    if limit >= ds.len() {
        return Ok(ds.clone());
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut picked = order[..limit].to_vec();
    picked.sort_unstable();
    ds.subset(&picked)
}

pub fn load_split(
    kind: DatasetKind,
    data_dir: &Path,
    split: Split,
    limit: Option<usize>,
    seed: u64,
) -> Result<ImageDataset> {
    let ds = load_dataset(kind, data_dir, split)?;
    if ds.is_empty() {
        return Err(Error::Format(format!(
            "{} {} split is empty",
            kind.as_str(),
            split.as_str()
        )));
    }
    seeded_subset(&ds, limit, seed)
}

pub fn write_history_csv(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "epoch,train_loss,test_loss,seconds")?;
    for epoch in history {
        let test = epoch
            .test_loss
            .map(|l| format!("{:.6}", l))
            .unwrap_or_default();
        writeln!(
            out,
            "{},{:.6},{},{:.3}",
            epoch.epoch, epoch.train_loss, test, epoch.seconds
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Parse a comma-separated index list.
pub fn parse_indices(raw: &str) -> Result<Vec<usize>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| Error::config(format!("invalid index '{}'", s)))
        })
        .collect()
}
