//! `query`: similarity search for selected images, producing the prediction
//! montage (query image followed by its k nearest gallery images per row)
//! and a CSV of the retrieved pairs.

use crate::commands::{load_split, parse_indices, with_pool};
use crate::config::RunConfig;
use ivmetric_core::data::Split;
use ivmetric_core::error::{Error, Result};
use ivmetric_core::models::load_weights;
use ivmetric_core::search::{build_index, export_prediction_grid};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

pub struct QueryArgs<'a> {
    pub weights: &'a Path,
    pub indices: &'a str,
    pub k: usize,
    pub query_split: Split,
    pub gallery_split: Split,
}

pub fn run(cfg: &RunConfig, args: &QueryArgs) -> Result<()> {
    let indices = parse_indices(args.indices)?;
    if indices.is_empty() {
        return Err(Error::config("no query indices given"));
    }
    with_pool(cfg.threads, || {
        let model = load_weights(args.weights)?;
        if model.spec.input_shape != cfg.dataset.dims() {
            return Err(Error::config(format!(
                "weights expect {:?} input but {} provides {:?}",
                model.spec.input_shape,
                cfg.dataset.as_str(),
                cfg.dataset.dims()
            )));
        }
        let gallery = load_split(cfg.dataset, &cfg.data_dir, args.gallery_split, None, cfg.seed)?;
        let queries = if args.gallery_split == args.query_split {
            gallery.clone()
        } else {
            load_split(cfg.dataset, &cfg.data_dir, args.query_split, None, cfg.seed)?
        };
        for &i in &indices {
            if i >= queries.len() {
                return Err(Error::config(format!(
                    "query index {} out of range for {} split of {}",
                    i,
                    args.query_split.as_str(),
                    queries.len()
                )));
            }
        }

        let index = build_index(&model, &gallery)?;
        let query_emb = model.embed(&queries.to_batch::<f32>(&indices))?;
        let exclude_self = args.gallery_split == args.query_split;

        fs::create_dir_all(&cfg.out_dir)?;
        let montage_path = cfg.out_dir.join("montage.ppm");
        let results = export_prediction_grid(
            &index,
            &gallery,
            &query_emb,
            &queries,
            &indices,
            args.k,
            exclude_self,
            &montage_path,
        )?;

        let csv_path = cfg.out_dir.join("query.csv");
        let mut out = BufWriter::new(File::create(&csv_path)?);
        writeln!(out, "query_id,rank,gallery_id,similarity,label_match")?;
        for (qi, rows) in indices.iter().zip(&results) {
            for (rank, &(row, similarity)) in rows.iter().enumerate() {
                let matches = index.label(row) == queries.label(*qi);
                writeln!(
                    out,
                    "{},{},{},{:.6},{}",
                    qi,
                    rank + 1,
                    index.image_ref(row),
                    similarity,
                    u8::from(matches)
                )?;
            }
        }
        out.flush()?;
        println!("montage: {}", montage_path.display());
        println!("results: {}", csv_path.display());
        Ok(())
    })
}
