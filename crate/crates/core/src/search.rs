//! Exact cosine-similarity retrieval over a gallery of embeddings: index
//! construction from a model and dataset, top-k queries, recall metrics, and
//! the prediction-montage export (query image followed by its k nearest
//! gallery images per row).
//!
//! Search is brute force: at gallery sizes up to the benchmark datasets'
//! 60,000 rows and 256 dimensions, exactness is cheap.

use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::layers::l2_normalize_forward;
use crate::models::ModelState;
use crate::pnm::write_ppm;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::collections::BinaryHeap;
use std::path::Path;

/// Gallery of unit-normalized embeddings with labels and back-references to
/// the images they came from. Immutable once built; concurrent read-only
/// queries are safe.
#[derive(Clone, Debug)]
pub struct EmbeddingIndex<S: Scalar = f32> {
    matrix: Tensor<S>, // [N, D], unit rows
    labels: Vec<usize>,
    image_refs: Vec<usize>,
}

impl<S: Scalar> EmbeddingIndex<S> {
    /// Build from raw embeddings; rows are normalized here so the unit-norm
    /// invariant holds by construction.
    pub fn new(embeddings: &Tensor<S>, labels: Vec<usize>, image_refs: Vec<usize>) -> Result<Self> {
        if embeddings.rank() != 2 || embeddings.rows() == 0 {
            return Err(Error::shape(format!(
                "index needs a non-empty [N, D] matrix, got {:?}",
                embeddings.shape()
            )));
        }
        if labels.len() != embeddings.rows() || image_refs.len() != embeddings.rows() {
            return Err(Error::shape(format!(
                "{} rows but {} labels and {} image refs",
                embeddings.rows(),
                labels.len(),
                image_refs.len()
            )));
        }
        let (matrix, _) = l2_normalize_forward(embeddings)?;
        Ok(EmbeddingIndex {
            matrix,
            labels,
            image_refs,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn matrix(&self) -> &Tensor<S> {
        &self.matrix
    }

    pub fn label(&self, row: usize) -> usize {
        self.labels[row]
    }

    /// Source-dataset row the indexed embedding was computed from.
    pub fn image_ref(&self, row: usize) -> usize {
        self.image_refs[row]
    }
}

/// Embed every dataset image in inference mode and normalize.
pub fn build_index<S: Scalar>(
    model: &ModelState<S>,
    ds: &ImageDataset,
) -> Result<EmbeddingIndex<S>> {
    if ds.is_empty() {
        return Err(Error::config("cannot index an empty dataset"));
    }
    let d = model.embedding_dim();
    let mut data = Vec::with_capacity(ds.len() * d);
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(256) {
        let emb = model.embed(&ds.to_batch::<S>(chunk))?;
        data.extend_from_slice(emb.data());
    }
    let matrix = Tensor::from_vec(&[ds.len(), d], data)?;
    let labels = (0..ds.len()).map(|i| ds.label(i)).collect();
    EmbeddingIndex::new(&matrix, labels, all)
}

#[derive(PartialEq)]
struct Candidate {
    similarity: f64,
    row: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Higher similarity wins; ties go to the lower row index.
        self.similarity
            .total_cmp(&other.similarity)
            .then_with(|| other.row.cmp(&self.row))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Exact top-k rows by cosine similarity, descending, ties broken by lower
/// row index. The query need not be normalized; ranking and reported values
/// use its direction only.
pub fn query_topk<S: Scalar>(
    idx: &EmbeddingIndex<S>,
    query: &[S],
    k: usize,
) -> Result<Vec<(usize, f64)>> {
    query_topk_excluding(idx, query, k, None)
}

/// Top-k with one gallery row excluded, for queries that are themselves
/// gallery members.
pub fn query_topk_excluding<S: Scalar>(
    idx: &EmbeddingIndex<S>,
    query: &[S],
    k: usize,
    exclude_row: Option<usize>,
) -> Result<Vec<(usize, f64)>> {
    if query.len() != idx.dim() {
        return Err(Error::shape(format!(
            "query has {} dimensions, index has {}",
            query.len(),
            idx.dim()
        )));
    }
    let available = idx.len() - usize::from(exclude_row.is_some());
    if k > available {
        return Err(Error::config(format!(
            "k = {} exceeds the {} available gallery rows",
            k, available
        )));
    }
    let norm = query
        .iter()
        .map(|&v| v.to_double() * v.to_double())
        .sum::<f64>()
        .sqrt();
    let inv_norm = if norm > 0.0 { 1.0 / norm } else { 0.0 };

    // Min-heap of the k best so far; the root is the weakest kept candidate.
    let mut heap: BinaryHeap<std::cmp::Reverse<Candidate>> = BinaryHeap::with_capacity(k + 1);
    for row in 0..idx.len() {
        if exclude_row == Some(row) {
            continue;
        }
        let similarity = idx
            .matrix
            .row(row)
            .iter()
            .zip(query)
            .map(|(&a, &b)| a.to_double() * b.to_double())
            .sum::<f64>()
            * inv_norm;
        heap.push(std::cmp::Reverse(Candidate { similarity, row }));
        if heap.len() > k {
            heap.pop();
        }
    }
    let mut picked: Vec<Candidate> = heap.into_iter().map(|r| r.0).collect();
    picked.sort_by(|a, b| b.cmp(a));
    Ok(picked.into_iter().map(|c| (c.row, c.similarity)).collect())
}

/// Fraction of queries whose top-k contains at least one gallery row of the
/// same label. With `exclude_self`, query `i` is taken to be gallery row `i`
/// and that row is ignored.
pub fn recall_at_k<S: Scalar>(
    idx: &EmbeddingIndex<S>,
    queries: &Tensor<S>,
    query_labels: &[usize],
    k: usize,
    exclude_self: bool,
) -> Result<f64> {
    if queries.rank() != 2 || queries.rows() != query_labels.len() {
        return Err(Error::shape(format!(
            "queries {:?} do not pair with {} labels",
            queries.shape(),
            query_labels.len()
        )));
    }
    if exclude_self && queries.rows() != idx.len() {
        return Err(Error::config(
            "self-exclusion requires queries to be the gallery itself",
        ));
    }
    let mut hits = 0usize;
    for q in 0..queries.rows() {
        let exclude = exclude_self.then_some(q);
        let results = query_topk_excluding(idx, queries.row(q), k, exclude)?;
        if results.iter().any(|&(row, _)| idx.label(row) == query_labels[q]) {
            hits += 1;
        }
    }
    Ok(hits as f64 / queries.rows().max(1) as f64)
}

/// One montage row per query: the query image followed by its k nearest
/// gallery images, written as a single binary PPM (grayscale inputs are
/// replicated to three channels). Returns the per-query retrieval results
/// for reporting.
#[allow(clippy::too_many_arguments)]
pub fn export_prediction_grid<S: Scalar>(
    idx: &EmbeddingIndex<S>,
    gallery_images: &ImageDataset,
    query_embeddings: &Tensor<S>,
    query_images: &ImageDataset,
    query_rows: &[usize],
    k: usize,
    exclude_self: bool,
    out_path: &Path,
) -> Result<Vec<Vec<(usize, f64)>>> {
    if query_embeddings.rank() != 2 || query_embeddings.rows() != query_rows.len() {
        return Err(Error::shape(format!(
            "query embeddings {:?} do not pair with {} image rows",
            query_embeddings.shape(),
            query_rows.len()
        )));
    }
    if gallery_images.dims() != query_images.dims() {
        return Err(Error::config(format!(
            "gallery cells {:?} and query cells {:?} differ",
            gallery_images.dims(),
            query_images.dims()
        )));
    }
    for &r in query_rows {
        if r >= query_images.len() {
            return Err(Error::config(format!(
                "query image row {} out of range for dataset of {}",
                r,
                query_images.len()
            )));
        }
    }
    let (h, w, c) = gallery_images.dims();
    if c != 1 && c != 3 {
        return Err(Error::config(format!(
            "montage supports 1- or 3-channel images, got {}",
            c
        )));
    }

    let cols = k + 1;
    let rows = query_rows.len();
    let mut canvas = vec![0u8; rows * h * cols * w * 3];
    let mut paste = |cell_row: usize, cell_col: usize, image: &[u8]| {
        for y in 0..h {
            for x in 0..w {
                let dst = (((cell_row * h + y) * cols + cell_col) * w + x) * 3;
                for ch in 0..3 {
                    let src = (y * w + x) * c + if c == 3 { ch } else { 0 };
                    canvas[dst + ch] = image[src];
                }
            }
        }
    };

    let mut all_results = Vec::with_capacity(rows);
    for (qi, &row) in query_rows.iter().enumerate() {
        let exclude = exclude_self.then(|| idx_row_for_image(idx, row)).flatten();
        let results = query_topk_excluding(idx, query_embeddings.row(qi), k, exclude)?;
        paste(qi, 0, query_images.image_bytes(row));
        for (rank, &(gallery_row, _)) in results.iter().enumerate() {
            paste(
                qi,
                rank + 1,
                gallery_images.image_bytes(idx.image_ref(gallery_row)),
            );
        }
        all_results.push(results);
    }
    write_ppm(out_path, cols * w, rows * h, &canvas)?;
    Ok(all_results)
}

fn idx_row_for_image<S: Scalar>(idx: &EmbeddingIndex<S>, image_row: usize) -> Option<usize> {
    (0..idx.len()).find(|&r| idx.image_ref(r) == image_row)
}
