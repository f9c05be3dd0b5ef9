//! Bit-exact loaders for the IDX (MNIST/FashionMNIST) and CIFAR-10 binary
//! formats, plus the two batch-sampling regimes: shuffled fixed-size batches
//! for classifier training and class-balanced P x Q batches for pairwise
//! metric training.
//!
//! Images stay raw bytes after loading; scaling to `[0, 1]` happens only
//! when a batch tensor is materialized.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::Path;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD_LEN: usize = 3073;
const CIFAR_PLANE: usize = 1024;
const MAX_LABEL: u8 = 9;

/// An image classification dataset held as raw bytes.
#[derive(Clone, Debug)]
pub struct ImageDataset {
    pub name: String,
    pub split: String,
    height: usize,
    width: usize,
    channels: usize,
    images: Vec<u8>,
    labels: Vec<u8>,
}

impl ImageDataset {
    pub fn new(
        name: impl Into<String>,
        split: impl Into<String>,
        height: usize,
        width: usize,
        channels: usize,
        images: Vec<u8>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        let pixel = height * width * channels;
        if pixel == 0 || images.len() != labels.len() * pixel {
            return Err(Error::Pairing(format!(
                "{} image bytes cannot hold {} samples of {}x{}x{}",
                images.len(),
                labels.len(),
                height,
                width,
                channels
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > MAX_LABEL) {
            return Err(Error::Format(format!(
                "label {} outside the 10-class range",
                bad
            )));
        }
        Ok(ImageDataset {
            name: name.into(),
            split: split.into(),
            height,
            width,
            channels,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// (H, W, C).
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn image_bytes(&self, index: usize) -> &[u8] {
        let pixel = self.height * self.width * self.channels;
        &self.images[index * pixel..(index + 1) * pixel]
    }

    pub fn label(&self, index: usize) -> usize {
        self.labels[index] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn raw_bytes(&self) -> &[u8] {
        &self.images
    }

    /// New dataset containing the given rows, in order.
    pub fn subset(&self, indices: &[usize]) -> Result<ImageDataset> {
        let pixel = self.height * self.width * self.channels;
        let mut images = Vec::with_capacity(indices.len() * pixel);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::config(format!(
                    "index {} out of range for dataset of {}",
                    i,
                    self.len()
                )));
            }
            images.extend_from_slice(self.image_bytes(i));
            labels.push(self.labels[i]);
        }
        ImageDataset::new(
            self.name.clone(),
            self.split.clone(),
            self.height,
            self.width,
            self.channels,
            images,
            labels,
        )
    }

    /// Materialize rows as a `[B, H, W, C]` tensor scaled by 1/255.
    pub fn to_batch<S: Scalar>(&self, indices: &[usize]) -> Tensor<S> {
        let (h, w, c) = self.dims();
        let scale = S::from_double(1.0 / 255.0);
        let mut data = Vec::with_capacity(indices.len() * h * w * c);
        for &i in indices {
            data.extend(
                self.image_bytes(i)
                    .iter()
                    .map(|&b| S::from_double(b as f64) * scale),
            );
        }
        Tensor::from_vec(&[indices.len(), h, w, c], data).expect("sized by construction")
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.label(i)).collect()
    }
}

/// Whole-dataset `[N, H, W, C]` tensor in `[0, 1]`. No mean subtraction.
pub fn normalize<S: Scalar>(ds: &ImageDataset) -> Tensor<S> {
    let all: Vec<usize> = (0..ds.len()).collect();
    ds.to_batch(&all)
}

fn read_be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Truncated(format!(
            "{} needs {} bytes, file has {}",
            what,
            end,
            bytes.len()
        )));
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Parse a big-endian IDX image/label file pair.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<ImageDataset> {
    let image_bytes = fs::read(images_path)?;
    let label_bytes = fs::read(labels_path)?;

    let magic = read_be_u32(&image_bytes, 0, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "bad IDX image magic {:#010x} in {}",
            magic,
            images_path.display()
        )));
    }
    let n = read_be_u32(&image_bytes, 4, "image count")? as usize;
    let h = read_be_u32(&image_bytes, 8, "image height")? as usize;
    let w = read_be_u32(&image_bytes, 12, "image width")? as usize;
    let expected = 16 + n * h * w;
    if image_bytes.len() != expected {
        return Err(Error::Truncated(format!(
            "IDX image payload is {} bytes, header declares {}",
            image_bytes.len(),
            expected
        )));
    }

    let magic = read_be_u32(&label_bytes, 0, "label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "bad IDX label magic {:#010x} in {}",
            magic,
            labels_path.display()
        )));
    }
    let n_labels = read_be_u32(&label_bytes, 4, "label count")? as usize;
    if label_bytes.len() != 8 + n_labels {
        return Err(Error::Truncated(format!(
            "IDX label payload is {} bytes, header declares {}",
            label_bytes.len(),
            8 + n_labels
        )));
    }
    if n_labels != n {
        return Err(Error::Pairing(format!(
            "{} images but {} labels",
            n, n_labels
        )));
    }

    ImageDataset::new(
        "idx",
        "unknown",
        h,
        w,
        1,
        image_bytes[16..].to_vec(),
        label_bytes[8..].to_vec(),
    )
}

/// Parse CIFAR-10 binary batch files: records of one label byte followed by
/// three 1024-byte color planes, reassembled to 32x32x3 HWC.
pub fn load_cifar10(batch_files: &[impl AsRef<Path>]) -> Result<ImageDataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for file in batch_files {
        let bytes = fs::read(file.as_ref())?;
        if bytes.len() % CIFAR_RECORD_LEN != 0 {
            return Err(Error::Truncated(format!(
                "{}: {} bytes is not a whole number of {}-byte records",
                file.as_ref().display(),
                bytes.len(),
                CIFAR_RECORD_LEN
            )));
        }
        for record in bytes.chunks_exact(CIFAR_RECORD_LEN) {
            let label = record[0];
            if label > MAX_LABEL {
                return Err(Error::Format(format!(
                    "CIFAR-10 label {} outside the 10-class range",
                    label
                )));
            }
            labels.push(label);
            let planes = &record[1..];
            for px in 0..CIFAR_PLANE {
                images.push(planes[px]);
                images.push(planes[CIFAR_PLANE + px]);
                images.push(planes[2 * CIFAR_PLANE + px]);
            }
        }
    }
    ImageDataset::new("cifar10", "unknown", 32, 32, 3, images, labels)
}

/// The benchmark datasets the CLI knows how to locate on disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    FashionMnist,
    Cifar10,
}

impl DatasetKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "mnist" => Ok(DatasetKind::Mnist),
            "fashion-mnist" | "fashionmnist" => Ok(DatasetKind::FashionMnist),
            "cifar10" | "cifar-10" => Ok(DatasetKind::Cifar10),
            other => Err(Error::config(format!("unknown dataset '{}'", other))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::FashionMnist => "fashion-mnist",
            DatasetKind::Cifar10 => "cifar10",
        }
    }

    /// (H, W, C) of the benchmark images.
    pub fn dims(&self) -> (usize, usize, usize) {
        match self {
            DatasetKind::Cifar10 => (32, 32, 3),
            _ => (28, 28, 1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Load a benchmark split from a directory, inferring file roles from the
/// distribution's standard file names.
pub fn load_dataset(kind: DatasetKind, dir: &Path, split: Split) -> Result<ImageDataset> {
    let mut ds = match kind {
        DatasetKind::Mnist | DatasetKind::FashionMnist => {
            let (images, labels) = match split {
                Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
                Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
            };
            load_idx(&dir.join(images), &dir.join(labels))?
        }
        DatasetKind::Cifar10 => {
            let files: Vec<_> = match split {
                Split::Train => (1..=5)
                    .map(|i| dir.join(format!("data_batch_{}.bin", i)))
                    .collect(),
                Split::Test => vec![dir.join("test_batch.bin")],
            };
            load_cifar10(&files)?
        }
    };
    ds.name = kind.as_str().to_string();
    ds.split = split.as_str().to_string();
    Ok(ds)
}

/// How an epoch is cut into batches.
#[derive(Clone, Copy, Debug)]
pub enum BatchMode {
    /// Fresh permutation each epoch, fixed batch size, final short batch
    /// included: one epoch visits every sample exactly once.
    Shuffled { batch_size: usize },
    /// Each batch draws `classes_per_batch` distinct classes and
    /// `samples_per_class` samples of each, so every sample in a batch has a
    /// positive partner. Classes with fewer samples than requested are drawn
    /// with replacement.
    ClassBalanced {
        classes_per_batch: usize,
        samples_per_class: usize,
    },
}

/// A seeded, reproducible batch schedule.
#[derive(Clone, Copy, Debug)]
pub struct BatchPlan {
    pub mode: BatchMode,
    pub seed: u64,
}

impl BatchPlan {
    pub fn shuffled(batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        Ok(BatchPlan {
            mode: BatchMode::Shuffled { batch_size },
            seed,
        })
    }

    pub fn class_balanced(
        classes_per_batch: usize,
        samples_per_class: usize,
        seed: u64,
    ) -> Result<Self> {
        if classes_per_batch == 0 {
            return Err(Error::config("classes per batch must be positive"));
        }
        if samples_per_class < 2 {
            return Err(Error::config(
                "class-balanced batches need at least 2 samples per class to form positive pairs",
            ));
        }
        Ok(BatchPlan {
            mode: BatchMode::ClassBalanced {
                classes_per_batch,
                samples_per_class,
            },
            seed,
        })
    }

    pub fn batch_size(&self) -> usize {
        match self.mode {
            BatchMode::Shuffled { batch_size } => batch_size,
            BatchMode::ClassBalanced {
                classes_per_batch,
                samples_per_class,
            } => classes_per_batch * samples_per_class,
        }
    }

    /// Index batches for one epoch. A pure function of (plan, labels, epoch).
    pub fn epoch_batches(&self, labels: &[u8], epoch: u64) -> Result<Vec<Vec<usize>>> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::config("cannot sample batches from an empty dataset"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch.wrapping_add(1));

        match self.mode {
            BatchMode::Shuffled { batch_size } => {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut rng);
                Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
            }
            BatchMode::ClassBalanced {
                classes_per_batch,
                samples_per_class,
            } => {
                let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); (MAX_LABEL + 1) as usize];
                for (i, &l) in labels.iter().enumerate() {
                    by_class[l as usize].push(i);
                }
                let mut classes: Vec<usize> = (0..by_class.len())
                    .filter(|&c| !by_class[c].is_empty())
                    .collect();
                let picks = classes_per_batch.min(classes.len());
                let batch_len = picks * samples_per_class;
                let n_batches = n.div_ceil(batch_len);
                let mut batches = Vec::with_capacity(n_batches);
                for _ in 0..n_batches {
                    classes.shuffle(&mut rng);
                    let mut batch = Vec::with_capacity(batch_len);
                    for &class in classes.iter().take(picks) {
                        let pool = &by_class[class];
                        if pool.len() >= samples_per_class {
                            let mut chosen: Vec<usize> = pool.clone();
                            chosen.shuffle(&mut rng);
                            batch.extend_from_slice(&chosen[..samples_per_class]);
                        } else {
                            for _ in 0..samples_per_class {
                                batch.push(pool[rng.gen_range(0..pool.len())]);
                            }
                        }
                    }
                    batches.push(batch);
                }
                Ok(batches)
            }
        }
    }
}
