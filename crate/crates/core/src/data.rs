//! MNIST IDX, CIFAR-10 binary and synthetic datasets as `f64` tensors in `[0, 1]`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    MnistIdx,
    Cifar10Bin,
    Synthetic,
}

impl DataFormat {
    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "mnist_idx" | "mnist" => Ok(DataFormat::MnistIdx),
            "cifar10_bin" | "cifar10" => Ok(DataFormat::Cifar10Bin),
            "synthetic" => Ok(DataFormat::Synthetic),
            _ => Err(Error::invalid(
                "format",
                format!("unknown dataset format '{s}'"),
            )),
        }
    }
    pub fn name(self) -> &'static str {
        match self {
            DataFormat::MnistIdx => "mnist_idx",
            DataFormat::Cifar10Bin => "cifar10_bin",
            DataFormat::Synthetic => "synthetic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `(N, C, H, W)`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.shape().len() != 4 || images.batch() != labels.len() {
            return Err(Error::Shape(format!(
                "{:?} images do not match {} labels",
                images.shape(),
                labels.len()
            )));
        }
        if labels.iter().any(|&y| y >= classes) {
            return Err(Error::Format(format!(
                "label out of range for {classes} classes"
            )));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of one sample, `(C, H, W)`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn gather(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.images.gather(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// First `n` samples (or all, if fewer).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.gather(&idx);
        Dataset {
            images,
            labels,
            classes: self.classes,
        }
    }

    /// Copy in a seeded random order.
    pub fn shuffled(&self, seed: u64) -> Dataset {
        let perm = rng::permutation(&mut rng::seeded(seed), self.len());
        let (images, labels) = self.gather(&perm);
        Dataset {
            images,
            labels,
            classes: self.classes,
        }
    }
}

/// Minibatch index lists for one epoch, in a seeded order; the last batch may be short.
pub fn epoch_batches(n: usize, batch: usize, seed: u64) -> Vec<Vec<usize>> {
    let perm = rng::permutation(&mut rng::seeded(seed), n);
    perm.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

fn be_u32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(b[at..at + 4].try_into().unwrap())
}

/// IDX image file (magic 0x0803): returns `(N, 1, rows, cols)` scaled to `[0, 1]`.
pub fn read_idx_images(path: &Path) -> Result<Tensor> {
    let b = read(path)?;
    let bad = |why: &str| Error::Format(format!("{}: {why}", path.display()));
    if b.len() < 16 || be_u32(&b, 0) != 0x0803 {
        return Err(bad("not an IDX image file (magic 0x00000803)"));
    }
    let (n, r, c) = (
        be_u32(&b, 4) as usize,
        be_u32(&b, 8) as usize,
        be_u32(&b, 12) as usize,
    );
    if b.len() != 16 + n * r * c {
        return Err(bad(&format!(
            "expected {} bytes for {n}x{r}x{c}, found {}",
            16 + n * r * c,
            b.len()
        )));
    }
    let data = b[16..].iter().map(|&v| v as f64 / 255.0).collect();
    Tensor::from_vec(&[n, 1, r, c], data)
}

/// IDX label file (magic 0x0801).
pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let b = read(path)?;
    let bad = |why: &str| Error::Format(format!("{}: {why}", path.display()));
    if b.len() < 8 || be_u32(&b, 0) != 0x0801 {
        return Err(bad("not an IDX label file (magic 0x00000801)"));
    }
    let n = be_u32(&b, 4) as usize;
    if b.len() != 8 + n {
        return Err(bad(&format!("expected {} bytes, found {}", 8 + n, b.len())));
    }
    Ok(b[8..].iter().map(|&v| v as usize).collect())
}

fn mnist_files(split: Split) -> (&'static str, &'static str) {
    match split {
        Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    }
}

/// MNIST from a directory holding the four standard uncompressed IDX files.
pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let (img, lab) = mnist_files(split);
    let images = read_idx_images(&dir.join(img))?;
    let labels = read_idx_labels(&dir.join(lab))?;
    Dataset::new(images, labels, 10)
}

pub const CIFAR_RECORD: usize = 3073;

/// One or more CIFAR-10 binary batch files concatenated.
pub fn load_cifar10(files: &[PathBuf]) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let b = read(f)?;
        if b.is_empty() || b.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format(format!(
                "{}: size {} is not a multiple of the {CIFAR_RECORD}-byte record",
                f.display(),
                b.len()
            )));
        }
        for rec in b.chunks(CIFAR_RECORD) {
            labels.push(rec[0] as usize);
            pixels.extend(rec[1..].iter().map(|&v| v as f64 / 255.0));
        }
    }
    let n = labels.len();
    Dataset::new(Tensor::from_vec(&[n, 3, 32, 32], pixels)?, labels, 10)
}

fn cifar_files(dir: &Path, split: Split) -> Vec<PathBuf> {
    match split {
        Split::Train => (1..=5)
            .map(|i| dir.join(format!("data_batch_{i}.bin")))
            .collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    }
}

/// Two classes of 8×8 single-channel images: pixel means 0.25 or 0.75, noise σ = 0.1.
pub fn synthetic(n: usize, seed: u64) -> Result<Dataset> {
    let mut r = rng::stream(seed, &[0x5359_4e54]);
    let noise = rng::standard_normals(&mut r, n * 64);
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let data = noise
        .iter()
        .enumerate()
        .map(|(j, z)| {
            let mean = if labels[j / 64] == 0 { 0.25 } else { 0.75 };
            mean + 0.1 * z
        })
        .collect();
    Dataset::new(Tensor::from_vec(&[n, 1, 8, 8], data)?, labels, 2)
}

/// Loads `split` of a dataset rooted at `root` in the given format.
///
/// Synthetic sets ignore `root`; the test split uses a different seed.
pub fn load(root: &Path, format: DataFormat, split: Split, seed: u64) -> Result<Dataset> {
    match format {
        DataFormat::MnistIdx => load_mnist(root, split),
        DataFormat::Cifar10Bin => load_cifar10(&cifar_files(root, split)),
        DataFormat::Synthetic => match split {
            Split::Train => synthetic(2000, seed),
            Split::Test => synthetic(500, seed ^ 0x7e57),
        },
    }
}

/// Dataset root: `explicit` if given, else `$UNIQ_DATA_DIR/<sub>`.
pub fn resolve_root(explicit: Option<&Path>, sub: &str) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    let base = std::env::var_os("UNIQ_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"));
    base.join(sub)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_idx(dir: &Path) {
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        img.extend([0u8, 255, 51, 102, 1, 2, 3, 4]);
        fs::write(dir.join("train-images-idx3-ubyte"), img).unwrap();
        fs::write(
            dir.join("train-labels-idx1-ubyte"),
            [0, 0, 8, 1, 0, 0, 0, 2, 7, 3],
        )
        .unwrap();
    }

    #[test]
    fn idx_round_trip() {
        let d = tempfile::tempdir().unwrap();
        write_idx(d.path());
        let ds = load_mnist(d.path(), Split::Train).unwrap();
        assert_eq!(ds.images.shape(), &[2, 1, 2, 2]);
        assert_eq!(&ds.images.data()[..4], &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(ds.labels, vec![7, 3]);
    }

    #[test]
    fn idx_bad_magic_and_truncation() {
        let d = tempfile::tempdir().unwrap();
        fs::write(d.path().join("x"), [0u8, 0, 8, 1, 0, 0, 0, 1]).unwrap();
        assert!(matches!(
            read_idx_images(&d.path().join("x")),
            Err(Error::Format(_))
        ));
        fs::write(d.path().join("y"), [0u8, 0, 8, 1, 0, 0, 0, 3, 1]).unwrap();
        assert!(matches!(
            read_idx_labels(&d.path().join("y")),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            read_idx_labels(&d.path().join("missing")),
            Err(Error::Io(_))
        ));
    }

    #[test]
    fn cifar_records() {
        let d = tempfile::tempdir().unwrap();
        let mut b = vec![0u8; 2 * CIFAR_RECORD];
        b[0] = 3;
        b[CIFAR_RECORD] = 9;
        b[CIFAR_RECORD + 1] = 255;
        let p = d.path().join("b.bin");
        fs::write(&p, &b).unwrap();
        let ds = load_cifar10(std::slice::from_ref(&p)).unwrap();
        assert_eq!(ds.images.shape(), &[2, 3, 32, 32]);
        assert_eq!(ds.labels, vec![3, 9]);
        assert_eq!(ds.images.sample(1)[0], 1.0);
        fs::write(&p, &b[..100]).unwrap();
        assert!(load_cifar10(&[p]).is_err());
    }

    #[test]
    fn synthetic_is_separable_by_mean() {
        let ds = synthetic(400, 3).unwrap();
        for i in 0..ds.len() {
            let m = ds.images.sample(i).iter().sum::<f64>() / 64.0;
            assert_eq!(ds.labels[i], usize::from(m > 0.5));
        }
    }

    #[test]
    fn batches_cover_once() {
        let b = epoch_batches(10, 3, 1);
        assert_eq!(b.len(), 4);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }
}
