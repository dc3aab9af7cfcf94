//! Dataset ingestion: CIFAR-10 binary files, deterministic synthetic
//! Gaussian-blob tasks, and a small binary container format used to export
//! batches (including adversarial ones) for offline inspection.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: truncated CIFAR-10 file ({len} bytes is not a multiple of 3073)")]
    Truncated { path: PathBuf, len: u64 },
    #[error("{path}: record {record} has label {label}, expected < 10")]
    BadLabel { path: PathBuf, record: usize, label: u8 },
    #[error("container {path}: {detail}")]
    BadContainer { path: PathBuf, detail: String },
    #[error("pixel {value} at index {index} outside [0, 1]")]
    PixelRange { index: usize, value: f64 },
    #[error("label {label} >= {classes} classes at sample {index}")]
    LabelRange { index: usize, label: usize, classes: usize },
    #[error("empty dataset")]
    Empty,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetMeta {
    pub source: String,
    /// Original class ids kept from the source, in dense-label order.
    pub class_subset: Option<Vec<usize>>,
}

/// Images in `[0,1]` with dense labels.
#[derive(Debug, Clone)]
pub struct DatasetContainer {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub meta: DatasetMeta,
}

impl DatasetContainer {
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        meta: DatasetMeta,
    ) -> Result<Self, DataError> {
        if images.shape().len() != 4 || images.shape()[0] != labels.len() {
            return Err(DataError::BadContainer {
                path: PathBuf::new(),
                detail: format!(
                    "images {:?} do not match {} labels",
                    images.shape(),
                    labels.len()
                ),
            });
        }
        if labels.is_empty() {
            return Err(DataError::Empty);
        }
        for (i, &v) in images.data().iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(DataError::PixelRange { index: i, value: v });
            }
        }
        for (i, &l) in labels.iter().enumerate() {
            if l >= num_classes {
                return Err(DataError::LabelRange { index: i, label: l, classes: num_classes });
            }
        }
        Ok(DatasetContainer { images, labels, num_classes, meta })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(channels, height, width)` of one image.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Gather rows into a batch tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let (c, h, w) = self.image_dims();
        let stride = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        (Tensor::new(data, vec![indices.len(), c, h, w]).expect("gather shape"), labels)
    }

    /// First `n` samples (deterministic evaluation subsets).
    pub fn take(&self, n: usize) -> DatasetContainer {
        let n = n.min(self.len());
        let indices: Vec<usize> = (0..n).collect();
        let (images, labels) = self.batch(&indices);
        DatasetContainer {
            images,
            labels,
            num_classes: self.num_classes,
            meta: self.meta.clone(),
        }
    }

    // ── Container format ───────────────────────────────────────────────
    //
    // magic "ABND", version byte, then u32 LE: M, C, H, W, num_classes,
    // M u32 labels, and M*C*H*W f64 LE pixels.

    const MAGIC: &'static [u8; 4] = b"ABND";
    const VERSION: u8 = 1;

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(Self::MAGIC);
        buf.push(Self::VERSION);
        let (c, h, w) = self.image_dims();
        for v in [self.len(), c, h, w, self.num_classes] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for &l in &self.labels {
            buf.extend_from_slice(&(l as u32).to_le_bytes());
        }
        for &p in self.images.data() {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        std::fs::write(path, buf).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let bad = |detail: String| DataError::BadContainer { path: path.to_path_buf(), detail };
        let mut file = std::fs::File::open(path).map_err(io_err(path))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(io_err(path))?;
        if bytes.len() < 25 || &bytes[0..4] != Self::MAGIC {
            return Err(bad("missing magic".into()));
        }
        if bytes[4] != Self::VERSION {
            return Err(bad(format!("unsupported version {}", bytes[4])));
        }
        let mut off = 5;
        let mut next_u32 = |bytes: &[u8]| -> Result<usize, DataError> {
            if off + 4 > bytes.len() {
                return Err(DataError::BadContainer {
                    path: path.to_path_buf(),
                    detail: "truncated header".into(),
                });
            }
            let v = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
            off += 4;
            Ok(v)
        };
        let m = next_u32(&bytes)?;
        let c = next_u32(&bytes)?;
        let h = next_u32(&bytes)?;
        let w = next_u32(&bytes)?;
        let num_classes = next_u32(&bytes)?;
        let mut labels = Vec::with_capacity(m);
        for _ in 0..m {
            labels.push(next_u32(&bytes)?);
        }
        let numel = m * c * h * w;
        if bytes.len() != off + numel * 8 {
            return Err(bad(format!(
                "expected {} data bytes, found {}",
                numel * 8,
                bytes.len() - off
            )));
        }
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let start = off + i * 8;
            data.push(f64::from_le_bytes(bytes[start..start + 8].try_into().unwrap()));
        }
        let images = Tensor::new(data, vec![m, c, h, w])
            .map_err(|e| bad(e.to_string()))?;
        DatasetContainer::new(
            images,
            labels,
            num_classes,
            DatasetMeta { source: format!("container:{}", path.display()), class_subset: None },
        )
    }
}

// ── CIFAR-10 binary format ──────────────────────────────────────────────

const CIFAR_RECORD: usize = 3073;
const CIFAR_PIXELS: usize = 3072;

/// Load one file in the CIFAR-10 binary layout: 3073-byte records holding a
/// label byte followed by 3072 pixel bytes (R, G, B planes, row-major
/// 32x32). Pixels are scaled to `[0,1]`; when `class_subset` is given,
/// records are filtered to it and labels remapped densely in ascending
/// original-class order.
pub fn load_cifar10_file(
    path: &Path,
    class_subset: Option<&[usize]>,
) -> Result<DatasetContainer, DataError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(DataError::Truncated { path: path.to_path_buf(), len: bytes.len() as u64 });
    }
    let subset: Option<Vec<usize>> = class_subset.map(|s| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v.dedup();
        v
    });
    let records = bytes.len() / CIFAR_RECORD;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for r in 0..records {
        let rec = &bytes[r * CIFAR_RECORD..(r + 1) * CIFAR_RECORD];
        let label = rec[0];
        if label >= 10 {
            return Err(DataError::BadLabel { path: path.to_path_buf(), record: r, label });
        }
        let dense = match &subset {
            Some(s) => match s.binary_search(&(label as usize)) {
                Ok(pos) => pos,
                Err(_) => continue,
            },
            None => label as usize,
        };
        labels.push(dense);
        data.extend(rec[1..=CIFAR_PIXELS].iter().map(|&b| b as f64 / 255.0));
    }
    if labels.is_empty() {
        return Err(DataError::Empty);
    }
    let m = labels.len();
    let images = Tensor::new(data, vec![m, 3, 32, 32]).expect("record arithmetic");
    let num_classes = subset.as_ref().map(|s| s.len()).unwrap_or(10);
    DatasetContainer::new(
        images,
        labels,
        num_classes,
        DatasetMeta { source: format!("cifar10:{}", path.display()), class_subset: subset },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarSplit {
    Train,
    Test,
}

/// Load the standard split from a directory holding `data_batch_1..5.bin`
/// and `test_batch.bin`.
pub fn load_cifar10_split(
    root: &Path,
    split: CifarSplit,
    class_subset: Option<&[usize]>,
) -> Result<DatasetContainer, DataError> {
    let files: Vec<PathBuf> = match split {
        CifarSplit::Train => (1..=5).map(|i| root.join(format!("data_batch_{i}.bin"))).collect(),
        CifarSplit::Test => vec![root.join("test_batch.bin")],
    };
    let mut merged: Option<DatasetContainer> = None;
    for f in files {
        let part = load_cifar10_file(&f, class_subset)?;
        merged = Some(match merged {
            None => part,
            Some(mut acc) => {
                let mut data = acc.images.data().to_vec();
                data.extend_from_slice(part.images.data());
                let m = acc.len() + part.len();
                acc.labels.extend_from_slice(&part.labels);
                DatasetContainer {
                    images: Tensor::new(data, vec![m, 3, 32, 32]).expect("concat shape"),
                    labels: acc.labels,
                    num_classes: acc.num_classes,
                    meta: acc.meta,
                }
            }
        });
    }
    merged.ok_or(DataError::Empty)
}

// ── Synthetic Gaussian-blob tasks ───────────────────────────────────────

/// One class of blob images: a Gaussian bump at a fixed fractional position.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobClass {
    /// `(row, col)` center as fractions of the image extent.
    pub center: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub samples: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: Vec<BlobClass>,
    /// Blob standard deviation in pixels.
    pub blob_sigma: f64,
    /// Peak amplitude added on top of the background.
    pub amplitude: f64,
    /// Per-pixel Gaussian noise deviation.
    pub noise_std: f64,
    pub background: f64,
    /// Declared lower bound on the L2 distance between class mean images.
    pub margin: f64,
    pub name: String,
}

impl SyntheticSpec {
    /// Pre-training task: blobs on the anti-diagonal.
    pub fn task_a(samples: usize, side: usize) -> Self {
        SyntheticSpec {
            samples,
            channels: 3,
            height: side,
            width: side,
            classes: vec![
                BlobClass { center: (0.3, 0.7) },
                BlobClass { center: (0.7, 0.3) },
            ],
            blob_sigma: side as f64 * 0.14,
            amplitude: 0.35,
            noise_std: 0.08,
            background: 0.45,
            margin: 0.5,
            name: "synthetic-a".into(),
        }
    }

    /// Target task: blobs on the main diagonal, disjoint from
    /// [`SyntheticSpec::task_a`].
    pub fn task_b(samples: usize, side: usize) -> Self {
        SyntheticSpec {
            classes: vec![
                BlobClass { center: (0.3, 0.3) },
                BlobClass { center: (0.7, 0.7) },
            ],
            name: "synthetic-b".into(),
            ..Self::task_a(samples, side)
        }
    }

    /// Noise-free image of one class.
    fn class_mean_image(&self, class: usize) -> Vec<f64> {
        let (cy, cx) = self.classes[class].center;
        let (cy, cx) = (cy * (self.height - 1) as f64, cx * (self.width - 1) as f64);
        let mut img = vec![0.0; self.channels * self.height * self.width];
        for ch in 0..self.channels {
            let scale = CHANNEL_SCALES[ch % CHANNEL_SCALES.len()];
            for i in 0..self.height {
                for j in 0..self.width {
                    let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
                    let bump = self.amplitude * scale * (-d2 / (2.0 * self.blob_sigma.powi(2))).exp();
                    img[(ch * self.height + i) * self.width + j] =
                        (self.background + bump).clamp(0.0, 1.0);
                }
            }
        }
        img
    }

    /// Analytic L2 distance between the noise-free class mean images.
    pub fn mean_separation(&self) -> f64 {
        let a = self.class_mean_image(0);
        let b = self.class_mean_image(1);
        a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }
}

const CHANNEL_SCALES: [f64; 3] = [1.0, 0.7, 0.4];

fn sample_normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller; both uniforms strictly inside (0, 1].
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Deterministic blob dataset: class labels round-robin, pixel noise and
/// nothing else varying per sample.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> DatasetContainer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = spec.classes.len();
    let per_image = spec.channels * spec.height * spec.width;
    let mut data = Vec::with_capacity(spec.samples * per_image);
    let mut labels = Vec::with_capacity(spec.samples);
    let means: Vec<Vec<f64>> = (0..classes).map(|c| spec.class_mean_image(c)).collect();
    for s in 0..spec.samples {
        let class = s % classes;
        labels.push(class);
        for &m in &means[class] {
            let v = m + spec.noise_std * sample_normal(&mut rng);
            data.push(v.clamp(0.0, 1.0));
        }
    }
    let images = Tensor::new(data, vec![spec.samples, spec.channels, spec.height, spec.width])
        .expect("synthetic shape");
    DatasetContainer::new(
        images,
        labels,
        classes,
        DatasetMeta { source: spec.name.clone(), class_subset: None },
    )
    .expect("synthetic construction keeps invariants")
}

/// Write a crafted single-record CIFAR-10 file (test fixtures).
pub fn write_cifar_fixture(
    path: &Path,
    records: &[(u8, [u8; CIFAR_PIXELS])],
) -> Result<(), DataError> {
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    for (label, pixels) in records {
        f.write_all(&[*label]).map_err(io_err(path))?;
        f.write_all(pixels).map_err(io_err(path))?;
    }
    Ok(())
}
