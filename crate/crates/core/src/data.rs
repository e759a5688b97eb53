//! Dataset loading and the synthetic benchmark task.
//!
//! Real data enters through IDX files (the classic big-endian ubyte format:
//! magic `0x00000803` for `[n, rows, cols]` images, `0x00000801` for label
//! vectors). Pixels map to `[-1, 1]` via `x / 127.5 - 1`, matching the
//! generator's tanh output range.
//!
//! The synthetic task is a ring of Gaussian blobs in 2-D: class means evenly
//! spaced on a circle of radius 0.7, isotropic spread, classified perfectly
//! by a small MLP. Samples are written through the same IDX + quantization
//! path as image data so the whole pipeline is exercised end to end.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::rng::{stream_rng, Stream};
use crate::{Error, Result};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

pub const TRAIN_IMAGES: &str = "train-images";
pub const TRAIN_LABELS: &str = "train-labels";
pub const TEST_IMAGES: &str = "test-images";
pub const TEST_LABELS: &str = "test-labels";

/// An in-memory labelled split with samples already scaled to `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// `[n, ...sample_shape]`.
    pub images: ArrayD<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Reshapes samples to the model's per-sample shape (total size must
    /// agree); loaders keep the on-disk `[n, rows, cols]` layout.
    pub fn to_model_shape(&self, sample_shape: &[usize]) -> Result<Dataset> {
        let n = self.len();
        let have: usize = self.images.len() / n.max(1);
        let want: usize = sample_shape.iter().product();
        if have != want {
            return Err(Error::Data(format!(
                "cannot reshape samples of {have} values to {sample_shape:?}"
            )));
        }
        let mut shape = vec![n];
        shape.extend_from_slice(sample_shape);
        let images = self
            .images
            .clone()
            .into_shape_with_order(IxDyn(&shape))
            .map_err(|e| Error::Data(format!("reshape failed: {e}")))?;
        Ok(Dataset {
            images,
            labels: self.labels.clone(),
            num_classes: self.num_classes,
        })
    }

    /// Rows picked by index, preserving sample shape.
    pub fn gather(&self, idx: &[usize]) -> ArrayD<f64> {
        gather_rows(&self.images, idx)
    }
}

pub fn gather_rows(images: &ArrayD<f64>, idx: &[usize]) -> ArrayD<f64> {
    let sample: usize = images.shape()[1..].iter().product();
    let flat = images.as_slice().expect("contiguous image storage");
    let mut out = Vec::with_capacity(idx.len() * sample);
    for &i in idx {
        out.extend_from_slice(&flat[i * sample..(i + 1) * sample]);
    }
    let mut shape = vec![idx.len()];
    shape.extend_from_slice(&images.shape()[1..]);
    ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap()
}

/// Shuffled minibatch index lists covering `0..n` exactly once.
pub fn minibatches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    assert!(batch >= 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch).map(|c| c.to_vec()).collect()
}

pub fn read_idx_images(path: &Path) -> Result<ArrayD<f64>> {
    let mut r = BufReader::new(
        File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?,
    );
    let magic = r
        .read_u32::<BigEndian>()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Data(format!(
            "{}: bad image magic {magic:#010x}",
            path.display()
        )));
    }
    let n = r.read_u32::<BigEndian>().map_err(map_data(path))? as usize;
    let rows = r.read_u32::<BigEndian>().map_err(map_data(path))? as usize;
    let cols = r.read_u32::<BigEndian>().map_err(map_data(path))? as usize;
    let mut buf = vec![0u8; n * rows * cols];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Data(format!("{}: truncated image payload: {e}", path.display())))?;
    let data: Vec<f64> = buf.iter().map(|&b| b as f64 / 127.5 - 1.0).collect();
    Ok(ArrayD::from_shape_vec(IxDyn(&[n, rows, cols]), data).unwrap())
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let mut r = BufReader::new(
        File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?,
    );
    let magic = r.read_u32::<BigEndian>().map_err(map_data(path))?;
    if magic != LABEL_MAGIC {
        return Err(Error::Data(format!(
            "{}: bad label magic {magic:#010x}",
            path.display()
        )));
    }
    let n = r.read_u32::<BigEndian>().map_err(map_data(path))? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Data(format!("{}: truncated label payload: {e}", path.display())))?;
    Ok(buf.into_iter().map(|b| b as usize).collect())
}

fn map_data(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Data(format!("{}: {e}", path.display()))
}

/// Quantizes `[-1, 1]` samples to ubyte and writes them as `[n, rows, cols]`
/// IDX; inputs with other sample ranks are flattened into the `cols` axis.
pub fn write_idx_images(path: &Path, images: &ArrayD<f64>) -> Result<()> {
    let sh = images.shape();
    let n = sh[0];
    let (rows, cols) = match sh.len() {
        3 => (sh[1], sh[2]),
        2 => (1, sh[1]),
        _ => (1, sh[1..].iter().product()),
    };
    let mut w = BufWriter::new(File::create(path)?);
    w.write_u32::<BigEndian>(IMAGE_MAGIC)?;
    w.write_u32::<BigEndian>(n as u32)?;
    w.write_u32::<BigEndian>(rows as u32)?;
    w.write_u32::<BigEndian>(cols as u32)?;
    for &v in images.iter() {
        let q = ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
        w.write_all(&[q])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l > 255) {
        return Err(Error::Data(format!("label {bad} does not fit in a byte")));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_u32::<BigEndian>(LABEL_MAGIC)?;
    w.write_u32::<BigEndian>(labels.len() as u32)?;
    for &l in labels {
        w.write_all(&[l as u8])?;
    }
    w.flush()?;
    Ok(())
}

/// Loads the `train-images` / `train-labels` / `test-images` / `test-labels`
/// quartet from a directory.
pub fn load_idx_pair(dir: &Path) -> Result<(Dataset, Dataset)> {
    let load = |img: &str, lab: &str| -> Result<Dataset> {
        let images = read_idx_images(&dir.join(img))?;
        let labels = read_idx_labels(&dir.join(lab))?;
        if images.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "{img}: {} images vs {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        let num_classes = labels.iter().max().map_or(0, |m| m + 1);
        Ok(Dataset {
            images,
            labels,
            num_classes,
        })
    };
    let mut train = load(TRAIN_IMAGES, TRAIN_LABELS)?;
    let mut test = load(TEST_IMAGES, TEST_LABELS)?;
    let classes = train.num_classes.max(test.num_classes);
    train.num_classes = classes;
    test.num_classes = classes;
    Ok((train, test))
}

pub const RING_RADIUS: f64 = 0.7;

/// Ring-of-Gaussians task: `classes` means on a circle of radius
/// [`RING_RADIUS`], isotropic `spread`, `per_class` samples each, split
/// 80/20 into train/test. Coordinates are clamped to `[-1, 1]`.
pub fn make_synthetic_dataset(
    seed: u64,
    classes: usize,
    per_class: usize,
    spread: f64,
) -> (Dataset, Dataset) {
    assert!(classes >= 2 && per_class >= 5);
    let mut rng = stream_rng(seed, Stream::Synthetic);
    let mut points: Vec<(f64, f64, usize)> = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let ang = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
        let (mx, my) = (RING_RADIUS * ang.cos(), RING_RADIUS * ang.sin());
        for _ in 0..per_class {
            let dx: f64 = rand_distr::StandardNormal.sample(&mut rng);
            let dy: f64 = rand_distr::StandardNormal.sample(&mut rng);
            let x = (mx + spread * dx).clamp(-1.0, 1.0);
            let y = (my + spread * dy).clamp(-1.0, 1.0);
            points.push((x, y, c));
        }
    }
    let mut shuffle_rng = stream_rng(seed, Stream::DataShuffle);
    points.shuffle(&mut shuffle_rng);
    let n_train = points.len() * 4 / 5;
    let build = |pts: &[(f64, f64, usize)]| {
        let mut data = Vec::with_capacity(pts.len() * 2);
        let mut labels = Vec::with_capacity(pts.len());
        for &(x, y, c) in pts {
            data.push(x);
            data.push(y);
            labels.push(c);
        }
        Dataset {
            images: ArrayD::from_shape_vec(IxDyn(&[pts.len(), 1, 2]), data).unwrap(),
            labels,
            num_classes: classes,
        }
    };
    (build(&points[..n_train]), build(&points[n_train..]))
}

/// Where a replay/distillation batch came from; the engine logs this with
/// its counters and the memory bank stores it alongside samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchSource {
    Generator,
    MemoryBank,
    GenerativeReplay,
}

#[derive(Debug, Clone)]
pub struct PseudoBatch {
    pub samples: ArrayD<f64>,
    pub source: BatchSource,
}

impl PseudoBatch {
    pub fn new(samples: ArrayD<f64>, source: BatchSource) -> Self {
        assert!(!samples.is_empty(), "pseudo batch must hold samples");
        Self { samples, source }
    }

    pub fn len(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
