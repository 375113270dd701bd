//! Datasets: a deterministic synthetic shapes corpus, IDX ingestion, and
//! PNG directory corpora with JSON label manifests.
//!
//! Images are `[C, H, W]` tensors with values in `[0, 255]`. 16-bit PNG
//! sources are mapped with `v / 257`, the exact inverse of the 16-bit writer.

use crate::error::DataError;
use crate::rng::{derive_seed, Rng};
use crate::tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Test,
}

/// One split of labeled images, all the same shape.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub split: SplitTag,
    /// Where the data came from ("synthetic", a directory, an IDX path).
    pub provenance: String,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(
        images: Vec<Tensor>,
        labels: Vec<usize>,
        split: SplitTag,
        provenance: String,
        class_count: usize,
    ) -> Result<Self, DataError> {
        if images.len() != labels.len() {
            return Err(DataError::CountMismatch {
                images: images.len(),
                labels: labels.len(),
            });
        }
        if images.is_empty() {
            return Err(DataError::Empty);
        }
        let shape = images[0].shape().to_vec();
        for (i, img) in images.iter().enumerate() {
            if img.shape() != shape {
                return Err(DataError::InhomogeneousShapes {
                    index: i,
                    expected: shape,
                    found: img.shape().to_vec(),
                });
            }
        }
        for &label in &labels {
            if label >= class_count {
                return Err(DataError::LabelOutOfRange { label, class_count });
            }
        }
        Ok(Dataset {
            images,
            labels,
            split,
            provenance,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        self.images[0].shape()
    }

    /// New dataset holding the given sample indices, in order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
            provenance: self.provenance.clone(),
            class_count: self.class_count,
        }
    }
}

/// Train and test splits of the same source.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Dataset,
    pub test: Dataset,
}

/// Synthetic shapes: 28x28 grayscale, four classes (disk, square, cross,
/// ring) with jittered position, size, rotation, contrast, and pixel noise.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            train_count: 4000,
            test_count: 1000,
            seed: 7,
        }
    }
}

pub const SYNTHETIC_CLASSES: usize = 4;
pub const SYNTHETIC_SIDE: usize = 28;

/// Generates the synthetic corpus. Every sample is a pure function of
/// `(seed, split, index)`, so regeneration is bit-identical and order-free.
pub fn synthetic_corpus(cfg: &SyntheticConfig) -> Result<Corpus, DataError> {
    let make = |count: usize, split: SplitTag, salt: u64| -> Result<Dataset, DataError> {
        let mut images = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        for idx in 0..count {
            let label = idx % SYNTHETIC_CLASSES;
            images.push(synthetic_sample(
                derive_seed(cfg.seed, salt, idx as u64),
                label,
            ));
            labels.push(label);
        }
        Dataset::new(
            images,
            labels,
            split,
            "synthetic".to_string(),
            SYNTHETIC_CLASSES,
        )
    };
    Ok(Corpus {
        train: make(cfg.train_count, SplitTag::Train, 0x7261_494e)?,
        test: make(cfg.test_count, SplitTag::Test, 0x7465_5354)?,
    })
}

/// Draws a single synthetic sample outside any corpus: callers that want
/// one-off images (demos, fixtures) pick the seed and label directly.
pub fn synthetic_image(seed: u64, label: usize) -> Tensor {
    synthetic_sample(seed, label)
}

/// Draws one sample. Shapes are rendered with soft (coverage) edges so pixel
/// gradients near boundaries carry signal.
fn synthetic_sample(seed: u64, label: usize) -> Tensor {
    let side = SYNTHETIC_SIDE;
    let mut rng = Rng::seed(seed);
    let cx = 13.5 + rng.uniform(-3.0, 3.0);
    let cy = 13.5 + rng.uniform(-3.0, 3.0);
    let size = rng.uniform(5.0, 8.5);
    let theta = rng.uniform(0.0, std::f64::consts::FRAC_PI_2 as Real);
    let fg = rng.uniform(170.0, 250.0);
    let bg = rng.uniform(5.0, 45.0);
    let noise = rng.uniform(3.0, 9.0);
    let (sin_t, cos_t) = (theta.sin(), theta.cos());
    let thick = (size * 0.35).max(1.2);

    let soft = |signed_dist: Real| (0.5 - signed_dist).clamp(0.0, 1.0);
    let mut data = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            let dx = x as Real - cx;
            let dy = y as Real - cy;
            // Rotated frame for the square and the cross.
            let u = dx * cos_t + dy * sin_t;
            let v = -dx * sin_t + dy * cos_t;
            let r = (dx * dx + dy * dy).sqrt();
            let alpha = match label {
                0 => soft(r - size),
                1 => soft(u.abs().max(v.abs()) - size),
                2 => {
                    let bar_a = (u.abs() - size).max(v.abs() - thick);
                    let bar_b = (v.abs() - size).max(u.abs() - thick);
                    soft(bar_a).max(soft(bar_b))
                }
                _ => soft((r - size).abs() - thick / 2.0),
            };
            let value = bg + (fg - bg) * alpha + rng.normal(0.0, noise);
            data[y * side + x] = value.clamp(0.0, 255.0);
        }
    }
    Tensor::raw(vec![1, side, side], data)
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
    Ok(buf)
}

fn be_u32(buf: &[u8], at: usize, path: &Path) -> Result<u32, DataError> {
    buf.get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::Truncated {
            path: path.display().to_string(),
        })
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Loads an IDX image/label file pair (the MNIST container format).
/// `class_count` defaults to `max label + 1` when not given.
pub fn load_idx(
    images_path: &Path,
    labels_path: &Path,
    split: SplitTag,
    class_count: Option<usize>,
) -> Result<Dataset, DataError> {
    let ibuf = read_file(images_path)?;
    let magic = be_u32(&ibuf, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::IdxMagic {
            path: images_path.display().to_string(),
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let count = be_u32(&ibuf, 4, images_path)? as usize;
    let rows = be_u32(&ibuf, 8, images_path)? as usize;
    let cols = be_u32(&ibuf, 12, images_path)? as usize;
    let pixels = ibuf
        .get(16..16 + count * rows * cols)
        .ok_or_else(|| DataError::Truncated {
            path: images_path.display().to_string(),
        })?;

    let lbuf = read_file(labels_path)?;
    let magic = be_u32(&lbuf, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::IdxMagic {
            path: labels_path.display().to_string(),
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let lcount = be_u32(&lbuf, 4, labels_path)? as usize;
    let labels_raw = lbuf
        .get(8..8 + lcount)
        .ok_or_else(|| DataError::Truncated {
            path: labels_path.display().to_string(),
        })?;
    if lcount != count {
        return Err(DataError::CountMismatch {
            images: count,
            labels: lcount,
        });
    }

    let images = (0..count)
        .map(|i| {
            let plane = &pixels[i * rows * cols..(i + 1) * rows * cols];
            Tensor::raw(
                vec![1, rows, cols],
                plane.iter().map(|&b| b as Real).collect(),
            )
        })
        .collect();
    let labels: Vec<usize> = labels_raw.iter().map(|&b| b as usize).collect();
    let classes =
        class_count.unwrap_or_else(|| labels.iter().copied().max().map_or(0, |m| m + 1));
    Dataset::new(
        images,
        labels,
        split,
        images_path.display().to_string(),
        classes,
    )
}

/// Label manifest stored next to a directory of PNGs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LabelManifest {
    pub classes: usize,
    /// File name (relative to the directory) to class index.
    pub labels: BTreeMap<String, usize>,
}

pub const LABELS_FILE: &str = "labels.json";

/// Reads the tensor form of a PNG (8- or 16-bit, gray or RGB).
pub fn read_png(path: &Path) -> Result<Tensor, DataError> {
    let img = image::open(path).map_err(|e| DataError::Malformed {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let to_chw = |channels: usize, data: Vec<Real>| -> Tensor {
        // Interleaved rows -> planar [C, H, W].
        let mut out = vec![0.0; channels * h * w];
        for y in 0..h {
            for x in 0..w {
                for c in 0..channels {
                    out[(c * h + y) * w + x] = data[(y * w + x) * channels + c];
                }
            }
        }
        Tensor::raw(vec![channels, h, w], out)
    };
    use image::DynamicImage as D;
    Ok(match img {
        D::ImageLuma8(i) => to_chw(1, i.into_raw().iter().map(|&v| v as Real).collect()),
        D::ImageLuma16(i) => to_chw(
            1,
            i.into_raw().iter().map(|&v| v as Real / 257.0).collect(),
        ),
        D::ImageRgb8(i) => to_chw(3, i.into_raw().iter().map(|&v| v as Real).collect()),
        D::ImageRgb16(i) => to_chw(
            3,
            i.into_raw().iter().map(|&v| v as Real / 257.0).collect(),
        ),
        other => {
            let rgb = other.into_rgb8();
            to_chw(3, rgb.into_raw().iter().map(|&v| v as Real).collect())
        }
    })
}

fn planar_to_interleaved<T>(t: &Tensor, convert: impl Fn(Real) -> T) -> (u32, u32, usize, Vec<T>) {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut out = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.push(convert(t.data()[(ch * h + y) * w + x]));
            }
        }
    }
    (w as u32, h as u32, c, out)
}

fn image_error(path: &Path, e: image::ImageError) -> DataError {
    DataError::Malformed {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

/// Writes an 8-bit PNG; values are rounded and clamped to `[0, 255]`.
pub fn write_png_u8(path: &Path, t: &Tensor) -> Result<(), DataError> {
    let (w, h, c, data) =
        planar_to_interleaved(t, |v| v.round().clamp(0.0, 255.0) as u8);
    match c {
        1 => image::GrayImage::from_raw(w, h, data)
            .expect("sized buffer")
            .save(path)
            .map_err(|e| image_error(path, e)),
        3 => image::RgbImage::from_raw(w, h, data)
            .expect("sized buffer")
            .save(path)
            .map_err(|e| image_error(path, e)),
        _ => Err(DataError::Malformed {
            path: path.display().to_string(),
            reason: format!("cannot encode {c}-channel image"),
        }),
    }
}

/// Writes a 16-bit PNG with `v * 257` quantization, the lossless carrier for
/// fractional adversarial pixels. `round(255 * 257) = 65535`, so 8-bit
/// sources survive a write/read round trip bit-exactly.
pub fn write_png_u16(path: &Path, t: &Tensor) -> Result<(), DataError> {
    let (w, h, c, data) = planar_to_interleaved(t, |v| {
        (v * 257.0).round().clamp(0.0, 65535.0) as u16
    });
    match c {
        1 => image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(w, h, data)
            .expect("sized buffer")
            .save(path)
            .map_err(|e| image_error(path, e)),
        3 => image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::from_raw(w, h, data)
            .expect("sized buffer")
            .save(path)
            .map_err(|e| image_error(path, e)),
        _ => Err(DataError::Malformed {
            path: path.display().to_string(),
            reason: format!("cannot encode {c}-channel image"),
        }),
    }
}

/// Loads a directory of PNGs with a `labels.json` manifest.
pub fn load_png_corpus(dir: &Path, split: SplitTag) -> Result<Dataset, DataError> {
    let manifest_path = dir.join(LABELS_FILE);
    let manifest: LabelManifest = serde_json::from_slice(&read_file(&manifest_path)?)
        .map_err(|e| DataError::Malformed {
            path: manifest_path.display().to_string(),
            reason: e.to_string(),
        })?;
    let mut images = Vec::with_capacity(manifest.labels.len());
    let mut labels = Vec::with_capacity(manifest.labels.len());
    // BTreeMap iteration gives a stable name order.
    for (name, &label) in &manifest.labels {
        images.push(read_png(&dir.join(name))?);
        labels.push(label);
    }
    Dataset::new(
        images,
        labels,
        split,
        dir.display().to_string(),
        manifest.classes,
    )
}

/// Writes a dataset as 8-bit PNGs plus a `labels.json` manifest, producing a
/// directory that `load_png_corpus` accepts.
pub fn export_png_corpus(dataset: &Dataset, dir: &Path) -> Result<(), DataError> {
    std::fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut labels = BTreeMap::new();
    for (i, (img, &label)) in dataset.images.iter().zip(&dataset.labels).enumerate() {
        let name = format!("{i:06}.png");
        write_png_u8(&dir.join(&name), img)?;
        labels.insert(name, label);
    }
    let manifest = LabelManifest {
        classes: dataset.class_count,
        labels,
    };
    let path = dir.join(LABELS_FILE);
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest).expect("serializable"))
        .map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}
