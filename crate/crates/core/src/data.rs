//! Datasets: IDX image/label files framed row by row into timestep
//! sequences, a synthetic temporal-pattern task, and seeded batching.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::{Rng, Vector};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxHeader {
    pub magic: u32,
    pub dims: Vec<u32>,
}

impl IdxHeader {
    fn payload_len(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }
}

/// Splits an IDX byte stream into header and payload, requiring `magic`.
pub fn parse_idx(bytes: &[u8], expected_magic: u32, path: &Path) -> Result<(IdxHeader, Vec<u8>)> {
    let format = |message: String| Error::IdxFormat {
        path: path.to_path_buf(),
        message,
    };
    let word = |i: usize| -> Option<u32> {
        bytes
            .get(i * 4..i * 4 + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    };
    let magic = word(0).ok_or_else(|| format("file shorter than the magic number".into()))?;
    if magic != expected_magic {
        return Err(format(format!(
            "magic {magic:#010x}, expected {expected_magic:#010x}"
        )));
    }
    if magic >> 8 != 0x08 {
        return Err(format(format!(
            "unsupported element type in magic {magic:#010x}"
        )));
    }
    let ndims = (magic & 0xff) as usize;
    let dims: Vec<u32> = (1..=ndims)
        .map(word)
        .collect::<Option<_>>()
        .ok_or_else(|| format("header truncated".into()))?;
    let header = IdxHeader { magic, dims };
    let offset = 4 * (1 + ndims);
    let expected = header.payload_len();
    let payload = &bytes[offset..];
    if payload.len() < expected {
        return Err(Error::IdxLength {
            path: path.to_path_buf(),
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(format(format!(
            "{} trailing bytes after payload",
            payload.len() - expected
        )));
    }
    Ok((header, payload.to_vec()))
}

/// Serializes a header and payload back to IDX bytes.
pub fn encode_idx(header: &IdxHeader, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 * (1 + header.dims.len()) + payload.len());
    out.extend_from_slice(&header.magic.to_be_bytes());
    for d in &header.dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

/// Grayscale images with one label each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImages {
    pub rows: usize,
    pub cols: usize,
    /// One `rows * cols` row-major byte grid per image.
    pub images: Vec<Vec<u8>>,
    pub labels: Vec<u8>,
}

impl RawImages {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// First `n` images (or all of them).
    pub fn truncate(mut self, n: usize) -> Self {
        self.images.truncate(n);
        self.labels.truncate(n);
        self
    }

    /// IDX bytes of the image and label files.
    pub fn to_idx(&self) -> (Vec<u8>, Vec<u8>) {
        let n = self.images.len() as u32;
        let images = encode_idx(
            &IdxHeader {
                magic: IDX_IMAGES_MAGIC,
                dims: vec![n, self.rows as u32, self.cols as u32],
            },
            &self.images.concat(),
        );
        let labels = encode_idx(
            &IdxHeader {
                magic: IDX_LABELS_MAGIC,
                dims: vec![n],
            },
            &self.labels,
        );
        (images, labels)
    }

    pub fn write_idx(&self, images_path: &Path, labels_path: &Path) -> Result<()> {
        let (images, labels) = self.to_idx();
        std::fs::write(images_path, images).map_err(|e| Error::io(images_path, e))?;
        std::fs::write(labels_path, labels).map_err(|e| Error::io(labels_path, e))
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Decodes an image file and a label file already in memory.
pub fn decode_idx_pair(
    image_bytes: &[u8],
    label_bytes: &[u8],
    images_path: &Path,
    labels_path: &Path,
) -> Result<RawImages> {
    let (ih, pixels) = parse_idx(image_bytes, IDX_IMAGES_MAGIC, images_path)?;
    let (lh, labels) = parse_idx(label_bytes, IDX_LABELS_MAGIC, labels_path)?;
    if ih.dims.len() != 3 {
        return Err(Error::IdxFormat {
            path: images_path.to_path_buf(),
            message: format!("expected 3 dimensions, found {}", ih.dims.len()),
        });
    }
    let (n, rows, cols) = (
        ih.dims[0] as usize,
        ih.dims[1] as usize,
        ih.dims[2] as usize,
    );
    if lh.dims[0] as usize != n {
        return Err(Error::IdxCount {
            images: n,
            labels: lh.dims[0] as usize,
        });
    }
    let images = if rows * cols == 0 {
        vec![Vec::new(); n]
    } else {
        pixels.chunks(rows * cols).map(<[u8]>::to_vec).collect()
    };
    Ok(RawImages {
        rows,
        cols,
        images,
        labels,
    })
}

/// Reads an IDX image file (magic 2051) and label file (magic 2049).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<RawImages> {
    decode_idx_pair(
        &read(images_path)?,
        &read(labels_path)?,
        images_path,
        labels_path,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub frames: Vec<Vector>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub input_width: usize,
    pub timesteps: usize,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Splits off the samples from `at` onward as a second dataset.
    pub fn split_at(mut self, at: usize) -> (Dataset, Dataset) {
        let tail = self.samples.split_off(at.min(self.samples.len()));
        let rest = Dataset {
            samples: tail,
            ..self.clone_header()
        };
        (self, rest)
    }

    fn clone_header(&self) -> Dataset {
        Dataset {
            samples: Vec::new(),
            input_width: self.input_width,
            timesteps: self.timesteps,
            classes: self.classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }
}

/// One row per timestep, pixels scaled by 1/255.
///
/// The class count is one past the largest label, and at least 10 for
/// digit data.
pub fn frame_rows(images: &RawImages) -> Dataset {
    let samples = images
        .images
        .iter()
        .zip(&images.labels)
        .map(|(img, &label)| Sample {
            frames: img
                .chunks(images.cols.max(1))
                .map(|row| {
                    row.iter()
                        .map(|&p| p as f64 / 255.0)
                        .collect::<Vec<_>>()
                        .into()
                })
                .collect(),
            label: label as usize,
        })
        .collect();
    let classes = images
        .labels
        .iter()
        .map(|&l| l as usize + 1)
        .max()
        .unwrap_or(0)
        .max(10);
    Dataset {
        samples,
        input_width: images.cols,
        timesteps: images.rows,
        classes,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub samples: usize,
    pub timesteps: usize,
    pub width: usize,
    pub classes: usize,
    /// Bit-flip probability of the template during the late window.
    pub late_flip: f64,
}

impl SynthConfig {
    pub fn new(samples: usize, timesteps: usize, width: usize, classes: usize) -> Self {
        SynthConfig {
            samples,
            timesteps,
            width,
            classes,
            late_flip: 0.1,
        }
    }
}

/// Temporal pattern task.
///
/// Each class has a fixed random binary template. A sample shows pure noise
/// (every template bit flipped with probability 0.5) for `t < T/2` and its
/// class template with `late_flip` noise for `t >= T/2`. Labels cycle
/// round-robin through the classes.
pub fn synth_pattern(rng: &mut Rng, cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.classes == 0 || cfg.width == 0 || cfg.timesteps == 0 {
        return Err(Error::Config(
            "synthetic task needs positive classes, width and timesteps".into(),
        ));
    }
    if cfg.width < usize::BITS as usize && cfg.classes > 1usize << cfg.width {
        return Err(Error::Config(format!(
            "{} classes cannot have distinct binary templates of width {}",
            cfg.classes, cfg.width
        )));
    }
    let mut templates: Vec<Vec<bool>> = Vec::with_capacity(cfg.classes);
    while templates.len() < cfg.classes {
        let t: Vec<bool> = (0..cfg.width).map(|_| rng.bernoulli(0.5)).collect();
        if !templates.contains(&t) {
            templates.push(t);
        }
    }
    let late_start = cfg.timesteps / 2;
    let samples = (0..cfg.samples)
        .map(|i| {
            let label = i % cfg.classes;
            let frames = (0..cfg.timesteps)
                .map(|t| {
                    let flip = if t < late_start { 0.5 } else { cfg.late_flip };
                    templates[label]
                        .iter()
                        .map(|&bit| if bit != rng.bernoulli(flip) { 1.0 } else { 0.0 })
                        .collect::<Vec<_>>()
                        .into()
                })
                .collect();
            Sample { frames, label }
        })
        .collect();
    Ok(Dataset {
        samples,
        input_width: cfg.width,
        timesteps: cfg.timesteps,
        classes: cfg.classes,
    })
}

/// Index batches for one epoch: a Fisher–Yates shuffle of `0..n` cut into
/// chunks of `batch_size`, the last one possibly short.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.below(i + 1);
        order.swap(i, j);
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
