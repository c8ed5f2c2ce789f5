use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Grey-scale images with integer labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub rows: usize,
    pub cols: usize,
    /// `len × rows × cols` pixels, row-major.
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn new(rows: usize, cols: usize, pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        if rows == 0 || cols == 0 || pixels.len() != labels.len() * rows * cols {
            return Err(Error::Format(format!(
                "{} pixels do not form {} images of {rows}x{cols}",
                pixels.len(),
                labels.len()
            )));
        }
        Ok(Self { rows, cols, pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0)
    }

    /// Pixels of samples `idx` scaled to `[0, 1]`, shaped `[idx.len(), ...sample_shape]`.
    pub fn batch(&self, idx: &[usize], sample_shape: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let per = self.rows * self.cols;
        if sample_shape.iter().product::<usize>() != per {
            return Err(crate::error::shape_err!("sample shape {sample_shape:?} does not hold {per} pixels"));
        }
        let mut data = Vec::with_capacity(idx.len() * per);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend(self.pixels[i * per..(i + 1) * per].iter().map(|&p| p as f32 / 255.0));
            labels.push(self.labels[i] as usize);
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(sample_shape);
        Ok((Tensor::new(shape, data)?, labels))
    }

    pub fn all(&self, sample_shape: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        self.batch(&(0..self.len()).collect::<Vec<_>>(), sample_shape)
    }

    /// Writes the image and label files in IDX format.
    pub fn write_idx(&self, images: &mut impl Write, labels: &mut impl Write) -> Result<()> {
        images.write_all(&IDX_IMAGES.to_be_bytes())?;
        for d in [self.len(), self.rows, self.cols] {
            images.write_all(&(d as u32).to_be_bytes())?;
        }
        images.write_all(&self.pixels)?;
        labels.write_all(&IDX_LABELS.to_be_bytes())?;
        labels.write_all(&(self.len() as u32).to_be_bytes())?;
        labels.write_all(&self.labels)?;
        Ok(())
    }

    pub fn read_idx(images: &mut impl Read, labels: &mut impl Read) -> Result<Self> {
        let img_dims = read_header(images, IDX_IMAGES, 3)?;
        let lab_dims = read_header(labels, IDX_LABELS, 1)?;
        if img_dims[0] != lab_dims[0] {
            return Err(Error::Format(format!("{} images but {} labels", img_dims[0], lab_dims[0])));
        }
        let mut pixels = vec![0u8; img_dims.iter().product()];
        images.read_exact(&mut pixels).map_err(|e| Error::Format(format!("truncated image data: {e}")))?;
        let mut labs = vec![0u8; lab_dims[0]];
        labels.read_exact(&mut labs).map_err(|e| Error::Format(format!("truncated label data: {e}")))?;
        Self::new(img_dims[1], img_dims[2], pixels, labs)
    }

    pub fn load(images: &Path, labels: &Path) -> Result<Self> {
        let mut i = std::io::BufReader::new(std::fs::File::open(images)?);
        let mut l = std::io::BufReader::new(std::fs::File::open(labels)?);
        Self::read_idx(&mut i, &mut l)
    }
}

fn read_header(r: &mut impl Read, magic: u32, rank: usize) -> Result<Vec<usize>> {
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(|e| Error::Format(format!("missing IDX header: {e}")))?;
    let got = u32::from_be_bytes(word);
    if got != magic {
        return Err(Error::Format(format!("IDX magic {got:#010x}, expected {magic:#010x}")));
    }
    (0..rank)
        .map(|_| {
            r.read_exact(&mut word).map_err(|e| Error::Format(format!("truncated IDX header: {e}")))?;
            Ok(u32::from_be_bytes(word) as usize)
        })
        .collect()
}

/// Parameters of the synthetic Gaussian-blob image task.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlobConfig {
    pub classes: usize,
    pub per_class: usize,
    pub side: usize,
    /// Pixel noise standard deviation (0–255 scale).
    pub noise: f64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        Self { classes: 4, per_class: 64, side: 8, noise: 40.0 }
    }
}

/// Each class is a random prototype image; samples add Gaussian pixel noise
/// and are clamped to `u8`. Samples are interleaved by class.
pub fn gaussian_blobs(cfg: &BlobConfig, seed: u64) -> Result<Dataset> {
    if cfg.classes == 0 || cfg.classes > 256 || cfg.per_class == 0 || cfg.side == 0 {
        return Err(crate::error::config_err!("invalid blob configuration {cfg:?}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = cfg.side * cfg.side;
    let level = Uniform::new_inclusive(40.0f64, 215.0).expect("valid range");
    let protos: Vec<Vec<f64>> = (0..cfg.classes).map(|_| (0..per).map(|_| level.sample(&mut rng)).collect()).collect();
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| crate::error::config_err!("noise: {e}"))?;
    let mut pixels = Vec::with_capacity(cfg.classes * cfg.per_class * per);
    let mut labels = Vec::with_capacity(cfg.classes * cfg.per_class);
    for _ in 0..cfg.per_class {
        for (c, proto) in protos.iter().enumerate() {
            pixels.extend(proto.iter().map(|&m| (m + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8));
            labels.push(c as u8);
        }
    }
    Dataset::new(cfg.side, cfg.side, pixels, labels)
}
