//! Labeled image datasets: a small self-describing binary format and a
//! synthetic class-conditional generator for desk-scale experiments.
//!
//! File layout (little-endian):
//!   magic "SCDS1\0"
//!   u32 count, channels, height, width, num_classes
//!   f32 pixels, count * channels * height * width values in [0, 1]
//!   u16 labels, count values < num_classes

use crate::corruption::ImageTensor;
use crate::error::{Error, Result};
use crate::numerics::RngStream;
use std::io::Write;
use std::path::Path;

pub const DATASET_MAGIC: &[u8; 6] = b"SCDS1\0";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.labels.len() {
            return Err(Error::shape(format!(
                "{} images but {} labels",
                self.images.len(),
                self.labels.len()
            )));
        }
        if let Some(first) = self.images.first() {
            let dims = (first.channels, first.height, first.width);
            for (i, img) in self.images.iter().enumerate() {
                if (img.channels, img.height, img.width) != dims {
                    return Err(Error::shape(format!("image {i} has inconsistent shape")));
                }
            }
        }
        for (i, &l) in self.labels.iter().enumerate() {
            if l >= self.num_classes {
                return Err(Error::domain(format!(
                    "label {l} of example {i} out of range for {} classes",
                    self.num_classes
                )));
            }
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.pos as u64,
                format!("unexpected end of file while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parse a dataset file, validating every invariant with the byte offset
/// of the first violation.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    parse_dataset(&bytes)
}

pub fn parse_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(6, "magic")?;
    if magic != DATASET_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}")));
    }
    let count = r.u32("count")? as usize;
    let channels = r.u32("channels")? as usize;
    let height = r.u32("height")? as usize;
    let width = r.u32("width")? as usize;
    let num_classes = r.u32("num_classes")? as usize;
    if count > 0 && (channels == 0 || height == 0 || width == 0) {
        return Err(Error::format(6, "zero image dimension".to_string()));
    }
    if num_classes < 1 {
        return Err(Error::format(22, "num_classes must be positive".to_string()));
    }

    let per_image = channels * height * width;
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let offset = r.pos;
        let raw = r.take(4 * per_image, "pixel data")?;
        let mut pixels = Vec::with_capacity(per_image);
        for (j, chunk) in raw.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
            if !(0.0..=1.0).contains(&v) || v.is_nan() {
                return Err(Error::format(
                    (offset + 4 * j) as u64,
                    format!("pixel {j} of image {i} is {v}, outside [0,1]"),
                ));
            }
            pixels.push(v);
        }
        images.push(ImageTensor::new(channels, height, width, pixels)?);
    }

    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let offset = r.pos;
        let b = r.take(2, "label")?;
        let l = u16::from_le_bytes([b[0], b[1]]) as usize;
        if l >= num_classes {
            return Err(Error::format(
                offset as u64,
                format!("label {l} of example {i} out of range for {num_classes} classes"),
            ));
        }
        labels.push(l);
    }
    if r.pos != bytes.len() {
        return Err(Error::format(
            r.pos as u64,
            format!("{} trailing bytes", bytes.len() - r.pos),
        ));
    }
    let ds = Dataset { images, labels, num_classes };
    ds.validate()?;
    Ok(ds)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    ds.validate()?;
    let bytes = serialize_dataset(ds)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn serialize_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let (c, h, w) = ds
        .images
        .first()
        .map(|i| (i.channels, i.height, i.width))
        .unwrap_or((0, 0, 0));
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    for v in [ds.len() as u32, c as u32, h as u32, w as u32, ds.num_classes as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for img in &ds.images {
        for &p in &img.pixels {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
    }
    for &l in &ds.labels {
        out.extend_from_slice(&(l as u16).to_le_bytes());
    }
    Ok(out)
}

/// Class-conditional synthetic images: each class is an oriented
/// sinusoidal grating with per-example amplitude, phase, and brightness
/// jitter plus light pixel noise, clamped to [0, 1]. Labels are balanced
/// round-robin; everything is deterministic in the seed.
pub fn make_synthetic(seed: u64, count: usize, size: usize, num_classes: usize) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::domain("synthetic data needs at least two classes"));
    }
    if count < num_classes {
        return Err(Error::domain(format!(
            "count {count} smaller than num_classes {num_classes}"
        )));
    }
    if size == 0 {
        return Err(Error::domain("size must be positive"));
    }
    let cycles = 2.0;
    let k = 2.0 * std::f64::consts::PI * cycles / size as f64;
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % num_classes;
        let theta = std::f64::consts::PI * label as f64 / num_classes as f64;
        let (kx, ky) = (k * theta.cos(), k * theta.sin());

        let mut rng = RngStream::derive(seed, &[0x5d5, i as u64]);
        let amplitude = rng.uniform_in(0.16, 0.30);
        let phase = rng.uniform_in(-0.5, 0.5);
        let brightness = rng.uniform_in(-0.04, 0.04);

        let mut pixels = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let wave = (kx * x as f64 + ky * y as f64 + phase).sin();
                let noise = 0.02 * rng.next_std_normal();
                let v = 0.5 + brightness + amplitude * wave + noise;
                pixels.push(v.clamp(0.0, 1.0));
            }
        }
        images.push(ImageTensor::new(1, size, size, pixels)?);
        labels.push(label);
    }
    Ok(Dataset { images, labels, num_classes })
}
