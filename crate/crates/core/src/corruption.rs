//! The corrupt-and-reconstruct input pipeline: images are split into
//! non-overlapping patches, pixel-wise Gaussian noise is added to the
//! whole image, and a random subset of patches is masked. The encoder only
//! ever sees the noisy visible patches; the reconstruction target is the
//! clean, unmasked image.

use crate::error::{Error, Result};
use crate::numerics::RngStream;
use ndarray::Array2;

/// A single image as channels x height x width pixels.
///
/// Clean pixels live in [0, 1]; noisy images may exceed that range and
/// are deliberately not clipped (clipping would break the Gaussian
/// assumption behind the certification bound).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Channel-major, then row-major pixel data; length = c * h * w.
    pub pixels: Vec<f64>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != channels * height * width {
            return Err(Error::shape(format!(
                "pixel buffer has {} entries, expected {}x{}x{} = {}",
                pixels.len(),
                channels,
                height,
                width,
                channels * height * width
            )));
        }
        Ok(ImageTensor { channels, height, width, pixels })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        ImageTensor {
            channels,
            height,
            width,
            pixels: vec![0.0; channels * height * width],
        }
    }

    pub fn num_pixels(&self) -> usize {
        self.pixels.len()
    }

    pub fn pixel(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    /// The image with N(0, sigma^2) noise added to every pixel, drawn in
    /// canonical (channel, row, column) order from the stream.
    pub fn add_gaussian_noise(&self, rng: &mut RngStream, sigma: f64) -> Self {
        let mut noisy = self.clone();
        for p in noisy.pixels.iter_mut() {
            *p += sigma * rng.next_std_normal();
        }
        noisy
    }

    /// Euclidean norm of the pixel vector.
    pub fn l2_norm(&self) -> f64 {
        self.pixels.iter().map(|p| p * p).sum::<f64>().sqrt()
    }

    /// Mirror image left-right (the only augmentation the pipeline uses).
    pub fn hflipped(&self) -> Self {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.pixels[(c * self.height + y) * self.width + x] =
                        self.pixel(c, y, self.width - 1 - x);
                }
            }
        }
        out
    }
}

/// An image re-expressed as a sequence of flattened patches.
///
/// Patches are ordered row-major over the patch grid; within a patch the
/// values are channel-major, then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    pub values: Array2<f64>,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub channels: usize,
    pub patch_size: usize,
}

impl PatchSequence {
    pub fn num_patches(&self) -> usize {
        self.values.nrows()
    }

    pub fn patch_dim(&self) -> usize {
        self.values.ncols()
    }
}

/// The set of masked patch indices out of `total`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPattern {
    masked: Vec<bool>,
}

impl MaskPattern {
    pub fn from_masked_indices(indices: &[usize], total: usize) -> Result<Self> {
        let mut masked = vec![false; total];
        for &i in indices {
            if i >= total {
                return Err(Error::domain(format!(
                    "masked index {i} out of range for {total} patches"
                )));
            }
            if masked[i] {
                return Err(Error::domain(format!("masked index {i} repeated")));
            }
            masked[i] = true;
        }
        Ok(MaskPattern { masked })
    }

    pub fn total(&self) -> usize {
        self.masked.len()
    }

    pub fn is_masked(&self, index: usize) -> bool {
        self.masked[index]
    }

    pub fn num_masked(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.total()).filter(|&i| self.masked[i]).collect()
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.total()).filter(|&i| !self.masked[i]).collect()
    }
}

/// Noise level, masking ratio, and patch size of the corruption.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub sigma: f64,
    pub mask_ratio: f64,
    pub patch_size: usize,
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) {
            return Err(Error::domain(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::domain(format!(
                "mask_ratio must lie in [0,1], got {}",
                self.mask_ratio
            )));
        }
        if self.patch_size == 0 {
            return Err(Error::domain("patch_size must be positive"));
        }
        Ok(())
    }
}

/// Visible patches plus the original grid position of every row, so the
/// encoder can attach positional information to each patch.
#[derive(Debug, Clone, PartialEq)]
pub struct VisiblePatches {
    pub values: Array2<f64>,
    /// Original patch index of each row of `values`.
    pub indices: Vec<usize>,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

/// Split an image into non-overlapping patches.
pub fn patchify(image: &ImageTensor, patch_size: usize) -> Result<PatchSequence> {
    if patch_size == 0 {
        return Err(Error::shape("patch_size must be positive"));
    }
    if image.height % patch_size != 0 || image.width % patch_size != 0 {
        return Err(Error::shape(format!(
            "image {}x{} is not divisible by patch size {}",
            image.height, image.width, patch_size
        )));
    }
    let rows = image.height / patch_size;
    let cols = image.width / patch_size;
    let patch_dim = image.channels * patch_size * patch_size;
    let mut values = Array2::zeros((rows * cols, patch_dim));
    for pr in 0..rows {
        for pc in 0..cols {
            let patch_idx = pr * cols + pc;
            let mut k = 0;
            for c in 0..image.channels {
                for dy in 0..patch_size {
                    for dx in 0..patch_size {
                        values[(patch_idx, k)] =
                            image.pixel(c, pr * patch_size + dy, pc * patch_size + dx);
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(PatchSequence {
        values,
        grid_rows: rows,
        grid_cols: cols,
        channels: image.channels,
        patch_size,
    })
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(patches: &PatchSequence) -> Result<ImageTensor> {
    let ps = patches.patch_size;
    let expected_dim = patches.channels * ps * ps;
    if patches.patch_dim() != expected_dim {
        return Err(Error::shape(format!(
            "patch_dim {} inconsistent with {} channels and patch size {}",
            patches.patch_dim(),
            patches.channels,
            ps
        )));
    }
    if patches.num_patches() != patches.grid_rows * patches.grid_cols {
        return Err(Error::shape(format!(
            "{} patches inconsistent with grid {}x{}",
            patches.num_patches(),
            patches.grid_rows,
            patches.grid_cols
        )));
    }
    let height = patches.grid_rows * ps;
    let width = patches.grid_cols * ps;
    let mut image = ImageTensor::zeros(patches.channels, height, width);
    for pr in 0..patches.grid_rows {
        for pc in 0..patches.grid_cols {
            let patch_idx = pr * patches.grid_cols + pc;
            let mut k = 0;
            for c in 0..patches.channels {
                for dy in 0..ps {
                    for dx in 0..ps {
                        let y = pr * ps + dy;
                        let x = pc * ps + dx;
                        image.pixels[(c * height + y) * width + x] = patches.values[(patch_idx, k)];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(image)
}

/// A uniformly random mask of round(ratio * total) patches.
pub fn sample_mask(rng: &mut RngStream, total: usize, ratio: f64) -> Result<MaskPattern> {
    if total == 0 {
        return Err(Error::domain("mask requires at least one patch"));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::domain(format!("ratio must lie in [0,1], got {ratio}")));
    }
    let count = (ratio * total as f64).round() as usize;
    // Partial Fisher-Yates: the first `count` entries are a uniform subset.
    let mut indices: Vec<usize> = (0..total).collect();
    for i in 0..count.min(total.saturating_sub(1)) {
        let j = i + rng.index_below(total - i);
        indices.swap(i, j);
    }
    MaskPattern::from_masked_indices(&indices[..count], total)
}

/// Corrupt an image for pre-training: add Gaussian noise to every pixel,
/// then mask a random subset of patches.
///
/// Returns the noisy visible patches (with their original indices), the
/// mask, and the clean full-grid reconstruction target.
pub fn corrupt(
    image: &ImageTensor,
    spec: &CorruptionSpec,
    rng: &mut RngStream,
) -> Result<(VisiblePatches, MaskPattern, PatchSequence)> {
    spec.validate()?;
    let target = patchify(image, spec.patch_size)?;
    // Noise is drawn before the mask so the two are reproducible
    // independently of each other's parameters.
    let noisy = image.add_gaussian_noise(rng, spec.sigma);
    let noisy_patches = patchify(&noisy, spec.patch_size)?;
    let mask = sample_mask(rng, target.num_patches(), spec.mask_ratio)?;

    let visible_idx = mask.visible_indices();
    let mut values = Array2::zeros((visible_idx.len(), target.patch_dim()));
    for (row, &idx) in visible_idx.iter().enumerate() {
        values.row_mut(row).assign(&noisy_patches.values.row(idx));
    }
    let visible = VisiblePatches {
        values,
        indices: visible_idx,
        grid_rows: target.grid_rows,
        grid_cols: target.grid_cols,
    };
    Ok((visible, mask, target))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_image(c: usize, h: usize, w: usize) -> ImageTensor {
        let n = c * h * w;
        let pixels = (0..n).map(|i| i as f64 / n as f64).collect();
        ImageTensor::new(c, h, w, pixels).unwrap()
    }

    #[test]
    fn patchify_shapes() {
        let img = ramp_image(1, 4, 4);
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.num_patches(), 4);
        assert_eq!(p.patch_dim(), 4);
        assert_eq!((p.grid_rows, p.grid_cols), (2, 2));

        let big = ImageTensor::zeros(3, 224, 224);
        let p = patchify(&big, 16).unwrap();
        assert_eq!(p.num_patches(), 196);
        assert_eq!(p.patch_dim(), 768);
        assert_eq!((p.grid_rows, p.grid_cols), (14, 14));
    }

    #[test]
    fn patchify_rejects_non_divisible() {
        let img = ramp_image(1, 5, 4);
        assert!(patchify(&img, 2).is_err());
    }

    #[test]
    fn patch_round_trip_is_exact() {
        let img = ramp_image(3, 8, 12);
        let p = patchify(&img, 4).unwrap();
        let back = unpatchify(&p).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn patch_ordering_is_channel_major_row_major() {
        // 2x2 image, one channel per value to pin the layout
        let img = ImageTensor::new(2, 2, 2, vec![
            1.0, 2.0, 3.0, 4.0, // channel 0 rows
            5.0, 6.0, 7.0, 8.0, // channel 1 rows
        ])
        .unwrap();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.num_patches(), 1);
        let row: Vec<f64> = p.values.row(0).to_vec();
        assert_eq!(row, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn unpatchify_rejects_inconsistent_metadata() {
        let img = ramp_image(1, 4, 4);
        let mut p = patchify(&img, 2).unwrap();
        p.grid_rows = 3;
        assert!(unpatchify(&p).is_err());
    }

    #[test]
    fn mask_count_exact() {
        let mut rng = RngStream::new(7, 0);
        let m = sample_mask(&mut rng, 196, 0.75).unwrap();
        assert_eq!(m.num_masked(), 147);
        assert_eq!(m.visible_indices().len(), 49);

        let m = sample_mask(&mut rng, 8, 0.0).unwrap();
        assert_eq!(m.num_masked(), 0);

        let m = sample_mask(&mut rng, 8, 1.0).unwrap();
        assert_eq!(m.num_masked(), 8);
    }

    #[test]
    fn mask_deterministic_per_stream() {
        let mut a = RngStream::new(11, 3);
        let mut b = RngStream::new(11, 3);
        let ma = sample_mask(&mut a, 64, 0.75).unwrap();
        let mb = sample_mask(&mut b, 64, 0.75).unwrap();
        assert_eq!(ma, mb);
    }

    #[test]
    fn mask_is_roughly_uniform() {
        let mut counts = [0usize; 8];
        for trial in 0..10_000u64 {
            let mut rng = RngStream::derive(99, &[trial]);
            let m = sample_mask(&mut rng, 8, 0.5).unwrap();
            for i in m.masked_indices() {
                counts[i] += 1;
            }
        }
        for &c in &counts {
            let freq = c as f64 / 10_000.0;
            assert!((freq - 0.5).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn corrupt_identity_when_clean() {
        let img = ramp_image(1, 8, 8);
        let spec = CorruptionSpec { sigma: 0.0, mask_ratio: 0.0, patch_size: 2 };
        let mut rng = RngStream::new(5, 0);
        let (visible, mask, target) = corrupt(&img, &spec, &mut rng).unwrap();
        assert_eq!(mask.num_masked(), 0);
        assert_eq!(visible.values, target.values);
        assert_eq!(visible.indices, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn corrupt_mask_only_keeps_clean_visible() {
        let img = ramp_image(1, 8, 8);
        let spec = CorruptionSpec { sigma: 0.0, mask_ratio: 0.75, patch_size: 2 };
        let mut rng = RngStream::new(5, 1);
        let (visible, mask, target) = corrupt(&img, &spec, &mut rng).unwrap();
        assert_eq!(mask.num_masked(), 12);
        for (row, &idx) in visible.indices.iter().enumerate() {
            assert_eq!(visible.values.row(row), target.values.row(idx));
        }
    }

    #[test]
    fn corrupt_noise_is_rederivable() {
        let img = ramp_image(1, 8, 8);
        let spec = CorruptionSpec { sigma: 0.25, mask_ratio: 0.5, patch_size: 2 };
        let mut rng = RngStream::new(5, 2);
        let (visible, _, target) = corrupt(&img, &spec, &mut rng).unwrap();

        // re-derive the noise from a fresh copy of the stream
        let mut rng2 = RngStream::new(5, 2);
        let noisy = img.add_gaussian_noise(&mut rng2, spec.sigma);
        let noisy_patches = patchify(&noisy, spec.patch_size).unwrap();
        for (row, &idx) in visible.indices.iter().enumerate() {
            for k in 0..target.patch_dim() {
                let denoised = visible.values[(row, k)] - (noisy_patches.values[(idx, k)] - target.values[(idx, k)]);
                assert!((denoised - target.values[(idx, k)]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn corrupt_noise_mean_band() {
        // CLT band for the mean of ~1e5 N(0, 0.25^2) values
        let img = ImageTensor::zeros(1, 320, 320);
        let spec = CorruptionSpec { sigma: 0.25, mask_ratio: 0.0, patch_size: 16 };
        let mut rng = RngStream::new(77, 0);
        let (visible, _, target) = corrupt(&img, &spec, &mut rng).unwrap();
        let diff_sum: f64 = (&visible.values - &target.values).sum();
        let n = (visible.values.nrows() * visible.values.ncols()) as f64;
        let mean = diff_sum / n;
        let band = 4.0 * 0.25 / n.sqrt();
        assert!(mean.abs() < band.max(0.004), "mean = {mean}");
    }
}
