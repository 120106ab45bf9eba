//! In-memory labelled image datasets and the synthetic-blobs generator.

use alloc::vec::Vec;

use crate::error::{config_err, shape_err};
use crate::rng::{self, Rng};
use crate::{Result, Tensor};

/// Images `(N, C, H, W)` in `[0, 1]` with labels in `0..num_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<u32>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<u32>, num_classes: usize) -> Result<Self> {
        let (n, _, _, _) = images.dims4()?;
        if n != labels.len() {
            return Err(shape_err!("{n} images but {} labels", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(config_err!("label {bad} out of range for {num_classes} classes"));
        }
        Ok(Dataset { images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<u32>)> {
        let images = self.images.gather_rows(indices)?;
        Ok((images, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    /// Samples `range`, in order.
    pub fn slice(&self, range: core::ops::Range<usize>) -> Result<Dataset> {
        if range.end > self.len() || range.start > range.end {
            return Err(shape_err!("range {range:?} out of bounds for {} samples", self.len()));
        }
        let idx: Vec<usize> = range.collect();
        let (images, labels) = self.batch(&idx)?;
        Ok(Dataset { images, labels, num_classes: self.num_classes })
    }
}

/// Parameters of the synthetic-blobs generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlobSpec {
    pub classes: usize,
    pub samples: usize,
    /// Image channels; every channel shows the class blob at its own gain.
    pub channels: usize,
    pub size: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f32,
    pub seed: u64,
}

/// Each class owns a random blob center and width; a sample renders its
/// class's Gaussian blob at a jittered position, adds pixel noise and clamps
/// to `[0, 1]`. Labels cycle through the classes.
pub fn synthetic_blobs(spec: &BlobSpec) -> Result<Dataset> {
    if spec.classes < 2 || spec.size < 4 || spec.samples == 0 || spec.channels == 0 {
        return Err(config_err!("synthetic blobs need >= 2 classes, >= 1 channel, size >= 4 and samples > 0"));
    }
    if !(spec.noise >= 0.0) {
        return Err(config_err!("noise must be >= 0 (got {})", spec.noise));
    }
    let mut rng: Rng = rng::seeded(spec.seed);
    let s = spec.size as f32;
    let centers: Vec<(f32, f32, f32)> = (0..spec.classes)
        .map(|_| {
            let cy = rng::uniform(&mut rng, 0.2 * s, 0.8 * s);
            let cx = rng::uniform(&mut rng, 0.2 * s, 0.8 * s);
            let width = rng::uniform(&mut rng, 0.08 * s, 0.2 * s);
            (cy, cx, width)
        })
        .collect();
    let gains: Vec<f32> = if spec.channels == 1 {
        alloc::vec![1.0; spec.classes]
    } else {
        (0..spec.classes * spec.channels).map(|_| rng::uniform(&mut rng, 0.5, 1.0)).collect()
    };
    let plane = spec.size * spec.size;
    let mut data = Vec::with_capacity(spec.samples * spec.channels * plane);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let class = i % spec.classes;
        let (cy, cx, width) = centers[class];
        let jy = cy + 0.05 * s * rng::normal(&mut rng) as f32;
        let jx = cx + 0.05 * s * rng::normal(&mut rng) as f32;
        let inv = 1.0 / (2.0 * width * width);
        for c in 0..spec.channels {
            let gain = gains[(class * spec.channels + c) % gains.len()];
            for y in 0..spec.size {
                for x in 0..spec.size {
                    let d2 = (y as f32 - jy) * (y as f32 - jy) + (x as f32 - jx) * (x as f32 - jx);
                    let v = gain * libm::expf(-d2 * inv) + spec.noise * rng::normal(&mut rng) as f32;
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
        labels.push(class as u32);
    }
    Dataset::new(Tensor::new(&[spec.samples, spec.channels, spec.size, spec.size], data)?, labels, spec.classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_normalized_and_deterministic() {
        let spec = BlobSpec { classes: 3, samples: 12, channels: 1, size: 8, noise: 0.1, seed: 5 };
        let a = synthetic_blobs(&spec).unwrap();
        assert_eq!(a, synthetic_blobs(&spec).unwrap());
        assert!(a.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(a.labels().iter().all(|&l| l < 3));
        assert_eq!(a.image_shape(), [1, 8, 8]);
        let rgb = synthetic_blobs(&BlobSpec { channels: 3, ..spec }).unwrap();
        assert_eq!(rgb.image_shape(), [3, 8, 8]);
    }

    #[test]
    fn rejects_inconsistent_counts() {
        assert!(Dataset::new(Tensor::zeros(&[2, 1, 2, 2]), alloc::vec![0], 2).is_err());
        assert!(Dataset::new(Tensor::zeros(&[1, 1, 2, 2]), alloc::vec![4], 2).is_err());
    }
}
