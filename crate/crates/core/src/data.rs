//! Synthetic segmentation data with a scale signal.
//!
//! Each image holds one axis-aligned square on a noisy background. The
//! square's class is determined by its side length: class `k` draws sides
//! from the `k`-th geometric band of `[size/16, 11*size/16]`. Colours are
//! random and independent of class.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Shape, Tensor};

const BACKGROUND_STD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub class: usize,
    pub y: usize,
    pub x: usize,
    pub side: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `(1, 3, size, size)`.
    pub image: Tensor,
    /// Row-major class map, background is 0.
    pub label: Vec<usize>,
    pub rects: Vec<Rect>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    /// Concatenated per-sample label maps.
    pub labels: Vec<usize>,
}

fn check(size: usize, classes: usize) -> Result<()> {
    if size == 0 || size % 32 != 0 {
        return Err(Error::Argument(format!("image size must be a positive multiple of 32, got {size}")));
    }
    if classes < 2 {
        return Err(Error::Argument(format!("need at least 2 classes, got {classes}")));
    }
    Ok(())
}

/// Side-length range `[lo, hi)` of class `k >= 1`.
pub fn class_band(size: usize, classes: usize, k: usize) -> (f64, f64) {
    let lo = size as f64 / 16.0;
    let ratio = 11f64.powf(1.0 / (classes - 1) as f64);
    (lo * ratio.powi(k as i32 - 1), lo * ratio.powi(k as i32))
}

/// Render one square of `side` pixels at `(y, x)` with `colour` on `background`.
pub fn render(size: usize, rect: Rect, colour: [f64; 3], background: &[f64]) -> Result<Sample> {
    if rect.side == 0 || rect.y + rect.side > size || rect.x + rect.side > size {
        return Err(Error::Argument(format!("square {rect:?} does not fit a {size}x{size} image")));
    }
    let mut image = Tensor::from_vec(Shape::new(1, 3, size, size), background.to_vec())?;
    let mut label = vec![0; size * size];
    for y in rect.y..rect.y + rect.side {
        for x in rect.x..rect.x + rect.side {
            label[y * size + x] = rect.class;
            for (c, &v) in colour.iter().enumerate() {
                image.set(0, c, y, x, v);
            }
        }
    }
    Ok(Sample { image, label, rects: vec![rect] })
}

fn draw(rng: &mut ChaCha8Rng, size: usize, classes: usize) -> Result<Sample> {
    let class = rng.random_range(1..classes);
    let (lo, hi) = class_band(size, classes, class);
    let side = (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp().floor() as usize;
    let side = side.clamp(1, size);
    let y = rng.random_range(0..=size - side);
    let x = rng.random_range(0..=size - side);
    let colour = [0; 3].map(|_| rng.random_range(-1.0..1.0));
    let noise = Normal::new(0.0, BACKGROUND_STD).expect("valid std");
    let background: Vec<f64> = (0..3 * size * size).map(|_| noise.sample(rng)).collect();
    render(size, Rect { class, y, x, side }, colour, &background)
}

/// `n` samples, identical for identical arguments.
pub fn synth_dataset(seed: u64, n: usize, size: usize, classes: usize) -> Result<Vec<Sample>> {
    check(size, classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, "dataset"));
    (0..n).map(|_| draw(&mut rng, size, classes)).collect()
}

/// Training batch for iteration `iter`; batches do not depend on each other.
pub fn synth_batch(seed: u64, iter: u64, batch: usize, size: usize, classes: usize) -> Result<Batch> {
    check(size, classes)?;
    if batch == 0 {
        return Err(Error::Argument("batch must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive_indexed(seed, "data", iter));
    let samples = (0..batch).map(|_| draw(&mut rng, size, classes)).collect::<Result<Vec<_>>>()?;
    collate(&samples)
}

pub fn collate(samples: &[Sample]) -> Result<Batch> {
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    Ok(Batch {
        images: Tensor::concat_batch(&images)?,
        labels: samples.iter().flat_map(|s| s.label.iter().copied()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        assert_eq!(synth_dataset(3, 4, 64, 4).unwrap(), synth_dataset(3, 4, 64, 4).unwrap());
        assert_ne!(synth_dataset(3, 4, 64, 4).unwrap(), synth_dataset(4, 4, 64, 4).unwrap());
        assert_eq!(synth_batch(1, 5, 2, 32, 3).unwrap(), synth_batch(1, 5, 2, 32, 3).unwrap());
        assert_ne!(synth_batch(1, 5, 2, 32, 3).unwrap(), synth_batch(1, 6, 2, 32, 3).unwrap());
    }

    #[test]
    fn two_classes_one_square() {
        let d = synth_dataset(0, 1, 64, 2).unwrap();
        assert_eq!(d[0].rects.len(), 1);
        assert!(d[0].label.iter().all(|&c| c <= 1));
        assert!(d[0].label.contains(&1));
    }

    #[test]
    fn labels_rerasterize_from_rects() {
        for s in synth_dataset(9, 20, 64, 4).unwrap() {
            let mut counts = [0usize; 4];
            for &c in &s.label {
                counts[c] += 1;
            }
            let mut want = [0usize; 4];
            for r in &s.rects {
                want[r.class] += r.side * r.side;
            }
            want[0] = 64 * 64 - want[1..].iter().sum::<usize>();
            assert_eq!(counts, want);
        }
    }

    #[test]
    fn sides_fall_in_class_bands() {
        let size = 128;
        for s in synth_dataset(2, 200, size, 4).unwrap() {
            let r = s.rects[0];
            let (lo, hi) = class_band(size, 4, r.class);
            assert!((r.side as f64) >= lo.floor() && (r.side as f64) < hi, "{r:?} {lo} {hi}");
        }
        let (lo, _) = class_band(size, 4, 1);
        let (_, hi) = class_band(size, 4, 3);
        assert!((lo - 8.0).abs() < 1e-12 && (hi - 88.0).abs() < 1e-9);
    }

    #[test]
    fn bad_arguments() {
        assert!(synth_dataset(0, 1, 48, 2).is_err());
        assert!(synth_dataset(0, 1, 64, 1).is_err());
        assert!(synth_batch(0, 0, 0, 64, 2).is_err());
    }
}
