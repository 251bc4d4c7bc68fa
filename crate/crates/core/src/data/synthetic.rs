use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ImageBatch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAX_CLASSES: usize = 16;
pub const MIN_SIDE: usize = 16;

/// Whether offset `(dx, dy)` from the shape center lies inside shape `class`
/// of radius `r`.
fn inside(class: usize, dx: f32, dy: f32, r: f32) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    let dist = (dx * dx + dy * dy).sqrt();
    let t = r / 3.0;
    match class {
        0 => dist <= r,
        1 => ax <= 0.8 * r && ay <= 0.8 * r,
        2 => dy >= -r && dy <= r && ax <= (dy + r) / 2.0,
        3 => (ax <= t && ay <= r) || (ay <= t && ax <= r),
        4 => dist <= r && dist >= 0.5 * r,
        5 => ay <= t && ax <= r,
        6 => ax <= t && ay <= r,
        7 => ax + ay <= r,
        8 => (ax - ay).abs() <= t && ax.max(ay) <= r,
        9 => ax.max(ay) <= r && ax.max(ay) >= 0.5 * r,
        10 => dy >= -r && dy <= r && ax <= (r - dy) / 2.0,
        11 => (dx >= -r && dx <= -t && ay <= r) || (dy >= t && dy <= r && ax <= r),
        12 => ((dx - r / 2.0).powi(2) + dy * dy).sqrt() <= t || ((dx + r / 2.0).powi(2) + dy * dy).sqrt() <= t,
        13 => ax <= r && ay <= r && dx * dy > 0.0,
        14 => dist <= r && dy >= 0.0,
        _ => ax <= r && ay <= r && (((dy + r) / (r / 2.0)).floor() as i32) % 2 == 0,
    }
}

/// Procedural grayscale shapes on a noisy background, one shape per class.
///
/// Labels are `i % num_classes` shuffled, so classes are balanced up to the
/// remainder. Pixels are quantized to multiples of 1/255 so that an IDX
/// round trip reproduces them exactly.
pub fn generate_synthetic(n: usize, h: usize, w: usize, num_classes: usize, seed: u64) -> Result<ImageBatch> {
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(Error::Config(format!(
            "synthetic images need H, W >= {MIN_SIDE}, got {h}x{w}"
        )));
    }
    if num_classes == 0 || num_classes > MAX_CLASSES {
        return Err(Error::Config(format!(
            "num_classes must be in 1..={MAX_CLASSES}, got {num_classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<u32> = (0..n).map(|i| (i % num_classes) as u32).collect();
    labels.shuffle(&mut rng);

    let side = h.min(w) as f32;
    let mut data = Vec::with_capacity(n * h * w);
    for &label in &labels {
        let r = rng.gen_range(0.2..0.35) * side;
        let cx = rng.gen_range(r..(w as f32 - r));
        let cy = rng.gen_range(r..(h as f32 - r));
        let fg: f32 = rng.gen_range(0.6..1.0);
        for y in 0..h {
            for x in 0..w {
                let bg: f32 = rng.gen_range(0.0..0.25);
                let dx = x as f32 + 0.5 - cx;
                let dy = y as f32 + 0.5 - cy;
                let v = if inside(label as usize, dx, dy, r) { fg } else { bg };
                data.push((v * 255.0).round() / 255.0);
            }
        }
    }
    ImageBatch::new(Tensor::new(&[n, h, w, 1], data)?, Some(labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_batch() {
        let b = generate_synthetic(0, 16, 16, 4, 1).unwrap();
        assert!(b.is_empty());
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic(20, 16, 16, 4, 7).unwrap();
        let b = generate_synthetic(20, 16, 16, 4, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(20, 16, 16, 4, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn exact_class_balance() {
        let b = generate_synthetic(1000, 16, 16, 4, 3).unwrap();
        let mut hist = [0usize; 4];
        b.labels.unwrap().iter().for_each(|&l| hist[l as usize] += 1);
        assert_eq!(hist, [250; 4]);
    }

    #[test]
    fn pixels_in_unit_range_and_class_means_differ() {
        let b = generate_synthetic(1000, 16, 16, 4, 3).unwrap();
        assert!(b.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let labels = b.labels.as_ref().unwrap();
        let mut sums = [0.0f64; 4];
        let per = 16 * 16;
        for (i, &l) in labels.iter().enumerate() {
            sums[l as usize] += b.images.data()[i * per..(i + 1) * per]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>();
        }
        let means: Vec<f64> = sums.iter().map(|s| s / (250.0 * per as f64)).collect();
        for i in 0..4 {
            for j in i + 1..4 {
                assert!((means[i] - means[j]).abs() > 1e-3, "{means:?}");
            }
        }
    }

    #[test]
    fn rejects_small_images_and_too_many_classes() {
        assert!(matches!(generate_synthetic(1, 8, 16, 4, 0), Err(Error::Config(_))));
        assert!(matches!(generate_synthetic(1, 16, 16, 17, 0), Err(Error::Config(_))));
    }
}
