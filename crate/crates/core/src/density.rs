//! Ground-truth density maps from head annotations.

use std::path::Path;

use crate::dataset_io::{save_image, PointAnnotation};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_SIGMA: f64 = 4.0;
/// Kernels are cut off at this many standard deviations.
pub const TRUNCATION_RADIUS: f64 = 4.0;

/// Non-negative `height × width` grid of persons per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap<T> {
    height: usize,
    width: usize,
    values: Vec<T>,
}

impl<T: Scalar> DensityMap<T> {
    pub fn zeros(height: usize, width: usize) -> Self {
        DensityMap {
            height,
            width,
            values: vec![T::zero(); height * width],
        }
    }

    /// Wraps a row-major grid; rejects negative or non-finite entries.
    pub fn from_values(height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} density needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= T::zero())) {
            return Err(Error::Shape(format!("density entry {v} is negative or non-finite")));
        }
        Ok(DensityMap { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn at(&self, row: usize, col: usize) -> T {
        self.values[row * self.width + col]
    }

    /// Row-major index of the largest entry (first on ties).
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(&[self.height, self.width, 1], self.values.clone()).expect("sized on construction")
    }

    /// Writes the map as 8-bit grayscale, scaled so the maximum is white.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let max = self.values.iter().fold(T::zero(), |m, &v| m.max(v));
        let scaled = if max > T::zero() {
            self.to_tensor().map(|v| v / max)
        } else {
            self.to_tensor()
        };
        save_image(&scaled, path)
    }
}

/// Sums one truncated, renormalised isotropic Gaussian per point.
///
/// Pixel `(row, col)` sits at coordinate `(x = col, y = row)`. Each kernel
/// covers pixels within `4·sigma` of its point that lie inside the image and
/// is renormalised over exactly those pixels, so every person contributes
/// mass 1. Points are accumulated in a canonical order, making the result
/// independent of annotation order.
pub fn generate_density_map<T: Scalar>(
    points: &[PointAnnotation],
    height: usize,
    width: usize,
    sigma: f64,
) -> Result<DensityMap<T>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::NonPositiveSigma(sigma));
    }
    for p in points {
        if !(p.x >= 0.0 && p.y >= 0.0 && p.x < width as f64 && p.y < height as f64) {
            return Err(Error::OutOfBoundsPoint {
                image: String::new(),
                x: p.x,
                y: p.y,
                width: width as u32,
                height: height as u32,
            });
        }
    }
    let mut ordered: Vec<PointAnnotation> = points.to_vec();
    ordered.sort_by(|a, b| a.y.total_cmp(&b.y).then(a.x.total_cmp(&b.x)));

    let mut map = DensityMap::zeros(height, width);
    let radius = TRUNCATION_RADIUS * sigma;
    let two_s2 = 2.0 * sigma * sigma;
    let mut kernel: Vec<(usize, f64)> = Vec::new();
    for p in &ordered {
        kernel.clear();
        let r0 = (p.y - radius).floor().max(0.0) as usize;
        let r1 = ((p.y + radius).ceil() as usize).min(height - 1);
        let c0 = (p.x - radius).floor().max(0.0) as usize;
        let c1 = ((p.x + radius).ceil() as usize).min(width - 1);
        let mut total = 0.0;
        for r in r0..=r1 {
            for c in c0..=c1 {
                let d2 = (c as f64 - p.x).powi(2) + (r as f64 - p.y).powi(2);
                if d2 <= radius * radius {
                    let w = (-d2 / two_s2).exp();
                    total += w;
                    kernel.push((r * width + c, w));
                }
            }
        }
        if kernel.is_empty() || total <= 0.0 {
            // a sub-pixel sigma can leave only the nearest pixel
            let r = (p.y.round() as usize).min(height - 1);
            let c = (p.x.round() as usize).min(width - 1);
            kernel.clear();
            kernel.push((r * width + c, 1.0));
            total = 1.0;
        }
        for &(i, w) in &kernel {
            map.values[i] += T::of(w / total);
        }
    }
    Ok(map)
}

/// Integral of the map, accumulated in double precision.
pub fn count_from_density<T: Scalar>(map: &DensityMap<T>) -> f64 {
    map.values.iter().map(|v| v.as_f64()).sum()
}

/// Sum-pools `factor × factor` blocks, preserving total mass.
pub fn downsample_density<T: Scalar>(map: &DensityMap<T>, factor: usize) -> Result<DensityMap<T>> {
    if factor == 0 || !map.height.is_multiple_of(factor) || !map.width.is_multiple_of(factor) {
        return Err(Error::NonDivisibleShape {
            height: map.height,
            width: map.width,
            factor,
        });
    }
    let (oh, ow) = (map.height / factor, map.width / factor);
    let mut acc = vec![0.0f64; oh * ow];
    for r in 0..map.height {
        for c in 0..map.width {
            acc[(r / factor) * ow + c / factor] += map.values[r * map.width + c].as_f64();
        }
    }
    Ok(DensityMap {
        height: oh,
        width: ow,
        values: acc.into_iter().map(T::of).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pt(x: f64, y: f64) -> PointAnnotation {
        PointAnnotation { x, y }
    }

    #[test]
    fn empty_points_give_zero_map() {
        let m = generate_density_map::<f64>(&[], 8, 8, 4.0).unwrap();
        assert!(m.values().iter().all(|&v| v == 0.0));
        assert_eq!(count_from_density(&m), 0.0);
    }

    #[test]
    fn single_centered_point() {
        let m = generate_density_map::<f64>(&[pt(32.0, 32.0)], 64, 64, 4.0).unwrap();
        assert!((count_from_density(&m) - 1.0).abs() < 1e-6);
        assert_eq!(m.argmax(), (32, 32));
    }

    #[test]
    fn fifty_random_points_sum_to_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let pts: Vec<_> = (0..50)
            .map(|_| pt(rng.gen_range(0.0..128.0), rng.gen_range(0.0..128.0)))
            .collect();
        let m = generate_density_map::<f32>(&pts, 128, 128, 4.0).unwrap();
        // oracle: direct summation over the generated grid
        let direct: f64 = (0..128).flat_map(|r| (0..128).map(move |c| (r, c))).map(|(r, c)| m.at(r, c) as f64).sum();
        assert!((direct - 50.0).abs() < 1e-3);
    }

    #[test]
    fn corner_point_keeps_unit_mass() {
        let m = generate_density_map::<f64>(&[pt(0.0, 0.0)], 16, 16, 4.0).unwrap();
        assert!((count_from_density(&m) - 1.0).abs() < 1e-12);
        let tiny = generate_density_map::<f64>(&[pt(3.4, 2.6)], 8, 8, 0.05).unwrap();
        assert!((count_from_density(&tiny) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn generation_errors() {
        assert!(matches!(
            generate_density_map::<f64>(&[pt(8.0, 1.0)], 8, 8, 4.0),
            Err(Error::OutOfBoundsPoint { .. })
        ));
        assert!(matches!(
            generate_density_map::<f64>(&[], 8, 8, 0.0),
            Err(Error::NonPositiveSigma(_))
        ));
    }

    #[test]
    fn counts() {
        assert_eq!(count_from_density(&DensityMap::<f64>::zeros(4, 4)), 0.0);
        let u = DensityMap::from_values(2, 2, vec![0.25f64; 4]).unwrap();
        assert_eq!(count_from_density(&u), 1.0);
        let three = generate_density_map::<f64>(&[pt(3.0, 3.0), pt(10.0, 4.0), pt(20.5, 20.5)], 32, 32, 4.0).unwrap();
        assert!((count_from_density(&three) - 3.0).abs() < 1e-3);
    }

    #[test]
    fn downsample_block_sums() {
        let ones = DensityMap::from_values(4, 4, vec![1.0f64; 16]).unwrap();
        let d = downsample_density(&ones, 2).unwrap();
        assert_eq!((d.height(), d.width()), (2, 2));
        assert!(d.values().iter().all(|&v| v == 4.0));
        assert_eq!(downsample_density(&ones, 1).unwrap(), ones);
        assert!(matches!(downsample_density(&ones, 3), Err(Error::NonDivisibleShape { .. })));
    }

    #[test]
    fn downsample_random_matches_block_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let vals: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let m = DensityMap::from_values(8, 8, vals.clone()).unwrap();
        let d = downsample_density(&m, 4).unwrap();
        for br in 0..2 {
            for bc in 0..2 {
                let mut s = 0.0;
                for r in 0..4 {
                    for c in 0..4 {
                        s += vals[(br * 4 + r) * 8 + bc * 4 + c];
                    }
                }
                assert!((d.at(br, bc) - s).abs() < 1e-9);
            }
        }
        assert!((count_from_density(&d) - count_from_density(&m)).abs() < 1e-9);
    }

    #[test]
    fn translation_moves_argmax() {
        let a = generate_density_map::<f64>(&[pt(20.0, 22.0)], 64, 64, 3.0).unwrap();
        let b = generate_density_map::<f64>(&[pt(27.0, 17.0)], 64, 64, 3.0).unwrap();
        let (ra, ca) = a.argmax();
        let (rb, cb) = b.argmax();
        assert_eq!((rb as i64 - ra as i64, cb as i64 - ca as i64), (-5, 7));
    }

    proptest! {
        #[test]
        fn permutation_invariant_and_non_negative(
            pts in prop::collection::vec((0.0f64..40.0, 0.0f64..30.0), 0..12),
            seed in any::<u64>(),
        ) {
            let points: Vec<_> = pts.iter().map(|&(x, y)| pt(x, y)).collect();
            let mut shuffled = points.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
            let a = generate_density_map::<f32>(&points, 30, 40, 2.5).unwrap();
            let b = generate_density_map::<f32>(&shuffled, 30, 40, 2.5).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.values().iter().all(|&v| v >= 0.0));
            prop_assert!((count_from_density(&a) - points.len() as f64).abs() < 1e-3);
            let d = downsample_density(&a, 2).unwrap();
            prop_assert!(d.values().iter().all(|&v| v >= 0.0));
        }
    }
}
