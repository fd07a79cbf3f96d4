//! Seeded image augmentation.
//!
//! Counting crops use exact right-angle rotations whose index doubles as the
//! self-supervised label. Video frames go through flip, zoom, brightness and
//! small-angle rotation, in that order.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Counter-clockwise quarter turns: 0 → 0°, 1 → 90°, 2 → 180°, 3 → 270°.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RotationLabel(u8);

impl RotationLabel {
    pub const ALL: [RotationLabel; 4] = [RotationLabel(0), RotationLabel(1), RotationLabel(2), RotationLabel(3)];

    pub fn new(value: u8) -> Result<Self> {
        if value < 4 {
            Ok(RotationLabel(value))
        } else {
            Err(Error::InvalidConfig(format!("rotation label {value} not in 0..4")))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn degrees(self) -> u32 {
        self.0 as u32 * 90
    }

    /// Quarter turns that undo this rotation.
    pub fn inverse(self) -> u8 {
        (4 - self.0) % 4
    }
}

/// Cycles through `0..n` in a fresh shuffled order each epoch.
#[derive(Clone, Debug)]
pub struct EpochSampler {
    n: usize,
    order: Vec<usize>,
    cursor: usize,
}

impl EpochSampler {
    pub fn new(n: usize) -> Self {
        EpochSampler {
            n,
            order: Vec::new(),
            cursor: 0,
        }
    }

    pub fn next_batch<R: Rng + ?Sized>(&mut self, size: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        if self.n == 0 {
            return out;
        }
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order = (0..self.n).collect();
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

fn hwc<T: Scalar>(image: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match image.shape() {
        &[h, w, c] => Ok((h, w, c)),
        s => Err(Error::Shape(format!("expected [H, W, C] image, got {s:?}"))),
    }
}

/// Uniformly placed `size × size` window, pixels copied verbatim.
pub fn crop_random<T: Scalar, R: Rng + ?Sized>(image: &Tensor<T>, size: usize, rng: &mut R) -> Result<Tensor<T>> {
    let (h, w, _) = hwc(image)?;
    if h < size || w < size || size == 0 {
        return Err(Error::ImageTooSmall { height: h, width: w, size });
    }
    let top = rng.gen_range(0..=h - size);
    let left = rng.gen_range(0..=w - size);
    crop_at(image, top, left, size)
}

pub fn crop_at<T: Scalar>(image: &Tensor<T>, top: usize, left: usize, size: usize) -> Result<Tensor<T>> {
    let (h, w, c) = hwc(image)?;
    if top + size > h || left + size > w {
        return Err(Error::ImageTooSmall { height: h, width: w, size });
    }
    let mut out = Vec::with_capacity(size * size * c);
    for r in top..top + size {
        let start = (r * w + left) * c;
        out.extend_from_slice(&image.data()[start..start + size * c]);
    }
    Tensor::from_vec(&[size, size, c], out)
}

/// Lossless counter-clockwise rotation by `k · 90°` (`k` taken mod 4).
pub fn rotate90<T: Scalar>(image: &Tensor<T>, k: i64) -> Result<Tensor<T>> {
    let (h, w, c) = hwc(image)?;
    let k = k.rem_euclid(4);
    let src = image.data();
    let (oh, ow) = if k % 2 == 0 { (h, w) } else { (w, h) };
    let mut out = Vec::with_capacity(src.len());
    for i in 0..oh {
        for j in 0..ow {
            let (r, col) = match k {
                0 => (i, j),
                1 => (j, w - 1 - i),
                2 => (h - 1 - i, w - 1 - j),
                _ => (h - 1 - j, i),
            };
            let s = (r * w + col) * c;
            out.extend_from_slice(&src[s..s + c]);
        }
    }
    Tensor::from_vec(&[oh, ow, c], out)
}

/// Draws a uniform label and rotates the crop by it.
pub fn make_rotation_example<T: Scalar, R: Rng + ?Sized>(
    crop: &Tensor<T>,
    rng: &mut R,
) -> Result<(Tensor<T>, RotationLabel)> {
    let (h, w, _) = hwc(crop)?;
    if h != w {
        return Err(Error::NonSquareCrop { height: h, width: w });
    }
    let label = RotationLabel(rng.gen_range(0..4u8));
    Ok((rotate90(crop, label.0 as i64)?, label))
}

pub fn flip_horizontal<T: Scalar>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = hwc(image)?;
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for r in 0..h {
        for col in (0..w).rev() {
            let s = (r * w + col) * c;
            out.extend_from_slice(&src[s..s + c]);
        }
    }
    Tensor::from_vec(&[h, w, c], out)
}

/// Bilinear sample at fractional `(y, x)`; neighbours outside the image read as zero.
fn sample_zero_fill<T: Scalar>(src: &[T], h: usize, w: usize, c: usize, y: f64, x: f64, ch: usize) -> T {
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = T::of(y - y0);
    let fx = T::of(x - x0);
    let at = |yy: f64, xx: f64| -> T {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            T::zero()
        } else {
            src[((yy as usize) * w + xx as usize) * c + ch]
        }
    };
    let top = at(y0, x0) + (at(y0, x0 + 1.0) - at(y0, x0)) * fx;
    let bottom = at(y0 + 1.0, x0) + (at(y0 + 1.0, x0 + 1.0) - at(y0 + 1.0, x0)) * fx;
    top + (bottom - top) * fy
}

/// Bilinear sample with coordinates clamped to the image (edge replicate).
pub(crate) fn sample_clamped<T: Scalar>(src: &[T], h: usize, w: usize, c: usize, y: f64, x: f64, ch: usize) -> T {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = T::of(y - y0 as f64);
    let fx = T::of(x - x0 as f64);
    let at = |r: usize, col: usize| src[(r * w + col) * c + ch];
    let top = at(y0, x0) + (at(y0, x1) - at(y0, x0)) * fx;
    let bottom = at(y1, x0) + (at(y1, x1) - at(y1, x0)) * fx;
    top + (bottom - top) * fy
}

/// Magnifies about the centre by `factor` and crops back to the input size.
pub fn zoom_center<T: Scalar>(image: &Tensor<T>, factor: f64) -> Result<Tensor<T>> {
    let (h, w, c) = hwc(image)?;
    if factor == 1.0 {
        return Ok(image.clone());
    }
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for r in 0..h {
        let sy = cy + (r as f64 - cy) / factor;
        for col in 0..w {
            let sx = cx + (col as f64 - cx) / factor;
            for ch in 0..c {
                out.push(sample_clamped(src, h, w, c, sy, sx, ch));
            }
        }
    }
    Tensor::from_vec(&[h, w, c], out)
}

/// Counter-clockwise rotation by `degrees` about the centre, zero fill outside.
pub fn rotate_degrees<T: Scalar>(image: &Tensor<T>, degrees: f64) -> Result<Tensor<T>> {
    let (h, w, c) = hwc(image)?;
    if degrees == 0.0 {
        return Ok(image.clone());
    }
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for r in 0..h {
        let oy = r as f64 - cy;
        for col in 0..w {
            let ox = col as f64 - cx;
            let sx = cx + ox * cos - oy * sin;
            let sy = cy + ox * sin + oy * cos;
            for ch in 0..c {
                out.push(sample_zero_fill(src, h, w, c, sy, sx, ch));
            }
        }
    }
    Tensor::from_vec(&[h, w, c], out)
}

/// Frame augmentation parameters, serialised as the `augment` config object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSpec {
    #[serde(rename = "flip_p", default = "default_flip")]
    pub horizontal_flip: f64,
    #[serde(rename = "zoom", default = "default_zoom")]
    pub zoom_factor: f64,
    #[serde(rename = "brightness", default = "default_brightness")]
    pub brightness_range: [f64; 2],
    #[serde(rename = "rotation_deg", default = "default_rotation")]
    pub rotation_range_deg: [f64; 2],
    /// Optional additive Gaussian noise standard deviation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gaussian_noise_std: Option<f64>,
    /// Optional per-pixel salt-and-pepper probability.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub salt_pepper_p: Option<f64>,
}

fn default_flip() -> f64 {
    1.0
}
fn default_zoom() -> f64 {
    1.3
}
fn default_brightness() -> [f64; 2] {
    [1.0, 1.3]
}
fn default_rotation() -> [f64; 2] {
    [-25.0, 25.0]
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            horizontal_flip: default_flip(),
            zoom_factor: default_zoom(),
            brightness_range: default_brightness(),
            rotation_range_deg: default_rotation(),
            gaussian_noise_std: None,
            salt_pepper_p: None,
        }
    }
}

impl AugmentSpec {
    /// Leaves every frame unchanged.
    pub fn identity() -> Self {
        AugmentSpec {
            horizontal_flip: 0.0,
            zoom_factor: 1.0,
            brightness_range: [1.0, 1.0],
            rotation_range_deg: [0.0, 0.0],
            gaussian_noise_std: None,
            salt_pepper_p: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob_ok = |p: f64| (0.0..=1.0).contains(&p);
        if !prob_ok(self.horizontal_flip) || !self.salt_pepper_p.is_none_or(prob_ok) {
            return Err(Error::InvalidConfig("probabilities must lie in [0, 1]".into()));
        }
        if !(self.zoom_factor >= 1.0) {
            return Err(Error::InvalidConfig(format!("zoom {} must be >= 1", self.zoom_factor)));
        }
        for (name, [lo, hi]) in [("brightness", self.brightness_range), ("rotation_deg", self.rotation_range_deg)] {
            if !(lo <= hi) {
                return Err(Error::InvalidConfig(format!("{name} range [{lo}, {hi}] is inverted")));
            }
        }
        if self.gaussian_noise_std.is_some_and(|s| !(s >= 0.0)) {
            return Err(Error::InvalidConfig("noise std must be non-negative".into()));
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

/// Flip → zoom → brightness (clamped) → rotation, then optional noise.
///
/// Every random draw is made regardless of whether the transform is a no-op,
/// so the generator advances identically for any spec.
pub fn augment_frame<T: Scalar, R: Rng + ?Sized>(frame: &Tensor<T>, spec: &AugmentSpec, rng: &mut R) -> Result<Tensor<T>> {
    spec.validate()?;
    hwc(frame)?;
    if let Some(v) = frame.data().iter().find(|&&v| !(v >= T::zero() && v <= T::one())) {
        return Err(Error::BadPixelRange(v.as_f64()));
    }
    let flip = rng.gen::<f64>() < spec.horizontal_flip;
    let brightness = uniform(rng, spec.brightness_range);
    let angle = uniform(rng, spec.rotation_range_deg);

    let mut out = if flip { flip_horizontal(frame)? } else { frame.clone() };
    out = zoom_center(&out, spec.zoom_factor)?;
    if brightness != 1.0 {
        let b = T::of(brightness);
        out = out.map(|v| (v * b).max(T::zero()).min(T::one()));
    }
    out = rotate_degrees(&out, angle)?;

    if let Some(std) = spec.gaussian_noise_std {
        let normal = rand_normal_pairs(rng, out.len());
        let s = T::of(std);
        for (v, n) in out.data_mut().iter_mut().zip(normal) {
            *v = (*v + s * T::of(n)).max(T::zero()).min(T::one());
        }
    }
    if let Some(p) = spec.salt_pepper_p {
        for v in out.data_mut() {
            let u = rng.gen::<f64>();
            if u < p / 2.0 {
                *v = T::zero();
            } else if u < p {
                *v = T::one();
            }
        }
    }
    Ok(out)
}

/// Box–Muller standard normals.
fn rand_normal_pairs<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    while out.len() < n {
        let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
        let u2: f64 = rng.gen();
        let r = (-2.0 * u1.ln()).sqrt();
        let t = std::f64::consts::TAU * u2;
        out.push(r * t.cos());
        out.push(r * t.sin());
    }
    out.truncate(n);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize, c: usize) -> Tensor<f32> {
        Tensor::from_fn(&[h, w, c], |i| (i % 251) as f32 / 251.0)
    }

    #[test]
    fn crop_of_exact_size_is_identity() {
        let img = ramp(112, 112, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(crop_random(&img, 112, &mut rng).unwrap(), img);
    }

    #[test]
    fn crop_too_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            crop_random(&ramp(64, 64, 1), 112, &mut rng),
            Err(Error::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn crop_offsets_are_uniform() {
        // 113x113 with distinct pixel ids: top-left value identifies the offset
        let img = Tensor::<f64>::from_fn(&[113, 113, 1], |i| i as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut counts = std::collections::HashMap::new();
        for _ in 0..10_000 {
            let c = crop_random(&img, 112, &mut rng).unwrap();
            *counts.entry(c.data()[0] as usize).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 4);
        for (&k, &n) in &counts {
            assert!([0, 1, 113, 114].contains(&k));
            assert!((2300..=2700).contains(&n), "offset {k}: {n}");
        }
    }

    #[test]
    fn rotate90_hand_example() {
        let img = Tensor::<f64>::from_vec(&[2, 3, 1], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let r = rotate90(&img, 1).unwrap();
        assert_eq!(r.shape(), &[3, 2, 1]);
        assert_eq!(r.data(), &[3., 6., 2., 5., 1., 4.]);
        assert_eq!(rotate90(&img, 0).unwrap(), img);
        assert_eq!(rotate90(&img, -1).unwrap(), rotate90(&img, 3).unwrap());
    }

    #[test]
    fn rotation_example_inverts() {
        let crop = ramp(16, 16, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (img, label) = make_rotation_example(&crop, &mut rng).unwrap();
            if label.value() == 0 {
                assert_eq!(img, crop);
            }
            assert_eq!(rotate90(&img, 4 - label.value() as i64).unwrap(), crop);
        }
        assert!(matches!(
            make_rotation_example(&ramp(4, 5, 1), &mut rng),
            Err(Error::NonSquareCrop { .. })
        ));
    }

    #[test]
    fn rotation_labels_are_balanced() {
        let crop = ramp(2, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 4];
        for _ in 0..40_000 {
            counts[make_rotation_example(&crop, &mut rng).unwrap().1.index()] += 1;
        }
        for n in counts {
            assert!((9_600..=10_400).contains(&n), "{counts:?}");
        }
    }

    #[test]
    fn isolated_flip_is_mirror() {
        let frame = ramp(8, 8, 3);
        let spec = AugmentSpec {
            horizontal_flip: 1.0,
            ..AugmentSpec::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment_frame(&frame, &spec, &mut rng).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                for ch in 0..3 {
                    assert_eq!(out.data()[(r * 8 + c) * 3 + ch], frame.data()[(r * 8 + 7 - c) * 3 + ch]);
                }
            }
        }
    }

    #[test]
    fn identity_spec_is_bit_identical() {
        let frame = ramp(128, 128, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(augment_frame(&frame, &AugmentSpec::identity(), &mut rng).unwrap(), frame);
    }

    #[test]
    fn brightness_scales_constant_frame() {
        let frame = Tensor::<f32>::full(&[128, 128, 3], 0.5);
        let spec = AugmentSpec {
            brightness_range: [1.3, 1.3],
            ..AugmentSpec::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = augment_frame(&frame, &spec, &mut rng).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5f32 * 1.3f32));
        assert!(out.data().iter().all(|&v| (v - 0.65).abs() < 1e-6));
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        let frame = Tensor::<f32>::full(&[4, 4, 1], 1.5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(
            augment_frame(&frame, &AugmentSpec::identity(), &mut rng),
            Err(Error::BadPixelRange(_))
        ));
    }

    #[test]
    fn default_spec_matches_config_json() {
        let spec: AugmentSpec =
            serde_json::from_str(r#"{"flip_p":1.0,"zoom":1.3,"brightness":[1.0,1.3],"rotation_deg":[-25,25]}"#).unwrap();
        assert_eq!(spec, AugmentSpec::default());
        assert!(serde_json::from_str::<AugmentSpec>(r#"{"zoom":0.5,"bogus":1}"#).is_err());
    }

    #[test]
    fn small_rotation_quarter_turn_matches_rotate90() {
        let frame = ramp(9, 9, 1).cast::<f64>();
        let a = rotate_degrees(&frame, 90.0).unwrap();
        let b = rotate90(&frame, 1).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn rotate90_is_cyclic_group(a in 0i64..8, b in 0i64..8, h in 1usize..6, w in 1usize..6) {
            let img = Tensor::<f32>::from_fn(&[h, w, 2], |i| i as f32);
            let lhs = rotate90(&rotate90(&img, a).unwrap(), b).unwrap();
            prop_assert_eq!(lhs, rotate90(&img, (a + b) % 4).unwrap());
        }

        #[test]
        fn flip_is_involution(h in 1usize..6, w in 1usize..6) {
            let img = Tensor::<f32>::from_fn(&[h, w, 3], |i| i as f32);
            prop_assert_eq!(flip_horizontal(&flip_horizontal(&img).unwrap()).unwrap(), img);
        }

        #[test]
        fn augmented_frames_stay_in_range(seed in any::<u64>()) {
            let frame = ramp(32, 32, 3);
            let spec = AugmentSpec {
                gaussian_noise_std: Some(0.1),
                salt_pepper_p: Some(0.05),
                ..AugmentSpec::default()
            };
            let mut r1 = ChaCha8Rng::seed_from_u64(seed);
            let mut r2 = ChaCha8Rng::seed_from_u64(seed);
            let a = augment_frame(&frame, &spec, &mut r1).unwrap();
            let b = augment_frame(&frame, &spec, &mut r2).unwrap();
            prop_assert_eq!(a.shape(), &[32, 32, 3]);
            prop_assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert_eq!(a, b);
        }
    }
}
