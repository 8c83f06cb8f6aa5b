//! Image transformations for augmentation and equivariance probes.
//!
//! Images are row-major `(rows, cols, channels)` slices of reals. Positive
//! `dx` moves content right (towards larger column index), positive `dy`
//! moves it down (towards larger row index) and positive angles rotate
//! counter-clockwise as displayed.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageDims {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
}

impl ImageDims {
    pub fn new(rows: usize, cols: usize, channels: usize) -> Self {
        ImageDims { rows, cols, channels }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn at(&self, r: usize, c: usize, ch: usize) -> usize {
        (r * self.cols + c) * self.channels + ch
    }
}

fn check(image: &[f32], dims: ImageDims) -> Result<()> {
    if image.len() == dims.len() {
        Ok(())
    } else {
        Err(Error::Input(format!(
            "image of {} values does not match {}x{}x{}",
            image.len(),
            dims.rows,
            dims.cols,
            dims.channels
        )))
    }
}

/// Whole-pixel shift with zero fill.
pub fn translate(image: &[f32], dims: ImageDims, dx: i64, dy: i64) -> Result<Vec<f32>> {
    check(image, dims)?;
    let mut out = vec![0.0; image.len()];
    for r in 0..dims.rows {
        let sr = r as i64 - dy;
        if sr < 0 || sr >= dims.rows as i64 {
            continue;
        }
        for c in 0..dims.cols {
            let sc = c as i64 - dx;
            if sc < 0 || sc >= dims.cols as i64 {
                continue;
            }
            let (src, dst) = (dims.at(sr as usize, sc as usize, 0), dims.at(r, c, 0));
            out[dst..dst + dims.channels].copy_from_slice(&image[src..src + dims.channels]);
        }
    }
    Ok(out)
}

/// Rotation about the image centre with bilinear resampling; samples outside
/// the source read as zero.
pub fn rotate(image: &[f32], dims: ImageDims, degrees: f64) -> Result<Vec<f32>> {
    check(image, dims)?;
    if degrees == 0.0 {
        return Ok(image.to_vec());
    }
    let (sin, cos) = Float::sin_cos(degrees.to_radians());
    let cy = (dims.rows as f64 - 1.0) / 2.0;
    let cx = (dims.cols as f64 - 1.0) / 2.0;
    let pixel = |r: i64, c: i64, ch: usize| -> f64 {
        if r < 0 || c < 0 || r >= dims.rows as i64 || c >= dims.cols as i64 {
            0.0
        } else {
            image[dims.at(r as usize, c as usize, ch)] as f64
        }
    };
    let mut out = vec![0.0; image.len()];
    for r in 0..dims.rows {
        for c in 0..dims.cols {
            let (x, y) = (c as f64 - cx, r as f64 - cy);
            let sx = cos * x - sin * y + cx;
            let sy = sin * x + cos * y + cy;
            let (x0, y0) = (Float::floor(sx), Float::floor(sy));
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            for ch in 0..dims.channels {
                let v = (1.0 - fy) * ((1.0 - fx) * pixel(y0, x0, ch) + fx * pixel(y0, x0 + 1, ch))
                    + fy * ((1.0 - fx) * pixel(y0 + 1, x0, ch) + fx * pixel(y0 + 1, x0 + 1, ch));
                out[dims.at(r, c, ch)] = v as f32;
            }
        }
    }
    Ok(out)
}

/// Mirrors the columns.
pub fn flip_horizontal(image: &[f32], dims: ImageDims) -> Result<Vec<f32>> {
    check(image, dims)?;
    let mut out = vec![0.0; image.len()];
    for r in 0..dims.rows {
        for c in 0..dims.cols {
            let (src, dst) = (dims.at(r, dims.cols - 1 - c, 0), dims.at(r, c, 0));
            out[dst..dst + dims.channels].copy_from_slice(&image[src..src + dims.channels]);
        }
    }
    Ok(out)
}

/// Centres the image on a zero canvas of `rows x cols`.
pub fn pad_to(image: &[f32], dims: ImageDims, rows: usize, cols: usize) -> Result<Vec<f32>> {
    check(image, dims)?;
    if rows < dims.rows || cols < dims.cols {
        return Err(Error::Config(format!(
            "cannot pad {}x{} images to the smaller {rows}x{cols}",
            dims.rows, dims.cols
        )));
    }
    let big = ImageDims::new(rows, cols, dims.channels);
    let (top, left) = ((rows - dims.rows) / 2, (cols - dims.cols) / 2);
    let mut out = vec![0.0; big.len()];
    let width = dims.cols * dims.channels;
    for r in 0..dims.rows {
        let dst = big.at(r + top, left, 0);
        out[dst..dst + width].copy_from_slice(&image[dims.at(r, 0, 0)..dims.at(r, 0, 0) + width]);
    }
    Ok(out)
}

/// Random training-time augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AugmentPolicy {
    /// Maximum shift as a fraction of each extent; offsets are uniform
    /// integers in `±round(fraction * extent)`.
    pub translate_fraction: f64,
    pub rotate_max_degrees: f64,
    pub horizontal_flip: bool,
    /// Zero-pad to `(rows, cols)` before the other transformations.
    pub pad_to: Option<(usize, usize)>,
}

impl AugmentPolicy {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn translate(fraction: f64) -> Self {
        AugmentPolicy {
            translate_fraction: fraction,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.translate_fraction) {
            return Err(Error::Config(format!(
                "augment.translate {} not in [0, 0.5]",
                self.translate_fraction
            )));
        }
        if !(self.rotate_max_degrees >= 0.0 && self.rotate_max_degrees.is_finite()) {
            return Err(Error::Config(format!(
                "augment.rotate {} must be a non-negative angle",
                self.rotate_max_degrees
            )));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.translate_fraction == 0.0 && self.rotate_max_degrees == 0.0 && !self.horizontal_flip && self.pad_to.is_none()
    }

    /// Image size after augmentation.
    pub fn output_dims(&self, dims: ImageDims) -> ImageDims {
        match self.pad_to {
            Some((rows, cols)) => ImageDims::new(rows, cols, dims.channels),
            None => dims,
        }
    }

    /// Largest integer shift along an axis of `extent` pixels.
    pub fn max_shift(&self, extent: usize) -> i64 {
        Float::round(self.translate_fraction * extent as f64) as i64
    }
}

/// Pad, rotate, translate, flip, in that order.
pub fn augment<R: Rng + ?Sized>(
    image: &[f32],
    dims: ImageDims,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<(Vec<f32>, ImageDims)> {
    policy.validate()?;
    check(image, dims)?;
    let mut img = image.to_vec();
    let mut dims = dims;
    if let Some((rows, cols)) = policy.pad_to {
        img = pad_to(&img, dims, rows, cols)?;
        dims = ImageDims::new(rows, cols, dims.channels);
    }
    if policy.rotate_max_degrees > 0.0 {
        let a = policy.rotate_max_degrees;
        let angle = rng.random_range(-a..=a);
        img = rotate(&img, dims, angle)?;
    }
    if policy.translate_fraction > 0.0 {
        let (kx, ky) = (policy.max_shift(dims.cols), policy.max_shift(dims.rows));
        let dx = rng.random_range(-kx..=kx);
        let dy = rng.random_range(-ky..=ky);
        img = translate(&img, dims, dx, dy)?;
    }
    if policy.horizontal_flip && rng.random_bool(0.5) {
        img = flip_horizontal(&img, dims)?;
    }
    Ok((img, dims))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(dims: ImageDims, r: usize, c: usize) -> Vec<f32> {
        let mut v = vec![0.0; dims.len()];
        v[dims.at(r, c, 0)] = 1.0;
        v
    }

    #[test]
    fn translation_moves_one_hot_pixel() {
        let d = ImageDims::new(5, 6, 1);
        let out = translate(&one_hot(d, 2, 2), d, 3, -1).unwrap();
        assert_eq!(out, one_hot(d, 1, 5));
        let out = translate(&one_hot(d, 2, 2), d, 4, 0).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quarter_turn_is_exact_on_square_images() {
        let d = ImageDims::new(5, 5, 1);
        let out = rotate(&one_hot(d, 2, 4), d, 90.0).unwrap();
        let expected = one_hot(d, 0, 2);
        for (a, b) in out.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn flip_twice_and_pad() {
        let d = ImageDims::new(2, 3, 2);
        let img: Vec<f32> = (0..12).map(|i| i as f32).collect();
        let once = flip_horizontal(&img, d).unwrap();
        assert_eq!(&once[..2], &img[4..6]);
        assert_eq!(flip_horizontal(&once, d).unwrap(), img);
        let padded = pad_to(&one_hot(ImageDims::new(2, 2, 1), 0, 0), ImageDims::new(2, 2, 1), 4, 4).unwrap();
        assert_eq!(padded, one_hot(ImageDims::new(4, 4, 1), 1, 1));
    }

    #[test]
    fn policy_bounds() {
        assert!(AugmentPolicy::translate(0.6).validate().is_err());
        assert_eq!(AugmentPolicy::translate(0.1).max_shift(28), 3);
        assert_eq!(AugmentPolicy::translate(0.2).max_shift(28), 6);
    }
}
