//! Patch extraction shared by the 2D convolution and the per-channel capsule
//! transform.

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output extent `ceil(in / stride)`, zero padding split with the extra
    /// cell after the input.
    Same,
    /// Output extent `floor((in - k) / stride) + 1`.
    Valid,
}

/// Geometry of one strided 2D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_w: usize,
    pub in_h: usize,
    pub in_c: usize,
    pub k_w: usize,
    pub k_h: usize,
    pub stride: usize,
    pub pad_w: usize,
    pub pad_h: usize,
    pub out_w: usize,
    pub out_h: usize,
}

fn out_extent(input: usize, k: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(input);
            Some((out, total / 2))
        }
        Padding::Valid => {
            if k > input {
                None
            } else {
                Some(((input - k) / stride + 1, 0))
            }
        }
    }
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        batch: usize,
        in_w: usize,
        in_h: usize,
        in_c: usize,
        k_w: usize,
        k_h: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if stride == 0 || k_w == 0 || k_h == 0 {
            return Err(Error::Config(alloc::format!(
                "convolution needs positive kernel and stride, got {k_w}x{k_h} stride {stride}"
            )));
        }
        let bad = || {
            Error::Config(alloc::format!(
                "kernel {k_w}x{k_h} does not fit input {in_w}x{in_h} with {padding:?} padding"
            ))
        };
        let (out_w, pad_w) = out_extent(in_w, k_w, stride, padding).ok_or_else(bad)?;
        let (out_h, pad_h) = out_extent(in_h, k_h, stride, padding).ok_or_else(bad)?;
        Ok(ConvGeom {
            batch,
            in_w,
            in_h,
            in_c,
            k_w,
            k_h,
            stride,
            pad_w,
            pad_h,
            out_w,
            out_h,
        })
    }

    /// Number of output locations over the batch.
    pub fn rows(&self) -> usize {
        self.batch * self.out_w * self.out_h
    }

    /// Length of one flattened receptive field.
    pub fn patch(&self) -> usize {
        self.k_w * self.k_h * self.in_c
    }
}

/// Element strides locating `(b, w, h, c)` of the convolved input inside a
/// larger buffer.
#[derive(Debug, Clone, Copy)]
pub struct InputView {
    pub offset: usize,
    pub sb: usize,
    pub sw: usize,
    pub sh: usize,
    pub sc: usize,
}

impl InputView {
    /// Contiguous `(B, W, H, C)` layout.
    pub fn dense(g: &ConvGeom) -> Self {
        InputView {
            offset: 0,
            sb: g.in_w * g.in_h * g.in_c,
            sw: g.in_h * g.in_c,
            sh: g.in_c,
            sc: 1,
        }
    }
}

#[inline]
fn source(o: usize, i: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
    let pos = (o * stride + i).checked_sub(pad)?;
    (pos < extent).then_some(pos)
}

/// Gathers receptive fields into a `rows x patch` matrix; patch order is
/// `(kw, kh, c)`.
pub fn im2col<T: Real>(x: &[T], view: InputView, g: &ConvGeom, cols: &mut [T]) {
    let patch = g.patch();
    debug_assert_eq!(cols.len(), g.rows() * patch);
    let mut row = 0;
    for b in 0..g.batch {
        for ow in 0..g.out_w {
            for oh in 0..g.out_h {
                let dst = &mut cols[row * patch..(row + 1) * patch];
                for i in 0..g.k_w {
                    let iw = source(ow, i, g.stride, g.pad_w, g.in_w);
                    for j in 0..g.k_h {
                        let seg = &mut dst[(i * g.k_h + j) * g.in_c..(i * g.k_h + j + 1) * g.in_c];
                        match (iw, source(oh, j, g.stride, g.pad_h, g.in_h)) {
                            (Some(iw), Some(ih)) => {
                                let base = view.offset + b * view.sb + iw * view.sw + ih * view.sh;
                                if view.sc == 1 {
                                    seg.copy_from_slice(&x[base..base + g.in_c]);
                                } else {
                                    for (c, v) in seg.iter_mut().enumerate() {
                                        *v = x[base + c * view.sc];
                                    }
                                }
                            }
                            _ => seg.fill(T::zero()),
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back, accumulating.
pub fn col2im<T: Real>(cols: &[T], view: InputView, g: &ConvGeom, dx: &mut [T]) {
    let patch = g.patch();
    let mut row = 0;
    for b in 0..g.batch {
        for ow in 0..g.out_w {
            for oh in 0..g.out_h {
                let src = &cols[row * patch..(row + 1) * patch];
                for i in 0..g.k_w {
                    let Some(iw) = source(ow, i, g.stride, g.pad_w, g.in_w) else {
                        continue;
                    };
                    for j in 0..g.k_h {
                        let Some(ih) = source(oh, j, g.stride, g.pad_h, g.in_h) else {
                            continue;
                        };
                        let seg = &src[(i * g.k_h + j) * g.in_c..(i * g.k_h + j + 1) * g.in_c];
                        let base = view.offset + b * view.sb + iw * view.sw + ih * view.sh;
                        for (c, &v) in seg.iter().enumerate() {
                            dx[base + c * view.sc] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_extents() {
        let g = ConvGeom::new(1, 28, 28, 1, 3, 3, 2, Padding::Same).unwrap();
        assert_eq!((g.out_w, g.out_h, g.pad_w), (14, 14, 0));
        let g = ConvGeom::new(1, 14, 14, 1, 3, 3, 2, Padding::Same).unwrap();
        assert_eq!((g.out_w, g.pad_w), (7, 0));
        let g = ConvGeom::new(1, 7, 7, 1, 3, 3, 1, Padding::Same).unwrap();
        assert_eq!((g.out_w, g.pad_w), (7, 1));
        let g = ConvGeom::new(1, 7, 7, 1, 7, 7, 1, Padding::Valid).unwrap();
        assert_eq!((g.out_w, g.out_h), (1, 1));
        let g = ConvGeom::new(1, 9, 9, 1, 3, 3, 2, Padding::Valid).unwrap();
        assert_eq!(g.out_w, 4);
        assert!(ConvGeom::new(1, 5, 5, 1, 7, 7, 1, Padding::Valid).is_err());
    }
}
