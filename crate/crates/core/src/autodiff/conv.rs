//! im2col-based 2-D convolution kernels (NCHW layout, zero padding).

use crate::tensor::{matmul, matmul_a_bt, matmul_at_b};
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.out_height() * self.out_width()
    }

    fn in_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    /// Calls `f(patch_row, out_pixel, input_offset)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = (self.out_height(), self.out_width());
        for c in 0..self.in_channels {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            let src = (c * self.height + iy as usize) * self.width + ix as usize;
                            f(row, oy * wo + ox, src);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, image: &[f64]) -> Vec<f64> {
        let npix = self.out_pixels();
        let mut cols = vec![0.0; self.patch_len() * npix];
        self.for_each_tap(|row, pix, src| cols[row * npix + pix] = image[src]);
        cols
    }

    fn col2im(&self, cols: &[f64], image_grad: &mut [f64]) {
        let npix = self.out_pixels();
        self.for_each_tap(|row, pix, src| image_grad[src] += cols[row * npix + pix]);
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeometry, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let npix = g.out_pixels();
    let out_len = g.out_channels * npix;
    let mut out = vec![0.0; g.batch * out_len];
    out.par_chunks_mut(out_len).enumerate().for_each(|(n, dst)| {
        let cols = g.im2col(&input[n * g.in_len()..(n + 1) * g.in_len()]);
        dst.copy_from_slice(&matmul(kernel, &cols, g.out_channels, g.patch_len(), npix));
    });
    out
}

/// Per-image `(input_grad, kernel_grad)`.
type ConvGrads = (Option<Vec<f64>>, Option<Vec<f64>>);

/// Returns `(input_grad, kernel_grad)`; either may be skipped.
pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    out_grad: &[f64],
    want_input: bool,
    want_kernel: bool,
) -> ConvGrads {
    let npix = g.out_pixels();
    let out_len = g.out_channels * npix;
    let per_image: Vec<ConvGrads> = (0..g.batch)
        .into_par_iter()
        .map(|n| {
            let gy = &out_grad[n * out_len..(n + 1) * out_len];
            let dk = want_kernel.then(|| {
                let cols = g.im2col(&input[n * g.in_len()..(n + 1) * g.in_len()]);
                matmul_a_bt(gy, &cols, g.out_channels, npix, g.patch_len())
            });
            let dx = want_input.then(|| {
                let dcols = matmul_at_b(kernel, gy, g.patch_len(), g.out_channels, npix);
                let mut dx = vec![0.0; g.in_len()];
                g.col2im(&dcols, &mut dx);
                dx
            });
            (dx, dk)
        })
        .collect();

    let input_grad = want_input.then(|| {
        let mut dx = Vec::with_capacity(g.batch * g.in_len());
        for (part, _) in &per_image {
            dx.extend_from_slice(part.as_ref().expect("requested"));
        }
        dx
    });
    // Summed in image order so the result does not depend on scheduling.
    let kernel_grad = want_kernel.then(|| {
        let mut dk = vec![0.0; g.out_channels * g.patch_len()];
        for (_, part) in &per_image {
            for (a, b) in dk.iter_mut().zip(part.as_ref().expect("requested")) {
                *a += b;
            }
        }
        dk
    });
    (input_grad, kernel_grad)
}
