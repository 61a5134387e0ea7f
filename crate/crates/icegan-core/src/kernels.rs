//! Batched conv / transposed-conv kernels built from im2col + gemm.
//!
//! Weight layouts follow the adjoint pairing: conv weights are
//! `[c_out, c_in, k, k]`, transposed-conv weights `[c_in, c_out, k, k]`,
//! so a conv and its adjoint deconv can share one buffer.

use crate::gemm;

/// Geometry of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// floor((h + 2 pad - k)/stride) + 1; None when degenerate.
    pub fn conv_out(&self, h: usize) -> Option<usize> {
        let padded = h + 2 * self.pad;
        if padded < self.kernel || self.stride == 0 {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    /// (h - 1) * stride - 2 pad + k for the transposed direction.
    pub fn deconv_out(&self, h: usize) -> Option<usize> {
        let grown = (h - 1) * self.stride + self.kernel;
        if grown < 2 * self.pad + 1 {
            return None;
        }
        Some(grown - 2 * self.pad)
    }
}

/// Unfolds one image `[c, h, w]` into columns `[c*k*k, ho*wo]`.
pub fn im2col(img: &[f64], c: usize, h: usize, w: usize, g: ConvGeom, cols: &mut [f64]) {
    let k = g.kernel;
    let ho = g.conv_out(h).expect("validated upstream");
    let wo = g.conv_out(w).expect("validated upstream");
    let n = ho * wo;
    debug_assert_eq!(cols.len(), c * k * k * n);
    for ci in 0..c {
        let img_c = &img[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let out_row = &mut cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let base = oy * wo;
                    if iy < 0 || iy >= h as isize {
                        out_row[base..base + wo].fill(0.0);
                        continue;
                    }
                    let src = &img_c[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        out_row[base + ox] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: scatter-adds columns back into an image.
pub fn col2im_acc(cols: &[f64], c: usize, h: usize, w: usize, g: ConvGeom, img: &mut [f64]) {
    let k = g.kernel;
    let ho = g.conv_out(h).expect("validated upstream");
    let wo = g.conv_out(w).expect("validated upstream");
    let n = ho * wo;
    debug_assert_eq!(cols.len(), c * k * k * n);
    debug_assert_eq!(img.len(), c * h * w);
    for ci in 0..c {
        let img_c = &mut img[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let col_row = &cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut img_c[iy as usize * w..(iy as usize + 1) * w];
                    let base = oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += col_row[base + ox];
                        }
                    }
                }
            }
        }
    }
}

/// y[b] = w · im2col(x[b]); x `[b, ci, h, w]`, w `[co, ci*k*k]`, y `[b, co, ho, wo]`.
pub fn conv2d_forward(
    x: &[f64],
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    c_out: usize,
    g: ConvGeom,
    y: &mut [f64],
) {
    let ho = g.conv_out(h).expect("validated upstream");
    let wo = g.conv_out(w).expect("validated upstream");
    let n = ho * wo;
    let kk = c_in * g.kernel * g.kernel;
    let mut cols = vec![0.0; kk * n];
    for b in 0..batch {
        im2col(&x[b * c_in * h * w..], c_in, h, w, g, &mut cols);
        gemm::dgemm(c_out, kk, n, weight, &cols, &mut y[b * c_out * n..(b + 1) * c_out * n]);
    }
}

/// dx[b] = col2im(w' · dy[b]).
pub fn conv2d_backward_data(
    dy: &[f64],
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    c_out: usize,
    g: ConvGeom,
    dx: &mut [f64],
) {
    let ho = g.conv_out(h).expect("validated upstream");
    let wo = g.conv_out(w).expect("validated upstream");
    let n = ho * wo;
    let kk = c_in * g.kernel * g.kernel;
    let mut dcols = vec![0.0; kk * n];
    for b in 0..batch {
        dcols.fill(0.0);
        gemm::dgemm_at_acc(kk, c_out, n, 1.0, weight, &dy[b * c_out * n..(b + 1) * c_out * n], &mut dcols);
        col2im_acc(&dcols, c_in, h, w, g, &mut dx[b * c_in * h * w..(b + 1) * c_in * h * w]);
    }
}

/// dw += sum_b dy[b] · im2col(x[b])'.
pub fn conv2d_backward_weights(
    dy: &[f64],
    x: &[f64],
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    g: ConvGeom,
    dw: &mut [f64],
) {
    let ho = g.conv_out(h).expect("validated upstream");
    let wo = g.conv_out(w).expect("validated upstream");
    let n = ho * wo;
    let kk = c_in * g.kernel * g.kernel;
    let mut cols = vec![0.0; kk * n];
    for b in 0..batch {
        im2col(&x[b * c_in * h * w..], c_in, h, w, g, &mut cols);
        gemm::dgemm_bt_acc(c_out, n, kk, 1.0, &dy[b * c_out * n..(b + 1) * c_out * n], &cols, dw);
    }
}

/// Transposed conv forward: y[b] = col2im(w' · x[b]) over the output
/// geometry; x `[b, ci, h, w]`, w `[ci, co*k*k]`, y `[b, co, ho, wo]`.
pub fn deconv2d_forward(
    x: &[f64],
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    c_out: usize,
    g: ConvGeom,
    y: &mut [f64],
) {
    let ho = g.deconv_out(h).expect("validated upstream");
    let wo = g.deconv_out(w).expect("validated upstream");
    let kk = c_out * g.kernel * g.kernel;
    let n = h * w;
    let mut dcols = vec![0.0; kk * n];
    y.fill(0.0);
    for b in 0..batch {
        dcols.fill(0.0);
        gemm::dgemm_at_acc(kk, c_in, n, 1.0, weight, &x[b * c_in * n..(b + 1) * c_in * n], &mut dcols);
        col2im_acc(&dcols, c_out, ho, wo, g, &mut y[b * c_out * ho * wo..(b + 1) * c_out * ho * wo]);
    }
}

/// dx[b] = w · im2col(dy[b]): the conv that is adjoint to the deconv.
pub fn deconv2d_backward_data(
    dy: &[f64],
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    c_out: usize,
    g: ConvGeom,
    dx: &mut [f64],
) {
    let ho = g.deconv_out(h).expect("validated upstream");
    let wo = g.deconv_out(w).expect("validated upstream");
    let kk = c_out * g.kernel * g.kernel;
    let n = h * w;
    let mut cols = vec![0.0; kk * n];
    for b in 0..batch {
        im2col(&dy[b * c_out * ho * wo..], c_out, ho, wo, g, &mut cols);
        gemm::dgemm_acc(c_in, kk, n, 1.0, weight, &cols, &mut dx[b * c_in * n..(b + 1) * c_in * n]);
    }
}

/// dw += sum_b x[b] · im2col(dy[b])'.
pub fn deconv2d_backward_weights(
    dy: &[f64],
    x: &[f64],
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    g: ConvGeom,
    dw: &mut [f64],
) {
    let ho = g.deconv_out(h).expect("validated upstream");
    let wo = g.deconv_out(w).expect("validated upstream");
    let kk = c_out * g.kernel * g.kernel;
    let n = h * w;
    let mut cols = vec![0.0; kk * n];
    for b in 0..batch {
        im2col(&dy[b * c_out * ho * wo..], c_out, ho, wo, g, &mut cols);
        gemm::dgemm_bt_acc(c_in, n, kk, 1.0, &x[b * c_in * n..(b + 1) * c_in * n], &cols, dw);
    }
}
