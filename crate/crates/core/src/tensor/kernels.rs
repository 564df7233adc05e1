//! Raw slice kernels behind the tape ops. Convolution goes through a
//! per-image im2col buffer so the inner loops run over contiguous pixels.

use crate::error::{Error, Result};

/// Output extent of a convolution along one axis. Partial windows at the
/// far edge are dropped (floor semantics).
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Geometry("stride must be positive".into()));
    }
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::Geometry(format!(
            "kernel {kernel} larger than padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d expects 4-d input and weight, got {input:?} and {weight:?}"
            )));
        }
        if input[1] != weight[1] {
            return Err(Error::Shape(format!(
                "conv2d input has {} channels but weight expects {}",
                input[1], weight[1]
            )));
        }
        if weight[2] != weight[3] {
            return Err(Error::Shape(format!("conv2d kernel must be square, got {weight:?}")));
        }
        let k = weight[2];
        Ok(Self {
            n: input[0],
            c_in: input[1],
            h: input[2],
            w: input[3],
            c_out: weight[0],
            k,
            stride,
            pad,
            h_out: conv_output_size(input[2], k, stride, pad)?,
            w_out: conv_output_size(input[3], k, stride, pad)?,
        })
    }

    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn pixels(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Valid `[lo, hi)` output range along one axis for kernel offset `off`.
    fn valid(&self, off: usize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > off { (self.pad - off).div_ceil(s) } else { 0 };
        let hi = if extent + self.pad > off {
            (extent + self.pad - off).div_ceil(s).min(out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        cols.iter_mut().for_each(|v| *v = 0.0);
        let p = self.pixels();
        for ci in 0..self.c_in {
            let plane = &image[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for kh in 0..self.k {
                let (oh_lo, oh_hi) = self.valid(kh, self.h, self.h_out);
                for kw in 0..self.k {
                    let (ow_lo, ow_hi) = self.valid(kw, self.w, self.w_out);
                    let row = (ci * self.k + kh) * self.k + kw;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oh in oh_lo..oh_hi {
                        let ih = oh * self.stride + kh - self.pad;
                        let src = &plane[ih * self.w..(ih + 1) * self.w];
                        let out_row = &mut dst[oh * self.w_out..(oh + 1) * self.w_out];
                        if self.stride == 1 {
                            let base = ow_lo + kw - self.pad;
                            out_row[ow_lo..ow_hi]
                                .copy_from_slice(&src[base..base + (ow_hi - ow_lo)]);
                        } else {
                            for ow in ow_lo..ow_hi {
                                out_row[ow] = src[ow * self.stride + kw - self.pad];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let p = self.pixels();
        for ci in 0..self.c_in {
            let plane = &mut image[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for kh in 0..self.k {
                let (oh_lo, oh_hi) = self.valid(kh, self.h, self.h_out);
                for kw in 0..self.k {
                    let (ow_lo, ow_hi) = self.valid(kw, self.w, self.w_out);
                    let row = (ci * self.k + kh) * self.k + kw;
                    let src = &cols[row * p..(row + 1) * p];
                    for oh in oh_lo..oh_hi {
                        let ih = oh * self.stride + kh - self.pad;
                        let dst = &mut plane[ih * self.w..(ih + 1) * self.w];
                        let in_row = &src[oh * self.w_out..(oh + 1) * self.w_out];
                        for ow in ow_lo..ow_hi {
                            dst[ow * self.stride + kw - self.pad] += in_row[ow];
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f64], weight: &[f64]) -> Vec<f64> {
    let (rows, p) = (g.rows(), g.pixels());
    let in_img = g.c_in * g.h * g.w;
    let out_img = g.c_out * p;
    let mut out = vec![0.0; g.n * out_img];
    let mut cols = vec![0.0; rows * p];
    for n in 0..g.n {
        g.im2col(&input[n * in_img..(n + 1) * in_img], &mut cols);
        let out_n = &mut out[n * out_img..(n + 1) * out_img];
        for co in 0..g.c_out {
            let dst = &mut out_n[co * p..(co + 1) * p];
            let wrow = &weight[co * rows..(co + 1) * rows];
            for (r, &wv) in wrow.iter().enumerate() {
                if wv != 0.0 {
                    axpy(wv, &cols[r * p..(r + 1) * p], dst);
                }
            }
        }
    }
    out
}

/// Gradients of a convolution with respect to its input and weight, each
/// computed only when requested.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    want_input: bool,
    want_weight: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (rows, p) = (g.rows(), g.pixels());
    let in_img = g.c_in * g.h * g.w;
    let out_img = g.c_out * p;
    let mut gin = want_input.then(|| vec![0.0; g.n * in_img]);
    let mut gw = want_weight.then(|| vec![0.0; weight.len()]);
    let mut cols = vec![0.0; rows * p];
    let mut gcols = vec![0.0; rows * p];
    for n in 0..g.n {
        let go = &grad_out[n * out_img..(n + 1) * out_img];
        if let Some(gw) = gw.as_mut() {
            g.im2col(&input[n * in_img..(n + 1) * in_img], &mut cols);
            for co in 0..g.c_out {
                let gorow = &go[co * p..(co + 1) * p];
                let gwrow = &mut gw[co * rows..(co + 1) * rows];
                for (r, slot) in gwrow.iter_mut().enumerate() {
                    *slot += dot(gorow, &cols[r * p..(r + 1) * p]);
                }
            }
        }
        if let Some(gin) = gin.as_mut() {
            gcols.iter_mut().for_each(|v| *v = 0.0);
            for co in 0..g.c_out {
                let gorow = &go[co * p..(co + 1) * p];
                let wrow = &weight[co * rows..(co + 1) * rows];
                for (r, &wv) in wrow.iter().enumerate() {
                    if wv != 0.0 {
                        axpy(wv, gorow, &mut gcols[r * p..(r + 1) * p]);
                    }
                }
            }
            g.col2im(&gcols, &mut gin[n * in_img..(n + 1) * in_img]);
        }
    }
    (gin, gw)
}

/// `x[n,d] · w[d,m] + b[m]`.
pub(crate) fn linear_forward(x: &[f64], w: &[f64], b: &[f64], n: usize, d: usize, m: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let mut row = b.to_vec();
        for (k, &xv) in x[i * d..(i + 1) * d].iter().enumerate() {
            axpy(xv, &w[k * m..(k + 1) * m], &mut row);
        }
        out.extend_from_slice(&row);
    }
    out
}
