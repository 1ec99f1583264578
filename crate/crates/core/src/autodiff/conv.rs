//! Convolution, pooling and upsampling kernels (forward and backward).

use crate::error::{Error, Result};
use crate::gemm::gemm;

/// Stride and per-side zero padding of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    /// Padding as `[top, bottom, left, right]`.
    pub pad: [usize; 4],
}

impl ConvGeometry {
    pub fn symmetric(stride: usize, pad: usize) -> Self {
        ConvGeometry {
            stride,
            pad: [pad; 4],
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub geo: ConvGeometry,
}

impl ConvDims {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.geo.stride == 1 && self.geo.pad == [0; 4]
    }
}

/// Output length along one axis; rejects configurations where the kernel
/// does not tile the padded input exactly.
pub(crate) fn output_len(len: usize, kernel: usize, stride: usize, lo: usize, hi: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Config("convolution stride must be >= 1".into()));
    }
    let padded = len + lo + hi;
    if padded < kernel {
        return Err(Error::Config(format!(
            "kernel {kernel} larger than padded input {padded}"
        )));
    }
    if (padded - kernel) % stride != 0 {
        return Err(Error::Config(format!(
            "non-integral convolution output: ({len} + {lo} + {hi} - {kernel}) / {stride}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

fn im2col(x: &[f64], d: &ConvDims, cols: &mut [f64]) {
    let [pt, _, pl, _] = d.geo.pad;
    let s = d.geo.stride;
    let p = d.positions();
    for c in 0..d.cin {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..d.ho {
                    let out = &mut dst[oy * d.wo..(oy + 1) * d.wo];
                    let iy = (oy * s + ki) as isize - pt as isize;
                    if iy < 0 || iy >= d.h as isize {
                        out.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * s + kj) as isize - pl as isize;
                        *o = if ix < 0 || ix >= d.w as isize {
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

fn col2im_add(cols: &[f64], d: &ConvDims, dx: &mut [f64]) {
    let [pt, _, pl, _] = d.geo.pad;
    let s = d.geo.stride;
    let p = d.positions();
    for c in 0..d.cin {
        let plane = &mut dx[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..d.ho {
                    let iy = (oy * s + ki) as isize - pt as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, g) in src[oy * d.wo..(oy + 1) * d.wo].iter().enumerate() {
                        let ix = (ox * s + kj) as isize - pl as isize;
                        if ix >= 0 && ix < d.w as isize {
                            dst[ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward(x: &[f64], k: &[f64], d: &ConvDims) -> Vec<f64> {
    let in_img = d.cin * d.h * d.w;
    let out_img = d.cout * d.positions();
    let mut out = vec![0.0; d.batch * out_img];
    let mut cols = if d.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; d.patch() * d.positions()]
    };
    for b in 0..d.batch {
        let xb = &x[b * in_img..(b + 1) * in_img];
        let src = if d.is_pointwise() {
            xb
        } else {
            im2col(xb, d, &mut cols);
            &cols
        };
        gemm(
            d.cout,
            d.patch(),
            d.positions(),
            k,
            false,
            src,
            false,
            0.0,
            &mut out[b * out_img..(b + 1) * out_img],
        );
    }
    out
}

/// Returns `(dx, dk)`; each is computed only when requested.
pub(crate) fn conv_backward(
    x: &[f64],
    k: &[f64],
    dy: &[f64],
    d: &ConvDims,
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let in_img = d.cin * d.h * d.w;
    let out_img = d.cout * d.positions();
    let mut dx = want_dx.then(|| vec![0.0; d.batch * in_img]);
    let mut dk = want_dk.then(|| vec![0.0; k.len()]);
    let mut cols = vec![0.0; d.patch() * d.positions()];
    let mut dcols = if want_dx && !d.is_pointwise() {
        vec![0.0; d.patch() * d.positions()]
    } else {
        Vec::new()
    };
    for b in 0..d.batch {
        let xb = &x[b * in_img..(b + 1) * in_img];
        let dyb = &dy[b * out_img..(b + 1) * out_img];
        if let Some(dk) = dk.as_mut() {
            let src = if d.is_pointwise() {
                xb
            } else {
                im2col(xb, d, &mut cols);
                &cols
            };
            gemm(d.cout, d.positions(), d.patch(), dyb, false, src, true, 1.0, dk);
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_img..(b + 1) * in_img];
            if d.is_pointwise() {
                gemm(d.patch(), d.cout, d.positions(), k, true, dyb, false, 1.0, dxb);
            } else {
                gemm(d.patch(), d.cout, d.positions(), k, true, dyb, false, 0.0, &mut dcols);
                col2im_add(&dcols, d, dxb);
            }
        }
    }
    (dx, dk)
}

/// Nearest-neighbour upsampling of `planes` stacked `h×w` planes.
pub(crate) fn upsample_forward(x: &[f64], planes: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        for oy in 0..oh {
            let src = &x[(p * h + oy / f) * w..(p * h + oy / f + 1) * w];
            let dst = &mut out[(p * oh + oy) * ow..(p * oh + oy + 1) * ow];
            for (ox, v) in dst.iter_mut().enumerate() {
                *v = src[ox / f];
            }
        }
    }
    out
}

pub(crate) fn upsample_backward(dy: &[f64], planes: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (oh, ow) = (h * f, w * f);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        for oy in 0..oh {
            let src = &dy[(p * oh + oy) * ow..(p * oh + oy + 1) * ow];
            let dst = &mut dx[(p * h + oy / f) * w..(p * h + oy / f + 1) * w];
            for (ox, g) in src.iter().enumerate() {
                dst[ox / f] += g;
            }
        }
    }
    dx
}

/// 2×2 average pooling with stride 2.
pub(crate) fn avgpool2_forward(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let (y, x0) = (2 * oy, 2 * ox);
                out[(p * oh + oy) * ow + ox] = 0.25
                    * (plane[y * w + x0] + plane[y * w + x0 + 1] + plane[(y + 1) * w + x0] + plane[(y + 1) * w + x0 + 1]);
            }
        }
    }
    out
}

pub(crate) fn avgpool2_backward(dy: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = 0.25 * dy[(p * oh + oy) * ow + ox];
                let base = p * h * w;
                for (dy_, dx_) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    dx[base + (2 * oy + dy_) * w + 2 * ox + dx_] += g;
                }
            }
        }
    }
    dx
}
