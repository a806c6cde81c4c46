//! Raw convolution kernels on flat buffers.
//!
//! 2D convolutions lower to im2col + GEMM. The transposed convolution is the
//! data-gradient of the forward convolution, so both share one geometry.

use crate::scalar::{gemm, Scalar};

/// Geometry of a 2D cross-correlation from an `cin×h×w` image to a
/// `cout×ho×wo` map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Conv2dGeom {
    pub fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    pub fn image_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    pub fn map_len(&self) -> usize {
        self.cout * self.ho * self.wo
    }
}

pub fn im2col<T: Scalar>(img: &[T], g: &Conv2dGeom, cols: &mut [T]) {
    let n = g.col_cols();
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * n;
                for oy in 0..g.ho {
                    let dst = &mut cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &img[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add columns back into an image (adjoint of [`im2col`]).
pub fn col2im<T: Scalar>(cols: &[T], g: &Conv2dGeom, img: &mut [T]) {
    let n = g.col_cols();
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * n;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            img[base + ix as usize] += cols[row + oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out[b] = K · im2col(x[b])` for each batch entry.
pub fn conv2d_forward<T: Scalar>(x: &[T], k: &[T], batch: usize, g: &Conv2dGeom) -> Vec<T> {
    let (kdim, n) = (g.col_rows(), g.col_cols());
    let mut cols = vec![T::zero(); kdim * n];
    let mut out = vec![T::zero(); batch * g.map_len()];
    for b in 0..batch {
        im2col(&x[b * g.image_len()..(b + 1) * g.image_len()], g, &mut cols);
        gemm(
            g.cout,
            kdim,
            n,
            k,
            false,
            &cols,
            false,
            &mut out[b * g.map_len()..(b + 1) * g.map_len()],
            false,
        );
    }
    out
}

/// Image gradient of the forward convolution; also the forward transposed
/// convolution of `dout` with kernel `k`.
pub fn conv2d_backward_data<T: Scalar>(dout: &[T], k: &[T], batch: usize, g: &Conv2dGeom) -> Vec<T> {
    let (kdim, n) = (g.col_rows(), g.col_cols());
    let mut dcols = vec![T::zero(); kdim * n];
    let mut dx = vec![T::zero(); batch * g.image_len()];
    for b in 0..batch {
        gemm(
            kdim,
            g.cout,
            n,
            k,
            true,
            &dout[b * g.map_len()..(b + 1) * g.map_len()],
            false,
            &mut dcols,
            false,
        );
        col2im(&dcols, g, &mut dx[b * g.image_len()..(b + 1) * g.image_len()]);
    }
    dx
}

/// Accumulate the kernel gradient `Σ_b dout[b] · im2col(x[b])ᵀ` into `dk`.
pub fn conv2d_backward_kernel<T: Scalar>(x: &[T], dout: &[T], batch: usize, g: &Conv2dGeom, dk: &mut [T]) {
    let (kdim, n) = (g.col_rows(), g.col_cols());
    let mut cols = vec![T::zero(); kdim * n];
    for b in 0..batch {
        im2col(&x[b * g.image_len()..(b + 1) * g.image_len()], g, &mut cols);
        gemm(
            g.cout,
            n,
            kdim,
            &dout[b * g.map_len()..(b + 1) * g.map_len()],
            false,
            &cols,
            true,
            dk,
            true,
        );
    }
}

/// Geometry of a stride-1 3D cross-correlation with symmetric zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dGeom {
    pub cin: usize,
    pub cout: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub kd: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl Conv3dGeom {
    pub fn out_dims(&self) -> (usize, usize, usize) {
        (
            self.d + 2 * self.pad + 1 - self.kd,
            self.h + 2 * self.pad + 1 - self.kh,
            self.w + 2 * self.pad + 1 - self.kw,
        )
    }
}

/// Visit every (output index, input index, kernel index) triple that
/// contributes to the convolution.
fn conv3d_visit(g: &Conv3dGeom, batch: usize, mut f: impl FnMut(usize, usize, usize)) {
    let (od, oh, ow) = g.out_dims();
    let p = g.pad as isize;
    for b in 0..batch {
        for co in 0..g.cout {
            for z in 0..od {
                for y in 0..oh {
                    for x in 0..ow {
                        let oi = (((b * g.cout + co) * od + z) * oh + y) * ow + x;
                        for ci in 0..g.cin {
                            for dz in 0..g.kd {
                                let iz = (z + dz) as isize - p;
                                if iz < 0 || iz >= g.d as isize {
                                    continue;
                                }
                                for dy in 0..g.kh {
                                    let iy = (y + dy) as isize - p;
                                    if iy < 0 || iy >= g.h as isize {
                                        continue;
                                    }
                                    for dx in 0..g.kw {
                                        let ix = (x + dx) as isize - p;
                                        if ix < 0 || ix >= g.w as isize {
                                            continue;
                                        }
                                        let ii = ((((b * g.cin + ci) * g.d + iz as usize) * g.h + iy as usize) * g.w)
                                            + ix as usize;
                                        let ki = (((co * g.cin + ci) * g.kd + dz) * g.kh + dy) * g.kw + dx;
                                        f(oi, ii, ki);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv3d_forward<T: Scalar>(x: &[T], k: &[T], batch: usize, g: &Conv3dGeom) -> Vec<T> {
    let (od, oh, ow) = g.out_dims();
    let mut out = vec![T::zero(); batch * g.cout * od * oh * ow];
    conv3d_visit(g, batch, |oi, ii, ki| out[oi] += x[ii] * k[ki]);
    out
}

pub fn conv3d_backward<T: Scalar>(x: &[T], k: &[T], dout: &[T], batch: usize, g: &Conv3dGeom) -> (Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); k.len()];
    conv3d_visit(g, batch, |oi, ii, ki| {
        dx[ii] += dout[oi] * k[ki];
        dk[ki] += dout[oi] * x[ii];
    });
    (dx, dk)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = Conv2dGeom {
            cin: 2,
            h: 5,
            w: 4,
            cout: 1,
            kh: 3,
            kw: 3,
            stride: 2,
            pad: 1,
            ho: 3,
            wo: 2,
        };
        let img: Vec<f64> = (0..g.image_len()).map(|i| (i as f64 * 0.7).sin()).collect();
        let cols_in: Vec<f64> = (0..g.col_rows() * g.col_cols())
            .map(|i| (i as f64 * 0.3).cos())
            .collect();
        let mut cols = vec![0.0; cols_in.len()];
        im2col(&img, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&cols_in).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; img.len()];
        col2im(&cols_in, &g, &mut back);
        let rhs: f64 = img.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
