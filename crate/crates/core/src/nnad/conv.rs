//! Stride-1 2-D convolution kernels via im2col + GEMM.
//!
//! The transposed convolution is implemented as the exact adjoint of the
//! forward convolution with the same weight and padding.

use super::gemm::gemm;
use crate::{Error, Result};

/// Zero padding on each side of the spatial axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn valid() -> Self {
        Padding::default()
    }

    pub fn symmetric(h: usize, w: usize) -> Self {
        Padding {
            top: h,
            bottom: h,
            left: w,
            right: w,
        }
    }

    /// Output size equals input size; odd leftovers go to the bottom/right.
    pub fn same(kh: usize, kw: usize) -> Self {
        let (th, tw) = (kh.saturating_sub(1), kw.saturating_sub(1));
        Padding {
            top: th / 2,
            bottom: th - th / 2,
            left: tw / 2,
            right: tw - tw / 2,
        }
    }
}

/// Shapes of one forward convolution `x [n, cin, h, w] -> y [n, cout, ho, wo]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Geom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: Padding,
    pub ho: usize,
    pub wo: usize,
}

impl Geom {
    pub fn conv(x: &[usize], wt: &[usize], pad: Padding) -> Result<Geom> {
        let err = || Error::Dimension {
            op: "conv2d",
            lhs: x.to_vec(),
            rhs: wt.to_vec(),
        };
        if x.len() != 4 || wt.len() != 4 || x[1] != wt[1] {
            return Err(err());
        }
        let hp = x[2] + pad.top + pad.bottom;
        let wp = x[3] + pad.left + pad.right;
        if wt[2] == 0 || wt[3] == 0 || hp < wt[2] || wp < wt[3] {
            return Err(err());
        }
        Ok(Geom {
            n: x[0],
            cin: x[1],
            h: x[2],
            w: x[3],
            cout: wt[0],
            kh: wt[2],
            kw: wt[3],
            pad,
            ho: hp - wt[2] + 1,
            wo: wp - wt[3] + 1,
        })
    }

    /// Geometry of the forward convolution whose adjoint maps
    /// `u [n, cin_t, h, w]` through weight `[cin_t, cout_t, kh, kw]`.
    pub fn transposed(u: &[usize], wt: &[usize], pad: Padding) -> Result<Geom> {
        let err = || Error::Dimension {
            op: "conv_transpose2d",
            lhs: u.to_vec(),
            rhs: wt.to_vec(),
        };
        if u.len() != 4 || wt.len() != 4 || u[1] != wt[0] || wt[2] == 0 || wt[3] == 0 {
            return Err(err());
        }
        let ho = (u[2] + wt[2] - 1).checked_sub(pad.top + pad.bottom).ok_or_else(err)?;
        let wo = (u[3] + wt[3] - 1).checked_sub(pad.left + pad.right).ok_or_else(err)?;
        if ho == 0 || wo == 0 || ho + pad.top + pad.bottom < wt[2] || wo + pad.left + pad.right < wt[3] {
            return Err(err());
        }
        Ok(Geom {
            n: u[0],
            cin: wt[1],
            h: ho,
            w: wo,
            cout: wt[0],
            kh: wt[2],
            kw: wt[3],
            pad,
            ho: u[2],
            wo: u[3],
        })
    }

    pub fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    pub fn out_pos(&self) -> usize {
        self.ho * self.wo
    }

    pub fn out_len(&self) -> usize {
        self.cout * self.out_pos()
    }
}

/// Unfolds one sample `x [cin, h, w]` into `cols [k, ho*wo]`.
pub(crate) fn im2col(g: &Geom, x: &[f64], cols: &mut [f64]) {
    let pos = g.out_pos();
    let mut row = 0;
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut cols[row * pos..(row + 1) * pos];
                for oh in 0..g.ho {
                    let ih = (oh + ki) as isize - g.pad.top as isize;
                    let line = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih as usize >= g.h {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + ih as usize) * g.w..][..g.w];
                    for (ow, v) in line.iter_mut().enumerate() {
                        let iw = (ow + kj) as isize - g.pad.left as isize;
                        *v = if iw < 0 || iw as usize >= g.w { 0.0 } else { src[iw as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds `cols` into `x`.
pub(crate) fn col2im(g: &Geom, cols: &[f64], x: &mut [f64]) {
    let pos = g.out_pos();
    let mut row = 0;
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &cols[row * pos..(row + 1) * pos];
                for oh in 0..g.ho {
                    let ih = (oh + ki) as isize - g.pad.top as isize;
                    if ih < 0 || ih as usize >= g.h {
                        continue;
                    }
                    let dst = &mut x[(c * g.h + ih as usize) * g.w..][..g.w];
                    for ow in 0..g.wo {
                        let iw = (ow + kj) as isize - g.pad.left as isize;
                        if iw >= 0 && (iw as usize) < g.w {
                            dst[iw as usize] += src[oh * g.wo + ow];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `y = conv(x, w) + b`; returns `y` and the unfolded input (kept for the
/// weight gradient when `keep_cols` is set).
pub(crate) fn conv_forward(g: &Geom, x: &[f64], w: &[f64], b: &[f64], keep_cols: bool) -> (Vec<f64>, Vec<f64>) {
    let (k, pos) = (g.k(), g.out_pos());
    let mut y = vec![0.0; g.n * g.out_len()];
    let mut kept = if keep_cols { vec![0.0; g.n * k * pos] } else { Vec::new() };
    let mut scratch = if keep_cols { Vec::new() } else { vec![0.0; k * pos] };
    for s in 0..g.n {
        let cols = if keep_cols { &mut kept[s * k * pos..(s + 1) * k * pos] } else { &mut scratch[..] };
        im2col(g, &x[s * g.in_len()..(s + 1) * g.in_len()], cols);
        let ys = &mut y[s * g.out_len()..(s + 1) * g.out_len()];
        for (o, bias) in b.iter().enumerate() {
            ys[o * pos..(o + 1) * pos].fill(*bias);
        }
        gemm(g.cout, k, pos, 1.0, w, false, cols, false, 1.0, ys);
    }
    (y, kept)
}

/// Gradients of the forward convolution.
pub(crate) fn conv_backward(
    g: &Geom,
    x: &[f64],
    cols: &[f64],
    w: &[f64],
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let (k, pos) = (g.k(), g.out_pos());
    if let Some(db) = db {
        for s in 0..g.n {
            let ys = &dy[s * g.out_len()..(s + 1) * g.out_len()];
            for (o, acc) in db.iter_mut().enumerate() {
                *acc += ys[o * pos..(o + 1) * pos].iter().sum::<f64>();
            }
        }
    }
    if let Some(dw) = dw {
        let mut scratch = Vec::new();
        for s in 0..g.n {
            let c = if cols.is_empty() {
                scratch.resize(k * pos, 0.0);
                im2col(g, &x[s * g.in_len()..(s + 1) * g.in_len()], &mut scratch);
                &scratch[..]
            } else {
                &cols[s * k * pos..(s + 1) * k * pos]
            };
            let ys = &dy[s * g.out_len()..(s + 1) * g.out_len()];
            gemm(g.cout, pos, k, 1.0, ys, false, c, true, 1.0, dw);
        }
    }
    if let Some(dx) = dx {
        let mut dcols = vec![0.0; k * pos];
        for s in 0..g.n {
            let ys = &dy[s * g.out_len()..(s + 1) * g.out_len()];
            gemm(k, g.cout, pos, 1.0, w, true, ys, false, 0.0, &mut dcols);
            col2im(g, &dcols, &mut dx[s * g.in_len()..(s + 1) * g.in_len()]);
        }
    }
}

/// Transposed convolution `z = conv^T(u, w) + b`, where `g` is the geometry
/// of the forward convolution `z -> u`.
pub(crate) fn conv_t_forward(g: &Geom, u: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let (k, pos) = (g.k(), g.out_pos());
    let mut z = vec![0.0; g.n * g.in_len()];
    let mut cols = vec![0.0; k * pos];
    let plane = g.h * g.w;
    for s in 0..g.n {
        let us = &u[s * g.out_len()..(s + 1) * g.out_len()];
        gemm(k, g.cout, pos, 1.0, w, true, us, false, 0.0, &mut cols);
        let zs = &mut z[s * g.in_len()..(s + 1) * g.in_len()];
        for (c, bias) in b.iter().enumerate() {
            zs[c * plane..(c + 1) * plane].fill(*bias);
        }
        col2im(g, &cols, zs);
    }
    z
}

pub(crate) fn conv_t_backward(
    g: &Geom,
    u: &[f64],
    w: &[f64],
    dz: &[f64],
    du: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let (k, pos) = (g.k(), g.out_pos());
    let plane = g.h * g.w;
    if let Some(db) = db {
        for s in 0..g.n {
            let zs = &dz[s * g.in_len()..(s + 1) * g.in_len()];
            for (c, acc) in db.iter_mut().enumerate() {
                *acc += zs[c * plane..(c + 1) * plane].iter().sum::<f64>();
            }
        }
    }
    let mut du = du;
    if du.is_none() && dw.is_none() {
        return;
    }
    let mut cols = vec![0.0; k * pos];
    for s in 0..g.n {
        im2col(g, &dz[s * g.in_len()..(s + 1) * g.in_len()], &mut cols);
        if let Some(du) = du.as_deref_mut() {
            let us = &mut du[s * g.out_len()..(s + 1) * g.out_len()];
            gemm(g.cout, k, pos, 1.0, w, false, &cols, false, 1.0, us);
        }
        if let Some(dw) = dw.as_deref_mut() {
            let us = &u[s * g.out_len()..(s + 1) * g.out_len()];
            gemm(g.cout, pos, k, 1.0, us, false, &cols, true, 1.0, dw);
        }
    }
}
