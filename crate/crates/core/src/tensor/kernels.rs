//! Raw numeric kernels. Each output row is produced by exactly one task, so
//! results do not depend on the thread count.

use rayon::prelude::*;

/// Multiply-adds below which a product runs on the calling thread.
const PAR_MIN_WORK: usize = 1 << 15;

/// `c[m×n] = a[m×k] · b[k×n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    let row = |(i, c_row): (usize, &mut [f64])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    };
    if m * k * n >= PAR_MIN_WORK && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
    c
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    pub fn rows(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

/// Unfolds NHWC input into `[n·oh·ow, kh·kw·cin]` patches; out-of-bounds taps are zero.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.patch();
    let mut cols = vec![0.0; g.rows() * patch];
    let per_item = g.oh * g.ow * patch;
    let fill = |(b, out): (usize, &mut [f64])| {
        let img = &x[b * g.h * g.w * g.cin..(b + 1) * g.h * g.w * g.cin];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let base = (oy * g.ow + ox) * patch;
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = (iy as usize * g.w + ix as usize) * g.cin;
                        let dst = base + (ky * g.kw + kx) * g.cin;
                        out[dst..dst + g.cin].copy_from_slice(&img[src..src + g.cin]);
                    }
                }
            }
        }
    };
    cols.par_chunks_mut(per_item).enumerate().for_each(fill);
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the NHWC input.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.patch();
    let img_len = g.h * g.w * g.cin;
    let mut dx = vec![0.0; g.n * img_len];
    let per_item = g.oh * g.ow * patch;
    let scatter = |(b, img): (usize, &mut [f64])| {
        let src_item = &cols[b * per_item..(b + 1) * per_item];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let base = (oy * g.ow + ox) * patch;
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = (iy as usize * g.w + ix as usize) * g.cin;
                        let src = base + (ky * g.kw + kx) * g.cin;
                        for c in 0..g.cin {
                            img[dst + c] += src_item[src + c];
                        }
                    }
                }
            }
        }
    };
    dx.par_chunks_mut(img_len).enumerate().for_each(scatter);
    dx
}
