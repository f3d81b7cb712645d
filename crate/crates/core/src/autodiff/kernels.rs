//! Numeric kernels behind the tape operations. Everything here works on flat
//! row-major slices; shape bookkeeping lives in the tape.

use rayon::prelude::*;

/// `c = alpha * a·b + beta * c` with arbitrary (row, column) strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |r: usize, c: usize, rs: usize, cs: usize| (r - 1) * rs + (c - 1) * cs;
    assert!(c.len() > last(m, n, rsc, csc), "gemm: output too short");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * rsc + j * csc] *= beta;
            }
        }
        return;
    }
    assert!(a.len() > last(m, k, rsa, csa), "gemm: lhs too short");
    assert!(b.len() > last(k, n, rsb, csb), "gemm: rhs too short");
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Geometry of a stride-1 2-D convolution over one sample.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub f: usize,
    pub t: usize,
    pub cout: usize,
    pub kf: usize,
    pub kt: usize,
    pub f_lo: usize,
    pub t_lo: usize,
    pub fo: usize,
    pub to: usize,
}

impl ConvGeom {
    pub fn k(&self) -> usize {
        self.cin * self.kf * self.kt
    }
    pub fn n(&self) -> usize {
        self.fo * self.to
    }
    pub fn in_len(&self) -> usize {
        self.cin * self.f * self.t
    }
    pub fn out_len(&self) -> usize {
        self.cout * self.n()
    }

    /// Range of output columns whose input column `ox + j - t_lo` is in bounds.
    fn valid_cols(&self, j: usize) -> (usize, usize) {
        let shift = j as isize - self.t_lo as isize;
        let lo = (-shift).clamp(0, self.to as isize) as usize;
        let hi = (self.t as isize - shift).clamp(0, self.to as isize) as usize;
        (lo, hi.max(lo))
    }

    fn input_row(&self, oy: usize, i: usize) -> Option<usize> {
        let fy = oy as isize + i as isize - self.f_lo as isize;
        (fy >= 0 && (fy as usize) < self.f).then_some(fy as usize)
    }
}

pub(crate) fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let n = g.n();
    for ci in 0..g.cin {
        for i in 0..g.kf {
            for j in 0..g.kt {
                let row = ((ci * g.kf + i) * g.kt + j) * n;
                let (lo, hi) = g.valid_cols(j);
                for oy in 0..g.fo {
                    let dst = &mut cols[row + oy * g.to..row + (oy + 1) * g.to];
                    match g.input_row(oy, i) {
                        None => dst.fill(0.0),
                        Some(fy) => {
                            let src = &x[(ci * g.f + fy) * g.t..(ci * g.f + fy + 1) * g.t];
                            dst[..lo].fill(0.0);
                            dst[hi..].fill(0.0);
                            if hi == lo {
                                continue;
                            }
                            let off = lo + j - g.t_lo;
                            dst[lo..hi].copy_from_slice(&src[off..off + (hi - lo)]);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn col2im_add(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let n = g.n();
    for ci in 0..g.cin {
        for i in 0..g.kf {
            for j in 0..g.kt {
                let row = ((ci * g.kf + i) * g.kt + j) * n;
                let (lo, hi) = g.valid_cols(j);
                for oy in 0..g.fo {
                    if let (Some(fy), true) = (g.input_row(oy, i), hi > lo) {
                        let src = &cols[row + oy * g.to + lo..row + oy * g.to + hi];
                        let off = (ci * g.f + fy) * g.t + lo + j - g.t_lo;
                        for (d, s) in dx[off..off + (hi - lo)].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let (k, n) = (g.k(), g.n());
    out.par_chunks_mut(g.out_len())
        .zip(x.par_chunks(g.in_len()))
        .for_each(|(y, xs)| {
            let mut cols = vec![0.0; k * n];
            im2col(g, xs, &mut cols);
            for (co, row) in y.chunks_mut(n).enumerate() {
                row.fill(b[co]);
            }
            gemm(g.cout, k, n, 1.0, w, (k, 1), &cols, (n, 1), 1.0, y, (n, 1));
        });
}

/// Accumulates input, kernel and bias gradients. Kernel gradients are formed
/// per sample and summed in sample order, so the result does not depend on
/// the number of worker threads.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let (k, n) = (g.k(), g.n());
    let batch = dy.len() / g.out_len();
    let want_dw = dw.is_some();
    let per_sample = |s: usize, dx_s: Option<&mut [f64]>| -> Option<Vec<f64>> {
        let dy_s = &dy[s * g.out_len()..(s + 1) * g.out_len()];
        let partial = want_dw.then(|| {
            let mut cols = vec![0.0; k * n];
            im2col(g, &x[s * g.in_len()..(s + 1) * g.in_len()], &mut cols);
            let mut part = vec![0.0; g.cout * k];
            gemm(g.cout, n, k, 1.0, dy_s, (n, 1), &cols, (1, n), 0.0, &mut part, (k, 1));
            part
        });
        if let Some(dx_s) = dx_s {
            let mut dcols = vec![0.0; k * n];
            gemm(k, g.cout, n, 1.0, w, (1, k), dy_s, (n, 1), 0.0, &mut dcols, (n, 1));
            col2im_add(g, &dcols, dx_s);
        }
        partial
    };
    let partials: Vec<Option<Vec<f64>>> = match dx {
        Some(dx) => dx
            .par_chunks_mut(g.in_len())
            .enumerate()
            .map(|(s, d)| per_sample(s, Some(d)))
            .collect(),
        None => (0..batch)
            .into_par_iter()
            .map(|s| per_sample(s, None))
            .collect(),
    };
    if let Some(dw) = dw {
        for part in partials.into_iter().flatten() {
            for (d, p) in dw.iter_mut().zip(&part) {
                *d += p;
            }
        }
    }
    if let Some(db) = db {
        for dy_s in dy.chunks(g.out_len()) {
            for (co, row) in dy_s.chunks(n).enumerate() {
                db[co] += row.iter().sum::<f64>();
            }
        }
    }
}

/// Non-overlapping max pooling over `planes` planes of `f × t`. Windows that
/// run past the edge only see in-bounds elements (ceil mode); the first
/// maximum in row-major scan order wins ties.
#[allow(clippy::too_many_arguments)]
pub(crate) fn maxpool_forward(
    x: &[f64],
    planes: usize,
    (f, t): (usize, usize),
    (pf, pt): (usize, usize),
    (fo, to): (usize, usize),
    out: &mut [f64],
    argmax: &mut [u32],
) {
    for p in 0..planes {
        let base = p * f * t;
        for oy in 0..fo {
            let f_end = (oy * pf + pf).min(f);
            for ox in 0..to {
                let t_end = (ox * pt + pt).min(t);
                let mut best = f64::NEG_INFINITY;
                let mut idx = base + oy * pf * t + ox * pt;
                for fy in oy * pf..f_end {
                    let row = base + fy * t;
                    for (tx, &v) in x[row + ox * pt..row + t_end].iter().enumerate() {
                        if v > best {
                            best = v;
                            idx = row + ox * pt + tx;
                        }
                    }
                }
                let o = (p * fo + oy) * to + ox;
                out[o] = best;
                argmax[o] = idx as u32;
            }
        }
    }
}

/// Per-channel mean and biased variance over every axis except axis 1.
pub(crate) fn channel_moments(x: &[f64], batch: usize, channels: usize, spatial: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (batch * spatial) as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for (c, m) in mean.iter_mut().enumerate() {
        let mut s = 0.0;
        for b in 0..batch {
            let off = (b * channels + c) * spatial;
            s += x[off..off + spatial].iter().sum::<f64>();
        }
        *m = s / count;
    }
    for (c, v) in var.iter_mut().enumerate() {
        let mut s = 0.0;
        for b in 0..batch {
            let off = (b * channels + c) * spatial;
            s += x[off..off + spatial]
                .iter()
                .map(|&e| (e - mean[c]) * (e - mean[c]))
                .sum::<f64>();
        }
        *v = s / count;
    }
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_handles_transposed_operands() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, 1.0, &a, (2, 1), &b, (2, 1), 0.0, &mut c, (2, 1));
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        // aᵀ·b
        gemm(2, 2, 2, 1.0, &a, (1, 2), &b, (2, 1), 0.0, &mut c, (2, 1));
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
    }

    #[test]
    fn im2col_then_col2im_counts_window_overlap() {
        let g = ConvGeom {
            cin: 1,
            f: 3,
            t: 4,
            cout: 1,
            kf: 3,
            kt: 3,
            f_lo: 1,
            t_lo: 1,
            fo: 3,
            to: 4,
        };
        let x = vec![1.0; 12];
        let mut cols = vec![0.0; g.k() * g.n()];
        im2col(&g, &x, &mut cols);
        let mut back = vec![0.0; 12];
        col2im_add(&g, &cols, &mut back);
        // Each input element is covered by as many windows as it has in-bounds
        // neighbours (including itself) along both axes.
        let along = |i: usize, len: usize| 1 + usize::from(i > 0) + usize::from(i + 1 < len);
        for fy in 0..3 {
            for tx in 0..4 {
                assert_eq!(back[fy * 4 + tx], (along(fy, 3) * along(tx, 4)) as f64);
            }
        }
    }
}
