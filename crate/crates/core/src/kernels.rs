//! Dense compute kernels behind the graph ops. Conv2d is im2col + GEMM over
//! fixed-size sample chunks; chunks are the unit of data parallelism and the
//! unit of reduction order for weight gradients.

use crate::par;
use crate::tensor::{matmul, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn same(kernel: usize) -> Self {
        Self {
            stride: 1,
            pad: kernel / 2,
            groups: 1,
        }
    }
}

/// Resolved shapes of one convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvShape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub geom: ConvGeom,
}

impl ConvShape {
    pub fn new(x: &[usize], wt: &[usize], geom: ConvGeom) -> Option<Self> {
        if x.len() != 4 || wt.len() != 4 || geom.stride == 0 || geom.groups == 0 {
            return None;
        }
        let (n, c, h, w) = (x[0], x[1], x[2], x[3]);
        let (o, cg, kh, kw) = (wt[0], wt[1], wt[2], wt[3]);
        if c % geom.groups != 0 || o % geom.groups != 0 || cg * geom.groups != c {
            return None;
        }
        if h + 2 * geom.pad < kh || w + 2 * geom.pad < kw {
            return None;
        }
        let ho = (h + 2 * geom.pad - kh) / geom.stride + 1;
        let wo = (w + 2 * geom.pad - kw) / geom.stride + 1;
        Some(Self {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            ho,
            wo,
            geom,
        })
    }

    fn cg(&self) -> usize {
        self.c / self.geom.groups
    }
    fn og(&self) -> usize {
        self.o / self.geom.groups
    }
    fn kk(&self) -> usize {
        self.cg() * self.kh * self.kw
    }
    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }
    /// Samples per chunk; depends only on shapes so chunking is reproducible.
    fn chunk(&self) -> usize {
        (2048 / self.hw_out().max(1)).clamp(1, self.n.max(1))
    }
}

fn im2col<T: Real>(s: &ConvShape, x: &[T], n0: usize, ns: usize, group: usize, cols: &mut [T]) {
    let (hw, cg, stride, pad) = (s.hw_out(), s.cg(), s.geom.stride as isize, s.geom.pad as isize);
    let width = ns * hw;
    for c in 0..cg {
        let ch = group * cg + c;
        for ky in 0..s.kh {
            for kx in 0..s.kw {
                let row = (c * s.kh + ky) * s.kw + kx;
                let dst = &mut cols[row * width..(row + 1) * width];
                for si in 0..ns {
                    let base = ((n0 + si) * s.c + ch) * s.h * s.w;
                    for oy in 0..s.ho {
                        let iy = oy as isize * stride - pad + ky as isize;
                        let out = &mut dst[si * hw + oy * s.wo..si * hw + (oy + 1) * s.wo];
                        if iy < 0 || iy >= s.h as isize {
                            out.fill(T::zero());
                            continue;
                        }
                        let src = &x[base + iy as usize * s.w..base + (iy as usize + 1) * s.w];
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = ox as isize * stride - pad + kx as isize;
                            *o = if ix < 0 || ix >= s.w as isize {
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
}

fn col2im<T: Real>(s: &ConvShape, cols: &[T], ns: usize, group: usize, dx_chunk: &mut [T]) {
    let (hw, cg, stride, pad) = (s.hw_out(), s.cg(), s.geom.stride as isize, s.geom.pad as isize);
    let width = ns * hw;
    for c in 0..cg {
        let ch = group * cg + c;
        for ky in 0..s.kh {
            for kx in 0..s.kw {
                let row = (c * s.kh + ky) * s.kw + kx;
                let src = &cols[row * width..(row + 1) * width];
                for si in 0..ns {
                    let base = (si * s.c + ch) * s.h * s.w;
                    for oy in 0..s.ho {
                        let iy = oy as isize * stride - pad + ky as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        for ox in 0..s.wo {
                            let ix = ox as isize * stride - pad + kx as isize;
                            if ix < 0 || ix >= s.w as isize {
                                continue;
                            }
                            dx_chunk[base + iy as usize * s.w + ix as usize] +=
                                src[si * hw + oy * s.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(s: &ConvShape, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (hw, og, kk) = (s.hw_out(), s.og(), s.kk());
    let chunk = s.chunk();
    let mut out = vec![T::zero(); s.n * s.o * hw];
    par::for_each_chunk_mut(&mut out, chunk * s.o * hw, |ci, out_chunk| {
        let n0 = ci * chunk;
        let ns = out_chunk.len() / (s.o * hw);
        let width = ns * hw;
        let mut cols = vec![T::zero(); kk * width];
        let mut res = vec![T::zero(); og * width];
        for g in 0..s.geom.groups {
            im2col(s, x, n0, ns, g, &mut cols);
            let wg = &w[g * og * kk..(g + 1) * og * kk];
            matmul(wg, false, &cols, false, &mut res, og, kk, width, false);
            for si in 0..ns {
                for o in 0..og {
                    let oc = g * og + o;
                    let dst = &mut out_chunk[(si * s.o + oc) * hw..(si * s.o + oc + 1) * hw];
                    dst.copy_from_slice(&res[o * width + si * hw..o * width + (si + 1) * hw]);
                }
            }
        }
        if let Some(b) = bias {
            for si in 0..ns {
                for (oc, bv) in b.iter().enumerate() {
                    for v in &mut out_chunk[(si * s.o + oc) * hw..(si * s.o + oc + 1) * hw] {
                        *v += *bv;
                    }
                }
            }
        }
    });
    out
}

/// Returns `(dx, dw, db)`; `dx` is only computed when requested.
pub fn conv2d_backward<T: Real>(
    s: &ConvShape,
    x: &[T],
    w: &[T],
    dy: &[T],
    want_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (hw, og, kk) = (s.hw_out(), s.og(), s.kk());
    let chunk = s.chunk();
    let n_chunks = s.n.div_ceil(chunk);
    let partials = par::map(n_chunks, |ci| {
        let n0 = ci * chunk;
        let ns = chunk.min(s.n - n0);
        let width = ns * hw;
        let mut cols = vec![T::zero(); kk * width];
        let mut dres = vec![T::zero(); og * width];
        let mut dw = vec![T::zero(); s.o * kk];
        let mut dx = if want_dx {
            vec![T::zero(); ns * s.c * s.h * s.w]
        } else {
            Vec::new()
        };
        let mut dcols = if want_dx {
            vec![T::zero(); kk * width]
        } else {
            Vec::new()
        };
        for g in 0..s.geom.groups {
            im2col(s, x, n0, ns, g, &mut cols);
            for si in 0..ns {
                for o in 0..og {
                    let oc = g * og + o;
                    let src = &dy[((n0 + si) * s.o + oc) * hw..((n0 + si) * s.o + oc + 1) * hw];
                    dres[o * width + si * hw..o * width + (si + 1) * hw].copy_from_slice(src);
                }
            }
            let dwg = &mut dw[g * og * kk..(g + 1) * og * kk];
            matmul(&dres, false, &cols, true, dwg, og, width, kk, false);
            if want_dx {
                let wg = &w[g * og * kk..(g + 1) * og * kk];
                matmul(wg, true, &dres, false, &mut dcols, kk, og, width, false);
                col2im(s, &dcols, ns, g, &mut dx);
            }
        }
        (dw, dx)
    });
    let mut dw = vec![T::zero(); s.o * kk];
    let mut dx = if want_dx {
        Some(Vec::with_capacity(s.n * s.c * s.h * s.w))
    } else {
        None
    };
    for (pw, px) in partials {
        for (a, b) in dw.iter_mut().zip(&pw) {
            *a += *b;
        }
        if let Some(dx) = dx.as_mut() {
            dx.extend_from_slice(&px);
        }
    }
    let mut db = vec![T::zero(); s.o];
    for n in 0..s.n {
        for (oc, d) in db.iter_mut().enumerate() {
            let row = &dy[(n * s.o + oc) * hw..(n * s.o + oc + 1) * hw];
            *d += row.iter().copied().sum::<T>();
        }
    }
    (dx, dw, db)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-sample normalization over all of (C, H, W) followed by a per-channel
/// affine map. Returns `(y, xhat, inv_std)`.
pub fn layer_norm_forward<T: Real>(
    x: &[T],
    n: usize,
    c: usize,
    hw: usize,
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let m = c * hw;
    let eps = T::lit(LAYER_NORM_EPS);
    let mut y = vec![T::zero(); n * m];
    let mut xhat = vec![T::zero(); n * m];
    let mut inv_std = vec![T::zero(); n];
    let mf = T::from_usize(m).unwrap();
    for i in 0..n {
        let xs = &x[i * m..(i + 1) * m];
        let mean = xs.iter().copied().sum::<T>() / mf;
        let var = xs.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / mf;
        let is = T::one() / (var + eps).sqrt();
        inv_std[i] = is;
        for ch in 0..c {
            for p in 0..hw {
                let k = i * m + ch * hw + p;
                let xh = (x[k] - mean) * is;
                xhat[k] = xh;
                y[k] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    (y, xhat, inv_std)
}

pub fn layer_norm_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    inv_std: &[T],
    n: usize,
    c: usize,
    hw: usize,
    gamma: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let m = c * hw;
    let mf = T::from_usize(m).unwrap();
    let mut dx = vec![T::zero(); n * m];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut g = vec![T::zero(); m];
    for i in 0..n {
        let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
        for ch in 0..c {
            for p in 0..hw {
                let k = i * m + ch * hw + p;
                dgamma[ch] += dy[k] * xhat[k];
                dbeta[ch] += dy[k];
                let gv = dy[k] * gamma[ch];
                g[ch * hw + p] = gv;
                sum_g += gv;
                sum_gx += gv * xhat[k];
            }
        }
        let (mg, mgx) = (sum_g / mf, sum_gx / mf);
        for j in 0..m {
            let k = i * m + j;
            dx[k] = inv_std[i] * (g[j] - mg - xhat[k] * mgx);
        }
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as an oracle for the GEMM path.
    fn conv_naive(s: &ConvShape, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let (cg, og) = (s.c / s.geom.groups, s.o / s.geom.groups);
        let mut out = vec![0.0; s.n * s.o * s.ho * s.wo];
        for n in 0..s.n {
            for oc in 0..s.o {
                let g = oc / og;
                for oy in 0..s.ho {
                    for ox in 0..s.wo {
                        let mut acc = b[oc];
                        for c in 0..cg {
                            for ky in 0..s.kh {
                                for kx in 0..s.kw {
                                    let iy = (oy * s.geom.stride + ky) as isize - s.geom.pad as isize;
                                    let ix = (ox * s.geom.stride + kx) as isize - s.geom.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                        continue;
                                    }
                                    let xv = x[((n * s.c + g * cg + c) * s.h + iy as usize) * s.w + ix as usize];
                                    let wv = w[((oc * cg + c) * s.kh + ky) * s.kw + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out[((n * s.o + oc) * s.ho + oy) * s.wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 33) as f64 / (1u64 << 31) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn gemm_conv_matches_naive_loops() {
        for (geom, c, o, k, h) in [
            (ConvGeom { stride: 1, pad: 1, groups: 1 }, 3, 4, 3, 5),
            (ConvGeom { stride: 2, pad: 1, groups: 1 }, 2, 3, 3, 8),
            (ConvGeom { stride: 1, pad: 0, groups: 2 }, 4, 6, 1, 4),
            (ConvGeom { stride: 1, pad: 1, groups: 2 }, 4, 4, 3, 6),
        ] {
            let s = ConvShape::new(&[3, c, h, h], &[o, c / geom.groups, k, k], geom).unwrap();
            let x = pseudo(3 * c * h * h, 1);
            let w = pseudo(o * (c / geom.groups) * k * k, 2);
            let b = pseudo(o, 3);
            let fast = conv2d_forward(&s, &x, &w, Some(&b));
            let slow = conv_naive(&s, &x, &w, &b);
            let diff = fast.iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "{geom:?}: {diff}");
        }
    }

    #[test]
    fn parallel_and_sequential_backward_agree_bitwise() {
        let geom = ConvGeom { stride: 1, pad: 1, groups: 1 };
        let s = ConvShape::new(&[70, 3, 8, 8], &[5, 3, 3, 3], geom).unwrap();
        let x = pseudo(70 * 3 * 64, 4);
        let w = pseudo(5 * 27, 5);
        let dy = pseudo(70 * 5 * 64, 6);
        par::set_parallel(false);
        let a = conv2d_backward(&s, &x, &w, &dy, true);
        par::set_parallel(true);
        let b = conv2d_backward(&s, &x, &w, &dy, true);
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let x = pseudo(2 * 4 * 9, 7);
        let (y, _, _) = layer_norm_forward(&x, 2, 4, 9, &[1.0; 4], &[0.0; 4]);
        for i in 0..2 {
            let ys = &y[i * 36..(i + 1) * 36];
            let mean = ys.iter().sum::<f64>() / 36.0;
            let var = ys.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 36.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }
}
