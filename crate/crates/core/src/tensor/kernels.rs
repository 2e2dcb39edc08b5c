//! Raw NHWC kernels on slices. Shape validation happens in the graph layer.

use super::Real;

#[derive(Clone, Copy, Debug)]
pub(super) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.n * self.ho * self.wo
    }

    pub fn patch(&self) -> usize {
        self.k * self.k * self.c
    }

    /// 1×1, stride 1, no padding: the input already is its own column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

pub(super) fn conv_out_extent(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if stride == 0 || k == 0 || k > padded {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Valid `kx` range for output column `ox`, and the first input column.
#[inline]
fn kx_span(g: &ConvGeom, ox: usize) -> (usize, usize, usize) {
    let start = (ox * g.stride) as isize - g.pad as isize;
    let lo = (-start).max(0) as usize;
    let hi = ((g.w as isize - start).min(g.k as isize)).max(0) as usize;
    (lo, hi.max(lo), (start + lo as isize).max(0) as usize)
}

/// Unfolds input patches into rows of a `[n·ho·wo, k·k·c]` matrix ordered
/// `(ky, kx, c)`, matching a `k×k×Cin×Cout` kernel read as `[k·k·Cin, Cout]`.
pub(super) fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch();
    let mut cols = vec![T::zero(); g.rows() * patch];
    let mut row = 0;
    for n in 0..g.n {
        let img = &x[n * g.h * g.w * g.c..(n + 1) * g.h * g.w * g.c];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let dst = &mut cols[row * patch..(row + 1) * patch];
                let (lo, hi, ix0) = kx_span(g, ox);
                let run = (hi - lo) * g.c;
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || run == 0 {
                        continue;
                    }
                    let src = (iy as usize * g.w + ix0) * g.c;
                    let off = (ky * g.k + lo) * g.c;
                    dst[off..off + run].copy_from_slice(&img[src..src + run]);
                }
                row += 1;
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds column gradients back into `dx`.
pub(super) fn col2im_add<T: Real>(dcols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let patch = g.patch();
    let mut row = 0;
    for n in 0..g.n {
        let img = &mut dx[n * g.h * g.w * g.c..(n + 1) * g.h * g.w * g.c];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let src = &dcols[row * patch..(row + 1) * patch];
                let (lo, hi, ix0) = kx_span(g, ox);
                let run = (hi - lo) * g.c;
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || run == 0 {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix0) * g.c;
                    let off = (ky * g.k + lo) * g.c;
                    for (d, s) in img[dst..dst + run].iter_mut().zip(&src[off..off + run]) {
                        *d += *s;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Row-major `[rows, cols]` matrix product helpers.
pub(super) fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    T::gemm(
        m,
        k,
        n,
        a,
        (k as isize, 1),
        b,
        (n as isize, 1),
        T::zero(),
        &mut c,
        (n as isize, 1),
    );
    c
}

/// `c += aᵀ·b` where `a` is `[k, m]` and `b` is `[k, n]`.
pub(super) fn matmul_at_b_add<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut [T]) {
    T::gemm(
        m,
        k,
        n,
        a,
        (1, m as isize),
        b,
        (n as isize, 1),
        T::one(),
        c,
        (n as isize, 1),
    );
}

/// `c += a·bᵀ` where `a` is `[m, k]` and `b` is `[n, k]`.
pub(super) fn matmul_a_bt_add<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut [T]) {
    T::gemm(
        m,
        k,
        n,
        a,
        (k as isize, 1),
        b,
        (1, k as isize),
        T::one(),
        c,
        (n as isize, 1),
    );
}

/// Depthwise convolution with a `k×k×C×1` kernel.
pub(super) fn depthwise_forward<T: Real>(x: &[T], kernel: &[T], g: &ConvGeom) -> Vec<T> {
    let mut out = vec![T::zero(); g.rows() * g.c];
    let mut o = 0;
    for n in 0..g.n {
        let img = &x[n * g.h * g.w * g.c..];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let dst = &mut out[o * g.c..(o + 1) * g.c];
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = (iy as usize * g.w + ix as usize) * g.c;
                        let kw = &kernel[(ky * g.k + kx) * g.c..(ky * g.k + kx + 1) * g.c];
                        for c in 0..g.c {
                            dst[c] += img[src + c] * kw[c];
                        }
                    }
                }
                o += 1;
            }
        }
    }
    out
}

/// Gradients of [`depthwise_forward`] with respect to input and kernel.
pub(super) fn depthwise_backward<T: Real>(
    x: &[T],
    kernel: &[T],
    dout: &[T],
    g: &ConvGeom,
    dx: Option<&mut [T]>,
    dk: Option<&mut [T]>,
) {
    let mut dx = dx;
    let mut dk = dk;
    let mut o = 0;
    for n in 0..g.n {
        let base = n * g.h * g.w * g.c;
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let go = &dout[o * g.c..(o + 1) * g.c];
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = base + (iy as usize * g.w + ix as usize) * g.c;
                        let koff = (ky * g.k + kx) * g.c;
                        if let Some(dx) = dx.as_deref_mut() {
                            for c in 0..g.c {
                                dx[src + c] += go[c] * kernel[koff + c];
                            }
                        }
                        if let Some(dk) = dk.as_deref_mut() {
                            for c in 0..g.c {
                                dk[koff + c] += go[c] * x[src + c];
                            }
                        }
                    }
                }
                o += 1;
            }
        }
    }
}

/// Non-overlapping max pooling; returns values and the flat argmax of each window.
/// Ties keep the first element in row-major window order.
pub(super) fn max_pool<T: Real>(
    x: &[T],
    (n, h, w, c): (usize, usize, usize, usize),
    win: usize,
) -> (Vec<T>, Vec<u32>) {
    let (ho, wo) = (h / win, w / win);
    let mut out = Vec::with_capacity(n * ho * wo * c);
    let mut arg = Vec::with_capacity(n * ho * wo * c);
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let first = ((b * h + oy * win) * w + ox * win) * c;
                let o = out.len();
                out.extend_from_slice(&x[first..first + c]);
                arg.extend((first..first + c).map(|i| i as u32));
                for dy in 0..win {
                    for dx in 0..win {
                        let base = ((b * h + oy * win + dy) * w + ox * win + dx) * c;
                        for ch in 0..c {
                            let v = x[base + ch];
                            if v > out[o + ch] {
                                out[o + ch] = v;
                                arg[o + ch] = (base + ch) as u32;
                            }
                        }
                    }
                }
            }
        }
    }
    (out, arg)
}

/// Non-overlapping average pooling with f64 accumulation.
pub(super) fn avg_pool<T: Real>(x: &[T], (n, h, w, c): (usize, usize, usize, usize), win: usize) -> Vec<T> {
    let (ho, wo) = (h / win, w / win);
    let inv = 1.0 / (win * win) as f64;
    let mut out = Vec::with_capacity(n * ho * wo * c);
    let mut acc = vec![0.0f64; c];
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for dy in 0..win {
                    let row = ((b * h + oy * win + dy) * w + ox * win) * c;
                    for v in x[row..row + win * c].chunks_exact(c) {
                        for (a, &v) in acc.iter_mut().zip(v) {
                            *a += v.as_f64();
                        }
                    }
                }
                out.extend(acc.iter().map(|&a| T::cast(a * inv)));
            }
        }
    }
    out
}

pub(super) fn avg_pool_backward<T: Real>(
    dout: &[T],
    (n, h, w, c): (usize, usize, usize, usize),
    win: usize,
    dx: &mut [T],
) {
    let (ho, wo) = (h / win, w / win);
    let inv = T::cast(1.0 / (win * win) as f64);
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let go = &dout[((b * ho + oy) * wo + ox) * c..][..c];
                for dy in 0..win {
                    for dxx in 0..win {
                        let i = ((b * h + oy * win + dy) * w + ox * win + dxx) * c;
                        for (d, &g) in dx[i..i + c].iter_mut().zip(go) {
                            *d += g * inv;
                        }
                    }
                }
            }
        }
    }
}
