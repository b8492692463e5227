//! im2col-based convolution kernels on raw NCHW / OIHW buffers.
//!
//! The three kernels (forward, input-gradient, weight-gradient) are
//! adjoint to each other, so differentiating any one of them only ever
//! needs the other two.

use super::element::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Output extent along one spatial axis, `None` if the window does not fit.
    pub fn out_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        if self.stride == 0 || padded < kernel {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }
}

#[derive(Debug, Clone, Copy)]
struct Dims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

impl Dims {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

/// Lays out every receptive field as a column: `[C*KH*KW, N*HO*WO]`.
fn im2col<T: Element>(x: &[T], d: Dims, g: ConvGeom) -> Vec<T> {
    let (rows, cols) = (d.rows(), d.cols());
    let mut out = vec![T::zero(); rows * cols];
    let plane = d.ho * d.wo;
    for ci in 0..d.c {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let r = (ci * d.kh + ki) * d.kw + kj;
                let row = &mut out[r * cols..(r + 1) * cols];
                for n in 0..d.n {
                    let src = &x[(n * d.c + ci) * d.h * d.w..(n * d.c + ci + 1) * d.h * d.w];
                    for oy in 0..d.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let base = n * plane + oy * d.wo;
                        for ox in 0..d.wo {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < d.w as isize {
                                row[base + ox] = src[iy as usize * d.w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters columns back, summing overlaps.
fn col2im<T: Element>(cols_buf: &[T], d: Dims, g: ConvGeom) -> Vec<T> {
    let cols = d.cols();
    let plane = d.ho * d.wo;
    let mut x = vec![T::zero(); d.n * d.c * d.h * d.w];
    for ci in 0..d.c {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let r = (ci * d.kh + ki) * d.kw + kj;
                let row = &cols_buf[r * cols..(r + 1) * cols];
                for n in 0..d.n {
                    let dst_off = (n * d.c + ci) * d.h * d.w;
                    for oy in 0..d.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let base = n * plane + oy * d.wo;
                        for ox in 0..d.wo {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < d.w as isize {
                                let dst = &mut x[dst_off + iy as usize * d.w + ix as usize];
                                *dst = *dst + row[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[N, O, P]` <-> `[O, N*P]`
fn nop_to_onp<T: Element>(src: &[T], n: usize, o: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for ni in 0..n {
        for oi in 0..o {
            let s = &src[(ni * o + oi) * p..(ni * o + oi + 1) * p];
            out[oi * n * p + ni * p..oi * n * p + (ni + 1) * p].copy_from_slice(s);
        }
    }
    out
}

fn onp_to_nop<T: Element>(src: &[T], n: usize, o: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for oi in 0..o {
        for ni in 0..n {
            let s = &src[oi * n * p + ni * p..oi * n * p + (ni + 1) * p];
            out[(ni * o + oi) * p..(ni * o + oi + 1) * p].copy_from_slice(s);
        }
    }
    out
}

fn dims(x_shape: &[usize], w_shape: &[usize], g: ConvGeom) -> Dims {
    let (kh, kw) = (w_shape[2], w_shape[3]);
    Dims {
        n: x_shape[0],
        c: x_shape[1],
        h: x_shape[2],
        w: x_shape[3],
        kh,
        kw,
        ho: g.out_extent(x_shape[2], kh).expect("validated by caller"),
        wo: g.out_extent(x_shape[3], kw).expect("validated by caller"),
    }
}

/// `y = conv(x, w)`; returns `[N, O, HO, WO]` data.
pub fn conv2d<T: Element>(
    x: &[T],
    x_shape: &[usize],
    w: &[T],
    w_shape: &[usize],
    g: ConvGeom,
) -> Vec<T> {
    let d = dims(x_shape, w_shape, g);
    let o = w_shape[0];
    let cols = im2col(x, d, g);
    let (k, m) = (d.rows(), d.cols());
    let mut tmp = vec![T::zero(); o * m];
    T::gemm(
        o,
        k,
        m,
        T::one(),
        w,
        k as isize,
        1,
        &cols,
        m as isize,
        1,
        T::zero(),
        &mut tmp,
    );
    onp_to_nop(&tmp, d.n, o, d.ho * d.wo)
}

/// Gradient of `conv(x, w)` with respect to `x`, given the output cotangent `gy`.
pub fn conv2d_input_grad<T: Element>(
    gy: &[T],
    w: &[T],
    w_shape: &[usize],
    x_shape: &[usize],
    g: ConvGeom,
) -> Vec<T> {
    let d = dims(x_shape, w_shape, g);
    let o = w_shape[0];
    let (k, m) = (d.rows(), d.cols());
    let gp = nop_to_onp(gy, d.n, o, d.ho * d.wo);
    let mut dcols = vec![T::zero(); k * m];
    // dcols[K, M] = w^T[K, O] · gp[O, M]
    T::gemm(
        k,
        o,
        m,
        T::one(),
        w,
        1,
        k as isize,
        &gp,
        m as isize,
        1,
        T::zero(),
        &mut dcols,
    );
    col2im(&dcols, d, g)
}

/// Gradient of `conv(x, w)` with respect to `w`, given the output cotangent `gy`.
pub fn conv2d_weight_grad<T: Element>(
    x: &[T],
    x_shape: &[usize],
    gy: &[T],
    w_shape: &[usize],
    g: ConvGeom,
) -> Vec<T> {
    let d = dims(x_shape, w_shape, g);
    let o = w_shape[0];
    let (k, m) = (d.rows(), d.cols());
    let cols = im2col(x, d, g);
    let gp = nop_to_onp(gy, d.n, o, d.ho * d.wo);
    let mut dw = vec![T::zero(); o * k];
    // dw[O, K] = gp[O, M] · cols^T[M, K]
    T::gemm(
        o,
        m,
        k,
        T::one(),
        &gp,
        m as isize,
        1,
        &cols,
        1,
        m as isize,
        T::zero(),
        &mut dw,
    );
    dw
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution.
    fn conv_naive(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], g: ConvGeom) -> Vec<f64> {
        let [n, c, h, wd] = xs;
        let [o, _, kh, kw] = ws;
        let ho = (h + 2 * g.pad - kh) / g.stride + 1;
        let wo = (wd + 2 * g.pad - kw) / g.stride + 1;
        let mut y = vec![0.0; n * o * ho * wo];
        for ni in 0..n {
            for oi in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x[((ni * c + ci) * h + iy as usize) * wd + ix as usize]
                                        * w[((oi * c + ci) * kh + ki) * kw + kj];
                                }
                            }
                        }
                        y[((ni * o + oi) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((s >> 33) as f64 / (1u64 << 31) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn ones_kernel_stride2_pad1_matches_nested_loops() {
        let g = ConvGeom { stride: 2, pad: 1 };
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let w = vec![1.0; 9];
        let got = conv2d(&x, &[1, 1, 4, 4], &w, &[1, 1, 3, 3], g);
        let want = conv_naive(&x, [1, 1, 4, 4], &w, [1, 1, 3, 3], g);
        assert_eq!(got, want);
        // hand-checked corners: top-left window covers 0,1,4,5
        assert_eq!(want, vec![10.0, 24.0, 51.0, 90.0]);
    }

    #[test]
    fn random_multichannel_matches_nested_loops() {
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)] {
            let g = ConvGeom { stride, pad };
            let xs = [2, 3, 7, 6];
            let ws = [4, 3, 3, 2];
            let x = pseudo(xs.iter().product(), 1);
            let w = pseudo(ws.iter().product(), 2);
            let got = conv2d(&x, &xs, &w, &ws, g);
            let want = conv_naive(&x, xs, &w, ws, g);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn gradient_kernels_are_adjoint() {
        // <conv(x, w), gy> = <x, dx(gy, w)> = <w, dw(x, gy)>
        let g = ConvGeom { stride: 2, pad: 1 };
        let xs = [2, 2, 5, 5];
        let ws = [3, 2, 3, 3];
        let x = pseudo(100, 3);
        let w = pseudo(54, 4);
        let y = conv2d(&x, &xs, &w, &ws, g);
        let gy = pseudo(y.len(), 5);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        let lhs = dot(&y, &gy);
        let dx = conv2d_input_grad(&gy, &w, &ws, &xs, g);
        let dw = conv2d_weight_grad(&x, &xs, &gy, &ws, g);
        assert!((lhs - dot(&x, &dx)).abs() < 1e-12);
        assert!((lhs - dot(&w, &dw)).abs() < 1e-12);
    }
}
