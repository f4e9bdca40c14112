//! Dense kernels for the U-Net: GEMM dispatch, 3×3/1×1 convolution via
//! im2col, pooling, upsampling and SiLU, each with its backward pass.
//!
//! Activations are stored channel-major as `[c][b][h][w]` so that a
//! convolution over the whole batch is a single GEMM.

use num_traits::{Float, FromPrimitive};

pub trait Real:
    Float + FromPrimitive + Default + Send + Sync + std::fmt::Debug + std::iter::Sum + 'static
{
    /// `C = alpha·A·B + beta·C` with arbitrary strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m×k`, `k×n`, `m×n` matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("float conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("float conversion")
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        unsafe { matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc) }
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        unsafe { matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc) }
    }
}

/// Row-major `C[m×n] (+)= op(A)·op(B)`. `a` is stored `[m×k]`, or `[k×m]`
/// when `a_t`; likewise `b` is `[k×n]` or `[n×k]` when `b_t`.
#[allow(clippy::too_many_arguments)]
pub fn matmul<R: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[R],
    a_t: bool,
    b: &[R],
    b_t: bool,
    c: &mut [R],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { R::one() } else { R::zero() };
    // SAFETY: the asserted lengths cover every element addressed by the strides.
    unsafe {
        R::gemm_raw(
            m,
            k,
            n,
            R::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Channel-major activation tensor `[c][b][h][w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Act<R> {
    pub c: usize,
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<R>,
}

impl<R: Real> Act<R> {
    pub fn zeros(c: usize, b: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            b,
            h,
            w,
            data: vec![R::zero(); c * b * h * w],
        }
    }

    /// Pixels per channel across the batch.
    pub fn n(&self) -> usize {
        self.b * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Stacks `other` after `self` along the channel axis.
    pub fn concat(&self, other: &Act<R>) -> Act<R> {
        debug_assert_eq!((self.b, self.h, self.w), (other.b, other.h, other.w));
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Act {
            c: self.c + other.c,
            data,
            ..*self
        }
    }

    /// Splits into the first `c0` channels and the rest.
    pub fn split(self, c0: usize) -> (Act<R>, Act<R>) {
        let n = self.n();
        let mut data = self.data;
        let rest = data.split_off(c0 * n);
        (
            Act {
                c: c0,
                b: self.b,
                h: self.h,
                w: self.w,
                data,
            },
            Act {
                c: self.c - c0,
                b: self.b,
                h: self.h,
                w: self.w,
                data: rest,
            },
        )
    }
}

/// Unfolds `k×k` neighbourhoods (zero padded, k ∈ {1, 3}) into a
/// `[c·k·k, n]` matrix.
pub fn im2col<R: Real>(x: &Act<R>, k: usize) -> Vec<R> {
    if k == 1 {
        return x.data.clone();
    }
    debug_assert_eq!(k, 3);
    let (h, w, plane, n) = (x.h, x.w, x.plane(), x.n());
    let mut cols = vec![R::zero(); x.c * 9 * n];
    for ci in 0..x.c {
        let src_c = &x.data[ci * n..(ci + 1) * n];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 3 + ky) * 3 + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                let dx = kx as isize - 1;
                let dy = ky as isize - 1;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize) as usize;
                for b in 0..x.b {
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let d0 = b * plane + y * w;
                        let s0 = b * plane + sy as usize * w;
                        let src = &src_c[(s0 as isize + x_lo as isize + dx) as usize
                            ..(s0 as isize + x_hi as isize + dx) as usize];
                        dst[d0 + x_lo..d0 + x_hi].copy_from_slice(src);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds `[c·k·k, n]` columns back into an activation.
pub fn col2im<R: Real>(cols: Vec<R>, c: usize, b: usize, h: usize, w: usize, k: usize) -> Act<R> {
    if k == 1 {
        return Act { c, b, h, w, data: cols };
    }
    let mut out = Act::zeros(c, b, h, w);
    let (plane, n) = (h * w, b * h * w);
    for ci in 0..c {
        let dst_c = &mut out.data[ci * n..(ci + 1) * n];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 3 + ky) * 3 + kx;
                let src = &cols[row * n..(row + 1) * n];
                let dx = kx as isize - 1;
                let dy = ky as isize - 1;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize) as usize;
                for bi in 0..b {
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let s0 = bi * plane + y * w;
                        let d0 = (bi * plane + sy as usize * w) as isize + dx;
                        for xx in x_lo..x_hi {
                            let di = (d0 + xx as isize) as usize;
                            dst_c[di] = dst_c[di] + src[s0 + xx];
                        }
                    }
                }
            }
        }
    }
    out
}

/// `y = W·im2col(x) + bias`, with `W` stored `[cout, cin·k·k]`.
pub fn conv_forward<R: Real>(x: &Act<R>, weight: &[R], bias: &[R], cout: usize, k: usize) -> Act<R> {
    let kk = x.c * k * k;
    let n = x.n();
    let cols = im2col(x, k);
    let mut out = Act::zeros(cout, x.b, x.h, x.w);
    matmul(cout, kk, n, weight, false, &cols, false, &mut out.data, false);
    for (co, row) in out.data.chunks_exact_mut(n).enumerate() {
        let bv = bias[co];
        row.iter_mut().for_each(|v| *v = *v + bv);
    }
    out
}

/// Accumulates weight/bias gradients and returns the input gradient when asked.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<R: Real>(
    x: &Act<R>,
    dout: &Act<R>,
    weight: &[R],
    dweight: &mut [R],
    dbias: &mut [R],
    k: usize,
    need_input_grad: bool,
) -> Option<Act<R>> {
    let cout = dout.c;
    let kk = x.c * k * k;
    let n = x.n();
    let cols = im2col(x, k);
    matmul(cout, n, kk, &dout.data, false, &cols, true, dweight, true);
    for (co, row) in dout.data.chunks_exact(n).enumerate() {
        dbias[co] = dbias[co] + row.iter().copied().sum::<R>();
    }
    if !need_input_grad {
        return None;
    }
    let mut dcols = cols;
    matmul(kk, cout, n, weight, true, &dout.data, false, &mut dcols, false);
    Some(col2im(dcols, x.c, x.b, x.h, x.w, k))
}

pub fn silu<R: Real>(a: &Act<R>) -> Act<R> {
    let data = a
        .data
        .iter()
        .map(|&v| v / (R::one() + (-v).exp()))
        .collect();
    Act { data, ..*a }
}

/// `d/da silu(a) · upstream`, in place on `grad`.
pub fn silu_backward<R: Real>(a: &Act<R>, grad: &mut Act<R>) {
    for (g, &v) in grad.data.iter_mut().zip(&a.data) {
        let s = R::one() / (R::one() + (-v).exp());
        *g = *g * s * (R::one() + v * (R::one() - s));
    }
}

pub fn avg_pool2<R: Real>(x: &Act<R>) -> Act<R> {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut out = Act::zeros(x.c, x.b, h2, w2);
    let quarter = R::from_f64_lossy(0.25);
    for cb in 0..x.c * x.b {
        let src = &x.data[cb * x.plane()..(cb + 1) * x.plane()];
        let dst = &mut out.data[cb * h2 * w2..(cb + 1) * h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                let i = 2 * y * x.w + 2 * xx;
                dst[y * w2 + xx] = (src[i] + src[i + 1] + src[i + x.w] + src[i + x.w + 1]) * quarter;
            }
        }
    }
    out
}

pub fn avg_pool2_backward<R: Real>(dout: &Act<R>) -> Act<R> {
    let (h, w) = (dout.h * 2, dout.w * 2);
    let mut dx = Act::zeros(dout.c, dout.b, h, w);
    let quarter = R::from_f64_lossy(0.25);
    for cb in 0..dout.c * dout.b {
        let src = &dout.data[cb * dout.plane()..(cb + 1) * dout.plane()];
        let dst = &mut dx.data[cb * h * w..(cb + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / 2) * dout.w + xx / 2] * quarter;
            }
        }
    }
    dx
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2<R: Real>(x: &Act<R>) -> Act<R> {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Act::zeros(x.c, x.b, h, w);
    for cb in 0..x.c * x.b {
        let src = &x.data[cb * x.plane()..(cb + 1) * x.plane()];
        let dst = &mut out.data[cb * h * w..(cb + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<R: Real>(dout: &Act<R>) -> Act<R> {
    let (h2, w2) = (dout.h / 2, dout.w / 2);
    let mut dx = Act::zeros(dout.c, dout.b, h2, w2);
    for cb in 0..dout.c * dout.b {
        let src = &dout.data[cb * dout.plane()..(cb + 1) * dout.plane()];
        let dst = &mut dx.data[cb * h2 * w2..(cb + 1) * h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                let i = 2 * y * dout.w + 2 * xx;
                dst[y * w2 + xx] = src[i] + src[i + 1] + src[i + dout.w] + src[i + dout.w + 1];
            }
        }
    }
    dx
}

/// Adds a per-(batch, channel) bias `e[b·c_total + c]` to every pixel.
pub fn add_channel_bias<R: Real>(x: &mut Act<R>, e: &[R]) {
    let plane = x.plane();
    for c in 0..x.c {
        for b in 0..x.b {
            let v = e[b * x.c + c];
            let off = (c * x.b + b) * plane;
            x.data[off..off + plane].iter_mut().for_each(|p| *p = *p + v);
        }
    }
}

/// Gradient of [`add_channel_bias`] w.r.t. `e`, laid out `[b][c]`.
pub fn channel_bias_grad<R: Real>(dx: &Act<R>) -> Vec<R> {
    let plane = dx.plane();
    let mut g = vec![R::zero(); dx.b * dx.c];
    for c in 0..dx.c {
        for b in 0..dx.b {
            let off = (c * dx.b + b) * plane;
            g[b * dx.c + c] = dx.data[off..off + plane].iter().copied().sum();
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_act(c: usize, b: usize, h: usize, w: usize, seed: u64) -> Act<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Act {
            c,
            b,
            h,
            w,
            data: (0..c * b * h * w).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    /// Direct nested-loop convolution used as an independent reference.
    fn conv_naive(x: &Act<f64>, wt: &[f64], bias: &[f64], cout: usize) -> Act<f64> {
        let mut out = Act::zeros(cout, x.b, x.h, x.w);
        for co in 0..cout {
            for b in 0..x.b {
                for y in 0..x.h {
                    for xx in 0..x.w {
                        let mut s = bias[co];
                        for ci in 0..x.c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let sy = y as isize + ky as isize - 1;
                                    let sx = xx as isize + kx as isize - 1;
                                    if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                        continue;
                                    }
                                    let xi = ((ci * x.b + b) * x.h + sy as usize) * x.w + sx as usize;
                                    s += wt[co * x.c * 9 + ci * 9 + ky * 3 + kx] * x.data[xi];
                                }
                            }
                        }
                        out.data[((co * x.b + b) * x.h + y) * x.w + xx] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive() {
        let x = rand_act(3, 2, 5, 4, 1);
        let wt = rand_act(1, 1, 4, 27, 2).data;
        let bias = vec![0.1, -0.2, 0.3, 0.0];
        let got = conv_forward(&x, &wt, &bias, 4, 3);
        let want = conv_naive(&x, &wt, &bias, 4);
        for (a, b) in got.data.iter().zip(&want.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let x = rand_act(2, 2, 4, 6, 3);
        let cols = im2col(&x, 3);
        let y = rand_act(1, 1, 1, cols.len(), 4).data;
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im(y, 2, 2, 4, 6, 3);
        let rhs: f64 = x.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn pool_and_upsample_are_adjoint() {
        let x = rand_act(2, 3, 4, 4, 5);
        let y = rand_act(2, 3, 2, 2, 6);
        let lhs: f64 = avg_pool2(&x).data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&avg_pool2_backward(&y).data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);

        let lhs: f64 = upsample2(&y).data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = y.data.iter().zip(&upsample2_backward(&x).data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn matmul_transposes() {
        // A = [[1,2],[3,4]], B = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        matmul(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        matmul(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        matmul(2, 2, 2, &a, false, &b, true, &mut c, true);
        assert_eq!(c, [26.0 + 17.0, 30.0 + 23.0, 38.0 + 39.0, 44.0 + 53.0]);
    }
}
