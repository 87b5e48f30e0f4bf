//! Forward and backward kernels for the handful of layer types the networks use.
//!
//! Convolutions lower to GEMM through im2col. Column buffers are built a band
//! of output rows at a time so memory stays bounded on large frames.

use crate::tensor::{Real, Shape, Tensor};

/// Upper bound on elements in one im2col buffer.
const COL_BUDGET: usize = 1 << 21;

/// Square-kernel cross-correlation geometry between an input plane stack and
/// an output plane stack.
#[derive(Clone, Copy, Debug)]
struct Geom {
    ci: usize,
    hi: usize,
    wi: usize,
    co: usize,
    ho: usize,
    wo: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geom {
    fn patch(&self) -> usize {
        self.ci * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows_per_band(&self) -> usize {
        (COL_BUDGET / (self.patch() * self.wo).max(1)).clamp(1, self.ho)
    }
}

pub fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(input + 2 * pad >= k, "kernel {k} larger than padded input {input}+2*{pad}");
    (input + 2 * pad - k) / stride + 1
}

pub fn conv_transpose_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    ((input - 1) * stride + k)
        .checked_sub(2 * pad)
        .expect("transposed conv padding exceeds output")
}

fn im2col<T: Real>(x: &[T], g: &Geom, r0: usize, r1: usize, col: &mut Vec<T>) {
    let cols = (r1 - r0) * g.wo;
    col.clear();
    col.resize(g.patch() * cols, T::zero());
    let (hi, wi) = (g.hi as isize, g.wi as isize);
    for c in 0..g.ci {
        let plane = &x[c * g.hi * g.wi..(c + 1) * g.hi * g.wi];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for r in r0..r1 {
                    let iy = (r * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= hi {
                        continue;
                    }
                    let src = &plane[iy as usize * g.wi..(iy as usize + 1) * g.wi];
                    let out = &mut dst[(r - r0) * g.wo..(r - r0 + 1) * g.wo];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < wi {
                            *o = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(col: &[T], g: &Geom, r0: usize, r1: usize, x: &mut [T]) {
    let cols = (r1 - r0) * g.wo;
    let (hi, wi) = (g.hi as isize, g.wi as isize);
    for c in 0..g.ci {
        let plane = &mut x[c * g.hi * g.wi..(c + 1) * g.hi * g.wi];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for r in r0..r1 {
                    let iy = (r * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= hi {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.wi..(iy as usize + 1) * g.wi];
                    let vals = &src[(r - r0) * g.wo..(r - r0 + 1) * g.wo];
                    for (ox, &v) in vals.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < wi {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `out[co, ·] = wmat[co, ·] * im2col(input)`, overwriting `out`.
fn correlate<T: Real>(input: &[T], wmat: &[T], g: &Geom, out: &mut [T], col: &mut Vec<T>) {
    let plane_o = g.ho * g.wo;
    let kk = g.patch();
    if g.is_pointwise() {
        unsafe {
            T::gemm(
                g.co, kk, plane_o, T::one(),
                wmat.as_ptr(), kk as isize, 1,
                input.as_ptr(), plane_o as isize, 1,
                T::zero(), out.as_mut_ptr(), plane_o as isize, 1,
            );
        }
        return;
    }
    let band = g.rows_per_band();
    let mut r0 = 0;
    while r0 < g.ho {
        let r1 = (r0 + band).min(g.ho);
        im2col(input, g, r0, r1, col);
        let cols = (r1 - r0) * g.wo;
        unsafe {
            T::gemm(
                g.co, kk, cols, T::one(),
                wmat.as_ptr(), kk as isize, 1,
                col.as_ptr(), cols as isize, 1,
                T::zero(), out.as_mut_ptr().add(r0 * g.wo), plane_o as isize, 1,
            );
        }
        r0 = r1;
    }
}

/// Adjoint of [`correlate`] with respect to its input: `din += col2im(wmatᵀ · dout)`.
fn correlate_adjoint<T: Real>(dout: &[T], wmat: &[T], g: &Geom, din: &mut [T], col: &mut Vec<T>) {
    let plane_o = g.ho * g.wo;
    let kk = g.patch();
    if g.is_pointwise() {
        unsafe {
            T::gemm(
                kk, g.co, plane_o, T::one(),
                wmat.as_ptr(), 1, kk as isize,
                dout.as_ptr(), plane_o as isize, 1,
                T::one(), din.as_mut_ptr(), plane_o as isize, 1,
            );
        }
        return;
    }
    let band = g.rows_per_band();
    let mut r0 = 0;
    while r0 < g.ho {
        let r1 = (r0 + band).min(g.ho);
        let cols = (r1 - r0) * g.wo;
        col.clear();
        col.resize(kk * cols, T::zero());
        unsafe {
            T::gemm(
                kk, g.co, cols, T::one(),
                wmat.as_ptr(), 1, kk as isize,
                dout.as_ptr().add(r0 * g.wo), plane_o as isize, 1,
                T::zero(), col.as_mut_ptr(), cols as isize, 1,
            );
        }
        col2im_add(col, g, r0, r1, din);
        r0 = r1;
    }
}

/// Weight gradient of [`correlate`]: `dw += dout · im2col(input)ᵀ`.
fn correlate_weight_grad<T: Real>(input: &[T], dout: &[T], g: &Geom, dw: &mut [T], col: &mut Vec<T>) {
    let plane_o = g.ho * g.wo;
    let kk = g.patch();
    if g.is_pointwise() {
        unsafe {
            T::gemm(
                g.co, plane_o, kk, T::one(),
                dout.as_ptr(), plane_o as isize, 1,
                input.as_ptr(), 1, plane_o as isize,
                T::one(), dw.as_mut_ptr(), kk as isize, 1,
            );
        }
        return;
    }
    let band = g.rows_per_band();
    let mut r0 = 0;
    while r0 < g.ho {
        let r1 = (r0 + band).min(g.ho);
        im2col(input, g, r0, r1, col);
        let cols = (r1 - r0) * g.wo;
        unsafe {
            T::gemm(
                g.co, cols, kk, T::one(),
                dout.as_ptr().add(r0 * g.wo), plane_o as isize, 1,
                col.as_ptr(), 1, cols as isize,
                T::one(), dw.as_mut_ptr(), kk as isize, 1,
            );
        }
        r0 = r1;
    }
}

fn add_bias<T: Real>(out: &mut Tensor<T>, b: &Tensor<T>) {
    let s = out.shape();
    assert_eq!(b.len(), s.c, "bias length must equal output channels");
    let plane = s.plane();
    let bias = b.data().to_vec();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let v = bias[i % s.c];
        for o in chunk {
            *o += v;
        }
    }
}

fn bias_grad<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let s = dy.shape();
    let mut db = vec![T::zero(); s.c];
    for (i, chunk) in dy.data().chunks(s.plane()).enumerate() {
        db[i % s.c] += chunk.iter().copied().sum::<T>();
    }
    Tensor::from_vec(Shape::new(1, 1, 1, s.c), db)
}

fn conv_geom(x: Shape, w: Shape, stride: usize, pad: usize) -> Geom {
    assert_eq!(w.h, w.w, "square kernels only");
    assert_eq!(x.c, w.c, "conv input has {} channels, weight expects {}", x.c, w.c);
    Geom {
        ci: x.c,
        hi: x.h,
        wi: x.w,
        co: w.n,
        ho: conv_out_size(x.h, w.h, stride, pad),
        wo: conv_out_size(x.w, w.w, stride, pad),
        k: w.h,
        stride,
        pad,
    }
}

/// Weight layout `[c_out, c_in, k, k]`, bias `[1, 1, 1, c_out]`.
pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, stride: usize, pad: usize) -> Tensor<T> {
    let xs = x.shape();
    let g = conv_geom(xs, w.shape(), stride, pad);
    let mut out = Tensor::zeros(Shape::new(xs.n, g.co, g.ho, g.wo));
    let mut col = Vec::new();
    let item_out = g.co * g.ho * g.wo;
    for n in 0..xs.n {
        let dst = &mut out.data_mut()[n * item_out..(n + 1) * item_out];
        correlate(x.item(n), w.data(), &g, dst, &mut col);
    }
    if let Some(b) = b {
        add_bias(&mut out, b);
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> ConvGrads<T> {
    let xs = x.shape();
    let g = conv_geom(xs, w.shape(), stride, pad);
    let mut col = Vec::new();
    let mut dx = need_dx.then(|| Tensor::zeros(xs));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    for n in 0..xs.n {
        let dout = dy.item(n);
        if let Some(dw) = dw.as_mut() {
            correlate_weight_grad(x.item(n), dout, &g, dw.data_mut(), &mut col);
        }
        if let Some(dx) = dx.as_mut() {
            correlate_adjoint(dout, w.data(), &g, dx.item_mut(n), &mut col);
        }
    }
    ConvGrads { dx, dw, db: need_dw.then(|| bias_grad(dy)) }
}

fn conv_t_geom(x: Shape, w: Shape, stride: usize, pad: usize) -> Geom {
    assert_eq!(w.h, w.w, "square kernels only");
    assert_eq!(x.c, w.n, "transposed conv input has {} channels, weight expects {}", x.c, w.n);
    // Transposed convolution is the adjoint of a correlation that maps the
    // (larger) output space back onto the input space.
    Geom {
        ci: w.c,
        hi: conv_transpose_out_size(x.h, w.h, stride, pad),
        wi: conv_transpose_out_size(x.w, w.w, stride, pad),
        co: x.c,
        ho: x.h,
        wo: x.w,
        k: w.h,
        stride,
        pad,
    }
}

/// Weight layout `[c_in, c_out, k, k]`, bias `[1, 1, 1, c_out]`.
pub fn conv_transpose2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let xs = x.shape();
    let g = conv_t_geom(xs, w.shape(), stride, pad);
    let mut out = Tensor::zeros(Shape::new(xs.n, g.ci, g.hi, g.wi));
    let mut col = Vec::new();
    for n in 0..xs.n {
        correlate_adjoint(x.item(n), w.data(), &g, out.item_mut(n), &mut col);
    }
    if let Some(b) = b {
        add_bias(&mut out, b);
    }
    out
}

pub fn conv_transpose2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> ConvGrads<T> {
    let xs = x.shape();
    let g = conv_t_geom(xs, w.shape(), stride, pad);
    let mut col = Vec::new();
    let mut dx = need_dx.then(|| Tensor::zeros(xs));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    for n in 0..xs.n {
        let dout = dy.item(n);
        if let Some(dx) = dx.as_mut() {
            correlate(dout, w.data(), &g, dx.item_mut(n), &mut col);
        }
        if let Some(dw) = dw.as_mut() {
            correlate_weight_grad(dout, x.item(n), &g, dw.data_mut(), &mut col);
        }
    }
    ConvGrads { dx, dw, db: need_dw.then(|| bias_grad(dy)) }
}

pub fn leaky_relu<T: Real>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { v * slope })
}

pub fn leaky_relu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>, slope: T) -> Tensor<T> {
    x.zip_map(dy, |v, d| if v > T::zero() { d } else { d * slope })
}

/// Channel concatenation.
pub fn concat<T: Real>(xs: &[&Tensor<T>]) -> Tensor<T> {
    assert!(!xs.is_empty(), "concat of zero tensors");
    let s0 = xs[0].shape();
    for t in xs {
        let s = t.shape();
        assert!(s.n == s0.n && s.h == s0.h && s.w == s0.w, "concat shape mismatch {s} vs {s0}");
    }
    let c: usize = xs.iter().map(|t| t.shape().c).sum();
    let mut data = Vec::with_capacity(s0.n * c * s0.plane());
    for n in 0..s0.n {
        for t in xs {
            data.extend_from_slice(t.item(n));
        }
    }
    Tensor::from_vec(s0.with_c(c), data)
}

/// Splits a concatenated gradient back into per-input pieces.
pub fn concat_backward<T: Real>(dy: &Tensor<T>, channels: &[usize]) -> Vec<Tensor<T>> {
    let mut c0 = 0;
    channels
        .iter()
        .map(|&c| {
            let t = dy.channels(c0, c);
            c0 += c;
            t
        })
        .collect()
}

/// Non-overlapping `k×k` mean pooling; spatial size must be divisible by `k`.
pub fn avg_pool<T: Real>(x: &Tensor<T>, k: usize) -> Tensor<T> {
    let s = x.shape();
    assert!(s.h % k == 0 && s.w % k == 0, "avg_pool: {s} not divisible by {k}");
    let (ho, wo) = (s.h / k, s.w / k);
    let inv = T::one() / T::from_usize(k * k).unwrap();
    Tensor::from_fn(Shape::new(s.n, s.c, ho, wo), |n, c, y, xx| {
        let mut acc = T::zero();
        for dy in 0..k {
            for dx in 0..k {
                acc += x.at(n, c, y * k + dy, xx * k + dx);
            }
        }
        acc * inv
    })
}

pub fn avg_pool_backward<T: Real>(dy: &Tensor<T>, k: usize) -> Tensor<T> {
    let s = dy.shape();
    let inv = T::one() / T::from_usize(k * k).unwrap();
    Tensor::from_fn(Shape::new(s.n, s.c, s.h * k, s.w * k), |n, c, y, x| dy.at(n, c, y / k, x / k) * inv)
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Reflect padding (edge pixel not repeated), `pads = [top, bottom, left, right]`.
pub fn pad_reflect<T: Real>(x: &Tensor<T>, pads: [usize; 4]) -> Tensor<T> {
    let s = x.shape();
    let [t, b, l, r] = pads;
    Tensor::from_fn(Shape::new(s.n, s.c, s.h + t + b, s.w + l + r), |n, c, y, xx| {
        let sy = reflect(y as isize - t as isize, s.h);
        let sx = reflect(xx as isize - l as isize, s.w);
        x.at(n, c, sy, sx)
    })
}

pub fn pad_reflect_backward<T: Real>(dy: &Tensor<T>, src: Shape, pads: [usize; 4]) -> Tensor<T> {
    let s = dy.shape();
    let [t, _, l, _] = pads;
    let mut dx = Tensor::zeros(src);
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                let sy = reflect(y as isize - t as isize, src.h);
                for xx in 0..s.w {
                    let sx = reflect(xx as isize - l as isize, src.w);
                    let i = dx.index(n, c, sy, sx);
                    dx.data_mut()[i] += dy.at(n, c, y, xx);
                }
            }
        }
    }
    dx
}

pub fn crop_backward<T: Real>(dy: &Tensor<T>, src: Shape, top: usize, left: usize) -> Tensor<T> {
    let s = dy.shape();
    let mut dx = Tensor::zeros(src);
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                let row = dx.index(n, c, y + top, left);
                let src_row = dy.index(n, c, y, 0);
                dx.data_mut()[row..row + s.w].copy_from_slice(&dy.data()[src_row..src_row + s.w]);
            }
        }
    }
    dx
}
