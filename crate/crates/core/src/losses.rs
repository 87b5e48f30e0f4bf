//! Training objective: Charbonnier content loss, image-gradient loss, the
//! motion-magnitude loss and their weighted total.
//!
//! Each loss exists as a plain function (value only) and as a tape node whose
//! backward pass calls the `*_backward` helpers here.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mmpnet::MmpNet;
use crate::nn::{Eager, Exec};
use crate::tensor::{Real, Tensor};

/// Weights of the total objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Gradient-loss weight.
    pub lambda1: f64,
    /// Motion-magnitude-loss weight.
    pub lambda2: f64,
    /// Charbonnier constant.
    pub epsilon: f64,
    pub gradient_op: GradientOp,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 0.5, lambda2: 1.0, epsilon: 1e-3, gradient_op: GradientOp::Forward }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Discrete image-gradient operator used by the gradient loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GradientOp {
    /// `I(y, x+1) - I(y, x)` and `I(y+1, x) - I(y, x)`; zero on the last column/row.
    #[default]
    Forward,
    /// 3×3 Sobel responses on interior pixels; zero on the one-pixel border.
    Sobel,
}

fn check_same(a: &Tensor<impl Real>, b: &Tensor<impl Real>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!("shape mismatch: {} vs {}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean over pixels of `sqrt(Σ_ch (I - O)² + ε²)`.
pub fn charbonnier<T: Real>(target: &Tensor<T>, output: &Tensor<T>, epsilon: f64) -> Result<T> {
    check_same(target, output)?;
    if !(epsilon > 0.0) {
        return Err(Error::invalid("epsilon must be > 0"));
    }
    Ok(charbonnier_value(target, output, T::lit(epsilon)))
}

pub(crate) fn charbonnier_value<T: Real>(target: &Tensor<T>, output: &Tensor<T>, eps: T) -> T {
    let s = target.shape();
    let plane = s.plane();
    let mut total = T::zero();
    for n in 0..s.n {
        let (a, b) = (target.item(n), output.item(n));
        for p in 0..plane {
            let mut sq = eps * eps;
            for c in 0..s.c {
                let d = a[c * plane + p] - b[c * plane + p];
                sq += d * d;
            }
            // Accumulate the excess over ε so a zero residual yields ε exactly.
            total += sq.sqrt() - eps;
        }
    }
    total / T::from_usize(s.n * plane).unwrap() + eps
}

/// Gradient of the Charbonnier loss with respect to `output` (the target gradient is its negation).
pub(crate) fn charbonnier_backward<T: Real>(target: &Tensor<T>, output: &Tensor<T>, eps: T, g: T) -> Tensor<T> {
    let s = target.shape();
    let plane = s.plane();
    let scale = g / T::from_usize(s.n * plane).unwrap();
    let mut d_out = Tensor::zeros(s);
    for n in 0..s.n {
        let (a, b) = (target.item(n), output.item(n));
        let mut root = vec![eps * eps; plane];
        for c in 0..s.c {
            for p in 0..plane {
                let d = a[c * plane + p] - b[c * plane + p];
                root[p] += d * d;
            }
        }
        for r in &mut root {
            *r = r.sqrt();
        }
        let dst = d_out.item_mut(n);
        for c in 0..s.c {
            for p in 0..plane {
                let d = a[c * plane + p] - b[c * plane + p];
                dst[c * plane + p] = -d / root[p] * scale;
            }
        }
    }
    d_out
}

/// Applies the gradient operator to one `h×w` plane, writing x- and y-responses.
fn grad_plane<T: Real>(op: GradientOp, src: &[T], h: usize, w: usize, gx: &mut [T], gy: &mut [T]) {
    match op {
        GradientOp::Forward => {
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    gx[i] = if x + 1 < w { src[i + 1] - src[i] } else { T::zero() };
                    gy[i] = if y + 1 < h { src[i + w] - src[i] } else { T::zero() };
                }
            }
        }
        GradientOp::Sobel => {
            gx.iter_mut().for_each(|v| *v = T::zero());
            gy.iter_mut().for_each(|v| *v = T::zero());
            let two = T::lit(2.0);
            for y in 1..h.saturating_sub(1) {
                for x in 1..w.saturating_sub(1) {
                    let p = |dy: isize, dx: isize| src[(y as isize + dy) as usize * w + (x as isize + dx) as usize];
                    gx[y * w + x] = (p(-1, 1) + two * p(0, 1) + p(1, 1)) - (p(-1, -1) + two * p(0, -1) + p(1, -1));
                    gy[y * w + x] = (p(1, -1) + two * p(1, 0) + p(1, 1)) - (p(-1, -1) + two * p(-1, 0) + p(-1, 1));
                }
            }
        }
    }
}

/// Adjoint of [`grad_plane`]: `dst += Dxᵀ gx + Dyᵀ gy`.
fn grad_plane_adjoint<T: Real>(op: GradientOp, gx: &[T], gy: &[T], h: usize, w: usize, dst: &mut [T]) {
    match op {
        GradientOp::Forward => {
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    if x + 1 < w {
                        dst[i + 1] += gx[i];
                        dst[i] -= gx[i];
                    }
                    if y + 1 < h {
                        dst[i + w] += gy[i];
                        dst[i] -= gy[i];
                    }
                }
            }
        }
        GradientOp::Sobel => {
            let two = T::lit(2.0);
            for y in 1..h.saturating_sub(1) {
                for x in 1..w.saturating_sub(1) {
                    let (ax, ay) = (gx[y * w + x], gy[y * w + x]);
                    let mut put = |dy: isize, dx: isize, v: T| {
                        dst[(y as isize + dy) as usize * w + (x as isize + dx) as usize] += v;
                    };
                    put(-1, 1, ax);
                    put(0, 1, two * ax);
                    put(1, 1, ax);
                    put(-1, -1, -ax);
                    put(0, -1, -two * ax);
                    put(1, -1, -ax);
                    put(1, -1, ay);
                    put(1, 0, two * ay);
                    put(1, 1, ay);
                    put(-1, -1, -ay);
                    put(-1, 0, -two * ay);
                    put(-1, 1, -ay);
                }
            }
        }
    }
}

/// Mean squared difference between the gradient images of `target` and
/// `output`, averaged over both directions, all channels and all pixels.
pub fn gradient_loss<T: Real>(target: &Tensor<T>, output: &Tensor<T>, op: GradientOp) -> Result<T> {
    check_same(target, output)?;
    Ok(gradient_loss_value(target, output, op))
}

pub(crate) fn gradient_loss_value<T: Real>(target: &Tensor<T>, output: &Tensor<T>, op: GradientOp) -> T {
    let s = target.shape();
    let (h, w) = (s.h, s.w);
    let plane = s.plane();
    let mut diff = vec![T::zero(); plane];
    let mut gx = vec![T::zero(); plane];
    let mut gy = vec![T::zero(); plane];
    let mut total = T::zero();
    for (a, b) in target.data().chunks(plane).zip(output.data().chunks(plane)) {
        for p in 0..plane {
            diff[p] = a[p] - b[p];
        }
        grad_plane(op, &diff, h, w, &mut gx, &mut gy);
        total += gx.iter().chain(&gy).map(|&v| v * v).sum::<T>();
    }
    total / T::from_usize(2 * s.len()).unwrap()
}

pub(crate) fn gradient_loss_backward<T: Real>(target: &Tensor<T>, output: &Tensor<T>, op: GradientOp, g: T) -> Tensor<T> {
    let s = target.shape();
    let (h, w) = (s.h, s.w);
    let plane = s.plane();
    // d/dO of mean(D(I - O)²) = -2/count · Dᵀ D (I - O)
    let scale = -T::lit(2.0) * g / T::from_usize(2 * s.len()).unwrap();
    let mut d_out = Tensor::zeros(s);
    let mut diff = vec![T::zero(); plane];
    let mut gx = vec![T::zero(); plane];
    let mut gy = vec![T::zero(); plane];
    for (i, (a, b)) in target.data().chunks(plane).zip(output.data().chunks(plane)).enumerate() {
        for p in 0..plane {
            diff[p] = a[p] - b[p];
        }
        grad_plane(op, &diff, h, w, &mut gx, &mut gy);
        let dst = &mut d_out.data_mut()[i * plane..(i + 1) * plane];
        grad_plane_adjoint(op, &gx, &gy, h, w, dst);
        for v in dst.iter_mut() {
            *v *= scale;
        }
    }
    d_out
}

/// Mean absolute difference, the MMP-Net regression loss.
pub fn l1<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    check_same(a, b)?;
    Ok(l1_value(a, b))
}

pub(crate) fn l1_value<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> T {
    let sum: T = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y).abs()).sum();
    sum / T::from_usize(a.len()).unwrap()
}

pub(crate) fn l1_backward<T: Real>(a: &Tensor<T>, b: &Tensor<T>, g: T) -> Tensor<T> {
    let scale = g / T::from_usize(a.len()).unwrap();
    a.zip_map(b, |x, y| {
        let d = x - y;
        if d > T::zero() {
            scale
        } else if d < T::zero() {
            -scale
        } else {
            T::zero()
        }
    })
}

/// Mean of the raw (unclamped) MMP-Net response to the restored frame.
pub fn mm_loss<T: Real>(output: &Tensor<T>, mmpnet: Option<&MmpNet<T>>) -> Result<T> {
    let net = mmpnet.ok_or_else(|| Error::invalid("motion-magnitude loss needs MMP-Net parameters"))?;
    let m = net.forward_raw(&mut Eager, output)?;
    Ok(m.mean())
}

/// Individual terms of the objective and their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub charbonnier: f64,
    pub gradient: f64,
    pub motion: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(charbonnier: f64, gradient: f64, motion: f64, w: &LossWeights) -> Self {
        Self { charbonnier, gradient, motion, total: charbonnier + w.lambda1 * gradient + w.lambda2 * motion }
    }
}

/// `L_char + λ1·L_grad + λ2·L_MM`. The motion term is skipped (and MMP-Net not
/// required) when `λ2 == 0`.
pub fn total_loss<T: Real>(
    target: &Tensor<T>,
    output: &Tensor<T>,
    mmpnet: Option<&MmpNet<T>>,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let c = charbonnier(target, output, weights.epsilon)?.to_f64().unwrap();
    let g = gradient_loss(target, output, weights.gradient_op)?.to_f64().unwrap();
    let m = if weights.lambda2 != 0.0 { mm_loss(output, mmpnet)?.to_f64().unwrap() } else { 0.0 };
    Ok(LossBreakdown::combine(c, g, m, weights))
}

/// Records the motion-magnitude loss on any executor (used by the tape path).
pub fn mm_response<T: Real, E: Exec<T>>(exec: &mut E, net: &MmpNet<T>, output: &E::V) -> Result<E::V> {
    net.forward_raw_v(exec, output)
}
