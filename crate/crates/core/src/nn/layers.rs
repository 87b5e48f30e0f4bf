use rand::Rng;

use crate::nn::exec::Exec;
use crate::nn::params::{ParamBuilder, ParamId, ParamStore};
use crate::nn::LEAKY_SLOPE;
use crate::tensor::{Real, Shape};

/// Square-kernel convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<T: Real, R: Rng>(
        b: &mut ParamBuilder<'_, T, R>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let (weight, bias) = b.scoped(name, |b| {
            (
                b.weight("weight", Shape::new(out_channels, in_channels, kernel, kernel), fan_in),
                b.uniform("bias", Shape::new(1, 1, 1, out_channels), fan_in),
            )
        });
        Self { weight, bias, in_channels, out_channels, kernel, stride, pad }
    }

    /// Stride-1 convolution preserving spatial size.
    pub fn same<T: Real, R: Rng>(
        b: &mut ParamBuilder<'_, T, R>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    ) -> Self {
        Self::new(b, name, in_channels, out_channels, kernel, 1, kernel / 2)
    }

    pub fn forward<T: Real, E: Exec<T>>(&self, e: &mut E, store: &ParamStore<T>, x: &E::V) -> E::V {
        debug_assert_eq!(e.shape(x).c, self.in_channels);
        let w = e.param(store, self.weight);
        let b = e.param(store, self.bias);
        e.conv2d(x, &w, Some(&b), self.stride, self.pad)
    }

    pub fn forward_lrelu<T: Real, E: Exec<T>>(&self, e: &mut E, store: &ParamStore<T>, x: &E::V) -> E::V {
        let y = self.forward(e, store, x);
        e.leaky_relu(&y, LEAKY_SLOPE)
    }
}

/// Transposed convolution with bias; weight layout `[in, out, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    pub fn new<T: Real, R: Rng>(
        b: &mut ParamBuilder<'_, T, R>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel / (stride * stride);
        let (weight, bias) = b.scoped(name, |b| {
            (
                b.weight("weight", Shape::new(in_channels, out_channels, kernel, kernel), fan_in),
                b.uniform("bias", Shape::new(1, 1, 1, out_channels), fan_in),
            )
        });
        Self { weight, bias, in_channels, out_channels, kernel, stride, pad }
    }

    pub fn forward<T: Real, E: Exec<T>>(&self, e: &mut E, store: &ParamStore<T>, x: &E::V) -> E::V {
        let w = e.param(store, self.weight);
        let b = e.param(store, self.bias);
        e.conv_transpose2d(x, &w, Some(&b), self.stride, self.pad)
    }
}

/// Residual dense block: densely connected 3×3 convs, 1×1 local fusion, local residual.
#[derive(Clone, Debug)]
pub struct Rdb {
    pub dense: Vec<Conv2d>,
    pub fusion: Conv2d,
}

impl Rdb {
    pub fn new<T: Real, R: Rng>(
        b: &mut ParamBuilder<'_, T, R>,
        name: &str,
        channels: usize,
        growth: usize,
        layers: usize,
    ) -> Self {
        b.scoped(name, |b| {
            let dense =
                (0..layers).map(|i| Conv2d::same(b, &format!("dense{i}"), channels + i * growth, growth, 3)).collect();
            let fusion = Conv2d::same(b, "fusion", channels + layers * growth, channels, 1);
            Self { dense, fusion }
        })
    }

    pub fn forward<T: Real, E: Exec<T>>(&self, e: &mut E, store: &ParamStore<T>, x: &E::V) -> E::V {
        let mut feats = vec![x.clone()];
        for conv in &self.dense {
            let input = if feats.len() == 1 { feats[0].clone() } else { e.concat(&feats.iter().collect::<Vec<_>>()) };
            feats.push(conv.forward_lrelu(e, store, &input));
        }
        let all = e.concat(&feats.iter().collect::<Vec<_>>());
        let fused = self.fusion.forward(e, store, &all);
        e.add(&fused, x)
    }
}
