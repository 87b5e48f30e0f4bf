//! Compact encoder-decoder regressor predicting a motion-magnitude map from a
//! single blurry frame.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvTranspose2d, Eager, Exec, MacCounter, ParamBuilder, ParamStore, Rdb, WeightInit};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MmpNetConfig {
    pub base_channels: usize,
    /// Encoder downsamplings; each doubles the width.
    pub levels: usize,
    pub rdb_layers: usize,
    pub rdb_growth: usize,
    /// Extra 3×3 convs at the deepest level.
    pub bottleneck_convs: usize,
}

impl Default for MmpNetConfig {
    fn default() -> Self {
        Self { base_channels: 16, levels: 3, rdb_layers: 3, rdb_growth: 8, bottleneck_convs: 3 }
    }
}

impl MmpNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.levels == 0 || self.rdb_layers == 0 || self.rdb_growth == 0 {
            return Err(Error::invalid("mmpnet widths, levels and RDB sizes must be positive"));
        }
        if self.levels > 8 {
            return Err(Error::invalid("mmpnet supports at most 8 levels"));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial multiple the network works on internally.
    pub fn multiple(&self) -> usize {
        1 << self.levels
    }
}

struct EncoderLevel {
    down: Conv2d,
    convs: Vec<Conv2d>,
}

struct DecoderLevel {
    up: ConvTranspose2d,
    merge: Conv2d,
}

pub struct MmpNet<T> {
    config: MmpNetConfig,
    store: ParamStore<T>,
    head: Conv2d,
    encoder: Vec<EncoderLevel>,
    decoder: Vec<DecoderLevel>,
    refine: Rdb,
    tail: Conv2d,
}

impl<T: Real> Clone for MmpNet<T> {
    fn clone(&self) -> Self {
        let mut other = Self::build(self.config, &mut ChaCha8Rng::seed_from_u64(0));
        other.store.copy_from(&self.store).expect("identical layout");
        other
    }
}

impl<T: Real> MmpNet<T> {
    /// Randomly initialised network.
    pub fn new(config: MmpNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self::build(config, &mut ChaCha8Rng::seed_from_u64(seed)))
    }

    fn build(config: MmpNetConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, rng).with_init(WeightInit::He);
        let c0 = config.base_channels;
        let head = Conv2d::same(&mut b, "head", 3, c0, 9);
        let encoder = (1..=config.levels)
            .map(|l| {
                b.scoped(&format!("enc{l}"), |b| {
                    let (ci, co) = (config.width(l - 1), config.width(l));
                    let down = Conv2d::new(b, "down", ci, co, 3, 2, 1);
                    let extra = if l == config.levels { config.bottleneck_convs } else { 0 };
                    let convs = (0..1 + extra).map(|i| Conv2d::same(b, &format!("conv{i}"), co, co, 3)).collect();
                    EncoderLevel { down, convs }
                })
            })
            .collect();
        let decoder = (1..=config.levels)
            .rev()
            .map(|l| {
                b.scoped(&format!("dec{l}"), |b| {
                    let (ci, co) = (config.width(l), config.width(l - 1));
                    DecoderLevel {
                        up: ConvTranspose2d::new(b, "up", ci, co, 2, 2, 0),
                        merge: Conv2d::same(b, "merge", 2 * co, co, 3),
                    }
                })
            })
            .collect();
        let refine = Rdb::new(&mut b, "refine", c0, config.rdb_growth, config.rdb_layers);
        let tail = Conv2d::same(&mut b, "tail", c0, 1, 3);
        Self { config, store, head, encoder, decoder, refine, tail }
    }

    /// Network with parameters taken from `store` (names and shapes must match).
    pub fn from_store(config: MmpNetConfig, store: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let mut net = Self::build(config, &mut ChaCha8Rng::seed_from_u64(0));
        net.store.copy_from(store).map_err(Error::invalid)?;
        Ok(net)
    }

    pub fn config(&self) -> &MmpNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn cast<U: Real>(&self) -> MmpNet<U> {
        MmpNet::from_store(self.config, &self.store.cast()).expect("identical layout")
    }

    /// Unclamped prediction on any executor. Input must be `N×3×H×W`; sizes that
    /// are not a multiple of `2^levels` are reflect-padded and the output cropped back.
    pub fn forward_raw_v<E: Exec<T>>(&self, e: &mut E, x: &E::V) -> Result<E::V> {
        let s = e.shape(x);
        if s.c != 3 {
            return Err(Error::invalid(format!("mmpnet expects RGB input, got {} channels", s.c)));
        }
        let m = self.config.multiple();
        let (ph, pw) = (s.h.div_ceil(m) * m - s.h, s.w.div_ceil(m) * m - s.w);
        if (ph > 0 && ph >= s.h) || (pw > 0 && pw >= s.w) {
            return Err(Error::invalid(format!("frame {}×{} too small to pad to a multiple of {m}", s.h, s.w)));
        }
        let padded = if ph + pw > 0 { e.pad_reflect(x, [0, ph, 0, pw]) } else { x.clone() };
        let y = self.body(e, &padded);
        Ok(if ph + pw > 0 { e.crop(&y, 0, 0, s.h, s.w) } else { y })
    }

    fn body<E: Exec<T>>(&self, e: &mut E, x: &E::V) -> E::V {
        let st = &self.store;
        let mut h = self.head.forward_lrelu(e, st, x);
        let mut skips = Vec::with_capacity(self.encoder.len());
        for level in &self.encoder {
            skips.push(h.clone());
            h = level.down.forward_lrelu(e, st, &h);
            for conv in &level.convs {
                h = conv.forward_lrelu(e, st, &h);
            }
        }
        for (level, skip) in self.decoder.iter().zip(skips.iter().rev()) {
            let up = level.up.forward(e, st, &h);
            let up = e.leaky_relu(&up, crate::nn::LEAKY_SLOPE);
            let cat = e.concat(&[&up, skip]);
            h = level.merge.forward_lrelu(e, st, &cat);
        }
        let h = self.refine.forward(e, st, &h);
        self.tail.forward(e, st, &h)
    }

    pub fn forward_raw(&self, e: &mut Eager, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.forward_raw_v(e, &Arc::new(x.clone()))?;
        Ok(Arc::try_unwrap(y).unwrap_or_else(|a| (*a).clone()))
    }

    /// Inference: prediction clamped to `[0, 1]`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_raw(&mut Eager, x)?.clamp(T::zero(), T::one()))
    }

    /// MACs of one forward pass at `height×width`, counted by tracing the network.
    pub fn traced_macs(&self, height: usize, width: usize) -> Result<u128> {
        let mut mc = MacCounter::default();
        let x = Exec::<T>::zeros(&mut mc, Shape::new(1, 3, height, width));
        self.forward_raw_v(&mut mc, &x)?;
        Ok(mc.macs)
    }
}

/// Closed-form multiply-accumulate count for one frame (in MACs).
pub fn mmpnet_mac_count(config: &MmpNetConfig, height: usize, width: usize) -> u128 {
    let m = config.multiple();
    let (h, w) = (height.div_ceil(m) * m, width.div_ceil(m) * m);
    let full = (h * w) as u128;
    let c0 = config.base_channels as u128;
    let conv = |px: u128, k: u128, ci: u128, co: u128| px * k * k * ci * co;
    let mut macs = conv(full, 9, 3, c0);
    for l in 1..=config.levels {
        let px = full >> (2 * l);
        let (ci, co) = (config.width(l - 1) as u128, config.width(l) as u128);
        let extra = if l == config.levels { config.bottleneck_convs as u128 } else { 0 };
        macs += conv(px, 3, ci, co) + (1 + extra) * conv(px, 3, co, co);
        // Transposed conv: input pixels × k² × in × out; then the merge conv at the finer level.
        macs += conv(px, 2, co, ci) + conv(full >> (2 * (l - 1)), 3, 2 * ci, ci);
    }
    let g = config.rdb_growth as u128;
    for i in 0..config.rdb_layers as u128 {
        macs += conv(full, 3, c0 + i * g, g);
    }
    macs += conv(full, 1, c0 + config.rdb_layers as u128 * g, c0);
    macs + conv(full, 3, c0, 1)
}

/// MMP-Net cost in GMACs at `height×width`.
pub fn mmpnet_macs(config: &MmpNetConfig, height: usize, width: usize) -> f64 {
    mmpnet_mac_count(config, height, width) as f64 / 1e9
}

/// Closed-form learnable-parameter count.
pub fn mmpnet_param_count(config: &MmpNetConfig) -> usize {
    let conv = |k: usize, ci: usize, co: usize| k * k * ci * co + co;
    let c0 = config.base_channels;
    let mut n = conv(9, 3, c0);
    for l in 1..=config.levels {
        let (ci, co) = (config.width(l - 1), config.width(l));
        let extra = if l == config.levels { config.bottleneck_convs } else { 0 };
        n += conv(3, ci, co) + (1 + extra) * conv(3, co, co);
        n += conv(2, co, ci) + conv(3, 2 * ci, ci);
    }
    let g = config.rdb_growth;
    n += (0..config.rdb_layers).map(|i| conv(3, c0 + i * g, g)).sum::<usize>();
    n += conv(1, c0 + config.rdb_layers * g, c0);
    n + conv(3, c0, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> MmpNetConfig {
        MmpNetConfig { base_channels: 4, levels: 2, rdb_layers: 2, rdb_growth: 3, bottleneck_convs: 1 }
    }

    fn random_frame(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(Shape::new(1, 3, h, w), |_, _, _, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn zero_weights_give_zero_map() {
        let mut net = MmpNet::<f32>::new(MmpNetConfig::default(), 3).unwrap();
        net.params_mut().fill(0.0);
        let y = net.forward(&random_frame(32, 40, 1).cast()).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 32, 40));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shape_and_padding() {
        let net = MmpNet::<f32>::new(small(), 1).unwrap();
        assert_eq!(net.forward(&random_frame(13, 10, 2).cast()).unwrap().shape(), Shape::new(1, 1, 13, 10));
        assert_eq!(net.traced_macs(512, 512).unwrap() > 0, true);
        let s = net.forward_raw_v(&mut MacCounter::default(), &Shape::new(1, 3, 512, 512)).unwrap();
        assert_eq!(s, Shape::new(1, 1, 512, 512));
        assert!(net.forward(&random_frame(5, 5, 2).cast().channels(0, 1)).is_err());
    }

    #[test]
    fn inference_is_clamped() {
        let net = MmpNet::<f64>::new(small(), 4).unwrap();
        let y = net.forward(&random_frame(16, 16, 5).map(|v| v * 50.0)).unwrap();
        assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn closed_form_counts_match_traced_network() {
        for cfg in [MmpNetConfig::default(), small()] {
            let net = MmpNet::<f32>::new(cfg, 0).unwrap();
            assert_eq!(net.param_count(), mmpnet_param_count(&cfg));
            for (h, w) in [(64, 64), (720, 1280), (40, 24)] {
                assert_eq!(net.traced_macs(h, w).unwrap(), mmpnet_mac_count(&cfg, h, w), "{h}x{w}");
            }
        }
    }

    #[test]
    fn macs_linear_in_rows() {
        let cfg = MmpNetConfig::default();
        assert_eq!(mmpnet_mac_count(&cfg, 1440, 1280), 2 * mmpnet_mac_count(&cfg, 720, 1280));
    }

    #[test]
    fn translation_covariance_in_interior() {
        let cfg = small();
        let net = MmpNet::<f64>::new(cfg, 7).unwrap();
        let shift = cfg.multiple();
        let n = 96;
        let base = random_frame(n, n + shift, 9);
        let a = base.crop(0, shift, n, n);
        let b = base.crop(0, 0, n, n);
        let ya = net.forward_raw(&mut Eager, &a).unwrap();
        let yb = net.forward_raw(&mut Eager, &b).unwrap();
        let margin = 32;
        for y in margin..n - margin {
            for x in margin..n - margin - shift {
                let d = ya.at(0, 0, y, x) - yb.at(0, 0, y, x + shift);
                assert!(d.abs() < 1e-10, "({y},{x}) differs by {d}");
            }
        }
    }
}
