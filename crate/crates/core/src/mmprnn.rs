//! Recurrent deblurring network guided by the motion-magnitude prior.
//!
//! Each frame is encoded to quarter resolution, modulated by the prior (the
//! attentive module), fused with the previous cell's non-deblurred and
//! deblurred features and refined by RDB-Net-A. The sharp centre frame is
//! reconstructed from the deblurred features of five consecutive frames.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mmpnet::{mmpnet_mac_count, mmpnet_param_count, MmpNet, MmpNetConfig};
use crate::nn::{Conv2d, ConvTranspose2d, Eager, Exec, MacCounter, ParamBuilder, ParamStore, Rdb, LEAKY_SLOPE};
use crate::tensor::{Real, Shape, Tensor};

/// Frames consumed by one reconstruction (t−2..t+2).
pub const WINDOW: usize = 5;
/// Spatial reduction between frames and recurrent features.
pub const FEATURE_STRIDE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// RDBs in the per-frame refinement stack (RDB-Net-A).
    pub n_a: usize,
    /// RDBs in the reconstruction stack (RDB-Net-B).
    pub n_b: usize,
    /// Feature width.
    pub n_c: usize,
    /// Input sequence length.
    #[serde(rename = "F")]
    pub frames: usize,
    /// Conv layers per RDB.
    pub rdb_layers: usize,
    /// RDB growth rate as a multiple of `n_c` in RDB-Net-A/B.
    pub growth_factor: usize,
    /// Prior-guided feature modulation.
    pub mmam: bool,
    /// Carry non-deblurred features between cells.
    pub ndf: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { n_a: 9, n_b: 10, n_c: 18, frames: 8, rdb_layers: 3, growth_factor: 4, mmam: true, ndf: true }
    }
}

impl NetConfig {
    pub fn new(n_a: usize, n_b: usize, n_c: usize, frames: usize) -> Self {
        Self { n_a, n_b, n_c, frames, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_a == 0 || self.n_b == 0 || self.n_c == 0 || self.rdb_layers == 0 || self.growth_factor == 0 {
            return Err(Error::invalid("n_a, n_b, n_c, rdb_layers and growth_factor must be positive"));
        }
        if self.frames < WINDOW {
            return Err(Error::invalid(format!("F = {} but reconstruction needs a {WINDOW}-frame window", self.frames)));
        }
        Ok(())
    }

    fn growth(&self) -> usize {
        self.growth_factor * self.n_c
    }

    fn fuse_inputs(&self) -> usize {
        if self.ndf {
            3
        } else {
            2
        }
    }
}

impl fmt::Display for NetConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "A{}B{}C{}F{}", self.n_a, self.n_b, self.n_c, self.frames)
    }
}

impl FromStr for NetConfig {
    type Err = Error;

    /// Parses tags like `A3B4C16F5`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("malformed network tag `{s}`, expected A#B#C#F#"));
        let mut vals = [0usize; 4];
        let mut rest = s;
        for (i, key) in ['A', 'B', 'C', 'F'].iter().enumerate() {
            rest = rest.strip_prefix(*key).ok_or_else(bad)?;
            let end = rest.find(|c: char| !c.is_ascii_digit()).unwrap_or(rest.len());
            vals[i] = rest[..end].parse().map_err(|_| bad())?;
            rest = &rest[end..];
        }
        if !rest.is_empty() {
            return Err(bad());
        }
        let cfg = NetConfig::new(vals[0], vals[1], vals[2], vals[3]);
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Features carried from one cell to the next.
#[derive(Clone, Debug)]
pub struct RecurrentState<V> {
    /// Encoder features after prior modulation (`l`).
    pub non_deblurred: V,
    /// Output of RDB-Net-A (`h`); also the fused feature used for reconstruction.
    pub deblurred: V,
}

/// Prior-guided modulation: `γ = project(lrelu(expand(avgpool(M))))`, output `γ ⊗ x`.
#[derive(Clone, Debug)]
pub struct Mmam {
    pub expand: Conv2d,
    pub project: Conv2d,
}

impl Mmam {
    pub fn gamma<T: Real, E: Exec<T>>(&self, e: &mut E, store: &ParamStore<T>, prior: &E::V, size: (usize, usize)) -> Result<E::V> {
        let ps = e.shape(prior);
        if ps.c != 1 || ps.h % size.0 != 0 || ps.w % size.1 != 0 || ps.h / size.0 != ps.w / size.1 {
            return Err(Error::invalid(format!("prior {ps} cannot be pooled to {}×{}", size.0, size.1)));
        }
        let pooled = if ps.h == size.0 { prior.clone() } else { e.avg_pool(prior, ps.h / size.0) };
        let hidden = self.expand.forward_lrelu(e, store, &pooled);
        Ok(self.project.forward(e, store, &hidden))
    }

    pub fn fuse<T: Real, E: Exec<T>>(&self, e: &mut E, store: &ParamStore<T>, x: &E::V, prior: &E::V) -> Result<E::V> {
        let s = e.shape(x);
        let gamma = self.gamma(e, store, prior, (s.h, s.w))?;
        if e.shape(&gamma) != s {
            return Err(Error::invalid("modulation and features differ in shape"));
        }
        Ok(e.mul(&gamma, x))
    }
}

struct DownBlock {
    rdb: Rdb,
    conv: Conv2d,
}

pub struct MmpRnn<T> {
    config: NetConfig,
    store: ParamStore<T>,
    head: Conv2d,
    down: Vec<DownBlock>,
    mmam: Option<Mmam>,
    squeeze: Conv2d,
    rdb_a: Vec<Rdb>,
    rm_squeeze: Conv2d,
    rdb_b: Vec<Rdb>,
    up: Vec<ConvTranspose2d>,
    out: Conv2d,
    skip: Conv2d,
}

impl<T: Real> Clone for MmpRnn<T> {
    fn clone(&self) -> Self {
        let mut other = Self::build(self.config, &mut ChaCha8Rng::seed_from_u64(0));
        other.store.copy_from(&self.store).expect("identical layout");
        other
    }
}

impl<T: Real> MmpRnn<T> {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self::build(config, &mut ChaCha8Rng::seed_from_u64(seed)))
    }

    fn build(config: NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, rng);
        let c = config.n_c;
        let (head, down, squeeze, rdb_a) = b.scoped("fem", |b| {
            let head = Conv2d::same(b, "head", 3, c, 9);
            let down = (0..2)
                .map(|i| DownBlock {
                    rdb: Rdb::new(b, &format!("down{i}.rdb"), c, c, config.rdb_layers),
                    conv: Conv2d::new(b, &format!("down{i}.conv"), c, c, 5, 2, 2),
                })
                .collect();
            let squeeze = Conv2d::same(b, "squeeze", config.fuse_inputs() * c, c, 1);
            let rdb_a = (0..config.n_a).map(|i| Rdb::new(b, &format!("rdb_a.{i}"), c, config.growth(), config.rdb_layers)).collect();
            (head, down, squeeze, rdb_a)
        });
        let mmam = config.mmam.then(|| {
            b.scoped("mmam", |b| Mmam { expand: Conv2d::same(b, "expand", 1, c, 1), project: Conv2d::same(b, "project", c, c, 1) })
        });
        let (rm_squeeze, rdb_b, up, out) = b.scoped("rm", |b| {
            let squeeze = Conv2d::same(b, "squeeze", WINDOW * c, c, 1);
            let rdb_b = (0..config.n_b).map(|i| Rdb::new(b, &format!("rdb_b.{i}"), c, config.growth(), config.rdb_layers)).collect();
            let up = (0..2).map(|i| ConvTranspose2d::new(b, &format!("up{i}"), c, c, 4, 2, 1)).collect();
            let out = Conv2d::same(b, "out", c, 3, 3);
            (squeeze, rdb_b, up, out)
        });
        let skip = Conv2d::same(&mut b, "skip", 3, 3, 9);
        let mut net = Self { config, store, head, down, mmam, squeeze, rdb_a, rm_squeeze, rdb_b, up, out, skip };
        net.set_skip_identity();
        net
    }

    /// Makes the global skip conv pass the frame through unchanged.
    pub fn set_skip_identity(&mut self) {
        let k = self.skip.kernel;
        let w = self.store.get_mut(self.skip.weight);
        w.data_mut().iter_mut().for_each(|v| *v = T::zero());
        for c in 0..3 {
            w.set(c, c, k / 2, k / 2, T::one());
        }
        self.store.get_mut(self.skip.bias).data_mut().iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn from_store(config: NetConfig, store: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let mut net = Self::build(config, &mut ChaCha8Rng::seed_from_u64(0));
        net.store.copy_from(store).map_err(Error::invalid)?;
        Ok(net)
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn mmam(&self) -> Option<&Mmam> {
        self.mmam.as_ref()
    }

    pub fn param_count(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn cast<U: Real>(&self) -> MmpRnn<U> {
        MmpRnn::from_store(self.config, &self.store.cast()).expect("identical layout")
    }

    fn check_frame<E: Exec<T>>(&self, e: &E, frame: &E::V) -> Result<Shape> {
        let s = e.shape(frame);
        if s.c != 3 {
            return Err(Error::invalid(format!("expected RGB frames, got {s}")));
        }
        if s.h % FEATURE_STRIDE != 0 || s.w % FEATURE_STRIDE != 0 || s.h == 0 || s.w == 0 {
            return Err(Error::invalid(format!("frame size {}×{} must be a positive multiple of {FEATURE_STRIDE}", s.h, s.w)));
        }
        Ok(s)
    }

    /// Zero state matching frames of shape `frame`.
    pub fn initial_state<E: Exec<T>>(&self, e: &mut E, frame: Shape) -> RecurrentState<E::V> {
        let s = Shape::new(frame.n, self.config.n_c, frame.h / FEATURE_STRIDE, frame.w / FEATURE_STRIDE);
        RecurrentState { non_deblurred: e.zeros(s), deblurred: e.zeros(s) }
    }

    /// Encoder features before modulation.
    pub fn encode<E: Exec<T>>(&self, e: &mut E, frame: &E::V) -> Result<E::V> {
        self.check_frame(e, frame)?;
        let st = &self.store;
        let mut x = self.head.forward_lrelu(e, st, frame);
        for block in &self.down {
            x = block.rdb.forward(e, st, &x);
            x = block.conv.forward_lrelu(e, st, &x);
        }
        Ok(x)
    }

    /// One recurrent cell. `prior` is required exactly when the attentive module is built.
    pub fn fem_step<E: Exec<T>>(
        &self,
        e: &mut E,
        frame: &E::V,
        prior: Option<&E::V>,
        prev: &RecurrentState<E::V>,
    ) -> Result<RecurrentState<E::V>> {
        let encoded = self.encode(e, frame)?;
        let fs = e.shape(&encoded);
        if e.shape(&prev.non_deblurred) != fs || e.shape(&prev.deblurred) != fs {
            return Err(Error::invalid(format!(
                "recurrent state {} does not match frame features {fs}; resolution changed mid-sequence?",
                e.shape(&prev.deblurred)
            )));
        }
        let l = match (&self.mmam, prior) {
            (Some(m), Some(p)) => m.fuse(e, &self.store, &encoded, p)?,
            (None, _) => encoded,
            (Some(_), None) => return Err(Error::invalid("the attentive module needs a motion-magnitude prior")),
        };
        let cat = if self.config.ndf {
            e.concat(&[&l, &prev.non_deblurred, &prev.deblurred])
        } else {
            e.concat(&[&l, &prev.deblurred])
        };
        let mut h = self.squeeze.forward(e, &self.store, &cat);
        for rdb in &self.rdb_a {
            h = rdb.forward(e, &self.store, &h);
        }
        Ok(RecurrentState { non_deblurred: l, deblurred: h })
    }

    /// Residual reconstruction of the centre frame plus the global skip; unclamped.
    pub fn rm_reconstruct<E: Exec<T>>(&self, e: &mut E, features: &[E::V], frame: &E::V) -> Result<E::V> {
        if features.len() != WINDOW {
            return Err(Error::invalid(format!("reconstruction takes {WINDOW} feature maps, got {}", features.len())));
        }
        self.check_frame(e, frame)?;
        let st = &self.store;
        let cat = e.concat(&features.iter().collect::<Vec<_>>());
        let mut x = self.rm_squeeze.forward(e, st, &cat);
        for rdb in &self.rdb_b {
            x = rdb.forward(e, st, &x);
        }
        for up in &self.up {
            let y = up.forward(e, st, &x);
            x = e.leaky_relu(&y, LEAKY_SLOPE);
        }
        let residual = self.out.forward(e, st, &x);
        let skip = self.skip.forward(e, st, frame);
        Ok(e.add(&residual, &skip))
    }

    /// Forward recurrent pass over `frames`, then reconstruction of frames
    /// `2..F−2` (0-based): `F − 4` unclamped outputs.
    pub fn forward_sequence<E: Exec<T>>(&self, e: &mut E, frames: &[E::V], priors: Option<&[E::V]>) -> Result<Vec<E::V>> {
        if frames.len() < WINDOW {
            return Err(Error::invalid(format!(
                "sequence has {} frames; each output needs a {WINDOW}-frame window",
                frames.len()
            )));
        }
        if let Some(p) = priors {
            if p.len() != frames.len() {
                return Err(Error::invalid("one prior per frame is required"));
            }
        }
        let first = self.check_frame(e, &frames[0])?;
        let mut state = self.initial_state(e, first);
        let mut features = Vec::with_capacity(frames.len());
        for (t, frame) in frames.iter().enumerate() {
            if e.shape(frame) != first {
                return Err(Error::invalid("all frames of a sequence must share one shape"));
            }
            let prior = if self.mmam.is_some() { priors.map(|p| &p[t]) } else { None };
            state = self.fem_step(e, frame, prior, &state)?;
            features.push(state.deblurred.clone());
        }
        (2..frames.len() - 2).map(|t| self.rm_reconstruct(e, &features[t - 2..=t + 2], &frames[t])).collect()
    }

    /// Inference on `1×3×H×W` frames; outputs clamped to `[0, 1]`.
    pub fn deblur(&self, frames: &[Tensor<T>], priors: Option<&[Tensor<T>]>) -> Result<Vec<Tensor<T>>> {
        let mut e = Eager;
        let fv: Vec<_> = frames.iter().map(|f| Arc::new(f.clone())).collect();
        let pv: Option<Vec<_>> = priors.map(|p| p.iter().map(|m| Arc::new(m.clone())).collect());
        let out = self.forward_sequence(&mut e, &fv, pv.as_deref())?;
        Ok(out.into_iter().map(|o| o.clamp(T::zero(), T::one())).collect())
    }

    /// MACs for one output frame in steady state (one cell plus one reconstruction), traced.
    pub fn traced_macs(&self, height: usize, width: usize) -> Result<u128> {
        let mut mc = MacCounter::default();
        let frame = Shape::new(1, 3, height, width);
        let prior = Shape::new(1, 1, height, width);
        let state = self.initial_state::<MacCounter>(&mut mc, frame);
        let next = self.fem_step(&mut mc, &frame, self.mmam.as_ref().map(|_| &prior), &state)?;
        let feats = vec![next.deblurred; WINDOW];
        self.rm_reconstruct(&mut mc, &feats, &frame)?;
        Ok(mc.macs)
    }
}

/// Runs MMP-Net on every frame (when the network consumes priors) and deblurs the sequence.
pub fn deblur_sequence<T: Real>(
    frames: &[Tensor<T>],
    mmpnet: Option<&MmpNet<T>>,
    rnn: &MmpRnn<T>,
) -> Result<Vec<Tensor<T>>> {
    if frames.len() < WINDOW {
        return Err(Error::invalid(format!("sequence has {} frames; at least a {WINDOW}-frame window is required", frames.len())));
    }
    let priors = match (rnn.config().mmam, mmpnet) {
        (false, _) => None,
        (true, Some(net)) => Some(frames.iter().map(|f| net.forward(f)).collect::<Result<Vec<_>>>()?),
        (true, None) => return Err(Error::invalid("the network uses priors but no MMP-Net was supplied")),
    };
    rnn.deblur(frames, priors.as_deref())
}

fn rdb_macs(px: u128, c: u128, g: u128, layers: u128) -> u128 {
    (0..layers).map(|i| px * 9 * (c + i * g) * g).sum::<u128>() + px * (c + layers * g) * c
}

fn rdb_params(c: usize, g: usize, layers: usize) -> usize {
    (0..layers).map(|i| 9 * (c + i * g) * g + g).sum::<usize>() + (c + layers * g) * c + c
}

/// Closed-form MACs per output frame; MMP-Net cost is added when `mmpnet` is given.
pub fn rnn_mac_count(cfg: &NetConfig, height: usize, width: usize, mmpnet: Option<&MmpNetConfig>) -> u128 {
    let full = (height * width) as u128;
    let half = full / 4;
    let quarter = full / 16;
    let c = cfg.n_c as u128;
    let g = cfg.growth() as u128;
    let layers = cfg.rdb_layers as u128;
    let mut m = full * 81 * 3 * c;
    m += rdb_macs(full, c, c, layers) + half * 25 * c * c;
    m += rdb_macs(half, c, c, layers) + quarter * 25 * c * c;
    if cfg.mmam {
        m += quarter * c + quarter * c * c;
    }
    m += quarter * cfg.fuse_inputs() as u128 * c * c;
    m += cfg.n_a as u128 * rdb_macs(quarter, c, g, layers);
    m += quarter * WINDOW as u128 * c * c;
    m += cfg.n_b as u128 * rdb_macs(quarter, c, g, layers);
    // Transposed convs: input pixels × 4² × c × c.
    m += quarter * 16 * c * c + half * 16 * c * c;
    m += full * 9 * c * 3 + full * 81 * 9;
    m + mmpnet.map_or(0, |mc| mmpnet_mac_count(mc, height, width))
}

/// Per-output-frame cost in GMACs.
pub fn rnn_macs(cfg: &NetConfig, height: usize, width: usize, mmpnet: Option<&MmpNetConfig>) -> f64 {
    rnn_mac_count(cfg, height, width, mmpnet) as f64 / 1e9
}

/// Closed-form learnable-parameter count; MMP-Net's parameters are added when given.
pub fn rnn_param_count(cfg: &NetConfig, mmpnet: Option<&MmpNetConfig>) -> usize {
    let c = cfg.n_c;
    let g = cfg.growth();
    let conv = |k: usize, ci: usize, co: usize| k * k * ci * co + co;
    let mut n = conv(9, 3, c);
    n += 2 * (rdb_params(c, c, cfg.rdb_layers) + conv(5, c, c));
    if cfg.mmam {
        n += conv(1, 1, c) + conv(1, c, c);
    }
    n += conv(1, cfg.fuse_inputs() * c, c);
    n += (cfg.n_a + cfg.n_b) * rdb_params(c, g, cfg.rdb_layers);
    n += conv(1, WINDOW * c, c);
    n += 2 * conv(4, c, c);
    n += conv(3, c, 3) + conv(9, 3, 3);
    n + mmpnet.map_or(0, mmpnet_param_count)
}
