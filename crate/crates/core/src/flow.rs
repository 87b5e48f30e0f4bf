//! Dense optical flow between frames and its reduction to per-frame motion magnitude.
//!
//! Frames are `1×3×H×W` tensors with values in `[0, 1]`.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::tensor::{Shape, Tensor};

pub type Frame = Tensor<f32>;

/// Per-pixel displacement in pixels, row-major `H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::constant(height, width, 0.0, 0.0)
    }

    pub fn constant(height: usize, width: usize, u: f32, v: f32) -> Self {
        Self { height, width, u: vec![u; height * width], v: vec![v; height * width] }
    }

    pub fn new(height: usize, width: usize, u: Vec<f32>, v: Vec<f32>) -> Result<Self> {
        if u.len() != height * width || v.len() != height * width {
            return Err(Error::invalid(format!("flow components must hold {height}×{width} values")));
        }
        Ok(Self { height, width, u, v })
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(&self.v).all(|x| x.is_finite())
    }

    pub fn scaled(&self, s: f32) -> Self {
        Self {
            height: self.height,
            width: self.width,
            u: self.u.iter().map(|x| x * s).collect(),
            v: self.v.iter().map(|x| x * s).collect(),
        }
    }

    /// Euclidean length of the displacement at every pixel.
    pub fn magnitude(&self) -> Vec<f32> {
        self.u.iter().zip(&self.v).map(|(&u, &v)| (u * u + v * v).sqrt()).collect()
    }
}

/// Motion magnitude of one frame of a sharp window, in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMagnitude {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub frame_index: usize,
}

/// Parameters of the built-in coarse-to-fine variational estimator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariationalParams {
    pub levels: usize,
    pub iterations: usize,
    /// Smoothness weight (the squared regulariser in the update denominator).
    pub smoothness: f32,
}

impl Default for VariationalParams {
    fn default() -> Self {
        Self { levels: 3, iterations: 100, smoothness: 0.02 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FlowMethod {
    Variational(VariationalParams),
    /// Loads a precomputed field from a FLOW file instead of estimating.
    External(PathBuf),
}

impl FromStr for FlowMethod {
    type Err = Error;

    /// Accepts `variational` or `external:<path>`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "variational" => Ok(Self::Variational(VariationalParams::default())),
            Some(("external", path)) if !path.is_empty() => Ok(Self::External(PathBuf::from(path))),
            _ => Err(Error::invalid(format!("unknown flow method `{s}`"))),
        }
    }
}

fn frame_dims(f: &Frame) -> Result<(usize, usize)> {
    let s = f.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::invalid(format!("expected a 1×3×H×W frame, got {s}")));
    }
    Ok((s.h, s.w))
}

/// Flow mapping pixels of `a` toward `b`: `a(x, y) ≈ b(x + u, y + v)`.
pub fn estimate_flow(a: &Frame, b: &Frame, method: &FlowMethod) -> Result<FlowField> {
    let (h, w) = frame_dims(a)?;
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!("frame shapes differ: {} vs {}", a.shape(), b.shape())));
    }
    match method {
        FlowMethod::External(path) => {
            let f = read_flow_file(path)?;
            if (f.height, f.width) != (h, w) {
                return Err(Error::format(path, format!("flow is {}×{}, frames are {h}×{w}", f.height, f.width)));
            }
            Ok(f)
        }
        FlowMethod::Variational(p) => {
            if p.levels == 0 || !(p.smoothness > 0.0) {
                return Err(Error::invalid("variational flow needs ≥1 level and positive smoothness"));
            }
            Ok(variational_flow(&gray(a), &gray(b), h, w, p))
        }
    }
}

/// Grey plane with a separable binomial [1 4 6 4 1]/16 pre-smoothing.
fn gray(f: &Frame) -> Plane {
    let s = f.shape();
    let n = s.plane();
    let d = f.data();
    let g: Vec<f32> = (0..n).map(|i| (d[i] + d[n + i] + d[2 * n + i]) / 3.0).collect();
    Plane { h: s.h, w: s.w, d: g }.binomial_blur()
}

#[derive(Clone)]
struct Plane {
    h: usize,
    w: usize,
    d: Vec<f32>,
}

impl Plane {
    fn at(&self, y: isize, x: isize) -> f32 {
        let y = y.clamp(0, self.h as isize - 1) as usize;
        let x = x.clamp(0, self.w as isize - 1) as usize;
        self.d[y * self.w + x]
    }

    fn binomial_blur(&self) -> Plane {
        const K: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
        let mut tmp = vec![0.0; self.d.len()];
        for y in 0..self.h {
            for x in 0..self.w {
                tmp[y * self.w + x] = (0..5).map(|k| K[k] * self.at(y as isize, x as isize + k as isize - 2)).sum();
            }
        }
        let tmp = Plane { h: self.h, w: self.w, d: tmp };
        let mut out = vec![0.0; self.d.len()];
        for y in 0..self.h {
            for x in 0..self.w {
                out[y * self.w + x] = (0..5).map(|k| K[k] * tmp.at(y as isize + k as isize - 2, x as isize)).sum();
            }
        }
        Plane { h: self.h, w: self.w, d: out }
    }

    /// 2×2 box downsampling (odd trailing row/column dropped).
    fn half(&self) -> Plane {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut d = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = (2 * y as isize, 2 * x as isize);
                d[y * w + x] = 0.25 * (self.at(sy, sx) + self.at(sy, sx + 1) + self.at(sy + 1, sx) + self.at(sy + 1, sx + 1));
            }
        }
        Plane { h, w, d }
    }

    /// Bilinear sample with edge clamping.
    fn sample(&self, y: f32, x: f32) -> f32 {
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        let (y0, x0) = (y0 as isize, x0 as isize);
        let top = self.at(y0, x0) * (1.0 - fx) + self.at(y0, x0 + 1) * fx;
        let bot = self.at(y0 + 1, x0) * (1.0 - fx) + self.at(y0 + 1, x0 + 1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    /// Weighted 8-neighbour average used by the smoothness term.
    fn neighbour_mean(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.d.len()];
        for y in 0..self.h as isize {
            for x in 0..self.w as isize {
                let edge = self.at(y - 1, x) + self.at(y + 1, x) + self.at(y, x - 1) + self.at(y, x + 1);
                let corner =
                    self.at(y - 1, x - 1) + self.at(y - 1, x + 1) + self.at(y + 1, x - 1) + self.at(y + 1, x + 1);
                out[y as usize * self.w + x as usize] = edge / 6.0 + corner / 12.0;
            }
        }
        out
    }

    /// Bilinear resize of a flow component to `h×w`, scaling displacements by `scale`.
    fn resize(&self, h: usize, w: usize, scale: f32) -> Plane {
        let (sy, sx) = (self.h as f32 / h as f32, self.w as f32 / w as f32);
        let mut d = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                d[y * w + x] = scale * self.sample((y as f32 + 0.5) * sy - 0.5, (x as f32 + 0.5) * sx - 0.5);
            }
        }
        Plane { h, w, d }
    }
}

fn variational_flow(a: &Plane, b: &Plane, h: usize, w: usize, p: &VariationalParams) -> FlowField {
    let mut pyramid = vec![(a.clone(), b.clone())];
    while pyramid.len() < p.levels {
        let (pa, pb) = pyramid.last().unwrap();
        if pa.h < 16 || pa.w < 16 {
            break;
        }
        let next = (pa.half(), pb.half());
        pyramid.push(next);
    }

    let (top_a, _) = pyramid.last().unwrap();
    let mut u = Plane { h: top_a.h, w: top_a.w, d: vec![0.0; top_a.h * top_a.w] };
    let mut v = u.clone();
    for (pa, pb) in pyramid.iter().rev() {
        if (u.h, u.w) != (pa.h, pa.w) {
            let scale = pa.w as f32 / u.w as f32;
            u = u.resize(pa.h, pa.w, scale);
            v = v.resize(pa.h, pa.w, scale);
        }
        refine_level(pa, pb, &mut u, &mut v, p);
    }
    debug_assert_eq!((u.h, u.w), (h, w));
    FlowField { height: h, width: w, u: u.d, v: v.d }
}

/// One warping step: linearise `b` around the current flow and run the
/// Horn-Schunck fixed-point iteration on the total flow.
fn refine_level(a: &Plane, b: &Plane, u: &mut Plane, v: &mut Plane, p: &VariationalParams) {
    let (h, w) = (a.h, a.w);
    let n = h * w;
    let (u0, v0) = (u.d.clone(), v.d.clone());
    let mut warped = vec![0.0; n];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            warped[i] = b.sample(y as f32 + v0[i], x as f32 + u0[i]);
        }
    }
    let wp = Plane { h, w, d: warped };
    let (mut ix, mut iy, mut it) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            ix[i] = 0.25 * (a.at(y, x + 1) - a.at(y, x - 1) + wp.at(y, x + 1) - wp.at(y, x - 1));
            iy[i] = 0.25 * (a.at(y + 1, x) - a.at(y - 1, x) + wp.at(y + 1, x) - wp.at(y - 1, x));
            it[i] = wp.d[i] - a.d[i];
        }
    }
    for _ in 0..p.iterations {
        let (ub, vb) = (u.neighbour_mean(), v.neighbour_mean());
        for i in 0..n {
            let r = ix[i] * (ub[i] - u0[i]) + iy[i] * (vb[i] - v0[i]) + it[i];
            let k = r / (p.smoothness + ix[i] * ix[i] + iy[i] * iy[i]);
            u.d[i] = ub[i] - ix[i] * k;
            v.d[i] = vb[i] - iy[i] * k;
        }
    }
}

/// `(|prev| + |next|) / 2` per pixel; at a sequence edge the single available
/// field's magnitude is used alone.
pub fn bidirectional_magnitude(prev: Option<&FlowField>, next: Option<&FlowField>, frame_index: usize) -> Result<FrameMagnitude> {
    let (height, width, values) = match (prev, next) {
        (None, None) => return Err(Error::invalid("bidirectional magnitude needs at least one flow field")),
        (Some(f), None) | (None, Some(f)) => (f.height, f.width, f.magnitude()),
        (Some(p), Some(n)) => {
            if (p.height, p.width) != (n.height, n.width) {
                return Err(Error::invalid("flow fields differ in shape"));
            }
            let values = p.magnitude().iter().zip(n.magnitude()).map(|(a, b)| (a + b) / 2.0).collect();
            (p.height, p.width, values)
        }
    };
    Ok(FrameMagnitude { height, width, values, frame_index })
}

const FLOW_MAGIC: &[u8; 4] = b"FLOW";

/// Reads the little-endian `FLOW` container: magic, u32 H, u32 W, H·W f32 u, H·W f32 v.
pub fn read_flow_file(path: &Path) -> Result<FlowField> {
    let file = fs::File::open(path).at(path)?;
    let mut r = BufReader::new(file);
    let mut head = [0u8; 12];
    r.read_exact(&mut head).map_err(|_| Error::format(path, "truncated header"))?;
    if &head[..4] != FLOW_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let h = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let mut body = Vec::new();
    r.read_to_end(&mut body).at(path)?;
    if body.len() != 8 * h * w {
        return Err(Error::format(path, format!("expected {} payload bytes, found {}", 8 * h * w, body.len())));
    }
    let floats: Vec<f32> = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let (u, v) = floats.split_at(h * w);
    Ok(FlowField { height: h, width: w, u: u.to_vec(), v: v.to_vec() })
}

pub fn write_flow_file(path: &Path, flow: &FlowField) -> Result<()> {
    let file = fs::File::create(path).at(path)?;
    let mut out = BufWriter::new(file);
    let mut bytes = Vec::with_capacity(12 + 8 * flow.len());
    bytes.extend_from_slice(FLOW_MAGIC);
    bytes.extend_from_slice(&(flow.height as u32).to_le_bytes());
    bytes.extend_from_slice(&(flow.width as u32).to_le_bytes());
    for x in flow.u.iter().chain(&flow.v) {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    out.write_all(&bytes).at(path)?;
    out.flush().at(path)
}

/// Frame built from a function of `(channel, y, x)`.
pub fn frame_from_fn(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f32) -> Frame {
    Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| f(c, y, x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn textured(h: usize, w: usize, seed: u64) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise: Vec<f32> = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        frame_from_fn(h, w, |_, y, x| noise[y * w + x])
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let a = textured(32, 40, 1);
        let f = estimate_flow(&a, &a, &FlowMethod::Variational(VariationalParams::default())).unwrap();
        assert!(f.u.iter().chain(&f.v).all(|&x| x == 0.0));
    }

    #[test]
    fn shifted_square_is_tracked() {
        let (h, w) = (64, 64);
        let square = |dx: usize| {
            frame_from_fn(h, w, move |_, y, x| if (24..40).contains(&y) && (20 + dx..36 + dx).contains(&x) { 0.9 } else { 0.1 })
        };
        let f = estimate_flow(&square(0), &square(2), &FlowMethod::Variational(VariationalParams::default())).unwrap();
        assert!(f.is_finite());
        for y in 24..40 {
            for x in 20..36 {
                let i = y * w + x;
                assert!((f.u[i] - 2.0).abs() <= 0.5, "u({y},{x}) = {}", f.u[i]);
                assert!(f.v[i].abs() <= 0.5, "v({y},{x}) = {}", f.v[i]);
            }
        }
    }

    #[test]
    fn external_flow_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pair.flow");
        write_flow_file(&path, &FlowField::constant(5, 7, 3.0, 4.0)).unwrap();
        let a = textured(5, 7, 2);
        let f = estimate_flow(&a, &a, &FlowMethod::External(path.clone())).unwrap();
        assert_eq!(f, FlowField::constant(5, 7, 3.0, 4.0));
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"FLOW");
        assert_eq!(bytes.len(), 12 + 8 * 35);
    }

    #[test]
    fn input_errors() {
        let a = textured(8, 8, 3);
        let b = textured(8, 9, 3);
        let hs = FlowMethod::Variational(VariationalParams::default());
        assert!(matches!(estimate_flow(&a, &b, &hs), Err(Error::Invalid(_))));
        assert!(matches!("raft".parse::<FlowMethod>(), Err(Error::Invalid(_))));
        let missing = PathBuf::from("/nonexistent/0001_0002.flow");
        match estimate_flow(&a, &a, &FlowMethod::External(missing)) {
            Err(e @ Error::Io { .. }) => assert!(e.to_string().contains("/nonexistent/0001_0002.flow")),
            other => panic!("expected I/O error, got {other:?}"),
        }
    }

    #[test]
    fn method_ids_parse() {
        assert_eq!("variational".parse::<FlowMethod>().unwrap(), FlowMethod::Variational(VariationalParams::default()));
        assert_eq!("external:/x/y.flow".parse::<FlowMethod>().unwrap(), FlowMethod::External("/x/y.flow".into()));
    }

    #[test]
    fn magnitude_examples() {
        let m = bidirectional_magnitude(Some(&FlowField::constant(2, 3, 3.0, 4.0)), Some(&FlowField::zeros(2, 3)), 1)
            .unwrap();
        assert!(m.values.iter().all(|&x| x == 2.5));
        let m = bidirectional_magnitude(None, Some(&FlowField::constant(2, 3, 0.0, 3.0)), 0).unwrap();
        assert!(m.values.iter().all(|&x| x == 3.0));
        assert!(bidirectional_magnitude(None, None, 0).is_err());
    }

    fn oracle(prev: &FlowField, next: &FlowField) -> Vec<f32> {
        let mut out = vec![0.0f32; prev.len()];
        for y in 0..prev.height {
            for x in 0..prev.width {
                let i = y * prev.width + x;
                let a = (prev.u[i] * prev.u[i] + prev.v[i] * prev.v[i]).sqrt();
                let b = (next.u[i] * next.u[i] + next.v[i] * next.v[i]).sqrt();
                out[i] = (a + b) / 2.0;
            }
        }
        out
    }

    fn field(seed: u64, h: usize, w: usize) -> FlowField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut comp = || (0..h * w).map(|_| rng.random_range(-6.0f32..6.0)).collect::<Vec<_>>();
        let u = comp();
        FlowField::new(h, w, u, comp()).unwrap()
    }

    #[test]
    fn random_fields_match_loop_oracle() {
        for seed in 0..20 {
            let (p, n) = (field(seed, 8, 8), field(seed + 100, 8, 8));
            assert_eq!(bidirectional_magnitude(Some(&p), Some(&n), 0).unwrap().values, oracle(&p, &n));
        }
    }

    proptest! {
        #[test]
        fn magnitude_symmetric_and_nonnegative(seed in 0u64..1000) {
            let (p, n) = (field(seed, 6, 5), field(seed ^ 0xabc, 6, 5));
            let a = bidirectional_magnitude(Some(&p), Some(&n), 0).unwrap();
            let b = bidirectional_magnitude(Some(&n), Some(&p), 0).unwrap();
            prop_assert_eq!(&a.values, &b.values);
            prop_assert!(a.values.iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn magnitude_is_positively_homogeneous(seed in 0u64..1000, exp in -4i32..5, alpha in 0.01f32..10.0) {
            let (p, n) = (field(seed, 4, 4), field(seed + 1, 4, 4));
            let base = bidirectional_magnitude(Some(&p), Some(&n), 0).unwrap().values;
            // Powers of two scale exactly in binary floating point.
            let s = 2f32.powi(exp);
            let scaled = bidirectional_magnitude(Some(&p.scaled(s)), Some(&n.scaled(s)), 0).unwrap().values;
            for (a, b) in base.iter().zip(&scaled) {
                prop_assert_eq!(a * s, *b);
            }
            let scaled = bidirectional_magnitude(Some(&p.scaled(alpha)), Some(&n.scaled(alpha)), 0).unwrap().values;
            for (a, b) in base.iter().zip(&scaled) {
                prop_assert!((a * alpha - b).abs() <= 1e-5 * (a * alpha).max(1.0));
            }
        }

        #[test]
        fn magnitude_zero_iff_both_flows_zero(mask in proptest::collection::vec(0u8..4, 16)) {
            let mut p = FlowField::zeros(4, 4);
            let mut n = FlowField::zeros(4, 4);
            for (i, m) in mask.iter().enumerate() {
                if m & 1 != 0 { p.u[i] = -1.5; }
                if m & 2 != 0 { n.v[i] = 0.25; }
            }
            let out = bidirectional_magnitude(Some(&p), Some(&n), 0).unwrap().values;
            for (i, m) in mask.iter().enumerate() {
                prop_assert_eq!(out[i] == 0.0, *m == 0);
            }
        }
    }
}
