//! Blur and motion-magnitude synthesis from sharp sequences, and the on-disk dataset.
//!
//! Layout written by [`build_dataset`]:
//!
//! ```text
//! <root>/manifest.tsv                         split, seq_id, frame_id, window_len, K
//! <root>/<split>/<seq_id>/blur/NNNNNNNN.png   8-bit RGB
//! <root>/<split>/<seq_id>/sharp/NNNNNNNN.png  8-bit RGB, centre frame of the window
//! <root>/<split>/<seq_id>/mmp/NNNNNNNN.png    16-bit grey, round(M · 65535)
//! <root>/<split>/<seq_id>/center/NNNNNNNN.png optional centre-flow prior
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::flow::{bidirectional_magnitude, estimate_flow, FlowField, FlowMethod, Frame, FrameMagnitude, VariationalParams};
use crate::seed::derive_rng;
use crate::image_io::{frame_name, is_image, list_images, read_frame, read_map16, write_frame, write_map16};
use crate::tensor::{Shape, Tensor};

/// Camera response applied to the averaged exposure.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Crf {
    Identity,
    /// Frames are linearised by `x^g`, averaged, then re-encoded by `x^(1/g)`.
    Gamma { g: f32 },
}

impl Default for Crf {
    fn default() -> Self {
        Crf::Gamma { g: 2.2 }
    }
}

/// Average of a sharp window through the camera response.
pub fn synthesize_blur(window: &[Frame], crf: Crf) -> Result<Frame> {
    let first = window.first().ok_or_else(|| Error::invalid("cannot synthesise blur from an empty window"))?;
    if window.iter().any(|f| f.shape() != first.shape()) {
        return Err(Error::invalid("window frames differ in shape"));
    }
    if let Crf::Gamma { g } = crf {
        if !(g > 0.0) {
            return Err(Error::invalid(format!("gamma must be positive, got {g}")));
        }
    }
    let n = window.len() as f64;
    let mut acc = vec![0f64; first.len()];
    for f in window {
        for (a, &v) in acc.iter_mut().zip(f.data()) {
            *a += match crf {
                Crf::Identity => v as f64,
                Crf::Gamma { g } => (v as f64).powf(g as f64),
            };
        }
    }
    let data = acc
        .into_iter()
        .map(|s| {
            let m = s / n;
            let out = match crf {
                Crf::Identity => m,
                Crf::Gamma { g } => m.powf(1.0 / g as f64),
            };
            out.clamp(0.0, 1.0) as f32
        })
        .collect();
    Ok(Tensor::from_vec(first.shape(), data))
}

/// Flows between neighbours of an `N`-frame window: `forward[i]` maps frame
/// `i` toward `i+1`, `backward[i]` maps frame `i+1` toward `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowFlows {
    pub forward: Vec<FlowField>,
    pub backward: Vec<FlowField>,
}

impl WindowFlows {
    pub fn frames(&self) -> usize {
        self.forward.len() + 1
    }

    /// Same flows seen from the reversed window.
    pub fn reversed(&self) -> Self {
        Self {
            forward: self.backward.iter().rev().cloned().collect(),
            backward: self.forward.iter().rev().cloned().collect(),
        }
    }

    /// Per-frame magnitudes; edge frames use their single neighbour flow.
    pub fn magnitudes(&self) -> Result<Vec<FrameMagnitude>> {
        if self.forward.is_empty() || self.forward.len() != self.backward.len() {
            return Err(Error::invalid("a window needs N-1 forward and N-1 backward flows, N ≥ 2"));
        }
        let n = self.frames();
        (0..n)
            .map(|i| {
                let prev = (i > 0).then(|| &self.backward[i - 1]);
                let next = (i + 1 < n).then(|| &self.forward[i]);
                bidirectional_magnitude(prev, next, i)
            })
            .collect()
    }
}

/// Normalised motion-magnitude map in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionMagnitudeMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub k: f32,
}

impl MotionMagnitudeMap {
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(Shape::new(1, 1, self.height, self.width), self.values.clone())
    }
}

/// `clamp(Σᵢ Mᵢ / (K·N), 0, 1)`; the sum runs in `f32` in frame order.
pub fn mmp_from_magnitudes(mags: &[FrameMagnitude], k: f32) -> Result<MotionMagnitudeMap> {
    if !(k > 0.0) {
        return Err(Error::invalid(format!("normaliser K must be positive, got {k}")));
    }
    let first = mags.first().ok_or_else(|| Error::invalid("no frame magnitudes"))?;
    if mags.iter().any(|m| (m.height, m.width) != (first.height, first.width)) {
        return Err(Error::invalid("frame magnitudes differ in shape"));
    }
    let denom = k * mags.len() as f32;
    let mut sum = vec![0f32; first.values.len()];
    for m in mags {
        for (s, v) in sum.iter_mut().zip(&m.values) {
            *s += v;
        }
    }
    let values = sum.into_iter().map(|s| (s / denom).clamp(0.0, 1.0)).collect();
    Ok(MotionMagnitudeMap { height: first.height, width: first.width, values, k })
}

/// Ground-truth prior of a window from its neighbour flows.
pub fn compute_mmp(flows: &WindowFlows, k: f32) -> Result<MotionMagnitudeMap> {
    mmp_from_magnitudes(&flows.magnitudes()?, k)
}

/// Centre-frame prior `clamp((|FL_c→1| + |FL_c→N|) / (K·(N−1)), 0, 1)`.
pub fn center_flow_prior(to_first: &FlowField, to_last: &FlowField, frames: usize, k: f32) -> Result<MotionMagnitudeMap> {
    if frames < 2 || !(k > 0.0) {
        return Err(Error::invalid("centre prior needs N ≥ 2 and K > 0"));
    }
    let denom = k * (frames - 1) as f32;
    let values = to_first.magnitude().iter().zip(to_last.magnitude()).map(|(a, b)| ((a + b) / denom).clamp(0.0, 1.0)).collect();
    Ok(MotionMagnitudeMap { height: to_first.height, width: to_first.width, values, k })
}

/// Where flows for dataset generation come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FlowSource {
    Variational(VariationalParams),
    /// Precomputed FLOW files at `<dir>/<seq_id>/<a>_<b>.flow` with 8-digit source frame indices.
    External { dir: PathBuf },
}

impl Default for FlowSource {
    fn default() -> Self {
        FlowSource::Variational(VariationalParams::default())
    }
}

impl FlowSource {
    fn flow(&self, seq_id: &str, frames: &[Frame], a: usize, b: usize) -> Result<FlowField> {
        let method = match self {
            FlowSource::Variational(p) => FlowMethod::Variational(*p),
            FlowSource::External { dir } => FlowMethod::External(dir.join(seq_id).join(format!("{a:08}_{b:08}.flow"))),
        };
        estimate_flow(&frames[a], &frames[b], &method)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatagenConfig {
    /// Inclusive window-length range.
    pub window_range: [usize; 2],
    /// Window start advance; the drawn window length when absent.
    pub stride: Option<usize>,
    pub crf: Crf,
    #[serde(rename = "K")]
    pub k: f32,
    pub flow: FlowSource,
    /// Also store the centre-frame flow prior under `center/`.
    pub center_priors: bool,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            window_range: [7, 13],
            stride: None,
            crf: Crf::default(),
            k: 15.0,
            flow: FlowSource::default(),
            center_priors: false,
        }
    }
}

impl DatagenConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.window_range;
        if lo < 2 || hi < lo {
            return Err(Error::invalid(format!("window_range must satisfy 2 ≤ min ≤ max, got [{lo}, {hi}]")));
        }
        if self.stride == Some(0) {
            return Err(Error::invalid("stride must be positive"));
        }
        if !(self.k > 0.0) {
            return Err(Error::invalid("K must be positive"));
        }
        Ok(())
    }
}

/// One manifest row.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub split: String,
    pub seq_id: String,
    pub frame_id: usize,
    pub window_len: usize,
    pub k: f32,
}

pub const MANIFEST: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "split\tseq_id\tframe_id\twindow_len\tK";

pub fn render_manifest(entries: &[ManifestEntry]) -> String {
    let mut s = String::from(MANIFEST_HEADER);
    s.push('\n');
    for e in entries {
        let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", e.split, e.seq_id, e.frame_id, e.window_len, e.k);
    }
    s
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestEntry>> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).at(&path)?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::format(&path, "missing or unexpected header"));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let bad = || Error::format(&path, format!("line {}: malformed row", i + 2));
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(bad());
            }
            Ok(ManifestEntry {
                split: cols[0].to_string(),
                seq_id: cols[1].to_string(),
                frame_id: cols[2].parse().map_err(|_| bad())?,
                window_len: cols[3].parse().map_err(|_| bad())?,
                k: cols[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Sharp source sequence found under the raw root.
#[derive(Clone, Debug)]
pub struct RawSequence {
    pub split: String,
    pub seq_id: String,
    pub frames: Vec<PathBuf>,
}

fn has_images(dir: &Path) -> Result<bool> {
    Ok(!list_images(dir)?.is_empty())
}

fn subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).at(dir)? {
        let p = entry.at(dir)?.path();
        if p.is_dir() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn dir_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "seq".into())
}

/// Finds sequences: a directory holding images is a sequence, a directory
/// holding only directories is a split. Sequences not under a split go to `train`.
pub fn discover_sequences(raw_root: &Path) -> Result<Vec<RawSequence>> {
    let seq = |split: &str, dir: &Path| -> Result<RawSequence> {
        Ok(RawSequence { split: split.into(), seq_id: dir_name(dir), frames: list_images(dir)? })
    };
    if has_images(raw_root)? {
        return Ok(vec![seq("train", raw_root)?]);
    }
    let mut out = Vec::new();
    for d in subdirs(raw_root)? {
        if has_images(&d)? {
            out.push(seq("train", &d)?);
        } else {
            for s in subdirs(&d)? {
                if has_images(&s)? {
                    out.push(seq(&dir_name(&d), &s)?);
                }
            }
        }
    }
    if out.is_empty() {
        return Err(Error::invalid(format!("no frame sequences found under {}", raw_root.display())));
    }
    Ok(out)
}

/// `(start, length)` of every window, lengths drawn uniformly from the range.
pub fn plan_windows(frames: usize, cfg: &DatagenConfig, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let [lo, hi] = cfg.window_range;
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let len = rng.random_range(lo..=hi);
        if start + len > frames {
            break;
        }
        out.push((start, len));
        start += cfg.stride.unwrap_or(len);
    }
    out
}

/// Per-sequence RNG derived from the root seed.
fn sequence_rng(seed: u64, split: &str, seq_id: &str) -> ChaCha8Rng {
    derive_rng(seed, &format!("datagen/{split}/{seq_id}"), 0)
}

#[derive(Clone, Debug, Default)]
pub struct DatasetSummary {
    pub samples: usize,
    pub skipped_sequences: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

/// Writes blurry/sharp/prior triples for every window of every sequence under `raw_root`.
pub fn build_dataset(raw_root: &Path, out_root: &Path, cfg: &DatagenConfig, seed: u64) -> Result<DatasetSummary> {
    cfg.validate()?;
    let sequences = discover_sequences(raw_root)?;
    let mut summary = DatasetSummary::default();
    for rs in &sequences {
        if rs.frames.len() < cfg.window_range[0] {
            warn!("skipping {}/{}: {} frames < minimum window {}", rs.split, rs.seq_id, rs.frames.len(), cfg.window_range[0]);
            summary.skipped_sequences.push(format!("{}/{}", rs.split, rs.seq_id));
            continue;
        }
        let mut rng = sequence_rng(seed, &rs.split, &rs.seq_id);
        let windows = plan_windows(rs.frames.len(), cfg, &mut rng);
        let frames: Vec<Frame> = rs.frames.iter().map(|p| read_frame(p)).collect::<Result<_>>()?;
        if let Some(bad) = frames.iter().position(|f| f.shape() != frames[0].shape()) {
            return Err(Error::Image { path: rs.frames[bad].clone(), message: "frame size differs from the sequence".into() });
        }
        let dir = out_root.join(&rs.split).join(&rs.seq_id);
        let mut kinds = vec!["blur", "sharp", "mmp"];
        if cfg.center_priors {
            kinds.push("center");
        }
        for k in &kinds {
            fs::create_dir_all(dir.join(k)).at(dir.join(k))?;
        }
        for (frame_id, &(start, len)) in windows.iter().enumerate() {
            let window = &frames[start..start + len];
            let blur = synthesize_blur(window, cfg.crf)?;
            let mut flows = WindowFlows { forward: Vec::new(), backward: Vec::new() };
            for i in start..start + len - 1 {
                flows.forward.push(cfg.flow.flow(&rs.seq_id, &frames, i, i + 1)?);
                flows.backward.push(cfg.flow.flow(&rs.seq_id, &frames, i + 1, i)?);
            }
            let mmp = compute_mmp(&flows, cfg.k)?;
            let center = start + (len - 1) / 2;
            let name = frame_name(frame_id);
            write_frame(&dir.join("blur").join(&name), &blur)?;
            write_frame(&dir.join("sharp").join(&name), &frames[center])?;
            write_map16(&dir.join("mmp").join(&name), &mmp.to_tensor())?;
            if cfg.center_priors {
                let to_first = cfg.flow.flow(&rs.seq_id, &frames, center, start)?;
                let to_last = cfg.flow.flow(&rs.seq_id, &frames, center, start + len - 1)?;
                let prior = center_flow_prior(&to_first, &to_last, len, cfg.k)?;
                write_map16(&dir.join("center").join(&name), &prior.to_tensor())?;
            }
            summary.entries.push(ManifestEntry {
                split: rs.split.clone(),
                seq_id: rs.seq_id.clone(),
                frame_id,
                window_len: len,
                k: cfg.k,
            });
        }
        info!("{}/{}: {} samples", rs.split, rs.seq_id, windows.len());
    }
    summary.samples = summary.entries.len();
    fs::create_dir_all(out_root).at(out_root)?;
    let path = out_root.join(MANIFEST);
    fs::write(&path, render_manifest(&summary.entries)).at(&path)?;
    Ok(summary)
}

/// Indices of a `round(fraction · total)` subset (half rounds up), reshuffled per epoch seed.
pub fn trim_for_epoch(total: usize, fraction: f64, epoch_seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("trim fraction must be in (0, 1], got {fraction}")));
    }
    let keep = ((fraction * total as f64) + 0.5).floor() as usize;
    let mut idx: Vec<usize> = (0..total).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    idx.truncate(keep.min(total));
    Ok(idx)
}

/// One stored sequence, fully loaded.
#[derive(Clone, Debug)]
pub struct SequenceData {
    pub split: String,
    pub seq_id: String,
    pub blur: Vec<Frame>,
    /// Empty when the dataset carries no sharp references.
    pub sharp: Vec<Frame>,
    pub mmp: Vec<Tensor<f32>>,
    pub center: Vec<Tensor<f32>>,
}

impl SequenceData {
    pub fn len(&self) -> usize {
        self.blur.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blur.is_empty()
    }

    pub fn has_sharp(&self) -> bool {
        self.sharp.len() == self.blur.len() && !self.sharp.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        let s = self.blur[0].shape();
        (s.h, s.w)
    }
}

fn load_dir(dir: &Path, ids: &[usize], read: fn(&Path) -> Result<Tensor<f32>>) -> Result<Vec<Tensor<f32>>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    ids.iter().map(|&i| read(&dir.join(frame_name(i)))).collect()
}

/// Loads every sequence of `split` listed in the manifest, in manifest order.
pub fn load_split(root: &Path, split: &str) -> Result<Vec<SequenceData>> {
    let entries = read_manifest(root)?;
    let mut groups: BTreeMap<(usize, String), Vec<usize>> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for e in entries.iter().filter(|e| e.split == split) {
        if !order.contains(&e.seq_id) {
            order.push(e.seq_id.clone());
        }
        let pos = order.iter().position(|s| *s == e.seq_id).unwrap();
        groups.entry((pos, e.seq_id.clone())).or_default().push(e.frame_id);
    }
    let mut out = Vec::new();
    for ((_, seq_id), mut ids) in groups {
        ids.sort_unstable();
        let dir = root.join(split).join(&seq_id);
        let blur = load_dir(&dir.join("blur"), &ids, read_frame)?;
        if blur.is_empty() {
            return Err(Error::invalid(format!("{} has no blurry frames", dir.display())));
        }
        out.push(SequenceData {
            split: split.to_string(),
            seq_id,
            blur,
            sharp: load_dir(&dir.join("sharp"), &ids, read_frame)?,
            mmp: load_dir(&dir.join("mmp"), &ids, read_map16)?,
            center: load_dir(&dir.join("center"), &ids, read_map16)?,
        });
    }
    Ok(out)
}

/// Loads a plain directory of frames (no manifest) as one sequence without references.
pub fn load_frame_dir(dir: &Path) -> Result<SequenceData> {
    let paths: Vec<PathBuf> = list_images(dir)?.into_iter().filter(|p| is_image(p)).collect();
    if paths.is_empty() {
        return Err(Error::invalid(format!("no PNG frames in {}", dir.display())));
    }
    let blur = paths.iter().map(|p| read_frame(p)).collect::<Result<Vec<_>>>()?;
    Ok(SequenceData {
        split: String::new(),
        seq_id: dir_name(dir),
        blur,
        sharp: Vec::new(),
        mmp: Vec::new(),
        center: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::frame_from_fn;
    use proptest::prelude::*;

    fn constant(v: f32) -> Frame {
        frame_from_fn(4, 5, move |_, _, _| v)
    }

    #[test]
    fn blur_examples() {
        let f = frame_from_fn(6, 7, |c, y, x| ((c * 31 + y * 7 + x) % 17) as f32 / 17.0);
        assert_eq!(synthesize_blur(&[f.clone(), f.clone(), f.clone()], Crf::Identity).unwrap(), f);
        let two = [constant(0.0), constant(1.0)];
        assert!(synthesize_blur(&two, Crf::Identity).unwrap().data().iter().all(|&v| v == 0.5));
        let g = synthesize_blur(&two, Crf::Gamma { g: 2.2 }).unwrap();
        let expected = 0.5f64.powf(1.0 / 2.2) as f32;
        assert!(g.data().iter().all(|&v| (v - expected).abs() < 1e-7));
        assert!((expected - 0.7297).abs() < 1e-4);
        assert!(synthesize_blur(&[], Crf::Identity).is_err());
    }

    fn flows(n: usize, seed: u64, h: usize, w: usize) -> WindowFlows {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut field = || {
            let mut comp = || (0..h * w).map(|_| rng.random_range(-8.0f32..8.0)).collect::<Vec<_>>();
            let u = comp();
            FlowField::new(h, w, u, comp()).unwrap()
        };
        WindowFlows { forward: (0..n - 1).map(|_| field()).collect(), backward: (0..n - 1).map(|_| field()).collect() }
    }

    #[test]
    fn mmp_examples() {
        let zero = WindowFlows { forward: vec![FlowField::zeros(3, 3); 2], backward: vec![FlowField::zeros(3, 3); 2] };
        assert!(compute_mmp(&zero, 15.0).unwrap().values.iter().all(|&v| v == 0.0));
        let mags: Vec<FrameMagnitude> = (0..3)
            .map(|i| FrameMagnitude { height: 2, width: 2, values: vec![7.5; 4], frame_index: i })
            .collect();
        assert!(mmp_from_magnitudes(&mags, 15.0).unwrap().values.iter().all(|&v| v == 0.5));
        assert!(compute_mmp(&zero, 0.0).is_err());
        assert!(compute_mmp(&zero, -1.0).is_err());
    }

    /// Straight scalar evaluation of the per-frame magnitude and the normalised average.
    fn mmp_oracle(f: &WindowFlows, k: f32) -> Vec<f32> {
        let n = f.forward.len() + 1;
        let (h, w) = (f.forward[0].height, f.forward[0].width);
        let mut out = vec![0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let mut sum = 0f32;
                for i in 0..n {
                    let norm = |fl: &FlowField| (fl.u[p] * fl.u[p] + fl.v[p] * fl.v[p]).sqrt();
                    let m = if i == 0 {
                        norm(&f.forward[0])
                    } else if i == n - 1 {
                        norm(&f.backward[n - 2])
                    } else {
                        (norm(&f.backward[i - 1]) + norm(&f.forward[i])) / 2.0
                    };
                    sum += m;
                }
                out[p] = (sum / (k * n as f32)).clamp(0.0, 1.0);
            }
        }
        out
    }

    #[test]
    fn mmp_matches_oracle() {
        for (seed, n) in [(1, 2), (2, 3), (3, 7), (4, 13)] {
            let f = flows(n, seed, 8, 8);
            assert_eq!(compute_mmp(&f, 15.0).unwrap().values, mmp_oracle(&f, 15.0));
        }
    }

    proptest! {
        #[test]
        fn mmp_reversal_invariant(seed in 0u64..500, n in 2usize..8) {
            let f = flows(n, seed, 5, 4);
            let a = compute_mmp(&f, 15.0).unwrap().values;
            let b = compute_mmp(&f.reversed(), 15.0).unwrap().values;
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-6);
            }
        }

        #[test]
        fn mmp_scales_with_flow_before_clamp(seed in 0u64..500, n in 2usize..6, alpha in 0.05f32..1.0) {
            let f = flows(n, seed, 4, 4);
            // Huge K keeps values far from the clamp.
            let k = 1000.0;
            let base = compute_mmp(&f, k).unwrap().values;
            let scaled = WindowFlows {
                forward: f.forward.iter().map(|x| x.scaled(alpha)).collect(),
                backward: f.backward.iter().map(|x| x.scaled(alpha)).collect(),
            };
            let s = compute_mmp(&scaled, k).unwrap().values;
            for (b, v) in base.iter().zip(&s) {
                prop_assert!((b * alpha - v).abs() <= 1e-6 * b.max(1e-3));
            }
        }

        #[test]
        fn blur_stays_in_range(vals in proptest::collection::vec(0.0f32..=1.0, 2..6), g in 0.3f32..4.0) {
            let window: Vec<Frame> = vals.iter().map(|&v| constant(v)).collect();
            for crf in [Crf::Identity, Crf::Gamma { g }] {
                let b = synthesize_blur(&window, crf).unwrap();
                prop_assert!(b.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn window_planning() {
        let cfg = DatagenConfig { window_range: [7, 7], stride: Some(7), ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(plan_windows(13, &cfg, &mut rng), vec![(0, 7)]);
        assert_eq!(plan_windows(21, &cfg, &mut rng), vec![(0, 7), (7, 7), (14, 7)]);
        let cfg = DatagenConfig::default();
        for (_, len) in plan_windows(200, &cfg, &mut rng) {
            assert!((7..=13).contains(&len));
        }
    }

    #[test]
    fn trimming() {
        assert_eq!(trim_for_epoch(37, 1.0, 3).unwrap().len(), 37);
        assert_eq!(trim_for_epoch(22_499, 0.5, 3).unwrap().len(), 11_250);
        let subsets: Vec<Vec<usize>> = (0..3).map(|e| trim_for_epoch(200, 0.5, e).unwrap()).collect();
        assert!(subsets[0] != subsets[1] && subsets[1] != subsets[2] && subsets[0] != subsets[2]);
        assert_eq!(trim_for_epoch(200, 0.5, 7).unwrap(), trim_for_epoch(200, 0.5, 7).unwrap());
        assert!(trim_for_epoch(10, 0.0, 0).is_err());
        assert!(trim_for_epoch(10, 1.5, 0).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let e = vec![ManifestEntry { split: "train".into(), seq_id: "a".into(), frame_id: 3, window_len: 9, k: 15.0 }];
        fs::write(dir.path().join(MANIFEST), render_manifest(&e)).unwrap();
        assert_eq!(read_manifest(dir.path()).unwrap(), e);
        assert_eq!(render_manifest(&e), "split\tseq_id\tframe_id\twindow_len\tK\ntrain\ta\t3\t9\t15\n");
    }
}
