//! Image-quality metrics, sliding-window evaluation, runtime measurement,
//! report tables and plots.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use image::{Rgb, RgbImage};
use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datagen::SequenceData;
use crate::error::{Error, IoContext, Result};
use crate::mmpnet::MmpNet;
use crate::mmprnn::{rnn_macs, rnn_param_count, MmpRnn, WINDOW};
use crate::nn::Eager;
use crate::tensor::{Shape, Tensor};
use crate::trainer::{resolve_priors, PriorSource};

/// `10·log10(1/MSE)` over all pixels and channels; `+inf` for identical images.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!("PSNR shape mismatch: {} vs {}", a.shape(), b.shape())));
    }
    let sse: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(psnr_from_mse(sse / a.len() as f64))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn gaussian_1d() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut g = [0.0; SSIM_WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        *v = (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Valid-region separable Gaussian filter of an `h×w` plane.
fn filter(plane: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over channels (11×11 Gaussian window, σ = 1.5, valid region).
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    let s = a.shape();
    if s != b.shape() {
        return Err(Error::invalid(format!("SSIM shape mismatch: {s} vs {}", b.shape())));
    }
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::invalid(format!("SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels, got {}×{}", s.h, s.w)));
    }
    let g = gaussian_1d();
    let plane = s.h * s.w;
    let mut total = 0.0;
    for i in 0..s.n * s.c {
        let x: Vec<f64> = a.data()[i * plane..(i + 1) * plane].iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.data()[i * plane..(i + 1) * plane].iter().map(|&v| v as f64).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let (mx, my) = (filter(&x, s.h, s.w, &g), filter(&y, s.h, s.w, &g));
        let (xx, yy, xy) = (
            filter(&prod(&x, &x), s.h, s.w, &g),
            filter(&prod(&y, &y), s.h, s.w, &g),
            filter(&prod(&x, &y), s.h, s.w, &g),
        );
        let mut sum = 0.0;
        for k in 0..mx.len() {
            let (vx, vy, cxy) = (xx[k] - mx[k] * mx[k], yy[k] - my[k] * my[k], xy[k] - mx[k] * my[k]);
            sum += ((2.0 * mx[k] * my[k] + C1) * (2.0 * cxy + C2))
                / ((mx[k] * mx[k] + my[k] * my[k] + C1) * (vx + vy + C2));
        }
        total += sum / mx.len() as f64;
    }
    Ok(total / (s.n * s.c) as f64)
}

/// Window start positions covering `n` frames with windows of `f` frames at stride `f − 4`.
/// The last window is shifted back to end at the final frame.
pub fn window_starts(n: usize, f: usize) -> Vec<usize> {
    if n < WINDOW {
        return Vec::new();
    }
    if n <= f {
        return vec![0];
    }
    let stride = f - (WINDOW - 1);
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|s| s + f <= n).collect();
    if starts.last().is_some_and(|&s| s + f < n) {
        starts.push(n - f);
    }
    starts
}

/// Deblurs `frames` in windows of the network's `F`; entry `t` holds the restored
/// frame `t` where one exists (the first and last two frames have none).
pub fn sliding_deblur(
    rnn: &MmpRnn<f32>,
    frames: &[Tensor<f32>],
    priors: Option<&[Tensor<f32>]>,
) -> Result<Vec<Option<Tensor<f32>>>> {
    let f = rnn.config().frames;
    let mut out = vec![None; frames.len()];
    for s in window_starts(frames.len(), f) {
        let end = (s + f).min(frames.len());
        let restored = rnn.deblur(&frames[s..end], priors.map(|p| &p[s..end]))?;
        for (i, o) in restored.into_iter().enumerate() {
            let slot = &mut out[s + 2 + i];
            if slot.is_none() {
                *slot = Some(o);
            }
        }
    }
    Ok(out)
}

/// One row of the results table.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub model: String,
    /// Absent when the data has no sharp references.
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    /// Per 1280×720 frame.
    pub gmacs: f64,
    pub params_m: f64,
    /// Seconds per frame, MMP-Net included; absent when not measured.
    pub time_s: Option<f64>,
    pub frames_scored: usize,
}

/// A deblurring model ready for evaluation.
pub struct EvalModel<'a> {
    pub tag: String,
    pub rnn: &'a MmpRnn<f32>,
    pub mmpnet: Option<&'a MmpNet<f32>>,
    pub prior: PriorSource,
}

impl EvalModel<'_> {
    fn counts_mmpnet(&self) -> bool {
        self.prior == PriorSource::Mmpnet && self.mmpnet.is_some()
    }

    pub fn gmacs(&self) -> f64 {
        rnn_macs(self.rnn.config(), 720, 1280, self.counts_mmpnet().then(|| self.mmpnet.unwrap().config()))
    }

    pub fn params_m(&self) -> f64 {
        rnn_param_count(self.rnn.config(), self.counts_mmpnet().then(|| self.mmpnet.unwrap().config())) as f64 / 1e6
    }
}

/// Restored frames per sequence (see [`sliding_deblur`]).
pub type Restored = Vec<Vec<Option<Tensor<f32>>>>;

/// Runs the model over every sequence and scores frames that have an output
/// and a sharp reference. Infinite PSNRs are excluded from the mean with a warning.
pub fn evaluate_model(model: &EvalModel<'_>, seqs: &[SequenceData]) -> Result<(MetricsReport, Restored)> {
    let priors = resolve_priors(seqs, model.prior, model.mmpnet)?;
    let mut restored = Vec::with_capacity(seqs.len());
    let (mut p, mut s, mut scored, mut infinite) = (Vec::new(), Vec::new(), 0usize, 0usize);
    for (seq, pr) in seqs.iter().zip(&priors) {
        let outs = sliding_deblur(model.rnn, &seq.blur, (!pr.is_empty()).then_some(pr.as_slice()))?;
        if seq.has_sharp() {
            for (t, o) in outs.iter().enumerate() {
                if let Some(o) = o {
                    let v = psnr(&seq.sharp[t], o)?;
                    if v.is_finite() {
                        p.push(v);
                    } else {
                        infinite += 1;
                    }
                    s.push(ssim(&seq.sharp[t], o)?);
                    scored += 1;
                }
            }
        }
        restored.push(outs);
    }
    if infinite > 0 {
        warn!("{infinite} frame(s) reproduced the reference exactly; excluded from the PSNR mean");
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let report = MetricsReport {
        model: model.tag.clone(),
        psnr: mean(&p),
        ssim: mean(&s),
        gmacs: model.gmacs(),
        params_m: model.params_m(),
        time_s: None,
        frames_scored: scored,
    };
    Ok((report, restored))
}

/// Scores blurry inputs against references: the no-op baseline.
pub fn baseline_psnr(seqs: &[SequenceData], only_restored_frames: bool) -> Result<Option<f64>> {
    let mut v = Vec::new();
    for s in seqs.iter().filter(|s| s.has_sharp()) {
        let range = if only_restored_frames && s.len() >= WINDOW { 2..s.len() - 2 } else { 0..s.len() };
        for t in range {
            let p = psnr(&s.sharp[t], &s.blur[t])?;
            if p.is_finite() {
                v.push(p);
            }
        }
    }
    Ok((!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64))
}

/// Wall-clock seconds per restored frame in streaming mode (one recurrent cell,
/// one reconstruction and, when used, one MMP-Net pass per frame), averaged over
/// `timed` frames after `warmup` frames, on random `height×width` input.
pub fn measure_runtime(model: &EvalModel<'_>, height: usize, width: usize, warmup: usize, timed: usize) -> Result<f64> {
    if timed == 0 {
        return Err(Error::invalid("runtime measurement needs at least one timed frame"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let shape = Shape::new(1, 3, height, width);
    let total = warmup + timed + WINDOW - 1;
    let mut e = Eager;
    let uses_prior = model.rnn.config().mmam;
    let mut state = model.rnn.initial_state(&mut e, shape);
    let mut frames = Vec::new();
    let mut feats = Vec::new();
    let mut elapsed = 0.0;
    for t in 0..total {
        let frame = Arc::new(Tensor::from_fn(shape, |_, _, _, _| rng.random_range(0.0..1.0f32)));
        let start = Instant::now();
        let prior = if uses_prior {
            Some(Arc::new(match (model.prior, model.mmpnet) {
                (PriorSource::Mmpnet, Some(net)) => net.forward(&frame)?,
                _ => Tensor::zeros(shape.with_c(1)),
            }))
        } else {
            None
        };
        state = model.rnn.fem_step(&mut e, &frame, prior.as_ref(), &state)?;
        frames.push(frame);
        feats.push(state.deblurred.clone());
        if feats.len() == WINDOW {
            model.rnn.rm_reconstruct(&mut e, &feats, &frames[WINDOW / 2])?;
            feats.remove(0);
            frames.remove(0);
        }
        let dt = start.elapsed().as_secs_f64();
        if t + 1 >= WINDOW + warmup {
            elapsed += dt;
        }
    }
    Ok(elapsed / timed as f64)
}

pub const REPORT_HEADER: &str = "model\tpsnr\tssim\tgmacs\tparams_M\ttime_s";
pub const ABSENT: &str = "NA";

fn cell(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| ABSENT.to_string(), |x| format!("{x:.digits$}"))
}

/// Rows sorted by PSNR, highest first; rows without PSNR go last.
pub fn sort_reports(reports: &[MetricsReport]) -> Vec<MetricsReport> {
    let mut r = reports.to_vec();
    r.sort_by(|a, b| {
        let key = |x: &MetricsReport| x.psnr.unwrap_or(f64::NEG_INFINITY);
        key(b).total_cmp(&key(a)).then_with(|| a.model.cmp(&b.model))
    });
    r
}

/// Machine-readable table.
pub fn render_tsv(reports: &[MetricsReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::invalid("no reports to render"));
    }
    let mut s = format!("{REPORT_HEADER}\n");
    for r in sort_reports(reports) {
        writeln!(
            s,
            "{}\t{}\t{}\t{:.2}\t{:.2}\t{}",
            r.model,
            cell(r.psnr, 2),
            cell(r.ssim, 4),
            r.gmacs,
            r.params_m,
            cell(r.time_s, 3)
        )
        .unwrap();
    }
    Ok(s)
}

/// Human-readable table with the same rows.
pub fn render_markdown(reports: &[MetricsReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::invalid("no reports to render"));
    }
    let mut s = String::from("| Model | PSNR | SSIM | GMACs | Param (M) | Time (s) |\n|---|---|---|---|---|---|\n");
    for r in sort_reports(reports) {
        writeln!(
            s,
            "| {} | {} | {} | {:.2} | {:.2} | {} |",
            r.model,
            cell(r.psnr, 2),
            cell(r.ssim, 4),
            r.gmacs,
            r.params_m,
            cell(r.time_s, 3)
        )
        .unwrap();
    }
    s.push_str("\nGMACs and parameters per 1280×720 frame; time includes MMP-Net inference when the model uses it.\n");
    Ok(s)
}

/// Parses a table written by [`render_tsv`].
pub fn parse_tsv(text: &str) -> Result<Vec<MetricsReport>> {
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_HEADER) {
        return Err(Error::invalid("report table has an unexpected header"));
    }
    let opt = |s: &str| -> Result<Option<f64>> {
        if s == ABSENT {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| Error::invalid(format!("bad number `{s}` in report")))
        }
    };
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 6 {
                return Err(Error::invalid(format!("report row `{l}` has {} fields", f.len())));
            }
            Ok(MetricsReport {
                model: f[0].to_string(),
                psnr: opt(f[1])?,
                ssim: opt(f[2])?,
                gmacs: opt(f[3])?.unwrap_or(0.0),
                params_m: opt(f[4])?.unwrap_or(0.0),
                time_s: opt(f[5])?,
                frames_scored: 0,
            })
        })
        .collect()
}

/// Writes `report.tsv` and `report.md` into `dir`.
pub fn write_report(dir: &Path, reports: &[MetricsReport]) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let tsv = dir.join("report.tsv");
    fs::write(&tsv, render_tsv(reports)?).at(&tsv)?;
    let md = dir.join("report.md");
    fs::write(&md, render_markdown(reports)?).at(&md)
}

/// A named series for [`Plot`].
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    /// Joined by lines rather than drawn as markers.
    pub line: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

const PALETTE: [[u8; 3]; 6] = [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40], [148, 103, 189], [140, 86, 75]];
const PLOT_W: f64 = 640.0;
const PLOT_H: f64 = 480.0;
const MARGIN: f64 = 60.0;

impl Plot {
    fn bounds(&self) -> Option<(f64, f64, f64, f64)> {
        let pts = self.series.iter().flat_map(|s| &s.points).filter(|(x, y)| x.is_finite() && y.is_finite());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in pts {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            return None;
        }
        let pad = |a: f64, b: f64| if b > a { ((b - a) * 0.05, (b - a) * 0.05) } else { (0.5, 0.5) };
        let ((px0, px1), (py0, py1)) = (pad(x0, x1), pad(y0, y1));
        Some((x0 - px0, x1 + px1, y0 - py0, y1 + py1))
    }

    fn project(&self, b: (f64, f64, f64, f64), x: f64, y: f64) -> (f64, f64) {
        let (x0, x1, y0, y1) = b;
        (
            MARGIN + (x - x0) / (x1 - x0) * (PLOT_W - 2.0 * MARGIN),
            PLOT_H - MARGIN - (y - y0) / (y1 - y0) * (PLOT_H - 2.0 * MARGIN),
        )
    }

    pub fn to_svg(&self) -> Result<String> {
        let b = self.bounds().ok_or_else(|| Error::invalid("plot has no finite points"))?;
        let mut s = String::new();
        writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{PLOT_W}" height="{PLOT_H}" font-family="sans-serif" font-size="12">"#).unwrap();
        writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
        let (l, r, t, bt) = (MARGIN, PLOT_W - MARGIN, MARGIN, PLOT_H - MARGIN);
        writeln!(s, r#"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="black"/>"#, r - l, bt - t).unwrap();
        writeln!(s, r#"<text x="{}" y="30" text-anchor="middle" font-size="14">{}</text>"#, PLOT_W / 2.0, xml(&self.title)).unwrap();
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, PLOT_W / 2.0, PLOT_H - 15.0, xml(&self.x_label)).unwrap();
        writeln!(s, r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">{}</text>"#, PLOT_H / 2.0, PLOT_H / 2.0, xml(&self.y_label)).unwrap();
        for v in [(b.0, b.2), (b.1, b.3)] {
            let (px, py) = self.project(b, v.0, v.1);
            writeln!(s, r#"<text x="{px:.1}" y="{}" text-anchor="middle">{:.3}</text>"#, bt + 15.0, v.0).unwrap();
            writeln!(s, r#"<text x="{}" y="{py:.1}" text-anchor="end">{:.3}</text>"#, l - 4.0, v.1).unwrap();
        }
        for (k, ser) in self.series.iter().enumerate() {
            let [cr, cg, cb] = PALETTE[k % PALETTE.len()];
            let color = format!("rgb({cr},{cg},{cb})");
            let pts: Vec<(f64, f64)> = ser.points.iter().filter(|(x, y)| x.is_finite() && y.is_finite()).map(|&(x, y)| self.project(b, x, y)).collect();
            if ser.line {
                let path: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
                writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" ")).unwrap();
            } else {
                for (x, y) in &pts {
                    writeln!(s, r#"<circle cx="{x:.1}" cy="{y:.1}" r="4" fill="{color}"/>"#).unwrap();
                }
            }
            writeln!(s, r#"<text x="{}" y="{}" fill="{color}">{}</text>"#, r - 150.0, t + 16.0 * (k as f64 + 1.0), xml(&ser.label)).unwrap();
        }
        s.push_str("</svg>\n");
        Ok(s)
    }

    /// Raster rendering without text.
    pub fn to_image(&self) -> Result<RgbImage> {
        let b = self.bounds().ok_or_else(|| Error::invalid("plot has no finite points"))?;
        let mut img = RgbImage::from_pixel(PLOT_W as u32, PLOT_H as u32, Rgb([255, 255, 255]));
        let black = Rgb([0, 0, 0]);
        let (l, r, t, bt) = (MARGIN, PLOT_W - MARGIN, MARGIN, PLOT_H - MARGIN);
        for (a, c) in [((l, t), (r, t)), ((r, t), (r, bt)), ((r, bt), (l, bt)), ((l, bt), (l, t))] {
            draw_line(&mut img, a, c, black);
        }
        for (k, ser) in self.series.iter().enumerate() {
            let color = Rgb(PALETTE[k % PALETTE.len()]);
            let pts: Vec<(f64, f64)> = ser.points.iter().filter(|(x, y)| x.is_finite() && y.is_finite()).map(|&(x, y)| self.project(b, x, y)).collect();
            if ser.line {
                for w in pts.windows(2) {
                    draw_line(&mut img, w[0], w[1], color);
                }
            } else {
                for &(x, y) in &pts {
                    for dy in -3i64..=3 {
                        for dx in -3i64..=3 {
                            if dx * dx + dy * dy <= 9 {
                                put(&mut img, x as i64 + dx, y as i64 + dy, color);
                            }
                        }
                    }
                }
            }
        }
        Ok(img)
    }

    /// Writes SVG or PNG depending on the extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("svg") => fs::write(path, self.to_svg()?).at(path),
            Some("png") => self
                .to_image()?
                .save(path)
                .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() }),
            _ => Err(Error::invalid(format!("unsupported plot format: {}", path.display()))),
        }
    }
}

fn xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        put(img, (a.0 + t * (b.0 - a.0)).round() as i64, (a.1 + t * (b.1 - a.1)).round() as i64, c);
    }
}

/// PSNR against GMACs, one marker per model with a PSNR.
pub fn psnr_gmacs_plot(reports: &[MetricsReport]) -> Plot {
    Plot {
        title: "PSNR vs GMACs".into(),
        x_label: "GMACs per 720p frame".into(),
        y_label: "PSNR (dB)".into(),
        series: reports
            .iter()
            .filter_map(|r| r.psnr.map(|p| Series { label: r.model.clone(), points: vec![(r.gmacs, p)], line: false }))
            .collect(),
    }
}

/// One curve per loss column of a training `metrics.tsv` against epoch.
pub fn loss_curves(metrics_tsv: &str) -> Result<Plot> {
    let mut lines = metrics_tsv.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| Error::invalid("empty metrics log"))?.split('\t').collect();
    if header.first() != Some(&"epoch") {
        return Err(Error::invalid("metrics log must start with an `epoch` column"));
    }
    let cols: Vec<usize> = (1..header.len()).filter(|&i| header[i] != "lr").collect();
    let mut series: Vec<Series> =
        cols.iter().map(|&i| Series { label: header[i].to_string(), points: Vec::new(), line: true }).collect();
    for l in lines.filter(|l| !l.is_empty()) {
        let f: Vec<&str> = l.split('\t').collect();
        let epoch: f64 = f[0].parse().map_err(|_| Error::invalid(format!("bad epoch in `{l}`")))?;
        for (s, &i) in series.iter_mut().zip(&cols) {
            if let Some(v) = f.get(i).and_then(|v| v.parse::<f64>().ok()) {
                s.points.push((epoch, v));
            }
        }
    }
    series.retain(|s| s.points.iter().any(|(_, y)| y.is_finite()));
    Ok(Plot { title: "Training curves".into(), x_label: "epoch".into(), y_label: "value".into(), series })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mmprnn::NetConfig;
    use proptest::prelude::*;

    fn random(shape: Shape, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.random_range(0.0..1.0f32))
    }

    #[test]
    fn psnr_closed_forms() {
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-9);
        assert!((psnr_from_mse(0.0001) - 40.0).abs() < 1e-9);
        let a = random(Shape::new(1, 3, 4, 4), 1);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert!(psnr(&a, &random(Shape::new(1, 3, 4, 5), 1)).is_err());
    }

    /// Direct windowed sums with a 2-D kernel, no separability.
    fn ssim_direct(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
        let s = a.shape();
        let r = 5.0;
        let mut k = [[0.0f64; 11]; 11];
        let mut ks = 0.0;
        for (i, row) in k.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (-((i as f64 - r).powi(2) + (j as f64 - r).powi(2)) / 4.5).exp();
                ks += *v;
            }
        }
        let mut total = 0.0;
        for c in 0..s.c {
            let mut sum = 0.0;
            let mut n = 0;
            for y in 0..=s.h - 11 {
                for x in 0..=s.w - 11 {
                    let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let w = k[i][j] / ks;
                            let p = a.at(0, c, y + i, x + j) as f64;
                            let q = b.at(0, c, y + i, x + j) as f64;
                            mx += w * p;
                            my += w * q;
                            xx += w * p * p;
                            yy += w * q * q;
                            xy += w * p * q;
                        }
                    }
                    let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
                    sum += ((2.0 * mx * my + C1) * (2.0 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2));
                    n += 1;
                }
            }
            total += sum / n as f64;
        }
        total / s.c as f64
    }

    #[test]
    fn ssim_matches_direct_windowed_sum() {
        let a = random(Shape::new(1, 3, 32, 32), 2);
        let b = a.zip_map(&random(Shape::new(1, 3, 32, 32), 3), |x, n| (0.7 * x + 0.3 * n).clamp(0.0, 1.0));
        assert!((ssim(&a, &b).unwrap() - ssim_direct(&a, &b)).abs() < 1e-6);
    }

    #[test]
    fn ssim_identity_inversion_and_size() {
        let a = random(Shape::new(1, 3, 16, 16), 4);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        assert!(ssim(&a, &a.map(|v| 1.0 - v)).unwrap() < 1.0);
        let small = random(Shape::new(1, 3, 10, 16), 4);
        assert!(ssim(&small, &small).is_err());
    }

    #[test]
    fn psnr_decreases_along_noise_ladder() {
        let a = random(Shape::new(1, 3, 16, 16), 5);
        let noise = random(Shape::new(1, 3, 16, 16), 6);
        let p: Vec<f64> = [0.01f32, 0.05, 0.2]
            .iter()
            .map(|&amp| psnr(&a, &a.zip_map(&noise, |x, n| x + amp * (n - 0.5))).unwrap())
            .collect();
        assert!(p[0] > p[1] && p[1] > p[2]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn metrics_are_symmetric(s1 in 0u64..1000, s2 in 0u64..1000) {
            let a = random(Shape::new(1, 3, 12, 13), s1);
            let b = random(Shape::new(1, 3, 12, 13), s2 + 1000);
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
            let v = ssim(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn window_starts_cover_every_frame_once() {
        assert_eq!(window_starts(8, 8), vec![0]);
        assert_eq!(window_starts(12, 8), vec![0, 4]);
        assert_eq!(window_starts(13, 8), vec![0, 4, 5]);
        assert_eq!(window_starts(4, 8), Vec::<usize>::new());
        for n in 5..40 {
            let mut covered = vec![0; n];
            for s in window_starts(n, 8) {
                for t in s + 2..(s + 8).min(n) - 2 {
                    covered[t] += 1;
                }
            }
            assert!(covered[2..n - 2].iter().all(|&c| c >= 1), "n = {n}");
        }
    }

    fn report(model: &str, psnr: Option<f64>) -> MetricsReport {
        MetricsReport { model: model.into(), psnr, ssim: psnr.map(|_| 0.9), gmacs: 10.0, params_m: 1.0, time_s: None, frames_scored: 1 }
    }

    #[test]
    fn report_rows_sorted_and_round_trip() {
        assert!(render_tsv(&[]).is_err());
        let one = render_tsv(&[report("a", Some(30.0))]).unwrap();
        assert_eq!(one.lines().count(), 2);
        let t = render_tsv(&[report("low", Some(28.0)), report("none", None), report("high", Some(31.0))]).unwrap();
        let rows: Vec<&str> = t.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
        assert_eq!(rows, ["high", "low", "none"]);
        assert!(t.contains("NA"));
        let back = parse_tsv(&t).unwrap();
        assert_eq!(back[0].psnr, Some(31.0));
        assert_eq!(back[2].psnr, None);
    }

    #[test]
    fn plots_are_deterministic() {
        let reports = [report("a", Some(30.0)), report("b", Some(31.0))];
        let p = psnr_gmacs_plot(&reports);
        assert_eq!(p.to_svg().unwrap(), p.to_svg().unwrap());
        assert_eq!(p.to_image().unwrap().into_raw(), p.to_image().unwrap().into_raw());
        let curves = loss_curves("epoch\tlr\tL_char\ttotal\tval_PSNR\n1\t1e-3\t0.5\t0.6\tnan\n2\t1e-3\t0.4\t0.5\tnan\n").unwrap();
        assert_eq!(curves.series.len(), 2);
        let dir = tempfile::tempdir().unwrap();
        assert!(curves.save(&dir.path().join("c.svg")).is_ok());
        assert!(curves.save(&dir.path().join("c.png")).is_ok());
        assert!(curves.save(&dir.path().join("c.bmp")).is_err());
    }

    fn sharp_seq(n: usize) -> SequenceData {
        let frames: Vec<Tensor<f32>> = (0..n).map(|i| random(Shape::new(1, 3, 16, 16), 50 + i as u64)).collect();
        SequenceData { split: "test".into(), seq_id: "s".into(), blur: frames.clone(), sharp: frames, mmp: Vec::new(), center: Vec::new() }
    }

    #[test]
    fn identity_network_scores_reference_as_upper_bound() {
        let mut rnn = MmpRnn::<f32>::new(NetConfig { n_a: 1, n_b: 1, n_c: 4, frames: 5, mmam: false, ..NetConfig::default() }, 1).unwrap();
        rnn.params_mut().fill(0.0);
        rnn.set_skip_identity();
        let model = EvalModel { tag: "id".into(), rnn: &rnn, mmpnet: None, prior: PriorSource::None };
        let (r, restored) = evaluate_model(&model, &[sharp_seq(9)]).unwrap();
        assert_eq!(r.psnr, None);
        assert!((r.ssim.unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(r.frames_scored, 5);
        assert!(restored[0][0].is_none() && restored[0][2].is_some());
        let mut blind = sharp_seq(6);
        blind.sharp.clear();
        let (r, _) = evaluate_model(&model, &[blind]).unwrap();
        assert_eq!((r.psnr, r.ssim, r.frames_scored), (None, None, 0));
        assert!(measure_runtime(&model, 16, 16, 1, 2).unwrap() >= 0.0);
    }
}
