//! Training loops for MMP-Net and the recurrent deblurring network: batching,
//! augmentation, schedules, checkpointing, metrics logging and ablations.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{checkpoint_name, list_checkpoints, Checkpoint};
use crate::datagen::{trim_for_epoch, SequenceData};
use crate::error::{Error, IoContext, Result};
use crate::evalsuite::{psnr, sliding_deblur};
use crate::losses::LossWeights;
use crate::mmpnet::{MmpNet, MmpNetConfig};
use crate::mmprnn::{MmpRnn, NetConfig, WINDOW};
use crate::nn::{NodeId, Tape};
use crate::optim::Adam;
use crate::seed::{derive_rng, derive_seed};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// `0.5·base·(1 + cos(π·e/E))`, no restarts.
    Cosine,
    /// Halves every `halve_after` epochs.
    Step,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Augment {
    pub hflip: bool,
    pub vflip: bool,
    pub rot90: bool,
}

impl Default for Augment {
    fn default() -> Self {
        Self { hflip: true, vflip: true, rot90: true }
    }
}

impl Augment {
    pub const NONE: Augment = Augment { hflip: false, vflip: false, rot90: false };
}

/// Where the deblurring network's prior comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorSource {
    /// Frozen MMP-Net applied to each blurry frame.
    Mmpnet,
    /// Stored ground-truth map.
    Gt,
    /// Stored centre-frame flow prior.
    CenterFlow,
    /// Ground truth divided by its own maximum.
    NormalizedGt,
    /// No prior; the attentive module is removed.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Optimisation steps per epoch; one pass over the (trimmed) training windows when absent.
    pub steps_per_epoch: Option<usize>,
    pub batch_size: usize,
    pub patch_size: usize,
    /// Frames per training sequence (1 for MMP-Net).
    pub seq_len_train: usize,
    pub base_lr: f64,
    pub schedule: Schedule,
    pub halve_after: usize,
    pub augment: Augment,
    /// Fraction of training windows used per epoch.
    pub trim_fraction: f64,
    pub val_every: usize,
    pub val_sequences: usize,
    pub val_crop: usize,
    pub checkpoint_every: usize,
    /// Most recent checkpoints kept on disk; all when absent.
    pub keep_checkpoints: Option<usize>,
    pub prior: PriorSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::deblur()
    }
}

impl TrainConfig {
    /// Recurrent-network recipe.
    pub fn deblur() -> Self {
        Self {
            epochs: 1000,
            steps_per_epoch: None,
            batch_size: 8,
            patch_size: 256,
            seq_len_train: 10,
            base_lr: 5e-4,
            schedule: Schedule::Cosine,
            halve_after: 200,
            augment: Augment::default(),
            trim_fraction: 1.0,
            val_every: 1,
            val_sequences: 8,
            val_crop: 256,
            checkpoint_every: 1,
            keep_checkpoints: None,
            prior: PriorSource::Mmpnet,
        }
    }

    /// MMP-Net recipe.
    pub fn mmpnet() -> Self {
        Self {
            epochs: 400,
            patch_size: 512,
            seq_len_train: 1,
            base_lr: 3e-4,
            schedule: Schedule::Step,
            trim_fraction: 0.5,
            ..Self::deblur()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patch_size == 0 || self.seq_len_train == 0 {
            return Err(Error::invalid("batch_size, patch_size and seq_len_train must be positive"));
        }
        if !(self.base_lr > 0.0) || self.val_every == 0 || self.checkpoint_every == 0 || self.halve_after == 0 {
            return Err(Error::invalid("base_lr, val_every, checkpoint_every and halve_after must be positive"));
        }
        if self.steps_per_epoch == Some(0) || self.keep_checkpoints == Some(0) {
            return Err(Error::invalid("steps_per_epoch and keep_checkpoints must be positive when set"));
        }
        if !(self.trim_fraction > 0.0 && self.trim_fraction <= 1.0) {
            return Err(Error::invalid("trim_fraction must be in (0, 1]"));
        }
        Ok(())
    }
}

/// Learning rate for 0-based `epoch` of `epochs`.
pub fn learning_rate(cfg: &TrainConfig, epoch: usize) -> f64 {
    match cfg.schedule {
        Schedule::Cosine if cfg.epochs > 0 => 0.5 * cfg.base_lr * (1.0 + (PI * epoch as f64 / cfg.epochs as f64).cos()),
        Schedule::Step => cfg.base_lr * 0.5f64.powi((epoch / cfg.halve_after) as i32),
        _ => cfg.base_lr,
    }
}

/// One geometric augmentation shared by every image of a training sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Transform {
    pub hflip: bool,
    pub vflip: bool,
    /// Transpose followed by a horizontal flip (90° clockwise).
    pub rot90: bool,
}

impl Transform {
    pub fn draw(aug: &Augment, rng: &mut impl Rng) -> Self {
        Self {
            hflip: aug.hflip && rng.random_bool(0.5),
            vflip: aug.vflip && rng.random_bool(0.5),
            rot90: aug.rot90 && rng.random_bool(0.5),
        }
    }

    pub fn apply(&self, t: &Tensor<f32>) -> Tensor<f32> {
        let s = t.shape();
        let mut out = t.clone();
        if self.hflip {
            out = Tensor::from_fn(s, |n, c, y, x| t.at(n, c, y, s.w - 1 - x));
        }
        if self.vflip {
            let src = out.clone();
            out = Tensor::from_fn(s, |n, c, y, x| src.at(n, c, s.h - 1 - y, x));
        }
        if self.rot90 {
            let src = out.clone();
            let r = Shape::new(s.n, s.c, s.w, s.h);
            out = Tensor::from_fn(r, |n, c, y, x| src.at(n, c, s.h - 1 - x, y));
        }
        out
    }
}

/// Aligned training sequences stacked along the batch axis, one tensor per time step.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub blur: Vec<Tensor<f32>>,
    /// Empty when the data carries no sharp references.
    pub sharp: Vec<Tensor<f32>>,
    /// Empty when no prior is used.
    pub prior: Vec<Tensor<f32>>,
}

/// Where one batch element comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Crop {
    pub seq: usize,
    pub start: usize,
    pub top: usize,
    pub left: usize,
    pub transform: Transform,
}

fn crop_frame(t: &Tensor<f32>, c: &Crop, size: usize) -> Tensor<f32> {
    c.transform.apply(&t.crop(c.top, c.left, size, size))
}

/// Cuts `len` frames starting at each element's window with a shared crop and transform.
pub fn assemble_batch(
    seqs: &[SequenceData],
    priors: &[Vec<Tensor<f32>>],
    crops: &[Crop],
    len: usize,
    size: usize,
) -> Batch {
    let stack = |pick: &dyn Fn(&Crop, usize) -> Option<Tensor<f32>>| -> Vec<Tensor<f32>> {
        (0..len)
            .map_while(|t| {
                let items: Option<Vec<Tensor<f32>>> = crops.iter().map(|c| pick(c, t)).collect();
                items.map(|v| Tensor::stack(&v.iter().collect::<Vec<_>>()))
            })
            .collect()
    };
    let blur = stack(&|c, t| Some(crop_frame(&seqs[c.seq].blur[c.start + t], c, size)));
    let sharp = stack(&|c, t| seqs[c.seq].sharp.get(c.start + t).map(|f| crop_frame(f, c, size)));
    let prior = stack(&|c, t| priors.get(c.seq).and_then(|p| p.get(c.start + t)).map(|f| crop_frame(f, c, size)));
    Batch { blur, sharp, prior }
}

fn check_patch(seqs: &[SequenceData], cfg: &TrainConfig) -> Result<()> {
    for s in seqs {
        let (h, w) = s.dims();
        if cfg.patch_size > h || cfg.patch_size > w {
            return Err(Error::invalid(format!("patch {} exceeds frame size {h}×{w} of {}", cfg.patch_size, s.seq_id)));
        }
    }
    Ok(())
}

fn draw_crop(seqs: &[SequenceData], cfg: &TrainConfig, seq: usize, start: usize, rng: &mut impl Rng) -> Crop {
    let (h, w) = seqs[seq].dims();
    Crop {
        seq,
        start,
        top: rng.random_range(0..=h - cfg.patch_size),
        left: rng.random_range(0..=w - cfg.patch_size),
        transform: Transform::draw(&cfg.augment, rng),
    }
}

/// Random batch: sequences drawn uniformly, windows of `seq_len_train` frames,
/// one crop and one augmentation per element.
pub fn sample_batch(seqs: &[SequenceData], priors: &[Vec<Tensor<f32>>], cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Batch> {
    if seqs.iter().all(|s| s.len() < cfg.seq_len_train) {
        return Err(Error::invalid(format!("no sequence holds {} frames", cfg.seq_len_train)));
    }
    check_patch(seqs, cfg)?;
    let mut crops = Vec::with_capacity(cfg.batch_size);
    let mut failures = 0usize;
    while crops.len() < cfg.batch_size {
        let seq = rng.random_range(0..seqs.len());
        if seqs[seq].len() < cfg.seq_len_train {
            failures += 1;
            if failures == 100 {
                warn!("100 draws hit sequences shorter than {} frames", cfg.seq_len_train);
            }
            continue;
        }
        let start = rng.random_range(0..=seqs[seq].len() - cfg.seq_len_train);
        crops.push(draw_crop(seqs, cfg, seq, start, rng));
    }
    Ok(assemble_batch(seqs, priors, &crops, cfg.seq_len_train, cfg.patch_size))
}

/// All `(sequence, start)` training windows.
pub fn training_windows(seqs: &[SequenceData], len: usize) -> Vec<(usize, usize)> {
    seqs.iter()
        .enumerate()
        .flat_map(|(i, s)| (0..(s.len() + 1).saturating_sub(len)).map(move |st| (i, st)))
        .collect()
}

/// Priors for every frame of every sequence.
pub fn resolve_priors(seqs: &[SequenceData], source: PriorSource, mmpnet: Option<&MmpNet<f32>>) -> Result<Vec<Vec<Tensor<f32>>>> {
    seqs.iter()
        .map(|s| -> Result<Vec<Tensor<f32>>> {
            let need = |v: &Vec<Tensor<f32>>, what: &str| {
                if v.len() == s.len() {
                    Ok(v.clone())
                } else {
                    Err(Error::invalid(format!("sequence {} lacks stored {what} maps", s.seq_id)))
                }
            };
            match source {
                PriorSource::None => Ok(Vec::new()),
                PriorSource::Gt => need(&s.mmp, "mmp"),
                PriorSource::CenterFlow => need(&s.center, "center (run datagen with center_priors = true)"),
                PriorSource::NormalizedGt => Ok(need(&s.mmp, "mmp")?
                    .into_iter()
                    .map(|m| {
                        let peak = m.data().iter().cloned().fold(0f32, f32::max);
                        if peak > 0.0 {
                            m.map(|v| v / peak)
                        } else {
                            m
                        }
                    })
                    .collect()),
                PriorSource::Mmpnet => {
                    let net = mmpnet.ok_or_else(|| Error::invalid("prior source `mmpnet` needs an MMP-Net checkpoint"))?;
                    s.blur.iter().map(|f| net.forward(f)).collect()
                }
            }
        })
        .collect()
}

/// Per-epoch averages appended to `metrics.tsv`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub charbonnier: f64,
    pub gradient: f64,
    pub motion: f64,
    pub total: f64,
    pub val_psnr: Option<f64>,
}

pub const DEBLUR_METRICS_HEADER: &str = "epoch\tlr\tL_char\tL_grad\tL_MM\ttotal\tval_PSNR";
pub const MMP_METRICS_HEADER: &str = "epoch\tlr\ttrain_L1\ttest_L1";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"))
}

fn append_row(path: &Path, header: &str, row: &str) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path).at(path)?;
    if fresh {
        writeln!(f, "{header}").at(path)?;
    }
    writeln!(f, "{row}").at(path)
}

fn prune_checkpoints(dir: &Path, keep: Option<usize>) -> Result<()> {
    if let Some(keep) = keep {
        let all = list_checkpoints(dir)?;
        for (_, p) in all.iter().take(all.len().saturating_sub(keep)) {
            fs::remove_file(p).at(p)?;
        }
    }
    Ok(())
}

/// Everything needed to train the deblurring network.
pub struct DeblurSetup<'a> {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    /// Frozen prior network; required for the `mmpnet` prior or a non-zero motion loss.
    pub mmpnet: Option<&'a MmpNet<f32>>,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Continue from this checkpoint.
    pub resume: Option<PathBuf>,
    /// Resolved configuration stored in every checkpoint.
    pub config_echo: serde_json::Value,
}

pub struct DeblurOutcome {
    pub net: MmpRnn<f32>,
    pub metrics: Vec<EpochMetrics>,
    pub last_checkpoint: PathBuf,
}

/// Checks the network/prior/loss combination; returns whether MMP-Net is needed.
pub fn needs_mmpnet(net: &NetConfig, train: &TrainConfig, loss: &LossWeights) -> Result<bool> {
    if net.mmam == (train.prior == PriorSource::None) {
        return Err(Error::invalid(format!(
            "prior source `{:?}` is inconsistent with mmam = {}; prior `none` goes with mmam = false",
            train.prior, net.mmam
        )));
    }
    Ok(train.prior == PriorSource::Mmpnet || loss.lambda2 > 0.0)
}

struct StepLoss {
    charbonnier: f64,
    gradient: f64,
    motion: f64,
    total: f64,
}

/// Records the objective averaged over all reconstructed frames and back-propagates it.
fn deblur_step(
    rnn: &MmpRnn<f32>,
    mmpnet: Option<&MmpNet<f32>>,
    loss: &LossWeights,
    batch: &Batch,
) -> Result<(StepLoss, HashMap<crate::nn::ParamId, Tensor<f32>>)> {
    if batch.sharp.len() != batch.blur.len() {
        return Err(Error::invalid("training data lacks sharp references"));
    }
    let mut tape = Tape::train(rnn.params());
    let frames: Vec<NodeId> = batch.blur.iter().map(|t| tape.input(t.clone(), false)).collect();
    let priors: Vec<NodeId> = batch.prior.iter().map(|t| tape.input(t.clone(), false)).collect();
    let outs = rnn.forward_sequence(&mut tape, &frames, (!priors.is_empty()).then_some(priors.as_slice()))?;
    let k = 1.0 / outs.len() as f64;
    let (mut terms, mut parts) = (Vec::new(), Vec::new());
    for (i, &o) in outs.iter().enumerate() {
        let target = tape.input(batch.sharp[i + 2].clone(), false);
        let c = tape.charbonnier(target, o, loss.epsilon);
        let g = tape.gradient_loss(target, o, loss.gradient_op);
        terms.push((c, k));
        terms.push((g, loss.lambda1 * k));
        let m = if loss.lambda2 > 0.0 {
            let net = mmpnet.ok_or_else(|| Error::invalid("motion loss needs MMP-Net"))?;
            let resp = net.forward_raw_v(&mut tape, &o)?;
            let m = tape.mean(resp);
            terms.push((m, loss.lambda2 * k));
            Some(m)
        } else {
            None
        };
        parts.push((c, g, m));
    }
    let total = tape.weighted_sum(&terms);
    let mut s = StepLoss { charbonnier: 0.0, gradient: 0.0, motion: 0.0, total: tape.scalar(total) as f64 };
    for (c, g, m) in parts {
        s.charbonnier += k * tape.scalar(c) as f64;
        s.gradient += k * tape.scalar(g) as f64;
        s.motion += m.map_or(0.0, |m| k * tape.scalar(m) as f64);
    }
    let grads = tape.backward(total).into_params();
    Ok((s, grads))
}

fn center_crop(s: &SequenceData, size: usize, multiple: usize) -> SequenceData {
    let (h, w) = s.dims();
    let side = size.min(h).min(w) / multiple * multiple;
    let (top, left) = ((h - side) / 2, (w - side) / 2);
    let c = |v: &Vec<Tensor<f32>>| v.iter().map(|t| t.crop(top, left, side, side)).collect();
    SequenceData {
        split: s.split.clone(),
        seq_id: s.seq_id.clone(),
        blur: c(&s.blur),
        sharp: c(&s.sharp),
        mmp: c(&s.mmp),
        center: c(&s.center),
    }
}

/// Mean PSNR of reconstructed frames on centre crops of the first validation sequences.
pub fn validation_psnr(
    rnn: &MmpRnn<f32>,
    mmpnet: Option<&MmpNet<f32>>,
    prior: PriorSource,
    val: &[SequenceData],
    cfg: &TrainConfig,
) -> Result<Option<f64>> {
    let crops: Vec<SequenceData> = val
        .iter()
        .filter(|s| s.has_sharp() && s.len() >= WINDOW)
        .take(cfg.val_sequences)
        .map(|s| center_crop(s, cfg.val_crop, 8))
        .collect();
    let priors = resolve_priors(&crops, prior, mmpnet)?;
    let mut scores = Vec::new();
    for (s, p) in crops.iter().zip(&priors) {
        let outs = sliding_deblur(rnn, &s.blur, (!p.is_empty()).then_some(p.as_slice()))?;
        for (t, o) in outs.iter().enumerate() {
            if let Some(o) = o {
                let v = psnr(&s.sharp[t], o)?;
                if v.is_finite() {
                    scores.push(v);
                }
            }
        }
    }
    Ok((!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64))
}

/// Trains the recurrent network. Writes `ckpt_epochNNNN` files and `metrics.tsv`
/// to `out_dir`; epoch 0 is the initial checkpoint.
pub fn train_deblur(setup: &DeblurSetup<'_>, train: &[SequenceData], val: &[SequenceData]) -> Result<DeblurOutcome> {
    setup.train.validate()?;
    setup.loss.validate()?;
    setup.net.validate()?;
    let cfg = &setup.train;
    if needs_mmpnet(&setup.net, cfg, &setup.loss)? && setup.mmpnet.is_none() {
        return Err(Error::invalid("this configuration needs a frozen MMP-Net checkpoint"));
    }
    if train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if cfg.seq_len_train < WINDOW {
        return Err(Error::invalid(format!("seq_len_train must be ≥ {WINDOW}")));
    }
    check_patch(train, cfg)?;
    fs::create_dir_all(&setup.out_dir).at(&setup.out_dir)?;

    let mut rnn = MmpRnn::<f32>::new(setup.net, derive_seed(setup.seed, "init", 0))?;
    let mut adam = Adam::new(rnn.params());
    let mut start = 0;
    let save = |rnn: &MmpRnn<f32>, adam: &Adam<f32>, epoch: usize| -> Result<PathBuf> {
        let mut ck = Checkpoint::new("deblur", epoch, setup.config_echo.clone());
        ck.add_store("", rnn.params());
        ck.add_adam(rnn.params(), adam);
        if let Some(m) = setup.mmpnet {
            ck.add_store("mmpnet.", m.params());
        }
        let path = setup.out_dir.join(checkpoint_name(epoch));
        ck.save(&path)?;
        prune_checkpoints(&setup.out_dir, cfg.keep_checkpoints)?;
        Ok(path)
    };
    let mut last = if let Some(path) = &setup.resume {
        let ck = Checkpoint::load(path)?;
        if ck.kind != "deblur" {
            return Err(Error::invalid(format!("{} is a {} checkpoint", path.display(), ck.kind)));
        }
        ck.load_store("", rnn.params_mut())?;
        adam = ck.load_adam(rnn.params())?;
        start = ck.epoch;
        info!("resuming from epoch {start}");
        path.clone()
    } else {
        save(&rnn, &adam, 0)?
    };

    let priors = resolve_priors(train, cfg.prior, setup.mmpnet)?;
    let windows = training_windows(train, cfg.seq_len_train);
    if windows.is_empty() {
        return Err(Error::invalid(format!("no training sequence holds {} frames", cfg.seq_len_train)));
    }
    let log = setup.out_dir.join("metrics.tsv");
    let mut metrics = Vec::new();
    for epoch in start + 1..=cfg.epochs {
        let lr = learning_rate(cfg, epoch - 1);
        let mut rng = derive_rng(setup.seed, "batch", epoch as u64);
        let pool = trim_for_epoch(windows.len(), cfg.trim_fraction, derive_seed(setup.seed, "trim", epoch as u64))?;
        let steps = cfg.steps_per_epoch.unwrap_or_else(|| pool.len().div_ceil(cfg.batch_size));
        let mut acc = StepLoss { charbonnier: 0.0, gradient: 0.0, motion: 0.0, total: 0.0 };
        for step in 0..steps {
            let crops: Vec<Crop> = (0..cfg.batch_size)
                .map(|i| {
                    let (seq, st) = windows[pool[(step * cfg.batch_size + i) % pool.len()]];
                    draw_crop(train, cfg, seq, st, &mut rng)
                })
                .collect();
            let batch = assemble_batch(train, &priors, &crops, cfg.seq_len_train, cfg.patch_size);
            let (l, grads) = deblur_step(&rnn, setup.mmpnet, &setup.loss, &batch)?;
            if !l.total.is_finite() {
                return Err(Error::NonFinite { what: "training loss".into(), epoch, step });
            }
            adam.update(rnn.params_mut(), &grads, lr);
            acc.charbonnier += l.charbonnier;
            acc.gradient += l.gradient;
            acc.motion += l.motion;
            acc.total += l.total;
        }
        if !rnn.params().all_finite() {
            return Err(Error::NonFinite { what: "parameters".into(), epoch, step: steps });
        }
        let n = steps.max(1) as f64;
        let val_psnr = if epoch % cfg.val_every == 0 || epoch == cfg.epochs {
            validation_psnr(&rnn, setup.mmpnet, cfg.prior, if val.is_empty() { train } else { val }, cfg)?
        } else {
            None
        };
        let m = EpochMetrics {
            epoch,
            lr,
            charbonnier: acc.charbonnier / n,
            gradient: acc.gradient / n,
            motion: acc.motion / n,
            total: acc.total / n,
            val_psnr,
        };
        append_row(
            &log,
            DEBLUR_METRICS_HEADER,
            &format!(
                "{}\t{:.6e}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}",
                m.epoch, m.lr, m.charbonnier, m.gradient, m.motion, m.total, fmt_opt(m.val_psnr)
            ),
        )?;
        info!("epoch {epoch}: total {:.5} val PSNR {}", m.total, fmt_opt(m.val_psnr));
        metrics.push(m);
        if epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs {
            last = save(&rnn, &adam, epoch)?;
        }
    }
    Ok(DeblurOutcome { net: rnn, metrics, last_checkpoint: last })
}

/// Everything needed to train MMP-Net.
pub struct MmpSetup {
    pub net: MmpNetConfig,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub resume: Option<PathBuf>,
    pub config_echo: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MmpEpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_l1: f64,
    pub test_l1: Option<f64>,
}

pub struct MmpOutcome {
    pub net: MmpNet<f32>,
    pub metrics: Vec<MmpEpochMetrics>,
}

/// Mean L1 of clamped predictions against stored maps, whole frames.
pub fn mmp_l1(net: &MmpNet<f32>, data: &[SequenceData]) -> Result<Option<f64>> {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in data {
        for (b, m) in s.blur.iter().zip(&s.mmp) {
            total += crate::losses::l1(&net.forward(b)?, m)? as f64;
            count += 1;
        }
    }
    Ok((count > 0).then(|| total / count as f64))
}

/// Trains MMP-Net with L1 on (blurry, map) pairs; zero epochs return the
/// initial network without writing a checkpoint.
pub fn train_mmpnet(setup: &MmpSetup, train: &[SequenceData], test: &[SequenceData]) -> Result<MmpOutcome> {
    let cfg = &setup.train;
    cfg.validate()?;
    let mut net = MmpNet::<f32>::new(setup.net, derive_seed(setup.seed, "init", 0))?;
    let pairs: usize = train.iter().map(|s| s.mmp.len().min(s.len())).sum();
    if pairs == 0 {
        return Err(Error::invalid("empty MMP training set"));
    }
    check_patch(train, cfg)?;
    let mut adam = Adam::new(net.params());
    let mut start = 0;
    if let Some(path) = &setup.resume {
        let ck = Checkpoint::load(path)?;
        if ck.kind != "mmpnet" {
            return Err(Error::invalid(format!("{} is a {} checkpoint", path.display(), ck.kind)));
        }
        ck.load_store("", net.params_mut())?;
        adam = ck.load_adam(net.params())?;
        start = ck.epoch;
    }
    let mut metrics = Vec::new();
    if cfg.epochs > start {
        fs::create_dir_all(&setup.out_dir).at(&setup.out_dir)?;
    }
    let maps: Vec<Vec<Tensor<f32>>> = train.iter().map(|s| s.mmp.clone()).collect();
    let windows: Vec<(usize, usize)> =
        train.iter().enumerate().flat_map(|(i, s)| (0..s.mmp.len().min(s.len())).map(move |t| (i, t))).collect();
    let log = setup.out_dir.join("metrics.tsv");
    for epoch in start + 1..=cfg.epochs {
        let lr = learning_rate(cfg, epoch - 1);
        let mut rng = derive_rng(setup.seed, "batch", epoch as u64);
        let pool = trim_for_epoch(windows.len(), cfg.trim_fraction, derive_seed(setup.seed, "trim", epoch as u64))?;
        let steps = cfg.steps_per_epoch.unwrap_or_else(|| pool.len().div_ceil(cfg.batch_size));
        let mut acc = 0.0;
        for step in 0..steps {
            let crops: Vec<Crop> = (0..cfg.batch_size)
                .map(|i| {
                    let (seq, t) = windows[pool[(step * cfg.batch_size + i) % pool.len()]];
                    draw_crop(train, cfg, seq, t, &mut rng)
                })
                .collect();
            let batch = assemble_batch(train, &maps, &crops, 1, cfg.patch_size);
            let mut tape = Tape::train(net.params());
            let x = tape.input(batch.blur[0].clone(), false);
            let target = tape.input(batch.prior[0].clone(), false);
            let y = net.forward_raw_v(&mut tape, &x)?;
            let loss = tape.l1(y, target);
            let value = tape.scalar(loss) as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite { what: "MMP-Net L1".into(), epoch, step });
            }
            let grads = tape.backward(loss).into_params();
            adam.update(net.params_mut(), &grads, lr);
            acc += value;
        }
        let test_l1 = if epoch % cfg.val_every == 0 || epoch == cfg.epochs { mmp_l1(&net, test)? } else { None };
        let m = MmpEpochMetrics { epoch, lr, train_l1: acc / steps.max(1) as f64, test_l1 };
        append_row(&log, MMP_METRICS_HEADER, &format!("{}\t{:.6e}\t{:.6}\t{}", m.epoch, m.lr, m.train_l1, fmt_opt(m.test_l1)))?;
        info!("epoch {epoch}: train L1 {:.5} test L1 {}", m.train_l1, fmt_opt(m.test_l1));
        metrics.push(m);
        if epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs {
            let mut ck = Checkpoint::new("mmpnet", epoch, setup.config_echo.clone());
            ck.add_store("", net.params());
            ck.add_adam(net.params(), &adam);
            ck.save(&setup.out_dir.join(checkpoint_name(epoch)))?;
            prune_checkpoints(&setup.out_dir, cfg.keep_checkpoints)?;
        }
    }
    Ok(MmpOutcome { net, metrics })
}

/// Loads MMP-Net weights stored at the top level or under `mmpnet.`.
pub fn load_mmpnet(ck: &Checkpoint, config: MmpNetConfig) -> Result<MmpNet<f32>> {
    let mut net = MmpNet::<f32>::new(config, 0)?;
    let prefix = if ck.kind == "mmpnet" { "" } else { "mmpnet." };
    ck.load_store(prefix, net.params_mut())?;
    Ok(net)
}

/// Table the ablation belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationGroup {
    Components,
    PriorType,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationVariant {
    pub tag: &'static str,
    pub group: AblationGroup,
    pub net: NetConfig,
    pub loss: LossWeights,
    pub prior: PriorSource,
}

/// Component toggles (attentive module, motion loss, non-deblurred feature
/// transmission) and prior-type alternatives around a base configuration.
pub fn ablation_variants(base: &NetConfig, loss: &LossWeights) -> Vec<AblationVariant> {
    let full = NetConfig { mmam: true, ndf: true, ..*base };
    let no_mmam = NetConfig { mmam: false, ..full };
    let no_lmm = LossWeights { lambda2: 0.0, ..*loss };
    let v = |tag, group, net, loss, prior| AblationVariant { tag, group, net, loss, prior };
    use AblationGroup::*;
    vec![
        v("full", Components, full, *loss, PriorSource::Mmpnet),
        v("-MMAM", Components, no_mmam, *loss, PriorSource::None),
        v("-MMAM-L_MM", Components, no_mmam, no_lmm, PriorSource::None),
        v("-MMAM-L_MM-NDF", Components, NetConfig { ndf: false, ..no_mmam }, no_lmm, PriorSource::None),
        v("I:ground-truth", PriorType, full, *loss, PriorSource::Gt),
        v("II:center-flow", PriorType, full, *loss, PriorSource::CenterFlow),
        v("III:normalized-gt", PriorType, full, *loss, PriorSource::NormalizedGt),
        v("V:none", PriorType, no_mmam, *loss, PriorSource::None),
        v("VI:mmpnet", PriorType, full, *loss, PriorSource::Mmpnet),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(len: usize, h: usize, w: usize, seed: u64) -> SequenceData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = |c: usize| Tensor::from_fn(Shape::new(1, c, h, w), |_, _, _, _| rng.random_range(0.0..1.0f32));
        SequenceData {
            split: "train".into(),
            seq_id: format!("s{seed}"),
            blur: (0..len).map(|_| img(3)).collect(),
            sharp: (0..len).map(|_| img(3)).collect(),
            mmp: (0..len).map(|_| img(1)).collect(),
            center: Vec::new(),
        }
    }

    #[test]
    fn cosine_endpoints_and_step_schedule() {
        let cfg = TrainConfig { epochs: 10, base_lr: 5e-4, ..TrainConfig::deblur() };
        assert_eq!(learning_rate(&cfg, 0), 5e-4);
        assert!(learning_rate(&cfg, 10).abs() < 1e-20);
        assert!((learning_rate(&cfg, 5) - 2.5e-4).abs() < 1e-15);
        let m = TrainConfig { epochs: 400, ..TrainConfig::mmpnet() };
        assert_eq!(learning_rate(&m, 199), 3e-4);
        assert_eq!(learning_rate(&m, 200), 1.5e-4);
    }

    #[test]
    fn unaugmented_crop_at_origin_equals_raw_frames() {
        let seqs = vec![seq(6, 12, 10, 1)];
        let crop = Crop { seq: 0, start: 1, top: 0, left: 0, transform: Transform::default() };
        let b = assemble_batch(&seqs, &[seqs[0].mmp.clone()], &[crop], 3, 8);
        for t in 0..3 {
            assert_eq!(b.blur[t], seqs[0].blur[1 + t].crop(0, 0, 8, 8));
            assert_eq!(b.sharp[t], seqs[0].sharp[1 + t].crop(0, 0, 8, 8));
            assert_eq!(b.prior[t], seqs[0].mmp[1 + t].crop(0, 0, 8, 8));
        }
    }

    #[test]
    fn horizontal_flip_definition() {
        let raw = seq(1, 6, 6, 2).blur[0].clone();
        let t = Transform { hflip: true, ..Transform::default() };
        let f = t.apply(&raw);
        for y in 0..6 {
            for x in 0..6 {
                assert_eq!(f.at(0, 1, y, x), raw.at(0, 1, y, 5 - x));
            }
        }
        let r = Transform { rot90: true, ..Transform::default() }.apply(&raw);
        let four = (0..3).fold(r.clone(), |a, _| Transform { rot90: true, ..Transform::default() }.apply(&a));
        assert_eq!(four, raw);
        assert_ne!(r, raw);
    }

    #[test]
    fn augmentation_keeps_triples_aligned() {
        let mut s = seq(5, 16, 16, 3);
        s.sharp = s.blur.clone();
        s.mmp = s.blur.iter().map(|b| b.channels(0, 1)).collect();
        let seqs = vec![s];
        let cfg = TrainConfig { batch_size: 4, patch_size: 8, seq_len_train: 3, ..TrainConfig::deblur() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let b = sample_batch(&seqs, &[seqs[0].mmp.clone()], &cfg, &mut rng).unwrap();
            for t in 0..3 {
                assert!(psnr(&b.blur[t], &b.sharp[t]).unwrap().is_infinite());
                assert_eq!(b.blur[t].channels(0, 1), b.prior[t]);
            }
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let seqs = vec![seq(8, 16, 16, 5), seq(3, 16, 16, 6)];
        let cfg = TrainConfig { batch_size: 3, patch_size: 8, seq_len_train: 5, ..TrainConfig::deblur() };
        let a = sample_batch(&seqs, &[], &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_batch(&seqs, &[], &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.blur.len(), 5);
        assert_eq!(a.blur[0].shape(), Shape::new(3, 3, 8, 8));
        let too_long = TrainConfig { seq_len_train: 9, ..cfg.clone() };
        assert!(sample_batch(&seqs, &[], &too_long, &mut ChaCha8Rng::seed_from_u64(9)).is_err());
        let too_big = TrainConfig { patch_size: 32, ..cfg };
        assert!(sample_batch(&seqs, &[], &too_big, &mut ChaCha8Rng::seed_from_u64(9)).is_err());
    }

    #[test]
    fn nine_ablation_variants() {
        let v = ablation_variants(&NetConfig::new(1, 1, 4, 5), &LossWeights::default());
        assert_eq!(v.len(), 9);
        assert_eq!(v.iter().filter(|x| x.group == AblationGroup::Components).count(), 4);
        let ndf = &v[3];
        assert!(!ndf.net.ndf && !ndf.net.mmam && ndf.loss.lambda2 == 0.0);
        let none = v.iter().find(|x| x.tag == "V:none").unwrap();
        assert!(!none.net.mmam && none.prior == PriorSource::None);
        for x in &v {
            assert!(needs_mmpnet(&x.net, &TrainConfig { prior: x.prior, ..TrainConfig::deblur() }, &x.loss).is_ok());
        }
    }

    #[test]
    fn prior_consistency_is_enforced() {
        let t = TrainConfig { prior: PriorSource::None, ..TrainConfig::deblur() };
        assert!(needs_mmpnet(&NetConfig::default(), &t, &LossWeights::default()).is_err());
        let t = TrainConfig { prior: PriorSource::Gt, ..TrainConfig::deblur() };
        let l = LossWeights { lambda2: 0.0, ..LossWeights::default() };
        assert!(!needs_mmpnet(&NetConfig::default(), &t, &l).unwrap());
    }

    #[test]
    fn zero_mmp_epochs_returns_initial_params() {
        let dir = tempfile::tempdir().unwrap();
        let setup = MmpSetup {
            net: MmpNetConfig { base_channels: 4, levels: 1, rdb_layers: 1, rdb_growth: 2, bottleneck_convs: 0 },
            train: TrainConfig { epochs: 0, patch_size: 8, ..TrainConfig::mmpnet() },
            out_dir: dir.path().join("run"),
            seed: 3,
            resume: None,
            config_echo: serde_json::Value::Null,
        };
        let out = train_mmpnet(&setup, &[seq(2, 8, 8, 1)], &[]).unwrap();
        let init = MmpNet::<f32>::new(setup.net, derive_seed(3, "init", 0)).unwrap();
        for ((_, _, a), (_, _, b)) in out.net.params().iter().zip(init.params().iter()) {
            assert_eq!(a, b);
        }
        assert!(!setup.out_dir.exists());
    }

    #[test]
    fn zero_deblur_epochs_writes_initial_checkpoint_only() {
        let dir = tempfile::tempdir().unwrap();
        let setup = DeblurSetup {
            net: NetConfig { n_a: 1, n_b: 1, n_c: 4, frames: 5, mmam: false, ..NetConfig::default() },
            train: TrainConfig { epochs: 0, patch_size: 8, seq_len_train: 5, prior: PriorSource::None, ..TrainConfig::deblur() },
            loss: LossWeights { lambda2: 0.0, ..LossWeights::default() },
            mmpnet: None,
            out_dir: dir.path().to_path_buf(),
            seed: 1,
            resume: None,
            config_echo: serde_json::json!({}),
        };
        let out = train_deblur(&setup, &[seq(6, 8, 8, 1)], &[]).unwrap();
        assert!(out.metrics.is_empty());
        assert_eq!(list_checkpoints(dir.path()).unwrap().len(), 1);
        assert!(out.last_checkpoint.ends_with("ckpt_epoch0000"));
    }

    #[test]
    fn missing_mmpnet_is_rejected_at_startup() {
        let dir = tempfile::tempdir().unwrap();
        let setup = DeblurSetup {
            net: NetConfig { n_a: 1, n_b: 1, n_c: 4, frames: 5, ..NetConfig::default() },
            train: TrainConfig { epochs: 1, patch_size: 8, seq_len_train: 5, ..TrainConfig::deblur() },
            loss: LossWeights::default(),
            mmpnet: None,
            out_dir: dir.path().to_path_buf(),
            seed: 1,
            resume: None,
            config_echo: serde_json::json!({}),
        };
        assert!(train_deblur(&setup, &[seq(6, 8, 8, 1)], &[]).is_err());
        assert!(list_checkpoints(dir.path()).unwrap().is_empty());
    }
}
