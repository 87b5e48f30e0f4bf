//! Command-line entry point behind the `mmp-deblur` binary.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use crate::config::RunConfig;
use crate::datagen::{build_dataset, load_frame_dir, load_split, read_manifest, SequenceData, MANIFEST};
use crate::error::{Error, IoContext, Result};
use crate::evalsuite::{
    evaluate_model, loss_curves, measure_runtime, parse_tsv, psnr, psnr_gmacs_plot, ssim, write_report, EvalModel,
    MetricsReport,
};
use crate::image_io::{frame_name, is_image, write_frame, write_map16};
use crate::mmpnet::MmpNet;
use crate::mmprnn::{rnn_macs, rnn_param_count};
use crate::model::{load_prior_net, DeblurModel};
use crate::trainer::{
    ablation_variants, needs_mmpnet, train_deblur, train_mmpnet, AblationGroup, DeblurSetup, MmpSetup,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "mmp-deblur", version, about = "Motion-magnitude-prior guided video deblurring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override a configuration key; bare keys refer to the command's own section.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PlotFormat {
    Svg,
    Png,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesise blurry frames and motion-magnitude maps from sharp sequences.
    Datagen {
        #[command(flatten)]
        common: Common,
        /// Directory of sharp sequences.
        #[arg(long)]
        raw: Option<PathBuf>,
    },
    /// Train MMP-Net.
    TrainMmp {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the recurrent deblurring network.
    TrainDeblur {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        mmp_checkpoint: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a deblurring checkpoint on a dataset split or a frame directory.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Deblur a directory of frames and write the estimated maps.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and score every ablation variant.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        mmp_checkpoint: Option<PathBuf>,
        /// Restrict to these variant tags.
        #[arg(long)]
        only: Vec<String>,
    },
    /// Draw PSNR-vs-GMACs and training curves.
    Plot {
        #[command(flatten)]
        common: Common,
        /// `report.tsv` from `eval` or `ablate`.
        #[arg(long)]
        report: Option<PathBuf>,
        /// `metrics.tsv` training logs.
        #[arg(long)]
        metrics: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "svg")]
        format: PlotFormat,
    },
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Usage(m),
            e => Failure::Runtime(e),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Datagen { common, .. }
            | Command::TrainMmp { common, .. }
            | Command::TrainDeblur { common, .. }
            | Command::Eval { common, .. }
            | Command::Infer { common, .. }
            | Command::Ablate { common, .. }
            | Command::Plot { common, .. } => common,
        }
    }

    fn section(&self) -> Option<&'static str> {
        match self {
            Command::Datagen { .. } => Some("datagen"),
            Command::TrainMmp { .. } => Some("train_mmp"),
            Command::TrainDeblur { .. } | Command::Ablate { .. } => Some("train"),
            Command::Eval { .. } => Some("eval"),
            Command::Infer { .. } | Command::Plot { .. } => None,
        }
    }
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn set_path(slot: &mut Option<PathBuf>, flag: &Option<PathBuf>) {
    if let Some(p) = flag {
        *slot = Some(p.clone());
    }
}

fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> CliResult<&'a Path> {
    p.as_deref().ok_or_else(|| usage(format!("missing {what}")))
}

fn execute(cmd: Command) -> CliResult<()> {
    let common = cmd.common().clone();
    let mut cfg = RunConfig::resolve(common.config.as_deref(), &common.set, cmd.section())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    set_path(&mut cfg.paths.out, &common.out);
    match &cmd {
        Command::Datagen { raw, .. } => set_path(&mut cfg.paths.raw, raw),
        Command::TrainMmp { data, .. } | Command::Eval { data, .. } => set_path(&mut cfg.paths.data, data),
        Command::TrainDeblur { data, mmp_checkpoint, .. } | Command::Ablate { data, mmp_checkpoint, .. } => {
            set_path(&mut cfg.paths.data, data);
            set_path(&mut cfg.paths.mmp_checkpoint, mmp_checkpoint);
        }
        Command::Infer { checkpoint, .. } => set_path(&mut cfg.paths.deblur_checkpoint, checkpoint),
        Command::Plot { .. } => {}
    }
    if let Command::Eval { checkpoint, .. } = &cmd {
        set_path(&mut cfg.paths.deblur_checkpoint, checkpoint);
    }
    let out = require(&cfg.paths.out, "--out (or paths.out)")?.to_path_buf();
    cfg.echo(&out)?;

    match cmd {
        Command::Datagen { .. } => datagen(&cfg, &out),
        Command::TrainMmp { resume, .. } => train_mmp(&cfg, &out, resume),
        Command::TrainDeblur { resume, .. } => train(&cfg, &out, resume),
        Command::Eval { .. } => eval(&cfg, &out),
        Command::Infer { input, .. } => infer(&cfg, &out, &input),
        Command::Ablate { only, .. } => ablate(&cfg, &out, &only),
        Command::Plot { report, metrics, format, .. } => plot(&out, report.as_deref(), &metrics, format),
    }
}

fn datagen(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let raw = require(&cfg.paths.raw, "--raw (or paths.raw)")?;
    let summary = build_dataset(raw, out, &cfg.datagen, cfg.seed)?;
    println!("{} samples written to {}", summary.samples, out.display());
    for s in &summary.skipped_sequences {
        println!("skipped {s}");
    }
    Ok(())
}

fn load_data(cfg: &RunConfig, split: &str) -> CliResult<Vec<SequenceData>> {
    let root = require(&cfg.paths.data, "--data (or paths.data)")?;
    Ok(load_split(root, split)?)
}

fn train_mmp(cfg: &RunConfig, out: &Path, resume: Option<PathBuf>) -> CliResult<()> {
    let train = load_data(cfg, "train")?;
    let test = load_data(cfg, "test")?;
    let setup = MmpSetup {
        net: cfg.mmpnet,
        train: cfg.train_mmp.clone(),
        out_dir: out.to_path_buf(),
        seed: cfg.seed,
        resume,
        config_echo: cfg.to_json(),
    };
    let outcome = train_mmpnet(&setup, &train, &test)?;
    if let Some(m) = outcome.metrics.last() {
        println!("epoch {}: train L1 {:.5}", m.epoch, m.train_l1);
    }
    Ok(())
}

fn load_mmp_checkpoint(cfg: &RunConfig) -> CliResult<Option<MmpNet<f32>>> {
    match &cfg.paths.mmp_checkpoint {
        None => Ok(None),
        Some(p) => Ok(Some(load_prior_net(p, cfg.mmpnet)?)),
    }
}

fn validation_split(cfg: &RunConfig) -> CliResult<Vec<SequenceData>> {
    let val = load_data(cfg, "val")?;
    if val.is_empty() {
        load_data(cfg, "test")
    } else {
        Ok(val)
    }
}

fn train(cfg: &RunConfig, out: &Path, resume: Option<PathBuf>) -> CliResult<()> {
    let mmpnet = load_mmp_checkpoint(cfg)?;
    if needs_mmpnet(&cfg.net, &cfg.train, &cfg.loss)? && mmpnet.is_none() {
        return Err(usage("this configuration needs --mmp-checkpoint (or paths.mmp_checkpoint)"));
    }
    let train = load_data(cfg, "train")?;
    let val = validation_split(cfg)?;
    let setup = DeblurSetup {
        net: cfg.net,
        train: cfg.train.clone(),
        loss: cfg.loss,
        mmpnet: mmpnet.as_ref(),
        out_dir: out.to_path_buf(),
        seed: cfg.seed,
        resume,
        config_echo: cfg.to_json(),
    };
    let outcome = train_deblur(&setup, &train, &val)?;
    println!("last checkpoint: {}", outcome.last_checkpoint.display());
    Ok(())
}

fn load_deblur(cfg: &RunConfig) -> CliResult<DeblurModel> {
    let path = require(&cfg.paths.deblur_checkpoint, "--checkpoint (or paths.deblur_checkpoint)")?;
    Ok(DeblurModel::load(path)?)
}

/// Sequences from a generated dataset split, or plain frame directories.
fn eval_sequences(root: &Path, split: &str) -> CliResult<(Vec<SequenceData>, bool)> {
    if root.join(MANIFEST).is_file() {
        read_manifest(root)?;
        return Ok((load_split(root, split)?, true));
    }
    let has_images = fs::read_dir(root).at(root)?.filter_map(|e| e.ok()).any(|e| is_image(&e.path()));
    if has_images {
        return Ok((vec![load_frame_dir(root)?], false));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root).at(root)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    dirs.sort();
    Ok((dirs.iter().map(|d| load_frame_dir(d)).collect::<Result<_>>()?, false))
}

fn blurry_baseline(seqs: &[SequenceData]) -> Result<Option<MetricsReport>> {
    let (mut p, mut s) = (Vec::new(), Vec::new());
    for seq in seqs.iter().filter(|s| s.has_sharp() && s.len() >= 5) {
        for t in 2..seq.len() - 2 {
            let v = psnr(&seq.sharp[t], &seq.blur[t])?;
            if v.is_finite() {
                p.push(v);
            }
            s.push(ssim(&seq.sharp[t], &seq.blur[t])?);
        }
    }
    if s.is_empty() {
        return Ok(None);
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(Some(MetricsReport {
        model: "blurry-input".into(),
        psnr: mean(&p),
        ssim: mean(&s),
        gmacs: 0.0,
        params_m: 0.0,
        time_s: None,
        frames_scored: s.len(),
    }))
}

fn eval(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let loaded = load_deblur(cfg)?;
    let root = require(&cfg.paths.data, "--data (or paths.data)")?;
    let (seqs, from_dataset) = eval_sequences(root, &cfg.eval.split)?;
    if seqs.is_empty() {
        return Err(Failure::Runtime(Error::invalid(format!("no `{}` sequences under {}", cfg.eval.split, root.display()))));
    }
    let with_refs = seqs.iter().any(|s| s.has_sharp());
    if !with_refs {
        println!("no sharp references: inference only, metric columns are NA");
    }
    let model = loaded.eval_model(&loaded.config.net.to_string(), from_dataset)?;
    let (mut report, restored) = evaluate_model(&model, &seqs)?;
    if cfg.eval.runtime {
        let (h, w) = seqs[0].dims();
        let (h, w) = (cfg.eval.runtime_height.unwrap_or(h), cfg.eval.runtime_width.unwrap_or(w));
        report.time_s = Some(measure_runtime(&model, h, w, cfg.eval.warmup_frames, cfg.eval.timed_frames)?);
        info!("runtime measured at {h}×{w}");
    }
    let mut rows = vec![report];
    if let Some(b) = blurry_baseline(&seqs)? {
        rows.push(b);
    }
    write_report(out, &rows)?;
    if cfg.eval.save_outputs {
        for (seq, outs) in seqs.iter().zip(&restored) {
            let dir = out.join("frames").join(&seq.seq_id);
            fs::create_dir_all(&dir).at(&dir)?;
            for (t, o) in outs.iter().enumerate() {
                if let Some(o) = o {
                    write_frame(&dir.join(frame_name(t)), o)?;
                }
            }
        }
    }
    print!("{}", fs::read_to_string(out.join("report.md")).at(out.join("report.md"))?);
    Ok(())
}

fn infer(cfg: &RunConfig, out: &Path, input: &Path) -> CliResult<()> {
    let loaded = load_deblur(cfg)?;
    let seq = load_frame_dir(input)?;
    let restored = loaded.deblur_frames(&seq.blur)?;
    let frames_dir = out.join("frames");
    fs::create_dir_all(&frames_dir).at(&frames_dir)?;
    let mut written = 0;
    for (t, o) in restored.iter().enumerate() {
        if let Some(o) = o {
            write_frame(&frames_dir.join(frame_name(t)), o)?;
            written += 1;
        }
    }
    let mut maps = 0;
    if let Some(net) = &loaded.mmpnet {
        let dir = out.join("mmp");
        fs::create_dir_all(&dir).at(&dir)?;
        for (t, f) in seq.blur.iter().enumerate() {
            write_map16(&dir.join(frame_name(t)), &net.forward(f)?)?;
            maps += 1;
        }
    }
    println!("{written} restored frames, {maps} motion-magnitude maps written to {}", out.display());
    Ok(())
}

fn slug(tag: &str) -> String {
    let s: String = tag.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' }).collect();
    s.trim_matches('_').to_string()
}

fn ablate(cfg: &RunConfig, out: &Path, only: &[String]) -> CliResult<()> {
    let variants: Vec<_> = ablation_variants(&cfg.net, &cfg.loss)
        .into_iter()
        .filter(|v| only.is_empty() || only.iter().any(|o| o == v.tag || *o == slug(v.tag)))
        .collect();
    if variants.is_empty() {
        return Err(usage(format!("no ablation variant matches {only:?}")));
    }
    let mmpnet = load_mmp_checkpoint(cfg)?;
    for v in &variants {
        let t = crate::trainer::TrainConfig { prior: v.prior, ..cfg.train.clone() };
        if needs_mmpnet(&v.net, &t, &v.loss)? && mmpnet.is_none() {
            return Err(usage(format!("variant `{}` needs --mmp-checkpoint (or paths.mmp_checkpoint)", v.tag)));
        }
    }
    let train = load_data(cfg, "train")?;
    let val = validation_split(cfg)?;
    let test = load_data(cfg, "test")?;
    let mut rows = Vec::new();
    for v in &variants {
        let mut vcfg = cfg.clone();
        vcfg.net = v.net;
        vcfg.loss = v.loss;
        vcfg.train.prior = v.prior;
        let dir = out.join(slug(v.tag));
        vcfg.echo(&dir)?;
        let setup = DeblurSetup {
            net: v.net,
            train: vcfg.train.clone(),
            loss: v.loss,
            mmpnet: mmpnet.as_ref(),
            out_dir: dir,
            seed: cfg.seed,
            resume: None,
            config_echo: vcfg.to_json(),
        };
        let trained = train_deblur(&setup, &train, &val)?;
        let model = EvalModel { tag: v.tag.to_string(), rnn: &trained.net, mmpnet: mmpnet.as_ref(), prior: v.prior };
        let report = if test.is_empty() {
            MetricsReport {
                model: v.tag.to_string(),
                psnr: None,
                ssim: None,
                gmacs: model.gmacs(),
                params_m: model.params_m(),
                time_s: None,
                frames_scored: 0,
            }
        } else {
            evaluate_model(&model, &test)?.0
        };
        println!("{}: PSNR {:?}", v.tag, report.psnr);
        rows.push((v.group, report));
    }
    for (group, name) in [(AblationGroup::Components, "components"), (AblationGroup::PriorType, "prior_type")] {
        let reports: Vec<MetricsReport> = rows.iter().filter(|(g, _)| *g == group).map(|(_, r)| r.clone()).collect();
        if !reports.is_empty() {
            write_report(&out.join(name), &reports)?;
        }
    }
    let full = rnn_macs(&crate::mmprnn::NetConfig { mmam: true, ndf: true, ..cfg.net }, 720, 1280, None);
    for v in variants.iter().filter(|v| v.group == AblationGroup::Components) {
        println!(
            "{:<16} {:>8.2} GMACs ({:+.2} vs full) {:>6.3}M params",
            v.tag,
            rnn_macs(&v.net, 720, 1280, None),
            rnn_macs(&v.net, 720, 1280, None) - full,
            rnn_param_count(&v.net, None) as f64 / 1e6
        );
    }
    Ok(())
}

fn plot(out: &Path, report: Option<&Path>, metrics: &[PathBuf], format: PlotFormat) -> CliResult<()> {
    if report.is_none() && metrics.is_empty() {
        return Err(usage("plot needs --report and/or --metrics"));
    }
    let ext = match format {
        PlotFormat::Svg => "svg",
        PlotFormat::Png => "png",
    };
    if let Some(r) = report {
        let rows = parse_tsv(&fs::read_to_string(r).at(r)?)?;
        let path = out.join(format!("psnr_gmacs.{ext}"));
        psnr_gmacs_plot(&rows).save(&path)?;
        println!("{}", path.display());
    }
    for m in metrics {
        let stem = m.parent().and_then(|p| p.file_name()).map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let path = out.join(if stem.is_empty() { format!("loss_curves.{ext}") } else { format!("loss_curves_{}.{ext}", slug(&stem)) });
        loss_curves(&fs::read_to_string(m).at(m)?)?.save(&path)?;
        println!("{}", path.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(run(["mmp-deblur", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["mmp-deblur", "plot"]), EXIT_USAGE);
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(run(["mmp-deblur", "plot", "--out", out, "--set", "net.bogus=3"]), EXIT_USAGE);
        assert_eq!(run(["mmp-deblur", "plot", "--out", out]), EXIT_USAGE);
    }

    #[test]
    fn runtime_errors_exit_with_two() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        let code = run(["mmp-deblur", "datagen", "--raw", "/nonexistent/raw", "--out", out.to_str().unwrap()]);
        assert_eq!(code, EXIT_RUNTIME);
        assert!(out.join("config.toml").is_file());
    }

    #[test]
    fn slugs_are_path_safe() {
        assert_eq!(slug("-MMAM-L_MM-NDF"), "mmam_l_mm_ndf");
        assert_eq!(slug("II:center-flow"), "ii_center_flow");
    }
}
