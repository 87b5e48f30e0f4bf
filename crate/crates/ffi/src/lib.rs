//! C ABI over `mmp_deblur`.
//!
//! Every fallible call returns an [`MmpStatus`]; on failure the message is
//! available from [`mmp_last_error`] on the same thread. Images are planar
//! `f32` in `[0, 1]`: `count × channels × height × width`, row-major.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use mmp_deblur::datagen::{compute_mmp, WindowFlows};
use mmp_deblur::evalsuite::{psnr, psnr_from_mse, ssim};
use mmp_deblur::flow::{bidirectional_magnitude, FlowField};
use mmp_deblur::losses::{charbonnier, gradient_loss, total_loss, GradientOp, LossWeights};
use mmp_deblur::mmpnet::{mmpnet_macs, mmpnet_param_count, MmpNet, MmpNetConfig};
use mmp_deblur::mmprnn::{rnn_macs, rnn_param_count, NetConfig};
use mmp_deblur::model::{load_prior_net, DeblurModel};
use mmp_deblur::{Error, Shape, Tensor};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MmpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    NonFinite = 5,
    Panic = 6,
}

/// A trained deblurring network (with its prior network when one was trained with it).
pub struct MmpModel {
    inner: DeblurModel,
}

/// A standalone motion-magnitude estimator.
pub struct MmpPriorNet {
    inner: MmpNet<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MmpStatus {
    match e {
        Error::Io { .. } => MmpStatus::Io,
        Error::Image { .. } | Error::Format { .. } => MmpStatus::Format,
        Error::NonFinite { .. } => MmpStatus::NonFinite,
        Error::Invalid(_) | Error::Config(_) => MmpStatus::InvalidArgument,
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

/// Runs `f`, converting errors and panics into a status plus a message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MmpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MmpStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            MmpStatus::NullPointer
        }
        Ok(Err(Fail::Arg(m))) => {
            set_error(m);
            MmpStatus::InvalidArgument
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            MmpStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail::Arg(format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn images(p: *const f32, count: usize, channels: usize, height: usize, width: usize, what: &'static str) -> Result<Vec<Tensor<f32>>, Fail> {
    if count == 0 || channels == 0 || height == 0 || width == 0 {
        return Err(Fail::Arg(format!("{what}: dimensions must be positive")));
    }
    let plane = channels * height * width;
    let data = slice_arg(p, count * plane, what)?;
    Ok(data.chunks_exact(plane).map(|c| Tensor::from_vec(Shape::new(1, channels, height, width), c.to_vec())).collect())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mmp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or NULL. Valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn mmp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a deblurring checkpoint. On success `*out` owns a handle to free with [`mmp_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mmp_model_load(path: *const c_char, out: *mut *mut MmpModel) -> MmpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = PathBuf::from(str_arg(path, "path")?);
        let inner = DeblurModel::load(&path)?;
        *out = Box::into_raw(Box::new(MmpModel { inner }));
        Ok(())
    })
}

/// Releases a model; NULL is ignored.
///
/// # Safety
/// `model` must come from [`mmp_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mmp_model_free(model: *mut MmpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Frames per processing window; 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mmp_model_window(model: *const MmpModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.rnn.config().frames)
}

/// Whether the checkpoint embeds a prior network.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mmp_model_has_prior_net(model: *const MmpModel) -> bool {
    model.as_ref().is_some_and(|m| m.inner.mmpnet.is_some())
}

/// Deblurs `count ≥ 5` RGB frames. Writes `count − 4` restored frames (for
/// input frames `2 … count − 3`) to `out`, which must hold
/// `(count − 4)·3·height·width` floats.
///
/// # Safety
/// Pointers must be valid for the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn mmp_model_deblur(
    model: *const MmpModel,
    frames: *const f32,
    count: usize,
    height: usize,
    width: usize,
    out: *mut f32,
    out_len: usize,
) -> MmpStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        if count < 5 {
            return Err(Fail::Arg(format!("{count} frames given, at least 5 are needed")));
        }
        let need = (count - 4) * 3 * height * width;
        if out_len < need {
            return Err(Fail::Arg(format!("output buffer holds {out_len} floats, {need} needed")));
        }
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let input = images(frames, count, 3, height, width, "frames")?;
        let restored = m.inner.deblur_frames(&input)?;
        let dst = std::slice::from_raw_parts_mut(out, need);
        let plane = 3 * height * width;
        for (i, o) in restored[2..count - 2].iter().enumerate() {
            let o = o.as_ref().ok_or_else(|| Fail::Arg(format!("frame {} has no output", i + 2)))?;
            dst[i * plane..(i + 1) * plane].copy_from_slice(o.data());
        }
        Ok(())
    })
}

/// Estimates the motion-magnitude map of one RGB frame with the embedded prior network.
/// `out` must hold `height·width` floats.
///
/// # Safety
/// Pointers must be valid for the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn mmp_model_estimate_prior(
    model: *const MmpModel,
    frame: *const f32,
    height: usize,
    width: usize,
    out: *mut f32,
) -> MmpStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        let input = images(frame, 1, 3, height, width, "frame")?;
        let map = m.inner.estimate_prior(&input[0])?;
        write_out(out, map.data())
    })
}

unsafe fn write_out(out: *mut f32, data: &[f32]) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null("out"));
    }
    std::slice::from_raw_parts_mut(out, data.len()).copy_from_slice(data);
    Ok(())
}

/// Loads an MMP-Net checkpoint (or the prior network embedded in a deblurring one).
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mmp_prior_net_load(path: *const c_char, out: *mut *mut MmpPriorNet) -> MmpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = PathBuf::from(str_arg(path, "path")?);
        let inner = load_prior_net(&path, MmpNetConfig::default())?;
        *out = Box::into_raw(Box::new(MmpPriorNet { inner }));
        Ok(())
    })
}

/// Releases a prior network; NULL is ignored.
///
/// # Safety
/// `net` must come from [`mmp_prior_net_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mmp_prior_net_free(net: *mut MmpPriorNet) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Motion-magnitude map of one RGB frame; `out` must hold `height·width` floats.
///
/// # Safety
/// Pointers must be valid for the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn mmp_prior_net_estimate(
    net: *const MmpPriorNet,
    frame: *const f32,
    height: usize,
    width: usize,
    out: *mut f32,
) -> MmpStatus {
    guard(|| {
        let n = net.as_ref().ok_or(Fail::Null("net"))?;
        let input = images(frame, 1, 3, height, width, "frame")?;
        write_out(out, n.inner.forward(&input[0])?.data())
    })
}

/// Ground-truth motion-magnitude map of a `frames`-frame window from its
/// neighbour flows. `flows` holds `frames − 1` forward fields followed by
/// `frames − 1` backward fields, each as a `u` plane then a `v` plane.
/// `out` must hold `height·width` floats.
///
/// # Safety
/// Pointers must be valid for the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn mmp_motion_prior(
    flows: *const f32,
    frames: usize,
    height: usize,
    width: usize,
    k: f32,
    out: *mut f32,
) -> MmpStatus {
    guard(|| {
        if frames < 2 || height == 0 || width == 0 {
            return Err(Fail::Arg("need at least 2 frames and positive dimensions".into()));
        }
        let plane = height * width;
        let data = slice_arg(flows, 2 * (frames - 1) * 2 * plane, "flows")?;
        let fields: Vec<FlowField> = data
            .chunks_exact(2 * plane)
            .map(|c| FlowField::new(height, width, c[..plane].to_vec(), c[plane..].to_vec()))
            .collect::<Result<_, _>>()?;
        let (forward, backward) = fields.split_at(frames - 1);
        let map = compute_mmp(&WindowFlows { forward: forward.to_vec(), backward: backward.to_vec() }, k)?;
        write_out(out, &map.values)
    })
}

unsafe fn flow_arg(p: *const f32, height: usize, width: usize) -> Result<Option<FlowField>, Fail> {
    if p.is_null() {
        return Ok(None);
    }
    let plane = height * width;
    let d = std::slice::from_raw_parts(p, 2 * plane);
    Ok(Some(FlowField::new(height, width, d[..plane].to_vec(), d[plane..].to_vec())?))
}

/// Per-pixel flow magnitude of one frame: the mean of the magnitudes of the
/// flows toward its previous and next neighbours, or the single one given.
/// Each flow is a `u` plane then a `v` plane; pass NULL for a missing
/// neighbour. `out` must hold `height·width` floats.
///
/// # Safety
/// Non-NULL pointers must be valid for the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn mmp_frame_magnitude(
    to_prev: *const f32,
    to_next: *const f32,
    height: usize,
    width: usize,
    out: *mut f32,
) -> MmpStatus {
    guard(|| {
        if height == 0 || width == 0 {
            return Err(Fail::Arg("dimensions must be positive".into()));
        }
        let prev = flow_arg(to_prev, height, width)?;
        let next = flow_arg(to_next, height, width)?;
        write_out(out, &bidirectional_magnitude(prev.as_ref(), next.as_ref(), 0)?.values)
    })
}

/// PSNR in dB of two images of `len` floats; `+inf` when identical.
///
/// # Safety
/// `a` and `b` must hold `len` floats; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mmp_psnr(a: *const f32, b: *const f32, len: usize, out: *mut f64) -> MmpStatus {
    guard(|| {
        let x = images(a, 1, 1, 1, len, "a")?;
        let y = images(b, 1, 1, 1, len, "b")?;
        *out_arg(out, "out")? = psnr(&x[0], &y[0])?;
        Ok(())
    })
}

/// PSNR in dB of a mean squared error on `[0, 1]` images.
#[no_mangle]
pub extern "C" fn mmp_psnr_from_mse(mse: f64) -> f64 {
    psnr_from_mse(mse)
}

/// Mean SSIM over channels of two `channels×height×width` images.
///
/// # Safety
/// `a` and `b` must hold `channels·height·width` floats; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mmp_ssim(a: *const f32, b: *const f32, channels: usize, height: usize, width: usize, out: *mut f64) -> MmpStatus {
    guard(|| {
        let x = images(a, 1, channels, height, width, "a")?;
        let y = images(b, 1, channels, height, width, "b")?;
        *out_arg(out, "out")? = ssim(&x[0], &y[0])?;
        Ok(())
    })
}

/// Charbonnier loss of two `channels×height×width` images (channel differences are summed per pixel).
///
/// # Safety
/// `target` and `output` must hold `channels·height·width` floats; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mmp_charbonnier(
    target: *const f32,
    output: *const f32,
    channels: usize,
    height: usize,
    width: usize,
    epsilon: f64,
    out: *mut f32,
) -> MmpStatus {
    guard(|| {
        let t = images(target, 1, channels, height, width, "target")?;
        let o = images(output, 1, channels, height, width, "output")?;
        *out_arg(out, "out")? = charbonnier(&t[0], &o[0], epsilon)?;
        Ok(())
    })
}

/// Image-gradient loss (forward differences) of two `channels×height×width` images.
///
/// # Safety
/// `target` and `output` must hold `channels·height·width` floats; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mmp_gradient_loss(
    target: *const f32,
    output: *const f32,
    channels: usize,
    height: usize,
    width: usize,
    out: *mut f32,
) -> MmpStatus {
    guard(|| {
        let t = images(target, 1, channels, height, width, "target")?;
        let o = images(output, 1, channels, height, width, "output")?;
        *out_arg(out, "out")? = gradient_loss(&t[0], &o[0], GradientOp::Forward)?;
        Ok(())
    })
}

/// `charbonnier + lambda1·gradient_loss` without the motion term (which needs a prior network).
///
/// # Safety
/// `target` and `output` must hold `channels·height·width` floats; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mmp_content_loss(
    target: *const f32,
    output: *const f32,
    channels: usize,
    height: usize,
    width: usize,
    lambda1: f64,
    epsilon: f64,
    out: *mut f64,
) -> MmpStatus {
    guard(|| {
        let t = images(target, 1, channels, height, width, "target")?;
        let o = images(output, 1, channels, height, width, "output")?;
        let w = LossWeights { lambda1, lambda2: 0.0, epsilon, ..LossWeights::default() };
        *out_arg(out, "out")? = total_loss(&t[0], &o[0], None, &w)?.total;
        Ok(())
    })
}

/// GMACs per `height×width` frame and parameter count of a recurrent network
/// given as `A#B#C#F#`, with the default prior network added when `with_prior_net`.
///
/// # Safety
/// `tag` must be a NUL-terminated string; outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn mmp_rnn_complexity(
    tag: *const c_char,
    mmam: bool,
    ndf: bool,
    with_prior_net: bool,
    height: usize,
    width: usize,
    out_gmacs: *mut f64,
    out_params: *mut usize,
) -> MmpStatus {
    guard(|| {
        let cfg: NetConfig = str_arg(tag, "tag")?.parse()?;
        let cfg = NetConfig { mmam, ndf, ..cfg };
        cfg.validate()?;
        let prior = MmpNetConfig::default();
        let prior = with_prior_net.then_some(&prior);
        *out_arg(out_gmacs, "out_gmacs")? = rnn_macs(&cfg, height, width, prior);
        *out_arg(out_params, "out_params")? = rnn_param_count(&cfg, prior);
        Ok(())
    })
}

/// GMACs per `height×width` frame and parameter count of the default prior network.
///
/// # Safety
/// Outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn mmp_prior_net_complexity(height: usize, width: usize, out_gmacs: *mut f64, out_params: *mut usize) -> MmpStatus {
    guard(|| {
        let cfg = MmpNetConfig::default();
        *out_arg(out_gmacs, "out_gmacs")? = mmpnet_macs(&cfg, height, width);
        *out_arg(out_params, "out_params")? = mmpnet_param_count(&cfg);
        Ok(())
    })
}

/// Runs a command-line invocation in-process (`argv[0]` is the program name)
/// and returns its exit code: 0 success, 1 usage error, 2 runtime failure.
///
/// # Safety
/// `argv` must hold `argc` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn mmp_run_cli(argc: c_int, argv: *const *const c_char) -> c_int {
    if argc <= 0 || argv.is_null() {
        set_error("empty argument vector".into());
        return mmp_deblur::cli::EXIT_USAGE;
    }
    let mut args = Vec::with_capacity(argc as usize);
    for i in 0..argc as usize {
        match str_arg(*argv.add(i), "argv") {
            Ok(s) => args.push(s.to_string()),
            Err(_) => {
                set_error(format!("argument {i} is NULL or not UTF-8"));
                return mmp_deblur::cli::EXIT_USAGE;
            }
        }
    }
    catch_unwind(|| mmp_deblur::cli::run(args)).unwrap_or_else(|_| {
        set_error("internal panic".into());
        mmp_deblur::cli::EXIT_RUNTIME
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_pointers_are_reported() {
        let mut out = 0.0f64;
        let s = unsafe { mmp_psnr(ptr::null(), ptr::null(), 4, &mut out) };
        assert_eq!(s, MmpStatus::NullPointer);
        let msg = unsafe { CStr::from_ptr(mmp_last_error()) }.to_str().unwrap();
        assert!(msg.contains('a'), "{msg}");
        let mut m: *mut MmpModel = ptr::null_mut();
        assert_eq!(unsafe { mmp_model_load(ptr::null(), &mut m) }, MmpStatus::NullPointer);
        assert!(m.is_null());
        unsafe { mmp_model_free(ptr::null_mut()) };
        assert_eq!(unsafe { mmp_model_window(ptr::null()) }, 0);
    }

    #[test]
    fn missing_checkpoint_is_an_io_error() {
        let path = CString::new("/nonexistent/ckpt").unwrap();
        let mut m: *mut MmpModel = ptr::null_mut();
        assert_eq!(unsafe { mmp_model_load(path.as_ptr(), &mut m) }, MmpStatus::Io);
        let msg = unsafe { CStr::from_ptr(mmp_last_error()) }.to_str().unwrap();
        assert!(msg.contains("/nonexistent/ckpt"));
    }

    #[test]
    fn metrics_and_losses() {
        let a = [0.1f32, 0.2, 0.3, 0.4];
        let b = [0.2f32, 0.3, 0.4, 0.5];
        let mut p = 0.0;
        assert_eq!(unsafe { mmp_psnr(a.as_ptr(), b.as_ptr(), 4, &mut p) }, MmpStatus::Ok);
        assert!((p - 20.0).abs() < 1e-5);
        let mut c = 0.0f32;
        assert_eq!(unsafe { mmp_charbonnier(a.as_ptr(), a.as_ptr(), 1, 2, 2, 1e-3, &mut c) }, MmpStatus::Ok);
        assert_eq!(c, 0.001);
        assert_eq!(unsafe { mmp_charbonnier(a.as_ptr(), a.as_ptr(), 1, 2, 2, -1.0, &mut c) }, MmpStatus::InvalidArgument);
        let mut m = [0f32; 4];
        assert_eq!(unsafe { mmp_frame_magnitude(ptr::null(), ptr::null(), 2, 2, m.as_mut_ptr()) }, MmpStatus::InvalidArgument);
    }

    #[test]
    fn complexity_rejects_bad_tags() {
        let (mut g, mut p) = (0.0, 0usize);
        let tag = CString::new("A9B10C18F8").unwrap();
        assert_eq!(unsafe { mmp_rnn_complexity(tag.as_ptr(), true, true, true, 720, 1280, &mut g, &mut p) }, MmpStatus::Ok);
        assert!(g > 200.0 && p > 4_000_000);
        let bad = CString::new("nonsense").unwrap();
        assert_eq!(unsafe { mmp_rnn_complexity(bad.as_ptr(), true, true, true, 720, 1280, &mut g, &mut p) }, MmpStatus::InvalidArgument);
    }

    #[test]
    fn cli_usage_error_code() {
        let args = [CString::new("mmp-deblur").unwrap(), CString::new("bogus").unwrap()];
        let ptrs: Vec<*const c_char> = args.iter().map(|a| a.as_ptr()).collect();
        assert_eq!(unsafe { mmp_run_cli(2, ptrs.as_ptr()) }, 1);
    }
}
