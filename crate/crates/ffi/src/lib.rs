//! C ABI for tm-diffuse.
//!
//! Every function returns a [`TmdStatus`]; on failure the message is kept per
//! thread and can be read with [`tmd_last_error`]. Schedules and models are
//! opaque handles released with the matching `*_free`. Matrices are dense, row-major `double` buffers; a batch of
//! windows is `count` consecutive `flows × window_len` matrices.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use ndarray::{Array1, Array2, ArrayView1};
use tm_diffuse::data::{ObservationMask, RoutingMatrix};
use tm_diffuse::denoiser::Checkpoint;
use tm_diffuse::diffusion::NoiseSchedule;
use tm_diffuse::metrics::{mmd2, nmae, nrmse, KernelConfig, Scope};
use tm_diffuse::sampling::{
    em_refine, sample_completion, sample_tomography, sample_unconditional, FlowObservations, GuidanceConfig,
    LinkObservations, RhoMode, SampleOutput,
};
use tm_diffuse::Error;

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TmdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Numeric = 4,
    Checkpoint = 5,
    Io = 6,
    Parse = 7,
    Panic = 8,
}

/// Noise schedule handle.
pub struct TmdSchedule(NoiseSchedule);

/// Trained model handle (denoiser, schedule and normalization).
pub struct TmdModel(Checkpoint);

/// Sampler settings. Obtain defaults from [`tmd_guidance_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct TmdGuidance {
    /// Guidance step size; 0 disables gradient guidance.
    pub rho: f64,
    /// Reverse-step jump size (at least 1).
    pub stride: usize,
    /// EM refinement sweeps after tomography sampling.
    pub em_iters: usize,
    /// Nonzero to overwrite observed entries with noised measurements.
    pub replacement: u8,
    pub seed: u64,
    /// Windows per denoiser call.
    pub batch_size: usize,
    /// Worker threads; results do not depend on it.
    pub jobs: usize,
}

impl From<TmdGuidance> for GuidanceConfig {
    fn from(g: TmdGuidance) -> Self {
        GuidanceConfig {
            rho_mode: RhoMode::Fixed,
            rho_fixed: g.rho,
            stride: g.stride,
            em_iters: g.em_iters,
            replacement: g.replacement != 0,
            seed: g.seed,
            batch_size: g.batch_size,
            jobs: g.jobs,
            ..GuidanceConfig::default()
        }
    }
}

enum Failure {
    Null(&'static str),
    Arg(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type FfiResult<T = ()> = Result<T, Failure>;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> FfiResult) -> TmdStatus {
    let (status, msg) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => return TmdStatus::Ok,
        Ok(Err(Failure::Null(name))) => (TmdStatus::NullPointer, format!("{name} is NULL")),
        Ok(Err(Failure::Arg(msg))) => (TmdStatus::InvalidArgument, msg),
        Ok(Err(Failure::Core(e))) => {
            let status = match &e {
                Error::Parse { .. } => TmdStatus::Parse,
                Error::Validation(_) => TmdStatus::InvalidArgument,
                Error::Shape(_) => TmdStatus::ShapeMismatch,
                Error::Numeric(_) => TmdStatus::Numeric,
                Error::Checkpoint(_) => TmdStatus::Checkpoint,
                Error::Io { .. } => TmdStatus::Io,
            };
            (status, e.to_string())
        }
        Err(_) => (TmdStatus::Panic, "internal panic".to_string()),
    };
    set_last_error(msg);
    status
}

/// # Safety
/// `p` must be NULL or point to `len` readable doubles.
unsafe fn input<'a>(p: *const f64, len: usize, name: &'static str) -> FfiResult<&'a [f64]> {
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must be NULL or point to `len` writable doubles.
unsafe fn output<'a>(p: *mut f64, len: usize, name: &'static str) -> FfiResult<&'a mut [f64]> {
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// # Safety
/// `p` must be NULL or a valid, writable pointer.
unsafe fn out_ref<'a, T>(p: *mut T, name: &'static str) -> FfiResult<&'a mut T> {
    p.as_mut().ok_or(Failure::Null(name))
}

/// # Safety
/// `p` must be NULL or a live handle.
unsafe fn handle<'a, T>(p: *const T, name: &'static str) -> FfiResult<&'a T> {
    p.as_ref().ok_or(Failure::Null(name))
}

fn matrix(data: &[f64], rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), data.to_vec()).expect("length is rows * cols")
}

fn checked_len(dims: &[usize]) -> FfiResult<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Failure::Arg(format!("dimensions {dims:?} overflow")))
}

fn windows(data: &[f64], count: usize, rows: usize, cols: usize) -> Vec<Array2<f64>> {
    data.chunks_exact(rows * cols).take(count).map(|c| matrix(c, rows, cols)).collect()
}

fn write_windows(out: &mut [f64], result: &SampleOutput) {
    for (dst, v) in out.iter_mut().zip(result.windows.iter().flatten()) {
        *dst = *v;
    }
}

/// Message of the last failed call on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn tmd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tmd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Default sampler settings.
#[no_mangle]
pub extern "C" fn tmd_guidance_default() -> TmdGuidance {
    let g = GuidanceConfig::default();
    TmdGuidance {
        rho: g.rho_fixed,
        stride: g.stride,
        em_iters: g.em_iters,
        replacement: u8::from(g.replacement),
        seed: g.seed,
        batch_size: g.batch_size,
        jobs: g.jobs,
    }
}

/// Cosine schedule with `steps` diffusion steps.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn tmd_schedule_cosine(steps: usize, out: *mut *mut TmdSchedule) -> TmdStatus {
    guard(|| {
        let slot = out_ref(out, "out")?;
        *slot = Box::into_raw(Box::new(TmdSchedule(NoiseSchedule::cosine(steps)?)));
        Ok(())
    })
}

/// # Safety
/// `schedule` must be NULL or a handle from [`tmd_schedule_cosine`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tmd_schedule_free(schedule: *mut TmdSchedule) {
    if !schedule.is_null() {
        drop(Box::from_raw(schedule));
    }
}

/// Number of diffusion steps `T`.
///
/// # Safety
/// `schedule` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tmd_schedule_steps(schedule: *const TmdSchedule, out: *mut usize) -> TmdStatus {
    guard(|| {
        *out_ref(out, "out")? = handle(schedule, "schedule")?.0.steps();
        Ok(())
    })
}

/// Cumulative signal level `ᾱ_t` for `t` in `0..=T`.
///
/// # Safety
/// `schedule` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tmd_schedule_alpha_bar(schedule: *const TmdSchedule, t: usize, out: *mut f64) -> TmdStatus {
    guard(|| {
        let s = &handle(schedule, "schedule")?.0;
        if t > s.steps() {
            return Err(Failure::Arg(format!("step {t} outside 0..={}", s.steps())));
        }
        *out_ref(out, "out")? = s.alpha_bar(t);
        Ok(())
    })
}

/// Loads a checkpoint written by `tm-diffuse train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tmd_model_load(path: *const c_char, out: *mut *mut TmdModel) -> TmdStatus {
    guard(|| {
        if path.is_null() {
            return Err(Failure::Null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure::Arg("path is not valid UTF-8".into()))?;
        let slot = out_ref(out, "out")?;
        *slot = Box::into_raw(Box::new(TmdModel(Checkpoint::load(path)?)));
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle from [`tmd_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tmd_model_free(model: *mut TmdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Window shape and step count of a model. Any output pointer may be NULL.
///
/// # Safety
/// `model` must be a live handle; non-NULL outputs must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn tmd_model_shape(
    model: *const TmdModel,
    flows: *mut usize,
    window_len: *mut usize,
    steps: *mut usize,
) -> TmdStatus {
    guard(|| {
        let cfg = handle(model, "model")?.0.denoiser.config();
        for (p, v) in [(flows, cfg.flow_count), (window_len, cfg.window_len), (steps, cfg.diffusion_steps)] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Traffic scale used to normalize the training data, or 0 when unknown.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tmd_model_scale(model: *const TmdModel, out: *mut f64) -> TmdStatus {
    guard(|| {
        *out_ref(out, "out")? = handle(model, "model")?.0.normalization.map_or(0.0, |n| n.scale);
        Ok(())
    })
}

fn window_dims(model: &TmdModel) -> (usize, usize) {
    let cfg = model.0.denoiser.config();
    (cfg.flow_count, cfg.window_len)
}

/// Draws `count` normalized windows into `out` (`count × flows × window_len`).
///
/// # Safety
/// `model` must be a live handle, `guidance` valid, and `out` hold the full batch.
#[no_mangle]
pub unsafe extern "C" fn tmd_sample_unconditional(
    model: *const TmdModel,
    count: usize,
    guidance: *const TmdGuidance,
    out: *mut f64,
) -> TmdStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let g = *handle(guidance, "guidance")?;
        let (n, w) = window_dims(m);
        let out = output(out, checked_len(&[count, n, w])?, "out")?;
        let result = sample_unconditional(&m.0.denoiser, &m.0.schedule, count, &g.into())?;
        write_windows(out, &result);
        Ok(())
    })
}

/// Flows from normalized link loads.
///
/// `routing` is `links × flows`; `loads` is `count` consecutive `links × window_len`
/// matrices; `out` receives `count × flows × window_len` values.
///
/// # Safety
/// All pointers must be valid for the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn tmd_sample_tomography(
    model: *const TmdModel,
    routing: *const f64,
    links: usize,
    loads: *const f64,
    count: usize,
    guidance: *const TmdGuidance,
    out: *mut f64,
) -> TmdStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let g = *handle(guidance, "guidance")?;
        let (n, w) = window_dims(m);
        let a = RoutingMatrix::new(matrix(input(routing, checked_len(&[links, n])?, "routing")?, links, n))?;
        let y = input(loads, checked_len(&[count, links, w])?, "loads")?;
        let out = output(out, checked_len(&[count, n, w])?, "out")?;
        let obs = LinkObservations {
            routing: a,
            loads: windows(y, count, links, w),
        };
        let result = sample_tomography(&m.0.denoiser, &m.0.schedule, obs, &g.into())?;
        write_windows(out, &result);
        Ok(())
    })
}

/// Completes `count` windows from `known` values where `mask` is 1.
/// Observed entries of `out` equal `known` exactly.
///
/// # Safety
/// `known`, `mask` and `out` must each hold `count × flows × window_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn tmd_sample_completion(
    model: *const TmdModel,
    known: *const f64,
    mask: *const f64,
    count: usize,
    guidance: *const TmdGuidance,
    out: *mut f64,
) -> TmdStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let g = *handle(guidance, "guidance")?;
        let (n, w) = window_dims(m);
        let len = checked_len(&[count, n, w])?;
        let flows = FlowObservations {
            known: windows(input(known, len, "known")?, count, n, w),
            masks: windows(input(mask, len, "mask")?, count, n, w),
        };
        let out = output(out, len, "out")?;
        let result = sample_completion(&m.0.denoiser, &m.0.schedule, flows, None, &g.into())?;
        write_windows(out, &result);
        Ok(())
    })
}

/// Multiplicative EM refinement of a nonnegative `x` (length `flows`) towards
/// `routing · x = y`, in place.
///
/// # Safety
/// `x` holds `flows` doubles, `routing` `links × flows`, `y` `links`.
#[no_mangle]
pub unsafe extern "C" fn tmd_em_refine(
    x: *mut f64,
    routing: *const f64,
    y: *const f64,
    links: usize,
    flows: usize,
    iters: usize,
) -> TmdStatus {
    guard(|| {
        let a = RoutingMatrix::new(matrix(input(routing, checked_len(&[links, flows])?, "routing")?, links, flows))?;
        let y = ArrayView1::from(input(y, links, "y")?);
        let x = output(x, flows, "x")?;
        let refined: Array1<f64> = em_refine(ArrayView1::from(&*x), &a, y, iters)?;
        x.copy_from_slice(refined.as_slice().expect("fresh array is contiguous"));
        Ok(())
    })
}

/// # Safety
/// `truth`, `estimate` hold `rows × cols` doubles; `mask` is NULL or the same size.
unsafe fn error_metric(
    truth: *const f64,
    estimate: *const f64,
    mask: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
    f: fn(&Array2<f64>, &Array2<f64>, Scope) -> tm_diffuse::Result<f64>,
) -> TmdStatus {
    guard(|| {
        let len = checked_len(&[rows, cols])?;
        let x = matrix(input(truth, len, "truth")?, rows, cols);
        let xh = matrix(input(estimate, len, "estimate")?, rows, cols);
        let mask = if mask.is_null() {
            None
        } else {
            Some(ObservationMask::new(matrix(input(mask, len, "mask")?, rows, cols))?)
        };
        let scope = mask.as_ref().map_or(Scope::All, Scope::Unobserved);
        *out_ref(out, "out")? = f(&x, &xh, scope)?;
        Ok(())
    })
}

/// Normalized mean absolute error over entries where `mask` is 0, or over
/// every entry when `mask` is NULL.
///
/// # Safety
/// `truth`, `estimate` hold `rows × cols` doubles; `mask` is NULL or the same size.
#[no_mangle]
pub unsafe extern "C" fn tmd_nmae(
    truth: *const f64,
    estimate: *const f64,
    mask: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
) -> TmdStatus {
    error_metric(truth, estimate, mask, rows, cols, out, nmae)
}

/// Normalized root mean squared error, with the same conventions as [`tmd_nmae`].
///
/// # Safety
/// As for [`tmd_nmae`].
#[no_mangle]
pub unsafe extern "C" fn tmd_nrmse(
    truth: *const f64,
    estimate: *const f64,
    mask: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
) -> TmdStatus {
    error_metric(truth, estimate, mask, rows, cols, out, nrmse)
}

/// Unbiased squared MMD between `n` and `m` samples of dimension `dim` (one
/// sample per row). `bandwidth <= 0` selects the median heuristic.
///
/// # Safety
/// `xs` holds `n × dim` doubles and `ys` `m × dim`.
#[no_mangle]
pub unsafe extern "C" fn tmd_mmd2(
    xs: *const f64,
    n: usize,
    ys: *const f64,
    m: usize,
    dim: usize,
    bandwidth: f64,
    out: *mut f64,
) -> TmdStatus {
    guard(|| {
        let a = matrix(input(xs, checked_len(&[n, dim])?, "xs")?, n, dim);
        let b = matrix(input(ys, checked_len(&[m, dim])?, "ys")?, m, dim);
        let k = if bandwidth > 0.0 { KernelConfig::Fixed(bandwidth) } else { KernelConfig::Median };
        *out_ref(out, "out")? = mmd2(&a, &b, k)?;
        Ok(())
    })
}
