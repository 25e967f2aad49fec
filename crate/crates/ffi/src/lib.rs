//! C ABI over the depthflow models.
//!
//! Every function returns a [`DfStatus`]; on failure the thread-local
//! message from [`df_last_error`] describes the cause. Handles are opaque
//! and must be released with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use depthflow::checkpoint::Persist;
use depthflow::scout::{scout_and_refine, Scorer, ScorerKind, ScoutConfig};
use depthflow::student::SltParams;
use depthflow::teacher::{FlowMapModel, ToyDistribution};
use depthflow::{Error, Tensor};

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DfStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidInput = 2,
    Dimension = 3,
    Format = 4,
    Version = 5,
    Io = 6,
    Config = 7,
    Numeric = 8,
    Panic = 9,
}

/// One-step flow-map teacher.
pub struct DfTeacher(FlowMapModel<f32>);

/// Shared-block student.
pub struct DfStudent(SltParams<f32>);

/// Gaussian mixture used by the sample-space scorers.
pub struct DfMixture(ToyDistribution);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<Vec<u8>>) {
    let msg = CString::new(msg).unwrap_or_else(|_| c"error message contained NUL".into());
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(err: &Error) -> DfStatus {
    match err {
        Error::Dimension { .. } => DfStatus::Dimension,
        Error::Input(_) | Error::Contract(_) | Error::Scoring(_) => DfStatus::InvalidInput,
        Error::NonFinite(_) | Error::Training { .. } => DfStatus::Numeric,
        Error::Format(_) | Error::Json(_) | Error::Csv(_) => DfStatus::Format,
        Error::Version { .. } => DfStatus::Version,
        Error::Io(_) | Error::Dependency(_) => DfStatus::Io,
        Error::Config(_) => DfStatus::Config,
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (DfStatus, String)>) -> DfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DfStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DfStatus::Panic
        }
    }
}

fn lib<T>(r: depthflow::Result<T>) -> Result<T, (DfStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (DfStatus, String) {
    (DfStatus::NullArgument, format!("`{what}` is null"))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, (DfStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (DfStatus::InvalidInput, "path is not UTF-8".to_string()))?;
    Ok(Path::new(s))
}

unsafe fn batch_arg(
    z: *const f32,
    n: usize,
    dim: usize,
) -> Result<Tensor<f32>, (DfStatus, String)> {
    if z.is_null() {
        return Err(null("z"));
    }
    if n == 0 || dim == 0 {
        return Err((DfStatus::InvalidInput, "n and dim must be positive".into()));
    }
    let data = std::slice::from_raw_parts(z, n * dim).to_vec();
    lib(Tensor::new(vec![n, dim], data))
}

unsafe fn write_out(out: *mut f32, x: &Tensor<f32>) -> Result<(), (DfStatus, String)> {
    if out.is_null() {
        return Err(null("out"));
    }
    std::ptr::copy_nonoverlapping(x.data().as_ptr(), out, x.numel());
    Ok(())
}

/// Message describing the last failure on this thread. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn df_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn df_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a flow-map checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn df_teacher_load(
    path: *const c_char,
    out: *mut *mut DfTeacher,
) -> DfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = lib(FlowMapModel::<f32>::load(path_arg(path)?))?;
        *out = Box::into_raw(Box::new(DfTeacher(model)));
        Ok(())
    })
}

/// # Safety
/// `teacher` must come from [`df_teacher_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn df_teacher_free(teacher: *mut DfTeacher) {
    if !teacher.is_null() {
        drop(Box::from_raw(teacher));
    }
}

/// Data dimension of the teacher, or 0 for a null handle.
///
/// # Safety
/// `teacher` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn df_teacher_data_dim(teacher: *const DfTeacher) -> usize {
    teacher
        .as_ref()
        .map_or(0, |t| t.0.backbone().config().data_dim)
}

/// Loads a student checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn df_student_load(
    path: *const c_char,
    out: *mut *mut DfStudent,
) -> DfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = lib(SltParams::<f32>::load(path_arg(path)?))?;
        *out = Box::into_raw(Box::new(DfStudent(model)));
        Ok(())
    })
}

/// # Safety
/// `student` must come from [`df_student_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn df_student_free(student: *mut DfStudent) {
    if !student.is_null() {
        drop(Box::from_raw(student));
    }
}

/// Equal-weight ring of `components` 2-D Gaussians.
///
/// # Safety
/// `out` must be a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn df_mixture_ring(
    components: usize,
    radius: f64,
    scale: f64,
    out: *mut *mut DfMixture,
) -> DfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let dist = lib(ToyDistribution::ring(components, radius, scale))?;
        *out = Box::into_raw(Box::new(DfMixture(dist)));
        Ok(())
    })
}

/// # Safety
/// `mixture` must come from [`df_mixture_ring`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn df_mixture_free(mixture: *mut DfMixture) {
    if !mixture.is_null() {
        drop(Box::from_raw(mixture));
    }
}

/// Teacher one-step samples for `n` row-major noises of width `dim`, all
/// with class `label` and guidance `w`. Writes `n * dim` floats to `out`.
///
/// # Safety
/// `z` must hold `n * dim` floats and `out` room for as many.
#[no_mangle]
pub unsafe extern "C" fn df_teacher_sample(
    teacher: *const DfTeacher,
    z: *const f32,
    n: usize,
    dim: usize,
    label: u32,
    w: f32,
    out: *mut f32,
) -> DfStatus {
    guard(|| {
        let t = teacher.as_ref().ok_or_else(|| null("teacher"))?;
        let z = batch_arg(z, n, dim)?;
        let x = lib(t.0.one_step(&z, &vec![label as usize; n], &vec![w; n]))?;
        write_out(out, &x)
    })
}

/// Student previews, laid out like [`df_teacher_sample`].
///
/// # Safety
/// `z` must hold `n * dim` floats and `out` room for as many.
#[no_mangle]
pub unsafe extern "C" fn df_student_preview(
    student: *const DfStudent,
    z: *const f32,
    n: usize,
    dim: usize,
    label: u32,
    w: f32,
    out: *mut f32,
) -> DfStatus {
    guard(|| {
        let s = student.as_ref().ok_or_else(|| null("student"))?;
        let z = batch_arg(z, n, dim)?;
        let x = lib(s.0.one_step(&z, &vec![label as usize; n], &vec![w; n]))?;
        write_out(out, &x)
    })
}

/// Sample-space scorer selector for [`df_scout_and_refine`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DfScorer {
    Oracle = 0,
    NearestMean = 1,
    PriorShell = 2,
}

/// Previews `n` seeded noises with the student, scores them, and refines
/// the best with one teacher call. Writes the teacher's data dimension
/// worth of floats to `out_sample` and the chosen index to `out_index`.
///
/// # Safety
/// Handles must be live; `out_sample` must have room for the data dimension.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn df_scout_and_refine(
    student: *const DfStudent,
    teacher: *const DfTeacher,
    mixture: *const DfMixture,
    scorer: DfScorer,
    n: usize,
    label: u32,
    w: f32,
    seed: u64,
    out_sample: *mut f32,
    out_index: *mut usize,
) -> DfStatus {
    guard(|| {
        let s = student.as_ref().ok_or_else(|| null("student"))?;
        let t = teacher.as_ref().ok_or_else(|| null("teacher"))?;
        let m = mixture.as_ref().ok_or_else(|| null("mixture"))?;
        let kind = match scorer {
            DfScorer::Oracle => ScorerKind::Oracle,
            DfScorer::NearestMean => ScorerKind::NearestMean,
            DfScorer::PriorShell => ScorerKind::PriorShell,
        };
        let cfg = ScoutConfig {
            n,
            scorer: kind,
            y: label as usize,
            w: w as f64,
            seed,
        };
        let dim = t.0.backbone().config().data_dim;
        let (x, report) = lib(scout_and_refine(
            &s.0,
            &t.0,
            &Scorer::from_kind(kind, &m.0),
            &cfg,
            dim,
        ))?;
        write_out(out_sample, &x)?;
        if !out_index.is_null() {
            *out_index = report.best;
        }
        Ok(())
    })
}
