//! C ABI over the `gaitlu` library.
//!
//! Every function returns a [`GaitluStatus`]; on failure the message is kept
//! per thread and read with [`gaitlu_last_error`]. Models are opaque handles
//! created by `*_load` and released by the matching `*_free`. Pose buffers are
//! row-major `frames x joints x 2` image coordinates; confidences, when
//! given, are `frames x joints`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use gaitlu::geometry::{apply_view_transform, oracle_view_transform, ProjectionMatrix, ViewTransform};
use gaitlu::hgc::normalized_adjacency;
use gaitlu::lugan::{load_lugan, Lugan};
use gaitlu::nn::losses::supcon;
use gaitlu::nn::Tensor;
use gaitlu::recognizer::{load_recognizer, Recognizer};
use gaitlu::skeleton::{canonical_hypergraphs, PoseSequence, SkeletonTopology};
use gaitlu::Error;
use nalgebra::{Matrix3, Matrix3x4};

/// Result code of every exported function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GaitluStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Bad argument, shape or configuration.
    InvalidArgument = 2,
    /// Unreadable or malformed input data.
    DataError = 3,
    /// Degenerate geometry or a numeric failure.
    NumericError = 4,
    /// The library panicked; the handle involved should be discarded.
    Panic = 5,
}

/// Opaque generator handle.
pub struct GaitluLugan {
    model: Lugan,
}

/// Opaque recognizer handle.
pub struct GaitluRecognizer {
    model: Recognizer,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

enum Failure {
    Null(&'static str),
    Invalid(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type FfiResult<T> = Result<T, Failure>;

fn guard(f: impl FnOnce() -> FfiResult<()>) -> GaitluStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            GaitluStatus::Ok
        }
        Ok(Err(Failure::Null(name))) => {
            set_error(&format!("null pointer: {name}"));
            GaitluStatus::NullPointer
        }
        Ok(Err(Failure::Invalid(msg))) => {
            set_error(&msg);
            GaitluStatus::InvalidArgument
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(&e.to_string());
            match e.exit_code() {
                2 => GaitluStatus::InvalidArgument,
                3 => GaitluStatus::DataError,
                _ => GaitluStatus::NumericError,
            }
        }
        Err(_) => {
            set_error("internal panic");
            GaitluStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, name: &'static str) -> FfiResult<&'a [T]> {
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, name: &'static str) -> FfiResult<&'a mut [T]> {
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn path<'a>(p: *const c_char) -> FfiResult<&'a Path> {
    if p.is_null() {
        return Err(Failure::Null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| Failure::Invalid("path is not UTF-8".into()))?;
    Ok(Path::new(s))
}

unsafe fn pose(xy: *const f64, conf: *const f64, frames: usize, joints: usize) -> FfiResult<PoseSequence> {
    if frames == 0 || joints == 0 {
        return Err(Failure::Invalid("frames and joints must be positive".into()));
    }
    let n = frames * joints;
    let flat = slice(xy, 2 * n, "xy")?;
    let pts: Vec<[f64; 2]> = flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
    let conf = if conf.is_null() { None } else { Some(slice(conf, n, "conf")?.to_vec()) };
    Ok(PoseSequence::from_xy(joints, &pts, conf)?)
}

fn write_xy(seq: &PoseSequence, out: &mut [f64]) {
    for (dst, p) in out.chunks_exact_mut(2).zip(seq.coords()) {
        dst[0] = p[0];
        dst[1] = p[1];
    }
}

/// Null-terminated message of the last failure on this thread, or "" after a
/// success. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn gaitlu_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static null-terminated string.
#[no_mangle]
pub extern "C" fn gaitlu_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Least-squares transform between two row-major 3x4 projection matrices.
/// Writes the row-major 3x3 `q_out` and, if non-null, the fit residual.
///
/// # Safety
/// `m_a` and `m_b` must point to 12 doubles and `q_out` to 9.
#[no_mangle]
pub unsafe extern "C" fn gaitlu_oracle_transform(
    m_a: *const f64,
    m_b: *const f64,
    q_out: *mut f64,
    residual_out: *mut f64,
) -> GaitluStatus {
    guard(|| {
        let a = ProjectionMatrix::new(Matrix3x4::from_row_slice(slice(m_a, 12, "m_a")?))?;
        let b = ProjectionMatrix::new(Matrix3x4::from_row_slice(slice(m_b, 12, "m_b")?))?;
        let out = slice_mut(q_out, 9, "q_out")?;
        let t = oracle_view_transform(&a, &b)?;
        for r in 0..3 {
            for c in 0..3 {
                out[3 * r + c] = t.q[(r, c)];
            }
        }
        if !residual_out.is_null() {
            *residual_out = t.residual;
        }
        Ok(())
    })
}

/// Applies a row-major 3x3 transform to every joint of a pose sequence.
///
/// # Safety
/// `q` must point to 9 doubles; `xy` and `xy_out` to `2 * frames * joints`.
#[no_mangle]
pub unsafe extern "C" fn gaitlu_apply_transform(
    q: *const f64,
    xy: *const f64,
    frames: usize,
    joints: usize,
    xy_out: *mut f64,
) -> GaitluStatus {
    guard(|| {
        let m = Matrix3::from_row_slice(slice(q, 9, "q")?);
        let seq = pose(xy, std::ptr::null(), frames, joints)?;
        let out = slice_mut(xy_out, 2 * frames * joints, "xy_out")?;
        let moved = apply_view_transform(&ViewTransform::from_matrix(m), &seq)?;
        write_xy(&moved, out);
        Ok(())
    })
}

/// Normalized adjacency of the COCO-17 hypergraph of the given order (1 bone
/// graph, 2 parts, 3 body halves), written row-major into a 17x17 buffer.
///
/// # Safety
/// `out` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn gaitlu_adjacency(order: u8, out: *mut f64, len: usize) -> GaitluStatus {
    guard(|| {
        let hs = canonical_hypergraphs(&SkeletonTopology::coco17())?;
        let h = hs
            .iter()
            .find(|h| h.order == order)
            .ok_or_else(|| Failure::Invalid(format!("no hypergraph of order {order}")))?;
        let a = normalized_adjacency(h)?;
        let n = a.nodes();
        if len != n * n {
            return Err(Failure::Invalid(format!("adjacency needs {} doubles, got {len}", n * n)));
        }
        slice_mut(out, len, "out")?.copy_from_slice(a.row_major());
        Ok(())
    })
}

/// Supervised contrastive loss of `n` L2-normalized `d`-dimensional rows.
/// When `grad_out` is non-null it receives the `n x d` gradient.
///
/// # Safety
/// `features` and `grad_out` must point to `n * d` doubles, `labels` to `n`.
#[no_mangle]
pub unsafe extern "C" fn gaitlu_supcon_loss(
    features: *const f64,
    labels: *const usize,
    n: usize,
    d: usize,
    tau: f64,
    loss_out: *mut f64,
    grad_out: *mut f64,
) -> GaitluStatus {
    guard(|| {
        let f = Tensor::new(&[n, d], slice(features, n * d, "features")?.to_vec());
        let labels = slice(labels, n, "labels")?;
        if loss_out.is_null() {
            return Err(Failure::Null("loss_out"));
        }
        let (loss, grad) = supcon(&f, labels, tau)?;
        *loss_out = loss;
        if !grad_out.is_null() {
            slice_mut(grad_out, n * d, "grad_out")?.copy_from_slice(&grad.data);
        }
        Ok(())
    })
}

/// Loads a generator checkpoint into a new handle.
///
/// # Safety
/// `path` must be a null-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gaitlu_lugan_load(path_c: *const c_char, out: *mut *mut GaitluLugan) -> GaitluStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let (model, _, _) = load_lugan(path(path_c)?)?;
        *out = Box::into_raw(Box::new(GaitluLugan { model }));
        Ok(())
    })
}

/// Releases a generator handle. Null is ignored.
///
/// # Safety
/// `h` must come from [`gaitlu_lugan_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gaitlu_lugan_free(h: *mut GaitluLugan) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Generates the sequence seen from view `beta_degrees`. Writes the pose into
/// `xy_out` and, if non-null, the row-major pixel-space transform into `q_out`.
///
/// # Safety
/// Buffers must hold `2 * frames * joints` (`xy`, `xy_out`),
/// `frames * joints` (`conf`, may be null) and 9 (`q_out`) doubles.
#[no_mangle]
pub unsafe extern "C" fn gaitlu_lugan_generate(
    h: *const GaitluLugan,
    xy: *const f64,
    conf: *const f64,
    frames: usize,
    joints: usize,
    beta_degrees: f64,
    xy_out: *mut f64,
    q_out: *mut f64,
) -> GaitluStatus {
    guard(|| {
        let h = h.as_ref().ok_or(Failure::Null("handle"))?;
        let seq = pose(xy, conf, frames, joints)?;
        let out = slice_mut(xy_out, 2 * frames * joints, "xy_out")?;
        let (generated, q) = h.model.generate_pose(&seq, beta_degrees)?;
        write_xy(&generated, out);
        if !q_out.is_null() {
            let qo = slice_mut(q_out, 9, "q_out")?;
            for r in 0..3 {
                for c in 0..3 {
                    qo[3 * r + c] = q.q[(r, c)];
                }
            }
        }
        Ok(())
    })
}

/// Loads a recognizer checkpoint into a new handle.
///
/// # Safety
/// `path` must be a null-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gaitlu_recognizer_load(path_c: *const c_char, out: *mut *mut GaitluRecognizer) -> GaitluStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let (model, _) = load_recognizer(path(path_c)?)?;
        *out = Box::into_raw(Box::new(GaitluRecognizer { model }));
        Ok(())
    })
}

/// Releases a recognizer handle. Null is ignored.
///
/// # Safety
/// `h` must come from [`gaitlu_recognizer_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gaitlu_recognizer_free(h: *mut GaitluRecognizer) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Embedding length and the number of view sequences the recognizer expects
/// (zero for the single-view baseline).
///
/// # Safety
/// `h` must be a live handle; the outputs may be null.
#[no_mangle]
pub unsafe extern "C" fn gaitlu_recognizer_info(
    h: *const GaitluRecognizer,
    embedding_dim: *mut usize,
    view_count: *mut usize,
) -> GaitluStatus {
    guard(|| {
        let h = h.as_ref().ok_or(Failure::Null("handle"))?;
        let c = &h.model.config;
        if !embedding_dim.is_null() {
            *embedding_dim = c.embedding_dim();
        }
        if !view_count.is_null() {
            *view_count = if c.has_generative_branch() { c.view_list.len() } else { 0 };
        }
        Ok(())
    })
}

/// Embeds a source sequence. `views_xy` holds `view_count` sequences of the
/// same shape, one per configured view, laid out back to back.
///
/// # Safety
/// `xy` must hold `2 * frames * joints` doubles, `views_xy` that times
/// `view_count` (may be null when zero) and `out` `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn gaitlu_recognizer_embed(
    h: *const GaitluRecognizer,
    xy: *const f64,
    frames: usize,
    joints: usize,
    views_xy: *const f64,
    view_count: usize,
    out: *mut f64,
    out_len: usize,
) -> GaitluStatus {
    guard(|| {
        let h = h.as_ref().ok_or(Failure::Null("handle"))?;
        let source = pose(xy, std::ptr::null(), frames, joints)?;
        let per = 2 * frames * joints;
        if view_count > 0 && views_xy.is_null() {
            return Err(Failure::Null("views_xy"));
        }
        let views = (0..view_count)
            .map(|v| pose(views_xy.wrapping_add(v * per), std::ptr::null(), frames, joints))
            .collect::<FfiResult<Vec<_>>>()?;
        let e = h.model.embed_sequences(&source, &views)?;
        if out_len != e.len() {
            return Err(Failure::Invalid(format!("embedding has {} values, buffer {out_len}", e.len())));
        }
        slice_mut(out, out_len, "out")?.copy_from_slice(&e);
        Ok(())
    })
}
