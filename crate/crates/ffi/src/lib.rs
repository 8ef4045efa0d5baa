//! C ABI for the unipool library.
//!
//! Models live behind an opaque [`UnipoolModel`] handle. Every function
//! returns a [`UnipoolStatus`]; on failure the message is available from
//! [`unipool_last_error_message`] on the same thread. Panics are caught at
//! the boundary and reported as [`UnipoolStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use unipool::config::KeyValues;
use unipool::models::{build_model, ModelConfig};
use unipool::pooling::PoolMethod;
use unipool::train::{TrainConfig, Trainer};
use unipool::{Error, Precision, Real, Tape, Tensor};

/// Result of every call. Values 1 to 3 match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnipoolStatus {
    Ok = 0,
    /// Invalid argument, configuration or shape.
    Usage = 1,
    /// Unreadable or malformed file.
    Data = 2,
    /// Non-finite values or other numerical failure.
    Numerical = 3,
    /// A required pointer was null.
    NullPointer = 4,
    /// The library panicked; the handle involved should be freed.
    Panic = 5,
}

enum Inner {
    F32(Trainer<f32>),
    F64(Trainer<f64>),
}

/// Opaque model handle.
pub struct UnipoolModel {
    inner: Inner,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

enum Failure {
    Lib(Error),
    Null(&'static str),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> UnipoolStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            UnipoolStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(&format!("{what} is null"));
            UnipoolStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(&e.to_string());
            match e.exit_code() {
                2 => UnipoolStatus::Data,
                3 => UnipoolStatus::Numerical,
                _ => UnipoolStatus::Usage,
            }
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            UnipoolStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Lib(Error::InvalidArgument(format!("{what} is not UTF-8"))))
}

unsafe fn model_ref<'a>(p: *const UnipoolModel) -> Result<&'a UnipoolModel, Failure> {
    p.as_ref().ok_or(Failure::Null("model"))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(
    p: *mut T,
    len: usize,
    what: &'static str,
) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn new_trainer<T: Real>(config: ModelConfig, seed: u64) -> Result<Trainer<T>, Error> {
    let cfg = TrainConfig {
        seed,
        precision: T::PRECISION,
        ..TrainConfig::default()
    };
    Trainer::new(build_model::<T>(config, seed)?, cfg)
}

fn forward<T: Real>(
    t: &Trainer<T>,
    input: &[f64],
    batch: usize,
    logits: &mut [f64],
) -> Result<(), Error> {
    let [c, h, w] = t.model.config.input_shape;
    let x = Tensor::<T>::from_f64(vec![batch, c, h, w], input)?;
    let y = t.model.predict(&x, false)?;
    logits.copy_from_slice(&y.to_f64_vec());
    Ok(())
}

impl UnipoolModel {
    fn config(&self) -> &ModelConfig {
        match &self.inner {
            Inner::F32(t) => &t.model.config,
            Inner::F64(t) => &t.model.config,
        }
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn unipool_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn unipool_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Builds a freshly initialized model from `key = value` text.
///
/// Keys: `arch`, `pool.local`, `pool.global`, `pool.shared`,
/// `model.num_classes`, `model.input_shape` (such as `3 32 32`) and
/// `precision` (`32` or `64`, default 32). Omitted pooling keys default to
/// `max` / `avg`, omitted model keys to 10 classes of 3×32×32 images.
///
/// # Safety
/// `config` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn unipool_model_new(
    config: *const c_char,
    seed: u64,
    out: *mut *mut UnipoolModel,
) -> UnipoolStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let kv = KeyValues::parse(text(config, "config")?)?;
        for k in kv.keys() {
            if !matches!(
                k,
                "arch"
                    | "pool.local"
                    | "pool.global"
                    | "pool.shared"
                    | "model.num_classes"
                    | "model.input_shape"
                    | "precision"
            ) {
                return Err(Error::Config(format!("unknown key {k:?}")).into());
            }
        }
        let mut full = KeyValues::new();
        ModelConfig::new(kv.parse_value("arch")?, PoolMethod::Max, PoolMethod::Avg)
            .write_keys(&mut full);
        for (k, v) in kv.iter().filter(|(k, _)| *k != "precision") {
            full.set(k, v);
        }
        let config = ModelConfig::from_keys(&full)?;
        let inner = match kv.parse_or("precision", Precision::F32)? {
            Precision::F32 => Inner::F32(new_trainer(config, seed)?),
            Precision::F64 => Inner::F64(new_trainer(config, seed)?),
        };
        *out = Box::into_raw(Box::new(UnipoolModel { inner }));
        Ok(())
    })
}

/// Loads a checkpoint written by the command-line trainer or
/// [`unipool_model_save`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn unipool_model_load(
    path: *const c_char,
    out: *mut *mut UnipoolModel,
) -> UnipoolStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let path = text(path, "path")?;
        let inner = match unipool::checkpoint::element_bytes(path)? {
            4 => Inner::F32(Trainer::load(path)?),
            8 => Inner::F64(Trainer::load(path)?),
            b => return Err(Error::Checkpoint(format!("unsupported element width {b}")).into()),
        };
        *out = Box::into_raw(Box::new(UnipoolModel { inner }));
        Ok(())
    })
}

/// Writes the model, its optimizer state and run state to `path`.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn unipool_model_save(
    model: *const UnipoolModel,
    path: *const c_char,
) -> UnipoolStatus {
    guard(|| {
        let m = model_ref(model)?;
        let path = text(path, "path")?;
        match &m.inner {
            Inner::F32(t) => t.save(path)?,
            Inner::F64(t) => t.save(path)?,
        }
        Ok(())
    })
}

/// Number of output classes.
///
/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn unipool_model_num_classes(
    model: *const UnipoolModel,
    out: *mut usize,
) -> UnipoolStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        *out = m.config().num_classes;
        Ok(())
    })
}

/// `[C, H, W]` of one input image.
///
/// # Safety
/// `model` must come from this library; `out` must hold 3 writable values.
#[no_mangle]
pub unsafe extern "C" fn unipool_model_input_shape(
    model: *const UnipoolModel,
    out: *mut usize,
) -> UnipoolStatus {
    guard(|| {
        let m = model_ref(model)?;
        slice_mut(out, 3, "out")?.copy_from_slice(&m.config().input_shape);
        Ok(())
    })
}

/// Inference-mode logits for `batch` images laid out `[N, C, H, W]`.
/// `input_len` must be `batch·C·H·W` and `logits_len` `batch·classes`.
///
/// # Safety
/// `model` must come from this library; the buffers must hold the stated
/// number of elements.
#[no_mangle]
pub unsafe extern "C" fn unipool_model_forward(
    model: *const UnipoolModel,
    input: *const f64,
    input_len: usize,
    batch: usize,
    logits: *mut f64,
    logits_len: usize,
) -> UnipoolStatus {
    guard(|| {
        let m = model_ref(model)?;
        let cfg = m.config();
        let [c, h, w] = cfg.input_shape;
        if batch == 0 || input_len != batch * c * h * w || logits_len != batch * cfg.num_classes {
            return Err(Error::InvalidArgument(format!(
                "batch {batch} of {c}x{h}x{w} images needs {} inputs and {} logits, got {input_len} and {logits_len}",
                batch * c * h * w,
                batch * cfg.num_classes
            ))
            .into());
        }
        let input = slice(input, input_len, "input")?;
        let logits = slice_mut(logits, logits_len, "logits")?;
        match &m.inner {
            Inner::F32(t) => forward(t, input, batch, logits)?,
            Inner::F64(t) => forward(t, input, batch, logits)?,
        }
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn unipool_model_free(model: *mut UnipoolModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Parameter-free pooling of an `[N, C, H, W]` map at 64-bit with disjoint
/// `size`×`size` blocks. `method` is `max`, `avg`, `stride` or
/// `stride:r,c`. `out_len` must be `N·C·⌊H/size⌋·⌊W/size⌋`.
///
/// # Safety
/// `method` must be NUL-terminated; `dims` must hold 4 values; the buffers
/// must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn unipool_pool2d(
    method: *const c_char,
    input: *const f64,
    dims: *const usize,
    size: usize,
    out: *mut f64,
    out_len: usize,
) -> UnipoolStatus {
    guard(|| {
        let method: PoolMethod = text(method, "method")?.parse()?;
        let dims = slice(dims, 4, "dims")?;
        let [n, c, h, w] = [dims[0], dims[1], dims[2], dims[3]];
        if size == 0 || size > h || size > w {
            return Err(Error::InvalidArgument(format!(
                "block size {size} does not fit a {h}x{w} map"
            ))
            .into());
        }
        let expected = n * c * (h / size) * (w / size);
        if out_len != expected {
            return Err(Error::InvalidArgument(format!(
                "output needs {expected} elements, got {out_len}"
            ))
            .into());
        }
        let x = Tensor::<f64>::from_f64(dims.to_vec(), slice(input, n * c * h * w, "input")?)?;
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let y = match method {
            PoolMethod::Max => tape.max_pool(v, size)?,
            PoolMethod::Avg => tape.avg_pool(v, size)?,
            PoolMethod::Stride {
                offset_row,
                offset_col,
            } => tape.stride_pool(v, size, (offset_row, offset_col))?,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "{other} pooling has parameters; build a model to use it"
                ))
                .into())
            }
        };
        slice_mut(out, out_len, "out")?.copy_from_slice(tape.value(y).data());
        Ok(())
    })
}
