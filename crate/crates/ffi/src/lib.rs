//! C interface. Every fallible call returns a [`MamlStatus`]; the message
//! of the last failure on the calling thread is available from
//! [`maml_last_error_message`]. Trainers are opaque heap handles released
//! with [`maml_trainer_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use maml_core::data::Section;
use maml_core::harness::{save_checkpoint, ExperimentConfig, Precision, TaskData, Trainer};
use maml_core::meta::{anneal_loss_weights, cosine_lr, derivative_order, IterationMetrics, Order};
use maml_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MamlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Data = 4,
    Diverged = 5,
    Checkpoint = 6,
    Io = 7,
    Structure = 8,
    Numeric = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MamlIterationStats {
    pub epoch: u64,
    pub iteration: u64,
    /// Meta-objective summed over the task batch.
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
    /// 1 when second-order gradients were used.
    pub second_order: u8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MamlEvalStats {
    pub epoch: u64,
    pub accuracy: f64,
    pub std_error: f64,
    pub loss: f64,
}

enum Inner {
    F32(Trainer<f32>),
    F64(Trainer<f64>),
}

/// Opaque training session for one seed.
pub struct MamlTrainer {
    inner: Inner,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &Error) -> MamlStatus {
    match err {
        Error::Config(_) => MamlStatus::Config,
        Error::Ingest { .. } | Error::Sampling(_) => MamlStatus::Data,
        Error::Diverged { .. } | Error::NonFinite { .. } => MamlStatus::Diverged,
        Error::Checkpoint { .. } => MamlStatus::Checkpoint,
        Error::Io(_) | Error::Csv(_) => MamlStatus::Io,
        Error::Numeric(_) => MamlStatus::Numeric,
        _ => MamlStatus::Structure,
    }
}

fn guard(f: impl FnOnce() -> Result<(), MamlStatus>) -> MamlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MamlStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic");
            MamlStatus::Panic
        }
    }
}

fn fail(err: Error) -> MamlStatus {
    set_error(&err.to_string());
    status_of(&err)
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, MamlStatus> {
    if p.is_null() {
        set_error(&format!("{what} is null"));
        return Err(MamlStatus::NullPointer);
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(&format!("{what} is not valid UTF-8"));
        MamlStatus::InvalidUtf8
    })
}

unsafe fn trainer_arg<'a>(t: *mut MamlTrainer) -> Result<&'a mut MamlTrainer, MamlStatus> {
    t.as_mut().ok_or_else(|| {
        set_error("trainer handle is null");
        MamlStatus::NullPointer
    })
}

fn build(config: ExperimentConfig, seed: u64) -> Result<MamlTrainer, Error> {
    config.validate()?;
    let data = Arc::new(TaskData::prepare(&config)?);
    let val = Arc::new(data.eval_set(&config, Section::Val)?);
    let inner = match config.run.precision {
        Precision::F32 => Inner::F32(Trainer::new(&config, data, val, seed)?),
        Precision::F64 => Inner::F64(Trainer::new(&config, data, val, seed)?),
    };
    Ok(MamlTrainer { inner })
}

unsafe fn create(
    config: Result<ExperimentConfig, Error>,
    seed: u64,
    out: *mut *mut MamlTrainer,
) -> Result<(), MamlStatus> {
    if out.is_null() {
        set_error("output handle pointer is null");
        return Err(MamlStatus::NullPointer);
    }
    *out = std::ptr::null_mut();
    let mut config = config.map_err(fail)?;
    config.apply_env();
    let t = build(config, seed).map_err(fail)?;
    *out = Box::into_raw(Box::new(t));
    Ok(())
}

/// Copies the calling thread's last error message (NUL-terminated,
/// truncated to `len`) into `buf` and returns the full message length.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn maml_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Creates a trainer from a named preset for `seed`.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn maml_trainer_new_preset(
    name: *const c_char,
    seed: u64,
    out: *mut *mut MamlTrainer,
) -> MamlStatus {
    guard(|| {
        let name = str_arg(name, "preset name")?;
        create(ExperimentConfig::preset(name), seed, out)
    })
}

/// Creates a trainer from TOML configuration text for `seed`.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn maml_trainer_new_toml(
    toml: *const c_char,
    seed: u64,
    out: *mut *mut MamlTrainer,
) -> MamlStatus {
    guard(|| {
        let text = str_arg(toml, "config text")?;
        create(ExperimentConfig::from_toml(text), seed, out)
    })
}

/// Releases a trainer. Null is ignored.
///
/// # Safety
/// `t` must come from a constructor above and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn maml_trainer_free(t: *mut MamlTrainer) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

fn iteration_stats(m: &IterationMetrics) -> MamlIterationStats {
    MamlIterationStats {
        epoch: m.epoch as u64,
        iteration: m.iteration as u64,
        loss: m.loss,
        accuracy: m.accuracy,
        lr: m.lr,
        grad_norm: m.grad_norm,
        wall_ms: m.wall_ms,
        second_order: u8::from(m.order == Order::Second),
    }
}

/// Runs one outer update. `stats` may be null.
///
/// # Safety
/// `t` must be a live handle; `stats` null or writable.
#[no_mangle]
pub unsafe extern "C" fn maml_trainer_step(
    t: *mut MamlTrainer,
    stats: *mut MamlIterationStats,
) -> MamlStatus {
    guard(|| {
        let t = trainer_arg(t)?;
        let m = match &mut t.inner {
            Inner::F32(tr) => tr.step(),
            Inner::F64(tr) => tr.step(),
        }
        .map_err(fail)?;
        if let Some(s) = stats.as_mut() {
            *s = iteration_stats(&m);
        }
        Ok(())
    })
}

/// Evaluates on the fixed validation set and records the epoch. `stats`
/// may be null.
///
/// # Safety
/// `t` must be a live handle; `stats` null or writable.
#[no_mangle]
pub unsafe extern "C" fn maml_trainer_end_epoch(
    t: *mut MamlTrainer,
    stats: *mut MamlEvalStats,
) -> MamlStatus {
    guard(|| {
        let t = trainer_arg(t)?;
        let s = match &mut t.inner {
            Inner::F32(tr) => tr.end_epoch(),
            Inner::F64(tr) => tr.end_epoch(),
        }
        .map_err(fail)?;
        if let Some(out) = stats.as_mut() {
            *out = MamlEvalStats {
                epoch: s.epoch as u64,
                accuracy: s.accuracy,
                std_error: s.std_error,
                loss: s.loss,
            };
        }
        Ok(())
    })
}

/// Completed outer iterations, or `u64::MAX` for a null handle.
///
/// # Safety
/// `t` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn maml_trainer_iteration(t: *const MamlTrainer) -> u64 {
    match t.as_ref() {
        None => u64::MAX,
        Some(t) => match &t.inner {
            Inner::F32(tr) => tr.iteration() as u64,
            Inner::F64(tr) => tr.iteration() as u64,
        },
    }
}

/// Writes a resumable checkpoint to `path`.
///
/// # Safety
/// `t` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn maml_trainer_save(
    t: *const MamlTrainer,
    path: *const c_char,
) -> MamlStatus {
    guard(|| {
        let t = t.as_ref().ok_or_else(|| {
            set_error("trainer handle is null");
            MamlStatus::NullPointer
        })?;
        let path = Path::new(str_arg(path, "checkpoint path")?);
        match &t.inner {
            Inner::F32(tr) => save_checkpoint(path, &tr.checkpoint()),
            Inner::F64(tr) => save_checkpoint(path, &tr.checkpoint()),
        }
        .map_err(fail)
    })
}

/// Cosine-annealed outer learning rate.
#[no_mangle]
pub extern "C" fn maml_cosine_lr(iteration: u64, total: u64, lr_max: f64, lr_min: f64) -> f64 {
    cosine_lr(iteration as usize, total as usize, lr_max, lr_min)
}

/// 1 for second-order at `epoch`, 0 for first-order.
#[no_mangle]
pub extern "C" fn maml_derivative_order(epoch: u64, switch_epoch: u64) -> i32 {
    i32::from(derivative_order(epoch as usize, switch_epoch as usize) == Order::Second)
}

/// Writes the per-step loss weights into `out` (`steps` entries, or
/// `steps + 1` with `include_pre_update`, step 0 first).
///
/// # Safety
/// `out` must be valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn maml_loss_weights(
    epoch: f64,
    steps: u64,
    include_pre_update: u8,
    horizon: f64,
    floor: f64,
    out: *mut f64,
    len: usize,
) -> MamlStatus {
    guard(|| {
        if steps == 0 {
            set_error("steps must be at least 1");
            return Err(MamlStatus::Config);
        }
        let v = anneal_loss_weights(
            epoch,
            steps as usize,
            include_pre_update != 0,
            horizon,
            floor,
        );
        if out.is_null() {
            set_error("output buffer is null");
            return Err(MamlStatus::NullPointer);
        }
        if len < v.weights.len() {
            set_error(&format!(
                "need {} entries, buffer holds {len}",
                v.weights.len()
            ));
            return Err(MamlStatus::BufferTooSmall);
        }
        std::ptr::copy_nonoverlapping(v.weights.as_ptr(), out, v.weights.len());
        Ok(())
    })
}
