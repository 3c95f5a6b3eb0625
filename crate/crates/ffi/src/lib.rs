//! C ABI over `layercard`. Handles are opaque and owned by the caller, who
//! releases them with the matching `*_free`. Every entry point returns an
//! [`LcStatus`]; on failure [`lc_last_error`] describes the cause.
//! Strings returned through out-pointers are freed with [`lc_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use layercard::card::{build_card, model_id, spearman, transfer_select, CardConfig, LayerCard, Objective, Weighting};
use layercard::io::to_canonical;
use layercard::toynet::{
    generate, profile_layers, profiles_to_csv, Batch, FinetuneConfig, Nonlinearity, ToyModel, ToyModelSpec,
};
use layercard::Error;

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Parse = 3,
    SchemaMismatch = 4,
    Numerical = 5,
    Io = 6,
    Panic = 7,
}

/// Values of the `nonlinearity` argument of [`lc_model_generate`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LcNonlinearity {
    Identity = 0,
    Tanh = 1,
}

/// Values of the `objective` argument of [`lc_transfer_select`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LcObjective {
    MaxPerformance = 0,
    MinCost = 1,
    Balanced = 2,
}

/// Opaque toy model.
pub struct LcModel(ToyModel);

/// Opaque layer card.
pub struct LcCard(LayerCard);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> LcStatus {
    match e {
        Error::InvalidMatrix(_)
        | Error::PartitionMismatch { .. }
        | Error::DimensionMismatch(_)
        | Error::EmptySelection
        | Error::InvalidArgument(_)
        | Error::UndefinedCorrelation(_)
        | Error::CalibrationUnderdetermined(_) => LcStatus::InvalidArgument,
        Error::NotPositiveDefinite { .. }
        | Error::CouplingTooStrong { .. }
        | Error::DegenerateActivation(_)
        | Error::DivergedTraining { .. }
        | Error::NoConvergence { .. } => LcStatus::Numerical,
        Error::SchemaMismatch { .. } => LcStatus::SchemaMismatch,
        Error::Parse(_) | Error::Json(_) => LcStatus::Parse,
        Error::Io(_) => LcStatus::Io,
    }
}

/// Failure carried out of a guarded body.
struct Fail(LcStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(LcStatus::NullPointer, format!("{what} is null"))
}

/// Runs `body`, converting errors and panics into a status plus message.
fn guard(body: impl FnOnce() -> Result<(), Fail>) -> LcStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_error("");
            LcStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            LcStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(LcStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    let c = CString::new(s).map_err(|_| Fail(LcStatus::InvalidArgument, "string contains NUL".into()))?;
    *out = c.into_raw();
    Ok(())
}

unsafe fn write_handle<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn model_ref<'a>(m: *const LcModel) -> Result<&'a ToyModel, Fail> {
    m.as_ref().map(|m| &m.0).ok_or_else(|| null("model"))
}

fn parse_json(text: &str) -> Result<serde_json::Value, Fail> {
    serde_json::from_str(text).map_err(|e| Fail(LcStatus::Parse, e.to_string()))
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn lc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn lc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Generates a toy model. `teacher_layers` holds `n_teacher` 0-based layer
/// indices and may be null when `n_teacher` is 0.
///
/// # Safety
/// `teacher_layers` must point to `n_teacher` readable values; `out` must be writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn lc_model_generate(
    layers: usize,
    width: usize,
    nonlinearity: i32,
    head_dim: usize,
    teacher_layers: *const usize,
    n_teacher: usize,
    teacher_scale: f64,
    seed: u64,
    out: *mut *mut LcModel,
) -> LcStatus {
    guard(|| {
        let spec = ToyModelSpec {
            layers,
            width,
            nonlinearity: match nonlinearity {
                x if x == LcNonlinearity::Identity as i32 => Nonlinearity::Identity,
                x if x == LcNonlinearity::Tanh as i32 => Nonlinearity::Tanh,
                other => return Err(Fail(LcStatus::InvalidArgument, format!("unknown nonlinearity {other}"))),
            },
            head_dim,
            teacher_layers: slice_arg(teacher_layers, n_teacher, "teacher_layers")?.to_vec(),
            teacher_scale,
            seed,
        };
        write_handle(out, LcModel(generate(&spec)?))
    })
}

/// Parses a model from its JSON text.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lc_model_from_json(json: *const c_char, out: *mut *mut LcModel) -> LcStatus {
    guard(|| {
        let v = parse_json(str_arg(json, "json")?)?;
        write_handle(out, LcModel(ToyModel::from_json_value(v)?))
    })
}

/// Canonical JSON of the model.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lc_model_to_json(model: *const LcModel, out: *mut *mut c_char) -> LcStatus {
    guard(|| write_string(out, layercard::io::canonical_json(&model_ref(model)?.to_json_value())))
}

/// Hex SHA-256 model identifier.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lc_model_id(model: *const LcModel, out: *mut *mut c_char) -> LcStatus {
    guard(|| write_string(out, model_id(model_ref(model)?)))
}

/// Number of layers, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lc_model_layers(model: *const LcModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.layers())
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn lc_model_free(model: *mut LcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Profiles the model on `samples` teacher-labelled inputs drawn with
/// `seed` and writes the CSV `layer,grad_norm,sigma_hat,resnorm,erank`.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lc_profile_csv(
    model: *const LcModel,
    samples: usize,
    seed: u64,
    out: *mut *mut c_char,
) -> LcStatus {
    guard(|| {
        let m = model_ref(model)?;
        let probe = Batch::sample(m, samples, seed)?;
        write_string(out, profiles_to_csv(&profile_layers(m, &probe)?))
    })
}

/// Writes the per-layer resnorm into `out`, which must hold `len` values,
/// with `len` equal to the layer count.
///
/// # Safety
/// `model` must be a live handle; `out` must point to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn lc_profile_resnorm(
    model: *const LcModel,
    samples: usize,
    seed: u64,
    out: *mut f64,
    len: usize,
) -> LcStatus {
    guard(|| {
        let m = model_ref(model)?;
        if len != m.layers() {
            return Err(Fail(LcStatus::InvalidArgument, format!("buffer holds {len} values for {} layers", m.layers())));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let probe = Batch::sample(m, samples, seed)?;
        let dst = std::slice::from_raw_parts_mut(out, len);
        for (d, p) in dst.iter_mut().zip(profile_layers(m, &probe)?) {
            *d = p.resnorm;
        }
        Ok(())
    })
}

/// Builds a layer card with calibrated costs and line-search fine-tuning.
/// Probe and evaluation batches are drawn from the teacher.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn lc_card_build(
    model: *const LcModel,
    probe_samples: usize,
    probe_seed: u64,
    eval_samples: usize,
    eval_seed: u64,
    regimes: usize,
    k_per: usize,
    steps: usize,
    out: *mut *mut LcCard,
) -> LcStatus {
    guard(|| {
        let m = model_ref(model)?;
        let probe = Batch::sample(m, probe_samples, probe_seed)?;
        let eval = Batch::sample(m, eval_samples, eval_seed)?;
        let defaults = CardConfig::default();
        let cfg = CardConfig {
            regimes,
            k_per,
            finetune: FinetuneConfig { steps, ..defaults.finetune },
            ..defaults
        };
        write_handle(out, LcCard(build_card(m, &probe, &eval, &cfg)?))
    })
}

/// Parses a card, rejecting unknown schema versions with `LC_STATUS_SCHEMA_MISMATCH`.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lc_card_from_json(json: *const c_char, out: *mut *mut LcCard) -> LcStatus {
    guard(|| {
        let v = parse_json(str_arg(json, "json")?)?;
        write_handle(out, LcCard(LayerCard::from_json_value(v)?))
    })
}

/// Canonical JSON of the card.
///
/// # Safety
/// `card` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lc_card_to_json(card: *const LcCard, out: *mut *mut c_char) -> LcStatus {
    guard(|| {
        let c = card.as_ref().ok_or_else(|| null("card"))?;
        write_string(out, c.0.to_canonical())
    })
}

/// Number of regimes, or 0 for a null handle.
///
/// # Safety
/// `card` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lc_card_regimes(card: *const LcCard) -> usize {
    card.as_ref().map_or(0, |c| c.0.regimes.len())
}

/// Releases a card. Null is ignored.
///
/// # Safety
/// `card` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn lc_card_free(card: *mut LcCard) {
    if !card.is_null() {
        drop(Box::from_raw(card));
    }
}

/// Selects a regime for `target` (per-layer resnorm, `len` values) from
/// `n_cards` reference cards and writes the decision as canonical JSON.
///
/// # Safety
/// `cards` must point to `n_cards` live handles and `target` to `len` values.
#[no_mangle]
pub unsafe extern "C" fn lc_transfer_select(
    cards: *const *const LcCard,
    n_cards: usize,
    target: *const f64,
    len: usize,
    tau: f64,
    objective: i32,
    out: *mut *mut c_char,
) -> LcStatus {
    guard(|| {
        let owned = slice_arg(cards, n_cards, "cards")?
            .iter()
            .map(|&c| c.as_ref().map(|c| c.0.clone()).ok_or_else(|| null("card")))
            .collect::<Result<Vec<_>, _>>()?;
        let target = slice_arg(target, len, "target")?;
        let objective = match objective {
            x if x == LcObjective::MaxPerformance as i32 => Objective::MaxPerformance,
            x if x == LcObjective::MinCost as i32 => Objective::MinCost,
            x if x == LcObjective::Balanced as i32 => Objective::Balanced,
            other => return Err(Fail(LcStatus::InvalidArgument, format!("unknown objective {other}"))),
        };
        let decision = transfer_select(&owned, target, tau, objective, Weighting::Unweighted)?;
        write_string(out, to_canonical(&decision)?)
    })
}

/// Spearman rank correlation of two length-`n` vectors.
///
/// # Safety
/// `x` and `y` must point to `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lc_spearman(x: *const f64, y: *const f64, n: usize, out: *mut f64) -> LcStatus {
    guard(|| {
        let s = spearman(slice_arg(x, n, "x")?, slice_arg(y, n, "y")?)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = s;
        Ok(())
    })
}

/// Runs the randomized bound audit on `instances` seeds starting at `seed`
/// and writes the number of violated checks (0 means all bounds held).
/// When `report_csv` is non-null the full CSV report is written there.
///
/// # Safety
/// `violations` must be writable; `report_csv` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn lc_verify(
    instances: usize,
    seed: u64,
    violations: *mut usize,
    report_csv: *mut *mut c_char,
) -> LcStatus {
    guard(|| {
        if violations.is_null() {
            return Err(null("violations"));
        }
        let report = layercard::verify::run_verify(instances, seed)?;
        *violations = report.violations().count();
        if !report_csv.is_null() {
            write_string(report_csv, report.to_csv())?;
        }
        Ok(())
    })
}
