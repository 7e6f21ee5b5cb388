//! C ABI over the cost model, the architecture codec, uniform sampling and
//! the evolutionary search.
//!
//! Every fallible function returns a [`SposStatus`]; on failure a message is
//! available from [`spos_last_error`] on the same thread. Handles are opaque
//! and owned by the caller, who releases them with the matching `_free`.

use std::cell::RefCell;
use std::ffi::{c_char, c_void, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spos::cost::{ConstraintSpec, CostModel};
use spos::sampler::sample_uniform;
use spos::search::{search, Fitness, SearchConfig};
use spos::space::{Architecture, SupernetSpec};
use spos::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SposStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidConfig = 3,
    InvalidSpec = 4,
    InvalidArchitecture = 5,
    Parse = 6,
    Infeasible = 7,
    OutOfRange = 8,
    Callback = 9,
    Internal = 10,
    Panic = 11,
}

/// A search space together with its cost model.
pub struct SposSpace {
    model: CostModel,
}

/// One architecture (a gene per choice block).
pub struct SposArch {
    arch: Architecture,
}

/// Fitness callback for [`spos_search`]. Writes the score of `arch` (larger
/// is better) to `out` and returns zero; any other return value aborts the
/// search with [`SposStatus::Callback`]. `arch` is only valid during the call.
pub type SposFitnessFn = Option<unsafe extern "C" fn(arch: *const SposArch, user: *mut c_void, out: *mut f64) -> i32>;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(SposStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidConfig(_) | Error::Json(_) => SposStatus::InvalidConfig,
            Error::InvalidSpec(_) => SposStatus::InvalidSpec,
            Error::InvalidArchitecture(_) => SposStatus::InvalidArchitecture,
            Error::Parse { .. } => SposStatus::Parse,
            Error::InfeasibleConstraint(_) | Error::InfeasibleSampler(_) | Error::DegenerateArchive(_) => {
                SposStatus::Infeasible
            }
            _ => SposStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Runs `f`, mapping errors and panics onto status codes.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SposStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SposStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside spos".into());
            SposStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(SposStatus::NullPointer, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(SposStatus::InvalidUtf8, format!("{what} is not UTF-8: {e}")))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn write<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

fn checked(space: &SposSpace, arch: &SposArch) -> Result<(), Failure> {
    Ok(space.model.space().check(&arch.arch)?)
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn spos_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Space from a built-in preset name (`desk`, `imagenet`, ...).
///
/// # Safety
/// `name` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spos_space_from_preset(name: *const c_char, out: *mut *mut SposSpace) -> SposStatus {
    guard(|| {
        let spec = SupernetSpec::preset(text(name, "name")?)?;
        let model = CostModel::new(&spec)?;
        write(out, Box::into_raw(Box::new(SposSpace { model })), "out")
    })
}

/// Space from a full supernet spec in JSON.
///
/// # Safety
/// `json` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spos_space_from_json(json: *const c_char, out: *mut *mut SposSpace) -> SposStatus {
    guard(|| {
        let spec: SupernetSpec = serde_json::from_str(text(json, "json")?).map_err(Error::from)?;
        spec.validate()?;
        let model = CostModel::new(&spec)?;
        write(out, Box::into_raw(Box::new(SposSpace { model })), "out")
    })
}

/// # Safety
/// `space` must come from this library (or be null) and not be used again.
#[no_mangle]
pub unsafe extern "C" fn spos_space_free(space: *mut SposSpace) {
    if !space.is_null() {
        drop(Box::from_raw(space));
    }
}

/// # Safety
/// `space` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spos_space_num_blocks(space: *const SposSpace, out: *mut usize) -> SposStatus {
    guard(|| write(out, deref(space, "space")?.model.space().num_blocks(), "out"))
}

/// Number of architectures; [`SposStatus::OutOfRange`] if it exceeds 2^64 - 1.
///
/// # Safety
/// `space` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spos_space_cardinality(space: *const SposSpace, out: *mut u64) -> SposStatus {
    guard(|| {
        let n = deref(space, "space")?.model.space().cardinality();
        let n = u64::try_from(n).map_err(|_| Failure(SposStatus::OutOfRange, format!("cardinality {n} exceeds 64 bits")))?;
        write(out, n, "out")
    })
}

/// Parses the text form (e.g. `0.0.0-3.0.0`) and checks it against `space`.
///
/// # Safety
/// `space` must be a live handle, `text` nul-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn spos_arch_parse(space: *const SposSpace, text_form: *const c_char, out: *mut *mut SposArch) -> SposStatus {
    guard(|| {
        let space = deref(space, "space")?;
        let arch = SposArch {
            arch: text(text_form, "text")?.parse()?,
        };
        checked(space, &arch)?;
        write(out, Box::into_raw(Box::new(arch)), "out")
    })
}

/// # Safety
/// `arch` must come from this library (or be null) and not be used again.
#[no_mangle]
pub unsafe extern "C" fn spos_arch_free(arch: *mut SposArch) {
    if !arch.is_null() {
        drop(Box::from_raw(arch));
    }
}

/// Text form of `arch`; release with [`spos_string_free`]. Null on failure.
///
/// # Safety
/// `arch` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn spos_arch_to_string(arch: *const SposArch) -> *mut c_char {
    let mut out = ptr::null_mut();
    guard(|| {
        let s = CString::new(deref(arch, "arch")?.arch.encode()).expect("codec emits no nul");
        out = s.into_raw();
        Ok(())
    });
    out
}

/// # Safety
/// `s` must come from [`spos_arch_to_string`] (or be null).
#[no_mangle]
pub unsafe extern "C" fn spos_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Uniform draw from `space`; identical seeds give identical draws.
///
/// # Safety
/// `space` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spos_sample_uniform(space: *const SposSpace, seed: u64, out: *mut *mut SposArch) -> SposStatus {
    guard(|| {
        let space = deref(space, "space")?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = sample_uniform(space.model.space(), &mut rng);
        write(out, Box::into_raw(Box::new(SposArch { arch })), "out")
    })
}

unsafe fn cost(
    space: *const SposSpace,
    arch: *const SposArch,
    out: *mut u64,
    f: impl FnOnce(&CostModel, &Architecture) -> spos::Result<u64>,
) -> SposStatus {
    guard(|| {
        let (space, arch) = (deref(space, "space")?, deref(arch, "arch")?);
        checked(space, arch)?;
        write(out, f(&space.model, &arch.arch)?, "out")
    })
}

/// Multiply-accumulates of one forward pass of a single image.
///
/// # Safety
/// `space` and `arch` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spos_cost_macs(space: *const SposSpace, arch: *const SposArch, out: *mut u64) -> SposStatus {
    cost(space, arch, out, CostModel::macs)
}

/// Trainable parameters of the standalone network.
///
/// # Safety
/// `space` and `arch` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spos_cost_params(space: *const SposSpace, arch: *const SposArch, out: *mut u64) -> SposStatus {
    cost(space, arch, out, CostModel::params)
}

/// MACs weighted by weight bits times activation bits; quantized spaces only.
///
/// # Safety
/// `space` and `arch` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spos_cost_bitops(space: *const SposSpace, arch: *const SposArch, out: *mut u64) -> SposStatus {
    cost(space, arch, out, CostModel::bitops)
}

unsafe fn constraints(list: *const *const c_char, len: usize) -> Result<Vec<ConstraintSpec>, Failure> {
    if len == 0 {
        return Ok(Vec::new());
    }
    if list.is_null() {
        return Err(null("constraints"));
    }
    std::slice::from_raw_parts(list, len)
        .iter()
        .map(|&c| Ok(text(c, "constraint")?.parse::<ConstraintSpec>()?))
        .collect()
}

/// Whether `arch` meets every constraint (`METRIC:MAX` or
/// `METRIC:MIN..MAX`).
///
/// # Safety
/// Handles must be live; `list` must point to `len` nul-terminated strings;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spos_satisfies(
    space: *const SposSpace,
    arch: *const SposArch,
    list: *const *const c_char,
    len: usize,
    out: *mut bool,
) -> SposStatus {
    guard(|| {
        let (space, arch) = (deref(space, "space")?, deref(arch, "arch")?);
        checked(space, arch)?;
        let cs = constraints(list, len)?;
        write(out, space.model.satisfies(&arch.arch, &cs)?, "out")
    })
}

struct CallbackFitness {
    f: unsafe extern "C" fn(*const SposArch, *mut c_void, *mut f64) -> i32,
    user: *mut c_void,
    failed: bool,
}

impl Fitness for CallbackFitness {
    fn fitness(&mut self, arch: &Architecture) -> spos::Result<f64> {
        let handle = SposArch { arch: arch.clone() };
        let mut score = f64::NAN;
        let rc = unsafe { (self.f)(&handle, self.user, &mut score) };
        if rc != 0 || !score.is_finite() {
            self.failed = true;
        }
        if rc != 0 {
            return Err(Error::InvalidConfig(format!("fitness callback returned {rc}")));
        }
        if !score.is_finite() {
            return Err(Error::InvalidConfig(format!("fitness callback produced {score}")));
        }
        Ok(score)
    }
}

/// Constrained search with a caller-supplied fitness. `config_json` is a
/// search config object (`{}` for the defaults; null also means defaults).
/// The best architecture and its fitness are written to `out_best` and
/// `out_fitness`.
///
/// # Safety
/// `space` must be a live handle, `config_json` null or nul-terminated,
/// `fitness` a valid function pointer, and both outputs writable.
#[no_mangle]
pub unsafe extern "C" fn spos_search(
    space: *const SposSpace,
    config_json: *const c_char,
    seed: u64,
    fitness: SposFitnessFn,
    user: *mut c_void,
    out_best: *mut *mut SposArch,
    out_fitness: *mut f64,
) -> SposStatus {
    guard(|| {
        let space = deref(space, "space")?;
        let f = fitness.ok_or_else(|| null("fitness"))?;
        if out_best.is_null() || out_fitness.is_null() {
            return Err(null("output"));
        }
        let cfg: SearchConfig = if config_json.is_null() {
            SearchConfig::default()
        } else {
            serde_json::from_str(text(config_json, "config_json")?).map_err(Error::from)?
        };
        let mut fit = CallbackFitness { f, user, failed: false };
        let outcome = search(&space.model, &mut fit, &cfg, seed).map_err(|e| {
            if fit.failed {
                Failure(SposStatus::Callback, e.to_string())
            } else {
                e.into()
            }
        })?;
        write(out_fitness, outcome.best.fitness, "out_fitness")?;
        write(out_best, Box::into_raw(Box::new(SposArch { arch: outcome.best.arch })), "out_best")
    })
}

/// Gene fields of block `block`: variant, channel and quantization indices.
///
/// # Safety
/// `arch` must be a live handle; the three outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn spos_arch_gene(
    arch: *const SposArch,
    block: usize,
    variant: *mut u8,
    channel: *mut u8,
    quant: *mut u8,
) -> SposStatus {
    guard(|| {
        let arch = deref(arch, "arch")?;
        let g = arch.arch.genes().get(block).ok_or_else(|| {
            Failure(
                SposStatus::OutOfRange,
                format!("block {block} out of range for {} blocks", arch.arch.len()),
            )
        })?;
        write(variant, g.variant, "variant")?;
        write(channel, g.channel, "channel")?;
        write(quant, g.quant, "quant")
    })
}
