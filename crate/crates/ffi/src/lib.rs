//! C ABI over the roboadvisor engine.
//!
//! Objects are opaque handles returned through out-parameters and released with the matching
//! `ra_*_free`. Every fallible call returns an [`RaStatus`]; on failure the
//! message is available from [`ra_last_error`] on the same thread until the next call.
//! Strings returned through out-parameters are owned by the caller and released with
//! [`ra_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use roboadvisor::analytics::gini_coefficient;
use roboadvisor::elicitation::{
    build_scenarios, elicit_all, AnswerSheet, BenchmarkSpec, Choice, ElicitSettings, Estimator,
};
use roboadvisor::io::{load_item_set, parse_item_set};
use roboadvisor::kantorovich::kantorovich_closed_form;
use roboadvisor::lottery::ItemSet;
use roboadvisor::questionnaire::{select_pairs_random, Questionnaire};
use roboadvisor::utility::PwlUtility;
use roboadvisor::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RaStatus {
    Ok = 0,
    NullArgument = 1,
    Validation = 2,
    Domain = 3,
    Inconsistent = 4,
    Infeasible = 5,
    Solver = 6,
    Io = 7,
    NotFound = 8,
    Panic = 9,
}

/// Estimator selector for [`ra_elicit`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RaEstimator {
    Pessimistic = 0,
    Optimistic = 1,
    Neutral = 2,
}

/// An item set of lotteries.
pub struct RaItemSet(ItemSet);

/// A questionnaire of item pairs drawn from an item set.
pub struct RaQuestionnaire(Questionnaire);

/// A normalized monotone concave piecewise-linear utility.
pub struct RaUtility(PwlUtility);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> RaStatus {
    match e {
        Error::Domain { .. } => RaStatus::Domain,
        Error::Inconsistent(_) => RaStatus::Inconsistent,
        Error::Infeasible(_) => RaStatus::Infeasible,
        Error::Solver(_) | Error::Singular(_) => RaStatus::Solver,
        Error::Io(_) => RaStatus::Io,
        Error::NotFound(_) => RaStatus::NotFound,
        _ => RaStatus::Validation,
    }
}

enum Failure {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

/// Clears the last error, runs `f` and converts errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RaStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RaStatus::Ok,
        Ok(Err(Failure::Null(name))) => {
            set_error(format!("{name} is null"));
            RaStatus::NullArgument
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            RaStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, name: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(name))
}

unsafe fn out<'a, T>(p: *mut T, name: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(name))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure::Core(Error::Validation(format!("{name} is not UTF-8: {e}"))))
}

fn to_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("nul bytes removed").into_raw()
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Message of the last failed call on this thread, or null. Valid until the next call.
#[no_mangle]
pub extern "C" fn ra_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn ra_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads an item set JSON file.
///
/// # Safety
/// `path` must be a valid C string and `out_items` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ra_item_set_load(path: *const c_char, out_items: *mut *mut RaItemSet) -> RaStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let slot = out(out_items, "out_items")?;
        *slot = boxed(RaItemSet(load_item_set(Path::new(path))?));
        Ok(())
    })
}

/// Parses an item set from JSON text.
///
/// # Safety
/// `json` must be a valid C string and `out_items` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ra_item_set_from_json(json: *const c_char, out_items: *mut *mut RaItemSet) -> RaStatus {
    guard(|| {
        let text = str_arg(json, "json")?;
        let slot = out(out_items, "out_items")?;
        *slot = boxed(RaItemSet(parse_item_set(text, Path::new("<json>"))?));
        Ok(())
    })
}

/// Number of items.
///
/// # Safety
/// `items` must be a live handle and `out_len` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ra_item_set_len(items: *const RaItemSet, out_len: *mut usize) -> RaStatus {
    guard(|| {
        *out(out_len, "out_len")? = deref(items, "items")?.0.len();
        Ok(())
    })
}

/// Largest outcome over all items; the default upper end of the utility domain.
///
/// # Safety
/// `items` must be a live handle and `out_value` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ra_item_set_max_outcome(items: *const RaItemSet, out_value: *mut f64) -> RaStatus {
    guard(|| {
        *out(out_value, "out_value")? = deref(items, "items")?.0.max_outcome();
        Ok(())
    })
}

/// # Safety
/// `items` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ra_item_set_free(items: *mut RaItemSet) {
    if !items.is_null() {
        drop(Box::from_raw(items));
    }
}

/// Draws `k` distinct pairs uniformly at random.
///
/// # Safety
/// `items` must be a live handle and `out_q` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ra_questionnaire_random(
    items: *const RaItemSet,
    k: usize,
    seed: u64,
    out_q: *mut *mut RaQuestionnaire,
) -> RaStatus {
    guard(|| {
        let items = deref(items, "items")?;
        let slot = out(out_q, "out_q")?;
        *slot = boxed(RaQuestionnaire(select_pairs_random(&items.0, k, seed)?));
        Ok(())
    })
}

/// Number of pairs.
///
/// # Safety
/// `q` must be a live handle and `out_len` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ra_questionnaire_len(q: *const RaQuestionnaire, out_len: *mut usize) -> RaStatus {
    guard(|| {
        *out(out_len, "out_len")? = deref(q, "q")?.0.len();
        Ok(())
    })
}

/// Questionnaire as JSON (item ids per pair); release with [`ra_string_free`].
///
/// # Safety
/// `q` must be a live handle and `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ra_questionnaire_to_json(q: *const RaQuestionnaire, out_json: *mut *mut c_char) -> RaStatus {
    guard(|| {
        let q = deref(q, "q")?;
        let slot = out(out_json, "out_json")?;
        *slot = to_c_string(serde_json::to_string(&q.0.to_file()).map_err(Error::from)?);
        Ok(())
    })
}

/// # Safety
/// `q` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ra_questionnaire_free(q: *mut RaQuestionnaire) {
    if !q.is_null() {
        drop(Box::from_raw(q));
    }
}

/// Elicits one nominal utility. `choices[i]` answers pair `i`: +1 first, -1 second, 0 no
/// preference. The grid is the questionnaire's outcomes up to the item set's largest outcome
/// and the benchmark is the uniform portfolio of all items.
///
/// # Safety
/// Handles must be live, `choices` must hold `n` values and `out_u` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ra_elicit(
    items: *const RaItemSet,
    q: *const RaQuestionnaire,
    choices: *const i8,
    n: usize,
    estimator: RaEstimator,
    out_u: *mut *mut RaUtility,
) -> RaStatus {
    guard(|| {
        let items = &deref(items, "items")?.0;
        let q = &deref(q, "q")?.0;
        if choices.is_null() && n > 0 {
            return Err(Failure::Null("choices"));
        }
        let slot = out(out_u, "out_u")?;
        let raw = if n == 0 { &[][..] } else { std::slice::from_raw_parts(choices, n) };
        if let Some(z) = raw.iter().find(|z| !(-1..=1).contains(*z)) {
            return Err(Error::Validation(format!("choice {z} is not -1, 0 or +1")).into());
        }
        let sheet = AnswerSheet::new(q.clone(), raw.iter().map(|&z| Choice::from_sign(z)).collect())?;
        let grid = q.breakpoints(items.max_outcome())?;
        let scen = build_scenarios(items, &BenchmarkSpec::default_for(items))?;
        let all = elicit_all(&sheet, &grid, &scen, &ElicitSettings::default())?;
        let e = match estimator {
            RaEstimator::Pessimistic => Estimator::Pessimistic,
            RaEstimator::Optimistic => Estimator::Optimistic,
            RaEstimator::Neutral => Estimator::Neutral,
        };
        *slot = boxed(RaUtility(all.get(e).utility.clone()));
        Ok(())
    })
}

/// Parses a utility from JSON `{"grid", "alpha", "beta"}`; extra fields are ignored.
///
/// # Safety
/// `json` must be a valid C string and `out_u` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ra_utility_from_json(json: *const c_char, out_u: *mut *mut RaUtility) -> RaStatus {
    guard(|| {
        let text = str_arg(json, "json")?;
        let slot = out(out_u, "out_u")?;
        let u: PwlUtility = serde_json::from_str(text).map_err(Error::from)?;
        *slot = boxed(RaUtility(u));
        Ok(())
    })
}

/// Utility as JSON; release with [`ra_string_free`].
///
/// # Safety
/// `u` must be a live handle and `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ra_utility_to_json(u: *const RaUtility, out_json: *mut *mut c_char) -> RaStatus {
    guard(|| {
        let u = deref(u, "u")?;
        let slot = out(out_json, "out_json")?;
        *slot = to_c_string(serde_json::to_string(&u.0).map_err(Error::from)?);
        Ok(())
    })
}

/// Utility value at `y`; fails with `Domain` outside `[0, upper]`.
///
/// # Safety
/// `u` must be a live handle and `out_value` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ra_utility_eval(u: *const RaUtility, y: f64, out_value: *mut f64) -> RaStatus {
    guard(|| {
        let u = deref(u, "u")?;
        *out(out_value, "out_value")? = u.0.eval(y)?;
        Ok(())
    })
}

/// Gini coefficient of the utility.
///
/// # Safety
/// `u` must be a live handle and `out_value` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ra_utility_gini(u: *const RaUtility, out_value: *mut f64) -> RaStatus {
    guard(|| {
        let u = deref(u, "u")?;
        *out(out_value, "out_value")? = gini_coefficient(&u.0);
        Ok(())
    })
}

/// Kantorovich distance on the normalized domain; both utilities must share a grid.
///
/// # Safety
/// Handles must be live and `out_value` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ra_kantorovich(u: *const RaUtility, v: *const RaUtility, out_value: *mut f64) -> RaStatus {
    guard(|| {
        let (u, v) = (deref(u, "u")?, deref(v, "v")?);
        *out(out_value, "out_value")? = kantorovich_closed_form(&u.0, &v.0)?.value;
        Ok(())
    })
}

/// # Safety
/// `u` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ra_utility_free(u: *mut RaUtility) {
    if !u.is_null() {
        drop(Box::from_raw(u));
    }
}
