//! C ABI for the `saqe` library.
//!
//! Objects cross the boundary as opaque handles that the caller releases with
//! the matching `*_free` function. Every fallible call returns a
//! [`SaqeStatus`]; on failure the message is kept per thread and can be read
//! with [`saqe_last_error`]. Panics never unwind into C: they are caught and
//! reported as [`SaqeStatus::Internal`].

use std::cell::RefCell;
use std::collections::HashMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use saqe::bootstrap::{bootstrap_mse, BootstrapInputs, BootstrapPlan, MethodPredictor, Variant};
use saqe::data::{
    load_census_csv, load_survey_csv, AreaSample, CensusArea, CensusFrame, CensusSchema, SurveySample, SurveySchema,
};
use saqe::drm::{fit_drm_sample, DrmFit};
use saqe::ner::{fit_ner_mle, NerFit};
use saqe::pipeline::{check_requirements, fit_models, predict_quantiles, Method, PredictSettings};
use saqe::rng::RngStream;
use saqe::Error;

/// Result of every fallible call. Codes 2 to 4 match the command-line exit
/// codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaqeStatus {
    Ok = 0,
    /// A panic inside the library.
    Internal = 1,
    Config = 2,
    NonConvergence = 3,
    Validation = 4,
    NullPointer = 5,
    /// The output buffer is smaller than the number of values to write.
    BufferTooSmall = 6,
}

/// Survey sample.
pub struct SaqeSample(SurveySample);

/// Census frame.
pub struct SaqeCensus(CensusFrame);

/// Fitted nested-error regression model.
pub struct SaqeNerFit(NerFit);

/// Fitted density ratio model.
pub struct SaqeDrmFit(DrmFit);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

enum Failure {
    Lib(Error),
    Null(&'static str),
    Buffer { needed: usize, given: usize },
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn status_of(f: Failure) -> SaqeStatus {
    match f {
        Failure::Lib(e) => {
            let s = match e.exit_code() {
                2 => SaqeStatus::Config,
                3 => SaqeStatus::NonConvergence,
                _ => SaqeStatus::Validation,
            };
            set_error(e.to_string());
            s
        }
        Failure::Null(what) => {
            set_error(format!("null pointer passed for {what}"));
            SaqeStatus::NullPointer
        }
        Failure::Buffer { needed, given } => {
            set_error(format!("output buffer holds {given} values, {needed} needed"));
            SaqeStatus::BufferTooSmall
        }
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SaqeStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SaqeStatus::Ok,
        Ok(Err(e)) => status_of(e),
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            SaqeStatus::Internal
        }
    }
}

unsafe fn reference<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn string(p: *const c_char, what: &'static str) -> Result<String, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Failure::Lib(Error::Config(format!("{what} is not valid UTF-8"))))
}

unsafe fn optional_string(p: *const c_char, what: &'static str) -> Result<Option<String>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        string(p, what).map(Some)
    }
}

fn columns(list: &str) -> Vec<String> {
    list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_owned).collect()
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn write_out(values: &[f64], out: *mut f64, cap: usize) -> Result<(), Failure> {
    if cap < values.len() {
        return Err(Failure::Buffer { needed: values.len(), given: cap });
    }
    if values.is_empty() {
        return Ok(());
    }
    if out.is_null() {
        return Err(Failure::Null("output buffer"));
    }
    ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    Ok(())
}

/// Groups unit rows by area code, keeping first-appearance order.
fn group_rows(codes: &[i64]) -> Vec<(i64, Vec<usize>)> {
    let mut index: HashMap<i64, usize> = HashMap::new();
    let mut groups: Vec<(i64, Vec<usize>)> = Vec::new();
    for (i, &c) in codes.iter().enumerate() {
        let g = *index.entry(c).or_insert_with(|| {
            groups.push((c, Vec::new()));
            groups.len() - 1
        });
        groups[g].1.push(i);
    }
    groups
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn saqe_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. The pointer stays
/// valid until the next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn saqe_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Builds a survey sample from unit-level arrays.
///
/// `area_codes` has `n_units` entries; the decimal code becomes the area id.
/// `x` is row-major `n_units x d`.
///
/// # Safety
/// Every pointer must be valid for the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn saqe_sample_new(
    n_units: usize,
    d: usize,
    area_codes: *const i64,
    x: *const f64,
    y: *const f64,
    out: *mut *mut SaqeSample,
) -> SaqeStatus {
    guard(|| {
        let codes = slice(area_codes, n_units, "area_codes")?;
        let x = slice(x, n_units * d, "x")?;
        let y = slice(y, n_units, "y")?;
        let areas = group_rows(codes)
            .into_iter()
            .map(|(code, rows)| {
                let xs = rows.iter().flat_map(|&i| x[i * d..(i + 1) * d].iter().copied()).collect();
                let ys = rows.iter().map(|&i| y[i]).collect();
                AreaSample::from_flat(code.to_string(), d, xs, ys)
            })
            .collect::<saqe::Result<Vec<_>>>()?;
        store(out, SaqeSample(SurveySample::new(areas)?))
    })
}

/// Loads a survey CSV. `x_cols` is a comma-separated column list.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn saqe_sample_load_csv(
    path: *const c_char,
    area_col: *const c_char,
    y_col: *const c_char,
    x_cols: *const c_char,
    out: *mut *mut SaqeSample,
) -> SaqeStatus {
    guard(|| {
        let schema = SurveySchema {
            area_col: string(area_col, "area_col")?,
            y_col: string(y_col, "y_col")?,
            x_cols: columns(&string(x_cols, "x_cols")?),
        };
        let sample = load_survey_csv(string(path, "path")?, &schema)?;
        store(out, SaqeSample(sample))
    })
}

/// Number of areas, or 0 for a NULL handle.
///
/// # Safety
/// `sample` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn saqe_sample_num_areas(sample: *const SaqeSample) -> usize {
    sample.as_ref().map_or(0, |s| s.0.num_areas())
}

/// # Safety
/// `sample` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn saqe_sample_free(sample: *mut SaqeSample) {
    if !sample.is_null() {
        drop(Box::from_raw(sample));
    }
}

/// Builds a unit-level census.
///
/// `sample_rank` is optional (NULL when unknown). Otherwise entry `i` is -1
/// for an unsampled unit, or the unit's position among its area's rows of
/// the survey sample.
///
/// # Safety
/// Every non-NULL pointer must be valid for the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn saqe_census_new(
    n_units: usize,
    d: usize,
    area_codes: *const i64,
    x: *const f64,
    sample_rank: *const i64,
    out: *mut *mut SaqeCensus,
) -> SaqeStatus {
    guard(|| {
        let codes = slice(area_codes, n_units, "area_codes")?;
        let x = slice(x, n_units * d, "x")?;
        let ranks = if sample_rank.is_null() { None } else { Some(slice(sample_rank, n_units, "sample_rank")?) };
        let areas = group_rows(codes)
            .into_iter()
            .map(|(code, rows)| {
                let xs = rows.iter().flat_map(|&i| x[i * d..(i + 1) * d].iter().copied()).collect();
                let link = ranks.map(|r| sample_link(code, &rows, r)).transpose()?;
                CensusArea::full(code.to_string(), d, xs, link)
            })
            .collect::<saqe::Result<Vec<_>>>()?;
        store(out, SaqeCensus(CensusFrame::new(areas)?))
    })
}

fn sample_link(code: i64, rows: &[usize], ranks: &[i64]) -> saqe::Result<Vec<usize>> {
    let mut pairs: Vec<(i64, usize)> =
        rows.iter().enumerate().filter(|(_, &i)| ranks[i] >= 0).map(|(j, &i)| (ranks[i], j)).collect();
    pairs.sort_unstable();
    for (expected, &(r, _)) in pairs.iter().enumerate() {
        if r != expected as i64 {
            return Err(Error::Validation(format!(
                "census area {code}: sample ranks must be 0..n_k without gaps, found {r} at position {expected}"
            )));
        }
    }
    Ok(pairs.into_iter().map(|(_, j)| j).collect())
}

/// Loads a census CSV. `sampled_col` may be NULL.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn saqe_census_load_csv(
    path: *const c_char,
    area_col: *const c_char,
    x_cols: *const c_char,
    sampled_col: *const c_char,
    out: *mut *mut SaqeCensus,
) -> SaqeStatus {
    guard(|| {
        let schema = CensusSchema {
            area_col: string(area_col, "area_col")?,
            x_cols: columns(&string(x_cols, "x_cols")?),
            sampled_col: optional_string(sampled_col, "sampled_col")?,
            ..CensusSchema::default()
        };
        let census = load_census_csv(string(path, "path")?, &schema)?;
        store(out, SaqeCensus(census))
    })
}

/// # Safety
/// `census` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn saqe_census_free(census: *mut SaqeCensus) {
    if !census.is_null() {
        drop(Box::from_raw(census));
    }
}

/// Maximum-likelihood NER fit. `census` may be NULL, in which case the EBLUP
/// falls back to sample covariate means.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn saqe_fit_ner(
    sample: *const SaqeSample,
    census: *const SaqeCensus,
    out: *mut *mut SaqeNerFit,
) -> SaqeStatus {
    guard(|| {
        let sample = reference(sample, "sample")?;
        let census = census.as_ref().map(|c| &c.0);
        let fit = fit_ner_mle(&sample.0, census, &PredictSettings::default().ner)?;
        store(out, SaqeNerFit(fit))
    })
}

/// Writes the area and unit variance components.
///
/// # Safety
/// `fit` must be live; the output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn saqe_ner_variances(fit: *const SaqeNerFit, sigma_v2: *mut f64, sigma_e2: *mut f64) -> SaqeStatus {
    guard(|| {
        let fit = reference(fit, "fit")?;
        if sigma_v2.is_null() || sigma_e2.is_null() {
            return Err(Failure::Null("variance outputs"));
        }
        *sigma_v2 = fit.0.sigma_v2;
        *sigma_e2 = fit.0.sigma_e2;
        Ok(())
    })
}

/// Copies the regression coefficients (intercept first) into `out` and
/// writes their count to `len`. Call with `cap = 0` to query the count.
///
/// # Safety
/// `fit` must be live; `out` must hold `cap` values; `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn saqe_ner_beta(fit: *const SaqeNerFit, out: *mut f64, cap: usize, len: *mut usize) -> SaqeStatus {
    guard(|| {
        let fit = reference(fit, "fit")?;
        if len.is_null() {
            return Err(Failure::Null("len"));
        }
        *len = fit.0.beta.len();
        write_out(&fit.0.beta, out, cap)
    })
}

/// # Safety
/// `fit` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn saqe_ner_free(fit: *mut SaqeNerFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// Density ratio model fit with the default basis and baseline.
///
/// # Safety
/// `sample` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn saqe_fit_drm(sample: *const SaqeSample, out: *mut *mut SaqeDrmFit) -> SaqeStatus {
    guard(|| {
        let sample = reference(sample, "sample")?;
        let fit = fit_drm_sample(&sample.0, &PredictSettings::default().drm, None)?;
        store(out, SaqeDrmFit(fit))
    })
}

/// Largest deviation of a fitted area distribution's total mass from one,
/// or NaN for a NULL handle.
///
/// # Safety
/// `fit` must be NULL or live.
#[no_mangle]
pub unsafe extern "C" fn saqe_drm_max_constraint_violation(fit: *const SaqeDrmFit) -> f64 {
    fit.as_ref().map_or(f64::NAN, |f| f.0.max_constraint_violation())
}

/// # Safety
/// `fit` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn saqe_drm_free(fit: *mut SaqeDrmFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// Predicts area quantiles with one method (`"dir"`, `"ner"`, `"el"`,
/// `"ebel2"`, ...). Writes `num_areas x n_alphas` values row-major in sample
/// area order.
///
/// # Safety
/// `sample` must be live, `census` NULL or live, `alphas` valid for
/// `n_alphas` values and `out` for `cap` values.
#[no_mangle]
pub unsafe extern "C" fn saqe_predict(
    sample: *const SaqeSample,
    census: *const SaqeCensus,
    method: *const c_char,
    alphas: *const f64,
    n_alphas: usize,
    seed: u64,
    out: *mut f64,
    cap: usize,
) -> SaqeStatus {
    guard(|| {
        let sample = &reference(sample, "sample")?.0;
        let census = census.as_ref().map(|c| &c.0);
        let method: Method = string(method, "method")?.parse()?;
        let alphas = slice(alphas, n_alphas, "alphas")?;
        let needed = sample.num_areas() * alphas.len();
        if cap < needed {
            return Err(Failure::Buffer { needed, given: cap });
        }
        let settings = PredictSettings::default();
        let fits = fit_models(sample, census, &[method], &settings, None)?;
        let table = predict_quantiles(method, sample, census, &fits, alphas, &settings, RngStream::new(seed, 0))?;
        let flat: Vec<f64> = table.values.concat();
        write_out(&flat, out, cap)
    })
}

/// Parametric bootstrap MSE of one method with its natural bootstrap
/// variant. Writes `num_areas x n_alphas` values row-major.
///
/// # Safety
/// As for [`saqe_predict`].
#[no_mangle]
pub unsafe extern "C" fn saqe_bootstrap_mse(
    sample: *const SaqeSample,
    census: *const SaqeCensus,
    method: *const c_char,
    alphas: *const f64,
    n_alphas: usize,
    replicates: usize,
    seed: u64,
    out: *mut f64,
    cap: usize,
) -> SaqeStatus {
    guard(|| {
        let sample = &reference(sample, "sample")?.0;
        let census = census.as_ref().map(|c| &c.0);
        let method: Method = string(method, "method")?.parse()?;
        let alphas = slice(alphas, n_alphas, "alphas")?.to_vec();
        let needed = sample.num_areas() * alphas.len();
        if cap < needed {
            return Err(Failure::Buffer { needed, given: cap });
        }
        check_requirements(&[method], census)?;
        let settings = PredictSettings::default();
        let fits = fit_models(sample, census, &[Method::Ner, Method::El], &settings, None)?;
        let inputs = BootstrapInputs {
            sample,
            census,
            ner: fits.ner.as_ref().expect("NER fit requested"),
            drm: fits.drm.as_ref(),
        };
        let variant = Variant::natural_for(method, census.is_some());
        let plan = BootstrapPlan { replicates, variant, alphas, stream: RngStream::new(seed, 0) };
        let predictor = MethodPredictor::new(vec![method], settings, fits.drm.clone());
        let report = bootstrap_mse(&plan, &inputs, &predictor)?;
        let flat: Vec<f64> = report.mse[0].concat();
        write_out(&flat, out, cap)
    })
}
