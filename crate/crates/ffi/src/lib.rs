//! C ABI over the habitat pipeline.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! style functions and released with the matching `*_free`. Every fallible
//! call returns a [`HabitatStatus`]; the message of the last failure on the
//! calling thread is available from [`habitat_last_error`].

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use habitat::bayesopt::expected_improvement;
use habitat::clustering::label_distance;
use habitat::cohort::{generate_synthetic, read_cohort, Cohort, SurvivalRecord, SynthSpec};
use habitat::pipeline::{apply_bundle, run_experiment, write_run_dir, Application, ModelBundle, PipelineConfig};
use habitat::survival::{logrank_test, significance_loss, RiskGroup};
use habitat::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HabitatStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Io = 3,
    Parse = 4,
    ModalityMismatch = 5,
    Degenerate = 6,
    Runtime = 7,
    Panic = 8,
}

/// A patient cohort (pixel matrices plus survival records).
pub struct HabitatCohort(Cohort);

/// A fitted model bundle.
pub struct HabitatBundle(ModelBundle);

/// Result of applying a bundle to a cohort.
pub struct HabitatApplication(Application);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> HabitatStatus {
    match e {
        Error::InvalidInput(_) | Error::EmptyCohort | Error::ZeroVariance(_) | Error::DimensionMismatch { .. } => {
            HabitatStatus::InvalidInput
        }
        Error::Io(_) | Error::MissingPatientFile(_) => HabitatStatus::Io,
        Error::Parse { .. } | Error::MalformedManifest { .. } | Error::Json(_) => HabitatStatus::Parse,
        Error::ModalityMismatch { .. } => HabitatStatus::ModalityMismatch,
        Error::Degenerate(_) => HabitatStatus::Degenerate,
        Error::Stage { source, .. } => status_of(source),
        _ => HabitatStatus::Runtime,
    }
}

fn guard<F: FnOnce() -> Result<(), (HabitatStatus, String)>>(f: F) -> HabitatStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            HabitatStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            HabitatStatus::Panic
        }
    }
}

type FfiResult<T> = Result<T, (HabitatStatus, String)>;

fn lift<T>(r: habitat::Result<T>) -> FfiResult<T> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (HabitatStatus, String) {
    (HabitatStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> FfiResult<PathBuf> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (HabitatStatus::InvalidInput, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> FfiResult<&'a T> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> FfiResult<&'a mut T> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn habitat_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Reads a cohort from a directory or manifest path.
#[no_mangle]
pub unsafe extern "C" fn habitat_cohort_read(path: *const c_char, cohort_out: *mut *mut HabitatCohort) -> HabitatStatus {
    guard(|| {
        let slot = out(cohort_out, "cohort_out")?;
        let c = lift(read_cohort(&path_arg(path, "path")?))?;
        *slot = Box::into_raw(Box::new(HabitatCohort(c)));
        Ok(())
    })
}

/// Generates a planted synthetic cohort.
#[no_mangle]
pub unsafe extern "C" fn habitat_cohort_synthetic(
    n_patients: usize,
    n_regions: usize,
    height: usize,
    width: usize,
    seed: u64,
    cohort_out: *mut *mut HabitatCohort,
) -> HabitatStatus {
    guard(|| {
        let slot = out(cohort_out, "cohort_out")?;
        let (c, _) = lift(generate_synthetic(&SynthSpec::planted(n_patients, n_regions, (height, width), seed)))?;
        *slot = Box::into_raw(Box::new(HabitatCohort(c)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn habitat_cohort_n_patients(cohort: *const HabitatCohort) -> usize {
    cohort.as_ref().map_or(0, |c| c.0.n_patients())
}

#[no_mangle]
pub unsafe extern "C" fn habitat_cohort_free(cohort: *mut HabitatCohort) {
    if !cohort.is_null() {
        drop(Box::from_raw(cohort));
    }
}

/// Runs the full experiment and writes a run directory. `config_json` may be
/// NULL for defaults; otherwise it is a JSON object of pipeline settings.
#[no_mangle]
pub unsafe extern "C" fn habitat_run(
    cohort: *const HabitatCohort,
    config_json: *const c_char,
    out_dir: *const c_char,
) -> HabitatStatus {
    guard(|| {
        let cohort = deref(cohort, "cohort")?;
        let dir = path_arg(out_dir, "out_dir")?;
        let config: PipelineConfig = if config_json.is_null() {
            PipelineConfig::default()
        } else {
            let text = CStr::from_ptr(config_json)
                .to_str()
                .map_err(|_| (HabitatStatus::InvalidInput, "config_json is not UTF-8".to_string()))?;
            lift(serde_json::from_str(text).map_err(Error::from))?
        };
        let exp = lift(run_experiment(&cohort.0, &config, |_, _, _| {}))?;
        lift(write_run_dir(&dir, &cohort.0, &exp))
    })
}

/// Loads a bundle directory (the `bundle/` folder of a run).
#[no_mangle]
pub unsafe extern "C" fn habitat_bundle_load(dir: *const c_char, bundle_out: *mut *mut HabitatBundle) -> HabitatStatus {
    guard(|| {
        let slot = out(bundle_out, "bundle_out")?;
        let b = lift(ModelBundle::load(&path_arg(dir, "dir")?))?;
        *slot = Box::into_raw(Box::new(HabitatBundle(b)));
        Ok(())
    })
}

/// The (gamma, eta) the bundle was fitted at.
#[no_mangle]
pub unsafe extern "C" fn habitat_bundle_theta(bundle: *const HabitatBundle, gamma: *mut f64, eta: *mut usize) -> HabitatStatus {
    guard(|| {
        let b = deref(bundle, "bundle")?;
        *out(gamma, "gamma")? = b.0.theta.gamma;
        *out(eta, "eta")? = b.0.theta.eta;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn habitat_bundle_free(bundle: *mut HabitatBundle) {
    if !bundle.is_null() {
        drop(Box::from_raw(bundle));
    }
}

/// Segments and risk-groups every patient of `cohort` with `bundle`.
#[no_mangle]
pub unsafe extern "C" fn habitat_apply(
    bundle: *const HabitatBundle,
    cohort: *const HabitatCohort,
    application_out: *mut *mut HabitatApplication,
) -> HabitatStatus {
    guard(|| {
        let slot = out(application_out, "application_out")?;
        let b = deref(bundle, "bundle")?;
        let c = deref(cohort, "cohort")?;
        let app = lift(apply_bundle(&b.0, &c.0))?;
        *slot = Box::into_raw(Box::new(HabitatApplication(app)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn habitat_application_n_patients(app: *const HabitatApplication) -> usize {
    app.as_ref().map_or(0, |a| a.0.groups.len())
}

/// Writes 1 for the high-risk group and 0 for the low-risk group.
#[no_mangle]
pub unsafe extern "C" fn habitat_application_group(app: *const HabitatApplication, index: usize, is_high: *mut i32) -> HabitatStatus {
    guard(|| {
        let a = deref(app, "application")?;
        let g = a.0.groups.get(index).ok_or_else(|| {
            (
                HabitatStatus::InvalidInput,
                format!("index {index} out of range for {} patients", a.0.groups.len()),
            )
        })?;
        *out(is_high, "is_high")? = i32::from(*g == RiskGroup::High);
        Ok(())
    })
}

/// Log-rank statistic between the holdout risk groups; `Degenerate` when
/// one group is empty or has no events.
#[no_mangle]
pub unsafe extern "C" fn habitat_application_logrank(app: *const HabitatApplication, chi_square: *mut f64, p_value: *mut f64) -> HabitatStatus {
    guard(|| {
        let a = deref(app, "application")?;
        let lr = a
            .0
            .logrank
            .ok_or_else(|| (HabitatStatus::Degenerate, "log-rank undefined for this grouping".to_string()))?;
        *out(chi_square, "chi_square")? = lr.chi_square;
        *out(p_value, "p_value")? = lr.p_value;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn habitat_application_free(app: *mut HabitatApplication) {
    if !app.is_null() {
        drop(Box::from_raw(app));
    }
}

unsafe fn records(times: *const f64, events: *const u8, n: usize, tag: &str) -> FfiResult<Vec<SurvivalRecord>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if times.is_null() || events.is_null() {
        return Err(null(tag));
    }
    let t = std::slice::from_raw_parts(times, n);
    let e = std::slice::from_raw_parts(events, n);
    t.iter()
        .zip(e)
        .enumerate()
        .map(|(i, (&t, &e))| lift(SurvivalRecord::new(format!("{tag}{i}"), t, e != 0)))
        .collect()
}

/// Two-group log-rank test on raw (time, event) arrays.
#[no_mangle]
pub unsafe extern "C" fn habitat_logrank(
    times_a: *const f64,
    events_a: *const u8,
    n_a: usize,
    times_b: *const f64,
    events_b: *const u8,
    n_b: usize,
    chi_square: *mut f64,
    p_value: *mut f64,
) -> HabitatStatus {
    guard(|| {
        let a = records(times_a, events_a, n_a, "a")?;
        let b = records(times_b, events_b, n_b, "b")?;
        let lr = lift(logrank_test(&a, &b))?;
        *out(chi_square, "chi_square")? = lr.chi_square;
        *out(p_value, "p_value")? = lr.p_value;
        Ok(())
    })
}

/// Significance loss of a p-value at threshold `tau`; `oriented` is the
/// value minimized by the optimizer.
#[no_mangle]
pub unsafe extern "C" fn habitat_significance_loss(p: f64, tau: f64, raw: *mut f64, oriented: *mut f64) -> HabitatStatus {
    guard(|| {
        let s = lift(significance_loss(p, tau))?;
        *out(raw, "raw")? = s.raw;
        *out(oriented, "oriented")? = s.oriented;
        Ok(())
    })
}

/// Expected improvement (minimization) of a Gaussian prediction.
#[no_mangle]
pub extern "C" fn habitat_expected_improvement(mu: f64, sigma: f64, f_best: f64) -> f64 {
    expected_improvement(mu, sigma, f_best)
}

/// Fraction of points on which two labelings disagree under the best
/// matching of cluster indices.
#[no_mangle]
pub unsafe extern "C" fn habitat_label_distance(a: *const usize, b: *const usize, n: usize, eta: usize, distance: *mut f64) -> HabitatStatus {
    guard(|| {
        if a.is_null() || b.is_null() {
            return Err(null("labels"));
        }
        let a = std::slice::from_raw_parts(a, n);
        let b = std::slice::from_raw_parts(b, n);
        *out(distance, "distance")? = lift(label_distance(a, b, eta))?;
        Ok(())
    })
}
