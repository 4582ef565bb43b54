//! C ABI over the `xva` engine.
//!
//! Every function returns an [`XvaStatus`]. On failure the message is kept in
//! thread-local storage and can be read with [`xva_last_error`]. Engine state
//! lives behind an opaque [`XvaEngine`] handle created by [`xva_engine_open`]
//! and released with [`xva_engine_free`]. Strings returned to the caller must be
//! released with [`xva_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use xva::bsde::{kva_bsde, kva_linear, KVAInputs};
use xva::cli_io::{self, RunConfig};
use xva::engine::{incremental_xva, run_full, Metric, XVAReport};
use xva::exposure::CreditSetup;
use xva::instruments::Portfolio;
use xva::risk_measure::{conditional_es, ConditionalSample, TermStructure};
use xva::XvaError;

/// Status codes shared with the command-line tool's exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XvaStatus {
    Ok = 0,
    InvalidArgument = 1,
    Config = 2,
    NoConvergence = 3,
    Io = 4,
    Panic = 5,
}

/// Transfer price of one added trade, all deltas as (with trade) minus (without).
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct XvaFtp {
    pub d_ucva: f64,
    pub d_mva: f64,
    pub d_fva: f64,
    pub d_kva: f64,
    pub d_trc: f64,
    pub ftp: f64,
}

/// Opaque engine handle.
pub struct XvaEngine {
    config: RunConfig,
    portfolio: Portfolio,
    credit: CreditSetup,
    report: Option<XVAReport>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &XvaError) -> XvaStatus {
    match e.root() {
        XvaError::Argument(_) => XvaStatus::InvalidArgument,
        _ => match e.exit_code() {
            3 => XvaStatus::NoConvergence,
            4 => XvaStatus::Io,
            _ => XvaStatus::Config,
        },
    }
}

struct Fail(XvaStatus, String);

impl From<XvaError> for Fail {
    fn from(e: XvaError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn bad(msg: &str) -> Fail {
    Fail(XvaStatus::InvalidArgument, msg.into())
}

/// Runs `f`, records any failure or panic, and returns the status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> XvaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            XvaStatus::Ok
        }
        Ok(Err(Fail(s, m))) => {
            set_error(m);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            XvaStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(bad(&format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| bad(&format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, n: usize, what: &str) -> Result<&'a [f64], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(bad(&format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn engine<'a>(h: *mut XvaEngine) -> Result<&'a mut XvaEngine, Fail> {
    h.as_mut().ok_or_else(|| bad("engine handle is null"))
}

/// Message of the last failed call on this thread, or null. Valid until the next call.
#[no_mangle]
pub extern "C" fn xva_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn xva_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a run configuration file together with the portfolio and credit files it names.
///
/// # Safety
/// `config_path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn xva_engine_open(config_path: *const c_char, out: *mut *mut XvaEngine) -> XvaStatus {
    guard(|| {
        if out.is_null() {
            return Err(bad("output pointer is null"));
        }
        *out = ptr::null_mut();
        let config = RunConfig::load(Path::new(str_arg(config_path, "config path")?))?;
        let (portfolio, credit) = config.load_inputs()?;
        *out = Box::into_raw(Box::new(XvaEngine {
            config,
            portfolio,
            credit,
            report: None,
        }));
        Ok(())
    })
}

/// # Safety
/// `h` must come from [`xva_engine_open`] and not have been freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn xva_engine_free(h: *mut XvaEngine) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Overrides the seed and path counts. Zero leaves a count unchanged.
///
/// # Safety
/// `h` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn xva_engine_set_paths(h: *mut XvaEngine, seed: u64, n_primary: usize, n_secondary: usize) -> XvaStatus {
    guard(|| {
        let e = engine(h)?;
        let c = &mut e.config.engine;
        c.seed = seed;
        if n_primary > 0 {
            c.n_primary = n_primary;
        }
        if n_secondary > 0 {
            c.n_secondary = n_secondary;
        }
        c.validate()?;
        Ok(())
    })
}

/// Prices the loaded book. The report is kept on the handle.
///
/// # Safety
/// `h` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn xva_engine_run(h: *mut XvaEngine) -> XvaStatus {
    guard(|| {
        let e = engine(h)?;
        e.report = None;
        e.report = Some(run_full(&e.portfolio, &e.credit, &e.config.model, &e.config.engine)?);
        Ok(())
    })
}

/// Reads one metric of the last report: `ucva`, `mva`, `fva_star`, `fva`, `kva`,
/// `ftdcva`, `ftddva`, `trc` or `loss_at_horizon`. `se` may be null; it is set to
/// NaN when the metric has no standard error.
///
/// # Safety
/// `h` must be a live handle, `name` a nul-terminated string, `value` valid.
#[no_mangle]
pub unsafe extern "C" fn xva_engine_metric(h: *mut XvaEngine, name: *const c_char, value: *mut f64, se: *mut f64) -> XvaStatus {
    guard(|| {
        let e = engine(h)?;
        let r = e.report.as_ref().ok_or_else(|| bad("no report; call xva_engine_run first"))?;
        let name = str_arg(name, "metric name")?;
        if value.is_null() {
            return Err(bad("value pointer is null"));
        }
        let m = match name {
            "ucva" => r.ucva,
            "mva" => r.mva,
            "fva_star" => r.fva_star,
            "fva" => r.fva,
            "kva" => r.kva,
            "ftdcva" => r.ftdcva,
            "ftddva" => r.ftddva,
            "loss_at_horizon" => r.loss_at_horizon,
            "trc" => Metric { value: r.trc, se: None },
            other => return Err(bad(&format!("unknown metric `{other}`"))),
        };
        *value = m.value;
        if !se.is_null() {
            *se = m.se.unwrap_or(f64::NAN);
        }
        Ok(())
    })
}

/// Last report as JSON, in the same form as `xva.json`. Free with [`xva_string_free`].
///
/// # Safety
/// `h` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn xva_engine_report_json(h: *mut XvaEngine, out: *mut *mut c_char) -> XvaStatus {
    guard(|| {
        let e = engine(h)?;
        if out.is_null() {
            return Err(bad("output pointer is null"));
        }
        let r = e.report.as_ref().ok_or_else(|| bad("no report; call xva_engine_run first"))?;
        *out = CString::new(cli_io::to_stable_json(r)).expect("JSON has no nul bytes").into_raw();
        Ok(())
    })
}

/// Writes the report files of the last run into `dir`.
///
/// # Safety
/// `h` must be a live handle and `dir` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn xva_engine_write_report(h: *mut XvaEngine, dir: *const c_char) -> XvaStatus {
    guard(|| {
        let e = engine(h)?;
        let r = e.report.as_ref().ok_or_else(|| bad("no report; call xva_engine_run first"))?;
        cli_io::emit_report(r, Path::new(str_arg(dir, "directory")?))?;
        Ok(())
    })
}

/// Prices the trade in `trade_path` against the loaded book and fills `out`.
///
/// # Safety
/// `h` must be a live handle, `trade_path` a nul-terminated string, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn xva_engine_incremental(h: *mut XvaEngine, trade_path: *const c_char, out: *mut XvaFtp) -> XvaStatus {
    guard(|| {
        let e = engine(h)?;
        if out.is_null() {
            return Err(bad("output pointer is null"));
        }
        let trade = cli_io::load_trade(Path::new(str_arg(trade_path, "trade path")?))?;
        e.credit.set_entities(&e.portfolio.with_trade(trade.clone())?)?;
        let r = incremental_xva(&e.portfolio, trade, &e.credit, &e.config.model, &e.config.engine)?;
        let f = r.ftp;
        *out = XvaFtp {
            d_ucva: f.d_ucva,
            d_mva: f.d_mva,
            d_fva: f.d_fva,
            d_kva: f.d_kva,
            d_trc: f.d_trc,
            ftp: f.ftp,
        };
        Ok(())
    })
}

/// Discounted capital cost on a time grid for a given capital and short-rate curve.
/// With `nonlinear` set the capital is floored at the KVA itself. Writes `n` values.
///
/// # Safety
/// All arrays must hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn xva_kva_curve(
    times: *const f64,
    capital: *const f64,
    rate: *const f64,
    n: usize,
    hurdle: f64,
    horizon: f64,
    nonlinear: bool,
    out: *mut f64,
) -> XvaStatus {
    guard(|| {
        let t = slice_arg(times, n, "times")?.to_vec();
        let inputs = KVAInputs {
            ec_curve: TermStructure::new(t.clone(), slice_arg(capital, n, "capital")?.to_vec())?,
            rate_curve: TermStructure::new(t, slice_arg(rate, n, "rate")?.to_vec())?,
            hurdle,
            horizon,
        };
        let sol = if nonlinear {
            kva_bsde(&inputs, xva::bsde::DEFAULT_TOL, xva::bsde::DEFAULT_MAX_ITER)?
        } else {
            kva_linear(&inputs)?
        };
        if n > 0 {
            if out.is_null() {
                return Err(bad("output pointer is null"));
            }
            std::slice::from_raw_parts_mut(out, n).copy_from_slice(&sol.value_curve.values);
        }
        Ok(())
    })
}

/// Expected shortfall at tail probability `alpha` of equally weighted samples.
///
/// # Safety
/// `values` must hold `n` values and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn xva_expected_shortfall(values: *const f64, n: usize, alpha: f64, out: *mut f64) -> XvaStatus {
    guard(|| {
        let v = slice_arg(values, n, "values")?;
        if out.is_null() {
            return Err(bad("output pointer is null"));
        }
        let s = ConditionalSample::uniform(v, &vec![true; n], 0.0);
        *out = conditional_es(&s, alpha)?;
        Ok(())
    })
}
