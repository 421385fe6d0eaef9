//! C ABI for the casco workbench.
//!
//! Programs are opaque `CascoProgram` handles. Every fallible function returns
//! a `CascoStatus`; on failure `casco_last_error()` describes the problem.
//! Strings returned through `char **` are owned by the caller and must be
//! released with `casco_string_free`. Panics never cross the boundary.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use casco::checker::{Check, CheckKind, Verdict};
use casco::compiler::{compile, fence_count, CompilerPolicy};
use casco::config::Config;
use casco::contracts::{contract_trace, ContractId};
use casco::hardware::{hw_trace, HardwareModelId};
use casco::isa::{arch_trace, parse_program, Program};

/// Opaque handle to a parsed program.
pub struct CascoProgram {
    inner: Program,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CascoStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// The program source or configuration did not parse.
    ParseError = 3,
    /// An unknown contract, model, policy or check kind, or an invalid configuration.
    InvalidArgument = 4,
    /// Execution trapped.
    ExecutionError = 5,
    /// Internal error; the library caught a panic.
    Panic = 99,
}

/// Verdict of a relational check.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CascoVerdict {
    Pass = 0,
    Fail = 1,
    Vacuous = 2,
    Inconclusive = 3,
}

impl From<Verdict> for CascoVerdict {
    fn from(v: Verdict) -> Self {
        match v {
            Verdict::Pass => CascoVerdict::Pass,
            Verdict::Fail => CascoVerdict::Fail,
            Verdict::Vacuous => CascoVerdict::Vacuous,
            Verdict::Inconclusive => CascoVerdict::Inconclusive,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Error(CascoStatus, String);

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

/// Runs `f`, turning errors and panics into a status and the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Error>) -> CascoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CascoStatus::Ok
        }
        Ok(Err(Error(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal error");
            CascoStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Error> {
    if p.is_null() {
        return Err(Error(CascoStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Error(CascoStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Error> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, what).map(Some)
    }
}

unsafe fn program_arg<'a>(p: *const CascoProgram) -> Result<&'a Program, Error> {
    p.as_ref().map(|h| &h.inner).ok_or_else(|| Error(CascoStatus::NullArgument, "program is null".into()))
}

fn out_arg<T>(p: *mut T) -> Result<(), Error> {
    if p.is_null() {
        Err(Error(CascoStatus::NullArgument, "output pointer is null".into()))
    } else {
        Ok(())
    }
}

fn invalid(e: impl ToString) -> Error {
    Error(CascoStatus::InvalidArgument, e.to_string())
}

fn config_arg(toml: Option<&str>) -> Result<Config, Error> {
    match toml {
        None => Ok(Config::default()),
        Some(t) => Config::from_toml(t).map_err(|e| Error(CascoStatus::ParseError, e.to_string())),
    }
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), Error> {
    let c = CString::new(s).map_err(|_| Error(CascoStatus::Panic, "output contains NUL".into()))?;
    *out = c.into_raw();
    Ok(())
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn casco_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or "" after a success.
/// Valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn casco_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Parses program source text. On success `*out` owns a new handle.
#[no_mangle]
pub unsafe extern "C" fn casco_program_parse(source: *const c_char, out: *mut *mut CascoProgram) -> CascoStatus {
    guard(|| {
        out_arg(out)?;
        let src = str_arg(source, "source")?;
        let inner = parse_program(src).map_err(|e| Error(CascoStatus::ParseError, e.to_string()))?;
        *out = Box::into_raw(Box::new(CascoProgram { inner }));
        Ok(())
    })
}

/// Releases a program handle. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn casco_program_free(program: *mut CascoProgram) {
    if !program.is_null() {
        drop(Box::from_raw(program));
    }
}

/// Canonical source text of a program.
#[no_mangle]
pub unsafe extern "C" fn casco_program_to_text(program: *const CascoProgram, out: *mut *mut c_char) -> CascoStatus {
    guard(|| {
        out_arg(out)?;
        let p = program_arg(program)?;
        write_string(out, p.to_string())
    })
}

/// Number of `fence` instructions in a program, or -1 if `program` is null.
#[no_mangle]
pub unsafe extern "C" fn casco_program_fence_count(program: *const CascoProgram) -> i64 {
    match program.as_ref() {
        Some(h) => fence_count(&h.inner) as i64,
        None => -1,
    }
}

/// Compiles `program` for `contract` (`seq-ct`, `spec-ct`, `arch-seq`,
/// `ct-pc-spec`) with `policy` (`identity`, `baseline`, `optimized`).
/// `config_toml` may be null for the defaults.
#[no_mangle]
pub unsafe extern "C" fn casco_compile(
    program: *const CascoProgram,
    contract: *const c_char,
    policy: *const c_char,
    config_toml: *const c_char,
    out: *mut *mut CascoProgram,
) -> CascoStatus {
    guard(|| {
        out_arg(out)?;
        let p = program_arg(program)?;
        let c: ContractId = str_arg(contract, "contract")?.parse().map_err(invalid)?;
        let pol: CompilerPolicy = str_arg(policy, "policy")?.parse().map_err(invalid)?;
        let config = config_arg(opt_str_arg(config_toml, "config")?)?;
        config.contract.validate().map_err(invalid)?;
        let inner = compile(c, pol, p, &config.contract);
        *out = Box::into_raw(Box::new(CascoProgram { inner }));
        Ok(())
    })
}

/// Trace of `program` as a JSON array. `semantics` is `arch`, a contract
/// name, or a hardware model name.
#[no_mangle]
pub unsafe extern "C" fn casco_trace_json(
    program: *const CascoProgram,
    semantics: *const c_char,
    config_toml: *const c_char,
    out: *mut *mut c_char,
) -> CascoStatus {
    guard(|| {
        out_arg(out)?;
        let p = program_arg(program)?;
        let sem = str_arg(semantics, "semantics")?;
        let mut config = config_arg(opt_str_arg(config_toml, "config")?)?;
        let exec = |e: &dyn ToString| Error(CascoStatus::ExecutionError, e.to_string());
        let json = if sem == "arch" {
            config.contract.validate().map_err(invalid)?;
            let t = arch_trace(p, config.contract.max_steps).map_err(|e| exec(&e))?;
            serde_json::to_string(&t.obs)
        } else if let Ok(c) = sem.parse::<ContractId>() {
            config.contract.validate().map_err(invalid)?;
            let t = contract_trace(c, p, &config.contract).map_err(|e| exec(&e))?;
            serde_json::to_string(&t.labels)
        } else if let Ok(m) = sem.parse::<HardwareModelId>() {
            config.hardware.model = m;
            config.hardware.validate().map_err(invalid)?;
            let t = hw_trace(p, &config.hardware).map_err(|e| exec(&e))?;
            serde_json::to_string(&t.obs)
        } else {
            return Err(invalid(format!("unknown semantics `{sem}`")));
        };
        write_string(out, json.expect("traces serialize"))
    })
}

/// Runs a relational check and writes the JSON report. `kind` is `hw`,
/// `compiler` or `e2e`; `model` is needed for `hw`/`e2e` and `policy` for
/// `compiler`/`e2e` (otherwise they may be null). `verdict` may be null.
#[no_mangle]
pub unsafe extern "C" fn casco_check_json(
    program: *const CascoProgram,
    kind: *const c_char,
    contract: *const c_char,
    model: *const c_char,
    policy: *const c_char,
    config_toml: *const c_char,
    verdict: *mut CascoVerdict,
    out: *mut *mut c_char,
) -> CascoStatus {
    guard(|| {
        out_arg(out)?;
        let p = program_arg(program)?;
        let kind = match str_arg(kind, "kind")? {
            "hw" => CheckKind::Hw,
            "compiler" => CheckKind::Compiler,
            "e2e" => CheckKind::E2e,
            other => return Err(invalid(format!("unknown check kind `{other}`"))),
        };
        let contract: ContractId = str_arg(contract, "contract")?.parse().map_err(invalid)?;
        let model: Option<HardwareModelId> =
            opt_str_arg(model, "model")?.map(str::parse).transpose().map_err(invalid)?;
        let policy: Option<CompilerPolicy> =
            opt_str_arg(policy, "policy")?.map(str::parse).transpose().map_err(invalid)?;
        if kind != CheckKind::Compiler && model.is_none() {
            return Err(invalid(format!("the {kind} check needs a hardware model")));
        }
        let mut config = config_arg(opt_str_arg(config_toml, "config")?)?;
        if let Some(m) = model {
            config.hardware.model = m;
        }
        let check = Check {
            kind,
            contract,
            contract_config: config.contract,
            hardware: config.hardware,
            policy,
            parallel: false,
        };
        let report = check.run(p, &config.pairs.to_spec()).map_err(invalid)?;
        if !verdict.is_null() {
            *verdict = report.verdict.into();
        }
        write_string(out, serde_json::to_string(&report).expect("reports serialize"))
    })
}

/// Releases a string returned by this library. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn casco_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
