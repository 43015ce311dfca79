//! C interface: opaque coefficient-family handles, Cordes certificates, the
//! closed-form effective Hamiltonian and single cell-problem solves.
//!
//! Every function returns an [`HjbStatus`]; on failure the message is kept
//! per thread and can be read with [`hjb_last_error`]. Panics are caught at
//! the boundary and reported as [`HjbStatus::Internal`].

// `!(x > 0.0)` deliberately rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use hjbfem::control::{select_lambda, CoefficientFamily, CordesCertificate, SampleGrid};
use hjbfem::homogenization::{exact_h, solve_cell, CellProblemSpec};
use hjbfem::Error;
use nalgebra::Matrix2;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HjbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    UnknownFamily = 3,
    CordesFailure = 4,
    NoConvergence = 5,
    LinearSolve = 6,
    NoExactHamiltonian = 7,
    Internal = 8,
}

impl From<&Error> for HjbStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::UnknownFamily(_) => Self::UnknownFamily,
            Error::CordesFailure(_) | Error::DegenerateCoefficients { .. } | Error::EmptyGrid => {
                Self::CordesFailure
            }
            Error::NoConvergence { .. } => Self::NoConvergence,
            Error::LinearSolve(_) => Self::LinearSolve,
            Error::NoExactHamiltonian(_) => Self::NoExactHamiltonian,
            Error::Element { source, .. } => Self::from(source.as_ref()),
            _ => Self::InvalidArgument,
        }
    }
}

/// Coefficient family together with its Cordes certificate.
pub struct HjbFamily {
    family: CoefficientFamily,
    certificate: CordesCertificate,
}

/// Outcome of one cell-problem solve.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct HjbCellResult {
    /// `H_{sigma,h}(R)`.
    pub value: f64,
    /// A posteriori estimator.
    pub eta: f64,
    pub iterations: usize,
    /// Final nonlinear residual.
    pub residual: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (HjbStatus, String)>) -> HjbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            HjbStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside hjbfem".into());
            HjbStatus::Internal
        }
    }
}

fn lib_err(e: Error) -> (HjbStatus, String) {
    (HjbStatus::from(&e), e.to_string())
}

fn null(what: &str) -> (HjbStatus, String) {
    (HjbStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `r` must be null or point to four readable doubles.
unsafe fn read_r(r: *const f64) -> Result<Matrix2<f64>, (HjbStatus, String)> {
    if r.is_null() {
        return Err(null("r"));
    }
    let r = std::slice::from_raw_parts(r, 4);
    Ok(Matrix2::new(r[0], r[1], r[2], r[3]))
}

/// Creates a handle for the built-in family `name` ("fo-benchmark",
/// "fo-benchmark-a1zero", "manufactured", "laplace") and certifies the
/// Cordes condition on a `samples` x `samples` grid.
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn hjb_family_new(
    name: *const c_char,
    samples: usize,
    out: *mut *mut HjbFamily,
) -> HjbStatus {
    guard(|| {
        if name.is_null() {
            return Err(null("name"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let name = CStr::from_ptr(name)
            .to_str()
            .map_err(|_| (HjbStatus::InvalidArgument, "name is not UTF-8".to_string()))?;
        let family = CoefficientFamily::by_name(name).map_err(lib_err)?;
        let certificate = select_lambda(&family, &SampleGrid::new(samples)).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(HjbFamily {
            family,
            certificate,
        }));
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `family` must come from [`hjb_family_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hjb_family_free(family: *mut HjbFamily) {
    if !family.is_null() {
        drop(Box::from_raw(family));
    }
}

/// Certified Cordes parameters `lambda` and `delta`.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn hjb_family_certificate(
    family: *const HjbFamily,
    lambda: *mut f64,
    delta: *mut f64,
) -> HjbStatus {
    guard(|| {
        let f = family.as_ref().ok_or_else(|| null("family"))?;
        if lambda.is_null() || delta.is_null() {
            return Err(null("output"));
        }
        *lambda = f.certificate.lambda;
        *delta = f.certificate.delta;
        Ok(())
    })
}

/// Closed-form effective Hamiltonian at the row-major symmetric matrix `r`
/// (benchmark families only).
///
/// # Safety
/// `family` must be a live handle, `r` four readable doubles, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hjb_exact_h(
    family: *const HjbFamily,
    r: *const f64,
    out: *mut f64,
) -> HjbStatus {
    guard(|| {
        let f = family.as_ref().ok_or_else(|| null("family"))?;
        let r = read_r(r)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = exact_h(&f.family, &r).map_err(lib_err)?;
        Ok(())
    })
}

/// Solves the cell problem at `(s, p) = 0` and Hessian `r` on an `n x n`
/// periodic mesh with regularisation `sigma`.
///
/// # Safety
/// `family` must be a live handle, `r` four readable doubles, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hjb_cell_solve(
    family: *const HjbFamily,
    r: *const f64,
    sigma: f64,
    n: usize,
    tol: f64,
    max_iter: usize,
    out: *mut HjbCellResult,
) -> HjbStatus {
    guard(|| {
        let f = family.as_ref().ok_or_else(|| null("family"))?;
        let r = read_r(r)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if !(tol > 0.0) || max_iter == 0 {
            return Err((
                HjbStatus::InvalidArgument,
                "tol and max_iter must be positive".into(),
            ));
        }
        let spec = CellProblemSpec::hessian(r, sigma).map_err(lib_err)?;
        let s = solve_cell(&f.family, &f.certificate, &spec, n, tol, max_iter).map_err(lib_err)?;
        *out = HjbCellResult {
            value: s.value,
            eta: s.estimator.eta,
            iterations: s.state.iterations,
            residual: s.state.final_residual(),
        };
        Ok(())
    })
}

/// Copies the calling thread's last error message (NUL-terminated,
/// truncated to `len`) into `buf` and returns the full message length
/// without the terminator. `buf` may be null to query the length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn hjb_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hjb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
