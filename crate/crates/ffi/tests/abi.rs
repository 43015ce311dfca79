use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use hjbfem_ffi::*;

fn family(name: &str, samples: usize) -> *mut HjbFamily {
    let name = CString::new(name).unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(
        unsafe { hjb_family_new(name.as_ptr(), samples, &mut out) },
        HjbStatus::Ok
    );
    assert!(!out.is_null());
    out
}

fn last_error() -> String {
    let len = unsafe { hjb_last_error(ptr::null_mut(), 0) };
    let mut buf = vec![0 as c_char; len + 1];
    unsafe { hjb_last_error(buf.as_mut_ptr(), buf.len()) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }
        .to_str()
        .unwrap()
        .to_string()
}

#[test]
fn benchmark_round_trip() {
    let f = family("fo-benchmark", 64);
    let (mut lambda, mut delta) = (0.0, 0.0);
    assert_eq!(
        unsafe { hjb_family_certificate(f, &mut lambda, &mut delta) },
        HjbStatus::Ok
    );
    assert!(lambda > 0.0 && (0.05..1.0).contains(&delta));

    let r = [-2.0, 1.0, 1.0, -3.0];
    let mut h = 0.0;
    assert_eq!(unsafe { hjb_exact_h(f, r.as_ptr(), &mut h) }, HjbStatus::Ok);
    assert!((h - 38.9429).abs() < 1e-3, "{h}");

    let mut res = HjbCellResult::default();
    assert_eq!(
        unsafe { hjb_cell_solve(f, r.as_ptr(), 0.01, 8, 1e-10, 50, &mut res) },
        HjbStatus::Ok
    );
    assert!(((res.value - h) / h).abs() < 1e-3);
    assert!(res.eta > 0.0 && res.iterations >= 1 && res.residual <= 1e-10);
    assert_eq!(last_error(), "");
    unsafe { hjb_family_free(f) };
}

#[test]
fn errors_are_reported() {
    let name = CString::new("no-such-family").unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(
        unsafe { hjb_family_new(name.as_ptr(), 8, &mut out) },
        HjbStatus::UnknownFamily
    );
    assert!(out.is_null());
    assert!(last_error().contains("no-such-family"));

    assert_eq!(
        unsafe { hjb_family_new(ptr::null(), 8, &mut out) },
        HjbStatus::NullPointer
    );
    assert_eq!(
        unsafe { hjb_family_new(name.as_ptr(), 8, ptr::null_mut()) },
        HjbStatus::NullPointer
    );

    let f = family("laplace", 8);
    let r = [1.0, 0.0, 0.0, 1.0];
    let mut h = 0.0;
    assert_eq!(
        unsafe { hjb_exact_h(f, r.as_ptr(), &mut h) },
        HjbStatus::NoExactHamiltonian
    );
    let asym = [1.0, 2.0, 0.0, 1.0];
    let mut res = HjbCellResult::default();
    assert_eq!(
        unsafe { hjb_cell_solve(f, asym.as_ptr(), 0.1, 4, 1e-10, 10, &mut res) },
        HjbStatus::InvalidArgument
    );
    assert_eq!(
        unsafe { hjb_cell_solve(f, r.as_ptr(), -1.0, 4, 1e-10, 10, &mut res) },
        HjbStatus::InvalidArgument
    );
    assert_eq!(
        unsafe { hjb_cell_solve(f, ptr::null(), 0.1, 4, 1e-10, 10, &mut res) },
        HjbStatus::NullPointer
    );

    // truncation keeps the terminator
    let mut small = [1 as c_char; 4];
    let full = unsafe { hjb_last_error(small.as_mut_ptr(), small.len()) };
    assert!(full > 3);
    assert_eq!(small[3], 0);
    unsafe { hjb_family_free(f) };
    unsafe { hjb_family_free(ptr::null_mut()) };
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(hjb_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export_and_compiles() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(dir.join("include/hjbfem.h")).unwrap();
    for sym in [
        "hjb_family_new",
        "hjb_family_free",
        "hjb_family_certificate",
        "hjb_exact_h",
        "hjb_cell_solve",
        "hjb_last_error",
        "hjb_version",
        "typedef struct HjbFamily HjbFamily",
        "HJB_STATUS_NO_CONVERGENCE = 5",
    ] {
        assert!(header.contains(sym), "{sym}");
    }
    // syntax check with the system C compiler when one is installed
    if let Ok(out) = Command::new("cc")
        .args(["-fsyntax-only", "-std=c99", "-Wall", "-Werror", "-x", "c"])
        .arg(dir.join("include/hjbfem.h"))
        .output()
    {
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}
