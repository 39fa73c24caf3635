use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use optistat_ffi::*;

unsafe fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    optistat_last_error(buf.as_mut_ptr(), buf.len());
    CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
}

struct Scalar {
    model: *mut OptistatModel,
    weights: *mut OptistatWeights,
}

impl Scalar {
    fn new(f: Option<f64>) -> Self {
        let (a, b, c, q, r) = ([-1.0], [1.0], [1.0], [1.0], [1.0]);
        let fv = [f.unwrap_or(0.0)];
        let q2 = usize::from(f.is_some());
        let mut model = ptr::null_mut();
        let mut weights = ptr::null_mut();
        unsafe {
            let s = optistat_model_new(
                1,
                1,
                a.as_ptr(),
                b.as_ptr(),
                0,
                ptr::null(),
                q2,
                fv.as_ptr(),
                1,
                c.as_ptr(),
                &mut model,
            );
            assert_eq!(s, OptistatStatus::Ok);
            assert_eq!(optistat_weights_new(1, 1, q.as_ptr(), r.as_ptr(), &mut weights), OptistatStatus::Ok);
        }
        Scalar { model, weights }
    }
}

impl Drop for Scalar {
    fn drop(&mut self) {
        unsafe {
            optistat_model_free(self.model);
            optistat_weights_free(self.weights);
        }
    }
}

#[test]
fn scalar_policy_iteration_matches_closed_form() {
    let s = Scalar::new(None);
    let p_star = 2f64.sqrt() - 1.0;
    let k1 = [0.0];
    let (mut p, mut k, mut iters) = ([0.0], [0.0], 0usize);
    unsafe {
        let st = optistat_standard_pi(s.model, s.weights, k1.as_ptr(), 50, 1e-12, p.as_mut_ptr(), k.as_mut_ptr(), &mut iters);
        assert_eq!(st, OptistatStatus::Ok);
    }
    assert!((p[0] - p_star).abs() < 1e-10);
    assert!((k[0] - p_star).abs() < 1e-10);
    assert!(iters <= 8);

    let mut p_oracle = [0.0];
    unsafe {
        assert_eq!(optistat_riccati_oracle(s.model, s.weights, 1e-12, p_oracle.as_mut_ptr()), OptistatStatus::Ok);
    }
    assert!((p_oracle[0] - p_star).abs() < 1e-10);

    let (mut pk, mut cost) = ([0.0], 0.0);
    unsafe {
        assert_eq!(optistat_policy_cost(s.model, s.weights, k1.as_ptr(), pk.as_mut_ptr(), &mut cost), OptistatStatus::Ok);
    }
    assert!((pk[0] - 0.5).abs() < 1e-14);
    assert!((cost - 0.5).abs() < 1e-14);
}

#[test]
fn admissibility_and_errors() {
    let s = Scalar::new(Some(0.5));
    let (mut adm, mut absc) = (false, 0.0);
    unsafe {
        assert_eq!(optistat_is_admissible(s.model, [0.0].as_ptr(), &mut adm, &mut absc), OptistatStatus::Ok);
        assert!(adm);
        assert!((absc + 2.0).abs() < 1e-12);
        assert_eq!(optistat_is_admissible(s.model, [-2.0].as_ptr(), &mut adm, &mut absc), OptistatStatus::Ok);
        assert!(!adm);
        let st = optistat_policy_cost(s.model, s.weights, [-2.0].as_ptr(), ptr::null_mut(), ptr::null_mut());
        assert_eq!(st, OptistatStatus::NotAdmissible);
        assert!(last_error().contains("admissible"));

        let st = optistat_is_admissible(ptr::null(), [0.0].as_ptr(), &mut adm, ptr::null_mut());
        assert_eq!(st, OptistatStatus::NullPointer);
        assert!(last_error().contains("model"));

        let mut w = ptr::null_mut();
        let st = optistat_weights_new(1, 1, [-1.0].as_ptr(), [1.0].as_ptr(), &mut w);
        assert_eq!(st, OptistatStatus::NotPositiveDefinite);
        assert!(w.is_null());
        assert_eq!(optistat_last_error(ptr::null_mut(), 0), last_error().len());
    }
}

#[test]
fn data_roundtrip_and_olsbpi() {
    let s = Scalar::new(None);
    let k1 = [0.0];
    let mut data = ptr::null_mut();
    unsafe {
        let st = optistat_collect_data(s.model, s.weights, k1.as_ptr(), 4000.0, 0.01, 1.0, 7, 0.0, &mut data);
        assert_eq!(st, OptistatStatus::Ok, "{}", last_error());
        assert!(optistat_data_cond_psi(data).is_finite());

        let dir = tempfile::tempdir().unwrap();
        let file = CString::new(dir.path().join("d.txt").to_str().unwrap()).unwrap();
        assert_eq!(optistat_data_save(data, file.as_ptr()), OptistatStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(optistat_data_load(file.as_ptr(), &mut loaded), OptistatStatus::Ok);
        assert_eq!(optistat_data_cond_psi(loaded), optistat_data_cond_psi(data));

        let mut a = [0.0; 5];
        let mut b = [0.0; 5];
        let mode = OptistatEvaluationMode::Ode;
        assert_eq!(optistat_olsbpi(data, k1.as_ptr(), 5, 50.0, mode, a.as_mut_ptr()), OptistatStatus::Ok);
        assert_eq!(optistat_olsbpi(loaded, k1.as_ptr(), 5, 50.0, mode, b.as_mut_ptr()), OptistatStatus::Ok);
        assert_eq!(a, b);
        assert!((a[4] - (2f64.sqrt() - 1.0)).abs() < 0.1, "{a:?}");

        let missing = CString::new("/nonexistent/dir/d.txt").unwrap();
        let mut none = ptr::null_mut();
        assert_eq!(optistat_data_load(missing.as_ptr(), &mut none), OptistatStatus::Io);

        optistat_data_free(data);
        optistat_data_free(loaded);
        optistat_data_free(ptr::null_mut());
        assert!(optistat_data_cond_psi(ptr::null()).is_nan());
    }
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(optistat_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/optistat.h");
    assert!(header.exists());
    let text = std::fs::read_to_string(&header).unwrap();
    for f in ["optistat_model_new", "optistat_olsbpi", "optistat_last_error", "OPTISTAT_STATUS_OK"] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"optistat.h\"\nint main(void) { OptistatModel *m = 0; optistat_model_free(m); return OPTISTAT_STATUS_OK; }\n",
    )
    .unwrap();
    let include = header.parent().unwrap();
    for (cc, extra) in [("cc", vec!["-std=c99"]), ("c++", vec!["-x", "c++"])] {
        let status = Command::new(cc)
            .args(["-fsyntax-only", "-Wall", "-Werror"])
            .args(&extra)
            .arg("-I")
            .arg(include)
            .arg(&src)
            .status();
        match status {
            Ok(s) => assert!(s.success(), "{cc} rejected the header"),
            Err(_) => eprintln!("{cc} not available; skipping"),
        }
    }
}
