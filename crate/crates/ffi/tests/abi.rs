use std::ffi::{c_char, CStr, CString};
use std::ptr;

use aniso_extremal_ffi::*;

const LINEAR: &str = "[exponents]\np = [2.0, 2.0]\nlinear = true\n[grid]\nhalf_lengths = [1.0, 1.0]\ncounts = [7, 7]\n[solver]\ndelta = 0.0\ntol_residual = 1e-10\ntol_energy = 1e-13\n";

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    unsafe {
        ae_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

#[test]
fn linear_solve_through_handles() {
    let text = CString::new(LINEAR).unwrap();
    let mut cfg = ptr::null_mut();
    let mut res = ptr::null_mut();
    unsafe {
        assert_eq!(ae_config_parse(text.as_ptr(), &mut cfg), AeStatus::Ok);
        assert_eq!(ae_solve(cfg, &mut res), AeStatus::Ok);
        let mut s = AeSummary::default();
        assert_eq!(ae_result_summary(res, &mut s), AeStatus::Ok);
        assert!(s.converged);
        // half the smallest eigenvalue of the 5x5 interior Dirichlet Laplacian, h = 1/3
        let lam = 2.0 * 4.0 * 9.0 * (std::f64::consts::PI / 12.0).sin().powi(2);
        assert!((s.k_eps - 0.5 * lam).abs() < 1e-8 * lam, "{}", s.k_eps);

        let mut nodes = 0usize;
        let mut counts = [0usize; 2];
        assert_eq!(ae_result_shape(res, &mut nodes, counts.as_mut_ptr(), 2), AeStatus::Ok);
        assert_eq!((nodes, counts), (49, [7, 7]));
        let mut short = [0usize; 1];
        assert_eq!(ae_result_shape(res, &mut nodes, short.as_mut_ptr(), 1), AeStatus::BufferTooSmall);

        let mut vals = vec![0.0; nodes];
        assert_eq!(ae_result_values(res, vals.as_mut_ptr(), 10), AeStatus::BufferTooSmall);
        assert_eq!(ae_result_values(res, vals.as_mut_ptr(), nodes), AeStatus::Ok);
        let norm2: f64 = vals.iter().map(|v| v * v).sum::<f64>() / 9.0;
        assert!((norm2 - 1.0).abs() < 1e-12);
        assert_eq!(vals[0], 0.0);
        // symmetric under the swap of the two axes
        assert!((vals[7 * 2 + 3] - vals[7 * 3 + 2]).abs() < 1e-8);

        ae_result_free(res);
        ae_config_free(cfg);
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    unsafe {
        let mut cfg = ptr::null_mut();
        assert_eq!(ae_config_parse(ptr::null(), &mut cfg), AeStatus::NullPointer);
        let bad = CString::new("[exponents]\np = [1.0]\nbogus = 1\n").unwrap();
        assert_eq!(ae_config_parse(bad.as_ptr(), &mut cfg), AeStatus::Config);
        assert!(cfg.is_null());
        assert!(last_error().contains("bogus"), "{}", last_error());

        let sup = CString::new("[exponents]\np = [1.0, 1.0, 2.5]\n[grid]\nhalf_lengths = [1.0, 1.0, 1.0]\ncounts = [5, 5, 5]\n").unwrap();
        assert_eq!(ae_config_parse(sup.as_ptr(), &mut cfg), AeStatus::Ok);
        let mut res = ptr::null_mut();
        assert_eq!(ae_solve(cfg, &mut res), AeStatus::Exponents);
        assert!(res.is_null());
        assert!(last_error().starts_with("SupercriticalExponent"));
        ae_config_free(cfg);
        ae_config_free(ptr::null_mut());
        ae_result_free(ptr::null_mut());
    }
}

#[test]
fn exponent_queries() {
    let p = [2.0, 1.0, 2.0];
    let mut ps = 0.0;
    let (mut pse, mut lam) = (0.0, 0.0);
    unsafe {
        assert_eq!(ae_critical_exponent(p.as_ptr(), 3, &mut ps), AeStatus::Ok);
        assert_eq!(ae_epsilon_exponents(p.as_ptr(), 3, 0.1, &mut pse, &mut lam), AeStatus::Ok);
        assert_eq!(ae_epsilon_exponents(p.as_ptr(), 3, 2.0, &mut pse, &mut lam), AeStatus::Exponents);
    }
    // N / (N1 + sum 1/p_i - 1) = 3 / (1 + 1/2 + 1/2 - 1)
    assert_eq!(ps, 3.0);
    assert!(lam > 1.0 && (lam * ps - pse).abs() < 1e-12 * pse);
    let v = unsafe { CStr::from_ptr(ae_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
