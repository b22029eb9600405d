mod common;

use magi::kernels::bessel::{bessel_k, bessel_k_ladder, gamma};
use magi::kernels::{
    build_gp_bundle, dense_gp_matrices, general_matern, kernel_derivs, KernelKind, KernelSpec,
    GENERAL_MATERN_NU,
};
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;

use common::{bessel_k_integral, MATERN_REFERENCE};

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

#[test]
fn general_matern_matches_high_precision_reference() {
    let mut worst = 0.0f64;
    for &(phi1, phi2, r, k, k1, k2) in &MATERN_REFERENCE {
        let (a, a1, a2) = general_matern(phi1, phi2, GENERAL_MATERN_NU, r);
        worst = worst.max(rel_err(a, k)).max(rel_err(a1, k1)).max(rel_err(a2, k2));
    }
    assert!(worst < 1e-10, "worst relative error {worst:e}");
}

#[test]
fn bessel_ladder_matches_integral_representation() {
    let nu = GENERAL_MATERN_NU;
    let mut worst = 0.0f64;
    // z = sqrt(2ν) r/φ₂ for r/φ₂ ∈ [1e-6, 50].
    let zmax = (2.0 * nu).sqrt() * 50.0;
    let zmin = (2.0 * nu).sqrt() * 1e-6;
    for i in 0..=120 {
        let z = zmin * (zmax / zmin).powf(i as f64 / 120.0);
        let (k0, k1, k2) = bessel_k_ladder(nu, z);
        worst = worst
            .max(rel_err(k0, bessel_k_integral(nu, z)))
            .max(rel_err(k1, bessel_k_integral(nu - 1.0, z)))
            .max(rel_err(k2, bessel_k_integral(nu - 2.0, z)));
    }
    assert!(worst < 1e-10, "worst relative error {worst:e}");
}

#[test]
fn matern_kernel_matches_integral_oracle() {
    let nu = GENERAL_MATERN_NU;
    let (phi1, phi2) = (1.7, 2.3);
    let a = (2.0 * nu).sqrt() / phi2;
    let c = phi1 * 2f64.powf(1.0 - nu) / gamma(nu);
    let mut worst = 0.0f64;
    for i in 0..=60 {
        let u = 1e-6 * (50.0f64 / 1e-6).powf(i as f64 / 60.0);
        let r = u * phi2;
        let z = a * r;
        let zn = z.powf(nu);
        let k = c * zn * bessel_k_integral(nu, z);
        let k1 = -c * a * zn * bessel_k_integral(nu - 1.0, z);
        let k2 = c * a * a * (zn * bessel_k_integral(nu - 2.0, z) - zn / z * bessel_k_integral(nu - 1.0, z));
        let (b, b1, b2) = general_matern(phi1, phi2, nu, r);
        worst = worst.max(rel_err(b, k)).max(rel_err(b1, k1)).max(rel_err(b2, k2));
    }
    assert!(worst < 1e-10, "worst relative error {worst:e}");
}

#[test]
fn bessel_other_orders() {
    // K_0(1) and K_1(1) from standard tables.
    assert!(rel_err(bessel_k(0.0, 1.0), 0.42102443824070833334) < 1e-14);
    assert!(rel_err(bessel_k(1.0, 1.0), 0.60190723019723457474) < 1e-14);
    assert!(rel_err(bessel_k(2.01, 3.7), bessel_k_integral(2.01, 3.7)) < 1e-12);
}

fn any_spec() -> impl Strategy<Value = KernelSpec> {
    (0usize..5, 0.1f64..5.0, 0.2f64..4.0, 1.0f64..6.0).prop_map(|(k, p1, p2, p3)| {
        let kind = KernelKind::ALL[k];
        let phi = if kind == KernelKind::PeriodicMatern { vec![p1, p2, p3] } else { vec![p1, p2] };
        KernelSpec::new(kind, phi).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn derivatives_match_finite_differences(spec in any_spec(), s in -5.0f64..5.0, t in -5.0f64..5.0) {
        let phi1 = spec.phi()[0];
        let phi2 = spec.phi()[1];
        let d = kernel_derivs(&spec, s, t);
        let h = 1e-5 * phi2;
        let kp = kernel_derivs(&spec, s + h, t);
        let km = kernel_derivs(&spec, s - h, t);
        let fd_s = (kp.k - km.k) / (2.0 * h);
        let fd_t = (kernel_derivs(&spec, s, t + h).k - kernel_derivs(&spec, s, t - h).k) / (2.0 * h);
        let fd_st = (kernel_derivs(&spec, s, t + h).dk_ds - kernel_derivs(&spec, s, t - h).dk_ds) / (2.0 * h);
        let s1 = phi1 / phi2;
        let s2 = phi1 / (phi2 * phi2);
        prop_assert!((fd_s - d.dk_ds).abs() <= 1e-6 * (d.dk_ds.abs() + s1), "{:?}: {} vs {}", spec, fd_s, d.dk_ds);
        prop_assert!((fd_t - d.dk_dt).abs() <= 1e-6 * (d.dk_dt.abs() + s1));
        prop_assert!((fd_st - d.d2k_dsdt).abs() <= 1e-5 * (d.d2k_dsdt.abs() + s2), "{:?}: {} vs {}", spec, fd_st, d.d2k_dsdt);
    }

    #[test]
    fn antisymmetric_first_derivatives(spec in any_spec(), s in -5.0f64..5.0, t in -5.0f64..5.0) {
        let d = kernel_derivs(&spec, s, t);
        prop_assert_eq!(d.dk_ds, -d.dk_dt);
        let e = kernel_derivs(&spec, t, s);
        prop_assert_eq!(d.k, e.k);
        prop_assert_eq!(d.d2k_dsdt, e.d2k_dsdt);
    }
}

fn min_eig(a: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(a.clone()).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn covariances_are_positive_semidefinite(
        kind_idx in 0usize..5,
        n in 2usize..100,
        gaps in proptest::collection::vec(0.05f64..1.0, 100),
        phi1 in 0.5f64..3.0,
        phi2 in 0.5f64..3.0,
    ) {
        let kind = KernelKind::ALL[kind_idx];
        let mut t = vec![0.0];
        for g in gaps.iter().take(n - 1) {
            t.push(t.last().unwrap() + g);
        }
        // The warped lag 2|sin(πδ/φ₃)| never exceeds 2, so the periodic
        // bandwidth lives on a smaller scale. Its period is kept longer than
        // the grid: points a whole period apart make C exactly singular.
        let phi = if kind == KernelKind::PeriodicMatern {
            vec![phi1, phi2 / 4.0, 1.5 * t[n - 1]]
        } else {
            vec![phi1, phi2]
        };
        let spec = KernelSpec::new(kind, phi).unwrap();
        let c = DMatrix::from_fn(n, n, |i, j| spec.k(t[i], t[j]));
        prop_assert!(min_eig(&c) > -1e-8 * phi1);
        // Ψ is a Schur complement of C; in floating point its rounding error
        // grows like eps·cond(C), so definiteness is only checked where C is
        // reasonably conditioned.
        let eig = SymmetricEigen::new(c.clone()).eigenvalues;
        let cond = eig.max() / eig.min().max(f64::MIN_POSITIVE);
        if cond < 1e8 {
            let dense = dense_gp_matrices(&t, &spec).unwrap();
            let scale = dense.kdd.diagonal().max();
            prop_assert!(min_eig(&dense.psi) > -1e-8 * scale, "{}", min_eig(&dense.psi));
        }
    }
}

#[test]
fn banded_quadratic_forms_track_dense() {
    let n = 161;
    let t: Vec<f64> = (0..n).map(|i| i as f64 * 0.125).collect();
    let spec = KernelSpec::new(KernelKind::GeneralMatern, vec![1.2, 1.0]).unwrap();
    let zero = vec![0.0; n];
    let bundle = build_gp_bundle(&t, &spec, &zero, &zero, 20).unwrap();
    let dense = dense_gp_matrices(&t, &spec).unwrap();
    // A draw from the prior itself, x = L z.
    let z = nalgebra::DVector::from_fn(n, |i, _| ((i * 7919 % 1000) as f64 / 1000.0 - 0.5) * 3.4);
    let xv = dense.c.clone().cholesky().unwrap().l() * z;
    let x: Vec<f64> = xv.iter().copied().collect();
    let mut scratch = vec![0.0; n];
    let banded = bundle.cinv.quad_form(&x, &mut scratch);
    let full = (xv.transpose() * &dense.cinv * &xv)[(0, 0)];
    assert!(rel_err(banded, full) < 1e-4, "{banded} vs {full}");
    let banded = bundle.psinv.quad_form(&x, &mut scratch);
    let full = (xv.transpose() * &dense.psinv * &xv)[(0, 0)];
    assert!(rel_err(banded, full) < 1e-4, "{banded} vs {full}");
}
