#![allow(dead_code)]

use magi::kernels::{build_gp_bundle, kernel_derivs, KernelKind, KernelSpec};
use magi::ode::OdeSystem;
use magi::posterior::{log_posterior, FitState, PosteriorContext};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Log posterior computed with dense matrices and LU solves, never forming a
/// band or reusing the bundle code.
pub fn dense_log_posterior(ctx: &PosteriorContext, state: &FitState) -> f64 {
    let model = ctx.model();
    let t = ctx.grid();
    let (n, dd) = (t.len(), model.dim_x());
    let f = model.f(&state.theta, &state.x, t).unwrap();
    let mut total = 0.0;
    for d in 0..dd {
        let b = &ctx.bundles()[d];
        let spec = &b.spec;
        let c = DMatrix::from_fn(n, n, |i, j| kernel_derivs(spec, t[i], t[j]).k);
        let dk = DMatrix::from_fn(n, n, |i, j| kernel_derivs(spec, t[i], t[j]).dk_ds);
        let kd = DMatrix::from_fn(n, n, |i, j| kernel_derivs(spec, t[i], t[j]).dk_dt);
        let kdd = DMatrix::from_fn(n, n, |i, j| kernel_derivs(spec, t[i], t[j]).d2k_dsdt);
        let lu_c = c.clone().lu();
        let u = DVector::from_fn(n, |i, _| state.x[(i, d)] - b.mu[i]);
        let cu = lu_c.solve(&u).unwrap();
        let psi = &kdd - &dk * lu_c.solve(&kd).unwrap();
        let e = DVector::from_fn(n, |i, _| f[(i, d)] - b.dotmu[i]) - &dk * &cu;
        let lu_psi = psi.clone().lu();
        let pe = lu_psi.solve(&e).unwrap();
        let logdet_c = log_abs_det(&lu_c);
        let logdet_psi = log_abs_det(&lu_psi);
        total += (-0.5 * u.dot(&cu) - 0.5 * logdet_c - 0.5 * e.dot(&pe) - 0.5 * logdet_psi) / ctx.beta();
        total += log_likelihood_component(ctx, state, d);
    }
    total
}

fn log_abs_det(lu: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>) -> f64 {
    lu.u().diagonal().iter().map(|v| v.abs().ln()).sum()
}

/// Observation log likelihood of one component.
pub fn log_likelihood_component(ctx: &PosteriorContext, state: &FitState, d: usize) -> f64 {
    let mut ll = 0.0;
    for i in 0..ctx.grid().len() {
        if ctx.obs_mask()[(i, d)] {
            let s = state.sigma[d];
            let r = ctx.obs_values()[(i, d)] - state.x[(i, d)];
            ll -= 0.5 * (r * r / (s * s) + (2.0 * std::f64::consts::PI * s * s).ln());
        }
    }
    ll
}

pub fn log_likelihood(ctx: &PosteriorContext, state: &FitState) -> f64 {
    (0..ctx.model().dim_x()).map(|d| log_likelihood_component(ctx, state, d)).sum()
}

pub struct InstanceSpec {
    pub n: usize,
    pub span: f64,
    pub x_range: (f64, f64),
    pub theta_range: (f64, f64),
    pub band_size: usize,
    pub sigma_fixed: bool,
}

/// Random posterior on an evenly spaced grid with random observations,
/// hyper-parameters, prior means and tempering.
pub fn random_instance(model: &OdeSystem, spec: &InstanceSpec, seed: u64) -> (PosteriorContext, FitState) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (n, dd, p) = (spec.n, model.dim_x(), model.dim_theta());
    let dt = spec.span / (n - 1) as f64;
    let grid: Vec<f64> = (0..n).map(|i| i as f64 * dt).collect();
    let x = DMatrix::from_fn(n, dd, |_, _| rng.random_range(spec.x_range.0..spec.x_range.1));
    let theta: Vec<f64> = (0..p).map(|_| rng.random_range(spec.theta_range.0..spec.theta_range.1)).collect();
    let sigma: Vec<f64> = (0..dd).map(|_| rng.random_range(0.1..1.0)).collect();
    let mut mask = DMatrix::from_fn(n, dd, |_, _| rng.random_bool(0.6));
    mask[(0, 0)] = true;
    let values = DMatrix::from_fn(n, dd, |i, j| {
        if mask[(i, j)] {
            x[(i, j)] + rng.random_range(-0.5..0.5)
        } else {
            f64::NAN
        }
    });
    let bundles = (0..dd)
        .map(|_| {
            let phi = vec![rng.random_range(0.5..3.0), rng.random_range(2.0..5.0) * dt];
            let k = KernelSpec::new(KernelKind::GeneralMatern, phi).unwrap();
            let mu: Vec<f64> = (0..n).map(|_| rng.random_range(-0.3..0.3)).collect();
            let dotmu: Vec<f64> = (0..n).map(|_| rng.random_range(-0.3..0.3)).collect();
            build_gp_bundle(&grid, &k, &mu, &dotmu, spec.band_size).unwrap()
        })
        .collect();
    let beta = rng.random_range(1.0..4.0);
    let ctx = PosteriorContext::new(model.clone(), grid, values, mask, bundles, beta, spec.sigma_fixed, false).unwrap();
    (ctx, FitState { x, theta, sigma })
}

/// (phi1, phi2, r, k, dk/dr, d²k/dr²) for ν = 2.01, from 60-digit arithmetic
/// (mpmath besselk, derivatives by high-precision numerical differentiation).
pub const MATERN_REFERENCE: [(f64, f64, f64, f64, f64, f64); 28] = [
    (1.0, 1.0, 1.0e-6, 0.9999999999990049505, -1.9900990098529541507e-6, -1.990099009759921634),
    (1.0, 1.0, 0.0001, 0.99999999004950580558, -0.00019900986761584568077, -1.9900980419995262209),
    (1.0, 1.0, 0.01, 0.99990054056878391259, -0.019883691058526514671, -1.9852745265884961021),
    (1.0, 1.0, 0.1, 0.99029151436601618892, -0.19026388855237396473, -1.7649975465303086553),
    (1.0, 1.0, 0.5, 0.81282820544066617396, -0.60135853011498708963, -0.36463613602304400204),
    (1.0, 1.0, 1.0, 0.50790991758440499186, -0.55989328152445467797, 0.35092015848545493979),
    (1.0, 1.0, 1.5, 0.27694542150108221425, -0.361848125764561398, 0.38479970122836688664),
    (1.0, 1.0, 2.0, 0.13920003611076360819, -0.19993487732309873457, 0.25768248040739061573),
    (1.0, 1.0, 3.0, 0.030391677008123377781, -0.048352901071829200829, 0.073499287827014583178),
    (1.0, 1.0, 5.0, 0.0010670358810758689902, -0.001853713546471004563, 0.0031698412598565065844),
    (1.0, 1.0, 10.0, 1.2326134555167175642e-7, -2.2963437357932143868e-7, 4.2616102829676538634e-7),
    (1.0, 1.0, 20.0, 6.5770542421934463475e-16, -1.2705544110724774562e-15, 2.4521220892898213358e-15),
    (1.0, 1.0, 35.0, 1.3032488010269518185e-28, -2.5577711690332673106e-28, 5.0183610678289043882e-28),
    (1.0, 1.0, 50.0, 1.9234782882544784773e-41, -3.7991929202480159445e-41, 7.5029114664000233155e-41),
    (2.5, 0.3, 3.0e-7, 2.4999999999975123762, -0.000016584158415441284589, -55.280528048886712056),
    (2.5, 0.3, 0.00003, 2.4999999751237645139, -0.0016584155634653806731, -55.280501166653506137),
    (2.5, 0.3, 0.003, 2.4997513514219597815, -0.16569742548772095559, -55.146514627458225058),
    (2.5, 0.3, 0.03, 2.4757287859150404723, -1.5855324046031163727, -49.027709625841907091),
    (2.5, 0.3, 0.15, 2.0320705136016654349, -5.0113210842915590803, -10.128781556195666723),
    (2.5, 0.3, 0.3, 1.2697747939610124796, -4.6657773460371223164, 9.7477821801515261053),
    (2.5, 0.3, 0.45, 0.69236355375270553562, -3.01540104803801165, 10.688880589676857962),
    (2.5, 0.3, 0.6, 0.34800009027690902048, -1.6661239776924894547, 7.1578466779830726593),
    (2.5, 0.3, 0.9, 0.075979192520308444452, -0.40294084226524334024, 2.0416468840837384216),
    (2.5, 0.3, 1.5, 0.0026675897026896724754, -0.015447612887258371358, 0.0880511461071251829),
    (2.5, 0.3, 3.0, 3.0815336387917939106e-7, -1.9136197798276786557e-6, 0.000011837806341576816287),
    (2.5, 0.3, 6.0, 1.6442635605483615869e-15, -1.0587953425603978802e-14, 6.8114502480272814883e-14),
    (2.5, 0.3, 10.5, 3.2581220025673795463e-28, -2.1314759741943894255e-27, 1.3939891855080289967e-26),
    (2.5, 0.3, 15.0, 4.8086957206361961931e-41, -3.1659941002066799538e-40, 2.0841420740000064765e-39),
];

/// Largest absolute difference relative to the largest entry of `b` (at least 1).
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

/// Relative errors of the x, θ and σ gradients against central differences.
pub fn fd_check(ctx: &PosteriorContext, state: &FitState) -> (f64, f64, f64) {
    let an = log_posterior(state, ctx).unwrap();
    let value = |s: &FitState| log_posterior(s, ctx).unwrap().value;
    let step = |v: f64| 1e-6 * v.abs().max(1.0);

    let mut fd_x = Vec::new();
    for k in 0..state.x.len() {
        let h = step(state.x.as_slice()[k]);
        let mut sp = state.clone();
        sp.x.as_mut_slice()[k] += h;
        let mut sm = state.clone();
        sm.x.as_mut_slice()[k] -= h;
        fd_x.push((value(&sp) - value(&sm)) / (2.0 * h));
    }
    let mut fd_t = Vec::new();
    for k in 0..state.theta.len() {
        let h = step(state.theta[k]);
        let mut sp = state.clone();
        sp.theta[k] += h;
        let mut sm = state.clone();
        sm.theta[k] -= h;
        fd_t.push((value(&sp) - value(&sm)) / (2.0 * h));
    }
    let mut fd_s = Vec::new();
    let mut an_s = Vec::new();
    for &d in ctx.sampled_sigma() {
        let h = step(state.sigma[d]);
        let mut sp = state.clone();
        sp.sigma[d] += h;
        let mut sm = state.clone();
        sm.sigma[d] -= h;
        fd_s.push((value(&sp) - value(&sm)) / (2.0 * h));
        an_s.push(an.grad_sigma[d]);
    }
    (
        max_rel_err(&fd_x, an.grad_x.as_slice()),
        max_rel_err(&fd_t, &an.grad_theta),
        max_rel_err(&fd_s, &an_s),
    )
}

/// K_ν(x) = ∫₀^∞ exp(-x cosh t) cosh(ν t) dt by the trapezoid rule, which
/// converges geometrically for this entire, doubly-decaying integrand.
pub fn bessel_k_integral(nu: f64, x: f64) -> f64 {
    let upper = (1600.0 / x).ln().max(2.0);
    let h = (0.004f64).min(0.25 / x.sqrt());
    let n = (upper / h).ceil() as usize;
    let f = |t: f64| (-x * t.cosh()).exp() * (nu * t).cosh();
    let mut s = 0.5 * f(0.0);
    for i in 1..=n {
        s += f(i as f64 * h);
    }
    s * h
}
