//! Stage-one GP smoothing of each observed component, and GP conditioning
//! used to inspect a choice of hyper-parameters.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::kernels::{jittered_cholesky, KernelError, KernelKind, KernelSpec};
use crate::optim::{fd_gradient, minimize, LbfgsOptions};

#[derive(Debug, Error)]
pub enum GpFitError {
    #[error("GP smoothing needs at least 3 observations, got {0}")]
    TooFewPoints(usize),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("observation times must be strictly increasing (t[{0}] = {1})")]
    Times(usize, f64),
    #[error("the conditioning system is singular: duplicated observation times with zero noise")]
    Singular,
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingResult {
    pub phi: Vec<f64>,
    pub sigma: f64,
    /// Log marginal likelihood plus the bandwidth log-prior at `(phi, sigma)`.
    pub objective: f64,
    pub converged: bool,
}

const N_STARTS: usize = 5;
/// Upper bound of φ₁ as a multiple of the sample variance.
const PHI1_VAR_CAP: f64 = 10.0;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn check_times(t: &[f64]) -> Result<(), GpFitError> {
    for (i, w) in t.windows(2).enumerate() {
        if !(w[1] > w[0]) {
            return Err(GpFitError::Times(i + 1, w[1]));
        }
    }
    if let Some(v) = t.iter().find(|v| !v.is_finite()) {
        return Err(GpFitError::Input(format!("non-finite time {v}")));
    }
    Ok(())
}

fn kernel_matrix(spec: &KernelSpec, a: &[f64], b: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| spec.k(a[i], b[j]))
}

/// Log density of the centred data under `N(0, C_φ + σ²I)` plus the
/// `Normal(span/2, span)` log-prior on φ₂, both without constants. Returns
/// `None` when the covariance cannot be factored.
pub fn smoothing_objective(y: &[f64], t: &[f64], spec: &KernelSpec, sigma: f64) -> Option<f64> {
    let n = y.len();
    let ybar = mean(y);
    let mut k = kernel_matrix(spec, t, t);
    for i in 0..n {
        k[(i, i)] += sigma * sigma;
    }
    let scale = spec.phi()[0] + sigma * sigma;
    let (ch, _) = jittered_cholesky(&k, scale, "the smoothing covariance").ok()?;
    let r = DVector::from_iterator(n, y.iter().map(|v| v - ybar));
    let alpha = ch.solve(&r);
    let logdet = 2.0 * ch.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let span = t[n - 1] - t[0];
    let z = (spec.phi()[1] - span / 2.0) / span;
    let val = -0.5 * r.dot(&alpha) - 0.5 * logdet - 0.5 * z * z;
    val.is_finite().then_some(val)
}

struct Box {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Box {
    // log p = log lo + (log hi - log lo) · sigmoid(z)
    fn to_param(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .enumerate()
            .map(|(i, &zi)| {
                let (a, b) = (self.lo[i].ln(), self.hi[i].ln());
                (a + (b - a) / (1.0 + (-zi).exp())).exp()
            })
            .collect()
    }

    fn to_free(&self, p: &[f64]) -> Vec<f64> {
        p.iter()
            .enumerate()
            .map(|(i, &pi)| {
                let (a, b) = (self.lo[i].ln(), self.hi[i].ln());
                let u = ((pi.ln() - a) / (b - a)).clamp(1e-6, 1.0 - 1e-6);
                (u / (1.0 - u)).ln()
            })
            .collect()
    }
}

/// Parameter box and starting points, in the layout `(φ..., σ)` with σ
/// omitted when it is fixed.
fn search_space(y: &[f64], t: &[f64], kind: KernelKind, sigma_fixed: Option<f64>) -> (Box, Vec<Vec<f64>>) {
    let n = y.len();
    let span = t[n - 1] - t[0];
    let ybar = mean(y);
    let range = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - y.iter().cloned().fold(f64::INFINITY, f64::min);
    let scale = if range > 0.0 { range } else { ybar.abs().max(1.0) };
    let var = y.iter().map(|v| (v - ybar).powi(2)).sum::<f64>() / (n - 1) as f64;

    let mut lo = vec![1e-8 * scale * scale, 1e-3 * span];
    // φ₁ far above the sample variance only feeds a flat ridge along which
    // the fit interpolates the noise.
    let var_floor = var.max(1e-4 * scale * scale);
    let mut hi = vec![PHI1_VAR_CAP * var_floor, 10.0 * span];
    if kind == KernelKind::PeriodicMatern {
        lo.push(span / 50.0);
        hi.push(2.0 * span);
    }
    if sigma_fixed.is_none() {
        lo.push(1e-6 * scale);
        hi.push(10.0 * scale);
    }
    let clamp = |v: f64, i: usize| v.clamp(lo[i] * 1.01, hi[i] / 1.01);
    let starts = (0..N_STARTS)
        .map(|s| {
            let frac = s as f64 / (N_STARTS - 1) as f64;
            let phi2 = span / 50.0 * 50f64.powf(frac);
            let mut p = vec![clamp(var_floor, 0), clamp(phi2, 1)];
            if kind == KernelKind::PeriodicMatern {
                p.push(clamp(span / 2.0, 2));
            }
            if sigma_fixed.is_none() {
                let i = p.len();
                p.push(clamp(0.1 * var.sqrt().max(1e-3 * scale), i));
            }
            p
        })
        .collect();
    (Box { lo, hi }, starts)
}

fn split(kind: KernelKind, p: &[f64], sigma_fixed: Option<f64>) -> (Vec<f64>, f64) {
    let np = kind.n_phi();
    (p[..np].to_vec(), sigma_fixed.unwrap_or_else(|| p[np]))
}

/// Maximum a posteriori kernel hyper-parameters and noise level for one
/// component's observations, by multi-start L-BFGS.
pub fn gp_smooth(y: &[f64], t: &[f64], kind: KernelKind, sigma_fixed: Option<f64>) -> Result<SmoothingResult, GpFitError> {
    if y.len() != t.len() {
        return Err(GpFitError::Input(format!("{} values but {} times", y.len(), t.len())));
    }
    if y.len() < 3 {
        return Err(GpFitError::TooFewPoints(y.len()));
    }
    check_times(t)?;
    if let Some(v) = y.iter().find(|v| !v.is_finite()) {
        return Err(GpFitError::Input(format!("non-finite observation {v}")));
    }
    if let Some(s) = sigma_fixed {
        if !(s >= 0.0) || !s.is_finite() {
            return Err(GpFitError::Input(format!("fixed sigma must be finite and >= 0, got {s}")));
        }
    }

    let (bx, starts) = search_space(y, t, kind, sigma_fixed);
    let eval = |p: &[f64]| -> f64 {
        let (phi, sigma) = split(kind, p, sigma_fixed);
        match KernelSpec::new(kind, phi) {
            Ok(spec) => smoothing_objective(y, t, &spec, sigma).map_or(f64::NAN, |v| -v),
            Err(_) => f64::NAN,
        }
    };
    let objective = |z: &[f64], g: &mut [f64]| -> f64 {
        let fz = eval(&bx.to_param(z));
        if fz.is_finite() {
            fd_gradient(|zz| eval(&bx.to_param(zz)), z, 1e-6, g);
        }
        fz
    };
    let opts = LbfgsOptions {
        max_iter: 300,
        grad_tol: 1e-5,
        f_tol: 1e-11,
        ..LbfgsOptions::default()
    };

    let mut best: Option<(Vec<f64>, f64, bool)> = None;
    for start in &starts {
        let res = minimize(objective, &bx.to_free(start), &opts);
        if !res.f.is_finite() {
            continue;
        }
        if best.as_ref().is_none_or(|b| res.f < b.1) {
            best = Some((bx.to_param(&res.x), res.f, res.converged));
        }
    }
    let (p, f, converged) = best.ok_or_else(|| {
        GpFitError::Input("the marginal likelihood could not be evaluated at any starting point".into())
    })?;
    if !converged {
        log::warn!("GP smoothing did not converge; using the best point found");
    }
    let (phi, sigma) = split(kind, &p, sigma_fixed);
    Ok(SmoothingResult {
        phi,
        sigma,
        objective: -f,
        converged,
    })
}

struct Conditioned {
    ybar: f64,
    ch: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    resid: DVector<f64>,
}

fn condition(y: &[f64], t: &[f64], spec: &KernelSpec, sigma: f64) -> Result<Conditioned, GpFitError> {
    if y.len() != t.len() || y.is_empty() {
        return Err(GpFitError::Input(format!("{} values but {} times", y.len(), t.len())));
    }
    if !(sigma >= 0.0) {
        return Err(GpFitError::Input(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        let mut sorted = t.to_vec();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[1] - w[0] <= 1e-12 * w[1].abs().max(1.0)) {
            return Err(GpFitError::Singular);
        }
    }
    let n = y.len();
    let mut k = kernel_matrix(spec, t, t);
    for i in 0..n {
        k[(i, i)] += sigma * sigma;
    }
    let (ch, _) = jittered_cholesky(&k, spec.phi()[0] + sigma * sigma, "the conditioning covariance")?;
    let ybar = mean(y);
    Ok(Conditioned {
        ybar,
        ch,
        resid: DVector::from_iterator(n, y.iter().map(|v| v - ybar)),
    })
}

/// GP posterior mean at `t_out` given noisy observations, after centring on
/// the sample mean.
pub fn gp_cond_mean(y: &[f64], t: &[f64], t_out: &[f64], spec: &KernelSpec, sigma: f64) -> Result<Vec<f64>, GpFitError> {
    let c = condition(y, t, spec, sigma)?;
    let alpha = c.ch.solve(&c.resid);
    let kx = kernel_matrix(spec, t_out, t);
    Ok((kx * alpha).iter().map(|v| v + c.ybar).collect())
}

/// GP posterior covariance at `t_out` given noisy observations.
pub fn gp_cond_cov(y: &[f64], t: &[f64], t_out: &[f64], spec: &KernelSpec, sigma: f64) -> Result<DMatrix<f64>, GpFitError> {
    let c = condition(y, t, spec, sigma)?;
    let mut v = kernel_matrix(spec, t, t_out);
    c.ch.l_dirty().solve_lower_triangular_mut(&mut v);
    // l_dirty holds garbage above the diagonal; solve_lower_triangular only
    // reads the lower triangle.
    let mut cov = kernel_matrix(spec, t_out, t_out) - v.transpose() * &v;
    let m = cov.nrows();
    for i in 0..m {
        for j in 0..i {
            let s = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = s;
            cov[(j, i)] = s;
        }
    }
    Ok(cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn grid(n: usize, a: f64, b: f64) -> Vec<f64> {
        (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
    }

    fn draw(spec: &KernelSpec, t: &[f64], sigma: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let k = kernel_matrix(spec, t, t);
        let (ch, _) = jittered_cholesky(&k, spec.phi()[0], "test").unwrap();
        let z = DVector::from_fn(t.len(), |_, _| StandardNormal.sample(&mut rng));
        let f = ch.l() * z;
        f.iter().map(|v| { let e: f64 = StandardNormal.sample(&mut rng); v + sigma * e }).collect()
    }

    #[test]
    fn recovers_known_generator() {
        let spec = KernelSpec::new(KernelKind::Rbf, vec![4.0, 2.0]).unwrap();
        let t = grid(50, 0.0, 10.0);
        let y = draw(&spec, &t, 0.1, 7);
        let fit = gp_smooth(&y, &t, KernelKind::Rbf, None).unwrap();
        assert!(fit.phi[0] > 2.0 && fit.phi[0] < 8.0, "{fit:?}");
        assert!(fit.phi[1] > 1.0 && fit.phi[1] < 4.0, "{fit:?}");
        assert!(fit.sigma > 0.05 && fit.sigma < 0.2, "{fit:?}");
    }

    #[test]
    fn constant_data_drives_sigma_to_floor() {
        let t = grid(12, 0.0, 5.0);
        let y = vec![3.0; 12];
        let fit = gp_smooth(&y, &t, KernelKind::GeneralMatern, None).unwrap();
        assert!(fit.sigma <= 1e-4 * 3.0, "{fit:?}");
    }

    #[test]
    fn fixed_sigma_is_kept() {
        let t = grid(15, 0.0, 3.0);
        let y: Vec<f64> = t.iter().map(|v| v.sin()).collect();
        let fit = gp_smooth(&y, &t, KernelKind::Matern52, Some(0.2)).unwrap();
        assert_eq!(fit.sigma, 0.2);
    }

    #[test]
    fn optimum_beats_every_start() {
        let t = grid(30, 0.0, 6.0);
        let y: Vec<f64> = t.iter().map(|v| (1.3 * v).sin() + 0.05 * (7.0 * v).cos()).collect();
        for kind in [KernelKind::GeneralMatern, KernelKind::PeriodicMatern] {
            let fit = gp_smooth(&y, &t, kind, None).unwrap();
            let (_, starts) = search_space(&y, &t, kind, None);
            for s in starts {
                let (phi, sigma) = split(kind, &s, None);
                let v = smoothing_objective(&y, &t, &KernelSpec::new(kind, phi).unwrap(), sigma).unwrap();
                assert!(fit.objective >= v, "{kind}: {} < {v}", fit.objective);
            }
        }
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(
            gp_smooth(&[1.0, 2.0], &[0.0, 1.0], KernelKind::Rbf, None),
            Err(GpFitError::TooFewPoints(2))
        ));
    }

    #[test]
    fn noiseless_interpolation() {
        let spec = KernelSpec::new(KernelKind::GeneralMatern, vec![2.0, 1.5]).unwrap();
        let t = [0.0, 0.7, 1.9, 2.4, 4.0];
        let y = [1.0, -0.3, 2.2, 0.4, 5.0];
        let m = gp_cond_mean(&y, &t, &t, &spec, 0.0).unwrap();
        for (a, b) in m.iter().zip(&y) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        let c = gp_cond_cov(&y, &t, &t, &spec, 0.0).unwrap();
        assert!(c.amax() < 1e-10, "{}", c.amax());
    }

    #[test]
    fn three_point_dense_solve() {
        let spec = KernelSpec::new(KernelKind::Matern52, vec![1.7, 0.9]).unwrap();
        let t = [0.0, 0.5, 1.6];
        let y = [0.2, 1.1, -0.4];
        let s2: f64 = 0.3 * 0.3;
        let t_out = [0.25, 1.0, 2.0];
        let ybar = (0.2 + 1.1 - 0.4) / 3.0;

        // Cramer's rule on the 3×3 system.
        let a: [[f64; 3]; 3] = std::array::from_fn(|i| {
            std::array::from_fn(|j| spec.k(t[i], t[j]) + if i == j { s2 } else { 0.0 })
        });
        let det3 = |m: [[f64; 3]; 3]| {
            m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
        };
        let solve = |b: [f64; 3]| -> [f64; 3] {
            let d = det3(a);
            std::array::from_fn(|c| {
                let mut m = a;
                for r in 0..3 {
                    m[r][c] = b[r];
                }
                det3(m) / d
            })
        };
        let alpha = solve([y[0] - ybar, y[1] - ybar, y[2] - ybar]);
        let mean = gp_cond_mean(&y, &t, &t_out, &spec, 0.3).unwrap();
        let cov = gp_cond_cov(&y, &t, &t_out, &spec, 0.3).unwrap();
        for i in 0..3 {
            let kx: [f64; 3] = std::array::from_fn(|j| spec.k(t_out[i], t[j]));
            let expect = ybar + (0..3).map(|j| kx[j] * alpha[j]).sum::<f64>();
            assert!((mean[i] - expect).abs() < 1e-10);
            for l in 0..3 {
                let kl: [f64; 3] = std::array::from_fn(|j| spec.k(t[j], t_out[l]));
                let w = solve(kl);
                let expect = spec.k(t_out[i], t_out[l]) - (0..3).map(|j| kx[j] * w[j]).sum::<f64>();
                assert!((cov[(i, l)] - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn huge_noise_returns_sample_mean() {
        let spec = KernelSpec::new(KernelKind::Rbf, vec![1.0, 1.0]).unwrap();
        let t = [0.0, 1.0, 2.0, 3.0];
        let y = [4.0, 1.0, 3.0, 0.0];
        let m = gp_cond_mean(&y, &t, &[0.5, 2.5, 10.0], &spec, 1e8).unwrap();
        assert!(m.iter().all(|v| (v - 2.0).abs() < 1e-10));
    }

    #[test]
    fn duplicated_times_without_noise_are_singular() {
        let spec = KernelSpec::new(KernelKind::Rbf, vec![1.0, 1.0]).unwrap();
        let r = gp_cond_mean(&[1.0, 2.0], &[0.5, 0.5], &[0.0], &spec, 0.0);
        assert!(matches!(r, Err(GpFitError::Singular)));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn variance_never_exceeds_prior(
                ts in proptest::collection::btree_set(0u32..400, 2..8),
                out in proptest::collection::vec(0.0f64..4.0, 1..5),
                phi1 in 0.1f64..5.0, phi2 in 0.2f64..2.0, sigma in 0.01f64..1.0,
            ) {
                let t: Vec<f64> = ts.iter().map(|v| *v as f64 / 100.0).collect();
                let y: Vec<f64> = t.iter().map(|v| v.cos()).collect();
                let spec = KernelSpec::new(KernelKind::GeneralMatern, vec![phi1, phi2]).unwrap();
                let cov = gp_cond_cov(&y, &t, &out, &spec, sigma).unwrap();
                for i in 0..out.len() {
                    prop_assert!(cov[(i, i)] <= phi1 + 1e-10);
                }
            }

            #[test]
            fn extra_observation_never_increases_variance(
                ts in proptest::collection::btree_set(0u32..400, 3..8),
                out in proptest::collection::vec(0.0f64..4.0, 1..5),
                phi2 in 0.2f64..2.0, sigma in 0.05f64..1.0,
            ) {
                let t: Vec<f64> = ts.iter().map(|v| *v as f64 / 100.0).collect();
                let y: Vec<f64> = t.iter().map(|v| v.sin()).collect();
                let spec = KernelSpec::new(KernelKind::Matern52, vec![1.0, phi2]).unwrap();
                let n = t.len();
                let full = gp_cond_cov(&y, &t, &out, &spec, sigma).unwrap();
                let fewer = gp_cond_cov(&y[..n - 1], &t[..n - 1], &out, &spec, sigma).unwrap();
                for i in 0..out.len() {
                    prop_assert!(full[(i, i)] <= fewer[(i, i)] + 1e-10);
                }
            }

            #[test]
            fn shift_moves_mean_only(
                shift in -1e3f64..1e3,
                phi2 in 0.2f64..2.0, sigma in 0.05f64..1.0,
            ) {
                let t = [0.0, 0.4, 1.1, 2.0, 2.2];
                let y = [0.3, -0.2, 0.9, 1.4, 0.1];
                let ys: Vec<f64> = y.iter().map(|v| v + shift).collect();
                let out = [0.2, 1.5, 3.0];
                let spec = KernelSpec::new(KernelKind::Rbf, vec![1.0, phi2]).unwrap();
                let m0 = gp_cond_mean(&y, &t, &out, &spec, sigma).unwrap();
                let m1 = gp_cond_mean(&ys, &t, &out, &spec, sigma).unwrap();
                let c0 = gp_cond_cov(&y, &t, &out, &spec, sigma).unwrap();
                let c1 = gp_cond_cov(&ys, &t, &out, &spec, sigma).unwrap();
                for i in 0..3 {
                    prop_assert!((m1[i] - m0[i] - shift).abs() < 1e-9 * (1.0 + shift.abs()));
                }
                prop_assert!((c0 - c1).amax() < 1e-12);
            }
        }
    }
}
