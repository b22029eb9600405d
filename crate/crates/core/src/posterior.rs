//! Tempered log posterior of the trajectory, the parameters and the noise
//! levels, with its exact gradient.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::kernels::{build_gp_bundle, GpBundle, KernelError, KernelSpec};
use crate::ode::OdeSystem;
use crate::optim::{minimize, LbfgsOptions};

#[derive(Debug, Error)]
pub enum PosteriorError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("there are no observations")]
    NoObservations,
    #[error(
        "the log posterior is not finite in component `{component}`; \
         the band approximation may have diverged, try a band size larger than {band_size}"
    )]
    NonFinite { component: String, band_size: usize },
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// `β = D·|I| / Σ_d |τ_d|` for an `|I| × D` observation mask.
pub fn compute_temper(obs_mask: &DMatrix<bool>) -> Result<f64, PosteriorError> {
    let count = obs_mask.iter().filter(|v| **v).count();
    if count == 0 {
        return Err(PosteriorError::NoObservations);
    }
    Ok((obs_mask.nrows() * obs_mask.ncols()) as f64 / count as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitState {
    /// `|I| × D` trajectory values on the grid.
    pub x: DMatrix<f64>,
    pub theta: Vec<f64>,
    /// One entry per component; ignored for unobserved components.
    pub sigma: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PosteriorValue {
    pub value: f64,
    pub grad_x: DMatrix<f64>,
    pub grad_theta: Vec<f64>,
    pub grad_sigma: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PosteriorContext {
    model: OdeSystem,
    grid: Vec<f64>,
    obs_values: DMatrix<f64>,
    obs_mask: DMatrix<bool>,
    bundles: Vec<GpBundle>,
    beta: f64,
    sigma_fixed: bool,
    positive_system: bool,
    obs_idx: Vec<Vec<usize>>,
    sampled_sigma: Vec<usize>,
}

impl PosteriorContext {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: OdeSystem,
        grid: Vec<f64>,
        obs_values: DMatrix<f64>,
        obs_mask: DMatrix<bool>,
        bundles: Vec<GpBundle>,
        beta: f64,
        sigma_fixed: bool,
        positive_system: bool,
    ) -> Result<Self, PosteriorError> {
        let (n, d) = (grid.len(), model.dim_x());
        if obs_values.shape() != (n, d) || obs_mask.shape() != (n, d) {
            return Err(PosteriorError::Shape(format!(
                "observations are {:?} with mask {:?}, expected ({n}, {d})",
                obs_values.shape(),
                obs_mask.shape()
            )));
        }
        if bundles.len() != d {
            return Err(PosteriorError::Shape(format!("{} GP bundles for {d} components", bundles.len())));
        }
        for (j, b) in bundles.iter().enumerate() {
            if b.times != grid {
                return Err(PosteriorError::Shape(format!("bundle {j} is built on a different grid")));
            }
        }
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(PosteriorError::Shape(format!("tempering must be positive, got {beta}")));
        }
        let mut obs_idx = vec![Vec::new(); d];
        for j in 0..d {
            for i in 0..n {
                if obs_mask[(i, j)] {
                    if !obs_values[(i, j)].is_finite() {
                        return Err(PosteriorError::Shape(format!(
                            "observation ({i}, {j}) is marked observed but is not finite"
                        )));
                    }
                    obs_idx[j].push(i);
                }
            }
        }
        if obs_idx.iter().all(|v| v.is_empty()) {
            return Err(PosteriorError::NoObservations);
        }
        let sampled_sigma = if sigma_fixed {
            Vec::new()
        } else {
            (0..d).filter(|j| !obs_idx[*j].is_empty()).collect()
        };
        Ok(Self {
            model,
            grid,
            obs_values,
            obs_mask,
            bundles,
            beta,
            sigma_fixed,
            positive_system,
            obs_idx,
            sampled_sigma,
        })
    }

    pub fn model(&self) -> &OdeSystem {
        &self.model
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn obs_values(&self) -> &DMatrix<f64> {
        &self.obs_values
    }

    pub fn obs_mask(&self) -> &DMatrix<bool> {
        &self.obs_mask
    }

    pub fn bundles(&self) -> &[GpBundle] {
        &self.bundles
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn sigma_fixed(&self) -> bool {
        self.sigma_fixed
    }

    pub fn positive_system(&self) -> bool {
        self.positive_system
    }

    pub fn set_beta(&mut self, beta: f64) {
        assert!(beta > 0.0 && beta.is_finite());
        self.beta = beta;
    }

    pub fn set_bundle(&mut self, d: usize, bundle: GpBundle) {
        assert_eq!(bundle.times, self.grid, "bundle grid");
        self.bundles[d] = bundle;
    }

    /// Components with at least one observation.
    pub fn observed(&self, d: usize) -> bool {
        !self.obs_idx[d].is_empty()
    }

    /// Components whose σ is a sampled coordinate.
    pub fn sampled_sigma(&self) -> &[usize] {
        &self.sampled_sigma
    }

    /// Length of the flat position `q = (vec x, θ, σ_sampled)`, where `x` is
    /// stored column by column.
    pub fn dim_q(&self) -> usize {
        self.grid.len() * self.model.dim_x() + self.model.dim_theta() + self.sampled_sigma.len()
    }

    pub fn pack(&self, state: &FitState) -> Vec<f64> {
        let mut q = Vec::with_capacity(self.dim_q());
        q.extend_from_slice(state.x.as_slice());
        q.extend_from_slice(&state.theta);
        q.extend(self.sampled_sigma.iter().map(|d| state.sigma[*d]));
        q
    }

    /// Inverse of [`pack`](Self::pack); σ entries not in `q` come from `sigma`.
    pub fn unpack(&self, q: &[f64], sigma: &[f64]) -> FitState {
        let (n, d, p) = (self.grid.len(), self.model.dim_x(), self.model.dim_theta());
        let mut s = sigma.to_vec();
        for (k, j) in self.sampled_sigma.iter().enumerate() {
            s[*j] = q[n * d + p + k];
        }
        FitState {
            x: DMatrix::from_column_slice(n, d, &q[..n * d]),
            theta: q[n * d..n * d + p].to_vec(),
            sigma: s,
        }
    }

    /// Per-coordinate `[lower, upper]` box for `q`.
    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let nd = self.grid.len() * self.model.dim_x();
        let xl = if self.positive_system { 0.0 } else { f64::NEG_INFINITY };
        let mut lo = vec![xl; nd];
        let mut hi = vec![f64::INFINITY; nd];
        lo.extend_from_slice(self.model.theta_lower());
        hi.extend_from_slice(self.model.theta_upper());
        lo.extend(self.sampled_sigma.iter().map(|_| 0.0));
        hi.extend(self.sampled_sigma.iter().map(|_| f64::INFINITY));
        (lo, hi)
    }

    pub fn workspace(&self) -> Workspace {
        let (n, d, p) = (self.grid.len(), self.model.dim_x(), self.model.dim_theta());
        Workspace {
            f: vec![0.0; n * d],
            jx: vec![0.0; n * d * d],
            jt: vec![0.0; n * p * d],
            u: vec![0.0; n],
            cu: vec![0.0; n],
            e: vec![0.0; n],
            v: vec![0.0; n],
            tmp: vec![0.0; n],
            row: vec![0.0; d],
            terms: vec![0.0; d],
        }
    }

    /// θ inside its bounds, `x ≥ 0` for positive systems and `σ > 0` for
    /// observed components.
    pub fn in_support(&self, x: &[f64], theta: &[f64], sigma: &[f64]) -> bool {
        self.model.theta_in_bounds(theta)
            && !(self.positive_system && x.iter().any(|v| *v < 0.0))
            && (0..self.model.dim_x()).all(|j| !self.observed(j) || sigma[j] > 0.0)
    }

    /// Log posterior at `(x, θ, σ)` with `x` column-major. Gradients are
    /// written into `gx` (length `|I|·D`), `gt` and `gs` (length `D`).
    /// Returns `-∞` outside the support.
    #[allow(clippy::too_many_arguments)]
    pub fn eval_into(
        &self,
        x: &[f64],
        theta: &[f64],
        sigma: &[f64],
        gx: &mut [f64],
        gt: &mut [f64],
        gs: &mut [f64],
        ws: &mut Workspace,
    ) -> f64 {
        let (n, dd, p) = (self.grid.len(), self.model.dim_x(), self.model.dim_theta());
        gx.fill(0.0);
        gt.fill(0.0);
        gs.fill(0.0);
        if !self.in_support(x, theta, sigma) {
            return f64::NEG_INFINITY;
        }
        let dynamics = self.model.dynamics();
        for i in 0..n {
            for j in 0..dd {
                ws.row[j] = x[j * n + i];
            }
            dynamics.eval_all(
                theta,
                &ws.row,
                self.grid[i],
                &mut ws.f[i * dd..(i + 1) * dd],
                &mut ws.jx[i * dd * dd..(i + 1) * dd * dd],
                &mut ws.jt[i * p * dd..(i + 1) * p * dd],
            );
        }

        let w = 1.0 / self.beta;
        let mut total = 0.0;
        for d in 0..dd {
            let b = &self.bundles[d];
            let xd = &x[d * n..(d + 1) * n];
            for i in 0..n {
                ws.u[i] = xd[i] - b.mu[i];
            }
            b.cinv.matvec(&ws.u, &mut ws.cu);
            let quad_c: f64 = ws.u.iter().zip(&ws.cu).map(|(a, c)| a * c).sum();
            b.m.matvec(&ws.u, &mut ws.tmp);
            for i in 0..n {
                ws.e[i] = ws.f[i * dd + d] - b.dotmu[i] - ws.tmp[i];
            }
            b.psinv.matvec(&ws.e, &mut ws.v);
            let quad_psi: f64 = ws.e.iter().zip(&ws.v).map(|(a, c)| a * c).sum();
            let mut term = w * (-0.5 * quad_c - 0.5 * b.logdet_c - 0.5 * quad_psi - 0.5 * b.logdet_psi);

            b.m.matvec_t(&ws.v, &mut ws.tmp);
            for i in 0..n {
                gx[d * n + i] += w * (ws.tmp[i] - ws.cu[i]);
                let vi = w * ws.v[i];
                let jx = &ws.jx[i * dd * dd..];
                for dp in 0..dd {
                    gx[dp * n + i] -= jx[dp * dd + d] * vi;
                }
                let jt = &ws.jt[i * p * dd..];
                for k in 0..p {
                    gt[k] -= jt[k * dd + d] * vi;
                }
            }

            if !self.obs_idx[d].is_empty() {
                let s = sigma[d];
                let s2 = s * s;
                let norm = (2.0 * PI * s2).ln();
                let mut ss = 0.0;
                for &i in &self.obs_idx[d] {
                    let r = self.obs_values[(i, d)] - xd[i];
                    ss += r * r;
                    gx[d * n + i] += r / s2;
                }
                let m = self.obs_idx[d].len() as f64;
                term -= 0.5 * (ss / s2 + m * norm);
                gs[d] = ss / (s2 * s) - m / s;
            }
            ws.terms[d] = term;
            total += term;
        }
        total
    }

    /// First component whose contribution in the last evaluation with `ws`
    /// was not finite.
    pub fn nonfinite_component(&self, ws: &Workspace) -> Option<usize> {
        ws.terms.iter().position(|v| !v.is_finite())
    }
}

/// Scratch buffers for [`PosteriorContext::eval_into`].
#[derive(Debug, Clone)]
pub struct Workspace {
    f: Vec<f64>,
    jx: Vec<f64>,
    jt: Vec<f64>,
    u: Vec<f64>,
    cu: Vec<f64>,
    e: Vec<f64>,
    v: Vec<f64>,
    tmp: Vec<f64>,
    row: Vec<f64>,
    terms: Vec<f64>,
}

/// Log posterior and its gradient at `state`. A θ outside the bounds gives
/// a value of `-∞`; any other non-finite value is an error naming the
/// offending component.
pub fn log_posterior(state: &FitState, ctx: &PosteriorContext) -> Result<PosteriorValue, PosteriorError> {
    let (n, d, p) = (ctx.grid.len(), ctx.model.dim_x(), ctx.model.dim_theta());
    if state.x.shape() != (n, d) || state.theta.len() != p || state.sigma.len() != d {
        return Err(PosteriorError::Shape(format!(
            "state has x {:?}, {} parameters and {} noise levels; expected ({n}, {d}), {p} and {d}",
            state.x.shape(),
            state.theta.len(),
            state.sigma.len()
        )));
    }
    let mut ws = ctx.workspace();
    let mut gx = vec![0.0; n * d];
    let mut gt = vec![0.0; p];
    let mut gs = vec![0.0; d];
    let value = ctx.eval_into(state.x.as_slice(), &state.theta, &state.sigma, &mut gx, &mut gt, &mut gs, &mut ws);
    if !ctx.in_support(state.x.as_slice(), &state.theta, &state.sigma) {
        return Ok(PosteriorValue {
            value,
            grad_x: DMatrix::zeros(n, d),
            grad_theta: gt,
            grad_sigma: gs,
        });
    }
    if !value.is_finite() {
        let c = ctx.nonfinite_component(&ws).unwrap_or(0);
        return Err(PosteriorError::NonFinite {
            component: ctx.model.component_names()[c].clone(),
            band_size: ctx.bundles[c].band_size,
        });
    }
    Ok(PosteriorValue {
        value,
        grad_x: DMatrix::from_column_slice(n, d, &gx),
        grad_theta: gt,
        grad_sigma: gs,
    })
}

/// Result of the stage-two optimization.
#[derive(Debug, Clone)]
pub struct MissingFit {
    pub theta: Vec<f64>,
    /// Hyper-parameters of the components in `free`, in the same order.
    pub phi_missing: Vec<Vec<f64>>,
    /// The full trajectory with the free components replaced.
    pub x: DMatrix<f64>,
    pub value: f64,
    pub converged: bool,
}

// Unconstrained coordinate for a parameter in [lo, hi].
fn to_free(v: f64, lo: f64, hi: f64) -> f64 {
    match (lo.is_finite(), hi.is_finite()) {
        (true, true) => {
            let u = ((v - lo) / (hi - lo)).clamp(1e-9, 1.0 - 1e-9);
            (u / (1.0 - u)).ln()
        }
        (true, false) => (v - lo).max(1e-300).ln(),
        (false, true) => (hi - v).max(1e-300).ln(),
        (false, false) => v,
    }
}

// Parameter value and its derivative with respect to the free coordinate.
fn from_free(z: f64, lo: f64, hi: f64) -> (f64, f64) {
    match (lo.is_finite(), hi.is_finite()) {
        (true, true) => {
            let s = 1.0 / (1.0 + (-z).exp());
            (lo + (hi - lo) * s, (hi - lo) * s * (1.0 - s))
        }
        (true, false) => {
            let e = z.exp();
            (lo + e, e)
        }
        (false, true) => {
            let e = z.exp();
            (hi - e, -e)
        }
        (false, false) => (z, 1.0),
    }
}

/// Joint maximization of the log posterior over θ and, for each component in
/// `free`, its hyper-parameters and trajectory. Observed components keep the
/// values in `init` and their bundles in `ctx`. With `free` empty only θ
/// moves. `phi_init` holds starting hyper-parameters for the free components.
pub fn optimize_missing_components(
    ctx: &PosteriorContext,
    init: &FitState,
    free: &[usize],
    phi_init: &[Vec<f64>],
) -> Result<MissingFit, PosteriorError> {
    optimize_missing_components_with(ctx, init, free, phi_init, true)
}

/// As [`optimize_missing_components`]; with `optimize_phi` false the free
/// components keep `phi_init` and only θ and their trajectories move.
pub fn optimize_missing_components_with(
    ctx: &PosteriorContext,
    init: &FitState,
    free: &[usize],
    phi_init: &[Vec<f64>],
    optimize_phi: bool,
) -> Result<MissingFit, PosteriorError> {
    let (n, dd, p) = (ctx.grid.len(), ctx.model.dim_x(), ctx.model.dim_theta());
    if phi_init.len() != free.len() {
        return Err(PosteriorError::Shape(format!(
            "{} starting hyper-parameter vectors for {} free components",
            phi_init.len(),
            free.len()
        )));
    }
    if !ctx.model.theta_in_bounds(&init.theta) {
        return Err(PosteriorError::Shape("initial θ lies outside the parameter bounds".into()));
    }
    let lo = ctx.model.theta_lower().to_vec();
    let hi = ctx.model.theta_upper().to_vec();
    let span = ctx.grid[n - 1] - ctx.grid[0];
    let min_gap = ctx.grid.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);

    // φ is searched in logs within a box around its starting value.
    let phi_box: Vec<Vec<(f64, f64)>> = phi_init
        .iter()
        .map(|phi| {
            phi.iter()
                .enumerate()
                .map(|(k, v)| match k {
                    0 => (v * 1e-4, v * 1e4),
                    _ => (min_gap, 4.0 * span),
                })
                .collect()
        })
        .collect();

    let mut work = ctx.clone();
    let kind = |d: usize| ctx.bundles[d].spec.kind();
    let rebuild = |work: &mut PosteriorContext, d: usize, phi: Vec<f64>| -> bool {
        let b = &ctx.bundles[d];
        match KernelSpec::new(kind(d), phi).and_then(|spec| build_gp_bundle(&ctx.grid, &spec, &b.mu, &b.dotmu, b.band_size)) {
            Ok(bundle) => {
                work.bundles[d] = bundle;
                true
            }
            Err(_) => false,
        }
    };

    let mut z0: Vec<f64> = (0..p).map(|k| to_free(init.theta[k], lo[k], hi[k])).collect();
    let n_phi = |f: usize| if optimize_phi { phi_init[f].len() } else { 0 };
    for (f, phi) in phi_init.iter().enumerate() {
        for (k, v) in phi.iter().enumerate().take(n_phi(f)) {
            let (a, b) = phi_box[f][k];
            z0.push(to_free(*v, a, b));
        }
    }
    for &d in free {
        z0.extend(init.x.column(d).iter());
    }

    let decode = |z: &[f64]| -> (Vec<f64>, Vec<f64>, Vec<Vec<f64>>, DMatrix<f64>) {
        let mut theta = vec![0.0; p];
        let mut dtheta = vec![0.0; p];
        for k in 0..p {
            let (v, dv) = from_free(z[k], lo[k], hi[k]);
            theta[k] = v.clamp(lo[k], hi[k]);
            dtheta[k] = dv;
        }
        let mut off = p;
        let mut phis = Vec::with_capacity(free.len());
        for (f, phi) in phi_init.iter().enumerate() {
            if !optimize_phi {
                phis.push(phi.clone());
                continue;
            }
            let v: Vec<f64> = (0..phi.len()).map(|k| from_free(z[off + k], phi_box[f][k].0, phi_box[f][k].1).0).collect();
            off += phi.len();
            phis.push(v);
        }
        let mut x = init.x.clone();
        for &d in free {
            for i in 0..n {
                x[(i, d)] = z[off + i];
            }
            off += n;
        }
        (theta, dtheta, phis, x)
    };

    let mut ws = ctx.workspace();
    let mut gx = vec![0.0; n * dd];
    let mut gt = vec![0.0; p];
    let mut gs = vec![0.0; dd];
    let mut current_phi: Vec<Vec<f64>> = Vec::new();

    let mut objective = |z: &[f64], g: &mut [f64]| -> f64 {
        let (theta, dtheta, phis, x) = decode(z);
        if phis != current_phi {
            for (f, &d) in free.iter().enumerate() {
                if !rebuild(&mut work, d, phis[f].clone()) {
                    current_phi.clear();
                    return f64::NAN;
                }
            }
            current_phi = phis.clone();
        }
        let val = work.eval_into(x.as_slice(), &theta, &init.sigma, &mut gx, &mut gt, &mut gs, &mut ws);
        if !val.is_finite() {
            return f64::NAN;
        }
        for k in 0..p {
            g[k] = -gt[k] * dtheta[k];
        }
        let mut off = p;
        // Hyper-parameter gradients by central differences in the free
        // coordinates; each needs a bundle rebuild.
        let mut gx2 = vec![0.0; n * dd];
        let mut gt2 = vec![0.0; p];
        let mut gs2 = vec![0.0; dd];
        for (f, &d) in free.iter().enumerate().filter(|_| optimize_phi) {
            for k in 0..phis[f].len() {
                let h = 1e-5;
                let mut vals = [0.0; 2];
                for (s, sign) in [1.0, -1.0].iter().enumerate() {
                    let mut phi = phis[f].clone();
                    phi[k] = from_free(z[off + k] + sign * h, phi_box[f][k].0, phi_box[f][k].1).0;
                    vals[s] = if rebuild(&mut work, d, phi) {
                        work.eval_into(x.as_slice(), &theta, &init.sigma, &mut gx2, &mut gt2, &mut gs2, &mut ws)
                    } else {
                        f64::NAN
                    };
                }
                g[off + k] = -(vals[0] - vals[1]) / (2.0 * h);
            }
            rebuild(&mut work, d, phis[f].clone());
            off += phis[f].len();
        }
        for &d in free {
            for i in 0..n {
                g[off + i] = -gx[d * n + i];
            }
            off += n;
        }
        if g.iter().any(|v| !v.is_finite()) {
            return f64::NAN;
        }
        -val
    };

    let opts = LbfgsOptions {
        max_iter: 2000,
        grad_tol: 1e-6,
        f_tol: 1e-13,
        ..LbfgsOptions::default()
    };
    let res = minimize(&mut objective, &z0, &opts);
    if !res.f.is_finite() {
        return Err(PosteriorError::NonFinite {
            component: "(all)".into(),
            band_size: ctx.bundles[0].band_size,
        });
    }
    if !res.converged {
        log::warn!("optimization of θ and unobserved components did not converge; continuing from the best point");
    }
    let (theta, _, phi_missing, x) = decode(&res.x);
    Ok(MissingFit {
        theta,
        phi_missing,
        x,
        value: -res.f,
        converged: res.converged,
    })
}
