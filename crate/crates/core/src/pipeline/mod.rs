//! Discretization, the three-stage solver and posterior summaries.

pub mod bench;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::gpfit::{gp_smooth, GpFitError};
use crate::hmc::{run_chain, Bounds, HmcConfig, HmcError};
use crate::kernels::{build_gp_bundle, KernelError, KernelKind, KernelSpec, DEFAULT_BAND_SIZE};
use crate::ode::{integrate, OdeError, OdeSystem, Trajectory};
use crate::posterior::{
    compute_temper, log_posterior, optimize_missing_components_with, FitState, PosteriorContext, PosteriorError,
};

/// Times closer than this are the same discretization point.
pub const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl From<GpFitError> for SolveError {
    fn from(e: GpFitError) -> Self {
        match e {
            GpFitError::Kernel(k) => k.into(),
            other => SolveError::Validation(other.to_string()),
        }
    }
}

impl From<KernelError> for SolveError {
    fn from(e: KernelError) -> Self {
        match e {
            KernelError::Factorization { .. } => SolveError::Numerical(e.to_string()),
            other => SolveError::Validation(other.to_string()),
        }
    }
}

impl From<PosteriorError> for SolveError {
    fn from(e: PosteriorError) -> Self {
        match e {
            PosteriorError::NonFinite { .. } => SolveError::Numerical(e.to_string()),
            PosteriorError::Kernel(k) => k.into(),
            other => SolveError::Validation(other.to_string()),
        }
    }
}

impl From<HmcError> for SolveError {
    fn from(e: HmcError) -> Self {
        match e {
            HmcError::Config(_) => SolveError::Validation(e.to_string()),
            HmcError::InvalidStart => SolveError::Numerical(e.to_string()),
        }
    }
}

impl From<OdeError> for SolveError {
    fn from(e: OdeError) -> Self {
        match e {
            OdeError::BlowUp { .. } | OdeError::NonFinite { .. } => SolveError::Numerical(e.to_string()),
            other => SolveError::Validation(other.to_string()),
        }
    }
}

/// Data on a discretization grid. `values` holds NaN where `mask` is false.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub grid: Vec<f64>,
    pub values: DMatrix<f64>,
    pub mask: DMatrix<bool>,
    pub component_names: Vec<String>,
}

impl ObservationSet {
    /// Builds the set with the mask taken from the non-NaN cells.
    pub fn new(grid: Vec<f64>, values: DMatrix<f64>, component_names: Vec<String>) -> Result<Self, SolveError> {
        if values.nrows() != grid.len() || values.ncols() != component_names.len() {
            return Err(SolveError::Validation(format!(
                "values are {}×{} for {} times and {} components",
                values.nrows(),
                values.ncols(),
                grid.len(),
                component_names.len()
            )));
        }
        for (i, w) in grid.windows(2).enumerate() {
            if !(w[1] - w[0] > TIME_EPS) {
                return Err(SolveError::Validation(format!(
                    "times must be strictly increasing; row {} has time {} after {}",
                    i + 2,
                    w[1],
                    w[0]
                )));
            }
        }
        if values.iter().any(|v| v.is_infinite()) {
            return Err(SolveError::Validation("observations must be finite or NaN".into()));
        }
        let mask = values.map(|v| !v.is_nan());
        if !mask.iter().any(|v| *v) {
            return Err(SolveError::Validation("the dataset has no observed values".into()));
        }
        Ok(Self {
            grid,
            values,
            mask,
            component_names,
        })
    }

    pub fn n_components(&self) -> usize {
        self.values.ncols()
    }

    /// Observed times and values of component `d`.
    pub fn component(&self, d: usize) -> (Vec<f64>, Vec<f64>) {
        (0..self.grid.len())
            .filter(|i| self.mask[(*i, d)])
            .map(|i| (self.grid[i], self.values[(i, d)]))
            .unzip()
    }

    fn with_grid(&self, grid: Vec<f64>) -> Self {
        let d = self.n_components();
        let mut values = DMatrix::from_element(grid.len(), d, f64::NAN);
        let mut mask = DMatrix::from_element(grid.len(), d, false);
        let mut k = 0;
        for (r, t) in grid.iter().enumerate() {
            while k < self.grid.len() && self.grid[k] < t - TIME_EPS {
                k += 1;
            }
            if k < self.grid.len() && (self.grid[k] - t).abs() <= TIME_EPS {
                for j in 0..d {
                    values[(r, j)] = self.values[(k, j)];
                    mask[(r, j)] = self.mask[(k, j)];
                }
            }
        }
        Self {
            grid,
            values,
            mask,
            component_names: self.component_names.clone(),
        }
    }
}

/// Inserts `2^level - 1` equally spaced empty rows between adjacent rows.
pub fn set_discretization_level(data: &ObservationSet, level: u32) -> ObservationSet {
    if level == 0 || data.grid.len() < 2 {
        return data.clone();
    }
    let k = 1usize << level;
    let mut grid = Vec::with_capacity((data.grid.len() - 1) * k + 1);
    for w in data.grid.windows(2) {
        grid.push(w[0]);
        for j in 1..k {
            grid.push(w[0] + (w[1] - w[0]) * j as f64 / k as f64);
        }
    }
    grid.push(*data.grid.last().unwrap());
    data.with_grid(grid)
}

/// Union of the existing times with `first, first + incr, …, last`.
pub fn set_discretization_by(data: &ObservationSet, incr: f64) -> Result<ObservationSet, SolveError> {
    if !(incr > 0.0) || !incr.is_finite() {
        return Err(SolveError::Validation(format!("increment must be positive, got {incr}")));
    }
    let first = data.grid[0];
    let last = *data.grid.last().unwrap();
    let steps = ((last - first) / incr + TIME_EPS).floor() as usize;
    let mut grid: Vec<f64> = data.grid.clone();
    grid.extend((0..=steps).map(|i| first + i as f64 * incr));
    grid.sort_by(f64::total_cmp);
    // Merge near-duplicates, keeping the original observation times.
    let mut merged: Vec<f64> = Vec::with_capacity(grid.len());
    for t in grid {
        match merged.last() {
            Some(prev) if (t - prev).abs() <= TIME_EPS => {
                if data.grid.iter().any(|g| *g == t) {
                    *merged.last_mut().unwrap() = t;
                }
            }
            _ => merged.push(t),
        }
    }
    Ok(data.with_grid(merged))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveControl {
    /// Noise levels; NaN entries are estimated.
    pub sigma: Option<Vec<f64>>,
    pub use_fixed_sigma: bool,
    pub x_init: Option<DMatrix<f64>>,
    pub theta_init: Option<Vec<f64>>,
    pub prior_temperature: Option<f64>,
    pub kernel: KernelKind,
    /// `|φ_d| × D`; a column of NaN means "estimate".
    pub phi: Option<DMatrix<f64>>,
    pub mu: Option<DMatrix<f64>>,
    pub dotmu: Option<DMatrix<f64>>,
    pub band_size: usize,
    pub n_iter: usize,
    pub n_leapfrog: usize,
    pub burnin_ratio: f64,
    /// One factor for every coordinate, or one per sampled coordinate.
    pub step_factor: Vec<f64>,
    pub skip_missing_component_optimization: bool,
    pub positive_system: bool,
    pub verbose: bool,
    pub seed: u64,
}

impl Default for SolveControl {
    fn default() -> Self {
        Self {
            sigma: None,
            use_fixed_sigma: false,
            x_init: None,
            theta_init: None,
            prior_temperature: None,
            kernel: KernelKind::GeneralMatern,
            phi: None,
            mu: None,
            dotmu: None,
            band_size: DEFAULT_BAND_SIZE,
            n_iter: 20000,
            n_leapfrog: 200,
            burnin_ratio: 0.5,
            step_factor: vec![0.01],
            skip_missing_component_optimization: false,
            positive_system: false,
            verbose: false,
            seed: 0,
        }
    }
}

impl SolveControl {
    /// Checks the control settings against the data and model dimensions.
    pub fn validate(&self, data: &ObservationSet, model: &OdeSystem) -> Result<(), SolveError> {
        let (n, d, p) = (data.grid.len(), model.dim_x(), model.dim_theta());
        let bad = |m: String| Err(SolveError::Validation(m));
        if data.n_components() != d {
            return bad(format!("data has {} components but model `{}` has {d}", data.n_components(), model.name()));
        }
        if let Some(s) = &self.sigma {
            if s.len() != d {
                return bad(format!("sigma has {} entries, expected {d}", s.len()));
            }
            if s.iter().any(|v| !v.is_nan() && !(*v > 0.0 && v.is_finite())) {
                return bad("sigma entries must be positive (or NaN to estimate)".into());
            }
        }
        if self.use_fixed_sigma {
            let Some(s) = &self.sigma else {
                return bad("useFixedSigma requires sigma to be supplied".into());
            };
            if (0..d).any(|j| data.mask.column(j).iter().any(|m| *m) && s[j].is_nan()) {
                return bad("useFixedSigma requires sigma for every observed component".into());
            }
        }
        if let Some(x) = &self.x_init {
            if x.shape() != (n, d) {
                return bad(format!("xInit is {:?}, expected ({n}, {d})", x.shape()));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return bad("xInit must be finite".into());
            }
        }
        if let Some(t) = &self.theta_init {
            if t.len() != p {
                return bad(format!("theta has {} entries, expected {p}", t.len()));
            }
            if !model.theta_in_bounds(t) {
                return bad("theta lies outside the parameter bounds".into());
            }
        }
        if let Some(b) = self.prior_temperature {
            if !(b > 0.0 && b.is_finite()) {
                return bad(format!("priorTemperature must be positive, got {b}"));
            }
        }
        if let Some(phi) = &self.phi {
            if phi.shape() != (self.kernel.n_phi(), d) {
                return bad(format!("phi is {:?}, expected ({}, {d})", phi.shape(), self.kernel.n_phi()));
            }
        }
        for (name, m) in [("mu", &self.mu), ("dotmu", &self.dotmu)] {
            if let Some(m) = m {
                if m.shape() != (n, d) {
                    return bad(format!("{name} is {:?}, expected ({n}, {d})", m.shape()));
                }
            }
        }
        if self.mu.is_some() != self.dotmu.is_some() {
            return bad("mu and dotmu must be supplied together".into());
        }
        if self.skip_missing_component_optimization {
            let phi_ok = self.phi.as_ref().is_some_and(|p| p.iter().all(|v| v.is_finite()));
            if self.x_init.is_none() || !phi_ok {
                return bad("skipMissingComponentOptimization requires xInit and phi for all components".into());
            }
        }
        if self.band_size == 0 {
            return bad("bandSize must be positive".into());
        }
        if self.n_iter == 0 || self.n_leapfrog == 0 {
            return bad("niterHmc and nstepsHmc must be positive".into());
        }
        if !(self.burnin_ratio >= 0.0 && self.burnin_ratio < 1.0) {
            return bad(format!("burninRatio must lie in [0, 1), got {}", self.burnin_ratio));
        }
        if self.step_factor.is_empty() || self.step_factor.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return bad("stepSizeFactor must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveDiagnostics {
    pub beta: f64,
    pub theta_init: Vec<f64>,
    pub sigma_init: Vec<f64>,
    pub x_init: DMatrix<f64>,
    /// Whether each stage-one smoothing fit converged (true where skipped).
    pub smoothing_converged: Vec<bool>,
    pub optimization_converged: bool,
    pub accept_rate: f64,
    pub accept_rate_history: Vec<f64>,
    pub final_eps: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McmcOutput {
    /// `n_kept × |θ|`.
    pub theta_samples: DMatrix<f64>,
    /// `n_kept × (|I|·D)`; row `k` is sample `k` of `x(I)` stacked column by column.
    pub x_samples: DMatrix<f64>,
    /// `n_kept × D`; NaN for unobserved components.
    pub sigma_samples: DMatrix<f64>,
    pub lp: Vec<f64>,
    /// `|φ_d| × D`.
    pub phi: DMatrix<f64>,
    pub grid: Vec<f64>,
    pub data: ObservationSet,
    pub param_names: Vec<String>,
    pub component_names: Vec<String>,
    pub sigma_sampled: bool,
    pub diagnostics: SolveDiagnostics,
}

impl McmcOutput {
    pub fn n_kept(&self) -> usize {
        self.lp.len()
    }

    pub fn x_sample(&self, k: usize) -> DMatrix<f64> {
        let (n, d) = (self.grid.len(), self.component_names.len());
        DMatrix::from_iterator(n, d, self.x_samples.row(k).iter().cloned())
    }

    /// Posterior mean of `x(I)`.
    pub fn x_mean(&self) -> DMatrix<f64> {
        let (n, d) = (self.grid.len(), self.component_names.len());
        let m = self.x_samples.row_mean();
        DMatrix::from_iterator(n, d, m.iter().cloned())
    }

    /// Pointwise posterior quantile of `x(I)`.
    pub fn x_quantile(&self, q: f64) -> DMatrix<f64> {
        let (n, d) = (self.grid.len(), self.component_names.len());
        let mut buf = vec![0.0; self.n_kept()];
        DMatrix::from_fn(n, d, |i, j| {
            buf.copy_from_slice(self.x_samples.column(j * n + i).as_slice());
            buf.sort_by(f64::total_cmp);
            quantile_sorted(&buf, q)
        })
    }

    pub fn theta_mean(&self) -> Vec<f64> {
        self.theta_samples.row_mean().iter().cloned().collect()
    }
}

/// Linear interpolation of sorted data (sample quantile type 7).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Per-component linear interpolation of the observations onto the grid,
/// flat beyond the first and last observation. Unobserved components take
/// `fallback`.
pub fn interpolate_observations(data: &ObservationSet, fallback: &DMatrix<f64>) -> DMatrix<f64> {
    let n = data.grid.len();
    let mut x = fallback.clone();
    for d in 0..data.n_components() {
        let (t, y) = data.component(d);
        if t.is_empty() {
            continue;
        }
        let mut k = 0;
        for i in 0..n {
            let s = data.grid[i];
            x[(i, d)] = if s <= t[0] {
                y[0]
            } else if s >= t[t.len() - 1] {
                y[y.len() - 1]
            } else {
                while t[k + 1] < s {
                    k += 1;
                }
                y[k] + (y[k + 1] - y[k]) * (s - t[k]) / (t[k + 1] - t[k])
            };
        }
    }
    x
}

/// Starting θ when none is supplied: the midpoint of a finite box, one unit
/// inside a half-bounded one, and zero when unbounded.
pub fn default_theta(model: &OdeSystem) -> Vec<f64> {
    model
        .theta_lower()
        .iter()
        .zip(model.theta_upper())
        .map(|(lo, hi)| match (lo.is_finite(), hi.is_finite()) {
            (true, true) => 0.5 * (lo + hi),
            (true, false) => lo + 1.0,
            (false, true) => hi - 1.0,
            (false, false) => 0.0,
        })
        .collect()
}

/// GP smoothing, optimization of θ and the unobserved components, then HMC.
pub fn magi_solve(data: &ObservationSet, model: &OdeSystem, control: &SolveControl) -> Result<McmcOutput, SolveError> {
    control.validate(data, model)?;
    let (n, dd, p) = (data.grid.len(), model.dim_x(), model.dim_theta());
    let kind = control.kernel;
    let n_phi = kind.n_phi();
    let grid = data.grid.clone();
    let zeros = DMatrix::zeros(n, dd);
    let mu = control.mu.clone().unwrap_or_else(|| zeros.clone());
    let dotmu = control.dotmu.clone().unwrap_or_else(|| zeros.clone());
    let observed: Vec<bool> = (0..dd).map(|j| data.mask.column(j).iter().any(|m| *m)).collect();

    // Stage one: hyper-parameters and noise levels of observed components.
    let mut phi = control.phi.clone().unwrap_or_else(|| DMatrix::from_element(n_phi, dd, f64::NAN));
    let mut sigma: Vec<f64> = control.sigma.clone().unwrap_or_else(|| vec![f64::NAN; dd]);
    let mut smoothing_converged = vec![true; dd];
    for d in 0..dd {
        if !observed[d] {
            continue;
        }
        let phi_known = phi.column(d).iter().all(|v| v.is_finite());
        if phi_known && sigma[d].is_finite() {
            continue;
        }
        let (t, y) = data.component(d);
        let fixed = sigma[d].is_finite().then_some(sigma[d]);
        let fit = gp_smooth(&y, &t, kind, fixed).map_err(|e| {
            SolveError::Validation(format!("GP smoothing of component `{}` failed: {e}", data.component_names[d]))
        })?;
        smoothing_converged[d] = fit.converged;
        if !phi_known {
            for k in 0..n_phi {
                phi[(k, d)] = fit.phi[k];
            }
        }
        if !sigma[d].is_finite() {
            sigma[d] = fit.sigma.max(1e-8);
        }
        if control.verbose {
            log::info!(
                "component {}: phi = {:?}, sigma = {:.6}",
                data.component_names[d],
                phi.column(d).as_slice(),
                sigma[d]
            );
        }
    }

    let mut x = match &control.x_init {
        Some(x) => x.clone(),
        None => interpolate_observations(data, &mu),
    };
    if control.positive_system {
        x.iter_mut().for_each(|v| *v = v.max(0.0));
    }

    // Unobserved components without a supplied φ take the observed
    // components' average with half the average bandwidth. It stays fixed in
    // stage two: optimizing it jointly with x(I) collapses the component to
    // its prior mean with φ₁ → 0.
    let known: Vec<usize> = (0..dd).filter(|d| phi.column(*d).iter().all(|v| v.is_finite())).collect();
    let unobserved: Vec<usize> = (0..dd).filter(|d| !observed[*d]).collect();
    let phi_guess: Vec<f64> = (0..n_phi)
        .map(|k| {
            let mean = known.iter().map(|d| phi[(k, *d)]).sum::<f64>() / known.len() as f64;
            if k == 1 {
                0.5 * mean
            } else {
                mean
            }
        })
        .collect();
    for &d in &unobserved {
        if !known.contains(&d) {
            for k in 0..n_phi {
                phi[(k, d)] = phi_guess[k];
            }
        }
    }

    let beta = match control.prior_temperature {
        Some(b) => b,
        None => compute_temper(&data.mask)?,
    };
    let mut bundles = Vec::with_capacity(dd);
    for d in 0..dd {
        let spec = KernelSpec::new(kind, phi.column(d).iter().cloned().collect())?;
        let b = build_gp_bundle(&grid, &spec, mu.column(d).as_slice(), dotmu.column(d).as_slice(), control.band_size)?;
        bundles.push(b);
    }
    let ctx = PosteriorContext::new(
        model.clone(),
        grid.clone(),
        data.values.clone(),
        data.mask.clone(),
        bundles,
        beta,
        control.use_fixed_sigma,
        control.positive_system,
    )?;

    // Stage two: θ together with x(I) of the unobserved components.
    let mut theta = control.theta_init.clone().unwrap_or_else(|| default_theta(model));
    let sigma_state: Vec<f64> = sigma.clone();
    let mut optimization_converged = true;
    let free: Vec<usize> = if control.skip_missing_component_optimization {
        Vec::new()
    } else {
        unobserved.clone()
    };
    if !free.is_empty() || control.theta_init.is_none() {
        let init = FitState {
            x: x.clone(),
            theta: theta.clone(),
            sigma: sigma_state.clone(),
        };
        let phis: Vec<Vec<f64>> = free.iter().map(|d| phi.column(*d).iter().cloned().collect()).collect();
        let fit = optimize_missing_components_with(&ctx, &init, &free, &phis, false)?;
        optimization_converged = fit.converged;
        theta = fit.theta;
        x = fit.x;
        if control.verbose {
            log::info!("initial theta = {theta:?}");
        }
    }
    if control.positive_system {
        x.iter_mut().for_each(|v| *v = v.max(0.0));
        for (t, lo) in theta.iter_mut().zip(model.theta_lower()) {
            *t = t.max(*lo);
        }
    }

    let state = FitState {
        x: x.clone(),
        theta: theta.clone(),
        sigma: sigma_state.clone(),
    };
    // Surfaces band divergence with advice before sampling starts.
    let start = log_posterior(&state, &ctx)?;
    if !start.value.is_finite() {
        return Err(SolveError::Numerical(
            "the starting point has zero posterior density; check theta, xInit and sigma".into(),
        ));
    }

    // Stage three: HMC over (x(I), θ, σ).
    let q0 = ctx.pack(&state);
    let dim = q0.len();
    let scales = coordinate_scales(&ctx, &state, &observed);
    let step_factor = match control.step_factor.len() {
        1 => scales.iter().map(|s| s * control.step_factor[0]).collect(),
        k if k == dim => control.step_factor.clone(),
        k => {
            return Err(SolveError::Validation(format!(
                "stepSizeFactor has {k} entries; expected 1 or {dim}"
            )))
        }
    };
    let (lower, upper) = ctx.bounds();
    let bounds = Bounds { lower, upper };
    let cfg = HmcConfig {
        n_iter: control.n_iter,
        n_leapfrog: control.n_leapfrog,
        burnin_ratio: control.burnin_ratio,
        step_factor,
        seed: control.seed,
        verbose: control.verbose,
    };
    let mut ws = ctx.workspace();
    let nd = n * dd;
    let n_sig = ctx.sampled_sigma().len();
    let sampled: Vec<usize> = ctx.sampled_sigma().to_vec();
    let mut gs = vec![0.0; dd];
    let mut sig = sigma_state.clone();
    let mut target = |q: &[f64], g: &mut [f64]| -> f64 {
        for (k, &j) in sampled.iter().enumerate() {
            sig[j] = q[nd + p + k];
        }
        let (gx, rest) = g.split_at_mut(nd);
        let (gt, gsig) = rest.split_at_mut(p);
        let v = ctx.eval_into(&q[..nd], &q[nd..nd + p], &sig, gx, gt, &mut gs, &mut ws);
        for (k, &j) in sampled.iter().enumerate() {
            gsig[k] = gs[j];
        }
        v
    };
    let rec = run_chain(&q0, &cfg, &mut target, &bounds)?;

    let n_kept = rec.positions.nrows();
    let x_samples = rec.positions.columns(0, nd).into_owned();
    let theta_samples = rec.positions.columns(nd, p).into_owned();
    let mut sigma_samples = DMatrix::from_fn(n_kept, dd, |_, j| if observed[j] { sigma[j] } else { f64::NAN });
    for (k, &j) in ctx.sampled_sigma().iter().enumerate() {
        sigma_samples.set_column(j, &rec.positions.column(nd + p + k));
    }
    debug_assert_eq!(dim, nd + p + n_sig);

    Ok(McmcOutput {
        theta_samples,
        x_samples,
        sigma_samples,
        lp: rec.lp_trace,
        phi,
        grid,
        data: data.clone(),
        param_names: model.param_names().to_vec(),
        component_names: data.component_names.clone(),
        sigma_sampled: n_sig > 0,
        diagnostics: SolveDiagnostics {
            beta,
            theta_init: theta,
            sigma_init: sigma,
            x_init: x,
            smoothing_converged,
            optimization_converged,
            accept_rate: rec.accept_rate,
            accept_rate_history: rec.accept_rate_history,
            final_eps: rec.final_eps,
        },
    })
}

/// Typical size of each sampled coordinate, used to scale the initial step
/// sizes: σ_d for an observed component's trajectory, the spread of the
/// starting trajectory otherwise, |θ_k| for parameters and σ_d itself.
fn coordinate_scales(ctx: &PosteriorContext, state: &FitState, observed: &[bool]) -> Vec<f64> {
    let n = ctx.grid().len();
    let mut out = Vec::with_capacity(ctx.dim_q());
    for (d, obs) in observed.iter().enumerate() {
        let s = if *obs {
            state.sigma[d]
        } else {
            let col = state.x.column(d);
            let mean = col.mean();
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            if sd > 0.0 {
                sd
            } else {
                mean.abs().max(1.0)
            }
        };
        out.extend(std::iter::repeat_n(s, n));
    }
    out.extend(state.theta.iter().map(|t| if *t != 0.0 { t.abs() } else { 1.0 }));
    out.extend(ctx.sampled_sigma().iter().map(|d| state.sigma[*d]));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryTable {
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    pub median: Vec<f64>,
    /// Sample with the highest log posterior.
    pub mode: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub lower_q: f64,
    pub upper_q: f64,
}

/// Posterior mean, median, approximate mode and `[lower_q, upper_q]`
/// quantiles of θ, with sampled σ columns appended when `include_sigma`.
pub fn summarize(out: &McmcOutput, lower_q: f64, upper_q: f64, include_sigma: bool) -> SummaryTable {
    let mut cols: Vec<(String, Vec<f64>)> = (0..out.theta_samples.ncols())
        .map(|k| (out.param_names[k].clone(), out.theta_samples.column(k).iter().cloned().collect()))
        .collect();
    if include_sigma && out.sigma_sampled {
        for j in 0..out.sigma_samples.ncols() {
            let c: Vec<f64> = out.sigma_samples.column(j).iter().cloned().collect();
            if c.iter().all(|v| v.is_finite()) {
                cols.push((format!("sigma_{}", out.component_names[j]), c));
            }
        }
    }
    summarize_columns(cols, &out.lp, lower_q, upper_q)
}

/// Summary of named sample columns; `lp` picks the mode row.
pub fn summarize_columns(cols: Vec<(String, Vec<f64>)>, lp: &[f64], lower_q: f64, upper_q: f64) -> SummaryTable {
    let best = lp
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (i, v)| if *v > b.1 { (i, *v) } else { b })
        .0;
    let mut t = SummaryTable {
        names: Vec::new(),
        mean: Vec::new(),
        median: Vec::new(),
        mode: Vec::new(),
        lo: Vec::new(),
        hi: Vec::new(),
        lower_q,
        upper_q,
    };
    for (name, mut c) in cols {
        t.names.push(name);
        t.mean.push(c.iter().sum::<f64>() / c.len() as f64);
        t.mode.push(c.get(best).copied().unwrap_or(f64::NAN));
        c.sort_by(f64::total_cmp);
        t.median.push(quantile_sorted(&c, 0.5));
        t.lo.push(quantile_sorted(&c, lower_q));
        t.hi.push(quantile_sorted(&c, upper_q));
    }
    t
}

/// Trajectory re-integrated from the posterior-mean θ and `x` at the first
/// grid point, sampled at `times` (which must start at or after the first
/// grid point).
pub fn reconstruct_trajectory(out: &McmcOutput, model: &OdeSystem, times: &[f64]) -> Result<Trajectory, SolveError> {
    let theta = out.theta_mean();
    let xm = out.x_mean();
    let x0: Vec<f64> = xm.row(0).iter().cloned().collect();
    let t0 = out.grid[0];
    let mut tt = Vec::with_capacity(times.len() + 1);
    let prepend = times.first().is_none_or(|t| (t - t0).abs() > TIME_EPS);
    if prepend {
        tt.push(t0);
    }
    tt.extend_from_slice(times);
    let span = tt[tt.len() - 1] - tt[0];
    let dt = if span > 0.0 { (span / 10000.0).min(0.01 * span) } else { 1.0 };
    let mut traj = integrate(model, &x0, &theta, &tt, dt)?;
    if prepend {
        traj.times.remove(0);
        traj.values = traj.values.remove_row(0);
    }
    Ok(traj)
}

/// Per-component RMSE between the reconstructed trajectory and `truth` at
/// `eval_times`. `map` is applied to the reconstruction before comparing
/// (e.g. `exp` when the model is fitted on a log scale).
pub fn trajectory_rmse_with(
    out: &McmcOutput,
    model: &OdeSystem,
    truth: &Trajectory,
    eval_times: &[f64],
    map: impl Fn(f64) -> f64,
) -> Result<Vec<f64>, SolveError> {
    let rows: Vec<usize> = eval_times
        .iter()
        .map(|t| {
            truth
                .times
                .iter()
                .position(|s| (s - t).abs() <= TIME_EPS)
                .ok_or_else(|| SolveError::Validation(format!("evaluation time {t} is not in the truth trajectory")))
        })
        .collect::<Result<_, _>>()?;
    let recon = reconstruct_trajectory(out, model, eval_times)?;
    let dd = truth.values.ncols();
    Ok((0..dd)
        .map(|j| {
            let ss: f64 = rows
                .iter()
                .enumerate()
                .map(|(k, r)| (map(recon.values[(k, j)]) - truth.values[(*r, j)]).powi(2))
                .sum();
            (ss / rows.len() as f64).sqrt()
        })
        .collect())
}

pub fn trajectory_rmse(
    out: &McmcOutput,
    model: &OdeSystem,
    truth: &Trajectory,
    eval_times: &[f64],
) -> Result<Vec<f64>, SolveError> {
    trajectory_rmse_with(out, model, truth, eval_times, |v| v)
}
