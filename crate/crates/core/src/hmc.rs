//! Hamiltonian Monte Carlo with reflecting bounds and per-coordinate step
//! sizes tuned during burn-in.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

pub const TUNING_WINDOW: usize = 100;
const STEP_UP: f64 = 1.2;
const STEP_DOWN: f64 = 0.8;
const TARGET_LOW: f64 = 0.6;
const TARGET_HIGH: f64 = 0.9;

#[derive(Debug, Error)]
pub enum HmcError {
    #[error("invalid sampler configuration: {0}")]
    Config(String),
    #[error("the starting point is outside the bounds or has a non-finite log density")]
    InvalidStart,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HmcConfig {
    pub n_iter: usize,
    pub n_leapfrog: usize,
    pub burnin_ratio: f64,
    /// Initial step sizes: one value for every coordinate, or one per coordinate.
    pub step_factor: Vec<f64>,
    pub seed: u64,
    /// Log progress every 100 iterations.
    pub verbose: bool,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            n_iter: 20000,
            n_leapfrog: 200,
            burnin_ratio: 0.5,
            step_factor: vec![0.01],
            seed: 0,
            verbose: false,
        }
    }
}

impl HmcConfig {
    pub fn n_burnin(&self) -> usize {
        (self.burnin_ratio * self.n_iter as f64).floor() as usize
    }

    pub fn n_kept(&self) -> usize {
        self.n_iter - self.n_burnin()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainRecord {
    /// `n_kept × dim` post-burn-in positions.
    pub positions: DMatrix<f64>,
    pub lp_trace: Vec<f64>,
    /// Acceptance rate of every completed 100-iteration window.
    pub accept_rate_history: Vec<f64>,
    pub final_eps: Vec<f64>,
    /// Acceptance rate over the kept iterations.
    pub accept_rate: f64,
}

/// Per-coordinate `[lower, upper]` bounds; entries may be infinite.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn unbounded(dim: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; dim],
            upper: vec![f64::INFINITY; dim],
        }
    }

    pub fn contains(&self, q: &[f64]) -> bool {
        q.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    /// Mirrors `q[i]` back inside its interval, flipping `p[i]` once per
    /// reflection.
    fn reflect(&self, i: usize, q: &mut f64, p: &mut f64) {
        let (lo, hi) = (self.lower[i], self.upper[i]);
        if lo == hi {
            *q = lo;
            return;
        }
        while *q < lo || *q > hi {
            if *q < lo {
                *q = 2.0 * lo - *q;
            } else {
                *q = 2.0 * hi - *q;
            }
            *p = -*p;
        }
    }
}

/// Log density and its gradient; the gradient is written to the second
/// argument.
pub trait LogTarget {
    fn eval(&mut self, q: &[f64], grad: &mut [f64]) -> f64;
}

impl<F: FnMut(&[f64], &mut [f64]) -> f64> LogTarget for F {
    fn eval(&mut self, q: &[f64], grad: &mut [f64]) -> f64 {
        self(q, grad)
    }
}

/// `L` leapfrog steps for `H = -log π(q) + |p|²/2` starting from the log
/// density gradient `grad` at `q`. On return `grad` holds the gradient at the
/// new position. Returns the log density at the end point, or `None` if a
/// non-finite value was met.
pub fn leapfrog<T: LogTarget + ?Sized>(
    q: &mut [f64],
    p: &mut [f64],
    grad: &mut [f64],
    eps: &[f64],
    n_steps: usize,
    target: &mut T,
    bounds: &Bounds,
) -> Option<f64> {
    let n = q.len();
    for i in 0..n {
        p[i] += 0.5 * eps[i] * grad[i];
    }
    let mut lp = f64::NAN;
    for step in 0..n_steps {
        for i in 0..n {
            q[i] += eps[i] * p[i];
            bounds.reflect(i, &mut q[i], &mut p[i]);
        }
        lp = target.eval(q, grad);
        if !lp.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return None;
        }
        let w = if step + 1 == n_steps { 0.5 } else { 1.0 };
        for i in 0..n {
            p[i] += w * eps[i] * grad[i];
        }
    }
    Some(lp)
}

/// The current point of a chain together with its cached log density and
/// gradient.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub q: Vec<f64>,
    pub lp: f64,
    pub grad: Vec<f64>,
}

impl ChainState {
    pub fn new<T: LogTarget + ?Sized>(q: Vec<f64>, target: &mut T, bounds: &Bounds) -> Result<Self, HmcError> {
        let mut grad = vec![0.0; q.len()];
        if !bounds.contains(&q) {
            return Err(HmcError::InvalidStart);
        }
        let lp = target.eval(&q, &mut grad);
        if !lp.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(HmcError::InvalidStart);
        }
        Ok(Self { q, lp, grad })
    }
}

/// One HMC transition with step sizes drawn uniformly from
/// `[eps_base, 2·eps_base]` coordinate-wise. Returns whether the proposal
/// was accepted.
pub fn hmc_iteration<T: LogTarget + ?Sized, R: Rng>(
    state: &mut ChainState,
    eps_base: &[f64],
    n_steps: usize,
    target: &mut T,
    bounds: &Bounds,
    rng: &mut R,
) -> bool {
    let n = state.q.len();
    let p0: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let eps: Vec<f64> = eps_base.iter().map(|e| e * (1.0 + rng.random::<f64>())).collect();
    let mut q = state.q.clone();
    let mut p = p0.clone();
    let mut grad = state.grad.clone();
    let Some(lp) = leapfrog(&mut q, &mut p, &mut grad, &eps, n_steps, target, bounds) else {
        // Keep the stream aligned with the accepting branch.
        let _: f64 = rng.random();
        return false;
    };
    let kinetic = |v: &[f64]| 0.5 * v.iter().map(|x| x * x).sum::<f64>();
    let h0 = -state.lp + kinetic(&p0);
    let h1 = -lp + kinetic(&p);
    let u: f64 = rng.random();
    if u.ln() < h0 - h1 {
        state.q = q;
        state.lp = lp;
        state.grad = grad;
        true
    } else {
        false
    }
}

/// Step-size update after a tuning window: a global ×1.2 / ×0.8 adjustment
/// towards 60–90% acceptance, then per-coordinate rescaling proportional to
/// the window's sample SDs with the geometric mean of `eps` preserved.
pub fn tune_step_sizes(accept_rate: f64, sds: &[f64], eps: &mut [f64]) {
    let factor = if accept_rate > TARGET_HIGH {
        STEP_UP
    } else if accept_rate < TARGET_LOW {
        STEP_DOWN
    } else {
        1.0
    };
    eps.iter_mut().for_each(|e| *e *= factor);
    if sds.len() != eps.len() || sds.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return;
    }
    let log_gm = |v: &[f64]| v.iter().map(|x| x.ln()).sum::<f64>() / v.len() as f64;
    let shift = log_gm(eps) - log_gm(sds);
    for (e, s) in eps.iter_mut().zip(sds) {
        *e = (s.ln() + shift).exp();
    }
}

fn window_sds(buf: &[f64], rows: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let mean = (0..rows).map(|r| buf[r * dim + j]).sum::<f64>() / rows as f64;
            let var = (0..rows).map(|r| (buf[r * dim + j] - mean).powi(2)).sum::<f64>() / (rows - 1) as f64;
            var.sqrt()
        })
        .collect()
}

/// Runs a full chain, tuning step sizes every 100 iterations during burn-in
/// and recording every post-burn-in position.
pub fn run_chain<T: LogTarget + ?Sized>(
    q0: &[f64],
    config: &HmcConfig,
    target: &mut T,
    bounds: &Bounds,
) -> Result<ChainRecord, HmcError> {
    let dim = q0.len();
    if config.n_iter == 0 || config.n_leapfrog == 0 {
        return Err(HmcError::Config("iteration and leapfrog counts must be positive".into()));
    }
    if !(config.burnin_ratio >= 0.0 && config.burnin_ratio < 1.0) {
        return Err(HmcError::Config(format!("burn-in ratio must lie in [0, 1), got {}", config.burnin_ratio)));
    }
    let mut eps = match config.step_factor.len() {
        1 => vec![config.step_factor[0]; dim],
        k if k == dim => config.step_factor.clone(),
        k => return Err(HmcError::Config(format!("{k} step sizes for {dim} coordinates"))),
    };
    if eps.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
        return Err(HmcError::Config("step sizes must be positive and finite".into()));
    }
    if bounds.lower.len() != dim || bounds.upper.len() != dim {
        return Err(HmcError::Config("bounds do not match the dimension".into()));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut state = ChainState::new(q0.to_vec(), target, bounds)?;
    let n_burn = config.n_burnin();
    let n_kept = config.n_kept();
    let mut positions = DMatrix::zeros(n_kept, dim);
    let mut lp_trace = Vec::with_capacity(n_kept);
    let mut history = Vec::new();
    let mut window = vec![0.0; TUNING_WINDOW * dim];
    let mut window_accepts = 0usize;
    let mut kept_accepts = 0usize;

    for iter in 0..config.n_iter {
        let accepted = hmc_iteration(&mut state, &eps, config.n_leapfrog, target, bounds, &mut rng);
        let slot = iter % TUNING_WINDOW;
        window[slot * dim..(slot + 1) * dim].copy_from_slice(&state.q);
        window_accepts += accepted as usize;
        if iter >= n_burn {
            let r = iter - n_burn;
            for j in 0..dim {
                positions[(r, j)] = state.q[j];
            }
            lp_trace.push(state.lp);
            kept_accepts += accepted as usize;
        }
        if slot + 1 == TUNING_WINDOW {
            let rate = window_accepts as f64 / TUNING_WINDOW as f64;
            history.push(rate);
            if iter < n_burn {
                let sds = window_sds(&window, TUNING_WINDOW, dim);
                tune_step_sizes(rate, &sds, &mut eps);
            }
            if config.verbose {
                log::info!(
                    "iteration {}: acceptance {:.2} over the last {TUNING_WINDOW}, log posterior {:.4}",
                    iter + 1,
                    rate,
                    state.lp
                );
            }
            window_accepts = 0;
        }
    }
    Ok(ChainRecord {
        positions,
        lp_trace,
        accept_rate_history: history,
        final_eps: eps,
        accept_rate: if n_kept > 0 { kept_accepts as f64 / n_kept as f64 } else { f64::NAN },
    })
}
