//! ODE systems `dx/dt = f(x, θ, t)` together with their Jacobians.
//!
//! A system is described by a [`Dynamics`] implementation evaluated one state
//! at a time; [`OdeSystem`] wraps it with parameter bounds and names and offers
//! the row-vectorised views (`n × D` states in, `n × D` or `n × k × D` arrays
//! out) used by the rest of the crate.

mod builtin;
mod dsl;
mod gradcheck;
mod integrate;

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use thiserror::Error;

pub use builtin::{builtin_model, BUILTIN_MODELS};
pub use dsl::{parse_ode_dsl, DslError};
pub use gradcheck::{check_gradients, GradientReport};
pub use integrate::{default_dt_max, integrate, Trajectory};

#[derive(Debug, Error)]
pub enum OdeError {
    #[error("unknown model `{name}`; available models: {}", available.join(", "))]
    UnknownModel {
        name: String,
        available: Vec<&'static str>,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid parameter bounds: {0}")]
    Bounds(String),
    #[error("non-finite state encountered at t = {time}")]
    BlowUp { time: f64 },
    #[error("non-finite derivative for component {component} at t = {time}")]
    NonFinite { component: usize, time: f64 },
    #[error("invalid time grid: {0}")]
    Times(String),
}

/// Right-hand side of an ODE system, evaluated at a single state.
///
/// Jacobian layouts follow the row-slice convention of the public arrays:
/// `jac_x[i * D + j] = ∂f_j/∂x_i` and `jac_theta[i * D + j] = ∂f_j/∂θ_i`.
pub trait Dynamics: Send + Sync {
    fn dim_x(&self) -> usize;
    fn dim_theta(&self) -> usize;
    fn rhs(&self, theta: &[f64], x: &[f64], t: f64, out: &mut [f64]);
    fn jac_x(&self, theta: &[f64], x: &[f64], t: f64, out: &mut [f64]);
    fn jac_theta(&self, theta: &[f64], x: &[f64], t: f64, out: &mut [f64]);

    /// Value and both Jacobians in one call. Implementations that share
    /// intermediate quantities should override this.
    fn eval_all(
        &self,
        theta: &[f64],
        x: &[f64],
        t: f64,
        f: &mut [f64],
        jac_x: &mut [f64],
        jac_theta: &mut [f64],
    ) {
        self.rhs(theta, x, t, f);
        self.jac_x(theta, x, t, jac_x);
        self.jac_theta(theta, x, t, jac_theta);
    }
}

/// Dense `n × a × b` array stored row-major (last index fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct Array3 {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Array3 {
    pub fn zeros(n0: usize, n1: usize, n2: usize) -> Self {
        Self {
            dims: [n0, n1, n2],
            data: vec![0.0; n0 * n1 * n2],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn get(&self, r: usize, i: usize, j: usize) -> f64 {
        self.data[self.offset(r, i, j)]
    }

    pub fn set(&mut self, r: usize, i: usize, j: usize, v: f64) {
        let k = self.offset(r, i, j);
        self.data[k] = v;
    }

    /// The `a × b` block belonging to row `r`, flattened.
    pub fn row_slice(&self, r: usize) -> &[f64] {
        let w = self.dims[1] * self.dims[2];
        &self.data[r * w..(r + 1) * w]
    }

    pub fn row_slice_mut(&mut self, r: usize) -> &mut [f64] {
        let w = self.dims[1] * self.dims[2];
        &mut self.data[r * w..(r + 1) * w]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    fn offset(&self, r: usize, i: usize, j: usize) -> usize {
        debug_assert!(r < self.dims[0] && i < self.dims[1] && j < self.dims[2]);
        (r * self.dims[1] + i) * self.dims[2] + j
    }
}

/// An ODE model: dynamics plus the box `[theta_lower, theta_upper]` on θ.
#[derive(Clone)]
pub struct OdeSystem {
    name: String,
    component_names: Vec<String>,
    param_names: Vec<String>,
    theta_lower: Vec<f64>,
    theta_upper: Vec<f64>,
    dynamics: Arc<dyn Dynamics>,
}

impl fmt::Debug for OdeSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OdeSystem")
            .field("name", &self.name)
            .field("components", &self.component_names)
            .field("params", &self.param_names)
            .field("theta_lower", &self.theta_lower)
            .field("theta_upper", &self.theta_upper)
            .finish()
    }
}

impl OdeSystem {
    pub fn new(
        name: impl Into<String>,
        dynamics: Arc<dyn Dynamics>,
        theta_lower: Vec<f64>,
        theta_upper: Vec<f64>,
    ) -> Result<Self, OdeError> {
        let p = dynamics.dim_theta();
        if dynamics.dim_x() == 0 {
            return Err(OdeError::Shape("system must have at least one component".into()));
        }
        if theta_lower.len() != p || theta_upper.len() != p {
            return Err(OdeError::Bounds(format!(
                "expected {p} lower and upper bounds, got {} and {}",
                theta_lower.len(),
                theta_upper.len()
            )));
        }
        for (i, (lo, hi)) in theta_lower.iter().zip(&theta_upper).enumerate() {
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(OdeError::Bounds(format!(
                    "parameter {i}: lower {lo} exceeds upper {hi}"
                )));
            }
        }
        let component_names = (1..=dynamics.dim_x()).map(|i| format!("x{i}")).collect();
        let param_names = (1..=p).map(|i| format!("theta{i}")).collect();
        Ok(Self {
            name: name.into(),
            component_names,
            param_names,
            theta_lower,
            theta_upper,
            dynamics,
        })
    }

    pub fn with_component_names(mut self, names: Vec<String>) -> Self {
        assert_eq!(names.len(), self.dim_x(), "component name count");
        self.component_names = names;
        self
    }

    pub fn with_param_names(mut self, names: Vec<String>) -> Self {
        assert_eq!(names.len(), self.dim_theta(), "parameter name count");
        self.param_names = names;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim_x(&self) -> usize {
        self.dynamics.dim_x()
    }

    pub fn dim_theta(&self) -> usize {
        self.dynamics.dim_theta()
    }

    pub fn component_names(&self) -> &[String] {
        &self.component_names
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn theta_lower(&self) -> &[f64] {
        &self.theta_lower
    }

    pub fn theta_upper(&self) -> &[f64] {
        &self.theta_upper
    }

    pub fn dynamics(&self) -> &dyn Dynamics {
        self.dynamics.as_ref()
    }

    pub fn theta_in_bounds(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim_theta()
            && theta
                .iter()
                .zip(self.theta_lower.iter().zip(&self.theta_upper))
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    /// Single-state evaluation.
    pub fn rhs_at(&self, theta: &[f64], x: &[f64], t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim_x()];
        self.dynamics.rhs(theta, x, t, &mut out);
        out
    }

    /// `f` evaluated row-wise on an `n × D` state matrix.
    pub fn f(&self, theta: &[f64], x: &DMatrix<f64>, t: &[f64]) -> Result<DMatrix<f64>, OdeError> {
        self.check_shapes(theta, x, t)?;
        let d = self.dim_x();
        let mut out = DMatrix::zeros(x.nrows(), d);
        let mut row = vec![0.0; d];
        let mut fr = vec![0.0; d];
        for r in 0..x.nrows() {
            copy_row(x, r, &mut row);
            self.dynamics.rhs(theta, &row, t[r], &mut fr);
            for (j, v) in fr.iter().enumerate() {
                out[(r, j)] = *v;
            }
        }
        Ok(out)
    }

    /// Like [`OdeSystem::f`] but reports the first non-finite entry.
    pub fn try_f(&self, theta: &[f64], x: &DMatrix<f64>, t: &[f64]) -> Result<DMatrix<f64>, OdeError> {
        let out = self.f(theta, x, t)?;
        for r in 0..out.nrows() {
            for j in 0..out.ncols() {
                if !out[(r, j)].is_finite() {
                    return Err(OdeError::NonFinite { component: j, time: t[r] });
                }
            }
        }
        Ok(out)
    }

    /// `n × D × D` array with slice `[r, i, j] = ∂f_j/∂x_i`.
    pub fn jac_x(&self, theta: &[f64], x: &DMatrix<f64>, t: &[f64]) -> Result<Array3, OdeError> {
        self.check_shapes(theta, x, t)?;
        let d = self.dim_x();
        let mut out = Array3::zeros(x.nrows(), d, d);
        let mut row = vec![0.0; d];
        for r in 0..x.nrows() {
            copy_row(x, r, &mut row);
            self.dynamics.jac_x(theta, &row, t[r], out.row_slice_mut(r));
        }
        Ok(out)
    }

    /// `n × |θ| × D` array with slice `[r, i, j] = ∂f_j/∂θ_i`.
    pub fn jac_theta(&self, theta: &[f64], x: &DMatrix<f64>, t: &[f64]) -> Result<Array3, OdeError> {
        self.check_shapes(theta, x, t)?;
        let d = self.dim_x();
        let mut out = Array3::zeros(x.nrows(), self.dim_theta(), d);
        let mut row = vec![0.0; d];
        for r in 0..x.nrows() {
            copy_row(x, r, &mut row);
            self.dynamics.jac_theta(theta, &row, t[r], out.row_slice_mut(r));
        }
        Ok(out)
    }

    fn check_shapes(&self, theta: &[f64], x: &DMatrix<f64>, t: &[f64]) -> Result<(), OdeError> {
        if theta.len() != self.dim_theta() {
            return Err(OdeError::Shape(format!(
                "theta has length {}, model expects {}",
                theta.len(),
                self.dim_theta()
            )));
        }
        if x.ncols() != self.dim_x() {
            return Err(OdeError::Shape(format!(
                "x has {} columns, model expects {}",
                x.ncols(),
                self.dim_x()
            )));
        }
        if t.len() != x.nrows() {
            return Err(OdeError::Shape(format!(
                "{} time points for {} state rows",
                t.len(),
                x.nrows()
            )));
        }
        Ok(())
    }
}

fn copy_row(x: &DMatrix<f64>, r: usize, out: &mut [f64]) {
    for (j, v) in out.iter_mut().enumerate() {
        *v = x[(r, j)];
    }
}
