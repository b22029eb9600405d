//! Central finite-difference check of a model's analytic Jacobians.

use nalgebra::DMatrix;

use super::{OdeError, OdeSystem};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientReport {
    pub pass: bool,
    pub max_abs_err_dx: f64,
    pub max_abs_err_dtheta: f64,
}

fn fd_step(v: f64) -> f64 {
    (1e-6 * v.abs()).max(1e-6)
}

pub fn check_gradients(
    model: &OdeSystem,
    x_test: &DMatrix<f64>,
    theta: &[f64],
    times: &[f64],
    tol: f64,
) -> Result<GradientReport, OdeError> {
    if !(tol > 0.0) {
        return Err(OdeError::Shape(format!("tolerance must be positive, got {tol}")));
    }
    let jx = model.jac_x(theta, x_test, times)?;
    let jt = model.jac_theta(theta, x_test, times)?;
    let dyn_ = model.dynamics();
    let d = model.dim_x();
    let p = model.dim_theta();
    let mut fp = vec![0.0; d];
    let mut fm = vec![0.0; d];
    let mut err_dx = 0.0f64;
    let mut err_dt = 0.0f64;

    for r in 0..x_test.nrows() {
        let row: Vec<f64> = (0..d).map(|j| x_test[(r, j)]).collect();
        let t = times[r];
        for i in 0..d {
            let h = fd_step(row[i]);
            let mut xp = row.clone();
            let mut xm = row.clone();
            xp[i] += h;
            xm[i] -= h;
            dyn_.rhs(theta, &xp, t, &mut fp);
            dyn_.rhs(theta, &xm, t, &mut fm);
            for j in 0..d {
                let fd = (fp[j] - fm[j]) / (2.0 * h);
                err_dx = nan_max(err_dx, (fd - jx.get(r, i, j)).abs());
            }
        }
        for i in 0..p {
            let h = fd_step(theta[i]);
            let mut tp = theta.to_vec();
            let mut tm = theta.to_vec();
            tp[i] += h;
            tm[i] -= h;
            dyn_.rhs(&tp, &row, t, &mut fp);
            dyn_.rhs(&tm, &row, t, &mut fm);
            for j in 0..d {
                let fd = (fp[j] - fm[j]) / (2.0 * h);
                err_dt = nan_max(err_dt, (fd - jt.get(r, i, j)).abs());
            }
        }
    }
    Ok(GradientReport {
        pass: err_dx < tol && err_dt < tol,
        max_abs_err_dx: err_dx,
        max_abs_err_dtheta: err_dt,
    })
}

// A NaN discrepancy must fail the check rather than vanish in `max`.
fn nan_max(acc: f64, v: f64) -> f64 {
    if v.is_nan() || acc.is_nan() {
        f64::NAN
    } else {
        acc.max(v)
    }
}
