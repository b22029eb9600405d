//! Fixed-step classical Runge–Kutta, used to generate data and to rebuild
//! trajectories from point estimates. Inference never calls this.

use nalgebra::DMatrix;

use super::{OdeError, OdeSystem};

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// `|times| × D`.
    pub values: DMatrix<f64>,
}

impl Trajectory {
    pub fn component(&self, j: usize) -> Vec<f64> {
        self.values.column(j).iter().copied().collect()
    }
}

/// One ten-thousandth of the requested time span.
pub fn default_dt_max(times: &[f64]) -> f64 {
    match (times.first(), times.last()) {
        (Some(a), Some(b)) if b > a => (b - a) / 10_000.0,
        _ => 1.0,
    }
}

pub fn integrate(
    model: &OdeSystem,
    x0: &[f64],
    theta: &[f64],
    times: &[f64],
    dt_max: f64,
) -> Result<Trajectory, OdeError> {
    let d = model.dim_x();
    if x0.len() != d {
        return Err(OdeError::Shape(format!("x0 has length {}, model expects {d}", x0.len())));
    }
    if theta.len() != model.dim_theta() {
        return Err(OdeError::Shape(format!(
            "theta has length {}, model expects {}",
            theta.len(),
            model.dim_theta()
        )));
    }
    if times.is_empty() {
        return Err(OdeError::Times("no output times".into()));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) || times.iter().any(|t| !t.is_finite()) {
        return Err(OdeError::Times("output times must be finite and strictly increasing".into()));
    }
    if !(dt_max > 0.0) || !dt_max.is_finite() {
        return Err(OdeError::Times(format!("dt_max must be positive, got {dt_max}")));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(OdeError::BlowUp { time: times[0] });
    }

    let dynamics = model.dynamics();
    let mut values = DMatrix::zeros(times.len(), d);
    let mut x = x0.to_vec();
    let mut k1 = vec![0.0; d];
    let mut k2 = vec![0.0; d];
    let mut k3 = vec![0.0; d];
    let mut k4 = vec![0.0; d];
    let mut tmp = vec![0.0; d];
    for (j, v) in x.iter().enumerate() {
        values[(0, j)] = *v;
    }

    for (row, w) in times.windows(2).enumerate() {
        let span = w[1] - w[0];
        let steps = (span / dt_max).ceil().max(1.0) as usize;
        let h = span / steps as f64;
        for s in 0..steps {
            let t = w[0] + s as f64 * h;
            dynamics.rhs(theta, &x, t, &mut k1);
            axpy(&x, 0.5 * h, &k1, &mut tmp);
            dynamics.rhs(theta, &tmp, t + 0.5 * h, &mut k2);
            axpy(&x, 0.5 * h, &k2, &mut tmp);
            dynamics.rhs(theta, &tmp, t + 0.5 * h, &mut k3);
            axpy(&x, h, &k3, &mut tmp);
            dynamics.rhs(theta, &tmp, t + h, &mut k4);
            for i in 0..d {
                x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(OdeError::BlowUp { time: t + h });
            }
        }
        for (j, v) in x.iter().enumerate() {
            values[(row + 1, j)] = *v;
        }
    }
    Ok(Trajectory {
        times: times.to_vec(),
        values,
    })
}

fn axpy(x: &[f64], a: f64, k: &[f64], out: &mut [f64]) {
    for i in 0..x.len() {
        out[i] = x[i] + a * k[i];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::{builtin_model, parse_ode_dsl};

    fn exp_model() -> OdeSystem {
        parse_ode_dsl("dx = theta1 * x").unwrap()
    }

    #[test]
    fn exponential_growth() {
        let tr = integrate(&exp_model(), &[1.0], &[1.0], &[0.0, 1.0], 0.01).unwrap();
        assert!((tr.values[(1, 0)] - std::f64::consts::E).abs() < 1e-6);
    }

    #[test]
    fn zero_dynamics_are_constant() {
        let m = parse_ode_dsl("dx = 0\ndy = 0").unwrap();
        let tr = integrate(&m, &[3.5, -1.25], &[], &[0.0, 0.3, 2.0, 9.0], 0.1).unwrap();
        for r in 0..4 {
            assert_eq!(tr.values[(r, 0)], 3.5);
            assert_eq!(tr.values[(r, 1)], -1.25);
        }
    }

    #[test]
    fn fourth_order_convergence() {
        let m = exp_model();
        let exact = 1f64.exp();
        let err = |h: f64| {
            let tr = integrate(&m, &[1.0], &[1.0], &[0.0, 1.0], h).unwrap();
            (tr.values[(1, 0)] - exact).abs()
        };
        let ratio = err(0.1) / err(0.05);
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn hes1_oscillates_every_two_hours() {
        let m = builtin_model("hes1").unwrap();
        let times: Vec<f64> = (0..=2400).map(|i| i as f64 * 0.1).collect();
        let tr = integrate(
            &m,
            &[1.439, 2.037, 17.904],
            &[0.022, 0.3, 0.031, 0.028, 0.5, 20.0, 0.3],
            &times,
            0.01,
        )
        .unwrap();
        let p = tr.component(0);
        let peaks: Vec<f64> = (1..p.len() - 1)
            .filter(|&i| p[i] > p[i - 1] && p[i] >= p[i + 1])
            .map(|i| times[i])
            .collect();
        assert!(peaks.len() >= 2, "peaks {peaks:?}");
        let period = peaks[1] - peaks[0];
        assert!((100.0..140.0).contains(&period), "period {period}");
    }

    #[test]
    fn blow_up_reports_time() {
        let m = parse_ode_dsl("dx = x^2").unwrap();
        let err = integrate(&m, &[1.0], &[], &[0.0, 2.0], 0.01).unwrap_err();
        match err {
            OdeError::BlowUp { time } => assert!(time > 0.9 && time <= 2.0, "{time}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_unsorted_times() {
        let err = integrate(&exp_model(), &[1.0], &[1.0], &[0.0, 1.0, 1.0], 0.1);
        assert!(matches!(err, Err(OdeError::Times(_))));
    }
}
