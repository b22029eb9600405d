//! The benchmark systems: Hes1 (raw and log scale), FitzHugh–Nagumo and the
//! time-dependent HIV model.

use std::f64::consts::PI;
use std::sync::Arc;

use super::{Dynamics, OdeError, OdeSystem};

pub const BUILTIN_MODELS: [&str; 4] = ["hes1", "hes1-log", "fn", "hiv-td"];

pub fn builtin_model(name: &str) -> Result<OdeSystem, OdeError> {
    let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let nonneg = |p: usize| (vec![0.0; p], vec![f64::INFINITY; p]);
    let hes1_params = names(&["a", "b", "c", "d", "e", "f", "g"]);
    let system = match name {
        "hes1" => {
            let (lo, hi) = nonneg(7);
            OdeSystem::new(name, Arc::new(Hes1), lo, hi)?
                .with_component_names(names(&["P", "M", "H"]))
                .with_param_names(hes1_params)
        }
        "hes1-log" => {
            let (lo, hi) = nonneg(7);
            OdeSystem::new(name, Arc::new(Hes1Log), lo, hi)?
                .with_component_names(names(&["P", "M", "H"]))
                .with_param_names(hes1_params)
        }
        "fn" => {
            let (lo, hi) = nonneg(3);
            OdeSystem::new(name, Arc::new(FitzHughNagumo), lo, hi)?
                .with_component_names(names(&["V", "R"]))
                .with_param_names(names(&["a", "b", "c"]))
        }
        "hiv-td" => {
            let (lo, hi) = nonneg(5);
            OdeSystem::new(name, Arc::new(HivTimeDependent), lo, hi)?
                .with_component_names(names(&["TU", "TI", "V"]))
                .with_param_names(names(&["lambda", "rho", "delta", "N", "c"]))
        }
        _ => {
            return Err(OdeError::UnknownModel {
                name: name.to_string(),
                available: BUILTIN_MODELS.to_vec(),
            })
        }
    };
    Ok(system)
}

/// Hes1 oscillator on the original scale, components `(P, M, H)`.
struct Hes1;

impl Dynamics for Hes1 {
    fn dim_x(&self) -> usize {
        3
    }

    fn dim_theta(&self) -> usize {
        7
    }

    fn rhs(&self, th: &[f64], x: &[f64], _t: f64, out: &mut [f64]) {
        let (p, m, h) = (x[0], x[1], x[2]);
        let q = 1.0 / (1.0 + p * p);
        out[0] = -th[0] * p * h + th[1] * m - th[2] * p;
        out[1] = -th[3] * m + th[4] * q;
        out[2] = -th[0] * p * h + th[5] * q - th[6] * h;
    }

    fn jac_x(&self, th: &[f64], x: &[f64], _t: f64, out: &mut [f64]) {
        let (p, m, h) = (x[0], x[1], x[2]);
        let _ = m;
        let dq = -2.0 * p / (1.0 + p * p).powi(2);
        out.fill(0.0);
        // out[i * 3 + j] = ∂f_j / ∂x_i
        out[0] = -th[0] * h - th[2];
        out[3] = th[1];
        out[6] = -th[0] * p;
        out[1] = th[4] * dq;
        out[4] = -th[3];
        out[2] = -th[0] * h + th[5] * dq;
        out[8] = -th[0] * p - th[6];
    }

    fn jac_theta(&self, _th: &[f64], x: &[f64], _t: f64, out: &mut [f64]) {
        let (p, m, h) = (x[0], x[1], x[2]);
        let q = 1.0 / (1.0 + p * p);
        out.fill(0.0);
        out[0] = -p * h; // a -> f1
        out[2] = -p * h; // a -> f3
        out[3] = m; // b -> f1
        out[2 * 3] = -p; // c -> f1
        out[3 * 3 + 1] = -m; // d -> f2
        out[4 * 3 + 1] = q; // e -> f2
        out[5 * 3 + 2] = q; // f -> f3
        out[6 * 3 + 2] = -h; // g -> f3
    }
}

/// Hes1 on the log scale: components are `(log P, log M, log H)`.
struct Hes1Log;

impl Dynamics for Hes1Log {
    fn dim_x(&self) -> usize {
        3
    }

    fn dim_theta(&self) -> usize {
        7
    }

    fn rhs(&self, th: &[f64], x: &[f64], _t: f64, out: &mut [f64]) {
        let (p, m, h) = (x[0].exp(), x[1].exp(), x[2].exp());
        let q = 1.0 / (1.0 + p * p);
        out[0] = -th[0] * h + th[1] * m / p - th[2];
        out[1] = -th[3] + th[4] * q / m;
        out[2] = -th[0] * p + th[5] * q / h - th[6];
    }

    fn jac_x(&self, th: &[f64], x: &[f64], _t: f64, out: &mut [f64]) {
        let (p, m, h) = (x[0].exp(), x[1].exp(), x[2].exp());
        let q = 1.0 / (1.0 + p * p);
        // d q / d log P
        let dq = -2.0 * p * p * q * q;
        let m_over_p = (x[1] - x[0]).exp();
        out.fill(0.0);
        out[0] = -th[1] * m_over_p;
        out[3] = th[1] * m_over_p;
        out[6] = -th[0] * h;
        out[1] = th[4] * dq / m;
        out[4] = -th[4] * q / m;
        out[2] = -th[0] * p + th[5] * dq / h;
        out[8] = -th[5] * q / h;
    }

    fn jac_theta(&self, _th: &[f64], x: &[f64], _t: f64, out: &mut [f64]) {
        let (p, m, h) = (x[0].exp(), x[1].exp(), x[2].exp());
        let q = 1.0 / (1.0 + p * p);
        out.fill(0.0);
        out[0] = -h;
        out[2] = -p;
        out[3] = (x[1] - x[0]).exp();
        out[2 * 3] = -1.0;
        out[3 * 3 + 1] = -1.0;
        out[4 * 3 + 1] = q / m;
        out[5 * 3 + 2] = q / h;
        out[6 * 3 + 2] = -1.0;
    }

    fn eval_all(
        &self,
        th: &[f64],
        x: &[f64],
        _t: f64,
        f: &mut [f64],
        jx: &mut [f64],
        jt: &mut [f64],
    ) {
        let (p, m, h) = (x[0].exp(), x[1].exp(), x[2].exp());
        let q = 1.0 / (1.0 + p * p);
        let dq = -2.0 * p * p * q * q;
        let m_over_p = m / p;
        f[0] = -th[0] * h + th[1] * m_over_p - th[2];
        f[1] = -th[3] + th[4] * q / m;
        f[2] = -th[0] * p + th[5] * q / h - th[6];

        jx.fill(0.0);
        jx[0] = -th[1] * m_over_p;
        jx[3] = th[1] * m_over_p;
        jx[6] = -th[0] * h;
        jx[1] = th[4] * dq / m;
        jx[4] = -th[4] * q / m;
        jx[2] = -th[0] * p + th[5] * dq / h;
        jx[8] = -th[5] * q / h;

        jt.fill(0.0);
        jt[0] = -h;
        jt[2] = -p;
        jt[3] = m_over_p;
        jt[6] = -1.0;
        jt[10] = -1.0;
        jt[13] = q / m;
        jt[17] = q / h;
        jt[20] = -1.0;
    }
}

/// FitzHugh–Nagumo, components `(V, R)`, parameters `(a, b, c)`.
struct FitzHughNagumo;

impl Dynamics for FitzHughNagumo {
    fn dim_x(&self) -> usize {
        2
    }

    fn dim_theta(&self) -> usize {
        3
    }

    fn rhs(&self, th: &[f64], x: &[f64], _t: f64, out: &mut [f64]) {
        let (v, r) = (x[0], x[1]);
        let (a, b, c) = (th[0], th[1], th[2]);
        out[0] = c * (v - v * v * v / 3.0 + r);
        out[1] = -(v - a + b * r) / c;
    }

    fn jac_x(&self, th: &[f64], x: &[f64], _t: f64, out: &mut [f64]) {
        let v = x[0];
        let (b, c) = (th[1], th[2]);
        out[0] = c * (1.0 - v * v);
        out[1] = -1.0 / c;
        out[2] = c;
        out[3] = -b / c;
    }

    fn jac_theta(&self, th: &[f64], x: &[f64], _t: f64, out: &mut [f64]) {
        let (v, r) = (x[0], x[1]);
        let (a, b, c) = (th[0], th[1], th[2]);
        out[0] = 0.0;
        out[1] = 1.0 / c;
        out[2] = 0.0;
        out[3] = -r / c;
        out[4] = v - v * v * v / 3.0 + r;
        out[5] = (v - a + b * r) / (c * c);
    }
}

/// HIV infection model with the oscillating infection rate `η(t)`.
struct HivTimeDependent;

pub(crate) fn hiv_eta(t: f64) -> f64 {
    9e-5 * (1.0 - 0.9 * (PI * t / 1000.0).cos())
}

impl Dynamics for HivTimeDependent {
    fn dim_x(&self) -> usize {
        3
    }

    fn dim_theta(&self) -> usize {
        5
    }

    fn rhs(&self, th: &[f64], x: &[f64], t: f64, out: &mut [f64]) {
        let (tu, ti, v) = (x[0], x[1], x[2]);
        let (lambda, rho, delta, n, c) = (th[0], th[1], th[2], th[3], th[4]);
        let eta = hiv_eta(t);
        out[0] = lambda - rho * tu - eta * tu * v;
        out[1] = eta * tu * v - delta * ti;
        out[2] = n * delta * ti - c * v;
    }

    fn jac_x(&self, th: &[f64], x: &[f64], t: f64, out: &mut [f64]) {
        let (tu, v) = (x[0], x[2]);
        let (rho, delta, n, c) = (th[1], th[2], th[3], th[4]);
        let eta = hiv_eta(t);
        out.fill(0.0);
        out[0] = -rho - eta * v;
        out[1] = eta * v;
        out[4] = -delta;
        out[5] = n * delta;
        out[6] = -eta * tu;
        out[7] = eta * tu;
        out[8] = -c;
    }

    fn jac_theta(&self, th: &[f64], x: &[f64], _t: f64, out: &mut [f64]) {
        let (tu, ti, v) = (x[0], x[1], x[2]);
        let (delta, n) = (th[2], th[3]);
        out.fill(0.0);
        out[0] = 1.0;
        out[3] = -tu;
        out[2 * 3 + 1] = -ti;
        out[2 * 3 + 2] = n * ti;
        out[3 * 3 + 2] = delta * ti;
        out[4 * 3 + 2] = -v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    const HES1_THETA: [f64; 7] = [0.022, 0.3, 0.031, 0.028, 0.5, 20.0, 0.3];

    #[test]
    fn hes1_starts_near_protein_minimum() {
        let m = builtin_model("hes1").unwrap();
        let f = m.rhs_at(&HES1_THETA, &[1.439, 2.037, 17.904], 3.0);
        // -0.022*1.439*17.904 + 0.3*2.037 - 0.031*1.439
        let expected = -0.022 * 1.439 * 17.904 + 0.3 * 2.037 - 0.031 * 1.439;
        assert!((f[0] - expected).abs() < 1e-15);
        assert!((f[0] + 0.0003).abs() < 5e-5, "f_P = {}", f[0]);
    }

    #[test]
    fn log_model_is_chain_rule_of_raw_model() {
        let raw = builtin_model("hes1").unwrap();
        let log = builtin_model("hes1-log").unwrap();
        let x = [1.439, 2.037, 17.904];
        let lx: Vec<f64> = x.iter().map(|v: &f64| v.ln()).collect();
        let fr = raw.rhs_at(&HES1_THETA, &x, 0.0);
        let fl = log.rhs_at(&HES1_THETA, &lx, 0.0);
        for j in 0..3 {
            assert!((fl[j] - fr[j] / x[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn fn_jacobian_vanishes_at_unit_voltage() {
        let m = builtin_model("fn").unwrap();
        for c in [0.5, 3.0, 11.0] {
            let x = DMatrix::from_row_slice(1, 2, &[1.0, 0.3]);
            let j = m.jac_x(&[0.2, 0.2, c], &x, &[0.0]).unwrap();
            assert_eq!(j.get(0, 0, 0), 0.0);
        }
    }

    #[test]
    fn hiv_infection_rate_at_origin() {
        assert!((hiv_eta(0.0) - 9e-6).abs() < 1e-20);
    }

    #[test]
    fn unknown_model_lists_alternatives() {
        let err = builtin_model("lorenz").unwrap_err();
        let msg = err.to_string();
        for name in BUILTIN_MODELS {
            assert!(msg.contains(name), "{msg}");
        }
    }

    #[test]
    fn hes1_log_fused_eval_matches_separate_calls() {
        let m = builtin_model("hes1-log").unwrap();
        let dynamics = m.dynamics();
        let x = [0.3, -0.2, 1.1];
        let (mut f, mut jx, mut jt) = (vec![0.0; 3], vec![0.0; 9], vec![0.0; 21]);
        dynamics.eval_all(&HES1_THETA, &x, 0.0, &mut f, &mut jx, &mut jt);
        let (mut f2, mut jx2, mut jt2) = (vec![0.0; 3], vec![0.0; 9], vec![0.0; 21]);
        dynamics.rhs(&HES1_THETA, &x, 0.0, &mut f2);
        dynamics.jac_x(&HES1_THETA, &x, 0.0, &mut jx2);
        dynamics.jac_theta(&HES1_THETA, &x, 0.0, &mut jt2);
        for (a, b) in f.iter().chain(&jx).chain(&jt).zip(f2.iter().chain(&jx2).chain(&jt2)) {
            assert!((a - b).abs() < 1e-14 * (1.0 + b.abs()));
        }
    }
}
