//! Stationary GP covariance functions with analytic derivatives, and the
//! per-component matrices used by the posterior.

mod band;
pub mod bessel;
mod bundle;

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub use band::BandMatrix;
pub use bundle::{build_gp_bundle, dense_gp_matrices, jittered_cholesky, DenseGp, GpBundle};

/// Smoothness of the default Matérn kernel.
pub const GENERAL_MATERN_NU: f64 = 2.01;

pub const DEFAULT_BAND_SIZE: usize = 20;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("invalid kernel hyper-parameters: {0}")]
    InvalidPhi(String),
    #[error("unknown kernel type `{0}`; expected one of generalMatern, matern, rbf, compact1, periodicMatern")]
    UnknownKind(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error(
        "{which} is not positive definite even with jitter {jitter:.3e}; \
         review the kernel hyper-parameters (a larger bandwidth phi2 or a different phi1)"
    )]
    Factorization { which: &'static str, jitter: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum KernelKind {
    #[default]
    GeneralMatern,
    Matern52,
    Rbf,
    Compact1,
    PeriodicMatern,
}

impl KernelKind {
    pub const ALL: [KernelKind; 5] = [
        KernelKind::GeneralMatern,
        KernelKind::Matern52,
        KernelKind::Rbf,
        KernelKind::Compact1,
        KernelKind::PeriodicMatern,
    ];

    pub fn n_phi(self) -> usize {
        match self {
            KernelKind::PeriodicMatern => 3,
            _ => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelKind::GeneralMatern => "generalMatern",
            KernelKind::Matern52 => "matern",
            KernelKind::Rbf => "rbf",
            KernelKind::Compact1 => "compact1",
            KernelKind::PeriodicMatern => "periodicMatern",
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelKind {
    type Err = KernelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s.chars().filter(|c| c.is_alphanumeric()).collect::<String>().to_lowercase();
        Ok(match key.as_str() {
            "generalmatern" => KernelKind::GeneralMatern,
            "matern" | "matern52" => KernelKind::Matern52,
            "rbf" => KernelKind::Rbf,
            "compact1" => KernelKind::Compact1,
            "periodicmatern" => KernelKind::PeriodicMatern,
            _ => return Err(KernelError::UnknownKind(s.to_string())),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    kind: KernelKind,
    phi: Vec<f64>,
}

impl KernelSpec {
    pub fn new(kind: KernelKind, phi: Vec<f64>) -> Result<Self, KernelError> {
        if phi.len() != kind.n_phi() {
            return Err(KernelError::InvalidPhi(format!(
                "{kind} takes {} hyper-parameters, got {}",
                kind.n_phi(),
                phi.len()
            )));
        }
        if !(phi[0] >= 0.0) || !phi[0].is_finite() {
            return Err(KernelError::InvalidPhi(format!("phi1 must be finite and >= 0, got {}", phi[0])));
        }
        for (i, v) in phi.iter().enumerate().skip(1) {
            if !(*v > 0.0) || !v.is_finite() {
                return Err(KernelError::InvalidPhi(format!("phi{} must be finite and > 0, got {v}", i + 1)));
            }
        }
        Ok(Self { kind, phi })
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn phi(&self) -> &[f64] {
        &self.phi
    }

    /// Covariance as a function of the signed lag `δ = s - t`:
    /// returns `(g(δ), g'(δ), g''(δ))`.
    pub fn lag(&self, delta: f64) -> (f64, f64, f64) {
        let (phi1, phi2) = (self.phi[0], self.phi[1]);
        match self.kind {
            KernelKind::PeriodicMatern => {
                let w_scale = PI / self.phi[2];
                let arg = w_scale * delta;
                let w = 2.0 * arg.sin();
                let dw = 2.0 * w_scale * arg.cos();
                let d2w = -2.0 * w_scale * w_scale * arg.sin();
                let (h, h1, h2) = matern52(phi1, phi2, w.abs());
                let sgn = sign(w);
                (h, h1 * sgn * dw, h2 * dw * dw + h1 * sgn * d2w)
            }
            kind => {
                let r = delta.abs();
                let (h, h1, h2) = match kind {
                    KernelKind::GeneralMatern => general_matern(phi1, phi2, GENERAL_MATERN_NU, r),
                    KernelKind::Matern52 => matern52(phi1, phi2, r),
                    KernelKind::Rbf => rbf(phi1, phi2, r),
                    _ => compact1(phi1, phi2, r),
                };
                (h, h1 * sign(delta), h2)
            }
        }
    }

    pub fn k(&self, s: f64, t: f64) -> f64 {
        self.lag(s - t).0
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelDerivs {
    pub k: f64,
    pub dk_ds: f64,
    pub dk_dt: f64,
    pub d2k_dsdt: f64,
}

pub fn kernel_derivs(spec: &KernelSpec, s: f64, t: f64) -> KernelDerivs {
    let (g, g1, g2) = spec.lag(s - t);
    KernelDerivs {
        k: g,
        dk_ds: g1,
        dk_dt: -g1,
        d2k_dsdt: -g2,
    }
}

/// `(k, dk/dr, d²k/dr²)` of the Matérn kernel with smoothness `nu > 1`.
pub fn general_matern(phi1: f64, phi2: f64, nu: f64, r: f64) -> (f64, f64, f64) {
    let a = (2.0 * nu).sqrt() / phi2;
    if r == 0.0 {
        return (phi1, 0.0, -phi1 * nu / ((nu - 1.0) * phi2 * phi2));
    }
    let z = a * r;
    let c = phi1 * 2f64.powf(1.0 - nu) / bessel::gamma(nu);
    let (k_nu, k_nu1, k_nu2) = bessel::bessel_k_ladder(nu, z);
    let znu = z.powf(nu);
    let k = c * znu * k_nu;
    let k1 = -c * a * znu * k_nu1;
    let k2 = c * a * a * (znu * k_nu2 - znu / z * k_nu1);
    (k, k1, k2)
}

pub fn matern52(phi1: f64, phi2: f64, r: f64) -> (f64, f64, f64) {
    let a = 5f64.sqrt() / phi2;
    let ar = a * r;
    let e = (-ar).exp();
    let k = phi1 * (1.0 + ar + ar * ar / 3.0) * e;
    let k1 = -phi1 * a * ar / 3.0 * (1.0 + ar) * e;
    let k2 = -phi1 * a * a / 3.0 * (1.0 + ar - ar * ar) * e;
    (k, k1, k2)
}

pub fn rbf(phi1: f64, phi2: f64, r: f64) -> (f64, f64, f64) {
    let s2 = phi2 * phi2;
    let k = phi1 * (-r * r / (2.0 * s2)).exp();
    (k, -r / s2 * k, (r * r / (s2 * s2) - 1.0 / s2) * k)
}

pub fn compact1(phi1: f64, phi2: f64, r: f64) -> (f64, f64, f64) {
    let u = r / phi2;
    if u >= 1.0 {
        return (0.0, 0.0, 0.0);
    }
    let v = 1.0 - u;
    let k = phi1 * v.powi(4) * (4.0 * u + 1.0);
    let k1 = -20.0 * phi1 * u * v.powi(3) / phi2;
    let k2 = phi1 * v * v * (80.0 * u - 20.0) / (phi2 * phi2);
    (k, k1, k2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: KernelKind, phi: &[f64]) -> KernelSpec {
        KernelSpec::new(kind, phi.to_vec()).unwrap()
    }

    #[test]
    fn zero_lag() {
        for kind in KernelKind::ALL {
            let phi = [1.7, 0.8, 3.0];
            let s = spec(kind, &phi[..kind.n_phi()]);
            let d = kernel_derivs(&s, 2.5, 2.5);
            assert!((d.k - 1.7).abs() < 1e-14, "{kind}");
            assert_eq!(d.dk_ds, 0.0);
            assert_eq!(d.dk_dt, 0.0);
        }
    }

    #[test]
    fn reference_values() {
        let d = kernel_derivs(&spec(KernelKind::Rbf, &[2.0, 1.0]), 1.0, 0.0);
        assert!((d.k - 2.0 * (-0.5f64).exp()).abs() < 1e-15);
        assert!((d.k - 1.21306).abs() < 1e-5);
        let d = kernel_derivs(&spec(KernelKind::Matern52, &[1.0, 1.0]), 0.0, 1.0);
        let s5 = 5f64.sqrt();
        assert!((d.k - (1.0 + s5 + 5.0 / 3.0) * (-s5).exp()).abs() < 1e-15);
        assert!((d.k - 0.52399).abs() < 1e-5);
    }

    #[test]
    fn compact_support() {
        let s = spec(KernelKind::Compact1, &[1.0, 2.0]);
        for r in [2.0, 2.5, 10.0] {
            let d = kernel_derivs(&s, r, 0.0);
            assert_eq!((d.k, d.dk_ds, d.dk_dt, d.d2k_dsdt), (0.0, 0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn general_matern_approaches_zero_lag_limit() {
        let (k, k1, k2) = general_matern(1.3, 0.7, GENERAL_MATERN_NU, 1e-7);
        let (k0, _, k20) = general_matern(1.3, 0.7, GENERAL_MATERN_NU, 0.0);
        assert!((k - k0).abs() < 1e-9);
        assert!(k1.abs() < 1e-5);
        assert!((k2 / k20 - 1.0).abs() < 1e-3, "{k2} vs {k20}");
    }

    #[test]
    fn parse_kind_names() {
        for kind in KernelKind::ALL {
            assert_eq!(kind.name().parse::<KernelKind>().unwrap(), kind);
        }
        assert_eq!("periodic-matern".parse::<KernelKind>().unwrap(), KernelKind::PeriodicMatern);
        assert!("gauss".parse::<KernelKind>().is_err());
    }

    #[test]
    fn invalid_phi_rejected() {
        assert!(KernelSpec::new(KernelKind::Rbf, vec![1.0, 0.0]).is_err());
        assert!(KernelSpec::new(KernelKind::Rbf, vec![-1.0, 1.0]).is_err());
        assert!(KernelSpec::new(KernelKind::PeriodicMatern, vec![1.0, 1.0]).is_err());
    }
}
