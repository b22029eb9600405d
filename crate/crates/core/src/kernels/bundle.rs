//! Per-component GP matrices: `C = K(I, I)`, `m = 'K C⁻¹` and
//! `Ψ = K'' - 'K C⁻¹ K'`, with band-truncated inverses for the posterior.

use nalgebra::{Cholesky, DMatrix, Dyn};

use super::{BandMatrix, KernelError, KernelSpec};

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;

/// Cholesky factorization of `a + εI`. The plain matrix is tried first; on
/// failure `ε` starts at `1e-10 · scale` and grows tenfold up to
/// `1e-4 · scale`. Returns the factor and the jitter that was used.
pub fn jittered_cholesky(
    a: &DMatrix<f64>,
    scale: f64,
    which: &'static str,
) -> Result<(Cholesky<f64, Dyn>, f64), KernelError> {
    let mut rel = 0.0;
    loop {
        let eps = rel * scale;
        let mut m = a.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += eps;
        }
        if let Some(ch) = Cholesky::new(m) {
            if ch.l_dirty().diagonal().iter().all(|v| v.is_finite() && *v > 0.0) {
                return Ok((ch, eps));
            }
        }
        if rel >= JITTER_MAX * (1.0 - 1e-9) {
            return Err(KernelError::Factorization { which, jitter: eps });
        }
        rel = if rel == 0.0 { JITTER_START } else { rel * 10.0 };
    }
}

fn log_det(ch: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * ch.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Dense intermediate matrices of a GP bundle. `dk[(i, j)] = ∂K/∂s (t_i, t_j)`
/// (`'K`), `kd = ∂K/∂t` (`K'`), `kdd = ∂²K/∂s∂t` (`K''`).
#[derive(Debug, Clone)]
pub struct DenseGp {
    pub c: DMatrix<f64>,
    pub dk: DMatrix<f64>,
    pub kd: DMatrix<f64>,
    pub kdd: DMatrix<f64>,
    pub cinv: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    pub psinv: DMatrix<f64>,
    pub logdet_c: f64,
    pub logdet_psi: f64,
}

pub fn dense_gp_matrices(times: &[f64], spec: &KernelSpec) -> Result<DenseGp, KernelError> {
    let n = times.len();
    if n == 0 {
        return Err(KernelError::Input("empty time grid".into()));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(KernelError::Input("time grid must be strictly increasing".into()));
    }
    let mut c = DMatrix::zeros(n, n);
    let mut dk = DMatrix::zeros(n, n);
    let mut kdd = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let (g, g1, g2) = spec.lag(times[i] - times[j]);
            c[(i, j)] = g;
            c[(j, i)] = g;
            dk[(i, j)] = g1;
            dk[(j, i)] = -g1;
            kdd[(i, j)] = -g2;
            kdd[(j, i)] = -g2;
        }
    }
    let kd = dk.transpose();

    let (chol_c, _) = jittered_cholesky(&c, spec.phi()[0], "the GP covariance C")?;
    let cinv = chol_c.inverse();
    let w = chol_c
        .l_dirty()
        .lower_triangle()
        .solve_lower_triangular(&kd)
        .expect("triangular factor has a positive diagonal");
    let mut psi = &kdd - w.transpose() * &w;
    symmetrize(&mut psi);
    let m = chol_c.solve(&kd).transpose();

    let psi_scale = (0..n).map(|i| kdd[(i, i)].abs()).fold(0.0, f64::max);
    let (chol_psi, _) = jittered_cholesky(&psi, psi_scale, "the derivative covariance Psi")?;
    let mut psinv = chol_psi.inverse();
    symmetrize(&mut psinv);
    let mut cinv = cinv;
    symmetrize(&mut cinv);

    Ok(DenseGp {
        logdet_c: log_det(&chol_c),
        logdet_psi: log_det(&chol_psi),
        c,
        dk,
        kd,
        kdd,
        cinv,
        m,
        psi,
        psinv,
    })
}

fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Everything the posterior needs about one component's GP prior.
#[derive(Debug, Clone)]
pub struct GpBundle {
    pub times: Vec<f64>,
    pub spec: KernelSpec,
    pub mu: Vec<f64>,
    pub dotmu: Vec<f64>,
    pub cinv: BandMatrix,
    pub m: BandMatrix,
    pub psinv: BandMatrix,
    pub logdet_c: f64,
    pub logdet_psi: f64,
    pub band_size: usize,
    /// Whether the truncated `C⁻¹` and `Ψ⁻¹` are still positive definite.
    pub band_positive_definite: bool,
}

pub fn build_gp_bundle(
    times: &[f64],
    spec: &KernelSpec,
    mu: &[f64],
    dotmu: &[f64],
    band_size: usize,
) -> Result<GpBundle, KernelError> {
    let n = times.len();
    if mu.len() != n || dotmu.len() != n {
        return Err(KernelError::Input(format!(
            "mu/dotmu have lengths {}/{} but the grid has {n} points",
            mu.len(),
            dotmu.len()
        )));
    }
    if band_size == 0 {
        return Err(KernelError::Input("band size must be positive".into()));
    }
    let dense = dense_gp_matrices(times, spec)?;
    let cinv = BandMatrix::from_dense(&dense.cinv, band_size);
    let psinv = BandMatrix::from_dense(&dense.psinv, band_size);
    let band_pd = cinv.is_positive_definite() && psinv.is_positive_definite();
    if !band_pd {
        log::warn!(
            "band approximation with band size {band_size} is not positive definite on a {n}-point grid; \
             consider a larger band size"
        );
    }
    Ok(GpBundle {
        times: times.to_vec(),
        spec: spec.clone(),
        mu: mu.to_vec(),
        dotmu: dotmu.to_vec(),
        cinv,
        m: BandMatrix::from_dense(&dense.m, band_size),
        psinv,
        logdet_c: dense.logdet_c,
        logdet_psi: dense.logdet_psi,
        band_size,
        band_positive_definite: band_pd,
    })
}
