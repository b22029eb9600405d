//! Simulated benchmark datasets and a replicate runner.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use super::{
    magi_solve, set_discretization_by, set_discretization_level, trajectory_rmse, trajectory_rmse_with, McmcOutput,
    ObservationSet, SolveControl, SolveError,
};
use crate::kernels::KernelKind;
use crate::ode::{builtin_model, integrate, OdeSystem, Trajectory};

pub const HES1_THETA: [f64; 7] = [0.022, 0.3, 0.031, 0.028, 0.5, 20.0, 0.3];
pub const HES1_X0: [f64; 3] = [1.439, 2.037, 17.904];
pub const HES1_SIGMA: f64 = 0.15;

pub const FN_THETA: [f64; 3] = [0.2, 0.2, 3.0];
pub const FN_X0: [f64; 2] = [-1.0, 1.0];
pub const FN_SIGMA: f64 = 0.2;

pub const HIV_THETA: [f64; 5] = [36.0, 0.108, 0.5, 1000.0, 3.0];
pub const HIV_X0: [f64; 3] = [600.0, 30.0, 1e5];
pub const HIV_PHI_V: [f64; 2] = [1e7, 0.5];
pub const HIV_SIGMA_V_INIT: f64 = 100.0;

/// A simulated dataset and the noiseless trajectory it came from.
#[derive(Debug, Clone)]
pub struct BenchDataset {
    pub data: ObservationSet,
    /// Truth on the scale the RMSE is reported on, at the observation times.
    pub truth: Trajectory,
    /// The model to fit.
    pub model: OdeSystem,
}

fn truth_at(model: &OdeSystem, x0: &[f64], theta: &[f64], times: &[f64]) -> Trajectory {
    integrate(model, x0, theta, times, 1e-3).expect("benchmark truth integrates")
}

fn names(model: &OdeSystem) -> Vec<String> {
    model.component_names().to_vec()
}

/// Hes1 oscillator observed every 7.5 min over 240 min: P at the even slots,
/// M at the odd slots, H never. Noise is multiplicative with log-scale SD
/// 0.15, the data are returned on the log scale for the `hes1-log` model and
/// the truth on the original scale.
pub fn hes1_dataset(seed: u64) -> BenchDataset {
    let raw = builtin_model("hes1").unwrap();
    let model = builtin_model("hes1-log").unwrap();
    let times: Vec<f64> = (0..33).map(|i| i as f64 * 7.5).collect();
    let truth = truth_at(&raw, &HES1_X0, &HES1_THETA, &times);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, HES1_SIGMA).unwrap();
    let mut values = DMatrix::from_element(times.len(), 3, f64::NAN);
    for i in 0..times.len() {
        let d = i % 2;
        values[(i, d)] = truth.values[(i, d)].ln() + noise.sample(&mut rng);
    }
    let data = ObservationSet::new(times, values, names(&model)).unwrap();
    BenchDataset { data, truth, model }
}

/// Control for the Hes1 benchmark: known σ = 0.15 for P and M, defaults
/// otherwise.
pub fn hes1_control(seed: u64) -> SolveControl {
    SolveControl {
        sigma: Some(vec![HES1_SIGMA, HES1_SIGMA, f64::NAN]),
        use_fixed_sigma: true,
        seed,
        ..SolveControl::default()
    }
}

/// Per-component trajectory RMSE of a Hes1 fit on the original scale.
pub fn hes1_rmse(out: &McmcOutput, ds: &BenchDataset) -> Result<Vec<f64>, SolveError> {
    trajectory_rmse_with(out, &ds.model, &ds.truth, &ds.truth.times, f64::exp)
}

/// Observation times of the FitzHugh-Nagumo benchmark: every 0.5 up to 10,
/// then sparser up to 20.
pub fn fn_times() -> Vec<f64> {
    let mut t: Vec<f64> = (0..=20).map(|i| i as f64 * 0.5).collect();
    t.extend([11.0, 12.0, 13.0, 14.0, 15.0, 17.0, 20.0]);
    t
}

/// FitzHugh-Nagumo with both components observed under N(0, 0.2²) noise.
/// The truth is the noiseless trajectory at the observation times.
pub fn fn_dataset(seed: u64) -> BenchDataset {
    let model = builtin_model("fn").unwrap();
    let times = fn_times();
    let truth = truth_at(&model, &FN_X0, &FN_THETA, &times);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, FN_SIGMA).unwrap();
    let values = truth.values.map(|v| v + noise.sample(&mut rng));
    let data = ObservationSet::new(times, values, names(&model)).unwrap();
    BenchDataset { data, truth, model }
}

/// Observations of a dataset as a trajectory, for RMSD against the data.
pub fn observed_trajectory(data: &ObservationSet) -> Trajectory {
    let rows: Vec<usize> = (0..data.grid.len()).filter(|i| data.mask.row(*i).iter().all(|m| *m)).collect();
    Trajectory {
        times: rows.iter().map(|i| data.grid[*i]).collect(),
        values: data.values.select_rows(&rows),
    }
}

/// Control for FitzHugh-Nagumo on discretization level `level` of the
/// 0.5-spaced grid: σ unknown, 10000 iterations, and 1000 leapfrog steps on
/// the densest level.
pub fn fn_control(level: u32, seed: u64) -> SolveControl {
    SolveControl {
        n_iter: 10000,
        n_leapfrog: if level >= 3 { 1000 } else { 200 },
        seed,
        ..SolveControl::default()
    }
}

/// Fits FitzHugh-Nagumo on the grids I0 (every 0.5) to I3 (every 0.0625)
/// and returns the RMSD between the reconstructed trajectory and the noisy
/// observations for each level.
pub fn fn_stability(seed: u64) -> Result<Vec<[f64; 2]>, SolveError> {
    let ds = fn_dataset(seed);
    let i0 = set_discretization_by(&ds.data, 0.5)?;
    let obs = observed_trajectory(&ds.data);
    (0..=3)
        .map(|level| {
            let data = set_discretization_level(&i0, level);
            let out = magi_solve(&data, &ds.model, &fn_control(level, seed))?;
            let r = trajectory_rmse(&out, &ds.model, &obs, &obs.times)?;
            Ok([r[0], r[1]])
        })
        .collect()
}

/// HIV model with time-dependent infection rate, observed every 0.2 days
/// over 20 days with noise SDs (√10, √10, 10).
pub fn hiv_dataset(seed: u64) -> BenchDataset {
    let model = builtin_model("hiv-td").unwrap();
    let times: Vec<f64> = (0..=100).map(|i| i as f64 * 0.2).collect();
    let truth = truth_at(&model, &HIV_X0, &HIV_THETA, &times);
    let sd = [10f64.sqrt(), 10f64.sqrt(), 10.0];
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut values = truth.values.clone();
    for j in 0..3 {
        let noise = Normal::new(0.0, sd[j]).unwrap();
        for i in 0..times.len() {
            values[(i, j)] += noise.sample(&mut rng);
        }
    }
    let data = ObservationSet::new(times, values, names(&model)).unwrap();
    BenchDataset { data, truth, model }
}

/// Control for the HIV benchmark: smoothing estimates for the T cells, the
/// manual φ and σ start for V. σ is sampled.
pub fn hiv_control(data: &ObservationSet, seed: u64) -> Result<SolveControl, SolveError> {
    let mut phi = DMatrix::zeros(2, 3);
    let mut sigma = vec![0.0; 3];
    for j in 0..2 {
        let (t, y) = data.component(j);
        let fit = crate::gpfit::gp_smooth(&y, &t, KernelKind::GeneralMatern, None)?;
        phi[(0, j)] = fit.phi[0];
        phi[(1, j)] = fit.phi[1];
        sigma[j] = fit.sigma;
    }
    phi[(0, 2)] = HIV_PHI_V[0];
    phi[(1, 2)] = HIV_PHI_V[1];
    sigma[2] = HIV_SIGMA_V_INIT;
    Ok(SolveControl {
        phi: Some(phi),
        sigma: Some(sigma),
        seed,
        ..SolveControl::default()
    })
}

/// Fits one HIV dataset on the level-1 grid with the benchmark control.
pub fn hiv_replicate(seed: u64) -> Result<McmcOutput, SolveError> {
    let ds = hiv_dataset(seed);
    let control = hiv_control(&ds.data, seed)?;
    magi_solve(&set_discretization_level(&ds.data, 1), &ds.model, &control)
}

/// Number of worker threads: `MAGI_THREADS` if set, otherwise the available
/// parallelism.
pub fn worker_count() -> usize {
    std::env::var("MAGI_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|n: &usize| *n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `job` for every seed on up to `threads` workers; results keep the
/// order of `seeds`.
pub fn run_replicates<T, F>(seeds: &[u64], threads: usize, job: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync,
{
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<T>>> = seeds.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, seeds.len().max(1)) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if k >= seeds.len() {
                    break;
                }
                let r = job(seeds[k]);
                *slots[k].lock().unwrap() = Some(r);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().unwrap().unwrap()).collect()
}

/// Fits one Hes1 replicate and returns its RMSE per component.
pub fn hes1_replicate(seed: u64, tweak: impl Fn(&mut SolveControl)) -> Result<(McmcOutput, Vec<f64>), SolveError> {
    let ds = hes1_dataset(seed);
    let mut control = hes1_control(seed);
    tweak(&mut control);
    let out = magi_solve(&ds.data, &ds.model, &control)?;
    let rmse = hes1_rmse(&out, &ds)?;
    Ok((out, rmse))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hes1_layout() {
        let ds = hes1_dataset(1);
        let counts: Vec<usize> = (0..3).map(|j| ds.data.mask.column(j).iter().filter(|m| **m).count()).collect();
        assert_eq!(counts, vec![17, 16, 0]);
        assert_eq!(ds.truth.times.len(), 33);
    }

    #[test]
    fn fn_layout() {
        let ds = fn_dataset(1);
        assert_eq!(ds.data.grid.len(), 28);
        assert_eq!(observed_trajectory(&ds.data).times.len(), 28);
    }

    #[test]
    fn replicates_keep_order() {
        let r = run_replicates(&[5, 3, 9, 1], 3, |s| s * 2);
        assert_eq!(r, vec![10, 6, 18, 2]);
    }
}
