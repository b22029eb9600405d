use magi::ode::{integrate, parse_ode_dsl};
use magi::pipeline::{
    magi_solve, set_discretization_level, summarize, trajectory_rmse, McmcOutput, ObservationSet, SolveControl,
};
use nalgebra::DMatrix;

fn exp_data(n: usize) -> ObservationSet {
    let t: Vec<f64> = (0..n).map(|i| i as f64 * 2.0 / (n - 1) as f64).collect();
    let y = DMatrix::from_iterator(n, 1, t.iter().map(|s| (0.7 * s).exp()));
    ObservationSet::new(t, y, vec!["x".into()]).unwrap()
}

fn quick(seed: u64) -> SolveControl {
    SolveControl {
        n_iter: 600,
        n_leapfrog: 40,
        seed,
        ..SolveControl::default()
    }
}

#[test]
fn exponential_rate_recovered() {
    let model = parse_ode_dsl("params: k [-5, 5]\nstates: x\ndx = k*x").unwrap();
    let data = exp_data(21);
    let out = magi_solve(&data, &model, &quick(3)).unwrap();
    let k = out.theta_mean()[0];
    assert!((k - 0.7).abs() < 0.035, "k = {k}");
    assert_eq!(out.n_kept(), 300);
}

#[test]
fn fixed_seed_reproduces() {
    let model = parse_ode_dsl("params: k [-5, 5]\nstates: x\ndx = k*x").unwrap();
    let data = exp_data(11);
    let a = magi_solve(&data, &model, &quick(8)).unwrap();
    let b = magi_solve(&data, &model, &quick(8)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn fixed_sigma_stays_constant() {
    let model = parse_ode_dsl("params: k [-5, 5]\nstates: x\ndx = k*x").unwrap();
    let data = exp_data(11);
    let c = SolveControl {
        sigma: Some(vec![0.05]),
        use_fixed_sigma: true,
        ..quick(1)
    };
    let out = magi_solve(&data, &model, &c).unwrap();
    assert!(out.sigma_samples.iter().all(|s| *s == 0.05));
    assert!(!out.sigma_sampled);
}

#[test]
fn unobserved_component_and_summary() {
    let model = magi::ode::builtin_model("fn").unwrap();
    let t: Vec<f64> = (0..21).map(|i| i as f64 * 0.5).collect();
    let truth = integrate(&model, &[-1.0, 1.0], &[0.2, 0.2, 3.0], &t, 1e-3).unwrap();
    let mut y = truth.values.clone();
    y.column_mut(1).fill(f64::NAN);
    let data = ObservationSet::new(t, y, vec!["V".into(), "R".into()]).unwrap();
    let data = set_discretization_level(&data, 1);
    let c = SolveControl {
        n_iter: 200,
        n_leapfrog: 20,
        ..SolveControl::default()
    };
    let out = magi_solve(&data, &model, &c).unwrap();
    assert!(out.phi.iter().all(|v| v.is_finite() && *v > 0.0));
    assert!(out.sigma_samples.column(1).iter().all(|v| v.is_nan()));
    let s = summarize(&out, 0.025, 0.975, true);
    assert_eq!(s.names, vec!["a", "b", "c", "sigma_V"]);
    for k in 0..s.names.len() {
        assert!(s.lo[k] <= s.median[k] && s.median[k] <= s.hi[k]);
    }
}

// A hand-made output whose samples are all the same point.
fn constant_output(theta: &[f64], x0: &[f64], grid: Vec<f64>) -> McmcOutput {
    let base = magi_solve(
        &exp_data(5),
        &parse_ode_dsl("params: k [-5, 5]\nstates: x\ndx = k*x").unwrap(),
        &SolveControl {
            n_iter: 4,
            n_leapfrog: 2,
            ..SolveControl::default()
        },
    )
    .unwrap();
    let n = grid.len();
    let d = x0.len();
    let mut x = DMatrix::zeros(2, n * d);
    for j in 0..d {
        x[(0, j * n)] = x0[j];
        x[(1, j * n)] = x0[j];
    }
    McmcOutput {
        theta_samples: DMatrix::from_fn(2, theta.len(), |_, k| theta[k]),
        x_samples: x,
        sigma_samples: DMatrix::zeros(2, d),
        lp: vec![0.0, 0.0],
        grid,
        component_names: (0..d).map(|j| format!("c{j}")).collect(),
        param_names: (0..theta.len()).map(|k| format!("p{k}")).collect(),
        ..base
    }
}

#[test]
fn rmse_self_and_offset() {
    let model = magi::ode::builtin_model("fn").unwrap();
    let grid: Vec<f64> = (0..11).map(|i| i as f64).collect();
    let out = constant_output(&[0.2, 0.2, 3.0], &[-1.0, 1.0], grid.clone());
    let truth = integrate(&model, &[-1.0, 1.0], &[0.2, 0.2, 3.0], &grid, 1e-3).unwrap();
    let r = trajectory_rmse(&out, &model, &truth, &grid).unwrap();
    assert!(r.iter().all(|v| *v < 1e-8), "{r:?}");

    let mut shifted = truth.clone();
    shifted.values.column_mut(1).add_scalar_mut(0.25);
    let r = trajectory_rmse(&out, &model, &shifted, &grid[2..]).unwrap();
    assert!(r[0] < 1e-8);
    assert!((r[1] - 0.25).abs() < 1e-8);

    assert!(trajectory_rmse(&out, &model, &truth, &[0.5]).is_err());
}

#[test]
fn summary_of_constant_and_ramp() {
    let mut out = constant_output(&[4.0], &[1.0], vec![0.0, 1.0]);
    let s = summarize(&out, 0.025, 0.975, false);
    assert_eq!((s.mean[0], s.lo[0], s.hi[0]), (4.0, 4.0, 4.0));

    out.theta_samples = DMatrix::from_fn(100, 1, |i, _| (i + 1) as f64);
    out.lp = (0..100).map(|i| -((i as f64) - 40.0).abs()).collect();
    let s = summarize(&out, 0.025, 0.975, false);
    assert!((s.mean[0] - 50.5).abs() < 1e-12);
    assert!((s.lo[0] - 3.475).abs() < 1e-12);
    assert!((s.hi[0] - 97.525).abs() < 1e-12);
    assert_eq!(s.mode[0], 41.0);
}
