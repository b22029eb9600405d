use magi::hmc::{hmc_iteration, leapfrog, run_chain, Bounds, ChainState, HmcConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn std_normal(q: &[f64], g: &mut [f64]) -> f64 {
    for (gi, qi) in g.iter_mut().zip(q) {
        *gi = -qi;
    }
    -0.5 * q.iter().map(|v| v * v).sum::<f64>()
}

fn column_moments(m: &nalgebra::DMatrix<f64>, j: usize) -> (f64, f64) {
    let n = m.nrows() as f64;
    let mean = m.column(j).sum() / n;
    let var = m.column(j).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

fn normal_cdf(x: f64) -> f64 {
    // Abramowitz–Stegun 7.1.26 is too coarse here; integrate the density.
    let n = 4000;
    let (a, b) = (-9.0f64, x.max(-9.0));
    let h = (b - a) / n as f64;
    let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = pdf(a) + pdf(b);
    for i in 1..n {
        s += pdf(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

#[test]
fn standard_normal_moments_after_tuning() {
    let cfg = HmcConfig {
        seed: 1,
        ..HmcConfig::default()
    };
    let rec = run_chain(&[1.0; 5], &cfg, &mut std_normal, &Bounds::unbounded(5)).unwrap();
    assert_eq!(rec.positions.nrows(), 10000);
    assert!(rec.accept_rate >= 0.55 && rec.accept_rate <= 0.95, "{}", rec.accept_rate);
    for j in 0..5 {
        let (mean, var) = column_moments(&rec.positions, j);
        assert!(mean.abs() < 0.05, "coordinate {j}: mean {mean}");
        assert!((0.9..=1.1).contains(&var), "coordinate {j}: variance {var}");
    }
}

#[test]
fn half_normal_never_leaves_its_support() {
    let cfg = HmcConfig {
        n_iter: 200_000,
        n_leapfrog: 10,
        step_factor: vec![0.3],
        seed: 2,
        ..HmcConfig::default()
    };
    let bounds = Bounds {
        lower: vec![0.0],
        upper: vec![f64::INFINITY],
    };
    let rec = run_chain(&[0.5], &cfg, &mut std_normal, &bounds).unwrap();
    assert_eq!(rec.positions.nrows(), 100_000);
    assert!(rec.positions.iter().all(|v| *v >= 0.0));
    // E|Z| = sqrt(2/π)
    let (mean, _) = column_moments(&rec.positions, 0);
    assert!((mean - (2.0 / std::f64::consts::PI).sqrt()).abs() < 0.02, "{mean}");
}

#[test]
fn step_sizes_follow_coordinate_scales() {
    let mut target = |q: &[f64], g: &mut [f64]| {
        g[0] = -q[0];
        g[1] = -q[1] / 100.0;
        -0.5 * (q[0] * q[0] + q[1] * q[1] / 100.0)
    };
    let cfg = HmcConfig {
        n_iter: 10000,
        n_leapfrog: 50,
        seed: 3,
        ..HmcConfig::default()
    };
    let rec = run_chain(&[0.0, 0.0], &cfg, &mut target, &Bounds::unbounded(2)).unwrap();
    let ratio = rec.final_eps[1] / rec.final_eps[0];
    assert!((5.0..=20.0).contains(&ratio), "{ratio}");
}

#[test]
fn fixed_step_chain_matches_normal_cdf() {
    let cfg = HmcConfig {
        n_iter: 100_000,
        n_leapfrog: 10,
        burnin_ratio: 0.0,
        step_factor: vec![0.2],
        seed: 4,
        verbose: false,
    };
    let rec = run_chain(&[0.0], &cfg, &mut std_normal, &Bounds::unbounded(1)).unwrap();
    let mut xs: Vec<f64> = rec.positions.iter().cloned().collect();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    // CDF on a fine table, then interpolate.
    let table: Vec<f64> = (0..=1600).map(|i| normal_cdf(-8.0 + i as f64 * 0.01)).collect();
    let cdf = |x: f64| {
        let u = ((x + 8.0) / 0.01).clamp(0.0, 1599.999);
        let i = u.floor() as usize;
        table[i] + (u - i as f64) * (table[i + 1] - table[i])
    };
    let ks = xs
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let f = cdf(*x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    assert!(ks < 0.02, "KS statistic {ks}");
}

#[test]
fn energy_error_is_second_order() {
    // Fixed trajectory length 1 so that only the step size changes.
    let energy_error = |eps: f64| {
        let (mut q, mut p, mut g) = (vec![1.0], vec![0.5], vec![-1.0]);
        let h0 = 0.5 * (1.0 + 0.25);
        let steps = (1.0 / eps).round() as usize;
        leapfrog(&mut q, &mut p, &mut g, &[eps], steps, &mut std_normal, &Bounds::unbounded(1)).unwrap();
        (0.5 * (q[0] * q[0] + p[0] * p[0]) - h0).abs()
    };
    let e1 = energy_error(0.02);
    let e2 = energy_error(0.01);
    let rate = (e1 / e2).log2();
    assert!((1.7..=2.3).contains(&rate), "{rate}");
}

#[test]
fn vanishing_step_is_always_accepted() {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let bounds = Bounds::unbounded(3);
    let mut state = ChainState::new(vec![0.4, -2.0, 1.0], &mut std_normal, &bounds).unwrap();
    for _ in 0..200 {
        assert!(hmc_iteration(&mut state, &[1e-12; 3], 10, &mut std_normal, &bounds, &mut rng));
    }
}

proptest! {
    #[test]
    fn reflection_keeps_momentum_magnitude(
        q in -3.0f64..3.0, p in -5.0f64..5.0, eps in 0.01f64..2.0, lo in -1.0f64..0.0, width in 0.1f64..2.0,
    ) {
        let bounds = Bounds { lower: vec![lo], upper: vec![lo + width] };
        let q0 = q.clamp(lo, lo + width);
        // Flat target: momentum changes only through reflections.
        let mut flat = |_: &[f64], g: &mut [f64]| { g[0] = 0.0; 0.0 };
        let (mut qq, mut pp, mut g) = (vec![q0], vec![p], vec![0.0]);
        leapfrog(&mut qq, &mut pp, &mut g, &[eps], 7, &mut flat, &bounds).unwrap();
        prop_assert_eq!(pp[0].abs(), p.abs());
        prop_assert!(qq[0] >= lo && qq[0] <= lo + width);
    }
}
