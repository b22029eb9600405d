use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, Uniform};

use magi::gpfit::{gp_cond_cov, gp_cond_mean, gp_smooth};
use magi::io::{
    format_summary, parse_config, read_observations, summary_from_dir, write_matrix_csv, write_observations,
    write_results, IoError,
};
use magi::kernels::{KernelKind, KernelSpec};
use magi::ode::{builtin_model, check_gradients, integrate, parse_ode_dsl, OdeSystem};
use magi::pipeline::bench::{self, worker_count};
use magi::pipeline::{
    default_theta, magi_solve, set_discretization_by, set_discretization_level, summarize, ObservationSet,
    SolveError,
};

#[derive(Parser)]
#[command(name = "magi", version, about = "Bayesian inference for ODE systems with manifold-constrained Gaussian processes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ModelArgs {
    /// Built-in model: hes1, hes1-log, fn or hiv-td.
    #[arg(long, conflicts_with = "dsl")]
    model: Option<String>,
    /// File with a model written in the equation language.
    #[arg(long)]
    dsl: Option<PathBuf>,
}

impl ModelArgs {
    fn load(&self) -> Result<OdeSystem> {
        match (&self.model, &self.dsl) {
            (Some(name), _) => Ok(builtin_model(name)?),
            (None, Some(path)) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                Ok(parse_ode_dsl(&text).map_err(|e| IoError::Model(format!("{}: {e}", path.display())))?)
            }
            (None, None) => Err(IoError::Model("give --model or --dsl".into()).into()),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Noise {
    Additive,
    Lognormal,
}

#[derive(Clone, Copy, ValueEnum)]
enum Benchmark {
    Hes1,
    Fn,
    Hiv,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate a model and add observation noise.
    Simulate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        theta: Vec<f64>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x0: Vec<f64>,
        /// `start:stop:step` or a comma-separated list.
        #[arg(long)]
        times: String,
        /// Noise SD per component (one value applies to all).
        #[arg(long, value_delimiter = ',', default_value = "0")]
        sigma: Vec<f64>,
        #[arg(long, value_enum, default_value = "additive")]
        noise: Noise,
        /// Components to leave unobserved.
        #[arg(long, value_delimiter = ',')]
        hide: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Run the solver as described by a configuration file.
    Fit {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `output_dir`.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Compare a model's Jacobians with finite differences.
    Gradcheck {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        theta: Option<Vec<f64>>,
        /// Number of random test states.
        #[arg(long, default_value_t = 20)]
        points: usize,
        /// Test states are drawn uniformly from this range.
        #[arg(long, num_args = 2, default_values_t = [0.5, 2.0], allow_hyphen_values = true)]
        range: Vec<f64>,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Add discretization points to a dataset.
    Discretize {
        input: PathBuf,
        #[arg(long, conflicts_with = "by", required_unless_present = "by")]
        level: Option<u32>,
        #[arg(long)]
        by: Option<f64>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Fit a GP to each observed component and report φ and σ.
    Gpfit {
        input: PathBuf,
        #[arg(long, default_value = "generalMatern")]
        kernel: String,
        /// Known noise SD per component; NaN to estimate.
        #[arg(long, value_delimiter = ',')]
        sigma: Option<Vec<f64>>,
        /// Override φ for one component: `NAME=phi1,phi2`. Repeatable.
        #[arg(long = "phi")]
        phi: Vec<String>,
        /// Directory for the conditioned mean and 95% band of each component.
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Number of output points for the conditioned curves.
        #[arg(long, default_value_t = 201)]
        points: usize,
    },
    /// Print the posterior summary of a results directory.
    Summary {
        dir: PathBuf,
        #[arg(long, default_value_t = 0.025)]
        lower: f64,
        #[arg(long, default_value_t = 0.975)]
        upper: f64,
    },
    /// Run one of the simulated benchmarks.
    Bench {
        #[arg(value_enum)]
        which: Benchmark,
        /// Seeds of the replicate datasets, e.g. `1..20` or `3,5`.
        #[arg(long, default_value = "1")]
        seeds: String,
        /// Worker threads; defaults to MAGI_THREADS or the core count.
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn parse_range_list(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() == 3 {
        let [a, b, h] = [parts[0], parts[1], parts[2]].map(|p| p.trim().parse::<f64>());
        let (a, b, h) = (a?, b?, h?);
        if !(h > 0.0) || b < a {
            bail!("bad time range `{s}`");
        }
        let n = ((b - a) / h + 1e-9).floor() as usize;
        return Ok((0..=n).map(|i| a + i as f64 * h).collect());
    }
    s.split(',').map(|p| Ok(p.trim().parse::<f64>()?)).collect()
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
        if b < a {
            bail!("empty seed range `{s}`");
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|p| Ok(p.trim().parse::<u64>()?)).collect()
}

fn per_component(v: &[f64], d: usize, what: &str) -> Result<Vec<f64>> {
    match v.len() {
        1 => Ok(vec![v[0]; d]),
        n if n == d => Ok(v.to_vec()),
        n => bail!("{what} has {n} values, the model has {d} components"),
    }
}

fn simulate(
    model: &OdeSystem,
    theta: &[f64],
    x0: &[f64],
    times: &[f64],
    sigma: &[f64],
    noise: Noise,
    hide: &[String],
    seed: u64,
) -> Result<ObservationSet> {
    let d = model.dim_x();
    let sigma = per_component(sigma, d, "--sigma")?;
    let names = model.component_names().to_vec();
    for h in hide {
        if !names.contains(h) {
            bail!("unknown component `{h}`; components are {}", names.join(", "));
        }
    }
    let truth = integrate(model, x0, theta, times, magi::ode::default_dt_max(times))?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut values = truth.values.clone();
    for j in 0..d {
        let dist = Normal::new(0.0, sigma[j]).map_err(|e| anyhow!("--sigma: {e}"))?;
        for i in 0..times.len() {
            let e = dist.sample(&mut rng);
            values[(i, j)] = match noise {
                Noise::Additive => values[(i, j)] + e,
                Noise::Lognormal => values[(i, j)] * e.exp(),
            };
        }
        if hide.contains(&names[j]) {
            values.column_mut(j).fill(f64::NAN);
        }
    }
    Ok(ObservationSet::new(times.to_vec(), values, names)?)
}

fn gpfit(
    input: &Path,
    kernel: &str,
    sigma: Option<Vec<f64>>,
    phi_overrides: &[String],
    output: Option<&Path>,
    points: usize,
) -> Result<()> {
    let data = read_observations(input)?;
    let kind: KernelKind = kernel.parse()?;
    let d = data.n_components();
    let sigma = match sigma {
        Some(s) => per_component(&s, d, "--sigma")?,
        None => vec![f64::NAN; d],
    };
    let mut overrides: Vec<Option<Vec<f64>>> = vec![None; d];
    for o in phi_overrides {
        let (name, vals) = o.split_once('=').ok_or_else(|| anyhow!("--phi expects NAME=phi1,phi2"))?;
        let j = data
            .component_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| anyhow!("unknown component `{name}`"))?;
        overrides[j] = Some(vals.split(',').map(|v| Ok(v.trim().parse::<f64>()?)).collect::<Result<_>>()?);
    }
    if let Some(dir) = output {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    println!("component  phi  sigma");
    for j in 0..d {
        let (t, y) = data.component(j);
        if t.is_empty() {
            println!("{}  (unobserved)", data.component_names[j]);
            continue;
        }
        let known = sigma[j].is_finite().then_some(sigma[j]);
        let fit = gp_smooth(&y, &t, kind, known)?;
        let phi = overrides[j].clone().unwrap_or(fit.phi.clone());
        println!("{}  {:?}  {}", data.component_names[j], phi, fit.sigma);
        if let Some(dir) = output {
            let spec = KernelSpec::new(kind, phi)?;
            let (a, b) = (data.grid[0], data.grid[data.grid.len() - 1]);
            let tout: Vec<f64> = (0..points).map(|i| a + (b - a) * i as f64 / (points.max(2) - 1) as f64).collect();
            let mean = gp_cond_mean(&y, &t, &tout, &spec, fit.sigma)?;
            let cov = gp_cond_cov(&y, &t, &tout, &spec, fit.sigma)?;
            let m = DMatrix::from_fn(points, 4, |i, c| {
                let sd = cov[(i, i)].max(0.0).sqrt();
                [tout[i], mean[i], mean[i] - 1.96 * sd, mean[i] + 1.96 * sd][c]
            });
            let header = ["time", "mean", "lo", "hi"].map(String::from);
            write_matrix_csv(&dir.join(format!("gp_{}.csv", data.component_names[j])), &header, &m)?;
        }
    }
    Ok(())
}

fn run_bench(which: Benchmark, seeds: &[u64], threads: usize) -> Result<()> {
    match which {
        Benchmark::Hes1 => {
            let res = bench::run_replicates(seeds, threads, |s| bench::hes1_replicate(s, |_| {}));
            let mut total = [0.0; 3];
            for (s, r) in seeds.iter().zip(&res) {
                let (out, rmse) = r.as_ref().map_err(|e| anyhow!("seed {s}: {e}"))?;
                let m = out.theta_mean();
                println!("seed {s}: RMSE P {:.3} M {:.3} H {:.3}; theta mean {:.4?}", rmse[0], rmse[1], rmse[2], m);
                for k in 0..3 {
                    total[k] += rmse[k] / seeds.len() as f64;
                }
            }
            println!("average RMSE: P {:.3} M {:.3} H {:.3}", total[0], total[1], total[2]);
        }
        Benchmark::Fn => {
            for s in seeds {
                let rmsd = bench::fn_stability(*s)?;
                for (level, r) in rmsd.iter().enumerate() {
                    println!("seed {s} I{level}: RMSD V {:.3} R {:.3}", r[0], r[1]);
                }
            }
        }
        Benchmark::Hiv => {
            let res = bench::run_replicates(seeds, threads, bench::hiv_replicate);
            for (s, r) in seeds.iter().zip(res) {
                let out = r.map_err(|e| anyhow!("seed {s}: {e}"))?;
                println!("seed {s}");
                print!("{}", format_summary(&summarize(&out, 0.025, 0.975, true)));
            }
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            model,
            theta,
            x0,
            times,
            sigma,
            noise,
            hide,
            seed,
            output,
        } => {
            let m = model.load()?;
            let times = parse_range_list(&times)?;
            let data = simulate(&m, &theta, &x0, &times, &sigma, noise, &hide, seed)?;
            write_observations(&data, &output)?;
        }
        Command::Fit { config, seed, output } => {
            let mut cfg = parse_config(&config)?;
            if let Some(s) = seed {
                cfg.control.seed = s;
            }
            if let Some(o) = output {
                cfg.output_dir = o;
            }
            let model = cfg.load_model()?;
            let data = cfg.load_data()?;
            let start = Instant::now();
            let out = magi_solve(&data, &model, &cfg.control)?;
            write_results(&out, &cfg.output_dir, cfg.control.seed, Some(&cfg.source), start.elapsed())?;
            print!("{}", format_summary(&summarize(&out, 0.025, 0.975, true)));
            eprintln!("results written to {}", cfg.output_dir.display());
        }
        Command::Gradcheck {
            model,
            theta,
            points,
            range,
            tol,
            seed,
        } => {
            let m = model.load()?;
            let theta = theta.unwrap_or_else(|| default_theta(&m));
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let u = Uniform::new(range[0], range[1]).map_err(|e| anyhow!("--range: {e}"))?;
            let x = DMatrix::from_fn(points, m.dim_x(), |_, _| u.sample(&mut rng));
            let times: Vec<f64> = (0..points).map(|i| i as f64).collect();
            let r = check_gradients(&m, &x, &theta, &times, tol)?;
            println!(
                "{}: max abs error dx {:.3e}, dtheta {:.3e}",
                if r.pass { "Analytic gradients appear to be correct" } else { "Analytic gradients may be incorrect" },
                r.max_abs_err_dx,
                r.max_abs_err_dtheta
            );
            if !r.pass {
                return Err(SolveError::Numerical("gradient check failed".into()).into());
            }
        }
        Command::Discretize {
            input,
            level,
            by,
            output,
        } => {
            let data = read_observations(&input)?;
            let out = match (level, by) {
                (Some(l), _) => set_discretization_level(&data, l),
                (None, Some(b)) => set_discretization_by(&data, b)?,
                (None, None) => unreachable!("clap requires one of them"),
            };
            write_observations(&out, &output)?;
        }
        Command::Gpfit {
            input,
            kernel,
            sigma,
            phi,
            output,
            points,
        } => gpfit(&input, &kernel, sigma, &phi, output.as_deref(), points)?,
        Command::Summary { dir, lower, upper } => {
            print!("{}", format_summary(&summary_from_dir(&dir, lower, upper)?));
        }
        Command::Bench { which, seeds, threads } => {
            let seeds = parse_seeds(&seeds)?;
            run_bench(which, &seeds, threads.unwrap_or_else(worker_count))?;
        }
    }
    Ok(())
}

/// 3 for numerical failures, 2 for everything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    let numerical = e.chain().any(|c| {
        if let Some(s) = c.downcast_ref::<SolveError>() {
            matches!(s, SolveError::Numerical(_))
        } else if let Some(i) = c.downcast_ref::<IoError>() {
            i.is_numerical()
        } else {
            matches!(
                c.downcast_ref::<magi::ode::OdeError>(),
                Some(magi::ode::OdeError::BlowUp { .. } | magi::ode::OdeError::NonFinite { .. })
            )
        }
    });
    if numerical {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
