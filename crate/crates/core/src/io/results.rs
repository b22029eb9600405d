use std::path::Path;
use std::time::Duration;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{read_matrix_csv, write_matrix_csv, IoError};
use crate::pipeline::{summarize, summarize_columns, McmcOutput, SummaryTable};

pub const RESULT_FILES: [&str; 9] = [
    "theta_samples.csv",
    "sigma_samples.csv",
    "lp.csv",
    "x_mean.csv",
    "x_lo.csv",
    "x_hi.csv",
    "phi.csv",
    "summary.csv",
    "manifest.json",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub wall_time_secs: f64,
    /// Configuration text of the run, if it came from a file.
    pub config: Option<String>,
    pub n_kept: usize,
    pub grid_size: usize,
    pub sigma_sampled: bool,
    pub param_names: Vec<String>,
    pub component_names: Vec<String>,
    pub files: Vec<String>,
}

fn with_time(grid: &[f64], x: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols() + 1, |i, j| if j == 0 { grid[i] } else { x[(i, j - 1)] })
}

/// Writes samples, trajectory bands, φ, the summary table and a manifest
/// into `dir`, creating it if needed.
pub fn write_results(
    out: &McmcOutput,
    dir: &Path,
    seed: u64,
    config: Option<&str>,
    wall_time: Duration,
) -> Result<Manifest, IoError> {
    std::fs::create_dir_all(dir).map_err(|e| IoError::file(dir, e))?;
    let comps = &out.component_names;
    let mut time_header = vec!["time".to_string()];
    time_header.extend(comps.iter().cloned());

    write_matrix_csv(&dir.join(RESULT_FILES[0]), &out.param_names, &out.theta_samples)?;
    write_matrix_csv(&dir.join(RESULT_FILES[1]), comps, &out.sigma_samples)?;
    let lp = DMatrix::from_column_slice(out.lp.len(), 1, &out.lp);
    write_matrix_csv(&dir.join(RESULT_FILES[2]), &["lp".to_string()], &lp)?;
    write_matrix_csv(&dir.join(RESULT_FILES[3]), &time_header, &with_time(&out.grid, &out.x_mean()))?;
    write_matrix_csv(&dir.join(RESULT_FILES[4]), &time_header, &with_time(&out.grid, &out.x_quantile(0.025)))?;
    write_matrix_csv(&dir.join(RESULT_FILES[5]), &time_header, &with_time(&out.grid, &out.x_quantile(0.975)))?;
    write_matrix_csv(&dir.join(RESULT_FILES[6]), comps, &out.phi)?;
    write_summary_csv(&dir.join(RESULT_FILES[7]), &summarize(out, 0.025, 0.975, true))?;

    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        wall_time_secs: wall_time.as_secs_f64(),
        config: config.map(str::to_string),
        n_kept: out.n_kept(),
        grid_size: out.grid.len(),
        sigma_sampled: out.sigma_sampled,
        param_names: out.param_names.clone(),
        component_names: comps.clone(),
        files: RESULT_FILES.iter().map(|s| s.to_string()).collect(),
    };
    let path = dir.join(RESULT_FILES[8]);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| IoError::Config(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| IoError::file(&path, e))?;
    Ok(manifest)
}

fn write_summary_csv(path: &Path, s: &SummaryTable) -> Result<(), IoError> {
    let header: Vec<String> = ["parameter", "mean", "median", "mode", "lower", "upper"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut w = csv::Writer::from_path(path).map_err(|e| IoError::csv(path, e.to_string()))?;
    let err = |e: csv::Error| IoError::csv(path, e.to_string());
    w.write_record(&header).map_err(err)?;
    for k in 0..s.names.len() {
        let nums = [s.mean[k], s.median[k], s.mode[k], s.lo[k], s.hi[k]].map(super::format_number);
        w.write_record(std::iter::once(s.names[k].clone()).chain(nums)).map_err(err)?;
    }
    w.flush().map_err(|e| IoError::file(path, e))
}

/// Recomputes the summary table from the sample files in a results
/// directory.
pub fn summary_from_dir(dir: &Path, lower_q: f64, upper_q: f64) -> Result<SummaryTable, IoError> {
    let path = dir.join(RESULT_FILES[8]);
    let text = std::fs::read_to_string(&path).map_err(|e| IoError::file(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| IoError::csv(&path, e.to_string()))?;
    let (names, theta) = read_matrix_csv(&dir.join(RESULT_FILES[0]))?;
    let (comps, sigma) = read_matrix_csv(&dir.join(RESULT_FILES[1]))?;
    let (_, lp) = read_matrix_csv(&dir.join(RESULT_FILES[2]))?;
    let mut cols: Vec<(String, Vec<f64>)> = names
        .into_iter()
        .enumerate()
        .map(|(k, n)| (n, theta.column(k).iter().cloned().collect()))
        .collect();
    if manifest.sigma_sampled {
        for (j, c) in comps.iter().enumerate() {
            let v: Vec<f64> = sigma.column(j).iter().cloned().collect();
            if v.iter().all(|x| x.is_finite()) {
                cols.push((format!("sigma_{c}"), v));
            }
        }
    }
    let lp: Vec<f64> = lp.column(0).iter().cloned().collect();
    Ok(summarize_columns(cols, &lp, lower_q, upper_q))
}

fn sig4(v: f64) -> String {
    if !v.is_finite() || v == 0.0 {
        return format!("{v}");
    }
    let mag = v.abs().log10().floor() as i32;
    if !(-4..6).contains(&mag) {
        return format!("{v:.3e}");
    }
    let decimals = (3 - mag).max(0) as usize;
    format!("{v:.decimals$}")
}

/// Human-readable table rounded to four significant digits, one column per
/// parameter.
pub fn format_summary(s: &SummaryTable) -> String {
    let pct = |q: f64| format!("{}%", q * 100.0);
    let rows: [(String, &Vec<f64>); 3] = [
        ("Mean".to_string(), &s.mean),
        (pct(s.lower_q), &s.lo),
        (pct(s.upper_q), &s.hi),
    ];
    let cells: Vec<Vec<String>> = rows.iter().map(|(_, v)| v.iter().map(|x| sig4(*x)).collect()).collect();
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0);
    let widths: Vec<usize> = (0..s.names.len())
        .map(|k| cells.iter().map(|r| r[k].len()).chain([s.names[k].len()]).max().unwrap_or(0))
        .collect();
    let mut text = format!("{:label_w$}", "");
    for (k, n) in s.names.iter().enumerate() {
        text.push_str(&format!(" {:>w$}", n, w = widths[k]));
    }
    text.push('\n');
    for (r, (label, _)) in rows.iter().enumerate() {
        text.push_str(&format!("{label:label_w$}"));
        for k in 0..s.names.len() {
            text.push_str(&format!(" {:>w$}", cells[r][k], w = widths[k]));
        }
        text.push('\n');
    }
    text
}
