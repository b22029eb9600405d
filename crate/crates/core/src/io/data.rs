use std::path::Path;

use nalgebra::DMatrix;

use super::IoError;
use crate::pipeline::{ObservationSet, TIME_EPS};

/// Shortest decimal form that parses back to the same `f64`; `NaN` for
/// missing values.
pub fn format_number(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v:?}")
    }
}

fn parse_cell(s: &str) -> Option<f64> {
    if s.eq_ignore_ascii_case("nan") {
        return Some(f64::NAN);
    }
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>, IoError> {
    let file = std::fs::File::open(path).map_err(|e| IoError::file(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

/// Reads a header row and a numeric body. Cells may be `NaN`.
pub fn read_matrix_csv(path: &Path) -> Result<(Vec<String>, DMatrix<f64>), IoError> {
    let mut rdr = reader(path)?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| IoError::csv(path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut cells = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| IoError::csv(path, e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        for (j, cell) in rec.iter().enumerate() {
            let v = parse_cell(cell).ok_or_else(|| {
                IoError::csv(path, format!("line {line}, column `{}`: `{cell}` is not a number", header[j]))
            })?;
            cells.push(v);
        }
        rows += 1;
    }
    Ok((header.clone(), DMatrix::from_row_slice(rows, header.len(), &cells)))
}

pub fn write_matrix_csv(path: &Path, header: &[String], values: &DMatrix<f64>) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| IoError::csv(path, e.to_string()))?;
    let err = |e: csv::Error| IoError::csv(path, e.to_string());
    w.write_record(header).map_err(err)?;
    for i in 0..values.nrows() {
        w.write_record(values.row(i).iter().map(|v| format_number(*v))).map_err(err)?;
    }
    w.flush().map_err(|e| IoError::file(path, e))
}

/// Reads observations: a `time` column followed by one column per
/// component, `NaN` where a component is not observed.
pub fn read_observations(path: &Path) -> Result<ObservationSet, IoError> {
    let (header, m) = read_matrix_csv(path)?;
    if header.first().map(String::as_str) != Some("time") {
        return Err(IoError::csv(path, "the first column must be named `time`"));
    }
    if header.len() < 2 {
        return Err(IoError::csv(path, "no component columns"));
    }
    if m.nrows() == 0 {
        return Err(IoError::csv(path, "no data rows"));
    }
    let grid: Vec<f64> = m.column(0).iter().cloned().collect();
    if let Some(i) = grid.iter().position(|t| t.is_nan()) {
        return Err(IoError::csv(path, format!("time is missing in data row {}", i + 1)));
    }
    if let Some(i) = (1..grid.len()).find(|i| grid[*i] - grid[i - 1] <= TIME_EPS) {
        return Err(IoError::csv(
            path,
            format!("times must be strictly increasing (row {}: {} after {})", i + 1, grid[i], grid[i - 1]),
        ));
    }
    let values = m.columns(1, m.ncols() - 1).into_owned();
    ObservationSet::new(grid, values, header[1..].to_vec()).map_err(|e| IoError::csv(path, e.to_string()))
}

pub fn write_observations(data: &ObservationSet, path: &Path) -> Result<(), IoError> {
    let mut header = vec!["time".to_string()];
    header.extend(data.component_names.iter().cloned());
    let n = data.grid.len();
    let m = DMatrix::from_fn(n, header.len(), |i, j| if j == 0 { data.grid[i] } else { data.values[(i, j - 1)] });
    write_matrix_csv(path, &header, &m)
}
