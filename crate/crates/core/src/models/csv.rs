use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SimRng;
use crate::tensor::Tensor;

/// Per-column centering and scaling applied at load time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub column: String,
    pub mean: f64,
    pub sd: f64,
}

/// One task read from a CSV file, standardized column by column. Rows are
/// laid out as `[predictors.., response]`.
#[derive(Clone, Debug)]
pub struct CsvTask {
    pub path: PathBuf,
    pub columns: Vec<String>,
    pub rows: Tensor,
    pub standardization: Vec<Standardization>,
}

impl CsvTask {
    /// `n_subsets` sets of `size` rows drawn with replacement.
    pub fn subsets(&self, n_subsets: usize, size: usize, rng: &mut SimRng) -> Result<Vec<Tensor>> {
        let n = self.rows.rows();
        (0..n_subsets)
            .map(|_| {
                let idx: Vec<usize> = (0..size).map(|_| rng.random_range(0..n)).collect();
                self.rows.select_rows(&idx)
            })
            .collect()
    }
}

fn csv_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Csv {
        file: path.to_path_buf(),
        message: message.into(),
    }
}

/// Reads a headered CSV with one observation per row. `response` names the
/// response column; all other columns are predictors in file order. When
/// `expected_predictors` is given the predictor count must match.
pub fn load_csv_task(
    path: &Path,
    response: &str,
    expected_predictors: Option<usize>,
) -> Result<CsvTask> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e.to_string()))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_err(path, e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let resp_idx = header
        .iter()
        .position(|h| h == response)
        .ok_or_else(|| csv_err(path, format!("response column `{response}` not found")))?;
    let mut order: Vec<usize> = (0..header.len()).filter(|&i| i != resp_idx).collect();
    if let Some(p) = expected_predictors {
        if order.len() != p {
            return Err(csv_err(
                path,
                format!(
                    "expected {p} predictor columns besides `{response}`, found {}",
                    order.len()
                ),
            ));
        }
    }
    order.push(resp_idx);
    let columns: Vec<String> = order.iter().map(|&i| header[i].clone()).collect();

    let mut data = Vec::new();
    let mut n = 0;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_err(path, e.to_string()))?;
        for &i in &order {
            let field = record.get(i).unwrap_or("").trim();
            let v: f64 = field.parse().map_err(|_| {
                csv_err(
                    path,
                    format!(
                        "row {}: column `{}` has non-numeric value `{field}`",
                        line + 2,
                        header[i]
                    ),
                )
            })?;
            if !v.is_finite() {
                return Err(csv_err(
                    path,
                    format!("row {}: column `{}` is not finite", line + 2, header[i]),
                ));
            }
            data.push(v);
        }
        n += 1;
    }
    if n < 2 {
        return Err(csv_err(path, "need at least two data rows"));
    }
    let d = columns.len();
    let mut standardization = Vec::with_capacity(d);
    for (j, name) in columns.iter().enumerate() {
        let col = (0..n).map(|i| data[i * d + j]);
        let mean = col.clone().sum::<f64>() / n as f64;
        let var = col.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for i in 0..n {
            data[i * d + j] = (data[i * d + j] - mean) / sd;
        }
        standardization.push(Standardization {
            column: name.clone(),
            mean,
            sd,
        });
    }
    Ok(CsvTask {
        path: path.to_path_buf(),
        columns,
        rows: Tensor::matrix(n, d, data)?,
        standardization,
    })
}
