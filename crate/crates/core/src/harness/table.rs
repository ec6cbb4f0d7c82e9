use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::losses::Regime;

/// One long-format measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub regime: Regime,
    pub lambda: Option<f64>,
    pub buffer_size: Option<usize>,
    pub task: usize,
    pub subset: usize,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

impl ResultRow {
    /// Regime name with any swept hyperparameters, as used in plot files.
    pub fn label(&self) -> String {
        crate::harness::RunSpec {
            regime: self.regime,
            seed: self.seed,
            lambda: self.lambda,
            buffer_size: self.buffer_size,
        }
        .label()
    }

    fn sort_key(&self) -> (Regime, u64, usize, usize, usize, u64, &str) {
        (
            self.regime,
            self.lambda.map_or(0, f64::to_bits),
            self.buffer_size.unwrap_or(0),
            self.task,
            self.subset,
            self.seed,
            &self.metric,
        )
    }
}

pub const COLUMNS: [&str; 8] = [
    "regime",
    "lambda",
    "buffer_size",
    "task",
    "subset",
    "seed",
    "metric",
    "value",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultTable {
    rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: ResultRow) -> Result<()> {
        if !row.value.is_finite() {
            return Err(Error::NonFinite {
                context: format!(
                    "{} for {} task {} subset {}",
                    row.metric,
                    row.label(),
                    row.task,
                    row.subset
                ),
            });
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn extend(&mut self, other: ResultTable) {
        self.rows.extend(other.rows);
    }

    pub fn rows(&self) -> &[ResultRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Sorts rows by key and rejects duplicates.
    pub fn finalize(&mut self) -> Result<()> {
        self.rows.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        if let Some(w) = self
            .rows
            .windows(2)
            .find(|w| w[0].sort_key() == w[1].sort_key())
        {
            return Err(Error::InvalidArgument(format!(
                "duplicate result row for {} task {} subset {} seed {} metric {}",
                w[0].label(),
                w[0].task,
                w[0].subset,
                w[0].seed,
                w[0].metric
            )));
        }
        Ok(())
    }

    /// CSV text with a fixed column order; floats use the shortest text that
    /// round-trips.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(COLUMNS).map_err(csv_io)?;
        for r in &self.rows {
            w.write_record([
                r.regime.to_string(),
                r.lambda.map(|l| format!("{l:?}")).unwrap_or_default(),
                r.buffer_size.map(|k| k.to_string()).unwrap_or_default(),
                r.task.to_string(),
                r.subset.to_string(),
                r.seed.to_string(),
                r.metric.clone(),
                format!("{:?}", r.value),
            ])
            .map_err(csv_io)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv()?)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let err = |message: String| Error::Csv {
            file: path.to_path_buf(),
            message,
        };
        let mut r = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
        let header = r.headers().map_err(|e| err(e.to_string()))?.clone();
        if header.iter().ne(COLUMNS) {
            return Err(err(format!("expected columns {}", COLUMNS.join(","))));
        }
        let mut table = ResultTable::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| err(e.to_string()))?;
            let line = i + 2;
            let field = |j: usize| rec.get(j).unwrap_or("");
            let bad = |j: usize| {
                err(format!(
                    "row {line}: bad `{}` value `{}`",
                    COLUMNS[j],
                    field(j)
                ))
            };
            let opt = |j: usize| {
                if field(j).is_empty() {
                    None
                } else {
                    Some(field(j))
                }
            };
            table.push(ResultRow {
                regime: field(0).parse().map_err(|_| bad(0))?,
                lambda: opt(1).map(str::parse).transpose().map_err(|_| bad(1))?,
                buffer_size: opt(2).map(str::parse).transpose().map_err(|_| bad(2))?,
                task: field(3).parse().map_err(|_| bad(3))?,
                subset: field(4).parse().map_err(|_| bad(4))?,
                seed: field(5).parse().map_err(|_| bad(5))?,
                metric: field(6).to_string(),
                value: field(7).parse().map_err(|_| bad(7))?,
            })?;
        }
        Ok(table)
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
