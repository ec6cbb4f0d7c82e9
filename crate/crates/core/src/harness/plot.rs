use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::losses::Regime;

use super::table::{ResultRow, ResultTable};

pub const MMD_RATIO: &str = "mmd_ratio";
pub const MMD: &str = "mmd";
pub const ABS_MEAN_BIAS: &str = "abs_mean_bias";
pub const ABS_STD_BIAS: &str = "abs_std_bias";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    /// Ratio per task and regime, pooled over subsets and seeds.
    MmdRatioByTask,
    /// Ratio per regime, pooled over tasks, subsets and seeds.
    MmdRatioOverall,
    MeanBiasByParameter,
    StdBiasByParameter,
}

impl PlotKind {
    pub const ALL: [PlotKind; 4] = [
        PlotKind::MmdRatioByTask,
        PlotKind::MmdRatioOverall,
        PlotKind::MeanBiasByParameter,
        PlotKind::StdBiasByParameter,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PlotKind::MmdRatioByTask => "mmd-ratio-by-task",
            PlotKind::MmdRatioOverall => "mmd-ratio-overall",
            PlotKind::MeanBiasByParameter => "mean-bias-by-parameter",
            PlotKind::StdBiasByParameter => "std-bias-by-parameter",
        }
    }

    /// Whether the values are meant to be drawn on a log axis.
    pub fn log_scale(self) -> bool {
        matches!(self, PlotKind::MmdRatioByTask | PlotKind::MmdRatioOverall)
    }
}

impl fmt::Display for PlotKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PlotKind::ALL
            .iter()
            .copied()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = PlotKind::ALL.iter().map(|k| k.as_str()).collect();
                Error::InvalidArgument(format!(
                    "unknown plot kind `{s}`; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

/// Linear-interpolation quantile of sorted values.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Summary {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Summary {
        median: quantile(&v, 0.5),
        q25: quantile(&v, 0.25),
        q75: quantile(&v, 0.75),
        n: v.len(),
    }
}

type GroupKey = (Option<usize>, Regime, u64, usize, String);

fn group_key(r: &ResultRow, task: bool, parameter: String) -> GroupKey {
    (
        task.then_some(r.task),
        r.regime,
        r.lambda.map_or(0, f64::to_bits),
        r.buffer_size.unwrap_or(0),
        parameter,
    )
}

/// Header and data lines of one aggregated plot file.
pub fn aggregate(
    table: &ResultTable,
    kind: PlotKind,
    regimes: Option<&[Regime]>,
) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    if let Some(r) = regimes {
        if r.is_empty() {
            return Err(Error::InvalidArgument("the regime filter is empty".into()));
        }
    }
    let keep = |r: &ResultRow| regimes.is_none_or(|f| f.contains(&r.regime));
    let (prefix, by_task, by_param) = match kind {
        PlotKind::MmdRatioByTask => (MMD_RATIO, true, false),
        PlotKind::MmdRatioOverall => (MMD_RATIO, false, false),
        PlotKind::MeanBiasByParameter => (ABS_MEAN_BIAS, true, true),
        PlotKind::StdBiasByParameter => (ABS_STD_BIAS, true, true),
    };
    let mut groups: BTreeMap<GroupKey, (String, Vec<f64>)> = BTreeMap::new();
    for r in table.rows().iter().filter(|r| keep(r)) {
        let param = if by_param {
            match r
                .metric
                .strip_prefix(prefix)
                .and_then(|s| s.strip_prefix('/'))
            {
                Some(p) => p.to_string(),
                None => continue,
            }
        } else if r.metric == prefix {
            String::new()
        } else {
            continue;
        };
        groups
            .entry(group_key(r, by_task, param))
            .or_insert_with(|| (r.label(), Vec::new()))
            .1
            .push(r.value);
    }
    if groups.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no `{prefix}` rows to aggregate for {kind}"
        )));
    }
    let mut header: Vec<String> = Vec::new();
    if by_task {
        header.push("task".into());
    }
    header.push("regime".into());
    if by_param {
        header.push("parameter".into());
    }
    header.extend(["median", "q25", "q75", "n"].map(String::from));
    let lines = groups
        .into_iter()
        .map(|((task, _, _, _, param), (label, values))| {
            let s = summarize(&values);
            let mut line = Vec::new();
            if let Some(t) = task {
                line.push(t.to_string());
            }
            line.push(label);
            if by_param {
                line.push(param);
            }
            line.extend([
                format!("{:?}", s.median),
                format!("{:?}", s.q25),
                format!("{:?}", s.q75),
                s.n.to_string(),
            ]);
            line
        })
        .collect();
    Ok((header, lines))
}

#[derive(Serialize)]
struct PlotMeta<'a> {
    kind: &'a str,
    log_scale: bool,
    aggregation: &'a str,
    rows: usize,
}

/// Writes `<kind>.csv` and `<kind>.meta.json` into `dir` and returns both
/// paths. The log-scale flag is metadata only; values are never
/// transformed.
pub fn emit_plot_data(
    table: &ResultTable,
    kind: PlotKind,
    regimes: Option<&[Regime]>,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    if table.is_empty() {
        return Err(Error::InvalidArgument("the result table is empty".into()));
    }
    let (header, lines) = aggregate(table, kind, regimes)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(&header).map_err(io)?;
    for l in &lines {
        w.write_record(l).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    let csv_path = dir.join(format!("{kind}.csv"));
    let meta_path = dir.join(format!("{kind}.meta.json"));
    write_atomic(&csv_path, &bytes)?;
    let meta = PlotMeta {
        kind: kind.as_str(),
        log_scale: kind.log_scale(),
        aggregation: "median and quartiles over subsets and seeds",
        rows: lines.len(),
    };
    write_atomic(&meta_path, serde_json::to_string_pretty(&meta)?.as_bytes())?;
    Ok(vec![csv_path, meta_path])
}
