//! File formats: matrix, curve, edge-list and result CSVs, and the
//! provenance header every output carries. See FORMATS.md.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::{PerformanceReport, Summary};
use crate::graph::{AdjacencyMatrix, BinaryGraph, FeatureCurve};
use crate::models::{ModelFit, StandardizedWeight};
use crate::plasmode::ScenarioResult;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Hex SHA-256 of a canonical config, truncated to 16 characters.
pub fn config_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().take(8).fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Tool version, seed and config hash stamped on every output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub seed: Option<u64>,
    pub config: String,
}

impl Provenance {
    pub fn new(seed: Option<u64>, config: &[u8]) -> Self {
        Self {
            tool: "threshflex",
            version: VERSION,
            seed,
            config: config_hash(config),
        }
    }

    /// Provenance for a serializable config.
    pub fn of<T: Serialize>(seed: Option<u64>, config: &T) -> Result<Self> {
        Ok(Self::new(seed, &serde_json::to_vec(config)?))
    }

    pub fn header_line(&self) -> String {
        let seed = self.seed.map_or_else(|| "none".to_string(), |s| s.to_string());
        format!(
            "# {} {} seed={} config={}\n",
            self.tool, self.version, seed, self.config
        )
    }
}

/// Seventeen significant digits; parses back to the same bits.
pub fn fmt_exact(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Write a serializable value as pretty JSON with a `_meta` provenance field.
pub fn write_json<T: Serialize>(path: &Path, value: &T, prov: &Provenance) -> Result<()> {
    let mut v = serde_json::to_value(value)?;
    match &mut v {
        serde_json::Value::Object(map) => {
            map.insert("_meta".into(), serde_json::to_value(prov)?);
        }
        other => {
            let inner = std::mem::take(other);
            *other = serde_json::json!({ "_meta": prov, "data": inner });
        }
    }
    write_text(path, &(serde_json::to_string_pretty(&v)? + "\n"))
}

/// CSV reader that ignores `#` comment lines.
pub(crate) fn csv_reader(text: &str, has_headers: bool) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(has_headers)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes())
}

pub fn parse_f64(field: &str) -> Option<f64> {
    match field {
        "" | "NA" | "na" | "NaN" | "nan" => None,
        s => s.parse().ok(),
    }
}

pub fn matrix_to_csv(m: &DMatrix<f64>, prov: &Provenance) -> String {
    let mut out = prov.header_line();
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| fmt_exact(m[(r, c)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Square matrix, one row per line, no header row.
pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>, prov: &Provenance) -> Result<()> {
    write_text(path, &matrix_to_csv(m, prov))
}

pub fn parse_matrix_csv(text: &str, path: &Path) -> Result<DMatrix<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in csv_reader(text, false).records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(path, e.to_string()))?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(j, f)| {
                f.parse::<f64>().map_err(|_| {
                    Error::parse(path, format!("row {}, column {}: '{f}' is not a number", i + 1, j + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let p = rows.len();
    if p == 0 {
        return Err(Error::parse(path, "empty matrix"));
    }
    if let Some(bad) = rows.iter().position(|r| r.len() != p) {
        return Err(Error::parse(
            path,
            format!("row {} has {} entries; expected {p}", bad + 1, rows[bad].len()),
        ));
    }
    Ok(DMatrix::from_fn(p, p, |r, c| rows[r][c]))
}

pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    parse_matrix_csv(&read_text(path)?, path)
}

/// `source,target,weight` for each edge of `graph` (0-based node indices).
pub fn write_edge_list(
    path: &Path,
    graph: &BinaryGraph,
    adj: &AdjacencyMatrix,
    prov: &Provenance,
) -> Result<()> {
    let mut out = prov.header_line();
    out.push_str("source,target,weight\n");
    for (r, s) in graph.edges() {
        let _ = writeln!(out, "{r},{s},{}", fmt_exact(adj.weight(r, s)));
    }
    write_text(path, &out)
}

/// `threshold,value` rows of one curve.
pub fn curve_to_csv(curve: &FeatureCurve, prov: &Provenance) -> String {
    let mut out = prov.header_line();
    let _ = writeln!(out, "threshold,{}", curve.feature);
    for (t, v) in curve.grid.values().iter().zip(&curve.values) {
        let _ = writeln!(out, "{t},{v}");
    }
    out
}

/// Weight function of a fit on its grid with the pointwise band.
pub fn weight_function_csv(fit: &ModelFit, prov: &Provenance) -> String {
    let mut out = prov.header_line();
    out.push_str("threshold,weight,lower95,upper95\n");
    let grid = &fit.grid;
    match &fit.weight_function {
        Some(wf) => {
            for (j, t) in grid.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{t},{},{},{}",
                    wf.estimate[j], wf.lower95[j], wf.upper95[j]
                );
            }
        }
        None => {
            let scale = fit.feature_effect.unwrap_or(0.0);
            for (t, w) in grid.iter().zip(&fit.grid_weights) {
                let _ = writeln!(out, "{t},{},NA,NA", w * scale);
            }
        }
    }
    out
}

pub fn standardized_csv(sw: &StandardizedWeight, prov: &Provenance) -> String {
    let mut out = prov.header_line();
    out.push_str("threshold,estimate,lower95,upper95,feature_sd,zero_sd\n");
    for j in 0..sw.grid.len() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            sw.grid[j], sw.estimate[j], sw.lower95[j], sw.upper95[j], sw.sd[j], sw.zero_sd[j]
        );
    }
    out
}

pub fn performance_csv(reports: &[PerformanceReport], prov: &Provenance) -> String {
    let mut out = prov.header_line();
    out.push_str("method,repeat,rmspe,r2,calibration_slope,n_eval,failed_folds\n");
    for rep in reports {
        for (r, m) in rep.per_repeat.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{r},{},{},{},{},{}",
                rep.method,
                m.rmspe,
                fmt_opt(m.r2),
                fmt_opt(m.calibration_slope),
                m.n_eval,
                m.failed_folds
            );
        }
        let _ = writeln!(
            out,
            "{},mean,{},{},{},{},{}",
            rep.method,
            rep.rmspe,
            fmt_opt(rep.r2),
            fmt_opt(rep.calibration_slope),
            rep.n_eval,
            rep.failed_folds
        );
    }
    out
}

/// Long-format per-replicate results: `scenario,replicate,method,measure,value`.
pub fn results_csv(result: &ScenarioResult, prov: &Provenance) -> String {
    let mut out = prov.header_line();
    out.push_str("scenario,replicate,method,measure,value\n");
    let id = &result.config.id;
    for rep in &result.replicates {
        for m in &rep.methods {
            let rows = [
                ("rmspe", m.rmspe),
                ("relative_rmspe", m.relative_rmspe),
                ("r2", m.r2),
                ("calibration_slope", m.calibration_slope),
                ("selected_threshold", m.selected_threshold),
                ("lambda", m.lambda),
                ("failed_folds", Some(m.failed_folds as f64)),
            ];
            for (name, v) in rows {
                let _ = writeln!(out, "{id},{},{},{name},{}", rep.replicate, m.method, fmt_opt(v));
            }
        }
    }
    out
}

/// Aggregates: `scenario,method,measure,n,mean,p025,p975,mc_se`.
pub fn summary_csv(result: &ScenarioResult, prov: &Provenance) -> String {
    let mut out = prov.header_line();
    out.push_str("scenario,method,measure,n,mean,p025,p975,mc_se\n");
    let id = &result.config.id;
    for a in &result.aggregates {
        let rows: [(&str, &Option<Summary>); 5] = [
            ("rmspe", &a.rmspe),
            ("relative_rmspe", &a.relative_rmspe),
            ("r2", &a.r2),
            ("calibration_slope", &a.calibration_slope),
            ("selected_threshold", &a.selected_threshold),
        ];
        for (name, s) in rows {
            if let Some(s) = s {
                let _ = writeln!(
                    out,
                    "{id},{},{name},{},{},{},{},{}",
                    a.method,
                    s.n,
                    s.mean,
                    s.p025,
                    s.p975,
                    fmt_opt(s.mc_se)
                );
            }
        }
    }
    out
}

/// Mean estimated weight functions: `scenario,method,threshold,mean_weight`.
pub fn mean_weights_csv(result: &ScenarioResult, prov: &Provenance) -> String {
    let mut out = prov.header_line();
    out.push_str("scenario,method,threshold,mean_weight\n");
    for a in &result.aggregates {
        if let Some(w) = &a.mean_weight {
            for (t, v) in result.grid.iter().zip(w) {
                let _ = writeln!(out, "{},{},{t},{v}", result.config.id, a.method);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_format_round_trips() {
        for v in [0.1, 1.0 / 3.0, -0.7071067811865476, 1e-300, 0.0, 1.0] {
            assert_eq!(fmt_exact(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }

    #[test]
    fn matrix_round_trip() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 0.1, -0.3, 0.1, 1.0, 2.0 / 3.0, -0.3, 2.0 / 3.0, 1.0]);
        let prov = Provenance::new(Some(3), b"{}");
        let text = matrix_to_csv(&m, &prov);
        assert!(text.starts_with("# threshflex "));
        let back = parse_matrix_csv(&text, Path::new("m.csv")).unwrap();
        assert_eq!(back, m);
        assert_eq!(matrix_to_csv(&back, &prov), text);
    }

    #[test]
    fn matrix_parse_errors() {
        let p = Path::new("x.csv");
        assert!(parse_matrix_csv("1,2\n3\n", p).is_err());
        assert!(parse_matrix_csv("1,a\n3,4\n", p).is_err());
        assert!(parse_matrix_csv("# only\n", p).is_err());
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(config_hash(b"abc"), "ba7816bf8f01cfea");
        assert_ne!(config_hash(b"abc"), config_hash(b"abd"));
    }
}
