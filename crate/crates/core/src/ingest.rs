//! Time series → Spearman correlation → adjacency → feature curves.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    feature_curve, AdjacencyMatrix, FeatureCurve, FeatureKind, NegativePolicy, Strategy,
    ThresholdGrid,
};
use crate::io::{csv_reader, parse_f64, parse_matrix_csv, read_text};
use crate::models::{Dataset, SubjectRecord};

/// Signals in columns (one per node), time points in rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesTable {
    pub labels: Vec<String>,
    pub values: DMatrix<f64>,
}

impl TimeSeriesTable {
    pub fn new(labels: Vec<String>, values: DMatrix<f64>) -> Result<Self> {
        if labels.len() != values.ncols() {
            return Err(Error::InvalidInput(format!(
                "{} labels for {} columns",
                labels.len(),
                values.ncols()
            )));
        }
        if values.nrows() < 3 {
            return Err(Error::InvalidInput(format!(
                "need at least 3 time points, got {}",
                values.nrows()
            )));
        }
        if values.ncols() < 3 {
            return Err(Error::InvalidInput(format!(
                "need at least 3 nodes, got {}",
                values.ncols()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            let (r, c) = (i % values.nrows(), i / values.nrows());
            return Err(Error::NonFinite { row: r, col: c });
        }
        Ok(Self { labels, values })
    }

    /// CSV with a header row of node labels. Missing or non-numeric cells
    /// are rejected; excluding incomplete subjects is left to the caller.
    pub fn parse_csv(text: &str, path: &Path) -> Result<Self> {
        let mut rdr = csv_reader(text, true);
        let labels: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::parse(path, e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut data = Vec::new();
        let mut n = 0;
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::parse(path, e.to_string()))?;
            for (j, f) in rec.iter().enumerate() {
                let v = parse_f64(f).ok_or_else(|| {
                    Error::parse(
                        path,
                        format!("missing or non-numeric value '{f}' at row {}, column '{}'", i + 1, labels[j]),
                    )
                })?;
                data.push(v);
            }
            n += 1;
        }
        let p = labels.len();
        Self::new(labels, DMatrix::from_row_slice(n, p, &data))
            .map_err(|e| Error::parse(path, e.to_string()))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::parse_csv(&read_text(path)?, path)
    }
}

/// Ranks 1..n with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average ranks, column against column.
pub fn spearman_correlation(ts: &TimeSeriesTable) -> Result<DMatrix<f64>> {
    let (n, p) = ts.values.shape();
    let mut centered = DMatrix::zeros(n, p);
    for c in 0..p {
        let col: Vec<f64> = ts.values.column(c).iter().copied().collect();
        let ranks = average_ranks(&col);
        let mean = (n as f64 + 1.0) / 2.0;
        let ss: f64 = ranks.iter().map(|r| (r - mean).powi(2)).sum();
        if ss == 0.0 {
            return Err(Error::Domain(format!(
                "column '{}' is constant; its correlation is undefined",
                ts.labels[c]
            )));
        }
        let scale = ss.sqrt();
        for (r, v) in ranks.iter().enumerate() {
            centered[(r, c)] = (v - mean) / scale;
        }
    }
    let mut corr = centered.transpose() * &centered;
    for r in 0..p {
        corr[(r, r)] = 1.0;
        for c in (r + 1)..p {
            let v = corr[(r, c)].clamp(-1.0, 1.0);
            corr[(r, c)] = v;
            corr[(c, r)] = v;
        }
    }
    Ok(corr)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    /// Time-series CSV, correlated with Spearman's rank correlation.
    #[default]
    Timeseries,
    /// Ready-made correlation-matrix CSV.
    Correlation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSubject {
    pub id: String,
    pub path: PathBuf,
    #[serde(default)]
    pub outcome: Option<f64>,
    #[serde(default)]
    pub covariates: Vec<f64>,
}

fn default_step() -> f64 {
    0.01
}

/// Subjects and how to turn their files into curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub subjects: Vec<ManifestSubject>,
    #[serde(default = "default_step")]
    pub grid_step: f64,
    #[serde(default)]
    pub feature: FeatureKind,
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default)]
    pub negative_policy: NegativePolicy,
    #[serde(default)]
    pub input: InputKind,
}

impl DatasetManifest {
    /// Read a JSON manifest; relative subject paths resolve against the
    /// manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut m: DatasetManifest = serde_json::from_str(&read_text(path)?)
            .map_err(|e| Error::parse(path, e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for s in &mut m.subjects {
            if s.path.is_relative() {
                s.path = base.join(&s.path);
            }
        }
        Ok(m)
    }

    pub fn grid(&self) -> Result<ThresholdGrid> {
        ThresholdGrid::from_step(self.grid_step)
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects.is_empty() {
            return Err(Error::InvalidInput("manifest lists no subjects".into()));
        }
        let mut seen = HashSet::new();
        let mut problems = Vec::new();
        for s in &self.subjects {
            if !seen.insert(s.id.as_str()) {
                problems.push(format!("duplicate subject id '{}'", s.id));
            }
            if !s.path.is_file() {
                problems.push(format!("subject '{}': file {} not found", s.id, s.path.display()));
            }
        }
        self.grid()?;
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Ingest {
                count: problems.len(),
                messages: problems,
            })
        }
    }
}

/// Correlation matrix of one subject file.
pub fn load_correlation(path: &Path, input: InputKind) -> Result<DMatrix<f64>> {
    let text = read_text(path)?;
    match input {
        InputKind::Timeseries => spearman_correlation(&TimeSeriesTable::parse_csv(&text, path)?),
        InputKind::Correlation => parse_matrix_csv(&text, path),
    }
}

/// Adjacency matrix of one subject.
pub fn load_adjacency(manifest: &DatasetManifest, subject: &ManifestSubject) -> Result<AdjacencyMatrix> {
    let corr = load_correlation(&subject.path, manifest.input)?;
    AdjacencyMatrix::from_correlation(&subject.id, &corr, manifest.negative_policy)
}

/// Build the dataset, processing subjects in parallel. Every failing subject
/// is reported; any failure aborts.
pub fn ingest(manifest: &DatasetManifest) -> Result<Dataset> {
    manifest.validate()?;
    let grid = manifest.grid()?;
    let results: Vec<Result<FeatureCurve>> = manifest
        .subjects
        .par_iter()
        .map(|s| {
            let adj = load_adjacency(manifest, s)?;
            feature_curve(&adj, manifest.feature, manifest.strategy, &grid)
        })
        .collect();
    let mut records = Vec::with_capacity(results.len());
    let mut problems = Vec::new();
    for (s, res) in manifest.subjects.iter().zip(results) {
        match res {
            Ok(curve) => records.push(SubjectRecord {
                id: s.id.clone(),
                curve,
                covariates: s.covariates.clone(),
                outcome: s.outcome,
            }),
            Err(e) => problems.push(format!("subject '{}': {e}", s.id)),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Ingest {
            count: problems.len(),
            messages: problems,
        });
    }
    Dataset::new(records)
}
