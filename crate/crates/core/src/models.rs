//! Outcome models over feature curves: flexible spline weighting (FLEX),
//! single optimal threshold (OPT), subset averaging (AVG) and the NULL and
//! ORACLE benchmarks.
//!
//! Every fitted model reduces to the same linear predictor
//!
//! ```text
//! ŷ = β₀ + β₁ · Σ_t w(t) x(t) + zᵀβ_z
//! ```
//!
//! where `w` is the effective weight on the threshold grid: an indicator for
//! OPT, `1/|T̃|` on the subset for AVG, the spline estimate ω̂ for FLEX (with
//! β₁ absorbed) and the supplied ω* for ORACLE.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{fold_assignment, rmspe};
use crate::graph::{FeatureCurve, FeatureKind, Strategy, ThresholdGrid};
use crate::spline::{
    default_lambda_grid, difference_penalty, ols, select_lambda_gcv, PenaltyMatrix, SplineBasis,
    SplineSpec,
};

/// One subject: its feature curve, auxiliary covariates and outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub curve: FeatureCurve,
    #[serde(default)]
    pub covariates: Vec<f64>,
    pub outcome: Option<f64>,
}

/// Subjects sharing one threshold grid and covariate dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<SubjectRecord>,
    grid: ThresholdGrid,
}

impl Dataset {
    pub fn new(records: Vec<SubjectRecord>) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::InvalidInput("dataset has no records".into()))?;
        let grid = first.curve.grid.clone();
        let k = first.covariates.len();
        let (feature, strategy) = (first.curve.feature, first.curve.strategy);
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate subject id '{}'", r.id)));
            }
            if r.curve.grid != grid {
                return Err(Error::GridMismatch(format!(
                    "subject '{}' uses a different threshold grid",
                    r.id
                )));
            }
            if r.curve.feature != feature || r.curve.strategy != strategy {
                return Err(Error::InvalidInput(format!(
                    "subject '{}' has a different feature or thresholding strategy",
                    r.id
                )));
            }
            if r.covariates.len() != k {
                return Err(Error::InvalidInput(format!(
                    "subject '{}' has {} covariates, expected {k}",
                    r.id,
                    r.covariates.len()
                )));
            }
        }
        Ok(Self { records, grid })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[SubjectRecord] {
        &self.records
    }

    pub fn grid(&self) -> &ThresholdGrid {
        &self.grid
    }

    pub fn n_covariates(&self) -> usize {
        self.records[0].covariates.len()
    }

    pub fn feature(&self) -> FeatureKind {
        self.records[0].curve.feature
    }

    pub fn strategy(&self) -> Strategy {
        self.records[0].curve.strategy
    }

    pub fn ids(&self) -> Vec<&str> {
        self.records.iter().map(|r| r.id.as_str()).collect()
    }

    pub fn outcomes(&self) -> Result<DVector<f64>> {
        let mut y = DVector::zeros(self.len());
        for (i, r) in self.records.iter().enumerate() {
            y[i] = r.outcome.ok_or_else(|| {
                Error::InvalidInput(format!("subject '{}' has no outcome", r.id))
            })?;
        }
        Ok(y)
    }

    /// Records at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        Dataset::new(indices.iter().map(|&i| self.records[i].clone()).collect())
    }

    /// Same records with outcomes replaced.
    pub fn with_outcomes(&self, y: &[f64]) -> Result<Dataset> {
        if y.len() != self.len() {
            return Err(Error::InvalidInput("outcome length mismatch".into()));
        }
        let records = self
            .records
            .iter()
            .zip(y)
            .map(|(r, &v)| SubjectRecord {
                outcome: Some(v),
                ..r.clone()
            })
            .collect();
        Ok(Dataset {
            records,
            grid: self.grid.clone(),
        })
    }

    /// `N x |T|` matrix of curve values.
    pub fn curve_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), self.grid.len(), |i, j| {
            self.records[i].curve.values[j]
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Flex,
    Opt,
    Avg,
    Null,
    Oracle,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Oracle,
        Method::Opt,
        Method::Avg,
        Method::Flex,
        Method::Null,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Flex => "flex",
            Method::Opt => "opt",
            Method::Avg => "avg",
            Method::Null => "null",
            Method::Oracle => "oracle",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "flex" => Ok(Method::Flex),
            "opt" => Ok(Method::Opt),
            "avg" => Ok(Method::Avg),
            "null" => Ok(Method::Null),
            "oracle" => Ok(Method::Oracle),
            other => Err(Error::InvalidInput(format!(
                "unknown method '{other}' (expected flex|opt|avg|null|oracle)"
            ))),
        }
    }
}

/// Default threshold subsets per method and strategy.
pub fn default_subset(method: Method, strategy: Strategy, grid: &ThresholdGrid) -> Vec<f64> {
    let (lo, hi) = match (method, strategy) {
        (Method::Opt, Strategy::Weight) => (0.0, 0.75),
        (Method::Opt, Strategy::Density) => (0.25, 1.0),
        (Method::Avg, Strategy::Weight) => (0.1, 0.4),
        (Method::Avg, Strategy::Density) => (0.6, 0.9),
        _ => (0.0, 1.0),
    };
    grid.between(lo, hi)
}

/// Spline estimate of the weight function with its pointwise 95% band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightFunction {
    pub basis: SplineSpec,
    pub zero_at_origin: bool,
    /// Basis coefficients; with `zero_at_origin` the first basis function is
    /// dropped and `gamma` has `segments + degree - 1` entries.
    pub gamma: Vec<f64>,
    pub estimate: Vec<f64>,
    pub lower95: Vec<f64>,
    pub upper95: Vec<f64>,
}

impl WeightFunction {
    /// ω̂ at any `t` in `[0, 1]`.
    pub fn eval(&self, t: f64) -> Result<f64> {
        let basis = SplineBasis::try_from(self.basis)?;
        let b = basis.evaluate(t)?;
        let skip = usize::from(self.zero_at_origin);
        Ok(b[skip..].iter().zip(&self.gamma).map(|(b, g)| b * g).sum())
    }
}

/// A fitted model of any method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFit {
    pub method: Method,
    pub feature: FeatureKind,
    pub strategy: Strategy,
    pub intercept: f64,
    /// β₁; absent for FLEX (absorbed into γ) and NULL.
    pub feature_effect: Option<f64>,
    pub covariate_effects: Vec<f64>,
    pub grid: Vec<f64>,
    /// Effective weight on each grid point (β₁ excluded).
    pub grid_weights: Vec<f64>,
    pub weight_function: Option<WeightFunction>,
    pub selected_threshold: Option<f64>,
    pub subset: Vec<f64>,
    /// Inner-CV RMSPE per subset threshold (OPT only); `None` marks skipped
    /// candidates.
    pub candidate_rmspe: Vec<Option<f64>>,
    pub lambda: Option<f64>,
    pub edf: Option<f64>,
    pub n_train: usize,
}

impl ModelFit {
    fn base(method: Method, dataset: &Dataset) -> Self {
        Self {
            method,
            feature: dataset.feature(),
            strategy: dataset.strategy(),
            intercept: 0.0,
            feature_effect: None,
            covariate_effects: vec![0.0; dataset.n_covariates()],
            grid: dataset.grid().values().to_vec(),
            grid_weights: vec![0.0; dataset.grid().len()],
            weight_function: None,
            selected_threshold: None,
            subset: Vec::new(),
            candidate_rmspe: Vec::new(),
            lambda: None,
            edf: None,
            n_train: dataset.len(),
        }
    }
}

fn weighted_sum(weights: &[f64], values: &[f64]) -> f64 {
    weights.iter().zip(values).map(|(w, x)| w * x).sum()
}

/// `[1, f, z]` design for a scalar feature per subject.
fn linear_design(dataset: &Dataset, feature: &[f64]) -> DMatrix<f64> {
    let k = dataset.n_covariates();
    DMatrix::from_fn(dataset.len(), 2 + k, |i, j| match j {
        0 => 1.0,
        1 => feature[i],
        _ => dataset.records()[i].covariates[j - 2],
    })
}

/// OLS of y on `[1, Σ_t w(t)x(t), z]`.
fn fit_weighted_feature(method: Method, dataset: &Dataset, weights: Vec<f64>) -> Result<ModelFit> {
    if weights.len() != dataset.grid().len() {
        return Err(Error::GridMismatch(format!(
            "weight vector has {} entries for a {}-point grid",
            weights.len(),
            dataset.grid().len()
        )));
    }
    let y = dataset.outcomes()?;
    let feature: Vec<f64> = dataset
        .records()
        .iter()
        .map(|r| weighted_sum(&weights, &r.curve.values))
        .collect();
    let x = linear_design(dataset, &feature);
    let fit = ols(&x, &y)?;
    let mut out = ModelFit::base(method, dataset);
    out.intercept = fit.coefficients[0];
    out.feature_effect = Some(fit.coefficients[1]);
    out.covariate_effects = fit.coefficients.iter().skip(2).copied().collect();
    out.grid_weights = weights;
    out.edf = Some(fit.edf);
    Ok(out)
}

static CONSTANT_WARNED: std::sync::Once = std::sync::Once::new();

// Constant candidates are routine (e.g. t = 0 under weight thresholding, where
// every graph is complete), so only the first one is raised to a warning;
// the fit records every skip as `None` in `candidate_rmspe`.
fn warn_constant_candidate(t: f64) {
    let mut first = false;
    CONSTANT_WARNED.call_once(|| first = true);
    if first {
        warn!("OPT: feature is constant across subjects at t = {t}; candidate skipped (further skips logged at debug level)");
    } else {
        log::debug!("OPT: feature is constant across subjects at t = {t}; skipped");
    }
}

/// Intercept-only model predicting the training mean.
pub fn fit_null(dataset: &Dataset) -> Result<ModelFit> {
    let y = dataset.outcomes()?;
    let mut out = ModelFit::base(Method::Null, dataset);
    out.intercept = y.mean();
    out.edf = Some(1.0);
    Ok(out)
}

/// OLS on the feature averaged over `subset`.
pub fn fit_avg(dataset: &Dataset, subset: &[f64]) -> Result<ModelFit> {
    if subset.is_empty() {
        return Err(Error::InvalidInput("AVG subset is empty".into()));
    }
    let idx = dataset.grid().indices_of(subset)?;
    let uniq: HashSet<usize> = idx.iter().copied().collect();
    let w = 1.0 / uniq.len() as f64;
    let mut weights = vec![0.0; dataset.grid().len()];
    for i in uniq {
        weights[i] = w;
    }
    let mut fit = fit_weighted_feature(Method::Avg, dataset, weights)?;
    fit.subset = subset.to_vec();
    Ok(fit)
}

/// OLS on `Σ_t ω*(t) x(t)` with the supplied true weights.
pub fn fit_oracle(dataset: &Dataset, true_weight: &[f64]) -> Result<ModelFit> {
    fit_weighted_feature(Method::Oracle, dataset, true_weight.to_vec())
}

/// OLS on `x(t)` at one grid point.
fn fit_at_threshold(dataset: &Dataset, j: usize) -> Result<ModelFit> {
    let mut weights = vec![0.0; dataset.grid().len()];
    weights[j] = 1.0;
    let mut fit = fit_weighted_feature(Method::Opt, dataset, weights)?;
    fit.selected_threshold = Some(dataset.grid().values()[j]);
    Ok(fit)
}

/// Pooled out-of-fold RMSPE of the OLS model on `[1, feature, z]`.
fn inner_cv_rmspe(
    dataset: &Dataset,
    y: &DVector<f64>,
    feature: &[f64],
    folds: &[usize],
    k: usize,
) -> Result<f64> {
    let x = linear_design(dataset, feature);
    let mut pred = vec![f64::NAN; dataset.len()];
    for fold in 0..k {
        let train: Vec<usize> = (0..dataset.len()).filter(|&i| folds[i] != fold).collect();
        let xt = x.select_rows(&train);
        let yt = y.select_rows(&train);
        let beta = ols(&xt, &yt)?.coefficients;
        for i in (0..dataset.len()).filter(|&i| folds[i] == fold) {
            pred[i] = x.row(i).transpose().dot(&beta);
        }
    }
    rmspe(y.as_slice(), &pred)
}

/// Choose the threshold in `subset` with the smallest inner-CV RMSPE, then
/// refit on all data. Ties go to the smaller threshold.
pub fn fit_opt(
    dataset: &Dataset,
    subset: &[f64],
    inner_folds: usize,
    seed: u64,
) -> Result<ModelFit> {
    if subset.is_empty() {
        return Err(Error::InvalidInput("OPT subset is empty".into()));
    }
    let mut candidates: Vec<(f64, usize)> = subset
        .iter()
        .map(|&t| dataset.grid().indices_of(&[t]).map(|i| (t, i[0])))
        .collect::<Result<_>>()?;
    candidates.sort_by(|a, b| a.1.cmp(&b.1));
    candidates.dedup_by_key(|c| c.1);

    if candidates.len() == 1 {
        let mut fit = fit_at_threshold(dataset, candidates[0].1)?;
        fit.subset = subset.to_vec();
        return Ok(fit);
    }
    if inner_folds < 2 || dataset.len() < inner_folds {
        return Err(Error::InvalidInput(format!(
            "OPT needs 2 <= inner folds ({inner_folds}) <= N ({})",
            dataset.len()
        )));
    }
    let folds = fold_assignment(&dataset.ids(), inner_folds, seed);
    let y = dataset.outcomes()?;
    let scores: Vec<Option<f64>> = candidates
        .par_iter()
        .map(|&(t, j)| {
            let first = dataset.records()[0].curve.values[j];
            if dataset.records().iter().all(|r| r.curve.values[j] == first) {
                warn_constant_candidate(t);
                return None;
            }
            let feature: Vec<f64> = dataset.records().iter().map(|r| r.curve.values[j]).collect();
            match inner_cv_rmspe(dataset, &y, &feature, &folds, inner_folds) {
                Ok(v) if v.is_finite() => Some(v),
                Ok(_) => None,
                Err(e) => {
                    warn!("OPT: candidate t = {t} skipped: {e}");
                    None
                }
            }
        })
        .collect();
    let mut best: Option<usize> = None;
    for (c, s) in scores.iter().enumerate() {
        if let Some(s) = s {
            if best.is_none_or(|b| *s < scores[b].unwrap()) {
                best = Some(c);
            }
        }
    }
    let best = best.ok_or_else(|| {
        Error::Domain("OPT: every candidate threshold was skipped".into())
    })?;
    let mut fit = fit_at_threshold(dataset, candidates[best].1)?;
    fit.subset = candidates.iter().map(|c| c.0).collect();
    fit.candidate_rmspe = scores;
    Ok(fit)
}

/// Basis values on the grid, without the first function when the weight is
/// pinned to zero at the origin.
fn flex_basis_on_grid(grid: &ThresholdGrid, basis: &SplineBasis, zero_at_origin: bool) -> Result<DMatrix<f64>> {
    let b = basis.design(grid.values())?;
    if zero_at_origin {
        Ok(b.columns(1, b.ncols() - 1).into_owned())
    } else {
        Ok(b)
    }
}

/// Intercept, `M` columns `Z_im = Σ_t b_m(t) x_i(t)`, then covariates.
pub fn build_flex_design(dataset: &Dataset, basis: &SplineBasis) -> Result<DMatrix<f64>> {
    build_flex_design_with(dataset, basis, false)
}

fn build_flex_design_with(
    dataset: &Dataset,
    basis: &SplineBasis,
    zero_at_origin: bool,
) -> Result<DMatrix<f64>> {
    let b = flex_basis_on_grid(dataset.grid(), basis, zero_at_origin)?;
    let z = dataset.curve_matrix() * &b;
    let m = z.ncols();
    let k = dataset.n_covariates();
    Ok(DMatrix::from_fn(dataset.len(), 1 + m + k, |i, j| {
        if j == 0 {
            1.0
        } else if j <= m {
            z[(i, j - 1)]
        } else {
            dataset.records()[i].covariates[j - 1 - m]
        }
    }))
}

/// Settings for the flexible model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlexConfig {
    pub basis: SplineSpec,
    pub penalty_order: usize,
    pub lambda_grid: Vec<f64>,
    pub zero_at_origin: bool,
}

impl Default for FlexConfig {
    fn default() -> Self {
        Self {
            basis: SplineSpec::default(),
            penalty_order: 2,
            lambda_grid: default_lambda_grid(),
            zero_at_origin: false,
        }
    }
}

/// FLEX with a [`FlexConfig`].
pub fn fit_flex_config(dataset: &Dataset, config: &FlexConfig) -> Result<ModelFit> {
    let basis = SplineBasis::try_from(config.basis)?;
    let m = basis.len() - usize::from(config.zero_at_origin);
    let penalty = if config.penalty_order == 0 {
        PenaltyMatrix::none(m)
    } else {
        difference_penalty(m, config.penalty_order)?
    };
    fit_flex_with(
        dataset,
        &basis,
        &penalty,
        &config.lambda_grid,
        config.zero_at_origin,
    )
}

/// Penalized spline weight function, λ chosen by GCV. Only the basis
/// coefficients are penalized.
pub fn fit_flex(
    dataset: &Dataset,
    basis: &SplineBasis,
    penalty: &PenaltyMatrix,
    lambda_grid: &[f64],
) -> Result<ModelFit> {
    fit_flex_with(dataset, basis, penalty, lambda_grid, false)
}

pub fn fit_flex_with(
    dataset: &Dataset,
    basis: &SplineBasis,
    penalty: &PenaltyMatrix,
    lambda_grid: &[f64],
    zero_at_origin: bool,
) -> Result<ModelFit> {
    let n = dataset.len();
    if n < 3 {
        return Err(Error::InvalidInput(format!("FLEX needs at least 3 subjects, got {n}")));
    }
    let m = basis.len() - usize::from(zero_at_origin);
    if penalty.dim() != m {
        return Err(Error::InvalidInput(format!(
            "penalty is {0}x{0} but the basis has {m} functions",
            penalty.dim()
        )));
    }
    if 2 * n < m {
        warn!("FLEX: {n} subjects for {m} basis functions; the fit leans on the penalty");
    }
    let y = dataset.outcomes()?;
    let x = build_flex_design_with(dataset, basis, zero_at_origin)?;
    let q = x.ncols();
    let lifted = penalty.lift(q, 1)?;
    let sel = select_lambda_gcv(&x, &y, &lifted, lambda_grid)?;
    let fit = sel.fit;
    if fit.edf >= n as f64 {
        return Err(Error::Domain(format!(
            "FLEX: effective degrees of freedom {:.2} not below N = {n}",
            fit.edf
        )));
    }

    let b = flex_basis_on_grid(dataset.grid(), basis, zero_at_origin)?;
    let gamma = fit.coefficients.rows(1, m).into_owned();
    let v_gamma = fit.covariance.view((1, 1), (m, m)).into_owned();
    let estimate = &b * &gamma;
    let mut lower = Vec::with_capacity(b.nrows());
    let mut upper = Vec::with_capacity(b.nrows());
    for j in 0..b.nrows() {
        let row = b.row(j).transpose();
        let se = row.dot(&(&v_gamma * &row)).max(0.0).sqrt();
        lower.push(estimate[j] - 1.96 * se);
        upper.push(estimate[j] + 1.96 * se);
    }

    let mut out = ModelFit::base(Method::Flex, dataset);
    out.intercept = fit.coefficients[0];
    out.covariate_effects = fit.coefficients.iter().skip(1 + m).copied().collect();
    out.grid_weights = estimate.iter().copied().collect();
    out.weight_function = Some(WeightFunction {
        basis: basis.spec(),
        zero_at_origin,
        gamma: gamma.iter().copied().collect(),
        estimate: out.grid_weights.clone(),
        lower95: lower,
        upper95: upper,
    });
    out.subset = dataset.grid().values().to_vec();
    out.lambda = Some(sel.lambda);
    out.edf = Some(fit.edf);
    Ok(out)
}

/// Linear predictor of a fitted model for one subject.
pub fn predict(fit: &ModelFit, record: &SubjectRecord) -> Result<f64> {
    if record.curve.grid.values() != fit.grid.as_slice() {
        return Err(Error::GridMismatch(format!(
            "subject '{}' is not on the model's threshold grid",
            record.id
        )));
    }
    if record.covariates.len() != fit.covariate_effects.len() {
        return Err(Error::InvalidInput(format!(
            "subject '{}' has {} covariates, model expects {}",
            record.id,
            record.covariates.len(),
            fit.covariate_effects.len()
        )));
    }
    let effect = match fit.method {
        Method::Null => 0.0,
        Method::Flex => 1.0,
        _ => fit.feature_effect.unwrap_or(0.0),
    };
    let feature = if effect == 0.0 {
        0.0
    } else {
        effect * weighted_sum(&fit.grid_weights, &record.curve.values)
    };
    let cov: f64 = fit
        .covariate_effects
        .iter()
        .zip(&record.covariates)
        .map(|(b, z)| b * z)
        .sum();
    Ok(fit.intercept + feature + cov)
}

pub fn predict_all(fit: &ModelFit, dataset: &Dataset) -> Result<Vec<f64>> {
    dataset.records().iter().map(|r| predict(fit, r)).collect()
}

/// ω̂(t) scaled by the empirical standard deviation of x(t).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizedWeight {
    pub grid: Vec<f64>,
    pub estimate: Vec<f64>,
    pub lower95: Vec<f64>,
    pub upper95: Vec<f64>,
    pub sd: Vec<f64>,
    /// Grid points where the feature has zero spread; the value there is 0.
    pub zero_sd: Vec<bool>,
}

pub fn standardized_weight(fit: &ModelFit, dataset: &Dataset) -> Result<StandardizedWeight> {
    let wf = fit.weight_function.as_ref().ok_or_else(|| {
        Error::InvalidInput(format!(
            "standardized weights need a FLEX fit, got {}",
            fit.method
        ))
    })?;
    if dataset.grid().values() != fit.grid.as_slice() {
        return Err(Error::GridMismatch("dataset grid differs from the fit".into()));
    }
    let n = dataset.len();
    if n < 2 {
        return Err(Error::InvalidInput("need at least 2 subjects for a standard deviation".into()));
    }
    let x = dataset.curve_matrix();
    let mut out = StandardizedWeight {
        grid: fit.grid.clone(),
        estimate: Vec::new(),
        lower95: Vec::new(),
        upper95: Vec::new(),
        sd: Vec::new(),
        zero_sd: Vec::new(),
    };
    for j in 0..x.ncols() {
        let col = x.column(j);
        let mean = col.mean();
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sd = var.sqrt();
        let flat = sd == 0.0;
        out.sd.push(sd);
        out.zero_sd.push(flat);
        out.estimate.push(if flat { 0.0 } else { wf.estimate[j] * sd });
        out.lower95.push(if flat { 0.0 } else { wf.lower95[j] * sd });
        out.upper95.push(if flat { 0.0 } else { wf.upper95[j] * sd });
    }
    Ok(out)
}

/// Method plus its settings, as read from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum MethodConfig {
    Flex(FlexConfig),
    Opt {
        #[serde(default)]
        subset: Option<Vec<f64>>,
        #[serde(default = "default_inner_folds")]
        inner_folds: usize,
    },
    Avg {
        #[serde(default)]
        subset: Option<Vec<f64>>,
    },
    Null,
    Oracle {
        weights: Vec<f64>,
    },
}

fn default_inner_folds() -> usize {
    5
}

impl MethodConfig {
    pub fn method(&self) -> Method {
        match self {
            MethodConfig::Flex(_) => Method::Flex,
            MethodConfig::Opt { .. } => Method::Opt,
            MethodConfig::Avg { .. } => Method::Avg,
            MethodConfig::Null => Method::Null,
            MethodConfig::Oracle { .. } => Method::Oracle,
        }
    }

    /// Default settings for a method (not available for ORACLE, which needs
    /// the true weights).
    pub fn default_for(method: Method) -> Option<Self> {
        Some(match method {
            Method::Flex => MethodConfig::Flex(FlexConfig::default()),
            Method::Opt => MethodConfig::Opt {
                subset: None,
                inner_folds: default_inner_folds(),
            },
            Method::Avg => MethodConfig::Avg { subset: None },
            Method::Null => MethodConfig::Null,
            Method::Oracle => return None,
        })
    }

    /// Fit on `dataset`; `seed` drives OPT's inner fold assignment.
    pub fn fit(&self, dataset: &Dataset, seed: u64) -> Result<ModelFit> {
        match self {
            MethodConfig::Flex(cfg) => fit_flex_config(dataset, cfg),
            MethodConfig::Opt {
                subset,
                inner_folds,
            } => {
                let subset = subset.clone().unwrap_or_else(|| {
                    default_subset(Method::Opt, dataset.strategy(), dataset.grid())
                });
                fit_opt(dataset, &subset, *inner_folds, seed)
            }
            MethodConfig::Avg { subset } => {
                let subset = subset.clone().unwrap_or_else(|| {
                    default_subset(Method::Avg, dataset.strategy(), dataset.grid())
                });
                fit_avg(dataset, &subset)
            }
            MethodConfig::Null => fit_null(dataset),
            MethodConfig::Oracle { weights } => fit_oracle(dataset, weights),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> ThresholdGrid {
        ThresholdGrid::uniform(n)
    }

    fn record(id: &str, g: &ThresholdGrid, values: Vec<f64>, cov: Vec<f64>, y: f64) -> SubjectRecord {
        SubjectRecord {
            id: id.into(),
            curve: FeatureCurve::new(g.clone(), values, FeatureKind::Cc, Strategy::Weight).unwrap(),
            covariates: cov,
            outcome: Some(y),
        }
    }

    #[test]
    fn dataset_validation() {
        let g = grid(4);
        let a = record("a", &g, vec![0.0; 5], vec![], 1.0);
        assert!(Dataset::new(vec![a.clone(), a.clone()]).is_err());
        let b = record("b", &grid(5), vec![0.0; 6], vec![], 1.0);
        assert!(matches!(
            Dataset::new(vec![a.clone(), b]),
            Err(Error::GridMismatch(_))
        ));
        let c = record("c", &g, vec![0.0; 5], vec![1.0], 1.0);
        assert!(Dataset::new(vec![a, c]).is_err());
        assert!(Dataset::new(vec![]).is_err());
    }

    #[test]
    fn null_model() {
        let g = grid(2);
        let ds = Dataset::new(vec![
            record("a", &g, vec![0.1, 0.2, 0.3], vec![], 1.0),
            record("b", &g, vec![0.5, 0.2, 0.9], vec![], 2.0),
            record("c", &g, vec![0.0, 0.7, 0.3], vec![], 3.0),
        ])
        .unwrap();
        let fit = fit_null(&ds).unwrap();
        for r in ds.records() {
            assert_eq!(predict(&fit, r).unwrap(), 2.0);
        }
        let other = record("z", &g, vec![9.0, 9.0, 9.0], vec![], 0.0);
        assert_eq!(predict(&fit, &other).unwrap(), 2.0);
        let single = Dataset::new(vec![record("a", &g, vec![0.1, 0.2, 0.3], vec![], 4.5)]).unwrap();
        assert_eq!(predict(&fit_null(&single).unwrap(), &other).unwrap(), 4.5);
    }

    #[test]
    fn avg_weights_and_subset() {
        let g = ThresholdGrid::default();
        let subset = g.between(0.1, 0.4);
        assert_eq!(subset.len(), 31);
        let recs: Vec<_> = (0..6)
            .map(|i| {
                let c = 0.1 * i as f64 + 0.05 * ((i * i) % 3) as f64;
                record(&format!("s{i}"), &g, vec![c; 101], vec![], 2.0 + 3.0 * c)
            })
            .collect();
        let ds = Dataset::new(recs).unwrap();
        let fit = fit_avg(&ds, &subset).unwrap();
        let nz: Vec<f64> = fit.grid_weights.iter().copied().filter(|w| *w != 0.0).collect();
        assert_eq!(nz.len(), 31);
        assert!(nz.iter().all(|w| *w == 1.0 / 31.0));
        assert_eq!(fit.grid_weights[5], 0.0);
        assert_eq!(fit.grid_weights[50], 0.0);
        // constant curves: same as OLS on c_i
        assert!((fit.intercept - 2.0).abs() < 1e-10);
        assert!((fit.feature_effect.unwrap() - 3.0).abs() < 1e-10);
    }

    #[test]
    fn avg_zero_variance_is_rank_deficient() {
        let g = grid(4);
        let ds = Dataset::new(
            (0..5)
                .map(|i| record(&format!("s{i}"), &g, vec![0.5; 5], vec![], i as f64))
                .collect(),
        )
        .unwrap();
        assert!(matches!(
            fit_avg(&ds, &[0.25, 0.5]),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn oracle_zero_weight_fails() {
        let g = grid(4);
        let ds = Dataset::new(
            (0..5)
                .map(|i| record(&format!("s{i}"), &g, vec![i as f64; 5], vec![], i as f64))
                .collect(),
        )
        .unwrap();
        assert!(fit_oracle(&ds, &[0.0; 5]).is_err());
        assert!(fit_oracle(&ds, &[0.0; 4]).is_err());
    }

    #[test]
    fn opt_prediction_by_hand() {
        let g = grid(4);
        // y = 1 + 2 x(0.5) - z1 + 0.5 z2 exactly
        let rows = [
            ([0.3, 0.1, 0.9, 0.2, 0.0], [1.0, 0.0]),
            ([0.2, 0.4, 0.1, 0.3, 0.1], [0.0, 2.0]),
            ([0.5, 0.2, 0.4, 0.1, 0.0], [2.0, 1.0]),
            ([0.1, 0.3, 0.6, 0.5, 0.2], [1.5, -1.0]),
            ([0.6, 0.5, 0.2, 0.7, 0.3], [0.5, 0.5]),
            ([0.4, 0.6, 0.8, 0.3, 0.1], [-1.0, 3.0]),
        ];
        let recs: Vec<_> = rows
            .iter()
            .enumerate()
            .map(|(i, (x, z))| {
                let y = 1.0 + 2.0 * x[2] - z[0] + 0.5 * z[1];
                record(&format!("s{i}"), &g, x.to_vec(), z.to_vec(), y)
            })
            .collect();
        let ds = Dataset::new(recs).unwrap();
        let fit = fit_opt(&ds, &[0.5], 5, 0).unwrap();
        assert_eq!(fit.selected_threshold, Some(0.5));
        assert!((fit.intercept - 1.0).abs() < 1e-10);
        assert!((fit.feature_effect.unwrap() - 2.0).abs() < 1e-10);
        let probe = record("p", &g, vec![0.0, 0.0, 0.7, 0.0, 0.0], vec![2.0, 4.0], 0.0);
        let hand = 1.0 + 2.0 * 0.7 - 2.0 + 0.5 * 4.0;
        assert!((predict(&fit, &probe).unwrap() - hand).abs() < 1e-10);
    }

    #[test]
    fn flex_degenerate_inputs() {
        let g = ThresholdGrid::default();
        let zero = Dataset::new(
            (0..10)
                .map(|i| record(&format!("s{i}"), &g, vec![0.0; 101], vec![], i as f64))
                .collect(),
        )
        .unwrap();
        assert!(matches!(
            fit_flex_config(&zero, &FlexConfig::default()),
            Err(Error::RankDeficient { .. })
        ));
        let two = zero.select(&[0, 1]).unwrap();
        assert!(fit_flex_config(&two, &FlexConfig::default()).is_err());
    }

    #[test]
    fn standardized_weight_by_hand() {
        let g = grid(1);
        // x(0) = {1, 3, 5} -> sd 2 ; x(1) = {0, 0.5, 1} -> sd 0.5
        let ds = Dataset::new(vec![
            record("a", &g, vec![1.0, 0.0], vec![], 1.0),
            record("b", &g, vec![3.0, 0.5], vec![], 2.0),
            record("c", &g, vec![5.0, 1.0], vec![], 4.0),
        ])
        .unwrap();
        let mut fit = ModelFit::base(Method::Flex, &ds);
        fit.weight_function = Some(WeightFunction {
            basis: SplineSpec { segments: 1, degree: 1 },
            zero_at_origin: false,
            gamma: vec![1.5, -4.0],
            estimate: vec![1.5, -4.0],
            lower95: vec![1.0, -5.0],
            upper95: vec![2.0, -3.0],
        });
        let s = standardized_weight(&fit, &ds).unwrap();
        assert!((s.sd[0] - 2.0).abs() < 1e-12 && (s.sd[1] - 0.5).abs() < 1e-12);
        assert!((s.estimate[0] - 3.0).abs() < 1e-12);
        assert!((s.estimate[1] + 2.0).abs() < 1e-12);
        assert!((s.lower95[1] + 2.5).abs() < 1e-12);
        assert_eq!(s.zero_sd, vec![false, false]);

        let flat = Dataset::new(vec![
            record("a", &g, vec![1.0, 2.0], vec![], 1.0),
            record("b", &g, vec![1.0, 2.0], vec![], 2.0),
        ])
        .unwrap();
        let s = standardized_weight(&fit, &flat).unwrap();
        assert_eq!(s.estimate, vec![0.0, 0.0]);
        assert_eq!(s.zero_sd, vec![true, true]);

        let null = fit_null(&ds).unwrap();
        assert!(standardized_weight(&null, &ds).is_err());
    }

    #[test]
    fn unit_sd_leaves_weight_unchanged() {
        let g = grid(1);
        // both columns {-1, 0, 1}: sd = 1
        let ds = Dataset::new(vec![
            record("a", &g, vec![0.0, 1.0], vec![], 1.0),
            record("b", &g, vec![1.0, 2.0], vec![], 2.0),
            record("c", &g, vec![2.0, 3.0], vec![], 4.0),
        ])
        .unwrap();
        let mut fit = ModelFit::base(Method::Flex, &ds);
        fit.weight_function = Some(WeightFunction {
            basis: SplineSpec { segments: 1, degree: 1 },
            zero_at_origin: false,
            gamma: vec![0.7, 0.2],
            estimate: vec![0.7, 0.2],
            lower95: vec![0.5, 0.0],
            upper95: vec![0.9, 0.4],
        });
        let s = standardized_weight(&fit, &ds).unwrap();
        assert_eq!(s.estimate, vec![0.7, 0.2]);
    }

    #[test]
    fn predict_rejects_mismatch() {
        let g = grid(2);
        let ds = Dataset::new(vec![record("a", &g, vec![0.1, 0.2, 0.3], vec![], 1.0)]).unwrap();
        let fit = fit_null(&ds).unwrap();
        let bad = record("b", &grid(3), vec![0.0; 4], vec![], 1.0);
        assert!(matches!(predict(&fit, &bad), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn method_config_json() {
        let cfg: MethodConfig = serde_json::from_str(r#"{"method":"opt"}"#).unwrap();
        assert_eq!(
            cfg,
            MethodConfig::Opt {
                subset: None,
                inner_folds: 5
            }
        );
        let cfg: MethodConfig =
            serde_json::from_str(r#"{"method":"flex","basis":{"segments":10,"degree":2}}"#).unwrap();
        match cfg {
            MethodConfig::Flex(f) => {
                assert_eq!(f.basis.segments, 10);
                assert_eq!(f.penalty_order, 2);
                assert_eq!(f.lambda_grid.len(), 30);
            }
            _ => panic!(),
        }
    }

    #[test]
    fn default_subsets_follow_method_table() {
        let g = ThresholdGrid::default();
        let s = default_subset(Method::Opt, Strategy::Weight, &g);
        assert_eq!((s[0], *s.last().unwrap(), s.len()), (0.0, 0.75, 76));
        let s = default_subset(Method::Opt, Strategy::Density, &g);
        assert_eq!((s[0], *s.last().unwrap()), (0.25, 1.0));
        let s = default_subset(Method::Avg, Strategy::Density, &g);
        assert_eq!((s[0], *s.last().unwrap(), s.len()), (0.6, 0.9, 31));
        assert_eq!(default_subset(Method::Flex, Strategy::Density, &g).len(), 101);
    }
}
