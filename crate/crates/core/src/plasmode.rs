//! Simulation machinery: correlation matrices, edge-weight contamination,
//! outcome-generating mechanisms (OGMs), residual-variance calibration and
//! the replicate runner.
//!
//! A replicate proceeds in a fixed order: draw clean correlation matrices,
//! compute clean curves, generate outcomes from the clean curves, contaminate
//! each subject's matrix, recompute the curves and evaluate every configured
//! method on the contaminated curves. Each step draws from its own stream
//! keyed by `(seed, replicate, step)`, so a replicate is reproducible on its
//! own and independent of scheduling.

use std::f64::consts::PI;
use std::path::PathBuf;

use log::{debug, warn};
use nalgebra::DMatrix;
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{cv_measures, relative_rmspe, summarize, Summary};
use crate::graph::{
    feature_curve, AdjacencyMatrix, FeatureCurve, FeatureKind, NegativePolicy, Strategy,
    ThresholdGrid, SYMMETRY_TOL,
};
use crate::models::{Dataset, FlexConfig, Method, MethodConfig, SubjectRecord};
use crate::seed::{self, stream};

/// Random factor-model correlation matrix: loadings `L ~ N(0, 1)` (`p x
/// n_factors`), covariance `LLᵀ + noise_scale² I`, rescaled to unit diagonal.
pub fn synth_correlation<R: Rng + ?Sized>(
    p: usize,
    n_factors: usize,
    noise_scale: f64,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    if p < 3 {
        return Err(Error::Domain(format!("need p >= 3, got {p}")));
    }
    if n_factors < 1 {
        return Err(Error::Domain("need at least one factor".into()));
    }
    if !(noise_scale > 0.0 && noise_scale.is_finite()) {
        return Err(Error::Domain(format!("noise scale {noise_scale} must be positive")));
    }
    let loadings = DMatrix::<f64>::from_fn(p, n_factors, |_, _| StandardNormal.sample(rng));
    let mut cov = &loadings * loadings.transpose();
    for r in 0..p {
        cov[(r, r)] += noise_scale * noise_scale;
    }
    let inv_sd: Vec<f64> = (0..p).map(|r| 1.0 / cov[(r, r)].sqrt()).collect();
    let mut corr = DMatrix::identity(p, p);
    for r in 0..p {
        for s in (r + 1)..p {
            let c = (cov[(r, s)] * inv_sd[r] * inv_sd[s]).clamp(-1.0, 1.0);
            corr[(r, s)] = c;
            corr[(s, r)] = c;
        }
    }
    Ok(corr)
}

/// Contamination strength and the dimension of the perturbation vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContaminationSpec {
    /// Maximum absolute change of any off-diagonal entry.
    pub alpha: f64,
    /// Length of the random unit vectors; defaults to `p`.
    #[serde(default)]
    pub m: Option<usize>,
    /// Seed of the contamination stream; derived from the scenario seed when
    /// absent.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for ContaminationSpec {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            m: None,
            seed: None,
        }
    }
}

impl ContaminationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Domain(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.m == Some(0) {
            return Err(Error::Domain("contamination dimension m must be >= 1".into()));
        }
        Ok(())
    }
}

/// Result of contaminating one matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Contaminated {
    pub matrix: DMatrix<f64>,
    /// False when the perturbed matrix is not positive semidefinite.
    pub psd: bool,
}

/// `S = Σ + α δ (UᵀU − I)` with `U` the `m x p` matrix of independent unit
/// vectors, then clipped to `[-1, 1]`. Off-diagonal entries move by at most
/// `α δ`; the diagonal is untouched.
pub fn hardin_contaminate<R: Rng + ?Sized>(
    sigma: &DMatrix<f64>,
    spec: &ContaminationSpec,
    delta: f64,
    rng: &mut R,
) -> Result<Contaminated> {
    spec.validate()?;
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::Domain(format!("delta {delta} outside [0, 1]")));
    }
    let p = sigma.nrows();
    if sigma.ncols() != p {
        return Err(Error::NotSquare {
            rows: p,
            cols: sigma.ncols(),
        });
    }
    for r in 0..p {
        if (sigma[(r, r)] - 1.0).abs() > SYMMETRY_TOL {
            return Err(Error::Domain(format!(
                "correlation matrix has diagonal {} at {r}",
                sigma[(r, r)]
            )));
        }
        for s in (r + 1)..p {
            if (sigma[(r, s)] - sigma[(s, r)]).abs() > SYMMETRY_TOL {
                return Err(Error::NotSymmetric {
                    row: r,
                    col: s,
                    a: sigma[(r, s)],
                    b: sigma[(s, r)],
                });
            }
        }
    }
    let scale = spec.alpha * delta;
    if scale == 0.0 {
        return Ok(Contaminated {
            matrix: sigma.clone(),
            psd: true,
        });
    }
    let m = spec.m.unwrap_or(p);
    let mut u = DMatrix::<f64>::from_fn(m, p, |_, _| StandardNormal.sample(rng));
    for mut col in u.column_iter_mut() {
        let norm = col.norm();
        col /= norm;
    }
    let gram = u.transpose() * &u;
    let mut s = sigma.clone();
    for r in 0..p {
        for c in (r + 1)..p {
            let g = gram[(r, c)].clamp(-1.0, 1.0);
            let v = (sigma[(r, c)] + scale * g).clamp(-1.0, 1.0);
            s[(r, c)] = v;
            s[(c, r)] = v;
        }
    }
    let mut probe = s.clone();
    for r in 0..p {
        probe[(r, r)] += 1e-10;
    }
    let psd = probe.cholesky().is_some();
    if !psd {
        debug!("contaminated matrix is not positive semidefinite (alpha {}, delta {delta:.3})", spec.alpha);
    }
    Ok(Contaminated { matrix: s, psd })
}

/// Outcome-generating mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OgmKind {
    Universal,
    Random,
    Flat,
    EarlyPeak,
    Arc,
}

impl OgmKind {
    pub fn is_functional(self) -> bool {
        matches!(self, OgmKind::Flat | OgmKind::EarlyPeak | OgmKind::Arc)
    }

    /// True weight function of the functional kinds.
    pub fn omega(self, t: f64) -> Option<f64> {
        match self {
            OgmKind::Flat => Some(4.0),
            OgmKind::EarlyPeak => Some(if t < 0.5 {
                6.5 * (2.0 * PI * t).sin()
            } else {
                0.0
            }),
            OgmKind::Arc => Some(6.0 * (PI * t).sin()),
            OgmKind::Universal | OgmKind::Random => None,
        }
    }
}

impl std::str::FromStr for OgmKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
            .map_err(|_| Error::InvalidInput(format!("unknown OGM '{s}'")))
    }
}

fn default_tau() -> f64 {
    0.25
}

fn default_tau_range() -> (f64, f64) {
    (0.1, 0.4)
}

fn default_beta1() -> f64 {
    1.0
}

/// OGM settings and the residual-variance target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OgmSpec {
    pub kind: OgmKind,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_tau_range")]
    pub tau_range: (f64, f64),
    #[serde(default)]
    pub beta0: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    /// Target R² of the true model; ignored when `sigma2` is given.
    #[serde(default)]
    pub r2_target: Option<f64>,
    #[serde(default)]
    pub sigma2: Option<f64>,
}

impl OgmSpec {
    pub fn new(kind: OgmKind) -> Self {
        Self {
            kind,
            tau: default_tau(),
            tau_range: default_tau_range(),
            beta0: 0.0,
            beta1: default_beta1(),
            r2_target: Some(1.0),
            sigma2: None,
        }
    }

    pub fn with_r2(mut self, r2: f64) -> Self {
        self.r2_target = Some(r2);
        self.sigma2 = None;
        self
    }

    /// Weights ω*(t) on `grid` such that `x* = Σ_t ω*(t) x(t)`; `None` for
    /// the random OGM, which has no common weight function.
    pub fn true_weights(&self, grid: &ThresholdGrid) -> Result<Option<Vec<f64>>> {
        match self.kind {
            OgmKind::Random => Ok(None),
            OgmKind::Universal => {
                let j = grid.index_of(self.tau).ok_or_else(|| {
                    Error::GridMismatch(format!("grid has no point at tau = {}", self.tau))
                })?;
                let mut w = vec![0.0; grid.len()];
                w[j] = 1.0;
                Ok(Some(w))
            }
            kind => Ok(Some(
                grid.values()
                    .iter()
                    .map(|&t| kind.omega(t).unwrap())
                    .collect(),
            )),
        }
    }
}

/// Target values `x*` and, for the random OGM, the snapped `τ_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct OgmDraw {
    pub xstar: Vec<f64>,
    pub taus: Option<Vec<f64>>,
}

/// Compute `x*` for each clean curve.
pub fn ogm_target<R: Rng + ?Sized>(
    curves: &[FeatureCurve],
    ogm: &OgmSpec,
    rng: &mut R,
) -> Result<OgmDraw> {
    let grid = &curves
        .first()
        .ok_or_else(|| Error::InvalidInput("no curves".into()))?
        .grid;
    if curves.iter().any(|c| &c.grid != grid) {
        return Err(Error::GridMismatch("curves do not share a grid".into()));
    }
    if ogm.kind == OgmKind::Random {
        let (lo, hi) = ogm.tau_range;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(Error::Domain(format!("invalid tau range ({lo}, {hi})")));
        }
        let dist = Uniform::new(lo, hi).map_err(|e| Error::Domain(e.to_string()))?;
        let mut taus = Vec::with_capacity(curves.len());
        let mut xstar = Vec::with_capacity(curves.len());
        for c in curves {
            let j = grid.nearest_index(dist.sample(rng));
            taus.push(grid.values()[j]);
            xstar.push(c.values[j]);
        }
        return Ok(OgmDraw {
            xstar,
            taus: Some(taus),
        });
    }
    let w = ogm.true_weights(grid)?.unwrap();
    let xstar = curves
        .iter()
        .map(|c| w.iter().zip(&c.values).map(|(w, x)| w * x).sum())
        .collect();
    Ok(OgmDraw { xstar, taus: None })
}

/// `σ² = β₁² var(x*) (1 − R²) / R²`, with the sample variance of `x*`.
pub fn calibrate_sigma(xstar: &[f64], beta1: f64, r2_target: f64) -> Result<f64> {
    if !(r2_target > 0.0 && r2_target <= 1.0) {
        return Err(Error::Domain(format!("R² target {r2_target} outside (0, 1]")));
    }
    if r2_target == 1.0 {
        return Ok(0.0);
    }
    if xstar.len() < 2 {
        return Err(Error::InvalidInput("need at least 2 targets to calibrate".into()));
    }
    let n = xstar.len() as f64;
    let mean = xstar.iter().sum::<f64>() / n;
    let var = xstar.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return Err(Error::Domain("x* has zero variance; cannot calibrate σ²".into()));
    }
    Ok(beta1 * beta1 * var * (1.0 - r2_target) / r2_target)
}

/// `y_i = β₀ + β₁ x*_i + ε_i`, `ε ~ N(0, σ²)`.
pub fn generate_outcomes<R: Rng + ?Sized>(
    xstar: &[f64],
    beta0: f64,
    beta1: f64,
    sigma2: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(sigma2 >= 0.0 && sigma2.is_finite()) {
        return Err(Error::Domain(format!("σ² = {sigma2} must be finite and >= 0")));
    }
    let sd = sigma2.sqrt();
    Ok(xstar
        .iter()
        .map(|x| {
            let e: f64 = StandardNormal.sample(rng);
            beta0 + beta1 * x + sd * e
        })
        .collect())
}

/// Where the clean correlation matrices come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MatrixSource {
    Synthetic {
        p: usize,
        #[serde(default = "default_factors")]
        n_factors: usize,
        #[serde(default = "default_noise_scale")]
        noise_scale: f64,
    },
    /// Correlation-matrix CSV files; each replicate samples N without
    /// replacement.
    Pool { files: Vec<PathBuf> },
}

fn default_factors() -> usize {
    3
}

fn default_noise_scale() -> f64 {
    0.5
}

/// One cell of the simulation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub id: String,
    pub n: usize,
    pub feature: FeatureKind,
    pub strategy: Strategy,
    pub negative_policy: NegativePolicy,
    pub grid_step: f64,
    pub ogm: OgmSpec,
    pub contamination: ContaminationSpec,
    pub n_sim: usize,
    pub methods: Vec<Method>,
    pub flex: FlexConfig,
    pub opt_subset: Option<Vec<f64>>,
    pub avg_subset: Option<Vec<f64>>,
    pub inner_folds: usize,
    pub cv_folds: usize,
    pub source: MatrixSource,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            id: "scenario".into(),
            n: 75,
            feature: FeatureKind::Cc,
            strategy: Strategy::Weight,
            negative_policy: NegativePolicy::Zero,
            grid_step: 0.01,
            ogm: OgmSpec::new(OgmKind::Universal),
            contamination: ContaminationSpec::default(),
            n_sim: 100,
            methods: Method::ALL.to_vec(),
            flex: FlexConfig::default(),
            opt_subset: None,
            avg_subset: None,
            inner_folds: 5,
            cv_folds: 5,
            source: MatrixSource::Synthetic {
                p: 30,
                n_factors: default_factors(),
                noise_scale: default_noise_scale(),
            },
            seed: 1,
        }
    }
}

impl ScenarioConfig {
    pub fn grid(&self) -> Result<ThresholdGrid> {
        ThresholdGrid::from_step(self.grid_step)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < self.cv_folds.max(3) {
            return Err(Error::InvalidInput(format!(
                "N = {} is too small for {}-fold cross-validation",
                self.n, self.cv_folds
            )));
        }
        if self.n_sim == 0 {
            return Err(Error::InvalidInput("n_sim must be >= 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidInput("no methods configured".into()));
        }
        self.contamination.validate()?;
        let grid = self.grid()?;
        for subset in [&self.opt_subset, &self.avg_subset].into_iter().flatten() {
            grid.indices_of(subset)?;
        }
        if self.ogm.kind == OgmKind::Universal {
            grid.index_of(self.ogm.tau).ok_or_else(|| {
                Error::GridMismatch(format!("grid has no point at tau = {}", self.ogm.tau))
            })?;
        }
        if let MatrixSource::Pool { files } = &self.source {
            if files.len() < self.n {
                return Err(Error::InvalidInput(format!(
                    "pool has {} matrices but N = {}",
                    files.len(),
                    self.n
                )));
            }
        }
        Ok(())
    }

    /// Whether ORACLE takes part: it needs a common true weight function and
    /// weight-based thresholding.
    pub fn oracle_applicable(&self) -> bool {
        self.strategy == Strategy::Weight && self.ogm.kind != OgmKind::Random
    }

    fn method_config(&self, method: Method, grid: &ThresholdGrid) -> Result<Option<MethodConfig>> {
        Ok(Some(match method {
            Method::Flex => MethodConfig::Flex(self.flex.clone()),
            Method::Opt => MethodConfig::Opt {
                subset: self.opt_subset.clone(),
                inner_folds: self.inner_folds,
            },
            Method::Avg => MethodConfig::Avg {
                subset: self.avg_subset.clone(),
            },
            Method::Null => MethodConfig::Null,
            Method::Oracle => {
                if !self.oracle_applicable() {
                    return Ok(None);
                }
                MethodConfig::Oracle {
                    weights: self.ogm.true_weights(grid)?.unwrap(),
                }
            }
        }))
    }
}

/// Everything drawn for one replicate before any model is fitted.
#[derive(Debug, Clone)]
pub struct ReplicateData {
    pub replicate: usize,
    pub seed: u64,
    pub subjects: Vec<String>,
    pub clean: Dataset,
    pub contaminated: Dataset,
    pub xstar: Vec<f64>,
    pub taus: Option<Vec<f64>>,
    pub sigma2: f64,
    pub deltas: Vec<f64>,
    pub psd_violations: usize,
}

fn curve_of(
    id: &str,
    corr: &DMatrix<f64>,
    config: &ScenarioConfig,
    grid: &ThresholdGrid,
) -> Result<FeatureCurve> {
    let adj = AdjacencyMatrix::from_correlation(id, corr, config.negative_policy)?;
    feature_curve(&adj, config.feature, config.strategy, grid)
}

fn records(ids: &[String], curves: Vec<FeatureCurve>, y: &[f64]) -> Result<Dataset> {
    Dataset::new(
        ids.iter()
            .zip(curves)
            .zip(y)
            .map(|((id, curve), &v)| SubjectRecord {
                id: id.clone(),
                curve,
                covariates: Vec::new(),
                outcome: Some(v),
            })
            .collect(),
    )
}

/// Draw the data of replicate `replicate`. `pool` holds the ingested
/// correlation matrices for a pool source and is ignored otherwise.
pub fn generate_replicate(
    config: &ScenarioConfig,
    pool: &[(String, DMatrix<f64>)],
    replicate: usize,
) -> Result<ReplicateData> {
    let grid = config.grid()?;
    let rep_seed = seed::derive(config.seed, &[replicate as u64]);
    let n = config.n;

    let (subjects, matrices): (Vec<String>, Vec<DMatrix<f64>>) = match &config.source {
        MatrixSource::Synthetic {
            p,
            n_factors,
            noise_scale,
        } => {
            let mats = (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut rng = seed::rng(rep_seed, &[stream::MATRICES, i as u64]);
                    synth_correlation(*p, *n_factors, *noise_scale, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            ((0..n).map(|i| format!("syn{i:04}")).collect(), mats)
        }
        MatrixSource::Pool { .. } => {
            if pool.len() < n {
                return Err(Error::InvalidInput(format!(
                    "pool has {} matrices but N = {n}",
                    pool.len()
                )));
            }
            let mut rng = seed::rng(rep_seed, &[stream::MATRICES]);
            let mut picked = index::sample(&mut rng, pool.len(), n).into_vec();
            picked.sort_unstable();
            picked
                .into_iter()
                .map(|i| (pool[i].0.clone(), pool[i].1.clone()))
                .unzip()
        }
    };

    let clean_curves = subjects
        .par_iter()
        .zip(&matrices)
        .map(|(id, m)| curve_of(id, m, config, &grid))
        .collect::<Result<Vec<_>>>()?;

    let draw = ogm_target(
        &clean_curves,
        &config.ogm,
        &mut seed::rng(rep_seed, &[stream::OGM]),
    )?;
    let sigma2 = match (config.ogm.sigma2, config.ogm.r2_target) {
        (Some(s2), _) => s2,
        (None, Some(r2)) => calibrate_sigma(&draw.xstar, config.ogm.beta1, r2)?,
        (None, None) => 0.0,
    };
    let y = generate_outcomes(
        &draw.xstar,
        config.ogm.beta0,
        config.ogm.beta1,
        sigma2,
        &mut seed::rng(rep_seed, &[stream::NOISE]),
    )?;

    let contam_seed = config
        .contamination
        .seed
        .unwrap_or_else(|| seed::derive(config.seed, &[u64::MAX, stream::CONTAMINATION]));
    let perturbed = matrices
        .par_iter()
        .enumerate()
        .map(|(i, m)| {
            let mut rng = seed::rng(contam_seed, &[replicate as u64, i as u64]);
            let delta: f64 = rng.random();
            let c = hardin_contaminate(m, &config.contamination, delta, &mut rng)?;
            Ok((delta, c))
        })
        .collect::<Result<Vec<_>>>()?;
    let deltas: Vec<f64> = perturbed.iter().map(|(d, _)| *d).collect();
    let psd_violations = perturbed.iter().filter(|(_, c)| !c.psd).count();

    let contaminated_curves = if config.contamination.alpha == 0.0 {
        clean_curves.clone()
    } else {
        subjects
            .par_iter()
            .zip(&perturbed)
            .map(|(id, (_, c))| curve_of(id, &c.matrix, config, &grid))
            .collect::<Result<Vec<_>>>()?
    };

    Ok(ReplicateData {
        replicate,
        seed: rep_seed,
        clean: records(&subjects, clean_curves, &y)?,
        contaminated: records(&subjects, contaminated_curves, &y)?,
        subjects,
        xstar: draw.xstar,
        taus: draw.taus,
        sigma2,
        deltas,
        psd_violations,
    })
}

/// Performance of one method in one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub method: Method,
    pub rmspe: Option<f64>,
    pub relative_rmspe: Option<f64>,
    pub r2: Option<f64>,
    pub calibration_slope: Option<f64>,
    pub failed_folds: usize,
    /// OPT's threshold on the full replicate data.
    pub selected_threshold: Option<f64>,
    /// FLEX's ω̂ on the grid from the full replicate data.
    pub weight_estimate: Option<Vec<f64>>,
    pub lambda: Option<f64>,
    pub error: Option<String>,
}

/// Seed record and per-method results of one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub seed: u64,
    pub sigma2: f64,
    pub subjects: Vec<String>,
    pub deltas: Vec<f64>,
    pub taus: Option<Vec<f64>>,
    pub psd_violations: usize,
    pub methods: Vec<MethodOutcome>,
    pub error: Option<String>,
}

impl ReplicateRecord {
    pub fn failed(&self) -> bool {
        self.error.is_some() || self.methods.iter().any(|m| m.error.is_some())
    }
}

/// Aggregates of one method over the successful replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodAggregate {
    pub method: Method,
    pub n_ok: usize,
    pub rmspe: Option<Summary>,
    pub relative_rmspe: Option<Summary>,
    pub r2: Option<Summary>,
    pub calibration_slope: Option<Summary>,
    pub selected_threshold: Option<Summary>,
    pub mean_weight: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub config: ScenarioConfig,
    pub grid: Vec<f64>,
    pub replicates: Vec<ReplicateRecord>,
    pub aggregates: Vec<MethodAggregate>,
    pub failed_replicates: usize,
}

impl ScenarioResult {
    pub fn aggregate(&self, method: Method) -> Option<&MethodAggregate> {
        self.aggregates.iter().find(|a| a.method == method)
    }
}

fn evaluate_method(
    data: &ReplicateData,
    config: &ScenarioConfig,
    method: Method,
    method_cfg: &MethodConfig,
) -> MethodOutcome {
    let ds = &data.contaminated;
    let mut out = MethodOutcome {
        method,
        rmspe: None,
        relative_rmspe: None,
        r2: None,
        calibration_slope: None,
        failed_folds: 0,
        selected_threshold: None,
        weight_estimate: None,
        lambda: None,
        error: None,
    };
    match method_cfg.fit(ds, seed::derive(data.seed, &[stream::FIT])) {
        Ok(fit) => {
            out.selected_threshold = fit.selected_threshold;
            out.lambda = fit.lambda;
            if method == Method::Flex {
                out.weight_estimate = Some(fit.grid_weights);
            }
        }
        Err(e) => {
            out.error = Some(format!("full-data fit: {e}"));
            return out;
        }
    }
    let cv_seed = seed::derive(data.seed, &[stream::CV]);
    let measured = cv_measures(ds, method_cfg, config.cv_folds, cv_seed);
    match measured {
        Ok(m) => {
            out.rmspe = Some(m.rmspe);
            out.r2 = m.r2;
            out.calibration_slope = m.calibration_slope;
            out.failed_folds = m.failed_folds;
            if m.failed_folds > 0 {
                out.error = Some(format!("{} cross-validation fold(s) failed", m.failed_folds));
            }
        }
        Err(e) => out.error = Some(format!("cross-validation: {e}")),
    }
    out
}

/// Run replicate `replicate` end to end. Data-generation failures are
/// recorded in the returned record rather than propagated.
pub fn run_replicate(
    config: &ScenarioConfig,
    pool: &[(String, DMatrix<f64>)],
    replicate: usize,
) -> Result<ReplicateRecord> {
    let grid = config.grid()?;
    let methods: Vec<(Method, MethodConfig)> = config
        .methods
        .iter()
        .filter_map(|&m| config.method_config(m, &grid).transpose().map(|c| c.map(|c| (m, c))))
        .collect::<Result<_>>()?;
    let data = match generate_replicate(config, pool, replicate) {
        Ok(d) => d,
        Err(e) => {
            return Ok(ReplicateRecord {
                replicate,
                seed: seed::derive(config.seed, &[replicate as u64]),
                sigma2: f64::NAN,
                subjects: Vec::new(),
                deltas: Vec::new(),
                taus: None,
                psd_violations: 0,
                methods: Vec::new(),
                error: Some(e.to_string()),
            })
        }
    };
    let mut outcomes: Vec<MethodOutcome> = methods
        .par_iter()
        .map(|(m, cfg)| evaluate_method(&data, config, *m, cfg))
        .collect();
    let ok: Vec<usize> = (0..outcomes.len())
        .filter(|&i| outcomes[i].rmspe.is_some_and(f64::is_finite))
        .collect();
    if !ok.is_empty() {
        let values: Vec<f64> = ok.iter().map(|&i| outcomes[i].rmspe.unwrap()).collect();
        for (&i, rel) in ok.iter().zip(relative_rmspe(&values)?) {
            outcomes[i].relative_rmspe = rel;
        }
    }
    Ok(ReplicateRecord {
        replicate,
        seed: data.seed,
        sigma2: data.sigma2,
        subjects: data.subjects,
        deltas: data.deltas,
        taus: data.taus,
        psd_violations: data.psd_violations,
        methods: outcomes,
        error: None,
    })
}

fn aggregate(method: Method, replicates: &[ReplicateRecord]) -> MethodAggregate {
    let outs: Vec<&MethodOutcome> = replicates
        .iter()
        .flat_map(|r| r.methods.iter())
        .filter(|m| m.method == method && m.error.is_none())
        .collect();
    let collect = |f: &dyn Fn(&MethodOutcome) -> Option<f64>| {
        let v: Vec<f64> = outs.iter().filter_map(|m| f(m)).collect();
        summarize(&v)
    };
    let weights: Vec<&Vec<f64>> = outs.iter().filter_map(|m| m.weight_estimate.as_ref()).collect();
    let mean_weight = weights.first().map(|w0| {
        let mut acc = vec![0.0; w0.len()];
        for w in &weights {
            for (a, v) in acc.iter_mut().zip(w.iter()) {
                *a += v;
            }
        }
        acc.iter().map(|a| a / weights.len() as f64).collect()
    });
    MethodAggregate {
        method,
        n_ok: outs.len(),
        rmspe: collect(&|m| m.rmspe),
        relative_rmspe: collect(&|m| m.relative_rmspe),
        r2: collect(&|m| m.r2),
        calibration_slope: collect(&|m| m.calibration_slope),
        selected_threshold: collect(&|m| m.selected_threshold),
        mean_weight,
    }
}

/// Load pool matrices for a pool source.
pub fn load_pool(config: &ScenarioConfig) -> Result<Vec<(String, DMatrix<f64>)>> {
    match &config.source {
        MatrixSource::Synthetic { .. } => Ok(Vec::new()),
        MatrixSource::Pool { files } => files
            .iter()
            .map(|f| {
                let id = f
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| f.display().to_string());
                Ok((id, crate::io::read_matrix_csv(f)?))
            })
            .collect(),
    }
}

/// Run every replicate of a scenario and aggregate. Fails when more than
/// half of the replicates fail.
pub fn run_scenario(config: &ScenarioConfig) -> Result<ScenarioResult> {
    let pool = load_pool(config)?;
    run_scenario_with_pool(config, &pool)
}

pub fn run_scenario_with_pool(
    config: &ScenarioConfig,
    pool: &[(String, DMatrix<f64>)],
) -> Result<ScenarioResult> {
    config.validate()?;
    let grid = config.grid()?;
    let replicates = (0..config.n_sim)
        .into_par_iter()
        .map(|r| run_replicate(config, pool, r))
        .collect::<Result<Vec<_>>>()?;
    let failed = replicates.iter().filter(|r| r.failed()).count();
    let not_psd: usize = replicates.iter().map(|r| r.psd_violations).sum();
    if not_psd > 0 {
        warn!(
            "{not_psd} of {} contaminated matrices are not positive semidefinite",
            config.n * config.n_sim
        );
    }
    if 2 * failed > config.n_sim {
        let first = replicates
            .iter()
            .find_map(|r| {
                r.error
                    .clone()
                    .or_else(|| r.methods.iter().find_map(|m| m.error.clone()))
            })
            .unwrap_or_default();
        return Err(Error::Domain(format!(
            "{failed} of {} replicates failed (first: {first})",
            config.n_sim
        )));
    }
    let mut methods: Vec<Method> = Vec::new();
    for r in &replicates {
        for m in &r.methods {
            if !methods.contains(&m.method) {
                methods.push(m.method);
            }
        }
    }
    let aggregates = methods.iter().map(|&m| aggregate(m, &replicates)).collect();
    Ok(ScenarioResult {
        config: config.clone(),
        grid: grid.values().to_vec(),
        replicates,
        aggregates,
        failed_replicates: failed,
    })
}
