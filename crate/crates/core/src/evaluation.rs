//! Performance measures and repeated k-fold cross-validation.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{predict, Dataset, Method, MethodConfig};
use crate::seed;

fn check_pair(y: &[f64], yhat: &[f64]) -> Result<()> {
    if y.len() != yhat.len() {
        return Err(Error::InvalidInput(format!(
            "outcome and prediction lengths differ ({} vs {})",
            y.len(),
            yhat.len()
        )));
    }
    if y.is_empty() {
        return Err(Error::InvalidInput("no predictions to evaluate".into()));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Root mean squared prediction error.
pub fn rmspe(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat)?;
    let sse: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sse / y.len() as f64).sqrt())
}

/// `1 - SSE / SST`; negative when predictions are worse than the mean.
pub fn r_squared(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat)?;
    let ybar = mean(y);
    let sst: f64 = y.iter().map(|v| (v - ybar).powi(2)).sum();
    if sst == 0.0 {
        return Err(Error::Domain("R² is undefined for a constant outcome".into()));
    }
    let sse: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(1.0 - sse / sst)
}

/// OLS slope of `y` on `yhat`; `None` when the predictions are constant.
pub fn calibration_slope(y: &[f64], yhat: &[f64]) -> Result<Option<f64>> {
    check_pair(y, yhat)?;
    if y.len() < 2 {
        return Err(Error::InvalidInput("calibration slope needs at least 2 points".into()));
    }
    let (my, mp) = (mean(y), mean(yhat));
    let sxx: f64 = yhat.iter().map(|p| (p - mp).powi(2)).sum();
    if sxx == 0.0 {
        return Ok(None);
    }
    let sxy: f64 = y.iter().zip(yhat).map(|(a, p)| (a - my) * (p - mp)).sum();
    Ok(Some(sxy / sxx))
}

/// Each RMSPE divided by the smallest. With a zero minimum, zero entries map
/// to 1 and the rest are undefined.
pub fn relative_rmspe(values: &[f64]) -> Result<Vec<Option<f64>>> {
    if values.is_empty() {
        return Err(Error::InvalidInput("no RMSPE values".into()));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("non-finite RMSPE {bad}")));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(values
        .iter()
        .map(|&v| {
            if min == 0.0 {
                (v == 0.0).then_some(1.0)
            } else {
                Some(v / min)
            }
        })
        .collect())
}

/// Sample standard deviation (denominator `n - 1`).
pub fn sample_sd(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::InvalidInput("standard deviation needs at least 2 values".into()));
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m).powi(2)).sum();
    Ok((ss / (values.len() - 1) as f64).sqrt())
}

/// Monte Carlo standard error of a mean over replicates.
pub fn monte_carlo_se(values: &[f64]) -> Result<f64> {
    Ok(sample_sd(values)? / (values.len() as f64).sqrt())
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidInput("no values".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Domain(format!("quantile level {q} outside [0, 1]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Ok(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

/// Mean and 2.5% / 97.5% percentiles of a measure across replicates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub p025: f64,
    pub p975: f64,
    pub mc_se: Option<f64>,
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    Some(Summary {
        mean: mean(values),
        p025: percentile(values, 0.025).ok()?,
        p975: percentile(values, 0.975).ok()?,
        mc_se: monte_carlo_se(values).ok(),
        n: values.len(),
    })
}

/// Fold index (`0..k`) for each id, in input order. The assignment is made on
/// the sorted ids, so it does not depend on record order.
pub fn fold_assignment(ids: &[&str], k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| ids[a].cmp(ids[b]).then(a.cmp(&b)));
    order.shuffle(&mut seed::rng(seed, &[]));
    let mut folds = vec![0; ids.len()];
    for (pos, &i) in order.iter().enumerate() {
        folds[i] = pos % k.max(1);
    }
    folds
}

/// Measures from one pass over all folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatMeasures {
    pub rmspe: f64,
    pub r2: Option<f64>,
    pub calibration_slope: Option<f64>,
    pub n_eval: usize,
    pub failed_folds: usize,
}

/// Cross-validated performance of one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceReport {
    pub method: Method,
    pub rmspe: f64,
    pub r2: Option<f64>,
    pub calibration_slope: Option<f64>,
    /// Out-of-fold predictions per repeat (equals N when no fold failed).
    pub n_eval: usize,
    pub folds: usize,
    pub repeats: usize,
    pub failed_folds: usize,
    pub per_repeat: Vec<RepeatMeasures>,
}

/// Out-of-fold predictions for one fold split; `None` where the fold's fit
/// failed. Also returns the number of failed folds.
pub fn cv_predictions(
    dataset: &Dataset,
    config: &MethodConfig,
    k: usize,
    seed: u64,
) -> Result<(Vec<Option<f64>>, usize)> {
    let n = dataset.len();
    if k < 2 || n < k {
        return Err(Error::InvalidInput(format!(
            "cross-validation needs 2 <= k ({k}) <= N ({n})"
        )));
    }
    let folds = fold_assignment(&dataset.ids(), k, seed);
    let per_fold: Vec<Result<Vec<(usize, f64)>>> = (0..k)
        .into_par_iter()
        .map(|fold| {
            let train: Vec<usize> = (0..n).filter(|&i| folds[i] != fold).collect();
            let fit = config.fit(&dataset.select(&train)?, seed::derive(seed, &[fold as u64]))?;
            (0..n)
                .filter(|&i| folds[i] == fold)
                .map(|i| predict(&fit, &dataset.records()[i]).map(|p| (i, p)))
                .collect()
        })
        .collect();
    let mut pred = vec![None; n];
    let mut failed = 0;
    for (fold, res) in per_fold.into_iter().enumerate() {
        match res {
            Ok(pairs) => {
                for (i, p) in pairs {
                    pred[i] = Some(p);
                }
            }
            Err(e) => {
                log::warn!("{} fold {fold} failed: {e}", config.method());
                failed += 1;
            }
        }
    }
    Ok((pred, failed))
}

/// Measures on pooled out-of-fold predictions.
pub fn pooled_measures(y: &[f64], pred: &[Option<f64>], failed_folds: usize) -> Result<RepeatMeasures> {
    let (yy, pp): (Vec<f64>, Vec<f64>) = y
        .iter()
        .zip(pred)
        .filter_map(|(a, p)| p.map(|p| (*a, p)))
        .unzip();
    if yy.is_empty() {
        return Err(Error::Domain("every cross-validation fold failed".into()));
    }
    Ok(RepeatMeasures {
        rmspe: rmspe(&yy, &pp)?,
        r2: r_squared(&yy, &pp).ok(),
        calibration_slope: if yy.len() >= 2 {
            calibration_slope(&yy, &pp)?
        } else {
            None
        },
        n_eval: yy.len(),
        failed_folds,
    })
}

/// One k-fold pass: out-of-fold predictions pooled into measures.
///
/// NULL predicts a constant from every fit, so its calibration slope is
/// undefined even though pooled predictions differ slightly between folds
/// (a slope fitted to those differences is an artifact near `-(k - 1)`).
pub fn cv_measures(dataset: &Dataset, config: &MethodConfig, k: usize, seed: u64) -> Result<RepeatMeasures> {
    let y = dataset.outcomes()?;
    let (pred, failed) = cv_predictions(dataset, config, k, seed)?;
    let mut m = pooled_measures(y.as_slice(), &pred, failed)?;
    if config.method() == Method::Null {
        m.calibration_slope = None;
    }
    Ok(m)
}

/// Repeated k-fold cross-validation. Measures are computed on the pooled
/// out-of-fold predictions of each repeat and averaged over repeats.
pub fn k_fold_cv(
    dataset: &Dataset,
    config: &MethodConfig,
    k: usize,
    repeats: usize,
    seed: u64,
) -> Result<PerformanceReport> {
    if repeats == 0 {
        return Err(Error::InvalidInput("repeats must be at least 1".into()));
    }
    let mut per_repeat = Vec::with_capacity(repeats);
    for r in 0..repeats {
        per_repeat.push(cv_measures(dataset, config, k, seed::derive(seed, &[r as u64]))?);
    }
    let defined_mean = |f: fn(&RepeatMeasures) -> Option<f64>| {
        let v: Vec<f64> = per_repeat.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| mean(&v))
    };
    Ok(PerformanceReport {
        method: config.method(),
        rmspe: mean(&per_repeat.iter().map(|m| m.rmspe).collect::<Vec<_>>()),
        r2: defined_mean(|m| m.r2),
        calibration_slope: defined_mean(|m| m.calibration_slope),
        n_eval: per_repeat.iter().map(|m| m.n_eval).min().unwrap_or(0),
        folds: k,
        repeats,
        failed_folds: per_repeat.iter().map(|m| m.failed_folds).sum(),
        per_repeat,
    })
}
