//! Per-attribute linear quantile layers over frozen features.
//!
//! Each layer minimizes the mean pinball loss plus an L1 penalty on its
//! weights with full-batch proximal subgradient descent. Features are
//! standardized before fitting; the statistics are stored with the model and
//! applied again at prediction time.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distribution::{QuantileDistribution, QuantileLevels};
use crate::error::{check_finite, QrmError, Result};

/// Asymmetric absolute loss of a residual `u = y - prediction`.
#[inline]
pub fn pinball_loss(residual: f64, tau: f64) -> f64 {
    if residual >= 0.0 {
        tau * residual
    } else {
        (tau - 1.0) * residual
    }
}

/// One labelled row: features, the attribute being scored, and its score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeExample {
    pub features: Vec<f64>,
    pub attribute: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionConfig {
    pub l1_strength: f64,
    /// Step size in units of the target's standard deviation.
    pub learning_rate: f64,
    pub max_iterations: usize,
    pub convergence_tolerance: f64,
    /// Iterations over which the objective must improve by the tolerance.
    pub patience: usize,
    /// Subsample each attribute to at most this many rows.
    pub max_rows_per_attribute: Option<usize>,
    pub seed: u64,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            l1_strength: 0.003,
            learning_rate: 0.5,
            max_iterations: 4000,
            convergence_tolerance: 1e-9,
            patience: 100,
            max_rows_per_attribute: None,
            seed: 0,
        }
    }
}

impl RegressionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(QrmError::InvalidConfig(msg.to_string()));
        if !(self.l1_strength.is_finite() && self.l1_strength >= 0.0) {
            return bad("l1_strength must be nonnegative");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.convergence_tolerance.is_finite() && self.convergence_tolerance > 0.0) {
            return bad("convergence_tolerance must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be positive");
        }
        if self.max_rows_per_attribute == Some(0) {
            return bad("max_rows_per_attribute must be positive");
        }
        Ok(())
    }
}

/// Per-feature centering and scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Constant columns get unit scale.
    pub fn fit(rows: &[&[f64]]) -> Self {
        let dim = rows.first().map_or(0, |r| r.len());
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, x) in mean.iter_mut().zip(r.iter()) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((v, x), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.dim() {
            return Err(QrmError::DimensionMismatch {
                expected: self.dim(),
                actual: features.len(),
            });
        }
        check_finite(features)?;
        Ok(features
            .iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| (x - m) / s)
            .collect())
    }
}

/// Linear predictor for a single quantile level, in standardized feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileLayer {
    pub level: f64,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl QuantileLayer {
    #[inline]
    pub fn eval(&self, standardized: &[f64]) -> f64 {
        self.bias
            + self
                .weights
                .iter()
                .zip(standardized)
                .map(|(w, x)| w * x)
                .sum::<f64>()
    }

    pub fn l1_norm(&self) -> f64 {
        self.weights.iter().map(|w| w.abs()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostics {
    pub level: f64,
    pub iterations: usize,
    /// Penalized objective at the returned parameters.
    pub final_loss: f64,
    /// Penalized objective at the zero-weight, empirical-quantile start.
    pub initial_loss: f64,
    /// False when `max_iterations` ran out before the patience criterion fired.
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFit {
    pub layer: QuantileLayer,
    pub standardizer: Standardizer,
    pub diagnostics: LayerDiagnostics,
}

impl LayerFit {
    pub fn predict(&self, features: &[f64]) -> Result<f64> {
        Ok(self.layer.eval(&self.standardizer.apply(features)?))
    }
}

/// Standardized design matrix for one attribute.
#[derive(Debug, Clone)]
pub struct Design {
    standardizer: Standardizer,
    /// Row-major `rows x dim`.
    x: Vec<f64>,
    y: Vec<f64>,
    dim: usize,
}

impl Design {
    pub fn new(data: &[&AttributeExample]) -> Result<Self> {
        let first = data
            .first()
            .ok_or_else(|| QrmError::EmptyInput("no training rows".into()))?;
        let dim = first.features.len();
        for row in data {
            if row.attribute != first.attribute {
                return Err(QrmError::InvalidConfig(format!(
                    "rows mix attributes {} and {}",
                    first.attribute, row.attribute
                )));
            }
            if row.features.len() != dim {
                return Err(QrmError::DimensionMismatch {
                    expected: dim,
                    actual: row.features.len(),
                });
            }
            check_finite(&row.features)?;
            check_finite(&[row.score])?;
        }
        let feats: Vec<&[f64]> = data.iter().map(|r| r.features.as_slice()).collect();
        let standardizer = Standardizer::fit(&feats);
        let mut x = Vec::with_capacity(data.len() * dim);
        for row in data {
            x.extend(standardizer.apply(&row.features)?);
        }
        let y = data.iter().map(|r| r.score).collect();
        Ok(Self {
            standardizer,
            x,
            y,
            dim,
        })
    }

    pub fn rows(&self) -> usize {
        self.y.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    fn target_scale(&self) -> f64 {
        let n = self.y.len() as f64;
        let mean = self.y.iter().sum::<f64>() / n;
        let var = self.y.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
        let s = var.sqrt();
        if s > 1e-12 {
            s
        } else {
            1.0
        }
    }
}

/// Smallest minimizer of the mean pinball loss over constants.
pub fn empirical_quantile(values: &[f64], tau: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = (n as f64 * tau).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

#[inline]
fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

fn objective(design: &Design, w: &[f64], b: f64, tau: f64, l1: f64, residuals: &mut [f64]) -> f64 {
    let mut loss = 0.0;
    for (i, r) in residuals.iter_mut().enumerate() {
        let pred = b + design.row(i).iter().zip(w).map(|(x, w)| x * w).sum::<f64>();
        *r = design.y[i] - pred;
        loss += pinball_loss(*r, tau);
    }
    loss / design.rows() as f64 + l1 * w.iter().map(|w| w.abs()).sum::<f64>()
}

/// Fits one level on a prepared design.
pub fn fit_layer_on(design: &Design, tau: f64, cfg: &RegressionConfig) -> Result<LayerFit> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(QrmError::InvalidLevels(format!("{tau} outside (0, 1)")));
    }
    cfg.validate()?;
    let n = design.rows();
    let d = design.dim();
    let step0 = cfg.learning_rate * design.target_scale();
    let decay_horizon = (cfg.max_iterations as f64 / 8.0).max(1.0);

    let mut w = vec![0.0; d];
    let mut b = empirical_quantile(&design.y, tau);
    let mut residuals = vec![0.0; n];
    let initial_loss = objective(design, &w, b, tau, cfg.l1_strength, &mut residuals);

    let mut best = (w.clone(), b, initial_loss);
    let mut history = Vec::with_capacity(cfg.max_iterations + 1);
    history.push(initial_loss);
    let mut converged = false;
    let mut iterations = 0;
    let mut grad_w = vec![0.0; d];

    while iterations < cfg.max_iterations {
        // Subgradient of the mean pinball loss; residuals hold y - prediction.
        grad_w.iter_mut().for_each(|g| *g = 0.0);
        let mut grad_b = 0.0;
        for (i, &r) in residuals.iter().enumerate() {
            let s = if r > 0.0 {
                -tau
            } else if r < 0.0 {
                1.0 - tau
            } else {
                0.0
            };
            if s != 0.0 {
                grad_b += s;
                for (g, x) in grad_w.iter_mut().zip(design.row(i)) {
                    *g += s * x;
                }
            }
        }
        let inv_n = 1.0 / n as f64;
        let step = step0 / (1.0 + iterations as f64 / decay_horizon).sqrt();
        for (wj, gj) in w.iter_mut().zip(&grad_w) {
            *wj = soft_threshold(*wj - step * gj * inv_n, step * cfg.l1_strength);
        }
        b -= step * grad_b * inv_n;
        iterations += 1;

        let current = objective(design, &w, b, tau, cfg.l1_strength, &mut residuals);
        if !current.is_finite() {
            return Err(QrmError::Diverged(format!(
                "pinball objective at tau {tau}"
            )));
        }
        if current < best.2 {
            best = (w.clone(), b, current);
        }
        history.push(best.2);
        if iterations >= cfg.patience {
            let past = history[iterations - cfg.patience];
            if past - best.2 < cfg.convergence_tolerance {
                converged = true;
                break;
            }
        }
    }
    if !converged {
        log::warn!(
            "quantile layer tau={tau} hit max_iterations={} before converging",
            cfg.max_iterations
        );
    }
    let (weights, bias, final_loss) = best;
    Ok(LayerFit {
        layer: QuantileLayer {
            level: tau,
            weights,
            bias,
        },
        standardizer: design.standardizer.clone(),
        diagnostics: LayerDiagnostics {
            level: tau,
            iterations,
            final_loss,
            initial_loss,
            converged,
        },
    })
}

fn cap_rows<'a>(data: &'a [AttributeExample], cfg: &RegressionConfig) -> Vec<&'a AttributeExample> {
    match cfg.max_rows_per_attribute {
        Some(cap) if data.len() > cap => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut idx = sample(&mut rng, data.len(), cap).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| &data[i]).collect()
        }
        _ => data.iter().collect(),
    }
}

/// Fits a single quantile level on rows of one attribute.
pub fn fit_quantile_layer(
    data: &[AttributeExample],
    tau: f64,
    cfg: &RegressionConfig,
) -> Result<LayerFit> {
    let design = Design::new(&cap_rows(data, cfg))?;
    fit_layer_on(&design, tau, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMetadata {
    pub l1_strength: f64,
    pub rows: usize,
    pub layers: Vec<LayerDiagnostics>,
}

/// Subtracts a scaled copy of another attribute's quantiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecorrelationAdjustment {
    pub penalty_attribute: usize,
    pub coefficient: f64,
    pub penalty_model: Box<AttributeQuantileModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeQuantileModel {
    pub attribute: usize,
    pub levels: QuantileLevels,
    pub standardizer: Standardizer,
    pub layers: Vec<QuantileLayer>,
    pub metadata: FitMetadata,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjustment: Option<DecorrelationAdjustment>,
}

impl AttributeQuantileModel {
    pub fn feature_dim(&self) -> usize {
        self.standardizer.dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.len() != self.levels.len() {
            return Err(QrmError::DimensionMismatch {
                expected: self.levels.len(),
                actual: self.layers.len(),
            });
        }
        for (layer, tau) in self.layers.iter().zip(self.levels.iter()) {
            if (layer.level - tau).abs() > 1e-12 {
                return Err(QrmError::InvalidLevels(format!(
                    "layer level {} does not match {tau}",
                    layer.level
                )));
            }
            if layer.weights.len() != self.feature_dim() {
                return Err(QrmError::DimensionMismatch {
                    expected: self.feature_dim(),
                    actual: layer.weights.len(),
                });
            }
            check_finite(&layer.weights)?;
            check_finite(&[layer.bias])?;
        }
        if let Some(adj) = &self.adjustment {
            if adj.penalty_model.levels != self.levels {
                return Err(QrmError::LevelMismatch);
            }
            adj.penalty_model.validate()?;
        }
        Ok(())
    }

    /// Layer outputs before rearrangement and adjustment.
    pub fn predict_raw(&self, features: &[f64]) -> Result<Vec<f64>> {
        let z = self.standardizer.apply(features)?;
        Ok(self.layers.iter().map(|l| l.eval(&z)).collect())
    }

    pub fn predict_distribution(&self, features: &[f64]) -> Result<QuantileDistribution> {
        let base = QuantileDistribution::new(self.levels.clone(), self.predict_raw(features)?)?;
        match &self.adjustment {
            None => Ok(base),
            Some(adj) => {
                let pen = adj.penalty_model.predict_distribution(features)?;
                let values = base
                    .values()
                    .iter()
                    .zip(pen.values())
                    .map(|(q, p)| q - adj.coefficient * p)
                    .collect();
                QuantileDistribution::new(self.levels.clone(), values)
            }
        }
    }
}

/// Groups rows by attribute id.
pub fn split_by_attribute(data: &[AttributeExample]) -> BTreeMap<usize, Vec<AttributeExample>> {
    let mut out: BTreeMap<usize, Vec<AttributeExample>> = BTreeMap::new();
    for row in data {
        out.entry(row.attribute).or_default().push(row.clone());
    }
    out
}

/// Fits one layer per level, independently and in parallel.
pub fn fit_attribute_model(
    data: &[AttributeExample],
    levels: &QuantileLevels,
    cfg: &RegressionConfig,
) -> Result<AttributeQuantileModel> {
    cfg.validate()?;
    let rows = cap_rows(data, cfg);
    let design = Design::new(&rows)?;
    let fits = levels
        .as_slice()
        .par_iter()
        .map(|&tau| fit_layer_on(&design, tau, cfg))
        .collect::<Result<Vec<_>>>()?;
    let (layers, diagnostics) = fits.into_iter().map(|f| (f.layer, f.diagnostics)).unzip();
    Ok(AttributeQuantileModel {
        attribute: rows[0].attribute,
        levels: levels.clone(),
        standardizer: design.standardizer,
        layers,
        metadata: FitMetadata {
            l1_strength: cfg.l1_strength,
            rows: rows.len(),
            layers: diagnostics,
        },
        adjustment: None,
    })
}

/// Fits every attribute present in `data`, ordered by attribute id.
///
/// Attribute ids must be contiguous from 0.
pub fn fit_all_attributes(
    data: &[AttributeExample],
    levels: &QuantileLevels,
    cfg: &RegressionConfig,
) -> Result<Vec<AttributeQuantileModel>> {
    let groups = split_by_attribute(data);
    if groups.is_empty() {
        return Err(QrmError::EmptyInput("no training rows".into()));
    }
    for (expected, &id) in groups.keys().enumerate() {
        if id != expected {
            return Err(QrmError::EmptyInput(format!(
                "no rows for attribute {expected}"
            )));
        }
    }
    groups
        .values()
        .map(|rows| fit_attribute_model(rows, levels, cfg))
        .collect()
}

/// Least-squares linear predictor for one attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointBaseline {
    pub attribute: usize,
    pub standardizer: Standardizer,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl PointBaseline {
    pub fn predict(&self, features: &[f64]) -> Result<f64> {
        let z = self.standardizer.apply(features)?;
        Ok(self.bias + self.weights.iter().zip(&z).map(|(w, x)| w * x).sum::<f64>())
    }
}

fn fit_least_squares(rows: &[&AttributeExample]) -> Result<PointBaseline> {
    let design = Design::new(rows)?;
    let n = design.rows();
    let d = design.dim();
    let mean_y = design.y.iter().sum::<f64>() / n as f64;
    let weights = if d == 0 {
        Vec::new()
    } else {
        // Standardized columns are centered, so the intercept is the target mean.
        let x = DMatrix::from_row_slice(n, d, &design.x);
        let yc = DVector::from_iterator(n, design.y.iter().map(|y| y - mean_y));
        let gram = x.transpose() * &x;
        let rhs = x.transpose() * yc;
        match gram.clone().cholesky() {
            Some(ch) => ch.solve(&rhs).iter().copied().collect(),
            None => gram
                .svd(true, true)
                .solve(&rhs, 1e-12)
                .map_err(|e| QrmError::Diverged(format!("least squares: {e}")))?
                .iter()
                .copied()
                .collect(),
        }
    };
    Ok(PointBaseline {
        attribute: rows[0].attribute,
        standardizer: design.standardizer,
        weights,
        bias: mean_y,
    })
}

/// Squared-error multi-attribute baseline: one least-squares fit per attribute.
pub fn fit_point_baseline(
    data: &[AttributeExample],
    cfg: &RegressionConfig,
) -> Result<Vec<PointBaseline>> {
    let groups = split_by_attribute(data);
    if groups.is_empty() {
        return Err(QrmError::EmptyInput("no training rows".into()));
    }
    groups
        .values()
        .map(|rows| fit_least_squares(&cap_rows(rows, cfg)))
        .collect()
}

/// `c_m = cov(mean_m, mean_pen) / var(mean_pen)` over predicted expectations
/// on `features`. The penalty attribute itself gets 0.
pub fn decorrelation_coefficients(
    models: &[AttributeQuantileModel],
    penalty_attribute: usize,
    features: &[Vec<f64>],
) -> Result<Vec<f64>> {
    if penalty_attribute >= models.len() {
        return Err(QrmError::AttributeOutOfRange(penalty_attribute));
    }
    if features.len() < 2 {
        return Err(QrmError::EmptyInput(
            "need at least two feature rows".into(),
        ));
    }
    let means = |m: &AttributeQuantileModel| -> Result<Vec<f64>> {
        features
            .iter()
            .map(|x| Ok(m.predict_distribution(x)?.expectation()))
            .collect()
    };
    let pen = means(&models[penalty_attribute])?;
    let pen_mean = pen.iter().sum::<f64>() / pen.len() as f64;
    let var: f64 = pen.iter().map(|p| (p - pen_mean).powi(2)).sum();
    models
        .iter()
        .enumerate()
        .map(|(m, model)| {
            if m == penalty_attribute || var <= 1e-300 {
                return Ok(0.0);
            }
            let s = means(model)?;
            let s_mean = s.iter().sum::<f64>() / s.len() as f64;
            let cov: f64 = s
                .iter()
                .zip(&pen)
                .map(|(a, p)| (a - s_mean) * (p - pen_mean))
                .sum();
            Ok(cov / var)
        })
        .collect()
}

/// Returns models whose quantiles are `Q_m - c_m * Q_pen`, re-sorted.
///
/// The penalty attribute's own model is returned unchanged.
pub fn apply_decorrelation_penalty(
    models: &[AttributeQuantileModel],
    penalty_attribute: usize,
    coefficients: &[f64],
) -> Result<Vec<AttributeQuantileModel>> {
    if penalty_attribute >= models.len() {
        return Err(QrmError::AttributeOutOfRange(penalty_attribute));
    }
    if coefficients.len() != models.len() {
        return Err(QrmError::DimensionMismatch {
            expected: models.len(),
            actual: coefficients.len(),
        });
    }
    check_finite(coefficients)?;
    let penalty = &models[penalty_attribute];
    models
        .iter()
        .zip(coefficients)
        .enumerate()
        .map(|(m, (model, &c))| {
            if m == penalty_attribute || c == 0.0 {
                return Ok(model.clone());
            }
            if model.levels != penalty.levels {
                return Err(QrmError::LevelMismatch);
            }
            let mut adjusted = model.clone();
            adjusted.adjustment = Some(DecorrelationAdjustment {
                penalty_attribute,
                coefficient: c,
                penalty_model: Box::new(penalty.clone()),
            });
            Ok(adjusted)
        })
        .collect()
}
