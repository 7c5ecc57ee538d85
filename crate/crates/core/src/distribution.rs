//! Quantile-represented reward distributions.
//!
//! A [`QuantileDistribution`] stores the values of a quantile function at a
//! fixed set of levels. Values are kept sorted, so crossing quantiles coming
//! out of independently fitted regressors are repaired on construction.

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, QrmError, Result};

/// Largest magnitude passed to `exp` by [`QuantileDistribution::risk_utility`].
pub const EXP_ARG_LIMIT: f64 = 700.0;

const WEIGHT_SUM_TOL: f64 = 1e-9;

/// Strictly increasing probabilities in the open unit interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct QuantileLevels(Vec<f64>);

impl QuantileLevels {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(QrmError::InvalidLevels(
                "at least one level required".into(),
            ));
        }
        check_finite(&levels)?;
        if let Some(bad) = levels.iter().find(|&&t| t <= 0.0 || t >= 1.0) {
            return Err(QrmError::InvalidLevels(format!("{bad} outside (0, 1)")));
        }
        if levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(QrmError::InvalidLevels(
                "levels must be strictly increasing".into(),
            ));
        }
        Ok(Self(levels))
    }

    /// `k` levels at `i / (k + 1)` for `i = 1..=k`.
    pub fn evenly_spaced(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(QrmError::InvalidLevels(
                "at least one level required".into(),
            ));
        }
        let denom = (k + 1) as f64;
        Self::new((1..=k).map(|i| i as f64 / denom).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.0.iter().copied()
    }
}

/// 0.05, 0.10, ..., 0.95.
impl Default for QuantileLevels {
    fn default() -> Self {
        Self::evenly_spaced(19).expect("19 evenly spaced levels are valid")
    }
}

impl TryFrom<Vec<f64>> for QuantileLevels {
    type Error = QrmError;

    fn try_from(levels: Vec<f64>) -> Result<Self> {
        Self::new(levels)
    }
}

impl From<QuantileLevels> for Vec<f64> {
    fn from(levels: QuantileLevels) -> Self {
        levels.0
    }
}

/// Sorts raw quantile estimates ascending, rejecting non-finite input.
pub fn rearrange_monotone(raw_values: &[f64]) -> Result<Vec<f64>> {
    check_finite(raw_values)?;
    let mut values = raw_values.to_vec();
    values.sort_by(f64::total_cmp);
    Ok(values)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawDistribution {
    levels: QuantileLevels,
    values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDistribution")]
pub struct QuantileDistribution {
    levels: QuantileLevels,
    values: Vec<f64>,
}

impl TryFrom<RawDistribution> for QuantileDistribution {
    type Error = QrmError;

    fn try_from(raw: RawDistribution) -> Result<Self> {
        Self::new(raw.levels, raw.values)
    }
}

impl QuantileDistribution {
    /// Builds a distribution, sorting `values` if they cross.
    pub fn new(levels: QuantileLevels, values: Vec<f64>) -> Result<Self> {
        if values.len() != levels.len() {
            return Err(QrmError::DimensionMismatch {
                expected: levels.len(),
                actual: values.len(),
            });
        }
        let values = rearrange_monotone(&values)?;
        Ok(Self { levels, values })
    }

    /// Point mass at `value` on every level.
    pub fn constant(levels: QuantileLevels, value: f64) -> Result<Self> {
        let k = levels.len();
        Self::new(levels, vec![value; k])
    }

    pub fn levels(&self) -> &QuantileLevels {
        &self.levels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Equal-weight average of the quantile values.
    pub fn expectation(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Average of `-exp(-lambda * q)` over the quantile values.
    ///
    /// Exponent arguments are clamped to `±EXP_ARG_LIMIT` so the result stays
    /// finite; a warning is logged when that happens.
    pub fn risk_utility(&self, cfg: &UtilityConfig) -> f64 {
        let lambda = cfg.lambda();
        let mut clamped = false;
        let total: f64 = self
            .values
            .iter()
            .map(|&v| {
                let arg = -lambda * v;
                let safe = arg.clamp(-EXP_ARG_LIMIT, EXP_ARG_LIMIT);
                clamped |= safe != arg;
                -safe.exp()
            })
            .sum();
        if clamped {
            log::warn!(
                "risk_utility: exponent argument clamped to ±{EXP_ARG_LIMIT} (lambda = {lambda})"
            );
        }
        total / self.values.len() as f64
    }

    /// Mean of the values whose level is at most `tau_max`.
    pub fn tail_mean(&self, tau_max: f64) -> Result<f64> {
        let (sum, count) = self
            .levels
            .iter()
            .zip(&self.values)
            .filter(|(tau, _)| *tau <= tau_max)
            .fold((0.0, 0usize), |(s, c), (_, v)| (s + v, c + 1));
        if count == 0 {
            return Err(QrmError::InvalidLevels(format!(
                "no level at or below {tau_max}"
            )));
        }
        Ok(sum / count as f64)
    }

    /// Value at the level equal to `tau` (within 1e-9), if present.
    pub fn value_at(&self, tau: f64) -> Option<f64> {
        self.levels
            .iter()
            .position(|t| (t - tau).abs() < 1e-9)
            .map(|i| self.values[i])
    }

    /// Adds `offset` to every quantile value.
    pub fn shifted(&self, offset: f64) -> Result<Self> {
        Self::new(
            self.levels.clone(),
            self.values.iter().map(|v| v + offset).collect(),
        )
    }
}

/// Nonnegative weights on the simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct MixtureWeights(Vec<f64>);

impl MixtureWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(QrmError::InvalidWeights(
                "at least one weight required".into(),
            ));
        }
        check_finite(&weights)?;
        if let Some(w) = weights.iter().find(|&&w| w < 0.0) {
            return Err(QrmError::InvalidWeights(format!("negative weight {w}")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(QrmError::InvalidWeights(format!("weights sum to {sum}")));
        }
        Ok(Self(weights))
    }

    pub fn uniform(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(QrmError::InvalidWeights(
                "at least one weight required".into(),
            ));
        }
        Self::new(vec![1.0 / m as f64; m])
    }

    pub fn one_hot(m: usize, index: usize) -> Result<Self> {
        if index >= m {
            return Err(QrmError::AttributeOutOfRange(index));
        }
        let mut w = vec![0.0; m];
        w[index] = 1.0;
        Self::new(w)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for MixtureWeights {
    type Error = QrmError;

    fn try_from(w: Vec<f64>) -> Result<Self> {
        Self::new(w)
    }
}

impl From<MixtureWeights> for Vec<f64> {
    fn from(w: MixtureWeights) -> Self {
        w.0
    }
}

/// Risk-aversion strength for the exponential utility.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct UtilityConfig {
    lambda: f64,
}

impl UtilityConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(QrmError::InvalidConfig(format!(
                "utility lambda must be positive, got {lambda}"
            )));
        }
        Ok(Self { lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

impl TryFrom<f64> for UtilityConfig {
    type Error = QrmError;

    fn try_from(lambda: f64) -> Result<Self> {
        Self::new(lambda)
    }
}

impl From<UtilityConfig> for f64 {
    fn from(cfg: UtilityConfig) -> Self {
        cfg.lambda
    }
}

/// Weighted sum of quantile values, level by level.
pub fn mix(
    distributions: &[QuantileDistribution],
    weights: &MixtureWeights,
) -> Result<QuantileDistribution> {
    let first = distributions
        .first()
        .ok_or_else(|| QrmError::EmptyInput("no distributions to mix".into()))?;
    if weights.len() != distributions.len() {
        return Err(QrmError::DimensionMismatch {
            expected: distributions.len(),
            actual: weights.len(),
        });
    }
    if distributions.iter().any(|d| d.levels != first.levels) {
        return Err(QrmError::LevelMismatch);
    }
    let mut values = vec![0.0; first.levels.len()];
    for (d, &g) in distributions.iter().zip(weights.as_slice()) {
        for (acc, v) in values.iter_mut().zip(&d.values) {
            *acc += g * v;
        }
    }
    QuantileDistribution::new(first.levels.clone(), values)
}
