//! Pairwise accuracy, quantile coverage and the bimodal-capture comparison
//! against a point-estimate baseline.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::distribution::QuantileLevels;
use crate::error::{QrmError, Result};
use crate::gating::{PreferencePair, QuantileRewardModel};
use crate::quantile_regression::{AttributeExample, AttributeQuantileModel, PointBaseline};
use crate::synthetic::GroundTruth;

/// Fraction of pairs where `score` ranks the chosen response higher. Exact
/// ties earn half credit.
pub fn pairwise_accuracy_with<F>(prefs: &[PreferencePair], mut score: F) -> Result<f64>
where
    F: FnMut(&[f64], &[f64]) -> Result<f64>,
{
    if prefs.is_empty() {
        return Err(QrmError::EmptyInput(
            "no preference pairs to evaluate".into(),
        ));
    }
    let mut credit = 0.0;
    for p in prefs {
        let c = score(&p.prompt_features, &p.chosen_features)?;
        let r = score(&p.prompt_features, &p.rejected_features)?;
        if c > r {
            credit += 1.0;
        } else if c == r {
            credit += 0.5;
        }
    }
    Ok(credit / prefs.len() as f64)
}

/// Ranks by the expectation of the mixture distribution.
pub fn pairwise_accuracy(model: &QuantileRewardModel, prefs: &[PreferencePair]) -> Result<f64> {
    pairwise_accuracy_with(prefs, |prompt, response| {
        Ok(model.reward(prompt, response)?.1)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub attribute: usize,
    pub level: f64,
    pub rows: usize,
    /// Fraction of held-out scores strictly below the predicted quantile.
    pub empirical: f64,
    pub deviation: f64,
}

/// Coverage of arbitrary quantile predictions. `predict(attribute, x)`
/// returns one value per level.
pub fn coverage_with<F>(
    holdout: &[AttributeExample],
    attributes: &[usize],
    levels: &QuantileLevels,
    mut predict: F,
) -> Result<Vec<CoverageRow>>
where
    F: FnMut(usize, &[f64]) -> Result<Vec<f64>>,
{
    let mut out = Vec::new();
    for &attribute in attributes {
        let rows: Vec<&AttributeExample> = holdout
            .iter()
            .filter(|r| r.attribute == attribute)
            .collect();
        if rows.is_empty() {
            return Err(QrmError::EmptyInput(format!(
                "no held-out rows for attribute {attribute}"
            )));
        }
        let mut below = vec![0usize; levels.len()];
        for r in &rows {
            let q = predict(attribute, &r.features)?;
            if q.len() != levels.len() {
                return Err(QrmError::DimensionMismatch {
                    expected: levels.len(),
                    actual: q.len(),
                });
            }
            for (b, qv) in below.iter_mut().zip(&q) {
                if r.score < *qv {
                    *b += 1;
                }
            }
        }
        for (tau, b) in levels.iter().zip(below) {
            let empirical = b as f64 / rows.len() as f64;
            out.push(CoverageRow {
                attribute,
                level: tau,
                rows: rows.len(),
                empirical,
                deviation: (empirical - tau).abs(),
            });
        }
    }
    Ok(out)
}

pub fn coverage_report(
    models: &[AttributeQuantileModel],
    holdout: &[AttributeExample],
) -> Result<Vec<CoverageRow>> {
    let first = models
        .first()
        .ok_or_else(|| QrmError::EmptyInput("no attribute models".into()))?;
    let by_attr: BTreeMap<usize, &AttributeQuantileModel> =
        models.iter().map(|m| (m.attribute, m)).collect();
    let attributes: Vec<usize> = by_attr.keys().copied().collect();
    coverage_with(holdout, &attributes, &first.levels, |a, x| {
        let m = by_attr[&a];
        if m.levels != first.levels {
            return Err(QrmError::LevelMismatch);
        }
        Ok(m.predict_distribution(x)?.values().to_vec())
    })
}

pub fn max_deviation(rows: &[CoverageRow]) -> f64 {
    rows.iter().map(|r| r.deviation).fold(0.0, f64::max)
}

/// One probe of the point-vs-distribution comparison on a two-group attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BimodalRow {
    pub attribute: usize,
    pub probe: usize,
    pub low_mode: f64,
    pub high_mode: f64,
    pub true_mean: f64,
    pub baseline: f64,
    pub q25: f64,
    pub q75: f64,
    pub baseline_ok: bool,
    pub q25_ok: bool,
    pub q75_ok: bool,
}

impl BimodalRow {
    pub fn passed(&self) -> bool {
        self.baseline_ok && self.q25_ok && self.q75_ok
    }
}

/// Compares the point baseline and the lower/upper quartiles against the
/// ground-truth group means at every probe. Every attribute of `truth` must
/// have exactly two annotator groups.
pub fn bimodal_capture_report(
    models: &[AttributeQuantileModel],
    baselines: &[PointBaseline],
    truth: &GroundTruth,
    probes: &[Vec<f64>],
    tolerance: f64,
) -> Result<Vec<BimodalRow>> {
    for (i, a) in truth.spec.attributes.iter().enumerate() {
        if a.groups.len() != 2 {
            return Err(QrmError::InvalidConfig(format!(
                "attribute {i} has {} annotator groups; bimodal capture needs exactly 2",
                a.groups.len()
            )));
        }
    }
    if probes.is_empty() {
        return Err(QrmError::EmptyInput("no probes".into()));
    }
    let mut out = Vec::new();
    for model in models {
        let a = model.attribute;
        if a >= truth.spec.num_attributes() {
            return Err(QrmError::AttributeOutOfRange(a));
        }
        let baseline = baselines
            .iter()
            .find(|b| b.attribute == a)
            .ok_or(QrmError::AttributeOutOfRange(a))?;
        for (probe, x) in probes.iter().enumerate() {
            let d = model.predict_distribution(x)?;
            let q25 = d
                .value_at(0.25)
                .ok_or_else(|| QrmError::InvalidLevels("model has no 0.25 level".into()))?;
            let q75 = d
                .value_at(0.75)
                .ok_or_else(|| QrmError::InvalidLevels("model has no 0.75 level".into()))?;
            let modes = truth.modes(a, x);
            let (low_mode, high_mode) = (modes[0].clamp(0.0, 1.0), modes[1].clamp(0.0, 1.0));
            let true_mean = truth.mean(a, x);
            let point = baseline.predict(x)?;
            out.push(BimodalRow {
                attribute: a,
                probe,
                low_mode,
                high_mode,
                true_mean,
                baseline: point,
                q25,
                q75,
                baseline_ok: (point - true_mean).abs() <= tolerance,
                q25_ok: (q25 - low_mode).abs() <= tolerance,
                q75_ok: (q75 - high_mode).abs() <= tolerance,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalThresholds {
    #[serde(default)]
    pub min_pairwise_accuracy: Option<f64>,
    #[serde(default)]
    pub max_coverage_deviation: Option<f64>,
    #[serde(default)]
    pub require_bimodal_capture: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub seeds: Vec<u64>,
    /// File name to hex SHA-256.
    pub dataset_hashes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pairwise_accuracy: Option<f64>,
    pub bayes_accuracy: Option<f64>,
    pub coverage: Vec<CoverageRow>,
    pub max_coverage_deviation: Option<f64>,
    pub bimodal: Vec<BimodalRow>,
    pub metadata: ReportMetadata,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        if let Some(a) = self.pairwise_accuracy {
            if !(0.0..=1.0).contains(&a) {
                return Err(QrmError::InvalidConfig(format!(
                    "accuracy {a} outside [0, 1]"
                )));
            }
        }
        if self.coverage.iter().any(|r| !r.deviation.is_finite()) {
            return Err(QrmError::InvalidConfig(
                "non-finite coverage deviation".into(),
            ));
        }
        Ok(())
    }

    pub fn set_coverage(&mut self, rows: Vec<CoverageRow>) {
        self.max_coverage_deviation = (!rows.is_empty()).then(|| max_deviation(&rows));
        self.coverage = rows;
    }

    /// Human-readable descriptions of every failed threshold.
    pub fn failures(&self, t: &EvalThresholds) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(min) = t.min_pairwise_accuracy {
            match self.pairwise_accuracy {
                Some(a) if a >= min => {}
                Some(a) => out.push(format!("pairwise accuracy {a:.4} below {min}")),
                None => {
                    out.push("pairwise accuracy threshold set but no preferences evaluated".into())
                }
            }
        }
        if let Some(max) = t.max_coverage_deviation {
            match self.max_coverage_deviation {
                Some(d) if d < max => {}
                Some(d) => out.push(format!("coverage deviation {d:.4} not below {max}")),
                None => out.push("coverage threshold set but no holdout evaluated".into()),
            }
        }
        if t.require_bimodal_capture {
            if self.bimodal.is_empty() {
                out.push("bimodal capture required but not evaluated".into());
            }
            let failed = self.bimodal.iter().filter(|r| !r.passed()).count();
            if failed > 0 {
                out.push(format!(
                    "{failed} of {} bimodal probes outside tolerance",
                    self.bimodal.len()
                ));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantile_regression::{fit_all_attributes, fit_point_baseline, RegressionConfig};
    use crate::synthetic::{sample_attribute_dataset, sample_feature_rows, PopulationSpec};

    fn pair(c: f64, r: f64) -> PreferencePair {
        PreferencePair {
            prompt_features: vec![],
            chosen_features: vec![c],
            rejected_features: vec![r],
        }
    }

    #[test]
    fn accuracy_ties_shift_and_inversion() {
        let prefs = vec![
            pair(1.0, 0.0),
            pair(0.0, 1.0),
            pair(2.0, 1.0),
            pair(0.5, 0.5),
        ];
        let acc = pairwise_accuracy_with(&prefs, |_, x| Ok(x[0])).unwrap();
        assert_eq!(acc, 2.5 / 4.0);
        let shifted = pairwise_accuracy_with(&prefs, |_, x| Ok(x[0] + 1e3)).unwrap();
        assert_eq!(shifted, acc);
        let inverted = pairwise_accuracy_with(&prefs, |_, x| Ok(-x[0])).unwrap();
        assert_eq!(inverted, 1.0 - acc);
        let constant = pairwise_accuracy_with(&prefs, |_, _| Ok(0.3)).unwrap();
        assert_eq!(constant, 0.5);
        assert!(pairwise_accuracy_with(&[], |_, _| Ok(0.0)).is_err());
    }

    fn holdout(n: usize, seed: u64) -> (Vec<AttributeExample>, GroundTruth) {
        sample_attribute_dataset(&PopulationSpec::bimodal(0.2, 0.8, 0.05), n, seed).unwrap()
    }

    #[test]
    fn infinite_predictors_give_exact_deviations() {
        let (rows, _) = holdout(200, 1);
        let levels = QuantileLevels::default();
        let up = coverage_with(&rows, &[0], &levels, |_, _| Ok(vec![f64::INFINITY; 19])).unwrap();
        for r in &up {
            assert!((r.deviation - (1.0 - r.level)).abs() < 1e-15);
        }
        let down =
            coverage_with(&rows, &[0], &levels, |_, _| Ok(vec![f64::NEG_INFINITY; 19])).unwrap();
        for r in &down {
            assert!((r.deviation - r.level).abs() < 1e-15);
        }
        assert!(coverage_with(&rows, &[0, 1], &levels, |_, _| Ok(vec![0.0; 19])).is_err());
    }

    fn oracle_deviation(n: usize, seed: u64) -> f64 {
        let (rows, truth) = holdout(n, seed);
        let levels = QuantileLevels::default();
        let cov = coverage_with(&rows, &[0], &levels, |a, x| {
            Ok(levels.iter().map(|t| truth.quantile(a, x, t)).collect())
        })
        .unwrap();
        max_deviation(&cov)
    }

    #[test]
    fn oracle_quantiles_are_calibrated() {
        assert!(oracle_deviation(5000, 3) < 0.02);
    }

    #[test]
    fn deviation_shrinks_with_holdout_size() {
        let mean = |n| (0..10).map(|s| oracle_deviation(n, 100 + s)).sum::<f64>() / 10.0;
        assert!(mean(5000) < mean(500));
    }

    #[test]
    fn thresholds() {
        let mut report = EvalReport {
            pairwise_accuracy: Some(0.8),
            ..Default::default()
        };
        report.set_coverage(vec![CoverageRow {
            attribute: 0,
            level: 0.5,
            rows: 10,
            empirical: 0.6,
            deviation: 0.1,
        }]);
        report.validate().unwrap();
        let ok = EvalThresholds {
            min_pairwise_accuracy: Some(0.7),
            max_coverage_deviation: Some(0.2),
            require_bimodal_capture: false,
        };
        assert!(report.failures(&ok).is_empty());
        let strict = EvalThresholds {
            min_pairwise_accuracy: Some(0.9),
            max_coverage_deviation: Some(0.05),
            require_bimodal_capture: true,
        };
        assert_eq!(report.failures(&strict).len(), 3);
    }

    #[test]
    fn bimodal_rows_csv_round_trip() {
        let rows = vec![BimodalRow {
            attribute: 0,
            probe: 3,
            low_mode: 0.2,
            high_mode: 0.8,
            true_mean: 0.5,
            baseline: 0.4999999999999999,
            q25: 0.21,
            q75: 0.79,
            baseline_ok: true,
            q25_ok: true,
            q75_ok: true,
        }];
        let bytes = crate::io::to_csv(&rows).unwrap();
        let mut r = csv::Reader::from_reader(bytes.as_slice());
        let back: Vec<BimodalRow> = r
            .deserialize()
            .collect::<std::result::Result<_, _>>()
            .unwrap();
        assert_eq!(back, rows);
    }

    fn capture_rows(spec: PopulationSpec, seed: u64) -> Vec<BimodalRow> {
        let (rows, _) = sample_attribute_dataset(&spec, 3000, seed).unwrap();
        let cfg = RegressionConfig::default();
        let models = fit_all_attributes(&rows, &QuantileLevels::default(), &cfg).unwrap();
        let baselines = fit_point_baseline(&rows, &cfg).unwrap();
        let probes = sample_feature_rows(&spec, 50, seed + 1);
        bimodal_capture_report(&models, &baselines, &GroundTruth::new(spec), &probes, 0.05).unwrap()
    }

    #[test]
    fn bimodal_capture_separates_modes() {
        let rows = capture_rows(PopulationSpec::bimodal(0.2, 0.8, 0.02), 21);
        assert!(rows.iter().all(BimodalRow::passed));
        assert!(rows.iter().all(|r| (r.baseline - 0.5).abs() < 0.05));
    }

    #[test]
    fn coincident_groups_make_everything_agree() {
        let rows = capture_rows(PopulationSpec::bimodal(0.5, 0.5, 0.02), 22);
        for r in &rows {
            assert!(r.passed());
            assert!((r.q25 - r.baseline).abs() < 0.05 && (r.q75 - r.baseline).abs() < 0.05);
        }
    }

    #[test]
    fn capture_needs_two_groups() {
        let spec = PopulationSpec::independent_attributes(2, 2, 0.1, 0.05);
        let (rows, _) = sample_attribute_dataset(&spec, 200, 1).unwrap();
        let cfg = RegressionConfig::default();
        let models = fit_all_attributes(&rows, &QuantileLevels::default(), &cfg).unwrap();
        let baselines = fit_point_baseline(&rows, &cfg).unwrap();
        let probes = vec![rows[0].features.clone()];
        let err =
            bimodal_capture_report(&models, &baselines, &GroundTruth::new(spec), &probes, 0.05);
        assert!(err.is_err());
    }
}
