//! Synthetic annotator populations with closed-form ground truth.
//!
//! Every attribute is scored by a mixture of annotator groups. A group's
//! score is a linear function of the features plus Gaussian noise, clamped to
//! `[0, 1]`. Conflicting groups produce multimodal score distributions whose
//! quantiles are recovered exactly by inverting the mixture CDF.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::distribution::MixtureWeights;
use crate::error::{QrmError, Result};
use crate::gating::PreferencePair;
use crate::quantile_regression::AttributeExample;

const PROPORTION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorGroup {
    pub proportion: f64,
    pub intercept: f64,
    /// One weight per coordinate of the concatenated prompt+response vector.
    pub weights: Vec<f64>,
    /// Standard deviation of the group's score noise; 0 means deterministic.
    pub noise: f64,
}

impl AnnotatorGroup {
    pub fn mean(&self, features: &[f64]) -> f64 {
        self.intercept
            + self
                .weights
                .iter()
                .zip(features)
                .map(|(w, x)| w * x)
                .sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    pub groups: Vec<AnnotatorGroup>,
}

/// Coordinates listed in `half_normal` are drawn as `|N(0, 1)|`, the rest as
/// `N(0, 1)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureSampler {
    #[serde(default)]
    pub half_normal: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub prompt_dim: usize,
    pub response_dim: usize,
    #[serde(default)]
    pub sampler: FeatureSampler,
    pub attributes: Vec<AttributeSpec>,
}

fn group(proportion: f64, intercept: f64, weights: Vec<f64>, noise: f64) -> AnnotatorGroup {
    AnnotatorGroup {
        proportion,
        intercept,
        weights,
        noise,
    }
}

impl PopulationSpec {
    pub fn feature_dim(&self) -> usize {
        self.prompt_dim + self.response_dim
    }

    pub fn num_attributes(&self) -> usize {
        self.attributes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(QrmError::InvalidConfig(msg));
        if self.attributes.is_empty() {
            return bad("population needs at least one attribute".into());
        }
        let d = self.feature_dim();
        if let Some(&c) = self.sampler.half_normal.iter().find(|&&c| c >= d) {
            return bad(format!("half-normal coordinate {c} out of range"));
        }
        for attr in &self.attributes {
            if attr.groups.is_empty() {
                return bad(format!("attribute {} has no annotator groups", attr.name));
            }
            let total: f64 = attr.groups.iter().map(|g| g.proportion).sum();
            if (total - 1.0).abs() > PROPORTION_TOL {
                return bad(format!("group proportions of {} sum to {total}", attr.name));
            }
            for g in &attr.groups {
                if g.weights.len() != d {
                    return Err(QrmError::DimensionMismatch {
                        expected: d,
                        actual: g.weights.len(),
                    });
                }
                let params = g
                    .weights
                    .iter()
                    .chain([&g.intercept, &g.noise, &g.proportion]);
                if params.into_iter().any(|v| !v.is_finite()) {
                    return bad(format!("non-finite parameter in {}", attr.name));
                }
                if g.noise < 0.0 || g.proportion < 0.0 {
                    return bad(format!("negative noise or proportion in {}", attr.name));
                }
            }
        }
        Ok(())
    }

    /// Three attributes over 4 prompt + 4 response coordinates: a unimodal
    /// quality score, a two-group conflict score, and a length-like score
    /// correlated with the first.
    pub fn default_suite() -> Self {
        let w = |v: [f64; 8]| v.to_vec();
        Self {
            prompt_dim: 4,
            response_dim: 4,
            sampler: FeatureSampler::default(),
            attributes: vec![
                AttributeSpec {
                    name: "helpfulness".into(),
                    groups: vec![group(
                        1.0,
                        0.5,
                        w([0.02, 0.0, 0.0, 0.0, 0.08, 0.04, 0.0, 0.0]),
                        0.05,
                    )],
                },
                AttributeSpec {
                    name: "harmlessness".into(),
                    groups: vec![
                        group(
                            0.5,
                            0.3,
                            w([0.0, 0.02, 0.0, 0.0, 0.0, 0.0, 0.06, 0.0]),
                            0.04,
                        ),
                        group(
                            0.5,
                            0.7,
                            w([0.0, 0.02, 0.0, 0.0, 0.0, 0.0, 0.06, 0.0]),
                            0.04,
                        ),
                    ],
                },
                AttributeSpec {
                    name: "verbosity".into(),
                    groups: vec![group(
                        1.0,
                        0.5,
                        w([0.0, 0.0, 0.0, 0.0, 0.05, 0.0, 0.0, 0.07]),
                        0.05,
                    )],
                },
            ],
        }
    }

    /// One attribute with two equally likely annotator groups centered at
    /// `low` and `high`, with a small shared slope on the response block.
    pub fn bimodal(low: f64, high: f64, noise: f64) -> Self {
        let mut weights = vec![0.0; 8];
        weights[4] = 0.01;
        weights[5] = -0.01;
        Self {
            prompt_dim: 4,
            response_dim: 4,
            sampler: FeatureSampler::default(),
            attributes: vec![AttributeSpec {
                name: "conflict".into(),
                groups: vec![
                    group(0.5, low, weights.clone(), noise),
                    group(0.5, high, weights, noise),
                ],
            }],
        }
    }

    /// `m` unimodal attributes, each driven by its own response coordinate.
    pub fn independent_attributes(m: usize, prompt_dim: usize, slope: f64, noise: f64) -> Self {
        let response_dim = m;
        let d = prompt_dim + response_dim;
        let attributes = (0..m)
            .map(|a| {
                let mut weights = vec![0.0; d];
                weights[prompt_dim + a] = slope;
                AttributeSpec {
                    name: format!("attribute_{a}"),
                    groups: vec![group(1.0, 0.5, weights, noise)],
                }
            })
            .collect();
        Self {
            prompt_dim,
            response_dim,
            sampler: FeatureSampler::default(),
            attributes,
        }
    }

    /// Two attributes over 2 prompt + 3 response coordinates. Response
    /// coordinate 0 is quality and coordinate 1 (half-normal) is
    /// controversy: as it grows, the two harmlessness groups split apart.
    pub fn planted_trap() -> Self {
        let d = 5;
        let mut help = vec![0.0; d];
        help[2] = 0.1;
        let mut split_up = vec![0.0; d];
        split_up[3] = 0.2;
        let mut split_down = vec![0.0; d];
        split_down[3] = -0.2;
        Self {
            prompt_dim: 2,
            response_dim: 3,
            sampler: FeatureSampler {
                half_normal: vec![3],
            },
            attributes: vec![
                AttributeSpec {
                    name: "helpfulness".into(),
                    groups: vec![group(1.0, 0.5, help, 0.05)],
                },
                AttributeSpec {
                    name: "harmlessness".into(),
                    groups: vec![
                        group(0.5, 0.55, split_up, 0.04),
                        group(0.5, 0.55, split_down, 0.04),
                    ],
                },
            ],
        }
    }

    fn draw_block<R: Rng>(&self, rng: &mut R, offset: usize, len: usize) -> Vec<f64> {
        (offset..offset + len)
            .map(|c| {
                let z: f64 = StandardNormal.sample(rng);
                if self.sampler.half_normal.contains(&c) {
                    z.abs()
                } else {
                    z
                }
            })
            .collect()
    }

    pub fn sample_prompt<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.draw_block(rng, 0, self.prompt_dim)
    }

    pub fn sample_response<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.draw_block(rng, self.prompt_dim, self.response_dim)
    }

    pub fn sample_features<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut x = self.sample_prompt(rng);
        x.extend(self.sample_response(rng));
        x
    }

    /// Draws one annotator's clamped score for `attribute` at `features`.
    pub fn sample_score<R: Rng>(&self, attribute: usize, features: &[f64], rng: &mut R) -> f64 {
        let groups = &self.attributes[attribute].groups;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = &groups[groups.len() - 1];
        for g in groups {
            acc += g.proportion;
            if u < acc {
                chosen = g;
                break;
            }
        }
        let z: f64 = StandardNormal.sample(rng);
        (chosen.mean(features) + chosen.noise * z).clamp(0.0, 1.0)
    }
}

/// Concatenates a prompt block and a response block.
pub fn concat(prompt: &[f64], response: &[f64]) -> Vec<f64> {
    let mut x = prompt.to_vec();
    x.extend_from_slice(response);
    x
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Exact distributional facts about a [`PopulationSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: PopulationSpec,
    #[serde(default)]
    pub g_star: Option<MixtureWeights>,
    #[serde(default)]
    pub bt_noise: Option<f64>,
}

impl GroundTruth {
    pub fn new(spec: PopulationSpec) -> Self {
        Self {
            spec,
            g_star: None,
            bt_noise: None,
        }
    }

    /// `P(score <= y)` for the clamped group mixture.
    pub fn cdf(&self, attribute: usize, features: &[f64], y: f64) -> f64 {
        if y < 0.0 {
            return 0.0;
        }
        if y >= 1.0 {
            return 1.0;
        }
        let n = std_normal();
        self.spec.attributes[attribute]
            .groups
            .iter()
            .map(|g| {
                let mu = g.mean(features);
                let p = if g.noise > 0.0 {
                    n.cdf((y - mu) / g.noise)
                } else if y >= mu {
                    1.0
                } else {
                    0.0
                };
                g.proportion * p
            })
            .sum()
    }

    /// Smallest `y` with `cdf(y) >= tau`, by bisection on `[0, 1]`.
    pub fn quantile(&self, attribute: usize, features: &[f64], tau: f64) -> f64 {
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        if self.cdf(attribute, features, 0.0) >= tau {
            return 0.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.cdf(attribute, features, mid) >= tau {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo < 1e-14 {
                break;
            }
        }
        hi
    }

    /// `E[score]` including the clamp.
    pub fn mean(&self, attribute: usize, features: &[f64]) -> f64 {
        let n = std_normal();
        self.spec.attributes[attribute]
            .groups
            .iter()
            .map(|g| {
                let mu = g.mean(features);
                let m = if g.noise > 0.0 {
                    let a = -mu / g.noise;
                    let b = (1.0 - mu) / g.noise;
                    mu * (n.cdf(b) - n.cdf(a)) + g.noise * (n.pdf(a) - n.pdf(b)) + n.sf(b)
                } else {
                    mu.clamp(0.0, 1.0)
                };
                g.proportion * m
            })
            .sum()
    }

    /// Group means at `features`, ascending.
    pub fn modes(&self, attribute: usize, features: &[f64]) -> Vec<f64> {
        let mut m: Vec<f64> = self.spec.attributes[attribute]
            .groups
            .iter()
            .map(|g| g.mean(features))
            .collect();
        m.sort_by(f64::total_cmp);
        m
    }

    /// `sum_m g_m * E[score_m]`.
    pub fn aggregate(&self, features: &[f64], weights: &MixtureWeights) -> f64 {
        weights
            .as_slice()
            .iter()
            .enumerate()
            .map(|(m, g)| g * self.mean(m, features))
            .sum()
    }
}

/// `n` rows per attribute, interleaved attribute by attribute.
pub fn sample_attribute_dataset(
    spec: &PopulationSpec,
    n: usize,
    seed: u64,
) -> Result<(Vec<AttributeExample>, GroundTruth)> {
    spec.validate()?;
    if n == 0 {
        return Err(QrmError::EmptyInput("n must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n * spec.num_attributes());
    for _ in 0..n {
        for attribute in 0..spec.num_attributes() {
            let features = spec.sample_features(&mut rng);
            let score = spec.sample_score(attribute, &features, &mut rng);
            rows.push(AttributeExample {
                features,
                attribute,
                score,
            });
        }
    }
    Ok((rows, GroundTruth::new(spec.clone())))
}

/// `n` full feature rows (prompt then response), seeded.
pub fn sample_feature_rows(spec: &PopulationSpec, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| spec.sample_features(&mut rng)).collect()
}

/// A preference pair with the true aggregate scores of both responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceSample {
    pub pair: PreferencePair,
    pub chosen_score: f64,
    pub rejected_score: f64,
}

impl PreferenceSample {
    pub fn true_margin(&self) -> f64 {
        self.chosen_score - self.rejected_score
    }
}

/// Probability that the first response is preferred under Bradley-Terry
/// noise; `bt_noise == 0` gives the deterministic ordering.
pub fn preference_probability(margin: f64, bt_noise: f64) -> f64 {
    if bt_noise == 0.0 {
        return if margin > 0.0 {
            1.0
        } else if margin < 0.0 {
            0.0
        } else {
            0.5
        };
    }
    let z = margin / bt_noise;
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Samples prompts, two responses each, and a Bradley-Terry label from the
/// responses' true aggregate scores under `g_star`.
pub fn sample_preference_dataset(
    spec: &PopulationSpec,
    g_star: &MixtureWeights,
    bt_noise: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<PreferenceSample>> {
    spec.validate()?;
    if g_star.len() != spec.num_attributes() {
        return Err(QrmError::DimensionMismatch {
            expected: spec.num_attributes(),
            actual: g_star.len(),
        });
    }
    if !(bt_noise.is_finite() && bt_noise >= 0.0) {
        return Err(QrmError::InvalidConfig(format!(
            "bt_noise must be nonnegative, got {bt_noise}"
        )));
    }
    let truth = GroundTruth::new(spec.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let prompt = spec.sample_prompt(&mut rng);
        let a = concat(&prompt, &spec.sample_response(&mut rng));
        let b = concat(&prompt, &spec.sample_response(&mut rng));
        let sa = truth.aggregate(&a, g_star);
        let sb = truth.aggregate(&b, g_star);
        let u: f64 = rng.random();
        let a_wins = u < preference_probability(sa - sb, bt_noise);
        let ((chosen, cs), (rejected, rs)) = if a_wins {
            ((a, sa), (b, sb))
        } else {
            ((b, sb), (a, sa))
        };
        out.push(PreferenceSample {
            pair: PreferencePair {
                prompt_features: prompt,
                chosen_features: chosen,
                rejected_features: rejected,
            },
            chosen_score: cs,
            rejected_score: rs,
        });
    }
    Ok(out)
}

/// Accuracy of an oracle that always prefers the truly better response.
pub fn bayes_accuracy(samples: &[PreferenceSample], bt_noise: f64) -> f64 {
    samples
        .iter()
        .map(|s| preference_probability(s.true_margin().abs(), bt_noise))
        .sum::<f64>()
        / samples.len() as f64
}

/// Finds the Bradley-Terry noise at which the oracle accuracy equals
/// `target`, using `n` Monte-Carlo response pairs.
pub fn calibrate_bt_noise(
    spec: &PopulationSpec,
    g_star: &MixtureWeights,
    target: f64,
    n: usize,
    seed: u64,
) -> Result<f64> {
    if !(target > 0.5 && target < 1.0) {
        return Err(QrmError::InvalidConfig(format!(
            "target accuracy {target} outside (0.5, 1)"
        )));
    }
    let samples = sample_preference_dataset(spec, g_star, 0.0, n, seed)?;
    let (mut lo, mut hi) = (1e-8f64.ln(), 10.0f64.ln());
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if bayes_accuracy(&samples, mid.exp()) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((0.5 * (lo + hi)).exp())
}
