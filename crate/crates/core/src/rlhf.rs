//! Toy risk-aware RLHF over a finite candidate set per prompt.
//!
//! The policy is a table of logits, one categorical distribution per prompt.
//! Training samples `k` candidates per prompt, scores them with the reward
//! model (expectation or exponential utility of the mixture distribution),
//! and follows the REINFORCE gradient with leave-one-out baselines minus the
//! exact gradient of a KL penalty toward the frozen initial policy.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distribution::{QuantileDistribution, UtilityConfig};
use crate::error::{QrmError, Result};
use crate::gating::QuantileRewardModel;
use crate::optim::{AdamW, AdamWConfig};
use crate::synthetic::{concat, PopulationSpec};

/// Left-tail levels tracked during training.
pub const TAIL_LEVELS: [f64; 5] = [0.05, 0.10, 0.15, 0.20, 0.25];
pub const TAIL_TAU_MAX: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPrompt {
    pub prompt_features: Vec<f64>,
    /// Full prompt+response features of each candidate.
    pub candidates: Vec<Vec<f64>>,
    #[serde(default)]
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyEnvironment {
    pub prompts: Vec<ToyPrompt>,
}

impl ToyEnvironment {
    pub fn new(prompts: Vec<ToyPrompt>) -> Result<Self> {
        let env = Self { prompts };
        env.validate()?;
        Ok(env)
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompts.is_empty() {
            return Err(QrmError::EmptyInput("environment has no prompts".into()));
        }
        for (i, p) in self.prompts.iter().enumerate() {
            if p.candidates.len() < 2 {
                return Err(QrmError::InvalidConfig(format!(
                    "prompt {i} has {} candidates; at least 2 required",
                    p.candidates.len()
                )));
            }
        }
        Ok(())
    }

    /// Prompts drawn from `spec`, each offering three responses built on
    /// [`PopulationSpec::planted_trap`]'s coordinates (quality, controversy,
    /// filler): a `safe` answer, a `trap` with slightly higher quality but
    /// high controversy, and a clearly worse `weak` answer.
    pub fn planted_trap(spec: &PopulationSpec, num_prompts: usize, seed: u64) -> Result<Self> {
        if spec.response_dim < 2 {
            return Err(QrmError::InvalidConfig(
                "planted trap needs two response coordinates".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut prompts = Vec::with_capacity(num_prompts);
        for _ in 0..num_prompts {
            let prompt = spec.sample_prompt(&mut rng);
            let jitter = |rng: &mut ChaCha8Rng| rng.random_range(-0.05..0.05);
            let response = |quality: f64, controversy: f64, rng: &mut ChaCha8Rng| {
                let mut r = vec![0.0; spec.response_dim];
                r[0] = quality + jitter(rng);
                r[1] = (controversy + jitter(rng)).max(0.0);
                concat(&prompt, &r)
            };
            let candidates = vec![
                response(0.0, 0.0, &mut rng),
                response(0.3, 2.0, &mut rng),
                response(-1.5, 0.0, &mut rng),
            ];
            prompts.push(ToyPrompt {
                prompt_features: prompt,
                candidates,
                labels: vec!["safe".into(), "trap".into(), "weak".into()],
            });
        }
        Self::new(prompts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RewardMode {
    RiskNeutral,
    RiskAware { lambda: f64 },
}

impl RewardMode {
    pub fn name(&self) -> &'static str {
        match self {
            RewardMode::RiskNeutral => "risk_neutral",
            RewardMode::RiskAware { .. } => "risk_aware",
        }
    }

    /// Scalar reward of a distribution under this mode.
    pub fn score(&self, d: &QuantileDistribution) -> Result<f64> {
        match *self {
            RewardMode::RiskNeutral => Ok(d.expectation()),
            RewardMode::RiskAware { lambda } => Ok(d.risk_utility(&UtilityConfig::new(lambda)?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlhfConfig {
    pub k: usize,
    pub beta: f64,
    pub reward_mode: RewardMode,
    pub learning_rate: f64,
    /// Prompts sampled per step.
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for RlhfConfig {
    fn default() -> Self {
        Self {
            k: 2,
            beta: 0.05,
            reward_mode: RewardMode::RiskNeutral,
            learning_rate: 0.01,
            batch_size: 8,
            steps: 2000,
            seed: 0,
        }
    }
}

impl RlhfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(QrmError::InvalidConfig(format!(
                "k must be at least 2, got {}",
                self.k
            )));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(QrmError::InvalidConfig("beta must be nonnegative".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(QrmError::InvalidConfig(
                "learning_rate must be positive".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(QrmError::InvalidConfig(
                "batch_size must be positive".into(),
            ));
        }
        if let RewardMode::RiskAware { lambda } = self.reward_mode {
            UtilityConfig::new(lambda)?;
        }
        Ok(())
    }
}

/// Per-prompt logits and a frozen reference copy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySnapshot {
    pub logits: Vec<Vec<f64>>,
    reference_logits: Vec<Vec<f64>>,
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

impl PolicySnapshot {
    /// Reference and policy both start at `logits`.
    pub fn new(logits: Vec<Vec<f64>>) -> Result<Self> {
        for row in &logits {
            crate::error::check_finite(row)?;
        }
        Ok(Self {
            reference_logits: logits.clone(),
            logits,
        })
    }

    pub fn uniform(env: &ToyEnvironment) -> Self {
        let logits = env
            .prompts
            .iter()
            .map(|p| vec![0.0; p.candidates.len()])
            .collect();
        Self::new(logits).expect("zeros are finite")
    }

    pub fn reference_logits(&self) -> &[Vec<f64>] {
        &self.reference_logits
    }

    pub fn probs(&self, prompt: usize) -> Vec<f64> {
        softmax(&self.logits[prompt])
    }

    pub fn reference_probs(&self, prompt: usize) -> Vec<f64> {
        softmax(&self.reference_logits[prompt])
    }
}

/// `k` i.i.d. draws from the prompt's categorical policy.
pub fn sample_actions<R: Rng>(
    policy: &PolicySnapshot,
    prompt: usize,
    k: usize,
    rng: &mut R,
) -> Vec<usize> {
    let probs = policy.probs(prompt);
    (0..k)
        .map(|_| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i;
                }
            }
            probs.len() - 1
        })
        .collect()
}

/// Mixture distribution of one candidate, from the reward model.
pub fn candidate_distribution(
    env: &ToyEnvironment,
    prompt: usize,
    candidate: usize,
    model: &QuantileRewardModel,
) -> Result<QuantileDistribution> {
    let p = env
        .prompts
        .get(prompt)
        .ok_or_else(|| QrmError::InvalidConfig(format!("prompt {prompt} out of range")))?;
    let x = p
        .candidates
        .get(candidate)
        .ok_or_else(|| QrmError::InvalidConfig(format!("candidate {candidate} out of range")))?;
    Ok(model.reward(&p.prompt_features, x)?.0)
}

pub fn response_reward(
    env: &ToyEnvironment,
    prompt: usize,
    candidate: usize,
    model: &QuantileRewardModel,
    mode: RewardMode,
) -> Result<f64> {
    mode.score(&candidate_distribution(env, prompt, candidate, model)?)
}

/// `a_i = r_i - mean_{j != i} r_j`.
pub fn rloo_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    let k = rewards.len();
    if k < 2 {
        return Err(QrmError::InvalidConfig(format!(
            "RLOO needs at least 2 samples, got {k}"
        )));
    }
    let total: f64 = rewards.iter().sum();
    let kf = k as f64;
    // r_i - (S - r_i)/(k-1) == (k r_i - S)/(k-1)
    let mut adv: Vec<f64> = rewards
        .iter()
        .map(|r| (kf * r - total) / (kf - 1.0))
        .collect();
    // Absorb rounding into the last entry so the left-to-right sum is exactly 0.
    let head: f64 = adv[..k - 1].iter().sum();
    adv[k - 1] = -head;
    Ok(adv)
}

/// Exact `KL(pi || pi_ref)` for one prompt.
pub fn kl_penalty(policy: &PolicySnapshot, prompt: usize) -> f64 {
    let lp = log_softmax(&policy.logits[prompt]);
    let lr = log_softmax(&policy.reference_logits[prompt]);
    let kl: f64 = lp.iter().zip(&lr).map(|(a, b)| a.exp() * (a - b)).sum();
    kl.max(0.0)
}

/// `d KL / d logits_j = pi_j (log(pi_j / ref_j) - KL)`.
pub fn kl_gradient(policy: &PolicySnapshot, prompt: usize) -> Vec<f64> {
    let lp = log_softmax(&policy.logits[prompt]);
    let lr = log_softmax(&policy.reference_logits[prompt]);
    let probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
    let kl: f64 = probs
        .iter()
        .zip(lp.iter().zip(&lr))
        .map(|(p, (a, b))| p * (a - b))
        .sum();
    probs
        .iter()
        .zip(lp.iter().zip(&lr))
        .map(|(p, (a, b))| p * (a - b - kl))
        .collect()
}

/// Gradient of `sum_c pi_c r_c` with respect to the logits.
pub fn exact_reward_gradient(probs: &[f64], rewards: &[f64]) -> Vec<f64> {
    let mean: f64 = probs.iter().zip(rewards).map(|(p, r)| p * r).sum();
    probs
        .iter()
        .zip(rewards)
        .map(|(p, r)| p * (r - mean))
        .collect()
}

/// One-sample RLOO estimate of the reward gradient for a prompt: `k` draws,
/// `(1/k) sum_i a_i grad log pi(y_i)`.
pub fn rloo_gradient_estimate<R: Rng>(
    policy: &PolicySnapshot,
    prompt: usize,
    rewards: &[f64],
    k: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let actions = sample_actions(policy, prompt, k, rng);
    let r: Vec<f64> = actions.iter().map(|&a| rewards[a]).collect();
    let adv = rloo_advantages(&r)?;
    let probs = policy.probs(prompt);
    let mut grad = vec![0.0; probs.len()];
    for (&a, adv) in actions.iter().zip(&adv) {
        // grad log softmax at a = e_a - pi
        for (j, g) in grad.iter_mut().enumerate() {
            let indicator = if j == a { 1.0 } else { 0.0 };
            *g += adv * (indicator - probs[j]) / k as f64;
        }
    }
    Ok(grad)
}

/// Distributions of every candidate, computed once.
#[derive(Debug, Clone)]
pub struct RewardTable {
    pub distributions: Vec<Vec<QuantileDistribution>>,
}

impl RewardTable {
    pub fn build(env: &ToyEnvironment, model: &QuantileRewardModel) -> Result<Self> {
        env.validate()?;
        let distributions = env
            .prompts
            .iter()
            .enumerate()
            .map(|(p, prompt)| {
                (0..prompt.candidates.len())
                    .map(|c| candidate_distribution(env, p, c, model))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { distributions })
    }

    pub fn scores(&self, mode: RewardMode) -> Result<Vec<Vec<f64>>> {
        self.distributions
            .iter()
            .map(|row| row.iter().map(|d| mode.score(d)).collect())
            .collect()
    }
}

/// Policy-averaged statistics of the candidate distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub seed: u64,
    pub mode: String,
    pub expected_reward: f64,
    pub tail_mean_05_25: f64,
    pub kl: f64,
    pub q05: f64,
    pub q10: f64,
    pub q15: f64,
    pub q20: f64,
    pub q25: f64,
}

fn policy_statistics(
    policy: &PolicySnapshot,
    table: &RewardTable,
    step: usize,
    cfg: &RlhfConfig,
) -> Result<TraceRow> {
    let n = table.distributions.len() as f64;
    let mut expected = 0.0;
    let mut tail = 0.0;
    let mut kl = 0.0;
    let mut quantiles = [0.0; TAIL_LEVELS.len()];
    for (p, row) in table.distributions.iter().enumerate() {
        let probs = policy.probs(p);
        for (pi, d) in probs.iter().zip(row) {
            expected += pi * d.expectation();
            tail += pi * d.tail_mean(TAIL_TAU_MAX)?;
            for (q, &tau) in quantiles.iter_mut().zip(&TAIL_LEVELS) {
                let v = d.value_at(tau).ok_or_else(|| {
                    QrmError::InvalidLevels(format!("reward model has no level {tau}"))
                })?;
                *q += pi * v;
            }
        }
        kl += kl_penalty(policy, p);
    }
    let [q05, q10, q15, q20, q25] = quantiles.map(|q| q / n);
    Ok(TraceRow {
        step,
        seed: cfg.seed,
        mode: cfg.reward_mode.name().into(),
        expected_reward: expected / n,
        tail_mean_05_25: tail / n,
        kl: kl / n,
        q05,
        q10,
        q15,
        q20,
        q25,
    })
}

/// Every `trace_every` steps (and at the end) a [`TraceRow`] is recorded.
pub fn train_policy_on_table(
    table: &RewardTable,
    cfg: &RlhfConfig,
    trace_every: usize,
) -> Result<(PolicySnapshot, Vec<TraceRow>)> {
    cfg.validate()?;
    let rewards = table.scores(cfg.reward_mode)?;
    let logits = table
        .distributions
        .iter()
        .map(|row| vec![0.0; row.len()])
        .collect();
    let mut policy = PolicySnapshot::new(logits)?;
    let sizes: Vec<usize> = policy.logits.iter().map(Vec::len).collect();
    let mut flat: Vec<f64> = policy.logits.concat();
    let mut opt = AdamW::new(AdamWConfig::default(), vec![false; flat.len()]);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let num_prompts = sizes.len();
    let every = trace_every.max(1);
    let mut trace = vec![policy_statistics(&policy, table, 0, cfg)?];

    for step in 1..=cfg.steps {
        let mut grad = vec![0.0; flat.len()];
        for _ in 0..cfg.batch_size {
            let p = rng.random_range(0..num_prompts);
            let offset: usize = sizes[..p].iter().sum();
            let g = rloo_gradient_estimate(&policy, p, &rewards[p], cfg.k, &mut rng)?;
            let kl_g = kl_gradient(&policy, p);
            for (j, (gr, gk)) in g.iter().zip(&kl_g).enumerate() {
                // Ascent on reward - beta * KL, expressed as descent.
                grad[offset + j] -= (gr - cfg.beta * gk) / cfg.batch_size as f64;
            }
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(QrmError::Diverged(format!(
                "policy gradient at step {step}"
            )));
        }
        opt.descend(&mut flat, &grad, cfg.learning_rate);
        let mut offset = 0;
        for (row, &n) in policy.logits.iter_mut().zip(&sizes) {
            row.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        if step % every == 0 || step == cfg.steps {
            trace.push(policy_statistics(&policy, table, step, cfg)?);
        }
    }
    Ok((policy, trace))
}

pub fn train_policy(
    env: &ToyEnvironment,
    model: &QuantileRewardModel,
    cfg: &RlhfConfig,
) -> Result<(PolicySnapshot, Vec<TraceRow>)> {
    let table = RewardTable::build(env, model)?;
    train_policy_on_table(&table, cfg, 10)
}

/// Final-step statistics of both policies for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskComparison {
    pub neutral: Vec<TraceRow>,
    pub aware: Vec<TraceRow>,
    pub neutral_policy: PolicySnapshot,
    pub aware_policy: PolicySnapshot,
}

impl RiskComparison {
    pub fn final_rows(&self) -> [&TraceRow; 2] {
        [
            self.neutral.last().expect("trace has the initial row"),
            self.aware.last().expect("trace has the initial row"),
        ]
    }

    pub fn report(&self) -> Vec<TraceRow> {
        self.final_rows().into_iter().cloned().collect()
    }
}

/// Trains a risk-neutral and a risk-aware policy with otherwise equal settings.
pub fn compare_risk_profiles(
    env: &ToyEnvironment,
    model: &QuantileRewardModel,
    cfg_neutral: &RlhfConfig,
    cfg_aware: &RlhfConfig,
) -> Result<RiskComparison> {
    let strip = |c: &RlhfConfig| RlhfConfig {
        reward_mode: RewardMode::RiskNeutral,
        ..c.clone()
    };
    if strip(cfg_neutral) != strip(cfg_aware) {
        return Err(QrmError::InvalidConfig(
            "configs may differ only in reward_mode".into(),
        ));
    }
    let table = RewardTable::build(env, model)?;
    let (neutral_policy, neutral) = train_policy_on_table(&table, cfg_neutral, 10)?;
    let (aware_policy, aware) = train_policy_on_table(&table, cfg_aware, 10)?;
    Ok(RiskComparison {
        neutral,
        aware,
        neutral_policy,
        aware_policy,
    })
}

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_csv<R: Read>(reader: R) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_reader(reader);
    r.deserialize()
        .map(|row| row.map_err(QrmError::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distribution::QuantileLevels;

    fn table_from(values: Vec<Vec<Vec<f64>>>) -> RewardTable {
        let levels = QuantileLevels::default();
        RewardTable {
            distributions: values
                .into_iter()
                .map(|row| {
                    row.into_iter()
                        .map(|v| QuantileDistribution::new(levels.clone(), v).unwrap())
                        .collect()
                })
                .collect(),
        }
    }

    fn constant_row(rewards: &[f64]) -> Vec<Vec<f64>> {
        rewards.iter().map(|&r| vec![r; 19]).collect()
    }

    #[test]
    fn saturated_policy_samples_argmax() {
        let policy = PolicySnapshot::new(vec![vec![20.0, 0.0, 0.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let draws = sample_actions(&policy, 0, 1000, &mut rng);
        assert!(draws.iter().filter(|&&a| a == 0).count() >= 999);
    }

    #[test]
    fn uniform_two_way_sampling_is_balanced() {
        let policy = PolicySnapshot::new(vec![vec![0.0, 0.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ones = sample_actions(&policy, 0, 10_000, &mut rng)
            .iter()
            .sum::<usize>() as f64;
        assert!((ones - 5000.0).abs() < 4.0 * 50.0);
        let a = sample_actions(&policy, 0, 50, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_actions(&policy, 0, 50, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn rloo_examples() {
        let a = rloo_advantages(&[1.0, 0.4]).unwrap();
        assert!((a[0] - 0.6).abs() < 1e-15 && (a[1] + 0.6).abs() < 1e-15);
        assert_eq!(rloo_advantages(&[0.3; 4]).unwrap(), vec![0.0; 4]);
        assert_eq!(
            rloo_advantages(&[1.0, 2.0, 6.0]).unwrap(),
            vec![-3.0, -1.5, 4.5]
        );
        assert!(rloo_advantages(&[1.0]).is_err());
    }

    #[test]
    fn kl_examples() {
        let same = PolicySnapshot::new(vec![vec![0.3, -1.2, 2.0]]).unwrap();
        assert_eq!(kl_penalty(&same, 0), 0.0);

        let mut p = PolicySnapshot::new(vec![vec![0.0, 0.0]]).unwrap();
        p.logits[0] = vec![9f64.ln(), 0.0];
        let expected = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        assert!((kl_penalty(&p, 0) - expected).abs() < 1e-12);
        assert!((kl_penalty(&p, 0) - 0.368).abs() < 1e-3);

        let mut shifted = p.clone();
        shifted.logits[0].iter_mut().for_each(|z| *z += 17.0);
        assert!((kl_penalty(&shifted, 0) - kl_penalty(&p, 0)).abs() < 1e-12);
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let mut p = PolicySnapshot::new(vec![vec![0.1, -0.4, 0.7]]).unwrap();
        p.logits[0] = vec![1.0, -0.2, 0.3];
        let g = kl_gradient(&p, 0);
        for (j, gj) in g.iter().enumerate() {
            let h = 1e-6;
            let mut up = p.clone();
            up.logits[0][j] += h;
            let mut down = p.clone();
            down.logits[0][j] -= h;
            let fd = (kl_penalty(&up, 0) - kl_penalty(&down, 0)) / (2.0 * h);
            assert!((fd - gj).abs() < 1e-7);
        }
    }

    #[test]
    fn mode_switch_keeps_distribution() {
        let levels = QuantileLevels::default();
        let d = QuantileDistribution::constant(levels, 0.4).unwrap();
        let before = d.clone();
        let neutral = RewardMode::RiskNeutral.score(&d).unwrap();
        let aware = RewardMode::RiskAware { lambda: 1.0 }.score(&d).unwrap();
        assert!((neutral - 0.4).abs() < 1e-12);
        assert!((aware + (-0.4f64).exp()).abs() < 1e-12);
        assert_eq!(d, before);
    }

    #[test]
    fn risk_aware_prefers_unimodal_at_equal_mean() {
        let levels = QuantileLevels::new(vec![0.2, 0.4, 0.6, 0.8]).unwrap();
        let bimodal = QuantileDistribution::new(levels.clone(), vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let flat = QuantileDistribution::constant(levels, 0.5).unwrap();
        let aware = RewardMode::RiskAware { lambda: 1.0 };
        assert!(aware.score(&flat).unwrap() > aware.score(&bimodal).unwrap());
        let neutral = RewardMode::RiskNeutral;
        assert_eq!(
            neutral.score(&flat).unwrap(),
            neutral.score(&bimodal).unwrap()
        );
    }

    #[test]
    fn rloo_estimator_is_unbiased() {
        let mut p = PolicySnapshot::new(vec![vec![0.0; 4]]).unwrap();
        p.logits[0] = vec![0.5, -0.3, 0.1, 0.9];
        let rewards = [0.2, 1.0, -0.5, 0.4];
        let exact = exact_reward_gradient(&p.probs(0), &rewards);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 20_000;
        let mut avg = [0.0; 4];
        for _ in 0..n {
            let g = rloo_gradient_estimate(&p, 0, &rewards, 2, &mut rng).unwrap();
            for (a, gi) in avg.iter_mut().zip(g) {
                *a += gi / n as f64;
            }
        }
        let err: f64 = avg
            .iter()
            .zip(&exact)
            .map(|(a, e)| (a - e).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = exact.iter().map(|e| e * e).sum::<f64>().sqrt();
        assert!(err / norm < 0.02, "relative error {}", err / norm);
    }

    #[test]
    fn dominant_candidate_wins_without_kl() {
        let table = table_from(vec![constant_row(&[1.0, 0.0])]);
        for seed in 0..3 {
            let cfg = RlhfConfig {
                beta: 0.0,
                seed,
                ..Default::default()
            };
            let (policy, trace) = train_policy_on_table(&table, &cfg, 100).unwrap();
            assert!(policy.probs(0)[0] > 0.99);
            assert!(trace
                .iter()
                .all(|r| r.expected_reward.is_finite() && r.kl.is_finite()));
        }
    }

    #[test]
    fn huge_beta_pins_policy_to_reference() {
        let table = table_from(vec![
            constant_row(&[1.0, 0.0, 0.5]),
            constant_row(&[0.0, 0.2]),
        ]);
        let cfg = RlhfConfig {
            beta: 1000.0,
            ..Default::default()
        };
        let (policy, _) = train_policy_on_table(&table, &cfg, 100).unwrap();
        for p in 0..2 {
            let tv: f64 = policy
                .probs(p)
                .iter()
                .zip(policy.reference_probs(p))
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / 2.0;
            assert!(tv < 0.01, "prompt {p}: TV {tv}");
        }
    }

    #[test]
    fn training_is_bit_reproducible() {
        let table = table_from(vec![constant_row(&[0.3, 0.5, 0.1])]);
        let cfg = RlhfConfig {
            steps: 300,
            ..Default::default()
        };
        let a = train_policy_on_table(&table, &cfg, 10).unwrap();
        let b = train_policy_on_table(&table, &cfg, 10).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identical_candidates_give_identical_profiles() {
        let table = table_from(vec![constant_row(&[0.5, 0.5, 0.5])]);
        let neutral = RlhfConfig {
            steps: 500,
            ..Default::default()
        };
        let aware = RlhfConfig {
            reward_mode: RewardMode::RiskAware { lambda: 2.0 },
            ..neutral.clone()
        };
        let (_, tn) = train_policy_on_table(&table, &neutral, 500).unwrap();
        let (_, ta) = train_policy_on_table(&table, &aware, 500).unwrap();
        let (n, a) = (tn.last().unwrap(), ta.last().unwrap());
        assert!((n.expected_reward - a.expected_reward).abs() < 1e-12);
        assert!((n.tail_mean_05_25 - a.tail_mean_05_25).abs() < 1e-12);
    }

    #[test]
    fn trace_csv_round_trip() {
        let table = table_from(vec![constant_row(&[0.3, 0.5])]);
        let cfg = RlhfConfig {
            steps: 50,
            ..Default::default()
        };
        let (_, trace) = train_policy_on_table(&table, &cfg, 10).unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&trace, &mut buf).unwrap();
        let header = String::from_utf8(buf.clone()).unwrap();
        assert!(header.starts_with(
            "step,seed,mode,expected_reward,tail_mean_05_25,kl,q05,q10,q15,q20,q25\n"
        ));
        assert_eq!(read_trace_csv(buf.as_slice()).unwrap(), trace);
    }

    #[test]
    fn config_validation() {
        let bad_k = RlhfConfig {
            k: 1,
            ..Default::default()
        };
        assert!(bad_k.validate().is_err());
        let bad_lambda = RlhfConfig {
            reward_mode: RewardMode::RiskAware { lambda: 0.0 },
            ..Default::default()
        };
        assert!(bad_lambda.validate().is_err());
        assert!(ToyEnvironment::new(vec![ToyPrompt {
            prompt_features: vec![],
            candidates: vec![vec![0.0]],
            labels: vec![],
        }])
        .is_err());
    }
}
