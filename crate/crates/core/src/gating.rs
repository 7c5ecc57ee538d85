//! Prompt-conditioned gating network and its Bradley-Terry training.
//!
//! The gating MLP maps prompt features through three tanh hidden layers to
//! softmax weights over attributes. The mixed distribution's expectation is
//! the scalar reward fed to the Bradley-Terry loss. Quantile layers are only
//! read during training; gradients reach the gating parameters alone.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distribution::{mix, MixtureWeights, QuantileDistribution};
use crate::error::{check_finite, QrmError, Result};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::quantile_regression::AttributeQuantileModel;

pub const HIDDEN_LAYERS: usize = 3;

/// Prompt features plus the full features of a preferred and a rejected response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt_features: Vec<f64>,
    pub chosen_features: Vec<f64>,
    pub rejected_features: Vec<f64>,
}

/// Fully connected layer, weights row-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn xavier<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs).max(1) as f64).sqrt();
        let mut layer = Self::zeros(inputs, outputs);
        layer
            .weights
            .iter_mut()
            .for_each(|w| *w = rng.random_range(-limit..limit));
        layer
    }

    fn apply(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.outputs {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            out.push(self.bias[o] + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>());
        }
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatingParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_attributes: usize,
    pub activation: String,
    pub layers: Vec<DenseLayer>,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Renormalizes softmax output so it passes the simplex check exactly.
fn to_weights(probs: Vec<f64>) -> Result<MixtureWeights> {
    let total: f64 = probs.iter().sum();
    MixtureWeights::new(probs.into_iter().map(|p| p / total).collect())
}

struct Trace {
    /// Input, then each hidden activation.
    activations: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

impl GatingParams {
    fn with_layers<F>(
        input_dim: usize,
        hidden_dim: usize,
        num_attributes: usize,
        mut make: F,
    ) -> Result<Self>
    where
        F: FnMut(usize, usize, bool) -> DenseLayer,
    {
        if hidden_dim == 0 || num_attributes == 0 {
            return Err(QrmError::InvalidConfig(
                "hidden width and attribute count must be positive".into(),
            ));
        }
        let mut layers = Vec::with_capacity(HIDDEN_LAYERS + 1);
        let mut fan_in = input_dim;
        for _ in 0..HIDDEN_LAYERS {
            layers.push(make(fan_in, hidden_dim, false));
            fan_in = hidden_dim;
        }
        layers.push(make(hidden_dim, num_attributes, true));
        Ok(Self {
            input_dim,
            hidden_dim,
            num_attributes,
            activation: "tanh".into(),
            layers,
        })
    }

    /// Xavier-initialized hidden layers and a zero output layer, so the
    /// untrained network emits uniform weights.
    pub fn new(
        input_dim: usize,
        hidden_dim: usize,
        num_attributes: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_layers(input_dim, hidden_dim, num_attributes, |i, o, last| {
            if last {
                DenseLayer::zeros(i, o)
            } else {
                DenseLayer::xavier(i, o, &mut rng)
            }
        })
    }

    /// Every parameter random, biases included.
    pub fn random(
        input_dim: usize,
        hidden_dim: usize,
        num_attributes: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_layers(input_dim, hidden_dim, num_attributes, |i, o, _| {
            let mut layer = DenseLayer::xavier(i, o, &mut rng);
            layer
                .bias
                .iter_mut()
                .for_each(|b| *b = rng.random_range(-0.5..0.5));
            layer
        })
    }

    /// A network that ignores its input and always returns `weights`.
    pub fn constant(input_dim: usize, hidden_dim: usize, weights: &MixtureWeights) -> Result<Self> {
        let mut params = Self::with_layers(input_dim, hidden_dim, weights.len(), |i, o, _| {
            DenseLayer::zeros(i, o)
        })?;
        let out = params.layers.last_mut().expect("output layer");
        for (b, w) in out.bias.iter_mut().zip(weights.as_slice()) {
            *b = w.max(1e-300).ln();
        }
        Ok(params)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    /// Weights then bias, layer by layer.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            flat.extend_from_slice(&l.weights);
            flat.extend_from_slice(&l.bias);
        }
        flat
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut offset = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[offset..offset + nw]);
            offset += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[offset..offset + nb]);
            offset += nb;
        }
    }

    /// True for weight-matrix entries, false for biases.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            mask.extend(std::iter::repeat_n(true, l.weights.len()));
            mask.extend(std::iter::repeat_n(false, l.bias.len()));
        }
        mask
    }

    fn check_input(&self, prompt_features: &[f64]) -> Result<()> {
        if prompt_features.len() != self.input_dim {
            return Err(QrmError::DimensionMismatch {
                expected: self.input_dim,
                actual: prompt_features.len(),
            });
        }
        check_finite(prompt_features)
    }

    fn trace(&self, prompt_features: &[f64]) -> Trace {
        let mut activations = Vec::with_capacity(self.layers.len());
        activations.push(prompt_features.to_vec());
        let mut buf = Vec::new();
        let (last, hidden) = self.layers.split_last().expect("output layer");
        for layer in hidden {
            layer.apply(activations.last().expect("input"), &mut buf);
            activations.push(buf.iter().map(|z| z.tanh()).collect());
        }
        last.apply(activations.last().expect("hidden"), &mut buf);
        Trace {
            activations,
            probs: softmax(&buf),
        }
    }

    pub fn logits(&self, prompt_features: &[f64]) -> Result<Vec<f64>> {
        self.check_input(prompt_features)?;
        let t = self.trace(prompt_features);
        let mut out = Vec::new();
        self.layers
            .last()
            .expect("output layer")
            .apply(t.activations.last().expect("hidden"), &mut out);
        Ok(out)
    }

    pub fn forward(&self, prompt_features: &[f64]) -> Result<MixtureWeights> {
        self.check_input(prompt_features)?;
        to_weights(self.trace(prompt_features).probs)
    }

    /// Adds `d loss / d params` to `grad` given `d loss / d weights`.
    fn backward(&self, trace: &Trace, d_weights: &[f64], grad: &mut [f64]) {
        let p = &trace.probs;
        let dot: f64 = p.iter().zip(d_weights).map(|(g, d)| g * d).sum();
        let mut delta: Vec<f64> = p
            .iter()
            .zip(d_weights)
            .map(|(g, d)| g * (d - dot))
            .collect();

        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut acc = 0;
        for l in &self.layers {
            offsets.push(acc);
            acc += l.param_count();
        }
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.activations[li];
            let base = offsets[li];
            let (gw, gb) = grad[base..base + layer.param_count()].split_at_mut(layer.weights.len());
            for o in 0..layer.outputs {
                gb[o] += delta[o];
                let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                for (g, x) in row.iter_mut().zip(input) {
                    *g += delta[o] * x;
                }
            }
            if li == 0 {
                break;
            }
            let mut prev = vec![0.0; layer.inputs];
            for (row, d) in layer.weights.chunks_exact(layer.inputs).zip(&delta) {
                for (pv, w) in prev.iter_mut().zip(row) {
                    *pv += w * d;
                }
            }
            // tanh' = 1 - h^2 on the activation that fed this layer.
            for (pv, h) in prev.iter_mut().zip(input) {
                *pv *= 1.0 - h * h;
            }
            delta = prev;
        }
    }
}

/// `-r+ + log(exp r+ + exp r-)`, i.e. `softplus(-(r+ - r-))`, evaluated stably.
pub fn bt_loss(reward_chosen: f64, reward_rejected: f64) -> f64 {
    let z = reward_rejected - reward_chosen;
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_models(models: &[AttributeQuantileModel]) -> Result<()> {
    let first = models
        .first()
        .ok_or_else(|| QrmError::EmptyInput("no attribute models".into()))?;
    for m in models {
        if m.levels != first.levels {
            return Err(QrmError::LevelMismatch);
        }
        if m.feature_dim() != first.feature_dim() {
            return Err(QrmError::DimensionMismatch {
                expected: first.feature_dim(),
                actual: m.feature_dim(),
            });
        }
    }
    Ok(())
}

/// Mixture distribution and its expectation for one prompt/response.
pub fn qrm_reward(
    params: &GatingParams,
    models: &[AttributeQuantileModel],
    prompt_features: &[f64],
    response_features: &[f64],
) -> Result<(QuantileDistribution, f64)> {
    check_models(models)?;
    if params.num_attributes != models.len() {
        return Err(QrmError::DimensionMismatch {
            expected: models.len(),
            actual: params.num_attributes,
        });
    }
    let weights = params.forward(prompt_features)?;
    let dists = models
        .iter()
        .map(|m| m.predict_distribution(response_features))
        .collect::<Result<Vec<_>>>()?;
    let mixed = mix(&dists, &weights)?;
    let e = mixed.expectation();
    Ok((mixed, e))
}

/// Quantile layers plus gating: the complete reward model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileRewardModel {
    pub attributes: Vec<AttributeQuantileModel>,
    pub gating: GatingParams,
}

impl QuantileRewardModel {
    pub fn new(attributes: Vec<AttributeQuantileModel>, gating: GatingParams) -> Result<Self> {
        check_models(&attributes)?;
        if gating.num_attributes != attributes.len() {
            return Err(QrmError::DimensionMismatch {
                expected: attributes.len(),
                actual: gating.num_attributes,
            });
        }
        Ok(Self { attributes, gating })
    }

    pub fn reward(
        &self,
        prompt_features: &[f64],
        response_features: &[f64],
    ) -> Result<(QuantileDistribution, f64)> {
        qrm_reward(
            &self.gating,
            &self.attributes,
            prompt_features,
            response_features,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatingTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub hidden_dim: usize,
    pub seed: u64,
}

impl Default for GatingTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            learning_rate: 3e-4,
            batch_size: 1024,
            weight_decay: 1e-3,
            hidden_dim: 64,
            seed: 0,
        }
    }
}

impl GatingTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(QrmError::InvalidConfig(
                "learning_rate must be positive".into(),
            ));
        }
        if self.batch_size == 0 || self.hidden_dim == 0 {
            return Err(QrmError::InvalidConfig(
                "batch_size and hidden_dim must be positive".into(),
            ));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(QrmError::InvalidConfig(
                "weight_decay must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Per-attribute expectations of both responses in a pair.
#[derive(Debug, Clone)]
pub struct PairExpectations {
    pub prompt_features: Vec<f64>,
    pub chosen: Vec<f64>,
    pub rejected: Vec<f64>,
}

/// Expectation is linear over the mixture, so each pair reduces to two
/// M-vectors of attribute expectations.
pub fn precompute_expectations(
    models: &[AttributeQuantileModel],
    prefs: &[PreferencePair],
) -> Result<Vec<PairExpectations>> {
    check_models(models)?;
    let expect = |x: &[f64]| -> Result<Vec<f64>> {
        models
            .iter()
            .map(|m| Ok(m.predict_distribution(x)?.expectation()))
            .collect()
    };
    prefs
        .iter()
        .map(|p| {
            Ok(PairExpectations {
                prompt_features: p.prompt_features.clone(),
                chosen: expect(&p.chosen_features)?,
                rejected: expect(&p.rejected_features)?,
            })
        })
        .collect()
}

/// Mean Bradley-Terry loss over `batch` and its gradient with respect to the
/// flattened gating parameters.
pub fn loss_and_gradient(
    params: &GatingParams,
    batch: &[&PairExpectations],
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; params.param_count()];
    let mut total = 0.0;
    for pair in batch {
        params.check_input(&pair.prompt_features)?;
        let trace = params.trace(&pair.prompt_features);
        let diff: Vec<f64> = pair
            .chosen
            .iter()
            .zip(&pair.rejected)
            .map(|(c, r)| c - r)
            .collect();
        let margin: f64 = trace.probs.iter().zip(&diff).map(|(g, d)| g * d).sum();
        total += bt_loss(margin, 0.0);
        let dl_dmargin = -sigmoid(-margin);
        let d_weights: Vec<f64> = diff.iter().map(|d| dl_dmargin * d).collect();
        params.backward(&trace, &d_weights, &mut grad);
    }
    let inv = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((total * inv, grad))
}

/// Bradley-Terry loss of one pair through the full pipeline: gating,
/// per-attribute distributions, mixture, expectation.
pub fn pipeline_loss(
    params: &GatingParams,
    models: &[AttributeQuantileModel],
    pair: &PreferencePair,
) -> Result<f64> {
    let (_, r_plus) = qrm_reward(params, models, &pair.prompt_features, &pair.chosen_features)?;
    let (_, r_minus) = qrm_reward(
        params,
        models,
        &pair.prompt_features,
        &pair.rejected_features,
    )?;
    Ok(bt_loss(r_plus, r_minus))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_loss: f64,
}

/// Trains the gating parameters with AdamW under a cosine schedule.
///
/// `models` are only read; the returned trace holds the mean batch loss of
/// every epoch.
pub fn train_gating(
    params: &GatingParams,
    models: &[AttributeQuantileModel],
    prefs: &[PreferencePair],
    cfg: &GatingTrainConfig,
) -> Result<(GatingParams, Vec<EpochLoss>)> {
    cfg.validate()?;
    if prefs.is_empty() {
        return Err(QrmError::EmptyInput("no preference pairs".into()));
    }
    if params.num_attributes != models.len() {
        return Err(QrmError::DimensionMismatch {
            expected: models.len(),
            actual: params.num_attributes,
        });
    }
    let data = precompute_expectations(models, prefs)?;
    let mut trained = params.clone();
    let mut flat = trained.to_flat();
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
        trained.decay_mask(),
    );
    let batches_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = batches_per_epoch * cfg.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PairExpectations> = chunk.iter().map(|&i| &data[i]).collect();
            let (loss, grad) = loss_and_gradient(&trained, &batch)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(QrmError::Diverged(format!(
                    "gating loss at epoch {epoch}, step {step}"
                )));
            }
            epoch_loss += loss * batch.len() as f64;
            let lr = cosine_lr(cfg.learning_rate, step, total_steps);
            opt.descend(&mut flat, &grad, lr);
            trained.set_flat(&flat);
            step += 1;
        }
        let mean_loss = epoch_loss / data.len() as f64;
        log::info!("gating epoch {epoch}: mean loss {mean_loss:.6}");
        trace.push(EpochLoss { epoch, mean_loss });
    }
    Ok((trained, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distribution::QuantileLevels;
    use crate::quantile_regression::{FitMetadata, QuantileLayer, Standardizer};

    fn linear_model(
        attribute: usize,
        dim: usize,
        slope: &[f64],
        spread: f64,
    ) -> AttributeQuantileModel {
        let levels = QuantileLevels::new(vec![0.25, 0.5, 0.75]).unwrap();
        AttributeQuantileModel {
            attribute,
            standardizer: Standardizer::identity(dim),
            layers: levels
                .iter()
                .enumerate()
                .map(|(i, t)| QuantileLayer {
                    level: t,
                    weights: slope.iter().map(|s| s * (1.0 + 0.1 * i as f64)).collect(),
                    bias: spread * (i as f64 - 1.0),
                })
                .collect(),
            levels,
            metadata: FitMetadata {
                l1_strength: 0.0,
                rows: 0,
                layers: vec![],
            },
            adjustment: None,
        }
    }

    #[test]
    fn zero_output_layer_is_uniform() {
        let p = GatingParams::new(5, 8, 4, 1).unwrap();
        let w = p.forward(&[0.3, -1.0, 2.0, 0.0, 0.5]).unwrap();
        assert!(w.as_slice().iter().all(|g| (g - 0.25).abs() < 1e-15));
    }

    #[test]
    fn softmax_closed_form() {
        let g = softmax(&[2f64.ln(), 0.0, 0.0]);
        assert!(
            (g[0] - 0.5).abs() < 1e-15
                && (g[1] - 0.25).abs() < 1e-15
                && (g[2] - 0.25).abs() < 1e-15
        );
        let c = GatingParams::constant(2, 4, &MixtureWeights::new(vec![0.5, 0.25, 0.25]).unwrap())
            .unwrap();
        let w = c.forward(&[10.0, -3.0]).unwrap();
        assert!((w.as_slice()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn forward_rejects_wrong_dimension() {
        let p = GatingParams::new(3, 4, 2, 0).unwrap();
        assert!(matches!(
            p.forward(&[1.0]),
            Err(QrmError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn bt_loss_values() {
        assert!((bt_loss(0.7, 0.7) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bt_loss(2.0, 0.0) - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-12);
        assert!((bt_loss(2.0, 0.0) - 0.126928).abs() < 1e-6);
        let mut last = f64::INFINITY;
        for m in [0.0, 1.0, 5.0, 20.0, 100.0, 800.0] {
            let l = bt_loss(m, 0.0);
            assert!(l < last && l >= 0.0);
            last = l;
        }
        assert!(bt_loss(-800.0, 0.0).is_finite());
        assert!((bt_loss(3.0, 1.0) - bt_loss(3.0 + 1e6, 1.0 + 1e6)).abs() < 1e-9);
    }

    #[test]
    fn single_attribute_ignores_gating() {
        let models = vec![linear_model(0, 2, &[0.1, 0.2], 0.3)];
        let p = GatingParams::random(3, 4, 1, 9).unwrap();
        let (d, e) = qrm_reward(&p, &models, &[1.0, 2.0, 3.0], &[0.5, -0.5]).unwrap();
        assert_eq!(d, models[0].predict_distribution(&[0.5, -0.5]).unwrap());
        assert_eq!(e, d.expectation());
    }

    #[test]
    fn hand_computed_two_attribute_mixture() {
        let models = vec![
            linear_model(0, 1, &[0.0], 0.1),
            linear_model(1, 1, &[0.0], 0.3),
        ];
        let weights = MixtureWeights::new(vec![0.2, 0.8]).unwrap();
        let p = GatingParams::constant(1, 3, &weights).unwrap();
        let (d, e) = qrm_reward(&p, &models, &[0.0], &[0.0]).unwrap();
        // Model 0 quantiles (-0.1, 0, 0.1); model 1 (-0.3, 0, 0.3).
        let expected = [0.2 * -0.1 + 0.8 * -0.3, 0.0, 0.2 * 0.1 + 0.8 * 0.3];
        for (v, x) in d.values().iter().zip(expected) {
            assert!((v - x).abs() < 1e-12);
        }
        assert!(e.abs() < 1e-12);
    }

    #[test]
    fn identical_attributes_under_uniform_gating() {
        let a = linear_model(0, 2, &[0.3, -0.1], 0.2);
        let mut b = a.clone();
        b.attribute = 1;
        let p = GatingParams::new(2, 4, 2, 0).unwrap();
        let (d, _) = qrm_reward(&p, &[a.clone(), b], &[0.1, 0.2], &[1.0, 1.0]).unwrap();
        let direct = a.predict_distribution(&[1.0, 1.0]).unwrap();
        for (x, y) in d.values().iter().zip(direct.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let models = vec![
            linear_model(0, 2, &[0.4, -0.2], 0.1),
            linear_model(1, 2, &[-0.3, 0.5], 0.2),
        ];
        let params = GatingParams::random(3, 4, 2, 42).unwrap();
        let pair = PreferencePair {
            prompt_features: vec![0.3, -0.7, 1.1],
            chosen_features: vec![1.0, 0.5],
            rejected_features: vec![-0.4, 0.9],
        };
        let pre = precompute_expectations(&models, std::slice::from_ref(&pair)).unwrap();
        let (loss, grad) = loss_and_gradient(&params, &[&pre[0]]).unwrap();
        assert!((loss - pipeline_loss(&params, &models, &pair).unwrap()).abs() < 1e-12);

        let flat = params.to_flat();
        let h = 1e-5;
        for i in 0..flat.len() {
            let mut p = params.clone();
            let mut f = flat.clone();
            f[i] += h;
            p.set_flat(&f);
            let up = pipeline_loss(&p, &models, &pair).unwrap();
            f[i] -= 2.0 * h;
            p.set_flat(&f);
            let down = pipeline_loss(&p, &models, &pair).unwrap();
            let fd = (up - down) / (2.0 * h);
            let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-4, "param {i}: analytic {} fd {fd}", grad[i]);
        }
    }

    #[test]
    fn zero_epochs_leaves_params() {
        let models = vec![
            linear_model(0, 1, &[1.0], 0.1),
            linear_model(1, 1, &[-1.0], 0.1),
        ];
        let params = GatingParams::new(2, 4, 2, 3).unwrap();
        let prefs = vec![PreferencePair {
            prompt_features: vec![0.0, 1.0],
            chosen_features: vec![1.0],
            rejected_features: vec![0.0],
        }];
        let cfg = GatingTrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let (trained, trace) = train_gating(&params, &models, &prefs, &cfg).unwrap();
        assert_eq!(trained, params);
        assert!(trace.is_empty());
        assert!(train_gating(&params, &models, &[], &cfg).is_err());
    }

    #[test]
    fn training_is_deterministic_and_moves_toward_the_signal() {
        let models = vec![
            linear_model(0, 1, &[1.0], 0.1),
            linear_model(1, 1, &[-1.0], 0.1),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let prefs: Vec<PreferencePair> = (0..400)
            .map(|_| {
                let a: f64 = rng.random_range(-1.0..1.0);
                let b: f64 = rng.random_range(-1.0..1.0);
                PreferencePair {
                    prompt_features: vec![rng.random_range(-1.0..1.0), 1.0],
                    chosen_features: vec![a.max(b)],
                    rejected_features: vec![a.min(b)],
                }
            })
            .collect();
        let params = GatingParams::new(2, 8, 2, 1).unwrap();
        let cfg = GatingTrainConfig {
            epochs: 20,
            learning_rate: 1e-2,
            batch_size: 64,
            ..Default::default()
        };
        let (a, trace_a) = train_gating(&params, &models, &prefs, &cfg).unwrap();
        let (b, trace_b) = train_gating(&params, &models, &prefs, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(trace_a, trace_b);
        assert!(trace_a.last().unwrap().mean_loss < trace_a[0].mean_loss);
        assert!(a.forward(&[0.0, 1.0]).unwrap().as_slice()[0] > 0.9);
    }
}
