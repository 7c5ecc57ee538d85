use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use qrm_core::distribution::{MixtureWeights, QuantileLevels, UtilityConfig};
use qrm_core::evaluation::{
    bimodal_capture_report, coverage_report, pairwise_accuracy, EvalReport, EvalThresholds,
    ReportMetadata,
};
use qrm_core::gating::{
    train_gating, GatingParams, GatingTrainConfig, PreferencePair, QuantileRewardModel,
};
use qrm_core::io;
use qrm_core::quantile_regression::{
    apply_decorrelation_penalty, decorrelation_coefficients, fit_all_attributes,
    fit_point_baseline, AttributeExample, AttributeQuantileModel, PointBaseline, RegressionConfig,
};
use qrm_core::rlhf::{
    train_policy_on_table, RewardMode, RewardTable, RlhfConfig, ToyEnvironment, TraceRow,
};
use qrm_core::synthetic::{
    calibrate_bt_noise, preference_probability, sample_attribute_dataset, sample_feature_rows,
    sample_preference_dataset, GroundTruth, PopulationSpec,
};

use crate::config::{sub_seed, Globals};

pub const ATTRIBUTES: &str = "attributes.jsonl";
pub const HOLDOUT_ATTRIBUTES: &str = "holdout_attributes.jsonl";
pub const PREFERENCES: &str = "preferences.jsonl";
pub const HOLDOUT_PREFERENCES: &str = "holdout_preferences.jsonl";
pub const PROBES: &str = "probes.jsonl";
pub const GROUND_TRUTH: &str = "ground_truth.json";
pub const QUANTILE_MODELS: &str = "quantile_models.json";
pub const POINT_BASELINE: &str = "point_baseline.json";
pub const FIT_DIAGNOSTICS: &str = "fit_diagnostics.csv";
pub const GATING: &str = "gating.json";
pub const GATING_LOSS: &str = "gating_loss.csv";
pub const SCORES: &str = "scores.jsonl";
pub const ENVIRONMENT: &str = "environment.json";
pub const COMPARISON: &str = "comparison.csv";
pub const EVAL_REPORT: &str = "eval_report.json";
pub const COVERAGE: &str = "coverage.csv";
pub const BIMODAL: &str = "bimodal.csv";

/// An explicitly named input must exist; otherwise fall back to `name`
/// inside the output directory, which must exist only if `required`.
fn input_path(
    explicit: &Option<PathBuf>,
    g: &Globals,
    name: &str,
    required: bool,
) -> Result<Option<PathBuf>> {
    if let Some(p) = explicit {
        if !p.is_file() {
            bail!("input file {} does not exist", p.display());
        }
        return Ok(Some(p.clone()));
    }
    let p = g.out.join(name);
    if p.is_file() {
        Ok(Some(p))
    } else if required {
        bail!(
            "input file {} does not exist (pass it explicitly or run the producing step first)",
            p.display()
        )
    } else {
        Ok(None)
    }
}

fn required(explicit: &Option<PathBuf>, g: &Globals, name: &str) -> Result<PathBuf> {
    Ok(input_path(explicit, g, name, true)?.expect("required input resolved"))
}

fn load_models(path: &Path) -> Result<Vec<AttributeQuantileModel>> {
    let models: Vec<AttributeQuantileModel> =
        io::read_json(path).with_context(|| format!("reading models {}", path.display()))?;
    for m in &models {
        m.validate()?;
    }
    Ok(models)
}

fn load_reward_model(models: &Path, gating: &Path) -> Result<QuantileRewardModel> {
    let gating: GatingParams =
        io::read_json(gating).with_context(|| format!("reading gating {}", gating.display()))?;
    Ok(QuantileRewardModel::new(load_models(models)?, gating)?)
}

fn preset(name: &str) -> Result<PopulationSpec> {
    Ok(match name {
        "default" => PopulationSpec::default_suite(),
        "bimodal" => PopulationSpec::bimodal(0.2, 0.8, 0.05),
        "planted-trap" | "planted_trap" => PopulationSpec::planted_trap(),
        "independent" => PopulationSpec::independent_attributes(3, 4, 0.1, 0.05),
        other => bail!(
            "unknown preset {other:?}; expected default, bimodal, planted-trap or independent"
        ),
    })
}

fn out_file(g: &Globals, name: &str) -> PathBuf {
    g.out.join(name)
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataArgs {
    /// Population preset: default, bimodal, planted-trap or independent
    #[arg(long)]
    pub preset: Option<String>,
    /// Population spec JSON file; takes precedence over --preset
    #[arg(long, value_name = "PATH")]
    pub spec: Option<PathBuf>,
    /// Training rows per attribute [default: 5000]
    #[arg(long)]
    pub n_per_attribute: Option<usize>,
    /// Held-out rows per attribute [default: 5000]
    #[arg(long)]
    pub n_holdout: Option<usize>,
    /// Training preference pairs [default: 10000]
    #[arg(long)]
    pub n_preferences: Option<usize>,
    /// Held-out preference pairs [default: 2000]
    #[arg(long)]
    pub n_holdout_preferences: Option<usize>,
    /// Prompt/response rows written for `score` [default: 100]
    #[arg(long)]
    pub n_probes: Option<usize>,
    /// True gating weights, comma separated [default: uniform]
    #[arg(long, value_delimiter = ',')]
    pub g_star: Option<Vec<f64>>,
    /// Bradley-Terry label noise; 0 labels deterministically
    #[arg(long)]
    pub bt_noise: Option<f64>,
    /// Calibrate the label noise to this Bayes accuracy when --bt-noise is unset [default: 0.92]
    #[arg(long)]
    pub target_bayes_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreInput {
    pub prompt_features: Vec<f64>,
    pub response_features: Vec<f64>,
}

pub fn gen_data(a: &GenDataArgs, g: &Globals) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => {
            io::read_json(p).with_context(|| format!("reading population spec {}", p.display()))?
        }
        None => preset(a.preset.as_deref().unwrap_or("default"))?,
    };
    spec.validate()?;
    let m = spec.num_attributes();
    let g_star = match &a.g_star {
        Some(w) => MixtureWeights::new(w.clone())?,
        None => MixtureWeights::uniform(m)?,
    };
    let bt_noise = match a.bt_noise {
        Some(n) => n,
        None => calibrate_bt_noise(
            &spec,
            &g_star,
            a.target_bayes_accuracy.unwrap_or(0.92),
            20_000,
            sub_seed(g.seed, 4),
        )?,
    };
    log::info!("bt_noise {bt_noise:.6}");

    let (train, _) = sample_attribute_dataset(
        &spec,
        a.n_per_attribute.unwrap_or(5000),
        sub_seed(g.seed, 0),
    )?;
    let (holdout, _) =
        sample_attribute_dataset(&spec, a.n_holdout.unwrap_or(5000), sub_seed(g.seed, 1))?;
    let prefs = sample_preference_dataset(
        &spec,
        &g_star,
        bt_noise,
        a.n_preferences.unwrap_or(10_000),
        sub_seed(g.seed, 2),
    )?;
    let held_prefs = sample_preference_dataset(
        &spec,
        &g_star,
        bt_noise,
        a.n_holdout_preferences.unwrap_or(2000),
        sub_seed(g.seed, 3),
    )?;
    let probes: Vec<ScoreInput> = sample_preference_dataset(
        &spec,
        &g_star,
        0.0,
        a.n_probes.unwrap_or(100),
        sub_seed(g.seed, 5),
    )?
    .into_iter()
    .map(|s| ScoreInput {
        prompt_features: s.pair.prompt_features,
        response_features: s.pair.chosen_features,
    })
    .collect();

    let pairs = |v: Vec<qrm_core::synthetic::PreferenceSample>| -> Vec<PreferencePair> {
        v.into_iter().map(|s| s.pair).collect()
    };
    io::write_jsonl(&out_file(g, ATTRIBUTES), &train)?;
    io::write_jsonl(&out_file(g, HOLDOUT_ATTRIBUTES), &holdout)?;
    io::write_jsonl(&out_file(g, PREFERENCES), &pairs(prefs))?;
    io::write_jsonl(&out_file(g, HOLDOUT_PREFERENCES), &pairs(held_prefs))?;
    io::write_jsonl(&out_file(g, PROBES), &probes)?;
    let truth = GroundTruth {
        spec,
        g_star: Some(g_star),
        bt_noise: Some(bt_noise),
    };
    io::write_json(&out_file(g, GROUND_TRUTH), &truth)?;
    Ok(())
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainQuantilesArgs {
    /// Training rows (JSONL) [default: <out>/attributes.jsonl]
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// Number of evenly spaced quantile levels [default: 19]
    #[arg(long)]
    pub num_levels: Option<usize>,
    /// L1 penalty on the weights [default: 0.003]
    #[arg(long)]
    pub l1_strength: Option<f64>,
    /// Subgradient step size in target standard deviations [default: 0.5]
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Iteration cap per layer [default: 4000]
    #[arg(long)]
    pub max_iterations: Option<usize>,
    /// Minimum objective improvement over the patience window [default: 1e-9]
    #[arg(long)]
    pub convergence_tolerance: Option<f64>,
    /// Patience window in iterations [default: 100]
    #[arg(long)]
    pub patience: Option<usize>,
    /// Subsample each attribute to at most this many rows
    #[arg(long)]
    pub max_rows_per_attribute: Option<usize>,
    /// Subtract this attribute's quantiles from the others, scaled to remove correlation
    #[arg(long)]
    pub penalty_attribute: Option<usize>,
}

#[derive(Debug, Serialize)]
struct DiagnosticsRow {
    attribute: usize,
    level: f64,
    iterations: usize,
    initial_loss: f64,
    final_loss: f64,
    converged: bool,
}

pub fn train_quantiles(a: &TrainQuantilesArgs, g: &Globals) -> Result<()> {
    let data_path = required(&a.data, g, ATTRIBUTES)?;
    let data: Vec<AttributeExample> =
        io::read_jsonl(&data_path).with_context(|| format!("reading {}", data_path.display()))?;
    let d = RegressionConfig::default();
    let cfg = RegressionConfig {
        l1_strength: a.l1_strength.unwrap_or(d.l1_strength),
        learning_rate: a.learning_rate.unwrap_or(d.learning_rate),
        max_iterations: a.max_iterations.unwrap_or(d.max_iterations),
        convergence_tolerance: a.convergence_tolerance.unwrap_or(d.convergence_tolerance),
        patience: a.patience.unwrap_or(d.patience),
        max_rows_per_attribute: a.max_rows_per_attribute.or(d.max_rows_per_attribute),
        seed: g.seed,
    };
    cfg.validate()?;
    let levels = QuantileLevels::evenly_spaced(a.num_levels.unwrap_or(19))?;
    let mut models = fit_all_attributes(&data, &levels, &cfg)?;
    for m in &models {
        for l in m.metadata.layers.iter().filter(|l| !l.converged) {
            log::warn!(
                "attribute {} level {}: hit the iteration cap",
                m.attribute,
                l.level
            );
        }
    }
    if let Some(pen) = a.penalty_attribute {
        let features: Vec<Vec<f64>> = data.iter().map(|r| r.features.clone()).collect();
        let coefs = decorrelation_coefficients(&models, pen, &features)?;
        log::info!("decorrelation coefficients {coefs:?}");
        models = apply_decorrelation_penalty(&models, pen, &coefs)?;
    }
    let baseline: Vec<PointBaseline> = fit_point_baseline(&data, &cfg)?;
    let diagnostics: Vec<DiagnosticsRow> = models
        .iter()
        .flat_map(|m| {
            m.metadata.layers.iter().map(|l| DiagnosticsRow {
                attribute: m.attribute,
                level: l.level,
                iterations: l.iterations,
                initial_loss: l.initial_loss,
                final_loss: l.final_loss,
                converged: l.converged,
            })
        })
        .collect();
    io::write_json(&out_file(g, QUANTILE_MODELS), &models)?;
    io::write_json(&out_file(g, POINT_BASELINE), &baseline)?;
    io::write_csv(&out_file(g, FIT_DIAGNOSTICS), &diagnostics)?;
    Ok(())
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainGatingArgs {
    /// Frozen quantile models [default: <out>/quantile_models.json]
    #[arg(long, value_name = "PATH")]
    pub models: Option<PathBuf>,
    /// Preference pairs (JSONL) [default: <out>/preferences.jsonl]
    #[arg(long, value_name = "PATH")]
    pub prefs: Option<PathBuf>,
    /// Passes over the preference data [default: 3]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Peak AdamW learning rate, decayed by a cosine schedule [default: 3e-4]
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Pairs per step [default: 1024]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Decoupled weight decay on weight matrices [default: 1e-3]
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Width of each hidden layer [default: 64]
    #[arg(long)]
    pub hidden_dim: Option<usize>,
}

pub fn train_gating_cmd(a: &TrainGatingArgs, g: &Globals) -> Result<()> {
    let models = load_models(&required(&a.models, g, QUANTILE_MODELS)?)?;
    let prefs_path = required(&a.prefs, g, PREFERENCES)?;
    let prefs: Vec<PreferencePair> =
        io::read_jsonl(&prefs_path).with_context(|| format!("reading {}", prefs_path.display()))?;
    let first = prefs
        .first()
        .ok_or_else(|| anyhow!("{} has no preference pairs", prefs_path.display()))?;
    let d = GatingTrainConfig::default();
    let cfg = GatingTrainConfig {
        epochs: a.epochs.unwrap_or(d.epochs),
        learning_rate: a.learning_rate.unwrap_or(d.learning_rate),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        weight_decay: a.weight_decay.unwrap_or(d.weight_decay),
        hidden_dim: a.hidden_dim.unwrap_or(d.hidden_dim),
        seed: sub_seed(g.seed, 1),
    };
    let init = GatingParams::new(
        first.prompt_features.len(),
        cfg.hidden_dim,
        models.len(),
        sub_seed(g.seed, 0),
    )?;
    let (params, trace) = train_gating(&init, &models, &prefs, &cfg)?;
    io::write_json(&out_file(g, GATING), &params)?;
    io::write_csv(&out_file(g, GATING_LOSS), &trace)?;
    Ok(())
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreArgs {
    /// Quantile models [default: <out>/quantile_models.json]
    #[arg(long, value_name = "PATH")]
    pub models: Option<PathBuf>,
    /// Gating parameters [default: <out>/gating.json]
    #[arg(long, value_name = "PATH")]
    pub gating: Option<PathBuf>,
    /// Rows {"prompt_features": [...], "response_features": [...]} [default: <out>/probes.jsonl]
    #[arg(long, value_name = "PATH")]
    pub input: Option<PathBuf>,
    /// Risk aversion of the exponential utility [default: 1.0]
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Upper level of the reported tail mean [default: 0.25]
    #[arg(long)]
    pub tail_tau: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScoreRow {
    pub weights: Vec<f64>,
    pub levels: Vec<f64>,
    pub quantiles: Vec<f64>,
    pub expectation: f64,
    pub utility: f64,
    pub tail_mean: f64,
}

pub fn score(a: &ScoreArgs, g: &Globals) -> Result<()> {
    let model = load_reward_model(
        &required(&a.models, g, QUANTILE_MODELS)?,
        &required(&a.gating, g, GATING)?,
    )?;
    let input_path = required(&a.input, g, PROBES)?;
    let rows: Vec<ScoreInput> =
        io::read_jsonl(&input_path).with_context(|| format!("reading {}", input_path.display()))?;
    let utility = UtilityConfig::new(a.lambda.unwrap_or(1.0))?;
    let tail_tau = a.tail_tau.unwrap_or(0.25);
    let scored = rows
        .iter()
        .enumerate()
        .map(|(i, r)| -> Result<ScoreRow> {
            let (dist, expectation) = model
                .reward(&r.prompt_features, &r.response_features)
                .with_context(|| format!("row {}", i + 1))?;
            Ok(ScoreRow {
                weights: model
                    .gating
                    .forward(&r.prompt_features)?
                    .as_slice()
                    .to_vec(),
                levels: dist.levels().as_slice().to_vec(),
                quantiles: dist.values().to_vec(),
                expectation,
                utility: dist.risk_utility(&utility),
                tail_mean: dist.tail_mean(tail_tau)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    io::write_jsonl(&out_file(g, SCORES), &scored)?;
    Ok(())
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RlhfArgs {
    /// Quantile models [default: <out>/quantile_models.json]
    #[arg(long, value_name = "PATH")]
    pub models: Option<PathBuf>,
    /// Gating parameters [default: <out>/gating.json]
    #[arg(long, value_name = "PATH")]
    pub gating: Option<PathBuf>,
    /// Environment JSON; generated as a planted-trap environment when absent
    #[arg(long, value_name = "PATH")]
    pub env: Option<PathBuf>,
    /// Population preset for generated prompts [default: the gen-data spec in <out>, else planted-trap]
    #[arg(long)]
    pub preset: Option<String>,
    /// Prompts in a generated environment [default: 32]
    #[arg(long)]
    pub num_prompts: Option<usize>,
    /// neutral, aware or both [default: both]
    #[arg(long)]
    pub mode: Option<String>,
    /// Samples per prompt for the leave-one-out baseline [default: 2]
    #[arg(long)]
    pub k: Option<usize>,
    /// KL penalty weight [default: 0.05]
    #[arg(long)]
    pub beta: Option<f64>,
    /// Risk aversion of the risk-aware reward [default: 2.0]
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Adam step size [default: 0.01]
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Prompts per step [default: 8]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Training steps [default: 2000]
    #[arg(long)]
    pub steps: Option<usize>,
    /// Steps between trace rows [default: 10]
    #[arg(long)]
    pub trace_every: Option<usize>,
}

pub fn rlhf(a: &RlhfArgs, g: &Globals) -> Result<()> {
    let model = load_reward_model(
        &required(&a.models, g, QUANTILE_MODELS)?,
        &required(&a.gating, g, GATING)?,
    )?;
    let env: ToyEnvironment = match &a.env {
        Some(p) => {
            let env: ToyEnvironment =
                io::read_json(p).with_context(|| format!("reading environment {}", p.display()))?;
            env.validate()?;
            env
        }
        None => {
            let spec = match (&a.preset, input_path(&None, g, GROUND_TRUTH, false)?) {
                (Some(name), _) => preset(name)?,
                (None, Some(p)) => io::read_json::<GroundTruth>(&p)?.spec,
                (None, None) => PopulationSpec::planted_trap(),
            };
            ToyEnvironment::planted_trap(&spec, a.num_prompts.unwrap_or(32), sub_seed(g.seed, 0))?
        }
    };
    let d = RlhfConfig::default();
    let base = RlhfConfig {
        k: a.k.unwrap_or(d.k),
        beta: a.beta.unwrap_or(d.beta),
        reward_mode: RewardMode::RiskNeutral,
        learning_rate: a.learning_rate.unwrap_or(d.learning_rate),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        steps: a.steps.unwrap_or(d.steps),
        seed: g.seed,
    };
    let aware = RewardMode::RiskAware {
        lambda: a.lambda.unwrap_or(2.0),
    };
    let modes = match a.mode.as_deref().unwrap_or("both") {
        "neutral" => vec![RewardMode::RiskNeutral],
        "aware" => vec![aware],
        "both" => vec![RewardMode::RiskNeutral, aware],
        other => bail!("unknown mode {other:?}; expected neutral, aware or both"),
    };
    let table = RewardTable::build(&env, &model)
        .context("scoring the environment; its feature layout must match the trained models")?;
    io::write_json(&out_file(g, ENVIRONMENT), &env)?;
    let mut finals: Vec<TraceRow> = Vec::new();
    for mode in modes {
        let cfg = RlhfConfig {
            reward_mode: mode,
            ..base.clone()
        };
        let (policy, trace) = train_policy_on_table(&table, &cfg, a.trace_every.unwrap_or(10))?;
        io::write_json(
            &out_file(g, &format!("policy_{}.json", mode.name())),
            &policy,
        )?;
        io::write_csv(&out_file(g, &format!("trace_{}.csv", mode.name())), &trace)?;
        finals.extend(trace.last().cloned());
    }
    io::write_csv(&out_file(g, COMPARISON), &finals)?;
    Ok(())
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalArgs {
    /// Quantile models [default: <out>/quantile_models.json]
    #[arg(long, value_name = "PATH")]
    pub models: Option<PathBuf>,
    /// Gating parameters; pairwise accuracy is skipped without them [default: <out>/gating.json if present]
    #[arg(long, value_name = "PATH")]
    pub gating: Option<PathBuf>,
    /// Held-out rows for coverage [default: <out>/holdout_attributes.jsonl if present]
    #[arg(long, value_name = "PATH")]
    pub holdout: Option<PathBuf>,
    /// Held-out preference pairs [default: <out>/holdout_preferences.jsonl if present]
    #[arg(long, value_name = "PATH")]
    pub prefs: Option<PathBuf>,
    /// Ground truth written by gen-data [default: <out>/ground_truth.json if present]
    #[arg(long, value_name = "PATH")]
    pub ground_truth: Option<PathBuf>,
    /// Point baseline for the bimodal comparison [default: <out>/point_baseline.json if present]
    #[arg(long, value_name = "PATH")]
    pub baseline: Option<PathBuf>,
    /// Fail when pairwise accuracy is below this
    #[arg(long)]
    pub min_pairwise_accuracy: Option<f64>,
    /// Fail when any coverage deviation reaches this
    #[arg(long)]
    pub max_coverage_deviation: Option<f64>,
    /// Fail unless every bimodal probe is within tolerance
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub require_bimodal_capture: Option<bool>,
    /// Tolerance of the bimodal comparison [default: 0.05]
    #[arg(long)]
    pub bimodal_tolerance: Option<f64>,
    /// Probes in the bimodal comparison [default: 200]
    #[arg(long)]
    pub bimodal_probes: Option<usize>,
}

/// Returns the threshold failures; the report is written either way.
pub fn eval(a: &EvalArgs, g: &Globals) -> Result<Vec<String>> {
    let models_path = required(&a.models, g, QUANTILE_MODELS)?;
    let models = load_models(&models_path)?;
    let mut hashes = BTreeMap::new();
    let mut note = |p: &Path| -> Result<()> {
        let name = p
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        hashes.insert(name, io::file_sha256(p)?);
        Ok(())
    };
    note(&models_path)?;
    let mut report = EvalReport::default();

    if let Some(p) = input_path(&a.holdout, g, HOLDOUT_ATTRIBUTES, false)? {
        note(&p)?;
        let rows: Vec<AttributeExample> =
            io::read_jsonl(&p).with_context(|| format!("reading {}", p.display()))?;
        report.set_coverage(coverage_report(&models, &rows)?);
    }

    let truth: Option<GroundTruth> = match input_path(&a.ground_truth, g, GROUND_TRUTH, false)? {
        Some(p) => {
            note(&p)?;
            Some(io::read_json(&p).with_context(|| format!("reading {}", p.display()))?)
        }
        None => None,
    };

    let gating_path = input_path(&a.gating, g, GATING, false)?;
    let prefs_path = input_path(&a.prefs, g, HOLDOUT_PREFERENCES, false)?;
    if let (Some(gp), Some(pp)) = (&gating_path, &prefs_path) {
        note(gp)?;
        note(pp)?;
        let model = load_reward_model(&models_path, gp)?;
        let prefs: Vec<PreferencePair> =
            io::read_jsonl(pp).with_context(|| format!("reading {}", pp.display()))?;
        report.pairwise_accuracy = Some(pairwise_accuracy(&model, &prefs)?);
        if let Some(GroundTruth {
            g_star: Some(w),
            bt_noise: Some(noise),
            ..
        }) = &truth
        {
            let t = truth.as_ref().expect("matched above");
            let bayes = prefs
                .iter()
                .map(|p| {
                    let margin =
                        t.aggregate(&p.chosen_features, w) - t.aggregate(&p.rejected_features, w);
                    preference_probability(margin.abs(), *noise)
                })
                .sum::<f64>()
                / prefs.len() as f64;
            report.bayes_accuracy = Some(bayes);
        }
    }

    let two_groups = |t: &GroundTruth| t.spec.attributes.iter().all(|s| s.groups.len() == 2);
    let baseline_path = input_path(&a.baseline, g, POINT_BASELINE, false)?;
    if let (Some(t), Some(bp)) = (&truth, &baseline_path) {
        if two_groups(t) {
            note(bp)?;
            let baselines: Vec<PointBaseline> =
                io::read_json(bp).with_context(|| format!("reading {}", bp.display()))?;
            let probes = sample_feature_rows(
                &t.spec,
                a.bimodal_probes.unwrap_or(200),
                sub_seed(g.seed, 0),
            );
            report.bimodal = bimodal_capture_report(
                &models,
                &baselines,
                t,
                &probes,
                a.bimodal_tolerance.unwrap_or(0.05),
            )?;
        }
    }

    report.metadata = ReportMetadata {
        seeds: vec![g.seed],
        dataset_hashes: hashes,
    };
    report.validate()?;
    io::write_json(&out_file(g, EVAL_REPORT), &report)?;
    io::write_csv(&out_file(g, COVERAGE), &report.coverage)?;
    if !report.bimodal.is_empty() {
        io::write_csv(&out_file(g, BIMODAL), &report.bimodal)?;
    }
    let thresholds = EvalThresholds {
        min_pairwise_accuracy: a.min_pairwise_accuracy,
        max_coverage_deviation: a.max_coverage_deviation,
        require_bimodal_capture: a.require_bimodal_capture.unwrap_or(false),
    };
    Ok(report.failures(&thresholds))
}
