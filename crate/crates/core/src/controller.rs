//! The closed-loop procedure: per control step, pick the attention
//! temperature from the previous step's uncertainty signal, encode the
//! observation once, decode the action tokens with uncertainty-gated
//! sampling, then fold the step uncertainty into an EMA.
//!
//! A two-pass oracle mode (greedy probe at `gamma = 1`, then a modulated
//! execution pass driven by the current step's deviation) is provided as an
//! upper-bound reference.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{gamma_schedule, ModulationConfig, ModulationStrategy, ModulationTarget};
use crate::decoding::{decode_step, SamplerConfig, StepDecode, UMeanScope, VocabLayout};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::uncertainty::{LogitVector, UncertaintyMetricKind};

pub const DEFAULT_ALPHA: f64 = 0.8;
/// Smoothing preset for policies whose uncertainty updates more often.
pub const FAST_ALPHA: f64 = 0.66;
pub const DEFAULT_HORIZON: usize = 120;

/// Exponential moving average of step-level uncertainty.
///
/// The first update initialises the average to the observed value, so the
/// first deviation is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    value: f64,
    alpha: f64,
    initialized: bool,
}

impl EmaState {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::invalid(format!("EMA alpha must lie in (0, 1), got {alpha}")));
        }
        Ok(Self {
            value: 0.0,
            alpha,
            initialized: false,
        })
    }

    pub fn value(&self) -> Option<f64> {
        self.initialized.then_some(self.value)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }
}

/// `ema <- alpha * ema + (1 - alpha) * u`, or `ema <- u` on first use.
pub fn ema_update(state: EmaState, u: f64) -> EmaState {
    if state.initialized {
        EmaState {
            value: state.alpha * state.value + (1.0 - state.alpha) * u,
            ..state
        }
    } else {
        EmaState {
            value: u,
            initialized: true,
            ..state
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    #[default]
    SinglePass,
    TwoStepOracle,
}

/// A complete inference recipe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub modulation: ModulationConfig,
    #[serde(default = "default_alpha")]
    pub ema_alpha: f64,
    #[serde(default)]
    pub inference_mode: InferenceMode,
    #[serde(default)]
    pub u_mean_scope: UMeanScope,
    #[serde(default)]
    pub metric: UncertaintyMetricKind,
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self::greedy()
    }
}

impl StrategyConfig {
    /// Greedy decoding, no modulation: the unmodified pipeline.
    pub fn greedy() -> Self {
        Self {
            sampler: SamplerConfig::greedy(),
            modulation: ModulationConfig::off(),
            ema_alpha: DEFAULT_ALPHA,
            inference_mode: InferenceMode::SinglePass,
            u_mean_scope: UMeanScope::SampledPrefix,
            metric: UncertaintyMetricKind::SelfUncertainty,
        }
    }

    /// Adaptive decoding and adaptive attention together.
    pub fn scale(t0: f64) -> Self {
        Self {
            sampler: SamplerConfig::adaptive(t0),
            modulation: ModulationConfig::adaptive(),
            ..Self::greedy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        self.modulation.validate()?;
        if !(self.ema_alpha > 0.0 && self.ema_alpha < 1.0) {
            return Err(Error::config(format!(
                "ema_alpha must lie in (0, 1), got {}",
                self.ema_alpha
            )));
        }
        Ok(())
    }
}

/// Per-step telemetry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyRecord {
    pub step: usize,
    pub tokens: Vec<usize>,
    pub token_u: Vec<f64>,
    pub token_tau: Vec<Option<f64>>,
    pub token_pmax: Vec<f64>,
    /// Step-level uncertainty fed to the EMA (the probe pass's value in
    /// oracle mode).
    pub step_u: f64,
    /// EMA after this step's update.
    pub ema: f64,
    /// `step_u` minus the EMA before this step's update.
    pub delta_u: f64,
    pub gamma: f64,
    /// Encoder + decode passes spent on this step.
    pub passes: u32,
}

/// What an environment reports after applying one action.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transition {
    pub done: bool,
    pub success: bool,
}

pub trait Environment {
    type Observation;

    fn observation(&self) -> &Self::Observation;

    fn apply(&mut self, tokens: &[usize]) -> Result<Transition>;

    /// Step budget of an episode.
    fn horizon(&self) -> usize;
}

/// An autoregressive token policy with a temperature-scalable visual stage.
pub trait TokenPolicy<O> {
    type Visual;

    fn layout(&self) -> &VocabLayout;

    /// Tokens decoded per control step.
    fn n_tokens(&self) -> usize;

    /// One visual encoding pass at attention temperature `gamma`, applied at
    /// `target`.
    fn encode(&self, obs: &O, gamma: f64, target: ModulationTarget) -> Result<Self::Visual>;

    fn logits(&self, visual: &Self::Visual, obs: &O, position: usize, prefix: &[usize]) -> Result<LogitVector>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PassCounts {
    pub encoder: u64,
    pub decode: u64,
}

/// Tokens chosen for a step plus its telemetry.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub tokens: Vec<usize>,
    pub record: UncertaintyRecord,
}

/// Per-episode controller state.
#[derive(Debug, Clone)]
pub struct ScaleController {
    cfg: StrategyConfig,
    ema: EmaState,
    prev_delta: f64,
    prev_u: Option<f64>,
    step: usize,
    passes: PassCounts,
}

impl ScaleController {
    pub fn new(cfg: StrategyConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            ema: EmaState::new(cfg.ema_alpha)?,
            cfg,
            prev_delta: 0.0,
            prev_u: None,
            step: 0,
            passes: PassCounts::default(),
        })
    }

    pub fn config(&self) -> &StrategyConfig {
        &self.cfg
    }

    pub fn ema(&self) -> &EmaState {
        &self.ema
    }

    pub fn passes(&self) -> PassCounts {
        self.passes
    }

    /// Deviation produced by the most recent step (0 before the first).
    pub fn last_delta(&self) -> f64 {
        self.prev_delta
    }

    /// Signal the schedule consumes for the given deviation and raw value.
    fn schedule_signal(&self, delta: f64, raw: Option<f64>) -> f64 {
        match self.cfg.modulation.strategy {
            ModulationStrategy::Off => 0.0,
            ModulationStrategy::AdaptiveDelta => delta,
            ModulationStrategy::AdaptiveInstant | ModulationStrategy::FixedSign => raw.unwrap_or(0.0),
        }
    }

    fn gamma_for(&self, delta: f64, raw: Option<f64>) -> f64 {
        gamma_schedule(self.schedule_signal(delta, raw), &self.cfg.modulation).gamma()
    }

    fn run_pass<O, P: TokenPolicy<O>>(
        &mut self,
        policy: &P,
        obs: &O,
        gamma: f64,
        sampler: &SamplerConfig,
        rng: &mut RngState,
    ) -> Result<StepDecode> {
        let visual = policy.encode(obs, gamma, self.cfg.modulation.target)?;
        self.passes.encoder += 1;
        let decoded = decode_step(
            |k, prefix| policy.logits(&visual, obs, k, prefix),
            policy.n_tokens(),
            sampler,
            self.cfg.metric,
            self.cfg.u_mean_scope,
            policy.layout(),
            rng,
        )?;
        self.passes.decode += 1;
        Ok(decoded)
    }

    /// Folds `u` into the EMA and returns the deviation from the previous
    /// average.
    fn track(&mut self, u: f64) -> f64 {
        let delta = match self.ema.value() {
            Some(prev) => u - prev,
            None => 0.0,
        };
        self.ema = ema_update(self.ema, u);
        delta
    }

    fn record(&self, decoded: StepDecode, step_u: f64, delta: f64, gamma: f64, passes: u32) -> StepOutput {
        StepOutput {
            tokens: decoded.tokens.clone(),
            record: UncertaintyRecord {
                step: self.step,
                tokens: decoded.tokens,
                token_u: decoded.token_u,
                token_tau: decoded.token_tau,
                token_pmax: decoded.token_pmax,
                step_u,
                ema: self.ema.value().expect("updated this step"),
                delta_u: delta,
                gamma,
                passes,
            },
        }
    }

    /// One single-pass control step. `rng` should be this step's own stream.
    pub fn scale_step<O, P: TokenPolicy<O>>(&mut self, policy: &P, obs: &O, rng: &mut RngState) -> Result<StepOutput> {
        if self.cfg.inference_mode != InferenceMode::SinglePass {
            return Err(Error::invalid("scale_step requires single_pass mode"));
        }
        let gamma = self.gamma_for(self.prev_delta, self.prev_u);
        let sampler = self.cfg.sampler;
        let decoded = self.run_pass(policy, obs, gamma, &sampler, rng)?;
        let u = decoded.step_u;
        let delta = self.track(u);
        let out = self.record(decoded, u, delta, gamma, 1);
        self.prev_delta = delta;
        self.prev_u = Some(u);
        self.step += 1;
        Ok(out)
    }

    /// One two-pass oracle step: a greedy probe at `gamma = 1` measures the
    /// current deviation, then the execution pass runs at the temperature
    /// that deviation implies. The EMA consumes the probe's uncertainty.
    pub fn oracle_step<O, P: TokenPolicy<O>>(&mut self, policy: &P, obs: &O, rng: &mut RngState) -> Result<StepOutput> {
        if self.cfg.inference_mode != InferenceMode::TwoStepOracle {
            return Err(Error::invalid("oracle_step requires two_step_oracle mode"));
        }
        let probe_sampler = SamplerConfig {
            strategy: crate::decoding::SamplingStrategy::Greedy,
            ..self.cfg.sampler
        };
        let probe = self.run_pass(policy, obs, 1.0, &probe_sampler, rng)?;
        let u = probe.step_u;
        let delta = self.track(u);
        let gamma = self.gamma_for(delta, Some(u));
        let sampler = self.cfg.sampler;
        let decoded = self.run_pass(policy, obs, gamma, &sampler, rng)?;
        let out = self.record(decoded, u, delta, gamma, 2);
        self.prev_delta = delta;
        self.prev_u = Some(u);
        self.step += 1;
        Ok(out)
    }

    /// Dispatches on the configured inference mode.
    pub fn step<O, P: TokenPolicy<O>>(&mut self, policy: &P, obs: &O, rng: &mut RngState) -> Result<StepOutput> {
        match self.cfg.inference_mode {
            InferenceMode::SinglePass => self.scale_step(policy, obs, rng),
            InferenceMode::TwoStepOracle => self.oracle_step(policy, obs, rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure,
    Timeout,
}

/// Result of one closed-loop episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub strategy: String,
    pub seed: u64,
    pub success: bool,
    pub outcome: Outcome,
    pub steps: usize,
    pub trace: Vec<UncertaintyRecord>,
    /// Wall time of each control step in nanoseconds.
    pub step_wall_ns: Vec<u64>,
    pub forward_passes: u64,
}

impl EpisodeResult {
    /// Mean top-1 probability over every decoded token of the episode.
    pub fn mean_pmax(&self) -> Option<f64> {
        let (sum, n) = self
            .trace
            .iter()
            .flat_map(|r| r.token_pmax.iter())
            .fold((0.0, 0usize), |(s, n), p| (s + p, n + 1));
        (n > 0).then(|| sum / n as f64)
    }
}

/// Runs one episode from a freshly reset environment. Control step `t`
/// samples from stream `t` of `seed`.
pub fn run_episode<E, P>(env: &mut E, policy: &P, cfg: &StrategyConfig, seed: u64) -> Result<EpisodeResult>
where
    E: Environment,
    P: TokenPolicy<E::Observation>,
{
    let mut controller = ScaleController::new(*cfg)?;
    let base = RngState::new(seed);
    let horizon = env.horizon();
    let mut trace = Vec::new();
    let mut wall = Vec::new();
    let mut outcome = Outcome::Timeout;
    for t in 0..horizon {
        let mut rng = base.fork(t as u64);
        let start = Instant::now();
        let out = controller.step(policy, env.observation(), &mut rng)?;
        wall.push(start.elapsed().as_nanos() as u64);
        let tr = env.apply(&out.tokens)?;
        trace.push(out.record);
        if tr.done {
            outcome = if tr.success {
                Outcome::Success
            } else if t + 1 >= horizon {
                Outcome::Timeout
            } else {
                Outcome::Failure
            };
            break;
        }
    }
    let passes = controller.passes();
    Ok(EpisodeResult {
        strategy: String::new(),
        seed,
        success: outcome == Outcome::Success,
        outcome,
        steps: trace.len(),
        trace,
        step_wall_ns: wall,
        forward_passes: passes.encoder,
    })
}
