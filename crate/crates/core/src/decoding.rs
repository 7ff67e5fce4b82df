//! Token sampling: the uncertainty-gated adaptive temperature plus the
//! greedy, fixed-temperature, top-k and top-p baselines.
//!
//! Every strategy samples only over the valid action tokens of the segment
//! assigned to the current position; all other vocabulary entries are
//! treated as masked out.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::uncertainty::{
    argmax, metric_value_unchecked, softmax_slice, LogitVector, UncertaintyMetricKind, DEFAULT_EPSILON,
};

/// Temperatures below this are decoded greedily; `softmax(l / tau)` is a
/// point mass at the argmax long before this anyway.
pub const MIN_TEMPERATURE: f64 = 1e-8;

/// Decoding strategy with its own hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum SamplingStrategy {
    Greedy,
    FixedTemperature {
        #[serde(default = "default_fixed_t")]
        t: f64,
    },
    TopK {
        #[serde(default = "default_top_k")]
        k: usize,
        #[serde(default = "default_top_k_t")]
        t: f64,
    },
    TopP {
        #[serde(default = "default_top_p")]
        p: f64,
        #[serde(default = "default_fixed_t")]
        t: f64,
    },
    Adaptive {
        /// Maximum temperature.
        #[serde(default = "default_t0")]
        t0: f64,
    },
}

fn default_fixed_t() -> f64 {
    1.0
}
fn default_top_k() -> usize {
    40
}
fn default_top_k_t() -> f64 {
    0.7
}
fn default_top_p() -> f64 {
    0.9
}
fn default_t0() -> f64 {
    1.0
}

impl SamplingStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            SamplingStrategy::Greedy => "greedy",
            SamplingStrategy::FixedTemperature { .. } => "fixed_temperature",
            SamplingStrategy::TopK { .. } => "top_k",
            SamplingStrategy::TopP { .. } => "top_p",
            SamplingStrategy::Adaptive { .. } => "adaptive",
        }
    }

    pub fn is_greedy(&self) -> bool {
        matches!(self, SamplingStrategy::Greedy)
    }
}

/// How many leading tokens of a step are sampled; the rest are greedy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PrefixLen {
    #[default]
    All,
    First(usize),
}

impl PrefixLen {
    pub fn covers(self, position: usize) -> bool {
        match self {
            PrefixLen::All => true,
            PrefixLen::First(n) => position < n,
        }
    }
}

impl Serialize for PrefixLen {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            PrefixLen::All => s.serialize_str("all"),
            PrefixLen::First(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for PrefixLen {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(usize),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Count(0) => Err(serde::de::Error::custom("sampled_prefix_len must be positive")),
            Raw::Count(n) => Ok(PrefixLen::First(n)),
            Raw::Word(w) if w == "all" => Ok(PrefixLen::All),
            Raw::Word(w) => Err(serde::de::Error::custom(format!(
                "sampled_prefix_len must be a positive integer or \"all\", got {w:?}"
            ))),
        }
    }
}

/// Which token positions feed the step-level mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UMeanScope {
    #[default]
    SampledPrefix,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    #[serde(flatten)]
    pub strategy: SamplingStrategy,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub sampled_prefix_len: PrefixLen,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self::new(SamplingStrategy::Greedy)
    }
}

impl SamplerConfig {
    pub fn new(strategy: SamplingStrategy) -> Self {
        Self {
            strategy,
            epsilon: DEFAULT_EPSILON,
            sampled_prefix_len: PrefixLen::All,
        }
    }

    pub fn greedy() -> Self {
        Self::new(SamplingStrategy::Greedy)
    }

    pub fn adaptive(t0: f64) -> Self {
        Self::new(SamplingStrategy::Adaptive { t0 })
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_prefix(mut self, prefix: PrefixLen) -> Self {
        self.sampled_prefix_len = prefix;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-6) {
            return Err(Error::config(format!(
                "epsilon must lie in (0, 1e-6], got {}",
                self.epsilon
            )));
        }
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must be positive, got {v}")))
            }
        };
        match self.strategy {
            SamplingStrategy::Greedy => Ok(()),
            SamplingStrategy::FixedTemperature { t } => positive("t", t),
            SamplingStrategy::TopK { k, t } => {
                if k == 0 {
                    return Err(Error::config("top_k needs k >= 1"));
                }
                positive("t", t)
            }
            SamplingStrategy::TopP { p, t } => {
                if !(p > 0.0 && p <= 1.0) {
                    return Err(Error::config(format!("top_p needs p in (0, 1], got {p}")));
                }
                positive("t", t)
            }
            SamplingStrategy::Adaptive { t0 } => positive("t0", t0),
        }
    }
}

/// A named contiguous block of vocabulary indices used by one token type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

/// Per-position vocabularies plus the mask of valid action tokens.
///
/// Position `k` of a step decodes from `segments[k % segments.len()]`, so a
/// single-segment layout serves every position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabLayout {
    segments: Vec<Segment>,
    action_mask: Vec<bool>,
    valid: Vec<Vec<usize>>,
}

impl VocabLayout {
    pub fn new(segments: Vec<Segment>, action_mask: Vec<bool>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::invalid("vocabulary layout without segments"));
        }
        let mut sorted: Vec<&Segment> = segments.iter().collect();
        sorted.sort_by_key(|s| s.start);
        for pair in sorted.windows(2) {
            if pair[0].start + pair[0].len > pair[1].start {
                return Err(Error::invalid(format!(
                    "segments {:?} and {:?} overlap",
                    pair[0].name, pair[1].name
                )));
            }
        }
        let mut valid = Vec::with_capacity(segments.len());
        for seg in &segments {
            if seg.start + seg.len > action_mask.len() {
                return Err(Error::invalid(format!(
                    "segment {:?} extends past the vocabulary of {}",
                    seg.name,
                    action_mask.len()
                )));
            }
            let ids: Vec<usize> = seg.range().filter(|&i| action_mask[i]).collect();
            if ids.len() < 2 {
                return Err(Error::invalid(format!(
                    "segment {:?} has fewer than 2 valid action tokens",
                    seg.name
                )));
            }
            valid.push(ids);
        }
        Ok(Self {
            segments,
            action_mask,
            valid,
        })
    }

    /// Back-to-back segments of the given sizes, every token valid.
    pub fn factorized(sizes: &[(&str, usize)]) -> Result<Self> {
        let mut start = 0;
        let segments = sizes
            .iter()
            .map(|(name, len)| {
                let s = Segment {
                    name: (*name).to_owned(),
                    start,
                    len: *len,
                };
                start += len;
                s
            })
            .collect();
        Self::new(segments, vec![true; start])
    }

    /// One segment covering a vocabulary of `size` tokens, all valid.
    pub fn single(size: usize) -> Result<Self> {
        Self::factorized(&[("action", size)])
    }

    pub fn vocab_size(&self) -> usize {
        self.action_mask.len()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn action_mask(&self) -> &[bool] {
        &self.action_mask
    }

    pub fn segment_index(&self, position: usize) -> usize {
        position % self.segments.len()
    }

    pub fn segment_for(&self, position: usize) -> &Segment {
        &self.segments[self.segment_index(position)]
    }

    /// Global indices of the valid tokens a position may emit.
    pub fn valid_tokens(&self, position: usize) -> &[usize] {
        &self.valid[self.segment_index(position)]
    }
}

/// Outcome of decoding a single token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenDecision {
    /// Global vocabulary index.
    pub token: usize,
    /// Token-level uncertainty under the configured metric, from the `T = 1`
    /// masked distribution.
    pub u: f64,
    /// Temperature used; only set for adaptive decoding.
    pub tau: Option<f64>,
    pub pmax: f64,
}

/// Uncertainty gate: `sigmoid(u)` for self-uncertainty, the bounded metric
/// value itself for the baseline metrics.
pub fn exploration_gate(metric: UncertaintyMetricKind, u: f64) -> f64 {
    match metric {
        UncertaintyMetricKind::SelfUncertainty => sigmoid(u),
        _ => u.clamp(0.0, 1.0),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `tau = t0 * sigmoid(u)`, kept strictly inside `(0, t0)` where the
/// sigmoid rounds to 0 or 1.
pub fn adaptive_temperature(u: f64, t0: f64) -> f64 {
    let tau = t0 * sigmoid(u);
    let below = f64::from_bits(t0.to_bits() - 1);
    tau.clamp(f64::MIN_POSITIVE.min(below), below)
}

/// Decodes one token at `position` with `sampling` (which may differ from
/// `cfg.strategy` when the position falls outside the sampled prefix).
fn decode_with(
    logits: &LogitVector,
    sampling: &SamplingStrategy,
    epsilon: f64,
    metric: UncertaintyMetricKind,
    layout: &VocabLayout,
    position: usize,
    rng: &mut RngState,
) -> Result<TokenDecision> {
    if logits.vocab_size() != layout.vocab_size() {
        return Err(Error::invalid(format!(
            "logits cover {} tokens, layout expects {}",
            logits.vocab_size(),
            layout.vocab_size()
        )));
    }
    let ids = layout.valid_tokens(position);
    if ids.is_empty() {
        return Err(Error::invalid("every token of the segment is masked"));
    }
    let seg: Vec<f64> = ids.iter().map(|&i| logits.values()[i]).collect();
    let probs = softmax_slice(&seg, 1.0);
    let u = metric_value_unchecked(metric, &probs, epsilon);
    let top = argmax(&probs);
    let pmax = probs[top];

    let (local, tau) = match *sampling {
        SamplingStrategy::Greedy => (argmax(&seg), None),
        SamplingStrategy::FixedTemperature { t } => (sample_at(&seg, t, rng), None),
        SamplingStrategy::TopK { k, t } => {
            let kept = top_k_set(&seg, k);
            (sample_subset(&seg, &kept, t, rng), None)
        }
        SamplingStrategy::TopP { p, t } => {
            let scaled = softmax_slice(&seg, t);
            let kept = top_p_set(&scaled, p);
            (sample_subset(&seg, &kept, t, rng), None)
        }
        SamplingStrategy::Adaptive { t0 } => {
            let tau = match metric {
                UncertaintyMetricKind::SelfUncertainty => adaptive_temperature(u, t0),
                _ => t0 * exploration_gate(metric, u),
            };
            (sample_at(&seg, tau, rng), Some(tau))
        }
    };
    Ok(TokenDecision {
        token: ids[local],
        u,
        tau,
        pmax,
    })
}

/// Decodes the token at `position` under `cfg`.
pub fn decode_token(
    logits: &LogitVector,
    cfg: &SamplerConfig,
    metric: UncertaintyMetricKind,
    layout: &VocabLayout,
    position: usize,
    rng: &mut RngState,
) -> Result<TokenDecision> {
    let sampling = if cfg.sampled_prefix_len.covers(position) {
        cfg.strategy
    } else {
        SamplingStrategy::Greedy
    };
    decode_with(logits, &sampling, cfg.epsilon, metric, layout, position, rng)
}

/// Inverse-CDF draw from `softmax(seg / t)`; greedy when `t` is negligible.
fn sample_at(seg: &[f64], t: f64, rng: &mut RngState) -> usize {
    if !(t >= MIN_TEMPERATURE) {
        return argmax(seg);
    }
    let probs = softmax_slice(seg, t);
    inverse_cdf(&probs, rng.next_f64())
}

fn sample_subset(seg: &[f64], kept: &[usize], t: f64, rng: &mut RngState) -> usize {
    if kept.len() == 1 {
        return kept[0];
    }
    let sub: Vec<f64> = kept.iter().map(|&i| seg[i]).collect();
    kept[sample_at(&sub, t, rng)]
}

/// First index whose cumulative probability exceeds `r`.
pub(crate) fn inverse_cdf(probs: &[f64], r: f64) -> usize {
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        cum += p;
        if r < cum {
            return i;
        }
    }
    last_positive
}

/// Indices of the `k` largest logits (ties keep the lower index), in
/// descending order. `k` larger than the segment keeps everything.
pub fn top_k_set(seg: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..seg.len()).collect();
    order.sort_by(|&a, &b| seg[b].total_cmp(&seg[a]).then(a.cmp(&b)));
    order.truncate(k.max(1));
    order
}

/// Smallest prefix of the descending-sorted distribution whose cumulative
/// mass reaches `p`.
pub fn top_p_set(probs: &[f64], p: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut cum = 0.0;
    for (n, &i) in order.iter().enumerate() {
        cum += probs[i];
        // Tolerate rounding so that p = 1 does not depend on summation order.
        if cum >= p - 1e-12 {
            order.truncate(n + 1);
            return order;
        }
    }
    order
}

/// Tokens and telemetry for one autoregressive step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDecode {
    pub tokens: Vec<usize>,
    pub token_u: Vec<f64>,
    pub token_tau: Vec<Option<f64>>,
    pub token_pmax: Vec<f64>,
    /// Mean token uncertainty over the positions selected by the scope.
    pub step_u: f64,
}

/// Decodes `n_tokens` positions autoregressively. `provider(k, prefix)`
/// returns the logits for position `k` given the tokens decoded before it.
pub fn decode_step<F>(
    mut provider: F,
    n_tokens: usize,
    cfg: &SamplerConfig,
    metric: UncertaintyMetricKind,
    scope: UMeanScope,
    layout: &VocabLayout,
    rng: &mut RngState,
) -> Result<StepDecode>
where
    F: FnMut(usize, &[usize]) -> Result<LogitVector>,
{
    if n_tokens == 0 {
        return Err(Error::invalid("a step needs at least one token"));
    }
    let mut out = StepDecode {
        tokens: Vec::with_capacity(n_tokens),
        token_u: Vec::with_capacity(n_tokens),
        token_tau: Vec::with_capacity(n_tokens),
        token_pmax: Vec::with_capacity(n_tokens),
        step_u: 0.0,
    };
    let mut scoped = 0.0;
    let mut scoped_n = 0usize;
    for k in 0..n_tokens {
        let logits = provider(k, &out.tokens)?;
        let d = decode_token(&logits, cfg, metric, layout, k, rng)?;
        let in_scope = match scope {
            UMeanScope::All => true,
            UMeanScope::SampledPrefix => cfg.sampled_prefix_len.covers(k),
        };
        if in_scope {
            scoped += d.u;
            scoped_n += 1;
        }
        out.tokens.push(d.token);
        out.token_u.push(d.u);
        out.token_tau.push(d.tau);
        out.token_pmax.push(d.pmax);
    }
    out.step_u = if scoped_n == 0 {
        out.token_u.iter().sum::<f64>() / n_tokens as f64
    } else {
        scoped / scoped_n as f64
    };
    Ok(out)
}
