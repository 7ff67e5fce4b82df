//! Distribution-level math: softmax, KL divergence, the dual-reference
//! self-uncertainty measure and the bounded baseline metrics.
//!
//! Self-uncertainty places a categorical distribution `p` between two
//! reference points: `q_low`, a near one-hot on the argmax of `p` (full
//! certainty), and `q_high`, the uniform distribution (full ambiguity):
//!
//! ```text
//! u = KL(p || q_low) - KL(p || q_high) = E_p[ log q_high(x) - log q_low(x) ]
//! ```
//!
//! The expectation form is what [`self_uncertainty`] evaluates. The
//! difference-of-divergences form is kept as [`self_uncertainty_kl_form`] so
//! the two can be checked against each other.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default mass removed from the argmax of the low-uncertainty reference.
pub const DEFAULT_EPSILON: f64 = 1e-12;

/// Probability floor used only by [`UncertaintyMetricKind::SelfCertaintyDecay`],
/// whose divergence direction divides by `p`.
pub const SELF_CERTAINTY_FLOOR: f64 = 1e-30;

const SUM_TOLERANCE: f64 = 1e-9;

/// Raw, finite log-scores over a vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invalid(format!(
                "logit vector needs at least 2 entries, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("logit {i} is not finite ({})", values[i])));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn vocab_size(&self) -> usize {
        self.0.len()
    }
}

/// A probability vector. Entries are non-negative and sum to one within `1e-9`.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDist(Vec<f64>);

impl CategoricalDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("empty distribution"));
        }
        if let Some(i) = probs.iter().position(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::invalid(format!("probability {i} is invalid ({})", probs[i])));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::invalid(format!("probabilities sum to {total}, expected 1")));
        }
        Ok(Self(probs))
    }

    pub fn uniform(vocab_size: usize) -> Result<Self> {
        if vocab_size == 0 {
            return Err(Error::invalid("uniform over an empty vocabulary"));
        }
        Ok(Self(vec![1.0 / vocab_size as f64; vocab_size]))
    }

    pub fn one_hot(vocab_size: usize, index: usize) -> Result<Self> {
        if index >= vocab_size {
            return Err(Error::invalid(format!(
                "one-hot index {index} out of range for vocabulary of {vocab_size}"
            )));
        }
        let mut probs = vec![0.0; vocab_size];
        probs[index] = 1.0;
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn vocab_size(&self) -> usize {
        self.0.len()
    }

    /// Index of the largest probability; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn pmax(&self) -> f64 {
        self.0[self.argmax()]
    }
}

/// Lowest-index argmax over a non-empty slice.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Parameters of the two reference distributions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceConfig {
    epsilon: f64,
    vocab_size: usize,
}

impl ReferenceConfig {
    pub fn new(epsilon: f64, vocab_size: usize) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon <= 1e-6) {
            return Err(Error::invalid(format!("epsilon must lie in (0, 1e-6], got {epsilon}")));
        }
        if vocab_size < 2 {
            return Err(Error::invalid(format!(
                "reference vocabulary needs at least 2 tokens, got {vocab_size}"
            )));
        }
        if 1.0 - epsilon <= 1.0 / vocab_size as f64 {
            return Err(Error::invalid("epsilon too large for the vocabulary"));
        }
        Ok(Self { epsilon, vocab_size })
    }

    /// Reference config sized to `dist`.
    pub fn for_dist(epsilon: f64, dist: &CategoricalDist) -> Result<Self> {
        Self::new(epsilon, dist.vocab_size())
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn check(&self, dist: &CategoricalDist) -> Result<()> {
        if dist.vocab_size() != self.vocab_size {
            return Err(Error::invalid(format!(
                "distribution has {} tokens, reference config expects {}",
                dist.vocab_size(),
                self.vocab_size
            )));
        }
        Ok(())
    }
}

/// Which uncertainty measure drives the controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyMetricKind {
    #[default]
    SelfUncertainty,
    NormalizedEntropy,
    InversePmax,
    Gini,
    SelfCertaintyDecay,
}

impl UncertaintyMetricKind {
    pub const ALL: [UncertaintyMetricKind; 5] = [
        UncertaintyMetricKind::SelfUncertainty,
        UncertaintyMetricKind::NormalizedEntropy,
        UncertaintyMetricKind::InversePmax,
        UncertaintyMetricKind::Gini,
        UncertaintyMetricKind::SelfCertaintyDecay,
    ];

    pub const BOUNDED: [UncertaintyMetricKind; 4] = [
        UncertaintyMetricKind::NormalizedEntropy,
        UncertaintyMetricKind::InversePmax,
        UncertaintyMetricKind::Gini,
        UncertaintyMetricKind::SelfCertaintyDecay,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UncertaintyMetricKind::SelfUncertainty => "self_uncertainty",
            UncertaintyMetricKind::NormalizedEntropy => "normalized_entropy",
            UncertaintyMetricKind::InversePmax => "inverse_pmax",
            UncertaintyMetricKind::Gini => "gini",
            UncertaintyMetricKind::SelfCertaintyDecay => "self_certainty_decay",
        }
    }

    /// Value the metric takes on the uniform distribution over `vocab_size`
    /// tokens, i.e. its maximum. `None` for the unbounded self-uncertainty.
    pub fn upper_bound(self, vocab_size: usize) -> Option<f64> {
        let v = vocab_size as f64;
        match self {
            UncertaintyMetricKind::SelfUncertainty => None,
            UncertaintyMetricKind::NormalizedEntropy => Some(1.0),
            UncertaintyMetricKind::InversePmax | UncertaintyMetricKind::Gini => Some(1.0 - 1.0 / v),
            UncertaintyMetricKind::SelfCertaintyDecay => Some(1.0),
        }
    }
}

impl std::fmt::Display for UncertaintyMetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// `softmax(values / temperature)`, stabilised by max-subtraction.
pub fn softmax(logits: &LogitVector, temperature: f64) -> Result<CategoricalDist> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    Ok(CategoricalDist(softmax_slice(logits.values(), temperature)))
}

/// Unchecked softmax over a non-empty slice of finite values.
pub(crate) fn softmax_slice(values: &[f64], temperature: f64) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = values.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

/// Near one-hot at the argmax of `dist`: `1 - eps` there, `eps / (|V| - 1)`
/// elsewhere.
pub fn make_low_reference(dist: &CategoricalDist, cfg: &ReferenceConfig) -> Result<CategoricalDist> {
    cfg.check(dist)?;
    let off = cfg.epsilon / (cfg.vocab_size - 1) as f64;
    let mut probs = vec![off; cfg.vocab_size];
    probs[dist.argmax()] = 1.0 - cfg.epsilon;
    Ok(CategoricalDist(probs))
}

pub fn make_high_reference(cfg: &ReferenceConfig) -> CategoricalDist {
    CategoricalDist(vec![1.0 / cfg.vocab_size as f64; cfg.vocab_size])
}

/// `KL(p || q)` in nats, with `0 * log 0 = 0`.
pub fn kl_divergence(p: &CategoricalDist, q: &CategoricalDist) -> Result<f64> {
    if p.vocab_size() != q.vocab_size() {
        return Err(Error::invalid(format!(
            "KL dimension mismatch: {} vs {}",
            p.vocab_size(),
            q.vocab_size()
        )));
    }
    let mut total = 0.0;
    for (index, (&pi, &qi)) in p.probs().iter().zip(q.probs()).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::DivergenceUndefined { index, p: pi });
        }
        total += pi * (pi.ln() - qi.ln());
    }
    Ok(total)
}

/// Self-uncertainty via the expected log-likelihood ratio
/// `E_p[log q_high(x) - log q_low(x)]`.
///
/// `q_low` takes only two values, so the expectation collapses to two terms
/// weighted by the argmax mass and the remaining mass. The remaining mass is
/// summed directly rather than taken as `1 - p_max`, which would cancel
/// catastrophically for confident distributions.
pub fn self_uncertainty(dist: &CategoricalDist, cfg: &ReferenceConfig) -> Result<f64> {
    cfg.check(dist)?;
    Ok(self_uncertainty_unchecked(dist.probs(), cfg.epsilon))
}

pub(crate) fn self_uncertainty_unchecked(probs: &[f64], epsilon: f64) -> f64 {
    let vocab = probs.len() as f64;
    let top = argmax(probs);
    let rest: f64 = probs
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != top)
        .map(|(_, p)| p)
        .sum();
    let log_high = -vocab.ln();
    let log_low_top = (-epsilon).ln_1p();
    let log_low_rest = epsilon.ln() - (vocab - 1.0).ln();
    probs[top] * (log_high - log_low_top) + rest * (log_high - log_low_rest)
}

/// Self-uncertainty as the literal difference of two KL divergences. Kept as
/// the reference the expectation form is checked against.
pub fn self_uncertainty_kl_form(dist: &CategoricalDist, cfg: &ReferenceConfig) -> Result<f64> {
    let low = make_low_reference(dist, cfg)?;
    let high = make_high_reference(cfg);
    Ok(kl_divergence(dist, &low)? - kl_divergence(dist, &high)?)
}

/// Bounded baseline metric in `[0, 1]`; 0 is maximal certainty.
///
/// `cfg` only fixes the vocabulary size here; epsilon is unused.
pub fn baseline_metric(kind: UncertaintyMetricKind, dist: &CategoricalDist, cfg: &ReferenceConfig) -> Result<f64> {
    cfg.check(dist)?;
    if kind == UncertaintyMetricKind::SelfUncertainty {
        return Err(Error::invalid(
            "self_uncertainty is unbounded and not a baseline metric",
        ));
    }
    Ok(bounded_metric_unchecked(kind, dist.probs()))
}

/// Baseline metric rescaled by its value on the uniform distribution, so that
/// one-hot maps to 0 and uniform maps to exactly 1 for every kind.
pub fn baseline_metric_unit(kind: UncertaintyMetricKind, dist: &CategoricalDist, cfg: &ReferenceConfig) -> Result<f64> {
    let raw = baseline_metric(kind, dist, cfg)?;
    let top = kind
        .upper_bound(dist.vocab_size())
        .expect("bounded metric has an upper bound");
    Ok((raw / top).clamp(0.0, 1.0))
}

pub(crate) fn bounded_metric_unchecked(kind: UncertaintyMetricKind, probs: &[f64]) -> f64 {
    let vocab = probs.len() as f64;
    let value = match kind {
        UncertaintyMetricKind::NormalizedEntropy => {
            let h: f64 = probs.iter().filter(|p| **p > 0.0).map(|p| -p * p.ln()).sum();
            h / vocab.ln()
        }
        UncertaintyMetricKind::InversePmax => 1.0 - probs[argmax(probs)],
        UncertaintyMetricKind::Gini => 1.0 - probs.iter().map(|p| p * p).sum::<f64>(),
        UncertaintyMetricKind::SelfCertaintyDecay => {
            let q = 1.0 / vocab;
            let kl: f64 = probs
                .iter()
                .map(|p| q * (q.ln() - p.max(SELF_CERTAINTY_FLOOR).ln()))
                .sum();
            (-kl).exp()
        }
        UncertaintyMetricKind::SelfUncertainty => unreachable!("unbounded metric"),
    };
    value.clamp(0.0, 1.0)
}

/// Raw token-level value of `kind`: self-uncertainty in nats, or a bounded
/// baseline metric.
pub fn metric_value(kind: UncertaintyMetricKind, dist: &CategoricalDist, cfg: &ReferenceConfig) -> Result<f64> {
    match kind {
        UncertaintyMetricKind::SelfUncertainty => self_uncertainty(dist, cfg),
        _ => baseline_metric(kind, dist, cfg),
    }
}

pub(crate) fn metric_value_unchecked(kind: UncertaintyMetricKind, probs: &[f64], epsilon: f64) -> f64 {
    match kind {
        UncertaintyMetricKind::SelfUncertainty => self_uncertainty_unchecked(probs, epsilon),
        _ => bounded_metric_unchecked(kind, probs),
    }
}

/// Step-level uncertainty: the mean of the token-level values.
pub fn step_uncertainty(token_uncertainties: &[f64]) -> Result<f64> {
    if token_uncertainties.is_empty() {
        return Err(Error::invalid("step uncertainty of an empty token list"));
    }
    Ok(token_uncertainties.iter().sum::<f64>() / token_uncertainties.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn dist(p: &[f64]) -> CategoricalDist {
        CategoricalDist::new(p.to_vec()).unwrap()
    }

    fn cfg(v: usize) -> ReferenceConfig {
        ReferenceConfig::new(DEFAULT_EPSILON, v).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let uniform = softmax(&LogitVector::new(vec![0.0; 4]).unwrap(), 1.0).unwrap();
        for p in uniform.probs() {
            assert_eq!(*p, 0.25);
        }
        let logits = LogitVector::new(vec![3.0, 2.0, 1.0, 0.0]).unwrap();
        let p = softmax(&logits, 1.0).unwrap();
        let expected = [
            0.643_914_259_887_972_3,
            0.236_882_818_089_910_1,
            0.087_144_318_742_032_57,
            0.032_058_603_280_084_99,
        ];
        for (a, b) in p.probs().iter().zip(expected) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        let entropy =
            |d: &CategoricalDist| -> f64 { d.probs().iter().filter(|p| **p > 0.0).map(|p| -p * p.ln()).sum() };
        let mut last = 0.0;
        for t in [0.5, 1.0, 4.0, 100.0, 1e6] {
            let h = entropy(&softmax(&logits, t).unwrap());
            assert!(h > last);
            last = h;
        }
        assert_abs_diff_eq!(last, 4f64.ln(), epsilon = 1e-6);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        let logits = LogitVector::new(vec![1.0, 2.0]).unwrap();
        assert!(softmax(&logits, 0.0).is_err());
        assert!(softmax(&logits, -1.0).is_err());
        assert!(LogitVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(LogitVector::new(vec![1.0, f64::INFINITY]).is_err());
        assert!(LogitVector::new(vec![1.0]).is_err());
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let logits = LogitVector::new(vec![1e300, 0.0, -1e300]).unwrap();
        let p = softmax(&logits, 1.0).unwrap();
        assert_eq!(p.probs(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn low_reference() {
        let c = cfg(4);
        let q = make_low_reference(&dist(&[0.7, 0.1, 0.1, 0.1]), &c).unwrap();
        assert_eq!(q.probs()[0], 1.0 - 1e-12);
        for p in &q.probs()[1..] {
            assert_abs_diff_eq!(*p, 1e-12 / 3.0, epsilon = 1e-25);
        }
        let tie = make_low_reference(&dist(&[0.25; 4]), &c).unwrap();
        assert_eq!(tie.argmax(), 0);
        assert_eq!(tie.probs()[0], 1.0 - 1e-12);
        let q = make_low_reference(&dist(&[0.1, 0.8, 0.1, 0.0]), &c).unwrap();
        assert_eq!(q.argmax(), 1);
        assert_eq!(q.probs()[1], 1.0 - 1e-12);
    }

    #[test]
    fn high_reference() {
        assert_eq!(make_high_reference(&cfg(4)).probs(), &[0.25; 4]);
        assert_eq!(make_high_reference(&cfg(2)).probs(), &[0.5; 2]);
        let q = make_high_reference(&cfg(256));
        assert!(q.probs().iter().all(|p| *p == 1.0 / 256.0));
    }

    #[test]
    fn kl_examples() {
        let p = dist(&[0.7, 0.1, 0.15, 0.05]);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let one_hot = CategoricalDist::one_hot(4, 0).unwrap();
        let u = CategoricalDist::uniform(4).unwrap();
        assert_abs_diff_eq!(
            kl_divergence(&one_hot, &u).unwrap(),
            1.386_294_361_119_890_6,
            epsilon = 1e-15
        );
        assert_eq!(kl_divergence(&u, &u).unwrap(), 0.0);
    }

    #[test]
    fn kl_errors() {
        let a = CategoricalDist::uniform(3).unwrap();
        let b = CategoricalDist::uniform(4).unwrap();
        assert!(matches!(kl_divergence(&a, &b), Err(Error::InvalidArgument(_))));
        let q = CategoricalDist::one_hot(3, 0).unwrap();
        assert!(matches!(
            kl_divergence(&a, &q),
            Err(Error::DivergenceUndefined { index: 1, .. })
        ));
    }

    #[test]
    fn self_uncertainty_examples() {
        // Frozen from a 40-digit evaluation of the expectation.
        let c = cfg(4);
        let cases = [
            (vec![1.0, 0.0, 0.0, 0.0], -1.386_294_361_118_890_6),
            (vec![0.25; 4], 20.160_930_692_327_853),
            (vec![0.7, 0.1, 0.1, 0.1], 7.232_595_660_259_807),
        ];
        for (p, expected) in cases {
            let d = dist(&p);
            let u = self_uncertainty(&d, &c).unwrap();
            assert_abs_diff_eq!(u, expected, epsilon = 1e-12);
            let u2 = self_uncertainty_kl_form(&d, &c).unwrap();
            assert_abs_diff_eq!(u2, expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn reference_config_validation() {
        assert!(ReferenceConfig::new(0.0, 4).is_err());
        assert!(ReferenceConfig::new(1e-3, 4).is_err());
        assert!(ReferenceConfig::new(1e-12, 1).is_err());
        let c = cfg(3);
        assert!(self_uncertainty(&CategoricalDist::uniform(4).unwrap(), &c).is_err());
    }

    #[test]
    fn baseline_metric_examples() {
        let c = cfg(4);
        let u = CategoricalDist::uniform(4).unwrap();
        let h = CategoricalDist::one_hot(4, 2).unwrap();
        let ne = UncertaintyMetricKind::NormalizedEntropy;
        assert_abs_diff_eq!(baseline_metric(ne, &u, &c).unwrap(), 1.0, epsilon = 1e-15);
        assert_eq!(baseline_metric(ne, &h, &c).unwrap(), 0.0);
        assert_eq!(baseline_metric(UncertaintyMetricKind::Gini, &u, &c).unwrap(), 0.75);
        assert_eq!(
            baseline_metric(UncertaintyMetricKind::InversePmax, &u, &c).unwrap(),
            0.75
        );
        let sc = UncertaintyMetricKind::SelfCertaintyDecay;
        assert_abs_diff_eq!(baseline_metric(sc, &u, &c).unwrap(), 1.0, epsilon = 1e-15);
        assert!(baseline_metric(sc, &h, &c).unwrap() < 1e-20);
        assert!(baseline_metric(UncertaintyMetricKind::SelfUncertainty, &u, &c).is_err());
    }

    #[test]
    fn unit_metrics_hit_both_extremes() {
        for v in [2, 3, 7, 64] {
            let c = cfg(v);
            let u = CategoricalDist::uniform(v).unwrap();
            let h = CategoricalDist::one_hot(v, v - 1).unwrap();
            for kind in UncertaintyMetricKind::BOUNDED {
                assert_abs_diff_eq!(baseline_metric_unit(kind, &u, &c).unwrap(), 1.0, epsilon = 1e-12);
                assert_abs_diff_eq!(baseline_metric_unit(kind, &h, &c).unwrap(), 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn step_mean() {
        assert_eq!(step_uncertainty(&[1.0, 2.0, 3.0]).unwrap(), 2.0);
        assert_eq!(step_uncertainty(&[0.3; 7]).unwrap(), 0.3);
        assert_eq!(step_uncertainty(&[5.5]).unwrap(), 5.5);
        assert!(step_uncertainty(&[]).is_err());
    }

    #[test]
    fn metric_kind_serde_names() {
        for kind in UncertaintyMetricKind::ALL {
            let json = serde_json::to_string(&kind).unwrap();
            assert_eq!(json, format!("\"{}\"", kind.name()));
        }
    }
}
