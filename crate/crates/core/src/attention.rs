//! Temperature-scaled attention, the seeded stand-in vision encoder and the
//! attention-temperature schedule.
//!
//! Attention temperature `gamma` divides the pre-softmax scores:
//! `softmax(Q K^T / (sqrt(d) * gamma)) V`. `gamma > 1` flattens attention,
//! `gamma < 1` sharpens it, `gamma = 1` is standard attention.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;

pub const DEFAULT_KAPPA: f64 = 2.0;

/// A validated attention temperature inside `(1/kappa, kappa)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionTemperature {
    gamma: f64,
    kappa: f64,
}

impl AttentionTemperature {
    pub fn new(gamma: f64, kappa: f64) -> Result<Self> {
        if !(kappa > 1.0 && kappa.is_finite()) {
            return Err(Error::invalid(format!("kappa must exceed 1, got {kappa}")));
        }
        if !(gamma > 1.0 / kappa && gamma < kappa) {
            return Err(Error::invalid(format!(
                "gamma {gamma} outside ({}, {kappa})",
                1.0 / kappa
            )));
        }
        Ok(Self { gamma, kappa })
    }

    pub fn identity(kappa: f64) -> Result<Self> {
        Self::new(1.0, kappa)
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModulationStrategy {
    /// `gamma = 1` always.
    #[default]
    Off,
    /// `kappa^tanh(du)` driven by the previous step's deviation from the EMA.
    AdaptiveDelta,
    /// `kappa^tanh(u)` driven by the previous step's raw uncertainty.
    AdaptiveInstant,
    /// `kappa`, `1/kappa` or 1 by the sign of the previous step's uncertainty.
    FixedSign,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModulationTarget {
    /// Scale self-attention in every encoder layer.
    #[default]
    EncoderUnimodal,
    /// Leave the encoder at `gamma = 1` and scale the policy's readout over
    /// visual tokens.
    PolicyCrossmodal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModulationConfig {
    #[serde(default)]
    pub strategy: ModulationStrategy,
    #[serde(default)]
    pub target: ModulationTarget,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
}

fn default_kappa() -> f64 {
    DEFAULT_KAPPA
}

impl Default for ModulationConfig {
    fn default() -> Self {
        Self::off()
    }
}

impl ModulationConfig {
    pub fn off() -> Self {
        Self {
            strategy: ModulationStrategy::Off,
            target: ModulationTarget::EncoderUnimodal,
            kappa: DEFAULT_KAPPA,
        }
    }

    pub fn adaptive() -> Self {
        Self {
            strategy: ModulationStrategy::AdaptiveDelta,
            ..Self::off()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 1.0 && self.kappa.is_finite()) {
            return Err(Error::config(format!("kappa must exceed 1, got {}", self.kappa)));
        }
        Ok(())
    }

    pub fn is_off(&self) -> bool {
        self.strategy == ModulationStrategy::Off
    }
}

/// Maps the previous step's signal to an attention temperature.
///
/// The caller chooses the signal to match the strategy: the deviation
/// `du_{t-1}` for [`ModulationStrategy::AdaptiveDelta`], the raw step
/// uncertainty `u_{t-1}` otherwise.
pub fn gamma_schedule(signal: f64, cfg: &ModulationConfig) -> AttentionTemperature {
    let kappa = cfg.kappa;
    let gamma = match cfg.strategy {
        ModulationStrategy::Off => 1.0,
        ModulationStrategy::AdaptiveDelta | ModulationStrategy::AdaptiveInstant => {
            // tanh saturates to exactly +-1 for |x| > ~19; pull it back inside
            // the open interval so the bound holds in floating point too.
            let t = signal.tanh().clamp(-MAX_TANH, MAX_TANH);
            kappa.powf(t)
        }
        ModulationStrategy::FixedSign => {
            if signal > 0.0 {
                kappa
            } else if signal < 0.0 {
                1.0 / kappa
            } else {
                1.0
            }
        }
    };
    AttentionTemperature { gamma, kappa }
}

const MAX_TANH: f64 = 1.0 - 1e-12;

/// Row-wise softmax of `Q K^T / (sqrt(d) * gamma)`.
pub fn attention_weights(q: ArrayView2<f64>, k: ArrayView2<f64>, gamma: f64) -> Result<Array2<f64>> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::invalid(format!("gamma must be positive, got {gamma}")));
    }
    if q.ncols() != k.ncols() {
        return Err(Error::invalid(format!(
            "query width {} does not match key width {}",
            q.ncols(),
            k.ncols()
        )));
    }
    if k.nrows() == 0 {
        return Err(Error::invalid("attention over zero keys"));
    }
    let scale = (q.ncols() as f64).sqrt() * gamma;
    let mut scores = q.dot(&k.t());
    scores.mapv_inplace(|x| x / scale);
    for mut row in scores.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let total = row.sum();
        row.mapv_inplace(|x| x / total);
    }
    Ok(scores)
}

/// `softmax(Q K^T / (sqrt(d) * gamma)) V`.
pub fn scaled_attention(q: ArrayView2<f64>, k: ArrayView2<f64>, v: ArrayView2<f64>, gamma: f64) -> Result<Array2<f64>> {
    if k.nrows() != v.nrows() {
        return Err(Error::invalid(format!("{} keys but {} values", k.nrows(), v.nrows())));
    }
    Ok(attention_weights(q, k, gamma)?.dot(&v))
}

/// Policy-side readout of visual tokens with the same temperature scaling as
/// [`scaled_attention`]. Only used when modulating the cross-modal stage.
pub fn crossmodal_scaled_readout(
    policy_query: ArrayView2<f64>,
    visual_keys: ArrayView2<f64>,
    visual_values: ArrayView2<f64>,
    gamma: f64,
) -> Result<Array2<f64>> {
    scaled_attention(policy_query, visual_keys, visual_values, gamma)
}

/// Shannon entropy (nats) of each row.
pub fn row_entropies(weights: &Array2<f64>) -> Array1<f64> {
    weights.map_axis(Axis(1), |row| {
        row.iter().filter(|p| **p > 0.0).map(|p| -p * p.ln()).sum()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    /// Diagonal gain of the query/key projections. Values above 1 make the
    /// encoder's attention track feature similarity closely.
    pub qk_gain: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_model: 32,
            qk_gain: 1.0,
            seed: 0x5EED,
        }
    }
}

#[derive(Debug, Clone)]
struct Layer {
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    wo: Array2<f64>,
}

/// Seeded random-weight transformer encoder. Immutable once built.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    cfg: EncoderConfig,
    layers: Vec<Layer>,
    pool: Array2<f64>,
}

/// Result of one encoder pass.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// Final hidden state of every token.
    pub hidden: Array2<f64>,
    /// Mean-pooled, projected feature vector.
    pub features: Array1<f64>,
    /// Head-averaged attention weights of the last layer.
    pub last_attention: Array2<f64>,
    /// Mean attention-row entropy over all layers, heads and rows.
    pub mean_entropy: f64,
}

impl EncoderParams {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        if cfg.n_layers == 0 || cfg.n_heads == 0 || cfg.d_model == 0 {
            return Err(Error::invalid("encoder dimensions must be positive"));
        }
        if !cfg.d_model.is_multiple_of(cfg.n_heads) {
            return Err(Error::invalid(format!(
                "d_model {} not divisible by {} heads",
                cfg.d_model, cfg.n_heads
            )));
        }
        if !cfg.qk_gain.is_finite() {
            return Err(Error::invalid("qk_gain must be finite"));
        }
        let d = cfg.d_model;
        let mut rng = RngState::new(cfg.seed);
        let mut gaussian =
            |scale: f64| -> Array2<f64> { Array2::from_shape_fn((d, d), |_| rng.next_gaussian() * scale) };
        let inv = 1.0 / (d as f64).sqrt();
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            let eye = Array2::<f64>::eye(d) * cfg.qk_gain;
            let wq = &eye + &gaussian(0.1 * inv);
            let wk = &eye + &gaussian(0.1 * inv);
            let wv = gaussian(inv);
            let wo = gaussian(0.1 * inv);
            layers.push(Layer { wq, wk, wv, wo });
        }
        let pool = gaussian(inv);
        Ok(Self { cfg, layers, pool })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn d_model(&self) -> usize {
        self.cfg.d_model
    }

    fn d_head(&self) -> usize {
        self.cfg.d_model / self.cfg.n_heads
    }

    /// Runs every layer with the same attention temperature `gamma`.
    ///
    /// Each layer is `x + relu(concat_h(attn_h(x)) W_o)`; the output is the
    /// mean-pooled final hidden state times a fixed projection.
    pub fn encode(&self, tokens: ArrayView2<f64>, gamma: f64) -> Result<Encoded> {
        if tokens.nrows() == 0 {
            return Err(Error::invalid("empty observation"));
        }
        if tokens.ncols() != self.cfg.d_model {
            return Err(Error::invalid(format!(
                "token width {} does not match d_model {}",
                tokens.ncols(),
                self.cfg.d_model
            )));
        }
        if let Some(bad) = tokens.iter().find(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("non-finite token feature {bad}")));
        }
        let n = tokens.nrows();
        let dh = self.d_head();
        let mut x = tokens.to_owned();
        let mut entropy_sum = 0.0;
        let mut entropy_rows = 0usize;
        let mut last_attention = Array2::zeros((n, n));
        for (li, layer) in self.layers.iter().enumerate() {
            let q = x.dot(&layer.wq);
            let k = x.dot(&layer.wk);
            let v = x.dot(&layer.wv);
            let mut heads = Array2::zeros((n, self.cfg.d_model));
            let is_last = li + 1 == self.layers.len();
            if is_last {
                last_attention.fill(0.0);
            }
            for h in 0..self.cfg.n_heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let w = attention_weights(q.slice(cols), k.slice(cols), gamma)?;
                entropy_sum += row_entropies(&w).sum();
                entropy_rows += n;
                heads.slice_mut(cols).assign(&w.dot(&v.slice(cols)));
                if is_last {
                    last_attention += &w;
                }
            }
            if is_last {
                last_attention /= self.cfg.n_heads as f64;
            }
            let update = heads.dot(&layer.wo).mapv(|y| y.max(0.0));
            x += &update;
        }
        let pooled = x.mean_axis(Axis(0)).expect("non-empty");
        let features = pooled.dot(&self.pool);
        Ok(Encoded {
            hidden: x,
            features,
            last_attention,
            mean_entropy: entropy_sum / entropy_rows as f64,
        })
    }

    /// Head-averaged readout weights of one query token over `keys` at
    /// temperature `gamma`, using the last layer's query/key projections.
    pub fn readout_weights(&self, query: ArrayView2<f64>, keys: ArrayView2<f64>, gamma: f64) -> Result<Array1<f64>> {
        let layer = self.layers.last().expect("at least one layer");
        let q = query.dot(&layer.wq);
        let k = keys.dot(&layer.wk);
        let dh = self.d_head();
        let mut acc = Array1::zeros(keys.nrows());
        for h in 0..self.cfg.n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let w = attention_weights(q.slice(cols), k.slice(cols), gamma)?;
            acc += &w.row(0);
        }
        Ok(acc / self.cfg.n_heads as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn entropy(p: &[f64]) -> f64 {
        p.iter().filter(|x| **x > 0.0).map(|x| -x * x.ln()).sum()
    }

    #[test]
    fn two_way_score_row() {
        // Score row (2, 0) with d = 1.
        let q = array![[2.0]];
        let k = array![[1.0], [0.0]];
        let w1 = attention_weights(q.view(), k.view(), 1.0).unwrap();
        assert_abs_diff_eq!(w1[[0, 0]], 0.880_797_077_977_882_4, epsilon = 1e-15);
        assert_abs_diff_eq!(w1[[0, 1]], 0.119_202_922_022_117_56, epsilon = 1e-15);
        let w2 = attention_weights(q.view(), k.view(), 2.0).unwrap();
        assert_abs_diff_eq!(w2[[0, 0]], 0.731_058_578_630_004_9, epsilon = 1e-15);
        assert_abs_diff_eq!(w2[[0, 1]], 0.268_941_421_369_995_1, epsilon = 1e-15);
        assert!(entropy(w2.row(0).as_slice().unwrap()) > entropy(w1.row(0).as_slice().unwrap()));
    }

    #[test]
    fn constant_scores_are_uniform_for_any_gamma() {
        let q = array![[1.0, 2.0]];
        let k = array![[0.5, 0.5], [0.5, 0.5], [0.5, 0.5]];
        for g in [0.5, 1.0, 2.0] {
            let w = attention_weights(q.view(), k.view(), g).unwrap();
            for x in w.iter() {
                assert_abs_diff_eq!(*x, 1.0 / 3.0, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn dimension_mismatches() {
        let a = Array2::<f64>::zeros((2, 3));
        let b = Array2::<f64>::zeros((2, 4));
        let c = Array2::<f64>::zeros((3, 3));
        assert!(scaled_attention(a.view(), b.view(), b.view(), 1.0).is_err());
        assert!(scaled_attention(a.view(), a.view(), c.view(), 1.0).is_err());
        assert!(attention_weights(a.view(), a.view(), 0.0).is_err());
        assert!(crossmodal_scaled_readout(a.view(), b.view(), b.view(), 1.0).is_err());
    }

    #[test]
    fn schedule_examples() {
        let cfg = ModulationConfig::adaptive();
        assert_eq!(gamma_schedule(0.0, &cfg).gamma(), 1.0);
        let g = gamma_schedule(0.549_306_144_334_054_8, &cfg).gamma();
        assert_abs_diff_eq!(g, std::f64::consts::SQRT_2, epsilon = 1e-12);
        for big in [50.0, 1e6, f64::MAX] {
            let g = gamma_schedule(big, &cfg).gamma();
            assert!(g < 2.0 && g > 1.99);
            let g = gamma_schedule(-big, &cfg).gamma();
            assert!(g > 0.5 && g < 0.51);
        }
        let off = ModulationConfig::off();
        assert_eq!(gamma_schedule(3.0, &off).gamma(), 1.0);
        let sign = ModulationConfig {
            strategy: ModulationStrategy::FixedSign,
            ..off
        };
        assert_eq!(gamma_schedule(0.1, &sign).gamma(), 2.0);
        assert_eq!(gamma_schedule(-0.1, &sign).gamma(), 0.5);
        assert_eq!(gamma_schedule(0.0, &sign).gamma(), 1.0);
    }

    #[test]
    fn temperature_bounds() {
        assert!(AttentionTemperature::new(2.0, 2.0).is_err());
        assert!(AttentionTemperature::new(0.5, 2.0).is_err());
        assert!(AttentionTemperature::new(1.0, 1.0).is_err());
        assert_eq!(AttentionTemperature::identity(3.0).unwrap().gamma(), 1.0);
    }

    fn random_tokens(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = RngState::new(seed);
        Array2::from_shape_fn((n, d), |_| rng.next_gaussian())
    }

    #[test]
    fn encoder_is_deterministic() {
        let cfg = EncoderConfig::default();
        let a = EncoderParams::new(cfg).unwrap();
        let b = EncoderParams::new(cfg).unwrap();
        let x = random_tokens(6, cfg.d_model, 1);
        let ea = a.encode(x.view(), 1.3).unwrap();
        let eb = b.encode(x.view(), 1.3).unwrap();
        assert_eq!(ea.features, eb.features);
        assert_eq!(ea.last_attention, eb.last_attention);
    }

    #[test]
    fn single_token_is_gamma_invariant() {
        let p = EncoderParams::new(EncoderConfig::default()).unwrap();
        let x = random_tokens(1, 32, 2);
        let base = p.encode(x.view(), 1.0).unwrap().features;
        for g in [0.5, 0.8, 2.0] {
            assert_eq!(p.encode(x.view(), g).unwrap().features, base);
        }
    }

    #[test]
    fn encoder_entropy_grows_with_gamma() {
        let p = EncoderParams::new(EncoderConfig::default()).unwrap();
        for seed in 0..20 {
            let x = random_tokens(8, 32, seed);
            let h: Vec<f64> = [0.5, 1.0, 2.0]
                .iter()
                .map(|g| p.encode(x.view(), *g).unwrap().mean_entropy)
                .collect();
            assert!(h[0] <= h[1] && h[1] <= h[2], "seed {seed}: {h:?}");
        }
    }

    #[test]
    fn encoder_rejects_bad_input() {
        let p = EncoderParams::new(EncoderConfig::default()).unwrap();
        assert!(p.encode(Array2::zeros((0, 32)).view(), 1.0).is_err());
        assert!(p.encode(Array2::zeros((2, 16)).view(), 1.0).is_err());
        let cfg = EncoderConfig {
            n_heads: 3,
            ..EncoderConfig::default()
        };
        assert!(EncoderParams::new(cfg).is_err());
    }
}
