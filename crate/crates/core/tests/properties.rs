//! Property tests of the numerical core.

use ndarray::Array2;
use proptest::prelude::*;

use scale_core::attention::{
    attention_weights, gamma_schedule, row_entropies, EncoderConfig, EncoderParams, ModulationConfig,
    ModulationStrategy,
};
use scale_core::decoding::{
    adaptive_temperature, decode_step, decode_token, SamplerConfig, Segment, UMeanScope, VocabLayout,
};
use scale_core::rng::RngState;
use scale_core::uncertainty::{
    kl_divergence, self_uncertainty, self_uncertainty_kl_form, softmax, CategoricalDist, LogitVector, ReferenceConfig,
    UncertaintyMetricKind,
};

fn logits(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-20.0f64..20.0, 2..=max_len)
}

fn dist(values: Vec<f64>) -> CategoricalDist {
    softmax(&LogitVector::new(values).unwrap(), 1.0).unwrap()
}

fn is_uniform(p: &CategoricalDist) -> bool {
    let v = p.vocab_size() as f64;
    p.probs().iter().all(|&x| (x - 1.0 / v).abs() < 1e-12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn uncertainty_forms_agree(values in logits(512), exp in 10.0f64..14.0) {
        let p = dist(values);
        let cfg = ReferenceConfig::new(10f64.powf(-exp), p.vocab_size()).unwrap();
        let a = self_uncertainty(&p, &cfg).unwrap();
        let b = self_uncertainty_kl_form(&p, &cfg).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn certainty_ordering(values in logits(64)) {
        let p = dist(values);
        prop_assume!(p.pmax() < 1.0 && !is_uniform(&p));
        let v = p.vocab_size();
        let cfg = ReferenceConfig::new(1e-12, v).unwrap();
        let u = self_uncertainty(&p, &cfg).unwrap();
        let lo = self_uncertainty(&CategoricalDist::one_hot(v, 0).unwrap(), &cfg).unwrap();
        let hi = self_uncertainty(&CategoricalDist::uniform(v).unwrap(), &cfg).unwrap();
        prop_assert!(lo < u && u < hi, "{lo} < {u} < {hi}");
    }

    #[test]
    fn epsilon_keeps_the_ranking(rows in prop::collection::vec(prop::collection::vec(-8.0f64..8.0, 12), 2..10)) {
        let dists: Vec<CategoricalDist> = rows.into_iter().map(dist).collect();
        let rank = |eps: f64| {
            let cfg = ReferenceConfig::new(eps, 12).unwrap();
            let u: Vec<f64> = dists.iter().map(|d| self_uncertainty(d, &cfg).unwrap()).collect();
            let mut order: Vec<usize> = (0..u.len()).collect();
            order.sort_by(|&a, &b| u[a].total_cmp(&u[b]).then(a.cmp(&b)));
            order
        };
        let base = rank(1e-10);
        for eps in [1e-11, 1e-12, 1e-13, 1e-14] {
            prop_assert_eq!(&rank(eps), &base);
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_itself(a in logits(32), b_seed in any::<u64>()) {
        let p = dist(a);
        let mut rng = RngState::new(b_seed);
        let q = dist((0..p.vocab_size()).map(|_| 3.0 * rng.next_gaussian()).collect());
        prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
        prop_assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn tau_stays_inside_the_interval(u in prop::num::f64::NORMAL | prop::num::f64::ZERO, t0 in 0.01f64..10.0) {
        let tau = adaptive_temperature(u, t0);
        prop_assert!(tau > 0.0 && tau < t0, "tau({u}) = {tau}");
    }

    #[test]
    fn tau_is_monotone(a in -60.0f64..60.0, b in -60.0f64..60.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(adaptive_temperature(lo, 1.0) <= adaptive_temperature(hi, 1.0));
    }

    #[test]
    fn gamma_is_bounded(signal in prop::num::f64::NORMAL | prop::num::f64::ZERO) {
        for strategy in [ModulationStrategy::AdaptiveDelta, ModulationStrategy::AdaptiveInstant, ModulationStrategy::FixedSign] {
            let cfg = ModulationConfig { strategy, ..ModulationConfig::adaptive() };
            let g = gamma_schedule(signal, &cfg).gamma();
            prop_assert!(g >= 1.0 / cfg.kappa && g <= cfg.kappa);
            if strategy != ModulationStrategy::FixedSign {
                prop_assert!(g > 1.0 / cfg.kappa && g < cfg.kappa, "gamma({signal}) = {g}");
            }
        }
    }

    #[test]
    fn entropy_rises_with_gamma(seed in any::<u64>(), n in 2usize..24, d in 1usize..12) {
        let mut rng = RngState::new(seed);
        let q = Array2::from_shape_fn((1, d), |_| rng.next_gaussian());
        let k = Array2::from_shape_fn((n, d), |_| rng.next_gaussian());
        let scores = q.dot(&k.t());
        let spread = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - scores.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-6);
        let h: Vec<f64> = [0.5, 0.8, 1.0, 1.25, 2.0]
            .iter()
            .map(|&g| row_entropies(&attention_weights(q.view(), k.view(), g).unwrap())[0])
            .collect();
        for w in h.windows(2) {
            prop_assert!(w[0] < w[1], "{h:?}");
        }
    }

    #[test]
    fn decoding_is_deterministic(values in prop::collection::vec(-5.0f64..5.0, 13), seed in any::<u64>()) {
        let layout = VocabLayout::factorized(&[("a", 5), ("b", 5), ("c", 3)]).unwrap();
        let cfg = SamplerConfig::adaptive(1.0);
        let run = || {
            let mut rng = RngState::new(seed);
            decode_step(
                |_, _| LogitVector::new(values.clone()),
                3,
                &cfg,
                UncertaintyMetricKind::SelfUncertainty,
                UMeanScope::default(),
                &layout,
                &mut rng,
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(&a.tokens, &b.tokens);
        prop_assert_eq!(format!("{a:?}"), format!("{b:?}"));
    }

    #[test]
    fn encoder_is_pure(seed in any::<u64>(), n in 1usize..10, gamma in 0.5f64..2.0) {
        let enc = EncoderParams::new(EncoderConfig { seed, ..EncoderConfig::default() }).unwrap();
        let mut rng = RngState::new(seed ^ 1);
        let tokens = Array2::from_shape_fn((n, enc.d_model()), |_| rng.next_gaussian());
        let a = enc.encode(tokens.view(), gamma).unwrap();
        let b = enc.encode(tokens.view(), gamma).unwrap();
        prop_assert_eq!(a.hidden, b.hidden);
        prop_assert_eq!(a.last_attention, b.last_attention);
    }
}

#[test]
fn masked_tokens_are_never_emitted() {
    let mask: Vec<bool> = (0..10).map(|i| i % 3 != 1).collect();
    let layout = VocabLayout::new(
        vec![Segment {
            name: "all".into(),
            start: 0,
            len: 10,
        }],
        mask.clone(),
    )
    .unwrap();
    let mut rng = RngState::new(7);
    let lv = LogitVector::new(
        (0..10)
            .map(|i| if i % 3 == 1 { 50.0 } else { 0.1 * i as f64 })
            .collect(),
    )
    .unwrap();
    let cfg = SamplerConfig::new(scale_core::decoding::SamplingStrategy::FixedTemperature { t: 5.0 });
    for _ in 0..1_000_000 {
        let tok = decode_token(&lv, &cfg, UncertaintyMetricKind::SelfUncertainty, &layout, 0, &mut rng).unwrap();
        assert!(mask[tok.token], "masked token {} emitted", tok.token);
    }
}
