//! Quick invariant checks runnable from the CLI.

use crate::attention::{attention_weights, gamma_schedule, row_entropies, ModulationConfig};
use crate::controller::{ema_update, run_episode, EmaState, StrategyConfig};
use crate::decoding::{adaptive_temperature, sigmoid, top_k_set, top_p_set};
use crate::harness::experiment::{run_experiment, RunOptions};
use crate::harness::spec::{ExperimentSpec, NamedStrategy};
use crate::rng::RngState;
use crate::simworld::{EnvConfig, ExpertConfig, ExpertPolicy, SimEnv};
use crate::uncertainty::{
    baseline_metric_unit, self_uncertainty, self_uncertainty_kl_form, softmax, CategoricalDist, LogitVector,
    ReferenceConfig, UncertaintyMetricKind,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn random_dist(rng: &mut RngState, vocab: usize, scale: f64) -> CategoricalDist {
    let logits: Vec<f64> = (0..vocab).map(|_| scale * rng.next_gaussian()).collect();
    softmax(&LogitVector::new(logits).expect("finite"), 1.0).expect("valid")
}

fn check(name: &'static str, f: impl FnOnce() -> Result<String, String>) -> Check {
    match f() {
        Ok(detail) => Check {
            name,
            passed: true,
            detail,
        },
        Err(detail) => Check {
            name,
            passed: false,
            detail,
        },
    }
}

fn uncertainty_forms_agree() -> Result<String, String> {
    let mut rng = RngState::new(1);
    let mut worst = 0.0f64;
    for i in 0..200 {
        let vocab = 2 + (rng.next_u64() % 255) as usize;
        let eps = 10f64.powf(-10.0 - 4.0 * rng.next_f64());
        let scale = 0.5 + 4.0 * rng.next_f64();
        let d = random_dist(&mut rng, vocab, scale);
        let cfg = ReferenceConfig::new(eps, vocab).map_err(|e| e.to_string())?;
        let a = self_uncertainty(&d, &cfg).map_err(|e| e.to_string())?;
        let b = self_uncertainty_kl_form(&d, &cfg).map_err(|e| e.to_string())?;
        let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-300);
        worst = worst.max(rel);
        if rel > 1e-9 {
            return Err(format!("case {i}: relative gap {rel:e}"));
        }
    }
    Ok(format!("max relative gap {worst:.2e}"))
}

fn gate_contract() -> Result<String, String> {
    if sigmoid(0.0) != 0.5 {
        return Err("sigmoid(0) != 0.5".into());
    }
    let mut prev = 0.0;
    for i in 0..=10_000 {
        let u = -50.0 + 100.0 * i as f64 / 10_000.0;
        let tau = adaptive_temperature(u, 1.0);
        if !(tau > 0.0 && tau < 1.0) || tau < prev {
            return Err(format!("tau({u}) = {tau}"));
        }
        prev = tau;
    }
    Ok("tau in (0, T0), monotone".into())
}

fn gamma_bounds() -> Result<String, String> {
    let cfg = ModulationConfig::adaptive();
    if gamma_schedule(0.0, &cfg).gamma() != 1.0 {
        return Err("gamma(0) != 1".into());
    }
    let mut rng = RngState::new(2);
    for _ in 0..10_000 {
        let s = 40.0 * (rng.next_f64() - 0.5);
        let g = gamma_schedule(s, &cfg).gamma();
        if !(g > 0.5 && g < 2.0) {
            return Err(format!("gamma({s}) = {g}"));
        }
    }
    Ok("gamma in (0.5, 2)".into())
}

fn ema_closed_form() -> Result<String, String> {
    let alpha = 0.8;
    let mut s = ema_update(EmaState::new(alpha).map_err(|e| e.to_string())?, 4.0);
    for t in 1..1000 {
        s = ema_update(s, 1.0);
        let expected = 1.0 + 3.0 * alpha.powi(t);
        let v = s.value().unwrap_or(f64::NAN);
        if (v - expected).abs() > 1e-12 {
            return Err(format!("step {t}: {v} vs {expected}"));
        }
    }
    Ok("1000 steps within 1e-12".into())
}

fn attention_entropy_monotone() -> Result<String, String> {
    let mut rng = RngState::new(3);
    for i in 0..200 {
        let n = 2 + (rng.next_u64() % 15) as usize;
        let q = ndarray::Array2::from_shape_fn((1, 4), |_| rng.next_gaussian());
        let k = ndarray::Array2::from_shape_fn((n, 4), |_| rng.next_gaussian());
        let h: Vec<f64> = [0.5, 1.0, 2.0]
            .iter()
            .map(|g| row_entropies(&attention_weights(q.view(), k.view(), *g).expect("shapes"))[0])
            .collect();
        if !(h[0] < h[1] && h[1] < h[2]) {
            return Err(format!("row {i}: entropies {h:?}"));
        }
    }
    Ok("200 rows".into())
}

fn truncation_sets() -> Result<String, String> {
    let mut rng = RngState::new(4);
    for _ in 0..200 {
        let vocab = 2 + (rng.next_u64() % 15) as usize;
        let p = random_dist(&mut rng, vocab, 2.0);
        let probs = p.probs();
        let k = 1 + (rng.next_u64() as usize % vocab);
        let kept = top_k_set(probs, k);
        let threshold = kept.iter().map(|&i| probs[i]).fold(f64::INFINITY, f64::min);
        if kept.len() != k || probs.iter().filter(|&&x| x > threshold).count() >= k {
            return Err(format!("top-k mismatch for k={k}"));
        }
        let target = 0.1 + 0.85 * rng.next_f64();
        let kept = top_p_set(probs, target);
        let mass: f64 = kept.iter().map(|&i| probs[i]).sum();
        let without_last: f64 = kept[..kept.len() - 1].iter().map(|&i| probs[i]).sum();
        if mass < target - 1e-12 || without_last >= target - 1e-12 {
            return Err(format!("top-p mismatch for p={target}"));
        }
    }
    Ok("200 random distributions".into())
}

fn metric_extremes() -> Result<String, String> {
    for vocab in [2, 5, 64] {
        let cfg = ReferenceConfig::new(1e-12, vocab).map_err(|e| e.to_string())?;
        let one_hot = CategoricalDist::one_hot(vocab, 0).map_err(|e| e.to_string())?;
        let uniform = CategoricalDist::uniform(vocab).map_err(|e| e.to_string())?;
        for kind in UncertaintyMetricKind::BOUNDED {
            let lo = baseline_metric_unit(kind, &one_hot, &cfg).map_err(|e| e.to_string())?;
            let hi = baseline_metric_unit(kind, &uniform, &cfg).map_err(|e| e.to_string())?;
            if lo.abs() > 1e-9 || (hi - 1.0).abs() > 1e-9 {
                return Err(format!("{kind} on |V|={vocab}: one-hot {lo}, uniform {hi}"));
            }
        }
    }
    Ok("one-hot -> 0, uniform -> 1".into())
}

fn sanity_floor() -> Result<String, String> {
    let env = EnvConfig {
        n_distractors: 0,
        ambiguity_noise: 0.0,
        obstacle_density: 0.0,
        ..EnvConfig::default()
    };
    let policy = ExpertPolicy::new(ExpertConfig::default(), env.bins_per_axis).map_err(|e| e.to_string())?;
    for seed in 0..50 {
        let mut sim = SimEnv::new(env.with_seed(seed)).map_err(|e| e.to_string())?;
        let r = run_episode(&mut sim, &policy, &StrategyConfig::greedy(), seed).map_err(|e| e.to_string())?;
        if !r.success {
            return Err(format!("seed {seed}: {:?} after {} steps", r.outcome, r.steps));
        }
    }
    Ok("greedy solves 50/50 unambiguous scenes".into())
}

fn experiment_determinism() -> Result<String, String> {
    let spec = ExperimentSpec::new(
        EnvConfig::default(),
        vec![
            NamedStrategy {
                name: "greedy".into(),
                config: StrategyConfig::greedy(),
            },
            NamedStrategy {
                name: "scale".into(),
                config: StrategyConfig::scale(1.0),
            },
        ],
        5,
        2,
    );
    let a = run_experiment(&spec, RunOptions::default()).map_err(|e| e.to_string())?;
    let b = run_experiment(&spec, RunOptions { jobs: Some(1) }).map_err(|e| e.to_string())?;
    if a.summary.to_csv() != b.summary.to_csv() || a.raw_jsonl() != b.raw_jsonl() {
        return Err("outputs differ between runs".into());
    }
    Ok("summary and raw output identical".into())
}

pub fn run_selftest() -> Vec<Check> {
    vec![
        check("uncertainty_forms_agree", uncertainty_forms_agree),
        check("gate_contract", gate_contract),
        check("gamma_bounds", gamma_bounds),
        check("ema_closed_form", ema_closed_form),
        check("attention_entropy_monotone", attention_entropy_monotone),
        check("truncation_sets", truncation_sets),
        check("metric_extremes", metric_extremes),
        check("simworld_sanity_floor", sanity_floor),
        check("experiment_determinism", experiment_determinism),
    ]
}
