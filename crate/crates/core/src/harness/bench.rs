use std::time::Instant;

use super::experiment::episode_seeds;
use super::spec::ExperimentSpec;
use super::stats::{linear_fit, mean, median, LinearFit};
use crate::attention::ModulationTarget;
use crate::controller::{Environment, ScaleController, StrategyConfig, TokenPolicy};
use crate::decoding::{decode_step, SamplerConfig};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::simworld::{ExpertPolicy, SimEnv};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchOptions {
    /// Timed episodes per configuration.
    pub episodes: usize,
    /// Untimed episodes run first.
    pub warmup: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            episodes: 20,
            warmup: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyRow {
    pub n_samples: usize,
    pub steps: usize,
    pub median_step_us: f64,
    pub mean_step_us: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    pub rows: Vec<LatencyRow>,
    /// Least-squares fit of median step latency against N (needs two or more
    /// distinct N).
    pub fit: Option<LinearFit>,
    pub greedy_step_us: f64,
    pub adaptive_step_us: f64,
}

impl LatencyReport {
    /// Adaptive over greedy single-pass step latency.
    pub fn overhead_ratio(&self) -> f64 {
        self.adaptive_step_us / self.greedy_step_us
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["n_samples", "steps", "median_step_us", "mean_step_us"])
            .expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.n_samples.to_string(),
                r.steps.to_string(),
                format!("{:.3}", r.median_step_us),
                format!("{:.3}", r.mean_step_us),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }
}

/// Per-step wall times (microseconds) of an episode that draws `n` full
/// encode + decode passes every control step and executes the first.
pub fn n_sample_episode(
    spec: &ExperimentSpec,
    policy: &ExpertPolicy,
    sampler: &SamplerConfig,
    n: usize,
    episode: usize,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::invalid("N must be at least 1"));
    }
    let (env_seed, seed) = episode_seeds(spec.master_seed, 0, episode);
    let mut env = SimEnv::new(spec.env.with_seed(env_seed))?;
    let base = RngState::new(seed);
    let layout = policy.layout().clone();
    let mut times = Vec::new();
    for t in 0..env.horizon() {
        let obs = env.observation().clone();
        let start = Instant::now();
        let mut first = None;
        for i in 0..n {
            let mut rng = base.fork(((t as u64) << 16) | i as u64);
            let visual = policy.encode(&obs, 1.0, ModulationTarget::EncoderUnimodal)?;
            let d = decode_step(
                |k, prefix| policy.logits(&visual, &obs, k, prefix),
                policy.n_tokens(),
                sampler,
                Default::default(),
                Default::default(),
                &layout,
                &mut rng,
            )?;
            first.get_or_insert(d.tokens);
        }
        times.push(start.elapsed().as_nanos() as f64 / 1e3);
        if env.apply(&first.expect("n >= 1"))?.done {
            break;
        }
    }
    Ok(times)
}

/// Median per-step latency of a single-pass greedy controller and a
/// single-pass adaptive controller evaluated on the same observations: the
/// adaptive controller drives the episode, the greedy one shadows it, and
/// the order of the two timed calls alternates every step. Each figure is
/// the median over episodes of the per-episode median step time.
pub fn single_pass_overhead(spec: &ExperimentSpec, opts: BenchOptions) -> Result<(f64, f64)> {
    let policy = ExpertPolicy::new(spec.expert, spec.env.bins_per_axis)?;
    let mut g_med = Vec::new();
    let mut a_med = Vec::new();
    for e in 0..opts.warmup + opts.episodes {
        let (env_seed, seed) = episode_seeds(spec.master_seed, 0, e);
        let mut env = SimEnv::new(spec.env.with_seed(env_seed))?;
        let mut greedy = ScaleController::new(StrategyConfig::greedy())?;
        let mut adaptive = ScaleController::new(StrategyConfig::scale(1.0))?;
        let base = RngState::new(seed);
        let (mut g_us, mut a_us) = (Vec::new(), Vec::new());
        for t in 0..env.horizon() {
            let obs = env.observation();
            let mut time_greedy = || -> Result<f64> {
                let mut rng = base.fork(t as u64);
                let start = Instant::now();
                greedy.step(&policy, obs, &mut rng)?;
                Ok(start.elapsed().as_nanos() as f64 / 1e3)
            };
            let (g, (a, tokens)) = if t % 2 == 0 {
                let g = time_greedy()?;
                (g, timed_step(&mut adaptive, &policy, obs, &base, t)?)
            } else {
                let a = timed_step(&mut adaptive, &policy, obs, &base, t)?;
                (time_greedy()?, a)
            };
            g_us.push(g);
            a_us.push(a);
            if env.apply(&tokens)?.done {
                break;
            }
        }
        if e >= opts.warmup {
            g_med.push(median(&g_us));
            a_med.push(median(&a_us));
        }
    }
    Ok((median(&g_med), median(&a_med)))
}

fn timed_step(
    c: &mut ScaleController,
    policy: &ExpertPolicy,
    obs: &crate::simworld::Observation,
    base: &RngState,
    t: usize,
) -> Result<(f64, Vec<usize>)> {
    let mut rng = base.fork(t as u64);
    let start = Instant::now();
    let out = c.step(policy, obs, &mut rng)?;
    Ok((start.elapsed().as_nanos() as f64 / 1e3, out.tokens))
}

/// Latency of N-sample generation for each N in `ns`, plus the single-pass
/// adaptive-vs-greedy comparison. Samples use the first strategy's sampler.
pub fn bench_latency(spec: &ExperimentSpec, ns: &[usize], opts: BenchOptions) -> Result<LatencyReport> {
    if ns.is_empty() {
        return Err(Error::config("N list must be non-empty"));
    }
    if ns.contains(&0) {
        return Err(Error::config("every N must be at least 1"));
    }
    if opts.episodes == 0 {
        return Err(Error::config("bench needs at least one timed episode"));
    }
    spec.validate()?;
    let policy = ExpertPolicy::new(spec.expert, spec.env.bins_per_axis)?;
    let sampler = spec.strategies[0].config.sampler;
    for e in 0..opts.warmup {
        n_sample_episode(spec, &policy, &sampler, 1, e)?;
    }
    let mut rows = Vec::new();
    for &n in ns {
        let mut times = Vec::new();
        for e in 0..opts.episodes {
            times.extend(n_sample_episode(spec, &policy, &sampler, n, opts.warmup + e)?);
        }
        rows.push(LatencyRow {
            n_samples: n,
            steps: times.len(),
            median_step_us: median(&times),
            mean_step_us: mean(&times),
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.n_samples as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.median_step_us).collect();
    let fit = linear_fit(&xs, &ys).ok();
    let (greedy_step_us, adaptive_step_us) = single_pass_overhead(spec, opts)?;
    Ok(LatencyReport {
        rows,
        fit,
        greedy_step_us,
        adaptive_step_us,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::spec::NamedStrategy;
    use crate::simworld::EnvConfig;

    fn spec() -> ExperimentSpec {
        ExperimentSpec::new(
            EnvConfig::default(),
            vec![NamedStrategy {
                name: "scale".into(),
                config: StrategyConfig::scale(1.0),
            }],
            1,
            1,
        )
    }

    #[test]
    fn report_shape() {
        let r = bench_latency(&spec(), &[1, 2], BenchOptions { episodes: 2, warmup: 0 }).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert!(r.fit.is_some());
        assert!(r.rows.iter().all(|x| x.median_step_us > 0.0));
        assert!(r.overhead_ratio().is_finite());
        assert!(r.to_csv().starts_with("n_samples,steps,median_step_us,mean_step_us\n"));
    }

    #[test]
    fn n_sample_trajectory_does_not_depend_on_n() {
        let s = spec();
        let policy = ExpertPolicy::new(s.expert, 5).unwrap();
        let sampler = SamplerConfig::adaptive(1.0);
        let a = n_sample_episode(&s, &policy, &sampler, 1, 3).unwrap().len();
        let b = n_sample_episode(&s, &policy, &sampler, 3, 3).unwrap().len();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_n_lists_are_rejected() {
        assert!(bench_latency(&spec(), &[], BenchOptions::default())
            .unwrap_err()
            .is_config());
        assert!(bench_latency(&spec(), &[0], BenchOptions::default())
            .unwrap_err()
            .is_config());
    }
}
