use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::spec::ExperimentSpec;
use super::stats::{mean, median, stderr};
use crate::controller::{run_episode, EpisodeResult, InferenceMode, Outcome, UncertaintyRecord};
use crate::error::{Error, Result};
use crate::parallel::map_ordered;
use crate::rng::derive_seed;
use crate::simworld::{ExpertPolicy, SimEnv};

const ENV_STREAM: u64 = 0xE;
const CONTROL_STREAM: u64 = 0xC;

pub const SUMMARY_FILE: &str = "summary.csv";
pub const RAW_FILE: &str = "raw.jsonl";
pub const TIMING_FILE: &str = "timing.csv";

/// Layout seed and controller seed of one episode cell. The strategy is not
/// an input: every strategy meets the same scenes and the same random
/// streams, and adding a strategy never changes another's results.
pub fn episode_seeds(master: u64, seed_index: usize, episode: usize) -> (u64, u64) {
    let base = [master, seed_index as u64, episode as u64];
    (
        derive_seed(&[base[0], base[1], base[2], ENV_STREAM]),
        derive_seed(&[base[0], base[1], base[2], CONTROL_STREAM]),
    )
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Worker threads; `None` uses every core.
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRun {
    pub seed_index: usize,
    pub episode: usize,
    pub env_seed: u64,
    pub result: EpisodeResult,
}

/// One line of `raw.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawEpisode {
    pub strategy: String,
    pub seed_index: usize,
    pub episode: usize,
    pub env_seed: u64,
    pub seed: u64,
    pub success: bool,
    pub outcome: Outcome,
    pub steps: usize,
    pub forward_passes: u64,
    pub mean_pmax: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<UncertaintyRecord>>,
}

impl RawEpisode {
    pub fn from_run(run: &EpisodeRun, with_trace: bool) -> Self {
        let r = &run.result;
        Self {
            strategy: r.strategy.clone(),
            seed_index: run.seed_index,
            episode: run.episode,
            env_seed: run.env_seed,
            seed: r.seed,
            success: r.success,
            outcome: r.outcome,
            steps: r.steps,
            forward_passes: r.forward_passes,
            mean_pmax: r.mean_pmax(),
            trace: with_trace.then(|| r.trace.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub strategy: String,
    pub episodes: usize,
    pub successes: usize,
    /// Success rate in percent, averaged over seeds.
    pub success_rate: f64,
    /// Standard error of the per-seed success rates, in percent.
    pub success_stderr: f64,
    pub mean_steps: f64,
    pub passes_per_step: f64,
    pub mean_step_us: f64,
    pub median_step_us: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryTable {
    pub rows: Vec<SummaryRow>,
}

impl SummaryTable {
    pub fn row(&self, strategy: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.strategy == strategy)
    }

    /// Deterministic CSV: no timing columns.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "strategy",
            "episodes",
            "successes",
            "success_rate",
            "success_stderr",
            "mean_steps",
            "passes_per_step",
        ])
        .expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.strategy.clone(),
                r.episodes.to_string(),
                r.successes.to_string(),
                format!("{:.4}", r.success_rate),
                format!("{:.4}", r.success_stderr),
                format!("{:.4}", r.mean_steps),
                format!("{:.4}", r.passes_per_step),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }

    pub fn timing_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["strategy", "mean_step_us", "median_step_us"])
            .expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.strategy.clone(),
                format!("{:.3}", r.mean_step_us),
                format!("{:.3}", r.median_step_us),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub spec: ExperimentSpec,
    /// Ordered by strategy (file order), then seed, then episode.
    pub runs: Vec<EpisodeRun>,
    pub summary: SummaryTable,
}

impl ExperimentOutput {
    pub fn runs_for<'a>(&'a self, strategy: &'a str) -> impl Iterator<Item = &'a EpisodeRun> + 'a {
        self.runs.iter().filter(move |r| r.result.strategy == strategy)
    }

    pub fn raw_jsonl(&self) -> String {
        let mut out = String::new();
        for run in &self.runs {
            out.push_str(
                &serde_json::to_string(&RawEpisode::from_run(run, self.spec.record_trace)).expect("serializable"),
            );
            out.push('\n');
        }
        out
    }
}

/// Runs every (strategy, seed, episode) cell.
pub fn run_experiment(spec: &ExperimentSpec, opts: RunOptions) -> Result<ExperimentOutput> {
    spec.validate()?;
    let policy = ExpertPolicy::new(spec.expert, spec.env.bins_per_axis)?;
    let mut cells = Vec::new();
    for (si, _) in spec.strategies.iter().enumerate() {
        for seed_index in 0..spec.n_seeds {
            for episode in 0..spec.n_episodes {
                cells.push((si, seed_index, episode));
            }
        }
    }
    let outcomes = map_ordered(cells, opts.jobs, |(si, seed_index, episode)| -> Result<EpisodeRun> {
        let strategy = &spec.strategies[si];
        let (env_seed, seed) = episode_seeds(spec.master_seed, seed_index, episode);
        let mut env = SimEnv::new(spec.env.with_seed(env_seed))?;
        let mut result = run_episode(&mut env, &policy, &strategy.config, seed)?;
        result.strategy = strategy.name.clone();
        Ok(EpisodeRun {
            seed_index,
            episode,
            env_seed,
            result,
        })
    });
    let runs = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    let summary = summarize(spec, &runs);
    Ok(ExperimentOutput {
        spec: spec.clone(),
        runs,
        summary,
    })
}

pub fn summarize(spec: &ExperimentSpec, runs: &[EpisodeRun]) -> SummaryTable {
    let rows = spec
        .strategies
        .iter()
        .map(|s| {
            let mine: Vec<&EpisodeRun> = runs.iter().filter(|r| r.result.strategy == s.name).collect();
            let mut per_seed: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
            for r in &mine {
                let e = per_seed.entry(r.seed_index).or_default();
                e.0 += r.result.success as usize;
                e.1 += 1;
            }
            let rates: Vec<f64> = per_seed.values().map(|(k, n)| 100.0 * *k as f64 / *n as f64).collect();
            let steps: Vec<f64> = mine.iter().map(|r| r.result.steps as f64).collect();
            let total_steps: usize = mine.iter().map(|r| r.result.steps).sum();
            let total_passes: u64 = mine.iter().map(|r| r.result.forward_passes).sum();
            let step_us: Vec<f64> = mine
                .iter()
                .flat_map(|r| r.result.step_wall_ns.iter().map(|ns| *ns as f64 / 1e3))
                .collect();
            let passes_per_step = if total_steps == 0 {
                match s.config.inference_mode {
                    InferenceMode::SinglePass => 1.0,
                    InferenceMode::TwoStepOracle => 2.0,
                }
            } else {
                total_passes as f64 / total_steps as f64
            };
            SummaryRow {
                strategy: s.name.clone(),
                episodes: mine.len(),
                successes: mine.iter().filter(|r| r.result.success).count(),
                success_rate: mean(&rates),
                success_stderr: stderr(&rates),
                mean_steps: mean(&steps),
                passes_per_step,
                mean_step_us: if step_us.is_empty() { 0.0 } else { mean(&step_us) },
                median_step_us: if step_us.is_empty() { 0.0 } else { median(&step_us) },
            }
        })
        .collect();
    SummaryTable { rows }
}

/// Recomputes the deterministic summary columns from `raw.jsonl` lines.
pub fn summary_from_raw(spec: &ExperimentSpec, raw: &[RawEpisode]) -> SummaryTable {
    let runs: Vec<EpisodeRun> = raw
        .iter()
        .map(|r| EpisodeRun {
            seed_index: r.seed_index,
            episode: r.episode,
            env_seed: r.env_seed,
            result: EpisodeResult {
                strategy: r.strategy.clone(),
                seed: r.seed,
                success: r.success,
                outcome: r.outcome,
                steps: r.steps,
                trace: Vec::new(),
                step_wall_ns: Vec::new(),
                forward_passes: r.forward_passes,
            },
        })
        .collect();
    summarize(spec, &runs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputPaths {
    pub summary: PathBuf,
    pub raw: PathBuf,
    pub timing: PathBuf,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Writes `summary.csv`, `raw.jsonl` and `timing.csv` into `dir`. Every file
/// is attempted even if an earlier one fails; the first failure is returned.
pub fn write_outputs(out: &ExperimentOutput, dir: &Path) -> Result<OutputPaths> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = OutputPaths {
        summary: dir.join(SUMMARY_FILE),
        raw: dir.join(RAW_FILE),
        timing: dir.join(TIMING_FILE),
    };
    let results = [
        write_file(&paths.summary, &out.summary.to_csv()),
        write_file(&paths.raw, &out.raw_jsonl()),
        write_file(&paths.timing, &out.summary.timing_csv()),
    ];
    for r in results {
        r?;
    }
    Ok(paths)
}

/// Parses `raw.jsonl`; errors name the offending line.
pub fn read_raw(path: &Path) -> Result<Vec<RawEpisode>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_raw(&text, path)
}

pub fn parse_raw(text: &str, path: &Path) -> Result<Vec<RawEpisode>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                column: e.column(),
                message: e.to_string(),
            })
        })
        .collect()
}
