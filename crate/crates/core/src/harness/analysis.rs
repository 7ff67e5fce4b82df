use super::experiment::RawEpisode;
use crate::error::{Error, Result};

/// Success statistics of the episodes whose mean top-1 probability falls in
/// `[lo, hi)` (the last bin also includes `hi`).
#[derive(Debug, Clone, PartialEq)]
pub struct PmaxBin {
    pub lo: f64,
    pub hi: f64,
    pub episodes: usize,
    pub successes: usize,
}

impl PmaxBin {
    /// Percent; `None` for an empty bin.
    pub fn success_rate(&self) -> Option<f64> {
        (self.episodes > 0).then(|| 100.0 * self.successes as f64 / self.episodes as f64)
    }
}

/// Partitions episodes by mean p_max into `n_bins` equal-width bins spanning
/// the observed range. Episodes without telemetry are skipped.
pub fn analyze_pmax_bins(episodes: &[(f64, bool)], n_bins: usize) -> Result<Vec<PmaxBin>> {
    if n_bins == 0 {
        return Err(Error::invalid("need at least one bin"));
    }
    let pts: Vec<(f64, bool)> = episodes.iter().copied().filter(|(p, _)| p.is_finite()).collect();
    if pts.is_empty() {
        return Err(Error::invalid("no episodes with p_max telemetry"));
    }
    let lo = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / n_bins as f64;
    let mut bins: Vec<PmaxBin> = (0..n_bins)
        .map(|i| PmaxBin {
            lo: lo + width * i as f64,
            hi: if i + 1 == n_bins {
                hi
            } else {
                lo + width * (i + 1) as f64
            },
            episodes: 0,
            successes: 0,
        })
        .collect();
    for (p, ok) in pts {
        let i = if width > 0.0 {
            (((p - lo) / width) as usize).min(n_bins - 1)
        } else {
            0
        };
        bins[i].episodes += 1;
        bins[i].successes += ok as usize;
    }
    Ok(bins)
}

/// Mean p_max of a raw record: from the trace when present, otherwise the
/// stored episode mean.
pub fn episode_pmax(r: &RawEpisode) -> Option<f64> {
    match &r.trace {
        Some(t) if !t.is_empty() => {
            let all: Vec<f64> = t.iter().flat_map(|s| s.token_pmax.iter().copied()).collect();
            (!all.is_empty()).then(|| all.iter().sum::<f64>() / all.len() as f64)
        }
        _ => r.mean_pmax,
    }
}

pub fn analyze_raw(raw: &[RawEpisode], n_bins: usize) -> Result<Vec<PmaxBin>> {
    if raw.is_empty() {
        return Err(Error::invalid("raw results are empty"));
    }
    let pts: Vec<(f64, bool)> = raw
        .iter()
        .filter_map(|r| episode_pmax(r).map(|p| (p, r.success)))
        .collect();
    analyze_pmax_bins(&pts, n_bins)
}

pub fn bins_csv(bins: &[PmaxBin]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["pmax_lo", "pmax_hi", "episodes", "successes", "success_rate"])
        .expect("in-memory write");
    for b in bins {
        w.write_record([
            format!("{:.6}", b.lo),
            format!("{:.6}", b.hi),
            b.episodes.to_string(),
            b.successes.to_string(),
            b.success_rate().map(|r| format!("{r:.4}")).unwrap_or_default(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}
