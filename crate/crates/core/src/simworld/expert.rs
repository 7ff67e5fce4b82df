use ndarray::s;
use serde::{Deserialize, Serialize};

use super::{move_path, resolve_move, ActionCommand, GripCommand, Gripper, Observation, Pos, FEATURE_DIM};
use crate::attention::{EncoderConfig, EncoderParams, ModulationTarget};
use crate::controller::TokenPolicy;
use crate::decoding::VocabLayout;
use crate::error::{Error, Result};
use crate::uncertainty::LogitVector;

/// Cost added to a move that would run into an obstacle, on top of staying
/// in place.
const BLOCK_PENALTY: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertConfig {
    /// Logit sharpness: one grid cell of extra distance costs `beta` nats.
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub encoder: EncoderConfig,
}

fn default_beta() -> f64 {
    4.0
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            beta: default_beta(),
            encoder: EncoderConfig {
                d_model: FEATURE_DIM,
                ..EncoderConfig::default()
            },
        }
    }
}

/// Output of one visual pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Percept {
    /// Attention-weighted centroid of the candidate objects, `None` when no
    /// object is visible.
    pub goal: Option<(f64, f64)>,
    pub candidates: Vec<Pos>,
    /// Weight on each candidate, summing to 1.
    pub weights: Vec<f64>,
}

/// Locates the task's object: attention weights from the task token to every
/// visible object, renormalized over objects, averaged into a position.
///
/// With `EncoderUnimodal` the whole encoder runs at `gamma` and the weights
/// come from its last layer; with `PolicyCrossmodal` the encoder runs
/// unmodulated and only the task-token readout uses `gamma`.
pub fn perceive(obs: &Observation, encoder: &EncoderParams, gamma: f64, target: ModulationTarget) -> Result<Percept> {
    let idx = obs.candidates();
    if idx.is_empty() {
        return Err(Error::invalid("observation shows no objects"));
    }
    let raw: Vec<f64> = match target {
        ModulationTarget::EncoderUnimodal => {
            let enc = encoder.encode(obs.tokens.view(), gamma)?;
            idx.iter().map(|&i| enc.last_attention[[0, i + 1]]).collect()
        }
        ModulationTarget::PolicyCrossmodal => {
            let enc = encoder.encode(obs.tokens.view(), 1.0)?;
            let keys =
                ndarray::Array2::from_shape_fn((idx.len(), enc.hidden.ncols()), |(r, c)| enc.hidden[[idx[r] + 1, c]]);
            encoder
                .readout_weights(enc.hidden.slice(s![0..1, ..]), keys.view(), gamma)?
                .to_vec()
        }
    };
    Ok(weighted_percept(obs, &idx, raw))
}

fn weighted_percept(obs: &Observation, idx: &[usize], raw: Vec<f64>) -> Percept {
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let candidates: Vec<Pos> = idx.iter().map(|&i| obs.cells[i].pos).collect();
    let (mut gx, mut gy) = (0.0, 0.0);
    for (p, w) in candidates.iter().zip(&weights) {
        gx += w * p.0 as f64;
        gy += w * p.1 as f64;
    }
    Percept {
        goal: Some((gx, gy)),
        candidates,
        weights,
    }
}

/// Vocabulary of the three-token action: `dx` bins, `dy` bins, grip.
pub fn action_layout(bins: usize) -> Result<VocabLayout> {
    VocabLayout::factorized(&[("dx", bins), ("dy", bins), ("grip", 3)])
}

/// Maps `(dx token, dy token, grip token)` to a command.
pub fn detokenize(tokens: &[usize], bins: usize) -> Result<ActionCommand> {
    if tokens.len() != 3 {
        return Err(Error::invalid(format!(
            "expected 3 action tokens, got {}",
            tokens.len()
        )));
    }
    let h = (bins as i32 - 1) / 2;
    let (tx, ty, tg) = (tokens[0], tokens[1], tokens[2]);
    if tx >= bins {
        return Err(Error::invalid(format!("dx token {tx} outside [0, {bins})")));
    }
    if !(bins..2 * bins).contains(&ty) {
        return Err(Error::invalid(format!("dy token {ty} outside [{bins}, {})", 2 * bins)));
    }
    let grip = match tg.checked_sub(2 * bins) {
        Some(0) => GripCommand::Noop,
        Some(1) => GripCommand::Close,
        Some(2) => GripCommand::Open,
        _ => return Err(Error::invalid(format!("grip token {tg} outside the grip segment"))),
    };
    Ok(ActionCommand {
        dx: tx as i32 - h,
        dy: (ty - bins) as i32 - h,
        grip,
    })
}

fn landing(obs: &Observation, dx: i32, dy: i32) -> (Pos, bool) {
    resolve_move(obs.agent, dx, dy, obs.width, obs.height, |p| obs.is_blocked(p))
}

fn move_cost(obs: &Observation, goal: (f64, f64), dx: i32, dy: i32) -> f64 {
    let (to, blocked) = landing(obs, dx, dy);
    let d = (goal.0 - to.0 as f64).abs() + (goal.1 - to.1 as f64).abs();
    if blocked {
        d + BLOCK_PENALTY
    } else {
        d
    }
}

/// Logits for action position `position` given the tokens already chosen.
///
/// Moves score `-beta` times the L1 distance from the landing cell to the
/// goal (the perceived object, or the receptacle while holding); `dx` takes
/// the best `dy` for each bin. A move blocked by an obstacle lands nowhere
/// and pays an extra penalty, so detours around an obstacle come out tied.
/// Grip favours `close` when the landing cell holds an object within half a
/// cell of the perceived goal, and `open` on the receptacle while holding.
pub fn expert_logits(
    goal: Option<(f64, f64)>,
    obs: &Observation,
    bins: usize,
    beta: f64,
    position: usize,
    prefix: &[usize],
) -> Result<LogitVector> {
    let h = (bins as i32 - 1) / 2;
    let holding = obs.gripper == Gripper::Holding;
    let goal = if holding {
        let r = obs
            .receptacle()
            .ok_or_else(|| Error::invalid("no receptacle in view"))?;
        (r.0 as f64, r.1 as f64)
    } else {
        goal.unwrap_or((obs.agent.0 as f64, obs.agent.1 as f64))
    };
    if !(goal.0.is_finite() && goal.1.is_finite()) {
        return Err(Error::invalid("perceived goal is not finite"));
    }
    let mut v = vec![0.0; 2 * bins + 3];
    match position {
        0 => {
            for b in 0..bins {
                let dx = b as i32 - h;
                let best = (-h..=h)
                    .map(|dy| move_cost(obs, goal, dx, dy))
                    .fold(f64::INFINITY, f64::min);
                v[b] = -beta * best;
            }
        }
        1 => {
            let dx = *prefix.first().ok_or_else(|| Error::invalid("dy needs the dx token"))? as i32 - h;
            for b in 0..bins {
                v[bins + b] = -beta * move_cost(obs, goal, dx, b as i32 - h);
            }
        }
        2 => {
            if prefix.len() < 2 {
                return Err(Error::invalid("grip needs the dx and dy tokens"));
            }
            let dx = prefix[0] as i32 - h;
            let dy = (prefix[1] - bins) as i32 - h;
            let (to, _) = landing(obs, dx, dy);
            let g = 2 * bins;
            if holding {
                v[g + 1] = -beta;
                v[g + 2] = if Some(to) == obs.receptacle() { beta } else { -beta };
            } else {
                let d = (goal.0 - to.0 as f64).abs().max((goal.1 - to.1 as f64).abs());
                v[g + 1] = if obs.object_at(to) {
                    2.0 * beta * (0.5 - d)
                } else {
                    -beta
                };
                v[g + 2] = -beta;
            }
        }
        _ => return Err(Error::invalid(format!("action has 3 tokens, got position {position}"))),
    }
    LogitVector::new(v)
}

/// Whether a straight move toward `goal` from the agent crosses an obstacle.
pub fn ray_blocked(obs: &Observation, goal: Pos) -> bool {
    let dx = goal.0 - obs.agent.0;
    let dy = goal.1 - obs.agent.1;
    move_path(obs.agent, dx, dy).any(|p| p != goal && obs.is_blocked(p))
}

/// The scripted policy: attention-based perception feeding [`expert_logits`].
#[derive(Debug, Clone)]
pub struct ExpertPolicy {
    cfg: ExpertConfig,
    encoder: EncoderParams,
    layout: VocabLayout,
    bins: usize,
}

impl ExpertPolicy {
    pub fn new(cfg: ExpertConfig, bins: usize) -> Result<Self> {
        if !(cfg.beta > 0.0 && cfg.beta.is_finite()) {
            return Err(Error::config("beta must be positive"));
        }
        if cfg.encoder.d_model != FEATURE_DIM {
            return Err(Error::config(format!("encoder d_model must be {FEATURE_DIM}")));
        }
        Ok(Self {
            encoder: EncoderParams::new(cfg.encoder)?,
            layout: action_layout(bins)?,
            cfg,
            bins,
        })
    }

    pub fn encoder(&self) -> &EncoderParams {
        &self.encoder
    }

    pub fn config(&self) -> &ExpertConfig {
        &self.cfg
    }
}

impl TokenPolicy<Observation> for ExpertPolicy {
    type Visual = Percept;

    fn layout(&self) -> &VocabLayout {
        &self.layout
    }

    fn n_tokens(&self) -> usize {
        3
    }

    fn encode(&self, obs: &Observation, gamma: f64, target: ModulationTarget) -> Result<Percept> {
        if obs.candidates().is_empty() {
            // Nothing to look for; still pay for the pass.
            self.encoder.encode(obs.tokens.view(), gamma)?;
            return Ok(Percept {
                goal: None,
                candidates: Vec::new(),
                weights: Vec::new(),
            });
        }
        perceive(obs, &self.encoder, gamma, target)
    }

    fn logits(&self, visual: &Percept, obs: &Observation, position: usize, prefix: &[usize]) -> Result<LogitVector> {
        expert_logits(visual.goal, obs, self.bins, self.cfg.beta, position, prefix)
    }
}
