//! A small grid pick-and-place world.
//!
//! The agent must pick the object whose features match the task token, carry
//! it to the receptacle and release it there. Distractor objects share part
//! of the target's features, observation features are noisy (more so far from
//! the agent), and obstacles block straight-line moves, so an expert that
//! reads the scene through attention faces both perceptual ambiguity and
//! near-tied action choices.

mod expert;

pub use expert::{
    action_layout, detokenize, expert_logits, perceive, ray_blocked, ExpertConfig, ExpertPolicy, Percept,
};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::controller::{Environment, Transition};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, RngState};

pub type Pos = (i32, i32);

const PLACEMENT_RETRIES: usize = 200;
/// Distortion multiplier for an object in the agent's own cell; grows
/// linearly to `1 + VIEW_FLOOR` at the far side of the grid.
const VIEW_FLOOR: f64 = 0.1;
/// Size of the per-step jitter relative to the persistent distortion.
const JITTER: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    #[serde(default = "defaults::grid")]
    pub grid_w: usize,
    #[serde(default = "defaults::grid")]
    pub grid_h: usize,
    #[serde(default = "defaults::n_distractors")]
    pub n_distractors: usize,
    #[serde(default = "defaults::similarity")]
    pub distractor_similarity: f64,
    #[serde(default = "defaults::density")]
    pub obstacle_density: f64,
    #[serde(default = "defaults::noise")]
    pub ambiguity_noise: f64,
    #[serde(default = "defaults::horizon")]
    pub horizon: usize,
    #[serde(default = "defaults::bins")]
    pub bins_per_axis: usize,
    /// Scale of every observation feature vector. Larger values sharpen the
    /// encoder's attention scores.
    #[serde(default = "defaults::feature_gain")]
    pub feature_gain: f64,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn grid() -> usize {
        9
    }
    pub fn n_distractors() -> usize {
        2
    }
    pub fn similarity() -> f64 {
        0.8
    }
    pub fn density() -> f64 {
        0.3
    }
    pub fn noise() -> f64 {
        0.5
    }
    pub fn horizon() -> usize {
        crate::controller::DEFAULT_HORIZON
    }
    pub fn bins() -> usize {
        5
    }
    pub fn feature_gain() -> f64 {
        12.0
    }
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            grid_w: defaults::grid(),
            grid_h: defaults::grid(),
            n_distractors: defaults::n_distractors(),
            distractor_similarity: defaults::similarity(),
            obstacle_density: defaults::density(),
            ambiguity_noise: defaults::noise(),
            horizon: defaults::horizon(),
            bins_per_axis: defaults::bins(),
            feature_gain: defaults::feature_gain(),
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn n_obstacles(&self) -> usize {
        (self.obstacle_density * (self.grid_w * self.grid_h) as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_w == 0 || self.grid_h == 0 {
            return Err(Error::config("grid dimensions must be positive"));
        }
        if self.grid_w > 1024 || self.grid_h > 1024 {
            return Err(Error::config("grid dimensions above 1024 are not supported"));
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon must be positive"));
        }
        if self.bins_per_axis < 3 || self.bins_per_axis.is_multiple_of(2) {
            return Err(Error::config(format!(
                "bins_per_axis must be odd and at least 3, got {}",
                self.bins_per_axis
            )));
        }
        for (name, v) in [
            ("distractor_similarity", self.distractor_similarity),
            ("obstacle_density", self.obstacle_density),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.ambiguity_noise >= 0.0 && self.ambiguity_noise.is_finite()) {
            return Err(Error::config("ambiguity_noise must be finite and non-negative"));
        }
        if !(self.feature_gain > 0.0 && self.feature_gain.is_finite()) {
            return Err(Error::config("feature_gain must be positive"));
        }
        // agent + target + distractors + receptacle + obstacles
        let needed = 3 + self.n_distractors + self.n_obstacles();
        if needed > self.grid_w * self.grid_h {
            return Err(Error::config(format!(
                "{needed} entities do not fit a {}x{} grid",
                self.grid_w, self.grid_h
            )));
        }
        Ok(())
    }

    fn half_range(&self) -> i32 {
        (self.bins_per_axis as i32 - 1) / 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gripper {
    Open,
    Closed,
    Holding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GripCommand {
    Noop,
    Close,
    Open,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionCommand {
    pub dx: i32,
    pub dy: i32,
    pub grip: GripCommand,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Object,
    Receptacle,
    Obstacle,
}

/// One occupied cell as the agent sees it: where it is and what kind of
/// thing sits there, but not whether an object is the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellToken {
    pub pos: Pos,
    pub kind: CellKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// Row 0 is the task token; row `i + 1` belongs to `cells[i]`.
    pub tokens: Array2<f64>,
    pub cells: Vec<CellToken>,
    pub agent: Pos,
    pub gripper: Gripper,
    pub width: usize,
    pub height: usize,
    pub step: usize,
}

impl Observation {
    pub fn is_blocked(&self, p: Pos) -> bool {
        self.cells.iter().any(|c| c.pos == p && c.kind == CellKind::Obstacle)
    }

    pub fn object_at(&self, p: Pos) -> bool {
        self.cells.iter().any(|c| c.pos == p && c.kind == CellKind::Object)
    }

    pub fn receptacle(&self) -> Option<Pos> {
        self.cells
            .iter()
            .find(|c| c.kind == CellKind::Receptacle)
            .map(|c| c.pos)
    }

    /// Indices into `cells` of the pickable objects.
    pub fn candidates(&self) -> Vec<usize> {
        (0..self.cells.len())
            .filter(|&i| self.cells[i].kind == CellKind::Object)
            .collect()
    }

    pub fn in_grid(&self, p: Pos) -> bool {
        p.0 >= 0 && p.1 >= 0 && (p.0 as usize) < self.width && (p.1 as usize) < self.height
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Object {
    /// `None` while held.
    pos: Option<Pos>,
    feature: Vec<f64>,
    /// Standard-normal direction of this object's viewpoint distortion.
    distortion: Vec<f64>,
    is_target: bool,
}

/// Serializable snapshot of a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneLayout {
    pub width: usize,
    pub height: usize,
    pub agent: Pos,
    pub gripper: Gripper,
    pub target: Option<Pos>,
    pub distractors: Vec<Pos>,
    pub receptacle: Pos,
    pub obstacles: Vec<Pos>,
    pub step: usize,
}

#[derive(Debug, Clone)]
pub struct EnvState {
    cfg: EnvConfig,
    agent: Pos,
    gripper: Gripper,
    held: Option<usize>,
    objects: Vec<Object>,
    receptacle: Pos,
    receptacle_feature: Vec<f64>,
    obstacles: Vec<Pos>,
    obstacle_features: Vec<Vec<f64>>,
    blocked: Vec<bool>,
    task: Vec<f64>,
    step: usize,
    done: bool,
    success: bool,
    obs: Observation,
}

/// Width of every feature vector (the encoder's model width).
pub const FEATURE_DIM: usize = 32;

fn random_unit(rng: &mut RngState) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..FEATURE_DIM).map(|_| rng.next_gaussian()).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Unit vector with cosine `s` to the unit vector `g`.
fn blend_toward(g: &[f64], s: f64, rng: &mut RngState) -> Vec<f64> {
    loop {
        let r = random_unit(rng);
        let dot: f64 = r.iter().zip(g).map(|(a, b)| a * b).sum();
        let orth: Vec<f64> = r.iter().zip(g).map(|(a, b)| a - dot * b).collect();
        let n = orth.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            let c = (1.0 - s * s).max(0.0).sqrt();
            return g.iter().zip(&orth).map(|(a, o)| s * a + c * o / n).collect();
        }
    }
}

fn chebyshev(a: Pos, b: Pos) -> i32 {
    (a.0 - b.0).abs().max((a.1 - b.1).abs())
}

/// Cells visited by a move of `(dx, dy)` from `from`, excluding `from`.
pub fn move_path(from: Pos, dx: i32, dy: i32) -> impl Iterator<Item = Pos> {
    let n = dx.abs().max(dy.abs());
    (1..=n).map(move |i| {
        let f = i as f64 / n as f64;
        (
            from.0 + (dx as f64 * f).round() as i32,
            from.1 + (dy as f64 * f).round() as i32,
        )
    })
}

/// Where a move of `(dx, dy)` lands: clipped at the walls, and unchanged if
/// any cell along the way is blocked. Returns the landing cell and whether
/// the move was blocked.
pub fn resolve_move(
    from: Pos,
    dx: i32,
    dy: i32,
    width: usize,
    height: usize,
    blocked: impl Fn(Pos) -> bool,
) -> (Pos, bool) {
    let to = (
        (from.0 + dx).clamp(0, width as i32 - 1),
        (from.1 + dy).clamp(0, height as i32 - 1),
    );
    let (cdx, cdy) = (to.0 - from.0, to.1 - from.1);
    if move_path(from, cdx, cdy).any(blocked) {
        (from, true)
    } else {
        (to, false)
    }
}

/// 8-connected reachability avoiding `blocked` cells.
fn reachable(from: Pos, to: Pos, w: usize, h: usize, blocked: &[bool]) -> bool {
    let idx = |p: Pos| p.1 as usize * w + p.0 as usize;
    let mut seen = vec![false; w * h];
    let mut stack = vec![from];
    seen[idx(from)] = true;
    while let Some(p) = stack.pop() {
        if p == to {
            return true;
        }
        for dy in -1..=1 {
            for dx in -1..=1 {
                let q = (p.0 + dx, p.1 + dy);
                if q.0 < 0 || q.1 < 0 || q.0 >= w as i32 || q.1 >= h as i32 {
                    continue;
                }
                if !seen[idx(q)] && !blocked[idx(q)] {
                    seen[idx(q)] = true;
                    stack.push(q);
                }
            }
        }
    }
    false
}

/// Builds a fresh episode from `cfg.seed`.
pub fn reset(cfg: EnvConfig) -> Result<EnvState> {
    cfg.validate()?;
    let (w, h) = (cfg.grid_w, cfg.grid_h);
    let mut rng = RngState::with_stream(derive_seed(&[cfg.seed, 0x1A]), 0);

    let task = random_unit(&mut rng);
    let receptacle_feature = random_unit(&mut rng);
    let mut features = vec![task.clone()];
    for _ in 0..cfg.n_distractors {
        features.push(blend_toward(&task, cfg.distractor_similarity, &mut rng));
    }

    let n_entities = 3 + cfg.n_distractors;
    let n_obstacles = cfg.n_obstacles();
    for _ in 0..PLACEMENT_RETRIES {
        // Partial Fisher-Yates over all cells.
        let mut cells: Vec<Pos> = (0..h as i32).flat_map(|y| (0..w as i32).map(move |x| (x, y))).collect();
        let take = n_entities + n_obstacles;
        for i in 0..take {
            let j = i + (rng.next_u64() % (cells.len() - i) as u64) as usize;
            cells.swap(i, j);
        }
        let agent = cells[0];
        let receptacle = cells[1];
        let object_cells = &cells[2..n_entities];
        let obstacles: Vec<Pos> = cells[n_entities..take].to_vec();
        let mut blocked = vec![false; w * h];
        for p in &obstacles {
            blocked[p.1 as usize * w + p.0 as usize] = true;
        }
        let target_cell = object_cells[0];
        if !reachable(agent, target_cell, w, h, &blocked) || !reachable(target_cell, receptacle, w, h, &blocked) {
            continue;
        }
        let obstacle_features = (0..obstacles.len()).map(|_| random_unit(&mut rng)).collect();
        let objects = object_cells
            .iter()
            .zip(&features)
            .enumerate()
            .map(|(i, (p, f))| Object {
                pos: Some(*p),
                feature: f.clone(),
                distortion: (0..FEATURE_DIM).map(|_| rng.next_gaussian()).collect(),
                is_target: i == 0,
            })
            .collect();
        let mut state = EnvState {
            cfg,
            agent,
            gripper: Gripper::Open,
            held: None,
            objects,
            receptacle,
            receptacle_feature,
            obstacles,
            obstacle_features,
            blocked,
            task,
            step: 0,
            done: false,
            success: false,
            obs: Observation {
                tokens: Array2::zeros((1, FEATURE_DIM)),
                cells: Vec::new(),
                agent,
                gripper: Gripper::Open,
                width: w,
                height: h,
                step: 0,
            },
        };
        state.obs = state.observe();
        return Ok(state);
    }
    Err(Error::config(format!(
        "no feasible layout after {PLACEMENT_RETRIES} attempts (seed {})",
        cfg.seed
    )))
}

impl EnvState {
    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn agent(&self) -> Pos {
        self.agent
    }

    pub fn gripper(&self) -> Gripper {
        self.gripper
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn target_pos(&self) -> Option<Pos> {
        self.objects.iter().find(|o| o.is_target).and_then(|o| o.pos)
    }

    pub fn holding_target(&self) -> bool {
        self.held.is_some_and(|i| self.objects[i].is_target)
    }

    pub fn observation(&self) -> &Observation {
        &self.obs
    }

    pub fn layout(&self) -> SceneLayout {
        SceneLayout {
            width: self.cfg.grid_w,
            height: self.cfg.grid_h,
            agent: self.agent,
            gripper: self.gripper,
            target: self.target_pos(),
            distractors: self
                .objects
                .iter()
                .filter(|o| !o.is_target)
                .filter_map(|o| o.pos)
                .collect(),
            receptacle: self.receptacle,
            obstacles: self.obstacles.clone(),
            step: self.step,
        }
    }

    pub fn layout_json(&self) -> String {
        serde_json::to_string(&self.layout()).expect("layout serializes")
    }

    fn is_blocked(&self, p: Pos) -> bool {
        self.blocked[p.1 as usize * self.cfg.grid_w + p.0 as usize]
    }

    fn object_at(&self, p: Pos) -> Option<usize> {
        self.objects.iter().position(|o| o.pos == Some(p))
    }

    /// Noisy observation for the current step. Each object carries a fixed
    /// per-episode distortion direction plus per-step jitter, both scaled by
    /// the agent's distance to it. Jitter comes from a per-(object, step)
    /// stream, so it does not depend on the actions taken.
    fn observe(&self) -> Observation {
        let cfg = &self.cfg;
        let span = (cfg.grid_w.max(cfg.grid_h) - 1).max(1) as f64;
        let mut cells = Vec::new();
        let mut rows: Vec<Vec<f64>> = vec![self.task.clone()];
        for y in 0..cfg.grid_h as i32 {
            for x in 0..cfg.grid_w as i32 {
                let p = (x, y);
                if let Some(i) = self.object_at(p) {
                    let scale = cfg.ambiguity_noise * (VIEW_FLOOR + chebyshev(p, self.agent) as f64 / span)
                        / (FEATURE_DIM as f64).sqrt();
                    let mut jitter = RngState::with_stream(derive_seed(&[cfg.seed, 0x0B, i as u64]), self.step as u64);
                    let obj = &self.objects[i];
                    let f = obj
                        .feature
                        .iter()
                        .zip(&obj.distortion)
                        .map(|(v, z)| v + scale * (z + JITTER * jitter.next_gaussian()))
                        .collect();
                    cells.push(CellToken {
                        pos: p,
                        kind: CellKind::Object,
                    });
                    rows.push(f);
                } else if p == self.receptacle {
                    cells.push(CellToken {
                        pos: p,
                        kind: CellKind::Receptacle,
                    });
                    rows.push(self.receptacle_feature.clone());
                } else if self.is_blocked(p) {
                    let k = self.obstacles.iter().position(|o| *o == p).expect("obstacle listed");
                    cells.push(CellToken {
                        pos: p,
                        kind: CellKind::Obstacle,
                    });
                    rows.push(self.obstacle_features[k].clone());
                }
            }
        }
        let gain = cfg.feature_gain;
        let tokens = Array2::from_shape_fn((rows.len(), FEATURE_DIM), |(r, c)| gain * rows[r][c]);
        Observation {
            tokens,
            cells,
            agent: self.agent,
            gripper: self.gripper,
            width: cfg.grid_w,
            height: cfg.grid_h,
            step: self.step,
        }
    }

    /// Applies one action. Calling it after the episode ended is an error.
    pub fn transition(&mut self, action: ActionCommand) -> Result<Transition> {
        if self.done {
            return Err(Error::invalid("episode already finished"));
        }
        let h = self.cfg.half_range();
        if action.dx.abs() > h || action.dy.abs() > h {
            return Err(Error::invalid(format!(
                "displacement ({}, {}) outside [-{h}, {h}]",
                action.dx, action.dy
            )));
        }
        let (to, _) = resolve_move(
            self.agent,
            action.dx,
            action.dy,
            self.cfg.grid_w,
            self.cfg.grid_h,
            |p| self.is_blocked(p),
        );
        self.agent = to;
        match action.grip {
            GripCommand::Noop => {}
            GripCommand::Close => {
                if self.held.is_none() {
                    if let Some(i) = self.object_at(self.agent) {
                        self.objects[i].pos = None;
                        self.held = Some(i);
                        self.gripper = Gripper::Holding;
                    } else {
                        self.gripper = Gripper::Closed;
                    }
                }
            }
            GripCommand::Open => {
                if let Some(i) = self.held {
                    if self.agent == self.receptacle {
                        self.done = true;
                        self.success = self.objects[i].is_target;
                    } else if self.object_at(self.agent).is_none() {
                        self.objects[i].pos = Some(self.agent);
                        self.held = None;
                        self.gripper = Gripper::Open;
                    }
                } else {
                    self.gripper = Gripper::Open;
                }
            }
        }
        self.step += 1;
        if !self.done && self.step >= self.cfg.horizon {
            self.done = true;
            self.success = false;
        }
        self.obs = self.observe();
        Ok(Transition {
            done: self.done,
            success: self.success,
        })
    }
}

/// [`EnvState`] driven by raw action tokens.
#[derive(Debug, Clone)]
pub struct SimEnv {
    state: EnvState,
}

impl SimEnv {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        Ok(Self { state: reset(cfg)? })
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }
}

impl Environment for SimEnv {
    type Observation = Observation;

    fn observation(&self) -> &Observation {
        self.state.observation()
    }

    fn apply(&mut self, tokens: &[usize]) -> Result<Transition> {
        let action = detokenize(tokens, self.state.cfg.bins_per_axis)?;
        self.state.transition(action)
    }

    fn horizon(&self) -> usize {
        self.state.cfg.horizon
    }
}
