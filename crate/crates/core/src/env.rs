//! Episodic prey-vs-predator environment.
//!
//! The prey always occupies a cell center. The predator follows the reactive
//! pursuit routine: chase the prey's cell while it is in sight, otherwise walk
//! to a uniformly drawn cell that the predator itself cannot see, redrawing on
//! arrival or right after losing sight of the prey.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::hexgrid::{ArenaMap, HexCoord, Point, Visibility};

pub const OBS_DIM: usize = 10;
/// Value of the predator coordinate slots while it is out of sight.
pub const SENTINEL: f64 = -1.0;
pub const NUM_ACTIONS: usize = 7;
pub const STAY: usize = 6;

/// Ten-slot observation vector.
///
/// | slot | content |
/// |------|---------|
/// | 0, 1 | prey x, y |
/// | 2, 3 | heading cosine, sine (last nonzero displacement, `(1, 0)` at reset) |
/// | 4, 5 | predator x, y, or `-1` when not visible |
/// | 6    | predator visible flag |
/// | 7    | distance to goal, normalized by the farthest open cell |
/// | 8    | puffed on this step |
/// | 9    | step index / `max_steps` |
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation(pub [f64; OBS_DIM]);

impl Observation {
    pub fn prey(&self) -> Point {
        Point::new(self.0[0], self.0[1])
    }

    pub fn predator(&self) -> Option<Point> {
        self.predator_visible()
            .then(|| Point::new(self.0[4], self.0[5]))
    }

    pub fn predator_visible(&self) -> bool {
        self.0[6] > 0.5
    }

    pub fn goal_distance(&self) -> f64 {
        self.0[7]
    }

    pub fn puffed(&self) -> bool {
        self.0[8] > 0.5
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    /// One cell (or `prey_speed` worth of cells) in direction `0..6`.
    Move {
        dir: u8,
    },
    Stay,
    /// Head toward `(x, y)`; `wait > 0.5` means hold position.
    Target {
        x: f64,
        y: f64,
        wait: f64,
    },
}

impl Action {
    /// Discrete action by index: `0..6` are moves, [`STAY`] is stay.
    pub fn from_index(i: usize) -> Action {
        if i < 6 {
            Action::Move { dir: i as u8 }
        } else {
            Action::Stay
        }
    }

    pub fn discrete_index(&self) -> Option<usize> {
        match *self {
            Action::Move { dir } => Some(dir as usize % 6),
            Action::Stay => Some(STAY),
            Action::Target { .. } => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredatorDecision {
    /// Prey in sight; target set to its cell.
    Chase,
    /// Fresh hidden-cell target drawn.
    Search,
    /// Kept walking to the current target.
    Continue,
    /// Nowhere to go.
    Hold,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub puffed: bool,
    pub reached_goal: bool,
    pub predator_pos: Point,
    /// Predator cell at decision time.
    pub predator_from: Option<HexCoord>,
    pub predator_target: Option<HexCoord>,
    pub predator_decision: Option<PredatorDecision>,
    /// Prey cell the predator saw at decision time, if any.
    pub prey_seen: Option<HexCoord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub obs: Observation,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
    pub info: StepInfo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub capture_radius: f64,
    pub max_steps: usize,
    /// Seconds per step; informational, used by trajectory ingestion.
    pub dt: f64,
    pub prey_speed: f64,
    pub predator_speed: f64,
    pub puff_is_terminal: bool,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            capture_radius: 0.1,
            max_steps: 300,
            dt: 0.25,
            prey_speed: 0.04,
            predator_speed: 0.04,
            puff_is_terminal: true,
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.capture_radius > 0.0) {
            return Err(Error::InvalidConfig("capture_radius must be > 0".into()));
        }
        if self.max_steps < 1 {
            return Err(Error::InvalidConfig("max_steps must be >= 1".into()));
        }
        if !(self.prey_speed > 0.0) || !(self.predator_speed > 0.0) {
            return Err(Error::InvalidConfig("speeds must be > 0".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidConfig("dt must be > 0".into()));
        }
        Ok(())
    }
}

pub struct Env {
    map: Arc<ArenaMap>,
    vis: Arc<Visibility>,
    config: EnvConfig,
    rng: ChaCha8Rng,
    prey: HexCoord,
    predator: HexCoord,
    target: Option<HexCoord>,
    chasing: bool,
    heading: Point,
    t: usize,
    done: bool,
    goal_scale: f64,
}

impl Env {
    pub fn new(config: EnvConfig, map: Arc<ArenaMap>) -> Result<Self> {
        let vis = Arc::new(Visibility::new(&map, ExecMode::Parallel));
        Self::with_visibility(config, map, vis)
    }

    /// Builds an environment around an already computed visibility table.
    pub fn with_visibility(
        config: EnvConfig,
        map: Arc<ArenaMap>,
        vis: Arc<Visibility>,
    ) -> Result<Self> {
        config.validate()?;
        let goal = map.center(map.goal());
        let goal_scale = map
            .open_cells()
            .map(|c| map.center(c).dist(goal))
            .fold(0.0, f64::max)
            .max(f64::EPSILON);
        let seed = config.seed;
        Ok(Self {
            prey: map.entry(),
            predator: map.entry(),
            map,
            vis,
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            target: None,
            chasing: false,
            heading: Point::new(1.0, 0.0),
            t: 0,
            done: true,
            goal_scale,
        })
    }

    pub fn map(&self) -> &Arc<ArenaMap> {
        &self.map
    }

    pub fn visibility(&self) -> &Arc<Visibility> {
        &self.vis
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn prey_cell(&self) -> HexCoord {
        self.prey
    }

    pub fn predator_cell(&self) -> HexCoord {
        self.predator
    }

    pub fn predator_target(&self) -> Option<HexCoord> {
        self.target
    }

    pub fn step_index(&self) -> usize {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Starts an episode: prey at the entry, predator on a uniformly drawn
    /// cell the prey cannot see.
    pub fn reset(&mut self, seed: u64) -> Result<Observation> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.prey = self.map.entry();
        let entry = self.index(self.prey);
        let hidden = self.vis.hidden_from(&self.map, entry);
        if hidden.is_empty() {
            self.done = true;
            return Err(Error::NoPredatorSpawn);
        }
        self.predator = hidden[self.rng.gen_range(0..hidden.len())];
        self.target = None;
        self.chasing = false;
        self.heading = Point::new(1.0, 0.0);
        self.t = 0;
        self.done = false;
        Ok(self.observe(false))
    }

    /// Overrides both positions mid-episode (scripted scenarios and tests).
    pub fn place(&mut self, prey: HexCoord, predator: HexCoord) -> Result<()> {
        for c in [prey, predator] {
            if !self.map.is_open(c) {
                return Err(Error::CellOutOfArena(c));
            }
        }
        self.prey = prey;
        self.predator = predator;
        self.target = None;
        self.chasing = false;
        self.done = false;
        Ok(())
    }

    pub fn observe(&self, puffed: bool) -> Observation {
        let prey = self.map.center(self.prey);
        let mut o = [0.0; OBS_DIM];
        o[0] = prey.x;
        o[1] = prey.y;
        o[2] = self.heading.x;
        o[3] = self.heading.y;
        if self.predator_visible() {
            let p = self.map.center(self.predator);
            o[4] = p.x;
            o[5] = p.y;
            o[6] = 1.0;
        } else {
            o[4] = SENTINEL;
            o[5] = SENTINEL;
        }
        o[7] = (prey.dist(self.map.center(self.map.goal())) / self.goal_scale).min(1.0);
        o[8] = if puffed { 1.0 } else { 0.0 };
        o[9] = self.t as f64 / self.config.max_steps as f64;
        Observation(o)
    }

    pub fn predator_visible(&self) -> bool {
        self.vis
            .visible(self.index(self.prey), self.index(self.predator))
    }

    fn index(&self, c: HexCoord) -> usize {
        self.map.index_of(c).expect("positions stay on valid cells")
    }

    fn prey_predator_distance(&self) -> f64 {
        self.map
            .center(self.prey)
            .dist(self.map.center(self.predator))
    }

    fn cells_per_step(&self, speed: f64) -> usize {
        ((speed / self.map.pitch()) + 1e-9).floor().max(1.0) as usize
    }

    fn prey_destination(&self, action: Action) -> HexCoord {
        match action {
            Action::Stay => self.prey,
            Action::Move { dir } => {
                let mut cur = self.prey;
                for _ in 0..self.cells_per_step(self.config.prey_speed) {
                    let nb = cur.neighbor(dir as usize);
                    if !self.map.is_open(nb) {
                        break;
                    }
                    cur = nb;
                }
                cur
            }
            Action::Target { x, y, wait } => {
                if wait > 0.5 || !x.is_finite() || !y.is_finite() {
                    return self.prey;
                }
                let here = self.map.center(self.prey);
                let mut delta = Point::new(x, y).sub(here);
                let len = delta.norm();
                if len > self.config.prey_speed {
                    delta = delta.scale(self.config.prey_speed / len);
                }
                let desired = here.add(delta);
                let reach = self.config.prey_speed + self.map.pitch() / 2.0;
                let mut best = (self.prey, desired.dist(here));
                for c in self.map.open_cells() {
                    let center = self.map.center(c);
                    if center.dist(here) > reach || c == self.prey {
                        continue;
                    }
                    if !self.map.line_of_sight(here, center) {
                        continue;
                    }
                    let d = center.dist(desired);
                    if d < best.1 {
                        best = (c, d);
                    }
                }
                best.0
            }
        }
    }

    /// Advances the episode by one control step.
    pub fn step(&mut self, action: Action) -> Result<StepResult> {
        if self.done {
            return Err(Error::EpisodeFinished);
        }
        let before = self.map.center(self.prey);
        self.prey = self.prey_destination(action);
        let after = self.map.center(self.prey);
        let moved = after.sub(before);
        if moved.norm() > 0.0 {
            self.heading = moved.scale(1.0 / moved.norm());
        }
        self.t += 1;

        let radius = self.config.capture_radius;
        let mut puffed = self.prey_predator_distance() <= radius;
        let mut reached_goal = false;
        let mut predator_from = None;
        let mut decision = None;
        let mut prey_seen = None;
        if !puffed && self.prey == self.map.goal() {
            reached_goal = true;
        } else if !puffed {
            predator_from = Some(self.predator);
            if self.predator_visible() {
                prey_seen = Some(self.prey);
            }
            decision = Some(self.predator_step());
            puffed = self.prey_predator_distance() <= radius;
        }

        let (reward, terminated) = if puffed {
            (-1.0, self.config.puff_is_terminal)
        } else if reached_goal {
            (1.0, true)
        } else {
            (0.0, false)
        };
        let truncated = !terminated && self.t >= self.config.max_steps;
        self.done = terminated || truncated;
        Ok(StepResult {
            obs: self.observe(puffed),
            reward,
            terminated,
            truncated,
            info: StepInfo {
                puffed,
                reached_goal,
                predator_pos: self.map.center(self.predator),
                predator_from,
                predator_target: self.target,
                predator_decision: decision,
                prey_seen,
            },
        })
    }

    /// One predator control step: pick a target, then walk along the A* path.
    pub fn predator_step(&mut self) -> PredatorDecision {
        let decision = if self.predator_visible() {
            self.target = Some(self.prey);
            self.chasing = true;
            PredatorDecision::Chase
        } else if self.chasing || self.target.is_none_or(|t| t == self.predator) {
            self.chasing = false;
            let hidden = self.vis.hidden_from(&self.map, self.index(self.predator));
            if hidden.is_empty() {
                self.target = None;
                return PredatorDecision::Hold;
            }
            self.target = Some(hidden[self.rng.gen_range(0..hidden.len())]);
            PredatorDecision::Search
        } else {
            PredatorDecision::Continue
        };
        let target = self.target.expect("target set above");
        let path = self.map.astar_path(self.predator, target);
        if path.is_empty() {
            self.target = None;
            return PredatorDecision::Hold;
        }
        let hops = self
            .cells_per_step(self.config.predator_speed)
            .min(path.len() - 1);
        self.predator = path[hops];
        decision
    }
}
