//! Scripted prey policies used as behavioral reference generators: a
//! wall-follower that lingers at the entry before hugging the outer wall to
//! the goal, and a dasher that runs the shortest path immediately.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, EnvConfig, Observation};
use crate::hexgrid::{ArenaMap, HexCoord};
use crate::metrics::WALL_DISTANCE;

/// Per-cell step cost off the wall band relative to on it.
const OFF_WALL_COST: u32 = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ScriptedKind {
    /// Holds at the entry for a uniformly drawn number of steps in
    /// `[wait_min, wait_max]`, then follows the outer wall to the goal.
    WallHugger {
        wait_min: u32,
        wait_max: u32,
    },
    Dasher,
}

impl ScriptedKind {
    pub fn wall_hugger() -> Self {
        ScriptedKind::WallHugger {
            wait_min: 6,
            wait_max: 12,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            ScriptedKind::WallHugger { .. } => "wall_hugger",
            ScriptedKind::Dasher => "dasher",
        }
    }

    /// Environment settings the generators run under: puffs do not end the
    /// episode, so every trajectory completes its scripted route.
    pub fn env_config(&self, base: &EnvConfig) -> EnvConfig {
        EnvConfig {
            puff_is_terminal: false,
            ..base.clone()
        }
    }
}

/// Cheapest entry-to-goal route where cells inside the wall band cost 1 and
/// others cost [`OFF_WALL_COST`]. Ties resolve toward lower cell index.
pub fn wall_path(map: &ArenaMap, from: HexCoord, to: HexCoord) -> Vec<HexCoord> {
    let cost = |c: HexCoord| {
        if map.wall_distance(map.center(c)) < WALL_DISTANCE {
            1
        } else {
            OFF_WALL_COST
        }
    };
    let (Some(s), Some(g)) = (map.index_of(from), map.index_of(to)) else {
        return Vec::new();
    };
    let n = map.num_cells();
    let mut dist = vec![u32::MAX; n];
    let mut parent = vec![usize::MAX; n];
    let mut heap = BinaryHeap::new();
    dist[s] = 0;
    heap.push(Reverse((0u32, s)));
    while let Some(Reverse((d, i))) = heap.pop() {
        if d > dist[i] {
            continue;
        }
        if i == g {
            break;
        }
        let c = map.cells()[i];
        for nb in map.neighbors(c) {
            let j = map.index_of(nb).expect("neighbor is valid");
            let nd = d + cost(nb);
            if nd < dist[j] {
                dist[j] = nd;
                parent[j] = i;
                heap.push(Reverse((nd, j)));
            }
        }
    }
    if dist[g] == u32::MAX || !map.is_open(from) {
        return Vec::new();
    }
    let mut path = vec![g];
    while *path.last().expect("non-empty") != s {
        path.push(parent[*path.last().expect("non-empty")]);
    }
    path.reverse();
    path.into_iter().map(|i| map.cells()[i]).collect()
}

/// A stateful scripted policy for one episode.
#[derive(Clone, Debug)]
pub struct ScriptedPolicy {
    path: Vec<HexCoord>,
    wait_left: u32,
    hug: bool,
}

impl ScriptedPolicy {
    pub fn new<R: Rng + ?Sized>(kind: ScriptedKind, map: &ArenaMap, rng: &mut R) -> Self {
        match kind {
            ScriptedKind::WallHugger { wait_min, wait_max } => Self {
                path: wall_path(map, map.entry(), map.goal()),
                wait_left: rng.gen_range(wait_min..=wait_max.max(wait_min)),
                hug: true,
            },
            ScriptedKind::Dasher => Self {
                path: map.astar_path(map.entry(), map.goal()),
                wait_left: 0,
                hug: false,
            },
        }
    }

    pub fn path(&self) -> &[HexCoord] {
        &self.path
    }

    pub fn act(&mut self, obs: &Observation, map: &ArenaMap) -> Action {
        if self.wait_left > 0 {
            self.wait_left -= 1;
            return Action::Stay;
        }
        let Some(here) = map.nearest_cell(obs.prey()) else {
            return Action::Stay;
        };
        let next = match self.path.iter().position(|&c| c == here) {
            Some(i) if i + 1 < self.path.len() => self.path[i + 1],
            Some(_) => return Action::Stay,
            None => {
                // knocked off the route: rejoin it from here
                self.path = if self.hug {
                    wall_path(map, here, map.goal())
                } else {
                    map.astar_path(here, map.goal())
                };
                match self.path.get(1) {
                    Some(&c) => c,
                    None => return Action::Stay,
                }
            }
        };
        match here.direction_to(next) {
            Some(d) => Action::Move { dir: d as u8 },
            None => Action::Stay,
        }
    }
}
