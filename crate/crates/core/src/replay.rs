//! Experience replay: a ring buffer with uniform, prioritized and
//! threat-rebalanced sampling.
//!
//! Every stored transition carries a monotonically increasing id. Ids handed
//! out by the samplers stay meaningful after eviction, so priority updates for
//! evicted entries are recognized as stale and dropped.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, Observation};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: Observation,
    pub a: Action,
    /// Extrinsic reward.
    pub r: f64,
    pub s_next: Observation,
    pub terminated: bool,
    /// `r < 0`.
    pub negative: bool,
    /// Shaping term added on top of `r` (surprise penalty); never amplified.
    #[serde(default)]
    pub intrinsic: f64,
}

impl Transition {
    pub fn new(s: Observation, a: Action, r: f64, s_next: Observation, terminated: bool) -> Self {
        Self {
            s,
            a,
            r,
            s_next,
            terminated,
            negative: r < 0.0,
            intrinsic: 0.0,
        }
    }

    pub fn with_intrinsic(mut self, intrinsic: f64) -> Self {
        self.intrinsic = intrinsic;
        self
    }

    /// Reward the learner regresses on.
    pub fn total_reward(&self) -> f64 {
        self.r + self.intrinsic
    }
}

/// Threat-weighted sampling settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TisbConfig {
    /// Fixed share of negative transitions per batch; `None` (or 0) samples
    /// uniformly and only amplifies.
    pub negative_fraction: Option<f64>,
    /// Factor applied to negative rewards at sampling time.
    pub amplification: f64,
}

impl Default for TisbConfig {
    fn default() -> Self {
        Self {
            negative_fraction: Some(0.5),
            amplification: 200.0,
        }
    }
}

impl TisbConfig {
    pub fn amplification_only(amplification: f64) -> Self {
        Self {
            negative_fraction: None,
            amplification,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(rho) = self.negative_fraction {
            if !(0.0..=1.0).contains(&rho) {
                return Err(Error::InvalidConfig(format!(
                    "negative_fraction {rho} not in [0, 1]"
                )));
            }
        }
        if !(self.amplification >= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "amplification {} < 1",
                self.amplification
            )));
        }
        Ok(())
    }

    /// Negatives forced into a batch of `batch`, before capping by availability.
    pub fn forced_negatives(&self, batch: usize) -> Option<usize> {
        match self.negative_fraction {
            // the epsilon keeps products like 0.3 * 10 from rounding up
            Some(rho) if rho > 0.0 => Some(((rho * batch as f64) - 1e-9).ceil().max(0.0) as usize),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerConfig {
    pub priority_exponent: f64,
    pub importance_exponent: f64,
    pub epsilon_priority: f64,
}

impl Default for PerConfig {
    fn default() -> Self {
        Self {
            priority_exponent: 0.6,
            importance_exponent: 0.4,
            epsilon_priority: 1e-3,
        }
    }
}

impl PerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.priority_exponent >= 0.0) {
            return Err(Error::InvalidConfig(
                "priority_exponent must be >= 0".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.importance_exponent) {
            return Err(Error::InvalidConfig(
                "importance_exponent must be in [0, 1]".into(),
            ));
        }
        if !(self.epsilon_priority > 0.0) {
            return Err(Error::InvalidConfig("epsilon_priority must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sampled {
    pub id: u64,
    /// Copy of the stored transition; its reward may be amplified.
    pub transition: Transition,
    /// Importance weight (1 for non-prioritized draws).
    pub weight: f64,
}

/// Slot set with O(1) insert, remove and uniform draw.
#[derive(Clone, Debug, Default)]
struct Stratum {
    members: Vec<usize>,
    pos: Vec<usize>,
}

impl Stratum {
    fn with_capacity(cap: usize) -> Self {
        Self {
            members: Vec::new(),
            pos: vec![usize::MAX; cap],
        }
    }

    fn insert(&mut self, slot: usize) {
        if self.pos[slot] == usize::MAX {
            self.pos[slot] = self.members.len();
            self.members.push(slot);
        }
    }

    fn remove(&mut self, slot: usize) {
        let p = self.pos[slot];
        if p == usize::MAX {
            return;
        }
        let last = *self.members.last().expect("non-empty");
        self.members.swap_remove(p);
        if last != slot {
            self.pos[last] = p;
        }
        self.pos[slot] = usize::MAX;
    }

    fn len(&self) -> usize {
        self.members.len()
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.members[rng.gen_range(0..self.members.len())]
    }
}

/// Binary sum tree over per-slot sampling masses.
#[derive(Clone, Debug)]
struct SumTree {
    leaves: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    fn new(cap: usize) -> Self {
        let leaves = cap.next_power_of_two();
        Self {
            leaves,
            nodes: vec![0.0; 2 * leaves],
        }
    }

    fn set(&mut self, i: usize, v: f64) {
        let mut k = i + self.leaves;
        self.nodes[k] = v;
        while k > 1 {
            k /= 2;
            self.nodes[k] = self.nodes[2 * k] + self.nodes[2 * k + 1];
        }
    }

    fn get(&self, i: usize) -> f64 {
        self.nodes[i + self.leaves]
    }

    fn total(&self) -> f64 {
        self.nodes[1]
    }

    /// Leaf whose cumulative range contains `u`.
    fn find(&self, mut u: f64) -> usize {
        let mut k = 1;
        while k < self.leaves {
            let left = self.nodes[2 * k];
            if u < left || self.nodes[2 * k + 1] <= 0.0 {
                k *= 2;
            } else {
                u -= left;
                k = 2 * k + 1;
            }
        }
        k - self.leaves
    }
}

pub struct ReplayBuffer {
    capacity: usize,
    slots: Vec<Option<(u64, Transition)>>,
    priorities: Vec<f64>,
    next_id: u64,
    negatives: Stratum,
    others: Stratum,
    tree: SumTree,
    tree_exponent: f64,
    max_priority: f64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        let capacity = capacity.max(1);
        Self {
            capacity,
            slots: vec![None; capacity],
            priorities: vec![0.0; capacity],
            next_id: 0,
            negatives: Stratum::with_capacity(capacity),
            others: Stratum::with_capacity(capacity),
            tree: SumTree::new(capacity),
            tree_exponent: 1.0,
            max_priority: 1.0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.negatives.len() + self.others.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn negative_count(&self) -> usize {
        self.negatives.len()
    }

    /// Stored transitions, oldest first.
    pub fn iter(&self) -> impl Iterator<Item = (u64, &Transition)> {
        let start = self.next_id.saturating_sub(self.len() as u64);
        (start..self.next_id).filter_map(move |id| {
            self.slots[(id % self.capacity as u64) as usize]
                .as_ref()
                .map(|(_, t)| (id, t))
        })
    }

    pub fn get(&self, id: u64) -> Option<&Transition> {
        let (sid, t) = self.slots[(id % self.capacity as u64) as usize].as_ref()?;
        (*sid == id).then_some(t)
    }

    pub fn priority(&self, id: u64) -> Option<f64> {
        self.get(id)
            .map(|_| self.priorities[(id % self.capacity as u64) as usize])
    }

    /// Appends a transition, evicting the oldest one at capacity. New entries
    /// get the largest priority seen so far.
    pub fn push(&mut self, t: Transition) {
        let slot = (self.next_id % self.capacity as u64) as usize;
        if self.slots[slot].is_some() {
            self.negatives.remove(slot);
            self.others.remove(slot);
        }
        if t.negative {
            self.negatives.insert(slot);
        } else {
            self.others.insert(slot);
        }
        self.slots[slot] = Some((self.next_id, t));
        self.priorities[slot] = self.max_priority;
        self.tree
            .set(slot, self.max_priority.powf(self.tree_exponent));
        self.next_id += 1;
    }

    fn sampled(&self, slot: usize, amplification: f64, weight: f64) -> Sampled {
        let (id, t) = self.slots[slot].as_ref().expect("sampled slot is occupied");
        let mut transition = t.clone();
        if transition.negative {
            transition.r *= amplification;
        }
        Sampled {
            id: *id,
            transition,
            weight,
        }
    }

    fn draw_any<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let k = rng.gen_range(0..self.len());
        if k < self.negatives.len() {
            self.negatives.members[k]
        } else {
            self.others.members[k - self.negatives.len()]
        }
    }

    /// Uniform draws with replacement.
    pub fn sample_uniform<R: Rng + ?Sized>(
        &self,
        batch: usize,
        rng: &mut R,
    ) -> Result<Vec<Sampled>> {
        if self.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        Ok((0..batch)
            .map(|_| self.sampled(self.draw_any(rng), 1.0, 1.0))
            .collect())
    }

    /// Threat-rebalanced draws. With a negative fraction `rho` the batch holds
    /// `min(ceil(rho * batch), #negatives)` negatives and the rest from the
    /// other transitions, each stratum uniform with replacement (if there are
    /// no other transitions the whole batch comes from the negatives). Without
    /// a fraction the draw is uniform. Negative rewards in the returned copies
    /// are multiplied by the amplification factor.
    pub fn sample_tisb<R: Rng + ?Sized>(
        &self,
        batch: usize,
        cfg: &TisbConfig,
        rng: &mut R,
    ) -> Result<Vec<Sampled>> {
        if self.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let kappa = cfg.amplification;
        let Some(forced) = cfg.forced_negatives(batch) else {
            return Ok((0..batch)
                .map(|_| self.sampled(self.draw_any(rng), kappa, 1.0))
                .collect());
        };
        let n_neg = if self.others.len() == 0 {
            batch
        } else {
            forced.min(self.negatives.len()).min(batch)
        };
        let mut out = Vec::with_capacity(batch);
        for _ in 0..n_neg {
            out.push(self.sampled(self.negatives.draw(rng), kappa, 1.0));
        }
        for _ in n_neg..batch {
            out.push(self.sampled(self.others.draw(rng), kappa, 1.0));
        }
        out.shuffle(rng);
        Ok(out)
    }

    fn sync_tree(&mut self, exponent: f64) {
        if self.tree_exponent == exponent {
            return;
        }
        self.tree_exponent = exponent;
        for slot in 0..self.capacity {
            let mass = if self.slots[slot].is_some() {
                self.priorities[slot].powf(exponent)
            } else {
                0.0
            };
            self.tree.set(slot, mass);
        }
    }

    /// Draw probability of a stored id under prioritized sampling.
    pub fn per_probability(&mut self, id: u64, cfg: &PerConfig) -> Option<f64> {
        self.sync_tree(cfg.priority_exponent);
        self.get(id)?;
        let slot = (id % self.capacity as u64) as usize;
        Some(self.tree.get(slot) / self.tree.total())
    }

    /// Prioritized draws: probability proportional to `priority^exponent`,
    /// importance weights `(N * P)^-beta` scaled by the batch maximum.
    pub fn sample_per<R: Rng + ?Sized>(
        &mut self,
        batch: usize,
        cfg: &PerConfig,
        rng: &mut R,
    ) -> Result<Vec<Sampled>> {
        if self.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        self.sync_tree(cfg.priority_exponent);
        let total = self.tree.total();
        let n = self.len() as f64;
        let mut draws: Vec<(usize, f64)> = (0..batch)
            .map(|_| {
                let slot = self.tree.find(rng.gen::<f64>() * total);
                let p = self.tree.get(slot) / total;
                (slot, (n * p).powf(-cfg.importance_exponent))
            })
            .collect();
        let max_w = draws.iter().map(|d| d.1).fold(0.0, f64::max);
        if max_w > 0.0 {
            for d in &mut draws {
                d.1 /= max_w;
            }
        }
        Ok(draws
            .into_iter()
            .map(|(slot, w)| self.sampled(slot, 1.0, w))
            .collect())
    }

    /// Sets `priority = |td_error| + epsilon`; ids no longer stored are skipped.
    pub fn update_priorities(&mut self, ids: &[u64], td_errors: &[f64], cfg: &PerConfig) {
        for (&id, &e) in ids.iter().zip(td_errors) {
            if self.get(id).is_none() {
                continue;
            }
            let slot = (id % self.capacity as u64) as usize;
            let p = e.abs() + cfg.epsilon_priority;
            self.priorities[slot] = p;
            self.max_priority = self.max_priority.max(p);
            self.tree.set(slot, p.powf(self.tree_exponent));
        }
    }

    pub fn snapshot(&self) -> BufferSnapshot {
        BufferSnapshot {
            version: SNAPSHOT_VERSION,
            capacity: self.capacity,
            next_id: self.next_id,
            max_priority: self.max_priority,
            entries: self
                .iter()
                .map(|(id, t)| SnapshotEntry {
                    id,
                    priority: self.priorities[(id % self.capacity as u64) as usize],
                    transition: t.clone(),
                })
                .collect(),
        }
    }

    pub fn from_snapshot(snap: BufferSnapshot) -> Result<Self> {
        if snap.version != SNAPSHOT_VERSION {
            return Err(Error::SchemaVersion {
                found: snap.version,
                expected: SNAPSHOT_VERSION,
            });
        }
        let mut buf = ReplayBuffer::new(snap.capacity);
        for e in snap.entries {
            buf.next_id = e.id;
            buf.push(e.transition);
            let slot = (e.id % buf.capacity as u64) as usize;
            buf.priorities[slot] = e.priority;
            buf.tree.set(slot, e.priority.powf(buf.tree_exponent));
        }
        buf.next_id = snap.next_id;
        buf.max_priority = snap.max_priority;
        Ok(buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(&self.snapshot())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_snapshot(serde_json::from_str(&text)?)
    }
}

pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferSnapshot {
    pub version: u32,
    pub capacity: usize,
    pub next_id: u64,
    pub max_priority: f64,
    pub entries: Vec<SnapshotEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub id: u64,
    pub priority: f64,
    pub transition: Transition,
}
