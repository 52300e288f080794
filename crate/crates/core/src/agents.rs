//! Ensemble Q-learning over a discretized state, with standard or
//! variance-penalized TD targets, a surprise-minimizing intrinsic reward and a
//! short-horizon planner over a learned tabular transition model.
//!
//! Each ensemble member is a table over `(state, action)` where the state is
//! the prey cell combined with a coarse description of the predator as seen
//! from the prey (hidden, or one of six bearings times three distance bands).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, Observation, NUM_ACTIONS, OBS_DIM};
use crate::error::{Error, Result};
use crate::hexgrid::{ArenaMap, MapSpec};
use crate::replay::Sampled;

/// Hidden plus six bearings times three distance bands.
pub const THREAT_CLASSES: usize = 1 + 6 * 3;
const NEAR_BAND: f64 = 0.12;
const MID_BAND: f64 = 0.24;

pub fn td_target_standard(r: f64, q_next_max: f64, gamma: f64, terminal: bool) -> f64 {
    if terminal {
        r
    } else {
        r + gamma * q_next_max
    }
}

/// `r + gamma * (Q(s', pi(s')) - alpha * Var)`, or `r` on terminal steps.
pub fn td_target_vp(
    r: f64,
    q_next_at_policy: f64,
    variance: f64,
    alpha: f64,
    gamma: f64,
    terminal: bool,
) -> f64 {
    if terminal {
        r
    } else {
        r + gamma * (q_next_at_policy - alpha * variance)
    }
}

/// Population variance of `values`, clipped to `[0, clip]`. Empty input gives 0.
pub fn population_variance(values: &[f64], clip: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    var.clamp(0.0, clip)
}

/// Negative weighted mean squared slot error between predicted and observed
/// next observation.
pub fn smirl_reward(predicted: &Observation, actual: &Observation, weight: f64) -> f64 {
    let mse = predicted
        .0
        .iter()
        .zip(actual.0.iter())
        .map(|(p, a)| (p - a) * (p - a))
        .sum::<f64>()
        / OBS_DIM as f64;
    -weight * mse
}

/// Maps observations onto table rows.
#[derive(Clone, Debug)]
pub struct StateEncoder {
    map: Arc<ArenaMap>,
}

impl StateEncoder {
    pub fn new(map: Arc<ArenaMap>) -> Self {
        Self { map }
    }

    pub fn map(&self) -> &Arc<ArenaMap> {
        &self.map
    }

    pub fn num_states(&self) -> usize {
        self.map.num_cells() * THREAT_CLASSES
    }

    pub fn threat_class(obs: &Observation) -> usize {
        let Some(pred) = obs.predator() else {
            return 0;
        };
        let rel = pred.sub(obs.prey());
        let dist = rel.norm();
        let sector = if dist == 0.0 {
            0
        } else {
            let angle = rel.y.atan2(rel.x).rem_euclid(std::f64::consts::TAU);
            ((angle / std::f64::consts::FRAC_PI_3).round() as usize) % 6
        };
        let band = if dist <= NEAR_BAND {
            0
        } else if dist <= MID_BAND {
            1
        } else {
            2
        };
        1 + sector * 3 + band
    }

    pub fn encode(&self, obs: &Observation) -> usize {
        let cell = self
            .map
            .nearest_cell(obs.prey())
            .expect("observation inside arena");
        let idx = self.map.index_of(cell).expect("nearest cell is valid");
        idx * THREAT_CLASSES + Self::threat_class(obs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub values: Vec<[f64; NUM_ACTIONS]>,
}

/// `K` independently initialized action-value tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QEnsemble {
    pub members: Vec<QTable>,
}

impl QEnsemble {
    /// Members start at `init` plus independent uniform noise of half-width `spread`.
    pub fn new<R: Rng + ?Sized>(
        k: usize,
        n_states: usize,
        init: f64,
        spread: f64,
        rng: &mut R,
    ) -> Self {
        let members = (0..k.max(1))
            .map(|_| QTable {
                values: (0..n_states)
                    .map(|_| {
                        std::array::from_fn(|_| init + spread * (2.0 * rng.gen::<f64>() - 1.0))
                    })
                    .collect(),
            })
            .collect();
        Self { members }
    }

    pub fn from_tables(members: Vec<QTable>) -> Self {
        assert!(!members.is_empty(), "ensemble needs at least one member");
        Self { members }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn num_states(&self) -> usize {
        self.members[0].values.len()
    }

    pub fn q(&self, member: usize, state: usize, action: usize) -> f64 {
        self.members[member].values[state][action]
    }

    pub fn mean_q(&self, state: usize) -> [f64; NUM_ACTIONS] {
        let k = self.members.len() as f64;
        std::array::from_fn(|a| self.members.iter().map(|m| m.values[state][a]).sum::<f64>() / k)
    }

    /// Ensemble-mean greedy action (lowest index on ties) and its value.
    pub fn greedy(&self, state: usize) -> (usize, f64) {
        argmax(&self.mean_q(state))
    }

    /// Variance over all `K x |actions|` values, clipped to `[0, clip]`.
    pub fn q_variance(&self, state: usize, actions: &[usize], clip: f64) -> f64 {
        let values: Vec<f64> = self
            .members
            .iter()
            .flat_map(|m| actions.iter().map(move |&a| m.values[state][a]))
            .collect();
        population_variance(&values, clip)
    }
}

/// First maximal element.
pub fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = (0, values[0]);
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct ModelEntry {
    visits: u32,
    reward_sum: f64,
    terminal: u32,
    next: BTreeMap<usize, u32>,
    next_obs_mean: Vec<f64>,
}

/// Count-based model of `(state, action)`: next-state distribution, mean
/// reward, termination rate and mean next observation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TransitionModel {
    entries: HashMap<(usize, usize), ModelEntry>,
}

impl TransitionModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe(
        &mut self,
        s: usize,
        a: usize,
        r: f64,
        s_next: usize,
        next_obs: &Observation,
        terminal: bool,
    ) {
        let e = self.entries.entry((s, a)).or_default();
        e.visits += 1;
        e.reward_sum += r;
        if terminal {
            e.terminal += 1;
        }
        *e.next.entry(s_next).or_insert(0) += 1;
        if e.next_obs_mean.is_empty() {
            e.next_obs_mean = next_obs.0.to_vec();
        } else {
            let n = e.visits as f64;
            for (m, x) in e.next_obs_mean.iter_mut().zip(next_obs.0.iter()) {
                *m += (x - *m) / n;
            }
        }
    }

    pub fn covers(&self, s: usize) -> bool {
        (0..NUM_ACTIONS).any(|a| self.entries.contains_key(&(s, a)))
    }

    pub fn visits(&self, s: usize, a: usize) -> u32 {
        self.entries.get(&(s, a)).map_or(0, |e| e.visits)
    }

    /// Next-state distribution; sums to 1 once observed.
    pub fn next_distribution(&self, s: usize, a: usize) -> Vec<(usize, f64)> {
        let Some(e) = self.entries.get(&(s, a)) else {
            return Vec::new();
        };
        let n = e.visits as f64;
        e.next.iter().map(|(&k, &c)| (k, c as f64 / n)).collect()
    }

    pub fn expected_reward(&self, s: usize, a: usize) -> Option<f64> {
        self.entries
            .get(&(s, a))
            .map(|e| e.reward_sum / e.visits as f64)
    }

    pub fn termination_probability(&self, s: usize, a: usize) -> Option<f64> {
        self.entries
            .get(&(s, a))
            .map(|e| e.terminal as f64 / e.visits as f64)
    }

    pub fn predict_next(&self, s: usize, a: usize) -> Option<Observation> {
        let e = self.entries.get(&(s, a))?;
        let mut o = [0.0; OBS_DIM];
        o.copy_from_slice(&e.next_obs_mean);
        Some(Observation(o))
    }

    fn to_records(&self) -> Vec<ModelRecord> {
        let mut out: Vec<ModelRecord> = self
            .entries
            .iter()
            .map(|(&(s, a), e)| ModelRecord {
                s,
                a,
                entry: e.clone(),
            })
            .collect();
        out.sort_by_key(|r| (r.s, r.a));
        out
    }

    fn from_records(records: Vec<ModelRecord>) -> Self {
        Self {
            entries: records.into_iter().map(|r| ((r.s, r.a), r.entry)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ModelRecord {
    s: usize,
    a: usize,
    entry: ModelEntry,
}

/// Value of the best open-loop action sequence of length `horizon`, scoring
/// `sum_h gamma^h r_h + gamma^H max_a Qbar(s_H, a)` with the model's
/// expected next-state distribution. Pairs the model has never seen are
/// scored by `Qbar(s, a)` directly. Returns the first action of the best
/// sequence (lowest index on ties); falls back to greedy `Qbar` when the
/// model has no data for `s`.
pub fn plan_mpc(
    model: &TransitionModel,
    ens: &QEnsemble,
    s: usize,
    horizon: usize,
    gamma: f64,
) -> usize {
    if horizon == 0 || !model.covers(s) {
        return ens.greedy(s).0;
    }
    let mut best = (0usize, f64::NEG_INFINITY);
    let mut seq = vec![0usize; horizon];
    let total = NUM_ACTIONS.pow(horizon as u32);
    for code in 0..total {
        let mut c = code;
        for h in (0..horizon).rev() {
            seq[h] = c % NUM_ACTIONS;
            c /= NUM_ACTIONS;
        }
        let v = sequence_value(model, ens, s, &seq, gamma);
        if v > best.1 {
            best = (seq[0], v);
        }
    }
    best.0
}

fn sequence_value(
    model: &TransitionModel,
    ens: &QEnsemble,
    s: usize,
    seq: &[usize],
    gamma: f64,
) -> f64 {
    let mut mass: BTreeMap<usize, f64> = BTreeMap::from([(s, 1.0)]);
    let mut value = 0.0;
    let mut discount = 1.0;
    for &a in seq {
        let mut next: BTreeMap<usize, f64> = BTreeMap::new();
        for (&state, &p) in &mass {
            match model.expected_reward(state, a) {
                None => value += discount * p * ens.mean_q(state)[a],
                Some(r) => {
                    value += discount * p * r;
                    let live = 1.0 - model.termination_probability(state, a).unwrap_or(0.0);
                    for (s2, q) in model.next_distribution(state, a) {
                        *next.entry(s2).or_insert(0.0) += p * q * live;
                    }
                }
            }
        }
        mass = next;
        discount *= gamma;
    }
    for (&state, &p) in &mass {
        value += discount * p * ens.greedy(state).1;
    }
    value
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    #[default]
    Standard,
    Vp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub target: TargetKind,
    pub gamma: f64,
    pub alpha_penalty: f64,
    pub variance_clip: f64,
    /// Actions entering the variance: `None` is the full discrete set,
    /// `Some(n)` draws `n` uniformly (with replacement) per target.
    pub action_samples: Option<usize>,
    pub horizon: usize,
    pub use_planner: bool,
    pub ensemble_size: usize,
    pub learning_rate: f64,
    pub q_init: f64,
    pub init_spread: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Share of training over which epsilon decays linearly.
    pub epsilon_decay_fraction: f64,
    pub batch_size: usize,
    pub smirl_weight: f64,
    /// Softmax temperature used when a full action distribution is needed.
    pub policy_temperature: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            target: TargetKind::Standard,
            gamma: 0.995,
            alpha_penalty: 0.2,
            variance_clip: 1000.0,
            action_samples: None,
            horizon: 3,
            use_planner: false,
            ensemble_size: 5,
            learning_rate: 0.1,
            q_init: 0.0,
            init_spread: 0.01,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.2,
            batch_size: 32,
            smirl_weight: 0.0,
            policy_temperature: 0.1,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidConfig(format!(
                "gamma {} not in [0, 1)",
                self.gamma
            )));
        }
        if !(self.alpha_penalty >= 0.0) {
            return Err(Error::InvalidConfig("alpha_penalty must be >= 0".into()));
        }
        if !(self.variance_clip > 0.0) {
            return Err(Error::InvalidConfig("variance_clip must be > 0".into()));
        }
        if self.ensemble_size == 0 {
            return Err(Error::InvalidConfig("ensemble_size must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.action_samples == Some(0) {
            return Err(Error::InvalidConfig("action_samples must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::InvalidConfig(
                "learning_rate must be in (0, 1]".into(),
            ));
        }
        if !(self.policy_temperature > 0.0) {
            return Err(Error::InvalidConfig(
                "policy_temperature must be > 0".into(),
            ));
        }
        Ok(())
    }

    /// Linear decay from `epsilon_start` to `epsilon_end` over the first
    /// `epsilon_decay_fraction` of `total` steps.
    pub fn epsilon_at(&self, step: usize, total: usize) -> f64 {
        let span = (self.epsilon_decay_fraction * total as f64).max(1.0);
        let frac = (step as f64 / span).min(1.0);
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    /// Mean squared TD error over batch and members, before the update.
    pub loss: f64,
    /// `target - Qbar(s, a)` per sample, for priority updates.
    pub td_errors: Vec<f64>,
    pub mean_variance: f64,
}

pub struct QAgent {
    config: AgentConfig,
    encoder: StateEncoder,
    ensemble: QEnsemble,
    model: TransitionModel,
    rng: ChaCha8Rng,
}

impl QAgent {
    pub fn new(config: AgentConfig, map: Arc<ArenaMap>, seed: u64) -> Result<Self> {
        config.validate()?;
        let encoder = StateEncoder::new(map);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ensemble = QEnsemble::new(
            config.ensemble_size,
            encoder.num_states(),
            config.q_init,
            config.init_spread,
            &mut rng,
        );
        Ok(Self {
            config,
            encoder,
            ensemble,
            model: TransitionModel::new(),
            rng,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn encoder(&self) -> &StateEncoder {
        &self.encoder
    }

    pub fn ensemble(&self) -> &QEnsemble {
        &self.ensemble
    }

    pub fn ensemble_mut(&mut self) -> &mut QEnsemble {
        &mut self.ensemble
    }

    pub fn model(&self) -> &TransitionModel {
        &self.model
    }

    pub fn encode(&self, obs: &Observation) -> usize {
        self.encoder.encode(obs)
    }

    /// Greedy (or planned, when enabled) action index.
    pub fn greedy_action(&self, obs: &Observation) -> usize {
        let s = self.encode(obs);
        if self.config.use_planner {
            plan_mpc(
                &self.model,
                &self.ensemble,
                s,
                self.config.horizon,
                self.config.gamma,
            )
        } else {
            self.ensemble.greedy(s).0
        }
    }

    /// Epsilon-greedy action.
    pub fn act<R: Rng + ?Sized>(&self, obs: &Observation, epsilon: f64, rng: &mut R) -> Action {
        if rng.gen::<f64>() < epsilon {
            Action::from_index(rng.gen_range(0..NUM_ACTIONS))
        } else {
            Action::from_index(self.greedy_action(obs))
        }
    }

    /// Softmax of `Qbar / temperature` (policy used for divergence measures).
    pub fn policy_distribution(&self, obs: &Observation) -> Vec<f64> {
        let q = self.ensemble.mean_q(self.encode(obs));
        let t = self.config.policy_temperature;
        let m = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = q.iter().map(|v| ((v - m) / t).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    /// Intrinsic surprise term for a transition, from the model's prediction
    /// conditioned on the previous state and action (the current observation
    /// stands in when the pair is new). Zero when the weight is zero.
    pub fn surprise(&self, s: &Observation, a: usize, s_next: &Observation) -> f64 {
        if self.config.smirl_weight == 0.0 {
            return 0.0;
        }
        let predicted = self.model.predict_next(self.encode(s), a).unwrap_or(*s);
        smirl_reward(&predicted, s_next, self.config.smirl_weight)
    }

    /// Records a real environment transition in the model.
    pub fn observe(
        &mut self,
        s: &Observation,
        a: usize,
        r: f64,
        s_next: &Observation,
        terminal: bool,
    ) {
        let (si, sn) = (self.encode(s), self.encode(s_next));
        self.model.observe(si, a, r, sn, s_next, terminal);
    }

    fn variance_actions(&mut self) -> Vec<usize> {
        match self.config.action_samples {
            None => (0..NUM_ACTIONS).collect(),
            Some(n) => (0..n).map(|_| self.rng.gen_range(0..NUM_ACTIONS)).collect(),
        }
    }

    /// TD target for one sampled transition under the configured rule.
    pub fn td_target(&mut self, t: &crate::replay::Transition) -> (f64, f64) {
        let r = t.total_reward();
        let next = self.encode(&t.s_next);
        match self.config.target {
            TargetKind::Standard => {
                let (_, q_max) = self.ensemble.greedy(next);
                (
                    td_target_standard(r, q_max, self.config.gamma, t.terminated),
                    0.0,
                )
            }
            TargetKind::Vp => {
                let (_, q_pi) = self.ensemble.greedy(next);
                let actions = self.variance_actions();
                let var = self
                    .ensemble
                    .q_variance(next, &actions, self.config.variance_clip);
                let target = td_target_vp(
                    r,
                    q_pi,
                    var,
                    self.config.alpha_penalty,
                    self.config.gamma,
                    t.terminated,
                );
                (target, var)
            }
        }
    }

    /// One minibatch update: targets are computed from the current tables,
    /// then every member moves `Q(s, a)` toward its target by
    /// `learning_rate * importance_weight`.
    pub fn train_step(&mut self, batch: &[Sampled]) -> TrainStats {
        if batch.is_empty() {
            return TrainStats::default();
        }
        let mut rows = Vec::with_capacity(batch.len());
        let mut var_sum = 0.0;
        for item in batch {
            let Some(a) = item.transition.a.discrete_index() else {
                continue;
            };
            let (target, var) = self.td_target(&item.transition);
            var_sum += var;
            rows.push((self.encode(&item.transition.s), a, target, item.weight));
        }
        let k = self.ensemble.len();
        let mut sq = 0.0;
        let mut td_errors = Vec::with_capacity(rows.len());
        for &(s, a, target, _) in &rows {
            td_errors.push(target - self.ensemble.mean_q(s)[a]);
            for m in 0..k {
                let d = target - self.ensemble.members[m].values[s][a];
                sq += d * d;
            }
        }
        let lr = self.config.learning_rate;
        for &(s, a, target, w) in &rows {
            for m in &mut self.ensemble.members {
                let q = &mut m.values[s][a];
                *q += lr * w * (target - *q);
            }
        }
        let n = rows.len().max(1) as f64;
        TrainStats {
            loss: sq / (n * k as f64),
            td_errors,
            mean_variance: var_sum / n,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            map_hash: self.encoder.map.hash(),
            map: self.encoder.map.spec(),
            ensemble: self.ensemble.clone(),
            model: self.model.to_records(),
        }
    }

    /// Restores an agent; `map` must be the map the checkpoint was trained on.
    pub fn from_checkpoint(ckpt: Checkpoint, map: Arc<ArenaMap>) -> Result<Self> {
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::SchemaVersion {
                found: ckpt.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if ckpt.map_hash != map.hash() {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint trained on map {}, run uses map {}",
                ckpt.map_hash,
                map.hash()
            )));
        }
        let encoder = StateEncoder::new(map);
        if ckpt.ensemble.num_states() != encoder.num_states() {
            return Err(Error::CheckpointMismatch(
                "state count differs from map".into(),
            ));
        }
        ckpt.config.validate()?;
        Ok(Self {
            config: ckpt.config,
            encoder,
            ensemble: ckpt.ensemble,
            model: TransitionModel::from_records(ckpt.model),
            rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint together with the map embedded in it.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        let map = Arc::new(ArenaMap::try_from(ckpt.map.clone())?);
        Self::from_checkpoint(ckpt, map)
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Self-describing agent snapshot with its configuration and map embedded.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: AgentConfig,
    pub map_hash: String,
    pub map: MapSpec,
    pub ensemble: QEnsemble,
    model: Vec<ModelRecord>,
}
