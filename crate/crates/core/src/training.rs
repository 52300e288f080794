//! Online training loop and evaluation rollouts.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{AgentConfig, QAgent};
use crate::env::{Action, Env, EnvConfig};
use crate::error::{Error, Result};
use crate::exec::{map_range, ExecMode};
use crate::hexgrid::{ArenaMap, Visibility};
use crate::replay::{PerConfig, ReplayBuffer, Sampled, TisbConfig, Transition};
use crate::scripted::{ScriptedKind, ScriptedPolicy};
use crate::trajio::Trajectory;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BufferKind {
    #[default]
    Uniform,
    Per,
    Tisb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Initial steps acting uniformly at random without updates.
    pub warmup: usize,
    pub buffer: BufferKind,
    pub buffer_capacity: usize,
    pub tisb: TisbConfig,
    pub per: PerConfig,
    pub updates_per_step: usize,
    pub log_every: usize,
    /// Greedy evaluation period in steps; 0 disables periodic evaluation.
    pub eval_every: usize,
    pub eval_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 50_000,
            warmup: 1_000,
            buffer: BufferKind::Uniform,
            buffer_capacity: 100_000,
            tisb: TisbConfig::default(),
            per: PerConfig::default(),
            updates_per_step: 1,
            log_every: 1_000,
            eval_every: 0,
            eval_episodes: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.buffer_capacity == 0 {
            return Err(Error::InvalidConfig("buffer_capacity must be >= 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::InvalidConfig("log_every must be >= 1".into()));
        }
        self.tisb.validate()?;
        self.per.validate()
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub episodes: usize,
    pub epsilon: f64,
    pub loss: f64,
    pub mean_variance: f64,
    pub batch_size: usize,
    pub batch_negatives: usize,
    pub buffer_negatives: usize,
    /// Mean extrinsic return and length over episodes finished since the last record.
    pub recent_return: Option<f64>,
    pub recent_length: Option<f64>,
    pub eval_success: Option<f64>,
    pub eval_mean_length: Option<f64>,
}

const STREAM_TRAIN: u64 = 1;
const STREAM_EVAL: u64 = 2;
const STREAM_ROLLOUT: u64 = 3;

/// Decorrelated per-episode seed for `(base, stream, index)`.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample(
    buffer: &mut ReplayBuffer,
    cfg: &TrainConfig,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Sampled>> {
    match cfg.buffer {
        BufferKind::Uniform => buffer.sample_uniform(batch, rng),
        BufferKind::Tisb => buffer.sample_tisb(batch, &cfg.tisb, rng),
        BufferKind::Per => buffer.sample_per(batch, &cfg.per, rng),
    }
}

/// Trains a fresh agent; `log` receives a record every `log_every` steps.
/// Deterministic given the arguments.
pub fn train(
    agent_cfg: &AgentConfig,
    cfg: &TrainConfig,
    env_cfg: &EnvConfig,
    map: Arc<ArenaMap>,
    vis: Arc<Visibility>,
    seed: u64,
    mut log: impl FnMut(&LogRecord) -> Result<()>,
) -> Result<QAgent> {
    cfg.validate()?;
    let mut agent = QAgent::new(agent_cfg.clone(), map.clone(), seed)?;
    let mut env = Env::with_visibility(env_cfg.clone(), map.clone(), vis.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_TRAIN, u64::MAX));
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let mut episodes = 0usize;
    let mut obs = env.reset(derive_seed(seed, STREAM_TRAIN, 0))?;
    let (mut ep_return, mut ep_len) = (0.0, 0usize);
    let (mut done_returns, mut done_lengths) = (Vec::new(), Vec::new());
    let mut last_stats = (0.0, 0.0, 0usize, 0usize);

    for step in 0..cfg.steps {
        let epsilon = if step < cfg.warmup {
            1.0
        } else {
            agent_cfg.epsilon_at(step - cfg.warmup, cfg.steps - cfg.warmup)
        };
        let action = agent.act(&obs, epsilon, &mut rng);
        let a = action.discrete_index().expect("learners act discretely");
        let res = env.step(action)?;
        let intrinsic = agent.surprise(&obs, a, &res.obs);
        agent.observe(&obs, a, res.reward, &res.obs, res.terminated);
        buffer.push(
            Transition::new(obs, action, res.reward, res.obs, res.terminated)
                .with_intrinsic(intrinsic),
        );
        ep_return += res.reward;
        ep_len += 1;

        if step >= cfg.warmup {
            for _ in 0..cfg.updates_per_step {
                let batch = sample(&mut buffer, cfg, agent_cfg.batch_size, &mut rng)?;
                let stats = agent.train_step(&batch);
                if cfg.buffer == BufferKind::Per {
                    let ids: Vec<u64> = batch.iter().map(|s| s.id).collect();
                    buffer.update_priorities(&ids, &stats.td_errors, &cfg.per);
                }
                let negatives = batch.iter().filter(|s| s.transition.negative).count();
                last_stats = (stats.loss, stats.mean_variance, batch.len(), negatives);
            }
        }

        if res.terminated || res.truncated {
            episodes += 1;
            done_returns.push(ep_return);
            done_lengths.push(ep_len as f64);
            ep_return = 0.0;
            ep_len = 0;
            obs = env.reset(derive_seed(seed, STREAM_TRAIN, episodes as u64))?;
        } else {
            obs = res.obs;
        }

        let n = step + 1;
        if n % cfg.log_every == 0 || n == cfg.steps {
            let (eval_success, eval_mean_length) = if cfg.eval_every > 0 && n % cfg.eval_every == 0
            {
                let trajs = rollout_agent(
                    &agent,
                    env_cfg,
                    &map,
                    &vis,
                    cfg.eval_episodes,
                    derive_seed(seed, STREAM_EVAL, n as u64),
                    "eval",
                    ExecMode::Sequential,
                )?;
                let k = trajs.len().max(1) as f64;
                let wins = trajs
                    .iter()
                    .filter(|t| t.outcome == crate::trajio::Outcome::Goal)
                    .count() as f64;
                (
                    Some(wins / k),
                    Some(trajs.iter().map(|t| t.len() as f64).sum::<f64>() / k),
                )
            } else {
                (None, None)
            };
            let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
            log(&LogRecord {
                step: n,
                episodes,
                epsilon,
                loss: last_stats.0,
                mean_variance: last_stats.1,
                batch_size: last_stats.2,
                batch_negatives: last_stats.3,
                buffer_negatives: buffer.negative_count(),
                recent_return: mean(&done_returns),
                recent_length: mean(&done_lengths),
                eval_success,
                eval_mean_length,
            })?;
            done_returns.clear();
            done_lengths.clear();
        }
    }
    Ok(agent)
}

/// Greedy episodes of a trained agent; trajectory ids are `0..episodes`.
pub fn rollout_agent(
    agent: &QAgent,
    env_cfg: &EnvConfig,
    map: &Arc<ArenaMap>,
    vis: &Arc<Visibility>,
    episodes: usize,
    seed: u64,
    label: &str,
    mode: ExecMode,
) -> Result<Vec<Trajectory>> {
    run_episodes(env_cfg, map, vis, episodes, seed, label, mode, |_| {
        let f = |obs: &crate::env::Observation| Action::from_index(agent.greedy_action(obs));
        Box::new(move |o: &crate::env::Observation| f(o))
            as Box<dyn FnMut(&crate::env::Observation) -> Action>
    })
}

/// Episodes of a scripted generator, run under its own environment settings.
pub fn rollout_scripted(
    kind: ScriptedKind,
    env_cfg: &EnvConfig,
    map: &Arc<ArenaMap>,
    vis: &Arc<Visibility>,
    episodes: usize,
    seed: u64,
    mode: ExecMode,
) -> Result<Vec<Trajectory>> {
    let cfg = kind.env_config(env_cfg);
    run_episodes(
        &cfg,
        map,
        vis,
        episodes,
        seed,
        kind.label(),
        mode,
        |ep_seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(ep_seed);
            let mut policy = ScriptedPolicy::new(kind, map, &mut rng);
            let m = map.clone();
            Box::new(move |o: &crate::env::Observation| policy.act(o, &m))
                as Box<dyn FnMut(&crate::env::Observation) -> Action>
        },
    )
}

#[allow(clippy::too_many_arguments)]
fn run_episodes<'a, F>(
    env_cfg: &EnvConfig,
    map: &Arc<ArenaMap>,
    vis: &Arc<Visibility>,
    episodes: usize,
    seed: u64,
    label: &str,
    mode: ExecMode,
    make_policy: F,
) -> Result<Vec<Trajectory>>
where
    F: Fn(u64) -> Box<dyn FnMut(&crate::env::Observation) -> Action + 'a> + Sync + Send,
{
    map_range(episodes, mode, |i| -> Result<Trajectory> {
        let mut env = Env::with_visibility(env_cfg.clone(), map.clone(), vis.clone())?;
        let ep_seed = derive_seed(seed, STREAM_ROLLOUT, i as u64);
        let mut obs = env.reset(ep_seed)?;
        let mut policy = make_policy(ep_seed);
        let mut traj = Trajectory::begin(
            i as u64,
            ep_seed,
            label,
            &obs,
            map.center(env.predator_cell()),
        );
        loop {
            let action = policy(&obs);
            let res = env.step(action)?;
            traj.record(action, &res);
            if res.terminated || res.truncated {
                return Ok(traj);
            }
            obs = res.obs;
        }
    })
    .into_iter()
    .collect()
}
