//! Subcommand implementations behind the `cellworld` binary. Each command
//! reads a [`RunConfig`], writes only below its output directory and is
//! deterministic given the configuration and seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::agents::{AgentConfig, QAgent};
use crate::env::{Env, EnvConfig, Observation, OBS_DIM, SENTINEL};
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::hexgrid::{generate_map, ArenaMap, Visibility};
use crate::llm::{self, ClientConfig, HttpTransport, StubServer};
use crate::metrics::{self, BehaviorReport, DensityMap, LengthStats};
use crate::scripted::ScriptedKind;
use crate::training::{self, derive_seed, LogRecord, TrainConfig};
use crate::trajio::{self, TrajHeader, Trajectory};

/// Settings for `gen-map`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenMapConfig {
    pub clusters: usize,
    pub radius: i32,
    pub pitch: f64,
}

impl Default for GenMapConfig {
    fn default() -> Self {
        Self {
            clusters: 10,
            radius: 10,
            pitch: 0.04,
        }
    }
}

/// Settings for `analyze` and `compare`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeConfig {
    /// Cells need at least this many visits to count toward overlap.
    pub min_visits: u64,
    /// Bounds of the filtered episode-length statistics.
    pub min_length: usize,
    pub max_length: usize,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            min_visits: 1,
            min_length: 5,
            max_length: 50,
        }
    }
}

/// Settings for `llm-run`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmRunConfig {
    pub client: ClientConfig,
    pub episodes: usize,
    /// Serve replies from the bundled goal-seeking stub instead of `client.endpoint`.
    pub stub: bool,
    /// Step length of the stub's replies.
    pub stub_step: f64,
}

impl Default for LlmRunConfig {
    fn default() -> Self {
        Self {
            client: ClientConfig::default(),
            episodes: 1,
            stub: false,
            stub_step: 0.05,
        }
    }
}

/// Complete run description, read from a TOML file. Every field has a
/// default, so an empty file is a valid configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Map file; the shipped default map when absent.
    pub map: Option<PathBuf>,
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub train: TrainConfig,
    /// Episodes per rollout.
    pub eval_episodes: usize,
    /// Seeds trained by `train`; `--seed` replaces the list with one seed.
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub gen_map: GenMapConfig,
    pub analyze: AnalyzeConfig,
    pub llm: LlmRunConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            map: None,
            env: EnvConfig::default(),
            agent: AgentConfig::default(),
            train: TrainConfig::default(),
            eval_episodes: 200,
            seeds: vec![0],
            out: PathBuf::from("runs"),
            gen_map: GenMapConfig::default(),
            analyze: AnalyzeConfig::default(),
            llm: LlmRunConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses TOML; an unrecognized key fails with [`Error::UnknownConfigKey`].
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| match unknown_key(e.message()) {
            Some(key) => Error::UnknownConfigKey(key),
            None => Error::Toml(e),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.agent.validate()?;
        self.train.validate()?;
        self.llm.client.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seeds must not be empty".into()));
        }
        if self.analyze.min_length > self.analyze.max_length {
            return Err(Error::InvalidConfig(
                "analyze.min_length exceeds max_length".into(),
            ));
        }
        Ok(())
    }

    pub fn load_map(&self) -> Result<Arc<ArenaMap>> {
        Ok(Arc::new(match &self.map {
            Some(p) => ArenaMap::load(p)?,
            None => ArenaMap::default_map(),
        }))
    }
}

fn unknown_key(msg: &str) -> Option<String> {
    let rest = msg.split("unknown field `").nth(1)?;
    Some(rest.split('`').next()?.to_string())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Output file names must stay inside the output directory.
fn out_file(out: &Path, name: &str) -> Result<PathBuf> {
    let p = Path::new(name);
    if p.components().count() != 1 || p.file_name().is_none() {
        return Err(Error::InvalidConfig(format!(
            "output name `{name}` must be a plain file name"
        )));
    }
    Ok(out.join(p))
}

/// Writes a map: the shipped one, or a generated one from `seed`.
pub fn cmd_gen_map(cfg: &RunConfig, seed: u64, shipped: bool, out: &Path) -> Result<PathBuf> {
    ensure_dir(out)?;
    let map = if shipped {
        ArenaMap::default_map()
    } else {
        let g = &cfg.gen_map;
        generate_map(seed, g.clusters, g.radius, g.pitch)
    };
    let path = out.join("map.toml");
    map.save(&path)?;
    Ok(path)
}

/// Paths written by one training run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainOutput {
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Trains one agent per seed; writes `checkpoint_seed{N}.json` and a JSON
/// lines metrics log `metrics_seed{N}.jsonl` per seed.
pub fn cmd_train(cfg: &RunConfig, seeds: &[u64], out: &Path) -> Result<Vec<TrainOutput>> {
    cfg.validate()?;
    ensure_dir(out)?;
    let map = cfg.load_map()?;
    let vis = Arc::new(Visibility::new(&map, ExecMode::default()));
    let mut outputs = Vec::new();
    for &seed in seeds {
        let log_path = out.join(format!("metrics_seed{seed}.jsonl"));
        let file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let agent = training::train(
            &cfg.agent,
            &cfg.train,
            &cfg.env,
            map.clone(),
            vis.clone(),
            seed,
            |rec: &LogRecord| {
                serde_json::to_writer(&mut w, rec)?;
                w.write_all(b"\n").map_err(|e| Error::io(&log_path, e))
            },
        )?;
        w.flush().map_err(|e| Error::io(&log_path, e))?;
        let ckpt = out.join(format!("checkpoint_seed{seed}.json"));
        agent.save(&ckpt)?;
        outputs.push(TrainOutput {
            seed,
            checkpoint: ckpt,
            log: log_path,
        });
    }
    Ok(outputs)
}

/// What a rollout runs.
#[derive(Clone, Debug, PartialEq)]
pub enum RolloutSource {
    Checkpoint(PathBuf),
    Scripted(ScriptedKind),
}

/// Runs `episodes` greedy (or scripted) episodes and writes them to
/// `out/name`. The checkpoint must have been trained on the configured map.
pub fn cmd_rollout(
    cfg: &RunConfig,
    source: &RolloutSource,
    episodes: usize,
    seed: u64,
    out: &Path,
    name: &str,
) -> Result<PathBuf> {
    cfg.validate()?;
    ensure_dir(out)?;
    let path = out_file(out, name)?;
    let map = cfg.load_map()?;
    let vis = Arc::new(Visibility::new(&map, ExecMode::default()));
    let rollout_seed = derive_seed(seed, 3, 0);
    let (label, trajs) = match source {
        RolloutSource::Checkpoint(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let agent = QAgent::from_checkpoint(serde_json::from_str(&text)?, map.clone())?;
            let label = format!("{:?}", agent.config().target).to_lowercase();
            let trajs = training::rollout_agent(
                &agent,
                &cfg.env,
                &map,
                &vis,
                episodes,
                rollout_seed,
                &label,
                ExecMode::default(),
            )?;
            (label, trajs)
        }
        RolloutSource::Scripted(kind) => {
            let trajs = training::rollout_scripted(
                *kind,
                &cfg.env,
                &map,
                &vis,
                episodes,
                rollout_seed,
                ExecMode::default(),
            )?;
            (kind.label().to_string(), trajs)
        }
    };
    let header = TrajHeader::new(
        map.hash(),
        serde_json::json!({ "agent": label, "env": cfg.env, "episodes": episodes, "seed": seed }),
    );
    trajio::write(&path, &header, &trajs)?;
    Ok(path)
}

/// Reads trajectory files that must all belong to the configured map.
fn read_all(files: &[PathBuf], map: &ArenaMap) -> Result<Vec<Trajectory>> {
    let mut all = Vec::new();
    let mut first: Option<String> = None;
    for f in files {
        let (header, trajs) = trajio::read(f)?;
        if let Some(h) = &first {
            if *h != header.map_hash {
                return Err(Error::MapMismatch(h.clone(), header.map_hash));
            }
        }
        if header.map_hash != map.hash() {
            return Err(Error::MapMismatch(header.map_hash, map.hash()));
        }
        first.get_or_insert(header.map_hash);
        all.extend(trajs);
    }
    Ok(all)
}

fn group_by_agent(trajs: Vec<Trajectory>) -> BTreeMap<String, Vec<Trajectory>> {
    let mut groups: BTreeMap<String, Vec<Trajectory>> = BTreeMap::new();
    for t in trajs {
        groups.entry(t.agent.clone()).or_default().push(t);
    }
    groups
}

fn file_safe(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Files written by `analyze`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyzeOutput {
    pub reports: Vec<BehaviorReport>,
    pub table: PathBuf,
    pub json: PathBuf,
    pub heatmaps: Vec<PathBuf>,
}

/// Behavior report per agent label plus a density heatmap per label.
/// `reference` supplies the density that overlap is measured against.
pub fn cmd_analyze(
    cfg: &RunConfig,
    files: &[PathBuf],
    reference: Option<&Path>,
    out: &Path,
) -> Result<AnalyzeOutput> {
    cfg.validate()?;
    ensure_dir(out)?;
    let map = cfg.load_map()?;
    let trajs = read_all(files, &map)?;
    let ref_density = match reference {
        Some(p) => Some(metrics::density(
            &read_all(&[p.to_path_buf()], &map)?,
            &map,
        )?),
        None => None,
    };
    let mut reports = Vec::new();
    let mut heatmaps = Vec::new();
    let mut table = String::new();
    for (label, group) in group_by_agent(trajs) {
        let mut report = metrics::behavior_report(
            &label,
            &group,
            &map,
            ref_density.as_ref(),
            cfg.analyze.min_visits,
        )?;
        report.episode_length_stats =
            metrics::episode_length_stats(&group, cfg.analyze.min_length, cfg.analyze.max_length);
        let d = metrics::density(&group, &map)?;
        let svg = out.join(format!("heatmap_{}.svg", file_safe(&label)));
        write_text(&svg, &metrics::density_svg(&d, &map, &label))?;
        heatmaps.push(svg);
        table.push_str(&report.to_table());
        table.push('\n');
        reports.push(report);
    }
    let table_path = out.join("report.txt");
    write_text(&table_path, &table)?;
    let json_path = out.join("report.json");
    write_text(&json_path, &serde_json::to_string_pretty(&reports)?)?;
    Ok(AnalyzeOutput {
        reports,
        table: table_path,
        json: json_path,
        heatmaps,
    })
}

/// One side of a comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SideSummary {
    pub episodes: usize,
    pub coverage_fraction: f64,
    pub waiting_incidence: f64,
    pub thigmotaxis_fraction: f64,
    pub success_rate: f64,
    pub mean_length: f64,
    pub episode_length_stats: Option<LengthStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// Jaccard overlap of visited cells.
    pub overlap: f64,
    /// Share of B's cells that A also visits, and the reverse.
    pub overlap_a_in_b: f64,
    pub overlap_b_in_a: f64,
    pub a: SideSummary,
    pub b: SideSummary,
    /// Mean KL(pi_A || pi_B) over the states both files visit; present
    /// only when both policies were supplied.
    pub mean_kl: Option<f64>,
    pub kl_states: Option<usize>,
}

impl Comparison {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24}{:.4}", "overlap", self.overlap);
        let _ = writeln!(s, "{:<24}{:.4}", "overlap_a_in_b", self.overlap_a_in_b);
        let _ = writeln!(s, "{:<24}{:.4}", "overlap_b_in_a", self.overlap_b_in_a);
        if let (Some(kl), Some(n)) = (self.mean_kl, self.kl_states) {
            let _ = writeln!(s, "{:<24}{kl:.6} over {n} states", "mean_kl");
        }
        let _ = writeln!(s, "{:<24}{:>12}{:>12}", "", "A", "B");
        let rows: [(&str, f64, f64); 6] = [
            ("episodes", self.a.episodes as f64, self.b.episodes as f64),
            ("success_rate", self.a.success_rate, self.b.success_rate),
            (
                "coverage_fraction",
                self.a.coverage_fraction,
                self.b.coverage_fraction,
            ),
            (
                "waiting_incidence",
                self.a.waiting_incidence,
                self.b.waiting_incidence,
            ),
            (
                "thigmotaxis_fraction",
                self.a.thigmotaxis_fraction,
                self.b.thigmotaxis_fraction,
            ),
            ("mean_length", self.a.mean_length, self.b.mean_length),
        ];
        for (k, a, b) in rows {
            let _ = writeln!(s, "{k:<24}{a:>12.4}{b:>12.4}");
        }
        let stat = |l: &Option<LengthStats>| {
            l.as_ref().map_or("absent".to_string(), |l| {
                format!("{:.3}±{:.3}", l.mean, l.sd)
            })
        };
        let _ = writeln!(
            s,
            "{:<24}{:>16}{:>16}",
            "length[filtered]",
            stat(&self.a.episode_length_stats),
            stat(&self.b.episode_length_stats)
        );
        s
    }
}

fn summarize(
    trajs: &[Trajectory],
    map: &ArenaMap,
    d: &DensityMap,
    a: &AnalyzeConfig,
) -> Result<SideSummary> {
    let r = metrics::behavior_report("", trajs, map, None, a.min_visits)?;
    Ok(SideSummary {
        episodes: r.episodes,
        coverage_fraction: metrics::coverage_fraction(d, map),
        waiting_incidence: r.waiting_incidence,
        thigmotaxis_fraction: r.thigmotaxis_fraction,
        success_rate: r.success_rate,
        mean_length: r.mean_length,
        episode_length_stats: metrics::episode_length_stats(trajs, a.min_length, a.max_length),
    })
}

/// Rebuilds the policy-relevant part of an observation from a logged step.
/// Heading is not logged and is set to east.
fn step_observation(s: &trajio::Step, map: &ArenaMap, max_steps: usize) -> Observation {
    let mut o = [0.0; OBS_DIM];
    o[0] = s.prey.x;
    o[1] = s.prey.y;
    o[2] = 1.0;
    match (s.predator_visible, s.predator) {
        (true, Some(p)) => {
            o[4] = p.x;
            o[5] = p.y;
            o[6] = 1.0;
        }
        _ => {
            o[4] = SENTINEL;
            o[5] = SENTINEL;
        }
    }
    let goal = map.center(map.goal());
    let scale = map
        .open_cells()
        .map(|c| map.center(c).dist(goal))
        .fold(0.0, f64::max)
        .max(f64::EPSILON);
    o[7] = (s.prey.dist(goal) / scale).min(1.0);
    o[8] = if s.puffed { 1.0 } else { 0.0 };
    o[9] = s.t as f64 / max_steps.max(1) as f64;
    Observation(o)
}

/// Overlap and side-by-side statistics for two trajectory files, plus the
/// mean policy KL when checkpoints for both sides are given.
pub fn cmd_compare(
    cfg: &RunConfig,
    a: &Path,
    b: &Path,
    policies: Option<(&Path, &Path)>,
    out: &Path,
) -> Result<Comparison> {
    cfg.validate()?;
    ensure_dir(out)?;
    let map = cfg.load_map()?;
    let (ha, ta) = trajio::read(a)?;
    let (hb, tb) = trajio::read(b)?;
    if ha.map_hash != hb.map_hash {
        return Err(Error::MapMismatch(ha.map_hash, hb.map_hash));
    }
    if ha.map_hash != map.hash() {
        return Err(Error::MapMismatch(ha.map_hash, map.hash()));
    }
    let (da, db) = (metrics::density(&ta, &map)?, metrics::density(&tb, &map)?);
    let mv = cfg.analyze.min_visits;
    let (mean_kl, kl_states) = match policies {
        Some((pa, pb)) => {
            let load = |p: &Path| -> Result<QAgent> {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                QAgent::from_checkpoint(serde_json::from_str(&text)?, map.clone())
            };
            let (qa, qb) = (load(pa)?, load(pb)?);
            // one representative observation per encoded state seen on both sides
            let collect = |trajs: &[Trajectory]| -> BTreeMap<usize, Observation> {
                let mut m = BTreeMap::new();
                for t in trajs {
                    for s in &t.steps {
                        let o = step_observation(s, &map, cfg.env.max_steps);
                        m.entry(qa.encode(&o)).or_insert(o);
                    }
                }
                m
            };
            let (sa, sb) = (collect(&ta), collect(&tb));
            let states: Vec<Observation> = sa
                .iter()
                .filter(|(k, _)| sb.contains_key(k))
                .map(|(_, o)| *o)
                .collect();
            let kl = metrics::policy_kl(
                |o: &Observation| qa.policy_distribution(o),
                |o: &Observation| qb.policy_distribution(o),
                &states,
            )?;
            (Some(kl), Some(states.len()))
        }
        None => (None, None),
    };
    let cmp = Comparison {
        overlap: metrics::visitation_overlap(&da, &db, mv),
        overlap_a_in_b: metrics::directional_overlap(&da, &db, mv),
        overlap_b_in_a: metrics::directional_overlap(&db, &da, mv),
        a: summarize(&ta, &map, &da, &cfg.analyze)?,
        b: summarize(&tb, &map, &db, &cfg.analyze)?,
        mean_kl,
        kl_states,
    };
    write_text(&out.join("compare.txt"), &cmp.to_table())?;
    write_text(
        &out.join("compare.json"),
        &serde_json::to_string_pretty(&cmp)?,
    )?;
    Ok(cmp)
}

/// Summary of an `llm-run`.
#[derive(Clone, Debug, PartialEq)]
pub struct LlmRunOutput {
    pub trajectories: PathBuf,
    pub transcripts: Vec<PathBuf>,
    pub aborted: usize,
    pub retries: u32,
    pub violations: u32,
}

/// Runs chat-model episodes (live, against the stub, or replayed from
/// transcripts) and writes trajectories and per-episode transcripts.
pub fn cmd_llm_run(
    cfg: &RunConfig,
    seed: u64,
    replay: &[PathBuf],
    out: &Path,
) -> Result<LlmRunOutput> {
    cfg.validate()?;
    ensure_dir(out)?;
    let map = cfg.load_map()?;
    let client = &cfg.llm.client;
    let mut env = Env::new(cfg.env.clone(), map.clone())?;
    let mut episodes = Vec::new();
    if replay.is_empty() {
        let stub = if cfg.llm.stub {
            Some(StubServer::start(llm::goal_seeker(
                map.center(map.goal()),
                cfg.llm.stub_step,
            ))?)
        } else {
            None
        };
        let client = match &stub {
            Some(s) => ClientConfig {
                endpoint: s.url().to_string(),
                ..client.clone()
            },
            None => client.clone(),
        };
        let mut transport = HttpTransport::new(&client);
        for i in 0..cfg.llm.episodes {
            let ep_seed = derive_seed(seed, 4, i as u64);
            episodes.push(llm::run_episode(
                &mut transport,
                &mut env,
                &client,
                i as u64,
                ep_seed,
            )?);
        }
    } else {
        for (i, p) in replay.iter().enumerate() {
            let entries = llm::read_transcript(p)?;
            let ep_seed = derive_seed(seed, 4, i as u64);
            episodes.push(llm::replay_episode(
                &entries, &mut env, client, i as u64, ep_seed,
            )?);
        }
    }
    let mut transcripts = Vec::new();
    for (i, ep) in episodes.iter().enumerate() {
        let p = out.join(format!("transcript_{i}.jsonl"));
        llm::write_transcript(&p, &ep.transcript)?;
        transcripts.push(p);
    }
    let trajs: Vec<Trajectory> = episodes.iter().map(|e| e.trajectory.clone()).collect();
    let path = out.join("llm_trajectories.jsonl");
    let header = TrajHeader::new(
        map.hash(),
        serde_json::json!({ "agent": "llm", "model": client.model, "env": cfg.env, "seed": seed }),
    );
    trajio::write(&path, &header, &trajs)?;
    Ok(LlmRunOutput {
        trajectories: path,
        transcripts,
        aborted: episodes.iter().filter(|e| e.aborted.is_some()).count(),
        retries: episodes.iter().map(|e| e.retries).sum(),
        violations: episodes.iter().map(|e| e.violations).sum(),
    })
}
