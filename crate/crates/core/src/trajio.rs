//! Trajectory records, their line-delimited JSON file format, and ingestion
//! of externally tracked position streams from CSV.
//!
//! File layout, one JSON object per line:
//!
//! ```text
//! {"kind":"header","schema_version":1,"map_hash":"…","config":{…}}
//! {"kind":"traj","id":0,"seed":7,"agent":"vp","outcome":"goal","steps":12}
//! {"kind":"step","t":0,"prey":[0.1,0.5],"predator":[0.7,0.4],"action":null,"reward":0.0,"predator_visible":false,"puffed":false}
//! …
//! ```
//!
//! Every `traj` line is followed by exactly `steps` step lines. `predator` is
//! the true predator position (absent for ingested data without it); whether
//! the prey could see it is carried by `predator_visible`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{Action, Observation, StepResult};
use crate::error::{Error, Result};
use crate::hexgrid::{ArenaMap, Point};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Goal,
    Captured,
    Truncated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub t: u32,
    pub prey: Point,
    pub predator: Option<Point>,
    /// Action that led into this step; `None` for the reset record.
    pub action: Option<Action>,
    pub reward: f64,
    pub predator_visible: bool,
    pub puffed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub id: u64,
    pub seed: u64,
    pub agent: String,
    pub steps: Vec<Step>,
    pub outcome: Outcome,
}

impl Trajectory {
    /// Starts a trajectory from the reset observation.
    pub fn begin(
        id: u64,
        seed: u64,
        agent: impl Into<String>,
        obs: &Observation,
        predator: Point,
    ) -> Self {
        Self {
            id,
            seed,
            agent: agent.into(),
            steps: vec![Step {
                t: 0,
                prey: obs.prey(),
                predator: Some(predator),
                action: None,
                reward: 0.0,
                predator_visible: obs.predator_visible(),
                puffed: false,
            }],
            outcome: Outcome::Truncated,
        }
    }

    pub fn record(&mut self, action: Action, res: &StepResult) {
        let t = self.steps.len() as u32;
        self.steps.push(Step {
            t,
            prey: res.obs.prey(),
            predator: Some(res.info.predator_pos),
            action: Some(action),
            reward: res.reward,
            predator_visible: res.obs.predator_visible(),
            puffed: res.info.puffed,
        });
        if res.terminated || res.truncated {
            self.outcome = if res.info.reached_goal {
                Outcome::Goal
            } else if res.info.puffed && res.terminated {
                Outcome::Captured
            } else {
                Outcome::Truncated
            };
        }
    }

    /// Number of actions taken (the reset record is not counted).
    pub fn len(&self) -> usize {
        self.steps.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn positions(&self) -> impl Iterator<Item = Point> + '_ {
        self.steps.iter().map(|s| s.prey)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Ingest(format!("trajectory {}: {msg}", self.id)));
        let Some(last) = self.steps.last() else {
            return Err(Error::EmptyTrajectory);
        };
        for (i, s) in self.steps.iter().enumerate() {
            if s.t as usize != i {
                return bad(format!("step {i} has t = {}", s.t));
            }
        }
        match self.outcome {
            Outcome::Captured if !last.puffed => bad("captured but last step not puffed".into()),
            Outcome::Goal if last.puffed || last.reward <= 0.0 => {
                bad("goal outcome inconsistent with last step".into())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajHeader {
    pub schema_version: u32,
    pub map_hash: String,
    pub config: serde_json::Value,
}

impl TrajHeader {
    pub fn new(map_hash: impl Into<String>, config: serde_json::Value) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            map_hash: map_hash.into(),
            config,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Record {
    Header(TrajHeader),
    Traj {
        id: u64,
        seed: u64,
        agent: String,
        outcome: Outcome,
        steps: usize,
    },
    Step(Step),
}

pub fn write(path: impl AsRef<Path>, header: &TrajHeader, trajs: &[Trajectory]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut line = |rec: &Record| -> Result<()> {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))
    };
    line(&Record::Header(header.clone()))?;
    for t in trajs {
        line(&Record::Traj {
            id: t.id,
            seed: t.seed,
            agent: t.agent.clone(),
            outcome: t.outcome,
            steps: t.steps.len(),
        })?;
        for s in &t.steps {
            line(&Record::Step(s.clone()))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<(TrajHeader, Vec<Trajectory>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let parse_err = |line: usize, msg: String| Error::Parse { line, msg };

    let (_, first) = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing header".into()))?;
    let first = first.map_err(|e| Error::io(path, e))?;
    let raw: serde_json::Value =
        serde_json::from_str(&first).map_err(|e| parse_err(1, e.to_string()))?;
    let found = raw
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| parse_err(1, "header lacks schema_version".into()))?;
    if found != SCHEMA_VERSION as u64 {
        return Err(Error::SchemaVersion {
            found: found as u32,
            expected: SCHEMA_VERSION,
        });
    }
    let header =
        match serde_json::from_value::<Record>(raw).map_err(|e| parse_err(1, e.to_string()))? {
            Record::Header(h) => h,
            _ => return Err(parse_err(1, "first record is not a header".into())),
        };

    let mut out: Vec<Trajectory> = Vec::new();
    let mut expected_steps = 0usize;
    let mut last_line = 1;
    for (i, text) in lines {
        let n = i + 1;
        last_line = n;
        let text = text.map_err(|e| Error::io(path, e))?;
        if text.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&text).map_err(|e| parse_err(n, e.to_string()))?;
        match rec {
            Record::Header(_) => return Err(parse_err(n, "unexpected header".into())),
            Record::Traj {
                id,
                seed,
                agent,
                outcome,
                steps,
            } => {
                if expected_steps != 0 {
                    return Err(parse_err(
                        n,
                        format!("previous trajectory is missing {expected_steps} steps"),
                    ));
                }
                expected_steps = steps;
                out.push(Trajectory {
                    id,
                    seed,
                    agent,
                    steps: Vec::with_capacity(steps),
                    outcome,
                });
            }
            Record::Step(s) => {
                let Some(t) = out.last_mut().filter(|_| expected_steps > 0) else {
                    return Err(parse_err(n, "step outside a trajectory".into()));
                };
                if s.t as usize != t.steps.len() {
                    return Err(parse_err(
                        n,
                        format!("expected t = {}, found {}", t.steps.len(), s.t),
                    ));
                }
                t.steps.push(s);
                expected_steps -= 1;
            }
        }
    }
    if expected_steps != 0 {
        return Err(parse_err(
            last_line,
            format!("file ends {expected_steps} steps short"),
        ));
    }
    Ok((header, out))
}

/// How to read an external CSV position stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMap {
    pub time: String,
    pub x: String,
    pub y: String,
    pub predator_x: Option<String>,
    pub predator_y: Option<String>,
    /// Rows sharing a value form one trajectory; absent means one trajectory.
    pub episode: Option<String>,
    /// Length of the arena diameter in file units (e.g. 275 for centimeters).
    pub arena_diameter: f64,
    /// File coordinates of the normalized origin.
    pub origin: [f64; 2],
    /// Output timestep in seconds.
    pub timestep: f64,
    pub agent: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            time: "time".into(),
            x: "x".into(),
            y: "y".into(),
            predator_x: None,
            predator_y: None,
            episode: None,
            arena_diameter: 1.0,
            origin: [0.0, 0.0],
            timestep: 0.25,
            agent: "external".into(),
        }
    }
}

struct Sample {
    time: f64,
    prey: Point,
    predator: Option<Point>,
}

/// Reads a CSV stream, rescales it to normalized units and resamples each
/// episode onto the output timestep by nearest-sample selection (earlier
/// sample on ties). Any error rejects the whole file.
pub fn ingest_external(
    path: impl AsRef<Path>,
    cols: &ColumnMap,
    map: &ArenaMap,
) -> Result<Vec<Trajectory>> {
    let path = path.as_ref();
    if !(cols.arena_diameter > 0.0) || !(cols.timestep > 0.0) {
        return Err(Error::InvalidConfig(
            "arena_diameter and timestep must be > 0".into(),
        ));
    }
    if cols.predator_x.is_some() != cols.predator_y.is_some() {
        return Err(Error::InvalidConfig(
            "predator_x and predator_y must be mapped together".into(),
        ));
    }
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::Ingest(e.to_string()))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Ingest(format!("missing mapped column `{name}`")))
    };
    let (ti, xi, yi) = (col(&cols.time)?, col(&cols.x)?, col(&cols.y)?);
    let pi = match (&cols.predator_x, &cols.predator_y) {
        (Some(px), Some(py)) => Some((col(px)?, col(py)?)),
        _ => None,
    };
    let ei = cols.episode.as_deref().map(col).transpose()?;

    let scale = |v: f64, o: f64| (v - o) / cols.arena_diameter;
    let mut episodes: BTreeMap<String, Vec<Sample>> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for (row_no, rec) in rdr.records().enumerate() {
        let line = row_no + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        let num = |i: usize| -> Result<Option<f64>> {
            let field = rec.get(i).unwrap_or("").trim();
            if field.is_empty() {
                return Ok(None);
            }
            field.parse::<f64>().map(Some).map_err(|e| Error::Parse {
                line,
                msg: format!("column {}: {e}", headers.get(i).unwrap_or("?")),
            })
        };
        let need = |i: usize| {
            num(i)?.ok_or_else(|| Error::Parse {
                line,
                msg: format!("empty {}", headers.get(i).unwrap_or("?")),
            })
        };
        let time = need(ti)?;
        let prey = Point::new(
            scale(need(xi)?, cols.origin[0]),
            scale(need(yi)?, cols.origin[1]),
        );
        let predator = match pi {
            Some((a, b)) => match (num(a)?, num(b)?) {
                (Some(px), Some(py)) => Some(Point::new(
                    scale(px, cols.origin[0]),
                    scale(py, cols.origin[1]),
                )),
                _ => None,
            },
            None => None,
        };
        let key = ei
            .map(|i| rec.get(i).unwrap_or("").trim().to_string())
            .unwrap_or_default();
        let list = episodes.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            Vec::new()
        });
        if let Some(prev) = list.last() {
            if !(time > prev.time) {
                return Err(Error::Ingest(format!(
                    "line {line}: time {time} not increasing"
                )));
            }
        }
        list.push(Sample {
            time,
            prey,
            predator,
        });
    }

    let mut out = Vec::with_capacity(order.len());
    for (idx, key) in order.iter().enumerate() {
        let samples = &episodes[key];
        let id = key.parse::<u64>().unwrap_or(idx as u64);
        let steps = resample(samples, cols.timestep);
        for s in &steps {
            for p in std::iter::once(s.prey).chain(s.predator) {
                if !map.contains_point(p) {
                    return Err(Error::PointOutsideArena { id, x: p.x, y: p.y });
                }
            }
        }
        let traj = Trajectory {
            id,
            seed: 0,
            agent: cols.agent.clone(),
            steps,
            outcome: Outcome::Truncated,
        };
        traj.validate()?;
        out.push(traj);
    }
    Ok(out)
}

fn resample(samples: &[Sample], dt: f64) -> Vec<Step> {
    let Some(first) = samples.first() else {
        return Vec::new();
    };
    let t0 = first.time;
    let t_end = samples.last().map_or(t0, |s| s.time);
    let ticks = ((t_end - t0) / dt + 1e-9).floor() as usize + 1;
    let mut j = 0;
    (0..ticks)
        .map(|k| {
            let target = t0 + k as f64 * dt;
            while j + 1 < samples.len()
                && (samples[j + 1].time - target).abs() < (samples[j].time - target).abs()
            {
                j += 1;
            }
            let s = &samples[j];
            Step {
                t: k as u32,
                prey: s.prey,
                predator: s.predator,
                action: None,
                reward: 0.0,
                predator_visible: false,
                puffed: false,
            }
        })
        .collect()
}

/// Writes trajectories in the identity CSV layout accepted by
/// [`ingest_external`] with a default [`ColumnMap`] plus `episode`.
pub fn export_csv(path: impl AsRef<Path>, trajs: &[Trajectory], dt: f64) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Ingest(e.to_string()))?;
    let wr = |e: csv::Error| Error::Ingest(e.to_string());
    w.write_record(["episode", "time", "x", "y", "predator_x", "predator_y"])
        .map_err(wr)?;
    for t in trajs {
        for s in &t.steps {
            let (px, py) = s.predator.map_or((String::new(), String::new()), |p| {
                (p.x.to_string(), p.y.to_string())
            });
            w.write_record([
                t.id.to_string(),
                (s.t as f64 * dt).to_string(),
                s.prey.x.to_string(),
                s.prey.y.to_string(),
                px,
                py,
            ])
            .map_err(wr)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
