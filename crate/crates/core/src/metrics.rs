//! Behavioral statistics over trajectories: visitation density, coverage and
//! overlap, wall-following, waiting at the entry, goal-distance dynamics
//! around predator detection, early-step scatter, episode lengths and policy
//! divergence. All functions are pure.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_slice, ExecMode};
use crate::hexgrid::{ArenaMap, Point};
use crate::trajio::{Outcome, Trajectory};

/// Default floor applied to the second policy in [`policy_kl`].
pub const KL_FLOOR: f64 = 1e-8;
pub const WALL_DISTANCE: f64 = 0.1;
pub const THIGMOTAXIS_FRACTION: f64 = 0.7;
pub const WAITING_STEPS: usize = 6;
pub const WAITING_RADIUS: f64 = 0.1;

/// Per-cell visit counts, indexed like `ArenaMap::cells`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DensityMap {
    pub counts: Vec<u64>,
    pub total: u64,
}

impl DensityMap {
    pub fn zeros(map: &ArenaMap) -> Self {
        Self {
            counts: vec![0; map.num_cells()],
            total: 0,
        }
    }

    fn add(&mut self, other: &DensityMap) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
    }

    fn visited(&self, min_visits: u64) -> impl Iterator<Item = bool> + '_ {
        self.counts.iter().map(move |&c| c >= min_visits.max(1))
    }
}

/// Bins every logged prey position to its nearest cell.
pub fn density(trajs: &[Trajectory], map: &ArenaMap) -> Result<DensityMap> {
    density_with(trajs, map, ExecMode::Sequential)
}

pub fn density_with(trajs: &[Trajectory], map: &ArenaMap, mode: ExecMode) -> Result<DensityMap> {
    let parts = map_slice(trajs, mode, |t| -> Result<DensityMap> {
        let mut d = DensityMap::zeros(map);
        for p in t.positions() {
            let cell = map
                .nearest_cell(p)
                .filter(|_| map.contains_point(p))
                .ok_or(Error::PointOutsideArena {
                    id: t.id,
                    x: p.x,
                    y: p.y,
                })?;
            d.counts[map.index_of(cell).expect("nearest cell is valid")] += 1;
            d.total += 1;
        }
        Ok(d)
    });
    let mut out = DensityMap::zeros(map);
    for part in parts {
        out.add(&part?);
    }
    Ok(out)
}

/// Jaccard index of the cell sets visited at least `min_visits` times.
/// Two empty sets give 0.
pub fn visitation_overlap(a: &DensityMap, b: &DensityMap, min_visits: u64) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.visited(min_visits).zip(b.visited(min_visits)) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Share of `b`'s visited cells that `a` also visited (`|A ∩ B| / |B|`).
pub fn directional_overlap(a: &DensityMap, b: &DensityMap, min_visits: u64) -> f64 {
    let (mut inter, mut nb) = (0usize, 0usize);
    for (x, y) in a.visited(min_visits).zip(b.visited(min_visits)) {
        inter += (x && y) as usize;
        nb += y as usize;
    }
    if nb == 0 {
        0.0
    } else {
        inter as f64 / nb as f64
    }
}

/// Visited open cells over all open cells.
pub fn coverage_fraction(d: &DensityMap, map: &ArenaMap) -> f64 {
    let open = map.num_open_cells();
    if open == 0 {
        return 0.0;
    }
    let visited = map
        .cells()
        .iter()
        .zip(&d.counts)
        .filter(|(c, &n)| n > 0 && map.is_open(**c))
        .count();
    visited as f64 / open as f64
}

/// Fraction of positions strictly closer than `wall_dist` to the outer wall.
pub fn wall_fraction(traj: &Trajectory, map: &ArenaMap, wall_dist: f64) -> Result<f64> {
    if traj.steps.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    let near = traj
        .positions()
        .filter(|&p| map.wall_distance(p) < wall_dist)
        .count();
    Ok(near as f64 / traj.steps.len() as f64)
}

/// True iff the wall fraction strictly exceeds `frac`.
pub fn thigmotaxis_classify(
    traj: &Trajectory,
    map: &ArenaMap,
    wall_dist: f64,
    frac: f64,
) -> Result<bool> {
    Ok(wall_fraction(traj, map, wall_dist)? > frac)
}

/// Fraction of positions within `dist` of an occluded cell's boundary
/// (measured to the cell's inscribed circle).
pub fn obstacle_proximity(traj: &Trajectory, map: &ArenaMap, dist: f64) -> Result<f64> {
    if traj.steps.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    let apothem = map.pitch() / 2.0;
    let centers: Vec<Point> = map.occluded().iter().map(|&c| map.center(c)).collect();
    let near = traj
        .positions()
        .filter(|p| centers.iter().any(|c| c.dist(*p) - apothem < dist))
        .count();
    Ok(near as f64 / traj.steps.len() as f64)
}

/// True iff every position at steps 1..=6 lies strictly within 0.1 of the
/// starting position. Shorter trajectories are not waiting.
pub fn waiting_detect(traj: &Trajectory) -> bool {
    if traj.steps.len() <= WAITING_STEPS {
        return false;
    }
    let start = traj.steps[0].prey;
    traj.steps[1..=WAITING_STEPS]
        .iter()
        .all(|s| s.prey.dist(start) < WAITING_RADIUS)
}

/// First step whose predator-visible flag is set.
pub fn detection_step(traj: &Trajectory) -> Option<usize> {
    traj.steps.iter().position(|s| s.predator_visible)
}

/// Per-step change in distance to `goal`. Delta `t` (from step `t-1` to `t`)
/// is "pre" when `t <= detection`, "post" otherwise; with no detection every
/// delta is "pre".
pub fn goal_distance_deltas(
    traj: &Trajectory,
    goal: Point,
    detection: Option<usize>,
) -> (Vec<f64>, Vec<f64>) {
    let d: Vec<f64> = traj.positions().map(|p| p.dist(goal)).collect();
    let mut pre = Vec::new();
    let mut post = Vec::new();
    for t in 1..d.len() {
        let delta = d[t] - d[t - 1];
        match detection {
            Some(k) if t > k => post.push(delta),
            _ => pre.push(delta),
        }
    }
    (pre, post)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    /// Relative step: negative counts back from detection, positive forward.
    pub offset: i64,
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

/// Mean and population SD per relative index. Pre-detection series are
/// aligned on their last element (offset -1), post series on their first
/// (offset +1).
pub fn aggregate_series(series: &[Vec<f64>], align_end: bool) -> Vec<SeriesPoint> {
    let longest = series.iter().map(Vec::len).max().unwrap_or(0);
    (0..longest)
        .map(|i| {
            let vals: Vec<f64> = series
                .iter()
                .filter_map(|s| {
                    if align_end {
                        s.len().checked_sub(i + 1).map(|j| s[j])
                    } else {
                        s.get(i).copied()
                    }
                })
                .collect();
            let (mean, sd) = mean_sd(&vals);
            let offset = if align_end {
                -(i as i64) - 1
            } else {
                i as i64 + 1
            };
            SeriesPoint {
                offset,
                mean,
                sd,
                n: vals.len(),
            }
        })
        .collect()
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterStep {
    pub step: usize,
    pub mean: [f64; 2],
    /// Population covariance.
    pub cov: [[f64; 2]; 2],
    pub n: usize,
}

/// Mean position and covariance at steps 1..=k over trajectories that reach
/// step `k`; shorter ones are skipped.
pub fn first_k_scatter(trajs: &[Trajectory], k: usize) -> Vec<ScatterStep> {
    let eligible: Vec<&Trajectory> = trajs.iter().filter(|t| t.steps.len() > k).collect();
    (1..=k)
        .map(|step| {
            let pts: Vec<Point> = eligible.iter().map(|t| t.steps[step].prey).collect();
            let n = pts.len();
            if n == 0 {
                return ScatterStep {
                    step,
                    mean: [0.0; 2],
                    cov: [[0.0; 2]; 2],
                    n,
                };
            }
            let nf = n as f64;
            let mx = pts.iter().map(|p| p.x).sum::<f64>() / nf;
            let my = pts.iter().map(|p| p.y).sum::<f64>() / nf;
            let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
            for p in &pts {
                sxx += (p.x - mx) * (p.x - mx);
                sxy += (p.x - mx) * (p.y - my);
                syy += (p.y - my) * (p.y - my);
            }
            ScatterStep {
                step,
                mean: [mx, my],
                cov: [[sxx / nf, sxy / nf], [sxy / nf, syy / nf]],
                n,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub n: usize,
    pub mean: f64,
    /// Population SD.
    pub sd: f64,
    pub min: usize,
    pub max: usize,
}

/// Statistics over lengths in `[min_len, max_len]`; `None` when nothing
/// survives the filter.
pub fn length_stats(lengths: &[usize], min_len: usize, max_len: usize) -> Option<LengthStats> {
    let kept: Vec<usize> = lengths
        .iter()
        .copied()
        .filter(|l| (min_len..=max_len).contains(l))
        .collect();
    if kept.is_empty() {
        return None;
    }
    let vals: Vec<f64> = kept.iter().map(|&l| l as f64).collect();
    let (mean, sd) = mean_sd(&vals);
    Some(LengthStats {
        n: kept.len(),
        mean,
        sd,
        min: *kept.iter().min().expect("non-empty"),
        max: *kept.iter().max().expect("non-empty"),
    })
}

pub fn episode_length_stats(
    trajs: &[Trajectory],
    min_len: usize,
    max_len: usize,
) -> Option<LengthStats> {
    let lengths: Vec<usize> = trajs.iter().map(Trajectory::len).collect();
    length_stats(&lengths, min_len, max_len)
}

/// `KL(p || q)` with `q` floored at `floor` and renormalized.
pub fn kl_divergence(p: &[f64], q: &[f64], floor: f64) -> Result<f64> {
    if p.len() > q.len() && p[q.len()..].iter().any(|&x| x > 0.0) {
        return Err(Error::PolicySupport(format!(
            "{} actions vs {}",
            p.len(),
            q.len()
        )));
    }
    if p.iter().chain(q).any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::PolicySupport(
            "negative or non-finite probability".into(),
        ));
    }
    let floored: Vec<f64> = q.iter().map(|&x| x.max(floor)).collect();
    let z: f64 = floored.iter().sum();
    let pz: f64 = p.iter().sum();
    if pz <= 0.0 {
        return Err(Error::PolicySupport("first policy has no mass".into()));
    }
    Ok(p.iter()
        .zip(&floored)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| {
            let a = a / pz;
            a * (a / (b / z)).ln()
        })
        .sum())
}

/// Mean over `states` of `KL(pi_a(s) || pi_b(s))`.
pub fn policy_kl<S, A, B>(pi_a: A, pi_b: B, states: &[S]) -> Result<f64>
where
    A: Fn(&S) -> Vec<f64>,
    B: Fn(&S) -> Vec<f64>,
{
    if states.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for s in states {
        total += kl_divergence(&pi_a(s), &pi_b(s), KL_FLOOR)?;
    }
    Ok(total / states.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorReport {
    pub agent: String,
    pub episodes: usize,
    pub success_rate: f64,
    pub capture_rate: f64,
    pub coverage_fraction: f64,
    /// Jaccard overlap with the reference density, when one was given.
    pub overlap_fraction: Option<f64>,
    pub directional_overlap: Option<f64>,
    pub thigmotaxis_fraction: f64,
    pub waiting_incidence: f64,
    pub obstacle_proximity: f64,
    pub mean_length: f64,
    pub episode_length_stats: Option<LengthStats>,
    pub goal_delta_pre: Vec<SeriesPoint>,
    pub goal_delta_post: Vec<SeriesPoint>,
    pub first_k_means: Vec<ScatterStep>,
}

pub fn behavior_report(
    agent: &str,
    trajs: &[Trajectory],
    map: &ArenaMap,
    reference: Option<&DensityMap>,
    min_visits: u64,
) -> Result<BehaviorReport> {
    let d = density(trajs, map)?;
    let n = trajs.len();
    let frac = |count: usize| if n == 0 { 0.0 } else { count as f64 / n as f64 };
    let mut thig = 0;
    let mut obstacle = 0.0;
    for t in trajs {
        thig += thigmotaxis_classify(t, map, WALL_DISTANCE, THIGMOTAXIS_FRACTION)? as usize;
        obstacle += obstacle_proximity(t, map, WALL_DISTANCE)?;
    }
    let goal = map.center(map.goal());
    let (pre, post): (Vec<_>, Vec<_>) = trajs
        .iter()
        .map(|t| goal_distance_deltas(t, goal, detection_step(t)))
        .unzip();
    Ok(BehaviorReport {
        agent: agent.to_string(),
        episodes: n,
        success_rate: frac(trajs.iter().filter(|t| t.outcome == Outcome::Goal).count()),
        capture_rate: frac(
            trajs
                .iter()
                .filter(|t| t.outcome == Outcome::Captured)
                .count(),
        ),
        coverage_fraction: coverage_fraction(&d, map),
        overlap_fraction: reference.map(|r| visitation_overlap(&d, r, min_visits)),
        directional_overlap: reference.map(|r| directional_overlap(&d, r, min_visits)),
        thigmotaxis_fraction: frac(thig),
        waiting_incidence: frac(trajs.iter().filter(|t| waiting_detect(t)).count()),
        obstacle_proximity: if n == 0 { 0.0 } else { obstacle / n as f64 },
        mean_length: if n == 0 {
            0.0
        } else {
            trajs.iter().map(Trajectory::len).sum::<usize>() as f64 / n as f64
        },
        episode_length_stats: episode_length_stats(trajs, 5, 50),
        goal_delta_pre: aggregate_series(&pre, true),
        goal_delta_post: aggregate_series(&post, false),
        first_k_means: first_k_scatter(trajs, 3),
    })
}

impl BehaviorReport {
    /// Fixed-width text table of the scalar fields.
    pub fn to_table(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let mut s = String::new();
        let _ = writeln!(s, "{:<24}{}", "agent", self.agent);
        let rows: [(&str, String); 10] = [
            ("episodes", self.episodes.to_string()),
            ("success_rate", format!("{:.4}", self.success_rate)),
            ("capture_rate", format!("{:.4}", self.capture_rate)),
            (
                "coverage_fraction",
                format!("{:.4}", self.coverage_fraction),
            ),
            ("overlap_fraction", opt(self.overlap_fraction)),
            ("directional_overlap", opt(self.directional_overlap)),
            (
                "thigmotaxis_fraction",
                format!("{:.4}", self.thigmotaxis_fraction),
            ),
            (
                "waiting_incidence",
                format!("{:.4}", self.waiting_incidence),
            ),
            (
                "obstacle_proximity",
                format!("{:.4}", self.obstacle_proximity),
            ),
            ("mean_length", format!("{:.3}", self.mean_length)),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k:<24}{v}");
        }
        match &self.episode_length_stats {
            Some(l) => {
                let _ = writeln!(
                    s,
                    "{:<24}n={} mean={:.3} sd={:.3} min={} max={}",
                    "length[5,50]", l.n, l.mean, l.sd, l.min, l.max
                );
            }
            None => {
                let _ = writeln!(s, "{:<24}absent", "length[5,50]");
            }
        }
        for p in &self.first_k_means {
            let _ = writeln!(
                s,
                "{:<24}n={} mean=({:.4}, {:.4})",
                format!("step{}_position", p.step),
                p.n,
                p.mean[0],
                p.mean[1]
            );
        }
        s
    }
}

/// Color stops from zero to the maximum count, interpolated on
/// `ln(1 + count) / ln(1 + max)`. Unvisited cells are white and occluded
/// cells dark gray.
pub const HEATMAP_RAMP: [(u8, u8, u8); 5] = [
    (0x44, 0x01, 0x54),
    (0x3b, 0x52, 0x8b),
    (0x21, 0x91, 0x8c),
    (0x5e, 0xc9, 0x62),
    (0xfd, 0xe7, 0x25),
];
const OCCLUDED_FILL: &str = "#404040";
const EMPTY_FILL: &str = "#ffffff";

pub fn ramp_color(t: f64) -> String {
    let t = t.clamp(0.0, 1.0) * (HEATMAP_RAMP.len() - 1) as f64;
    let i = (t.floor() as usize).min(HEATMAP_RAMP.len() - 2);
    let f = t - i as f64;
    let (a, b) = (HEATMAP_RAMP[i], HEATMAP_RAMP[i + 1]);
    let mix = |x: u8, y: u8| (x as f64 + (y as f64 - x as f64) * f).round() as u8;
    format!(
        "#{:02x}{:02x}{:02x}",
        mix(a.0, b.0),
        mix(a.1, b.1),
        mix(a.2, b.2)
    )
}

/// Heatmap of a density as an SVG document (unit square scaled to 600 px,
/// y pointing up).
pub fn density_svg(d: &DensityMap, map: &ArenaMap, title: &str) -> String {
    const SIZE: f64 = 600.0;
    let max = d.counts.iter().copied().max().unwrap_or(0);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, "<title>{}</title>", escape(title));
    for (i, &c) in map.cells().iter().enumerate() {
        let fill = if !map.is_open(c) {
            OCCLUDED_FILL.to_string()
        } else if d.counts[i] == 0 {
            EMPTY_FILL.to_string()
        } else {
            ramp_color((1.0 + d.counts[i] as f64).ln() / (1.0 + max as f64).ln())
        };
        let pts: Vec<String> = map
            .cell_polygon(c)
            .iter()
            .map(|p| format!("{:.2},{:.2}", p.x * SIZE, (1.0 - p.y) * SIZE))
            .collect();
        let _ = writeln!(
            s,
            r##"<polygon points="{}" fill="{fill}" stroke="#999999" stroke-width="0.5"><title>{} {}: {}</title></polygon>"##,
            pts.join(" "),
            c.q,
            c.r,
            d.counts[i]
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
