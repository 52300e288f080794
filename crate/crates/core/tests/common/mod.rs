//! Independent reference computations shared by the integration suites.
//! Each one is written from the definition, not from the library code path.
#![allow(dead_code)]

use std::collections::{HashMap, HashSet, VecDeque};

use cellworld::env::Action;
use cellworld::hexgrid::{ArenaMap, HexCoord, Point};
use cellworld::trajio::{Outcome, Step, Trajectory};
use rand::Rng;

pub fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

// ---- scalar formulas ----

pub fn td_standard(r: f64, q_next: f64, gamma: f64, terminal: bool) -> f64 {
    if terminal {
        r
    } else {
        r + gamma * q_next
    }
}

pub fn td_vp(r: f64, q_next: f64, var: f64, alpha: f64, gamma: f64, terminal: bool) -> f64 {
    if terminal {
        r
    } else {
        r + gamma * q_next - gamma * alpha * var
    }
}

/// Population variance through the sum of squared pairwise differences:
/// `Var = sum_{i<j} (x_i - x_j)^2 / n^2`, then clipped.
pub fn pairwise_variance(xs: &[f64], clip: f64) -> f64 {
    let n = xs.len() as f64;
    let mut s = 0.0;
    for i in 0..xs.len() {
        for j in i + 1..xs.len() {
            s += (xs[i] - xs[j]).powi(2);
        }
    }
    (s / (n * n)).clamp(0.0, clip)
}

pub fn neg_mse(pred: &[f64], actual: &[f64], w: f64) -> f64 {
    let n = pred.len() as f64;
    -w * pred
        .iter()
        .zip(actual)
        .map(|(p, a)| (p - a) * (p - a))
        .sum::<f64>()
        / n
}

/// Gaussian log-density with fixed variance `sigma2`, summed over dimensions.
pub fn gaussian_loglik(mean: &[f64], x: &[f64], sigma2: f64) -> f64 {
    mean.iter()
        .zip(x)
        .map(|(m, v)| {
            -0.5 * (2.0 * std::f64::consts::PI * sigma2).ln() - (v - m) * (v - m) / (2.0 * sigma2)
        })
        .sum()
}

/// KL(p || q) after flooring q and renormalizing both.
pub fn kl(p: &[f64], q: &[f64], floor: f64) -> f64 {
    let qf: Vec<f64> = q
        .iter()
        .map(|x| if *x < floor { floor } else { *x })
        .collect();
    let zq: f64 = qf.iter().sum();
    let zp: f64 = p.iter().sum();
    let mut acc = 0.0;
    for i in 0..p.len() {
        if p[i] > 0.0 {
            let pi = p[i] / zp;
            acc += pi * (pi.ln() - (qf[i] / zq).ln());
        }
    }
    acc
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut k = 0;
        while k < idx.len() {
            let mut e = k;
            while e + 1 < idx.len() && v[idx[e + 1]] == v[idx[k]] {
                e += 1;
            }
            let avg = (k + e) as f64 / 2.0;
            for &i in &idx[k..=e] {
                r[i] = avg;
            }
            k = e + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

// ---- geometry ----

/// Strictly inside a pointy-top hexagon with the given apothem.
fn inside_cell(p: Point, center: Point, apothem: f64) -> bool {
    (0..3).all(|k| {
        let a = (60.0 * k as f64).to_radians();
        ((p.x - center.x) * a.cos() + (p.y - center.y) * a.sin()).abs() < apothem
    })
}

/// Sight test by sampling the segment densely and probing each sample
/// against every occluded hexagon near the segment.
pub fn los_dense(map: &ArenaMap, a: Point, b: Point, samples: usize) -> bool {
    let apothem = map.pitch() / 2.0 - cellworld::hexgrid::GRAZE_TOLERANCE;
    let reach = map.pitch() / 3f64.sqrt();
    let d = Point::new(b.x - a.x, b.y - a.y);
    let len2 = d.x * d.x + d.y * d.y;
    let near: Vec<Point> = map
        .occluded()
        .iter()
        .map(|&c| map.center(c))
        .filter(|c| {
            let t = if len2 == 0.0 {
                0.0
            } else {
                (((c.x - a.x) * d.x + (c.y - a.y) * d.y) / len2).clamp(0.0, 1.0)
            };
            let q = Point::new(a.x + t * d.x, a.y + t * d.y);
            q.dist(*c) < reach + 1e-12
        })
        .collect();
    for i in 1..samples {
        let t = i as f64 / samples as f64;
        let p = Point::new(a.x + t * d.x, a.y + t * d.y);
        if near.iter().any(|c| inside_cell(p, *c, apothem)) {
            return false;
        }
    }
    true
}

fn axial_valid(c: HexCoord, radius: i32) -> bool {
    c.q.abs() <= radius && c.r.abs() <= radius && (c.q + c.r).abs() <= radius
}

const AXIAL: [(i32, i32); 6] = [(1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1)];

/// Cells on a shortest path (both ends counted) by breadth-first search.
pub fn bfs_cells(map: &ArenaMap, from: HexCoord, to: HexCoord) -> Option<usize> {
    let open = |c: HexCoord| axial_valid(c, map.radius()) && !map.occluded().contains(&c);
    if !open(from) || !open(to) {
        return None;
    }
    let mut dist = HashMap::from([(from, 1usize)]);
    let mut q = VecDeque::from([from]);
    while let Some(c) = q.pop_front() {
        if c == to {
            return Some(dist[&c]);
        }
        for (dq, dr) in AXIAL {
            let n = HexCoord::new(c.q + dq, c.r + dr);
            if open(n) && !dist.contains_key(&n) {
                dist.insert(n, dist[&c] + 1);
                q.push_back(n);
            }
        }
    }
    None
}

pub fn brute_nearest(map: &ArenaMap, p: Point) -> HexCoord {
    *map.cells()
        .iter()
        .min_by(|a, b| map.center(**a).dist(p).total_cmp(&map.center(**b).dist(p)))
        .unwrap()
}

/// Distance from `p` to the outer wall, measured to the wall's edge segments.
pub fn wall_distance_edges(map: &ArenaMap, p: Point) -> f64 {
    let r = map.radius() as f64 * map.pitch() + map.pitch() / 2.0;
    let corners: Vec<Point> = (0..6)
        .map(|k| {
            let a = (60.0 * k as f64).to_radians();
            Point::new(0.5 + r * a.cos(), 0.5 + r * a.sin())
        })
        .collect();
    (0..6)
        .map(|k| {
            let (a, b) = (corners[k], corners[(k + 1) % 6]);
            let d = Point::new(b.x - a.x, b.y - a.y);
            let t =
                (((p.x - a.x) * d.x + (p.y - a.y) * d.y) / (d.x * d.x + d.y * d.y)).clamp(0.0, 1.0);
            p.dist(Point::new(a.x + t * d.x, a.y + t * d.y))
        })
        .fold(f64::INFINITY, f64::min)
}

// ---- metrics ----

pub fn naive_density(trajs: &[Trajectory], map: &ArenaMap) -> HashMap<HexCoord, u64> {
    let mut m = HashMap::new();
    for t in trajs {
        for s in &t.steps {
            *m.entry(brute_nearest(map, s.prey)).or_insert(0) += 1;
        }
    }
    m
}

pub fn jaccard(a: &HashSet<HexCoord>, b: &HashSet<HexCoord>) -> f64 {
    let u = a.union(b).count();
    if u == 0 {
        0.0
    } else {
        a.intersection(b).count() as f64 / u as f64
    }
}

pub fn naive_thigmotactic(t: &Trajectory, map: &ArenaMap) -> bool {
    let near = t
        .steps
        .iter()
        .filter(|s| wall_distance_edges(map, s.prey) < 0.1)
        .count();
    near * 10 > t.steps.len() * 7
}

pub fn naive_waiting(t: &Trajectory) -> bool {
    t.steps.len() >= 7 && (1..=6).all(|k| t.steps[k].prey.dist(t.steps[0].prey) < 0.1)
}

/// Mean and population covariance via raw moments.
pub fn moments(pts: &[Point]) -> ([f64; 2], [[f64; 2]; 2]) {
    let n = pts.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for p in pts {
        sx += p.x;
        sy += p.y;
        sxx += p.x * p.x;
        sxy += p.x * p.y;
        syy += p.y * p.y;
    }
    let (mx, my) = (sx / n, sy / n);
    (
        [mx, my],
        [
            [sxx / n - mx * mx, sxy / n - mx * my],
            [sxy / n - mx * my, syy / n - my * my],
        ],
    )
}

// ---- generators ----

/// A structurally valid random trajectory over open cell centers.
pub fn random_trajectory<R: Rng>(rng: &mut R, map: &ArenaMap, id: u64) -> Trajectory {
    let open: Vec<HexCoord> = map.open_cells().collect();
    let len = rng.gen_range(1..40);
    let outcome = match rng.gen_range(0..3) {
        0 => Outcome::Goal,
        1 => Outcome::Captured,
        _ => Outcome::Truncated,
    };
    let mut steps = Vec::with_capacity(len);
    for t in 0..len {
        let last = t + 1 == len && t > 0;
        let prey = map.center(open[rng.gen_range(0..open.len())]);
        let visible = rng.gen_bool(0.3);
        let action = (t > 0).then(|| match rng.gen_range(0..3) {
            0 => Action::Stay,
            1 => Action::Move {
                dir: rng.gen_range(0..6),
            },
            _ => Action::Target {
                x: rng.gen(),
                y: rng.gen(),
                wait: 0.0,
            },
        });
        let (reward, puffed) = match (last, outcome) {
            (true, Outcome::Goal) => (1.0, false),
            (true, Outcome::Captured) => (-1.0, true),
            _ => (0.0, false),
        };
        steps.push(Step {
            t: t as u32,
            prey,
            predator: rng
                .gen_bool(0.8)
                .then(|| map.center(open[rng.gen_range(0..open.len())])),
            action,
            reward,
            predator_visible: visible,
            puffed,
        });
    }
    let outcome = if len == 1 {
        Outcome::Truncated
    } else {
        outcome
    };
    Trajectory {
        id,
        seed: rng.gen(),
        agent: format!("gen{}", rng.gen_range(0..3)),
        steps,
        outcome,
    }
}

/// A trajectory visiting `cells` in order, as one step each.
pub fn path_trajectory(map: &ArenaMap, id: u64, agent: &str, cells: &[HexCoord]) -> Trajectory {
    let steps = cells
        .iter()
        .enumerate()
        .map(|(t, &c)| Step {
            t: t as u32,
            prey: map.center(c),
            predator: None,
            action: (t > 0).then_some(Action::Stay),
            reward: 0.0,
            predator_visible: false,
            puffed: false,
        })
        .collect();
    Trajectory {
        id,
        seed: 0,
        agent: agent.to_string(),
        steps,
        outcome: Outcome::Truncated,
    }
}
