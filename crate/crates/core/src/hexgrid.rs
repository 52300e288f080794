//! Hexagonal arena geometry: axial cells, planar embedding, adjacency,
//! A* pathfinding and occlusion-aware line of sight.
//!
//! Cells are pointy-top hexagons in axial coordinates `(q, r)`; the arena they
//! tile is a flat-top hexagon of `radius` rings whose left and right corners sit
//! on the horizontal midline. The embedding is
//!
//! ```text
//! x = 0.5 + pitch * (q + r / 2)
//! y = 0.5 + pitch * (sqrt(3) / 2) * r
//! ```
//!
//! so `(0, 0)` maps to `(0.5, 0.5)`, the entry corner `(-10, 0)` to `x = 0.1` and
//! the goal corner `(10, 0)` to `x = 0.9` with the default pitch of 0.04.
//!
//! Neighbor order is fixed and matches the six move actions:
//! `E (1,0)`, `NE (0,1)`, `NW (-1,1)`, `W (-1,0)`, `SW (0,-1)`, `SE (1,-1)`,
//! i.e. direction `d` points at angle `60° * d`.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};

pub const SQRT3: f64 = 1.732_050_807_568_877_2;

/// Axial offsets in the documented neighbor order.
pub const DIRECTIONS: [HexCoord; 6] = [
    HexCoord::new(1, 0),
    HexCoord::new(0, 1),
    HexCoord::new(-1, 1),
    HexCoord::new(-1, 0),
    HexCoord::new(0, -1),
    HexCoord::new(1, -1),
];

const DEFAULT_MAP_TOML: &str = include_str!("../maps/default.toml");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[i32; 2]", into = "[i32; 2]")]
pub struct HexCoord {
    pub q: i32,
    pub r: i32,
}

impl HexCoord {
    pub const fn new(q: i32, r: i32) -> Self {
        Self { q, r }
    }

    pub fn neighbor(self, dir: usize) -> HexCoord {
        let d = DIRECTIONS[dir % 6];
        HexCoord::new(self.q + d.q, self.r + d.r)
    }

    /// Ring index, i.e. hex distance from the origin.
    pub fn ring(self) -> i32 {
        hex_distance(self, HexCoord::new(0, 0))
    }

    /// Direction index if `other` is an adjacent cell.
    pub fn direction_to(self, other: HexCoord) -> Option<usize> {
        let dq = other.q - self.q;
        let dr = other.r - self.r;
        DIRECTIONS.iter().position(|d| d.q == dq && d.r == dr)
    }
}

impl From<[i32; 2]> for HexCoord {
    fn from(v: [i32; 2]) -> Self {
        HexCoord::new(v[0], v[1])
    }
}

impl From<HexCoord> for [i32; 2] {
    fn from(c: HexCoord) -> Self {
        [c.q, c.r]
    }
}

impl fmt::Display for HexCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.q, self.r)
    }
}

pub fn hex_distance(a: HexCoord, b: HexCoord) -> i32 {
    let dq = a.q - b.q;
    let dr = a.r - b.r;
    (dq.abs() + dr.abs() + (dq + dr).abs()) / 2
}

/// Position in normalized arena units.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn sub(self, other: Point) -> Point {
        Point::new(self.x - other.x, self.y - other.y)
    }

    pub fn add(self, other: Point) -> Point {
        Point::new(self.x + other.x, self.y + other.y)
    }

    pub fn scale(self, k: f64) -> Point {
        Point::new(self.x * k, self.y * k)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dot(self, other: Point) -> f64 {
        self.x * other.x + self.y * other.y
    }
}

impl From<[f64; 2]> for Point {
    fn from(v: [f64; 2]) -> Self {
        Point::new(v[0], v[1])
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// Unit vector for direction index `d` (angle `60° * d`).
pub fn direction_vector(d: usize) -> Point {
    let a = (d % 6) as f64 * std::f64::consts::FRAC_PI_3;
    Point::new(a.cos(), a.sin())
}

/// On-disk map description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapSpec {
    pub radius: i32,
    pub pitch: f64,
    pub entry: HexCoord,
    pub goal: HexCoord,
    #[serde(default)]
    pub occluded: Vec<HexCoord>,
}

/// Arena geometry with precomputed cell indexing.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "MapSpec", into = "MapSpec")]
pub struct ArenaMap {
    radius: i32,
    pitch: f64,
    entry: HexCoord,
    goal: HexCoord,
    occluded: BTreeSet<HexCoord>,
    cells: Vec<HexCoord>,
    lookup: Vec<Option<usize>>,
    blocked: Vec<bool>,
}

impl PartialEq for ArenaMap {
    fn eq(&self, other: &Self) -> bool {
        self.radius == other.radius
            && self.pitch == other.pitch
            && self.entry == other.entry
            && self.goal == other.goal
            && self.occluded == other.occluded
    }
}

impl TryFrom<MapSpec> for ArenaMap {
    type Error = Error;

    fn try_from(spec: MapSpec) -> Result<Self> {
        ArenaMap::new(
            spec.radius,
            spec.pitch,
            spec.entry,
            spec.goal,
            spec.occluded,
        )
    }
}

impl From<ArenaMap> for MapSpec {
    fn from(map: ArenaMap) -> Self {
        map.spec()
    }
}

impl ArenaMap {
    pub fn new(
        radius: i32,
        pitch: f64,
        entry: HexCoord,
        goal: HexCoord,
        occluded: impl IntoIterator<Item = HexCoord>,
    ) -> Result<Self> {
        if radius < 1 {
            return Err(Error::InvalidMap(format!(
                "radius must be >= 1, got {radius}"
            )));
        }
        if !(pitch > 0.0) || !pitch.is_finite() {
            return Err(Error::InvalidMap(format!("pitch must be > 0, got {pitch}")));
        }
        let side = (2 * radius + 1) as usize;
        let mut cells = Vec::new();
        let mut lookup = vec![None; side * side];
        for q in -radius..=radius {
            for r in -radius..=radius {
                if (q + r).abs() <= radius {
                    lookup[(q + radius) as usize * side + (r + radius) as usize] =
                        Some(cells.len());
                    cells.push(HexCoord::new(q, r));
                }
            }
        }
        let occluded: BTreeSet<HexCoord> = occluded.into_iter().collect();
        let mut map = ArenaMap {
            radius,
            pitch,
            entry,
            goal,
            occluded: BTreeSet::new(),
            cells,
            lookup,
            blocked: Vec::new(),
        };
        for &c in &occluded {
            if !map.is_valid(c) {
                return Err(Error::InvalidMap(format!(
                    "occluded cell {c} outside arena"
                )));
            }
        }
        for (name, c) in [("entry", entry), ("goal", goal)] {
            if !map.is_valid(c) {
                return Err(Error::InvalidMap(format!("{name} cell {c} outside arena")));
            }
            if occluded.contains(&c) {
                return Err(Error::InvalidMap(format!("{name} cell {c} is occluded")));
            }
        }
        if entry == goal {
            return Err(Error::InvalidMap("entry and goal coincide".into()));
        }
        map.blocked = map.cells.iter().map(|c| occluded.contains(c)).collect();
        map.occluded = occluded;
        Ok(map)
    }

    /// The map shipped with the crate (`maps/default.toml`).
    pub fn default_map() -> Self {
        Self::from_toml(DEFAULT_MAP_TOML).expect("bundled map is valid")
    }

    /// Radius-10 arena without obstacles, default entry and goal.
    pub fn open(radius: i32, pitch: f64) -> Self {
        ArenaMap::new(
            radius,
            pitch,
            HexCoord::new(-radius, 0),
            HexCoord::new(radius, 0),
            [],
        )
        .expect("open map is valid")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: MapSpec = toml::from_str(text)?;
        ArenaMap::try_from(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn spec(&self) -> MapSpec {
        MapSpec {
            radius: self.radius,
            pitch: self.pitch,
            entry: self.entry,
            goal: self.goal,
            occluded: self.occluded.iter().copied().collect(),
        }
    }

    /// Canonical text form. Occluded cells are written one per line.
    pub fn to_toml(&self) -> String {
        let mut out = format!(
            "radius = {}\npitch = {:?}\nentry = [{}, {}]\ngoal = [{}, {}]\noccluded = [\n",
            self.radius, self.pitch, self.entry.q, self.entry.r, self.goal.q, self.goal.r
        );
        for c in &self.occluded {
            out.push_str(&format!("    [{}, {}],\n", c.q, c.r));
        }
        out.push_str("]\n");
        out
    }

    /// Short content hash of the canonical text form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn radius(&self) -> i32 {
        self.radius
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn entry(&self) -> HexCoord {
        self.entry
    }

    pub fn goal(&self) -> HexCoord {
        self.goal
    }

    pub fn occluded(&self) -> &BTreeSet<HexCoord> {
        &self.occluded
    }

    /// All valid cells, ordered by `(q, r)`.
    pub fn cells(&self) -> &[HexCoord] {
        &self.cells
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn open_cells(&self) -> impl Iterator<Item = HexCoord> + '_ {
        self.cells
            .iter()
            .copied()
            .filter(move |c| !self.occluded.contains(c))
    }

    pub fn num_open_cells(&self) -> usize {
        self.cells.len() - self.occluded.len()
    }

    pub fn index_of(&self, c: HexCoord) -> Option<usize> {
        let side = 2 * self.radius + 1;
        let (iq, ir) = (c.q + self.radius, c.r + self.radius);
        if iq < 0 || ir < 0 || iq >= side || ir >= side {
            return None;
        }
        self.lookup[(iq * side + ir) as usize]
    }

    pub fn is_valid(&self, c: HexCoord) -> bool {
        self.index_of(c).is_some()
    }

    pub fn is_open(&self, c: HexCoord) -> bool {
        self.index_of(c).is_some_and(|i| !self.blocked[i])
    }

    pub fn is_open_index(&self, i: usize) -> bool {
        !self.blocked[i]
    }

    pub fn cell_center(&self, c: HexCoord) -> Result<Point> {
        if !self.is_valid(c) {
            return Err(Error::CellOutOfArena(c));
        }
        Ok(self.center(c))
    }

    /// Planar embedding without the validity check.
    pub fn center(&self, c: HexCoord) -> Point {
        let (q, r) = (c.q as f64, c.r as f64);
        Point::new(
            0.5 + self.pitch * (q + r / 2.0),
            0.5 + self.pitch * (SQRT3 / 2.0) * r,
        )
    }

    /// Circumradius of a single cell hexagon.
    pub fn cell_circumradius(&self) -> f64 {
        self.pitch / SQRT3
    }

    /// Corners of a cell hexagon, counter-clockwise from 30°.
    pub fn cell_polygon(&self, c: HexCoord) -> [Point; 6] {
        let center = self.center(c);
        let s = self.cell_circumradius();
        std::array::from_fn(|k| {
            let a = (30.0 + 60.0 * k as f64).to_radians();
            Point::new(center.x + s * a.cos(), center.y + s * a.sin())
        })
    }

    /// Circumradius of the outer wall hexagon.
    pub fn wall_circumradius(&self) -> f64 {
        self.radius as f64 * self.pitch + self.pitch / 2.0
    }

    /// Signed distance from `p` to the outer wall (positive inside).
    pub fn wall_distance(&self, p: Point) -> f64 {
        let apothem = self.wall_circumradius() * SQRT3 / 2.0;
        let rel = p.sub(Point::new(0.5, 0.5));
        let reach = (0..6)
            .map(|k| {
                let a = (30.0 + 60.0 * k as f64).to_radians();
                rel.x * a.cos() + rel.y * a.sin()
            })
            .fold(f64::NEG_INFINITY, f64::max);
        apothem - reach
    }

    /// Inside the outer wall hexagon (boundary included).
    pub fn contains_point(&self, p: Point) -> bool {
        p.x.is_finite() && p.y.is_finite() && self.wall_distance(p) >= -1e-12
    }

    /// Cell whose hexagon contains `p`, falling back to the nearest valid cell
    /// center for points in the sliver between the outer ring and the wall.
    pub fn nearest_cell(&self, p: Point) -> Option<HexCoord> {
        if !p.x.is_finite() || !p.y.is_finite() {
            return None;
        }
        let fr = (p.y - 0.5) / (self.pitch * SQRT3 / 2.0);
        let fq = (p.x - 0.5) / self.pitch - fr / 2.0;
        let c = cube_round(fq, fr);
        if self.is_valid(c) {
            return Some(c);
        }
        self.cells.iter().copied().min_by(|a, b| {
            let da = self.center(*a).dist(p);
            let db = self.center(*b).dist(p);
            da.total_cmp(&db).then(a.cmp(b))
        })
    }

    /// Valid, non-occluded neighbors in direction order.
    pub fn neighbors(&self, c: HexCoord) -> Vec<HexCoord> {
        (0..6)
            .map(|d| c.neighbor(d))
            .filter(|n| self.is_open(*n))
            .collect()
    }

    /// Whether the open segment `a -> b` avoids every occluded hexagon.
    pub fn line_of_sight(&self, a: Point, b: Point) -> bool {
        if a == b {
            return true;
        }
        // canonical endpoint order makes the test exactly symmetric
        let (a, b) = if (a.x, a.y) <= (b.x, b.y) {
            (a, b)
        } else {
            (b, a)
        };
        // tangent contacts (a sight line along shared edges or through a
        // vertex) do not block: the footprint is shrunk by a hair
        let half = self.pitch / 2.0 - GRAZE_TOLERANCE;
        let reach = self.cell_circumradius();
        let d = b.sub(a);
        let len2 = d.dot(d);
        for &c in &self.occluded {
            let center = self.center(c);
            // cheap reject by distance from the hexagon center to the segment
            let t = (center.sub(a).dot(d) / len2).clamp(0.0, 1.0);
            if a.add(d.scale(t)).dist(center) >= reach {
                continue;
            }
            if segment_crosses_hexagon(a, d, center, half) {
                return false;
            }
        }
        true
    }

    /// Open cells whose centers are not visible from `observer`.
    pub fn hidden_cells(&self, observer: Point) -> BTreeSet<HexCoord> {
        self.open_cells()
            .filter(|&c| !self.line_of_sight(observer, self.center(c)))
            .collect()
    }

    /// Shortest path by cell count, both endpoints included; empty when
    /// unreachable. Frontier ties are broken by lexicographic `(q, r)`.
    pub fn astar_path(&self, from: HexCoord, to: HexCoord) -> Vec<HexCoord> {
        let (Some(start), Some(goal)) = (self.index_of(from), self.index_of(to)) else {
            return Vec::new();
        };
        if self.blocked[start] || self.blocked[goal] {
            return Vec::new();
        }
        let n = self.cells.len();
        let mut g = vec![u32::MAX; n];
        let mut parent = vec![usize::MAX; n];
        let mut closed = vec![false; n];
        let mut open = BinaryHeap::new();
        g[start] = 0;
        open.push(Reverse((
            hex_distance(from, to) as u32,
            from.q,
            from.r,
            start,
        )));
        while let Some(Reverse((_, _, _, i))) = open.pop() {
            if closed[i] {
                continue;
            }
            if i == goal {
                let mut path = vec![self.cells[goal]];
                let mut cur = goal;
                while cur != start {
                    cur = parent[cur];
                    path.push(self.cells[cur]);
                }
                path.reverse();
                return path;
            }
            closed[i] = true;
            let c = self.cells[i];
            for nb in self.neighbors(c) {
                let j = self.index_of(nb).expect("neighbor is valid");
                let cand = g[i] + 1;
                if cand < g[j] {
                    g[j] = cand;
                    parent[j] = i;
                    let f = cand + hex_distance(nb, to) as u32;
                    open.push(Reverse((f, nb.q, nb.r, j)));
                }
            }
        }
        Vec::new()
    }
}

/// Strict-interior test of the open segment `a + t d, t in (0, 1)` against a
/// pointy-top hexagon with the given apothem (slab clipping on its three axes).
fn segment_crosses_hexagon(a: Point, d: Point, center: Point, apothem: f64) -> bool {
    let mut lo = 0.0_f64;
    let mut hi = 1.0_f64;
    let rel = a.sub(center);
    for k in 0..3 {
        let n = direction_vector(k);
        let p0 = rel.dot(n);
        let dp = d.dot(n);
        if dp.abs() < 1e-15 {
            if p0.abs() >= apothem {
                return false;
            }
            continue;
        }
        let t1 = (-apothem - p0) / dp;
        let t2 = (apothem - p0) / dp;
        let (t_in, t_out) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        lo = lo.max(t_in);
        hi = hi.min(t_out);
        if lo >= hi {
            return false;
        }
    }
    lo < hi
}

fn cube_round(fq: f64, fr: f64) -> HexCoord {
    let fs = -fq - fr;
    let (mut q, mut r, s) = (fq.round(), fr.round(), fs.round());
    let (dq, dr, ds) = ((q - fq).abs(), (r - fr).abs(), (s - fs).abs());
    if dq > dr && dq > ds {
        q = -r - s;
    } else if dr > ds {
        r = -q - s;
    }
    HexCoord::new(q as i32, r as i32)
}

/// Distance inside an occluder's boundary a sight line must reach to count
/// as blocked.
pub const GRAZE_TOLERANCE: f64 = 1e-9;

/// Precomputed cell-to-cell visibility between open cell centers.
#[derive(Clone, Debug)]
pub struct Visibility {
    words: usize,
    bits: Vec<u64>,
}

impl Visibility {
    pub fn new(map: &ArenaMap, mode: ExecMode) -> Self {
        let n = map.num_cells();
        let words = n.div_ceil(64);
        let rows = exec::map_range(n, mode, |i| {
            let mut row = vec![0u64; words];
            if !map.is_open_index(i) {
                return row;
            }
            let pi = map.center(map.cells()[i]);
            for j in 0..n {
                if !map.is_open_index(j) {
                    continue;
                }
                let pj = map.center(map.cells()[j]);
                if map.line_of_sight(pi, pj) {
                    row[j / 64] |= 1 << (j % 64);
                }
            }
            row
        });
        Self {
            words,
            bits: rows.concat(),
        }
    }

    pub fn visible(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.words + j / 64] >> (j % 64) & 1 == 1
    }

    /// Open cells not visible from open cell `i`, in map order.
    pub fn hidden_from(&self, map: &ArenaMap, i: usize) -> Vec<HexCoord> {
        (0..map.num_cells())
            .filter(|&j| map.is_open_index(j) && !self.visible(i, j))
            .map(|j| map.cells()[j])
            .collect()
    }
}

/// Random obstacle layout: `clusters` blobs of 1-4 cells kept away from the
/// entry and goal, rejected until the goal is reachable from the entry, every
/// open cell is connected, and the entry has hidden cells to spawn into.
pub fn generate_map(seed: u64, clusters: usize, radius: i32, pitch: f64) -> ArenaMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entry = HexCoord::new(-radius, 0);
    let goal = HexCoord::new(radius, 0);
    let base = ArenaMap::open(radius, pitch);
    let candidates: Vec<HexCoord> = base
        .cells()
        .iter()
        .copied()
        .filter(|c| hex_distance(*c, entry) > 3 && hex_distance(*c, goal) > 3 && c.ring() < radius)
        .collect();
    loop {
        let mut occluded = BTreeSet::new();
        for _ in 0..clusters {
            let center = *candidates
                .choose(&mut rng)
                .expect("arena has interior cells");
            occluded.insert(center);
            let extra = rng.gen_range(0..=3);
            let mut dirs: Vec<usize> = (0..6).collect();
            dirs.shuffle(&mut rng);
            for &d in dirs.iter().take(extra) {
                let nb = center.neighbor(d);
                if base.is_valid(nb) && hex_distance(nb, entry) > 2 && hex_distance(nb, goal) > 2 {
                    occluded.insert(nb);
                }
            }
        }
        let map =
            ArenaMap::new(radius, pitch, entry, goal, occluded).expect("generated map is valid");
        if map.astar_path(entry, goal).is_empty() {
            continue;
        }
        if reachable_count(&map, entry) != map.num_open_cells() {
            continue;
        }
        if map.hidden_cells(map.center(entry)).is_empty() {
            continue;
        }
        return map;
    }
}

fn reachable_count(map: &ArenaMap, from: HexCoord) -> usize {
    let mut seen = BTreeSet::from([from]);
    let mut stack = vec![from];
    while let Some(c) = stack.pop() {
        for nb in map.neighbors(c) {
            if seen.insert(nb) {
                stack.push(nb);
            }
        }
    }
    seen.len()
}
