//! Synthetic worlds, episodes, instructions and dataset files.
//!
//! Worlds are grids of rooms joined by doorways (or fully open walls). An
//! episode's pano waypoints are random points in a sequence of distinct
//! rooms; its divergence (how far the reference path strays from the
//! start-goal shortest path) is controlled by rejection sampling into a
//! requested band. Instructions are symbolic token sequences segmented into
//! sub-instructions, each aligned with a span of pano waypoints.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::Trajectory;
use crate::refpath::{densify_to_steps, path_divergence, PathKind, WaypointPath};
use crate::worldsim::{shortest_path, wrap_angle, GridMap, Point, Pose, Region, TURN_ANGLE};

pub const SCHEMA_VERSION: u32 = 1;
/// Number of distinct landmark ids.
pub const N_LANDMARKS: u16 = 8;
/// Heading change (radians) that starts a new sub-instruction.
pub const TURN_SPLIT: f64 = std::f64::consts::FRAC_PI_4;
const MAX_RETRIES: usize = 200;

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("no episode with divergence in [{lo}, {hi}) after {tries} attempts")]
    BandUnachievable { lo: f64, hi: f64, tries: usize },
    #[error("world generation failed: {0}")]
    World(String),
    #[error("invalid generator parameters: {0}")]
    InvalidParams(String),
    #[error("{path}:{line}: {msg}")]
    Malformed {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("{path}:{line}: schema version {found}, expected {expected}")]
    SchemaMismatch {
        path: String,
        line: usize,
        found: u32,
        expected: u32,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EpisodeError + '_ {
    move |source| EpisodeError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Instruction token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Token {
    GoForward,
    TurnLeft,
    TurnRight,
    PassLandmark(u16),
    StopAt(u16),
    Stop,
}

impl Token {
    pub const VOCAB_SIZE: usize = 4 + 2 * N_LANDMARKS as usize;

    /// Dense id in `0..VOCAB_SIZE`.
    pub fn id(&self) -> usize {
        match *self {
            Token::GoForward => 0,
            Token::TurnLeft => 1,
            Token::TurnRight => 2,
            Token::Stop => 3,
            Token::PassLandmark(k) => 4 + k as usize,
            Token::StopAt(k) => 4 + N_LANDMARKS as usize + k as usize,
        }
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::GoForward => write!(f, "GO_FORWARD"),
            Token::TurnLeft => write!(f, "TURN_LEFT"),
            Token::TurnRight => write!(f, "TURN_RIGHT"),
            Token::PassLandmark(k) => write!(f, "PASS_LANDMARK({k})"),
            Token::StopAt(k) => write!(f, "STOP_AT({k})"),
            Token::Stop => write!(f, "STOP"),
        }
    }
}

impl FromStr for Token {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let arg = |prefix: &str| -> Option<Result<u16, String>> {
            let inner = s.strip_prefix(prefix)?.strip_suffix(')')?;
            Some(match inner.parse::<u16>() {
                Ok(k) if k < N_LANDMARKS => Ok(k),
                _ => Err(format!("bad landmark id in {s}")),
            })
        };
        match s {
            "GO_FORWARD" => Ok(Token::GoForward),
            "TURN_LEFT" => Ok(Token::TurnLeft),
            "TURN_RIGHT" => Ok(Token::TurnRight),
            "STOP" => Ok(Token::Stop),
            _ => {
                if let Some(k) = arg("PASS_LANDMARK(") {
                    Ok(Token::PassLandmark(k?))
                } else if let Some(k) = arg("STOP_AT(") {
                    Ok(Token::StopAt(k?))
                } else {
                    Err(format!("unknown token {s:?}"))
                }
            }
        }
    }
}

impl Serialize for Token {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Token {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

/// A contiguous instruction segment and the pano waypoints it describes.
/// `tokens` is a half-open range, `panos` an inclusive one.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubInstruction {
    pub tokens: [usize; 2],
    pub panos: [usize; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    ValSeen,
    ValUnseen,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::ValSeen => "val_seen",
            Split::ValUnseen => "val_unseen",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Episode {
    pub id: String,
    pub map_id: String,
    pub split: Split,
    pub start: Pose,
    pub goal: Point,
    pub pano_path: WaypointPath,
    pub instruction: Vec<Token>,
    pub sub_instructions: Vec<SubInstruction>,
    pub divergence: f64,
}

impl Episode {
    /// Names of violated episode invariants (empty when consistent).
    pub fn invariant_violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let m = self.pano_path.len();
        if self.pano_path.first() != self.start.position() {
            v.push("pano path does not start at the start pose".into());
        }
        if self.pano_path.last() != self.goal {
            v.push("pano path does not end at the goal".into());
        }
        let mut next_tok = 0;
        let mut next_pano = 0;
        for (i, s) in self.sub_instructions.iter().enumerate() {
            if s.tokens[0] != next_tok || s.tokens[1] <= s.tokens[0] {
                v.push(format!("sub-instruction {i}: token span not contiguous"));
            }
            if s.panos[0] != next_pano || s.panos[1] < s.panos[0] {
                v.push(format!("sub-instruction {i}: pano span not contiguous"));
            }
            next_tok = s.tokens[1];
            next_pano = s.panos[1];
        }
        if next_tok != self.instruction.len() {
            v.push("sub-instructions do not cover the instruction".into());
        }
        if next_pano + 1 != m {
            v.push("sub-instructions do not cover the pano path".into());
        }
        if !(self.divergence > 0.0 && self.divergence <= 1.0) {
            v.push("divergence outside (0, 1]".into());
        }
        v
    }
}

/// A divergence band `[lo, hi)` (closed at 1) and its share of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Band {
    pub lo: f64,
    pub hi: f64,
    pub fraction: f64,
}

impl Band {
    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && (v < self.hi || (self.hi >= 1.0 && v <= 1.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorParams {
    pub seed: u64,
    pub rooms_x: usize,
    pub rooms_y: usize,
    /// Room interior side length in meters.
    pub room_size: f64,
    pub wall_thickness: f64,
    pub door_width: f64,
    pub resolution: f64,
    /// Probability that a wall between two neighboring rooms is kept.
    pub wall_density: f64,
    pub pano_min: usize,
    pub pano_max: usize,
    pub max_path_length: f64,
    /// Walk anchors are drawn this far (per axis) around room centers.
    pub anchor_jitter: f64,
    /// Start facing along the reference path instead of a random heading.
    pub face_first_leg: bool,
    pub mixture: Vec<Band>,
    pub seen_maps: usize,
    pub unseen_maps: usize,
    pub train_episodes: usize,
    pub val_seen_episodes: usize,
    pub val_unseen_episodes: usize,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            seed: 0,
            rooms_x: 4,
            rooms_y: 4,
            room_size: 2.4,
            wall_thickness: 0.2,
            door_width: 1.0,
            resolution: 0.1,
            wall_density: 0.7,
            pano_min: 4,
            pano_max: 8,
            max_path_length: 30.0,
            anchor_jitter: 0.3,
            face_first_leg: true,
            mixture: vec![
                Band {
                    lo: 0.0,
                    hi: 0.8,
                    fraction: 0.4,
                },
                Band {
                    lo: 0.8,
                    hi: 1.0,
                    fraction: 0.6,
                },
            ],
            seen_maps: 10,
            unseen_maps: 4,
            train_episodes: 500,
            val_seen_episodes: 0,
            val_unseen_episodes: 100,
        }
    }
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<(), EpisodeError> {
        let bad = |m: &str| Err(EpisodeError::InvalidParams(m.to_string()));
        if self.rooms_x == 0 || self.rooms_y == 0 || self.rooms_x * self.rooms_y < 2 {
            return bad("need at least two rooms");
        }
        if !(self.resolution > 0.0) || !(self.room_size >= 1.0) || !(self.wall_thickness > 0.0) {
            return bad("sizes must be positive (rooms at least 1 m)");
        }
        if !(self.door_width > 0.0 && self.door_width < self.room_size) {
            return bad("door width must be in (0, room_size)");
        }
        if !(0.0..=1.0).contains(&self.wall_density) {
            return bad("wall_density must be in [0, 1]");
        }
        if self.pano_min < 2 || self.pano_max < self.pano_min {
            return bad("pano count range must satisfy 2 <= min <= max");
        }
        if !(self.anchor_jitter >= 0.0) {
            return bad("anchor_jitter must be non-negative");
        }
        if self.mixture.is_empty() {
            return bad("mixture is empty");
        }
        let total: f64 = self.mixture.iter().map(|b| b.fraction).sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad("mixture fractions must sum to 1");
        }
        for b in &self.mixture {
            if !(b.lo >= 0.0 && b.lo < b.hi && b.hi <= 1.0 && b.fraction >= 0.0) {
                return bad("bands must satisfy 0 <= lo < hi <= 1");
            }
        }
        if self.seen_maps == 0 && self.train_episodes + self.val_seen_episodes > 0 {
            return bad("seen splits need at least one seen map");
        }
        if self.unseen_maps == 0 && self.val_unseen_episodes > 0 {
            return bad("val_unseen needs at least one unseen map");
        }
        Ok(())
    }
}

fn cells(meters: f64, res: f64) -> usize {
    (meters / res).round().max(1.0) as usize
}

/// Seeded room-grid world. Neighboring rooms share a wall strip that is kept
/// with probability `wall_density`; walls on a random spanning tree of the
/// room graph get a doorway, other kept walls are solid, and dropped walls are
/// removed entirely, so every room is reachable.
pub fn generate_world(params: &GeneratorParams, seed: u64) -> Result<GridMap, EpisodeError> {
    params.validate()?;
    let res = params.resolution;
    let room = cells(params.room_size, res);
    let wall = cells(params.wall_thickness, res);
    let door = cells(params.door_width, res).min(room);
    let (nx, ny) = (params.rooms_x, params.rooms_y);
    // Outer walls are the one-cell map border.
    let width = nx * (room + wall) - wall + 2;
    let height = ny * (room + wall) - wall + 2;
    let mut map = GridMap::new(width, height, res, vec![true; width * height])
        .map_err(|e| EpisodeError::World(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let origin = |i: usize| 1 + i * (room + wall);

    let mut regions = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (c0, r0) = (origin(i), origin(j));
            map.fill_rect(c0, r0, c0 + room, r0 + room, false);
            regions.push(Region {
                col0: c0,
                row0: r0,
                col1: c0 + room,
                row1: r0 + room,
                landmark: Some(rng.gen_range(0..N_LANDMARKS)),
            });
        }
    }

    // Edges between neighboring rooms: (a, b, horizontal neighbor?).
    let mut edges = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            let a = j * nx + i;
            if i + 1 < nx {
                edges.push((a, a + 1, true));
            }
            if j + 1 < ny {
                edges.push((a, a + nx, false));
            }
        }
    }
    // Random spanning tree by randomized Kruskal.
    let mut order: Vec<usize> = (0..edges.len()).collect();
    order.shuffle(&mut rng);
    let mut parent: Vec<usize> = (0..nx * ny).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        let mut y = x;
        while p[y] != r {
            let next = p[y];
            p[y] = r;
            y = next;
        }
        r
    }
    let mut in_tree = vec![false; edges.len()];
    for &e in &order {
        let (a, b, _) = edges[e];
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra] = rb;
            in_tree[e] = true;
        }
    }

    // Open strips, keyed by the wall-intersection they touch.
    let mut open_h = vec![false; edges.len()];
    for (e, &(a, _, horizontal)) in edges.iter().enumerate() {
        let (i, j) = (a % nx, a / nx);
        let keep = rng.gen::<f64>() < params.wall_density;
        let along0 = if horizontal { origin(j) } else { origin(i) };
        let across0 = if horizontal {
            origin(i) + room
        } else {
            origin(j) + room
        };
        let carve = |map: &mut GridMap, s0: usize, s1: usize| {
            if horizontal {
                map.fill_rect(across0, along0 + s0, across0 + wall, along0 + s1, false);
            } else {
                map.fill_rect(along0 + s0, across0, along0 + s1, across0 + wall, false);
            }
        };
        if !keep {
            carve(&mut map, 0, room);
            open_h[e] = true;
        } else if in_tree[e] {
            let margin = 2.min((room - door) / 2);
            let off = rng.gen_range(margin..=room - door - margin);
            carve(&mut map, off, off + door);
        }
    }
    // Clear wall intersections surrounded by fully open strips.
    for j in 0..ny.saturating_sub(1) {
        for i in 0..nx.saturating_sub(1) {
            let a = j * nx + i;
            let strip = |x: usize, y: usize, h: bool| {
                edges
                    .iter()
                    .position(|&(ea, eb, eh)| ea == x && eb == y && eh == h)
                    .map(|e| open_h[e])
                    .unwrap_or(false)
            };
            if strip(a, a + 1, true)
                && strip(a + nx, a + nx + 1, true)
                && strip(a, a + nx, false)
                && strip(a + 1, a + nx + 1, false)
            {
                let (c0, r0) = (origin(i) + room, origin(j) + room);
                map.fill_rect(c0, r0, c0 + wall, r0 + wall, false);
            }
        }
    }
    let map = map.with_regions(regions);
    if connected_fraction(&map) < 0.99 {
        return Err(EpisodeError::World("free space is not connected".into()));
    }
    Ok(map)
}

/// Fraction of free cells reachable (8-connected, no corner cutting) from the
/// first free cell.
pub fn connected_fraction(map: &GridMap) -> f64 {
    let Some(start) = (0..map.len()).find(|&i| !map.is_blocked_cell(i)) else {
        return 0.0;
    };
    let field = crate::worldsim::dijkstra_until(map, start, |_, _| true);
    let reached = field.iter().filter(|d| d.is_finite()).count();
    reached as f64 / map.free_cell_count() as f64
}

/// Rooms (region indices) that share an opened wall strip.
fn room_adjacency(map: &GridMap) -> Vec<Vec<usize>> {
    let regions = map.regions();
    let mut adj = vec![Vec::new(); regions.len()];
    for (a, ra) in regions.iter().enumerate() {
        for (b, rb) in regions.iter().enumerate().skip(a + 1) {
            let (c0, c1, r0, r1);
            if ra.row0 == rb.row0 && ra.row1 == rb.row1 && ra.col1 < rb.col0 {
                (c0, c1, r0, r1) = (ra.col1, rb.col0, ra.row0, ra.row1);
            } else if ra.col0 == rb.col0 && ra.col1 == rb.col1 && ra.row1 < rb.row0 {
                (c0, c1, r0, r1) = (ra.col0, ra.col1, ra.row1, rb.row0);
            } else {
                continue;
            }
            if c1 - c0 > 4 && r1 - r0 > 4 {
                continue;
            }
            let open = (r0..r1).any(|r| (c0..c1).all(|c| !map.is_blocked_cell(map.index(c, r))))
                || (c0..c1).any(|c| (r0..r1).all(|r| !map.is_blocked_cell(map.index(c, r))));
            if open && (c1 - c0 <= 4 || r1 - r0 <= 4) {
                adj[a].push(b);
                adj[b].push(a);
            }
        }
    }
    adj
}

fn random_point_in(
    map: &GridMap,
    region: &Region,
    margin: f64,
    rng: &mut ChaCha8Rng,
) -> Option<Point> {
    let res = map.resolution();
    let (x0, x1) = (
        (region.col0 as f64 - 0.5) * res + margin,
        (region.col1 as f64 - 0.5) * res - margin,
    );
    let (y0, y1) = (
        (region.row0 as f64 - 0.5) * res + margin,
        (region.row1 as f64 - 0.5) * res - margin,
    );
    if x0 >= x1 || y0 >= y1 {
        return None;
    }
    for _ in 0..20 {
        let p = Point::new(rng.gen_range(x0..x1), rng.gen_range(y0..y1));
        if map.is_free(&p) {
            return Some(p);
        }
    }
    None
}

fn jittered_center(
    map: &GridMap,
    region: &Region,
    jitter: f64,
    rng: &mut ChaCha8Rng,
) -> Option<Point> {
    let c = region.center(map.resolution());
    for _ in 0..20 {
        let dx = if jitter > 0.0 {
            rng.gen_range(-jitter..=jitter)
        } else {
            0.0
        };
        let dy = if jitter > 0.0 {
            rng.gen_range(-jitter..=jitter)
        } else {
            0.0
        };
        let p = Point::new(c.x + dx, c.y + dy);
        if map
            .region_index_at(&p)
            .is_some_and(|i| &map.regions()[i] == region)
            && map.is_free(&p)
        {
            return Some(p);
        }
    }
    None
}

/// Pano anchors from a self-avoiding random walk over `n` rooms.
fn propose_walk(
    map: &GridMap,
    adj: &[Vec<usize>],
    n: usize,
    jitter: f64,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<Point>> {
    let regions = map.regions();
    let mut rooms = vec![rng.gen_range(0..regions.len())];
    while rooms.len() < n {
        let cur = *rooms.last().unwrap();
        let options: Vec<usize> = adj[cur]
            .iter()
            .copied()
            .filter(|r| !rooms.contains(r))
            .collect();
        rooms.push(*options.choose(rng)?);
    }
    rooms
        .iter()
        .map(|&r| jittered_center(map, &regions[r], jitter, rng))
        .collect()
}

/// Pano anchors spread along the start-goal shortest path with small jitter.
fn propose_direct(map: &GridMap, n: usize, rng: &mut ChaCha8Rng) -> Option<Vec<Point>> {
    let regions = map.regions();
    let a = rng.gen_range(0..regions.len());
    let b = rng.gen_range(0..regions.len());
    if a == b {
        return None;
    }
    let start = random_point_in(map, &regions[a], 0.4, rng)?;
    let goal = random_point_in(map, &regions[b], 0.4, rng)?;
    let path = shortest_path(map, &start, &goal).ok()?;
    let mut cum = vec![0.0];
    for w in path.windows(2) {
        cum.push(cum.last().unwrap() + w[0].distance(&w[1]));
    }
    let total = *cum.last().unwrap();
    let mut pts = vec![start];
    for i in 1..n - 1 {
        let s = total * i as f64 / (n - 1) as f64;
        let seg = cum
            .partition_point(|&c| c <= s)
            .saturating_sub(1)
            .min(path.len() - 2);
        let len = cum[seg + 1] - cum[seg];
        let t = if len > 0.0 { (s - cum[seg]) / len } else { 0.0 };
        let base = path[seg].lerp(&path[seg + 1], t);
        let jittered = Point::new(
            base.x + rng.gen_range(-0.2..0.2),
            base.y + rng.gen_range(-0.2..0.2),
        );
        pts.push(if map.is_free(&jittered) {
            jittered
        } else {
            base
        });
    }
    pts.push(goal);
    Some(pts)
}

/// Samples an episode whose divergence lies in `band` (rejection sampling,
/// at most 200 attempts). The start heading (random, or facing along the
/// path) is snapped to the turn lattice so the agent can hold the 45-degree
/// grid directions exactly.
pub fn generate_episode(
    map: &GridMap,
    params: &GeneratorParams,
    seed: u64,
    band: &Band,
) -> Result<Episode, EpisodeError> {
    let adj = room_adjacency(map);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for attempt in 0..MAX_RETRIES {
        let n = rng.gen_range(params.pano_min..=params.pano_max);
        let proposal = if attempt % 2 == 0 && band.hi >= 0.9 {
            propose_direct(map, n, &mut rng)
        } else {
            propose_walk(map, &adj, n, params.anchor_jitter, &mut rng)
        };
        let Some(points) = proposal else { continue };
        let Ok(pano) = WaypointPath::new(points, PathKind::Pano) else {
            continue;
        };
        let Ok(step) = densify_to_steps(map, &pano) else {
            continue;
        };
        if step.polyline_length() > params.max_path_length {
            continue;
        }
        let Ok(divergence) = path_divergence(map, &pano) else {
            continue;
        };
        if !band.contains(divergence) {
            continue;
        }
        let random_heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let first = pano.first();
        let heading = if params.face_first_leg {
            let ahead = step.points[2.min(step.len() - 1)];
            first.bearing_to(&ahead)
        } else {
            random_heading
        };
        let heading = wrap_angle((heading / TURN_ANGLE).round() * TURN_ANGLE);
        let (instruction, sub_instructions) = generate_instruction(map, &pano);
        return Ok(Episode {
            id: String::new(),
            map_id: String::new(),
            split: Split::Train,
            start: Pose::new(first.x, first.y, heading),
            goal: pano.last(),
            pano_path: pano,
            instruction,
            sub_instructions,
            divergence,
        });
    }
    Err(EpisodeError::BandUnachievable {
        lo: band.lo,
        hi: band.hi,
        tries: MAX_RETRIES,
    })
}

/// Tokens and sub-instruction spans for a pano path.
///
/// Legs between consecutive pano points are grouped into maximal runs without
/// a heading change of 45 degrees or more. Each run becomes
/// `[TURN_LEFT|TURN_RIGHT] GO_FORWARD [PASS_LANDMARK(id)]`, where the turn
/// token describes the change entering the run and the landmark is the one at
/// the run's end. A final `STOP_AT(id)` (or `STOP`) group covers the goal.
pub fn generate_instruction(
    map: &GridMap,
    pano: &WaypointPath,
) -> (Vec<Token>, Vec<SubInstruction>) {
    let pts = &pano.points;
    let m = pts.len();
    let headings: Vec<f64> = pts.windows(2).map(|w| w[0].bearing_to(&w[1])).collect();
    // Run boundaries at pano indices, with the turn entering each run.
    let mut runs: Vec<(usize, usize, Option<Token>)> = Vec::new();
    let mut run_start = 0;
    let mut entering = None;
    for i in 1..headings.len() {
        let turn = wrap_angle(headings[i] - headings[i - 1]);
        if turn.abs() >= TURN_SPLIT {
            runs.push((run_start, i, entering));
            run_start = i;
            entering = Some(if turn > 0.0 {
                Token::TurnLeft
            } else {
                Token::TurnRight
            });
        }
    }
    runs.push((run_start, m - 1, entering));

    let mut tokens = Vec::new();
    let mut subs = Vec::new();
    for &(p0, p1, turn) in &runs {
        let t0 = tokens.len();
        tokens.extend(turn);
        tokens.push(Token::GoForward);
        if p1 < m - 1 {
            if let Some(k) = map.landmark_at(&pts[p1]) {
                tokens.push(Token::PassLandmark(k));
            }
        }
        subs.push(SubInstruction {
            tokens: [t0, tokens.len()],
            panos: [p0, p1],
        });
    }
    let t0 = tokens.len();
    tokens.push(match map.landmark_at(&pts[m - 1]) {
        Some(k) => Token::StopAt(k),
        None => Token::Stop,
    });
    subs.push(SubInstruction {
        tokens: [t0, tokens.len()],
        panos: [m - 1, m - 1],
    });
    (tokens, subs)
}

/// Splits `n` items over bands by largest remainder.
pub fn band_quotas(mixture: &[Band], n: usize) -> Vec<usize> {
    let raw: Vec<f64> = mixture.iter().map(|b| b.fraction * n as f64).collect();
    let mut quotas: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut left = n - quotas.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (raw[a] - raw[a].floor(), raw[b] - raw[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        quotas[i] += 1;
        left -= 1;
    }
    quotas
}

fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from(index) * 4);
    rng.gen()
}

/// Maps keyed by id plus episodes in file order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    pub maps: BTreeMap<String, GridMap>,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn map_of(&self, episode: &Episode) -> &GridMap {
        &self.maps[&episode.map_id]
    }

    pub fn split(&self, split: Split) -> Vec<&Episode> {
        self.episodes.iter().filter(|e| e.split == split).collect()
    }

    /// A dataset holding only the episodes of `split` (and their maps).
    pub fn subset(&self, split: Split) -> Dataset {
        let episodes: Vec<Episode> = self
            .episodes
            .iter()
            .filter(|e| e.split == split)
            .cloned()
            .collect();
        let maps = self
            .maps
            .iter()
            .filter(|(id, _)| episodes.iter().any(|e| &e.map_id == *id))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Dataset { maps, episodes }
    }
}

/// Generates seen and unseen worlds and the three splits. Train and
/// val-seen episodes use seen maps; val-unseen episodes use held-out maps.
pub fn generate_dataset(params: &GeneratorParams) -> Result<Dataset, EpisodeError> {
    params.validate()?;
    let n_maps = params.seen_maps + params.unseen_maps;
    let worlds: Vec<GridMap> = (0..n_maps)
        .into_par_iter()
        .map(|i| generate_world(params, derive_seed(params.seed, 1, i as u64)))
        .collect::<Result<_, _>>()?;
    let map_id = |i: usize| {
        if i < params.seen_maps {
            format!("seen-{i:03}")
        } else {
            format!("unseen-{:03}", i - params.seen_maps)
        }
    };
    let mut jobs: Vec<(Split, usize, usize, Band)> = Vec::new();
    for (s_idx, (split, n)) in [
        (Split::Train, params.train_episodes),
        (Split::ValSeen, params.val_seen_episodes),
        (Split::ValUnseen, params.val_unseen_episodes),
    ]
    .into_iter()
    .enumerate()
    {
        let quotas = band_quotas(&params.mixture, n);
        let mut bands: Vec<Band> = quotas
            .iter()
            .zip(&params.mixture)
            .flat_map(|(&q, b)| std::iter::repeat_n(*b, q))
            .collect();
        bands.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            params.seed,
            2,
            s_idx as u64,
        )));
        let (first_map, count) = match split {
            Split::ValUnseen => (params.seen_maps, params.unseen_maps),
            _ => (0, params.seen_maps),
        };
        for (i, band) in bands.into_iter().enumerate() {
            jobs.push((split, i, first_map + i % count, band));
        }
    }
    let episodes: Vec<Episode> = jobs
        .par_iter()
        .map(|&(split, i, m, band)| {
            let stream = 10 + split as u64;
            let mut last_err = None;
            // A band that is unreachable on one map may be reachable on
            // another; the band itself is never relaxed.
            for retry in 0..n_maps.min(5) as u64 {
                let map_idx = if retry == 0 {
                    m
                } else {
                    let (first, count) = match split {
                        Split::ValUnseen => (params.seen_maps, params.unseen_maps),
                        _ => (0, params.seen_maps),
                    };
                    first + (m - first + retry as usize) % count
                };
                let seed = derive_seed(params.seed, stream, (i as u64) << 8 | retry);
                match generate_episode(&worlds[map_idx], params, seed, &band) {
                    Ok(mut ep) => {
                        ep.id = format!("{split}-{i:05}");
                        ep.map_id = map_id(map_idx);
                        ep.split = split;
                        return Ok(ep);
                    }
                    Err(e) => last_err = Some(e),
                }
            }
            Err(last_err.expect("at least one attempt"))
        })
        .collect::<Result<_, _>>()?;
    let maps = worlds
        .into_iter()
        .enumerate()
        .map(|(i, w)| (map_id(i), w))
        .collect();
    Ok(Dataset { maps, episodes })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapLine {
    schema_version: u32,
    record: String,
    id: String,
    map: GridMap,
}

#[derive(Serialize)]
struct EpisodeLineOut<'a> {
    schema_version: u32,
    record: &'static str,
    episode: &'a Episode,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeLineIn {
    #[allow(dead_code)]
    schema_version: u32,
    #[allow(dead_code)]
    record: String,
    episode: Episode,
}

/// Writes the dataset as JSONL: one `map` record per world, then one
/// `episode` record per episode. Every line carries `schema_version`.
pub fn save_dataset(path: &Path, data: &Dataset) -> Result<(), EpisodeError> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let to_json = |v: serde_json::Result<String>| v.expect("dataset records serialize");
    for (id, map) in &data.maps {
        let line = to_json(serde_json::to_string(&MapLine {
            schema_version: SCHEMA_VERSION,
            record: "map".into(),
            id: id.clone(),
            map: map.clone(),
        }));
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    for episode in &data.episodes {
        let line = to_json(serde_json::to_string(&EpisodeLineOut {
            schema_version: SCHEMA_VERSION,
            record: "episode",
            episode,
        }));
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn load_dataset(path: &Path) -> Result<Dataset, EpisodeError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let name = path.display().to_string();
    let malformed = |line: usize, msg: String| EpisodeError::Malformed {
        path: name.clone(),
        line,
        msg,
    };
    let mut data = Dataset::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| malformed(n, e.to_string()))?;
        let version = value
            .get("schema_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| malformed(n, "missing schema_version".into()))?;
        if version != u64::from(SCHEMA_VERSION) {
            return Err(EpisodeError::SchemaMismatch {
                path: name.clone(),
                line: n,
                found: version as u32,
                expected: SCHEMA_VERSION,
            });
        }
        match value.get("record").and_then(|v| v.as_str()) {
            Some("map") => {
                let rec: MapLine =
                    serde_json::from_value(value).map_err(|e| malformed(n, e.to_string()))?;
                data.maps.insert(rec.id, rec.map);
            }
            Some("episode") => {
                let rec: EpisodeLineIn =
                    serde_json::from_value(value).map_err(|e| malformed(n, e.to_string()))?;
                if !data.maps.contains_key(&rec.episode.map_id) {
                    return Err(malformed(
                        n,
                        format!("unknown map id {:?}", rec.episode.map_id),
                    ));
                }
                data.episodes.push(rec.episode);
            }
            other => return Err(malformed(n, format!("unknown record kind {other:?}"))),
        }
    }
    Ok(data)
}

/// One line of a trajectory log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryRecord {
    pub episode_id: String,
    pub poses: Vec<Pose>,
    pub actions: Vec<crate::worldsim::ActionType>,
    pub stopped: bool,
}

impl TrajectoryRecord {
    pub fn new(episode_id: &str, traj: &Trajectory) -> Self {
        TrajectoryRecord {
            episode_id: episode_id.to_string(),
            poses: traj.poses.clone(),
            actions: traj.actions.clone(),
            stopped: traj.stopped,
        }
    }

    pub fn trajectory(&self) -> Trajectory {
        Trajectory {
            poses: self.poses.clone(),
            actions: self.actions.clone(),
            stopped: self.stopped,
        }
    }
}

pub fn save_trajectories(path: &Path, records: &[TrajectoryRecord]) -> Result<(), EpisodeError> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("trajectory records serialize");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn load_trajectories(path: &Path) -> Result<Vec<TrajectoryRecord>, EpisodeError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| EpisodeError::Malformed {
                path: path.display().to_string(),
                line: i + 1,
                msg: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

/// Breadth-first room distance, used by tests and diagnostics.
pub fn room_hops(map: &GridMap, from: usize, to: usize) -> Option<usize> {
    let adj = room_adjacency(map);
    let mut dist = vec![usize::MAX; adj.len()];
    let mut queue = VecDeque::from([from]);
    dist[from] = 0;
    while let Some(r) = queue.pop_front() {
        if r == to {
            return Some(dist[r]);
        }
        for &n in &adj[r] {
            if dist[n] == usize::MAX {
                dist[n] = dist[r] + 1;
                queue.push_back(n);
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_params() -> GeneratorParams {
        GeneratorParams {
            seen_maps: 2,
            unseen_maps: 1,
            train_episodes: 12,
            val_seen_episodes: 2,
            val_unseen_episodes: 4,
            ..Default::default()
        }
    }

    #[test]
    fn world_is_deterministic_and_connected() {
        let p = GeneratorParams::default();
        let a = generate_world(&p, 7).unwrap();
        let b = generate_world(&p, 7).unwrap();
        assert_eq!(a.occupancy(), b.occupancy());
        assert_ne!(a.occupancy(), generate_world(&p, 8).unwrap().occupancy());
        assert!(connected_fraction(&a) >= 0.99);
        assert_eq!(a.regions().len(), 16);
    }

    #[test]
    fn zero_wall_density_is_open() {
        let p = GeneratorParams {
            wall_density: 0.0,
            ..Default::default()
        };
        let map = generate_world(&p, 3).unwrap();
        let (w, h) = (map.width(), map.height());
        for r in 1..h - 1 {
            for c in 1..w - 1 {
                assert!(!map.is_blocked_cell(map.index(c, r)), "({c},{r}) blocked");
            }
        }
    }

    #[test]
    fn full_wall_density_is_a_tree_of_doors() {
        let p = GeneratorParams {
            wall_density: 1.0,
            ..Default::default()
        };
        let map = generate_world(&p, 5).unwrap();
        let adj = room_adjacency(&map);
        let edges: usize = adj.iter().map(Vec::len).sum::<usize>() / 2;
        assert_eq!(edges, 15);
        assert!(connected_fraction(&map) >= 0.99);
        assert!(room_hops(&map, 0, 15).is_some());
    }

    #[test]
    fn episodes_land_in_requested_band() {
        let p = GeneratorParams::default();
        let map = generate_world(&p, 11).unwrap();
        for (k, band) in [
            Band {
                lo: 0.95,
                hi: 1.0,
                fraction: 1.0,
            },
            Band {
                lo: 0.3,
                hi: 0.8,
                fraction: 1.0,
            },
        ]
        .iter()
        .enumerate()
        {
            let e = generate_episode(&map, &p, 100 + k as u64, band).unwrap();
            let recheck = path_divergence(&map, &e.pano_path).unwrap();
            assert_eq!(recheck, e.divergence);
            assert!(band.contains(recheck));
            assert!(
                e.invariant_violations().is_empty(),
                "{:?}",
                e.invariant_violations()
            );
            let again = generate_episode(&map, &p, 100 + k as u64, band).unwrap();
            assert_eq!(e, again);
        }
    }

    #[test]
    fn instruction_examples() {
        let map = GridMap::open(100, 100, 0.1);
        let straight = WaypointPath::new(
            vec![
                Point::new(1.0, 1.0),
                Point::new(3.0, 1.0),
                Point::new(5.0, 1.0),
            ],
            PathKind::Pano,
        )
        .unwrap();
        let (t, s) = generate_instruction(&map, &straight);
        assert_eq!(t, vec![Token::GoForward, Token::Stop]);
        assert_eq!(s[0].panos, [0, 2]);
        assert_eq!(s[1].panos, [2, 2]);
        let l_shape = WaypointPath::new(
            vec![
                Point::new(1.0, 1.0),
                Point::new(4.0, 1.0),
                Point::new(4.0, 4.0),
            ],
            PathKind::Pano,
        )
        .unwrap();
        let (t, s) = generate_instruction(&map, &l_shape);
        use Token::*;
        assert_eq!(t, vec![GoForward, TurnLeft, GoForward, Stop]);
        assert_eq!(s.len(), 3);
        assert_eq!(s[1].tokens, [1, 3]);
        assert_eq!(s[1].panos, [1, 2]);
    }

    #[test]
    fn tokens_round_trip_and_ids_are_dense() {
        let mut seen = vec![false; Token::VOCAB_SIZE];
        let mut all = vec![
            Token::GoForward,
            Token::TurnLeft,
            Token::TurnRight,
            Token::Stop,
        ];
        for k in 0..N_LANDMARKS {
            all.push(Token::PassLandmark(k));
            all.push(Token::StopAt(k));
        }
        for t in all {
            let back: Token = t.to_string().parse().unwrap();
            assert_eq!(back, t);
            seen[t.id()] = true;
        }
        assert!(seen.iter().all(|&b| b));
        assert!("PASS_LANDMARK(99)".parse::<Token>().is_err());
    }

    #[test]
    fn quotas_follow_fractions() {
        let mix = [
            Band {
                lo: 0.0,
                hi: 0.8,
                fraction: 0.06,
            },
            Band {
                lo: 0.8,
                hi: 1.0,
                fraction: 0.94,
            },
        ];
        assert_eq!(band_quotas(&mix, 1000), vec![60, 940]);
        assert_eq!(band_quotas(&mix, 10).iter().sum::<usize>(), 10);
    }

    #[test]
    fn dataset_round_trip() {
        let data = generate_dataset(&small_params()).unwrap();
        assert_eq!(data.episodes.len(), 18);
        assert_eq!(data.split(Split::ValUnseen).len(), 4);
        for e in data.split(Split::ValUnseen) {
            assert!(e.map_id.starts_with("unseen"));
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_dataset(&path, &data).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), data);
        let again = generate_dataset(&small_params()).unwrap();
        assert_eq!(again, data);
    }

    #[test]
    fn load_reports_line_of_truncated_record() {
        let data = generate_dataset(&GeneratorParams {
            train_episodes: 3,
            val_unseen_episodes: 0,
            unseen_maps: 0,
            seen_maps: 1,
            ..Default::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_dataset(&path, &data).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let cut = &text[..text.len() - 40];
        std::fs::write(&path, cut).unwrap();
        match load_dataset(&path) {
            Err(EpisodeError::Malformed { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected malformed error, got {other:?}"),
        }
        let bumped = text.replacen("\"schema_version\":1", "\"schema_version\":9", 1);
        std::fs::write(&path, bumped).unwrap();
        assert!(matches!(
            load_dataset(&path),
            Err(EpisodeError::SchemaMismatch { line: 1, .. })
        ));
    }
}
