//! Language-aligned waypoint paths.
//!
//! A reference path starts as a sparse `Pano` waypoint list. [`densify_to_steps`]
//! expands it into `Step` waypoints spaced one agent step apart along the
//! geodesic between consecutive pano points, and [`resample_equidistant`] picks
//! `k` waypoints at equal arc-length intervals for the density ablations.
//! [`nearest_waypoint`] is the geodesically nearest waypoint query used by the
//! language-aligned oracle.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{ndtw, DEFAULT_SUCCESS_DISTANCE};
use crate::worldsim::{dijkstra_until, shortest_path, GridMap, Point, WorldError, STEP_SIZE};

/// Distances closer than this are treated as ties.
pub const TIE_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RefPathError {
    #[error("waypoints are not connected through free space")]
    Disconnected,
    #[error("a waypoint path needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("resampling needs k >= 2, got {0}")]
    InvalidCount(usize),
    #[error("expected a {expected} path, got {found}")]
    WrongKind { expected: PathKind, found: PathKind },
}

impl From<WorldError> for RefPathError {
    fn from(_: WorldError) -> Self {
        RefPathError::Disconnected
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    Pano,
    Step,
    Resampled(usize),
}

impl std::fmt::Display for PathKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PathKind::Pano => write!(f, "pano"),
            PathKind::Step => write!(f, "step"),
            PathKind::Resampled(k) => write!(f, "resampled({k})"),
        }
    }
}

/// Ordered waypoints of a reference path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaypointPath {
    pub points: Vec<Point>,
    pub kind: PathKind,
}

impl WaypointPath {
    pub fn new(points: Vec<Point>, kind: PathKind) -> Result<Self, RefPathError> {
        if points.len() < 2 {
            return Err(RefPathError::TooFewPoints(points.len()));
        }
        Ok(WaypointPath { points, kind })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn first(&self) -> Point {
        self.points[0]
    }

    pub fn last(&self) -> Point {
        *self.points.last().expect("non-empty path")
    }

    /// Length of the polyline through the waypoints.
    pub fn polyline_length(&self) -> f64 {
        crate::worldsim::path_length(&self.points)
    }
}

/// Per-rollout progress along a waypoint path.
///
/// `last_reached` is the highest waypoint index the agent has come within the
/// advance radius of; the nearest-waypoint query never looks below it.
/// `last_target` is the highest index the oracle has steered toward, which
/// keeps oracle targets monotone within an episode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ProgressState {
    pub last_reached: usize,
    pub last_target: usize,
}

fn cumulative_lengths(points: &[Point]) -> Vec<f64> {
    let mut cum = Vec::with_capacity(points.len());
    let mut acc = 0.0;
    cum.push(0.0);
    for w in points.windows(2) {
        acc += w[0].distance(&w[1]);
        cum.push(acc);
    }
    cum
}

/// Point at arc length `s` along `points` (clamped to the ends). Also returns
/// the index of the segment it lies on.
fn point_at_arc(points: &[Point], cum: &[f64], s: f64) -> (Point, usize) {
    if s <= 0.0 {
        return (points[0], 0);
    }
    let total = *cum.last().unwrap();
    if s >= total {
        return (*points.last().unwrap(), points.len().saturating_sub(2));
    }
    // First segment whose end is past s.
    let seg = cum
        .partition_point(|&c| c <= s)
        .saturating_sub(1)
        .min(points.len() - 2);
    let len = cum[seg + 1] - cum[seg];
    let t = if len > 0.0 { (s - cum[seg]) / len } else { 0.0 };
    (points[seg].lerp(&points[seg + 1], t), seg)
}

/// Expands a pano path into step waypoints: for each leg the geodesic polyline
/// is sampled every 0.25 m of arc length, and every pano point is kept.
pub fn densify_to_steps(map: &GridMap, pano: &WaypointPath) -> Result<WaypointPath, RefPathError> {
    if pano.kind != PathKind::Pano {
        return Err(RefPathError::WrongKind {
            expected: PathKind::Pano,
            found: pano.kind,
        });
    }
    let mut out = vec![pano.points[0]];
    for leg in pano.points.windows(2) {
        if leg[0] == leg[1] {
            continue;
        }
        let route = shortest_path(map, &leg[0], &leg[1])?;
        let cum = cumulative_lengths(&route);
        let total = *cum.last().unwrap();
        let mut k = 1;
        loop {
            let s = k as f64 * STEP_SIZE;
            if s >= total - 1e-9 {
                break;
            }
            out.push(point_at_arc(&route, &cum, s).0);
            k += 1;
        }
        out.push(leg[1]);
    }
    if out.len() < 2 {
        // Degenerate pano path with all points identical.
        out.push(out[0]);
    }
    WaypointPath::new(out, PathKind::Step)
}

/// `k` waypoints at arc lengths `i * L / (k - 1)` along the step polyline.
/// A sample that falls inside a blocked cell (a chord clipping a corner) is
/// replaced by the nearer of its two bracketing step points.
pub fn resample_equidistant(
    map: &GridMap,
    step: &WaypointPath,
    k: usize,
) -> Result<WaypointPath, RefPathError> {
    if step.kind != PathKind::Step {
        return Err(RefPathError::WrongKind {
            expected: PathKind::Step,
            found: step.kind,
        });
    }
    if k < 2 {
        return Err(RefPathError::InvalidCount(k));
    }
    let cum = cumulative_lengths(&step.points);
    let total = *cum.last().unwrap();
    let mut points = Vec::with_capacity(k);
    for i in 0..k {
        let p = if i == 0 {
            step.first()
        } else if i == k - 1 {
            step.last()
        } else {
            let s = i as f64 * total / (k - 1) as f64;
            let (p, seg) = point_at_arc(&step.points, &cum, s);
            if map.is_free(&p) {
                p
            } else {
                let (a, b) = (step.points[seg], step.points[seg + 1]);
                if p.distance(&a) <= p.distance(&b) {
                    a
                } else {
                    b
                }
            }
        };
        points.push(p);
    }
    WaypointPath::new(points, PathKind::Resampled(k))
}

/// Index of the waypoint geodesically nearest to `x` among indices
/// `>= progress.last_reached`. Ties (within [`TIE_EPS`]) go to the larger
/// index.
///
/// Runs a Dijkstra search out of `x`'s cell that stops once no unseen waypoint
/// can beat the best candidate, so queries near the path stay local.
pub fn nearest_waypoint(
    x: &Point,
    path: &WaypointPath,
    progress: &ProgressState,
    map: &GridMap,
) -> Result<usize, RefPathError> {
    nearest_in_window(x, &path.points, progress.last_reached, map)
}

pub(crate) fn nearest_in_window(
    x: &Point,
    points: &[Point],
    lo: usize,
    map: &GridMap,
) -> Result<usize, RefPathError> {
    let lo = lo.min(points.len().saturating_sub(1));
    let cx = map.free_cell_of(x).ok_or(RefPathError::Disconnected)?;
    let snap_x = x.distance(&map.cell_center(cx));

    let mut by_cell: HashMap<usize, Vec<usize>> = HashMap::new();
    for (j, w) in points.iter().enumerate().skip(lo) {
        if let Some(c) = map.free_cell_of(w) {
            by_cell.entry(c).or_default().push(j);
        }
    }

    let mut best: Option<(f64, usize)> = None;
    let offer = |best: &mut Option<(f64, usize)>, d: f64, j: usize| match *best {
        None => *best = Some((d, j)),
        Some((bd, bj)) => {
            if d < bd - TIE_EPS || (d <= bd + TIE_EPS && j > bj) {
                *best = Some((d, j));
            }
        }
    };

    if let Some(js) = by_cell.get(&cx) {
        for &j in js {
            offer(&mut best, x.distance(&points[j]), j);
        }
    }
    let mut remaining = by_cell.len() - usize::from(by_cell.contains_key(&cx));
    if remaining > 0 {
        dijkstra_until(map, cx, |cell, g| {
            if let Some((bd, _)) = best {
                if snap_x + g > bd + TIE_EPS {
                    return false;
                }
            }
            if cell != cx {
                if let Some(js) = by_cell.get(&cell) {
                    let center = map.cell_center(cell);
                    for &j in js {
                        offer(&mut best, snap_x + g + points[j].distance(&center), j);
                    }
                    remaining -= 1;
                    if remaining == 0 {
                        return false;
                    }
                }
            }
            true
        });
    }
    best.map(|(_, j)| j).ok_or(RefPathError::Disconnected)
}

/// nDTW between the start-goal shortest path and the step reference path,
/// both sampled at one agent step. 1.0 means the reference path is the
/// shortest path; low values mean the instruction describes a detour.
pub fn path_divergence(map: &GridMap, pano: &WaypointPath) -> Result<f64, RefPathError> {
    let step = densify_to_steps(map, pano)?;
    let direct = WaypointPath::new(vec![pano.first(), pano.last()], PathKind::Pano)?;
    let shortest = densify_to_steps(map, &direct)?;
    Ok(ndtw(
        &shortest.points,
        &step.points,
        DEFAULT_SUCCESS_DISTANCE,
    ))
}
