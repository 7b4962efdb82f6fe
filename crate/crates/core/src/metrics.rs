//! Navigation and instruction-following metrics.
//!
//! Standard episode metrics (TL, NE, SR, OS, SPL), trajectory alignment (nDTW,
//! SDTW) and Waypoint Accuracy (WA): the fraction of reference waypoints the
//! agent passes within a geodesic threshold. [`bin_by_divergence`] groups
//! per-episode results by how far the reference path strays from the
//! shortest path.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episodes::Episode;
use crate::refpath::{densify_to_steps, RefPathError, WaypointPath};
use crate::worldsim::{dijkstra_until, ActionType, GeodesicField, GridMap, Point, Pose};

/// Success radius in meters; also the nDTW normalization distance.
pub const DEFAULT_SUCCESS_DISTANCE: f64 = 3.0;
/// Default bin edges for divergence-binned analysis.
pub const DEFAULT_BIN_EDGES: [f64; 6] = [0.0, 0.5, 0.7, 0.8, 0.9, 1.0];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("goal is not reachable from the trajectory")]
    Disconnected,
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("bin edges must be strictly increasing and cover (0, 1]: {0:?}")]
    InvalidEdges(Vec<f64>),
}

impl From<RefPathError> for MetricsError {
    fn from(_: RefPathError) -> Self {
        MetricsError::Disconnected
    }
}

/// Dynamic time warping cost between two sequences:
/// `D[i][j] = dist(p_i, r_j) + min(D[i-1][j], D[i][j-1], D[i-1][j-1])`.
pub fn dtw_cost<T>(p: &[T], r: &[T], dist: impl Fn(&T, &T) -> f64) -> f64 {
    assert!(
        !p.is_empty() && !r.is_empty(),
        "dtw_cost needs non-empty sequences"
    );
    let m = r.len();
    let mut prev = vec![f64::INFINITY; m];
    let mut cur = vec![0.0; m];
    for (i, pi) in p.iter().enumerate() {
        for (j, rj) in r.iter().enumerate() {
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let up = prev[j];
                let left = if j > 0 { cur[j - 1] } else { f64::INFINITY };
                let diag = if j > 0 { prev[j - 1] } else { f64::INFINITY };
                up.min(left).min(diag)
            };
            cur[j] = dist(pi, rj) + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m - 1]
}

/// Normalized DTW: `exp(-DTW(P, R) / (|R| * d_th))` with Euclidean point
/// distance.
pub fn ndtw(p: &[Point], r: &[Point], d_th: f64) -> f64 {
    assert!(d_th > 0.0, "ndtw threshold must be positive");
    let cost = dtw_cost(p, r, |a, b| a.distance(b));
    (-cost / (r.len() as f64 * d_th)).exp()
}

/// The executed pose/action sequence of one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub poses: Vec<Pose>,
    pub actions: Vec<ActionType>,
    /// True iff the agent ended the episode with `Stop` (false on step limit).
    pub stopped: bool,
}

impl Trajectory {
    pub fn positions(&self) -> Vec<Point> {
        self.poses.iter().map(Pose::position).collect()
    }

    /// Trajectory length: sum of Euclidean segment lengths.
    pub fn length(&self) -> f64 {
        self.poses
            .windows(2)
            .map(|w| w[0].position().distance(&w[1].position()))
            .sum()
    }

    pub fn validate(&self, map: &GridMap) -> Result<(), MetricsError> {
        if self.poses.is_empty() {
            return Err(MetricsError::InvalidTrajectory("no poses".into()));
        }
        if self.actions.len() + 1 != self.poses.len() {
            return Err(MetricsError::InvalidTrajectory(format!(
                "{} actions for {} poses",
                self.actions.len(),
                self.poses.len()
            )));
        }
        if self.stopped != (self.actions.last() == Some(&ActionType::Stop)) {
            return Err(MetricsError::InvalidTrajectory(
                "stopped flag disagrees with the last action".into(),
            ));
        }
        if let Some(i) = self.poses.iter().position(|p| !map.is_free(&p.position())) {
            return Err(MetricsError::InvalidTrajectory(format!(
                "pose {i} lies in a blocked cell"
            )));
        }
        Ok(())
    }
}

/// Per-episode metrics, serialized as one flat JSON object.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tl: f64,
    pub ne: f64,
    pub sr: f64,
    pub os: f64,
    pub spl: f64,
    pub ndtw: f64,
    pub sdtw: f64,
    pub wa_05: f64,
    pub wa_10: f64,
}

impl MetricsReport {
    pub const FIELDS: [&'static str; 9] = [
        "tl", "ne", "os", "sr", "spl", "ndtw", "sdtw", "wa_05", "wa_10",
    ];

    pub fn values(&self) -> [f64; 9] {
        [
            self.tl, self.ne, self.os, self.sr, self.spl, self.ndtw, self.sdtw, self.wa_05,
            self.wa_10,
        ]
    }

    /// Field-wise mean; the default report for an empty slice.
    pub fn mean(reports: &[MetricsReport]) -> MetricsReport {
        if reports.is_empty() {
            return MetricsReport::default();
        }
        let n = reports.len() as f64;
        let sum = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        MetricsReport {
            tl: sum(|r| r.tl),
            ne: sum(|r| r.ne),
            sr: sum(|r| r.sr),
            os: sum(|r| r.os),
            spl: sum(|r| r.spl),
            ndtw: sum(|r| r.ndtw),
            sdtw: sum(|r| r.sdtw),
            wa_05: sum(|r| r.wa_05),
            wa_10: sum(|r| r.wa_10),
        }
    }

    /// Names of violated report invariants (empty when consistent).
    pub fn invariant_violations(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.spl > self.sr + 1e-12 {
            v.push("spl <= sr");
        }
        if self.sdtw > self.ndtw + 1e-12 {
            v.push("sdtw <= ndtw");
        }
        if self.sdtw > self.sr + 1e-12 {
            v.push("sdtw <= sr");
        }
        if self.os + 1e-12 < self.sr {
            v.push("os >= sr");
        }
        if !(self.ndtw > 0.0 && self.ndtw <= 1.0) {
            v.push("ndtw in (0, 1]");
        }
        if self.wa_05 > self.wa_10 + 1e-12 {
            v.push("wa monotone in threshold");
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub success_distance: f64,
    /// Count step-limit terminations as stops for SR.
    pub lenient_stop: bool,
    /// Require waypoint witnesses to occur in path order.
    pub wa_ordered: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            success_distance: DEFAULT_SUCCESS_DISTANCE,
            lenient_stop: false,
            wa_ordered: false,
        }
    }
}

/// Geodesic distance from `w` to each position, or infinity beyond `radius`.
fn distances_within(map: &GridMap, positions: &[Point], w: &Point, radius: f64) -> Vec<f64> {
    let Some(cw) = map.free_cell_of(w) else {
        return vec![f64::INFINITY; positions.len()];
    };
    let snap_w = w.distance(&map.cell_center(cw));
    let grid = dijkstra_until(map, cw, |_, g| g <= radius);
    positions
        .iter()
        .map(|x| match map.free_cell_of(x) {
            None => f64::INFINITY,
            Some(cx) if cx == cw => x.distance(w),
            Some(cx) if grid[cx] <= radius => x.distance(&map.cell_center(cx)) + grid[cx] + snap_w,
            Some(_) => f64::INFINITY,
        })
        .collect()
}

/// For each waypoint, whether some trajectory position lies within `tau`
/// (geodesically). With `ordered`, witnesses must be non-decreasing in time
/// and the assignment maximizing the visit count is used.
pub fn waypoint_visits(
    positions: &[Point],
    waypoints: &[Point],
    tau: f64,
    map: &GridMap,
    ordered: bool,
) -> Vec<bool> {
    let within: Vec<Vec<bool>> = waypoints
        .iter()
        .map(|w| {
            distances_within(map, positions, w, tau)
                .into_iter()
                .map(|d| d <= tau)
                .collect()
        })
        .collect();
    if !ordered {
        return within.iter().map(|row| row.iter().any(|&b| b)).collect();
    }
    // best[t]: (count, visit flags) using witnesses at times <= t.
    let t_len = positions.len();
    let mut best: Vec<(usize, Vec<bool>)> = vec![(0, vec![false; waypoints.len()]); t_len];
    for (j, row) in within.iter().enumerate() {
        let mut running: Option<(usize, Vec<bool>)> = None;
        let mut next = best.clone();
        for t in 0..t_len {
            if row[t] {
                let (c, flags) = &best[t];
                if running.as_ref().is_none_or(|(rc, _)| c + 1 > *rc) {
                    let mut f = flags.clone();
                    f[j] = true;
                    running = Some((c + 1, f));
                }
            }
            if let Some((rc, rf)) = &running {
                if *rc > next[t].0 {
                    next[t] = (*rc, rf.clone());
                }
            }
        }
        best = next;
    }
    best.pop()
        .map(|(_, f)| f)
        .unwrap_or_else(|| vec![false; waypoints.len()])
}

/// Waypoint Accuracy: fraction of waypoints visited within `tau` meters.
pub fn waypoint_accuracy(traj: &Trajectory, path: &WaypointPath, tau: f64, map: &GridMap) -> f64 {
    waypoint_accuracy_with(traj, path, tau, map, false)
}

pub fn waypoint_accuracy_with(
    traj: &Trajectory,
    path: &WaypointPath,
    tau: f64,
    map: &GridMap,
    ordered: bool,
) -> f64 {
    assert!(tau > 0.0, "waypoint accuracy threshold must be positive");
    let visits = waypoint_visits(&traj.positions(), &path.points, tau, map, ordered);
    visits.iter().filter(|&&v| v).count() as f64 / path.len() as f64
}

/// All metrics for one episode. nDTW uses the step reference path; WA uses
/// the pano waypoints.
pub fn compute_metrics(
    episode: &Episode,
    traj: &Trajectory,
    map: &GridMap,
    cfg: &MetricsConfig,
) -> Result<MetricsReport, MetricsError> {
    traj.validate(map)?;
    let d_th = cfg.success_distance;
    let goal_field =
        GeodesicField::new(map, episode.goal).map_err(|_| MetricsError::Disconnected)?;
    let positions = traj.positions();
    let to_goal: Vec<f64> = positions
        .iter()
        .map(|p| goal_field.distance_from(map, p))
        .collect();
    let shortest = to_goal[0];
    if !shortest.is_finite() {
        return Err(MetricsError::Disconnected);
    }
    let tl = traj.length();
    let ne = *to_goal.last().unwrap();
    let ended_by_stop = traj.stopped || cfg.lenient_stop;
    let sr = if ended_by_stop && ne < d_th { 1.0 } else { 0.0 };
    let os = if to_goal.iter().any(|&d| d < d_th) {
        1.0
    } else {
        0.0
    };
    let spl = if sr > 0.0 {
        let denom = shortest.max(tl);
        if denom > 0.0 {
            sr * shortest / denom
        } else {
            sr
        }
    } else {
        0.0
    };
    let step = densify_to_steps(map, &episode.pano_path)?;
    let ndtw_value = ndtw(&positions, &step.points, d_th);
    let sdtw = sr * ndtw_value;
    let wa = |tau: f64| {
        let v = waypoint_visits(
            &positions,
            &episode.pano_path.points,
            tau,
            map,
            cfg.wa_ordered,
        );
        v.iter().filter(|&&b| b).count() as f64 / v.len() as f64
    };
    Ok(MetricsReport {
        tl,
        ne,
        sr,
        os,
        spl,
        ndtw: ndtw_value,
        sdtw,
        wa_05: wa(0.5),
        wa_10: wa(1.0),
    })
}

/// One row of a divergence-binned table. Undefined statistics are NaN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub n: usize,
    pub ndtw_mean: f64,
    pub ndtw_ci: f64,
    pub wa_mean: f64,
    pub wa_ci: f64,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct BinTable {
    pub rows: Vec<BinRow>,
}

pub const BIN_TABLE_HEADER: [&str; 7] = [
    "bin_lo",
    "bin_hi",
    "n",
    "ndtw_mean",
    "ndtw_ci",
    "wa_mean",
    "wa_ci",
];

fn mean_and_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

/// Formats a float with 4 decimals; NaN prints as `NaN`.
pub fn fmt4(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v:.4}")
    }
}

impl BinTable {
    /// Lowest and highest bins holding at least one episode.
    pub fn occupied_extremes(&self) -> Option<(&BinRow, &BinRow)> {
        let lo = self.rows.iter().find(|r| r.n > 0)?;
        let hi = self.rows.iter().rev().find(|r| r.n > 0)?;
        Some((lo, hi))
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(BIN_TABLE_HEADER).expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                fmt4(r.bin_lo),
                fmt4(r.bin_hi),
                r.n.to_string(),
                fmt4(r.ndtw_mean),
                fmt4(r.ndtw_ci),
                fmt4(r.wa_mean),
                fmt4(r.wa_ci),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8 csv")
    }
}

/// Groups `(divergence, report)` pairs into bins `(lo, hi]` and reports mean
/// nDTW and WA@0.5 per bin with 95% normal-approximation intervals.
pub fn bin_by_divergence(
    results: &[(f64, MetricsReport)],
    edges: &[f64],
) -> Result<BinTable, MetricsError> {
    let increasing = edges.windows(2).all(|w| w[0] < w[1]);
    if edges.len() < 2 || !increasing || edges[0] > 0.0 || *edges.last().unwrap() < 1.0 {
        return Err(MetricsError::InvalidEdges(edges.to_vec()));
    }
    let n_bins = edges.len() - 1;
    let mut groups: Vec<Vec<&MetricsReport>> = vec![Vec::new(); n_bins];
    for (div, report) in results {
        // First bin whose upper edge is >= div; out-of-range values clamp.
        let b = edges[1..].partition_point(|&hi| hi < *div).min(n_bins - 1);
        groups[b].push(report);
    }
    let rows = groups
        .iter()
        .enumerate()
        .map(|(b, g)| {
            let nd: Vec<f64> = g.iter().map(|r| r.ndtw).collect();
            let wa: Vec<f64> = g.iter().map(|r| r.wa_05).collect();
            let (ndtw_mean, ndtw_ci) = mean_and_ci(&nd);
            let (wa_mean, wa_ci) = mean_and_ci(&wa);
            BinRow {
                bin_lo: edges[b],
                bin_hi: edges[b + 1],
                n: g.len(),
                ndtw_mean,
                ndtw_ci,
                wa_mean,
                wa_ci,
            }
        })
        .collect();
    Ok(BinTable { rows })
}
