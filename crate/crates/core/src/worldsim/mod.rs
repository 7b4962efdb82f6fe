//! Continuous-pose agent simulation on an occupancy grid.
//!
//! The world is a 2D [`GridMap`] of blocked/free cells. The agent has a
//! continuous [`Pose`] and moves with four discrete actions: `Forward`
//! translates 0.25 m along the heading (truncated at the last collision-free
//! point), `Left`/`Right` rotate by 15 degrees and `Stop` ends the episode.
//!
//! Geodesic distances are shortest 8-connected grid paths between the cells
//! containing two points, plus the straight-line "snap" offsets from each point
//! to its cell center. Diagonal moves never cut a blocked corner.

mod geodesic;
mod grid;
mod scan;

pub(crate) use geodesic::{dijkstra_until, path_length};
pub use geodesic::{geodesic_distance, shortest_path, GeodesicField};
pub use grid::{GridMap, Region};
pub use scan::{observe, raycast_scan, Observation, ScanConfig};

use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};
use thiserror::Error;

/// Distance covered by one `Forward` action, in meters.
pub const STEP_SIZE: f64 = 0.25;
/// Rotation applied by one `Left` or `Right` action, in radians.
pub const TURN_ANGLE: f64 = 15.0 * PI / 180.0;
/// Default grid resolution in meters per cell.
pub const DEFAULT_RESOLUTION: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("points are not connected through free space")]
    Disconnected,
    #[error("invalid map: {0}")]
    InvalidMap(String),
}

/// A point in world coordinates (meters). Serialized as `[x, y]`.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Point `t` of the way from `self` to `other`.
    pub fn lerp(&self, other: &Point, t: f64) -> Point {
        Point::new(
            self.x + (other.x - self.x) * t,
            self.y + (other.y - self.y) * t,
        )
    }

    /// Direction angle of the vector from `self` to `other`.
    pub fn bearing_to(&self, other: &Point) -> f64 {
        (other.y - self.y).atan2(other.x - self.x)
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

/// Agent pose: position in meters and heading in radians, `[-pi, pi)`.
/// Serialized as `[x, y, heading]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Pose {
            x,
            y,
            heading: wrap_angle(heading),
        }
    }

    pub fn position(&self) -> Point {
        Point::new(self.x, self.y)
    }
}

impl From<[f64; 3]> for Pose {
    fn from(v: [f64; 3]) -> Self {
        Pose {
            x: v[0],
            y: v[1],
            heading: v[2],
        }
    }
}

impl From<Pose> for [f64; 3] {
    fn from(p: Pose) -> Self {
        [p.x, p.y, p.heading]
    }
}

/// The four discrete agent actions. Declaration order is the index order used
/// for one-hot encodings and argmax tie-breaking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ActionType {
    Forward,
    Left,
    Right,
    Stop,
}

impl ActionType {
    pub const ALL: [ActionType; 4] = [
        ActionType::Forward,
        ActionType::Left,
        ActionType::Right,
        ActionType::Stop,
    ];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<ActionType> {
        ActionType::ALL.get(i).copied()
    }
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(TAU) - PI;
    if r >= PI {
        r - TAU
    } else {
        r
    }
}

/// Applies one action. Collisions truncate `Forward` at the last free sample
/// (sampled every `resolution / 2`); they never produce an error.
pub fn apply_action(map: &GridMap, pose: &Pose, action: ActionType) -> Pose {
    match action {
        ActionType::Left => Pose::new(pose.x, pose.y, pose.heading + TURN_ANGLE),
        ActionType::Right => Pose::new(pose.x, pose.y, pose.heading - TURN_ANGLE),
        ActionType::Stop => *pose,
        ActionType::Forward => {
            let (s, c) = pose.heading.sin_cos();
            let h = map.resolution() / 2.0;
            let n = (STEP_SIZE / h).ceil() as usize;
            let mut last = *pose;
            for k in 1..=n {
                let t = (k as f64 * h).min(STEP_SIZE);
                let p = Point::new(pose.x + c * t, pose.y + s * t);
                if !map.is_free(&p) {
                    break;
                }
                last = Pose {
                    x: p.x,
                    y: p.y,
                    heading: pose.heading,
                };
            }
            last
        }
    }
}

/// True when `Forward` would not move the agent at all.
pub fn forward_blocked(map: &GridMap, pose: &Pose) -> bool {
    let next = apply_action(map, pose, ActionType::Forward);
    next.x == pose.x && next.y == pose.y
}
