use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::{ActionType, GridMap, Point, Pose};

/// Range-scan settings; the scan stands in for the agent's camera.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanConfig {
    pub n_rays: usize,
    /// Field of view in radians.
    pub fov: f64,
    pub max_range: f64,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            n_rays: 9,
            fov: PI / 2.0,
            max_range: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub ranges: Vec<f64>,
    /// `None` on the first step of an episode.
    pub prev_action: Option<ActionType>,
    pub step_index: usize,
}

pub fn observe(
    map: &GridMap,
    pose: &Pose,
    prev_action: Option<ActionType>,
    step_index: usize,
    scan: &ScanConfig,
) -> Observation {
    Observation {
        ranges: raycast_scan(map, pose, scan.n_rays, scan.fov, scan.max_range),
        prev_action,
        step_index,
    }
}

/// Distances to the first blocked cell along `n_rays` rays spread evenly over
/// `fov` and centered on the heading, ordered left to right, clamped to
/// `max_range`.
pub fn raycast_scan(
    map: &GridMap,
    pose: &Pose,
    n_rays: usize,
    fov: f64,
    max_range: f64,
) -> Vec<f64> {
    assert!(n_rays >= 1, "raycast_scan needs at least one ray");
    let origin = pose.position();
    (0..n_rays)
        .map(|i| {
            let offset = if n_rays == 1 {
                0.0
            } else {
                fov / 2.0 - fov * i as f64 / (n_rays - 1) as f64
            };
            cast_ray(map, &origin, pose.heading + offset, max_range)
        })
        .collect()
}

/// Grid traversal (Amanatides-Woo) to the boundary of the first blocked cell.
fn cast_ray(map: &GridMap, origin: &Point, angle: f64, max_range: f64) -> f64 {
    let res = map.resolution();
    let (dy, dx) = angle.sin_cos();
    let mut col = (origin.x / res + 0.5).floor() as isize;
    let mut row = (origin.y / res + 0.5).floor() as isize;
    if map.blocked_at(col, row) {
        return 0.0;
    }
    let step_c: isize = if dx > 0.0 { 1 } else { -1 };
    let step_r: isize = if dy > 0.0 { 1 } else { -1 };
    let mut t_max_c = if dx.abs() < 1e-15 {
        f64::INFINITY
    } else {
        let edge = (col as f64 + if dx > 0.0 { 0.5 } else { -0.5 }) * res;
        (edge - origin.x) / dx
    };
    let mut t_max_r = if dy.abs() < 1e-15 {
        f64::INFINITY
    } else {
        let edge = (row as f64 + if dy > 0.0 { 0.5 } else { -0.5 }) * res;
        (edge - origin.y) / dy
    };
    let t_delta_c = if dx.abs() < 1e-15 {
        f64::INFINITY
    } else {
        res / dx.abs()
    };
    let t_delta_r = if dy.abs() < 1e-15 {
        f64::INFINITY
    } else {
        res / dy.abs()
    };
    loop {
        let t;
        if t_max_c < t_max_r {
            t = t_max_c;
            t_max_c += t_delta_c;
            col += step_c;
        } else {
            t = t_max_r;
            t_max_r += t_delta_r;
            row += step_r;
        }
        if t >= max_range {
            return max_range;
        }
        if map.blocked_at(col, row) {
            return t.max(0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Marching oracle: step along the ray at `res / 4` until a blocked sample.
    fn march(map: &GridMap, pose: &Pose, angle: f64, max_range: f64) -> f64 {
        let h = map.resolution() / 4.0;
        let (s, c) = angle.sin_cos();
        let mut t = 0.0;
        while t < max_range {
            if !map.is_free(&Point::new(pose.x + c * t, pose.y + s * t)) {
                return t;
            }
            t += h;
        }
        max_range
    }

    #[test]
    fn open_area_returns_max_range() {
        let map = GridMap::open(200, 200, 0.1);
        let pose = Pose::new(10.0, 10.0, 0.3);
        let r = raycast_scan(&map, &pose, 9, PI / 2.0, 5.0);
        assert_eq!(r.len(), 9);
        assert!(r.iter().all(|&d| d == 5.0));
    }

    #[test]
    fn wall_ahead_center_ray() {
        let mut map = GridMap::open(60, 60, 0.1);
        map.fill_rect(30, 0, 32, 60, true);
        let pose = Pose::new(2.0, 3.0, 0.0);
        let r = raycast_scan(&map, &pose, 9, PI / 2.0, 5.0);
        assert!((r[4] - 1.0).abs() <= 0.1, "center = {}", r[4]);
        let m = march(&map, &pose, 0.0, 5.0);
        assert!((r[4] - m).abs() <= 0.1);
    }

    #[test]
    fn corner_matches_marching() {
        let mut map = GridMap::open(60, 60, 0.1);
        map.fill_rect(40, 0, 42, 60, true);
        map.fill_rect(0, 40, 60, 42, true);
        let pose = Pose::new(2.5, 2.5, PI / 4.0);
        let ranges = raycast_scan(&map, &pose, 9, PI / 2.0, 5.0);
        for (i, &d) in ranges.iter().enumerate() {
            let angle = pose.heading + PI / 4.0 - PI / 2.0 * i as f64 / 8.0;
            let m = march(&map, &pose, angle, 5.0);
            assert!(d <= m + 1e-9, "ray {i}: {d} > {m}");
            assert!(m - d <= 0.025 + 1e-9, "ray {i}: {d} vs {m}");
        }
        // Symmetric corner: ranges mirror around the center ray.
        for i in 0..4 {
            assert!((ranges[i] - ranges[8 - i]).abs() < 1e-6);
        }
        // Monotone toward the corner diagonal.
        for i in 0..4 {
            assert!(ranges[i] <= ranges[i + 1] + 1e-9);
        }
    }

    #[test]
    fn single_ray_points_along_heading() {
        let mut map = GridMap::open(40, 40, 0.1);
        map.fill_rect(0, 30, 40, 32, true);
        let pose = Pose::new(2.0, 1.0, PI / 2.0);
        let r = raycast_scan(&map, &pose, 1, PI / 2.0, 5.0);
        assert!((r[0] - 1.95).abs() < 1e-9);
    }
}
