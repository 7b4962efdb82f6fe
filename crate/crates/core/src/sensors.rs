//! Ground-truth action oracles.
//!
//! [`best_action`] steers toward a target point along the geodesic shortest
//! path. The goal oracle always targets the episode goal; the language-aligned
//! (LAW) oracle targets the nearest waypoint of the reference path, advancing
//! to the next one once the current one is reached, so an agent that strayed
//! is led back onto the path rather than straight to the goal.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::refpath::{
    densify_to_steps, nearest_in_window, resample_equidistant, ProgressState, RefPathError,
    WaypointPath,
};
use crate::worldsim::{
    apply_action, forward_blocked, shortest_path, wrap_angle, ActionType, GeodesicField, GridMap,
    Point, Pose, STEP_SIZE, TURN_ANGLE,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SensorError {
    #[error("target is not reachable from the agent")]
    Disconnected,
    #[error("invalid supervision mode: {0}")]
    InvalidMode(String),
}

impl From<RefPathError> for SensorError {
    fn from(_: RefPathError) -> Self {
        SensorError::Disconnected
    }
}

/// Waypoint density used by the LAW oracle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Density {
    Pano,
    Step,
    /// `k` equidistant waypoints after the start (LAW#k).
    Count(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SupervisionMode {
    Goal,
    Law(Density),
    /// Sum of the LAW (pano) and goal cross-entropies.
    MixedSum,
    /// Per episode, LAW (pano) labels with probability `p`, else goal labels.
    MixedRandom(f64),
}

impl SupervisionMode {
    /// The waypoint path the LAW oracle follows under this mode.
    pub fn law_density(&self) -> Density {
        match self {
            SupervisionMode::Law(d) => *d,
            _ => Density::Pano,
        }
    }
}

impl fmt::Display for SupervisionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SupervisionMode::Goal => write!(f, "goal"),
            SupervisionMode::Law(Density::Pano) => write!(f, "law-pano"),
            SupervisionMode::Law(Density::Step) => write!(f, "law-step"),
            SupervisionMode::Law(Density::Count(k)) => write!(f, "law-k:{k}"),
            SupervisionMode::MixedSum => write!(f, "mixed-sum"),
            SupervisionMode::MixedRandom(p) => write!(f, "mixed-random:{p}"),
        }
    }
}

impl FromStr for SupervisionMode {
    type Err = SensorError;

    /// Accepts `goal`, `law-pano`, `law-step`, `law-k:K`, `mixed-sum` and
    /// `mixed-random:P`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SensorError::InvalidMode(s.to_string());
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let mode = match (name, arg) {
            ("goal", None) => SupervisionMode::Goal,
            ("law-pano", None) => SupervisionMode::Law(Density::Pano),
            ("law-step", None) => SupervisionMode::Law(Density::Step),
            ("law-k", Some(k)) => {
                let k: usize = k.parse().map_err(|_| bad())?;
                if k < 1 {
                    return Err(bad());
                }
                SupervisionMode::Law(Density::Count(k))
            }
            ("mixed-sum", None) => SupervisionMode::MixedSum,
            ("mixed-random", Some(p)) => {
                let p: f64 = p.parse().map_err(|_| bad())?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(bad());
                }
                SupervisionMode::MixedRandom(p)
            }
            _ => return Err(bad()),
        };
        Ok(mode)
    }
}

impl Serialize for SupervisionMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SupervisionMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleLabel {
    pub action: ActionType,
    pub target_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    /// Stop once the final target is geodesically closer than this.
    pub d_stop: f64,
    /// A waypoint within this distance counts as reached.
    pub advance_radius: f64,
    /// Largest heading error (radians) for which `Forward` is chosen.
    pub forward_threshold: f64,
    /// Steering point distance along the shortest path (at least one step).
    pub lookahead: f64,
    /// Restrict the nearest-waypoint query to indices at or past progress.
    pub window: bool,
    /// Draw the mixed-random coin per step instead of per episode.
    pub random_per_step: bool,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            d_stop: 0.5,
            advance_radius: 0.25,
            forward_threshold: 7.5f64.to_radians(),
            lookahead: 0.5,
            window: true,
            random_per_step: false,
        }
    }
}

fn segment_clear(map: &GridMap, a: &Point, b: &Point) -> bool {
    let h = map.resolution() / 4.0;
    let n = (a.distance(b) / h).ceil() as usize;
    (1..=n).all(|k| map.is_free(&a.lerp(b, k as f64 / n as f64)))
}

/// Grid shortest path toward `to` and the distance used for the stop and
/// advance radii: the straight-line distance when the segment is clear
/// (cell snapping inflates short geodesics), else the path length.
fn route(map: &GridMap, from: &Point, to: &Point) -> Result<(f64, Vec<Point>), SensorError> {
    let p = shortest_path(map, from, to).map_err(|_| SensorError::Disconnected)?;
    let d = if segment_clear(map, from, to) {
        from.distance(to)
    } else {
        crate::worldsim::path_length(&p)
    };
    Ok((d, p))
}

/// Steering point `dist` along `path` by arc length (at least one step),
/// or the farthest earlier vertex in line of sight when the straight
/// segment to it would clip a wall.
fn lookahead(map: &GridMap, here: &Point, path: &[Point], dist: f64) -> Point {
    let mut left = dist.max(STEP_SIZE);
    let mut aim = *path.last().unwrap();
    let mut far = path.len() - 1;
    for (i, w) in path.windows(2).enumerate() {
        let len = w[0].distance(&w[1]);
        if len >= left {
            aim = w[0].lerp(&w[1], left / len);
            far = i + 1;
            break;
        }
        left -= len;
    }
    if segment_clear(map, here, &aim) {
        return aim;
    }
    for i in (1..far).rev() {
        if segment_clear(map, here, &path[i]) {
            return path[i];
        }
    }
    path[1.min(path.len() - 1)]
}

/// Action choice given the shortest path toward the target and its length.
fn steer(
    map: &GridMap,
    pose: &Pose,
    dist: f64,
    path: &[Point],
    is_final_goal: bool,
    cfg: &OracleConfig,
) -> ActionType {
    if is_final_goal && dist < cfg.d_stop {
        return ActionType::Stop;
    }
    let here = pose.position();
    let aim = lookahead(map, &here, path, cfg.lookahead);
    if aim == here {
        return ActionType::Forward;
    }
    let delta = wrap_angle(here.bearing_to(&aim) - pose.heading);
    if delta.abs() <= cfg.forward_threshold {
        if !forward_blocked(map, pose) {
            return ActionType::Forward;
        }
        return if delta >= 0.0 {
            ActionType::Left
        } else {
            ActionType::Right
        };
    }
    let turn = if delta > 0.0 {
        ActionType::Left
    } else {
        ActionType::Right
    };
    // Turning would leave the agent facing a wall with the aim still within
    // one turn step; moving now avoids a left/right cycle.
    if delta.abs() <= TURN_ANGLE
        && !forward_blocked(map, pose)
        && forward_blocked(map, &apply_action(map, pose, turn))
    {
        return ActionType::Forward;
    }
    turn
}

/// Best action toward `target` along the geodesic shortest path.
pub fn best_action(
    map: &GridMap,
    pose: &Pose,
    target: &Point,
    is_final_goal: bool,
    cfg: &OracleConfig,
) -> Result<ActionType, SensorError> {
    let (dist, path) = route(map, &pose.position(), target)?;
    Ok(steer(map, pose, dist, &path, is_final_goal, cfg))
}

/// Goal-oriented label: best action toward the goal.
pub fn goal_action(
    map: &GridMap,
    pose: &Pose,
    goal: &Point,
    n_waypoints: usize,
    cfg: &OracleConfig,
) -> Result<OracleLabel, SensorError> {
    Ok(OracleLabel {
        action: best_action(map, pose, goal, true, cfg)?,
        target_index: n_waypoints.saturating_sub(1),
    })
}

/// Picks the waypoint to steer toward and updates `progress`.
fn law_target(
    map: &GridMap,
    here: &Point,
    path: &WaypointPath,
    progress: &mut ProgressState,
    cfg: &OracleConfig,
) -> Result<(usize, f64, Vec<Point>), SensorError> {
    let lo = if cfg.window { progress.last_reached } else { 0 };
    let j = nearest_in_window(here, &path.points, lo, map)?;
    let plan = |t: usize| route(map, here, &path.points[t]);
    let (dj, pj) = plan(j)?;
    let mut target = j;
    if dj <= cfg.advance_radius {
        progress.last_reached = progress.last_reached.max(j);
        target = (j + 1).min(path.len() - 1);
    }
    if cfg.window {
        target = target.max(progress.last_target);
    }
    let (mut d, mut p) = if target == j { (dj, pj) } else { plan(target)? };
    // Skip targets already inside the radius; step points can bunch up
    // around pano waypoints.
    while target + 1 < path.len() && d <= cfg.advance_radius {
        progress.last_reached = progress.last_reached.max(target);
        target += 1;
        (d, p) = plan(target)?;
    }
    if cfg.window {
        progress.last_target = target;
    }
    Ok((target, d, p))
}

/// LAW label: best action toward the nearest waypoint, or the one after it
/// once the nearest is reached. Stops only near the final waypoint.
pub fn law_action(
    map: &GridMap,
    pose: &Pose,
    path: &WaypointPath,
    progress: &mut ProgressState,
    cfg: &OracleConfig,
) -> Result<OracleLabel, SensorError> {
    let (target, dist, mut p) = law_target(map, &pose.position(), path, progress, cfg)?;
    let is_final = target == path.len() - 1;
    // A target closer than the lookahead would make the steering point
    // jitter along grid staircases; keep following the shortest path through
    // the target on to the first later waypoint beyond the lookahead.
    if dist < cfg.lookahead && target + 1 < path.len() {
        let here = pose.position();
        let k = (target + 1..path.len())
            .find(|&k| path.points[k].distance(&here) >= cfg.lookahead)
            .unwrap_or(path.len() - 1);
        let onward = route(map, &path.points[target], &path.points[k])?.1;
        // Join at the target's cell rather than the target itself, which can
        // sit slightly behind its cell center.
        if p.len() > 1 {
            p.pop();
        }
        for q in onward.into_iter().skip(1) {
            if p.last() != Some(&q) {
                p.push(q);
            }
        }
    }
    Ok(OracleLabel {
        action: steer(map, pose, dist, &p, is_final, cfg),
        target_index: target,
    })
}

/// Weighted action labels for one step; equal actions are merged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    pub entries: Vec<(ActionType, f64)>,
}

impl LabelSet {
    pub fn single(action: ActionType) -> Self {
        LabelSet {
            entries: vec![(action, 1.0)],
        }
    }

    pub fn push(&mut self, action: ActionType, weight: f64) {
        match self.entries.iter_mut().find(|(a, _)| *a == action) {
            Some(e) => e.1 += weight,
            None => self.entries.push((action, weight)),
        }
    }
}

/// Labels for the mixed modes. `MixedSum` keeps both labels with weight 1;
/// `MixedRandom(p)` keeps the LAW label when a coin seeded by `coin_seed`
/// lands below `p`, else the goal label.
pub fn mixed_labels(
    mode: SupervisionMode,
    law: &OracleLabel,
    goal: &OracleLabel,
    coin_seed: u64,
) -> LabelSet {
    match mode {
        SupervisionMode::MixedSum => {
            let mut set = LabelSet::single(law.action);
            set.push(goal.action, 1.0);
            set
        }
        SupervisionMode::MixedRandom(p) => {
            if law_coin(p, coin_seed) {
                LabelSet::single(law.action)
            } else {
                LabelSet::single(goal.action)
            }
        }
        SupervisionMode::Goal => LabelSet::single(goal.action),
        SupervisionMode::Law(_) => LabelSet::single(law.action),
    }
}

fn law_coin(p: f64, seed: u64) -> bool {
    ChaCha8Rng::seed_from_u64(seed).gen::<f64>() < p
}

/// The waypoint path the LAW oracle follows for a density.
pub fn law_path(
    map: &GridMap,
    pano: &WaypointPath,
    density: Density,
) -> Result<WaypointPath, SensorError> {
    Ok(match density {
        Density::Pano => pano.clone(),
        Density::Step => densify_to_steps(map, pano)?,
        Density::Count(k) => resample_equidistant(map, &densify_to_steps(map, pano)?, k + 1)?,
    })
}

/// Labels from one oracle query.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleOutput {
    pub labels: LabelSet,
    /// The action the oracle would execute.
    pub action: ActionType,
    /// Index of the LAW target waypoint (the last index in goal mode).
    pub target_index: usize,
}

/// Stateful per-episode oracle for a supervision mode.
pub struct EpisodeOracle<'a> {
    map: &'a GridMap,
    mode: SupervisionMode,
    cfg: OracleConfig,
    path: WaypointPath,
    goal_field: Option<GeodesicField>,
    progress: ProgressState,
    coin_seed: u64,
    step: u64,
}

impl<'a> EpisodeOracle<'a> {
    pub fn new(
        map: &'a GridMap,
        pano: &WaypointPath,
        mode: SupervisionMode,
        cfg: OracleConfig,
        coin_seed: u64,
    ) -> Result<Self, SensorError> {
        let path = law_path(map, pano, mode.law_density())?;
        let goal_field = match mode {
            SupervisionMode::Law(_) => None,
            _ => Some(GeodesicField::new(map, pano.last()).map_err(|_| SensorError::Disconnected)?),
        };
        Ok(EpisodeOracle {
            map,
            mode,
            cfg,
            path,
            goal_field,
            progress: ProgressState::default(),
            coin_seed,
            step: 0,
        })
    }

    pub fn path(&self) -> &WaypointPath {
        &self.path
    }

    pub fn progress(&self) -> ProgressState {
        self.progress
    }

    fn goal_label(&self, pose: &Pose) -> Result<OracleLabel, SensorError> {
        let field = self
            .goal_field
            .as_ref()
            .expect("goal field for goal-based modes");
        let here = pose.position();
        let path = field
            .path_from(self.map, &here)
            .map_err(|_| SensorError::Disconnected)?;
        let dist = field.distance_from(self.map, &here);
        Ok(OracleLabel {
            action: steer(self.map, pose, dist, &path, true, &self.cfg),
            target_index: self.path.len() - 1,
        })
    }

    /// Labels the pose and advances the oracle's progress.
    pub fn query(&mut self, pose: &Pose) -> Result<OracleOutput, SensorError> {
        let step = self.step;
        self.step += 1;
        match self.mode {
            SupervisionMode::Goal => {
                let g = self.goal_label(pose)?;
                Ok(OracleOutput {
                    labels: LabelSet::single(g.action),
                    action: g.action,
                    target_index: g.target_index,
                })
            }
            SupervisionMode::Law(_) => {
                let l = law_action(self.map, pose, &self.path, &mut self.progress, &self.cfg)?;
                Ok(OracleOutput {
                    labels: LabelSet::single(l.action),
                    action: l.action,
                    target_index: l.target_index,
                })
            }
            SupervisionMode::MixedSum | SupervisionMode::MixedRandom(_) => {
                let l = law_action(self.map, pose, &self.path, &mut self.progress, &self.cfg)?;
                let g = self.goal_label(pose)?;
                let seed = if self.cfg.random_per_step {
                    self.coin_seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15)
                } else {
                    self.coin_seed
                };
                let labels = mixed_labels(self.mode, &l, &g, seed);
                let action = match self.mode {
                    SupervisionMode::MixedRandom(p) if !law_coin(p, seed) => g.action,
                    _ => l.action,
                };
                Ok(OracleOutput {
                    labels,
                    action,
                    target_index: l.target_index,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refpath::PathKind;
    use crate::worldsim::{apply_action, geodesic_distance};
    use std::f64::consts::PI;

    fn cfg() -> OracleConfig {
        OracleConfig::default()
    }

    #[test]
    fn forward_toward_target_ahead() {
        let map = GridMap::open(60, 60, 0.1);
        let a = best_action(
            &map,
            &Pose::new(1.0, 1.0, 0.0),
            &Point::new(2.0, 1.0),
            false,
            &cfg(),
        );
        assert_eq!(a.unwrap(), ActionType::Forward);
    }

    #[test]
    fn turns_around_to_face_target_behind() {
        let map = GridMap::open(60, 60, 0.1);
        let target = Point::new(1.0, 3.0);
        let mut pose = Pose::new(4.0, 3.0, 0.0);
        let mut turns = 0;
        loop {
            let a = best_action(&map, &pose, &target, false, &cfg()).unwrap();
            if a == ActionType::Forward {
                break;
            }
            assert_ne!(a, ActionType::Stop);
            pose = apply_action(&map, &pose, a);
            turns += 1;
            assert!(turns <= 12);
        }
        assert_eq!(turns, 12);
        assert!(wrap_angle(pose.heading - PI).abs() < 1e-9);
    }

    #[test]
    fn stops_near_final_goal() {
        let map = GridMap::open(60, 60, 0.1);
        let a = best_action(
            &map,
            &Pose::new(1.0, 1.0, 2.0),
            &Point::new(1.3, 1.0),
            true,
            &cfg(),
        );
        assert_eq!(a.unwrap(), ActionType::Stop);
        let a = best_action(
            &map,
            &Pose::new(1.0, 1.0, 2.0),
            &Point::new(1.3, 1.0),
            false,
            &cfg(),
        );
        assert_ne!(a.unwrap(), ActionType::Stop);
    }

    #[test]
    fn goal_forty_five_degrees_left() {
        let map = GridMap::open(100, 100, 0.1);
        let mut pose = Pose::new(2.0, 2.0, 0.0);
        let goal = Point::new(6.0, 6.0);
        let mut seq = Vec::new();
        for _ in 0..4 {
            let a = goal_action(&map, &pose, &goal, 2, &cfg()).unwrap().action;
            seq.push(a);
            pose = apply_action(&map, &pose, a);
        }
        use ActionType::*;
        assert_eq!(seq, vec![Left, Left, Left, Forward]);
    }

    #[test]
    fn law_advances_past_reached_waypoint() {
        let map = GridMap::open(100, 40, 0.1);
        let path = WaypointPath::new(
            vec![
                Point::new(1.0, 2.0),
                Point::new(3.0, 2.0),
                Point::new(5.0, 2.0),
            ],
            PathKind::Pano,
        )
        .unwrap();
        let mut progress = ProgressState::default();
        let l = law_action(
            &map,
            &Pose::new(1.0, 2.0, 0.0),
            &path,
            &mut progress,
            &cfg(),
        )
        .unwrap();
        assert_eq!(
            l,
            OracleLabel {
                action: ActionType::Forward,
                target_index: 1
            }
        );
        let l = law_action(
            &map,
            &Pose::new(4.8, 2.0, 0.0),
            &path,
            &mut progress,
            &cfg(),
        )
        .unwrap();
        assert_eq!(l.action, ActionType::Stop);
    }

    #[test]
    fn law_rejoins_path_after_lateral_offset() {
        let map = GridMap::open(120, 60, 0.1);
        let pano = WaypointPath::new(
            vec![
                Point::new(1.0, 3.0),
                Point::new(6.0, 3.0),
                Point::new(10.0, 3.0),
            ],
            PathKind::Pano,
        )
        .unwrap();
        let step = densify_to_steps(&map, &pano).unwrap();
        let mut progress = ProgressState::default();
        let mut pose = Pose::new(1.0, 4.0, 0.0);
        let mut rejoined = false;
        for _ in 0..200 {
            let l = law_action(&map, &pose, &step, &mut progress, &cfg()).unwrap();
            if l.action == ActionType::Stop {
                break;
            }
            pose = apply_action(&map, &pose, l.action);
            if (pose.y - 3.0).abs() <= 0.25 && pose.x < 9.0 {
                rejoined = true;
            }
        }
        assert!(rejoined);
        assert!(geodesic_distance(&map, &pose.position(), &pano.last()) < 0.5);
    }

    #[test]
    fn law_targets_are_monotone() {
        let mut map = GridMap::open(100, 100, 0.1);
        map.fill_rect(40, 0, 42, 70, true);
        let pano = WaypointPath::new(
            vec![
                Point::new(2.0, 2.0),
                Point::new(3.0, 8.0),
                Point::new(8.0, 8.0),
                Point::new(7.0, 2.0),
            ],
            PathKind::Pano,
        )
        .unwrap();
        for density in [Density::Pano, Density::Step, Density::Count(4)] {
            let mut o =
                EpisodeOracle::new(&map, &pano, SupervisionMode::Law(density), cfg(), 0).unwrap();
            let mut pose = Pose::new(2.0, 2.0, 1.0);
            let mut last = 0;
            let mut stopped = false;
            for _ in 0..400 {
                let out = o.query(&pose).unwrap();
                assert!(out.target_index >= last);
                last = out.target_index;
                if out.action == ActionType::Stop {
                    stopped = true;
                    break;
                }
                pose = apply_action(&map, &pose, out.action);
            }
            assert!(stopped, "{density:?} did not stop");
        }
    }

    #[test]
    fn mixed_label_sets() {
        let l = |a| OracleLabel {
            action: a,
            target_index: 0,
        };
        let s = mixed_labels(
            SupervisionMode::MixedSum,
            &l(ActionType::Forward),
            &l(ActionType::Forward),
            1,
        );
        assert_eq!(s.entries, vec![(ActionType::Forward, 2.0)]);
        let s = mixed_labels(
            SupervisionMode::MixedSum,
            &l(ActionType::Left),
            &l(ActionType::Forward),
            1,
        );
        assert_eq!(
            s.entries,
            vec![(ActionType::Left, 1.0), (ActionType::Forward, 1.0)]
        );
        for seed in 0..20 {
            let a = mixed_labels(
                SupervisionMode::MixedRandom(0.5),
                &l(ActionType::Left),
                &l(ActionType::Right),
                seed,
            );
            let b = mixed_labels(
                SupervisionMode::MixedRandom(0.5),
                &l(ActionType::Left),
                &l(ActionType::Right),
                seed,
            );
            assert_eq!(a, b);
        }
        let picks = (0..2000).filter(|&s| law_coin(0.5, s)).count();
        assert!((900..1100).contains(&picks), "{picks}");
    }

    #[test]
    fn mode_strings_round_trip() {
        for s in [
            "goal",
            "law-pano",
            "law-step",
            "law-k:4",
            "mixed-sum",
            "mixed-random:0.5",
        ] {
            let m: SupervisionMode = s.parse().unwrap();
            assert_eq!(m.to_string(), s);
        }
        assert!("law-k:0".parse::<SupervisionMode>().is_err());
        assert!("mixed-random:1.5".parse::<SupervisionMode>().is_err());
        assert!("teleport".parse::<SupervisionMode>().is_err());
    }
}
