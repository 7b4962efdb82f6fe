//! Language-aligned waypoint (LAW) supervision for instruction-following
//! navigation on occupancy-grid worlds.
//!
//! An agent with a range scanner follows symbolic instructions through
//! synthetic room layouts. It is trained by imitation (teacher forcing, then
//! DAgger) against one of two oracles: the goal oracle steers along the
//! shortest path to the goal, the LAW oracle toward the nearest waypoint of the
//! path the instruction describes. The metric suite scores how closely the
//! resulting trajectories follow that path.

pub mod cli;
pub mod episodes;
pub mod metrics;
pub mod policy;
pub mod refpath;
pub mod sensors;
pub mod trainer;
pub mod worldsim;
