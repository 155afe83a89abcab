//! Occlusion-aware object search and retrieval on a simulated 2D shelf.
//!
//! The crate contains the shelf simulator ([`physics`], [`environment`]), the
//! top-down observation model ([`observation`]), the three-headed heuristic
//! interface ([`heuristic`]), the heat-map weighted receding-horizon planner
//! ([`planner`]), comparison baselines ([`baselines`]) and the experiment
//! runner ([`harness`]).

pub mod geometry;
pub mod physics;
pub mod observation;
pub mod environment;
pub mod heuristic;
pub mod planner;
pub mod baselines;
pub mod harness;
pub mod plot;
