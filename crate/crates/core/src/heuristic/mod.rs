//! The three-headed heuristic: policy π(·|ō), value V(ō) and target heat map
//! ŷ(ō), evaluated on a full observation history.

mod protocol;
mod remote;
mod scripted;

pub use protocol::{decode_heatmap, encode_heatmap, Request, Response, PROTOCOL_VERSION};
pub use remote::{Endpoint, RemoteConfig, RemoteHeuristic};
pub use scripted::{ScriptedHeuristic, ScriptedParams};

use crate::observation::{History, ANCHOR_COL, ANCHOR_ROW, RASTER_SIZE};
use crate::physics::{Action, ActionLimits};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::str::FromStr;

pub const HEATMAP_SIZE: usize = RASTER_SIZE;
pub const HEATMAP_CELLS: usize = HEATMAP_SIZE * HEATMAP_SIZE;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum HeuristicError {
    #[error("heuristic service unavailable: {0}")]
    RemoteUnavailable(String),
    #[error("heuristic called with an empty history")]
    EmptyHistory,
}

/// Diagonal Gaussian over `(dx, dy, dtheta, dgrip)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionDistribution {
    pub mean: [f64; 4],
    pub std: [f64; 4],
}

impl ActionDistribution {
    /// Mean with every channel clamped to its cap.
    pub fn squashed_mean(&self, limits: &ActionLimits) -> Action {
        Action::from_array(self.mean).clamped(limits)
    }

    /// Unsquashed Gaussian draw.
    pub fn sample_raw(&self, rng: &mut impl Rng) -> [f64; 4] {
        let mut out = [0.0; 4];
        for (i, v) in out.iter_mut().enumerate() {
            let n: f64 = StandardNormal.sample(rng);
            *v = self.mean[i] + self.std[i].max(0.0) * n;
        }
        out
    }

    pub fn is_valid(&self) -> bool {
        self.mean.iter().all(|v| v.is_finite()) && self.std.iter().all(|v| v.is_finite() && *v > 0.0)
    }
}

/// Gaussian draw around the squashed mean, clamped to the caps.
pub fn sample_action(dist: &ActionDistribution, limits: &ActionLimits, rng: &mut impl Rng) -> Action {
    let centered = ActionDistribution {
        mean: dist.squashed_mean(limits).to_array(),
        std: dist.std,
    };
    Action::from_array(centered.sample_raw(rng)).clamped(limits)
}

/// Per-pixel target likelihood in the robot-centric raster frame.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatMap {
    values: Vec<f32>,
}

impl HeatMap {
    pub fn filled(v: f32) -> Self {
        Self {
            values: vec![v; HEATMAP_CELLS],
        }
    }

    /// Values are clamped into [0, 1]; NaN becomes 0.
    pub fn from_values(values: Vec<f32>) -> Option<Self> {
        (values.len() == HEATMAP_CELLS).then(|| Self {
            values: values
                .into_iter()
                .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
                .collect(),
        })
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * HEATMAP_SIZE + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f32) {
        self.values[row * HEATMAP_SIZE + col] = v.clamp(0.0, 1.0);
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(0.0, f32::max)
    }

    /// Maximum cell; ties go to the cell nearest the gripper anchor, then
    /// the smallest row and column.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = (0usize, 0usize);
        let mut key = (f32::MIN, usize::MAX);
        for row in 0..HEATMAP_SIZE {
            for col in 0..HEATMAP_SIZE {
                let v = self.get(row, col);
                let d = row.abs_diff(ANCHOR_ROW).pow(2) + col.abs_diff(ANCHOR_COL).pow(2);
                if v > key.0 || (v == key.0 && d < key.1) {
                    key = (v, d);
                    best = (row, col);
                }
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeuristicOutput {
    pub policy: ActionDistribution,
    pub value: f64,
    pub heatmap: HeatMap,
}

/// History in, outputs out. Implementations must be pure functions of the
/// history and may be called concurrently.
pub trait Heuristic<O>: Send + Sync {
    fn evaluate(&self, history: &History<O>) -> Result<HeuristicOutput, HeuristicError>;
}

impl<O, H: Heuristic<O> + ?Sized> Heuristic<O> for std::sync::Arc<H> {
    fn evaluate(&self, history: &History<O>) -> Result<HeuristicOutput, HeuristicError> {
        (**self).evaluate(history)
    }
}

impl<O, H: Heuristic<O> + ?Sized> Heuristic<O> for Box<H> {
    fn evaluate(&self, history: &History<O>) -> Result<HeuristicOutput, HeuristicError> {
        (**self).evaluate(history)
    }
}

/// Heuristic selection as written on the command line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum HeuristicSpec {
    Scripted,
    /// Scripted heuristic without the generative head.
    ScriptedNoHeatmap,
    Remote(String),
    Stdio(String),
}

impl std::fmt::Display for HeuristicSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HeuristicSpec::Scripted => write!(f, "scripted"),
            HeuristicSpec::ScriptedNoHeatmap => write!(f, "scripted-noheatmap"),
            HeuristicSpec::Remote(a) => write!(f, "remote:{a}"),
            HeuristicSpec::Stdio(c) => write!(f, "stdio:{c}"),
        }
    }
}

impl FromStr for HeuristicSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "scripted" => Ok(HeuristicSpec::Scripted),
            "scripted-noheatmap" => Ok(HeuristicSpec::ScriptedNoHeatmap),
            _ => {
                if let Some(addr) = s.strip_prefix("remote:") {
                    if addr.rsplit_once(':').is_some_and(|(h, p)| !h.is_empty() && p.parse::<u16>().is_ok()) {
                        return Ok(HeuristicSpec::Remote(addr.to_string()));
                    }
                    return Err(format!("expected remote:HOST:PORT, got `{s}`"));
                }
                if let Some(cmd) = s.strip_prefix("stdio:") {
                    if !cmd.trim().is_empty() {
                        return Ok(HeuristicSpec::Stdio(cmd.to_string()));
                    }
                }
                Err(format!("unknown heuristic `{s}` (scripted, scripted-noheatmap, remote:HOST:PORT, stdio:COMMAND)"))
            }
        }
    }
}

impl From<HeuristicSpec> for String {
    fn from(h: HeuristicSpec) -> String {
        h.to_string()
    }
}

impl TryFrom<String> for HeuristicSpec {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}
