//! Browser demo: a shelf episode driven by the hybrid planner or by hand.

use shelf_search::environment::{sample_scenario, EnvConfig, Environment, Terminal, TaskParameterization};
use shelf_search::heuristic::{Heuristic, ScriptedHeuristic};
use shelf_search::observation::RASTER_SIZE;
use shelf_search::physics::Action;
use shelf_search::planner::{hybrid_plan, HybridMode, PlannerConfig, ShelfSim};
use wasm_bindgen::prelude::*;

#[wasm_bindgen]
pub struct Demo {
    env: Environment,
    heuristic: ScriptedHeuristic,
    seed: u64,
    total_reward: f64,
    last_roots: Vec<(usize, usize, f64)>,
}

#[wasm_bindgen]
impl Demo {
    /// New episode with `min..=max` obstacles.
    #[wasm_bindgen(constructor)]
    pub fn new(min_obstacles: usize, max_obstacles: usize, seed: u64) -> Result<Demo, JsError> {
        let scenario = sample_scenario(&TaskParameterization::obstacles(min_obstacles, max_obstacles), seed)?;
        let env = Environment::new(&scenario, EnvConfig::default(), seed)?;
        Ok(Demo {
            env,
            heuristic: ScriptedHeuristic::default(),
            seed,
            total_reward: 0.0,
            last_roots: Vec::new(),
        })
    }

    pub fn size(&self) -> usize {
        RASTER_SIZE
    }

    /// Observation as RGBA bytes, optionally blended with the heat map in red.
    pub fn rgba(&self, heatmap: bool) -> Result<Vec<u8>, JsError> {
        let raster = self.env.observation().raster();
        let heat = if heatmap {
            Some(self.heuristic.evaluate(self.env.history())?.heatmap)
        } else {
            None
        };
        let mut out = Vec::with_capacity(RASTER_SIZE * RASTER_SIZE * 4);
        for row in 0..RASTER_SIZE {
            for col in 0..RASTER_SIZE {
                let mut c = raster.get(row, col).map(f32::from);
                if let Some(h) = &heat {
                    let a = (h.get(row, col) / h.max().max(1e-6)).clamp(0.0, 1.0) * 0.7;
                    c = [c[0] * (1.0 - a) + 255.0 * a, c[1] * (1.0 - a), c[2] * (1.0 - a)];
                }
                out.extend(c.map(|v| v.round() as u8));
                out.push(255);
            }
        }
        Ok(out)
    }

    /// Root hypotheses of the last planner step as JSON `[[row, col, weight], ...]`.
    pub fn roots(&self) -> String {
        serde_json::to_string(&self.last_roots).expect("plain data")
    }

    /// Plans with hybrid(m, h), executes the chosen action and returns the step as JSON.
    pub fn plan_step(&mut self, m: usize, h: usize) -> Result<String, JsError> {
        let config = self.env.config();
        let sim = ShelfSim {
            physics: config.physics,
            reward: config.reward,
            priors: self.env.priors().clone(),
        };
        let planner = PlannerConfig {
            m,
            h,
            gamma: config.reward.gamma,
            parallel: false,
            ..PlannerConfig::default()
        };
        let seed = self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ self.env.steps() as u64;
        let plan = hybrid_plan(&sim, self.env.history(), &planner, &self.heuristic, seed, HybridMode::AllRoots)?;
        self.last_roots = plan
            .roots
            .iter()
            .filter_map(|r| r.peak_pixel.map(|(row, col)| (row, col, r.weight)))
            .collect();
        self.execute(plan.action)
    }

    /// Executes a hand-picked action (metres, radians, grip command).
    pub fn manual_step(&mut self, dx: f64, dy: f64, dtheta: f64, dgrip: f64) -> Result<String, JsError> {
        self.last_roots.clear();
        self.execute(Action::new(dx, dy, dtheta, dgrip))
    }

    pub fn steps(&self) -> usize {
        self.env.steps()
    }

    pub fn done(&self) -> bool {
        self.env.terminal().is_terminal()
    }

    pub fn status(&self) -> String {
        self.env.terminal().as_str().to_string()
    }
}

impl Demo {
    fn execute(&mut self, action: Action) -> Result<String, JsError> {
        if self.done() {
            return Err(JsError::new("episode is over"));
        }
        let limits = self.env.config().physics.limits;
        let out = self.env.step(&action)?;
        self.total_reward += out.reward;
        let a = action.clamped(&limits);
        Ok(serde_json::json!({
            "step": self.env.steps(),
            "action": [a.dx, a.dy, a.dtheta, a.dgrip],
            "reward": out.reward,
            "total_reward": self.total_reward,
            "terminal": out.terminal.as_str(),
            "target_visible": out.observation.target().is_some(),
            "retrieved": out.terminal == Terminal::Retrieved,
        })
        .to_string())
    }
}
