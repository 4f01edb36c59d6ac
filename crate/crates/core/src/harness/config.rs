use std::path::Path;

use rand::seq::index::sample;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::agents::{AgentsConfig, Algorithm};
use crate::env::{EnvConfig, RewardSpec};
use crate::microsim::{BlockEvent, SimConfig};
use crate::roadnet::{build_grid, RoadNetwork};

/// Grid size counted with the boundary ring, so 6 x 6 gives 4 x 4 signals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub rows: usize,
    pub cols: usize,
    pub spacing_m: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            rows: 6,
            cols: 6,
            spacing_m: 200.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub edges: Vec<String>,
    pub start_s: f64,
    pub end_s: f64,
}

/// Closes `count` edges drawn from `candidates` for every episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandomBlocks {
    pub candidates: Vec<String>,
    pub count: usize,
    /// Window start and end; `None` means the middle third of the horizon.
    pub start_s: Option<f64>,
    pub end_s: Option<f64>,
}

impl Default for RandomBlocks {
    fn default() -> Self {
        Self {
            candidates: ["D3C3", "D3D2", "D2C2", "C3C2"].map(String::from).to_vec(),
            count: 4,
            start_s: None,
            end_s: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub name: String,
    pub network: NetworkConfig,
    pub total_vehicles: usize,
    pub horizon_s: f64,
    pub decision_interval_s: f64,
    pub reward: RewardSpec,
    pub block_events: Vec<BlockSpec>,
    pub random_blocks: Option<RandomBlocks>,
    pub algorithm: Algorithm,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub sim: SimConfig,
    pub agents: AgentsConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: "normal".into(),
            network: NetworkConfig::default(),
            total_vehicles: 8000,
            horizon_s: 3600.0,
            decision_interval_s: 5.0,
            reward: RewardSpec::default(),
            block_events: Vec::new(),
            random_blocks: None,
            algorithm: Algorithm::MacLight,
            episodes: 80,
            seeds: (42..=46).collect(),
            sim: SimConfig::default(),
            agents: AgentsConfig::default(),
        }
    }
}

pub const PRESETS: [&str; 3] = ["normal", "peak", "block"];

impl ScenarioConfig {
    /// Built-in scenarios: `normal`, `peak` and `block`.
    pub fn preset(name: &str) -> Result<Self, HarnessError> {
        let base = Self::default();
        let cfg = match name {
            "normal" => base,
            "peak" => Self {
                name: "peak".into(),
                total_vehicles: 10286,
                ..base
            },
            "block" => Self {
                name: "block".into(),
                random_blocks: Some(RandomBlocks::default()),
                ..base
            },
            other => {
                return Err(HarnessError::Config(format!(
                    "unknown preset {other:?}; expected one of {PRESETS:?}"
                )))
            }
        };
        Ok(cfg)
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            decision_interval_s: self.decision_interval_s,
            horizon_s: self.horizon_s,
            reward: self.reward,
        }
    }

    pub fn steps_per_episode(&self) -> usize {
        self.env_config().steps_per_episode()
    }

    pub fn build_network(&self) -> Result<RoadNetwork, HarnessError> {
        build_grid(self.network.rows, self.network.cols, self.network.spacing_m)
            .map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.episodes == 0 {
            return bad("episodes must be at least 1".into());
        }
        if self.total_vehicles == 0 {
            return bad("total_vehicles must be positive".into());
        }
        if !(self.horizon_s > 0.0 && self.decision_interval_s > 0.0) {
            return bad("horizon_s and decision_interval_s must be positive".into());
        }
        let net = self.build_network()?;
        for b in &self.block_events {
            BlockEvent::from_names(&net, &b.edges, b.start_s, b.end_s)
                .map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        if let Some(r) = &self.random_blocks {
            if r.count > r.candidates.len() {
                return bad(format!(
                    "random_blocks.count {} exceeds {} candidates",
                    r.count,
                    r.candidates.len()
                ));
            }
            let (s, e) = self.random_window(r);
            BlockEvent::from_names(&net, &r.candidates, s, e)
                .map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        self.agents
            .ppo
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.agents
            .idqn
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }

    fn random_window(&self, r: &RandomBlocks) -> (f64, f64) {
        (
            r.start_s.unwrap_or(self.horizon_s / 3.0),
            r.end_s.unwrap_or(2.0 * self.horizon_s / 3.0),
        )
    }

    /// Block events for one episode. Random draws depend only on
    /// `(seed, episode)`.
    pub fn blocks_for(
        &self,
        net: &RoadNetwork,
        seed: u64,
        episode: usize,
    ) -> Result<Vec<BlockEvent>, HarnessError> {
        let mut out = Vec::new();
        for b in &self.block_events {
            out.push(
                BlockEvent::from_names(net, &b.edges, b.start_s, b.end_s)
                    .map_err(|e| HarnessError::Config(e.to_string()))?,
            );
        }
        if let Some(r) = &self.random_blocks {
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed ^ (episode as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            );
            let mut picks = sample(&mut rng, r.candidates.len(), r.count).into_vec();
            picks.sort_unstable();
            let names: Vec<&String> = picks.iter().map(|&i| &r.candidates[i]).collect();
            let (s, e) = self.random_window(r);
            out.push(
                BlockEvent::from_names(net, &names, s, e)
                    .map_err(|e| HarnessError::Config(e.to_string()))?,
            );
        }
        Ok(out)
    }
}

/// Reads a TOML or JSON scenario (by extension; TOML otherwise). Missing
/// fields take the `normal` preset values and unknown keys are rejected.
pub fn load_config(path: &Path) -> Result<ScenarioConfig, HarnessError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    let cfg: ScenarioConfig = if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"))
    {
        serde_json::from_str(&text)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?
    } else {
        toml::from_str(&text)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?
    };
    cfg.validate()?;
    Ok(cfg)
}
