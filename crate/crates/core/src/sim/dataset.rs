use serde::{Deserialize, Serialize};

use super::linear::{cyclic_schedule, iid_schedule, linear_rollout, LinearStates, LinearWorld};
use super::springs::{spring_rollout, SpringRegime, SpringWorld};
use super::{sample_state_graph, Regime, TimeSeriesSample};
use crate::error::{Error, Result};
use crate::io::{Dataset, Manifest, Split, FORMAT_VERSION};
use crate::rng::{derive_seed, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Linear,
    Springs,
}

/// World constants, tagged by scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scenario", rename_all = "snake_case", deny_unknown_fields)]
pub enum WorldSpec {
    Linear(LinearWorld),
    Springs(SpringWorld),
}

impl WorldSpec {
    pub fn scenario(&self) -> Scenario {
        match self {
            WorldSpec::Linear(_) => Scenario::Linear,
            WorldSpec::Springs(_) => Scenario::Springs,
        }
    }

    pub fn dims(&self) -> usize {
        match self {
            WorldSpec::Linear(_) => 1,
            WorldSpec::Springs(_) => 4,
        }
    }

    pub fn edge_types(&self) -> usize {
        match self {
            WorldSpec::Linear(w) => w.beta.len(),
            WorldSpec::Springs(w) => w.delta.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

/// Everything needed to regenerate a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub world: WorldSpec,
    pub regime: Regime,
    pub num_objects: usize,
    pub num_steps: usize,
    pub num_states: usize,
    pub edge_prob: f64,
    pub sizes: SplitSizes,
    /// Frames between state changes for cyclic schedules. For linear data
    /// `None` means states are drawn independently every frame.
    #[serde(default)]
    pub state_period: Option<usize>,
    /// Replace samples that trip the overflow guard with fresh draws.
    #[serde(default)]
    pub drop_diverged: bool,
}

impl DataConfig {
    pub fn edge_types(&self) -> usize {
        self.world.edge_types()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_objects < 2 {
            return bad(format!(
                "num_objects must be >= 2, got {}",
                self.num_objects
            ));
        }
        if self.num_steps < 2 {
            return bad(format!("num_steps must be >= 2, got {}", self.num_steps));
        }
        if self.num_states == 0 || self.num_states > 255 {
            return bad(format!(
                "num_states must be in 1..=255, got {}",
                self.num_states
            ));
        }
        if self.edge_types() < 2 {
            return bad("need at least two edge types".into());
        }
        if !(0.0..=1.0).contains(&self.edge_prob) {
            return bad(format!(
                "edge_prob must lie in [0,1], got {}",
                self.edge_prob
            ));
        }
        if self.state_period == Some(0) {
            return bad("state_period must be positive".into());
        }
        match (&self.world, self.regime) {
            (WorldSpec::Linear(w), r) => {
                w.validate()?;
                if r == Regime::ObservedDependent {
                    return bad("linear data has no event-driven state regime".into());
                }
            }
            (WorldSpec::Springs(w), _) => w.validate()?,
        }
        if self.regime == Regime::Hidden && self.num_states != 2 {
            return bad("hidden regimes use a two-state rule".into());
        }
        Ok(())
    }

    fn spring_regime(&self) -> SpringRegime {
        match self.regime {
            Regime::ObservedIndependent => SpringRegime::Cyclic {
                period: self.state_period.unwrap_or(10),
            },
            Regime::ObservedDependent => SpringRegime::WallEvent,
            Regime::Hidden => SpringRegime::HiddenLocation,
        }
    }

    /// Simulates sample `index` of a split from its own RNG stream.
    pub fn simulate(&self, seed: u64, split: &str, index: u64) -> Result<TimeSeriesSample> {
        let mut rng = stream(seed, &format!("data/{split}"), index);
        let graph = sample_state_graph(
            self.num_objects,
            self.num_states,
            self.edge_types(),
            self.edge_prob,
            &mut rng,
        )?;
        match &self.world {
            WorldSpec::Linear(world) => {
                let sched;
                let states = match self.regime {
                    Regime::Hidden => LinearStates::SignHidden,
                    _ => {
                        sched = match self.state_period {
                            Some(period) => cyclic_schedule(
                                self.num_steps,
                                self.num_objects,
                                self.num_states,
                                period,
                            ),
                            None => iid_schedule(
                                self.num_steps,
                                self.num_objects,
                                self.num_states,
                                &mut rng,
                            ),
                        };
                        LinearStates::Provided(&sched)
                    }
                };
                linear_rollout(&graph, world, None, self.num_steps, states, &mut rng)
            }
            WorldSpec::Springs(world) => spring_rollout(
                &graph,
                world,
                None,
                self.num_steps,
                self.spring_regime(),
                &mut rng,
            ),
        }
    }
}

/// Generates `count` samples for one split.
pub fn generate_split(
    cfg: &DataConfig,
    seed: u64,
    split: &str,
    count: usize,
) -> Result<Vec<TimeSeriesSample>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(count);
    let mut index = 0u64;
    let max_draws = (count as u64 + 1) * 100;
    while out.len() < count {
        if index >= max_draws {
            return Err(Error::Config(format!(
                "only {} of {count} `{split}` samples stayed within the overflow guard",
                out.len()
            )));
        }
        let sample = cfg.simulate(seed, split, index)?;
        index += 1;
        if cfg.drop_diverged && sample.diverged {
            continue;
        }
        out.push(sample);
    }
    Ok(out)
}

/// Generates all three splits from disjoint RNG streams.
pub fn generate_dataset(cfg: &DataConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let make = |name: &str, count: usize| -> Result<Split> {
        let samples = generate_split(cfg, seed, name, count)?;
        Split::from_samples(cfg, &samples)
    };
    let train = make("train", cfg.sizes.train)?;
    let valid = make("valid", cfg.sizes.valid)?;
    let test = make("test", cfg.sizes.test)?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: cfg.clone(),
        seed,
        split_seeds: ["train", "valid", "test"]
            .iter()
            .map(|s| (s.to_string(), derive_seed(seed, &format!("data/{s}"), 0)))
            .collect(),
        dims: cfg.world.dims(),
        edge_types: cfg.edge_types(),
        diverged: [&train, &valid, &test]
            .iter()
            .map(|s| s.diverged.iter().filter(|&&d| d != 0).count())
            .sum(),
    };
    Ok(Dataset {
        manifest,
        train,
        valid,
        test,
    })
}
