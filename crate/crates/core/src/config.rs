//! Experiment configuration: one JSON document per run, plus presets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DecoderKind, EncoderKind, ModelConfig};
use crate::sim::{DataConfig, LinearWorld, Regime, SplitSizes, SpringWorld, WorldSpec};
use crate::training::TrainSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderSpec {
    /// Message MLPs.
    Learned,
    /// Scalar linear message passing, randomly initialized and trained.
    Linear,
    /// Linear message passing frozen at the data's true world parameters.
    Fixed,
}

fn d_hidden() -> usize {
    256
}
fn d_tau() -> f64 {
    0.5
}
fn d_gamma() -> f64 {
    0.1
}
fn d_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub encoder: EncoderKind,
    pub decoder: DecoderSpec,
    /// States the posterior conditions on; defaults to the data's count.
    #[serde(default)]
    pub num_states: Option<usize>,
    #[serde(default = "d_hidden")]
    pub hidden: usize,
    #[serde(default = "d_hidden")]
    pub decoder_hidden: usize,
    #[serde(default = "d_tau")]
    pub tau: f64,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_true")]
    pub batch_norm: bool,
    #[serde(default)]
    pub hard: bool,
    #[serde(default)]
    pub scale_input: bool,
}

impl ModelSpec {
    fn new(encoder: EncoderKind, decoder: DecoderSpec) -> Self {
        ModelSpec {
            encoder,
            decoder,
            num_states: None,
            hidden: d_hidden(),
            decoder_hidden: d_hidden(),
            tau: d_tau(),
            gamma: d_gamma(),
            batch_norm: true,
            hard: false,
            scale_input: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelSpec,
    pub train: TrainSchedule,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        self.model_config()?.validate()
    }

    /// The architecture implied by the model spec and the data shapes.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let d = &self.data;
        let m = &self.model;
        let decoder = match (m.decoder, &d.world) {
            (DecoderSpec::Learned, _) => DecoderKind::Learned,
            (DecoderSpec::Linear, WorldSpec::Linear(_)) => DecoderKind::Linear {
                init: None,
                trainable: true,
            },
            (DecoderSpec::Fixed, WorldSpec::Linear(w)) => DecoderKind::Linear {
                init: Some(w.clone()),
                trainable: false,
            },
            (_, WorldSpec::Springs(_)) => {
                return Err(Error::Config(
                    "linear decoders apply to linear data only".into(),
                ));
            }
        };
        Ok(ModelConfig {
            encoder: m.encoder,
            decoder,
            hidden: m.hidden,
            decoder_hidden: m.decoder_hidden,
            num_states: m.num_states.unwrap_or(d.num_states),
            state_classes: d.num_states,
            edge_types: d.edge_types(),
            dims: d.world.dims(),
            num_objects: d.num_objects,
            num_steps: d.num_steps,
            regime: d.regime,
            tau: m.tau,
            gamma: m.gamma,
            batch_norm: m.batch_norm,
            hard: m.hard,
            scale_input: m.scale_input,
        })
    }

    /// Smaller dataset, narrower networks and shorter training for a single
    /// CPU. Small batches, a softer relaxation and RMS input scaling make up
    /// for the fewer updates.
    pub fn desk(mut self) -> Self {
        self.data.sizes = SplitSizes {
            train: 1000,
            valid: 200,
            test: 200,
        };
        self.train.epochs = match self.data.world {
            WorldSpec::Linear(_) => 300,
            WorldSpec::Springs(_) => 200,
        };
        self.train.batch_size = 8;
        self.model.hidden = 64;
        self.model.decoder_hidden = 64;
        self.model.scale_input = true;
        self.model.tau = 4.0;
        self.name.push_str("-desk");
        self
    }
}

fn linear_data(num_states: usize, regime: Regime) -> DataConfig {
    DataConfig {
        world: WorldSpec::Linear(LinearWorld::default()),
        regime,
        num_objects: 3,
        num_steps: 40,
        num_states,
        edge_prob: 0.5,
        sizes: SplitSizes {
            train: 10_000,
            valid: 2_000,
            test: 2_000,
        },
        state_period: (regime == Regime::ObservedIndependent).then_some(10),
        drop_diverged: false,
    }
}

fn springs_data(num_states: usize, regime: Regime) -> DataConfig {
    DataConfig {
        world: WorldSpec::Springs(SpringWorld::default()),
        regime,
        num_objects: 5,
        num_steps: 80,
        num_states,
        edge_prob: 0.5,
        sizes: SplitSizes {
            train: 10_000,
            valid: 2_000,
            test: 2_000,
        },
        state_period: (regime == Regime::ObservedIndependent).then_some(10),
        drop_diverged: false,
    }
}

fn linear_schedule() -> TrainSchedule {
    TrainSchedule {
        epochs: 1000,
        batch_size: 128,
        lr_encoder: 5e-4,
        lr_decoder: 1e-3,
        decay_factor: 0.5,
        decay_period: 200,
        teacher_forcing: 10,
        sigma2: 5e-5,
        lambda: 1e3,
        validate_every: 10,
        checkpoint_every: 50,
    }
}

fn springs_schedule() -> TrainSchedule {
    TrainSchedule {
        epochs: 500,
        lr_decoder: 5e-4,
        ..linear_schedule()
    }
}

/// Names accepted by [`preset`].
pub const PRESETS: &[&str] = &[
    "linear-k1",
    "linear-k2",
    "linear-k2-temporal",
    "linear-k2-acd",
    "linear-k2-fixed",
    "linear-hidden",
    "springs-k1",
    "springs-k2",
    "springs-k3",
    "springs-k4",
    "springs-k5",
    "springs-k6",
    "springs-k7",
    "springs-k8",
    "springs-wall",
    "springs-hidden",
];

/// Full-scale settings for each experiment.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    use DecoderSpec::*;
    use EncoderKind::*;
    let exp = |data: DataConfig, model: ModelSpec, train: TrainSchedule| ExperimentConfig {
        name: name.to_string(),
        seed: 42,
        data,
        model,
        train,
    };
    let obs = Regime::ObservedIndependent;
    let springs_model = || ModelSpec {
        gamma: 0.05,
        ..ModelSpec::new(Static, Learned)
    };
    Ok(match name {
        "linear-k1" => exp(
            linear_data(1, obs),
            ModelSpec::new(Static, Linear),
            linear_schedule(),
        ),
        "linear-k2" => exp(
            linear_data(2, obs),
            ModelSpec::new(Static, Linear),
            linear_schedule(),
        ),
        "linear-k2-temporal" => exp(
            linear_data(2, obs),
            ModelSpec::new(Temporal, Linear),
            linear_schedule(),
        ),
        "linear-k2-acd" => exp(
            linear_data(2, obs),
            ModelSpec {
                num_states: Some(1),
                ..ModelSpec::new(Static, Linear)
            },
            linear_schedule(),
        ),
        "linear-k2-fixed" => exp(
            linear_data(2, obs),
            ModelSpec::new(Static, Fixed),
            linear_schedule(),
        ),
        "linear-hidden" => exp(
            linear_data(2, Regime::Hidden),
            ModelSpec::new(Static, Linear),
            linear_schedule(),
        ),
        "springs-wall" => exp(
            springs_data(2, Regime::ObservedDependent),
            springs_model(),
            springs_schedule(),
        ),
        "springs-hidden" => exp(
            springs_data(2, Regime::Hidden),
            springs_model(),
            springs_schedule(),
        ),
        _ => match name
            .strip_prefix("springs-k")
            .and_then(|k| k.parse::<usize>().ok())
        {
            Some(k @ 1..=8) => exp(springs_data(k, obs), springs_model(), springs_schedule()),
            _ => {
                return Err(Error::Config(format!(
                    "unknown preset `{name}`; known: {}",
                    PRESETS.join(", ")
                )))
            }
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates() {
        for name in PRESETS {
            let cfg = preset(name).unwrap();
            cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
            cfg.clone().desk().validate().unwrap();
            assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        }
        assert!(preset("springs-k9").is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v: serde_json::Value =
            serde_json::from_str(&preset("linear-k2").unwrap().to_json()).unwrap();
        v["model"]["dropout"] = 0.1.into();
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn linear_hyperparameters() {
        let c = preset("linear-k2").unwrap();
        assert_eq!(
            (c.train.lr_encoder, c.train.lr_decoder, c.train.batch_size),
            (5e-4, 1e-3, 128)
        );
        assert_eq!((c.data.num_objects, c.data.num_steps), (3, 40));
        let s = preset("springs-k3").unwrap();
        assert_eq!(
            (s.train.epochs, s.train.lr_decoder, s.model.gamma),
            (500, 5e-4, 0.05)
        );
    }

    #[test]
    fn fixed_decoder_freezes_truth() {
        let m = preset("linear-k2-fixed").unwrap().model_config().unwrap();
        assert_eq!(
            m.decoder,
            DecoderKind::Linear {
                init: Some(LinearWorld::default()),
                trainable: false
            }
        );
        let mut bad = preset("springs-k2").unwrap();
        bad.model.decoder = DecoderSpec::Fixed;
        assert!(bad.validate().is_err());
    }
}
