use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{LinearWorld, Regime};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Whole-sequence node embeddings followed by one GNN pass.
    Static,
    /// Per-step GNN on consecutive frames, then a 1D CNN over time.
    Temporal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DecoderKind {
    /// Per-edge-type message MLPs and an MLP update.
    Learned,
    /// `p_j' = α p_j + Σ_i Σ_e w_e β_e p_i` with scalar `α`, `β`.
    ///
    /// `init: None` draws `α ~ U(0.9, 1.1)` and `β_e ~ U(0, 0.1)`.
    Linear {
        #[serde(default)]
        init: Option<LinearWorld>,
        #[serde(default = "yes")]
        trainable: bool,
    },
}

fn yes() -> bool {
    true
}

/// Fully resolved architecture; stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    pub decoder: DecoderKind,
    /// Width of every encoder block.
    pub hidden: usize,
    /// Width of the message and update networks of the learned decoder.
    pub decoder_hidden: usize,
    /// States the posterior is conditioned on (1 for the stationary baseline).
    pub num_states: usize,
    /// States present in the data.
    pub state_classes: usize,
    pub edge_types: usize,
    pub dims: usize,
    pub num_objects: usize,
    pub num_steps: usize,
    pub regime: Regime,
    pub tau: f64,
    pub gamma: f64,
    pub batch_norm: bool,
    /// Straight-through one-hot samples instead of relaxed ones.
    #[serde(default)]
    pub hard: bool,
    /// Divide each sequence's encoder input by its root mean square.
    #[serde(default)]
    pub scale_input: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden == 0 || self.decoder_hidden == 0 {
            return bad("hidden widths must be positive".into());
        }
        if !(self.tau > 0.0) || !(self.gamma > 0.0) {
            return bad(format!(
                "tau and gamma must be positive, got {} and {}",
                self.tau, self.gamma
            ));
        }
        if self.edge_types < 2 || self.dims == 0 || self.num_objects < 2 {
            return bad("need >= 2 edge types, >= 1 dim and >= 2 objects".into());
        }
        if self.num_states == 0 || self.state_classes == 0 {
            return bad("state counts must be positive".into());
        }
        if self.num_steps < 2 {
            return bad("sequences need at least 2 frames".into());
        }
        if self.encoder == EncoderKind::Temporal && self.num_steps < 6 {
            return bad("the temporal encoder needs at least 6 frames".into());
        }
        if self.regime.states_observed()
            && self.num_states > 1
            && self.num_states != self.state_classes
        {
            return bad(format!(
                "model has {} states but the data has {}; use 1 for the stationary baseline",
                self.num_states, self.state_classes
            ));
        }
        if let DecoderKind::Linear { init: Some(w), .. } = &self.decoder {
            w.validate()?;
            if w.beta.len() != self.edge_types {
                return bad(format!(
                    "linear init has {} edge weights, model has {} edge types",
                    w.beta.len(),
                    self.edge_types
                ));
            }
        }
        Ok(())
    }

    /// Features per object and frame seen by the encoder.
    pub fn encoder_features(&self) -> usize {
        self.dims
            + if self.encoder_sees_states() {
                self.state_classes
            } else {
                0
            }
    }

    pub fn encoder_sees_states(&self) -> bool {
        self.regime.states_observed() && self.num_states > 1
    }

    /// Features per object and frame seen by the decoder.
    pub fn decoder_features(&self) -> usize {
        self.dims
            + if self.decoder_sees_states() {
                self.state_classes
            } else {
                0
            }
    }

    pub fn decoder_sees_states(&self) -> bool {
        self.regime.states_observed() && self.state_classes > 1
    }

    /// Next-state head supervised against observed, event-driven states.
    pub fn predicts_states(&self) -> bool {
        self.regime == Regime::ObservedDependent
    }

    /// Latent state head whose marginal weights the edges.
    pub fn infers_states(&self) -> bool {
        self.regime == Regime::Hidden && self.num_states > 1
    }
}
