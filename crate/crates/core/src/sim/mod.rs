//! Conditionally stationary data generators.
//!
//! Two worlds are provided: a linear message-passing system (a first-order
//! vector autoregression whose transition matrix depends on object states) and
//! a box of particles joined by directed springs. In both, the influence of
//! object `j` on object `i` at time `t` is the edge type
//! `graph.query(j, i, s_j^t)`: the source's state picks the active graph.

mod dataset;
mod graph;
mod linear;
mod springs;

pub use dataset::{generate_dataset, generate_split, DataConfig, Scenario, SplitSizes, WorldSpec};
pub use graph::{sample_state_graph, StateGraph};
pub use linear::{
    cyclic_schedule, iid_schedule, linear_rollout, linear_step, var_transition_matrix,
    LinearStates, LinearWorld, Stability, OVERFLOW_GUARD,
};
pub use springs::{
    initial_conditions, spring_rollout, spring_step, SpringRegime, SpringState, SpringWorld,
};

use serde::{Deserialize, Serialize};

/// How the object states relate to the observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// States are given and evolve independently of the dynamics.
    ObservedIndependent,
    /// States are given but driven by events in the dynamics; the decoder
    /// learns to predict them.
    ObservedDependent,
    /// States are a deterministic function of the observations and never
    /// shown to the model.
    Hidden,
}

impl Regime {
    pub fn states_observed(self) -> bool {
        !matches!(self, Regime::Hidden)
    }
}

/// One simulated sequence with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesSample {
    pub num_steps: usize,
    pub num_objects: usize,
    pub dims: usize,
    /// `[T × N × D]`, row-major.
    pub p: Vec<f64>,
    /// `[T × N]`, row-major.
    pub s: Vec<u8>,
    pub graph: StateGraph,
    pub regime: Regime,
    /// Set when a value left the overflow guard.
    pub diverged: bool,
}

impl TimeSeriesSample {
    pub fn frame(&self, t: usize) -> &[f64] {
        let w = self.num_objects * self.dims;
        &self.p[t * w..(t + 1) * w]
    }

    pub fn states(&self, t: usize) -> &[u8] {
        &self.s[t * self.num_objects..(t + 1) * self.num_objects]
    }
}
