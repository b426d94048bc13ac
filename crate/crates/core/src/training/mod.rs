//! Negative ELBO, optimization schedule and the epoch loop.

mod loss;

pub use loss::{
    categorical_nll_var, gaussian_nll, gaussian_nll_var, kl_categorical_uniform, kl_var,
    negative_elbo, LossBreakdown, Objective,
};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalOptions};
use crate::io::Split;
use crate::model::{apply_norm_updates, Batch, Ctx, EdgeSource, Model};
use crate::rng::stream;
use crate::tensor::{gumbel_noise, AdamConfig, AdamState, ParameterStore, Real, StepDecay, Tape};

fn default_decay_factor() -> f64 {
    0.5
}
fn default_decay_period() -> usize {
    200
}
fn default_teacher_forcing() -> usize {
    10
}
fn default_sigma2() -> f64 {
    5e-5
}
fn default_lambda() -> f64 {
    1e3
}
fn default_validate_every() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
    #[serde(default = "default_decay_period")]
    pub decay_period: usize,
    /// Ground truth is fed back every this many frames.
    #[serde(default = "default_teacher_forcing")]
    pub teacher_forcing: usize,
    #[serde(default = "default_sigma2")]
    pub sigma2: f64,
    /// Weight of the state likelihood when states are supervised.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_validate_every")]
    pub validate_every: usize,
    /// Epochs between checkpoints; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0
            || self.batch_size == 0
            || self.decay_period == 0
            || self.teacher_forcing == 0
        {
            return bad(
                "epochs, batch_size, decay_period and teacher_forcing must be positive".into(),
            );
        }
        if self.validate_every == 0 {
            return bad("validate_every must be positive".into());
        }
        for (name, v) in [
            ("lr_encoder", self.lr_encoder),
            ("lr_decoder", self.lr_decoder),
            ("sigma2", self.sigma2),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!(
                "decay_factor must lie in (0, 1], got {}",
                self.decay_factor
            ));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        Ok(())
    }

    pub fn decay(&self) -> StepDecay {
        StepDecay {
            factor: self.decay_factor,
            period: self.decay_period,
        }
    }
}

/// Parameters selected on validation edge accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct BestModel<F> {
    pub epoch: usize,
    pub edge_accuracy: f64,
    pub params: ParameterStore<F>,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone)]
pub struct TrainState<F> {
    pub model: Model<F>,
    pub adam: AdamState<F>,
    /// Epochs completed.
    pub epoch: usize,
    pub shuffle_rng: ChaCha8Rng,
    pub noise_rng: ChaCha8Rng,
    pub best: Option<BestModel<F>>,
}

impl<F: Real> TrainState<F> {
    pub fn new(model: Model<F>, schedule: &TrainSchedule, seed: u64) -> Self {
        let adam = AdamState::new(
            &model.params,
            AdamConfig::default(),
            schedule.lr_encoder,
            schedule.lr_decoder,
        );
        TrainState {
            model,
            adam,
            epoch: 0,
            shuffle_rng: stream(seed, "shuffle", 0),
            noise_rng: stream(seed, "gumbel", 0),
            best: None,
        }
    }

    /// The validation-selected model, or the current one if none was chosen.
    pub fn selected_model(&self) -> Result<Model<F>> {
        let mut m = self.model.clone();
        if let Some(best) = &self.best {
            m.params.load_values(&best.params)?;
        }
        Ok(m)
    }
}

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nll_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nll_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_acc: Option<f64>,
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub wall_clock_s: f64,
}

/// Called after every logged record and after each completed epoch.
pub trait Observer<F> {
    fn record(&mut self, _rec: &EpochRecord) -> Result<()> {
        Ok(())
    }
    fn epoch_end(&mut self, _state: &TrainState<F>) -> Result<()> {
        Ok(())
    }
}

/// Ignores everything.
pub struct Silent;
impl<F> Observer<F> for Silent {}

/// Collects records in memory.
#[derive(Debug, Default)]
pub struct Collect(pub Vec<EpochRecord>);
impl<F> Observer<F> for Collect {
    fn record(&mut self, rec: &EpochRecord) -> Result<()> {
        self.0.push(rec.clone());
        Ok(())
    }
}

/// One optimization step on a batch; returns the loss before the update.
pub fn train_step<F: Real>(
    state: &mut TrainState<F>,
    schedule: &TrainSchedule,
    batch: &Batch<F>,
) -> Result<LossBreakdown> {
    let model = &state.model;
    let cfg = &model.config;
    let n_noise = batch.size * model.pairs().len() * cfg.num_states * cfg.edge_types;
    let noise: Vec<F> = gumbel_noise(&mut state.noise_rng, n_noise);
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let mut ctx = Ctx::new(&mut tape, &model.params, &bound, true);
    let out = model.forward(
        &mut ctx,
        batch,
        EdgeSource::Sample { noise: &noise },
        schedule.teacher_forcing,
    )?;
    let norm = ctx.take_norm_updates();
    drop(ctx);
    let obj = negative_elbo(
        &mut tape,
        model,
        &out,
        batch,
        schedule.sigma2,
        schedule.lambda,
    )?;
    if !obj.breakdown.total.is_finite() {
        return Err(Error::Diverged { epoch: state.epoch });
    }
    let grads = tape.backward(obj.total)?;
    let params = &mut state.model.params;
    params.zero_grad();
    params.accumulate(&tape, &grads, &bound);
    apply_norm_updates(params, norm);
    state.adam.step(params)?;
    if !params.all_finite() {
        return Err(Error::Diverged { epoch: state.epoch });
    }
    Ok(obj.breakdown)
}

/// Trains until `schedule.epochs` epochs are complete.
pub fn fit<F: Real>(
    state: &mut TrainState<F>,
    schedule: &TrainSchedule,
    train: &Split,
    valid: Option<&Split>,
    observer: &mut dyn Observer<F>,
) -> Result<()> {
    fit_until(state, schedule, train, valid, schedule.epochs, observer)
}

/// Trains until `end` epochs are complete (at most `schedule.epochs`).
///
/// A non-finite loss or parameter returns `Diverged`. The in-memory state is
/// then mid-epoch; the last state handed to the observer is the good one.
pub fn fit_until<F: Real>(
    state: &mut TrainState<F>,
    schedule: &TrainSchedule,
    train: &Split,
    valid: Option<&Split>,
    end: usize,
    observer: &mut dyn Observer<F>,
) -> Result<()> {
    schedule.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }
    let end = end.min(schedule.epochs);
    let started = Instant::now();
    let decay = schedule.decay();
    let mut order: Vec<usize> = (0..train.len()).collect();
    while state.epoch < end {
        let epoch = state.epoch;
        let lr_e = decay.lr_at(schedule.lr_encoder, epoch);
        let lr_d = decay.lr_at(schedule.lr_decoder, epoch);
        state.adam.set_learning_rates(lr_e, lr_d)?;
        order.sort_unstable();
        order.shuffle(&mut state.shuffle_rng);

        let mut sums = [0.0f64; 4];
        let mut supervised = false;
        for chunk in order.chunks(schedule.batch_size) {
            let batch = Batch::from_split(train, chunk);
            let l = train_step(state, schedule, &batch)?;
            let w = chunk.len() as f64;
            sums[0] += w * l.nll_p;
            sums[1] += w * l.nll_s.unwrap_or(0.0);
            supervised |= l.nll_s.is_some();
            sums[2] += w * l.kl;
            sums[3] += w * l.total;
        }
        let n = train.len() as f64;
        state.epoch += 1;
        observer.record(&EpochRecord {
            epoch: state.epoch,
            split: "train".into(),
            nll_p: Some(sums[0] / n),
            nll_s: supervised.then(|| sums[1] / n),
            kl: Some(sums[2] / n),
            total: Some(sums[3] / n),
            edge_acc: None,
            mse: None,
            state_acc: None,
            lr_encoder: lr_e,
            lr_decoder: lr_d,
            wall_clock_s: started.elapsed().as_secs_f64(),
        })?;

        let validate_now =
            state.epoch.is_multiple_of(schedule.validate_every) || state.epoch == schedule.epochs;
        if let (true, Some(v)) = (validate_now, valid.filter(|v| !v.is_empty())) {
            let opts = EvalOptions {
                label: String::new(),
                split: "valid".into(),
                teacher_forcing: schedule.teacher_forcing,
                batch_size: schedule.batch_size,
                world: None,
            };
            let r = evaluate(&state.model, v, &opts)?;
            let acc = r.edge_accuracy.mean;
            if state.best.as_ref().is_none_or(|b| acc > b.edge_accuracy) {
                state.best = Some(BestModel {
                    epoch: state.epoch,
                    edge_accuracy: acc,
                    params: state.model.params.clone(),
                });
            }
            observer.record(&EpochRecord {
                epoch: state.epoch,
                split: "valid".into(),
                nll_p: None,
                nll_s: None,
                kl: None,
                total: None,
                edge_acc: Some(acc),
                mse: Some(r.reconstruction_mse.mean),
                state_acc: r.state_accuracy.map(|s| s.mean),
                lr_encoder: lr_e,
                lr_decoder: lr_d,
                wall_clock_s: started.elapsed().as_secs_f64(),
            })?;
        }
        observer.epoch_end(state)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schedule() -> TrainSchedule {
        serde_json::from_str(
            r#"{"epochs": 10, "batch_size": 8, "lr_encoder": 5e-4, "lr_decoder": 1e-3}"#,
        )
        .unwrap()
    }

    #[test]
    fn defaults_fill_in() {
        let s = schedule();
        assert_eq!(
            (s.decay_factor, s.decay_period, s.teacher_forcing),
            (0.5, 200, 10)
        );
        assert_eq!((s.sigma2, s.lambda), (5e-5, 1e3));
        s.validate().unwrap();
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(serde_json::from_str::<TrainSchedule>(
            r#"{"epochs": 1, "batch_size": 1, "lr_encoder": 1, "lr_decoder": 1, "momentum": 0.9}"#
        )
        .is_err());
        let mut s = schedule();
        s.decay_factor = 1.5;
        assert!(s.validate().is_err());
        let mut s = schedule();
        s.lr_decoder = 0.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn decay_halves_every_period() {
        let d = schedule().decay();
        assert_eq!(d.lr_at(1e-3, 199), 1e-3);
        assert_eq!(d.lr_at(1e-3, 200), 5e-4);
        assert_eq!(d.lr_at(1e-3, 450), 2.5e-4);
    }
}
