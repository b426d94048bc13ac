//! Checkpoints: one JSON metadata line, then tensor records for parameters,
//! Adam moments and the validation-selected parameters.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::records::{read_all_records, write_record, Record, RecordData};
use super::FORMAT_VERSION;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::rng::RngState;
use crate::tensor::{AdamConfig, AdamState, ParameterStore, Real};
use crate::training::{BestModel, TrainSchedule, TrainState};

const KIND: &str = "sdci-checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AdamMeta {
    config: AdamConfig,
    step: u64,
    lr_encoder: f64,
    lr_decoder: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BestMeta {
    epoch: usize,
    edge_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    kind: String,
    dtype: String,
    seed: u64,
    epoch: usize,
    model: ModelConfig,
    schedule: TrainSchedule,
    adam: AdamMeta,
    shuffle_rng: RngState,
    noise_rng: RngState,
    best: Option<BestMeta>,
}

/// A training state together with the schedule and seed that produced it.
#[derive(Debug, Clone)]
pub struct Checkpoint<F> {
    pub schedule: TrainSchedule,
    pub seed: u64,
    pub state: TrainState<F>,
}

fn real_record<F: Real>(name: String, shape: &[usize], data: &[F]) -> Record {
    Record {
        name,
        shape: shape.to_vec(),
        data: RecordData::from_real(data),
    }
}

/// Writes atomically: a sibling temporary file is renamed over `path`.
pub fn write_checkpoint<F: Real>(
    path: &Path,
    state: &TrainState<F>,
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<()> {
    let meta = Meta {
        format_version: FORMAT_VERSION,
        kind: KIND.into(),
        dtype: F::DTYPE.into(),
        seed,
        epoch: state.epoch,
        model: state.model.config.clone(),
        schedule: schedule.clone(),
        adam: AdamMeta {
            config: state.adam.config,
            step: state.adam.step,
            lr_encoder: state.adam.lr_encoder,
            lr_decoder: state.adam.lr_decoder,
        },
        shuffle_rng: RngState::capture(&state.shuffle_rng),
        noise_rng: RngState::capture(&state.noise_rng),
        best: state.best.as_ref().map(|b| BestMeta {
            epoch: b.epoch,
            edge_accuracy: b.edge_accuracy,
        }),
    };
    let tmp = path.with_extension("tmp");
    let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(&tmp, e);
    serde_json::to_writer(&mut w, &meta)?;
    w.write_all(b"\n").map_err(io)?;
    let params = &state.model.params;
    let (m, v) = state.adam.moments();
    for (idx, (name, t, _)) in params.iter().enumerate() {
        write_record(
            &mut w,
            &real_record(format!("param/{name}"), t.shape(), t.data()),
        )
        .map_err(io)?;
        write_record(
            &mut w,
            &real_record(format!("adam_m/{name}"), t.shape(), &m[idx]),
        )
        .map_err(io)?;
        write_record(
            &mut w,
            &real_record(format!("adam_v/{name}"), t.shape(), &v[idx]),
        )
        .map_err(io)?;
    }
    if let Some(best) = &state.best {
        for (name, t, _) in best.params.iter() {
            write_record(&mut w, &Record::from_tensor(format!("best/{name}"), t)).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Records(HashMap<String, Record>);

impl Records {
    fn take<F: Real>(&mut self, name: &str, shape: &[usize]) -> Result<Vec<F>> {
        let rec = self
            .0
            .remove(name)
            .ok_or_else(|| Error::MissingTensor(name.into()))?;
        if rec.shape != shape {
            return Err(Error::Corrupt {
                what: format!("checkpoint tensor `{name}`"),
                detail: format!(
                    "stored shape {:?} but the model config implies {:?}",
                    rec.shape, shape
                ),
            });
        }
        rec.data.to_real(name)
    }

    fn fill<F: Real>(&mut self, prefix: &str, store: &mut ParameterStore<F>) -> Result<()> {
        for id in store.ids().collect::<Vec<_>>() {
            let name = format!("{prefix}/{}", store.name(id));
            let shape = store.get(id).shape().to_vec();
            let data = self.take::<F>(&name, &shape)?;
            store.get_mut(id).data_mut().copy_from_slice(&data);
        }
        Ok(())
    }
}

pub fn read_checkpoint<F: Real>(path: &Path) -> Result<Checkpoint<F>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Corrupt {
        what: "checkpoint header".into(),
        detail: e.to_string(),
    })?;
    if raw.get("kind").and_then(|v| v.as_str()) != Some(KIND) {
        return Err(Error::Corrupt {
            what: "checkpoint header".into(),
            detail: format!("{} is not a checkpoint", path.display()),
        });
    }
    let found = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .unwrap_or(0);
    if found > u64::from(FORMAT_VERSION) {
        return Err(Error::UnsupportedVersion {
            what: "checkpoint".into(),
            found: found.min(u64::from(u32::MAX)) as u32,
            supported: FORMAT_VERSION,
        });
    }
    let meta: Meta = serde_json::from_value(raw)?;
    if meta.dtype != F::DTYPE {
        return Err(Error::Corrupt {
            what: "checkpoint header".into(),
            detail: format!("stored as {}, loading as {}", meta.dtype, F::DTYPE),
        });
    }
    meta.schedule.validate()?;

    let mut records = HashMap::new();
    for rec in read_all_records(&mut r, "checkpoint")? {
        if records.contains_key(&rec.name) {
            return Err(Error::Corrupt {
                what: "checkpoint".into(),
                detail: format!("tensor `{}` appears twice", rec.name),
            });
        }
        records.insert(rec.name.clone(), rec);
    }
    let mut records = Records(records);

    let mut model = Model::<F>::new(meta.model.clone(), meta.seed)?;
    records.fill("param", &mut model.params)?;
    let (mut m, mut v) = (Vec::new(), Vec::new());
    for id in model.params.ids() {
        let name = model.params.name(id);
        let shape = model.params.get(id).shape();
        m.push(records.take::<F>(&format!("adam_m/{name}"), shape)?);
        v.push(records.take::<F>(&format!("adam_v/{name}"), shape)?);
    }
    let adam = AdamState::from_parts(
        meta.adam.config,
        meta.adam.step,
        meta.adam.lr_encoder,
        meta.adam.lr_decoder,
        m,
        v,
    );
    let best = match &meta.best {
        Some(b) => {
            let mut params = model.params.clone();
            records.fill("best", &mut params)?;
            Some(BestModel {
                epoch: b.epoch,
                edge_accuracy: b.edge_accuracy,
                params,
            })
        }
        None => None,
    };
    if let Some(extra) = records.0.keys().min() {
        return Err(Error::Corrupt {
            what: "checkpoint".into(),
            detail: format!("unexpected tensor `{extra}`"),
        });
    }
    Ok(Checkpoint {
        schedule: meta.schedule,
        seed: meta.seed,
        state: TrainState {
            model,
            adam,
            epoch: meta.epoch,
            shuffle_rng: meta.shuffle_rng.restore(),
            noise_rng: meta.noise_rng.restore(),
            best,
        },
    })
}

/// The validation-selected model stored in a checkpoint.
pub fn load_model<F: Real>(path: &Path) -> Result<Model<F>> {
    read_checkpoint::<F>(path)?.state.selected_model()
}
