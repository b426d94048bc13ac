//! Edge accuracy, reconstruction error, parameter recovery and state
//! accuracy, plus the report type and its text tables.

mod metrics;

pub use metrics::{
    edge_accuracy, reconstruction_mse, state_accuracy_aligned, world_param_distance,
    MAX_ALIGNED_STATES,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Split;
use crate::model::{argmax, graphs_from_posterior, Batch, Ctx, EdgeSource, Model};
use crate::sim::{LinearWorld, Regime, StateGraph};
use crate::tensor::{Real, Tape};

/// Mean with its standard error across samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStderr {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl MeanStderr {
    pub fn from_values(v: &[f64]) -> Self {
        let n = v.len();
        if n == 0 {
            return MeanStderr {
                mean: f64::NAN,
                stderr: 0.0,
                n,
            };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        MeanStderr { mean, stderr, n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub split: String,
    pub num_samples: usize,
    /// Percent.
    pub edge_accuracy: MeanStderr,
    pub reconstruction_mse: MeanStderr,
    pub teacher_forcing: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub world_param_distance: Option<f64>,
    /// Learned `α̂` and `β̂` (with `β̂_0 = 0`) of a linear decoder.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learned_world: Option<LinearWorld>,
    /// Percent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_accuracy: Option<MeanStderr>,
    /// Predicted state `k` stands for true state `state_alignment[k]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_alignment: Option<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub label: String,
    pub split: String,
    pub teacher_forcing: usize,
    pub batch_size: usize,
    /// True world of linear data, for the parameter distance.
    pub world: Option<LinearWorld>,
}

/// Deterministic predictions for a batch: posterior argmax graphs, the
/// teacher-forced trajectory and any state predictions.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub graphs: Vec<StateGraph>,
    /// `[B, T−1, N, D]`: frames `1..T`.
    pub trajectory: Vec<f64>,
    /// Argmax of the latent state head, `[B, T, N]` (hidden regime).
    pub latent_states: Option<Vec<u8>>,
    /// Next-state head argmax and truth, `[B, T−1, N]` each (event-driven regime).
    pub next_states: Option<(Vec<u8>, Vec<u8>)>,
}

/// Runs the model in evaluation mode: no sampling, running normalization
/// statistics, posterior argmax as the edge assignment.
pub fn predict<F: Real>(
    model: &Model<F>,
    batch: &Batch<F>,
    teacher_forcing: usize,
) -> Result<Prediction> {
    let cfg = &model.config;
    let (bsz, t, n, d) = (batch.size, batch.num_steps, batch.num_objects, batch.dims);
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let mut ctx = Ctx::new(&mut tape, &model.params, &bound, false);
    let out = model.forward(&mut ctx, batch, EdgeSource::Argmax, teacher_forcing)?;
    let q = ctx.tape.value(out.q).to_vec();
    let graphs = graphs_from_posterior(&q, bsz, model.pairs(), cfg.num_states, cfg.edge_types)?;

    let mut trajectory = vec![0.0; bsz * (t - 1) * n * d];
    let mut next = cfg
        .predicts_states()
        .then(|| (vec![0u8; bsz * (t - 1) * n], vec![0u8; bsz * (t - 1) * n]));
    for step in &out.steps {
        let vals = ctx.tape.value(step.pred);
        let logits = step.state_logits.map(|v| ctx.tape.value(v).to_vec());
        for (r, &(b, f)) in step.frames.iter().enumerate() {
            let dst = (b * (t - 1) + f - 1) * n * d;
            for (o, &v) in trajectory[dst..dst + n * d]
                .iter_mut()
                .zip(&vals[r * n * d..(r + 1) * n * d])
            {
                *o = v.to_f64_lossy();
            }
            if let (Some((pred, truth)), Some(l)) = (next.as_mut(), logits.as_ref()) {
                let kc = cfg.state_classes;
                for i in 0..n {
                    let row = r * n + i;
                    let at = (b * (t - 1) + f - 1) * n + i;
                    pred[at] = argmax(&l[row * kc..(row + 1) * kc]) as u8;
                    truth[at] = step.state_target[row] as u8;
                }
            }
        }
    }
    let latent_states = if cfg.infers_states() {
        let probs = model.infer_states(&mut ctx, batch)?;
        let k = cfg.num_states;
        Some(
            ctx.tape
                .value(probs)
                .chunks_exact(k)
                .map(|row| argmax(row) as u8)
                .collect(),
        )
    } else {
        None
    };
    Ok(Prediction {
        graphs,
        trajectory,
        latent_states,
        next_states: next,
    })
}

/// Scores a model on every sample of `split`.
pub fn evaluate<F: Real>(
    model: &Model<F>,
    split: &Split,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    if split.is_empty() {
        return Err(Error::Contract(format!(
            "cannot evaluate the empty `{}` split",
            opts.split
        )));
    }
    let cfg = &model.config;
    let (t, n, d) = (split.num_steps, split.num_objects, split.dims);
    let mut graphs = Vec::with_capacity(split.len());
    let mut mse = Vec::with_capacity(split.len());
    let mut latent: Vec<u8> = Vec::new();
    let mut next_acc = Vec::new();
    let bs = opts.batch_size.max(1);
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(bs) {
        let batch = Batch::<F>::from_split(split, chunk);
        let pred = predict(model, &batch, opts.teacher_forcing)?;
        for (b, &i) in chunk.iter().enumerate() {
            let truth: Vec<f64> = split.sample_p(i)[n * d..]
                .iter()
                .map(|&v| f64::from(v))
                .collect();
            let w = (t - 1) * n * d;
            mse.push(reconstruction_mse(
                &pred.trajectory[b * w..(b + 1) * w],
                &truth,
            )?);
            if let Some((p, tr)) = &pred.next_states {
                let w = (t - 1) * n;
                let (acc, _) = state_accuracy_aligned(
                    &p[b * w..(b + 1) * w],
                    &tr[b * w..(b + 1) * w],
                    cfg.state_classes,
                    false,
                )?;
                next_acc.push(acc);
            }
        }
        graphs.extend(pred.graphs);
        if let Some(ls) = pred.latent_states {
            latent.extend(ls);
        }
    }

    // Hidden regime: one relabeling for the whole split, shared by edges.
    let mut state_alignment = None;
    let mut state_accuracy = None;
    if cfg.infers_states() {
        let k = cfg.num_states.max(split.num_states);
        let (_, map) = state_accuracy_aligned(&latent, &split.s, k, true)?;
        let w = t * n;
        let per: Vec<f64> = (0..split.len())
            .map(|i| {
                let hits = latent[i * w..(i + 1) * w]
                    .iter()
                    .zip(split.sample_s(i))
                    .filter(|(&p, &s)| map[usize::from(p)] == usize::from(s))
                    .count();
                100.0 * hits as f64 / w as f64
            })
            .collect();
        state_accuracy = Some(MeanStderr::from_values(&per));
        state_alignment = Some(map);
    } else if cfg.predicts_states() {
        state_accuracy = Some(MeanStderr::from_values(&next_acc));
    }

    let broadcast = cfg.num_states == 1;
    let map = state_alignment
        .as_deref()
        .filter(|m| m.len() == split.num_states);
    let edge: Vec<f64> = graphs
        .iter()
        .enumerate()
        .map(|(i, g)| edge_accuracy(g, &split.graph(i), broadcast, map))
        .collect::<Result<_>>()?;

    let (world_param_distance, learned_world) = match (model.linear_parameters(), &opts.world) {
        (Ok((a, b)), Some(truth)) => (
            Some(world_param_distance(a, &b, truth)?),
            Some(LinearWorld { alpha: a, beta: b }),
        ),
        (Ok((a, b)), None) => (None, Some(LinearWorld { alpha: a, beta: b })),
        _ => (None, None),
    };
    Ok(MetricReport {
        label: opts.label.clone(),
        split: opts.split.clone(),
        num_samples: split.len(),
        edge_accuracy: MeanStderr::from_values(&edge),
        reconstruction_mse: MeanStderr::from_values(&mse),
        teacher_forcing: opts.teacher_forcing,
        world_param_distance,
        learned_world,
        state_accuracy,
        state_alignment,
    })
}

/// World-parameter distance of a trained model, refusing learned decoders.
pub fn model_world_distance<F: Real>(model: &Model<F>, truth: &LinearWorld) -> Result<f64> {
    let (a, b) = model.linear_parameters()?;
    world_param_distance(a, &b, truth)
}

/// Whether a regime reports a state accuracy.
pub fn reports_states(regime: Regime, num_states: usize) -> bool {
    match regime {
        Regime::ObservedDependent => true,
        Regime::Hidden => num_states > 1,
        Regime::ObservedIndependent => false,
    }
}

fn sci(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else {
        format!("{v:.2e}")
    }
}

/// Aligned text table with one row per report.
pub fn render_table(reports: &[MetricReport]) -> String {
    let header = [
        "Model",
        "Split",
        "Edge acc. (%)",
        "MSE",
        "Dist. to world",
        "State acc. (%)",
    ];
    let rows: Vec<[String; 6]> = reports
        .iter()
        .map(|r| {
            [
                r.label.clone(),
                r.split.clone(),
                format!(
                    "{:.2} ± {:.2}",
                    r.edge_accuracy.mean, r.edge_accuracy.stderr
                ),
                format!(
                    "{} ± {}",
                    sci(r.reconstruction_mse.mean),
                    sci(r.reconstruction_mse.stderr)
                ),
                r.world_param_distance.map_or_else(|| "-".into(), sci),
                r.state_accuracy.map_or_else(
                    || "-".into(),
                    |s| format!("{:.2} ± {:.2}", s.mean, s.stderr),
                ),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..6)
        .map(|c| {
            rows.iter()
                .map(|r| r[c].chars().count())
                .chain(std::iter::once(header[c].chars().count()))
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: &[String]| -> String {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join(" | ")
            .trim_end()
            .to_string()
    };
    let mut out = String::new();
    out.push_str(&line(&header.map(String::from)));
    out.push('\n');
    out.push_str(
        &widths
            .iter()
            .map(|&w| "-".repeat(w))
            .collect::<Vec<_>>()
            .join("-+-"),
    );
    out.push('\n');
    for r in &rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stderr_of_constant_is_zero() {
        let m = MeanStderr::from_values(&[2.0, 2.0, 2.0]);
        assert_eq!((m.mean, m.stderr, m.n), (2.0, 0.0, 3));
    }

    #[test]
    fn stderr_hand_value() {
        // Sample std of {1, 3} is √2; stderr √2/√2 = 1.
        let m = MeanStderr::from_values(&[1.0, 3.0]);
        assert!((m.stderr - 1.0).abs() < 1e-12);
    }

    #[test]
    fn table_has_one_line_per_report() {
        let r = MetricReport {
            label: "static".into(),
            split: "test".into(),
            num_samples: 2,
            edge_accuracy: MeanStderr::from_values(&[90.0, 100.0]),
            reconstruction_mse: MeanStderr::from_values(&[1e-3, 2e-3]),
            teacher_forcing: 10,
            world_param_distance: Some(1e-4),
            learned_world: None,
            state_accuracy: None,
            state_alignment: None,
        };
        let t = render_table(&[r.clone(), r]);
        assert_eq!(t.lines().count(), 4);
        assert!(t.contains("95.00 ± 5.00"));
        assert!(t.contains("1.00e-4"));
    }
}
