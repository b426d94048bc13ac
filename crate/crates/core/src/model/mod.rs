//! Encoders producing state-conditioned edge posteriors and decoders that
//! roll the dynamics forward under sampled edges.

mod config;
mod decoder;
mod encoder;
pub mod layers;

pub use config::{DecoderKind, EncoderKind, ModelConfig};
pub use layers::{apply_norm_updates, Ctx, PairIndex};

use decoder::{DecoderNet, Head};
use encoder::EncoderNet;

use crate::error::{Error, Result};
use crate::io::Split;
use crate::rng::stream;
use crate::sim::{StateGraph, TimeSeriesSample};
use crate::tensor::{gumbel_softmax_sample, ParameterStore, Real, Var};

/// A minibatch of sequences: `p` is `[B,T,N,D]`, `s` is `[B,T,N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<F> {
    pub size: usize,
    pub num_steps: usize,
    pub num_objects: usize,
    pub dims: usize,
    pub state_classes: usize,
    pub p: Vec<F>,
    pub s: Vec<u8>,
}

impl<F: Real> Batch<F> {
    pub fn from_split(split: &Split, idx: &[usize]) -> Self {
        let mut p =
            Vec::with_capacity(idx.len() * split.num_steps * split.num_objects * split.dims);
        let mut s = Vec::with_capacity(idx.len() * split.num_steps * split.num_objects);
        for &i in idx {
            p.extend(
                split
                    .sample_p(i)
                    .iter()
                    .map(|&v| F::from_f64_lossy(f64::from(v))),
            );
            s.extend_from_slice(split.sample_s(i));
        }
        Batch {
            size: idx.len(),
            num_steps: split.num_steps,
            num_objects: split.num_objects,
            dims: split.dims,
            state_classes: split.num_states,
            p,
            s,
        }
    }

    pub fn from_samples(samples: &[TimeSeriesSample], state_classes: usize) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Contract("empty batch".into()))?;
        let (t, n, d) = (first.num_steps, first.num_objects, first.dims);
        let mut p = Vec::new();
        let mut s = Vec::new();
        for x in samples {
            if (x.num_steps, x.num_objects, x.dims) != (t, n, d) {
                return Err(Error::shape(
                    "Batch::from_samples",
                    &[t, n, d],
                    &[x.num_steps, x.num_objects, x.dims],
                ));
            }
            p.extend(x.p.iter().map(|&v| F::from_f64_lossy(v)));
            s.extend_from_slice(&x.s);
        }
        Ok(Batch {
            size: samples.len(),
            num_steps: t,
            num_objects: n,
            dims: d,
            state_classes,
            p,
            s,
        })
    }

    pub fn p_at(&self, b: usize, t: usize, i: usize) -> &[F] {
        let at = ((b * self.num_steps + t) * self.num_objects + i) * self.dims;
        &self.p[at..at + self.dims]
    }

    pub fn state(&self, b: usize, t: usize, i: usize) -> u8 {
        self.s[(b * self.num_steps + t) * self.num_objects + i]
    }

    /// Root mean square of sample `b`'s positions.
    pub fn rms(&self, b: usize) -> F {
        let w = self.num_steps * self.num_objects * self.dims;
        let ss = self.p[b * w..(b + 1) * w]
            .iter()
            .fold(F::zero(), |a, &v| a + v * v);
        (ss / F::from_f64_lossy(w as f64)).sqrt()
    }

    /// Appends `p / scale` and, if requested, the one-hot state of one object.
    pub(crate) fn push_features(
        &self,
        out: &mut Vec<F>,
        b: usize,
        t: usize,
        i: usize,
        with_states: bool,
        scale: F,
    ) {
        out.extend(self.p_at(b, t, i).iter().map(|&v| v / scale));
        if with_states {
            let s = usize::from(self.state(b, t, i));
            out.extend((0..self.state_classes).map(|k| if k == s { F::one() } else { F::zero() }));
        }
    }
}

/// Where the decoder's edge weights come from.
#[derive(Debug, Clone)]
pub enum EdgeSource<'a, F> {
    /// Relaxed (or straight-through) Gumbel sample with this noise.
    Sample { noise: &'a [F] },
    /// One-hot argmax of the posterior.
    Argmax,
    /// Caller-supplied weights, `[B·E·K, n_e]`.
    Given(&'a [F]),
}

/// One parallel decoder step over all teacher-forcing segments still active.
#[derive(Debug, Clone)]
pub struct RolloutStep<F> {
    /// Predicted `p`, `[rows·N, D]`.
    pub pred: Var,
    /// Ground truth for `pred`.
    pub target: Vec<F>,
    /// `(sample, frame)` predicted by each row block of `N` objects.
    pub frames: Vec<(usize, usize)>,
    /// Next-state logits `[rows·N, K]` when states are event driven.
    pub state_logits: Option<Var>,
    pub state_target: Vec<usize>,
}

/// The full SDCI model: parameters plus the layer layout over them.
#[derive(Debug, Clone)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub params: ParameterStore<F>,
    pairs: PairIndex,
    encoder: EncoderNet,
    decoder: DecoderNet,
    next_state: Option<Head>,
    latent_state: Option<Head>,
}

impl<F: Real> Model<F> {
    /// Builds the architecture and initializes weights from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, "init", 0);
        let mut params = ParameterStore::new();
        let encoder = EncoderNet::new(&mut params, &config, &mut rng)?;
        let decoder = DecoderNet::new(&mut params, &config, &mut rng)?;
        let m = decoder.message_width(&config);
        let next_state = if config.predicts_states() {
            let n_in = m + config.decoder_features();
            Some(Head::new(
                &mut params,
                "dec.next_state",
                n_in,
                config.decoder_hidden,
                config.state_classes,
                &mut rng,
            )?)
        } else {
            None
        };
        let latent_state = if config.infers_states() {
            Some(Head::new(
                &mut params,
                "dec.latent_state",
                config.dims,
                config.decoder_hidden,
                config.num_states,
                &mut rng,
            )?)
        } else {
            None
        };
        Ok(Model {
            pairs: PairIndex::new(config.num_objects),
            config,
            params,
            encoder,
            decoder,
            next_state,
            latent_state,
        })
    }

    pub fn pairs(&self) -> &PairIndex {
        &self.pairs
    }

    fn check_batch(&self, batch: &Batch<F>) -> Result<()> {
        let c = &self.config;
        if batch.num_objects != c.num_objects
            || batch.dims != c.dims
            || batch.num_steps != c.num_steps
        {
            return Err(Error::shape(
                "model input",
                &[c.num_steps, c.num_objects, c.dims],
                &[batch.num_steps, batch.num_objects, batch.dims],
            ));
        }
        if batch.state_classes != c.state_classes {
            return Err(Error::Contract(format!(
                "batch has {} state classes, model expects {}",
                batch.state_classes, c.state_classes
            )));
        }
        Ok(())
    }

    /// Encoder logits `φ`, `[B·E·K, n_e]`, rows ordered (sample, pair, state).
    pub fn encode(&self, ctx: &mut Ctx<'_, F>, batch: &Batch<F>) -> Result<Var> {
        self.check_batch(batch)?;
        self.encoder.forward(ctx, &self.config, &self.pairs, batch)
    }

    /// Encode, pick edge weights, and decode with teacher forcing every
    /// `period` frames.
    pub fn forward(
        &self,
        ctx: &mut Ctx<'_, F>,
        batch: &Batch<F>,
        edges: EdgeSource<'_, F>,
        period: usize,
    ) -> Result<ForwardOut<F>> {
        let logits = self.encode(ctx, batch)?;
        let tau = self.config.tau;
        let log_q = ctx.tape.log_softmax(logits, tau)?;
        let q = ctx.tape.exp(log_q);
        let weights = match edges {
            EdgeSource::Sample { noise } => {
                gumbel_softmax_sample(ctx.tape, log_q, noise, tau, self.config.hard)?
            }
            EdgeSource::Argmax => {
                let hard = argmax_one_hot(ctx.tape.value(q), self.config.edge_types);
                ctx.tape.constant_from(ctx.tape.shape(q).to_vec(), hard)?
            }
            EdgeSource::Given(w) => ctx
                .tape
                .constant_from(ctx.tape.shape(q).to_vec(), w.to_vec())?,
        };
        let steps = self.rollout(ctx, batch, weights, period)?;
        Ok(ForwardOut {
            logits,
            log_q,
            q,
            weights,
            steps,
        })
    }

    /// Decoder only, with edge weights `[B·E·K, n_e]` already on the tape.
    ///
    /// Segments start from ground truth at frames `0, period, 2·period, …`
    /// and feed on their own predictions in between; all segments advance
    /// together. Edge queries use the observed source states; in the hidden
    /// regime they use the state head's marginal.
    pub fn rollout(
        &self,
        ctx: &mut Ctx<'_, F>,
        batch: &Batch<F>,
        weights: Var,
        period: usize,
    ) -> Result<Vec<RolloutStep<F>>> {
        self.check_batch(batch)?;
        if period == 0 {
            return Err(Error::Parameter(
                "teacher forcing period must be at least 1".into(),
            ));
        }
        let cfg = &self.config;
        let (bsz, t, n, d) = (batch.size, batch.num_steps, batch.num_objects, batch.dims);
        let (e, k, ne) = (self.pairs.len(), cfg.num_states, cfg.edge_types);
        if ctx.tape.shape(weights) != [bsz * e * k, ne] {
            return Err(Error::shape(
                "edge weights",
                ctx.tape.shape(weights),
                &[bsz * e * k, ne],
            ));
        }
        let transitions = t - 1;
        let segments = transitions.div_ceil(period);
        let with_states = cfg.decoder_sees_states();
        let mut out = Vec::with_capacity(period.min(transitions));
        let mut prev: Option<Var> = None;

        for m in 0..period.min(transitions) {
            // Segment c is active while its frame c·period + m has a successor.
            let active = (0..segments)
                .take_while(|&c| c * period + m < transitions)
                .count();
            let rows = active * bsz;
            let frame = |r: usize| ((r / bsz) * period + m, r % bsz);
            let p_in = match prev {
                None => {
                    let mut data = Vec::with_capacity(rows * n * d);
                    for r in 0..rows {
                        let (f, b) = frame(r);
                        for i in 0..n {
                            data.extend_from_slice(batch.p_at(b, f, i));
                        }
                    }
                    ctx.tape.constant_from([rows * n, d], data)?
                }
                Some(v) if ctx.tape.shape(v)[0] == rows * n => v,
                Some(v) => {
                    let keep: Vec<usize> = (0..rows * n).collect();
                    ctx.tape.gather_rows(v, &keep)?
                }
            };
            let x = if with_states {
                let mut onehot = vec![F::zero(); rows * n * cfg.state_classes];
                for r in 0..rows {
                    let (f, b) = frame(r);
                    for i in 0..n {
                        let s = usize::from(batch.state(b, f, i));
                        onehot[(r * n + i) * cfg.state_classes + s] = F::one();
                    }
                }
                let oh = ctx
                    .tape
                    .constant_from([rows * n, cfg.state_classes], onehot)?;
                ctx.tape.concat_cols(&[p_in, oh])?
            } else {
                p_in
            };
            let (send, recv) = self.pairs.stacked(rows);
            let w = self.step_weights(ctx, batch, weights, p_in, rows, &frame, &send)?;
            let (pred, agg) = self.decoder.step(ctx, cfg, x, p_in, w, &send, &recv)?;

            let mut target = Vec::with_capacity(rows * n * d);
            let mut frames = Vec::with_capacity(rows);
            for r in 0..rows {
                let (f, b) = frame(r);
                frames.push((b, f + 1));
                for i in 0..n {
                    target.extend_from_slice(batch.p_at(b, f + 1, i));
                }
            }
            let (state_logits, state_target) = match &self.next_state {
                Some(head) => {
                    let inp = ctx.tape.concat_cols(&[agg, x])?;
                    let logits = head.forward(ctx, inp)?;
                    let tgt = frames
                        .iter()
                        .flat_map(|&(b, f)| (0..n).map(move |i| (b, f, i)))
                        .map(|(b, f, i)| usize::from(batch.state(b, f, i)))
                        .collect();
                    (Some(logits), tgt)
                }
                None => (None, Vec::new()),
            };
            out.push(RolloutStep {
                pred,
                target,
                frames,
                state_logits,
                state_target,
            });
            prev = Some(pred);
        }
        Ok(out)
    }

    /// Edge weights `[rows·E, n_e]` in force for each active row.
    #[allow(clippy::too_many_arguments)]
    fn step_weights(
        &self,
        ctx: &mut Ctx<'_, F>,
        batch: &Batch<F>,
        weights: Var,
        p_in: Var,
        rows: usize,
        frame: &dyn Fn(usize) -> (usize, usize),
        send: &[usize],
    ) -> Result<Var> {
        let (e, k) = (self.pairs.len(), self.config.num_states);
        let row_of = |b: usize, pair: usize, s: usize| (b * e + pair) * k + s;
        if let Some(head) = &self.latent_state {
            let probs = self.state_probs(ctx, head, p_in)?;
            let src = ctx.tape.gather_rows(probs, send)?;
            let mut total: Option<Var> = None;
            for s in 0..k {
                let idx: Vec<usize> = (0..rows)
                    .flat_map(|r| (0..e).map(move |pair| (r, pair)))
                    .map(|(r, pair)| row_of(frame(r).1, pair, s))
                    .collect();
                let ws = ctx.tape.gather_rows(weights, &idx)?;
                let ps = ctx.tape.slice_cols(src, s, s + 1)?;
                let term = ctx.tape.mul_col(ws, ps)?;
                total = Some(match total {
                    Some(acc) => ctx.tape.add(acc, term)?,
                    None => term,
                });
            }
            return Ok(total.expect("at least one state"));
        }
        let idx: Vec<usize> = (0..rows)
            .flat_map(|r| (0..e).map(move |pair| (r, pair)))
            .map(|(r, pair)| {
                let (f, b) = frame(r);
                let s = if k == 1 {
                    0
                } else {
                    usize::from(batch.state(b, f, self.pairs.send[pair]))
                };
                row_of(b, pair, s)
            })
            .collect();
        ctx.tape.gather_rows(weights, &idx)
    }

    fn state_probs(&self, ctx: &mut Ctx<'_, F>, head: &Head, p: Var) -> Result<Var> {
        let logits = head.forward(ctx, p)?;
        ctx.tape.softmax(logits, self.config.gamma)
    }

    /// `p(k | p_i^t)` from the latent state head for every frame of the
    /// batch, `[B·T·N, K]`. Hidden regime only.
    pub fn infer_states(&self, ctx: &mut Ctx<'_, F>, batch: &Batch<F>) -> Result<Var> {
        self.check_batch(batch)?;
        let head = self
            .latent_state
            .as_ref()
            .ok_or_else(|| Error::Contract("model has no latent state head".into()))?;
        let rows = batch.size * batch.num_steps * batch.num_objects;
        let p = ctx
            .tape
            .constant_from([rows, batch.dims], batch.p.clone())?;
        self.state_probs(ctx, head, p)
    }

    /// Learned `(α̂, β̂)` of a linear decoder, with `β̂_0 = 0` prepended.
    pub fn linear_parameters(&self) -> Result<(f64, Vec<f64>)> {
        match &self.decoder {
            DecoderNet::Linear { alpha, beta } => {
                let a = self.params.get(*alpha).data()[0].to_f64_lossy();
                let mut b = vec![0.0];
                b.extend(self.params.get(*beta).to_f64_vec());
                Ok((a, b))
            }
            DecoderNet::Learned { .. } => Err(Error::Contract(
                "world parameters exist only for the linear decoder".into(),
            )),
        }
    }
}

/// Output of [`Model::forward`].
#[derive(Debug, Clone)]
pub struct ForwardOut<F> {
    pub logits: Var,
    pub log_q: Var,
    pub q: Var,
    pub weights: Var,
    pub steps: Vec<RolloutStep<F>>,
}

/// One-hot of the largest entry of each `classes`-wide row (first on ties).
pub fn argmax_one_hot<F: Real>(values: &[F], classes: usize) -> Vec<F> {
    let mut out = vec![F::zero(); values.len()];
    for (row, o) in values
        .chunks_exact(classes)
        .zip(out.chunks_exact_mut(classes))
    {
        o[argmax(row)] = F::one();
    }
    out
}

pub fn argmax<F: Real>(row: &[F]) -> usize {
    row.iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

/// One-hot edge weights `[B·E·K, n_e]` that encode the given graphs exactly.
pub fn weights_from_graphs<F: Real>(
    graphs: &[StateGraph],
    pairs: &PairIndex,
    num_states: usize,
) -> Result<Vec<F>> {
    let mut out = Vec::new();
    for g in graphs {
        if g.num_states() != num_states || g.num_objects() != pairs.num_objects {
            return Err(Error::shape(
                "weights_from_graphs",
                &[num_states, pairs.num_objects],
                &[g.num_states(), g.num_objects()],
            ));
        }
        let ne = g.edge_types();
        for (&i, &j) in pairs.send.iter().zip(&pairs.recv) {
            for k in 0..num_states {
                let e = usize::from(g.get(k, i, j));
                out.extend((0..ne).map(|c| if c == e { F::one() } else { F::zero() }));
            }
        }
    }
    Ok(out)
}

/// Predicted edge types per (pair, state) for every sample, as graphs.
pub fn graphs_from_posterior<F: Real>(
    q: &[F],
    batch_size: usize,
    pairs: &PairIndex,
    num_states: usize,
    edge_types: usize,
) -> Result<Vec<StateGraph>> {
    let e = pairs.len();
    if q.len() != batch_size * e * num_states * edge_types {
        return Err(Error::shape(
            "graphs_from_posterior",
            &[batch_size, e, num_states, edge_types],
            &[q.len()],
        ));
    }
    (0..batch_size)
        .map(|b| {
            let mut g = StateGraph::empty(num_states, pairs.num_objects, edge_types);
            for pair in 0..e {
                for k in 0..num_states {
                    let row = ((b * e + pair) * num_states + k) * edge_types;
                    let best = argmax(&q[row..row + edge_types]);
                    g.set(k, pairs.send[pair], pairs.recv[pair], best as u8)?;
                }
            }
            Ok(g)
        })
        .collect()
}
