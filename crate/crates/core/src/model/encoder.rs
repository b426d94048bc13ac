use rand::Rng;

use super::layers::{Activation, Ctx, Linear, Mlp, PairIndex};
use super::{Batch, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{ParamGroup, ParamId, ParameterStore, Real, Var};

const CONV_WIDTH: usize = 3;

/// Node MLP, pairwise MLP, sum over incoming pairs, node MLP, and a final
/// pairwise MLP that also sees the first pairwise embedding.
#[derive(Debug, Clone)]
pub(crate) struct Gnn {
    mlp1: Mlp,
    mlp2: Mlp,
    mlp3: Mlp,
    mlp4: Mlp,
}

impl Gnn {
    fn new<F: Real>(
        store: &mut ParameterStore<F>,
        n_in: usize,
        h: usize,
        batch_norm: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let g = ParamGroup::Encoder;
        let elu = Activation::Elu;
        Ok(Gnn {
            mlp1: Mlp::new(store, "enc.mlp1", n_in, h, h, elu, batch_norm, g, rng)?,
            mlp2: Mlp::new(store, "enc.mlp2", 2 * h, h, h, elu, batch_norm, g, rng)?,
            mlp3: Mlp::new(store, "enc.mlp3", h, h, h, elu, batch_norm, g, rng)?,
            mlp4: Mlp::new(store, "enc.mlp4", 3 * h, h, h, elu, batch_norm, g, rng)?,
        })
    }

    /// `x` holds `instances × N` node rows; returns `instances × E` pair rows.
    fn forward<F: Real>(
        &self,
        ctx: &mut Ctx<'_, F>,
        x: Var,
        pairs: &PairIndex,
        instances: usize,
    ) -> Result<Var> {
        let (send, recv) = pairs.stacked(instances);
        let nodes = instances * pairs.num_objects;
        let h1 = self.mlp1.forward(ctx, x)?;
        let e1 = node_to_edge(ctx, h1, &send, &recv)?;
        let e1 = self.mlp2.forward(ctx, e1)?;
        let agg = ctx.tape.scatter_add_rows(e1, &recv, nodes)?;
        let h2 = self.mlp3.forward(ctx, agg)?;
        let hs = ctx.tape.gather_rows(h2, &send)?;
        let hr = ctx.tape.gather_rows(h2, &recv)?;
        let e2 = ctx.tape.concat_cols(&[hs, hr, e1])?;
        self.mlp4.forward(ctx, e2)
    }
}

fn node_to_edge<F: Real>(
    ctx: &mut Ctx<'_, F>,
    h: Var,
    send: &[usize],
    recv: &[usize],
) -> Result<Var> {
    let hs = ctx.tape.gather_rows(h, send)?;
    let hr = ctx.tape.gather_rows(h, recv)?;
    ctx.tape.concat_cols(&[hs, hr])
}

#[derive(Debug, Clone)]
pub(crate) struct Conv {
    k: ParamId,
    b: ParamId,
}

impl Conv {
    fn new<F: Real>(
        store: &mut ParameterStore<F>,
        name: &str,
        h: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = (6.0 / (2 * h * CONV_WIDTH) as f64).sqrt();
        let k = store.insert_uniform(
            &format!("{name}.k"),
            vec![h, h, CONV_WIDTH],
            -bound,
            bound,
            ParamGroup::Encoder,
            rng,
        )?;
        let b = store.insert_constant(&format!("{name}.b"), vec![h], 0.0, ParamGroup::Encoder)?;
        Ok(Conv { k, b })
    }

    fn forward<F: Real>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let (k, b) = (ctx.var(self.k), ctx.var(self.b));
        let y = ctx.tape.conv1d(x, k)?;
        ctx.tape.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub(crate) enum EncoderNet {
    Static {
        gnn: Gnn,
        out: Linear,
    },
    Temporal {
        gnn: Gnn,
        conv1: Conv,
        conv2: Conv,
        out: Linear,
    },
}

impl EncoderNet {
    pub(crate) fn new<F: Real>(
        store: &mut ParameterStore<F>,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let h = cfg.hidden;
        let f = cfg.encoder_features();
        let n_out = cfg.num_states * cfg.edge_types;
        Ok(match cfg.encoder {
            super::EncoderKind::Static => {
                let gnn = Gnn::new(store, cfg.num_steps * f, h, cfg.batch_norm, rng)?;
                let out = Linear::new(store, "enc.out", h, n_out, 0.0, ParamGroup::Encoder, rng)?;
                EncoderNet::Static { gnn, out }
            }
            super::EncoderKind::Temporal => {
                let gnn = Gnn::new(store, 2 * f, h, cfg.batch_norm, rng)?;
                let conv1 = Conv::new(store, "enc.conv1", h, rng)?;
                let conv2 = Conv::new(store, "enc.conv2", h, rng)?;
                let out = Linear::new(store, "enc.out", h, n_out, 0.0, ParamGroup::Encoder, rng)?;
                EncoderNet::Temporal {
                    gnn,
                    conv1,
                    conv2,
                    out,
                }
            }
        })
    }

    /// Pair logits `[B·E·K, n_e]`, rows ordered (sample, pair, state).
    pub(crate) fn forward<F: Real>(
        &self,
        ctx: &mut Ctx<'_, F>,
        cfg: &ModelConfig,
        pairs: &PairIndex,
        batch: &Batch<F>,
    ) -> Result<Var> {
        if batch.num_steps < 2 {
            return Err(Error::Contract(format!(
                "encoder needs T >= 2, got {}",
                batch.num_steps
            )));
        }
        let (bsz, t, n) = (batch.size, batch.num_steps, batch.num_objects);
        let e = pairs.len();
        let f = cfg.encoder_features();
        let with_states = cfg.encoder_sees_states();
        let tiny = F::from_f64_lossy(1e-8);
        let scales: Vec<F> = (0..bsz)
            .map(|b| {
                if cfg.scale_input {
                    batch.rms(b).max(tiny)
                } else {
                    F::one()
                }
            })
            .collect();
        let pair_rows = match self {
            EncoderNet::Static { gnn, out } => {
                let mut data = Vec::with_capacity(bsz * n * t * f);
                for b in 0..bsz {
                    for i in 0..n {
                        for tt in 0..t {
                            batch.push_features(&mut data, b, tt, i, with_states, scales[b]);
                        }
                    }
                }
                let x = ctx.tape.constant_from([bsz * n, t * f], data)?;
                let h = gnn.forward(ctx, x, pairs, bsz)?;
                out.forward(ctx, h)?
            }
            EncoderNet::Temporal {
                gnn,
                conv1,
                conv2,
                out,
            } => {
                let steps = t - 1;
                let mut data = Vec::with_capacity(bsz * steps * n * 2 * f);
                for b in 0..bsz {
                    for tt in 0..steps {
                        for i in 0..n {
                            batch.push_features(&mut data, b, tt, i, with_states, scales[b]);
                            batch.push_features(&mut data, b, tt + 1, i, with_states, scales[b]);
                        }
                    }
                }
                let x = ctx.tape.constant_from([bsz * steps * n, 2 * f], data)?;
                let h = gnn.forward(ctx, x, pairs, bsz * steps)?;
                // (b, t, pair) → (b, pair, t) so time is contiguous per pair.
                let mut idx = Vec::with_capacity(bsz * e * steps);
                for b in 0..bsz {
                    for p in 0..e {
                        for tt in 0..steps {
                            idx.push((b * steps + tt) * e + p);
                        }
                    }
                }
                let h = ctx.tape.gather_rows(h, &idx)?;
                let h = ctx.tape.reshape(h, [bsz * e, steps, cfg.hidden])?;
                let h = conv1.forward(ctx, h)?;
                let h = ctx.tape.elu(h);
                let h = conv2.forward(ctx, h)?;
                let h = ctx.tape.max_pool_time(h)?;
                out.forward(ctx, h)?
            }
        };
        ctx.tape
            .reshape(pair_rows, [bsz * e * cfg.num_states, cfg.edge_types])
    }
}
