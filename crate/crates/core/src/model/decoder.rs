use rand::Rng;

use super::layers::{Ctx, Linear};
use super::{DecoderKind, ModelConfig};
use crate::error::Result;
use crate::tensor::{ParamGroup, ParamId, ParameterStore, Real, Tensor, Var};

/// Three linear layers with ReLU between them.
#[derive(Debug, Clone)]
pub(crate) struct Head {
    fc1: Linear,
    fc2: Linear,
    fc3: Linear,
}

impl Head {
    pub(crate) fn new<F: Real>(
        store: &mut ParameterStore<F>,
        name: &str,
        n_in: usize,
        h: usize,
        n_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let g = ParamGroup::Decoder;
        Ok(Head {
            fc1: Linear::new(store, &format!("{name}.fc1"), n_in, h, 0.0, g, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), h, h, 0.0, g, rng)?,
            fc3: Linear::new(store, &format!("{name}.fc3"), h, n_out, 0.0, g, rng)?,
        })
    }

    pub(crate) fn forward<F: Real>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(ctx, x)?;
        let h = ctx.tape.relu(h);
        let h = self.fc2.forward(ctx, h)?;
        let h = ctx.tape.relu(h);
        self.fc3.forward(ctx, h)
    }
}

#[derive(Debug, Clone)]
pub(crate) enum DecoderNet {
    Learned {
        /// One two-layer message network per edge type `1..n_e`.
        msg: Vec<(Linear, Linear)>,
        out: Head,
    },
    Linear {
        alpha: ParamId,
        /// Weights of edge types `1..n_e`; type 0 is fixed at zero.
        beta: ParamId,
    },
}

impl DecoderNet {
    pub(crate) fn new<F: Real>(
        store: &mut ParameterStore<F>,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let f = cfg.decoder_features();
        let m = cfg.decoder_hidden;
        match &cfg.decoder {
            DecoderKind::Learned => {
                let msg = (1..cfg.edge_types)
                    .map(|e| -> Result<_> {
                        let g = ParamGroup::Decoder;
                        Ok((
                            Linear::new(store, &format!("dec.msg{e}.fc1"), 2 * f, m, 0.0, g, rng)?,
                            Linear::new(store, &format!("dec.msg{e}.fc2"), m, m, 0.0, g, rng)?,
                        ))
                    })
                    .collect::<Result<_>>()?;
                let out = Head::new(store, "dec.out", f + m, m, cfg.dims, rng)?;
                Ok(DecoderNet::Learned { msg, out })
            }
            DecoderKind::Linear { init, trainable } => {
                let (alpha, beta) = match init {
                    Some(w) => {
                        let a = store.insert(
                            "dec.alpha",
                            Tensor::from_f64([1], &[w.alpha])?,
                            ParamGroup::Decoder,
                        )?;
                        let b = store.insert(
                            "dec.beta",
                            Tensor::from_f64([cfg.edge_types - 1, 1], &w.beta[1..])?,
                            ParamGroup::Decoder,
                        )?;
                        (a, b)
                    }
                    None => {
                        let a = store.insert_uniform(
                            "dec.alpha",
                            vec![1],
                            0.9,
                            1.1,
                            ParamGroup::Decoder,
                            rng,
                        )?;
                        let b = store.insert_uniform(
                            "dec.beta",
                            vec![cfg.edge_types - 1, 1],
                            0.0,
                            0.1,
                            ParamGroup::Decoder,
                            rng,
                        )?;
                        (a, b)
                    }
                };
                if !trainable {
                    for id in [alpha, beta] {
                        store.get_mut(id).set_requires_grad(false);
                    }
                }
                Ok(DecoderNet::Linear { alpha, beta })
            }
        }
    }

    /// Width of the aggregated incoming message.
    pub(crate) fn message_width(&self, cfg: &ModelConfig) -> usize {
        match self {
            DecoderNet::Learned { .. } => cfg.decoder_hidden,
            DecoderNet::Linear { .. } => cfg.dims,
        }
    }

    /// One transition. `x` is `[nodes, F]` decoder features, `p` its first
    /// `D` columns, `w` the `[pairs, n_e]` edge weights in force.
    /// Returns the predicted next `p` and the aggregated messages.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn step<F: Real>(
        &self,
        ctx: &mut Ctx<'_, F>,
        cfg: &ModelConfig,
        x: Var,
        p: Var,
        w: Var,
        send: &[usize],
        recv: &[usize],
    ) -> Result<(Var, Var)> {
        let nodes = ctx.tape.shape(x)[0];
        match self {
            DecoderNet::Learned { msg, out } => {
                let xs = ctx.tape.gather_rows(x, send)?;
                let xr = ctx.tape.gather_rows(x, recv)?;
                let pre = ctx.tape.concat_cols(&[xs, xr])?;
                let mut total: Option<Var> = None;
                for (e, (fc1, fc2)) in msg.iter().enumerate() {
                    let h = fc1.forward(ctx, pre)?;
                    let h = ctx.tape.relu(h);
                    let h = fc2.forward(ctx, h)?;
                    let h = ctx.tape.relu(h);
                    let gate = ctx.tape.slice_cols(w, e + 1, e + 2)?;
                    let h = ctx.tape.mul_col(h, gate)?;
                    total = Some(match total {
                        Some(t) => ctx.tape.add(t, h)?,
                        None => h,
                    });
                }
                let total = total.expect("at least one edge type carries messages");
                let agg = ctx.tape.scatter_add_rows(total, recv, nodes)?;
                let inp = ctx.tape.concat_cols(&[x, agg])?;
                let delta = out.forward(ctx, inp)?;
                Ok((ctx.tape.add(p, delta)?, agg))
            }
            DecoderNet::Linear { alpha, beta } => {
                let (alpha, beta) = (ctx.var(*alpha), ctx.var(*beta));
                let we = ctx.tape.slice_cols(w, 1, cfg.edge_types)?;
                let coef = ctx.tape.matmul(we, beta)?;
                let ps = ctx.tape.gather_rows(p, send)?;
                let msg = ctx.tape.mul_col(ps, coef)?;
                let agg = ctx.tape.scatter_add_rows(msg, recv, nodes)?;
                let own = ctx.tape.scale_by(p, alpha)?;
                Ok((ctx.tape.add(own, agg)?, agg))
            }
        }
    }
}
