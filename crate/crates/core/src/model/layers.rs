use rand::Rng;

use crate::error::Result;
use crate::tensor::{Bound, NormStats, ParamGroup, ParamId, ParameterStore, Real, Tape, Var};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Everything a forward pass needs: the tape, bound parameters, and whether
/// normalization layers use batch statistics.
pub struct Ctx<'a, F: Real> {
    pub tape: &'a mut Tape<F>,
    pub store: &'a ParameterStore<F>,
    pub bound: &'a Bound,
    pub train: bool,
    pub(crate) norm_updates: Vec<NormUpdate<F>>,
}

/// Batch statistics from one normalization layer.
pub struct NormUpdate<F> {
    mean: ParamId,
    var: ParamId,
    batch_mean: Vec<F>,
    batch_var: Vec<F>,
}

impl<'a, F: Real> Ctx<'a, F> {
    pub fn new(
        tape: &'a mut Tape<F>,
        store: &'a ParameterStore<F>,
        bound: &'a Bound,
        train: bool,
    ) -> Self {
        Ctx {
            tape,
            store,
            bound,
            train,
            norm_updates: Vec::new(),
        }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.bound.var(id)
    }

    /// Batch statistics observed during the pass, to be folded into the
    /// running averages once the step is committed.
    pub fn take_norm_updates(&mut self) -> Vec<NormUpdate<F>> {
        std::mem::take(&mut self.norm_updates)
    }
}

/// Folds batch statistics into running averages (exponential, momentum 0.1).
pub fn apply_norm_updates<F: Real>(store: &mut ParameterStore<F>, updates: Vec<NormUpdate<F>>) {
    let m = F::from_f64_lossy(BN_MOMENTUM);
    let keep = F::one() - m;
    for u in updates {
        for (r, &b) in store
            .get_mut(u.mean)
            .data_mut()
            .iter_mut()
            .zip(&u.batch_mean)
        {
            *r = keep * *r + m * b;
        }
        for (r, &b) in store.get_mut(u.var).data_mut().iter_mut().zip(&u.batch_var) {
            *r = keep * *r + m * b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Elu,
    Relu,
}

impl Activation {
    fn apply<F: Real>(self, tape: &mut Tape<F>, x: Var) -> Var {
        match self {
            Activation::Elu => tape.elu(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<F: Real>(
        store: &mut ParameterStore<F>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: f64,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.insert_glorot(&format!("{name}.w"), fan_in, fan_out, group, rng)?;
        let b = store.insert_constant(&format!("{name}.b"), vec![fan_out], bias, group)?;
        Ok(Linear { w, b, fan_out })
    }

    pub fn forward<F: Real>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.var(self.w), ctx.var(self.b));
        let y = ctx.tape.matmul(x, w)?;
        ctx.tape.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

/// Two fully connected layers with an activation after each, optionally
/// followed by batch normalization.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
    act: Activation,
    norm: Option<Norm>,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real>(
        store: &mut ParameterStore<F>,
        name: &str,
        n_in: usize,
        n_hid: usize,
        n_out: usize,
        act: Activation,
        batch_norm: bool,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bias = if act == Activation::Elu { 0.1 } else { 0.0 };
        let fc1 = Linear::new(store, &format!("{name}.fc1"), n_in, n_hid, bias, group, rng)?;
        let fc2 = Linear::new(
            store,
            &format!("{name}.fc2"),
            n_hid,
            n_out,
            bias,
            group,
            rng,
        )?;
        let norm = if batch_norm {
            Some(Norm {
                gamma: store.insert_constant(
                    &format!("{name}.bn.gamma"),
                    vec![n_out],
                    1.0,
                    group,
                )?,
                beta: store.insert_constant(&format!("{name}.bn.beta"), vec![n_out], 0.0, group)?,
                mean: store.insert_constant(
                    &format!("{name}.bn.running_mean"),
                    vec![n_out],
                    0.0,
                    ParamGroup::Buffer,
                )?,
                var: store.insert_constant(
                    &format!("{name}.bn.running_var"),
                    vec![n_out],
                    1.0,
                    ParamGroup::Buffer,
                )?,
            })
        } else {
            None
        };
        Ok(Mlp {
            fc1,
            fc2,
            act,
            norm,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.fc2.fan_out
    }

    pub fn forward<F: Real>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(ctx, x)?;
        let h = self.act.apply(ctx.tape, h);
        let h = self.fc2.forward(ctx, h)?;
        let h = self.act.apply(ctx.tape, h);
        let Some(n) = self.norm else { return Ok(h) };
        let (gamma, beta) = (ctx.var(n.gamma), ctx.var(n.beta));
        if ctx.train {
            let (y, stats) = ctx
                .tape
                .batch_norm(h, gamma, beta, BN_EPS, NormStats::Batch)?;
            if let Some((batch_mean, batch_var)) = stats {
                ctx.norm_updates.push(NormUpdate {
                    mean: n.mean,
                    var: n.var,
                    batch_mean,
                    batch_var,
                });
            }
            Ok(y)
        } else {
            let store = ctx.store;
            let stats = NormStats::Running {
                mean: store.get(n.mean).data(),
                var: store.get(n.var).data(),
            };
            Ok(ctx.tape.batch_norm(h, gamma, beta, BN_EPS, stats)?.0)
        }
    }
}

/// Ordered pairs `(i, j)`, `i != j`, enumerated with `i` outer: the layout of
/// every per-pair tensor in the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairIndex {
    pub num_objects: usize,
    pub send: Vec<usize>,
    pub recv: Vec<usize>,
}

impl PairIndex {
    pub fn new(num_objects: usize) -> Self {
        let mut send = Vec::new();
        let mut recv = Vec::new();
        for i in 0..num_objects {
            for j in 0..num_objects {
                if i != j {
                    send.push(i);
                    recv.push(j);
                }
            }
        }
        PairIndex {
            num_objects,
            send,
            recv,
        }
    }

    pub fn len(&self) -> usize {
        self.send.len()
    }

    pub fn is_empty(&self) -> bool {
        self.send.is_empty()
    }

    /// Position of pair `(i, j)`.
    pub fn pair(&self, i: usize, j: usize) -> usize {
        debug_assert!(i != j);
        i * (self.num_objects - 1) + if j > i { j - 1 } else { j }
    }

    /// Sender and receiver row indices for `instances` stacked graphs whose
    /// node rows are laid out instance-major.
    pub fn stacked(&self, instances: usize) -> (Vec<usize>, Vec<usize>) {
        let n = self.num_objects;
        let mut s = Vec::with_capacity(instances * self.len());
        let mut r = Vec::with_capacity(instances * self.len());
        for g in 0..instances {
            s.extend(self.send.iter().map(|&i| g * n + i));
            r.extend(self.recv.iter().map(|&j| g * n + j));
        }
        (s, r)
    }
}
