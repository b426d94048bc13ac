use super::kernels::{matmul, matmul_acc, matmul_nt_acc, matmul_tn_acc, transpose};
use super::tape::{Tape, Var};
use super::{numel, Real};
use crate::error::{Error, Result};

/// Recorded operation with whatever the backward rule needs beyond the
/// input and output values already stored on the tape.
pub(crate) enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    ScaleBy(Var, Var),
    Elu(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax {
        x: Var,
        inv_tau: F,
    },
    LogSoftmax {
        x: Var,
        inv_tau: F,
    },
    Sum(Var),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ScatterAddRows {
        x: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
    Transpose(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
        batch_stats: bool,
    },
    Conv1d {
        x: Var,
        k: Var,
        unfolded: Vec<F>,
        kmat: Vec<F>,
    },
    MaxPoolTime {
        x: Var,
        argmax: Vec<usize>,
    },
    StraightThrough(Var),
}

impl<F: Real> Op<F> {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b)
            | Add(a, b)
            | Sub(a, b)
            | Mul(a, b)
            | AddRow(a, b)
            | MulRow(a, b)
            | MulCol(a, b)
            | ScaleBy(a, b) => vec![*a, *b],
            Scale(a, _)
            | AddScalar(a)
            | Elu(a)
            | Relu(a)
            | Exp(a)
            | Log(a)
            | Sum(a)
            | Reshape(a)
            | Transpose(a)
            | StraightThrough(a) => vec![*a],
            Softmax { x, .. }
            | LogSoftmax { x, .. }
            | SliceCols { x, .. }
            | GatherRows { x, .. }
            | ScatterAddRows { x, .. }
            | MaxPoolTime { x, .. } => vec![*x],
            ConcatCols(vs) => vs.clone(),
            BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Conv1d { x, k, .. } => vec![*x, *k],
        }
    }

    pub(crate) fn backward(
        &self,
        tape: &Tape<F>,
        idx: usize,
        g: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let out = &tape.nodes[idx];
        let val = |v: &Var| tape.value(*v);
        match self {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (tape.shape(*a)[0], tape.shape(*a)[1]);
                let n = tape.shape(*b)[1];
                tape.acc(grads, *a, |ga| matmul_nt_acc(g, val(b), ga, m, n, k));
                tape.acc(grads, *b, |gb| matmul_tn_acc(val(a), g, gb, m, k, n));
            }
            Op::Add(a, b) => {
                tape.acc(grads, *a, |ga| add_into(ga, g));
                tape.acc(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                tape.acc(grads, *a, |ga| add_into(ga, g));
                tape.acc(grads, *b, |gb| {
                    gb.iter_mut().zip(g).for_each(|(d, &s)| *d -= s);
                });
            }
            Op::Mul(a, b) => {
                tape.acc(grads, *a, |ga| {
                    for ((d, &s), &o) in ga.iter_mut().zip(g).zip(val(b)) {
                        *d += s * o;
                    }
                });
                tape.acc(grads, *b, |gb| {
                    for ((d, &s), &o) in gb.iter_mut().zip(g).zip(val(a)) {
                        *d += s * o;
                    }
                });
            }
            Op::AddRow(a, row) => {
                let n = val(row).len();
                tape.acc(grads, *a, |ga| add_into(ga, g));
                tape.acc(grads, *row, |gr| {
                    for chunk in g.chunks_exact(n) {
                        add_into(gr, chunk);
                    }
                });
            }
            Op::MulRow(a, row) => {
                let n = val(row).len();
                let r = val(row);
                tape.acc(grads, *a, |ga| {
                    for (gchunk, dchunk) in g.chunks_exact(n).zip(ga.chunks_exact_mut(n)) {
                        for ((d, &s), &rv) in dchunk.iter_mut().zip(gchunk).zip(r) {
                            *d += s * rv;
                        }
                    }
                });
                tape.acc(grads, *row, |gr| {
                    for (gchunk, achunk) in g.chunks_exact(n).zip(val(a).chunks_exact(n)) {
                        for ((d, &s), &av) in gr.iter_mut().zip(gchunk).zip(achunk) {
                            *d += s * av;
                        }
                    }
                });
            }
            Op::MulCol(a, col) => {
                let c = val(col);
                let n = g.len() / c.len();
                tape.acc(grads, *a, |ga| {
                    for ((dchunk, gchunk), &cv) in
                        ga.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(c)
                    {
                        for (d, &s) in dchunk.iter_mut().zip(gchunk) {
                            *d += s * cv;
                        }
                    }
                });
                tape.acc(grads, *col, |gc| {
                    for ((d, gchunk), achunk) in gc
                        .iter_mut()
                        .zip(g.chunks_exact(n))
                        .zip(val(a).chunks_exact(n))
                    {
                        *d += gchunk.iter().zip(achunk).map(|(&s, &av)| s * av).sum::<F>();
                    }
                });
            }
            Op::Scale(a, c) => {
                tape.acc(grads, *a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s * *c);
                });
            }
            Op::AddScalar(a) => tape.acc(grads, *a, |ga| add_into(ga, g)),
            Op::ScaleBy(a, s) => {
                let sv = val(s)[0];
                tape.acc(grads, *a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * sv);
                });
                tape.acc(grads, *s, |gs| {
                    gs[0] += g.iter().zip(val(a)).map(|(&gv, &av)| gv * av).sum::<F>();
                });
            }
            Op::Elu(a) => {
                tape.acc(grads, *a, |ga| {
                    for (((d, &s), &x), &y) in ga.iter_mut().zip(g).zip(val(a)).zip(&out.data) {
                        *d += if x > F::zero() { s } else { s * (y + F::one()) };
                    }
                });
            }
            Op::Relu(a) => {
                tape.acc(grads, *a, |ga| {
                    for ((d, &s), &x) in ga.iter_mut().zip(g).zip(val(a)) {
                        if x > F::zero() {
                            *d += s;
                        }
                    }
                });
            }
            Op::Exp(a) => {
                tape.acc(grads, *a, |ga| {
                    for ((d, &s), &y) in ga.iter_mut().zip(g).zip(&out.data) {
                        *d += s * y;
                    }
                });
            }
            Op::Log(a) => {
                tape.acc(grads, *a, |ga| {
                    for ((d, &s), &x) in ga.iter_mut().zip(g).zip(val(a)) {
                        *d += s / x;
                    }
                });
            }
            Op::Softmax { x, inv_tau } => {
                let c = *out.shape.last().unwrap();
                tape.acc(grads, *x, |gx| {
                    for ((dchunk, gchunk), ychunk) in gx
                        .chunks_exact_mut(c)
                        .zip(g.chunks_exact(c))
                        .zip(out.data.chunks_exact(c))
                    {
                        let dot: F = gchunk.iter().zip(ychunk).map(|(&s, &y)| s * y).sum();
                        for ((d, &s), &y) in dchunk.iter_mut().zip(gchunk).zip(ychunk) {
                            *d += *inv_tau * y * (s - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax { x, inv_tau } => {
                let c = *out.shape.last().unwrap();
                tape.acc(grads, *x, |gx| {
                    for ((dchunk, gchunk), ychunk) in gx
                        .chunks_exact_mut(c)
                        .zip(g.chunks_exact(c))
                        .zip(out.data.chunks_exact(c))
                    {
                        let total: F = gchunk.iter().copied().sum();
                        for ((d, &s), &y) in dchunk.iter_mut().zip(gchunk).zip(ychunk) {
                            *d += *inv_tau * (s - y.exp() * total);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                tape.acc(grads, *a, |ga| ga.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::ConcatCols(vs) => {
                let m = out.shape[0];
                let total = out.shape[1];
                let mut offset = 0;
                for v in vs {
                    let w = tape.shape(*v)[1];
                    tape.acc(grads, *v, |gv| {
                        for r in 0..m {
                            add_into(
                                &mut gv[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let xs = tape.shape(*x);
                let (m, n) = (xs[0], xs[1]);
                let w = out.shape[1];
                tape.acc(grads, *x, |gx| {
                    for r in 0..m {
                        add_into(
                            &mut gx[r * n + start..r * n + start + w],
                            &g[r * w..(r + 1) * w],
                        );
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let row = g.len() / idx.len().max(1);
                tape.acc(grads, *x, |gx| {
                    for (o, &src) in idx.iter().enumerate() {
                        add_into(
                            &mut gx[src * row..(src + 1) * row],
                            &g[o * row..(o + 1) * row],
                        );
                    }
                });
            }
            Op::ScatterAddRows { x, idx } => {
                let row = val(x).len() / idx.len().max(1);
                tape.acc(grads, *x, |gx| {
                    for (i, &dst) in idx.iter().enumerate() {
                        add_into(
                            &mut gx[i * row..(i + 1) * row],
                            &g[dst * row..(dst + 1) * row],
                        );
                    }
                });
            }
            Op::Reshape(a) => tape.acc(grads, *a, |ga| add_into(ga, g)),
            Op::Transpose(a) => {
                let (m, n) = (out.shape[0], out.shape[1]);
                let gt = transpose(g, m, n);
                tape.acc(grads, *a, |ga| add_into(ga, &gt));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let n = inv_std.len();
                let m = g.len() / n;
                let gm = val(gamma);
                let mut sum_g = vec![F::zero(); n];
                let mut sum_gx = vec![F::zero(); n];
                for (gchunk, hchunk) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                    for j in 0..n {
                        sum_g[j] += gchunk[j];
                        sum_gx[j] += gchunk[j] * hchunk[j];
                    }
                }
                tape.acc(grads, *beta, |gb| add_into(gb, &sum_g));
                tape.acc(grads, *gamma, |gg| add_into(gg, &sum_gx));
                let mf = F::from_usize(m).unwrap();
                tape.acc(grads, *x, |gx| {
                    for ((dchunk, gchunk), hchunk) in gx
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(xhat.chunks_exact(n))
                    {
                        for j in 0..n {
                            let scale = gm[j] * inv_std[j];
                            dchunk[j] += if *batch_stats {
                                scale * (gchunk[j] - sum_g[j] / mf - hchunk[j] * sum_gx[j] / mf)
                            } else {
                                scale * gchunk[j]
                            };
                        }
                    }
                });
            }
            Op::Conv1d {
                x,
                k,
                unfolded,
                kmat,
            } => {
                let xs = tape.shape(*x);
                let (b, l, c) = (xs[0], xs[1], xs[2]);
                let ks = tape.shape(*k);
                let (o, w) = (ks[0], ks[2]);
                let lo = l - w + 1;
                let rows = b * lo;
                let wc = w * c;
                tape.acc(grads, *k, |gk| {
                    let mut gkmat = vec![F::zero(); wc * o];
                    matmul_tn_acc(unfolded, g, &mut gkmat, rows, wc, o);
                    for oi in 0..o {
                        for ci in 0..c {
                            for wi in 0..w {
                                gk[(oi * c + ci) * w + wi] += gkmat[(wi * c + ci) * o + oi];
                            }
                        }
                    }
                });
                tape.acc(grads, *x, |gx| {
                    let mut gu = vec![F::zero(); rows * wc];
                    matmul_nt_acc(g, kmat, &mut gu, rows, o, wc);
                    for bi in 0..b {
                        for li in 0..lo {
                            let urow = &gu[(bi * lo + li) * wc..(bi * lo + li + 1) * wc];
                            let start = (bi * l + li) * c;
                            add_into(&mut gx[start..start + wc], urow);
                        }
                    }
                });
            }
            Op::MaxPoolTime { x, argmax } => {
                tape.acc(grads, *x, |gx| {
                    for (&src, &s) in argmax.iter().zip(g) {
                        gx[src] += s;
                    }
                });
            }
            Op::StraightThrough(soft) => tape.acc(grads, *soft, |gs| add_into(gs, g)),
        }
    }
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

/// Running statistics mode for [`Tape::batch_norm`].
pub enum NormStats<'a, F> {
    /// Normalize with the batch's own mean and biased variance.
    Batch,
    /// Normalize with stored running statistics.
    Running { mean: &'a [F], var: &'a [F] },
}

impl<F: Real> Tape<F> {
    fn rank2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::shape(op, s, &[0, 0])),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn map(&mut self, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let data = self.value(a).iter().map(|&v| f(v)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2(a, "matmul")?;
        let (k2, n) = self.rank2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let data = matmul(self.value(a), self.value(b), m, k, n);
        Ok(self.push(vec![m, n], data, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), data, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x - y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), data, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), data, Op::Mul(a, b)))
    }

    /// `a[m×n] + row[n]`, broadcasting the row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.value(row).len();
        let an = *self.shape(a).last().unwrap();
        if an != n {
            return Err(Error::shape("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row);
        let mut data = self.value(a).to_vec();
        for chunk in data.chunks_exact_mut(n) {
            chunk.iter_mut().zip(r).for_each(|(d, &v)| *d += v);
        }
        Ok(self.push(self.shape(a).to_vec(), data, Op::AddRow(a, row)))
    }

    /// `a[m×n] ⊙ row[n]`, broadcasting the row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.value(row).len();
        let an = *self.shape(a).last().unwrap();
        if an != n {
            return Err(Error::shape("mul_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row);
        let mut data = self.value(a).to_vec();
        for chunk in data.chunks_exact_mut(n) {
            chunk.iter_mut().zip(r).for_each(|(d, &v)| *d *= v);
        }
        Ok(self.push(self.shape(a).to_vec(), data, Op::MulRow(a, row)))
    }

    /// `a[m×…] ⊙ col[m]`, scaling each leading-axis row by one value.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let m = self.shape(a)[0];
        if self.value(col).len() != m {
            return Err(Error::shape("mul_col", self.shape(a), self.shape(col)));
        }
        let n = self.value(a).len() / m;
        let c = self.value(col);
        let mut data = self.value(a).to_vec();
        for (chunk, &cv) in data.chunks_exact_mut(n).zip(c) {
            chunk.iter_mut().for_each(|d| *d *= cv);
        }
        Ok(self.push(self.shape(a).to_vec(), data, Op::MulCol(a, col)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = F::from_f64_lossy(c);
        self.map(a, |v| v * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = F::from_f64_lossy(c);
        self.map(a, |v| v + c, Op::AddScalar(a))
    }

    /// Multiplies every element of `a` by the single value held in `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("scale_by", self.shape(a), self.shape(s)));
        }
        let sv = self.value(s)[0];
        Ok(self.map(a, |v| v * sv, Op::ScaleBy(a, s)))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.map(
            a,
            |v| if v > F::zero() { v } else { v.exp_m1() },
            Op::Elu(a),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |v| v.max(F::zero()), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, F::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, F::ln, Op::Log(a))
    }

    /// Softmax of `x / tau` along the trailing axis.
    pub fn softmax(&mut self, x: Var, tau: f64) -> Result<Var> {
        let inv_tau = inv_temperature::<F>(tau)?;
        let c = *self.shape(x).last().unwrap();
        let mut data = self.value(x).to_vec();
        for row in data.chunks_exact_mut(c) {
            softmax_in_place(row, inv_tau);
        }
        Ok(self.push(self.shape(x).to_vec(), data, Op::Softmax { x, inv_tau }))
    }

    /// Log-softmax of `x / tau` along the trailing axis.
    pub fn log_softmax(&mut self, x: Var, tau: f64) -> Result<Var> {
        let inv_tau = inv_temperature::<F>(tau)?;
        let c = *self.shape(x).last().unwrap();
        let mut data = self.value(x).to_vec();
        for row in data.chunks_exact_mut(c) {
            log_softmax_in_place(row, inv_tau);
        }
        Ok(self.push(self.shape(x).to_vec(), data, Op::LogSoftmax { x, inv_tau }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        self.push(vec![1], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn concat_cols(&mut self, vs: &[Var]) -> Result<Var> {
        let (m, _) = self.rank2(vs[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(vs.len());
        for &v in vs {
            let (mv, nv) = self.rank2(v, "concat_cols")?;
            if mv != m {
                return Err(Error::shape(
                    "concat_cols",
                    self.shape(vs[0]),
                    self.shape(v),
                ));
            }
            widths.push(nv);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&v, &w) in vs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(v)[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(vec![m, total], data, Op::ConcatCols(vs.to_vec())))
    }

    /// Columns `start..end` of a rank-2 value.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.rank2(x, "slice_cols")?;
        if start >= end || end > n {
            return Err(Error::shape("slice_cols", self.shape(x), &[start, end]));
        }
        let w = end - start;
        let src = self.value(x);
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + end]);
        }
        Ok(self.push(vec![m, w], data, Op::SliceCols { x, start }))
    }

    /// Selects leading-axis rows of `x` by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = shape[0];
        let row = numel(&shape[1..]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", &shape, &[bad]));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            data.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape;
        out_shape[0] = idx.len();
        Ok(self.push(
            out_shape,
            data,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Sums leading-axis rows of `x` into `n_out` buckets: row `i` goes to `idx[i]`.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], n_out: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if idx.len() != shape[0] {
            return Err(Error::shape("scatter_add_rows", &shape, &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n_out) {
            return Err(Error::shape("scatter_add_rows", &shape, &[bad, n_out]));
        }
        let row = numel(&shape[1..]);
        let src = self.value(x);
        let mut data = vec![F::zero(); n_out * row];
        for (i, &dst) in idx.iter().enumerate() {
            add_into(
                &mut data[dst * row..(dst + 1) * row],
                &src[i * row..(i + 1) * row],
            );
        }
        let mut out_shape = shape;
        out_shape[0] = n_out;
        Ok(self.push(
            out_shape,
            data,
            Op::ScatterAddRows {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), &shape));
        }
        let data = self.value(x).to_vec();
        Ok(self.push(shape, data, Op::Reshape(x)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.rank2(x, "transpose")?;
        let data = transpose(self.value(x), m, n);
        Ok(self.push(vec![n, m], data, Op::Transpose(x)))
    }

    /// Per-column normalization followed by an affine map.
    ///
    /// Returns the output and, in batch mode, the batch mean and biased
    /// variance so the caller can update running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        stats: NormStats<'_, F>,
    ) -> Result<(Var, Option<(Vec<F>, Vec<F>)>)> {
        let (m, n) = self.rank2(x, "batch_norm")?;
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::shape("batch_norm", self.shape(x), self.shape(gamma)));
        }
        let eps = F::from_f64_lossy(eps);
        let xs = self.value(x);
        let (mean, var, batch_stats) = match stats {
            NormStats::Batch => {
                let mf = F::from_usize(m).unwrap();
                let mut mean = vec![F::zero(); n];
                for row in xs.chunks_exact(n) {
                    add_into(&mut mean, row);
                }
                mean.iter_mut().for_each(|v| *v /= mf);
                let mut var = vec![F::zero(); n];
                for row in xs.chunks_exact(n) {
                    for j in 0..n {
                        let d = row[j] - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= mf);
                (mean, var, true)
            }
            NormStats::Running { mean, var } => (mean.to_vec(), var.to_vec(), false),
        };
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let gm = self.value(gamma);
        let bt = self.value(beta);
        let mut xhat = Vec::with_capacity(m * n);
        let mut data = Vec::with_capacity(m * n);
        for row in xs.chunks_exact(n) {
            for j in 0..n {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                data.push(gm[j] * h + bt[j]);
            }
        }
        let out = self.push(
            vec![m, n],
            data,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        );
        Ok((out, batch_stats.then_some((mean, var))))
    }

    /// Valid cross-correlation along time for channels-last input.
    ///
    /// `x` is `[batch, length, channels]`, `k` is `[out, channels, width]`,
    /// and the result is `[batch, length - width + 1, out]`.
    pub fn conv1d(&mut self, x: Var, k: Var) -> Result<Var> {
        let (b, l, c) = match self.shape(x) {
            [b, l, c] => (*b, *l, *c),
            s => return Err(Error::shape("conv1d", s, self.shape(k))),
        };
        let (o, kc, w) = match self.shape(k) {
            [o, kc, w] => (*o, *kc, *w),
            s => return Err(Error::shape("conv1d", self.shape(x), s)),
        };
        if kc != c {
            return Err(Error::shape("conv1d", self.shape(x), self.shape(k)));
        }
        if l < w {
            return Err(Error::Shape {
                op: "conv1d (length shorter than kernel)",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(k).to_vec(),
            });
        }
        let lo = l - w + 1;
        let wc = w * c;
        let xs = self.value(x);
        let mut unfolded = Vec::with_capacity(b * lo * wc);
        for bi in 0..b {
            for li in 0..lo {
                let start = (bi * l + li) * c;
                unfolded.extend_from_slice(&xs[start..start + wc]);
            }
        }
        let ks = self.value(k);
        let mut kmat = vec![F::zero(); wc * o];
        for oi in 0..o {
            for ci in 0..c {
                for wi in 0..w {
                    kmat[(wi * c + ci) * o + oi] = ks[(oi * c + ci) * w + wi];
                }
            }
        }
        let mut data = vec![F::zero(); b * lo * o];
        matmul_acc(&unfolded, &kmat, &mut data, b * lo, wc, o);
        Ok(self.push(
            vec![b, lo, o],
            data,
            Op::Conv1d {
                x,
                k,
                unfolded,
                kmat,
            },
        ))
    }

    /// Channels-first single-sequence convolution: `x[channels×L]`,
    /// `k[out×channels×w]` → `[out×(L−w+1)]`.
    pub fn conv1d_temporal(&mut self, x: Var, k: Var) -> Result<Var> {
        let (c, l) = self.rank2(x, "conv1d_temporal")?;
        let xt = self.transpose(x)?;
        let x3 = self.reshape(xt, [1, l, c])?;
        let y = self.conv1d(x3, k)?;
        let (lo, o) = (self.shape(y)[1], self.shape(y)[2]);
        let y2 = self.reshape(y, [lo, o])?;
        self.transpose(y2)
    }

    /// Max over the time axis of `[batch, length, channels]` → `[batch, channels]`.
    pub fn max_pool_time(&mut self, x: Var) -> Result<Var> {
        let (b, l, c) = match self.shape(x) {
            [b, l, c] => (*b, *l, *c),
            s => return Err(Error::shape("max_pool_time", s, &[0, 0, 0])),
        };
        let xs = self.value(x);
        let mut data = Vec::with_capacity(b * c);
        let mut argmax = Vec::with_capacity(b * c);
        for bi in 0..b {
            for ci in 0..c {
                let mut best = bi * l * c + ci;
                for li in 1..l {
                    let at = (bi * l + li) * c + ci;
                    if xs[at] > xs[best] {
                        best = at;
                    }
                }
                data.push(xs[best]);
                argmax.push(best);
            }
        }
        Ok(self.push(vec![b, c], data, Op::MaxPoolTime { x, argmax }))
    }

    /// Value `hard`, gradient routed unchanged to `soft`.
    pub fn straight_through(&mut self, hard: Vec<F>, soft: Var) -> Result<Var> {
        if hard.len() != self.value(soft).len() {
            return Err(Error::shape(
                "straight_through",
                &[hard.len()],
                self.shape(soft),
            ));
        }
        Ok(self.push(self.shape(soft).to_vec(), hard, Op::StraightThrough(soft)))
    }
}

fn inv_temperature<F: Real>(tau: f64) -> Result<F> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    Ok(F::from_f64_lossy(1.0 / tau))
}

pub(crate) fn softmax_in_place<F: Real>(row: &mut [F], inv_tau: F) {
    let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let mut total = F::zero();
    for v in row.iter_mut() {
        *v = ((*v - max) * inv_tau).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

pub(crate) fn log_softmax_in_place<F: Real>(row: &mut [F], inv_tau: F) {
    let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let lse = row
        .iter()
        .map(|&v| ((v - max) * inv_tau).exp())
        .sum::<F>()
        .ln();
    row.iter_mut().for_each(|v| *v = (*v - max) * inv_tau - lse);
}

/// Softmax with temperature on a plain slice, trailing axis of width `classes`.
pub fn softmax_with_temperature<F: Real>(logits: &[F], classes: usize, tau: f64) -> Result<Vec<F>> {
    let inv_tau = inv_temperature::<F>(tau)?;
    if classes == 0 || !logits.len().is_multiple_of(classes) {
        return Err(Error::shape("softmax", &[logits.len()], &[classes]));
    }
    let mut out = logits.to_vec();
    for row in out.chunks_exact_mut(classes) {
        softmax_in_place(row, inv_tau);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn leaf(tape: &mut Tape<f64>, shape: &[usize], data: &[f64]) -> Var {
        tape.constant(&Tensor::new(shape.to_vec(), data.to_vec()).unwrap())
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2, 2], &[1., 2., 3., 4.]);
        let ones = leaf(&mut tape, &[2, 1], &[1., 1.]);
        let c = tape.matmul(a, ones).unwrap();
        assert_eq!(tape.value(c), &[3., 7.]);

        let eye = leaf(&mut tape, &[2, 2], &[1., 0., 0., 1.]);
        let c = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(c), tape.value(a));

        let zero = leaf(&mut tape, &[2, 3], &[0.; 6]);
        let c = tape.matmul(a, zero).unwrap();
        assert_eq!(tape.value(c), &[0.; 6]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = leaf(&mut tape, &[2, 3], &[0.; 6]);
        let b = leaf(&mut tape, &[2, 3], &[0.; 6]);
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_with_temperature(&[0.0f64, 0.0], 2, 0.5).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        let p = softmax_with_temperature(&[1.0f64, 0.0], 2, 1.0).unwrap();
        assert!((p[0] - 0.7311).abs() < 1e-4 && (p[1] - 0.2689).abs() < 1e-4);
        let p = softmax_with_temperature(&[1.0f64, 0.0], 2, 0.5).unwrap();
        assert!((p[0] - 0.8808).abs() < 1e-4 && (p[1] - 0.1192).abs() < 1e-4);
        assert!(softmax_with_temperature(&[1.0f64, 0.0], 2, 0.0).is_err());
        assert!(softmax_with_temperature(&[1.0f64, 0.0], 2, -1.0).is_err());
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let p = softmax_with_temperature(&[1e4f32, -1e4, 3e3, 1e4], 4, 0.5).unwrap();
        assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn conv_examples() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 3], &[1., 2., 3.]);
        let id = leaf(&mut tape, &[1, 1, 1], &[1.]);
        let y = tape.conv1d_temporal(x, id).unwrap();
        assert_eq!(tape.value(y), &[1., 2., 3.]);

        let avg = leaf(&mut tape, &[1, 1, 2], &[0.5, 0.5]);
        let y = tape.conv1d_temporal(x, avg).unwrap();
        assert_eq!(tape.shape(y), &[1, 2]);
        assert_eq!(tape.value(y), &[1.5, 2.5]);

        let wide = leaf(&mut tape, &[1, 1, 4], &[1.; 4]);
        assert!(matches!(
            tape.conv1d_temporal(x, wide),
            Err(Error::Shape { .. })
        ));

        let seq = leaf(&mut tape, &[1, 3, 1], &[1., 3., 2.]);
        let m = tape.max_pool_time(seq).unwrap();
        assert_eq!(tape.value(m), &[3.]);
    }
}
