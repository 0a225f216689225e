//! Reverse-mode automatic differentiation over dense f64 matrices.
//!
//! Every forward operation appends a node holding its value and enough state
//! to run its vector-Jacobian product later. Parameters are read straight from
//! the [`ParamStore`] the tape borrows, so building a graph never copies
//! weights. [`Tape::backward`] walks the nodes in reverse and returns the
//! gradient of a scalar with respect to every parameter and every input that
//! was registered with [`Tape::input_with_grad`].

use std::collections::HashMap;

use ndarray::{concatenate, s, Array2, Axis};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Array2<f64>, rstd: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<Array2<f64>> },
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    Gather { table: Var, ids: Vec<usize> },
    RowNormalize { x: Var, norms: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Array2<f64>, count: usize },
}

#[derive(Debug)]
struct Node {
    value: Option<Array2<f64>>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    params: HashMap<ParamId, Array2<f64>>,
    inputs: HashMap<Var, Array2<f64>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.params.get(&id)
    }

    pub fn wrt(&self, var: Var) -> Option<&Array2<f64>> {
        self.inputs.get(&var)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Array2<f64>)> {
        self.params.iter().map(|(id, g)| (*id, g))
    }

    pub fn into_params(self) -> HashMap<ParamId, Array2<f64>> {
        self.params
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let inner = C * (x + A * x * x * x);
    let t = inner.tanh();
    let value = 0.5 * x * (1.0 + t);
    let deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (value, deriv)
}

/// Softmax over the allowed entries of each row; disallowed entries get 0.
pub fn masked_softmax(scores: &Array2<f64>, mask: Option<&Array2<bool>>) -> Result<Array2<f64>> {
    let mut out = Array2::zeros(scores.dim());
    for (i, row) in scores.rows().into_iter().enumerate() {
        let allowed = |j: usize| mask.is_none_or(|m| m[[i, j]]);
        if row.iter().enumerate().any(|(j, v)| allowed(j) && !v.is_finite()) {
            return Err(Error::NonFinite(format!("softmax row {i}")));
        }
        let max = row
            .iter()
            .enumerate()
            .filter(|(j, _)| allowed(*j))
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::invalid(format!("attention row {i} has no unmasked key")));
        }
        let mut sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            if allowed(j) {
                let e = (v - max).exp();
                out[[i, j]] = e;
                sum += e;
            }
        }
        out.row_mut(i).mapv_inplace(|e| e / sum);
    }
    Ok(out)
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(value), _) => value,
            (None, Op::Param(id)) => self.store.value(*id),
            (None, _) => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.value(v);
        debug_assert_eq!(value.dim(), (1, 1));
        value[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Input,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input whose gradient is reported by [`Gradients::wrt`].
    pub fn input_with_grad(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Input,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: !self.store.get(id).frozen,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// `x · wᵀ + b` with `w` stored as (out, in).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.ncols() != wv.ncols() {
            return Err(Error::shape(format!(
                "linear: input {:?} vs weight {:?}",
                xv.dim(),
                wv.dim()
            )));
        }
        let mut y = xv.dot(&wv.t());
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.dim() != (1, y.ncols()) {
                return Err(Error::shape(format!("linear: bias {:?}", bv.dim())));
            }
            y += bv;
        }
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(y, Op::Linear { x, w, b }, &parents))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.nrows() {
            return Err(Error::shape(format!("matmul {:?} x {:?}", av.dim(), bv.dim())));
        }
        let y = av.dot(bv);
        Ok(self.push(y, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.ncols() {
            return Err(Error::shape(format!("matmul_t {:?} x {:?}ᵀ", av.dim(), bv.dim())));
        }
        let y = av.dot(&bv.t());
        Ok(self.push(y, Op::MatMulT(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dim() != bv.dim() {
            return Err(Error::shape(format!("add {:?} + {:?}", av.dim(), bv.dim())));
        }
        let y = av + bv;
        Ok(self.push(y, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let y = self.value(a) * factor;
        self.push(y, Op::Scale(a, factor), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| gelu_parts(v).0);
        self.push(y, Op::Gelu(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.dim() != (1, cols) || bv.dim() != (1, cols) {
            return Err(Error::shape(format!(
                "layer_norm: width {cols} vs gain {:?} bias {:?}",
                gv.dim(),
                bv.dim()
            )));
        }
        let mut xhat = Array2::zeros((rows, cols));
        let mut rstd = Vec::with_capacity(rows);
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            xhat.row_mut(i).assign(&row.mapv(|v| (v - mean) * r));
            rstd.push(r);
        }
        let y = &xhat * gv + bv;
        Ok(self.push(y, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias]))
    }

    /// Multi-head scaled dot-product attention. `mask[i][j]` allows query `i`
    /// to read key `j`; masked keys receive zero weight.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Option<&Array2<bool>>) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (nq, d) = qv.dim();
        let nk = kv.nrows();
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(format!("{heads} heads do not divide width {d}")));
        }
        if kv.ncols() != d || vv.dim() != (nk, d) {
            return Err(Error::shape(format!(
                "attention q {:?} k {:?} v {:?}",
                qv.dim(),
                kv.dim(),
                vv.dim()
            )));
        }
        if let Some(m) = mask {
            if m.dim() != (nq, nk) {
                return Err(Error::shape(format!("attention mask {:?} vs ({nq}, {nk})", m.dim())));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((nq, d));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let scores = qv.slice(cols).dot(&kv.slice(cols).t()) * scale;
            let p = masked_softmax(&scores, mask)?;
            out.slice_mut(cols).assign(&p.dot(&vv.slice(cols)));
            probs.push(p);
        }
        Ok(self.push(out, Op::Attention { q, k, v, heads, probs }, &[q, k, v]))
    }

    /// Per-head attention weights recorded by an [`Tape::attention`] node.
    pub fn attention_weights(&self, v: Var) -> Option<&[Array2<f64>]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.nrows() || len == 0 {
            return Err(Error::shape(format!(
                "rows {start}..{} of {}",
                start + len,
                xv.nrows()
            )));
        }
        let y = xv.slice(s![start..start + len, ..]).to_owned();
        Ok(self.push(y, Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat of nothing"));
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let y = concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))?;
        Ok(self.push(y, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Rows `ids` of `table`, in order (repeats allowed).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= tv.nrows()) {
            return Err(Error::shape(format!("row {bad} of a {}-row table", tv.nrows())));
        }
        if ids.is_empty() {
            return Err(Error::shape("gather of no rows"));
        }
        let y = tv.select(Axis(0), ids);
        Ok(self.push(y, Op::Gather { table, ids: ids.to_vec() }, &[table]))
    }

    /// Scales each row to unit L2 norm. Zero rows are an error.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let norms: Vec<f64> = xv.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        if let Some(i) = norms.iter().position(|&n| n == 0.0) {
            return Err(Error::invalid(format!("row {i} is zero and cannot be normalized")));
        }
        let mut y = xv.clone();
        for (mut row, &n) in y.rows_mut().into_iter().zip(&norms) {
            row.mapv_inplace(|v| v / n);
        }
        Ok(self.push(y, Op::RowNormalize { x, norms }, &[x]))
    }

    /// Mean token cross-entropy over rows where `mask` is true. Returns a 1x1 node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, vocab) = lv.dim();
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::shape(format!(
                "cross_entropy: {rows} rows, {} targets, {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::invalid("cross-entropy needs at least one unmasked position"));
        }
        let mut probs = Array2::zeros((rows, vocab));
        let mut total = 0.0;
        for (i, row) in lv.rows().into_iter().enumerate() {
            if !mask[i] {
                continue;
            }
            if targets[i] >= vocab {
                return Err(Error::shape(format!("target {} outside vocab {vocab}", targets[i])));
            }
            let (argmax, max) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != argmax)
                .map(|(_, &v)| (v - max).exp())
                .sum();
            let lse = max + rest.ln_1p();
            total += lse - row[targets[i]];
            for (j, &v) in row.iter().enumerate() {
                probs[[i, j]] = (v - lse).exp();
            }
        }
        let y = Array2::from_elem((1, 1), total / count as f64);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            probs,
            count,
        };
        Ok(self.push(y, op, &[logits]))
    }

    /// Gradients of the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {
                    out.inputs.insert(Var(i), g);
                }
                Op::Param(id) => {
                    out.params.insert(*id, g);
                }
                Op::Linear { x, w, b } => {
                    if self.wants(*x) {
                        let dx = g.dot(self.value(*w));
                        self.acc(&mut grads, *x, dx);
                    }
                    if self.wants(*w) {
                        let dw = g.t().dot(self.value(*x));
                        self.acc(&mut grads, *w, dw);
                    }
                    if let Some(b) = b {
                        if self.wants(*b) {
                            let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                            self.acc(&mut grads, *b, db);
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    if self.wants(*a) {
                        let da = g.dot(&self.value(*b).t());
                        self.acc(&mut grads, *a, da);
                    }
                    if self.wants(*b) {
                        let db = self.value(*a).t().dot(&g);
                        self.acc(&mut grads, *b, db);
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.wants(*a) {
                        let da = g.dot(self.value(*b));
                        self.acc(&mut grads, *a, da);
                    }
                    if self.wants(*b) {
                        let db = g.t().dot(self.value(*a));
                        self.acc(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.wants(*b) {
                        self.acc(&mut grads, *b, g.clone());
                    }
                    if self.wants(*a) {
                        self.acc(&mut grads, *a, g);
                    }
                }
                Op::Scale(a, factor) => {
                    self.acc(&mut grads, *a, g * *factor);
                }
                Op::Gelu(x) => {
                    let dx = &g * &self.value(*x).mapv(|v| gelu_parts(v).1);
                    self.acc(&mut grads, *x, dx);
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    if self.wants(*gain) {
                        let dgain = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        self.acc(&mut grads, *gain, dgain);
                    }
                    if self.wants(*bias) {
                        let dbias = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        self.acc(&mut grads, *bias, dbias);
                    }
                    if self.wants(*x) {
                        let dxhat = &g * self.value(*gain);
                        let cols = dxhat.ncols() as f64;
                        let mut dx = Array2::zeros(dxhat.dim());
                        for (r, (drow, xrow)) in dxhat.rows().into_iter().zip(xhat.rows()).enumerate() {
                            let mean_d = drow.sum() / cols;
                            let mean_dx = drow.dot(&xrow) / cols;
                            let row = (&drow - mean_d - &(&xrow * mean_dx)) * rstd[r];
                            dx.row_mut(r).assign(&row);
                        }
                        self.acc(&mut grads, *x, dx);
                    }
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.ncols();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Array2::zeros(qv.dim());
                    let mut dk = Array2::zeros(kv.dim());
                    let mut dv = Array2::zeros(vv.dim());
                    for (h, p) in probs.iter().enumerate() {
                        let cols = s![.., h * dh..(h + 1) * dh];
                        let go = g.slice(cols);
                        let dp = go.dot(&vv.slice(cols).t());
                        dv.slice_mut(cols).assign(&p.t().dot(&go));
                        let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
                        let ds = p * &(&dp - &row_dot) * scale;
                        dq.slice_mut(cols).assign(&ds.dot(&kv.slice(cols)));
                        dk.slice_mut(cols).assign(&ds.t().dot(&qv.slice(cols)));
                    }
                    for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                        if self.wants(var) {
                            self.acc(&mut grads, var, d);
                        }
                    }
                }
                Op::SliceRows { x, start } => {
                    let mut dx = Array2::zeros(self.value(*x).dim());
                    dx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    self.acc(&mut grads, *x, dx);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).nrows();
                        if self.wants(p) {
                            let dp = g.slice(s![offset..offset + n, ..]).to_owned();
                            self.acc(&mut grads, p, dp);
                        }
                        offset += n;
                    }
                }
                Op::Gather { table, ids } => {
                    let mut dt = Array2::zeros(self.value(*table).dim());
                    for (row, &id) in ids.iter().enumerate() {
                        let mut target = dt.row_mut(id);
                        target += &g.row(row);
                    }
                    self.acc(&mut grads, *table, dt);
                }
                Op::RowNormalize { x, norms } => {
                    let y = node.value.as_ref().expect("value");
                    let mut dx = Array2::zeros(y.dim());
                    for (r, n) in norms.iter().enumerate() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let proj = gr.dot(&yr);
                        dx.row_mut(r).assign(&((&gr - &(&yr * proj)) / *n));
                    }
                    self.acc(&mut grads, *x, dx);
                }
                Op::CrossEntropy { logits, targets, mask, probs, count } => {
                    let upstream = g[[0, 0]] / *count as f64;
                    let mut dl = Array2::zeros(probs.dim());
                    for (r, &m) in mask.iter().enumerate() {
                        if !m {
                            continue;
                        }
                        let mut row = dl.row_mut(r);
                        row.assign(&(&probs.row(r) * upstream));
                        row[targets[r]] -= upstream;
                    }
                    self.acc(&mut grads, *logits, dl);
                }
            }
        }
        out
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn acc(&self, grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng64;

    fn random(rows: usize, cols: usize, rng: &mut Rng64) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || rng.normal())
    }

    /// Central-difference check of d(f)/d(input) for a graph built by `build`.
    fn check_inputs<F>(inputs: Vec<Array2<f64>>, build: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let vars: Vec<Var> = inputs.iter().map(|x| tape.input_with_grad(x.clone())).collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out);
        let eval = |xs: &[Array2<f64>]| {
            let mut t = Tape::new(&store);
            let vs: Vec<Var> = xs.iter().map(|x| t.input(x.clone())).collect();
            let o = build(&mut t, &vs);
            t.scalar(o)
        };
        let h = 1e-6;
        for (k, x) in inputs.iter().enumerate() {
            let analytic = grads.wrt(vars[k]).cloned().unwrap_or_else(|| Array2::zeros(x.dim()));
            for idx in 0..x.len() {
                let (r, c) = (idx / x.ncols(), idx % x.ncols());
                let mut plus = inputs.clone();
                plus[k][[r, c]] += h;
                let mut minus = inputs.clone();
                minus[k][[r, c]] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[[r, c]];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-5, "input {k} [{r},{c}]: analytic {a} numeric {numeric}");
            }
        }
    }

    /// Reduces any matrix to a scalar with fixed, non-uniform weights.
    fn probe(tape: &mut Tape, x: Var) -> Var {
        let (rows, cols) = tape.value(x).dim();
        let w = Array2::from_shape_fn((1, cols), |(_, c)| 0.3 + 0.7 * ((c * 7 + 1) as f64).sin());
        let wv = tape.input(w);
        let y = tape.linear(x, wv, None).unwrap();
        let ones = tape.input(Array2::from_shape_fn((1, rows), |(_, r)| 1.0 + 0.1 * r as f64));
        tape.matmul(ones, y).unwrap()
    }

    #[test]
    fn linear_and_matmul_gradients() {
        let mut rng = Rng64::new(1);
        check_inputs(vec![random(3, 4, &mut rng), random(5, 4, &mut rng), random(1, 5, &mut rng)], |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2])).unwrap();
            probe(t, y)
        });
        check_inputs(vec![random(3, 4, &mut rng), random(4, 2, &mut rng), random(5, 2, &mut rng)], |t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            let z = t.matmul_t(y, v[2]).unwrap();
            probe(t, z)
        });
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = Rng64::new(2);
        check_inputs(vec![random(3, 5, &mut rng), random(3, 5, &mut rng)], |t, v| {
            let a = t.add(v[0], v[1]).unwrap();
            let b = t.gelu(a);
            let c = t.scale(b, -1.7);
            probe(t, c)
        });
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = Rng64::new(3);
        check_inputs(
            vec![random(4, 6, &mut rng), random(1, 6, &mut rng), random(1, 6, &mut rng)],
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2]).unwrap();
                probe(t, y)
            },
        );
    }

    #[test]
    fn attention_gradients_with_mask() {
        let mut rng = Rng64::new(4);
        let mask = Array2::from_shape_fn((3, 5), |(i, j)| j <= i + 1);
        check_inputs(
            vec![random(3, 8, &mut rng), random(5, 8, &mut rng), random(5, 8, &mut rng)],
            move |t, v| {
                let y = t.attention(v[0], v[1], v[2], 2, Some(&mask)).unwrap();
                probe(t, y)
            },
        );
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = Rng64::new(5);
        check_inputs(vec![random(4, 3, &mut rng), random(2, 3, &mut rng)], |t, v| {
            let a = t.slice_rows(v[0], 1, 2).unwrap();
            let b = t.concat_rows(&[a, v[1], a]).unwrap();
            let c = t.gather_rows(b, &[0, 3, 3, 5]).unwrap();
            let d = t.row_normalize(c).unwrap();
            probe(t, d)
        });
    }

    #[test]
    fn cross_entropy_gradients() {
        let mut rng = Rng64::new(6);
        check_inputs(vec![random(4, 7, &mut rng)], |t, v| {
            t.cross_entropy(v[0], &[1, 6, 0, 2], &[true, false, true, true]).unwrap()
        });
    }

    #[test]
    fn softmax_rows_sum_to_one_and_respect_mask() {
        let mut rng = Rng64::new(7);
        let scores = random(4, 6, &mut rng);
        let mask = Array2::from_shape_fn((4, 6), |(i, j)| (i + j) % 3 != 0);
        let p = masked_softmax(&scores, Some(&mask)).unwrap();
        for (i, row) in p.rows().into_iter().enumerate() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            for j in 0..6 {
                if !mask[[i, j]] {
                    assert_eq!(row[j], 0.0);
                }
            }
        }
        let none = Array2::from_elem((1, 2), false);
        assert!(masked_softmax(&Array2::zeros((1, 2)), Some(&none)).is_err());
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        let mut rng = Rng64::new(8);
        let w = store.normal("w", 2, 3, 1.0, true, &mut rng);
        let u = store.normal("u", 1, 2, 1.0, false, &mut rng);
        let mut tape = Tape::new(&store);
        let x = tape.input(random(4, 3, &mut rng));
        let wv = tape.param(w);
        assert_eq!(tape.param(w), wv);
        let y = tape.linear(x, wv, None).unwrap();
        let uv = tape.param(u);
        let z = tape.linear(y, uv, None).unwrap();
        let ones = tape.input(Array2::ones((1, 4)));
        let s = tape.matmul(ones, z).unwrap();
        let grads = tape.backward(s);
        assert!(grads.param(w).is_none());
        assert_eq!(grads.param(u).unwrap().dim(), (1, 2));
    }
}
