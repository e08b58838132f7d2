//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is an append-only tape: every operation pushes one node
//! holding the forward value and, when any input requires a gradient, a
//! backward closure keyed by node ids. Insertion order is topological
//! order, so `backward` is a single reverse sweep that visits each node
//! exactly once and accumulates (sums) gradient contributions, which
//! makes shared subexpressions correct by construction.
//!
//! Every forward op validates shapes and rejects non-finite outputs.

use crate::error::{Error, Result};
use crate::numerics::tensor::TensorData;
use crate::scalar::Scalar;

/// Handle to a node in a [`Graph`]. Cheap to copy; only meaningful for
/// the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor {
    pub(crate) id: usize,
}

impl Tensor {
    pub fn id(&self) -> usize {
        self.id
    }
}

/// Gradient contributions returned by a backward closure: one flat
/// buffer per (input node, same shape as that input).
type Contribs<S> = Vec<(usize, Vec<S>)>;
type BackwardFn<S> = Box<dyn Fn(&[TensorData<S>], &[S]) -> Contribs<S> + Send>;

pub struct Graph<S: Scalar> {
    values: Vec<TensorData<S>>,
    grads: Vec<Option<Vec<S>>>,
    requires: Vec<bool>,
    records: Vec<Option<BackwardFn<S>>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            grads: Vec::new(),
            requires: Vec::new(),
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Insert a leaf node. Leaves with `requires_grad` collect gradients
    /// during `backward`.
    pub fn leaf(&mut self, value: TensorData<S>, requires_grad: bool) -> Result<Tensor> {
        check_finite("leaf", &value)?;
        Ok(self.push(value, requires_grad, None))
    }

    /// Leaf that never receives a gradient (masks, targets, constants).
    pub fn constant(&mut self, value: TensorData<S>) -> Result<Tensor> {
        self.leaf(value, false)
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        self.values[t.id].shape()
    }

    pub fn value(&self, t: Tensor) -> &TensorData<S> {
        &self.values[t.id]
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.requires[t.id]
    }

    /// Gradient buffer of `t`, if `backward` has reached it.
    pub fn grad(&self, t: Tensor) -> Option<&[S]> {
        self.grads[t.id].as_deref()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Reverse sweep from a scalar output. Gradients accumulate into any
    /// node with `requires_grad` on a path to `output`.
    pub fn backward(&mut self, output: Tensor) -> Result<()> {
        if self.values[output.id].numel() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar output, got shape {:?}",
                self.values[output.id].shape()
            )));
        }
        if !self.requires[output.id] {
            return Ok(());
        }
        self.accumulate(output.id, vec![S::one()]);
        for id in (0..=output.id).rev() {
            if !self.requires[id] {
                continue;
            }
            let contribs = {
                let rec = match &self.records[id] {
                    Some(r) => r,
                    None => continue,
                };
                let gout = match &self.grads[id] {
                    Some(g) => g.as_slice(),
                    None => continue,
                };
                rec(&self.values, gout)
            };
            for (tid, c) in contribs {
                if self.requires[tid] {
                    self.accumulate(tid, c);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: usize, contrib: Vec<S>) {
        debug_assert_eq!(contrib.len(), self.values[id].numel());
        match &mut self.grads[id] {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(&contrib) {
                    *gi += *ci;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn push(
        &mut self,
        value: TensorData<S>,
        requires: bool,
        record: Option<BackwardFn<S>>,
    ) -> Tensor {
        let id = self.values.len();
        self.values.push(value);
        self.grads.push(None);
        self.requires.push(requires);
        self.records.push(if requires { record } else { None });
        Tensor { id }
    }

    /// Push one op result. `record` receives the id the new node will get,
    /// so backward closures can read their own forward output from the tape.
    fn emit(
        &mut self,
        op: &'static str,
        value: TensorData<S>,
        inputs: &[Tensor],
        record: impl FnOnce(usize) -> BackwardFn<S>,
    ) -> Result<Tensor> {
        check_finite(op, &value)?;
        let requires = inputs.iter().any(|t| self.requires[t.id]);
        let out_id = self.values.len();
        let rec = if requires { Some(record(out_id)) } else { None };
        Ok(self.push(value, requires, rec))
    }

    // ----- elementwise and linear-algebra ops -----

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("add", a, b)?;
        let out = zip_map(&self.values[a.id], &self.values[b.id], |x, y| x + y);
        let (ai, bi) = (a.id, b.id);
        self.emit("add", out, &[a, b], |_| {
            Box::new(move |_, g| vec![(ai, g.to_vec()), (bi, g.to_vec())])
        })
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("sub", a, b)?;
        let out = zip_map(&self.values[a.id], &self.values[b.id], |x, y| x - y);
        let (ai, bi) = (a.id, b.id);
        self.emit("sub", out, &[a, b], |_| {
            Box::new(move |_, g| {
                vec![
                    (ai, g.to_vec()),
                    (bi, g.iter().map(|v| -*v).collect()),
                ]
            })
        })
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(&self.values[a.id], &self.values[b.id], |x, y| x * y);
        let (ai, bi) = (a.id, b.id);
        self.emit("mul", out, &[a, b], |_| {
            Box::new(move |vals, g| {
                let av = vals[ai].data();
                let bv = vals[bi].data();
                vec![
                    (ai, g.iter().zip(bv).map(|(gi, x)| *gi * *x).collect()),
                    (bi, g.iter().zip(av).map(|(gi, x)| *gi * *x).collect()),
                ]
            })
        })
    }

    pub fn scale(&mut self, a: Tensor, factor: S) -> Result<Tensor> {
        let out = map(&self.values[a.id], |x| x * factor);
        let ai = a.id;
        self.emit("scale", out, &[a], |_| {
            Box::new(move |_, g| vec![(ai, g.iter().map(|v| *v * factor).collect())])
        })
    }

    /// Broadcast `bias` (shape `[d]`) over the leading axes of `x`
    /// (shape `[..., d]`).
    pub fn add_bias(&mut self, x: Tensor, bias: Tensor) -> Result<Tensor> {
        let xs = self.values[x.id].shape().to_vec();
        let bs = self.values[bias.id].shape();
        let d = *xs.last().ok_or_else(|| {
            Error::Dimension("add_bias: x must have rank >= 1".into())
        })?;
        if bs != [d] {
            return Err(Error::Dimension(format!(
                "add_bias: bias shape {:?} does not match last axis {}",
                bs, d
            )));
        }
        let bv = self.values[bias.id].data().to_vec();
        let mut out = self.values[x.id].clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, b) in row.iter_mut().zip(&bv) {
                *o += *b;
            }
        }
        let (xi, bi) = (x.id, bias.id);
        self.emit("add_bias", out, &[x, bias], |_| {
            Box::new(move |_, g| {
                let mut db = vec![S::zero(); d];
                for row in g.chunks(d) {
                    for (s, gi) in db.iter_mut().zip(row) {
                        *s += *gi;
                    }
                }
                vec![(xi, g.to_vec()), (bi, db)]
            })
        })
    }

    /// `a[m,k] * b[k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (ash, bsh) = (self.values[a.id].shape(), self.values[b.id].shape());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(Error::Dimension(format!(
                "matmul: incompatible shapes {:?} x {:?}",
                ash, bsh
            )));
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let mut out = vec![S::zero(); m * n];
        matmul_raw(
            self.values[a.id].data(),
            self.values[b.id].data(),
            m,
            k,
            n,
            &mut out,
        );
        let value = TensorData::new(vec![m, n], out)?;
        let (ai, bi) = (a.id, b.id);
        self.emit("matmul", value, &[a, b], |_| {
            Box::new(move |vals, g| {
                // da = g * b^T ; db = a^T * g
                let av = vals[ai].data();
                let bv = vals[bi].data();
                let bt = transpose_raw(bv, k, n);
                let at = transpose_raw(av, m, k);
                let mut da = vec![S::zero(); m * k];
                matmul_raw(g, &bt, m, n, k, &mut da);
                let mut db = vec![S::zero(); k * n];
                matmul_raw(&at, g, k, m, n, &mut db);
                vec![(ai, da), (bi, db)]
            })
        })
    }

    pub fn transpose(&mut self, x: Tensor) -> Result<Tensor> {
        let sh = self.values[x.id].shape();
        if sh.len() != 2 {
            return Err(Error::Dimension(format!(
                "transpose: rank-2 required, got {:?}",
                sh
            )));
        }
        let (m, n) = (sh[0], sh[1]);
        let out = TensorData::new(vec![n, m], transpose_raw(self.values[x.id].data(), m, n))?;
        let xi = x.id;
        self.emit("transpose", out, &[x], |_| {
            Box::new(move |_, g| vec![(xi, transpose_raw(g, n, m))])
        })
    }

    pub fn reshape(&mut self, x: Tensor, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.values[x.id].numel() {
            return Err(Error::Dimension(format!(
                "reshape: {:?} -> {:?} changes element count",
                self.values[x.id].shape(),
                shape
            )));
        }
        let out = TensorData::new(shape, self.values[x.id].data().to_vec())?;
        let xi = x.id;
        self.emit("reshape", out, &[x], |_| {
            Box::new(move |_, g| vec![(xi, g.to_vec())])
        })
    }

    pub fn relu(&mut self, x: Tensor) -> Result<Tensor> {
        let out = map(&self.values[x.id], |v| if v > S::zero() { v } else { S::zero() });
        let xi = x.id;
        self.emit("relu", out, &[x], |_| {
            Box::new(move |vals, g| {
                // subgradient at 0 is 0
                let xv = vals[xi].data();
                vec![(
                    xi,
                    g.iter()
                        .zip(xv)
                        .map(|(gi, v)| if *v > S::zero() { *gi } else { S::zero() })
                        .collect(),
                )]
            })
        })
    }

    /// Numerically stable softmax along `axis` (max-subtraction).
    pub fn softmax(&mut self, x: Tensor, axis: usize) -> Result<Tensor> {
        let sh = self.values[x.id].shape().to_vec();
        if axis >= sh.len() {
            return Err(Error::Dimension(format!(
                "softmax: axis {} out of range for shape {:?}",
                axis, sh
            )));
        }
        let (outer, len, inner) = axis_split(&sh, axis);
        let mut out = self.values[x.id].data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = S::neg_infinity();
                for j in 0..len {
                    mx = mx.max(out[base + j * inner]);
                }
                let mut sum = S::zero();
                for j in 0..len {
                    let e = (out[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[base + j * inner] = out[base + j * inner] / sum;
                }
            }
        }
        let value = TensorData::new(sh, out)?;
        let xi = x.id;
        self.emit("softmax", value, &[x], |out_id| {
            Box::new(move |vals, g| {
                // dx = y .* (g - sum(g .* y)) along axis, with y this
                // node's own forward output.
                let y = vals[out_id].data();
                let mut dx = vec![S::zero(); g.len()];
                let sh = vals[xi].shape();
                let (outer, len, inner) = axis_split(sh, axis);
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = S::zero();
                        for j in 0..len {
                            let idx = base + j * inner;
                            dot += g[idx] * y[idx];
                        }
                        for j in 0..len {
                            let idx = base + j * inner;
                            dx[idx] = y[idx] * (g[idx] - dot);
                        }
                    }
                }
                vec![(xi, dx)]
            })
        })
    }

    /// Layer normalization over the last axis with learned gain/offset.
    pub fn layernorm(&mut self, x: Tensor, gamma: Tensor, beta: Tensor, eps: S) -> Result<Tensor> {
        let sh = self.values[x.id].shape().to_vec();
        let d = *sh.last().ok_or_else(|| {
            Error::Dimension("layernorm: x must have rank >= 1".into())
        })?;
        if self.values[gamma.id].shape() != [d] || self.values[beta.id].shape() != [d] {
            return Err(Error::Dimension(
                "layernorm: gamma/beta must match last axis".into(),
            ));
        }
        let gv = self.values[gamma.id].data().to_vec();
        let bv = self.values[beta.id].data().to_vec();
        let mut out = self.values[x.id].data().to_vec();
        let nd = S::from_usize(d).unwrap();
        for row in out.chunks_mut(d) {
            let mean = row.iter().copied().sum::<S>() / nd;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<S>() / nd;
            let inv = (var + eps).sqrt().recip();
            for (j, v) in row.iter_mut().enumerate() {
                *v = gv[j] * ((*v - mean) * inv) + bv[j];
            }
        }
        let value = TensorData::new(sh, out)?;
        let (xi, gi_, bi) = (x.id, gamma.id, beta.id);
        self.emit("layernorm", value, &[x, gamma, beta], |_| {
            Box::new(move |vals, g| {
                let xv = vals[xi].data();
                let gv = vals[gi_].data();
                let d_ = vals[gi_].numel();
                let nd = S::from_usize(d_).unwrap();
                let mut dx = vec![S::zero(); xv.len()];
                let mut dgamma = vec![S::zero(); d_];
                let mut dbeta = vec![S::zero(); d_];
                for (row, (xrow, dxrow)) in xv.chunks(d_).zip(dx.chunks_mut(d_)).enumerate() {
                    let grow = &g[row * d_..(row + 1) * d_];
                    let mean = xrow.iter().copied().sum::<S>() / nd;
                    let var =
                        xrow.iter().map(|v| (*v - mean) * (*v - mean)).sum::<S>() / nd;
                    let inv = (var + eps).sqrt().recip();
                    let mut mean_h = S::zero();
                    let mut mean_hx = S::zero();
                    for j in 0..d_ {
                        let xh = (xrow[j] - mean) * inv;
                        let h = grow[j] * gv[j];
                        dgamma[j] += grow[j] * xh;
                        dbeta[j] += grow[j];
                        mean_h += h;
                        mean_hx += h * xh;
                    }
                    mean_h = mean_h / nd;
                    mean_hx = mean_hx / nd;
                    for j in 0..d_ {
                        let xh = (xrow[j] - mean) * inv;
                        let h = grow[j] * gv[j];
                        dxrow[j] = (h - mean_h - xh * mean_hx) * inv;
                    }
                }
                vec![(xi, dx), (gi_, dgamma), (bi, dbeta)]
            })
        })
    }

    /// Row lookup: `table[V,d]` indexed by token ids -> `[n,d]`.
    pub fn embedding(&mut self, table: Tensor, ids: &[usize]) -> Result<Tensor> {
        let sh = self.values[table.id].shape();
        if sh.len() != 2 {
            return Err(Error::Dimension("embedding: table must be rank 2".into()));
        }
        let (v, d) = (sh[0], sh[1]);
        for &id in ids {
            if id >= v {
                return Err(Error::Index(format!(
                    "embedding: token id {} >= vocab size {}",
                    id, v
                )));
            }
        }
        let tv = self.values[table.id].data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let value = TensorData::new(vec![ids.len(), d], out)?;
        let ti = table.id;
        let ids_cap: Vec<usize> = ids.to_vec();
        self.emit("embedding", value, &[table], |_| {
            Box::new(move |vals, g| {
                let mut dt = vec![S::zero(); vals[ti].numel()];
                for (row, &id) in ids_cap.iter().enumerate() {
                    let grow = &g[row * d..(row + 1) * d];
                    for (s, gi) in dt[id * d..(id + 1) * d].iter_mut().zip(grow) {
                        *s += *gi;
                    }
                }
                vec![(ti, dt)]
            })
        })
    }

    /// Gather rows along axis 0; duplicates allowed (gradients sum).
    pub fn index_select_rows(&mut self, x: Tensor, idx: &[usize]) -> Result<Tensor> {
        let sh = self.values[x.id].shape().to_vec();
        if sh.is_empty() {
            return Err(Error::Dimension("index_select_rows: rank >= 1 required".into()));
        }
        let rows = sh[0];
        let stride: usize = sh[1..].iter().product();
        for &i in idx {
            if i >= rows {
                return Err(Error::Index(format!(
                    "index_select_rows: row {} >= {}",
                    i, rows
                )));
            }
        }
        let xv = self.values[x.id].data();
        let mut out = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            out.extend_from_slice(&xv[i * stride..(i + 1) * stride]);
        }
        let mut osh = sh.clone();
        osh[0] = idx.len();
        let value = TensorData::new(osh, out)?;
        let xi = x.id;
        let idx_cap: Vec<usize> = idx.to_vec();
        self.emit("index_select_rows", value, &[x], |_| {
            Box::new(move |vals, g| {
                let mut dx = vec![S::zero(); vals[xi].numel()];
                for (row, &i) in idx_cap.iter().enumerate() {
                    let grow = &g[row * stride..(row + 1) * stride];
                    for (s, gi) in dx[i * stride..(i + 1) * stride].iter_mut().zip(grow) {
                        *s += *gi;
                    }
                }
                vec![(xi, dx)]
            })
        })
    }

    /// Contiguous slice along the last axis.
    pub fn slice_last(&mut self, x: Tensor, start: usize, len: usize) -> Result<Tensor> {
        let sh = self.values[x.id].shape().to_vec();
        let d = *sh.last().ok_or_else(|| {
            Error::Dimension("slice_last: rank >= 1 required".into())
        })?;
        if start + len > d {
            return Err(Error::Dimension(format!(
                "slice_last: [{}, {}) out of last axis {}",
                start,
                start + len,
                d
            )));
        }
        let rows = self.values[x.id].numel() / d;
        let xv = self.values[x.id].data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv[r * d + start..r * d + start + len]);
        }
        let mut osh = sh.clone();
        *osh.last_mut().unwrap() = len;
        let value = TensorData::new(osh, out)?;
        let xi = x.id;
        self.emit("slice_last", value, &[x], |_| {
            Box::new(move |vals, g| {
                let mut dx = vec![S::zero(); vals[xi].numel()];
                for r in 0..rows {
                    dx[r * d + start..r * d + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                vec![(xi, dx)]
            })
        })
    }

    /// Concatenate along the last axis; leading shapes must agree.
    pub fn concat_last(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat_last: no inputs".into()));
        }
        let lead = self.values[parts[0].id].shape()[..self.values[parts[0].id].shape().len() - 1]
            .to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let sh = self.values[p.id].shape();
            if sh.is_empty() || sh[..sh.len() - 1] != lead[..] {
                return Err(Error::Dimension("concat_last: leading shapes differ".into()));
            }
            widths.push(*sh.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, w) in parts.iter().zip(&widths) {
                let pv = self.values[p.id].data();
                out.extend_from_slice(&pv[r * w..(r + 1) * w]);
            }
        }
        let mut osh = lead.clone();
        osh.push(total);
        let value = TensorData::new(osh, out)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let widths_cap = widths.clone();
        self.emit("concat_last", value, parts, |_| {
            Box::new(move |_, g| {
                let mut offs = Vec::with_capacity(widths_cap.len());
                let mut acc = 0;
                for w in &widths_cap {
                    offs.push(acc);
                    acc += w;
                }
                let total: usize = acc;
                ids.iter()
                    .zip(widths_cap.iter().zip(&offs))
                    .map(|(&id, (&w, &off))| {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        (id, d)
                    })
                    .collect()
            })
        })
    }

    /// Stack equal-shape tensors along a new leading axis.
    pub fn stack0(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Dimension("stack0: no inputs".into()));
        }
        let sh = self.values[parts[0].id].shape().to_vec();
        let numel = self.values[parts[0].id].numel();
        let mut out = Vec::with_capacity(parts.len() * numel);
        for p in parts {
            if self.values[p.id].shape() != sh {
                return Err(Error::Dimension("stack0: shapes differ".into()));
            }
            out.extend_from_slice(self.values[p.id].data());
        }
        let mut osh = vec![parts.len()];
        osh.extend_from_slice(&sh);
        let value = TensorData::new(osh, out)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        self.emit("stack0", value, parts, |_| {
            Box::new(move |_, g| {
                ids.iter()
                    .enumerate()
                    .map(|(i, &id)| (id, g[i * numel..(i + 1) * numel].to_vec()))
                    .collect()
            })
        })
    }

    /// Sum of all elements -> rank-0 scalar.
    pub fn sum(&mut self, x: Tensor) -> Result<Tensor> {
        let total = self.values[x.id].data().iter().copied().sum::<S>();
        let value = TensorData::scalar(total);
        let xi = x.id;
        let n = self.values[x.id].numel();
        self.emit("sum", value, &[x], |_| {
            Box::new(move |_, g| vec![(xi, vec![g[0]; n])])
        })
    }

    /// Mean of all elements -> rank-0 scalar.
    pub fn mean(&mut self, x: Tensor) -> Result<Tensor> {
        let n = self.values[x.id].numel();
        let s = self.sum(x)?;
        self.scale(s, S::from_usize(n).unwrap().recip())
    }

    /// Per-row cross entropy with fused log-softmax: `logits[n,C]` and one
    /// target class per row -> losses `[n]`. No mean is taken; use
    /// [`Graph::sum`] / [`Graph::mean`] for reductions.
    pub fn cross_entropy(&mut self, logits: Tensor, targets: &[usize]) -> Result<Tensor> {
        let sh = self.values[logits.id].shape();
        if sh.len() != 2 {
            return Err(Error::Dimension("cross_entropy: logits must be rank 2".into()));
        }
        let (n, c) = (sh[0], sh[1]);
        if c < 2 {
            return Err(Error::Dimension("cross_entropy: need >= 2 classes".into()));
        }
        if targets.len() != n {
            return Err(Error::Dimension(format!(
                "cross_entropy: {} targets for {} rows",
                targets.len(),
                n
            )));
        }
        for &t in targets {
            if t >= c {
                return Err(Error::Index(format!(
                    "cross_entropy: target {} >= classes {}",
                    t, c
                )));
            }
        }
        let xv = self.values[logits.id].data();
        let mut losses = Vec::with_capacity(n);
        let mut probs = vec![S::zero(); n * c];
        for (i, &t) in targets.iter().enumerate() {
            let row = &xv[i * c..(i + 1) * c];
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                probs[i * c + j] = e;
                sum += e;
            }
            let lse = mx + sum.ln();
            for p in &mut probs[i * c..(i + 1) * c] {
                *p = *p / sum;
            }
            losses.push(lse - row[t]);
        }
        let value = TensorData::new(vec![n], losses)?;
        let li = logits.id;
        let targets_cap: Vec<usize> = targets.to_vec();
        self.emit("cross_entropy", value, &[logits], |_| {
            Box::new(move |_, g| {
                let mut dx = probs.clone();
                for (i, &t) in targets_cap.iter().enumerate() {
                    for (j, v) in dx[i * c..(i + 1) * c].iter_mut().enumerate() {
                        let ind = if j == t { S::one() } else { S::zero() };
                        *v = g[i] * (*v - ind);
                    }
                }
                vec![(li, dx)]
            })
        })
    }

    /// Like `emit` for ops defined outside this file that don't need to
    /// read their own output during backward.
    pub(crate) fn emit_external(
        &mut self,
        op: &'static str,
        value: TensorData<S>,
        inputs: &[Tensor],
        backward: impl Fn(&[TensorData<S>], &[S]) -> Contribs<S> + Send + 'static,
    ) -> Result<Tensor> {
        self.emit(op, value, inputs, |_| Box::new(backward))
    }

    fn same_shape(&self, op: &'static str, a: Tensor, b: Tensor) -> Result<()> {
        if self.values[a.id].shape() != self.values[b.id].shape() {
            return Err(Error::Dimension(format!(
                "{}: shapes {:?} vs {:?}",
                op,
                self.values[a.id].shape(),
                self.values[b.id].shape()
            )));
        }
        Ok(())
    }
}

pub(crate) fn check_finite<S: Scalar>(op: &'static str, value: &TensorData<S>) -> Result<()> {
    if value.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn map<S: Scalar>(x: &TensorData<S>, f: impl Fn(S) -> S) -> TensorData<S> {
    TensorData::new(x.shape().to_vec(), x.data().iter().map(|v| f(*v)).collect()).unwrap()
}

fn zip_map<S: Scalar>(a: &TensorData<S>, b: &TensorData<S>, f: impl Fn(S, S) -> S) -> TensorData<S> {
    TensorData::new(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| f(*x, *y))
            .collect(),
    )
    .unwrap()
}

/// `(outer, len, inner)` decomposition of `shape` around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// `out += a[m,k] * b[k,n]`, row-major. The i-k-j loop order keeps the
/// inner loop contiguous in both `b` and `out`.
pub fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

pub fn transpose_raw<S: Scalar>(x: &[S], m: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}
