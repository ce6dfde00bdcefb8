//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value. Nodes are
//! stored in creation order, which is a topological order, so
//! [`Tape::backward`] just walks the tape in reverse once.

use std::collections::HashMap;

use rand::Rng;

use super::kernels::{gemm, Layout};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
        shared_b: bool,
    },
    Reshape(Var),
    SwapMiddle(Var, [usize; 4]),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Relu(Var),
    Dropout(Var, Vec<f64>),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        batch: usize,
        len_in: usize,
        cin: usize,
        cout: usize,
        k: usize,
        pad: usize,
    },
    Narrow {
        x: Var,
        start: usize,
        width: usize,
    },
    Concat(Vec<Var>),
    RowMask(Var, Vec<bool>),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        eps: f64,
        pad_id: usize,
        probs: Vec<f64>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    backward_done: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Stores every parameter gradient into `store`, replacing any previous
    /// gradient. Parameters the tape never touched get a zero gradient.
    pub fn write_to(&self, store: &mut ParamStore) {
        for id in store.ids() {
            let param = store.get_mut(id);
            if param.requires_grad {
                param.grad = Some(Tensor::zeros(param.value.shape()));
            }
        }
        for &(id, var) in &self.params {
            if let (Some(g), Some(slot)) = (self.get(var), store.get_mut(id).grad.as_mut()) {
                slot.data_mut().copy_from_slice(g);
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], var: Var, len: usize) -> &mut Vec<f64> {
    grads[var.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Value of a single-element node.
    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value.data()[0]
    }

    /// Which inputs of every ReLU on the tape are positive, in recording
    /// order. Two evaluations with different patterns lie on different
    /// linear pieces of the function.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                pattern.extend(self.nodes[a.0].value.data().iter().map(|&x| x > 0.0));
            }
        }
        pattern
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// A differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node, so
    /// a parameter used in several places accumulates a single gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&var) = self.params.get(&id) {
            return var;
        }
        let p = store.get(id);
        let var = self.push(p.value.clone(), Op::Leaf, p.requires_grad);
        self.params.insert(id, var);
        var
    }

    pub fn zero_grad(&mut self) {
        self.backward_done = false;
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    /// Adds a vector along the trailing axis.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(bias);
        let width = va.last_dim();
        if vb.numel() != width {
            return Err(Error::shape(
                "add_bias",
                format!("bias of {} for rows of {width}", vb.numel()),
            ));
        }
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(width) {
            for (x, b) in row.iter_mut().zip(vb.data()) {
                *x += b;
            }
        }
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(value, Op::AddBias(a, bias), rg))
    }

    /// `[.., m, k] x [k, n] -> [.., m, n]`, or `[.., m, k] x [n, k]^T` when
    /// `trans_b` is set. All leading axes of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.is_empty() || sb.len() != 2 {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let k = *sa.last().unwrap();
        let (kb, n) = if trans_b {
            (sb[1], sb[0])
        } else {
            (sb[0], sb[1])
        };
        if k != kb {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let m = sa.iter().product::<usize>() / k.max(1);
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        self.matmul_impl(a, b, 1, m, k, n, trans_b, true, out_shape)
    }

    /// Batched product `[B, m, k] x [B, k, n] -> [B, m, n]`, with `b` read as
    /// `[B, n, k]` when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b {
            (sb[2], sb[1])
        } else {
            (sb[1], sb[2])
        };
        if k != kb {
            return Err(Error::shape("bmm", format!("{sa:?} x {sb:?}")));
        }
        self.matmul_impl(a, b, batch, m, k, n, trans_b, false, vec![batch, m, n])
    }

    #[allow(clippy::too_many_arguments)]
    fn matmul_impl(
        &mut self,
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
        shared_b: bool,
        out_shape: Vec<usize>,
    ) -> Result<Var> {
        let mut out = vec![0.0; batch * m * n];
        {
            let da = self.value(a).data();
            let db = self.value(b).data();
            let lb = if trans_b {
                Layout::trans(n, k)
            } else {
                Layout::rows(k, n)
            };
            for i in 0..batch {
                let b_off = if shared_b { 0 } else { i * k * n };
                gemm(
                    m,
                    k,
                    n,
                    &da[i * m * k..],
                    Layout::rows(m, k),
                    &db[b_off..],
                    lb,
                    &mut out[i * m * n..],
                    Layout::rows(m, n),
                    0.0,
                );
            }
        }
        let value = Tensor::new(out_shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
                shared_b,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// `[p, q, r, s] -> [p, r, q, s]`.
    pub fn swap_middle(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 4 {
            return Err(Error::shape("swap_middle", format!("{s:?} is not 4-D")));
        }
        let dims = [s[0], s[1], s[2], s[3]];
        let data = swap_middle(self.value(a).data(), dims);
        let value = Tensor::new(vec![dims[0], dims[2], dims[1], dims[3]], data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SwapMiddle(a, dims), rg))
    }

    /// Softmax over the trailing axis, computed with the row maximum
    /// subtracted.
    pub fn softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let width = va.last_dim();
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(width) {
            softmax_in_place(row);
        }
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Softmax(a), rg)
    }

    /// Per-row normalization over the trailing axis with learnable gain and
    /// bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let vx = self.value(x);
        let width = vx.last_dim();
        if self.value(gain).numel() != width || self.value(bias).numel() != width {
            return Err(Error::shape("layer_norm", format!("rows of {width}")));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = vx.numel() / width;
        let mut xhat = vec![0.0; vx.numel()];
        let mut out = vec![0.0; vx.numel()];
        let mut rstd = Vec::with_capacity(rows);
        for (r, row) in vx.data().chunks(width).enumerate() {
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(rs);
            for c in 0..width {
                let h = (row[c] - mean) * rs;
                xhat[r * width + c] = h;
                out[r * width + c] = h * g[c] + b[c];
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x.max(0.0)).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    /// Inverted dropout: kept units are scaled by `1 / (1 - p)`. Without an
    /// RNG (evaluation) or with `p == 0` this is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: Option<&mut R>) -> Var {
        let Some(rng) = rng else { return a };
        if p <= 0.0 {
            return a;
        }
        let keep = 1.0 / (1.0 - p);
        let va = self.value(a);
        let mask: Vec<f64> = (0..va.numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = va.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Dropout(a, mask), rg)
    }

    /// Gathers rows of `table` (`[vocab, dim]`), producing `[ids.len(), dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        let s = vt.shape();
        if s.len() != 2 {
            return Err(Error::shape("embedding", format!("table {s:?}")));
        }
        let (vocab, dim) = (s[0], s[1]);
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenOutOfRange { id, size: vocab });
            }
            data.extend_from_slice(&vt.data()[id * dim..(id + 1) * dim]);
        }
        let value = Tensor::new(vec![ids.len(), dim], data)?;
        let rg = self.rg(table);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// 1-D convolution with zero padding on both sides.
    ///
    /// `x` is `[length, cin]` or `[batch, length, cin]`, `w` is
    /// `[k, cin, cout]` and `b` is `[cout]`. Output length is
    /// `length + 2 * pad - k + 1`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let (batch, len_in, cin) = match sx.as_slice() {
            [l, c] => (1, *l, *c),
            [bt, l, c] => (*bt, *l, *c),
            _ => return Err(Error::shape("conv1d", format!("input {sx:?}"))),
        };
        if sw.len() != 3 || sw[0] == 0 || sw[1] != cin {
            return Err(Error::shape(
                "conv1d",
                format!("weight {sw:?} for input {sx:?}"),
            ));
        }
        let (k, cout) = (sw[0], sw[2]);
        if self.value(b).numel() != cout {
            return Err(Error::shape(
                "conv1d",
                format!("bias of {} for {cout} outputs", self.value(b).numel()),
            ));
        }
        if len_in + 2 * pad < k {
            return Err(Error::shape(
                "conv1d",
                format!("kernel {k} longer than padded input {}", len_in + 2 * pad),
            ));
        }
        let len_out = len_in + 2 * pad - k + 1;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; batch * len_out * cout];
        for bi in 0..batch {
            let xb = &xd[bi * len_in * cin..(bi + 1) * len_in * cin];
            let ob = &mut out[bi * len_out * cout..(bi + 1) * len_out * cout];
            for row in ob.chunks_mut(cout) {
                row.copy_from_slice(bd);
            }
            for j in 0..k {
                // Output rows t whose tap j lands on a real input row.
                let (t0, t1) = tap_range(j, pad, len_in, len_out);
                if t0 >= t1 {
                    continue;
                }
                let src = t0 + j - pad;
                gemm(
                    t1 - t0,
                    cin,
                    cout,
                    &xb[src * cin..],
                    Layout::rows(t1 - t0, cin),
                    &wd[j * cin * cout..],
                    Layout::rows(cin, cout),
                    &mut ob[t0 * cout..],
                    Layout::rows(t1 - t0, cout),
                    1.0,
                );
            }
        }
        let mut shape = sx.clone();
        let nd = shape.len();
        shape[nd - 2] = len_out;
        shape[nd - 1] = cout;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            value,
            Op::Conv1d {
                x,
                w,
                b,
                batch,
                len_in,
                cin,
                cout,
                k,
                pad,
            },
            rg,
        ))
    }

    /// Slice `[start, start + width)` of the trailing axis.
    pub fn narrow(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.last_dim();
        if start + width > d {
            return Err(Error::shape(
                "narrow",
                format!("[{start}, {}) of {d}", start + width),
            ));
        }
        let mut data = Vec::with_capacity(vx.numel() / d * width);
        for row in vx.data().chunks(d) {
            data.extend_from_slice(&row[start..start + width]);
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = width;
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Narrow { x, start, width }, rg))
    }

    /// Concatenation along the trailing axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let lead = &self.shape(*first)[..self.shape(*first).len() - 1];
        for &p in parts {
            let s = self.shape(p);
            if &s[..s.len() - 1] != lead {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {s:?}", self.shape(*first)),
                ));
            }
        }
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = Tensor::new(shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    /// Zeroes every trailing-axis row whose `keep` flag is false.
    pub fn row_mask(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.last_dim();
        if vx.numel() / d.max(1) != keep.len() {
            return Err(Error::shape(
                "row_mask",
                format!("{} flags for shape {:?}", keep.len(), vx.shape()),
            ));
        }
        let mut data = vx.data().to_vec();
        for (row, &k) in data.chunks_mut(d).zip(keep) {
            if !k {
                row.fill(0.0);
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::RowMask(x, keep.to_vec()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Label-smoothed cross-entropy averaged over non-pad positions.
    ///
    /// Per position: `(1 - eps) * NLL(target) + eps * mean_v NLL(v)`.
    pub fn label_smoothed_ce(
        &mut self,
        logits: Var,
        targets: &[usize],
        eps: f64,
        pad_id: usize,
    ) -> Result<Var> {
        let vl = self.value(logits);
        let vocab = vl.last_dim();
        let rows = vl.numel() / vocab.max(1);
        if rows != targets.len() {
            return Err(Error::shape(
                "label_smoothed_ce",
                format!("{rows} positions, {} targets", targets.len()),
            ));
        }
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::Config(format!(
                "label smoothing {eps} not in [0, 1)"
            )));
        }
        let mut probs = vl.data().to_vec();
        let mut total = 0.0;
        let mut count = 0;
        for (row, &t) in probs.chunks_mut(vocab).zip(targets) {
            if t == pad_id {
                row.fill(0.0);
                continue;
            }
            if t >= vocab {
                return Err(Error::TokenOutOfRange { id: t, size: vocab });
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            let nll_t = lse - row[t];
            let mean_nll = lse - row.iter().sum::<f64>() / vocab as f64;
            total += (1.0 - eps) * nll_t + eps * mean_nll;
            count += 1;
            for z in row.iter_mut() {
                *z = (*z - lse).exp();
            }
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                eps,
                pad_id,
                probs,
                count,
            },
            rg,
        ))
    }

    /// Reverse pass from a single-element node. Fails if the tape was
    /// already differentiated and [`Tape::zero_grad`] was not called since.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss has shape {:?}", self.shape(loss)),
            ));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        let mut params: Vec<(ParamId, Var)> = self.params.iter().map(|(&p, &v)| (p, v)).collect();
        params.sort_by_key(|&(p, _)| p);
        Ok(Gradients { grads, params })
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let numel = |v: Var| self.nodes[v.0].value.numel();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        let ga = acc(grads, v, g.len());
                        ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let ga = acc(grads, *a, g.len());
                    for j in 0..g.len() {
                        ga[j] += g[j] * vb[j];
                    }
                }
                if self.rg(*b) {
                    let gb = acc(grads, *b, g.len());
                    for j in 0..g.len() {
                        gb[j] += g[j] * va[j];
                    }
                }
            }
            Op::Scale(a, f) => {
                let ga = acc(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * f);
            }
            Op::AddBias(a, bias) => {
                if self.rg(*a) {
                    let ga = acc(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if self.rg(*bias) {
                    let w = numel(*bias);
                    let gb = acc(grads, *bias, w);
                    for row in g.chunks(w) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
                shared_b,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let da = self.value(*a).data();
                let db = self.value(*b).data();
                let b_stride = if *shared_b { 0 } else { k * n };
                if self.rg(*a) {
                    // dA = dC . B^T
                    let lb = if *trans_b {
                        Layout::rows(n, k)
                    } else {
                        Layout::trans(k, n)
                    };
                    let ga = acc(grads, *a, numel(*a));
                    for i in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..],
                            Layout::rows(m, n),
                            &db[i * b_stride..],
                            lb,
                            &mut ga[i * m * k..],
                            Layout::rows(m, k),
                            1.0,
                        );
                    }
                }
                if self.rg(*b) {
                    let gb = acc(grads, *b, numel(*b));
                    for i in 0..batch {
                        let out = &mut gb[i * b_stride..];
                        if *trans_b {
                            // dB[n, k] = dC^T . A
                            gemm(
                                n,
                                m,
                                k,
                                &g[i * m * n..],
                                Layout::trans(m, n),
                                &da[i * m * k..],
                                Layout::rows(m, k),
                                out,
                                Layout::rows(n, k),
                                1.0,
                            );
                        } else {
                            // dB[k, n] = A^T . dC
                            gemm(
                                k,
                                m,
                                n,
                                &da[i * m * k..],
                                Layout::trans(m, k),
                                &g[i * m * n..],
                                Layout::rows(m, n),
                                out,
                                Layout::rows(k, n),
                                1.0,
                            );
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                let ga = acc(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            Op::SwapMiddle(a, [p, q, r, s]) => {
                let back = swap_middle(g, [*p, *r, *q, *s]);
                let ga = acc(grads, *a, g.len());
                ga.iter_mut().zip(&back).for_each(|(x, y)| *x += y);
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let w = node.value.last_dim();
                let ga = acc(grads, *a, g.len());
                for ((gr, yr), out) in g.chunks(w).zip(y.chunks(w)).zip(ga.chunks_mut(w)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for c in 0..w {
                        out[c] += yr[c] * (gr[c] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let w = node.value.last_dim();
                let gv = self.value(*gain).data();
                if self.rg(*gain) {
                    let gg = acc(grads, *gain, w);
                    for (gr, hr) in g.chunks(w).zip(xhat.chunks(w)) {
                        for c in 0..w {
                            gg[c] += gr[c] * hr[c];
                        }
                    }
                }
                if self.rg(*bias) {
                    let gb = acc(grads, *bias, w);
                    for gr in g.chunks(w) {
                        gb.iter_mut().zip(gr).for_each(|(x, y)| *x += y);
                    }
                }
                if self.rg(*x) {
                    let gx = acc(grads, *x, g.len());
                    let mut dh = vec![0.0; w];
                    for (r, (gr, hr)) in g.chunks(w).zip(xhat.chunks(w)).enumerate() {
                        for c in 0..w {
                            dh[c] = gr[c] * gv[c];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / w as f64;
                        let mean_dhh =
                            dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                        let out = &mut gx[r * w..(r + 1) * w];
                        for c in 0..w {
                            out[c] += rstd[r] * (dh[c] - mean_dh - hr[c] * mean_dhh);
                        }
                    }
                }
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                let ga = acc(grads, *a, g.len());
                for j in 0..g.len() {
                    if va[j] > 0.0 {
                        ga[j] += g[j];
                    }
                }
            }
            Op::Dropout(a, mask) => {
                let ga = acc(grads, *a, g.len());
                for j in 0..g.len() {
                    ga[j] += g[j] * mask[j];
                }
            }
            Op::Embedding { table, ids } => {
                let dim = node.value.last_dim();
                let gt = acc(grads, *table, numel(*table));
                for (row, &id) in g.chunks(dim).zip(ids) {
                    gt[id * dim..(id + 1) * dim]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(x, y)| *x += y);
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                batch,
                len_in,
                cin,
                cout,
                k,
                pad,
            } => {
                let (batch, len_in, cin, cout, k, pad) = (*batch, *len_in, *cin, *cout, *k, *pad);
                let len_out = len_in + 2 * pad - k + 1;
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                if self.rg(*b) {
                    let gb = acc(grads, *b, cout);
                    for row in g.chunks(cout) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
                if self.rg(*w) {
                    let gw = acc(grads, *w, k * cin * cout);
                    for bi in 0..batch {
                        let xb = &xd[bi * len_in * cin..];
                        let gob = &g[bi * len_out * cout..];
                        for j in 0..k {
                            let (t0, t1) = tap_range(j, pad, len_in, len_out);
                            if t0 >= t1 {
                                continue;
                            }
                            let src = t0 + j - pad;
                            // dW[j] += X[src..]^T . dY[t0..t1]
                            gemm(
                                cin,
                                t1 - t0,
                                cout,
                                &xb[src * cin..],
                                Layout::trans(t1 - t0, cin),
                                &gob[t0 * cout..],
                                Layout::rows(t1 - t0, cout),
                                &mut gw[j * cin * cout..],
                                Layout::rows(cin, cout),
                                1.0,
                            );
                        }
                    }
                }
                if self.rg(*x) {
                    let gx = acc(grads, *x, batch * len_in * cin);
                    for bi in 0..batch {
                        let gob = &g[bi * len_out * cout..];
                        let gxb = &mut gx[bi * len_in * cin..];
                        for j in 0..k {
                            let (t0, t1) = tap_range(j, pad, len_in, len_out);
                            if t0 >= t1 {
                                continue;
                            }
                            let src = t0 + j - pad;
                            // dX[src..] += dY[t0..t1] . W[j]^T
                            gemm(
                                t1 - t0,
                                cout,
                                cin,
                                &gob[t0 * cout..],
                                Layout::rows(t1 - t0, cout),
                                &wd[j * cin * cout..],
                                Layout::trans(cin, cout),
                                &mut gxb[src * cin..],
                                Layout::rows(t1 - t0, cin),
                                1.0,
                            );
                        }
                    }
                }
            }
            Op::Narrow { x, start, width } => {
                let d = self.value(*x).last_dim();
                let gx = acc(grads, *x, numel(*x));
                for (r, row) in g.chunks(*width).enumerate() {
                    let out = &mut gx[r * d + start..r * d + start + width];
                    out.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                }
            }
            Op::Concat(parts) => {
                let total = node.value.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if self.rg(p) {
                        let gp = acc(grads, p, numel(p));
                        for (r, out) in gp.chunks_mut(w).enumerate() {
                            let src = &g[r * total + offset..r * total + offset + w];
                            out.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                    }
                    offset += w;
                }
            }
            Op::RowMask(x, keep) => {
                let d = node.value.last_dim();
                let gx = acc(grads, *x, g.len());
                for ((out, row), &k) in gx.chunks_mut(d).zip(g.chunks(d)).zip(keep) {
                    if k {
                        out.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sum(a) => {
                let ga = acc(grads, *a, numel(*a));
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
            Op::CrossEntropy {
                logits,
                targets,
                eps,
                pad_id,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let vocab = self.value(*logits).last_dim();
                let scale = g[0] / *count as f64;
                let smooth = eps / vocab as f64;
                let gl = acc(grads, *logits, numel(*logits));
                for ((out, p), &t) in gl.chunks_mut(vocab).zip(probs.chunks(vocab)).zip(targets) {
                    if t == *pad_id {
                        continue;
                    }
                    for v in 0..vocab {
                        let target = if v == t { 1.0 - eps } else { 0.0 };
                        out[v] += scale * (p[v] - target - smooth);
                    }
                }
            }
        }
    }
}

/// Rows `[t0, t1)` of the output for which input row `t + j - pad` exists.
fn tap_range(j: usize, pad: usize, len_in: usize, len_out: usize) -> (usize, usize) {
    let t0 = pad.saturating_sub(j);
    let t1 = (len_in + pad).saturating_sub(j).min(len_out);
    (t0, t1)
}

fn swap_middle(data: &[f64], [p, q, r, s]: [usize; 4]) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for a in 0..p {
        for b in 0..q {
            for c in 0..r {
                let src = ((a * q + b) * r + c) * s;
                let dst = ((a * r + c) * q + b) * s;
                out[dst..dst + s].copy_from_slice(&data[src..src + s]);
            }
        }
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for z in row.iter_mut() {
        *z = (*z - max).exp();
        sum += *z;
    }
    for z in row.iter_mut() {
        *z /= sum;
    }
}
