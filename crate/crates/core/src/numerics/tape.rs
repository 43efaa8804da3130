//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and enough saved
//! state to compute the vector-Jacobian product. `backward` walks the node
//! list in exact reverse order of creation and accumulates gradients
//! additively, so a value that feeds several consumers receives the sum of
//! their contributions.

use std::rc::Rc;

use crate::error::{Error, Result};

use super::ops;
use super::tensor::{matmul_at_into, matmul_bt_into, matmul_into};
use super::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulConst(Var, Rc<[f64]>),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SmoothedCe {
        logits: Var,
        targets: Vec<usize>,
        smoothing: f64,
        probs: Vec<f64>,
    },
    Sum(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf: gradients are tracked for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient accumulated by the last `backward` call, if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    /// `a * b^T` without materializing the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::dim("matmul_bt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        matmul_bt_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulBt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Adds a bias vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let cols = self.value(a).cols();
        if self.value(bias).numel() != cols {
            return Err(Error::dim("add_row", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + b[i % cols])
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(t, Op::AddRow(a, bias), rg))
    }

    /// Elementwise product with a constant array (dropout masks).
    pub fn mul_const(&mut self, a: Var, factor: Rc<[f64]>) -> Result<Var> {
        if factor.len() != self.value(a).numel() {
            return Err(Error::dim("mul_const", self.shape(a), &[factor.len()]));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(factor.iter())
            .map(|(x, f)| x * f)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::MulConst(a, factor), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * factor).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, factor), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| ops::gelu(x)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Gelu(a), rg)
    }

    /// Row softmax over the last axis, gated by `mask` (row-major, same
    /// element count as `a`). `None` is the all-ones mask.
    pub fn masked_softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let out = ops::masked_softmax(self.value(a), mask)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::MaskedSoftmax(a), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (out, xhat, inv_std) =
            ops::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Gathers rows of a `[V, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "embedding id",
                    index: id,
                    limit: v,
                });
            }
            out.extend_from_slice(self.value(table).row(id));
        }
        let t = Tensor::matrix(ids.len(), d, out)?;
        let rg = self.rg(table);
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if start + len > r {
            return Err(Error::dim("slice_rows", self.shape(x), &[start, len]));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::matrix(len, c, data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SliceRows { x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if start + width > c {
            return Err(Error::dim("slice_cols", self.shape(x), &[start, width]));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + width]);
        }
        let t = Tensor::matrix(r, width, data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::dim("concat_rows", &[rows, cols], t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let t = Tensor::matrix(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(Error::dim("concat_cols", &[rows, total], t.shape()));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::matrix(rows, total, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Sum over rows of label-smoothed cross-entropy; one target per row.
    pub fn smoothed_ce(&mut self, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
        ops::check_smoothing(smoothing)?;
        let (r, v) = self.dims2(logits);
        if targets.len() != r {
            return Err(Error::dim("smoothed_ce", self.shape(logits), &[targets.len()]));
        }
        let mut loss = 0.0;
        let mut probs = Vec::with_capacity(r * v);
        for (i, &t) in targets.iter().enumerate() {
            let row = self.value(logits).row(i);
            loss += ops::label_smoothed_ce(row, t, smoothing)?;
            probs.extend(ops::log_softmax(row).into_iter().map(f64::exp));
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SmoothedCe {
                logits,
                targets: targets.to_vec(),
                smoothing,
                probs,
            },
            rg,
        ))
    }

    /// Sum of scalar nodes.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        let mut total = 0.0;
        for &p in parts {
            let t = self.value(p);
            if t.numel() != 1 {
                return Err(Error::dim("sum", &[1], t.shape()));
            }
            total += t.data()[0];
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::scalar(total), Op::Sum(parts.to_vec()), rg))
    }

    /// Reverse sweep from a scalar output, seeding its gradient with 1.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot =
                grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = self.dims2(*b).1;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| matmul_bt_into(g, bv, ga, m, n, k));
                acc(*b, &mut |gb| matmul_at_into(av, g, gb, k, m, n));
            }
            Op::MatMulBt(a, b) => {
                // out[m,n] = a[m,k] b[n,k]^T
                let (m, k) = self.dims2(*a);
                let n = self.dims2(*b).0;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| matmul_into(g, bv, ga, m, n, k));
                acc(*b, &mut |gb| matmul_at_into(g, av, gb, n, m, k));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |ga| add_into(ga, g));
                }
            }
            Op::AddRow(a, bias) => {
                acc(*a, &mut |ga| add_into(ga, g));
                let c = self.value(*bias).numel();
                acc(*bias, &mut |gb| {
                    for (j, gv) in g.iter().enumerate() {
                        gb[j % c] += gv;
                    }
                });
            }
            Op::MulConst(a, f) => acc(*a, &mut |ga| {
                for ((x, gv), fv) in ga.iter_mut().zip(g).zip(f.iter()) {
                    *x += gv * fv;
                }
            }),
            Op::Scale(a, s) => acc(*a, &mut |ga| {
                for (x, gv) in ga.iter_mut().zip(g) {
                    *x += gv * s;
                }
            }),
            Op::Relu(a) => {
                let xv = self.value(*a).data();
                acc(*a, &mut |ga| {
                    for ((x, gv), &inp) in ga.iter_mut().zip(g).zip(xv) {
                        if inp > 0.0 {
                            *x += gv;
                        }
                    }
                })
            }
            Op::Gelu(a) => {
                let xv = self.value(*a).data();
                acc(*a, &mut |ga| {
                    for ((x, gv), &inp) in ga.iter_mut().zip(g).zip(xv) {
                        *x += gv * ops::gelu_grad(inp);
                    }
                })
            }
            Op::MaskedSoftmax(a) => {
                // dx = y * (dy - <y, dy>) per row; masked entries have y = 0
                let y = &node.value;
                let c = y.cols();
                acc(*a, &mut |ga| {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            ga[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                })
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = node.value.cols();
                let rows = node.value.rows();
                let gv = self.value(*gain).data();
                acc(*x, &mut |gx| {
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[j];
                        }
                        let scale = inv_std[r] / d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            gx[r * d + j] +=
                                scale * (d as f64 * dh - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for (idx, gval) in g.iter().enumerate() {
                        gg[idx % d] += gval * xhat[idx];
                    }
                });
                acc(*bias, &mut |gb| {
                    for (idx, gval) in g.iter().enumerate() {
                        gb[idx % d] += gval;
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = node.value.cols();
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let c = node.value.cols();
                acc(*x, &mut |gx| {
                    add_into(&mut gx[start * c..start * c + g.len()], g);
                });
            }
            Op::SliceCols { x, start } => {
                let w = node.value.cols();
                let c = self.value(*x).cols();
                acc(*x, &mut |gx| {
                    for r in 0..node.value.rows() {
                        add_into(
                            &mut gx[r * c + start..r * c + start + w],
                            &g[r * w..(r + 1) * w],
                        );
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    acc(p, &mut |gp| add_into(gp, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let (rows, w) = self.dims2(p);
                    acc(p, &mut |gp| {
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::SmoothedCe {
                logits,
                targets,
                smoothing,
                probs,
            } => {
                let v = self.value(*logits).cols();
                let off = smoothing / v as f64;
                let on = 1.0 - smoothing + off;
                acc(*logits, &mut |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let target_p = if j == t { on } else { off };
                            gl[r * v + j] += g[0] * (probs[r * v + j] - target_p);
                        }
                    }
                });
            }
            Op::Sum(parts) => {
                for &p in parts {
                    acc(p, &mut |gp| gp[0] += g[0]);
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
