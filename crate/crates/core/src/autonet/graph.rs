//! Tape-based reverse-mode differentiation over a small op set.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and the backward sweep simply walks it in reverse.

use crate::error::{Error, Result};
use crate::losses::{self, DiceCe, LossBreakdown};
use crate::tensor::Tensor;

use super::conv;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv3d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Relu(Var),
    Upsample2x(Var),
    ConcatC(Var, Var),
    SliceC { x: Var, start: usize },
    Add(Var, Var),
    MaskKeep { x: Var, mask: Tensor },
    ImputeToken { x: Var, tokens: Var, mask: Tensor },
    ReconLoss { pred: Var, target: Tensor, mask: Tensor, lambda: f64, epsilon: f64 },
    DiceCe { logits: Var, labels: Tensor },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    #[cfg(test)]
    corrupt_conv_backward: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` does not
    /// influence the loss or does not require a gradient.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn spatial(t: &Tensor) -> Result<([usize; 5], usize)> {
    let d = t.dims5()?;
    Ok((d, d[2] * d[3] * d[4]))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    #[cfg(test)]
    pub(crate) fn corrupt_conv_backward(&mut self) {
        self.corrupt_conv_backward = true;
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

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = conv::conv3d_forward(self.value(x), self.value(w), self.value(b), stride, pad)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(out, Op::Conv3d { x, w, b, stride, pad }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a.max(0.0)).collect())
            .expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    /// Nearest-neighbour 2x replication along each spatial axis.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let ([b, c, z, y, xx], _) = spatial(v)?;
        let (oz, oy, ox) = (2 * z, 2 * y, 2 * xx);
        let mut out = Vec::with_capacity(b * c * oz * oy * ox);
        let src = v.data();
        for bc in 0..b * c {
            for k in 0..oz {
                for j in 0..oy {
                    let row = &src[((bc * z + k / 2) * y + j / 2) * xx..((bc * z + k / 2) * y + j / 2 + 1) * xx];
                    for &a in row {
                        out.push(a);
                        out.push(a);
                    }
                }
            }
        }
        let out = Tensor::new(vec![b, c, oz, oy, ox], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Upsample2x(x), rg))
    }

    /// Channel concatenation `[a, b]`.
    pub fn concat_c(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let ([ba, ca, za, ya, xa], n) = spatial(va)?;
        let ([bb, cb, zb, yb, xb], _) = spatial(vb)?;
        if [ba, za, ya, xa] != [bb, zb, yb, xb] {
            return Err(Error::ShapeMismatch(format!("concat {:?} with {:?}", va.shape(), vb.shape())));
        }
        let mut out = Vec::with_capacity(va.len() + vb.len());
        for i in 0..ba {
            out.extend_from_slice(&va.data()[i * ca * n..(i + 1) * ca * n]);
            out.extend_from_slice(&vb.data()[i * cb * n..(i + 1) * cb * n]);
        }
        let out = Tensor::new(vec![ba, ca + cb, za, ya, xa], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::ConcatC(a, b), rg))
    }

    /// Channels `[start, start + len)`.
    pub fn slice_c(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let ([b, c, z, y, xx], n) = spatial(v)?;
        if start + len > c || len == 0 {
            return Err(Error::ShapeMismatch(format!("channels [{start}, {}) of {c}", start + len)));
        }
        let mut out = Vec::with_capacity(b * len * n);
        for i in 0..b {
            out.extend_from_slice(&v.data()[(i * c + start) * n..(i * c + start + len) * n]);
        }
        let out = Tensor::new(vec![b, len, z, y, xx], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceC { x, start }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.same_shape(vb, "add")?;
        let out = Tensor::new(va.shape().to_vec(), va.data().iter().zip(vb.data()).map(|(p, q)| p + q).collect())?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// `x ⊙ (1 − M)` for a constant voxel mask.
    pub fn mask_keep(&mut self, x: Var, mask: &Tensor) -> Result<Var> {
        let out = crate::masking::impute_zero(self.value(x), mask)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MaskKeep { x, mask: mask.clone() }, rg))
    }

    /// `x ⊙ (1 − M) + token_c · M` with a trainable per-channel token vector.
    pub fn impute_token(&mut self, x: Var, tokens: Var, mask: &Tensor) -> Result<Var> {
        let out = crate::masking::impute_token(self.value(x), mask, self.value(tokens).data())?;
        let rg = self.rg(&[x, tokens]);
        Ok(self.push(out, Op::ImputeToken { x, tokens, mask: mask.clone() }, rg))
    }

    /// Weighted masked/visible reconstruction loss as a scalar node.
    pub fn recon_loss(
        &mut self,
        pred: Var,
        target: &Tensor,
        mask: &Tensor,
        lambda: f64,
        epsilon: f64,
    ) -> Result<(Var, LossBreakdown)> {
        let p = self.value(pred);
        p.same_shape(target, "recon_loss target")?;
        p.same_shape(mask, "recon_loss mask")?;
        let l = losses::recon_loss(p.data(), target.data(), mask.data(), lambda, epsilon)?;
        let rg = self.rg(&[pred]);
        let v = self.push(
            Tensor::scalar(l.total),
            Op::ReconLoss {
                pred,
                target: target.clone(),
                mask: mask.clone(),
                lambda,
                epsilon,
            },
            rg,
        );
        Ok((v, l))
    }

    /// Soft Dice + cross-entropy of `[B, 2, Z, Y, X]` logits against
    /// `[B, 1, Z, Y, X]` binary labels.
    pub fn dice_ce(&mut self, logits: Var, labels: &Tensor) -> Result<(Var, DiceCe)> {
        let l = self.value(logits);
        let [b, c, z, y, x] = l.dims5()?;
        if c != 2 || labels.shape() != [b, 1, z, y, x] {
            return Err(Error::ShapeMismatch(format!("logits {:?} with labels {:?}", l.shape(), labels.shape())));
        }
        let d = losses::dice_ce_loss(l.data(), labels.data(), b)?;
        let rg = self.rg(&[logits]);
        let v = self.push(
            Tensor::scalar(d.total),
            Op::DiceCe {
                logits,
                labels: labels.clone(),
            },
            rg,
        );
        Ok((v, d))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = crate::reduce::pairwise_sum(self.value(x).data());
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let Some(up) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &up, &mut grads)?;
            grads[i] = Some(up);
        }
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, up: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let shaped = |like: &Tensor, data: Vec<f64>| Tensor::new(like.shape().to_vec(), data);
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d { x, w, b, stride, pad } => {
                let (xv, wv, bv) = (self.value(*x), self.value(*w), self.value(*b));
                if self.requires_grad(*x) {
                    let dx = conv::conv3d_backward_input(xv, wv, bv, *stride, *pad, up)?;
                    self.accumulate(grads, *x, dx);
                }
                if self.requires_grad(*w) || self.requires_grad(*b) {
                    #[allow(unused_mut)]
                    let (mut dw, db) = conv::conv3d_backward_params(xv, wv, bv, *stride, *pad, up)?;
                    #[cfg(test)]
                    if self.corrupt_conv_backward {
                        dw.data_mut().iter_mut().for_each(|g| *g *= 1.01);
                    }
                    self.accumulate(grads, *w, dw);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d = xv
                    .data()
                    .iter()
                    .zip(up.data())
                    .map(|(&a, &g)| if a > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, shaped(xv, d)?);
            }
            Op::Upsample2x(x) => {
                let xv = self.value(*x);
                let ([b, c, z, y, xx], _) = spatial(xv)?;
                let (oy, ox) = (2 * y, 2 * xx);
                let u = up.data();
                let mut d = vec![0.0; xv.len()];
                for bc in 0..b * c {
                    for k in 0..z {
                        for j in 0..y {
                            for i in 0..xx {
                                let mut s = 0.0;
                                for dz in 0..2 {
                                    for dy in 0..2 {
                                        let row = ((bc * 2 * z + 2 * k + dz) * oy + 2 * j + dy) * ox + 2 * i;
                                        s += u[row] + u[row + 1];
                                    }
                                }
                                d[((bc * z + k) * y + j) * xx + i] = s;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, shaped(xv, d)?);
            }
            Op::ConcatC(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ([batch, ca, ..], n) = spatial(va)?;
                let cb = vb.dims5()?[1];
                let (mut da, mut db) = (Vec::with_capacity(va.len()), Vec::with_capacity(vb.len()));
                for i in 0..batch {
                    let base = i * (ca + cb) * n;
                    da.extend_from_slice(&up.data()[base..base + ca * n]);
                    db.extend_from_slice(&up.data()[base + ca * n..base + (ca + cb) * n]);
                }
                self.accumulate(grads, *a, shaped(va, da)?);
                self.accumulate(grads, *b, shaped(vb, db)?);
            }
            Op::SliceC { x, start } => {
                let xv = self.value(*x);
                let ([batch, c, ..], n) = spatial(xv)?;
                let len = up.dims5()?[1];
                let mut d = vec![0.0; xv.len()];
                for i in 0..batch {
                    d[(i * c + start) * n..(i * c + start + len) * n]
                        .copy_from_slice(&up.data()[i * len * n..(i + 1) * len * n]);
                }
                self.accumulate(grads, *x, shaped(xv, d)?);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, up.clone());
                self.accumulate(grads, *b, up.clone());
            }
            Op::MaskKeep { x, mask } => {
                self.accumulate(grads, *x, crate::masking::impute_zero(up, mask)?);
            }
            Op::ImputeToken { x, tokens, mask } => {
                self.accumulate(grads, *x, crate::masking::impute_zero(up, mask)?);
                let ([b, c, ..], n) = spatial(mask)?;
                let mut dt = vec![0.0; c];
                for (ch, slot) in dt.iter_mut().enumerate() {
                    for i in 0..b {
                        let lo = (i * c + ch) * n;
                        *slot += crate::reduce::pairwise_sum_by(n, &|j| up.data()[lo + j] * mask.data()[lo + j]);
                    }
                }
                self.accumulate(grads, *tokens, Tensor::new(vec![c], dt)?);
            }
            Op::ReconLoss {
                pred,
                target,
                mask,
                lambda,
                epsilon,
            } => {
                let pv = self.value(*pred);
                let scale = up.item();
                let mut g = losses::recon_loss_grad(pv.data(), target.data(), mask.data(), *lambda, *epsilon)?;
                g.iter_mut().for_each(|v| *v *= scale);
                self.accumulate(grads, *pred, shaped(pv, g)?);
            }
            Op::DiceCe { logits, labels } => {
                let lv = self.value(*logits);
                let scale = up.item();
                let mut g = losses::dice_ce_grad(lv.data(), labels.data(), lv.dims5()?[0])?;
                g.iter_mut().for_each(|v| *v *= scale);
                self.accumulate(grads, *logits, shaped(lv, g)?);
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, Tensor::full(xv.shape(), up.item()));
            }
        }
        Ok(())
    }
}
