//! Fused multi-head scaled dot-product attention over padded batches.

use super::{Graph, Op, Tensor, Var};
use crate::error::{Error, Result};

/// How flattened `[batch·len × d_model]` rows are grouped for attention.
///
/// Keys at positions `>= key_lens[b]` are masked for every query of batch
/// item `b`; with `causal` set, query `i` additionally sees only keys
/// `j <= i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionLayout {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub key_lens: Vec<usize>,
    pub causal: bool,
}

impl AttentionLayout {
    pub fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        j < self.key_lens[b] && (!self.causal || j <= i)
    }

    /// The boolean `q_len × k_len` mask of batch item `b` (`true` = visible).
    pub fn mask_matrix(&self, b: usize) -> Vec<Vec<bool>> {
        (0..self.q_len)
            .map(|i| (0..self.k_len).map(|j| self.allowed(b, i, j)).collect())
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.key_lens.len() != self.batch {
            return Err(Error::contract(
                "attention layout: key_lens length differs from batch",
            ));
        }
        if let Some(b) = self.key_lens.iter().position(|&l| l == 0 || l > self.k_len) {
            return Err(Error::contract(format!(
                "attention layout: batch item {b} has key length {} (must be in 1..={}); a fully masked row has no softmax",
                self.key_lens[b], self.k_len
            )));
        }
        Ok(())
    }
}

impl Graph {
    /// `softmax(q·kᵀ/√d_head)·v` per head, heads concatenated (no
    /// projections; those live in the transformer blocks).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: &AttentionLayout) -> Result<Var> {
        layout.validate()?;
        let (qr, d) = self.value(q).dims2();
        let (kr, dk) = self.value(k).dims2();
        let (vr, dv) = self.value(v).dims2();
        if qr != layout.batch * layout.q_len || kr != layout.batch * layout.k_len || vr != kr {
            return Err(Error::Shape {
                op: "attention",
                lhs: self.shape(q).to_vec(),
                rhs: self.shape(k).to_vec(),
            });
        }
        if d != dk || d != dv || d % layout.heads != 0 {
            return Err(Error::Shape {
                op: "attention",
                lhs: vec![d, layout.heads],
                rhs: vec![dk, dv],
            });
        }
        let dh = d / layout.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (ql, kl, h) = (layout.q_len, layout.k_len, layout.heads);
        let qd = &self.value(q).data;
        let kd = &self.value(k).data;
        let vd = &self.value(v).data;
        let mut probs = vec![0.0; layout.batch * h * ql * kl];
        let mut out = vec![0.0; qr * d];
        let mut scores = vec![0.0; kl];
        for b in 0..layout.batch {
            for head in 0..h {
                let col = head * dh;
                for i in 0..ql {
                    let qrow = &qd[(b * ql + i) * d + col..(b * ql + i) * d + col + dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..kl {
                        if layout.allowed(b, i, j) {
                            let krow = &kd[(b * kl + j) * d + col..(b * kl + j) * d + col + dh];
                            let s = qrow.iter().zip(krow).map(|(x, y)| x * y).sum::<f64>() * scale;
                            scores[j] = s;
                            max = max.max(s);
                        } else {
                            scores[j] = f64::NEG_INFINITY;
                        }
                    }
                    let p = &mut probs
                        [((b * h + head) * ql + i) * kl..((b * h + head) * ql + i + 1) * kl];
                    let mut z = 0.0;
                    for j in 0..kl {
                        let e = if scores[j] == f64::NEG_INFINITY {
                            0.0
                        } else {
                            (scores[j] - max).exp()
                        };
                        p[j] = e;
                        z += e;
                    }
                    let orow = &mut out[(b * ql + i) * d + col..(b * ql + i) * d + col + dh];
                    for j in 0..kl {
                        p[j] /= z;
                        if p[j] != 0.0 {
                            let vrow = &vd[(b * kl + j) * d + col..(b * kl + j) * d + col + dh];
                            for (o, &x) in orow.iter_mut().zip(vrow) {
                                *o += p[j] * x;
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor {
            shape: vec![qr, d],
            data: out,
        };
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                layout: layout.clone(),
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Attention probabilities recorded for node `out` (`batch × heads ×
    /// q_len × k_len`), if it is an attention node.
    pub fn attention_probs(&self, out: Var) -> Option<&[f64]> {
        match &self.nodes[out.id()].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub(super) fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttentionLayout,
        probs: &[f64],
        grad: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let d = self.value(q).dims2().1;
        let (ql, kl, h) = (layout.q_len, layout.k_len, layout.heads);
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = &self.value(q).data;
        let kd = &self.value(k).data;
        let vd = &self.value(v).data;
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dv = vec![0.0; vd.len()];
        let mut dp = vec![0.0; kl];
        for b in 0..layout.batch {
            for head in 0..h {
                let col = head * dh;
                for i in 0..ql {
                    let p =
                        &probs[((b * h + head) * ql + i) * kl..((b * h + head) * ql + i + 1) * kl];
                    let go = &grad[(b * ql + i) * d + col..(b * ql + i) * d + col + dh];
                    let mut dot = 0.0;
                    for j in 0..kl {
                        if p[j] == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let vrow = (b * kl + j) * d + col;
                        let vr = &vd[vrow..vrow + dh];
                        let dvr = &mut dv[vrow..vrow + dh];
                        let mut s = 0.0;
                        for ((&g, &x), dx) in go.iter().zip(vr).zip(dvr) {
                            s += g * x;
                            *dx += p[j] * g;
                        }
                        dp[j] = s;
                        dot += p[j] * s;
                    }
                    let qrow = (b * ql + i) * d + col;
                    let qr = &qd[qrow..qrow + dh];
                    let dqr = &mut dq[qrow..qrow + dh];
                    for j in 0..kl {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - dot) * scale;
                        let krow = (b * kl + j) * d + col;
                        let kr = &kd[krow..krow + dh];
                        let dkr = &mut dk[krow..krow + dh];
                        for (((dqx, &kx), dkx), &qx) in dqr.iter_mut().zip(kr).zip(dkr).zip(qr) {
                            *dqx += ds * kx;
                            *dkx += ds * qx;
                        }
                    }
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            self.accumulate(grads, var, |d| {
                for (x, y) in d.iter_mut().zip(&buf) {
                    *x += y;
                }
            });
        }
    }
}
