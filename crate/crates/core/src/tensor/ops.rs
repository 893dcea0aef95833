use rand::Rng;

use super::gemm::{gemm, MatRef};
use super::{Graph, Op, Tensor, Var};
use crate::error::{Error, Result};

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// `log(Σ exp(x_i))` with the max shifted out. Empty input gives `-inf`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Two-argument `logsumexp`.
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn log_softmax_row(x: &[f64], out: &mut [f64]) {
    let lse = logsumexp(x);
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::dense(self.value(a).data(), m, k),
            MatRef::dense(self.value(b).data(), k, n),
            &mut out,
            0.0,
        );
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
            &[a, b],
        ))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(shape_err(name, &ta.shape, &tb.shape));
        }
        let data = ta
            .data
            .iter()
            .zip(&tb.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor {
            shape: ta.shape.clone(),
            data,
        })
    }

    /// Elementwise sum. `b` may also be a vector matching `a`'s last axis,
    /// in which case it is broadcast over every row.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            let t = self.zip_same(a, b, "add", |x, y| x + y)?;
            return Ok(self.push(t, Op::Add(a, b), &[a, b]));
        }
        let cols = *sa.last().unwrap_or(&1);
        let row_like =
            sb.iter().product::<usize>() == cols && sb.last() == Some(&cols) && sb.len() <= 2;
        if !row_like {
            return Err(shape_err("add", sa, sb));
        }
        let bias = self.value(b).data.clone();
        let mut t = self.value(a).clone();
        for row in t.data.chunks_mut(cols) {
            for (x, y) in row.iter_mut().zip(&bias) {
                *x += y;
            }
        }
        Ok(self.push(t, Op::AddRow(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut t = self.value(a).clone();
        t.data.iter_mut().for_each(|x| *x *= s);
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        t.data.iter_mut().for_each(|x| *x = x.tanh());
        self.push(t, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        t.data.iter_mut().for_each(|x| *x = x.max(0.0));
        self.push(t, Op::Relu(a), &[a])
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(format!(
                "axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = &self.value(a).data;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        let t = Tensor {
            shape: new_shape,
            data: out,
        };
        Ok(self.push(
            t,
            Op::SumAxis {
                input: a,
                outer,
                len,
                inner,
            },
            &[a],
        ))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::contract(format!("axis {axis} out of range")))?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(shape_err("transpose", s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        let src = &self.value(a).data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![c, r],
                data: out,
            },
            Op::Transpose(a),
            &[a],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(shape_err("reshape", self.shape(a), shape));
        }
        let t = Tensor {
            shape: shape.to_vec(),
            data: self.value(a).data.clone(),
        };
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::contract(format!(
                "axis {axis} out of range for {base:?}"
            )));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let chunks: Vec<usize> = inputs
            .iter()
            .map(|&v| self.shape(v)[axis] * inner)
            .collect();
        let row: usize = chunks.iter().sum();
        let mut out = vec![0.0; outer * row];
        for o in 0..outer {
            let mut off = o * row;
            for (&v, &ch) in inputs.iter().zip(&chunks) {
                out[off..off + ch].copy_from_slice(&self.value(v).data[o * ch..(o + 1) * ch]);
                off += ch;
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor { shape, data: out };
        Ok(self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                chunks,
            },
            inputs,
        ))
    }

    /// Selects rows of a 2-D `table`. The gradient scatters back into the
    /// selected rows, so this is also the embedding lookup.
    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(shape_err("gather_rows", s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::contract(format!(
                "row index {bad} out of range for {r} rows"
            )));
        }
        if index.is_empty() {
            return Err(Error::contract("gather of zero rows"));
        }
        let src = &self.value(table).data;
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let t = Tensor {
            shape: vec![index.len(), c],
            data: out,
        };
        Ok(self.push(
            t,
            Op::GatherRows {
                table,
                index: index.to_vec(),
            },
            &[table],
        ))
    }

    /// Row-wise layer normalization with learnable `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2();
        for p in [gain, bias] {
            if self.value(p).numel() != cols {
                return Err(shape_err("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let src = &self.value(x).data;
        let g = &self.value(gain).data;
        let b = &self.value(bias).data;
        let mut out = vec![0.0; rows * cols];
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let t = Tensor {
            shape: self.shape(x).to_vec(),
            data: out,
        };
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Log-softmax over the last axis, max-shifted.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (rows, cols) = t.dims2();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            log_softmax_row(
                &t.data[r * cols..(r + 1) * cols],
                &mut out[r * cols..(r + 1) * cols],
            );
        }
        let t = Tensor {
            shape: t.shape.clone(),
            data: out,
        };
        self.push(t, Op::LogSoftmax(x), &[x])
    }

    /// Inverted dropout. `rng == None` is evaluation mode (identity).
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: Option<&mut R>) -> Result<Var> {
        let Some(rng) = rng else { return Ok(x) };
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::contract(format!(
                "dropout probability {p} not in [0,1)"
            )));
        }
        let keep = 1.0 / (1.0 - p);
        let shape = self.shape(x).to_vec();
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let m = self.constant(Tensor { shape, data: mask });
        self.mul(x, m)
    }

    /// Records a many-rows-to-segments reduction whose per-row Jacobian the
    /// caller already knows. Output `s` is `values[s]`; input row `r`
    /// contributes to segment `row_segment[r]` (`usize::MAX` for none) with
    /// local gradient `jacobian[r, :]`.
    pub fn segmented(
        &mut self,
        input: Var,
        values: Vec<f64>,
        jacobian: Vec<f64>,
        row_segment: Vec<usize>,
    ) -> Result<Var> {
        let (rows, _) = self.value(input).dims2();
        if jacobian.len() != self.value(input).numel()
            || row_segment.len() != rows
            || values.is_empty()
        {
            return Err(Error::contract(
                "segmented op: jacobian or segment map does not match input",
            ));
        }
        if row_segment
            .iter()
            .any(|&s| s != usize::MAX && s >= values.len())
        {
            return Err(Error::contract("segmented op: segment index out of range"));
        }
        let t = Tensor {
            shape: vec![values.len()],
            data: values,
        };
        Ok(self.push(
            t,
            Op::Segmented {
                input,
                jacobian,
                row_segment,
            },
            &[input],
        ))
    }

    pub(super) fn propagate(&self, id: usize, grad: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let dc = MatRef::dense(grad, m, n);
                let av = MatRef::dense(&self.value(*a).data, m, k);
                let bv = MatRef::dense(&self.value(*b).data, k, n);
                self.accumulate(grads, *a, |da| gemm(dc, bv.t(), da, 1.0));
                self.accumulate(grads, *b, |db| gemm(av.t(), dc, db, 1.0));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, grad));
                self.accumulate(grads, *b, |d| add_into(d, grad));
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, grad));
                let cols = self.value(*b).numel();
                self.accumulate(grads, *b, |d| {
                    for row in grad.chunks(cols) {
                        add_into(d, row);
                    }
                });
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, grad));
                self.accumulate(grads, *b, |d| {
                    d.iter_mut().zip(grad).for_each(|(x, g)| *x -= g)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                self.accumulate(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += grad[i] * bv[i];
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += grad[i] * av[i];
                    }
                });
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, |d| {
                    d.iter_mut().zip(grad).for_each(|(x, g)| *x += g * s)
                });
            }
            Op::Tanh(a) => {
                let y = &node.value.data;
                self.accumulate(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += grad[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Relu(a) => {
                let x = &self.value(*a).data;
                self.accumulate(grads, *a, |d| {
                    for i in 0..d.len() {
                        if x[i] > 0.0 {
                            d[i] += grad[i];
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                let g = grad[0];
                self.accumulate(grads, *a, |d| d.iter_mut().for_each(|x| *x += g));
            }
            Op::SumAxis {
                input,
                outer,
                len,
                inner,
            } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                self.accumulate(grads, *input, |d| {
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for i in 0..inner {
                                d[base + i] += grad[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                self.accumulate(grads, *a, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += grad[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(a) => self.accumulate(grads, *a, |d| add_into(d, grad)),
            Op::Concat {
                inputs,
                outer,
                chunks,
            } => {
                let row: usize = chunks.iter().sum();
                let mut off = 0;
                for (&v, &ch) in inputs.iter().zip(chunks) {
                    self.accumulate(grads, v, |d| {
                        for o in 0..*outer {
                            add_into(
                                &mut d[o * ch..(o + 1) * ch],
                                &grad[o * row + off..o * row + off + ch],
                            );
                        }
                    });
                    off += ch;
                }
            }
            Op::GatherRows { table, index } => {
                let c = self.shape(*table)[1];
                self.accumulate(grads, *table, |d| {
                    for (k, &i) in index.iter().enumerate() {
                        add_into(&mut d[i * c..(i + 1) * c], &grad[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let cols = self.value(*gain).numel();
                let rows = inv_std.len();
                let g = &self.value(*gain).data;
                self.accumulate(grads, *x, |d| {
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let gr = &grad[r * cols..(r + 1) * cols];
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..cols {
                            dxhat[c] = gr[c] * g[c];
                            mean_d += dxhat[c];
                            mean_dx += dxhat[c] * xh[c];
                        }
                        mean_d /= cols as f64;
                        mean_dx /= cols as f64;
                        for c in 0..cols {
                            d[r * cols + c] += inv_std[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                });
                self.accumulate(grads, *gain, |d| {
                    for r in 0..rows {
                        for c in 0..cols {
                            d[c] += grad[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                });
                self.accumulate(grads, *bias, |d| {
                    for row in grad.chunks(cols) {
                        add_into(d, row);
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let (rows, cols) = node.value.dims2();
                let y = &node.value.data;
                self.accumulate(grads, *a, |d| {
                    for r in 0..rows {
                        let s = r * cols;
                        let total: f64 = grad[s..s + cols].iter().sum();
                        for c in 0..cols {
                            d[s + c] += grad[s + c] - y[s + c].exp() * total;
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => self.attention_backward(*q, *k, *v, layout, probs, grad, grads),
            Op::Segmented {
                input,
                jacobian,
                row_segment,
            } => {
                let cols = self.value(*input).dims2().1;
                self.accumulate(grads, *input, |d| {
                    for (r, &seg) in row_segment.iter().enumerate() {
                        if seg == usize::MAX {
                            continue;
                        }
                        let gs = grad[seg];
                        for c in 0..cols {
                            d[r * cols + c] += gs * jacobian[r * cols + c];
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradients, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::new();
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let c = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let y = g.matmul(i, c).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 4.0]);

        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let y = g.matmul(a, c).unwrap();
        assert_eq!(g.value(y).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn log_softmax_cases() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.log_softmax(x);
        for v in g.value(y).data() {
            assert!((v - 0.5f64.ln()).abs() < 1e-15);
        }
        let x = g.constant(t(&[2], &[1000.0, 0.0]));
        let y = g.log_softmax(x);
        let d = g.value(y).data();
        assert!(d[0].abs() < 1e-12 && (d[1] + 1000.0).abs() < 1e-9);
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_sum_to_one(xs in proptest::collection::vec(-700.0f64..700.0, 12)) {
            let mut g = Graph::no_grad();
            let x = g.constant(t(&[3, 4], &xs));
            let y = g.log_softmax(x);
            for row in g.value(y).data().chunks(4) {
                let s: f64 = row.iter().map(|v| v.exp()).sum();
                proptest::prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn repeated_backward_is_bitwise_identical(seed in 0u64..200) {
            let run = || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = random_tensor(&[3, 4], &mut rng);
                let b = random_tensor(&[4, 2], &mut rng);
                let mut g = Graph::new();
                let (va, vb) = (g.param(a), g.param(b));
                let m = g.matmul(va, vb).unwrap();
                let m = g.dropout(m, 0.2, Some(&mut rng)).unwrap();
                let l = g.log_softmax(m);
                let loss = g.sum_all(l);
                let grads = g.backward(loss).unwrap();
                let bits = |v| grads.get(v).unwrap().data().iter().map(|x: &f64| x.to_bits()).collect::<Vec<_>>();
                (bits(va), bits(vb))
            };
            proptest::prop_assert_eq!(run(), run());
        }
    }

    #[test]
    fn logsumexp_cases() {
        let ln2 = 2f64.ln();
        assert!((logsumexp(&[ln2, ln2]) - 4f64.ln()).abs() < 1e-15);
        assert_eq!(logsumexp(&[0.7, f64::NEG_INFINITY]), 0.7);
        assert!((logsumexp(&[0.0, 0.0, 0.0]) - 3f64.ln()).abs() < 1e-15);
        assert_eq!(logsumexp(&[]), f64::NEG_INFINITY);
        assert_eq!(log_add(f64::NEG_INFINITY, -1.5), -1.5);
    }

    #[test]
    fn backward_simple_rules() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let s = g.sum_all(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum_all(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn dropout_is_identity_in_eval_and_masks_in_train() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[4, 8], 1.0));
        let y = g.dropout::<ChaCha8Rng>(x, 0.5, None).unwrap();
        assert_eq!(x, y);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = g.dropout(x, 0.5, Some(&mut rng)).unwrap();
        let vals = g.value(y).data();
        assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(vals.contains(&0.0));
    }

    #[test]
    fn detach_cuts_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let d = g.detach(x);
        let y = g.mul(x, d).unwrap();
        let s = g.sum_all(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_tensor(&[3, 4], &mut rng);
        let b = random_tensor(&[4, 2], &mut rng);
        let r = check_gradients(&[a.clone(), b], 20, &mut rng, |g, v| {
            let y = g.matmul(v[0], v[1])?;
            let t = g.tanh(y);
            Ok(g.sum_all(t))
        })
        .unwrap();
        assert!(r.max_rel_err <= 1e-6, "matmul {r:?}");

        let r = check_gradients(std::slice::from_ref(&a), 12, &mut rng, |g, v| {
            let y = g.log_softmax(v[0]);
            let w = g.constant(
                Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 * 0.1).collect()).unwrap(),
            );
            let p = g.mul(y, w)?;
            Ok(g.sum_all(p))
        })
        .unwrap();
        assert!(r.max_rel_err <= 1e-4, "log_softmax {r:?}");
    }
}
