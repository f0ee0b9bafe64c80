//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A `Tape` records the forward computation as a flat list of nodes; calling
//! `backward` on a scalar result walks the list in reverse and accumulates
//! gradients into every ancestor that requires them. Gradient accumulation is
//! additive across fan-out.

use crate::error::{PatError, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-7;

#[derive(Clone, Debug)]
enum Op<E: Scalar> {
    Leaf,
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: E },
    MatMul { a: usize, b: usize },
    MatMulNT { a: usize, b: usize },
    Affine { x: usize, w: usize, b: usize },
    Conv1d { x: usize, w: usize, b: usize, kernel: usize, stride: usize, pad: usize },
    Softmax { x: usize },
    Sigmoid { x: usize },
    Gelu { x: usize },
    LayerNorm { x: usize, gain: usize, bias: usize },
    SumAll { x: usize },
    MeanAll { x: usize },
    Resample { x: usize },
    ConcatCols { parts: Vec<usize> },
    RowGather { x: usize, idx: Vec<usize> },
    SkewGather { s: usize },
    AslSum { y: usize, labels: Vec<u8>, gamma_pos: f64, gamma_neg: f64, delta: f64, scale: f64 },
}

struct Node<E: Scalar> {
    value: Tensor<E>,
    op: Op<E>,
    requires_grad: bool,
}

pub struct Tape<E: Scalar> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<E>, op: Op<E>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(PatError::NonFinite { op: op_name.to_string() });
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<E>) -> Result<Var> {
        self.push("constant", value, Op::Leaf, false)
    }

    fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> PatError {
        PatError::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(Self::shape_err("add", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::from_vec(va.shape(), data)?;
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push("add", value, Op::Add { a: a.0, b: b.0 }, rg)
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(Self::shape_err("mul", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::from_vec(va.shape(), data)?;
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push("mul", value, Op::Mul { a: a.0, b: b.0 }, rg)
    }

    pub fn scale(&mut self, a: Var, c: E) -> Result<Var> {
        let value = self.nodes[a.0].value.map(|x| x * c);
        let rg = self.nodes[a.0].requires_grad;
        self.push("scale", value, Op::Scale { a: a.0, c }, rg)
    }

    /// (n×k)·(k×m) matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.cols() != vb.rows() {
            return Err(Self::shape_err("matmul", va.shape(), vb.shape()));
        }
        let value = mat_mul(va, vb);
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push("matmul", value, Op::MatMul { a: a.0, b: b.0 }, rg)
    }

    /// (n×k)·(m×k)ᵀ product, i.e. `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.cols() != vb.cols() {
            return Err(Self::shape_err("matmul_nt", va.shape(), vb.shape()));
        }
        let value = mat_mul_nt(va, vb);
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push("matmul_nt", value, Op::MatMulNT { a: a.0, b: b.0 }, rg)
    }

    /// `x·w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (vx, vw, vb) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        if vx.shape().len() != 2 || vw.shape().len() != 2 || vx.cols() != vw.rows() {
            return Err(Self::shape_err("affine", vx.shape(), vw.shape()));
        }
        if vb.shape() != [vw.cols()] {
            return Err(Self::shape_err("affine", vb.shape(), &[vw.cols()]));
        }
        let mut value = mat_mul(vx, vw);
        let m = value.cols();
        for i in 0..value.rows() {
            for j in 0..m {
                let v = value.at2(i, j) + vb.data()[j];
                value.set2(i, j, v);
            }
        }
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[w.0].requires_grad
            || self.nodes[b.0].requires_grad;
        self.push("affine", value, Op::Affine { x: x.0, w: w.0, b: b.0 }, rg)
    }

    /// 1-D temporal convolution over the row axis with zero padding.
    ///
    /// `x`: T×Cin, `w`: Cout×(Cin·k) laid out `[cout][cin][k]`, `b`: Cout.
    /// Output length is `floor((T + 2·pad − k)/stride) + 1`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw, vb) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        let (t, cin) = (vx.rows(), vx.cols());
        if vw.shape().len() != 2 || vw.cols() != cin * kernel {
            return Err(Self::shape_err("conv1d", vw.shape(), &[cin, kernel]));
        }
        let cout = vw.rows();
        if vb.shape() != [cout] {
            return Err(Self::shape_err("conv1d", vb.shape(), &[cout]));
        }
        if t + 2 * pad < kernel {
            return Err(Self::shape_err("conv1d", vx.shape(), &[kernel]));
        }
        let t_out = (t + 2 * pad - kernel) / stride + 1;
        let mut out = Tensor::zeros(&[t_out, cout]);
        for to in 0..t_out {
            for co in 0..cout {
                let mut acc = vb.data()[co];
                for ci in 0..cin {
                    for j in 0..kernel {
                        let src = (to * stride + j) as isize - pad as isize;
                        if src >= 0 && (src as usize) < t {
                            acc = acc + vx.at2(src as usize, ci) * vw.at2(co, ci * kernel + j);
                        }
                    }
                }
                out.set2(to, co, acc);
            }
        }
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[w.0].requires_grad
            || self.nodes[b.0].requires_grad;
        self.push("conv1d", out, Op::Conv1d { x: x.0, w: w.0, b: b.0, kernel, stride, pad }, rg)
    }

    /// Softmax over the last axis of a rank-2 tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        if vx.shape().len() != 2 {
            return Err(Self::shape_err("softmax", vx.shape(), &[0, 0]));
        }
        let (n, m) = (vx.rows(), vx.cols());
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..n {
            let mut max = vx.at2(i, 0);
            for j in 1..m {
                if vx.at2(i, j) > max {
                    max = vx.at2(i, j);
                }
            }
            let mut sum = E::zero();
            for j in 0..m {
                let e = (vx.at2(i, j) - max).exp();
                out.set2(i, j, e);
                sum = sum + e;
            }
            for j in 0..m {
                out.set2(i, j, out.at2(i, j) / sum);
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push("softmax", out, Op::Softmax { x: x.0 }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.nodes[x.0].value.map(|v| E::one() / (E::one() + (-v).exp()));
        let rg = self.nodes[x.0].requires_grad;
        self.push("sigmoid", value, Op::Sigmoid { x: x.0 }, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.nodes[x.0].value.map(|v| gelu_fwd(v));
        let rg = self.nodes[x.0].requires_grad;
        self.push("gelu", value, Op::Gelu { x: x.0 }, rg)
    }

    /// Layer normalization over the feature (last) axis with learned gain/bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (vx, vg, vb) = (&self.nodes[x.0].value, &self.nodes[gain.0].value, &self.nodes[bias.0].value);
        if vx.shape().len() != 2 {
            return Err(Self::shape_err("layer_norm", vx.shape(), &[0, 0]));
        }
        let d = vx.cols();
        if vg.shape() != [d] || vb.shape() != [d] {
            return Err(Self::shape_err("layer_norm", vg.shape(), &[d]));
        }
        let mut out = Tensor::zeros(&[vx.rows(), d]);
        for i in 0..vx.rows() {
            let (mean, inv_std) = row_moments(vx, i);
            for j in 0..d {
                let xn = (vx.at2(i, j) - mean) * inv_std;
                out.set2(i, j, xn * vg.data()[j] + vb.data()[j]);
            }
        }
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[gain.0].requires_grad
            || self.nodes[bias.0].requires_grad;
        self.push("layer_norm", out, Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0 }, rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[x.0].value.data().iter().fold(E::zero(), |acc, &v| acc + v);
        let rg = self.nodes[x.0].requires_grad;
        self.push("sum", Tensor::scalar(s), Op::SumAll { x: x.0 }, rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.nodes[x.0].value.numel();
        let s = self.nodes[x.0].value.data().iter().fold(E::zero(), |acc, &v| acc + v);
        let m = s / E::from_f64(n as f64);
        let rg = self.nodes[x.0].requires_grad;
        self.push("mean", Tensor::scalar(m), Op::MeanAll { x: x.0 }, rg)
    }

    /// Linear-interpolation resample over the row (time) axis, align-corners
    /// mapping: source coordinate of output row j is `j·(L−1)/(out_len−1)`.
    pub fn resample_rows(&mut self, x: Var, out_len: usize) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        if vx.shape().len() != 2 || out_len == 0 {
            return Err(Self::shape_err("resample", vx.shape(), &[out_len]));
        }
        let d = vx.cols();
        let mut out = Tensor::zeros(&[out_len, d]);
        for j in 0..out_len {
            let (i0, i1, f) = resample_coords(vx.rows(), out_len, j);
            for c in 0..d {
                let v = vx.at2(i0, c) * (E::one() - E::from_f64(f)) + vx.at2(i1, c) * E::from_f64(f);
                out.set2(j, c, v);
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push("resample", out, Op::Resample { x: x.0 }, rg)
    }

    /// Concatenate rank-2 tensors along the feature (column) axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty());
        let n = self.nodes[parts[0].0].value.rows();
        let mut total = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            if v.shape().len() != 2 || v.rows() != n {
                return Err(Self::shape_err("concat_cols", v.shape(), &[n, 0]));
            }
            total += v.cols();
        }
        let mut out = Tensor::zeros(&[n, total]);
        let mut off = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            for i in 0..n {
                for j in 0..v.cols() {
                    out.set2(i, off + j, v.at2(i, j));
                }
            }
            off += v.cols();
        }
        let rg = parts.iter().any(|p| self.nodes[p.0].requires_grad);
        let ids = parts.iter().map(|p| p.0).collect();
        self.push("concat_cols", out, Op::ConcatCols { parts: ids }, rg)
    }

    /// Gather rows of `x` by index (duplicates allowed; backward scatter-adds).
    pub fn row_gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        if vx.shape().len() != 2 || idx.iter().any(|&i| i >= vx.rows()) {
            return Err(Self::shape_err("row_gather", vx.shape(), &[idx.len()]));
        }
        let d = vx.cols();
        let mut out = Tensor::zeros(&[idx.len(), d]);
        for (r, &i) in idx.iter().enumerate() {
            for j in 0..d {
                out.set2(r, j, vx.at2(i, j));
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push("row_gather", out, Op::RowGather { x: x.0, idx: idx.to_vec() }, rg)
    }

    /// Skew a relative-distance score matrix into absolute pairwise form.
    ///
    /// `s` is N×(2N−1) where column j holds the score for relative distance
    /// j−(N−1); output P is N×N with `P[n,m] = s[n, n−m+N−1]`.
    pub fn skew_gather(&mut self, s: Var) -> Result<Var> {
        let vs = &self.nodes[s.0].value;
        let n = vs.rows();
        if vs.shape().len() != 2 || vs.cols() != 2 * n - 1 {
            return Err(Self::shape_err("skew_gather", vs.shape(), &[n, 2 * n - 1]));
        }
        let mut out = Tensor::zeros(&[n, n]);
        for r in 0..n {
            for m in 0..n {
                out.set2(r, m, vs.at2(r, r + n - 1 - m));
            }
        }
        let rg = self.nodes[s.0].requires_grad;
        self.push("skew_gather", out, Op::SkewGather { s: s.0 }, rg)
    }

    /// Asymmetric focal loss summed over a T×C probability grid, scaled by
    /// `scale` (callers pass the head weight α divided by T).
    ///
    /// Per element: positives contribute −(1−y)^γ₊·log(y); negatives shift
    /// the probability by δ (clamped at 0) and contribute −ý^γ₋·log(1−ý).
    /// BCE is the γ₊=γ₋=0, δ=0 special case.
    pub fn asl_sum(
        &mut self,
        y: Var,
        labels: &[u8],
        gamma_pos: f64,
        gamma_neg: f64,
        delta: f64,
        scale: f64,
    ) -> Result<Var> {
        let vy = &self.nodes[y.0].value;
        if vy.numel() != labels.len() {
            return Err(Self::shape_err("asl_sum", vy.shape(), &[labels.len()]));
        }
        if labels.iter().any(|&g| g > 1) {
            return Err(PatError::Config("labels must be 0 or 1".into()));
        }
        let mut total = 0.0;
        for (&yv, &g) in vy.data().iter().zip(labels) {
            total += asl_value(g, yv.to_f64(), gamma_pos, gamma_neg, delta);
        }
        let value = Tensor::scalar(E::from_f64(total * scale));
        let rg = self.nodes[y.0].requires_grad;
        self.push(
            "asl_sum",
            value,
            Op::AslSum { y: y.0, labels: labels.to_vec(), gamma_pos, gamma_neg, delta, scale },
            rg,
        )
    }

    /// Backpropagate from a scalar result, accumulating gradients into every
    /// `requires_grad` ancestor. Clears gradients from any previous call.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(PatError::Config("backward target must be scalar".into()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(Tensor::from_vec(self.nodes[root.0].value.shape(), vec![E::one()])?);

        for id in (0..=root.0).rev() {
            if self.grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = self.grads[id].take().unwrap();
            self.step_backward(id, &g)?;
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn accum(&mut self, target: usize, delta: &Tensor<E>) {
        if !self.nodes[target].requires_grad {
            return;
        }
        let slot = &mut self.grads[target];
        match slot {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(delta.data()) {
                    *a = *a + *b;
                }
            }
            None => *slot = Some(delta.clone()),
        }
    }

    fn accum_fn<F: FnMut(&mut Tensor<E>)>(&mut self, target: usize, mut write: F) {
        if !self.nodes[target].requires_grad {
            return;
        }
        if self.grads[target].is_none() {
            self.grads[target] = Some(Tensor::zeros(self.nodes[target].value.shape()));
        }
        write(self.grads[target].as_mut().unwrap());
    }

    fn step_backward(&mut self, id: usize, g: &Tensor<E>) -> Result<()> {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.accum(a, g);
                self.accum(b, g);
            }
            Op::Mul { a, b } => {
                let da = {
                    let vb = &self.nodes[b].value;
                    let data = g.data().iter().zip(vb.data()).map(|(&gg, &v)| gg * v).collect();
                    Tensor::from_vec(g.shape(), data)?
                };
                let db = {
                    let va = &self.nodes[a].value;
                    let data = g.data().iter().zip(va.data()).map(|(&gg, &v)| gg * v).collect();
                    Tensor::from_vec(g.shape(), data)?
                };
                self.accum(a, &da);
                self.accum(b, &db);
            }
            Op::Scale { a, c } => {
                let da = g.map(|v| v * c);
                self.accum(a, &da);
            }
            Op::MatMul { a, b } => {
                // dA = G·Bᵀ, dB = Aᵀ·G
                let da = mat_mul_nt(g, &self.nodes[b].value);
                let db = mat_mul_tn(&self.nodes[a].value, g);
                self.accum(a, &da);
                self.accum(b, &db);
            }
            Op::MatMulNT { a, b } => {
                // Y = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                let da = mat_mul(g, &self.nodes[b].value);
                let db = mat_mul_tn(g, &self.nodes[a].value);
                self.accum(a, &da);
                self.accum(b, &db);
            }
            Op::Affine { x, w, b } => {
                let dx = mat_mul_nt(g, &self.nodes[w].value);
                let dw = mat_mul_tn(&self.nodes[x].value, g);
                self.accum(x, &dx);
                self.accum(w, &dw);
                self.accum_fn(b, |db| {
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            db.data_mut()[j] = db.data_mut()[j] + g.at2(i, j);
                        }
                    }
                });
            }
            Op::Conv1d { x, w, b, kernel, stride, pad } => {
                let (t, cin) = (self.nodes[x].value.rows(), self.nodes[x].value.cols());
                let cout = self.nodes[w].value.rows();
                let t_out = g.rows();
                let vx = self.nodes[x].value.clone();
                let vw = self.nodes[w].value.clone();
                let mut dx = Tensor::zeros(&[t, cin]);
                let mut dw = Tensor::zeros(vw.shape());
                let mut db = Tensor::zeros(&[cout]);
                for to in 0..t_out {
                    for co in 0..cout {
                        let go = g.at2(to, co);
                        db.data_mut()[co] = db.data_mut()[co] + go;
                        for ci in 0..cin {
                            for j in 0..kernel {
                                let src = (to * stride + j) as isize - pad as isize;
                                if src >= 0 && (src as usize) < t {
                                    let s = src as usize;
                                    let v = dx.at2(s, ci) + go * vw.at2(co, ci * kernel + j);
                                    dx.set2(s, ci, v);
                                    let v = dw.at2(co, ci * kernel + j) + go * vx.at2(s, ci);
                                    dw.set2(co, ci * kernel + j, v);
                                }
                            }
                        }
                    }
                }
                self.accum(x, &dx);
                self.accum(w, &dw);
                self.accum(b, &db);
            }
            Op::Softmax { x } => {
                let y = self.nodes[id].value.clone();
                let (n, m) = (y.rows(), y.cols());
                let mut dx = Tensor::zeros(&[n, m]);
                for i in 0..n {
                    let mut dot = E::zero();
                    for j in 0..m {
                        dot = dot + g.at2(i, j) * y.at2(i, j);
                    }
                    for j in 0..m {
                        dx.set2(i, j, y.at2(i, j) * (g.at2(i, j) - dot));
                    }
                }
                self.accum(x, &dx);
            }
            Op::Sigmoid { x } => {
                let y = &self.nodes[id].value;
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gg, &s)| gg * s * (E::one() - s))
                    .collect();
                let dx = Tensor::from_vec(g.shape(), data)?;
                self.accum(x, &dx);
            }
            Op::Gelu { x } => {
                let vx = &self.nodes[x].value;
                let data = g
                    .data()
                    .iter()
                    .zip(vx.data())
                    .map(|(&gg, &v)| gg * gelu_grad(v))
                    .collect();
                let dx = Tensor::from_vec(g.shape(), data)?;
                self.accum(x, &dx);
            }
            Op::LayerNorm { x, gain, bias } => {
                let vx = self.nodes[x].value.clone();
                let vg = self.nodes[gain].value.clone();
                let (n, d) = (vx.rows(), vx.cols());
                let inv_d = E::from_f64(1.0 / d as f64);
                let mut dx = Tensor::zeros(&[n, d]);
                let mut dgain = Tensor::zeros(&[d]);
                let mut dbias = Tensor::zeros(&[d]);
                for i in 0..n {
                    let (mean, inv_std) = row_moments(&vx, i);
                    let xn: Vec<E> = (0..d).map(|j| (vx.at2(i, j) - mean) * inv_std).collect();
                    let dxn: Vec<E> = (0..d).map(|j| g.at2(i, j) * vg.data()[j]).collect();
                    let mut mean_dxn = E::zero();
                    let mut mean_dxn_xn = E::zero();
                    for j in 0..d {
                        mean_dxn = mean_dxn + dxn[j];
                        mean_dxn_xn = mean_dxn_xn + dxn[j] * xn[j];
                        dgain.data_mut()[j] = dgain.data_mut()[j] + g.at2(i, j) * xn[j];
                        dbias.data_mut()[j] = dbias.data_mut()[j] + g.at2(i, j);
                    }
                    mean_dxn = mean_dxn * inv_d;
                    mean_dxn_xn = mean_dxn_xn * inv_d;
                    for j in 0..d {
                        dx.set2(i, j, inv_std * (dxn[j] - mean_dxn - xn[j] * mean_dxn_xn));
                    }
                }
                self.accum(x, &dx);
                self.accum(gain, &dgain);
                self.accum(bias, &dbias);
            }
            Op::SumAll { x } => {
                let gs = g.data()[0];
                let dx = Tensor::from_vec(
                    self.nodes[x].value.shape(),
                    vec![gs; self.nodes[x].value.numel()],
                )?;
                self.accum(x, &dx);
            }
            Op::MeanAll { x } => {
                let n = self.nodes[x].value.numel();
                let gs = g.data()[0] / E::from_f64(n as f64);
                let dx = Tensor::from_vec(self.nodes[x].value.shape(), vec![gs; n])?;
                self.accum(x, &dx);
            }
            Op::Resample { x } => {
                let in_len = self.nodes[x].value.rows();
                let d = self.nodes[x].value.cols();
                let out_len = g.rows();
                let mut dx = Tensor::zeros(&[in_len, d]);
                for j in 0..out_len {
                    let (i0, i1, f) = resample_coords(in_len, out_len, j);
                    for c in 0..d {
                        let gg = g.at2(j, c);
                        let v = dx.at2(i0, c) + gg * E::from_f64(1.0 - f);
                        dx.set2(i0, c, v);
                        let v = dx.at2(i1, c) + gg * E::from_f64(f);
                        dx.set2(i1, c, v);
                    }
                }
                self.accum(x, &dx);
            }
            Op::ConcatCols { parts } => {
                let n = g.rows();
                let mut off = 0;
                for p in parts {
                    let w = self.nodes[p].value.cols();
                    let mut dp = Tensor::zeros(&[n, w]);
                    for i in 0..n {
                        for j in 0..w {
                            dp.set2(i, j, g.at2(i, off + j));
                        }
                    }
                    self.accum(p, &dp);
                    off += w;
                }
            }
            Op::RowGather { x, idx } => {
                let d = g.cols();
                let idx = idx.clone();
                self.accum_fn(x, |dx| {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..d {
                            let v = dx.at2(i, j) + g.at2(r, j);
                            dx.set2(i, j, v);
                        }
                    }
                });
            }
            Op::SkewGather { s } => {
                let n = g.rows();
                let mut ds = Tensor::zeros(&[n, 2 * n - 1]);
                for r in 0..n {
                    for m in 0..n {
                        let col = r + n - 1 - m;
                        let v = ds.at2(r, col) + g.at2(r, m);
                        ds.set2(r, col, v);
                    }
                }
                self.accum(s, &ds);
            }
            Op::AslSum { y, labels, gamma_pos, gamma_neg, delta, scale } => {
                let gs = g.data()[0].to_f64() * scale;
                let vy = self.nodes[y].value.clone();
                let mut dy = Tensor::zeros(vy.shape());
                for (k, (&yv, &lab)) in vy.data().iter().zip(&labels).enumerate() {
                    let d = asl_grad(lab, yv.to_f64(), gamma_pos, gamma_neg, delta);
                    dy.data_mut()[k] = E::from_f64(gs * d);
                }
                self.accum(y, &dy);
            }
        }
        Ok(())
    }
}

/// Asymmetric focal loss for one (label, probability) pair.
pub fn asl_value(g: u8, y: f64, gamma_pos: f64, gamma_neg: f64, delta: f64) -> f64 {
    let y = y.clamp(LN_EPS, 1.0 - LN_EPS);
    if g == 1 {
        -(1.0 - y).powf(gamma_pos) * y.ln()
    } else {
        let ys = (y - delta).max(0.0);
        if ys == 0.0 {
            0.0
        } else {
            -ys.powf(gamma_neg) * (1.0 - ys).ln()
        }
    }
}

/// d/dy of [`asl_value`].
pub fn asl_grad(g: u8, y: f64, gamma_pos: f64, gamma_neg: f64, delta: f64) -> f64 {
    let y = y.clamp(LN_EPS, 1.0 - LN_EPS);
    if g == 1 {
        let focus = if gamma_pos == 0.0 {
            0.0
        } else {
            gamma_pos * (1.0 - y).powf(gamma_pos - 1.0) * y.ln()
        };
        focus - (1.0 - y).powf(gamma_pos) / y
    } else {
        let ys = y - delta;
        if ys <= 0.0 {
            return 0.0;
        }
        let focus = if gamma_neg == 0.0 {
            0.0
        } else {
            -gamma_neg * ys.powf(gamma_neg - 1.0) * (1.0 - ys).ln()
        };
        focus + ys.powf(gamma_neg) / (1.0 - ys)
    }
}

fn gelu_fwd<E: Scalar>(x: E) -> E {
    let x = x.to_f64();
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    E::from_f64(0.5 * x * (1.0 + u.tanh()))
}

fn gelu_grad<E: Scalar>(x: E) -> E {
    let x = x.to_f64();
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = c * (1.0 + 3.0 * 0.044715 * x * x);
    E::from_f64(0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
}

fn row_moments<E: Scalar>(x: &Tensor<E>, row: usize) -> (E, E) {
    let d = x.cols();
    let inv_d = E::from_f64(1.0 / d as f64);
    let mut mean = E::zero();
    for j in 0..d {
        mean = mean + x.at2(row, j);
    }
    mean = mean * inv_d;
    let mut var = E::zero();
    for j in 0..d {
        let c = x.at2(row, j) - mean;
        var = var + c * c;
    }
    var = var * inv_d;
    let inv_std = E::one() / (var + E::from_f64(1e-5)).sqrt();
    (mean, inv_std)
}

fn resample_coords(in_len: usize, out_len: usize, j: usize) -> (usize, usize, f64) {
    if out_len == 1 || in_len == 1 {
        return (0, 0.min(in_len - 1), 0.0);
    }
    let src = j as f64 * (in_len - 1) as f64 / (out_len - 1) as f64;
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f64)
}

fn mat_mul<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..n {
        for p in 0..k {
            let av = a.at2(i, p);
            if av == E::zero() {
                continue;
            }
            for j in 0..m {
                let v = out.at2(i, j) + av * b.at2(p, j);
                out.set2(i, j, v);
            }
        }
    }
    out
}

/// `a · bᵀ` where a: n×k, b: m×k.
fn mat_mul_nt<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    let (n, k, m) = (a.rows(), a.cols(), b.rows());
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..n {
        for j in 0..m {
            let mut acc = E::zero();
            for p in 0..k {
                acc = acc + a.at2(i, p) * b.at2(j, p);
            }
            out.set2(i, j, acc);
        }
    }
    out
}

/// `aᵀ · b` where a: k×n, b: k×m.
fn mat_mul_tn<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    let (k, n, m) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(&[n, m]);
    for p in 0..k {
        for i in 0..n {
            let av = a.at2(p, i);
            if av == E::zero() {
                continue;
            }
            for j in 0..m {
                let v = out.at2(i, j) + av * b.at2(p, j);
                out.set2(i, j, v);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = 12345u64;
        let mut next = || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((rng >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let a_data: Vec<f64> = (0..6).map(|_| next()).collect();
        let b_data: Vec<f64> = (0..8).map(|_| next()).collect();
        let a = t2(3, 2, &a_data);
        let b = t2(2, 4, &b_data);

        let mut tape = Tape::new();
        let va = tape.leaf(a.clone(), false).unwrap();
        let vb = tape.leaf(b.clone(), false).unwrap();
        let c = tape.matmul(va, vb).unwrap();

        for i in 0..3 {
            for j in 0..4 {
                let mut acc = 0.0;
                for p in 0..2 {
                    acc += a.at2(i, p) * b.at2(p, j);
                }
                assert!((tape.value(c).at2(i, j) - acc).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn softmax_single_element_axis_is_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t2(1, 1, &[3.7]), false).unwrap();
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0]);
    }

    #[test]
    fn conv1d_stride_two_halves_length() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[256, 1]), false).unwrap();
        let w = tape.leaf(Tensor::zeros(&[1, 3]), false).unwrap();
        let b = tape.leaf(Tensor::zeros(&[1]), false).unwrap();
        let y = tape.conv1d(x, w, b, 3, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[128, 1]);
    }

    #[test]
    fn conv1d_k3_s1_p1_preserves_length() {
        for t in [1usize, 2, 5, 17] {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(Tensor::zeros(&[t, 2]), false).unwrap();
            let w = tape.leaf(Tensor::zeros(&[2, 6]), false).unwrap();
            let b = tape.leaf(Tensor::zeros(&[2]), false).unwrap();
            let y = tape.conv1d(x, w, b, 3, 1, 1).unwrap();
            assert_eq!(tape.value(y).rows(), t);
        }
    }

    #[test]
    fn resample_constant_signal_is_exact() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t2(4, 1, &[2.5, 2.5, 2.5, 2.5]), false).unwrap();
        let y = tape.resample_rows(x, 11).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn resample_upsamples_by_hand_values() {
        // [1,3] -> length 3 should give [1,2,3] under align-corners.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t2(2, 1, &[1.0, 3.0]), false).unwrap();
        let y = tape.resample_rows(x, 3).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn shape_mismatch_names_primitive() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]), false).unwrap();
        let b = tape.leaf(Tensor::zeros(&[2, 3]), false).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn non_finite_intermediate_is_flagged() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t2(1, 2, &[1e308, 1e308]), false).unwrap();
        let err = tape.mul(x, x).unwrap_err();
        assert!(matches!(err, PatError::NonFinite { .. }));
    }

    /// Central-difference check of every differentiable primitive on small
    /// random inputs: scalarize via sum of squares-ish weighting so every
    /// output coordinate participates.
    #[test]
    fn primitive_backward_matches_finite_differences() {
        type Build = fn(&mut Tape<f64>, Var) -> Var;
        let cases: Vec<(&str, Vec<usize>, Build)> = vec![
            ("sigmoid", vec![3, 4], |t, x| t.sigmoid(x).unwrap()),
            ("gelu", vec![3, 4], |t, x| t.gelu(x).unwrap()),
            ("softmax", vec![3, 4], |t, x| t.softmax(x).unwrap()),
            ("resample", vec![5, 2], |t, x| t.resample_rows(x, 9).unwrap()),
            ("skew", vec![3, 5], |t, x| t.skew_gather(x).unwrap()),
            ("matmul_self", vec![3, 3], |t, x| t.matmul_nt(x, x).unwrap()),
        ];
        let mut rng = 99u64;
        let mut next = || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((rng >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        for (name, shape, build) in cases {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| next()).collect();
            let weights: Vec<f64> = (0..n * 10).map(|_| next()).collect();

            let eval = |data: &[f64]| -> (f64, Vec<f64>, bool) {
                let mut tape = Tape::new();
                let x = tape
                    .leaf(Tensor::from_vec(&shape, data.to_vec()).unwrap(), true)
                    .unwrap();
                let y = build(&mut tape, x);
                // weighted sum -> scalar
                let w = tape
                    .constant(
                        Tensor::from_vec(
                            tape.value(y).shape(),
                            weights[..tape.value(y).numel()].to_vec(),
                        )
                        .unwrap(),
                    )
                    .unwrap();
                let p = tape.mul(y, w).unwrap();
                let s = tape.sum_all(p).unwrap();
                tape.backward(s).unwrap();
                let loss = tape.value(s).data()[0];
                let grad = tape.grad(x).unwrap().data().to_vec();
                (loss, grad, true)
            };

            let (_, analytic, _) = eval(&data);
            let h = 1e-5;
            let mut errs = Vec::new();
            for k in 0..n {
                let mut dp = data.clone();
                dp[k] += h;
                let (lp, _, _) = eval(&dp);
                dp[k] -= 2.0 * h;
                let (lm, _, _) = eval(&dp);
                let numeric = (lp - lm) / (2.0 * h);
                let denom = 1.0f64.max(analytic[k].abs()).max(numeric.abs());
                errs.push((analytic[k] - numeric).abs() / denom);
            }
            errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let p95 = errs[(errs.len() * 95 / 100).min(errs.len() - 1)];
            assert!(p95 <= 1e-4, "{name}: p95 grad error {p95}");
        }
    }

    #[test]
    fn softmax_rows_are_convex_combinations() {
        let mut tape = Tape::<f64>::new();
        let x = tape
            .leaf(t2(4, 5, &(0..20).map(|i| (i as f64 * 0.7).sin() * 3.0).collect::<Vec<_>>()), false)
            .unwrap();
        let y = tape.softmax(x).unwrap();
        for i in 0..4 {
            let mut s = 0.0;
            for j in 0..5 {
                let v = tape.value(y).at2(i, j);
                assert!(v >= 0.0);
                s += v;
            }
            assert!((s - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        // y = x + x  =>  dy/dx = 2
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(1.5), true).unwrap();
        let y = tape.add(x, x).unwrap();
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0]);
    }
}
