//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every differentiable operation used by the decoder and the losses lives
//! here as a forward rule plus a hand-derived backward rule. Forward calls
//! compute values eagerly into an arena of buffers and record the operation;
//! [`GradTape::backward`] replays the tape in reverse, accumulating gradients.
//!
//! The tape is confined to one logical thread; buffers are immutable once
//! written. Nothing here reads ambient randomness, so identical inputs give
//! bit-identical outputs.

use crate::tensor::{softmax_temperature, strides_of, Tensor, TensorError};

/// Handle to a buffer in the tape arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ReduceKind {
    Sum,
    Mean,
}

#[derive(Debug, Clone)]
enum Op {
    Add { a: ValueId, b: ValueId, out: ValueId },
    Mul { a: ValueId, b: ValueId, out: ValueId },
    Div { a: ValueId, b: ValueId, out: ValueId },
    Neg { x: ValueId, out: ValueId },
    Relu { x: ValueId, out: ValueId },
    Log { x: ValueId, out: ValueId },
    Exp { x: ValueId, out: ValueId },
    /// y = mul * x + add with constant coefficients; only the slope matters
    /// in backward.
    Affine { x: ValueId, mul: f64, out: ValueId },
    /// y = x^e with constant exponent.
    PowConst { x: ValueId, e: f64, out: ValueId },
    ClampMin { x: ValueId, min: f64, out: ValueId },
    Matmul { a: ValueId, b: ValueId, out: ValueId, n: usize, k: usize, m: usize },
    /// y = x · Wᵀ + b, x: R×I, w: O×I, b: O.
    Linear { x: ValueId, w: ValueId, b: ValueId, out: ValueId },
    /// Per-pixel linear map over the channel axis of a B×C×H×W tensor.
    ChannelLinear { x: ValueId, w: ValueId, b: ValueId, out: ValueId },
    GroupNorm {
        x: ValueId,
        gain: ValueId,
        bias: ValueId,
        out: ValueId,
        groups: usize,
        means: Vec<f64>,
        inv_stds: Vec<f64>,
    },
    Reduce { x: ValueId, out: ValueId, axes: Vec<usize>, kind: ReduceKind },
    /// Row-wise softmax of x / temp; temp defaults to 1 when untracked.
    SoftmaxRows { x: ValueId, temp: Option<ValueId>, out: ValueId },
    /// Softmax over the channel axis of a B×C×H×W tensor.
    SoftmaxChannels { x: ValueId, out: ValueId },
    /// out[b] = Σ_i weights[b,i] · levels_i[b]; levels are B×C×H×W.
    WeightedSum { levels: Vec<ValueId>, weights: ValueId, out: ValueId },
    ConcatCols { xs: Vec<ValueId>, out: ValueId },
    /// Repeat a length-C vector as every row of an R×C output.
    BroadcastRows { x: ValueId, out: ValueId, rows: usize },
    /// out[b,h,w] = probs[b, idx[b,h,w], h, w].
    GatherClass { probs: ValueId, idx: Vec<usize>, out: ValueId },
    /// Per-row Shannon entropy in nats, 0·ln 0 := 0.
    EntropyRows { x: ValueId, out: ValueId },
    SumSquares { x: ValueId, out: ValueId },
}

struct Slot {
    tensor: Tensor,
    param_name: Option<String>,
}

/// Arena of buffers plus the recorded operation list.
#[derive(Default)]
pub struct GradTape {
    slots: Vec<Slot>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f64>>>,
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: ValueId, contribution: &[f64]) {
    match &mut grads[id.0] {
        Some(g) => {
            for (gi, ci) in g.iter_mut().zip(contribution) {
                *gi += ci;
            }
        }
        None => grads[id.0] = Some(contribution.to_vec()),
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers an input the caller does not want gradients for.
    pub fn constant(&mut self, t: Tensor) -> ValueId {
        self.push(t, None)
    }

    /// Registers a trainable input; its gradient is retrievable by id after backward.
    pub fn param(&mut self, name: &str, t: Tensor) -> ValueId {
        self.push(t, Some(name.to_string()))
    }

    fn push(&mut self, tensor: Tensor, param_name: Option<String>) -> ValueId {
        let id = ValueId(self.slots.len());
        self.slots.push(Slot { tensor, param_name });
        self.grads.push(None);
        id
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.slots[id.0].tensor
    }

    /// Gradient accumulated for `id`, if any flowed to it. Absent means no
    /// recorded op fed this buffer during backward; it is never zero-filled.
    pub fn grad(&self, id: ValueId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    pub fn param_name(&self, id: ValueId) -> Option<&str> {
        self.slots[id.0].param_name.as_deref()
    }

    fn record(&mut self, out: Tensor, make: impl FnOnce(ValueId) -> Op) -> ValueId {
        let id = self.push(out, None);
        let op = make(id);
        self.ops.push(op);
        id
    }

    fn binary_shapes(&self, a: ValueId, b: ValueId) -> Result<(), TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch { left: sa.to_vec(), right: sb.to_vec() });
        }
        Ok(())
    }

    // ── Elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        self.binary_shapes(a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.record(t, |out| Op::Add { a, b, out }))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        self.binary_shapes(a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.record(t, |out| Op::Mul { a, b, out }))
    }

    pub fn div(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        self.binary_shapes(a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x / y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.record(t, |out| Op::Div { a, b, out }))
    }

    pub fn neg(&mut self, x: ValueId) -> ValueId {
        let t = self.map_unary(x, |v| -v);
        self.record(t, |out| Op::Neg { x, out })
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let t = self.map_unary(x, |v| v.max(0.0));
        self.record(t, |out| Op::Relu { x, out })
    }

    pub fn log(&mut self, x: ValueId) -> ValueId {
        let t = self.map_unary(x, f64::ln);
        self.record(t, |out| Op::Log { x, out })
    }

    pub fn exp(&mut self, x: ValueId) -> ValueId {
        let t = self.map_unary(x, f64::exp);
        self.record(t, |out| Op::Exp { x, out })
    }

    pub fn scale(&mut self, x: ValueId, c: f64) -> ValueId {
        self.affine(x, c, 0.0)
    }

    pub fn affine(&mut self, x: ValueId, mul: f64, add: f64) -> ValueId {
        let t = self.map_unary(x, |v| mul * v + add);
        self.record(t, |out| Op::Affine { x, mul, out })
    }

    pub fn pow_const(&mut self, x: ValueId, e: f64) -> ValueId {
        let t = self.map_unary(x, |v| v.powf(e));
        self.record(t, |out| Op::PowConst { x, e, out })
    }

    pub fn clamp_min(&mut self, x: ValueId, min: f64) -> ValueId {
        let t = self.map_unary(x, |v| v.max(min));
        self.record(t, |out| Op::ClampMin { x, min, out })
    }

    fn map_unary(&self, x: ValueId, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(x);
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect())
            .expect("unary op preserves shape")
    }

    // ── Linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::InnerDimMismatch { left: sa, right: sb });
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for p in 0..k {
                let aip = da[i * k + p];
                let brow = &db[p * m..(p + 1) * m];
                let orow = &mut out[i * m..(i + 1) * m];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        Ok(self.record(t, |out| Op::Matmul { a, b, out, n, k, m }))
    }

    /// Fully connected layer: rows of `x` (R×I) through weight `w` (O×I) plus bias (O).
    pub fn linear(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        let sx = self.value(x).shape().to_vec();
        let sw = self.value(w).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] || sb != [sw[0]] {
            return Err(TensorError::InnerDimMismatch { left: sx, right: sw });
        }
        let (rows, in_dim, out_dim) = (sx[0], sx[1], sw[0]);
        let (dx, dw, db) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; rows * out_dim];
        for r in 0..rows {
            let xrow = &dx[r * in_dim..(r + 1) * in_dim];
            for o in 0..out_dim {
                let wrow = &dw[o * in_dim..(o + 1) * in_dim];
                let dot: f64 = xrow.iter().zip(wrow).map(|(a, b)| a * b).sum();
                out[r * out_dim + o] = dot + db[o];
            }
        }
        let t = Tensor::new(vec![rows, out_dim], out)?;
        Ok(self.record(t, |out| Op::Linear { x, w, b, out }))
    }

    /// 1×1 convolution: per-pixel channel map C_in→C_out on a B×C×H×W tensor.
    pub fn channel_linear(
        &mut self,
        x: ValueId,
        w: ValueId,
        b: ValueId,
    ) -> Result<ValueId, TensorError> {
        let sx = self.value(x).shape().to_vec();
        let sw = self.value(w).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sx.len() != 4 || sw.len() != 2 || sw[1] != sx[1] || sb != [sw[0]] {
            return Err(TensorError::InnerDimMismatch { left: sx, right: sw });
        }
        let (batch, c_in, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let c_out = sw[0];
        let pixels = h * wd;
        let (dx, dw, db) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; batch * c_out * pixels];
        for bi in 0..batch {
            for o in 0..c_out {
                let orow = &mut out[(bi * c_out + o) * pixels..(bi * c_out + o + 1) * pixels];
                orow.fill(db[o]);
                for i in 0..c_in {
                    let coeff = dw[o * c_in + i];
                    let xrow = &dx[(bi * c_in + i) * pixels..(bi * c_in + i + 1) * pixels];
                    for (ov, &xv) in orow.iter_mut().zip(xrow) {
                        *ov += coeff * xv;
                    }
                }
            }
        }
        let t = Tensor::new(vec![batch, c_out, h, wd], out)?;
        Ok(self.record(t, |out| Op::ChannelLinear { x, w, b, out }))
    }

    /// GroupNorm over (channels-in-group × H × W) per sample, with learned
    /// per-channel gain and bias.
    pub fn group_norm(
        &mut self,
        x: ValueId,
        gain: ValueId,
        bias: ValueId,
        groups: usize,
        eps: f64,
    ) -> Result<ValueId, TensorError> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 4 {
            return Err(TensorError::ShapeMismatch { left: sx, right: vec![0, 0, 0, 0] });
        }
        let (batch, channels, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        if groups == 0 || channels % groups != 0 {
            return Err(TensorError::InvalidGroups { channels, groups });
        }
        let sg = self.value(gain).shape().to_vec();
        let sb = self.value(bias).shape().to_vec();
        if sg != [channels] || sb != [channels] {
            return Err(TensorError::ShapeMismatch { left: sg, right: vec![channels] });
        }
        let cpg = channels / groups;
        let pixels = h * w;
        let group_len = cpg * pixels;
        let dx = self.value(x).data();
        let dgain = self.value(gain).data();
        let dbias = self.value(bias).data();
        let mut out = vec![0.0; dx.len()];
        let mut means = vec![0.0; batch * groups];
        let mut inv_stds = vec![0.0; batch * groups];
        for bi in 0..batch {
            for g in 0..groups {
                let start = (bi * channels + g * cpg) * pixels;
                let chunk = &dx[start..start + group_len];
                let mean: f64 = chunk.iter().sum::<f64>() / group_len as f64;
                let var: f64 =
                    chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / group_len as f64;
                let inv_std = 1.0 / (var + eps).sqrt();
                means[bi * groups + g] = mean;
                inv_stds[bi * groups + g] = inv_std;
                for ci in 0..cpg {
                    let c = g * cpg + ci;
                    let row = start + ci * pixels;
                    for p in 0..pixels {
                        let norm = (dx[row + p] - mean) * inv_std;
                        out[row + p] = norm * dgain[c] + dbias[c];
                    }
                }
            }
        }
        let t = Tensor::new(sx, out)?;
        Ok(self.record(t, |out| Op::GroupNorm { x, gain, bias, out, groups, means, inv_stds }))
    }

    // ── Reductions ──────────────────────────────────────────────────

    pub fn reduce_sum(&mut self, x: ValueId, axes: &[usize]) -> Result<ValueId, TensorError> {
        self.reduce(x, axes, ReduceKind::Sum)
    }

    pub fn reduce_mean(&mut self, x: ValueId, axes: &[usize]) -> Result<ValueId, TensorError> {
        self.reduce(x, axes, ReduceKind::Mean)
    }

    fn reduce(&mut self, x: ValueId, axes: &[usize], kind: ReduceKind) -> Result<ValueId, TensorError> {
        let shape = self.value(x).shape().to_vec();
        for &a in axes {
            if a >= shape.len() {
                return Err(TensorError::InvalidAxis { axis: a, shape });
            }
        }
        let mut seen = vec![false; shape.len()];
        for &a in axes {
            if seen[a] {
                return Err(TensorError::InvalidAxis { axis: a, shape });
            }
            seen[a] = true;
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !seen[*i])
            .map(|(_, &d)| d)
            .collect();
        let out_shape = if out_shape.is_empty() { vec![1] } else { out_shape };
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        let data = self.value(x).data();
        let mut out = vec![0.0; out_shape.iter().product()];
        let in_strides = strides_of(&shape);
        let kept_strides: Vec<(usize, usize)> = {
            let out_strides = strides_of(
                &shape
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !seen[*i])
                    .map(|(_, &d)| d)
                    .collect::<Vec<_>>(),
            );
            shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !seen[*i])
                .zip(out_strides)
                .map(|((i, _), os)| (in_strides[i], os))
                .collect()
        };
        for (flat, &v) in data.iter().enumerate() {
            let mut out_idx = 0;
            let mut rem = flat;
            let mut k = 0;
            for (i, &s) in in_strides.iter().enumerate() {
                let coord = rem / s;
                rem %= s;
                if !seen[i] {
                    out_idx += coord * kept_strides[k].1;
                    k += 1;
                }
            }
            out[out_idx] += v;
        }
        if kind == ReduceKind::Mean {
            let c = count.max(1) as f64;
            for v in &mut out {
                *v /= c;
            }
        }
        let t = Tensor::new(out_shape, out)?;
        let axes = axes.to_vec();
        Ok(self.record(t, |out| Op::Reduce { x, out, axes, kind }))
    }

    // ── Softmax and fusion ──────────────────────────────────────────

    /// Row-wise temperature softmax. `temp` is an optional tracked positive
    /// scalar; gradients flow to it when present.
    pub fn softmax_rows(&mut self, x: ValueId, temp: Option<ValueId>) -> Result<ValueId, TensorError> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 2 {
            return Err(TensorError::ShapeMismatch { left: shape, right: vec![0, 0] });
        }
        let t_val = match temp {
            Some(tid) => self.value(tid).data()[0],
            None => 1.0,
        };
        let data = softmax_temperature(self.value(x).data(), shape[0], shape[1], t_val)?;
        let t = Tensor::new(shape, data)?;
        Ok(self.record(t, |out| Op::SoftmaxRows { x, temp, out }))
    }

    /// Softmax over the channel axis of logits shaped B×C×H×W.
    pub fn softmax_channels(&mut self, x: ValueId) -> Result<ValueId, TensorError> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 4 {
            return Err(TensorError::ShapeMismatch { left: shape, right: vec![0, 0, 0, 0] });
        }
        let (batch, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let pixels = h * w;
        let data = self.value(x).data();
        let mut out = vec![0.0; data.len()];
        for bi in 0..batch {
            for p in 0..pixels {
                let fiber = |ci: usize| (bi * c + ci) * pixels + p;
                let mut max = f64::NEG_INFINITY;
                for ci in 0..c {
                    max = max.max(data[fiber(ci)]);
                }
                let mut sum = 0.0;
                for ci in 0..c {
                    let e = (data[fiber(ci)] - max).exp();
                    out[fiber(ci)] = e;
                    sum += e;
                }
                for ci in 0..c {
                    out[fiber(ci)] /= sum;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.record(t, |out| Op::SoftmaxChannels { x, out }))
    }

    /// Convex combination of per-level maps by per-sample weights (B×m).
    pub fn weighted_sum(
        &mut self,
        levels: &[ValueId],
        weights: ValueId,
    ) -> Result<ValueId, TensorError> {
        let first = self.value(levels[0]).shape().to_vec();
        for &l in levels {
            if self.value(l).shape() != first.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    left: self.value(l).shape().to_vec(),
                    right: first,
                });
            }
        }
        let sw = self.value(weights).shape().to_vec();
        if sw.len() != 2 || sw[0] != first[0] || sw[1] != levels.len() {
            return Err(TensorError::ShapeMismatch { left: sw, right: vec![first[0], levels.len()] });
        }
        let (batch, per_sample) = (first[0], first[1] * first[2] * first[3]);
        let wdata = self.value(weights).data().to_vec();
        let mut out = vec![0.0; batch * per_sample];
        for (li, &lid) in levels.iter().enumerate() {
            let ldata = self.value(lid).data();
            for bi in 0..batch {
                let coeff = wdata[bi * levels.len() + li];
                let dst = &mut out[bi * per_sample..(bi + 1) * per_sample];
                let src = &ldata[bi * per_sample..(bi + 1) * per_sample];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += coeff * s;
                }
            }
        }
        let t = Tensor::new(first, out)?;
        let levels = levels.to_vec();
        Ok(self.record(t, |out| Op::WeightedSum { levels, weights, out }))
    }

    /// Concatenate 2-D tensors with equal row counts along the column axis.
    pub fn concat_cols(&mut self, xs: &[ValueId]) -> Result<ValueId, TensorError> {
        let rows = self.value(xs[0]).shape()[0];
        let mut total_cols = 0;
        for &x in xs {
            let s = self.value(x).shape();
            if s.len() != 2 || s[0] != rows {
                return Err(TensorError::ShapeMismatch { left: s.to_vec(), right: vec![rows, 0] });
            }
            total_cols += s[1];
        }
        let mut out = vec![0.0; rows * total_cols];
        let mut offset = 0;
        for &x in xs {
            let cols = self.value(x).shape()[1];
            let data = self.value(x).data();
            for r in 0..rows {
                out[r * total_cols + offset..r * total_cols + offset + cols]
                    .copy_from_slice(&data[r * cols..(r + 1) * cols]);
            }
            offset += cols;
        }
        let t = Tensor::new(vec![rows, total_cols], out)?;
        let xs = xs.to_vec();
        Ok(self.record(t, |out| Op::ConcatCols { xs, out }))
    }

    /// Tile a length-C vector into R identical rows.
    pub fn broadcast_rows(&mut self, x: ValueId, rows: usize) -> Result<ValueId, TensorError> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 1 {
            return Err(TensorError::ShapeMismatch { left: s, right: vec![0] });
        }
        let cols = s[0];
        let src = self.value(x).data().to_vec();
        let mut out = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            out.extend_from_slice(&src);
        }
        let t = Tensor::new(vec![rows, cols], out)?;
        Ok(self.record(t, |out| Op::BroadcastRows { x, out, rows }))
    }

    /// Pick the probability of the labelled class per pixel:
    /// out[b,h,w] = probs[b, idx[b,h,w], h, w].
    pub fn gather_class(&mut self, probs: ValueId, idx: &[usize]) -> Result<ValueId, TensorError> {
        let s = self.value(probs).shape().to_vec();
        if s.len() != 4 {
            return Err(TensorError::ShapeMismatch { left: s, right: vec![0, 0, 0, 0] });
        }
        let (batch, c, h, w) = (s[0], s[1], s[2], s[3]);
        let pixels = h * w;
        if idx.len() != batch * pixels {
            return Err(TensorError::LengthMismatch {
                shape: vec![batch, h, w],
                expected: batch * pixels,
                got: idx.len(),
            });
        }
        let data = self.value(probs).data();
        let mut out = vec![0.0; batch * pixels];
        for bi in 0..batch {
            for p in 0..pixels {
                let class = idx[bi * pixels + p];
                debug_assert!(class < c);
                out[bi * pixels + p] = data[(bi * c + class) * pixels + p];
            }
        }
        let t = Tensor::new(vec![batch, h, w], out)?;
        let idx = idx.to_vec();
        Ok(self.record(t, |out| Op::GatherClass { probs, idx, out }))
    }

    /// Per-row entropy −Σ w ln w of an R×C tensor, one value per row.
    pub fn entropy_rows(&mut self, x: ValueId) -> Result<ValueId, TensorError> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch { left: s, right: vec![0, 0] });
        }
        let (rows, cols) = (s[0], s[1]);
        let data = self.value(x).data();
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            out[r] = crate::tensor::row_entropy(&data[r * cols..(r + 1) * cols]);
        }
        let t = Tensor::new(vec![rows], out)?;
        Ok(self.record(t, |out| Op::EntropyRows { x, out }))
    }

    /// Scalar Σ x².
    pub fn sum_squares(&mut self, x: ValueId) -> ValueId {
        let s: f64 = self.value(x).data().iter().map(|&v| v * v).sum();
        let t = Tensor::scalar(s);
        self.record(t, |out| Op::SumSquares { x, out })
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Replays the tape in reverse from a scalar loss, accumulating
    /// gradients for every buffer reached by the chain rule.
    pub fn backward(&mut self, loss: ValueId) {
        assert_eq!(self.value(loss).len(), 1, "backward seeds a scalar loss");
        if self.grads[loss.0].is_none() {
            self.grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..self.ops.len()).rev() {
            let op = self.ops[i].clone();
            self.backward_op(&op);
        }
    }

    fn backward_op(&mut self, op: &Op) {
        match op {
            Op::Add { a, b, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    accumulate(&mut self.grads, *a, &d);
                    accumulate(&mut self.grads, *b, &d);
                }
            }
            Op::Mul { a, b, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let da: Vec<f64> =
                        d.iter().zip(self.slots[b.0].tensor.data()).map(|(g, v)| g * v).collect();
                    let db: Vec<f64> =
                        d.iter().zip(self.slots[a.0].tensor.data()).map(|(g, v)| g * v).collect();
                    accumulate(&mut self.grads, *a, &da);
                    accumulate(&mut self.grads, *b, &db);
                }
            }
            Op::Div { a, b, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let av = self.slots[a.0].tensor.data();
                    let bv = self.slots[b.0].tensor.data();
                    let da: Vec<f64> = d.iter().zip(bv).map(|(g, &y)| g / y).collect();
                    let db: Vec<f64> = d
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(g, (&x, &y))| -g * x / (y * y))
                        .collect();
                    accumulate(&mut self.grads, *a, &da);
                    accumulate(&mut self.grads, *b, &db);
                }
            }
            Op::Neg { x, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let dx: Vec<f64> = d.iter().map(|g| -g).collect();
                    accumulate(&mut self.grads, *x, &dx);
                }
            }
            Op::Relu { x, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    // Subgradient 0 at the kink.
                    let dx: Vec<f64> = d
                        .iter()
                        .zip(self.slots[x.0].tensor.data())
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut self.grads, *x, &dx);
                }
            }
            Op::Log { x, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let dx: Vec<f64> = d
                        .iter()
                        .zip(self.slots[x.0].tensor.data())
                        .map(|(g, &v)| g / v)
                        .collect();
                    accumulate(&mut self.grads, *x, &dx);
                }
            }
            Op::Exp { x, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let dx: Vec<f64> = d
                        .iter()
                        .zip(self.slots[out.0].tensor.data())
                        .map(|(g, &v)| g * v)
                        .collect();
                    accumulate(&mut self.grads, *x, &dx);
                }
            }
            Op::Affine { x, mul, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let dx: Vec<f64> = d.iter().map(|g| g * mul).collect();
                    accumulate(&mut self.grads, *x, &dx);
                }
            }
            Op::PowConst { x, e, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let dx: Vec<f64> = if *e == 0.0 {
                        vec![0.0; d.len()]
                    } else {
                        d.iter()
                            .zip(self.slots[x.0].tensor.data())
                            .map(|(g, &v)| g * e * v.powf(e - 1.0))
                            .collect()
                    };
                    accumulate(&mut self.grads, *x, &dx);
                }
            }
            Op::ClampMin { x, min, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let dx: Vec<f64> = d
                        .iter()
                        .zip(self.slots[x.0].tensor.data())
                        .map(|(g, &v)| if v >= *min { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut self.grads, *x, &dx);
                }
            }
            Op::Matmul { a, b, out, n, k, m } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let (n, k, m) = (*n, *k, *m);
                    let av = self.slots[a.0].tensor.data();
                    let bv = self.slots[b.0].tensor.data();
                    // dA[i,p] = Σ_j d[i,j]·B[p,j]
                    let mut da = vec![0.0; n * k];
                    for i in 0..n {
                        for p in 0..k {
                            let drow = &d[i * m..(i + 1) * m];
                            let brow = &bv[p * m..(p + 1) * m];
                            da[i * k + p] = drow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    // dB[p,j] = Σ_i A[i,p]·d[i,j]
                    let mut db = vec![0.0; k * m];
                    for i in 0..n {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            let drow = &d[i * m..(i + 1) * m];
                            let dbrow = &mut db[p * m..(p + 1) * m];
                            for (dv, &g) in dbrow.iter_mut().zip(drow) {
                                *dv += aip * g;
                            }
                        }
                    }
                    accumulate(&mut self.grads, *a, &da);
                    accumulate(&mut self.grads, *b, &db);
                }
            }
            Op::Linear { x, w, b, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let xs = self.slots[x.0].tensor.shape();
                    let (rows, in_dim) = (xs[0], xs[1]);
                    let out_dim = self.slots[w.0].tensor.shape()[0];
                    let xv = self.slots[x.0].tensor.data();
                    let wv = self.slots[w.0].tensor.data();
                    let mut dx = vec![0.0; rows * in_dim];
                    let mut dw = vec![0.0; out_dim * in_dim];
                    let mut db = vec![0.0; out_dim];
                    for r in 0..rows {
                        for o in 0..out_dim {
                            let g = d[r * out_dim + o];
                            db[o] += g;
                            let wrow = &wv[o * in_dim..(o + 1) * in_dim];
                            let xrow = &xv[r * in_dim..(r + 1) * in_dim];
                            let dxrow = &mut dx[r * in_dim..(r + 1) * in_dim];
                            for i in 0..in_dim {
                                dxrow[i] += g * wrow[i];
                            }
                            let dwrow = &mut dw[o * in_dim..(o + 1) * in_dim];
                            for i in 0..in_dim {
                                dwrow[i] += g * xrow[i];
                            }
                        }
                    }
                    accumulate(&mut self.grads, *x, &dx);
                    accumulate(&mut self.grads, *w, &dw);
                    accumulate(&mut self.grads, *b, &db);
                }
            }
            Op::ChannelLinear { x, w, b, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let xs = self.slots[x.0].tensor.shape();
                    let (batch, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                    let c_out = self.slots[w.0].tensor.shape()[0];
                    let pixels = h * wd;
                    let xv = self.slots[x.0].tensor.data();
                    let wv = self.slots[w.0].tensor.data();
                    let mut dx = vec![0.0; xv.len()];
                    let mut dw = vec![0.0; c_out * c_in];
                    let mut db = vec![0.0; c_out];
                    for bi in 0..batch {
                        for o in 0..c_out {
                            let drow = &d[(bi * c_out + o) * pixels..(bi * c_out + o + 1) * pixels];
                            db[o] += drow.iter().sum::<f64>();
                            for i in 0..c_in {
                                let coeff = wv[o * c_in + i];
                                let xrow =
                                    &xv[(bi * c_in + i) * pixels..(bi * c_in + i + 1) * pixels];
                                let dxrow = &mut dx
                                    [(bi * c_in + i) * pixels..(bi * c_in + i + 1) * pixels];
                                let mut dot = 0.0;
                                for p in 0..pixels {
                                    dxrow[p] += coeff * drow[p];
                                    dot += drow[p] * xrow[p];
                                }
                                dw[o * c_in + i] += dot;
                            }
                        }
                    }
                    accumulate(&mut self.grads, *x, &dx);
                    accumulate(&mut self.grads, *w, &dw);
                    accumulate(&mut self.grads, *b, &db);
                }
            }
            Op::GroupNorm { x, gain, bias, out, groups, means, inv_stds } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let groups = *groups;
                    let xs = self.slots[x.0].tensor.shape();
                    let (batch, channels, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let cpg = channels / groups;
                    let pixels = h * w;
                    let group_len = cpg * pixels;
                    let xv = self.slots[x.0].tensor.data();
                    let gv = self.slots[gain.0].tensor.data();
                    let mut dx = vec![0.0; xv.len()];
                    let mut dgain = vec![0.0; channels];
                    let mut dbias = vec![0.0; channels];
                    for bi in 0..batch {
                        for g in 0..groups {
                            let mean = means[bi * groups + g];
                            let inv_std = inv_stds[bi * groups + g];
                            let start = (bi * channels + g * cpg) * pixels;
                            // First pass: per-channel reductions and the two group means.
                            let mut sum_dn = 0.0;
                            let mut sum_dn_norm = 0.0;
                            for ci in 0..cpg {
                                let c = g * cpg + ci;
                                let row = start + ci * pixels;
                                for p in 0..pixels {
                                    let norm = (xv[row + p] - mean) * inv_std;
                                    let go = d[row + p];
                                    dgain[c] += go * norm;
                                    dbias[c] += go;
                                    let dn = go * gv[c];
                                    sum_dn += dn;
                                    sum_dn_norm += dn * norm;
                                }
                            }
                            let mean_dn = sum_dn / group_len as f64;
                            let mean_dn_norm = sum_dn_norm / group_len as f64;
                            for ci in 0..cpg {
                                let c = g * cpg + ci;
                                let row = start + ci * pixels;
                                for p in 0..pixels {
                                    let norm = (xv[row + p] - mean) * inv_std;
                                    let dn = d[row + p] * gv[c];
                                    dx[row + p] = inv_std * (dn - mean_dn - norm * mean_dn_norm);
                                }
                            }
                        }
                    }
                    accumulate(&mut self.grads, *x, &dx);
                    accumulate(&mut self.grads, *gain, &dgain);
                    accumulate(&mut self.grads, *bias, &dbias);
                }
            }
            Op::Reduce { x, out, axes, kind } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let shape = self.slots[x.0].tensor.shape().to_vec();
                    let mut seen = vec![false; shape.len()];
                    for &a in axes {
                        seen[a] = true;
                    }
                    let in_strides = strides_of(&shape);
                    let kept: Vec<usize> = (0..shape.len()).filter(|i| !seen[*i]).collect();
                    let out_strides = strides_of(&kept.iter().map(|&i| shape[i]).collect::<Vec<_>>());
                    let count: usize = axes.iter().map(|&a| shape[a]).product();
                    let scale = match kind {
                        ReduceKind::Sum => 1.0,
                        ReduceKind::Mean => 1.0 / count.max(1) as f64,
                    };
                    let n: usize = shape.iter().product();
                    let mut dx = vec![0.0; n];
                    for (flat, dv) in dx.iter_mut().enumerate() {
                        let mut out_idx = 0;
                        let mut rem = flat;
                        let mut k = 0;
                        for (i, &s) in in_strides.iter().enumerate() {
                            let coord = rem / s;
                            rem %= s;
                            if !seen[i] {
                                out_idx += coord * out_strides[k];
                                k += 1;
                            }
                        }
                        *dv = d[out_idx] * scale;
                    }
                    accumulate(&mut self.grads, *x, &dx);
                }
            }
            Op::SoftmaxRows { x, temp, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let s = self.slots[out.0].tensor.shape();
                    let (rows, cols) = (s[0], s[1]);
                    let yv = self.slots[out.0].tensor.data();
                    let xv = self.slots[x.0].tensor.data();
                    let t_val = match temp {
                        Some(tid) => self.slots[tid.0].tensor.data()[0],
                        None => 1.0,
                    };
                    let mut dx = vec![0.0; xv.len()];
                    let mut dt = 0.0;
                    for r in 0..rows {
                        let base = r * cols;
                        let dot: f64 =
                            (0..cols).map(|c| d[base + c] * yv[base + c]).sum();
                        for c in 0..cols {
                            let dz = yv[base + c] * (d[base + c] - dot);
                            dx[base + c] = dz / t_val;
                            // z = x/t ⇒ ∂z/∂t = −x/t².
                            dt -= dz * xv[base + c] / (t_val * t_val);
                        }
                    }
                    accumulate(&mut self.grads, *x, &dx);
                    if let Some(tid) = temp {
                        accumulate(&mut self.grads, *tid, &[dt]);
                    }
                }
            }
            Op::SoftmaxChannels { x, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let s = self.slots[out.0].tensor.shape();
                    let (batch, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let pixels = h * w;
                    let yv = self.slots[out.0].tensor.data();
                    let mut dx = vec![0.0; yv.len()];
                    for bi in 0..batch {
                        for p in 0..pixels {
                            let fiber = |ci: usize| (bi * c + ci) * pixels + p;
                            let mut dot = 0.0;
                            for ci in 0..c {
                                dot += d[fiber(ci)] * yv[fiber(ci)];
                            }
                            for ci in 0..c {
                                dx[fiber(ci)] = yv[fiber(ci)] * (d[fiber(ci)] - dot);
                            }
                        }
                    }
                    accumulate(&mut self.grads, *x, &dx);
                }
            }
            Op::WeightedSum { levels, weights, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let s = self.slots[out.0].tensor.shape();
                    let batch = s[0];
                    let per_sample = s[1] * s[2] * s[3];
                    let m = levels.len();
                    let wv = self.slots[weights.0].tensor.data().to_vec();
                    let mut dw = vec![0.0; batch * m];
                    for (li, &lid) in levels.iter().enumerate() {
                        let lv = self.slots[lid.0].tensor.data();
                        let mut dl = vec![0.0; lv.len()];
                        for bi in 0..batch {
                            let coeff = wv[bi * m + li];
                            let drow = &d[bi * per_sample..(bi + 1) * per_sample];
                            let lrow = &lv[bi * per_sample..(bi + 1) * per_sample];
                            let dlrow = &mut dl[bi * per_sample..(bi + 1) * per_sample];
                            let mut dot = 0.0;
                            for p in 0..per_sample {
                                dlrow[p] = coeff * drow[p];
                                dot += drow[p] * lrow[p];
                            }
                            dw[bi * m + li] += dot;
                        }
                        accumulate(&mut self.grads, lid, &dl);
                    }
                    accumulate(&mut self.grads, *weights, &dw);
                }
            }
            Op::ConcatCols { xs, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let rows = self.slots[out.0].tensor.shape()[0];
                    let total_cols = self.slots[out.0].tensor.shape()[1];
                    let mut offset = 0;
                    for &x in xs {
                        let cols = self.slots[x.0].tensor.shape()[1];
                        let mut dx = vec![0.0; rows * cols];
                        for r in 0..rows {
                            dx[r * cols..(r + 1) * cols].copy_from_slice(
                                &d[r * total_cols + offset..r * total_cols + offset + cols],
                            );
                        }
                        accumulate(&mut self.grads, x, &dx);
                        offset += cols;
                    }
                }
            }
            Op::BroadcastRows { x, out, rows } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let cols = self.slots[x.0].tensor.len();
                    let mut dx = vec![0.0; cols];
                    for r in 0..*rows {
                        for c in 0..cols {
                            dx[c] += d[r * cols + c];
                        }
                    }
                    accumulate(&mut self.grads, *x, &dx);
                }
            }
            Op::GatherClass { probs, idx, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let s = self.slots[probs.0].tensor.shape();
                    let (batch, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let pixels = h * w;
                    let mut dp = vec![0.0; batch * c * pixels];
                    for bi in 0..batch {
                        for p in 0..pixels {
                            let class = idx[bi * pixels + p];
                            dp[(bi * c + class) * pixels + p] += d[bi * pixels + p];
                        }
                    }
                    accumulate(&mut self.grads, *probs, &dp);
                }
            }
            Op::EntropyRows { x, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let s = self.slots[x.0].tensor.shape();
                    let (rows, cols) = (s[0], s[1]);
                    let xv = self.slots[x.0].tensor.data();
                    let mut dx = vec![0.0; xv.len()];
                    for r in 0..rows {
                        for c in 0..cols {
                            let wv = xv[r * cols + c];
                            if wv > 0.0 {
                                dx[r * cols + c] = -d[r] * (wv.ln() + 1.0);
                            }
                        }
                    }
                    accumulate(&mut self.grads, *x, &dx);
                }
            }
            Op::SumSquares { x, out } => {
                if let Some(d) = self.grads[out.0].clone() {
                    let g = d[0];
                    let dx: Vec<f64> =
                        self.slots[x.0].tensor.data().iter().map(|&v| 2.0 * v * g).collect();
                    accumulate(&mut self.grads, *x, &dx);
                }
            }
        }
    }
}
