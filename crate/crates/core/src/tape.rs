//! Reverse-mode automatic differentiation on a define-by-run tape.
//!
//! Every forward operation appends a node holding its output value and
//! enough saved state for the backward pass. The append order is a valid
//! topological order, so `backward` walks it in reverse, accumulating
//! gradients into each node and finally collecting them per registered
//! parameter. Tapes are rebuilt every training step; nodes are immutable
//! once written.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

/// Identity of a trainable parameter array, stable across tapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Handle to a value on one tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

#[derive(Clone, Debug)]
struct TripletPick<F> {
    pos: usize,
    neg: usize,
    d_pos: F,
    d_neg: F,
    active: bool,
}

enum Op<F: Scalar> {
    Leaf,
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    /// Broadcast a rank-1 bias along the channel axis of a or NCHW tensor.
    AddBias(ValueId, ValueId),
    Scale(ValueId, F),
    Relu(ValueId),
    Exp(ValueId),
    Log(ValueId),
    Square(ValueId),
    Clamp(ValueId, F, F),
    HardSigmoid(ValueId, F),
    Matmul(ValueId, ValueId),
    Reduce {
        input: ValueId,
        kind: ReduceKind,
        axes: Vec<usize>,
    },
    Conv2d {
        x: ValueId,
        kernel: ValueId,
        stride: usize,
        pad: usize,
    },
    AvgPool2(ValueId),
    BatchNormTrain {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        xhat: Tensor<F>,
        inv_std: Vec<F>,
    },
    BatchNormInfer {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        xhat: Tensor<F>,
        inv_std: Vec<F>,
    },
    SliceRows {
        x: ValueId,
        start: usize,
    },
    CrossEntropy {
        logits: ValueId,
        targets: Tensor<F>,
    },
    BatchHardTriplet {
        emb: ValueId,
        picks: Vec<TripletPick<F>>,
    },
}

/// Gradients keyed by parameter id. Every parameter registered on the tape
/// is present; parameters unreachable from the loss map to zero tensors.
pub struct Gradients<F> {
    map: HashMap<ParamId, Tensor<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.map.get(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total squared L2 norm over a fixed parameter order.
    pub fn sum_squares_over(&self, ids: impl Iterator<Item = ParamId>) -> F {
        let mut acc = F::zero();
        for id in ids {
            if let Some(g) = self.map.get(&id) {
                acc += g.sum_squares();
            }
        }
        acc
    }
}

pub struct Tape<F: Scalar> {
    vals: Vec<Tensor<F>>,
    ops: Vec<Op<F>>,
    params: Vec<(ParamId, ValueId)>,
    by_param: HashMap<ParamId, ValueId>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            vals: Vec::new(),
            ops: Vec::new(),
            params: Vec::new(),
            by_param: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> ValueId {
        let id = ValueId(self.vals.len());
        self.vals.push(value);
        self.ops.push(op);
        id
    }

    /// Record a constant or input value.
    pub fn leaf(&mut self, value: Tensor<F>) -> ValueId {
        self.push(value, Op::Leaf)
    }

    /// Register a trainable parameter. Registering the same id twice
    /// returns the first node, so forward passes and penalty terms share
    /// one leaf per parameter.
    pub fn param(&mut self, id: ParamId, value: &Tensor<F>) -> ValueId {
        if let Some(&vid) = self.by_param.get(&id) {
            return vid;
        }
        let vid = self.push(value.clone(), Op::Leaf);
        self.params.push((id, vid));
        self.by_param.insert(id, vid);
        vid
    }

    pub fn value(&self, id: ValueId) -> &Tensor<F> {
        &self.vals[id.0]
    }

    pub fn num_nodes(&self) -> usize {
        self.vals.len()
    }

    pub fn registered_params(&self) -> &[(ParamId, ValueId)] {
        &self.params
    }

    fn binary_same_shape(&self, op: &'static str, a: ValueId, b: ValueId) -> Result<()> {
        if self.vals[a.0].shape() != self.vals[b.0].shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.vals[a.0].shape().to_vec(),
                rhs: self.vals[b.0].shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape("add", a, b)?;
        let out = Tensor::from_fn(self.vals[a.0].shape(), |i| {
            self.vals[a.0].data()[i] + self.vals[b.0].data()[i]
        });
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape("sub", a, b)?;
        let out = Tensor::from_fn(self.vals[a.0].shape(), |i| {
            self.vals[a.0].data()[i] - self.vals[b.0].data()[i]
        });
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape("mul", a, b)?;
        let out = Tensor::from_fn(self.vals[a.0].shape(), |i| {
            self.vals[a.0].data()[i] * self.vals[b.0].data()[i]
        });
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// a + bias with the rank-1 bias broadcast along the channel axis
    /// (columns of a B x C matrix, axis 1 of an NCHW tensor).
    pub fn add_bias(&mut self, a: ValueId, bias: ValueId) -> Result<ValueId> {
        let ashape = self.vals[a.0].shape().to_vec();
        let bshape = self.vals[bias.0].shape().to_vec();
        let channels = match ashape.len() {
            2 | 4 => ashape[1],
            _ => 0,
        };
        if bshape.len() != 1 || bshape[0] != channels {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: ashape,
                rhs: bshape,
            });
        }
        let bt = &self.vals[bias.0];
        let at = &self.vals[a.0];
        let out = match ashape.len() {
            2 => Tensor::from_fn(&ashape, |i| at.data()[i] + bt.data()[i % channels]),
            _ => {
                let hw = ashape[2] * ashape[3];
                Tensor::from_fn(&ashape, |i| at.data()[i] + bt.data()[(i / hw) % channels])
            }
        };
        Ok(self.push(out, Op::AddBias(a, bias)))
    }

    /// Multiply by a compile-time constant (not a tape value).
    pub fn scale(&mut self, a: ValueId, k: F) -> ValueId {
        let out = self.vals[a.0].map(|v| v * k);
        self.push(out, Op::Scale(a, k))
    }

    pub fn relu(&mut self, a: ValueId) -> ValueId {
        let out = self.vals[a.0].map(|v| if v > F::zero() { v } else { F::zero() });
        self.push(out, Op::Relu(a))
    }

    pub fn exp(&mut self, a: ValueId) -> ValueId {
        let out = self.vals[a.0].map(|v| v.exp());
        self.push(out, Op::Exp(a))
    }

    pub fn log(&mut self, a: ValueId) -> ValueId {
        let out = self.vals[a.0].map(|v| v.ln());
        self.push(out, Op::Log(a))
    }

    pub fn square(&mut self, a: ValueId) -> ValueId {
        let out = self.vals[a.0].map(|v| v * v);
        self.push(out, Op::Square(a))
    }

    /// Elementwise clamp to the closed interval [lo, hi]. The gradient is 1
    /// on [lo, hi] (boundary inclusive) and 0 strictly outside.
    pub fn clamp(&mut self, a: ValueId, lo: F, hi: F) -> Result<ValueId> {
        if lo > hi {
            return Err(Error::invalid(
                "clamp bounds",
                format!("lo {} > hi {}", lo, hi),
            ));
        }
        let out = self.vals[a.0].map(|v| {
            if v < lo {
                lo
            } else if v > hi {
                hi
            } else {
                v
            }
        });
        Ok(self.push(out, Op::Clamp(a, lo, hi)))
    }

    /// Hard sigmoid: 0 below -c, 1 above c, x/(2c) + 0.5 between, with the
    /// interior branch taken at exactly +/-c.
    pub fn hard_sigmoid(&mut self, a: ValueId, c: F) -> Result<ValueId> {
        if c <= F::zero() {
            return Err(Error::invalid(
                "hard sigmoid half-width",
                format!("c must be positive, got {}", c),
            ));
        }
        let half = cast::<F>(0.5);
        let two = cast::<F>(2.0);
        let out = self.vals[a.0].map(|v| {
            if v < -c {
                F::zero()
            } else if v > c {
                F::one()
            } else {
                v / (two * c) + half
            }
        });
        Ok(self.push(out, Op::HardSigmoid(a, c)))
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ash, bsh) = (self.vals[a.0].shape(), self.vals[b.0].shape());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ash.to_vec(),
                rhs: bsh.to_vec(),
            });
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let at = &self.vals[a.0];
        let bt = &self.vals[b.0];
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for p in 0..k {
                let av = at.data()[i * k + p];
                let brow = &bt.data()[p * n..(p + 1) * n];
                let orow = &mut out.data_mut()[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        Ok(self.push(out, Op::Matmul(a, b)))
    }

    /// Sum or mean over a set of axes; reduced axes are removed from the
    /// shape (a full reduction yields a scalar).
    pub fn reduce(&mut self, input: ValueId, kind: ReduceKind, axes: &[usize]) -> Result<ValueId> {
        let in_shape = self.vals[input.0].shape().to_vec();
        let rank = in_shape.len();
        let mut axes: Vec<usize> = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.is_empty() {
            return Err(Error::invalid("reduce axes", "empty axis set"));
        }
        if axes.iter().any(|&a| a >= rank) {
            return Err(Error::invalid(
                "reduce axes",
                format!("axes {:?} out of range for rank {}", axes, rank),
            ));
        }
        let mut reduced = vec![false; rank];
        for &a in &axes {
            reduced[a] = true;
        }
        let out_shape: Vec<usize> = in_shape
            .iter()
            .enumerate()
            .filter(|(d, _)| !reduced[*d])
            .map(|(_, &s)| s)
            .collect();
        let out_shape = if out_shape.is_empty() { vec![1] } else { out_shape };
        if !matches!(out_shape.len(), 1 | 2 | 4) {
            return Err(Error::invalid(
                "reduce axes",
                format!("result rank {} unsupported", out_shape.len()),
            ));
        }
        let count: usize = axes.iter().map(|&a| in_shape[a]).product();
        let out_len: usize = out_shape.iter().product();
        let mut out = vec![F::zero(); out_len];
        for_each_reduced_index(&in_shape, &reduced, |in_flat, out_flat| {
            out[out_flat] += self.vals[input.0].data()[in_flat];
        });
        if kind == ReduceKind::Mean {
            let c = cast::<F>(count as f64);
            for v in &mut out {
                *v /= c;
            }
        }
        let out = Tensor::new(out_shape, out).expect("reduce output shape");
        Ok(self.push(out, Op::Reduce { input, kind, axes }))
    }

    /// 2-D cross-correlation with zero padding, NCHW input, OIHW kernel.
    pub fn conv2d(
        &mut self,
        x: ValueId,
        kernel: ValueId,
        stride: usize,
        pad: usize,
    ) -> Result<ValueId> {
        let xs = self.vals[x.0].shape().to_vec();
        let ks = self.vals[kernel.0].shape().to_vec();
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ks,
            });
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride", "stride must be >= 1"));
        }
        let (n, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, kh, kw) = (ks[0], ks[2], ks[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::invalid(
                "conv2d output",
                format!("kernel {}x{} larger than padded input {}x{}", kh, kw, h + 2 * pad, w + 2 * pad),
            ));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let xt = &self.vals[x.0];
        let kt = &self.vals[kernel.0];
        let mut out = Tensor::zeros(&[n, c_out, oh, ow]);
        for b in 0..n {
            for oc in 0..c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = F::zero();
                        for ic in 0..c_in {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let xrow = xt.idx4(b, ic, iy as usize, 0);
                                let krow = kt.idx4(oc, ic, ky, 0);
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += xt.data()[xrow + ix as usize] * kt.data()[krow + kx];
                                }
                            }
                        }
                        let o = out.idx4(b, oc, oy, ox);
                        out.data_mut()[o] = acc;
                    }
                }
            }
        }
        Ok(self.push(out, Op::Conv2d { x, kernel, stride, pad }))
    }

    /// 2x2 average pooling with stride 2; spatial dims must be even.
    pub fn avg_pool2(&mut self, x: ValueId) -> Result<ValueId> {
        let xs = self.vals[x.0].shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::invalid(
                "avg_pool2 input",
                format!("expected rank-4 tensor, got {:?}", xs),
            ));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid(
                "avg_pool2 input",
                format!("spatial dims must be even, got {}x{}", h, w),
            ));
        }
        let quarter = cast::<F>(0.25);
        let xt = &self.vals[x.0];
        let mut out = Tensor::zeros(&[n, c, h / 2, w / 2]);
        for b in 0..n {
            for ch in 0..c {
                for oy in 0..h / 2 {
                    for ox in 0..w / 2 {
                        let s = xt.at4(b, ch, 2 * oy, 2 * ox)
                            + xt.at4(b, ch, 2 * oy, 2 * ox + 1)
                            + xt.at4(b, ch, 2 * oy + 1, 2 * ox)
                            + xt.at4(b, ch, 2 * oy + 1, 2 * ox + 1);
                        let o = out.idx4(b, ch, oy, ox);
                        out.data_mut()[o] = s * quarter;
                    }
                }
            }
        }
        Ok(self.push(out, Op::AvgPool2(x)))
    }

    /// Train-mode batch normalization over the channel axis using biased
    /// batch variance. Returns the output node plus the batch mean and
    /// variance so the caller can update running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: F,
    ) -> Result<(ValueId, Vec<F>, Vec<F>)> {
        let (channels, denom) = self.bn_layout(x, gamma, beta)?;
        if denom < 2 {
            return Err(Error::invalid(
                "batch norm",
                format!("train mode needs >= 2 samples per channel, got {}", denom),
            ));
        }
        let xt = &self.vals[x.0];
        let mut mean = vec![F::zero(); channels];
        let mut var = vec![F::zero(); channels];
        let chan = channel_indexer(xt.shape());
        for (i, &v) in xt.data().iter().enumerate() {
            mean[chan(i)] += v;
        }
        let dn = cast::<F>(denom as f64);
        for m in &mut mean {
            *m /= dn;
        }
        for (i, &v) in xt.data().iter().enumerate() {
            let d = v - mean[chan(i)];
            var[chan(i)] += d * d;
        }
        for v in &mut var {
            *v /= dn;
        }
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let xhat = Tensor::from_fn(xt.shape(), |i| {
            let c = chan(i);
            (xt.data()[i] - mean[c]) * inv_std[c]
        });
        let gt = &self.vals[gamma.0];
        let bt = &self.vals[beta.0];
        let out = Tensor::from_fn(xhat.shape(), |i| {
            let c = chan(i);
            gt.data()[c] * xhat.data()[i] + bt.data()[c]
        });
        let node = self.push(
            out,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        );
        Ok((node, mean, var))
    }

    /// Inference-mode batch normalization using fixed running statistics.
    pub fn batch_norm_infer(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        running_mean: &[F],
        running_var: &[F],
        eps: F,
    ) -> Result<ValueId> {
        let (channels, _) = self.bn_layout(x, gamma, beta)?;
        if running_mean.len() != channels || running_var.len() != channels {
            return Err(Error::invalid(
                "batch norm running stats",
                format!(
                    "expected {} channels, got mean {} / var {}",
                    channels,
                    running_mean.len(),
                    running_var.len()
                ),
            ));
        }
        if running_var.iter().any(|&v| v <= F::zero()) {
            return Err(Error::invalid(
                "batch norm running stats",
                "running variance entries must be positive",
            ));
        }
        let xt = &self.vals[x.0];
        let chan = channel_indexer(xt.shape());
        let inv_std: Vec<F> = running_var
            .iter()
            .map(|&v| F::one() / (v + eps).sqrt())
            .collect();
        let xhat = Tensor::from_fn(xt.shape(), |i| {
            let c = chan(i);
            (xt.data()[i] - running_mean[c]) * inv_std[c]
        });
        let gt = &self.vals[gamma.0];
        let bt = &self.vals[beta.0];
        let out = Tensor::from_fn(xhat.shape(), |i| {
            let c = chan(i);
            gt.data()[c] * xhat.data()[i] + bt.data()[c]
        });
        Ok(self.push(
            out,
            Op::BatchNormInfer {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    fn bn_layout(&self, x: ValueId, gamma: ValueId, beta: ValueId) -> Result<(usize, usize)> {
        let xs = self.vals[x.0].shape();
        let channels = match xs.len() {
            2 | 4 => xs[1],
            _ => {
                return Err(Error::invalid(
                    "batch norm input",
                    format!("expected rank 2 or 4, got {:?}", xs),
                ))
            }
        };
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let s = self.vals[v.0].shape();
            if s.len() != 1 || s[0] != channels {
                return Err(Error::invalid(
                    "batch norm",
                    format!("{} shape {:?} does not match {} channels", name, s, channels),
                ));
            }
        }
        let denom = if xs.len() == 2 {
            xs[0]
        } else {
            xs[0] * xs[2] * xs[3]
        };
        Ok((channels, denom))
    }

    /// Contiguous horizontal slice of an NCHW tensor along the H axis.
    pub fn slice_rows(&mut self, x: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let xs = self.vals[x.0].shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::invalid(
                "slice_rows input",
                format!("expected rank-4 tensor, got {:?}", xs),
            ));
        }
        if len == 0 || start + len > xs[2] {
            return Err(Error::invalid(
                "slice_rows range",
                format!("rows {}..{} out of height {}", start, start + len, xs[2]),
            ));
        }
        let (n, c, _, w) = (xs[0], xs[1], xs[2], xs[3]);
        let xt = &self.vals[x.0];
        let mut out = Tensor::zeros(&[n, c, len, w]);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..len {
                    let src = xt.idx4(b, ch, start + y, 0);
                    let dst = out.idx4(b, ch, y, 0);
                    out.data_mut()[dst..dst + w].copy_from_slice(&xt.data()[src..src + w]);
                }
            }
        }
        Ok(self.push(out, Op::SliceRows { x, start }))
    }

    /// Mean over the batch of -sum_i q_i * log softmax(z)_i, computed with
    /// the max-shift stabilization. `targets` are fixed probability rows.
    pub fn cross_entropy(&mut self, logits: ValueId, targets: &Tensor<F>) -> Result<ValueId> {
        let ls = self.vals[logits.0].shape().to_vec();
        if ls.len() != 2 || targets.shape() != ls.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: ls,
                rhs: targets.shape().to_vec(),
            });
        }
        if !self.vals[logits.0].all_finite() {
            return Err(Error::Numeric("cross_entropy: non-finite logits".into()));
        }
        let (b, n) = (ls[0], ls[1]);
        let zt = &self.vals[logits.0];
        let mut total = F::zero();
        for r in 0..b {
            let row = &zt.data()[r * n..(r + 1) * n];
            let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut sum_exp = F::zero();
            for &z in row {
                sum_exp += (z - m).exp();
            }
            let lse = m + sum_exp.ln();
            let mut dot = F::zero();
            for (i, &z) in row.iter().enumerate() {
                dot += targets.data()[r * n + i] * z;
            }
            total += lse - dot;
        }
        let out = Tensor::scalar(total / cast::<F>(b as f64));
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.clone(),
            },
        ))
    }

    /// Batch-hard triplet loss on a B x D embedding matrix: per anchor the
    /// farthest positive and nearest negative, hinged at `margin`, averaged
    /// over anchors. Every anchor must have at least one positive and one
    /// negative in the batch.
    pub fn batch_hard_triplet(&mut self, emb: ValueId, ids: &[usize], margin: F) -> Result<ValueId> {
        let es = self.vals[emb.0].shape().to_vec();
        if es.len() != 2 {
            return Err(Error::invalid(
                "triplet embeddings",
                format!("expected rank-2 tensor, got {:?}", es),
            ));
        }
        let (b, d) = (es[0], es[1]);
        if ids.len() != b {
            return Err(Error::invalid(
                "triplet labels",
                format!("{} labels for {} embeddings", ids.len(), b),
            ));
        }
        if margin < F::zero() {
            return Err(Error::invalid("triplet margin", "margin must be >= 0"));
        }
        let et = &self.vals[emb.0];
        let dist = |i: usize, j: usize| -> F {
            let mut acc = F::zero();
            for k in 0..d {
                let diff = et.data()[i * d + k] - et.data()[j * d + k];
                acc += diff * diff;
            }
            acc.sqrt()
        };
        let mut picks = Vec::with_capacity(b);
        let mut total = F::zero();
        for a in 0..b {
            let mut pos: Option<(usize, F)> = None;
            let mut neg: Option<(usize, F)> = None;
            for j in 0..b {
                if j == a {
                    continue;
                }
                let dj = dist(a, j);
                if ids[j] == ids[a] {
                    if pos.map_or(true, |(_, dp)| dj > dp) {
                        pos = Some((j, dj));
                    }
                } else if neg.map_or(true, |(_, dn)| dj < dn) {
                    neg = Some((j, dj));
                }
            }
            let (p, d_pos) = pos.ok_or_else(|| {
                Error::invalid(
                    "triplet batch",
                    format!("anchor {} has no positive (sampler contract violated)", a),
                )
            })?;
            let (ng, d_neg) = neg.ok_or_else(|| {
                Error::invalid(
                    "triplet batch",
                    format!("anchor {} has no negative (sampler contract violated)", a),
                )
            })?;
            let term = margin + d_pos - d_neg;
            let active = term > F::zero();
            if active {
                total += term;
            }
            picks.push(TripletPick {
                pos: p,
                neg: ng,
                d_pos,
                d_neg,
                active,
            });
        }
        let out = Tensor::scalar(total / cast::<F>(b as f64));
        Ok(self.push(out, Op::BatchHardTriplet { emb, picks }))
    }

    /// Reverse pass from a scalar loss node. Returns a gradient per
    /// registered parameter; parameters the loss does not reach receive
    /// zero gradients of their own shape.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients<F>> {
        if self.vals[loss.0].shape() != [1] {
            return Err(Error::invalid(
                "backward loss",
                format!("loss must be a scalar, got shape {:?}", self.vals[loss.0].shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.vals.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(F::one()));

        for idx in (0..self.ops.len()).rev() {
            let g = match &grads[idx] {
                Some(t) => t.clone(),
                None => continue,
            };
            match &self.ops[idx] {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accum(&mut grads, *a, g.clone());
                    accum(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accum(&mut grads, *a, g.clone());
                    accum(&mut grads, *b, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let da = Tensor::from_fn(g.shape(), |i| g.data()[i] * self.vals[b.0].data()[i]);
                    let db = Tensor::from_fn(g.shape(), |i| g.data()[i] * self.vals[a.0].data()[i]);
                    accum(&mut grads, *a, da);
                    accum(&mut grads, *b, db);
                }
                Op::AddBias(a, bias) => {
                    let channels = self.vals[bias.0].len();
                    let mut db = Tensor::zeros(&[channels]);
                    let chan = channel_indexer(g.shape());
                    for (i, &gv) in g.data().iter().enumerate() {
                        db.data_mut()[chan(i)] += gv;
                    }
                    accum(&mut grads, *a, g);
                    accum(&mut grads, *bias, db);
                }
                Op::Scale(a, k) => {
                    accum(&mut grads, *a, g.map(|v| v * *k));
                }
                Op::Relu(a) => {
                    let x = &self.vals[a.0];
                    let da = Tensor::from_fn(g.shape(), |i| {
                        if x.data()[i] > F::zero() {
                            g.data()[i]
                        } else {
                            F::zero()
                        }
                    });
                    accum(&mut grads, *a, da);
                }
                Op::Exp(a) => {
                    let out = &self.vals[idx];
                    let da = Tensor::from_fn(g.shape(), |i| g.data()[i] * out.data()[i]);
                    accum(&mut grads, *a, da);
                }
                Op::Log(a) => {
                    let x = &self.vals[a.0];
                    let da = Tensor::from_fn(g.shape(), |i| g.data()[i] / x.data()[i]);
                    accum(&mut grads, *a, da);
                }
                Op::Square(a) => {
                    let x = &self.vals[a.0];
                    let two = cast::<F>(2.0);
                    let da = Tensor::from_fn(g.shape(), |i| two * x.data()[i] * g.data()[i]);
                    accum(&mut grads, *a, da);
                }
                Op::Clamp(a, lo, hi) => {
                    let x = &self.vals[a.0];
                    let da = Tensor::from_fn(g.shape(), |i| {
                        let v = x.data()[i];
                        if v >= *lo && v <= *hi {
                            g.data()[i]
                        } else {
                            F::zero()
                        }
                    });
                    accum(&mut grads, *a, da);
                }
                Op::HardSigmoid(a, c) => {
                    let x = &self.vals[a.0];
                    let slope = F::one() / (cast::<F>(2.0) * *c);
                    let da = Tensor::from_fn(g.shape(), |i| {
                        let v = x.data()[i];
                        if v >= -*c && v <= *c {
                            g.data()[i] * slope
                        } else {
                            F::zero()
                        }
                    });
                    accum(&mut grads, *a, da);
                }
                Op::Matmul(a, b) => {
                    let ash = self.vals[a.0].shape();
                    let bsh = self.vals[b.0].shape();
                    let (m, k, n) = (ash[0], ash[1], bsh[1]);
                    let at = &self.vals[a.0];
                    let bt = &self.vals[b.0];
                    // dL/da = g . b^T
                    let mut da = Tensor::zeros(&[m, k]);
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = F::zero();
                            for j in 0..n {
                                acc += g.data()[i * n + j] * bt.data()[p * n + j];
                            }
                            da.data_mut()[i * k + p] = acc;
                        }
                    }
                    // dL/db = a^T . g
                    let mut db = Tensor::zeros(&[k, n]);
                    for p in 0..k {
                        for i in 0..m {
                            let av = at.data()[i * k + p];
                            let grow = &g.data()[i * n..(i + 1) * n];
                            let drow = &mut db.data_mut()[p * n..(p + 1) * n];
                            for j in 0..n {
                                drow[j] += av * grow[j];
                            }
                        }
                    }
                    accum(&mut grads, *a, da);
                    accum(&mut grads, *b, db);
                }
                Op::Reduce { input, kind, axes } => {
                    let in_shape = self.vals[input.0].shape().to_vec();
                    let mut reduced = vec![false; in_shape.len()];
                    for &a in axes {
                        reduced[a] = true;
                    }
                    let count: usize = axes.iter().map(|&a| in_shape[a]).product();
                    let scale = match kind {
                        ReduceKind::Sum => F::one(),
                        ReduceKind::Mean => F::one() / cast::<F>(count as f64),
                    };
                    let mut da = Tensor::zeros(&in_shape);
                    for_each_reduced_index(&in_shape, &reduced, |in_flat, out_flat| {
                        da.data_mut()[in_flat] += g.data()[out_flat] * scale;
                    });
                    accum(&mut grads, *input, da);
                }
                Op::Conv2d { x, kernel, stride, pad } => {
                    let xs = self.vals[x.0].shape().to_vec();
                    let ks = self.vals[kernel.0].shape().to_vec();
                    let (n, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let (c_out, kh, kw) = (ks[0], ks[2], ks[3]);
                    let os = g.shape().to_vec();
                    let (oh, ow) = (os[2], os[3]);
                    let xt = &self.vals[x.0];
                    let kt = &self.vals[kernel.0];
                    let mut dx = Tensor::zeros(&xs);
                    let mut dk = Tensor::zeros(&ks);
                    for b in 0..n {
                        for oc in 0..c_out {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let go = g.at4(b, oc, oy, ox);
                                    if go == F::zero() {
                                        continue;
                                    }
                                    for ic in 0..c_in {
                                        for ky in 0..kh {
                                            let iy = (oy * stride + ky) as isize - *pad as isize;
                                            if iy < 0 || iy >= h as isize {
                                                continue;
                                            }
                                            for kx in 0..kw {
                                                let ix = (ox * stride + kx) as isize - *pad as isize;
                                                if ix < 0 || ix >= w as isize {
                                                    continue;
                                                }
                                                let xi = xt.idx4(b, ic, iy as usize, ix as usize);
                                                let ki = kt.idx4(oc, ic, ky, kx);
                                                dk.data_mut()[ki] += go * xt.data()[xi];
                                                dx.data_mut()[xi] += go * kt.data()[ki];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    accum(&mut grads, *x, dx);
                    accum(&mut grads, *kernel, dk);
                }
                Op::AvgPool2(x) => {
                    let xs = self.vals[x.0].shape().to_vec();
                    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let quarter = cast::<F>(0.25);
                    let mut dx = Tensor::zeros(&xs);
                    for b in 0..n {
                        for ch in 0..c {
                            for oy in 0..h / 2 {
                                for ox in 0..w / 2 {
                                    let gv = g.at4(b, ch, oy, ox) * quarter;
                                    for (dy, dxo) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                        let i = dx.idx4(b, ch, 2 * oy + dy, 2 * ox + dxo);
                                        dx.data_mut()[i] += gv;
                                    }
                                }
                            }
                        }
                    }
                    accum(&mut grads, *x, dx);
                }
                Op::BatchNormTrain { x, gamma, beta, xhat, inv_std } => {
                    let channels = inv_std.len();
                    let chan = channel_indexer(xhat.shape());
                    let denom = cast::<F>((xhat.len() / channels) as f64);
                    let mut sum_g = vec![F::zero(); channels];
                    let mut sum_gx = vec![F::zero(); channels];
                    for (i, &gv) in g.data().iter().enumerate() {
                        let c = chan(i);
                        sum_g[c] += gv;
                        sum_gx[c] += gv * xhat.data()[i];
                    }
                    let gt = &self.vals[gamma.0];
                    let dx = Tensor::from_fn(xhat.shape(), |i| {
                        let c = chan(i);
                        gt.data()[c]
                            * inv_std[c]
                            * (g.data()[i] - sum_g[c] / denom - xhat.data()[i] * sum_gx[c] / denom)
                    });
                    accum(&mut grads, *x, dx);
                    accum(&mut grads, *gamma, Tensor::new(vec![channels], sum_gx).unwrap());
                    accum(&mut grads, *beta, Tensor::new(vec![channels], sum_g).unwrap());
                }
                Op::BatchNormInfer { x, gamma, beta, xhat, inv_std } => {
                    let channels = inv_std.len();
                    let chan = channel_indexer(xhat.shape());
                    let mut sum_g = vec![F::zero(); channels];
                    let mut sum_gx = vec![F::zero(); channels];
                    for (i, &gv) in g.data().iter().enumerate() {
                        let c = chan(i);
                        sum_g[c] += gv;
                        sum_gx[c] += gv * xhat.data()[i];
                    }
                    let gt = &self.vals[gamma.0];
                    let dx = Tensor::from_fn(xhat.shape(), |i| {
                        let c = chan(i);
                        g.data()[i] * gt.data()[c] * inv_std[c]
                    });
                    accum(&mut grads, *x, dx);
                    accum(&mut grads, *gamma, Tensor::new(vec![channels], sum_gx).unwrap());
                    accum(&mut grads, *beta, Tensor::new(vec![channels], sum_g).unwrap());
                }
                Op::SliceRows { x, start } => {
                    let xs = self.vals[x.0].shape().to_vec();
                    let (n, c, _, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let len = g.shape()[2];
                    let mut dx = Tensor::zeros(&xs);
                    for b in 0..n {
                        for ch in 0..c {
                            for y in 0..len {
                                let dst = dx.idx4(b, ch, start + y, 0);
                                let src = g.idx4(b, ch, y, 0);
                                for xx in 0..w {
                                    dx.data_mut()[dst + xx] += g.data()[src + xx];
                                }
                            }
                        }
                    }
                    accum(&mut grads, *x, dx);
                }
                Op::CrossEntropy { logits, targets } => {
                    let s = g.item();
                    let ls = self.vals[logits.0].shape().to_vec();
                    let (b, n) = (ls[0], ls[1]);
                    let zt = &self.vals[logits.0];
                    let scale = s / cast::<F>(b as f64);
                    let mut dz = Tensor::zeros(&[b, n]);
                    for r in 0..b {
                        let row = &zt.data()[r * n..(r + 1) * n];
                        let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
                        let mut sum_exp = F::zero();
                        for &z in row {
                            sum_exp += (z - m).exp();
                        }
                        for i in 0..n {
                            let soft = (row[i] - m).exp() / sum_exp;
                            dz.data_mut()[r * n + i] = scale * (soft - targets.data()[r * n + i]);
                        }
                    }
                    accum(&mut grads, *logits, dz);
                }
                Op::BatchHardTriplet { emb, picks } => {
                    let s = g.item();
                    let es = self.vals[emb.0].shape().to_vec();
                    let (b, d) = (es[0], es[1]);
                    let et = &self.vals[emb.0];
                    let coeff = s / cast::<F>(b as f64);
                    let mut de = Tensor::zeros(&[b, d]);
                    for (a, pick) in picks.iter().enumerate() {
                        if !pick.active {
                            continue;
                        }
                        // unit vectors from anchor toward positive / negative
                        for (other, dval, sign) in
                            [(pick.pos, pick.d_pos, F::one()), (pick.neg, pick.d_neg, -F::one())]
                        {
                            if dval == F::zero() {
                                continue;
                            }
                            for k in 0..d {
                                let u = (et.data()[a * d + k] - et.data()[other * d + k]) / dval;
                                de.data_mut()[a * d + k] += coeff * sign * u;
                                de.data_mut()[other * d + k] -= coeff * sign * u;
                            }
                        }
                    }
                    accum(&mut grads, *emb, de);
                }
            }
        }

        let mut map = HashMap::with_capacity(self.params.len());
        for &(pid, vid) in &self.params {
            let g = grads[vid.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.vals[vid.0].shape()));
            map.insert(pid, g);
        }
        Ok(Gradients { map })
    }
}

fn accum<F: Scalar>(grads: &mut [Option<Tensor<F>>], v: ValueId, delta: Tensor<F>) {
    match &mut grads[v.0] {
        Some(t) => t.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

/// Maps a flat index to its channel (axis 1) for rank-2 and rank-4 shapes.
fn channel_indexer(shape: &[usize]) -> impl Fn(usize) -> usize {
    let channels = shape[1];
    let inner = if shape.len() == 4 { shape[2] * shape[3] } else { 1 };
    move |i: usize| (i / inner) % channels
}

/// Visits every flat input index together with the flat index of the
/// reduction output it maps to (reduced axes removed).
fn for_each_reduced_index(
    in_shape: &[usize],
    reduced: &[bool],
    mut f: impl FnMut(usize, usize),
) {
    let rank = in_shape.len();
    let len: usize = in_shape.iter().product();
    let mut midx = vec![0usize; rank];
    for flat in 0..len {
        let mut out_flat = 0usize;
        for d in 0..rank {
            if !reduced[d] {
                out_flat = out_flat * in_shape[d] + midx[d];
            }
        }
        f(flat, out_flat);
        for d in (0..rank).rev() {
            midx[d] += 1;
            if midx[d] < in_shape[d] {
                break;
            }
            midx[d] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(data: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![data.len()], data.to_vec()).unwrap()
    }

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn clamp_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[-1.0, 0.5, 7.0]));
        let y = tape.clamp(x, 0.0, 6.0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.5, 6.0]);
        assert!(tape.clamp(x, 3.0, 1.0).is_err());
    }

    #[test]
    fn add_and_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(t1(&[1.0, 2.0]));
        let b = tape.leaf(t1(&[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
        let d = tape.leaf(t1(&[1.0, 2.0, 3.0]));
        let err = tape.add(a, d).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{}", msg);
    }

    #[test]
    fn relu_backward_mask() {
        let mut tape = Tape::new();
        let w = tape.param(ParamId(0), &t1(&[-2.0, 3.0]));
        let y = tape.relu(w);
        assert_eq!(tape.value(y).data(), &[0.0, 3.0]);
        let s = tape.reduce(y, ReduceKind::Sum, &[0]).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let eye = tape.leaf(t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let r = tape.leaf(t2(1, 2, &[1.0, 2.0]));
        let c = tape.leaf(t2(2, 1, &[3.0, 4.0]));
        let p = tape.matmul(r, c).unwrap();
        assert_eq!(tape.value(p).data(), &[11.0]);

        assert!(tape.matmul(r, eye).is_ok());
        assert!(tape.matmul(c, c).is_err());
    }

    #[test]
    fn reduce_examples() {
        let mut tape = Tape::new();
        let m = tape.leaf(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let mean = tape.reduce(m, ReduceKind::Mean, &[0, 1]).unwrap();
        assert_eq!(tape.value(mean).data(), &[2.5]);

        let v = tape.leaf(t1(&[1.0, 2.0, 3.0]));
        let s = tape.reduce(v, ReduceKind::Sum, &[0]).unwrap();
        assert_eq!(tape.value(s).data(), &[6.0]);

        assert!(tape.reduce(v, ReduceKind::Sum, &[1]).is_err());

        let grads = tape.backward(mean).unwrap();
        assert!(grads.is_empty());
        let mut tape = Tape::new();
        let w = tape.param(ParamId(0), &t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let mean = tape.reduce(w, ReduceKind::Mean, &[0, 1]).unwrap();
        let grads = tape.backward(mean).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn backward_examples() {
        // loss = sum(square(w)), w = [1, 2] -> grad [2, 4]
        let mut tape = Tape::new();
        let w = tape.param(ParamId(0), &t1(&[1.0, 2.0]));
        let sq = tape.square(w);
        let loss = tape.reduce(sq, ReduceKind::Sum, &[0]).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[2.0, 4.0]);

        // loss independent of a registered parameter -> zero gradient
        let mut tape = Tape::new();
        let w = tape.param(ParamId(0), &t1(&[1.0, 2.0]));
        let u = tape.param(ParamId(1), &t1(&[5.0]));
        let _ = w;
        let sq = tape.square(u);
        let loss = tape.reduce(sq, ReduceKind::Sum, &[0]).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[0.0, 0.0]);

        // non-scalar loss rejected
        let mut tape = Tape::new();
        let w = tape.param(ParamId(0), &t1(&[1.0, 2.0]));
        let y = tape.square(w);
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn backward_linearity_is_exact() {
        let w = t1(&[0.3, -1.2, 2.5]);
        let grads_of = |which: u8| -> Vec<f64> {
            let mut tape = Tape::new();
            let wv = tape.param(ParamId(0), &w);
            let l1 = {
                let sq = tape.square(wv);
                tape.reduce(sq, ReduceKind::Sum, &[0]).unwrap()
            };
            let l2 = tape.reduce(wv, ReduceKind::Mean, &[0]).unwrap();
            let loss = match which {
                0 => l1,
                1 => l2,
                _ => tape.add(l1, l2).unwrap(),
            };
            let g = tape.backward(loss).unwrap();
            g.get(ParamId(0)).unwrap().data().to_vec()
        };
        let g1 = grads_of(0);
        let g2 = grads_of(1);
        let gsum = grads_of(2);
        for i in 0..3 {
            assert_eq!(gsum[i].to_bits(), (g1[i] + g2[i]).to_bits());
        }
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || -> Vec<u64> {
            let mut tape = Tape::new();
            let a = tape.leaf(t2(2, 3, &[0.1, -0.7, 2.3, 1.1, 0.0, -3.2]));
            let b = tape.leaf(t2(3, 2, &[1.5, -0.2, 0.8, 0.3, -1.1, 0.9]));
            let m = tape.matmul(a, b).unwrap();
            let r = tape.relu(m);
            let e = tape.exp(r);
            let s = tape.reduce(e, ReduceKind::Mean, &[0, 1]).unwrap();
            tape.value(s).data().iter().map(|v| v.to_bits()).collect()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn param_registration_dedupes() {
        let mut tape = Tape::new();
        let w = t1(&[1.0, 2.0]);
        let a = tape.param(ParamId(7), &w);
        let b = tape.param(ParamId(7), &w);
        assert_eq!(a, b);
        assert_eq!(tape.registered_params().len(), 1);
    }

    #[test]
    fn add_bias_broadcast_rules() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(2, 3, &[0.0; 6]));
        let b = tape.leaf(t1(&[1.0, 2.0, 3.0]));
        let y = tape.add_bias(x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let bad = tape.leaf(t1(&[1.0, 2.0]));
        assert!(tape.add_bias(x, bad).is_err());

        // NCHW broadcast along axis 1
        let x4 = tape.leaf(Tensor::new(vec![1, 2, 2, 1], vec![0.0; 4]).unwrap());
        let b2 = tape.leaf(t1(&[5.0, 9.0]));
        let y4 = tape.add_bias(x4, b2).unwrap();
        assert_eq!(tape.value(y4).data(), &[5.0, 5.0, 9.0, 9.0]);
    }

    #[test]
    fn conv2d_examples() {
        // 2x2 input, 2x2 ones kernel -> sum of entries
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let k = tape.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0; 4]).unwrap());
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[10.0]);

        // 1x1 identity channel mix
        let x = tape.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let k = tape.leaf(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        // channel mismatch
        let k_bad = tape.leaf(Tensor::new(vec![1, 2, 1, 1], vec![1.0, 1.0]).unwrap());
        assert!(tape.conv2d(x, k_bad, 1, 0).is_err());

        // degenerate output
        let k_big = tape.leaf(Tensor::new(vec![1, 1, 4, 4], vec![1.0; 16]).unwrap());
        assert!(tape.conv2d(x, k_big, 1, 0).is_err());
    }

    #[test]
    fn triplet_spec_example_matches_enumeration() {
        // identities A: {0.0, 0.5}, B: {0.6, 1.1}, margin 0.3; enumerating
        // every anchor gives hinge terms [0.2, 0.7, 0.7, 0.2]
        let mut tape = Tape::new();
        let emb = tape.leaf(t2(4, 1, &[0.0, 0.5, 0.6, 1.1]));
        let loss = tape.batch_hard_triplet(emb, &[0, 0, 1, 1], 0.3).unwrap();
        assert!((tape.value(loss).item() - 0.45).abs() < 1e-12);
    }

    #[test]
    fn triplet_contract_violations() {
        let mut tape = Tape::new();
        let emb = tape.leaf(t2(2, 1, &[0.0, 1.0]));
        // two samples, same id: no negative
        assert!(tape.batch_hard_triplet(emb, &[0, 0], 0.3).is_err());
        // two samples, distinct ids: no positive
        assert!(tape.batch_hard_triplet(emb, &[0, 1], 0.3).is_err());
    }

    #[test]
    fn cross_entropy_rejects_non_finite() {
        let mut tape = Tape::new();
        let z = tape.leaf(t2(1, 2, &[f64::NAN, 0.0]));
        let q = t2(1, 2, &[0.5, 0.5]);
        assert!(matches!(tape.cross_entropy(z, &q), Err(Error::Numeric(_))));
    }

    #[test]
    fn hard_sigmoid_rejects_bad_width() {
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[0.0]));
        assert!(tape.hard_sigmoid(x, 0.0).is_err());
        assert!(tape.hard_sigmoid(x, -1.0).is_err());
    }

    #[test]
    fn f32_engine_smoke() {
        let mut tape: Tape<f32> = Tape::new();
        let w = tape.param(ParamId(0), &Tensor::new(vec![2], vec![1.0f32, 2.0]).unwrap());
        let sq = tape.square(w);
        let loss = tape.reduce(sq, ReduceKind::Sum, &[0]).unwrap();
        assert_eq!(tape.value(loss).item(), 5.0f32);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[2.0f32, 4.0]);
    }
}
