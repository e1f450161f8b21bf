//! Recorded computation tape for reverse-mode differentiation.
//!
//! Every operation appends one node; node order is the topological order, so
//! backward is a single reverse sweep. Saved context (e.g. max-pool argmax)
//! lives in the node itself.

use std::collections::HashMap;

use rayon::prelude::*;

use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`GradGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        pad: usize,
    },
    ConvTranspose2d {
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
    },
    MaxPool2d {
        input: TensorId,
        argmax: Vec<usize>,
    },
    Mul(TensorId, TensorId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    ConcatChannels(TensorId, TensorId),
    Relu(TensorId),
    Sigmoid(TensorId),
    Abs(TensorId),
    Sum(TensorId),
    Mean(TensorId),
}

/// Gradients of a scalar result with respect to the graph's leaf tensors.
pub struct GradMap {
    grads: HashMap<TensorId, Tensor>,
}

impl GradMap {
    pub fn get(&self, id: TensorId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Tape of recorded operations plus the values they produced.
#[derive(Default)]
pub struct GradGraph {
    values: Vec<Tensor>,
    ops: Vec<Op>,
}

fn dims4(t: &Tensor, op: &'static str, role: &str) -> Result<[usize; 4]> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("{role} must be 4-d (N x C x H x W), got {s:?}"),
        });
    }
    Ok([s[0], s[1], s[2], s[3]])
}

impl GradGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded values (leaves included).
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Insert a leaf tensor; its `requires_grad` flag decides whether
    /// `backward` reports a gradient for it.
    pub fn leaf(&mut self, t: Tensor) -> TensorId {
        self.push(t, Op::Leaf)
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.values[id.0]
    }

    fn push(&mut self, t: Tensor, op: Op) -> TensorId {
        self.values.push(t);
        self.ops.push(op);
        TensorId(self.values.len() - 1)
    }

    /// Stride-1 2-d convolution with zero padding.
    ///
    /// input N x Cin x H x W, weight Cout x Cin x k x k, bias Cout.
    /// Output spatial size is H + 2*pad - k + 1.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        pad: usize,
    ) -> Result<TensorId> {
        let x = self.tensor(input);
        let w = self.tensor(weight);
        let b = self.tensor(bias);
        let [n, cin, h, wd] = dims4(x, "conv2d", "input")?;
        let [cout, wcin, kh, kw] = dims4(w, "conv2d", "weight")?;
        if kh != kw || kh < 1 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel must be square and >= 1, got {kh}x{kw}"),
            });
        }
        if wcin != cin {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!(
                    "input has {cin} channels but weight expects {wcin} \
                     (input {:?}, weight {:?})",
                    x.shape(),
                    w.shape()
                ),
            });
        }
        if b.shape() != [cout] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("bias shape {:?} does not match Cout={cout}", b.shape()),
            });
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!(
                    "spatial size {h}x{wd} with pad {pad} is smaller than kernel {kh}x{kw}"
                ),
            });
        }
        let out = conv2d_forward(x.data(), [n, cin, h, wd], w.data(), [cout, kh], b.data(), pad);
        let oh = h + 2 * pad - kh + 1;
        let ow = wd + 2 * pad - kw + 1;
        Ok(self.push(
            Tensor::new(vec![n, cout, oh, ow], out)?,
            Op::Conv2d {
                input,
                weight,
                bias,
                pad,
            },
        ))
    }

    /// Transposed convolution hard-wired to kernel 4, stride 2, pad 1:
    /// the unique combination that exactly doubles H and W.
    ///
    /// input N x Cin x H x W, weight Cin x Cout x 4 x 4, bias Cout.
    pub fn conv_transpose2d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
    ) -> Result<TensorId> {
        let x = self.tensor(input);
        let w = self.tensor(weight);
        let b = self.tensor(bias);
        let [n, cin, h, wd] = dims4(x, "conv_transpose2d", "input")?;
        let [wcin, cout, kh, kw] = dims4(w, "conv_transpose2d", "weight")?;
        if kh != 4 || kw != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d",
                detail: format!("kernel is fixed at 4x4, got {kh}x{kw}"),
            });
        }
        if wcin != cin {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d",
                detail: format!(
                    "input has {cin} channels but weight expects {wcin} \
                     (input {:?}, weight {:?})",
                    x.shape(),
                    w.shape()
                ),
            });
        }
        if b.shape() != [cout] {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d",
                detail: format!("bias shape {:?} does not match Cout={cout}", b.shape()),
            });
        }
        let out = conv_transpose2d_forward(x.data(), [n, cin, h, wd], w.data(), cout, b.data());
        Ok(self.push(
            Tensor::new(vec![n, cout, 2 * h, 2 * wd], out)?,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
            },
        ))
    }

    /// 2x2 max-pool with stride 2. H and W must be even. Ties go to the
    /// first element in row-major window order.
    pub fn maxpool2d(&mut self, input: TensorId) -> Result<TensorId> {
        let x = self.tensor(input);
        let [n, c, h, w] = dims4(x, "maxpool2d", "input")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "maxpool2d",
                detail: format!("spatial size {h}x{w} must be even in both dimensions"),
            });
        }
        let (out, argmax) = maxpool2d_forward(x.data(), [n, c, h, w]);
        Ok(self.push(
            Tensor::new(vec![n, c, h / 2, w / 2], out)?,
            Op::MaxPool2d { input, argmax },
        ))
    }

    /// Argmax indices saved by a max-pool node (flat indices into its input).
    pub fn pool_argmax(&self, id: TensorId) -> Option<&[usize]> {
        match &self.ops[id.0] {
            Op::MaxPool2d { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    /// Elementwise product. Backward sends grad*b to a and grad*a to b, which
    /// is what couples the two encoder towers through their fused skips.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip("mul", a, b, |x, y| x * y, |a, b| Op::Mul(a, b))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip("add", a, b, |x, y| x + y, |a, b| Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip("sub", a, b, |x, y| x - y, |a, b| Op::Sub(a, b))
    }

    fn zip(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: fn(f64, f64) -> f64,
        op: fn(TensorId, TensorId) -> Op,
    ) -> Result<TensorId> {
        let (ta, tb) = (self.tensor(a), self.tensor(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: name,
                detail: format!("shapes {:?} and {:?} differ", ta.shape(), tb.shape()),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = ta.shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, op(a, b)))
    }

    /// Concatenate along the channel axis; channels of `a` come first.
    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (self.tensor(a), self.tensor(b));
        let [n, ca, h, w] = dims4(ta, "concat_channels", "lhs")?;
        let [nb, cb, hb, wb] = dims4(tb, "concat_channels", "rhs")?;
        if n != nb || h != hb || w != wb {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                detail: format!(
                    "batch/spatial dims differ: {:?} vs {:?}",
                    ta.shape(),
                    tb.shape()
                ),
            });
        }
        let data = concat_channels_forward(ta.data(), tb.data(), n, ca, cb, h * w);
        Ok(self.push(
            Tensor::new(vec![n, ca + cb, h, w], data)?,
            Op::ConcatChannels(a, b),
        ))
    }

    /// max(0, x); the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let t = self.tensor(x);
        let data = t.data().iter().map(|v| v.max(0.0)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::Relu(x))
    }

    /// 1 / (1 + e^-x), strictly inside (0, 1).
    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let t = self.tensor(x);
        let data = t.data().iter().map(|v| sigmoid_scalar(*v)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::Sigmoid(x))
    }

    /// |x|; the subgradient at exactly 0 is 0.
    pub fn abs(&mut self, x: TensorId) -> TensorId {
        let t = self.tensor(x);
        let data = t.data().iter().map(|v| v.abs()).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::Abs(x))
    }

    /// Sum of all elements as a scalar (shape [1]).
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let s = self.tensor(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Mean of all elements as a scalar (shape [1]).
    pub fn mean(&mut self, x: TensorId) -> TensorId {
        let t = self.tensor(x);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    /// Reverse sweep from a scalar result. Every node is visited exactly once
    /// in reverse topological (= insertion) order; the returned map holds a
    /// gradient for each leaf inserted with `requires_grad`.
    pub fn backward(&mut self, result: TensorId) -> Result<GradMap> {
        let rt = self.tensor(result);
        if rt.numel() != 1 {
            return Err(TensorError::NonScalarBackward {
                shape: rt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.values.len()];
        grads[result.0] = Some(vec![1.0]);

        for i in (0..=result.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.ops[i] {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    pad,
                } => {
                    let x = &self.values[input.0];
                    let w = &self.values[weight.0];
                    let [n, cin, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
                    let [cout, k] = [w.shape()[0], w.shape()[2]];
                    let (gx, gw, gb) = conv2d_backward(
                        &g,
                        x.data(),
                        [n, cin, h, wd],
                        w.data(),
                        [cout, k],
                        *pad,
                    );
                    accumulate(&mut grads, input.0, gx);
                    accumulate(&mut grads, weight.0, gw);
                    accumulate(&mut grads, bias.0, gb);
                }
                Op::ConvTranspose2d {
                    input,
                    weight,
                    bias,
                } => {
                    let x = &self.values[input.0];
                    let w = &self.values[weight.0];
                    let [n, cin, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
                    let cout = w.shape()[1];
                    let (gx, gw, gb) =
                        conv_transpose2d_backward(&g, x.data(), [n, cin, h, wd], w.data(), cout);
                    accumulate(&mut grads, input.0, gx);
                    accumulate(&mut grads, weight.0, gw);
                    accumulate(&mut grads, bias.0, gb);
                }
                Op::MaxPool2d { input, argmax } => {
                    let mut gx = vec![0.0; self.values[input.0].numel()];
                    for (k, &src) in argmax.iter().enumerate() {
                        gx[src] += g[k];
                    }
                    accumulate(&mut grads, input.0, gx);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(self.values[b.0].data())
                        .map(|(g, y)| g * y)
                        .collect();
                    let gb: Vec<f64> = g
                        .iter()
                        .zip(self.values[a.0].data())
                        .map(|(g, x)| g * x)
                        .collect();
                    accumulate(&mut grads, a.0, ga);
                    accumulate(&mut grads, b.0, gb);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut grads, a.0, g.clone());
                    accumulate(&mut grads, b.0, g);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    let gb: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(&mut grads, a.0, g);
                    accumulate(&mut grads, b.0, gb);
                }
                Op::ConcatChannels(a, b) => {
                    let (a, b) = (*a, *b);
                    let sa = self.values[a.0].shape();
                    let sb = self.values[b.0].shape();
                    let (n, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
                    let mut ga = vec![0.0; n * ca * hw];
                    let mut gb = vec![0.0; n * cb * hw];
                    for i in 0..n {
                        let base = i * (ca + cb) * hw;
                        ga[i * ca * hw..(i + 1) * ca * hw]
                            .copy_from_slice(&g[base..base + ca * hw]);
                        gb[i * cb * hw..(i + 1) * cb * hw]
                            .copy_from_slice(&g[base + ca * hw..base + (ca + cb) * hw]);
                    }
                    accumulate(&mut grads, a.0, ga);
                    accumulate(&mut grads, b.0, gb);
                }
                Op::Relu(x) => {
                    let x = *x;
                    let gx: Vec<f64> = g
                        .iter()
                        .zip(self.values[x.0].data())
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, x.0, gx);
                }
                Op::Sigmoid(x) => {
                    let x = *x;
                    let gx: Vec<f64> = g
                        .iter()
                        .zip(self.values[i].data())
                        .map(|(g, s)| g * s * (1.0 - s))
                        .collect();
                    accumulate(&mut grads, x.0, gx);
                }
                Op::Abs(x) => {
                    let x = *x;
                    let gx: Vec<f64> = g
                        .iter()
                        .zip(self.values[x.0].data())
                        .map(|(g, v)| {
                            if *v > 0.0 {
                                *g
                            } else if *v < 0.0 {
                                -*g
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    accumulate(&mut grads, x.0, gx);
                }
                Op::Sum(x) => {
                    let x = *x;
                    let gx = vec![g[0]; self.values[x.0].numel()];
                    accumulate(&mut grads, x.0, gx);
                }
                Op::Mean(x) => {
                    let x = *x;
                    let n = self.values[x.0].numel();
                    let gx = vec![g[0] / n as f64; n];
                    accumulate(&mut grads, x.0, gx);
                }
            }
        }

        let mut map = HashMap::new();
        for (i, g) in grads.into_iter().enumerate() {
            if let (Some(g), Op::Leaf) = (g, &self.ops[i]) {
                let t = &self.values[i];
                if t.requires_grad() {
                    map.insert(TensorId(i), Tensor::new(t.shape().to_vec(), g)?);
                }
            }
        }
        Ok(GradMap { grads: map })
    }

    /// Smallest distance to a non-differentiable point anywhere in the
    /// recorded graph: |x| at relu/abs inputs and the winner-runner-up gap
    /// inside each max-pool window. Central finite differences are only
    /// trustworthy when this is comfortably larger than the probe epsilon
    /// times the largest parameter-to-activation slope.
    pub fn kink_distance(&self) -> f64 {
        let mut d = f64::INFINITY;
        for op in &self.ops {
            match op {
                Op::Relu(x) | Op::Abs(x) => {
                    for v in self.values[x.0].data() {
                        d = d.min(v.abs());
                    }
                }
                Op::MaxPool2d { input, .. } => {
                    let t = &self.values[input.0];
                    let s = t.shape();
                    let (h, w) = (s[2], s[3]);
                    let x = t.data();
                    for p in 0..s[0] * s[1] {
                        let plane = &x[p * h * w..(p + 1) * h * w];
                        for oy in 0..h / 2 {
                            for ox in 0..w / 2 {
                                let mut vals = [
                                    plane[2 * oy * w + 2 * ox],
                                    plane[2 * oy * w + 2 * ox + 1],
                                    plane[(2 * oy + 1) * w + 2 * ox],
                                    plane[(2 * oy + 1) * w + 2 * ox + 1],
                                ];
                                vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                                // a tie between exact zeros is a relu plateau,
                                // not a pool tie; the relu scan owns those
                                if vals[0] != 0.0 || vals[1] != 0.0 {
                                    d = d.min(vals[0] - vals[1]);
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        d
    }

    /// Re-run every recorded node from its stored inputs and compare against
    /// the stored outputs bit for bit.
    pub fn verify_replay(&self) -> bool {
        for (i, op) in self.ops.iter().enumerate() {
            let recomputed: Option<Vec<f64>> = match op {
                Op::Leaf => None,
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    pad,
                } => {
                    let x = &self.values[input.0];
                    let w = &self.values[weight.0];
                    Some(conv2d_forward(
                        x.data(),
                        [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]],
                        w.data(),
                        [w.shape()[0], w.shape()[2]],
                        self.values[bias.0].data(),
                        *pad,
                    ))
                }
                Op::ConvTranspose2d {
                    input,
                    weight,
                    bias,
                } => {
                    let x = &self.values[input.0];
                    let w = &self.values[weight.0];
                    Some(conv_transpose2d_forward(
                        x.data(),
                        [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]],
                        w.data(),
                        w.shape()[1],
                        self.values[bias.0].data(),
                    ))
                }
                Op::MaxPool2d { input, argmax } => {
                    let x = &self.values[input.0];
                    let (out, am) = maxpool2d_forward(
                        x.data(),
                        [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]],
                    );
                    if &am != argmax {
                        return false;
                    }
                    Some(out)
                }
                Op::Mul(a, b) => Some(zip_data(&self.values[a.0], &self.values[b.0], |x, y| x * y)),
                Op::Add(a, b) => Some(zip_data(&self.values[a.0], &self.values[b.0], |x, y| x + y)),
                Op::Sub(a, b) => Some(zip_data(&self.values[a.0], &self.values[b.0], |x, y| x - y)),
                Op::ConcatChannels(a, b) => {
                    let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
                    Some(concat_channels_forward(
                        ta.data(),
                        tb.data(),
                        ta.shape()[0],
                        ta.shape()[1],
                        tb.shape()[1],
                        ta.shape()[2] * ta.shape()[3],
                    ))
                }
                Op::Relu(x) => Some(self.values[x.0].data().iter().map(|v| v.max(0.0)).collect()),
                Op::Sigmoid(x) => Some(
                    self.values[x.0]
                        .data()
                        .iter()
                        .map(|v| sigmoid_scalar(*v))
                        .collect(),
                ),
                Op::Abs(x) => Some(self.values[x.0].data().iter().map(|v| v.abs()).collect()),
                Op::Sum(x) => Some(vec![self.values[x.0].data().iter().sum()]),
                Op::Mean(x) => {
                    let t = &self.values[x.0];
                    Some(vec![t.data().iter().sum::<f64>() / t.numel() as f64])
                }
            };
            if let Some(r) = recomputed {
                if r.iter()
                    .zip(self.values[i].data())
                    .any(|(a, b)| a.to_bits() != b.to_bits())
                {
                    return false;
                }
            }
        }
        true
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, g: Vec<f64>) {
    match &mut grads[idx] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot => *slot = Some(g),
    }
}

fn zip_data(a: &Tensor, b: &Tensor, f: fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect()
}

fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// Work threshold below which conv kernels stay single-threaded; tiny tensors
// are dominated by thread handoff, and results are identical either way.
const PAR_MIN_WORK: usize = 1 << 18;

/// Dot product with four independent accumulators. The summation order is a
/// fixed function of the length, so results stay bit-reproducible.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..chunks {
        let j = 4 * i;
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in 4 * chunks..n {
        tail += a[j] * b[j];
    }
    (s0 + s1) + (s2 + s3) + tail
}

fn conv2d_forward(
    x: &[f64],
    [n, cin, h, w]: [usize; 4],
    wt: &[f64],
    [cout, k]: [usize; 2],
    bias: &[f64],
    pad: usize,
) -> Vec<f64> {
    let oh = h + 2 * pad - k + 1;
    let ow = w + 2 * pad - k + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    let work = out.len() * cin * k * k;

    let plane = |co: usize, ni: usize, dst: &mut [f64]| {
        dst.fill(bias[co]);
        for ci in 0..cin {
            let xin = &x[(ni * cin + ci) * h * w..(ni * cin + ci + 1) * h * w];
            for kh in 0..k {
                for kw in 0..k {
                    let wv = wt[((co * cin + ci) * k + kh) * k + kw];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy + kh) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let in_row = &xin[iy as usize * w..(iy as usize + 1) * w];
                        let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                        // ox + kw - pad must land in [0, w)
                        let lo = pad.saturating_sub(kw);
                        let hi = (w as isize + pad as isize - kw as isize).clamp(0, ow as isize)
                            as usize;
                        if lo >= hi {
                            continue;
                        }
                        let src = &in_row[lo + kw - pad..hi + kw - pad];
                        for (o, i) in out_row[lo..hi].iter_mut().zip(src) {
                            *o += wv * i;
                        }
                    }
                }
            }
        }
    };

    if work >= PAR_MIN_WORK && n * cout > 1 {
        out.par_chunks_mut(oh * ow).enumerate().for_each(|(p, dst)| {
            plane(p % cout, p / cout, dst);
        });
    } else {
        for (p, dst) in out.chunks_mut(oh * ow).enumerate() {
            plane(p % cout, p / cout, dst);
        }
    }
    out
}

fn conv2d_backward(
    g: &[f64],
    x: &[f64],
    [n, cin, h, w]: [usize; 4],
    wt: &[f64],
    [cout, k]: [usize; 2],
    pad: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let oh = h + 2 * pad - k + 1;
    let ow = w + 2 * pad - k + 1;

    let mut gb = vec![0.0; cout];
    for ni in 0..n {
        for co in 0..cout {
            let go = &g[(ni * cout + co) * oh * ow..(ni * cout + co + 1) * oh * ow];
            gb[co] += go.iter().sum::<f64>();
        }
    }

    // d/d(weight): correlate input with the output gradient.
    let mut gw = vec![0.0; cout * cin * k * k];
    let work_w = gw.len() * n * oh * ow;
    let wplane = |co: usize, gw_co: &mut [f64]| {
        for ci in 0..cin {
            for kh in 0..k {
                for kw in 0..k {
                    let mut acc = 0.0;
                    for ni in 0..n {
                        let xin = &x[(ni * cin + ci) * h * w..(ni * cin + ci + 1) * h * w];
                        let go = &g[(ni * cout + co) * oh * ow..(ni * cout + co + 1) * oh * ow];
                        for oy in 0..oh {
                            let iy = (oy + kh) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let in_row = &xin[iy as usize * w..(iy as usize + 1) * w];
                            let go_row = &go[oy * ow..(oy + 1) * ow];
                            let lo = pad.saturating_sub(kw);
                            let hi = (w as isize + pad as isize - kw as isize)
                                .clamp(0, ow as isize) as usize;
                            if lo >= hi {
                                continue;
                            }
                            acc += dot(&go_row[lo..hi], &in_row[lo + kw - pad..hi + kw - pad]);
                        }
                    }
                    gw_co[(ci * k + kh) * k + kw] = acc;
                }
            }
        }
    };
    if work_w >= PAR_MIN_WORK && cout > 1 {
        gw.par_chunks_mut(cin * k * k)
            .enumerate()
            .for_each(|(co, dst)| wplane(co, dst));
    } else {
        for (co, dst) in gw.chunks_mut(cin * k * k).enumerate() {
            wplane(co, dst);
        }
    }

    // d/d(input): full correlation of the output gradient with the kernel.
    let mut gx = vec![0.0; n * cin * h * w];
    let work_x = gx.len() * cout * k * k;
    let xplane = |ni: usize, ci: usize, dst: &mut [f64]| {
        for co in 0..cout {
            let go = &g[(ni * cout + co) * oh * ow..(ni * cout + co + 1) * oh * ow];
            for kh in 0..k {
                for kw in 0..k {
                    let wv = wt[((co * cin + ci) * k + kh) * k + kw];
                    if wv == 0.0 {
                        continue;
                    }
                    for iy in 0..h {
                        let oy = iy as isize + pad as isize - kh as isize;
                        if oy < 0 || oy >= oh as isize {
                            continue;
                        }
                        let go_row = &go[oy as usize * ow..(oy as usize + 1) * ow];
                        let dst_row = &mut dst[iy * w..(iy + 1) * w];
                        // ix + pad - kw must land in [0, ow)
                        let lo = kw.saturating_sub(pad);
                        let hi = (ow as isize + kw as isize - pad as isize).clamp(0, w as isize)
                            as usize;
                        if lo >= hi {
                            continue;
                        }
                        let src = &go_row[lo + pad - kw..hi + pad - kw];
                        for (o, gv) in dst_row[lo..hi].iter_mut().zip(src) {
                            *o += wv * gv;
                        }
                    }
                }
            }
        }
    };
    if work_x >= PAR_MIN_WORK && n * cin > 1 {
        gx.par_chunks_mut(h * w).enumerate().for_each(|(p, dst)| {
            xplane(p / cin, p % cin, dst);
        });
    } else {
        for (p, dst) in gx.chunks_mut(h * w).enumerate() {
            xplane(p / cin, p % cin, dst);
        }
    }

    (gx, gw, gb)
}

fn conv_transpose2d_forward(
    x: &[f64],
    [n, cin, h, w]: [usize; 4],
    wt: &[f64],
    cout: usize,
    bias: &[f64],
) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * cout * oh * ow];
    let work = out.len() * cin * 16;

    // Gather form of the scatter: output (oy, ox) collects input (iy, ix)
    // with oy = 2*iy - 1 + kh, ox = 2*ix - 1 + kw.
    let plane = |co: usize, ni: usize, dst: &mut [f64]| {
        dst.fill(bias[co]);
        for oy in 0..oh {
            for kh in 0..4usize {
                let t = oy as isize + 1 - kh as isize;
                if t < 0 || t % 2 != 0 {
                    continue;
                }
                let iy = (t / 2) as usize;
                if iy >= h {
                    continue;
                }
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for kw in 0..4usize {
                        let u = ox as isize + 1 - kw as isize;
                        if u < 0 || u % 2 != 0 {
                            continue;
                        }
                        let ix = (u / 2) as usize;
                        if ix >= w {
                            continue;
                        }
                        for ci in 0..cin {
                            acc += x[((ni * cin + ci) * h + iy) * w + ix]
                                * wt[((ci * cout + co) * 4 + kh) * 4 + kw];
                        }
                    }
                    dst[oy * ow + ox] += acc;
                }
            }
        }
    };

    if work >= PAR_MIN_WORK && n * cout > 1 {
        out.par_chunks_mut(oh * ow).enumerate().for_each(|(p, dst)| {
            plane(p % cout, p / cout, dst);
        });
    } else {
        for (p, dst) in out.chunks_mut(oh * ow).enumerate() {
            plane(p % cout, p / cout, dst);
        }
    }
    out
}

fn conv_transpose2d_backward(
    g: &[f64],
    x: &[f64],
    [n, cin, h, w]: [usize; 4],
    wt: &[f64],
    cout: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = (2 * h, 2 * w);

    let mut gb = vec![0.0; cout];
    for ni in 0..n {
        for co in 0..cout {
            let go = &g[(ni * cout + co) * oh * ow..(ni * cout + co + 1) * oh * ow];
            gb[co] += go.iter().sum::<f64>();
        }
    }

    let mut gw = vec![0.0; cin * cout * 16];
    for ci in 0..cin {
        for co in 0..cout {
            for kh in 0..4usize {
                for kw in 0..4usize {
                    let mut acc = 0.0;
                    for ni in 0..n {
                        let xin = &x[(ni * cin + ci) * h * w..(ni * cin + ci + 1) * h * w];
                        let go = &g[(ni * cout + co) * oh * ow..(ni * cout + co + 1) * oh * ow];
                        for iy in 0..h {
                            let oy = 2 * iy as isize - 1 + kh as isize;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            for ix in 0..w {
                                let ox = 2 * ix as isize - 1 + kw as isize;
                                if ox < 0 || ox >= ow as isize {
                                    continue;
                                }
                                acc += xin[iy * w + ix] * go[oy as usize * ow + ox as usize];
                            }
                        }
                    }
                    gw[((ci * cout + co) * 4 + kh) * 4 + kw] = acc;
                }
            }
        }
    }

    let mut gx = vec![0.0; n * cin * h * w];
    let work = gx.len() * cout * 16;
    let plane = |ni: usize, ci: usize, dst: &mut [f64]| {
        for iy in 0..h {
            for ix in 0..w {
                let mut acc = 0.0;
                for co in 0..cout {
                    let go = &g[(ni * cout + co) * oh * ow..(ni * cout + co + 1) * oh * ow];
                    for kh in 0..4usize {
                        let oy = 2 * iy as isize - 1 + kh as isize;
                        if oy < 0 || oy >= oh as isize {
                            continue;
                        }
                        for kw in 0..4usize {
                            let ox = 2 * ix as isize - 1 + kw as isize;
                            if ox < 0 || ox >= ow as isize {
                                continue;
                            }
                            acc += wt[((ci * cout + co) * 4 + kh) * 4 + kw]
                                * go[oy as usize * ow + ox as usize];
                        }
                    }
                }
                dst[iy * w + ix] = acc;
            }
        }
    };
    if work >= PAR_MIN_WORK && n * cin > 1 {
        gx.par_chunks_mut(h * w).enumerate().for_each(|(p, dst)| {
            plane(p / cin, p % cin, dst);
        });
    } else {
        for (p, dst) in gx.chunks_mut(h * w).enumerate() {
            plane(p / cin, p % cin, dst);
        }
    }

    (gx, gw, gb)
}

fn maxpool2d_forward(x: &[f64], [n, c, h, w]: [usize; 4]) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; n * c * oh * ow];
    let mut argmax = vec![0usize; out.len()];
    for p in 0..n * c {
        let xin = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = (2 * oy + dy) * w + 2 * ox + dx;
                        if xin[idx] > best {
                            best = xin[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (p * oh + oy) * ow + ox;
                out[o] = best;
                argmax[o] = p * h * w + best_idx;
            }
        }
    }
    (out, argmax)
}

fn concat_channels_forward(
    a: &[f64],
    b: &[f64],
    n: usize,
    ca: usize,
    cb: usize,
    hw: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; n * (ca + cb) * hw];
    for i in 0..n {
        let base = i * (ca + cb) * hw;
        out[base..base + ca * hw].copy_from_slice(&a[i * ca * hw..(i + 1) * ca * hw]);
        out[base + ca * hw..base + (ca + cb) * hw]
            .copy_from_slice(&b[i * cb * hw..(i + 1) * cb * hw]);
    }
    out
}
