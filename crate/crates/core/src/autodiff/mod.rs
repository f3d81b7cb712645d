//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and the rule
//! needed to push gradients back to its inputs. [`Tape::backward`] replays the
//! rules in reverse and adds the resulting gradients into the `grad` slot of
//! every leaf that requires one. Intermediate gradients are transient.

pub(crate) mod kernels;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernels::ConvGeom;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding that preserves the extent (extra pad goes after).
    Same,
    Valid,
}

impl Padding {
    /// (before, after) padding for a kernel of extent `k`.
    pub fn amounts(self, k: usize) -> (usize, usize) {
        match self {
            Padding::Same => {
                let lo = (k - 1) / 2;
                (lo, k - 1 - lo)
            }
            Padding::Valid => (0, 0),
        }
    }

    pub fn output_extent(self, input: usize, k: usize) -> Option<usize> {
        let (lo, hi) = self.amounts(k);
        (input + lo + hi).checked_sub(k).map(|e| e + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvPadding {
    pub freq: Padding,
    pub time: Padding,
}

impl ConvPadding {
    pub const SAME: ConvPadding = ConvPadding {
        freq: Padding::Same,
        time: Padding::Same,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Floor,
    Ceil,
}

impl PoolMode {
    pub fn output_extent(self, input: usize, pool: usize) -> usize {
        match self {
            PoolMode::Floor => input / pool,
            PoolMode::Ceil => input.div_ceil(pool),
        }
    }
}

/// Per-channel statistics of one training-mode batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Sigmoid(Var),
    Tanh(Var),
    Elu(Var),
    Reshape(Var),
    TimeStep {
        x: Var,
        t: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Dropout {
        x: Var,
        keep: Vec<bool>,
        scale: f64,
    },
    Bce {
        pred: Var,
        target: Vec<f64>,
        clamp: f64,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Option<Vec<f64>>,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
    /// Value is read by some backward rule and must not be released.
    pinned: bool,
}

/// Records operations for one forward pass. Confined to a single thread.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    released: bool,
}

impl std::fmt::Debug for Tape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Dimension {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
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

    /// A trainable leaf; its gradient is kept after [`Tape::backward`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, true)
    }

    /// A leaf that never receives a gradient (inputs, targets).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    fn push_leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        let grad = t.grad.clone();
        self.nodes.push(Node {
            shape,
            value: Some(t.into_data()),
            grad,
            op: Op::Leaf,
            requires_grad,
            pinned: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let pinned = matches!(op, Op::Sigmoid(_) | Op::Tanh(_) | Op::Elu(_));
        self.nodes.push(Node {
            shape,
            value: Some(value),
            grad: None,
            op,
            requires_grad,
            pinned,
        });
        Var(self.nodes.len() - 1)
    }

    fn pin(&mut self, vars: &[Var]) {
        for v in vars {
            self.nodes[v.0].pinned = true;
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// The value of a node.
    ///
    /// # Panics
    /// If the value was released.
    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0]
            .value
            .as_deref()
            .unwrap_or_else(|| panic!("value of node {} was released", v.0))
    }

    pub fn value(&self, v: Var) -> Tensor {
        let mut t = Tensor::new(self.shape(v).to_vec(), self.data(v).to_vec())
            .expect("node shape is consistent");
        t.grad = self.nodes[v.0].grad.clone();
        t
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Drops the stored value of `v` when no backward rule reads it.
    /// Returns whether the value was dropped.
    pub fn release(&mut self, v: Var) -> bool {
        let node = &mut self.nodes[v.0];
        if node.pinned {
            return false;
        }
        node.value = None;
        true
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, 1.0, self.data(a), (k, 1), self.data(b), (n, 1), 0.0, &mut out, (n, 1));
        self.pin(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    /// `x · wᵀ + b` for `x: [batch, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::Dimension {
                op: "linear",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let (rows, din, dout) = (sx[0], sx[1], sw[0]);
        let mut out = vec![0.0; rows * dout];
        if let Some(b) = b {
            same_shape("linear bias", self.shape(b), &[dout])?;
            let bias = self.data(b);
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bias);
            }
        }
        kernels::gemm(rows, din, dout, 1.0, self.data(x), (din, 1), self.data(w), (1, din), 1.0, &mut out, (dout, 1));
        self.pin(&[x, w]);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(vec![rows, dout], out, Op::Linear { x, w, b }, &inputs))
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        same_shape(name, self.shape(a), self.shape(b))?;
        Ok(self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        let shape = self.shape(a).to_vec();
        self.pin(&[a, b]);
        Ok(self.push(shape, out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.data(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale(x, factor), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Vec::new(), vec![s], Op::Sum(x), &[x])
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, op, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// ELU with α = 1.
    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { v.exp_m1() }, Op::Elu(x))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data(x).len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let out = self.data(x).to_vec();
        Ok(self.push(shape, out, Op::Reshape(x), &[x]))
    }

    /// Slices time step `t` out of a `[batch, channels, freq, time]` map as a
    /// `[batch, channels·freq]` matrix.
    pub fn time_step(&mut self, x: Var, t: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || t >= s[3] {
            return Err(Error::Dimension {
                op: "time_step",
                lhs: s,
                rhs: vec![t],
            });
        }
        let (b, c, f, tt) = (s[0], s[1], s[2], s[3]);
        let src = self.data(x);
        let out = (0..b * c * f).map(|i| src[i * tt + t]).collect();
        Ok(self.push(vec![b, c * f], out, Op::TimeStep { x, t }, &[x]))
    }

    /// Stride-1 cross-correlation of `x: [batch, c_in, F, T]` with
    /// `w: [c_out, c_in, k_f, k_t]` plus `b: [c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: ConvPadding) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let mismatch = || Error::Dimension {
            op: "conv2d",
            lhs: sx.clone(),
            rhs: sw.clone(),
        };
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(mismatch());
        }
        same_shape("conv2d bias", self.shape(b), &sw[..1])?;
        let (fo, to) = match (
            pad.freq.output_extent(sx[2], sw[2]),
            pad.time.output_extent(sx[3], sw[3]),
        ) {
            (Some(fo), Some(to)) if fo > 0 && to > 0 => (fo, to),
            _ => return Err(mismatch()),
        };
        let geom = ConvGeom {
            cin: sx[1],
            f: sx[2],
            t: sx[3],
            cout: sw[0],
            kf: sw[2],
            kt: sw[3],
            f_lo: pad.freq.amounts(sw[2]).0,
            t_lo: pad.time.amounts(sw[3]).0,
            fo,
            to,
        };
        let mut out = vec![0.0; sx[0] * geom.out_len()];
        kernels::conv2d_forward(&geom, self.data(x), self.data(w), self.data(b), &mut out);
        self.pin(&[x, w]);
        Ok(self.push(
            vec![sx[0], geom.cout, fo, to],
            out,
            Op::Conv2d { x, w, b, geom },
            &[x, w, b],
        ))
    }

    /// Non-overlapping max pooling over the last two axes of a rank-4 map.
    pub fn maxpool2d(&mut self, x: Var, pool: (usize, usize), mode: PoolMode) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || pool.0 == 0 || pool.1 == 0 {
            return Err(Error::Dimension {
                op: "maxpool2d",
                lhs: s,
                rhs: vec![pool.0, pool.1],
            });
        }
        let (fo, to) = (mode.output_extent(s[2], pool.0), mode.output_extent(s[3], pool.1));
        if fo == 0 || to == 0 {
            return Err(Error::Dimension {
                op: "maxpool2d",
                lhs: s,
                rhs: vec![pool.0, pool.1],
            });
        }
        if s.iter().product::<usize>() > u32::MAX as usize {
            return Err(Error::Contract("maxpool2d input exceeds u32 indexing".into()));
        }
        let planes = s[0] * s[1];
        let mut out = vec![0.0; planes * fo * to];
        let mut argmax = vec![0u32; out.len()];
        kernels::maxpool_forward(self.data(x), planes, (s[2], s[3]), pool, (fo, to), &mut out, &mut argmax);
        Ok(self.push(vec![s[0], s[1], fo, to], out, Op::MaxPool { x, argmax }, &[x]))
    }

    fn bn_layout(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(Error::Dimension {
                op: "batchnorm",
                lhs: s.to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        same_shape("batchnorm gamma", self.shape(gamma), &s[1..2])?;
        same_shape("batchnorm beta", self.shape(beta), &s[1..2])?;
        Ok((s[0], s[1], s[2..].iter().product()))
    }

    fn bn_apply(&mut self, x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool) -> Var {
        let s = self.shape(x).to_vec();
        let (channels, spatial) = (s[1], s[2..].iter().product::<usize>());
        let (g, bt) = (self.data(gamma), self.data(beta));
        let mut out = self.data(x).to_vec();
        for (i, chunk) in out.chunks_mut(spatial).enumerate() {
            let c = i % channels;
            let (m, is, gc, bc) = (mean[c], inv_std[c], g[c], bt[c]);
            for v in chunk {
                *v = gc * (*v - m) * is + bc;
            }
        }
        self.pin(&[x, gamma]);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            mean,
            inv_std,
            batch_stats,
        };
        self.push(s, out, op, &[x, gamma, beta])
    }

    /// Batch normalization over every axis but axis 1, using the batch's
    /// own statistics.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (batch, channels, spatial) = self.bn_layout(x, gamma, beta)?;
        if batch < 2 {
            return Err(Error::Contract(
                "training-mode batch normalization needs a batch of at least 2".into(),
            ));
        }
        let (mean, var) = kernels::channel_moments(self.data(x), batch, channels, spatial);
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, mean.clone(), inv_std, true);
        Ok((out, BatchStats { mean, var }))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batchnorm_infer(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let (_, channels, _) = self.bn_layout(x, gamma, beta)?;
        if mean.len() != channels || var.len() != channels {
            return Err(Error::Dimension {
                op: "batchnorm running stats",
                lhs: vec![channels],
                rhs: vec![mean.len(), var.len()],
            });
        }
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        Ok(self.bn_apply(x, gamma, beta, mean.to_vec(), inv_std, false))
    }

    /// Inverted dropout with a precomputed keep-mask.
    pub fn dropout_mask(&mut self, x: Var, keep: Vec<bool>, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        if keep.len() != self.data(x).len() {
            return Err(Error::Dimension {
                op: "dropout",
                lhs: self.shape(x).to_vec(),
                rhs: vec![keep.len()],
            });
        }
        let scale = 1.0 / (1.0 - rate);
        let out = self
            .data(x)
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v * scale } else { 0.0 })
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Dropout { x, keep, scale }, &[x]))
    }

    /// Mean binary cross-entropy between `pred` and a constant target, with
    /// predictions clamped to `[clamp, 1 - clamp]`.
    pub fn bce(&mut self, pred: Var, target: &[f64], clamp: f64) -> Result<Var> {
        if target.len() != self.data(pred).len() {
            return Err(Error::Dimension {
                op: "bce",
                lhs: self.shape(pred).to_vec(),
                rhs: vec![target.len()],
            });
        }
        let n = target.len() as f64;
        let total: f64 = self
            .data(pred)
            .iter()
            .zip(target)
            .map(|(&p, &y)| {
                let p = p.clamp(clamp, 1.0 - clamp);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum();
        self.pin(&[pred]);
        let op = Op::Bce {
            pred,
            target: target.to_vec(),
            clamp,
        };
        Ok(self.push(Vec::new(), vec![total / n], op, &[pred]))
    }

    /// Accumulates `∂loss/∂leaf` into every trainable leaf. The tape stays
    /// intact, so calling this twice doubles every gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.run_backward(loss, false)
    }

    /// Like [`Tape::backward`] but drops intermediate values as soon as they
    /// have been used, lowering peak memory. The tape cannot be replayed.
    pub fn backward_release(&mut self, loss: Var) -> Result<()> {
        self.run_backward(loss, true)
    }

    fn run_backward(&mut self, loss: Var, release: bool) -> Result<()> {
        if self.released {
            return Err(Error::Contract("tape was already consumed by backward_release".into()));
        }
        if self.nodes[loss.0].shape.iter().product::<usize>() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g, &mut grads);
            if release {
                self.nodes[i].value = None;
            }
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let (Op::Leaf, Some(g), true) = (&node.op, g, node.requires_grad) {
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
            }
        }
        if release {
            self.released = true;
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let len = self.nodes[v.0].shape.iter().product();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        };
        let val = |v: Var| self.data(v);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                acc(*a, &mut |da| kernels::gemm(m, n, k, 1.0, g, (n, 1), val(*b), (1, n), 1.0, da, (k, 1)));
                acc(*b, &mut |db| kernels::gemm(k, m, n, 1.0, val(*a), (1, k), g, (n, 1), 1.0, db, (n, 1)));
            }
            Op::Linear { x, w, b } => {
                let (rows, din) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let dout = self.nodes[w.0].shape[0];
                acc(*x, &mut |dx| kernels::gemm(rows, dout, din, 1.0, g, (dout, 1), val(*w), (din, 1), 1.0, dx, (din, 1)));
                acc(*w, &mut |dw| kernels::gemm(dout, rows, din, 1.0, g, (1, dout), val(*x), (din, 1), 1.0, dw, (din, 1)));
                if let Some(b) = b {
                    acc(*b, &mut |db| {
                        for row in g.chunks(dout) {
                            db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                acc(*a, &mut |d| zip3(d, g, val(*b), |g, y| g * y));
                acc(*b, &mut |d| zip3(d, g, val(*a), |g, x| g * x));
            }
            Op::Scale(x, c) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * c)),
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Sigmoid(x) => {
                let y = val(Var(i));
                acc(*x, &mut |d| zip3(d, g, y, |g, y| g * y * (1.0 - y)));
            }
            Op::Tanh(x) => {
                let y = val(Var(i));
                acc(*x, &mut |d| zip3(d, g, y, |g, y| g * (1.0 - y * y)));
            }
            Op::Elu(x) => {
                let y = val(Var(i));
                acc(*x, &mut |d| zip3(d, g, y, |g, y| if y > 0.0 { g } else { g * (y + 1.0) }));
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::TimeStep { x, t } => {
                let tt = self.nodes[x.0].shape[3];
                acc(*x, &mut |d| {
                    for (j, gv) in g.iter().enumerate() {
                        d[j * tt + t] += gv;
                    }
                });
            }
            Op::Conv2d { x, w, b, geom } => {
                let mut dx = wants(x).then(|| take_or_zero(grads, &self.nodes, *x));
                let mut dw = wants(w).then(|| take_or_zero(grads, &self.nodes, *w));
                let mut db = wants(b).then(|| take_or_zero(grads, &self.nodes, *b));
                kernels::conv2d_backward(
                    geom,
                    val(*x),
                    val(*w),
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                for (v, buf) in [(x, dx), (w, dw), (b, db)] {
                    if let Some(buf) = buf {
                        grads[v.0] = Some(buf);
                    }
                }
            }
            Op::MaxPool { x, argmax } => acc(*x, &mut |d| {
                for (gv, &j) in g.iter().zip(argmax) {
                    d[j as usize] += gv;
                }
            }),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let s = &self.nodes[x.0].shape;
                let (batch, channels) = (s[0], s[1]);
                let spatial: usize = s[2..].iter().product();
                let xv = val(*x);
                let gam = val(*gamma);
                // Per-channel Σdy and Σdy·x̂.
                let mut sum_dy = vec![0.0; channels];
                let mut sum_dy_xhat = vec![0.0; channels];
                for (blk, (gc, xc)) in g.chunks(spatial).zip(xv.chunks(spatial)).enumerate() {
                    let c = blk % channels;
                    for (&gv, &xv) in gc.iter().zip(xc) {
                        sum_dy[c] += gv;
                        sum_dy_xhat[c] += gv * (xv - mean[c]) * inv_std[c];
                    }
                }
                acc(*gamma, &mut |d| add_into(d, &sum_dy_xhat));
                acc(*beta, &mut |d| add_into(d, &sum_dy));
                let count = (batch * spatial) as f64;
                acc(*x, &mut |d| {
                    for (blk, ((dc, gc), xc)) in d
                        .chunks_mut(spatial)
                        .zip(g.chunks(spatial))
                        .zip(xv.chunks(spatial))
                        .enumerate()
                    {
                        let c = blk % channels;
                        let k = gam[c] * inv_std[c];
                        if *batch_stats {
                            let (mdy, mdyx) = (sum_dy[c] / count, sum_dy_xhat[c] / count);
                            for ((d, &gv), &xv) in dc.iter_mut().zip(gc).zip(xc) {
                                let xhat = (xv - mean[c]) * inv_std[c];
                                *d += k * (gv - mdy - xhat * mdyx);
                            }
                        } else {
                            dc.iter_mut().zip(gc).for_each(|(d, gv)| *d += k * gv);
                        }
                    }
                });
            }
            Op::Dropout { x, keep, scale } => acc(*x, &mut |d| {
                for ((d, gv), &k) in d.iter_mut().zip(g).zip(keep) {
                    if k {
                        *d += gv * scale;
                    }
                }
            }),
            Op::Bce { pred, target, clamp } => {
                let n = target.len() as f64;
                let p = val(*pred);
                acc(*pred, &mut |d| {
                    for ((d, &p), &y) in d.iter_mut().zip(p).zip(target) {
                        if p > *clamp && p < 1.0 - clamp {
                            *d += g[0] * (p - y) / (p * (1.0 - p)) / n;
                        }
                    }
                });
            }
        }
    }
}

fn take_or_zero(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Vec<f64> {
    grads[v.0]
        .take()
        .unwrap_or_else(|| vec![0.0; nodes[v.0].shape.iter().product()])
}

fn add_into(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
}

fn zip3(d: &mut [f64], g: &[f64], other: &[f64], f: impl Fn(f64, f64) -> f64) {
    for ((d, &g), &o) in d.iter_mut().zip(g).zip(other) {
        *d += f(g, o);
    }
}

/// Logistic function, stable for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
