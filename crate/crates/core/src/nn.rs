//! Layer building blocks: parameter containers with their initializers and
//! the layer-level forward functions (batch normalization with running
//! statistics, dropout, GRU) composed from tape operations.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::autodiff::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::SeededRng;

pub use crate::autodiff::{ConvPadding, Padding, PoolMode};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Parameter role names used as keys in [`LayerParams`] and checkpoints.
pub mod role {
    pub const KERNEL: &str = "kernel";
    pub const BIAS: &str = "bias";
    pub const BN_GAMMA: &str = "bn_gamma";
    pub const BN_BETA: &str = "bn_beta";
    pub const BN_MEAN: &str = "bn_running_mean";
    pub const BN_VAR: &str = "bn_running_var";
    /// GRU input weights, recurrent weights and biases for the update (z),
    /// reset (r) and candidate (h) paths.
    pub const GRU: [&str; 9] = ["w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h"];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Trainable tensors of one layer plus its non-trainable state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerParams {
    pub params: BTreeMap<String, Tensor>,
    pub state: BTreeMap<String, Tensor>,
}

fn uniform_tensor(shape: &[usize], limit: f64, rng: &mut SeededRng) -> Tensor {
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
        .expect("length matches shape")
}

fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut SeededRng) -> Tensor {
    uniform_tensor(shape, (6.0 / fan_in as f64).sqrt(), rng)
}

impl LayerParams {
    /// Convolution kernel `(c_out, c_in, k_f, k_t)` with bias and optional
    /// batch normalization.
    pub fn conv(c_out: usize, c_in: usize, kernel: (usize, usize), batch_norm: bool, rng: &mut SeededRng) -> Self {
        let fan_in = c_in * kernel.0 * kernel.1;
        let mut p = LayerParams::default();
        p.params.insert(role::KERNEL.into(), he_uniform(&[c_out, c_in, kernel.0, kernel.1], fan_in, rng));
        p.params.insert(role::BIAS.into(), Tensor::zeros([c_out]));
        if batch_norm {
            p.add_batch_norm(c_out);
        }
        p
    }

    /// Fully-connected weights `(d_out, d_in)` with bias.
    pub fn dense(d_out: usize, d_in: usize, batch_norm: bool, rng: &mut SeededRng) -> Self {
        let mut p = LayerParams::default();
        p.params.insert(role::KERNEL.into(), he_uniform(&[d_out, d_in], d_in, rng));
        p.params.insert(role::BIAS.into(), Tensor::zeros([d_out]));
        if batch_norm {
            p.add_batch_norm(d_out);
        }
        p
    }

    pub fn gru(d_in: usize, hidden: usize, rng: &mut SeededRng) -> Self {
        let limit = 1.0 / (hidden as f64).sqrt();
        let mut p = LayerParams::default();
        for name in role::GRU {
            let t = match name.as_bytes()[0] {
                b'w' => uniform_tensor(&[hidden, d_in], limit, rng),
                b'u' => uniform_tensor(&[hidden, hidden], limit, rng),
                _ => Tensor::zeros([hidden]),
            };
            p.params.insert(name.into(), t);
        }
        p
    }

    fn add_batch_norm(&mut self, channels: usize) {
        self.params.insert(role::BN_GAMMA.into(), Tensor::full([channels], 1.0));
        self.params.insert(role::BN_BETA.into(), Tensor::zeros([channels]));
        self.state.insert(role::BN_MEAN.into(), Tensor::zeros([channels]));
        self.state.insert(role::BN_VAR.into(), Tensor::full([channels], 1.0));
    }

    pub fn has_batch_norm(&self) -> bool {
        self.params.contains_key(role::BN_GAMMA)
    }

    pub fn trainable_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn get(&self, role: &str) -> Result<&Tensor> {
        self.params
            .get(role)
            .or_else(|| self.state.get(role))
            .ok_or_else(|| Error::Contract(format!("layer has no `{role}` tensor")))
    }

    /// Registers the trainable tensors on `tape`: as gradient-carrying leaves
    /// when `trainable`, as constants otherwise.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundLayer {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| {
                let v = if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
                (k.clone(), v)
            })
            .collect();
        BoundLayer { vars }
    }

    /// Folds one batch's statistics into the running estimates:
    /// `running = momentum·running + (1 − momentum)·batch`.
    pub fn update_running_stats(&mut self, stats: &BatchStats) -> Result<()> {
        for (name, batch) in [(role::BN_MEAN, &stats.mean), (role::BN_VAR, &stats.var)] {
            let t = self
                .state
                .get_mut(name)
                .ok_or_else(|| Error::Contract("layer has no batch normalization".into()))?;
            if t.numel() != batch.len() {
                return Err(Error::Dimension {
                    op: "running stats",
                    lhs: t.shape().to_vec(),
                    rhs: vec![batch.len()],
                });
            }
            for (r, b) in t.data_mut().iter_mut().zip(batch) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
        }
        Ok(())
    }
}

/// Tape handles of one layer's trainable parameters, keyed by role.
#[derive(Debug, Clone)]
pub struct BoundLayer {
    vars: BTreeMap<String, Var>,
}

impl BoundLayer {
    pub fn var(&self, role: &str) -> Result<Var> {
        self.vars
            .get(role)
            .copied()
            .ok_or_else(|| Error::Contract(format!("layer has no `{role}` parameter")))
    }

    /// Vars in role order (the order of [`LayerParams::params`]).
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.vars.values().copied()
    }
}

/// Batch normalization over every axis but the channel axis (axis 1).
/// In training mode the batch statistics are returned for the caller to fold
/// into the running estimates; inference uses the running estimates.
pub fn batchnorm(
    tape: &mut Tape,
    x: Var,
    layer: &LayerParams,
    bound: &BoundLayer,
    mode: Mode,
) -> Result<(Var, Option<BatchStats>)> {
    let (gamma, beta) = (bound.var(role::BN_GAMMA)?, bound.var(role::BN_BETA)?);
    match mode {
        Mode::Train => {
            let (y, stats) = tape.batchnorm_train(x, gamma, beta, BN_EPS)?;
            Ok((y, Some(stats)))
        }
        Mode::Infer => {
            let (mean, var) = (layer.get(role::BN_MEAN)?, layer.get(role::BN_VAR)?);
            let y = tape.batchnorm_infer(x, gamma, beta, mean.data(), var.data(), BN_EPS)?;
            Ok((y, None))
        }
    }
}

/// Inverted dropout: in training each element is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 − rate)`. Identity otherwise.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, mode: Mode, rng: &mut SeededRng) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Contract(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok(x);
    }
    let keep = (0..tape.data(x).len()).map(|_| rng.random::<f64>() >= rate).collect();
    tape.dropout_mask(x, keep, rate)
}

/// Runs a GRU over `xs` (each `[batch, d_in]`) from `h0` (`[batch, hidden]`).
/// Returns every hidden state and the final one.
///
/// ```text
/// z = σ(W_z x + U_z h + b_z)
/// r = σ(W_r x + U_r h + b_r)
/// h̃ = tanh(W_h x + U_h (r ⊙ h) + b_h)
/// h' = (1 − z) ⊙ h + z ⊙ h̃
/// ```
pub fn gru_layer(tape: &mut Tape, xs: &[Var], p: &BoundLayer, h0: Var) -> Result<(Vec<Var>, Var)> {
    if xs.is_empty() {
        return Err(Error::Contract("GRU needs a non-empty sequence".into()));
    }
    let [w_z, u_z, b_z, w_r, u_r, b_r, w_h, u_h, b_h] = role::GRU.map(|r| p.var(r));
    let (w_z, u_z, b_z, w_r, u_r, b_r, w_h, u_h, b_h) = (w_z?, u_z?, b_z?, w_r?, u_r?, b_r?, w_h?, u_h?, b_h?);
    let d_in = tape.shape(w_z)[1];
    let mut h = h0;
    let mut outputs = Vec::with_capacity(xs.len());
    for &x in xs {
        if tape.shape(x).get(1) != Some(&d_in) {
            return Err(Error::Dimension {
                op: "gru input",
                lhs: tape.shape(x).to_vec(),
                rhs: vec![d_in],
            });
        }
        let gate = |tape: &mut Tape, w: Var, u: Var, b: Var, state: Var| -> Result<Var> {
            let a = tape.linear(x, w, Some(b))?;
            let c = tape.linear(state, u, None)?;
            tape.add(a, c)
        };
        let z = gate(tape, w_z, u_z, b_z, h)?;
        let z = tape.sigmoid(z);
        let r = gate(tape, w_r, u_r, b_r, h)?;
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, h)?;
        let cand = gate(tape, w_h, u_h, b_h, rh)?;
        let cand = tape.tanh(cand);
        let delta = tape.sub(cand, h)?;
        let step = tape.mul(z, delta)?;
        h = tape.add(h, step)?;
        outputs.push(h);
    }
    Ok((outputs, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::sigmoid;
    use crate::test_support::{max_grad_error, random_tensor};
    use rand::SeedableRng;

    fn rng(seed: u64) -> SeededRng {
        SeededRng::seed_from_u64(seed)
    }

    /// Direct six-nested-loop cross-correlation with zero "same" padding.
    fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64]) -> Vec<f64> {
        let (cin, f, t) = (x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, kf, kt) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let (pf, pt) = ((kf - 1) / 2, (kt - 1) / 2);
        let mut out = vec![0.0; cout * f * t];
        for co in 0..cout {
            for fy in 0..f {
                for tx in 0..t {
                    let mut s = b[co];
                    for ci in 0..cin {
                        for i in 0..kf {
                            for j in 0..kt {
                                let (yy, xx) = (fy as isize + i as isize - pf as isize, tx as isize + j as isize - pt as isize);
                                if yy >= 0 && xx >= 0 && (yy as usize) < f && (xx as usize) < t {
                                    s += w.data()[((co * cin + ci) * kf + i) * kt + j] * x.data()[(ci * f + yy as usize) * t + xx as usize];
                                }
                            }
                        }
                    }
                    out[(co * f + fy) * t + tx] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_naive_loops() {
        let x = random_tensor(&[1, 2, 5, 7], 1);
        let w = random_tensor(&[3, 2, 3, 3], 2);
        let b = random_tensor(&[3], 3);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let y = tape.conv2d(xv, wv, bv, ConvPadding::SAME).unwrap();
        let expect = naive_conv(&x, &w, b.data());
        // Summation order differs from the GEMM path only by reassociation.
        for (a, e) in tape.data(y).iter().zip(&expect) {
            assert!((a - e).abs() < 1e-13, "{a} vs {e}");
        }
    }

    #[test]
    fn conv2d_unit_kernel_is_identity() {
        let x = random_tensor(&[2, 1, 4, 6], 4);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let w = tape.constant(Tensor::full([1, 1, 1, 1], 1.0));
        let b = tape.constant(Tensor::zeros([1]));
        let y = tape.conv2d(xv, w, b, ConvPadding::SAME).unwrap();
        assert_eq!(tape.data(y), x.data());
    }

    #[test]
    fn tall_first_kernel_collapses_frequency() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 1, 96, 1366]));
        let w = tape.constant(Tensor::zeros([3, 1, 96, 4]));
        let b = tape.constant(Tensor::zeros([3]));
        let pad = ConvPadding { freq: Padding::Valid, time: Padding::Same };
        let y = tape.conv2d(x, w, b, pad).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 1, 1366]);
    }

    #[test]
    fn conv2d_kernel_larger_than_input_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 1, 3, 8]));
        let w = tape.constant(Tensor::zeros([1, 1, 4, 1]));
        let b = tape.constant(Tensor::zeros([1]));
        let pad = ConvPadding { freq: Padding::Valid, time: Padding::Same };
        assert!(matches!(tape.conv2d(x, w, b, pad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn maxpool_matches_brute_force() {
        let x = random_tensor(&[1, 1, 6, 7], 5);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = tape.maxpool2d(xv, (2, 3), PoolMode::Floor).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 3, 2]);
        for oy in 0..3 {
            for ox in 0..2 {
                let mut m = f64::NEG_INFINITY;
                for fy in 2 * oy..2 * oy + 2 {
                    for tx in 3 * ox..3 * ox + 3 {
                        m = m.max(x.data()[fy * 7 + tx]);
                    }
                }
                assert_eq!(tape.data(y)[oy * 2 + ox], m);
            }
        }
        let id = tape.maxpool2d(xv, (1, 1), PoolMode::Ceil).unwrap();
        assert_eq!(tape.data(id), x.data());
    }

    #[test]
    fn maxpool_ties_route_to_first_occurrence() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new([1, 1, 1, 4], vec![2.0, 2.0, 1.0, 1.0]).unwrap());
        let y = tape.maxpool2d(x, (1, 2), PoolMode::Floor).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn pooling_schedules_reach_published_bottlenecks() {
        let run = |pools: &[(usize, usize)], mode: PoolMode| {
            pools.iter().fold((96usize, 1366usize), |(f, t), &(pf, pt)| {
                (mode.output_extent(f, pf), mode.output_extent(t, pt))
            })
        };
        assert_eq!(run(&[(2, 2), (3, 3), (4, 4), (4, 4)], PoolMode::Ceil), (1, 15));
        assert_eq!(run(&[(2, 2), (3, 3), (4, 4), (4, 4)], PoolMode::Floor), (1, 14));
        assert_eq!(run(&[(2, 4), (2, 4), (2, 4), (3, 5), (4, 4)], PoolMode::Floor), (1, 1));
    }

    #[test]
    fn dense_hand_checked() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([1, 2], vec![1.0, 1.0]).unwrap());
        let w = tape.constant(Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::zeros([2]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.data(y), &[3.0, 7.0]);

        let w = tape.constant(Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let x = tape.constant(Tensor::new([1, 2], vec![0.3, -4.0]).unwrap());
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.data(y), &[0.3, -4.0]);
    }

    #[test]
    fn batchnorm_of_constant_channel_yields_beta() {
        let mut layer = LayerParams::conv(2, 1, (1, 1), true, &mut rng(0));
        layer.params.insert(role::BN_BETA.into(), Tensor::new([2], vec![0.25, -1.0]).unwrap());
        let mut tape = Tape::new();
        let bound = layer.bind(&mut tape, true);
        let x = tape.constant(Tensor::full([4, 2, 3, 3], 7.0));
        let (y, _) = batchnorm(&mut tape, x, &layer, &bound, Mode::Train).unwrap();
        for (i, v) in tape.data(y).iter().enumerate() {
            assert_eq!(*v, if (i / 9) % 2 == 0 { 0.25 } else { -1.0 });
        }
    }

    #[test]
    fn batchnorm_standardizes_each_channel() {
        let layer = LayerParams::dense(3, 1, true, &mut rng(0));
        let mut tape = Tape::new();
        let bound = layer.bind(&mut tape, true);
        let mut x = random_tensor(&[512, 3], 6);
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            // Variance well above ε so that var/(var + ε) rounds to 1 at 1e-6.
            *v = *v * 10.0 * (1.0 + (i % 3) as f64) + 5.0;
        }
        let xv = tape.constant(x);
        let (y, _) = batchnorm(&mut tape, xv, &layer, &bound, Mode::Train).unwrap();
        for c in 0..3 {
            let col: Vec<f64> = tape.data(y).iter().skip(c).step_by(3).copied().collect();
            let mean = col.iter().sum::<f64>() / 512.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 512.0;
            assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6, "{mean} {var}");
        }
    }

    #[test]
    fn running_statistics_converge_to_batch_statistics() {
        use rand_distr::Normal;
        let dist = Normal::new(3.0, 2.0).unwrap();
        let mut r = rng(7);
        let mut draw = |n: usize| Tensor::new([n, 2, 4, 4], (0..n * 32).map(|_| dist.sample(&mut r)).collect()).unwrap();
        let train_on = |layer: &mut LayerParams, x: &Tensor| {
            let mut tape = Tape::new();
            let bound = layer.bind(&mut tape, true);
            let xv = tape.constant(x.clone());
            let (_, stats) = batchnorm(&mut tape, xv, layer, &bound, Mode::Train).unwrap();
            layer.update_running_stats(&stats.unwrap()).unwrap();
        };

        // Identical stream: inference reproduces the training normalization.
        let mut layer = LayerParams::conv(2, 1, (1, 1), true, &mut rng(0));
        let fixed = draw(64);
        for _ in 0..100 {
            train_on(&mut layer, &fixed);
        }
        let mut tape = Tape::new();
        let bound = layer.bind(&mut tape, false);
        let x = tape.constant(fixed);
        let (train_y, _) = batchnorm(&mut tape, x, &layer, &bound, Mode::Train).unwrap();
        let (infer_y, _) = batchnorm(&mut tape, x, &layer, &bound, Mode::Infer).unwrap();
        let worst = tape
            .data(train_y)
            .iter()
            .zip(tape.data(infer_y))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-2, "max deviation {worst}");

        // Fresh batches from the same distribution: running estimates settle
        // near the population moments.
        let mut layer = LayerParams::conv(2, 1, (1, 1), true, &mut rng(0));
        for _ in 0..100 {
            let x = draw(64);
            train_on(&mut layer, &x);
        }
        for &m in layer.get(role::BN_MEAN).unwrap().data() {
            assert!((m - 3.0).abs() < 0.1, "running mean {m}");
        }
        for &v in layer.get(role::BN_VAR).unwrap().data() {
            assert!(v > 0.0 && (v - 4.0).abs() < 0.3, "running var {v}");
        }
    }

    #[test]
    fn inference_layers_are_pure() {
        let layer = LayerParams::dense(3, 1, true, &mut rng(0));
        let x = random_tensor(&[4, 3], 8);
        let run = || {
            let mut tape = Tape::new();
            let bound = layer.bind(&mut tape, false);
            let xv = tape.constant(x.clone());
            let (y, _) = batchnorm(&mut tape, xv, &layer, &bound, Mode::Infer).unwrap();
            let y = dropout(&mut tape, y, 0.1, Mode::Infer, &mut rng(1)).unwrap();
            tape.data(y).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn elu_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([4], vec![0.0, -1.0, 2.5, -800.0]).unwrap());
        let y = tape.elu(x);
        let y = tape.data(y);
        assert_eq!(y[0], 0.0);
        assert!((y[1] - (-1f64).exp_m1()).abs() < 1e-15 && (y[1] + 0.6321).abs() < 1e-4);
        assert_eq!(y[2], 2.5);
        assert_eq!(y[3], -1.0);
    }

    #[test]
    fn sigmoid_gradient_matches_closed_form() {
        let x = random_tensor(&[6], 9);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let y = tape.sigmoid(v);
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        for (g, x) in tape.grad(v).unwrap().iter().zip(x.data()) {
            let s = sigmoid(*x);
            assert!((g - s * (1.0 - s)).abs() < 1e-15);
        }
    }

    #[test]
    fn dropout_contract() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([1_000_000], 1.0));
        for mode in [Mode::Train, Mode::Infer] {
            assert_eq!(dropout(&mut tape, x, 0.0, mode, &mut rng(0)).unwrap(), x);
        }
        assert_eq!(dropout(&mut tape, x, 0.1, Mode::Infer, &mut rng(0)).unwrap(), x);
        assert!(dropout(&mut tape, x, 1.0, Mode::Train, &mut rng(0)).is_err());

        let y = dropout(&mut tape, x, 0.1, Mode::Train, &mut rng(42)).unwrap();
        let data = tape.data(y);
        let mean = data.iter().sum::<f64>() / data.len() as f64;
        let zeros = data.iter().filter(|&&v| v == 0.0).count() as f64 / data.len() as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        assert!((zeros - 0.1).abs() < 0.005, "zero fraction {zeros}");
    }

    fn gru_params(d_in: usize, hidden: usize, fill: impl Fn(&str) -> Vec<f64>) -> LayerParams {
        let mut p = LayerParams::gru(d_in, hidden, &mut rng(0));
        for name in role::GRU {
            let shape = p.params[name].shape().to_vec();
            p.params.insert(name.into(), Tensor::new(shape, fill(name)).unwrap());
        }
        p
    }

    #[test]
    fn gru_zero_weights_stay_at_zero() {
        let p = gru_params(3, 2, |n| vec![0.0; if n.starts_with('w') { 6 } else if n.starts_with('u') { 4 } else { 2 }]);
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, true);
        let xs: Vec<Var> = (0..4).map(|i| tape.constant(random_tensor(&[2, 3], i))).collect();
        let h0 = tape.constant(Tensor::zeros([2, 2]));
        let (outs, last) = gru_layer(&mut tape, &xs, &bound, h0).unwrap();
        assert_eq!(outs.len(), 4);
        assert_eq!(*outs.last().unwrap(), last);
        for o in outs {
            assert!(tape.data(o).iter().all(|&v| v == 0.0));
        }
        assert!(gru_layer(&mut tape, &[], &bound, h0).is_err());
    }

    #[test]
    fn gru_single_step_closed_form() {
        let vals = |n: &str| match n {
            "w_z" => 0.5,
            "u_z" => -0.3,
            "b_z" => 0.1,
            "w_r" => -0.7,
            "u_r" => 0.9,
            "b_r" => 0.2,
            "w_h" => 1.3,
            "u_h" => 0.4,
            "b_h" => -0.05,
            _ => unreachable!(),
        };
        let p = gru_params(1, 1, |n| vec![vals(n)]);
        let (x, h0) = (0.8, -0.6);
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, true);
        let xv = tape.constant(Tensor::new([1, 1], vec![x]).unwrap());
        let hv = tape.constant(Tensor::new([1, 1], vec![h0]).unwrap());
        let (_, h1) = gru_layer(&mut tape, &[xv], &bound, hv).unwrap();

        let z = sigmoid(vals("w_z") * x + vals("u_z") * h0 + vals("b_z"));
        let r = sigmoid(vals("w_r") * x + vals("u_r") * h0 + vals("b_r"));
        let cand = (vals("w_h") * x + vals("u_h") * (r * h0) + vals("b_h")).tanh();
        let expect = (1.0 - z) * h0 + z * cand;
        assert!((tape.data(h1)[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn gru_backprop_through_time() {
        let p = LayerParams::gru(2, 2, &mut rng(11));
        let names: Vec<String> = p.params.keys().cloned().collect();
        let mut inputs: Vec<Tensor> = p.params.values().cloned().collect();
        for i in 0..3 {
            inputs.push(random_tensor(&[2, 2], 20 + i));
        }
        inputs.push(random_tensor(&[2, 2], 30));
        let err = max_grad_error(&inputs, 1e-5, |tape, v| {
            let mut layer = LayerParams::default();
            let mut vars = BTreeMap::new();
            for (n, var) in names.iter().zip(v) {
                vars.insert(n.clone(), *var);
                layer.params.insert(n.clone(), Tensor::zeros([1]));
            }
            let bound = BoundLayer { vars };
            let (outs, last) = gru_layer(tape, &v[9..12], &bound, v[12]).unwrap();
            let mix = tape.add(outs[0], last).unwrap();
            let sq = tape.mul(mix, mix).unwrap();
            tape.sum(sq)
        });
        assert!(err < 1e-4, "rel err {err}");
    }
}
