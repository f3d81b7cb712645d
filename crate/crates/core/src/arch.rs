//! The four tagging architectures as symbolic templates, their shape
//! inference and parameter counting, the width scaler that fits a template to
//! a parameter budget, and the runnable [`Network`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, ConvPadding, Padding, PoolMode, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, role, LayerParams, Mode};
use crate::tensor::Tensor;
use crate::SeededRng;

/// Parameter budgets of the memory-controlled comparison.
pub const BUDGETS: [u64; 5] = [100_000, 250_000, 500_000, 1_000_000, 3_000_000];
pub const N_TAGS: usize = 50;
/// Network input: one channel of 96 mel bands by 1366 frames.
pub const INPUT_SHAPE: [usize; 3] = [1, 96, 1366];
pub const DEFAULT_TOLERANCE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchId {
    K1c2,
    K2c1,
    K2c2,
    Crnn,
}

impl ArchId {
    pub const ALL: [ArchId; 4] = [ArchId::K1c2, ArchId::K2c1, ArchId::K2c2, ArchId::Crnn];

    pub fn as_str(self) -> &'static str {
        match self {
            ArchId::K1c2 => "k1c2",
            ArchId::K2c1 => "k2c1",
            ArchId::K2c2 => "k2c2",
            ArchId::Crnn => "crnn",
        }
    }
}

impl fmt::Display for ArchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArchId::ALL
            .into_iter()
            .find(|id| id.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown architecture `{s}` (expected k1c2, k2c1, k2c2 or crnn)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Conv2d,
    /// A `1 × k` kernel over a single-band map.
    Conv1dTime,
    Dense,
    Gru,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub kind: BlockKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<ConvPadding>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<(usize, usize)>,
    pub base_width: usize,
}

impl Block {
    fn conv(kind: BlockKind, kernel: (usize, usize), padding: ConvPadding, pool: (usize, usize), base_width: usize) -> Self {
        Block {
            kind,
            kernel: Some(kernel),
            padding: Some(padding),
            pool: Some(pool),
            base_width,
        }
    }

    fn plain(kind: BlockKind, base_width: usize) -> Self {
        Block {
            kind,
            kernel: None,
            padding: None,
            pool: None,
            base_width,
        }
    }

    fn is_conv(&self) -> bool {
        matches!(self.kind, BlockKind::Conv2d | BlockKind::Conv1dTime)
    }
}

/// Depth, kernel shapes, pool shapes and base widths of one architecture.
/// Scaling only ever changes widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureTemplate {
    pub id: ArchId,
    /// `(channels, freq, time)` of one example.
    pub input: [usize; 3],
    pub blocks: Vec<Block>,
    pub pool_mode: PoolMode,
    /// Dropout after every convolutional block, training only.
    pub dropout: f64,
    pub outputs: usize,
}

const TALL_FIRST: ConvPadding = ConvPadding {
    freq: Padding::Valid,
    time: Padding::Same,
};

impl ArchitectureTemplate {
    /// Full-size template on the 96 × 1366 input with the 0.1M-parameter
    /// widths as base.
    pub fn standard(id: ArchId) -> Self {
        use BlockKind::*;
        let same = ConvPadding::SAME;
        let (blocks, pool_mode, dropout) = match id {
            ArchId::K1c2 => {
                let mut b: Vec<Block> = [((1, 4), 15), ((1, 5), 15), ((1, 8), 30), ((1, 8), 30)]
                    .into_iter()
                    .map(|(pool, w)| Block::conv(Conv2d, (1, 4), same, pool, w))
                    .collect();
                b.extend([Block::plain(Dense, 30), Block::plain(Dense, 30)]);
                (b, PoolMode::Floor, 0.0)
            }
            ArchId::K2c1 => {
                let mut b = vec![Block::conv(Conv2d, (96, 4), TALL_FIRST, (1, 4), 43)];
                b.extend(
                    [((1, 4), 43), ((1, 4), 43), ((1, 4), 87), ((1, 5), 87)]
                        .into_iter()
                        .map(|(pool, w)| Block::conv(Conv1dTime, (1, 4), same, pool, w)),
                );
                b.extend([Block::plain(Dense, 87), Block::plain(Dense, 87)]);
                (b, PoolMode::Floor, 0.0)
            }
            ArchId::K2c2 => {
                let b = [((2, 4), 20), ((2, 4), 41), ((2, 4), 41), ((3, 5), 62), ((4, 4), 83)]
                    .into_iter()
                    .map(|(pool, w)| Block::conv(Conv2d, (3, 3), same, pool, w))
                    .collect();
                (b, PoolMode::Floor, 0.0)
            }
            ArchId::Crnn => {
                let mut b: Vec<Block> = [((2, 2), 30), ((3, 3), 60), ((4, 4), 60), ((4, 4), 60)]
                    .into_iter()
                    .map(|(pool, w)| Block::conv(Conv2d, (3, 3), same, pool, w))
                    .collect();
                b.extend([Block::plain(Gru, 30), Block::plain(Gru, 30)]);
                (b, PoolMode::Ceil, 0.1)
            }
        };
        ArchitectureTemplate {
            id,
            input: INPUT_SHAPE,
            blocks,
            pool_mode,
            dropout,
            outputs: N_TAGS,
        }
    }

    /// The same layer kinds on an 8 × 12 input with pools shrunk so every
    /// template still ends in its characteristic bottleneck. Used for
    /// gradient checks and fast tests.
    pub fn compact(id: ArchId) -> Self {
        let mut t = Self::standard(id);
        t.input = [1, 8, 12];
        let pools: &[(usize, usize)] = match id {
            ArchId::K1c2 => &[(1, 2), (1, 2), (1, 3), (1, 1)],
            ArchId::K2c1 => &[(1, 2), (1, 2), (1, 3), (1, 1), (1, 1)],
            ArchId::K2c2 => &[(2, 2), (2, 2), (2, 3), (1, 1), (1, 1)],
            ArchId::Crnn => &[(2, 2), (2, 2), (2, 1), (1, 1)],
        };
        for (b, &p) in t.blocks.iter_mut().filter(|b| b.is_conv()).zip(pools) {
            b.pool = Some(p);
        }
        if id == ArchId::K2c1 {
            t.blocks[0].kernel = Some((8, 4));
        }
        t
    }

    pub fn base_widths(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.base_width).collect()
    }

    /// Widths `max(1, round(m · base))`.
    pub fn widths_at(&self, multiplier: f64) -> Vec<usize> {
        self.blocks
            .iter()
            .map(|b| ((b.base_width as f64 * multiplier).round() as usize).max(1))
            .collect()
    }

    pub fn resolve(&self, widths: Vec<usize>) -> Result<NetworkSpec> {
        let shapes = infer_shapes(self, &widths)?;
        let param_count = shapes.iter().map(|l| l.params).sum();
        Ok(NetworkSpec {
            template: self.clone(),
            widths,
            shapes,
            param_count,
        })
    }

    pub fn at_multiplier(&self, multiplier: f64) -> Result<NetworkSpec> {
        self.resolve(self.widths_at(multiplier))
    }

    /// Finds the single width multiplier whose rounded widths give the
    /// parameter count nearest to `target` (ties to the smaller count) and
    /// fails when that count is further than `tolerance` (relative) away.
    pub fn scale_to_target(&self, target: u64, tolerance: f64) -> Result<NetworkSpec> {
        let count = |m: f64| -> Result<u64> { Ok(self.at_multiplier(m)?.param_count) };
        let floor = self.resolve(vec![1; self.blocks.len()])?.param_count;
        if target < floor {
            return Err(Error::Config(format!(
                "{} cannot go below {floor} parameters (all widths 1); target was {target}",
                self.id
            )));
        }
        let mut hi = 1.0;
        while count(hi)? < target {
            hi *= 2.0;
            if hi > 1e6 {
                return Err(Error::Config(format!("target {target} is out of reach for {}", self.id)));
            }
        }
        // Invariant: count(lo) < target <= count(hi), or lo = 0 when the
        // all-ones network already meets the target.
        let mut lo = 0.0;
        for _ in 0..200 {
            if hi - lo <= 1e-13 * hi {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if count(mid)? >= target {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let above = self.at_multiplier(hi)?;
        let below = self.at_multiplier(lo)?;
        let chosen = if below.param_count < target && target - below.param_count <= above.param_count - target {
            below
        } else {
            above
        };
        let err = chosen.param_count.abs_diff(target) as f64 / target as f64;
        if err > tolerance {
            return Err(Error::InfeasibleBudget {
                arch: self.id.to_string(),
                target,
                nearest: chosen.param_count,
                tolerance,
            });
        }
        Ok(chosen)
    }
}

/// Layer widths published for each budget of [`BUDGETS`], in block order.
pub fn published_widths(id: ArchId) -> [(u64, Vec<usize>); 5] {
    let rows: [[usize; 5]; 7] = match id {
        ArchId::K1c2 => [
            [15, 23, 33, 47, 81],
            [15, 23, 33, 47, 81],
            [30, 47, 66, 95, 163],
            [30, 47, 66, 95, 163],
            [30, 47, 66, 95, 163],
            [30, 47, 66, 95, 163],
            [0; 5],
        ],
        ArchId::K2c1 => [
            [43, 72, 106, 152, 265],
            [43, 72, 106, 152, 265],
            [43, 72, 106, 152, 265],
            [87, 145, 212, 304, 535],
            [87, 145, 212, 304, 535],
            [87, 145, 212, 304, 535],
            [87, 145, 212, 304, 535],
        ],
        ArchId::K2c2 => [
            [20, 33, 47, 67, 118],
            [41, 66, 95, 135, 236],
            [41, 66, 95, 135, 236],
            [62, 100, 142, 203, 355],
            [83, 133, 190, 271, 473],
            [0; 5],
            [0; 5],
        ],
        ArchId::Crnn => [
            [30, 48, 68, 96, 169],
            [60, 96, 137, 195, 339],
            [60, 96, 137, 195, 339],
            [60, 96, 137, 195, 339],
            [30, 48, 68, 96, 169],
            [30, 48, 68, 96, 169],
            [0; 5],
        ],
    };
    std::array::from_fn(|col| {
        let widths = rows.iter().map(|r| r[col]).take_while(|&w| w > 0).collect();
        (BUDGETS[col], widths)
    })
}

/// One row of the shape table: the output shape of a layer (per example) and
/// the trainable parameters it owns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub name: String,
    pub shape: Vec<usize>,
    pub params: u64,
}

impl LayerShape {
    fn new(name: impl Into<String>, shape: Vec<usize>, params: u64) -> Self {
        LayerShape {
            name: name.into(),
            shape,
            params,
        }
    }
}

/// A template with resolved widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub template: ArchitectureTemplate,
    pub widths: Vec<usize>,
    pub shapes: Vec<LayerShape>,
    pub param_count: u64,
}

impl NetworkSpec {
    pub fn id(&self) -> ArchId {
        self.template.id
    }

    /// Re-derives shapes and count, rejecting specs edited into inconsistency.
    pub fn validate(&self) -> Result<()> {
        let fresh = self.template.resolve(self.widths.clone())?;
        if fresh.shapes != self.shapes || fresh.param_count != self.param_count {
            return Err(Error::Contract(format!(
                "{} spec is inconsistent with its widths {:?}",
                self.id(),
                self.widths
            )));
        }
        Ok(())
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}  widths {:?}  params {}", self.id(), self.widths, self.param_count)?;
        for l in &self.shapes {
            let shape = l.shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
            writeln!(f, "  {:<10} {:>16} {:>10}", l.name, shape, l.params)?;
        }
        Ok(())
    }
}

fn conv_params(c_in: usize, c_out: usize, k: (usize, usize)) -> u64 {
    (c_in * c_out * k.0 * k.1 + c_out + 2 * c_out) as u64
}

fn dense_params(d_in: usize, d_out: usize, batch_norm: bool) -> u64 {
    (d_in * d_out + d_out + if batch_norm { 2 * d_out } else { 0 }) as u64
}

fn gru_params(d_in: usize, hidden: usize) -> u64 {
    (3 * (d_in * hidden + hidden * hidden + hidden)) as u64
}

/// Shape table for `template` at `widths`, input first and output last.
pub fn infer_shapes(template: &ArchitectureTemplate, widths: &[usize]) -> Result<Vec<LayerShape>> {
    if widths.len() != template.blocks.len() {
        return Err(Error::Config(format!(
            "{} has {} blocks but {} widths were given",
            template.id,
            template.blocks.len(),
            widths.len()
        )));
    }
    let shape_err = |block: String, msg: String| Error::Shape { block, msg };
    let mut rows = vec![LayerShape::new("input", template.input.to_vec(), 0)];
    let mut map = template.input;
    let mut flat: Option<usize> = None;
    let mut seq: Option<(usize, usize)> = None;
    let (mut n_conv, mut n_fc, mut n_gru) = (0, 0, 0);
    for (block, &w) in template.blocks.iter().zip(widths) {
        if w == 0 {
            return Err(Error::Config(format!("{}: widths must be positive", template.id)));
        }
        match block.kind {
            BlockKind::Conv2d | BlockKind::Conv1dTime => {
                n_conv += 1;
                let name = format!("conv{n_conv}");
                if flat.is_some() || seq.is_some() {
                    return Err(shape_err(name, "convolution after a flattened layer".into()));
                }
                let (k, pad, pool) = match (block.kernel, block.padding, block.pool) {
                    (Some(k), Some(p), Some(pool)) => (k, p, pool),
                    _ => return Err(shape_err(name, "convolution needs kernel, padding and pool".into())),
                };
                let fo = pad.freq.output_extent(map[1], k.0).filter(|&e| e > 0);
                let to = pad.time.output_extent(map[2], k.1).filter(|&e| e > 0);
                let (Some(fo), Some(to)) = (fo, to) else {
                    return Err(shape_err(
                        name,
                        format!("kernel {}x{} does not fit input {}x{}", k.0, k.1, map[1], map[2]),
                    ));
                };
                rows.push(LayerShape::new(&name, vec![w, fo, to], conv_params(map[0], w, k)));
                let (pf, pt) = (
                    template.pool_mode.output_extent(fo, pool.0),
                    template.pool_mode.output_extent(to, pool.1),
                );
                if pf == 0 || pt == 0 || pool.0 == 0 || pool.1 == 0 {
                    return Err(shape_err(
                        format!("pool{n_conv}"),
                        format!("pool {}x{} empties a {fo}x{to} map", pool.0, pool.1),
                    ));
                }
                rows.push(LayerShape::new(format!("pool{n_conv}"), vec![w, pf, pt], 0));
                map = [w, pf, pt];
            }
            BlockKind::Dense => {
                n_fc += 1;
                let d_in = match (flat, seq) {
                    (Some(d), _) => d,
                    (None, None) => {
                        let d = map.iter().product();
                        rows.push(LayerShape::new("flatten", vec![d], 0));
                        d
                    }
                    (None, Some(_)) => {
                        return Err(shape_err(format!("fc{n_fc}"), "dense layer after a recurrent layer".into()));
                    }
                };
                rows.push(LayerShape::new(format!("fc{n_fc}"), vec![w], dense_params(d_in, w, true)));
                flat = Some(w);
            }
            BlockKind::Gru => {
                n_gru += 1;
                let (steps, d_in) = match seq {
                    Some(s) => s,
                    None if flat.is_none() => {
                        let s = (map[2], map[0] * map[1]);
                        rows.push(LayerShape::new("sequence", vec![s.0, s.1], 0));
                        s
                    }
                    None => return Err(shape_err(format!("gru{n_gru}"), "recurrent layer after a dense layer".into())),
                };
                rows.push(LayerShape::new(format!("gru{n_gru}"), vec![steps, w], gru_params(d_in, w)));
                seq = Some((steps, w));
            }
        }
    }
    // Readout: the final recurrent state, the last dense layer, or the
    // flattened feature map.
    let d_in = match (flat, seq) {
        (Some(d), _) => d,
        (None, Some((_, h))) => h,
        (None, None) => {
            let d = map.iter().product();
            rows.push(LayerShape::new("flatten", vec![d], 0));
            d
        }
    };
    rows.push(LayerShape::new(
        "output",
        vec![template.outputs],
        dense_params(d_in, template.outputs, false),
    ));
    Ok(rows)
}

/// Total trainable parameters: kernels, biases, batch-norm scale and shift,
/// GRU gate matrices and biases, and the readout.
pub fn count_params(spec: &NetworkSpec) -> u64 {
    spec.shapes.iter().map(|l| l.params).sum()
}

pub fn scale_to_target(id: ArchId, target: u64, tolerance: f64) -> Result<NetworkSpec> {
    ArchitectureTemplate::standard(id).scale_to_target(target, tolerance)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedLayer {
    pub name: String,
    pub params: LayerParams,
}

/// A network spec with allocated parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub layers: Vec<NamedLayer>,
}

/// Result of one forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    /// `[batch, outputs]` sigmoid activations.
    pub output: Var,
    /// Trainable parameter vars in [`Network::trainable`] order.
    pub params: Vec<Var>,
    /// Batch statistics per layer index, training mode only.
    pub bn_stats: Vec<(usize, BatchStats)>,
}

/// Allocates parameters: He-uniform conv/dense kernels, uniform(±1/√h) GRU
/// matrices, zero biases and shifts, unit scales.
pub fn build(spec: &NetworkSpec, rng: &mut SeededRng) -> Result<Network> {
    spec.validate()?;
    let t = &spec.template;
    let mut layers = Vec::new();
    let mut channels = t.input[0];
    let mut width_in = 0;
    let (mut n_conv, mut n_fc, mut n_gru) = (0, 0, 0);
    let mut push = |name: String, params| layers.push(NamedLayer { name, params });
    for (block, &w) in t.blocks.iter().zip(&spec.widths) {
        match block.kind {
            BlockKind::Conv2d | BlockKind::Conv1dTime => {
                n_conv += 1;
                let k = block.kernel.expect("validated");
                push(format!("conv{n_conv}"), LayerParams::conv(w, channels, k, true, rng));
                channels = w;
            }
            BlockKind::Dense => {
                n_fc += 1;
                let d_in = input_width(spec, &format!("fc{n_fc}"));
                push(format!("fc{n_fc}"), LayerParams::dense(w, d_in, true, rng));
                width_in = w;
            }
            BlockKind::Gru => {
                n_gru += 1;
                let d_in = input_width(spec, &format!("gru{n_gru}"));
                push(format!("gru{n_gru}"), LayerParams::gru(d_in, w, rng));
                width_in = w;
            }
        }
    }
    let d_in = if width_in > 0 { width_in } else { input_width(spec, "output") };
    push("output".into(), LayerParams::dense(t.outputs, d_in, false, rng));
    Ok(Network {
        spec: spec.clone(),
        layers,
    })
}

/// Feature width entering the named layer, read from the shape table.
fn input_width(spec: &NetworkSpec, name: &str) -> usize {
    let idx = spec.shapes.iter().position(|l| l.name == name).expect("layer in shape table");
    let prev = &spec.shapes[idx - 1].shape;
    match prev.len() {
        1 => prev[0],
        2 => prev[1],
        _ => prev.iter().product(),
    }
}

impl Network {
    /// Trainable tensors in a fixed order: layer order, then role name.
    pub fn trainable(&self) -> impl Iterator<Item = (&str, &str, &Tensor)> {
        self.layers
            .iter()
            .flat_map(|l| l.params.params.iter().map(move |(r, t)| (l.name.as_str(), r.as_str(), t)))
    }

    pub fn trainable_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params.params.values_mut())
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable().map(|(_, _, t)| t.numel()).sum()
    }

    /// Runs the network on `x: [batch, channels, freq, time]`. Parameters are
    /// bound as gradient-carrying leaves when `trainable`.
    pub fn forward(&self, tape: &mut Tape, x: Var, mode: Mode, trainable: bool, rng: &mut SeededRng) -> Result<ForwardPass> {
        let t = &self.spec.template;
        let batch = tape.shape(x)[0];
        let expect: Vec<usize> = std::iter::once(batch).chain(t.input).collect();
        if tape.shape(x) != expect.as_slice() {
            return Err(Error::Dimension {
                op: "network input",
                lhs: tape.shape(x).to_vec(),
                rhs: expect,
            });
        }
        let mut params = Vec::new();
        let mut bn_stats = Vec::new();
        let mut h = x;
        let mut sequence: Option<Vec<Var>> = None;
        for (idx, (layer, block)) in self.layers.iter().zip(&t.blocks).enumerate() {
            let bound = layer.params.bind(tape, trainable);
            params.extend(bound.vars());
            match block.kind {
                BlockKind::Conv2d | BlockKind::Conv1dTime => {
                    let pad = block.padding.expect("validated");
                    let c = tape.conv2d(h, bound.var(role::KERNEL)?, bound.var(role::BIAS)?, pad)?;
                    let (n, stats) = nn::batchnorm(tape, c, &layer.params, &bound, mode)?;
                    bn_stats.extend(stats.map(|s| (idx, s)));
                    let a = tape.elu(n);
                    tape.release(n);
                    let p = tape.maxpool2d(a, block.pool.expect("validated"), t.pool_mode)?;
                    let d = nn::dropout(tape, p, t.dropout, mode, rng)?;
                    if d != p {
                        tape.release(p);
                    }
                    h = d;
                }
                BlockKind::Dense => {
                    if tape.shape(h).len() > 2 {
                        let flat = tape.shape(h)[1..].iter().product::<usize>();
                        h = tape.reshape(h, [batch, flat])?;
                    }
                    let z = tape.linear(h, bound.var(role::KERNEL)?, Some(bound.var(role::BIAS)?))?;
                    let (n, stats) = nn::batchnorm(tape, z, &layer.params, &bound, mode)?;
                    bn_stats.extend(stats.map(|s| (idx, s)));
                    h = tape.elu(n);
                    tape.release(n);
                }
                BlockKind::Gru => {
                    let xs = match sequence.take() {
                        Some(xs) => xs,
                        None => {
                            let steps = tape.shape(h)[3];
                            (0..steps).map(|s| tape.time_step(h, s)).collect::<Result<_>>()?
                        }
                    };
                    let hidden = tape.shape(bound.var("u_z")?)[0];
                    let h0 = tape.constant(Tensor::zeros([batch, hidden]));
                    let (outs, last) = nn::gru_layer(tape, &xs, &bound, h0)?;
                    sequence = Some(outs);
                    h = last;
                }
            }
        }
        let readout = self.layers.last().expect("output layer");
        let bound = readout.params.bind(tape, trainable);
        params.extend(bound.vars());
        if tape.shape(h).len() > 2 {
            let flat = tape.shape(h)[1..].iter().product::<usize>();
            h = tape.reshape(h, [batch, flat])?;
        }
        let z = tape.linear(h, bound.var(role::KERNEL)?, Some(bound.var(role::BIAS)?))?;
        let output = tape.sigmoid(z);
        Ok(ForwardPass {
            output,
            params,
            bn_stats,
        })
    }

    pub fn apply_bn_stats(&mut self, stats: &[(usize, BatchStats)]) -> Result<()> {
        for (idx, s) in stats {
            self.layers[*idx].params.update_running_stats(s)?;
        }
        Ok(())
    }

    /// Inference-mode predictions, one row of tag probabilities per input.
    pub fn predict(&self, inputs: &[&Tensor], batch_size: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(inputs.len());
        // Inference draws nothing from the generator.
        let mut rng = <SeededRng as rand::SeedableRng>::seed_from_u64(0);
        for chunk in inputs.chunks(batch_size.max(1)) {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::stack(chunk)?);
            let fwd = self.forward(&mut tape, x, Mode::Infer, false, &mut rng)?;
            out.extend(tape.data(fwd.output).chunks(self.spec.template.outputs).map(<[f64]>::to_vec));
        }
        Ok(out)
    }
}
