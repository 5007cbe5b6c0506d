//! Integer inference for fully quantized models.
//!
//! Weights and activations are codebook indices. Each conv/dense output is a sum
//! of product-table entries `W[i]·A[j]` in an `i64` accumulator whose scale is
//! `2^-2s` (`s` = fraction bits). Activations are re-quantized at the next layer
//! input by comparing the accumulator against thresholds on the `2^-(s+1)` grid.

use crate::error::{Error, Result};
use crate::nn::{Layer, Pool, Tensor};
use crate::par;
use crate::qmodel::{LayerMode, QuantModel};
use crate::quant::QuantizerSpec;

pub const DEFAULT_FRAC_BITS: u32 = 16;
const CHUNK: usize = 8;

/// Levels as integers at scale `2^-frac_bits`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixedPointCodebook {
    pub levels: Vec<i64>,
    pub frac_bits: u32,
}

impl FixedPointCodebook {
    pub fn real(&self, i: usize) -> f64 {
        self.levels[i] as f64 / (1u64 << self.frac_bits) as f64
    }
    pub fn max_abs(&self) -> i64 {
        self.levels.iter().map(|v| v.abs()).max().unwrap_or(0)
    }
}

fn check_frac(frac_bits: u32) -> Result<()> {
    if !(4..=24).contains(&frac_bits) {
        return Err(Error::invalid(
            "frac_bits",
            format!("must be in [4, 24], got {frac_bits}"),
        ));
    }
    Ok(())
}

fn to_fixed(x: f64, frac_bits: u32, what: &str) -> Result<i64> {
    let v = (x * (1u64 << frac_bits) as f64).round();
    if !(v.abs() <= i32::MAX as f64) {
        return Err(Error::Numeric(format!(
            "{what} {x} overflows a 32-bit fixed-point integer at {frac_bits} fraction bits"
        )));
    }
    Ok(v as i64)
}

/// Rounds every level of `spec` to the nearest multiple of `2^-frac_bits`.
pub fn build_fixedpoint(spec: &QuantizerSpec, frac_bits: u32) -> Result<FixedPointCodebook> {
    check_frac(frac_bits)?;
    if spec.k() > 256 {
        return Err(Error::invalid(
            "k",
            "fixed-point codebooks hold at most 256 levels",
        ));
    }
    let levels = spec
        .levels()
        .iter()
        .map(|&q| to_fixed(q, frac_bits, "level"))
        .collect::<Result<Vec<_>>>()?;
    Ok(FixedPointCodebook { levels, frac_bits })
}

/// Activation codebook with thresholds snapped strictly between neighbouring
/// levels. Levels that round to the same integer are merged.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActCodebook {
    pub codebook: FixedPointCodebook,
    /// Thresholds at scale `2^-(s+1)`.
    pub thresholds: Vec<i64>,
}

impl ActCodebook {
    pub fn new(spec: &QuantizerSpec, frac_bits: u32) -> Result<Self> {
        let raw = build_fixedpoint(spec, frac_bits)?;
        let mut levels = vec![raw.levels[0]];
        let mut thresholds = Vec::new();
        for i in 1..raw.levels.len() {
            let l = raw.levels[i];
            if l == *levels.last().unwrap() {
                continue;
            }
            let lo = 2 * levels.last().unwrap();
            let t = (spec.thresholds()[i - 1] * (1u64 << (frac_bits + 1)) as f64).round() as i64;
            thresholds.push(t.clamp(lo + 1, 2 * l - 1));
            levels.push(l);
        }
        Ok(ActCodebook {
            codebook: FixedPointCodebook { levels, frac_bits },
            thresholds,
        })
    }

    pub fn k(&self) -> usize {
        self.codebook.levels.len()
    }

    /// Bin of a real value; values on a threshold go to the upper bin.
    pub fn index_real(&self, x: f64) -> usize {
        let scale = (1u64 << (self.codebook.frac_bits + 1)) as f64;
        self.thresholds.partition_point(|&t| t as f64 / scale <= x)
    }

    /// Bin of an accumulator value at scale `2^-2s`.
    pub fn index_acc(&self, acc: i64) -> usize {
        let s = self.codebook.frac_bits;
        // t·2^-(s+1) <= acc·2^-2s  ⇔  t·2^(s-1) <= acc
        self.thresholds
            .partition_point(|&t| ((t as i128) << (s - 1)) <= acc as i128)
    }
}

/// `k_w × (k_a + 1)` products; the extra column is zero and stands for padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProductLut {
    pub kw: usize,
    pub ka: usize,
    pub table: Vec<i64>,
}

impl ProductLut {
    pub fn new(w: &FixedPointCodebook, a: &FixedPointCodebook) -> Self {
        let (kw, ka) = (w.levels.len(), a.levels.len());
        let mut table = vec![0; kw * (ka + 1)];
        for i in 0..kw {
            for j in 0..ka {
                table[i * (ka + 1) + j] = w.levels[i] * a.levels[j];
            }
        }
        ProductLut { kw, ka, table }
    }

    pub fn get(&self, i: usize, j: usize) -> i64 {
        self.table[i * (self.ka + 1) + j]
    }

    fn row(&self, i: usize) -> &[i64] {
        &self.table[i * (self.ka + 1)..(i + 1) * (self.ka + 1)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AccumMode {
    #[default]
    Lut,
    /// Multiplies level integers directly; must give identical accumulators.
    Direct,
}

#[derive(Debug, Clone, PartialEq)]
struct MacOp {
    weights: FixedPointCodebook,
    acts: ActCodebook,
    lut: ProductLut,
    /// Weight codebook index per weight, row-major `(m, fan_in)`.
    w_idx: Vec<u8>,
    /// Bias at scale `2^-2s`.
    bias: Vec<i64>,
    m: usize,
    /// `Some((n, k, stride, pad))` for conv, `None` for dense.
    conv: Option<(usize, usize, usize, usize)>,
    acc_bits: u32,
}

impl MacOp {
    fn fan_in(&self) -> usize {
        self.w_idx.len() / self.m
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Op {
    Mac(Box<MacOp>),
    Relu,
    MaxPool(Pool),
    AvgPool(Pool),
    /// Per-channel `y = scale·x + shift`, scale at `2^-s`, shift at `2^-2s`.
    Affine {
        scale: Vec<i64>,
        shift: Vec<i64>,
    },
}

/// A frozen model compiled to integer codebooks and product tables.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedNet {
    ops: Vec<Op>,
    frac_bits: u32,
    input_shape: Vec<usize>,
}

fn ceil_log2(x: u64) -> u32 {
    if x <= 1 {
        0
    } else {
        u64::BITS - (x - 1).leading_zeros()
    }
}

fn bits_of(v: i64) -> u32 {
    u64::BITS - (v.unsigned_abs()).leading_zeros()
}

/// Compiles a fully quantized model (every conv/dense frozen, every input calibrated).
pub fn compile(model: &QuantModel, frac_bits: u32) -> Result<QuantizedNet> {
    check_frac(frac_bits)?;
    let s = frac_bits;
    let mut ops = Vec::new();
    for (l, layer) in model.net.layers.iter().enumerate() {
        let op = match layer {
            Layer::Conv2d(_) | Layer::Dense(_) => {
                let j = model.owner(l);
                let q = &model.layers[j];
                let spec = match (&q.mode, &q.spec) {
                    (LayerMode::Frozen, Some(spec)) => spec,
                    _ => {
                        return Err(Error::invalid(
                            "model",
                            format!("layer {l} is not frozen; quantize every layer first"),
                        ))
                    }
                };
                let act = model.acts.get(&l).ok_or_else(|| {
                    Error::invalid(
                        "model",
                        format!("input of layer {l} has no activation quantizer"),
                    )
                })?;
                let weights = build_fixedpoint(spec, s)?;
                let acts = ActCodebook::new(&act.spec, s)?;
                let (w, b, m, conv) = match layer {
                    Layer::Conv2d(c) => (
                        &c.weight,
                        &c.bias,
                        c.out_channels(),
                        Some((c.in_channels(), c.kernel(), c.stride, c.pad)),
                    ),
                    Layer::Dense(d) => (&d.weight, &d.bias, d.out_features(), None),
                    _ => unreachable!(),
                };
                let w_idx: Vec<u8> = w.data().iter().map(|&v| spec.index_of(v) as u8).collect();
                let bias = b
                    .data()
                    .iter()
                    .map(|&v| (v * (1u64 << (2 * s)) as f64).round() as i64)
                    .collect::<Vec<_>>();
                let fan_in = w.len() / m;
                let max_bias = bias.iter().map(|v| v.abs()).max().unwrap_or(0);
                let acc_bits = bits_of(weights.max_abs())
                    + bits_of(acts.codebook.max_abs())
                    + ceil_log2(fan_in as u64)
                    + 1
                    + u32::from(max_bias > 0);
                if acc_bits > 63 {
                    return Err(Error::Numeric(format!(
                        "layer {l}: a {acc_bits}-bit accumulator does not fit in 64 bits"
                    )));
                }
                let lut = ProductLut::new(&weights, &acts.codebook);
                Op::Mac(Box::new(MacOp {
                    weights,
                    acts,
                    lut,
                    w_idx,
                    bias,
                    m,
                    conv,
                    acc_bits,
                }))
            }
            Layer::Relu => Op::Relu,
            Layer::MaxPool(p) => Op::MaxPool(*p),
            Layer::AvgPool(p) => Op::AvgPool(*p),
            Layer::BatchNorm(bn) => {
                let mut scale = Vec::new();
                let mut shift = Vec::new();
                for c in 0..bn.channels() {
                    let a = bn.gamma.data()[c] / (bn.running_var.data()[c] + bn.eps).sqrt();
                    let b = bn.beta.data()[c] - a * bn.running_mean.data()[c];
                    scale.push(to_fixed(a, s, "batch-norm scale")?);
                    shift.push((b * (1u64 << (2 * s)) as f64).round() as i64);
                }
                Op::Affine { scale, shift }
            }
        };
        ops.push(op);
    }
    Ok(QuantizedNet {
        ops,
        frac_bits,
        input_shape: model.net.input_shape().to_vec(),
    })
}

impl QuantizedNet {
    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    /// Declared accumulator width of each conv/dense layer.
    pub fn accumulator_bits(&self) -> Vec<u32> {
        self.ops
            .iter()
            .filter_map(|o| match o {
                Op::Mac(m) => Some(m.acc_bits),
                _ => None,
            })
            .collect()
    }

    /// Weight codebooks of the conv/dense layers.
    pub fn weight_codebooks(&self) -> Vec<&FixedPointCodebook> {
        self.ops
            .iter()
            .filter_map(|o| match o {
                Op::Mac(m) => Some(&m.weights),
                _ => None,
            })
            .collect()
    }

    pub fn act_codebooks(&self) -> Vec<&ActCodebook> {
        self.ops
            .iter()
            .filter_map(|o| match o {
                Op::Mac(m) => Some(&m.acts),
                _ => None,
            })
            .collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() < 2 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::Shape(format!(
                "model expects samples of shape {:?}, got {:?}",
                self.input_shape,
                x.shape()
            )));
        }
        Ok(())
    }
}

/// Integer results of one sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntTrace {
    /// Output values at scale `2^-2s`.
    pub logits: Vec<i64>,
    /// Largest `|accumulator|` seen in each conv/dense layer.
    pub max_abs_acc: Vec<i64>,
}

#[derive(Clone)]
enum IVal {
    /// Network input, not yet quantized.
    Real(Vec<f64>),
    /// Values at scale `2^-2s`.
    Acc(Vec<i64>),
}

fn pool_out(shape: &[usize], p: &Pool) -> (usize, usize) {
    (
        (shape[1] - p.size) / p.stride + 1,
        (shape[2] - p.size) / p.stride + 1,
    )
}

fn div_round(v: i128, shift: u32) -> i128 {
    (v + (1i128 << (shift - 1))) >> shift
}

/// Activation indices for a MAC input.
fn quantize_input(v: &IVal, acts: &ActCodebook) -> Vec<u16> {
    match v {
        IVal::Real(x) => x.iter().map(|&t| acts.index_real(t) as u16).collect(),
        IVal::Acc(x) => x.iter().map(|&t| acts.index_acc(t) as u16).collect(),
    }
}

/// Patch matrix of activation indices; padding maps to the LUT's zero column `pad`.
fn gather_cols(
    idx: &[u16],
    shape: &[usize],
    k: usize,
    stride: usize,
    padding: usize,
    pad: u16,
) -> (Vec<u16>, usize, usize) {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (w + 2 * padding - k) / stride + 1;
    let p = oh * ow;
    let mut cols = vec![pad; c * k * k * p];
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((ch * k + ki) * k + kj) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            row[oy * ow + ox] = idx[(ch * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

fn mac_int(
    op: &MacOp,
    a_idx: &[u16],
    shape: &[usize],
    mode: AccumMode,
) -> Result<(Vec<i64>, Vec<usize>, i64)> {
    let fan_in = op.fan_in();
    let pad = op.acts.k() as u16;
    let (cols, p, out_shape) = match op.conv {
        Some((_, k, stride, padding)) => {
            let (cols, oh, ow) = gather_cols(a_idx, shape, k, stride, padding, pad);
            (cols, oh * ow, vec![op.m, oh, ow])
        }
        None => (a_idx.to_vec(), 1, vec![op.m]),
    };
    let mut out = vec![0i64; op.m * p];
    for o in 0..op.m {
        let acc = &mut out[o * p..(o + 1) * p];
        acc.fill(op.bias[o]);
        let wrow = &op.w_idx[o * fan_in..(o + 1) * fan_in];
        for (r, &wi) in wrow.iter().enumerate() {
            let cr = &cols[r * p..(r + 1) * p];
            match mode {
                AccumMode::Lut => {
                    let lut = op.lut.row(wi as usize);
                    for (a, &ci) in acc.iter_mut().zip(cr) {
                        *a += lut[ci as usize];
                    }
                }
                AccumMode::Direct => {
                    let wv = op.weights.levels[wi as usize];
                    for (a, &ci) in acc.iter_mut().zip(cr) {
                        if ci != pad {
                            *a += wv * op.acts.codebook.levels[ci as usize];
                        }
                    }
                }
            }
        }
    }
    let max_abs = out.iter().map(|v| v.abs()).max().unwrap_or(0);
    if op.acc_bits < 64 && max_abs >= 1i64 << (op.acc_bits - 1) {
        return Err(Error::Numeric(format!(
            "accumulator overflow: |{max_abs}| needs more than the declared {} bits",
            op.acc_bits
        )));
    }
    Ok((out, out_shape, max_abs))
}

fn run_int(q: &QuantizedNet, x: &[f64], mode: AccumMode) -> Result<IntTrace> {
    let s = q.frac_bits;
    let mut shape = q.input_shape.clone();
    let mut v = IVal::Real(x.to_vec());
    let mut max_abs_acc = Vec::new();
    for op in &q.ops {
        v = match op {
            Op::Mac(m) => {
                let idx = quantize_input(&v, &m.acts);
                let (out, sh, mx) = mac_int(m, &idx, &shape, mode)?;
                shape = sh;
                max_abs_acc.push(mx);
                IVal::Acc(out)
            }
            Op::Relu => match v {
                IVal::Acc(mut a) => {
                    a.iter_mut().for_each(|t| *t = (*t).max(0));
                    IVal::Acc(a)
                }
                IVal::Real(mut r) => {
                    r.iter_mut().for_each(|t| *t = t.max(0.0));
                    IVal::Real(r)
                }
            },
            Op::MaxPool(p) | Op::AvgPool(p) => {
                let IVal::Acc(a) = &v else {
                    return Err(Error::invalid(
                        "model",
                        "pooling before the first conv/dense is not supported",
                    ));
                };
                let (oh, ow) = pool_out(&shape, p);
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let mut out = vec![0i64; c * oh * ow];
                let avg = matches!(op, Op::AvgPool(_));
                let count = (p.size * p.size) as i128;
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = i64::MIN;
                            let mut sum = 0i128;
                            for dy in 0..p.size {
                                for dx in 0..p.size {
                                    let t =
                                        a[(ch * h + oy * p.stride + dy) * w + ox * p.stride + dx];
                                    best = best.max(t);
                                    sum += t as i128;
                                }
                            }
                            // Round half up, as div_round does for power-of-two divisors.
                            out[(ch * oh + oy) * ow + ox] = if avg {
                                (sum * 2 + count).div_euclid(2 * count) as i64
                            } else {
                                best
                            };
                        }
                    }
                }
                shape = vec![c, oh, ow];
                IVal::Acc(out)
            }
            Op::Affine { scale, shift } => {
                let IVal::Acc(mut a) = v else {
                    return Err(Error::invalid(
                        "model",
                        "batch norm before the first conv/dense is not supported",
                    ));
                };
                let c = scale.len();
                let per = a.len() / c;
                for (i, t) in a.iter_mut().enumerate() {
                    let ch = i / per;
                    *t = (div_round(scale[ch] as i128 * *t as i128, s) + shift[ch] as i128) as i64;
                }
                IVal::Acc(a)
            }
        };
    }
    let logits = match v {
        IVal::Acc(a) => a,
        IVal::Real(_) => return Err(Error::invalid("model", "model has no conv/dense layer")),
    };
    Ok(IntTrace {
        logits,
        max_abs_acc,
    })
}

/// Integer traces of every sample, in order.
pub fn quantized_forward_traces(
    q: &QuantizedNet,
    x: &Tensor,
    mode: AccumMode,
) -> Result<Vec<IntTrace>> {
    q.check_input(x)?;
    let n = x.batch();
    let parts = par::map_range(par::ranges(n, CHUNK).len(), |ci| {
        (ci * CHUNK..((ci + 1) * CHUNK).min(n))
            .map(|i| run_int(q, x.sample(i), mode))
            .collect::<Result<Vec<_>>>()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// LUT inference; logits returned in real units.
pub fn quantized_forward(q: &QuantizedNet, x: &Tensor) -> Result<Tensor> {
    let traces = quantized_forward_traces(q, x, AccumMode::Lut)?;
    let scale = (1u64 << (2 * q.frac_bits)) as f64;
    let c = traces.first().map_or(0, |t| t.logits.len());
    let data = traces
        .iter()
        .flat_map(|t| t.logits.iter().map(|&v| v as f64 / scale))
        .collect();
    Tensor::from_vec(&[x.batch(), c], data)
}

fn run_real(q: &QuantizedNet, x: &[f64]) -> Vec<f64> {
    let s = q.frac_bits;
    let two_s = (1u64 << (2 * s)) as f64;
    let one_s = (1u64 << s) as f64;
    let mut shape = q.input_shape.clone();
    let mut v = x.to_vec();
    for op in &q.ops {
        match op {
            Op::Mac(m) => {
                let a: Vec<f64> = v
                    .iter()
                    .map(|&t| m.acts.codebook.real(m.acts.index_real(t)))
                    .collect();
                let wr: Vec<f64> = m
                    .w_idx
                    .iter()
                    .map(|&i| m.weights.real(i as usize))
                    .collect();
                let fan_in = m.fan_in();
                let (out, sh) = match m.conv {
                    Some((_, k, stride, padding)) => {
                        let (c, h, w) = (shape[0], shape[1], shape[2]);
                        let oh = (h + 2 * padding - k) / stride + 1;
                        let ow = (w + 2 * padding - k) / stride + 1;
                        let mut out = vec![0.0; m.m * oh * ow];
                        for o in 0..m.m {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let mut acc = m.bias[o] as f64 / two_s;
                                    for ch in 0..c {
                                        for ki in 0..k {
                                            for kj in 0..k {
                                                let iy =
                                                    (oy * stride + ki) as isize - padding as isize;
                                                let ix =
                                                    (ox * stride + kj) as isize - padding as isize;
                                                if iy < 0
                                                    || ix < 0
                                                    || iy >= h as isize
                                                    || ix >= w as isize
                                                {
                                                    continue;
                                                }
                                                acc += wr[o * fan_in + (ch * k + ki) * k + kj]
                                                    * a[(ch * h + iy as usize) * w + ix as usize];
                                            }
                                        }
                                    }
                                    out[(o * oh + oy) * ow + ox] = acc;
                                }
                            }
                        }
                        (out, vec![m.m, oh, ow])
                    }
                    None => {
                        let out = (0..m.m)
                            .map(|o| {
                                m.bias[o] as f64 / two_s
                                    + (0..fan_in).map(|r| wr[o * fan_in + r] * a[r]).sum::<f64>()
                            })
                            .collect();
                        (out, vec![m.m])
                    }
                };
                v = out;
                shape = sh;
            }
            Op::Relu => v.iter_mut().for_each(|t| *t = t.max(0.0)),
            Op::MaxPool(p) | Op::AvgPool(p) => {
                let (oh, ow) = pool_out(&shape, p);
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let avg = matches!(op, Op::AvgPool(_));
                let mut out = vec![0.0; c * oh * ow];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = f64::NEG_INFINITY;
                            let mut sum = 0.0;
                            for dy in 0..p.size {
                                for dx in 0..p.size {
                                    let t =
                                        v[(ch * h + oy * p.stride + dy) * w + ox * p.stride + dx];
                                    best = best.max(t);
                                    sum += t;
                                }
                            }
                            out[(ch * oh + oy) * ow + ox] = if avg {
                                sum / (p.size * p.size) as f64
                            } else {
                                best
                            };
                        }
                    }
                }
                v = out;
                shape = vec![c, oh, ow];
            }
            Op::Affine { scale, shift } => {
                let per = v.len() / scale.len();
                for (i, t) in v.iter_mut().enumerate() {
                    let ch = i / per;
                    *t = scale[ch] as f64 / one_s * *t + shift[ch] as f64 / two_s;
                }
            }
        }
    }
    v
}

/// The same quantized model evaluated in `f64` with the codebook values.
pub fn simulate_quantized(q: &QuantizedNet, x: &Tensor) -> Result<Tensor> {
    q.check_input(x)?;
    let n = x.batch();
    let parts = par::map_range(par::ranges(n, CHUNK).len(), |ci| {
        (ci * CHUNK..((ci + 1) * CHUNK).min(n))
            .map(|i| run_real(q, x.sample(i)))
            .collect::<Vec<_>>()
    });
    let rows: Vec<Vec<f64>> = parts.into_iter().flatten().collect();
    let c = rows.first().map_or(0, |r| r.len());
    Tensor::from_vec(&[n, c], rows.concat())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::Domain;

    #[test]
    fn fixedpoint_examples() {
        let s = QuantizerSpec::new(vec![0.0], vec![-0.5, 0.5], Domain::Weight).unwrap();
        assert_eq!(build_fixedpoint(&s, 8).unwrap().levels, vec![-128, 128]);
        let s = QuantizerSpec::new(vec![0.5], vec![0.3186, 0.674], Domain::Weight).unwrap();
        // round(0.3186 · 65536) = round(20879.77)
        assert_eq!(build_fixedpoint(&s, 16).unwrap().levels[0], 20880);
        let c = build_fixedpoint(&s, 4).unwrap();
        assert_eq!(c.levels[1], 11);
        assert!((c.real(1) - 0.674).abs() < 1.0 / 16.0);
        assert!(build_fixedpoint(&s, 3).is_err());
        let big = QuantizerSpec::new(vec![0.0], vec![-1e6, 1e6], Domain::Weight).unwrap();
        assert!(matches!(build_fixedpoint(&big, 16), Err(Error::Numeric(_))));
    }

    #[test]
    fn act_codebook_merges_and_orders() {
        let s = QuantizerSpec::new(
            vec![1e-9, 2e-9, 0.5],
            vec![0.0, 1.5e-9, 3e-9, 0.75],
            Domain::Activation,
        )
        .unwrap();
        let a = ActCodebook::new(&s, 8).unwrap();
        assert_eq!(a.codebook.levels, vec![0, 192]);
        assert_eq!(a.thresholds, vec![256]);
        assert_eq!(a.index_real(0.49), 0);
        assert_eq!(a.index_real(0.5), 1);
        // accumulator at scale 2^-16: 0.5 = 32768
        assert_eq!(a.index_acc(32767), 0);
        assert_eq!(a.index_acc(32768), 1);
    }

    #[test]
    fn lut_entries_are_products() {
        let w = FixedPointCodebook {
            levels: vec![-3, 5],
            frac_bits: 8,
        };
        let a = FixedPointCodebook {
            levels: vec![0, 7, 11],
            frac_bits: 8,
        };
        let lut = ProductLut::new(&w, &a);
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(lut.get(i, j), w.levels[i] * a.levels[j]);
            }
            assert_eq!(lut.get(i, 3), 0);
        }
    }
}
