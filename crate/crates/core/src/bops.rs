//! Bit-operation (BOPs) complexity and model size of conv/dense architectures.
//!
//! Per output position a layer with `n·k²` accumulated products costs
//! `n·k²·(b_a·b_w + b_a + b_w + ⌈log₂ n·k²⌉)`; totals multiply by `m·out_h·out_w`.
//! Each parameter is fetched once at `b_w` bits.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Conv,
    DepthwiseConv,
    Dense,
}

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Conv => "conv",
            ShapeKind::DepthwiseConv => "depthwise_conv",
            ShapeKind::Dense => "dense",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "conv" => Ok(ShapeKind::Conv),
            "depthwise_conv" | "dwconv" => Ok(ShapeKind::DepthwiseConv),
            "dense" | "fc" => Ok(ShapeKind::Dense),
            _ => Err(Error::invalid("kind", format!("unknown layer kind '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerShape {
    pub name: String,
    pub kind: ShapeKind,
    /// Input channels (for depthwise: equal to `m`).
    pub n: u64,
    /// Output channels / features.
    pub m: u64,
    pub k: u64,
    pub out_h: u64,
    pub out_w: u64,
    pub bias: bool,
}

impl LayerShape {
    pub fn conv(name: &str, n: u64, m: u64, k: u64, out: u64, bias: bool) -> Self {
        LayerShape {
            name: name.into(),
            kind: ShapeKind::Conv,
            n,
            m,
            k,
            out_h: out,
            out_w: out,
            bias,
        }
    }
    pub fn depthwise(name: &str, ch: u64, k: u64, out: u64, bias: bool) -> Self {
        LayerShape {
            name: name.into(),
            kind: ShapeKind::DepthwiseConv,
            n: ch,
            m: ch,
            k,
            out_h: out,
            out_w: out,
            bias,
        }
    }
    pub fn dense(name: &str, n: u64, m: u64, bias: bool) -> Self {
        LayerShape {
            name: name.into(),
            kind: ShapeKind::Dense,
            n,
            m,
            k: 1,
            out_h: 1,
            out_w: 1,
            bias,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (f, v) in [
            ("n", self.n),
            ("m", self.m),
            ("k", self.k),
            ("out_h", self.out_h),
            ("out_w", self.out_w),
        ] {
            if v == 0 {
                return Err(Error::invalid(
                    f,
                    format!("layer '{}': must be >= 1", self.name),
                ));
            }
        }
        if self.kind == ShapeKind::Dense && (self.k != 1 || self.out_h != 1 || self.out_w != 1) {
            return Err(Error::invalid(
                "k",
                format!("dense layer '{}' needs k = out_h = out_w = 1", self.name),
            ));
        }
        if self.kind == ShapeKind::DepthwiseConv && self.n != self.m {
            return Err(Error::invalid(
                "n",
                format!("depthwise layer '{}' needs n = m", self.name),
            ));
        }
        Ok(())
    }

    /// Products summed per output value.
    pub fn fan_in(&self) -> u64 {
        match self.kind {
            ShapeKind::Conv => self.n * self.k * self.k,
            ShapeKind::DepthwiseConv => self.k * self.k,
            ShapeKind::Dense => self.n,
        }
    }

    pub fn param_count(&self) -> u64 {
        let w = match self.kind {
            ShapeKind::Conv => self.m * self.n * self.k * self.k,
            ShapeKind::DepthwiseConv => self.m * self.k * self.k,
            ShapeKind::Dense => self.m * self.n,
        };
        w + if self.bias { self.m } else { 0 }
    }

    pub fn macs(&self) -> u64 {
        self.m * self.out_h * self.out_w * self.fan_in()
    }
}

/// `⌈log₂ x⌉` for `x ≥ 1`.
pub fn ceil_log2(x: u64) -> u64 {
    debug_assert!(x >= 1);
    (u64::BITS - (x - 1).leading_zeros()) as u64
}

fn check_bits(b_w: u32, b_a: u32) -> Result<()> {
    if b_w == 0 {
        return Err(Error::invalid("b_w", "bitwidth must be >= 1"));
    }
    if b_a == 0 {
        return Err(Error::invalid("b_a", "bitwidth must be >= 1"));
    }
    Ok(())
}

/// Arithmetic BOPs of one layer.
pub fn layer_bops(layer: &LayerShape, b_w: u32, b_a: u32) -> Result<u128> {
    layer.validate()?;
    check_bits(b_w, b_a)?;
    let (bw, ba) = (b_w as u128, b_a as u128);
    let per_mac = ba * bw + ba + bw + ceil_log2(layer.fan_in()) as u128;
    Ok(layer.macs() as u128 * per_mac)
}

/// Cost of fetching every parameter once: `params · b_w`.
pub fn memory_fetch_bops(param_count: u64, b_w: u32) -> u128 {
    param_count as u128 * b_w as u128
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerReport {
    pub name: String,
    pub kind: ShapeKind,
    pub b_w: u32,
    pub b_a: u32,
    pub bops: u128,
    /// Parameter storage of this layer in bits.
    pub bits: u128,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BopsReport {
    pub layers: Vec<LayerReport>,
    pub arithmetic: u128,
    pub memory_fetch: u128,
    pub total: u128,
    pub size_bits: u128,
}

impl BopsReport {
    pub fn total_gbops(&self) -> f64 {
        self.total as f64 / 1e9
    }
    pub fn size_mbit(&self) -> f64 {
        self.size_bits as f64 / 1e6
    }

    /// CSV with columns `layer,kind,b_w,b_a,bops,bits`, followed by
    /// `memory_fetch` and `total` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,kind,b_w,b_a,bops,bits\n");
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                l.name,
                l.kind.name(),
                l.b_w,
                l.b_a,
                l.bops,
                l.bits
            );
        }
        let _ = writeln!(s, "memory_fetch,,,,{},", self.memory_fetch);
        let _ = writeln!(s, "total,,,,{},{}", self.total, self.size_bits);
        s
    }
}

/// Bitwidths of layer `i`: first and last stay at 32/32 unless `quantize_first_last`.
fn layer_bits(i: usize, len: usize, b_w: u32, b_a: u32, quantize_first_last: bool) -> (u32, u32) {
    if !quantize_first_last && (i == 0 || i + 1 == len) {
        (32, 32)
    } else {
        (b_w, b_a)
    }
}

pub fn model_bops(
    arch: &[LayerShape],
    b_w: u32,
    b_a: u32,
    quantize_first_last: bool,
) -> Result<BopsReport> {
    check_bits(b_w, b_a)?;
    if arch.is_empty() {
        return Err(Error::invalid("arch", "no layers"));
    }
    let mut layers = Vec::with_capacity(arch.len());
    for (i, l) in arch.iter().enumerate() {
        let (lw, la) = layer_bits(i, arch.len(), b_w, b_a, quantize_first_last);
        layers.push(LayerReport {
            name: l.name.clone(),
            kind: l.kind,
            b_w: lw,
            b_a: la,
            bops: layer_bops(l, lw, la)?,
            bits: memory_fetch_bops(l.param_count(), lw),
        });
    }
    let arithmetic = layers.iter().map(|l| l.bops).sum();
    let size_bits: u128 = layers.iter().map(|l| l.bits).sum();
    let memory_fetch = size_bits;
    Ok(BopsReport {
        layers,
        arithmetic,
        memory_fetch,
        total: arithmetic + memory_fetch,
        size_bits,
    })
}

/// Sum of parameter bits, with first/last at 32 bits unless `quantize_first_last`.
pub fn model_size(arch: &[LayerShape], b_w: u32, quantize_first_last: bool) -> Result<u128> {
    check_bits(b_w, 1)?;
    let mut total = 0u128;
    for (i, l) in arch.iter().enumerate() {
        l.validate()?;
        let (lw, _) = layer_bits(i, arch.len(), b_w, 1, quantize_first_last);
        total += memory_fetch_bops(l.param_count(), lw);
    }
    Ok(total)
}

pub const CATALOG: [&str; 5] = [
    "alexnet",
    "resnet18",
    "resnet34",
    "resnet50",
    "mobilenet_v1",
];

/// Layer shapes of a standard ImageNet architecture (224×224 input, 1000 classes).
pub fn arch_catalog(name: &str) -> Result<Vec<LayerShape>> {
    match name {
        "alexnet" => Ok(alexnet()),
        "resnet18" => Ok(resnet_basic(&[2, 2, 2, 2])),
        "resnet34" => Ok(resnet_basic(&[3, 4, 6, 3])),
        "resnet50" => Ok(resnet50()),
        "mobilenet_v1" | "mobilenet" => Ok(mobilenet_v1()),
        _ => Err(Error::invalid(
            "arch",
            format!(
                "unknown architecture '{name}' (known: {})",
                CATALOG.join(", ")
            ),
        )),
    }
}

fn alexnet() -> Vec<LayerShape> {
    vec![
        LayerShape::conv("conv1", 3, 96, 11, 55, true),
        LayerShape::conv("conv2", 96, 256, 5, 27, true),
        LayerShape::conv("conv3", 256, 384, 3, 13, true),
        LayerShape::conv("conv4", 384, 384, 3, 13, true),
        LayerShape::conv("conv5", 384, 256, 3, 13, true),
        LayerShape::dense("fc6", 256 * 6 * 6, 4096, true),
        LayerShape::dense("fc7", 4096, 4096, true),
        LayerShape::dense("fc8", 4096, 1000, true),
    ]
}

fn resnet_basic(blocks: &[usize; 4]) -> Vec<LayerShape> {
    let mut v = vec![LayerShape::conv("conv1", 3, 64, 7, 112, false)];
    let mut n = 64;
    for (s, &nb) in blocks.iter().enumerate() {
        let m = 64 << s;
        let out = 56 >> s;
        for b in 0..nb {
            let name = |x: &str| format!("layer{}.{b}.{x}", s + 1);
            v.push(LayerShape::conv(&name("conv1"), n, m, 3, out, false));
            v.push(LayerShape::conv(&name("conv2"), m, m, 3, out, false));
            if b == 0 && s > 0 {
                v.push(LayerShape::conv(&name("downsample"), n, m, 1, out, false));
            }
            n = m;
        }
    }
    v.push(LayerShape::dense("fc", 512, 1000, true));
    v
}

fn resnet50() -> Vec<LayerShape> {
    let mut v = vec![LayerShape::conv("conv1", 3, 64, 7, 112, false)];
    let mut n = 64;
    for (s, &nb) in [3usize, 4, 6, 3].iter().enumerate() {
        let w = 64 << s;
        let m = 4 * w;
        let out = 56 >> s;
        for b in 0..nb {
            let name = |x: &str| format!("layer{}.{b}.{x}", s + 1);
            v.push(LayerShape::conv(&name("conv1"), n, w, 1, out, false));
            v.push(LayerShape::conv(&name("conv2"), w, w, 3, out, false));
            v.push(LayerShape::conv(&name("conv3"), w, m, 1, out, false));
            if b == 0 {
                v.push(LayerShape::conv(&name("downsample"), n, m, 1, out, false));
            }
            n = m;
        }
    }
    v.push(LayerShape::dense("fc", 2048, 1000, true));
    v
}

fn mobilenet_v1() -> Vec<LayerShape> {
    let mut v = vec![LayerShape::conv("conv1", 3, 32, 3, 112, false)];
    // (output channels, stride) of each depthwise-separable pair
    let pairs: [(u64, u64); 13] = [
        (64, 1),
        (128, 2),
        (128, 1),
        (256, 2),
        (256, 1),
        (512, 2),
        (512, 1),
        (512, 1),
        (512, 1),
        (512, 1),
        (512, 1),
        (1024, 2),
        (1024, 1),
    ];
    let (mut ch, mut out) = (32u64, 112u64);
    for (i, &(m, s)) in pairs.iter().enumerate() {
        out /= s;
        v.push(LayerShape::depthwise(
            &format!("dw{}", i + 1),
            ch,
            3,
            out,
            false,
        ));
        v.push(LayerShape::conv(
            &format!("pw{}", i + 1),
            ch,
            m,
            1,
            out,
            false,
        ));
        ch = m;
    }
    v.push(LayerShape::dense("fc", 1024, 1000, true));
    v
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "1" | "true" | "yes" => Some(true),
        "0" | "false" | "no" => Some(false),
        _ => None,
    }
}

/// Parses `kind,n,m,k,out_h,out_w[,bias]` lines; `#` starts a comment.
pub fn parse_arch(text: &str) -> Result<Vec<LayerShape>> {
    let mut v = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let bad = |why: String| Error::Format(format!("line {}: {why}", ln + 1));
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 6 && f.len() != 7 {
            return Err(bad(format!("expected 6 or 7 fields, got {}", f.len())));
        }
        let kind = ShapeKind::from_name(f[0]).map_err(|e| bad(e.to_string()))?;
        let mut nums = [0u64; 5];
        for (j, s) in f[1..6].iter().enumerate() {
            nums[j] = s
                .parse()
                .map_err(|_| bad(format!("'{s}' is not a non-negative integer")))?;
        }
        let bias = match f.get(6) {
            Some(s) => parse_bool(s).ok_or_else(|| bad(format!("bias flag '{s}' is not 0/1")))?,
            None => false,
        };
        let [n, m, k, out_h, out_w] = nums;
        let l = LayerShape {
            name: format!("L{}", v.len()),
            kind,
            n,
            m,
            k,
            out_h,
            out_w,
            bias,
        };
        l.validate().map_err(|e| bad(e.to_string()))?;
        v.push(l);
    }
    if v.is_empty() {
        return Err(Error::Format("architecture file has no layers".into()));
    }
    Ok(v)
}

/// Joins an accuracy CSV (`arch,b_w,b_a,accuracy` with header) with computed
/// complexity: output columns `arch,b_w,b_a,gbops,size_mbit,accuracy`.
pub fn accuracy_table(csv_text: &str, quantize_first_last: bool) -> Result<String> {
    let mut out = String::from("arch,b_w,b_a,gbops,size_mbit,accuracy\n");
    for (ln, line) in csv_text.lines().enumerate().skip(1) {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |why: &str| Error::Format(format!("accuracy line {}: {why}", ln + 1));
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 4 {
            return Err(bad("expected arch,b_w,b_a,accuracy"));
        }
        let b_w: u32 = f[1].parse().map_err(|_| bad("bad b_w"))?;
        let b_a: u32 = f[2].parse().map_err(|_| bad("bad b_a"))?;
        let acc: f64 = f[3].parse().map_err(|_| bad("bad accuracy"))?;
        let r = model_bops(&arch_catalog(f[0])?, b_w, b_a, quantize_first_last)?;
        let _ = writeln!(
            out,
            "{},{b_w},{b_a},{:.3},{:.3},{acc}",
            f[0],
            r.total_gbops(),
            r.size_mbit()
        );
    }
    Ok(out)
}
