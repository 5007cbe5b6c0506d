//! `UNQ1` model container.
//!
//! ```text
//! "UNQ1"  u16 version  u32 record_count
//! record: u16 name_len, name (UTF-8), u8 kind, 4×u32 dims, u8 dtype (0 real64, 1 index8),
//!         raw little-endian data, u8 flags,
//!         [flags & 1] u8 domain + QuantizerSpec (u32 k, thresholds, levels as f64)
//!         [flags & 2] u8 frac_bits, u32 count, count × i64 fixed-point levels
//! ```

use std::fs;
use std::path::Path;

use crate::dist::{DistKind, DistModel};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, Dense, Layer, Network, Pool, Tensor};
use crate::noise::{ActMethod, ActQuantizer, NoiseBins};
use crate::qinfer::{self, FixedPointCodebook};
use crate::qmodel::{LayerMode, QuantModel, WeightQuantizer};
use crate::quant::{take_bytes, take_u32, Domain, QuantizerSpec};

pub const MAGIC: &[u8; 4] = b"UNQ1";
pub const VERSION: u16 = 1;

/// Record kind codes.
pub mod kind {
    pub const META: u8 = 0;
    pub const CONV2D: u8 = 1;
    pub const DENSE: u8 = 2;
    pub const RELU: u8 = 3;
    pub const MAXPOOL: u8 = 4;
    pub const AVGPOOL: u8 = 5;
    pub const BATCHNORM: u8 = 6;
    pub const PARAM: u8 = 16;
    pub const QSTATE: u8 = 17;
    pub const DIST: u8 = 18;
    pub const BINS: u8 = 19;
    pub const ACT: u8 = 20;
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Real(Vec<f64>),
    Index(Vec<u8>),
}

impl Payload {
    fn len(&self) -> usize {
        match self {
            Payload::Real(v) => v.len(),
            Payload::Index(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub kind: u8,
    pub dims: [u32; 4],
    pub data: Payload,
    pub spec: Option<QuantizerSpec>,
    pub codebook: Option<FixedPointCodebook>,
}

impl Record {
    fn real(name: impl Into<String>, kind: u8, shape: &[usize], data: Vec<f64>) -> Self {
        Record {
            name: name.into(),
            kind,
            dims: dims_of(shape),
            data: Payload::Real(data),
            spec: None,
            codebook: None,
        }
    }

    fn reals(&self) -> Result<&[f64]> {
        match &self.data {
            Payload::Real(v) => Ok(v),
            Payload::Index(_) => Err(Error::Format(format!(
                "record '{}' should hold real64 data",
                self.name
            ))),
        }
    }

    fn shape(&self) -> Vec<usize> {
        let d: Vec<usize> = self.dims.iter().map(|&v| v as usize).collect();
        let rank = d.iter().rposition(|&v| v != 1).map_or(1, |p| p + 1);
        d[..rank].to_vec()
    }
}

fn dims_of(shape: &[usize]) -> [u32; 4] {
    let mut d = [1u32; 4];
    for (i, &s) in shape.iter().enumerate() {
        d[i] = s as u32;
    }
    d
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}
fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode(records: &[Record]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u16(&mut out, VERSION);
    put_u32(&mut out, records.len() as u32);
    for r in records {
        let name = r.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::invalid("name", "record name too long"));
        }
        let n: usize = r.dims.iter().map(|&d| d as usize).product();
        if n != r.data.len() {
            return Err(Error::Shape(format!(
                "record '{}': dims {:?} vs {} values",
                r.name,
                r.dims,
                r.data.len()
            )));
        }
        put_u16(&mut out, name.len() as u16);
        out.extend_from_slice(name);
        out.push(r.kind);
        for d in r.dims {
            put_u32(&mut out, d);
        }
        match &r.data {
            Payload::Real(v) => {
                out.push(0);
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            Payload::Index(v) => {
                out.push(1);
                out.extend_from_slice(v);
            }
        }
        out.push(u8::from(r.spec.is_some()) | (u8::from(r.codebook.is_some()) << 1));
        if let Some(s) = &r.spec {
            out.push(match s.domain() {
                Domain::Weight => 0,
                Domain::Activation => 1,
            });
            s.write_to(&mut out);
        }
        if let Some(c) = &r.codebook {
            out.push(c.frac_bits as u8);
            put_u32(&mut out, c.levels.len() as u32);
            for v in &c.levels {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn take_u8(buf: &mut &[u8]) -> Result<u8> {
    Ok(take_bytes(buf, 1)?[0])
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut buf = bytes;
    if take_bytes(&mut buf, 4)
        .map_err(|_| Error::Format("file too short for a container".into()))?
        != MAGIC
    {
        return Err(Error::Format("not a UNQ1 container (bad magic)".into()));
    }
    let version = u16::from_le_bytes(take_bytes(&mut buf, 2)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported container version {version} (expected {VERSION})"
        )));
    }
    let count = take_u32(&mut buf)? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let nlen = u16::from_le_bytes(take_bytes(&mut buf, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take_bytes(&mut buf, nlen)?.to_vec())
            .map_err(|_| Error::Format("record name is not UTF-8".into()))?;
        let kind = take_u8(&mut buf)?;
        let mut dims = [0u32; 4];
        for d in &mut dims {
            *d = take_u32(&mut buf)?;
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d as usize))
            .ok_or_else(|| Error::Format(format!("record '{name}': dims overflow")))?;
        let data = match take_u8(&mut buf)? {
            0 => {
                let raw = take_bytes(
                    &mut buf,
                    n.checked_mul(8)
                        .ok_or_else(|| Error::Format("size overflow".into()))?,
                )?;
                Payload::Real(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            1 => Payload::Index(take_bytes(&mut buf, n)?.to_vec()),
            t => return Err(Error::Format(format!("record '{name}': unknown dtype {t}"))),
        };
        let flags = take_u8(&mut buf)?;
        if flags & !3 != 0 {
            return Err(Error::Format(format!(
                "record '{name}': unknown flags {flags:#x}"
            )));
        }
        let spec = if flags & 1 != 0 {
            let domain = match take_u8(&mut buf)? {
                0 => Domain::Weight,
                1 => Domain::Activation,
                d => {
                    return Err(Error::Format(format!(
                        "record '{name}': unknown domain {d}"
                    )))
                }
            };
            Some(QuantizerSpec::read_from(&mut buf, domain)?)
        } else {
            None
        };
        let codebook = if flags & 2 != 0 {
            let frac_bits = take_u8(&mut buf)? as u32;
            let k = take_u32(&mut buf)? as usize;
            let raw = take_bytes(
                &mut buf,
                k.checked_mul(8)
                    .ok_or_else(|| Error::Format("size overflow".into()))?,
            )?;
            let levels = raw
                .chunks_exact(8)
                .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Some(FixedPointCodebook { levels, frac_bits })
        } else {
            None
        };
        records.push(Record {
            name,
            kind,
            dims,
            data,
            spec,
            codebook,
        });
    }
    if !buf.is_empty() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last record",
            buf.len()
        )));
    }
    Ok(records)
}

fn wq_code(q: WeightQuantizer) -> f64 {
    match q {
        WeightQuantizer::KQuantile => 0.0,
        WeightQuantizer::KMeans => 1.0,
        WeightQuantizer::Uniform => 2.0,
    }
}

fn dist_record(name: String, d: &DistModel) -> Record {
    let mut v = vec![d.kind().code() as f64, d.mu(), d.sigma(), d.clamp()];
    if let Some(g) = d.grid() {
        v.extend_from_slice(g);
    }
    let n = v.len();
    Record::real(name, kind::DIST, &[n], v)
}

fn dist_from(r: &Record) -> Result<DistModel> {
    let v = r.reals()?;
    if v.len() < 4 {
        return Err(Error::Format(format!(
            "record '{}': truncated distribution",
            r.name
        )));
    }
    let d = match DistKind::from_code(v[0] as u8)? {
        DistKind::Gaussian => DistModel::gaussian(v[1], v[2])?,
        DistKind::Empirical => DistModel::from_grid(v[4..].to_vec(), v[1], v[2])?,
    };
    d.with_clamp(v[3])
}

/// Serializes a model into container records.
pub fn to_records(m: &QuantModel) -> Result<Vec<Record>> {
    let is = m.net.input_shape();
    let mut meta = vec![
        m.bits_w as f64,
        m.bits_a as f64,
        wq_code(m.quantizer),
        m.dist_kind.code() as f64,
        match m.act_method {
            ActMethod::KQuantile => 0.0,
            ActMethod::Uniform => 1.0,
        },
    ];
    meta.extend(is.iter().map(|&v| v as f64));
    let n = meta.len();
    let mut out = vec![Record::real("meta", kind::META, &[n], meta)];
    let param =
        |name: String, t: &Tensor| Record::real(name, kind::PARAM, t.shape(), t.data().to_vec());
    for (l, layer) in m.net.layers.iter().enumerate() {
        let (code, hyper): (u8, Vec<f64>) = match layer {
            Layer::Conv2d(c) => (kind::CONV2D, vec![c.stride as f64, c.pad as f64]),
            Layer::Dense(_) => (kind::DENSE, vec![]),
            Layer::Relu => (kind::RELU, vec![]),
            Layer::MaxPool(p) => (kind::MAXPOOL, vec![p.size as f64, p.stride as f64]),
            Layer::AvgPool(p) => (kind::AVGPOOL, vec![p.size as f64, p.stride as f64]),
            Layer::BatchNorm(b) => (kind::BATCHNORM, vec![b.eps, b.momentum]),
        };
        let hn = hyper.len();
        out.push(Record::real(format!("l{l}"), code, &[hn], hyper));
        match layer {
            Layer::Conv2d(Conv2d { weight, bias, .. }) | Layer::Dense(Dense { weight, bias }) => {
                out.push(param(format!("l{l}.weight"), weight));
                out.push(param(format!("l{l}.bias"), bias));
            }
            Layer::BatchNorm(b) => {
                out.push(param(format!("l{l}.gamma"), &b.gamma));
                out.push(param(format!("l{l}.beta"), &b.beta));
                out.push(param(format!("l{l}.mean"), &b.running_mean));
                out.push(param(format!("l{l}.var"), &b.running_var));
            }
            _ => {}
        }
    }
    for q in &m.layers {
        let l = q.layer;
        let w = m.net.layers[l].weight().unwrap();
        let mut qs = Record {
            name: format!("l{l}.q"),
            kind: kind::QSTATE,
            dims: dims_of(&[1]),
            data: Payload::Real(vec![q.mode.code() as f64]),
            spec: None,
            codebook: None,
        };
        if q.mode == LayerMode::Frozen {
            let spec = q.spec.as_ref().ok_or_else(|| {
                Error::invalid("model", format!("frozen layer {l} lacks a quantizer"))
            })?;
            if spec.k() > 256 {
                return Err(Error::invalid("model", "index8 storage needs k <= 256"));
            }
            qs.dims = dims_of(w.shape());
            qs.data = Payload::Index(w.data().iter().map(|&v| spec.index_of(v) as u8).collect());
            qs.codebook = Some(qinfer::build_fixedpoint(spec, qinfer::DEFAULT_FRAC_BITS)?);
            qs.spec = Some(spec.clone());
        }
        out.push(qs);
        if let Some(d) = &q.dist {
            out.push(dist_record(format!("l{l}.dist"), d));
        }
        if let Some(b) = &q.bins {
            let mut r = match b {
                NoiseBins::Equal(k) => {
                    Record::real(format!("l{l}.bins"), kind::BINS, &[2], vec![0.0, *k as f64])
                }
                NoiseBins::Spec(_) => {
                    Record::real(format!("l{l}.bins"), kind::BINS, &[1], vec![1.0])
                }
            };
            if let NoiseBins::Spec(s) = b {
                r.spec = Some(s.clone());
            }
            out.push(r);
        }
        if let Some(s) = &q.shadow {
            out.push(param(format!("l{l}.shadow"), s));
        }
    }
    for (l, a) in &m.acts {
        let mut r = dist_record(format!("act{l}"), &a.calibration);
        r.kind = kind::ACT;
        r.spec = Some(a.spec.clone());
        out.push(r);
    }
    Ok(out)
}

fn take_param(
    it: &mut std::iter::Peekable<std::slice::Iter<'_, Record>>,
    name: &str,
) -> Result<Tensor> {
    match it.next() {
        Some(r) if r.name == name && r.kind == kind::PARAM => {
            Tensor::from_vec(&r.shape(), r.reals()?.to_vec())
        }
        _ => Err(Error::Format(format!("expected parameter record '{name}'"))),
    }
}

fn usize_of(v: f64, what: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v < 1e12 {
        Ok(v as usize)
    } else {
        Err(Error::Format(format!("{what} {v} is not a count")))
    }
}

/// Rebuilds a model from container records.
pub fn from_records(records: &[Record]) -> Result<QuantModel> {
    let mut it = records.iter().peekable();
    let meta = it
        .next()
        .filter(|r| r.kind == kind::META)
        .ok_or_else(|| Error::Format("missing meta record".into()))?;
    let mv = meta.reals()?;
    if mv.len() < 6 {
        return Err(Error::Format("truncated meta record".into()));
    }
    let quantizer = match mv[2] as u8 {
        0 => WeightQuantizer::KQuantile,
        1 => WeightQuantizer::KMeans,
        2 => WeightQuantizer::Uniform,
        c => return Err(Error::Format(format!("unknown quantizer code {c}"))),
    };
    let dist_kind = DistKind::from_code(mv[3] as u8)?;
    let act_method = if mv[4] == 0.0 {
        ActMethod::KQuantile
    } else {
        ActMethod::Uniform
    };
    let input: Vec<usize> = mv[5..]
        .iter()
        .map(|&v| usize_of(v, "input dim"))
        .collect::<Result<_>>()?;
    let mut layers = Vec::new();
    while let Some(r) = it.peek() {
        if !(kind::CONV2D..=kind::BATCHNORM).contains(&r.kind) {
            break;
        }
        let r = it.next().unwrap();
        let l = layers.len();
        let h = r.reals()?;
        let need = |n: usize| -> Result<()> {
            if h.len() != n {
                return Err(Error::Format(format!(
                    "layer record '{}' has {} hyperparameters, expected {n}",
                    r.name,
                    h.len()
                )));
            }
            Ok(())
        };
        let layer = match r.kind {
            kind::CONV2D => {
                need(2)?;
                Layer::Conv2d(Conv2d {
                    weight: take_param(&mut it, &format!("l{l}.weight"))?,
                    bias: take_param(&mut it, &format!("l{l}.bias"))?,
                    stride: usize_of(h[0], "stride")?,
                    pad: usize_of(h[1], "pad")?,
                })
            }
            kind::DENSE => Layer::Dense(Dense {
                weight: take_param(&mut it, &format!("l{l}.weight"))?,
                bias: take_param(&mut it, &format!("l{l}.bias"))?,
            }),
            kind::RELU => Layer::Relu,
            kind::MAXPOOL | kind::AVGPOOL => {
                need(2)?;
                let p = Pool {
                    size: usize_of(h[0], "pool size")?,
                    stride: usize_of(h[1], "pool stride")?,
                };
                if r.kind == kind::MAXPOOL {
                    Layer::MaxPool(p)
                } else {
                    Layer::AvgPool(p)
                }
            }
            _ => {
                need(2)?;
                Layer::BatchNorm(BatchNorm {
                    gamma: take_param(&mut it, &format!("l{l}.gamma"))?,
                    beta: take_param(&mut it, &format!("l{l}.beta"))?,
                    running_mean: take_param(&mut it, &format!("l{l}.mean"))?,
                    running_var: take_param(&mut it, &format!("l{l}.var"))?,
                    eps: h[0],
                    momentum: h[1],
                })
            }
        };
        layers.push(layer);
    }
    let net = Network::new(layers, &input)?;
    let bw = usize_of(mv[0], "bits_w")? as u32;
    let ba = usize_of(mv[1], "bits_a")? as u32;
    let mut m = QuantModel::new(net, bw, ba, quantizer, dist_kind)?;
    m.act_method = act_method;
    for j in 0..m.layers.len() {
        let l = m.layers[j].layer;
        let qs = it
            .next()
            .filter(|r| r.kind == kind::QSTATE && r.name == format!("l{l}.q"))
            .ok_or_else(|| Error::Format(format!("missing quantization record for layer {l}")))?;
        let mode = match &qs.data {
            Payload::Real(v) if v.len() == 1 => LayerMode::from_code(v[0] as u8)?,
            Payload::Index(idx) => {
                let spec = qs.spec.clone().ok_or_else(|| {
                    Error::Format(format!("frozen layer {l} lacks its quantizer"))
                })?;
                let w = m.net.layers[l].weight().unwrap();
                if idx.len() != w.len()
                    || idx
                        .iter()
                        .zip(w.data())
                        .any(|(&i, &v)| spec.levels().get(i as usize) != Some(&v))
                {
                    return Err(Error::Format(format!(
                        "layer {l}: stored indices disagree with stored weights"
                    )));
                }
                m.layers[j].spec = Some(spec);
                LayerMode::Frozen
            }
            _ => {
                return Err(Error::Format(format!(
                    "malformed quantization record for layer {l}"
                )))
            }
        };
        m.layers[j].mode = mode;
        if let Some(r) = it.next_if(|r| r.kind == kind::DIST && r.name == format!("l{l}.dist")) {
            m.layers[j].dist = Some(dist_from(r)?);
        }
        if let Some(r) = it.next_if(|r| r.kind == kind::BINS && r.name == format!("l{l}.bins")) {
            let v = r.reals()?;
            m.layers[j].bins = Some(match (v.first(), &r.spec) {
                (Some(&c), _) if c == 0.0 && v.len() == 2 => NoiseBins::Equal(usize_of(v[1], "k")?),
                (Some(&1.0), Some(s)) => NoiseBins::Spec(s.clone()),
                _ => {
                    return Err(Error::Format(format!(
                        "malformed noise record for layer {l}"
                    )))
                }
            });
        }
        if let Some(r) = it.next_if(|r| r.kind == kind::PARAM && r.name == format!("l{l}.shadow")) {
            m.layers[j].shadow = Some(Tensor::from_vec(&r.shape(), r.reals()?.to_vec())?);
        }
    }
    for r in it {
        if r.kind != kind::ACT {
            return Err(Error::Format(format!("unexpected record '{}'", r.name)));
        }
        let l: usize = r
            .name
            .strip_prefix("act")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad activation record name '{}'", r.name)))?;
        let spec = r.spec.clone().ok_or_else(|| {
            Error::Format(format!(
                "activation record '{}' lacks its quantizer",
                r.name
            ))
        })?;
        m.acts.insert(
            l,
            ActQuantizer {
                spec,
                calibration: dist_from(r)?,
            },
        );
    }
    Ok(m)
}

pub fn save(model: &QuantModel, path: &Path) -> Result<()> {
    fs::write(path, encode(&to_records(model)?)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<QuantModel> {
    let bytes = fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    from_records(&decode(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bad_magic_and_version() {
        assert!(matches!(
            decode(b"NOPE\x01\x00\x00\x00\x00\x00"),
            Err(Error::Format(_))
        ));
        let mut b = encode(&[]).unwrap();
        assert_eq!(&b[..4], MAGIC);
        b[4] = 9;
        let e = decode(&b).unwrap_err();
        assert!(e.to_string().contains("version 9"), "{e}");
    }

    #[test]
    fn record_round_trip() {
        let spec = QuantizerSpec::new(vec![0.0], vec![-1.0, 1.0], Domain::Activation).unwrap();
        let recs = vec![
            Record::real("a", 3, &[2, 3], (0..6).map(|v| v as f64 * 0.1).collect()),
            Record {
                name: "b".into(),
                kind: 17,
                dims: [4, 1, 1, 1],
                data: Payload::Index(vec![0, 1, 1, 0]),
                spec: Some(spec),
                codebook: Some(FixedPointCodebook {
                    levels: vec![-65536, 65536],
                    frac_bits: 16,
                }),
            },
        ];
        let bytes = encode(&recs).unwrap();
        assert_eq!(decode(&bytes).unwrap(), recs);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
    }
}
