use super::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::par;

/// Samples per parallel work item. Fixed so reductions do not depend on thread count.
pub const SAMPLE_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `(m, n, k, k)`: output channels, input channels, kernel.
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `(out, in)`.
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pool {
    pub size: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    Dense(Dense),
    Relu,
    MaxPool(Pool),
    AvgPool(Pool),
    BatchNorm(BatchNorm),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d,
    Dense,
    Relu,
    MaxPool,
    AvgPool,
    BatchNorm,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv2d => "conv2d",
            LayerKind::Dense => "dense",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool => "maxpool",
            LayerKind::AvgPool => "avgpool",
            LayerKind::BatchNorm => "batchnorm",
        }
    }
}

impl Conv2d {
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }
    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }
    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel();
        if h + 2 * self.pad < k || w + 2 * self.pad < k || self.stride == 0 {
            return Err(Error::Shape(format!("conv {k}x{k} does not fit {h}x{w}")));
        }
        Ok((
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        ))
    }
}

impl Dense {
    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }
    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }
}

impl Pool {
    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h < self.size || w < self.size || self.stride == 0 || self.size == 0 {
            return Err(Error::Shape(format!(
                "pool {} does not fit {h}x{w}",
                self.size
            )));
        }
        Ok((
            (h - self.size) / self.stride + 1,
            (w - self.size) / self.stride + 1,
        ))
    }
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::from_vec(&[channels], vec![1.0; channels]).unwrap(),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::from_vec(&[channels], vec![1.0; channels]).unwrap(),
            eps: 1e-5,
            momentum: 0.1,
        }
    }
    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv2d(_) => LayerKind::Conv2d,
            Layer::Dense(_) => LayerKind::Dense,
            Layer::Relu => LayerKind::Relu,
            Layer::MaxPool(_) => LayerKind::MaxPool,
            Layer::AvgPool(_) => LayerKind::AvgPool,
            Layer::BatchNorm(_) => LayerKind::BatchNorm,
        }
    }

    /// Conv and dense layers: the ones that carry quantizable weights.
    pub fn is_mac(&self) -> bool {
        matches!(self, Layer::Conv2d(_) | Layer::Dense(_))
    }

    /// `(weight, bias)` or `(gamma, beta)`.
    pub fn params(&self) -> Option<(&Tensor, &Tensor)> {
        match self {
            Layer::Conv2d(c) => Some((&c.weight, &c.bias)),
            Layer::Dense(d) => Some((&d.weight, &d.bias)),
            Layer::BatchNorm(b) => Some((&b.gamma, &b.beta)),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<(&mut Tensor, &mut Tensor)> {
        match self {
            Layer::Conv2d(c) => Some((&mut c.weight, &mut c.bias)),
            Layer::Dense(d) => Some((&mut d.weight, &mut d.bias)),
            Layer::BatchNorm(b) => Some((&mut b.gamma, &mut b.beta)),
            _ => None,
        }
    }

    pub fn weight(&self) -> Option<&Tensor> {
        match self {
            Layer::Conv2d(c) => Some(&c.weight),
            Layer::Dense(d) => Some(&d.weight),
            _ => None,
        }
    }

    /// Output shape for a given input shape (batch axis included).
    pub fn out_shape(&self, s: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Conv2d(c) => conv_shape(c, s),
            Layer::Dense(d) => dense_shape(d, s),
            Layer::Relu => Ok(s.to_vec()),
            Layer::MaxPool(p) | Layer::AvgPool(p) => pool_shape(p, s),
            Layer::BatchNorm(b) => bn_shape(b, s),
        }
    }
}

fn need4(what: &str, s: &[usize]) -> Result<()> {
    if s.len() != 4 {
        return Err(Error::Shape(format!(
            "{what} expects (N, C, H, W), got {s:?}"
        )));
    }
    Ok(())
}

fn conv_shape(c: &Conv2d, s: &[usize]) -> Result<Vec<usize>> {
    need4("conv2d", s)?;
    if s[1] != c.in_channels() {
        return Err(Error::Shape(format!(
            "conv2d expects {} input channels, got {}",
            c.in_channels(),
            s[1]
        )));
    }
    let (oh, ow) = c.out_hw(s[2], s[3])?;
    Ok(vec![s[0], c.out_channels(), oh, ow])
}

fn dense_shape(d: &Dense, s: &[usize]) -> Result<Vec<usize>> {
    let per: usize = s[1..].iter().product();
    if per != d.in_features() {
        return Err(Error::Shape(format!(
            "dense expects {} inputs, got {per}",
            d.in_features()
        )));
    }
    Ok(vec![s[0], d.out_features()])
}

fn pool_shape(p: &Pool, s: &[usize]) -> Result<Vec<usize>> {
    need4("pooling", s)?;
    let (oh, ow) = p.out_hw(s[2], s[3])?;
    Ok(vec![s[0], s[1], oh, ow])
}

fn bn_shape(b: &BatchNorm, s: &[usize]) -> Result<Vec<usize>> {
    if s.len() < 2 || s[1] != b.channels() {
        return Err(Error::Shape(format!(
            "batchnorm expects {} channels, got {s:?}",
            b.channels()
        )));
    }
    Ok(s.to_vec())
}

/// Per-layer forward state kept for the backward pass.
#[derive(Debug, Clone)]
pub enum Cache {
    None,
    ArgMax(Vec<u32>),
    Bn {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_mean: Vec<f64>,
        batch_var: Vec<f64>,
        train: bool,
    },
}

fn sample_chunks(n: usize) -> Vec<std::ops::Range<usize>> {
    par::ranges(n, SAMPLE_CHUNK)
}

// ---------------------------------------------------------------- conv

#[derive(Clone, Copy)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

/// Patch matrix `(n·k·k, oh·ow)` of one sample.
fn im2col(x: &[f64], g: Geom, cols: &mut [f64]) {
    let Geom {
        c,
        h,
        w,
        k,
        stride,
        pad,
        oh,
        ow,
    } = g;
    let p = oh * ow;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((ch * k + ki) * k + kj) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: Geom, dx: &mut [f64]) {
    let Geom {
        c,
        h,
        w,
        k,
        stride,
        pad,
        oh,
        ow,
    } = g;
    let p = oh * ow;
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((ch * k + ki) * k + kj) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv_forward(c: &Conv2d, weight: &Tensor, x: &Tensor) -> Result<Tensor> {
    let os = conv_shape(c, x.shape())?;
    let s = x.shape();
    let (n_in, h, w) = (s[1], s[2], s[3]);
    let (m, k, oh, ow) = (os[1], c.kernel(), os[2], os[3]);
    let p = oh * ow;
    let nkk = n_in * k * k;
    let mut out = Tensor::zeros(&os);
    let out_len = m * p;
    let g = Geom {
        c: n_in,
        h,
        w,
        k,
        stride: c.stride,
        pad: c.pad,
        oh,
        ow,
    };
    let wd = weight.data();
    let bias = c.bias.data();
    par::for_each_chunk_mut(out.data_mut(), SAMPLE_CHUNK * out_len, |ci, chunk| {
        let mut cols = vec![0.0; nkk * p];
        for (j, y) in chunk.chunks_mut(out_len).enumerate() {
            let sidx = ci * SAMPLE_CHUNK + j;
            im2col(x.sample(sidx), g, &mut cols);
            for (o, row) in y.chunks_mut(p).enumerate() {
                row.fill(bias[o]);
            }
            gemm::nn(wd, &cols, y, m, nkk, p);
        }
    });
    Ok(out)
}

/// Returns `(dx, dW, db)`.
pub fn conv_backward(
    c: &Conv2d,
    weight: &Tensor,
    x: &Tensor,
    dy: &Tensor,
    want_dx: bool,
) -> (Option<Tensor>, Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let (n_in, h, w) = (s[1], s[2], s[3]);
    let ds = dy.shape();
    let (m, oh, ow) = (ds[1], ds[2], ds[3]);
    let k = c.kernel();
    let p = oh * ow;
    let nkk = n_in * k * k;
    let in_len = n_in * h * w;
    let geom = Geom {
        c: n_in,
        h,
        w,
        k,
        stride: c.stride,
        pad: c.pad,
        oh,
        ow,
    };
    let wd = weight.data();
    let parts = par::map_range(sample_chunks(x.batch()).len(), |ci| {
        let lo = ci * SAMPLE_CHUNK;
        let hi = (lo + SAMPLE_CHUNK).min(x.batch());
        let mut cols = vec![0.0; nkk * p];
        let mut dcols = vec![0.0; nkk * p];
        let mut dw = vec![0.0; m * nkk];
        let mut db = vec![0.0; m];
        let mut dx = if want_dx {
            vec![0.0; (hi - lo) * in_len]
        } else {
            Vec::new()
        };
        for sidx in lo..hi {
            let g = dy.sample(sidx);
            im2col(x.sample(sidx), geom, &mut cols);
            gemm::nt(g, &cols, &mut dw, m, p, nkk);
            for (o, row) in g.chunks(p).enumerate() {
                db[o] += row.iter().sum::<f64>();
            }
            if want_dx {
                dcols.fill(0.0);
                gemm::tn(wd, g, &mut dcols, nkk, m, p);
                let off = (sidx - lo) * in_len;
                col2im(&dcols, geom, &mut dx[off..off + in_len]);
            }
        }
        (dx, dw, db)
    });
    let mut dw = vec![0.0; m * nkk];
    let mut db = vec![0.0; m];
    let mut dx = Vec::with_capacity(if want_dx { x.len() } else { 0 });
    for (pdx, pdw, pdb) in parts {
        dw.iter_mut().zip(&pdw).for_each(|(a, b)| *a += b);
        db.iter_mut().zip(&pdb).for_each(|(a, b)| *a += b);
        dx.extend_from_slice(&pdx);
    }
    let dx = want_dx.then(|| Tensor::from_vec(x.shape(), dx).unwrap());
    (dx, dw, db)
}

// ---------------------------------------------------------------- dense

pub fn dense_forward(d: &Dense, weight: &Tensor, x: &Tensor) -> Result<Tensor> {
    let os = dense_shape(d, x.shape())?;
    let (o, i) = (d.out_features(), d.in_features());
    let mut out = Tensor::zeros(&os);
    let wd = weight.data();
    let bias = d.bias.data();
    par::for_each_chunk_mut(out.data_mut(), SAMPLE_CHUNK * o, |ci, chunk| {
        let lo = ci * SAMPLE_CHUNK;
        for (j, y) in chunk.chunks_mut(o).enumerate() {
            y.copy_from_slice(bias);
            gemm::nt(x.sample(lo + j), wd, y, 1, i, o);
        }
    });
    Ok(out)
}

pub fn dense_backward(
    d: &Dense,
    weight: &Tensor,
    x: &Tensor,
    dy: &Tensor,
    want_dx: bool,
) -> (Option<Tensor>, Vec<f64>, Vec<f64>) {
    let (o, i) = (d.out_features(), d.in_features());
    let n = x.batch();
    let mut dw = vec![0.0; o * i];
    let mut db = vec![0.0; o];
    // dW = dYᵀ X over the batch; chunked so partial sums are order-fixed.
    let parts = par::map_range(sample_chunks(n).len(), |ci| {
        let lo = ci * SAMPLE_CHUNK;
        let hi = (lo + SAMPLE_CHUNK).min(n);
        let mut pw = vec![0.0; o * i];
        let mut pb = vec![0.0; o];
        gemm::tn(
            &dy.data()[lo * o..hi * o],
            &x.data()[lo * i..hi * i],
            &mut pw,
            o,
            hi - lo,
            i,
        );
        for s in lo..hi {
            pb.iter_mut().zip(dy.sample(s)).for_each(|(a, b)| *a += b);
        }
        (pw, pb)
    });
    for (pw, pb) in parts {
        dw.iter_mut().zip(&pw).for_each(|(a, b)| *a += b);
        db.iter_mut().zip(&pb).for_each(|(a, b)| *a += b);
    }
    let dx = want_dx.then(|| {
        let mut dx = Tensor::zeros(x.shape());
        par::for_each_chunk_mut(dx.data_mut(), SAMPLE_CHUNK * i, |ci, chunk| {
            let lo = ci * SAMPLE_CHUNK;
            let rows = chunk.len() / i;
            gemm::nn(
                &dy.data()[lo * o..(lo + rows) * o],
                weight.data(),
                chunk,
                rows,
                o,
                i,
            );
        });
        dx
    });
    (dx, dw, db)
}

// ---------------------------------------------------------------- relu

pub fn relu_forward(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    dx.data_mut().iter_mut().zip(x.data()).for_each(|(g, &v)| {
        if v <= 0.0 {
            *g = 0.0
        }
    });
    dx
}

// ---------------------------------------------------------------- pooling

pub fn maxpool_forward(p: &Pool, x: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let os = pool_shape(p, x.shape())?;
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    let (oh, ow) = (os[2], os[3]);
    let mut out = Tensor::zeros(&os);
    let mut arg = vec![0u32; out.len()];
    let planes = s[0] * s[1];
    for pl in 0..planes {
        let src = &x.data()[pl * h * w..(pl + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut bi = 0usize;
                for dy in 0..p.size {
                    for dx in 0..p.size {
                        let idx = (oy * p.stride + dy) * w + ox * p.stride + dx;
                        if src[idx] > best {
                            best = src[idx];
                            bi = idx;
                        }
                    }
                }
                let o = pl * oh * ow + oy * ow + ox;
                out.data_mut()[o] = best;
                arg[o] = bi as u32;
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool_backward(x: &Tensor, arg: &[u32], dy: &Tensor) -> Tensor {
    let s = x.shape();
    let hw = s[2] * s[3];
    let ohw = dy.shape()[2] * dy.shape()[3];
    let mut dx = Tensor::zeros(s);
    for (o, &g) in dy.data().iter().enumerate() {
        let pl = o / ohw;
        dx.data_mut()[pl * hw + arg[o] as usize] += g;
    }
    dx
}

pub fn avgpool_forward(p: &Pool, x: &Tensor) -> Result<Tensor> {
    let os = pool_shape(p, x.shape())?;
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    let (oh, ow) = (os[2], os[3]);
    let scale = 1.0 / (p.size * p.size) as f64;
    let mut out = Tensor::zeros(&os);
    for pl in 0..s[0] * s[1] {
        let src = &x.data()[pl * h * w..(pl + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..p.size {
                    let row = (oy * p.stride + dy) * w + ox * p.stride;
                    acc += src[row..row + p.size].iter().sum::<f64>();
                }
                out.data_mut()[pl * oh * ow + oy * ow + ox] = acc * scale;
            }
        }
    }
    Ok(out)
}

pub fn avgpool_backward(p: &Pool, x: &Tensor, dy: &Tensor) -> Tensor {
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    let (oh, ow) = (dy.shape()[2], dy.shape()[3]);
    let scale = 1.0 / (p.size * p.size) as f64;
    let mut dx = Tensor::zeros(s);
    for pl in 0..s[0] * s[1] {
        let dst = &mut dx.data_mut()[pl * h * w..(pl + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dy.data()[pl * oh * ow + oy * ow + ox] * scale;
                for ddy in 0..p.size {
                    let row = (oy * p.stride + ddy) * w + ox * p.stride;
                    dst[row..row + p.size].iter_mut().for_each(|v| *v += g);
                }
            }
        }
    }
    dx
}

// ---------------------------------------------------------------- batchnorm

/// Channel axis is 1; statistics are taken over batch and spatial axes.
pub fn bn_forward(b: &BatchNorm, x: &Tensor, train: bool) -> Result<(Tensor, Cache)> {
    bn_shape(b, x.shape())?;
    let s = x.shape();
    let (n, c) = (s[0], s[1]);
    let sp: usize = s[2..].iter().product();
    let count = (n * sp) as f64;
    let (mean, var) = if train {
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut acc = 0.0;
            for i in 0..n {
                acc += x.data()[(i * c + ch) * sp..][..sp].iter().sum::<f64>();
            }
            mean[ch] = acc / count;
            let mut v = 0.0;
            for i in 0..n {
                v += x.data()[(i * c + ch) * sp..][..sp]
                    .iter()
                    .map(|t| (t - mean[ch]).powi(2))
                    .sum::<f64>();
            }
            var[ch] = v / count;
        }
        (mean, var)
    } else {
        (
            b.running_mean.data().to_vec(),
            b.running_var.data().to_vec(),
        )
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + b.eps).sqrt()).collect();
    let mut y = Tensor::zeros(s);
    let mut xhat = vec![0.0; x.len()];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * sp;
            for t in 0..sp {
                let xh = (x.data()[off + t] - mean[ch]) * inv_std[ch];
                xhat[off + t] = xh;
                y.data_mut()[off + t] = b.gamma.data()[ch] * xh + b.beta.data()[ch];
            }
        }
    }
    Ok((
        y,
        Cache::Bn {
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var: var,
            train,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn bn_backward(b: &BatchNorm, cache: &Cache, dy: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
    let Cache::Bn {
        xhat,
        inv_std,
        train,
        ..
    } = cache
    else {
        unreachable!("batchnorm cache missing");
    };
    let s = dy.shape();
    let (n, c) = (s[0], s[1]);
    let sp: usize = s[2..].iter().product();
    let count = (n * sp) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * sp;
            for t in 0..sp {
                dgamma[ch] += dy.data()[off + t] * xhat[off + t];
                dbeta[ch] += dy.data()[off + t];
            }
        }
    }
    let mut dx = Tensor::zeros(s);
    for i in 0..n {
        for ch in 0..c {
            let g = b.gamma.data()[ch];
            let off = (i * c + ch) * sp;
            for t in 0..sp {
                let dxhat = dy.data()[off + t] * g;
                dx.data_mut()[off + t] = if *train {
                    // dgamma/dbeta already hold Σdy·xhat and Σdy for this channel.
                    inv_std[ch] / count
                        * (count * dxhat - g * dbeta[ch] - xhat[off + t] * g * dgamma[ch])
                } else {
                    dxhat * inv_std[ch]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}
