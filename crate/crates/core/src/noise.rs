//! Training-time replacement of weight quantization by uniform noise in the
//! uniformized domain, and activation quantizers for frozen layers.

use std::collections::BTreeMap;
use std::sync::Mutex;

use rand::distr::{Distribution, Uniform};
use rand::Rng;

use crate::dist::{DistModel, DEFAULT_GRID_SIZE};
use crate::error::{Error, Result};
use crate::nn::{Network, RunOptions, Tensor};
use crate::par;
use crate::quant::{self, QuantizerSpec};

/// Elements per parallel work item for elementwise transforms.
const ELEM_CHUNK: usize = 4096;

/// Upper bound on activation values fed to a calibration fit.
pub const MAX_CALIBRATION_VALUES: usize = 1 << 18;

fn check_k(k: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::invalid("k", format!("need k >= 2, got {k}")));
    }
    Ok(())
}

/// One draw from `U[-1/2k, 1/2k]` (closed interval).
pub fn sample_noise<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Result<f64> {
    check_k(k)?;
    let h = 0.5 / k as f64;
    Ok(Uniform::new_inclusive(-h, h).unwrap().sample(rng))
}

/// `F⁻¹(clamp(F(w) + e, ε, 1-ε))`.
pub fn noisy_weight(dist: &DistModel, w: f64, e: f64) -> f64 {
    let eps = dist.clamp();
    dist.quantile_unchecked((dist.cdf(w) + e).clamp(eps, 1.0 - eps))
}

/// `dŵ/dw = f(w) / f(ŵ)`; zero wherever the clamp is active.
pub fn noisy_weight_grad(dist: &DistModel, w: f64, e: f64) -> f64 {
    let eps = dist.clamp();
    let u = dist.cdf(w);
    let v = u + e;
    if u <= eps || u >= 1.0 - eps || v <= eps || v >= 1.0 - eps {
        return 0.0;
    }
    let fw = dist.density(w);
    let fh = dist.density(dist.quantile_unchecked(v));
    if fh > 0.0 {
        fw / fh
    } else {
        0.0
    }
}

/// Result of a per-bin noise draw for one weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinDraw {
    /// Bin of `F(w)` in the uniformized domain; fixed for the backward pass.
    pub bin: usize,
    pub w_hat: f64,
    pub grad: f64,
}

fn bin_bounds(spec: &QuantizerSpec, i: usize) -> (f64, f64) {
    let t = spec.thresholds();
    let lo = if i == 0 { 0.0 } else { t[i - 1] };
    let hi = if i == spec.k() - 1 { 1.0 } else { t[i] };
    (lo, hi)
}

fn check_unit_spec(spec: &QuantizerSpec) -> Result<()> {
    if spec.thresholds().iter().any(|&t| !(t > 0.0 && t < 1.0)) {
        return Err(Error::invalid(
            "spec",
            "thresholds must lie in (0, 1) for a uniformized-domain spec",
        ));
    }
    Ok(())
}

/// Noise for arbitrary bins: `e ~ U[u_{i-1} - c_i, u_i - c_i]` for the bin `i`
/// holding `u = F(w)`, added to `u`. Equal bins reduce to [`noisy_weight`].
pub fn noisy_bin_weight<R: Rng + ?Sized>(
    spec: &QuantizerSpec,
    dist: &DistModel,
    w: f64,
    rng: &mut R,
) -> Result<BinDraw> {
    check_unit_spec(spec)?;
    let r: f64 = rng.random();
    Ok(bin_draw(spec, dist, w, r))
}

fn bin_draw(spec: &QuantizerSpec, dist: &DistModel, w: f64, r: f64) -> BinDraw {
    let u = dist.cdf(w);
    let bin = spec.index_of(u);
    let (lo, hi) = bin_bounds(spec, bin);
    let c = spec.levels()[bin];
    let e = (lo - c) + r * (hi - lo);
    BinDraw {
        bin,
        w_hat: noisy_weight(dist, w, e),
        grad: noisy_weight_grad(dist, w, e),
    }
}

/// How noise is shaped in the uniformized domain during training.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseBins {
    /// `k` equal bins (the k-quantile quantizer).
    Equal(usize),
    /// Bins of another quantizer, already translated to the uniformized domain.
    Spec(QuantizerSpec),
}

impl NoiseBins {
    pub fn k(&self) -> usize {
        match self {
            NoiseBins::Equal(k) => *k,
            NoiseBins::Spec(s) => s.k(),
        }
    }
}

/// Noisy copy of a whole weight tensor plus the elementwise `dŵ/dw`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyTensor {
    pub values: Vec<f64>,
    pub grads: Vec<f64>,
}

/// Draws one noise value per weight from `rng` (in order), then transforms in parallel.
pub fn noisy_tensor<R: Rng + ?Sized>(
    dist: &DistModel,
    bins: &NoiseBins,
    w: &[f64],
    rng: &mut R,
) -> Result<NoisyTensor> {
    let draws: Vec<f64> = match bins {
        NoiseBins::Equal(k) => {
            check_k(*k)?;
            let h = 0.5 / *k as f64;
            let d = Uniform::new_inclusive(-h, h).unwrap();
            (0..w.len()).map(|_| d.sample(rng)).collect()
        }
        NoiseBins::Spec(s) => {
            check_unit_spec(s)?;
            (0..w.len()).map(|_| rng.random::<f64>()).collect()
        }
    };
    let mut out: Vec<(f64, f64)> = vec![(0.0, 0.0); w.len()];
    par::for_each_chunk_mut(&mut out, ELEM_CHUNK, |ci, chunk| {
        let base = ci * ELEM_CHUNK;
        for (j, o) in chunk.iter_mut().enumerate() {
            let (x, r) = (w[base + j], draws[base + j]);
            *o = match bins {
                NoiseBins::Equal(_) => (noisy_weight(dist, x, r), noisy_weight_grad(dist, x, r)),
                NoiseBins::Spec(s) => {
                    let b = bin_draw(s, dist, x, r);
                    (b.w_hat, b.grad)
                }
            };
        }
    });
    let (values, grads) = out.into_iter().unzip();
    Ok(NoisyTensor { values, grads })
}

/// Quantizes every element of `data` in place.
pub fn quantize_in_place(spec: &QuantizerSpec, data: &mut [f64]) {
    par::for_each_chunk_mut(data, ELEM_CHUNK, |_, chunk| {
        for v in chunk {
            *v = spec.quantize(*v);
        }
    });
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ActMethod {
    /// k-quantile quantizer on the empirical activation distribution.
    #[default]
    KQuantile,
    /// Equal-width bins over the observed activation range.
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActQuantizer {
    pub spec: QuantizerSpec,
    pub calibration: DistModel,
}

/// Every `stride`-th value, enough to keep at most [`MAX_CALIBRATION_VALUES`].
fn subsample(values: &[f64]) -> Vec<f64> {
    let stride = values.len().div_ceil(MAX_CALIBRATION_VALUES).max(1);
    values.iter().step_by(stride).copied().collect()
}

/// Fits an activation quantizer with `k` levels to recorded activation values.
pub fn calibrate_activation(values: &[f64], k: usize, method: ActMethod) -> Result<ActQuantizer> {
    check_k(k)?;
    let v = subsample(values);
    let grid = DEFAULT_GRID_SIZE.max(4 * k);
    if v.len() < grid {
        return Err(Error::Degenerate(format!(
            "{} activation values are too few to calibrate {k} levels",
            v.len()
        )));
    }
    if v.iter().all(|&x| x == v[0]) {
        return Err(Error::Degenerate(
            "activations are constant; nothing to calibrate".into(),
        ));
    }
    let calibration = DistModel::fit_empirical(&v, grid)?;
    let spec = match method {
        ActMethod::KQuantile => quant::build_kquantile(&calibration, k)?,
        ActMethod::Uniform => {
            let g = calibration.grid().unwrap();
            let (lo, hi) = (g[0], g[g.len() - 1]);
            let d = (hi - lo) / k as f64;
            QuantizerSpec::new(
                (1..k).map(|i| lo + i as f64 * d).collect(),
                (0..k).map(|i| lo + (i as f64 + 0.5) * d).collect(),
                quant::Domain::Activation,
            )?
        }
    };
    Ok(ActQuantizer {
        spec: spec.with_domain(quant::Domain::Activation),
        calibration,
    })
}

/// Activation quantizers keyed by the index of the layer whose input they quantize.
pub type ActMap = BTreeMap<usize, ActQuantizer>;

/// Input hook that quantizes the input of every layer present in `acts`.
pub fn act_hook(acts: &ActMap) -> impl Fn(usize, &mut Tensor) + Sync + '_ {
    move |l, t| {
        if let Some(a) = acts.get(&l) {
            quantize_in_place(&a.spec, t.data_mut());
        }
    }
}

/// Calibrates the inputs of `targets` on `x` in one forward pass. Quantizers
/// already in `acts`, and those fitted at earlier targets, are active while
/// later targets are recorded.
pub fn calibrate_network(
    net: &Network,
    x: &Tensor,
    targets: &[usize],
    k: usize,
    method: ActMethod,
    base: &RunOptions,
    acts: &mut ActMap,
) -> Result<()> {
    if let Some(&t) = targets.iter().find(|&&t| t >= net.layers.len()) {
        return Err(Error::invalid("targets", format!("layer {t} out of range")));
    }
    let state = Mutex::new((std::mem::take(acts), None::<Error>));
    let hook = |l: usize, t: &mut Tensor| {
        let mut guard = state.lock().unwrap();
        let (map, err) = &mut *guard;
        if err.is_some() {
            return;
        }
        if targets.contains(&l) {
            match calibrate_activation(t.data(), k, method) {
                Ok(q) => {
                    map.insert(l, q);
                }
                Err(e) => {
                    *err = Some(Error::Degenerate(format!(
                        "activation calibration for layer {l}: {e}"
                    )));
                    return;
                }
            }
        }
        if let Some(a) = map.get(&l) {
            quantize_in_place(&a.spec, t.data_mut());
        }
    };
    let opts = RunOptions {
        input_hook: Some(&hook),
        ..*base
    };
    let run = net.infer(x, &opts);
    let (map, err) = state.into_inner().unwrap();
    *acts = map;
    if let Some(e) = err {
        return Err(e);
    }
    run.map(|_| ())
}
