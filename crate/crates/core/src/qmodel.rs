//! A network together with per-layer quantization state.

use std::ops::Range;

use crate::dist::{DistKind, DistModel, DEFAULT_GRID_SIZE};
use crate::error::{Error, Result};
use crate::nn::{BnMode, Layer, Network, RunOptions, Tensor};
use crate::noise::{self, ActMap, ActMethod, NoiseBins};
use crate::quant::{self, LloydMaxOptions, QuantizerSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightQuantizer {
    #[default]
    KQuantile,
    KMeans,
    Uniform,
}

impl WeightQuantizer {
    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "kquantile" => Ok(WeightQuantizer::KQuantile),
            "kmeans" => Ok(WeightQuantizer::KMeans),
            "uniform" => Ok(WeightQuantizer::Uniform),
            _ => Err(Error::invalid(
                "quantizer",
                format!("unknown quantizer '{s}' (kquantile, kmeans, uniform)"),
            )),
        }
    }
    pub fn name(self) -> &'static str {
        match self {
            WeightQuantizer::KQuantile => "kquantile",
            WeightQuantizer::KMeans => "kmeans",
            WeightQuantizer::Uniform => "uniform",
        }
    }
}

/// Range, in multiples of σ, covered by the uniform weight quantizer.
pub const UNIFORM_RANGE_SIGMAS: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LayerMode {
    #[default]
    Untouched,
    Noisy,
    Frozen,
}

impl LayerMode {
    pub fn code(self) -> u8 {
        match self {
            LayerMode::Untouched => 0,
            LayerMode::Noisy => 1,
            LayerMode::Frozen => 2,
        }
    }
    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(LayerMode::Untouched),
            1 => Ok(LayerMode::Noisy),
            2 => Ok(LayerMode::Frozen),
            _ => Err(Error::Format(format!("unknown layer mode code {c}"))),
        }
    }
}

/// Quantization state of one conv/dense layer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QuantLayer {
    /// Index into `Network::layers`.
    pub layer: usize,
    pub mode: LayerMode,
    pub dist: Option<DistModel>,
    /// Real-domain quantizer used when frozen.
    pub spec: Option<QuantizerSpec>,
    /// Noise shape while noisy.
    pub bins: Option<NoiseBins>,
    /// Full-precision weights kept while frozen.
    pub shadow: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantModel {
    pub net: Network,
    /// One entry per conv/dense layer, in network order.
    pub layers: Vec<QuantLayer>,
    pub acts: ActMap,
    pub bits_w: u32,
    pub bits_a: u32,
    pub quantizer: WeightQuantizer,
    pub dist_kind: DistKind,
    pub act_method: ActMethod,
}

fn levels_for(bits: u32) -> Result<usize> {
    if !(1..=8).contains(&bits) {
        return Err(Error::invalid(
            "bits",
            format!("bitwidth must be in 1..=8 for quantized layers, got {bits}"),
        ));
    }
    Ok(1usize << bits)
}

impl QuantModel {
    pub fn new(
        net: Network,
        bits_w: u32,
        bits_a: u32,
        quantizer: WeightQuantizer,
        dist_kind: DistKind,
    ) -> Result<Self> {
        levels_for(bits_w)
            .map_err(|_| Error::invalid("bits_w", format!("must be in 1..=8, got {bits_w}")))?;
        levels_for(bits_a)
            .map_err(|_| Error::invalid("bits_a", format!("must be in 1..=8, got {bits_a}")))?;
        let layers = net
            .mac_layers()
            .into_iter()
            .map(|layer| QuantLayer {
                layer,
                ..Default::default()
            })
            .collect();
        Ok(QuantModel {
            net,
            layers,
            acts: ActMap::new(),
            bits_w,
            bits_a,
            quantizer,
            dist_kind,
            act_method: ActMethod::KQuantile,
        })
    }

    pub fn k_w(&self) -> usize {
        1 << self.bits_w
    }
    pub fn k_a(&self) -> usize {
        1 << self.bits_a
    }
    pub fn mac_count(&self) -> usize {
        self.layers.len()
    }

    /// Network layers owned by conv/dense layer `j`: itself up to the next
    /// conv/dense (batch norm, relu, pooling in between). Layer 0 also owns
    /// anything before the first conv/dense.
    pub fn group(&self, j: usize) -> Range<usize> {
        let start = if j == 0 { 0 } else { self.layers[j].layer };
        let end = self
            .layers
            .get(j + 1)
            .map_or(self.net.layers.len(), |q| q.layer);
        start..end
    }

    /// Conv/dense index owning network layer `l`.
    pub fn owner(&self, l: usize) -> usize {
        self.layers
            .partition_point(|q| q.layer <= l)
            .saturating_sub(1)
    }

    pub fn is_frozen_layer(&self, l: usize) -> bool {
        !self.layers.is_empty() && self.layers[self.owner(l)].mode == LayerMode::Frozen
    }

    fn weights(&self, j: usize) -> &Tensor {
        self.net.layers[self.layers[j].layer].weight().unwrap()
    }

    fn fit_dist(&self, w: &[f64]) -> Result<DistModel> {
        match self.dist_kind {
            DistKind::Gaussian => DistModel::fit_gaussian(w),
            DistKind::Empirical => DistModel::fit_empirical(w, DEFAULT_GRID_SIZE.min(w.len())),
        }
    }

    /// Real-domain quantizer for the current weights of layer `j` under `dist`.
    fn real_spec(&self, w: &[f64], dist: &DistModel) -> Result<QuantizerSpec> {
        let k = self.k_w();
        match self.quantizer {
            WeightQuantizer::KQuantile => quant::build_kquantile(dist, k),
            WeightQuantizer::KMeans => Ok(quant::lloyd_max(w, k, LloydMaxOptions::default())?.spec),
            WeightQuantizer::Uniform => quant::build_uniform(dist.sigma(), UNIFORM_RANGE_SIGMAS, k),
        }
    }

    /// Fits the distribution of layer `j` and puts it into noisy mode.
    pub fn make_noisy(&mut self, j: usize) -> Result<()> {
        if self.layers[j].mode == LayerMode::Frozen {
            return Err(Error::invalid("layer", format!("layer {j} is frozen")));
        }
        let w = self.weights(j).data().to_vec();
        let dist = self.fit_dist(&w).map_err(|e| annotate(j, e))?;
        let bins = match self.quantizer {
            WeightQuantizer::KQuantile => NoiseBins::Equal(self.k_w()),
            _ => NoiseBins::Spec(
                quant::to_uniform_domain(&self.real_spec(&w, &dist)?, &dist)
                    .map_err(|e| annotate(j, e))?,
            ),
        };
        let q = &mut self.layers[j];
        q.mode = LayerMode::Noisy;
        q.dist = Some(dist);
        q.bins = Some(bins);
        Ok(())
    }

    /// Refits, quantizes and freezes layer `j`, keeping its full-precision shadow.
    pub fn freeze(&mut self, j: usize) -> Result<()> {
        if self.layers[j].mode == LayerMode::Frozen {
            return Ok(());
        }
        let w = self.weights(j).clone();
        let dist = self.fit_dist(w.data()).map_err(|e| annotate(j, e))?;
        let spec = self
            .real_spec(w.data(), &dist)
            .map_err(|e| annotate(j, e))?;
        let mut qw = w.clone();
        noise::quantize_in_place(&spec, qw.data_mut());
        let l = self.layers[j].layer;
        match &mut self.net.layers[l] {
            Layer::Conv2d(c) => c.weight = qw,
            Layer::Dense(d) => d.weight = qw,
            _ => unreachable!("quantized layer is not conv/dense"),
        }
        let q = &mut self.layers[j];
        q.mode = LayerMode::Frozen;
        q.dist = Some(dist);
        q.spec = Some(spec);
        q.bins = None;
        q.shadow = Some(w);
        Ok(())
    }

    /// Restores every frozen layer to its shadow weights and drops activation quantizers.
    pub fn unfreeze_all(&mut self) {
        for j in 0..self.layers.len() {
            if let Some(w) = self.layers[j].shadow.take() {
                let l = self.layers[j].layer;
                match &mut self.net.layers[l] {
                    Layer::Conv2d(c) => c.weight = w,
                    Layer::Dense(d) => d.weight = w,
                    _ => unreachable!(),
                }
            }
            let q = &mut self.layers[j];
            q.mode = LayerMode::Untouched;
            q.spec = None;
            q.bins = None;
            q.dist = None;
        }
        self.acts.clear();
    }

    /// Network layers whose inputs are quantized once conv/dense `j` is frozen:
    /// the network input for `j = 0`, and the input of the next conv/dense.
    pub fn act_points_for(&self, j: usize) -> Vec<usize> {
        let mut v = Vec::new();
        if j == 0 {
            v.push(self.layers[0].layer);
        }
        if let Some(next) = self.layers.get(j + 1) {
            v.push(next.layer);
        }
        v
    }

    /// Points that should be quantized given the current frozen set but are not yet calibrated.
    pub fn pending_act_points(&self) -> Vec<usize> {
        let mut pts: Vec<usize> = (0..self.layers.len())
            .filter(|&j| self.layers[j].mode == LayerMode::Frozen)
            .flat_map(|j| self.act_points_for(j))
            .filter(|l| !self.acts.contains_key(l))
            .collect();
        pts.sort_unstable();
        pts.dedup();
        pts
    }

    /// Calibrates every pending activation point on `x`.
    pub fn calibrate_pending(&mut self, x: &Tensor, bn: BnMode) -> Result<()> {
        let pts = self.pending_act_points();
        if pts.is_empty() {
            return Ok(());
        }
        let base = RunOptions {
            bn,
            ..Default::default()
        };
        let (k, m) = (self.k_a(), self.act_method);
        noise::calibrate_network(&self.net, x, &pts, k, m, &base, &mut self.acts)
    }

    /// Freezes every layer and calibrates every activation point.
    pub fn finalize(&mut self, calib: &Tensor, bn: BnMode) -> Result<()> {
        for j in 0..self.layers.len() {
            self.freeze(j)?;
        }
        self.calibrate_pending(calib, bn)
    }

    pub fn is_fully_quantized(&self) -> bool {
        self.layers.iter().all(|q| q.mode == LayerMode::Frozen)
            && self.layers.iter().all(|q| self.acts.contains_key(&q.layer))
    }

    /// Forward pass of the model as deployed: frozen weights, quantized activations,
    /// clean weights elsewhere, batch norm in inference mode.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let hook = noise::act_hook(&self.acts);
        let opts = RunOptions {
            bn: BnMode::Inference,
            weights: None,
            input_hook: Some(&hook),
        };
        self.net.infer(x, &opts)
    }
}

fn annotate(j: usize, e: Error) -> Error {
    match e {
        Error::Degenerate(m) => Error::Degenerate(format!("layer {j}: {m}")),
        other => other,
    }
}

/// Fraction of correct argmax predictions, evaluated in chunks of 500.
pub fn accuracy(
    f: impl Fn(&Tensor) -> Result<Tensor>,
    images: &Tensor,
    labels: &[usize],
) -> Result<f64> {
    if images.batch() != labels.len() || labels.is_empty() {
        return Err(Error::Shape("images and labels differ in count".into()));
    }
    let mut correct = 0usize;
    for start in (0..labels.len()).step_by(500) {
        let idx: Vec<usize> = (start..(start + 500).min(labels.len())).collect();
        let out = f(&images.gather(&idx))?;
        correct += out
            .argmax_rows()
            .iter()
            .zip(&idx)
            .filter(|(p, &i)| **p == labels[i])
            .count();
    }
    Ok(correct as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{self, Arch};

    fn model() -> QuantModel {
        let net = models::build(Arch::LenetIsh, &[1, 28, 28], 10, 3).unwrap();
        QuantModel::new(net, 4, 8, WeightQuantizer::KQuantile, DistKind::Gaussian).unwrap()
    }

    #[test]
    fn groups_partition_layers() {
        let m = model();
        let all: Vec<usize> = (0..m.mac_count()).flat_map(|j| m.group(j)).collect();
        assert_eq!(all, (0..m.net.layers.len()).collect::<Vec<_>>());
        for l in 0..m.net.layers.len() {
            assert!(m.group(m.owner(l)).contains(&l));
        }
    }

    #[test]
    fn freeze_quantizes_with_kquantile_spec_and_unfreeze_restores() {
        let mut m = model();
        let orig = m.net.clone();
        m.freeze(1).unwrap();
        let l = m.layers[1].layer;
        let shadow = m.layers[1].shadow.clone().unwrap();
        let dist = DistModel::fit_gaussian(shadow.data()).unwrap();
        let spec = quant::build_kquantile(&dist, 16).unwrap();
        let got = m.net.layers[l].weight().unwrap();
        for (q, w) in got.data().iter().zip(shadow.data()) {
            assert_eq!(*q, spec.apply(*w).unwrap());
        }
        assert_eq!(m.pending_act_points(), vec![m.layers[2].layer]);
        m.unfreeze_all();
        assert_eq!(m.net, orig);
    }

    #[test]
    fn rejects_bad_bits() {
        let net = models::build(Arch::LenetIsh, &[1, 28, 28], 10, 3).unwrap();
        assert!(QuantModel::new(
            net.clone(),
            0,
            8,
            WeightQuantizer::KQuantile,
            DistKind::Gaussian
        )
        .is_err());
        assert!(
            QuantModel::new(net, 4, 9, WeightQuantizer::KQuantile, DistKind::Gaussian).is_err()
        );
    }
}
