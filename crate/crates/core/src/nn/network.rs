use super::layers::{self, Cache, Layer};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BnMode {
    /// Batch statistics; running statistics are refreshed by [`Network::absorb_bn_stats`].
    #[default]
    Train,
    /// Running statistics, as at deployment.
    Inference,
}

/// Hook applied to the input of a layer before it runs; identity in the backward pass.
pub type InputHook<'a> = &'a (dyn Fn(usize, &mut Tensor) + Sync);

#[derive(Clone, Copy, Default)]
pub struct RunOptions<'a> {
    pub bn: BnMode,
    /// Per-layer replacement for conv/dense weights (noisy or quantized copies).
    pub weights: Option<&'a [Option<Tensor>]>,
    pub input_hook: Option<InputHook<'a>>,
}

impl<'a> RunOptions<'a> {
    pub fn inference() -> Self {
        RunOptions {
            bn: BnMode::Inference,
            ..Default::default()
        }
    }
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input of each layer, after the input hook.
    pub inputs: Vec<Tensor>,
    pub caches: Vec<Cache>,
    pub output: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    /// Weight gradient, or gamma gradient for batch norm.
    pub weight: Vec<f64>,
    /// Bias gradient, or beta gradient for batch norm.
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    /// One entry per layer; `None` for parameter-free layers and layers below the cutoff.
    pub layers: Vec<Option<ParamGrad>>,
    /// Gradient with respect to the network input, when requested.
    pub input: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<Layer>,
    /// Shape of one input sample, e.g. `[1, 28, 28]`.
    input_shape: Vec<usize>,
}

impl Network {
    pub fn new(layers: Vec<Layer>, input_shape: &[usize]) -> Result<Self> {
        let net = Network {
            layers,
            input_shape: input_shape.to_vec(),
        };
        net.output_shape()?;
        Ok(net)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Shape of one output sample; fails if the layer chain is inconsistent.
    pub fn output_shape(&self) -> Result<Vec<usize>> {
        let mut s = vec![1];
        s.extend_from_slice(&self.input_shape);
        for l in &self.layers {
            s = l.out_shape(&s)?;
        }
        Ok(s[1..].to_vec())
    }

    /// Indices of conv/dense layers, in order.
    pub fn mac_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].is_mac())
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.params())
            .map(|(w, b)| w.len() + b.len())
            .sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() < 2 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::Shape(format!(
                "network expects samples of shape {:?}, got {:?}",
                self.input_shape,
                x.shape()
            )));
        }
        Ok(())
    }

    fn weight_for<'b>(&'b self, l: usize, opts: &RunOptions<'b>) -> Option<&'b Tensor> {
        if let Some(Some(w)) = opts.weights.and_then(|ws| ws.get(l)) {
            return Some(w);
        }
        self.layers[l].weight()
    }

    fn run(&self, x: &Tensor, opts: &RunOptions, keep: bool) -> Result<Trace> {
        self.check_input(x)?;
        if let Some(ws) = opts.weights {
            for (l, w) in ws.iter().enumerate() {
                if let (Some(w), Some(orig)) = (w, self.layers.get(l).and_then(|ly| ly.weight())) {
                    if w.shape() != orig.shape() {
                        return Err(Error::Shape(format!(
                            "weight override for layer {l} has wrong shape"
                        )));
                    }
                }
            }
        }
        let mut inputs = Vec::new();
        let mut caches = Vec::new();
        let mut cur = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            if let Some(h) = opts.input_hook {
                h(l, &mut cur);
            }
            let (next, cache) = match layer {
                Layer::Conv2d(c) => (
                    layers::conv_forward(c, self.weight_for(l, opts).unwrap(), &cur)?,
                    Cache::None,
                ),
                Layer::Dense(d) => (
                    layers::dense_forward(d, self.weight_for(l, opts).unwrap(), &cur)?,
                    Cache::None,
                ),
                Layer::Relu => (layers::relu_forward(&cur), Cache::None),
                Layer::MaxPool(p) => {
                    let (y, arg) = layers::maxpool_forward(p, &cur)?;
                    (
                        y,
                        if keep {
                            Cache::ArgMax(arg)
                        } else {
                            Cache::None
                        },
                    )
                }
                Layer::AvgPool(p) => (layers::avgpool_forward(p, &cur)?, Cache::None),
                Layer::BatchNorm(b) => layers::bn_forward(b, &cur, opts.bn == BnMode::Train)?,
            };
            if keep {
                inputs.push(std::mem::replace(&mut cur, next));
                caches.push(cache);
            } else {
                cur = next;
            }
        }
        if !cur.is_finite() {
            return Err(Error::Numeric("non-finite network output".into()));
        }
        Ok(Trace {
            inputs,
            caches,
            output: cur,
        })
    }

    /// Forward pass keeping every intermediate for [`Network::backward`].
    pub fn forward(&self, x: &Tensor, opts: &RunOptions) -> Result<Trace> {
        self.run(x, opts, true)
    }

    /// Forward pass returning only the output.
    pub fn infer(&self, x: &Tensor, opts: &RunOptions) -> Result<Tensor> {
        Ok(self.run(x, opts, false)?.output)
    }

    /// Reverse pass from `dout` down to layer `stop` (inclusive).
    ///
    /// Layers below `stop` get no gradient. With `want_input` and `stop == 0`
    /// the gradient of the network input is returned as well.
    pub fn backward(
        &self,
        trace: &Trace,
        dout: Tensor,
        opts: &RunOptions,
        stop: usize,
        want_input: bool,
    ) -> Result<Gradients> {
        if trace.inputs.len() != self.layers.len() {
            return Err(Error::Shape("trace does not belong to this network".into()));
        }
        if dout.shape() != trace.output.shape() {
            return Err(Error::Shape(format!(
                "output gradient shape {:?} != output shape {:?}",
                dout.shape(),
                trace.output.shape()
            )));
        }
        let mut grads: Vec<Option<ParamGrad>> = vec![None; self.layers.len()];
        let mut g = dout;
        let mut input = None;
        for l in (stop..self.layers.len()).rev() {
            let x = &trace.inputs[l];
            let need_dx = l > stop || want_input;
            let dx = match &self.layers[l] {
                Layer::Conv2d(c) => {
                    let (dx, dw, db) =
                        layers::conv_backward(c, self.weight_for(l, opts).unwrap(), x, &g, need_dx);
                    grads[l] = Some(ParamGrad {
                        weight: dw,
                        bias: db,
                    });
                    dx
                }
                Layer::Dense(d) => {
                    let (dx, dw, db) = layers::dense_backward(
                        d,
                        self.weight_for(l, opts).unwrap(),
                        x,
                        &g,
                        need_dx,
                    );
                    grads[l] = Some(ParamGrad {
                        weight: dw,
                        bias: db,
                    });
                    dx
                }
                Layer::Relu => need_dx.then(|| layers::relu_backward(x, &g)),
                Layer::MaxPool(_) => {
                    let Cache::ArgMax(arg) = &trace.caches[l] else {
                        return Err(Error::Shape("maxpool cache missing".into()));
                    };
                    need_dx.then(|| layers::maxpool_backward(x, arg, &g))
                }
                Layer::AvgPool(p) => need_dx.then(|| layers::avgpool_backward(p, x, &g)),
                Layer::BatchNorm(b) => {
                    let (dx, dg, db) = layers::bn_backward(b, &trace.caches[l], &g);
                    grads[l] = Some(ParamGrad {
                        weight: dg,
                        bias: db,
                    });
                    need_dx.then_some(dx)
                }
            };
            match dx {
                Some(d) if l > stop => g = d,
                Some(d) => input = Some(d),
                None => {}
            }
        }
        Ok(Gradients {
            layers: grads,
            input,
        })
    }

    /// Folds the batch statistics of a training-mode trace into the running statistics.
    pub fn absorb_bn_stats(&mut self, trace: &Trace, frozen: impl Fn(usize) -> bool) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let (
                Layer::BatchNorm(b),
                Some(Cache::Bn {
                    batch_mean,
                    batch_var,
                    train: true,
                    ..
                }),
            ) = (layer, trace.caches.get(l))
            else {
                continue;
            };
            if frozen(l) {
                continue;
            }
            let x = &trace.inputs[l];
            let count = x.len() / b.channels();
            let unbias = if count > 1 {
                count as f64 / (count - 1) as f64
            } else {
                1.0
            };
            let mom = b.momentum;
            for (r, &m) in b.running_mean.data_mut().iter_mut().zip(batch_mean) {
                *r = (1.0 - mom) * *r + mom * m;
            }
            for (r, &v) in b.running_var.data_mut().iter_mut().zip(batch_var) {
                *r = (1.0 - mom) * *r + mom * v * unbias;
            }
        }
    }
}

/// Mean softmax cross-entropy over the batch and its gradient with respect to the logits.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.shape().len() != 2 || logits.batch() != labels.len() {
        return Err(Error::Shape(format!(
            "logits {:?} do not match {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let (n, c) = (logits.batch(), logits.shape()[1]);
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::invalid(
            "labels",
            format!("label {bad} out of range for {c} classes"),
        ));
    }
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.sample(i);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        let lse = mx + z.ln();
        loss += lse - row[y];
        let g = &mut grad.data_mut()[i * c..(i + 1) * c];
        for (j, gv) in g.iter_mut().enumerate() {
            *gv = (row[j] - lse).exp() / n as f64;
        }
        g[y] -= 1.0 / n as f64;
    }
    Ok((loss / n as f64, grad))
}

/// `wd/2 · Σ w²` over every parameter tensor; its gradient is the `wd·w` term used by [`Sgd`].
pub fn weight_decay_penalty(net: &Network, wd: f64) -> f64 {
    net.layers
        .iter()
        .filter_map(|l| l.params())
        .map(|(w, b)| w.data().iter().chain(b.data()).map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        * wd
        / 2.0
}

/// SGD with momentum and additive weight decay.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<ParamGrad>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid("momentum", "must be in [0, 1)"));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay", "must be non-negative"));
        }
        Ok(Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        })
    }

    pub fn reset(&mut self) {
        self.velocity.clear();
    }

    /// `v ← μ·v + (g + wd·p)`, `p ← p − lr·v` for every layer with a gradient
    /// for which `trainable` holds.
    pub fn step(
        &mut self,
        net: &mut Network,
        grads: &Gradients,
        trainable: impl Fn(usize) -> bool,
    ) {
        if self.velocity.len() != net.layers.len() {
            self.velocity = vec![None; net.layers.len()];
        }
        for (l, layer) in net.layers.iter_mut().enumerate() {
            let (Some(g), Some((w, b))) = (grads.layers[l].as_ref(), layer.params_mut()) else {
                continue;
            };
            if !trainable(l) {
                continue;
            }
            let v = self.velocity[l].get_or_insert_with(|| ParamGrad {
                weight: vec![0.0; w.len()],
                bias: vec![0.0; b.len()],
            });
            for (p, (vel, gr)) in [(w, (&mut v.weight, &g.weight)), (b, (&mut v.bias, &g.bias))] {
                for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(vel.iter_mut()).zip(gr.iter()) {
                    *vv = self.momentum * *vv + (gv + self.weight_decay * *pv);
                    *pv -= self.lr * *vv;
                }
            }
        }
    }
}
