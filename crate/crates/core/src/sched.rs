//! Gradual quantization: blocks of consecutive conv/dense layers are noise-trained
//! one stage at a time while earlier blocks stay quantized and frozen.

use std::fmt::Write as _;
use std::ops::Range;

use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::nn::{self, BnMode, RunOptions, Sgd, Tensor};
use crate::noise::{self, NoisyTensor};
use crate::qmodel::{self, LayerMode, QuantModel};
use crate::rng;

/// Splits `layer_count` layers into `n` consecutive blocks whose sizes differ
/// by at most one; earlier blocks take the extra layers.
pub fn make_blocks(layer_count: usize, n: usize) -> Result<Vec<Range<usize>>> {
    if n == 0 || n > layer_count {
        return Err(Error::invalid(
            "stages",
            format!("need 1 <= stages <= {layer_count} trainable layers, got {n}"),
        ));
    }
    let (base, extra) = (layer_count / n, layer_count % n);
    let mut start = 0;
    Ok((0..n)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StagePlan {
    /// Conv/dense indices of each block.
    pub blocks: Vec<Range<usize>>,
    pub epochs_per_stage: usize,
    pub restart_iterations: usize,
}

impl StagePlan {
    /// `stages = 0` means one stage per layer.
    pub fn new(
        layer_count: usize,
        stages: usize,
        epochs_per_stage: usize,
        restart_iterations: usize,
    ) -> Result<Self> {
        if epochs_per_stage == 0 {
            return Err(Error::invalid("epochs_per_stage", "must be >= 1"));
        }
        if restart_iterations == 0 {
            return Err(Error::invalid("restarts", "must be >= 1"));
        }
        let n = if stages == 0 { layer_count } else { stages };
        Ok(StagePlan {
            blocks: make_blocks(layer_count, n)?,
            epochs_per_stage,
            restart_iterations,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Learning-rate multiplier applied while a block is noisy.
    pub noisy_lr_mult: f64,
    pub batch_size: usize,
    /// Cap on minibatches per epoch (`None`: full epoch).
    pub max_batches: Option<usize>,
    /// Keep blocks after the current one fixed during a stage.
    pub freeze_future: bool,
    pub bn: BnMode,
    /// Training samples used for activation calibration.
    pub calib_samples: usize,
    /// Test samples used for per-epoch evaluation (`None`: all).
    pub eval_samples: Option<usize>,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            lr: 1e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
            noisy_lr_mult: 1.0,
            batch_size: 64,
            max_batches: None,
            freeze_future: false,
            bn: BnMode::Inference,
            calib_samples: 2000,
            eval_samples: None,
            seed: 0,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        Sgd::new(self.lr, self.momentum, self.weight_decay)?;
        if !(self.noisy_lr_mult > 0.0 && self.noisy_lr_mult.is_finite()) {
            return Err(Error::invalid("noisy_lr_mult", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be >= 1"));
        }
        if self.calib_samples == 0 {
            return Err(Error::invalid("calib_samples", "must be >= 1"));
        }
        Ok(())
    }
}

/// One log line; `stage = None` marks the fully quantized model at the end of an iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub iteration: usize,
    pub stage: Option<usize>,
    pub epoch: Option<usize>,
    pub train_loss: Option<f64>,
    pub eval_accuracy: f64,
}

pub const LOG_HEADER: &str = "iteration,stage,epoch,train_loss,eval_accuracy";

pub fn records_csv(records: &[StageRecord]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    let opt = |v: Option<usize>| v.map_or(String::new(), |x| x.to_string());
    for r in records {
        let stage = r.stage.map_or("final".to_string(), |x| x.to_string());
        let loss = r.train_loss.map_or(String::new(), |x| format!("{x:.6}"));
        let _ = writeln!(
            s,
            "{},{stage},{},{loss},{:.6}",
            r.iteration,
            opt(r.epoch),
            r.eval_accuracy
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleOutcome {
    pub records: Vec<StageRecord>,
    /// Accuracy of the fully quantized model after each iteration.
    pub iteration_accuracy: Vec<f64>,
}

/// Training and evaluation data for a run.
pub struct RunData<'a> {
    pub train: &'a Dataset,
    pub eval: &'a Dataset,
}

const NOISE_TAG: u64 = 0x4e4f_4953;
const BATCH_TAG: u64 = 0x4241_5443;

fn calibration_set(train: &Dataset, n: usize) -> Tensor {
    let idx: Vec<usize> = (0..n.min(train.len())).collect();
    train.images.gather(&idx)
}

fn eval_model(model: &QuantModel, d: &Dataset, limit: Option<usize>) -> Result<f64> {
    let d = match limit {
        Some(n) => d.head(n),
        None => d.clone(),
    };
    qmodel::accuracy(|x| model.infer(x), &d.images, &d.labels)
}

/// Mean training loss over the epoch's minibatches.
struct EpochStats {
    loss: f64,
}

/// One epoch of noise-injection training with the model's current layer modes.
fn train_epoch(
    model: &mut QuantModel,
    data: &Dataset,
    s: &TrainSettings,
    sgd: &mut Sgd,
    step: &mut u64,
    batch_seed: u64,
    trainable: &[bool],
) -> Result<EpochStats> {
    let batches = data::epoch_batches(data.len(), s.batch_size, batch_seed);
    let limit = s.max_batches.unwrap_or(usize::MAX);
    let stop = trainable
        .iter()
        .position(|&t| t)
        .unwrap_or(model.net.layers.len());
    let mut loss_sum = 0.0;
    let mut count = 0usize;
    for idx in batches.iter().take(limit) {
        *step += 1;
        let (x, y) = data.gather(idx);
        let mut overrides: Vec<Option<Tensor>> = vec![None; model.net.layers.len()];
        let mut jac: Vec<Option<Vec<f64>>> = vec![None; model.net.layers.len()];
        for q in model.layers.iter().filter(|q| q.mode == LayerMode::Noisy) {
            let w = model.net.layers[q.layer].weight().unwrap();
            let mut r = rng::stream(s.seed, &[NOISE_TAG, q.layer as u64, *step]);
            let NoisyTensor { values, grads } = noise::noisy_tensor(
                q.dist.as_ref().unwrap(),
                q.bins.as_ref().unwrap(),
                w.data(),
                &mut r,
            )?;
            overrides[q.layer] = Some(Tensor::from_vec(w.shape(), values)?);
            jac[q.layer] = Some(grads);
        }
        let hook = noise::act_hook(&model.acts);
        let opts = RunOptions {
            bn: s.bn,
            weights: Some(&overrides),
            input_hook: Some(&hook),
        };
        let trace = model.net.forward(&x, &opts)?;
        let (loss, dl) = nn::softmax_xent(&trace.output, &y)?;
        if !loss.is_finite() {
            return Err(Error::Numeric("training loss is not finite".into()));
        }
        let mut grads = if stop < model.net.layers.len() {
            model.net.backward(&trace, dl, &opts, stop, false)?
        } else {
            nn::Gradients {
                layers: vec![None; model.net.layers.len()],
                input: None,
            }
        };
        for (l, j) in jac.iter().enumerate() {
            if let (Some(j), Some(g)) = (j, grads.layers[l].as_mut()) {
                g.weight.iter_mut().zip(j).for_each(|(gw, d)| *gw *= d);
            }
        }
        if s.bn == BnMode::Train {
            model.net.absorb_bn_stats(&trace, |l| !trainable[l]);
        }
        sgd.step(&mut model.net, &grads, |l| trainable[l]);
        loss_sum += loss;
        count += 1;
    }
    Ok(EpochStats {
        loss: loss_sum / count.max(1) as f64,
    })
}

/// Mask of network layers that receive updates during stage `i` of `plan`.
fn trainable_mask(
    model: &QuantModel,
    plan: &StagePlan,
    i: usize,
    freeze_future: bool,
) -> Vec<bool> {
    (0..model.net.layers.len())
        .map(|l| {
            let j = model.owner(l);
            match model.layers[j].mode {
                LayerMode::Frozen => false,
                LayerMode::Noisy => true,
                LayerMode::Untouched => !(freeze_future && j >= plan.blocks[i].end),
            }
        })
        .collect()
}

/// Runs stage `i` (0-based) of `plan`: freezes blocks before `i`, calibrates their
/// activations, makes block `i` noisy and trains for `epochs_per_stage` epochs.
pub fn run_stage(
    model: &mut QuantModel,
    plan: &StagePlan,
    i: usize,
    data: &RunData,
    s: &TrainSettings,
    iteration: usize,
    step: &mut u64,
) -> Result<Vec<StageRecord>> {
    if i >= plan.blocks.len() {
        return Err(Error::invalid("stage", format!("stage {i} out of range")));
    }
    if plan.blocks.last().map(|b| b.end) != Some(model.mac_count()) {
        return Err(Error::invalid(
            "plan",
            "blocks do not cover the model's layers",
        ));
    }
    for b in &plan.blocks[..i] {
        for j in b.clone() {
            model.freeze(j)?;
        }
    }
    model.calibrate_pending(&calibration_set(data.train, s.calib_samples), s.bn)?;
    for j in plan.blocks[i].clone() {
        model.make_noisy(j)?;
    }
    let trainable = trainable_mask(model, plan, i, s.freeze_future);
    let mut sgd = Sgd::new(s.lr * s.noisy_lr_mult, s.momentum, s.weight_decay)?;
    let mut records = Vec::new();
    for epoch in 0..plan.epochs_per_stage {
        let seed = rng::stream_seed(
            s.seed,
            &[BATCH_TAG, iteration as u64, i as u64, epoch as u64],
        );
        let st = train_epoch(model, data.train, s, &mut sgd, step, seed, &trainable)?;
        records.push(StageRecord {
            iteration,
            stage: Some(i),
            epoch: Some(epoch),
            train_loss: Some(st.loss),
            eval_accuracy: eval_model(model, data.eval, s.eval_samples)?,
        });
    }
    Ok(records)
}

/// All stages for `restart_iterations` iterations, then freezes everything.
/// Each restart begins from the shadow full-precision weights.
pub fn run_schedule(
    model: &mut QuantModel,
    plan: &StagePlan,
    data: &RunData,
    s: &TrainSettings,
) -> Result<ScheduleOutcome> {
    s.validate()?;
    let mut records = Vec::new();
    let mut iteration_accuracy = Vec::new();
    let mut step = 0u64;
    let calib = calibration_set(data.train, s.calib_samples);
    for it in 0..plan.restart_iterations {
        if it > 0 {
            model.unfreeze_all();
        }
        for i in 0..plan.blocks.len() {
            records.extend(run_stage(model, plan, i, data, s, it, &mut step)?);
        }
        // Score the fully quantized model without disturbing the running state.
        let mut snapshot = model.clone();
        snapshot.finalize(&calib, s.bn)?;
        let acc = eval_model(&snapshot, data.eval, s.eval_samples)?;
        records.push(StageRecord {
            iteration: it,
            stage: None,
            epoch: None,
            train_loss: None,
            eval_accuracy: acc,
        });
        iteration_accuracy.push(acc);
        if it + 1 == plan.restart_iterations {
            *model = snapshot;
        }
    }
    Ok(ScheduleOutcome {
        records,
        iteration_accuracy,
    })
}

/// Plain full-precision training for `epochs` epochs; returns per-epoch mean loss.
pub fn train_float(
    net: &mut nn::Network,
    data: &Dataset,
    epochs: usize,
    s: &TrainSettings,
) -> Result<Vec<f64>> {
    s.validate()?;
    let mut sgd = Sgd::new(s.lr, s.momentum, s.weight_decay)?;
    let mut losses = Vec::new();
    for epoch in 0..epochs {
        let batches = data::epoch_batches(
            data.len(),
            s.batch_size,
            rng::stream_seed(s.seed, &[BATCH_TAG, u64::MAX, epoch as u64]),
        );
        let mut sum = 0.0;
        let mut count = 0;
        for idx in batches.iter().take(s.max_batches.unwrap_or(usize::MAX)) {
            let (x, y) = data.gather(idx);
            let opts = RunOptions {
                bn: s.bn,
                ..Default::default()
            };
            let trace = net.forward(&x, &opts)?;
            let (loss, dl) = nn::softmax_xent(&trace.output, &y)?;
            if !loss.is_finite() {
                return Err(Error::Numeric("training loss is not finite".into()));
            }
            let grads = net.backward(&trace, dl, &opts, 0, false)?;
            if s.bn == BnMode::Train {
                net.absorb_bn_stats(&trace, |_| false);
            }
            sgd.step(net, &grads, |_| true);
            sum += loss;
            count += 1;
        }
        losses.push(sum / count.max(1) as f64);
    }
    Ok(losses)
}
