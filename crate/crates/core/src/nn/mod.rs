//! Small reverse-mode network kernel: conv, dense, pooling, relu, batch norm,
//! softmax cross-entropy and momentum SGD, all in `f64`.

pub mod gemm;
mod layers;
mod network;
mod tensor;

pub use layers::{BatchNorm, Cache, Conv2d, Dense, Layer, LayerKind, Pool, SAMPLE_CHUNK};
pub use network::{
    softmax_xent, weight_decay_penalty, BnMode, Gradients, InputHook, Network, ParamGrad,
    RunOptions, Sgd, Trace,
};
pub use tensor::Tensor;

use crate::rng::{standard_normals, StreamRng};

/// He-normal conv layer with zero bias.
pub fn conv(
    rng: &mut StreamRng,
    n_in: usize,
    n_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Layer {
    let fan_in = (n_in * k * k) as f64;
    let w: Vec<f64> = standard_normals(rng, n_out * n_in * k * k)
        .into_iter()
        .map(|v| v * (2.0 / fan_in).sqrt())
        .collect();
    Layer::Conv2d(Conv2d {
        weight: Tensor::from_vec(&[n_out, n_in, k, k], w).unwrap(),
        bias: Tensor::zeros(&[n_out]),
        stride,
        pad,
    })
}

/// He-normal dense layer with zero bias.
pub fn dense(rng: &mut StreamRng, n_in: usize, n_out: usize) -> Layer {
    let w: Vec<f64> = standard_normals(rng, n_out * n_in)
        .into_iter()
        .map(|v| v * (2.0 / n_in as f64).sqrt())
        .collect();
    Layer::Dense(Dense {
        weight: Tensor::from_vec(&[n_out, n_in], w).unwrap(),
        bias: Tensor::zeros(&[n_out]),
    })
}

pub fn max_pool(size: usize, stride: usize) -> Layer {
    Layer::MaxPool(Pool { size, stride })
}

pub fn avg_pool(size: usize, stride: usize) -> Layer {
    Layer::AvgPool(Pool { size, stride })
}

pub fn batch_norm(channels: usize) -> Layer {
    Layer::BatchNorm(BatchNorm::new(channels))
}
