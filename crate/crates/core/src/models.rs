//! Toy architectures used for training experiments.

use crate::error::{Error, Result};
use crate::nn::{self, Layer, Network};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    /// conv5-pool-conv5-pool-dense-dense, about 56k parameters on 28×28 input.
    LenetIsh,
    /// Plain 18-layer net at 1/4 of ResNet-18's widths (16/32/64/128), no skip connections.
    NarrowResnet,
}

impl Arch {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "lenet-ish" | "lenet" => Ok(Arch::LenetIsh),
            "narrow-resnet" => Ok(Arch::NarrowResnet),
            _ => Err(Error::invalid(
                "arch",
                format!(
                    "unknown training architecture '{name}' (expected lenet-ish or narrow-resnet)"
                ),
            )),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arch::LenetIsh => "lenet-ish",
            Arch::NarrowResnet => "narrow-resnet",
        }
    }

    /// Number of conv/dense layers.
    pub fn mac_layers(self) -> usize {
        match self {
            Arch::LenetIsh => 4,
            Arch::NarrowResnet => 18,
        }
    }
}

/// Builds `arch` for samples of shape `(c, h, w)` and `classes` outputs with seeded init.
pub fn build(arch: Arch, input: &[usize], classes: usize, seed: u64) -> Result<Network> {
    if input.len() != 3 {
        return Err(Error::Shape(format!(
            "expected (C, H, W) input, got {input:?}"
        )));
    }
    if classes < 2 {
        return Err(Error::invalid("classes", "need at least 2"));
    }
    let mut r = rng::stream(seed, &[0x6d6f_64656c]);
    let (c, h, w) = (input[0], input[1], input[2]);
    let layers = match arch {
        Arch::LenetIsh => {
            if h < 16 || w < 16 {
                return Err(Error::Shape(format!(
                    "lenet-ish needs at least 16x16 input, got {h}x{w}"
                )));
            }
            let fh = ((h - 4) / 2 - 4) / 2;
            let fw = ((w - 4) / 2 - 4) / 2;
            vec![
                nn::conv(&mut r, c, 6, 5, 1, 0),
                Layer::Relu,
                nn::max_pool(2, 2),
                nn::conv(&mut r, 6, 16, 5, 1, 0),
                Layer::Relu,
                nn::max_pool(2, 2),
                nn::dense(&mut r, 16 * fh * fw, 200),
                Layer::Relu,
                nn::dense(&mut r, 200, classes),
            ]
        }
        Arch::NarrowResnet => {
            let widths = [16usize, 32, 64, 128];
            let mut layers = vec![
                nn::conv(&mut r, c, widths[0], 3, 1, 1),
                nn::batch_norm(widths[0]),
                Layer::Relu,
            ];
            let (mut ch, mut sh, mut sw) = (widths[0], h, w);
            for (s, &wd) in widths.iter().enumerate() {
                for j in 0..4 {
                    let stride = if s > 0 && j == 0 { 2 } else { 1 };
                    layers.push(nn::conv(&mut r, ch, wd, 3, stride, 1));
                    layers.push(nn::batch_norm(wd));
                    layers.push(Layer::Relu);
                    if stride == 2 {
                        sh = (sh - 1) / 2 + 1;
                        sw = (sw - 1) / 2 + 1;
                    }
                    ch = wd;
                }
            }
            if sh != sw {
                return Err(Error::Shape(format!(
                    "narrow-resnet needs square input, got {h}x{w}"
                )));
            }
            layers.push(nn::avg_pool(sh, sh));
            layers.push(nn::dense(&mut r, ch, classes));
            layers
        }
    };
    Network::new(layers, input)
}
