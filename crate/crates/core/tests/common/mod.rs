//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use rand::Rng;
use uniq_core::dist::DistModel;
use uniq_core::nn::{self, BnMode, Layer, Network, RunOptions, Tensor};
use uniq_core::noise;
use uniq_core::rng::{self, StreamRng};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-5;

/// Relative error with a small floor on the denominator so that exact zeros compare cleanly.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Check {
    pub points: usize,
    pub worst: f64,
}

impl Check {
    pub fn add(&mut self, analytic: f64, numeric: f64) {
        self.points += 1;
        self.worst = self.worst.max(rel_err(analytic, numeric));
    }
    pub fn merge(&mut self, o: Check) {
        self.points += o.points;
        self.worst = self.worst.max(o.worst);
    }
    pub fn ok(&self, min_points: usize) -> bool {
        self.points >= min_points && self.worst < FD_TOL
    }
}

pub fn normals(r: &mut StreamRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, rng::standard_normals(r, n)).unwrap()
}

#[derive(Clone, Copy)]
enum Coord {
    Input(usize),
    Weight(usize),
    Bias(usize),
}

fn probe_loss(net: &Network, x: &Tensor, proj: &Tensor, bn: BnMode) -> f64 {
    let opts = RunOptions {
        bn,
        ..Default::default()
    };
    let y = net.infer(x, &opts).unwrap();
    y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
}

/// Central differences of `sum(proj * layer(x))` against the backward pass at
/// `points` random coordinates of the input and the layer parameters.
pub fn check_layer(layer: Layer, x: Tensor, bn: BnMode, seed: u64, points: usize) -> Check {
    let mut r = rng::stream(seed, &[0xfd]);
    let mut net = Network::new(vec![layer], &x.shape()[1..]).unwrap();
    let opts = RunOptions {
        bn,
        ..Default::default()
    };
    let trace = net.forward(&x, &opts).unwrap();
    let proj = normals(&mut r, trace.output.shape());
    let grads = net.backward(&trace, proj.clone(), &opts, 0, true).unwrap();
    let gin = grads.input.unwrap();
    let (nw, nb) = net.layers[0]
        .params()
        .map_or((0, 0), |(w, b)| (w.len(), b.len()));
    let mut check = Check::default();
    for _ in 0..points {
        let coord = match r.random_range(0..3) {
            1 if nw > 0 => Coord::Weight(r.random_range(0..nw)),
            2 if nb > 0 => Coord::Bias(r.random_range(0..nb)),
            _ => Coord::Input(r.random_range(0..x.len())),
        };
        let mut at = |delta: f64| -> f64 {
            let mut xx = x.clone();
            match coord {
                Coord::Input(i) => xx.data_mut()[i] += delta,
                Coord::Weight(i) => net.layers[0].params_mut().unwrap().0.data_mut()[i] += delta,
                Coord::Bias(i) => net.layers[0].params_mut().unwrap().1.data_mut()[i] += delta,
            }
            let v = probe_loss(&net, &xx, &proj, bn);
            match coord {
                Coord::Weight(i) => net.layers[0].params_mut().unwrap().0.data_mut()[i] -= delta,
                Coord::Bias(i) => net.layers[0].params_mut().unwrap().1.data_mut()[i] -= delta,
                Coord::Input(_) => {}
            }
            v
        };
        let numeric = (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP);
        let analytic = match coord {
            Coord::Input(i) => gin.data()[i],
            Coord::Weight(i) => grads.layers[0].as_ref().unwrap().weight[i],
            Coord::Bias(i) => grads.layers[0].as_ref().unwrap().bias[i],
        };
        check.add(analytic, numeric);
    }
    check
}

/// Inputs bounded away from zero so relu has no kink within the step.
pub fn away_from_zero(r: &mut StreamRng, shape: &[usize]) -> Tensor {
    let mut t = normals(r, shape);
    for v in t.data_mut() {
        *v = v.signum() * (v.abs() + 0.05);
    }
    t
}

/// Distinct values on a 0.01 grid, so no max-pool window has a near tie.
pub fn distinct(r: &mut StreamRng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let perm = rng::permutation(r, n);
    Tensor::from_vec(
        shape,
        perm.into_iter()
            .map(|p| p as f64 * 0.01 - n as f64 * 0.005)
            .collect(),
    )
    .unwrap()
}

fn randomize_bn(layer: &mut Layer, r: &mut StreamRng) {
    if let Layer::BatchNorm(b) = layer {
        for v in b.gamma.data_mut() {
            *v = 0.5 + r.random::<f64>();
        }
        for v in b.beta.data_mut() {
            *v = r.random::<f64>() - 0.5;
        }
        for v in b.running_mean.data_mut() {
            *v = r.random::<f64>() - 0.5;
        }
        for v in b.running_var.data_mut() {
            *v = 0.5 + r.random::<f64>();
        }
    }
}

/// Every layer kind on several random small instances.
pub fn layer_gradient_checks(points_per_instance: usize) -> Vec<(&'static str, Check)> {
    let mut out = Vec::new();
    let instances = 4;
    let mut run =
        |name: &'static str, make: &dyn Fn(&mut StreamRng, u64) -> (Layer, Tensor, BnMode)| {
            let mut total = Check::default();
            for inst in 0..instances {
                let mut r = rng::stream(0x9c, &[name.len() as u64, inst]);
                let (layer, x, bn) = make(&mut r, inst);
                total.merge(check_layer(layer, x, bn, 1000 + inst, points_per_instance));
            }
            out.push((name, total));
        };
    run("conv2d", &|r, i| {
        let (cin, cout, k) = (
            1 + i as usize % 3,
            2 + i as usize % 2,
            [1, 3, 3, 2][i as usize],
        );
        let (stride, pad) = ([1, 1, 2, 1][i as usize], [0, 1, 1, 0][i as usize]);
        (
            nn::conv(r, cin, cout, k, stride, pad),
            normals(r, &[2, cin, 6, 5]),
            BnMode::Train,
        )
    });
    run("dense", &|r, i| {
        let (n, m) = (3 + i as usize, 2 + 2 * i as usize);
        (nn::dense(r, n, m), normals(r, &[3, n]), BnMode::Train)
    });
    run("relu", &|r, _| {
        (Layer::Relu, away_from_zero(r, &[2, 3, 4, 4]), BnMode::Train)
    });
    run("maxpool", &|r, i| {
        let (size, stride) = [(2, 2), (3, 1), (2, 1), (3, 2)][i as usize];
        (
            nn::max_pool(size, stride),
            distinct(r, &[2, 2, 7, 7]),
            BnMode::Train,
        )
    });
    run("avgpool", &|r, i| {
        let (size, stride) = [(2, 2), (3, 1), (2, 1), (3, 2)][i as usize];
        (
            nn::avg_pool(size, stride),
            normals(r, &[2, 2, 7, 7]),
            BnMode::Train,
        )
    });
    run("batchnorm-train", &|r, i| {
        let mut l = nn::batch_norm(3);
        randomize_bn(&mut l, r);
        let shape: &[usize] = if i % 2 == 0 { &[4, 3, 3, 3] } else { &[5, 3] };
        (l, normals(r, shape), BnMode::Train)
    });
    run("batchnorm-inference", &|r, _| {
        let mut l = nn::batch_norm(3);
        randomize_bn(&mut l, r);
        (l, normals(r, &[3, 3, 2, 2]), BnMode::Inference)
    });
    out
}

/// Whole small networks under softmax cross-entropy plus weight decay.
pub fn network_gradient_check(points: usize, seed: u64) -> Check {
    let mut r = rng::stream(seed, &[0x4e]);
    let layers = vec![
        nn::conv(&mut r, 1, 3, 3, 1, 1),
        nn::batch_norm(3),
        Layer::Relu,
        nn::avg_pool(2, 2),
        nn::dense(&mut r, 3 * 3 * 3, 4),
    ];
    let mut net = Network::new(layers, &[1, 6, 6]).unwrap();
    let x = normals(&mut r, &[4, 1, 6, 6]);
    let labels = vec![0, 3, 1, 2];
    let wd = 0.05;
    let loss = |net: &Network| -> f64 {
        let y = net.infer(&x, &RunOptions::default()).unwrap();
        nn::softmax_xent(&y, &labels).unwrap().0 + nn::weight_decay_penalty(net, wd)
    };
    let trace = net.forward(&x, &RunOptions::default()).unwrap();
    let (_, dl) = nn::softmax_xent(&trace.output, &labels).unwrap();
    let grads = net
        .backward(&trace, dl, &RunOptions::default(), 0, false)
        .unwrap();
    let with_params: Vec<usize> = (0..net.layers.len())
        .filter(|&l| net.layers[l].params().is_some())
        .collect();
    let mut check = Check::default();
    for _ in 0..points {
        let l = with_params[r.random_range(0..with_params.len())];
        let bias = r.random::<bool>();
        let len = {
            let (w, b) = net.layers[l].params().unwrap();
            if bias {
                b.len()
            } else {
                w.len()
            }
        };
        let i = r.random_range(0..len);
        let bump = |net: &mut Network, d: f64| {
            let (w, b) = net.layers[l].params_mut().unwrap();
            (if bias { b } else { w }).data_mut()[i] += d;
        };
        bump(&mut net, FD_STEP);
        let up = loss(&net);
        bump(&mut net, -2.0 * FD_STEP);
        let down = loss(&net);
        bump(&mut net, FD_STEP);
        let numeric = (up - down) / (2.0 * FD_STEP);
        let g = grads.layers[l].as_ref().unwrap();
        // Weight decay enters the update additively as wd·p; the matching penalty is wd/2·p².
        let p = {
            let (w, b) = net.layers[l].params().unwrap();
            (if bias { b } else { w }).data()[i]
        };
        let analytic = if bias { g.bias[i] } else { g.weight[i] } + wd * p;
        check.add(analytic, numeric);
    }
    check
}

/// `noisy_weight_grad` against central differences of `noisy_weight` at fixed noise.
pub fn noisy_grad_check(points: usize, seed: u64) -> Check {
    let mut r = rng::stream(seed, &[0x6e]);
    let mut check = Check::default();
    while check.points < points {
        let mu = r.random::<f64>() - 0.5;
        let sigma = 0.05 + r.random::<f64>();
        let d = DistModel::gaussian(mu, sigma).unwrap();
        let k = 1usize << r.random_range(1..=8);
        let w = mu + sigma * rng::standard_normals(&mut r, 1)[0];
        let e = noise::sample_noise(k, &mut r).unwrap();
        let u = d.cdf(w) + e;
        if !(1e-3..=1.0 - 1e-3).contains(&u) || !(1e-3..=1.0 - 1e-3).contains(&d.cdf(w)) {
            continue;
        }
        let numeric = (noise::noisy_weight(&d, w + FD_STEP, e)
            - noise::noisy_weight(&d, w - FD_STEP, e))
            / (2.0 * FD_STEP);
        check.add(noise::noisy_weight_grad(&d, w, e), numeric);
    }
    check
}
