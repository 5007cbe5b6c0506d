use proptest::prelude::*;
use uniq_core::config::ExperimentConfig;
use uniq_core::container::{self, VERSION};
use uniq_core::data;
use uniq_core::dist::DistKind;
use uniq_core::error::Error;
use uniq_core::models::{self, Arch};
use uniq_core::nn::BnMode;
use uniq_core::qmodel::{QuantModel, WeightQuantizer};
use uniq_core::sched::{self, RunData, StagePlan, TrainSettings};

fn round_trip_bytes(m: &QuantModel) -> Vec<u8> {
    let bytes = container::encode(&container::to_records(m).unwrap()).unwrap();
    let back = container::from_records(&container::decode(&bytes).unwrap()).unwrap();
    assert_eq!(&back, m);
    let again = container::encode(&container::to_records(&back).unwrap()).unwrap();
    assert_eq!(again, bytes);
    bytes
}

/// Models in every state a container can hold: untouched, mid-schedule and
/// fully quantized, under each quantizer and distribution kind.
#[test]
fn containers_round_trip_bit_identically() {
    let train = data::synthetic(400, 1).unwrap();
    let eval = data::synthetic(100, 2).unwrap();
    let rd = RunData {
        train: &train,
        eval: &eval,
    };
    let s = TrainSettings {
        lr: 1e-3,
        calib_samples: 400,
        ..Default::default()
    };
    for (q, d) in [
        (WeightQuantizer::KQuantile, DistKind::Gaussian),
        (WeightQuantizer::KMeans, DistKind::Empirical),
        (WeightQuantizer::Uniform, DistKind::Gaussian),
    ] {
        let net = models::build(Arch::NarrowResnet, &[1, 8, 8], 2, 3).unwrap();
        let mut m = QuantModel::new(net, 3, 5, q, d).unwrap();
        round_trip_bytes(&m);
        let plan = StagePlan::new(m.mac_count(), 6, 1, 1).unwrap();
        sched::run_stage(&mut m, &plan, 2, &rd, &s, 0, &mut 0).unwrap();
        round_trip_bytes(&m);
        m.finalize(&train.images, BnMode::Inference).unwrap();
        round_trip_bytes(&m);
    }
}

#[test]
fn file_round_trip_and_rejections() {
    let net = models::build(Arch::LenetIsh, &[1, 28, 28], 10, 0).unwrap();
    let m = QuantModel::new(net, 4, 8, WeightQuantizer::KQuantile, DistKind::Gaussian).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.unq");
    container::save(&m, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"UNQ1");
    assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), VERSION);
    assert_eq!(container::load(&path).unwrap(), m);

    let mut v2 = bytes.clone();
    v2[4..6].copy_from_slice(&(VERSION + 1).to_le_bytes());
    assert!(matches!(container::decode(&v2), Err(Error::Format(_))));
    assert!(container::decode(&bytes[..bytes.len() - 3]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(container::decode(&extra).is_err());
    assert!(matches!(
        container::load(&dir.path().join("missing.unq")),
        Err(Error::Io(_))
    ));
}

#[derive(Debug, Clone)]
enum Bad {
    BitsW(u32),
    BitsA(u32),
    Epochs,
    Restarts,
    Lr(f64),
    Momentum(f64),
    WeightDecay(f64),
    NoisyMult(f64),
    Quantizer(String),
    Dist(String),
    ActQuantizer(String),
    Arch(String),
    Format(String),
    BatchSize,
    Stages(usize),
    BaselineLr(f64),
    Calib,
}

fn bad_float() -> impl Strategy<Value = f64> {
    prop_oneof![Just(f64::NAN), Just(f64::INFINITY), -1e3f64..=0.0]
}

fn bad_name() -> impl Strategy<Value = String> {
    "[a-z]{1,8}x".prop_map(|s| s)
}

fn bad() -> impl Strategy<Value = Bad> {
    prop_oneof![
        prop_oneof![Just(0u32), 9u32..1000].prop_map(Bad::BitsW),
        prop_oneof![Just(0u32), 9u32..1000].prop_map(Bad::BitsA),
        Just(Bad::Epochs),
        Just(Bad::Restarts),
        bad_float().prop_map(Bad::Lr),
        prop_oneof![Just(f64::NAN), -5.0f64..-1e-9, 1.0f64..5.0].prop_map(Bad::Momentum),
        prop_oneof![Just(f64::NAN), Just(f64::INFINITY), -5.0f64..-1e-9].prop_map(Bad::WeightDecay),
        bad_float().prop_map(Bad::NoisyMult),
        bad_name().prop_map(Bad::Quantizer),
        bad_name().prop_map(Bad::Dist),
        bad_name().prop_map(Bad::ActQuantizer),
        bad_name().prop_map(Bad::Arch),
        bad_name().prop_map(Bad::Format),
        Just(Bad::BatchSize),
        (5usize..100).prop_map(Bad::Stages),
        bad_float().prop_map(Bad::BaselineLr),
        Just(Bad::Calib),
    ]
}

fn apply(c: &mut ExperimentConfig, b: &Bad) -> &'static str {
    match b.clone() {
        Bad::BitsW(v) => {
            c.bits_w = v;
            "bits_w"
        }
        Bad::BitsA(v) => {
            c.bits_a = v;
            "bits_a"
        }
        Bad::Epochs => {
            c.epochs_per_stage = 0;
            "epochs_per_stage"
        }
        Bad::Restarts => {
            c.restarts = 0;
            "restarts"
        }
        Bad::Lr(v) => {
            c.lr = v;
            "lr"
        }
        Bad::Momentum(v) => {
            c.momentum = v;
            "momentum"
        }
        Bad::WeightDecay(v) => {
            c.weight_decay = v;
            "weight_decay"
        }
        Bad::NoisyMult(v) => {
            c.noisy_lr_mult = v;
            "noisy_lr_mult"
        }
        Bad::Quantizer(v) => {
            c.quantizer = v;
            "quantizer"
        }
        Bad::Dist(v) => {
            c.dist = v;
            "dist"
        }
        Bad::ActQuantizer(v) => {
            c.act_quantizer = v;
            "act_quantizer"
        }
        Bad::Arch(v) => {
            c.arch = v;
            "arch"
        }
        Bad::Format(v) => {
            c.format = v;
            "format"
        }
        Bad::BatchSize => {
            c.batch_size = 0;
            "batch_size"
        }
        Bad::Stages(v) => {
            c.stages = v;
            "stages"
        }
        Bad::BaselineLr(v) => {
            c.baseline_lr = v;
            "baseline_lr"
        }
        Bad::Calib => {
            c.calib_samples = 0;
            "calib_samples"
        }
    }
}

proptest! {
    #[test]
    fn every_out_of_range_field_is_named(b in bad(), seed in any::<u64>(), bw in 1u32..=8, stages in 0usize..=4) {
        let mut c = ExperimentConfig { seed, bits_w: bw, stages, ..Default::default() };
        prop_assert!(c.validate().is_ok());
        let field = apply(&mut c, &b);
        match c.validate() {
            Err(Error::Invalid { field: f, .. }) => prop_assert_eq!(f, field),
            other => prop_assert!(false, "{:?} gave {:?}", b, other),
        }
    }

    #[test]
    fn valid_configs_survive_toml(seed in any::<u64>(), bw in 1u32..=8, ba in 1u32..=8, stages in 0usize..=18, lr in 1e-6f64..1.0) {
        let c = ExperimentConfig { seed, bits_w: bw, bits_a: ba, stages, lr, arch: "narrow-resnet".into(), ..Default::default() };
        prop_assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }
}
