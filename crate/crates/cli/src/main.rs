use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use uniq_core::config::{ExperimentConfig, Regime};
use uniq_core::container::{self, kind, Payload, Record};
use uniq_core::data::{self, DataFormat, Dataset, Split};
use uniq_core::dist::{self, DistModel};
use uniq_core::error::{Error, Result};
use uniq_core::models;
use uniq_core::nn::RunOptions;
use uniq_core::qinfer::{self, DEFAULT_FRAC_BITS};
use uniq_core::qmodel::{self, QuantModel, WeightQuantizer, UNIFORM_RANGE_SIGMAS};
use uniq_core::quant::{self, LloydMaxOptions};
use uniq_core::sched::{self, RunData, StagePlan};
use uniq_core::{bops, DistKind};

#[derive(Parser)]
#[command(
    name = "uniq",
    version,
    about = "Non-uniform quantization by noise injection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a weight quantizer to every conv/dense layer of a model container
    FitQuantizer(FitArgs),
    /// Train a quantized model from an experiment config
    Train(TrainArgs),
    /// Bit-operation complexity and model size of an architecture
    Bops(BopsArgs),
    /// Top-1 accuracy of a model container
    Eval(EvalArgs),
    /// List dataset formats and what is present under the data root
    Datasets(DatasetsArgs),
}

#[derive(Args)]
struct FitArgs {
    /// Model container
    model: PathBuf,
    /// Number of quantization levels
    #[arg(short, long, default_value_t = 16)]
    k: usize,
    /// kquantile, kmeans or uniform
    #[arg(long, default_value = "kquantile")]
    method: String,
    /// Distribution model for kquantile: gaussian or empirical
    #[arg(long, default_value = "gaussian")]
    dist: String,
    /// Where to write the fitted quantizers
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    bits_w: Option<u32>,
    #[arg(long)]
    bits_a: Option<u32>,
    /// Number of stages (0: one per conv/dense layer)
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
    /// Weight quantizer: kquantile, kmeans or uniform
    #[arg(long)]
    method: Option<String>,
    /// Dataset directory; overrides the config and UNIQ_DATA_DIR
    #[arg(long)]
    data: Option<PathBuf>,
    /// Quantized model container
    #[arg(short, long, default_value = "model.unq")]
    out: PathBuf,
    /// Per-epoch CSV log
    #[arg(long, default_value = "train_log.csv")]
    log: PathBuf,
    /// Also save the full-precision model trained for fine-tuning
    #[arg(long)]
    baseline_out: Option<PathBuf>,
    /// Comma-separated stage counts; runs each on the same starting model with
    /// the same epoch budget and writes `stages,accuracy` rows to `--log`
    #[arg(long, value_delimiter = ',')]
    sweep_stages: Vec<usize>,
}

#[derive(Args)]
struct BopsArgs {
    /// Catalog name (alexnet, resnet18, resnet34, resnet50, mobilenet_v1) or an architecture file
    arch: String,
    #[arg(long, default_value_t = 32)]
    bits_w: u32,
    #[arg(long, default_value_t = 32)]
    bits_a: u32,
    /// Quantize the first and last layers as well
    #[arg(long)]
    quantize_first_last: bool,
    /// CSV `arch,b_w,b_a,accuracy` to join with computed complexity
    #[arg(long)]
    accuracy: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalMode {
    Float,
    Simulated,
    Lut,
}

#[derive(Args)]
struct EvalArgs {
    model: PathBuf,
    #[arg(long, value_enum, default_value = "lut")]
    mode: EvalMode,
    /// Dataset directory (default: $UNIQ_DATA_DIR/<format>)
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "mnist_idx")]
    format: String,
    /// Evaluate the first n test samples only
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_FRAC_BITS)]
    frac_bits: u32,
    /// Append `model,mode,samples,accuracy` to this CSV
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct DatasetsArgs {
    /// Data root (default: $UNIQ_DATA_DIR)
    #[arg(long)]
    root: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.command {
        Command::FitQuantizer(a) => fit_quantizer(a),
        Command::Train(a) => train(a),
        Command::Bops(a) => bops_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Datasets(a) => datasets(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn default_subdir(format: DataFormat) -> &'static str {
    match format {
        DataFormat::MnistIdx => "mnist",
        DataFormat::Cifar10Bin => "cifar10",
        DataFormat::Synthetic => "synthetic",
    }
}

/// Absolute paths are used as given; relative ones live under `$UNIQ_DATA_DIR`.
fn data_root(explicit: Option<&Path>, configured: &Path) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None if configured.is_absolute() => configured.to_path_buf(),
        None => data::resolve_root(None, &configured.to_string_lossy()),
    }
}

fn weight_layers(m: &QuantModel) -> Vec<(usize, Vec<f64>)> {
    m.layers
        .iter()
        .map(|q| {
            (
                q.layer,
                m.net.layers[q.layer]
                    .weight()
                    .expect("conv/dense")
                    .data()
                    .to_vec(),
            )
        })
        .collect()
}

fn fit_quantizer(a: FitArgs) -> Result<()> {
    let method = WeightQuantizer::from_name(&a.method).map_err(|e| relabel(e, "method"))?;
    let dist_kind = match a.dist.as_str() {
        "gaussian" => DistKind::Gaussian,
        "empirical" => DistKind::Empirical,
        d => {
            return Err(Error::invalid(
                "dist",
                format!("expected gaussian or empirical, got '{d}'"),
            ))
        }
    };
    if a.k < 2 || a.k > 256 {
        return Err(Error::invalid(
            "k",
            format!("must lie in 2..=256, got {}", a.k),
        ));
    }
    let model = container::load(&a.model)?;
    let mut out = Vec::new();
    println!("layer,params,mse,normality_w");
    for (l, w) in weight_layers(&model) {
        let spec = match method {
            WeightQuantizer::KQuantile => {
                let d = match dist_kind {
                    DistKind::Gaussian => DistModel::fit_gaussian(&w)?,
                    DistKind::Empirical => {
                        DistModel::fit_empirical(&w, dist::DEFAULT_GRID_SIZE.min(w.len()))?
                    }
                };
                quant::build_kquantile(&d, a.k)?
            }
            WeightQuantizer::KMeans => quant::lloyd_max(&w, a.k, LloydMaxOptions::default())?.spec,
            WeightQuantizer::Uniform => quant::build_uniform(
                DistModel::fit_gaussian(&w)?.sigma(),
                UNIFORM_RANGE_SIGMAS,
                a.k,
            )?,
        };
        let mse = quant::mse(&spec, &w)?;
        let stat = dist::normality_stat(&w)?;
        println!("{l},{},{mse:.6e},{stat:.4}", w.len());
        out.push(Record {
            name: format!("l{l}.spec"),
            kind: kind::BINS,
            dims: [1, 1, 1, 1],
            data: Payload::Real(vec![a.k as f64]),
            spec: Some(spec),
            codebook: None,
        });
    }
    if let Some(p) = a.out {
        fs::write(&p, container::encode(&out)?)?;
        eprintln!("wrote {} quantizers to {}", out.len(), p.display());
    }
    Ok(())
}

fn relabel(e: Error, field: &str) -> Error {
    match e {
        Error::Invalid { reason, .. } => Error::invalid(field, reason),
        other => other,
    }
}

fn load_config(a: &TrainArgs) -> Result<ExperimentConfig> {
    let mut c = match &a.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(v) = a.bits_w {
        c.bits_w = v;
    }
    if let Some(v) = a.bits_a {
        c.bits_a = v;
    }
    if let Some(v) = a.stages {
        c.stages = v;
    }
    if let Some(v) = a.restarts {
        c.restarts = v;
    }
    if let Some(v) = &a.method {
        c.quantizer = v.clone();
    }
    c.validate()?;
    for &n in &a.sweep_stages {
        if n > c.architecture()?.mac_layers() {
            return Err(Error::invalid(
                "sweep_stages",
                format!("{n} exceeds the number of conv/dense layers"),
            ));
        }
    }
    Ok(c)
}

fn limit(d: Dataset, n: Option<usize>) -> Dataset {
    match n {
        Some(n) if n < d.len() => d.head(n),
        _ => d,
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let c = load_config(&a)?;
    let format = c.data_format()?;
    let root = data_root(a.data.as_deref(), &c.dataset);
    let train_set = limit(
        data::load(&root, format, Split::Train, c.seed)?,
        c.train_samples,
    );
    let test_set = data::load(&root, format, Split::Test, c.seed)?;
    let arch = c.architecture()?;
    let s = c.train_settings();

    let start = match (&c.pretrained, c.regime) {
        (Some(p), Regime::Finetune) => container::load(p)?.net,
        (_, Regime::Finetune) => {
            let mut net = models::build(arch, train_set.sample_shape(), train_set.classes, c.seed)?;
            let losses = sched::train_float(
                &mut net,
                &train_set,
                c.baseline_epochs,
                &c.baseline_settings(),
            )?;
            let acc = qmodel::accuracy(
                |x| net.infer(x, &RunOptions::inference()),
                &test_set.images,
                &test_set.labels,
            )?;
            eprintln!(
                "baseline: {} epochs, final loss {:.4}, test accuracy {:.4}",
                losses.len(),
                losses.last().copied().unwrap_or(f64::NAN),
                acc
            );
            net
        }
        (_, Regime::Scratch) => {
            models::build(arch, train_set.sample_shape(), train_set.classes, c.seed)?
        }
    };
    let (quantizer, dist_kind, act_method) =
        (c.weight_quantizer()?, c.dist_kind()?, c.act_method()?);
    let new_model = |net| -> Result<QuantModel> {
        let mut m = QuantModel::new(net, c.bits_w, c.bits_a, quantizer, dist_kind)?;
        m.act_method = act_method;
        Ok(m)
    };
    if let Some(p) = &a.baseline_out {
        container::save(&new_model(start.clone())?, p)?;
    }
    let rd = RunData {
        train: &train_set,
        eval: &test_set,
    };
    let layers = arch.mac_layers();

    if !a.sweep_stages.is_empty() {
        // Every stage count gets the same epoch budget as the one-stage-per-layer plan.
        let budget = layers * c.epochs_per_stage;
        let mut csv = String::from("stages,epochs_per_stage,accuracy\n");
        for &n in &a.sweep_stages {
            let n = if n == 0 { layers } else { n };
            let mut m = new_model(start.clone())?;
            let epochs = budget.div_ceil(n);
            let plan = StagePlan::new(layers, n, epochs, c.restarts)?;
            let out = sched::run_schedule(&mut m, &plan, &rd, &s)?;
            let acc = *out.iteration_accuracy.last().unwrap();
            eprintln!("stages {n}: accuracy {acc:.4}");
            csv.push_str(&format!("{n},{epochs},{acc:.6}\n"));
        }
        fs::write(&a.log, csv)?;
        return Ok(());
    }

    let mut m = new_model(start)?;
    let plan = StagePlan::new(layers, c.stages, c.epochs_per_stage, c.restarts)?;
    let out = sched::run_schedule(&mut m, &plan, &rd, &s)?;
    fs::write(&a.log, sched::records_csv(&out.records))?;
    container::save(&m, &a.out)?;
    eprintln!(
        "quantized {}/{} bits, {} stages x {} restarts: test accuracy {:.4}; wrote {}",
        c.bits_w,
        c.bits_a,
        plan.blocks.len(),
        plan.restart_iterations,
        out.iteration_accuracy.last().unwrap(),
        a.out.display()
    );
    Ok(())
}

fn bops_cmd(a: BopsArgs) -> Result<()> {
    let arch = if bops::CATALOG.contains(&a.arch.as_str()) {
        bops::arch_catalog(&a.arch)?
    } else if Path::new(&a.arch).is_file() {
        bops::parse_arch(&fs::read_to_string(&a.arch)?)?
    } else {
        return Err(Error::invalid(
            "arch",
            format!(
                "'{}' is neither a catalog architecture ({}) nor a file",
                a.arch,
                bops::CATALOG.join(", ")
            ),
        ));
    };
    let r = bops::model_bops(&arch, a.bits_w, a.bits_a, a.quantize_first_last)?;
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(r.to_csv().as_bytes())?;
    eprintln!("{:.2} GBOPs, {:.2} Mbit", r.total_gbops(), r.size_mbit());
    if let Some(p) = a.accuracy {
        writeln!(stdout)?;
        stdout.write_all(
            bops::accuracy_table(&fs::read_to_string(p)?, a.quantize_first_last)?.as_bytes(),
        )?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let format = DataFormat::from_name(&a.format).map_err(|e| relabel(e, "format"))?;
    let root = a
        .data
        .clone()
        .unwrap_or_else(|| data::resolve_root(None, default_subdir(format)));
    let test = limit(data::load(&root, format, Split::Test, 0)?, a.limit);
    let model = container::load(&a.model)?;
    let acc = match a.mode {
        EvalMode::Float => qmodel::accuracy(
            |x| model.net.infer(x, &RunOptions::inference()),
            &test.images,
            &test.labels,
        )?,
        EvalMode::Simulated | EvalMode::Lut => {
            let q = qinfer::compile(&model, a.frac_bits)?;
            match a.mode {
                EvalMode::Lut => qmodel::accuracy(
                    |x| qinfer::quantized_forward(&q, x),
                    &test.images,
                    &test.labels,
                )?,
                _ => qmodel::accuracy(
                    |x| qinfer::simulate_quantized(&q, x),
                    &test.images,
                    &test.labels,
                )?,
            }
        }
    };
    let mode = match a.mode {
        EvalMode::Float => "float",
        EvalMode::Simulated => "simulated",
        EvalMode::Lut => "lut",
    };
    println!("{mode} accuracy {acc:.4} on {} samples", test.len());
    if let Some(p) = a.log {
        let new = !p.exists();
        let mut f = fs::OpenOptions::new().create(true).append(true).open(&p)?;
        if new {
            writeln!(f, "model,mode,samples,accuracy")?;
        }
        writeln!(f, "{},{mode},{},{acc:.6}", a.model.display(), test.len())?;
    }
    Ok(())
}

fn datasets(a: DatasetsArgs) -> Result<()> {
    let base = a
        .root
        .or_else(|| std::env::var_os("UNIQ_DATA_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"));
    println!("format,path,train,test");
    for format in [
        DataFormat::MnistIdx,
        DataFormat::Cifar10Bin,
        DataFormat::Synthetic,
    ] {
        let root = base.join(default_subdir(format));
        let count = |split| {
            data::load(&root, format, split, 0)
                .map_or_else(|_| "missing".to_string(), |d| d.len().to_string())
        };
        let path = if format == DataFormat::Synthetic {
            "-".to_string()
        } else {
            root.display().to_string()
        };
        println!(
            "{},{path},{},{}",
            format.name(),
            count(Split::Train),
            count(Split::Test)
        );
    }
    Ok(())
}
