use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nncomp::config::{ExperimentConfig, DEFAULT_QAT_EPOCHS, DEFAULT_STUDENT_EPOCHS, DEFAULT_TEACHER_EPOCHS};
use nncomp::fetch::{self, FetchConfig};
use nncomp::harness::{self, MetricsRow, Runner, Scale, Splits};
use nncomp::store::{self, Policy};
use nncomp::{Error, Result};
use nncomp_core::data::DatasetKind;
use nncomp_core::distill::{self, DistillConfig};
use nncomp_core::prune::{self, PruneConfig, PruneScope, ScheduleKind};
use nncomp_core::quant::{self, QatConfig, QatStart, QuantizedModel};
use nncomp_core::train::{self, TrainConfig};
use nncomp_core::{zoo, Model};

#[derive(Parser)]
#[command(name = "nncomp", version, about = "Distill, prune and quantize small CNN classifiers")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long, default_value = "mnist")]
    dataset: DatasetKind,
    /// Registry name (mnist_teacher, mnist_ta, mnist_student, cifar_*).
    #[arg(long)]
    model: Option<String>,
    #[arg(long, default_value_t = 1234)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Experiment config; for fetch-data only its [fetch] section is read.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root (defaults to $NNCOMP_DATA_DIR or ./data).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Train on the first N examples only.
    #[arg(long)]
    train_subset: Option<usize>,
}

impl Common {
    fn data_root(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(nncomp::default_data_root)
    }

    fn splits(&self) -> Result<Splits> {
        Splits::load(self.dataset, &self.data_root(), self.train_subset, 0.1)
    }

    fn train_config(&self, default_epochs: usize) -> TrainConfig {
        TrainConfig { epochs: self.epochs.unwrap_or(default_epochs), seed: self.seed, ..TrainConfig::default() }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Download and verify a dataset.
    FetchData(#[command(flatten)] Common),
    /// Train a registry model from scratch, or run a --config pipeline.
    Train(#[command(flatten)] Common),
    /// Distill a trained teacher file into --model.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 1.0)]
        soft_weight: f64,
    },
    /// Prune and fine-tune a trained model file.
    Prune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// const:S or poly:SI:SF
        #[arg(long, default_value = "const:0.8")]
        schedule: ScheduleKind,
        #[arg(long, default_value = "global")]
        scope: PruneScope,
        #[arg(long, default_value_t = 2)]
        prune_epochs: usize,
        #[arg(long, default_value_t = 2)]
        finetune_epochs: usize,
    },
    /// Post-training quantization, or quantization-aware fine-tuning with --qat.
    Quantize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 8)]
        bits: u32,
        #[arg(long)]
        qat: bool,
    },
    /// Test-set accuracy of a model file.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
    /// Raw and deflate-compressed size of a model file.
    Size {
        #[arg(long)]
        input: PathBuf,
    },
    /// Student accuracy across temperatures, with and without an assistant.
    SweepTemperature {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = harness::PAPER_TEMPERATURES)]
        temperatures: Vec<f64>,
        /// Reuse stage results across invocations.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// The full comparison matrix.
    Suite {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "desk")]
        scale: Scale,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Markdown and CSV tables from a metrics CSV.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = harness::BASELINE_LABEL)]
        baseline: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one pipeline from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.into(), source })
}

fn model_name(common: &Common, fallback: &str) -> String {
    common.model.clone().unwrap_or_else(|| fallback.to_string())
}

/// Evaluates, prints the metrics row and writes `{out}/{stem}.nncm` plus `metrics.csv`.
fn finish(common: &Common, stem: &str, label: &str, model: &Model, stored: &QuantizedModel, splits: &Splits) -> Result<()> {
    let accuracy = train::accuracy(model, &splits.test)?;
    let size = store::model_size(stored)?;
    let row = MetricsRow::new(label, accuracy, &size)?;
    println!("{label}: accuracy {accuracy:.2}%  size {:.4} MB (raw {:.4} MB)  efficacy {:.2}", row.size_mb, row.raw_mb, row.efficacy);
    if let Some(out) = &common.out {
        let path = out.join(format!("{stem}.nncm"));
        store::save_file(&path, stored, &Policy::Auto)?;
        let csv = out.join("metrics.csv");
        std::fs::write(&csv, harness::metrics_csv(&[row])).map_err(|source| Error::Io { path: csv, source })?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn run_config(path: &Path, data_dir: Option<PathBuf>, cache: Option<PathBuf>) -> Result<()> {
    let mut cfg = ExperimentConfig::parse(&read(path)?)?;
    if data_dir.is_some() {
        cfg.data_dir = data_dir;
    }
    let root = cfg.data_dir.clone().unwrap_or_else(nncomp::default_data_root);
    let mut runner = Runner::load(cfg.dataset, &root, cfg.train_subset, cfg.validation_fraction)?;
    if let Some(c) = cache {
        runner = runner.with_cache_dir(c);
    }
    let out = runner.run(&cfg)?;
    println!("{}", harness::metrics_csv(&[out.row]).trim_end());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::FetchData(common) => {
            let cfg = match &common.config {
                Some(p) => FetchConfig::from_text(&read(p)?)?,
                None => FetchConfig::default(),
            };
            let dir = fetch::fetch(common.dataset, &common.data_root(), &cfg)?;
            println!("{} ready in {}", common.dataset.name(), dir.display());
        }
        Command::Train(common) => {
            if let Some(cfg) = &common.config {
                return run_config(cfg, common.data_dir.clone(), None);
            }
            let name = model_name(&common, harness::family(common.dataset).0);
            let splits = common.splits()?;
            let spec = zoo::build(&name)?;
            let model = train::train_supervised(&spec, &splits.train, Some(&splits.validation), &common.train_config(DEFAULT_TEACHER_EPOCHS))?;
            finish(&common, "train", &name, &model, &quant::ptq(&model, 32)?, &splits)?;
        }
        Command::Distill { common, teacher, temperature, soft_weight } => {
            let name = model_name(&common, harness::family(common.dataset).2);
            let splits = common.splits()?;
            let teacher = store::load_model(&std::fs::read(&teacher).map_err(|source| Error::Io { path: teacher, source })?)?;
            let cfg = DistillConfig { temperature, soft_weight, train: common.train_config(DEFAULT_STUDENT_EPOCHS) };
            let student = distill::distill(&teacher, &zoo::build(&name)?, &splits.train, Some(&splits.validation), &cfg)?;
            finish(&common, "distill", &format!("{name} (T={temperature})"), &student, &quant::ptq(&student, 32)?, &splits)?;
        }
        Command::Prune { common, input, schedule, scope, prune_epochs, finetune_epochs } => {
            let splits = common.splits()?;
            let model = store::load_file(&input)?.dequantize()?;
            let mut cfg = PruneConfig::new(schedule, scope);
            cfg.prune_epochs = prune_epochs;
            cfg.finetune_epochs = finetune_epochs;
            cfg.train = common.train_config(0);
            let pruned = prune::prune_and_finetune(&model, &splits.train, Some(&splits.validation), &cfg)?;
            println!("sparsity {:.4}", prune::measure_sparsity(&pruned, scope));
            let label = format!("{} {}", scope.name(), schedule.label());
            finish(&common, "prune", &label, &pruned, &quant::ptq(&pruned, 32)?, &splits)?;
        }
        Command::Quantize { common, input, bits, qat } => {
            let splits = common.splits()?;
            let model = store::load_file(&input)?.dequantize()?;
            let (label, stored) = if qat {
                let cfg = QatConfig { train: common.train_config(DEFAULT_QAT_EPOCHS), ..QatConfig::default() };
                ("qat".to_string(), quant::qat_train(QatStart::Pretrained(&model), &splits.train, Some(&splits.validation), &cfg)?.quantized)
            } else {
                (format!("ptq{bits}"), quant::ptq(&model, bits)?)
            };
            finish(&common, &label, &label, &stored.dequantize()?, &stored, &splits)?;
        }
        Command::Eval { common, input } => {
            let splits = common.splits()?;
            let stored = store::load_file(&input)?;
            let label = input.display().to_string();
            finish(&Common { out: None, ..common }, "eval", &label, &stored.dequantize()?, &stored, &splits)?;
        }
        Command::Size { input } => {
            let bytes = std::fs::read(&input).map_err(|source| Error::Io { path: input.clone(), source })?;
            store::load(&bytes)?;
            let size = store::measure_size(&bytes);
            println!("raw {} bytes ({:.4} MB), compressed {} bytes ({:.4} MB)", size.raw_bytes, size.raw_mb(), size.compressed_bytes, size.size_mb());
        }
        Command::SweepTemperature { common, temperatures, cache } => {
            let mut runner = Runner::load(common.dataset, &common.data_root(), common.train_subset, 0.1)?;
            if let Some(c) = cache {
                runner = runner.with_cache_dir(c);
            }
            let rows = harness::temperature_sweep(&mut runner, common.seed, &temperatures)?;
            let csv = harness::sweep_csv(&rows);
            print!("{csv}");
            if let Some(out) = &common.out {
                std::fs::create_dir_all(out).map_err(|source| Error::Io { path: out.clone(), source })?;
                let p = out.join("sweep.csv");
                std::fs::write(&p, csv).map_err(|source| Error::Io { path: p, source })?;
            }
        }
        Command::Suite { common, scale, cache } => {
            let out = harness::paper_suite(scale, &common.data_root(), cache.as_deref(), common.seed)?;
            println!("{}", out.mnist.markdown);
            println!("{}", harness::efficacy_table(&out.mnist.rows));
            print!("{}", harness::sweep_csv(&out.sweep));
            println!("\n{}", out.cifar.markdown);
            if let Some(dir) = &common.out {
                out.write(dir)?;
            }
        }
        Command::Report { input, baseline, out } => {
            let rows = harness::parse_metrics_csv(&read(&input)?)?;
            let r = harness::report(&rows, &baseline)?;
            println!("{}", r.markdown);
            if let Some(out) = out {
                std::fs::write(&out, &r.csv).map_err(|source| Error::Io { path: out, source })?;
            }
        }
        Command::Run { config, data_dir, cache } => run_config(&config, data_dir, cache)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
