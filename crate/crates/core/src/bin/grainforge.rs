//! Operator-facing CLI: synthesize data, train, evaluate, predict, and run
//! gradient checks.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage/config/parse error,
//! 3 numeric divergence.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use grainforge::dataset::{self, SynthClasses};
use grainforge::error::Error;
use grainforge::gradcheck;
use grainforge::model_io;
use grainforge::network::{self, BuiltinArch};
use grainforge::training::{self, MetricsRecord, Schedule, TrainConfig, TrainObserver};

#[derive(Parser)]
#[command(name = "grainforge", about = "Surface-defect CNN training and inspection tool")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic uneven-illumination defect dataset as PGM files.
    SynthData(SynthArgs),
    /// Train a network on a directory-labeled PGM dataset.
    Train(TrainArgs),
    /// Evaluate a saved model on a dataset.
    Eval(EvalArgs),
    /// Classify a single PGM image with a saved model.
    Predict(PredictArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory (one subdirectory per class is created).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 15)]
    per_class: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// binary (OK vs bad) or defects (patches vs scratches).
    #[arg(long, default_value = "binary")]
    mode: String,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root: <root>/<class>/*.pgm
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "paper2conv")]
    arch: String,
    /// Network input size as HxW.
    #[arg(long, default_value = "64x64")]
    input_size: String,
    #[arg(long, conflicts_with = "epochs")]
    steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.2)]
    val_frac: f64,
    #[arg(long, default_value_t = 100)]
    eval_every: usize,
    /// Model output path.
    #[arg(long)]
    out: PathBuf,
    /// Metrics CSV output path.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "paper2conv")]
    arch: String,
    #[arg(long, default_value = "12x12")]
    input_size: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn parse_input_size(s: &str) -> Result<(usize, usize), Error> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    let err = || Error::Config(format!("input size {s:?} is not of the form HxW"));
    if parts.len() != 2 {
        return Err(err());
    }
    let h: usize = parts[0].parse().map_err(|_| err())?;
    let w: usize = parts[1].parse().map_err(|_| err())?;
    if h == 0 || w == 0 {
        return Err(err());
    }
    Ok((h, w))
}

/// Verdict line for a single-image prediction, probability at 5 decimals.
fn verdict_line(class_name: &str, probability: f64) -> String {
    format!("this is a {class_name} with possibility {probability:.5}")
}

struct CsvObserver {
    writer: Option<BufWriter<File>>,
}

impl CsvObserver {
    fn open(path: Option<&PathBuf>) -> Result<CsvObserver, Error> {
        let writer = match path {
            Some(p) => {
                let mut w = BufWriter::new(File::create(p)?);
                writeln!(w, "{}", MetricsRecord::CSV_HEADER)?;
                Some(w)
            }
            None => None,
        };
        Ok(CsvObserver { writer })
    }

    fn finish(&mut self) -> Result<(), Error> {
        if let Some(w) = &mut self.writer {
            w.flush()?;
        }
        Ok(())
    }
}

impl TrainObserver for CsvObserver {
    fn metrics(&mut self, record: &MetricsRecord) {
        if let Some(w) = &mut self.writer {
            writeln!(w, "{}", record.to_csv_row()).expect("metrics CSV write failed");
        }
    }
}

fn cmd_synth(args: &SynthArgs) -> Result<(), Error> {
    let mode: SynthClasses = args.mode.parse()?;
    let data = dataset::synth_dataset(args.per_class, args.width, args.height, args.seed, mode);
    for class in &data.class_names {
        fs::create_dir_all(args.out.join(class))?;
    }
    let mut per_class_index = vec![0usize; data.class_names.len()];
    for sample in &data.samples {
        let class = &data.class_names[sample.label];
        let idx = per_class_index[sample.label];
        per_class_index[sample.label] += 1;
        let path = args.out.join(class).join(format!("{idx:04}.pgm"));
        dataset::write_pgm(&path, &sample.image)?;
    }
    for (class, count) in data.class_names.iter().zip(per_class_index) {
        println!("class={class} files={count}");
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<(), Error> {
    let arch: BuiltinArch = args.arch.parse()?;
    let (h, w) = parse_input_size(&args.input_size)?;
    let schedule = match (args.steps, args.epochs) {
        (Some(n), None) => Schedule::Steps(n),
        (None, Some(n)) => Schedule::Epochs(n),
        (None, None) => return Err(Error::Config("one of --steps or --epochs is required".into())),
        (Some(_), Some(_)) => unreachable!("clap rejects the combination"),
    };
    let data = dataset::load_dataset_dir(&args.data, h, w)?;
    let config = network::builtin_config(arch, [1, h, w], data.class_names.clone())?;
    let mut net = network::init(&config, args.seed)?;
    let cfg = TrainConfig {
        schedule,
        learning_rate: args.lr,
        seed: args.seed,
        eval_every: args.eval_every,
        checkpoint_every: 0,
        val_fraction: args.val_frac,
    };
    let mut observer = CsvObserver::open(args.metrics.as_ref())?;
    let result = training::train(&mut net, &data, &cfg, &mut observer)?;
    observer.finish()?;
    model_io::save(&net, &args.out)?;
    println!("steps={}", result.steps_run);
    println!("train_loss={:.6}", result.final_train.0);
    println!("train_accuracy={:.6}", result.final_train.1);
    if let Some((loss, acc)) = result.final_val {
        println!("val_loss={loss:.6}");
        println!("val_accuracy={acc:.6}");
    }
    println!("model={}", args.out.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<(), Error> {
    let net = model_io::load(&args.model)?;
    let (h, w) = (net.config.input_shape[1], net.config.input_shape[2]);
    let data = dataset::load_dataset_dir(&args.data, h, w)?;
    if data.class_names != net.config.class_names {
        return Err(Error::Config(format!(
            "model classes {:?} do not match dataset classes {:?}",
            net.config.class_names, data.class_names
        )));
    }
    let report = training::evaluate(&net, &data)?;
    println!("loss={:.6}", report.loss);
    println!("accuracy={:.6}", report.accuracy);
    for (class, acc) in data.class_names.iter().zip(&report.per_class_accuracy) {
        println!("accuracy_{class}={acc:.6}");
    }
    println!();
    println!("confusion matrix (rows = true class, columns = predicted):");
    let width = data.class_names.iter().map(|n| n.len()).max().unwrap_or(4).max(6);
    print!("{:width$}", "");
    for name in &data.class_names {
        print!(" {name:>width$}");
    }
    println!();
    for (name, row) in data.class_names.iter().zip(&report.confusion) {
        print!("{name:width$}");
        for v in row {
            print!(" {v:>width$}");
        }
        println!();
    }
    Ok(())
}

fn cmd_predict(args: &PredictArgs) -> Result<(), Error> {
    let net = model_io::load(&args.model)?;
    let (h, w) = (net.config.input_shape[1], net.config.input_shape[2]);
    let raw = dataset::load_pgm(&args.image)?;
    let image = dataset::resize_bilinear(&raw, h, w)?;
    let (class, probability) = network::predict(&net, &image)?;
    println!("{}", verdict_line(&net.config.class_names[class], probability));
    Ok(())
}

/// Returns true when all checks passed.
fn cmd_gradcheck(args: &GradcheckArgs) -> Result<bool, Error> {
    let arch: BuiltinArch = args.arch.parse()?;
    let (h, w) = parse_input_size(&args.input_size)?;
    let class_names = vec!["bad".to_string(), "OK".to_string()];
    let config = network::builtin_config(arch, [1, h, w], class_names)?;
    let report = gradcheck::run(&config, args.seed, args.tolerance)?;
    for check in &report.layers {
        let status = if check.worst_rel_err <= report.tolerance { "ok" } else { "FAIL" };
        println!("{}={:.3e} {}", check.name, check.worst_rel_err, status);
    }
    println!("worst={:.3e}", report.worst());
    println!("tolerance={:.3e}", report.tolerance);
    Ok(report.passed())
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Numeric { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result: Result<bool, Error> = match &cli.command {
        Command::SynthData(args) => cmd_synth(args).map(|_| true),
        Command::Train(args) => cmd_train(args).map(|_| true),
        Command::Eval(args) => cmd_eval(args).map(|_| true),
        Command::Predict(args) => cmd_predict(args).map(|_| true),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
