//! Experiment runner. Subcommands cover the full workflow: run a config,
//! sweep alpha/kappa, run the fixed-growth ablation, export factor scores or
//! oracle features, predict single examples and re-evaluate checkpoints.

use clap::{Args, Parser, Subcommand};
use ibpwf::data::{load_mnist, resolve_data_dir};
use ibpwf::error::{Error, Result};
use ibpwf::experiment::{
    self, checkpoint, evaluate_stage, ExperimentConfig, MethodConfig, MetricsRecord, RunOutput,
    SweepParam,
};
use ibpwf::oracle::{self, PredictSetting};
use ibpwf::trainer::EpochLog;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "ibpwf", about = "Continual learning with a dictionary of weight factors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonRun {
    /// Experiment config (JSON). Omit to use a built-in preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in preset when no config file is given.
    #[arg(long, default_value = "split", value_parser = ["split", "permuted-reduced", "permuted-full"])]
    preset: String,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for metrics, logs and the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    /// MNIST directory (falls back to config, $IBPWF_DATA_DIR, ./data).
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate the configured method over the task stream.
    Run(CommonRun),
    /// Rerun the experiment across IBP concentration values.
    AblateAlpha(SweepCmd),
    /// Rerun the experiment across freezing thresholds.
    AblateKappa(SweepCmd),
    /// Run the fixed-growth method with an explicit schedule.
    ConstWf(ConstWfCmd),
    /// Write factor scores of a checkpoint as CSV.
    ExportFactors(CheckpointCmd),
    /// Write oracle features of test examples as CSV.
    ExportFeatures(ExportFeaturesCmd),
    /// Predict one test example: task posterior, class, entropy.
    Infer(InferCmd),
    /// Re-evaluate a checkpoint over its test stream.
    Eval(CheckpointCmd),
}

#[derive(Args)]
struct SweepCmd {
    #[command(flatten)]
    common: CommonRun,
    /// Comma-separated sweep values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
}

#[derive(Args)]
struct ConstWfCmd {
    #[command(flatten)]
    common: CommonRun,
    /// Factors active for the first task.
    #[arg(long, default_value_t = 100)]
    initial_factors: usize,
    /// Additional factors activated by each later task.
    #[arg(long, default_value_t = 30)]
    growth_per_task: usize,
}

#[derive(Args)]
struct CheckpointCmd {
    /// Checkpoint directory written by `run`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportFeaturesCmd {
    #[command(flatten)]
    checkpoint: CheckpointCmd,
    /// Cap on exported examples per split.
    #[arg(long, default_value_t = 1000)]
    per_split: usize,
}

#[derive(Args)]
struct InferCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Which task's test split holds the example.
    #[arg(long)]
    task: usize,
    /// Example index within that split.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Ensemble size for the entropy estimate.
    #[arg(long, default_value_t = 100)]
    ensemble: usize,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(c) => cmd_run(c, None),
        Command::AblateAlpha(c) => cmd_sweep(c, SweepParam::Alpha),
        Command::AblateKappa(c) => cmd_sweep(c, SweepParam::Kappa),
        Command::ConstWf(c) => cmd_run(
            c.common,
            Some(MethodConfig::ConstWf {
                initial_factors: c.initial_factors,
                growth_per_task: c.growth_per_task,
            }),
        ),
        Command::ExportFactors(c) => cmd_export_factors(c),
        Command::ExportFeatures(c) => cmd_export_features(c),
        Command::Infer(c) => cmd_infer(c),
        Command::Eval(c) => cmd_eval(c),
    }
}

fn load_config(common: &CommonRun) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => match common.preset.as_str() {
            "split" => ExperimentConfig::split_mnist(),
            "permuted-reduced" => ExperimentConfig::permuted_mnist_reduced(),
            "permuted-full" => ExperimentConfig::permuted_mnist_full(),
            other => return Err(Error::Config(format!("unknown preset {other}"))),
        },
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn load_base(
    flag: Option<&Path>,
    cfg_dir: Option<&str>,
) -> Result<std::sync::Arc<ibpwf::data::MnistBase>> {
    let dir = match (flag, cfg_dir) {
        (Some(f), _) => f.to_path_buf(),
        (None, Some(d)) => PathBuf::from(d),
        (None, None) => resolve_data_dir(None),
    };
    load_mnist(&dir)
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text)
            .map_err(|source| Error::DataIo { path: path.to_path_buf(), source }),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn epoch_sink(out: Option<&Path>) -> Result<Box<dyn FnMut(&EpochLog)>> {
    let mut file = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)
                .map_err(|source| Error::DataIo { path: dir.to_path_buf(), source })?;
            let path = dir.join("epochs.jsonl");
            Some(std::fs::File::create(&path).map_err(|source| Error::DataIo { path, source })?)
        }
        None => None,
    };
    Ok(Box::new(move |log: &EpochLog| {
        eprintln!(
            "task {} {:>8} epoch {:>2}  loss {:<12.4} acc {:.4}  active {:?}",
            log.task, log.phase, log.epoch, log.mean_loss, log.train_accuracy, log.hard_active
        );
        if let Some(f) = &mut file {
            let line = serde_json::to_string(log).expect("epoch log serializes");
            let _ = writeln!(f, "{line}");
        }
    }))
}

fn summarize(m: &MetricsRecord) -> String {
    let last = m.stages.last();
    serde_json::to_string_pretty(&serde_json::json!({
        "final_avg_task": m.final_avg_task,
        "final_avg_class": m.final_avg_class,
        "task_inference": last.and_then(|s| s.task_inference),
        "cumulative_params": last.map(|s| s.cumulative_params),
        "total_seconds": m.total_seconds,
    }))
    .expect("summary serializes")
}

fn cmd_run(common: CommonRun, method_override: Option<MethodConfig>) -> Result<()> {
    let mut cfg = load_config(&common)?;
    if let Some(m) = method_override {
        cfg.method = m;
    }
    let base = load_base(common.data.as_deref(), cfg.data_dir.as_deref())?;

    let metrics = if cfg.method == MethodConfig::NaiveFinetune {
        let m = experiment::run_naive(&cfg, base)?;
        if let Some(dir) = &common.out {
            m.save(dir)?;
        }
        m
    } else {
        let mut sink = epoch_sink(common.out.as_deref())?;
        let RunOutput { metrics, net, stats, .. } = experiment::run_experiment(&cfg, base, &mut sink)?;
        if let Some(dir) = &common.out {
            metrics.save(dir)?;
            checkpoint::save(&dir.join("checkpoint"), &cfg, &net, &stats)?;
        }
        metrics
    };
    println!("{}", summarize(&metrics));
    Ok(())
}

fn cmd_sweep(cmd: SweepCmd, param: SweepParam) -> Result<()> {
    let cfg = load_config(&cmd.common)?;
    let base = load_base(cmd.common.data.as_deref(), cfg.data_dir.as_deref())?;
    let (csv, records) = experiment::ablate(&cfg, param, &cmd.values, base)?;
    if let Some(dir) = &cmd.common.out {
        std::fs::create_dir_all(dir)
            .map_err(|source| Error::DataIo { path: dir.to_path_buf(), source })?;
        let name = match param {
            SweepParam::Alpha => "sweep_alpha.csv",
            SweepParam::Kappa => "sweep_kappa.csv",
        };
        write_or_print(Some(&dir.join(name)), &csv)?;
        for (i, rec) in records.iter().enumerate() {
            write_or_print(Some(&dir.join(format!("sweep_{i}.json"))), &rec.to_json())?;
        }
    }
    print!("{csv}");
    Ok(())
}

fn cmd_export_factors(cmd: CheckpointCmd) -> Result<()> {
    let (_, net, _) = checkpoint::load(&cmd.checkpoint)?;
    write_or_print(cmd.out.as_deref(), &experiment::export_factors(&net))
}

fn cmd_export_features(cmd: ExportFeaturesCmd) -> Result<()> {
    let (cfg, net, _) = checkpoint::load(&cmd.checkpoint.checkpoint)?;
    let base = load_base(cmd.checkpoint.data.as_deref(), cfg.data_dir.as_deref())?;
    let stream = experiment::build_stream(&cfg, base)?;
    write_or_print(
        cmd.checkpoint.out.as_deref(),
        &experiment::export_features(&net, &stream, cmd.per_split, cfg.evaluation.score_mode),
    )
}

fn cmd_infer(cmd: InferCmd) -> Result<()> {
    let (cfg, net, stats) = checkpoint::load(&cmd.checkpoint)?;
    if stats.is_empty() {
        return Err(Error::Checkpoint("checkpoint holds no task statistics".into()));
    }
    let base = load_base(cmd.data.as_deref(), cfg.data_dir.as_deref())?;
    let stream = experiment::build_stream(&cfg, base)?;
    if cmd.task >= stream.num_tasks() {
        return Err(Error::Config(format!(
            "task {} out of range ({} tasks)",
            cmd.task,
            stream.num_tasks()
        )));
    }
    let view = stream.task(cmd.task);
    if cmd.index >= view.n_test() {
        return Err(Error::Config(format!(
            "index {} out of range ({} test examples)",
            cmd.index,
            view.n_test()
        )));
    }
    let x = view.inputs(ibpwf::data::Split::Test, &[cmd.index]);
    let example = view.example(ibpwf::data::Split::Test, cmd.index);

    let mode = cfg.evaluation.score_mode;
    let phi = oracle::features(&net, &x, mode);
    let posterior = oracle::task_posterior(&stats, &phi);
    let pred = oracle::predict(
        &net,
        &stats,
        &x,
        PredictSetting::IncrementalClass,
        mode,
        cmd.ensemble,
        cfg.seed,
        &[7, cmd.task as u64, cmd.index as u64],
    )
    .remove(0);
    let classes = net.spec.classes_per_task;
    let best = pred
        .log_probs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();

    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "true_task": example.task_id,
            "true_global_label": example.global_label,
            "inferred_task": pred.task,
            "predicted_local_class": best % classes,
            "predicted_global_class": stream.task(pred.task).global_label(best % classes),
            "task_posterior": posterior.row(0),
            "entropy_nats": pred.entropy,
        }))
        .expect("prediction serializes")
    );
    Ok(())
}

fn cmd_eval(cmd: CheckpointCmd) -> Result<()> {
    let (cfg, net, stats) = checkpoint::load(&cmd.checkpoint)?;
    if stats.is_empty() {
        return Err(Error::Checkpoint("checkpoint holds no task statistics".into()));
    }
    let base = load_base(cmd.data.as_deref(), cfg.data_dir.as_deref())?;
    let stream = experiment::build_stream(&cfg, base)?;
    let stage = stats.len() - 1;
    let eval = evaluate_stage(&net, &stats, &stream, &cfg.evaluation, cfg.seed, stage)?;
    let text = serde_json::to_string_pretty(&serde_json::json!({
        "after_task": stage,
        "acc_task": eval.acc_task,
        "acc_class": eval.acc_class,
        "avg_task": experiment::mean(&eval.acc_task),
        "avg_class": experiment::mean(&eval.acc_class),
        "task_inference": eval.task_inference,
        "entropy": eval.entropy,
        "seconds": eval.seconds,
    }))
    .expect("evaluation serializes");
    match cmd.out {
        Some(path) => std::fs::write(&path, text)
            .map_err(|source| Error::DataIo { path, source })?,
        None => println!("{text}"),
    }
    Ok(())
}
