//! Experiment orchestration: task loop (register, train, freeze, fit
//! statistics, evaluate), ablation sweeps and export helpers.

pub mod checkpoint;
mod config;
mod evaluate;
mod metrics;
mod naive;

pub use config::{ArchConfig, EvalConfig, ExperimentConfig, MethodConfig, SCHEMA_VERSION};
pub use evaluate::{evaluate_stage, StageEval};
pub use metrics::{mean, MetricsRecord, StageMetrics};
pub use naive::run_naive;

use crate::data::{MnistBase, Split, StreamKind, TaskStream};
use crate::error::{Error, Result};
use crate::model::{FactorizedNet, ScoreMode};
use crate::oracle::{self, TaskStatistics};
use crate::trainer::{self, EpochLog};
use std::sync::Arc;
use std::time::Instant;

pub fn build_stream(cfg: &ExperimentConfig, base: Arc<MnistBase>) -> Result<TaskStream> {
    match cfg.benchmark {
        StreamKind::SplitMnist => TaskStream::split(base, cfg.tasks, cfg.seed),
        StreamKind::PermutedMnist => TaskStream::permuted(base, cfg.tasks, cfg.seed),
    }
}

pub struct RunOutput {
    pub metrics: MetricsRecord,
    pub net: FactorizedNet,
    pub stats: Vec<TaskStatistics>,
    pub stream: TaskStream,
}

/// Run the factor-dictionary methods end to end. Training for task t only
/// ever touches task t's view of the stream; every earlier task survives
/// only through frozen factors, its variational state and its statistics.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    base: Arc<MnistBase>,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<RunOutput> {
    cfg.validate()?;
    let stream = build_stream(cfg, base)?;
    let mut net = FactorizedNet::new(cfg.model_spec(stream.input_dim()), cfg.seed)?;
    let mut stats: Vec<TaskStatistics> = Vec::new();
    let mut union: Vec<Vec<bool>> =
        net.dicts.iter().map(|d| vec![false; d.truncation()]).collect();
    let mut stages = Vec::new();
    let start = Instant::now();

    for t in 0..cfg.tasks {
        let view = stream.task(t);
        net.register_task(view.n_train(), view.global_offset());
        let report = match cfg.method {
            MethodConfig::IbpWf => {
                trainer::train_task(&mut net, &view, t, &cfg.train, cfg.seed, on_epoch)?
            }
            MethodConfig::ConstWf { initial_factors, growth_per_task } => {
                let active = initial_factors + growth_per_task * t;
                trainer::train_task_fixed(&mut net, &view, t, active, &cfg.train, cfg.seed, on_epoch)?
            }
            MethodConfig::NaiveFinetune => {
                return Err(Error::Config(
                    "naive_finetune has no factor dictionary; use run_naive".into(),
                ))
            }
        };
        stats.push(oracle::fit_statistics(&net, &view, cfg.evaluation.score_mode)?);

        for (l, u) in union.iter_mut().enumerate() {
            for (k, active) in net.tasks[t].states[l].hard_active().iter().enumerate() {
                if *active {
                    u[k] = true;
                }
            }
        }
        let cumulative_active: Vec<usize> =
            union.iter().map(|u| u.iter().filter(|&&b| b).count()).collect();
        let dims = net.spec.layer_dims();
        let cumulative_params = cumulative_active
            .iter()
            .zip(&dims)
            .map(|(&count, &(j, m))| count * (j + m))
            .sum();

        let eval = evaluate_stage(&net, &stats, &stream, &cfg.evaluation, cfg.seed, t)?;
        stages.push(StageMetrics {
            after_task: t,
            avg_task: mean(&eval.acc_task),
            avg_class: mean(&eval.acc_class),
            acc_task: eval.acc_task,
            acc_class: eval.acc_class,
            task_inference: Some(eval.task_inference),
            entropy: eval.entropy,
            newly_frozen: report.newly_frozen.clone(),
            frozen: report.frozen_total.clone(),
            hard_active: report.hard_active.clone(),
            cumulative_active,
            cumulative_params,
            train_seconds: report.seconds,
            eval_seconds: eval.seconds,
        });
    }

    let metrics = MetricsRecord::new(cfg.clone(), stages, start.elapsed().as_secs_f64());
    Ok(RunOutput { metrics, net, stats, stream })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Alpha,
    Kappa,
}

/// Re-run the experiment once per value, entropy summaries disabled for
/// speed. Returns the sweep CSV plus every full record.
pub fn ablate(
    cfg: &ExperimentConfig,
    param: SweepParam,
    values: &[f64],
    base: Arc<MnistBase>,
) -> Result<(String, Vec<MetricsRecord>)> {
    if values.is_empty() {
        return Err(Error::Config("ablation needs at least one value".into()));
    }
    let mut csv = String::from(
        "value,final_avg_task,final_avg_class,task_inference,active_after_first_task,frozen_final\n",
    );
    let mut records = Vec::new();
    for &value in values {
        let mut c = cfg.clone();
        c.evaluation.entropy_samples_per_split = 0;
        match param {
            SweepParam::Alpha => c.architecture.alpha = value,
            SweepParam::Kappa => c.train.kappa = value,
        }
        let out = run_experiment(&c, base.clone(), &mut |_| {})?;
        let m = out.metrics;
        let first = &m.stages[0];
        let last = m.stages.last().unwrap();
        csv.push_str(&format!(
            "{},{:.6},{:.6},{},{},{}\n",
            value,
            m.final_avg_task,
            m.final_avg_class,
            last.task_inference.map_or(String::new(), |t| format!("{t:.6}")),
            first.hard_active.iter().sum::<usize>(),
            last.frozen.iter().sum::<usize>(),
        ));
        records.push(m);
    }
    Ok((csv, records))
}

/// Factor-level dump for score plots: one row per (layer, task, factor).
pub fn export_factors(net: &FactorizedNet) -> String {
    let mut out = String::from("layer,task,factor,r,post_p,expected_score,frozen\n");
    for (l, dict) in net.dicts.iter().enumerate() {
        for (t, task) in net.tasks.iter().enumerate() {
            let state = &task.states[l];
            let p = state.post_p();
            let scores = state.eval_scores(ScoreMode::Expected);
            for k in 0..dict.truncation() {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    l,
                    t,
                    k,
                    state.r.data()[k],
                    p.data()[k],
                    scores.data()[k],
                    dict.frozen[k] as u8,
                ));
            }
        }
    }
    out
}

/// Oracle feature dump of test examples: task label then the feature vector,
/// capped per split.
pub fn export_features(
    net: &FactorizedNet,
    stream: &TaskStream,
    per_split: usize,
    mode: ScoreMode,
) -> String {
    let mut out = String::new();
    for t in 0..stream.num_tasks() {
        let view = stream.task(t);
        let n = view.n_test().min(per_split);
        let positions: Vec<usize> = (0..n).collect();
        for chunk in positions.chunks(512) {
            let phi = oracle::features(net, &view.inputs(Split::Test, chunk), mode);
            for r in 0..phi.rows() {
                out.push_str(&t.to_string());
                for v in phi.row(r) {
                    out.push_str(&format!(",{v}"));
                }
                out.push('\n');
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn toy_base(dim: usize, per_class: usize, classes: u8) -> Arc<MnistBase> {
        let mut r = rng::stream(momentum_seed(), &[4]);
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for c in 0..classes {
            for _ in 0..per_class {
                let noise = rng::uniforms(&mut r, dim);
                for (i, u) in noise.iter().enumerate() {
                    let band = i * classes as usize / dim == c as usize;
                    pixels.push(if band { 190 + (60.0 * u) as u8 } else { (45.0 * u) as u8 });
                }
                labels.push(c);
            }
        }
        Arc::new(MnistBase {
            train_pixels: pixels.clone(),
            train_labels: labels.clone(),
            test_pixels: pixels,
            test_labels: labels,
            dim,
        })
    }

    fn momentum_seed() -> u64 {
        23
    }

    fn toy_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::split_mnist();
        cfg.tasks = 2;
        cfg.seed = 3;
        cfg.architecture = ArchConfig { hidden: vec![12], truncation: 10, alpha: 3.0 };
        cfg.train.epochs_expand = 3;
        cfg.train.epochs_finetune = 1;
        cfg.train.batch_size = 16;
        cfg.train.learning_rate = 5e-3;
        cfg.evaluation = EvalConfig {
            entropy_samples_per_split: 6,
            entropy_ensemble: 4,
            eval_batch: 64,
            ..EvalConfig::default()
        };
        cfg
    }

    #[test]
    fn tiny_run_produces_consistent_metrics() {
        let base = toy_base(20, 30, 4);
        let cfg = toy_config();
        let out = run_experiment(&cfg, base, &mut |_| {}).unwrap();
        let m = &out.metrics;
        assert_eq!(m.stages.len(), 2);
        assert_eq!(m.stages[0].acc_task.len(), 1);
        assert_eq!(m.stages[1].acc_task.len(), 2);
        for s in &m.stages {
            assert!((s.avg_task - mean(&s.acc_task)).abs() < 1e-12);
            assert!(s.acc_task.iter().all(|&a| (0.0..=1.0).contains(&a)));
            assert_eq!(s.entropy.as_ref().unwrap().len(), 2);
        }
        assert!(m.stages[1].cumulative_params >= m.stages[0].cumulative_params);
    }

    #[test]
    fn runs_are_deterministic() {
        let base = toy_base(20, 25, 4);
        let cfg = toy_config();
        let a = run_experiment(&cfg, base.clone(), &mut |_| {}).unwrap();
        let b = run_experiment(&cfg, base, &mut |_| {}).unwrap();
        for (sa, sb) in a.metrics.stages.iter().zip(&b.metrics.stages) {
            assert_eq!(sa.acc_task, sb.acc_task);
            assert_eq!(sa.acc_class, sb.acc_class);
            assert_eq!(sa.entropy, sb.entropy);
        }
        for (da, db) in a.net.dicts.iter().zip(&b.net.dicts) {
            assert_eq!(da.w_a.data(), db.w_a.data());
        }
    }

    #[test]
    fn const_wf_activates_on_schedule() {
        let base = toy_base(20, 25, 4);
        let mut cfg = toy_config();
        cfg.method = MethodConfig::ConstWf { initial_factors: 4, growth_per_task: 2 };
        let out = run_experiment(&cfg, base, &mut |_| {}).unwrap();
        assert_eq!(out.metrics.stages[0].hard_active, vec![4, 4]);
        assert_eq!(out.metrics.stages[1].hard_active, vec![6, 6]);
        assert_eq!(out.metrics.stages[1].cumulative_active, vec![6, 6]);
    }

    #[test]
    fn naive_runs_and_reports_lower_triangle() {
        let base = toy_base(20, 25, 4);
        let mut cfg = toy_config();
        cfg.method = MethodConfig::NaiveFinetune;
        let m = run_naive(&cfg, base).unwrap();
        assert_eq!(m.stages.len(), 2);
        assert_eq!(m.stages[1].acc_task.len(), 2);
        assert!(m.stages[1].avg_task <= 1.0);
    }

    #[test]
    fn export_factors_row_count_and_values() {
        let base = toy_base(20, 25, 4);
        let cfg = toy_config();
        let out = run_experiment(&cfg, base, &mut |_| {}).unwrap();
        let csv = export_factors(&out.net);
        let expected = 2 * 2 * cfg.architecture.truncation;
        assert_eq!(csv.lines().count(), 1 + expected);
        let scores = out.net.tasks[0].states[0].eval_scores(ScoreMode::Expected);
        let first = csv.lines().nth(1).unwrap();
        let cols: Vec<&str> = first.split(',').collect();
        assert_eq!(cols[0..3], ["0", "0", "0"]);
        let score: f64 = cols[5].parse().unwrap();
        assert!((score - scores.data()[0]).abs() < 1e-12);
    }

    #[test]
    fn ablation_emits_one_row_per_value() {
        let base = toy_base(20, 20, 4);
        let mut cfg = toy_config();
        cfg.train.epochs_expand = 2;
        cfg.train.epochs_finetune = 0;
        let (csv, records) = ablate(&cfg, SweepParam::Kappa, &[0.5, 1.0], base).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert_eq!(records.len(), 2);
        // kappa = 1.0 freezes nothing
        let last = csv.lines().nth(2).unwrap();
        assert!(last.ends_with(",0"), "{last}");
    }
}
