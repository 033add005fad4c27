//! Per-stage evaluation records and their JSON/CSV serializations.

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Everything measured after training one task. Accuracy vectors cover only
/// the tasks seen so far, which makes the record's accuracy matrix lower
/// triangular. Factor fields are empty for the naive baseline.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageMetrics {
    pub after_task: usize,
    /// Task-aware (incremental task) test accuracy per seen task.
    pub acc_task: Vec<f64>,
    /// Task-inferred (incremental class) test accuracy per seen task.
    pub acc_class: Vec<f64>,
    pub avg_task: f64,
    pub avg_class: f64,
    /// Fraction of test examples whose task the oracle identified.
    pub task_inference: Option<f64>,
    /// Mean predictive entropy per split of the full stream (seen and
    /// unseen), incremental-class setting.
    pub entropy: Option<Vec<f64>>,
    pub newly_frozen: Vec<usize>,
    pub frozen: Vec<usize>,
    /// Hard-active factors of the task just trained, per layer.
    pub hard_active: Vec<usize>,
    /// Union of hard-active factors over all tasks so far, per layer.
    pub cumulative_active: Vec<usize>,
    /// Dictionary parameters inside the cumulative union: sum over layers of
    /// union * (fan_in + fan_out).
    pub cumulative_params: usize,
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub stages: Vec<StageMetrics>,
    pub final_avg_task: f64,
    pub final_avg_class: f64,
    pub total_seconds: f64,
}

impl MetricsRecord {
    pub fn new(config: ExperimentConfig, stages: Vec<StageMetrics>, total_seconds: f64) -> Self {
        let last = stages.last();
        MetricsRecord {
            schema_version: super::config::SCHEMA_VERSION,
            config,
            final_avg_task: last.map_or(0.0, |s| s.avg_task),
            final_avg_class: last.map_or(0.0, |s| s.avg_class),
            stages,
            total_seconds,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    /// One CSV row per (stage, evaluated task) pair: the accuracy matrix in
    /// long form plus the per-stage aggregates.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "after_task,eval_task,acc_task,acc_class,avg_task,avg_class,task_inference,cumulative_params\n",
        );
        for s in &self.stages {
            for (tau, (&at, &ac)) in s.acc_task.iter().zip(&s.acc_class).enumerate() {
                out.push_str(&format!(
                    "{},{},{:.6},{:.6},{:.6},{:.6},{},{}\n",
                    s.after_task,
                    tau,
                    at,
                    ac,
                    s.avg_task,
                    s.avg_class,
                    s.task_inference.map_or(String::new(), |t| format!("{t:.6}")),
                    s.cumulative_params,
                ));
            }
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let write = |name: &str, text: String| -> Result<()> {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|source| Error::DataIo { path, source })
        };
        std::fs::create_dir_all(dir)
            .map_err(|source| Error::DataIo { path: dir.to_path_buf(), source })?;
        write("metrics.json", self.to_json())?;
        write("metrics.csv", self.to_csv())
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_record() -> MetricsRecord {
        let stage = StageMetrics {
            after_task: 1,
            acc_task: vec![0.99, 0.97],
            acc_class: vec![0.95, 0.94],
            avg_task: 0.98,
            avg_class: 0.945,
            task_inference: Some(0.96),
            entropy: Some(vec![0.1, 0.2, 0.5]),
            newly_frozen: vec![3],
            frozen: vec![10],
            hard_active: vec![7],
            cumulative_active: vec![10],
            cumulative_params: 4020,
            train_seconds: 1.0,
            eval_seconds: 0.5,
        };
        MetricsRecord::new(ExperimentConfig::split_mnist(), vec![stage], 1.5)
    }

    #[test]
    fn json_round_trips() {
        let rec = sample_record();
        let back: MetricsRecord = serde_json::from_str(&rec.to_json()).unwrap();
        assert_eq!(back.stages[0].acc_task, rec.stages[0].acc_task);
        assert_eq!(back.final_avg_task, rec.final_avg_task);
    }

    #[test]
    fn csv_has_one_row_per_matrix_entry() {
        let rec = sample_record();
        let csv = rec.to_csv();
        assert_eq!(csv.lines().count(), 1 + 2);
        assert!(csv.lines().nth(1).unwrap().starts_with("1,0,0.99"));
    }

    #[test]
    fn averages_come_from_last_stage() {
        let rec = sample_record();
        assert_eq!(rec.final_avg_task, 0.98);
        assert_eq!(rec.final_avg_class, 0.945);
    }
}
