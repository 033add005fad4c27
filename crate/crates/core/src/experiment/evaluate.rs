//! Test-set evaluation of a partially trained model: task-aware and
//! task-inferred accuracy over seen tasks, plus entropy summaries over every
//! split of the stream.

use super::config::EvalConfig;
use crate::data::{Split, TaskStream};
use crate::error::Result;
use crate::model::FactorizedNet;
use crate::oracle::{self, TaskStatistics};
use crate::rng;
use crate::tensor::Tensor;
use std::time::Instant;

pub struct StageEval {
    pub acc_task: Vec<f64>,
    pub acc_class: Vec<f64>,
    pub task_inference: f64,
    pub entropy: Option<Vec<f64>>,
    pub seconds: f64,
}

/// Evaluate after `stats.len()` tasks have been trained. `stage` only salts
/// the entropy ensemble's random streams.
pub fn evaluate_stage(
    net: &FactorizedNet,
    stats: &[TaskStatistics],
    stream: &TaskStream,
    cfg: &EvalConfig,
    seed: u64,
    stage: usize,
) -> Result<StageEval> {
    let tick = Instant::now();
    let seen = stats.len();
    assert!(seen > 0 && seen <= stream.num_tasks());

    // Compose every seen task's weights once.
    let mode = cfg.score_mode;
    let weights: Vec<_> = (0..seen).map(|t| net.task_weights(t, mode)).collect();

    let mut acc_task = Vec::with_capacity(seen);
    let mut acc_class = Vec::with_capacity(seen);
    let mut inferred_hits = 0usize;
    let mut total = 0usize;

    for tau in 0..seen {
        let view = stream.task(tau);
        let n = view.n_test();
        let positions: Vec<usize> = (0..n).collect();
        let mut task_hits = 0usize;
        let mut class_hits = 0usize;

        for chunk in positions.chunks(cfg.eval_batch) {
            let x = view.inputs(Split::Test, chunk);
            let labels = view.local_labels(Split::Test, chunk);

            let pred = FactorizedNet::forward_with_weights(&weights[tau], &x).argmax_rows();
            task_hits += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();

            let inferred = oracle::infer_tasks(stats, &oracle::features(net, &x, mode));
            inferred_hits += inferred.iter().filter(|&&t| t == tau).count();

            // Group rows by inferred task so each group runs one forward pass.
            for t in 0..seen {
                let rows: Vec<usize> = (0..x.rows()).filter(|&r| inferred[r] == t).collect();
                if rows.is_empty() {
                    continue;
                }
                let sub = Tensor::matrix(
                    rows.len(),
                    x.cols(),
                    rows.iter().flat_map(|&r| x.row(r).to_vec()).collect(),
                );
                let pred = FactorizedNet::forward_with_weights(&weights[t], &sub).argmax_rows();
                if t == tau {
                    class_hits +=
                        pred.iter().zip(rows.iter()).filter(|(p, &r)| **p == labels[r]).count();
                }
            }
        }
        total += n;
        acc_task.push(task_hits as f64 / n as f64);
        acc_class.push(class_hits as f64 / n as f64);
    }

    let entropy = if cfg.entropy_samples_per_split > 0 {
        let mut per_split = Vec::with_capacity(stream.num_tasks());
        for tau in 0..stream.num_tasks() {
            let view = stream.task(tau);
            let n = view.n_test();
            let k = cfg.entropy_samples_per_split.min(n);
            let mut pick_rng =
                rng::stream(seed, &[rng::tag::SHUFFLE, rng::tag::ENSEMBLE, stage as u64, tau as u64]);
            let positions: Vec<usize> =
                rand::seq::index::sample(&mut pick_rng, n, k).into_vec();
            let x = view.inputs(Split::Test, &positions);
            let h = oracle::predictive_entropy(
                net,
                stats,
                &x,
                mode,
                cfg.entropy_ensemble,
                seed,
                &[stage as u64, tau as u64],
            );
            per_split.push(h.iter().sum::<f64>() / h.len() as f64);
        }
        Some(per_split)
    } else {
        None
    };

    Ok(StageEval {
        acc_task,
        acc_class,
        task_inference: inferred_hits as f64 / total as f64,
        entropy,
        seconds: tick.elapsed().as_secs_f64(),
    })
}
