//! Catastrophic-forgetting reference: one plain MLP with a shared global
//! head, fine-tuned sequentially on each task with no regularization, no
//! freezing and no task inference.

use super::config::ExperimentConfig;
use super::metrics::{mean, MetricsRecord, StageMetrics};
use crate::data::Split;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};
use crate::trainer::adam::Adam;
use rand::seq::SliceRandom;
use std::sync::Arc;
use std::time::Instant;

struct Mlp {
    layers: Vec<(Tensor, Tensor)>,
}

impl Mlp {
    fn new(dims: &[usize], seed: u64) -> Mlp {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let (j, m) = (w[0], w[1]);
                let mut r = rng::stream(seed, &[rng::tag::INIT, l as u64, 9]);
                (
                    Tensor::matrix(j, m, rng::normals(&mut r, j * m, (2.0 / j as f64).sqrt())),
                    Tensor::zeros(vec![m]),
                )
            })
            .collect();
        Mlp { layers }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let z = h.matmul(w).add_row(b);
            h = if i + 1 == self.layers.len() { z } else { z.relu() };
        }
        h.log_softmax_rows()
    }
}

pub fn run_naive(cfg: &ExperimentConfig, base: Arc<crate::data::MnistBase>) -> Result<MetricsRecord> {
    cfg.validate()?;
    let stream = super::build_stream(cfg, base)?;
    let total_classes = stream.total_classes();
    let mut dims = vec![stream.input_dim()];
    dims.extend_from_slice(&cfg.architecture.hidden);
    dims.push(total_classes);
    let mut mlp = Mlp::new(&dims, cfg.seed);

    let clip = cfg.train.grad_clip;
    let epochs = cfg.train.epochs_expand + cfg.train.epochs_finetune;
    let run_start = Instant::now();
    let mut stages = Vec::new();

    for t in 0..cfg.tasks {
        let view = stream.task(t);
        let n = view.n_train();
        let bsz = cfg.train.batch_size.min(n);
        let sizes: Vec<usize> = mlp
            .layers
            .iter()
            .flat_map(|(w, b)| [w.numel(), b.numel()])
            .collect();
        let mut opt = Adam::new(cfg.train.learning_rate, 0.9, 0.999, &sizes);
        let train_start = Instant::now();

        for epoch in 0..epochs {
            let mut order: Vec<usize> = (0..n).collect();
            let mut sh = rng::stream(cfg.seed, &[rng::tag::SHUFFLE, t as u64, 9, epoch as u64]);
            order.shuffle(&mut sh);
            for chunk in order.chunks(bsz) {
                let x = view.inputs(Split::Train, chunk);
                let globals: Vec<usize> = view
                    .local_labels(Split::Train, chunk)
                    .into_iter()
                    .map(|l| view.global_label(l))
                    .collect();
                step(&mut mlp, &mut opt, &x, &globals, clip, t)?;
            }
        }
        let train_seconds = train_start.elapsed().as_secs_f64();

        // Evaluate all seen tasks with the single shared head.
        let eval_start = Instant::now();
        let mut acc_task = Vec::new();
        let mut acc_class = Vec::new();
        for tau in 0..=t {
            let v = stream.task(tau);
            let positions: Vec<usize> = (0..v.n_test()).collect();
            let mut task_hits = 0;
            let mut class_hits = 0;
            for chunk in positions.chunks(cfg.evaluation.eval_batch) {
                let x = v.inputs(Split::Test, chunk);
                let labels = v.local_labels(Split::Test, chunk);
                let logp = mlp.forward(&x);
                let off = v.global_offset();
                let classes = v.classes();
                for (r, &label) in labels.iter().enumerate() {
                    let row = logp.row(r);
                    let slice = &row[off..off + classes];
                    let local_pred = slice
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .map(|(i, _)| i)
                        .unwrap();
                    if local_pred == label {
                        task_hits += 1;
                    }
                    let global_pred = row
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .map(|(i, _)| i)
                        .unwrap();
                    if global_pred == v.global_label(label) {
                        class_hits += 1;
                    }
                }
            }
            acc_task.push(task_hits as f64 / v.n_test() as f64);
            acc_class.push(class_hits as f64 / v.n_test() as f64);
        }

        stages.push(StageMetrics {
            after_task: t,
            avg_task: mean(&acc_task),
            avg_class: mean(&acc_class),
            acc_task,
            acc_class,
            task_inference: None,
            entropy: None,
            newly_frozen: Vec::new(),
            frozen: Vec::new(),
            hard_active: Vec::new(),
            cumulative_active: Vec::new(),
            cumulative_params: dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum(),
            train_seconds,
            eval_seconds: eval_start.elapsed().as_secs_f64(),
        });
    }

    Ok(MetricsRecord::new(cfg.clone(), stages, run_start.elapsed().as_secs_f64()))
}

fn step(
    mlp: &mut Mlp,
    opt: &mut Adam,
    x: &Tensor,
    globals: &[usize],
    clip: f64,
    task: usize,
) -> Result<()> {
    let (loss_val, grads) = {
        let tape = Tape::new();
        let vars: Vec<(Var, Var)> = mlp
            .layers
            .iter()
            .map(|(w, b)| (tape.leaf(w.clone(), true), tape.leaf(b.clone(), true)))
            .collect();
        let mut h = tape.constant(x.clone());
        let rows = x.rows();
        for (i, (w, b)) in vars.iter().enumerate() {
            let z = h.matmul(w).add(&b.broadcast_row(rows));
            h = if i + 1 == vars.len() { z } else { z.relu() };
        }
        let classes = mlp.layers.last().unwrap().0.cols();
        let logp = h.sub(&h.logsumexp_rows().broadcast_col(classes));
        let loss = logp.take_per_row(globals).mean().neg();
        let loss_val = loss.item();
        if !loss_val.is_finite() {
            return Err(Error::Numeric(format!("non-finite naive loss at task {task}")));
        }
        tape.backward(&loss);
        let grads: Vec<Vec<f64>> = vars
            .iter()
            .flat_map(|(w, b)| [w, b])
            .map(|v| {
                v.grad()
                    .map(|g| g.data().to_vec())
                    .unwrap_or_else(|| vec![0.0; v.value().numel()])
            })
            .collect();
        (loss_val, grads)
    };
    let _ = loss_val;

    let mut grads = grads;
    if clip > 0.0 {
        let norm = grads.iter().flat_map(|g| g.iter()).map(|g| g * g).sum::<f64>().sqrt();
        if norm > clip {
            let s = clip / norm;
            grads.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= s));
        }
    }
    opt.begin_step();
    for (i, (w, b)) in mlp.layers.iter_mut().enumerate() {
        opt.update(2 * i, w, &grads[2 * i]);
        opt.update(2 * i + 1, b, &grads[2 * i + 1]);
    }
    Ok(())
}
