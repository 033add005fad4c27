//! Variational training of one task against the shared dictionaries.
//!
//! Each task runs two phases. The expansion phase optimizes everything:
//! dictionary factors, strengths, gate posteriors and stick posteriors, with
//! the KL regularizer attached; gates enter the forward pass as
//! straight-through binarized concrete samples. The fine-tune phase fixes the factor
//! selection: gates are pinned to the binary mask 1[post_p >= 1/2], the KL
//! term is dropped, and only strengths, biases and unfrozen dictionary
//! entries are polished, so the polished weights are exactly the ones
//! hard-mode evaluation composes. Factors that earlier tasks froze never
//! receive gradient in either phase; together with fresh optimizer state per
//! phase that keeps them bitwise untouched.

pub mod adam;

use crate::data::{Split, TaskView};
use crate::dist::{self, EPS};
use crate::error::{Error, Result};
use crate::model::FactorizedNet;
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};
use adam::Adam;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// How the KL term is weighted against the (dataset-scaled) likelihood in
/// each minibatch step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlScale {
    /// Divide the KL by the number of batches per epoch.
    #[default]
    BatchesPerEpoch,
    /// Keep the full KL in every step (the exact stochastic bound).
    Full,
    /// Drop regularization entirely (diagnostic).
    Off,
}

fn default_kappa() -> f64 {
    0.5
}
fn default_temperature() -> f64 {
    2.0 / 3.0
}
fn default_mc_samples() -> usize {
    1
}
fn default_grad_clip() -> f64 {
    10.0
}
fn default_kl_series_terms() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_expand: usize,
    pub epochs_finetune: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Freeze factors whose gate probability exceeds this after a task.
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Monte Carlo samples for the gate KL estimate.
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    /// Global gradient-norm clip; 0 disables.
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
    #[serde(default)]
    pub kl_scale: KlScale,
    /// Series terms in the Kumaraswamy KL expansion.
    #[serde(default = "default_kl_series_terms")]
    pub kl_series_terms: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.kappa > 0.0 && self.kappa <= 1.0) {
            return Err(Error::Config(format!(
                "kappa must lie in (0, 1], got {}",
                self.kappa
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.mc_samples == 0 {
            return Err(Error::Config("mc_samples must be at least 1".into()));
        }
        if self.kl_series_terms == 0 {
            return Err(Error::Config("kl_series_terms must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochLog {
    pub task: usize,
    pub phase: &'static str,
    pub epoch: usize,
    pub mean_loss: f64,
    /// Unscaled KL value averaged over steps (zero outside expansion).
    pub mean_kl: f64,
    pub train_accuracy: f64,
    pub hard_active: Vec<usize>,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Factors newly frozen by this task, per layer.
    pub newly_frozen: Vec<usize>,
    pub frozen_total: Vec<usize>,
    pub hard_active: Vec<usize>,
    pub seconds: f64,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Phase {
    Expand,
    Finetune,
    Fixed,
}

impl Phase {
    fn tag(self) -> u64 {
        match self {
            Phase::Expand => 0,
            Phase::Finetune => 1,
            Phase::Fixed => 2,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Phase::Expand => "expand",
            Phase::Finetune => "finetune",
            Phase::Fixed => "fixed",
        }
    }

    fn has_variational_leaves(self) -> bool {
        self == Phase::Expand
    }
}

struct StepOut {
    loss: f64,
    kl: f64,
    correct: usize,
}

/// Train task `t` (already registered) through expansion and fine-tuning,
/// then freeze the factors it relies on. `on_epoch` observes progress.
pub fn train_task(
    net: &mut FactorizedNet,
    view: &TaskView,
    t: usize,
    cfg: &TrainConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainReport> {
    cfg.validate()?;
    let start = Instant::now();
    let mut epochs = Vec::new();
    run_phase(net, view, t, cfg, seed, Phase::Expand, cfg.epochs_expand, None, &mut epochs, on_epoch)?;
    run_phase(net, view, t, cfg, seed, Phase::Finetune, cfg.epochs_finetune, None, &mut epochs, on_epoch)?;
    let newly_frozen = net.freeze_factors(t, cfg.kappa);
    Ok(TrainReport {
        epochs,
        newly_frozen,
        frozen_total: net.frozen_counts(),
        hard_active: net.hard_active_counts(t),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Constant-growth ablation: gates are a fixed binary mask activating the
/// first `active` factors, trained in a single likelihood-only phase over the
/// same total epoch budget, then frozen like the adaptive method.
pub fn train_task_fixed(
    net: &mut FactorizedNet,
    view: &TaskView,
    t: usize,
    active: usize,
    cfg: &TrainConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainReport> {
    cfg.validate()?;
    let start = Instant::now();
    net.set_fixed_mask(t, active)?;
    let k = net.spec.truncation;
    let mask: Vec<f64> = (0..k).map(|i| if i < active { 1.0 } else { 0.0 }).collect();
    let masks: Vec<Tensor> = (0..net.spec.num_layers())
        .map(|_| Tensor::vector(mask.clone()))
        .collect();
    let mut epochs = Vec::new();
    let total = cfg.epochs_expand + cfg.epochs_finetune;
    run_phase(net, view, t, cfg, seed, Phase::Fixed, total, Some(&masks), &mut epochs, on_epoch)?;
    let newly_frozen = net.freeze_factors(t, cfg.kappa);
    Ok(TrainReport {
        epochs,
        newly_frozen,
        frozen_total: net.frozen_counts(),
        hard_active: net.hard_active_counts(t),
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[allow(clippy::too_many_arguments)]
fn run_phase(
    net: &mut FactorizedNet,
    view: &TaskView,
    t: usize,
    cfg: &TrainConfig,
    seed: u64,
    phase: Phase,
    epochs: usize,
    masks: Option<&[Tensor]>,
    logs: &mut Vec<EpochLog>,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<()> {
    let n = view.n_train();
    if n == 0 {
        return Err(Error::Data(format!("task {t} has no training data")));
    }
    let bsz = cfg.batch_size.min(n);
    let num_batches = n.div_ceil(bsz);
    let layers = net.spec.num_layers();

    // Frozen masks are fixed for the whole task; freezing happens afterwards.
    let frozen: Vec<Vec<bool>> = net.dicts.iter().map(|d| d.frozen.clone()).collect();

    let mut sizes = Vec::new();
    for l in 0..layers {
        sizes.push(net.dicts[l].w_a.numel());
        sizes.push(net.dicts[l].w_b.numel());
        let st = &net.tasks[t].states[l];
        sizes.push(st.r.numel());
        if phase.has_variational_leaves() {
            sizes.push(st.post_p_raw.numel());
            sizes.push(st.c_raw.numel());
            sizes.push(st.d_raw.numel());
        }
        sizes.push(st.bias.numel());
    }
    let mut opt = Adam::new(cfg.learning_rate, 0.9, 0.999, &sizes);
    let mut mc_rng = rng::stream(seed, &[rng::tag::CONCRETE, t as u64, phase.tag()]);

    for epoch in 0..epochs {
        let tick = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng =
            rng::stream(seed, &[rng::tag::SHUFFLE, t as u64, phase.tag(), epoch as u64]);
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut kl_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(bsz) {
            let x = view.inputs(Split::Train, chunk);
            let labels = view.local_labels(Split::Train, chunk);
            let out = train_step(
                net, t, cfg, phase, masks, &x, &labels, num_batches, &frozen, &mut opt,
                &mut mc_rng,
            )?;
            loss_sum += out.loss;
            kl_sum += out.kl;
            correct += out.correct;
        }

        let log = EpochLog {
            task: t,
            phase: phase.name(),
            epoch,
            mean_loss: loss_sum / num_batches as f64,
            mean_kl: kl_sum / num_batches as f64,
            train_accuracy: correct as f64 / n as f64,
            hard_active: net.hard_active_counts(t),
            seconds: tick.elapsed().as_secs_f64(),
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    net: &mut FactorizedNet,
    t: usize,
    cfg: &TrainConfig,
    phase: Phase,
    masks: Option<&[Tensor]>,
    x: &Tensor,
    labels: &[usize],
    num_batches: usize,
    frozen: &[Vec<bool>],
    opt: &mut Adam,
    mc_rng: &mut ChaCha8Rng,
) -> Result<StepOut> {
    let layers = net.spec.num_layers();
    let k = net.spec.truncation;
    let batch = x.rows();
    let classes = net.spec.classes_per_task;

    struct LayerVars {
        wa: Var,
        wb: Var,
        r: Var,
        pp: Option<Var>,
        c: Option<Var>,
        d: Option<Var>,
        bias: Var,
    }

    // The tape lives in this scope only; its leaf clones are dropped before
    // we mutate the parameters in place.
    let (loss_val, kl_val, correct, grads) = {
        let tape = Tape::new();
        let mut lvars: Vec<LayerVars> = Vec::with_capacity(layers);
        for l in 0..layers {
            let st = &net.tasks[t].states[l];
            let variational = phase.has_variational_leaves();
            lvars.push(LayerVars {
                wa: tape.leaf(net.dicts[l].w_a.clone(), true),
                wb: tape.leaf(net.dicts[l].w_b.clone(), true),
                r: tape.leaf(st.r.clone(), true),
                pp: variational.then(|| tape.leaf(st.post_p_raw.clone(), true)),
                c: variational.then(|| tape.leaf(st.c_raw.clone(), true)),
                d: variational.then(|| tape.leaf(st.d_raw.clone(), true)),
                bias: tape.leaf(st.bias.clone(), true),
            });
        }

        let mut h = tape.constant(x.clone());
        let mut kl_total: Option<Var> = None;
        for (l, lv) in lvars.iter().enumerate() {
            let gate = match phase {
                Phase::Expand => {
                    let post_p = lv.pp.as_ref().unwrap().sigmoid().clamp(EPS, 1.0 - EPS);
                    let c = lv.c.as_ref().unwrap().softplus().clamp(EPS, f64::INFINITY);
                    let d = lv.d.as_ref().unwrap().softplus().clamp(EPS, f64::INFINITY);
                    let u_gate: Vec<Var> = (0..cfg.mc_samples)
                        .map(|_| tape.constant(Tensor::vector(rng::uniforms(mc_rng, k))))
                        .collect();
                    let u_stick = tape.constant(Tensor::vector(rng::uniforms(mc_rng, k)));
                    let v = dist::kumaraswamy::sample(&c, &d, &u_stick);
                    let pi = dist::stick::stick_breaking_pi(&v);
                    let st = &net.tasks[t].states[l];
                    let kl_gate =
                        dist::concrete::kl_mc(&post_p, &pi, cfg.temperature, &u_gate).sum();
                    let kl_stick = dist::kumaraswamy::kl_var(
                        &c,
                        &d,
                        &st.prior_c,
                        &st.prior_d,
                        cfg.kl_series_terms,
                    )
                    .sum();
                    let kl_layer = kl_gate.add(&kl_stick);
                    kl_total = Some(match kl_total {
                        Some(acc) => acc.add(&kl_layer),
                        None => kl_layer,
                    });
                    let soft = dist::concrete::sample(&post_p, cfg.temperature, &u_gate[0]);
                    // Straight-through binarization: the forward pass sees the
                    // thresholded sample (an exact Bernoulli(post_p) mask), the
                    // backward pass flows through the relaxation. Training then
                    // builds the task function only out of factors that are
                    // genuinely on, which is what hard evaluation composes;
                    // relying on a half-open gate costs likelihood every step
                    // the gate samples off, so useful gates are pushed to
                    // commit instead of hovering.
                    let sv = soft.value();
                    let to_hard = Tensor::new(
                        sv.shape().to_vec(),
                        sv.data().iter().map(|&g| f64::from(g >= 0.5) - g).collect(),
                    );
                    soft.add(&tape.constant(to_hard))
                }
                Phase::Finetune => tape.constant(
                    net.tasks[t].states[l].post_p().map(|p| if p >= 0.5 { 1.0 } else { 0.0 }),
                ),
                Phase::Fixed => tape.constant(masks.unwrap()[l].clone()),
            };
            let lambda = lv.r.mul(&gate);
            let z = h
                .matmul(&lv.wa)
                .mul(&lambda.broadcast_row(batch))
                .matmul(&lv.wb)
                .add(&lv.bias.broadcast_row(batch));
            h = if l + 1 == layers { z } else { z.relu() };
        }

        // Batch-sum likelihood with the KL spread across the epoch's batches:
        // one epoch applies the full negative ELBO exactly once.
        let logp = h.sub(&h.logsumexp_rows().broadcast_col(classes));
        let nll = logp.take_per_row(labels).sum().neg();
        let kl_weight = match cfg.kl_scale {
            KlScale::BatchesPerEpoch => 1.0 / num_batches as f64,
            KlScale::Full => 1.0,
            KlScale::Off => 0.0,
        };
        let loss = match &kl_total {
            Some(kl) => nll.add(&kl.scale(kl_weight)),
            None => nll,
        };

        let loss_val = loss.item();
        if !loss_val.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {loss_val} at task {t} ({})",
                phase.name()
            )));
        }
        let kl_val = kl_total.as_ref().map_or(0.0, Var::item);

        let pred = logp.value().argmax_rows();
        let correct = pred.iter().zip(labels).filter(|(p, l)| p == l).count();

        tape.backward(&loss);
        let mut grads = Vec::new();
        for lv in &lvars {
            for var in [Some(&lv.wa), Some(&lv.wb), Some(&lv.r), lv.pp.as_ref(), lv.c.as_ref(), lv.d.as_ref(), Some(&lv.bias)]
                .into_iter()
                .flatten()
            {
                grads.push(var.grad().unwrap_or_else(|| Tensor::zeros(var.shape())));
            }
        }
        (loss_val, kl_val, correct, grads)
    };

    // Silence gradients of frozen dictionary slices, then clip globally.
    let per_layer = if phase.has_variational_leaves() { 7 } else { 4 };
    let mut grads: Vec<Vec<f64>> = grads.into_iter().map(|g| g.data().to_vec()).collect();
    for l in 0..layers {
        let base = l * per_layer;
        let m = net.dicts[l].w_b.cols();
        let wa = &mut grads[base];
        for (kk, &f) in frozen[l].iter().enumerate() {
            if f {
                for row in 0..net.dicts[l].w_a.rows() {
                    wa[row * k + kk] = 0.0;
                }
            }
        }
        let wb = &mut grads[base + 1];
        for (kk, &f) in frozen[l].iter().enumerate() {
            if f {
                wb[kk * m..(kk + 1) * m].fill(0.0);
            }
        }
    }
    if cfg.grad_clip > 0.0 {
        let norm = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        if norm > cfg.grad_clip {
            let scale = cfg.grad_clip / norm;
            for g in &mut grads {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
        }
    }

    opt.begin_step();
    let mut slot = 0;
    for l in 0..layers {
        opt.update(slot, &mut net.dicts[l].w_a, &grads[slot]);
        slot += 1;
        opt.update(slot, &mut net.dicts[l].w_b, &grads[slot]);
        slot += 1;
        let st = &mut net.tasks[t].states[l];
        opt.update(slot, &mut st.r, &grads[slot]);
        slot += 1;
        if phase.has_variational_leaves() {
            opt.update(slot, &mut st.post_p_raw, &grads[slot]);
            slot += 1;
            opt.update(slot, &mut st.c_raw, &grads[slot]);
            slot += 1;
            opt.update(slot, &mut st.d_raw, &grads[slot]);
            slot += 1;
        }
        opt.update(slot, &mut st.bias, &grads[slot]);
        slot += 1;
    }

    Ok(StepOut { loss: loss_val, kl: kl_val, correct })
}
