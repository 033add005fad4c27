//! The factorized network: shared per-layer factor dictionaries plus
//! per-task variational state.
//!
//! Layer l's effective weight for task t is
//!
//!   W = W_a diag(r * b) W_b
//!
//! where W_a (J x K) and W_b (K x M) are shared across tasks, r holds
//! task-specific factor strengths and b the (relaxed or hardened) factor
//! gates. Factors a completed task relied on are frozen: their W_a column and
//! W_b row never receive another gradient, which is what makes earlier tasks'
//! effective weights immutable.

use crate::dist::EPS;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{stable_sigmoid, stable_softplus, Tensor};
use serde::{Deserialize, Serialize};

/// Architecture description. `hidden` lists hidden widths; the output layer
/// has `classes_per_task` units and is factorized like the rest.
#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes_per_task: usize,
    /// Stick-breaking truncation K, shared by every layer.
    pub truncation: usize,
    /// IBP concentration; prior for task 0's sticks is Kumaraswamy(alpha, 1).
    pub alpha: f64,
}

impl ModelSpec {
    /// (fan-in, fan-out) of each factorized layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend_from_slice(&self.hidden);
        dims.push(self.classes_per_task);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn num_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.classes_per_task < 2 || self.truncation == 0 {
            return Err(Error::Config("degenerate model dimensions".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("need at least one nonzero hidden width".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Shared rank-one factor dictionary of one layer.
#[derive(Clone, Debug)]
pub struct FactorDictionary {
    /// J x K: column k is factor k's input direction.
    pub w_a: Tensor,
    /// K x M: row k is factor k's output direction.
    pub w_b: Tensor,
    pub frozen: Vec<bool>,
}

impl FactorDictionary {
    pub fn truncation(&self) -> usize {
        self.frozen.len()
    }

    pub fn frozen_count(&self) -> usize {
        self.frozen.iter().filter(|&&f| f).count()
    }
}

/// Per-task, per-layer variational state. The (post_p, c, d) parameters are
/// stored unconstrained (logit / inverse-softplus space) so the optimizer is
/// free-range; accessors return the constrained values.
#[derive(Clone, Debug)]
pub struct TaskFactorState {
    pub r: Tensor,
    pub post_p_raw: Tensor,
    pub c_raw: Tensor,
    pub d_raw: Tensor,
    /// Prior Kumaraswamy parameters, fixed at registration: (alpha, 1) for
    /// the first task, the previous task's posterior afterwards.
    pub prior_c: Tensor,
    pub prior_d: Tensor,
    pub bias: Tensor,
}

/// How evaluation turns the posterior into factor scores. Hard mode composes
/// weights from frozen factors only, so a task's effective weights never move
/// again once it finishes; expected mode is the smooth alternative but leaks
/// unfrozen low-probability factors that later tasks keep training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// lambda = r * post_p.
    Expected,
    /// lambda = r * 1[post_p >= 0.5].
    #[default]
    Hard,
}

impl TaskFactorState {
    pub fn post_p(&self) -> Tensor {
        self.post_p_raw.map(|x| stable_sigmoid(x).clamp(EPS, 1.0 - EPS))
    }

    pub fn c(&self) -> Tensor {
        self.c_raw.map(|x| stable_softplus(x).max(EPS))
    }

    pub fn d(&self) -> Tensor {
        self.d_raw.map(|x| stable_softplus(x).max(EPS))
    }

    pub fn eval_scores(&self, mode: ScoreMode) -> Tensor {
        let p = self.post_p();
        match mode {
            ScoreMode::Expected => self.r.mul(&p),
            ScoreMode::Hard => self
                .r
                .zip(&p, |r, p| if p >= 0.5 { r } else { 0.0 }),
        }
    }

    /// Scores from externally drawn gates (uncertainty ensembles).
    pub fn scores_with_gates(&self, gates: &[f64]) -> Tensor {
        assert_eq!(gates.len(), self.r.numel());
        Tensor::vector(
            self.r
                .data()
                .iter()
                .zip(gates)
                .map(|(&r, &g)| r * g)
                .collect(),
        )
    }

    pub fn hard_active(&self) -> Vec<bool> {
        self.post_p().data().iter().map(|&p| p >= 0.5).collect()
    }
}

/// One registered task: a state per layer plus bookkeeping the trainer and
/// oracle need.
#[derive(Clone, Debug)]
pub struct TaskEntry {
    pub states: Vec<TaskFactorState>,
    pub n_train: usize,
    pub global_offset: usize,
}

pub struct FactorizedNet {
    pub spec: ModelSpec,
    pub dicts: Vec<FactorDictionary>,
    pub tasks: Vec<TaskEntry>,
}

fn softplus_inv(y: f64) -> f64 {
    // ln(e^y - 1), stable at both ends
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl FactorizedNet {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<FactorizedNet> {
        spec.validate()?;
        let k = spec.truncation;
        let dicts = spec
            .layer_dims()
            .iter()
            .enumerate()
            .map(|(l, &(j, m))| {
                let mut rng_a = rng::stream(seed, &[rng::tag::INIT, l as u64, 0]);
                let mut rng_b = rng::stream(seed, &[rng::tag::INIT, l as u64, 1]);
                FactorDictionary {
                    w_a: Tensor::matrix(j, k, rng::normals(&mut rng_a, j * k, (2.0 / j as f64).sqrt())),
                    w_b: Tensor::matrix(k, m, rng::normals(&mut rng_b, k * m, (2.0 / k as f64).sqrt())),
                    frozen: vec![false; k],
                }
            })
            .collect();
        Ok(FactorizedNet { spec, dicts, tasks: Vec::new() })
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Add a task's variational state. The stick prior chains: task 0 gets
    /// (alpha, 1), task t the stored posterior of task t-1. Gate
    /// probabilities start at the prior's expected stick products, clamped to
    /// [0.01, 0.99]; strengths start at 1, biases at 0.
    pub fn register_task(&mut self, n_train: usize, global_offset: usize) -> usize {
        let k = self.spec.truncation;
        let t = self.tasks.len();
        let states = (0..self.spec.num_layers())
            .map(|l| {
                let (prior_c, prior_d) = if t == 0 {
                    (Tensor::full(vec![k], self.spec.alpha), Tensor::full(vec![k], 1.0))
                } else {
                    let prev = &self.tasks[t - 1].states[l];
                    (prev.c(), prev.d())
                };
                let mut prod = 1.0;
                let post_p_raw: Vec<f64> = prior_c
                    .data()
                    .iter()
                    .map(|&c0| {
                        prod *= c0 / (c0 + 1.0);
                        logit(prod.clamp(0.01, 0.99))
                    })
                    .collect();
                let c_raw = prior_c.map(softplus_inv);
                let d_raw = prior_d.map(softplus_inv);
                let m = self.spec.layer_dims()[l].1;
                TaskFactorState {
                    r: Tensor::full(vec![k], 1.0),
                    post_p_raw: Tensor::vector(post_p_raw),
                    c_raw,
                    d_raw,
                    prior_c,
                    prior_d,
                    bias: Tensor::zeros(vec![m]),
                }
            })
            .collect();
        self.tasks.push(TaskEntry { states, n_train, global_offset });
        t
    }

    /// Overwrite task `t`'s gates with a fixed mask activating the first
    /// `active` factors (the constant-growth ablation).
    pub fn set_fixed_mask(&mut self, t: usize, active: usize) -> Result<()> {
        let k = self.spec.truncation;
        if active > k {
            return Err(Error::Config(format!(
                "fixed mask wants {active} factors, truncation is {k}"
            )));
        }
        for state in &mut self.tasks[t].states {
            let raw: Vec<f64> = (0..k)
                .map(|i| logit(if i < active { 1.0 - EPS } else { EPS }))
                .collect();
            state.post_p_raw = Tensor::vector(raw);
        }
        Ok(())
    }

    /// Freeze every factor task `t` relies on (post_p > kappa). The mask only
    /// ever grows. Returns the newly frozen count per layer.
    pub fn freeze_factors(&mut self, t: usize, kappa: f64) -> Vec<usize> {
        let mut newly = Vec::with_capacity(self.dicts.len());
        for (dict, state) in self.dicts.iter_mut().zip(&self.tasks[t].states) {
            let p = state.post_p();
            let mut count = 0;
            for (k, flag) in dict.frozen.iter_mut().enumerate() {
                if !*flag && p.data()[k] > kappa {
                    *flag = true;
                    count += 1;
                }
            }
            newly.push(count);
        }
        newly
    }

    pub fn frozen_counts(&self) -> Vec<usize> {
        self.dicts.iter().map(|d| d.frozen_count()).collect()
    }

    /// Per-layer count of hard-active factors for task `t`.
    pub fn hard_active_counts(&self, t: usize) -> Vec<usize> {
        self.tasks[t]
            .states
            .iter()
            .map(|s| s.hard_active().iter().filter(|&&a| a).count())
            .collect()
    }

    /// Effective layer weight W_a diag(scores) W_b.
    pub fn compose_weight(&self, layer: usize, scores: &Tensor) -> Tensor {
        let dict = &self.dicts[layer];
        let (j, k) = (dict.w_a.rows(), dict.w_a.cols());
        assert_eq!(scores.numel(), k);
        let mut scaled = vec![0.0; j * k];
        let wa = dict.w_a.data();
        let s = scores.data();
        for row in 0..j {
            for col in 0..k {
                scaled[row * k + col] = wa[row * k + col] * s[col];
            }
        }
        Tensor::matrix(j, k, scaled).matmul(&dict.w_b)
    }

    /// Composed weights and biases of task `t` under an evaluation mode.
    pub fn task_weights(&self, t: usize, mode: ScoreMode) -> Vec<(Tensor, Tensor)> {
        self.tasks[t]
            .states
            .iter()
            .enumerate()
            .map(|(l, state)| {
                (self.compose_weight(l, &state.eval_scores(mode)), state.bias.clone())
            })
            .collect()
    }

    /// Forward pass through composed weights: ReLU between layers, row-wise
    /// log-softmax at the top. Rows are independent, so results do not depend
    /// on the batch split.
    pub fn forward_with_weights(weights: &[(Tensor, Tensor)], x: &Tensor) -> Tensor {
        let mut h = x.clone();
        for (i, (w, bias)) in weights.iter().enumerate() {
            let z = h.matmul(w).add_row(bias);
            h = if i + 1 == weights.len() { z } else { z.relu() };
        }
        h.log_softmax_rows()
    }

    /// Log class probabilities of task `t` on a batch (local classes).
    pub fn forward_eval(&self, t: usize, x: &Tensor, mode: ScoreMode) -> Tensor {
        Self::forward_with_weights(&self.task_weights(t, mode), x)
    }

    /// First-layer pre-activations under task `t`'s scores: the task
    /// oracle's feature map, an affine function of the input. The rectifier
    /// is deliberately not applied: it would park a point mass at zero in
    /// every coordinate that is dead for off-task inputs, which the oracle's
    /// Gaussian model fits badly.
    pub fn first_layer_features(&self, t: usize, x: &Tensor, mode: ScoreMode) -> Tensor {
        let state = &self.tasks[t].states[0];
        let w = self.compose_weight(0, &state.eval_scores(mode));
        x.matmul(&w).add_row(&state.bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            input_dim: 6,
            hidden: vec![5],
            classes_per_task: 2,
            truncation: 4,
            alpha: 2.0,
        }
    }

    #[test]
    fn compose_matches_outer_product_sum() {
        let net = FactorizedNet::new(tiny_spec(), 11).unwrap();
        let scores = Tensor::vector(vec![0.5, -1.2, 0.0, 2.0]);
        let w = net.compose_weight(0, &scores);
        let dict = &net.dicts[0];
        let (j, k, m) = (6, 4, 5);
        for a in 0..j {
            for b in 0..m {
                let mut s = 0.0;
                for f in 0..k {
                    s += scores.data()[f] * dict.w_a.at(a, f) * dict.w_b.at(f, b);
                }
                assert!((w.at(a, b) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn register_task_initializes_from_prior_chain() {
        let mut net = FactorizedNet::new(tiny_spec(), 1).unwrap();
        net.register_task(100, 0);
        let s = &net.tasks[0].states[0];
        assert_eq!(s.prior_c.data(), &[2.0; 4]);
        assert_eq!(s.prior_d.data(), &[1.0; 4]);
        assert_eq!(s.r.data(), &[1.0; 4]);
        // expected stick products (2/3)^k, clamped
        let p = s.post_p();
        for (i, &pi) in p.data().iter().enumerate() {
            let want = (2.0f64 / 3.0).powi(i as i32 + 1).clamp(0.01, 0.99);
            assert!((pi - want).abs() < 1e-9, "{pi} vs {want}");
        }
        // chain: task 1's prior equals task 0's posterior exactly
        net.register_task(100, 2);
        let prev = net.tasks[0].states[0].c();
        assert_eq!(net.tasks[1].states[0].prior_c.data(), prev.data());
    }

    #[test]
    fn freeze_is_monotone_and_thresholded() {
        let mut net = FactorizedNet::new(tiny_spec(), 1).unwrap();
        net.register_task(10, 0);
        {
            let s = &mut net.tasks[0].states[0];
            s.post_p_raw = Tensor::vector(vec![logit(0.9), logit(0.4), logit(0.51), logit(0.1)]);
        }
        // kappa = 1.0 freezes nothing (post_p is clamped below 1)
        let none = net.freeze_factors(0, 1.0);
        assert_eq!(net.dicts[0].frozen_count(), 0);
        assert!(none.iter().all(|&c| c == 0));
        let newly = net.freeze_factors(0, 0.5);
        assert_eq!(newly[0], 2);
        assert_eq!(net.dicts[0].frozen, vec![true, false, true, false]);
        // freezing again never unfreezes
        net.tasks[0].states[0].post_p_raw = Tensor::vector(vec![logit(0.1); 4]);
        net.freeze_factors(0, 0.5);
        assert_eq!(net.dicts[0].frozen, vec![true, false, true, false]);
    }

    #[test]
    fn hard_scores_zero_inactive_factors() {
        let mut net = FactorizedNet::new(tiny_spec(), 1).unwrap();
        net.register_task(10, 0);
        let s = &mut net.tasks[0].states[0];
        s.post_p_raw = Tensor::vector(vec![logit(0.9), logit(0.2), logit(0.5), logit(0.7)]);
        s.r = Tensor::vector(vec![2.0, 3.0, 4.0, 5.0]);
        let hard = s.eval_scores(ScoreMode::Hard);
        assert_eq!(hard.data(), &[2.0, 0.0, 4.0, 5.0]);
        let exp = s.eval_scores(ScoreMode::Expected);
        assert!((exp.data()[1] - 3.0 * 0.2).abs() < 1e-9);
    }

    #[test]
    fn batch_split_does_not_change_eval() {
        let mut net = FactorizedNet::new(tiny_spec(), 5).unwrap();
        net.register_task(10, 0);
        let mut rng = crate::rng::stream(3, &[77]);
        let x = Tensor::matrix(4, 6, crate::rng::normals(&mut rng, 24, 1.0));
        let full = net.forward_eval(0, &x, ScoreMode::Expected);
        for i in 0..4 {
            let one = Tensor::matrix(1, 6, x.row(i).to_vec());
            let single = net.forward_eval(0, &one, ScoreMode::Expected);
            for c in 0..2 {
                assert_eq!(single.at(0, c), full.at(i, c));
            }
        }
    }

    #[test]
    fn fixed_mask_counts() {
        let mut net = FactorizedNet::new(tiny_spec(), 5).unwrap();
        for t in 0..3 {
            net.register_task(10, 2 * t);
            net.set_fixed_mask(t, 2 + t).unwrap();
            assert_eq!(net.hard_active_counts(t), vec![2 + t, 2 + t]);
        }
        assert!(net.set_fixed_mask(0, 99).is_err());
    }
}
