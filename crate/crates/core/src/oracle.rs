//! Task inference from first-layer features, plus predictive uncertainty.
//!
//! After a task is trained, the feature distribution of each of its classes
//! is summarized by a full Gaussian fitted to the first-layer preactivations
//! computed with the first task's weights. A task's score on an input is its
//! count-weighted class mixture, log sum_c n_c N(phi | mu_c, Sigma_c), and
//! the inferred task identity is the argmax over trained tasks. The same
//! scores, softmaxed, weight a Bernoulli-gate ensemble whose mixed class
//! distribution yields a predictive entropy that separates seen from unseen
//! data.

use crate::data::{Split, TaskView};
use crate::error::Result;
use crate::linalg::Cholesky;
use crate::model::{FactorizedNet, ScoreMode};
use crate::rng;
use crate::tensor::Tensor;

/// Diagonal jitter added to every covariance before factorization. One
/// shared constant: an adaptive per-component ridge would change each
/// component's log-determinant by a different amount and break score
/// comparability across tasks.
pub const COV_JITTER: f64 = 1e-1;

/// Feature batch size used when fitting statistics.
const FIT_BATCH: usize = 1024;

/// Gaussian summary of one class within a task.
pub struct ClassComponent {
    mean: Vec<f64>,
    /// Biased (1/n) covariance, without jitter, row-major dim x dim.
    cov: Vec<f64>,
    n: usize,
    chol: Cholesky,
}

impl ClassComponent {
    /// Build from raw moments; the factorization is recomputed, so a
    /// checkpoint round trip is exact.
    pub fn from_parts(mean: Vec<f64>, cov: Vec<f64>, n: usize) -> Result<ClassComponent> {
        let dim = mean.len();
        assert_eq!(cov.len(), dim * dim);
        let mut jittered = cov.clone();
        for i in 0..dim {
            jittered[i * dim + i] += COV_JITTER;
        }
        let chol = Cholesky::new(&Tensor::matrix(dim, dim, jittered))?;
        Ok(ClassComponent { mean, cov, n, chol })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &[f64] {
        &self.cov
    }

    pub fn count(&self) -> usize {
        self.n
    }

    /// log N(phi | mean, cov + jitter I) + log n, dropping the shared
    /// -d/2 log(2 pi) constant.
    fn log_score(&self, phi: &[f64]) -> f64 {
        let centered: Vec<f64> = phi.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        -0.5 * self.chol.log_det() - 0.5 * self.chol.quad_form(&centered) + (self.n as f64).ln()
    }
}

/// Per-class Gaussian mixture summarizing one task's feature distribution.
pub struct TaskStatistics {
    components: Vec<ClassComponent>,
}

impl TaskStatistics {
    pub fn new(components: Vec<ClassComponent>) -> TaskStatistics {
        assert!(!components.is_empty());
        TaskStatistics { components }
    }

    pub fn components(&self) -> &[ClassComponent] {
        &self.components
    }

    /// Total examples behind the fit.
    pub fn count(&self) -> usize {
        self.components.iter().map(ClassComponent::count).sum()
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    /// Count-weighted mixture score: log sum_c n_c N(phi | mu_c, Sigma_c),
    /// up to the shared -d/2 log(2 pi) constant.
    pub fn log_score(&self, phi: &[f64]) -> f64 {
        let scores: Vec<f64> = self.components.iter().map(|c| c.log_score(phi)).collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + scores.iter().map(|&s| (s - m).exp()).sum::<f64>().ln()
    }
}

/// The oracle's feature map: first-layer preactivations under the first
/// task's scores, an affine image of the input. Defined once task 0 is
/// trained. Fitting and inference must use the same mode; hard mode keeps
/// the map constant for the model's whole life because task 0's hard-active
/// factors are frozen.
pub fn features(net: &FactorizedNet, x: &Tensor, mode: ScoreMode) -> Tensor {
    net.first_layer_features(0, x, mode)
}

/// Fit one Gaussian per class of a task from its training split. Two passes
/// per class: mean, then centered second moments accumulated blockwise.
pub fn fit_statistics(
    net: &FactorizedNet,
    view: &TaskView,
    mode: ScoreMode,
) -> Result<TaskStatistics> {
    let n = view.n_train();
    let all: Vec<usize> = (0..n).collect();
    let labels = view.local_labels(Split::Train, &all);
    let classes = labels.iter().max().map_or(1, |&m| m + 1);

    let mut components = Vec::with_capacity(classes);
    for class in 0..classes {
        let positions: Vec<usize> =
            all.iter().copied().filter(|&i| labels[i] == class).collect();
        let nc = positions.len();
        if nc == 0 {
            continue;
        }
        let mut mean: Vec<f64> = Vec::new();
        let mut dim = 0;

        for chunk in positions.chunks(FIT_BATCH) {
            let phi = features(net, &view.inputs(Split::Train, chunk), mode);
            if mean.is_empty() {
                dim = phi.cols();
                mean = vec![0.0; dim];
            }
            for row in 0..phi.rows() {
                for (m, &v) in mean.iter_mut().zip(phi.row(row)) {
                    *m += v;
                }
            }
        }
        for m in &mut mean {
            *m /= nc as f64;
        }

        let mut cov = vec![0.0; dim * dim];
        for chunk in positions.chunks(FIT_BATCH) {
            let phi = features(net, &view.inputs(Split::Train, chunk), mode);
            let rows = phi.rows();
            let mut centered = phi.data().to_vec();
            for row in 0..rows {
                for j in 0..dim {
                    centered[row * dim + j] -= mean[j];
                }
            }
            crate::tensor::gemm(
                dim, rows, dim, 1.0, &centered, true, &centered, false, 1.0, &mut cov,
            );
        }
        for v in &mut cov {
            *v /= nc as f64;
        }
        for i in 0..dim {
            for j in 0..i {
                let s = 0.5 * (cov[i * dim + j] + cov[j * dim + i]);
                cov[i * dim + j] = s;
                cov[j * dim + i] = s;
            }
        }
        components.push(ClassComponent::from_parts(mean, cov, nc)?);
    }

    Ok(TaskStatistics::new(components))
}

/// Log scores of every task for each feature row: rows x tasks.
pub fn batch_log_scores(stats: &[TaskStatistics], phi: &Tensor) -> Tensor {
    let rows = phi.rows();
    let mut out = vec![0.0; rows * stats.len()];
    for r in 0..rows {
        for (t, s) in stats.iter().enumerate() {
            out[r * stats.len() + t] = s.log_score(phi.row(r));
        }
    }
    Tensor::matrix(rows, stats.len(), out)
}

/// Most likely task for each feature row; ties go to the lowest id.
pub fn infer_tasks(stats: &[TaskStatistics], phi: &Tensor) -> Vec<usize> {
    assert!(!stats.is_empty());
    batch_log_scores(stats, phi).argmax_rows()
}

/// Softmax of the log scores per row: the task posterior used for mixing.
pub fn task_posterior(stats: &[TaskStatistics], phi: &Tensor) -> Tensor {
    let scores = batch_log_scores(stats, phi);
    let (rows, t) = (scores.rows(), scores.cols());
    let mut out = vec![0.0; rows * t];
    for r in 0..rows {
        let row = scores.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&x| (x - m).exp()).sum();
        for j in 0..t {
            out[r * t + j] = (row[j] - m).exp() / z;
        }
    }
    Tensor::matrix(rows, t, out)
}

/// Factored forward pass of task `t` with explicit binary gates per layer,
/// returning class probabilities. Shares the precomputed first-layer input
/// projection `u0 = x W_a0` across ensemble members.
fn forward_with_gates(net: &FactorizedNet, t: usize, u0: &Tensor, x: &Tensor, gates: &[Vec<f64>]) -> Tensor {
    let layers = net.spec.num_layers();
    let mut h = x.clone();
    for l in 0..layers {
        let state = &net.tasks[t].states[l];
        let scores = state.scores_with_gates(&gates[l]);
        let u = if l == 0 { u0.clone() } else { h.matmul(&net.dicts[l].w_a) };
        let z = u.scale_cols(&scores).matmul(&net.dicts[l].w_b).add_row(&state.bias);
        h = if l + 1 == layers { z } else { z.relu() };
    }
    let logp = h.log_softmax_rows();
    logp.map(f64::exp)
}

/// Ensemble class distribution of one task: mean over `ensemble` hard
/// Bernoulli gate draws from post_p. Rows x classes.
fn ensemble_distribution(
    net: &FactorizedNet,
    t: usize,
    u0: &Tensor,
    x: &Tensor,
    ensemble: usize,
    seed: u64,
    salt: &[u64],
) -> Tensor {
    let rows = x.rows();
    let classes = net.spec.classes_per_task;
    let layers = net.spec.num_layers();
    let k = net.spec.truncation;
    let post_p: Vec<Tensor> = net.tasks[t].states.iter().map(|s| s.post_p()).collect();
    let mut acc = vec![0.0; rows * classes];
    for m in 0..ensemble {
        let mut tags = vec![rng::tag::ENSEMBLE];
        tags.extend_from_slice(salt);
        tags.extend_from_slice(&[t as u64, m as u64]);
        let mut gate_rng = rng::stream(seed, &tags);
        let gates: Vec<Vec<f64>> = (0..layers)
            .map(|l| {
                rng::uniforms(&mut gate_rng, k)
                    .iter()
                    .zip(post_p[l].data())
                    .map(|(&u, &p)| if u < p { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        let probs = forward_with_gates(net, t, u0, x, &gates);
        for (a, &p) in acc.iter_mut().zip(probs.data()) {
            *a += p / ensemble as f64;
        }
    }
    Tensor::matrix(rows, classes, acc)
}

/// Ensemble class distributions of every trained task mixed by the task
/// posterior. Global class space: task t owns columns
/// [t*classes, (t+1)*classes). Rows x (seen*classes), rows sum to 1.
pub fn class_mixture(
    net: &FactorizedNet,
    stats: &[TaskStatistics],
    x: &Tensor,
    mode: ScoreMode,
    ensemble: usize,
    seed: u64,
    salt: &[u64],
) -> Tensor {
    assert!(ensemble > 0);
    let seen = stats.len();
    assert!(seen > 0 && seen <= net.num_tasks());
    let rows = x.rows();
    let classes = net.spec.classes_per_task;

    let phi = features(net, x, mode);
    let weights = task_posterior(stats, &phi);

    let total = seen * classes;
    let mut mixed = vec![0.0; rows * total];
    let u0 = x.matmul(&net.dicts[0].w_a);
    for t in 0..seen {
        let rho = ensemble_distribution(net, t, &u0, x, ensemble, seed, salt);
        for r in 0..rows {
            for c in 0..classes {
                mixed[r * total + t * classes + c] = weights.at(r, t) * rho.at(r, c);
            }
        }
    }
    Tensor::matrix(rows, total, mixed)
}

fn entropy_of(q: &[f64]) -> f64 {
    -q.iter().map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 }).sum::<f64>()
}

/// Mean predictive entropy per example in the incremental-class setting:
/// an ensemble of hard Bernoulli gate draws per trained task, class
/// distributions mixed by the task posterior.
pub fn predictive_entropy(
    net: &FactorizedNet,
    stats: &[TaskStatistics],
    x: &Tensor,
    mode: ScoreMode,
    ensemble: usize,
    seed: u64,
    salt: &[u64],
) -> Vec<f64> {
    let mixed = class_mixture(net, stats, x, mode, ensemble, seed, salt);
    (0..mixed.rows()).map(|r| entropy_of(mixed.row(r))).collect()
}

/// Which head answers a query.
#[derive(Clone, Copy, Debug)]
pub enum PredictSetting {
    /// The task identity is given.
    IncrementalTask(usize),
    /// The task identity is inferred from the input's features.
    IncrementalClass,
}

/// One example's answer: global-class log probabilities (task t's local
/// class c sits at slot t*classes + c), the task used, and the ensemble
/// predictive entropy in nats.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub task: usize,
    pub log_probs: Vec<f64>,
    pub entropy: f64,
}

/// Predict a batch under either setting. Class log probabilities come from
/// the point forward pass of the chosen task under `mode`; the entropy is
/// ensemble-based, mixed over the task posterior in the incremental-class
/// setting.
#[allow(clippy::too_many_arguments)]
pub fn predict(
    net: &FactorizedNet,
    stats: &[TaskStatistics],
    x: &Tensor,
    setting: PredictSetting,
    mode: ScoreMode,
    ensemble: usize,
    seed: u64,
    salt: &[u64],
) -> Vec<Prediction> {
    let seen = stats.len();
    let rows = x.rows();
    let classes = net.spec.classes_per_task;
    let total = seen * classes;

    let tasks: Vec<usize> = match setting {
        PredictSetting::IncrementalTask(t) => {
            assert!(t < seen, "task {t} not trained");
            vec![t; rows]
        }
        PredictSetting::IncrementalClass => infer_tasks(stats, &features(net, x, mode)),
    };

    let entropies: Vec<f64> = match setting {
        PredictSetting::IncrementalClass => {
            predictive_entropy(net, stats, x, mode, ensemble, seed, salt)
        }
        PredictSetting::IncrementalTask(t) => {
            let u0 = x.matmul(&net.dicts[0].w_a);
            let rho = ensemble_distribution(net, t, &u0, x, ensemble, seed, salt);
            (0..rows).map(|r| entropy_of(rho.row(r))).collect()
        }
    };

    // Point forward passes grouped by task to compose each task's weights once.
    let mut log_probs = vec![vec![f64::NEG_INFINITY; total]; rows];
    for t in 0..seen {
        let members: Vec<usize> = (0..rows).filter(|&r| tasks[r] == t).collect();
        if members.is_empty() {
            continue;
        }
        let sub = Tensor::matrix(
            members.len(),
            x.cols(),
            members.iter().flat_map(|&r| x.row(r).to_vec()).collect(),
        );
        let logp = net.forward_eval(t, &sub, mode);
        for (i, &r) in members.iter().enumerate() {
            for c in 0..classes {
                log_probs[r][t * classes + c] = logp.at(i, c);
            }
        }
    }

    tasks
        .into_iter()
        .zip(log_probs)
        .zip(entropies)
        .map(|((task, log_probs), entropy)| Prediction { task, log_probs, entropy })
        .collect()
}
