use ibpwf::data::{self, Split};
use ibpwf::experiment::{self, checkpoint};
use ibpwf::linalg::Cholesky;
use ibpwf::model::FactorizedNet;
use ibpwf::oracle;
use ibpwf::tensor::Tensor;
use std::path::Path;

struct Gauss {
    mean: Vec<f64>,
    chol: Cholesky,
    logn: f64,
}

impl Gauss {
    fn fit(rows: &[&[f64]], jitter: f64) -> Gauss {
        let n = rows.len();
        let d = rows[0].len();
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, &v) in mean.iter_mut().zip(*r) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut cov = vec![0.0; d * d];
        for r in rows {
            let c: Vec<f64> = r.iter().zip(&mean).map(|(x, m)| x - m).collect();
            for i in 0..d {
                if c[i] == 0.0 {
                    continue;
                }
                for j in 0..d {
                    cov[i * d + j] += c[i] * c[j];
                }
            }
        }
        for v in &mut cov {
            *v /= n as f64;
        }
        let tr: f64 = (0..d).map(|i| cov[i * d + i]).sum();
        let eff = if jitter < 0.0 { -jitter * tr / d as f64 + 1e-8 } else { jitter };
        for i in 0..d {
            cov[i * d + i] += eff;
        }
        Gauss {
            mean,
            chol: Cholesky::new(&Tensor::matrix(d, d, cov)).unwrap(),
            logn: (n as f64).ln(),
        }
    }

    fn score(&self, phi: &[f64]) -> f64 {
        let c: Vec<f64> = phi.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        -0.5 * self.chol.log_det() - 0.5 * self.chol.quad_form(&c) + self.logn
    }
}

fn feats(net: &FactorizedNet, x: &Tensor, kind: &str, mode: ibpwf::model::ScoreMode) -> Tensor {
    match kind {
        "relu" => oracle::features(net, x, mode),
        "preact" => {
            let (w, b) = &net.task_weights(0, mode)[0];
            x.matmul(w).add_row(b)
        }
        _ => unreachable!(),
    }
}

fn main() {
    let dir = std::env::args().nth(1).unwrap();
    let (cfg, net, _) = checkpoint::load(Path::new(&dir)).unwrap();
    let base = data::load_mnist(Path::new("/root/crate/data")).unwrap();
    let stream = experiment::build_stream(&cfg, base).unwrap();
    let mode = cfg.evaluation.score_mode;
    let tasks = 5usize;

    for fk in ["relu", "preact"] {
        // Train features grouped per task and per class-within-task.
        let mut train_feats: Vec<Tensor> = Vec::new();
        let mut train_labels: Vec<Vec<usize>> = Vec::new();
        let mut test_feats: Vec<Tensor> = Vec::new();
        for t in 0..tasks {
            let view = stream.task(t);
            let all: Vec<usize> = (0..view.n_train()).collect();
            train_feats.push(feats(&net, &view.inputs(Split::Train, &all), fk, mode));
            train_labels.push(view.local_labels(Split::Train, &all));
            let allt: Vec<usize> = (0..view.n_test()).collect();
            test_feats.push(feats(&net, &view.inputs(Split::Test, &allt), fk, mode));
        }

        for grouping in ["task", "class"] {
            for &jit in &[-1e-3, -1e-2, -3e-2, -1e-1] {
                // groups[t] = list of gaussians for task t
                let groups: Vec<Vec<Gauss>> = (0..tasks)
                    .map(|t| {
                        let phi = &train_feats[t];
                        let rows: Vec<&[f64]> = (0..phi.rows()).map(|r| phi.row(r)).collect();
                        match grouping {
                            "task" => vec![Gauss::fit(&rows, jit)],
                            "class" => {
                                let labs = &train_labels[t];
                                let classes = labs.iter().max().unwrap() + 1;
                                (0..classes)
                                    .map(|c| {
                                        let sub: Vec<&[f64]> = rows
                                            .iter()
                                            .zip(labs)
                                            .filter(|(_, &l)| l == c)
                                            .map(|(r, _)| *r)
                                            .collect();
                                        Gauss::fit(&sub, jit)
                                    })
                                    .collect()
                            }
                            _ => unreachable!(),
                        }
                    })
                    .collect();

                let score_task = |phi: &[f64], t: usize, lse: bool| -> f64 {
                    let ss: Vec<f64> = groups[t].iter().map(|g| g.score(phi)).collect();
                    if lse {
                        let m = ss.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        m + ss.iter().map(|&s| (s - m).exp()).sum::<f64>().ln()
                    } else {
                        ss.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                    }
                };

                for lse in [false, true] {
                    if grouping == "task" && lse {
                        continue;
                    }
                    let mut per = Vec::new();
                    let (mut hit, mut tot) = (0, 0);
                    for (t, phi) in test_feats.iter().enumerate() {
                        let mut h = 0;
                        for r in 0..phi.rows() {
                            let row = phi.row(r);
                            let best = (0..tasks)
                                .map(|tt| (tt, score_task(row, tt, lse)))
                                .max_by(|a, b| a.1.total_cmp(&b.1))
                                .unwrap()
                                .0;
                            if best == t {
                                h += 1;
                            }
                        }
                        per.push((h as f64 / phi.rows() as f64 * 1e4).round() / 1e4);
                        hit += h;
                        tot += phi.rows();
                    }
                    println!(
                        "{fk:<7} {grouping:<6} {} jit {jit:<6} ti {:.4}  {per:?}",
                        if lse { "lse" } else { "max" },
                        hit as f64 / tot as f64
                    );
                }
            }
        }
    }
}
