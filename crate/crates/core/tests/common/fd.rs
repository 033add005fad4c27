//! Central finite-difference harness shared by the gradient suite and the
//! acceptance gate: every differentiable primitive as a named case, plus the
//! composed variational training loss with frozen noise draws.

use ibpwf::dist::{concrete, kumaraswamy, stick, EPS};
use ibpwf::tensor::{Tape, Tensor, Var};

pub const H: f64 = 1e-5;

/// Worst relative error between the tape's adjoints and central differences,
/// over every element of every leaf, with a locator string for the offender.
pub fn max_rel_err(params: &[Tensor], build: &dyn Fn(&Tape, &[Var]) -> Var) -> (f64, String) {
    let tape = Tape::new();
    let leaves: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = build(&tape, &leaves);
    tape.backward(&loss);
    let grads: Vec<Tensor> = leaves
        .iter()
        .map(|l| l.grad().expect("leaf should receive a gradient"))
        .collect();

    let mut worst = (0.0, String::from("exact"));
    for (j, p) in params.iter().enumerate() {
        for i in 0..p.numel() {
            let eval = |delta: f64| -> f64 {
                let t = Tape::new();
                let vars: Vec<Var> = params
                    .iter()
                    .enumerate()
                    .map(|(jj, q)| {
                        let mut v = q.data().to_vec();
                        if jj == j {
                            v[i] += delta;
                        }
                        t.leaf(Tensor::new(q.shape().to_vec(), v), false)
                    })
                    .collect();
                build(&t, &vars).item()
            };
            let fd = (eval(H) - eval(-H)) / (2.0 * H);
            let ad = grads[j].data()[i];
            let re = super::rel_err(ad, fd, 1e-6);
            if re > worst.0 {
                worst = (re, format!("leaf {j} elem {i}: adjoint {ad} vs fd {fd}"));
            }
        }
    }
    worst
}

fn weights(n: usize) -> Tensor {
    Tensor::vector((0..n).map(|i| 0.31 + 0.17 * i as f64).collect())
}

/// Every autodiff primitive exercised once at generic points, reduced
/// through data-dependent weights so each output element matters.
pub fn primitive_battery() -> Vec<(&'static str, f64, String)> {
    let mut out: Vec<(&'static str, f64, String)> = Vec::new();
    let mut case = |name: &'static str, params: &[Tensor], build: &dyn Fn(&Tape, &[Var]) -> Var| {
        let (rel, at) = max_rel_err(params, build);
        out.push((name, rel, at));
    };

    let x = Tensor::vector(vec![0.13, 0.52, 0.94, 2.3]);
    let unary: Vec<(&'static str, Box<dyn Fn(&Var) -> Var>)> = vec![
        ("neg", Box::new(|v: &Var| v.neg())),
        ("add_scalar", Box::new(|v: &Var| v.add_scalar(0.7))),
        ("rsub_scalar", Box::new(|v: &Var| v.rsub_scalar(1.3))),
        ("scale", Box::new(|v: &Var| v.scale(-2.1))),
        ("sigmoid", Box::new(|v: &Var| v.sigmoid())),
        ("relu", Box::new(|v: &Var| v.add_scalar(-0.5).relu())),
        ("log", Box::new(|v: &Var| v.log())),
        ("exp", Box::new(|v: &Var| v.exp())),
        ("softplus", Box::new(|v: &Var| v.softplus())),
        ("clamp", Box::new(|v: &Var| v.clamp(0.3, 0.9))),
        ("ln_gamma", Box::new(|v: &Var| v.ln_gamma())),
        ("digamma", Box::new(|v: &Var| v.digamma())),
    ];
    for (name, op) in &unary {
        case(name, &[x.clone()], &|tape, leaves| {
            let w = tape.constant(weights(4));
            op(&leaves[0]).mul(&w).sum()
        });
    }

    let a = Tensor::vector(vec![0.4, 1.7, -0.6]);
    let b = Tensor::vector(vec![1.1, -0.8, 2.2]);
    let binary: Vec<(&'static str, Box<dyn Fn(&Var, &Var) -> Var>)> = vec![
        ("add", Box::new(|a: &Var, b: &Var| a.add(b))),
        ("sub", Box::new(|a: &Var, b: &Var| a.sub(b))),
        ("mul", Box::new(|a: &Var, b: &Var| a.mul(b))),
        ("div", Box::new(|a: &Var, b: &Var| a.div(b))),
    ];
    for (name, op) in &binary {
        case(name, &[a.clone(), b.clone()], &|tape, leaves| {
            let w = tape.constant(weights(3));
            op(&leaves[0], &leaves[1]).mul(&w).sum()
        });
    }

    let v = Tensor::vector(vec![0.2, -1.4, 0.9]);
    case("sum", &[v.clone()], &|_, l| l[0].mul(&l[0]).sum());
    case("mean", &[v.clone()], &|_, l| l[0].exp().mean());
    case("cumsum", &[v.clone()], &|tape, l| {
        l[0].cumsum().mul(&tape.constant(weights(3))).sum()
    });
    case("broadcast_row", &[v.clone()], &|tape, l| {
        let w = tape.constant(Tensor::matrix(2, 3, (0..6).map(|i| 0.5 + i as f64).collect()));
        l[0].broadcast_row(2).mul(&w).sum()
    });
    case("broadcast_col", &[Tensor::vector(vec![1.3, -0.7])], &|tape, l| {
        let w = tape.constant(Tensor::matrix(2, 3, (0..6).map(|i| 0.5 + i as f64).collect()));
        l[0].broadcast_col(3).mul(&w).sum()
    });

    let ma = Tensor::matrix(2, 3, vec![0.1, -0.4, 0.7, 1.2, 0.05, -0.9]);
    let mb = Tensor::matrix(3, 2, vec![0.6, -0.2, 1.4, 0.3, -0.8, 0.9]);
    case("matmul", &[ma, mb], &|tape, l| {
        let w = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        l[0].matmul(&l[1]).mul(&w).sum()
    });

    let m = Tensor::matrix(3, 4, (0..12).map(|i| 0.1 * i as f64 - 0.5).collect());
    case("take_per_row", &[m.clone()], &|tape, l| {
        l[0].take_per_row(&[1, 3, 0]).mul(&tape.constant(weights(3))).sum()
    });
    case("logsumexp_rows", &[m.clone()], &|tape, l| {
        l[0].logsumexp_rows().mul(&tape.constant(weights(3))).sum()
    });
    case("log_softmax", &[m], &|tape, l| {
        let lp = l[0].sub(&l[0].logsumexp_rows().broadcast_col(4));
        lp.take_per_row(&[2, 0, 3]).sum().neg().mul(&tape.scalar(1.7))
    });

    let ka = Tensor::vector(vec![0.8, 1.5, 3.0]);
    let kb = Tensor::vector(vec![2.2, 0.7, 1.1]);
    case("kumaraswamy_sample", &[ka.clone(), kb.clone()], &|tape, l| {
        let u = tape.constant(Tensor::vector(vec![0.21, 0.55, 0.83]));
        kumaraswamy::sample(&l[0], &l[1], &u).mul(&tape.constant(weights(3))).sum()
    });
    case("kumaraswamy_kl", &[ka, kb], &|tape, l| {
        let pa = Tensor::vector(vec![1.2, 1.2, 1.2]);
        let pb = Tensor::vector(vec![1.9, 1.9, 1.9]);
        kumaraswamy::kl_var(&l[0], &l[1], &pa, &pb, 10)
            .mul(&tape.constant(weights(3)))
            .sum()
    });

    let p = Tensor::vector(vec![0.15, 0.5, 0.92]);
    let loc = Tensor::vector(vec![0.7, 0.25, 0.4]);
    case("concrete_sample", &[p.clone()], &|tape, l| {
        let u = tape.constant(Tensor::vector(vec![0.3, 0.62, 0.18]));
        concrete::sample(&l[0], 2.0 / 3.0, &u).mul(&tape.constant(weights(3))).sum()
    });
    case("concrete_kl_mc", &[p, loc], &|tape, l| {
        let draws = vec![
            tape.constant(Tensor::vector(vec![0.41, 0.09, 0.77])),
            tape.constant(Tensor::vector(vec![0.86, 0.33, 0.5])),
        ];
        concrete::kl_mc(&l[0], &l[1], 2.0 / 3.0, &draws).sum()
    });

    case("stick_breaking_pi", &[Tensor::vector(vec![0.9, 0.6, 0.85, 0.3])], &|tape, l| {
        stick::stick_breaking_pi(&l[0]).mul(&tape.constant(weights(4))).sum()
    });

    out
}

/// The full training objective on a toy two-layer factor network: likelihood
/// of a minibatch plus the gate and stick KL terms, with all noise draws held
/// fixed. Mirrors the expansion-phase loss construction.
pub fn composed_elbo() -> (f64, String) {
    let (input, hidden, classes, k, batch) = (5usize, 4usize, 3usize, 6usize, 4usize);
    let prior_c = Tensor::vector(vec![2.0; k]);
    let prior_d = Tensor::vector(vec![1.0; k]);

    let params = vec![
        Tensor::matrix(input, k, (0..input * k).map(|i| ((i * 7919 % 100) as f64 / 50.0 - 1.0) * 0.3).collect()),
        Tensor::matrix(k, hidden, (0..k * hidden).map(|i| ((i * 104729 % 100) as f64 / 50.0 - 1.0) * 0.3).collect()),
        Tensor::vector((0..k).map(|i| 0.8 + 0.05 * i as f64).collect()),
        Tensor::vector((0..k).map(|i| -0.4 + 0.21 * i as f64).collect()),
        Tensor::vector((0..k).map(|i| 0.9 + 0.1 * i as f64).collect()),
        Tensor::vector((0..k).map(|i| 0.2 + 0.08 * i as f64).collect()),
        Tensor::vector((0..hidden).map(|i| 0.01 * i as f64).collect()),
        Tensor::matrix(hidden, classes, (0..hidden * classes).map(|i| ((i * 31 % 17) as f64 / 8.0 - 1.0) * 0.4).collect()),
    ];

    let x = Tensor::matrix(
        batch,
        input,
        (0..batch * input).map(|i| ((i * 13 % 23) as f64 / 11.0 - 1.0) * 0.7).collect(),
    );
    let labels = [0usize, 2, 1, 1];
    let u_stick: Vec<f64> = (0..k).map(|i| 0.1 + 0.13 * i as f64).collect();
    let u_gate: Vec<f64> = (0..k).map(|i| 0.93 - 0.12 * i as f64).collect();

    max_rel_err(&params, &|tape, l| {
        let (wa, wb, r, pp_raw, c_raw, d_raw, bias, head) =
            (&l[0], &l[1], &l[2], &l[3], &l[4], &l[5], &l[6], &l[7]);
        let post_p = pp_raw.sigmoid().clamp(EPS, 1.0 - EPS);
        let c = c_raw.softplus().clamp(EPS, f64::INFINITY);
        let d = d_raw.softplus().clamp(EPS, f64::INFINITY);
        let uv = tape.constant(Tensor::vector(u_stick.clone()));
        let ug = tape.constant(Tensor::vector(u_gate.clone()));
        let v = kumaraswamy::sample(&c, &d, &uv);
        let pi = stick::stick_breaking_pi(&v);
        let gate = concrete::sample(&post_p, 2.0 / 3.0, &ug);

        let xv = tape.constant(x.clone());
        let lambda = r.mul(&gate);
        let z = xv
            .matmul(wa)
            .mul(&lambda.broadcast_row(batch))
            .matmul(wb)
            .add(&bias.broadcast_row(batch))
            .relu();
        let logits = z.matmul(head);
        let logp = logits.sub(&logits.logsumexp_rows().broadcast_col(classes));
        let nll = logp.take_per_row(&labels).sum().neg().scale(2.5);

        let kl_gate = concrete::kl_mc(&post_p, &pi, 2.0 / 3.0, &[ug.clone()]).sum();
        let kl_stick = kumaraswamy::kl_var(&c, &d, &prior_c, &prior_d, 10).sum();
        nll.add(&kl_gate.add(&kl_stick).scale(0.2))
    })
}
