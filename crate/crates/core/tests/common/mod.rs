//! Shared helpers for the integration suites: workspace data discovery,
//! quadrature oracles used to cross-check analytic distribution code, and
//! the finite-difference harness in [`fd`].
#![allow(dead_code)]

pub mod fd;

use ibpwf::data::{self, MnistBase};
use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

/// MNIST lives at the workspace root, two levels above this crate.
pub fn workspace_data_dir() -> PathBuf {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data");
    if let Ok(env) = std::env::var("IBPWF_DATA_DIR") {
        if !env.is_empty() {
            return PathBuf::from(env);
        }
    }
    p
}

pub fn mnist() -> Arc<MnistBase> {
    static BASE: OnceLock<Arc<MnistBase>> = OnceLock::new();
    BASE.get_or_init(|| {
        data::load_mnist(&workspace_data_dir()).expect("MNIST files under <workspace>/data")
    })
    .clone()
}

/// Relative error against the larger magnitude, with `floor` shielding
/// near-zero comparisons from 0/0.
pub fn rel_err(got: f64, want: f64, floor: f64) -> f64 {
    (got - want).abs() / want.abs().max(got.abs()).max(floor)
}

/// Adaptive Simpson quadrature with an absolute tolerance. The integrand may
/// blow up logarithmically at the endpoints; recursion splits until the local
/// Richardson estimate is below the budget or the depth cap is reached.
pub fn integrate<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, h: f64) -> f64 {
        h / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(fa, flm, fm, m - a);
        let right = simpson(fm, frm, fb, b - m);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    recurse(f, a, b, fa, fm, fb, simpson(fa, fm, fb, b - a), tol, 48)
}

/// Kumaraswamy log density at v for parameters (a, b). log(1 - v^a) is
/// computed as log(-expm1(a log v)) so v near 1 keeps ~16 digits instead of
/// collapsing to log(0).
pub fn kuma_log_pdf(v: f64, a: f64, b: f64) -> f64 {
    let ln_one_minus_pow = (-(a * v.ln()).exp_m1()).ln();
    (a * b).ln() + (a - 1.0) * v.ln() + (b - 1.0) * ln_one_minus_pow
}

/// Inverse CDF: v such that F(v) = u.
pub fn kuma_inv_cdf(u: f64, a: f64, b: f64) -> f64 {
    (1.0 - (1.0 - u).powf(1.0 / b)).powf(1.0 / a)
}

/// KL(Kuma(a,b) || Kuma(alpha,beta)) by quadrature over the quantile scale:
/// E_q[log q - log p] = ∫₀¹ (log q - log p)(v(u)) du. The endpoint inset only
/// discards O(eps·log eps) probability mass.
pub fn kuma_kl_quadrature(a: f64, b: f64, alpha: f64, beta: f64) -> f64 {
    let eps = 1e-13;
    integrate(
        &|u: f64| {
            let v = kuma_inv_cdf(u, a, b).clamp(1e-300, 1.0 - 1e-16);
            kuma_log_pdf(v, a, b) - kuma_log_pdf(v, alpha, beta)
        },
        eps,
        1.0 - eps,
        1e-9,
    )
}

/// E[v^n] by quadrature.
pub fn kuma_moment_quadrature(n: f64, a: f64, b: f64) -> f64 {
    let eps = 1e-13;
    integrate(
        &|u: f64| kuma_inv_cdf(u, a, b).powf(n),
        eps,
        1.0 - eps,
        1e-10,
    )
}

/// Differential entropy -E[log q] by quadrature.
pub fn kuma_entropy_quadrature(a: f64, b: f64) -> f64 {
    let eps = 1e-13;
    integrate(
        &|u: f64| {
            let v = kuma_inv_cdf(u, a, b).clamp(1e-300, 1.0 - 1e-16);
            -kuma_log_pdf(v, a, b)
        },
        eps,
        1.0 - eps,
        1e-9,
    )
}
