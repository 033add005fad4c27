//! Scalar special functions: log-gamma, digamma, trigamma, log-beta.
//!
//! Log-gamma uses the Lanczos approximation (g = 7, 9 coefficients) with the
//! reflection formula below 0.5. Digamma and trigamma shift their argument
//! above 10 by recurrence and finish with the asymptotic Bernoulli series.
//! All three are accurate to ~1e-12 over the positive axis, which is the only
//! region the variational objectives touch.

pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for positive arguments.
pub fn ln_gamma(x: f64) -> f64 {
    debug_assert!(x > 0.0, "ln_gamma needs x > 0, got {x}");
    if x < 0.5 {
        // Reflection keeps the Lanczos series in its accurate range.
        let s = (std::f64::consts::PI * x).sin();
        return std::f64::consts::PI.ln() - s.ln() - ln_gamma(1.0 - x);
    }
    let z = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (z + i as f64);
    }
    let t = z + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + acc.ln()
}

/// Digamma (psi) for positive arguments.
pub fn digamma(x: f64) -> f64 {
    debug_assert!(x > 0.0, "digamma needs x > 0, got {x}");
    let mut x = x;
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2
                                        * (1.0 / 132.0
                                            - inv2 * (691.0 / 32760.0 - inv2 / 12.0))))));
    acc + x.ln() - 0.5 * inv - series
}

/// Trigamma (psi') for positive arguments.
pub fn trigamma(x: f64) -> f64 {
    debug_assert!(x > 0.0, "trigamma needs x > 0, got {x}");
    let mut x = x;
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv
        * (1.0
            + inv * 0.5
            + inv2
                * (1.0 / 6.0
                    - inv2
                        * (1.0 / 30.0
                            - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0 - inv2 * 5.0 / 66.0)))));
    acc + series
}

/// Natural log of the beta function B(a, b), positive arguments.
pub fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Hurwitz zeta ζ(s, q) = Σ_{k≥0} (q+k)^(-s) for s > 1, q > 0, via
/// Euler-Maclaurin after shifting q above 20.
pub fn hurwitz_zeta(s: f64, q: f64) -> f64 {
    debug_assert!(s > 1.0 && q > 0.0, "hurwitz_zeta needs s > 1, q > 0");
    let mut acc = 0.0;
    let mut q = q;
    while q < 20.0 {
        acc += q.powf(-s);
        q += 1.0;
    }
    let qs = q.powf(-s);
    acc + q * qs / (s - 1.0)
        + 0.5 * qs
        + s * qs / (12.0 * q)
        - s * (s + 1.0) * (s + 2.0) * qs / (720.0 * q * q * q)
        + s * (s + 1.0) * (s + 2.0) * (s + 3.0) * (s + 4.0) * qs / (30240.0 * q.powi(5))
}
