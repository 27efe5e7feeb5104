//! The Airy function `Ai` and its derivative on the real line.
//!
//! Two regimes cover the range this crate needs (`x ≳ −10`, any positive
//! `x`):
//!
//! * `x < 6`: the Maclaurin series `Ai = c₁·f − c₂·g`, where `f` and `g`
//!   are the two entire solutions of `y'' = xy` with `f(0) = 1, f'(0) = 0`
//!   and `g(0) = 0, g'(0) = 1`. The series converge everywhere; for
//!   negative `x` the alternating terms cancel, which costs roughly
//!   `e^{2|x|^{3/2}/3}·ε` in absolute accuracy — about `1e−10` at `x = −8`
//!   and `3e−7` at `x = −10`, ample for the distribution-function work
//!   here.
//! * `x ≥ 6`: the Poincaré expansion in `ζ = (2/3)x^{3/2}`, truncated at
//!   its smallest term. At the crossover the optimal truncation error is
//!   near `2e−10` relative and it falls below machine precision once
//!   `x ≳ 9`; the Maclaurin route is unusable there because `f` and `g`
//!   grow like `e^{ζ}` while `Ai` decays like `e^{−ζ}`.

/// `Ai(0) = 3^{−2/3}/Γ(2/3)`.
const AI_ZERO: f64 = 0.355_028_053_887_817_24;
/// `−Ai'(0) = 3^{−1/3}/Γ(1/3)`.
const AI_PRIME_ZERO: f64 = 0.258_819_403_792_806_8;

/// `Ai(x)` and `Ai'(x)` together (they share all the series work).
pub fn airy_pair(x: f64) -> (f64, f64) {
    if x >= 6.0 {
        asymptotic_pair(x)
    } else {
        maclaurin_pair(x)
    }
}

pub fn airy_ai(x: f64) -> f64 {
    airy_pair(x).0
}

pub fn airy_ai_prime(x: f64) -> f64 {
    airy_pair(x).1
}

fn maclaurin_pair(x: f64) -> (f64, f64) {
    let x3 = x * x * x;
    // Term k of f is x^{3k}·∏(3j+1)/(3k)!; term k of g is
    // x^{3k+1}·∏(3j+2)/(3k+1)!. Both advance by simple ratios.
    let mut t = 1.0f64;
    let mut u = x;
    let mut f = t;
    let mut g = u;
    let mut fp = 0.0f64;
    let mut gp = if x == 0.0 { 1.0 } else { u / x };
    for k in 0..200 {
        let kf = k as f64;
        t *= x3 / ((3.0 * kf + 2.0) * (3.0 * kf + 3.0));
        u *= x3 / ((3.0 * kf + 3.0) * (3.0 * kf + 4.0));
        f += t;
        g += u;
        if x != 0.0 {
            // d/dx of the k+1 terms: the powers drop by one.
            fp += (3.0 * kf + 3.0) * t / x;
            gp += (3.0 * kf + 4.0) * u / x;
        }
        if t.abs() + u.abs() < 1e-20 * (f.abs() + g.abs() + 1.0) {
            break;
        }
    }
    (
        AI_ZERO * f - AI_PRIME_ZERO * g,
        AI_ZERO * fp - AI_PRIME_ZERO * gp,
    )
}

fn asymptotic_pair(x: f64) -> (f64, f64) {
    let zeta = 2.0 / 3.0 * x.powf(1.5);
    // u₀ = v₀ = 1, u advances by (6k+1)(6k+3)(6k+5)/(216(k+1)(2k+1)),
    // v_k = u_k·(6k+1)/(1−6k); the sums are Σ(−1)^k u_k ζ^{−k} and
    // Σ(−1)^k v_k ζ^{−k}, truncated at the smallest term.
    let mut u = 1.0f64;
    let mut zk = 1.0f64;
    let mut sum_a = 1.0f64;
    let mut sum_b = 1.0f64;
    let mut prev = f64::INFINITY;
    for k in 0..60 {
        let kf = k as f64;
        u *= (6.0 * kf + 1.0) * (6.0 * kf + 3.0) * (6.0 * kf + 5.0)
            / (216.0 * (kf + 1.0) * (2.0 * kf + 1.0));
        zk *= zeta;
        let term = u / zk;
        if term >= prev {
            break;
        }
        prev = term;
        let sign = if k % 2 == 0 { -1.0 } else { 1.0 };
        sum_a += sign * term;
        let kp = kf + 1.0;
        let v = (6.0 * kp + 1.0) / (1.0 - 6.0 * kp) * u;
        sum_b += sign * v / zk;
        if term < 1e-19 {
            break;
        }
    }
    let prefactor = (-zeta).exp() / (2.0 * std::f64::consts::PI.sqrt());
    (
        prefactor / x.powf(0.25) * sum_a,
        -prefactor * x.powf(0.25) * sum_b,
    )
}
