//! Tests for the Tracy–Widom(2) table: the Airy evaluator against frozen
//! high-precision reference values, the table against its structural
//! invariants and literature constants, and the CDF against an independent
//! Fredholm-determinant evaluation of the same distribution.

use blockrmt::tw::airy::{airy_ai, airy_ai_prime, airy_pair};
use blockrmt::tw::{build_tw2, ks_distance, max_of_d_cdf, max_of_d_cdf_raw, TWTable};
use blockrmt::{linalg, Error};

/// Reference (Ai, Ai') pairs computed with 40-digit arithmetic.
const AIRY_ORACLE: &[(f64, f64, f64)] = &[
    (-10.0, 0.040241238486443191, 0.99626504413279006),
    (-8.0, -0.052705050356386203, 0.93556093819830655),
    (-5.0, 0.35076100902411432, 0.32719281855444314),
    (-2.0, 0.22740742820168558, 0.61825902074169104),
    (-1.0, 0.53556088329235212, -0.010160567116645209),
    (-0.3, 0.43090309528558086, -0.24054512725815461),
    (0.0, 0.35502805388781724, -0.25881940379280680),
    (0.5, 0.23169360648083349, -0.22491053266468389),
    (1.0, 0.13529241631288142, -0.15914744129679321),
    (2.0, 0.034924130423274379, -0.053090384433653632),
    (3.2, 0.0045674392740398209, -0.0084958172185685959),
    (5.0, 0.00010834442813607442, -0.00024741389086846248),
    (6.0, 9.9476943602528896e-6, -2.4765200397034955e-5),
    (6.5, 2.7958823432049136e-6, -7.2319314666017926e-6),
    (7.0, 7.4921288639971671e-7, -2.0081508947387920e-6),
    (8.0, 4.6922076160992316e-8, -1.3414392979067866e-7),
    (12.0, 1.3931846888753608e-13, -4.8547365549853085e-13),
    (20.0, 1.6916728686705403e-27, -7.5863916257483550e-27),
    (32.0, 4.6067311124102320e-54, -2.6095473311242520e-53),
];

#[test]
fn airy_matches_reference_values() {
    for &(x, ai, aip) in AIRY_ORACLE {
        let (a, ap) = airy_pair(x);
        // The power series loses ~e^{2|x|^{3/2}/3}·ε to cancellation, which
        // reaches ~1e-7 relative at the deepest oscillatory point.
        let tol = if x <= -9.0 { 5e-7 } else { 3e-9 };
        assert!(
            ((a - ai) / ai).abs() < tol,
            "Ai({x}): {a} vs reference {ai}"
        );
        assert!(
            ((ap - aip) / aip).abs() < tol,
            "Ai'({x}): {ap} vs reference {aip}"
        );
        assert_eq!(a, airy_ai(x));
        assert_eq!(ap, airy_ai_prime(x));
    }
}

#[test]
fn table_satisfies_structural_invariants() {
    let table = build_tw2(1e-10).unwrap();

    assert_eq!(table.s_grid.len(), 1801);
    assert_eq!(table.s_grid[0], -10.0);
    assert_eq!(*table.s_grid.last().unwrap(), 8.0);
    assert!(table.s_grid.windows(2).all(|w| w[1] > w[0]));
    assert_eq!(table.q.len(), 1801);
    assert_eq!(table.cdf.len(), 1801);
    assert_eq!(table.pdf.len(), 1801);

    // Both tails closed.
    assert!(table.cdf[0] < 1e-8, "left tail {:e}", table.cdf[0]);
    assert!(
        *table.cdf.last().unwrap() > 1.0 - 1e-10,
        "right tail {}",
        table.cdf.last().unwrap()
    );

    // Monotone CDF, nonnegative density, unit mass.
    assert!(table.cdf.windows(2).all(|w| w[1] >= w[0]));
    assert!(table.pdf.iter().all(|&p| p >= 0.0));
    assert!((table.pdf_mass() - 1.0).abs() < 1e-6);

    // The Hastings–McLeod solution is positive and glued to Ai on the
    // right; q(0) is a known constant.
    assert!(table.q.iter().all(|&v| v > 0.0));
    assert!((table.q_at(7.5) / airy_ai(7.5) - 1.0).abs() < 1e-8);
    assert!(
        (table.q_at(0.0) - 0.36706155154807287).abs() < 1e-10,
        "q(0) = {}",
        table.q_at(0.0)
    );

    // Out-of-range evaluation clamps.
    assert_eq!(table.cdf_at(-11.0), 0.0);
    assert_eq!(table.cdf_at(9.0), 1.0);
    assert_eq!(table.pdf_at(-11.0), 0.0);
    assert_eq!(table.pdf_at(9.0), 0.0);

    // Unusable tolerances are rejected.
    assert!(matches!(build_tw2(0.0), Err(Error::Config(_))));
    assert!(matches!(build_tw2(-1e-9), Err(Error::Config(_))));
    assert!(matches!(build_tw2(1e-3), Err(Error::Config(_))));
}

#[test]
fn pdf_is_the_derivative_of_the_cdf() {
    let table = build_tw2(1e-10).unwrap();
    let h = table.s_grid[1] - table.s_grid[0];
    let mut worst = 0.0f64;
    for i in 2..table.s_grid.len() - 2 {
        let fd = (-table.cdf[i + 2] + 8.0 * table.cdf[i + 1] - 8.0 * table.cdf[i - 1]
            + table.cdf[i - 2])
            / (12.0 * h);
        worst = worst.max((fd - table.pdf[i]).abs());
    }
    assert!(worst < 1e-5, "pdf deviates from d(cdf)/ds by {worst:e}");
}

#[test]
fn mean_and_variance_match_the_literature() {
    let table = build_tw2(1e-10).unwrap();
    let mean = table.mean();
    let var = table.variance();
    assert!(
        (mean - (-1.7710868074)).abs() < 1e-9,
        "mean = {mean}, expected -1.7710868074"
    );
    assert!(
        (var - 0.8131947928).abs() < 1e-9,
        "variance = {var}, expected 0.8131947928"
    );
}

/// Independent oracle: `F2(s) = det(I − K_Ai)` on `L²(s, ∞)` with the Airy
/// kernel, evaluated by Gauss–Legendre Nyström discretization. The kernel
/// decays superexponentially, so truncating at `s + Δ` with `Δ` well past
/// the Airy turning point loses nothing at double precision.
fn fredholm_f2(s: f64) -> f64 {
    let n = 100;
    let upper = 20.0;
    let (nodes, weights) = linalg::gauss_legendre(n);
    let half = 0.5 * (upper - s);
    let mid = 0.5 * (upper + s);
    let xs: Vec<f64> = nodes.iter().map(|t| mid + half * t).collect();
    let ws: Vec<f64> = weights.iter().map(|w| half * w).collect();

    let kernel = |x: f64, y: f64| -> f64 {
        if x == y {
            let (a, ap) = airy_pair(x);
            ap * ap - x * a * a
        } else {
            let (ax, apx) = airy_pair(x);
            let (ay, apy) = airy_pair(y);
            (ax * apy - ay * apx) / (x - y)
        }
    };

    let mut m = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in 0..n {
            let symm = (ws[i] * ws[j]).sqrt();
            m[i][j] = f64::from(i == j) - symm * kernel(xs[i], xs[j]);
        }
    }
    real_determinant(m)
}

/// Determinant via partial-pivoted elimination (test-local; the crate's
/// factorizations are complex-valued).
fn real_determinant(mut m: Vec<Vec<f64>>) -> f64 {
    let n = m.len();
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))
            .unwrap();
        if pivot != col {
            m.swap(pivot, col);
            det = -det;
        }
        det *= m[col][col];
        if m[col][col] == 0.0 {
            return 0.0;
        }
        for row in col + 1..n {
            let factor = m[row][col] / m[col][col];
            if factor != 0.0 {
                for k in col..n {
                    m[row][k] -= factor * m[col][k];
                }
            }
        }
    }
    det
}

#[test]
fn cdf_agrees_with_the_fredholm_determinant() {
    let table = build_tw2(1e-10).unwrap();
    for s in [-8.0, -6.0, -4.0, -2.0, -1.0, 0.0, 1.0, 2.0, 4.0] {
        let det = fredholm_f2(s);
        let tabulated = table.cdf_at(s);
        assert!(
            (det - tabulated).abs() < 1e-4,
            "F2({s}): determinant {det} vs table {tabulated}"
        );
    }
}

#[test]
fn max_of_d_law_behaves() {
    let table = build_tw2(1e-10).unwrap();

    // One block is plain Tracy-Widom.
    for s in [-3.0, -1.0, 0.0, 2.0] {
        assert_eq!(max_of_d_cdf(s, 1, &table).unwrap(), table.cdf_at(s));
    }

    // A proper CDF in s for several block counts.
    for d in [2usize, 3, 10] {
        let mut prev = -1.0;
        for k in 0..=60 {
            let s = -12.0 + 24.0 * k as f64 / 60.0;
            let v = max_of_d_cdf(s, d, &table).unwrap();
            assert!((0.0..=1.0).contains(&v));
            assert!(v >= prev, "not monotone at s = {s}, d = {d}");
            prev = v;
        }
        // Far enough out that the rescaled argument ±40·d^{-2/3} clears
        // the grid (or its value is astronomically small) for d ≤ 10.
        let lo = max_of_d_cdf(-40.0, d, &table).unwrap();
        let hi = max_of_d_cdf(40.0, d, &table).unwrap();
        assert!(lo < 1e-100);
        assert_eq!(hi, 1.0);
    }

    // More blocks push the maximum up: at the unrescaled level
    // F2(s)^{d+1} < F2(s)^d wherever F2 < 1.
    for d in 1..6 {
        let a = max_of_d_cdf_raw(0.0, d, &table).unwrap();
        let b = max_of_d_cdf_raw(0.0, d + 1, &table).unwrap();
        assert!(b < a);
    }

    // The rescaled and raw variants are the same law read on different
    // axes: F_max(s·d^{2/3}) = F2(s)^d.
    for d in [2usize, 5] {
        for s in [-2.0, -0.5, 0.0, 1.0] {
            let scaled = max_of_d_cdf(s * (d as f64).powf(2.0 / 3.0), d, &table).unwrap();
            let raw = max_of_d_cdf_raw(s, d, &table).unwrap();
            assert!((scaled - raw).abs() < 1e-12);
        }
    }

    assert!(matches!(
        max_of_d_cdf(0.0, 0, &table),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        max_of_d_cdf_raw(0.0, 0, &table),
        Err(Error::Config(_))
    ));
}

/// Invert the tabulated CDF by bisection.
fn quantile(table: &TWTable, u: f64) -> f64 {
    let (mut lo, mut hi) = (-10.0, 8.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if table.cdf_at(mid) < u {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn ks_distance_detects_the_right_law() {
    let table = build_tw2(1e-10).unwrap();

    // Inverse-transform sample with a fixed deterministic stream.
    let mut state = 0x9e3779b97f4a7c15u64;
    let mut next_uniform = || {
        state = state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z = z ^ (z >> 31);
        (z >> 11) as f64 / (1u64 << 53) as f64
    };
    let samples: Vec<f64> = (0..10_000)
        .map(|_| quantile(&table, next_uniform().clamp(1e-12, 1.0 - 1e-12)))
        .collect();

    let d_true = ks_distance(&samples, |s| table.cdf_at(s)).unwrap();
    assert!(d_true < 0.02, "KS against own law = {d_true}");

    // A shifted sample must be rejected loudly.
    let shifted: Vec<f64> = samples.iter().map(|s| s + 0.5).collect();
    let d_shifted = ks_distance(&shifted, |s| table.cdf_at(s)).unwrap();
    assert!(d_shifted > 0.1, "KS against shifted law = {d_shifted}");
}
