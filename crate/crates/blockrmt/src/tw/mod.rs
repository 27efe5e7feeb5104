//! The Tracy–Widom(2) distribution and the max-of-independent-edges law.
//!
//! `F2` is built through the Painlevé II representation: with `q` the
//! Hastings–McLeod solution of `q'' = sq + 2q³` (the one decaying like
//! `Ai(s)` as `s → ∞` and riding the parabola branch `√(−s/2)` as
//! `s → −∞`),
//!
//! ```text
//! F2(s) = exp(−∫_s^∞ (x − s)·q(x)² dx).
//! ```
//!
//! The Hastings–McLeod solution is a separatrix with an exponential
//! dichotomy in *both* directions: the linearization `u'' = (s + 6q²)u`
//! has positive potential `≈ 2|s|` on the left, so perturbations grow like
//! `exp(√2·(2/3)|s|^{3/2})` — about `5e11` over `[−10, 0]` — and plain
//! initial-value integration leaves the branch near `s ≈ −9.4` (backward
//! from the Airy data) or `s ≈ −4` (forward from the parabola data) no
//! matter the tolerance. The solution is therefore computed as a two-point
//! boundary-value problem by multiple shooting: unknown states `(q, q')`
//! at the integer nodes of `[−10, 8]`, continuity of the unit-length
//! segment flow maps, `q(−10)` pinned to the asymptotic value
//!
//! ```text
//! q(s) = √(−s/2)·(1 + s⁻³/8 − 73·s⁻⁶/128 + 10657·s⁻⁹/1024 + O(s⁻¹²)),
//! ```
//!
//! and `q(8) = Ai(8)`. Per-segment error growth is at most `e^{√20} ≈ 87`,
//! so Newton on the matching system is well conditioned; the slopes the
//! solve leaves free must reproduce `Ai'(8)` and the series derivative at
//! the ends, which is checked as a postcondition.
//!
//! The table is then filled by one backward sweep of the augmented system
//! `(q, q', I, J)` with `I' = −J`, `J' = −q²` — `I` and `J` are the tail
//! integrals `∫_s^∞ (x−s)q²` and `∫_s^∞ q²`, which have closed Airy forms
//! at `s = 8` — re-anchoring `(q, q')` at each converged shooting node so
//! the dichotomy never acts over more than one segment. Node values are
//! evaluated with cubic Hermite interpolation whose slope data are exact:
//! `F2' = J·F2` and `f2' = (J² − q²)·F2`.
//!
//! For `D` independent block edges, the rescaled maximum obeys
//! `P((DN)^{2/3}(λ_max − 2) ≤ s) = F2(s·D^{−2/3})^D`, the reference law of
//! the localized phase.

pub mod airy;

use crate::linalg::gauss_legendre;
use crate::{Error, Result};
use airy::airy_pair;

/// Left end of the table; `F2(−10) ≈ 5e−37`.
const S_MIN: i64 = -10;
/// Right end of the table; `1 − F2(8) ≈ 7e−17`, and the Hastings–McLeod
/// data there are Airy closed forms.
const S_MAX: i64 = 8;
/// Table nodes per unit of `s`.
const NODES_PER_UNIT: i64 = 100;

/// Tabulated Tracy–Widom(2) distribution.
///
/// All vectors share the same increasing grid. Evaluation outside the grid
/// clamps the CDF to `{0, 1}` and the PDF to `0`.
#[derive(Clone, Debug)]
pub struct TWTable {
    /// Increasing grid on `[−10, 8]`.
    pub s_grid: Vec<f64>,
    /// Hastings–McLeod solution values.
    pub q: Vec<f64>,
    /// CDF values `F2(s)`.
    pub cdf: Vec<f64>,
    /// PDF values `f2(s) = F2'(s)`.
    pub pdf: Vec<f64>,
    /// `q'` at the nodes (Hermite slope data for `q`).
    qp: Vec<f64>,
    /// `J(s) = ∫_s^∞ q²`, the exact logarithmic derivative of `F2`.
    jj: Vec<f64>,
}

/// Build the table from the Airy right-tail data and the parabola-branch
/// left-tail data.
///
/// `tol` is the local error target per integrator step (`1e−11` is a good
/// default; anything in `(0, 1e−4]` is accepted). The boundary-value solve
/// failing to converge, or its free slopes disagreeing with the known tail
/// derivatives, is reported as a construction error.
pub fn build_tw2(tol: f64) -> Result<TWTable> {
    if !(tol > 0.0 && tol <= 1e-4) {
        return Err(Error::Config(format!("unusable Painleve tolerance {tol}")));
    }

    let anchors = solve_separatrix(tol)?;

    // One backward tabulation sweep. I and J start from their closed Airy
    // forms, J(s) = Ai'² − s·Ai² and I(s) = (2s²Ai² − 2sAi'² − Ai·Ai')/3;
    // (q, q') restarts from the converged anchor at every integer node.
    let s_right = S_MAX as f64;
    let (a0, ap0) = airy_pair(s_right);
    let mut y = [
        a0,
        ap0,
        (2.0 * s_right * s_right * a0 * a0 - 2.0 * s_right * ap0 * ap0 - a0 * ap0) / 3.0,
        ap0 * ap0 - s_right * a0 * a0,
    ];
    let rhs = |s: f64, y: &[f64; 4]| -> [f64; 4] {
        [
            y[1],
            s * y[0] + 2.0 * y[0] * y[0] * y[0],
            -y[3],
            -y[0] * y[0],
        ]
    };

    let len = ((S_MAX - S_MIN) * NODES_PER_UNIT + 1) as usize;
    let mut s_grid = Vec::with_capacity(len);
    let mut q = Vec::with_capacity(len);
    let mut qp = Vec::with_capacity(len);
    let mut cdf = Vec::with_capacity(len);
    let mut pdf = Vec::with_capacity(len);
    let mut jj = Vec::with_capacity(len);
    let mut push = |s: f64, y: &[f64; 4]| {
        let f2 = (-y[2]).exp();
        s_grid.push(s);
        q.push(y[0]);
        qp.push(y[1]);
        cdf.push(f2);
        pdf.push(y[3] * f2);
        jj.push(y[3]);
    };

    push(s_right, &y);
    let mut s = s_right;
    for k in (S_MIN * NODES_PER_UNIT..S_MAX * NODES_PER_UNIT).rev() {
        integrate_to(&mut y, &mut s, k as f64 / NODES_PER_UNIT as f64, tol, &rhs)?;
        if k % NODES_PER_UNIT == 0 {
            let anchor = anchors[(k / NODES_PER_UNIT - S_MIN) as usize];
            y[0] = anchor[0];
            y[1] = anchor[1];
        }
        push(s, &y);
    }

    s_grid.reverse();
    q.reverse();
    qp.reverse();
    cdf.reverse();
    pdf.reverse();
    jj.reverse();

    let table = TWTable {
        s_grid,
        q,
        cdf,
        pdf,
        qp,
        jj,
    };
    table.validate()?;
    Ok(table)
}

/// Multiple-shooting solve for the Hastings–McLeod states `(q, q')` at the
/// integer nodes `−10, …, 8`.
fn solve_separatrix(tol: f64) -> Result<Vec<[f64; 2]>> {
    let segments = (S_MAX - S_MIN) as usize;
    let rhs = |s: f64, y: &[f64; 2]| -> [f64; 2] {
        [y[1], s * y[0] + 2.0 * y[0] * y[0] * y[0]]
    };
    let flow = |x: [f64; 2], s0: f64, s1: f64| -> Result<[f64; 2]> {
        let mut y = x;
        let mut s = s0;
        integrate_to(&mut y, &mut s, s1, tol, &rhs)?;
        Ok(y)
    };

    let (q_left, qp_left) = parabola_branch(S_MIN as f64);
    let (ai_right, aip_right) = airy_pair(S_MAX as f64);

    // Initial guess: the two asymptotic branches, bridged near the origin.
    let mut x: Vec<[f64; 2]> = (S_MIN..=S_MAX)
        .map(|j| match j {
            _ if j <= -2 => {
                let (qv, pv) = parabola_branch(j as f64);
                [qv, pv]
            }
            -1 => [0.65, -0.55],
            _ => {
                let (qv, pv) = airy_pair(j as f64);
                [qv, pv]
            }
        })
        .collect();

    // Residual: q(−10) pinned, per-segment continuity, q(8) pinned.
    let dim = 2 * (segments + 1);
    let residual = |x: &[[f64; 2]]| -> Result<Vec<f64>> {
        let mut r = vec![0.0; dim];
        r[0] = x[0][0] - q_left;
        for j in 0..segments {
            let mapped = flow(x[j], (S_MIN + j as i64) as f64, (S_MIN + j as i64 + 1) as f64)?;
            r[1 + 2 * j] = mapped[0] - x[j + 1][0];
            r[2 + 2 * j] = mapped[1] - x[j + 1][1];
        }
        r[dim - 1] = x[segments][0] - ai_right;
        Ok(r)
    };

    let res_target = (100.0 * tol).max(1e-13);
    let mut r = residual(&x)?;
    let mut r_norm = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for _ in 0..30 {
        if r_norm <= res_target {
            break;
        }
        // Dense Newton system; segment flow-map Jacobians by forward
        // differences.
        let mut jac = vec![vec![0.0; dim]; dim];
        jac[0][0] = 1.0;
        jac[dim - 1][2 * segments] = 1.0;
        for j in 0..segments {
            let (s0, s1) = ((S_MIN + j as i64) as f64, (S_MIN + j as i64 + 1) as f64);
            let base = flow(x[j], s0, s1)?;
            for c in 0..2 {
                let delta = 1e-7 * (1.0 + x[j][c].abs());
                let mut bumped = x[j];
                bumped[c] += delta;
                let mapped = flow(bumped, s0, s1)?;
                jac[1 + 2 * j][2 * j + c] = (mapped[0] - base[0]) / delta;
                jac[2 + 2 * j][2 * j + c] = (mapped[1] - base[1]) / delta;
            }
            jac[1 + 2 * j][2 * (j + 1)] = -1.0;
            jac[2 + 2 * j][2 * (j + 1) + 1] = -1.0;
        }
        let mut step: Vec<f64> = r.iter().map(|v| -v).collect();
        solve_real_system(&mut jac, &mut step)?;

        // Damped update: halve the step while it fails to reduce the
        // residual.
        let mut lambda = 1.0;
        let mut improved = false;
        for _ in 0..8 {
            let mut trial = x.clone();
            for (j, t) in trial.iter_mut().enumerate() {
                t[0] += lambda * step[2 * j];
                t[1] += lambda * step[2 * j + 1];
            }
            if let Ok(r_new) = residual(&trial) {
                let n_new = r_new.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                if n_new < r_norm {
                    x = trial;
                    r = r_new;
                    r_norm = n_new;
                    improved = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !improved {
            return Err(Error::Solver(format!(
                "separatrix matching stalled at residual {r_norm:e}"
            )));
        }
    }
    if r_norm > 10.0 * res_target {
        return Err(Error::Solver(format!(
            "separatrix matching did not converge: residual {r_norm:e}"
        )));
    }

    // The solve pins only the q components at the ends; the slopes it
    // produces there must reproduce the known tail derivatives.
    if (x[0][1] - qp_left).abs() > 1e-6 || (x[segments][1] / aip_right - 1.0).abs() > 1e-6 {
        return Err(Error::Solver(
            "separatrix slopes disagree with the tail data".into(),
        ));
    }
    Ok(x)
}

/// Left asymptotic data of the Hastings–McLeod solution,
/// `q = √(−s/2)·P(s)` with `P = 1 + s⁻³/8 − 73·s⁻⁶/128 + 10657·s⁻⁹/1024`.
fn parabola_branch(s: f64) -> (f64, f64) {
    let root = (-s / 2.0).sqrt();
    let (s3, s4) = (s.powi(-3), s.powi(-4));
    let p = 1.0 + s3 / 8.0 - 73.0 / 128.0 * s3 * s3 + 10657.0 / 1024.0 * s3 * s3 * s3;
    let dp = -3.0 / 8.0 * s4 + 219.0 / 64.0 * s4 * s3 - 95913.0 / 1024.0 * s4 * s3 * s3;
    (root * p, -p / (4.0 * root) + root * dp)
}

/// In-place Gaussian elimination with partial pivoting for the small dense
/// Newton systems.
fn solve_real_system(a: &mut [Vec<f64>], b: &mut [f64]) -> Result<()> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[pivot][col].abs() < 1e-300 {
            return Err(Error::Solver("singular matching system".into()));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            if factor != 0.0 {
                for k in col..n {
                    a[row][k] -= factor * a[col][k];
                }
                b[row] -= factor * b[col];
            }
        }
    }
    for col in (0..n).rev() {
        let mut sum = b[col];
        for k in col + 1..n {
            sum -= a[col][k] * b[k];
        }
        b[col] = sum / a[col][col];
    }
    Ok(())
}

/// Advance a state vector to `target` (either direction) with adaptive
/// embedded Runge–Kutta steps, guarding against the solution leaving the
/// decaying branch.
fn integrate_to<const N: usize>(
    y: &mut [f64; N],
    s: &mut f64,
    target: f64,
    tol: f64,
    rhs: &impl Fn(f64, &[f64; N]) -> [f64; N],
) -> Result<()> {
    use crate::flow::{COUPLINGS, STAGE_TIMES, WEIGHTS_4, WEIGHTS_5};

    let dir = (target - *s).signum();
    let mut h = dir * 0.01;
    while (target - *s) * dir > 0.0 {
        if (*s + h - target) * dir > 0.0 {
            h = target - *s;
        }
        let mut k = [[0.0f64; N]; 7];
        k[0] = rhs(*s, y);
        for stage in 1..7 {
            let mut yi = *y;
            for (j, kj) in k.iter().enumerate().take(stage) {
                let a = COUPLINGS[stage - 1][j];
                for c in 0..N {
                    yi[c] += h * a * kj[c];
                }
            }
            k[stage] = rhs(*s + STAGE_TIMES[stage] * h, &yi);
        }
        let mut y5 = *y;
        let mut y4 = *y;
        for (j, kj) in k.iter().enumerate() {
            for c in 0..N {
                y5[c] += h * WEIGHTS_5[j] * kj[c];
                y4[c] += h * WEIGHTS_4[j] * kj[c];
            }
        }
        let mut err = 0.0f64;
        let mut scale = 1.0f64;
        for c in 0..N {
            err = err.max((y5[c] - y4[c]).abs());
            scale = scale.max(y5[c].abs());
        }
        if err <= tol * scale {
            *s += h;
            *y = y5;
            if !y[0].is_finite() || y[0].abs() > 10.0 {
                return Err(Error::Solver(format!(
                    "Painleve II solution left the decaying branch near s = {s} (q = {})",
                    y[0]
                )));
            }
            h *= (0.9 * (tol * scale / err.max(1e-300)).powf(0.2)).clamp(1.0, 5.0);
        } else {
            h *= (0.9 * (tol * scale / err).powf(0.2)).clamp(0.1, 0.9);
        }
        if h.abs() < 1e-13 {
            h = dir * 1e-13;
        }
        if h.abs() > 0.01 {
            h = dir * 0.01;
        }
    }
    Ok(())
}

impl TWTable {
    /// Construction postconditions: monotone CDF with both tails closed,
    /// nonnegative density, positive strictly decreasing Hastings–McLeod
    /// solution glued to the Airy tail on the right.
    fn validate(&self) -> Result<()> {
        let n = self.s_grid.len();
        let first = self.cdf[0];
        let last = self.cdf[n - 1];
        if !(first < 1e-8) {
            return Err(Error::Solver(format!("left tail not closed: F2 = {first:e}")));
        }
        if !(last > 1.0 - 1e-10) {
            return Err(Error::Solver(format!("right tail not closed: F2 = {last}")));
        }
        for i in 1..n {
            if self.cdf[i] < self.cdf[i - 1] {
                return Err(Error::Solver(format!(
                    "CDF decreases near s = {}",
                    self.s_grid[i]
                )));
            }
        }
        if self.pdf.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::Solver("negative density".into()));
        }
        for i in 1..n {
            if !(self.q[i] > 0.0 && self.q[i] < self.q[i - 1]) {
                return Err(Error::Solver(format!(
                    "Hastings-McLeod solution not positive decreasing near s = {}",
                    self.s_grid[i]
                )));
            }
        }
        let probe = n - 2;
        let ai_probe = airy_pair(self.s_grid[probe]).0;
        if (self.q[probe] / ai_probe - 1.0).abs() > 1e-8 {
            return Err(Error::Solver("right tail does not match Airy".into()));
        }
        Ok(())
    }

    fn locate(&self, s: f64) -> usize {
        // Index of the interval [s_i, s_{i+1}] containing s.
        match self
            .s_grid
            .binary_search_by(|v| v.partial_cmp(&s).unwrap_or(std::cmp::Ordering::Less))
        {
            Ok(i) => i.min(self.s_grid.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.s_grid.len() - 2),
        }
    }

    fn hermite(&self, s: f64, values: &[f64], slopes_of: impl Fn(usize) -> f64) -> f64 {
        let i = self.locate(s);
        let h = self.s_grid[i + 1] - self.s_grid[i];
        let th = (s - self.s_grid[i]) / h;
        let h00 = (1.0 + 2.0 * th) * (1.0 - th) * (1.0 - th);
        let h10 = th * (1.0 - th) * (1.0 - th);
        let h01 = th * th * (3.0 - 2.0 * th);
        let h11 = th * th * (th - 1.0);
        values[i] * h00
            + slopes_of(i) * h * h10
            + values[i + 1] * h01
            + slopes_of(i + 1) * h * h11
    }

    /// `F2(s)`, clamped to `{0, 1}` beyond the grid.
    pub fn cdf_at(&self, s: f64) -> f64 {
        if s <= self.s_grid[0] {
            return 0.0;
        }
        if s >= *self.s_grid.last().unwrap() {
            return 1.0;
        }
        self.hermite(s, &self.cdf, |i| self.pdf[i]).clamp(0.0, 1.0)
    }

    /// `f2(s)`, zero beyond the grid.
    pub fn pdf_at(&self, s: f64) -> f64 {
        if s <= self.s_grid[0] || s >= *self.s_grid.last().unwrap() {
            return 0.0;
        }
        let slope = |i: usize| (self.jj[i] * self.jj[i] - self.q[i] * self.q[i]) * self.cdf[i];
        self.hermite(s, &self.pdf, slope).max(0.0)
    }

    /// The Hastings–McLeod solution, clamped to its endpoint values beyond
    /// the grid.
    pub fn q_at(&self, s: f64) -> f64 {
        if s <= self.s_grid[0] {
            return self.q[0];
        }
        if s >= *self.s_grid.last().unwrap() {
            return *self.q.last().unwrap();
        }
        self.hermite(s, &self.q, |i| self.qp[i])
    }

    /// `∫ f2` over the table (should be 1 up to the tail mass ~1e−16).
    pub fn pdf_mass(&self) -> f64 {
        self.moment(|_| 1.0)
    }

    pub fn mean(&self) -> f64 {
        self.moment(|s| s)
    }

    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        self.moment(|s| (s - mean) * (s - mean))
    }

    fn moment(&self, weight: impl Fn(f64) -> f64) -> f64 {
        let (nodes, weights) = gauss_legendre(6);
        let mut total = 0.0;
        for i in 0..self.s_grid.len() - 1 {
            let (a, b) = (self.s_grid[i], self.s_grid[i + 1]);
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            for (x, w) in nodes.iter().zip(weights.iter()) {
                let s = mid + half * x;
                total += half * w * weight(s) * self.pdf_at(s);
            }
        }
        total
    }
}

/// CDF of the rescaled maximum of `d` independent edge fluctuations:
/// `F2(s·d^{−2/3})^d`. With the whole matrix normalized on one scale, each
/// of the `d` blocks contributes an independent edge at relative scale
/// `d^{2/3}`.
pub fn max_of_d_cdf(s: f64, d: usize, table: &TWTable) -> Result<f64> {
    if d == 0 {
        return Err(Error::Config("need at least one block".into()));
    }
    let df = d as f64;
    Ok(table.cdf_at(s / df.powf(2.0 / 3.0)).powi(d as i32))
}

/// Unrescaled variant `F2(s)^d`, for visual comparison plots.
pub fn max_of_d_cdf_raw(s: f64, d: usize, table: &TWTable) -> Result<f64> {
    if d == 0 {
        return Err(Error::Config("need at least one block".into()));
    }
    Ok(table.cdf_at(s).powi(d as i32))
}

/// Two-sided Kolmogorov–Smirnov statistic of `samples` against `cdf`.
pub fn ks_distance(samples: &[f64], cdf: impl Fn(f64) -> f64) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Config(format!(
            "need at least 2 samples, got {}",
            samples.len()
        )));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("non-finite sample".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;
    let mut worst = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        worst = worst
            .max(((i + 1) as f64 / n - f).abs())
            .max((f - i as f64 / n).abs());
    }
    Ok(worst)
}
