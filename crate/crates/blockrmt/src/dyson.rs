//! Deterministic spectral theory of the coupled-block model: the
//! self-consistent Stieltjes transform, the spectral density with its edges,
//! curvatures and quantiles, the eigenvalue/eigenvector shift predictions,
//! and the block algebra controlling products of two and three resolvents.
//!
//! Everything here is a function of Λ's spectrum alone. The self-consistent
//! equation `m(z) = ⟨(Λ − z − m(z))^{-1}⟩` is solved pointwise by a damped
//! fixed point — the map is a self-map of the closed upper half plane, so
//! damping is globally safe — finished by safeguarded Newton steps for the
//! stiff near-edge regime where the contraction factor degrades to
//! `1 − η/Im m`. Real-axis values come from a warm-started continuation down
//! an η-ladder ending in an on-axis Newton solve, so arbitrary atom spectra
//! work without closed forms.
//!
//! The deterministic resolvent proxy `M(z) = (Λ − z − m(z))^{-1}` is diagonal
//! in Λ's eigenbasis. Traces against functions of Λ are therefore O(DN)
//! sums over eigenvalue atoms, and only traces against block projectors
//! (the D×D two-point matrix, its three-point tensor, and the regularity
//! diagnostics) touch the dense eigenbasis through the cached overlap
//! matrices.

use num_complex::Complex64;
use std::f64::consts::PI;

use crate::linalg::{brent, gauss_legendre, CMatrix};
use crate::model::LambdaSpectrum;
use crate::{Error, Result};

const SOLVER_TOL: f64 = 1e-13;

fn c_re(x: f64) -> Complex64 {
    Complex64::new(x, 0.0)
}

// ---------------------------------------------------------------------------
// Semicircle reference quantities
// ---------------------------------------------------------------------------

/// Stieltjes transform of the semicircle law, upper-half-plane branch:
/// `m_sc(z) = (−z + √(z−2)·√(z+2))/2`. The product of principal square
/// roots selects `Im m_sc ≥ 0` for `Im z ≥ 0` and the decaying branch
/// `m_sc(x) → 0` as `x → ±∞` on the real axis.
pub fn m_sc(z: Complex64) -> Complex64 {
    0.5 * (-z + (z - 2.0).sqrt() * (z + 2.0).sqrt())
}

/// Semicircle density `√(4 − x²)/(2π)` on `[−2, 2]`, zero outside.
pub fn rho_sc(x: f64) -> f64 {
    if x.abs() >= 2.0 {
        0.0
    } else {
        (4.0 - x * x).sqrt() / (2.0 * PI)
    }
}

/// Right tail mass of the semicircle law, `∫_x^2 ρ_sc`.
pub fn semicircle_tail(x: f64) -> f64 {
    if x >= 2.0 {
        0.0
    } else if x <= -2.0 {
        1.0
    } else {
        0.5 - x * (4.0 - x * x).sqrt() / (4.0 * PI) - (x / 2.0).asin() / PI
    }
}

/// The point with right tail mass `tau`: solves `semicircle_tail(x) = tau`.
pub fn semicircle_quantile(tau: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Config(format!("tail mass {tau} outside [0, 1]")));
    }
    // The tail is strictly decreasing on [−2, 2]; Brent to near machine
    // precision (Newton would divide by the vanishing density at the edges).
    brent(|x| semicircle_tail(x) - tau, -2.0, 2.0, 1e-15)
}

// ---------------------------------------------------------------------------
// Atom-measure traces
// ---------------------------------------------------------------------------

/// `⟨(Λ − w)^{-1}⟩ = Σ_j wt_j/(μ_j − w)` over the collapsed atoms.
pub fn lambda_resolvent_mean(spectrum: &LambdaSpectrum, w: Complex64) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for &(mu, wt) in spectrum.atoms() {
        acc += wt * (c_re(mu) - w).inv();
    }
    acc
}

/// `⟨(Λ − w)^{-2}⟩`; also the `w`-derivative of [`lambda_resolvent_mean`].
pub fn lambda_resolvent_mean_sq(spectrum: &LambdaSpectrum, w: Complex64) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for &(mu, wt) in spectrum.atoms() {
        let r = (c_re(mu) - w).inv();
        acc += wt * r * r;
    }
    acc
}

/// `⟨(Λ − w)^{-3}⟩`; twice this is the second `w`-derivative of
/// [`lambda_resolvent_mean`].
pub fn lambda_resolvent_mean_cu(spectrum: &LambdaSpectrum, w: Complex64) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for &(mu, wt) in spectrum.atoms() {
        let r = (c_re(mu) - w).inv();
        acc += wt * r * r * r;
    }
    acc
}

/// `⟨Λ (Λ − w)^{-2}⟩ = Σ_j wt_j μ_j/(μ_j − w)²`.
pub fn lambda_weighted_resolvent_sq(spectrum: &LambdaSpectrum, w: Complex64) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for &(mu, wt) in spectrum.atoms() {
        let r = (c_re(mu) - w).inv();
        acc += wt * mu * r * r;
    }
    acc
}

// ---------------------------------------------------------------------------
// Self-consistent solver
// ---------------------------------------------------------------------------

/// A converged solution of `m = ⟨(Λ − z − m)^{-1}⟩` at one spectral
/// parameter.
#[derive(Clone, Copy, Debug)]
pub struct MSolution {
    pub z: Complex64,
    pub m: Complex64,
    /// `|m − ⟨(Λ − z − m)^{-1}⟩|` at the returned `m`.
    pub residual: f64,
    pub iterations: usize,
    /// `Im m`, clamped to 0 when it is roundoff-negative on the real axis.
    pub im_m: f64,
}

/// Solve the self-consistent equation at `z`. `Im z < 0` is served by
/// solving at `z̄` and conjugating (one shared code path, so the symmetry
/// is exact); `Im z = 0` routes through the η-ladder continuation.
pub fn stieltjes(z: Complex64, spectrum: &LambdaSpectrum) -> Result<MSolution> {
    if z.im < 0.0 {
        let sol = stieltjes(z.conj(), spectrum)?;
        return Ok(MSolution {
            z,
            m: sol.m.conj(),
            residual: sol.residual,
            iterations: sol.iterations,
            im_m: -sol.im_m,
        });
    }
    if z.im == 0.0 {
        return stieltjes_real(z.re, spectrum);
    }
    solve_upper(z, spectrum, m_sc(z))
}

/// Like [`stieltjes`] but warm-started, for continuations and flows where a
/// nearby solution is already known. `Im z > 0` required.
pub fn stieltjes_with_guess(
    z: Complex64,
    spectrum: &LambdaSpectrum,
    guess: Complex64,
) -> Result<MSolution> {
    if z.im <= 0.0 {
        return Err(Error::Config(
            "warm-started solve needs Im z > 0; use stieltjes for the axis".into(),
        ));
    }
    solve_upper(z, spectrum, guess)
}

/// Damped fixed point plus safeguarded Newton in the open upper half plane.
fn solve_upper(z: Complex64, spectrum: &LambdaSpectrum, guess: Complex64) -> Result<MSolution> {
    debug_assert!(z.im > 0.0);
    let mut m = if guess.im >= 0.0 { guess } else { m_sc(z) };
    let mut f = lambda_resolvent_mean(spectrum, z + m) - m;
    let mut iterations = 0usize;

    for _round in 0..4 {
        if f.norm() <= SOLVER_TOL {
            break;
        }
        // Damped fixed point: m ← m + α(Φ(m) − m). Φ maps the closed upper
        // half plane into itself, so the iterates never leave it; α is
        // halved when the residual grows (oscillation across the root).
        let mut alpha = 0.5;
        let mut prev = f.norm();
        for _ in 0..200 {
            if f.norm() <= 1e-3 {
                break;
            }
            m += alpha * f;
            f = lambda_resolvent_mean(spectrum, z + m) - m;
            iterations += 1;
            let r = f.norm();
            if r > prev {
                alpha = (0.5 * alpha).max(0.05);
            }
            prev = r;
        }
        // Newton on F(m) = Φ(m) − m with a residual-decrease line search and
        // a half-plane guard. The root is simple for η > 0 (|Φ'| < 1 there),
        // so this finishes quadratically once the damped phase is close.
        for _ in 0..60 {
            if f.norm() <= SOLVER_TOL {
                break;
            }
            let fp = lambda_resolvent_mean_sq(spectrum, z + m) - 1.0;
            let mut step = if fp.norm() > 1e-300 { -f / fp } else { f };
            let mut accepted = false;
            for _ in 0..30 {
                let cand = m + step;
                if cand.im >= 0.0 {
                    let fc = lambda_resolvent_mean(spectrum, z + cand) - cand;
                    iterations += 1;
                    if fc.norm() < f.norm() {
                        m = cand;
                        f = fc;
                        accepted = true;
                        break;
                    }
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
    }

    let residual = f.norm();
    if residual > 1e-12 {
        return Err(Error::Solver(format!(
            "self-consistent solve stalled at z = {z}: residual {residual:e} after {iterations} iterations"
        )));
    }
    Ok(MSolution {
        z,
        m,
        residual,
        iterations,
        im_m: m.im,
    })
}

/// Continuation onto the real axis: warm-started solves down a fixed
/// η-ladder, then an on-axis Newton solve. If the axis solve stalls (it can
/// exactly at a spectral edge, where the solution branch point sits), the
/// `η = 1e−9` solution is returned instead — its `z` field keeps the honest
/// offset.
pub fn stieltjes_real(x: f64, spectrum: &LambdaSpectrum) -> Result<MSolution> {
    const LADDER: [f64; 5] = [1e-2, 1e-3, 1e-4, 1e-6, 1e-9];
    let mut sol = solve_upper(
        Complex64::new(x, LADDER[0]),
        spectrum,
        m_sc(Complex64::new(x, LADDER[0])),
    )?;
    for &eta in &LADDER[1..] {
        sol = solve_upper(Complex64::new(x, eta), spectrum, sol.m)?;
    }
    Ok(solve_axis(x, spectrum, sol.m).unwrap_or(sol))
}

/// Newton directly on the axis from a warm start; Im m is kept nonnegative,
/// and a roundoff-size imaginary part is snapped to zero so that points
/// outside the support report an exactly real `m`.
fn solve_axis(x: f64, spectrum: &LambdaSpectrum, guess: Complex64) -> Result<MSolution> {
    let z = c_re(x);
    let mut m = guess;
    let mut f = lambda_resolvent_mean(spectrum, z + m) - m;
    let mut iterations = 0usize;
    for _ in 0..60 {
        if f.norm() <= SOLVER_TOL {
            break;
        }
        let fp = lambda_resolvent_mean_sq(spectrum, z + m) - 1.0;
        if fp.norm() < 1e-14 {
            break;
        }
        let mut step = -f / fp;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = m + step;
            if cand.im >= -1e-15 {
                let fc = lambda_resolvent_mean(spectrum, z + cand) - cand;
                iterations += 1;
                if fc.norm() < f.norm() {
                    m = cand;
                    f = fc;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let residual = f.norm();
    if residual > 1e-12 {
        return Err(Error::Solver(format!(
            "on-axis solve stalled at x = {x}: residual {residual:e}"
        )));
    }
    if m.im.abs() < 1e-14 {
        m.im = 0.0;
    } else if m.im < 0.0 {
        return Err(Error::Solver(format!(
            "on-axis solve at x = {x} landed on the lower branch (Im m = {:e})",
            m.im
        )));
    }
    Ok(MSolution {
        z,
        m,
        residual,
        iterations,
        im_m: m.im,
    })
}

// ---------------------------------------------------------------------------
// The matrix M(z) and its eigenbasis diagonal
// ---------------------------------------------------------------------------

/// Diagonal of `M(z) = (Λ − z − m(z))^{-1}` in Λ's eigenbasis, one entry per
/// eigenvalue, aligned with `spectrum.eigenvalues()` and the basis columns.
pub fn m_diagonal(sol: &MSolution, spectrum: &LambdaSpectrum) -> Vec<Complex64> {
    spectrum
        .eigenvalues()
        .iter()
        .map(|&mu| (c_re(mu) - sol.z - sol.m).inv())
        .collect()
}

/// Dense `DN × DN` matrix `M(z)`, reconstructed from the eigenbasis. Only
/// small systems should call this; every trace the solvers need comes from
/// [`m_diagonal`] or the overlap matrices instead.
pub fn m_matrix(sol: &MSolution, spectrum: &LambdaSpectrum) -> CMatrix {
    let basis = spectrum.basis();
    let dim = spectrum.dim();
    let diag = m_diagonal(sol, spectrum);
    let mut scaled = basis.clone();
    for (col, d) in diag.iter().enumerate() {
        for i in 0..dim {
            scaled[(i, col)] *= d;
        }
    }
    scaled.mul_adjoint(basis)
}

/// `⟨M(z) M(z)*⟩`, evaluated as an atom sum. Equals `Im m/(Im m + η)` at
/// any solution with `η = Im z ≥ 0`.
pub fn m_mstar_mean(sol: &MSolution, spectrum: &LambdaSpectrum) -> f64 {
    let mut acc = 0.0;
    for &(mu, wt) in spectrum.atoms() {
        acc += wt / (c_re(mu) - sol.z - sol.m).norm_sqr();
    }
    acc
}

// ---------------------------------------------------------------------------
// Density
// ---------------------------------------------------------------------------

/// The η-ladder used by [`density`] when none is supplied: `1e−3·2^{−j}`,
/// `j = 0..6`.
pub fn default_eta_ladder() -> Vec<f64> {
    (0..7).map(|j| 1e-3 * 0.5f64.powi(j)).collect()
}

/// One extrapolated density value.
#[derive(Clone, Copy, Debug)]
pub struct DensityValue {
    pub rho: f64,
    /// Last Richardson correction — the internal disagreement estimate.
    pub spread: f64,
    /// Set when `spread > 1e−5`; the value is still returned.
    pub warning: bool,
}

/// `ρ_N(E)` by Richardson extrapolation of `Im m(E + iη)/π` down the ladder.
/// `Im m` is analytic in `η` at fixed `E` away from the edges, so polynomial
/// extrapolation in η converges fast; tiny negative results are clamped.
pub fn density(e: f64, spectrum: &LambdaSpectrum, ladder: Option<&[f64]>) -> Result<DensityValue> {
    let default = default_eta_ladder();
    let ladder = ladder.unwrap_or(&default);
    if ladder.len() < 2 || ladder.windows(2).any(|w| w[1] >= w[0]) || ladder[ladder.len() - 1] <= 0.0
    {
        return Err(Error::Config(
            "η-ladder must be strictly decreasing and positive".into(),
        ));
    }
    let mut ys = Vec::with_capacity(ladder.len());
    let mut guess = m_sc(Complex64::new(e, ladder[0]));
    for &eta in ladder {
        let sol = solve_upper(Complex64::new(e, eta), spectrum, guess)?;
        guess = sol.m;
        ys.push(sol.m.im / PI);
    }
    let (val, spread) = neville_at_zero(ladder, &ys);
    Ok(DensityValue {
        rho: val.max(0.0),
        spread,
        warning: spread > 1e-5,
    })
}

/// Density on a grid of energies, with the ladder echoed and the worst
/// extrapolation spread reported.
#[derive(Clone, Debug)]
pub struct DensityProfile {
    pub grid: Vec<f64>,
    pub rho: Vec<f64>,
    pub eta_ladder: Vec<f64>,
    pub max_spread: f64,
    /// Number of grid points whose extrapolation spread exceeded `1e−5`.
    pub warnings: usize,
}

pub fn density_profile(
    spectrum: &LambdaSpectrum,
    grid: &[f64],
    ladder: Option<&[f64]>,
) -> Result<DensityProfile> {
    let default = default_eta_ladder();
    let ladder = ladder.unwrap_or(&default).to_vec();
    let mut rho = Vec::with_capacity(grid.len());
    let mut max_spread = 0.0f64;
    let mut warnings = 0usize;
    for &e in grid {
        let v = density(e, spectrum, Some(&ladder))?;
        rho.push(v.rho);
        max_spread = max_spread.max(v.spread);
        warnings += v.warning as usize;
    }
    Ok(DensityProfile {
        grid: grid.to_vec(),
        rho,
        eta_ladder: ladder,
        max_spread,
        warnings,
    })
}

/// Neville evaluation at 0 of the polynomial through `(xs, ys)`; returns the
/// value and the magnitude of the final correction (an error estimate).
fn neville_at_zero(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len();
    let mut p = ys.to_vec();
    let mut last_correction = f64::INFINITY;
    for level in 1..n {
        let prev_best = p[0];
        for i in 0..n - level {
            p[i] = (xs[i + level] * p[i] - xs[i] * p[i + 1]) / (xs[i + level] - xs[i]);
        }
        last_correction = (p[0] - prev_best).abs();
    }
    (p[0], last_correction)
}

// ---------------------------------------------------------------------------
// Edges and curvatures
// ---------------------------------------------------------------------------

/// Support endpoints, subordination points, and edge curvatures.
#[derive(Clone, Copy, Debug)]
pub struct EdgeData {
    pub e_minus: f64,
    pub e_plus: f64,
    /// Subordination points: `w_± = E_± + m(E_±)` solve `⟨(Λ−w)^{-2}⟩ = 1`.
    pub w_minus: f64,
    pub w_plus: f64,
    /// Square-root prefactors: `πρ(E) ≈ γ_±^{3/2}·√(distance to edge)`.
    pub gamma_minus: f64,
    pub gamma_plus: f64,
}

/// Locate the support `[E^−, E^+]` of the density and its edge curvatures.
///
/// The subordination point `w_+` is the unique root of `⟨(Λ−w)^{-2}⟩ = 1` on
/// `(max μ, ∞)`: the trace decreases strictly from `+∞` to `0` there, and the
/// bracket `[max μ + 0.9/√(DN), max μ + 2]` always straddles the root because
/// the heaviest atom forces the trace above 1 at the left end while
/// `⟨(Λ−w)^{-2}⟩ ≤ 1/4` at the right end. Then `E^+ = w_+ − ⟨(Λ−w_+)^{-1}⟩`,
/// mirrored for the left edge.
pub fn edges(spectrum: &LambdaSpectrum) -> Result<EdgeData> {
    let dim = spectrum.dim() as f64;
    let delta = 0.9 / dim.sqrt();

    let w_plus = subordination_root(spectrum, spectrum.max() + delta, spectrum.max() + 2.0)?;
    let w_minus = subordination_root(spectrum, spectrum.min() - 2.0, spectrum.min() - delta)?;
    let e_plus = w_plus - lambda_resolvent_mean(spectrum, c_re(w_plus)).re;
    let e_minus = w_minus - lambda_resolvent_mean(spectrum, c_re(w_minus)).re;
    if e_minus >= e_plus {
        return Err(Error::Solver(format!(
            "edge solve produced an empty support [{e_minus}, {e_plus}]"
        )));
    }

    let gamma_plus = edge_curvature(spectrum, e_minus, e_plus, true)?;
    let gamma_minus = edge_curvature(spectrum, e_minus, e_plus, false)?;
    Ok(EdgeData {
        e_minus,
        e_plus,
        w_minus,
        w_plus,
        gamma_minus,
        gamma_plus,
    })
}

fn subordination_root(spectrum: &LambdaSpectrum, lo: f64, hi: f64) -> Result<f64> {
    let h = |w: f64| lambda_resolvent_mean_sq(spectrum, c_re(w)).re - 1.0;
    let mut w = brent(h, lo, hi, 1e-13)?;
    // Newton polish: the Brent tolerance is on the abscissa, the edge
    // invariant is on the residual.
    for _ in 0..6 {
        let f = lambda_resolvent_mean_sq(spectrum, c_re(w)).re - 1.0;
        let fp = 2.0 * lambda_resolvent_mean_cu(spectrum, c_re(w)).re;
        if fp == 0.0 {
            break;
        }
        let cand = w - f / fp;
        if cand > lo && cand < hi {
            w = cand;
        } else {
            break;
        }
    }
    let residual = (lambda_resolvent_mean_sq(spectrum, c_re(w)).re - 1.0).abs();
    if residual > 1e-10 {
        return Err(Error::Solver(format!(
            "subordination point residual {residual:e} at w = {w}"
        )));
    }
    Ok(w)
}

/// Edge curvature by extrapolating `(πρ(E)/√κ)^{2/3}` in the edge distance
/// `κ` at the three fractions `{1e−2, 1e−3, 1e−4}` of the support width.
/// The ratio is analytic in `κ` (the density's Puiseux series has only odd
/// half-powers), so quadratic extrapolation through the three points is
/// accurate to O(κ₁κ₂κ₃).
fn edge_curvature(
    spectrum: &LambdaSpectrum,
    e_minus: f64,
    e_plus: f64,
    right: bool,
) -> Result<f64> {
    let range = e_plus - e_minus;
    let fractions = [1e-2, 1e-3, 1e-4];
    let mut kappas = [0.0; 3];
    let mut ys = [0.0; 3];
    for (j, f) in fractions.iter().enumerate() {
        let kappa = f * range;
        let e = if right { e_plus - kappa } else { e_minus + kappa };
        let sol = stieltjes_real(e, spectrum)?;
        let ratio = sol.im_m / kappa.sqrt();
        if ratio <= 0.0 {
            return Err(Error::Solver(format!(
                "density vanished at distance {kappa:e} from the {} edge",
                if right { "right" } else { "left" }
            )));
        }
        kappas[j] = kappa;
        ys[j] = ratio.powf(2.0 / 3.0);
    }
    let (gamma, _) = neville_at_zero(&kappas, &ys);
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::Solver("edge curvature extrapolation failed".into()));
    }
    Ok(gamma)
}

// ---------------------------------------------------------------------------
// Cumulative distribution and quantiles
// ---------------------------------------------------------------------------

/// Adaptive cumulative distribution of the density, built once per spectrum
/// and then queried for tail masses and quantiles.
///
/// Both halves of the support are integrated in an edge-unfolding variable
/// (`x = E^+ − u²` on the right, `x = E^− + v²` on the left) so the
/// square-root edge behavior becomes a smooth integrand, then panels are
/// split until each passes a self-consistency check.
pub struct SpectralCdf {
    e_minus: f64,
    e_plus: f64,
    mid: f64,
    /// Right-half panels in `u`, ascending from the edge; masses and their
    /// prefix sums (mass between the edge and the panel's outer boundary).
    right: Vec<CdfPanel>,
    left: Vec<CdfPanel>,
    right_total: f64,
    total: f64,
}

#[derive(Clone, Copy, Debug)]
struct CdfPanel {
    lo: f64,
    hi: f64,
    /// Mass of this panel alone.
    mass: f64,
    /// Mass from the edge through this panel's `hi`.
    prefix: f64,
}

impl SpectralCdf {
    pub fn build(spectrum: &LambdaSpectrum, edge: &EdgeData) -> Result<SpectralCdf> {
        let mid = 0.5 * (edge.e_plus + edge.e_minus);
        let u_max = (edge.e_plus - mid).sqrt();
        let v_max = (mid - edge.e_minus).sqrt();
        let right = build_half(&mut |u| half_density(spectrum, edge.e_plus, -1.0, u), u_max)?;
        let left = build_half(&mut |v| half_density(spectrum, edge.e_minus, 1.0, v), v_max)?;
        let right_total = right.last().map_or(0.0, |p| p.prefix);
        let total = right_total + left.last().map_or(0.0, |p| p.prefix);
        Ok(SpectralCdf {
            e_minus: edge.e_minus,
            e_plus: edge.e_plus,
            mid,
            right,
            left,
            right_total,
            total,
        })
    }

    /// Total integrated mass; 1 up to quadrature and solver error.
    pub fn total(&self) -> f64 {
        self.total
    }

    /// `∫_x^{E^+} ρ`, the mass to the right of `x`.
    pub fn tail_mass(&self, x: f64, spectrum: &LambdaSpectrum) -> Result<f64> {
        if x >= self.e_plus {
            return Ok(0.0);
        }
        if x <= self.e_minus {
            return Ok(self.total);
        }
        if x >= self.mid {
            let u = (self.e_plus - x).sqrt();
            partial_mass(&self.right, u, &mut |u| {
                half_density(spectrum, self.e_plus, -1.0, u)
            })
        } else {
            let v = (x - self.e_minus).sqrt();
            let from_left = partial_mass(&self.left, v, &mut |v| {
                half_density(spectrum, self.e_minus, 1.0, v)
            })?;
            Ok(self.total - from_left)
        }
    }

    /// The energy with tail mass `tau`: solves `tail_mass(x) = tau`.
    pub fn quantile(&self, tau: f64, spectrum: &LambdaSpectrum) -> Result<f64> {
        if !(tau > 0.0 && tau < self.total) {
            return Err(Error::Config(format!(
                "tail mass {tau} outside (0, {})",
                self.total
            )));
        }
        if tau <= self.right_total {
            let u = half_quantile(&self.right, tau, &mut |u| {
                half_density(spectrum, self.e_plus, -1.0, u)
            })?;
            Ok(self.e_plus - u * u)
        } else {
            let v = half_quantile(&self.left, self.total - tau, &mut |v| {
                half_density(spectrum, self.e_minus, 1.0, v)
            })?;
            Ok(self.e_minus + v * v)
        }
    }
}

/// Unfolded integrand: `2u·ρ(edge + sign·u²)`, the density after the
/// substitution that straightens the square-root edge.
fn half_density(
    spectrum: &LambdaSpectrum,
    edge: f64,
    sign: f64,
    u: f64,
) -> Result<f64> {
    let x = edge + sign * u * u;
    let sol = stieltjes_real(x, spectrum)?;
    Ok(2.0 * u * sol.im_m.max(0.0) / PI)
}

fn gl_panel(
    f: &mut impl FnMut(f64) -> Result<f64>,
    lo: f64,
    hi: f64,
    n: usize,
) -> Result<f64> {
    let (nodes, weights) = gauss_legendre(n);
    let mid = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    let mut acc = 0.0;
    for (x, w) in nodes.iter().zip(weights.iter()) {
        acc += w * f(mid + half * x)?;
    }
    Ok(half * acc)
}

fn build_half(f: &mut impl FnMut(f64) -> Result<f64>, u_max: f64) -> Result<Vec<CdfPanel>> {
    let mut panels = Vec::new();
    subdivide(f, 0.0, u_max, 1e-12, 6, &mut panels)?;
    let mut prefix = 0.0;
    for p in &mut panels {
        prefix += p.mass;
        p.prefix = prefix;
    }
    Ok(panels)
}

fn subdivide(
    f: &mut impl FnMut(f64) -> Result<f64>,
    lo: f64,
    hi: f64,
    tol: f64,
    depth: usize,
    out: &mut Vec<CdfPanel>,
) -> Result<f64> {
    let whole = gl_panel(f, lo, hi, 16)?;
    let mid = 0.5 * (lo + hi);
    let l = gl_panel(f, lo, mid, 16)?;
    let r = gl_panel(f, mid, hi, 16)?;
    if (whole - (l + r)).abs() <= tol || depth == 0 {
        out.push(CdfPanel {
            lo,
            hi: mid,
            mass: l,
            prefix: 0.0,
        });
        out.push(CdfPanel {
            lo: mid,
            hi,
            mass: r,
            prefix: 0.0,
        });
        return Ok(l + r);
    }
    let a = subdivide(f, lo, mid, 0.5 * tol, depth - 1, out)?;
    let b = subdivide(f, mid, hi, 0.5 * tol, depth - 1, out)?;
    Ok(a + b)
}

/// Mass from the edge (u = 0) out to `u`, using panel prefixes plus a
/// partial quadrature inside the panel containing `u`.
fn partial_mass(
    panels: &[CdfPanel],
    u: f64,
    f: &mut impl FnMut(f64) -> Result<f64>,
) -> Result<f64> {
    let mut acc = 0.0;
    for p in panels {
        if u >= p.hi {
            acc = p.prefix;
        } else if u > p.lo {
            return Ok(acc + gl_panel(f, p.lo, u, 16)?);
        } else {
            break;
        }
    }
    Ok(acc)
}

/// Solve for the `u` with edge-side mass `target`, by safeguarded Newton in
/// the bracketing panel (the unfolded mass is strictly increasing in `u`).
fn half_quantile(
    panels: &[CdfPanel],
    target: f64,
    f: &mut impl FnMut(f64) -> Result<f64>,
) -> Result<f64> {
    let panel = panels
        .iter()
        .find(|p| target <= p.prefix)
        .or_else(|| panels.last())
        .ok_or_else(|| Error::Solver("empty cumulative table".into()))?;
    let base = panel.prefix - panel.mass;
    let (mut lo, mut hi) = (panel.lo, panel.hi);
    let mut u = 0.5 * (lo + hi);
    for _ in 0..80 {
        let mass = base + gl_panel(f, panel.lo, u, 16)?;
        let err = mass - target;
        if err.abs() <= 1e-12 {
            return Ok(u);
        }
        if err > 0.0 {
            hi = u;
        } else {
            lo = u;
        }
        let slope = f(u)?;
        let mut next = if slope > 0.0 { u - err / slope } else { f64::NAN };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - u).abs() < 1e-15 * (1.0 + u.abs()) {
            return Ok(next);
        }
        u = next;
    }
    Ok(u)
}

/// Quantiles of the density and of the semicircle, with the right-tail
/// convention: `γ_k` has mass `(k − 1/2)/(DN)` to its right, so the table is
/// decreasing in `k` and `γ_1` sits near `E^+`.
#[derive(Clone, Debug)]
pub struct QuantileTable {
    pub n: usize,
    pub d: usize,
    /// `γ_1 ≥ γ_2 ≥ … ≥ γ_{DN}`, index 0 holds `γ_1`.
    pub gamma: Vec<f64>,
    /// Semicircle counterparts `γ_k^sc` with the same convention.
    pub gamma_sc: Vec<f64>,
}

impl QuantileTable {
    /// `γ_k`, 1-based.
    pub fn gamma(&self, k: usize) -> f64 {
        self.gamma[k - 1]
    }

    /// `γ_k^sc`, 1-based.
    pub fn gamma_sc(&self, k: usize) -> f64 {
        self.gamma_sc[k - 1]
    }
}

pub fn quantiles(spectrum: &LambdaSpectrum, edge: &EdgeData) -> Result<QuantileTable> {
    let cdf = SpectralCdf::build(spectrum, edge)?;
    let dn = spectrum.dim();
    let mut gamma = Vec::with_capacity(dn);
    let mut gamma_sc = Vec::with_capacity(dn);
    for k in 1..=dn {
        let tau = (k as f64 - 0.5) / dn as f64;
        gamma.push(cdf.quantile(tau, spectrum)?);
        gamma_sc.push(semicircle_quantile(tau)?);
    }
    Ok(QuantileTable {
        n: spectrum.n(),
        d: spectrum.d(),
        gamma,
        gamma_sc,
    })
}

/// Single quantile without building the full table (used by the interpolated
/// shift, which needs one `γ_k` per quadrature node).
pub fn quantile_single(spectrum: &LambdaSpectrum, k: usize, edge: &EdgeData) -> Result<f64> {
    let cdf = SpectralCdf::build(spectrum, edge)?;
    let tau = (k as f64 - 0.5) / spectrum.dim() as f64;
    cdf.quantile(tau, spectrum)
}

// ---------------------------------------------------------------------------
// Shifts
// ---------------------------------------------------------------------------

/// Eigenvector-comparison shift `Re(z₁ + m(z₁) + 1/m(z₁))`. Vanishes
/// identically at `A = 0`, where `m_sc + 1/m_sc = −z`.
pub fn shift_ev(z1: Complex64, spectrum: &LambdaSpectrum) -> Result<f64> {
    shift_ev_from(&stieltjes(z1, spectrum)?)
}

/// Same shift from an existing solution.
pub fn shift_ev_from(sol: &MSolution) -> Result<f64> {
    if sol.m.norm() < 1e-8 {
        return Err(Error::Solver(format!(
            "shift undefined: |m| = {:e} at z = {}",
            sol.m.norm(),
            sol.z
        )));
    }
    Ok((sol.z + sol.m + sol.m.inv()).re)
}

/// Eigenvalue-comparison shift `Δ_e(k, η) = ∫₀¹ Δ(t) dt` along the coupling
/// interpolation `t·Λ`, where at each `t`
/// `Δ(t) = ⟨M_t Λ M_t*⟩ / ⟨M_t M_t*⟩` is evaluated at `z_t = γ_k(t) + iη`
/// with `γ_k(t)` the k-th quantile of the `t`-rescaled model. Gauss–Legendre
/// nodes are doubled from 16 until the value moves less than `1e−9`.
pub fn shift_e(k: usize, eta: f64, spectrum: &LambdaSpectrum) -> Result<f64> {
    if eta <= 0.0 {
        return Err(Error::Config("shift evaluation needs η > 0".into()));
    }
    let mut nodes = 16usize;
    let mut prev = shift_e_quadrature(k, eta, spectrum, nodes)?;
    while nodes < 256 {
        nodes *= 2;
        let next = shift_e_quadrature(k, eta, spectrum, nodes)?;
        let change = (next - prev).abs();
        prev = next;
        if change < 1e-9 {
            break;
        }
    }
    Ok(prev)
}

fn shift_e_quadrature(
    k: usize,
    eta: f64,
    spectrum: &LambdaSpectrum,
    n: usize,
) -> Result<f64> {
    let (xs, ws) = gauss_legendre(n);
    let mut acc = 0.0;
    for (x, w) in xs.iter().zip(ws.iter()) {
        let t = 0.5 * (x + 1.0);
        acc += 0.5 * w * shift_integrand(k, eta, spectrum, t)?;
    }
    Ok(acc)
}

fn shift_integrand(k: usize, eta: f64, spectrum: &LambdaSpectrum, t: f64) -> Result<f64> {
    let st = spectrum.scaled(t);
    let edge_t = edges(&st)?;
    let gk = quantile_single(&st, k, &edge_t)?;
    let z = Complex64::new(gk, eta);
    let sol = stieltjes(z, &st)?;
    // ⟨M_t Λ M_t*⟩/⟨M_t M_t*⟩ over the scaled atoms; the unscaled coupling
    // insertion contributes μ/t per scaled atom μ.
    let mut num = 0.0;
    let mut den = 0.0;
    for &(mu, wt) in st.atoms() {
        let r = wt / (c_re(mu) - z - sol.m).norm_sqr();
        num += (mu / t) * r;
        den += r;
    }
    Ok(num / den)
}

// ---------------------------------------------------------------------------
// Two- and three-point deterministic algebra
// ---------------------------------------------------------------------------

/// Dense rank-3 tensor over block indices, `D × D × D`.
#[derive(Clone, Debug)]
pub struct Tensor3 {
    d: usize,
    data: Vec<Complex64>,
}

impl Tensor3 {
    pub fn zeros(d: usize) -> Self {
        Tensor3 {
            d,
            data: vec![Complex64::new(0.0, 0.0); d * d * d],
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn get(&self, a1: usize, a2: usize, a3: usize) -> Complex64 {
        self.data[a1 + self.d * (a2 + self.d * a3)]
    }

    #[inline]
    pub fn set(&mut self, a1: usize, a2: usize, a3: usize, v: Complex64) {
        self.data[a1 + self.d * (a2 + self.d * a3)] = v;
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

/// The deterministic two-point data at `(z₁, z₂)`: the block matrix
/// `M̂_ab = D·⟨M(z₁) E_a M(z₂) E_b⟩`, its resolvent-of-unity transform
/// `K = (1 − M̂)^{-1} M̂`, and optionally the three-point tensor at
/// `(z₁, z₂, z₃)`.
pub struct DeterministicLoopAlgebra {
    pub m_hat: CMatrix,
    pub k: CMatrix,
    pub k3: Option<Tensor3>,
}

/// Assemble the two-point algebra (and the three-point tensor when `z3` is
/// given). Errors if `1 − M̂` is numerically singular, which genuinely
/// happens at `z₂ = z̄₁`, `η → 0`.
pub fn loop_algebra(
    z1: Complex64,
    z2: Complex64,
    spectrum: &LambdaSpectrum,
    z3: Option<Complex64>,
) -> Result<DeterministicLoopAlgebra> {
    let s1 = stieltjes(z1, spectrum)?;
    let s2 = stieltjes(z2, spectrum)?;
    let d1 = m_diagonal(&s1, spectrum);
    let d2 = m_diagonal(&s2, spectrum);
    let m_hat = pair_m_hat(&d1, &d2, spectrum);
    let inv = invert_one_minus(&m_hat)?;
    let k = inv.mul(&m_hat);

    let k3 = match z3 {
        None => None,
        Some(z3) => {
            let s3 = stieltjes(z3, spectrum)?;
            let d3 = m_diagonal(&s3, spectrum);
            let inv23 = invert_one_minus(&pair_m_hat(&d2, &d3, spectrum))?;
            let inv31 = invert_one_minus(&pair_m_hat(&d3, &d1, spectrum))?;
            Some(triple_tensor(&d1, &d2, &d3, &inv, &inv23, &inv31, spectrum))
        }
    };
    Ok(DeterministicLoopAlgebra { m_hat, k, k3 })
}

/// `M̂_ab = (D/DN)·Σ_{l,m} d1_l S_a[l,m] d2_m S_b[m,l]` from the overlap
/// matrices.
fn pair_m_hat(d1: &[Complex64], d2: &[Complex64], spectrum: &LambdaSpectrum) -> CMatrix {
    let d = spectrum.d();
    let dim = spectrum.dim();
    let norm = d as f64 / dim as f64;
    let mut m_hat = CMatrix::zeros(d, d);
    for a in 0..d {
        let sa = spectrum.overlap(a).clone();
        for b in 0..d {
            let sb = spectrum.overlap(b);
            let mut acc = Complex64::new(0.0, 0.0);
            for l in 0..dim {
                for mm in 0..dim {
                    acc += d1[l] * sa[(l, mm)] * d2[mm] * sb[(mm, l)];
                }
            }
            m_hat[(a, b)] = norm * acc;
        }
    }
    m_hat
}

/// `(1 − M̂)^{-1}` with a condition guard.
fn invert_one_minus(m_hat: &CMatrix) -> Result<CMatrix> {
    let d = m_hat.rows();
    let mut one_minus = CMatrix::identity(d);
    one_minus.axpy(Complex64::new(-1.0, 0.0), m_hat);
    let lu = one_minus.lu();
    let mut inv = CMatrix::identity(d);
    lu.solve_in_place(&mut inv);
    let cond = inv.frobenius_norm() * one_minus.frobenius_norm();
    if !cond.is_finite() || cond > 1e12 {
        return Err(Error::Solver(format!(
            "1 − M̂ is numerically singular (condition estimate {cond:e})"
        )));
    }
    Ok(inv)
}

/// Three-point tensor: raw traces `D⟨M₁E_{b₁}M₂E_{b₂}M₃E_{b₃}⟩` contracted
/// with the three pair inverses.
fn triple_tensor(
    d1: &[Complex64],
    d2: &[Complex64],
    d3: &[Complex64],
    inv12: &CMatrix,
    inv23: &CMatrix,
    inv31: &CMatrix,
    spectrum: &LambdaSpectrum,
) -> Tensor3 {
    let d = spectrum.d();
    let dim = spectrum.dim();
    let norm = d as f64 / dim as f64;

    // Raw traces T[b1, b2, b3] = (D/DN)·Σ d1_l S_{b1}[l,m] d2_m S_{b2}[m,p] d3_p S_{b3}[p,l].
    let mut raw = Tensor3::zeros(d);
    for b2 in 0..d {
        // X = diag(d2)·S_{b2}·diag(d3)·S_{b3} per b3, then contract with S_{b1}.
        let mut s2d = spectrum.overlap(b2).clone();
        for mm in 0..dim {
            for p in 0..dim {
                let v = s2d[(mm, p)] * d3[p];
                s2d[(mm, p)] = v;
            }
        }
        for b3 in 0..d {
            let x = s2d.mul(spectrum.overlap(b3));
            for b1 in 0..d {
                let s1 = spectrum.overlap(b1);
                let mut acc = Complex64::new(0.0, 0.0);
                for l in 0..dim {
                    for mm in 0..dim {
                        acc += d1[l] * s1[(l, mm)] * d2[mm] * x[(mm, l)];
                    }
                }
                raw.set(b1, b2, b3, norm * acc);
            }
        }
    }

    let mut out = Tensor3::zeros(d);
    for a1 in 0..d {
        for a2 in 0..d {
            for a3 in 0..d {
                let mut acc = Complex64::new(0.0, 0.0);
                for b1 in 0..d {
                    for b2 in 0..d {
                        for b3 in 0..d {
                            acc += inv12[(a1, b1)]
                                * inv23[(a2, b2)]
                                * inv31[(a3, b3)]
                                * raw.get(b1, b2, b3);
                        }
                    }
                }
                out.set(a1, a2, a3, acc);
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Regularity diagnostics
// ---------------------------------------------------------------------------

/// Ratios `|⟨M̃₀ (Λ − Δ_ev) M̃₁ E_a⟩| / (Im m(z₁)·⟨Λ²⟩)` over the four
/// deterministic-factor choices and all blocks.
#[derive(Clone, Debug)]
pub struct RegularityReport {
    /// `Δ_ev(z₁)` used for the recentering.
    pub shift: f64,
    /// `ratios[c][a]`: choice index `c` enumerates
    /// (m₀, M), (m₀, M*), (m̄₀, M), (m̄₀, M*); `a` is the block.
    pub ratios: Vec<Vec<f64>>,
    pub max_ratio: f64,
}

/// Evaluate the recentered coupling traces at `z₁`. All four sign choices of
/// the scalar factor `m_sc(z₀)` (with `z₀ = z₁ − Δ_ev`) and the resolvent
/// side are reported; the trace itself is the O(DN) diagonal sum
/// `Σ_l (μ_l − Δ_ev)·d_l·‖E_a q_l‖²`.
pub fn regularity_check(z1: Complex64, spectrum: &LambdaSpectrum) -> Result<RegularityReport> {
    let sol = stieltjes(z1, spectrum)?;
    let shift = shift_ev_from(&sol)?;
    let z0 = z1 - shift;
    let m0 = m_sc(z0);
    let diag = m_diagonal(&sol, spectrum);
    let d = spectrum.d();
    let dim = spectrum.dim();
    let eigs = spectrum.eigenvalues();

    // Per-block traces for M̃₁ = M(z₁) and its adjoint.
    let mut trace_m = vec![Complex64::new(0.0, 0.0); d];
    let mut trace_mstar = vec![Complex64::new(0.0, 0.0); d];
    for a in 0..d {
        let sa = spectrum.overlap(a);
        let mut acc = Complex64::new(0.0, 0.0);
        let mut acc_star = Complex64::new(0.0, 0.0);
        for l in 0..dim {
            let weight = (eigs[l] - shift) * sa[(l, l)].re;
            acc += weight * diag[l];
            acc_star += weight * diag[l].conj();
        }
        trace_m[a] = acc / dim as f64;
        trace_mstar[a] = acc_star / dim as f64;
    }

    let denom = sol.m.im * spectrum.second_moment();
    let scale = |v: Complex64, factor: Complex64| -> f64 {
        let num = (factor * v).norm();
        if denom == 0.0 {
            // Λ = 0 makes every numerator identically zero; report 0 rather
            // than 0/0.
            if num == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            num / denom
        }
    };

    let mut ratios = vec![vec![0.0; d]; 4];
    let mut max_ratio = 0.0f64;
    for a in 0..d {
        let combos = [
            (m0, trace_m[a]),
            (m0, trace_mstar[a]),
            (m0.conj(), trace_m[a]),
            (m0.conj(), trace_mstar[a]),
        ];
        for (ci, (factor, tr)) in combos.iter().enumerate() {
            let r = scale(*tr, *factor);
            ratios[ci][a] = r;
            max_ratio = max_ratio.max(r);
        }
    }
    Ok(RegularityReport {
        shift,
        ratios,
        max_ratio,
    })
}
