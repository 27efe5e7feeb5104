//! Model construction: the deterministic coupling `A`, the block-circulant
//! interaction `Λ`, random Wigner blocks, and assembly of `H + tΛ`.
//!
//! Geometry: the full matrix is `D × D` blocks of size `N × N`. `H` carries an
//! independent Hermitian Wigner block on each diagonal slot. `Λ` carries `A`
//! on the superdiagonal block band (cyclically, so block `(D−1, 0)` is coupled
//! too) and `A*` on the mirrored band; diagonal blocks of `Λ` are zero, so the
//! normalized block traces `⟨Λ E_a⟩` vanish exactly. For `D = 2` the cyclic
//! band would wrap around both ways and double the coupling, so the convention
//! is a single bond: `Λ = [[0, A], [A*, 0]]`.
//!
//! The spectrum of `Λ` never requires the dense `DN × DN` eigenproblem. For
//! `D ≥ 3` the block-Fourier modes `C_k = ω^k A + ω̄^k A*` over the `D`-th
//! roots of unity `ω` decouple it into `D` Hermitian problems of size `N`;
//! for `D = 2` the eigenvalues are `±` the singular values of `A`. A plane
//! wave over the blocks times a mode eigenvector is an eigenvector of the
//! assembled matrix, and [`LambdaSpectrum`] reconstructs that dense eigenbasis
//! (and the per-block overlap matrices built from it) lazily, since only the
//! small deterministic-algebra computations ever need it.

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use crate::linalg::CMatrix;
use crate::{Error, Result};

/// How the coupling matrix `A` is produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CouplingKind {
    /// `A = λ·I`. The sign of `λ` is irrelevant to every spectral quantity.
    Scalar { lambda: f64 },
    /// `A = diag(values)`; `values` must have length `N`.
    Diagonal { values: Vec<f64> },
    /// Dense `A` read from a text file of `N` rows, each row `N`
    /// whitespace-separated `re im` pairs.
    Dense { path: PathBuf },
    /// A frozen random `A`: independent complex Gaussian entries with
    /// variance `scale²/N`, drawn once from the given seed, so the operator
    /// norm concentrates near `2·scale` and the Hilbert–Schmidt norm near
    /// `scale·√N`.
    RandomFixed { scale: f64, seed: u64 },
}

/// Coupling request: block dimension plus the recipe for `A`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CouplingSpec {
    pub n: usize,
    pub kind: CouplingKind,
}

impl CouplingSpec {
    pub fn scalar(n: usize, lambda: f64) -> Self {
        CouplingSpec {
            n,
            kind: CouplingKind::Scalar { lambda },
        }
    }
}

/// Resolved coupling: the matrix together with its two norms.
#[derive(Clone, Debug)]
pub struct Coupling {
    pub matrix: CMatrix,
    /// Operator norm `‖A‖` (largest singular value).
    pub op_norm: f64,
    /// Hilbert–Schmidt norm `‖A‖_HS` (Frobenius).
    pub hs_norm: f64,
}

/// Entry distribution for the Wigner blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryDist {
    /// GUE normalization: off-diagonal `(x + iy)/√(2N)` with standard normal
    /// `x, y`; diagonal real `x/√N`.
    ComplexGaussian,
    /// Off-diagonal `(±1 ± i)/√(2N)` with independent signs, diagonal
    /// `±1/√N`; same first and second moments as the Gaussian case.
    ComplexRademacher,
}

/// One draw of the `D` independent Hermitian blocks of `H`.
#[derive(Clone, Debug)]
pub struct WignerDraw {
    pub blocks: Vec<CMatrix>,
    pub seed: u64,
    pub dist: EntryDist,
}

impl WignerDraw {
    pub fn n(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.rows())
    }

    pub fn d(&self) -> usize {
        self.blocks.len()
    }
}

/// The assembled interaction `Λ` (kept dense) together with its layout data.
#[derive(Clone, Debug)]
pub struct InteractionMatrix {
    n: usize,
    d: usize,
    coupling: CMatrix,
    assembled: CMatrix,
}

impl InteractionMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn dim(&self) -> usize {
        self.n * self.d
    }

    /// The coupling block `A`.
    pub fn coupling(&self) -> &CMatrix {
        &self.coupling
    }

    /// The dense `DN × DN` Hermitian matrix.
    pub fn matrix(&self) -> &CMatrix {
        &self.assembled
    }
}

// ---------------------------------------------------------------------------
// Reproducible stream derivation
// ---------------------------------------------------------------------------

/// SplitMix64 finalizer: a bijective 64-bit mixer with full avalanche.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a root seed and an index (e.g. a sample number).
/// Distinct `(root, index)` pairs give statistically unrelated children.
pub fn derive_seed(root: u64, index: u64) -> u64 {
    mix64(root ^ mix64(index ^ 0xA24B_AED4_963E_E407))
}

/// Counter-based stream: a ChaCha8 generator keyed by `(seed, stream)`.
/// Every consumer owns its generator outright, so sampling is reproducible
/// bit-for-bit no matter how work is scheduled across threads.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut state = mix64(seed ^ mix64(stream));
    for chunk in key.chunks_exact_mut(8) {
        state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        chunk.copy_from_slice(&mix64(state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

// ---------------------------------------------------------------------------
// Coupling resolution
// ---------------------------------------------------------------------------

/// Resolve a [`CouplingSpec`] into the dense matrix `A` plus both norms.
pub fn make_coupling(spec: &CouplingSpec) -> Result<Coupling> {
    let n = spec.n;
    if n == 0 {
        return Err(Error::Config("block dimension N must be positive".into()));
    }
    let matrix = match &spec.kind {
        CouplingKind::Scalar { lambda } => {
            let mut a = CMatrix::identity(n);
            a.scale(Complex64::new(*lambda, 0.0));
            a
        }
        CouplingKind::Diagonal { values } => {
            if values.len() != n {
                return Err(Error::Config(format!(
                    "diagonal coupling has {} values but N = {n}",
                    values.len()
                )));
            }
            let mut a = CMatrix::zeros(n, n);
            for (i, v) in values.iter().enumerate() {
                a[(i, i)] = Complex64::new(*v, 0.0);
            }
            a
        }
        CouplingKind::Dense { path } => read_dense_coupling(path, n)?,
        CouplingKind::RandomFixed { scale, seed } => {
            // A dedicated stream tag keeps the coupling draw disjoint from
            // the Wigner block streams even if seeds coincide.
            let mut rng = stream_rng(*seed, 0x636F_7570);
            let sigma = scale / (2.0 * n as f64).sqrt();
            CMatrix::from_fn(n, n, |_, _| {
                let x: f64 = rng.sample(StandardNormal);
                let y: f64 = rng.sample(StandardNormal);
                Complex64::new(sigma * x, sigma * y)
            })
        }
    };
    if matrix.data().iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::Config(
            "coupling matrix contains non-finite entries".into(),
        ));
    }
    let op_norm = if matrix.frobenius_norm() == 0.0 {
        0.0
    } else {
        matrix.singular_values()[0]
    };
    Ok(Coupling {
        hs_norm: matrix.frobenius_norm(),
        op_norm,
        matrix,
    })
}

fn read_dense_coupling(path: &PathBuf, n: usize) -> Result<CMatrix> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.clone(),
        source,
    })?;
    let mut a = CMatrix::zeros(n, n);
    let mut row = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if row >= n {
            return Err(Error::Config(format!(
                "{}: more than {n} data rows",
                path.display()
            )));
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 2 * n {
            return Err(Error::Config(format!(
                "{}: line {} has {} numbers, expected {} (re im pairs for {n} columns)",
                path.display(),
                lineno + 1,
                tokens.len(),
                2 * n
            )));
        }
        for col in 0..n {
            let parse = |tok: &str, part: &str| -> Result<f64> {
                tok.parse::<f64>().map_err(|_| {
                    Error::Config(format!(
                        "{}: row {}, column {}: bad {part} part {tok:?}",
                        path.display(),
                        row + 1,
                        col + 1
                    ))
                })
            };
            let re = parse(tokens[2 * col], "real")?;
            let im = parse(tokens[2 * col + 1], "imaginary")?;
            a[(row, col)] = Complex64::new(re, im);
        }
        row += 1;
    }
    if row != n {
        return Err(Error::Config(format!(
            "{}: found {row} data rows, expected {n}",
            path.display()
        )));
    }
    Ok(a)
}

// ---------------------------------------------------------------------------
// Interaction assembly and spectrum
// ---------------------------------------------------------------------------

/// Assemble the block-circulant interaction from `A`. See the module docs for
/// the layout; Hermiticity is exact because the mirrored block entries are
/// written as conjugates of the same floating-point values.
pub fn build_lambda(a: &CMatrix, d: usize) -> Result<InteractionMatrix> {
    if d < 2 {
        return Err(Error::Config(format!("need at least 2 blocks, got {d}")));
    }
    assert_eq!(a.rows(), a.cols(), "coupling matrix must be square");
    let n = a.rows();
    let dim = n * d;
    let mut assembled = CMatrix::zeros(dim, dim);
    // One directed bond per block pair: (b, b+1 mod D) carries A, the mirror
    // carries A*. For D = 2 only the single bond (0, 1).
    let bonds = if d == 2 { 1 } else { d };
    for b in 0..bonds {
        let (br, bc) = (b, (b + 1) % d);
        for j in 0..n {
            for i in 0..n {
                let v = a[(i, j)];
                assembled[(br * n + i, bc * n + j)] = v;
                assembled[(bc * n + j, br * n + i)] = v.conj();
            }
        }
    }
    Ok(InteractionMatrix {
        n,
        d,
        coupling: a.clone(),
        assembled,
    })
}

/// Eigen-data of `Λ` assembled from the per-mode problems, never from the
/// dense `DN × DN` matrix.
enum ModeBasis {
    /// `D ≥ 3`: eigenvectors of each Fourier mode `C_k`, index k = 0..D.
    Fourier { mode_vectors: Vec<CMatrix> },
    /// `D = 2`: singular vectors of `A`; eigenvectors are `(u_j, ±v_j)/√2`.
    TwoBlock { u: CMatrix, v: CMatrix },
}

struct SpectrumCore {
    n: usize,
    d: usize,
    modes: ModeBasis,
    /// For each ascending-eigenvalue slot: (mode index, column within mode).
    /// For `D = 2` the mode index is 0 for `+σ`, 1 for `−σ`.
    order: Vec<(u32, u32)>,
    basis: OnceLock<CMatrix>,
    overlaps: OnceLock<Vec<CMatrix>>,
}

/// The spectrum of `s·Λ` (most callers use scale `s = 1`): all `DN`
/// eigenvalues, the collapsed atom list for fast trace evaluation, and lazy
/// access to the dense eigenbasis plus per-block overlap matrices.
///
/// Rescaling (for interpolations `t·Λ` and the flow's `e^{−t/2}·Λ`) shares
/// the eigenbasis: only the eigenvalues change.
#[derive(Clone)]
pub struct LambdaSpectrum {
    core: Arc<SpectrumCore>,
    eigs: Vec<f64>,
    atoms: Vec<(f64, f64)>,
    second_moment: f64,
    op_norm_a: f64,
    hs_norm_a: f64,
}

impl std::fmt::Debug for LambdaSpectrum {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "LambdaSpectrum(N={}, D={}, {} atoms in [{:.6}, {:.6}])",
            self.core.n,
            self.core.d,
            self.atoms.len(),
            self.min(),
            self.max()
        )
    }
}

/// Diagonalize `Λ` via its block-Fourier (or, for `D = 2`, singular-value)
/// decomposition.
pub fn lambda_spectrum(a: &CMatrix, d: usize) -> Result<LambdaSpectrum> {
    if d < 2 {
        return Err(Error::Config(format!("need at least 2 blocks, got {d}")));
    }
    assert_eq!(a.rows(), a.cols(), "coupling matrix must be square");
    let n = a.rows();
    let hs_norm_a = a.frobenius_norm();
    let op_norm_a = if hs_norm_a == 0.0 {
        0.0
    } else {
        a.singular_values()[0]
    };

    // (eigenvalue, mode, column) triples across all modes.
    let mut entries: Vec<(f64, u32, u32)> = Vec::with_capacity(n * d);
    let modes = if d == 2 {
        let svd = a.svd();
        for (j, sigma) in svd.s.iter().enumerate() {
            entries.push((*sigma, 0, j as u32));
            entries.push((-*sigma, 1, j as u32));
        }
        ModeBasis::TwoBlock {
            u: svd.u,
            v: svd.vt.adjoint(),
        }
    } else {
        let mut mode_vectors = Vec::with_capacity(d);
        for k in 0..d {
            let theta = 2.0 * std::f64::consts::PI * k as f64 / d as f64;
            let omega = Complex64::from_polar(1.0, theta);
            let mut ck = CMatrix::from_fn(n, n, |i, j| {
                omega * a[(i, j)] + omega.conj() * a[(j, i)].conj()
            });
            // Exact Hermitization against roundoff in the two phase products.
            for j in 0..n {
                for i in 0..j {
                    let avg = 0.5 * (ck[(i, j)] + ck[(j, i)].conj());
                    ck[(i, j)] = avg;
                    ck[(j, i)] = avg.conj();
                }
                let diag = ck[(j, j)].re;
                ck[(j, j)] = Complex64::new(diag, 0.0);
            }
            let eig = ck.eigh();
            for (j, val) in eig.values.iter().enumerate() {
                entries.push((*val, k as u32, j as u32));
            }
            mode_vectors.push(eig.vectors);
        }
        ModeBasis::Fourier { mode_vectors }
    };
    entries.sort_by(|x, y| x.0.total_cmp(&y.0));
    let eigs: Vec<f64> = entries.iter().map(|e| e.0).collect();
    let order: Vec<(u32, u32)> = entries.iter().map(|e| (e.1, e.2)).collect();
    let second_moment = eigs.iter().map(|m| m * m).sum::<f64>() / eigs.len() as f64;

    Ok(LambdaSpectrum {
        core: Arc::new(SpectrumCore {
            n,
            d,
            modes,
            order,
            basis: OnceLock::new(),
            overlaps: OnceLock::new(),
        }),
        atoms: collapse_atoms(&eigs),
        eigs,
        second_moment,
        op_norm_a,
        hs_norm_a,
    })
}

/// Merge exactly-repeated (up to roundoff) eigenvalues into weighted atoms,
/// so trace evaluations over highly degenerate spectra (scalar and diagonal
/// couplings) touch a handful of points instead of all `DN`.
fn collapse_atoms(sorted: &[f64]) -> Vec<(f64, f64)> {
    let total = sorted.len() as f64;
    let mut atoms: Vec<(f64, f64)> = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let anchor = sorted[i];
        let tol = 1e-12 * (1.0 + anchor.abs());
        let mut j = i;
        let mut sum = 0.0;
        while j < sorted.len() && (sorted[j] - anchor).abs() <= tol {
            sum += sorted[j];
            j += 1;
        }
        let count = (j - i) as f64;
        atoms.push((sum / count, count / total));
        i = j;
    }
    atoms
}

impl LambdaSpectrum {
    pub fn n(&self) -> usize {
        self.core.n
    }

    pub fn d(&self) -> usize {
        self.core.d
    }

    pub fn dim(&self) -> usize {
        self.core.n * self.core.d
    }

    /// All `DN` eigenvalues, ascending.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigs
    }

    /// Collapsed spectrum: `(value, weight)` with weights summing to 1.
    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    pub fn min(&self) -> f64 {
        self.eigs[0]
    }

    pub fn max(&self) -> f64 {
        *self.eigs.last().unwrap()
    }

    /// `⟨Λ²⟩`, the normalized trace of `Λ²`.
    pub fn second_moment(&self) -> f64 {
        self.second_moment
    }

    /// Operator norm of the underlying (scaled) coupling block.
    pub fn coupling_op_norm(&self) -> f64 {
        self.op_norm_a
    }

    /// Hilbert–Schmidt norm of the underlying (scaled) coupling block.
    pub fn coupling_hs_norm(&self) -> f64 {
        self.hs_norm_a
    }

    /// The spectrum of `s·Λ`, sharing the eigenbasis. Nonnegative scales
    /// only: a sign flip would reverse the eigenvalue order and desynchronize
    /// the shared basis columns (and no caller needs it — flip `A` instead).
    pub fn scaled(&self, s: f64) -> LambdaSpectrum {
        assert!(s >= 0.0, "negative coupling scale: rescale A instead");
        LambdaSpectrum {
            core: Arc::clone(&self.core),
            eigs: self.eigs.iter().map(|m| m * s).collect(),
            atoms: self.atoms.iter().map(|(m, w)| (m * s, *w)).collect(),
            second_moment: self.second_moment * s * s,
            op_norm_a: self.op_norm_a * s,
            hs_norm_a: self.hs_norm_a * s,
        }
    }

    /// Dense `DN × DN` eigenbasis of `Λ`; column `j` pairs with
    /// `eigenvalues()[j]`. Built on first use and shared across clones and
    /// rescalings.
    pub fn basis(&self) -> &CMatrix {
        self.core.basis.get_or_init(|| {
            let (n, d) = (self.core.n, self.core.d);
            let dim = n * d;
            let mut basis = CMatrix::zeros(dim, dim);
            let inv = 1.0 / (d as f64).sqrt();
            for (col, &(mode, j)) in self.core.order.iter().enumerate() {
                let j = j as usize;
                match &self.core.modes {
                    ModeBasis::Fourier { mode_vectors } => {
                        let vecs = &mode_vectors[mode as usize];
                        for b in 0..d {
                            let theta = 2.0 * std::f64::consts::PI * (mode as f64)
                                * (b as f64)
                                / (d as f64);
                            let phase = Complex64::from_polar(inv, theta);
                            for i in 0..n {
                                basis[(b * n + i, col)] = phase * vecs[(i, j)];
                            }
                        }
                    }
                    ModeBasis::TwoBlock { u, v } => {
                        let sign = if mode == 0 { 1.0 } else { -1.0 };
                        for i in 0..n {
                            basis[(i, col)] = inv * u[(i, j)];
                            basis[(n + i, col)] = sign * inv * v[(i, j)];
                        }
                    }
                }
            }
            basis
        })
    }

    /// Per-block overlap matrices `S_a = B* E_a B` in the eigenbasis `B`;
    /// `S_a[l, m]` is the block-`a` inner product of eigenvectors `l` and
    /// `m`. These carry all the block geometry needed by the deterministic
    /// two- and three-point algebra.
    pub fn overlap(&self, a: usize) -> &CMatrix {
        assert!(a < self.core.d, "block index out of range");
        &self.core.overlaps.get_or_init(|| {
            let basis = self.basis();
            let n = self.core.n;
            (0..self.core.d)
                .map(|b| {
                    let rows = basis.row_block(b * n, n);
                    rows.adjoint_mul(&rows)
                })
                .collect()
        })[a]
    }
}

// ---------------------------------------------------------------------------
// Wigner sampling and assembly
// ---------------------------------------------------------------------------

/// Draw the `D` independent Hermitian Wigner blocks. Each block gets its own
/// counter-based stream keyed by `(seed, block index)`, so draws are
/// identical no matter which thread produces them.
pub fn sample_wigner(n: usize, d: usize, dist: EntryDist, seed: u64) -> WignerDraw {
    let blocks = (0..d)
        .map(|block| {
            let mut rng = stream_rng(seed, block as u64);
            let mut h = CMatrix::zeros(n, n);
            let off_scale = 1.0 / (2.0 * n as f64).sqrt();
            let diag_scale = 1.0 / (n as f64).sqrt();
            // Fixed fill order (column-major upper triangle, then the
            // diagonal entry) makes the draw a pure function of the stream.
            for j in 0..n {
                for i in 0..j {
                    let v = match dist {
                        EntryDist::ComplexGaussian => {
                            let x: f64 = rng.sample(StandardNormal);
                            let y: f64 = rng.sample(StandardNormal);
                            Complex64::new(x * off_scale, y * off_scale)
                        }
                        EntryDist::ComplexRademacher => {
                            let x = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                            let y = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                            Complex64::new(x * off_scale, y * off_scale)
                        }
                    };
                    h[(i, j)] = v;
                    h[(j, i)] = v.conj();
                }
                let x: f64 = match dist {
                    EntryDist::ComplexGaussian => rng.sample(StandardNormal),
                    EntryDist::ComplexRademacher => {
                        if rng.gen::<bool>() {
                            1.0
                        } else {
                            -1.0
                        }
                    }
                };
                h[(j, j)] = Complex64::new(x * diag_scale, 0.0);
            }
            h
        })
        .collect();
    WignerDraw { blocks, seed, dist }
}

/// Assemble `H + tΛ`. `t = 0` gives the uncoupled block-diagonal matrix,
/// `t = 1` the full model; Hermiticity is exact because a real `t` times a
/// bitwise-Hermitian `Λ` stays bitwise Hermitian.
pub fn assemble(draw: &WignerDraw, lambda: &InteractionMatrix, t: f64) -> Result<CMatrix> {
    let (n, d) = (lambda.n(), lambda.d());
    if draw.d() != d || draw.n() != n {
        return Err(Error::Config(format!(
            "dimension mismatch: draw is {} blocks of size {}, interaction is {} of size {}",
            draw.d(),
            draw.n(),
            d,
            n
        )));
    }
    let mut full = lambda.assembled.clone();
    full.scale(Complex64::new(t, 0.0));
    for (b, block) in draw.blocks.iter().enumerate() {
        for j in 0..n {
            for i in 0..n {
                full[(b * n + i, b * n + j)] += block[(i, j)];
            }
        }
    }
    Ok(full)
}
