//! Dense complex linear algebra over the system LAPACK, plus the scalar
//! quadrature and root-finding helpers shared by the solvers.
//!
//! Everything downstream works with column-major `Vec<Complex64>` storage,
//! which is exactly what LAPACK expects, so matrices cross the FFI boundary
//! without copies. Rather than pull in a full linear-algebra framework we
//! bind the five routines actually used: `zheevd` (Hermitian spectra),
//! `zgesdd` (singular values and vectors), `zgetrf`/`zgetrs` (LU solves for
//! resolvent probes) and `zgemm` (overlap and transfer matrices).
//!
//! OpenBLAS is pinned to a single thread on first use: sample-level
//! parallelism happens above this layer, and serial kernels keep every
//! reduction bitwise reproducible regardless of worker count.

use num_complex::Complex64;
use std::fmt;
use std::ops::{Index, IndexMut};
use std::sync::Once;

use crate::{Error, Result};

extern "C" {
    fn zheevd_(
        jobz: *const i8,
        uplo: *const i8,
        n: *const i32,
        a: *mut Complex64,
        lda: *const i32,
        w: *mut f64,
        work: *mut Complex64,
        lwork: *const i32,
        rwork: *mut f64,
        lrwork: *const i32,
        iwork: *mut i32,
        liwork: *const i32,
        info: *mut i32,
    );
    fn zgesdd_(
        jobz: *const i8,
        m: *const i32,
        n: *const i32,
        a: *mut Complex64,
        lda: *const i32,
        s: *mut f64,
        u: *mut Complex64,
        ldu: *const i32,
        vt: *mut Complex64,
        ldvt: *const i32,
        work: *mut Complex64,
        lwork: *const i32,
        rwork: *mut f64,
        iwork: *mut i32,
        info: *mut i32,
    );
    fn zgetrf_(
        m: *const i32,
        n: *const i32,
        a: *mut Complex64,
        lda: *const i32,
        ipiv: *mut i32,
        info: *mut i32,
    );
    fn zgetrs_(
        trans: *const i8,
        n: *const i32,
        nrhs: *const i32,
        a: *const Complex64,
        lda: *const i32,
        ipiv: *const i32,
        b: *mut Complex64,
        ldb: *const i32,
        info: *mut i32,
    );
    #[allow(clippy::too_many_arguments)]
    fn zgemm_(
        transa: *const i8,
        transb: *const i8,
        m: *const i32,
        n: *const i32,
        k: *const i32,
        alpha: *const Complex64,
        a: *const Complex64,
        lda: *const i32,
        b: *const Complex64,
        ldb: *const i32,
        beta: *const Complex64,
        c: *mut Complex64,
        ldc: *const i32,
    );
    fn openblas_set_num_threads(num: i32);
}

static BLAS_SERIAL: Once = Once::new();

/// Pin OpenBLAS to one thread. Called automatically before every LAPACK/BLAS
/// entry point; parallelism lives at the Monte Carlo sample level instead,
/// where it cannot perturb floating-point reduction order.
pub fn ensure_serial_blas() {
    BLAS_SERIAL.call_once(|| unsafe { openblas_set_num_threads(1) });
}

const Z0: Complex64 = Complex64::new(0.0, 0.0);
const Z1: Complex64 = Complex64::new(1.0, 0.0);

/// Dense complex matrix in column-major (Fortran) layout. Entry `(i, j)`
/// lives at `data[i + j * rows]`.
#[derive(Clone, PartialEq)]
pub struct CMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl fmt::Debug for CMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CMatrix({}x{})", self.rows, self.cols)
    }
}

impl CMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        CMatrix {
            rows,
            cols,
            data: vec![Z0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = CMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = Z1;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut m = CMatrix::zeros(rows, cols);
        for j in 0..cols {
            for i in 0..rows {
                m.data[i + j * rows] = f(i, j);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn column(&self, j: usize) -> &[Complex64] {
        assert!(j < self.cols);
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> CMatrix {
        CMatrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)].conj())
    }

    /// Copy of `len` consecutive rows starting at `start` (all columns).
    pub fn row_block(&self, start: usize, len: usize) -> CMatrix {
        assert!(start + len <= self.rows);
        CMatrix::from_fn(len, self.cols, |i, j| self[(start + i, j)])
    }

    pub fn trace(&self) -> Complex64 {
        assert_eq!(self.rows, self.cols);
        (0..self.rows).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// `self += alpha * other`, entrywise.
    pub fn axpy(&mut self, alpha: Complex64, other: &CMatrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (x, y) in self.data.iter_mut().zip(other.data.iter()) {
            *x += alpha * y;
        }
    }

    pub fn scale(&mut self, s: Complex64) {
        for x in self.data.iter_mut() {
            *x *= s;
        }
    }

    /// `self * rhs` via `zgemm`.
    pub fn mul(&self, rhs: &CMatrix) -> CMatrix {
        gemm(b'N', b'N', self, rhs)
    }

    /// `self^H * rhs` via `zgemm`.
    pub fn adjoint_mul(&self, rhs: &CMatrix) -> CMatrix {
        gemm(b'C', b'N', self, rhs)
    }

    /// `self * rhs^H` via `zgemm`.
    pub fn mul_adjoint(&self, rhs: &CMatrix) -> CMatrix {
        gemm(b'N', b'C', self, rhs)
    }

    /// Matrix-vector product `self * x`.
    pub fn mul_vec(&self, x: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(self.cols, x.len());
        let mut y = vec![Z0; self.rows];
        for j in 0..self.cols {
            let xj = x[j];
            if xj == Z0 {
                continue;
            }
            let col = self.column(j);
            for (yi, aij) in y.iter_mut().zip(col.iter()) {
                *yi += aij * xj;
            }
        }
        y
    }

    /// Eigendecomposition of a Hermitian matrix: ascending eigenvalues and
    /// orthonormal eigenvector columns. Only the lower triangle is read.
    pub fn eigh(&self) -> Eigh {
        let mut a = self.clone();
        let values = zheevd_in_place(&mut a, b'V');
        Eigh { values, vectors: a }
    }

    /// Eigenvalues only (ascending) of a Hermitian matrix.
    pub fn eigvalsh(&self) -> Vec<f64> {
        let mut a = self.clone();
        zheevd_in_place(&mut a, b'N')
    }

    /// Full singular value decomposition `self = U diag(s) V^H`, with `s`
    /// descending.
    pub fn svd(&self) -> Svd {
        zgesdd(self, true)
    }

    /// Singular values only, descending.
    pub fn singular_values(&self) -> Vec<f64> {
        zgesdd(self, false).s
    }

    /// LU factorization with partial pivoting. Panics on an exactly singular
    /// input: call sites factor resolvents at spectral parameters with
    /// nonzero imaginary part, which are nonsingular by construction.
    pub fn lu(&self) -> LuFactors {
        ensure_serial_blas();
        assert_eq!(self.rows, self.cols, "LU solve needs a square matrix");
        let n = self.rows as i32;
        let mut lu = self.clone();
        let mut ipiv = vec![0i32; self.rows];
        let mut info = 0i32;
        unsafe {
            zgetrf_(&n, &n, lu.data.as_mut_ptr(), &n, ipiv.as_mut_ptr(), &mut info);
        }
        assert_eq!(info, 0, "zgetrf failed with info = {info}");
        LuFactors { lu, ipiv }
    }
}

impl Index<(usize, usize)> for CMatrix {
    type Output = Complex64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &Complex64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i + j * self.rows]
    }
}

impl IndexMut<(usize, usize)> for CMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i + j * self.rows]
    }
}

/// Result of [`CMatrix::eigh`].
pub struct Eigh {
    /// Eigenvalues in ascending order.
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors as columns, ordered like `values`.
    pub vectors: CMatrix,
}

/// Result of [`CMatrix::svd`].
pub struct Svd {
    pub u: CMatrix,
    /// Singular values in descending order.
    pub s: Vec<f64>,
    /// `V^H`, not `V`.
    pub vt: CMatrix,
}

/// LU factors from [`CMatrix::lu`]; solves reuse the factorization across
/// many right-hand sides.
pub struct LuFactors {
    lu: CMatrix,
    ipiv: Vec<i32>,
}

impl LuFactors {
    /// Solve `A x = b` for every column of `rhs`, in place.
    pub fn solve_in_place(&self, rhs: &mut CMatrix) {
        ensure_serial_blas();
        assert_eq!(self.lu.rows, rhs.rows);
        let n = self.lu.rows as i32;
        let nrhs = rhs.cols as i32;
        let trans = b'N' as i8;
        let mut info = 0i32;
        unsafe {
            zgetrs_(
                &trans,
                &n,
                &nrhs,
                self.lu.data.as_ptr(),
                &n,
                self.ipiv.as_ptr(),
                rhs.data.as_mut_ptr(),
                &n,
                &mut info,
            );
        }
        assert_eq!(info, 0, "zgetrs failed with info = {info}");
    }

    /// Solve `A x = b` for a single right-hand side.
    pub fn solve_vec(&self, b: &[Complex64]) -> Vec<Complex64> {
        let mut rhs = CMatrix {
            rows: b.len(),
            cols: 1,
            data: b.to_vec(),
        };
        self.solve_in_place(&mut rhs);
        rhs.data
    }
}

/// Plain conjugated dot product `sum_i conj(a_i) b_i`. Hand-rolled: the
/// complex-returning BLAS level-1 functions have fragile ABIs and this is
/// never a hot spot.
pub fn zdotc(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum()
}

fn gemm(transa: u8, transb: u8, a: &CMatrix, b: &CMatrix) -> CMatrix {
    ensure_serial_blas();
    let (m, k) = if transa == b'N' {
        (a.rows, a.cols)
    } else {
        (a.cols, a.rows)
    };
    let (kb, n) = if transb == b'N' {
        (b.rows, b.cols)
    } else {
        (b.cols, b.rows)
    };
    assert_eq!(k, kb, "matrix product dimension mismatch");
    let mut c = CMatrix::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    let (ta, tb) = (transa as i8, transb as i8);
    let (mi, ni, ki) = (m as i32, n as i32, k as i32);
    let (lda, ldb, ldc) = (a.rows as i32, b.rows as i32, m as i32);
    unsafe {
        zgemm_(
            &ta,
            &tb,
            &mi,
            &ni,
            &ki,
            &Z1,
            a.data.as_ptr(),
            &lda,
            b.data.as_ptr(),
            &ldb,
            &Z0,
            c.data.as_mut_ptr(),
            &ldc,
        );
    }
    c
}

fn zheevd_in_place(a: &mut CMatrix, jobz: u8) -> Vec<f64> {
    ensure_serial_blas();
    assert_eq!(a.rows, a.cols, "eigendecomposition needs a square matrix");
    let n = a.rows;
    let mut w = vec![0.0f64; n];
    if n == 0 {
        return w;
    }
    let ni = n as i32;
    let jobz_c = jobz as i8;
    let uplo_c = b'L' as i8;
    let mut info = 0i32;

    // Workspace query, then the real call.
    let mut work_q = [Z0];
    let mut rwork_q = [0.0f64];
    let mut iwork_q = [0i32];
    let query = -1i32;
    unsafe {
        zheevd_(
            &jobz_c,
            &uplo_c,
            &ni,
            a.data.as_mut_ptr(),
            &ni,
            w.as_mut_ptr(),
            work_q.as_mut_ptr(),
            &query,
            rwork_q.as_mut_ptr(),
            &query,
            iwork_q.as_mut_ptr(),
            &query,
            &mut info,
        );
    }
    assert_eq!(info, 0, "zheevd workspace query failed with info = {info}");

    let lwork = work_q[0].re as i32;
    let lrwork = rwork_q[0] as i32;
    let liwork = iwork_q[0];
    let mut work = vec![Z0; lwork as usize];
    let mut rwork = vec![0.0f64; lrwork as usize];
    let mut iwork = vec![0i32; liwork as usize];
    unsafe {
        zheevd_(
            &jobz_c,
            &uplo_c,
            &ni,
            a.data.as_mut_ptr(),
            &ni,
            w.as_mut_ptr(),
            work.as_mut_ptr(),
            &lwork,
            rwork.as_mut_ptr(),
            &lrwork,
            iwork.as_mut_ptr(),
            &liwork,
            &mut info,
        );
    }
    assert_eq!(info, 0, "zheevd failed with info = {info}");
    w
}

fn zgesdd(a: &CMatrix, want_vectors: bool) -> Svd {
    ensure_serial_blas();
    let (m, n) = (a.rows, a.cols);
    let mn = m.min(n);
    let mut s = vec![0.0f64; mn];
    if mn == 0 {
        return Svd {
            u: CMatrix::zeros(m, m),
            s,
            vt: CMatrix::zeros(n, n),
        };
    }
    let mut a_work = a.clone();
    let (mi, ni) = (m as i32, n as i32);
    let jobz_c = if want_vectors { b'A' } else { b'N' } as i8;
    let mut u = if want_vectors {
        CMatrix::zeros(m, m)
    } else {
        CMatrix::zeros(1, 1)
    };
    let mut vt = if want_vectors {
        CMatrix::zeros(n, n)
    } else {
        CMatrix::zeros(1, 1)
    };
    let ldu = u.rows as i32;
    let ldvt = vt.rows as i32;
    let lrwork = if want_vectors {
        mn * (5 * mn + 7).max(2 * m.max(n) + 2 * mn + 1)
    } else {
        7 * mn
    };
    let mut rwork = vec![0.0f64; lrwork];
    let mut iwork = vec![0i32; 8 * mn];
    let mut info = 0i32;

    let mut work_q = [Z0];
    let query = -1i32;
    unsafe {
        zgesdd_(
            &jobz_c,
            &mi,
            &ni,
            a_work.data.as_mut_ptr(),
            &mi,
            s.as_mut_ptr(),
            u.data.as_mut_ptr(),
            &ldu,
            vt.data.as_mut_ptr(),
            &ldvt,
            work_q.as_mut_ptr(),
            &query,
            rwork.as_mut_ptr(),
            iwork.as_mut_ptr(),
            &mut info,
        );
    }
    assert_eq!(info, 0, "zgesdd workspace query failed with info = {info}");

    let lwork = work_q[0].re as i32;
    let mut work = vec![Z0; lwork as usize];
    unsafe {
        zgesdd_(
            &jobz_c,
            &mi,
            &ni,
            a_work.data.as_mut_ptr(),
            &mi,
            s.as_mut_ptr(),
            u.data.as_mut_ptr(),
            &ldu,
            vt.data.as_mut_ptr(),
            &ldvt,
            work.as_mut_ptr(),
            &lwork,
            rwork.as_mut_ptr(),
            iwork.as_mut_ptr(),
            &mut info,
        );
    }
    assert_eq!(info, 0, "zgesdd failed with info = {info}");
    Svd { u, s, vt }
}

/// Nodes and weights of the `n`-point Gauss–Legendre rule on `[-1, 1]`,
/// by Newton iteration on the Legendre recurrence. Exact for polynomials of
/// degree `2n - 1`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0f64; n];
    let mut weights = vec![0.0f64; n];
    let nf = n as f64;
    for i in 0..(n + 1) / 2 {
        // Tricomi-style initial guess, then Newton on P_n.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = nf * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Integrate `f` over `[a, b]` with the `n`-point Gauss–Legendre rule.
pub fn gauss_legendre_integrate(mut f: impl FnMut(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let (nodes, weights) = gauss_legendre(n);
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut acc = 0.0;
    for (x, w) in nodes.iter().zip(weights.iter()) {
        acc += w * f(mid + half * x);
    }
    half * acc
}

/// Brent's method for a root of `f` in `[a, b]`. Requires a sign change on
/// the bracket; converges to roughly machine precision for smooth `f`.
pub fn brent(mut f: impl FnMut(f64) -> f64, a: f64, b: f64, tol: f64) -> Result<f64> {
    let (mut a, mut b) = (a, b);
    let mut fa = f(a);
    let mut fb = f(b);
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    if fa.signum() == fb.signum() {
        return Err(Error::Solver(format!(
            "root bracket lost: f({a:e}) = {fa:e} and f({b:e}) = {fb:e} have the same sign"
        )));
    }
    if fa.abs() < fb.abs() {
        std::mem::swap(&mut a, &mut b);
        std::mem::swap(&mut fa, &mut fb);
    }
    let mut c = a;
    let mut fc = fa;
    let mut d = b - a;
    let mut mflag = true;
    for _ in 0..200 {
        if fb == 0.0 || (b - a).abs() < tol {
            return Ok(b);
        }
        let mut s = if fa != fc && fb != fc {
            // Inverse quadratic interpolation.
            a * fb * fc / ((fa - fb) * (fa - fc))
                + b * fa * fc / ((fb - fa) * (fb - fc))
                + c * fa * fb / ((fc - fa) * (fc - fb))
        } else {
            // Secant.
            b - fb * (b - a) / (fb - fa)
        };
        let lo = (3.0 * a + b) / 4.0;
        let cond = if lo < b {
            s < lo || s > b
        } else {
            s < b || s > lo
        };
        if cond
            || (mflag && (s - b).abs() >= (b - c).abs() / 2.0)
            || (!mflag && (s - b).abs() >= (c - d).abs() / 2.0)
            || (mflag && (b - c).abs() < tol)
            || (!mflag && (c - d).abs() < tol)
        {
            s = 0.5 * (a + b);
            mflag = true;
        } else {
            mflag = false;
        }
        let fs = f(s);
        d = c;
        c = b;
        fc = fb;
        if fa.signum() != fs.signum() {
            b = s;
            fb = fs;
        } else {
            a = s;
            fa = fs;
        }
        if fa.abs() < fb.abs() {
            std::mem::swap(&mut a, &mut b);
            std::mem::swap(&mut fa, &mut fb);
        }
    }
    Err(Error::Solver(format!(
        "root iteration did not converge on [{a:e}, {b:e}]"
    )))
}
