//! Numerical laboratory for random block matrices with weak inter-block
//! coupling.
//!
//! The object of study is `H + Λ`: `H` is block-diagonal with independent
//! Hermitian Wigner blocks, and `Λ` is a deterministic block-circulant
//! coupling built from a single `N × N` matrix `A` placed on the first
//! off-diagonal block band. Depending on the strength of `A`, eigenvectors
//! near the spectral edge either concentrate on single blocks or spread
//! across all of them, and the extreme eigenvalue statistics switch between
//! a max-of-independent-edges law and a single Tracy–Widom edge.
//!
//! The crate is organised around that experiment:
//!
//! * [`model`] — coupling construction, Wigner block sampling, assembly of
//!   the full matrix, and the exact spectrum of `Λ`;
//! * [`dyson`] — the deterministic side: self-consistent Stieltjes
//!   transforms, spectral density, edges and edge curvatures, quantiles,
//!   eigenvalue/eigenvector shift predictions, and the two-point stability
//!   operators that control resolvent products;
//! * [`flow`] — the characteristic flow transporting spectral parameters in
//!   an auxiliary time, with conservation-law and consistency checks;
//! * [`tw`] — the Tracy–Widom(2) distribution via Painlevé II, plus the
//!   rescaled max-of-independent-copies law;
//! * [`ensemble`] — Monte Carlo drivers that compare sampled spectra and
//!   eigenvectors against the deterministic predictions.

use std::path::PathBuf;

pub mod dyson;
pub mod ensemble;
pub mod flow;
pub mod linalg;
pub mod model;
pub mod tw;

/// Crate-wide error type.
///
/// `Config` covers invalid parameters and malformed input files, `Solver`
/// covers numerical failures (lost root brackets, iterations that refuse to
/// converge), `Flow` covers a characteristic that could not be continued and
/// retains the portion that was integrated, and `Io` wraps filesystem errors
/// with the offending path.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("flow stalled: {message} ({} nodes retained)", partial.len())]
    Flow {
        message: String,
        partial: Box<flow::FlowTrajectory>,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
