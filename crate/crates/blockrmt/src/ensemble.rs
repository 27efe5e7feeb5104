//! Monte Carlo over draws of `H + Λ`: spectra, eigenvector block masses, and
//! resolvent diagnostics, all compared against the deterministic predictions
//! from [`crate::dyson`] and the edge laws from [`crate::tw`].
//!
//! A run is described by an [`EnsembleConfig`]. The deterministic data every
//! sample shares — the resolved coupling, the assembled interaction, its
//! spectrum, the support edges, and the quantile table — is computed once in
//! an [`EnsembleContext`]; each sample then follows the pipeline
//!
//! ```text
//! derive seed → Wigner blocks → assemble → eigendecompose → diagnostics
//! ```
//!
//! and is folded into an [`EnsembleResult`] in sample order. `D = 1` is
//! accepted as the uncoupled single-block model (the coupling must be zero):
//! the reference data degenerates to the exact semicircle with edges `±2`
//! and unit edge curvatures, which is the natural calibration point for
//! every estimator here.
//!
//! # Determinism
//!
//! Sample `i` draws from counter-based streams keyed by `(seed, i)`, BLAS
//! runs single-threaded, and aggregation is an ordered fold, so a result is
//! a pure function of the config — bit for bit, regardless of how many
//! workers the pool schedules. Wall-clock timings are the one exception and
//! are excluded from serialization so that serialized results compare equal
//! across worker counts.
//!
//! # Failure policy
//!
//! A sample whose pipeline panics or returns an error is recorded as failed
//! rather than silently dropped, keeping the estimators auditable; more than
//! 1% failed samples abort the run, since at that point the survivors are no
//! longer a trustworthy ensemble.
//!
//! # Diagnostics
//!
//! * Edge statistics `γ_± (DN)^{2/3} (λ − E^±)` per sample, with
//!   Kolmogorov–Smirnov distances against both the single-edge law and the
//!   rescaled max-of-`D` law ([`crate::tw::max_of_d_cdf`]).
//! * [`rigidity_report`]: scaled quantile residuals
//!   `N^{2/3} r(k)^{1/3} |λ_k − γ_k|` with `r(k) = min(k, DN+1−k)`.
//! * [`mobility_curve`]: per-`k` summaries of the largest block mass
//!   `max_a ‖E_a v_k‖²`, the order parameter separating localized from
//!   delocalized edge eigenvectors.
//! * [`paired_shift_check`]: the coupled-minus-uncoupled comparison
//!   `(λ_k − γ_k) − (λ_k(H) − γ_k^sc)`, which is much smaller than either
//!   term alone when edge eigenvectors stay localized.
//! * [`local_law_probe`]: anisotropic and averaged resolvent-approximation
//!   ratios plus the Ward identity, from LU solves of `(H + Λ − z)`.
//! * [`two_resolvent_loop`]: the positive loop
//!   `⟨Im G_H(z₀) Λ̃ Im G(z₁) Λ̃⟩` with `Λ̃ = Λ − Δ_ev`, `z₁ = γ_k + iη`,
//!   `η = N^{−2/3+ε} k^{−1/3}`, `z₀ = z₁ − Δ_ev`, evaluated from spectral
//!   data; its ensemble mean is compared against the envelope
//!   `N^{−5/3} k^{2/3} ‖A‖_HS²` ([`loop_envelope`]).
//! * [`el_minus_k_check`]: the block-resolved two-point statistic
//!   `L_ab = D⟨G(z₁) E_a G(z₂) E_b⟩` averaged over samples against its
//!   deterministic limit `K` from [`crate::dyson::loop_algebra`], scaled by
//!   `N η²`.

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use crate::dyson::{
    edges, loop_algebra, m_matrix, m_sc, quantiles, semicircle_quantile, shift_ev, stieltjes,
    EdgeData, QuantileTable,
};
use crate::linalg::{zdotc, CMatrix, Eigh};
use crate::model::{
    assemble, build_lambda, derive_seed, lambda_spectrum, make_coupling, sample_wigner,
    stream_rng, Coupling, CouplingKind, CouplingSpec, EntryDist, InteractionMatrix,
    LambdaSpectrum,
};
use crate::tw::{build_tw2, ks_distance, max_of_d_cdf};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Configuration and per-sample records
// ---------------------------------------------------------------------------

/// Ensemble request: the model, the sample budget, and which per-sample
/// diagnostics to record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnsembleConfig {
    /// Block dimension `N`.
    pub n: usize,
    /// Number of blocks `D`. `D = 1` is the uncoupled single-block model
    /// and requires a zero coupling.
    pub d: usize,
    /// Recipe for the coupling block `A`.
    pub coupling: CouplingKind,
    /// Entry distribution of the Wigner blocks.
    pub dist: EntryDist,
    /// Root seed. Sample `i` draws from streams keyed by `(seed, i)`.
    pub seed: u64,
    /// Number of samples; must be positive.
    pub samples: usize,
    /// Eigenvalue indices (1-based from the top, so `k = 1` is the largest)
    /// whose eigenvectors are retained for block-mass diagnostics. Leaving
    /// this empty skips the eigenvector computation entirely, which roughly
    /// triples sampling throughput.
    #[serde(default)]
    pub track_k: Vec<usize>,
    /// Also diagonalize the uncoupled `H` of every draw, one block at a
    /// time; required by [`paired_shift_check`].
    #[serde(default)]
    pub with_h_eigs: bool,
}

/// Rescaled extreme-eigenvalue statistics of one sample. Both entries are
/// oriented so that they converge to the single-edge law when the edges
/// decouple: fluctuations below the upper edge and above the lower edge are
/// negative.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EdgeStats {
    /// `γ_+ (DN)^{2/3} (λ_1 − E^+)`.
    pub upper: f64,
    /// `γ_− (DN)^{2/3} (E^− − λ_{DN})`.
    pub lower: f64,
}

/// Everything recorded about one draw.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: u64,
    /// Child seed the draw used, `derive_seed(root, sample_id)`.
    pub seed: u64,
    /// Whether the pipeline failed; failed records carry no spectra.
    pub failed: bool,
    /// Eigenvalues of `H + Λ`, descending (`λ_1` first).
    pub eigs_hl: Vec<f64>,
    /// Eigenvalues of the uncoupled `H`, descending, when requested.
    pub eigs_h: Option<Vec<f64>>,
    /// `(k, per-block masses ‖E_a v_k‖²)` for each tracked `k`.
    pub block_masses: Vec<(usize, Vec<f64>)>,
    /// Rescaled extreme-eigenvalue statistics.
    pub edge_stats: Option<EdgeStats>,
    /// Largest relative eigenpair residual `‖(H+Λ)v − λv‖ / ‖H+Λ‖` over the
    /// tracked pairs; `None` when no eigenvectors were computed.
    pub eig_residual: Option<f64>,
}

impl SampleRecord {
    fn failure(sample_id: u64, seed: u64) -> Self {
        SampleRecord {
            sample_id,
            seed,
            failed: true,
            eigs_hl: Vec::new(),
            eigs_h: None,
            block_masses: Vec::new(),
            edge_stats: None,
            eig_residual: None,
        }
    }
}

/// Per-`k` summary of the largest block mass over the ensemble.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MobilitySummary {
    /// Eigenvalue index, 1-based from the top.
    pub k: usize,
    /// Number of samples that carried a mass vector for this `k`.
    pub count: usize,
    pub median: f64,
    /// Lower quartile.
    pub q1: f64,
    /// Upper quartile.
    pub q3: f64,
    /// Fraction of samples with `max_a ‖E_a v_k‖² > 0.5`.
    pub frac_above_half: f64,
    /// Fraction of samples with `max_a ‖E_a v_k‖² > 0.9`.
    pub frac_above_09: f64,
}

/// Wall-clock accounting. Excluded from serialization: serialized results
/// must be identical across worker counts, and timings are the one field
/// that cannot be.
#[derive(Clone, Copy, Debug, Default)]
pub struct Timings {
    pub setup_s: f64,
    pub sampling_s: f64,
    pub aggregation_s: f64,
    pub total_s: f64,
}

/// Aggregate outcome of a run.
#[derive(Clone, Debug, Serialize)]
pub struct EnsembleResult {
    /// Echo of the request.
    pub config: EnsembleConfig,
    /// Support edges and curvatures used for the edge statistics.
    pub e_minus: f64,
    pub e_plus: f64,
    pub gamma_minus: f64,
    pub gamma_plus: f64,
    /// Norms of the resolved coupling block.
    pub hs_norm_a: f64,
    pub op_norm_a: f64,
    /// Quantiles `γ_k` of the deterministic density, descending in `k`.
    pub gamma: Vec<f64>,
    /// Semicircle quantiles `γ_k^sc` with the same convention.
    pub gamma_sc: Vec<f64>,
    /// One record per sample, in sample order.
    pub records: Vec<SampleRecord>,
    /// Upper/lower edge statistics of the non-failed samples, sample order.
    pub edge_upper: Vec<f64>,
    pub edge_lower: Vec<f64>,
    /// Kolmogorov–Smirnov distances of the edge statistics against the
    /// single-edge law; `None` when fewer than two samples survived.
    pub ks_upper_tw: Option<f64>,
    pub ks_lower_tw: Option<f64>,
    /// Distances of the curvature-free statistics `(DN)^{2/3}(λ − E^±)`
    /// against the rescaled max-of-`D` law.
    pub ks_upper_max_of_d: Option<f64>,
    pub ks_lower_max_of_d: Option<f64>,
    /// Largest scaled rigidity residual per sample.
    pub rigidity_max: Vec<f64>,
    /// Median over samples of the scaled rigidity residual, per `k`.
    pub rigidity_median_per_k: Vec<f64>,
    /// Median over samples of the absolute scaled paired-shift residual,
    /// per `k`; present when the uncoupled spectra were recorded.
    pub paired_scaled_median_per_k: Option<Vec<f64>>,
    /// Block-mass summaries for the tracked `k`.
    pub mobility: Vec<MobilitySummary>,
    /// Sample ids that failed.
    pub failed_samples: Vec<u64>,
    #[serde(skip)]
    pub timings: Timings,
}

// ---------------------------------------------------------------------------
// Shared deterministic context
// ---------------------------------------------------------------------------

/// The deterministic data shared by every sample of a run.
///
/// For `D ≥ 2` this resolves the coupling, assembles the interaction,
/// diagonalizes it, and solves for the support edges and quantiles. For
/// `D = 1` there is no interaction (the coupling must resolve to zero) and
/// the reference data is the exact semicircle: edges `±2`, unit curvatures,
/// and `γ_k = γ_k^sc`.
pub struct EnsembleContext {
    pub config: EnsembleConfig,
    pub coupling: Coupling,
    pub interaction: Option<InteractionMatrix>,
    pub spectrum: Option<LambdaSpectrum>,
    pub edge: EdgeData,
    pub quantiles: QuantileTable,
}

impl EnsembleContext {
    pub fn new(config: &EnsembleConfig) -> Result<Self> {
        if config.d == 0 {
            return Err(Error::Config("need at least one block".into()));
        }
        let dim = config.n * config.d;
        if let Some(&k) = config
            .track_k
            .iter()
            .find(|&&k| k == 0 || k > dim)
        {
            return Err(Error::Config(format!(
                "tracked index k = {k} outside 1..={dim}"
            )));
        }
        let coupling = make_coupling(&CouplingSpec {
            n: config.n,
            kind: config.coupling.clone(),
        })?;

        if config.d == 1 {
            if coupling.hs_norm > 0.0 {
                return Err(Error::Config(
                    "D = 1 has no coupling band; the coupling must be zero".into(),
                ));
            }
            // Exact semicircle references. The subordination points are
            // `w_± = E_± + m(E_±) = ±1` since `m(±2) = ∓1`.
            let edge = EdgeData {
                e_minus: -2.0,
                e_plus: 2.0,
                w_minus: -1.0,
                w_plus: 1.0,
                gamma_minus: 1.0,
                gamma_plus: 1.0,
            };
            let mut gamma = Vec::with_capacity(config.n);
            for k in 1..=config.n {
                gamma.push(semicircle_quantile((k as f64 - 0.5) / config.n as f64)?);
            }
            return Ok(EnsembleContext {
                config: config.clone(),
                coupling,
                interaction: None,
                spectrum: None,
                edge,
                quantiles: QuantileTable {
                    n: config.n,
                    d: 1,
                    gamma: gamma.clone(),
                    gamma_sc: gamma,
                },
            });
        }

        let interaction = build_lambda(&coupling.matrix, config.d)?;
        let spectrum = lambda_spectrum(&coupling.matrix, config.d)?;
        let edge = edges(&spectrum)?;
        let quantiles = quantiles(&spectrum, &edge)?;
        Ok(EnsembleContext {
            config: config.clone(),
            coupling,
            interaction: Some(interaction),
            spectrum: Some(spectrum),
            edge,
            quantiles,
        })
    }

    /// Full matrix dimension `DN`.
    pub fn dim(&self) -> usize {
        self.config.n * self.config.d
    }

    /// Assemble and fully diagonalize one draw for the resolvent
    /// diagnostics, which need eigenvectors of `H + Λ` and of every block
    /// of `H`.
    pub fn probe_sample(&self, sample_id: u64) -> Result<ProbeSample> {
        let cfg = &self.config;
        let seed = derive_seed(cfg.seed, sample_id);
        let draw = sample_wigner(cfg.n, cfg.d, cfg.dist, seed);
        let matrix = match &self.interaction {
            Some(li) => assemble(&draw, li, 1.0)?,
            None => draw.blocks[0].clone(),
        };
        let eigen = matrix.eigh();
        let h_blocks = draw.blocks.iter().map(|b| b.eigh()).collect();
        Ok(ProbeSample {
            sample_id,
            seed,
            matrix,
            eigen,
            h_blocks,
        })
    }
}

/// One fully diagonalized draw, as consumed by the resolvent diagnostics.
pub struct ProbeSample {
    pub sample_id: u64,
    pub seed: u64,
    /// Assembled `H + Λ`.
    pub matrix: CMatrix,
    /// Eigendecomposition of `H + Λ`, ascending.
    pub eigen: Eigh,
    /// Per-block eigendecompositions of the uncoupled `H`, ascending within
    /// each block; block `a`'s eigenvectors live on rows `aN..(a+1)N` of the
    /// full matrix.
    pub h_blocks: Vec<Eigh>,
}

// ---------------------------------------------------------------------------
// The Monte Carlo driver
// ---------------------------------------------------------------------------

/// Run the ensemble on a pool of `workers` threads (`0` = one thread per
/// core). The result is a pure function of the config: worker count affects
/// wall-clock time only.
pub fn run_ensemble(config: &EnsembleConfig, workers: usize) -> Result<EnsembleResult> {
    let t_start = Instant::now();
    if config.samples == 0 {
        return Err(Error::Config("need at least one sample".into()));
    }
    let ctx = EnsembleContext::new(config)?;
    let tw = build_tw2(1e-10)?;
    let setup_s = t_start.elapsed().as_secs_f64();

    let t_sampling = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let records: Vec<SampleRecord> = pool.install(|| {
        (0..config.samples as u64)
            .into_par_iter()
            .map(|sample_id| {
                let seed = derive_seed(config.seed, sample_id);
                match catch_unwind(AssertUnwindSafe(|| sample_record(&ctx, sample_id, seed))) {
                    Ok(Ok(record)) => record,
                    Ok(Err(_)) | Err(_) => SampleRecord::failure(sample_id, seed),
                }
            })
            .collect()
    });
    let sampling_s = t_sampling.elapsed().as_secs_f64();

    let t_aggregate = Instant::now();
    let failed_samples: Vec<u64> = records
        .iter()
        .filter(|r| r.failed)
        .map(|r| r.sample_id)
        .collect();
    if failed_samples.len() * 100 > config.samples {
        return Err(Error::Solver(format!(
            "{} of {} samples failed the eigensolver; the survivors are not a \
             trustworthy ensemble",
            failed_samples.len(),
            config.samples
        )));
    }
    let ok: Vec<&SampleRecord> = records.iter().filter(|r| !r.failed).collect();

    let edge_upper: Vec<f64> = ok
        .iter()
        .filter_map(|r| r.edge_stats.map(|e| e.upper))
        .collect();
    let edge_lower: Vec<f64> = ok
        .iter()
        .filter_map(|r| r.edge_stats.map(|e| e.lower))
        .collect();
    let ks_against = |stats: &[f64], cdf: &dyn Fn(f64) -> f64| -> Result<Option<f64>> {
        if stats.len() < 2 {
            Ok(None)
        } else {
            ks_distance(stats, cdf).map(Some)
        }
    };
    let ks_upper_tw = ks_against(&edge_upper, &|s| tw.cdf_at(s))?;
    let ks_lower_tw = ks_against(&edge_lower, &|s| tw.cdf_at(s))?;
    // The max-of-D comparison uses the curvature-free statistic, since the
    // decoupled edges fluctuate on the per-block scale.
    let d = config.d;
    let max_of_d = |s: f64| {
        max_of_d_cdf(s, d, &tw).expect("d >= 1 was validated") // d ≥ 1 here
    };
    let raw_upper: Vec<f64> = edge_upper
        .iter()
        .map(|&s| s / ctx.edge.gamma_plus)
        .collect();
    let raw_lower: Vec<f64> = edge_lower
        .iter()
        .map(|&s| s / ctx.edge.gamma_minus)
        .collect();
    let ks_upper_max_of_d = ks_against(&raw_upper, &max_of_d)?;
    let ks_lower_max_of_d = ks_against(&raw_lower, &max_of_d)?;

    let dim = ctx.dim();
    let mut rigidity_max = Vec::with_capacity(ok.len());
    let mut rigidity_cols: Vec<Vec<f64>> = vec![Vec::with_capacity(ok.len()); dim];
    let mut paired_cols: Vec<Vec<f64>> = vec![Vec::with_capacity(ok.len()); dim];
    for r in &ok {
        let rig = rigidity_report(&r.eigs_hl, &ctx.quantiles)?;
        rigidity_max.push(rig.max);
        for (col, &v) in rigidity_cols.iter_mut().zip(rig.scaled.iter()) {
            col.push(v);
        }
        if let Some(eigs_h) = &r.eigs_h {
            let paired = paired_shift_check(eigs_h, &r.eigs_hl, &ctx.quantiles)?;
            for (col, &v) in paired_cols.iter_mut().zip(paired.scaled.iter()) {
                col.push(v.abs());
            }
        }
    }
    let rigidity_median_per_k: Vec<f64> = rigidity_cols
        .into_iter()
        .map(|col| percentile(col, 0.5))
        .collect();
    let paired_scaled_median_per_k = if config.with_h_eigs && !ok.is_empty() {
        Some(
            paired_cols
                .into_iter()
                .map(|col| percentile(col, 0.5))
                .collect(),
        )
    } else {
        None
    };
    let mobility = mobility_curve(&records, &config.track_k);
    let aggregation_s = t_aggregate.elapsed().as_secs_f64();

    Ok(EnsembleResult {
        config: config.clone(),
        e_minus: ctx.edge.e_minus,
        e_plus: ctx.edge.e_plus,
        gamma_minus: ctx.edge.gamma_minus,
        gamma_plus: ctx.edge.gamma_plus,
        hs_norm_a: ctx.coupling.hs_norm,
        op_norm_a: ctx.coupling.op_norm,
        gamma: ctx.quantiles.gamma.clone(),
        gamma_sc: ctx.quantiles.gamma_sc.clone(),
        records,
        edge_upper,
        edge_lower,
        ks_upper_tw,
        ks_lower_tw,
        ks_upper_max_of_d,
        ks_lower_max_of_d,
        rigidity_max,
        rigidity_median_per_k,
        paired_scaled_median_per_k,
        mobility,
        failed_samples,
        timings: Timings {
            setup_s,
            sampling_s,
            aggregation_s,
            total_s: t_start.elapsed().as_secs_f64(),
        },
    })
}

/// The per-sample pipeline.
fn sample_record(ctx: &EnsembleContext, sample_id: u64, seed: u64) -> Result<SampleRecord> {
    let cfg = &ctx.config;
    let dim = ctx.dim();
    let draw = sample_wigner(cfg.n, cfg.d, cfg.dist, seed);
    let hl = match &ctx.interaction {
        Some(li) => assemble(&draw, li, 1.0)?,
        None => draw.blocks[0].clone(),
    };

    let mut block_masses = Vec::with_capacity(cfg.track_k.len());
    let mut eig_residual = None;
    let eigs_ascending = if cfg.track_k.is_empty() {
        hl.eigvalsh()
    } else {
        let eigen = hl.eigh();
        let op_norm = eigen
            .values
            .iter()
            .fold(0.0f64, |acc, &v| acc.max(v.abs()))
            .max(f64::MIN_POSITIVE);
        let mut worst: f64 = 0.0;
        for &k in &cfg.track_k {
            let col = eigen.vectors.column(dim - k);
            let lambda = eigen.values[dim - k];
            let image = hl.mul_vec(col);
            let mut res_sq = 0.0;
            for (hv, v) in image.iter().zip(col.iter()) {
                res_sq += (hv - lambda * v).norm_sqr();
            }
            worst = worst.max(res_sq.sqrt() / op_norm);

            let mut masses = vec![0.0f64; cfg.d];
            for (i, v) in col.iter().enumerate() {
                masses[i / cfg.n] += v.norm_sqr();
            }
            block_masses.push((k, masses));
        }
        eig_residual = Some(worst);
        eigen.values
    };
    let mut eigs_hl = eigs_ascending;
    eigs_hl.reverse();

    let eigs_h = if cfg.with_h_eigs {
        let mut all: Vec<f64> = draw.blocks.iter().flat_map(|b| b.eigvalsh()).collect();
        all.sort_by(|a, b| b.partial_cmp(a).expect("eigenvalues are finite"));
        Some(all)
    } else {
        None
    };

    let scale = (dim as f64).powf(2.0 / 3.0);
    let edge_stats = Some(EdgeStats {
        upper: ctx.edge.gamma_plus * scale * (eigs_hl[0] - ctx.edge.e_plus),
        lower: ctx.edge.gamma_minus * scale * (ctx.edge.e_minus - eigs_hl[dim - 1]),
    });

    Ok(SampleRecord {
        sample_id,
        seed,
        failed: false,
        eigs_hl,
        eigs_h,
        block_masses,
        edge_stats,
        eig_residual,
    })
}

// ---------------------------------------------------------------------------
// Spectral diagnostics
// ---------------------------------------------------------------------------

/// Scaled quantile residuals of one spectrum.
#[derive(Clone, Debug, Serialize)]
pub struct RigidityReport {
    /// `N^{2/3} r(k)^{1/3} |λ_k − γ_k|`, index 0 holding `k = 1`.
    pub scaled: Vec<f64>,
    pub max: f64,
    /// 1-based `k` attaining the max.
    pub argmax: usize,
}

/// Compare a descending spectrum against the quantile table: the residual
/// `|λ_k − γ_k|` is scaled by `N^{2/3} r(k)^{1/3}` with
/// `r(k) = min(k, DN+1−k)`, so a spectrum obeying rigidity keeps every
/// entry of the profile of order one, uniformly from edge to bulk.
pub fn rigidity_report(eigs_desc: &[f64], table: &QuantileTable) -> Result<RigidityReport> {
    let dim = table.gamma.len();
    if eigs_desc.len() != dim {
        return Err(Error::Config(format!(
            "spectrum has {} eigenvalues but the quantile table has {dim}",
            eigs_desc.len()
        )));
    }
    let n23 = (table.n as f64).powf(2.0 / 3.0);
    let mut scaled = Vec::with_capacity(dim);
    let mut max = 0.0f64;
    let mut argmax = 1usize;
    for k in 1..=dim {
        let r = k.min(dim + 1 - k) as f64;
        let value = n23 * r.cbrt() * (eigs_desc[k - 1] - table.gamma(k)).abs();
        if value > max {
            max = value;
            argmax = k;
        }
        scaled.push(value);
    }
    Ok(RigidityReport {
        scaled,
        max,
        argmax,
    })
}

/// Per-`k` residuals of the coupled-minus-uncoupled eigenvalue comparison.
#[derive(Clone, Debug, Serialize)]
pub struct PairedShiftReport {
    /// `(λ_k − γ_k) − (λ_k(H) − γ_k^sc)`, index 0 holding `k = 1`.
    pub raw: Vec<f64>,
    /// Raw residuals scaled by `N^{2/3} r(k)^{1/3}` (signed).
    pub scaled: Vec<f64>,
    /// Whether `|scaled| < 1` per `k`.
    pub small: Vec<bool>,
}

/// Pair the coupled and uncoupled spectra of the *same* draw: each is
/// centered on its own quantile and the difference is scaled like a rigidity
/// residual. When edge eigenvectors are localized, the coupled eigenvalue
/// tracks its uncoupled partner far more tightly than rigidity alone allows,
/// so the scaled residual sits well below one.
pub fn paired_shift_check(
    eigs_h_desc: &[f64],
    eigs_hl_desc: &[f64],
    table: &QuantileTable,
) -> Result<PairedShiftReport> {
    let dim = table.gamma.len();
    if eigs_h_desc.len() != dim || eigs_hl_desc.len() != dim {
        return Err(Error::Config(format!(
            "paired comparison needs two spectra of length {dim}, got {} and {}",
            eigs_h_desc.len(),
            eigs_hl_desc.len()
        )));
    }
    let n23 = (table.n as f64).powf(2.0 / 3.0);
    let mut raw = Vec::with_capacity(dim);
    let mut scaled = Vec::with_capacity(dim);
    let mut small = Vec::with_capacity(dim);
    for k in 1..=dim {
        let r = k.min(dim + 1 - k) as f64;
        let value =
            (eigs_hl_desc[k - 1] - table.gamma(k)) - (eigs_h_desc[k - 1] - table.gamma_sc(k));
        let s = n23 * r.cbrt() * value;
        raw.push(value);
        scaled.push(s);
        small.push(s.abs() < 1.0);
    }
    Ok(PairedShiftReport { raw, scaled, small })
}

/// Summarize the largest block mass `max_a ‖E_a v_k‖²` over the ensemble for
/// each requested `k`. Failed records and records that did not track a given
/// `k` contribute nothing; a `k` with no data at all is omitted from the
/// output rather than reported as an error.
pub fn mobility_curve(records: &[SampleRecord], k_range: &[usize]) -> Vec<MobilitySummary> {
    k_range
        .iter()
        .filter_map(|&k| {
            let masses: Vec<f64> = records
                .iter()
                .filter(|r| !r.failed)
                .filter_map(|r| {
                    r.block_masses
                        .iter()
                        .find(|(kk, _)| *kk == k)
                        .map(|(_, m)| m.iter().cloned().fold(0.0, f64::max))
                })
                .collect();
            if masses.is_empty() {
                return None;
            }
            let count = masses.len();
            let above = |t: f64| masses.iter().filter(|&&m| m > t).count() as f64 / count as f64;
            let frac_above_half = above(0.5);
            let frac_above_09 = above(0.9);
            Some(MobilitySummary {
                k,
                count,
                median: percentile(masses.clone(), 0.5),
                q1: percentile(masses.clone(), 0.25),
                q3: percentile(masses, 0.75),
                frac_above_half,
                frac_above_09,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Resolvent diagnostics
// ---------------------------------------------------------------------------

/// Local-law diagnostics of one sample at one spectral parameter.
#[derive(Clone, Debug, Serialize)]
pub struct ResolventProbe {
    pub z_re: f64,
    pub z_im: f64,
    /// Max over 20 random unit pairs of
    /// `|(G − M)_uv| / (√(Im m/(DNη)) + 1/(DNη))`.
    pub aniso_ratio_max: f64,
    /// `|⟨(G − M) B⟩| · DNη` for each of 5 random diagonal contrasts
    /// `B = diag(±uniform)`, `‖B‖ ≤ 1`.
    pub averaged_scaled: Vec<f64>,
    pub averaged_scaled_max: f64,
    /// Max over 10 random columns of the relative Ward-identity error
    /// `|Σ_x |G_xy|² − Im G_yy/η| / (Im G_yy/η)`.
    pub ward_rel_max: f64,
}

/// Probe how well the deterministic approximation `M(z)` describes the
/// sampled resolvent `G(z) = (H + Λ − z)^{-1}`, using LU solves of the
/// shifted matrix on probe columns (never a dense inverse).
///
/// Requires `η = Im z ≥ N^{−0.9}`: below that scale the approximation is not
/// expected to hold sample by sample and the probe would only report noise.
pub fn local_law_probe(
    ctx: &EnsembleContext,
    sample: &ProbeSample,
    z: Complex64,
    probe_seed: u64,
) -> Result<ResolventProbe> {
    let dim = ctx.dim();
    let eta = z.im;
    if eta <= 0.0 {
        return Err(Error::Config(format!(
            "probe needs Im z > 0, got z = {z}"
        )));
    }
    let eta_floor = (ctx.config.n as f64).powf(-0.9);
    if eta < eta_floor {
        return Err(Error::Config(format!(
            "probe scale η = {eta:e} below the local-law floor N^(-0.9) = {eta_floor:e}"
        )));
    }

    // Deterministic approximation: dense M for a true interaction, m·I for
    // the uncoupled single-block model.
    let (m, m_dense): (Complex64, Option<CMatrix>) = match &ctx.spectrum {
        Some(spectrum) => {
            let sol = stieltjes(z, spectrum)?;
            (sol.m, Some(m_matrix(&sol, spectrum)))
        }
        None => (m_sc(z), None),
    };

    // All probe columns of G at once: LU once, then triangular solves on the
    // identity columns.
    let mut shifted = sample.matrix.clone();
    for i in 0..dim {
        shifted[(i, i)] -= z;
    }
    let lu = shifted.lu();
    let mut g = CMatrix::identity(dim);
    lu.solve_in_place(&mut g);

    // Ward identity, 10 random columns.
    let mut rng = stream_rng(probe_seed, 0x7761_7264); // tag: "ward"
    let mut ward_rel_max = 0.0f64;
    for _ in 0..10 {
        let y = rng.gen_range(0..dim);
        let col = g.column(y);
        let lhs: f64 = col.iter().map(|v| v.norm_sqr()).sum();
        let rhs = g[(y, y)].im / eta;
        ward_rel_max = ward_rel_max.max((lhs - rhs).abs() / rhs.abs());
    }

    // Anisotropic ratio over 20 random unit pairs.
    let dn_eta = dim as f64 * eta;
    let denom = (m.im / dn_eta).sqrt() + 1.0 / dn_eta;
    let mut rng = stream_rng(probe_seed, 0x616E_6973); // tag: "anis"
    let mut aniso_ratio_max = 0.0f64;
    for _ in 0..20 {
        let u = random_unit(&mut rng, dim);
        let v = random_unit(&mut rng, dim);
        let gv = g.mul_vec(&v);
        let g_uv = zdotc(&u, &gv);
        let m_uv = match &m_dense {
            Some(mm) => zdotc(&u, &mm.mul_vec(&v)),
            None => m * zdotc(&u, &v),
        };
        aniso_ratio_max = aniso_ratio_max.max((g_uv - m_uv).norm() / denom);
    }

    // Averaged law against 5 random diagonal contrasts, reusing diag(G).
    let diag_diff: Vec<Complex64> = (0..dim)
        .map(|j| {
            let m_jj = match &m_dense {
                Some(mm) => mm[(j, j)],
                None => m,
            };
            g[(j, j)] - m_jj
        })
        .collect();
    let mut rng = stream_rng(probe_seed, 0x6176_6572); // tag: "aver"
    let mut averaged_scaled = Vec::with_capacity(5);
    for _ in 0..5 {
        let mut acc = Complex64::new(0.0, 0.0);
        for diff in &diag_diff {
            let b: f64 = rng.gen_range(-1.0..1.0);
            acc += b * diff;
        }
        averaged_scaled.push((acc / dim as f64).norm() * dn_eta);
    }
    let averaged_scaled_max = averaged_scaled.iter().cloned().fold(0.0, f64::max);

    Ok(ResolventProbe {
        z_re: z.re,
        z_im: z.im,
        aniso_ratio_max,
        averaged_scaled,
        averaged_scaled_max,
        ward_rel_max,
    })
}

/// One evaluated two-resolvent loop.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct LoopValue {
    /// Eigenvalue index the probe is centered on, 1-based from the top.
    pub k: usize,
    /// Probe scale `η = N^{−2/3+ε} k^{−1/3}`.
    pub eta: f64,
    /// Quantile `γ_k` the probe is centered on.
    pub gamma_k: f64,
    /// Spectral shift `Δ_ev` between the coupled and uncoupled models.
    pub shift: f64,
    /// `⟨Im G_H(z₀) Λ̃ Im G(z₁) Λ̃⟩ ≥ 0`.
    pub value: f64,
}

/// The bound envelope `N^{−5/3} k^{2/3} ‖A‖_HS²` the loop's ensemble mean is
/// compared against (calibration constants live at the call site).
pub fn loop_envelope(n: usize, k: usize, hs_norm: f64) -> f64 {
    (n as f64).powf(-5.0 / 3.0) * (k as f64).powf(2.0 / 3.0) * hs_norm * hs_norm
}

/// Evaluate `⟨Im G_H(z₀) Λ̃ Im G(z₁) Λ̃⟩` for each requested `k`, where
/// `Λ̃ = Λ − Δ_ev`, `z₁ = γ_k + iη` with `η = N^{−2/3+ε} k^{−1/3}`, and
/// `z₀ = z₁ − Δ_ev` probes the uncoupled resolvent at the matching energy.
///
/// Both `Im G` factors come from spectral data:
/// `Im G(z) = Σ_j w_j v_j v_j^*` with Lorentzian weights
/// `w_j = η/((λ_j − Re z)² + η²)`, so the loop reduces to
/// `(1/DN) Σ_{j,l} w⁰_j w¹_l |u_j^* Λ̃ v_l|²` — manifestly nonnegative. The
/// cross matrix `U^* Λ̃ V = U^*ΛV − Δ_ev·U^*V` is assembled once per sample
/// and reused across all `k`.
pub fn two_resolvent_loop(
    ctx: &EnsembleContext,
    sample: &ProbeSample,
    ks: &[usize],
    epsilon: f64,
) -> Result<Vec<LoopValue>> {
    let n = ctx.config.n;
    let dim = ctx.dim();
    if !(0.0..=0.5).contains(&epsilon) {
        return Err(Error::Config(format!(
            "loop exponent ε = {epsilon} outside [0, 0.5]"
        )));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > dim) {
        return Err(Error::Config(format!("loop index k = {k} outside 1..={dim}")));
    }

    let (interaction, spectrum) = match (&ctx.interaction, &ctx.spectrum) {
        (Some(li), Some(sp)) => (li, sp),
        // No interaction: Λ̃ = 0 − Δ_ev with Δ_ev = 0, so every loop is 0.
        _ => {
            return Ok(ks
                .iter()
                .map(|&k| {
                    let eta = loop_eta(n, k, epsilon);
                    LoopValue {
                        k,
                        eta,
                        gamma_k: ctx.quantiles.gamma(k),
                        shift: 0.0,
                        value: 0.0,
                    }
                })
                .collect());
        }
    };

    // Cross matrices between the uncoupled basis U (block-diagonal) and the
    // coupled basis V.
    let v = &sample.eigen.vectors;
    let lambda_v = interaction.matrix().mul(v);
    let p = adjoint_by_blocks(&sample.h_blocks, &lambda_v, n); // U^* Λ V
    let q = adjoint_by_blocks(&sample.h_blocks, v, n); // U^* V

    // Uncoupled eigenvalues aligned with the rows of `p`/`q`.
    let h_values: Vec<f64> = sample
        .h_blocks
        .iter()
        .flat_map(|b| b.values.iter().copied())
        .collect();

    let mut out = Vec::with_capacity(ks.len());
    for &k in ks {
        let eta = loop_eta(n, k, epsilon);
        let gamma_k = ctx.quantiles.gamma(k);
        let z1 = Complex64::new(gamma_k, eta);
        let shift = shift_ev(z1, spectrum)?;
        let x0 = gamma_k - shift;

        let w0: Vec<f64> = h_values
            .iter()
            .map(|&lam| eta / ((lam - x0) * (lam - x0) + eta * eta))
            .collect();
        let w1: Vec<f64> = sample
            .eigen
            .values
            .iter()
            .map(|&lam| eta / ((lam - gamma_k) * (lam - gamma_k) + eta * eta))
            .collect();

        let mut acc = 0.0f64;
        for l in 0..dim {
            let pl = p.column(l);
            let ql = q.column(l);
            let mut inner = 0.0f64;
            for j in 0..dim {
                let x = pl[j] - shift * ql[j];
                inner += w0[j] * x.norm_sqr();
            }
            acc += w1[l] * inner;
        }
        out.push(LoopValue {
            k,
            eta,
            gamma_k,
            shift,
            value: acc / dim as f64,
        });
    }
    Ok(out)
}

fn loop_eta(n: usize, k: usize, epsilon: f64) -> f64 {
    (n as f64).powf(-2.0 / 3.0 + epsilon) * (k as f64).powf(-1.0 / 3.0)
}

/// `U^* X` where `U` is the block-diagonal matrix of uncoupled eigenbases.
fn adjoint_by_blocks(h_blocks: &[Eigh], x: &CMatrix, n: usize) -> CMatrix {
    let dim = x.rows();
    let cols = x.cols();
    let mut out = CMatrix::zeros(dim, cols);
    for (a, block) in h_blocks.iter().enumerate() {
        let rows = x.row_block(a * n, n);
        let product = block.vectors.adjoint_mul(&rows);
        for j in 0..cols {
            let src = product.column(j);
            let dst = &mut out.data_mut()[j * dim + a * n..j * dim + a * n + n];
            dst.copy_from_slice(src);
        }
    }
    out
}

/// Deviation of the sampled two-point statistic from its deterministic limit
/// at one `(z₁, z₂)` pairing.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct PairingDeviation {
    pub z1_re: f64,
    pub z1_im: f64,
    pub z2_re: f64,
    pub z2_im: f64,
    /// `max_ab |mean(L)_ab − K_ab|`.
    pub max_abs: f64,
    /// `max_abs · N · η²` with `η = min(|Im z₁|, |Im z₂|)`.
    pub scaled: f64,
}

/// All four `(z, z̄)` pairings of one base point pair.
#[derive(Clone, Debug, Serialize)]
pub struct ElMinusKReport {
    pub samples: usize,
    pub pairings: Vec<PairingDeviation>,
}

/// Average the block-resolved two-point statistic
/// `L_ab = D⟨G(z₁) E_a G(z₂) E_b⟩` over the samples and compare it against
/// the deterministic limit `K` for all four `(±z₁, ±z₂)` conjugation
/// pairings. The reported deviation is scaled by `N η²`, the rate at which
/// the fluctuation term is expected to close.
///
/// Each sample contributes through its eigendecomposition:
/// `L_ab = (1/N) Σ_{j,l} g₁(λ_j) g₂(λ_l) S_a[j,l] S_b[l,j]` with the block
/// overlaps `S_a = V^* E_a V`, computed once and shared by all pairings.
pub fn el_minus_k_check(
    ctx: &EnsembleContext,
    samples: &[ProbeSample],
    z1: Complex64,
    z2: Complex64,
) -> Result<ElMinusKReport> {
    let n = ctx.config.n;
    let d = ctx.config.d;
    let dim = ctx.dim();
    if samples.len() < 200 {
        return Err(Error::Config(format!(
            "the two-point mean needs at least 200 samples, got {}",
            samples.len()
        )));
    }
    if z1.im == 0.0 || z2.im == 0.0 {
        return Err(Error::Config("spectral parameters must be off-axis".into()));
    }

    let pairings = [
        (z1, z2),
        (z1, z2.conj()),
        (z1.conj(), z2),
        (z1.conj(), z2.conj()),
    ];
    let mut means: Vec<CMatrix> = (0..4).map(|_| CMatrix::zeros(d, d)).collect();

    for sample in samples {
        let v = &sample.eigen.vectors;
        let overlaps: Vec<CMatrix> = (0..d)
            .map(|a| {
                let block_rows = v.row_block(a * n, n);
                block_rows.adjoint_mul(&block_rows)
            })
            .collect();
        for (mean, &(w1, w2)) in means.iter_mut().zip(pairings.iter()) {
            let g1: Vec<Complex64> = sample
                .eigen
                .values
                .iter()
                .map(|&lam| (Complex64::new(lam, 0.0) - w1).inv())
                .collect();
            let g2: Vec<Complex64> = sample
                .eigen
                .values
                .iter()
                .map(|&lam| (Complex64::new(lam, 0.0) - w2).inv())
                .collect();
            for a in 0..d {
                for b in 0..d {
                    let sa = &overlaps[a];
                    let sb = &overlaps[b];
                    let mut acc = Complex64::new(0.0, 0.0);
                    for l in 0..dim {
                        let sa_col = sa.column(l);
                        let g2l = g2[l];
                        let mut inner = Complex64::new(0.0, 0.0);
                        for j in 0..dim {
                            inner += g1[j] * sa_col[j] * sb[(l, j)];
                        }
                        acc += g2l * inner;
                    }
                    mean[(a, b)] += acc / n as f64;
                }
            }
        }
    }
    let inv_count = 1.0 / samples.len() as f64;
    for mean in &mut means {
        mean.scale(Complex64::new(inv_count, 0.0));
    }

    let eta = z1.im.abs().min(z2.im.abs());
    let mut out = Vec::with_capacity(4);
    for (mean, &(w1, w2)) in means.iter().zip(pairings.iter()) {
        let k_matrix = deterministic_k(ctx, w1, w2)?;
        let mut max_abs = 0.0f64;
        for a in 0..d {
            for b in 0..d {
                max_abs = max_abs.max((mean[(a, b)] - k_matrix[(a, b)]).norm());
            }
        }
        out.push(PairingDeviation {
            z1_re: w1.re,
            z1_im: w1.im,
            z2_re: w2.re,
            z2_im: w2.im,
            max_abs,
            scaled: max_abs * n as f64 * eta * eta,
        });
    }
    Ok(ElMinusKReport {
        samples: samples.len(),
        pairings: out,
    })
}

/// The deterministic limit of `L` at `(z₁, z₂)`: the resummed two-point
/// matrix from the loop algebra, or its scalar specialization
/// `m₁m₂/(1 − m₁m₂)` for the uncoupled single-block model.
fn deterministic_k(
    ctx: &EnsembleContext,
    z1: Complex64,
    z2: Complex64,
) -> Result<CMatrix> {
    match &ctx.spectrum {
        Some(spectrum) => Ok(loop_algebra(z1, z2, spectrum, None)?.k),
        None => {
            let product = m_sc(z1) * m_sc(z2);
            let denom = Complex64::new(1.0, 0.0) - product;
            if denom.norm() < 1e-12 {
                return Err(Error::Solver(format!(
                    "two-point stability degenerate at ({z1}, {z2})"
                )));
            }
            let mut k = CMatrix::zeros(1, 1);
            k[(0, 0)] = product / denom;
            Ok(k)
        }
    }
}

// ---------------------------------------------------------------------------
// Small helpers
// ---------------------------------------------------------------------------

/// Interpolated percentile (`q` in `[0, 1]`) of an unsorted, finite sample.
fn percentile(mut xs: Vec<f64>, q: f64) -> f64 {
    debug_assert!(!xs.is_empty());
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    let pos = q * (xs.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    xs[lo] * (1.0 - frac) + xs[hi] * frac
}

/// A uniformly random complex unit vector.
fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<Complex64> {
    use rand_distr::StandardNormal;
    let mut v: Vec<Complex64> = (0..dim)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(re, im)
        })
        .collect();
    let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    for z in &mut v {
        *z /= norm;
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_interpolates() {
        let xs = vec![3.0, 1.0, 2.0, 4.0];
        assert_eq!(percentile(xs.clone(), 0.0), 1.0);
        assert_eq!(percentile(xs.clone(), 1.0), 4.0);
        assert_eq!(percentile(xs.clone(), 0.5), 2.5);
        assert!((percentile(xs, 0.25) - 1.75).abs() < 1e-15);
    }

    #[test]
    fn mobility_curve_summarizes_synthetic_records() {
        let rec = |id: u64, mass1: f64| SampleRecord {
            sample_id: id,
            seed: id,
            failed: false,
            eigs_hl: vec![],
            eigs_h: None,
            block_masses: vec![(1, vec![mass1, 1.0 - mass1])],
            edge_stats: None,
            eig_residual: None,
        };
        let mut records: Vec<SampleRecord> =
            [0.95, 0.85, 0.55, 0.5].iter().enumerate().map(|(i, &m)| rec(i as u64, m)).collect();
        records.push(SampleRecord::failure(4, 4));
        let summary = mobility_curve(&records, &[1, 7]);
        // k = 7 was never tracked: silently omitted.
        assert_eq!(summary.len(), 1);
        let s = &summary[0];
        assert_eq!((s.k, s.count), (1, 4));
        assert!((s.median - 0.7).abs() < 1e-12);
        assert!((s.frac_above_half - 0.75).abs() < 1e-12);
        assert!((s.frac_above_09 - 0.25).abs() < 1e-12);
    }

    #[test]
    fn rigidity_is_zero_on_the_quantiles_themselves() {
        let gamma = vec![1.5, 0.5, -0.5, -1.5];
        let table = QuantileTable {
            n: 2,
            d: 2,
            gamma: gamma.clone(),
            gamma_sc: gamma.clone(),
        };
        let report = rigidity_report(&gamma, &table).unwrap();
        assert_eq!(report.max, 0.0);
        assert!(report.scaled.iter().all(|&v| v == 0.0));
        assert!(rigidity_report(&gamma[..3], &table).is_err());
    }

    #[test]
    fn paired_shift_flags_match_the_scaled_values() {
        let gamma = vec![2.0, 0.0, -2.0];
        let table = QuantileTable {
            n: 3,
            d: 1,
            gamma: gamma.clone(),
            gamma_sc: gamma.clone(),
        };
        // Coupled spectrum drifts by +0.1 at the top, uncoupled stays put.
        let hl = vec![2.1, 0.0, -2.0];
        let h = vec![2.0, 0.0, -2.0];
        let rep = paired_shift_check(&h, &hl, &table).unwrap();
        assert!((rep.raw[0] - 0.1).abs() < 1e-15);
        assert_eq!(rep.raw[1], 0.0);
        // Scale at k = 1: 3^{2/3}·1^{1/3}·0.1 ≈ 0.208 < 1.
        assert!(rep.small[0]);
        let expected = 3f64.powf(2.0 / 3.0) * 0.1;
        assert!((rep.scaled[0] - expected).abs() < 1e-12);
        assert!(paired_shift_check(&h[..2], &hl, &table).is_err());
    }

    #[test]
    fn loop_envelope_has_the_advertised_shape() {
        let base = loop_envelope(400, 1, 1.0);
        assert!((loop_envelope(400, 8, 1.0) / base - 4.0).abs() < 1e-12);
        assert!((loop_envelope(400, 1, 3.0) / base - 9.0).abs() < 1e-12);
    }
}
