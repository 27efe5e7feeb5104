//! Integration tests for the Monte Carlo driver: reproducibility across
//! worker counts, structural invariants of the records, calibration of every
//! estimator on the uncoupled model where exact references exist, and the
//! error paths of the diagnostic probes.

use blockrmt::dyson::QuantileTable;
use blockrmt::ensemble::{
    el_minus_k_check, local_law_probe, loop_envelope, mobility_curve, paired_shift_check,
    rigidity_report, run_ensemble, two_resolvent_loop, EnsembleConfig, EnsembleContext,
};
use blockrmt::model::{derive_seed, CouplingKind, EntryDist};
use num_complex::Complex64;

fn cfg(n: usize, d: usize, lambda: f64, seed: u64, samples: usize) -> EnsembleConfig {
    EnsembleConfig {
        n,
        d,
        coupling: CouplingKind::Scalar { lambda },
        dist: EntryDist::ComplexGaussian,
        seed,
        samples,
        track_k: vec![],
        with_h_eigs: false,
    }
}

#[test]
fn results_are_identical_across_worker_counts() {
    let mut c = cfg(40, 3, 0.3, 7, 12);
    c.track_k = vec![1, 2];
    c.with_h_eigs = true;
    let reference = serde_json::to_string(&run_ensemble(&c, 1).unwrap()).unwrap();
    for workers in [4, 16] {
        let bytes = serde_json::to_string(&run_ensemble(&c, workers).unwrap()).unwrap();
        assert_eq!(reference, bytes, "worker count {workers} changed the result");
    }
}

#[test]
fn records_satisfy_structural_invariants() {
    let mut c = cfg(60, 2, 0.2, 3, 20);
    c.track_k = (1..=5).collect();
    c.with_h_eigs = true;
    let r = run_ensemble(&c, 2).unwrap();
    let dim = c.n * c.d;

    assert!(r.failed_samples.is_empty());
    assert_eq!(r.records.len(), c.samples);
    assert_eq!(r.gamma.len(), dim);
    assert!(r.gamma.windows(2).all(|w| w[0] > w[1]), "quantiles descend");
    assert!(r.gamma_sc.windows(2).all(|w| w[0] > w[1]));
    assert!(r.e_plus > 2.0 && r.e_minus < -2.0, "coupling widens the support");

    let scale = (dim as f64).powf(2.0 / 3.0);
    for (i, rec) in r.records.iter().enumerate() {
        assert_eq!(rec.sample_id, i as u64);
        assert_eq!(rec.seed, derive_seed(c.seed, i as u64));
        assert_eq!(rec.eigs_hl.len(), dim);
        assert!(rec.eigs_hl.windows(2).all(|w| w[0] >= w[1]), "descending");
        assert_eq!(rec.eigs_h.as_ref().unwrap().len(), dim);
        assert!(rec.eig_residual.unwrap() <= 1e-9, "eigenpair residual");
        for (k, masses) in &rec.block_masses {
            assert!(c.track_k.contains(k));
            assert_eq!(masses.len(), c.d);
            assert!(masses.iter().all(|&m| (0.0..=1.0 + 1e-12).contains(&m)));
            let total: f64 = masses.iter().sum();
            assert!((total - 1.0).abs() <= 1e-10, "masses sum to one: {total}");
        }
        let stats = rec.edge_stats.unwrap();
        let upper = r.gamma_plus * scale * (rec.eigs_hl[0] - r.e_plus);
        let lower = r.gamma_minus * scale * (r.e_minus - rec.eigs_hl[dim - 1]);
        assert_eq!(stats.upper, upper);
        assert_eq!(stats.lower, lower);
    }
}

#[test]
fn uncoupled_blocks_carry_unit_mass() {
    // With no interaction every eigenvector lives inside one block, up to the
    // eigensolver's own rounding (divide-and-conquer mixes degenerate
    // subspaces across blocks at the e-15 level, so "exactly 1" is asserted
    // to twelve digits).
    let mut c = cfg(100, 2, 0.0, 13, 50);
    c.track_k = vec![1];
    let r = run_ensemble(&c, 2).unwrap();
    let min_mass = r
        .records
        .iter()
        .map(|rec| rec.block_masses[0].1.iter().cloned().fold(0.0f64, f64::max))
        .fold(1.0f64, f64::min);
    assert!(min_mass >= 1.0 - 1e-12, "max block mass {min_mass}");
    assert!(r.mobility[0].median >= 1.0 - 1e-12);
    assert_eq!(r.mobility[0].frac_above_half, 1.0);
}

#[test]
fn gue_edge_statistics_match_the_edge_law() {
    // Single uncoupled block: N^{2/3}(λ_1 − 2) must follow the edge law at
    // both edges. 1000 samples of N = 200 give KS ≈ 0.025.
    let c = cfg(200, 1, 0.0, 11, 1000);
    let r = run_ensemble(&c, 4).unwrap();
    assert_eq!(r.e_plus, 2.0);
    assert_eq!(r.gamma_plus, 1.0);
    let upper = r.ks_upper_tw.unwrap();
    let lower = r.ks_lower_tw.unwrap();
    assert!(upper <= 0.1, "upper-edge KS {upper}");
    assert!(lower <= 0.1, "lower-edge KS {lower}");
    // With D = 1 the max-of-D law *is* the single-edge law and the curvature
    // prefactor is 1, so both comparisons coincide.
    assert_eq!(r.ks_upper_max_of_d.unwrap(), upper);
    assert_eq!(r.ks_lower_max_of_d.unwrap(), lower);
}

#[test]
fn paired_shift_vanishes_without_coupling() {
    // D = 1: the coupled and uncoupled spectra are the same LAPACK output
    // and the two quantile tables coincide, so the residual is exactly zero.
    let mut c1 = cfg(50, 1, 0.0, 17, 10);
    c1.with_h_eigs = true;
    let r1 = run_ensemble(&c1, 2).unwrap();
    let medians = r1.paired_scaled_median_per_k.unwrap();
    assert!(medians.iter().all(|&m| m == 0.0));

    // D = 2, A = 0: the block-diagonal matrix is diagonalized once as a
    // whole and once block by block, so the residual is rounding-level.
    let mut c2 = cfg(100, 2, 0.0, 13, 50);
    c2.with_h_eigs = true;
    let r2 = run_ensemble(&c2, 2).unwrap();
    let worst = r2
        .paired_scaled_median_per_k
        .unwrap()
        .into_iter()
        .fold(0.0f64, f64::max);
    assert!(worst <= 1e-8, "paired residual {worst}");
}

#[test]
fn rigidity_is_symmetric_between_the_edges() {
    // The uncoupled model is symmetric in law under E ↦ −E, so the scaled
    // residual profile must have matching medians at k and DN+1−k.
    let c = cfg(40, 2, 0.0, 19, 200);
    let r = run_ensemble(&c, 2).unwrap();
    let dim = c.n * c.d;
    for k in [1usize, 5, 20] {
        let a = r.rigidity_median_per_k[k - 1];
        let b = r.rigidity_median_per_k[dim - k];
        let ratio = a / b;
        assert!(
            (0.7..=1.4).contains(&ratio),
            "medians at k = {k} / {} differ: {a} vs {b}",
            dim + 1 - k
        );
    }
    // The per-sample max is the max of the profile.
    for (i, rec) in r.records.iter().enumerate() {
        let report = rigidity_report(&rec.eigs_hl, &quantile_table_of(&r)).unwrap();
        assert_eq!(report.max, r.rigidity_max[i]);
        assert_eq!(report.scaled[report.argmax - 1], report.max);
    }
}

fn quantile_table_of(r: &blockrmt::ensemble::EnsembleResult) -> QuantileTable {
    QuantileTable {
        n: r.config.n,
        d: r.config.d,
        gamma: r.gamma.clone(),
        gamma_sc: r.gamma_sc.clone(),
    }
}

#[test]
fn zero_coupling_loop_is_exactly_zero() {
    // D = 1: there is no interaction at all.
    let ctx1 = EnsembleContext::new(&cfg(50, 1, 0.0, 23, 1)).unwrap();
    let s1 = ctx1.probe_sample(0).unwrap();
    let vals = two_resolvent_loop(&ctx1, &s1, &[1, 3], 0.1).unwrap();
    assert!(vals.iter().all(|v| v.value == 0.0 && v.shift == 0.0));
    assert!(vals[0].eta > vals[1].eta, "η shrinks like k^{{-1/3}}");

    // D = 2 with A = 0: the interaction matrix is identically zero and the
    // spectral shift solves to zero, so the loop collapses to exact zero.
    let ctx2 = EnsembleContext::new(&cfg(60, 2, 0.0, 29, 1)).unwrap();
    let s2 = ctx2.probe_sample(0).unwrap();
    let vals2 = two_resolvent_loop(&ctx2, &s2, &[1], 0.1).unwrap();
    assert_eq!(vals2[0].value, 0.0);
    assert_eq!(vals2[0].shift, 0.0);

    // Malformed requests.
    assert!(two_resolvent_loop(&ctx2, &s2, &[0], 0.1).is_err());
    assert!(two_resolvent_loop(&ctx2, &s2, &[121], 0.1).is_err());
    assert!(two_resolvent_loop(&ctx2, &s2, &[1], 0.9).is_err());
}

#[test]
fn loop_values_respect_the_envelope_on_a_coupled_model() {
    // Modest coupling at N = 100: the ensemble mean sits near the envelope
    // N^{-5/3} k^{2/3} ‖A‖_HS² (calibrated ratio ≈ 1.1–1.4 over 20 draws).
    let ctx = EnsembleContext::new(&cfg(100, 2, 0.1, 29, 1)).unwrap();
    let n_samp = 20;
    let mut means = [0.0f64; 2];
    for i in 0..n_samp {
        let s = ctx.probe_sample(i).unwrap();
        let vals = two_resolvent_loop(&ctx, &s, &[1, 8], 0.1).unwrap();
        assert!(vals.iter().all(|v| v.value >= 0.0), "the loop is a square");
        for (slot, v) in vals.iter().enumerate() {
            means[slot] += v.value / n_samp as f64;
        }
    }
    for (slot, k) in [1usize, 8].iter().enumerate() {
        let ratio = means[slot] / loop_envelope(100, *k, ctx.coupling.hs_norm);
        assert!((0.2..=5.0).contains(&ratio), "k = {k}: mean/envelope = {ratio}");
    }
}

#[test]
fn two_point_average_matches_the_loop_algebra_on_gue() {
    // 500 draws of a single N = 100 block at η = 1: the sample mean of
    // L = ⟨G(z₁) G(z₂)⟩·N⁻¹-normalized block overlaps must agree with the
    // deterministic limit m₁m₂/(1 − m₁m₂) well inside the N η² window
    // (calibrated deviation ≈ 0.04 after scaling).
    let ctx = EnsembleContext::new(&cfg(100, 1, 0.0, 17, 1)).unwrap();
    let samples: Vec<_> = (0..500).map(|i| ctx.probe_sample(i).unwrap()).collect();
    let z1 = Complex64::new(0.5, 1.0);
    let z2 = Complex64::new(-0.3, 1.0);
    let rep = el_minus_k_check(&ctx, &samples, z1, z2).unwrap();
    assert_eq!(rep.pairings.len(), 4);
    for p in &rep.pairings {
        assert!(p.scaled <= 1.0, "scaled deviation {}", p.scaled);
        assert!(p.scaled <= 0.1, "calibrated headroom {}", p.scaled);
    }
    // Conjugating both arguments conjugates both the statistic and its
    // limit, so mirrored pairings deviate identically.
    let d03 = (rep.pairings[0].max_abs - rep.pairings[3].max_abs).abs();
    let d12 = (rep.pairings[1].max_abs - rep.pairings[2].max_abs).abs();
    assert!(d03 <= 1e-14 * rep.pairings[0].max_abs);
    assert!(d12 <= 1e-14 * rep.pairings[1].max_abs);

    // Averaging fluctuations: a quarter of the data deviates more.
    let rep200 = el_minus_k_check(&ctx, &samples[..200], z1, z2).unwrap();
    assert!(rep200.pairings[0].scaled > rep.pairings[0].scaled);

    // Fewer than 200 samples is a request for noise, not an estimate.
    assert!(el_minus_k_check(&ctx, &samples[..150], z1, z2).is_err());
    // On-axis parameters are rejected.
    assert!(el_minus_k_check(&ctx, &samples, Complex64::new(0.5, 0.0), z2).is_err());
}

#[test]
fn resolvent_probe_tracks_the_deterministic_law() {
    let ctx = EnsembleContext::new(&cfg(200, 2, 0.3, 19, 1)).unwrap();
    let sample = ctx.probe_sample(0).unwrap();

    // Global scale: G is essentially deterministic.
    let far = local_law_probe(&ctx, &sample, Complex64::new(0.2, 10.0), 23).unwrap();
    assert!(far.aniso_ratio_max <= 1.0, "aniso ratio {}", far.aniso_ratio_max);
    assert!(far.ward_rel_max <= 1e-10, "Ward identity {}", far.ward_rel_max);
    assert_eq!(far.averaged_scaled.len(), 5);
    assert!(far.averaged_scaled_max < f64::INFINITY);

    // Local scales stay within the calibrated window.
    for eta in [0.1, 0.01] {
        let p = local_law_probe(&ctx, &sample, Complex64::new(0.2, eta), 23).unwrap();
        assert!(p.aniso_ratio_max <= 10.0);
        assert!(p.ward_rel_max <= 1e-10);
    }

    // The probe is a pure function of (sample, z, probe seed).
    let again = local_law_probe(&ctx, &sample, Complex64::new(0.2, 10.0), 23).unwrap();
    assert_eq!(
        serde_json::to_string(&far).unwrap(),
        serde_json::to_string(&again).unwrap()
    );

    // Below the local-law floor N^{-0.9}, and on the real axis: rejected.
    assert!(local_law_probe(&ctx, &sample, Complex64::new(0.2, 1e-4), 23).is_err());
    assert!(local_law_probe(&ctx, &sample, Complex64::new(0.2, 0.0), 23).is_err());
}

#[test]
fn mobility_dichotomy_separates_the_phases() {
    // N = 400, D = 2, 50 samples per phase. Weak coupling (N^{-0.4})
    // localizes the top eigenvector in one block; strong coupling (N^{-0.05})
    // spreads it evenly across both.
    let lambda_loc = 400f64.powf(-0.4);
    let mut c = cfg(400, 2, lambda_loc, 37, 50);
    c.track_k = vec![1];
    let localized = run_ensemble(&c, 2).unwrap();
    assert!(
        localized.mobility[0].median >= 0.8,
        "localized median {}",
        localized.mobility[0].median
    );

    let lambda_deloc = 400f64.powf(-0.05);
    let mut c = cfg(400, 2, lambda_deloc, 37, 50);
    c.track_k = vec![1];
    let delocalized = run_ensemble(&c, 2).unwrap();
    let median = delocalized.mobility[0].median;
    assert!(
        (median - 0.5).abs() <= 0.15,
        "delocalized median {median} not near 1/2"
    );
}

#[test]
fn config_validation_rejects_malformed_requests() {
    assert!(run_ensemble(&cfg(40, 2, 0.1, 1, 0), 1).is_err(), "no samples");
    assert!(EnsembleContext::new(&cfg(40, 0, 0.1, 1, 1)).is_err(), "no blocks");

    let mut bad_track = cfg(40, 2, 0.1, 1, 1);
    bad_track.track_k = vec![0];
    assert!(EnsembleContext::new(&bad_track).is_err(), "k = 0");
    bad_track.track_k = vec![81];
    assert!(EnsembleContext::new(&bad_track).is_err(), "k > DN");

    // D = 1 has nowhere to put a coupling.
    assert!(EnsembleContext::new(&cfg(40, 1, 0.1, 1, 1)).is_err());
    assert!(EnsembleContext::new(&cfg(40, 1, 0.0, 1, 1)).is_ok());

    // The config round-trips through serde unchanged.
    let mut c = cfg(40, 3, 0.25, 99, 7);
    c.track_k = vec![1, 4];
    c.with_h_eigs = true;
    let json = serde_json::to_string(&c).unwrap();
    let back: EnsembleConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(json, serde_json::to_string(&back).unwrap());
}

#[test]
fn mobility_curve_ignores_untracked_indices() {
    let mut c = cfg(30, 2, 0.1, 5, 8);
    c.track_k = vec![2, 9];
    let r = run_ensemble(&c, 2).unwrap();
    // Asking for a k that was never tracked yields no summary for it.
    let curve = mobility_curve(&r.records, &[2, 9, 11]);
    assert_eq!(curve.len(), 2);
    assert_eq!((curve[0].k, curve[1].k), (2, 9));
    assert!(curve.iter().all(|m| m.count == 8));
    assert!(curve.iter().all(|m| m.q1 <= m.median && m.median <= m.q3));
}

#[test]
fn paired_shift_rejects_mismatched_spectra() {
    let gamma = vec![1.0, 0.0, -1.0];
    let table = QuantileTable {
        n: 3,
        d: 1,
        gamma: gamma.clone(),
        gamma_sc: gamma.clone(),
    };
    assert!(paired_shift_check(&[1.0, 0.0], &[1.0, 0.0, -1.0], &table).is_err());
    assert!(rigidity_report(&[1.0, 0.0], &table).is_err());
}
