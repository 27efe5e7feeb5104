//! Property-based tests: structural laws that must hold for arbitrary
//! well-formed inputs, independent of any calibrated constant.

use blockrmt::dyson::{semicircle_quantile, QuantileTable};
use blockrmt::ensemble::{mobility_curve, rigidity_report, run_ensemble, EnsembleConfig};
use blockrmt::model::{derive_seed, CouplingKind, EntryDist};
use blockrmt::tw::{build_tw2, ks_distance, max_of_d_cdf, max_of_d_cdf_raw, TWTable};
use proptest::prelude::*;
use std::sync::OnceLock;

fn tw() -> &'static TWTable {
    static TABLE: OnceLock<TWTable> = OnceLock::new();
    TABLE.get_or_init(|| build_tw2(1e-8).expect("reference table"))
}

proptest! {
    #[test]
    fn ks_distance_is_a_probability(
        samples in prop::collection::vec(-10.0f64..10.0, 2..60),
    ) {
        let d = ks_distance(&samples, |s| tw().cdf_at(s)).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn max_of_d_cdf_is_monotone_in_s(
        s in -9.0f64..7.0,
        step in 0.01f64..2.0,
        d in 1usize..12,
    ) {
        let lo = max_of_d_cdf(s, d, tw()).unwrap();
        let hi = max_of_d_cdf(s + step, d, tw()).unwrap();
        prop_assert!((0.0..=1.0).contains(&lo));
        prop_assert!(lo <= hi + 1e-15, "cdf decreased: {lo} > {hi}");
    }

    #[test]
    fn more_blocks_push_the_unrescaled_max_up(
        s in -4.0f64..4.0,
        d in 1usize..12,
    ) {
        // F2(s)^d is strictly decreasing in d wherever F2(s) ∈ (0, 1):
        // the maximum of more blocks is stochastically larger.
        let a = max_of_d_cdf_raw(s, d, tw()).unwrap();
        let b = max_of_d_cdf_raw(s, d + 1, tw()).unwrap();
        prop_assert!(b <= a + 1e-15, "cdf grew with d: {a} -> {b}");
    }

    #[test]
    fn derived_seeds_are_distinct(root in any::<u64>(), i in any::<u64>(), j in any::<u64>()) {
        prop_assume!(i != j);
        prop_assert_ne!(derive_seed(root, i), derive_seed(root, j));
    }

    #[test]
    fn semicircle_quantiles_decrease_along_the_tail(
        tau in 0.001f64..0.998,
        step in 0.0005f64..0.3,
    ) {
        prop_assume!(tau + step < 0.999);
        let near_edge = semicircle_quantile(tau).unwrap();
        let deeper = semicircle_quantile(tau + step).unwrap();
        prop_assert!((-2.0..=2.0).contains(&near_edge));
        prop_assert!(near_edge > deeper, "quantiles must descend: {near_edge} vs {deeper}");
    }

    #[test]
    fn rigidity_vanishes_exactly_on_the_quantiles(
        raw in prop::collection::vec(-3.0f64..3.0, 2..40),
        n in 1usize..50,
    ) {
        let mut gamma = raw;
        gamma.sort_by(|a, b| b.partial_cmp(a).unwrap());
        gamma.dedup();
        let table = QuantileTable { n, d: 1, gamma: gamma.clone(), gamma_sc: gamma.clone() };
        let report = rigidity_report(&gamma, &table).unwrap();
        prop_assert_eq!(report.max, 0.0);
        prop_assert_eq!(report.scaled.len(), gamma.len());
    }

    #[test]
    fn rigidity_scaling_is_positively_homogeneous(
        offset in 0.001f64..0.5,
        k in 1usize..8,
    ) {
        // Moving one eigenvalue by δ moves its scaled residual by
        // N^{2/3} r(k)^{1/3} δ and leaves the others at zero.
        let gamma: Vec<f64> = (0..8).map(|i| 2.0 - 0.3 * i as f64).collect();
        let table = QuantileTable { n: 8, d: 1, gamma: gamma.clone(), gamma_sc: gamma.clone() };
        let mut eigs = gamma;
        eigs[k - 1] += offset;
        let report = rigidity_report(&eigs, &table).unwrap();
        let r = k.min(8 + 1 - k) as f64;
        let expected = 8f64.powf(2.0 / 3.0) * r.cbrt() * offset;
        prop_assert!((report.max - expected).abs() <= 1e-12 * expected.max(1.0));
        prop_assert_eq!(report.argmax, k);
    }

    #[test]
    fn mobility_summaries_are_ordered_statistics(
        masses in prop::collection::vec(0.0f64..=1.0, 1..30),
    ) {
        let records: Vec<_> = masses
            .iter()
            .enumerate()
            .map(|(i, &m)| {
                let r = run_tiny_record(i as u64, m);
                r
            })
            .collect();
        let curve = mobility_curve(&records, &[1]);
        prop_assert_eq!(curve.len(), 1);
        let s = &curve[0];
        prop_assert_eq!(s.count, masses.len());
        prop_assert!(s.q1 <= s.median && s.median <= s.q3);
        prop_assert!((0.0..=1.0).contains(&s.frac_above_half));
        prop_assert!(s.frac_above_09 <= s.frac_above_half);
    }
}

fn run_tiny_record(id: u64, mass: f64) -> blockrmt::ensemble::SampleRecord {
    blockrmt::ensemble::SampleRecord {
        sample_id: id,
        seed: id,
        failed: false,
        eigs_hl: vec![],
        eigs_h: None,
        block_masses: vec![(1, vec![mass, 1.0 - mass])],
        edge_stats: None,
        eig_residual: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn tiny_ensembles_are_reproducible_and_well_formed(
        n in 4usize..9,
        d in 1usize..4,
        lambda in 0.0f64..0.5,
        seed in any::<u64>(),
        samples in 1usize..4,
    ) {
        let lambda = if d == 1 { 0.0 } else { lambda };
        let config = EnsembleConfig {
            n,
            d,
            coupling: CouplingKind::Scalar { lambda },
            dist: EntryDist::ComplexGaussian,
            seed,
            samples,
            track_k: vec![1],
            with_h_eigs: true,
        };
        let a = run_ensemble(&config, 1).unwrap();
        let b = run_ensemble(&config, 2).unwrap();
        prop_assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        for rec in &a.records {
            prop_assert_eq!(rec.eigs_hl.len(), n * d);
            prop_assert!(rec.eigs_hl.windows(2).all(|w| w[0] >= w[1]));
            let (_, masses) = &rec.block_masses[0];
            let total: f64 = masses.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-10);
        }
    }
}
