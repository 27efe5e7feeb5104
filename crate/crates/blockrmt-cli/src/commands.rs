//! The nine commands: deterministic spectral tables, Monte Carlo runs and
//! their diagnostics, the edge-law table, and the identity-verification
//! suite. Every command is a pure function of the resolved config, writes
//! its outputs under the configured directory, and prints a one-line (or
//! few-line) summary to standard output.

use blockrmt::dyson::{
    density_profile, edges, loop_algebra, m_matrix, m_mstar_mean, m_sc, quantiles,
    semicircle_quantile, shift_ev, stieltjes,
};
use blockrmt::ensemble::{
    local_law_probe, loop_envelope, run_ensemble, two_resolvent_loop, EnsembleContext,
};
use blockrmt::flow::{edge_velocity_check, flow_invariants, integrate_flow, InvariantCheck};
use blockrmt::linalg::CMatrix;
use blockrmt::model::{lambda_spectrum, make_coupling, CouplingKind, CouplingSpec, LambdaSpectrum};
use blockrmt::tw::{build_tw2, max_of_d_cdf, max_of_d_cdf_raw};
use blockrmt::{Error, Result};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use std::fmt::Write as _;
use std::path::Path;

use crate::config::RunConfig;
use crate::output::{
    ensure_dir, write_json, write_text, Axis, Marker, PlotDescription, Series, SidecarWriter,
    Table,
};

const SCHEMA_VERSION: u32 = 1;

/// Shared entry: create the output directory and echo the fully resolved
/// config next to the data it produced.
fn prepare(config: &RunConfig) -> Result<()> {
    ensure_dir(&config.output.directory)?;
    write_text(
        &config.output.directory.join("resolved_config.toml"),
        &config.emit(),
    )
}

fn context(config: &RunConfig) -> Result<EnsembleContext> {
    EnsembleContext::new(&config.ensemble_config())
}

// ---------------------------------------------------------------------------
// Deterministic tables
// ---------------------------------------------------------------------------

pub fn cmd_density(config: &RunConfig) -> Result<()> {
    prepare(config)?;
    let dir = &config.output.directory;
    let ctx = context(config)?;
    let width = ctx.edge.e_plus - ctx.edge.e_minus;
    let lo = ctx.edge.e_minus - config.density.margin * width;
    let hi = ctx.edge.e_plus + config.density.margin * width;
    let points = config.density.points;
    let grid: Vec<f64> = (0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect();

    let mut table = Table::new("density", &["E", "rho"]);
    match &ctx.spectrum {
        Some(spectrum) => {
            let profile = density_profile(spectrum, &grid, None)?;
            for (e, rho) in profile.grid.iter().zip(profile.rho.iter()) {
                table.push(vec![*e, *rho]);
            }
        }
        None => {
            for &e in &grid {
                table.push(vec![e, blockrmt::dyson::rho_sc(e)]);
            }
        }
    }
    let written = table.write(dir, config.wants("csv"), config.wants("jsonl"))?;
    PlotDescription {
        title: "Spectral density".into(),
        kind: "line".into(),
        data_file: "density.csv".into(),
        x: Axis {
            label: "E".into(),
            log: None,
        },
        y: Axis {
            label: "rho".into(),
            log: None,
        },
        series: vec![Series {
            label: "rho_N".into(),
            file: "density.csv".into(),
            x_column: "E".into(),
            y_column: "rho".into(),
        }],
        reference_curves: vec![],
        markers: vec![
            Marker {
                label: "E-".into(),
                axis: "x".into(),
                value: ctx.edge.e_minus,
                color: "gray".into(),
            },
            Marker {
                label: "E+".into(),
                axis: "x".into(),
                value: ctx.edge.e_plus,
                color: "gray".into(),
            },
        ],
    }
    .write(dir, "density")?;
    println!(
        "density: {points} points on [{lo:.4}, {hi:.4}] -> {}",
        describe(&written)
    );
    Ok(())
}

pub fn cmd_edges(config: &RunConfig) -> Result<()> {
    prepare(config)?;
    let ctx = context(config)?;
    let e = &ctx.edge;
    println!(
        "edges: E- = {:.6}, E+ = {:.6}, gamma- = {:.6}, gamma+ = {:.6}",
        e.e_minus, e.e_plus, e.gamma_minus, e.gamma_plus
    );
    let hs = ctx.coupling.hs_norm;
    if hs > 0.0 {
        println!(
            "coupling: |A|_HS = {:.6}, |A|_op = {:.6}; transition threshold kappa ~ |A|_HS^-2 = {:.6}",
            hs,
            ctx.coupling.op_norm,
            hs.powi(-2)
        );
    } else {
        println!("coupling: zero; the edge eigenvectors stay localized at every depth");
    }
    write_json(
        &config.output.directory.join("edges.json"),
        &json!({
            "schema_version": SCHEMA_VERSION,
            "e_minus": e.e_minus,
            "e_plus": e.e_plus,
            "gamma_minus": e.gamma_minus,
            "gamma_plus": e.gamma_plus,
            "w_minus": e.w_minus,
            "w_plus": e.w_plus,
            "hs_norm_a": hs,
            "op_norm_a": ctx.coupling.op_norm,
            "kappa_threshold": if hs > 0.0 { Some(hs.powi(-2)) } else { None },
        }),
    )
}

pub fn cmd_quantiles(config: &RunConfig) -> Result<()> {
    prepare(config)?;
    let ctx = context(config)?;
    let dim = ctx.dim();
    let mut table = Table::new("quantiles", &["k", "gamma_k", "gamma_k_sc"]);
    for &k in &config.quantiles.k_list {
        if k == 0 || k > dim {
            return Err(Error::Config(format!("quantile index {k} outside 1..={dim}")));
        }
        table.push(vec![
            k as f64,
            ctx.quantiles.gamma(k),
            ctx.quantiles.gamma_sc(k),
        ]);
    }
    let written = table.write(
        &config.output.directory,
        config.wants("csv"),
        config.wants("jsonl"),
    )?;
    println!("quantiles: {} rows -> {}", table.len(), describe(&written));
    Ok(())
}

// ---------------------------------------------------------------------------
// Monte Carlo commands
// ---------------------------------------------------------------------------

pub fn cmd_ensemble(config: &RunConfig) -> Result<()> {
    prepare(config)?;
    let dir = &config.output.directory;
    let result = run_ensemble(&config.ensemble_config(), config.parallelism.workers)?;

    // Records as JSON-lines, optionally spilling the big arrays.
    let mut sidecar = if config.output.sidecar {
        Some(SidecarWriter::create(dir.join("records.f64le"))?)
    } else {
        None
    };
    let mut manifest_arrays = Vec::new();
    let mut lines = String::new();
    for record in &result.records {
        let mut value = serde_json::to_value(record)
            .map_err(|e| Error::Config(format!("serialize record: {e}")))?;
        if let Some(writer) = sidecar.as_mut() {
            for field in ["eigs_hl", "eigs_h"] {
                let spilled = match &value[field] {
                    serde_json::Value::Array(xs) if !xs.is_empty() => {
                        let floats: Vec<f64> =
                            xs.iter().map(|v| v.as_f64().unwrap_or(f64::NAN)).collect();
                        let offset = writer.append(&floats)?;
                        Some((offset, floats.len()))
                    }
                    _ => None,
                };
                if let Some((offset, len)) = spilled {
                    value[field] = json!([]);
                    manifest_arrays.push(json!({
                        "sample_id": record.sample_id,
                        "field": field,
                        "offset": offset,
                        "len": len,
                    }));
                }
            }
        }
        lines.push_str(&value.to_string());
        lines.push('\n');
    }
    write_text(&dir.join("records.jsonl"), &lines)?;
    if let Some(writer) = sidecar {
        let total = writer.finish()?;
        write_json(
            &dir.join("manifest.json"),
            &json!({
                "schema_version": SCHEMA_VERSION,
                "sidecar_file": "records.f64le",
                "dtype": "f64le",
                "total_values": total,
                "arrays": manifest_arrays,
            }),
        )?;
    }

    // Aggregate as one JSON document.
    let mut aggregate = serde_json::to_value(&result)
        .map_err(|e| Error::Config(format!("serialize aggregate: {e}")))?;
    aggregate["schema_version"] = json!(SCHEMA_VERSION);
    if config.output.sidecar {
        // The full per-sample spectra already live in the records files.
        for rec in aggregate["records"].as_array_mut().into_iter().flatten() {
            rec["eigs_hl"] = json!([]);
            rec["eigs_h"] = serde_json::Value::Null;
        }
    }
    write_json(&dir.join("aggregate.json"), &aggregate)?;

    // Edge statistics with the reference edge-law curves.
    let mut stats = Table::new("edge_stats", &["sample", "upper", "lower"]);
    for (i, (u, l)) in result
        .edge_upper
        .iter()
        .zip(result.edge_lower.iter())
        .enumerate()
    {
        stats.push(vec![i as f64, *u, *l]);
    }
    stats.write(dir, config.wants("csv"), config.wants("jsonl"))?;

    let tw = build_tw2(config.tw.tol)?;
    let d = config.model.d;
    let mut reference = Table::new(
        "edge_reference",
        &["s", "F2", "f2", "max_of_d_cdf", "max_of_d_cdf_raw"],
    );
    let mut s = -10.0;
    while s <= 8.0 + 1e-9 {
        reference.push(vec![
            s,
            tw.cdf_at(s),
            tw.pdf_at(s),
            max_of_d_cdf(s, d, &tw)?,
            max_of_d_cdf_raw(s, d, &tw)?,
        ]);
        s += 0.05;
    }
    reference.write(dir, config.wants("csv"), config.wants("jsonl"))?;

    let mut reference_curves = vec![
        Series {
            label: "TW2".into(),
            file: "edge_reference.csv".into(),
            x_column: "s".into(),
            y_column: "F2".into(),
        },
        Series {
            label: format!("max-of-{d} (D^(2/3)-rescaled)"),
            file: "edge_reference.csv".into(),
            x_column: "s".into(),
            y_column: "max_of_d_cdf".into(),
        },
    ];
    if config.ensemble.show_unrescaled_max {
        reference_curves.push(Series {
            label: format!("max-of-{d} (unrescaled)"),
            file: "edge_reference.csv".into(),
            x_column: "s".into(),
            y_column: "max_of_d_cdf_raw".into(),
        });
    }
    PlotDescription {
        title: "Rescaled largest eigenvalue vs edge laws".into(),
        kind: "histogram".into(),
        data_file: "edge_stats.csv".into(),
        x: Axis {
            label: "gamma_+ (DN)^(2/3) (lambda_1 - E+)".into(),
            log: None,
        },
        y: Axis {
            label: "density".into(),
            log: None,
        },
        series: vec![Series {
            label: "samples".into(),
            file: "edge_stats.csv".into(),
            x_column: "upper".into(),
            y_column: "upper".into(),
        }],
        reference_curves,
        markers: vec![],
    }
    .write(dir, "ensemble")?;

    println!(
        "ensemble: {} samples ({} failed); E+ = {:.6}; KS upper vs TW2 = {}, vs max-of-{d} = {}",
        result.config.samples,
        result.failed_samples.len(),
        result.e_plus,
        fmt_opt(result.ks_upper_tw),
        fmt_opt(result.ks_upper_max_of_d),
    );
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

pub fn cmd_mobility(config: &RunConfig) -> Result<()> {
    prepare(config)?;
    let dir = &config.output.directory;
    let dim = config.model.n * config.model.d;
    let k_max = config.mobility.k_max.min(dim);
    let mut ensemble = config.ensemble_config();
    ensemble.samples = config.mobility.samples;
    ensemble.track_k = (1..=k_max).collect();
    ensemble.with_h_eigs = false;
    let result = run_ensemble(&ensemble, config.parallelism.workers)?;

    let mut table = Table::new(
        "mobility",
        &[
            "k",
            "kappa",
            "median",
            "q1",
            "q3",
            "frac_above_half",
            "frac_above_09",
        ],
    );
    for m in &result.mobility {
        table.push(vec![
            m.k as f64,
            result.e_plus - result.gamma[m.k - 1],
            m.median,
            m.q1,
            m.q3,
            m.frac_above_half,
            m.frac_above_09,
        ]);
    }
    let written = table.write(dir, config.wants("csv"), config.wants("jsonl"))?;

    let hs = result.hs_norm_a;
    let mut markers = Vec::new();
    if hs > 0.0 {
        let band = hs.powi(-2);
        // The transition sits at kappa ~ |A|_HS^(-2); bracket it one small
        // constant either side (green: delocalization onset, red: fully
        // localized beyond).
        markers.push(Marker {
            label: "delocalized side: kappa = |A|_HS^-2 / 4".into(),
            axis: "x".into(),
            value: band / 4.0,
            color: "green".into(),
        });
        markers.push(Marker {
            label: "localized side: kappa = 4 |A|_HS^-2".into(),
            axis: "x".into(),
            value: band * 4.0,
            color: "red".into(),
        });
    }
    PlotDescription {
        title: "Largest block mass across the edge".into(),
        kind: "line".into(),
        data_file: "mobility.csv".into(),
        x: Axis {
            label: "kappa = E+ - gamma_k".into(),
            log: Some(true),
        },
        y: Axis {
            label: "median max block mass".into(),
            log: None,
        },
        series: vec![Series {
            label: "median".into(),
            file: "mobility.csv".into(),
            x_column: "kappa".into(),
            y_column: "median".into(),
        }],
        reference_curves: vec![],
        markers,
    }
    .write(dir, "mobility")?;

    let crossing = result
        .mobility
        .iter()
        .find(|m| m.median < 0.5)
        .map(|m| m.k);
    println!(
        "mobility: k = 1..{k_max}, {} samples; median crosses 1/2 at k = {}; kappa band ~ {}",
        config.mobility.samples,
        crossing.map_or_else(|| "beyond range".into(), |k| k.to_string()),
        if hs > 0.0 {
            format!("{:.4}", hs.powi(-2))
        } else {
            "n/a (zero coupling)".into()
        }
    );
    println!("mobility: wrote {}", describe(&written));
    Ok(())
}

pub fn cmd_local_law(config: &RunConfig) -> Result<()> {
    prepare(config)?;
    let dir = &config.output.directory;
    let ctx = context(config)?;
    let mut lines = String::new();
    let mut worst_ward = 0.0f64;
    let mut worst_aniso = 0.0f64;
    for sample_id in 0..config.local_law.samples as u64 {
        let sample = ctx.probe_sample(sample_id)?;
        for &eta in &config.local_law.eta_list {
            let z = Complex64::new(config.local_law.energy, eta);
            let probe = local_law_probe(&ctx, &sample, z, config.local_law.probe_seed)?;
            worst_ward = worst_ward.max(probe.ward_rel_max);
            worst_aniso = worst_aniso.max(probe.aniso_ratio_max);
            let mut row = serde_json::to_value(&probe)
                .map_err(|e| Error::Config(format!("serialize probe: {e}")))?;
            row["sample_id"] = json!(sample_id);
            lines.push_str(&row.to_string());
            lines.push('\n');
        }
    }
    write_text(&dir.join("local_law.jsonl"), &lines)?;
    println!(
        "local law: {} samples x {} scales at E = {}; max Ward residual = {:.3e}, max anisotropic ratio = {:.3}",
        config.local_law.samples,
        config.local_law.eta_list.len(),
        config.local_law.energy,
        worst_ward,
        worst_aniso
    );
    Ok(())
}

pub fn cmd_loop(config: &RunConfig) -> Result<()> {
    prepare(config)?;
    let dir = &config.output.directory;
    let ctx = context(config)?;
    let n = config.model.n;
    let ks = &config.loop_.k_list;
    let mut means = vec![0.0f64; ks.len()];
    let samples = config.loop_.samples.max(1);
    for sample_id in 0..samples as u64 {
        let sample = ctx.probe_sample(sample_id)?;
        let values = two_resolvent_loop(&ctx, &sample, ks, config.loop_.epsilon)?;
        for (mean, v) in means.iter_mut().zip(values.iter()) {
            *mean += v.value / samples as f64;
        }
    }
    let mut table = Table::new("loop", &["k", "eta", "mean", "envelope", "ratio"]);
    let mut ratios = Vec::new();
    for (slot, &k) in ks.iter().enumerate() {
        let env = loop_envelope(n, k, ctx.coupling.hs_norm);
        let eta = (n as f64).powf(-2.0 / 3.0 + config.loop_.epsilon) * (k as f64).powf(-1.0 / 3.0);
        let ratio = if env > 0.0 { means[slot] / env } else { 0.0 };
        ratios.push(format!("k={k}: {ratio:.3}"));
        table.push(vec![k as f64, eta, means[slot], env, ratio]);
    }
    let written = table.write(dir, config.wants("csv"), config.wants("jsonl"))?;
    println!(
        "loop: {} samples; mean/envelope {}; wrote {}",
        samples,
        ratios.join(", "),
        describe(&written)
    );
    Ok(())
}

pub fn cmd_flow_check(config: &RunConfig) -> Result<()> {
    prepare(config)?;
    let dir = &config.output.directory;
    let ctx = context(config)?;
    let spectrum = ctx.spectrum.as_ref().ok_or_else(|| {
        Error::Config("the characteristic flow needs at least two blocks (d >= 2)".into())
    })?;
    let z0 = Complex64::new(config.flow.z0[0], config.flow.z0[1]);
    let trajectory = integrate_flow(
        z0,
        spectrum,
        (config.flow.t_span[0], config.flow.t_span[1]),
        config.flow.tol,
    )?;
    let report = flow_invariants(&trajectory, spectrum)?;

    let velocity = edge_velocity_check(spectrum, |t| 1.0 + 0.5 * t, |_| 0.5, &[0.2, 0.6])?;
    let mut checks = report.checks.clone();
    checks.push(InvariantCheck {
        name: "edge_velocity_vs_finite_difference".into(),
        max_residual: velocity.max_rel_err,
        threshold: 1e-5,
        pass: velocity.max_rel_err <= 1e-5,
    });

    let mut lines = String::new();
    for check in &checks {
        let row = serde_json::to_value(check)
            .map_err(|e| Error::Config(format!("serialize check: {e}")))?;
        lines.push_str(&row.to_string());
        lines.push('\n');
    }
    write_text(&dir.join("flow_check.jsonl"), &lines)?;
    let all = checks.iter().all(|c| c.pass);
    println!(
        "flow: {} invariants from t = {} to {}, all pass = {all}",
        checks.len(),
        config.flow.t_span[0],
        config.flow.t_span[1]
    );
    for check in checks.iter().filter(|c| !c.pass) {
        println!(
            "  FAIL {}: residual {:.3e} > {:.1e}",
            check.name, check.max_residual, check.threshold
        );
    }
    Ok(())
}

pub fn cmd_tw(config: &RunConfig, dump: bool) -> Result<()> {
    prepare(config)?;
    let table = build_tw2(config.tw.tol)?;
    println!(
        "TW2 table: mean = {:.9}, variance = {:.9}, pdf mass = {:.9}",
        table.mean(),
        table.variance(),
        table.pdf_mass()
    );
    if dump {
        let mut out = Table::new("tw", &["s", "F2", "f2"]);
        for ((s, cdf), pdf) in table
            .s_grid
            .iter()
            .zip(table.cdf.iter())
            .zip(table.pdf.iter())
        {
            out.push(vec![*s, *cdf, *pdf]);
        }
        let written = out.write(
            &config.output.directory,
            config.wants("csv"),
            config.wants("jsonl"),
        )?;
        println!("tw: wrote {}", describe(&written));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// The identity-verification suite
// ---------------------------------------------------------------------------

struct VerifyCheck {
    name: &'static str,
    max_err: f64,
    threshold: f64,
}

impl VerifyCheck {
    fn pass(&self) -> bool {
        self.max_err.is_finite() && self.max_err <= self.threshold
    }
}

/// Run the deterministic identity suite and return whether everything held.
/// The identities are exact statements about the self-consistent solution,
/// so they are checked on a pool of models: the configured one plus seeded
/// random couplings of several shapes.
pub fn cmd_verify(config: &RunConfig) -> Result<bool> {
    prepare(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.model.seed ^ 0x7665_7269);
    let mut checks: Vec<VerifyCheck> = Vec::new();

    // Model pool for the universal identities.
    let mut pool: Vec<LambdaSpectrum> = Vec::new();
    if config.model.d >= 2 {
        let coupling = make_coupling(&CouplingSpec {
            n: config.model.n,
            kind: config.model.coupling.clone(),
        })?;
        pool.push(lambda_spectrum(&coupling.matrix, config.model.d)?);
    }
    for (n, d, scale, seed) in [(3usize, 2usize, 0.3, 11u64), (4, 3, 0.2, 12), (2, 5, 0.4, 13)] {
        let coupling = make_coupling(&CouplingSpec {
            n,
            kind: CouplingKind::RandomFixed { scale, seed },
        })?;
        pool.push(lambda_spectrum(&coupling.matrix, d)?);
    }

    // ⟨M M*⟩ = Im m / (Im m + η) at 50 random points across the pool.
    let mut worst = 0.0f64;
    for trial in 0..50 {
        let spectrum = &pool[trial % pool.len()];
        let z = Complex64::new(rng.gen_range(-3.0..3.0), rng.gen_range(0.02..2.0));
        let sol = stieltjes(z, spectrum)?;
        let lhs = m_mstar_mean(&sol, spectrum);
        let rhs = sol.im_m / (sol.im_m + z.im);
        worst = worst.max((lhs - rhs).abs());
    }
    checks.push(VerifyCheck {
        name: "resolvent_second_moment_identity",
        max_err: worst,
        threshold: 1e-10,
    });

    // D = 2 block closed form against the generic construction.
    let mut worst = 0.0f64;
    for seed in 21..26u64 {
        let n = 2 + (seed as usize) % 3;
        let coupling = make_coupling(&CouplingSpec {
            n,
            kind: CouplingKind::RandomFixed { scale: 0.3, seed },
        })?;
        let spectrum = lambda_spectrum(&coupling.matrix, 2)?;
        let z = Complex64::new(rng.gen_range(-2.0..2.0), rng.gen_range(0.05..1.5));
        let sol = stieltjes(z, &spectrum)?;
        let generic = m_matrix(&sol, &spectrum);
        worst = worst.max(two_block_closed_form_gap(&coupling.matrix, z + sol.m, &generic));
    }
    checks.push(VerifyCheck {
        name: "two_block_closed_form",
        max_err: worst,
        threshold: 1e-10,
    });

    // The spectral shift vanishes without coupling.
    let zero = make_coupling(&CouplingSpec {
        n: 4,
        kind: CouplingKind::Scalar { lambda: 0.0 },
    })?;
    let uncoupled = lambda_spectrum(&zero.matrix, 2)?;
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let z = Complex64::new(rng.gen_range(-2.5..2.5), rng.gen_range(0.01..1.0));
        worst = worst.max(shift_ev(z, &uncoupled)?.abs());
    }
    checks.push(VerifyCheck {
        name: "uncoupled_shift_vanishes",
        max_err: worst,
        threshold: 1e-13,
    });

    // Pair row sums and the stability-operator norm at z₂ = z̄₁.
    let mut worst_rows = 0.0f64;
    let mut worst_norm = 0.0f64;
    for spectrum in &pool {
        let z = Complex64::new(rng.gen_range(-1.5..1.5), rng.gen_range(0.05..0.6));
        let out = loop_algebra(z, z.conj(), spectrum, None)?;
        let sol = stieltjes(z, spectrum)?;
        let expected = sol.im_m / (sol.im_m + z.im);
        let d = spectrum.d();
        for a in 0..d {
            let mut row = Complex64::new(0.0, 0.0);
            for b in 0..d {
                row += out.m_hat[(a, b)];
            }
            worst_rows = worst_rows.max((row - expected).norm());
        }
        let mut one_minus = CMatrix::identity(d);
        one_minus.axpy(Complex64::new(-1.0, 0.0), &out.m_hat);
        let lu = one_minus.lu();
        let mut inv = CMatrix::identity(d);
        lu.solve_in_place(&mut inv);
        let norm = inv.singular_values()[0];
        let want = (sol.im_m + z.im) / z.im;
        worst_norm = worst_norm.max((norm - want).abs() / want);
    }
    checks.push(VerifyCheck {
        name: "pair_row_sums",
        max_err: worst_rows,
        threshold: 1e-10,
    });
    checks.push(VerifyCheck {
        name: "pair_stability_norm",
        max_err: worst_norm,
        threshold: 1e-8,
    });

    // Semicircle regression: solver, edges, curvatures, quantiles.
    let mut worst_m = 0.0f64;
    for _ in 0..20 {
        let z = Complex64::new(rng.gen_range(-3.0..3.0), rng.gen_range(0.01..2.0));
        let sol = stieltjes(z, &uncoupled)?;
        worst_m = worst_m.max((sol.m - m_sc(z)).norm());
    }
    checks.push(VerifyCheck {
        name: "semicircle_transform",
        max_err: worst_m,
        threshold: 1e-10,
    });

    let edge = edges(&uncoupled)?;
    checks.push(VerifyCheck {
        name: "semicircle_edges",
        max_err: (edge.e_plus - 2.0).abs().max((edge.e_minus + 2.0).abs()),
        threshold: 1e-9,
    });
    checks.push(VerifyCheck {
        name: "semicircle_curvature",
        max_err: (edge.gamma_plus - 1.0).abs().max((edge.gamma_minus - 1.0).abs()),
        threshold: 1e-3,
    });

    let table = quantiles(&uncoupled, &edge)?;
    let dim = table.gamma.len();
    let mut worst_q = 0.0f64;
    for k in 1..=dim {
        let analytic = semicircle_quantile((k as f64 - 0.5) / dim as f64)?;
        worst_q = worst_q.max((table.gamma(k) - analytic).abs());
    }
    checks.push(VerifyCheck {
        name: "semicircle_quantiles",
        max_err: worst_q,
        threshold: 1e-8,
    });

    // Report.
    let mut all_pass = true;
    let mut rows = Vec::new();
    for check in &checks {
        let ok = check.pass();
        all_pass &= ok;
        println!(
            "{} {:35} max_err = {:.3e}  threshold = {:.1e}",
            if ok { "PASS" } else { "FAIL" },
            check.name,
            check.max_err,
            check.threshold
        );
        rows.push(json!({
            "name": check.name,
            "max_err": check.max_err,
            "threshold": check.threshold,
            "pass": ok,
        }));
    }
    write_json(
        &config.output.directory.join("verify.json"),
        &json!({
            "schema_version": SCHEMA_VERSION,
            "checks": rows,
            "all_pass": all_pass,
        }),
    )?;
    println!(
        "verify: {}",
        if all_pass {
            "all identities hold"
        } else {
            "FAILURES above"
        }
    );
    Ok(all_pass)
}

/// Worst entrywise gap between the generic `M` and the two-block closed form
///   M₁₁ = w(AA* − w²)⁻¹, M₁₂ = A(A*A − w²)⁻¹ = (AA* − w²)⁻¹A,
///   M₂₁ = A*(AA* − w²)⁻¹, M₂₂ = w(A*A − w²)⁻¹.
fn two_block_closed_form_gap(a: &CMatrix, w: Complex64, generic: &CMatrix) -> f64 {
    let n = a.rows();
    let w2 = w * w;
    let shifted = |base: &CMatrix| {
        let mut s = base.clone();
        let mut eye = CMatrix::identity(n);
        eye.scale(w2);
        s.axpy(Complex64::new(-1.0, 0.0), &eye);
        s.lu()
    };
    let lu_aas = shifted(&a.mul_adjoint(a));
    let lu_asa = shifted(&a.adjoint_mul(a));

    let mut m11 = CMatrix::identity(n);
    m11.scale(w);
    lu_aas.solve_in_place(&mut m11);
    let mut m12 = a.clone();
    lu_aas.solve_in_place(&mut m12);
    let mut m21 = a.adjoint();
    lu_asa.solve_in_place(&mut m21);
    let mut m22 = CMatrix::identity(n);
    m22.scale(w);
    lu_asa.solve_in_place(&mut m22);

    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            worst = worst
                .max((generic[(i, j)] - m11[(i, j)]).norm())
                .max((generic[(i, j + n)] - m12[(i, j)]).norm())
                .max((generic[(i + n, j)] - m21[(i, j)]).norm())
                .max((generic[(i + n, j + n)] - m22[(i, j)]).norm());
        }
    }
    worst
}

fn describe(paths: &[std::path::PathBuf]) -> String {
    let mut out = String::new();
    for (i, p) in paths.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        let _ = write!(out, "{}", file_name(p));
    }
    out
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_else(|| p.display().to_string())
}
