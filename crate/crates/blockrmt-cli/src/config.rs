//! Run configuration: a single TOML file with nested sections, one section
//! per task family, plus output and parallelism settings.
//!
//! Parsing applies defaults immediately, so a loaded [`RunConfig`] is fully
//! resolved: every field has a concrete value and serializing it writes all
//! of them back out. That gives the round-trip invariant (parse → emit →
//! parse is the identity) and makes the emitted `resolved_config.toml` a
//! complete record of what a run actually used — defaulted fields included.
//!
//! Precedence for the mutable knobs: command-line flag, then environment
//! variable (`BLOCKRMT_OUT_DIR` and `BLOCKRMT_WORKERS` only — everything
//! else is config-file-only), then the file.

use blockrmt::ensemble::EnsembleConfig;
use blockrmt::model::{CouplingKind, EntryDist};
use blockrmt::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// The model every command shares: block dimension, block count, coupling
/// recipe, entry distribution, and the root seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub n: usize,
    pub d: usize,
    pub coupling: CouplingKind,
    #[serde(default = "default_dist")]
    pub dist: EntryDist,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_dist() -> EntryDist {
    EntryDist::ComplexGaussian
}

fn default_seed() -> u64 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensitySection {
    /// Number of grid points across the support.
    pub points: usize,
    /// Margin beyond each edge, as a fraction of the support width.
    pub margin: f64,
}

impl Default for DensitySection {
    fn default() -> Self {
        DensitySection {
            points: 101,
            margin: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantilesSection {
    /// 1-based eigenvalue indices to tabulate; empty means `{1, 10, DN/2}`
    /// resolved against the model at load time.
    pub k_list: Vec<usize>,
}

impl Default for QuantilesSection {
    fn default() -> Self {
        QuantilesSection { k_list: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleSection {
    pub samples: usize,
    pub track_k: Vec<usize>,
    pub with_h_eigs: bool,
    /// Also emit the unrescaled max-of-D edge reference curve for visual
    /// comparison against the rescaled one.
    pub show_unrescaled_max: bool,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        EnsembleSection {
            samples: 100,
            track_k: Vec::new(),
            with_h_eigs: false,
            show_unrescaled_max: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MobilitySection {
    pub samples: usize,
    /// Track eigenvalue indices `1..=k_max` (clamped to the spectrum size).
    pub k_max: usize,
}

impl Default for MobilitySection {
    fn default() -> Self {
        MobilitySection {
            samples: 50,
            k_max: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalLawSection {
    /// Real part of the spectral parameter.
    pub energy: f64,
    /// Probe scales η, each giving `z = energy + iη`.
    pub eta_list: Vec<f64>,
    pub samples: usize,
    /// Seed for the probe's own randomness (test vectors and contrasts).
    pub probe_seed: u64,
}

impl Default for LocalLawSection {
    fn default() -> Self {
        LocalLawSection {
            energy: 0.0,
            eta_list: vec![0.1, 0.01],
            samples: 5,
            probe_seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopSection {
    /// Eigenvalue indices to center the loop on.
    pub k_list: Vec<usize>,
    /// Exponent ε in the probe scale `η = N^{−2/3+ε} k^{−1/3}`.
    pub epsilon: f64,
    pub samples: usize,
}

impl Default for LoopSection {
    fn default() -> Self {
        LoopSection {
            k_list: vec![1, 8],
            epsilon: 0.1,
            samples: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowSection {
    /// Starting point `z₀ = (re, im)` of the characteristic.
    pub z0: [f64; 2],
    pub t_span: [f64; 2],
    pub tol: f64,
}

impl Default for FlowSection {
    fn default() -> Self {
        FlowSection {
            z0: [0.5, 0.3],
            t_span: [0.0, 0.8],
            tol: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwSection {
    pub tol: f64,
}

impl Default for TwSection {
    fn default() -> Self {
        TwSection { tol: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputSection {
    pub directory: PathBuf,
    /// Tabular formats to emit: any of "csv", "jsonl".
    pub formats: Vec<String>,
    /// Spill large per-sample eigenvalue arrays to a little-endian f64
    /// sidecar file instead of inlining them in the JSONL records.
    pub sidecar: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            directory: PathBuf::from("out"),
            formats: vec!["csv".into()],
            sidecar: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParallelismSection {
    /// Worker threads for sample-level parallelism; 0 means one per core.
    pub workers: usize,
}

impl Default for ParallelismSection {
    fn default() -> Self {
        ParallelismSection { workers: 1 }
    }
}

/// The whole run configuration. Only `[model]` is mandatory in the file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub density: DensitySection,
    #[serde(default)]
    pub quantiles: QuantilesSection,
    #[serde(default)]
    pub ensemble: EnsembleSection,
    #[serde(default)]
    pub mobility: MobilitySection,
    #[serde(default)]
    pub local_law: LocalLawSection,
    #[serde(default, rename = "loop")]
    pub loop_: LoopSection,
    #[serde(default)]
    pub flow: FlowSection,
    #[serde(default)]
    pub tw: TwSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub parallelism: ParallelismSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        // A config file that cannot be read is a configuration error (exit
        // code 2), not a solver-side I/O failure.
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut config: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.resolve();
        config.validate()?;
        Ok(config)
    }

    /// Fill the fields whose defaults depend on the model, so that the
    /// emitted config is fully explicit.
    fn resolve(&mut self) {
        let dim = self.model.n * self.model.d;
        if self.quantiles.k_list.is_empty() {
            self.quantiles.k_list = vec![1, 10.min(dim.max(1)), (dim / 2).max(1)];
        }
        self.mobility.k_max = self.mobility.k_max.min(dim).max(1);
    }

    fn validate(&self) -> Result<()> {
        if self.model.n == 0 || self.model.d == 0 {
            return Err(Error::Config("model needs n ≥ 1 and d ≥ 1".into()));
        }
        if self.density.points < 2 {
            return Err(Error::Config("density grid needs at least 2 points".into()));
        }
        for f in &self.output.formats {
            if f != "csv" && f != "jsonl" {
                return Err(Error::Config(format!("unknown output format {f:?}")));
            }
        }
        if self.output.formats.is_empty() {
            return Err(Error::Config("no output format selected".into()));
        }
        Ok(())
    }

    /// Apply the only two environment overrides, then the flag overrides.
    pub fn apply_overrides(
        &mut self,
        seed: Option<u64>,
        workers: Option<usize>,
        out: Option<PathBuf>,
        format: Option<String>,
    ) -> Result<()> {
        if let Ok(dir) = std::env::var("BLOCKRMT_OUT_DIR") {
            self.output.directory = PathBuf::from(dir);
        }
        if let Ok(w) = std::env::var("BLOCKRMT_WORKERS") {
            self.parallelism.workers = w
                .parse()
                .map_err(|_| Error::Config(format!("BLOCKRMT_WORKERS={w} is not a count")))?;
        }
        if let Some(s) = seed {
            self.model.seed = s;
        }
        if let Some(w) = workers {
            self.parallelism.workers = w;
        }
        if let Some(dir) = out {
            self.output.directory = dir;
        }
        if let Some(f) = format {
            self.output.formats = vec![f];
        }
        self.validate()
    }

    pub fn emit(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn wants(&self, format: &str) -> bool {
        self.output.formats.iter().any(|f| f == format)
    }

    /// The ensemble request implied by the `[model]` + `[ensemble]` sections.
    pub fn ensemble_config(&self) -> EnsembleConfig {
        EnsembleConfig {
            n: self.model.n,
            d: self.model.d,
            coupling: self.model.coupling.clone(),
            dist: self.model.dist,
            seed: self.model.seed,
            samples: self.ensemble.samples,
            track_k: self.ensemble.track_k.clone(),
            with_h_eigs: self.ensemble.with_h_eigs,
        }
    }
}
