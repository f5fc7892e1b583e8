use std::path::Path;

use dcstop_core::cost::CostSpec;
use dcstop_core::lattice::LatticeSpec;
use dcstop_core::stability::Valuer;
use dcstop_core::Measure;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub lattice: LatticeSpec,
    pub cost: CostSpec,
    pub measure: Measure,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub oracle: OracleSection,
    #[serde(default)]
    pub compare: CompareSection,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub stability: StabilitySection,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "default_resolution")]
    pub resolution: u32,
    #[serde(default)]
    pub check_scaling: bool,
}

fn default_resolution() -> u32 {
    40
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            resolution: default_resolution(),
            check_scaling: false,
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    #[serde(default)]
    pub exact: bool,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

fn default_tolerance() -> f64 {
    1e-3
}

impl Default for CompareSection {
    fn default() -> Self {
        Self {
            tolerance: default_tolerance(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelSource {
    #[default]
    Solver,
    Oracle,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default)]
    pub kernel: KernelSource,
}

fn default_paths() -> usize {
    100_000
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            paths: default_paths(),
            kernel: KernelSource::Solver,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilitySection {
    #[serde(default = "default_valuer")]
    pub valuer: Valuer,
    /// Explicit grids, coarse to fine; dyadic grids when absent.
    #[serde(default)]
    pub grids: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_levels")]
    pub levels: u32,
    #[serde(default)]
    pub concavity: Option<ConcavitySection>,
}

fn default_valuer() -> Valuer {
    Valuer::Oracle
}

fn default_levels() -> u32 {
    2
}

impl Default for StabilitySection {
    fn default() -> Self {
        Self {
            valuer: default_valuer(),
            grids: None,
            levels: default_levels(),
            concavity: None,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConcavitySection {
    pub other: Measure,
    /// Rationals written `p/q`.
    pub lambdas: Vec<String>,
}

/// A parsed config with the SHA-256 of its bytes.
pub struct Loaded {
    pub config: Config,
    pub digest: String,
}

pub fn load(path: &Path) -> Result<Loaded, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    let digest = hex::encode(Sha256::digest(&bytes));
    let de = &mut serde_json::Deserializer::from_slice(&bytes);
    let config: Config = serde_path_to_error::deserialize(de).map_err(|e| {
        let at = match e.path().to_string() {
            p if p == "." => "(root)".to_string(),
            p => p,
        };
        CliError::Validation(format!("config error at `{at}`: {}", e.inner()))
    })?;
    Ok(Loaded { config, digest })
}
