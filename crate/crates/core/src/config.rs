//! Config-file schema: JSON descriptions of offspring laws, branch rates
//! and run parameters, plus the CSV loader for tabulated laws.
//!
//! Law grammar: `{"family": "poisson-exp", "params": [1.0]}`. Table laws
//! point at a CSV with header `z,n,p` via `{"family": "table", "csv":
//! "law.csv"}`. Rates use the same shape with families `constant`
//! (params `[q]`), `affine` (params `[base, slope]`) and `table` (params
//! flattened as `[z1, q1, z2, q2, …]`).

use std::path::Path;

use sha2::Digest;

use crate::moments::TimeWeight;
use crate::offspring::{BranchRate, OffspringLaw, TableLaw};
use crate::simulate::SimConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LawSpec {
    pub family: String,
    #[serde(default)]
    pub params: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<String>,
}

impl LawSpec {
    pub fn build(&self, base_dir: &Path) -> Result<OffspringLaw> {
        let one_param = |what: &str| -> Result<f64> {
            if self.params.len() != 1 {
                return Err(Error::Config(format!(
                    "{what} law takes exactly one parameter, got {:?}",
                    self.params
                )));
            }
            Ok(self.params[0])
        };
        match self.family.as_str() {
            "binary-logistic" => Ok(OffspringLaw::binary_logistic()),
            "poisson-exp" => OffspringLaw::poisson_exp(one_param("poisson-exp")?),
            "geometric-mean" => OffspringLaw::geometric_mean(one_param("geometric-mean")?),
            "table" => {
                let rel = self
                    .csv
                    .as_deref()
                    .ok_or_else(|| Error::Config("table law needs a \"csv\" path".into()))?;
                load_table_law(&base_dir.join(rel))
            }
            other => Err(Error::Config(format!("unknown offspring family {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RateSpec {
    pub family: String,
    #[serde(default)]
    pub params: Vec<f64>,
}

impl RateSpec {
    pub fn build(&self) -> Result<BranchRate> {
        match self.family.as_str() {
            "constant" => {
                if self.params.len() != 1 {
                    return Err(Error::Config("constant rate takes [q]".into()));
                }
                BranchRate::constant(self.params[0])
            }
            "affine" => {
                if self.params.len() != 2 {
                    return Err(Error::Config("affine rate takes [base, slope]".into()));
                }
                BranchRate::affine(self.params[0], self.params[1])
            }
            "table" => {
                if self.params.len() < 4 || self.params.len() % 2 != 0 {
                    return Err(Error::Config(
                        "table rate takes flattened [z1, q1, z2, q2, …]".into(),
                    ));
                }
                let (zs, qs): (Vec<f64>, Vec<f64>) =
                    self.params.chunks_exact(2).map(|c| (c[0], c[1])).unzip();
                BranchRate::table(zs, qs)
            }
            other => Err(Error::Config(format!("unknown rate family {other:?}"))),
        }
    }
}

/// Load a tabulated offspring law from CSV rows `z,n,p`.
pub fn load_table_law(path: &Path) -> Result<OffspringLaw> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["z", "n", "p"] {
        return Err(Error::Config(format!(
            "table law CSV must have header z,n,p, got {headers:?}"
        )));
    }
    let mut cells: Vec<(f64, u64, f64)> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let parse = |i: usize| -> Result<f64> {
            record
                .get(i)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::Config(format!("bad CSV row {record:?}")))
        };
        cells.push((parse(0)?, parse(1)? as u64, parse(2)?));
    }
    if cells.is_empty() {
        return Err(Error::Config("table law CSV has no rows".into()));
    }
    let mut zs: Vec<f64> = cells.iter().map(|c| c.0).collect();
    zs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    zs.dedup();
    let width = cells.iter().map(|c| c.1).max().unwrap() as usize + 1;
    let mut rows = vec![vec![0.0; width]; zs.len()];
    for (z, n, p) in cells {
        let zi = zs.partition_point(|&g| g < z);
        rows[zi][n as usize] += p;
    }
    Ok(OffspringLaw::Table(TableLaw::new(zs, rows)?))
}

/// Parameters of the verification suites; each suite reads the subset it
/// needs and falls back to its documented defaults.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteParams {
    /// Monte Carlo replicates per estimator cell.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reps: Option<u64>,
    /// Simulation runs per capacity for the limit tests.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_runs: Option<u64>,
    /// Spine counts to test.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ks: Option<Vec<u64>>,
    /// Horizons for the moment suites.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub times: Option<Vec<f64>>,
    /// Macroscopic horizon T for the limit suites.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    /// Capacities for convergence trends; the config's own capacity is
    /// used when absent. Initial populations scale along.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacities: Option<Vec<f64>>,
    /// Exceedance probability threshold for the density suite.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_probability: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub panels: Option<usize>,
    /// First-merger time weight for the recursion suite.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi1: Option<TimeWeight>,
    /// Negative-control fixture: corrupt the recursion kernel constant so
    /// the suite must fail (exercises the failure path).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative_control: Option<bool>,
}

/// Top-level config file.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub capacity: f64,
    pub initial: u64,
    pub law: LawSpec,
    pub rate: RateSpec,
    #[serde(default)]
    pub spines: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    /// Required: runs without an explicit seed are not reproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub max_events: u64,
    #[serde(default)]
    pub max_pop: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_path: Option<bool>,
    #[serde(default)]
    pub prune_every: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suite: Option<SuiteParams>,
}

impl FileConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// SHA-256 of the canonical serialized config.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        let mut hasher = sha2::Sha256::new();
        hasher.update(canon.as_bytes());
        hex_string(&hasher.finalize())
    }

    /// Materialize the simulation config (laws built, defaults resolved).
    pub fn build_sim(&self, base_dir: &Path) -> Result<SimConfig> {
        let seed = self
            .seed
            .ok_or_else(|| Error::Config("missing required field \"seed\"".into()))?;
        let mut cfg = SimConfig::new(
            self.capacity,
            self.initial,
            self.law.build(base_dir)?,
            self.rate.build()?,
        );
        cfg.spines = self.spines;
        cfg.t_max = self.t_max.unwrap_or(1.0);
        cfg.beta = self.beta.unwrap_or(0.5);
        cfg.seed = seed;
        cfg.max_events = self.max_events;
        cfg.max_pop = self.max_pop;
        cfg.record_path = self.record_path.unwrap_or(true);
        cfg.prune_every = self.prune_every;
        cfg.validated()
    }

    pub fn suite_params(&self) -> SuiteParams {
        self.suite.clone().unwrap_or_default()
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
