//! Command-line entry points: reproducible batch simulation and the
//! verification suites, driven by a JSON config file.
//!
//! Exit codes: 0 success, 1 verification-check failure (report still
//! written), 2 config error, 3 simulation hit a cap (partial outputs
//! written).

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::{FileConfig, SuiteParams};
use crate::ctmc::exact_base_moment;
use crate::kingman::{density_concentration_test, pairwise_limit_test, triple_merger_test};
use crate::moments::{
    check_martingale, estimate_direct, estimate_spinal_base, recursion_check, FunctionalSpec,
    GenealogyFunctional, MomentEstimate, PsiWeight, TimeWeight, DEFAULT_FK_EXPONENT_BOUND,
};
use crate::offspring::check_assumptions;
use crate::simulate::{run_forward, run_spine, RunStatus, SimConfig};
use crate::{Error, Result};

#[derive(Parser)]
#[command(
    name = "ddbranch",
    about = "Simulation and verification of density-dependent branching genealogies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one population simulation and write its outputs.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (scheduling only; results never depend on it).
        #[arg(long)]
        threads: Option<usize>,
        /// Also dump the full forest arena as CSV.
        #[arg(long)]
        dump_forest: bool,
    },
    /// Run a verification suite and write a pass/fail report.
    Verify {
        #[arg(long, value_enum)]
        suite: Suite,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Override the suite's Monte Carlo replicate count.
        #[arg(long)]
        reps: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
    },
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum Suite {
    Martingale,
    BaseCase,
    Recursion,
    Kingman,
    Density,
}

impl Suite {
    fn name(&self) -> &'static str {
        match self {
            Suite::Martingale => "martingale",
            Suite::BaseCase => "base-case",
            Suite::Recursion => "recursion",
            Suite::Kingman => "kingman",
            Suite::Density => "density",
        }
    }
}

/// One verification check: `pass` iff `value <= tolerance`.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CheckRecord {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckRecord {
    fn new(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        let pass = value <= tolerance;
        CheckRecord {
            name: name.into(),
            value,
            tolerance,
            pass,
        }
    }
}

#[derive(Debug, serde::Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub seed: u64,
    pub config_hash: String,
    pub checks: Vec<CheckRecord>,
    pub details: serde_json::Value,
}

/// Moment-estimate record for the JSON output streams.
#[derive(Debug, serde::Serialize)]
struct EstimateRecord {
    estimator: String,
    k: u64,
    t: f64,
    #[serde(rename = "K")]
    capacity: f64,
    beta: f64,
    value: f64,
    se: f64,
    reps: u64,
    seed: u64,
}

impl EstimateRecord {
    fn new(est: &MomentEstimate, k: u64, t: f64, cfg: &SimConfig) -> Self {
        EstimateRecord {
            estimator: est.estimator.clone(),
            k,
            t,
            capacity: cfg.capacity,
            beta: cfg.beta,
            value: est.value,
            se: est.std_error,
            reps: est.replicates,
            seed: cfg.seed,
        }
    }
}

/// Entry point used by the binary; returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version with its own formatting
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match cli.command {
        Command::Simulate {
            config,
            out,
            seed,
            threads,
            dump_forest,
        } => with_pool(threads, || {
            simulate_command(&config, &out, seed, dump_forest)
        }),
        Command::Verify {
            suite,
            config,
            out,
            seed,
            reps,
            threads,
        } => with_pool(threads, || verify_command(suite, &config, &out, seed, reps)),
    }
}

fn with_pool<F: FnOnce() -> i32 + Send>(threads: Option<usize>, f: F) -> i32 {
    match threads {
        None => f(),
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t.max(1))
                .build()
                .expect("thread pool");
            pool.install(f)
        }
    }
}

fn load(config_path: &Path, seed_override: Option<u64>) -> Result<(FileConfig, SimConfig)> {
    let mut file = FileConfig::from_path(config_path)?;
    if let Some(seed) = seed_override {
        file.seed = Some(seed);
    }
    let base = config_path.parent().unwrap_or(Path::new("."));
    let sim = file.build_sim(base)?;
    Ok((file, sim))
}

fn exit_code(err: &Error) -> i32 {
    // anything that is not an explicit check failure is a config problem
    let _ = err;
    2
}

fn simulate_command(config: &Path, out: &Path, seed: Option<u64>, dump_forest: bool) -> i32 {
    match simulate_inner(config, out, seed, dump_forest) {
        Ok(status) => match status {
            RunStatus::Completed => 0,
            _ => 3,
        },
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[derive(serde::Serialize)]
struct SimMetadata {
    seed: u64,
    config_hash: String,
    status: RunStatus,
    end_time: f64,
    end_population: u64,
    n_events: u64,
    pop_min: u64,
    pop_max: u64,
    growth_integral: f64,
    effective_config: SimConfig,
    assumptions: crate::offspring::AssumptionsReport,
}

fn simulate_inner(
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    dump_forest: bool,
) -> Result<RunStatus> {
    let (file, cfg) = load(config, seed)?;
    if file.t_max.is_none() {
        return Err(Error::Config("simulate needs \"t_max\"".into()));
    }
    std::fs::create_dir_all(out)?;
    let assumptions = check_assumptions(&cfg.law, &cfg.rate, (0.5, 1.5), 1e-6)?;
    for warning in assumptions.failures() {
        eprintln!("warning: {warning}");
    }
    let mut rng = crate::stats::random_stream(cfg.seed, 0);
    let (traj, forest) = if cfg.spines > 0 {
        let run = run_spine(&cfg, &mut rng)?;
        (run.trajectory, run.forest)
    } else {
        run_forward(&cfg, &mut rng)?
    };
    let mut traj_file = std::fs::File::create(out.join("trajectory.csv"))?;
    traj.to_csv(&mut traj_file)?;
    if dump_forest {
        let mut forest_file = std::fs::File::create(out.join("forest.csv"))?;
        forest.dump_csv(&mut forest_file)?;
    }
    let meta = SimMetadata {
        seed: cfg.seed,
        config_hash: file.hash(),
        status: traj.status,
        end_time: traj.end_time,
        end_population: traj.end_pop,
        n_events: traj.n_events,
        pop_min: traj.pop_min,
        pop_max: traj.pop_max,
        growth_integral: traj.fk_unit,
        effective_config: cfg.clone(),
        assumptions,
    };
    std::fs::write(
        out.join("metadata.json"),
        serde_json::to_string_pretty(&meta)? + "\n",
    )?;
    println!(
        "simulate: status {:?}, {} events, final population {}",
        traj.status, traj.n_events, traj.end_pop
    );
    Ok(traj.status)
}

fn verify_command(
    suite: Suite,
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    reps: Option<u64>,
) -> i32 {
    match verify_inner(suite, config, out, seed, reps) {
        Ok(all_pass) => {
            if all_pass {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn verify_inner(
    suite: Suite,
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    reps_override: Option<u64>,
) -> Result<bool> {
    let (file, cfg) = load(config, seed)?;
    let mut params = file.suite_params();
    if let Some(reps) = reps_override {
        params.reps = Some(reps);
        params.n_runs = Some(reps);
    }
    std::fs::create_dir_all(out)?;
    let (checks, details) = match suite {
        Suite::Martingale => martingale_suite(&cfg, &params, out)?,
        Suite::BaseCase => base_case_suite(&cfg, &params, out)?,
        Suite::Recursion => recursion_suite(&cfg, &params)?,
        Suite::Kingman => kingman_suite(&cfg, &params, out)?,
        Suite::Density => density_suite(&cfg, &params)?,
    };
    let report = SuiteReport {
        suite: suite.name().to_string(),
        seed: cfg.seed,
        config_hash: file.hash(),
        checks,
        details,
    };
    for check in &report.checks {
        println!(
            "{} {}: {:.6e} <= {:.6e}",
            if check.pass { "PASS" } else { "FAIL" },
            check.name,
            check.value,
            check.tolerance
        );
    }
    std::fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    Ok(report.checks.iter().all(|c| c.pass))
}

/// Distinct stream-salt bases per suite cell (shifted away from the
/// library estimator salts).
fn cell_salt(base: u64, cell: u64) -> u64 {
    (base << 10) | cell
}

/// Summary table of estimate records next to the JSON report.
fn write_estimates_csv(out: &Path, records: &[EstimateRecord]) -> Result<()> {
    let mut text = String::from("estimator,k,t,K,beta,value,se,reps,seed\n");
    for r in records {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.estimator, r.k, r.t, r.capacity, r.beta, r.value, r.se, r.reps, r.seed
        ));
    }
    std::fs::write(out.join("estimates.csv"), text)?;
    Ok(())
}

fn martingale_suite(
    cfg: &SimConfig,
    params: &SuiteParams,
    out: &Path,
) -> Result<(Vec<CheckRecord>, serde_json::Value)> {
    let ks = params.ks.clone().unwrap_or_else(|| vec![1, 2, 3]);
    let times = params.times.clone().unwrap_or_else(|| vec![0.5, 1.0]);
    let reps = params.reps.unwrap_or(100_000);
    let mut checks = Vec::new();
    let mut records = Vec::new();
    for (cell, (&k, &t)) in ks
        .iter()
        .flat_map(|k| times.iter().map(move |t| (k, t)))
        .enumerate()
    {
        let est = check_martingale(cfg, k, t, reps, cell_salt(3, cell as u64))?;
        checks.push(CheckRecord::new(
            format!("martingale-k{k}-t{t}"),
            (est.value - 1.0).abs(),
            3.0 * est.std_error,
        ));
        records.push(EstimateRecord::new(&est, k, t, cfg));
    }
    write_estimates_csv(out, &records)?;
    Ok((checks, serde_json::to_value(records)?))
}

fn base_case_suite(
    cfg: &SimConfig,
    params: &SuiteParams,
    out: &Path,
) -> Result<(Vec<CheckRecord>, serde_json::Value)> {
    let ks = params.ks.clone().unwrap_or_else(|| vec![1, 2]);
    let times = params.times.clone().unwrap_or_else(|| vec![0.5, 1.0]);
    let reps = params.reps.unwrap_or(50_000);
    let mut checks = Vec::new();
    let mut records = Vec::new();
    for (cell, (&k, &t)) in ks
        .iter()
        .flat_map(|k| times.iter().map(move |t| (k, t)))
        .enumerate()
    {
        let spec = FunctionalSpec {
            phi: GenealogyFunctional::NoMerger,
            psi: PsiWeight::One,
        };
        let direct = estimate_direct(cfg, k as usize, t, &spec, reps, cell_salt(1, cell as u64))?;
        let spinal = estimate_spinal_base(
            cfg,
            k,
            t,
            &PsiWeight::One,
            reps,
            cell_salt(2, cell as u64),
            DEFAULT_FK_EXPONENT_BOUND,
        )?;
        let oracle = exact_base_moment(cfg, k, t, |_| 1.0)?;
        let pairs = [
            ("direct-vs-spinal", direct.value, spinal.value, {
                (direct.std_error.powi(2) + spinal.std_error.powi(2)).sqrt()
            }),
            ("direct-vs-oracle", direct.value, oracle, direct.std_error),
            ("spinal-vs-oracle", spinal.value, oracle, spinal.std_error),
        ];
        for (what, a, b, se) in pairs {
            checks.push(CheckRecord::new(
                format!("base-{what}-k{k}-t{t}"),
                (a - b).abs(),
                3.0 * se + 1e-8,
            ));
        }
        records.push(EstimateRecord::new(&direct, k, t, cfg));
        records.push(EstimateRecord::new(&spinal, k, t, cfg));
        records.push(EstimateRecord {
            estimator: "oracle".into(),
            k,
            t,
            capacity: cfg.capacity,
            beta: cfg.beta,
            value: oracle,
            se: 0.0,
            reps: 0,
            seed: cfg.seed,
        });
    }
    write_estimates_csv(out, &records)?;
    Ok((checks, serde_json::to_value(records)?))
}

fn recursion_suite(
    cfg: &SimConfig,
    params: &SuiteParams,
) -> Result<(Vec<CheckRecord>, serde_json::Value)> {
    let t = params
        .times
        .as_ref()
        .and_then(|v| v.first().copied())
        .unwrap_or(1.0);
    let phi1 = params.phi1.unwrap_or(TimeWeight::One);
    let panels = params.panels.unwrap_or(64);
    let reps = params.reps.unwrap_or(100_000);
    let mut check = recursion_check(cfg, t, &phi1, &PsiWeight::One, panels, reps)?;
    let mut name = format!("recursion-k2-d2-t{t}");
    if params.negative_control.unwrap_or(false) {
        // corrupt the kernel constant: the identity must now fail
        check.rhs *= 1.25;
        name.push_str("-negative-control");
    }
    let record = CheckRecord::new(
        name,
        (check.lhs.value - check.rhs).abs(),
        3.0 * check.lhs.std_error + check.rhs_error,
    );
    let details = serde_json::to_value(&check)?;
    Ok((vec![record], details))
}

/// Rescale a validated config to capacity `k_cap`, preserving the initial
/// density and re-deriving the caps.
fn rescale_capacity(cfg: &SimConfig, k_cap: f64) -> Result<SimConfig> {
    let ratio = cfg.initial as f64 / cfg.capacity;
    let mut scaled = cfg.clone();
    scaled.capacity = k_cap;
    scaled.initial = (ratio * k_cap).round() as u64;
    scaled.max_pop = 0;
    scaled.prune_every = 0;
    scaled.validated()
}

fn kingman_suite(
    cfg: &SimConfig,
    params: &SuiteParams,
    out: &Path,
) -> Result<(Vec<CheckRecord>, serde_json::Value)> {
    let horizon = params.horizon.unwrap_or(2.0);
    let n_runs = params.n_runs.unwrap_or(2000);
    let capacities = params
        .capacities
        .clone()
        .unwrap_or_else(|| vec![cfg.capacity]);
    let mut checks = Vec::new();
    let mut summaries = Vec::new();
    let mut ks_stats = Vec::new();
    for &k_cap in &capacities {
        let scaled = rescale_capacity(cfg, k_cap)?;
        let report = pairwise_limit_test(&scaled, horizon, n_runs)?;
        let mut samples_file =
            std::fs::File::create(out.join(format!("coalescence_samples_K{k_cap}.csv")))?;
        report.samples_csv(&mut samples_file)?;
        checks.push(CheckRecord::new(
            format!("kingman-ks-K{k_cap}"),
            report.ks_statistic,
            report.ks_critical_1pct,
        ));
        checks.push(CheckRecord::new(
            format!("kingman-censoring-K{k_cap}"),
            (report.censored_fraction - report.expected_censored).abs(),
            3.0 * report.censored_se,
        ));
        ks_stats.push(report.ks_statistic);
        summaries.push(serde_json::json!({
            "capacity": report.capacity,
            "horizon": report.horizon,
            "rate": report.rate,
            "n_runs": report.n_runs,
            "n_small": report.n_small,
            "n_censored": report.n_censored,
            "censored_fraction": report.censored_fraction,
            "expected_censored": report.expected_censored,
            "ks_statistic": report.ks_statistic,
            "ks_critical_1pct": report.ks_critical_1pct,
        }));
    }
    if ks_stats.len() > 1 {
        checks.push(CheckRecord::new(
            "kingman-ks-trend",
            ks_stats.last().unwrap() - ks_stats.first().unwrap(),
            0.0,
        ));
    }
    Ok((checks, serde_json::Value::Array(summaries)))
}

fn density_suite(
    cfg: &SimConfig,
    params: &SuiteParams,
) -> Result<(Vec<CheckRecord>, serde_json::Value)> {
    let horizon = params.horizon.unwrap_or(2.0);
    let n_runs = params.n_runs.unwrap_or(500);
    let gamma = params.gamma.unwrap_or(0.2);
    let threshold = params.max_probability.unwrap_or(0.02);
    let capacities = params
        .capacities
        .clone()
        .unwrap_or_else(|| vec![cfg.capacity]);
    let mut checks = Vec::new();
    let mut reports = Vec::new();
    let mut probs = Vec::new();
    for &k_cap in &capacities {
        let scaled = rescale_capacity(cfg, k_cap)?;
        let report = density_concentration_test(&scaled, horizon, n_runs, gamma)?;
        probs.push(report.exceed_probability);
        reports.push(serde_json::to_value(&report)?);
    }
    checks.push(CheckRecord::new(
        format!("density-exit-K{}", capacities.last().unwrap()),
        *probs.last().unwrap(),
        threshold,
    ));
    if probs.len() > 1 {
        // strictly smaller at the largest capacity than at the smallest
        let margin = probs.last().unwrap() - probs.first().unwrap();
        checks.push(CheckRecord::new("density-trend", margin, -f64::EPSILON));
    }
    Ok((checks, serde_json::Value::Array(reports)))
}

/// Triple-merger trend over capacities; used by the acceptance suite and
/// available to library callers (not exposed as a CLI suite of its own:
/// it shares the kingman config surface).
pub fn triple_trend(
    cfg: &SimConfig,
    horizon: f64,
    n_runs_per_capacity: &[(f64, u64)],
) -> Result<Vec<crate::kingman::TripleMergerReport>> {
    n_runs_per_capacity
        .iter()
        .map(|&(k_cap, runs)| {
            let scaled = rescale_capacity(cfg, k_cap)?;
            triple_merger_test(&scaled, horizon, runs)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_config(dir: &Path, seed: Option<u64>) -> PathBuf {
        let path = dir.join("config.json");
        let seed_line = seed.map(|s| format!("\"seed\": {s},")).unwrap_or_default();
        std::fs::write(
            &path,
            format!(
                r#"{{
                    "capacity": 15.0,
                    "initial": 15,
                    "law": {{"family": "binary-logistic"}},
                    "rate": {{"family": "constant", "params": [1.0]}},
                    {seed_line}
                    "t_max": 1.0,
                    "suite": {{"reps": 2000, "n_runs": 60, "ks": [1], "times": [0.5]}}
                }}"#
            ),
        )
        .unwrap();
        path
    }

    #[test]
    fn simulate_writes_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let config = write_config(dir.path(), Some(5));
        let out = dir.path().join("out");
        let code = run([
            "ddbranch",
            "simulate",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--dump-forest",
        ]);
        assert_eq!(code, 0);
        assert!(out.join("trajectory.csv").exists());
        assert!(out.join("metadata.json").exists());
        assert!(out.join("forest.csv").exists());
        let meta: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("metadata.json")).unwrap())
                .unwrap();
        assert_eq!(meta["status"], "completed");
        assert_eq!(meta["seed"], 5);
    }

    #[test]
    fn missing_seed_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let config = write_config(dir.path(), None);
        let out = dir.path().join("out");
        let code = run([
            "ddbranch",
            "simulate",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 2);
    }

    #[test]
    fn spine_exceeding_population_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(
            &path,
            r#"{
                "capacity": 10.0, "initial": 2, "spines": 5, "seed": 1, "t_max": 1.0,
                "law": {"family": "binary-logistic"},
                "rate": {"family": "constant", "params": [1.0]}
            }"#,
        )
        .unwrap();
        let code = run([
            "ddbranch",
            "simulate",
            "--config",
            path.to_str().unwrap(),
            "--out",
            dir.path().join("out").to_str().unwrap(),
        ]);
        assert_eq!(code, 2);
    }

    #[test]
    fn population_cap_exit_code() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        // strongly supercritical law: always 2 offspring via table
        let law_csv = dir.path().join("law.csv");
        std::fs::write(&law_csv, "z,n,p\n0.5,2,1.0\n2.0,2,1.0\n").unwrap();
        std::fs::write(
            &path,
            r#"{
                "capacity": 10.0, "initial": 10, "seed": 3, "t_max": 50.0, "max_pop": 40,
                "law": {"family": "table", "csv": "law.csv"},
                "rate": {"family": "constant", "params": [1.0]}
            }"#,
        )
        .unwrap();
        let out = dir.path().join("out");
        let code = run([
            "ddbranch",
            "simulate",
            "--config",
            path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 3);
        let meta: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("metadata.json")).unwrap())
                .unwrap();
        assert_eq!(meta["status"], "capped-population");
    }

    #[test]
    fn verify_martingale_small() {
        let dir = tempfile::tempdir().unwrap();
        let config = write_config(dir.path(), Some(7));
        let out = dir.path().join("out");
        let code = run([
            "ddbranch",
            "verify",
            "--suite",
            "martingale",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap())
                .unwrap();
        assert_eq!(report["suite"], "martingale");
        assert!(report["checks"]
            .as_array()
            .unwrap()
            .iter()
            .all(|c| c["pass"] == true));
    }

    #[test]
    fn verify_recursion_negative_control_fails() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(
            &path,
            r#"{
                "capacity": 8.0, "initial": 8, "seed": 11, "t_max": 1.0,
                "law": {"family": "binary-logistic"},
                "rate": {"family": "constant", "params": [1.0]},
                "suite": {"reps": 4000, "times": [0.6], "panels": 16, "negative_control": true}
            }"#,
        )
        .unwrap();
        let out = dir.path().join("out");
        let code = run([
            "ddbranch",
            "verify",
            "--suite",
            "recursion",
            "--config",
            path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 1);
        assert!(out.join("report.json").exists());
    }
}
