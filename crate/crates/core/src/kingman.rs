//! End-to-end statistical verification that rescaled sampled genealogies
//! approach the Kingman coalescent with rate `q(1)·m₂(1)` as the carrying
//! capacity grows: pairwise coalescence-time law, binary-merger support
//! for triples, and concentration of the population density.
//!
//! Each run simulates the population to macroscopic time `K·T`, samples
//! uniformly without replacement from the survivors, and reads
//! coalescence times off the genealogy, rescaled by `1/K` and censored at
//! `T`. Runs are replicate-parallel with per-run streams; all counters
//! are reduced in run order, so reports are reproducible bit for bit.
//!
//! These are finite-dimensional checks (merger times and merger
//! structure), deliberately weaker than convergence of the whole
//! partition path in path space; that gap is the price of a concrete
//! numerical gate.

use rand::Rng;

use crate::coalescent::extract;
use crate::simulate::{run_forward, RunStatus, SimConfig};
use crate::stats::{ks_critical_value, ks_statistic, parallel_map, random_stream};
use crate::{Error, Result};

pub const SALT_PAIRWISE: u64 = 8;
pub const SALT_TRIPLE: u64 = 9;
pub const SALT_DENSITY: u64 = 10;
pub const SALT_KS_NULL: u64 = 11;

const KS_NULL_REPS: usize = 1000;

/// CDF of the exponential of rate `r` conditioned on `[0, horizon]`.
pub fn truncated_exp_cdf(r: f64, horizon: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= horizon {
        return 1.0;
    }
    (1.0 - (-r * x).exp()) / (1.0 - (-r * horizon).exp())
}

fn coalescent_rate(cfg: &SimConfig) -> Result<f64> {
    Ok(cfg.rate.rate(1.0) * cfg.law.factorial_moment(1.0, 2, 0.0)?)
}

fn scaled_config(config: &SimConfig, horizon: f64) -> Result<SimConfig> {
    let mut cfg = config.clone();
    cfg.spines = 0;
    cfg.t_max = cfg.capacity * horizon;
    cfg.record_path = false;
    cfg.validated()
}

/// One rescaled pairwise coalescence observation.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct PairSample {
    pub run: u64,
    /// coalescence time over `K`, capped at the horizon
    pub tau: f64,
    pub censored: bool,
}

/// Report of the pairwise (k = 2) convergence test at one capacity.
#[derive(Debug, Clone, serde::Serialize)]
pub struct PairwiseLimitReport {
    pub capacity: f64,
    pub horizon: f64,
    pub rate: f64,
    pub n_runs: u64,
    /// runs that ended with fewer than 2 alive individuals
    pub n_small: u64,
    pub n_censored: u64,
    pub censored_fraction: f64,
    /// no-merger probability of the limit law, `e^{-rT}`
    pub expected_censored: f64,
    pub censored_se: f64,
    /// KS distance of uncensored times to the truncated exponential
    pub ks_statistic: f64,
    /// simulated 1% critical value at the realized sample size
    pub ks_critical_1pct: f64,
    pub samples: Vec<PairSample>,
}

impl PairwiseLimitReport {
    /// CSV rows `run,tau,censored`.
    pub fn samples_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "run,tau,censored")?;
        for s in &self.samples {
            writeln!(w, "{},{},{}", s.run, s.tau, s.censored)?;
        }
        Ok(())
    }
}

/// Simulate to `K·horizon`, sample two distinct survivors per run, and
/// test the rescaled coalescence times against the truncated exponential
/// of rate `q(1)·m₂(1)`.
pub fn pairwise_limit_test(
    config: &SimConfig,
    horizon: f64,
    n_runs: u64,
) -> Result<PairwiseLimitReport> {
    let cfg = scaled_config(config, horizon)?;
    let rate = coalescent_rate(&cfg)?;
    let capacity = cfg.capacity;

    let outcomes = parallel_map(n_runs, cfg.seed, SALT_PAIRWISE, |run, rng| {
        let (traj, forest) = run_forward(&cfg, rng)?;
        if traj.status != RunStatus::Completed {
            return Err(Error::ReplicateCapped {
                rep: run,
                status: traj.status,
            });
        }
        let n = forest.alive_count();
        if n < 2 {
            return Ok(None);
        }
        let i = rng.gen_range(0..n);
        let j = {
            let j = rng.gen_range(0..n - 1);
            if j >= i {
                j + 1
            } else {
                j
            }
        };
        let (u, v) = (forest.alive_at_slot(i), forest.alive_at_slot(j));
        let d = forest.pairwise_distance(forest.now(), u, v)?;
        // swapping the sample order never changes the distance
        debug_assert_eq!(
            d.to_bits(),
            forest.pairwise_distance(forest.now(), v, u)?.to_bits()
        );
        let tau = d / capacity;
        Ok(Some(if tau < horizon {
            PairSample {
                run,
                tau,
                censored: false,
            }
        } else {
            PairSample {
                run,
                tau: horizon,
                censored: true,
            }
        }))
    })?;

    let n_small = outcomes.iter().filter(|o| o.is_none()).count() as u64;
    let samples: Vec<PairSample> = outcomes.into_iter().flatten().collect();
    let n_censored = samples.iter().filter(|s| s.censored).count() as u64;
    let uncensored: Vec<f64> = samples
        .iter()
        .filter(|s| !s.censored)
        .map(|s| s.tau)
        .collect();
    let n_obs = (samples.len() as f64).max(1.0);
    let expected_censored = (-rate * horizon).exp();
    let mut null_rng = random_stream(cfg.seed, SALT_KS_NULL << 40);
    // an entirely censored sample carries no time information; NaN makes
    // any downstream threshold check fail loudly instead of panicking
    let (ks, crit) = if uncensored.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        (
            ks_statistic(&uncensored, |x| truncated_exp_cdf(rate, horizon, x)),
            ks_critical_value(uncensored.len(), 0.01, KS_NULL_REPS, &mut null_rng),
        )
    };
    Ok(PairwiseLimitReport {
        capacity,
        horizon,
        rate,
        n_runs,
        n_small,
        n_censored,
        censored_fraction: n_censored as f64 / n_obs,
        expected_censored,
        censored_se: (expected_censored * (1.0 - expected_censored) / n_obs).sqrt(),
        ks_statistic: ks,
        ks_critical_1pct: crit,
        samples,
    })
}

/// Report of the triple-sample (k = 3) merger-structure test.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TripleMergerReport {
    pub capacity: f64,
    pub horizon: f64,
    pub rate: f64,
    pub n_runs: u64,
    pub n_small: u64,
    /// exact counts pooled over every planar-sorted triple of every run:
    /// triples whose first merger is a triple merger, and triples that
    /// merge at all within the horizon
    pub triple_first_weight: f64,
    pub merging_triples_weight: f64,
    /// pooled fraction of merging triples whose first merger is triple
    pub triple_fraction: f64,
    /// per-run sampled classification (one uniform triple per run)
    pub sampled_binary: u64,
    pub sampled_triple: u64,
    pub sampled_censored: u64,
    /// KS of sampled first-merger times against truncated Exp(3r)
    pub ks_first_merger: f64,
    pub ks_critical_1pct: f64,
    pub conditional_mean: f64,
    pub conditional_mean_target: f64,
    /// counts of the de-planarized first merging pair: {0,1}, {0,2}, {1,2}
    pub pair_counts: [u64; 3],
    pub pair_chi_square_p: f64,
}

/// Classify triple genealogies at time `K·horizon`.
///
/// The triple-merger fraction is computed exactly per forest by
/// subtree-size combinatorics over all C(alive, 3) planar-sorted triples
/// (a triple's first merger is a 3-way event iff its members descend from
/// three distinct child subtrees of one ancestor); a single uniformly
/// sampled triple per run feeds the first-merger time law and the
/// de-planarized merging-pair identity, where ties of coalescence times
/// are exact float ties through the shared ancestor.
pub fn triple_merger_test(
    config: &SimConfig,
    horizon: f64,
    n_runs: u64,
) -> Result<TripleMergerReport> {
    let cfg = scaled_config(config, horizon)?;
    let rate = coalescent_rate(&cfg)?;
    let capacity = cfg.capacity;

    struct RunOut {
        triple_first: f64,
        merging: f64,
        /// (rescaled tau, merger width, de-planarized pair)
        sampled: Option<(f64, usize, Option<(usize, usize)>)>,
        small: bool,
    }

    let outcomes = parallel_map(n_runs, cfg.seed, SALT_TRIPLE, |run, rng| {
        let (traj, forest) = run_forward(&cfg, rng)?;
        if traj.status != RunStatus::Completed {
            return Err(Error::ReplicateCapped {
                rep: run,
                status: traj.status,
            });
        }
        let n = forest.alive_count() as u64;
        if n < 3 {
            return Ok(RunOut {
                triple_first: 0.0,
                merging: 0.0,
                sampled: None,
                small: true,
            });
        }
        let triple_first: f64 = forest.merger_stats().iter().map(|s| s.triple_weight).sum();
        let all_triples = (n as f64) * ((n - 1) as f64) * ((n - 2) as f64) / 6.0;
        let never = crate::stats::elementary_symmetric(forest.subfamily_sizes(), 3);
        let merging = all_triples - never;

        let mut picks = Vec::with_capacity(3);
        while picks.len() < 3 {
            let cand = forest.alive_at_slot(rng.gen_range(0..n as usize));
            if !picks.contains(&cand) {
                picks.push(cand);
            }
        }
        forest.sort_planar(&mut picks);
        let coal = extract(&forest, forest.now(), &picks)?;
        let sampled = coal.first_merger().copied().map(|m| {
            let tau = m.tau / capacity;
            let pair = if m.width == 2 {
                coal.rescale(1.0 / capacity)
                    .deplanarize(rng)
                    .first_merger_pair()
            } else {
                None
            };
            (tau, m.width, pair)
        });
        Ok(RunOut {
            triple_first,
            merging,
            sampled,
            small: false,
        })
    })?;

    let mut triple_first_weight = 0.0;
    let mut merging_weight = 0.0;
    let mut n_small = 0u64;
    let mut sampled_binary = 0u64;
    let mut sampled_triple = 0u64;
    let mut sampled_censored = 0u64;
    let mut first_times = Vec::new();
    let mut pair_counts = [0u64; 3];
    for o in &outcomes {
        if o.small {
            n_small += 1;
            continue;
        }
        triple_first_weight += o.triple_first;
        merging_weight += o.merging;
        match &o.sampled {
            None => sampled_censored += 1,
            Some((tau, width, pair)) => {
                if *tau < horizon {
                    first_times.push(*tau);
                    if *width == 3 {
                        sampled_triple += 1;
                    } else {
                        sampled_binary += 1;
                        if let Some(p) = pair {
                            let idx = match p {
                                (0, 1) => 0,
                                (0, 2) => 1,
                                (1, 2) => 2,
                                _ => unreachable!("pair {p:?} out of range for k = 3"),
                            };
                            pair_counts[idx] += 1;
                        }
                    }
                } else {
                    sampled_censored += 1;
                }
            }
        }
    }

    let mut null_rng = random_stream(cfg.seed, (SALT_KS_NULL << 40) | 1);
    let (ks, crit) = if first_times.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        (
            ks_statistic(&first_times, |x| truncated_exp_cdf(3.0 * rate, horizon, x)),
            ks_critical_value(first_times.len(), 0.01, KS_NULL_REPS, &mut null_rng),
        )
    };
    let conditional_mean = first_times.iter().sum::<f64>() / first_times.len().max(1) as f64;
    let r3 = 3.0 * rate;
    // mean of Exp(3r) truncated to [0, T]
    let conditional_mean_target =
        1.0 / r3 - horizon * (-r3 * horizon).exp() / (1.0 - (-r3 * horizon).exp());
    let chi = crate::stats::chi_square_uniform(&pair_counts);

    Ok(TripleMergerReport {
        capacity,
        horizon,
        rate,
        n_runs,
        n_small,
        triple_first_weight,
        merging_triples_weight: merging_weight,
        triple_fraction: triple_first_weight / merging_weight.max(1.0),
        sampled_binary,
        sampled_triple,
        sampled_censored,
        ks_first_merger: ks,
        ks_critical_1pct: crit,
        conditional_mean,
        conditional_mean_target,
        pair_counts,
        pair_chi_square_p: chi.p_value,
    })
}

/// Report of the density-concentration check.
#[derive(Debug, Clone, serde::Serialize)]
pub struct DensityReport {
    pub capacity: f64,
    pub horizon: f64,
    pub gamma: f64,
    pub n_runs: u64,
    pub n_exceed: u64,
    pub exceed_probability: f64,
}

/// Empirical probability that `sup_{s ≤ KT} |Z_s/K - 1| ≥ gamma`.
pub fn density_concentration_test(
    config: &SimConfig,
    horizon: f64,
    n_runs: u64,
    gamma: f64,
) -> Result<DensityReport> {
    if !(gamma > 0.0 && gamma < 0.5) {
        return Err(Error::InvalidParameter(format!(
            "gamma must lie in (0, 0.5), got {gamma}"
        )));
    }
    let cfg = scaled_config(config, horizon)?;
    let exceeded = parallel_map(n_runs, cfg.seed, SALT_DENSITY, |run, rng| {
        let (traj, _) = run_forward(&cfg, rng)?;
        if traj.status != RunStatus::Completed {
            return Err(Error::ReplicateCapped {
                rep: run,
                status: traj.status,
            });
        }
        Ok(traj.sup_density_deviation() >= gamma)
    })?;
    let n_exceed = exceeded.iter().filter(|&&e| e).count() as u64;
    Ok(DensityReport {
        capacity: cfg.capacity,
        horizon,
        gamma,
        n_runs,
        n_exceed,
        exceed_probability: n_exceed as f64 / n_runs as f64,
    })
}
