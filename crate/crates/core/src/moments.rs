//! Monte Carlo estimators of the penalized planar k-moment measures and
//! their exact-identity cross checks.
//!
//! The normalized moment of a genealogy functional φ and a density
//! weight ψ is
//!
//! ```text
//! M^{k,t}(φ, ψ) = k!·e^{βZ₀/K}/(Z₀)_k ·
//!                 E[ ψ(Z_t/K)·e^{-βZ_t/K} · Σ_{v₁<…<v_k alive} φ(Π^v) ]
//! ```
//!
//! summed over planar-sorted k-samples. Three independent routes to the
//! same numbers live here and in [`crate::ctmc`]:
//!
//! - [`estimate_direct`]: forward simulation, with the φ-sum aggregated
//!   combinatorially (never by tuple enumeration),
//! - [`estimate_spinal_base`]: the change-of-measure route through the
//!   spine process and its Feynman–Kac weight,
//! - [`crate::ctmc::exact_base_moment`]: the truncated-generator oracle.
//!
//! [`recursion_check`] verifies the backward decomposition of the moment
//! measure at its first merger (k = 2, d = 2) by composite quadrature
//! against the direct estimator.

use crate::coalescent::PlanarCoalescent;
use crate::ctmc::{
    build_generator, default_window, feynman_kac, feynman_kac_values, BoundaryPolicy,
};
use crate::forest::Forest;
use crate::simulate::{run_forward, run_spine, RunStatus, SimConfig};
use crate::stats::{descending_factorial, elementary_symmetric, parallel_accumulate, Accumulator};
use crate::{Error, Result};

/// Stream salts keeping the estimators' replicate streams disjoint.
pub const SALT_DIRECT: u64 = 1;
pub const SALT_SPINAL: u64 = 2;
pub const SALT_MARTINGALE: u64 = 3;
pub const SALT_RECURSION_LHS: u64 = 4;

/// Reject any spinal replicate whose Feynman–Kac exponent exceeds this;
/// dropping such replicates silently would bias the estimate, so the
/// whole estimation fails loudly instead.
pub const DEFAULT_FK_EXPONENT_BOUND: f64 = 700.0;

/// A Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MomentEstimate {
    pub value: f64,
    pub std_error: f64,
    pub replicates: u64,
    pub estimator: String,
}

impl MomentEstimate {
    fn from_accumulator(acc: &Accumulator, estimator: &str) -> Self {
        MomentEstimate {
            value: acc.mean(),
            std_error: acc.std_error(),
            replicates: acc.count(),
            estimator: estimator.to_string(),
        }
    }
}

/// Weight on the first-merger time (bounded on any finite horizon).
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "rate")]
pub enum TimeWeight {
    Zero,
    One,
    ExpDecay(f64),
}

impl TimeWeight {
    pub fn eval(&self, s: f64) -> f64 {
        match self {
            TimeWeight::Zero => 0.0,
            TimeWeight::One => 1.0,
            TimeWeight::ExpDecay(rate) => (-rate * s).exp(),
        }
    }
}

/// Terminal density weight ψ.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PsiWeight {
    One,
    /// ψ(z) = z
    IdentityDensity,
    /// linear interpolation on a density grid, clamped outside
    TableOnGrid {
        zs: Vec<f64>,
        values: Vec<f64>,
    },
}

impl PsiWeight {
    pub fn eval(&self, z: f64) -> f64 {
        match self {
            PsiWeight::One => 1.0,
            PsiWeight::IdentityDensity => z,
            PsiWeight::TableOnGrid { zs, values } => {
                if z <= zs[0] {
                    return values[0];
                }
                if z >= *zs.last().unwrap() {
                    return *values.last().unwrap();
                }
                let hi = zs.partition_point(|&g| g < z);
                let w = (z - zs[hi - 1]) / (zs[hi] - zs[hi - 1]);
                (1.0 - w) * values[hi - 1] + w * values[hi]
            }
        }
    }
}

/// Genealogy functional φ of the product form: either the no-merger
/// indicator, the constant, or a weighted first-merger indicator
/// `1(τ₁<t, π₁=(position,width))·φ₁(τ₁)` with unit weight on the pruned
/// coalescent.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenealogyFunctional {
    /// 1(τ₁ > t): the sample never coalesces within the horizon.
    NoMerger,
    ConstantOne,
    FirstMerger {
        position: usize,
        width: usize,
        time_weight: TimeWeight,
    },
}

/// φ and ψ bundled, matching the product form of the moment recursion.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FunctionalSpec {
    pub phi: GenealogyFunctional,
    pub psi: PsiWeight,
}

/// Evaluate φ on an extracted planar coalescent (test oracle path; the
/// estimators never enumerate tuples).
pub fn eval_functional(phi: &GenealogyFunctional, coal: &PlanarCoalescent) -> f64 {
    match phi {
        GenealogyFunctional::ConstantOne => 1.0,
        GenealogyFunctional::NoMerger => {
            if coal.events().is_empty() {
                1.0
            } else {
                0.0
            }
        }
        GenealogyFunctional::FirstMerger {
            position,
            width,
            time_weight,
        } => match coal.first_merger() {
            Some(m) if m.first_block == *position && m.width == *width => time_weight.eval(m.tau),
            _ => 0.0,
        },
    }
}

/// The φ-sum over planar-sorted k-samples of the forest, aggregated
/// without tuple enumeration:
/// - no-merger: `e_k` of the root subfamily sizes,
/// - constant: `C(alive, k)`,
/// - first-merger: per-ancestor subtree-size combinatorics (k ≤ 3).
pub fn functional_sum(forest: &Forest, k: usize, phi: &GenealogyFunctional) -> Result<f64> {
    match phi {
        GenealogyFunctional::NoMerger => Ok(elementary_symmetric(forest.subfamily_sizes(), k)),
        GenealogyFunctional::ConstantOne => {
            let n = forest.alive_count() as f64;
            let kfact: f64 = (1..=k).map(|i| i as f64).product();
            Ok(descending_factorial(n, k as u32) / kfact)
        }
        GenealogyFunctional::FirstMerger {
            position,
            width,
            time_weight,
        } => {
            let (i, d) = (*position, *width);
            if !(d >= 2 && i >= 1 && i + d - 1 <= k) {
                return Err(Error::Unsupported {
                    k,
                    what: format!("first merger ({i},{d}) does not fit"),
                });
            }
            match (k, d, i) {
                (2, 2, 1) => Ok(forest
                    .coalescence_spectrum()
                    .iter()
                    .map(|&(tau, pairs)| pairs as f64 * time_weight.eval(tau))
                    .sum()),
                (3, 3, 1) => Ok(forest
                    .merger_stats()
                    .iter()
                    .map(|s| s.triple_weight * time_weight.eval(s.depth))
                    .sum()),
                (3, 2, 1) => Ok(forest
                    .merger_stats()
                    .iter()
                    .map(|s| s.pair_weight * s.alive_after as f64 * time_weight.eval(s.depth))
                    .sum()),
                (3, 2, 2) => Ok(forest
                    .merger_stats()
                    .iter()
                    .map(|s| s.pair_weight * s.alive_before as f64 * time_weight.eval(s.depth))
                    .sum()),
                _ => Err(Error::Unsupported {
                    k,
                    what: "first-merger functionals are aggregated for k in {2, 3} only".into(),
                }),
            }
        }
    }
}

fn moment_prefactor(cfg: &SimConfig, k: usize) -> f64 {
    let kfact: f64 = (1..=k).map(|i| i as f64).product();
    let z0 = cfg.initial as f64 / cfg.capacity;
    kfact * (cfg.beta * z0).exp() / descending_factorial(cfg.initial as f64, k as u32)
}

fn forward_config(config: &SimConfig, t: f64) -> Result<SimConfig> {
    let mut cfg = config.clone();
    cfg.spines = 0;
    cfg.t_max = t;
    cfg.record_path = false;
    cfg.validated()
}

/// Direct Monte Carlo estimate of `M^{k,t}(φ, ψ)` from forward runs.
///
/// Replicates whose population drops below `k` contribute their empty
/// φ-sum (zero) rather than being discarded: the measure is an
/// unconditioned expectation.
pub fn estimate_direct(
    config: &SimConfig,
    k: usize,
    t: f64,
    spec: &FunctionalSpec,
    reps: u64,
    salt: u64,
) -> Result<MomentEstimate> {
    let cfg = forward_config(config, t)?;
    if (cfg.initial as usize) < k {
        return Err(Error::Config(format!(
            "need Z0 >= k, got {} < {k}",
            cfg.initial
        )));
    }
    let prefactor = moment_prefactor(&cfg, k);
    let beta = cfg.beta;
    let acc = parallel_accumulate(reps, cfg.seed, salt, |rep, rng| {
        let (traj, forest) = run_forward(&cfg, rng)?;
        if traj.status != RunStatus::Completed {
            return Err(Error::ReplicateCapped {
                rep,
                status: traj.status,
            });
        }
        let z_t = traj.end_pop as f64 / cfg.capacity;
        let s = functional_sum(&forest, k, &spec.phi)?;
        Ok(prefactor * spec.psi.eval(z_t) * (-beta * z_t).exp() * s)
    })?;
    Ok(MomentEstimate::from_accumulator(&acc, "direct"))
}

/// Spinal (change-of-measure) estimate of the base-case moment
/// `M^{k,t}(ψ) = e^{βZ₀/K}·E_spine[ψ(Z_t/K)·e^{-βZ_t/K}·e^{k∫q(m-1)}]`.
pub fn estimate_spinal_base(
    config: &SimConfig,
    k: u64,
    t: f64,
    psi: &PsiWeight,
    reps: u64,
    salt: u64,
    exponent_bound: f64,
) -> Result<MomentEstimate> {
    let mut cfg = config.clone();
    cfg.spines = k;
    cfg.t_max = t;
    cfg.record_path = false;
    let cfg = cfg.validated()?;
    let beta = cfg.beta;
    let z0 = cfg.initial as f64 / cfg.capacity;
    let acc = parallel_accumulate(reps, cfg.seed, salt, |rep, rng| {
        let run = run_spine(&cfg, rng)?;
        let traj = &run.trajectory;
        if traj.status != RunStatus::Completed {
            return Err(Error::ReplicateCapped {
                rep,
                status: traj.status,
            });
        }
        let exponent = traj.fk_integral(k);
        if exponent.abs() > exponent_bound {
            return Err(Error::WeightOverflow {
                rep,
                value: exponent,
                bound: exponent_bound,
            });
        }
        let z_t = traj.end_pop as f64 / cfg.capacity;
        Ok((beta * z0).exp() * psi.eval(z_t) * (-beta * z_t).exp() * exponent.exp())
    })?;
    Ok(MomentEstimate::from_accumulator(&acc, "spinal-base"))
}

/// Monte Carlo mean of the change-of-measure martingale
/// `e^{-k∫q(m-1)}·Π_{i≤k} Z^{(i)}_t` under forward runs; targets 1.
pub fn check_martingale(
    config: &SimConfig,
    k: u64,
    t: f64,
    reps: u64,
    salt: u64,
) -> Result<MomentEstimate> {
    let cfg = forward_config(config, t)?;
    if cfg.initial < k {
        return Err(Error::Config(format!(
            "need Z0 >= k, got {} < {k}",
            cfg.initial
        )));
    }
    let acc = parallel_accumulate(reps, cfg.seed, salt, |rep, rng| {
        let (traj, forest) = run_forward(&cfg, rng)?;
        if traj.status != RunStatus::Completed {
            return Err(Error::ReplicateCapped {
                rep,
                status: traj.status,
            });
        }
        let product: f64 = forest.subfamily_sizes()[..k as usize]
            .iter()
            .map(|&s| s as f64)
            .product();
        Ok((-traj.fk_integral(k)).exp() * product)
    })?;
    Ok(MomentEstimate::from_accumulator(&acc, "martingale"))
}

/// Limit value `ψ(1)·exp(-q(1)·m₂(1)·C(k,2)·t)` of the base-case moment
/// at macroscopic time.
pub fn limit_prediction(
    law: &crate::offspring::OffspringLaw,
    rate: &crate::offspring::BranchRate,
    k: u64,
    t: f64,
    psi_at_1: f64,
) -> Result<f64> {
    let r = rate.rate(1.0) * law.factorial_moment(1.0, 2, 0.0)?;
    let pairs = (k * k.saturating_sub(1)) as f64 / 2.0;
    Ok(psi_at_1 * (-r * pairs * t).exp())
}

/// Two-sided result of the recursion verification.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RecursionCheck {
    pub lhs: MomentEstimate,
    pub rhs: f64,
    /// quadrature + kernel truncation + oracle tolerance
    pub rhs_error: f64,
}

impl RecursionCheck {
    /// |lhs − rhs| ≤ 3·se + rhs_error
    pub fn consistent(&self) -> bool {
        (self.lhs.value - self.rhs).abs() <= 3.0 * self.lhs.std_error + self.rhs_error
    }
}

/// Verify the first-merger decomposition of the 2-sample moment measure:
///
/// ```text
/// M^{2,t}(1(τ₁<t, π₁=(1,2))·φ₁(τ₁), ψ)
///   = ∫₀^t φ₁(t-s)/(Z₀-1) · M^{1,s}( z ↦ K^{(2),t-s}_z(ψ) ) ds
/// K^{(2),u}_z(ψ) = q(z)·e^{β/K}·Σ_l (l)₂ e^{-lβ/K} P(L(z)=l) · M^{2,u}_{zK+l-1}(ψ)
/// ```
///
/// The left side comes from the direct estimator; the right side is
/// computed by composite Simpson quadrature over `s`, with the inner
/// base-case moments `M^{2,u}` evaluated for every starting state at once
/// by the backward Feynman–Kac solve and the outer `M^{1,s}` by the
/// forward solve on the 1-spine generator. The pruned-coalescent weight
/// is the constant 1 (a single lineage remains after a pair merger).
pub fn recursion_check(
    config: &SimConfig,
    t: f64,
    phi1: &TimeWeight,
    psi: &PsiWeight,
    panels: usize,
    reps: u64,
) -> Result<RecursionCheck> {
    if panels < 2 || panels % 2 != 0 {
        return Err(Error::InvalidParameter(
            "quadrature needs an even panel count >= 2".into(),
        ));
    }
    let cfg = config.clone().validated()?;
    let spec = FunctionalSpec {
        phi: GenealogyFunctional::FirstMerger {
            position: 1,
            width: 2,
            time_weight: *phi1,
        },
        psi: psi.clone(),
    };
    let lhs = estimate_direct(&cfg, 2, t, &spec, reps, SALT_RECURSION_LHS)?;

    if t == 0.0 {
        return Ok(RecursionCheck {
            lhs,
            rhs: 0.0,
            rhs_error: 0.0,
        });
    }

    let capacity = cfg.capacity;
    let beta = cfg.beta;
    let beta_k = beta / capacity;
    let z0 = cfg.initial as f64 / capacity;

    // inner base-case values under the 2-spine dynamics, for all window
    // states, at every quadrature node u = t - s
    let gen2 = build_generator(
        &cfg,
        2,
        default_window(&cfg, 2),
        1e-10,
        BoundaryPolicy::AbsorbAtEdges,
    )?;
    let nodes: Vec<f64> = (0..=panels).map(|i| t * i as f64 / panels as f64).collect();
    let weight2 = |n: u64| {
        let z = n as f64 / capacity;
        psi.eval(z) * (-beta * z).exp()
    };
    let inner_times: Vec<f64> = nodes[1..].to_vec();
    let mut inner = feynman_kac_values(&gen2, &inner_times, weight2)?;
    let v0: Vec<f64> = (0..gen2.dim()).map(|r| weight2(gen2.state(r))).collect();
    inner.insert(0, v0);
    // M^{2,u}_n(ψ) = e^{β n/K} · inner[u][n]; None outside the window
    let base2 = |u_idx: usize, state: u64| -> Option<f64> {
        let (lo, hi) = gen2.window();
        if state < lo || state > hi {
            return None;
        }
        let r = (state - lo) as usize;
        Some((beta_k * state as f64).exp() * inner[u_idx][r])
    };

    let gen1 = build_generator(
        &cfg,
        1,
        default_window(&cfg, 1),
        1e-10,
        BoundaryPolicy::AbsorbAtEdges,
    )?;
    let (lo1, _) = gen1.window();

    let enum_cap = match &cfg.law {
        crate::offspring::OffspringLaw::Table(tb) => tb.tail_cap(),
        _ => 4096,
    };
    let mut truncation = 0.0f64;

    let mut integrand = Vec::with_capacity(nodes.len());
    for (i, &s) in nodes.iter().enumerate() {
        let u_idx = panels - i; // inner horizon u = t - s
        let mut kernel = vec![0.0f64; gen1.dim()];
        let mut trunc_here = 0.0f64;
        for (r, kv) in kernel.iter_mut().enumerate() {
            let n = lo1 + r as u64;
            let z = n as f64 / capacity;
            let q = cfg.rate.rate(z);
            let m2b = cfg.law.factorial_moment(z, 2, beta_k)?;
            if m2b <= 0.0 {
                continue;
            }
            let mut acc = 0.0f64;
            let mut mass = 0.0f64;
            let mut bound = 0.0f64;
            for l in 2..=enum_cap {
                let w = descending_factorial(l as f64, 2)
                    * (-beta_k * l as f64).exp()
                    * cfg.law.pmf(z, l);
                if w <= 0.0 {
                    continue;
                }
                mass += w;
                if let Some(b) = base2(u_idx, n + l - 1) {
                    acc += w * b;
                    bound = bound.max(b.abs());
                }
                // beyond the oracle window the absorbed boundary
                // contributes zero, consistently with the inner solve
                if mass >= m2b * (1.0 - 1e-10) {
                    break;
                }
            }
            *kv = q * beta_k.exp() * acc;
            trunc_here = trunc_here.max(q * beta_k.exp() * (m2b - mass).max(0.0) * bound);
        }
        let outer = feynman_kac(&gen1, cfg.initial, s, |n| {
            let z = n as f64 / capacity;
            kernel[(n - lo1) as usize] * (-beta * z).exp()
        })?;
        let m1 = (beta * z0).exp() * outer;
        integrand.push(phi1.eval(t - s) / (cfg.initial as f64 - 1.0) * m1);
        truncation = truncation.max(trunc_here);
    }

    let simpson = |stride: usize| -> f64 {
        let n = panels / stride;
        let h = t / n as f64;
        let mut acc = integrand[0] + integrand[panels];
        for j in 1..n {
            let w = if j % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * integrand[j * stride];
        }
        acc * h / 3.0
    };
    let fine = simpson(1);
    let coarse = simpson(2);
    let quad_error = (fine - coarse).abs() / 15.0;
    let trunc_error = truncation * t / (cfg.initial as f64 - 1.0);

    Ok(RecursionCheck {
        lhs,
        rhs: fine,
        rhs_error: quad_error + trunc_error + 1e-8,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctmc::exact_base_moment;
    use crate::offspring::{BranchRate, OffspringLaw, TableLaw};
    use crate::stats::random_stream;
    use rand::Rng;

    fn binary_config(capacity: f64, initial: u64, beta: f64, seed: u64) -> SimConfig {
        let mut cfg = SimConfig::new(
            capacity,
            initial,
            OffspringLaw::binary_logistic(),
            BranchRate::constant(1.0).unwrap(),
        );
        cfg.beta = beta;
        cfg.seed = seed;
        cfg
    }

    fn critical_table_config(capacity: f64, initial: u64, seed: u64) -> SimConfig {
        let row = vec![0.5, 0.0, 0.5];
        let law =
            OffspringLaw::Table(TableLaw::new(vec![0.5, 2.0], vec![row.clone(), row]).unwrap());
        let mut cfg = SimConfig::new(capacity, initial, law, BranchRate::constant(1.0).unwrap());
        cfg.beta = 0.0;
        cfg.seed = seed;
        cfg
    }

    #[test]
    fn direct_at_time_zero_is_psi() {
        let cfg = binary_config(20.0, 20, 0.5, 7);
        for k in 1..=3usize {
            let est = estimate_direct(
                &cfg,
                k,
                0.0,
                &FunctionalSpec {
                    phi: GenealogyFunctional::NoMerger,
                    psi: PsiWeight::IdentityDensity,
                },
                200,
                SALT_DIRECT,
            )
            .unwrap();
            assert!((est.value - 1.0).abs() < 1e-12, "k={k}: {}", est.value);
            assert_eq!(est.std_error, 0.0);
        }
    }

    #[test]
    fn direct_k1_constant_law_is_martingale() {
        // m ≡ 1: the population is a martingale, so E[Z_t]/Z0 = 1
        let cfg = critical_table_config(10.0, 10, 11);
        let est = estimate_direct(
            &cfg,
            1,
            1.0,
            &FunctionalSpec {
                phi: GenealogyFunctional::ConstantOne,
                psi: PsiWeight::One,
            },
            30_000,
            SALT_DIRECT,
        )
        .unwrap();
        assert!(
            (est.value - 1.0).abs() <= 3.0 * est.std_error,
            "{} ± {}",
            est.value,
            est.std_error
        );
    }

    /// Brute-force φ-sum by enumerating planar-sorted samples.
    fn brute_functional_sum(forest: &Forest, k: usize, phi: &GenealogyFunctional) -> f64 {
        let alive = forest.alive_planar();
        let n = alive.len();
        let t = forest.now();
        if n < k {
            return 0.0;
        }
        let mut total = 0.0;
        let mut idx: Vec<usize> = (0..k).collect();
        loop {
            let sample: Vec<_> = idx.iter().map(|&i| alive[i]).collect();
            let coal = crate::coalescent::extract(forest, t, &sample).unwrap();
            total += eval_functional(phi, &coal);
            // next combination in lexicographic order
            let mut pos = k;
            loop {
                if pos == 0 {
                    return total;
                }
                pos -= 1;
                if idx[pos] + 1 <= n - (k - pos) {
                    idx[pos] += 1;
                    for j in pos + 1..k {
                        idx[j] = idx[j - 1] + 1;
                    }
                    break;
                }
            }
        }
    }

    #[test]
    fn functional_sum_matches_brute_force() {
        let mut rng = random_stream(23, 0);
        for trial in 0..12 {
            let mut forest = Forest::new(3);
            let mut t = 0.0;
            for _ in 0..rng.gen_range(5..40) {
                if forest.alive_count() == 0 {
                    break;
                }
                t += rng.gen::<f64>() * 0.3;
                let slot = rng.gen_range(0..forest.alive_count());
                let kids = rng.gen_range(0..=3u64);
                forest
                    .record_death(forest.alive_at_slot(slot), t, kids)
                    .unwrap();
            }
            if forest.alive_count() < 3 {
                continue;
            }
            let phis = [
                GenealogyFunctional::NoMerger,
                GenealogyFunctional::ConstantOne,
                GenealogyFunctional::FirstMerger {
                    position: 1,
                    width: 2,
                    time_weight: TimeWeight::ExpDecay(0.7),
                },
                GenealogyFunctional::FirstMerger {
                    position: 1,
                    width: 3,
                    time_weight: TimeWeight::One,
                },
                GenealogyFunctional::FirstMerger {
                    position: 2,
                    width: 2,
                    time_weight: TimeWeight::ExpDecay(0.3),
                },
            ];
            for k in 1..=3usize {
                for phi in &phis {
                    match functional_sum(&forest, k, phi) {
                        Ok(got) => {
                            let brute = brute_functional_sum(&forest, k, phi);
                            assert!(
                                (got - brute).abs() <= 1e-9 * brute.abs().max(1.0),
                                "trial {trial} k={k} {phi:?}: {got} vs {brute}"
                            );
                        }
                        Err(Error::Unsupported { .. }) => {}
                        Err(e) => panic!("unexpected error: {e}"),
                    }
                }
            }
        }
    }

    #[test]
    fn unsupported_combinations_signal() {
        let cfg = binary_config(10.0, 10, 0.0, 3);
        let spec = FunctionalSpec {
            phi: GenealogyFunctional::FirstMerger {
                position: 1,
                width: 2,
                time_weight: TimeWeight::One,
            },
            psi: PsiWeight::One,
        };
        assert!(matches!(
            estimate_direct(&cfg, 4, 0.5, &spec, 10, SALT_DIRECT),
            Err(Error::Unsupported { .. })
        ));
    }

    #[test]
    fn martingale_trivial_cases() {
        let cfg = binary_config(15.0, 15, 0.5, 5);
        let at_zero = check_martingale(&cfg, 2, 0.0, 500, SALT_MARTINGALE).unwrap();
        assert_eq!(at_zero.value, 1.0);
        assert_eq!(at_zero.std_error, 0.0);
        let k0 = check_martingale(&cfg, 0, 1.0, 500, SALT_MARTINGALE).unwrap();
        assert_eq!(k0.value, 1.0);
        assert_eq!(k0.std_error, 0.0);
    }

    #[test]
    fn martingale_mean_is_one() {
        let cfg = binary_config(20.0, 20, 0.5, 9);
        let est = check_martingale(&cfg, 2, 1.0, 40_000, SALT_MARTINGALE).unwrap();
        assert!(
            (est.value - 1.0).abs() <= 3.0 * est.std_error,
            "{} ± {}",
            est.value,
            est.std_error
        );
    }

    #[test]
    fn spinal_base_agrees_with_oracle() {
        let cfg = binary_config(20.0, 20, 0.5, 13);
        let (k, t) = (2, 1.0);
        let est = estimate_spinal_base(
            &cfg,
            k,
            t,
            &PsiWeight::One,
            40_000,
            SALT_SPINAL,
            DEFAULT_FK_EXPONENT_BOUND,
        )
        .unwrap();
        let oracle = exact_base_moment(&cfg, k, t, |_| 1.0).unwrap();
        assert!(
            (est.value - oracle).abs() <= 3.0 * est.std_error + 1e-8,
            "spinal {} ± {} vs oracle {oracle}",
            est.value,
            est.std_error
        );
    }

    #[test]
    fn direct_base_agrees_with_oracle() {
        let cfg = binary_config(20.0, 20, 0.5, 17);
        let (k, t) = (2, 1.0);
        let est = estimate_direct(
            &cfg,
            k as usize,
            t,
            &FunctionalSpec {
                phi: GenealogyFunctional::NoMerger,
                psi: PsiWeight::One,
            },
            40_000,
            SALT_DIRECT,
        )
        .unwrap();
        let oracle = exact_base_moment(&cfg, k, t, |_| 1.0).unwrap();
        assert!(
            (est.value - oracle).abs() <= 3.0 * est.std_error + 1e-8,
            "direct {} ± {} vs oracle {oracle}",
            est.value,
            est.std_error
        );
    }

    #[test]
    fn spinal_k1_critical_law_reduces() {
        // m ≡ 1 makes the growth integral vanish identically
        let mut cfg = critical_table_config(10.0, 10, 19);
        cfg.beta = 0.5;
        let est = estimate_spinal_base(
            &cfg,
            1,
            0.8,
            &PsiWeight::One,
            5_000,
            SALT_SPINAL,
            DEFAULT_FK_EXPONENT_BOUND,
        )
        .unwrap();
        let oracle = exact_base_moment(&cfg, 1, 0.8, |_| 1.0).unwrap();
        assert!(
            (est.value - oracle).abs() <= 3.0 * est.std_error + 1e-8,
            "{} vs {oracle}",
            est.value
        );
    }

    #[test]
    fn limit_prediction_values() {
        let law = OffspringLaw::binary_logistic();
        let q = BranchRate::constant(1.0).unwrap();
        // q(1)·m₂(1) = 1
        let v = limit_prediction(&law, &q, 2, 0.5, 1.0).unwrap();
        assert!((v - (-0.5f64).exp()).abs() < 1e-12);
        assert!((v - 0.6065).abs() < 1e-3);
        assert_eq!(limit_prediction(&law, &q, 1, 3.0, 0.7).unwrap(), 0.7);
        let v3 = limit_prediction(&law, &q, 3, 1.0, 1.0).unwrap();
        assert!((v3 - (-3.0f64).exp()).abs() < 1e-12);
        assert!((v3 - 0.0498).abs() < 1e-3);
    }

    #[test]
    fn recursion_trivial_cases() {
        let cfg = binary_config(10.0, 10, 0.5, 21);
        let zero_phi =
            recursion_check(&cfg, 0.7, &TimeWeight::Zero, &PsiWeight::One, 16, 500).unwrap();
        assert_eq!(zero_phi.lhs.value, 0.0);
        assert!(zero_phi.rhs.abs() < 1e-15);
        let zero_t =
            recursion_check(&cfg, 0.0, &TimeWeight::One, &PsiWeight::One, 16, 500).unwrap();
        assert_eq!(zero_t.lhs.value, 0.0);
        assert_eq!(zero_t.rhs, 0.0);
    }

    #[test]
    fn normalization_approaches_one_with_capacity() {
        // M^{k,Kt}(1,1) = e^{βZ₀/K}·E[(Z_t)_k/(Z₀)_k·e^{-βZ_t/K}] is a pure
        // size functional, so the plain-process oracle evaluates it; the
        // deviation from 1 shrinks as the capacity grows
        let t_mac = 0.3;
        let k = 2u32;
        let mut devs = Vec::new();
        for capacity in [20.0, 50.0, 100.0] {
            let cfg = binary_config(capacity, capacity as u64, 0.5, 0);
            let cfg = cfg.validated().unwrap();
            let gen = crate::ctmc::build_generator(
                &cfg,
                0,
                crate::ctmc::default_window(&cfg, 0),
                1e-10,
                crate::ctmc::BoundaryPolicy::AbsorbAtEdges,
            )
            .unwrap();
            let z0 = cfg.initial as f64 / capacity;
            let denom = descending_factorial(cfg.initial as f64, k);
            let value = (cfg.beta * z0).exp()
                * crate::ctmc::feynman_kac(&gen, cfg.initial, capacity * t_mac, |n| {
                    descending_factorial(n as f64, k) / denom
                        * (-cfg.beta * n as f64 / capacity).exp()
                })
                .unwrap();
            devs.push((value - 1.0).abs());
        }
        assert!(
            devs.windows(2).all(|w| w[1] < w[0]),
            "deviation not shrinking: {devs:?}"
        );
    }

    #[test]
    fn recursion_identity_small_case() {
        let cfg = binary_config(10.0, 10, 0.5, 25);
        let check =
            recursion_check(&cfg, 0.8, &TimeWeight::One, &PsiWeight::One, 32, 30_000).unwrap();
        assert!(
            check.consistent(),
            "lhs {} ± {} vs rhs {} ± {}",
            check.lhs.value,
            check.lhs.std_error,
            check.rhs,
            check.rhs_error
        );
        assert!(check.rhs > 0.05, "rhs suspiciously small: {}", check.rhs);
    }
}
