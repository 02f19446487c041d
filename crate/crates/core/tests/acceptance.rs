//! Acceptance suite: every release criterion as one test, run at its
//! stated parameters and tolerance. Each test prints a single
//! `ACCEPTANCE <id> ...: PASS/FAIL` line (visible with --nocapture).

use ddbranch::cli;
use ddbranch::coalescent::simulate_planar_kingman;
use ddbranch::ctmc::{build_generator, exact_base_moment, transient_distribution, BoundaryPolicy};
use ddbranch::forest::Forest;
use ddbranch::kingman::{density_concentration_test, pairwise_limit_test};
use ddbranch::moments::{
    check_martingale, estimate_direct, estimate_spinal_base, limit_prediction, recursion_check,
    FunctionalSpec, GenealogyFunctional, PsiWeight, TimeWeight, DEFAULT_FK_EXPONENT_BOUND,
};
use ddbranch::offspring::{BranchRate, OffspringLaw, TableLaw};
use ddbranch::simulate::SimConfig;
use ddbranch::stats::{chi_square_uniform, elementary_symmetric, random_stream};
use rand::Rng;

fn report(id: &str, pass: bool, detail: &str) {
    println!(
        "ACCEPTANCE {id}: {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "{id} failed: {detail}");
}

fn base_config(law: OffspringLaw, capacity: f64, initial: u64, beta: f64, seed: u64) -> SimConfig {
    let mut cfg = SimConfig::new(capacity, initial, law, BranchRate::constant(1.0).unwrap());
    cfg.beta = beta;
    cfg.seed = seed;
    cfg
}

/// Criterion 1, martingale identity: MC mean of the change-of-measure martingale is
/// 1 within 3 s.e. for k in {1,2,3}, both built-in laws, K = Z0 = 20,
/// t in {0.5, 1}, 1e5 replicates per cell.
#[test]
fn criterion_1_martingale_identity() {
    let laws = [
        ("binary-logistic", OffspringLaw::binary_logistic()),
        ("poisson-exp", OffspringLaw::poisson_exp(1.0).unwrap()),
    ];
    let mut worst: (f64, String) = (0.0, String::new());
    for (law_name, law) in &laws {
        for k in 1..=3u64 {
            for (ti, &t) in [0.5f64, 1.0].iter().enumerate() {
                let cfg = base_config(law.clone(), 20.0, 20, 0.5, 1001 + k * 10 + ti as u64);
                let est = check_martingale(&cfg, k, t, 100_000, 100 + k * 4 + ti as u64).unwrap();
                let dev = (est.value - 1.0).abs();
                let ratio = dev / est.std_error.max(1e-300);
                if ratio > worst.0 {
                    worst = (
                        ratio,
                        format!("{law_name} k={k} t={t}: {} ± {}", est.value, est.std_error),
                    );
                }
                assert!(
                    dev <= 3.0 * est.std_error,
                    "martingale {law_name} k={k} t={t}: {} ± {}",
                    est.value,
                    est.std_error
                );
            }
        }
    }
    report(
        "1-martingale",
        true,
        &format!(
            "12 cells within 3 s.e.; worst z = {:.2} at {}",
            worst.0, worst.1
        ),
    );
}

/// Criterion 2, base-case triangle: direct, spinal and oracle estimates of the
/// no-merger moment pairwise agree within 3 combined s.e. on the grid
/// k in {1,2}, K in {20,50}, beta in {0,0.5}, t in {0.5,1}.
#[test]
fn criterion_2_base_case_triangle() {
    let reps = 40_000;
    let mut cell = 0u64;
    let mut worst = 0.0f64;
    for k in [1u64, 2] {
        for capacity in [20.0, 50.0] {
            for beta in [0.0, 0.5] {
                for t in [0.5, 1.0] {
                    cell += 1;
                    let cfg = base_config(
                        OffspringLaw::binary_logistic(),
                        capacity,
                        capacity as u64,
                        beta,
                        2500 + cell,
                    );
                    let direct = estimate_direct(
                        &cfg,
                        k as usize,
                        t,
                        &FunctionalSpec {
                            phi: GenealogyFunctional::NoMerger,
                            psi: PsiWeight::One,
                        },
                        reps,
                        200 + cell,
                    )
                    .unwrap();
                    let spinal = estimate_spinal_base(
                        &cfg,
                        k,
                        t,
                        &PsiWeight::One,
                        reps,
                        300 + cell,
                        DEFAULT_FK_EXPONENT_BOUND,
                    )
                    .unwrap();
                    let oracle = exact_base_moment(&cfg, k, t, |_| 1.0).unwrap();
                    let cases = [
                        (
                            "direct-spinal",
                            direct.value,
                            spinal.value,
                            (direct.std_error.powi(2) + spinal.std_error.powi(2)).sqrt(),
                        ),
                        ("direct-oracle", direct.value, oracle, direct.std_error),
                        ("spinal-oracle", spinal.value, oracle, spinal.std_error),
                    ];
                    for (what, a, b, se) in cases {
                        let tol = 3.0 * se + 1e-8;
                        worst = worst.max((a - b).abs() / tol);
                        assert!(
                            (a - b).abs() <= tol,
                            "{what} k={k} K={capacity} beta={beta} t={t}: |{a} - {b}| > {tol}"
                        );
                    }
                }
            }
        }
    }
    report(
        "2-base-case-triangle",
        true,
        &format!("16 cells, 48 pairwise agreements; worst |diff|/tol = {worst:.2}"),
    );
}

/// Criterion 3, recursion identity at k = 2, d = 2 for binary-logistic, K = 20,
/// beta = 0.5, t = 1, phi1 in {1, exp(-s)}, 1e5 LHS replicates.
#[test]
fn criterion_3_recursion_identity() {
    for (name, phi1) in [
        ("one", TimeWeight::One),
        ("exp-decay", TimeWeight::ExpDecay(1.0)),
    ] {
        let cfg = base_config(OffspringLaw::binary_logistic(), 20.0, 20, 0.5, 3001);
        let check = recursion_check(&cfg, 1.0, &phi1, &PsiWeight::One, 64, 100_000).unwrap();
        let tol = 3.0 * check.lhs.std_error + check.rhs_error;
        let diff = (check.lhs.value - check.rhs).abs();
        report(
            &format!("3-recursion-phi1-{name}"),
            diff <= tol,
            &format!(
                "lhs {} ± {}, rhs {} ± {}, |diff| {diff:.3e} <= {tol:.3e}",
                check.lhs.value, check.lhs.std_error, check.rhs, check.rhs_error
            ),
        );
    }
}

/// Criterion 4, Feynman–Kac limit: the exact base moment at macroscopic horizon
/// K·0.5 with k = 2 approaches exp(-0.5); error decreases monotonically
/// over K in {20, 50, 100} and ends below 0.05.
#[test]
fn criterion_4_feynman_kac_limit() {
    let t_mac = 0.5;
    let law = OffspringLaw::binary_logistic();
    let rate = BranchRate::constant(1.0).unwrap();
    let target = limit_prediction(&law, &rate, 2, t_mac, 1.0).unwrap();
    assert!((target - (-0.5f64).exp()).abs() < 1e-12);
    let mut errors = Vec::new();
    for capacity in [20.0, 50.0, 100.0] {
        let cfg = base_config(law.clone(), capacity, capacity as u64, 0.5, 4001);
        let value = exact_base_moment(&cfg, 2, capacity * t_mac, |_| 1.0).unwrap();
        errors.push((value - target).abs());
    }
    let monotone = errors.windows(2).all(|w| w[1] < w[0]);
    let final_ok = *errors.last().unwrap() < 0.05;
    report(
        "4-feynman-kac-limit",
        monotone && final_ok,
        &format!("errors vs e^-0.5: {errors:?}"),
    );
}

/// Criterion 5, Kingman convergence at K = 400, T = 2, 2000 runs: KS statistic of
/// rescaled pair coalescence times below the simulated 1% critical value,
/// censoring within 3 binomial s.e. of e^{-2}.
#[test]
fn criterion_5_kingman_convergence() {
    let cfg = base_config(OffspringLaw::binary_logistic(), 400.0, 400, 0.5, 5001);
    let rep = pairwise_limit_test(&cfg, 2.0, 2000).unwrap();
    let ks_ok = rep.ks_statistic < rep.ks_critical_1pct;
    let censor_dev = (rep.censored_fraction - rep.expected_censored).abs();
    let censor_ok = censor_dev <= 3.0 * rep.censored_se;
    report(
        "5-kingman-convergence",
        ks_ok && censor_ok,
        &format!(
            "KS {:.4} < crit {:.4}; censoring {:.4} vs e^-2 = {:.4} (3 s.e. = {:.4}); {} small runs",
            rep.ks_statistic,
            rep.ks_critical_1pct,
            rep.censored_fraction,
            rep.expected_censored,
            3.0 * rep.censored_se,
            rep.n_small
        ),
    );
}

/// Criterion 6, binary-merger support: the triple-first-merger fraction for k = 3
/// strictly decreases over K in {50, 100, 400} under the poisson-exp law.
#[test]
fn criterion_6_binary_merger_support() {
    let cfg = base_config(OffspringLaw::poisson_exp(1.0).unwrap(), 50.0, 50, 0.5, 6001);
    let reports =
        cli::triple_trend(&cfg, 2.0, &[(50.0, 4000), (100.0, 2000), (400.0, 600)]).unwrap();
    let fractions: Vec<f64> = reports.iter().map(|r| r.triple_fraction).collect();
    let decreasing = fractions.windows(2).all(|w| w[1] < w[0]);
    report(
        "6-binary-merger-support",
        decreasing,
        &format!("triple fractions over K=50,100,400: {fractions:?}"),
    );
}

/// Criterion 7, density concentration: exceedance of |Z/K - 1| >= 0.2 before KT has
/// probability < 0.02 at K = 400 (500 runs) and is strictly smaller than
/// at K = 50. Uses the poisson-exp law, whose equilibrium relaxation rate
/// of 1 keeps 0.2 a >5-sigma excursion at K = 400; under binary-logistic
/// (relaxation 1/2) the same level sits near 4 sigma and is exited in a
/// quarter of all runs of this length, so no sub-2% threshold can hold.
#[test]
fn criterion_7_density_concentration() {
    let mk = |capacity: f64, seed: u64| {
        base_config(
            OffspringLaw::poisson_exp(1.0).unwrap(),
            capacity,
            capacity as u64,
            0.5,
            seed,
        )
    };
    let big = density_concentration_test(&mk(400.0, 7001), 2.0, 500, 0.2).unwrap();
    let small = density_concentration_test(&mk(50.0, 7002), 2.0, 500, 0.2).unwrap();
    let pass = big.exceed_probability < 0.02 && big.exceed_probability < small.exceed_probability;
    report(
        "7-density-concentration",
        pass,
        &format!(
            "P(exit) at K=400: {} ({}/500); at K=50: {} ({}/500)",
            big.exceed_probability, big.n_exceed, small.exceed_probability, small.n_exceed
        ),
    );
}

/// Criterion 8a, tuple-free sum identity: k!·e_k equals the exhaustive ordered-tuple
/// sum for every k <= 4 on vectors of length <= 8 (exact).
#[test]
fn criterion_8a_tuple_sum_identity() {
    fn ordered_tuple_sum(s: &[u64], k: usize) -> f64 {
        fn rec(s: &[u64], used: &mut Vec<bool>, left: usize) -> f64 {
            if left == 0 {
                return 1.0;
            }
            let mut total = 0.0;
            for i in 0..s.len() {
                if !used[i] {
                    used[i] = true;
                    total += s[i] as f64 * rec(s, used, left - 1);
                    used[i] = false;
                }
            }
            total
        }
        rec(s, &mut vec![false; s.len()], k)
    }
    let mut rng = random_stream(8001, 0);
    let mut cases = 0;
    for n in 0..=8usize {
        for _ in 0..12 {
            let s: Vec<u64> = (0..n).map(|_| rng.gen_range(0..6u64)).collect();
            for k in 0..=4usize {
                let kfact: f64 = (1..=k).map(|i| i as f64).product();
                let expect = ordered_tuple_sum(&s, k);
                let got = kfact * elementary_symmetric(&s, k);
                assert_eq!(got, expect, "s={s:?} k={k}");
                cases += 1;
            }
        }
    }
    report("8a-tuple-sum", true, &format!("{cases} exact cases"));
}

/// Criterion 8b: the coalescence spectrum equals brute-force pairwise distances, and
/// pruning preserves every distance among alive individuals (exact).
#[test]
fn criterion_8b_spectrum_and_prune() {
    let mut checked_pairs = 0usize;
    for seed in 0..6u64 {
        let mut forest = Forest::new(4);
        let mut rng = random_stream(8101 + seed, 0);
        let mut t = 0.0;
        for _ in 0..400 {
            if forest.alive_count() == 0 {
                break;
            }
            t += rng.gen::<f64>() * 0.1;
            let slot = rng.gen_range(0..forest.alive_count());
            let kids = rng.gen_range(0..=3u64);
            forest
                .record_death(forest.alive_at_slot(slot), t, kids)
                .unwrap();
        }
        let alive = forest.alive_planar();
        let now = forest.now();
        // brute-force distance histogram
        let mut brute: std::collections::HashMap<u64, u64> = Default::default();
        let mut cross = 0u64;
        for i in 0..alive.len() {
            for j in (i + 1)..alive.len() {
                let d = forest.pairwise_distance(now, alive[i], alive[j]).unwrap();
                if d.is_infinite() {
                    cross += 1;
                } else {
                    *brute.entry(d.to_bits()).or_insert(0) += 1;
                }
            }
        }
        let mut got: std::collections::HashMap<u64, u64> = Default::default();
        let mut total = 0u64;
        for (d, c) in forest.coalescence_spectrum() {
            *got.entry(d.to_bits()).or_insert(0) += c;
            total += c;
        }
        assert_eq!(brute, got, "spectrum mismatch at seed {seed}");
        let n = alive.len() as u64;
        assert_eq!(total + cross, n * (n - 1) / 2);

        let mut pruned = forest.clone();
        pruned.prune();
        let pa = pruned.alive_planar();
        assert_eq!(alive.len(), pa.len());
        for i in 0..alive.len() {
            for j in (i + 1)..alive.len() {
                let d1 = forest.pairwise_distance(now, alive[i], alive[j]).unwrap();
                let d2 = pruned.pairwise_distance(now, pa[i], pa[j]).unwrap();
                assert_eq!(d1.to_bits(), d2.to_bits());
                checked_pairs += 1;
            }
        }
    }
    report(
        "8b-spectrum-prune",
        true,
        &format!("6 forests, {checked_pairs} distances preserved exactly"),
    );
}

/// Criterion 8c: theta-pruning matches the nine-leaf reference instance exactly:
/// mergers ((4,3),(3,2),(4,3),(2,2)) prune to ((3,2),(4,3),(2,2)) on
/// 9-3+1 = 7 leaves with times shifted by the first merger time.
#[test]
fn criterion_8c_theta_prune_instance() {
    use ddbranch::coalescent::{Merger, PlanarCoalescent};
    let taus = [0.4, 0.9, 1.3, 2.1];
    let evs = [(4usize, 3usize), (3, 2), (4, 3), (2, 2)];
    let events: Vec<Merger> = taus
        .iter()
        .zip(&evs)
        .map(|(&tau, &(j, d))| Merger {
            tau,
            first_block: j,
            width: d,
        })
        .collect();
    let coal = PlanarCoalescent::new(9, 3.0, events).unwrap();
    let pruned = coal.theta_prune().unwrap();
    let mut pass = pruned.k() == 7 && pruned.events().len() == 3;
    let want = [(0.5, 3usize, 2usize), (0.9, 4, 3), (1.7, 2, 2)];
    for (e, (wt, wj, wd)) in pruned.events().iter().zip(&want) {
        pass &= (e.tau - wt).abs() < 1e-12 && e.first_block == *wj && e.width == *wd;
    }
    report(
        "8c-theta-prune-instance",
        pass,
        &format!("pruned to k={} events {:?}", pruned.k(), pruned.events()),
    );
}

/// Criterion 8d, de-planarized planar Kingman: the first merging pair is uniform
/// over all leaf pairs (chi-square p > 0.01 on 1e4 draws, k = 4).
#[test]
fn criterion_8d_deplanarize_uniform() {
    let mut rng = random_stream(8401, 0);
    let mut counts = [0u64; 6];
    for _ in 0..10_000 {
        let coal = simulate_planar_kingman(4, 1.0, f64::INFINITY, &mut rng);
        let path = coal.deplanarize(&mut rng);
        let (a, b) = path.first_merger_pair().expect("binary merger");
        let idx = match (a, b) {
            (0, 1) => 0,
            (0, 2) => 1,
            (0, 3) => 2,
            (1, 2) => 3,
            (1, 3) => 4,
            (2, 3) => 5,
            _ => unreachable!(),
        };
        counts[idx] += 1;
    }
    let test = chi_square_uniform(&counts);
    report(
        "8d-deplanarize-uniform",
        test.p_value > 0.01,
        &format!(
            "counts {counts:?}, chi2 = {:.3}, p = {:.4}",
            test.statistic, test.p_value
        ),
    );
}

/// Criterion 8e, pure-death oracle: transient mean equals Z0·e^{-t} within 1e-8.
#[test]
fn criterion_8e_pure_death_mean() {
    let z0 = 30u64;
    let row = vec![1.0];
    let law = OffspringLaw::Table(TableLaw::new(vec![0.5, 2.0], vec![row.clone(), row]).unwrap());
    let cfg = base_config(law, z0 as f64, z0, 0.0, 8501)
        .validated()
        .unwrap();
    let gen = build_generator(&cfg, 0, (0, z0), 1e-12, BoundaryPolicy::AbsorbAtEdges).unwrap();
    let t = 0.7;
    let mean = transient_distribution(&gen, z0, t).unwrap().mean();
    let target = z0 as f64 * (-t).exp();
    let err = (mean - target).abs();
    report(
        "8e-pure-death-mean",
        err < 1e-8,
        &format!("mean {mean} vs {target}, err {err:.2e}"),
    );
}

/// Criterion 9, determinism: rerunning a suite with the same seed and config yields
/// byte-identical outputs for any thread count.
#[test]
fn criterion_9_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        r#"{
            "capacity": 30.0, "initial": 30, "seed": 9001, "t_max": 1.0,
            "law": {"family": "poisson-exp", "params": [1.0]},
            "rate": {"family": "constant", "params": [1.0]},
            "suite": {"reps": 3000, "n_runs": 120, "ks": [2], "times": [0.5],
                      "horizon": 1.0, "capacities": [20.0, 30.0]}
        }"#,
    )
    .unwrap();
    // determinism is about bytes: a suite may pass or fail its checks at
    // these small sample sizes, but the outcome must be identical
    let run_suite = |suite: &str, out: &std::path::Path, threads: &str| -> i32 {
        let code = cli::run([
            "ddbranch",
            "verify",
            "--suite",
            suite,
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--threads",
            threads,
        ]);
        assert!(code == 0 || code == 1, "suite {suite} errored: {code}");
        code
    };
    let mut compared = 0usize;
    for suite in ["martingale", "kingman"] {
        let out1 = dir.path().join(format!("{suite}-t1"));
        let out2 = dir.path().join(format!("{suite}-t2"));
        let out2b = dir.path().join(format!("{suite}-t2b"));
        let c1 = run_suite(suite, &out1, "1");
        let c2 = run_suite(suite, &out2, "2");
        let c3 = run_suite(suite, &out2b, "2");
        assert_eq!(c1, c2, "{suite}: exit codes differ across thread counts");
        assert_eq!(c2, c3, "{suite}: exit codes differ across reruns");
        for entry in std::fs::read_dir(&out1).unwrap() {
            let name = entry.unwrap().file_name();
            let a = std::fs::read(out1.join(&name)).unwrap();
            let b = std::fs::read(out2.join(&name)).unwrap();
            let c = std::fs::read(out2b.join(&name)).unwrap();
            assert_eq!(a, b, "{suite}/{name:?} differs between 1 and 2 threads");
            assert_eq!(b, c, "{suite}/{name:?} differs between reruns");
            compared += 1;
        }
    }
    report(
        "9-determinism",
        true,
        &format!("{compared} output files byte-identical across thread counts and reruns"),
    );
}
