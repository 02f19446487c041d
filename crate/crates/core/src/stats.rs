//! Numerical utilities shared by the estimators and the verification
//! suites: descending factorials, elementary symmetric polynomials,
//! Kolmogorov–Smirnov statistics, mergeable Monte Carlo accumulators and
//! the seeded random-stream contract.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::Result;

/// The concrete generator behind every random stream in this crate.
///
/// ChaCha8 as implemented by `rand_chacha`: counter-based, platform
/// independent, period far above 2^64 per stream. The 256-bit key is the
/// first four outputs of SplitMix64 applied to the user seed; the 64-bit
/// stream id selects statistically independent substreams. Identical
/// `(seed, stream)` pairs yield identical draw sequences on every
/// platform.
pub type StreamRng = ChaCha8Rng;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic, independent random stream for `(seed, stream)`.
pub fn random_stream(seed: u64, stream: u64) -> StreamRng {
    let mut state = seed;
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream);
    rng
}

/// Bits of the stream id reserved for the replicate index.
const REPLICATE_BITS: u64 = 40;

/// Stream for replicate `rep` of the estimator identified by `salt`.
///
/// Distinct salts give disjoint stream ranges as long as `rep < 2^40`.
pub fn replicate_stream(seed: u64, salt: u64, rep: u64) -> StreamRng {
    debug_assert!(rep < (1 << REPLICATE_BITS));
    random_stream(seed, (salt << REPLICATE_BITS) | rep)
}

/// Descending factorial `(x)_d = x(x-1)···(x-d+1)`; the empty product is 1.
pub fn descending_factorial(x: f64, d: u32) -> f64 {
    (0..d).fold(1.0, |acc, i| acc * (x - i as f64))
}

/// Elementary symmetric polynomial `e_k` of the values, by the streaming
/// one-pass recurrence in O(n·k).
///
/// `k! · e_k(s)` equals the sum over ordered k-tuples of distinct indices
/// of the product `s[u_1]···s[u_k]`, which is how the moment estimators
/// aggregate subfamily sizes without enumerating tuples.
pub fn elementary_symmetric(values: &[u64], k: usize) -> f64 {
    let mut e = vec![0.0f64; k + 1];
    e[0] = 1.0;
    for &v in values {
        let v = v as f64;
        for j in (1..=k.min(e.len() - 1)).rev() {
            e[j] += v * e[j - 1];
        }
    }
    e[k]
}

/// Two-sided Kolmogorov–Smirnov statistic of `samples` against the
/// reference distribution function `cdf`.
pub fn ks_statistic<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    assert!(!samples.is_empty(), "ks_statistic needs a nonempty sample");
    let mut xs = samples.to_vec();
    xs.sort_unstable_by(|a, b| a.partial_cmp(b).expect("NaN in KS sample"));
    let n = xs.len() as f64;
    let mut sup = 0.0f64;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        let lo = f - i as f64 / n;
        let hi = (i + 1) as f64 / n - f;
        sup = sup.max(lo).max(hi);
    }
    sup
}

/// Critical value of the KS statistic for sample size `n` at level
/// `alpha`, obtained by simulating `null_reps` null statistics
/// (uniform samples against the identity CDF; the null law is
/// distribution-free for continuous references).
pub fn ks_critical_value(n: usize, alpha: f64, null_reps: usize, rng: &mut StreamRng) -> f64 {
    use rand::Rng;
    let mut stats = Vec::with_capacity(null_reps);
    let mut sample = vec![0.0f64; n];
    for _ in 0..null_reps {
        for s in sample.iter_mut() {
            *s = rng.gen::<f64>();
        }
        stats.push(ks_statistic(&sample, |x| x));
    }
    stats.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = (((1.0 - alpha) * null_reps as f64).ceil() as usize).clamp(1, null_reps) - 1;
    stats[idx]
}

/// Chi-square goodness-of-fit against the uniform law over the bins.
pub struct ChiSquareTest {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

pub fn chi_square_uniform(counts: &[u64]) -> ChiSquareTest {
    assert!(counts.len() >= 2, "need at least two bins");
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let statistic = counts
        .iter()
        .map(|&o| {
            let d = o as f64 - expected;
            d * d / expected
        })
        .sum::<f64>();
    let dof = counts.len() - 1;
    ChiSquareTest {
        statistic,
        dof,
        p_value: chi_square_pvalue(statistic, dof),
    }
}

/// Upper-tail p-value of a chi-square statistic with `dof` degrees of freedom.
pub fn chi_square_pvalue(statistic: f64, dof: usize) -> f64 {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let dist = ChiSquared::new(dof as f64).expect("dof > 0");
    1.0 - dist.cdf(statistic)
}

/// Streaming mean/variance accumulator (Welford), mergeable so that
/// replicate-parallel runs reduce deterministically.
#[derive(Debug, Clone, Copy, Default)]
pub struct Accumulator {
    count: u64,
    mean: f64,
    m2: f64,
}

impl Accumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Merge another accumulator into this one (Chan's parallel update).
    pub fn merge(&mut self, other: &Accumulator) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n1 = self.count as f64;
        let n2 = other.count as f64;
        let n = n1 + n2;
        let delta = other.mean - self.mean;
        self.mean += delta * n2 / n;
        self.m2 += other.m2 + delta * delta * n1 * n2 / n;
        self.count += other.count;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Population variance `m2 / count`.
    pub fn variance(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.m2 / self.count as f64
        }
    }

    /// Standard error of the mean: `sqrt(m2/count)/sqrt(count)`.
    pub fn std_error(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).sqrt() / (self.count as f64).sqrt()
        }
    }
}

/// Replicates per work-queue chunk. Chunks are accumulated sequentially
/// and merged in chunk order, so the reduction is byte-identical for any
/// thread count.
const CHUNK: u64 = 256;

/// Run `reps` replicates of `f` in parallel and accumulate the returned
/// values. Replicate `rep` always sees `replicate_stream(seed, salt, rep)`.
pub fn parallel_accumulate<F>(reps: u64, seed: u64, salt: u64, f: F) -> Result<Accumulator>
where
    F: Fn(u64, &mut StreamRng) -> Result<f64> + Sync,
{
    let starts: Vec<u64> = (0..reps).step_by(CHUNK as usize).collect();
    let chunks: Vec<Accumulator> = starts
        .par_iter()
        .map(|&start| {
            let mut acc = Accumulator::new();
            for rep in start..(start + CHUNK).min(reps) {
                let mut rng = replicate_stream(seed, salt, rep);
                acc.push(f(rep, &mut rng)?);
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = Accumulator::new();
    for c in &chunks {
        total.merge(c);
    }
    Ok(total)
}

/// Parallel map over replicate indices with per-replicate streams; results
/// come back ordered by replicate index.
pub fn parallel_map<T, F>(reps: u64, seed: u64, salt: u64, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64, &mut StreamRng) -> Result<T> + Sync,
{
    (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = replicate_stream(seed, salt, rep);
            f(rep, &mut rng)
        })
        .collect()
}
