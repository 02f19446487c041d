//! Planar coalescents: the merger process read off a sorted sample of a
//! planar forest, encoded as a sequence of events `(τ_i, (j_i, d_i))` —
//! at backward time `τ_i` the `d_i` consecutive blocks starting at block
//! `j_i` merge. Because samples are sorted in planar order, blocks are
//! always intervals of consecutive integers.
//!
//! Also provides the pruning operator that removes the first merger, the
//! de-planarization by a uniform leaf relabelling, and the reference
//! planar Kingman coalescent.

use rand::Rng;

use crate::forest::{Forest, NodeId};
use crate::stats::StreamRng;
use crate::{Error, Result};

/// One coalescence event: blocks `first_block .. first_block+width-1`
/// (1-based) merge at backward time `tau`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Merger {
    pub tau: f64,
    pub first_block: usize,
    pub width: usize,
}

/// A planar coalescent on `k` leaves observed over backward time
/// `[0, horizon)`.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct PlanarCoalescent {
    k: usize,
    horizon: f64,
    events: Vec<Merger>,
}

impl PlanarCoalescent {
    pub fn new(k: usize, horizon: f64, events: Vec<Merger>) -> Result<Self> {
        let mut blocks = k;
        let mut last = 0.0f64;
        for (i, e) in events.iter().enumerate() {
            let ok = e.tau < horizon
                && (i == 0 || e.tau > last)
                && e.width >= 2
                && e.first_block >= 1
                && e.first_block + e.width - 1 <= blocks;
            if !ok {
                return Err(Error::InvalidParameter(format!(
                    "invalid merger {e:?} at position {i} with {blocks} blocks"
                )));
            }
            last = e.tau;
            blocks -= e.width - 1;
        }
        Ok(Self { k, horizon, events })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn events(&self) -> &[Merger] {
        &self.events
    }

    /// Number of blocks remaining after all recorded events.
    pub fn final_block_count(&self) -> usize {
        self.k - self.events.iter().map(|e| e.width - 1).sum::<usize>()
    }

    /// Backward time of the first merger, if any occurred.
    pub fn first_merger(&self) -> Option<&Merger> {
        self.events.first()
    }

    /// Interval partition of the leaves at backward time `tau` (blocks as
    /// leaf index ranges, 0-based, in planar order).
    pub fn blocks_at(&self, tau: f64) -> Vec<std::ops::Range<usize>> {
        // gap g (between leaves g and g+1) closes at the event that merges
        // across it; reconstruct closure times, then cut at open gaps
        let closure = self.gap_closures();
        let mut out = Vec::new();
        let mut start = 0usize;
        for g in 0..self.k.saturating_sub(1) {
            if !(closure[g].is_finite() && closure[g] < tau) {
                out.push(start..g + 1);
                start = g + 1;
            }
        }
        out.push(start..self.k);
        out
    }

    /// Backward time at which each of the `k-1` leaf gaps closes
    /// (`INFINITY` when it never does within the horizon).
    fn gap_closures(&self) -> Vec<f64> {
        let mut closure = vec![f64::INFINITY; self.k.saturating_sub(1)];
        // map current block index -> leftmost leaf of the block
        let mut block_start: Vec<usize> = (0..self.k).collect();
        for e in &self.events {
            let lo = e.first_block - 1;
            let hi = lo + e.width - 1; // inclusive block range merging
            for b in lo..hi {
                let gap = block_start[b + 1] - 1;
                closure[gap] = e.tau;
            }
            block_start.drain(lo + 1..=hi);
        }
        closure
    }

    /// Remove the first merger: the coalescent of the remaining
    /// `k - d₁ + 1` lineages, with event times shifted by `τ₁` and the
    /// horizon shortened accordingly.
    pub fn theta_prune(&self) -> Result<PlanarCoalescent> {
        let first = self.events.first().ok_or(Error::NoEvents)?;
        let tau1 = first.tau;
        let events = self.events[1..]
            .iter()
            .map(|e| Merger {
                tau: e.tau - tau1,
                ..*e
            })
            .collect();
        PlanarCoalescent::new(self.k - first.width + 1, self.horizon - tau1, events)
    }

    /// Rescale all event times and the horizon by `factor`.
    pub fn rescale(&self, factor: f64) -> PlanarCoalescent {
        PlanarCoalescent {
            k: self.k,
            horizon: self.horizon * factor,
            events: self
                .events
                .iter()
                .map(|e| Merger {
                    tau: e.tau * factor,
                    ..*e
                })
                .collect(),
        }
    }

    /// Relabel the leaves by an independent uniform permutation and
    /// return the resulting plain (non-planar) partition path.
    pub fn deplanarize(&self, rng: &mut StreamRng) -> PartitionPath {
        let mut perm: Vec<usize> = (0..self.k).collect();
        // Fisher-Yates
        for i in (1..self.k).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        self.deplanarize_with(&perm)
    }

    /// Deterministic variant with an injected permutation (`perm[i]` is
    /// the new label of planar leaf `i`).
    pub fn deplanarize_with(&self, perm: &[usize]) -> PartitionPath {
        assert_eq!(perm.len(), self.k);
        let mut steps = Vec::with_capacity(self.events.len() + 1);
        let canon = |ranges: Vec<std::ops::Range<usize>>| -> Vec<Vec<usize>> {
            let mut blocks: Vec<Vec<usize>> = ranges
                .into_iter()
                .map(|r| {
                    let mut b: Vec<usize> = r.map(|i| perm[i]).collect();
                    b.sort_unstable();
                    b
                })
                .collect();
            blocks.sort_by_key(|b| b[0]);
            blocks
        };
        steps.push(PartitionStep {
            tau: 0.0,
            blocks: canon(self.blocks_at(0.0)),
        });
        for e in &self.events {
            // partition immediately after the event at time tau
            steps.push(PartitionStep {
                tau: e.tau,
                blocks: canon(self.blocks_at(e.tau + f64::EPSILON * e.tau.abs().max(1.0))),
            });
        }
        PartitionPath {
            k: self.k,
            horizon: self.horizon,
            steps,
        }
    }

    /// CSV rows `tau,j,d`.
    pub fn to_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "tau,j,d")?;
        for e in &self.events {
            writeln!(w, "{},{},{}", e.tau, e.first_block, e.width)?;
        }
        Ok(())
    }
}

/// A right-continuous partition-valued step path on backward time.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct PartitionPath {
    pub k: usize,
    pub horizon: f64,
    pub steps: Vec<PartitionStep>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct PartitionStep {
    pub tau: f64,
    pub blocks: Vec<Vec<usize>>,
}

impl PartitionPath {
    /// JSON list of `{tau, blocks}` steps.
    pub fn to_json(&self) -> crate::Result<String> {
        Ok(serde_json::to_string(&self.steps)?)
    }

    /// Unordered pair of leaf labels merged by the first event, for
    /// binary first mergers.
    pub fn first_merger_pair(&self) -> Option<(usize, usize)> {
        if self.steps.len() < 2 {
            return None;
        }
        let before = &self.steps[0].blocks;
        let after = &self.steps[1].blocks;
        let merged: Vec<&Vec<usize>> = before.iter().filter(|b| !after.contains(b)).collect();
        if merged.len() == 2 && merged[0].len() == 1 && merged[1].len() == 1 {
            let (a, b) = (merged[0][0], merged[1][0]);
            Some((a.min(b), a.max(b)))
        } else {
            None
        }
    }
}

/// Extract the planar coalescent spanned at time `t` by `sample`, which
/// must be alive at `t`, pairwise distinct and sorted in the forest's
/// planar order (see [`Forest::sort_planar`]).
///
/// Mergers are grouped by ancestor: all sample members whose lineages
/// meet in an ancestor dying at the same instant coalesce in a single
/// event. Cross-root pairs simply never merge within the horizon.
pub fn extract(forest: &Forest, t: f64, sample: &[NodeId]) -> Result<PlanarCoalescent> {
    let k = sample.len();
    for w in sample.windows(2) {
        if w[0] == w[1] {
            return Err(Error::BadSample);
        }
    }
    for &u in sample {
        let ind = forest.individual(u);
        if !(ind.birth() <= t && t < ind.death()) {
            return Err(Error::BadSample);
        }
    }
    // gap g sits between sample[g] and sample[g+1]
    #[derive(Clone, Copy, PartialEq)]
    struct GapKey {
        tau: f64,
        ancestor: u32,
    }
    let mut gaps: Vec<Option<GapKey>> = Vec::with_capacity(k.saturating_sub(1));
    for w in sample.windows(2) {
        gaps.push(forest.mrca(w[0], w[1]).map(|m| GapKey {
            tau: t - forest.individual(m).death(),
            ancestor: m.0,
        }));
    }
    let mut keys: Vec<GapKey> = gaps.iter().flatten().copied().collect();
    keys.sort_by(|a, b| {
        a.tau
            .partial_cmp(&b.tau)
            .unwrap()
            .then(a.ancestor.cmp(&b.ancestor))
    });
    keys.dedup_by(|a, b| a.tau == b.tau && a.ancestor == b.ancestor);

    // every gap separates two blocks until it closes; cross-root gaps
    // (key None) never close but still delimit blocks
    let mut open: Vec<usize> = (0..gaps.len()).collect();
    let mut events = Vec::with_capacity(keys.len());
    for key in keys {
        let ranks: Vec<usize> = open
            .iter()
            .enumerate()
            .filter(|(_, &g)| {
                gaps[g].is_some_and(|gk| gk.tau == key.tau && gk.ancestor == key.ancestor)
            })
            .map(|(r, _)| r)
            .collect();
        debug_assert!(ranks.windows(2).all(|w| w[1] == w[0] + 1));
        events.push(Merger {
            tau: key.tau,
            first_block: ranks[0] + 1,
            width: ranks.len() + 1,
        });
        for &r in ranks.iter().rev() {
            open.remove(r);
        }
    }
    PlanarCoalescent::new(k, t, events)
}

/// Simulate the planar Kingman coalescent with rate `r`: with `p` blocks,
/// each of the `p-1` consecutive block pairs merges at rate
/// `C(p,2)·r/(p-1)`, so the total merger rate matches the plain Kingman
/// coalescent.
pub fn simulate_planar_kingman(
    k: usize,
    r: f64,
    horizon: f64,
    rng: &mut StreamRng,
) -> PlanarCoalescent {
    assert!(k >= 1 && r > 0.0);
    let mut events = Vec::new();
    let mut tau = 0.0f64;
    let mut p = k;
    while p >= 2 {
        let total = (p * (p - 1)) as f64 / 2.0 * r;
        tau += rand_distr::Distribution::sample(&rand_distr::Exp::new(total).unwrap(), rng);
        if tau >= horizon {
            break;
        }
        let j = rng.gen_range(1..p);
        events.push(Merger {
            tau,
            first_block: j,
            width: 2,
        });
        p -= 1;
    }
    PlanarCoalescent::new(k, horizon, events).expect("simulated events are valid")
}
