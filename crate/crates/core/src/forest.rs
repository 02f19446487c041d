//! Genealogy storage: a growing arena of individuals with birth/death
//! times and parent/child links, answering ancestry queries (MRCA,
//! pairwise genealogical distance, subfamily sizes, coalescence spectrum).
//!
//! Individuals are arena indices rather than label strings. The planar
//! order of the forest is encoded structurally: roots are numbered, and
//! the children of an individual occupy a contiguous arena range in birth
//! order; a depth-first walk over that structure reproduces the
//! lexicographic order of the classical Ulam–Harris labelling.

use std::fmt::Write as _;
use std::ops::Range;

use crate::{Error, Result};

/// Arena index of an individual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u32);

const NO_PARENT: u32 = u32::MAX;
const DEAD: u32 = u32::MAX;

/// One individual. `death` is `f64::INFINITY` while alive; a child's
/// birth time always equals its parent's death time.
#[derive(Debug, Clone)]
pub struct Individual {
    parent: u32,
    birth: f64,
    death: f64,
    first_child: u32,
    n_children: u32,
    root: u32,
    alive_slot: u32,
}

impl Individual {
    pub fn parent(&self) -> Option<NodeId> {
        (self.parent != NO_PARENT).then_some(NodeId(self.parent))
    }
    pub fn birth(&self) -> f64 {
        self.birth
    }
    pub fn death(&self) -> f64 {
        self.death
    }
    pub fn is_alive(&self) -> bool {
        self.alive_slot != DEAD
    }
    /// Index of the time-0 root this individual descends from.
    pub fn root(&self) -> u32 {
        self.root
    }
    pub fn children(&self) -> Range<u32> {
        self.first_child..self.first_child + self.n_children
    }
}

/// Aggregated merger information for one dead ancestor, used by the
/// moment estimators: alive-descendant pair/triple weights of its child
/// subtrees and the number of alive individuals before/after its planar
/// span.
#[derive(Debug, Clone, Copy)]
pub struct MergerStat {
    pub node: NodeId,
    /// Backward time from the query time to the ancestor's death.
    pub depth: f64,
    /// Sum over unordered child-subtree pairs of the product of their
    /// alive-descendant counts.
    pub pair_weight: f64,
    /// Same over unordered triples.
    pub triple_weight: f64,
    pub alive_before: u64,
    pub alive_after: u64,
}

/// The genealogical forest at a point in simulated time.
#[derive(Debug, Clone)]
pub struct Forest {
    arena: Vec<Individual>,
    alive: Vec<u32>,
    /// Current top-level nodes in root order (original roots until a
    /// prune compresses extinct or pass-through roots away).
    tops: Vec<u32>,
    now: f64,
    n_roots: usize,
    subfamily: Vec<u64>,
}

impl Forest {
    /// Forest of `n_roots` alive roots, all born at time 0.
    pub fn new(n_roots: usize) -> Self {
        let arena: Vec<Individual> = (0..n_roots)
            .map(|i| Individual {
                parent: NO_PARENT,
                birth: 0.0,
                death: f64::INFINITY,
                first_child: 0,
                n_children: 0,
                root: i as u32,
                alive_slot: i as u32,
            })
            .collect();
        Forest {
            alive: (0..n_roots as u32).collect(),
            tops: (0..n_roots as u32).collect(),
            arena,
            now: 0.0,
            n_roots,
            subfamily: vec![1; n_roots],
        }
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    /// Advance the forest clock without an event (no individual dies).
    /// Genealogical depths are measured from `now`, so simulations must
    /// advance the clock to the horizon when the last holding time
    /// overshoots it.
    pub fn advance_to(&mut self, t: f64) -> Result<()> {
        if t < self.now {
            return Err(Error::TimeOrder { t, now: self.now });
        }
        self.now = t;
        Ok(())
    }

    pub fn n_roots(&self) -> usize {
        self.n_roots
    }

    pub fn alive_count(&self) -> usize {
        self.alive.len()
    }

    pub fn arena_len(&self) -> usize {
        self.arena.len()
    }

    pub fn individual(&self, u: NodeId) -> &Individual {
        &self.arena[u.0 as usize]
    }

    /// Alive individual stored in slot `slot` of the alive set (slots are
    /// not stable across events; use for uniform picks only).
    pub fn alive_at_slot(&self, slot: usize) -> NodeId {
        NodeId(self.alive[slot])
    }

    pub fn is_alive(&self, u: NodeId) -> bool {
        self.arena[u.0 as usize].is_alive()
    }

    /// Kill `u` at time `t` and append `n_offspring` children born at `t`.
    /// Returns the arena range of the new children.
    pub fn record_death(&mut self, u: NodeId, t: f64, n_offspring: u64) -> Result<Range<u32>> {
        let idx = u.0 as usize;
        if idx >= self.arena.len() || !self.arena[idx].is_alive() {
            return Err(Error::NotAlive(u.0));
        }
        if t < self.now {
            return Err(Error::TimeOrder { t, now: self.now });
        }
        let root = self.arena[idx].root;
        let first = self.arena.len() as u32;

        // remove from the alive set with a swap
        let slot = self.arena[idx].alive_slot as usize;
        let moved = *self.alive.last().unwrap();
        self.alive.swap_remove(slot);
        if slot < self.alive.len() {
            self.arena[moved as usize].alive_slot = slot as u32;
        }

        let ind = &mut self.arena[idx];
        ind.death = t;
        ind.alive_slot = DEAD;
        ind.first_child = first;
        ind.n_children = n_offspring as u32;

        for _ in 0..n_offspring {
            let slot = self.alive.len() as u32;
            self.alive.push(self.arena.len() as u32);
            self.arena.push(Individual {
                parent: u.0,
                birth: t,
                death: f64::INFINITY,
                first_child: 0,
                n_children: 0,
                root,
                alive_slot: slot,
            });
        }
        self.subfamily[root as usize] += n_offspring;
        self.subfamily[root as usize] -= 1;
        self.now = t;
        Ok(first..first + n_offspring as u32)
    }

    /// Most recent common ancestor under the ancestry partial order, or
    /// `None` when `u` and `v` descend from different roots.
    ///
    /// Two-pointer ascent on arena indices: a parent always has a smaller
    /// index than its children, so no depth bookkeeping is needed.
    pub fn mrca(&self, u: NodeId, v: NodeId) -> Option<NodeId> {
        let (mut a, mut b) = (u.0, v.0);
        if self.arena[a as usize].root != self.arena[b as usize].root {
            return None;
        }
        while a != b {
            if a > b {
                a = self.arena[a as usize].parent;
            } else {
                b = self.arena[b as usize].parent;
            }
            debug_assert!(a != NO_PARENT && b != NO_PARENT);
        }
        Some(NodeId(a))
    }

    /// Genealogical distance at time `t` between individuals alive at `t`:
    /// the time back to the death of their most recent common ancestor.
    /// `0` for identical individuals, infinite for distinct roots' lines.
    pub fn pairwise_distance(&self, t: f64, u: NodeId, v: NodeId) -> Result<f64> {
        for w in [u, v] {
            let ind = &self.arena[w.0 as usize];
            if !(ind.birth <= t && t < ind.death) {
                return Err(Error::NotAlive(w.0));
            }
        }
        if u == v {
            return Ok(0.0);
        }
        match self.mrca(u, v) {
            Some(w) => Ok(t - self.arena[w.0 as usize].death),
            None => Ok(f64::INFINITY),
        }
    }

    /// Current size of the subfamily descending from each time-0 root.
    pub fn subfamily_sizes(&self) -> &[u64] {
        &self.subfamily
    }

    /// Alive-descendant count per arena node, by one reverse pass
    /// (children always have larger indices than their parent).
    fn alive_descendants(&self) -> Vec<u64> {
        let mut cnt = vec![0u64; self.arena.len()];
        for u in (0..self.arena.len()).rev() {
            if self.arena[u].is_alive() {
                cnt[u] += 1;
            }
            let p = self.arena[u].parent;
            if p != NO_PARENT {
                cnt[p as usize] += cnt[u];
            }
        }
        cnt
    }

    /// For every dead ancestor whose death separates at least one alive
    /// pair, the backward time to its death and the number of alive pairs
    /// that coalesce exactly there. The pair counts over the list plus the
    /// cross-root (never coalescing) pairs always total C(alive, 2).
    pub fn coalescence_spectrum(&self) -> Vec<(f64, u64)> {
        let cnt = self.alive_descendants();
        let mut out = Vec::new();
        for ind in &self.arena {
            if ind.is_alive() || ind.n_children < 2 {
                continue;
            }
            let mut sum = 0u64;
            let mut sq = 0u64;
            for c in ind.children() {
                let s = cnt[c as usize];
                sum += s;
                sq += s * s;
            }
            let pairs = (sum * sum - sq) / 2;
            if pairs > 0 {
                out.push((self.now - ind.death, pairs));
            }
        }
        out
    }

    /// Alive individuals in planar (depth-first, root-then-birth) order.
    pub fn alive_planar(&self) -> Vec<NodeId> {
        let mut out = Vec::with_capacity(self.alive.len());
        self.walk_planar(|u, ind| {
            if ind.is_alive() {
                out.push(NodeId(u));
            }
        });
        out
    }

    /// Depth-first pre-order walk over the whole forest in planar order.
    fn walk_planar<F: FnMut(u32, &Individual)>(&self, mut f: F) {
        let mut stack: Vec<u32> = Vec::new();
        for &top in self.tops.iter().rev() {
            stack.push(top);
        }
        while let Some(u) = stack.pop() {
            let ind = &self.arena[u as usize];
            f(u, ind);
            for c in ind.children().rev() {
                stack.push(c);
            }
        }
    }

    /// Sort a set of alive individuals into planar order.
    pub fn sort_planar(&self, sample: &mut [NodeId]) {
        let mut rank = std::collections::HashMap::with_capacity(sample.len());
        let want: std::collections::HashSet<u32> = sample.iter().map(|n| n.0).collect();
        let mut next = 0usize;
        self.walk_planar(|u, _| {
            if want.contains(&u) {
                rank.insert(u, next);
                next += 1;
            }
        });
        sample.sort_by_key(|n| rank[&n.0]);
    }

    /// Merger statistics for every dead ancestor with at least two
    /// alive-bearing child subtrees, in planar order of the ancestor.
    pub fn merger_stats(&self) -> Vec<MergerStat> {
        let cnt = self.alive_descendants();
        let total_alive = self.alive.len() as u64;
        // planar span of each node: alive individuals strictly before the
        // subtree, and the subtree's own alive count, locate it
        let mut prefix = vec![0u64; self.arena.len()];
        let mut seen = 0u64;
        self.walk_planar(|u, ind| {
            prefix[u as usize] = seen;
            if ind.is_alive() {
                seen += 1;
            }
        });
        let mut out = Vec::new();
        self.walk_planar(|u, ind| {
            if ind.is_alive() || ind.n_children < 2 {
                return;
            }
            let (mut e1, mut e2, mut e3) = (0.0f64, 0.0f64, 0.0f64);
            for c in ind.children() {
                let s = cnt[c as usize] as f64;
                if s == 0.0 {
                    continue;
                }
                e3 += e2 * s;
                e2 += e1 * s;
                e1 += s;
            }
            if e2 > 0.0 {
                out.push(MergerStat {
                    node: NodeId(u),
                    depth: self.now - ind.death,
                    pair_weight: e2,
                    triple_weight: e3,
                    alive_before: prefix[u as usize],
                    alive_after: total_alive - prefix[u as usize] - cnt[u as usize],
                });
            }
        });
        out
    }

    /// Drop dead individuals with no alive descendants and compress
    /// pass-through chains (dead individuals with a single alive-bearing
    /// child subtree). Every ancestry query among alive individuals is
    /// unchanged; arena indices are remapped.
    pub fn prune(&mut self) {
        let cnt = self.alive_descendants();
        let keep: Vec<bool> = self
            .arena
            .iter()
            .map(|ind| {
                if ind.is_alive() {
                    return true;
                }
                let bearing = ind.children().filter(|&c| cnt[c as usize] > 0).count();
                bearing >= 2
            })
            .collect();

        // nearest kept node at or below `u`, following the unique
        // alive-bearing path; None when the subtree is extinct
        let descend = |mut u: u32| -> Option<u32> {
            loop {
                if cnt[u as usize] == 0 {
                    return None;
                }
                if keep[u as usize] {
                    return Some(u);
                }
                u = self.arena[u as usize]
                    .children()
                    .find(|&c| cnt[c as usize] > 0)
                    .expect("bearing node without bearing child");
            }
        };

        let new_tops: Vec<u32> = self.tops.iter().filter_map(|&t| descend(t)).collect();

        // breadth-first rebuild keeps children contiguous in birth order
        let mut new_arena: Vec<Individual> = Vec::with_capacity(self.alive.len() * 2);
        let mut queue: std::collections::VecDeque<(u32, u32)> = std::collections::VecDeque::new();
        let mut tops = Vec::with_capacity(new_tops.len());
        for &t in &new_tops {
            let id = new_arena.len() as u32;
            let old = &self.arena[t as usize];
            new_arena.push(Individual {
                parent: NO_PARENT,
                birth: old.birth,
                death: old.death,
                first_child: 0,
                n_children: 0,
                root: old.root,
                alive_slot: old.alive_slot,
            });
            tops.push(id);
            queue.push_back((t, id));
        }
        while let Some((old_u, new_u)) = queue.pop_front() {
            let first = new_arena.len() as u32;
            let mut n = 0u32;
            for c in self.arena[old_u as usize].children() {
                if let Some(kc) = descend(c) {
                    let id = new_arena.len() as u32;
                    let old = &self.arena[kc as usize];
                    new_arena.push(Individual {
                        parent: new_u,
                        birth: old.birth,
                        death: old.death,
                        first_child: 0,
                        n_children: 0,
                        root: old.root,
                        alive_slot: old.alive_slot,
                    });
                    queue.push_back((kc, id));
                    n += 1;
                }
            }
            new_arena[new_u as usize].first_child = first;
            new_arena[new_u as usize].n_children = n;
        }

        let mut alive = Vec::with_capacity(self.alive.len());
        for (u, ind) in new_arena.iter_mut().enumerate() {
            if ind.alive_slot != DEAD {
                ind.alive_slot = alive.len() as u32;
                alive.push(u as u32);
            }
        }
        self.arena = new_arena;
        self.alive = alive;
        self.tops = tops;
    }

    /// Newick serialization of the sub-genealogy spanned by `sample`
    /// (alive individuals, planar-sorted), with branch lengths in forest
    /// time. Cross-root samples yield one tree per root, ";"-terminated
    /// each, on separate lines.
    pub fn newick(&self, sample: &[NodeId]) -> Result<String> {
        for &u in sample {
            if !self.is_alive(u) {
                return Err(Error::NotAlive(u.0));
            }
        }
        let mut sorted = sample.to_vec();
        self.sort_planar(&mut sorted);
        let mut out = String::new();
        let mut start = 0usize;
        for i in 0..sorted.len() {
            let next_root = i + 1 == sorted.len()
                || self.individual(sorted[i + 1]).root != self.individual(sorted[i]).root;
            if next_root {
                self.newick_group(&sorted[start..=i], self.now, &mut out);
                out.push_str(";\n");
                start = i + 1;
            }
        }
        Ok(out)
    }

    fn newick_group(&self, group: &[NodeId], t: f64, out: &mut String) {
        if group.len() == 1 {
            write!(out, "{}", group[0].0).unwrap();
            return;
        }
        // the spanning node is the adjacent MRCA with the earliest death
        let deaths: Vec<f64> = group
            .windows(2)
            .map(|w| {
                let m = self.mrca(w[0], w[1]).expect("same root");
                self.individual(m).death
            })
            .collect();
        let root_death = deaths.iter().cloned().fold(f64::INFINITY, f64::min);
        out.push('(');
        let mut start = 0usize;
        let mut first = true;
        for i in 0..group.len() {
            if i == group.len() - 1 || deaths[i] == root_death {
                if !first {
                    out.push(',');
                }
                first = false;
                let child_birth = self.subtree_top_time(&group[start..=i], t);
                self.newick_group(&group[start..=i], t, out);
                write!(out, ":{}", child_birth - root_death).unwrap();
                start = i + 1;
            }
        }
        out.push(')');
    }

    /// Time of the top node of the induced subtree of `group`: its own
    /// MRCA death, or the query time for a single leaf.
    fn subtree_top_time(&self, group: &[NodeId], t: f64) -> f64 {
        if group.len() == 1 {
            return t;
        }
        group
            .windows(2)
            .map(|w| self.individual(self.mrca(w[0], w[1]).unwrap()).death)
            .fold(f64::INFINITY, f64::min)
    }

    /// Dump the whole arena as CSV rows `id,parent,birth,death,root`.
    /// Alive individuals have an empty death field, roots an empty parent.
    pub fn dump_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "id,parent,birth,death,root")?;
        for (u, ind) in self.arena.iter().enumerate() {
            let parent = if ind.parent == NO_PARENT {
                String::new()
            } else {
                ind.parent.to_string()
            };
            let death = if ind.is_alive() {
                String::new()
            } else {
                ind.death.to_string()
            };
            writeln!(w, "{u},{parent},{},{death},{}", ind.birth, ind.root)?;
        }
        Ok(())
    }

    /// Internal consistency check used by tests and debug builds.
    pub fn check_invariants(&self) -> Result<()> {
        let mut alive_count = 0usize;
        for (u, ind) in self.arena.iter().enumerate() {
            if ind.is_alive() {
                alive_count += 1;
                if self.alive[ind.alive_slot as usize] != u as u32 {
                    return Err(Error::Config(format!("alive slot mismatch at {u}")));
                }
            }
            for c in ind.children() {
                let child = &self.arena[c as usize];
                // equality in freshly built forests; pruning compresses
                // pass-through chains, leaving only birth >= parent death
                if child.parent != u as u32 || child.birth < ind.death {
                    return Err(Error::Config(format!("bad child link {u} -> {c}")));
                }
            }
        }
        if alive_count != self.alive.len() {
            return Err(Error::Config("alive set size mismatch".into()));
        }
        let total: u64 = self.subfamily.iter().sum();
        if total != self.alive.len() as u64 {
            return Err(Error::Config(
                "subfamily sizes do not add up to the alive count".into(),
            ));
        }
        Ok(())
    }
}
