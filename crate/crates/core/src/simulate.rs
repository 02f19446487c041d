//! Exact event-driven simulation of the population process and of its
//! spine variant.
//!
//! Forward process: at population size `n`, each individual dies at rate
//! `q(n/K)` and is replaced by `L(n/K)` offspring, so jumps are
//! `n → n + L - 1` at total rate `n·q(n/K)`.
//!
//! Spine process: `k` distinguished carrier lineages reproduce at the
//! modified rate `q·m` with size-biased progeny (so `n → n + L^{(1)} - 1`
//! at rate `k·m·q`), the other `n - k` individuals behave as in the
//! forward process. Both runs accumulate the growth integral
//! `∫ q(Z_s/K)(m(Z_s/K) - 1) ds` exactly, interval by interval, since all
//! rates are constant between jumps.

use rand::Rng;
use rand_distr::Distribution;

use crate::forest::{Forest, NodeId};
use crate::offspring::{BranchRate, OffspringLaw};
use crate::stats::StreamRng;
use crate::{Error, Result};

/// How a run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Completed,
    CappedEvents,
    CappedPopulation,
}

/// Simulation parameters. `capacity` is the carrying capacity `K`;
/// densities are always population over capacity.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SimConfig {
    pub capacity: f64,
    pub initial: u64,
    pub law: OffspringLaw,
    pub rate: BranchRate,
    /// Number of distinguished spine lineages (0 for the forward process).
    #[serde(default)]
    pub spines: u64,
    pub t_max: f64,
    #[serde(default)]
    pub max_events: u64,
    #[serde(default)]
    pub max_pop: u64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub record_path: bool,
    /// Prune the forest every this many events (0 = twice the capacity).
    #[serde(default)]
    pub prune_every: u64,
}

fn default_beta() -> f64 {
    0.5
}

fn default_true() -> bool {
    true
}

impl SimConfig {
    pub fn new(capacity: f64, initial: u64, law: OffspringLaw, rate: BranchRate) -> Self {
        SimConfig {
            capacity,
            initial,
            law,
            rate,
            spines: 0,
            t_max: 1.0,
            max_events: 0,
            max_pop: 0,
            beta: default_beta(),
            seed: 0,
            record_path: true,
            prune_every: 0,
        }
    }

    /// Fill derived defaults (caps, prune period) and check invariants.
    pub fn validated(mut self) -> Result<Self> {
        if !(self.capacity > 0.0) || !self.capacity.is_finite() {
            return Err(Error::Config(format!(
                "capacity must be positive, got {}",
                self.capacity
            )));
        }
        if !(self.t_max >= 0.0) || !self.t_max.is_finite() {
            return Err(Error::Config(format!("bad horizon {}", self.t_max)));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!(
                "beta must be >= 0, got {}",
                self.beta
            )));
        }
        if self.initial < self.spines {
            return Err(Error::Config(format!(
                "initial population {} below spine count {}",
                self.initial, self.spines
            )));
        }
        if self.max_pop == 0 {
            self.max_pop = (20.0 * self.capacity).ceil() as u64;
        }
        if self.max_events == 0 {
            self.max_events = 1_000_000_000;
        }
        if self.prune_every == 0 {
            self.prune_every = (2.0 * self.capacity).ceil() as u64;
        }
        if self.max_pop <= self.initial {
            return Err(Error::Config(
                "population cap must exceed the initial size".into(),
            ));
        }
        Ok(self)
    }

    fn density(&self, n: u64) -> f64 {
        n as f64 / self.capacity
    }
}

/// Piecewise-constant population path with its exact growth integral.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// Jump times; `times[0] = 0`. Empty when the path is not recorded.
    pub times: Vec<f64>,
    /// Post-jump population sizes aligned with `times`.
    pub pops: Vec<u64>,
    pub capacity: f64,
    pub end_time: f64,
    pub end_pop: u64,
    pub pop_min: u64,
    pub pop_max: u64,
    pub n_events: u64,
    pub status: RunStatus,
    /// `∫_0^end q(Z_s/K)(m(Z_s/K)-1) ds`, accumulated interval by interval.
    pub fk_unit: f64,
}

impl Trajectory {
    /// Feynman–Kac exponent for `k` spines: `k·∫ q(m-1) ds`.
    pub fn fk_integral(&self, k: u64) -> f64 {
        k as f64 * self.fk_unit
    }

    /// Recompute the growth integral from the stored path; `None` when the
    /// path was not recorded.
    pub fn recompute_fk_unit(&self, law: &OffspringLaw, rate: &BranchRate) -> Option<f64> {
        if self.times.is_empty() {
            return None;
        }
        let mut total = 0.0;
        for i in 0..self.times.len() {
            let until = if i + 1 < self.times.len() {
                self.times[i + 1]
            } else {
                self.end_time
            };
            let n = self.pops[i];
            if n > 0 {
                let z = n as f64 / self.capacity;
                total += (until - self.times[i]) * rate.rate(z) * (law.mean(z).unwrap() - 1.0);
            }
        }
        Some(total)
    }

    /// Largest density deviation `sup |Z_s/K - 1|` along the run.
    pub fn sup_density_deviation(&self) -> f64 {
        let lo = (self.pop_min as f64 / self.capacity - 1.0).abs();
        let hi = (self.pop_max as f64 / self.capacity - 1.0).abs();
        lo.max(hi)
    }

    /// CSV rows `time,population` (requires a recorded path).
    pub fn to_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "time,population")?;
        for (t, n) in self.times.iter().zip(&self.pops) {
            writeln!(w, "{t},{n}")?;
        }
        Ok(())
    }
}

/// First time the density leaves the ball `|z - 1| < gamma`, or `None`.
/// Requires a recorded path.
pub fn density_excursion(traj: &Trajectory, gamma: f64) -> Result<Option<f64>> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "excursion radius must be positive, got {gamma}"
        )));
    }
    if traj.times.is_empty() {
        return Err(Error::InvalidParameter(
            "density_excursion needs a recorded path".into(),
        ));
    }
    for (t, n) in traj.times.iter().zip(&traj.pops) {
        if (*n as f64 / traj.capacity - 1.0).abs() >= gamma {
            return Ok(Some(*t));
        }
    }
    Ok(None)
}

struct PathRecorder {
    times: Vec<f64>,
    pops: Vec<u64>,
    record: bool,
    pop_min: u64,
    pop_max: u64,
}

impl PathRecorder {
    fn new(z0: u64, record: bool) -> Self {
        let mut r = PathRecorder {
            times: Vec::new(),
            pops: Vec::new(),
            record,
            pop_min: z0,
            pop_max: z0,
        };
        if record {
            r.times.push(0.0);
            r.pops.push(z0);
        }
        r
    }

    fn push(&mut self, t: f64, n: u64) {
        self.pop_min = self.pop_min.min(n);
        self.pop_max = self.pop_max.max(n);
        if self.record {
            self.times.push(t);
            self.pops.push(n);
        }
    }
}

/// Exact forward (Gillespie) run of the population process, recording
/// every event in the genealogy.
pub fn run_forward(config: &SimConfig, rng: &mut StreamRng) -> Result<(Trajectory, Forest)> {
    let cfg = config.clone().validated()?;
    let mut forest = Forest::new(cfg.initial as usize);
    let mut rec = PathRecorder::new(cfg.initial, cfg.record_path);
    let mut t = 0.0f64;
    let mut n = cfg.initial;
    let mut fk_unit = 0.0f64;
    let mut n_events = 0u64;
    let exp1 = rand_distr::Exp1;
    let mut status = RunStatus::Completed;

    while n > 0 {
        if n_events >= cfg.max_events {
            status = RunStatus::CappedEvents;
            break;
        }
        if n >= cfg.max_pop {
            status = RunStatus::CappedPopulation;
            break;
        }
        let z = cfg.density(n);
        let q = cfg.rate.rate(z);
        let growth = q * (cfg.law.mean(z)? - 1.0);
        let total = n as f64 * q;
        let dt: f64 = {
            let e: f64 = exp1.sample(rng);
            e / total
        };
        if t + dt >= cfg.t_max {
            fk_unit += (cfg.t_max - t) * growth;
            t = cfg.t_max;
            break;
        }
        t += dt;
        fk_unit += dt * growth;
        let victim = forest.alive_at_slot(rng.gen_range(0..n as usize));
        let kids = cfg.law.sample(z, rng);
        forest.record_death(victim, t, kids)?;
        n = n + kids - 1;
        n_events += 1;
        rec.push(t, n);
        if n_events % cfg.prune_every == 0 {
            forest.prune();
        }
    }
    if status == RunStatus::Completed && t < cfg.t_max {
        // extinction: the population is absorbed at 0
        t = cfg.t_max;
    }
    forest.advance_to(t)?;
    Ok((
        Trajectory {
            times: rec.times,
            pops: rec.pops,
            capacity: cfg.capacity,
            end_time: t,
            end_pop: n,
            pop_min: rec.pop_min,
            pop_max: rec.pop_max,
            n_events,
            status,
            fk_unit,
        },
        forest,
    ))
}

/// A spine run: the trajectory, the forest, and the arena ids of the `k`
/// carrier individuals at the final time.
pub struct SpineRun {
    pub trajectory: Trajectory,
    pub forest: Forest,
    pub carriers: Vec<NodeId>,
}

/// Run the spine process with `config.spines` distinguished lineages.
///
/// Two competing exponential clocks at population `n`: an ordinary event
/// (a uniformly chosen non-carrier dies, `L` offspring) at rate
/// `(n-k)·q`, and a spine event (a uniformly chosen carrier dies with
/// size-biased progeny, one child inheriting the spine uniformly at
/// random) at rate `k·m·q`. The population never drops below `k`.
///
/// Which child carries the spine on is not pinned down by the population
/// law; the uniform choice keeps the sample exchangeable. Spine runs do
/// not prune their forest.
pub fn run_spine(config: &SimConfig, rng: &mut StreamRng) -> Result<SpineRun> {
    let cfg = config.clone().validated()?;
    let k = cfg.spines;
    let mut forest = Forest::new(cfg.initial as usize);
    let mut carriers: Vec<NodeId> = (0..k as u32).map(NodeId).collect();
    let mut rec = PathRecorder::new(cfg.initial, cfg.record_path);
    let mut t = 0.0f64;
    let mut n = cfg.initial;
    let mut fk_unit = 0.0f64;
    let mut n_events = 0u64;
    let exp1 = rand_distr::Exp1;
    let mut status = RunStatus::Completed;

    while n > 0 {
        if n_events >= cfg.max_events {
            status = RunStatus::CappedEvents;
            break;
        }
        if n >= cfg.max_pop {
            status = RunStatus::CappedPopulation;
            break;
        }
        let z = cfg.density(n);
        let q = cfg.rate.rate(z);
        let m = cfg.law.mean(z)?;
        let growth = q * (m - 1.0);
        let rate_ordinary = (n - k) as f64 * q;
        let rate_spine = k as f64 * m * q;
        let total = rate_ordinary + rate_spine;
        if total <= 0.0 {
            t = cfg.t_max;
            break;
        }
        let dt: f64 = {
            let e: f64 = exp1.sample(rng);
            e / total
        };
        if t + dt >= cfg.t_max {
            fk_unit += (cfg.t_max - t) * growth;
            t = cfg.t_max;
            break;
        }
        t += dt;
        fk_unit += dt * growth;
        if rng.gen::<f64>() * total < rate_ordinary {
            // ordinary event on a uniformly chosen non-carrier
            let victim = loop {
                let cand = forest.alive_at_slot(rng.gen_range(0..n as usize));
                if !carriers.contains(&cand) {
                    break cand;
                }
            };
            let kids = cfg.law.sample(z, rng);
            forest.record_death(victim, t, kids)?;
            n = n + kids - 1;
        } else {
            let ci = rng.gen_range(0..carriers.len());
            let kids = cfg.law.sample_biased(z, 1, 0.0, rng)?;
            let range = forest.record_death(carriers[ci], t, kids)?;
            carriers[ci] = NodeId(range.start + rng.gen_range(0..kids as u32));
            n = n + kids - 1;
        }
        n_events += 1;
        rec.push(t, n);
        debug_assert!(n >= k);
        debug_assert!(carriers.iter().all(|&c| forest.is_alive(c)));
    }
    if status == RunStatus::Completed && t < cfg.t_max {
        t = cfg.t_max;
    }
    forest.advance_to(t)?;
    Ok(SpineRun {
        trajectory: Trajectory {
            times: rec.times,
            pops: rec.pops,
            capacity: cfg.capacity,
            end_time: t,
            end_pop: n,
            pop_min: rec.pop_min,
            pop_max: rec.pop_max,
            n_events,
            status,
            fk_unit,
        },
        forest,
        carriers,
    })
}
