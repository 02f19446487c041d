//! Exact transient analysis of the population-size chain on a truncated
//! state window: generator construction for the forward and spine
//! processes, uniformization for transient distributions, and an ODE
//! route for Feynman–Kac weighted expectations
//! `E[w(Z_t)·exp(∫ V(Z_s) ds)]` (the potential breaks the stochastic
//! structure, so uniformization does not apply there).
//!
//! This module is the ground-truth oracle for the Monte Carlo estimators
//! at small carrying capacities.

use statrs::function::gamma::ln_gamma;

use crate::simulate::SimConfig;
use crate::{Error, Result};

/// What happens to probability mass that jumps outside the window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryPolicy {
    /// Out-of-window jumps leave the system; the lost mass is tracked.
    AbsorbAtEdges,
    /// Out-of-window jumps are suppressed (the chain stays put).
    ReflectReject,
}

/// Rate matrix of the population-size chain under the forward or spine
/// dynamics on a finite window, with a diagonal Feynman–Kac potential.
#[derive(Debug, Clone)]
pub struct TruncatedGenerator {
    n_min: u64,
    n_max: u64,
    /// off-diagonal transition rates per row: (column index, rate)
    rows: Vec<Vec<(u32, f64)>>,
    /// negative total outflow per row (off-diagonal plus absorbed)
    diag: Vec<f64>,
    /// rate of mass leaving the window from each state
    absorbed: Vec<f64>,
    /// diagonal potential V(n)
    potential: Vec<f64>,
    policy: BoundaryPolicy,
}

/// Enumeration cap for offspring laws without a finite support table.
const OFFSPRING_ENUM_CAP: u64 = 4096;

/// Hard cap on uniformization terms.
const UNIFORMIZATION_CAP: u64 = 10_000_000;

impl TruncatedGenerator {
    pub fn window(&self) -> (u64, u64) {
        (self.n_min, self.n_max)
    }

    pub fn policy(&self) -> BoundaryPolicy {
        self.policy
    }

    pub fn dim(&self) -> usize {
        (self.n_max - self.n_min + 1) as usize
    }

    pub fn state(&self, row: usize) -> u64 {
        self.n_min + row as u64
    }

    pub fn row_of(&self, state: u64) -> Result<usize> {
        if state < self.n_min || state > self.n_max {
            return Err(Error::OutsideWindow(state));
        }
        Ok((state - self.n_min) as usize)
    }

    pub fn off_diagonal(&self, row: usize) -> &[(u32, f64)] {
        &self.rows[row]
    }

    pub fn diagonal(&self, row: usize) -> f64 {
        self.diag[row]
    }

    pub fn absorbed_rate(&self, row: usize) -> f64 {
        self.absorbed[row]
    }

    pub fn potential(&self, row: usize) -> f64 {
        self.potential[row]
    }

    /// Replace the potential (used by tests and the recursion verifier).
    pub fn set_potential<F: Fn(u64) -> f64>(&mut self, f: F) {
        for r in 0..self.dim() {
            self.potential[r] = f(self.state(r));
        }
    }

    /// `out = (A + diag V) · y` (backward/value direction).
    fn apply<const WITH_POTENTIAL: bool>(&self, y: &[f64], out: &mut [f64]) {
        for r in 0..y.len() {
            let mut acc = self.diag[r] * y[r];
            if WITH_POTENTIAL {
                acc += self.potential[r] * y[r];
            }
            for &(c, rate) in &self.rows[r] {
                acc += rate * y[c as usize];
            }
            out[r] = acc;
        }
    }

    /// `out = (A + diag V)ᵀ · y` (forward/distribution direction).
    fn apply_transpose<const WITH_POTENTIAL: bool>(&self, y: &[f64], out: &mut [f64]) {
        for r in 0..y.len() {
            out[r] = self.diag[r] * y[r];
            if WITH_POTENTIAL {
                out[r] += self.potential[r] * y[r];
            }
        }
        for r in 0..y.len() {
            let yr = y[r];
            if yr != 0.0 {
                for &(c, rate) in &self.rows[r] {
                    out[c as usize] += rate * yr;
                }
            }
        }
    }

    /// Sparse triplet dump `from,to,rate`, diagonal included.
    pub fn dump_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "from,to,rate")?;
        for r in 0..self.dim() {
            let n = self.state(r);
            writeln!(w, "{n},{n},{}", self.diag[r])?;
            for &(c, rate) in &self.rows[r] {
                writeln!(w, "{n},{},{rate}", self.state(c as usize))?;
            }
        }
        Ok(())
    }
}

/// Build the truncated generator of the population-size chain with `k`
/// spine lineages: state `n` jumps to `n + l - 1` at rate
/// `(n-k)·q(n/K)·P(L=l) + k·q(n/K)·m(n/K)·P(L^{(1)}=l)`, the potential is
/// `V(n) = k·q(n/K)(m(n/K)-1)`.
///
/// Offspring numbers are enumerated until at most `tail_mass_bound` of
/// both the plain and the size-biased mass remains; an enumeration that
/// cannot reach that mass signals an error. Jumps beyond the window
/// follow the boundary policy.
pub fn build_generator(
    config: &SimConfig,
    k: u64,
    window: (u64, u64),
    tail_mass_bound: f64,
    policy: BoundaryPolicy,
) -> Result<TruncatedGenerator> {
    let (n_min, n_max) = window;
    if n_min > n_max || n_min < k {
        return Err(Error::InvalidParameter(format!(
            "window [{n_min}, {n_max}] invalid for k = {k}"
        )));
    }
    let dim = (n_max - n_min + 1) as usize;
    let mut rows = vec![Vec::new(); dim];
    let mut diag = vec![0.0f64; dim];
    let mut absorbed = vec![0.0f64; dim];
    let mut potential = vec![0.0f64; dim];

    let enum_cap = match &config.law {
        crate::offspring::OffspringLaw::Table(t) => t.tail_cap(),
        _ => OFFSPRING_ENUM_CAP,
    };

    for r in 0..dim {
        let n = n_min + r as u64;
        if n == 0 {
            continue; // extinction is absorbing
        }
        let z = n as f64 / config.capacity;
        let q = config.rate.rate(z);
        let m = config.law.mean(z)?;
        let rate_ordinary = (n - k) as f64 * q;
        let rate_spine = k as f64 * q * m;
        potential[r] = k as f64 * q * (m - 1.0);

        let mut plain_mass = 0.0f64;
        let mut biased_mass = 0.0f64;
        let mut outflow = 0.0f64;
        let mut lost = 0.0f64;
        for l in 0..=enum_cap {
            let p = config.law.pmf(z, l);
            let p_biased = if k > 0 { l as f64 * p / m } else { 0.0 };
            plain_mass += p;
            biased_mass += p_biased;
            let rate = rate_ordinary * p + rate_spine * p_biased;
            if rate > 0.0 {
                let target = n + l - 1;
                if target == n {
                    // self loop, no state change
                } else if target >= n_min && target <= n_max {
                    rows[r].push(((target - n_min) as u32, rate));
                    outflow += rate;
                } else {
                    lost += rate;
                }
            }
            if plain_mass >= 1.0 - tail_mass_bound
                && (k == 0 || biased_mass >= 1.0 - tail_mass_bound)
            {
                break;
            }
        }
        if plain_mass < 1.0 - tail_mass_bound {
            return Err(Error::TailMass {
                mass: plain_mass,
                required: 1.0 - tail_mass_bound,
            });
        }
        // enumeration remainder joins the out-of-window flow
        lost +=
            rate_ordinary * (1.0 - plain_mass).max(0.0) + rate_spine * (1.0 - biased_mass).max(0.0);
        match policy {
            BoundaryPolicy::AbsorbAtEdges => {
                absorbed[r] = lost;
                diag[r] = -(outflow + lost);
            }
            BoundaryPolicy::ReflectReject => {
                diag[r] = -outflow;
            }
        }
        rows[r].sort_by_key(|&(c, _)| c);
    }

    Ok(TruncatedGenerator {
        n_min,
        n_max,
        rows,
        diag,
        absorbed,
        potential,
        policy,
    })
}

/// Default oracle window `[k, ceil(20·K)]`.
pub fn default_window(config: &SimConfig, k: u64) -> (u64, u64) {
    (k, (20.0 * config.capacity).ceil() as u64)
}

/// Transient distribution of the chain (potential ignored): probabilities
/// over the window plus the mass absorbed at the edges.
#[derive(Debug, Clone)]
pub struct TransientDistribution {
    pub n_min: u64,
    pub probs: Vec<f64>,
    pub absorbed: f64,
}

impl TransientDistribution {
    pub fn mean(&self) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .map(|(r, p)| (self.n_min + r as u64) as f64 * p)
            .sum()
    }

    pub fn window_mass(&self) -> f64 {
        self.probs.iter().sum()
    }
}

/// Exact transient law at time `t` started from `init`, by uniformization
/// with Poisson tail truncation at 1e-12.
pub fn transient_distribution(
    gen: &TruncatedGenerator,
    init: u64,
    t: f64,
) -> Result<TransientDistribution> {
    let row = gen.row_of(init)?;
    let dim = gen.dim();
    let mut p = vec![0.0f64; dim];
    p[row] = 1.0;
    let lambda = gen.diag.iter().fold(0.0f64, |a, &d| a.max(-d));
    let lam_t = lambda * t;
    if lam_t == 0.0 {
        return Ok(TransientDistribution {
            n_min: gen.n_min,
            probs: p,
            absorbed: 0.0,
        });
    }
    let weights = poisson_weights(lam_t, 1e-12)?;
    let mut result = vec![0.0f64; dim];
    let mut scratch = vec![0.0f64; dim];
    for (j, &w) in weights.iter().enumerate() {
        if j > 0 {
            // p <- p + (Aᵀ p) / Λ
            gen.apply_transpose::<false>(&p, &mut scratch);
            for i in 0..dim {
                p[i] += scratch[i] / lambda;
                // uniformized step keeps probabilities nonnegative up to roundoff
                if p[i] < 0.0 {
                    p[i] = 0.0;
                }
            }
        }
        if w > 0.0 {
            for i in 0..dim {
                result[i] += w * p[i];
            }
        }
    }
    let mass: f64 = result.iter().sum();
    Ok(TransientDistribution {
        n_min: gen.n_min,
        probs: result,
        absorbed: (1.0 - mass).max(0.0),
    })
}

fn poisson_weights(lam: f64, tail: f64) -> Result<Vec<f64>> {
    let mut weights = Vec::new();
    let mut cum = 0.0f64;
    let ln_lam = lam.ln();
    let mut j = 0u64;
    loop {
        let lw = j as f64 * ln_lam - lam - ln_gamma(j as f64 + 1.0);
        let w = lw.exp();
        weights.push(w);
        cum += w;
        if cum >= 1.0 - tail {
            return Ok(weights);
        }
        j += 1;
        if j > UNIFORMIZATION_CAP {
            return Err(Error::UniformizationCap {
                needed: j,
                cap: UNIFORMIZATION_CAP,
            });
        }
    }
}

/// Adaptive Dormand–Prince 5(4) for the linear systems of this module.
/// `apply` computes `out = M·y`; `checkpoints` must be increasing and
/// start after 0. Returns the solution at every checkpoint.
fn rk45_path<F: Fn(&[f64], &mut [f64])>(
    apply: F,
    y0: &[f64],
    checkpoints: &[f64],
    rtol: f64,
    atol: f64,
) -> Result<Vec<Vec<f64>>> {
    let dim = y0.len();
    let mut y = y0.to_vec();
    let mut t = 0.0f64;
    let t_end = *checkpoints.last().unwrap_or(&0.0);
    let mut out = Vec::with_capacity(checkpoints.len());
    if t_end == 0.0 {
        for _ in checkpoints {
            out.push(y.clone());
        }
        return Ok(out);
    }
    let mut h = (t_end / 1024.0).min(1e-2);
    let h_min = t_end * 1e-14;

    let mut k = vec![vec![0.0f64; dim]; 7];
    let mut ytmp = vec![0.0f64; dim];
    let mut y5 = vec![0.0f64; dim];
    // FSAL: k[0] always holds the derivative at the current y
    apply(&y, &mut k[0]);

    const A: [[f64; 6]; 6] = [
        [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [
            19372.0 / 6561.0,
            -25360.0 / 2187.0,
            64448.0 / 6561.0,
            -212.0 / 729.0,
            0.0,
            0.0,
        ],
        [
            9017.0 / 3168.0,
            -355.0 / 33.0,
            46732.0 / 5247.0,
            49.0 / 176.0,
            -5103.0 / 18656.0,
            0.0,
        ],
        [
            35.0 / 384.0,
            0.0,
            500.0 / 1113.0,
            125.0 / 192.0,
            -2187.0 / 6784.0,
            11.0 / 84.0,
        ],
    ];
    const B5: [f64; 7] = [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
        0.0,
    ];
    const B4: [f64; 7] = [
        5179.0 / 57600.0,
        0.0,
        7571.0 / 16695.0,
        393.0 / 640.0,
        -92097.0 / 339200.0,
        187.0 / 2100.0,
        1.0 / 40.0,
    ];

    for &cp in checkpoints {
        while t < cp {
            let step = h.min(cp - t);
            // stages 2..7
            for s in 1..7 {
                for i in 0..dim {
                    let mut acc = 0.0;
                    for (j, kj) in k.iter().enumerate().take(s) {
                        let a = A[s - 1][j];
                        if a != 0.0 {
                            acc += a * kj[i];
                        }
                    }
                    ytmp[i] = y[i] + step * acc;
                }
                let (head, tail) = k.split_at_mut(s);
                let _ = head;
                apply(&ytmp, &mut tail[0]);
            }
            // 5th order solution and embedded error
            let mut err = 0.0f64;
            for i in 0..dim {
                let mut v5 = 0.0;
                let mut v4 = 0.0;
                for s in 0..7 {
                    if B5[s] != 0.0 {
                        v5 += B5[s] * k[s][i];
                    }
                    if B4[s] != 0.0 {
                        v4 += B4[s] * k[s][i];
                    }
                }
                let ynew = y[i] + step * v5;
                let scale = atol + rtol * y[i].abs().max(ynew.abs());
                err = err.max((step * (v5 - v4)).abs() / scale);
                y5[i] = ynew;
            }
            if err <= 1.0 {
                t += step;
                std::mem::swap(&mut y, &mut y5);
                // stage 7 is the derivative at the accepted point;
                // rejected steps leave k[0] untouched
                k.swap(0, 6);
            }
            let factor = if err > 0.0 {
                (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
            } else {
                5.0
            };
            h = (step * factor).max(h_min);
            if h <= h_min && err > 1.0 {
                return Err(Error::StepUnderflow(t));
            }
        }
        out.push(y.clone());
    }
    Ok(out)
}

/// `E_init[w(Z_t)·exp(∫_0^t V(Z_s) ds)]` by integrating the forward
/// (adjoint) linear system `u' = (A + diag V)ᵀ u` from the point mass at
/// `init` and pairing with the terminal weight.
pub fn feynman_kac<F: Fn(u64) -> f64>(
    gen: &TruncatedGenerator,
    init: u64,
    t: f64,
    weight: F,
) -> Result<f64> {
    let row = gen.row_of(init)?;
    let mut u0 = vec![0.0f64; gen.dim()];
    u0[row] = 1.0;
    let path = rk45_path(
        |y, out| gen.apply_transpose::<true>(y, out),
        &u0,
        &[t],
        1e-10,
        1e-14,
    )?;
    Ok(path[0]
        .iter()
        .enumerate()
        .map(|(r, &u)| u * weight(gen.state(r)))
        .sum())
}

/// Backward variant: value vectors `n ↦ E_n[w(Z_u)·exp(∫ V)]` for every
/// window state `n`, at each requested time.
pub fn feynman_kac_values<F: Fn(u64) -> f64>(
    gen: &TruncatedGenerator,
    times: &[f64],
    weight: F,
) -> Result<Vec<Vec<f64>>> {
    let v0: Vec<f64> = (0..gen.dim()).map(|r| weight(gen.state(r))).collect();
    rk45_path(|y, out| gen.apply::<true>(y, out), &v0, times, 1e-10, 1e-14)
}

/// Base-case penalized moment by the oracle:
/// `e^{β Z0/K} · E_Q[ψ(Z_t/K) e^{-β Z_t/K} exp(k ∫ q(m-1))]`
/// on the default window with absorbing edges.
pub fn exact_base_moment<F: Fn(f64) -> f64>(
    config: &SimConfig,
    k: u64,
    t: f64,
    psi: F,
) -> Result<f64> {
    let cfg = config.clone().validated()?;
    let gen = build_generator(
        &cfg,
        k,
        default_window(&cfg, k),
        1e-10,
        BoundaryPolicy::AbsorbAtEdges,
    )?;
    let kcap = cfg.capacity;
    let beta = cfg.beta;
    let value = feynman_kac(&gen, cfg.initial, t, |n| {
        let z = n as f64 / kcap;
        psi(z) * (-beta * z).exp()
    })?;
    Ok((beta * cfg.initial as f64 / kcap).exp() * value)
}
