//! Metropolis sampling of the Gibbs law P_{N,β} ∝ exp(−β H_N) on Λ^N.
//! Moves are single-particle Gaussian displacements, so each proposal
//! needs only the O(N) energy difference ΔH = N·ΔV + Σ_{j≠i}[g(x′−x_j) −
//! g(x−x_j)]; per-particle interaction sums are cached and updated
//! incrementally. Proposals leaving the box or landing exactly on
//! another particle are rejected outright (density 0, g = +∞).

use crate::energy::{hamiltonian, GasParams};
use crate::error::{Error, Result};
use crate::kernel::CoulombKernel;
use crate::measures::ParticleConfig;
use crate::thermal::{Potential, ThermalMeasure};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::io::{Read, Write};
use std::path::Path;

/// Sweeps between from-scratch cache audits inside [`ChainState::run_chain`].
const RECHECK_EVERY: usize = 1000;

/// Cache audit threshold: relative disagreement between incremental and
/// recomputed energy beyond this is an update bug, not rounding.
const DRIFT_TOL: f64 = 1e-8;

/// Step-size adaptation: multiplicative nudge per 50-proposal window
/// toward acceptance ∈ [0.2, 0.5], burn-in only.
const ADAPT_WINDOW: u64 = 50;
const ADAPT_FACTOR: f64 = 1.1;
const ACCEPT_LO: f64 = 0.2;
const ACCEPT_HI: f64 = 0.5;

// ── Seed derivation ─────────────────────────────────────────────────────

/// Per-chain seed from (master seed, chain index): one splitmix64 round
/// on a golden-ratio spaced input, so neighboring chains get unrelated
/// streams while (master, index) → seed stays reproducible.
#[must_use]
pub fn derive_chain_seed(master: u64, chain: u64) -> u64 {
    let mut z = master ^ chain.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ── Chain state ─────────────────────────────────────────────────────────

/// How the initial configuration is drawn.
pub enum ChainInit<'a> {
    /// Particles i.i.d. from the thermal equilibrium measure — the
    /// stationary bulk, so burn-in is short. The box is the solver grid.
    FromThermal(&'a ThermalMeasure),
    /// Particles uniform in the given box.
    FromBox { lower: Vec<f64>, upper: Vec<f64> },
}

/// One Metropolis chain: the configuration, incremental energy caches,
/// the proposal scale, its private RNG stream, and acceptance counters.
#[derive(Debug, Clone)]
pub struct ChainState {
    config: ParticleConfig,
    /// S_i = Σ_{j≠i} g(x_i − x_j); pairwise energy = (1/2) Σ_i S_i.
    pair_sums: Vec<f64>,
    /// Σ_i V(x_i).
    sum_v: f64,
    step_size: f64,
    rng: ChaCha8Rng,
    accepted: u64,
    proposed: u64,
    lower: Vec<f64>,
    upper: Vec<f64>,
    /// Per-proposal g-deltas toward the other particles (reused buffer).
    scratch: Vec<f64>,
}

impl ChainState {
    /// Chain around an explicit configuration: validates it (in-box, no
    /// coincident pair) and builds the caches from scratch.
    pub fn from_config(
        config: ParticleConfig,
        v: &Potential,
        params: &GasParams,
        kernel: &CoulombKernel,
        lower: Vec<f64>,
        upper: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        let d = params.dim;
        if config.dim() != d || kernel.dim() != d {
            return Err(Error::GridMismatch(
                "configuration, parameter, and kernel dimensions differ".into(),
            ));
        }
        if config.n() != params.n_particles {
            return Err(Error::Precondition(format!(
                "configuration holds {} particles, parameters say {}",
                config.n(),
                params.n_particles
            )));
        }
        if lower.len() != d || upper.len() != d {
            return Err(Error::GridMismatch("box corner dimensions differ".into()));
        }
        if !(0..d).all(|a| lower[a].is_finite() && upper[a] > lower[a]) {
            return Err(Error::Domain(format!("degenerate box {lower:?}..{upper:?}")));
        }
        let n = config.n();
        for i in 0..n {
            let x = config.point(i);
            if !(0..d).all(|a| x[a] >= lower[a] && x[a] <= upper[a]) {
                return Err(Error::OutOfBox { index: i });
            }
        }
        let mut pair_sums = vec![0.0; n];
        for i in 0..n {
            for j in i + 1..n {
                let r2: f64 = config
                    .point(i)
                    .iter()
                    .zip(config.point(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if r2 == 0.0 {
                    return Err(Error::CoincidentPair { i, j });
                }
                let g = kernel.eval_g_radial(r2.sqrt());
                pair_sums[i] += g;
                pair_sums[j] += g;
            }
        }
        let sum_v: f64 = (0..n).map(|i| v.eval(config.point(i))).sum();
        let side =
            (0..d).map(|a| upper[a] - lower[a]).fold(0.0f64, f64::max);
        let step_size = side / (n as f64).powf(1.0 / d as f64);
        Ok(Self {
            config,
            pair_sums,
            sum_v,
            step_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
            accepted: 0,
            proposed: 0,
            lower,
            upper,
            scratch: vec![0.0; n],
        })
    }

    #[must_use]
    pub fn config(&self) -> &ParticleConfig {
        &self.config
    }

    #[must_use]
    pub fn step_size(&self) -> f64 {
        self.step_size
    }

    /// Override the proposal scale (the default is box side · N^{−1/d}).
    pub fn set_step_size(&mut self, step: f64) -> Result<()> {
        if !(step > 0.0) || !step.is_finite() {
            return Err(Error::Domain(format!("proposal step {step} not positive")));
        }
        self.step_size = step;
        Ok(())
    }

    #[must_use]
    pub fn accepted(&self) -> u64 {
        self.accepted
    }

    #[must_use]
    pub fn proposed(&self) -> u64 {
        self.proposed
    }

    /// Lifetime acceptance fraction; 0 before any proposal.
    #[must_use]
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    #[must_use]
    pub fn bounds(&self) -> (&[f64], &[f64]) {
        (&self.lower, &self.upper)
    }

    /// H_N from the incremental caches (no O(N²) pass).
    #[must_use]
    pub fn cached_energy(&self, params: &GasParams) -> f64 {
        0.5 * self.pair_sums.iter().sum::<f64>() + params.n_particles as f64 * self.sum_v
    }

    /// Audit: recompute H_N from scratch and compare against the caches.
    /// Returns the relative disagreement; beyond 1e-8 the incremental
    /// updates are buggy and the chain is unusable.
    pub fn recheck_caches(
        &self,
        v: &Potential,
        params: &GasParams,
        kernel: &CoulombKernel,
    ) -> Result<f64> {
        let exact = hamiltonian(&self.config, v, params, kernel)?;
        let cached = self.cached_energy(params);
        let drift = (exact - cached).abs() / exact.abs().max(1.0);
        if drift > DRIFT_TOL {
            return Err(Error::Domain(format!(
                "incremental energy caches drifted: cached {cached}, recomputed {exact}"
            )));
        }
        Ok(drift)
    }

    /// ΔH for moving particle `i` to `to`; fills `scratch[j]` with the
    /// per-neighbor g-deltas so an acceptance can update every S_j in
    /// O(N). +∞ when `to` coincides with another particle.
    fn move_energy(
        &mut self,
        i: usize,
        to: &[f64],
        v: &Potential,
        params: &GasParams,
        kernel: &CoulombKernel,
    ) -> (f64, f64) {
        let d = self.config.dim();
        let n = self.config.n();
        let xi = self.config.point(i).to_vec();
        let mut s_new = 0.0;
        for j in 0..n {
            if j == i {
                self.scratch[j] = 0.0;
                continue;
            }
            let xj = self.config.point(j);
            let r2_new: f64 = (0..d).map(|a| (to[a] - xj[a]) * (to[a] - xj[a])).sum();
            if r2_new == 0.0 {
                return (f64::INFINITY, f64::INFINITY);
            }
            let r2_old: f64 = (0..d).map(|a| (xi[a] - xj[a]) * (xi[a] - xj[a])).sum();
            let g_new = kernel.eval_g_radial(r2_new.sqrt());
            let g_old = kernel.eval_g_radial(r2_old.sqrt());
            s_new += g_new;
            self.scratch[j] = g_new - g_old;
        }
        let dv = v.eval(to) - v.eval(&xi);
        let dh = params.n_particles as f64 * dv + (s_new - self.pair_sums[i]);
        (dh, s_new)
    }

    /// One Metropolis proposal: uniform particle, isotropic Gaussian
    /// displacement, accept with min(1, exp(−βΔH)). Returns whether the
    /// move was accepted.
    pub fn mh_step(
        &mut self,
        v: &Potential,
        params: &GasParams,
        kernel: &CoulombKernel,
    ) -> Result<bool> {
        let d = self.config.dim();
        if params.dim != d || kernel.dim() != d || params.n_particles != self.config.n() {
            return Err(Error::GridMismatch(
                "chain, parameter, and kernel shapes differ".into(),
            ));
        }
        self.proposed += 1;
        let n = self.config.n();
        let i = self.rng.random_range(0..n);
        let mut to = [0.0f64; 3];
        let mut in_box = true;
        for a in 0..d {
            let z: f64 = self.rng.sample(StandardNormal);
            to[a] = self.config.point(i)[a] + self.step_size * z;
            in_box &= to[a] >= self.lower[a] && to[a] <= self.upper[a];
        }
        if !in_box {
            return Ok(false);
        }
        let (dh, s_new) = self.move_energy(i, &to[..d], v, params, kernel);
        if dh.is_infinite() {
            return Ok(false);
        }
        let accept = dh <= 0.0 || self.rng.random::<f64>() < (-params.beta * dh).exp();
        if accept {
            let dv = v.eval(&to[..d]) - v.eval(self.config.point(i));
            for j in 0..n {
                if j != i {
                    self.pair_sums[j] += self.scratch[j];
                }
            }
            self.pair_sums[i] = s_new;
            self.sum_v += dv;
            self.config.points_flat_mut()[i * d..(i + 1) * d].copy_from_slice(&to[..d]);
            self.accepted += 1;
        }
        Ok(accept)
    }

    /// n_sweeps × N single-particle steps. The first ⌊burn_frac·sweeps⌋
    /// sweeps are burn-in; only there (and only with `adapt`) is the step
    /// size tuned, so the recorded phase runs a fixed kernel with the
    /// exact stationary law. Every thin-th post-burn-in sweep is
    /// recorded: ⌊post/thin⌋ samples. Caches are audited periodically.
    pub fn run_chain(
        &mut self,
        v: &Potential,
        params: &GasParams,
        kernel: &CoulombKernel,
        n_sweeps: usize,
        thin: usize,
        adapt: bool,
        burn_frac: f64,
    ) -> Result<Vec<ParticleConfig>> {
        if n_sweeps == 0 || thin == 0 || !(0.0..1.0).contains(&burn_frac) {
            return Err(Error::Precondition(format!(
                "need ≥ 1 sweeps, thin ≥ 1, burn fraction in [0, 1): got {n_sweeps}, {thin}, {burn_frac}"
            )));
        }
        let n = self.config.n();
        let burn = (n_sweeps as f64 * burn_frac).floor() as usize;
        let side = (0..self.lower.len())
            .map(|a| self.upper[a] - self.lower[a])
            .fold(0.0f64, f64::max);
        let mut samples = Vec::new();
        let mut wnd_prop = 0u64;
        let mut wnd_acc = 0u64;
        for sweep in 0..n_sweeps {
            let in_burn = sweep < burn;
            for _ in 0..n {
                let acc = self.mh_step(v, params, kernel)?;
                if in_burn && adapt {
                    wnd_prop += 1;
                    wnd_acc += u64::from(acc);
                    if wnd_prop == ADAPT_WINDOW {
                        let rate = wnd_acc as f64 / wnd_prop as f64;
                        if rate > ACCEPT_HI {
                            self.step_size *= ADAPT_FACTOR;
                        } else if rate < ACCEPT_LO {
                            self.step_size /= ADAPT_FACTOR;
                        }
                        self.step_size = self.step_size.clamp(1e-9 * side, 2.0 * side);
                        wnd_prop = 0;
                        wnd_acc = 0;
                    }
                }
            }
            if (sweep + 1) % RECHECK_EVERY == 0 {
                self.recheck_caches(v, params, kernel)?;
            }
            if !in_burn {
                let k = sweep - burn + 1;
                if k % thin == 0 {
                    samples.push(self.config.clone());
                }
            }
        }
        Ok(samples)
    }
}

// ── Initialization ──────────────────────────────────────────────────────

/// Fresh chain: particles drawn i.i.d. from μ_β (preferred — the chain
/// starts in the stationary bulk) or uniformly in a box; caches built
/// from scratch. Exact coincidences are redrawn, so the initial energy
/// is always finite. Same seed ⇒ identical chain.
pub fn init_chain(
    v: &Potential,
    params: &GasParams,
    kernel: &CoulombKernel,
    seed: u64,
    init: &ChainInit<'_>,
) -> Result<ChainState> {
    let d = params.dim;
    let (lower, upper) = match init {
        ChainInit::FromThermal(th) => {
            let grid = th.measure().grid();
            if grid.dim() != d {
                return Err(Error::GridMismatch(
                    "thermal grid dimension differs from gas dimension".into(),
                ));
            }
            (grid.lower().to_vec(), grid.upper().to_vec())
        }
        ChainInit::FromBox { lower, upper } => (lower.clone(), upper.clone()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = params.n_particles;
    let mut pts: Vec<f64> = Vec::with_capacity(n * d);
    let sampler = match init {
        ChainInit::FromThermal(th) => Some(th.measure().sampler()?),
        ChainInit::FromBox { .. } => None,
    };
    for i in 0..n {
        loop {
            let cand: Vec<f64> = match &sampler {
                Some(s) => s.sample(&mut rng),
                None => (0..d).map(|a| rng.random_range(lower[a]..upper[a])).collect(),
            };
            let coincides = (0..i).any(|j| (0..d).all(|a| pts[j * d + a] == cand[a]));
            if !coincides {
                pts.extend_from_slice(&cand);
                break;
            }
        }
    }
    let config = ParticleConfig::new(d, pts)?;
    // The chain RNG continues the stream that drew the start, so (seed,
    // init) fully determines the trajectory.
    let mut state = ChainState::from_config(config, v, params, kernel, lower, upper, 0)?;
    state.rng = rng;
    Ok(state)
}

// ── Sample persistence ──────────────────────────────────────────────────

/// Binary layout: dim (u64), N (u64), count (u64), then count × N × dim
/// coordinates as f64; all little-endian.
pub fn write_samples(samples: &[ParticleConfig], path: &Path) -> Result<()> {
    let Some(first) = samples.first() else {
        return Err(Error::Precondition("no samples to write".into()));
    };
    let (d, n) = (first.dim(), first.n());
    if samples.iter().any(|s| s.dim() != d || s.n() != n) {
        return Err(Error::Precondition("samples have mixed shapes".into()));
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(&(d as u64).to_le_bytes())?;
    out.write_all(&(n as u64).to_le_bytes())?;
    out.write_all(&(samples.len() as u64).to_le_bytes())?;
    for s in samples {
        for x in s.points_flat() {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Inverse of [`write_samples`].
pub fn read_samples(path: &Path) -> Result<Vec<ParticleConfig>> {
    let mut inp = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut u = [0u8; 8];
    let mut read_u64 = |inp: &mut std::io::BufReader<std::fs::File>| -> Result<u64> {
        inp.read_exact(&mut u)?;
        Ok(u64::from_le_bytes(u))
    };
    let d = read_u64(&mut inp)? as usize;
    let n = read_u64(&mut inp)? as usize;
    let count = read_u64(&mut inp)? as usize;
    if d < 2 || d > 3 || n == 0 || count == 0 {
        return Err(Error::Parse(format!("implausible sample header: d={d}, N={n}, count={count}")));
    }
    let mut samples = Vec::with_capacity(count);
    let mut buf = vec![0u8; n * d * 8];
    for _ in 0..count {
        inp.read_exact(&mut buf)?;
        let pts: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        samples.push(ParticleConfig::new(d, pts)?);
    }
    Ok(samples)
}

// ── Tests ───────────────────────────────────────────────────────────────
