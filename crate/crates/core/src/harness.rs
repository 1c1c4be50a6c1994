//! Experiment orchestration and persistence. The concentration sweep
//! drives the central claim — ‖emp_N − μ_β‖_BL concentrating at scale
//! N^{−1/d} — across an N-schedule with β = N^{−α}; companions fit the
//! observed rate, certify the φ_λ distance floor on sampled
//! configurations, and instantiate the probability upper bound from the
//! next-order partition function. Every run that touches randomness is
//! driven by (master seed, chain index) streams and fixed reduction
//! orders, so a stored run record replays its results bit for bit.

use crate::energy::{
    cross_energy_with, smearing_identity_check, split_hamiltonian, GasParams,
};
use crate::error::{Error, Result};
use crate::kernel::CoulombKernel;
use crate::measures::{
    bin_to_grid, integrate, interp_at, ConvOperator, Grid, GridMeasure, MeasureKind,
    ParticleConfig,
};
use crate::metrics::{
    bl_norm_with, check_bl_vs_h1k, h1_dual_norm, h1_restricted_norm, phi_lambda_bound,
    phi_lambda_field, BlOptions, Region,
};
use crate::sampler::{derive_chain_seed, init_chain, write_samples, ChainInit};
use crate::thermal::{
    estimate_log_k, solve_thermal, solve_thermal_auto, Potential, ThermalMeasure,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// k-grid for the empirical concentration profile q(k): the fraction of
/// samples with distance ≤ k·N^{−1/d}, tabulated on 0.25-spaced k up to
/// 15 — wide enough that q reaches 1 for every healthy run.
const K_GRID_STEP: f64 = 0.25;
const K_GRID_COUNT: usize = 60;

fn k_grid() -> impl Iterator<Item = f64> {
    (1..=K_GRID_COUNT).map(|j| j as f64 * K_GRID_STEP)
}

// ── Configuration ───────────────────────────────────────────────────────

/// Experiment configuration: a flat key=value file, every key
/// overridable from the command line. `box_l`/`grid_m` = 0 mean
/// automatic (confinement-sized box, resolution max(64, 4·N^{1/d})).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Config {
    pub dim: usize,
    /// β = N^{−α}; the sweep's temperature schedule.
    pub alpha: f64,
    pub n_list: Vec<usize>,
    pub chains: usize,
    pub sweeps: usize,
    pub thin: usize,
    pub seed: u64,
    /// Half-side of the centered cube Λ; 0 = size from confinement.
    pub box_l: f64,
    /// Nodes per axis; 0 = max(64, 4·N^{1/d}) per cell.
    pub grid_m: usize,
    pub cbar: f64,
    /// "quadratic", "quadratic:<a>", or "custom-table:<path>".
    pub potential: String,
    pub tol: f64,
    pub max_iter: usize,
    pub burn_frac: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            dim: 2,
            alpha: 0.5,
            n_list: vec![32, 64, 128, 256],
            chains: 16,
            sweeps: 2000,
            thin: 25,
            seed: 12345,
            box_l: 0.0,
            grid_m: 0,
            cbar: 1.0,
            potential: "quadratic".into(),
            tol: 1e-8,
            max_iter: 4000,
            burn_frac: 0.2,
        }
    }
}

impl Config {
    /// Parse a key=value file ('#' comments, blank lines ignored),
    /// starting from defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse(format!(
                    "line {}: expected key=value, got {line:?}",
                    lineno + 1
                )));
            };
            cfg.apply(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Set one key from its textual form; unknown keys are errors.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Parse(format!("key {key}: bad {what} {value:?}"));
        match key {
            "dim" => self.dim = value.parse().map_err(|_| bad("integer"))?,
            "alpha" => self.alpha = value.parse().map_err(|_| bad("number"))?,
            "n_list" => {
                self.n_list = value
                    .split(',')
                    .map(|t| t.trim().parse::<usize>().map_err(|_| bad("N list")))
                    .collect::<Result<Vec<_>>>()?;
            }
            "chains" => self.chains = value.parse().map_err(|_| bad("integer"))?,
            "sweeps" => self.sweeps = value.parse().map_err(|_| bad("integer"))?,
            "thin" => self.thin = value.parse().map_err(|_| bad("integer"))?,
            "seed" => self.seed = value.parse().map_err(|_| bad("integer"))?,
            "box_l" => self.box_l = value.parse().map_err(|_| bad("number"))?,
            "grid_m" => self.grid_m = value.parse().map_err(|_| bad("integer"))?,
            "cbar" => self.cbar = value.parse().map_err(|_| bad("number"))?,
            "potential" => self.potential = value.to_string(),
            "tol" => self.tol = value.parse().map_err(|_| bad("number"))?,
            "max_iter" => self.max_iter = value.parse().map_err(|_| bad("integer"))?,
            "burn_frac" => self.burn_frac = value.parse().map_err(|_| bad("number"))?,
            _ => return Err(Error::Parse(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 || self.dim > 3 {
            return Err(Error::Precondition(format!("dim {} outside {{2, 3}}", self.dim)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Precondition(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        if self.n_list.is_empty() || self.n_list.iter().any(|&n| n < 2) {
            return Err(Error::Precondition("n_list needs values ≥ 2".into()));
        }
        if self.chains == 0 || self.sweeps == 0 || self.thin == 0 {
            return Err(Error::Precondition("chains, sweeps, thin must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.burn_frac) {
            return Err(Error::Precondition(format!(
                "burn fraction {} outside [0, 1)",
                self.burn_frac
            )));
        }
        if !(self.box_l >= 0.0) || !(self.cbar > 0.0) || !(self.tol > 0.0) {
            return Err(Error::Precondition(
                "box_l ≥ 0, cbar > 0, tol > 0 required".into(),
            ));
        }
        self.potential_value()?;
        Ok(())
    }

    /// Canonical text: fixed key order, shortest round-tripping floats.
    /// This is both the stored config.txt and the hashing preimage.
    #[must_use]
    pub fn canonical_text(&self) -> String {
        let n_list =
            self.n_list.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        format!(
            "dim={}\nalpha={}\nn_list={}\nchains={}\nsweeps={}\nthin={}\nseed={}\nbox_l={}\ngrid_m={}\ncbar={}\npotential={}\ntol={}\nmax_iter={}\nburn_frac={}\n",
            self.dim,
            self.alpha,
            n_list,
            self.chains,
            self.sweeps,
            self.thin,
            self.seed,
            self.box_l,
            self.grid_m,
            self.cbar,
            self.potential,
            self.tol,
            self.max_iter,
            self.burn_frac
        )
    }

    /// Git-blob style content hash of the canonical text:
    /// sha1("blob {len}\0" + text), hex.
    #[must_use]
    pub fn content_hash(&self) -> String {
        let text = self.canonical_text();
        let mut h = Sha1::new();
        h.update(format!("blob {}\0", text.len()).as_bytes());
        h.update(text.as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The configured confining potential.
    pub fn potential_value(&self) -> Result<Potential> {
        if self.potential == "quadratic" {
            return Potential::quadratic(1.0);
        }
        if let Some(a) = self.potential.strip_prefix("quadratic:") {
            return Potential::quadratic(
                a.parse().map_err(|_| Error::Parse(format!("quadratic coefficient {a:?}")))?,
            );
        }
        if let Some(path) = self.potential.strip_prefix("custom-table:") {
            return load_potential_table(Path::new(path));
        }
        Err(Error::Parse(format!(
            "potential {:?} (expected quadratic, quadratic:<a>, custom-table:<path>)",
            self.potential
        )))
    }

    /// Gas parameters for one sweep cell: β = N^{−α}.
    pub fn params_for(&self, n: usize) -> Result<GasParams> {
        GasParams::scheduled(self.dim, n, self.alpha)
    }

    /// Per-cell grid resolution: the configured value, or
    /// max(64, ⌈4·N^{1/d}⌉) so the binning error ≈ 2h stays below the
    /// expected distance scale.
    #[must_use]
    pub fn grid_m_for(&self, n: usize) -> usize {
        if self.grid_m > 0 {
            self.grid_m
        } else {
            64.max((4.0 * (n as f64).powf(1.0 / self.dim as f64)).ceil() as usize)
        }
    }
}

/// Radial table file: optional '#' comments, one `tail <s> <c>` line,
/// then `r v` rows (whitespace-separated), radii strictly increasing
/// from 0.
fn load_potential_table(path: &Path) -> Result<Potential> {
    let text = std::fs::read_to_string(path)?;
    let mut tail: Option<(f64, f64)> = None;
    let mut rs = Vec::new();
    let mut vs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parse = |t: &str| -> Result<f64> {
            t.parse()
                .map_err(|_| Error::Parse(format!("table line {}: bad number {t:?}", lineno + 1)))
        };
        match fields.as_slice() {
            ["tail", s, c] => tail = Some((parse(s)?, parse(c)?)),
            [r, v] => {
                rs.push(parse(r)?);
                vs.push(parse(v)?);
            }
            _ => {
                return Err(Error::Parse(format!(
                    "table line {}: expected `tail s c` or `r v`, got {line:?}",
                    lineno + 1
                )))
            }
        }
    }
    let (s, c) =
        tail.ok_or_else(|| Error::Parse("potential table is missing its `tail s c` line".into()))?;
    Potential::radial_table(rs, vs, s, c)
}

// ── Run records ─────────────────────────────────────────────────────────

/// Per-chain outcome inside one sweep cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainStats {
    pub seed: u64,
    pub accept_rate: f64,
    pub final_step: f64,
    pub n_samples: usize,
}

/// One N-cell of the sweep: its thermal/grid setup, per-chain stats, and
/// the per-sample distances in fixed (chain-major, sample-minor) order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellRecord {
    pub n: usize,
    pub beta: f64,
    pub grid_m: usize,
    pub box_half_side: f64,
    pub chains: Vec<ChainStats>,
    pub bl_distances: Vec<f64>,
    pub h1_distances: Vec<f64>,
    pub wall_ms: u128,
}

/// Everything needed to replay a sweep bit for bit, plus its outcomes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config_hash: String,
    pub config: Config,
    pub master_seed: u64,
    pub cells: Vec<CellRecord>,
    /// Human-readable reasons for any cells that failed.
    pub failures: Vec<String>,
    pub partial: bool,
    pub crate_version: String,
    pub format_version: u32,
}

impl RunRecord {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Parse(format!("record serialization: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("record {path:?}: {e}")))
    }
}

// ── Sweep results ───────────────────────────────────────────────────────

/// One (N, k) row of the concentration table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub beta: f64,
    pub k: f64,
    /// Fraction of samples with ‖emp_N − μ_β‖_BL ≤ k·N^{−1/d}.
    pub q_k: f64,
    pub median_bl: f64,
    pub q25: f64,
    pub q75: f64,
    /// N^{1/d} · median — flat across N under the claimed rate.
    pub scaled_median: f64,
}

/// The concentration table over the whole N-schedule.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    /// Distinct N values in row order.
    #[must_use]
    pub fn n_values(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for row in &self.rows {
            if out.last() != Some(&row.n) {
                out.push(row.n);
            }
        }
        out
    }

    /// Per-N statistics (first row of each N block).
    #[must_use]
    pub fn cell_summary(&self) -> Vec<&SweepRow> {
        let mut out: Vec<&SweepRow> = Vec::new();
        for row in &self.rows {
            if out.last().is_none_or(|last| last.n != row.n) {
                out.push(row);
            }
        }
        out
    }

    /// CSV with the exact column set of the external contract; floats in
    /// scientific notation with 17 significant digits so parse(write(x))
    /// reproduces every bit.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("N,beta,k,q_k,median_bl,q25,q75,scaled_median\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
                r.n, r.beta, r.k, r.q_k, r.median_bl, r.q25, r.q75, r.scaled_median
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        if header != "N,beta,k,q_k,median_bl,q25,q75,scaled_median" {
            return Err(Error::Parse(format!("unexpected sweep header {header:?}")));
        }
        let mut rows = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(Error::Parse(format!(
                    "sweep row {}: {} fields, expected 8",
                    lineno + 2,
                    f.len()
                )));
            }
            let num = |t: &str| -> Result<f64> {
                t.parse().map_err(|_| {
                    Error::Parse(format!("sweep row {}: bad number {t:?}", lineno + 2))
                })
            };
            rows.push(SweepRow {
                n: f[0]
                    .parse()
                    .map_err(|_| Error::Parse(format!("sweep row {}: bad N", lineno + 2)))?,
                beta: num(f[1])?,
                k: num(f[2])?,
                q_k: num(f[3])?,
                median_bl: num(f[4])?,
                q25: num(f[5])?,
                q75: num(f[6])?,
                scaled_median: num(f[7])?,
            });
        }
        Ok(Self { rows })
    }
}

/// Linear-interpolation quantile of an ascending slice.
#[must_use]
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty slice");
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

// ── Distances ───────────────────────────────────────────────────────────

/// BL and Coulomb-energy distances from each sampled configuration to
/// μ_β, in input order. The energy distance reuses one convolution
/// operator; both solvers are deterministic, so the output depends only
/// on the inputs.
pub fn distances_to_thermal(
    samples: &[ParticleConfig],
    thermal: &ThermalMeasure,
    opts: &BlOptions,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let grid = thermal.measure().grid();
    let op = ConvOperator::new(grid, thermal.kernel())?;
    let pairs: Vec<(f64, f64)> = samples
        .par_iter()
        .map(|s| -> Result<(f64, f64)> {
            let emp = bin_to_grid(s, grid)?;
            let diff = emp.difference(thermal.measure())?;
            let bl = bl_norm_with(&diff, &[], opts)?.0;
            let e = cross_energy_with(&op, diff.weights(), diff.weights());
            Ok((bl, e.max(0.0).sqrt()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut bl = Vec::with_capacity(pairs.len());
    let mut h1 = Vec::with_capacity(pairs.len());
    for (b, h) in pairs {
        bl.push(b);
        h1.push(h);
    }
    Ok((bl, h1))
}

// ── Concentration sweep ─────────────────────────────────────────────────

/// A finished sweep: the table, its full record, and where it lives.
pub struct SweepOutcome {
    pub sweep: SweepResult,
    pub record: RunRecord,
    pub out_dir: PathBuf,
}

/// Solve μ_β for the cell's parameters under the config's box policy.
fn solve_cell_thermal(
    cfg: &Config,
    v: &Potential,
    params: &GasParams,
    kernel: &CoulombKernel,
    m: usize,
) -> Result<ThermalMeasure> {
    if cfg.box_l > 0.0 {
        let grid = Grid::centered_cube(cfg.dim, cfg.box_l, m)?;
        solve_thermal(v, params, &grid, kernel, cfg.tol, cfg.max_iter)
    } else {
        solve_thermal_auto(v, params, kernel, m, cfg.tol, cfg.max_iter)
    }
}

/// Solve μ_β at the configured resolution for one N of the schedule.
pub fn thermal_for(cfg: &Config, n: usize) -> Result<ThermalMeasure> {
    cfg.validate()?;
    let v = cfg.potential_value()?;
    let kernel = CoulombKernel::new(cfg.dim, cfg.cbar)?;
    let params = cfg.params_for(n)?;
    solve_cell_thermal(cfg, &v, &params, &kernel, cfg.grid_m_for(n))
}

/// Thermal solve plus `cfg.chains` Metropolis chains for one N-cell
/// (concurrent, disjoint seed streams, collected in chain order).
/// Persists the thermal fields and raw samples under `out_dir`; returns
/// the solved measure, per-chain stats, and all recorded samples in
/// chain-major order. `cell_idx` namespaces the seed stream, so a cell
/// replays identically regardless of which other cells run.
pub fn sample_cell(
    cfg: &Config,
    cell_idx: usize,
    n: usize,
    out_dir: &Path,
) -> Result<(ThermalMeasure, Vec<ChainStats>, Vec<ParticleConfig>)> {
    let v = cfg.potential_value()?;
    let kernel = CoulombKernel::new(cfg.dim, cfg.cbar)?;
    let params = cfg.params_for(n)?;
    let m = cfg.grid_m_for(n);
    let thermal = solve_cell_thermal(cfg, &v, &params, &kernel, m)?;
    std::fs::create_dir_all(out_dir.join("samples"))?;
    thermal.save(
        &out_dir.join(format!("thermal_n{n}.bin")),
        &out_dir.join(format!("thermal_n{n}.json")),
    )?;

    let seeds: Vec<u64> = (0..cfg.chains)
        .map(|ci| derive_chain_seed(cfg.seed, (cell_idx * 100_000 + ci) as u64))
        .collect();
    let runs: Vec<(Vec<ParticleConfig>, ChainStats)> = seeds
        .par_iter()
        .map(|&seed| -> Result<(Vec<ParticleConfig>, ChainStats)> {
            let mut chain =
                init_chain(&v, &params, &kernel, seed, &ChainInit::FromThermal(&thermal))?;
            let samples = chain.run_chain(
                &v,
                &params,
                &kernel,
                cfg.sweeps,
                cfg.thin,
                true,
                cfg.burn_frac,
            )?;
            let stats = ChainStats {
                seed,
                accept_rate: chain.acceptance_rate(),
                final_step: chain.step_size(),
                n_samples: samples.len(),
            };
            Ok((samples, stats))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut all_samples = Vec::new();
    let mut chains = Vec::new();
    for (ci, (samples, stats)) in runs.into_iter().enumerate() {
        write_samples(&samples, &out_dir.join(format!("samples/n{n}-c{ci}.bin")))?;
        all_samples.extend(samples);
        chains.push(stats);
    }
    Ok((thermal, chains, all_samples))
}

/// One N-cell of the sweep: sampling plus per-sample distances.
fn run_cell(cfg: &Config, cell_idx: usize, n: usize, out_dir: &Path) -> Result<CellRecord> {
    let started = Instant::now();
    let (thermal, chains, all_samples) = sample_cell(cfg, cell_idx, n, out_dir)?;
    let (bl_distances, h1_distances) =
        distances_to_thermal(&all_samples, &thermal, &BlOptions::default())?;
    let grid = thermal.measure().grid();
    Ok(CellRecord {
        n,
        beta: thermal.params().beta,
        grid_m: grid.nodes_per_axis(),
        box_half_side: grid.upper()[0],
        chains,
        bl_distances,
        h1_distances,
        wall_ms: started.elapsed().as_millis(),
    })
}

/// Run the full N-schedule. A failing cell is recorded (reason kept,
/// `partial` set) and the sweep continues; nothing is silently dropped.
/// Persists `config.txt`, `record.json`, `sweep.csv`, per-cell thermal
/// fields, and raw samples under `out_root/<run id>/`.
pub fn concentration_sweep(cfg: &Config, out_root: &Path) -> Result<SweepOutcome> {
    cfg.validate()?;
    let hash = cfg.content_hash();
    let run_id = format!("sweep-{}-s{}", &hash[..8], cfg.seed);
    let out_dir = out_root.join(&run_id);
    std::fs::create_dir_all(out_dir.join("samples"))?;
    std::fs::write(out_dir.join("config.txt"), cfg.canonical_text())?;

    let mut record = RunRecord {
        run_id: run_id.clone(),
        config_hash: hash,
        config: cfg.clone(),
        master_seed: cfg.seed,
        cells: Vec::new(),
        failures: Vec::new(),
        partial: false,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        format_version: 1,
    };
    for (cell_idx, &n) in cfg.n_list.iter().enumerate() {
        match run_cell(cfg, cell_idx, n, &out_dir) {
            Ok(cell) => record.cells.push(cell),
            Err(e) => {
                record.failures.push(format!("N={n}: {e}"));
                record.partial = true;
            }
        }
    }

    let mut rows = Vec::new();
    for cell in &record.cells {
        let mut sorted = cell.bl_distances.clone();
        sorted.sort_by(f64::total_cmp);
        let median = quantile(&sorted, 0.5);
        let q25 = quantile(&sorted, 0.25);
        let q75 = quantile(&sorted, 0.75);
        let root = (cell.n as f64).powf(1.0 / cfg.dim as f64);
        for k in k_grid() {
            let thr = k / root;
            let q_k =
                sorted.iter().filter(|&&d| d <= thr).count() as f64 / sorted.len() as f64;
            rows.push(SweepRow {
                n: cell.n,
                beta: cell.beta,
                k,
                q_k,
                median_bl: median,
                q25,
                q75,
                scaled_median: root * median,
            });
        }
    }
    let sweep = SweepResult { rows };
    sweep.write_csv(&out_dir.join("sweep.csv"))?;
    record.save(&out_dir.join("record.json"))?;
    Ok(SweepOutcome { sweep, record, out_dir })
}

/// Replay a stored record: same config, same seeds, same reduction
/// order — the regenerated `sweep.csv` must match the original bit for
/// bit.
pub fn rerun_from_record(record_path: &Path, out_root: &Path) -> Result<SweepOutcome> {
    let record = RunRecord::load(record_path)?;
    concentration_sweep(&record.config, out_root)
}

// ── Rate fit ────────────────────────────────────────────────────────────

/// Least-squares fit of log(median distance) against log N.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Set when r² < 0.8 — the medians do not follow a power law well
    /// enough to quote the slope.
    pub flagged: bool,
}

pub fn rate_fit(sweep: &SweepResult) -> Result<RateFit> {
    let cells = sweep.cell_summary();
    if cells.len() < 4 {
        return Err(Error::Precondition(format!(
            "rate fit needs ≥ 4 N-values, got {}",
            cells.len()
        )));
    }
    let mut xs = Vec::with_capacity(cells.len());
    let mut ys = Vec::with_capacity(cells.len());
    for row in &cells {
        if !(row.median_bl > 0.0) {
            return Err(Error::Domain(format!(
                "median distance {} at N = {} has no logarithm",
                row.median_bl, row.n
            )));
        }
        xs.push((row.n as f64).ln());
        ys.push(row.median_bl.ln());
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if syy == 0.0 {
        return Err(Error::Domain("medians are constant across N; no rate to fit".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let e = y - (intercept + slope * x);
            e * e
        })
        .sum();
    let r_squared = 1.0 - ss_res / syy;
    Ok(RateFit { slope, intercept, r_squared, flagged: r_squared < 0.8 })
}

// ── Lower-bound experiment ──────────────────────────────────────────────

/// Outcome of the distance-floor experiment: the φ_λ bound against the
/// solved μ_β's measured density ceiling, and per-sample margins.
#[derive(Debug, Clone, Serialize)]
pub struct LowerBoundReport {
    pub n: usize,
    pub beta: f64,
    /// Measured max density of μ_β — the M the bound is instantiated at.
    pub m_density: f64,
    pub lambda: f64,
    /// λ/(2N^{1/d}): the guaranteed BL distance floor.
    pub bound: f64,
    pub grid_h: f64,
    pub n_samples: usize,
    /// distance − (bound − 2h), per sample.
    pub margins: Vec<f64>,
    pub min_margin: f64,
    pub violations: usize,
}

/// Draw Gibbs samples and certify ‖emp_N − μ_β‖_BL ≥ bound − 2h on each
/// (2h absorbs the grid relaxation). The φ_λ nodal field is injected as
/// a candidate witness, so the solver's reported value already dominates
/// the floor whenever the mathematics says it must.
pub fn lower_bound_experiment(
    cfg: &Config,
    n: usize,
    n_samples: usize,
) -> Result<LowerBoundReport> {
    cfg.validate()?;
    if n_samples == 0 {
        return Err(Error::Precondition("need ≥ 1 sample".into()));
    }
    let v = cfg.potential_value()?;
    let kernel = CoulombKernel::new(cfg.dim, cfg.cbar)?;
    let params = cfg.params_for(n)?;
    let m = cfg.grid_m_for(n);
    let thermal = solve_cell_thermal(cfg, &v, &params, &kernel, m)?;
    let samples = gibbs_samples(cfg, &v, &params, &kernel, &thermal, n_samples, 0x10_0e5)?;
    lower_bound_on_samples(&samples, &thermal)
}

/// The certification half of [`lower_bound_experiment`], reusable for
/// externally supplied configurations.
pub fn lower_bound_on_samples(
    samples: &[ParticleConfig],
    thermal: &ThermalMeasure,
) -> Result<LowerBoundReport> {
    let Some(first) = samples.first() else {
        return Err(Error::Precondition("no samples to certify".into()));
    };
    let grid = thermal.measure().grid();
    let mu = thermal.measure();
    let m_density = (0..grid.n_nodes())
        .map(|f| mu.density(f))
        .fold(0.0f64, f64::max);
    let (bound, lambda) = phi_lambda_bound(first, m_density)?;
    let h = grid.spacing(0);
    let floor = bound - 2.0 * h;
    let opts = BlOptions::default();
    let margins: Vec<f64> = samples
        .par_iter()
        .map(|s| -> Result<f64> {
            let emp = bin_to_grid(s, grid)?;
            let diff = emp.difference(mu)?;
            let phi = phi_lambda_field(s, m_density, grid)?;
            let (val, _) = bl_norm_with(&diff, &[phi], &opts)?;
            Ok(val - floor)
        })
        .collect::<Result<Vec<_>>>()?;
    let min_margin = margins.iter().copied().fold(f64::INFINITY, f64::min);
    let violations = margins.iter().filter(|&&x| x < 0.0).count();
    Ok(LowerBoundReport {
        n: first.n(),
        beta: thermal.params().beta,
        m_density,
        lambda,
        bound,
        grid_h: h,
        n_samples: samples.len(),
        margins,
        min_margin,
        violations,
    })
}

// ── Diagnostic upper bound ──────────────────────────────────────────────

/// One (k, N) cell of the probability-bound diagnostic.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DiagCell {
    pub k: f64,
    /// k·N^{−1/d}, the distance threshold defining the event A.
    pub threshold: f64,
    pub observed_p: f64,
    pub n_exceed: usize,
    /// Minimum observed fluctuation energy over samples in A; 0 when A
    /// was never hit (the smeared energy is nonnegative).
    pub min_fluctuation: f64,
    pub bound: f64,
    pub consistent: bool,
}

/// Heuristic instantiation of P(A) ≤ K⁻¹·exp(−(N²β/2)·inf_A G): the true
/// infimum over the event is not computable, so the minimum *observed*
/// fluctuation energy stands in for it and the report is a consistency
/// check, not a proof.
#[derive(Debug, Clone, Serialize)]
pub struct DiagReport {
    pub n: usize,
    pub dim: usize,
    pub beta: f64,
    pub n_samples: usize,
    pub logk_mean: f64,
    pub logk_se: f64,
    /// log K instantiated conservatively: mean − 3se, floored at 0 for
    /// d ≥ 3 where K ≥ 1 holds unconditionally.
    pub logk_used: f64,
    pub cells: Vec<DiagCell>,
}

/// Exact-point quadratic fluctuation energy of a configuration around
/// μ_β: (1/N²)Σ_{i≠j} g(xᵢ−xⱼ) − (2/N)Σᵢ h^{μ_β}(xᵢ) + G(μ_β,μ_β), the
/// same diagonal-excluded pairing the partition-function estimator uses.
pub fn fluctuation_energy(
    sample: &ParticleConfig,
    thermal: &ThermalMeasure,
) -> Result<f64> {
    let grid = thermal.measure().grid();
    let kernel = thermal.kernel();
    let d = sample.dim();
    if d != grid.dim() {
        return Err(Error::GridMismatch("sample and thermal dimensions differ".into()));
    }
    let n = sample.n() as f64;
    let mut pair = 0.0;
    for i in 0..sample.n() {
        for j in i + 1..sample.n() {
            let r2: f64 = sample
                .point(i)
                .iter()
                .zip(sample.point(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if r2 == 0.0 {
                return Ok(f64::INFINITY);
            }
            pair += kernel.eval_g_radial(r2.sqrt());
        }
    }
    let mut h_sum = 0.0;
    for i in 0..sample.n() {
        h_sum += interp_at(thermal.h_nodes(), grid, sample.point(i))?;
    }
    let g_bb = integrate(thermal.h_nodes(), thermal.measure())?;
    Ok(2.0 * pair / (n * n) - 2.0 * h_sum / n + g_bb)
}

/// Run the probability-bound diagnostic at one small N over a k-grid.
pub fn diagnostic_upper_bound(
    cfg: &Config,
    n: usize,
    ks: &[f64],
    n_mc: usize,
    logk_samples: usize,
) -> Result<DiagReport> {
    cfg.validate()?;
    if ks.is_empty() || n_mc == 0 {
        return Err(Error::Precondition("need a k-grid and ≥ 1 MC sample".into()));
    }
    let v = cfg.potential_value()?;
    let kernel = CoulombKernel::new(cfg.dim, cfg.cbar)?;
    let params = cfg.params_for(n)?;
    let m = cfg.grid_m_for(n);
    let thermal = solve_cell_thermal(cfg, &v, &params, &kernel, m)?;
    let logk = estimate_log_k(&thermal, &params, logk_samples, cfg.seed ^ 0xD1A6)?;
    let base = logk.mean - 3.0 * logk.std_error;
    let logk_used = if cfg.dim >= 3 { base.max(0.0) } else { base };

    let samples = gibbs_samples(cfg, &v, &params, &kernel, &thermal, n_mc, 0xD1A6_B0)?;
    let (bl, _) = distances_to_thermal(&samples, &thermal, &BlOptions::default())?;
    let flucts: Vec<f64> = samples
        .iter()
        .map(|s| fluctuation_energy(s, &thermal))
        .collect::<Result<Vec<_>>>()?;

    let root = (n as f64).powf(1.0 / cfg.dim as f64);
    let half_beta_n2 = 0.5 * (n as f64) * (n as f64) * params.beta;
    let cells = ks
        .iter()
        .map(|&k| {
            let threshold = k / root;
            let hits: Vec<usize> =
                (0..bl.len()).filter(|&i| bl[i] > threshold).collect();
            let n_exceed = hits.len();
            let observed_p = n_exceed as f64 / bl.len() as f64;
            let min_fluctuation = if n_exceed == 0 {
                0.0
            } else {
                hits.iter().map(|&i| flucts[i]).fold(f64::INFINITY, f64::min)
            };
            let bound = (-logk_used - half_beta_n2 * min_fluctuation).exp();
            // Consistency within binomial MC noise of the observation.
            let se = (observed_p * (1.0 - observed_p) / bl.len() as f64)
                .sqrt()
                .max(1.0 / bl.len() as f64);
            DiagCell {
                k,
                threshold,
                observed_p,
                n_exceed,
                min_fluctuation,
                bound,
                consistent: observed_p <= bound + 3.0 * se,
            }
        })
        .collect();
    Ok(DiagReport {
        n,
        dim: cfg.dim,
        beta: params.beta,
        n_samples: n_mc,
        logk_mean: logk.mean,
        logk_se: logk.std_error,
        logk_used,
        cells,
    })
}

/// A single Metropolis chain delivering exactly `count` recorded Gibbs
/// samples under the config's sweep/thin/burn-in policy.
fn gibbs_samples(
    cfg: &Config,
    v: &Potential,
    params: &GasParams,
    kernel: &CoulombKernel,
    thermal: &ThermalMeasure,
    count: usize,
    salt: u64,
) -> Result<Vec<ParticleConfig>> {
    let post_needed = count * cfg.thin;
    let sweeps =
        ((post_needed as f64 / (1.0 - cfg.burn_frac)).ceil() as usize + cfg.thin).max(10);
    let seed = derive_chain_seed(cfg.seed, salt);
    let mut chain = init_chain(v, params, kernel, seed, &ChainInit::FromThermal(thermal))?;
    let mut samples =
        chain.run_chain(v, params, kernel, sweeps, cfg.thin, true, cfg.burn_frac)?;
    if samples.len() < count {
        return Err(Error::Precondition(format!(
            "chain produced {} samples, needed {count}",
            samples.len()
        )));
    }
    samples.truncate(count);
    Ok(samples)
}

// ── Verification batteries ──────────────────────────────────────────────

/// One named check with its outcome and a human-readable measurement.
#[derive(Debug, Clone, Serialize)]
pub struct CheckLine {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Batch outcome of the identity/inequality property suites.
#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckLine>,
    pub all_pass: bool,
}

/// Worst relative residual of the Hamiltonian splitting identity over
/// `pairs` random (configuration, β) draws. Configurations are drawn
/// from the solved μ_β (bulk positions, so the one-body term is finite);
/// thermal solves are shared across pairs with the same (d, Nβ).
pub fn splitting_battery(pairs: usize, seed: u64) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cache: BTreeMap<(usize, u64), ThermalMeasure> = BTreeMap::new();
    let nb_choices: [f64; 5] = [4.0, 8.0, 16.0, 32.0, 64.0];
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let d = if rng.random::<f64>() < 0.5 { 2 } else { 3 };
        let nb = nb_choices[rng.random_range(0..nb_choices.len())];
        let n = rng.random_range(4..=64usize);
        let v = Potential::quadratic(1.0)?;
        let kernel = CoulombKernel::new(d, 1.0)?;
        let key = (d, nb.to_bits());
        if !cache.contains_key(&key) {
            let params = GasParams::new(d, 100, nb / 100.0)?;
            let m = if d == 2 { 48 } else { 24 };
            // The identity's leftover is n²·⟨EL residual, emp−μ_β⟩, so the
            // solve must be pushed to the rounding floor.
            cache.insert(key, solve_thermal_auto(&v, &params, &kernel, m, 1e-12, 200_000)?);
        }
        let thermal = &cache[&key];
        let params = GasParams::new(d, n, nb / n as f64)?;
        let sampler = thermal.measure().sampler()?;
        let pts: Vec<f64> = (0..n).flat_map(|_| sampler.sample(&mut rng)).collect();
        let config = ParticleConfig::new(d, pts)?;
        let split = split_hamiltonian(&config, thermal, &v, &params)?;
        let rel = split.residual.abs() / split.total.abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok((worst, pairs))
}

/// Smearing identity battery: `separated` well-separated d = 3 configs
/// (exact identity) and as many overlapping ones (one-sided bound).
/// Returns (worst separated relative gap, worst overlap violation).
pub fn smearing_battery(separated: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kernel = CoulombKernel::new(3, 1.0)?;
    let mut worst_gap = 0.0f64;
    let mut worst_violation = 0.0f64;
    for _ in 0..separated {
        let n = rng.random_range(2..=12usize);
        // Jittered lattice sites keep a guaranteed minimum gap.
        let mut pts = Vec::with_capacity(n * 3);
        let mut cells: Vec<usize> = (0..64).collect();
        for _ in 0..n {
            let c = cells.swap_remove(rng.random_range(0..cells.len()));
            let (cx, cy, cz) = (c % 4, (c / 4) % 4, c / 16);
            for base in [cx, cy, cz] {
                pts.push(base as f64 + 0.5 + 0.2 * (rng.random::<f64>() - 0.5));
            }
        }
        let p = ParticleConfig::new(3, pts)?;
        let mut min_gap2 = f64::INFINITY;
        for i in 0..n {
            for j in i + 1..n {
                let r2: f64 = p
                    .point(i)
                    .iter()
                    .zip(p.point(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                min_gap2 = min_gap2.min(r2);
            }
        }
        let gap = min_gap2.sqrt();
        // Separated: all pair distances ≥ 2ε ⇒ exact identity.
        let check = smearing_identity_check(&p, 0.45 * gap, &kernel)?;
        worst_gap = worst_gap.max(check.gap.abs() / check.lhs.abs().max(1.0));
        // Overlapping: ε beyond half the closest gap ⇒ lhs ≥ rhs.
        let check = smearing_identity_check(&p, 0.8 * gap, &kernel)?;
        worst_violation = worst_violation.max(-(check.gap + 1e-12).min(0.0));
    }
    Ok((worst_gap, worst_violation))
}

/// Comparison-inequality battery: random signed measures, mixed whole
/// and strict sub-regions (weights zeroed off-region so the measure is
/// supported where the inequality needs it). Returns (worst ratio,
/// violations).
pub fn comparison_battery(count: usize, seed: u64) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut violations = 0usize;
    for t in 0..count {
        let d = if t % 3 == 2 { 3 } else { 2 };
        let m = if d == 2 { 8 } else { 5 };
        let grid = Grid::new(d, vec![0.0; d], vec![1.0; d], m)?;
        let region = match t % 3 {
            0 => Region::whole(grid.clone()),
            1 => Region::sub_box(grid.clone(), &[0.0; 3][..d], &[1.0, 0.72, 1.0][..d])?,
            _ => Region::whole(grid.clone()),
        };
        let amp = rng.random_range(0.2..4.0);
        let w: Vec<f64> = (0..grid.n_nodes())
            .map(|f| {
                if region.mask()[f] {
                    amp * (rng.random::<f64>() - 0.5)
                } else {
                    0.0
                }
            })
            .collect();
        let mu = GridMeasure::new(grid, w, MeasureKind::Signed)?;
        let rep = check_bl_vs_h1k(&mu, &region)?;
        if rep.ratio > 1.0 {
            violations += 1;
        }
        worst = worst.max(rep.ratio);
    }
    Ok((worst, violations))
}

/// The `verify` subcommand's work: moderate-size instances of the
/// splitting, smearing, norm-oracle, and comparison suites, each
/// reported as a named pass/fail line.
pub fn run_verification(seed: u64) -> Result<VerifyReport> {
    let mut checks = Vec::new();
    let mut push = |name: &str, pass: bool, detail: String| {
        checks.push(CheckLine { name: name.into(), pass, detail });
    };

    let (worst, pairs) = splitting_battery(24, seed)?;
    push(
        "splitting-identity",
        worst <= 1e-10,
        format!("worst relative residual {worst:.3e} over {pairs} pairs"),
    );

    let (gap, violation) = smearing_battery(20, seed ^ 1)?;
    push(
        "smearing-identity",
        gap <= 1e-9 && violation <= 0.0,
        format!("worst separated gap {gap:.3e}, overlap violation {violation:.3e}"),
    );

    let (ratio, violations) = comparison_battery(50, seed ^ 2)?;
    push(
        "bl-vs-h1k-inequality",
        violations == 0,
        format!("worst ratio {ratio:.4} over 50 measures, {violations} violations"),
    );

    // Two-point BL oracle on a transport pair at distance 1/2.
    let grid = Grid::new(2, vec![0.0, 0.0], vec![1.0, 1.0], 64)?;
    let mut w = vec![0.0; grid.n_nodes()];
    let (na, wa, ca) = grid.stencil(&[0.25, 0.5]);
    for c in 0..ca {
        w[na[c]] += wa[c];
    }
    let (nb, wb, cb) = grid.stencil(&[0.75, 0.5]);
    for c in 0..cb {
        w[nb[c]] -= wb[c];
    }
    let mu = GridMeasure::new(grid.clone(), w, MeasureKind::Signed)?;
    let opts = BlOptions { tol: 1e-4, max_iters: 40_000, probe_every: 500, stab_tol: 2e-4 };
    let (val, _) = bl_norm_with(&mu, &[], &opts)?;
    let h = grid.spacing(0);
    push(
        "bl-two-point-oracle",
        (val - 0.5).abs() <= 2.0 * h,
        format!("two-point norm {val:.6} vs 0.5 (2h = {:.4})", 2.0 * h),
    );

    // Energy-norm brute force on small mean-zero measures.
    let kernel2 = CoulombKernel::new(2, 1.0)?;
    let grid8 = Grid::new(2, vec![0.0, 0.0], vec![1.0, 1.0], 8)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
    let mut worst_h1 = 0.0f64;
    for _ in 0..5 {
        let mut wv: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mean = wv.iter().sum::<f64>() / 64.0;
        for x in &mut wv {
            *x -= mean;
        }
        let mu = GridMeasure::new(grid8.clone(), wv.clone(), MeasureKind::Signed)?;
        let v = h1_dual_norm(&mu, &kernel2)?;
        let diag = kernel2.smeared_g_radial(0.5 * grid8.spacing(0), 0.0);
        let mut e = 0.0;
        for a in 0..64 {
            for b in 0..64 {
                let g = if a == b {
                    diag
                } else {
                    let pa = grid8.node_point(a);
                    let pb = grid8.node_point(b);
                    let r2: f64 = (0..2).map(|t| (pa[t] - pb[t]) * (pa[t] - pb[t])).sum();
                    kernel2.eval_g_radial(r2.sqrt())
                };
                e += wv[a] * wv[b] * g;
            }
        }
        worst_h1 = worst_h1.max((v - e.max(0.0).sqrt()).abs());
    }
    push(
        "h1-dual-brute-force",
        worst_h1 <= 1e-8,
        format!("worst |dual − brute| = {worst_h1:.3e} over 5 measures"),
    );

    // Hand-solved 2×2 restricted Helmholtz case.
    let grid4 = Grid::new(2, vec![0.0, 0.0], vec![1.0, 1.0], 4)?;
    let mut mask = vec![false; 16];
    mask[5] = true;
    mask[6] = true;
    let region = Region::new(grid4.clone(), mask)?;
    let mut wv = vec![0.0; 16];
    wv[5] = 0.7;
    wv[6] = -0.2;
    let mu = GridMeasure::new(grid4, wv, MeasureKind::Signed)?;
    let got = h1_restricted_norm(&mu, &region)?;
    let h2 = (1.0f64 / 3.0) * (1.0 / 3.0);
    let det = (1.0 + h2) * (1.0 + h2) - 1.0;
    let u1 = ((1.0 + h2) * 0.7 - 0.2) / det;
    let u2 = (0.7 - (1.0 + h2) * 0.2) / det;
    let hand = (u1 * 0.7 - u2 * 0.2).sqrt();
    push(
        "h1k-two-node-oracle",
        (got - hand).abs() <= 1e-12,
        format!("restricted norm {got:.12} vs hand {hand:.12}"),
    );

    let all_pass = checks.iter().all(|c| c.pass);
    Ok(VerifyReport { checks, all_pass })
}

// ── Tests ───────────────────────────────────────────────────────────────
