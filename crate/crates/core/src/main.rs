//! Command-line driver for the Coulomb-gas laboratory.
//!
//! A configuration file (key=value lines) plus per-key command-line
//! overrides select the gas; subcommands solve μ_β, run Metropolis
//! chains, measure distances, and drive the concentration, lower-bound,
//! and upper-bound experiments. Exit codes: 0 success, 2 invalid
//! input/domain errors, 3 non-convergence, 4 partial results.

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use coulomb_lab::harness::{
    concentration_sweep, diagnostic_upper_bound, distances_to_thermal,
    lower_bound_experiment, rate_fit, rerun_from_record, run_verification, sample_cell,
    thermal_for, Config,
};
use coulomb_lab::metrics::BlOptions;
use coulomb_lab::sampler::read_samples;
use coulomb_lab::thermal::ThermalMeasure;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "coulomb-lab",
    version,
    about = "Coulomb-gas laboratory: thermal equilibrium measures, Gibbs sampling, \
             and N^{-1/d} concentration experiments"
)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    /// Output root for run artifacts.
    #[arg(long, global = true, default_value = "runs", value_name = "DIR")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

/// Configuration source and per-key overrides. Each flag mirrors one
/// configuration-file key and wins over the file.
#[derive(Args)]
struct Overrides {
    /// Configuration file (key=value lines, '#' comments).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Ambient dimension (2 or 3).
    #[arg(long = "dim", global = true, value_name = "D")]
    dim: Option<String>,
    /// Temperature schedule exponent: β = N^{−α}.
    #[arg(long = "alpha", global = true, value_name = "A")]
    alpha: Option<String>,
    /// Comma-separated particle numbers for the sweep.
    #[arg(long = "n_list", global = true, value_name = "N,N,...")]
    n_list: Option<String>,
    /// Independent Metropolis chains per cell.
    #[arg(long = "chains", global = true, value_name = "C")]
    chains: Option<String>,
    /// Sweeps per chain (one sweep = N single-particle proposals).
    #[arg(long = "sweeps", global = true, value_name = "S")]
    sweeps: Option<String>,
    /// Record every thin-th post-burn-in sweep.
    #[arg(long = "thin", global = true, value_name = "T")]
    thin: Option<String>,
    /// Master seed; all chain seeds derive from it.
    #[arg(long = "seed", global = true, value_name = "SEED")]
    seed: Option<String>,
    /// Half-side of the centered box Λ (0 = from confinement).
    #[arg(long = "box_l", global = true, value_name = "L")]
    box_l: Option<String>,
    /// Grid nodes per axis (0 = max(64, 4·N^{1/d})).
    #[arg(long = "grid_m", global = true, value_name = "M")]
    grid_m: Option<String>,
    /// Kernel normalization c̄.
    #[arg(long = "cbar", global = true, value_name = "C")]
    cbar: Option<String>,
    /// quadratic, quadratic:<a>, or custom-table:<path>.
    #[arg(long = "potential", global = true, value_name = "KIND")]
    potential: Option<String>,
    /// Thermal-solver residual tolerance.
    #[arg(long = "tol", global = true, value_name = "TOL")]
    tol: Option<String>,
    /// Thermal-solver iteration cap.
    #[arg(long = "max_iter", global = true, value_name = "I")]
    max_iter: Option<String>,
    /// Fraction of sweeps discarded as burn-in.
    #[arg(long = "burn_frac", global = true, value_name = "F")]
    burn_frac: Option<String>,
}

impl Overrides {
    fn build(&self) -> anyhow::Result<Config> {
        let mut cfg = match &self.config {
            Some(path) => Config::from_file(path)
                .with_context(|| format!("reading configuration {}", path.display()))?,
            None => Config::default(),
        };
        let pairs: [(&str, &Option<String>); 14] = [
            ("dim", &self.dim),
            ("alpha", &self.alpha),
            ("n_list", &self.n_list),
            ("chains", &self.chains),
            ("sweeps", &self.sweeps),
            ("thin", &self.thin),
            ("seed", &self.seed),
            ("box_l", &self.box_l),
            ("grid_m", &self.grid_m),
            ("cbar", &self.cbar),
            ("potential", &self.potential),
            ("tol", &self.tol),
            ("max_iter", &self.max_iter),
            ("burn_frac", &self.burn_frac),
        ];
        for (key, value) in pairs {
            if let Some(value) = value {
                cfg.apply(key, value)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve the thermal equilibrium measure μ_β for one N and store it.
    SolveThermal {
        /// Particle number the (N, β) cell is taken at.
        #[arg(long)]
        n: usize,
    },
    /// Run the configured Metropolis chains for one N and store the
    /// recorded configurations.
    Sample {
        #[arg(long)]
        n: usize,
    },
    /// BL and Coulomb-energy distances from stored samples to a stored
    /// thermal measure (CSV on stdout).
    Distance {
        /// Sample file written by `sample` or `sweep`.
        #[arg(long, value_name = "FILE")]
        samples: PathBuf,
        /// Thermal measure weights (`thermal_n<N>.bin`).
        #[arg(long, value_name = "FILE")]
        thermal: PathBuf,
        /// Thermal sidecar (`thermal_n<N>.json`).
        #[arg(long, value_name = "FILE")]
        meta: PathBuf,
    },
    /// Concentration sweep over the full N-schedule, or a bit-for-bit
    /// replay of a stored run record.
    Sweep {
        /// Replay this record.json instead of the configuration.
        #[arg(long, value_name = "FILE")]
        rerun_record: Option<PathBuf>,
    },
    /// Identity and inequality verification batteries.
    Verify,
    /// Certified BL distance floor on Gibbs samples at one N.
    LowerBound {
        #[arg(long)]
        n: usize,
        /// Gibbs samples to certify.
        #[arg(long, default_value_t = 100)]
        samples: usize,
    },
    /// Consistency check of the probability upper bound at one small N.
    DiagBound {
        #[arg(long, default_value_t = 8)]
        n: usize,
        /// Comma-separated k values (thresholds k·N^{−1/d}).
        #[arg(long, default_value = "0.5,1,2,4")]
        k_list: String,
        /// Gibbs samples for the exceedance probabilities.
        #[arg(long, default_value_t = 200)]
        mc: usize,
        /// Monte Carlo samples for the log K estimate.
        #[arg(long, default_value_t = 1000)]
        logk_samples: usize,
    },
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .downcast_ref::<coulomb_lab::Error>()
                .map_or(2, coulomb_lab::Error::exit_code);
            ExitCode::from(u8::try_from(code).unwrap_or(2))
        }
    }
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let cfg = cli.overrides.build()?;
    match cli.cmd {
        Cmd::SolveThermal { n } => cmd_solve_thermal(&cfg, n, &cli.out),
        Cmd::Sample { n } => cmd_sample(&cfg, n, &cli.out),
        Cmd::Distance { samples, thermal, meta } => {
            cmd_distance(&cfg, &samples, &thermal, &meta)
        }
        Cmd::Sweep { rerun_record } => cmd_sweep(&cfg, rerun_record.as_deref(), &cli.out),
        Cmd::Verify => cmd_verify(&cfg),
        Cmd::LowerBound { n, samples } => cmd_lower_bound(&cfg, n, samples),
        Cmd::DiagBound { n, k_list, mc, logk_samples } => {
            cmd_diag_bound(&cfg, n, &k_list, mc, logk_samples)
        }
    }
}

fn cmd_solve_thermal(cfg: &Config, n: usize, out: &std::path::Path) -> anyhow::Result<()> {
    let thermal = thermal_for(cfg, n)?;
    std::fs::create_dir_all(out)?;
    let bin = out.join(format!("thermal_n{n}.bin"));
    let meta = out.join(format!("thermal_n{n}.json"));
    thermal.save(&bin, &meta)?;
    let grid = thermal.measure().grid();
    let params = thermal.params();
    println!(
        "thermal measure: d={} N={} beta={:.6e} Nbeta={:.6}",
        params.dim,
        params.n_particles,
        params.beta,
        params.n_beta()
    );
    println!(
        "grid: {}^{} nodes on [{:.4}, {:.4}]^{}, spacing {:.4e}",
        grid.nodes_per_axis(),
        grid.dim(),
        grid.lower()[0],
        grid.upper()[0],
        grid.dim(),
        grid.spacing(0)
    );
    println!(
        "converged in {} iterations, EL residual {:.3e}, multiplier c = {:.8}",
        thermal.iterations(),
        thermal.residual(),
        thermal.lagrange_c()
    );
    println!("wrote {} and {}", bin.display(), meta.display());
    Ok(())
}

fn cmd_sample(cfg: &Config, n: usize, out: &std::path::Path) -> anyhow::Result<()> {
    cfg.validate()?;
    let cell_idx = cfg.n_list.iter().position(|&m| m == n).unwrap_or(0);
    std::fs::create_dir_all(out)?;
    let (_, chains, samples) = sample_cell(cfg, cell_idx, n, out)?;
    println!(
        "N={n}: {} chains × {} sweeps (thin {}, burn {:.0}%), {} recorded configurations",
        cfg.chains,
        cfg.sweeps,
        cfg.thin,
        100.0 * cfg.burn_frac,
        samples.len()
    );
    for (ci, st) in chains.iter().enumerate() {
        println!(
            "chain {ci}: seed {:#018x}, acceptance {:.3}, final step {:.4e}, {} samples -> {}",
            st.seed,
            st.accept_rate,
            st.final_step,
            st.n_samples,
            out.join(format!("samples/n{n}-c{ci}.bin")).display()
        );
    }
    Ok(())
}

fn cmd_distance(
    cfg: &Config,
    samples: &std::path::Path,
    thermal_bin: &std::path::Path,
    meta: &std::path::Path,
) -> anyhow::Result<()> {
    let v = cfg.potential_value()?;
    let thermal = ThermalMeasure::load(thermal_bin, meta, &v)?;
    let configs = read_samples(samples)?;
    let (bl, h1) = distances_to_thermal(&configs, &thermal, &BlOptions::default())?;
    println!("index,bl,h1");
    for i in 0..bl.len() {
        println!("{i},{:.17e},{:.17e}", bl[i], h1[i]);
    }
    Ok(())
}

fn cmd_sweep(
    cfg: &Config,
    rerun: Option<&std::path::Path>,
    out: &std::path::Path,
) -> anyhow::Result<()> {
    let outcome = match rerun {
        Some(record) => rerun_from_record(record, out)?,
        None => concentration_sweep(cfg, out)?,
    };
    println!("run {} -> {}", outcome.record.run_id, outcome.out_dir.display());
    for row in outcome.sweep.cell_summary() {
        let first_covered = outcome
            .sweep
            .rows
            .iter()
            .find(|r| r.n == row.n && r.q_k >= 0.95)
            .map_or("none".to_string(), |r| format!("{:.2}", r.k));
        println!(
            "N={:5} beta={:.4e}: median {:.5e} [{:.5e}, {:.5e}], scaled {:.4}, q>=0.95 at k={}",
            row.n, row.beta, row.median_bl, row.q25, row.q75, row.scaled_median, first_covered
        );
    }
    if outcome.sweep.n_values().len() >= 4 {
        let fit = rate_fit(&outcome.sweep)?;
        println!(
            "rate fit: slope {:.4} (target -1/{}), r^2 = {:.4}{}",
            fit.slope,
            outcome.record.config.dim,
            fit.r_squared,
            if fit.flagged { " [FLAGGED: poor power-law fit]" } else { "" }
        );
    }
    if outcome.record.partial {
        for f in &outcome.record.failures {
            eprintln!("failed cell: {f}");
        }
        return Err(coulomb_lab::Error::Partial(format!(
            "{} of {} cells failed; outputs written to {}",
            outcome.record.failures.len(),
            outcome.record.config.n_list.len(),
            outcome.out_dir.display()
        ))
        .into());
    }
    Ok(())
}

fn cmd_verify(cfg: &Config) -> anyhow::Result<()> {
    let report = run_verification(cfg.seed)?;
    for line in &report.checks {
        println!("[{}] {}: {}", if line.pass { "PASS" } else { "FAIL" }, line.name, line.detail);
    }
    if !report.all_pass {
        let failed: Vec<&str> =
            report.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
        return Err(coulomb_lab::Error::Partial(format!(
            "verification failed: {}",
            failed.join(", ")
        ))
        .into());
    }
    println!("all {} verification batteries passed", report.checks.len());
    Ok(())
}

fn cmd_lower_bound(cfg: &Config, n: usize, samples: usize) -> anyhow::Result<()> {
    let report = lower_bound_experiment(cfg, n, samples)?;
    println!(
        "N={} beta={:.4e}: max density M = {:.4}, lambda = {:.4e}, floor = {:.6e} (grid h = {:.3e})",
        report.n, report.beta, report.m_density, report.lambda, report.bound, report.grid_h
    );
    println!(
        "{} samples: min margin {:.6e}, {} violations of distance >= floor - 2h",
        report.n_samples, report.min_margin, report.violations
    );
    if report.violations > 0 {
        return Err(coulomb_lab::Error::Partial(format!(
            "{} of {} samples violated the certified floor",
            report.violations, report.n_samples
        ))
        .into());
    }
    Ok(())
}

fn cmd_diag_bound(
    cfg: &Config,
    n: usize,
    k_list: &str,
    mc: usize,
    logk_samples: usize,
) -> anyhow::Result<()> {
    let ks: Vec<f64> = k_list
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| anyhow::anyhow!("k value {t:?}: {e}")))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let report = diagnostic_upper_bound(cfg, n, &ks, mc, logk_samples)?;
    println!(
        "N={} d={} beta={:.4e}: log K = {:.4} ± {:.4} ({} MC samples), using {:.4}",
        report.n, report.dim, report.beta, report.logk_mean, report.logk_se, logk_samples,
        report.logk_used
    );
    println!("k,threshold,observed_p,n_exceed,min_fluctuation,bound,consistent");
    for c in &report.cells {
        println!(
            "{},{:.6e},{:.6},{},{:.6e},{:.6e},{}",
            c.k, c.threshold, c.observed_p, c.n_exceed, c.min_fluctuation, c.bound, c.consistent
        );
    }
    let bad = report.cells.iter().filter(|c| !c.consistent).count();
    if bad > 0 {
        return Err(coulomb_lab::Error::Partial(format!(
            "{bad} of {} thresholds inconsistent with the heuristic bound",
            report.cells.len()
        ))
        .into());
    }
    Ok(())
}
