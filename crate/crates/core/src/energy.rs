//! Coulomb energies and the exact decomposition of the Hamiltonian
//! around a thermal equilibrium measure.
//!
//! For a configuration X_N = (x_1,…,x_N) the Hamiltonian is
//! H_N(X) = (1/2) Σ_{i≠j} g(x_i−x_j) + N Σ_i V(x_i); for grid measures
//! the cross-energy is G(μ,ν) = ∬ g(x−y) dμ(x) dν(y) under the
//! regularized nodal kernel of the measures module.
//!
//! [`split_hamiltonian`] rewrites the quadrature Hamiltonian of a binned
//! configuration exactly as
//! N²·E_β(μ_β) + N·Σ_i ζ_β(x_i) + (N²/2)·G(emp−μ_β, emp−μ_β) + residual,
//! with ζ_β = −(1/(Nβ)) log μ_β. Because every term shares one grid
//! quadrature — binning and interpolation are adjoint, and one kernel
//! matrix drives every energy — the residual is pure rounding plus the
//! Euler–Lagrange defect of the solved μ_β, not a discretization gap.

use crate::error::{Error, Result};
use crate::kernel::CoulombKernel;
use crate::measures::{
    bin_to_grid, integrate, interp_at, potential_field, ConvOperator, GridMeasure,
    ParticleConfig,
};
use crate::thermal::{Potential, ThermalMeasure};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

// ── Gas parameters ──────────────────────────────────────────────────────

/// Particle count and inverse temperature, optionally tied to the
/// schedule β = N^{−α}. The thermal regime needs Nβ > 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GasParams {
    pub dim: usize,
    pub n_particles: usize,
    pub beta: f64,
    /// Schedule exponent when β = N^{−α} is in force; α ∈ (0, 1).
    pub alpha: Option<f64>,
}

impl GasParams {
    pub fn new(dim: usize, n_particles: usize, beta: f64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Domain(format!("gas dimension {dim} < 2")));
        }
        if n_particles == 0 {
            return Err(Error::Domain("need at least one particle".into()));
        }
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::Domain(format!("inverse temperature {beta} not positive")));
        }
        Ok(Self { dim, n_particles, beta, alpha: None })
    }

    /// β = N^{−α} with α ∈ (0, 1), so Nβ = N^{1−α} → ∞ along the schedule.
    pub fn scheduled(dim: usize, n_particles: usize, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Domain(format!("schedule exponent {alpha} outside (0, 1)")));
        }
        let beta = (n_particles as f64).powf(-alpha);
        let mut p = Self::new(dim, n_particles, beta)?;
        p.alpha = Some(alpha);
        Ok(p)
    }

    #[must_use]
    pub fn n_beta(&self) -> f64 {
        self.n_particles as f64 * self.beta
    }

    /// The thermal equilibrium measure is defined only for Nβ > 2.
    pub fn require_thermal(&self) -> Result<()> {
        if self.n_beta() <= 2.0 {
            return Err(Error::Precondition(format!(
                "thermal measure needs Nβ > 2, got Nβ = {}",
                self.n_beta()
            )));
        }
        Ok(())
    }
}

// ── Pairwise energy and Hamiltonian ─────────────────────────────────────

/// (1/2) Σ_{i≠j} g(x_i − x_j) by direct summation. Deterministic across
/// thread counts: per-particle partial sums reduce in index order.
pub fn pairwise_energy(p: &ParticleConfig, kernel: &CoulombKernel) -> Result<f64> {
    if p.dim() != kernel.dim() {
        return Err(Error::GridMismatch("configuration and kernel dimensions differ".into()));
    }
    let n = p.n();
    let partials: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let xi = p.point(i);
            let mut acc = 0.0;
            for j in i + 1..n {
                let xj = p.point(j);
                let r2: f64 = xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum();
                if r2 == 0.0 {
                    return Err(Error::CoincidentPair { i, j });
                }
                acc += kernel.eval_g_radial(r2.sqrt());
            }
            Ok(acc)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(partials.iter().sum())
}

/// H_N(X) = pairwise energy + N Σ_i V(x_i).
pub fn hamiltonian(
    p: &ParticleConfig,
    v: &Potential,
    params: &GasParams,
    kernel: &CoulombKernel,
) -> Result<f64> {
    if p.dim() != params.dim {
        return Err(Error::GridMismatch("configuration and parameter dimensions differ".into()));
    }
    let pair = pairwise_energy(p, kernel)?;
    let vsum: f64 = (0..p.n()).map(|i| v.eval(p.point(i))).sum();
    Ok(pair + p.n() as f64 * vsum)
}

// ── Cross-energies ──────────────────────────────────────────────────────

/// G(μ,ν) = ∬ g(x−y) dμ dν = ⟨h^ν, μ⟩ under the regularized nodal kernel.
pub fn cross_energy(mu: &GridMeasure, nu: &GridMeasure, kernel: &CoulombKernel) -> Result<f64> {
    if mu.grid() != nu.grid() {
        return Err(Error::GridMismatch("cross-energy of measures on different grids".into()));
    }
    let field = potential_field(nu, kernel)?;
    integrate(&field, mu)
}

/// G(μ,ν) with a prebuilt convolution operator (hot loops).
#[must_use]
pub fn cross_energy_with(op: &ConvOperator, mu_weights: &[f64], nu_weights: &[f64]) -> f64 {
    let field = op.apply(nu_weights);
    field.iter().zip(mu_weights).map(|(f, w)| f * w).sum()
}

// ── Splitting decomposition ─────────────────────────────────────────────

/// The four terms of the Hamiltonian decomposition around μ_β plus the
/// leftover; `residual = total − (leading + zeta_sum + fluctuation)` and
/// vanishes to rounding under shared discretization.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitResult {
    /// Quadrature Hamiltonian (N²/2)G(emp,emp) + N²⟨V,emp⟩ of the binned
    /// configuration.
    pub total: f64,
    /// N² E_β(μ_β): energy + confinement + (1/(Nβ)) entropy of μ_β.
    pub leading: f64,
    /// N Σ_i ζ_β(x_i) with ζ_β = −(1/(Nβ)) log μ_β interpolated.
    pub zeta_sum: f64,
    /// (N²/2) G(emp−μ_β, emp−μ_β) ≥ 0.
    pub fluctuation: f64,
    pub residual: f64,
}

/// Decomposes the quadrature Hamiltonian of `p` around the solved μ_β.
///
/// `params` supplies Nβ for the entropy/ζ weighting and must agree with
/// the parameters μ_β was solved at; the configuration size may differ
/// from `params.n_particles` (degenerate splits stay exact).
pub fn split_hamiltonian(
    p: &ParticleConfig,
    thermal: &ThermalMeasure,
    v: &Potential,
    params: &GasParams,
) -> Result<SplitResult> {
    let grid = thermal.measure().grid();
    if p.dim() != grid.dim() {
        return Err(Error::GridMismatch("configuration and thermal grid dimensions differ".into()));
    }
    let nb = params.n_beta();
    let nb_solved = thermal.params().n_beta();
    if (nb - nb_solved).abs() > 1e-12 * nb_solved.abs() {
        return Err(Error::Precondition(format!(
            "splitting with Nβ = {nb} against a thermal measure solved at Nβ = {nb_solved}"
        )));
    }

    let ell = thermal.log_density();
    for i in 0..p.n() {
        if !grid.contains(p.point(i)) {
            return Err(Error::OutOfBox { index: i });
        }
        if interp_at(ell, grid, p.point(i))? < -700.0 {
            return Err(Error::Underflow { node: i });
        }
    }

    let n = p.n() as f64;
    let w_e = bin_to_grid(p, grid)?;
    let w_b = thermal.measure().weights();
    let h_b = thermal.h_nodes();
    let delta: Vec<f64> = w_e.weights().iter().zip(w_b).map(|(e, b)| e - b).collect();

    let op = ConvOperator::new(grid, thermal.kernel())?;
    let h_delta = op.apply(&delta);

    let g_bb: f64 = h_b.iter().zip(w_b).map(|(h, w)| h * w).sum();
    let g_eb: f64 = h_b.iter().zip(w_e.weights()).map(|(h, w)| h * w).sum();
    let g_dd: f64 = h_delta.iter().zip(&delta).map(|(h, d)| h * d).sum();
    let g_ee = 2.0 * g_eb - g_bb + g_dd;

    let v_nodes: Vec<f64> = (0..grid.n_nodes())
        .map(|f| v.eval(&grid.node_point(f)[..grid.dim()]))
        .collect();
    let v_e: f64 = v_nodes.iter().zip(w_e.weights()).map(|(v, w)| v * w).sum();
    let v_b: f64 = v_nodes.iter().zip(w_b).map(|(v, w)| v * w).sum();
    let entropy: f64 = ell.iter().zip(w_b).map(|(l, w)| if *w > 0.0 { l * w } else { 0.0 }).sum();

    let leading = n * n * (0.5 * g_bb + v_b + entropy / nb);
    let zeta: Vec<f64> = ell.iter().map(|l| -l / nb).collect();
    let zeta_sum = n
        * (0..p.n())
            .map(|i| interp_at(&zeta, grid, p.point(i)))
            .sum::<Result<f64>>()?;
    let fluctuation = 0.5 * n * n * g_dd;
    let total = 0.5 * n * n * g_ee + n * n * v_e;
    let residual = total - (leading + zeta_sum + fluctuation);
    Ok(SplitResult { total, leading, zeta_sum, fluctuation, residual })
}

// ── Smearing identity ───────────────────────────────────────────────────

/// Both sides of the smeared-interaction identity and their gap.
#[derive(Debug, Clone, Copy)]
pub struct SmearingCheck {
    /// (1/N²) Σ_{i≠j} g(x_i−x_j).
    pub lhs: f64,
    /// G(P_ε, P_ε) minus the per-atom smearing self-energy.
    pub rhs: f64,
    /// lhs − rhs: zero when all pair gaps ≥ 2ε, positive otherwise.
    pub gap: f64,
}

/// Compares the exact pair interaction against the smeared interaction
/// of P_ε = emp ∗ λ_ε with the self-energy of one smeared atom removed:
/// rhs = G(P_ε,P_ε) − (1/N)·G(λ_ε,λ_ε). Pairwise smeared values use the
/// closed-form two-fold mollified kernel, not grid quadrature, so the
/// separated case is an identity rather than an approximation.
pub fn smearing_identity_check(
    p: &ParticleConfig,
    eps: f64,
    kernel: &CoulombKernel,
) -> Result<SmearingCheck> {
    if kernel.dim() < 3 {
        return Err(Error::Precondition(
            "smearing identity check supports d ≥ 3 only (the log kernel obeys a bound, not an identity)"
                .into(),
        ));
    }
    if p.dim() != kernel.dim() {
        return Err(Error::GridMismatch("configuration and kernel dimensions differ".into()));
    }
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::Domain(format!("smearing radius {eps} not positive")));
    }
    let n = p.n() as f64;
    let lhs = 2.0 * pairwise_energy(p, kernel)? / (n * n);
    let mut smeared_pairs = 0.0;
    for i in 0..p.n() {
        for j in i + 1..p.n() {
            let r2: f64 = p
                .point(i)
                .iter()
                .zip(p.point(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            smeared_pairs += kernel.two_fold_smeared_radial(eps, r2.sqrt())?;
        }
    }
    let self_energy = kernel.ball_self_energy(eps)?;
    let g_pp = (2.0 * smeared_pairs + n * self_energy) / (n * n);
    let rhs = g_pp - self_energy / n;
    Ok(SmearingCheck { lhs, rhs, gap: lhs - rhs })
}

// ── Tests ───────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::{Grid, MeasureKind};
    use crate::thermal::solve_thermal;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kernel(dim: usize) -> CoulombKernel {
        CoulombKernel::new(dim, 1.0).unwrap()
    }

    fn random_config(dim: usize, n: usize, half: f64, seed: u64) -> ParticleConfig {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-half..half)).collect();
        ParticleConfig::new(dim, pts).unwrap()
    }

    #[test]
    fn gas_params_validation() {
        assert!(GasParams::new(2, 0, 1.0).is_err());
        assert!(GasParams::new(2, 4, 0.0).is_err());
        assert!(GasParams::scheduled(2, 64, 1.2).is_err());
        let p = GasParams::scheduled(2, 64, 0.5).unwrap();
        assert!((p.beta - 0.125).abs() < 1e-15, "64^{{-1/2}} = 1/8, got {}", p.beta);
        assert!((p.n_beta() - 8.0).abs() < 1e-12);
        assert!(p.require_thermal().is_ok());
        assert!(GasParams::new(2, 2, 0.5).unwrap().require_thermal().is_err(), "Nβ = 1");
    }

    #[test]
    fn pairwise_hand_values() {
        let k = kernel(3);
        let two = ParticleConfig::new(3, vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!((pairwise_energy(&two, &k).unwrap() - 1.0).abs() < 1e-15);
        let s = 0.75f64.sqrt();
        let tri =
            ParticleConfig::new(3, vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.5, s, 0.0]).unwrap();
        assert!(
            (pairwise_energy(&tri, &k).unwrap() - 3.0).abs() < 1e-12,
            "equilateral triangle of side 1"
        );
    }

    #[test]
    fn pairwise_matches_double_loop() {
        let k = kernel(3);
        let p = random_config(3, 50, 1.0, 11);
        let fast = pairwise_energy(&p, &k).unwrap();
        let mut slow = 0.0;
        for i in 0..p.n() {
            for j in 0..p.n() {
                if i != j {
                    let r2: f64 = p
                        .point(i)
                        .iter()
                        .zip(p.point(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    slow += 0.5 * k.eval_g_radial(r2.sqrt());
                }
            }
        }
        assert!((fast - slow).abs() <= 1e-12 * slow.abs(), "{fast} vs {slow}");
    }

    #[test]
    fn pairwise_invariances() {
        for dim in [2usize, 3] {
            let k = kernel(dim);
            let p = random_config(dim, 20, 1.0, 5);
            let base = pairwise_energy(&p, &k).unwrap();
            // Translation.
            let shifted: Vec<f64> = p
                .points_flat()
                .iter()
                .enumerate()
                .map(|(c, v)| v + if c % dim == 0 { 0.7 } else { -0.3 })
                .collect();
            let ps = ParticleConfig::new(dim, shifted).unwrap();
            let shifted_e = pairwise_energy(&ps, &k).unwrap();
            assert!(
                (base - shifted_e).abs() <= 1e-12 * base.abs().max(1.0),
                "d={dim} translation: {base} vs {shifted_e}"
            );
            // Permutation (reverse particle order).
            let mut rev = Vec::with_capacity(p.points_flat().len());
            for i in (0..p.n()).rev() {
                rev.extend_from_slice(p.point(i));
            }
            let pr = ParticleConfig::new(dim, rev).unwrap();
            let perm_e = pairwise_energy(&pr, &k).unwrap();
            assert!((base - perm_e).abs() <= 1e-12 * base.abs().max(1.0), "d={dim} permutation");
        }
    }

    #[test]
    fn coincident_pair_is_named() {
        let k = kernel(2);
        let p = ParticleConfig::new(2, vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        match pairwise_energy(&p, &k) {
            Err(Error::CoincidentPair { i, j }) => assert!((i, j) == (0, 2), "pair ({i},{j})"),
            other => panic!("expected coincident-pair error, got {other:?}"),
        }
    }

    #[test]
    fn hamiltonian_hand_values() {
        let k = kernel(3);
        let v = Potential::quadratic(1.0).unwrap();
        let params = GasParams::new(3, 2, 1.0).unwrap();
        let p = ParticleConfig::new(3, vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let h = hamiltonian(&p, &v, &params, &k).unwrap();
        assert!((h - 3.0).abs() < 1e-14, "1 + 2·(0+1) = 3, got {h}");
        // V ≡ 0 reduces to the pairwise energy.
        let v0 = Potential::quadratic(0.0).unwrap();
        let h0 = hamiltonian(&p, &v0, &params, &k).unwrap();
        assert!((h0 - pairwise_energy(&p, &k).unwrap()).abs() < 1e-15);
        // N = 1: no interaction.
        let single = ParticleConfig::new(3, vec![2.0, 0.0, 0.0]).unwrap();
        let p1 = GasParams::new(3, 1, 1.0).unwrap();
        assert!((hamiltonian(&single, &v, &p1, &k).unwrap() - 4.0).abs() < 1e-14);
    }

    #[test]
    fn cross_energy_symmetry_and_bilinearity() {
        let g = Grid::centered_cube(2, 1.0, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let k = kernel(2);
        let mk = |rng: &mut ChaCha8Rng| {
            let w: Vec<f64> = (0..g.n_nodes()).map(|_| rng.random_range(-1.0..1.0)).collect();
            GridMeasure::new(g.clone(), w, MeasureKind::Signed).unwrap()
        };
        let mu = mk(&mut rng);
        let nu = mk(&mut rng);
        let ab = cross_energy(&mu, &nu, &k).unwrap();
        let ba = cross_energy(&nu, &mu, &k).unwrap();
        assert!((ab - ba).abs() <= 1e-12 * ab.abs().max(1.0), "symmetry {ab} vs {ba}");
        let double = GridMeasure::new(
            g.clone(),
            mu.weights().iter().map(|w| 2.0 * w).collect(),
            MeasureKind::Signed,
        )
        .unwrap();
        let d = cross_energy(&double, &nu, &k).unwrap();
        assert!((d - 2.0 * ab).abs() <= 1e-12 * d.abs().max(1.0), "bilinearity");
    }

    #[test]
    fn cross_energy_of_ball_matches_self_energy_constant() {
        let g = Grid::centered_cube(3, 1.0, 64).unwrap();
        let k = kernel(3);
        let ball_r = 0.4;
        let mut w = vec![0.0; g.n_nodes()];
        for f in 0..g.n_nodes() {
            let pt = g.node_point(f);
            if pt[..3].iter().map(|c| c * c).sum::<f64>() <= ball_r * ball_r {
                w[f] = g.cell_volume(f);
            }
        }
        let total: f64 = w.iter().sum();
        for x in &mut w {
            *x /= total;
        }
        let mu = GridMeasure::new(g, w, MeasureKind::Probability).unwrap();
        let got = cross_energy(&mu, &mu, &k).unwrap();
        let expect = k.ball_self_energy(ball_r).unwrap();
        assert!(
            (got - expect).abs() < 0.02 * expect,
            "G(λ_R,λ_R) on the grid: {got} vs closed form {expect}"
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn quadratic_form_is_positive_semidefinite(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dim = if seed % 2 == 0 { 2 } else { 3 };
            let m = if dim == 2 { 9 } else { 5 };
            let g = Grid::centered_cube(dim, 1.0, m).unwrap();
            let mut w: Vec<f64> = (0..g.n_nodes()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            for x in &mut w {
                *x -= mean;
            }
            let mu = GridMeasure::new(g, w, MeasureKind::Signed).unwrap();
            let q = cross_energy(&mu, &mu, &kernel(dim)).unwrap();
            prop_assert!(q >= -1e-10, "d={dim}: negative quadratic form {q}");
        }
    }

    #[test]
    fn smearing_identity_separated_and_overlapping() {
        let k = kernel(3);
        let eps = 0.05;
        // N=2 at distance 3ε: exact identity.
        let p2 = ParticleConfig::new(3, vec![0.0, 0.0, 0.0, 3.0 * eps, 0.0, 0.0]).unwrap();
        let chk = smearing_identity_check(&p2, eps, &k).unwrap();
        assert!(
            chk.gap.abs() <= 1e-12 * chk.lhs.abs(),
            "separated two-particle gap {}",
            chk.gap
        );
        // Random configs with all gaps ≥ 2ε.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut made = 0;
        while made < 10 {
            let pts: Vec<f64> = (0..8 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p = ParticleConfig::new(3, pts).unwrap();
            let min_gap = (0..p.n())
                .flat_map(|i| (i + 1..p.n()).map(move |j| (i, j)))
                .map(|(i, j)| {
                    p.point(i)
                        .iter()
                        .zip(p.point(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            if min_gap < 2.0 * eps {
                continue;
            }
            made += 1;
            let c = smearing_identity_check(&p, eps, &k).unwrap();
            assert!(
                c.gap.abs() <= 1e-9 * c.lhs.abs(),
                "separated config gap {} (lhs {})",
                c.gap,
                c.lhs
            );
        }
        // One overlapping pair: lhs strictly dominates.
        let close = ParticleConfig::new(3, vec![0.0, 0.0, 0.0, 1.2 * eps, 0.0, 0.0]).unwrap();
        let c = smearing_identity_check(&close, eps, &k).unwrap();
        assert!(c.gap >= -1e-12, "inequality direction violated: {}", c.gap);
        assert!(c.gap > 1e-6, "overlapping pair should open a strict gap");
        // d = 2 unsupported; N = 1 degenerate.
        assert!(smearing_identity_check(&random_config(2, 4, 1.0, 1), eps, &kernel(2)).is_err());
        let single = ParticleConfig::new(3, vec![0.2, 0.1, 0.0]).unwrap();
        let c1 = smearing_identity_check(&single, eps, &k).unwrap();
        assert!(c1.lhs == 0.0 && c1.gap.abs() < 1e-15, "N=1 is trivial");
    }

    // ── Splitting ──

    fn solved_thermal(
        n_beta: f64,
        m: usize,
        half: f64,
    ) -> (ThermalMeasure, Potential, GasParams) {
        let v = Potential::quadratic(1.0).unwrap();
        let params = GasParams::new(2, 32, n_beta / 32.0).unwrap();
        let grid = Grid::centered_cube(2, half, m).unwrap();
        let th = solve_thermal(&v, &params, &grid, &kernel(2), 1e-12, 200_000).unwrap();
        (th, v, params)
    }

    #[test]
    fn splitting_residual_vanishes() {
        let nb = 8.0f64;
        let half = (27.64 / nb).sqrt();
        let (th, v, params) = solved_thermal(nb, 64, half);
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let sampler = th.measure().sampler().unwrap();
        for rep in 0..5 {
            let pts: Vec<f64> =
                (0..32).flat_map(|_| sampler.sample(&mut rng)).collect();
            let p = ParticleConfig::new(2, pts).unwrap();
            let s = split_hamiltonian(&p, &th, &v, &params).unwrap();
            let rel = s.residual.abs() / s.total.abs().max(1.0);
            assert!(rel <= 1e-10, "rep {rep}: relative residual {rel:.3e}");
            assert!(s.fluctuation >= 0.0, "fluctuation term is a squared energy");
            let closure = s.total - (s.leading + s.zeta_sum + s.fluctuation + s.residual);
            assert!(closure.abs() <= 1e-9 * s.total.abs().max(1.0), "bookkeeping closes");
        }
    }

    #[test]
    fn splitting_holds_after_beta_rescale() {
        let half = (27.64f64 / 8.0).sqrt();
        let (_, v, _) = solved_thermal(8.0, 48, half);
        // Re-solve at 2β on the same box and check the identity there.
        let params2 = GasParams::new(2, 32, 16.0 / 32.0).unwrap();
        let grid = Grid::centered_cube(2, half, 48).unwrap();
        let th2 = solve_thermal(&v, &params2, &grid, &kernel(2), 1e-12, 200_000).unwrap();
        let sampler = th2.measure().sampler().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let pts: Vec<f64> = (0..24).flat_map(|_| sampler.sample(&mut rng)).collect();
        let p = ParticleConfig::new(2, pts).unwrap();
        let s = split_hamiltonian(&p, &th2, &v, &params2).unwrap();
        assert!(
            s.residual.abs() <= 1e-10 * s.total.abs().max(1.0),
            "residual after rescale {}",
            s.residual
        );
    }

    #[test]
    fn splitting_degenerate_single_particle() {
        let nb = 8.0f64;
        let half = (27.64 / nb).sqrt();
        let (th, v, params) = solved_thermal(nb, 48, half);
        let p = ParticleConfig::new(2, vec![0.1, -0.05]).unwrap();
        let s = split_hamiltonian(&p, &th, &v, &params).unwrap();
        assert!(
            s.residual.abs() <= 1e-10 * s.total.abs().max(1.0),
            "N=1 residual {}",
            s.residual
        );
        assert!(s.fluctuation >= 0.0);
    }

    #[test]
    fn splitting_flags_tail_underflow() {
        // A deliberately oversized box drives the far-tail log-density
        // below −700; a particle placed there is refused.
        let v = Potential::quadratic(1.0).unwrap();
        let params = GasParams::new(2, 32, 0.25).unwrap();
        let half = 6.0 * (27.64f64 / 8.0).sqrt();
        let grid = Grid::centered_cube(2, half, 64).unwrap();
        let th = solve_thermal(&v, &params, &grid, &kernel(2), 1e-9, 200_000).unwrap();
        let corner = ParticleConfig::new(2, vec![0.98 * half, 0.98 * half]).unwrap();
        match split_hamiltonian(&corner, &th, &v, &params) {
            Err(Error::Underflow { node }) => assert!(node == 0, "flagged particle {node}"),
            other => panic!("expected underflow flag, got {other:?}"),
        }
        // Out-of-box particle is refused with its index.
        let outside = ParticleConfig::new(2, vec![0.0, 0.0, 2.0 * half, 0.0]).unwrap();
        assert!(matches!(
            split_hamiltonian(&outside, &th, &v, &params),
            Err(Error::OutOfBox { index: 1 })
        ));
    }
}
