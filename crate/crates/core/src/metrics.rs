//! Distances between measures. The bounded-Lipschitz norm
//! ‖μ‖_BL = sup{∫f dμ : ‖f‖_∞ ≤ 1, Lip(f) ≤ 1} is computed through its
//! dual linear program on the grid-edge relaxation (axis + diagonal
//! neighbor constraints); the solver reports a certified lower bound (a
//! feasible witness) together with a duality-gap certificate. The
//! Coulomb-energy norm ‖μ‖_{H⁻¹} = √G(μ,μ) and the restricted norm
//! ‖μ‖_{H⁻¹(K)} (zero-flux Helmholtz solve on K) feed the comparison
//! inequality ‖μ‖_BL ≤ √(d+1)·|K|^{d/2}·‖μ‖_{H⁻¹(K)}. The φ_λ
//! construction turns a particle configuration into an explicit witness
//! whose objective lower-bounds the distance between the empirical
//! measure and any density-bounded competitor.

use crate::energy::cross_energy;
use crate::error::{Error, Result};
use crate::kernel::{unit_ball_volume, CoulombKernel};
use crate::measures::{csv_err, Grid, GridMeasure, ParticleConfig};
use serde::Serialize;
use std::collections::VecDeque;
use std::path::Path;

/// Weights are rescaled to this ℓ¹ mass before the primal-dual solve;
/// the optimum scales back exactly (positive homogeneity of the norm).
/// Keeps the iteration count flat across input scales.
const WEIGHT_SCALE: f64 = 256.0;

/// Feasibility slack for witness verification.
const WITNESS_SLACK: f64 = 1e-9;

// ── Regions ─────────────────────────────────────────────────────────────

/// A compact node subset K of a grid. Connectivity (through axis
/// neighbors) is required so the restricted H⁻¹(K) solve is irreducible.
#[derive(Debug, Clone)]
pub struct Region {
    grid: Grid,
    mask: Vec<bool>,
    nodes: Vec<usize>,
    boundary: Vec<usize>,
}

impl Region {
    /// Region from a node mask; must be nonempty and connected.
    pub fn new(grid: Grid, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != grid.n_nodes() {
            return Err(Error::GridMismatch(format!(
                "{} mask entries on a {}-node grid",
                mask.len(),
                grid.n_nodes()
            )));
        }
        let nodes: Vec<usize> = (0..mask.len()).filter(|&f| mask[f]).collect();
        if nodes.is_empty() {
            return Err(Error::Domain("empty region".into()));
        }
        // BFS over axis neighbors; a second component is a hard error.
        let mut seen = vec![false; mask.len()];
        let mut queue = VecDeque::from([nodes[0]]);
        seen[nodes[0]] = true;
        let mut reached = 1usize;
        while let Some(f) = queue.pop_front() {
            let idx = grid.unflatten(f);
            for a in 0..grid.dim() {
                for step in [-1i64, 1] {
                    let j = idx[a] as i64 + step;
                    if j < 0 || j >= grid.nodes_per_axis() as i64 {
                        continue;
                    }
                    let nb = (f as i64 + step * grid.stride(a) as i64) as usize;
                    if mask[nb] && !seen[nb] {
                        seen[nb] = true;
                        reached += 1;
                        queue.push_back(nb);
                    }
                }
            }
        }
        if reached != nodes.len() {
            return Err(Error::Domain(format!(
                "region splits into components ({} of {} nodes reachable)",
                reached,
                nodes.len()
            )));
        }
        let boundary = nodes
            .iter()
            .copied()
            .filter(|&f| {
                let idx = grid.unflatten(f);
                (0..grid.dim()).any(|a| {
                    [-1i64, 1].iter().any(|&step| {
                        let j = idx[a] as i64 + step;
                        j < 0
                            || j >= grid.nodes_per_axis() as i64
                            || !mask[(f as i64 + step * grid.stride(a) as i64) as usize]
                    })
                })
            })
            .collect();
        Ok(Self { grid, mask, nodes, boundary })
    }

    /// The whole grid as a region.
    #[must_use]
    pub fn whole(grid: Grid) -> Self {
        let n = grid.n_nodes();
        Self::new(grid, vec![true; n]).expect("full grid is nonempty and connected")
    }

    /// Nodes within `radius` of `center`.
    pub fn ball(grid: Grid, center: &[f64], radius: f64) -> Result<Self> {
        if center.len() != grid.dim() || !(radius > 0.0) {
            return Err(Error::Domain(format!("ball region radius {radius}")));
        }
        let mask = (0..grid.n_nodes())
            .map(|f| {
                let p = grid.node_point(f);
                let r2: f64 =
                    (0..grid.dim()).map(|a| (p[a] - center[a]) * (p[a] - center[a])).sum();
                r2 <= radius * radius
            })
            .collect();
        Self::new(grid, mask)
    }

    /// Nodes inside the axis-aligned box [lo, hi].
    pub fn sub_box(grid: Grid, lo: &[f64], hi: &[f64]) -> Result<Self> {
        if lo.len() != grid.dim() || hi.len() != grid.dim() {
            return Err(Error::GridMismatch("box corner dimension mismatch".into()));
        }
        let mask = (0..grid.n_nodes())
            .map(|f| {
                let p = grid.node_point(f);
                (0..grid.dim()).all(|a| p[a] >= lo[a] && p[a] <= hi[a])
            })
            .collect();
        Self::new(grid, mask)
    }

    #[must_use]
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    #[must_use]
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Member nodes, ascending.
    #[must_use]
    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    /// Member nodes adjacent to the complement or to the grid edge.
    #[must_use]
    pub fn boundary(&self) -> &[usize] {
        &self.boundary
    }

    #[must_use]
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Lebesgue volume carried by the member nodes' cells.
    #[must_use]
    pub fn volume(&self) -> f64 {
        self.nodes.iter().map(|&f| self.grid.cell_volume(f)).sum()
    }
}

// ── Edge graph ──────────────────────────────────────────────────────────

/// Lexicographically positive offsets of {−1,0,1}^d \ {0}: each unordered
/// neighbor pair (axis or diagonal) appears exactly once.
fn moore_offsets(d: usize) -> Vec<[i64; 3]> {
    let mut offs = Vec::new();
    for code in 0..3usize.pow(d as u32) {
        let mut o = [0i64; 3];
        let mut rest = code;
        for a in (0..d).rev() {
            o[a] = (rest % 3) as i64 - 1;
            rest /= 3;
        }
        if o[..d].iter().find(|&&c| c != 0).is_some_and(|&c| c > 0) {
            offs.push(o);
        }
    }
    offs
}

/// Constraint graph of the BL dual: Moore edges |f_a − f_b| ≤ ℓ_e inside
/// the active set, plus anchors |f_a| ≤ ℓ for edges leaving a region
/// (the zero extension of f outside K).
struct EdgeGraph {
    active: Vec<u32>,
    ea: Vec<u32>,
    eb: Vec<u32>,
    ell: Vec<f64>,
    av: Vec<u32>,
    aell: Vec<f64>,
    /// Per-node primal steps 1/(1 + degree).
    tau: Vec<f64>,
}

fn build_edges(grid: &Grid, mask: Option<&[bool]>) -> EdgeGraph {
    let d = grid.dim();
    let m = grid.nodes_per_axis() as i64;
    let h = grid.spacing(0);
    let n = grid.n_nodes();
    let in_mask = |f: usize| mask.is_none_or(|mk| mk[f]);
    let active: Vec<u32> =
        (0..n).filter(|&f| in_mask(f)).map(|f| f as u32).collect();
    let (mut ea, mut eb, mut ell) = (Vec::new(), Vec::new(), Vec::new());
    let (mut av, mut aell) = (Vec::new(), Vec::new());
    for o in moore_offsets(d) {
        let len = h * (o[..d].iter().map(|&c| (c * c) as f64).sum::<f64>()).sqrt();
        for f in 0..n {
            let idx = grid.unflatten(f);
            let mut nb = f as i64;
            let mut inside = true;
            for a in 0..d {
                let j = idx[a] as i64 + o[a];
                if j < 0 || j >= m {
                    inside = false;
                    break;
                }
                nb += o[a] * grid.stride(a) as i64;
            }
            if !inside {
                continue;
            }
            let nb = nb as usize;
            match (in_mask(f), in_mask(nb)) {
                (true, true) => {
                    ea.push(f as u32);
                    eb.push(nb as u32);
                    ell.push(len);
                }
                (true, false) => {
                    av.push(f as u32);
                    aell.push(len);
                }
                (false, true) => {
                    av.push(nb as u32);
                    aell.push(len);
                }
                (false, false) => {}
            }
        }
    }
    let mut deg = vec![0.0f64; n];
    for (&a, &b) in ea.iter().zip(&eb) {
        deg[a as usize] += 1.0;
        deg[b as usize] += 1.0;
    }
    for &a in &av {
        deg[a as usize] += 1.0;
    }
    let tau = deg.iter().map(|&dg| 1.0 / (1.0 + dg)).collect();
    EdgeGraph { active, ea, eb, ell, av, aell, tau }
}

impl EdgeGraph {
    /// Clamp to the box (and anchor bounds), take the graph McShane
    /// envelope (Bellman relaxation to the exact fixed point), then scale
    /// down by the worst residual violation ratio. The result is feasible
    /// for every constraint, so its objective is a true lower bound.
    fn feasibilize(&self, fc: &mut [f64]) {
        for &i in &self.active {
            fc[i as usize] = fc[i as usize].clamp(-1.0, 1.0);
        }
        for _ in 0..500 {
            let mut changed = false;
            for e in 0..self.ea.len() {
                let (a, b) = (self.ea[e] as usize, self.eb[e] as usize);
                let la = fc[b] + self.ell[e];
                if la < fc[a] {
                    fc[a] = la;
                    changed = true;
                }
                let lb = fc[a] + self.ell[e];
                if lb < fc[b] {
                    fc[b] = lb;
                    changed = true;
                }
            }
            for t in 0..self.av.len() {
                let a = self.av[t] as usize;
                if self.aell[t] < fc[a] {
                    fc[a] = self.aell[t];
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        let mut rho = 1.0f64;
        for e in 0..self.ea.len() {
            rho = rho.max((fc[self.ea[e] as usize] - fc[self.eb[e] as usize]).abs() / self.ell[e]);
        }
        for t in 0..self.av.len() {
            rho = rho.max(fc[self.av[t] as usize].abs() / self.aell[t]);
        }
        if rho > 1.0 {
            for &i in &self.active {
                fc[i as usize] /= rho;
            }
        }
    }
}

// ── Dual witnesses ──────────────────────────────────────────────────────

/// A feasible test function for the BL dual: ‖f‖_∞ ≤ 1 and edge-Lipschitz
/// on the Moore graph. Its objective ∫f dμ certifies a lower bound on the
/// norm independently of how the solver produced it.
#[derive(Debug, Clone)]
pub struct DualWitness {
    f: Vec<f64>,
    objective: f64,
    active_bound: usize,
    active_edges: usize,
    certificate_gap: f64,
}

impl DualWitness {
    /// Nodal values of the test function (full grid, row-major).
    #[must_use]
    pub fn values(&self) -> &[f64] {
        &self.f
    }

    #[must_use]
    pub fn objective(&self) -> f64 {
        self.objective
    }

    /// Nodes where the sup-norm constraint is active (within 1e-7).
    #[must_use]
    pub fn active_bound(&self) -> usize {
        self.active_bound
    }

    /// Edges where the Lipschitz constraint is active (within 1e-7).
    #[must_use]
    pub fn active_edges(&self) -> usize {
        self.active_edges
    }

    /// Certified distance between the reported value and the dual upper
    /// bound at the time the solver stopped.
    #[must_use]
    pub fn certificate_gap(&self) -> f64 {
        self.certificate_gap
    }

    /// Constraint sweep independent of the solver: |f| ≤ 1 + 1e-9 at every
    /// node and |f_a − f_b| ≤ ℓ_e + 1e-9 on every Moore edge.
    pub fn verify_feasible(&self, grid: &Grid) -> Result<()> {
        if self.f.len() != grid.n_nodes() {
            return Err(Error::GridMismatch("witness length differs from grid".into()));
        }
        if let Some(i) = self.f.iter().position(|v| !(v.abs() <= 1.0 + WITNESS_SLACK)) {
            return Err(Error::Domain(format!(
                "witness exceeds sup bound at node {i}: {}",
                self.f[i]
            )));
        }
        let g = build_edges(grid, None);
        for e in 0..g.ea.len() {
            let (a, b) = (g.ea[e] as usize, g.eb[e] as usize);
            if !((self.f[a] - self.f[b]).abs() <= g.ell[e] + WITNESS_SLACK) {
                return Err(Error::Domain(format!(
                    "witness breaks the Lipschitz bound on edge {a}–{b}: |Δ| = {}",
                    (self.f[a] - self.f[b]).abs()
                )));
            }
        }
        Ok(())
    }

    /// CSV export: node coordinates and witness value per row.
    pub fn write_csv(&self, grid: &Grid, path: &Path) -> Result<()> {
        if self.f.len() != grid.n_nodes() {
            return Err(Error::GridMismatch("witness length differs from grid".into()));
        }
        let mut wtr = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header: Vec<String> = (0..grid.dim()).map(|a| format!("x{a}")).collect();
        header.push("f".into());
        wtr.write_record(&header).map_err(csv_err)?;
        for flat in 0..grid.n_nodes() {
            let p = grid.node_point(flat);
            let mut row: Vec<String> =
                (0..grid.dim()).map(|a| format!("{:.17e}", p[a])).collect();
            row.push(format!("{:.17e}", self.f[flat]));
            wtr.write_record(&row).map_err(csv_err)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

// ── Bounded-Lipschitz norm ──────────────────────────────────────────────

/// Stopping controls for the BL dual solve.
#[derive(Debug, Clone, Copy)]
pub struct BlOptions {
    /// Duality-gap target, relative to max(1, value).
    pub tol: f64,
    pub max_iters: usize,
    /// Iterations between witness/certificate probes.
    pub probe_every: usize,
    /// Plateau stop: two successive probe objectives moving less than
    /// this fraction of max(1, value) ends the solve early. The reported
    /// value stays a certified lower bound; only the gap stays open.
    /// Zero disables the rule.
    pub stab_tol: f64,
}

impl Default for BlOptions {
    fn default() -> Self {
        Self { tol: 1e-5, max_iters: 60_000, probe_every: 500, stab_tol: 2e-3 }
    }
}

/// ‖μ‖_BL on the grid-edge relaxation. Returns the certified value (a
/// feasible witness objective: a true lower bound of the discrete LP
/// optimum) and the witness itself.
pub fn bl_norm(mu: &GridMeasure) -> Result<(f64, DualWitness)> {
    bl_solve(mu, None, &[], &BlOptions::default())
}

/// [`bl_norm`] with candidate witnesses injected before the iteration:
/// each is made feasible and competes with the solver's own witness, so
/// the reported value is at least the best candidate objective.
pub fn bl_norm_with(
    mu: &GridMeasure,
    candidates: &[Vec<f64>],
    opts: &BlOptions,
) -> Result<(f64, DualWitness)> {
    bl_solve(mu, None, candidates, opts)
}

/// BL norm against test functions vanishing outside the region: the sup
/// runs over f with |f| ≤ 1, edge-Lipschitz, f = 0 off K (so edges
/// leaving K anchor |f| ≤ ℓ at the boundary). Values are monotone: the
/// restricted norm never exceeds the whole-grid norm.
pub fn bl_norm_on_region(mu: &GridMeasure, region: &Region) -> Result<(f64, DualWitness)> {
    if region.grid() != mu.grid() {
        return Err(Error::GridMismatch("region and measure grids differ".into()));
    }
    bl_solve(mu, Some(region), &[], &BlOptions::default())
}

/// Diagonally-preconditioned primal-dual iteration on the saddle form of
/// the dual LP, with per-row steps σ = 1 (sup rows and anchors) and 1/2
/// (difference rows) and per-node steps τ = 1/(1 + degree). Probes
/// extract a feasible witness (lower bound) and a dual certificate
/// (upper bound); iteration stops on gap, witness stabilization, or cap.
fn bl_solve(
    mu: &GridMeasure,
    region: Option<&Region>,
    candidates: &[Vec<f64>],
    opts: &BlOptions,
) -> Result<(f64, DualWitness)> {
    let grid = mu.grid();
    if !grid.is_isotropic() {
        return Err(Error::GridMismatch("BL edge lengths need an isotropic grid".into()));
    }
    if !(opts.tol > 0.0) || opts.probe_every == 0 || !(opts.stab_tol >= 0.0) {
        return Err(Error::Precondition(format!(
            "degenerate solve options: tol {}, probe every {}, plateau {}",
            opts.tol, opts.probe_every, opts.stab_tol
        )));
    }
    let n = grid.n_nodes();
    // Off-region weights are invisible to vanishing test functions.
    let w: Vec<f64> = match region {
        None => mu.weights().to_vec(),
        Some(r) => (0..n).map(|f| if r.mask()[f] { mu.weights()[f] } else { 0.0 }).collect(),
    };
    let l1: f64 = w.iter().map(|x| x.abs()).sum();
    let g = build_edges(grid, region.map(Region::mask));
    if l1 == 0.0 {
        let wit = finish_witness(vec![0.0; n], 0.0, &g, 0.0);
        return Ok((0.0, wit));
    }
    let scale = WEIGHT_SCALE / l1;
    let ws: Vec<f64> = w.iter().map(|x| x * scale).collect();

    let mut best_lo = f64::NEG_INFINITY;
    let mut best_wit = vec![0.0; n];
    for cand in candidates {
        if cand.len() != n {
            return Err(Error::GridMismatch("candidate witness length differs from grid".into()));
        }
        let mut fc = match region {
            None => cand.clone(),
            Some(r) => (0..n).map(|f| if r.mask()[f] { cand[f] } else { 0.0 }).collect(),
        };
        g.feasibilize(&mut fc);
        let lo: f64 = fc.iter().zip(&w).map(|(f, x)| f * x).sum();
        if lo > best_lo {
            best_lo = lo;
            best_wit = fc;
        }
    }

    let mut f = if best_lo.is_finite() { best_wit.clone() } else { vec![0.0; n] };
    let mut fb = f.clone();
    let mut y1 = vec![0.0f64; n];
    let mut y2 = vec![0.0f64; g.ea.len()];
    let mut ya = vec![0.0f64; g.av.len()];
    let mut aty = vec![0.0f64; n];
    let mut best_hi = f64::INFINITY;
    let mut recent: VecDeque<f64> = VecDeque::new();

    for k in 0..opts.max_iters {
        for &iu in &g.active {
            let i = iu as usize;
            let v = y1[i] + fb[i];
            y1[i] = v - v.clamp(-1.0, 1.0);
            aty[i] = y1[i];
        }
        for e in 0..g.ea.len() {
            let (a, b) = (g.ea[e] as usize, g.eb[e] as usize);
            let v = y2[e] + 0.5 * (fb[a] - fb[b]);
            y2[e] = v - 0.5 * (2.0 * v).clamp(-g.ell[e], g.ell[e]);
            aty[a] += y2[e];
            aty[b] -= y2[e];
        }
        for t in 0..g.av.len() {
            let a = g.av[t] as usize;
            let v = ya[t] + fb[a];
            ya[t] = v - v.clamp(-g.aell[t], g.aell[t]);
            aty[a] += ya[t];
        }
        for &iu in &g.active {
            let i = iu as usize;
            let next = f[i] - g.tau[i] * (aty[i] - ws[i]);
            fb[i] = 2.0 * next - f[i];
            f[i] = next;
        }

        if (k + 1) % opts.probe_every == 0 {
            let mut fc = f.clone();
            g.feasibilize(&mut fc);
            let lo: f64 = fc.iter().zip(&w).map(|(fv, x)| fv * x).sum();
            if lo > best_lo {
                best_lo = lo;
                best_wit = fc;
            }
            // Any dual pair (y2, ya) certifies: the sup-row multipliers
            // absorb the residual w − Dᵀy2 − Aᵀya at unit cost.
            let mut hi = 0.0;
            let mut resid = vec![0.0f64; n];
            for e in 0..g.ea.len() {
                resid[g.ea[e] as usize] += y2[e];
                resid[g.eb[e] as usize] -= y2[e];
                hi += g.ell[e] * y2[e].abs();
            }
            for t in 0..g.av.len() {
                resid[g.av[t] as usize] += ya[t];
                hi += g.aell[t] * ya[t].abs();
            }
            for &iu in &g.active {
                let i = iu as usize;
                hi += (ws[i] - resid[i]).abs();
            }
            best_hi = best_hi.min(hi / scale);
            let scale_ref = 1.0f64.max(best_lo.abs());
            if best_hi - best_lo <= opts.tol * scale_ref {
                break;
            }
            if opts.stab_tol > 0.0 {
                recent.push_back(lo);
                if recent.len() > 3 {
                    recent.pop_front();
                }
                if recent.len() == 3 {
                    let stable = recent
                        .iter()
                        .zip(recent.iter().skip(1))
                        .all(|(a, b)| (a - b).abs() <= opts.stab_tol * scale_ref);
                    if stable {
                        break;
                    }
                }
            }
        }
    }
    let gap = if best_hi.is_finite() { (best_hi - best_lo).max(0.0) } else { f64::INFINITY };
    let wit = finish_witness(best_wit, best_lo, &g, gap);
    debug_assert!(
        wit.verify_feasible(grid).is_ok(),
        "solver produced an infeasible witness"
    );
    Ok((best_lo, wit))
}

fn finish_witness(f: Vec<f64>, objective: f64, g: &EdgeGraph, gap: f64) -> DualWitness {
    let active_bound =
        g.active.iter().filter(|&&i| f[i as usize].abs() >= 1.0 - 1e-7).count();
    let active_edges = (0..g.ea.len())
        .filter(|&e| {
            (f[g.ea[e] as usize] - f[g.eb[e] as usize]).abs() >= g.ell[e] * (1.0 - 1e-7)
        })
        .count();
    DualWitness { f, objective, active_bound, active_edges, certificate_gap: gap }
}

// ── Coulomb-energy (H⁻¹) norm ───────────────────────────────────────────

/// ‖μ‖_{H⁻¹} = √G(μ,μ) via the regularized grid interaction. For d = 2
/// the identity needs a mean-zero measure (the log kernel has no decay);
/// d ≥ 3 accepts any finite signed measure.
pub fn h1_dual_norm(mu: &GridMeasure, kernel: &CoulombKernel) -> Result<f64> {
    let d = mu.grid().dim();
    if kernel.dim() != d {
        return Err(Error::GridMismatch("kernel and measure dimensions differ".into()));
    }
    if d == 2 && mu.total_mass().abs() > 1e-10 {
        return Err(Error::Precondition(format!(
            "the d = 2 energy norm needs a mean-zero measure, got total mass {:e}",
            mu.total_mass()
        )));
    }
    let e = cross_energy(mu, mu, kernel)?;
    if e < 0.0 {
        let l1: f64 = mu.weights().iter().map(|w| w.abs()).sum();
        let diag = kernel.smeared_g_radial(0.5 * mu.grid().spacing(0), 0.0);
        if e < -1e-9 * l1 * l1 * (1.0 + diag.abs()) {
            return Err(Error::Domain(format!("energy form lost positivity: G(μ,μ) = {e}")));
        }
        return Ok(0.0);
    }
    Ok(e.sqrt())
}

// ── Restricted H⁻¹(K) norm ──────────────────────────────────────────────

/// ‖μ‖_{H⁻¹(K)} through the zero-flux Helmholtz problem: solve
/// (−Δ_h + I)u = μ on K with natural boundary (edges leaving K are
/// dropped), then the attained dual optimum is √⟨u, μ⟩. Discrete
/// operator: h^{d−2}·(graph Laplacian) + h^d·I against node masses.
/// Weights outside K are ignored (reported on stderr).
pub fn h1_restricted_norm(mu: &GridMeasure, region: &Region) -> Result<f64> {
    let grid = mu.grid();
    if region.grid() != grid {
        return Err(Error::GridMismatch("region and measure grids differ".into()));
    }
    if !grid.is_isotropic() {
        return Err(Error::GridMismatch("Helmholtz stencil needs an isotropic grid".into()));
    }
    let d = grid.dim();
    let h = grid.spacing(0);
    let stiff = h.powi(d as i32 - 2);
    let massw = h.powi(d as i32);
    let outside: f64 = (0..grid.n_nodes())
        .filter(|&f| !region.mask()[f])
        .map(|f| mu.weights()[f].abs())
        .sum();
    if outside > 1e-15 {
        eprintln!("h1_restricted_norm: ignoring mass {outside:e} outside the region");
    }

    let nk = region.n_nodes();
    let mut local = vec![u32::MAX; grid.n_nodes()];
    for (k, &f) in region.nodes().iter().enumerate() {
        local[f] = k as u32;
    }
    // Axis adjacency in local indices; u32::MAX marks a dropped edge.
    let mut nbrs = vec![u32::MAX; nk * 2 * d];
    for (k, &f) in region.nodes().iter().enumerate() {
        let idx = grid.unflatten(f);
        for a in 0..d {
            for (s, step) in [-1i64, 1].into_iter().enumerate() {
                let j = idx[a] as i64 + step;
                if j < 0 || j >= grid.nodes_per_axis() as i64 {
                    continue;
                }
                let nb = (f as i64 + step * grid.stride(a) as i64) as usize;
                if local[nb] != u32::MAX {
                    nbrs[k * 2 * d + 2 * a + s] = local[nb];
                }
            }
        }
    }
    let apply = |x: &[f64], out: &mut [f64]| {
        for k in 0..nk {
            let mut acc = massw * x[k];
            for t in 0..2 * d {
                let nb = nbrs[k * 2 * d + t];
                if nb != u32::MAX {
                    acc += stiff * (x[k] - x[nb as usize]);
                }
            }
            out[k] = acc;
        }
    };

    let b: Vec<f64> = region.nodes().iter().map(|&f| mu.weights()[f]).collect();
    let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if bnorm == 0.0 {
        return Ok(0.0);
    }
    // Conjugate gradients; the operator is symmetric positive definite
    // (mass term h^d I), so breakdown signals a bug, not bad data.
    let mut u = vec![0.0f64; nk];
    let mut r = b.clone();
    let mut p = r.clone();
    let mut ap = vec![0.0f64; nk];
    let mut rs: f64 = r.iter().map(|v| v * v).sum();
    let tol2 = (1e-13 * bnorm) * (1e-13 * bnorm);
    let max_iter = 20 * nk + 200;
    let mut converged = rs <= tol2;
    for _ in 0..max_iter {
        if rs <= tol2 {
            converged = true;
            break;
        }
        apply(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b2)| a * b2).sum();
        if !(pap > 0.0) {
            return Err(Error::Domain(format!("Helmholtz system lost definiteness: pᵀAp = {pap}")));
        }
        let alpha = rs / pap;
        for k in 0..nk {
            u[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        let rs_next: f64 = r.iter().map(|v| v * v).sum();
        let beta = rs_next / rs;
        rs = rs_next;
        for k in 0..nk {
            p[k] = r[k] + beta * p[k];
        }
    }
    if !converged && rs > tol2 {
        return Err(Error::NonConvergence {
            iterations: max_iter,
            residual: rs.sqrt(),
            history: vec![rs.sqrt()],
        });
    }
    let val: f64 = u.iter().zip(&b).map(|(a, b2)| a * b2).sum();
    Ok(val.max(0.0).sqrt())
}

// ── Comparison inequality ───────────────────────────────────────────────

/// Both sides of ‖μ‖_BL ≤ √(d+1)·|K|^{d/2}·‖μ‖_{H⁻¹(K)} and their ratio.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct NormComparison {
    pub bl: f64,
    pub h1k: f64,
    /// √(d+1)·|K|^{d/2}.
    pub constant: f64,
    /// constant · h1k — the right-hand side.
    pub bound: f64,
    /// bl / bound; ≤ 1 when the inequality holds.
    pub ratio: f64,
}

pub fn check_bl_vs_h1k(mu: &GridMeasure, region: &Region) -> Result<NormComparison> {
    let d = mu.grid().dim() as f64;
    let (bl, _) = bl_norm(mu)?;
    let h1k = h1_restricted_norm(mu, region)?;
    let constant = (d + 1.0).sqrt() * region.volume().powf(d / 2.0);
    let bound = constant * h1k;
    let ratio = if bound > 0.0 {
        bl / bound
    } else if bl == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(NormComparison { bl, h1k, constant, bound, ratio })
}

// ── φ_λ lower-bound construction ────────────────────────────────────────

/// The guaranteed empirical-distance floor for configurations against any
/// measure of density ≤ M: with λ = (2·M·k_d)^{−1/d} (k_d = unit-ball
/// volume), every such measure stays at BL distance ≥ λ/(2N^{1/d}) from
/// the empirical measure of N points. Returns (bound, λ).
pub fn phi_lambda_bound(p: &ParticleConfig, m_density: f64) -> Result<(f64, f64)> {
    if !(m_density > 0.0) || !m_density.is_finite() {
        return Err(Error::Domain(format!("density bound M = {m_density} must be positive")));
    }
    let d = p.dim() as f64;
    let lambda = (2.0 * m_density * unit_ball_volume(p.dim())).powf(-1.0 / d);
    let bound = lambda / (2.0 * (p.n() as f64).powf(1.0 / d));
    Ok((bound, lambda))
}

/// Nodal field of φ_λ(x) = (λ/N^{1/d} − dist(x, X̄_N))₊ — 1-Lipschitz,
/// bounded by λ/N^{1/d}, usable directly as a BL dual witness candidate.
pub fn phi_lambda_field(
    p: &ParticleConfig,
    m_density: f64,
    grid: &Grid,
) -> Result<Vec<f64>> {
    if grid.dim() != p.dim() {
        return Err(Error::GridMismatch("configuration and grid dimensions differ".into()));
    }
    let (_, lambda) = phi_lambda_bound(p, m_density)?;
    let t = lambda / (p.n() as f64).powf(1.0 / p.dim() as f64);
    let d = grid.dim();
    Ok((0..grid.n_nodes())
        .map(|f| {
            let node = grid.node_point(f);
            let dist = (0..p.n())
                .map(|i| {
                    let x = p.point(i);
                    (0..d).map(|a| (node[a] - x[a]) * (node[a] - x[a])).sum::<f64>().sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            (t - dist).max(0.0)
        })
        .collect())
}

// ── Tests ───────────────────────────────────────────────────────────────
