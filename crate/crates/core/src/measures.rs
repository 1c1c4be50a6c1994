//! Gridded and atomic measures, particle binning, mollification, and
//! discrete Coulomb potentials h^μ = g ∗ μ.
//!
//! A [`Grid`] is a uniform box grid with m nodes per axis; a
//! [`GridMeasure`] stores one weight per node, where weight = density ×
//! cell volume and cell volumes follow the trapezoid rule (half cells on
//! box faces), so nodal weights sum to the measure's total mass.
//!
//! Binning ([`bin_to_grid`]) and nodal interpolation ([`interp_at`]) use
//! the same multilinear stencil and are exact adjoints:
//! Σ_i f(x_i)/N = ⟨f, bin(X)⟩ holds to rounding. The energy module's
//! exact Hamiltonian decomposition depends on this pairing.
//!
//! Potentials are assembled from a translation-invariant nodal kernel
//! matrix: off-diagonal entries are exact kernel values g(x_a − x_b) and
//! the self-node entry is the half-cell smeared value (g ∗ λ_{h/2})(0),
//! keeping the discrete quadratic form positive semidefinite. The matrix
//! is applied either directly (small grids) or as a circulant embedding
//! of size 2m per axis via the FFT; both backends agree to 1e-8 relative.

use crate::error::{Error, Result};
use crate::kernel::CoulombKernel;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

/// Hard cap on grid size: 2^26 nodes (≈ 0.5 GiB of weights).
pub const NODE_CAP: usize = 1 << 26;

/// Node count below which potential fields use direct summation.
const DIRECT_SUM_CAP: usize = 1024;

// ── Grid ────────────────────────────────────────────────────────────────

/// Uniform box grid in d ∈ {2, 3} with `m` nodes per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dim: usize,
    lower: Vec<f64>,
    upper: Vec<f64>,
    m: usize,
}

impl Grid {
    /// New grid over the box Π [lower_a, upper_a]; requires d ∈ {2, 3},
    /// m ≥ 2, positive extents, and m^d within the node cap.
    pub fn new(dim: usize, lower: Vec<f64>, upper: Vec<f64>, m: usize) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::Domain(format!("grid dimension {dim} not in {{2, 3}}")));
        }
        if lower.len() != dim || upper.len() != dim {
            return Err(Error::Domain("grid bounds do not match dimension".into()));
        }
        if m < 2 {
            return Err(Error::Domain(format!("grid needs m ≥ 2 nodes per axis, got {m}")));
        }
        if !lower.iter().zip(&upper).all(|(l, u)| l.is_finite() && u.is_finite() && u > l) {
            return Err(Error::Domain("grid box has empty or non-finite extent".into()));
        }
        let nodes = m.checked_pow(dim as u32).filter(|&n| n <= NODE_CAP);
        if nodes.is_none() {
            return Err(Error::Domain(format!("grid {m}^{dim} exceeds the {NODE_CAP}-node cap")));
        }
        Ok(Self { dim, lower, upper, m })
    }

    /// Centered cube [−l, l]^d.
    pub fn centered_cube(dim: usize, l: f64, m: usize) -> Result<Self> {
        if !(l > 0.0) || !l.is_finite() {
            return Err(Error::Domain(format!("cube half-side {l} not positive")));
        }
        Self::new(dim, vec![-l; dim], vec![l; dim], m)
    }

    #[must_use]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[must_use]
    pub fn nodes_per_axis(&self) -> usize {
        self.m
    }

    #[must_use]
    pub fn n_nodes(&self) -> usize {
        self.m.pow(self.dim as u32)
    }

    #[must_use]
    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    #[must_use]
    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    /// Node spacing along `axis`.
    #[must_use]
    pub fn spacing(&self, axis: usize) -> f64 {
        (self.upper[axis] - self.lower[axis]) / (self.m - 1) as f64
    }

    /// True when all axes share one spacing (to 1e-9 relative).
    #[must_use]
    pub fn is_isotropic(&self) -> bool {
        let h0 = self.spacing(0);
        (1..self.dim).all(|a| (self.spacing(a) - h0).abs() <= 1e-9 * h0)
    }

    /// Row-major stride of `axis`.
    #[must_use]
    pub fn stride(&self, axis: usize) -> usize {
        self.m.pow((self.dim - 1 - axis) as u32)
    }

    /// Multi-index of a flat node index.
    #[must_use]
    pub fn unflatten(&self, flat: usize) -> [usize; 3] {
        let mut idx = [0usize; 3];
        let mut rest = flat;
        for a in (0..self.dim).rev() {
            idx[a] = rest % self.m;
            rest /= self.m;
        }
        idx
    }

    /// Coordinates of a flat node index.
    #[must_use]
    pub fn node_point(&self, flat: usize) -> [f64; 3] {
        let idx = self.unflatten(flat);
        let mut p = [0.0; 3];
        for a in 0..self.dim {
            p[a] = self.lower[a] + idx[a] as f64 * self.spacing(a);
        }
        p
    }

    /// Trapezoid cell volume of a node: Π_a h_a, halved per boundary face.
    /// Cell volumes sum exactly to the box volume.
    #[must_use]
    pub fn cell_volume(&self, flat: usize) -> f64 {
        let idx = self.unflatten(flat);
        let mut v = 1.0;
        for a in 0..self.dim {
            let h = self.spacing(a);
            v *= if idx[a] == 0 || idx[a] == self.m - 1 { 0.5 * h } else { h };
        }
        v
    }

    /// True when `p` lies inside the closed box.
    #[must_use]
    pub fn contains(&self, p: &[f64]) -> bool {
        p.len() == self.dim
            && (0..self.dim).all(|a| p[a] >= self.lower[a] && p[a] <= self.upper[a])
    }

    /// Multilinear stencil of a point: up to 2^d (node, weight) pairs with
    /// weights summing to 1. Shared by binning and interpolation so that
    /// the two are exact adjoints.
    pub(crate) fn stencil(&self, p: &[f64]) -> ([usize; 8], [f64; 8], usize) {
        debug_assert!(self.contains(p), "stencil point outside box");
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..self.dim {
            let f = (p[a] - self.lower[a]) / self.spacing(a);
            let i0 = (f.floor() as usize).min(self.m - 2);
            base[a] = i0;
            frac[a] = (f - i0 as f64).clamp(0.0, 1.0);
        }
        let mut nodes = [0usize; 8];
        let mut weights = [0.0f64; 8];
        let corners = 1usize << self.dim;
        for c in 0..corners {
            let mut flat = 0;
            let mut w = 1.0;
            for a in 0..self.dim {
                let hi = (c >> a) & 1 == 1;
                flat += (base[a] + hi as usize) * self.stride(a);
                w *= if hi { frac[a] } else { 1.0 - frac[a] };
            }
            nodes[c] = flat;
            weights[c] = w;
        }
        (nodes, weights, corners)
    }
}

// ── Grid measures ───────────────────────────────────────────────────────

/// Whether a measure is a signed measure or a probability measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeasureKind {
    Signed,
    Probability,
}

/// A measure on a [`Grid`]: one weight (mass) per node, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMeasure {
    grid: Grid,
    weights: Vec<f64>,
    kind: MeasureKind,
}

impl GridMeasure {
    /// New measure; weights must be finite, match the grid, and — for
    /// probability measures — be nonnegative with total mass 1 ± 1e-12.
    pub fn new(grid: Grid, weights: Vec<f64>, kind: MeasureKind) -> Result<Self> {
        if weights.len() != grid.n_nodes() {
            return Err(Error::GridMismatch(format!(
                "{} weights on a {}-node grid",
                weights.len(),
                grid.n_nodes()
            )));
        }
        if !weights.iter().all(|w| w.is_finite()) {
            return Err(Error::Domain("non-finite weight".into()));
        }
        if kind == MeasureKind::Probability {
            if let Some(w) = weights.iter().find(|&&w| w < -1e-15) {
                return Err(Error::Domain(format!("negative weight {w} in probability measure")));
            }
            let mass: f64 = weights.iter().sum();
            if (mass - 1.0).abs() > 1e-12 {
                return Err(Error::Domain(format!("probability measure with mass {mass}")));
            }
        }
        Ok(Self { grid, weights, kind })
    }

    #[must_use]
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    #[must_use]
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[must_use]
    pub fn kind(&self) -> MeasureKind {
        self.kind
    }

    #[must_use]
    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Density at a node: weight / cell volume.
    #[must_use]
    pub fn density(&self, flat: usize) -> f64 {
        self.weights[flat] / self.grid.cell_volume(flat)
    }

    /// Signed difference self − other (same grid).
    pub fn difference(&self, other: &GridMeasure) -> Result<GridMeasure> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch("difference of measures on different grids".into()));
        }
        let weights = self.weights.iter().zip(&other.weights).map(|(a, b)| a - b).collect();
        GridMeasure::new(self.grid.clone(), weights, MeasureKind::Signed)
    }

    /// Inverse-CDF sampler for this (probability) measure.
    pub fn sampler(&self) -> Result<GridSampler> {
        GridSampler::new(self)
    }

    // ── Serialization ──

    /// Binary layout: dim (u64), m per axis (u64 each), then per-axis
    /// lower, upper bounds (f64), then weights row-major (f64); all
    /// little-endian.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(std::fs::File::create(path)?);
        out.write_all(&(self.grid.dim as u64).to_le_bytes())?;
        for _ in 0..self.grid.dim {
            out.write_all(&(self.grid.m as u64).to_le_bytes())?;
        }
        for a in 0..self.grid.dim {
            out.write_all(&self.grid.lower[a].to_le_bytes())?;
            out.write_all(&self.grid.upper[a].to_le_bytes())?;
        }
        for w in &self.weights {
            out.write_all(&w.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads the binary layout of [`write_binary`]. The kind is inferred:
    /// nonnegative weights of total mass 1 ± 1e-12 load as a probability
    /// measure, anything else as signed.
    pub fn read_binary(path: &Path) -> Result<GridMeasure> {
        let mut input = BufReader::new(std::fs::File::open(path)?);
        let mut u64buf = [0u8; 8];
        input.read_exact(&mut u64buf)?;
        let dim = u64::from_le_bytes(u64buf) as usize;
        if dim != 2 && dim != 3 {
            return Err(Error::Parse(format!("measure file with dimension {dim}")));
        }
        let mut m = 0usize;
        for a in 0..dim {
            input.read_exact(&mut u64buf)?;
            let ma = u64::from_le_bytes(u64buf) as usize;
            if a == 0 {
                m = ma;
            } else if ma != m {
                return Err(Error::Parse("anisotropic node counts unsupported".into()));
            }
        }
        let mut lower = vec![0.0; dim];
        let mut upper = vec![0.0; dim];
        for a in 0..dim {
            input.read_exact(&mut u64buf)?;
            lower[a] = f64::from_le_bytes(u64buf);
            input.read_exact(&mut u64buf)?;
            upper[a] = f64::from_le_bytes(u64buf);
        }
        let grid = Grid::new(dim, lower, upper, m)?;
        let mut weights = vec![0.0; grid.n_nodes()];
        for w in &mut weights {
            input.read_exact(&mut u64buf)?;
            *w = f64::from_le_bytes(u64buf);
        }
        let probability = weights.iter().all(|&w| w >= -1e-15)
            && (weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12;
        let kind = if probability { MeasureKind::Probability } else { MeasureKind::Signed };
        GridMeasure::new(grid, weights, kind)
    }

    /// CSV interchange: one row per node, columns x0,..,x{d−1},weight.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header: Vec<String> = (0..self.grid.dim).map(|a| format!("x{a}")).collect();
        header.push("weight".into());
        wtr.write_record(&header).map_err(csv_err)?;
        for flat in 0..self.grid.n_nodes() {
            let p = self.grid.node_point(flat);
            let mut row: Vec<String> =
                (0..self.grid.dim).map(|a| format!("{:.17e}", p[a])).collect();
            row.push(format!("{:.17e}", self.weights[flat]));
            wtr.write_record(&row).map_err(csv_err)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Parse(format!("csv: {e}"))
}

/// Inverse-CDF sampler over a probability [`GridMeasure`], reading the
/// measure as piecewise-constant on trapezoid cells.
///
/// A single uniform inverted through the row-major cumulative weights is
/// exactly the chain of per-axis conditional-marginal inverse-CDF draws
/// (lexicographic order factors the CDF); the node draw is followed by a
/// uniform jitter over the node's cell.
#[derive(Debug, Clone)]
pub struct GridSampler {
    grid: Grid,
    cdf: Vec<f64>,
}

impl GridSampler {
    fn new(mu: &GridMeasure) -> Result<Self> {
        if mu.kind != MeasureKind::Probability {
            return Err(Error::Precondition("sampling requires a probability measure".into()));
        }
        let mut cdf = Vec::with_capacity(mu.weights.len());
        let mut acc = 0.0;
        for w in &mu.weights {
            acc += w.max(0.0);
            cdf.push(acc);
        }
        let total = acc;
        if !(total > 0.0) {
            return Err(Error::Domain("measure with zero mass".into()));
        }
        for c in &mut cdf {
            *c /= total;
        }
        Ok(Self { grid: mu.grid.clone(), cdf })
    }

    /// Draws one point.
    pub fn sample(&self, rng: &mut impl rand::Rng) -> Vec<f64> {
        let u: f64 = rng.random();
        let node = self.cdf.partition_point(|&c| c < u).min(self.cdf.len() - 1);
        let center = self.grid.node_point(node);
        (0..self.grid.dim())
            .map(|a| {
                let h = self.grid.spacing(a);
                let lo = (center[a] - 0.5 * h).max(self.grid.lower()[a]);
                let hi = (center[a] + 0.5 * h).min(self.grid.upper()[a]);
                rng.random_range(lo..hi)
            })
            .collect()
    }
}

// ── Particle configurations ─────────────────────────────────────────────

/// N points in R^d; the atomic measure emp_N = (1/N) Σ δ_{x_i}.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleConfig {
    dim: usize,
    points: Vec<f64>, // flat, N × dim row-major
}

impl ParticleConfig {
    /// New configuration from flat coordinates (N × dim row-major).
    pub fn new(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Domain(format!("particle dimension {dim} < 2")));
        }
        if points.is_empty() || points.len() % dim != 0 {
            return Err(Error::Domain(format!(
                "{} coordinates do not form points in R^{dim}",
                points.len()
            )));
        }
        if !points.iter().all(|c| c.is_finite()) {
            return Err(Error::Domain("non-finite particle coordinate".into()));
        }
        Ok(Self { dim, points })
    }

    #[must_use]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[must_use]
    pub fn n(&self) -> usize {
        self.points.len() / self.dim
    }

    #[must_use]
    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    #[must_use]
    pub fn points_flat(&self) -> &[f64] {
        &self.points
    }

    pub(crate) fn points_flat_mut(&mut self) -> &mut [f64] {
        &mut self.points
    }
}

// ── Binning, mollification, integration ─────────────────────────────────

/// Bins particles to the grid: each particle splits mass 1/N over its 2^d
/// surrounding nodes with multilinear weights. Total mass is exactly 1 up
/// to rounding.
pub fn bin_to_grid(p: &ParticleConfig, grid: &Grid) -> Result<GridMeasure> {
    if p.dim() != grid.dim() {
        return Err(Error::GridMismatch("particle and grid dimensions differ".into()));
    }
    let mut weights = vec![0.0; grid.n_nodes()];
    let share = 1.0 / p.n() as f64;
    for i in 0..p.n() {
        let x = p.point(i);
        if !grid.contains(x) {
            return Err(Error::OutOfBox { index: i });
        }
        let (nodes, w, count) = grid.stencil(x);
        for c in 0..count {
            weights[nodes[c]] += w[c] * share;
        }
    }
    GridMeasure::new(grid.clone(), weights, MeasureKind::Probability)
}

/// Multilinear interpolation of a nodal field at a point inside the box.
pub fn interp_at(field: &[f64], grid: &Grid, p: &[f64]) -> Result<f64> {
    if field.len() != grid.n_nodes() {
        return Err(Error::GridMismatch("field length differs from grid".into()));
    }
    if !grid.contains(p) {
        return Err(Error::OutOfBox { index: 0 });
    }
    let (nodes, w, count) = grid.stencil(p);
    Ok((0..count).map(|c| w[c] * field[nodes[c]]).sum())
}

/// The smeared empirical measure P ∗ λ_ε sampled on the grid: each
/// particle becomes uniform mass 1/N on B(x_i, ε), then the nodal values
/// are renormalized to total mass 1.
pub fn mollify(p: &ParticleConfig, eps: f64, grid: &Grid) -> Result<GridMeasure> {
    if p.dim() != grid.dim() {
        return Err(Error::GridMismatch("particle and grid dimensions differ".into()));
    }
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::Domain(format!("mollifier radius {eps} not positive")));
    }
    let hmax = (0..grid.dim()).map(|a| grid.spacing(a)).fold(0.0, f64::max);
    if eps < hmax {
        return Err(Error::Precondition(format!(
            "mollifier radius {eps} under-resolves the grid spacing {hmax}"
        )));
    }
    for i in 0..p.n() {
        let x = p.point(i);
        let inside = (0..grid.dim())
            .all(|a| x[a] - eps >= grid.lower()[a] && x[a] + eps <= grid.upper()[a]);
        if !inside {
            return Err(Error::OutOfBox { index: i });
        }
    }
    let ball_density = 1.0 / (crate::kernel::unit_ball_volume(grid.dim()) * eps.powi(grid.dim() as i32));
    let mut weights = vec![0.0; grid.n_nodes()];
    let share = 1.0 / p.n() as f64;
    for flat in 0..grid.n_nodes() {
        let node = grid.node_point(flat);
        let mut dens = 0.0;
        for i in 0..p.n() {
            let x = p.point(i);
            let r2: f64 =
                (0..grid.dim()).map(|a| (node[a] - x[a]) * (node[a] - x[a])).sum();
            if r2 <= eps * eps {
                dens += share * ball_density;
            }
        }
        weights[flat] = dens * grid.cell_volume(flat);
    }
    let mass: f64 = weights.iter().sum();
    if !(mass > 0.0) {
        return Err(Error::Domain("mollified measure vanished on the grid".into()));
    }
    for w in &mut weights {
        *w /= mass;
    }
    GridMeasure::new(grid.clone(), weights, MeasureKind::Probability)
}

/// ∫ f dμ = Σ_a f_a · weight_a.
pub fn integrate(field: &[f64], mu: &GridMeasure) -> Result<f64> {
    if field.len() != mu.grid().n_nodes() {
        return Err(Error::GridMismatch("field length differs from measure grid".into()));
    }
    Ok(field.iter().zip(mu.weights()).map(|(f, w)| f * w).sum())
}

// ── Potential fields ────────────────────────────────────────────────────

/// Nodal values of h^μ(x_a) = Σ_b K(x_a − x_b) · weight_b, with
/// K(0) = (g ∗ λ_{h/2})(0) and K = g off the diagonal.
///
/// Dispatches to direct summation on small grids and to the FFT circulant
/// embedding otherwise.
pub fn potential_field(mu: &GridMeasure, kernel: &CoulombKernel) -> Result<Vec<f64>> {
    if mu.grid().n_nodes() <= DIRECT_SUM_CAP {
        potential_field_direct(mu, kernel)
    } else {
        Ok(ConvOperator::new(mu.grid(), kernel)?.apply(mu.weights()))
    }
}

/// Direct O(n²) reference backend.
pub fn potential_field_direct(mu: &GridMeasure, kernel: &CoulombKernel) -> Result<Vec<f64>> {
    let grid = mu.grid();
    check_kernel_grid(grid, kernel)?;
    let h = grid.spacing(0);
    let diag = kernel.smeared_g_radial(0.5 * h, 0.0);
    let n = grid.n_nodes();
    let pts: Vec<[f64; 3]> = (0..n).map(|f| grid.node_point(f)).collect();
    let w = mu.weights();
    let mut field = vec![0.0; n];
    for a in 0..n {
        let pa = pts[a];
        let mut acc = 0.0;
        for b in 0..n {
            let k = if a == b {
                diag
            } else {
                let mut r2 = 0.0;
                for ax in 0..grid.dim() {
                    let d = pa[ax] - pts[b][ax];
                    r2 += d * d;
                }
                kernel.eval_g_radial(r2.sqrt())
            };
            acc += k * w[b];
        }
        field[a] = acc;
    }
    Ok(field)
}

fn check_kernel_grid(grid: &Grid, kernel: &CoulombKernel) -> Result<()> {
    if kernel.dim() != grid.dim() {
        return Err(Error::GridMismatch("kernel and grid dimensions differ".into()));
    }
    if !grid.is_isotropic() {
        return Err(Error::Precondition(
            "potential fields need equal spacing on all axes".into(),
        ));
    }
    Ok(())
}

/// Fast convolution operator for one (grid, kernel) pair.
///
/// The nodal kernel matrix is a d-dimensional symmetric Toeplitz matrix;
/// embedding it in a circulant ring of size 2m per axis makes the product
/// one forward/inverse FFT pair per application. Offsets of absolute
/// value m per axis never occur between nodes, so their ring entries are
/// free (set to zero). Reused across fixed-point iterations.
pub struct ConvOperator {
    grid: Grid,
    padded: Vec<usize>,
    kernel_hat: Vec<Complex64>,
    fft_fwd: Arc<dyn Fft<f64>>,
    fft_inv: Arc<dyn Fft<f64>>,
}

impl ConvOperator {
    pub fn new(grid: &Grid, kernel: &CoulombKernel) -> Result<Self> {
        check_kernel_grid(grid, kernel)?;
        let d = grid.dim();
        let m = grid.nodes_per_axis();
        let p = 2 * m;
        let padded: Vec<usize> = vec![p; d];
        let n_pad: usize = padded.iter().product();
        let h = grid.spacing(0);
        let diag = kernel.smeared_g_radial(0.5 * h, 0.0);

        let mut ring = vec![Complex64::new(0.0, 0.0); n_pad];
        // Walk all offsets o ∈ [−(m−1), m−1]^d; ring index per axis is
        // o (o ≥ 0) or 2m + o (o < 0).
        let span = 2 * m - 1;
        let offsets_total = span.pow(d as u32);
        for code in 0..offsets_total {
            let mut rest = code;
            let mut r2 = 0.0;
            let mut idx = [0usize; 3];
            for a in (0..d).rev() {
                let o = (rest % span) as i64 - (m as i64 - 1);
                rest /= span;
                r2 += (o as f64 * h) * (o as f64 * h);
                idx[a] = if o >= 0 { o as usize } else { (p as i64 + o) as usize };
            }
            let mut flat = 0;
            for a in 0..d {
                flat = flat * p + idx[a];
            }
            let val = if r2 == 0.0 { diag } else { kernel.eval_g_radial(r2.sqrt()) };
            ring[flat] = Complex64::new(val, 0.0);
        }

        let mut planner = FftPlanner::new();
        let fft_fwd = planner.plan_fft_forward(p);
        let fft_inv = planner.plan_fft_inverse(p);
        fft_nd(&mut ring, &padded, &fft_fwd);
        Ok(Self { grid: grid.clone(), padded, kernel_hat: ring, fft_fwd, fft_inv })
    }

    #[must_use]
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// h = K ∗ w on the grid nodes.
    #[must_use]
    pub fn apply(&self, weights: &[f64]) -> Vec<f64> {
        assert!(weights.len() == self.grid.n_nodes(), "weight vector does not match grid");
        let d = self.grid.dim();
        let p = self.padded[0];
        let n_pad: usize = self.padded.iter().product();
        let mut buf = vec![Complex64::new(0.0, 0.0); n_pad];
        // Embed the m^d block into the p^d buffer.
        for flat in 0..weights.len() {
            let idx = self.grid.unflatten(flat);
            let mut pf = 0;
            for a in 0..d {
                pf = pf * p + idx[a];
            }
            buf[pf] = Complex64::new(weights[flat], 0.0);
        }
        fft_nd(&mut buf, &self.padded, &self.fft_fwd);
        for (b, k) in buf.iter_mut().zip(&self.kernel_hat) {
            *b *= k;
        }
        fft_nd(&mut buf, &self.padded, &self.fft_inv);
        let scale = 1.0 / n_pad as f64;
        let mut out = vec![0.0; weights.len()];
        for (flat, o) in out.iter_mut().enumerate() {
            let idx = self.grid.unflatten(flat);
            let mut pf = 0;
            for a in 0..d {
                pf = pf * p + idx[a];
            }
            *o = buf[pf].re * scale;
        }
        out
    }
}

/// In-place d-dimensional FFT: one 1-D pass per axis (all axes share the
/// plan length). Lanes along the last axis are contiguous; other axes
/// gather into a scratch lane.
fn fft_nd(buf: &mut [Complex64], dims: &[usize], plan: &Arc<dyn Fft<f64>>) {
    let d = dims.len();
    let n: usize = dims.iter().product();
    let p = dims[0];
    let mut scratch = vec![Complex64::new(0.0, 0.0); plan.get_inplace_scratch_len()];
    // Last axis: contiguous chunks.
    for chunk in buf.chunks_exact_mut(p) {
        plan.process_with_scratch(chunk, &mut scratch);
    }
    // Earlier axes: strided lanes.
    let mut lane = vec![Complex64::new(0.0, 0.0); p];
    for axis in 0..d - 1 {
        let stride: usize = dims[axis + 1..].iter().product();
        let block = stride * p;
        let blocks = n / block;
        for b in 0..blocks {
            for off in 0..stride {
                let base = b * block + off;
                for j in 0..p {
                    lane[j] = buf[base + j * stride];
                }
                plan.process_with_scratch(&mut lane, &mut scratch);
                for j in 0..p {
                    buf[base + j * stride] = lane[j];
                }
            }
        }
    }
}

// ── Tests ───────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kernel(dim: usize) -> CoulombKernel {
        CoulombKernel::new(dim, 1.0).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(Grid::new(4, vec![0.0; 4], vec![1.0; 4], 8).is_err());
        assert!(Grid::new(2, vec![0.0; 2], vec![1.0; 2], 1).is_err());
        assert!(Grid::new(2, vec![0.0; 2], vec![0.0; 2], 8).is_err());
        assert!(Grid::new(2, vec![0.0; 2], vec![1.0; 2], 9000).is_err(), "node cap");
        let g = Grid::centered_cube(2, 1.0, 5).unwrap();
        assert!((g.spacing(0) - 0.5).abs() < 1e-15);
        assert!(g.is_isotropic());
    }

    #[test]
    fn cell_volumes_sum_to_box_volume() {
        for (dim, m) in [(2usize, 7usize), (2, 12), (3, 5), (3, 9)] {
            let g = Grid::centered_cube(dim, 1.3, m).unwrap();
            let total: f64 = (0..g.n_nodes()).map(|f| g.cell_volume(f)).sum();
            let vol = (2.0f64 * 1.3).powi(dim as i32);
            assert!(
                (total - vol).abs() < 1e-12 * vol,
                "d={dim} m={m}: cells sum {total} vs box {vol}"
            );
        }
    }

    #[test]
    fn binning_basic_cases() {
        let g = Grid::centered_cube(2, 1.0, 5).unwrap();
        // Particle exactly on the node (0.5, 0.5) = index (3,3).
        let p = ParticleConfig::new(2, vec![0.5, 0.5]).unwrap();
        let mu = bin_to_grid(&p, &g).unwrap();
        let flat = 3 * 5 + 3;
        assert!((mu.weights()[flat] - 1.0).abs() < 1e-15, "on-node particle mass");
        assert!(mu.weights().iter().sum::<f64>() > 0.999999999999);
        // Two particles on distinct nodes.
        let p2 = ParticleConfig::new(2, vec![-1.0, -1.0, 1.0, 1.0]).unwrap();
        let mu2 = bin_to_grid(&p2, &g).unwrap();
        assert!((mu2.weights()[0] - 0.5).abs() < 1e-15);
        assert!((mu2.weights()[24] - 0.5).abs() < 1e-15);
        // Out-of-box particle is named.
        let bad = ParticleConfig::new(2, vec![0.0, 0.0, 2.0, 0.0]).unwrap();
        match bin_to_grid(&bad, &g) {
            Err(Error::OutOfBox { index }) => assert!(index == 1, "offending index {index}"),
            other => panic!("expected out-of-box error, got {other:?}"),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn binning_conserves_mass(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = Grid::centered_cube(2, 2.0, 17).unwrap();
            let pts: Vec<f64> = (0..200).map(|_| rng.random_range(-2.0..2.0)).collect();
            let p = ParticleConfig::new(2, pts).unwrap();
            let mu = bin_to_grid(&p, &g).unwrap();
            prop_assert!((mu.total_mass() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn binning_and_interpolation_are_adjoint(seed in 0u64..1000) {
            // Σ_i f(x_i)/N = ⟨f, bin(X)⟩: the pairing the Hamiltonian
            // decomposition relies on.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = Grid::centered_cube(3, 1.5, 9).unwrap();
            let field: Vec<f64> = (0..g.n_nodes()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let pts: Vec<f64> = (0..60).map(|_| rng.random_range(-1.5..1.5)).collect();
            let p = ParticleConfig::new(3, pts).unwrap();
            let mu = bin_to_grid(&p, &g).unwrap();
            let lhs: f64 = (0..p.n())
                .map(|i| interp_at(&field, &g, p.point(i)).unwrap())
                .sum::<f64>() / p.n() as f64;
            let rhs = integrate(&field, &mu).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-13 * lhs.abs().max(1.0),
                "adjointness broke: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn mollify_basic_cases() {
        let g = Grid::centered_cube(2, 1.0, 33).unwrap();
        let h = g.spacing(0);
        let p = ParticleConfig::new(2, vec![0.0, 0.0]).unwrap();
        assert!(mollify(&p, 0.25 * h, &g).is_err(), "under-resolved mollifier refused");
        let mu = mollify(&p, 4.0 * h, &g).unwrap();
        assert!((mu.total_mass() - 1.0).abs() < 1e-12);
        // Covered nodes share one density value.
        let covered: Vec<f64> = (0..g.n_nodes())
            .filter(|&f| mu.weights()[f] > 0.0)
            .map(|f| mu.density(f))
            .collect();
        assert!(covered.len() > 4, "mollifier covers several nodes");
        let d0 = covered[0];
        assert!(
            covered.iter().all(|&d| (d - d0).abs() < 1e-12 * d0),
            "uniform blob density"
        );
        // Two far-separated particles: disjoint blobs of mass 1/2.
        let p2 = ParticleConfig::new(2, vec![-0.5, -0.5, 0.5, 0.5]).unwrap();
        let mu2 = mollify(&p2, 3.0 * h, &g).unwrap();
        let left: f64 = (0..g.n_nodes())
            .filter(|&f| {
                let pt = g.node_point(f);
                pt[0] + pt[1] < 0.0
            })
            .map(|f| mu2.weights()[f])
            .sum();
        assert!((left - 0.5).abs() < 1e-12, "left blob mass {left}");
        // Ball sticking out of the box is refused with the index.
        let edge = ParticleConfig::new(2, vec![0.95, 0.0]).unwrap();
        assert!(matches!(mollify(&edge, 4.0 * h, &g), Err(Error::OutOfBox { index: 0 })));
    }

    #[test]
    fn mollify_refines_toward_continuum() {
        // Fixed config and ε; the nodal density of P_ε stabilizes as the
        // grid refines: sup over coincident nodes of the density change
        // decreases.
        let p = ParticleConfig::new(2, vec![0.11, -0.23, -0.41, 0.37]).unwrap();
        let eps = 0.3;
        let mut sups = Vec::new();
        let mut prev: Option<(Grid, GridMeasure)> = None;
        for m in [17usize, 33, 65] {
            let g = Grid::centered_cube(2, 1.0, m).unwrap();
            let mu = mollify(&p, eps, &g).unwrap();
            if let Some((pg, pmu)) = prev.take() {
                let step = (m - 1) / (pg.nodes_per_axis() - 1);
                let mut sup = 0.0f64;
                for flat in 0..pg.n_nodes() {
                    let idx = pg.unflatten(flat);
                    let fine_flat = (idx[0] * step) * m + idx[1] * step;
                    let diff = (pmu.density(flat) - mu.density(fine_flat)).abs();
                    sup = sup.max(diff);
                }
                sups.push(sup);
            }
            prev = Some((g, mu));
        }
        assert!(
            sups[1] < sups[0],
            "density refinement not improving: {sups:?}"
        );
    }

    #[test]
    fn integrate_closed_forms() {
        let g = Grid::centered_cube(2, 1.0, 16).unwrap();
        // Uniform density: weights proportional to cell volumes.
        let vol: f64 = (0..g.n_nodes()).map(|f| g.cell_volume(f)).sum();
        let weights: Vec<f64> = (0..g.n_nodes()).map(|f| g.cell_volume(f) / vol).collect();
        let mu = GridMeasure::new(g.clone(), weights, MeasureKind::Probability).unwrap();
        let ones = vec![1.0; g.n_nodes()];
        assert!((integrate(&ones, &mu).unwrap() - 1.0).abs() < 1e-14);
        let cs: Vec<f64> = vec![2.5; g.n_nodes()];
        assert!((integrate(&cs, &mu).unwrap() - 2.5).abs() < 1e-13);
        // Half-space indicator: x0 < 0 carries exactly half the volume
        // (trapezoid edge cells make the count exact for even m).
        let ind: Vec<f64> = (0..g.n_nodes())
            .map(|f| if g.node_point(f)[0] < 0.0 { 1.0 } else { 0.0 })
            .collect();
        let half = integrate(&ind, &mu).unwrap();
        assert!((half - 0.5).abs() < 1e-13, "half-space mass {half}");
    }

    #[test]
    fn potential_single_point_mass() {
        for dim in [2usize, 3] {
            let g = Grid::centered_cube(dim, 1.0, 9).unwrap();
            let mut w = vec![0.0; g.n_nodes()];
            let center = g.n_nodes() / 2; // odd m: exact center node
            w[center] = 1.0;
            let mu = GridMeasure::new(g.clone(), w, MeasureKind::Probability).unwrap();
            let k = kernel(dim);
            let field = potential_field_direct(&mu, &k).unwrap();
            let probe = 0; // corner node
            let pc = g.node_point(probe);
            let r: f64 = (0..dim).map(|a| pc[a] * pc[a]).sum::<f64>().sqrt();
            let expect = k.eval_g_radial(r);
            assert!(
                (field[probe] - expect).abs() < 1e-10,
                "d={dim}: corner potential {} vs g = {expect}",
                field[probe]
            );
        }
    }

    #[test]
    fn potential_linearity() {
        let g = Grid::centered_cube(2, 1.0, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w1: Vec<f64> = (0..g.n_nodes()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w2: Vec<f64> = (0..g.n_nodes()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sum: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| a + b).collect();
        let k = kernel(2);
        let make = |w: Vec<f64>| GridMeasure::new(g.clone(), w, MeasureKind::Signed).unwrap();
        let f1 = potential_field_direct(&make(w1), &k).unwrap();
        let f2 = potential_field_direct(&make(w2), &k).unwrap();
        let fs = potential_field_direct(&make(sum), &k).unwrap();
        for a in 0..g.n_nodes() {
            assert!(
                (fs[a] - f1[a] - f2[a]).abs() <= 1e-12 * fs[a].abs().max(1.0),
                "linearity at node {a}"
            );
        }
    }

    #[test]
    fn potential_of_ball_measure_matches_exterior_kernel() {
        // Uniform ball measure at m=64, d=3: exterior nodes see g(x)
        // within 2%.
        let g = Grid::centered_cube(3, 1.0, 64).unwrap();
        let k = kernel(3);
        let ball_r = 0.3;
        let mut weights = vec![0.0; g.n_nodes()];
        for f in 0..g.n_nodes() {
            let pt = g.node_point(f);
            let r2: f64 = pt[..3].iter().map(|c| c * c).sum();
            if r2 <= ball_r * ball_r {
                weights[f] = g.cell_volume(f);
            }
        }
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        let mu = GridMeasure::new(g.clone(), weights, MeasureKind::Probability).unwrap();
        let field = ConvOperator::new(&g, &k).unwrap().apply(mu.weights());
        let mut checked = 0;
        for f in 0..g.n_nodes() {
            let pt = g.node_point(f);
            let r: f64 = pt[..3].iter().map(|c| c * c).sum::<f64>().sqrt();
            if r > 2.0 * ball_r && r < 0.95 {
                let expect = k.eval_g_radial(r);
                assert!(
                    (field[f] - expect).abs() < 0.02 * expect,
                    "node at r={r}: {} vs {expect}",
                    field[f]
                );
                checked += 1;
            }
        }
        assert!(checked > 100, "checked {checked} exterior nodes");
    }

    #[test]
    fn fft_and_direct_backends_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (dim, m) in [(2usize, 64usize), (3, 32)] {
            let g = Grid::centered_cube(dim, 1.2, m).unwrap();
            let w: Vec<f64> = (0..g.n_nodes()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mu = GridMeasure::new(g.clone(), w, MeasureKind::Signed).unwrap();
            let k = kernel(dim);
            let direct = potential_field_direct(&mu, &k).unwrap();
            let fast = ConvOperator::new(&g, &k).unwrap().apply(mu.weights());
            let scale = direct.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            for a in 0..g.n_nodes() {
                assert!(
                    (direct[a] - fast[a]).abs() <= 1e-8 * scale,
                    "d={dim} node {a}: direct {} vs fft {}",
                    direct[a],
                    fast[a]
                );
            }
        }
    }

    #[test]
    fn binary_roundtrip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Grid::centered_cube(3, 0.8, 6).unwrap();
        let w: Vec<f64> = (0..g.n_nodes()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mu = GridMeasure::new(g, w, MeasureKind::Signed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("measure.bin");
        mu.write_binary(&path).unwrap();
        let back = GridMeasure::read_binary(&path).unwrap();
        assert!(back.grid() == mu.grid(), "grid round-trip");
        assert!(back.weights() == mu.weights(), "bit-exact weights");
    }

    #[test]
    fn csv_export_parses_back() {
        let g = Grid::centered_cube(2, 1.0, 4).unwrap();
        let vol: f64 = (0..g.n_nodes()).map(|f| g.cell_volume(f)).sum();
        let w: Vec<f64> = (0..g.n_nodes()).map(|f| g.cell_volume(f) / vol).collect();
        let mu = GridMeasure::new(g.clone(), w, MeasureKind::Probability).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("measure.csv");
        mu.write_csv(&path).unwrap();
        let mut rdr = csv::Reader::from_path(&path).unwrap();
        let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
        assert!(rows.len() == g.n_nodes(), "{} rows", rows.len());
        let w0: f64 = rows[0][2].parse().unwrap();
        assert!((w0 - mu.weights()[0]).abs() < 1e-18);
    }

    #[test]
    fn sampler_matches_cell_masses() {
        let g = Grid::centered_cube(2, 1.0, 4).unwrap();
        let raw = [0.1, 0.0, 0.2, 0.05, 0.05, 0.1, 0.0, 0.1, 0.05, 0.05, 0.1, 0.0, 0.0, 0.1, 0.05, 0.05];
        let mu = GridMeasure::new(g.clone(), raw.to_vec(), MeasureKind::Probability).unwrap();
        let sampler = mu.sampler().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 200_000;
        let mut counts = vec![0usize; g.n_nodes()];
        for _ in 0..n {
            let pt = sampler.sample(&mut rng);
            assert!(g.contains(&pt), "sample inside box");
            // Nearest node = the cell the jitter stayed in.
            let i = ((pt[0] - g.lower()[0]) / g.spacing(0)).round() as usize;
            let j = ((pt[1] - g.lower()[1]) / g.spacing(1)).round() as usize;
            counts[i * 4 + j] += 1;
        }
        for f in 0..g.n_nodes() {
            let freq = counts[f] as f64 / n as f64;
            let se = (raw[f] * (1.0 - raw[f]) / n as f64).sqrt();
            assert!(
                (freq - raw[f]).abs() <= 4.0 * se + 1e-9,
                "node {f}: frequency {freq} vs mass {}",
                raw[f]
            );
        }
        // Determinism.
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        assert!(sampler.sample(&mut r1) == sampler.sample(&mut r2));
    }
}
