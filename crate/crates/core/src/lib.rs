//! Numerical laboratory for Coulomb gases in dimensions 2 and 3.
//!
//! The library implements the objects of mean-field Coulomb-gas theory at
//! inverse temperatures in the intermediate regime 1/N ≪ β ≪ 1:
//!
//! * the Coulomb kernel g(x) = c̄·|x|^{2−d} (d ≥ 3) or −c̄·log|x| (d = 2),
//!   together with its mollifications against uniform ball measures
//!   ([`kernel`]);
//! * gridded and atomic measures, particle binning, and discrete potentials
//!   h^μ = g ∗ μ ([`measures`]);
//! * Coulomb energies, the Hamiltonian H_N, its exact decomposition around
//!   the thermal equilibrium measure, and smeared-energy identities
//!   ([`energy`]);
//! * the thermal equilibrium measure μ_β solving
//!   h^{μ_β} + V + (1/(Nβ)) log μ_β = c, its free energy, decay
//!   diagnostics, and the next-order partition function ([`thermal`]);
//! * bounded-Lipschitz and H⁻¹ norms with certified dual witnesses
//!   ([`metrics`]);
//! * a Metropolis chain targeting the Gibbs measure
//!   P_{N,β} ∝ exp(−βH_N) with O(N) single-particle updates ([`sampler`]);
//! * experiment orchestration, persistence, and rate fitting ([`harness`]).
//!
//! The headline experiment checks concentration of the empirical measure:
//! the bounded-Lipschitz distance from emp_N to μ_β decays like N^{−1/d}
//! along the schedule β = N^{−α}, 0 < α < 1.

pub mod energy;
pub mod error;
pub mod harness;
pub mod kernel;
pub mod measures;
pub mod metrics;
pub mod sampler;
pub mod thermal;

pub use error::{Error, Result};
