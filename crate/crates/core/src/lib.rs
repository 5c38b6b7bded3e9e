//! Two-species zero range processes with product invariant measures:
//! jump rates, grand-canonical thermodynamics, exact finite-lattice
//! ensembles, kinetic Monte Carlo, the hydrodynamic PDE and numerical
//! checks of the limit theorems relating them.

pub mod ensembles;
pub mod lattice;
pub mod pde;
pub mod profile;
pub mod rates;
pub mod rng;
pub mod simulate;
pub mod thermo;
pub mod verify;
