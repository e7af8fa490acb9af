//! Cislunar space-domain-awareness toolkit: CR3BP dynamics, periodic-orbit
//! libraries, photometric visibility, unscented attitude and orbit estimation,
//! and architecture/tasking optimization.

pub mod architecture;
pub mod config;
pub mod cr3bp;
pub mod estimation;
pub mod integrate;
pub mod optimize;
pub mod orbits;
pub mod photometry;
pub mod tasking;
