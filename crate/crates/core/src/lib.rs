//! Particle solver for the Vlasov–Poisson system in smooth convex domains with
//! specular reflection at the wall and a homogeneous Dirichlet potential.

pub mod geometry;
pub mod grid;
pub mod solver;
pub mod field;
pub mod dynamics;
pub mod kinetic;
pub mod config;
pub mod run;
