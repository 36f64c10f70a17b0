pub mod coefficients;
pub mod geometry;
pub mod holder;
pub mod kernel;
pub mod quadrature;
pub mod solver;
pub mod verify;
