//! Dense matrix kernel: storage, factorizations, eigen-solver, orthonormalization and seeded
//! random generation.

mod linalg;
mod matrix;
mod rng;

pub use linalg::{
    cholesky_logdet, orthonormality_defect, qr_orthonormalize, sym_eigen, Cholesky, SymEigen,
    SYMMETRY_TOL,
};
pub use matrix::{dot, Matrix};
pub use rng::{seeded_gaussian, Rng, Seed};
