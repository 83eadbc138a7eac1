//! Finite-element toolkit for nonlinear coupled porous-media problems, built
//! around a generic adaptive-iteration engine.
//!
//! The crate provides structured triangulations, P1/P2 Lagrange spaces, a
//! coefficient-driven assembler, a banded direct solver, and an iteration
//! engine in which linearization and splitting schemes plug in as
//! (bilinear form, residual, iteration-dependent norm) triples. Cheap a
//! posteriori estimators computed from the last two iterates drive scheme
//! switching, stabilization-parameter tuning, and time-step control.
//!
//! Three ready-made problems exercise the engine: two-phase flow in a global
//! and complementary pressure formulation, Richards' equation coupled to
//! surfactant transport, and quasi-static Biot poroelasticity solved by
//! fixed-stress splitting.

pub mod assemble;
pub mod csr;
pub mod engine;
pub mod lu;
pub mod mesh;
pub mod norms;
pub mod quad;
pub mod space;
pub mod surfactant;
pub mod twophase;

pub use assemble::{
    apply_dirichlet, assemble, assemble_boundary_load, assemble_functional, integrate,
    Constraints, FieldDef, FnlTerm, Qp, Term,
};
pub use csr::CsrMatrix;
pub use lu::LuFactor;
pub use mesh::{build_lshape_mesh, build_rect_mesh, BoundaryTag, Rect, TriMesh};
pub use norms::{l2_diff, l2_norm, weighted_norm, NormTerm};
pub use quad::{EdgeRule, QuadRule};
pub use space::{DirichletValue, FeSpace, Order};
