//! Stability certification and simulation for compartmental and cooperative
//! ODE systems.
//!
//! The crate is organised bottom-up:
//!
//! * [`matrix`]: validated compartmental matrices, flow parameters, permutations
//! * [`graph`]: flow graphs, outflow connectivity, traps, layer decomposition
//! * [`canonical`]: outflow canonical form and the constructive permutation
//! * [`certificate`]: linear Lyapunov certificates for families of matrices
//! * [`expr`], [`system`]: user-defined coefficient functions and system descriptions
//! * [`ode`]: fixed-step / adaptive integration with box projection
//! * [`stability`]: exponential and incremental stability pipelines
//! * [`trm`]: traffic reaction models and the state estimator
//!
//! Vertex and compartment indices are 0-based in the API. Anything written
//! into a report (JSON, error messages) is 1-based.

// `!(x > 0.0)` is used on purpose so NaN falls on the rejecting side.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

pub mod canonical;
pub mod certificate;
pub mod error;
pub mod expr;
pub mod graph;
pub mod matrix;
pub mod ode;
pub mod random;
pub mod sampling;
pub mod stability;
pub mod system;
pub mod trm;

mod one_based;

pub use canonical::{canonicalize, check_canonical, CanonicalWitness, Canonicalization};
pub use certificate::{
    certify_via_canonical, family_membership, linear_inverse_certificate, theorem1_certificate,
    verify_certificate, CertificateSource, FamilyParams, LyapunovCertificate, SigmaPolicy,
};
pub use error::{Error, Result};
pub use expr::Expression;
pub use graph::{build_graph, check_outflow_connected, layer_decomposition, FlowGraph, LayerDecomposition, TrapReport};
pub use matrix::{
    conjugate_by_permutation, to_flow_params, validate_compartmental, CompartmentalMatrix, FlowParams, Permutation,
    SquareMatrix,
};
pub use ode::{integrate, IntegrateOptions, Trajectory};
pub use system::{BoxSpace, CompartmentalSystem, Dynamics, StructuredSystem};

/// Default strictness tolerance for "entry > 0" and "column sum < 0".
pub const DEFAULT_STRICT_TOL: f64 = 1e-12;
