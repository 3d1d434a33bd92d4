//! Numerical toolkit for closed geodesics on perturbed cylindrical
//! manifolds `R x S^N` with metric `g0 + eps h`.
//!
//! The crate implements a finite-dimensional reduction: great circles at
//! fixed height form a critical manifold of the unperturbed energy, a
//! reduced functional `Gamma` on that manifold selects candidate circles,
//! a bordered Newton solve produces the normal correction `w`, and a full
//! variational refinement certifies genuine critical points of the
//! perturbed loop-space energy. Symmetry-aware post-processing quotients
//! the O(2) action and reports spectra and multiplicity counts.

pub mod analysis;
pub mod error;
pub mod loop_space;
pub mod metric;
pub mod reduction;
pub mod solver;

pub use analysis::{
    align, dedup_loops, degree_check_cylinder, nondegeneracy_check, spectrum, Alignment,
    CylinderDegreeReport, NondegeneracyReport, SpectrumSummary,
};
pub use error::{Error, Result};
pub use loop_space::{energy, energy_split, gradient, hessian, DiscreteLoop, LoopTangent};
pub use metric::{
    check_h1, check_h2, AmbientPoint, FormTerm, PerturbationForm, ProfileSpec, TangentVector,
};
pub use reduction::{
    compute_w, find_gamma_critical_points, gamma, gamma_discrete, gamma_grad, great_circle, phi,
    CircleParam, GammaCriticalPoint, GammaSearchConfig, ReductionReport, WCorrection, WOptions,
    WSolverKind,
};
pub use solver::{
    continuation, multiplicity_experiment, refine, discrete_circle_energy, ExperimentConfig,
    ExperimentReport, GeodesicCertificate, OrbitClass, RefineOptions,
};
