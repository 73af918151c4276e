//! Parameterizations of stable manifolds of parabolic invariant tori for
//! quasiperiodic maps and vector fields.

pub mod error;
pub mod fourier;
pub mod jet;
pub mod model;
pub mod cohomology;
pub mod dynamics;
pub mod verify;
pub mod celestial;
pub mod fixtures;

pub use num_complex;
pub use error::{Error, Result};
pub use fourier::{FourierSeries, FrequencyVector, ScanKind};
pub use jet::{Jet, ParamJet, Substitution};
pub use model::{DynamicsKind, FlowModel, MapModel, ModelData, ReducedDynamics};
pub use cohomology::{
    base_step, conjugate_normal_form, extend_order, extend_order_flow, invariance_error, solve_to_order, Engine,
    EngineOptions, ErrorJet, FreeChoicePolicy, ManifoldSolution,
};
pub use dynamics::{integrate, integrate_flow, iterate_map, Domain, IntegratorOptions, Orbit};
pub use verify::{fit_error_orders, sector_decay_check, stable_set_membership, FitOptions, OrderReport, Sector};
pub use celestial::{
    build_full_skeleton, build_restricted_field, escape_demo, expand_potential, PrimarySystem, RestrictedChart,
    TorusData,
};
