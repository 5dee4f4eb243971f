//! Worldline Monte Carlo for transverse-field spin systems on finite
//! lattices, with a dense exact-diagonalization reference and the explicit
//! constants of the spectral gap and correlation decay bounds.

pub mod bounds;
pub mod checks;
pub mod dynamics;
pub mod estimators;
pub mod model;
pub mod oracle;
pub mod worldline;

pub use bounds::{bounds_report, decay_bound, BoundsError, BoundsReport};
pub use dynamics::{ChainState, Dynamics, EventRecord, MoveStats, RateTable, SymmetryReport};
pub use estimators::{Estimate, EstimatorError, McmcParams, Observation};
pub use model::{
    Boundary, Lattice, Lifting, ModelConfig, ModelConstants, ModelError, ModelSpec, Observable, ObservableConfig,
    Spin, ValidationErrors, WeightSign,
};
pub use oracle::{OracleError, ThermalState};
pub use worldline::{Mark, Move, MoveClass, MoveKind, SiteWorldline, WorldlineConfig, WorldlineError};
