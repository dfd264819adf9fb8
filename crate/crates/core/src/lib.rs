//! Low-rank adapter arithmetic, general-knowledge subtraction and
//! prototype routing over adapter libraries, with a small decoder
//! transformer, an adapter trainer and a synthetic benchmark harness.

pub mod container;
pub mod error;
pub mod eval;
pub mod genknowsub;
pub mod library;
pub mod linalg;
pub mod lowrank;
pub mod model;
pub mod real;
pub mod router;
pub mod train;

pub use error::{Error, Result};
pub use genknowsub::{mean_normalize, subtract_general, SubtractMode};
pub use library::{average_adapters, AdapterLibrary, ExpertAdapter, ModelSignature, Provenance, SiteId, SiteKind};
pub use linalg::DenseMatrix;
pub use lowrank::LowRankDelta;
pub use real::{Precision, Real};
pub use router::{PrototypeBank, RouterConfig, RoutingDecision};
