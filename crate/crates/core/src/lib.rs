//! Incremental open-world recognition that grows a genus/differentia
//! hierarchy of objects from encounters, asking a user (or a simulated one)
//! where each new encounter belongs.

pub mod error;
pub mod evm;
pub mod experiment;
pub mod hierarchy;
pub mod interaction;
pub mod io;
pub mod model;
pub mod recognition;
pub mod synthetic;

pub use error::{Error, OracleError, Result};
pub use evm::{EvmConfig, WeibullModel};
pub use hierarchy::{Hierarchy, HierarchySnapshot, NodeId};
pub use interaction::{Learner, Oracle, PlacementOutcome, Query, SimulatedOracle};
pub use model::{EmbeddingVector, Encounter, EncounterId, VisualObject, VisualObjectId};
pub use recognition::{Prediction, Recognizer};
