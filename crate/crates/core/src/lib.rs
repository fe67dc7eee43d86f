//! Active preference learning over a finite instance pool from pairwise
//! comparisons, with nested-logit (correlated Gumbel) comparison noise and
//! GP or deep-GP utility priors.

pub mod acquisition;
pub mod active;
pub mod adam;
pub mod bench;
pub mod chain;
pub mod choice;
pub mod dgp;
mod dual;
pub mod error;
pub mod gp;
pub mod itinerary;
pub mod kernel;
pub mod linalg;
pub mod pool;
pub mod surrogate;

pub use acquisition::{AcquisitionInput, AcquisitionKind};
pub use active::{NextQuery, Oracle, Phase, Query, QueryRecord, Session, SessionConfig, StepOutcome, StopReason, StopRule};
pub use bench::{BenchReport, BenchTarget, ExperimentConfig, LatentFunction, Method, Problem, SyntheticOracle};
pub use chain::{ComparisonSet, PreferenceChain, Relation};
pub use choice::{Instance, NestConfig, NestId, TripletCase};
pub use dgp::{DgpConfig, DgpFit};
pub use error::{Error, Result};
pub use gp::{FitConfig, GpFit, Prediction};
pub use itinerary::{Itinerary, ItineraryCoefficients, Normalization};
pub use kernel::KernelParams;
pub use pool::{Pool, PoolRecord};
pub use surrogate::{SurrogateConfig, SurrogateKind, SurrogateState};
