pub mod correlation;
pub mod criteria;
pub mod data;
pub mod engine;
pub mod error;
pub mod family;
pub mod harness;
pub mod inference;
pub mod linalg;
pub mod longcsv;
pub mod par;
pub mod simgen;

pub use correlation::{build_correlation, CorrStructure, WorkingCorrelation};
pub use data::{Cluster, LongitudinalDataset, WaveGrid};
pub use engine::{fit, FitOptions, GeeFit, PhiMode};
pub use error::{GeeError, Result};
pub use family::Family;
pub use par::Execution;
