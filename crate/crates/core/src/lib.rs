pub mod autograd;
pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod model;
pub mod noise;
pub mod objective;
pub mod ontology;
pub mod optim;
pub mod params;
pub mod rng;
pub mod text;
pub mod training;

pub use error::{DstError, Result};
