pub mod archive;
pub mod checkpoint;
pub mod dataset;
pub mod discriminator;
pub mod embeddings;
pub mod error;
pub mod generator;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod schema;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
pub use schema::{AttributeSchema, AttributeSet, OneHotVector};
