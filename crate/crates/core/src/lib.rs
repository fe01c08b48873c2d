pub mod alignment;
pub mod attribution;
pub mod conceptbank;
pub mod error;
pub mod evalharness;
pub mod explain;
pub mod featviz;
pub mod image;
pub mod models;
pub mod numerics;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod sae;
pub mod synthdata;

pub use error::{Error, Result};
