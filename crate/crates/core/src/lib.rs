pub mod attacks;
pub mod checkpoint;
pub mod config;
pub mod contrast;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod perceptual;
pub mod rng;
pub mod scalar;
pub mod schedules;
pub mod theory;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Network32 = nn::Network<f32>;
pub type Network64 = nn::Network<f64>;
pub type ImageSet32 = data::ImageSet<f32>;
pub type ImageSet64 = data::ImageSet<f64>;
pub type ModelState32 = training::ModelState<f32>;
pub type ModelState64 = training::ModelState<f64>;
