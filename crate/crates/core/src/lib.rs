pub mod checkpoint;
pub mod correlation;
pub mod error;
pub mod extractors;
pub mod features;
pub mod instrument;
pub mod metrics;
pub mod nn;
pub mod real;
pub mod report;
pub mod rng;
pub mod separator;
pub mod signal;
pub mod toyworld;
pub mod training;

pub use error::{Error, Result};
pub use real::Real;

pub type Waveform32 = signal::Waveform<f32>;
pub type Waveform64 = signal::Waveform<f64>;
pub type Dataset32 = toyworld::Dataset<f32>;
pub type Dataset64 = toyworld::Dataset<f64>;
pub type Separator32 = separator::SeparatorParams<f32>;
pub type Separator64 = separator::SeparatorParams<f64>;
pub type Extractors32 = extractors::FrozenExtractors<f32>;
pub type Extractors64 = extractors::FrozenExtractors<f64>;
pub type Discriminator32 = correlation::DiscriminatorParams<f32>;
pub type Discriminator64 = correlation::DiscriminatorParams<f64>;
