//! Per-user throughput of shared access networks under load.
//!
//! * [`model`]: closed-form fair-sharing and proportional-fair formulas,
//!   generic over the floating-point type.
//! * [`sim`]: event-driven simulator used as an independent check.
//! * [`speedtest`]: emulated speed tests, MCS tables, carrier aggregation
//!   and utilization inference.
//! * [`harness`]: validation sweeps of measured against predicted speed.
//! * [`planner`]: growth projection and coverage classification of areas.
//! * [`config`] and [`formats`]: TOML documents and CSV datasets.

pub mod config;
pub mod formats;
pub mod harness;
pub mod model;
pub mod planner;
pub mod scalar;
pub mod sim;
pub mod speedtest;
pub mod units;

pub use scalar::Scalar;

/// Default scalar for everything outside the generic model.
pub type Real = f64;

pub type ChannelSpecF64 = model::ChannelSpec<f64>;
pub type ChannelSpecF32 = model::ChannelSpec<f32>;
pub type UserClassF64 = model::UserClass<f64>;
pub type UserClassF32 = model::UserClass<f32>;
pub type ClassMixF64 = model::ClassMix<f64>;
pub type ClassMixF32 = model::ClassMix<f32>;
pub type LoadPointF64 = model::LoadPoint<f64>;
pub type LoadPointF32 = model::LoadPoint<f32>;
pub type FinitePopulationSpecF64 = model::FinitePopulationSpec<f64>;
pub type FinitePopulationSpecF32 = model::FinitePopulationSpec<f32>;
pub type RatePredictionF64 = model::RatePrediction<f64>;
pub type RatePredictionF32 = model::RatePrediction<f32>;
