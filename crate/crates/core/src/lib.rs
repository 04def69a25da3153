//! Numerical laboratory for the damped wave equation `v_tt - Delta_g v + 2 a v_t = 0` on
//! conformally flat 2-tori: geodesic dynamics, semiclassical quantization, the quadratic
//! eigenvalue problem, cylinder operators and time-domain energy decay.

pub mod dynamics;
pub mod error;
pub mod fourier;
pub mod geometry;
pub mod quantization;
pub mod scalar;
pub mod spectrum;
pub mod concentration;
pub mod timedomain;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Metric = geometry::ConformalMetric<f64>;
pub type Damping = geometry::DampingField<f64>;
pub type Metric32 = geometry::ConformalMetric<f32>;
pub type Damping32 = geometry::DampingField<f32>;
pub type Point = dynamics::PhaseSpacePoint<f64>;
pub type C64 = num_complex::Complex<f64>;
