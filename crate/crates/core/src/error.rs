use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("damping profile is negative (min {min:e}) but nonnegativity was requested")]
    NegativeDamping { min: f64 },
    #[error("metric band limit {band} exceeds N/4 = {limit}")]
    Aliasing { band: i32, limit: i32 },
    #[error("energy drift {drift:e} exceeds {limit:e}; reduce dt")]
    EnergyDrift { drift: f64, limit: f64 },
    #[error("Newton iteration did not converge after {iterations} steps (residual {residual:e})")]
    NewtonFailed { iterations: usize, residual: f64 },
    #[error("orbit has no return to the section within t = {horizon}")]
    NoReturn { horizon: f64 },
    #[error("orbit is not hyperbolic (trace {trace})")]
    NotHyperbolic { trace: f64 },
    #[error("sample set is empty")]
    EmptySample,
    #[error("trajectory left the shadowing tube at t = {time}")]
    LeftTube { time: f64 },
    #[error("propagator exponent {exponent} exceeds the overflow guard")]
    Overflow { exponent: f64 },
    #[error("time step {dt:e} violates the stability bound {limit:e}")]
    Cfl { dt: f64, limit: f64 },
    #[error("symbol support leaves the resolved momentum window (|xi| = {xi} > {window})")]
    OutsideWindow { xi: f64, window: f64 },
    #[error("spectral window is empty")]
    EmptyWindow,
    #[error("linear algebra failure: {0}")]
    Linalg(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("energy reached the floor {floor:e} at sample {index}")]
    Floor { floor: f64, index: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
