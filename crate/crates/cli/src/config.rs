//! Experiment configuration (TOML).

use std::fmt;
use std::path::{Path, PathBuf};

use dwe_core::geometry::{DampingPreset, MetricPreset};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Grid size `N` (even, at least 16).
    pub n: usize,
    /// Torus side `L`.
    pub side: f64,
    /// `hbar` sweep used by tube-mass, egorov and invariance reports.
    pub hbar: Vec<f64>,
    pub nu_bar: f64,
    pub n0: f64,
    pub kappa0: f64,
    /// Partition cell width.
    pub eps: f64,
    /// Energy slab half-width.
    pub delta: f64,
    pub out: PathBuf,
    pub cache: bool,
    pub metric: MetricPreset,
    pub damping: DampingPreset,
    pub window: WindowConfig,
    pub dynamics: DynamicsConfig,
    pub resolvent: ResolventConfig,
    pub egorov: EgorovConfig,
    pub cylinders: CylindersConfig,
    pub decay: DecayConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowConfig {
    /// Largest `|tau|` kept; defaults to the resolved window `(2 pi / L) N / 4`.
    pub tau_max: Option<f64>,
    /// Lower end of `Re tau` for the strip check.
    pub strip_re_min: f64,
    pub strip_tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsConfig {
    pub samples: usize,
    pub horizon: f64,
    pub dt: f64,
    /// Pressure separation.
    pub pressure_eps: f64,
    /// Pressure horizon in orbit periods.
    pub pressure_periods: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResolventConfig {
    /// Curve `Im tau = -1 / (c log Re tau)`.
    pub c: f64,
    pub re_values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EgorovConfig {
    pub t: f64,
    pub kappa1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CylindersConfig {
    /// `hbar` for the dispersive and Q-norm runs.
    pub hbar: f64,
    /// Grid for the word-enumeration identities.
    pub sumsplit_n: usize,
    pub sumsplit_hbar: f64,
    pub blocks: usize,
    pub p_max: usize,
    pub invariance_t: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecayConfig {
    pub dt: f64,
    pub t_end: f64,
    /// Record every this many steps.
    pub every: usize,
    pub initial: InitialData,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialData {
    Gaussian { center: [f64; 2], width: f64 },
    Mode { k: [i32; 2], amplitude: f64 },
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n: 32,
            side: 1.0,
            hbar: vec![1.0 / 12.0, 1.0 / 18.0, 1.0 / 27.0, 1.0 / 40.0],
            nu_bar: dwe_core::concentration::DEFAULT_NU_BAR,
            n0: 1.0,
            kappa0: dwe_core::concentration::DEFAULT_KAPPA0,
            eps: dwe_core::concentration::DEFAULT_EPS,
            delta: dwe_core::concentration::DEFAULT_DELTA,
            out: PathBuf::from("out"),
            cache: true,
            metric: MetricPreset::Flat,
            damping: DampingPreset::Zero,
            window: WindowConfig::default(),
            dynamics: DynamicsConfig::default(),
            resolvent: ResolventConfig::default(),
            egorov: EgorovConfig::default(),
            cylinders: CylindersConfig::default(),
            decay: DecayConfig::default(),
        }
    }
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { tau_max: None, strip_re_min: 20.0, strip_tol: 0.1 }
    }
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self { samples: 400, horizon: 20.0, dt: 0.01, pressure_eps: 0.05, pressure_periods: 8.0 }
    }
}

impl Default for ResolventConfig {
    fn default() -> Self {
        Self { c: 1.0, re_values: vec![10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0] }
    }
}

impl Default for EgorovConfig {
    fn default() -> Self {
        Self { t: 1.0, kappa1: 0.2 }
    }
}

impl Default for CylindersConfig {
    fn default() -> Self {
        Self { hbar: 1.0 / 64.0, sumsplit_n: 16, sumsplit_hbar: 1.0 / 16.0, blocks: 10, p_max: 4, invariance_t: 1.0 }
    }
}

impl Default for DecayConfig {
    fn default() -> Self {
        Self { dt: 2e-3, t_end: 20.0, every: 1, initial: InitialData::Gaussian { center: [0.5, 0.3], width: 0.08 } }
    }
}

/// One invalid field.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug)]
pub enum ConfigError {
    Io(PathBuf, std::io::Error),
    Parse(String),
    Invalid(Vec<FieldError>),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io(p, e) => write!(f, "cannot read {}: {e}", p.display()),
            ConfigError::Parse(e) => write!(f, "invalid config: {e}"),
            ConfigError::Invalid(errs) => {
                writeln!(f, "invalid config:")?;
                for e in errs {
                    writeln!(f, "  {e}")?;
                }
                Ok(())
            }
        }
    }
}

impl std::error::Error for ConfigError {}

impl ExperimentConfig {
    pub fn from_toml(s: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let errs = cfg.validate();
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let s = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(path.to_path_buf(), e))?;
        Self::from_toml(&s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Range checks against the owning modules' documented limits.
    pub fn validate(&self) -> Vec<FieldError> {
        let mut errs = Vec::new();
        let mut bad = |field: &str, message: String| errs.push(FieldError { field: field.into(), message });
        if self.n < 16 || self.n % 2 != 0 {
            bad("n", format!("must be even and at least 16, got {}", self.n));
        }
        if !(self.side > 0.0) {
            bad("side", format!("must be positive, got {}", self.side));
        }
        if self.hbar.is_empty() {
            bad("hbar", "sweep list is empty".into());
        }
        for (i, h) in self.hbar.iter().enumerate() {
            if !(*h > 0.0 && *h < 1.0) {
                bad(&format!("hbar[{i}]"), format!("must lie in (0, 1), got {h}"));
            }
        }
        if !(self.nu_bar > 0.0 && self.nu_bar < 0.5) {
            bad("nu_bar", format!("must lie in (0, 1/2), got {}", self.nu_bar));
        }
        if !(self.n0 > 0.0) {
            bad("n0", format!("must be positive, got {}", self.n0));
        }
        if !(self.kappa0 > 0.0) {
            bad("kappa0", format!("must be positive, got {}", self.kappa0));
        }
        let eps_max = dwe_core::concentration::DEFAULT_EPS_TILDE0 / 2.0;
        if !(self.eps > 0.0 && self.eps <= eps_max) {
            bad("eps", format!("must lie in (0, {eps_max}], got {}", self.eps));
        }
        if !(self.delta > 0.0 && self.delta + dwe_core::concentration::SLAB_RAMP < 1.0) {
            bad("delta", format!("must lie in (0, {}), got {}", 1.0 - dwe_core::concentration::SLAB_RAMP, self.delta));
        }
        match &self.metric {
            MetricPreset::YChannel { eps } if !(*eps > 0.0) => bad("metric.eps", format!("must be positive, got {eps}")),
            MetricPreset::Bumpy { modes, .. } if modes.is_empty() => bad("metric.modes", "must be non-empty".into()),
            _ => {}
        }
        match &self.damping {
            DampingPreset::Constant { c } if !c.is_finite() => bad("damping.c", "must be finite".into()),
            DampingPreset::SmoothWell { radius, depth, .. } => {
                if !(*radius > 0.0 && *radius < self.side / 2.0) {
                    bad("damping.radius", format!("must lie in (0, L/2), got {radius}"));
                }
                if !(*depth > 0.0) {
                    bad("damping.depth", format!("must be positive, got {depth}"));
                }
            }
            DampingPreset::Series => bad("damping.preset", "series damping cannot be configured from a file".into()),
            _ => {}
        }
        if let Some(t) = self.window.tau_max {
            if !(t > 0.0) {
                bad("window.tau_max", format!("must be positive, got {t}"));
            }
        }
        if self.dynamics.samples < 100 {
            bad("dynamics.samples", format!("need at least 100, got {}", self.dynamics.samples));
        }
        if !(self.dynamics.dt > 0.0 && self.dynamics.horizon > 0.0) {
            bad("dynamics", "dt and horizon must be positive".into());
        }
        if !(self.resolvent.c > 0.0) {
            bad("resolvent.c", format!("must be positive, got {}", self.resolvent.c));
        }
        if self.resolvent.re_values.iter().any(|&r| !(r > 1.0)) {
            bad("resolvent.re_values", "every value must exceed 1".into());
        }
        if !(self.cylinders.hbar > 0.0 && self.cylinders.hbar < 1.0) {
            bad("cylinders.hbar", format!("must lie in (0, 1), got {}", self.cylinders.hbar));
        }
        if self.cylinders.sumsplit_n < 16 || self.cylinders.sumsplit_n % 2 != 0 {
            bad("cylinders.sumsplit_n", format!("must be even and at least 16, got {}", self.cylinders.sumsplit_n));
        }
        if self.cylinders.blocks < 3 {
            bad("cylinders.blocks", format!("need at least 3 for a rate fit, got {}", self.cylinders.blocks));
        }
        if self.cylinders.invariance_t.abs() > 2.0 {
            bad("cylinders.invariance_t", "must satisfy |t| <= 2".into());
        }
        if !(self.decay.dt > 0.0 && self.decay.t_end > 0.0) || self.decay.every == 0 {
            bad("decay", "dt, t_end and every must be positive".into());
        }
        if let InitialData::Gaussian { width, .. } = self.decay.initial {
            if !(width > 0.0) {
                bad("decay.initial.width", format!("must be positive, got {width}"));
            }
        }
        errs
    }

    /// Whether the metric carries the hyperbolic orbit `{y = 0}`.
    pub fn has_hyperbolic_orbit(&self) -> bool {
        matches!(self.metric, MetricPreset::YChannel { .. })
    }
}
