use qho_kam::floquet::Integrator;
use qho_kam::kam::{default_k_store, ScheduleMode};
use qho_kam::potential::{PotentialSpec, QuadRule};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub potential: PotentialSpec,
    pub basis: BasisConfig,
    pub schedule: ScheduleConfig,
    pub frequency: FrequencyConfig,
    #[serde(default)]
    pub screen: ScreenConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisConfig {
    pub w_max: u32,
    #[serde(default)]
    pub quad_rule: QuadRule,
    pub quad_order: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Target `[Q₀]_β^{σ₀}`; the assembled potential is rescaled to it.
    pub eps0: f64,
    /// Defaults to the potential's strip width.
    pub sigma0: Option<f64>,
    pub beta: f64,
    /// Defaults to `n + d + 1`.
    pub alpha: Option<f64>,
    #[serde(default = "default_m_max")]
    pub m_max: usize,
    #[serde(default)]
    pub mode: ScheduleMode,
    pub k_store: Option<u32>,
    pub kappa_override: Option<f64>,
}

fn default_m_max() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrequencyConfig {
    pub omega: Vec<f64>,
    /// First-Melnikov threshold at `ω`; defaults to `2γ₁`.
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScreenConfig {
    /// Grid points on `[0, 2π)ⁿ` (total, not per axis).
    pub points: Option<usize>,
    pub k_max: Option<u32>,
    #[serde(default = "default_screen_gamma")]
    pub gamma: f64,
}

fn default_screen_gamma() -> f64 {
    1e-3
}

impl Default for ScreenConfig {
    fn default() -> Self {
        ScreenConfig {
            points: None,
            k_max: None,
            gamma: default_screen_gamma(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    #[serde(default = "default_t_conjugacy")]
    pub t_conjugacy: f64,
    #[serde(default = "default_t_sobolev")]
    pub t_sobolev: f64,
    pub dt: Option<f64>,
    #[serde(default = "default_sample_every")]
    pub sample_every: usize,
    #[serde(default = "default_quasi_energy_range")]
    pub quasi_energy_range: u32,
    #[serde(default)]
    pub integrator: Integrator,
}

fn default_t_conjugacy() -> f64 {
    100.0
}
fn default_t_sobolev() -> f64 {
    1000.0
}
fn default_sample_every() -> usize {
    50
}
fn default_quasi_energy_range() -> u32 {
    2
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            t_conjugacy: default_t_conjugacy(),
            t_sobolev: default_t_sobolev(),
            dt: None,
            sample_every: default_sample_every(),
            quasi_energy_range: default_quasi_energy_range(),
            integrator: Integrator::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<String>,
}

/// A validation failure tied to a field path such as `schedule.beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigErrors(pub Vec<FieldError>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "invalid configuration:")?;
        for e in &self.0 {
            writeln!(f, "  {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(s)?)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        Self::from_toml_str(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
    }

    pub fn torus_dim(&self) -> usize {
        self.potential.torus_dim
    }

    pub fn alpha(&self) -> f64 {
        self.schedule
            .alpha
            .unwrap_or((self.potential.torus_dim + self.potential.dimension + 1) as f64)
    }

    pub fn sigma0(&self) -> f64 {
        self.schedule.sigma0.unwrap_or(self.potential.sigma)
    }

    pub fn k_store(&self) -> u32 {
        self.schedule.k_store.unwrap_or_else(|| default_k_store(self.torus_dim()))
    }

    /// Fills every optional field with the value the pipeline will use.
    pub fn resolved(&self) -> RunConfig {
        let mut c = self.clone();
        c.schedule.alpha = Some(self.alpha());
        c.schedule.sigma0 = Some(self.sigma0());
        c.schedule.k_store = Some(self.k_store());
        c.screen.k_max.get_or_insert(self.k_store());
        c.screen
            .points
            .get_or_insert_with(|| qho_kam::melnikov::default_grid_points(self.torus_dim()));
        c
    }

    pub fn validate(&self) -> Result<(), ConfigErrors> {
        let mut errs = Vec::new();
        let mut push = |path: &str, message: String| {
            errs.push(FieldError {
                path: path.into(),
                message,
            })
        };
        if let Err(e) = self.potential.validate() {
            push("potential", e.to_string());
        }
        let d = self.potential.dimension;
        if d >= 1 && (self.basis.w_max < d as u32 || (self.basis.w_max - d as u32) % 2 != 0) {
            push("basis.w_max", format!("must be ≥ d = {d} with the parity of d"));
        }
        let s = &self.schedule;
        if !(0.0..1.0).contains(&s.eps0) {
            push("schedule.eps0", format!("{} is outside [0, 1)", s.eps0));
        }
        if let Some(sigma) = s.sigma0 {
            if !(sigma > 0.0) {
                push("schedule.sigma0", format!("{sigma} must be positive"));
            }
        }
        let alpha = self.alpha();
        if s.beta < alpha / 2.0 {
            push(
                "schedule.beta",
                format!("β = {} must be at least α/2 = {} (α = n + d + 1 for λ = w)", s.beta, alpha / 2.0),
            );
        }
        if s.m_max == 0 {
            push("schedule.m_max", "must be at least 1".into());
        }
        if let Some(k) = s.kappa_override {
            if !(k > 0.0) {
                push("schedule.kappa_override", format!("{k} must be positive"));
            }
        }
        if self.frequency.omega.len() != self.potential.torus_dim {
            push(
                "frequency.omega",
                format!("has {} entries, the torus has dimension {}", self.frequency.omega.len(), self.potential.torus_dim),
            );
        }
        if self.frequency.omega.iter().any(|w| !w.is_finite()) {
            push("frequency.omega", "entries must be finite".into());
        }
        if !(self.screen.gamma > 0.0) {
            push("screen.gamma", "must be positive".into());
        }
        let v = &self.verify;
        if !(v.t_conjugacy >= 0.0) || !(v.t_sobolev >= 0.0) {
            push("verify", "horizons must be non-negative".into());
        }
        if v.dt.is_some_and(|dt| !(dt > 0.0)) {
            push("verify.dt", "must be positive".into());
        }
        if v.sample_every == 0 {
            push("verify.sample_every", "must be at least 1".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigErrors(errs))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const REFERENCE: &str = include_str!("../reference.toml");

    #[test]
    fn reference_config_is_valid() {
        let c = RunConfig::from_toml_str(REFERENCE).unwrap();
        c.validate().unwrap();
        assert_eq!(c.alpha(), 3.0);
    }

    #[test]
    fn small_beta_is_reported_with_its_path() {
        let mut c = RunConfig::from_toml_str(REFERENCE).unwrap();
        c.schedule.beta = 1.0;
        c.frequency.omega = vec![0.5, 0.7];
        let errs = c.validate().unwrap_err();
        let paths: Vec<&str> = errs.0.iter().map(|e| e.path.as_str()).collect();
        assert_eq!(paths, ["schedule.beta", "frequency.omega"]);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = REFERENCE.replace("[schedule]", "[schedule]\nepsilon = 3");
        assert!(RunConfig::from_toml_str(&text).is_err());
    }
}
