use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::barrier::ParamEstimate;
use crate::error::{ensure_finite, Error, Result};
use crate::plant::{DisturbanceKind, DisturbanceSpec, TruePlant};
use crate::safety_filter::{FilterConfig, FilterMode, InputBox};
use crate::scenario::ScenarioConfig;
use crate::smid::ParamBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantSection {
    /// `[k, b]` of the real contact.
    pub theta_true: Vec<f64>,
    pub m_o: f64,
}

impl Default for PlantSection {
    fn default() -> Self {
        PlantSection {
            theta_true: vec![1400.0, 70.0],
            m_o: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DisturbanceSection {
    /// True bound on the input disturbance (N).
    pub delta: f64,
    pub kind: DisturbanceKind,
    pub frequency: f64,
}

impl Default for DisturbanceSection {
    fn default() -> Self {
        DisturbanceSection {
            delta: 5e-4,
            kind: DisturbanceKind::SinusoidPlusUniform,
            frequency: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorSection {
    pub theta_hat0: Vec<f64>,
    /// Diagonal of the adaptation gain.
    pub gamma: Vec<f64>,
    /// Prior parameter box; the maximum possible error is read off this box.
    pub prior_lower: Vec<f64>,
    pub prior_upper: Vec<f64>,
}

impl Default for EstimatorSection {
    fn default() -> Self {
        EstimatorSection {
            theta_hat0: vec![1000.0, 10.0],
            gamma: vec![1.0e6, 1.0e6],
            prior_lower: vec![900.0, 5.0],
            prior_upper: vec![1500.0, 100.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    pub alpha0: f64,
    pub c: f64,
    /// Disturbance bound assumed by the filter (N).
    pub delta: f64,
    pub issf_epsilon: f64,
    pub u_min: Option<f64>,
    pub u_max: Option<f64>,
}

impl Default for FilterSection {
    fn default() -> Self {
        FilterSection {
            alpha0: 20.0,
            c: 0.0,
            delta: 0.1,
            issf_epsilon: 1.0,
            u_min: None,
            u_max: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeSource {
    /// Exact state derivative of the simulated plant.
    True,
    /// `(x[j+1] - x[j-1]) / (2 dt)`.
    CentralDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmidSection {
    pub batch: usize,
    pub precision: f64,
    pub derivative: DerivativeSource,
}

impl Default for SmidSection {
    fn default() -> Self {
        SmidSection {
            batch: 5,
            precision: 0.0008,
            derivative: DerivativeSource::True,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub dt: f64,
    /// Defaults to one lap of the tool path.
    pub duration: Option<f64>,
    pub seed: u64,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            dt: 1e-3,
            duration: None,
            seed: 0,
        }
    }
}

/// Experiment description, read from TOML with one table per section.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub plant: PlantSection,
    pub disturbance: DisturbanceSection,
    pub scenario: ScenarioConfig,
    pub estimator: EstimatorSection,
    pub filter: FilterSection,
    pub smid: SmidSection,
    pub sim: SimSection,
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::InvalidArgument(msg) => Error::Config(msg),
            other => other,
        };
        self.plant().map_err(cfg_err)?;
        self.prior_box().map_err(cfg_err)?;
        self.initial_estimate().map_err(cfg_err)?;
        self.scenario.validate()?;
        for mode in FilterMode::ALL {
            self.filter_config(mode).and_then(|f| f.validate()).map_err(cfg_err)?;
        }
        ensure_finite("disturbance", &[self.disturbance.delta, self.disturbance.frequency]).map_err(cfg_err)?;
        if self.disturbance.delta < 0.0 {
            return Err(Error::Config("disturbance delta must be >= 0".into()));
        }
        if self.smid.batch == 0 {
            return Err(Error::Config("smid batch must be at least 1".into()));
        }
        if !(self.smid.precision > 0.0 && self.smid.precision.is_finite()) {
            return Err(Error::Config("smid precision must be positive".into()));
        }
        if !(self.sim.dt > 0.0 && self.sim.dt.is_finite()) {
            return Err(Error::Config("dt must be positive".into()));
        }
        if let Some(d) = self.sim.duration {
            if !(d >= 0.0 && d.is_finite()) {
                return Err(Error::Config("duration must be >= 0".into()));
            }
        }
        let prior = self.prior_box()?;
        if !prior.contains(&self.estimator.theta_hat0) {
            return Err(Error::Config("theta_hat0 lies outside the prior box".into()));
        }
        Ok(())
    }

    pub fn plant(&self) -> Result<TruePlant> {
        if self.plant.theta_true.len() != 2 {
            return Err(Error::Config("the simulator drives one axis; theta_true needs [k, b]".into()));
        }
        TruePlant::from_theta(&self.plant.theta_true, self.plant.m_o)
    }

    pub fn prior_box(&self) -> Result<ParamBox> {
        let e = &self.estimator;
        if e.prior_lower.len() != 2 {
            return Err(Error::Config("prior box needs two entries".into()));
        }
        ParamBox::new(e.prior_lower.clone(), e.prior_upper.clone())
    }

    pub fn initial_estimate(&self) -> Result<ParamEstimate> {
        let e = &self.estimator;
        if e.theta_hat0.len() != 2 || e.gamma.len() != 2 {
            return Err(Error::Config("theta_hat0 and gamma need two entries".into()));
        }
        let prior = self.prior_box()?;
        let vartheta = crate::smid::vartheta_from_box(&prior, &e.theta_hat0)?;
        ParamEstimate::with_diagonal_gain(e.theta_hat0.clone(), &e.gamma, vartheta)
    }

    pub fn filter_config(&self, mode: FilterMode) -> Result<FilterConfig> {
        let f = &self.filter;
        let input_box = match (f.u_min, f.u_max) {
            (None, None) => None,
            (lo, hi) => Some(InputBox::new(
                vec![lo.unwrap_or(f64::NEG_INFINITY)],
                vec![hi.unwrap_or(f64::INFINITY)],
            )?),
        };
        Ok(FilterConfig {
            mode,
            alpha0: f.alpha0,
            c: f.c,
            delta: f.delta,
            issf_epsilon: f.issf_epsilon,
            input_box,
        })
    }

    pub fn disturbance(&self) -> DisturbanceSpec {
        DisturbanceSpec {
            delta: self.disturbance.delta,
            kind: self.disturbance.kind,
            frequency: self.disturbance.frequency,
            seed: self.sim.seed,
        }
    }

    pub fn duration(&self) -> f64 {
        self.sim.duration.unwrap_or_else(|| self.scenario.lap_time())
    }

    pub fn tick_count(&self) -> usize {
        (self.duration() / self.sim.dt).round() as usize
    }
}
