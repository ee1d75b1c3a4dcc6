//! Experiment configuration. Times are given in units of the domain period
//! `T = L / c0` so the file reads like the experiment description.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::WindowConfig;
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::seqmodel::{Architecture, RolloutMode};
use crate::training::{OptimizerSchedule, RegularizerConfig};
use crate::wavegen::{BoundaryKind, DomainSpec, GridSpec, PulseShape, SourceSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    HannBurst,
    Impulsive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceConfig {
    /// Metres from the domain centre.
    pub location: f64,
    pub onset_periods: f64,
    /// Gaussian standard deviation in metres.
    pub width: f64,
    pub kind: SourceKind,
    pub burst_periods: f64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig {
            location: 0.0,
            onset_periods: 0.25,
            width: 2.0,
            kind: SourceKind::HannBurst,
            burst_periods: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    /// Spatial points of the ML mesh.
    pub nx_ml: usize,
    /// ML time step in periods.
    pub dt_ml_periods: f64,
    /// The solver mesh is this many times finer in space and time.
    pub refinement: usize,
    pub duration_periods: f64,
    pub boundary: BoundaryKind,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            nx_ml: 64,
            dt_ml_periods: 0.0127,
            refinement: 16,
            duration_periods: 2.48,
            boundary: BoundaryKind::Rigid,
        }
    }
}

/// A held-out pair identified by the time of its last input state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseConfig {
    pub name: String,
    pub input_end_periods: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub window: WindowConfig,
    pub train_windows: usize,
    /// Peak pressure of the training windows, in pascal.
    pub p0: f64,
    pub cases: Vec<CaseConfig>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            window: WindowConfig { tx: 9, stride: 9 },
            train_windows: 13,
            p0: 1e-2,
            cases: vec![
                CaseConfig {
                    name: "case1".into(),
                    input_end_periods: 2.35,
                },
                CaseConfig {
                    name: "case2".into(),
                    input_end_periods: 1.85,
                },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub rollout: RolloutMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![64, 64],
            rollout: RolloutMode::Stateful,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Concurrent runs.
    pub workers: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            lambdas: vec![0.0, 3.8e-5, 8.5e-5, 1.7e-4, 3.4e-4],
            seeds: vec![1, 2, 3, 4, 5],
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub domain: DomainSpec,
    pub source: SourceConfig,
    pub grid: GridConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub regularizer: RegularizerConfig,
    pub optimizer: OptimizerSchedule,
    pub sweep: SweepConfig,
    pub seed: u64,
    pub parallel: bool,
    pub output_root: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            domain: DomainSpec {
                length: 100.0,
                wave_speed: 1500.0,
            },
            source: SourceConfig::default(),
            grid: GridConfig::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            regularizer: RegularizerConfig::with_lambda(8.5e-5),
            optimizer: OptimizerSchedule {
                batch_size: Some(1),
                ..OptimizerSchedule::default()
            },
            sweep: SweepConfig::default(),
            seed: 1,
            parallel: true,
            output_root: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn exec_mode(&self) -> ExecMode {
        if self.parallel {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        }
    }

    pub fn period(&self) -> f64 {
        self.domain.period()
    }

    pub fn source_spec(&self) -> SourceSpec {
        let t = self.period();
        SourceSpec {
            location: self.source.location,
            onset: self.source.onset_periods * t,
            amplitude: 1.0,
            width: self.source.width,
            shape: match self.source.kind {
                SourceKind::HannBurst => PulseShape::HannBurst {
                    duration: self.source.burst_periods * t,
                },
                SourceKind::Impulsive => PulseShape::Impulsive,
            },
        }
    }

    /// Time steps of the ML mesh covering the configured duration.
    pub fn nt_ml(&self) -> usize {
        (self.grid.duration_periods / self.grid.dt_ml_periods).floor() as usize + 1
    }

    pub fn ml_grid(&self) -> Result<GridSpec> {
        GridSpec::for_domain(
            &self.domain,
            self.grid.nx_ml,
            self.nt_ml(),
            self.grid.dt_ml_periods * self.period(),
        )
    }

    pub fn fine_grid(&self) -> Result<GridSpec> {
        let r = self.grid.refinement;
        GridSpec::for_domain(
            &self.domain,
            (self.grid.nx_ml - 1) * r + 1,
            (self.nt_ml() - 1) * r + 1,
            self.grid.dt_ml_periods * self.period() / r as f64,
        )
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            nx: self.grid.nx_ml,
            hidden: self.model.hidden.clone(),
            rollout: self.model.rollout,
        }
    }

    /// Copy whose single-run fields describe one point of the sweep grid.
    pub fn for_run(&self, lambda: f64, seed: u64) -> ExperimentConfig {
        let mut c = self.clone();
        c.regularizer.lambda = lambda;
        c.seed = seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        self.source_spec().validate(&self.domain)?;
        if self.grid.nx_ml < 3 || self.grid.refinement == 0 {
            return Err(Error::Config("need nx_ml >= 3 and refinement >= 1".into()));
        }
        if !(self.grid.dt_ml_periods > 0.0) || !(self.grid.duration_periods > 0.0) {
            return Err(Error::Config("time step and duration must be positive".into()));
        }
        let fine = self.fine_grid()?;
        let c = fine.courant_number(&self.domain);
        if c > 1.0 {
            return Err(Error::Unstable { courant: c });
        }
        self.data.window.validate()?;
        if !(self.data.p0 > 0.0) {
            return Err(Error::Config("p0 must be positive".into()));
        }
        if self.data.train_windows == 0 {
            return Err(Error::Config("need at least one training window".into()));
        }
        let w = &self.data.window;
        let nt = self.nt_ml();
        let needed = (self.data.train_windows - 1) * w.stride + 2 * w.tx;
        if needed > nt {
            return Err(Error::Config(format!(
                "{} training windows need {needed} ML steps, the field has {nt}",
                self.data.train_windows
            )));
        }
        for case in &self.data.cases {
            let origin = self.case_origin(case)?;
            if origin + 2 * w.tx > nt {
                return Err(Error::Config(format!(
                    "test case {} runs past the end of the field",
                    case.name
                )));
            }
        }
        let mut names: Vec<&str> = self.data.cases.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.data.cases.len() {
            return Err(Error::Config("test case names must be unique".into()));
        }
        self.architecture().validate()?;
        self.regularizer.validate()?;
        self.optimizer.validate()?;
        if self.sweep.workers == 0 {
            return Err(Error::Config("sweep needs at least one worker".into()));
        }
        if let Some(l) = self.sweep.lambdas.iter().find(|l| !(**l >= 0.0)) {
            return Err(Error::Config(format!("sweep lambda {l} is negative")));
        }
        Ok(())
    }

    /// ML step of the first input state of a held-out case.
    pub fn case_origin(&self, case: &CaseConfig) -> Result<usize> {
        let end = (case.input_end_periods / self.grid.dt_ml_periods).round();
        let tx = self.data.window.tx as f64;
        if !(end >= tx - 1.0) {
            return Err(Error::Config(format!(
                "test case {} ends before a full input window",
                case.name
            )));
        }
        Ok((end - (tx - 1.0)) as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn default_meshes_are_consistent() {
        let c = ExperimentConfig::default();
        let ml = c.ml_grid().unwrap();
        let fine = c.fine_grid().unwrap();
        assert_eq!(fine.nx, 1009);
        assert!((fine.dx * 16.0 - ml.dx).abs() < 1e-12);
        assert!((fine.dt * 16.0 - ml.dt).abs() < 1e-15);
        let courant = fine.courant_number(&c.domain);
        assert!(courant > 0.7 && courant <= 1.0, "courant {courant}");
        // Thirteen stride-9 windows fit before the held-out cases.
        assert_eq!(c.nt_ml(), 196);
        let last_train_target_end = 12 * 9 + 18;
        assert!(c.data.cases.iter().all(|k| c.case_origin(k).unwrap() >= last_train_target_end));
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let b = a.for_run(0.0, 1);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn invalid_configs_are_config_errors() {
        let mut c = ExperimentConfig::default();
        c.grid.nx_ml = 128; // Courant > 1 at this time step
        assert!(matches!(c.validate(), Err(Error::Unstable { .. })));
        let mut c = ExperimentConfig::default();
        c.data.train_windows = 40;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ExperimentConfig::default();
        c.data.cases[1].name = "case1".into();
        assert!(c.validate().is_err());
        assert!(matches!(
            ExperimentConfig::from_toml("domain = 3"),
            Err(Error::Config(_))
        ));
    }
}
