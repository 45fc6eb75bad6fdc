//! Experiment configuration: one TOML file with dotted keys mirroring the
//! library types, e.g. `sim.p_gen = 0.09` or `qual.level_window_ms = 100`.

use std::path::{Path, PathBuf};

use photon_server::qed::{build_model, propagate, DensityState, PulseShape, QedParams, UU};
use photon_server::qualifier::{derive_loss_threshold, QualifierConfig, LOSS_CONFIDENCE};
use photon_server::simulator::{EmissionTiming, SimConfig};
use photon_server::{Format, PulseSchedule};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Where simulated photons get their time inside the trigger window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimingSource {
    #[default]
    Uniform,
    /// Follow the cavity output flux of the solved trigger pulse.
    Qed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub dt_ns: f64,
    /// Fit `qed.coupling_scale` so one pulse emits with this probability.
    pub fit_target: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { dt_ns: 1.0, fit_target: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub fine_resolution_ns: u64,
    pub fine_span_ns: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig { fine_resolution_ns: 200, fine_span_ns: 30_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub n_runs: u64,
    /// Run `i` is simulated with seed `seed + i`.
    pub seed: u64,
    pub out: PathBuf,
    pub format: Format,
    pub emission_timing: TimingSource,
    pub sim: SimConfig,
    pub schedule: PulseSchedule,
    pub qual: QualifierConfig,
    pub analysis: AnalysisConfig,
    pub qed: QedParams,
    pub pulse: PulseShape,
    pub solver: SolverConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n_runs: 10,
            seed: 0,
            out: PathBuf::from("out"),
            format: Format::Ptag,
            emission_timing: TimingSource::Uniform,
            sim: SimConfig::default(),
            schedule: PulseSchedule::default(),
            qual: QualifierConfig::default(),
            analysis: AnalysisConfig::default(),
            qed: QedParams::default(),
            pulse: PulseShape::default(),
            solver: SolverConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a config. Unknown keys are errors. Unless
    /// `qual.loss_max_counts` is given, the loss threshold is re-derived from
    /// `sim.background_rate`.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        let loss_given =
            table.get("qual").and_then(|q| q.as_table()).is_some_and(|q| q.contains_key("loss_max_counts"));
        let mut cfg: ExperimentConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        if !loss_given {
            cfg.derive_loss_threshold();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn derive_loss_threshold(&mut self) {
        self.qual.loss_max_counts =
            derive_loss_threshold(self.sim.background_rate, self.qual.loss_window_ms, LOSS_CONFIDENCE);
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.n_runs == 0 {
            return bad("n_runs must be at least 1".into());
        }
        if let Err(e) = self.schedule.validate() {
            return bad(e.to_string());
        }
        if let Err(e) = self.sim.validate(&self.schedule) {
            return bad(e.to_string());
        }
        if let Err(e) = self.qual.validate() {
            return bad(e.to_string());
        }
        if let Err(e) = self.qed.validate().and_then(|_| self.pulse.validate()) {
            return bad(e.to_string());
        }
        let a = &self.analysis;
        if a.fine_resolution_ns == 0 || a.fine_span_ns == 0 || !a.fine_span_ns.is_multiple_of(a.fine_resolution_ns) {
            return bad("analysis.fine_resolution_ns must divide analysis.fine_span_ns".into());
        }
        if !(self.solver.dt_ns > 0.0) {
            return bad("solver.dt_ns must be positive".into());
        }
        if let Some(t) = self.solver.fit_target {
            if !(t > 0.0 && t < 1.0) {
                return bad(format!("solver.fit_target {t} must lie in (0, 1)"));
            }
        }
        Ok(())
    }

    /// Simulator settings with the emission timing resolved.
    pub fn sim_config(&self) -> Result<SimConfig, CliError> {
        let mut sim = self.sim.clone();
        if self.emission_timing == TimingSource::Qed {
            let traj = build_model(self.qed, self.pulse)
                .and_then(|m| propagate(&m, DensityState::basis(UU), self.solver.dt_ns, self.pulse.duration_ns))
                .map_err(|e| CliError::Analysis(format!("emission profile: {e}")))?;
            sim.emission_timing = EmissionTiming::from_trajectory(&traj);
        }
        Ok(sim)
    }

    /// The config as written to manifests: everything but the output path.
    pub fn to_record(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = v.as_object_mut() {
            map.remove("out");
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn dotted_keys_reach_nested_fields() {
        let cfg = ExperimentConfig::from_toml(
            "n_runs = 3\nsim.p_gen = 0.05\nsim.initial_atoms = \"pinned(1)\"\nqual.level_window_ms = 50\nformat = \"csv\"",
        )
        .unwrap();
        assert_eq!(cfg.n_runs, 3);
        assert_eq!(cfg.sim.p_gen, 0.05);
        assert_eq!(cfg.qual.level_window_ms, 50.0);
        assert_eq!(cfg.format, Format::Csv);
    }

    #[test]
    fn unknown_keys_are_errors() {
        for text in ["sim.p_gen_typo = 0.1", "bogus = 1", "qual.loss_window = 30"] {
            assert!(matches!(ExperimentConfig::from_toml(text), Err(CliError::Config(_))), "{text}");
        }
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in ["n_runs = 0", "sim.p_gen = 1.5", "qual.level_band = [6.0, 2.0]", "solver.fit_target = 2.0"] {
            assert!(matches!(ExperimentConfig::from_toml(text), Err(CliError::Config(_))), "{text}");
        }
    }

    #[test]
    fn loss_threshold_follows_background_unless_pinned() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap().qual.loss_max_counts, 6);
        let quiet = ExperimentConfig::from_toml("sim.background_rate = 0.0").unwrap();
        assert_eq!(quiet.qual.loss_max_counts, 0);
        let pinned = ExperimentConfig::from_toml("sim.background_rate = 0.0\nqual.loss_max_counts = 3").unwrap();
        assert_eq!(pinned.qual.loss_max_counts, 3);
    }
}
