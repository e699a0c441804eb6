//! Experiment configuration: TOML round-trip with strict key checking,
//! plus validation against the physical model before anything runs.

use serde::{Deserialize, Serialize};

use crate::dynamics::Objective;
use crate::flow::FlowConfig;
use crate::moea::MoeaConfig;
use crate::robustness::{CorrelationKernel, NoiseModel};
use crate::spin::{FluenceRegime, NoiseChannel, SpinSystem, TimeGrid};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemBlock {
    pub n_spins: usize,
    pub omegas: Vec<f64>,
    pub coupling: f64,
    pub total_time: f64,
    pub n_steps: usize,
}

impl SystemBlock {
    pub fn two_level() -> Self {
        SystemBlock {
            n_spins: 1,
            omegas: vec![20.0],
            coupling: 0.0,
            total_time: 1.0,
            n_steps: 100,
        }
    }

    pub fn four_level() -> Self {
        SystemBlock {
            n_spins: 2,
            omegas: vec![20.0, 24.0],
            coupling: 0.2,
            total_time: 6.0,
            n_steps: 100,
        }
    }

    pub fn system(&self) -> SpinSystem {
        SpinSystem {
            n_spins: self.n_spins,
            omegas: self.omegas.clone(),
            coupling: self.coupling,
        }
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid::new(self.total_time, self.n_steps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveChoice {
    P12,
    P14,
    SigmaX,
    SigmaX1,
    Hadamard,
    Cnot,
}

impl ObjectiveChoice {
    pub fn required_spins(self) -> usize {
        match self {
            ObjectiveChoice::P12 | ObjectiveChoice::SigmaX | ObjectiveChoice::Hadamard => 1,
            ObjectiveChoice::P14 | ObjectiveChoice::SigmaX1 | ObjectiveChoice::Cnot => 2,
        }
    }

    pub fn build(self, sys: &SpinSystem) -> Objective {
        match self {
            ObjectiveChoice::P12 => Objective::p12(sys),
            ObjectiveChoice::P14 => Objective::p14(sys),
            ObjectiveChoice::SigmaX => Objective::sigma_x(),
            ObjectiveChoice::SigmaX1 => Objective::sigma_x1(),
            ObjectiveChoice::Hadamard => Objective::hadamard(),
            ObjectiveChoice::Cnot => Objective::cnot(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveBlock {
    pub kind: ObjectiveChoice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseBlock {
    pub channel: NoiseChannel,
    pub kernel: CorrelationKernel,
    /// Re-evaluate K under a second correlation time for overlay tables.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlay_alpha: Option<f64>,
}

impl NoiseBlock {
    pub fn model(&self) -> NoiseModel {
        NoiseModel {
            channel: self.channel,
            kernel: self.kernel.clone(),
        }
    }

    pub fn overlay_model(&self) -> Option<NoiseModel> {
        let alpha = self.overlay_alpha?;
        let kernel = match self.kernel {
            CorrelationKernel::ExpDecay { a2, .. } => CorrelationKernel::ExpDecay { a2, alpha },
            _ => return None,
        };
        Some(NoiseModel {
            channel: self.channel,
            kernel,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowBlock {
    #[serde(default = "default_log_target")]
    pub log10_target_error: f64,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
}

fn default_log_target() -> f64 {
    -7.5
}

fn default_max_steps() -> usize {
    500_000
}

impl Default for FlowBlock {
    fn default() -> Self {
        FlowBlock {
            log10_target_error: default_log_target(),
            max_steps: default_max_steps(),
        }
    }
}

impl FlowBlock {
    pub fn flow_config(&self) -> FlowConfig {
        FlowConfig {
            target_error: 10f64.powf(self.log10_target_error),
            max_steps: self.max_steps,
            ..FlowConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerBlock {
    /// A single gradient-flow trajectory from a random start.
    Dmorph {
        regime: FluenceRegime,
        n_modes: usize,
        #[serde(default)]
        flow: FlowBlock,
    },
    /// An ensemble of gradient-flow runs with front/envelope aggregation.
    Mc {
        n_runs: usize,
        regime: FluenceRegime,
        n_modes: usize,
        #[serde(default)]
        flow: FlowBlock,
    },
    Moea {
        population: usize,
        generations: usize,
        regime: FluenceRegime,
        n_modes: usize,
        #[serde(default = "default_initial_step")]
        initial_step: f64,
        #[serde(default)]
        snapshot_stride: usize,
    },
}

fn default_initial_step() -> f64 {
    0.1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Delimiter {
    Tab,
    Comma,
}

impl Delimiter {
    pub fn as_str(self) -> &'static str {
        match self {
            Delimiter::Tab => "\t",
            Delimiter::Comma => ",",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    pub directory: String,
    #[serde(default = "default_delimiter")]
    pub delimiter: Delimiter,
    #[serde(default = "default_true")]
    pub plot_scripts: bool,
}

fn default_delimiter() -> Delimiter {
    Delimiter::Tab
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub system: SystemBlock,
    pub objective: ObjectiveBlock,
    pub noise: NoiseBlock,
    pub optimizer: OptimizerBlock,
    pub output: OutputBlock,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.system;
        if s.n_spins == 0 || s.n_spins > 2 {
            return Err(Error::Config(format!(
                "system.n_spins must be 1 or 2, got {}",
                s.n_spins
            )));
        }
        if s.omegas.len() != s.n_spins {
            return Err(Error::Config(format!(
                "system.omegas has {} entries for {} spins",
                s.omegas.len(),
                s.n_spins
            )));
        }
        if s.n_steps == 0 || !(s.total_time > 0.0) {
            return Err(Error::Config(
                "system grid needs n_steps >= 1 and total_time > 0".into(),
            ));
        }
        let need = self.objective.kind.required_spins();
        if need != s.n_spins {
            return Err(Error::Config(format!(
                "objective.kind {:?} needs a {}-spin system, config has {}",
                self.objective.kind, need, s.n_spins
            )));
        }
        match &self.noise.kernel {
            CorrelationKernel::ExpDecay { a2, alpha } => {
                if !(*a2 > 0.0) || !(*alpha > 0.0) {
                    return Err(Error::Config("noise.kernel needs a2 > 0 and alpha > 0".into()));
                }
            }
            CorrelationKernel::White { a2 } => {
                if !(*a2 > 0.0) {
                    return Err(Error::Config("noise.kernel needs a2 > 0".into()));
                }
            }
            CorrelationKernel::Custom { table, n } => {
                if table.len() != n * n {
                    return Err(Error::Config("noise.kernel table is not n x n".into()));
                }
                if *n != s.n_steps {
                    return Err(Error::Config(
                        "custom kernel size must match system.n_steps".into(),
                    ));
                }
            }
        }
        if let Some(alpha) = self.noise.overlay_alpha {
            if !(alpha > 0.0) {
                return Err(Error::Config("noise.overlay_alpha must be positive".into()));
            }
            if !matches!(self.noise.kernel, CorrelationKernel::ExpDecay { .. }) {
                return Err(Error::Config(
                    "noise.overlay_alpha requires an expdecay kernel".into(),
                ));
            }
        }
        let cap = s.system().max_fourier_modes();
        let (n_modes, n_runs_ok) = match &self.optimizer {
            OptimizerBlock::Dmorph { n_modes, .. } => (*n_modes, true),
            OptimizerBlock::Mc { n_modes, n_runs, .. } => (*n_modes, *n_runs >= 1),
            OptimizerBlock::Moea {
                n_modes, population, ..
            } => (*n_modes, *population >= 2),
        };
        if n_modes == 0 || n_modes > cap {
            return Err(Error::Config(format!(
                "optimizer.n_modes {n_modes} outside 1..={cap}"
            )));
        }
        if !n_runs_ok {
            return Err(Error::Config(
                "optimizer needs n_runs >= 1 (mc) or population >= 2 (moea)".into(),
            ));
        }
        if self.output.directory.is_empty() {
            return Err(Error::Config("output.directory must be nonempty".into()));
        }
        Ok(())
    }

    pub fn moea_config(&self) -> Option<MoeaConfig> {
        if let OptimizerBlock::Moea {
            population,
            generations,
            regime,
            n_modes,
            initial_step,
            snapshot_stride,
        } = &self.optimizer
        {
            Some(MoeaConfig {
                population: *population,
                generations: *generations,
                regime: *regime,
                n_modes: *n_modes,
                seed: self.seed,
                initial_step: *initial_step,
                snapshot_stride: *snapshot_stride,
            })
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_config() -> ExperimentConfig {
        ExperimentConfig {
            seed: 42,
            system: SystemBlock::two_level(),
            objective: ObjectiveBlock {
                kind: ObjectiveChoice::P12,
            },
            noise: NoiseBlock {
                channel: NoiseChannel::Field,
                kernel: CorrelationKernel::default_exp(),
                overlay_alpha: Some(2.0),
            },
            optimizer: OptimizerBlock::Mc {
                n_runs: 100,
                regime: FluenceRegime::Low,
                n_modes: 10,
                flow: FlowBlock::default(),
            },
            output: OutputBlock {
                directory: "out".into(),
                delimiter: Delimiter::Tab,
                plot_scripts: true,
            },
        }
    }

    #[test]
    fn toml_round_trip_lossless() {
        let cfg = base_config();
        let text = cfg.to_toml();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
        // And once more through serialization.
        assert_eq!(text, back.to_toml());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut text = base_config().to_toml();
        text.push_str("\n[extra]\nwat = 1\n");
        assert!(ExperimentConfig::from_toml(&text).is_err());
        let text2 = base_config().to_toml().replace("seed = 42", "seed = 42\nbogus = 1");
        assert!(ExperimentConfig::from_toml(&text2).is_err());
    }

    #[test]
    fn parse_error_names_line() {
        let err = ExperimentConfig::from_toml("seed = \"not a number\"").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line"), "no line info in: {msg}");
    }

    #[test]
    fn objective_system_mismatch_rejected() {
        let mut cfg = base_config();
        cfg.objective.kind = ObjectiveChoice::Cnot;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("2-spin"));
    }

    #[test]
    fn omega_count_checked() {
        let mut cfg = base_config();
        cfg.system.omegas = vec![20.0, 24.0];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn mode_cap_enforced() {
        let mut cfg = base_config();
        cfg.optimizer = OptimizerBlock::Mc {
            n_runs: 10,
            regime: FluenceRegime::Low,
            n_modes: 11,
            flow: FlowBlock::default(),
        };
        assert!(cfg.validate().is_err());
        let mut cfg4 = base_config();
        cfg4.system = SystemBlock::four_level();
        cfg4.objective.kind = ObjectiveChoice::Cnot;
        cfg4.optimizer = OptimizerBlock::Mc {
            n_runs: 10,
            regime: FluenceRegime::Low,
            n_modes: 20,
            flow: FlowBlock::default(),
        };
        cfg4.validate().unwrap();
    }

    #[test]
    fn overlay_model_swaps_alpha_only() {
        let cfg = base_config();
        let overlay = cfg.noise.overlay_model().unwrap();
        match overlay.kernel {
            CorrelationKernel::ExpDecay { a2, alpha } => {
                assert_eq!(a2, 1e-4);
                assert_eq!(alpha, 2.0);
            }
            _ => panic!("overlay kept the kernel form"),
        }
    }

    #[test]
    fn shipped_presets_parse_and_validate() {
        let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("../../presets");
        let mut seen = 0;
        let mut stack = vec![root];
        while let Some(dir) = stack.pop() {
            for entry in std::fs::read_dir(dir).unwrap() {
                let path = entry.unwrap().path();
                if path.is_dir() {
                    stack.push(path);
                } else if path.extension().is_some_and(|e| e == "toml") {
                    let text = std::fs::read_to_string(&path).unwrap();
                    ExperimentConfig::from_toml(&text)
                        .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
                    seen += 1;
                }
            }
        }
        assert!(seen >= 16, "only found {seen} presets");
    }

    #[test]
    fn flow_block_target_error() {
        let fb = FlowBlock::default();
        assert!((fb.flow_config().target_error.log10() + 7.5).abs() < 1e-12);
    }
}
