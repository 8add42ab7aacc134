//! Run configuration (TOML). Every section and key is optional; unknown keys
//! are rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use latentfoil::dataset::NacaSweep;
use latentfoil::diffusion::{ScheduleSpec, TrainConfig};
use latentfoil::geometry::{naca4, parse_coordinates, AirfoilShape, CORPUS_DAMPING, FIT_POINTS};
use latentfoil::optimizer::{Mode, SolverConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub geometry: GeometryConfig,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub sample: SampleConfig,
    pub analysis: AnalysisConfig,
    pub problem: ProblemConfig,
    pub solver: SolverConfig,
    pub paths: PathsConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    /// Design dimension, half per surface.
    pub d: usize,
    pub n_panels: usize,
    /// NACA 4-digit code (`0012`, `naca2412`) or a coordinate file.
    pub base: String,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            d: 40,
            n_panels: 200,
            base: "0012".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub sweep: NacaSweep,
    /// Extra `.dat` files to fit alongside the synthetic sweep.
    pub dat_dir: Option<PathBuf>,
    /// Relative singular-value cutoff of the bump fit.
    pub fit_damping: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            sweep: NacaSweep::default(),
            dat_dir: None,
            fit_damping: CORPUS_DAMPING,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub infer_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        let s = ScheduleSpec::default();
        Self {
            timesteps: s.timesteps,
            beta_start: s.beta_start,
            beta_end: s.beta_end,
            infer_steps: latentfoil::diffusion::DEFAULT_INFER_STEPS,
        }
    }
}

impl ScheduleConfig {
    pub fn spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            timesteps: self.timesteps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
    /// Weight initialization seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = latentfoil::denoiser::DenoiserConfig::default();
        Self {
            channels: d.channels,
            depth: d.depth,
            time_embed_dim: d.time_embed_dim,
            seed: d.seed,
        }
    }
}

/// Desk-scale defaults; `configs/long.toml` holds the long run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 8,
            steps: 2000,
            ema_decay: 0.995,
            seed: 0,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            batch_size: self.batch,
            num_steps: self.steps,
            ema_decay: self.ema_decay,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub count: usize,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { count: 16, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub tau: f64,
    /// Generated samples analyzed when no points are given.
    pub samples: usize,
    pub seed: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            tau: latentfoil::manifold::DEFAULT_TAU,
            samples: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    TargetCp,
    MaxCl,
    CmMagnitude,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// The base shape; encoded into the latent space in latent mode.
    Base,
    /// Standard normal draw; zero bump vector in the bump modes.
    Gaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemConfig {
    pub objective: ObjectiveKind,
    /// Shape whose pressure distribution is the target (NACA code or file).
    pub target: String,
    pub cl_bound: Option<f64>,
    pub tc_bound: Option<f64>,
    /// Angle of attack in degrees.
    pub alpha: f64,
    pub v_inf: f64,
    pub mode: Mode,
    pub init: InitKind,
    pub seed: u64,
    pub hh_bound: f64,
    pub latent_bound: f64,
    pub frozen_fraction: f64,
    /// `(cl_bound, tc_bound)` pairs; when nonempty, `optimize` runs one
    /// problem per pair instead of the single bounds above.
    pub grid: Vec<(f64, f64)>,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        Self {
            objective: ObjectiveKind::TargetCp,
            target: "2412".into(),
            cl_bound: Some(0.30),
            tc_bound: Some(0.105),
            alpha: 2.31,
            v_inf: 1.0,
            mode: Mode::Hh,
            init: InitKind::Base,
            seed: 0,
            hh_bound: 0.1,
            latent_bound: 3.0,
            frozen_fraction: 0.05,
            grid: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: "run/data".into(),
            checkpoint: "run/model.ckpt".into(),
            out_dir: "run/out".into(),
        }
    }
}

/// Parsed configuration with the exact text it came from.
pub struct Loaded {
    pub config: RunConfig,
    pub text: String,
}

pub fn load(path: Option<&Path>) -> Result<Loaded> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let config = toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
            Ok(Loaded { config, text })
        }
        None => {
            let config = RunConfig::default();
            let text = toml::to_string(&config).context("serializing default config")?;
            Ok(Loaded { config, text })
        }
    }
}

/// NACA 4-digit code or coordinate file.
pub fn resolve_shape(spec: &str) -> Result<AirfoilShape> {
    let code = spec.trim().trim_start_matches("naca").trim_start_matches("NACA");
    if code.len() == 4 && code.chars().all(|c| c.is_ascii_digit()) {
        return Ok(naca4(code, FIT_POINTS)?);
    }
    let path = Path::new(spec);
    if !path.exists() {
        bail!("shape {spec:?} is neither a NACA 4-digit code nor an existing file");
    }
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(parse_coordinates(&bytes).with_context(|| format!("parsing {}", path.display()))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        let c: RunConfig = toml::from_str("").unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn default_roundtrips_through_toml() {
        let text = toml::to_string(&RunConfig::default()).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[geometry]\nd = 40\nwidth = 3\n").is_err());
        assert!(toml::from_str::<RunConfig>("[nonsense]\n").is_err());
    }

    #[test]
    fn sections_parse() {
        let c: RunConfig = toml::from_str(
            "[schedule]\nT = 10\n[problem]\nmode = \"latent\"\ngrid = [[0.3, 0.105], [0.5, 0.12]]\n[solver]\nmax_gradients = 20\n",
        )
        .unwrap();
        assert_eq!(c.schedule.timesteps, 10);
        assert_eq!(c.problem.mode, Mode::Latent);
        assert_eq!(c.problem.grid.len(), 2);
        assert_eq!(c.solver.max_gradients, 20);
        assert_eq!(c.solver.memory, 10);
    }

    #[test]
    fn long_preset_parses() {
        let c: RunConfig = toml::from_str(include_str!("../../../configs/long.toml")).unwrap();
        assert_eq!(c.train.steps, 140_000);
        assert_eq!(c.problem.grid.len(), 6);
        assert_eq!(c.schedule, ScheduleConfig::default());
    }

    #[test]
    fn shapes_resolve_from_codes() {
        assert!(resolve_shape("naca2412").is_ok());
        assert!(resolve_shape("0012").is_ok());
        assert!(resolve_shape("no/such/file.dat").is_err());
    }
}
