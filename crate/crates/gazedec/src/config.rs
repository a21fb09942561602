//! Run configuration: one JSON document covering every knob of the
//! pipeline. Each command writes its effective config next to its outputs
//! (`config.json`); re-running the command from that file reproduces the
//! outputs byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use gazedec_core::cvae::{CvaeTrainConfig, SampleMode};
use gazedec_core::encoder::{Aggregation, EncodeMode, EncoderTrainConfig, TopK};
use gazedec_core::gaze::{FdmParams, GazeParams};
use gazedec_core::stimuli::{Category, CollageParams, RenderParams};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    /// Master seed; every stream in a run derives from it.
    pub seed: u64,
    pub data: DataConfig,
    pub render: RenderConfig,
    pub collage: CollageConfig,
    pub gaze: GazeConfig,
    pub fdm: FdmConfig,
    pub encoder: EncoderConfig,
    pub cvae: CvaeConfig,
    pub session: SessionConfig,
    pub decode: DecodeConfig,
    pub simulate: SimulateConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 42,
            data: DataConfig::default(),
            render: RenderConfig::default(),
            collage: CollageConfig::default(),
            gaze: GazeConfig::default(),
            fdm: FdmConfig::default(),
            encoder: EncoderConfig::default(),
            cvae: CvaeConfig::default(),
            session: SessionConfig::default(),
            decode: DecodeConfig::default(),
            simulate: SimulateConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train_per_category: usize,
    pub val_per_category: usize,
    pub test_per_category: usize,
    pub exemplar_px: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_per_category: 500,
            val_per_category: 100,
            test_per_category: 100,
            exemplar_px: 32,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub fill_min: f32,
    pub fill_max: f32,
    pub scale_jitter: f32,
    pub translate_jitter_px: f32,
    pub rotation_jitter_deg: f32,
    pub noise_sigma: f32,
}

impl Default for RenderConfig {
    fn default() -> Self {
        let p = RenderParams::default();
        RenderConfig {
            fill_min: p.fill_min,
            fill_max: p.fill_max,
            scale_jitter: p.scale_jitter,
            translate_jitter_px: p.translate_jitter,
            rotation_jitter_deg: p.rotation_jitter_deg,
            noise_sigma: p.noise_sigma,
        }
    }
}

impl RenderConfig {
    pub fn to_core(&self, exemplar_px: usize) -> RenderParams {
        RenderParams {
            size: exemplar_px,
            fill_min: self.fill_min,
            fill_max: self.fill_max,
            scale_jitter: self.scale_jitter,
            translate_jitter: self.translate_jitter_px,
            rotation_jitter_deg: self.rotation_jitter_deg,
            noise_sigma: self.noise_sigma,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CollageConfig {
    pub grid: usize,
    pub cell_px: usize,
    pub n_target: usize,
    pub place_jitter_px: i32,
}

impl Default for CollageConfig {
    fn default() -> Self {
        let p = CollageParams::default();
        CollageConfig {
            grid: p.grid,
            cell_px: p.cell_px,
            n_target: p.n_target,
            place_jitter_px: p.place_jitter_px,
        }
    }
}

impl CollageConfig {
    pub fn to_core(&self, render: &RenderConfig, exemplar_px: usize) -> CollageParams {
        CollageParams {
            grid: self.grid,
            cell_px: self.cell_px,
            n_target: self.n_target,
            place_jitter_px: self.place_jitter_px,
            render: render.to_core(exemplar_px),
        }
    }

    pub fn canvas_px(&self) -> usize {
        self.grid * self.cell_px
    }

    pub fn items(&self) -> usize {
        self.grid * self.grid
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GazeConfig {
    pub n_fix: usize,
    pub p_target: f64,
    pub pos_jitter_sigma: f64,
    pub duration_shape: f64,
    pub duration_scale_ms: f64,
}

impl Default for GazeConfig {
    fn default() -> Self {
        let p = GazeParams::default();
        GazeConfig {
            n_fix: p.n_fix,
            p_target: p.p_target,
            pos_jitter_sigma: p.pos_jitter_sigma,
            duration_shape: p.duration_shape,
            duration_scale_ms: p.duration_scale_ms,
        }
    }
}

impl GazeConfig {
    pub fn to_core(&self) -> GazeParams {
        GazeParams {
            n_fix: self.n_fix,
            p_target: self.p_target,
            pos_jitter_sigma: self.pos_jitter_sigma,
            duration_shape: self.duration_shape,
            duration_scale_ms: self.duration_scale_ms,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FdmConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    pub sigma_px: f32,
    pub truncate_sigmas: f32,
    pub duration_weighted: bool,
    pub normalize: bool,
}

impl Default for FdmConfig {
    fn default() -> Self {
        let p = FdmParams::default();
        FdmConfig {
            grid_h: p.grid.0,
            grid_w: p.grid.1,
            sigma_px: p.sigma_px,
            truncate_sigmas: p.truncate_sigmas,
            duration_weighted: p.duration_weighted,
            normalize: p.normalize,
        }
    }
}

impl FdmConfig {
    pub fn to_core(&self) -> FdmParams {
        FdmParams {
            grid: (self.grid_h, self.grid_w),
            sigma_px: self.sigma_px,
            truncate_sigmas: self.truncate_sigmas,
            duration_weighted: self.duration_weighted,
            normalize: self.normalize,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        let p = EncoderTrainConfig::default();
        EncoderConfig {
            epochs: p.epochs,
            batch: p.batch,
            lr: p.lr,
        }
    }
}

impl EncoderConfig {
    pub fn to_core(&self, canvas_px: usize) -> EncoderTrainConfig {
        EncoderTrainConfig {
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            canvas_px,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CvaeConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        let p = CvaeTrainConfig::default();
        CvaeConfig {
            epochs: p.epochs,
            batch: p.batch,
            lr: p.lr,
        }
    }
}

impl CvaeConfig {
    pub fn to_core(&self) -> CvaeTrainConfig {
        CvaeTrainConfig {
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    /// Collages per simulated search session.
    pub collages: usize,
    /// "local" or "global".
    pub mode: String,
    /// "per-fixation" or "joint-fdm".
    pub aggregation: String,
    /// "1", "2", "3" or "all".
    pub k: String,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            collages: 5,
            mode: "local".into(),
            aggregation: "per-fixation".into(),
            k: "2".into(),
        }
    }
}

impl SessionConfig {
    pub fn mode_enum(&self) -> CliResult<EncodeMode> {
        EncodeMode::parse(&self.mode)
            .ok_or_else(|| CliError::config(format!("session.mode: unknown mode {:?}", self.mode)))
    }

    pub fn aggregation_enum(&self) -> CliResult<Aggregation> {
        Aggregation::parse(&self.aggregation).ok_or_else(|| {
            CliError::config(format!(
                "session.aggregation: unknown aggregation {:?}",
                self.aggregation
            ))
        })
    }

    pub fn k_enum(&self) -> CliResult<TopK> {
        match TopK::parse(&self.k) {
            Some(TopK::K(k)) if (1..=3).contains(&k) => Ok(TopK::K(k)),
            Some(TopK::All) => Ok(TopK::All),
            _ => Err(CliError::config(format!(
                "session.k: expected 1, 2, 3 or \"all\", got {:?}",
                self.k
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub samples: usize,
    /// "soft" or "mixture".
    pub sample_mode: String,
    /// Session JSONL to decode (the `decode` command's input).
    pub session: Option<PathBuf>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            samples: 10,
            sample_mode: "soft".into(),
            session: None,
        }
    }
}

impl DecodeConfig {
    pub fn sample_mode_enum(&self) -> CliResult<SampleMode> {
        SampleMode::parse(&self.sample_mode).ok_or_else(|| {
            CliError::config(format!(
                "decode.sample_mode: unknown mode {:?}",
                self.sample_mode
            ))
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct SimulateConfig {
    /// Target category name for simulated sessions.
    pub category: Option<String>,
    /// Collages per participant; defaults to session.collages when absent.
    pub collages: Option<usize>,
    pub participants: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Total sessions for `evaluate`; split evenly over the categories.
    pub sessions: usize,
    /// Paired trials for `ablate`.
    pub trials: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            sessions: 500,
            trials: 500,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PathsConfig {
    /// Directory holding a dataset manifest.json.
    pub dataset: Option<PathBuf>,
    /// Pipeline encoder checkpoint.
    pub encoder: Option<PathBuf>,
    /// CVAE checkpoint.
    pub cvae: Option<PathBuf>,
    /// Held-out oracle encoder checkpoint (trained with a different seed).
    pub oracle: Option<PathBuf>,
}

impl Config {
    pub fn load(path: &Path) -> CliResult<Config> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    }

    /// Serialize the effective config next to a run's outputs.
    pub fn write(&self, path: &Path) -> CliResult<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::data(format!("serialize config: {e}")))?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn simulate_category(&self) -> CliResult<Category> {
        let name = self
            .simulate
            .category
            .as_deref()
            .ok_or_else(|| CliError::config("simulate.category is not set"))?;
        Category::from_name(name)
            .ok_or_else(|| CliError::config(format!("unknown category {name:?}")))
    }

    pub fn require_path(&self, field: &str) -> CliResult<&PathBuf> {
        let (value, hint) = match field {
            "dataset" => (&self.paths.dataset, "run gen-data and set paths.dataset"),
            "encoder" => (&self.paths.encoder, "run train-encoder and set paths.encoder"),
            "cvae" => (&self.paths.cvae, "run train-cvae and set paths.cvae"),
            "oracle" => (
                &self.paths.oracle,
                "train a second encoder with a different seed and set paths.oracle",
            ),
            other => return Err(CliError::config(format!("unknown path field {other}"))),
        };
        value
            .as_ref()
            .ok_or_else(|| CliError::config(format!("paths.{field} is not set ({hint})")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_json() {
        let cfg = Config::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: Config = serde_json::from_str(&text).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), serde_json::to_string(&cfg).unwrap());
    }

    #[test]
    fn partial_configs_fill_in_defaults() {
        let cfg: Config = serde_json::from_str(r#"{"seed": 7, "gaze": {"p_target": 0.9}}"#).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.gaze.p_target, 0.9);
        assert_eq!(cfg.gaze.n_fix, 20);
        assert_eq!(cfg.data.train_per_category, 500);
    }

    #[test]
    fn enum_fields_are_validated() {
        let mut cfg = Config::default();
        assert!(cfg.session.mode_enum().is_ok());
        assert!(cfg.session.k_enum().is_ok());
        cfg.session.k = "4".into();
        assert!(cfg.session.k_enum().is_err());
        cfg.session.k = "all".into();
        assert!(matches!(cfg.session.k_enum(), Ok(TopK::All)));
        cfg.session.mode = "sideways".into();
        assert!(cfg.session.mode_enum().is_err());
        cfg.decode.sample_mode = "mixture".into();
        assert!(cfg.decode.sample_mode_enum().is_ok());
    }

    #[test]
    fn unknown_category_is_a_config_error() {
        let mut cfg = Config::default();
        cfg.simulate.category = Some("Hat".into());
        assert!(matches!(cfg.simulate_category(), Err(CliError::Config(_))));
        cfg.simulate.category = Some("jean".into());
        assert_eq!(cfg.simulate_category().unwrap(), Category::Jean);
    }
}
