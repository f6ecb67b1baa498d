//! Desk-scale experiment orchestration: configuration and presets, cached
//! pipeline stages with append-only run records, sweeps and reports. The
//! `sada` binary is a thin layer over this module.

mod pipeline;
mod report;

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentationConfig;
use crate::consistency::TrainConfig;
use crate::data::{default_data_dir, DomainShiftSpec, ShiftKind, DIGITS_IMAGES, DIGITS_LABELS};
use crate::error::{Result, SadaError};
use crate::grid::{read_json, Fingerprinter};
use crate::model::{ConvBlockSpec, ConvNetSpec, OptimizerConfig};
use crate::sensitivity::{DScale, MapKind};
use crate::spectral::Shape;

pub use pipeline::{
    augment_command, evaluate, load_desk_data, run_train, sensitivity_command, DeskData, EvalReport, MeanStd, RunLock,
    RunRecord, SeedMetrics, TargetAccuracy, TargetSummary, Workspace, OUTPUT_DIR_ENV,
};
pub use report::{rank_correlation, run_report, run_sweep, Report, ReportPoint, SweepAxis, SweepReport, SweepRow};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory with the digit IDX pair; `None` uses the bundled data.
    pub dir: Option<PathBuf>,
    pub n_train: usize,
    pub n_test: usize,
    pub split_seed: u64,
    /// Replicate digits into three channels.
    pub rgb: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { dir: None, n_train: 5000, n_test: 1000, split_seed: 0, rgb: false }
    }
}

impl DataConfig {
    pub fn resolved_dir(&self) -> PathBuf {
        self.dir.clone().unwrap_or_else(default_data_dir)
    }
}

/// Architecture of the ConvNet; input shape and class count come from the
/// data, the init seed from the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub conv: Vec<ConvBlockSpec>,
    pub hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let r = ConvNetSpec::reference(Shape::new(1, 1, 1), 1, 0);
        ModelConfig { conv: r.conv, hidden: r.hidden }
    }
}

impl ModelConfig {
    pub fn spec(&self, input: Shape, classes: usize, seed: u64) -> ConvNetSpec {
        ConvNetSpec { input, conv: self.conv.clone(), hidden: self.hidden, classes, init_seed: seed }
    }
}

/// Sensitivity-map settings; the map seed is the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapConfig {
    pub kind: MapKind,
    /// Noise norm for the original map.
    pub epsilon: f64,
    pub d_scale: DScale,
    pub sample_fraction: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig { kind: MapKind::AmplitudeModulated, epsilon: 0.2, d_scale: DScale::default(), sample_fraction: 0.02 }
    }
}

/// What the finetuning stage does after ERM pretraining.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Plain cross-entropy for the same epochs and optimizer as the SADA
    /// finetune, so the comparison is compute-matched.
    Erm,
    #[default]
    Sada,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Display name; not hashed.
    pub name: String,
    pub method: Method,
    pub data: DataConfig,
    pub model: ModelConfig,
    /// ERM pretraining; its `seed` is replaced by the run seed.
    pub erm: OptimizerConfig,
    pub map: MapConfig,
    /// Finetuning; its optimizer seed is replaced by the run seed.
    pub train: TrainConfig,
    pub targets: Vec<DomainShiftSpec>,
    /// Seed of the target-domain corruptions (shared by every run).
    pub target_seed: u64,
    pub seeds: Vec<u64>,
    /// Output root; not hashed. Falls back to `$SADA_OUTPUT_DIR`, then `runs`.
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut train = TrainConfig::default();
        train.optimizer.epochs = 2;
        ExperimentConfig {
            name: "sada3".into(),
            method: Method::Sada,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            erm: OptimizerConfig { batch_size: 64, ..OptimizerConfig::default() },
            map: MapConfig::default(),
            train,
            targets: vec![
                DomainShiftSpec::new(ShiftKind::AmplitudeScaleLowfreq, 3),
                DomainShiftSpec::new(ShiftKind::GaussianNoise, 3),
            ],
            target_seed: 1,
            seeds: vec![0, 1, 2],
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(SadaError::Config(format!("config file {} not found", path.display())));
        }
        read_json(path).map_err(|e| SadaError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(SadaError::Config("seeds must not be empty".into()));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(SadaError::Config(format!("duplicate seeds in {:?}", self.seeds)));
        }
        if self.data.n_train == 0 || self.data.n_test == 0 {
            return Err(SadaError::Config("n_train and n_test must be positive".into()));
        }
        let dir = self.data.resolved_dir();
        for file in [DIGITS_IMAGES, DIGITS_LABELS] {
            if !dir.join(file).exists() {
                return Err(SadaError::Config(format!(
                    "data file {} not found; set data.dir or SADA_DATA_DIR",
                    dir.join(file).display()
                )));
            }
        }
        if !(self.map.sample_fraction > 0.0 && self.map.sample_fraction <= 1.0) {
            return Err(SadaError::Config(format!(
                "map.sample_fraction must be in (0, 1], got {}",
                self.map.sample_fraction
            )));
        }
        if !(self.map.epsilon > 0.0) || !self.map.epsilon.is_finite() {
            return Err(SadaError::Config(format!("map.epsilon must be positive, got {}", self.map.epsilon)));
        }
        for t in &self.targets {
            t.validate()?;
        }
        self.erm.validate()?;
        self.train.validate()
    }

    /// Hash of everything that influences results: the name and output
    /// root are excluded, so renamed reruns share caches and compare equal.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.name.clear();
        canonical.output_dir = None;
        let json = serde_json::to_string(&canonical).expect("config serializes");
        Fingerprinter::new("experiment").str(&json).finish()
    }

    /// `<name>-<first 12 hash digits>`.
    pub fn run_dir_name(&self) -> String {
        format!("{}-{}", self.name, &self.hash()[..12])
    }

    pub fn with_preset(mut self, preset: Preset) -> Self {
        preset.apply(&mut self);
        self
    }
}

/// Training strategies and the ablations of the full method.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Erm,
    /// Three SADA views, no mix views.
    Sada3,
    /// Two SADA views and one mix view.
    Full,
    Sada1Mix2,
    /// Full method with the SADA views replaced by mix views.
    WoSada,
    /// Full method without its mix view.
    WoMix,
    /// Full method with the JS term off and cross-entropy on every view.
    WoJs,
}

impl Preset {
    pub const ALL: [Preset; 7] =
        [Preset::Erm, Preset::Sada3, Preset::Full, Preset::Sada1Mix2, Preset::WoSada, Preset::WoMix, Preset::WoJs];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Erm => "erm",
            Preset::Sada3 => "sada3",
            Preset::Full => "full",
            Preset::Sada1Mix2 => "sada1mix2",
            Preset::WoSada => "wo_sada",
            Preset::WoMix => "wo_mix",
            Preset::WoJs => "wo_js",
        }
    }

    /// Sets method, view split and loss switches; keeps every other
    /// hyperparameter of `cfg`.
    pub fn apply(self, cfg: &mut ExperimentConfig) {
        cfg.name = self.name().into();
        let split = |cfg: &mut ExperimentConfig, n_sada, n_mix| {
            let a = &cfg.train.augmentation;
            cfg.train.augmentation = AugmentationConfig {
                epsilon: a.epsilon,
                delta: a.delta,
                steps: a.steps,
                materialize_last_step: a.materialize_last_step,
                ..AugmentationConfig::with_split(n_sada, n_mix)
            };
        };
        cfg.method = Method::Sada;
        match self {
            Preset::Erm => cfg.method = Method::Erm,
            Preset::Sada3 => split(cfg, 3, 0),
            Preset::Full => split(cfg, 2, 1),
            Preset::Sada1Mix2 => split(cfg, 1, 2),
            Preset::WoSada => split(cfg, 0, 3),
            Preset::WoMix => split(cfg, 2, 0),
            Preset::WoJs => {
                split(cfg, 2, 1);
                set_lambda(cfg, 0.0);
            }
        }
    }
}

/// Sets the JS weight. Zero also puts cross-entropy on the augmented views;
/// otherwise they would carry no gradient and the run would be plain ERM.
pub fn set_lambda(cfg: &mut ExperimentConfig, lambda: f64) {
    cfg.train.lambda = lambda;
    cfg.train.erm_on_augments = lambda == 0.0;
}

impl FromStr for Preset {
    type Err = SadaError;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Preset::ALL.iter().map(|p| p.name()).collect();
            SadaError::Config(format!("unknown preset {s:?}; expected one of {}", names.join(", ")))
        })
    }
}
