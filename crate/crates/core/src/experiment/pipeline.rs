//! Cached pipeline stages and run records.
//!
//! Layout under the output root:
//!
//! ```text
//! cache/erm-<key>.json           ERM checkpoints, keyed by data, model and optimizer
//! cache/map-<key>.{csv,json,png} sensitivity maps, keyed by model, data and map settings
//! <name>-<hash>/config.json
//! <name>-<hash>/run.lock         present while a process owns the run
//! <name>-<hash>/seed-<s>/        finetuned checkpoint, metrics stream, per-seed result
//! <name>-<hash>/records/record-NNNN.json
//! ```
//!
//! Every file is written under a temporary name and renamed, so a killed run
//! leaves either a complete artifact or none; rerunning resumes from the
//! artifacts that exist.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, MapConfig, Method};
use crate::augment::{augment_batch, save_augmented, AugmentManifest, AugmentationConfig};
use crate::consistency::{train_sada, StandInMix};
use crate::data::{corrupt, desk_split, load_digits, Dataset};
use crate::error::{Result, SadaError};
use crate::grid::{read_json, write_json, Fingerprinter};
use crate::model::{accuracy, fit_erm, fit_erm_from, load_checkpoint, save_checkpoint, ConvNet, ModelOracle};
use crate::sensitivity::{
    central_and_outer_means, compute_map, map_l1_summary, MapKind, MapOptions, NoiseModel, SensitivityMap,
};
use crate::spectral::mean_amplitude;

/// Environment variable naming the output root.
pub const OUTPUT_DIR_ENV: &str = "SADA_OUTPUT_DIR";

const AUGMENT_CHUNK: usize = 128;

/// Output root shared by runs; holds the stage caches.
#[derive(Clone, Debug)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let cache = root.join("cache");
        fs::create_dir_all(&cache).map_err(|e| SadaError::io(&cache, e))?;
        Ok(Workspace { root })
    }

    /// `output_dir` from the config, else `$SADA_OUTPUT_DIR`, else `runs`.
    pub fn for_config(cfg: &ExperimentConfig) -> Result<Self> {
        let root = cfg
            .output_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"));
        Workspace::new(root)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.root.join("cache")
    }

    pub fn run_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.root.join(cfg.run_dir_name())
    }

    /// Root-relative path with `/` separators, so records do not depend on
    /// where the root lives.
    fn rel(&self, path: &Path) -> String {
        let p = path.strip_prefix(&self.root).unwrap_or(path);
        p.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
    }
}

/// Exclusive ownership of a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join("run.lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id()).map_err(|e| SadaError::io(&path, e))?;
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let owner = fs::read_to_string(&path).unwrap_or_default();
                Err(SadaError::Stage {
                    stage: "run lock".into(),
                    message: format!(
                        "{} is owned by process {}; delete {} if that process is gone",
                        dir.display(),
                        owner.trim(),
                        path.display()
                    ),
                })
            }
            Err(e) => Err(SadaError::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn stage(name: impl Into<String>) -> impl FnOnce(SadaError) -> SadaError {
    let name = name.into();
    move |e| match e {
        SadaError::Stage { .. } => e,
        e => SadaError::Stage { stage: name, message: e.to_string() },
    }
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

fn rename(from: &Path, to: &Path) -> Result<()> {
    fs::rename(from, to).map_err(|e| SadaError::io(to, e))
}

fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = tmp_path(path);
    write_json(&tmp, value)?;
    rename(&tmp, path)
}

fn save_checkpoint_atomic(model: &ConvNet, path: &Path) -> Result<()> {
    let tmp = tmp_path(path);
    save_checkpoint(model, &tmp)?;
    rename(&tmp, path)
}

fn json_of<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("config serializes")
}

/// Source split, test split and one corrupted copy of the test split per
/// target domain.
pub struct DeskData {
    pub train: Dataset,
    pub test: Dataset,
    pub targets: Vec<(String, Dataset)>,
    key: String,
}

fn data_key(cfg: &ExperimentConfig) -> String {
    Fingerprinter::new("desk-data")
        .str(&json_of(&cfg.data))
        .str(&json_of(&cfg.targets))
        .usize(cfg.target_seed as usize)
        .finish()
}

pub fn load_desk_data(cfg: &ExperimentConfig) -> Result<DeskData> {
    let mut full = load_digits(&cfg.data.resolved_dir())?;
    if cfg.data.rgb {
        full = full.to_rgb();
    }
    let (train, test) = desk_split(&full, cfg.data.n_train, cfg.data.n_test, cfg.data.split_seed)?;
    let targets =
        cfg.targets.iter().map(|t| Ok((t.label(), corrupt(&test, t, cfg.target_seed)?))).collect::<Result<Vec<_>>>()?;
    Ok(DeskData { train, test, targets, key: data_key(cfg) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetAccuracy {
    pub target: String,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_fingerprint: String,
    pub clean: f64,
    pub targets: Vec<TargetAccuracy>,
}

/// Accuracy on the clean test split and on every target domain.
pub fn evaluate(model: &dyn ModelOracle, data: &DeskData) -> Result<EvalReport> {
    let clean = accuracy(model, &data.test.images, &data.test.labels)?;
    let targets = data
        .targets
        .iter()
        .map(|(name, d)| Ok(TargetAccuracy { target: name.clone(), accuracy: accuracy(model, &d.images, &d.labels)? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport { model_fingerprint: model.fingerprint(), clean, targets })
}

fn noise_model(dataset: &Dataset, cfg: &MapConfig) -> Result<NoiseModel> {
    Ok(match cfg.kind {
        MapKind::Original => NoiseModel::Original { epsilon: cfg.epsilon },
        MapKind::AmplitudeModulated => NoiseModel::AmplitudeModulated {
            d: mean_amplitude(dataset.images.iter(), &dataset.fingerprint())?,
            scale: cfg.d_scale,
        },
    })
}

/// Computes the map of `model` on `dataset` and writes `<stem>.{csv,json,png}`
/// to `out_dir`, plus `<stem>-D.{csv,json}` for amplitude-modulated maps.
pub fn sensitivity_command(
    model: &dyn ModelOracle,
    dataset: &Dataset,
    cfg: &MapConfig,
    seed: u64,
    out_dir: &Path,
    stem: &str,
) -> Result<SensitivityMap> {
    fs::create_dir_all(out_dir).map_err(|e| SadaError::io(out_dir, e))?;
    let noise = noise_model(dataset, cfg)?;
    if let NoiseModel::AmplitudeModulated { d, .. } = &noise {
        d.save(out_dir, &format!("{stem}-D"))?;
    }
    let map = compute_map(model, dataset, &noise, MapOptions { seed, sample_fraction: cfg.sample_fraction })?;
    map.save(out_dir, stem)?;
    Ok(map)
}

/// Writes SADA augmentations of the first `count` samples of `dataset`
/// (PNG per image plus a manifest). Sample `i` draws from stream `i` of
/// `seed`, so outputs do not depend on `count` or chunking.
pub fn augment_command(
    model: &dyn ModelOracle,
    map: &SensitivityMap,
    dataset: &Dataset,
    cfg: &AugmentationConfig,
    count: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<AugmentManifest> {
    cfg.validate()?;
    map.validate()?;
    let n = count.min(dataset.len());
    let mut outputs = Vec::with_capacity(n);
    for start in (0..n).step_by(AUGMENT_CHUNK) {
        let end = (start + AUGMENT_CHUNK).min(n);
        let images: Vec<_> = dataset.images[start..end].iter().collect();
        let labels = &dataset.labels[start..end];
        let mut rngs: Vec<ChaCha8Rng> = (start..end)
            .map(|i| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                r.set_stream(i as u64);
                r
            })
            .collect();
        let mut refs: Vec<&mut ChaCha8Rng> = rngs.iter_mut().collect();
        let out = augment_batch(&images, labels, model, &map.values, cfg, &mut refs)?;
        for (k, (img, trace)) in out.into_iter().enumerate() {
            outputs.push((start + k, labels[k], img, trace));
        }
    }
    save_augmented(out_dir, &outputs, (cfg, &model.fingerprint()))
}

/// ERM checkpoint for `seed`, trained once per (data, model, optimizer).
fn cached_erm(ws: &Workspace, cfg: &ExperimentConfig, data: &DeskData, seed: u64) -> Result<(ConvNet, PathBuf)> {
    let shape = data.train.shape().ok_or(SadaError::EmptyDataset)?;
    let spec = cfg.model.spec(shape, data.train.num_classes(), seed);
    let opt = crate::model::OptimizerConfig { seed, ..cfg.erm.clone() };
    let key = Fingerprinter::new("erm-cache")
        .str(&data.train.fingerprint())
        .str(&json_of(&spec))
        .str(&json_of(&opt))
        .finish();
    let path = ws.cache_dir().join(format!("erm-{key}.json"));
    if path.exists() {
        let model = load_checkpoint(&path).map_err(stage(format!("ERM pretraining (cached {})", path.display())))?;
        return Ok((model, path));
    }
    log::info!("seed {seed}: ERM pretraining for {} epochs", opt.epochs);
    let (model, _) = fit_erm(spec, &data.train, &opt).map_err(stage(format!("seed {seed}: ERM pretraining")))?;
    save_checkpoint_atomic(&model, &path)?;
    Ok((model, path))
}

/// Sensitivity map of `model` on `dataset`, computed once per (model, data,
/// map settings, seed). Returns the map and the path of its CSV.
fn cached_map(
    ws: &Workspace,
    model: &ConvNet,
    dataset: &Dataset,
    cfg: &MapConfig,
    seed: u64,
) -> Result<(SensitivityMap, PathBuf)> {
    let key = Fingerprinter::new("map-cache")
        .str(&model.fingerprint())
        .str(&dataset.fingerprint())
        .str(&json_of(cfg))
        .usize(seed as usize)
        .finish();
    let dir = ws.cache_dir();
    let stem = format!("map-{key}");
    let csv = dir.join(format!("{stem}.csv"));
    if csv.exists() {
        let map =
            SensitivityMap::load(&dir, &stem).map_err(stage(format!("sensitivity map (cached {})", csv.display())))?;
        return Ok((map, csv));
    }
    log::info!(
        "sensitivity map of model {} ({:.0}% of {} images per bin)",
        &key[..8],
        cfg.sample_fraction * 100.0,
        dataset.len()
    );
    let noise = noise_model(dataset, cfg)?;
    let map = compute_map(model, dataset, &noise, MapOptions { seed, sample_fraction: cfg.sample_fraction })
        .map_err(stage("sensitivity map"))?;
    let tmp_stem = format!("{stem}.tmp{}", std::process::id());
    map.save(&dir, &tmp_stem)?;
    // the CSV marks the entry as complete, so it is moved last
    for ext in ["png", "json", "csv"] {
        rename(&dir.join(format!("{tmp_stem}.{ext}")), &dir.join(format!("{stem}.{ext}")))?;
    }
    Ok((map, csv))
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation, so a single seed gives 0.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return MeanStd { mean: f64::NAN, std: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSummary {
    pub target: String,
    pub mean: f64,
    pub std: f64,
}

/// Root-relative artifact paths of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedArtifacts {
    pub erm_checkpoint: String,
    pub erm_map: String,
    pub checkpoint: String,
    pub map: String,
    pub metrics: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    /// The pretrained ERM model every method starts from.
    pub pretrained: EvalReport,
    pub finetuned: EvalReport,
    pub erm_map_l1: f64,
    pub map_l1: f64,
    pub map_central_mean: f64,
    pub map_outer_mean: f64,
    /// Adversarial flip rate of the last finetuning epoch (SADA only).
    pub flip_rate: Option<f64>,
    pub artifacts: SeedArtifacts,
    pub wallclock_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub config_hash: String,
    pub method: Method,
    pub seeds: Vec<SeedMetrics>,
    pub clean: MeanStd,
    pub targets: Vec<TargetSummary>,
    /// Mean over targets of the seed-averaged accuracy.
    pub mean_target_accuracy: f64,
    pub pretrained_clean: MeanStd,
    pub pretrained_targets: Vec<TargetSummary>,
    pub erm_map_l1: MeanStd,
    pub map_l1: MeanStd,
    pub artifacts: Vec<String>,
    pub wallclock_s: f64,
}

fn summarize_targets(reports: &[&EvalReport]) -> Vec<TargetSummary> {
    let Some(first) = reports.first() else { return Vec::new() };
    first
        .targets
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let vals: Vec<f64> = reports.iter().map(|r| r.targets[k].accuracy).collect();
            let ms = MeanStd::of(&vals);
            TargetSummary { target: t.target.clone(), mean: ms.mean, std: ms.std }
        })
        .collect()
}

impl RunRecord {
    fn aggregate(cfg: &ExperimentConfig, seeds: Vec<SeedMetrics>, wallclock_s: f64) -> Self {
        let finetuned: Vec<&EvalReport> = seeds.iter().map(|s| &s.finetuned).collect();
        let pretrained: Vec<&EvalReport> = seeds.iter().map(|s| &s.pretrained).collect();
        let targets = summarize_targets(&finetuned);
        let mean_target_accuracy = if targets.is_empty() {
            f64::NAN
        } else {
            targets.iter().map(|t| t.mean).sum::<f64>() / targets.len() as f64
        };
        let mut artifacts = Vec::new();
        for s in &seeds {
            let a = &s.artifacts;
            for p in [&a.erm_checkpoint, &a.erm_map, &a.checkpoint, &a.map, &a.metrics] {
                if !artifacts.contains(p) {
                    artifacts.push(p.clone());
                }
            }
        }
        RunRecord {
            name: cfg.name.clone(),
            config_hash: cfg.hash(),
            method: cfg.method,
            clean: MeanStd::of(&finetuned.iter().map(|r| r.clean).collect::<Vec<_>>()),
            targets,
            mean_target_accuracy,
            pretrained_clean: MeanStd::of(&pretrained.iter().map(|r| r.clean).collect::<Vec<_>>()),
            pretrained_targets: summarize_targets(&pretrained),
            erm_map_l1: MeanStd::of(&seeds.iter().map(|s| s.erm_map_l1).collect::<Vec<_>>()),
            map_l1: MeanStd::of(&seeds.iter().map(|s| s.map_l1).collect::<Vec<_>>()),
            artifacts,
            seeds,
            wallclock_s,
        }
    }

    pub fn target(&self, name: &str) -> Option<&TargetSummary> {
        self.targets.iter().find(|t| t.target == name)
    }

    /// Most recent record of a run directory, with its path.
    pub fn load_latest(run_dir: &Path) -> Result<Option<(RunRecord, PathBuf)>> {
        let Some(path) = record_paths(run_dir)?.pop() else { return Ok(None) };
        let record = read_json(&path).map_err(stage(format!("run record {}", path.display())))?;
        Ok(Some((record, path)))
    }
}

fn record_paths(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let dir = run_dir.join("records");
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| SadaError::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("record-") && n.ends_with(".json"))
        })
        .collect();
    paths.sort();
    Ok(paths)
}

/// Appends `record` as the next `record-NNNN.json`; never overwrites.
fn append_record(run_dir: &Path, record: &RunRecord) -> Result<PathBuf> {
    let dir = run_dir.join("records");
    fs::create_dir_all(&dir).map_err(|e| SadaError::io(&dir, e))?;
    let mut next = record_paths(run_dir)?.len() + 1;
    loop {
        let path = dir.join(format!("record-{next:04}.json"));
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(f) => {
                let mut w = BufWriter::new(f);
                serde_json::to_writer_pretty(&mut w, record)?;
                w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| SadaError::io(&path, e))?;
                return Ok(path);
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => next += 1,
            Err(e) => return Err(SadaError::io(&path, e)),
        }
    }
}

fn last_flip_rate(metrics: &Path) -> Option<f64> {
    let f = File::open(metrics).ok()?;
    let last = BufReader::new(f).lines().map_while(|l| l.ok()).filter(|l| !l.trim().is_empty()).last()?;
    serde_json::from_str::<serde_json::Value>(&last).ok()?.get("flip_rate")?.as_f64()
}

fn finetune(
    cfg: &ExperimentConfig,
    data: &DeskData,
    base: ConvNet,
    map: &SensitivityMap,
    seed: u64,
    metrics: &Path,
) -> Result<ConvNet> {
    let mut train = cfg.train.clone();
    train.optimizer.seed = seed;
    let tmp = tmp_path(metrics);
    let mut out = BufWriter::new(File::create(&tmp).map_err(|e| SadaError::io(&tmp, e))?);
    let model = match cfg.method {
        Method::Erm => {
            let (model, curve) = fit_erm_from(base, &data.train, &train.optimizer)?;
            for e in &curve.epochs {
                writeln!(out, "{}", serde_json::to_string(e)?).map_err(|e| SadaError::io(&tmp, e))?;
            }
            model
        }
        Method::Sada => {
            let map = (train.augmentation.mix_split.n_sada > 0).then_some(map);
            train_sada(base, &data.train, map, &train, &StandInMix::default(), Some(&mut out))?.0
        }
    };
    out.flush().map_err(|e| SadaError::io(&tmp, e))?;
    drop(out);
    rename(&tmp, metrics)?;
    Ok(model)
}

fn run_seed(ws: &Workspace, cfg: &ExperimentConfig, data: &DeskData, seed: u64, run_dir: &Path) -> Result<SeedMetrics> {
    let seed_dir = run_dir.join(format!("seed-{seed}"));
    fs::create_dir_all(&seed_dir).map_err(|e| SadaError::io(&seed_dir, e))?;
    let result_path = seed_dir.join("result.json");
    if result_path.exists() {
        log::info!("seed {seed}: reusing {}", result_path.display());
        return read_json(&result_path).map_err(stage(format!("seed {seed}: result {}", result_path.display())));
    }
    let start = Instant::now();
    let (erm, erm_path) = cached_erm(ws, cfg, data, seed)?;
    let pretrained = evaluate(&erm, data)?;
    let (erm_map, erm_map_path) = cached_map(ws, &erm, &data.train, &cfg.map, seed)?;

    let ckpt = seed_dir.join("model.json");
    let metrics = seed_dir.join("metrics.jsonl");
    let model = if ckpt.exists() && metrics.exists() {
        log::info!("seed {seed}: reusing finetuned checkpoint");
        load_checkpoint(&ckpt).map_err(stage(format!("seed {seed}: finetuned checkpoint {}", ckpt.display())))?
    } else {
        log::info!("seed {seed}: {} finetuning for {} epochs", cfg.name, cfg.train.optimizer.epochs);
        let model = finetune(cfg, data, erm.clone(), &erm_map, seed, &metrics)
            .map_err(stage(format!("seed {seed}: finetuning")))?;
        save_checkpoint_atomic(&model, &ckpt)?;
        model
    };
    let finetuned = evaluate(&model, data)?;
    let (map, map_path) = cached_map(ws, &model, &data.train, &cfg.map, seed)?;
    let (central, outer) = central_and_outer_means(&map.values);
    let result = SeedMetrics {
        seed,
        pretrained,
        finetuned,
        erm_map_l1: map_l1_summary(&erm_map),
        map_l1: map_l1_summary(&map),
        map_central_mean: central,
        map_outer_mean: outer,
        flip_rate: if cfg.method == Method::Sada { last_flip_rate(&metrics) } else { None },
        artifacts: SeedArtifacts {
            erm_checkpoint: ws.rel(&erm_path),
            erm_map: ws.rel(&erm_map_path),
            checkpoint: ws.rel(&ckpt),
            map: ws.rel(&map_path),
            metrics: ws.rel(&metrics),
        },
        wallclock_s: start.elapsed().as_secs_f64(),
    };
    write_json_atomic(&result_path, &result)?;
    Ok(result)
}

/// Runs every seed of `cfg` (resuming from existing stage artifacts) and
/// appends a new [`RunRecord`]. Pass `data` to reuse already loaded splits;
/// they must come from the same data settings.
pub fn run_train(cfg: &ExperimentConfig, ws: &Workspace, data: Option<&DeskData>) -> Result<(RunRecord, PathBuf)> {
    cfg.validate()?;
    let loaded;
    let data = match data {
        Some(d) => {
            if d.key != data_key(cfg) {
                return Err(SadaError::Config("preloaded data does not match the config's data and targets".into()));
            }
            d
        }
        None => {
            loaded = load_desk_data(cfg)?;
            &loaded
        }
    };
    let start = Instant::now();
    let run_dir = ws.run_dir(cfg);
    fs::create_dir_all(&run_dir).map_err(|e| SadaError::io(&run_dir, e))?;
    let _lock = RunLock::acquire(&run_dir)?;
    // the output root is left out so relocated or repeated runs compare equal
    write_json_atomic(&run_dir.join("config.json"), &ExperimentConfig { output_dir: None, ..cfg.clone() })?;
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        seeds.push(run_seed(ws, cfg, data, seed, &run_dir)?);
    }
    let record = RunRecord::aggregate(cfg, seeds, start.elapsed().as_secs_f64());
    if let Some(missing) = record.artifacts.iter().find(|a| !ws.root().join(a).exists()) {
        return Err(SadaError::Stage { stage: "run record".into(), message: format!("artifact {missing} is missing") });
    }
    let path = append_record(&run_dir, &record)?;
    Ok((record, path))
}
