#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sada::experiment::{ExperimentConfig, Preset};

/// A config small enough to train in seconds on the bundled digits.
pub fn tiny_config(root: &Path, preset: Preset) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default().with_preset(preset);
    cfg.data.n_train = 240;
    cfg.data.n_test = 80;
    cfg.erm.epochs = 1;
    cfg.train.optimizer.epochs = 1;
    cfg.train.aug_fraction = 0.25;
    cfg.map.sample_fraction = 0.02;
    cfg.seeds = vec![0];
    cfg.output_dir = Some(root.to_path_buf());
    cfg
}

/// Every CSV/JSON/JSONL file under `root`, keyed by relative path, with
/// wallclock fields removed.
pub fn comparable_artifacts(root: &Path) -> BTreeMap<PathBuf, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
            let text = match ext {
                "csv" => std::fs::read_to_string(&path).unwrap(),
                "json" => strip_wallclock_json(&std::fs::read_to_string(&path).unwrap()),
                "jsonl" => std::fs::read_to_string(&path)
                    .unwrap()
                    .lines()
                    .map(strip_wallclock_json)
                    .collect::<Vec<_>>()
                    .join("\n"),
                _ => continue,
            };
            out.insert(path.strip_prefix(root).unwrap().to_path_buf(), text);
        }
    }
    out
}

fn strip_wallclock_json(text: &str) -> String {
    fn strip(v: &mut serde_json::Value) {
        match v {
            serde_json::Value::Object(map) => {
                map.retain(|k, _| !k.starts_with("wallclock"));
                map.values_mut().for_each(strip);
            }
            serde_json::Value::Array(items) => items.iter_mut().for_each(strip),
            _ => {}
        }
    }
    let mut v: serde_json::Value = serde_json::from_str(text).unwrap();
    strip(&mut v);
    serde_json::to_string(&v).unwrap()
}

/// Asserts two artifact sets match, naming the first differing file.
pub fn assert_same_artifacts(a: &BTreeMap<PathBuf, String>, b: &BTreeMap<PathBuf, String>) {
    if let Some(diff) = first_difference(a, b) {
        panic!("{diff}");
    }
}

pub fn first_difference(a: &BTreeMap<PathBuf, String>, b: &BTreeMap<PathBuf, String>) -> Option<String> {
    let ka: Vec<_> = a.keys().collect();
    let kb: Vec<_> = b.keys().collect();
    if ka != kb {
        return Some(format!("file sets differ: {ka:?} vs {kb:?}"));
    }
    a.iter().find(|(k, v)| b[*k] != **v).map(|(k, _)| format!("{} differs between runs", k.display()))
}
