//! Acceptance run: prints one PASS/FAIL line per criterion.
//!
//! The desk benchmark (5k/1k digits, five presets, three seeds) trains from
//! scratch in a temporary root and takes roughly 40 minutes on one core. Set
//! `SADA_ACCEPTANCE_DIR` to keep its outputs (a rerun then resumes from
//! them). The process exits nonzero on a failed criterion only when
//! `SADA_ACCEPTANCE_STRICT=1`, so criteria that are known not to hold at
//! desk scale is reported without failing `cargo test`.

mod common;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sada::augment::{adversarial_step, amplitude_gradient, augment_batch, init_amplitude, AugmentationConfig};
use sada::consistency::js_divergence;
use sada::experiment::{
    augment_command, load_desk_data, run_report, run_train, sensitivity_command, DeskData, ExperimentConfig, MapConfig,
    Preset, RunRecord, Workspace,
};
use sada::model::{load_checkpoint, ConvBlockSpec, ConvNet, ConvNetSpec, ModelOracle};
use sada::sensitivity::{central_and_outer_means, SensitivityMap};
use sada::spectral::{basis_image, decompose, reconstruct, synthesize, Fft2, FrequencyGrid, Image, Shape};

use common::{comparable_artifacts, first_difference, tiny_config};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

type Check = Result<Outcome, String>;

fn random_image(rng: &mut ChaCha8Rng, shape: Shape) -> Image {
    Image::new(shape, (0..shape.len()).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn spectral_round_trip() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let c = if rng.random::<bool>() { 1 } else { 3 };
        let shape = Shape::new(c, rng.random_range(8..=32), rng.random_range(8..=32));
        let x = random_image(&mut rng, shape);
        let back = reconstruct(&decompose(&x).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        worst = worst.max(x.max_abs_diff(&back));
    }
    Ok(outcome(worst < 1e-5, format!("max error {worst:.2e} over 1000 images")))
}

fn basis_correctness() -> Check {
    let (h, w) = (16, 16);
    let grid = FrequencyGrid::new(h, w);
    let fft = Fft2::new(h, w);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x: Vec<f64> = (0..h * w).map(|_| rng.random()).collect();
    let base = fft.forward_centered(&x);
    let mut problems = Vec::new();
    for u in 0..h {
        for v in 0..w {
            let (i, j) = grid.frequency_of(u, v);
            let b = basis_image(i, j, h, w).map_err(|e| e.to_string())?;
            let norm = b.pixels.iter().map(|p| p * p).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                problems.push(format!("({i},{j}) norm {norm}"));
            }
            let (tu, tv) = grid.twin(u, v);
            let (ti, tj) = grid.frequency_of(tu, tv);
            let twin = basis_image(ti, tj, h, w).map_err(|e| e.to_string())?;
            if twin.pixels.iter().zip(&b.pixels).any(|(a, c)| a.to_bits() != c.to_bits()) {
                problems.push(format!("({i},{j}) differs from its twin"));
            }
            let perturbed: Vec<f64> = x.iter().zip(&b.pixels).map(|(a, c)| a + c).collect();
            let spec = fft.forward_centered(&perturbed);
            for (k, (s, s0)) in spec.iter().zip(&base).enumerate() {
                let on_pair = k == u * w + v || k == tu * w + tv;
                let changed = (s - s0).norm() > 1e-9;
                if changed != on_pair {
                    problems.push(format!("({i},{j}) bin {k} changed={changed}"));
                }
            }
        }
    }
    let detail = match problems.first() {
        None => "256 bins: unit norm, bit-identical twins, one pair each".into(),
        Some(p) => format!("{} problems, first: {p}", problems.len()),
    };
    Ok(outcome(problems.is_empty(), detail))
}

fn tiny_net(seed: u64) -> ConvNet {
    ConvNet::new(ConvNetSpec {
        input: Shape::new(1, 8, 8),
        conv: vec![ConvBlockSpec { channels: 4, kernel: 3, stride: 1, pool: 2 }],
        hidden: 12,
        classes: 4,
        init_seed: seed,
    })
    .unwrap()
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale =
        numeric.iter().map(|b| b * b).sum::<f64>().sqrt().max(analytic.iter().map(|a| a * a).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn gradient_fidelity() -> Check {
    let h = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_px, mut worst_amp) = (0.0f64, 0.0f64);
    for k in 0..50 {
        let net = tiny_net(k);
        let shape = net.input_shape();
        let x = random_image(&mut rng, shape);
        let label = rng.random_range(0..net.num_classes());
        let loss = |img: &Image| net.loss_and_gradient(&[img], &[label]).unwrap()[0].loss;

        let g = net.loss_and_gradient(&[&x], &[label]).map_err(|e| e.to_string())?.pop().unwrap();
        let numeric: Vec<f64> = (0..shape.len())
            .map(|p| {
                let (mut plus, mut minus) = (x.clone(), x.clone());
                plus.data_mut()[p] += h;
                minus.data_mut()[p] -= h;
                (loss(&plus) - loss(&minus)) / (2.0 * h)
            })
            .collect();
        worst_px = worst_px.max(relative_error(g.gradient.data(), &numeric));

        // Amplitude gradient: a pair moves together, and the reported value
        // is the per-bin share of the pair's derivative.
        let s = decompose(&x).map_err(|e| e.to_string())?;
        let ga = amplitude_gradient(&net, &s.amplitude, &s.phase, shape, label).map_err(|e| e.to_string())?;
        let grid = FrequencyGrid::new(shape.height, shape.width);
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for pair in grid.canonical_pairs() {
            let (a, b) = (pair.index.0 * shape.width + pair.index.1, pair.twin.0 * shape.width + pair.twin.1);
            let bump = |d: f64| {
                let mut amp = s.amplitude.clone();
                amp[a] += d;
                if b != a {
                    amp[b] += d;
                }
                loss(&synthesize(shape, &amp, &s.phase).unwrap().image)
            };
            let members = if a == b { 1.0 } else { 2.0 };
            numeric.push((bump(h) - bump(-h)) / (2.0 * h) / members);
            analytic.push(ga[a]);
        }
        worst_amp = worst_amp.max(relative_error(&analytic, &numeric));
    }
    Ok(outcome(
        worst_px < 1e-3 && worst_amp < 1e-3,
        format!("worst relative error: pixel {worst_px:.2e}, amplitude {worst_amp:.2e} over 50 pairs"),
    ))
}

fn js_correctness() -> Check {
    let kl =
        |p: &[f64], q: &[f64]| p.iter().zip(q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (n, k) = (rng.random_range(2..=5), rng.random_range(2..=10));
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let r: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-6).collect();
                let s: f64 = r.iter().sum();
                r.iter().map(|v| v / s).collect()
            })
            .collect();
        let m: Vec<f64> = (0..k).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        let oracle = rows.iter().map(|r| kl(r, &m)).sum::<f64>() / n as f64;
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        worst = worst.max((js_divergence(&refs).map_err(|e| e.to_string())? - oracle).abs());
    }
    let opposed = js_divergence(&[&[1.0, 0.0], &[0.0, 1.0]]).map_err(|e| e.to_string())?;
    let same = js_divergence(&[&[0.3, 0.7], &[0.3, 0.7], &[0.3, 0.7]]).map_err(|e| e.to_string())?;
    let ok = worst < 1e-10 && (opposed - std::f64::consts::LN_2).abs() < 1e-10 && same.abs() < 1e-10;
    Ok(outcome(ok, format!("oracle gap {worst:.1e}, opposed one-hot {opposed:.12}, identical {same:.1e}")))
}

fn determinism() -> Check {
    let roots = [tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?];
    let mut artifacts = Vec::new();
    for root in &roots {
        let root = root.path();
        let ws = Workspace::new(root).map_err(|e| e.to_string())?;
        let mut run_dirs = Vec::new();
        let mut sada_record = None;
        for preset in [Preset::Erm, Preset::Full] {
            let cfg = tiny_config(root, preset);
            let (rec, _) = run_train(&cfg, &ws, None).map_err(|e| e.to_string())?;
            run_dirs.push(ws.run_dir(&cfg));
            sada_record = Some((cfg, rec));
        }
        let (cfg, rec) = sada_record.unwrap();
        let data = load_desk_data(&cfg).map_err(|e| e.to_string())?;
        let model = load_checkpoint(&root.join(&rec.seeds[0].artifacts.checkpoint)).map_err(|e| e.to_string())?;
        let map = sensitivity_command(&model, &data.train, &cfg.map, 0, &root.join("sensitivity"), "map")
            .map_err(|e| e.to_string())?;
        augment_command(&model, &map, &data.train, &cfg.train.augmentation, 16, 0, &root.join("augment"))
            .map_err(|e| e.to_string())?;
        run_report(&run_dirs, &root.join("report")).map_err(|e| e.to_string())?;
        artifacts.push(comparable_artifacts(root));
    }
    let n = artifacts[0].len();
    Ok(match first_difference(&artifacts[0], &artifacts[1]) {
        None => outcome(
            true,
            format!("{n} CSV/JSON files identical across two fresh roots (train, sensitivity, augment, report)"),
        ),
        Some(d) => outcome(false, d),
    })
}

/// Settings of the desk benchmark shared by every preset.
fn benchmark_config(root: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.train.aug_fraction = 0.5;
    cfg.output_dir = Some(root.to_path_buf());
    cfg
}

struct Benchmark {
    root: PathBuf,
    data: DeskData,
    records: Vec<(Preset, RunRecord)>,
    elapsed: Duration,
}

impl Benchmark {
    fn record(&self, preset: Preset) -> &RunRecord {
        &self.records.iter().find(|(p, _)| *p == preset).expect("preset was run").1
    }
}

const PRESETS: [Preset; 5] = [Preset::Erm, Preset::Sada3, Preset::Full, Preset::WoJs, Preset::WoSada];

fn run_benchmark(root: &Path) -> Result<Benchmark, String> {
    let start = Instant::now();
    let base = benchmark_config(root);
    let data = load_desk_data(&base).map_err(|e| e.to_string())?;
    let ws = Workspace::new(root).map_err(|e| e.to_string())?;
    let mut records = Vec::new();
    for preset in PRESETS {
        let t = Instant::now();
        let cfg = base.clone().with_preset(preset);
        let (rec, _) = run_train(&cfg, &ws, Some(&data)).map_err(|e| format!("{}: {e}", preset.name()))?;
        let targets: Vec<String> = rec.targets.iter().map(|t| format!("{} {:.3}", t.target, t.mean)).collect();
        eprintln!(
            "  {:8} clean {:.3}  {}  map l1 {:.4}  ({:.0}s)",
            preset.name(),
            rec.clean.mean,
            targets.join("  "),
            rec.map_l1.mean,
            t.elapsed().as_secs_f64()
        );
        records.push((preset, rec));
    }
    Ok(Benchmark { root: root.to_path_buf(), data, records, elapsed: start.elapsed() })
}

fn erm_model_and_map(bench: &Benchmark) -> Result<(ConvNet, SensitivityMap), String> {
    let art = &bench.record(Preset::Erm).seeds[0].artifacts;
    let model = load_checkpoint(&bench.root.join(&art.erm_checkpoint)).map_err(|e| e.to_string())?;
    let csv = bench.root.join(&art.erm_map);
    let stem = csv.file_stem().unwrap().to_string_lossy().into_owned();
    let map = SensitivityMap::load(csv.parent().unwrap(), &stem).map_err(|e| e.to_string())?;
    Ok((model, map))
}

fn algorithm_contract(bench: &Benchmark) -> Check {
    let (model, map) = erm_model_and_map(bench)?;
    let cfg = AugmentationConfig::default();
    let n = 500;
    let images: Vec<&Image> = bench.data.train.images[..n].iter().collect();
    let labels = &bench.data.train.labels[..n];
    let mut rngs: Vec<ChaCha8Rng> = (0..n as u64).map(|i| ChaCha8Rng::seed_from_u64(1000 + i)).collect();
    let mut refs: Vec<&mut ChaCha8Rng> = rngs.iter_mut().collect();
    let out = augment_batch(&images, labels, &model, &map.values, &cfg, &mut refs).map_err(|e| e.to_string())?;
    let mut violations = Vec::new();
    let mut effective = 0;
    for (k, (img, t)) in out.iter().enumerate() {
        if t.steps_taken > cfg.steps {
            violations.push(format!("sample {k}: {} steps", t.steps_taken));
        }
        if !img.is_unit_range() {
            violations.push(format!("sample {k}: pixels outside [0, 1]"));
        }
        if t.early_stopped && !t.prediction_changed {
            violations.push(format!("sample {k}: early stop without a flip"));
        }
        if t.prediction_changed || t.final_ce > t.initial_ce {
            effective += 1;
        }
    }
    // Amplitudes along the full T-step path of every sample stay >= 0.
    let mut min_amp = f64::INFINITY;
    for (k, img) in images.iter().enumerate() {
        let s = decompose(img).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + k as u64);
        let mut amp = init_amplitude(&s.amplitude, s.shape, cfg.epsilon, &mut rng).map_err(|e| e.to_string())?;
        min_amp = min_amp.min(amp.iter().copied().fold(f64::INFINITY, f64::min));
        for _ in 0..cfg.steps {
            amp = adversarial_step(&model, &amp, &s.phase, s.shape, labels[k], &map.values, cfg.delta)
                .map_err(|e| e.to_string())?;
            min_amp = min_amp.min(amp.iter().copied().fold(f64::INFINITY, f64::min));
        }
    }
    let rate = effective as f64 / n as f64;
    let pass = violations.is_empty() && min_amp >= 0.0 && rate >= 0.6;
    let mut detail = format!("{n} samples, flip-or-raise rate {rate:.3}, min amplitude {min_amp:.2e}");
    if let Some(v) = violations.first() {
        detail += &format!(", {} violations, first: {v}", violations.len());
    }
    Ok(outcome(pass, detail))
}

fn map_structure(bench: &Benchmark) -> Check {
    let (model, _) = erm_model_and_map(bench)?;
    let clean = bench.record(Preset::Erm).seeds[0].pretrained.clean;
    let cfg = MapConfig { sample_fraction: 0.1, ..benchmark_config(&bench.root).map };
    let map = sensitivity_command(&model, &bench.data.train, &cfg, 0, &bench.root.join("criterion-6"), "erm-map")
        .map_err(|e| e.to_string())?;
    let (central, outer) = central_and_outer_means(&map.values);
    Ok(outcome(
        clean >= 0.95 && central > outer,
        format!("ERM clean accuracy {clean:.3}; central mean {central:.4} vs outer mean {outer:.4}"),
    ))
}

fn target_gain(bench: &Benchmark) -> Check {
    let erm = bench.record(Preset::Erm);
    let sada = bench.record(Preset::Sada3);
    let mut pass = bench.elapsed < Duration::from_secs(3600);
    let mut parts = Vec::new();
    for t in &sada.targets {
        let base = erm.target(&t.target).map(|b| b.mean).unwrap_or(f64::NAN);
        let pre = sada.pretrained_targets.iter().find(|p| p.target == t.target).map_or(f64::NAN, |p| p.mean);
        let gain = (t.mean - base) * 100.0;
        pass &= gain >= 5.0;
        parts.push(format!(
            "{} {:.1} vs ERM {:.1} ({gain:+.1} pts; pretrained {:.1})",
            t.target,
            t.mean * 100.0,
            base * 100.0,
            pre * 100.0
        ));
    }
    Ok(outcome(pass, format!("{}; benchmark {:.0} s", parts.join("; "), bench.elapsed.as_secs_f64())))
}

fn sensitivity_suppression(bench: &Benchmark) -> Check {
    let (erm, sada) = (bench.record(Preset::Erm).map_l1.mean, bench.record(Preset::Sada3).map_l1.mean);
    Ok(outcome(sada < erm, format!("map l1: 3SADA {sada:.5} vs ERM {erm:.5} (3-seed means)")))
}

fn ablation_order(bench: &Benchmark) -> Check {
    let acc = |p| bench.record(p).mean_target_accuracy * 100.0;
    let (full, wo_js, wo_sada) = (acc(Preset::Full), acc(Preset::WoJs), acc(Preset::WoSada));
    Ok(outcome(
        full >= wo_js - 1.0 && full >= wo_sada - 1.0,
        format!("mean target accuracy: full {full:.2}, w/o JS {wo_js:.2}, w/o SADA {wo_sada:.2}"),
    ))
}

fn main() {
    let strict = std::env::var("SADA_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let kept = std::env::var_os("SADA_ACCEPTANCE_DIR").map(PathBuf::from);
    let temp = tempfile::tempdir().expect("temporary directory");
    let root = kept.unwrap_or_else(|| temp.path().to_path_buf());

    let mut results: Vec<(usize, &str, Check, Duration)> = Vec::new();
    let mut run = |id: usize, name: &'static str, f: &dyn Fn() -> Check| {
        eprintln!("criterion {id}: {name} ...");
        let t = Instant::now();
        let r = f();
        results.push((id, name, r, t.elapsed()));
    };
    run(1, "spectral round trip", &spectral_round_trip);
    run(2, "basis correctness", &basis_correctness);
    run(3, "gradient fidelity", &gradient_fidelity);
    run(5, "JS correctness", &js_correctness);
    run(10, "determinism", &determinism);

    eprintln!("desk benchmark in {} ...", root.display());
    let bench = run_benchmark(&root);
    let with_bench = |f: fn(&Benchmark) -> Check| -> Check {
        match &bench {
            Ok(b) => f(b),
            Err(e) => Err(format!("benchmark failed: {e}")),
        }
    };
    run(4, "augmentation loop contract", &|| with_bench(algorithm_contract));
    run(6, "sensitivity-map structure", &|| with_bench(map_structure));
    run(7, "directional generalization gain", &|| with_bench(target_gain));
    run(8, "sensitivity suppression", &|| with_bench(sensitivity_suppression));
    run(9, "ablation ordering", &|| with_bench(ablation_order));

    let limits = [(1, 10), (2, 30), (3, 120), (6, 900)];
    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (id, name, r, took) in results {
        let limit = limits.iter().find(|l| l.0 == id).map(|l| Duration::from_secs(l.1));
        let (mut pass, mut detail) = match r {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if let Some(l) = limit.filter(|l| took > *l) {
            pass = false;
            detail += &format!("; over the {} s budget", l.as_secs());
        }
        failed += usize::from(!pass);
        println!(
            "{} criterion {id:>2} {name}: {detail} [{:.1} s]",
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64()
        );
    }
    println!("{failed} of 10 criteria failed");
    if strict && failed > 0 {
        std::process::exit(1);
    }
}
