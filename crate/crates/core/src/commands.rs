//! The operations behind each `cprl` subcommand.
//!
//! Every command resolves an effective [`RunConfig`], creates a fresh run
//! directory and writes `report.json` plus its tables there.

use std::path::{Path, PathBuf};

use crate::analysis::{activation_dump, landscape};
use crate::attacks::{attack_sweep, AttackFamily};
use crate::config::RunConfig;
use crate::data::{export, generate, ingest, Dataset, SplitSpec};
use crate::error::{CprlError, Result};
use crate::metrics::MetricTriple;
use crate::model::{Model, ModelKind};
use crate::report::{
    matrix_csv, ActivationRecord, CurveRecord, DatasetSummary, LandscapeRecord, MetricRow, RunDir,
    RunReport, SweepRecord, REPORT_FILE,
};
use crate::trainer::fit;

pub const OUT_ROOT_ENV: &str = "CPRL_OUT_ROOT";
pub const SPLIT_FILE: &str = "split.json";

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub model: Option<ModelKind>,
    pub attack: Option<AttackFamily>,
    pub epsilon: Option<f64>,
    pub bias: Option<f64>,
    pub temperature: Option<f64>,
    pub no_pns: bool,
    pub epsilon_grid: Option<Vec<f64>>,
    pub epochs: Option<usize>,
}

/// Inputs that are paths rather than configuration.
#[derive(Debug, Clone, Default)]
pub struct Inputs {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

/// Loads `config` (or the defaults), applies `ov`, resolves the output root
/// and validates the result.
pub fn effective_config(config: Option<&Path>, ov: &Overrides) -> Result<RunConfig> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = ov.seed {
        cfg.seed = s;
    }
    if let Some(k) = ov.model {
        cfg.model.kind = k;
    }
    if let Some(a) = ov.attack {
        cfg.attack.family = a;
    }
    if let Some(e) = ov.epsilon {
        cfg.attack.epsilon = e;
    }
    if let Some(b) = ov.bias {
        cfg.model.cprl.bias = b;
    }
    if let Some(t) = ov.temperature {
        cfg.model.cprl.temperature = t;
    }
    if ov.no_pns {
        cfg.train.pns = false;
    }
    if let Some(g) = &ov.epsilon_grid {
        cfg.sweep.epsilon_grid = g.clone();
    }
    if let Some(e) = ov.epochs {
        cfg.train.epochs = e;
    }
    let root = match (&ov.out, &cfg.output_root) {
        (Some(p), _) => p.display().to_string(),
        (None, Some(r)) => r.clone(),
        (None, None) => std::env::var(OUT_ROOT_ENV).unwrap_or_else(|_| "runs".into()),
    };
    cfg.output_root = Some(root);
    cfg.validate()?;
    Ok(cfg)
}

fn open_run(cfg: &RunConfig) -> Result<RunDir> {
    let root = cfg.output_root.as_deref().unwrap_or("runs");
    RunDir::create(Path::new(root), &cfg.hash())
}

struct Loaded {
    train: Dataset,
    test: Dataset,
    split: SplitSpec,
    summary: DatasetSummary,
}

fn load_data(cfg: &RunConfig, dataset: Option<&Path>) -> Result<Loaded> {
    let (data, split, source) = match dataset {
        Some(dir) => {
            let data = ingest(dir, &cfg.ingest_options())?;
            let split_path = dir.join(SPLIT_FILE);
            let split = if split_path.is_file() {
                SplitSpec::load(&split_path)?
            } else {
                SplitSpec::new(&data, cfg.data.split_seed)?
            };
            (data, split, dir.display().to_string())
        }
        None => {
            if cfg.data.generate.image_size != cfg.model.image_size {
                return Err(CprlError::Config(format!(
                    "generated image size {} differs from model input size {}",
                    cfg.data.generate.image_size, cfg.model.image_size
                )));
            }
            if cfg.model.input_channels != 1 {
                return Err(CprlError::Config("generated data is single-channel".into()));
            }
            let data = generate(&cfg.data.generate, cfg.data.seed)?;
            let split = SplitSpec::new(&data, cfg.data.split_seed)?;
            (data, split, "generated".to_string())
        }
    };
    let (train, test) = split.apply(&data)?;
    let summary = DatasetSummary {
        source,
        samples: data.len(),
        train_samples: train.len(),
        test_samples: test.len(),
        train_scenes: split.train_scenes.clone(),
        test_scenes: split.test_scenes.clone(),
    };
    Ok(Loaded {
        train,
        test,
        split,
        summary,
    })
}

fn load_model(cfg: &RunConfig, inputs: &Inputs) -> Result<Model> {
    let path = inputs
        .checkpoint
        .as_deref()
        .ok_or_else(|| CprlError::Config("this command needs --checkpoint".into()))?;
    Model::load(path, cfg.model)
}

fn finish(run: &RunDir, mut report: RunReport) -> Result<PathBuf> {
    report.artifacts.push(REPORT_FILE.into());
    run.write_json(REPORT_FILE, &report)?;
    Ok(run.path().to_path_buf())
}

fn base_notes(cfg: &RunConfig) -> Vec<String> {
    vec![format!(
        "gradients clipped to global norm {} before every optimizer step",
        cfg.train.grad_clip
    )]
}

fn first_n(data: &Dataset, n: usize) -> Result<(cprl_autodiff::Tensor, Vec<f64>)> {
    let idx: Vec<usize> = (0..n.min(data.len())).collect();
    data.batch(&idx)
}

/// Writes a dataset archive and its split to `<run>/dataset`.
pub fn cmd_generate(cfg: &RunConfig) -> Result<PathBuf> {
    let run = open_run(cfg)?;
    let loaded = load_data(cfg, None)?;
    let mut all = loaded.train.samples().to_vec();
    all.extend_from_slice(loaded.test.samples());
    all.sort_by_key(|s| (s.scene_id, s.distortion, s.level));
    let dir = run.join("dataset");
    export(&Dataset::new(all)?, &dir).map_err(|e| match e {
        CprlError::Io(io) => CprlError::Output {
            path: dir.clone(),
            reason: io.to_string(),
        },
        other => other,
    })?;
    loaded.split.save(&dir.join(SPLIT_FILE))?;
    let mut report = RunReport::new("generate", cfg);
    report.dataset = Some(loaded.summary);
    report.artifacts = vec![
        "dataset/manifest.csv".into(),
        format!("dataset/{SPLIT_FILE}"),
    ];
    finish(&run, report)
}

/// Trains from the config seed and writes `model.ckpt` (last epoch),
/// `best.ckpt` (best held-out SRCC) and `curve.csv`.
pub fn cmd_train(cfg: &RunConfig, inputs: &Inputs) -> Result<PathBuf> {
    let run = open_run(cfg)?;
    let loaded = load_data(cfg, inputs.dataset.as_deref())?;
    loaded.split.save(&run.join(SPLIT_FILE))?;
    let model = Model::new(cfg.model, cfg.seed)?;
    let hash = cfg.hash();
    let mut report = RunReport::new("train", cfg);
    report.notes = base_notes(cfg);
    report.notes.push(format!(
        "phase cycle {:?}, pns {}, min objective {:?}, ascent steps {}",
        cfg.train.phase_cycle, cfg.train.pns, cfg.train.min_objective, cfg.train.ascent_steps
    ));
    let out = fit(model, &loaded.train, &loaded.test, &cfg.train, cfg.seed)?;
    let save = |m: &Model, name: &str| {
        let p = run.join(name);
        m.save(&p)
    };
    save(&out.model, "model.ckpt")?;
    save(&out.best, "best.ckpt")?;
    if let Some(e) = out.best_epoch {
        report.notes.push(format!("best.ckpt is epoch {e}"));
    }
    report.curve = out
        .curve
        .iter()
        .map(|r| CurveRecord {
            config_hash: hash.clone(),
            epoch: r.epoch,
            split: r.split.clone(),
            srcc: r.metrics.srcc,
            plcc: r.metrics.plcc,
            mse: r.metrics.mse,
            loss: r.loss,
            phase_counts: format!(
                "none={};sf={};nc={}",
                r.phase_counts[0], r.phase_counts[1], r.phase_counts[2]
            ),
        })
        .collect();
    let rows: Vec<Vec<String>> = report.curve.iter().map(|r| r.csv()).collect();
    run.write_csv("curve.csv", &CurveRecord::HEADER, &rows)?;
    let kind = cfg.model.kind.as_str();
    for (name, split) in [("train", &loaded.train), ("test", &loaded.test)] {
        let (x, y) = split.all()?;
        let m = MetricTriple::compute(&out.model.predict(&x)?, &y)?;
        report
            .metrics
            .push(MetricRow::new(&hash, name, kind, "none", 0.0, m));
    }
    let rows: Vec<Vec<String>> = report.metrics.iter().map(|r| r.csv()).collect();
    run.write_csv("metrics.csv", &MetricRow::HEADER, &rows)?;
    report.dataset = Some(loaded.summary);
    report.artifacts = vec![
        SPLIT_FILE.into(),
        "model.ckpt".into(),
        "best.ckpt".into(),
        "curve.csv".into(),
        "metrics.csv".into(),
    ];
    finish(&run, report)
}

/// Clean and attacked metrics of a checkpoint on the held-out split.
pub fn cmd_attack(cfg: &RunConfig, inputs: &Inputs) -> Result<PathBuf> {
    let model = load_model(cfg, inputs)?;
    let run = open_run(cfg)?;
    let loaded = load_data(cfg, inputs.dataset.as_deref())?;
    let (x, y) = loaded.test.all()?;
    let hash = cfg.hash();
    let kind = cfg.model.kind.as_str();
    let clean = MetricTriple::compute(&model.predict(&x)?, &y)?;
    let res = cfg.attack.run(&model, &x, &y)?;
    let attacked = MetricTriple::compute(&res.scores_after, &y)?;
    let mut report = RunReport::new("attack", cfg);
    report.notes = base_notes(cfg);
    report.notes.push(format!(
        "{} with epsilon {} (pgd step {} x {})",
        cfg.attack.family.as_str(),
        cfg.attack.epsilon,
        cfg.attack.step_size(),
        cfg.attack.steps
    ));
    report.metrics = vec![
        MetricRow::new(&hash, "test", kind, "none", 0.0, clean),
        MetricRow::new(
            &hash,
            "test",
            kind,
            cfg.attack.family.as_str(),
            cfg.attack.epsilon,
            attacked,
        ),
    ];
    let rows: Vec<Vec<String>> = report.metrics.iter().map(|r| r.csv()).collect();
    run.write_csv("metrics.csv", &MetricRow::HEADER, &rows)?;
    report.dataset = Some(loaded.summary);
    report.artifacts = vec!["metrics.csv".into()];
    finish(&run, report)
}

/// Attacked metrics over the configured epsilon grid.
pub fn cmd_sweep(cfg: &RunConfig, inputs: &Inputs) -> Result<PathBuf> {
    let model = load_model(cfg, inputs)?;
    let run = open_run(cfg)?;
    let loaded = load_data(cfg, inputs.dataset.as_deref())?;
    let (x, y) = loaded.test.all()?;
    let hash = cfg.hash();
    let rows = attack_sweep(&model, &x, &y, &cfg.attack, &cfg.sweep.epsilon_grid)?;
    let mut report = RunReport::new("sweep", cfg);
    report.notes = base_notes(cfg);
    report.sweep = rows
        .iter()
        .map(|r| SweepRecord {
            config_hash: hash.clone(),
            attack: cfg.attack.family.as_str().into(),
            epsilon: r.epsilon,
            srcc: r.metrics.srcc,
            plcc: r.metrics.plcc,
            mse: r.metrics.mse,
        })
        .collect();
    let csv_rows: Vec<Vec<String>> = report.sweep.iter().map(|r| r.csv()).collect();
    run.write_csv("sweep.csv", &SweepRecord::HEADER, &csv_rows)?;
    report.dataset = Some(loaded.summary);
    report.artifacts = vec!["sweep.csv".into()];
    finish(&run, report)
}

/// Output landscapes around the first held-out images.
pub fn cmd_landscape(cfg: &RunConfig, inputs: &Inputs) -> Result<PathBuf> {
    let model = load_model(cfg, inputs)?;
    let run = open_run(cfg)?;
    let loaded = load_data(cfg, inputs.dataset.as_deref())?;
    let hash = cfg.hash();
    let spec = cfg.analysis.landscape;
    let (x, y) = first_n(&loaded.test, cfg.analysis.images)?;
    let mut report = RunReport::new("landscape", cfg);
    for (i, label) in y.iter().enumerate() {
        let xi = x.select_rows(&[i]);
        let l = landscape(&model, &xi, *label, &spec)?;
        let file = format!("landscape_{i:03}.csv");
        run.write_text(&file, &matrix_csv(&l.scores))?;
        report.landscapes.push(LandscapeRecord {
            config_hash: hash.clone(),
            image: i,
            label: *label,
            clean: l.clean,
            range: l.range(),
            file: file.clone(),
        });
        report.artifacts.push(file);
    }
    let axes = serde_json::json!({
        "config_hash": hash,
        "rows": "fgsm sign direction, pixel units",
        "cols": "random sign direction, pixel units",
        "axis": spec.axis(),
        "extent": spec.extent,
        "resolution": spec.resolution,
        "direction_seed": spec.direction_seed,
        "images": report.landscapes,
    });
    run.write_json("landscape_axes.json", &axes)?;
    report.artifacts.push("landscape_axes.json".into());
    report.dataset = Some(loaded.summary);
    finish(&run, report)
}

/// Pooled channel activations for clean and attacked held-out images.
pub fn cmd_dump(cfg: &RunConfig, inputs: &Inputs) -> Result<PathBuf> {
    let model = load_model(cfg, inputs)?;
    let run = open_run(cfg)?;
    let loaded = load_data(cfg, inputs.dataset.as_deref())?;
    let hash = cfg.hash();
    let (x, y) = first_n(&loaded.test, cfg.analysis.images)?;
    let adv = cfg.attack.run(&model, &x, &y)?;
    let pairs = activation_dump(&model, &x, &adv.x_adv)?;
    let mut report = RunReport::new("dump", cfg);
    report.notes.push(format!(
        "mean over {} held-out images, attacked with {} at epsilon {}",
        y.len(),
        cfg.attack.family.as_str(),
        cfg.attack.epsilon
    ));
    report.activations = pairs
        .iter()
        .enumerate()
        .map(|(order, p)| ActivationRecord {
            config_hash: hash.clone(),
            order,
            channel: p.channel,
            clean: p.clean,
            adversarial: p.adversarial,
        })
        .collect();
    let rows: Vec<Vec<String>> = report.activations.iter().map(|r| r.csv()).collect();
    run.write_csv("activations.csv", &ActivationRecord::HEADER, &rows)?;
    report.dataset = Some(loaded.summary);
    report.artifacts = vec!["activations.csv".into()];
    finish(&run, report)
}
