use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cprl::report::RunReport;
use serde_json::{json, Value};

fn tiny_config() -> Value {
    json!({
        "seed": 3,
        "output_root": null,
        "data": {
            "seed": 1,
            "generate": { "scenes": 6, "levels": 3, "image_size": 8, "label_noise": 0.0 },
            "split_seed": 0,
            "label_range": [0.0, 1.0]
        },
        "model": {
            "kind": "cprl",
            "input_channels": 1,
            "image_size": 8,
            "widths": [3, 4],
            "cprl": { "channels": 4, "bias": 0.4, "temperature": 0.1, "s_branch": "as_printed" }
        },
        "train": {
            "epochs": 1,
            "batch_size": 8,
            "optimizer": { "lr": 0.001, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "weight_decay": 0.01 },
            "pns": true,
            "phase_cycle": ["none", "sf", "nc"],
            "min_objective": "full",
            "ascent_steps": 1,
            "power_iterations": 1,
            "grad_clip": 5.0
        },
        "attack": {
            "family": "fgsm",
            "epsilon": 0.00392156862745098,
            "step_ratio": 0.25,
            "steps": 3,
            "random_start": false,
            "start_seed": 0
        },
        "sweep": { "epsilon_grid": [0.0, 0.00392156862745098] },
        "analysis": { "images": 2, "landscape": { "extent": 1.0, "resolution": 3, "direction_seed": 0 } }
    })
}

struct Fixture {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        Self::with(tiny_config())
    }

    fn with(cfg: Value) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("config.json");
        fs::write(&config, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        Fixture { dir, config }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("runs")
    }

    fn run(&self, sub: &str, extra: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_cprl"));
        cmd.arg(sub)
            .arg("--config")
            .arg(&self.config)
            .env_remove("CPRL_OUT_ROOT");
        if !extra.contains(&"--out") {
            cmd.arg("--out").arg(self.out());
        }
        cmd.args(extra).output().unwrap()
    }

    fn ok(&self, sub: &str, extra: &[&str]) -> PathBuf {
        let o = self.run(sub, extra);
        assert!(
            o.status.success(),
            "{sub} failed: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        PathBuf::from(String::from_utf8(o.stdout).unwrap().trim())
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn zero_epoch_train_writes_checkpoint_and_empty_curve() {
    let f = Fixture::new();
    let run = f.ok("train", &["--epochs", "0"]);
    assert!(run.join("model.ckpt").is_file());
    assert!(run.join("best.ckpt").is_file());
    let curve = fs::read_to_string(run.join("curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1, "{curve}");
    assert!(!run.join("run.lock").exists());
    let report = RunReport::load(&run.join("report.json")).unwrap();
    assert_eq!(report.command, "train");
    assert_eq!(report.config.train.epochs, 0);
    assert!(report.curve.is_empty());
}

#[test]
fn zero_budget_attack_equals_clean() {
    let f = Fixture::new();
    let ckpt = f.ok("train", &[]).join("model.ckpt");
    for attack in ["fgsm", "pgd", "reflect"] {
        let run = f.ok(
            "attack",
            &[
                "--checkpoint",
                ckpt.to_str().unwrap(),
                "--attack",
                attack,
                "--epsilon",
                "0",
            ],
        );
        let rows = csv_rows(&run.join("metrics.csv"));
        assert_eq!(rows.len(), 2);
        // split, model, attack, epsilon, then srcc, plcc, mse, hash.
        assert_eq!(rows[1][2], attack.replace("reflect", "score_reflection"));
        assert_eq!(rows[0][4..], rows[1][4..], "{attack}: {rows:?}");
    }
}

#[test]
fn sweep_matches_individual_attacks() {
    let f = Fixture::new();
    let ckpt = f.ok("train", &[]).join("model.ckpt");
    let ck = ckpt.to_str().unwrap();
    let sweep = f.ok(
        "sweep",
        &[
            "--checkpoint",
            ck,
            "--attack",
            "pgd",
            "--epsilon-grid",
            "0,0.00392156862745098",
        ],
    );
    let report = RunReport::load(&sweep.join("report.json")).unwrap();
    assert_eq!(report.sweep.len(), 2);
    assert_eq!(csv_rows(&sweep.join("sweep.csv")).len(), 2);
    for row in &report.sweep {
        let run = f.ok(
            "attack",
            &[
                "--checkpoint",
                ck,
                "--attack",
                "pgd",
                "--epsilon",
                &row.epsilon.to_string(),
            ],
        );
        let attacked = &RunReport::load(&run.join("report.json")).unwrap().metrics[1];
        assert_eq!(attacked.epsilon, row.epsilon);
        assert_eq!(
            (attacked.srcc, attacked.plcc, attacked.mse),
            (row.srcc, row.plcc, row.mse)
        );
    }
}

#[test]
fn reruns_are_byte_identical() {
    let f = Fixture::new();
    let a = f.ok("train", &[]);
    let b = f.ok("train", &[]);
    assert_ne!(a, b);
    assert_eq!(files(&a), files(&b));
    let ck = a.join("model.ckpt");
    for sub in ["attack", "sweep", "landscape", "dump"] {
        let x = f.ok(sub, &["--checkpoint", ck.to_str().unwrap()]);
        let y = f.ok(sub, &["--checkpoint", ck.to_str().unwrap()]);
        assert_eq!(files(&x), files(&y), "{sub}");
        assert!(!x.join("run.lock").exists());
    }
    let g1 = f.ok("generate", &[]);
    let g2 = f.ok("generate", &[]);
    assert_eq!(files(&g1.join("dataset")), files(&g2.join("dataset")));
}

#[test]
fn generated_archive_trains_like_generated_data() {
    let f = Fixture::new();
    let gen = f.ok("generate", &[]);
    let direct = f.ok("train", &[]);
    let ingested = f.ok(
        "train",
        &["--dataset", gen.join("dataset").to_str().unwrap()],
    );
    assert_eq!(
        fs::read(direct.join("model.ckpt")).unwrap(),
        fs::read(ingested.join("model.ckpt")).unwrap()
    );
    assert_eq!(
        fs::read(direct.join("curve.csv")).unwrap(),
        fs::read(ingested.join("curve.csv")).unwrap()
    );
}

#[test]
fn output_root_comes_from_environment() {
    let f = Fixture::new();
    let root = f.dir.path().join("from_env");
    let o = Command::new(env!("CARGO_BIN_EXE_cprl"))
        .args(["train", "--epochs", "0", "--config"])
        .arg(&f.config)
        .env("CPRL_OUT_ROOT", &root)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = PathBuf::from(String::from_utf8(o.stdout).unwrap().trim());
    assert_eq!(run.parent().unwrap(), root);
    // --out wins over the environment.
    let o = Command::new(env!("CARGO_BIN_EXE_cprl"))
        .args(["print-config", "--config"])
        .arg(&f.config)
        .arg("--out")
        .arg(f.out())
        .env("CPRL_OUT_ROOT", &root)
        .output()
        .unwrap();
    let printed: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(printed["output_root"], json!(f.out().display().to_string()));
}

#[test]
fn exit_codes() {
    let f = Fixture::new();

    let mut missing = tiny_config();
    missing.as_object_mut().unwrap().remove("seed");
    let bad = Fixture::with(missing);
    assert_eq!(code(&bad.run("train", &[])), 2);

    let mut unknown = tiny_config();
    unknown["train"]["momentum"] = json!(0.9);
    assert_eq!(code(&Fixture::with(unknown).run("train", &[])), 2);

    assert_eq!(code(&f.run("attack", &[])), 2);
    assert_eq!(code(&f.run("sweep", &["--epsilon-grid", "0.02,0.01"])), 2);

    let ckpt = f.ok("train", &["--epochs", "0"]).join("model.ckpt");
    let ck = ckpt.to_str().unwrap();
    assert_eq!(
        code(&f.run("attack", &["--checkpoint", ck, "--model", "baseline"])),
        3
    );
    let garbage = f.dir.path().join("garbage.ckpt");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    assert_eq!(
        code(&f.run("attack", &["--checkpoint", garbage.to_str().unwrap()])),
        3
    );

    let file = f.dir.path().join("plain_file");
    fs::write(&file, "x").unwrap();
    assert_eq!(code(&f.run("train", &["--out", file.to_str().unwrap()])), 4);

    let empty = f.dir.path().join("empty_dataset");
    fs::create_dir(&empty).unwrap();
    assert_eq!(
        code(&f.run("train", &["--dataset", empty.to_str().unwrap()])),
        5
    );
}
