//! Synthetic CMAPSS-format data and helpers for running the binary.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Sensors that never move in the generated data, as in FD001.
pub const FLAT_SENSORS: [usize; 6] = [1, 5, 10, 16, 18, 19];

pub struct Fleet {
    pub train: String,
    pub test: String,
    pub rul: String,
}

/// Units degrade exponentially towards failure. `shift` moves the
/// operating point and sensor baselines by roughly `shift` training
/// standard deviations, for out-of-distribution sets.
pub fn fleet(seed: u64, train_units: u32, test_units: u32, life: (u32, u32), shift: f64) -> Fleet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.05).unwrap();
    let unit_rows = |rng: &mut ChaCha8Rng, id: u32, cycles: u32, total: u32| {
        let mut out = String::new();
        for c in 1..=cycles {
            let wear = ((c as f64 / total as f64) * 3.0).exp() / 3.0f64.exp();
            let s1 = shift * 0.004 + rng.random_range(-0.002..0.002);
            let s2 = shift * 0.0006 + rng.random_range(-0.0003..0.0003);
            out.push_str(&format!("{id} {c} {s1:.4} {s2:.4} 100.0"));
            for k in 1..=21usize {
                let v = if FLAT_SENSORS.contains(&k) {
                    500.0 + k as f64
                } else {
                    let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                    100.0 * k as f64 + shift * 3.0 + sign * (2.0 + k as f64 * 0.1) * wear + noise.sample(rng)
                };
                out.push_str(&format!(" {v:.4}"));
            }
            out.push('\n');
        }
        out
    };
    let mut train = String::new();
    for id in 1..=train_units {
        let total = rng.random_range(life.0..=life.1);
        train.push_str(&unit_rows(&mut rng, id, total, total));
    }
    let mut test = String::new();
    let mut rul = String::new();
    for id in 1..=test_units {
        let total = rng.random_range(life.0..=life.1);
        let seen = rng.random_range(total / 4..total).max(1);
        test.push_str(&unit_rows(&mut rng, id, seen, total));
        rul.push_str(&format!("{}\n", total - seen));
    }
    Fleet { train, test, rul }
}

pub struct Workspace {
    pub dir: tempfile::TempDir,
}

impl Workspace {
    pub fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn write_fleet(&self, prefix: &str, f: &Fleet) -> (PathBuf, PathBuf, PathBuf) {
        let p = (
            self.path(&format!("train_{prefix}.txt")),
            self.path(&format!("test_{prefix}.txt")),
            self.path(&format!("RUL_{prefix}.txt")),
        );
        std::fs::write(&p.0, &f.train).unwrap();
        std::fs::write(&p.1, &f.test).unwrap();
        std::fs::write(&p.2, &f.rul).unwrap();
        p
    }
}

/// Small, fast model settings for the generated fleets.
pub const TINY: [&str; 10] = [
    "--set",
    "preprocess.window_length=12",
    "--set",
    "model.recurrent_layers=[6]",
    "--set",
    "training.max_epochs=4",
    "--set",
    "training.batch_size=16",
    "--set",
    "training.learning_rate=0.01",
];

pub fn rulens(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rulens"))
        .args(args)
        .env("RULENS_LOG", "warn")
        .output()
        .expect("binary runs")
}

pub fn run_ok(args: &[&str]) -> String {
    let out = rulens(args);
    assert!(
        out.status.success(),
        "rulens {args:?} failed ({:?}):\n{}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Data rows of a TSV output, without comment lines, header first.
pub fn tsv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split('\t').map(str::to_string).collect())
        .collect()
}

/// All files under `dir` with their bytes, sorted by relative path.
pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
