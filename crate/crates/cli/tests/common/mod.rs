#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use morphscope::preprocess::{encode_ppm, ImageTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_morphscope"));
    cmd.env_remove("MORPHSCOPE_CACHE");
    cmd
}

/// Runs the binary in `dir` and returns its output.
pub fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Runs and asserts exit 0.
pub fn ok(dir: &Path, args: &[&str]) -> String {
    let o = run(dir, args);
    assert!(o.status.success(), "{args:?} failed ({:?}):\n{}{}", o.status.code(), stdout(&o), stderr(&o));
    stdout(&o)
}

/// Noise image; morphs are brighter so the classes are separable.
pub fn noise_ppm(side: usize, seed: u64, offset: f32) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = ImageTensor::from_fn(side, side, |_, _, _| (rng.random_range(0.0f32..0.6) + offset).min(1.0));
    encode_ppm(&img)
}

/// Writes `n_bona` bona fide images plus `n_morph` morphs per algorithm (all digital)
/// under `dir/imgs` and returns the manifest path.
pub fn write_dataset(dir: &Path, side: usize, n_bona: usize, algorithms: &[&str], n_morph: usize) -> PathBuf {
    fs::create_dir_all(dir.join("imgs")).unwrap();
    let mut lines = Vec::new();
    let mut seed = 0u64;
    for i in 0..n_bona {
        let name = format!("imgs/bona_{i}.ppm");
        fs::write(dir.join(&name), noise_ppm(side, seed, 0.0)).unwrap();
        seed += 1;
        lines.push(format!(r#"{{"path": "{name}", "label": "bona", "processing": "digital", "subject": "s{i}"}}"#));
    }
    for (a, alg) in algorithms.iter().enumerate() {
        for i in 0..n_morph {
            let name = format!("imgs/morph_{a}_{i}.ppm");
            fs::write(dir.join(&name), noise_ppm(side, seed, 0.4)).unwrap();
            seed += 1;
            lines.push(format!(
                r#"{{"path": "{name}", "label": "morph", "morph_algorithm": "{alg}", "processing": "digital", "subject": "m{a}_{i}"}}"#
            ));
        }
    }
    let path = dir.join("manifest.jsonl");
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    path
}

pub const SMALL_GEOMETRY: [&str; 12] =
    ["--image-side", "16", "--patch-side", "8", "--hidden-dim", "16", "--depth", "2", "--heads", "2", "--mlp-dim", "32"];

/// Writes small random weights to `dir/w.msw`.
pub fn small_weights(dir: &Path) {
    let mut args = vec!["init-weights", "--out", "w.msw"];
    args.extend(SMALL_GEOMETRY);
    ok(dir, &args);
}

pub fn is_svg(text: &str) -> bool {
    text.starts_with("<?xml") && text.contains("<svg") && text.trim_end().ends_with("</svg>")
}
