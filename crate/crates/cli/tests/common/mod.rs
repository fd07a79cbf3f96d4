#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crowdlab_core::dataset_io::save_image;
use crowdlab_core::mcnn_fen::FenConfig;
use crowdlab_core::video_frames::frame_file_name;
use crowdlab_core::Tensor;

pub fn crowdlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crowdlab"))
        .args(args)
        .env_remove("CROWDLAB_CACHE")
        .output()
        .expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// The `run: <dir>` line printed by training commands.
pub fn run_dir(o: &Output) -> PathBuf {
    let out = stdout(o);
    let line = out
        .lines()
        .find_map(|l| l.strip_prefix("run: "))
        .unwrap_or_else(|| panic!("no run line in {out:?} / {}", stderr(o)));
    PathBuf::from(line)
}

/// Grayscale ramp brightening towards the bottom, with per-image offset and texture.
pub fn ramp_image(size: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let offset: f32 = rng.gen_range(0.0..0.3);
    let slope: f32 = rng.gen_range(0.4..0.7);
    let noise: f32 = rng.gen_range(0.0..0.08);
    Tensor::from_fn(&[size, size, 1], |i| {
        let y = (i / size) as f32 / (size - 1) as f32;
        (offset + slope * y + noise * (rng.gen::<f32>() - 0.5)).clamp(0.0, 1.0)
    })
}

/// `n` PNG images with random head points and a manifest listing them.
pub fn write_counting_fixture(dir: &Path, n: usize, size: usize, seed: u64) -> PathBuf {
    fs::create_dir_all(dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    for i in 0..n {
        let name = format!("img_{i:03}.png");
        save_image(&ramp_image(size, &mut rng), dir.join(&name)).unwrap();
        let k = rng.gen_range(1..6);
        let points: Vec<[f64; 2]> = (0..k)
            .map(|_| [rng.gen_range(0.0..size as f64), rng.gen_range(0.0..size as f64)])
            .collect();
        records.push(json!({"image": name, "width": size, "height": size, "points": points}));
    }
    let manifest = dir.join("manifest.json");
    let doc = json!({"name": "fixture", "split": "train", "records": records});
    fs::write(&manifest, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
    manifest
}

/// One PNG-directory clip whose frame `k` is `frame(k)`.
pub fn write_png_clip(dir: &Path, n: usize, fps: f64, frame: impl Fn(usize) -> Tensor<f32>) {
    fs::create_dir_all(dir).unwrap();
    for k in 0..n {
        save_image(&frame(k), dir.join(frame_file_name(k))).unwrap();
    }
    fs::write(dir.join("meta.json"), format!("{{\"fps\": {fps}}}")).unwrap();
}

/// Bright square on a dark background; `on = false` leaves the frame dark.
pub fn blob_frame(size: usize, top: usize, left: usize, on: bool) -> Tensor<f32> {
    let b = size / 3;
    Tensor::from_fn(&[size, size, 3], |i| {
        let p = i / 3;
        let (y, x) = (p / size, p % size);
        let inside = (top..top + b).contains(&y) && (left..left + b).contains(&x);
        if on && inside {
            0.9
        } else {
            0.1
        }
    })
}

/// Violent clips flash a blob on and off; non-violent clips hold it still.
pub fn write_clip_fixture(dir: &Path, per_class: usize, frames: usize, size: usize) -> (PathBuf, PathBuf) {
    let violent = dir.join("violent");
    let nonviolent = dir.join("nonviolent");
    for c in 0..per_class {
        let (top, left) = (c % 2 * size / 2, c / 2 % 2 * size / 2);
        write_png_clip(&violent.join(format!("v{c:02}")), frames, 25.0, |k| {
            blob_frame(size, top, left, k % 2 == 0)
        });
        write_png_clip(&nonviolent.join(format!("n{c:02}")), frames, 25.0, |_| {
            blob_frame(size, top, left, true)
        });
    }
    (violent, nonviolent)
}

pub fn tiny_fen() -> FenConfig {
    FenConfig::with_widths(&[2, 2, 2, 2], 1)
}

/// A full counting + clip workspace with a config tiny enough for seconds-long runs.
pub struct Workspace {
    pub dir: tempfile::TempDir,
    pub config: PathBuf,
    pub manifest: PathBuf,
}

pub fn tiny_workspace() -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_counting_fixture(&dir.path().join("counting"), 3, 24, 11);
    let (violent, nonviolent) = write_clip_fixture(&dir.path().join("clips"), 2, 5, 16);
    let cfg = json!({
        "seed": 7,
        "output": "runs",
        "data": {
            "manifest": manifest,
            "violent_dir": violent,
            "nonviolent_dir": nonviolent,
        },
        "density": {"sigma": 2.0},
        "fen": tiny_fen(),
        "rotation_head": {"widths": [2, 2]},
        "stage1": {"steps": 3, "batch_size": 2, "crop_size": 16},
        "density_head": {"widths": [2, 2]},
        "stage2": {"steps": 3, "batch_size": 2, "crop_size": 16},
        "supervised": {"steps": 3, "batch_size": 2, "crop_size": 16},
        "frames": {"max_frames": 4, "size": 16},
        "anomaly": {
            "vgg": {"blocks": [
                {"width": 2, "convs": 1}, {"width": 2, "convs": 1}, {"width": 2, "convs": 1},
                {"width": 2, "convs": 1}, {"width": 3, "convs": 1}
            ]},
            "lstm": {"hidden": 4, "dropout": 0.2}
        },
        "anomaly_train": {"epochs": 2, "batch_size": 2}
    });
    let config = dir.path().join("config.json");
    fs::write(&config, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    Workspace { dir, config, manifest }
}

pub fn sorted_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}
