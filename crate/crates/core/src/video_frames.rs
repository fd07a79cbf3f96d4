//! Clip decoding, frame sampling and dataset assembly for violence detection.
//!
//! Clips are resampled to 25 fps, up to `max_frames` frames are kept at
//! uniform intervals, each frame is resized to a square and short clips are
//! zero-padded with a validity mask.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::augment::sample_clamped;
use crate::dataset_io::{load_image, read_checkpoint, write_checkpoint, CheckpointArchive};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const TARGET_FPS: f64 = 25.0;
pub const DEFAULT_MAX_FRAMES: usize = 20;
pub const DEFAULT_FRAME_SIZE: usize = 128;

/// Decoded frames (`[H, W, 3]` in `[0, 1]`) and the source frame rate.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedClip<T> {
    pub frames: Vec<Tensor<T>>,
    pub fps: Option<f64>,
    pub source: String,
}

pub trait ClipDecoder {
    fn accepts(&self, path: &Path) -> bool;
    fn decode(&self, path: &Path) -> Result<DecodedClip<f32>>;
}

#[derive(Deserialize)]
struct ClipMeta {
    fps: f64,
}

/// A directory of `frame_%05d.png` files plus `meta.json` with `{"fps": n}`.
#[derive(Clone, Copy, Debug, Default)]
pub struct PngDirDecoder;

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:05}.png")
}

impl ClipDecoder for PngDirDecoder {
    fn accepts(&self, path: &Path) -> bool {
        path.is_dir()
    }

    fn decode(&self, path: &Path) -> Result<DecodedClip<f32>> {
        let fail = |reason: String| Error::DecodeFailure {
            path: path.to_path_buf(),
            reason,
        };
        let meta = path.join("meta.json");
        let fps = if meta.exists() {
            let text = fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
            let m: ClipMeta = serde_json::from_str(&text).map_err(|e| fail(format!("meta.json: {e}")))?;
            Some(m.fps)
        } else {
            None
        };
        let mut names: Vec<String> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.starts_with("frame_") && n.ends_with(".png"))
            .collect();
        names.sort();
        let frames = names
            .iter()
            .map(|n| load_image::<f32>(path.join(n), 3).map_err(|e| fail(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        Ok(DecodedClip {
            frames,
            fps,
            source: path.display().to_string(),
        })
    }
}

/// `.avi` files decoded by the external `ffmpeg`/`ffprobe` tools.
#[derive(Clone, Copy, Debug, Default)]
pub struct FfmpegDecoder;

static SCRATCH: AtomicUsize = AtomicUsize::new(0);

impl ClipDecoder for FfmpegDecoder {
    fn accepts(&self, path: &Path) -> bool {
        path.is_file() && path.extension().is_some_and(|e| e.eq_ignore_ascii_case("avi"))
    }

    fn decode(&self, path: &Path) -> Result<DecodedClip<f32>> {
        let fail = |reason: String| Error::DecodeFailure {
            path: path.to_path_buf(),
            reason,
        };
        let probe = Command::new("ffprobe")
            .args(["-v", "error", "-select_streams", "v:0", "-show_entries", "stream=r_frame_rate", "-of", "csv=p=0"])
            .arg(path)
            .output()
            .map_err(|e| fail(format!("ffprobe: {e}")))?;
        if !probe.status.success() {
            return Err(fail(String::from_utf8_lossy(&probe.stderr).trim().to_string()));
        }
        let rate = String::from_utf8_lossy(&probe.stdout).trim().to_string();
        let fps = match rate.split_once('/') {
            Some((n, d)) => n.parse::<f64>().ok().zip(d.parse::<f64>().ok()).map(|(n, d)| n / d),
            None => rate.parse().ok(),
        }
        .filter(|f| f.is_finite() && *f > 0.0);

        let scratch = std::env::temp_dir().join(format!(
            "crowdlab-ffmpeg-{}-{}",
            std::process::id(),
            SCRATCH.fetch_add(1, Ordering::Relaxed)
        ));
        fs::create_dir_all(&scratch).map_err(|e| Error::io(&scratch, e))?;
        let status = Command::new("ffmpeg")
            .args(["-v", "error", "-i"])
            .arg(path)
            .arg(scratch.join("frame_%05d.png"))
            .status()
            .map_err(|e| fail(format!("ffmpeg: {e}")));
        let result = match status {
            Ok(s) if s.success() => PngDirDecoder.decode(&scratch).map(|mut c| {
                c.fps = fps;
                c.source = path.display().to_string();
                c
            }),
            Ok(s) => Err(fail(format!("ffmpeg exited with {s}"))),
            Err(e) => Err(e),
        };
        let _ = fs::remove_dir_all(&scratch);
        result
    }
}

/// PNG-directory decoder first, then the external `.avi` decoder.
pub fn default_decoders() -> Vec<Box<dyn ClipDecoder>> {
    vec![Box::new(PngDirDecoder), Box::new(FfmpegDecoder)]
}

/// `[T, S, S, 3]` frames with real frames first and zero padding after.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence<T> {
    pub frames: Tensor<T>,
    pub valid: Vec<bool>,
    pub label: Option<u8>,
    pub source: String,
}

impl<T: Scalar> FrameSequence<T> {
    pub fn valid_len(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn frame(&self, t: usize) -> Result<Tensor<T>> {
        let s = self.frames.shape();
        self.frames.rows(t, 1)?.reshape(&s[1..])
    }
}

/// Source index shown at each tick of the 25 fps timeline (nearest frame).
pub fn resample_indices(n: usize, fps: f64) -> Vec<usize> {
    let len = ((n as f64 * TARGET_FPS / fps).round() as usize).max(1);
    (0..len)
        .map(|k| ((k as f64 * fps / TARGET_FPS).round() as usize).min(n - 1))
        .collect()
}

/// `max_frames` positions at uniform intervals over `n` frames, or all of them.
pub fn uniform_indices(n: usize, max_frames: usize) -> Vec<usize> {
    if n <= max_frames {
        (0..n).collect()
    } else {
        (0..max_frames).map(|i| i * n / max_frames).collect()
    }
}

/// Bilinear resize with half-pixel centres; an equal-size resize is exact.
pub fn resize_bilinear<T: Scalar>(image: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (h, w, c) = match image.shape() {
        &[h, w, c] if h > 0 && w > 0 => (h, w, c),
        s => return Err(Error::Shape(format!("expected non-empty [H, W, C], got {s:?}"))),
    };
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let src = image.data();
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for r in 0..out_h {
        let y = (r as f64 + 0.5) * sy - 0.5;
        for col in 0..out_w {
            let x = (col as f64 + 0.5) * sx - 0.5;
            for ch in 0..c {
                out.push(sample_clamped(src, h, w, c, y, x, ch));
            }
        }
    }
    Tensor::from_vec(&[out_h, out_w, c], out)
}

pub fn extract_frames<T: Scalar>(clip: &DecodedClip<T>, max_frames: usize, target_size: usize) -> Result<FrameSequence<T>> {
    if clip.frames.is_empty() {
        return Err(Error::EmptyClip(clip.source.clone()));
    }
    let fps = match clip.fps {
        Some(f) if f.is_finite() && f > 0.0 => f,
        _ => return Err(Error::MissingFps(clip.source.clone())),
    };
    if max_frames == 0 || target_size == 0 {
        return Err(Error::InvalidConfig("max_frames and target size must be positive".into()));
    }
    let timeline = resample_indices(clip.frames.len(), fps);
    let kept: Vec<usize> = uniform_indices(timeline.len(), max_frames)
        .into_iter()
        .map(|k| timeline[k])
        .collect();
    let per_frame = target_size * target_size * 3;
    let mut data = Vec::with_capacity(max_frames * per_frame);
    for &i in &kept {
        let f = &clip.frames[i];
        if f.shape().len() != 3 || f.shape()[2] != 3 {
            return Err(Error::Shape(format!("frame {i} of {} is {:?}, expected [H, W, 3]", clip.source, f.shape())));
        }
        data.extend(resize_bilinear(f, target_size, target_size)?.into_data());
    }
    data.resize(max_frames * per_frame, T::zero());
    let mut valid = vec![true; kept.len()];
    valid.resize(max_frames, false);
    Ok(FrameSequence {
        frames: Tensor::from_vec(&[max_frames, target_size, target_size, 3], data)?,
        valid,
        label: None,
        source: clip.source.clone(),
    })
}

#[derive(Clone, Debug, Default)]
pub struct ProcessedClips<T> {
    pub sequences: Vec<FrameSequence<T>>,
    pub labels: Vec<u8>,
    /// `(path, reason)` for entries that were skipped.
    pub failures: Vec<(String, String)>,
}

/// Decodes every accepted entry of `dir` in file-name order.
pub fn process_videos(
    dir: impl AsRef<Path>,
    label: u8,
    max_frames: usize,
    target_size: usize,
    decoders: &[Box<dyn ClipDecoder>],
) -> Result<ProcessedClips<f32>> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::MissingDirectory(dir.to_path_buf()));
    }
    if label > 1 {
        return Err(Error::InvalidConfig(format!("clip label must be 0 or 1, got {label}")));
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort_by(|a, b| a.file_name().cmp(&b.file_name()));

    let mut out = ProcessedClips {
        sequences: Vec::new(),
        labels: Vec::new(),
        failures: Vec::new(),
    };
    for path in entries {
        let Some(decoder) = decoders.iter().find(|d| d.accepts(&path)) else {
            continue;
        };
        match decoder.decode(&path).and_then(|c| extract_frames(&c, max_frames, target_size)) {
            Ok(mut seq) => {
                seq.label = Some(label);
                out.sequences.push(seq);
                out.labels.push(label);
            }
            Err(e) => {
                log::warn!("skipping clip {}: {e}", path.display());
                out.failures.push((path.display().to_string(), e.to_string()));
            }
        }
    }
    Ok(out)
}

/// Stacked `[N, T, S, S, 3]` clips with aligned labels and masks.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipDatasetArrays<T> {
    pub x: Tensor<T>,
    pub y: Vec<u8>,
    pub valid: Vec<Vec<bool>>,
    pub sources: Vec<String>,
    /// Output position `k` holds concatenated item `permutation[k]`.
    pub permutation: Vec<usize>,
}

impl<T: Scalar> ClipDatasetArrays<T> {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn clip(&self, i: usize) -> Result<FrameSequence<T>> {
        let s = self.x.shape();
        Ok(FrameSequence {
            frames: self.x.rows(i, 1)?.reshape(&s[1..])?,
            valid: self.valid[i].clone(),
            label: Some(self.y[i]),
            source: self.sources[i].clone(),
        })
    }
}

/// Seeded permutation of `0..n`.
pub fn seeded_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    p
}

/// Violent clips (label 1) first, then non-violent (label 0), jointly shuffled.
pub fn assemble_and_shuffle<T: Scalar>(
    violent: Vec<FrameSequence<T>>,
    nonviolent: Vec<FrameSequence<T>>,
    seed: u64,
) -> Result<ClipDatasetArrays<T>> {
    let items: Vec<(FrameSequence<T>, u8)> = violent
        .into_iter()
        .map(|s| (s, 1))
        .chain(nonviolent.into_iter().map(|s| (s, 0)))
        .collect();
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let shape = items[0].0.frames.shape().to_vec();
    if let Some((s, _)) = items.iter().find(|(s, _)| s.frames.shape() != shape.as_slice()) {
        return Err(Error::Shape(format!("clip {} is {:?}, expected {shape:?}", s.source, s.frames.shape())));
    }
    let permutation = seeded_permutation(items.len(), seed);
    let mut parts = Vec::with_capacity(items.len());
    let mut y = Vec::with_capacity(items.len());
    let mut valid = Vec::with_capacity(items.len());
    let mut sources = Vec::with_capacity(items.len());
    for &i in &permutation {
        let (s, label) = &items[i];
        parts.push(s.frames.clone().unsqueeze0());
        y.push(*label);
        valid.push(s.valid.clone());
        sources.push(s.source.clone());
    }
    Ok(ClipDatasetArrays {
        x: Tensor::stack_rows(&parts)?,
        y,
        valid,
        sources,
        permutation,
    })
}

pub const CACHE_ARCHIVE: &str = "clips.csa";
pub const CACHE_INDEX: &str = "clips.csv";

fn clip_id(i: usize) -> String {
    format!("{i:05}")
}

/// Writes `clips.csa` (`clips/<id>/frames`, `clips/<id>/mask`) and the
/// `id,label,source` index `clips.csv` into `dir`.
pub fn write_clip_cache<T: Scalar>(arrays: &ClipDatasetArrays<T>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut archive = CheckpointArchive::new();
    let index_path = dir.join(CACHE_INDEX);
    let mut index = csv::Writer::from_path(&index_path).map_err(|e| csv_err(&index_path, e))?;
    index
        .write_record(["id", "label", "source"])
        .map_err(|e| csv_err(&index_path, e))?;
    for i in 0..arrays.len() {
        let id = clip_id(i);
        let seq = arrays.clip(i)?;
        archive.push_tensor(&format!("clips/{id}/frames"), &seq.frames)?;
        let mask: Vec<f32> = seq.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        archive.push(&format!("clips/{id}/mask"), vec![mask.len() as u32], mask)?;
        index
            .write_record([id.as_str(), &arrays.y[i].to_string(), &arrays.sources[i]])
            .map_err(|e| csv_err(&index_path, e))?;
    }
    index.flush().map_err(|e| Error::io(&index_path, e))?;
    write_checkpoint(&archive, dir.join(CACHE_ARCHIVE))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    }
}

/// Reads a cache written by [`write_clip_cache`], in stored order.
pub fn read_clip_cache(dir: impl AsRef<Path>) -> Result<ClipDatasetArrays<f32>> {
    let dir = dir.as_ref();
    let archive = read_checkpoint(dir.join(CACHE_ARCHIVE))?;
    let index_path = dir.join(CACHE_INDEX);
    let mut reader = csv::Reader::from_path(&index_path).map_err(|e| csv_err(&index_path, e))?;
    let mut parts = Vec::new();
    let mut y = Vec::new();
    let mut valid = Vec::new();
    let mut sources = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_err(&index_path, e))?;
        let bad = || Error::MalformedManifest(format!("{}: bad row {row:?}", index_path.display()));
        let (id, label, source) = (row.get(0).ok_or_else(bad)?, row.get(1).ok_or_else(bad)?, row.get(2).ok_or_else(bad)?);
        let frames = archive
            .get(&format!("clips/{id}/frames"))
            .ok_or_else(|| Error::MissingParam(format!("clips/{id}/frames")))?;
        let mask = archive
            .get(&format!("clips/{id}/mask"))
            .ok_or_else(|| Error::MissingParam(format!("clips/{id}/mask")))?;
        parts.push(frames.to_tensor::<f32>().unsqueeze0());
        valid.push(mask.data.iter().map(|&m| m != 0.0).collect());
        y.push(label.parse::<u8>().map_err(|_| bad())?);
        sources.push(source.to_string());
    }
    if parts.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = parts.len();
    Ok(ClipDatasetArrays {
        x: Tensor::stack_rows(&parts)?,
        y,
        valid,
        sources,
        permutation: (0..n).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset_io::save_image;

    fn clip(n: usize, fps: f64, value: impl Fn(usize) -> f32) -> DecodedClip<f32> {
        DecodedClip {
            frames: (0..n).map(|i| Tensor::full(&[6, 8, 3], value(i))).collect(),
            fps: Some(fps),
            source: "mem".into(),
        }
    }

    #[test]
    fn two_second_clip_keeps_twenty_frames() {
        let c = clip(50, 25.0, |i| i as f32 / 64.0);
        let s = extract_frames(&c, 20, 16).unwrap();
        assert_eq!(s.frames.shape(), &[20, 16, 16, 3]);
        assert!(s.valid.iter().all(|&v| v));
        let firsts: Vec<f32> = (0..20).map(|t| s.frame(t).unwrap().data()[0] * 64.0).collect();
        let expected: Vec<f32> = (0..20).map(|i| (i * 50 / 20) as f32).collect();
        assert_eq!(firsts, expected);
    }

    #[test]
    fn short_clip_is_zero_padded() {
        let c = clip(12, 25.0, |_| 0.5);
        let s = extract_frames(&c, 20, 8).unwrap();
        assert_eq!(s.valid_len(), 12);
        assert_eq!(s.valid, [vec![true; 12], vec![false; 8]].concat());
        let per = 8 * 8 * 3;
        assert!(s.frames.data()[12 * per..].iter().all(|&v| v == 0.0));
        assert!(s.frames.data()[..12 * per].iter().all(|&v| v == 0.5));
    }

    #[test]
    fn constant_white_stays_white() {
        let c = clip(30, 30.0, |_| 1.0);
        let s = extract_frames(&c, 10, 128).unwrap();
        assert!(s.frames.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn resampling_to_25_fps() {
        assert_eq!(resample_indices(5, 25.0), vec![0, 1, 2, 3, 4]);
        // 50 fps: every other frame
        assert_eq!(resample_indices(8, 50.0), vec![0, 2, 4, 6]);
        // 12.5 fps: each frame twice (round half away from zero)
        assert_eq!(resample_indices(3, 12.5), vec![0, 1, 1, 2, 2, 2]);
        assert_eq!(uniform_indices(10, 4), vec![0, 2, 5, 7]);
        assert_eq!(uniform_indices(3, 4), vec![0, 1, 2]);
    }

    #[test]
    fn same_size_resize_is_identity() {
        let img = Tensor::<f32>::from_fn(&[5, 7, 3], |i| (i % 11) as f32 / 11.0);
        assert_eq!(resize_bilinear(&img, 5, 7).unwrap(), img);
    }

    #[test]
    fn extraction_errors() {
        let empty = DecodedClip::<f32> {
            frames: vec![],
            fps: Some(25.0),
            source: "e".into(),
        };
        assert!(matches!(extract_frames(&empty, 20, 8), Err(Error::EmptyClip(_))));
        let mut nofps = clip(3, 25.0, |_| 0.0);
        nofps.fps = None;
        assert!(matches!(extract_frames(&nofps, 20, 8), Err(Error::MissingFps(_))));
    }

    fn write_png_clip(dir: &Path, n: usize, fps: Option<f64>) {
        fs::create_dir_all(dir).unwrap();
        for i in 0..n {
            let f = Tensor::<f32>::full(&[4, 4, 3], i as f32 / n as f32);
            save_image(&f, dir.join(frame_file_name(i))).unwrap();
        }
        if let Some(fps) = fps {
            fs::write(dir.join("meta.json"), format!("{{\"fps\": {fps}}}")).unwrap();
        }
    }

    #[test]
    fn process_directory_in_name_order() {
        let tmp = tempfile::tempdir().unwrap();
        write_png_clip(&tmp.path().join("b.avi"), 3, Some(25.0));
        write_png_clip(&tmp.path().join("a.avi"), 5, Some(25.0));
        write_png_clip(&tmp.path().join("c.avi"), 2, None);
        fs::write(tmp.path().join("notes.txt"), "x").unwrap();
        let out = process_videos(tmp.path(), 1, 4, 8, &default_decoders()).unwrap();
        assert_eq!(out.sequences.len(), 2);
        assert_eq!(out.labels, vec![1, 1]);
        assert!(out.sequences[0].source.ends_with("a.avi"));
        assert_eq!(out.sequences[0].valid_len(), 4);
        assert_eq!(out.sequences[1].valid_len(), 3);
        assert_eq!(out.failures.len(), 1);
        assert!(out.failures[0].0.ends_with("c.avi"));

        let empty = tempfile::tempdir().unwrap();
        assert!(process_videos(empty.path(), 0, 4, 8, &default_decoders()).unwrap().sequences.is_empty());
        assert!(matches!(
            process_videos(empty.path().join("nope"), 0, 4, 8, &default_decoders()),
            Err(Error::MissingDirectory(_))
        ));
    }

    fn seq(v: f32) -> FrameSequence<f32> {
        FrameSequence {
            frames: Tensor::full(&[2, 2, 2, 3], v),
            valid: vec![true, v > 0.5],
            label: None,
            source: format!("clip-{v}"),
        }
    }

    #[test]
    fn shuffle_keeps_pairs() {
        let a = assemble_and_shuffle(vec![seq(1.0), seq(0.9)], vec![seq(0.1), seq(0.2)], 7).unwrap();
        let mut ys = a.y.clone();
        ys.sort();
        assert_eq!(ys, vec![0, 0, 1, 1]);
        for i in 0..4 {
            let c = a.clip(i).unwrap();
            let v = c.frames.data()[0];
            assert_eq!(c.label, Some(if v > 0.5 { 1 } else { 0 }));
            assert_eq!(c.source, format!("clip-{v}"));
        }
        let b = assemble_and_shuffle(vec![seq(1.0), seq(0.9)], vec![seq(0.1), seq(0.2)], 7).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            assemble_and_shuffle::<f32>(vec![], vec![], 0),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn cache_round_trip() {
        let a = assemble_and_shuffle(vec![seq(1.0)], vec![seq(0.25), seq(0.5)], 3).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        write_clip_cache(&a, tmp.path()).unwrap();
        let b = read_clip_cache(tmp.path()).unwrap();
        assert_eq!(b.x, a.x);
        assert_eq!(b.y, a.y);
        assert_eq!(b.valid, a.valid);
        assert_eq!(b.sources, a.sources);
    }
}
