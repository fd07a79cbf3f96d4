//! Content-addressed caches for density maps and clip tensors.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crowdlab_core::dataset_io::{manifest_to_json, read_checkpoint, write_checkpoint, CheckpointArchive, DatasetManifest};
use crowdlab_core::density::{generate_density_map, DensityMap};
use crowdlab_core::video_frames::{
    assemble_and_shuffle, default_decoders, process_videos, read_clip_cache, write_clip_cache, ClipDatasetArrays,
};
use crowdlab_core::Error;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CacheEntry {
    pub path: PathBuf,
    pub hit: bool,
}

fn hex12(h: Sha256) -> String {
    h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect()
}

pub fn density_entry_name(stem: &str) -> String {
    format!("density/{stem}")
}

/// Fails with the first manifest image that does not exist.
pub fn check_images(manifest: &DatasetManifest) -> CliResult<()> {
    for r in &manifest.records {
        let p = manifest.resolve(r);
        if !p.is_file() {
            return Err(Error::MissingFile(p).into());
        }
    }
    Ok(())
}

pub fn density_cache_path(root: &Path, manifest: &DatasetManifest, sigma: f64) -> PathBuf {
    let mut h = Sha256::new();
    h.update(manifest_to_json(manifest).as_bytes());
    h.update(sigma.to_le_bytes());
    root.join(format!("density-{}.csa", hex12(h)))
}

/// Ground-truth maps for every record, stored as `density/<stem>`.
pub fn prepare_density(root: &Path, manifest: &DatasetManifest, sigma: f64) -> CliResult<CacheEntry> {
    manifest.validate()?;
    check_images(manifest)?;
    let path = density_cache_path(root, manifest, sigma);
    if path.is_file() {
        return Ok(CacheEntry { path, hit: true });
    }
    fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
    let mut archive = CheckpointArchive::new();
    for r in &manifest.records {
        let map = generate_density_map::<f32>(&r.points, r.height as usize, r.width as usize, sigma)?;
        archive.push_tensor(&density_entry_name(&r.stem()), &map.to_tensor())?;
    }
    archive.metadata.insert("sigma".into(), sigma.to_string());
    write_checkpoint(&archive, &path)?;
    Ok(CacheEntry { path, hit: false })
}

/// Maps in manifest order, read back from the cache.
pub fn load_density_maps(entry: &CacheEntry, manifest: &DatasetManifest) -> CliResult<Vec<DensityMap<f32>>> {
    let archive = read_checkpoint(&entry.path)?;
    manifest
        .records
        .iter()
        .map(|r| {
            let name = density_entry_name(&r.stem());
            let e = archive.get(&name).ok_or(Error::MissingParam(name))?;
            let values = e.data.clone();
            Ok(DensityMap::from_values(r.height as usize, r.width as usize, values)?)
        })
        .collect()
}

fn hash_tree(h: &mut Sha256, root: &Path, dir: &Path) -> CliResult<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        let rel = p.strip_prefix(root).unwrap_or(&p);
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        if p.is_dir() {
            hash_tree(h, root, &p)?;
        } else {
            let bytes = fs::read(&p).map_err(|e| CliError::io(&p, e))?;
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct ClipSources<'a> {
    pub violent: &'a Path,
    pub nonviolent: &'a Path,
    pub max_frames: usize,
    pub size: usize,
    pub seed: u64,
}

pub fn clip_cache_path(root: &Path, src: &ClipSources<'_>) -> CliResult<PathBuf> {
    let mut h = Sha256::new();
    for dir in [src.violent, src.nonviolent] {
        if !dir.is_dir() {
            return Err(Error::MissingDirectory(dir.to_path_buf()).into());
        }
        h.update(b"dir\0");
        hash_tree(&mut h, dir, dir)?;
    }
    h.update((src.max_frames as u64).to_le_bytes());
    h.update((src.size as u64).to_le_bytes());
    h.update(src.seed.to_le_bytes());
    Ok(root.join(format!("clips-{}", hex12(h))))
}

/// Decodes, pads, labels and shuffles both directories into a clip cache.
pub fn prepare_clips(root: &Path, src: &ClipSources<'_>) -> CliResult<CacheEntry> {
    let path = clip_cache_path(root, src)?;
    if path.join("clips.csa").is_file() && path.join("clips.csv").is_file() {
        return Ok(CacheEntry { path, hit: true });
    }
    let decoders = default_decoders();
    let violent = process_videos(src.violent, 1, src.max_frames, src.size, &decoders)?;
    let nonviolent = process_videos(src.nonviolent, 0, src.max_frames, src.size, &decoders)?;
    let arrays = assemble_and_shuffle(violent.sequences, nonviolent.sequences, src.seed)?;
    write_clip_cache(&arrays, &path)?;
    Ok(CacheEntry { path, hit: false })
}

pub fn load_clips(entry: &CacheEntry) -> CliResult<ClipDatasetArrays<f32>> {
    Ok(read_clip_cache(&entry.path)?)
}
