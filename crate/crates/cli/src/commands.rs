//! Subcommand implementations. Each training command owns a fresh run directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;

use crowdlab_core::anomaly_net::{build_anomaly_model, evaluate_anomaly, train_anomaly, AnomalyModel};
use crowdlab_core::augment::crop_at;
use crowdlab_core::dataset_io::{load_image, load_manifest, read_checkpoint, CheckpointArchive, DatasetManifest};
use crowdlab_core::mcnn_fen::FEN_STRIDE;
use crowdlab_core::metrics::{mae, mse, CountPair};
use crowdlab_core::ot_stage2::{
    calibrate_scale, init_stage2, predict_count, raw_count, train_stage2, train_supervised, CalibrationReference,
    DensityHeadConfig,
};
use crowdlab_core::ssl_stage1::train_stage1;
use crowdlab_core::video_frames::ClipDatasetArrays;
use crowdlab_core::{Error, ParamStore32, Tensor32};

use crate::cache::{self, CacheEntry, ClipSources};
use crate::config::{require, RunConfig, Stage2Mode};
use crate::error::{CliError, CliResult};
use crate::report::write_report;
use crate::rundir::{RunDir, REPORTS};

pub const META_FEN: &str = "fen_config";
pub const META_ROTATION_HEAD: &str = "rotation_head_config";
pub const META_DENSITY_HEAD: &str = "density_head_config";
pub const META_SCALE: &str = "scale";

/// Effective configuration plus the cache root.
#[derive(Clone, Debug)]
pub struct Context {
    pub config: RunConfig,
    pub cache: PathBuf,
}

/// What a command produced, for the caller to print.
#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub run_dir: Option<PathBuf>,
    pub lines: Vec<String>,
}

impl Context {
    fn rng(&self) -> CliResult<ChaCha8Rng> {
        Ok(ChaCha8Rng::seed_from_u64(self.config.seed()?))
    }

    fn manifest(&self) -> CliResult<DatasetManifest> {
        Ok(load_manifest(require(&self.config.data.manifest, "manifest")?)?)
    }

    fn manifest_images(&self, m: &DatasetManifest) -> CliResult<Vec<Tensor32>> {
        let channels = self.config.fen.input_channels;
        m.records
            .iter()
            .map(|r| Ok(load_image(m.resolve(r), channels)?))
            .collect()
    }

    fn clip_sources(&self) -> CliResult<Option<ClipSources<'_>>> {
        let d = &self.config.data;
        match (&d.violent_dir, &d.nonviolent_dir) {
            (Some(v), Some(n)) => Ok(Some(ClipSources {
                violent: v,
                nonviolent: n,
                max_frames: self.config.frames.max_frames,
                size: self.config.frames.size,
                seed: self.config.seed()?,
            })),
            (None, None) => Ok(None),
            _ => Err(CliError::MissingInput(
                "data.violent_dir and data.nonviolent_dir must be set together".into(),
            )),
        }
    }

    /// `data.clips` when set, otherwise the (possibly cached) extraction of the clip directories.
    fn clips(&self) -> CliResult<ClipDatasetArrays<f32>> {
        if let Some(dir) = &self.config.data.clips {
            return cache::load_clips(&CacheEntry {
                path: dir.clone(),
                hit: true,
            });
        }
        let src = self
            .clip_sources()?
            .ok_or_else(|| CliError::MissingInput("data.clips or data.violent_dir/nonviolent_dir".into()))?;
        let entry = cache::prepare_clips(&self.cache, &src)?;
        cache::load_clips(&entry)
    }
}

fn cache_line(kind: &str, e: &CacheEntry) -> String {
    let state = if e.hit { "cache hit" } else { "cache written" };
    format!("{kind}: {state}: {}", e.path.display())
}

fn json_meta<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("config serialises")
}

fn meta_or<T: DeserializeOwned + Clone>(archive: &CheckpointArchive, key: &str, fallback: &T) -> CliResult<T> {
    match archive.metadata.get(key) {
        Some(s) => serde_json::from_str(s)
            .map_err(|e| Error::MalformedManifest(format!("checkpoint metadata {key}: {e}")).into()),
        None => Ok(fallback.clone()),
    }
}

fn last_row_metrics(run: &mut RunDir, csv: &str) {
    let mut lines = csv.lines();
    let (Some(header), Some(last)) = (lines.next(), csv.lines().skip(1).last()) else {
        return;
    };
    for (k, v) in header.split(',').zip(last.split(',')).skip(1) {
        if let Ok(v) = v.parse::<f64>() {
            run.metric(k, v);
        }
    }
}

pub fn prepare(ctx: &Context) -> CliResult<Outcome> {
    let mut out = Outcome::default();
    let mut any = false;
    if ctx.config.data.manifest.is_some() {
        let m = ctx.manifest()?;
        let e = cache::prepare_density(&ctx.cache, &m, ctx.config.density.sigma)?;
        out.lines.push(cache_line("density", &e));
        any = true;
    }
    if let Some(src) = ctx.clip_sources()? {
        let e = cache::prepare_clips(&ctx.cache, &src)?;
        out.lines.push(cache_line("clips", &e));
        any = true;
    }
    if !any {
        return Err(CliError::MissingInput(
            "prepare needs data.manifest or data.violent_dir/nonviolent_dir".into(),
        ));
    }
    Ok(out)
}

pub fn extract_frames(ctx: &Context) -> CliResult<Outcome> {
    let src = ctx
        .clip_sources()?
        .ok_or_else(|| CliError::MissingInput("data.violent_dir and data.nonviolent_dir".into()))?;
    let e = cache::prepare_clips(&ctx.cache, &src)?;
    let n = cache::load_clips(&e)?.len();
    Ok(Outcome {
        run_dir: None,
        lines: vec![cache_line("clips", &e), format!("{n} clips")],
    })
}

pub fn pretrain_rotation(ctx: &Context) -> CliResult<Outcome> {
    let cfg = &ctx.config;
    let m = ctx.manifest()?;
    let images = ctx.manifest_images(&m)?;
    let mut rng = ctx.rng()?;
    let mut run = RunDir::create(cfg, "pretrain-rotation")?;
    let (params, log) = train_stage1(&images, &cfg.fen, &cfg.rotation_head, &cfg.stage1, &mut rng)?;
    let csv = log.to_csv();
    run.write_log("stage1.csv", &csv)?;
    last_row_metrics(&mut run, &csv);
    let mut meta = BTreeMap::new();
    meta.insert(META_FEN.to_string(), json_meta(&cfg.fen));
    meta.insert(META_ROTATION_HEAD.to_string(), json_meta(&cfg.rotation_head));
    run.write_checkpoint("stage1.csa", "stage1", params.to_archive(meta))?;
    run.finish()?;
    Ok(Outcome {
        lines: vec![format!("run: {}", run.root.display())],
        run_dir: Some(run.root),
    })
}

/// Raw integrals of centre crops, used to match the prior mean.
fn centre_crop_sums(params: &ParamStore32, ctx: &Context, images: &[Tensor32]) -> CliResult<Vec<f64>> {
    let size = ctx.config.stage2.crop_size;
    images
        .iter()
        .map(|img| {
            let (h, w) = (img.shape()[0], img.shape()[1]);
            let crop = crop_at(img, h.saturating_sub(size) / 2, w.saturating_sub(size) / 2, size)?;
            Ok(raw_count(params, &ctx.config.fen, &ctx.config.density_head, &crop)?)
        })
        .collect()
}

pub fn train_density(ctx: &Context) -> CliResult<Outcome> {
    let cfg = &ctx.config;
    let stage1_path = require(&cfg.data.stage1_checkpoint, "stage1_checkpoint")?;
    let stage1 = ParamStore32::from_archive(&read_checkpoint(stage1_path)?, |_| true);
    let m = ctx.manifest()?;
    let images = ctx.manifest_images(&m)?;
    let mut rng = ctx.rng()?;
    let mut run = RunDir::create(cfg, "train-density")?;
    let mut meta = BTreeMap::new();
    let (params, scale) = match cfg.stage2_mode {
        Stage2Mode::Unsupervised => {
            let (params, log) = train_stage2(&stage1, &images, &cfg.fen, &cfg.density_head, &cfg.stage2, &mut rng)?;
            let csv = log.to_csv();
            run.write_log("stage2.csv", &csv)?;
            last_row_metrics(&mut run, &csv);
            let sums = centre_crop_sums(&params, ctx, &images)?;
            let reference = CalibrationReference::PriorMean {
                spec: &cfg.stage2.prior,
                raw_crop_sums: &sums,
            };
            let scale = match calibrate_scale(&reference) {
                Ok(s) => s,
                Err(Error::ZeroPrediction) => {
                    log::warn!("density head predicts zero everywhere; storing scale 1");
                    meta.insert("calibrated".to_string(), "false".to_string());
                    1.0
                }
                Err(e) => return Err(e.into()),
            };
            (params, scale)
        }
        Stage2Mode::Supervised => {
            let entry = cache::prepare_density(&ctx.cache, &m, cfg.density.sigma)?;
            let targets = cache::load_density_maps(&entry, &m)?;
            let init = init_stage2(&stage1, &cfg.fen, &cfg.density_head, &mut rng)?;
            let (params, losses) =
                train_supervised(init, &images, &targets, &cfg.fen, &cfg.density_head, &cfg.supervised, &mut rng)?;
            let mut csv = String::from("step,loss\n");
            for (step, loss) in losses {
                writeln!(csv, "{step},{loss}").expect("write to string");
            }
            run.write_log("supervised.csv", &csv)?;
            last_row_metrics(&mut run, &csv);
            (params, 1.0)
        }
    };
    meta.insert(META_FEN.to_string(), json_meta(&cfg.fen));
    meta.insert(META_DENSITY_HEAD.to_string(), json_meta(&cfg.density_head));
    meta.insert(META_SCALE.to_string(), scale.to_string());
    run.metric("scale", scale);
    run.write_checkpoint("density.csa", "stage2", params.to_archive(meta))?;
    run.finish()?;
    Ok(Outcome {
        lines: vec![format!("run: {}", run.root.display()), format!("scale: {scale}")],
        run_dir: Some(run.root),
    })
}

/// Drops trailing rows and columns so both sides are multiples of the FEN stride.
pub fn trim_to_stride(img: &Tensor32) -> CliResult<Tensor32> {
    let s = img.shape();
    let (h, w, c) = (s[0] - s[0] % FEN_STRIDE, s[1] - s[1] % FEN_STRIDE, s[2]);
    if h == 0 || w == 0 {
        return Err(Error::ImageTooSmall {
            height: s[0],
            width: s[1],
            size: FEN_STRIDE,
        }
        .into());
    }
    if (h, w) == (s[0], s[1]) {
        return Ok(img.clone());
    }
    let src = img.data();
    Ok(Tensor32::from_fn(&[h, w, c], |i| {
        let (y, rem) = (i / (w * c), i % (w * c));
        src[y * s[1] * c + rem]
    }))
}

pub struct PredictArgs {
    pub checkpoint: PathBuf,
    pub images: Vec<PathBuf>,
    pub scale: Option<f64>,
}

pub fn predict(ctx: &Context, args: &PredictArgs) -> CliResult<Outcome> {
    let cfg = &ctx.config;
    let archive = read_checkpoint(&args.checkpoint)?;
    let fen = meta_or(&archive, META_FEN, &cfg.fen)?;
    let head: DensityHeadConfig = meta_or(&archive, META_DENSITY_HEAD, &cfg.density_head)?;
    let scale = match (args.scale, archive.metadata.get(META_SCALE)) {
        (Some(s), _) => s,
        (None, Some(s)) => s
            .parse()
            .map_err(|_| Error::MalformedManifest(format!("checkpoint scale {s:?}")))?,
        (None, None) => 1.0,
    };
    let params = ParamStore32::from_archive(&archive, |_| true);

    let mut inputs: Vec<(PathBuf, Option<f64>)> = args.images.iter().map(|p| (p.clone(), None)).collect();
    if inputs.is_empty() && cfg.data.manifest.is_some() {
        let m = ctx.manifest()?;
        inputs = m.records.iter().map(|r| (m.resolve(r), Some(r.count() as f64))).collect();
    }
    let labeled = !inputs.is_empty() && inputs.iter().all(|(_, gt)| gt.is_some());

    let mut run = RunDir::create(cfg, "predict-count")?;
    let maps_dir = run.root.join("maps");
    fs::create_dir_all(&maps_dir).map_err(|e| CliError::io(&maps_dir, e))?;
    let csv_path = run.path(REPORTS, "counts.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| CliError::csv(&csv_path, e))?;
    let header: &[&str] = if labeled { &["image", "count", "ground_truth"] } else { &["image", "count"] };
    w.write_record(header).map_err(|e| CliError::csv(&csv_path, e))?;

    let mut pairs = Vec::new();
    let mut used = BTreeSet::new();
    for (i, (path, gt)) in inputs.iter().enumerate() {
        let img = trim_to_stride(&load_image::<f32>(path, fen.input_channels)?)?;
        let (map, count) = predict_count(&params, &fen, &head, &img, scale)?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let mut name = format!("{stem}.png");
        if !used.insert(name.clone()) {
            name = format!("{stem}-{i}.png");
            used.insert(name.clone());
        }
        let png = maps_dir.join(&name);
        map.save_png(&png)?;
        run.record_artifact(&png);
        let mut row = vec![path.display().to_string(), count.to_string()];
        if labeled {
            let gt = gt.expect("labeled rows have counts");
            row.push(gt.to_string());
            pairs.push(CountPair::new(gt, count));
        }
        w.write_record(&row).map_err(|e| CliError::csv(&csv_path, e))?;
    }
    let mut lines = vec![format!("run: {}", run.root.display())];
    if labeled {
        let (e1, e2) = (mae(&pairs)?, mse(&pairs, false)?);
        for (k, v) in [("MAE", e1), ("MSE", e2)] {
            w.write_record([k, &v.to_string(), ""]).map_err(|e| CliError::csv(&csv_path, e))?;
            run.metric(&k.to_lowercase(), v);
            lines.push(format!("{k}: {v}"));
        }
    }
    w.flush().map_err(|e| CliError::io(&csv_path, e))?;
    run.record_artifact(&csv_path);
    run.finish()?;
    Ok(Outcome {
        lines,
        run_dir: Some(run.root),
    })
}

pub fn train_anomaly_cmd(ctx: &Context) -> CliResult<Outcome> {
    let cfg = &ctx.config;
    let dataset = ctx.clips()?;
    let pretrained = cfg.data.pretrained_vgg.as_deref().map(read_checkpoint).transpose()?;
    let mut rng = ctx.rng()?;
    let mut run = RunDir::create(cfg, "train-anomaly")?;
    let model = build_anomaly_model::<f32, _>(&cfg.anomaly, &mut rng, pretrained.as_ref())?;
    let (model, log) = train_anomaly(model, &dataset, &cfg.anomaly_train, &mut rng)?;
    let csv = log.to_csv();
    run.write_log("anomaly.csv", &csv)?;
    last_row_metrics(&mut run, &csv);
    run.metric("steps", log.steps as f64);
    run.write_checkpoint("anomaly.csa", "anomaly", model.to_archive())?;
    run.finish()?;
    Ok(Outcome {
        lines: vec![format!("run: {}", run.root.display())],
        run_dir: Some(run.root),
    })
}

pub fn eval_anomaly(ctx: &Context, checkpoint: &Path) -> CliResult<Outcome> {
    let model = AnomalyModel::<f32>::from_archive(&read_checkpoint(checkpoint)?)?;
    let dataset = ctx.clips()?;
    let mut run = RunDir::create(&ctx.config, "eval-anomaly")?;
    let report = evaluate_anomaly(&model, &dataset)?;
    let mut json = report.to_json();
    json["accuracy"] = report.accuracy().into();
    let eval_path = run.path(REPORTS, "eval.json");
    fs::write(&eval_path, serde_json::to_string_pretty(&json).expect("json")).map_err(|e| CliError::io(&eval_path, e))?;
    run.record_artifact(&eval_path);

    let pred_path = run.path(REPORTS, "predictions.csv");
    let mut w = csv::Writer::from_path(&pred_path).map_err(|e| CliError::csv(&pred_path, e))?;
    w.write_record(["source", "label", "p_violent", "predicted"])
        .map_err(|e| CliError::csv(&pred_path, e))?;
    for (i, p) in report.predictions.iter().enumerate() {
        let predicted = u8::from(p.probabilities[1] >= 0.5);
        w.write_record([
            dataset.sources[i].as_str(),
            &dataset.y[i].to_string(),
            &p.probabilities[1].to_string(),
            &predicted.to_string(),
        ])
        .map_err(|e| CliError::csv(&pred_path, e))?;
    }
    w.flush().map_err(|e| CliError::io(&pred_path, e))?;
    run.record_artifact(&pred_path);
    for (k, v) in [
        ("accuracy", report.accuracy()),
        ("precision", report.scores.precision),
        ("recall", report.scores.recall),
        ("f1", report.scores.f1),
    ] {
        run.metric(k, v);
    }
    run.finish()?;
    Ok(Outcome {
        lines: vec![
            format!("run: {}", run.root.display()),
            format!(
                "accuracy {:.4} precision {:.4} recall {:.4} f1 {:.4}",
                report.accuracy(),
                report.scores.precision,
                report.scores.recall,
                report.scores.f1
            ),
        ],
        run_dir: Some(run.root),
    })
}

pub fn report(run: &Path) -> CliResult<Outcome> {
    let out = write_report(run)?;
    Ok(Outcome {
        run_dir: Some(run.to_path_buf()),
        lines: vec![format!("summary: {}", out.display())],
    })
}
