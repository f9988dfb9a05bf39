//! The five pipeline commands behind the CLI surface.
//!
//! Every command reads one [`RunConfig`] and works inside its output
//! directory; commands that produce files also write a run manifest
//! recording the full configuration and file format versions, and
//! nothing time-dependent, so determinism mode can compare outputs
//! byte for byte. Existing outputs are only replaced under
//! `--overwrite`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use patchsvdd::data::{generate_synthetic, load_dataset, Dataset};
use patchsvdd::evaluation::{
    auroc, baseline_random_encoder, baseline_raw_patch, intrinsic_dimension, pixel_auroc,
    BaselineScores, CategoryEval, EvalReport, ImageScoreRow, LabeledScores,
};
use patchsvdd::feature_index::{FeatureIndex, INDEX_VERSION};
use patchsvdd::inference::{
    build_feature_bank, inspect_image, load_map, save_map, save_pgm16, ScoreRecord, MAP_VERSION,
};
use patchsvdd::model::{PatchModel, Scale, ARCHITECTURE_VERSION, MODEL_PARAMS_FILE};
use patchsvdd::numerics::{Tensor, PARAMS_VERSION};
use patchsvdd::training::{train, StepStats};
use patchsvdd::{Error, Result};

use crate::config::RunConfig;

/// JSON-lines manifest of per-image scores written by `infer`.
pub const SCORES_FILE: &str = "scores.jsonl";
/// Subdirectory of the run holding anomaly maps and previews.
pub const MAPS_DIR: &str = "maps";
/// Subdirectory of the run holding evaluation reports.
pub const EVAL_DIR: &str = "eval";

/// Patch side and grid stride of the `eval --baseline-raw` run; the
/// raw-patch baseline is quadratic in patch pixels, so it uses the
/// small receptive field on a coarse grid to stay affordable.
pub const RAW_BASELINE_PATCH: usize = 32;
pub const RAW_BASELINE_STRIDE: usize = 16;

/// Index file of one scale inside the run directory.
pub fn index_file(scale: Scale) -> &'static str {
    match scale {
        Scale::Small => "index_small.psix",
        Scale::Big => "index_big.psix",
    }
}

/// Training loss CSV of one scale inside the run directory.
pub fn loss_file(scale: Scale) -> &'static str {
    match scale {
        Scale::Small => "loss_small.csv",
        Scale::Big => "loss_big.csv",
    }
}

#[derive(Serialize)]
struct FormatVersions {
    parameter_container: u32,
    architecture: u32,
    index: u32,
    map: u32,
}

impl FormatVersions {
    fn current() -> Self {
        FormatVersions {
            parameter_container: PARAMS_VERSION,
            architecture: ARCHITECTURE_VERSION,
            index: INDEX_VERSION,
            map: MAP_VERSION,
        }
    }
}

/// Written after each command: everything needed to reproduce the
/// outputs, and nothing that varies between identical runs.
#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    tool_version: &'a str,
    formats: FormatVersions,
    config: &'a RunConfig,
}

fn write_manifest(dir: &Path, command: &str, config: &RunConfig) -> Result<()> {
    let manifest = RunManifest {
        command,
        tool_version: env!("CARGO_PKG_VERSION"),
        formats: FormatVersions::current(),
        config,
    };
    write_json(&dir.join(format!("{command}_manifest.json")), &manifest)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format(path, format!("serialization: {e}")))?;
    write_text(path, &(text + "\n"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingPath(path.to_path_buf()))
    }
}

fn refuse_existing(path: &Path, overwrite: bool) -> Result<()> {
    if path.exists() && !overwrite {
        return Err(Error::InvalidArgument(format!(
            "{} already exists; pass --overwrite to replace it",
            path.display()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// synth

/// All files under `dir`, as paths relative to it, sorted.
fn walk_relative(dir: &Path) -> Result<Vec<PathBuf>> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(base, &path, out)?;
            } else {
                out.push(path.strip_prefix(base).expect("under base").to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

fn assert_trees_identical(expected: &Path, actual: &Path) -> Result<()> {
    let (a, b) = (walk_relative(expected)?, walk_relative(actual)?);
    if a != b {
        let missing: Vec<_> = a.iter().filter(|p| !b.contains(p)).collect();
        let extra: Vec<_> = b.iter().filter(|p| !a.contains(p)).collect();
        return Err(Error::InvalidArgument(format!(
            "dataset file lists differ (missing {missing:?}, extra {extra:?})"
        )));
    }
    for rel in &a {
        let want = std::fs::read(expected.join(rel)).map_err(|e| Error::io(expected.join(rel), e))?;
        let got = std::fs::read(actual.join(rel)).map_err(|e| Error::io(actual.join(rel), e))?;
        if want != got {
            return Err(Error::InvalidArgument(format!(
                "dataset file {} differs from a fresh render of the same seed",
                rel.display()
            )));
        }
    }
    Ok(())
}

/// Generates the synthetic category under the data root, or with
/// `check` re-renders it in a scratch directory and verifies the
/// existing files are byte-identical.
pub fn cmd_synth(config: &RunConfig, check: bool, overwrite: bool) -> Result<()> {
    if config.data_root.as_os_str().is_empty() {
        return Err(Error::InvalidArgument("data_root is required".into()));
    }
    let synth = config.synth_config();
    synth.validate()?;
    let target = config.data_root.join(&config.category);

    if check {
        if !target.is_dir() {
            return Err(Error::MissingPath(target));
        }
        let scratch = tempfile::tempdir().map_err(|e| Error::io("synth --check scratch", e))?;
        generate_synthetic(scratch.path(), &synth)?;
        assert_trees_identical(scratch.path().join(&config.category).as_path(), &target)?;
        log::info!("{} matches a fresh render byte for byte", target.display());
        return Ok(());
    }

    refuse_existing(&target, overwrite)?;
    if target.exists() {
        std::fs::remove_dir_all(&target).map_err(|e| Error::io(&target, e))?;
    }
    generate_synthetic(&config.data_root, &synth)?;
    log::info!(
        "generated {} ({} train, {} test-good, {} defect images per type)",
        target.display(),
        synth.train_count,
        synth.test_good_count,
        synth.test_defect_count
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train

fn train_images(dataset: &Dataset) -> Vec<Tensor<f32>> {
    dataset.train.iter().map(|r| r.pixels.clone()).collect()
}

/// Trains the encoder on the category's normal images and writes the
/// checkpoint, per-scale loss CSVs, and the run manifest.
pub fn cmd_train(config: &RunConfig, overwrite: bool) -> Result<()> {
    config.validate()?;
    refuse_existing(&config.out_dir.join(MODEL_PARAMS_FILE), overwrite)?;

    let dataset = load_dataset(&config.data_root, &config.category)?;
    let images = train_images(&dataset);
    let train_config = config.train_config();
    log::info!(
        "training {} images, {} steps x {} scales, lambda {}, workers {}",
        images.len(),
        train_config.steps,
        train_config.scales.len(),
        config.lambda,
        train_config.workers
    );

    let mut model = PatchModel::init_random(&config.encoder_config(), config.seed)?;
    let started = Instant::now();
    let report = train(&mut model, &images, &train_config)?;
    log::info!("trained in {:.1} s", started.elapsed().as_secs_f64());

    ensure_dir(&config.out_dir)?;
    model.save(&config.out_dir, config.seed)?;
    for &scale in &train_config.scales {
        let mut csv = String::from(StepStats::CSV_HEADER);
        csv.push('\n');
        for stats in report.history.iter().filter(|s| s.scale == scale) {
            csv.push_str(&stats.csv_row());
            csv.push('\n');
        }
        write_text(&config.out_dir.join(loss_file(scale)), &csv)?;
    }
    write_manifest(&config.out_dir, "train", config)
}

// ---------------------------------------------------------------------------
// index

/// Encodes the training images with the saved model and builds both
/// scales' feature banks.
pub fn cmd_index(config: &RunConfig, overwrite: bool) -> Result<()> {
    config.validate()?;
    require_file(&config.out_dir.join(MODEL_PARAMS_FILE))?;
    for scale in [Scale::Small, Scale::Big] {
        refuse_existing(&config.out_dir.join(index_file(scale)), overwrite)?;
    }

    let (model, _) = PatchModel::load(&config.out_dir)?;
    let dataset = load_dataset(&config.data_root, &config.category)?;
    let images = train_images(&dataset);
    for scale in [Scale::Small, Scale::Big] {
        let started = Instant::now();
        let bank = build_feature_bank(&model.encoder, &images, scale, config.index_config())?;
        let path = config.out_dir.join(index_file(scale));
        bank.save(&path)?;
        log::info!(
            "{}: {} features from {} images in {:.1} s",
            path.display(),
            bank.len(),
            images.len(),
            started.elapsed().as_secs_f64()
        );
    }
    write_manifest(&config.out_dir, "index", config)
}

// ---------------------------------------------------------------------------
// infer

fn file_stem_for(id: &str) -> String {
    id.trim_end_matches(".png").replace(['/', '\\'], "_")
}

/// Scores every test image: raw float maps for both scales and their
/// product, a 16-bit preview of the product, and one JSON line per
/// image in the score manifest. Per-image wall time goes to the log
/// only, keeping files reproducible.
pub fn cmd_infer(config: &RunConfig, overwrite: bool) -> Result<()> {
    config.validate()?;
    require_file(&config.out_dir.join(MODEL_PARAMS_FILE))?;
    require_file(&config.out_dir.join(index_file(Scale::Small)))?;
    require_file(&config.out_dir.join(index_file(Scale::Big)))?;
    refuse_existing(&config.out_dir.join(SCORES_FILE), overwrite)?;

    let (model, _) = PatchModel::load(&config.out_dir)?;
    let index_small = FeatureIndex::load(&config.out_dir.join(index_file(Scale::Small)))?;
    let index_big = FeatureIndex::load(&config.out_dir.join(index_file(Scale::Big)))?;
    let dataset = load_dataset(&config.data_root, &config.category)?;
    if dataset.test.is_empty() {
        return Err(Error::EmptyInput("no test images to score"));
    }

    let maps_dir = config.out_dir.join(MAPS_DIR);
    ensure_dir(&maps_dir)?;
    let mut lines = String::new();
    for record in &dataset.test {
        let started = Instant::now();
        let result = inspect_image(&model.encoder, &index_small, &index_big, &record.pixels)?;
        let stem = file_stem_for(&record.id);
        let rel = |suffix: &str| format!("{MAPS_DIR}/{stem}{suffix}");
        save_map(&result.map_small, &config.out_dir.join(rel("_small.psam")))?;
        save_map(&result.map_big, &config.out_dir.join(rel("_big.psam")))?;
        save_map(&result.map_multi, &config.out_dir.join(rel("_multi.psam")))?;
        save_pgm16(&result.map_multi, &config.out_dir.join(rel(".pgm")))?;
        let score = ScoreRecord {
            image: record.id.clone(),
            score: result.image_score,
            map_small: rel("_small.psam"),
            map_big: rel("_big.psam"),
            map_multi: rel("_multi.psam"),
            preview: rel(".pgm"),
        };
        lines.push_str(&score.to_json_line());
        lines.push('\n');
        log::info!(
            "{}: score {:.6} in {} ms",
            record.id,
            result.image_score,
            started.elapsed().as_millis()
        );
    }
    write_text(&config.out_dir.join(SCORES_FILE), &lines)?;
    write_manifest(&config.out_dir, "infer", config)
}

// ---------------------------------------------------------------------------
// eval

fn read_score_records(path: &Path) -> Result<Vec<ScoreRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(ScoreRecord::from_json_line)
        .collect()
}

/// Evenly subsampled features of a bank, upcast for the estimator.
fn sampled_features(index: &FeatureIndex, limit: usize) -> Vec<Vec<f64>> {
    let take = index.len().min(limit).max(1);
    let stride = index.len() / take;
    (0..take)
        .map(|i| index.feature(i * stride).iter().map(|&v| v as f64).collect())
        .collect()
}

/// Evaluates an `infer` run against ground truth: image and pixel
/// AUROC, per-scale intrinsic dimension of the indexed features, and
/// optional no-training baselines. Writes the report as JSON, an
/// aligned text table (also printed), and a per-image score CSV.
pub fn cmd_eval(
    config: &RunConfig,
    baseline_raw: bool,
    baseline_random: bool,
    overwrite: bool,
) -> Result<()> {
    config.validate()?;
    let scores_path = config.out_dir.join(SCORES_FILE);
    require_file(&scores_path)?;
    let eval_dir = config.out_dir.join(EVAL_DIR);
    refuse_existing(&eval_dir.join("report.json"), overwrite)?;

    let dataset = load_dataset(&config.data_root, &config.category)?;
    let records = read_score_records(&scores_path)?;
    let by_id: HashMap<&str, &ScoreRecord> =
        records.iter().map(|r| (r.image.as_str(), r)).collect();

    let mut image_scores = LabeledScores::default();
    let mut rows = Vec::new();
    let mut maps = Vec::new();
    let mut masks = Vec::new();
    for test in &dataset.test {
        let record = by_id.get(test.id.as_str()).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "{} has no entry for {}; re-run infer",
                scores_path.display(),
                test.id
            ))
        })?;
        image_scores.push(test.label, record.score as f64);
        rows.push(ImageScoreRow {
            image: test.id.clone(),
            label: test.label,
            score: record.score as f64,
        });
        let map = load_map(&config.out_dir.join(&record.map_multi))?;
        masks.push(match &test.mask {
            Some(m) => m.clone(),
            None => patchsvdd::data::Mask::new(
                map.height(),
                map.width(),
                vec![false; map.height() * map.width()],
            )?,
        });
        maps.push(map);
    }

    let mut ids = std::collections::BTreeMap::new();
    for scale in [Scale::Small, Scale::Big] {
        let path = config.out_dir.join(index_file(scale));
        if !path.is_file() {
            log::warn!("{} missing; skipping intrinsic dimension", path.display());
            continue;
        }
        let index = FeatureIndex::load(&path)?;
        match intrinsic_dimension(&sampled_features(&index, 1024)) {
            Ok(id) => {
                ids.insert(
                    match scale {
                        Scale::Small => "small".to_string(),
                        Scale::Big => "big".to_string(),
                    },
                    id,
                );
            }
            Err(e) => log::warn!("intrinsic dimension at {scale:?} unavailable: {e}"),
        }
    }

    let mut baselines: Vec<BaselineScores> = Vec::new();
    if baseline_raw {
        let started = Instant::now();
        baselines.push(baseline_raw_patch(
            &dataset.train,
            &dataset.test,
            RAW_BASELINE_PATCH,
            RAW_BASELINE_STRIDE,
        )?);
        log::info!("raw-patch baseline in {:.1} s", started.elapsed().as_secs_f64());
    }
    if baseline_random {
        let started = Instant::now();
        baselines.push(baseline_random_encoder(&dataset.train, &dataset.test, config.seed)?);
        log::info!("random-encoder baseline in {:.1} s", started.elapsed().as_secs_f64());
    }

    let category = CategoryEval {
        category: config.category.clone(),
        image_auroc: auroc(&image_scores)?,
        pixel_auroc: pixel_auroc(&maps, &masks)?,
        intrinsic_dimension: ids,
        image_scores: rows,
    };
    let report = EvalReport::from_categories(vec![category], baselines)?;

    ensure_dir(&eval_dir)?;
    write_text(&eval_dir.join("report.json"), &report.to_json())?;
    write_text(&eval_dir.join("report.txt"), &report.to_text())?;
    let csv = report.category_csv(&config.category).expect("own category present");
    write_text(&eval_dir.join(format!("{}_scores.csv", config.category)), &csv)?;
    write_manifest(&config.out_dir, "eval", config)?;
    print!("{}", report.to_text());
    Ok(())
}
