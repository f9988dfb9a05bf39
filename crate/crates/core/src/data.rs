//! Dataset ingestion, image preprocessing, and the deterministic
//! synthetic dataset generator used for desk-scale verification.
//!
//! Datasets follow the MVTec-style directory layout:
//!
//! ```text
//! <root>/<category>/train/good/*.png
//! <root>/<category>/test/good/*.png
//! <root>/<category>/test/<defect>/*.png
//! <root>/<category>/ground_truth/<defect>/<stem>_mask.png
//! ```
//!
//! The synthetic generator writes the same layout (plus a generation
//! manifest) and is bit-reproducible for a fixed seed: abnormal
//! images are rendered by modifying the defect-free render of the
//! same per-image seed, and the mask is the exact set of pixels that
//! changed after 8-bit quantization.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Side length every image is resampled to.
pub const IMAGE_SIDE: usize = 256;

/// A binary defect mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    set: Vec<bool>,
}

impl Mask {
    /// Wraps a row-major boolean grid.
    pub fn new(h: usize, w: usize, set: Vec<bool>) -> Result<Self> {
        if set.len() != h * w {
            return Err(Error::ShapeMismatch(format!("{} flags for a {h}x{w} mask", set.len())));
        }
        Ok(Mask { h, w, set })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    /// True when pixel `(y, x)` is defective.
    pub fn value(&self, y: usize, x: usize) -> bool {
        self.set[y * self.w + x]
    }

    /// Row-major defect flags.
    pub fn flags(&self) -> &[bool] {
        &self.set
    }

    /// True when at least one pixel is defective.
    pub fn any(&self) -> bool {
        self.set.iter().any(|&b| b)
    }

    /// Number of defective pixels.
    pub fn count(&self) -> usize {
        self.set.iter().filter(|&&b| b).count()
    }
}

/// Normal/abnormal tag of a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Abnormal,
}

/// One loaded, preprocessed image.
#[derive(Debug, Clone)]
pub struct ImageRecord {
    /// Path relative to the category directory, e.g. `test/crack/003.png`.
    pub id: String,
    /// `[256, 256, 3]`, values in `[0, 1]`.
    pub pixels: Tensor<f32>,
    pub label: Label,
    /// Present exactly for abnormal test images; resampled to the
    /// image size.
    pub mask: Option<Mask>,
    /// Test subdirectory name (`good` for normal test images).
    pub defect: String,
}

/// One category's train and test splits.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub category: String,
    pub train: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
}

// ---------------------------------------------------------------------------
// Preprocessing

fn decode(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| Error::image(path, e))
}

fn to_tensor(rgb: &RgbImage) -> Tensor<f32> {
    let (w, h) = rgb.dimensions();
    let data = rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Tensor::from_vec(&[h as usize, w as usize, 3], data).expect("raw buffer matches dimensions")
}

/// Decodes and preprocesses one image file: bilinear resample to
/// 256x256, grayscale replicated to three channels, values in [0, 1].
/// Inputs already at the target size skip resampling entirely.
pub fn preprocess(path: &Path) -> Result<Tensor<f32>> {
    let img = decode(path)?;
    let rgb = img.to_rgb8();
    let side = IMAGE_SIDE as u32;
    if rgb.dimensions() == (side, side) {
        return Ok(to_tensor(&rgb));
    }
    log::debug!(
        "resampling {} from {:?} to {side}x{side}",
        path.display(),
        rgb.dimensions()
    );
    Ok(to_tensor(&image::imageops::resize(&rgb, side, side, FilterType::Triangle)))
}

/// Loads a ground-truth mask: any nonzero pixel is defective.
/// Masks not at the target size are resampled by nearest neighbor to
/// stay binary.
pub fn load_mask(path: &Path) -> Result<Mask> {
    let gray = decode(path)?.to_luma8();
    let (w, h) = gray.dimensions();
    let side = IMAGE_SIDE as u32;
    let gray = if (w, h) == (side, side) {
        gray
    } else {
        image::imageops::resize(&gray, side, side, FilterType::Nearest)
    };
    Mask::new(IMAGE_SIDE, IMAGE_SIDE, gray.as_raw().iter().map(|&v| v != 0).collect())
}

// ---------------------------------------------------------------------------
// Dataset loading

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut dirs: Vec<PathBuf> =
        entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    dirs.sort();
    Ok(dirs)
}

fn dir_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Loads one category from an MVTec-style tree: everything under
/// `train/good` is normal; test images are labeled by subdirectory,
/// with masks read from `ground_truth/<defect>/<stem>_mask.png`.
pub fn load_dataset(root: &Path, category: &str) -> Result<Dataset> {
    let base = root.join(category);
    let train_dir = base.join("train").join("good");
    let test_dir = base.join("test");
    for required in [&base, &train_dir, &test_dir] {
        if !required.is_dir() {
            return Err(Error::MissingPath(required.clone()));
        }
    }

    let mut train = Vec::new();
    for path in sorted_pngs(&train_dir)? {
        train.push(ImageRecord {
            id: format!("train/good/{}", dir_name(&path)),
            pixels: preprocess(&path)?,
            label: Label::Normal,
            mask: None,
            defect: "good".into(),
        });
    }
    if train.is_empty() {
        return Err(Error::EmptyInput("no training images under train/good"));
    }

    let mut test = Vec::new();
    for defect_dir in sorted_subdirs(&test_dir)? {
        let defect = dir_name(&defect_dir);
        let abnormal = defect != "good";
        for path in sorted_pngs(&defect_dir)? {
            let mask = if abnormal {
                let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                let mask_path =
                    base.join("ground_truth").join(&defect).join(format!("{stem}_mask.png"));
                if !mask_path.is_file() {
                    return Err(Error::MissingPath(mask_path));
                }
                Some(load_mask(&mask_path)?)
            } else {
                None
            };
            test.push(ImageRecord {
                id: format!("test/{defect}/{}", dir_name(&path)),
                pixels: preprocess(&path)?,
                label: if abnormal { Label::Abnormal } else { Label::Normal },
                mask,
                defect: defect.clone(),
            });
        }
    }
    Ok(Dataset { category: category.to_string(), train, test })
}

// ---------------------------------------------------------------------------
// Synthetic dataset generation

/// Base appearance of a synthetic category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CategoryStyle {
    /// Translation-stationary diagonal stripe texture.
    Stripes,
    /// Translation-stationary checkerboard texture.
    Checker,
    /// Translation-stationary smooth blob texture.
    BlobsTexture,
    /// A fixed shape at a (nearly) fixed position; appearance depends
    /// on absolute position, so relative-position learning matters.
    PlacedObject,
}

impl std::str::FromStr for CategoryStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stripes" => Ok(CategoryStyle::Stripes),
            "checker" => Ok(CategoryStyle::Checker),
            "blobs-texture" => Ok(CategoryStyle::BlobsTexture),
            "placed-object" => Ok(CategoryStyle::PlacedObject),
            other => Err(Error::InvalidArgument(format!("unknown category style '{other}'"))),
        }
    }
}

/// Kinds of injected defects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefectType {
    /// A thin dark/bright line segment.
    Scratch,
    /// A filled ellipse of shifted intensity.
    Blob,
    /// A rectangle erased to a flat tone.
    MissingRegion,
}

impl DefectType {
    fn dir_name(self) -> &'static str {
        match self {
            DefectType::Scratch => "scratch",
            DefectType::Blob => "blob",
            DefectType::MissingRegion => "missing_region",
        }
    }
}

impl std::str::FromStr for DefectType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(DefectType::Scratch),
            "blob" => Ok(DefectType::Blob),
            "missing-region" | "missing_region" => Ok(DefectType::MissingRegion),
            other => Err(Error::InvalidArgument(format!("unknown defect type '{other}'"))),
        }
    }
}

/// Everything the generator needs for one category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub category: String,
    pub style: CategoryStyle,
    pub train_count: usize,
    pub test_good_count: usize,
    /// Abnormal test images per defect type.
    pub test_defect_count: usize,
    pub defect_types: Vec<DefectType>,
    /// Defect extent range in pixels, inclusive.
    pub defect_size: (usize, usize),
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            category: "synthetic".into(),
            style: CategoryStyle::Stripes,
            train_count: 32,
            test_good_count: 8,
            test_defect_count: 4,
            defect_types: vec![DefectType::Scratch, DefectType::Blob, DefectType::MissingRegion],
            defect_size: (12, 28),
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    /// Rejects empty splits and out-of-bounds defect sizes.
    pub fn validate(&self) -> Result<()> {
        if self.train_count == 0 || self.test_good_count == 0 || self.test_defect_count == 0 {
            return Err(Error::InvalidArgument("synthetic split counts must be positive".into()));
        }
        if self.defect_types.is_empty() {
            return Err(Error::InvalidArgument("at least one defect type required".into()));
        }
        let (lo, hi) = self.defect_size;
        if lo == 0 || lo > hi || hi >= IMAGE_SIDE / 2 {
            return Err(Error::InvalidArgument(format!(
                "defect size range ({lo}, {hi}) must be positive, ordered and below {}",
                IMAGE_SIDE / 2
            )));
        }
        if self.category.is_empty() || self.category.contains(['/', '\\']) {
            return Err(Error::InvalidArgument(format!(
                "category name '{}' must be a plain directory name",
                self.category
            )));
        }
        Ok(())
    }
}

/// Metadata written next to a generated category.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationManifest {
    pub tool_version: String,
    pub config: SyntheticConfig,
}

/// Stable per-image RNG derivation so each file depends only on the
/// master seed and its own identity.
fn image_rng(master: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        master ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xC2B2_AE3D_27D4_EB4F),
    )
}

const STREAM_TRAIN: u64 = 1;
const STREAM_TEST_GOOD: u64 = 2;
/// Defect streams start here, one per defect type.
const STREAM_DEFECT_BASE: u64 = 16;

/// A full-resolution float image under construction.
struct Canvas {
    px: Vec<[f32; 3]>,
}

impl Canvas {
    fn filled(v: [f32; 3]) -> Self {
        Canvas { px: vec![v; IMAGE_SIDE * IMAGE_SIDE] }
    }

    fn at(&mut self, y: usize, x: usize) -> &mut [f32; 3] {
        &mut self.px[y * IMAGE_SIDE + x]
    }

    /// 8-bit quantization, the exact values written to disk.
    fn quantize(&self) -> Vec<u8> {
        self.px
            .iter()
            .flat_map(|p| p.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect()
    }
}

fn render_base(style: CategoryStyle, rng: &mut ChaCha8Rng) -> Canvas {
    let side = IMAGE_SIDE as f32;
    match style {
        CategoryStyle::Stripes => {
            let freq = rng.random_range(0.035f32..0.045);
            let phase = rng.random_range(0.0f32..std::f32::consts::TAU);
            let angle = rng.random_range(0.72f32..0.85);
            let tint = rng.random_range(-0.02f32..0.02);
            let (ca, sa) = (angle.cos(), angle.sin());
            let mut canvas = Canvas::filled([0.0; 3]);
            for y in 0..IMAGE_SIDE {
                for x in 0..IMAGE_SIDE {
                    let t = freq * (x as f32 * ca + y as f32 * sa);
                    let v = 0.55 + 0.32 * (std::f32::consts::TAU * t + phase).sin();
                    *canvas.at(y, x) = [v + tint, v, v - tint];
                }
            }
            canvas
        }
        CategoryStyle::Checker => {
            let period = rng.random_range(20.0f32..26.0);
            let shift_x = rng.random_range(0.0f32..period);
            let shift_y = rng.random_range(0.0f32..period);
            let hi = 0.82 + rng.random_range(-0.02f32..0.02);
            let lo = 0.28 + rng.random_range(-0.02f32..0.02);
            let mut canvas = Canvas::filled([0.0; 3]);
            for y in 0..IMAGE_SIDE {
                for x in 0..IMAGE_SIDE {
                    let cx = ((x as f32 + shift_x) / period).floor() as i64;
                    let cy = ((y as f32 + shift_y) / period).floor() as i64;
                    let v = if (cx + cy) % 2 == 0 { hi } else { lo };
                    *canvas.at(y, x) = [v, v * 0.96, v * 0.92];
                }
            }
            canvas
        }
        CategoryStyle::BlobsTexture => {
            // A sum of smooth bumps on a mid gray, tiled positions with
            // jitter so the texture is statistically stationary.
            let mut centers = Vec::new();
            for gy in 0..8 {
                for gx in 0..8 {
                    centers.push((
                        gy as f32 * 32.0 + rng.random_range(4.0f32..28.0),
                        gx as f32 * 32.0 + rng.random_range(4.0f32..28.0),
                        rng.random_range(9.0f32..13.0),
                        rng.random_range(0.22f32..0.34),
                    ));
                }
            }
            let mut canvas = Canvas::filled([0.0; 3]);
            for y in 0..IMAGE_SIDE {
                for x in 0..IMAGE_SIDE {
                    let mut v = 0.42f32;
                    for &(cy, cx, r, a) in &centers {
                        let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                        v += a * (-d2 / (r * r)).exp();
                    }
                    let v = v.clamp(0.0, 1.0);
                    *canvas.at(y, x) = [v, v, v * 0.95];
                }
            }
            canvas
        }
        CategoryStyle::PlacedObject => {
            // Dark disk with a bright notch toward its upper right on a
            // light gradient background; small positional jitter.
            let cy = side * 0.5 + rng.random_range(-4.0f32..4.0);
            let cx = side * 0.5 + rng.random_range(-4.0f32..4.0);
            let radius = side * 0.27 + rng.random_range(-2.0f32..2.0);
            let shade = rng.random_range(-0.02f32..0.02);
            let mut canvas = Canvas::filled([0.0; 3]);
            for y in 0..IMAGE_SIDE {
                for x in 0..IMAGE_SIDE {
                    let bg = 0.84 - 0.10 * (y as f32 / side) + shade;
                    let d = ((y as f32 - cy).powi(2) + (x as f32 - cx).powi(2)).sqrt();
                    let v = if d < radius {
                        // Radial shading keeps the interior non-constant.
                        0.22 + 0.10 * (d / radius) + shade
                    } else {
                        bg
                    };
                    let mut px = [v, v, v];
                    // Notch: a bright square riding the upper-right rim.
                    let (ny, nx) = (cy - radius * 0.62, cx + radius * 0.62);
                    if (y as f32 - ny).abs() < 13.0 && (x as f32 - nx).abs() < 13.0 {
                        px = [0.92, 0.88, 0.55];
                    }
                    *canvas.at(y, x) = px;
                }
            }
            canvas
        }
    }
}

/// Shifts a value by a fixed contrast away from its current tone, so
/// the 8-bit quantization always changes.
fn contrast_shift(v: f32) -> f32 {
    if v < 0.5 {
        v + 0.45
    } else {
        v - 0.45
    }
}

fn draw_defect(canvas: &mut Canvas, defect: DefectType, size: (usize, usize), rng: &mut ChaCha8Rng) {
    let lo = 48usize;
    let hi = IMAGE_SIDE - 48;
    let extent = rng.random_range(size.0..=size.1) as f32;
    match defect {
        DefectType::Scratch => {
            let y0 = rng.random_range(lo..hi) as f32;
            let x0 = rng.random_range(lo..hi) as f32;
            let angle = rng.random_range(0.0f32..std::f32::consts::TAU);
            let (y1, x1) = (y0 + extent * angle.sin(), x0 + extent * angle.cos());
            let width = rng.random_range(1.6f32..2.6);
            for y in 0..IMAGE_SIDE {
                for x in 0..IMAGE_SIDE {
                    if segment_distance(y as f32, x as f32, y0, x0, y1, x1) <= width {
                        let px = canvas.at(y, x);
                        *px = [contrast_shift(px[0]), contrast_shift(px[1]), contrast_shift(px[2])];
                    }
                }
            }
        }
        DefectType::Blob => {
            let cy = rng.random_range(lo..hi) as f32;
            let cx = rng.random_range(lo..hi) as f32;
            let ry = extent / 2.0;
            let rx = extent / 2.0 * rng.random_range(0.6f32..1.0);
            for y in 0..IMAGE_SIDE {
                for x in 0..IMAGE_SIDE {
                    let dy = (y as f32 - cy) / ry;
                    let dx = (x as f32 - cx) / rx;
                    if dy * dy + dx * dx <= 1.0 {
                        let px = canvas.at(y, x);
                        *px = [contrast_shift(px[0]), contrast_shift(px[1]), contrast_shift(px[2])];
                    }
                }
            }
        }
        DefectType::MissingRegion => {
            let h = extent as usize;
            let w = rng.random_range(size.0..=size.1);
            let y0 = rng.random_range(lo..hi - h.min(hi - lo - 1));
            let x0 = rng.random_range(lo..hi - w.min(hi - lo - 1));
            for y in y0..(y0 + h).min(IMAGE_SIDE) {
                for x in x0..(x0 + w).min(IMAGE_SIDE) {
                    *canvas.at(y, x) = [0.96, 0.96, 0.96];
                }
            }
        }
    }
}

fn segment_distance(py: f32, px: f32, y0: f32, x0: f32, y1: f32, x1: f32) -> f32 {
    let (dy, dx) = (y1 - y0, x1 - x0);
    let len2 = dy * dy + dx * dx;
    let t = if len2 > 0.0 { (((py - y0) * dy + (px - x0) * dx) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (cy, cx) = (y0 + t * dy, x0 + t * dx);
    ((py - cy).powi(2) + (px - cx).powi(2)).sqrt()
}

fn write_png_rgb(path: &Path, quantized: &[u8]) -> Result<()> {
    let img = RgbImage::from_raw(IMAGE_SIDE as u32, IMAGE_SIDE as u32, quantized.to_vec())
        .expect("buffer matches dimensions");
    img.save(path).map_err(|e| Error::image(path, e))
}

fn write_png_mask(path: &Path, flags: &[bool]) -> Result<()> {
    let gray: Vec<u8> = flags.iter().map(|&b| if b { 255 } else { 0 }).collect();
    let img = image::GrayImage::from_raw(IMAGE_SIDE as u32, IMAGE_SIDE as u32, gray)
        .expect("buffer matches dimensions");
    img.save(path).map_err(|e| Error::image(path, e))
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Renders the defect-free 8-bit image of one (stream, index) slot.
fn render_clean_quantized(config: &SyntheticConfig, stream: u64, index: u64) -> Vec<u8> {
    let mut rng = image_rng(config.seed, stream, index);
    render_base(config.style, &mut rng).quantize()
}

/// Renders one abnormal test image: the clean render of the same
/// per-image seed with one defect applied. Returns the quantized
/// pixels and the exact changed-pixel mask.
fn render_defected_quantized(
    config: &SyntheticConfig,
    defect: DefectType,
    stream: u64,
    index: u64,
) -> (Vec<u8>, Vec<bool>) {
    let mut rng = image_rng(config.seed, stream, index);
    let clean = render_base(config.style, &mut rng).quantize();
    // Re-render and mutate; the defect draws from the same RNG stream
    // after the base render, keeping everything single-seeded.
    let mut rng = image_rng(config.seed, stream, index);
    let mut canvas = render_base(config.style, &mut rng);
    draw_defect(&mut canvas, defect, config.defect_size, &mut rng);
    let defected = canvas.quantize();
    let mask = clean
        .chunks_exact(3)
        .zip(defected.chunks_exact(3))
        .map(|(a, b)| a != b)
        .collect();
    (defected, mask)
}

/// Generates one category under `root` in the MVTec-style layout,
/// plus `generation.json`. Byte-identical across runs for a fixed
/// config.
pub fn generate_synthetic(root: &Path, config: &SyntheticConfig) -> Result<()> {
    config.validate()?;
    let base = root.join(&config.category);
    let train_dir = base.join("train").join("good");
    let test_good_dir = base.join("test").join("good");
    ensure_dir(&train_dir)?;
    ensure_dir(&test_good_dir)?;

    for i in 0..config.train_count {
        let q = render_clean_quantized(config, STREAM_TRAIN, i as u64);
        write_png_rgb(&train_dir.join(format!("{i:03}.png")), &q)?;
    }
    for i in 0..config.test_good_count {
        let q = render_clean_quantized(config, STREAM_TEST_GOOD, i as u64);
        write_png_rgb(&test_good_dir.join(format!("{i:03}.png")), &q)?;
    }
    for (d, &defect) in config.defect_types.iter().enumerate() {
        let stream = STREAM_DEFECT_BASE + d as u64;
        let test_dir = base.join("test").join(defect.dir_name());
        let mask_dir = base.join("ground_truth").join(defect.dir_name());
        ensure_dir(&test_dir)?;
        ensure_dir(&mask_dir)?;
        for i in 0..config.test_defect_count {
            let (q, mask) = render_defected_quantized(config, defect, stream, i as u64);
            debug_assert!(mask.iter().any(|&b| b), "defect changed no pixel");
            write_png_rgb(&test_dir.join(format!("{i:03}.png")), &q)?;
            write_png_mask(&mask_dir.join(format!("{i:03}_mask.png")), &mask)?;
        }
    }

    let manifest = GenerationManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
    };
    let manifest_path = base.join("generation.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format(&manifest_path, format!("manifest serialization: {e}")))?;
    std::fs::write(&manifest_path, json + "\n").map_err(|e| Error::io(&manifest_path, e))
}
