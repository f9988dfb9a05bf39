//! Anomaly maps and image scores from trained encoders plus feature
//! indexes, with the map file formats used by the pipeline.
//!
//! A patch's anomaly score is its feature's distance to the nearest
//! normal training feature. Patch scores are spread back onto pixels
//! (each pixel averages the scores of every patch covering it), the
//! two scales' maps are combined by elementwise multiplication, and
//! the image score is the maximum pixel of the combined map.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_index::{build_index, FeatureIndex, IndexBuildConfig, IndexMode, Provenance};
use crate::model::{HierarchicalEncoder, Scale};
use crate::numerics::Tensor;
use crate::sampling::{extract_patch, PatchGrid};

/// File signature of the raw float map format.
pub const MAP_MAGIC: &[u8; 4] = b"PSAM";
/// Bumped on incompatible raw-map layout changes.
pub const MAP_VERSION: u32 = 1;

/// Which map a value grid represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapScale {
    Small,
    Big,
    /// Product of the two per-scale maps.
    Multi,
}

/// A per-pixel anomaly score grid for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    pub scale: MapScale,
    h: usize,
    w: usize,
    values: Vec<f32>,
}

impl AnomalyMap {
    /// Wraps a value grid, enforcing finite, non-negative scores.
    pub fn new(scale: MapScale, h: usize, w: usize, values: Vec<f32>) -> Result<Self> {
        if h == 0 || w == 0 || values.len() != h * w {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {h}x{w} map",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::NonFinite("anomaly map values must be finite and >= 0".into()));
        }
        Ok(AnomalyMap { scale, h, w, values })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    /// Score of pixel `(y, x)`.
    pub fn value(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.w + x]
    }

    /// All scores, row-major.
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Largest pixel score.
    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(0.0f32, f32::max)
    }
}

/// Maps and score of one inspected image.
#[derive(Debug, Clone)]
pub struct InspectionResult {
    pub map_small: AnomalyMap,
    pub map_big: AnomalyMap,
    pub map_multi: AnomalyMap,
    /// Equals `map_multi.max()`.
    pub image_score: f32,
}

// ---------------------------------------------------------------------------
// Scoring

fn query_index(index: &FeatureIndex, feature: &Tensor<f32>) -> Result<f64> {
    match index.config().mode {
        IndexMode::Exact => Ok(index.nn_exact(feature)?.distance),
        IndexMode::Approx => Ok(index.nn_approx(feature)?.distance),
    }
}

/// Distance from one patch's feature to the nearest indexed normal
/// feature, by exact scan. The patch's side length selects the scale.
pub fn patch_score(
    index: &FeatureIndex,
    encoder: &HierarchicalEncoder,
    patch: &Tensor<f32>,
) -> Result<f64> {
    let s = patch.shape();
    let scale = match s {
        [k, k2, 3] if *k == *k2 && *k == Scale::Small.patch_size() => Scale::Small,
        [k, k2, 3] if *k == *k2 && *k == Scale::Big.patch_size() => Scale::Big,
        other => {
            return Err(Error::ShapeMismatch(format!(
                "patch shape {other:?} matches neither scale's receptive field"
            )))
        }
    };
    let feat = encoder.encode_patch(patch, scale)?;
    Ok(index.nn_exact(&feat)?.distance)
}

/// Spreads per-patch scores onto pixels: every pixel averages the
/// scores of all patches covering it. Pixels covered by no patch
/// (strict grids whose stride does not reach the far edges) copy the
/// nearest covered pixel, which is the clamp onto the covered
/// rectangle.
pub fn distribute_to_pixels(
    grid: &PatchGrid,
    scores: &[f32],
    h: usize,
    w: usize,
    scale: MapScale,
) -> Result<AnomalyMap> {
    if scores.len() != grid.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores for a grid of {} patches",
            scores.len(),
            grid.len()
        )));
    }
    let k = grid.k;
    let last_row = *grid.rows().last().expect("non-empty grid");
    let last_col = *grid.cols().last().expect("non-empty grid");
    if last_row + k > h || last_col + k > w {
        return Err(Error::ShapeMismatch(format!(
            "grid patches leave the {h}x{w} image"
        )));
    }
    if scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::NonFinite("patch scores must be finite and >= 0".into()));
    }

    let mut sums = vec![0.0f64; h * w];
    let mut counts = vec![0u32; h * w];
    for ((r, c), &score) in grid.coords().zip(scores) {
        for y in r..r + k {
            let row = y * w;
            for x in c..c + k {
                sums[row + x] += score as f64;
                counts[row + x] += 1;
            }
        }
    }
    let (y_max, x_max) = (last_row + k - 1, last_col + k - 1);
    let mut values = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = (y.min(y_max), x.min(x_max));
            let i = sy * w + sx;
            values[y * w + x] = (sums[i] / counts[i] as f64) as f32;
        }
    }
    AnomalyMap::new(scale, h, w, values)
}

/// Elementwise product of two equally sized maps.
pub fn aggregate_multiscale(small: &AnomalyMap, big: &AnomalyMap) -> Result<AnomalyMap> {
    if small.h != big.h || small.w != big.w {
        return Err(Error::ShapeMismatch(format!(
            "map sizes {}x{} and {}x{} differ",
            small.h, small.w, big.h, big.w
        )));
    }
    let values = small.values.iter().zip(&big.values).map(|(a, b)| a * b).collect();
    AnomalyMap::new(MapScale::Multi, small.h, small.w, values)
}

/// Maximum pixel score of a map.
pub fn image_score(map: &AnomalyMap) -> f32 {
    map.max()
}

/// Scores one scale of one image: a full-image convolutional pass
/// produces the stride-lattice features, flush-edge patches (present
/// only when the stride does not tile the image) are encoded
/// individually, and every grid patch is scored against the index
/// with its configured search mode.
fn scale_map(
    encoder: &HierarchicalEncoder,
    index: &FeatureIndex,
    image: &Tensor<f32>,
    scale: Scale,
) -> Result<AnomalyMap> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let k = scale.patch_size();
    let stride = scale.default_stride();
    if index.dim() != encoder.config.embed_dim {
        return Err(Error::ShapeMismatch(format!(
            "index dimension {} does not match encoder dimension {}",
            index.dim(),
            encoder.config.embed_dim
        )));
    }

    let grid = PatchGrid::covering(h, w, k, stride)?;
    let lattice = encoder.encode_image(image, scale)?;
    let on_lattice = |p: usize| -> Option<usize> {
        p.is_multiple_of(stride).then_some(p / stride)
    };

    // Gather the query feature of every covering-grid cell.
    let mut queries: Vec<Tensor<f32>> = Vec::with_capacity(grid.len());
    for (r, c) in grid.coords() {
        let cell = match (on_lattice(r), on_lattice(c)) {
            (Some(gr), Some(gc)) if gr < lattice.rows && gc < lattice.cols => {
                Tensor::from_vec(&[lattice.dim], lattice.feature(gr, gc).to_vec())?
            }
            _ => encoder.encode_patch(&extract_patch(image, r, c, k)?, scale)?,
        };
        queries.push(cell);
    }

    let scores: Vec<f32> = queries
        .par_iter()
        .map(|q| query_index(index, q).map(|d| d as f32))
        .collect::<Result<_>>()?;
    distribute_to_pixels(&grid, &scores, h, w, match scale {
        Scale::Small => MapScale::Small,
        Scale::Big => MapScale::Big,
    })
}

/// Full inspection of one preprocessed `[H, W, 3]` image: both
/// per-scale maps, their product, and the image score.
pub fn inspect_image(
    encoder: &HierarchicalEncoder,
    index_small: &FeatureIndex,
    index_big: &FeatureIndex,
    image: &Tensor<f32>,
) -> Result<InspectionResult> {
    let map_small = scale_map(encoder, index_small, image, Scale::Small)?;
    let map_big = scale_map(encoder, index_big, image, Scale::Big)?;
    let map_multi = aggregate_multiscale(&map_small, &map_big)?;
    let image_score = image_score(&map_multi);
    Ok(InspectionResult { map_small, map_big, map_multi, image_score })
}

/// Encodes every training image on its stride-dense lattice at
/// `scale` and builds the searchable bank of normal features, with
/// provenance recording which image and lattice cell each feature
/// came from.
pub fn build_feature_bank(
    encoder: &HierarchicalEncoder,
    images: &[Tensor<f32>],
    scale: Scale,
    config: IndexBuildConfig,
) -> Result<FeatureIndex> {
    if images.is_empty() {
        return Err(Error::EmptyInput("build_feature_bank: no training images"));
    }
    let mut features = Vec::new();
    let mut provenance = Vec::new();
    for (i, image) in images.iter().enumerate() {
        let grid = encoder.encode_image(image, scale)?;
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                features.push(Tensor::from_vec(&[grid.dim], grid.feature(r, c).to_vec())?);
                provenance.push(Provenance { image: i as u32, row: r as u32, col: c as u32 });
            }
        }
    }
    build_index(&features, provenance, config)
}

// ---------------------------------------------------------------------------
// Map files

fn scale_tag(scale: MapScale) -> u8 {
    match scale {
        MapScale::Small => 0,
        MapScale::Big => 1,
        MapScale::Multi => 2,
    }
}

/// Writes the raw little-endian float map format (exact values).
pub fn save_map(map: &AnomalyMap, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(MAP_MAGIC)?;
    put(&MAP_VERSION.to_le_bytes())?;
    put(&[scale_tag(map.scale)])?;
    put(&(map.h as u32).to_le_bytes())?;
    put(&(map.w as u32).to_le_bytes())?;
    for v in &map.values {
        put(&v.to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a map written by [`save_map`], bit-exactly.
pub fn load_map(path: &Path) -> Result<AnomalyMap> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut buf4 = [0u8; 4];
    let fail = |reason: &str| Error::format(path, reason);

    r.read_exact(&mut buf4).map_err(|_| fail("unexpected end of file"))?;
    if &buf4 != MAP_MAGIC {
        return Err(fail("not an anomaly map file (bad magic)"));
    }
    r.read_exact(&mut buf4).map_err(|_| fail("unexpected end of file"))?;
    let version = u32::from_le_bytes(buf4);
    if version != MAP_VERSION {
        return Err(Error::format(path, format!("unsupported map version {version}")));
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag).map_err(|_| fail("unexpected end of file"))?;
    let scale = match tag[0] {
        0 => MapScale::Small,
        1 => MapScale::Big,
        2 => MapScale::Multi,
        t => return Err(Error::format(path, format!("unknown map scale tag {t}"))),
    };
    r.read_exact(&mut buf4).map_err(|_| fail("unexpected end of file"))?;
    let h = u32::from_le_bytes(buf4) as usize;
    r.read_exact(&mut buf4).map_err(|_| fail("unexpected end of file"))?;
    let w = u32::from_le_bytes(buf4) as usize;
    if h == 0 || w == 0 {
        return Err(fail("empty map"));
    }
    let mut values = Vec::with_capacity(h * w);
    for _ in 0..h * w {
        r.read_exact(&mut buf4).map_err(|_| fail("unexpected end of file"))?;
        values.push(f32::from_le_bytes(buf4));
    }
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => {}
        Ok(_) => return Err(fail("trailing bytes after map payload")),
        Err(e) => return Err(Error::io(path, e)),
    }
    AnomalyMap::new(scale, h, w, values)
}

/// Writes a 16-bit grayscale PGM preview. Values are scaled by the
/// map's maximum, which is recorded in a header comment
/// (`# scale_max <max>`) so absolute scores remain recoverable.
pub fn save_pgm16(map: &AnomalyMap, path: &Path) -> Result<()> {
    let max = map.max();
    let header = format!("P5\n# scale_max {max}\n{} {}\n65535\n", map.w, map.h);
    let mut bytes = Vec::with_capacity(header.len() + map.values.len() * 2);
    bytes.extend_from_slice(header.as_bytes());
    for &v in &map.values {
        let q = if max > 0.0 {
            ((v / max) as f64 * 65535.0).round() as u16
        } else {
            0
        };
        // PGM samples above 255 are big-endian two-byte values.
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// One line of the per-run JSON-lines score manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    /// Image identifier (relative path within the run).
    pub image: String,
    pub score: f32,
    pub map_small: String,
    pub map_big: String,
    pub map_multi: String,
    /// 16-bit PGM preview of the combined map.
    pub preview: String,
}

impl ScoreRecord {
    /// Serializes to one manifest line (no trailing newline).
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }

    /// Parses one manifest line.
    pub fn from_json_line(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| {
            Error::InvalidArgument(format!("bad score manifest line: {e}"))
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::feature_index::{build_index, IndexBuildConfig, Provenance};
    use crate::model::{EncoderConfig, PatchModel};
    use crate::sampling::sample_patch;

    use super::*;

    fn test_image(side: usize, seed: usize) -> Tensor<f32> {
        let data = (0..side * side * 3)
            .map(|i| (((i * 31 + seed * 7) % 113) as f32) / 112.0)
            .collect();
        Tensor::from_vec(&[side, side, 3], data).unwrap()
    }

    fn map_from(values: Vec<f32>, h: usize, w: usize) -> AnomalyMap {
        AnomalyMap::new(MapScale::Small, h, w, values).unwrap()
    }

    /// Builds per-scale indexes holding every grid feature of `image`.
    fn index_image(
        model: &PatchModel,
        image: &Tensor<f32>,
        scale: Scale,
        mode: IndexMode,
    ) -> FeatureIndex {
        let grid = model.encoder.encode_image(image, scale).unwrap();
        let mut feats = Vec::new();
        let mut prov = Vec::new();
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                feats.push(Tensor::from_vec(&[grid.dim], grid.feature(r, c).to_vec()).unwrap());
                prov.push(Provenance {
                    image: 0,
                    row: (r * grid.stride) as u32,
                    col: (c * grid.stride) as u32,
                });
            }
        }
        build_index(&feats, prov, IndexBuildConfig { mode, ..IndexBuildConfig::default() }).unwrap()
    }

    // -- patch scoring ------------------------------------------------------

    #[test]
    fn indexed_training_patches_score_zero_and_scores_are_nonnegative() {
        let model = PatchModel::init_random(&EncoderConfig::default(), 41).unwrap();
        let img = test_image(128, 1);
        let idx = index_image(&model, &img, Scale::Small, IndexMode::Exact);

        // A patch on the stride lattice is stored bit-identically.
        let patch = extract_patch(&img, 8, 24, 32).unwrap();
        assert_eq!(patch_score(&idx, &model.encoder, &patch).unwrap(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let (p, _) = sample_patch(&img, 32, &mut rng).unwrap();
            assert!(patch_score(&idx, &model.encoder, &p).unwrap() >= 0.0);
        }
    }

    #[test]
    fn patch_score_equals_the_encode_then_query_composition() {
        let model = PatchModel::init_random(&EncoderConfig::default(), 42).unwrap();
        let img = test_image(128, 2);
        let other = test_image(128, 3);
        let idx = index_image(&model, &img, Scale::Small, IndexMode::Exact);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (p, _) = sample_patch(&other, 32, &mut rng).unwrap();
            let composed = idx.nn_exact(&model.encoder.encode_patch(&p, Scale::Small).unwrap()).unwrap();
            assert_eq!(patch_score(&idx, &model.encoder, &p).unwrap(), composed.distance);
        }
        // Wrong patch size is rejected.
        let bad = Tensor::zeros(&[16, 16, 3]);
        assert!(patch_score(&idx, &model.encoder, &bad).is_err());
    }

    #[test]
    fn growing_the_index_never_raises_a_patch_score() {
        let model = PatchModel::init_random(&EncoderConfig::default(), 43).unwrap();
        let img = test_image(96, 4);
        let query_src = test_image(96, 5);
        let grid = model.encoder.encode_image(&img, Scale::Small).unwrap();
        let all: Vec<Tensor<f32>> = (0..grid.rows)
            .flat_map(|r| {
                let g = &grid;
                (0..g.cols)
                    .map(move |c| Tensor::from_vec(&[g.dim], g.feature(r, c).to_vec()).unwrap())
            })
            .collect();
        let prov = |n: usize| (0..n).map(|i| Provenance { image: 0, row: i as u32, col: 0 }).collect();
        let sub = build_index(&all[..40], prov(40), IndexBuildConfig::default()).unwrap();
        let full = build_index(&all, prov(all.len()), IndexBuildConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let (p, _) = sample_patch(&query_src, 32, &mut rng).unwrap();
            let d_sub = patch_score(&sub, &model.encoder, &p).unwrap();
            let d_full = patch_score(&full, &model.encoder, &p).unwrap();
            assert!(d_full <= d_sub + 1e-12);
        }
    }

    // -- pixel distribution -------------------------------------------------

    #[test]
    fn one_patch_covering_everything_gives_a_constant_map() {
        let grid = PatchGrid::regular(8, 8, 8, 8).unwrap();
        let map = distribute_to_pixels(&grid, &[0.75], 8, 8, MapScale::Small).unwrap();
        assert!(map.values().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn two_overlapping_patches_average_on_their_strip() {
        // 4px patches at columns 0 and 2 of a 4x6 image: columns 2..4
        // are covered by both.
        let grid = PatchGrid::regular(4, 6, 4, 2).unwrap();
        assert_eq!(grid.len(), 2);
        let map = distribute_to_pixels(&grid, &[1.0, 3.0], 4, 6, MapScale::Small).unwrap();
        for y in 0..4 {
            for x in 0..2 {
                assert_eq!(map.value(y, x), 1.0);
            }
            for x in 2..4 {
                assert_eq!(map.value(y, x), 2.0);
            }
            for x in 4..6 {
                assert_eq!(map.value(y, x), 3.0);
            }
        }
    }

    #[test]
    fn full_default_grid_matches_the_pixelwise_accumulation_oracle() {
        let (h, w, k, s) = (256usize, 256usize, 32usize, 4usize);
        let grid = PatchGrid::regular(h, w, k, s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let scores: Vec<f32> = (0..grid.len()).map(|_| rng.random_range(0.0..2.0)).collect();
        let map = distribute_to_pixels(&grid, &scores, h, w, MapScale::Small).unwrap();

        // Oracle: per pixel, scan all patches for coverage in the same
        // row-major patch order, accumulating in 64-bit.
        let coords: Vec<(usize, usize)> = grid.coords().collect();
        for &(py, px) in &[(0usize, 0usize), (0, 255), (255, 0), (131, 77), (16, 240), (255, 255)] {
            let mut sum = 0.0f64;
            let mut n = 0u32;
            for ((r, c), &s) in coords.iter().zip(&scores) {
                if py >= *r && py < r + k && px >= *c && px < c + k {
                    sum += s as f64;
                    n += 1;
                }
            }
            assert_eq!(map.value(py, px), (sum / n as f64) as f32, "pixel ({py}, {px})");
        }
    }

    #[test]
    fn uncovered_border_pixels_copy_the_nearest_covered_pixel() {
        // Strict 32px/16px grid on 70x50 leaves rows 64.. and cols 48..
        // uncovered.
        let grid = PatchGrid::regular(70, 50, 32, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let scores: Vec<f32> = (0..grid.len()).map(|_| rng.random_range(0.0..1.0)).collect();
        let map = distribute_to_pixels(&grid, &scores, 70, 50, MapScale::Small).unwrap();
        for y in 0..70 {
            for x in 0..50 {
                let expect = map.value(y.min(63), x.min(47));
                assert_eq!(map.value(y, x), expect);
            }
        }
    }

    #[test]
    fn coverage_weighted_pixel_mean_equals_area_weighted_patch_mean() {
        let (h, w, k, s) = (20usize, 14usize, 6usize, 4usize);
        let grid = PatchGrid::covering(h, w, k, s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scores: Vec<f32> = (0..grid.len()).map(|_| rng.random_range(0.0..1.0)).collect();
        let map = distribute_to_pixels(&grid, &scores, h, w, MapScale::Small).unwrap();

        // Recount coverage, then compare the two weighted totals.
        let mut counts = vec![0u32; h * w];
        for (r, c) in grid.coords() {
            for y in r..r + k {
                for x in c..c + k {
                    counts[y * w + x] += 1;
                }
            }
        }
        let pixel_total: f64 = map
            .values()
            .iter()
            .zip(&counts)
            .map(|(&v, &n)| v as f64 * n as f64)
            .sum();
        let patch_total: f64 = scores.iter().map(|&s| s as f64 * (k * k) as f64).sum();
        assert!((pixel_total - patch_total).abs() < 1e-3 * patch_total.abs().max(1.0));
    }

    #[test]
    fn distribution_rejects_bad_scores_and_mismatched_lengths() {
        let grid = PatchGrid::regular(8, 8, 4, 4).unwrap();
        assert!(distribute_to_pixels(&grid, &[1.0], 8, 8, MapScale::Small).is_err());
        assert!(
            distribute_to_pixels(&grid, &[1.0, 1.0, 1.0, f32::NAN], 8, 8, MapScale::Small).is_err()
        );
        assert!(
            distribute_to_pixels(&grid, &[1.0, 1.0, 1.0, -0.5], 8, 8, MapScale::Small).is_err()
        );
    }

    // -- aggregation and image score ----------------------------------------

    #[test]
    fn multiplying_by_an_all_ones_map_is_the_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let values: Vec<f32> = (0..12).map(|_| rng.random_range(0.0..3.0)).collect();
        let m = map_from(values.clone(), 3, 4);
        let ones = map_from(vec![1.0; 12], 3, 4);
        let zeros = map_from(vec![0.0; 12], 3, 4);

        let prod = aggregate_multiscale(&ones, &m).unwrap();
        assert_eq!(prod.values(), m.values());
        assert_eq!(prod.scale, MapScale::Multi);
        assert!(aggregate_multiscale(&zeros, &m).unwrap().values().iter().all(|&v| v == 0.0));

        let other = map_from(values.iter().map(|v| v + 0.5).collect(), 3, 4);
        let prod = aggregate_multiscale(&m, &other).unwrap();
        for i in 0..12 {
            assert_eq!(prod.values()[i], m.values()[i] * other.values()[i]);
        }

        let small = map_from(vec![1.0; 6], 2, 3);
        assert!(aggregate_multiscale(&m, &small).is_err());
    }

    #[test]
    fn image_score_is_the_pixel_maximum() {
        assert_eq!(image_score(&map_from(vec![0.7; 9], 3, 3)), 0.7);
        let mut v = vec![0.0f32; 9];
        v[5] = 5.0;
        assert_eq!(image_score(&map_from(v, 3, 3)), 5.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let values: Vec<f32> = (0..64).map(|_| rng.random_range(0.0..9.0)).collect();
        let expect = values.iter().copied().fold(f32::MIN, f32::max);
        assert_eq!(image_score(&map_from(values, 8, 8)), expect);
    }

    // -- full inspection ----------------------------------------------------

    #[test]
    fn inspecting_a_fully_indexed_training_image_scores_zero() {
        let model = PatchModel::init_random(&EncoderConfig::default(), 44).unwrap();
        let img = test_image(256, 12);
        let idx_small = index_image(&model, &img, Scale::Small, IndexMode::Approx);
        let idx_big = index_image(&model, &img, Scale::Big, IndexMode::Approx);
        let result = inspect_image(&model.encoder, &idx_small, &idx_big, &img).unwrap();
        assert_eq!(result.image_score, 0.0);
        assert!(result.map_multi.values().iter().all(|&v| v == 0.0));
        assert_eq!(result.map_small.height(), 256);
        assert_eq!(result.map_big.width(), 256);
    }

    #[test]
    fn inspection_localizes_an_injected_difference_and_keeps_the_score_contract() {
        let model = PatchModel::init_random(&EncoderConfig::default(), 45).unwrap();
        let img = test_image(256, 13);
        let idx_small = index_image(&model, &img, Scale::Small, IndexMode::Approx);
        let idx_big = index_image(&model, &img, Scale::Big, IndexMode::Approx);

        // Paste a bright square: the defect region.
        let mut defected = img.clone();
        let (dy, dx, side) = (140usize, 60usize, 24usize);
        for y in dy..dy + side {
            for x in dx..dx + side {
                for c in 0..3 {
                    let i = defected.offset3(y, x, c);
                    defected.data_mut()[i] = 1.0;
                }
            }
        }
        let result = inspect_image(&model.encoder, &idx_small, &idx_big, &defected).unwrap();

        // The image score is the combined map's maximum...
        assert_eq!(result.image_score, result.map_multi.max());
        assert!(result.image_score > 0.0);
        // ...the combined map is the exact elementwise product...
        for i in [0usize, 1000, 33333, 65535] {
            assert_eq!(
                result.map_multi.values()[i],
                result.map_small.values()[i] * result.map_big.values()[i]
            );
        }
        // ...and its argmax lies within the defect dilated by half the
        // big receptive field.
        let argmax = result
            .map_multi
            .values()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        let (ay, ax) = (argmax / 256, argmax % 256);
        let margin = Scale::Big.patch_size() / 2;
        assert!(
            ay + margin >= dy && ay < dy + side + margin && ax + margin >= dx && ax < dx + side + margin,
            "argmax ({ay}, {ax}) outside defect at ({dy}, {dx})+{side}"
        );
    }

    // -- map files ----------------------------------------------------------

    #[test]
    fn raw_maps_roundtrip_bitwise_and_reject_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.psam");
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let values: Vec<f32> = (0..48).map(|_| rng.random_range(0.0..4.0)).collect();
        let map = AnomalyMap::new(MapScale::Multi, 6, 8, values).unwrap();
        save_map(&map, &path).unwrap();
        let loaded = load_map(&path).unwrap();
        assert_eq!(loaded, map);

        let bytes = std::fs::read(&path).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(load_map(&path).is_err());
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(load_map(&path).is_err());
        let mut long = bytes.clone();
        long.push(7);
        std::fs::write(&path, &long).unwrap();
        assert!(load_map(&path).is_err());
    }

    #[test]
    fn pgm_previews_scale_by_the_recorded_maximum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let map = map_from(vec![0.0, 1.0, 2.0, 4.0], 2, 2);
        save_pgm16(&map, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = format!("P5\n# scale_max {}\n2 2\n65535\n", 4.0f32);
        assert!(bytes.starts_with(header.as_bytes()));
        let samples: Vec<u16> = bytes[header.len()..]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]))
            .collect();
        assert_eq!(samples, vec![0, 16384, 32768, 65535]);

        // All-zero maps stay all zero without dividing by zero.
        let zero = map_from(vec![0.0; 4], 2, 2);
        save_pgm16(&zero, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.ends_with(&[0, 0, 0, 0, 0, 0, 0, 0]));
    }

    #[test]
    fn score_records_roundtrip_through_json_lines() {
        let rec = ScoreRecord {
            image: "test/crack/003.png".into(),
            score: 1.25,
            map_small: "maps/003_small.psam".into(),
            map_big: "maps/003_big.psam".into(),
            map_multi: "maps/003_multi.psam".into(),
            preview: "maps/003.pgm".into(),
        };
        let line = rec.to_json_line();
        assert!(!line.contains('\n'));
        assert_eq!(ScoreRecord::from_json_line(&line).unwrap(), rec);
        assert!(ScoreRecord::from_json_line("{broken").is_err());
    }

    #[test]
    fn feature_bank_holds_every_lattice_cell_with_provenance() {
        let model = PatchModel::init_random(&EncoderConfig::default(), 47).unwrap();
        let images = vec![test_image(96, 0), test_image(96, 5)];
        let bank = build_feature_bank(
            &model.encoder,
            &images,
            Scale::Small,
            IndexBuildConfig { mode: IndexMode::Exact, ..IndexBuildConfig::default() },
        )
        .unwrap();

        // 96x96 at K=32/S=4: (96 - 32) / 4 + 1 = 17 cells per axis.
        let grid = model.encoder.encode_image(&images[0], Scale::Small).unwrap();
        assert_eq!((grid.rows, grid.cols), (17, 17));
        assert_eq!(bank.len(), 2 * 17 * 17);

        // Provenance covers both images in lattice order.
        assert_eq!(bank.provenance(0), Provenance { image: 0, row: 0, col: 0 });
        let last = bank.provenance(bank.len() - 1);
        assert_eq!(last, Provenance { image: 1, row: 16, col: 16 });

        // A stored lattice feature is found at distance zero.
        let probe = Tensor::from_vec(&[grid.dim], grid.feature(3, 11).to_vec()).unwrap();
        assert_eq!(bank.nn_exact(&probe).unwrap().distance, 0.0);
        assert!(build_feature_bank(
            &model.encoder,
            &[],
            Scale::Small,
            IndexBuildConfig::default()
        )
        .is_err());
    }
}
