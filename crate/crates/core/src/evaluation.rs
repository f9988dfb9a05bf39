//! Metrics and reference baselines: ranked AUROC at image and pixel
//! level, TwoNN intrinsic-dimension estimates, rank correlation, and
//! the no-training nearest-neighbor baselines.
//!
//! AUROC uses midranks, so ties contribute one half; the result
//! always equals brute-force pair counting. Pixel AUROC pools the
//! pixels of all test images into one multiset rather than averaging
//! per-image curves, which is deterministic and matches common
//! practice for this dataset layout.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ImageRecord, Label, Mask};
use crate::error::{Error, Result};
use crate::feature_index::{build_index, FeatureIndex, IndexBuildConfig, IndexMode, Provenance};
use crate::inference::{
    build_feature_bank, distribute_to_pixels, image_score, inspect_image, AnomalyMap, MapScale,
};
use crate::model::{EncoderConfig, PatchModel};
use crate::numerics::Tensor;
use crate::sampling::{extract_patch, PatchGrid};

/// Name of the intrinsic-dimension estimator recorded in reports.
pub const ID_ESTIMATOR: &str = "two-nn";

/// Scores split by ground-truth class.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledScores {
    pub normal: Vec<f64>,
    pub abnormal: Vec<f64>,
}

impl LabeledScores {
    /// Wraps score lists, rejecting non-finite values.
    pub fn new(normal: Vec<f64>, abnormal: Vec<f64>) -> Result<Self> {
        let s = LabeledScores { normal, abnormal };
        s.check_finite()?;
        Ok(s)
    }

    fn check_finite(&self) -> Result<()> {
        if self.normal.iter().chain(&self.abnormal).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("labeled scores contain NaN or infinity".into()));
        }
        Ok(())
    }

    /// Adds `score` under the record's label.
    pub fn push(&mut self, label: Label, score: f64) {
        match label {
            Label::Normal => self.normal.push(score),
            Label::Abnormal => self.abnormal.push(score),
        }
    }
}

/// 1-based midranks: tied values all receive the mean of the ranks
/// they occupy.
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j + 1) as f64 / 2.0;
        for &idx in &order[i..j] {
            ranks[idx] = rank;
        }
        i = j;
    }
    ranks
}

/// Probability that a random abnormal score exceeds a random normal
/// score, ties counting one half, via the rank-sum (Mann-Whitney)
/// identity in O(n log n).
pub fn auroc(scores: &LabeledScores) -> Result<f64> {
    scores.check_finite()?;
    if scores.normal.is_empty() {
        return Err(Error::EmptyInput("auroc: no normal scores"));
    }
    if scores.abnormal.is_empty() {
        return Err(Error::EmptyInput("auroc: no abnormal scores"));
    }
    let pooled: Vec<f64> = scores.normal.iter().chain(&scores.abnormal).copied().collect();
    let ranks = midranks(&pooled);
    let (n1, n2) = (scores.normal.len() as f64, scores.abnormal.len() as f64);
    let abnormal_rank_sum: f64 = ranks[scores.normal.len()..].iter().sum();
    Ok((abnormal_rank_sum - n2 * (n2 + 1.0) / 2.0) / (n1 * n2))
}

/// AUROC over the pooled pixels of all test images: a pixel is
/// abnormal when its mask flag is set. Maps and masks are matched
/// pairwise and must agree in shape.
pub fn pixel_auroc(maps: &[AnomalyMap], masks: &[Mask]) -> Result<f64> {
    if maps.len() != masks.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} maps vs {} masks",
            maps.len(),
            masks.len()
        )));
    }
    if maps.is_empty() {
        return Err(Error::EmptyInput("pixel_auroc: no maps"));
    }
    let mut pool = LabeledScores::default();
    for (map, mask) in maps.iter().zip(masks) {
        if (map.height(), map.width()) != (mask.height(), mask.width()) {
            return Err(Error::ShapeMismatch(format!(
                "map {}x{} vs mask {}x{}",
                map.height(),
                map.width(),
                mask.height(),
                mask.width()
            )));
        }
        for (&v, &defective) in map.values().iter().zip(mask.flags()) {
            pool.push(if defective { Label::Abnormal } else { Label::Normal }, v as f64);
        }
    }
    auroc(&pool)
}

/// Image-level and pixel-level AUROC for one test split: `maps[i]` is
/// the combined anomaly map of `records[i]`. Records without a mask
/// contribute all-normal pixels.
pub fn dataset_aurocs(records: &[ImageRecord], maps: &[AnomalyMap]) -> Result<(f64, f64)> {
    if records.len() != maps.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} records vs {} maps",
            records.len(),
            maps.len()
        )));
    }
    let mut image_scores = LabeledScores::default();
    let mut masks = Vec::with_capacity(records.len());
    for (record, map) in records.iter().zip(maps) {
        image_scores.push(record.label, image_score(map) as f64);
        masks.push(match &record.mask {
            Some(m) => m.clone(),
            None => Mask::new(map.height(), map.width(), vec![false; map.height() * map.width()])?,
        });
    }
    Ok((auroc(&image_scores)?, pixel_auroc(maps, &masks)?))
}

// ---------------------------------------------------------------------------
// Intrinsic dimension

/// Hashable exact-equality key; -0.0 is folded onto 0.0 so "distinct"
/// implies a strictly positive distance.
fn point_key(point: &[f64]) -> Vec<u64> {
    point.iter().map(|&v| if v == 0.0 { 0.0f64 } else { v }.to_bits()).collect()
}

/// TwoNN maximum-likelihood intrinsic dimension: with d1 <= d2 the
/// two smallest neighbor distances of each point, the estimate is
/// (n - 1) / sum(ln(d2 / d1)). Exact-duplicate points are dropped
/// first so every ratio is well defined; at least 10 distinct points
/// are required.
pub fn intrinsic_dimension(points: &[Vec<f64>]) -> Result<f64> {
    let dim = points.first().ok_or(Error::EmptyInput("intrinsic_dimension: no points"))?.len();
    for p in points {
        if p.len() != dim {
            return Err(Error::ShapeMismatch(format!(
                "point of dimension {} in a cloud of dimension {dim}",
                p.len()
            )));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("intrinsic_dimension: non-finite coordinate".into()));
        }
    }
    let mut seen = HashSet::new();
    let unique: Vec<&[f64]> =
        points.iter().filter(|p| seen.insert(point_key(p))).map(|p| p.as_slice()).collect();
    let n = unique.len();
    if n < 10 {
        return Err(Error::InvalidArgument(format!(
            "intrinsic_dimension needs at least 10 distinct points, got {n}"
        )));
    }

    let log_ratio_sum: f64 = unique
        .par_iter()
        .enumerate()
        .map(|(i, a)| {
            let (mut d1, mut d2) = (f64::INFINITY, f64::INFINITY);
            for (j, b) in unique.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d: f64 = a.iter().zip(*b).map(|(x, y)| (x - y) * (x - y)).sum();
                if d < d1 {
                    (d1, d2) = (d, d1);
                } else if d < d2 {
                    d2 = d;
                }
            }
            // Squared distances, so the log ratio carries a half.
            0.5 * (d2 / d1).ln()
        })
        .sum();
    if !(log_ratio_sum > 0.0 && log_ratio_sum.is_finite()) {
        return Err(Error::NonFinite(format!(
            "degenerate neighbor ratios (sum of log ratios = {log_ratio_sum})"
        )));
    }
    Ok((n - 1) as f64 / log_ratio_sum)
}

/// Spearman rank correlation with midrank tie handling. Errors when
/// either input is constant (the correlation is undefined).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} samples", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::EmptyInput("spearman: need at least 2 samples"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spearman: non-finite sample".into()));
    }
    let (ra, rb) = (midranks(a), midranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::InvalidArgument("spearman: constant input has no rank order".into()));
    }
    Ok(cov / (va.sqrt() * vb.sqrt()))
}

// ---------------------------------------------------------------------------
// Baselines

/// AUROC pair produced by one baseline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineScores {
    pub name: String,
    pub image_auroc: f64,
    pub pixel_auroc: f64,
}

fn flatten_patch(patch: &Tensor<f32>) -> Result<Tensor<f32>> {
    Tensor::from_vec(&[patch.len()], patch.data().to_vec())
}

/// Index of flattened raw `k`-pixel patches from every training
/// image, on the covering grid with the given stride.
fn raw_patch_index(train: &[ImageRecord], k: usize, stride: usize) -> Result<FeatureIndex> {
    let mut features = Vec::new();
    let mut provenance = Vec::new();
    for (i, record) in train.iter().enumerate() {
        let s = record.pixels.shape();
        let grid = PatchGrid::covering(s[0], s[1], k, stride)?;
        for (row, col) in grid.coords() {
            features.push(flatten_patch(&extract_patch(&record.pixels, row, col, k)?)?);
            provenance.push(Provenance { image: i as u32, row: row as u32, col: col as u32 });
        }
    }
    build_index(
        &features,
        provenance,
        IndexBuildConfig { mode: IndexMode::Exact, ..IndexBuildConfig::default() },
    )
}

/// Per-patch raw distances over the covering grid of one image.
fn raw_patch_scores(
    index: &FeatureIndex,
    image: &Tensor<f32>,
    k: usize,
    stride: usize,
) -> Result<(PatchGrid, Vec<f32>)> {
    let s = image.shape();
    let grid = PatchGrid::covering(s[0], s[1], k, stride)?;
    let cells: Vec<(usize, usize)> = grid.coords().collect();
    let scores = cells
        .par_iter()
        .map(|&(row, col)| {
            let feat = flatten_patch(&extract_patch(image, row, col, k)?)?;
            Ok(index.nn_exact(&feat)?.distance as f32)
        })
        .collect::<Result<Vec<f32>>>()?;
    Ok((grid, scores))
}

fn raw_patch_map(
    index: &FeatureIndex,
    image: &Tensor<f32>,
    k: usize,
    stride: usize,
) -> Result<AnomalyMap> {
    let (grid, scores) = raw_patch_scores(index, image, k, stride)?;
    let s = image.shape();
    distribute_to_pixels(&grid, &scores, s[0], s[1], MapScale::Small)
}

/// Nearest-neighbor baseline with the identity feature map: each
/// patch's score is its raw pixel distance to the closest training
/// patch of the same size. One call evaluates one patch size `k` and
/// grid stride; callers pick the scales they can afford.
pub fn baseline_raw_patch(
    train: &[ImageRecord],
    test: &[ImageRecord],
    k: usize,
    stride: usize,
) -> Result<BaselineScores> {
    let index = raw_patch_index(train, k, stride)?;
    let maps: Vec<AnomalyMap> = test
        .iter()
        .map(|r| raw_patch_map(&index, &r.pixels, k, stride))
        .collect::<Result<_>>()?;
    let (image_auroc, pixel_auroc) = dataset_aurocs(test, &maps)?;
    Ok(BaselineScores { name: "raw-patch".into(), image_auroc, pixel_auroc })
}

/// Nearest-neighbor baseline through a freshly initialized, untrained
/// encoder: the full two-scale inference pipeline with random
/// weights. Deterministic in `seed`.
pub fn baseline_random_encoder(
    train: &[ImageRecord],
    test: &[ImageRecord],
    seed: u64,
) -> Result<BaselineScores> {
    let model = PatchModel::init_random(&EncoderConfig::default(), seed)?;
    let images: Vec<Tensor<f32>> = train.iter().map(|r| r.pixels.clone()).collect();
    let config = IndexBuildConfig { seed, ..IndexBuildConfig::default() };
    let bank_small =
        build_feature_bank(&model.encoder, &images, crate::model::Scale::Small, config)?;
    let bank_big = build_feature_bank(&model.encoder, &images, crate::model::Scale::Big, config)?;
    let maps: Vec<AnomalyMap> = test
        .iter()
        .map(|r| {
            inspect_image(&model.encoder, &bank_small, &bank_big, &r.pixels)
                .map(|result| result.map_multi)
        })
        .collect::<Result<_>>()?;
    let (image_auroc, pixel_auroc) = dataset_aurocs(test, &maps)?;
    Ok(BaselineScores { name: "random-encoder".into(), image_auroc, pixel_auroc })
}

// ---------------------------------------------------------------------------
// Reports

/// One test image's score in the per-category listing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScoreRow {
    pub image: String,
    pub label: Label,
    pub score: f64,
}

/// Per-category results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryEval {
    pub category: String,
    pub image_auroc: f64,
    pub pixel_auroc: f64,
    /// TwoNN estimates keyed by scale name (`small`, `big`).
    pub intrinsic_dimension: BTreeMap<String, f64>,
    pub image_scores: Vec<ImageScoreRow>,
}

/// Aggregated evaluation results across categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Unweighted mean of the per-category image AUROCs.
    pub image_auroc: f64,
    /// Unweighted mean of the per-category pixel AUROCs.
    pub pixel_auroc: f64,
    pub categories: Vec<CategoryEval>,
    pub baselines: Vec<BaselineScores>,
    pub id_estimator: String,
    pub notes: Vec<String>,
}

fn check_unit_interval(what: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::InvalidArgument(format!("{what} = {v} outside [0, 1]")));
    }
    Ok(())
}

impl EvalReport {
    /// Assembles and validates a report; overall AUROCs are the
    /// unweighted means over categories.
    pub fn from_categories(
        categories: Vec<CategoryEval>,
        baselines: Vec<BaselineScores>,
    ) -> Result<Self> {
        if categories.is_empty() {
            return Err(Error::EmptyInput("EvalReport: no categories"));
        }
        let n = categories.len() as f64;
        let report = EvalReport {
            image_auroc: categories.iter().map(|c| c.image_auroc).sum::<f64>() / n,
            pixel_auroc: categories.iter().map(|c| c.pixel_auroc).sum::<f64>() / n,
            categories,
            baselines,
            id_estimator: ID_ESTIMATOR.into(),
            notes: vec![
                "intrinsic dimension uses the parameter-free TwoNN ratio estimator".into(),
                "results at this reduced scale gauge relative behavior only and are not \
                 comparable to published full-dataset numbers"
                    .into(),
            ],
        };
        report.validate()?;
        Ok(report)
    }

    /// Rejects AUROC values outside `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        check_unit_interval("image_auroc", self.image_auroc)?;
        check_unit_interval("pixel_auroc", self.pixel_auroc)?;
        for c in &self.categories {
            check_unit_interval(&format!("{}: image_auroc", c.category), c.image_auroc)?;
            check_unit_interval(&format!("{}: pixel_auroc", c.category), c.pixel_auroc)?;
        }
        for b in &self.baselines {
            check_unit_interval(&format!("baseline {}: image_auroc", b.name), b.image_auroc)?;
            check_unit_interval(&format!("baseline {}: pixel_auroc", b.name), b.pixel_auroc)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let report: EvalReport = serde_json::from_str(s)
            .map_err(|e| Error::InvalidArgument(format!("malformed evaluation report: {e}")))?;
        report.validate()?;
        Ok(report)
    }

    /// Aligned-column text rendering for terminals.
    pub fn to_text(&self) -> String {
        let mut rows: Vec<[String; 5]> = vec![[
            "category".into(),
            "image_auroc".into(),
            "pixel_auroc".into(),
            "id_small".into(),
            "id_big".into(),
        ]];
        let id_cell = |c: &CategoryEval, key: &str| {
            c.intrinsic_dimension.get(key).map_or("-".into(), |v| format!("{v:.2}"))
        };
        for c in &self.categories {
            rows.push([
                c.category.clone(),
                format!("{:.4}", c.image_auroc),
                format!("{:.4}", c.pixel_auroc),
                id_cell(c, "small"),
                id_cell(c, "big"),
            ]);
        }
        rows.push([
            "overall".into(),
            format!("{:.4}", self.image_auroc),
            format!("{:.4}", self.pixel_auroc),
            "-".into(),
            "-".into(),
        ]);
        for b in &self.baselines {
            rows.push([
                format!("baseline:{}", b.name),
                format!("{:.4}", b.image_auroc),
                format!("{:.4}", b.pixel_auroc),
                "-".into(),
                "-".into(),
            ]);
        }

        let mut widths = [0usize; 5];
        for row in &rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = String::new();
        for row in &rows {
            let mut line = String::new();
            for (cell, w) in row.iter().zip(widths) {
                let _ = write!(line, "{cell:<w$}  ");
            }
            out.push_str(line.trim_end());
            out.push('\n');
        }
        for note in &self.notes {
            let _ = writeln!(out, "note: {note}");
        }
        out
    }

    /// CSV of per-image scores for one category, or `None` when the
    /// category is absent.
    pub fn category_csv(&self, category: &str) -> Option<String> {
        let c = self.categories.iter().find(|c| c.category == category)?;
        let mut out = String::from("image,label,score\n");
        for row in &c.image_scores {
            let label = match row.label {
                Label::Normal => "normal",
                Label::Abnormal => "abnormal",
            };
            let _ = writeln!(out, "{},{label},{}", row.image, row.score);
        }
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::data::{generate_synthetic, load_dataset, CategoryStyle, DefectType, SyntheticConfig};
    use crate::numerics::Tape;

    use super::*;

    // -- AUROC --------------------------------------------------------------

    /// Direct pair-counting definition, O(n^2).
    fn auroc_brute(normal: &[f64], abnormal: &[f64]) -> f64 {
        let mut sum = 0.0;
        for &x in normal {
            for &y in abnormal {
                sum += if y > x {
                    1.0
                } else if y == x {
                    0.5
                } else {
                    0.0
                };
            }
        }
        sum / (normal.len() * abnormal.len()) as f64
    }

    fn scores(normal: Vec<f64>, abnormal: Vec<f64>) -> LabeledScores {
        LabeledScores::new(normal, abnormal).unwrap()
    }

    #[test]
    fn auroc_documented_values() {
        assert_eq!(auroc(&scores(vec![1.0, 2.0], vec![3.0, 4.0])).unwrap(), 1.0);
        assert_eq!(auroc(&scores(vec![7.0; 5], vec![7.0; 3])).unwrap(), 0.5);
        // Brute force over the 4 pairs: 3 correctly ordered.
        assert_eq!(auroc(&scores(vec![0.1, 0.4], vec![0.3, 0.8])).unwrap(), 0.75);
    }

    #[test]
    fn auroc_matches_pair_counting_on_random_and_tie_heavy_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..60 {
            let n1 = rng.random_range(1..40);
            let n2 = rng.random_range(1..40);
            // Alternate continuous scores and heavily tied small ints.
            let draw = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
                (0..n)
                    .map(|_| {
                        if trial % 2 == 0 {
                            rng.random_range(-1.0..1.0)
                        } else {
                            rng.random_range(0..5) as f64
                        }
                    })
                    .collect()
            };
            let s = scores(draw(&mut rng, n1), draw(&mut rng, n2));
            let fast = auroc(&s).unwrap();
            let brute = auroc_brute(&s.normal, &s.abnormal);
            assert!((fast - brute).abs() < 1e-12, "fast {fast} vs brute {brute}");

            // Swapping the classes mirrors the statistic.
            let swapped = scores(s.abnormal.clone(), s.normal.clone());
            assert!((auroc(&swapped).unwrap() - (1.0 - fast)).abs() < 1e-12);

            // Rank statistic: any strictly increasing transform is a no-op.
            let squash = |v: &[f64]| v.iter().map(|x| (x * 0.7).exp() + x / 3.0).collect();
            let transformed = scores(squash(&s.normal), squash(&s.abnormal));
            assert!((auroc(&transformed).unwrap() - fast).abs() < 1e-12);
        }
    }

    #[test]
    fn auroc_rejects_empty_sides_and_non_finite_scores() {
        assert!(matches!(
            auroc(&LabeledScores { normal: vec![], abnormal: vec![1.0] }),
            Err(Error::EmptyInput(_))
        ));
        assert!(matches!(
            auroc(&LabeledScores { normal: vec![1.0], abnormal: vec![] }),
            Err(Error::EmptyInput(_))
        ));
        assert!(matches!(
            auroc(&LabeledScores { normal: vec![f64::NAN], abnormal: vec![1.0] }),
            Err(Error::NonFinite(_))
        ));
        assert!(LabeledScores::new(vec![f64::INFINITY], vec![]).is_err());
    }

    // -- pixel AUROC --------------------------------------------------------

    fn map4(values: [f32; 16]) -> AnomalyMap {
        AnomalyMap::new(MapScale::Multi, 4, 4, values.to_vec()).unwrap()
    }

    fn mask4(flags: [bool; 16]) -> Mask {
        Mask::new(4, 4, flags.to_vec()).unwrap()
    }

    #[test]
    fn pixel_auroc_handles_perfect_and_constant_maps() {
        let flags: [bool; 16] =
            core::array::from_fn(|i| [3usize, 7, 8, 12].contains(&i));
        let perfect: [f32; 16] = core::array::from_fn(|i| if flags[i] { 1.0 } else { 0.0 });
        assert_eq!(pixel_auroc(&[map4(perfect)], &[mask4(flags)]).unwrap(), 1.0);
        assert_eq!(pixel_auroc(&[map4([0.25; 16])], &[mask4(flags)]).unwrap(), 0.5);
    }

    #[test]
    fn pixel_auroc_pools_images_and_matches_pair_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let maps: Vec<AnomalyMap> = (0..2)
                .map(|_| map4(core::array::from_fn(|_| rng.random_range(0.0..2.0))))
                .collect();
            let masks: Vec<Mask> = (0..2)
                .map(|_| {
                    // At least one defective pixel per trial overall.
                    mask4(core::array::from_fn(|_| rng.random_range(0..4) == 0))
                })
                .collect();
            if masks.iter().all(|m| !m.any()) {
                continue;
            }
            let mut normal = Vec::new();
            let mut abnormal = Vec::new();
            for (map, mask) in maps.iter().zip(&masks) {
                for (&v, &d) in map.values().iter().zip(mask.flags()) {
                    if d {
                        abnormal.push(v as f64);
                    } else {
                        normal.push(v as f64);
                    }
                }
            }
            let pooled = pixel_auroc(&maps, &masks).unwrap();
            assert!((pooled - auroc_brute(&normal, &abnormal)).abs() < 1e-12);
            // Pooling is definitional: equals plain auroc on the
            // concatenated pixels.
            assert!(
                (pooled - auroc(&LabeledScores::new(normal, abnormal).unwrap()).unwrap()).abs()
                    < 1e-12
            );
        }
    }

    #[test]
    fn pixel_auroc_rejects_mismatches_and_single_class_pools() {
        let map = map4([0.1; 16]);
        let small_mask = Mask::new(2, 2, vec![false; 4]).unwrap();
        assert!(matches!(
            pixel_auroc(std::slice::from_ref(&map), &[small_mask]),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(pixel_auroc(std::slice::from_ref(&map), &[]), Err(Error::ShapeMismatch(_))));
        // All-normal pool has no abnormal side.
        assert!(matches!(
            pixel_auroc(&[map], &[mask4([false; 16])]),
            Err(Error::EmptyInput(_))
        ));
    }

    // -- intrinsic dimension ------------------------------------------------

    /// `count` orthonormal directions in `dim`-space via Gram-Schmidt
    /// on Gaussian draws.
    fn orthonormal(dim: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        let mut basis: Vec<Vec<f64>> = Vec::new();
        while basis.len() < count {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= dot * y;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                v.iter_mut().for_each(|x| *x /= norm);
                basis.push(v);
            }
        }
        basis
    }

    /// 500 points uniform over the unit `manifold_dim`-cube, embedded
    /// in 64-D by an orthonormal frame.
    fn embedded_cloud(manifold_dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frame = orthonormal(64, manifold_dim, &mut rng);
        (0..500)
            .map(|_| {
                let coords: Vec<f64> =
                    (0..manifold_dim).map(|_| rng.random_range(0.0..1.0)).collect();
                let mut p = vec![0.0; 64];
                for (c, axis) in coords.iter().zip(&frame) {
                    for (x, a) in p.iter_mut().zip(axis) {
                        *x += c * a;
                    }
                }
                p
            })
            .collect()
    }

    #[test]
    fn intrinsic_dimension_recovers_line_plane_and_cube() {
        let line = intrinsic_dimension(&embedded_cloud(1, 10)).unwrap();
        assert!((0.8..=1.2).contains(&line), "line ID {line}");
        let plane = intrinsic_dimension(&embedded_cloud(2, 11)).unwrap();
        assert!((1.7..=2.3).contains(&plane), "plane ID {plane}");
        let cube = intrinsic_dimension(&embedded_cloud(5, 12)).unwrap();
        assert!((4.0..=6.0).contains(&cube), "5-cube ID {cube}");
    }

    #[test]
    fn intrinsic_dimension_is_isometry_invariant_and_skips_duplicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cloud = embedded_cloud(2, 14);
        let id = intrinsic_dimension(&cloud).unwrap();

        // Random rotation plus translation.
        let rotation = orthonormal(64, 64, &mut rng);
        let shift: Vec<f64> = (0..64).map(|_| rng.random_range(-5.0..5.0)).collect();
        let moved: Vec<Vec<f64>> = cloud
            .iter()
            .map(|p| {
                rotation
                    .iter()
                    .zip(&shift)
                    .map(|(row, s)| row.iter().zip(p).map(|(r, x)| r * x).sum::<f64>() + s)
                    .collect()
            })
            .collect();
        let id_moved = intrinsic_dimension(&moved).unwrap();
        assert!((id - id_moved).abs() < 1e-6, "{id} vs {id_moved}");

        // Exact duplicates do not change the estimate.
        let mut with_dups = cloud.clone();
        with_dups.extend(cloud.iter().take(40).cloned());
        assert_eq!(intrinsic_dimension(&with_dups).unwrap(), id);
    }

    #[test]
    fn intrinsic_dimension_requires_ten_distinct_points() {
        let mut points: Vec<Vec<f64>> = (0..9).map(|i| vec![i as f64, 0.0, 1.0]).collect();
        // Duplicates do not help reach the minimum.
        points.extend(points.clone());
        assert!(matches!(intrinsic_dimension(&points), Err(Error::InvalidArgument(_))));
        points.push(vec![100.0, 0.0, 1.0]);
        assert!(intrinsic_dimension(&points).is_ok());
        assert!(intrinsic_dimension(&[]).is_err());
    }

    // -- Spearman -----------------------------------------------------------

    #[test]
    fn spearman_known_values() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[30.0, 20.0, 10.0]).unwrap() + 1.0).abs() < 1e-12);
        // Midranks by hand: a -> [1.5, 1.5, 3], b -> [1, 2, 3];
        // Pearson of those ranks is 1.5 / sqrt(3).
        let r = spearman(&[1.0, 1.0, 2.0], &[5.0, 7.0, 9.0]).unwrap();
        assert!((r - 1.5 / 3.0f64.sqrt()).abs() < 1e-12);
        assert!(spearman(&[1.0, 1.0], &[2.0, 3.0]).is_err());
        assert!(spearman(&[1.0], &[2.0]).is_err());
        assert!(spearman(&[1.0, 2.0], &[2.0, 3.0, 4.0]).is_err());
    }

    #[test]
    fn one_random_conv_layer_preserves_patch_distance_ranks() {
        // A single random convolution without downsampling keeps
        // feature distances rank-aligned with pixel distances over
        // graded patch pairs.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut tape = Tape::<f32>::new();
        let std = (2.0 / 75.0f64).sqrt() as f32;
        let kernel_data: Vec<f32> =
            (0..5 * 5 * 3 * 16).map(|_| rng.random_range(-2.0..2.0) * std).collect();
        let kernel =
            tape.leaf(Tensor::from_vec(&[5, 5, 3, 16], kernel_data).unwrap(), false);
        let bias = tape.leaf(Tensor::zeros(&[16]), false);

        let mut pixel_d = Vec::new();
        let mut feature_d = Vec::new();
        for pair in 0..200 {
            let base: Vec<f32> = (0..20 * 20 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
            // Graded perturbation strength spreads the distances.
            let alpha = 0.01 + 0.6 * (pair as f32 / 199.0);
            let other: Vec<f32> = base
                .iter()
                .map(|v| (v + rng.random_range(-alpha..alpha)).clamp(0.0, 1.0))
                .collect();
            pixel_d.push(
                base.iter()
                    .zip(&other)
                    .map(|(a, b)| ((a - b) as f64).powi(2))
                    .sum::<f64>()
                    .sqrt(),
            );

            let mut encode = |data: &[f32]| -> Vec<f32> {
                let x = tape.leaf(
                    Tensor::from_vec(&[20, 20, 3], data.to_vec()).unwrap(),
                    false,
                );
                let h = tape.conv2d(x, kernel, bias, 1).unwrap();
                tape.value(h).data().to_vec()
            };
            let (ha, hb) = (encode(&base), encode(&other));
            feature_d.push(
                ha.iter().zip(&hb).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>().sqrt(),
            );
        }
        let rho = spearman(&pixel_d, &feature_d).unwrap();
        assert!(rho >= 0.8, "distance rank correlation {rho}");
    }

    // -- baselines ----------------------------------------------------------

    fn tiny_dataset(style: CategoryStyle, seed: u64) -> (tempfile::TempDir, crate::data::Dataset) {
        let dir = tempfile::tempdir().unwrap();
        let config = SyntheticConfig {
            category: "cat".into(),
            style,
            train_count: 2,
            test_good_count: 1,
            test_defect_count: 1,
            defect_types: vec![DefectType::Blob],
            defect_size: (16, 24),
            seed,
        };
        generate_synthetic(dir.path(), &config).unwrap();
        let ds = load_dataset(dir.path(), "cat").unwrap();
        (dir, ds)
    }

    #[test]
    fn raw_patch_scores_compose_exact_nn_with_identity_features() {
        let (_dir, ds) = tiny_dataset(CategoryStyle::Checker, 31);
        let (k, stride) = (32, 32);
        let index = raw_patch_index(&ds.train, k, stride).unwrap();

        // A training image scores exactly zero everywhere.
        let map = raw_patch_map(&index, &ds.train[0].pixels, k, stride).unwrap();
        assert_eq!(image_score(&map), 0.0);

        // Per-cell scores equal a hand-rolled exact NN on flattened
        // patches.
        let test_image = &ds.test.last().unwrap().pixels;
        let (grid, scored) = raw_patch_scores(&index, test_image, k, stride).unwrap();
        for (i, (row, col)) in grid.coords().enumerate().step_by(7) {
            let feat = flatten_patch(&extract_patch(test_image, row, col, k).unwrap()).unwrap();
            assert_eq!(scored[i], index.nn_exact(&feat).unwrap().distance as f32);
        }
    }

    #[test]
    fn raw_patch_baseline_scores_synthetic_defects() {
        let (_dir, ds) = tiny_dataset(CategoryStyle::Stripes, 32);
        let b = baseline_raw_patch(&ds.train, &ds.test, 32, 32).unwrap();
        assert_eq!(b.name, "raw-patch");
        assert!((0.0..=1.0).contains(&b.image_auroc));
        assert!((0.0..=1.0).contains(&b.pixel_auroc));
    }

    #[test]
    fn random_encoder_baseline_is_seed_deterministic() {
        let (_dir, ds) = tiny_dataset(CategoryStyle::Checker, 33);
        let a = baseline_random_encoder(&ds.train, &ds.test, 7).unwrap();
        let b = baseline_random_encoder(&ds.train, &ds.test, 7).unwrap();
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a.image_auroc));
        assert!((0.0..=1.0).contains(&a.pixel_auroc));
    }

    // -- reports ------------------------------------------------------------

    fn sample_report() -> EvalReport {
        let cat = |name: &str, img: f64, px: f64| CategoryEval {
            category: name.into(),
            image_auroc: img,
            pixel_auroc: px,
            intrinsic_dimension: BTreeMap::from([("small".into(), 1.9), ("big".into(), 3.2)]),
            image_scores: vec![
                ImageScoreRow { image: "test/good/000.png".into(), label: Label::Normal, score: 0.2 },
                ImageScoreRow {
                    image: "test/blob/000.png".into(),
                    label: Label::Abnormal,
                    score: 0.9,
                },
            ],
        };
        EvalReport::from_categories(
            vec![cat("alpha", 0.9, 0.8), cat("beta", 0.7, 0.6)],
            vec![BaselineScores { name: "raw-patch".into(), image_auroc: 0.55, pixel_auroc: 0.5 }],
        )
        .unwrap()
    }

    #[test]
    fn report_aggregates_and_roundtrips_through_json() {
        let report = sample_report();
        assert!((report.image_auroc - 0.8).abs() < 1e-12);
        assert!((report.pixel_auroc - 0.7).abs() < 1e-12);
        assert_eq!(report.id_estimator, "two-nn");
        let parsed = EvalReport::from_json(&report.to_json()).unwrap();
        assert_eq!(parsed, report);

        // Out-of-range AUROC is rejected at both build and parse time.
        let mut bad = report.clone();
        bad.categories[0].image_auroc = 1.5;
        assert!(bad.validate().is_err());
        assert!(EvalReport::from_json(&bad.to_json()).is_err());
    }

    #[test]
    fn report_text_and_csv_render_rows() {
        let report = sample_report();
        let text = report.to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("category"));
        assert!(lines.iter().any(|l| l.starts_with("alpha") && l.contains("0.9000")));
        assert!(lines.iter().any(|l| l.starts_with("overall")));
        assert!(lines.iter().any(|l| l.starts_with("baseline:raw-patch")));
        // Columns align: every data row matches the header's column starts.
        let col = lines[0].find("image_auroc").unwrap();
        assert_eq!(&lines[1][col..col + 2], "0.");

        let csv = report.category_csv("alpha").unwrap();
        assert_eq!(csv.lines().next().unwrap(), "image,label,score");
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.contains("test/blob/000.png,abnormal,0.9"));
        assert!(report.category_csv("missing").is_none());
    }
}
