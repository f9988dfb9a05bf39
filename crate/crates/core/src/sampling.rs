//! Patch grids and the stochastic samplers used during training.
//!
//! Coordinates are always `(row, col)` of a patch's top-left pixel.
//! Samplers draw from a caller-supplied RNG and touch nothing else, so
//! a fixed seed reproduces the exact sample sequence.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Default per-channel intensity perturbation amplitude.
pub const RGB_PERTURBATION: f32 = 0.1;

/// A regular lattice of patch positions over one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    /// Patch edge length.
    pub k: usize,
    /// Nominal stride between lattice positions.
    pub stride: usize,
    rows: Vec<usize>,
    cols: Vec<usize>,
}

impl PatchGrid {
    /// The strict lattice `{(i*stride, j*stride)}` of every patch that
    /// fits inside an `h x w` image, so
    /// `floor((h-k)/stride)+1` positions per axis.
    pub fn regular(h: usize, w: usize, k: usize, stride: usize) -> Result<Self> {
        Self::check(h, w, k, stride)?;
        Ok(PatchGrid { k, stride, rows: axis_positions(h, k, stride, false), cols: axis_positions(w, k, stride, false) })
    }

    /// The strict lattice plus, when the stride does not tile the
    /// image exactly, one final position flush against each edge, so
    /// the union of patches covers every pixel.
    pub fn covering(h: usize, w: usize, k: usize, stride: usize) -> Result<Self> {
        Self::check(h, w, k, stride)?;
        Ok(PatchGrid { k, stride, rows: axis_positions(h, k, stride, true), cols: axis_positions(w, k, stride, true) })
    }

    fn check(h: usize, w: usize, k: usize, stride: usize) -> Result<()> {
        if k == 0 || stride == 0 {
            return Err(Error::InvalidArgument(format!(
                "patch size and stride must be positive (k={k}, stride={stride})"
            )));
        }
        if k > h || k > w {
            return Err(Error::InvalidArgument(format!(
                "patch size {k} exceeds image extent {h}x{w}"
            )));
        }
        Ok(())
    }

    /// Distinct row starts, ascending.
    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    /// Distinct column starts, ascending.
    pub fn cols(&self) -> &[usize] {
        &self.cols
    }

    /// Number of patch positions.
    pub fn len(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    /// True when the grid is degenerate (cannot happen for valid input).
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All positions, row-major.
    pub fn coords(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.rows.iter().flat_map(move |&r| self.cols.iter().map(move |&c| (r, c)))
    }
}

fn axis_positions(extent: usize, k: usize, stride: usize, covering: bool) -> Vec<usize> {
    let count = (extent - k) / stride + 1;
    let mut out: Vec<usize> = (0..count).map(|i| i * stride).collect();
    if covering && !(extent - k).is_multiple_of(stride) {
        out.push(extent - k);
    }
    out
}

/// Copies the `k x k` patch with top-left pixel `(row, col)` out of an
/// `[H, W, C]` image.
pub fn extract_patch(image: &Tensor<f32>, row: usize, col: usize, k: usize) -> Result<Tensor<f32>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch(format!("expected [H, W, C] image, got {:?}", s)));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    if row + k > h || col + k > w {
        return Err(Error::InvalidArgument(format!(
            "patch ({row}, {col}) size {k} leaves the {h}x{w} image"
        )));
    }
    let mut out = Tensor::zeros(&[k, k, c]);
    for y in 0..k {
        let src = image.offset3(row + y, col, 0);
        let dst = out.offset3(y, 0, 0);
        out.data_mut()[dst..dst + k * c].copy_from_slice(&image.data()[src..src + k * c]);
    }
    Ok(out)
}

/// Draws one uniformly placed `k x k` patch and returns it with its
/// top-left coordinate.
pub fn sample_patch(
    image: &Tensor<f32>,
    k: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor<f32>, (usize, usize))> {
    let s = image.shape();
    let (h, w) = (s[0], s[1]);
    if k > h || k > w {
        return Err(Error::InvalidArgument(format!(
            "patch size {k} exceeds image extent {h}x{w}"
        )));
    }
    let row = rng.random_range(0..=(h - k));
    let col = rng.random_range(0..=(w - k));
    Ok((extract_patch(image, row, col, k)?, (row, col)))
}

/// A patch and a spatially close companion for the contraction loss.
#[derive(Debug, Clone)]
pub struct JitterPair {
    pub anchor: Tensor<f32>,
    pub companion: Tensor<f32>,
    pub anchor_pos: (usize, usize),
    pub companion_pos: (usize, usize),
}

/// Draws a uniformly placed `k x k` patch and a companion displaced by
/// at most `k/8` pixels per axis (clamped to the image).
pub fn sample_jitter_pair(
    image: &Tensor<f32>,
    k: usize,
    rng: &mut impl Rng,
) -> Result<JitterPair> {
    let s = image.shape();
    let (h, w) = (s[0], s[1]);
    if k > h || k > w {
        return Err(Error::InvalidArgument(format!(
            "patch size {k} exceeds image extent {h}x{w}"
        )));
    }
    let j = (k / 8) as i64;
    let row = rng.random_range(0..=(h - k)) as i64;
    let col = rng.random_range(0..=(w - k)) as i64;
    let dr = rng.random_range(-j..=j);
    let dc = rng.random_range(-j..=j);
    let row2 = (row + dr).clamp(0, (h - k) as i64) as usize;
    let col2 = (col + dc).clamp(0, (w - k) as i64) as usize;
    Ok(JitterPair {
        anchor: extract_patch(image, row as usize, col as usize, k)?,
        companion: extract_patch(image, row2, col2, k)?,
        anchor_pos: (row as usize, col as usize),
        companion_pos: (row2, col2),
    })
}

/// Maps a position class to its neighbor cell offset `(d_row, d_col)`
/// in units of the patch size: the 3x3 neighborhood scanned row-major
/// with the center skipped, so 0 is up-left, 1 is up, 2 is up-right,
/// 3 is left, 4 is right, 5 is down-left, 6 is down, 7 is down-right.
pub fn neighbor_offset(label: usize) -> (i64, i64) {
    const OFFSETS: [(i64, i64); 8] =
        [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];
    OFFSETS[label]
}

/// An ordered patch pair with the relative-position class of the
/// second patch with respect to the first.
#[derive(Debug, Clone)]
pub struct PositionPair {
    pub anchor: Tensor<f32>,
    pub neighbor: Tensor<f32>,
    /// Class in `0..8`, see [`neighbor_offset`].
    pub label: usize,
    pub anchor_pos: (usize, usize),
    pub neighbor_pos: (usize, usize),
}

/// Draws an anchor patch that admits all eight neighbors, a uniform
/// position class, and the neighbor patch one patch-length away in
/// that direction (offset by up to `k/8` pixels per axis when `jitter`
/// is set). Both patches always lie fully inside the image.
pub fn sample_position_pair(
    image: &Tensor<f32>,
    k: usize,
    jitter: bool,
    rng: &mut impl Rng,
) -> Result<PositionPair> {
    let s = image.shape();
    let (h, w) = (s[0], s[1]);
    let j = if jitter { (k / 8) as i64 } else { 0 };
    let margin = k as i64 + j;
    // The anchor must keep a full patch plus jitter on every side.
    let (row_lo, row_hi) = (margin, h as i64 - k as i64 - margin);
    let (col_lo, col_hi) = (margin, w as i64 - k as i64 - margin);
    if row_lo > row_hi || col_lo > col_hi {
        return Err(Error::InvalidArgument(format!(
            "image {h}x{w} cannot host a full 3x3 neighborhood of {k}px patches"
        )));
    }
    let row = rng.random_range(row_lo..=row_hi);
    let col = rng.random_range(col_lo..=col_hi);
    let label = rng.random_range(0..8usize);
    let (dr, dc) = neighbor_offset(label);
    let (jr, jc) = if jitter {
        (rng.random_range(-j..=j), rng.random_range(-j..=j))
    } else {
        (0, 0)
    };
    let nrow = row + dr * k as i64 + jr;
    let ncol = col + dc * k as i64 + jc;
    debug_assert!(nrow >= 0 && ncol >= 0);
    Ok(PositionPair {
        anchor: extract_patch(image, row as usize, col as usize, k)?,
        neighbor: extract_patch(image, nrow as usize, ncol as usize, k)?,
        label,
        anchor_pos: (row as usize, col as usize),
        neighbor_pos: (nrow as usize, ncol as usize),
    })
}

/// Returns a copy of `patch` with each channel shifted by an
/// independent uniform draw from `[-amplitude, amplitude]`, clamped to
/// `[0, 1]`. The input is left untouched.
pub fn perturb_rgb(patch: &Tensor<f32>, amplitude: f32, rng: &mut impl Rng) -> Tensor<f32> {
    let channels = *patch.shape().last().expect("rank >= 1");
    let shifts: Vec<f32> = (0..channels).map(|_| rng.random_range(-amplitude..=amplitude)).collect();
    let mut out = patch.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = (*v + shifts[i % channels]).clamp(0.0, 1.0);
    }
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn gradient_image(h: usize, w: usize) -> Tensor<f32> {
        let data = (0..h * w * 3)
            .map(|i| (i % 251) as f32 / 250.0)
            .collect();
        Tensor::from_vec(&[h, w, 3], data).unwrap()
    }

    #[test]
    fn default_grids_have_documented_counts() {
        let big = PatchGrid::regular(256, 256, 64, 16).unwrap();
        assert_eq!((big.rows().len(), big.cols().len()), (13, 13));
        assert_eq!(big.len(), 169);

        let small = PatchGrid::regular(256, 256, 32, 4).unwrap();
        assert_eq!(small.len(), 3249);

        // Both default grids tile 256px exactly, so covering adds nothing.
        assert_eq!(PatchGrid::covering(256, 256, 64, 16).unwrap().len(), 169);
        assert_eq!(PatchGrid::covering(256, 256, 32, 4).unwrap().len(), 3249);
    }

    #[test]
    fn covering_grid_reaches_both_edges() {
        let g = PatchGrid::covering(70, 50, 32, 16).unwrap();
        assert_eq!(g.rows(), &[0, 16, 32, 38]);
        assert_eq!(g.cols(), &[0, 16, 18]);
        // Every pixel on each axis is inside at least one patch.
        for axis in [g.rows(), g.cols()] {
            let extent = axis.last().unwrap() + 32;
            for p in 0..extent {
                assert!(axis.iter().any(|&start| start <= p && p < start + 32), "pixel {p}");
            }
        }
    }

    #[test]
    fn grid_rejects_oversized_patch_and_zero_stride() {
        assert!(PatchGrid::regular(30, 100, 32, 4).is_err());
        assert!(PatchGrid::regular(100, 30, 32, 4).is_err());
        assert!(PatchGrid::regular(100, 100, 32, 0).is_err());
        assert!(PatchGrid::regular(100, 100, 0, 4).is_err());
    }

    proptest! {
        #[test]
        fn grid_count_matches_closed_form(h in 32usize..300, w in 32usize..300,
                                          k in 1usize..32, s in 1usize..40) {
            let g = PatchGrid::regular(h, w, k, s).unwrap();
            prop_assert_eq!(g.rows().len(), (h - k) / s + 1);
            prop_assert_eq!(g.cols().len(), (w - k) / s + 1);

            let mut seen = std::collections::HashSet::new();
            let mut last = None;
            for (r, c) in g.coords() {
                prop_assert!(r + k <= h && c + k <= w);
                prop_assert!(seen.insert((r, c)), "duplicate coordinate");
                if let Some(prev) = last {
                    prop_assert!((r, c) > prev, "not row-major sorted");
                }
                last = Some((r, c));
            }
        }
    }

    #[test]
    fn patch_extraction_copies_expected_pixels() {
        let img = gradient_image(16, 12);
        let p = extract_patch(&img, 3, 5, 4).unwrap();
        assert_eq!(p.shape(), &[4, 4, 3]);
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..3 {
                    assert_eq!(p.at3(y, x, c), img.at3(3 + y, 5 + x, c));
                }
            }
        }
        assert!(extract_patch(&img, 14, 0, 4).is_err());
    }

    #[test]
    fn jitter_pairs_stay_close_and_inside() {
        let img = gradient_image(100, 80);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            let pair = sample_jitter_pair(&img, 32, &mut rng).unwrap();
            let (r1, c1) = pair.anchor_pos;
            let (r2, c2) = pair.companion_pos;
            assert!(r1 + 32 <= 100 && c1 + 32 <= 80);
            assert!(r2 + 32 <= 100 && c2 + 32 <= 80);
            assert!((r1 as i64 - r2 as i64).abs() <= 4);
            assert!((c1 as i64 - c2 as i64).abs() <= 4);
        }
    }

    #[test]
    fn position_pairs_stay_inside_and_match_their_label() {
        let img = gradient_image(256, 256);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for &k in &[32usize, 64] {
            let j = (k / 8) as i64;
            for _ in 0..5_000 {
                let pair = sample_position_pair(&img, k, true, &mut rng).unwrap();
                let (r1, c1) = (pair.anchor_pos.0 as i64, pair.anchor_pos.1 as i64);
                let (r2, c2) = (pair.neighbor_pos.0 as i64, pair.neighbor_pos.1 as i64);
                assert!(r2 + k as i64 <= 256 && c2 + k as i64 <= 256);
                let (dr, dc) = neighbor_offset(pair.label);
                assert!((r2 - (r1 + dr * k as i64)).abs() <= j);
                assert!((c2 - (c1 + dc * k as i64)).abs() <= j);
            }
        }
    }

    #[test]
    fn zero_jitter_position_offset_is_a_bijection_of_the_label() {
        let img = gradient_image(256, 256);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..2_000 {
            let pair = sample_position_pair(&img, 64, false, &mut rng).unwrap();
            let dr = pair.neighbor_pos.0 as i64 - pair.anchor_pos.0 as i64;
            let dc = pair.neighbor_pos.1 as i64 - pair.anchor_pos.1 as i64;
            let recovered = (0..8)
                .find(|&y| {
                    let (er, ec) = neighbor_offset(y);
                    er * 64 == dr && ec * 64 == dc
                })
                .expect("offset must match exactly one label");
            assert_eq!(recovered, pair.label);
        }
    }

    #[test]
    fn position_labels_are_uniform_within_binomial_noise() {
        let img = gradient_image(256, 256);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 80_000usize;
        let mut counts = [0usize; 8];
        for _ in 0..n {
            counts[sample_position_pair(&img, 32, true, &mut rng).unwrap().label] += 1;
        }
        let expect = n as f64 / 8.0;
        let sigma = (n as f64 * (1.0 / 8.0) * (7.0 / 8.0)).sqrt();
        for (y, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - expect).abs() <= 3.0 * sigma,
                "label {y}: {c} vs {expect:.0} +- {:.0}",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn small_image_without_full_neighborhood_is_rejected() {
        let img = gradient_image(100, 100); // needs 3*32 + 2*4 = 104
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert!(sample_position_pair(&img, 32, true, &mut rng).is_err());
    }

    #[test]
    fn samplers_are_deterministic_for_a_fixed_seed() {
        let img = gradient_image(128, 128);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mut log = Vec::new();
            for _ in 0..50 {
                let a = sample_jitter_pair(&img, 32, &mut rng).unwrap();
                let b = sample_position_pair(&img, 32, true, &mut rng).unwrap();
                log.push((a.anchor_pos, a.companion_pos, b.anchor_pos, b.neighbor_pos, b.label));
            }
            log
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rgb_perturbation_shifts_channels_uniformly_and_clamps() {
        let img = gradient_image(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let out = perturb_rgb(&img, RGB_PERTURBATION, &mut rng);
            assert_eq!(out.shape(), img.shape());
            let mut shift = [None::<f32>; 3];
            for (i, (&o, &x)) in out.data().iter().zip(img.data()).enumerate() {
                assert!((0.0..=1.0).contains(&o));
                let d = o - x;
                assert!(d.abs() <= RGB_PERTURBATION + 1e-6);
                // Unclamped pixels of one channel all move by the same shift.
                if o > 0.0 && o < 1.0 {
                    let c = i % 3;
                    match shift[c] {
                        None => shift[c] = Some(d),
                        Some(s) => assert!((d - s).abs() < 1e-6),
                    }
                }
            }
        }
        // Input untouched.
        let before = img.clone();
        let _ = perturb_rgb(&img, 0.1, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(img, before);
    }
}
