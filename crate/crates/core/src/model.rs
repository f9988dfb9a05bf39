//! Patch encoders and the relative-position classifier.
//!
//! Two feature extractors share one convolutional trunk:
//!
//! * `f_small` maps a 32x32x3 patch to a D-dimensional feature through
//!   four valid-padding convolutions (5x5/2, 5x5/2, 3x3/1, 3x3/1 with
//!   channel widths 32, 64, 128, D and LeakyReLU(0.1) between layers).
//! * The big-scale encoder maps a 64x64x3 patch by running `f_small`
//!   on its four 32x32 quadrants and fusing the four features with a
//!   small MLP (`g_big`). Its receptive field is therefore exactly
//!   twice the small one.
//!
//! The position classifier scores the difference of two features with
//! a two-layer MLP into 8 logits, one per neighbor direction.
//!
//! Whole images are encoded by running the trunk convolutionally: the
//! layer strides multiply to 4, so one pass over a 256x256 image yields
//! the full stride-4 grid of small-scale features, from which the
//! stride-16 grid of big-scale features is assembled.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::container::{load_params, save_params};
use crate::numerics::tape::{NodeId, Tape};
use crate::numerics::tensor::{Scalar, Tensor};
use crate::numerics::Parameter;

/// Negative slope of every LeakyReLU in the model.
pub const LEAKY_ALPHA: f64 = 0.1;
/// Patch edge consumed by the small-scale encoder.
pub const RF_SMALL: usize = 32;
/// Patch edge consumed by the big-scale encoder.
pub const RF_BIG: usize = 64;
/// Number of relative-position classes (the 8 neighbors).
pub const POSITION_CLASSES: usize = 8;
/// Hidden width of `g_big` and of the position classifier.
pub const HIDDEN_WIDTH: usize = 128;
/// Pixel stride of the small-scale feature grid produced by one
/// convolutional pass (product of the trunk strides 2*2*1*1).
pub const SMALL_GRID_STRIDE: usize = 4;
/// Pixel stride of the big-scale feature grid.
pub const BIG_GRID_STRIDE: usize = 16;

/// File name of the parameter container inside a model directory.
pub const MODEL_PARAMS_FILE: &str = "model.psvd";
/// File name of the model manifest inside a model directory.
pub const MODEL_MANIFEST_FILE: &str = "model.json";

/// Identifies one of the two patch scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// 32x32 patches, feature grid stride 4.
    Small,
    /// 64x64 patches, feature grid stride 16.
    Big,
}

impl Scale {
    /// Patch edge length in pixels.
    pub fn patch_size(self) -> usize {
        match self {
            Scale::Small => RF_SMALL,
            Scale::Big => RF_BIG,
        }
    }

    /// Default grid stride used for indexing and inference.
    pub fn default_stride(self) -> usize {
        match self {
            Scale::Small => SMALL_GRID_STRIDE,
            Scale::Big => BIG_GRID_STRIDE,
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Feature dimensionality D shared by both scales.
    pub embed_dim: usize,
    /// Channel widths of the first three trunk convolutions; the
    /// fourth always emits `embed_dim` channels.
    pub widths: [usize; 3],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { embed_dim: 64, widths: [32, 64, 128] }
    }
}

impl EncoderConfig {
    /// Checks the configuration is usable.
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::InvalidArgument("embed_dim must be positive".into()));
        }
        if self.widths.contains(&0) {
            return Err(Error::InvalidArgument("channel widths must be positive".into()));
        }
        Ok(())
    }
}

/// One trunk convolution: weight `[kh, kw, cin, cout]`, bias `[cout]`.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: Parameter,
    pub bias: Parameter,
    pub stride: usize,
}

/// One affine layer: weight `[n_in, n_out]`, bias `[n_out]`.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: Parameter,
    pub bias: Parameter,
}

/// The shared convolutional trunk over 32x32 patches.
#[derive(Debug, Clone)]
pub struct SmallEncoder {
    pub layers: Vec<ConvLayer>,
}

/// MLP fusing four quadrant features into one big-scale feature.
#[derive(Debug, Clone)]
pub struct BigAggregator {
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
}

/// Two-layer MLP over a feature difference, emitting 8 logits.
#[derive(Debug, Clone)]
pub struct PositionClassifier {
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
}

/// Both patch scales over one trunk.
#[derive(Debug, Clone)]
pub struct HierarchicalEncoder {
    pub config: EncoderConfig,
    pub f_small: SmallEncoder,
    pub g_big: BigAggregator,
}

/// Encoders plus the per-scale position classifiers used in training.
#[derive(Debug, Clone)]
pub struct PatchModel {
    pub encoder: HierarchicalEncoder,
    pub head_small: PositionClassifier,
    pub head_big: PositionClassifier,
}

/// Sidecar manifest saved next to the parameter container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    /// Bumped whenever the layer layout changes incompatibly.
    pub architecture_version: u32,
    pub embed_dim: usize,
    pub widths: [usize; 3],
    pub receptive_field_small: usize,
    pub receptive_field_big: usize,
    /// Seed the weights were initialized from.
    pub init_seed: u64,
}

/// Current architecture version written to manifests.
pub const ARCHITECTURE_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Initialization

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    // He-style scaling: variance 2 / fan_in.
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    let data = (0..shape.iter().product())
        .map(|_| dist.sample(rng) as f32)
        .collect();
    Tensor::from_vec(shape, data).expect("init shape")
}

impl ConvLayer {
    fn init(
        name: &str,
        kh: usize,
        kw: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = Parameter::new(
            format!("{name}.weight"),
            he_normal(&[kh, kw, cin, cout], kh * kw * cin, rng),
        );
        let bias = Parameter::new(format!("{name}.bias"), Tensor::zeros(&[cout]));
        ConvLayer { weight, bias, stride }
    }
}

impl LinearLayer {
    fn init(name: &str, n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight =
            Parameter::new(format!("{name}.weight"), he_normal(&[n_in, n_out], n_in, rng));
        let bias = Parameter::new(format!("{name}.bias"), Tensor::zeros(&[n_out]));
        LinearLayer { weight, bias }
    }
}

impl PatchModel {
    /// Initializes all weights from `seed` with He-style scaled
    /// normals (biases zero). The same seed always produces bitwise
    /// identical weights.
    pub fn init_random(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let [c1, c2, c3] = config.widths;

        let f_small = SmallEncoder {
            layers: vec![
                ConvLayer::init("f_small.conv1", 5, 5, 3, c1, 2, &mut rng),
                ConvLayer::init("f_small.conv2", 5, 5, c1, c2, 2, &mut rng),
                ConvLayer::init("f_small.conv3", 3, 3, c2, c3, 1, &mut rng),
                ConvLayer::init("f_small.conv4", 3, 3, c3, d, 1, &mut rng),
            ],
        };
        let g_big = BigAggregator {
            fc1: LinearLayer::init("g_big.fc1", 4 * d, HIDDEN_WIDTH, &mut rng),
            fc2: LinearLayer::init("g_big.fc2", HIDDEN_WIDTH, d, &mut rng),
        };
        let head_small = PositionClassifier {
            fc1: LinearLayer::init("head_small.fc1", d, HIDDEN_WIDTH, &mut rng),
            fc2: LinearLayer::init("head_small.fc2", HIDDEN_WIDTH, POSITION_CLASSES, &mut rng),
        };
        let head_big = PositionClassifier {
            fc1: LinearLayer::init("head_big.fc1", d, HIDDEN_WIDTH, &mut rng),
            fc2: LinearLayer::init("head_big.fc2", HIDDEN_WIDTH, POSITION_CLASSES, &mut rng),
        };
        Ok(PatchModel {
            encoder: HierarchicalEncoder { config: config.clone(), f_small, g_big },
            head_small,
            head_big,
        })
    }
}

// ---------------------------------------------------------------------------
// Tape binding and forward passes

/// Tape nodes of one bound convolution layer.
#[derive(Debug, Clone, Copy)]
pub struct BoundConv {
    pub weight: NodeId,
    pub bias: NodeId,
}

/// Tape nodes of the bound trunk.
#[derive(Debug, Clone)]
pub struct BoundSmall {
    pub layers: Vec<BoundConv>,
}

/// Tape nodes of one bound affine layer.
#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub weight: NodeId,
    pub bias: NodeId,
}

/// Tape nodes of the bound `g_big` MLP.
#[derive(Debug, Clone, Copy)]
pub struct BoundBig {
    pub fc1: BoundLinear,
    pub fc2: BoundLinear,
}

/// Tape nodes of a bound position classifier.
#[derive(Debug, Clone, Copy)]
pub struct BoundClassifier {
    pub fc1: BoundLinear,
    pub fc2: BoundLinear,
}

fn bind_param<E: Scalar>(tape: &mut Tape<E>, p: &Parameter, trainable: bool) -> NodeId {
    tape.leaf(p.value.cast::<E>(), trainable)
}

fn harvest<E: Scalar>(tape: &Tape<E>, node: NodeId, p: &mut Parameter) {
    if let Some(g) = tape.grad(node) {
        p.accumulate(&g.cast::<f32>());
    }
}

impl SmallEncoder {
    /// Inserts the trunk parameters into `tape` as leaves.
    pub fn bind<E: Scalar>(&self, tape: &mut Tape<E>, trainable: bool) -> BoundSmall {
        BoundSmall {
            layers: self
                .layers
                .iter()
                .map(|l| BoundConv {
                    weight: bind_param(tape, &l.weight, trainable),
                    bias: bind_param(tape, &l.bias, trainable),
                })
                .collect(),
        }
    }

    /// Runs the trunk on an `[H, W, 3]` node, returning the feature
    /// grid node `[oh, ow, D]`. For a 32x32 input this is `[1, 1, D]`.
    pub fn forward<E: Scalar>(
        &self,
        tape: &mut Tape<E>,
        bound: &BoundSmall,
        input: NodeId,
    ) -> Result<NodeId> {
        let mut h = input;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = tape.conv2d(h, bound.layers[i].weight, bound.layers[i].bias, layer.stride)?;
            if i != last {
                h = tape.leaky_relu(h, LEAKY_ALPHA);
            }
        }
        Ok(h)
    }

    /// Adds tape gradients into the trunk parameters.
    pub fn accumulate_grads<E: Scalar>(&mut self, tape: &Tape<E>, bound: &BoundSmall) {
        for (layer, b) in self.layers.iter_mut().zip(&bound.layers) {
            harvest(tape, b.weight, &mut layer.weight);
            harvest(tape, b.bias, &mut layer.bias);
        }
    }
}

impl BigAggregator {
    /// Inserts the aggregator parameters into `tape` as leaves.
    pub fn bind<E: Scalar>(&self, tape: &mut Tape<E>, trainable: bool) -> BoundBig {
        BoundBig {
            fc1: BoundLinear {
                weight: bind_param(tape, &self.fc1.weight, trainable),
                bias: bind_param(tape, &self.fc1.bias, trainable),
            },
            fc2: BoundLinear {
                weight: bind_param(tape, &self.fc2.weight, trainable),
                bias: bind_param(tape, &self.fc2.bias, trainable),
            },
        }
    }

    /// Fuses four quadrant feature nodes (top-left, top-right,
    /// bottom-left, bottom-right) into one big-scale feature node.
    pub fn forward<E: Scalar>(
        &self,
        tape: &mut Tape<E>,
        bound: &BoundBig,
        quadrants: &[NodeId; 4],
    ) -> Result<NodeId> {
        let cat = tape.concat(quadrants)?;
        let h = tape.linear(cat, bound.fc1.weight, bound.fc1.bias)?;
        let h = tape.leaky_relu(h, LEAKY_ALPHA);
        tape.linear(h, bound.fc2.weight, bound.fc2.bias)
    }

    /// Adds tape gradients into the aggregator parameters.
    pub fn accumulate_grads<E: Scalar>(&mut self, tape: &Tape<E>, bound: &BoundBig) {
        harvest(tape, bound.fc1.weight, &mut self.fc1.weight);
        harvest(tape, bound.fc1.bias, &mut self.fc1.bias);
        harvest(tape, bound.fc2.weight, &mut self.fc2.weight);
        harvest(tape, bound.fc2.bias, &mut self.fc2.bias);
    }
}

impl PositionClassifier {
    /// Inserts the classifier parameters into `tape` as leaves.
    pub fn bind<E: Scalar>(&self, tape: &mut Tape<E>, trainable: bool) -> BoundClassifier {
        BoundClassifier {
            fc1: BoundLinear {
                weight: bind_param(tape, &self.fc1.weight, trainable),
                bias: bind_param(tape, &self.fc1.bias, trainable),
            },
            fc2: BoundLinear {
                weight: bind_param(tape, &self.fc2.weight, trainable),
                bias: bind_param(tape, &self.fc2.bias, trainable),
            },
        }
    }

    /// Scores the ordered feature pair `(h1, h2)` by classifying the
    /// difference `h1 - h2`, returning the 8-logit node.
    pub fn forward<E: Scalar>(
        &self,
        tape: &mut Tape<E>,
        bound: &BoundClassifier,
        h1: NodeId,
        h2: NodeId,
    ) -> Result<NodeId> {
        let diff = tape.sub(h1, h2)?;
        let h = tape.linear(diff, bound.fc1.weight, bound.fc1.bias)?;
        let h = tape.leaky_relu(h, LEAKY_ALPHA);
        tape.linear(h, bound.fc2.weight, bound.fc2.bias)
    }

    /// Adds tape gradients into the classifier parameters.
    pub fn accumulate_grads<E: Scalar>(&mut self, tape: &Tape<E>, bound: &BoundClassifier) {
        harvest(tape, bound.fc1.weight, &mut self.fc1.weight);
        harvest(tape, bound.fc1.bias, &mut self.fc1.bias);
        harvest(tape, bound.fc2.weight, &mut self.fc2.weight);
        harvest(tape, bound.fc2.bias, &mut self.fc2.bias);
    }
}

// ---------------------------------------------------------------------------
// Convenience (no-gradient) encoding

/// Splits an even-sided `[2k, 2k, c]` patch into its four `[k, k, c]`
/// quadrants in the order top-left, top-right, bottom-left,
/// bottom-right.
pub fn split_quadrants(patch: &Tensor<f32>) -> Result<[Tensor<f32>; 4]> {
    let s = patch.shape();
    if s.len() != 3 || s[0] != s[1] || !s[0].is_multiple_of(2) {
        return Err(Error::ShapeMismatch(format!(
            "quadrant split needs a square even-sided [H, H, C] patch, got {:?}",
            s
        )));
    }
    let (k, c) = (s[0] / 2, s[2]);
    let mut out = Vec::with_capacity(4);
    for (oy, ox) in [(0, 0), (0, k), (k, 0), (k, k)] {
        let mut q = Tensor::zeros(&[k, k, c]);
        for y in 0..k {
            let src = patch.offset3(oy + y, ox, 0);
            let dst = q.offset3(y, 0, 0);
            q.data_mut()[dst..dst + k * c]
                .copy_from_slice(&patch.data()[src..src + k * c]);
        }
        out.push(q);
    }
    Ok(out.try_into().expect("four quadrants"))
}

/// A grid of features over one image at a fixed scale.
///
/// The feature of grid cell `(row, col)` describes the patch whose
/// top-left pixel is `(row * stride, col * stride)`.
#[derive(Debug, Clone)]
pub struct FeatureGrid {
    pub scale: Scale,
    /// Pixel stride between neighboring cells.
    pub stride: usize,
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    feats: Vec<f32>,
}

impl FeatureGrid {
    /// Feature vector of cell `(row, col)`.
    pub fn feature(&self, row: usize, col: usize) -> &[f32] {
        let i = (row * self.cols + col) * self.dim;
        &self.feats[i..i + self.dim]
    }

    /// All features, row-major by cell.
    pub fn all(&self) -> &[f32] {
        &self.feats
    }
}

impl HierarchicalEncoder {
    /// Encodes one 32x32x3 patch to a D-vector.
    pub fn encode_small(&self, patch: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.expect_patch(patch, RF_SMALL)?;
        let mut tape = Tape::<f32>::new();
        let bound = self.f_small.bind(&mut tape, false);
        let input = tape.leaf(patch.clone(), false);
        let grid = self.f_small.forward(&mut tape, &bound, input)?;
        let d = self.config.embed_dim;
        debug_assert_eq!(tape.value(grid).shape(), &[1, 1, d]);
        let feat = tape.reshape(grid, &[d])?;
        Ok(tape.value(feat).clone())
    }

    /// Encodes one 64x64x3 patch to a D-vector by fusing the four
    /// quadrant features. Bitwise identical to composing
    /// [`HierarchicalEncoder::encode_small`] with the aggregator.
    pub fn encode_big(&self, patch: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.expect_patch(patch, RF_BIG)?;
        let quadrants = split_quadrants(patch)?;
        let mut tape = Tape::<f32>::new();
        let bound_small = self.f_small.bind(&mut tape, false);
        let bound_big = self.g_big.bind(&mut tape, false);
        let d = self.config.embed_dim;
        let mut qn = [0usize; 4];
        for (slot, q) in qn.iter_mut().zip(quadrants) {
            let input = tape.leaf(q, false);
            let grid = self.f_small.forward(&mut tape, &bound_small, input)?;
            *slot = tape.reshape(grid, &[d])?;
        }
        let fused = self.g_big.forward(&mut tape, &bound_big, &qn)?;
        Ok(tape.value(fused).clone())
    }

    /// Encodes a whole `[H, W, 3]` image into the feature grid of the
    /// requested scale with its default stride (4 for small, 16 for
    /// big), using one convolutional pass of the trunk.
    pub fn encode_image(&self, image: &Tensor<f32>, scale: Scale) -> Result<FeatureGrid> {
        let s = image.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::ShapeMismatch(format!(
                "encode_image expects [H, W, 3], got {:?}",
                s
            )));
        }
        let (h, w) = (s[0], s[1]);
        if h < RF_BIG || w < RF_BIG {
            return Err(Error::ShapeMismatch(format!(
                "image {}x{} smaller than the {}px receptive field",
                h, w, RF_BIG
            )));
        }
        let d = self.config.embed_dim;

        // One convolutional pass gives features for every patch start
        // on the stride-4 lattice. The raw conv output can have a few
        // extra trailing cells (the trunk's effective receptive field
        // is slightly under 32), so trim to the patch-grid cell count.
        let small_rows = (h - RF_SMALL) / SMALL_GRID_STRIDE + 1;
        let small_cols = (w - RF_SMALL) / SMALL_GRID_STRIDE + 1;
        let mut tape = Tape::<f32>::new();
        let bound = self.f_small.bind(&mut tape, false);
        let input = tape.leaf(image.clone(), false);
        let grid_node = self.f_small.forward(&mut tape, &bound, input)?;
        let raw = tape.value(grid_node);
        let (raw_rows, raw_cols) = (raw.shape()[0], raw.shape()[1]);
        if raw_rows < small_rows || raw_cols < small_cols {
            return Err(Error::ShapeMismatch(format!(
                "convolutional pass produced {}x{} cells, expected at least {}x{}",
                raw_rows, raw_cols, small_rows, small_cols
            )));
        }
        let mut small = vec![0f32; small_rows * small_cols * d];
        for r in 0..small_rows {
            for c in 0..small_cols {
                let src = raw.offset3(r, c, 0);
                let dst = (r * small_cols + c) * d;
                small[dst..dst + d].copy_from_slice(&raw.data()[src..src + d]);
            }
        }
        let small_grid = FeatureGrid {
            scale: Scale::Small,
            stride: SMALL_GRID_STRIDE,
            rows: small_rows,
            cols: small_cols,
            dim: d,
            feats: small,
        };
        match scale {
            Scale::Small => Ok(small_grid),
            Scale::Big => self.big_grid_from_small(&small_grid, h, w),
        }
    }

    /// Builds the stride-16 big-scale grid by fusing quadrant features
    /// looked up in the stride-4 small grid.
    fn big_grid_from_small(
        &self,
        small: &FeatureGrid,
        h: usize,
        w: usize,
    ) -> Result<FeatureGrid> {
        let d = self.config.embed_dim;
        let rows = (h - RF_BIG) / BIG_GRID_STRIDE + 1;
        let cols = (w - RF_BIG) / BIG_GRID_STRIDE + 1;
        // A big patch at pixel (16r, 16c) has quadrant corners at
        // pixel offsets {0, 32}^2, i.e. small-grid cells 4r + {0, 8}.
        let cell = BIG_GRID_STRIDE / SMALL_GRID_STRIDE;
        let half = RF_SMALL / SMALL_GRID_STRIDE;

        let mut tape = Tape::<f32>::new();
        let bound_big = self.g_big.bind(&mut tape, false);
        let mut feats = vec![0f32; rows * cols * d];
        for r in 0..rows {
            for c in 0..cols {
                let (sr, sc) = (r * cell, c * cell);
                let mut qn = [0usize; 4];
                for (slot, (dy, dx)) in qn
                    .iter_mut()
                    .zip([(0, 0), (0, half), (half, 0), (half, half)])
                {
                    let f = small.feature(sr + dy, sc + dx).to_vec();
                    *slot = tape.leaf(Tensor::from_vec(&[d], f)?, false);
                }
                let fused = self.g_big.forward(&mut tape, &bound_big, &qn)?;
                let dst = (r * cols + c) * d;
                feats[dst..dst + d].copy_from_slice(tape.value(fused).data());
            }
        }
        Ok(FeatureGrid { scale: Scale::Big, stride: BIG_GRID_STRIDE, rows, cols, dim: d, feats })
    }

    /// Encodes one patch of either scale.
    pub fn encode_patch(&self, patch: &Tensor<f32>, scale: Scale) -> Result<Tensor<f32>> {
        match scale {
            Scale::Small => self.encode_small(patch),
            Scale::Big => self.encode_big(patch),
        }
    }

    fn expect_patch(&self, patch: &Tensor<f32>, edge: usize) -> Result<()> {
        if patch.shape() != [edge, edge, 3] {
            return Err(Error::ShapeMismatch(format!(
                "expected a [{edge}, {edge}, 3] patch, got {:?}",
                patch.shape()
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Parameter enumeration and persistence

impl PatchModel {
    /// All parameters in canonical (serialization) order.
    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        for l in &self.encoder.f_small.layers {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        for fc in [&self.encoder.g_big.fc1, &self.encoder.g_big.fc2] {
            out.push(&fc.weight);
            out.push(&fc.bias);
        }
        for head in [&self.head_small, &self.head_big] {
            for fc in [&head.fc1, &head.fc2] {
                out.push(&fc.weight);
                out.push(&fc.bias);
            }
        }
        out
    }

    /// All parameters, mutable, in canonical order.
    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        for l in &mut self.encoder.f_small.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        for fc in [&mut self.encoder.g_big.fc1, &mut self.encoder.g_big.fc2] {
            out.push(&mut fc.weight);
            out.push(&mut fc.bias);
        }
        for head in [&mut self.head_small, &mut self.head_big] {
            for fc in [&mut head.fc1, &mut head.fc2] {
                out.push(&mut fc.weight);
                out.push(&mut fc.bias);
            }
        }
        out
    }

    /// Writes the parameter container and manifest into `dir`.
    pub fn save(&self, dir: &Path, init_seed: u64) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_params(&dir.join(MODEL_PARAMS_FILE), &self.params())?;
        let manifest = ModelManifest {
            architecture_version: ARCHITECTURE_VERSION,
            embed_dim: self.encoder.config.embed_dim,
            widths: self.encoder.config.widths,
            receptive_field_small: RF_SMALL,
            receptive_field_big: RF_BIG,
            init_seed,
        };
        let path = dir.join(MODEL_MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::format(&path, e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Loads a model saved by [`PatchModel::save`].
    pub fn load(dir: &Path) -> Result<(Self, ModelManifest)> {
        let manifest_path = dir.join(MODEL_MANIFEST_FILE);
        let text = std::fs::read_to_string(&manifest_path)
            .map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: ModelManifest = serde_json::from_str(&text)
            .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
        if manifest.architecture_version != ARCHITECTURE_VERSION {
            return Err(Error::format(
                &manifest_path,
                format!("architecture version {} unsupported", manifest.architecture_version),
            ));
        }
        if manifest.receptive_field_small != RF_SMALL || manifest.receptive_field_big != RF_BIG {
            return Err(Error::format(&manifest_path, "receptive fields do not match this build"));
        }
        let config = EncoderConfig { embed_dim: manifest.embed_dim, widths: manifest.widths };
        let mut model = PatchModel::init_random(&config, manifest.init_seed)?;

        let params_path = dir.join(MODEL_PARAMS_FILE);
        let loaded = load_params(&params_path)?;
        let mut slots = model.params_mut();
        if loaded.len() != slots.len() {
            return Err(Error::format(
                &params_path,
                format!("{} tensors in file, model has {}", loaded.len(), slots.len()),
            ));
        }
        for (slot, (name, tensor)) in slots.iter_mut().zip(loaded) {
            if slot.name != name {
                return Err(Error::format(
                    &params_path,
                    format!("tensor order mismatch: file has {name}, expected {}", slot.name),
                ));
            }
            if slot.value.shape() != tensor.shape() {
                return Err(Error::format(
                    &params_path,
                    format!("tensor {name} has shape {:?}, expected {:?}",
                        tensor.shape(), slot.value.shape()),
                ));
            }
            slot.value = tensor;
        }
        Ok((model, manifest))
    }

    /// Clears the gradients of every parameter.
    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rand_patch(edge: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..edge * edge * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        Tensor::from_vec(&[edge, edge, 3], data).unwrap()
    }

    fn model(seed: u64) -> PatchModel {
        PatchModel::init_random(&EncoderConfig::default(), seed).unwrap()
    }

    #[test]
    fn small_feature_has_embed_dim_entries() {
        let m = model(1);
        let f = m.encoder.encode_small(&rand_patch(RF_SMALL, 2)).unwrap();
        assert_eq!(f.shape(), &[64]);
        assert!(f.all_finite());
    }

    #[test]
    fn same_seed_gives_bitwise_identical_weights() {
        let (a, b) = (model(99), model(99));
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.name, pb.name);
            for (x, y) in pa.value.data().iter().zip(pb.value.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let c = model(100);
        let differs = a
            .params()
            .iter()
            .zip(c.params())
            .any(|(pa, pc)| pa.value.data() != pc.value.data());
        assert!(differs, "different seeds must give different weights");
    }

    #[test]
    fn weight_variance_tracks_he_target() {
        // Pool each layer's weights over 10 seeds; the empirical
        // variance must sit within 20% of 2 / fan_in.
        let probe = model(0);
        let n_params = probe.params().len();
        for idx in 0..n_params {
            if !probe.params()[idx].name.ends_with(".weight") {
                continue;
            }
            let shape = probe.params()[idx].value.shape().to_vec();
            let fan_in: usize = match shape.len() {
                4 => shape[0] * shape[1] * shape[2],
                2 => shape[0],
                _ => panic!("unexpected weight rank"),
            };
            let mut pooled = Vec::new();
            for seed in 0..10u64 {
                pooled.extend_from_slice(model(seed).params()[idx].value.data());
            }
            let mean: f64 = pooled.iter().map(|&v| v as f64).sum::<f64>() / pooled.len() as f64;
            let var: f64 = pooled.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>()
                / pooled.len() as f64;
            let target = 2.0 / fan_in as f64;
            assert!(
                (var - target).abs() < 0.2 * target,
                "{}: var {var:.6}, target {target:.6}",
                probe.params()[idx].name
            );
        }
    }

    #[test]
    fn big_feature_decomposes_into_quadrant_encodings_bitwise() {
        let m = model(5);
        for seed in 0..4 {
            let patch = rand_patch(RF_BIG, 1000 + seed);
            let direct = m.encoder.encode_big(&patch).unwrap();

            // Independent composition: encode each quadrant separately,
            // then run the aggregator on a fresh tape.
            let quads = split_quadrants(&patch).unwrap();
            let mut tape = Tape::<f32>::new();
            let bound = m.encoder.g_big.bind(&mut tape, false);
            let mut qn = [0usize; 4];
            for (slot, q) in qn.iter_mut().zip(&quads) {
                let f = m.encoder.encode_small(q).unwrap();
                *slot = tape.leaf(f, false);
            }
            let fused = m.encoder.g_big.forward(&mut tape, &bound, &qn).unwrap();
            let composed = tape.value(fused);

            assert_eq!(direct.shape(), composed.shape());
            for (a, b) in direct.data().iter().zip(composed.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn permuting_quadrants_changes_big_feature() {
        let m = model(6);
        let patch = rand_patch(RF_BIG, 7);
        let base = m.encoder.encode_big(&patch).unwrap();

        // Swap the top-left and bottom-right quadrants in pixel space.
        let mut swapped = patch.clone();
        let k = RF_SMALL;
        for y in 0..k {
            for x in 0..k {
                for c in 0..3 {
                    let a = patch.offset3(y, x, c);
                    let b = patch.offset3(y + k, x + k, c);
                    swapped.data_mut()[a] = patch.data()[b];
                    swapped.data_mut()[b] = patch.data()[a];
                }
            }
        }
        let permuted = m.encoder.encode_big(&swapped).unwrap();
        assert_ne!(base.data(), permuted.data());
    }

    #[test]
    fn single_pixel_perturbation_moves_small_feature() {
        let m = model(8);
        let patch = rand_patch(RF_SMALL, 9);
        let base = m.encoder.encode_small(&patch).unwrap();
        let mut bumped = patch.clone();
        let off = bumped.offset3(10, 10, 1);
        bumped.data_mut()[off] = (bumped.data()[off] + 0.5).min(1.0);
        let moved = m.encoder.encode_small(&bumped).unwrap();
        assert_ne!(base.data(), moved.data());
    }

    #[test]
    fn classifier_emits_eight_logits_and_is_order_sensitive() {
        let m = model(10);
        let f1 = m.encoder.encode_small(&rand_patch(RF_SMALL, 11)).unwrap();
        let f2 = m.encoder.encode_small(&rand_patch(RF_SMALL, 12)).unwrap();

        let logits = |a: &Tensor<f32>, b: &Tensor<f32>| {
            let mut tape = Tape::<f32>::new();
            let bound = m.head_small.bind(&mut tape, false);
            let an = tape.leaf(a.clone(), false);
            let bn = tape.leaf(b.clone(), false);
            let out = m.head_small.forward(&mut tape, &bound, an, bn).unwrap();
            tape.value(out).clone()
        };
        let fwd = logits(&f1, &f2);
        let rev = logits(&f2, &f1);
        assert_eq!(fwd.shape(), &[POSITION_CLASSES]);
        assert_ne!(fwd.data(), rev.data());
    }

    #[test]
    fn image_pass_matches_patchwise_encoding() {
        let m = model(13);
        let image = rand_patch(96, 14); // 96x96x3
        let small = m.encoder.encode_image(&image, Scale::Small).unwrap();
        assert_eq!((small.rows, small.cols), (17, 17)); // (96-32)/4+1

        for &(r, c) in &[(0usize, 0usize), (3, 11), (16, 16), (8, 0)] {
            let (py, px) = (r * small.stride, c * small.stride);
            let mut patch = Tensor::zeros(&[RF_SMALL, RF_SMALL, 3]);
            for y in 0..RF_SMALL {
                let src = image.offset3(py + y, px, 0);
                let dst = patch.offset3(y, 0, 0);
                patch.data_mut()[dst..dst + RF_SMALL * 3]
                    .copy_from_slice(&image.data()[src..src + RF_SMALL * 3]);
            }
            let direct = m.encoder.encode_small(&patch).unwrap();
            let from_grid = small.feature(r, c);
            for (a, b) in direct.data().iter().zip(from_grid) {
                assert!(
                    (a - b).abs() <= 1e-4 * a.abs().max(1.0),
                    "cell ({r},{c}): {a} vs {b}"
                );
            }
        }

        let big = m.encoder.encode_image(&image, Scale::Big).unwrap();
        assert_eq!((big.rows, big.cols), (3, 3)); // (96-64)/16+1
        for &(r, c) in &[(0usize, 0usize), (1, 2), (2, 2)] {
            let (py, px) = (r * big.stride, c * big.stride);
            let mut patch = Tensor::zeros(&[RF_BIG, RF_BIG, 3]);
            for y in 0..RF_BIG {
                let src = image.offset3(py + y, px, 0);
                let dst = patch.offset3(y, 0, 0);
                patch.data_mut()[dst..dst + RF_BIG * 3]
                    .copy_from_slice(&image.data()[src..src + RF_BIG * 3]);
            }
            let direct = m.encoder.encode_big(&patch).unwrap();
            let from_grid = big.feature(r, c);
            for (a, b) in direct.data().iter().zip(from_grid) {
                assert!(
                    (a - b).abs() <= 1e-4 * a.abs().max(1.0),
                    "cell ({r},{c}): {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn save_load_roundtrip_preserves_weights_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let m = model(77);
        m.save(dir.path(), 77).unwrap();
        let (loaded, manifest) = PatchModel::load(dir.path()).unwrap();
        assert_eq!(manifest.embed_dim, 64);
        assert_eq!(manifest.init_seed, 77);
        for (a, b) in m.params().iter().zip(loaded.params()) {
            assert_eq!(a.name, b.name);
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn rejects_wrong_patch_sizes() {
        let m = model(1);
        assert!(m.encoder.encode_small(&rand_patch(RF_BIG, 2)).is_err());
        assert!(m.encoder.encode_big(&rand_patch(RF_SMALL, 2)).is_err());
    }
}
