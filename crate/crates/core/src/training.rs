//! Loss functions and the optimization loop that fits the patch
//! encoders to a library of normal images.
//!
//! Two training modes exist. The default mode combines a contraction
//! loss that pulls features of spatially adjacent patches together
//! ([`loss_svdd_prime`]) with a self-supervised relative-position
//! classification loss ([`loss_ssl`]). The alternative mode pulls all
//! features toward one fixed center ([`loss_svdd_classic`]), matching
//! the original single-center formulation, and trains no classifier.
//!
//! Scales are trained as separate optimization runs: the 32px trunk
//! first, then the 64px aggregator on top of the (by default frozen)
//! trunk.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    split_quadrants, BoundBig, BoundClassifier, BoundSmall, PatchModel, Scale, POSITION_CLASSES,
};
use crate::numerics::{Adam, AdamConfig, NodeId, Parameter, Scalar, Tape, Tensor};
use crate::sampling::{
    perturb_rgb, sample_jitter_pair, sample_patch, sample_position_pair, RGB_PERTURBATION,
};

/// Guard added under the square root of every differentiated L2
/// distance so its derivative stays finite at zero distance.
pub const DISTANCE_EPS: f64 = 1e-9;

/// Default number of pairs (or single patches in center mode) per
/// loss branch per optimizer step.
pub const DEFAULT_BATCH_PAIRS: usize = 64;

/// Default number of patches sampled to fix the center in center mode.
pub const DEFAULT_CENTER_SAMPLES: usize = 1024;

// ---------------------------------------------------------------------------
// Loss weights and center

/// Relative weight of the pair-contraction loss against the
/// position-classification loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Multiplier on the contraction term; the classification term has
    /// implicit weight 1.
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda: 1.0 }
    }
}

impl LossWeights {
    /// Rejects negative or non-finite weights.
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// The fixed attraction point used by [`loss_svdd_classic`].
#[derive(Debug, Clone, PartialEq)]
pub struct SvddCenter {
    pub c: Tensor<f32>,
}

/// Arithmetic mean of a non-empty feature set, accumulated in 64-bit.
pub fn compute_center(features: &[Tensor<f32>]) -> Result<SvddCenter> {
    let first = features.first().ok_or(Error::EmptyInput("compute_center: no features"))?;
    let dim = first.len();
    let mut acc = vec![0.0f64; dim];
    for f in features {
        if f.len() != dim {
            return Err(Error::ShapeMismatch(format!(
                "feature length {} does not match first feature length {dim}",
                f.len()
            )));
        }
        for (a, &v) in acc.iter_mut().zip(f.data()) {
            *a += v as f64;
        }
    }
    let n = features.len() as f64;
    let mean: Vec<f32> = acc.iter().map(|&a| (a / n) as f32).collect();
    Ok(SvddCenter { c: Tensor::from_vec(&[dim], mean)? })
}

// ---------------------------------------------------------------------------
// Differentiable losses (graph builders)

/// Sum of L2 distances from each feature node to the center node.
pub fn loss_svdd_classic<E: Scalar>(
    tape: &mut Tape<E>,
    features: &[NodeId],
    center: NodeId,
) -> Result<NodeId> {
    if features.is_empty() {
        return Err(Error::EmptyInput("loss_svdd_classic: no features"));
    }
    let mut total = None;
    for &f in features {
        let diff = tape.sub(f, center)?;
        let d = tape.l2_norm(diff, DISTANCE_EPS);
        total = Some(match total {
            None => d,
            Some(t) => tape.add(t, d)?,
        });
    }
    Ok(total.unwrap())
}

/// Sum of L2 distances within each feature pair.
pub fn loss_svdd_prime<E: Scalar>(
    tape: &mut Tape<E>,
    pairs: &[(NodeId, NodeId)],
) -> Result<NodeId> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("loss_svdd_prime: no pairs"));
    }
    let mut total = None;
    for &(a, b) in pairs {
        let diff = tape.sub(a, b)?;
        let d = tape.l2_norm(diff, DISTANCE_EPS);
        total = Some(match total {
            None => d,
            Some(t) => tape.add(t, d)?,
        });
    }
    Ok(total.unwrap())
}

/// Softmax cross-entropy of one 8-way position prediction.
pub fn loss_ssl<E: Scalar>(tape: &mut Tape<E>, logits: NodeId, y: usize) -> Result<NodeId> {
    if y >= POSITION_CLASSES {
        return Err(Error::InvalidArgument(format!(
            "position class {y} out of range 0..{POSITION_CLASSES}"
        )));
    }
    tape.softmax_cross_entropy(logits, y)
}

/// Weighted combination `lambda * contraction + classification`.
pub fn total_loss<E: Scalar>(
    tape: &mut Tape<E>,
    l_svdd_prime: NodeId,
    l_ssl: NodeId,
    weights: &LossWeights,
) -> Result<NodeId> {
    weights.validate()?;
    let scaled = tape.scale(l_svdd_prime, weights.lambda);
    tape.add(scaled, l_ssl)
}

// ---------------------------------------------------------------------------
// Training configuration

/// Selects the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Pair contraction plus position classification (the default).
    PatchSvdd,
    /// Single-center contraction without a classifier.
    SvddClassic,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "patch-svdd" => Ok(TrainMode::PatchSvdd),
            "svdd-classic" => Ok(TrainMode::SvddClassic),
            other => Err(Error::InvalidArgument(format!(
                "unknown training mode '{other}' (expected patch-svdd or svdd-classic)"
            ))),
        }
    }
}

/// Everything the training loop needs beyond the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Optimizer steps per scale.
    pub steps: usize,
    /// Pairs per loss branch per step (single patches in center mode).
    pub batch_pairs: usize,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Scales to train; the small scale always runs first.
    pub scales: Vec<Scale>,
    pub mode: TrainMode,
    /// Gradient chunks computed concurrently per step. The merge order
    /// is fixed, so results are reproducible for a fixed worker count;
    /// determinism mode uses 1.
    pub workers: usize,
    /// Keep updating the trunk while the 64px aggregator trains,
    /// instead of freezing it.
    pub joint_finetune: bool,
    /// Displace classification neighbors by up to `K/8` pixels.
    pub ssl_jitter: bool,
    /// Patches sampled to fix the center in center mode.
    pub center_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            batch_pairs: DEFAULT_BATCH_PAIRS,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            seed: 0,
            scales: vec![Scale::Small, Scale::Big],
            mode: TrainMode::PatchSvdd,
            workers: 1,
            joint_finetune: false,
            ssl_jitter: true,
            center_samples: DEFAULT_CENTER_SAMPLES,
        }
    }
}

impl TrainConfig {
    /// Rejects empty or non-positive settings.
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.steps == 0 || self.batch_pairs == 0 || self.workers == 0 {
            return Err(Error::InvalidArgument(format!(
                "steps, batch_pairs and workers must be positive (got {}, {}, {})",
                self.steps, self.batch_pairs, self.workers
            )));
        }
        if self.scales.is_empty() {
            return Err(Error::InvalidArgument("no scales selected for training".into()));
        }
        if self.mode == TrainMode::SvddClassic && self.center_samples == 0 {
            return Err(Error::InvalidArgument("center_samples must be positive".into()));
        }
        Ok(())
    }
}

/// Loss record of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub scale: Scale,
    pub step: usize,
    /// Mean contraction loss per pair (center distance in center mode).
    pub l_svdd_prime: f64,
    /// Mean classification loss per pair (0 in center mode).
    pub l_ssl: f64,
    /// The combined objective actually differentiated.
    pub total: f64,
}

impl StepStats {
    /// Column names of [`StepStats::csv_row`].
    pub const CSV_HEADER: &'static str = "step,l_svdd_prime,l_ssl,total";

    /// One CSV line (without the scale, which selects the file).
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.step, self.l_svdd_prime, self.l_ssl, self.total)
    }
}

/// Output of [`train`] besides the mutated model.
#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    /// Per-step losses, small scale first.
    pub history: Vec<StepStats>,
    /// Center used per scale (center mode only).
    pub centers: Vec<(Scale, SvddCenter)>,
}

// ---------------------------------------------------------------------------
// Batches and per-chunk gradient evaluation

/// One sampled step batch for one scale, assembled serially from the
/// run RNG so the draw sequence is reproducible.
struct Batch {
    /// Anchor/companion patch pairs for the contraction loss.
    svdd: Vec<(Tensor<f32>, Tensor<f32>)>,
    /// Perturbed anchor/neighbor patches with position class.
    ssl: Vec<(Tensor<f32>, Tensor<f32>, usize)>,
    /// Single patches for center mode.
    singles: Vec<Tensor<f32>>,
}

fn assemble_batch(
    images: &[Tensor<f32>],
    scale: Scale,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let k = scale.patch_size();
    let n = config.batch_pairs;
    let mut batch = Batch { svdd: Vec::new(), ssl: Vec::new(), singles: Vec::new() };
    match config.mode {
        TrainMode::PatchSvdd => {
            // A zero weight removes the contraction branch entirely,
            // sampling included, so such a run draws the same RNG
            // sequence as a classification-only trainer.
            if config.weights.lambda > 0.0 {
                for _ in 0..n {
                    let img = &images[rng.random_range(0..images.len())];
                    let pair = sample_jitter_pair(img, k, rng)?;
                    batch.svdd.push((pair.anchor, pair.companion));
                }
            }
            for _ in 0..n {
                let img = &images[rng.random_range(0..images.len())];
                let pair = sample_position_pair(img, k, config.ssl_jitter, rng)?;
                let anchor = perturb_rgb(&pair.anchor, RGB_PERTURBATION, rng);
                let neighbor = perturb_rgb(&pair.neighbor, RGB_PERTURBATION, rng);
                batch.ssl.push((anchor, neighbor, pair.label));
            }
        }
        TrainMode::SvddClassic => {
            for _ in 0..n {
                let img = &images[rng.random_range(0..images.len())];
                batch.singles.push(sample_patch(img, k, rng)?.0);
            }
        }
    }
    Ok(batch)
}

/// Leaves of the components bound into one chunk's tape.
struct PhaseBounds {
    small: BoundSmall,
    big: Option<BoundBig>,
    head: Option<BoundClassifier>,
    center: Option<NodeId>,
}

/// Which parameter groups receive gradients in the current phase.
#[derive(Clone, Copy)]
struct Trainable {
    trunk: bool,
    aggregator: bool,
    head: bool,
}

fn phase_trainable(scale: Scale, config: &TrainConfig) -> Trainable {
    let head = config.mode == TrainMode::PatchSvdd;
    match scale {
        Scale::Small => Trainable { trunk: true, aggregator: false, head },
        Scale::Big => {
            Trainable { trunk: config.joint_finetune, aggregator: true, head }
        }
    }
}

fn bind_phase<E: Scalar>(
    model: &PatchModel,
    tape: &mut Tape<E>,
    scale: Scale,
    t: Trainable,
    center: Option<&SvddCenter>,
) -> PhaseBounds {
    let small = model.encoder.f_small.bind(tape, t.trunk);
    let big = match scale {
        Scale::Small => None,
        Scale::Big => Some(model.encoder.g_big.bind(tape, t.aggregator)),
    };
    let head = t.head.then(|| match scale {
        Scale::Small => model.head_small.bind(tape, true),
        Scale::Big => model.head_big.bind(tape, true),
    });
    let center = center.map(|c| tape.leaf(c.c.cast::<E>(), false));
    PhaseBounds { small, big, head, center }
}

/// Encodes one patch tensor to a feature node under the phase bounds.
fn encode_node<E: Scalar>(
    model: &PatchModel,
    tape: &mut Tape<E>,
    bounds: &PhaseBounds,
    patch: &Tensor<f32>,
) -> Result<NodeId> {
    let d = model.encoder.config.embed_dim;
    match &bounds.big {
        None => {
            let input = tape.leaf(patch.cast::<E>(), false);
            let grid = model.encoder.f_small.forward(tape, &bounds.small, input)?;
            tape.reshape(grid, &[d])
        }
        Some(big) => {
            let quadrants = split_quadrants(patch)?;
            let mut feats = [NodeId::default(); 4];
            for (slot, q) in feats.iter_mut().zip(&quadrants) {
                let input = tape.leaf(q.cast::<E>(), false);
                let grid = model.encoder.f_small.forward(tape, &bounds.small, input)?;
                *slot = tape.reshape(grid, &[d])?;
            }
            model.encoder.g_big.forward(tape, big, &feats)
        }
    }
}

/// A chunk's finished tape, ready for gradient harvesting, plus the
/// raw (unnormalized) loss sums it contributed.
struct ChunkOutcome<E: Scalar> {
    tape: Tape<E>,
    bounds: PhaseBounds,
    svdd_sum: f64,
    ssl_sum: f64,
}

/// Builds the loss graph of one batch chunk and runs its backward
/// pass. `pair_count` is the full batch's branch size, so summing the
/// chunk gradients reproduces the whole-batch mean-loss gradient.
#[allow(clippy::too_many_arguments)]
fn run_chunk<E: Scalar>(
    model: &PatchModel,
    scale: Scale,
    trainable: Trainable,
    center: Option<&SvddCenter>,
    svdd: &[(Tensor<f32>, Tensor<f32>)],
    ssl: &[(Tensor<f32>, Tensor<f32>, usize)],
    singles: &[Tensor<f32>],
    weights: &LossWeights,
    pair_count: usize,
) -> Result<ChunkOutcome<E>> {
    let mut tape = Tape::<E>::new();
    let bounds = bind_phase(model, &mut tape, scale, trainable, center);
    let inv = 1.0 / pair_count as f64;

    let mut svdd_sum_node = None;
    if !svdd.is_empty() {
        let mut pairs = Vec::with_capacity(svdd.len());
        for (a, b) in svdd {
            let ea = encode_node(model, &mut tape, &bounds, a)?;
            let eb = encode_node(model, &mut tape, &bounds, b)?;
            pairs.push((ea, eb));
        }
        svdd_sum_node = Some(loss_svdd_prime(&mut tape, &pairs)?);
    }
    if !singles.is_empty() {
        let center_node = bounds.center.expect("center mode binds a center");
        let mut feats = Vec::with_capacity(singles.len());
        for p in singles {
            feats.push(encode_node(model, &mut tape, &bounds, p)?);
        }
        svdd_sum_node = Some(loss_svdd_classic(&mut tape, &feats, center_node)?);
    }

    let mut ssl_sum_node = None;
    if !ssl.is_empty() {
        let head = bounds.head.as_ref().expect("classification needs a bound head");
        let classifier = match scale {
            Scale::Small => &model.head_small,
            Scale::Big => &model.head_big,
        };
        for (a, b, y) in ssl {
            let ha = encode_node(model, &mut tape, &bounds, a)?;
            let hb = encode_node(model, &mut tape, &bounds, b)?;
            let logits = classifier.forward(&mut tape, head, ha, hb)?;
            let ce = loss_ssl(&mut tape, logits, *y)?;
            ssl_sum_node = Some(match ssl_sum_node {
                None => ce,
                Some(t) => tape.add(t, ce)?,
            });
        }
    }

    // Normalize by the whole-batch pair count, then weight and combine.
    let objective = match (svdd_sum_node, ssl_sum_node) {
        (Some(s), Some(c)) => {
            let s_mean = tape.scale(s, inv);
            let c_mean = tape.scale(c, inv);
            Some(total_loss(&mut tape, s_mean, c_mean, weights)?)
        }
        (Some(s), None) => {
            let factor = if singles.is_empty() { weights.lambda * inv } else { inv };
            Some(tape.scale(s, factor))
        }
        (None, Some(c)) => Some(tape.scale(c, inv)),
        (None, None) => None,
    };

    let svdd_sum = svdd_sum_node.map_or(0.0, |n| tape.value(n).item().as_f64());
    let ssl_sum = ssl_sum_node.map_or(0.0, |n| tape.value(n).item().as_f64());
    if let Some(obj) = objective {
        tape.backward(obj)?;
    }
    Ok(ChunkOutcome { tape, bounds, svdd_sum, ssl_sum })
}

/// Adds one chunk's gradients into the model parameters.
fn merge_chunk<E: Scalar>(model: &mut PatchModel, outcome: &ChunkOutcome<E>) {
    model.encoder.f_small.accumulate_grads(&outcome.tape, &outcome.bounds.small);
    if let Some(big) = &outcome.bounds.big {
        model.encoder.g_big.accumulate_grads(&outcome.tape, big);
    }
    if let Some(head) = &outcome.bounds.head {
        match outcome.bounds.big {
            None => model.head_small.accumulate_grads(&outcome.tape, head),
            Some(_) => model.head_big.accumulate_grads(&outcome.tape, head),
        }
    }
}

/// The parameters the optimizer updates this phase, canonical order.
fn trainable_params(model: &mut PatchModel, t: Trainable, scale: Scale) -> Vec<&mut Parameter> {
    let mut out = Vec::new();
    if t.trunk {
        for layer in &mut model.encoder.f_small.layers {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
    }
    if t.aggregator {
        out.push(&mut model.encoder.g_big.fc1.weight);
        out.push(&mut model.encoder.g_big.fc1.bias);
        out.push(&mut model.encoder.g_big.fc2.weight);
        out.push(&mut model.encoder.g_big.fc2.bias);
    }
    if t.head {
        let head = match scale {
            Scale::Small => &mut model.head_small,
            Scale::Big => &mut model.head_big,
        };
        out.push(&mut head.fc1.weight);
        out.push(&mut head.fc1.bias);
        out.push(&mut head.fc2.weight);
        out.push(&mut head.fc2.bias);
    }
    out
}

/// Splits `0..n` into at most `parts` contiguous, near-equal ranges.
fn chunk_ranges(n: usize, parts: usize) -> Vec<std::ops::Range<usize>> {
    let parts = parts.min(n).max(1);
    let base = n / parts;
    let extra = n % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for i in 0..parts {
        let len = base + usize::from(i < extra);
        out.push(start..start + len);
        start += len;
    }
    out
}

// ---------------------------------------------------------------------------
// The training loop

/// Fits the model to `images` (preprocessed, `[H, W, 3]` in `[0, 1]`)
/// per `config`, returning the loss history. The small scale trains
/// first; the big scale then trains its aggregator and head on top of
/// the trunk. Deterministic for a fixed seed and worker count.
pub fn train(
    model: &mut PatchModel,
    images: &[Tensor<f32>],
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if images.is_empty() {
        return Err(Error::EmptyInput("train: no images"));
    }
    for img in images {
        let s = img.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::ShapeMismatch(format!("expected [H, W, 3] image, got {s:?}")));
        }
    }

    let mut scales = config.scales.clone();
    scales.sort_by_key(|s| s.patch_size());
    scales.dedup();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = TrainReport::default();
    for scale in scales {
        train_phase(model, images, scale, config, &mut rng, &mut report)?;
    }
    Ok(report)
}

fn train_phase(
    model: &mut PatchModel,
    images: &[Tensor<f32>],
    scale: Scale,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    report: &mut TrainReport,
) -> Result<()> {
    let trainable = phase_trainable(scale, config);
    let mut adam = Adam::new(config.adam);

    // Center mode fixes its attraction point from an initial sample
    // encoded with the untrained (or previous-phase) parameters.
    let center = match config.mode {
        TrainMode::PatchSvdd => None,
        TrainMode::SvddClassic => {
            let mut feats = Vec::with_capacity(config.center_samples);
            for _ in 0..config.center_samples {
                let img = &images[rng.random_range(0..images.len())];
                let (patch, _) = sample_patch(img, scale.patch_size(), rng)?;
                feats.push(model.encoder.encode_patch(&patch, scale)?);
            }
            let c = compute_center(&feats)?;
            report.centers.push((scale, c.clone()));
            Some(c)
        }
    };

    let n = config.batch_pairs;
    for step in 0..config.steps {
        let batch = assemble_batch(images, scale, config, rng)?;
        let ranges = chunk_ranges(n, config.workers);

        let run = |r: &std::ops::Range<usize>| -> Result<ChunkOutcome<f32>> {
            run_chunk(
                model,
                scale,
                trainable,
                center.as_ref(),
                if batch.svdd.is_empty() { &[] } else { &batch.svdd[r.clone()] },
                if batch.ssl.is_empty() { &[] } else { &batch.ssl[r.clone()] },
                if batch.singles.is_empty() { &[] } else { &batch.singles[r.clone()] },
                &config.weights,
                n,
            )
        };
        let outcomes: Vec<Result<ChunkOutcome<f32>>> = if config.workers == 1 {
            ranges.iter().map(run).collect()
        } else {
            ranges.par_iter().map(run).collect()
        };

        let (mut svdd_sum, mut ssl_sum) = (0.0f64, 0.0f64);
        for outcome in outcomes {
            let outcome = outcome?;
            merge_chunk(model, &outcome);
            svdd_sum += outcome.svdd_sum;
            ssl_sum += outcome.ssl_sum;
        }

        let stats = StepStats {
            scale,
            step,
            l_svdd_prime: svdd_sum / n as f64,
            l_ssl: ssl_sum / n as f64,
            total: match config.mode {
                TrainMode::PatchSvdd => {
                    config.weights.lambda * svdd_sum / n as f64 + ssl_sum / n as f64
                }
                TrainMode::SvddClassic => svdd_sum / n as f64,
            },
        };
        if !stats.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss became non-finite at {:?} step {step} (contraction {}, classification {})",
                scale, stats.l_svdd_prime, stats.l_ssl
            )));
        }

        let mut params = trainable_params(model, trainable, scale);
        adam.step(&mut params)?;
        model.zero_grads();
        report.history.push(stats);
    }
    Ok(())
}
