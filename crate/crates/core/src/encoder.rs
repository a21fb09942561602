//! The semantic gaze encoder: a three-stage stride-2 conv stack, gaze
//! pooling of its feature maps against a fixation density map, a softmax
//! head producing the 10-way class posterior, top-k pruning, and
//! aggregation of posteriors over a whole search session.
//!
//! Gaze pooling computes pooled_c = sum_{x,y} features[c,x,y] * fdm[x,y].
//! With a unit-mass FDM that is a weighted spatial average, and with the
//! uniform map it coincides with plain global average pooling, which is
//! exactly how the encoder is trained.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::gaze::{build_fdm, uniform_fdm, FdmParams, Fixation, FixationDensityMap};
use crate::gradcheck::{self, GradCheckConfig, GradCheckReport};
use crate::ops::{self, Activation};
use crate::params::{adam_step, AdamConfig, Grads, ParamSet};
use crate::rng::Stream;
use crate::stimuli::{paste_center, Category, NUM_CATEGORIES};
use crate::tensor::Tensor;

/// Channels after the last conv stage; the gaze-pooled vector length.
pub const FEATURE_CHANNELS: usize = 32;
/// Spatial reduction of the conv stack (three stride-2 stages).
pub const FEATURE_STRIDE: usize = 8;

const CHANNELS: [usize; 4] = [1, 8, 16, 32];

// ---------------------------------------------------------------------------
// Class posterior
// ---------------------------------------------------------------------------

/// A probability vector over the 10 categories: entries in [0, 1],
/// summing to 1 within 1e-6.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPosterior {
    probs: [f32; NUM_CATEGORIES],
}

impl ClassPosterior {
    /// Validate and renormalize a near-unit-mass probability vector.
    pub fn from_probs(probs: [f32; NUM_CATEGORIES]) -> Result<ClassPosterior> {
        let mut sum = 0.0f32;
        for &p in &probs {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::Degenerate {
                    op: "class_posterior",
                    detail: format!("entry {p}"),
                });
            }
            sum += p;
        }
        if !sum.is_finite() || (sum - 1.0).abs() > 1e-3 {
            return Err(Error::Degenerate {
                op: "class_posterior",
                detail: format!("mass {sum}"),
            });
        }
        let mut probs = probs;
        for p in &mut probs {
            *p /= sum;
        }
        Ok(ClassPosterior { probs })
    }

    pub fn uniform() -> ClassPosterior {
        ClassPosterior {
            probs: [1.0 / NUM_CATEGORIES as f32; NUM_CATEGORIES],
        }
    }

    pub fn probs(&self) -> &[f32; NUM_CATEGORIES] {
        &self.probs
    }

    pub fn prob(&self, c: Category) -> f32 {
        self.probs[c.id() as usize]
    }

    /// Highest-probability category; ties break toward the lowest id.
    pub fn argmax(&self) -> Category {
        let mut best = 0;
        for i in 1..NUM_CATEGORIES {
            if self.probs[i] > self.probs[best] {
                best = i;
            }
        }
        Category::from_id(best as u8).unwrap()
    }

    /// 0-based rank of a category by descending probability (ties toward
    /// lower ids rank first).
    pub fn rank_of(&self, c: Category) -> usize {
        let order = order_desc(&self.probs);
        order.iter().position(|&i| i == c.id() as usize).unwrap()
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f32 {
        let mut h = 0.0f32;
        for &p in &self.probs {
            if p > 0.0 {
                h -= p * libm::logf(p);
            }
        }
        h
    }
}

/// Indices sorted by descending probability, ties toward the lower id.
fn order_desc(probs: &[f32; NUM_CATEGORIES]) -> [usize; NUM_CATEGORIES] {
    let mut order = [0usize; NUM_CATEGORIES];
    for (i, o) in order.iter_mut().enumerate() {
        *o = i;
    }
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// How many posterior entries survive pruning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopK {
    K(usize),
    All,
}

impl TopK {
    pub fn parse(s: &str) -> Option<TopK> {
        match s {
            "all" | "All" | "ALL" => Some(TopK::All),
            _ => s.parse::<usize>().ok().filter(|&k| k >= 1).map(TopK::K),
        }
    }
}

impl core::fmt::Display for TopK {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TopK::K(k) => write!(f, "{k}"),
            TopK::All => write!(f, "all"),
        }
    }
}

/// Keep the k largest entries (ties toward the lower category id), zero
/// the rest, renormalize. `TopK::All` is the identity.
pub fn prune_topk(posterior: &ClassPosterior, k: TopK) -> Result<ClassPosterior> {
    let k = match k {
        TopK::All => return Ok(posterior.clone()),
        TopK::K(0) => {
            return Err(Error::InvalidParam {
                op: "prune_topk",
                detail: "k must be >= 1".into(),
            })
        }
        TopK::K(k) => k.min(NUM_CATEGORIES),
    };
    // Nothing to zero: the posterior is already normalized, so pruning is
    // exactly the identity (this also makes pruning idempotent bitwise).
    if posterior.probs.iter().filter(|&&p| p > 0.0).count() <= k {
        return Ok(posterior.clone());
    }
    let order = order_desc(&posterior.probs);
    let mut pruned = [0.0f32; NUM_CATEGORIES];
    let mut mass = 0.0f32;
    for &i in order.iter().take(k) {
        pruned[i] = posterior.probs[i];
        mass += posterior.probs[i];
    }
    if mass <= 0.0 {
        return Err(Error::Degenerate {
            op: "prune_topk",
            detail: "all kept entries are zero".into(),
        });
    }
    for p in &mut pruned {
        *p /= mass;
    }
    Ok(ClassPosterior { probs: pruned })
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Conv stack (1 -> 8 -> 16 -> 32 channels, 3x3, stride 2, relu) plus a
/// 32 -> 10 softmax head. Fully convolutional: any input with both sides
/// divisible by 8 works.
pub struct EncoderModel {
    params: ParamSet,
}

/// Parameter names and shapes define the stack; shared with the reduced
/// instances used by the composed gradient check.
fn init_params(channels: &[usize; 4], classes: usize, seed: u64) -> ParamSet {
    let mut rng = Stream::new(seed).split("encoder/init");
    let mut params = ParamSet::new();
    for layer in 0..3 {
        let (c_in, c_out) = (channels[layer], channels[layer + 1]);
        // He initialization for relu conv stages.
        let std = libm::sqrtf(2.0 / (c_in * 9) as f32);
        let w: Vec<f32> = (0..c_out * c_in * 9)
            .map(|_| rng.normal() as f32 * std)
            .collect();
        params.insert(
            &format!("conv{}.w", layer + 1),
            Tensor::from_vec(&[c_out, c_in, 3, 3], w).unwrap(),
        );
        params.insert(&format!("conv{}.b", layer + 1), Tensor::zeros(&[c_out]));
    }
    let std = libm::sqrtf(1.0 / channels[3] as f32);
    let w: Vec<f32> = (0..channels[3] * classes)
        .map(|_| rng.normal() as f32 * std)
        .collect();
    params.insert("head.w", Tensor::from_vec(&[channels[3], classes], w).unwrap());
    params.insert("head.b", Tensor::zeros(&[classes]));
    params
}

struct ForwardCache {
    z1: Tensor,
    a1: Tensor,
    z2: Tensor,
    a2: Tensor,
    z3: Tensor,
    a3: Tensor,
    pooled: Tensor,
    logits: Tensor,
}

fn forward_cached(params: &ParamSet, x: &Tensor) -> Result<ForwardCache> {
    let z1 = ops::conv2d_forward(x, params.tensor("conv1.w"), params.tensor("conv1.b"), 2)?;
    let a1 = ops::activation_forward(&z1, Activation::Relu);
    let z2 = ops::conv2d_forward(&a1, params.tensor("conv2.w"), params.tensor("conv2.b"), 2)?;
    let a2 = ops::activation_forward(&z2, Activation::Relu);
    let z3 = ops::conv2d_forward(&a2, params.tensor("conv3.w"), params.tensor("conv3.b"), 2)?;
    let a3 = ops::activation_forward(&z3, Activation::Relu);
    let pooled = ops::spatial_mean(&a3)?;
    let logits = ops::linear_forward(&pooled, params.tensor("head.w"), params.tensor("head.b"))?;
    Ok(ForwardCache {
        z1,
        a1,
        z2,
        a2,
        z3,
        a3,
        pooled,
        logits,
    })
}

/// Mean cross-entropy loss, probabilities, parameter gradients, and the
/// gradient w.r.t. the input batch.
fn loss_and_grads(
    params: &ParamSet,
    x: &Tensor,
    labels: &[usize],
) -> Result<(f32, Tensor, Grads, Tensor)> {
    let fwd = forward_cached(params, x)?;
    let sm = ops::softmax_xent(&fwd.logits, labels)?;
    let glogits = ops::softmax_xent_backward(&sm.probs, labels)?;
    let lin = ops::linear_backward(&fwd.pooled, params.tensor("head.w"), &glogits)?;
    let ga3 = ops::spatial_mean_backward(fwd.a3.shape(), &lin.x)?;
    let gz3 = ops::activation_backward(Activation::Relu, &fwd.z3, &fwd.a3, &ga3)?;
    let c3 = ops::conv2d_backward(&fwd.a2, params.tensor("conv3.w"), 2, &gz3)?;
    let gz2 = ops::activation_backward(Activation::Relu, &fwd.z2, &fwd.a2, &c3.x)?;
    let c2 = ops::conv2d_backward(&fwd.a1, params.tensor("conv2.w"), 2, &gz2)?;
    let gz1 = ops::activation_backward(Activation::Relu, &fwd.z1, &fwd.a1, &c2.x)?;
    let c1 = ops::conv2d_backward(x, params.tensor("conv1.w"), 2, &gz1)?;

    let mut grads = Grads::new();
    grads.accumulate("head.w", lin.w)?;
    grads.accumulate("head.b", lin.b)?;
    grads.accumulate("conv3.w", c3.k)?;
    grads.accumulate("conv3.b", c3.b)?;
    grads.accumulate("conv2.w", c2.k)?;
    grads.accumulate("conv2.b", c2.b)?;
    grads.accumulate("conv1.w", c1.k)?;
    grads.accumulate("conv1.b", c1.b)?;
    Ok((sm.loss, sm.probs, grads, c1.x))
}

impl EncoderModel {
    pub fn init(seed: u64) -> EncoderModel {
        EncoderModel {
            params: init_params(&CHANNELS, NUM_CATEGORIES, seed),
        }
    }

    /// Rebuild a model from named tensors (a loaded checkpoint),
    /// validating names and shapes exactly.
    pub fn from_tensors(tensors: Vec<(String, Tensor)>) -> Result<EncoderModel> {
        let expected: Vec<(&str, Vec<usize>)> = vec![
            ("conv1.b", vec![CHANNELS[1]]),
            ("conv1.w", vec![CHANNELS[1], CHANNELS[0], 3, 3]),
            ("conv2.b", vec![CHANNELS[2]]),
            ("conv2.w", vec![CHANNELS[2], CHANNELS[1], 3, 3]),
            ("conv3.b", vec![CHANNELS[3]]),
            ("conv3.w", vec![CHANNELS[3], CHANNELS[2], 3, 3]),
            ("head.b", vec![NUM_CATEGORIES]),
            ("head.w", vec![CHANNELS[3], NUM_CATEGORIES]),
        ];
        let mut sorted = tensors;
        sorted.sort_by(|a, b| a.0.cmp(&b.0));
        if sorted.len() != expected.len() {
            return Err(Error::Shape {
                op: "encoder_from_tensors",
                detail: format!("{} tensors, expected {}", sorted.len(), expected.len()),
            });
        }
        let mut params = ParamSet::new();
        for ((name, tensor), (want_name, want_shape)) in sorted.into_iter().zip(expected) {
            if name != want_name || tensor.shape() != want_shape.as_slice() {
                return Err(Error::Shape {
                    op: "encoder_from_tensors",
                    detail: format!("{name} {:?}, expected {want_name} {want_shape:?}", tensor.shape()),
                });
            }
            params.insert(&name, tensor);
        }
        Ok(EncoderModel { params })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Conv-stack features of a single [H, W] image: a [32, H/8, W/8] map.
    pub fn extract_features(&self, image: &Tensor) -> Result<Tensor> {
        let (h, w) = match image.shape() {
            [h, w] => (*h, *w),
            s => {
                return Err(Error::Shape {
                    op: "extract_features",
                    detail: format!("expected [H, W] image, got {s:?}"),
                })
            }
        };
        if h % FEATURE_STRIDE != 0 || w % FEATURE_STRIDE != 0 || h < FEATURE_STRIDE {
            return Err(Error::Shape {
                op: "extract_features",
                detail: format!("image dims {h}x{w} not divisible by {FEATURE_STRIDE}"),
            });
        }
        let x = image.reshape(&[1, 1, h, w])?;
        let fwd = forward_cached(&self.params, &x)?;
        fwd.a3
            .reshape(&[FEATURE_CHANNELS, h / FEATURE_STRIDE, w / FEATURE_STRIDE])
    }

    /// Softmax head over a gaze-pooled feature vector.
    pub fn classify(&self, pooled: &[f32]) -> Result<ClassPosterior> {
        if pooled.len() != FEATURE_CHANNELS {
            return Err(Error::Shape {
                op: "classify",
                detail: format!("pooled length {}, expected {FEATURE_CHANNELS}", pooled.len()),
            });
        }
        let x = Tensor::from_vec(&[1, FEATURE_CHANNELS], pooled.to_vec())?;
        let logits = ops::linear_forward(&x, self.params.tensor("head.w"), self.params.tensor("head.b"))?;
        let sm = ops::softmax_xent(&logits, &[0])?;
        let mut probs = [0.0f32; NUM_CATEGORIES];
        probs.copy_from_slice(sm.probs.data());
        ClassPosterior::from_probs(probs)
    }

    /// Classify a whole image under the uniform FDM (plain global average
    /// pooling).
    pub fn classify_image(&self, image: &Tensor) -> Result<ClassPosterior> {
        let fm = self.extract_features(image)?;
        let grid = (fm.shape()[1], fm.shape()[2]);
        let pooled = gaze_pool(&fm, &uniform_fdm(grid))?;
        self.classify(&pooled)
    }

    /// Classify a small exemplar-sized image by centering it on a blank
    /// cell-sized canvas first, matching the training distribution. This
    /// is the oracle path used to score generated images.
    pub fn classify_on_canvas(&self, image: &Tensor, canvas_px: usize) -> Result<ClassPosterior> {
        self.classify_image(&paste_center(image, canvas_px)?)
    }
}

/// pooled_c = sum_{x,y} features[c, x, y] * fdm[x, y].
pub fn gaze_pool(features: &Tensor, fdm: &FixationDensityMap) -> Result<Vec<f32>> {
    let (c, h, w) = match features.shape() {
        [c, h, w] => (*c, *h, *w),
        s => {
            return Err(Error::Shape {
                op: "gaze_pool",
                detail: format!("expected [C, H, W] features, got {s:?}"),
            })
        }
    };
    if fdm.grid.shape() != [h, w] {
        return Err(Error::Shape {
            op: "gaze_pool",
            detail: format!("fdm {:?} vs features {h}x{w}", fdm.grid.shape()),
        });
    }
    let weights = fdm.grid.data();
    let mut pooled = vec![0.0f32; c];
    for (p, plane) in pooled.iter_mut().zip(features.data().chunks_exact(h * w)) {
        let mut acc = 0.0f32;
        for (&f, &g) in plane.iter().zip(weights) {
            acc += f * g;
        }
        *p = acc;
    }
    Ok(pooled)
}

// ---------------------------------------------------------------------------
// Session encoding
// ---------------------------------------------------------------------------

/// Local encoding uses fixation positions; global only uses the fact that
/// the stimulus was fixated (every FDM becomes uniform).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodeMode {
    Local,
    Global,
}

impl EncodeMode {
    pub fn parse(s: &str) -> Option<EncodeMode> {
        match s {
            "local" | "Local" => Some(EncodeMode::Local),
            "global" | "Global" => Some(EncodeMode::Global),
            _ => None,
        }
    }
}

/// How fixations combine within one stimulus: one posterior per fixation,
/// duration-weighted (the default), or a single joint FDM per stimulus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    PerFixation,
    JointFdm,
}

impl Aggregation {
    pub fn parse(s: &str) -> Option<Aggregation> {
        match s {
            "per-fixation" | "per_fixation" => Some(Aggregation::PerFixation),
            "joint-fdm" | "joint_fdm" => Some(Aggregation::JointFdm),
            _ => None,
        }
    }
}

/// One stimulus of a session: the collage canvas and the fixations
/// recorded on it.
pub struct SessionStimulus<'a> {
    pub canvas: &'a Tensor,
    pub fixations: &'a [Fixation],
}

/// Aggregate a session of fixated collages into one class posterior.
///
/// Per fixation (default): each fixation becomes a single-splat FDM,
/// pooled and classified on its collage's feature map; the per-collage
/// posterior is the duration-weighted average of those, and the session
/// posterior the plain mean over collages, renormalized. Joint FDM: one
/// density map per collage from its whole log. Global mode replaces every
/// FDM with the uniform map.
pub fn encode_session(
    model: &EncoderModel,
    stimuli: &[SessionStimulus<'_>],
    mode: EncodeMode,
    aggregation: Aggregation,
    fdm: &FdmParams,
) -> Result<ClassPosterior> {
    if stimuli.is_empty() {
        return Err(Error::EmptyInput("encode_session"));
    }
    let mut session = [0.0f32; NUM_CATEGORIES];
    for stim in stimuli {
        if stim.fixations.is_empty() {
            return Err(Error::EmptyInput("encode_session"));
        }
        let features = model.extract_features(stim.canvas)?;
        let grid = (features.shape()[1], features.shape()[2]);
        let source = (stim.canvas.shape()[0], stim.canvas.shape()[1]);
        let fdm_params = FdmParams {
            grid,
            ..fdm.clone()
        };
        let collage_posterior = match aggregation {
            Aggregation::PerFixation => {
                let mut acc = [0.0f32; NUM_CATEGORIES];
                let mut weight_sum = 0.0f32;
                for f in stim.fixations {
                    let map = match mode {
                        EncodeMode::Local => {
                            build_fdm(core::slice::from_ref(f), source, &fdm_params)?
                        }
                        EncodeMode::Global => uniform_fdm(grid),
                    };
                    let posterior = model.classify(&gaze_pool(&features, &map)?)?;
                    for (a, &p) in acc.iter_mut().zip(posterior.probs()) {
                        *a += f.t_ms * p;
                    }
                    weight_sum += f.t_ms;
                }
                for a in &mut acc {
                    *a /= weight_sum;
                }
                acc
            }
            Aggregation::JointFdm => {
                let map = match mode {
                    EncodeMode::Local => build_fdm(stim.fixations, source, &fdm_params)?,
                    EncodeMode::Global => uniform_fdm(grid),
                };
                *model.classify(&gaze_pool(&features, &map)?)?.probs()
            }
        };
        for (s, p) in session.iter_mut().zip(collage_posterior) {
            *s += p;
        }
    }
    for s in &mut session {
        *s /= stimuli.len() as f32;
    }
    ClassPosterior::from_probs(session)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EncoderTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    /// Exemplars are centered on a blank canvas of this edge, the size of
    /// one collage cell, so train-time pooling statistics match inference.
    pub canvas_px: usize,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        EncoderTrainConfig {
            epochs: 30,
            batch: 64,
            lr: 1e-3,
            canvas_px: 64,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    /// Mean per-sample loss of each epoch.
    pub epoch_loss: Vec<f32>,
    /// Top-1 accuracy on the validation set after each epoch.
    pub epoch_val_accuracy: Vec<f64>,
}

fn batch_canvases(
    data: &[(Tensor, Category)],
    order: &[usize],
    canvas_px: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let n = order.len();
    let mut x = Tensor::zeros(&[n, 1, canvas_px, canvas_px]);
    let mut labels = Vec::with_capacity(n);
    let plane = canvas_px * canvas_px;
    for (slot, &idx) in order.iter().enumerate() {
        let (image, category) = &data[idx];
        let canvas = paste_center(image, canvas_px)?;
        x.data_mut()[slot * plane..(slot + 1) * plane].copy_from_slice(canvas.data());
        labels.push(category.id() as usize);
    }
    Ok((x, labels))
}

/// Train the encoder on labeled exemplars with softmax cross-entropy under
/// global average pooling. Deterministic for a given seed: identical runs
/// produce bitwise-identical parameters.
pub fn train_encoder(
    train: &[(Tensor, Category)],
    val: &[(Tensor, Category)],
    cfg: &EncoderTrainConfig,
    seed: u64,
) -> Result<(EncoderModel, TrainHistory)> {
    if train.is_empty() {
        return Err(Error::EmptyInput("train_encoder"));
    }
    let mut model = EncoderModel::init(seed);
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let shuffle_root = Stream::new(seed).split("encoder/shuffle");
    let mut history = TrainHistory::default();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffle_root.split_index(epoch as u64).shuffle(&mut order);
        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(cfg.batch) {
            let (x, labels) = batch_canvases(train, chunk, cfg.canvas_px)?;
            let (loss, _probs, grads, _) = loss_and_grads(&model.params, &x, &labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    op: "train_encoder",
                    detail: format!("loss at epoch {epoch}"),
                });
            }
            loss_sum += loss as f64 * chunk.len() as f64;
            adam_step(&mut model.params, &grads, &adam)?;
        }
        history.epoch_loss.push((loss_sum / train.len() as f64) as f32);
        history
            .epoch_val_accuracy
            .push(top1_accuracy(&model, val, cfg.canvas_px)?);
    }
    Ok((model, history))
}

/// Top-1 accuracy of GAP classification over exemplars pasted on
/// cell-sized canvases.
pub fn top1_accuracy(
    model: &EncoderModel,
    data: &[(Tensor, Category)],
    canvas_px: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    let order: Vec<usize> = (0..data.len()).collect();
    for chunk in order.chunks(64) {
        let (x, labels) = batch_canvases(data, chunk, canvas_px)?;
        let fwd = forward_cached(&model.params, &x)?;
        let k = NUM_CATEGORIES;
        for (row, &label) in fwd.logits.data().chunks_exact(k).zip(&labels) {
            let mut best = 0;
            for i in 1..k {
                if row[i] > row[best] {
                    best = i;
                }
            }
            if best == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

// ---------------------------------------------------------------------------
// Composed gradient check
// ---------------------------------------------------------------------------

/// Gradcheck the full conv -> relu -> conv -> relu -> conv -> relu -> GAP
/// -> linear -> softmax chain on a reduced instance. Instances whose relu
/// pre-activations sit within 0.02 of the kink are re-rolled (central
/// differences are invalid across the kink).
pub fn check_composite(seed: u64) -> Result<GradCheckReport> {
    let channels = [1usize, 2, 3, 4];
    let classes = 3;
    let (h, w) = (8, 8);
    let mut chosen = None;
    for attempt in 0..50u64 {
        let inst_seed = seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9));
        let params = init_params(&channels, classes, inst_seed);
        let mut s = Stream::new(inst_seed).split("encoder/check-input");
        let x = gradcheck::rand_tensor(&mut s, &[2, 1, h, w], -1.0, 1.0);
        let labels: Vec<usize> = (0..2).map(|_| s.below(classes as u64) as usize).collect();
        let fwd = forward_cached(&params, &x)?;
        let near_kink = [&fwd.z1, &fwd.z2, &fwd.z3]
            .iter()
            .any(|z| z.data().iter().any(|v| v.abs() < 0.02));
        if !near_kink {
            chosen = Some((params, x, labels));
            break;
        }
        if attempt == 49 {
            chosen = Some((params, x, labels));
        }
    }
    let (params, x, labels) = chosen.unwrap();
    let (_loss, _probs, grads, grad_input) = loss_and_grads(&params, &x, &labels)?;

    let mut values = alloc::collections::BTreeMap::new();
    let mut analytic = grads.into_map();
    for (name, t) in params.iter() {
        values.insert(String::from(name), t.clone());
    }
    values.insert(String::from("input"), x.clone());
    analytic.insert(String::from("input"), grad_input);

    let labels_ref = labels.clone();
    gradcheck::gradcheck(&values, &analytic, &GradCheckConfig::default(), move |p| {
        use crate::gradcheck::reference as r;
        let get = |n: &str| &p[n];
        let z1 = r::conv2d(&get("input").1, &get("conv1.w").1, &get("conv1.b").1, 2, channels[0], h, w, channels[1], 2);
        let a1 = r::relu(&z1);
        let (h1, w1) = (h / 2, w / 2);
        let z2 = r::conv2d(&a1, &get("conv2.w").1, &get("conv2.b").1, 2, channels[1], h1, w1, channels[2], 2);
        let a2 = r::relu(&z2);
        let (h2, w2) = (h1 / 2, w1 / 2);
        let z3 = r::conv2d(&a2, &get("conv3.w").1, &get("conv3.b").1, 2, channels[2], h2, w2, channels[3], 2);
        let a3 = r::relu(&z3);
        let (h3, w3) = (h2 / 2, w2 / 2);
        let pooled = r::spatial_mean(&a3, h3 * w3);
        let logits = r::linear(&pooled, &get("head.w").1, &get("head.b").1, 2, channels[3], classes);
        r::softmax_xent(&logits, &labels_ref, 2, classes)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaze::Fixation;
    use crate::stimuli::{build_collage, render_exemplar, ALL_CATEGORIES};

    fn posterior(v: [f32; NUM_CATEGORIES]) -> ClassPosterior {
        ClassPosterior::from_probs(v).unwrap()
    }

    #[test]
    fn classify_zero_model_is_uniform() {
        let mut model = EncoderModel::init(1);
        // Zero the head; pooled vector becomes irrelevant.
        let zero_w = Tensor::zeros(&[FEATURE_CHANNELS, NUM_CATEGORIES]);
        let zero_b = Tensor::zeros(&[NUM_CATEGORIES]);
        model.params.insert("head.w", zero_w);
        model.params.insert("head.b", zero_b);
        let p = model.classify(&vec![0.37; FEATURE_CHANNELS]).unwrap();
        for &v in p.probs() {
            assert!((v - 0.1).abs() < 1e-6);
        }
    }

    #[test]
    fn classify_two_class_closed_form() {
        // Head built so logits are [ln 2, 0, -40, -40, ...]: the two live
        // classes split 2/3 vs 1/3.
        let mut model = EncoderModel::init(2);
        let mut w = Tensor::zeros(&[FEATURE_CHANNELS, NUM_CATEGORIES]);
        w.data_mut()[0] = libm::logf(2.0); // pooled[0] = 1 drives class 0
        let mut b = Tensor::zeros(&[NUM_CATEGORIES]);
        for i in 2..NUM_CATEGORIES {
            b.data_mut()[i] = -40.0;
        }
        model.params.insert("head.w", w);
        model.params.insert("head.b", b);
        let mut pooled = vec![0.0; FEATURE_CHANNELS];
        pooled[0] = 1.0;
        let p = model.classify(&pooled).unwrap();
        assert!((p.probs()[0] - 2.0 / 3.0).abs() < 1e-6);
        assert!((p.probs()[1] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn argmax_scale_invariance_only_without_bias() {
        let mut model = EncoderModel::init(3);
        model.params.insert("head.b", Tensor::zeros(&[NUM_CATEGORIES]));
        let mut s = Stream::new(8).split("test");
        let pooled: Vec<f32> = (0..FEATURE_CHANNELS)
            .map(|_| s.range_f64(-1.0, 1.0) as f32)
            .collect();
        let scaled: Vec<f32> = pooled.iter().map(|&v| v * 2.5).collect();
        let a = model.classify(&pooled).unwrap().argmax();
        let b = model.classify(&scaled).unwrap().argmax();
        assert_eq!(a, b);

        // And a bias counterexample: scaling flips the winner.
        let mut w = Tensor::zeros(&[FEATURE_CHANNELS, NUM_CATEGORIES]);
        w.data_mut()[0] = 1.0; // class 0 logit = pooled[0]
        w.data_mut()[1] = 0.5; // class 1 logit = 0.5 pooled[0] + 0.6
        let mut bias = Tensor::zeros(&[NUM_CATEGORIES]);
        bias.data_mut()[1] = 0.6;
        for i in 2..NUM_CATEGORIES {
            bias.data_mut()[i] = -40.0;
        }
        model.params.insert("head.w", w);
        model.params.insert("head.b", bias);
        let mut pooled = vec![0.0; FEATURE_CHANNELS];
        pooled[0] = 1.0;
        let small = model.classify(&pooled).unwrap().argmax();
        pooled[0] = 10.0;
        let large = model.classify(&pooled).unwrap().argmax();
        assert_ne!(small, large);
    }

    #[test]
    fn gaze_pool_uniform_equals_spatial_mean() {
        let model = EncoderModel::init(4);
        let image = render_exemplar(Category::Dress, 5).pixels;
        let canvas = paste_center(&image, 64).unwrap();
        let fm = model.extract_features(&canvas).unwrap();
        let pooled = gaze_pool(&fm, &uniform_fdm((8, 8))).unwrap();
        let x = canvas.reshape(&[1, 1, 64, 64]).unwrap();
        let fwd = forward_cached(&model.params, &x).unwrap();
        for (a, b) in pooled.iter().zip(fwd.pooled.data()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn gaze_pool_one_hot_picks_single_position() {
        let fm = Tensor::from_vec(&[2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let mut grid = Tensor::zeros(&[2, 2]);
        grid.data_mut()[3] = 1.0; // (y=1, x=1)
        let fdm = FixationDensityMap {
            grid,
            source_h: 2,
            source_w: 2,
            sigma_px: 0.0,
        };
        let pooled = gaze_pool(&fm, &fdm).unwrap();
        assert_eq!(pooled, vec![4.0, 8.0]);

        let zero = FixationDensityMap {
            grid: Tensor::zeros(&[2, 2]),
            source_h: 2,
            source_w: 2,
            sigma_px: 0.0,
        };
        assert_eq!(gaze_pool(&fm, &zero).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn features_of_zero_image_are_constant_per_channel_in_the_interior() {
        let mut model = EncoderModel::init(6);
        // Nonzero biases so the constant actually propagates.
        for layer in 1..=3usize {
            let name = format!("conv{layer}.b");
            let n = model.params.tensor(&name).len();
            model
                .params
                .insert(&name, Tensor::filled(&[n], 0.1 * layer as f32));
        }
        let fm = model.extract_features(&Tensor::zeros(&[64, 64])).unwrap();
        let (c, h, w) = (fm.shape()[0], fm.shape()[1], fm.shape()[2]);
        for ch in 0..c {
            let center = fm.at(&[ch, h / 2, w / 2]);
            for y in 2..h - 2 {
                for x in 2..w - 2 {
                    assert!((fm.at(&[ch, y, x]) - center).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn feature_shape_follows_input_shape() {
        let model = EncoderModel::init(7);
        let fm = model.extract_features(&Tensor::zeros(&[256, 256])).unwrap();
        assert_eq!(fm.shape(), &[32, 32, 32]);
        assert!(model.extract_features(&Tensor::zeros(&[60, 64])).is_err());
    }

    #[test]
    fn cell_features_match_exemplar_canvas_features_in_the_interior() {
        // Translation equivariance: an exemplar pasted into a collage cell
        // reproduces its own 64x64-canvas features on the interior of the
        // corresponding 8x8 block.
        let mut model = EncoderModel::init(8);
        for layer in 1..=3usize {
            let name = format!("conv{layer}.b");
            let n = model.params.tensor(&name).len();
            model
                .params
                .insert(&name, Tensor::filled(&[n], 0.05 * layer as f32));
        }
        let exemplar = render_exemplar(Category::Jean, 99).pixels;
        let cell_canvas = paste_center(&exemplar, 64).unwrap();
        let fm_cell = model.extract_features(&cell_canvas).unwrap();

        let (row, col) = (1usize, 2usize);
        let mut big = Tensor::zeros(&[256, 256]);
        crate::stimuli::paste(&mut big, &exemplar, row * 64 + 16, col * 64 + 16).unwrap();
        let fm_big = model.extract_features(&big).unwrap();

        for c in 0..FEATURE_CHANNELS {
            for y in 1..7 {
                for x in 1..7 {
                    let a = fm_cell.at(&[c, y, x]);
                    let b = fm_big.at(&[c, row * 8 + y, col * 8 + x]);
                    assert!((a - b).abs() < 1e-5, "c{c} ({y},{x}): {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn prune_examples() {
        let p = posterior([0.5, 0.3, 0.2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let pruned = prune_topk(&p, TopK::K(2)).unwrap();
        assert!((pruned.probs()[0] - 0.625).abs() < 1e-6);
        assert!((pruned.probs()[1] - 0.375).abs() < 1e-6);
        assert!(pruned.probs()[2..].iter().all(|&v| v == 0.0));

        let mut one_hot = [0.0; NUM_CATEGORIES];
        one_hot[4] = 1.0;
        let p = posterior(one_hot);
        assert_eq!(prune_topk(&p, TopK::K(1)).unwrap(), p);

        let uniform = ClassPosterior::uniform();
        let pruned = prune_topk(&uniform, TopK::K(3)).unwrap();
        for i in 0..3 {
            assert!((pruned.probs()[i] - 1.0 / 3.0).abs() < 1e-6);
        }
        assert!(pruned.probs()[3..].iter().all(|&v| v == 0.0));

        assert_eq!(prune_topk(&uniform, TopK::All).unwrap(), uniform);
        assert!(prune_topk(&uniform, TopK::K(0)).is_err());
    }

    #[test]
    fn prune_is_idempotent_and_order_preserving() {
        let p = posterior([0.05, 0.3, 0.1, 0.15, 0.02, 0.08, 0.12, 0.06, 0.07, 0.05]);
        for k in 1..=4usize {
            let once = prune_topk(&p, TopK::K(k)).unwrap();
            let twice = prune_topk(&once, TopK::K(k)).unwrap();
            assert_eq!(once, twice);
            let support = once.probs().iter().filter(|&&v| v > 0.0).count();
            assert!(support <= k);
            // Survivors keep their relative order.
            for i in 0..NUM_CATEGORIES {
                for j in 0..NUM_CATEGORIES {
                    if once.probs()[i] > 0.0 && once.probs()[j] > 0.0 && p.probs()[i] > p.probs()[j]
                    {
                        assert!(once.probs()[i] > once.probs()[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn session_single_fixation_equals_direct_classification() {
        let model = EncoderModel::init(9);
        let collage = build_collage(Category::Tank, 2, 55).unwrap();
        let f = Fixation {
            x: 100.0,
            y: 40.0,
            t_ms: 180.0,
        };
        let stim = SessionStimulus {
            canvas: &collage.canvas,
            fixations: core::slice::from_ref(&f),
        };
        let fdm_params = FdmParams::default();
        let session = encode_session(
            &model,
            core::slice::from_ref(&stim),
            EncodeMode::Local,
            Aggregation::PerFixation,
            &fdm_params,
        )
        .unwrap();

        let fm = model.extract_features(&collage.canvas).unwrap();
        let map = build_fdm(&[f], (256, 256), &fdm_params).unwrap();
        let direct = model.classify(&gaze_pool(&fm, &map).unwrap()).unwrap();
        for (a, b) in session.probs().iter().zip(direct.probs()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn session_duration_weighting_follows_the_formula() {
        let model = EncoderModel::init(10);
        let collage = build_collage(Category::Skirt, 2, 66).unwrap();
        let f1 = Fixation {
            x: 40.0,
            y: 40.0,
            t_ms: 100.0,
        };
        let f2 = Fixation {
            x: 200.0,
            y: 200.0,
            t_ms: 300.0,
        };
        let fdm_params = FdmParams::default();
        let fixations = [f1, f2];
        let stim = SessionStimulus {
            canvas: &collage.canvas,
            fixations: &fixations,
        };
        let session = encode_session(
            &model,
            core::slice::from_ref(&stim),
            EncodeMode::Local,
            Aggregation::PerFixation,
            &fdm_params,
        )
        .unwrap();

        let fm = model.extract_features(&collage.canvas).unwrap();
        let post = |f: &Fixation| {
            let map = build_fdm(core::slice::from_ref(f), (256, 256), &fdm_params).unwrap();
            *model.classify(&gaze_pool(&fm, &map).unwrap()).unwrap().probs()
        };
        let (p1, p2) = (post(&f1), post(&f2));
        for i in 0..NUM_CATEGORIES {
            let want = (100.0 * p1[i] + 300.0 * p2[i]) / 400.0;
            assert!((session.probs()[i] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn session_mean_of_identical_collages_is_identity() {
        let model = EncoderModel::init(11);
        let collage = build_collage(Category::Jean, 2, 77).unwrap();
        let fixations = [Fixation {
            x: 128.0,
            y: 128.0,
            t_ms: 100.0,
        }];
        let one = [SessionStimulus {
            canvas: &collage.canvas,
            fixations: &fixations,
        }];
        let three = [
            SessionStimulus {
                canvas: &collage.canvas,
                fixations: &fixations,
            },
            SessionStimulus {
                canvas: &collage.canvas,
                fixations: &fixations,
            },
            SessionStimulus {
                canvas: &collage.canvas,
                fixations: &fixations,
            },
        ];
        let fdm_params = FdmParams::default();
        let a = encode_session(&model, &one, EncodeMode::Local, Aggregation::PerFixation, &fdm_params).unwrap();
        let b = encode_session(&model, &three, EncodeMode::Local, Aggregation::PerFixation, &fdm_params).unwrap();
        for (x, y) in a.probs().iter().zip(b.probs()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn global_mode_matches_gap_posterior_for_any_aggregation() {
        let model = EncoderModel::init(12);
        let collage = build_collage(Category::Cardigan, 2, 88).unwrap();
        let fixations = [
            Fixation {
                x: 30.0,
                y: 30.0,
                t_ms: 120.0,
            },
            Fixation {
                x: 220.0,
                y: 100.0,
                t_ms: 80.0,
            },
        ];
        let stim = [SessionStimulus {
            canvas: &collage.canvas,
            fixations: &fixations,
        }];
        let fdm_params = FdmParams::default();
        let per_fix = encode_session(&model, &stim, EncodeMode::Global, Aggregation::PerFixation, &fdm_params).unwrap();
        let joint = encode_session(&model, &stim, EncodeMode::Global, Aggregation::JointFdm, &fdm_params).unwrap();
        let gap = model.classify_image(&collage.canvas).unwrap();
        for i in 0..NUM_CATEGORIES {
            assert!((per_fix.probs()[i] - gap.probs()[i]).abs() < 1e-6);
            assert!((joint.probs()[i] - gap.probs()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn duration_scale_invariance_of_sessions() {
        let model = EncoderModel::init(13);
        let collage = build_collage(Category::Shorts, 2, 99).unwrap();
        let base = [
            Fixation {
                x: 50.0,
                y: 60.0,
                t_ms: 100.0,
            },
            Fixation {
                x: 180.0,
                y: 90.0,
                t_ms: 250.0,
            },
        ];
        let scaled: Vec<Fixation> = base
            .iter()
            .map(|f| Fixation {
                t_ms: f.t_ms * 8.0,
                ..*f
            })
            .collect();
        let fdm_params = FdmParams::default();
        let a = encode_session(
            &model,
            &[SessionStimulus {
                canvas: &collage.canvas,
                fixations: &base,
            }],
            EncodeMode::Local,
            Aggregation::PerFixation,
            &fdm_params,
        )
        .unwrap();
        let b = encode_session(
            &model,
            &[SessionStimulus {
                canvas: &collage.canvas,
                fixations: &scaled,
            }],
            EncodeMode::Local,
            Aggregation::PerFixation,
            &fdm_params,
        )
        .unwrap();
        for (x, y) in a.probs().iter().zip(b.probs()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_session_inputs_are_rejected() {
        let model = EncoderModel::init(14);
        let fdm_params = FdmParams::default();
        assert!(matches!(
            encode_session(&model, &[], EncodeMode::Local, Aggregation::PerFixation, &fdm_params),
            Err(Error::EmptyInput(_))
        ));
        let collage = build_collage(Category::Jean, 1, 1).unwrap();
        let stim = [SessionStimulus {
            canvas: &collage.canvas,
            fixations: &[],
        }];
        assert!(matches!(
            encode_session(&model, &stim, EncodeMode::Local, Aggregation::PerFixation, &fdm_params),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn tiny_training_run_learns_and_is_deterministic() {
        let mut data = Vec::new();
        let mut rng = Stream::new(3).split("test/tinytrain");
        for _ in 0..12 {
            for &c in &ALL_CATEGORIES {
                data.push((render_exemplar(c, rng.next_u64()).pixels, c));
            }
        }
        let (train, val) = data.split_at(100);
        let cfg = EncoderTrainConfig {
            epochs: 3,
            batch: 16,
            ..EncoderTrainConfig::default()
        };
        let (model_a, hist_a) = train_encoder(train, val, &cfg, 42).unwrap();
        assert_eq!(hist_a.epoch_loss.len(), 3);
        assert!(hist_a.epoch_loss[2] < hist_a.epoch_loss[0]);

        let (model_b, hist_b) = train_encoder(train, val, &cfg, 42).unwrap();
        assert_eq!(hist_a.epoch_loss, hist_b.epoch_loss);
        for (name, t) in model_a.params.iter() {
            assert_eq!(t.data(), model_b.params.tensor(name).data(), "{name}");
        }
    }

    #[test]
    fn composite_gradcheck_passes() {
        for seed in 0..3u64 {
            let report = check_composite(seed).unwrap();
            assert!(report.passes(1e-3), "seed {seed}: {report:?}");
        }
    }
}
