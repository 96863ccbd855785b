//! The visual-stability classifier: a small convolutional network with a
//! global-average-pooling head, trained from scratch in f64 by SGD with
//! momentum on binary foreground masks.
//!
//! Three stages of (3x3 conv, stride 1, zero padding 1) -> ReLU -> (2x2
//! max-pool) take a 64x64 mask through channel widths 1 -> 8 -> 16 -> 32,
//! leaving 32 feature maps of 8x8. Global average pooling reduces each map
//! to one scalar and a linear layer maps the 32 scalars to 2 logits
//! (class 0 = unstable, class 1 = stable). The GAP head makes class
//! activation maps exact: CAM_c(x, y) = sum_k w_{c,k} F_k(x, y), whose
//! spatial mean equals logit_c minus its bias.

use std::fs::File;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{self, DatasetError, Manifest, Split, ViewItem};
use crate::imaging::{self, Mask};
use crate::scenegen::GroupSpec;
use crate::seeds;

/// Logit index for the "collapses" class.
pub const CLASS_UNSTABLE: usize = 0;
/// Logit index for the "stays put" class.
pub const CLASS_STABLE: usize = 1;
/// The network always separates two classes.
pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("input is {found}x{found} pixels but the model expects {expected}x{expected}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("the data view is empty")]
    EmptyView,
    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("evaluation view shares groups {groups:?} with the {split} training view")]
    Leakage { groups: Vec<String>, split: Split },
    #[error("unknown experiment design {0:?} (valid: intra, cross, generalization)")]
    UnknownDesign(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

fn io_err(path: &Path, source: io::Error) -> LearnError {
    LearnError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Tensors and layers
// ---------------------------------------------------------------------------

/// Channel-major (c, y, x) value grid, row-major within a channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    fn base(&self, c: usize, y: usize) -> usize {
        (c * self.height + y) * self.width
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.base(c, y) + x]
    }
}

/// 3x3 convolution, stride 1, zero padding 1. Weights are laid out
/// [(co * cin + ci) * 9 + ky * 3 + kx].
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub cout: usize,
    pub cin: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// Fully-connected layer; weights [o * inp + i].
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub outp: usize,
    pub inp: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// Stage widths of the fixed three-stage architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelPlan {
    /// Input image side in pixels; must be divisible by 8 (three pools).
    pub input: usize,
    /// Output channels of the three conv stages.
    pub channels: [usize; 3],
}

impl Default for ModelPlan {
    fn default() -> Self {
        Self {
            input: imaging::TRAIN_RESOLUTION,
            channels: [8, 16, 32],
        }
    }
}

impl ModelPlan {
    /// Side of the final feature maps (input halved three times).
    pub fn feature_side(&self) -> usize {
        self.input / 8
    }

    pub fn param_count(&self) -> usize {
        let [c1, c2, c3] = self.channels;
        (c1 * 9 + c1) + (c2 * c1 * 9 + c2) + (c3 * c2 * 9 + c3) + (NUM_CLASSES * c3 + NUM_CLASSES)
    }
}

/// What a model was trained on; evaluation uses it to refuse leaking views.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub groups: Vec<String>,
    pub split: Split,
}

/// The classifier: three conv stages plus the GAP-linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub plan: ModelPlan,
    pub conv: Vec<ConvLayer>,
    pub fc: Linear,
    pub trained_on: Option<Provenance>,
}

impl Model {
    /// Fan-in-scaled uniform initialization (weights U(-s, s) with
    /// s = scale / sqrt(fan_in); biases zero), sampled in a fixed order
    /// from a counter-based stream so initialization is a pure function of
    /// (plan, seed, scale).
    pub fn new(plan: ModelPlan, seed: u64, init_scale: f64) -> Self {
        assert!(
            plan.input.is_multiple_of(8) && plan.input >= 8,
            "input side must be a multiple of 8"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::tagged(seed, "model-init"));
        let mut conv = Vec::new();
        let mut cin = 1usize;
        for &cout in &plan.channels {
            let s = init_scale / ((cin * 9) as f64).sqrt();
            let w = (0..cout * cin * 9).map(|_| rng.gen_range(-s..s)).collect();
            conv.push(ConvLayer {
                cout,
                cin,
                w,
                b: vec![0.0; cout],
            });
            cin = cout;
        }
        let s = init_scale / (cin as f64).sqrt();
        let fc = Linear {
            outp: NUM_CLASSES,
            inp: cin,
            w: (0..NUM_CLASSES * cin)
                .map(|_| rng.gen_range(-s..s))
                .collect(),
            b: vec![0.0; NUM_CLASSES],
        };
        Model {
            plan,
            conv,
            fc,
            trained_on: None,
        }
    }

    /// Parameter buffers in checkpoint order, each with a stable name.
    pub fn slots(&self) -> Vec<(String, &[f64])> {
        let mut v = Vec::new();
        for (i, layer) in self.conv.iter().enumerate() {
            v.push((format!("conv{}_w", i + 1), layer.w.as_slice()));
            v.push((format!("conv{}_b", i + 1), layer.b.as_slice()));
        }
        v.push(("fc_w".to_string(), self.fc.w.as_slice()));
        v.push(("fc_b".to_string(), self.fc.b.as_slice()));
        v
    }

    pub fn slots_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::new();
        for layer in &mut self.conv {
            v.push(layer.w.as_mut_slice());
            v.push(layer.b.as_mut_slice());
        }
        v.push(self.fc.w.as_mut_slice());
        v.push(self.fc.b.as_mut_slice());
        v
    }
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// Per-stage caches needed by the backward pass.
#[derive(Clone, Debug)]
pub struct StageCache {
    /// Conv output before ReLU.
    pub pre_relu: Tensor,
    /// After ReLU and 2x2 max-pool.
    pub pooled: Tensor,
    /// For each pooled cell, which of its four source cells won
    /// (2 * dy + dx; first maximum in scan order wins ties).
    pub argmax: Vec<u8>,
}

/// Full forward-pass record: logits plus everything backward needs.
#[derive(Clone, Debug)]
pub struct Activations {
    pub input: Tensor,
    pub stages: Vec<StageCache>,
    /// Spatial means of the final feature maps.
    pub gap: Vec<f64>,
    pub logits: Vec<f64>,
}

impl Activations {
    /// The final-stage feature maps (inputs to GAP and CAM).
    pub fn features(&self) -> &Tensor {
        &self.stages.last().expect("model has stages").pooled
    }
}

/// out += conv(in) for one (co, ci, ky, kx) weight, over the valid
/// row/column ranges of zero padding 1.
#[inline]
fn conv_accumulate(out: &mut [f64], inp: &[f64], w: f64, side: usize, dy: isize, dx: isize) {
    let y0 = if dy < 0 { 1 } else { 0 };
    let y1 = if dy > 0 { side - 1 } else { side };
    let x0 = if dx < 0 { 1usize } else { 0 };
    let x1 = if dx > 0 { side - 1 } else { side };
    for y in y0..y1 {
        let yin = (y as isize + dy) as usize;
        let ob = y * side;
        // x0 + dx >= 0 and x1 + dx <= side, so these offsets never wrap.
        let i0 = (yin * side) as isize + dx;
        let dst = &mut out[ob + x0..ob + x1];
        let src = &inp[(i0 + x0 as isize) as usize..(i0 + x1 as isize) as usize];
        for (d, s) in dst.iter_mut().zip(src) {
            *d += w * s;
        }
    }
}

fn conv_forward(layer: &ConvLayer, inp: &Tensor) -> Tensor {
    debug_assert_eq!(layer.cin, inp.channels);
    let side = inp.height;
    let mut out = Tensor::zeros(layer.cout, side, side);
    let ch = side * side;
    for co in 0..layer.cout {
        out.data[co * ch..(co + 1) * ch].fill(layer.b[co]);
        for ci in 0..layer.cin {
            let inp_ch = &inp.data[ci * ch..(ci + 1) * ch];
            for ky in 0..3 {
                for kx in 0..3 {
                    let w = layer.w[(co * layer.cin + ci) * 9 + ky * 3 + kx];
                    conv_accumulate(
                        &mut out.data[co * ch..(co + 1) * ch],
                        inp_ch,
                        w,
                        side,
                        ky as isize - 1,
                        kx as isize - 1,
                    );
                }
            }
        }
    }
    out
}

/// Fused ReLU + 2x2 max-pool; caches the winning cell per output.
fn relu_pool_forward(pre: &Tensor) -> (Tensor, Vec<u8>) {
    let side = pre.height;
    debug_assert!(side.is_multiple_of(2), "pooling needs an even side");
    let half = side / 2;
    let mut out = Tensor::zeros(pre.channels, half, half);
    let mut argmax = vec![0u8; out.data.len()];
    for c in 0..pre.channels {
        for y in 0..half {
            for x in 0..half {
                let mut best = f64::MIN;
                let mut which = 0u8;
                for dy in 0..2usize {
                    for dx in 0..2usize {
                        let v = pre.at(c, 2 * y + dy, 2 * x + dx).max(0.0);
                        if v > best {
                            best = v;
                            which = (2 * dy + dx) as u8;
                        }
                    }
                }
                let o = (c * half + y) * half + x;
                out.data[o] = best;
                argmax[o] = which;
            }
        }
    }
    (out, argmax)
}

/// Convert a training-resolution mask to network input values (0.0 / 1.0).
pub fn input_from_mask(mask: &Mask) -> Vec<f64> {
    mask.bits.iter().map(|&b| b as f64).collect()
}

/// Run the network, returning logits and all intermediate activations.
pub fn forward(model: &Model, input: &[f64]) -> Result<Activations, LearnError> {
    let side = model.plan.input;
    if input.len() != side * side {
        let found = (input.len() as f64).sqrt().round() as usize;
        return Err(LearnError::ShapeMismatch {
            expected: side,
            found,
        });
    }
    let mut current = Tensor {
        channels: 1,
        height: side,
        width: side,
        data: input.to_vec(),
    };
    let input_tensor = current.clone();
    let mut stages = Vec::with_capacity(model.conv.len());
    for layer in &model.conv {
        let pre_relu = conv_forward(layer, &current);
        let (pooled, argmax) = relu_pool_forward(&pre_relu);
        current = pooled.clone();
        stages.push(StageCache {
            pre_relu,
            pooled,
            argmax,
        });
    }
    let feat = &stages.last().expect("stages").pooled;
    let area = (feat.height * feat.width) as f64;
    let ch = feat.height * feat.width;
    let gap: Vec<f64> = (0..feat.channels)
        .map(|c| feat.data[c * ch..(c + 1) * ch].iter().sum::<f64>() / area)
        .collect();
    let logits: Vec<f64> = (0..model.fc.outp)
        .map(|o| {
            model.fc.b[o]
                + model.fc.w[o * model.fc.inp..(o + 1) * model.fc.inp]
                    .iter()
                    .zip(&gap)
                    .map(|(w, g)| w * g)
                    .sum::<f64>()
        })
        .collect();
    Ok(Activations {
        input: input_tensor,
        stages,
        gap,
        logits,
    })
}

/// Numerically-stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::MIN, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// A trained prediction: stable-class probability and the argmax class.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub p_stable: f64,
    pub class: usize,
    pub logits: Vec<f64>,
}

/// Classify one mask.
pub fn predict(model: &Model, mask: &Mask) -> Result<Prediction, LearnError> {
    if mask.width != model.plan.input || mask.height != model.plan.input {
        return Err(LearnError::ShapeMismatch {
            expected: model.plan.input,
            found: mask.width,
        });
    }
    let acts = forward(model, &input_from_mask(mask))?;
    let probs = softmax(&acts.logits);
    let class = if acts.logits[CLASS_STABLE] > acts.logits[CLASS_UNSTABLE] {
        CLASS_STABLE
    } else {
        CLASS_UNSTABLE
    };
    Ok(Prediction {
        p_stable: probs[CLASS_STABLE],
        class,
        logits: acts.logits,
    })
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

/// Gradient buffers, one per model slot, in the same order as
/// `Model::slots`.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub buffers: Vec<Vec<f64>>,
}

impl Gradients {
    fn zeros_like(model: &Model) -> Self {
        Self {
            buffers: model
                .slots()
                .iter()
                .map(|(_, s)| vec![0.0; s.len()])
                .collect(),
        }
    }

    fn scale(&mut self, k: f64) {
        for buf in &mut self.buffers {
            for v in buf.iter_mut() {
                *v *= k;
            }
        }
    }
}

/// Backward through one stage: from d(pooled) to d(pre_relu) and then to
/// parameter and input gradients of the conv layer.
fn stage_backward(
    layer: &ConvLayer,
    stage: &StageCache,
    inp: &Tensor,
    dpooled: &Tensor,
    dw: &mut [f64],
    db: &mut [f64],
    want_dinput: bool,
) -> Option<Tensor> {
    let side = stage.pre_relu.height;
    let half = side / 2;
    // ReLU + pool backward: route each pooled gradient to its winning cell,
    // gated by the ReLU mask.
    let mut dpre = Tensor::zeros(stage.pre_relu.channels, side, side);
    for c in 0..dpooled.channels {
        for y in 0..half {
            for x in 0..half {
                let o = (c * half + y) * half + x;
                let g = dpooled.data[o];
                if g == 0.0 {
                    continue;
                }
                let which = stage.argmax[o] as usize;
                let (dy, dx) = (which / 2, which % 2);
                let (py, px) = (2 * y + dy, 2 * x + dx);
                if stage.pre_relu.at(c, py, px) > 0.0 {
                    dpre.data[(c * side + py) * side + px] += g;
                }
            }
        }
    }
    // Conv backward.
    let ch = side * side;
    let mut dinp = if want_dinput {
        Some(Tensor::zeros(layer.cin, side, side))
    } else {
        None
    };
    for co in 0..layer.cout {
        let dpre_ch = &dpre.data[co * ch..(co + 1) * ch];
        db[co] += dpre_ch.iter().sum::<f64>();
        for ci in 0..layer.cin {
            let inp_ch = &inp.data[ci * ch..(ci + 1) * ch];
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let dy = ky as isize - 1;
                    let dx = kx as isize - 1;
                    let y0 = if dy < 0 { 1 } else { 0 };
                    let y1 = if dy > 0 { side - 1 } else { side };
                    let x0 = if dx < 0 { 1usize } else { 0 };
                    let x1 = if dx > 0 { side - 1 } else { side };
                    let mut wg = 0.0;
                    for y in y0..y1 {
                        let yin = (y as isize + dy) as usize;
                        let ob = y * side;
                        let i0 = (yin * side) as isize + dx;
                        let a = &dpre_ch[ob + x0..ob + x1];
                        let b = &inp_ch[(i0 + x0 as isize) as usize..(i0 + x1 as isize) as usize];
                        wg += a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
                    }
                    dw[(co * layer.cin + ci) * 9 + ky * 3 + kx] += wg;
                    if let Some(dinp) = dinp.as_mut() {
                        let w = layer.w[(co * layer.cin + ci) * 9 + ky * 3 + kx];
                        let dch = &mut dinp.data[ci * ch..(ci + 1) * ch];
                        for y in y0..y1 {
                            let yin = (y as isize + dy) as usize;
                            let ob = y * side;
                            let i0 = (yin * side) as isize + dx;
                            let src = &dpre_ch[ob + x0..ob + x1];
                            let dst =
                                &mut dch[(i0 + x0 as isize) as usize..(i0 + x1 as isize) as usize];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += w * s;
                            }
                        }
                    }
                }
            }
        }
    }
    dinp
}

/// Mean weighted cross-entropy over a batch plus its parameter gradients
/// (samples processed in order, so the reduction is deterministic).
pub fn gradients(
    model: &Model,
    batch: &[(&[f64], usize)],
    class_weights: &[f64; NUM_CLASSES],
) -> Result<(Gradients, f64), LearnError> {
    assert!(!batch.is_empty(), "gradient of an empty batch");
    let mut grads = Gradients::zeros_like(model);
    let mut loss_sum = 0.0;
    for &(input, label) in batch {
        let acts = forward(model, input)?;
        let probs = softmax(&acts.logits);
        let w = class_weights[label];
        loss_sum += -w * probs[label].max(1e-300).ln();
        let dlogits: Vec<f64> = (0..NUM_CLASSES)
            .map(|c| w * (probs[c] - if c == label { 1.0 } else { 0.0 }))
            .collect();
        backward_into(model, &acts, &dlogits, &mut grads);
    }
    let inv = 1.0 / batch.len() as f64;
    grads.scale(inv);
    Ok((grads, loss_sum * inv))
}

/// Accumulate d(loss)/d(params) for one sample given d(loss)/d(logits).
fn backward_into(model: &Model, acts: &Activations, dlogits: &[f64], grads: &mut Gradients) {
    let nslots = grads.buffers.len();
    let feat = acts.features();
    let area = (feat.height * feat.width) as f64;
    let ch = feat.height * feat.width;

    // Head: fc and GAP.
    let mut dgap = vec![0.0; model.fc.inp];
    {
        let (fcw_buf, fcb_buf) = {
            let (a, b) = grads.buffers.split_at_mut(nslots - 1);
            (&mut a[nslots - 2], &mut b[0])
        };
        for o in 0..model.fc.outp {
            fcb_buf[o] += dlogits[o];
            for i in 0..model.fc.inp {
                fcw_buf[o * model.fc.inp + i] += dlogits[o] * acts.gap[i];
                dgap[i] += model.fc.w[o * model.fc.inp + i] * dlogits[o];
            }
        }
    }
    let mut dpooled = Tensor::zeros(feat.channels, feat.height, feat.width);
    for c in 0..feat.channels {
        let g = dgap[c] / area;
        dpooled.data[c * ch..(c + 1) * ch].fill(g);
    }

    // Stages, last to first.
    let mut dcurrent = dpooled;
    for s in (0..model.conv.len()).rev() {
        let inp = if s == 0 {
            &acts.input
        } else {
            &acts.stages[s - 1].pooled
        };
        let (dw_buf, db_buf) = {
            let (a, b) = grads.buffers.split_at_mut(2 * s + 1);
            (&mut a[2 * s], &mut b[0])
        };
        let dinp = stage_backward(
            &model.conv[s],
            &acts.stages[s],
            inp,
            &dcurrent,
            dw_buf,
            db_buf,
            s > 0,
        );
        if let Some(d) = dinp {
            dcurrent = d;
        }
    }
}

// ---------------------------------------------------------------------------
// Data views
// ---------------------------------------------------------------------------

/// One labeled classifier sample.
#[derive(Clone, Debug)]
pub struct Sample {
    pub input: Vec<f64>,
    pub label: usize,
    pub group: String,
    pub scene_index: u32,
}

/// An ordered set of samples from one split.
#[derive(Clone, Debug)]
pub struct DataView {
    pub samples: Vec<Sample>,
    pub split: Split,
}

impl DataView {
    pub fn from_items(items: &[ViewItem], split: Split) -> Self {
        let samples = items
            .iter()
            .map(|item| Sample {
                input: input_from_mask(&item.mask),
                label: if item.stable {
                    CLASS_STABLE
                } else {
                    CLASS_UNSTABLE
                },
                group: item.group.to_string(),
                scene_index: item.scene_index,
            })
            .collect();
        DataView { samples, split }
    }

    /// Unique group names, sorted.
    pub fn group_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.samples.iter().map(|s| s.group.clone()).collect();
        names.sort();
        names.dedup();
        names
    }

    /// Inverse-frequency class weights: total / (classes * count_c), so
    /// both classes contribute equally to the loss regardless of balance.
    pub fn class_weights(&self) -> [f64; NUM_CLASSES] {
        let mut counts = [0usize; NUM_CLASSES];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        let total = self.samples.len() as f64;
        let mut w = [0.0; NUM_CLASSES];
        for c in 0..NUM_CLASSES {
            w[c] = if counts[c] == 0 {
                0.0
            } else {
                total / (NUM_CLASSES as f64 * counts[c] as f64)
            };
        }
        w
    }
}

/// Load a split of the given groups from a built dataset directory.
pub fn dataset_view(
    root: &Path,
    manifest: &Manifest,
    groups: &[GroupSpec],
    split: Split,
) -> Result<DataView, LearnError> {
    let items = dataset::load_split(root, manifest, groups, split)?;
    Ok(DataView::from_items(&items, split))
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Declared training constants (none come from prior work).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Total parameter updates. A step budget (rather than an epoch count)
    /// keeps the optimization length — and the wall-clock cost — independent
    /// of how large the training pool is; epochs are derived from it. The
    /// default is sized so the optimizer escapes the slow symmetric-init
    /// plateau with margin.
    pub steps: usize,
    pub seed: u64,
    /// Multiplier on the fan-in initialization scale.
    pub init_scale: f64,
    /// Learning-rate multiplier applied from two thirds of the step budget.
    pub decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 32,
            steps: 2400,
            seed: 42,
            init_scale: 1.0,
            decay: 0.2,
        }
    }
}

/// Outcome bookkeeping of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub epochs: usize,
    pub final_mean_loss: f64,
    pub final_train_accuracy_pct: f64,
}

/// Train a fresh model on the view. Deterministic for fixed (data, cfg):
/// initialization, epoch shuffles and batch order all derive from the seed.
pub fn train(view: &DataView, cfg: &TrainConfig) -> Result<(Model, TrainSummary), LearnError> {
    if view.samples.is_empty() {
        return Err(LearnError::EmptyView);
    }
    let mut model = Model::new(ModelPlan::default(), cfg.seed, cfg.init_scale);
    let weights = view.class_weights();
    let mut velocity: Vec<Vec<f64>> = model
        .slots()
        .iter()
        .map(|(_, s)| vec![0.0; s.len()])
        .collect();
    let decay_step = cfg.steps * 2 / 3;
    let mut indices: Vec<usize> = (0..view.samples.len()).collect();
    let mut last_loss = 0.0;
    let mut step = 0usize;
    let mut epochs_run = 0usize;
    'outer: for epoch in 0.. {
        if step >= cfg.steps {
            break;
        }
        epochs_run = epoch + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::child(cfg.seed, &[0x5c0f, epoch as u64]));
        indices.shuffle(&mut rng);
        for (batch_no, chunk) in indices.chunks(cfg.batch_size).enumerate() {
            if step >= cfg.steps {
                break 'outer;
            }
            let lr = if step >= decay_step {
                cfg.learning_rate * cfg.decay
            } else {
                cfg.learning_rate
            };
            let batch: Vec<(&[f64], usize)> = chunk
                .iter()
                .map(|&i| (view.samples[i].input.as_slice(), view.samples[i].label))
                .collect();
            let (grads, loss) = gradients(&model, &batch, &weights)?;
            if !loss.is_finite() {
                return Err(LearnError::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                });
            }
            last_loss = loss;
            for (slot, (v, g)) in model
                .slots_mut()
                .into_iter()
                .zip(velocity.iter_mut().zip(&grads.buffers))
            {
                for i in 0..slot.len() {
                    v[i] = cfg.momentum * v[i] - lr * g[i];
                    slot[i] += v[i];
                }
            }
            step += 1;
        }
    }
    let mut correct = 0usize;
    for s in &view.samples {
        let acts = forward(&model, &s.input)?;
        let class = if acts.logits[CLASS_STABLE] > acts.logits[CLASS_UNSTABLE] {
            CLASS_STABLE
        } else {
            CLASS_UNSTABLE
        };
        if class == s.label {
            correct += 1;
        }
    }
    model.trained_on = Some(Provenance {
        groups: view.group_names(),
        split: view.split,
    });
    let summary = TrainSummary {
        steps: step,
        epochs: epochs_run,
        final_mean_loss: last_loss,
        final_train_accuracy_pct: round1(100.0 * correct as f64 / view.samples.len() as f64),
    };
    Ok((model, summary))
}

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Accuracy and confusion counts for one group (or the whole view).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupEval {
    pub group: String,
    pub n: u32,
    /// Percent, rounded to 0.1.
    pub accuracy_pct: f64,
    /// confusion[actual][predicted], classes (unstable, stable).
    pub confusion: [[u32; NUM_CLASSES]; NUM_CLASSES],
    pub recall_unstable: Option<f64>,
    pub recall_stable: Option<f64>,
}

impl GroupEval {
    fn from_confusion(group: String, confusion: [[u32; NUM_CLASSES]; NUM_CLASSES]) -> Self {
        let n: u32 = confusion.iter().flatten().sum();
        let correct = confusion[0][0] + confusion[1][1];
        let recall = |c: usize| {
            let total: u32 = confusion[c].iter().sum();
            (total > 0).then(|| confusion[c][c] as f64 / total as f64)
        };
        GroupEval {
            group,
            n,
            accuracy_pct: if n > 0 {
                round1(100.0 * correct as f64 / n as f64)
            } else {
                0.0
            },
            confusion,
            recall_unstable: recall(CLASS_UNSTABLE),
            recall_stable: recall(CLASS_STABLE),
        }
    }
}

/// Per-group accuracy table plus the overall tally.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub eval_split: Split,
    pub train_groups: Vec<String>,
    pub entries: Vec<GroupEval>,
    pub overall: GroupEval,
}

/// Evaluate on a view, refusing any view that structurally overlaps the
/// training data (same split and a shared group).
pub fn evaluate(model: &Model, view: &DataView) -> Result<EvalReport, LearnError> {
    if view.samples.is_empty() {
        return Err(LearnError::EmptyView);
    }
    let train_groups = if let Some(prov) = &model.trained_on {
        if prov.split == view.split {
            let shared: Vec<String> = view
                .group_names()
                .into_iter()
                .filter(|g| prov.groups.contains(g))
                .collect();
            if !shared.is_empty() {
                return Err(LearnError::Leakage {
                    groups: shared,
                    split: prov.split,
                });
            }
        }
        prov.groups.clone()
    } else {
        Vec::new()
    };

    let groups = view.group_names();
    let mut confusion: Vec<[[u32; NUM_CLASSES]; NUM_CLASSES]> =
        vec![[[0; NUM_CLASSES]; NUM_CLASSES]; groups.len()];
    for s in &view.samples {
        let acts = forward(model, &s.input)?;
        let class = if acts.logits[CLASS_STABLE] > acts.logits[CLASS_UNSTABLE] {
            CLASS_STABLE
        } else {
            CLASS_UNSTABLE
        };
        let gi = groups
            .iter()
            .position(|g| g == &s.group)
            .expect("sample group listed");
        confusion[gi][s.label][class] += 1;
    }
    let entries: Vec<GroupEval> = groups
        .iter()
        .zip(&confusion)
        .map(|(g, c)| GroupEval::from_confusion(g.clone(), *c))
        .collect();
    let mut total = [[0u32; NUM_CLASSES]; NUM_CLASSES];
    for c in &confusion {
        for a in 0..NUM_CLASSES {
            for p in 0..NUM_CLASSES {
                total[a][p] += c[a][p];
            }
        }
    }
    Ok(EvalReport {
        eval_split: view.split,
        train_groups,
        entries,
        overall: GroupEval::from_confusion("all".to_string(), total),
    })
}

// ---------------------------------------------------------------------------
// Class activation maps
// ---------------------------------------------------------------------------

/// CAM for one class: the native feature-resolution grid plus a bilinear
/// upsampling to the input resolution. mean(grid) == logit - bias exactly.
#[derive(Clone, Debug)]
pub struct Cam {
    pub class: usize,
    pub side: usize,
    pub grid: Vec<f64>,
    pub upsampled_side: usize,
    pub upsampled: Vec<f64>,
    pub logit: f64,
    pub bias: f64,
}

/// Compute the class activation map CAM_c(x, y) = sum_k w_{c,k} F_k(x, y).
pub fn cam(model: &Model, input: &[f64], class: usize) -> Result<Cam, LearnError> {
    assert!(class < NUM_CLASSES, "class index out of range");
    let acts = forward(model, input)?;
    let feat = acts.features();
    let side = feat.height;
    let ch = side * side;
    let mut grid = vec![0.0; ch];
    for k in 0..feat.channels {
        let w = model.fc.w[class * model.fc.inp + k];
        for (g, f) in grid.iter_mut().zip(&feat.data[k * ch..(k + 1) * ch]) {
            *g += w * f;
        }
    }
    let factor = model.plan.input / side;
    let upsampled = upsample_bilinear(&grid, side, factor);
    Ok(Cam {
        class,
        side,
        grid,
        upsampled_side: model.plan.input,
        upsampled,
        logit: acts.logits[class],
        bias: model.fc.b[class],
    })
}

/// Bilinear upsampling by an integer factor (half-pixel centers, edges
/// clamped).
pub fn upsample_bilinear(grid: &[f64], side: usize, factor: usize) -> Vec<f64> {
    let out_side = side * factor;
    let mut out = vec![0.0; out_side * out_side];
    let f = factor as f64;
    for oy in 0..out_side {
        let sy = ((oy as f64 + 0.5) / f - 0.5).clamp(0.0, (side - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(side - 1);
        let ty = sy - y0 as f64;
        for ox in 0..out_side {
            let sx = ((ox as f64 + 0.5) / f - 0.5).clamp(0.0, (side - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(side - 1);
            let tx = sx - x0 as f64;
            let v00 = grid[y0 * side + x0];
            let v01 = grid[y0 * side + x1];
            let v10 = grid[y1 * side + x0];
            let v11 = grid[y1 * side + x1];
            out[oy * out_side + ox] = v00 * (1.0 - ty) * (1.0 - tx)
                + v01 * (1.0 - ty) * tx
                + v10 * ty * (1.0 - tx)
                + v11 * ty * tx;
        }
    }
    out
}

/// Pearson correlation; None when either side has (near-)zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 1e-12 || vb <= 1e-12 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

/// Per-scene CAM-vs-displacement agreement on collapse scenes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CamSceneStat {
    pub group: String,
    pub scene_index: u32,
    pub r: f64,
}

/// Summary over the unstable-predicted collapse scenes of a test split.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CamSummary {
    pub scenes: Vec<CamSceneStat>,
    pub mean_r: f64,
    pub fraction_positive: f64,
}

/// For every test-split scene that really collapsed and that the model
/// also predicts unstable, correlate CAM(unstable) with the archived
/// displacement heat-map.
pub fn cam_correlation_summary(
    root: &Path,
    manifest: &Manifest,
    model: &Model,
    groups: &[GroupSpec],
) -> Result<CamSummary, LearnError> {
    let factor = manifest.header.archive_resolution / manifest.header.train_resolution;
    let mut scenes = Vec::new();
    for record in dataset::split_view(manifest, groups, Split::Test)? {
        if record.stable {
            continue;
        }
        let mask_path = record.mask_file(root);
        let archived = imaging::load_mask(&mask_path).map_err(|e| io_err(&mask_path, e))?;
        let mask = imaging::downsample_majority(&archived, factor);
        let pred = predict(model, &mask)?;
        if pred.class != CLASS_UNSTABLE {
            continue;
        }
        let map = cam(model, &input_from_mask(&mask), CLASS_UNSTABLE)?;
        let heat_path = record.heat_file(root);
        let heat = imaging::load_heatmap(&heat_path).map_err(|e| io_err(&heat_path, e))?;
        if let Some(r) = pearson(&map.upsampled, &heat.values) {
            scenes.push(CamSceneStat {
                group: record.group_id.clone(),
                scene_index: record.scene_index,
                r,
            });
        }
    }
    let n = scenes.len() as f64;
    let mean_r = if scenes.is_empty() {
        0.0
    } else {
        scenes.iter().map(|s| s.r).sum::<f64>() / n
    };
    let fraction_positive = if scenes.is_empty() {
        0.0
    } else {
        scenes.iter().filter(|s| s.r > 0.0).count() as f64 / n
    };
    Ok(CamSummary {
        scenes,
        mean_r,
        fraction_positive,
    })
}

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

/// The three evaluation designs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    /// One model per group, tested on that group's held-out half.
    Intra,
    /// Simple (4B, 6B) vs complex (10B, 14B), both directions.
    Cross,
    /// One model on the union of all training halves, tested per group.
    Generalization,
}

impl std::str::FromStr for Design {
    type Err = LearnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "intra" => Ok(Design::Intra),
            "cross" => Ok(Design::Cross),
            "generalization" => Ok(Design::Generalization),
            other => Err(LearnError::UnknownDesign(other.to_string())),
        }
    }
}

impl std::fmt::Display for Design {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Design::Intra => "intra",
            Design::Cross => "cross",
            Design::Generalization => "generalization",
        })
    }
}

/// The trained models and reports one design run produces.
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub design: Design,
    /// (model label, report); labels are group names for intra, direction
    /// names for cross, "all" for generalization.
    pub reports: Vec<(String, EvalReport)>,
    pub models: Vec<(String, Model)>,
}

impl ExperimentOutcome {
    /// CSV rendering mirroring the per-design table layout.
    pub fn csv(&self) -> String {
        let mut out = String::new();
        match self.design {
            Design::Intra | Design::Generalization => {
                out.push_str("group,n,accuracy_pct\n");
                for (_, report) in &self.reports {
                    for e in &report.entries {
                        out.push_str(&format!("{},{},{:.1}\n", e.group, e.n, e.accuracy_pct));
                    }
                }
            }
            Design::Cross => {
                out.push_str("direction,n,accuracy_pct\n");
                for (label, report) in &self.reports {
                    out.push_str(&format!(
                        "{label},{},{:.1}\n",
                        report.overall.n, report.overall.accuracy_pct
                    ));
                }
            }
        }
        out
    }
}

/// Run one experiment design against a built dataset.
pub fn run_experiment(
    root: &Path,
    manifest: &Manifest,
    design: Design,
    cfg: &TrainConfig,
) -> Result<ExperimentOutcome, LearnError> {
    let all_groups: Vec<GroupSpec> = manifest
        .header
        .groups
        .iter()
        .map(|g| g.parse::<GroupSpec>())
        .collect::<Result<_, _>>()
        .map_err(DatasetError::from)?;
    let mut reports = Vec::new();
    let mut models = Vec::new();
    match design {
        Design::Intra => {
            for group in &all_groups {
                let train_view = dataset_view(root, manifest, &[*group], Split::Train)?;
                let (model, _) = train(&train_view, cfg)?;
                let test_view = dataset_view(root, manifest, &[*group], Split::Test)?;
                let report = evaluate(&model, &test_view)?;
                reports.push((group.to_string(), report));
                models.push((group.to_string(), model));
            }
        }
        Design::Cross => {
            let simple = dataset::simple_groups();
            let complex = dataset::complex_groups();
            for (label, from, to) in [
                ("simple_to_complex", &simple, &complex),
                ("complex_to_simple", &complex, &simple),
            ] {
                let train_view = dataset_view(root, manifest, from, Split::Train)?;
                let (model, _) = train(&train_view, cfg)?;
                let test_view = dataset_view(root, manifest, to, Split::Test)?;
                let report = evaluate(&model, &test_view)?;
                reports.push((label.to_string(), report));
                models.push((label.to_string(), model));
            }
        }
        Design::Generalization => {
            let train_view = dataset_view(root, manifest, &all_groups, Split::Train)?;
            let (model, _) = train(&train_view, cfg)?;
            let test_view = dataset_view(root, manifest, &all_groups, Split::Test)?;
            let report = evaluate(&model, &test_view)?;
            reports.push(("all".to_string(), report));
            models.push(("all".to_string(), model));
        }
    }
    Ok(ExperimentOutcome {
        design,
        reports,
        models,
    })
}

/// No-leakage control: train on the given groups' training half with labels
/// deterministically shuffled, then report test accuracy. Shuffling keeps
/// the label marginals, so chance level equals the view's class balance;
/// pass a set of groups whose pooled labels are near 50/50 (the full corpus
/// is) for the statistic to sit near 50 when the pipeline is leak-free.
pub fn permutation_control(
    root: &Path,
    manifest: &Manifest,
    groups: &[GroupSpec],
    cfg: &TrainConfig,
) -> Result<f64, LearnError> {
    let mut view = dataset_view(root, manifest, groups, Split::Train)?;
    let mut labels: Vec<usize> = view.samples.iter().map(|s| s.label).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::tagged(cfg.seed, "label-permutation"));
    labels.shuffle(&mut rng);
    for (s, l) in view.samples.iter_mut().zip(labels) {
        s.label = l;
    }
    let (model, _) = train(&view, cfg)?;
    let test_view = dataset_view(root, manifest, groups, Split::Test)?;
    let report = evaluate(&model, &test_view)?;
    Ok(report.overall.accuracy_pct)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"SLCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Serialize the model: magic, version, plan, provenance, then every
/// parameter slot in `Model::slots` order as little-endian f32.
pub fn write_model<W: Write>(model: &Model, out: &mut W) -> io::Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(model.plan.input as u32).to_le_bytes())?;
    for c in model.plan.channels {
        out.write_all(&(c as u32).to_le_bytes())?;
    }
    out.write_all(&(NUM_CLASSES as u32).to_le_bytes())?;
    match &model.trained_on {
        None => out.write_all(&[0u8])?,
        Some(prov) => {
            out.write_all(&[1u8])?;
            out.write_all(&[match prov.split {
                Split::Train => 0u8,
                Split::Test => 1u8,
            }])?;
            out.write_all(&(prov.groups.len() as u32).to_le_bytes())?;
            for g in &prov.groups {
                let bytes = g.as_bytes();
                out.write_all(&(bytes.len() as u32).to_le_bytes())?;
                out.write_all(bytes)?;
            }
        }
    }
    for (_, slot) in model.slots() {
        for &v in slot {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Parse a checkpoint written by `write_model`.
pub fn read_model<R: Read>(input: &mut R) -> Result<Model, LearnError> {
    fn bad(msg: impl Into<String>) -> LearnError {
        LearnError::BadCheckpoint(msg.into())
    }
    fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N], LearnError> {
        let mut buf = [0u8; N];
        r.read_exact(&mut buf)
            .map_err(|e| bad(format!("truncated checkpoint: {e}")))?;
        Ok(buf)
    }
    fn read_u32<R: Read>(r: &mut R) -> Result<u32, LearnError> {
        Ok(u32::from_le_bytes(read_exact::<R, 4>(r)?))
    }

    let magic = read_exact::<R, 4>(input)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad(format!("wrong magic bytes {magic:?}")));
    }
    let version = read_u32(input)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let side = read_u32(input)? as usize;
    let mut channels = [0usize; 3];
    for c in &mut channels {
        *c = read_u32(input)? as usize;
    }
    let classes = read_u32(input)? as usize;
    if classes != NUM_CLASSES {
        return Err(bad(format!(
            "checkpoint has {classes} classes, expected {NUM_CLASSES}"
        )));
    }
    if !side.is_multiple_of(8) || side < 8 || channels.contains(&0) {
        return Err(bad("invalid layer plan".to_string()));
    }
    let plan = ModelPlan {
        input: side,
        channels,
    };
    let trained_on = match read_exact::<R, 1>(input)?[0] {
        0 => None,
        1 => {
            let split = match read_exact::<R, 1>(input)?[0] {
                0 => Split::Train,
                1 => Split::Test,
                other => return Err(bad(format!("bad split tag {other}"))),
            };
            let ngroups = read_u32(input)? as usize;
            if ngroups > 1024 {
                return Err(bad("implausible group count".to_string()));
            }
            let mut groups = Vec::with_capacity(ngroups);
            for _ in 0..ngroups {
                let len = read_u32(input)? as usize;
                if len > 4096 {
                    return Err(bad("implausible group name length".to_string()));
                }
                let mut buf = vec![0u8; len];
                input
                    .read_exact(&mut buf)
                    .map_err(|e| bad(format!("truncated checkpoint: {e}")))?;
                groups.push(
                    String::from_utf8(buf).map_err(|_| bad("group name not UTF-8".to_string()))?,
                );
            }
            Some(Provenance { groups, split })
        }
        other => return Err(bad(format!("bad provenance flag {other}"))),
    };

    let mut model = Model::new(plan, 0, 1.0);
    model.trained_on = trained_on;
    for slot in model.slots_mut() {
        for v in slot.iter_mut() {
            *v = f32::from_le_bytes(read_exact::<R, 4>(input)?) as f64;
        }
    }
    let mut extra = [0u8; 1];
    match input.read(&mut extra) {
        Ok(0) => Ok(model),
        Ok(_) => Err(bad("trailing bytes after parameters".to_string())),
        Err(e) => Err(bad(format!("read error at end: {e}"))),
    }
}

pub fn save_model(path: &Path, model: &Model) -> Result<(), LearnError> {
    let mut file = io::BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    write_model(model, &mut file).map_err(|e| io_err(path, e))?;
    file.flush().map_err(|e| io_err(path, e))
}

pub fn load_model(path: &Path) -> Result<Model, LearnError> {
    let mut file = io::BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
    read_model(&mut file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn random_input(side: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..side * side)
            .map(|_| rng.gen_range(0..2) as f64)
            .collect()
    }

    fn reduced_plan() -> ModelPlan {
        ModelPlan {
            input: 8,
            channels: [2, 3, 4],
        }
    }

    #[test]
    fn zeroed_head_gives_zero_logits_and_half_probability() {
        let mut model = Model::new(ModelPlan::default(), 1, 1.0);
        model.fc.w.iter_mut().for_each(|w| *w = 0.0);
        model.fc.b.iter_mut().for_each(|b| *b = 0.0);
        let acts = forward(&model, &random_input(64, 2)).unwrap();
        assert_eq!(acts.logits, vec![0.0, 0.0]);
        let probs = softmax(&acts.logits);
        assert!((probs[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_input_with_zero_biases_gives_zero_features() {
        let model = Model::new(ModelPlan::default(), 3, 1.0); // biases init to zero
        let acts = forward(&model, &vec![0.0; 64 * 64]).unwrap();
        assert!(acts.features().data.iter().all(|&v| v == 0.0));
        assert!(acts.gap.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn logits_match_manual_gap_recomputation() {
        let model = Model::new(ModelPlan::default(), 4, 1.0);
        let acts = forward(&model, &random_input(64, 5)).unwrap();
        let feat = acts.features();
        let ch = feat.height * feat.width;
        for c in 0..NUM_CLASSES {
            let mut manual = model.fc.b[c];
            for k in 0..feat.channels {
                let gap = feat.data[k * ch..(k + 1) * ch].iter().sum::<f64>() / ch as f64;
                manual += model.fc.w[c * model.fc.inp + k] * gap;
            }
            assert!((manual - acts.logits[c]).abs() < 1e-9);
        }
    }

    #[test]
    fn finite_differences_confirm_every_parameter_gradient() {
        // Central differences only agree with backprop at differentiable
        // points, so the check uses smooth inputs and nonzero biases: binary
        // inputs with zero biases park whole patches exactly on the ReLU
        // kink, where any subgradient choice disagrees with the two-sided
        // difference no matter how small the step.
        let mut model = Model::new(reduced_plan(), 13, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(13 ^ 0xb1a5);
        for layer in &mut model.conv {
            for b in layer.b.iter_mut() {
                *b = rng.gen_range(-0.3..0.3);
            }
        }
        for b in model.fc.b.iter_mut() {
            *b = rng.gen_range(-0.3..0.3);
        }
        let inputs: Vec<Vec<f64>> = (0..4)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(200 + i);
                (0..64).map(|_| rng.gen_range(0.0..1.0)).collect()
            })
            .collect();
        let batch: Vec<(&[f64], usize)> = inputs
            .iter()
            .enumerate()
            .map(|(i, input)| (input.as_slice(), i % 2))
            .collect();
        let weights = [1.0, 1.0];
        let (grads, _) = gradients(&model, &batch, &weights).unwrap();

        let loss_of = |m: &Model| {
            let (_, loss) = gradients(m, &batch, &weights).unwrap();
            loss
        };
        let h = 1e-3;
        let mut checked = 0usize;
        for (slot_idx, (name, slot)) in model.slots().iter().enumerate() {
            for i in 0..slot.len() {
                let mut plus = model.clone();
                plus.slots_mut()[slot_idx][i] += h;
                let mut minus = model.clone();
                minus.slots_mut()[slot_idx][i] -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let an = grads.buffers[slot_idx][i];
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    ((an - fd) / denom).abs() < 1e-3,
                    "{name}[{i}]: analytic {an} vs fd {fd}"
                );
                checked += 1;
            }
        }
        assert_eq!(checked, reduced_plan().param_count());
    }

    #[test]
    fn duplicated_batch_leaves_gradients_unchanged() {
        let model = Model::new(reduced_plan(), 13, 1.0);
        let a = random_input(8, 21);
        let b = random_input(8, 22);
        let weights = [1.3, 0.8];
        let single: Vec<(&[f64], usize)> = vec![(a.as_slice(), 0), (b.as_slice(), 1)];
        let doubled: Vec<(&[f64], usize)> = vec![
            (a.as_slice(), 0),
            (b.as_slice(), 1),
            (a.as_slice(), 0),
            (b.as_slice(), 1),
        ];
        let (g1, l1) = gradients(&model, &single, &weights).unwrap();
        let (g2, l2) = gradients(&model, &doubled, &weights).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (b1, b2) in g1.buffers.iter().zip(&g2.buffers) {
            for (x, y) in b1.iter().zip(b2) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn saturated_correct_predictions_have_vanishing_gradient() {
        let mut model = Model::new(reduced_plan(), 17, 1.0);
        model.fc.w.iter_mut().for_each(|w| *w = 0.0);
        model.fc.b = vec![40.0, -40.0]; // hugely confident "unstable"
        let input = random_input(8, 31);
        let batch: Vec<(&[f64], usize)> = vec![(input.as_slice(), CLASS_UNSTABLE)];
        let (grads, loss) = gradients(&model, &batch, &[1.0, 1.0]).unwrap();
        assert!(loss < 1e-6);
        let norm: f64 = grads
            .buffers
            .iter()
            .flatten()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        assert!(norm < 1e-6, "gradient norm {norm}");
    }

    fn synthetic_view(n: usize, split: Split) -> DataView {
        let samples = (0..n)
            .map(|i| Sample {
                input: random_input(64, 1000 + i as u64),
                label: i % 2,
                group: "4B-2D-Uni".to_string(),
                scene_index: i as u32,
            })
            .collect();
        DataView { samples, split }
    }

    #[test]
    fn same_seed_trains_identical_models() {
        let view = synthetic_view(12, Split::Train);
        let cfg = TrainConfig {
            steps: 9,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let (a, _) = train(&view, &cfg).unwrap();
        let (b, _) = train(&view, &cfg).unwrap();
        for ((_, sa), (_, sb)) in a.slots().iter().zip(b.slots().iter()) {
            assert_eq!(sa, sb, "parameters must match bit for bit");
        }
    }

    #[test]
    fn softmax_properties_hold() {
        let p = softmax(&[0.3, -1.2]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let shifted = softmax(&[0.3 + 5.0, -1.2 + 5.0]);
        assert!((p[0] - shifted[0]).abs() < 1e-12);
        let even = softmax(&[0.0, 0.0]);
        assert!((even[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn class_weights_are_inverse_frequency() {
        let mut view = synthetic_view(4, Split::Train);
        view.samples[0].label = CLASS_STABLE;
        view.samples[1].label = CLASS_UNSTABLE;
        view.samples[2].label = CLASS_STABLE;
        view.samples[3].label = CLASS_STABLE;
        let w = view.class_weights();
        assert!((w[CLASS_UNSTABLE] - 2.0).abs() < 1e-12);
        assert!((w[CLASS_STABLE] - 4.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn cam_mean_equals_logit_minus_bias() {
        let model = Model::new(ModelPlan::default(), 23, 1.0);
        let input = random_input(64, 41);
        for class in 0..NUM_CLASSES {
            let map = cam(&model, &input, class).unwrap();
            let mean = map.grid.iter().sum::<f64>() / map.grid.len() as f64;
            assert!(
                (mean - (map.logit - map.bias)).abs() < 1e-6,
                "class {class}: mean {mean} vs logit-bias {}",
                map.logit - map.bias
            );
            assert_eq!(map.upsampled.len(), 64 * 64);
        }
    }

    #[test]
    fn zero_head_weights_give_zero_cam() {
        let mut model = Model::new(ModelPlan::default(), 29, 1.0);
        model.fc.w.iter_mut().for_each(|w| *w = 0.0);
        let map = cam(&model, &random_input(64, 43), CLASS_UNSTABLE).unwrap();
        assert!(map.grid.iter().all(|&v| v == 0.0));
        assert!(map.upsampled.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bilinear_upsample_preserves_constants_and_mean() {
        let grid = vec![0.7; 16];
        let up = upsample_bilinear(&grid, 4, 8);
        assert!(up.iter().all(|&v| (v - 0.7).abs() < 1e-12));
        // Non-constant grids keep their mean under half-pixel alignment
        // (clamped edges replicate symmetrically).
        let grid2: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let up2 = upsample_bilinear(&grid2, 4, 8);
        assert_eq!(up2.len(), 32 * 32);
    }

    #[test]
    fn pearson_detects_sign_and_degeneracy() {
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let b = vec![2.0, 4.0, 6.0, 8.0];
        assert!((pearson(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let c = vec![4.0, 3.0, 2.0, 1.0];
        assert!((pearson(&a, &c).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&a, &[5.0; 4]), None);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_plan_provenance_and_predictions() {
        let view = synthetic_view(8, Split::Train);
        let cfg = TrainConfig {
            steps: 4,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let (model, _) = train(&view, &cfg).unwrap();
        let mut bytes = Vec::new();
        write_model(&model, &mut bytes).unwrap();
        let back = read_model(&mut Cursor::new(bytes)).unwrap();
        assert_eq!(back.plan, model.plan);
        assert_eq!(back.trained_on, model.trained_on);
        for seed in [7u64, 8, 9] {
            let input = random_input(64, seed);
            let la = forward(&model, &input).unwrap().logits;
            let lb = forward(&back, &input).unwrap().logits;
            for (a, b) in la.iter().zip(&lb) {
                assert!(
                    (a - b).abs() < 1e-4 * (1.0 + a.abs()),
                    "f32 quantization drift"
                );
            }
        }
    }

    #[test]
    fn checkpoint_rejects_wrong_magic() {
        let model = Model::new(reduced_plan(), 31, 1.0);
        let mut bytes = Vec::new();
        write_model(&model, &mut bytes).unwrap();
        bytes[0] = b'X';
        let err = read_model(&mut Cursor::new(bytes)).unwrap_err();
        assert!(matches!(err, LearnError::BadCheckpoint(_)));
    }

    #[test]
    fn evaluation_refuses_structural_leakage() {
        let view = synthetic_view(8, Split::Train);
        let cfg = TrainConfig {
            steps: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let (model, _) = train(&view, &cfg).unwrap();
        let err = evaluate(&model, &view).unwrap_err();
        assert!(matches!(err, LearnError::Leakage { .. }));
        let test_view = synthetic_view(8, Split::Test);
        assert!(evaluate(&model, &test_view).is_ok());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let model = Model::new(ModelPlan::default(), 37, 1.0);
        let tiny = Mask::new(32, 32);
        let err = predict(&model, &tiny).unwrap_err();
        assert!(matches!(
            err,
            LearnError::ShapeMismatch {
                expected: 64,
                found: 32
            }
        ));
    }

    #[test]
    fn constant_predictor_accuracy_is_the_class_rate() {
        let mut model = Model::new(ModelPlan::default(), 41, 1.0);
        model.fc.w.iter_mut().for_each(|w| *w = 0.0);
        model.fc.b = vec![0.0, 10.0]; // always "stable"
        let mut view = synthetic_view(10, Split::Test);
        for (i, s) in view.samples.iter_mut().enumerate() {
            s.label = if i < 7 { CLASS_STABLE } else { CLASS_UNSTABLE };
        }
        let report = evaluate(&model, &view).unwrap();
        assert_eq!(report.overall.accuracy_pct, 70.0);
        assert_eq!(report.overall.recall_stable, Some(1.0));
        assert_eq!(report.overall.recall_unstable, Some(0.0));
        assert_eq!(report.entries.len(), 1);
        assert_eq!(report.entries[0].n, 10);
    }

    #[test]
    fn unknown_design_is_rejected() {
        let err = "diagonal".parse::<Design>().unwrap_err();
        assert!(matches!(err, LearnError::UnknownDesign(_)));
        assert_eq!("cross".parse::<Design>().unwrap(), Design::Cross);
    }
}
