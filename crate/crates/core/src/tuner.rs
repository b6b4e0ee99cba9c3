//! Block-wise tuning of rounding offsets `V` and clip scales `α`, `β`.
//!
//! Each step draws a batch of cached block inputs, compares the block's
//! full-precision output with its output under quantize–dequantized
//! weights, and moves the trainables by `lr_t · sign(∇)` (or Adam). The
//! parameters that produced the lowest recorded loss are returned.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::calib::{draw_indices, map_batched, BlockInputCache, CalibSet};
use crate::error::{arg_err, Error, Result};
use crate::model::{BlockWeights, ModelWeights, LINEAR_NAMES};
use crate::optim::{adam_update, signsgd_update, AdamState, Bounds};
use crate::qmodel::QuantizedModel;
use crate::quant::{qdq_tape, quantize, GroupLayout, QuantConfig, Quantized, TunedParams, CLIP_SCALE_MIN};
use crate::tensor::{Scalar, Tensor};

/// Default signed-gradient learning rate.
pub const DEFAULT_LR: f64 = 5e-3;
/// Default Adam learning rate when none is given.
pub const DEFAULT_ADAM_LR: f64 = 1e-2;
pub const DEFAULT_STEPS: usize = 200;
pub const DEFAULT_BATCH_SIZE: usize = 8;
/// Bound on rounding offsets.
pub const V_BOUND: f64 = 0.5;

/// Linearly decayed learning rate `lr0 · (1 − t/T)` for `t ∈ [0, T)`.
pub fn lr_at(t: usize, total: usize, lr0: f64) -> Result<f64> {
    if t >= total {
        return Err(arg_err(format!("step {t} outside schedule of {total} steps")));
    }
    Ok(lr0 * (1.0 - t as f64 / total as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    SignSgd,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::SignSgd => "signsgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "signsgd" | "sign" => Ok(Self::SignSgd),
            "adam" => Ok(Self::Adam),
            _ => Err(arg_err(format!("unknown optimizer `{s}` (signsgd, adam)"))),
        }
    }
}

/// Which trainables move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TuneMode {
    /// `V` only.
    Rounding,
    /// `α`, `β` only.
    Clip,
    #[default]
    Both,
}

impl TuneMode {
    pub fn tunes_rounding(self) -> bool {
        matches!(self, TuneMode::Rounding | TuneMode::Both)
    }

    pub fn tunes_clip(self) -> bool {
        matches!(self, TuneMode::Clip | TuneMode::Both)
    }
}

impl fmt::Display for TuneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TuneMode::Rounding => "rounding",
            TuneMode::Clip => "clip",
            TuneMode::Both => "both",
        })
    }
}

impl FromStr for TuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rounding" => Ok(Self::Rounding),
            "clip" => Ok(Self::Clip),
            "both" => Ok(Self::Both),
            _ => Err(arg_err(format!("unknown tuning mode `{s}` (rounding, clip, both)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneConfig {
    pub steps: usize,
    /// Initial learning rate; `None` picks the optimizer's default.
    pub lr: Option<f64>,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub mode: TuneMode,
    /// Feed block `k` the outputs of the already quantized blocks `< k`.
    pub quantized_input: bool,
    /// Multiplier on the learning rate of `α`, `β`.
    pub clip_lr_scale: f64,
    pub seed: u64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            lr: None,
            batch_size: DEFAULT_BATCH_SIZE,
            optimizer: OptimizerKind::SignSgd,
            mode: TuneMode::Both,
            quantized_input: true,
            clip_lr_scale: 1.0,
            seed: 0,
        }
    }
}

impl TuneConfig {
    pub fn lr0(&self) -> f64 {
        self.lr.unwrap_or(match self.optimizer {
            OptimizerKind::SignSgd => DEFAULT_LR,
            OptimizerKind::Adam => DEFAULT_ADAM_LR,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(arg_err("steps must be ≥ 1"));
        }
        if self.batch_size == 0 {
            return Err(arg_err("batch size must be ≥ 1"));
        }
        let lr = self.lr0();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(arg_err(format!("learning rate must be positive, got {lr}")));
        }
        if !(self.clip_lr_scale > 0.0 && self.clip_lr_scale.is_finite()) {
            return Err(arg_err(format!(
                "clip lr scale must be positive, got {}",
                self.clip_lr_scale
            )));
        }
        Ok(())
    }
}

/// A module whose quantizable weights are tuned against its own output.
pub trait Reconstruct<T: Scalar> {
    /// The weights to quantize, in a fixed order.
    fn quantizable(&self) -> Vec<&Tensor<T>>;

    /// Records the forward pass on `tape`, using `weights` (one handle per
    /// [`Reconstruct::quantizable`] entry) in place of the stored weights.
    fn forward_with(&self, tape: &mut Tape<T>, x: Var, weights: &[Var]) -> Result<Var>;

    /// Plain forward with the stored weights.
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let ws: Vec<Var> = self
            .quantizable()
            .into_iter()
            .map(|w| tape.constant(w.clone()))
            .collect();
        let y = self.forward_with(&mut tape, xv, &ws)?;
        Ok(tape.value(y).clone())
    }
}

impl<T: Scalar> Reconstruct<T> for BlockWeights<T> {
    fn quantizable(&self) -> Vec<&Tensor<T>> {
        self.linears().to_vec()
    }

    fn forward_with(&self, tape: &mut Tape<T>, x: Var, weights: &[Var]) -> Result<Var> {
        let linears: [Var; 6] = weights
            .try_into()
            .map_err(|_| arg_err(format!("a block has 6 linears, got {}", weights.len())))?;
        let vars = self.vars_with_linears(tape, linears);
        crate::model::block_apply(tape, &vars, x, self.n_heads)
    }
}

/// A single bias-free linear layer `y = x · Wᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer<T: Scalar = f32> {
    pub weight: Tensor<T>,
}

impl<T: Scalar> Reconstruct<T> for LinearLayer<T> {
    fn quantizable(&self) -> Vec<&Tensor<T>> {
        vec![&self.weight]
    }

    fn forward_with(&self, tape: &mut Tape<T>, x: Var, weights: &[Var]) -> Result<Var> {
        let &[w] = weights else {
            return Err(arg_err(format!("a linear layer has 1 weight, got {}", weights.len())));
        };
        tape.matmul_t(x, w)
    }
}

/// The lowest-loss trainables seen during tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct BestSnapshot<T: Scalar = f32> {
    /// One entry per quantizable weight.
    pub params: Vec<TunedParams<T>>,
    pub best_loss: f64,
    pub best_step: usize,
}

/// Result of tuning one module.
#[derive(Debug, Clone, PartialEq)]
pub struct TuneOutcome<T: Scalar = f32> {
    pub snapshot: BestSnapshot<T>,
    /// Per-step batch loss, measured before that step's update.
    pub history: Vec<f64>,
    /// Reconstruction loss over the whole cache with round-to-nearest.
    pub rtn_loss: f64,
    /// Reconstruction loss over the whole cache with the snapshot.
    pub tuned_loss: f64,
    /// Optimizer steps after which a trainable left its bounds.
    pub bound_violations: usize,
}

/// Per-block tuning report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub block: usize,
    pub rtn_loss: f64,
    pub best_loss: f64,
    pub best_step: usize,
    pub tuned_loss: f64,
    pub steps: usize,
    pub mode: String,
    pub optimizer: String,
    pub lr0: f64,
}

struct Trainable<T: Scalar> {
    layout: GroupLayout,
    params: TunedParams<T>,
    adam: Option<[AdamState<T>; 3]>,
}

fn v_bounds<T: Scalar>() -> Bounds<T> {
    Bounds::new(-V_BOUND, V_BOUND)
}

fn clip_bounds<T: Scalar>() -> Bounds<T> {
    Bounds::new(CLIP_SCALE_MIN, 1.0)
}

/// Mean reconstruction loss over all cached inputs for fixed trainables.
pub fn reconstruction_loss<T: Scalar, M: Reconstruct<T> + ?Sized>(
    module: &M,
    inputs: &[Tensor<T>],
    targets: &[Tensor<T>],
    qcfg: &QuantConfig,
    params: &[TunedParams<T>],
) -> Result<f64> {
    let weights: Vec<Tensor<T>> = module
        .quantizable()
        .into_iter()
        .zip(params)
        .map(|(w, p)| Ok(quantize(w, qcfg, p)?.dequant))
        .collect::<Result<_>>()?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (xs, ys) in inputs.chunks(16).zip(targets.chunks(16)) {
        let x = Tensor::stack(xs)?;
        let y = Tensor::stack(ys)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let yv = tape.constant(y);
        let ws: Vec<Var> = weights.iter().map(|w| tape.constant(w.clone())).collect();
        let out = module.forward_with(&mut tape, xv, &ws)?;
        let loss = tape.mse_loss(out, yv)?;
        let n = tape.value(yv).numel();
        sum += tape.value(loss).data()[0].as_f64() * n as f64;
        count += n;
    }
    Ok(sum / count.max(1) as f64)
}

/// Tunes the quantization trainables of `module` on `cache`.
pub fn tune_block<T: Scalar, M: Reconstruct<T> + ?Sized>(
    module: &M,
    cache: &BlockInputCache<T>,
    qcfg: &QuantConfig,
    tcfg: &TuneConfig,
) -> Result<TuneOutcome<T>> {
    qcfg.validate()?;
    tcfg.validate()?;
    if cache.is_empty() {
        return Err(Error::Data("empty block input cache".into()));
    }
    if module.quantizable().iter().any(|w| !w.all_finite()) {
        return Err(Error::Data(format!(
            "block {} has non-finite weights",
            cache.block_idx
        )));
    }
    let targets = map_batched(&cache.inputs, |x| module.forward(x))?;
    let batch_size = tcfg.batch_size.min(cache.len());
    let lr0 = tcfg.lr0();
    let mode = tcfg.mode;

    let mut trainables: Vec<Trainable<T>> = module
        .quantizable()
        .into_iter()
        .map(|w| {
            let layout = GroupLayout::new(w.shape(), qcfg)?;
            let params = TunedParams::identity(&layout);
            let adam = (tcfg.optimizer == OptimizerKind::Adam).then(|| {
                [
                    AdamState::new(params.v.numel()),
                    AdamState::new(params.alpha.numel()),
                    AdamState::new(params.beta.numel()),
                ]
            });
            Ok(Trainable { layout, params, adam })
        })
        .collect::<Result<_>>()?;
    let rtn_params: Vec<TunedParams<T>> = trainables.iter().map(|t| t.params.clone()).collect();

    let mut best = BestSnapshot {
        params: rtn_params.clone(),
        best_loss: f64::INFINITY,
        best_step: 0,
    };
    let mut history = Vec::with_capacity(tcfg.steps);
    let mut bound_violations = 0;

    for step in 0..tcfg.steps {
        let idx = draw_indices(cache.len(), batch_size, step, tcfg.seed)?;
        let x = cache.gather(&idx)?;
        let y = Tensor::stack(&idx.iter().map(|&i| targets[i].clone()).collect::<Vec<_>>())?;

        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let yv = tape.constant(y);
        let mut handles = Vec::with_capacity(trainables.len());
        let mut qweights = Vec::with_capacity(trainables.len());
        for (w, t) in module.quantizable().into_iter().zip(&trainables) {
            let v = if mode.tunes_rounding() {
                tape.leaf(t.params.v.clone())
            } else {
                tape.constant(t.params.v.clone())
            };
            let (a, b) = if mode.tunes_clip() {
                (tape.leaf(t.params.alpha.clone()), tape.leaf(t.params.beta.clone()))
            } else {
                (
                    tape.constant(t.params.alpha.clone()),
                    tape.constant(t.params.beta.clone()),
                )
            };
            qweights.push(qdq_tape(&mut tape, w, qcfg, v, a, b)?);
            handles.push((v, a, b));
        }
        let out = module.forward_with(&mut tape, xv, &qweights)?;
        let loss = tape.mse_loss(out, yv)?;
        let lv = tape.value(loss).data()[0].as_f64();
        if !lv.is_finite() {
            return Err(Error::NonFinite {
                block: cache.block_idx,
                step,
                loss: lv,
            });
        }
        history.push(lv);
        if lv < best.best_loss {
            best = BestSnapshot {
                params: trainables.iter().map(|t| t.params.clone()).collect(),
                best_loss: lv,
                best_step: step,
            };
        }

        let grads = tape.backward(loss)?;
        let lr = lr_at(step, tcfg.steps, lr0)?;
        let lr_v = T::from_f64_lossy(lr);
        let lr_clip = T::from_f64_lossy(lr * tcfg.clip_lr_scale);
        for (t, &(v, a, b)) in trainables.iter_mut().zip(&handles) {
            if mode.tunes_rounding() {
                let g = grads.get_or_zeros(v, &t.params.v);
                t.params.v = step_param(&t.params.v, &g, lr_v, v_bounds(), t.adam.as_mut().map(|s| &mut s[0]))?;
            }
            if mode.tunes_clip() {
                let ga = grads.get_or_zeros(a, &t.params.alpha);
                let gb = grads.get_or_zeros(b, &t.params.beta);
                t.params.alpha = step_param(&t.params.alpha, &ga, lr_clip, clip_bounds(), t.adam.as_mut().map(|s| &mut s[1]))?;
                t.params.beta = step_param(&t.params.beta, &gb, lr_clip, clip_bounds(), t.adam.as_mut().map(|s| &mut s[2]))?;
            }
            if !params_in_bounds(&t.params) {
                bound_violations += 1;
            }
        }
    }

    let rtn_loss = reconstruction_loss(module, &cache.inputs, &targets, qcfg, &rtn_params)?;
    let tuned_loss = reconstruction_loss(module, &cache.inputs, &targets, qcfg, &best.params)?;
    debug_assert!(trainables.iter().all(|t| t.params.check(&t.layout).is_ok()));
    Ok(TuneOutcome {
        snapshot: best,
        history,
        rtn_loss,
        tuned_loss,
        bound_violations,
    })
}

fn step_param<T: Scalar>(
    p: &Tensor<T>,
    g: &Tensor<T>,
    lr: T,
    bounds: Bounds<T>,
    adam: Option<&mut AdamState<T>>,
) -> Result<Tensor<T>> {
    let mut data = p.data().to_vec();
    match adam {
        Some(state) => adam_update(&mut data, g.data(), state, lr, bounds),
        None => signsgd_update(&mut data, g.data(), lr, bounds),
    }
    Tensor::new(p.shape().to_vec(), data)
}

/// `V ∈ [−0.5, 0.5]`, `α, β ∈ [1e-3, 1]`.
pub fn params_in_bounds<T: Scalar>(p: &TunedParams<T>) -> bool {
    let (vb, cb) = (v_bounds::<T>(), clip_bounds::<T>());
    p.v.data().iter().all(|&v| vb.contains(v))
        && p.alpha.data().iter().all(|&v| cb.contains(v))
        && p.beta.data().iter().all(|&v| cb.contains(v))
}

/// How to quantize a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rtn,
    #[default]
    SignRound,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Rtn => "rtn",
            Method::SignRound => "signround",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rtn" => Ok(Self::Rtn),
            "signround" => Ok(Self::SignRound),
            _ => Err(arg_err(format!("unknown method `{s}` (rtn, signround)"))),
        }
    }
}

/// Output of [`tune_model`].
#[derive(Debug, Clone)]
pub struct TunedModel<T: Scalar = f32> {
    pub reports: Vec<BlockReport>,
    pub snapshots: Vec<BestSnapshot<T>>,
    /// Block-input caches in the order they were used, for inspection.
    pub caches: Vec<BlockInputCache<T>>,
    /// Per-block quantization results, in [`LINEAR_NAMES`] order.
    pub quantized: Vec<Vec<Quantized<T>>>,
    /// Original model with every block linear replaced by its dequantized
    /// weight.
    pub dequantized: ModelWeights<T>,
    /// Bound violations summed over all blocks and steps.
    pub bound_violations: usize,
}

impl TunedModel<f32> {
    /// Packed deployment form.
    pub fn packed(&self) -> Result<QuantizedModel> {
        QuantizedModel::from_parts(&self.dequantized, &self.quantized)
    }
}

/// Quantizes every block in index order. With `tcfg.quantized_input`, block
/// `k` is tuned on the outputs of the already quantized blocks `< k`.
/// [`Method::Rtn`] skips tuning and keeps `V = 0`, `α = β = 1`.
pub fn tune_model<T: Scalar>(
    model: &ModelWeights<T>,
    calib: &CalibSet,
    qcfg: &QuantConfig,
    tcfg: &TuneConfig,
    method: Method,
) -> Result<TunedModel<T>> {
    qcfg.validate()?;
    if method == Method::SignRound {
        tcfg.validate()?;
    }
    let mut fp_cache = BlockInputCache::embeddings(model, calib)?;
    let mut q_cache = fp_cache.clone();
    let mut out = model.clone();
    let mut reports = Vec::with_capacity(model.n_layers());
    let mut snapshots = Vec::with_capacity(model.n_layers());
    let mut caches = Vec::with_capacity(model.n_layers());
    let mut quantized = Vec::with_capacity(model.n_layers());
    let mut bound_violations = 0;

    for (k, block) in model.blocks.iter().enumerate() {
        let cache = if tcfg.quantized_input { &q_cache } else { &fp_cache };
        let (snapshot, report) = match method {
            Method::SignRound => {
                let o = tune_block(block, cache, qcfg, tcfg)?;
                bound_violations += o.bound_violations;
                let report = BlockReport {
                    block: k,
                    rtn_loss: o.rtn_loss,
                    best_loss: o.snapshot.best_loss,
                    best_step: o.snapshot.best_step,
                    tuned_loss: o.tuned_loss,
                    steps: tcfg.steps,
                    mode: tcfg.mode.to_string(),
                    optimizer: tcfg.optimizer.to_string(),
                    lr0: tcfg.lr0(),
                };
                (o.snapshot, report)
            }
            Method::Rtn => {
                let params: Vec<TunedParams<T>> = block
                    .linears()
                    .iter()
                    .map(|w| Ok(TunedParams::identity(&GroupLayout::new(w.shape(), qcfg)?)))
                    .collect::<Result<_>>()?;
                let targets = map_batched(&cache.inputs, |x| block.forward(x))?;
                let loss = reconstruction_loss(block, &cache.inputs, &targets, qcfg, &params)?;
                let report = BlockReport {
                    block: k,
                    rtn_loss: loss,
                    best_loss: loss,
                    best_step: 0,
                    tuned_loss: loss,
                    steps: 0,
                    mode: "none".into(),
                    optimizer: "none".into(),
                    lr0: 0.0,
                };
                let snap = BestSnapshot {
                    params,
                    best_loss: loss,
                    best_step: 0,
                };
                (snap, report)
            }
        };
        let qs: Vec<Quantized<T>> = block
            .linears()
            .iter()
            .zip(&snapshot.params)
            .map(|(w, p)| quantize(w, qcfg, p))
            .collect::<Result<_>>()?;
        let qblock = &mut out.blocks[k];
        for (name, q) in LINEAR_NAMES.iter().zip(&qs) {
            *qblock.linear_mut(name).expect("linear name") = q.dequant.clone();
        }
        caches.push(cache.clone());
        if k + 1 < model.n_layers() {
            if tcfg.quantized_input {
                q_cache = q_cache.advance(&out.blocks[k], true)?;
            } else {
                fp_cache = fp_cache.advance(block, false)?;
            }
        }
        reports.push(report);
        snapshots.push(snapshot);
        quantized.push(qs);
    }
    Ok(TunedModel {
        reports,
        snapshots,
        caches,
        quantized,
        dequantized: out,
        bound_violations,
    })
}
