//! Target binning, the multi-task loss, Adam and the epoch loop.
//!
//! Every regression target is learned as a classification over fixed bins plus a
//! regression on the expectation-decoded value. For one task
//! `L = CE(logits, bin(y)) + α·(E[ŷ] − y)²`, and the total objective is
//! `L_pitch + L_yaw + L_roll + λ1·L_ρ + λ2·L_θ`.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::derive_seed;
use crate::evaluation::{mae, EvalRecord};
use crate::geometry::PolarLocation;
use crate::network::{forward, predict, ModelConfig, ModelParams, ParamVars, PredictionBundle};
use crate::synthesis::{load_fisheye_samples, EulerAngles, FisheyeSample, SynthesisError};
use crate::tensor::{grad_check, GradCheckReport, Tape, Tensor, TensorError, Var, GRAD_CHECK_EPS};

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("non-finite loss in epoch {epoch}, batch {batch} (sample {sample}): {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        sample: String,
        detail: String,
    },
    #[error("no usable training samples")]
    EmptyDataset,
    #[error("sample {0} lacks a location label but location supervision is enabled")]
    MissingLocation(String),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
}

pub type Result<T> = std::result::Result<T, TrainingError>;

/// Equal-width bins over `[range_min, range_min + n_bins·bin_width)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinningSpec {
    pub n_bins: usize,
    pub bin_width: f64,
    pub range_min: f64,
}

impl BinningSpec {
    /// 66 bins of 3° over `[−99°, 99°)`.
    pub const fn pose() -> Self {
        Self {
            n_bins: 66,
            bin_width: 3.0,
            range_min: -99.0,
        }
    }

    /// 72 bins of 5° over `[−180°, 180°)`.
    pub const fn theta() -> Self {
        Self {
            n_bins: 72,
            bin_width: 5.0,
            range_min: -180.0,
        }
    }

    /// 66 bins of 0.015 over `[0, 0.99)`.
    pub const fn rho() -> Self {
        Self {
            n_bins: 66,
            bin_width: 0.015,
            range_min: 0.0,
        }
    }

    pub fn range_max(&self) -> f64 {
        self.range_min + self.n_bins as f64 * self.bin_width
    }

    pub fn midpoint(&self, i: usize) -> f64 {
        self.range_min + (i as f64 + 0.5) * self.bin_width
    }

    pub fn midpoints(&self) -> Vec<f64> {
        (0..self.n_bins).map(|i| self.midpoint(i)).collect()
    }

    /// Class index of `value`, or `None` outside the covered range. The upper edge
    /// itself is accepted and lands in the last bin.
    pub fn bin_label(&self, value: f64) -> Option<usize> {
        if !(value >= self.range_min && value <= self.range_max()) {
            return None;
        }
        let i = ((value - self.range_min) / self.bin_width).floor() as usize;
        Some(i.min(self.n_bins - 1))
    }

    /// Expectation of the bin midpoints under `probs`.
    pub fn decode(&self, probs: &[f64]) -> f64 {
        assert_eq!(probs.len(), self.n_bins, "probability vector length");
        probs.iter().enumerate().map(|(i, p)| p * self.midpoint(i)).sum()
    }
}

/// `(x/255 − mean_c)/std_c` per channel, as a `3 × H × W` tensor.
pub fn normalize_image(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        let idx = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + idx] = (p.0[c] as f64 / 255.0 - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
        }
    }
    Tensor::new(vec![3, h, w], data).expect("non-empty image")
}

/// Inverse of [`normalize_image`], rounding to the nearest 8-bit value.
pub fn denormalize(t: &Tensor) -> RgbImage {
    let [3, h, w] = *t.shape() else {
        panic!("expected a 3×H×W tensor, got {:?}", t.shape());
    };
    let d = t.data();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let idx = y as usize * w + x as usize;
        image::Rgb(std::array::from_fn(|c| {
            let v = (d[c * h * w + idx] * IMAGENET_STD[c] + IMAGENET_MEAN[c]) * 255.0;
            v.round().clamp(0.0, 255.0) as u8
        }))
    })
}

/// Resizes to `size × size` when needed, then normalizes.
pub fn prepare_input(img: &RgbImage, size: usize) -> Tensor {
    normalize_image(&resize_to(img, size))
}

fn resize_to(img: &RgbImage, size: usize) -> RgbImage {
    if img.dimensions() == (size as u32, size as u32) {
        img.clone()
    } else {
        image::imageops::resize(img, size as u32, size as u32, FilterType::Triangle)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskAlphas {
    pub pitch: f64,
    pub yaw: f64,
    pub roll: f64,
    pub theta: f64,
    pub rho: f64,
}

impl Default for TaskAlphas {
    fn default() -> Self {
        Self {
            pitch: 1.0,
            yaw: 1.0,
            roll: 1.0,
            theta: 1.0,
            rho: 100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alphas: TaskAlphas,
    /// Weight of the ρ task.
    pub lambda1: f64,
    /// Weight of the θ task.
    pub lambda2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::biwi()
    }
}

impl LossConfig {
    pub fn biwi() -> Self {
        Self {
            alphas: TaskAlphas::default(),
            lambda1: 10.0,
            lambda2: 0.001,
        }
    }

    pub fn aflw() -> Self {
        Self {
            lambda1: 5.0,
            ..Self::biwi()
        }
    }

    /// Pose-only objective.
    pub fn pose_only() -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 0.0,
            ..Self::biwi()
        }
    }

    pub fn supervises_location(&self) -> bool {
        self.lambda1 > 0.0 || self.lambda2 > 0.0
    }

    fn validate(&self) -> Result<()> {
        let a = &self.alphas;
        let all = [a.pitch, a.yaw, a.roll, a.theta, a.rho, self.lambda1, self.lambda2];
        if all.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(TrainingError::InvalidConfig("loss weights must be finite and non-negative".into()))
        }
    }
}

/// Ground truth for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub pose: EulerAngles,
    pub location: Option<PolarLocation>,
}

/// `CE(logits, bin(gt)) + alpha·(decoded − gt)²`.
pub fn task_loss(
    tape: &mut Tape,
    logits: Var,
    decoded: Var,
    gt: f64,
    spec: &BinningSpec,
    alpha: f64,
) -> std::result::Result<Var, TensorError> {
    let class = spec.bin_label(gt).ok_or_else(|| TensorError::InvalidArgument {
        op: "task_loss",
        msg: format!("target {gt} outside [{}, {}]", spec.range_min, spec.range_max()),
    })?;
    let ce = tape.cross_entropy(logits, class)?;
    if alpha == 0.0 {
        return Ok(ce);
    }
    let target = tape.constant(Tensor::scalar(gt));
    let mse = tape.mse(decoded, target)?;
    let weighted = tape.scale(mse, alpha);
    tape.add(ce, weighted)
}

/// Loss nodes of one sample.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub pitch: Var,
    pub yaw: Var,
    pub roll: Var,
    pub rho: Option<Var>,
    pub theta: Option<Var>,
}

/// Weighted multi-task objective. Location terms are added only when the bundle
/// carries location outputs and the corresponding weight is positive.
pub fn total_loss(
    tape: &mut Tape,
    bundle: &PredictionBundle,
    target: &Target,
    cfg: &LossConfig,
) -> std::result::Result<LossTerms, TensorError> {
    let pose = BinningSpec::pose();
    let a = &cfg.alphas;
    let p = &bundle.pose;
    let pitch = task_loss(tape, p.pitch_logits, p.pitch, target.pose.pitch, &pose, a.pitch)?;
    let yaw = task_loss(tape, p.yaw_logits, p.yaw, target.pose.yaw, &pose, a.yaw)?;
    let roll = task_loss(tape, p.roll_logits, p.roll, target.pose.roll, &pose, a.roll)?;
    let mut parts = vec![pitch, yaw, roll];
    let (mut rho, mut theta) = (None, None);
    if let (Some(loc_out), Some(loc)) = (&bundle.location, &target.location) {
        if cfg.lambda1 > 0.0 {
            let l = task_loss(tape, loc_out.rho_logits, loc_out.rho, loc.rho, &BinningSpec::rho(), a.rho)?;
            rho = Some(l);
            parts.push(tape.scale(l, cfg.lambda1));
        }
        if cfg.lambda2 > 0.0 {
            let l = task_loss(tape, loc_out.theta_logits, loc_out.theta, loc.theta, &BinningSpec::theta(), a.theta)?;
            theta = Some(l);
            parts.push(tape.scale(l, cfg.lambda2));
        }
    }
    let total = tape.sum_all(&parts)?;
    Ok(LossTerms {
        total,
        pitch,
        yaw,
        roll,
        rho,
        theta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

/// Adam moment buffers, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &[&mut Tensor]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update with learning rate `lr`.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Vec<f64>], state: &mut OptimizerState, cfg: &AdamConfig, lr: f64) {
    assert_eq!(params.len(), grads.len(), "one gradient per parameter");
    assert_eq!(params.len(), state.m.len(), "optimizer state does not match parameters");
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        assert_eq!(p.len(), g.len(), "gradient shape");
        for (((x, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *x -= lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
        }
    }
}

/// Step learning-rate schedule over a fixed number of epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Zero-based epochs at whose start the rate is multiplied by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self::biwi()
    }
}

impl Schedule {
    pub fn biwi() -> Self {
        Self {
            epochs: 25,
            batch_size: 32,
            lr: 1e-4,
            milestones: vec![10, 20],
            gamma: 0.5,
        }
    }

    pub fn large_dataset() -> Self {
        Self {
            batch_size: 128,
            ..Self::biwi()
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr * self.gamma.powi(decays as i32)
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainingError::InvalidConfig("epochs and batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite() && self.gamma > 0.0) {
            return Err(TrainingError::InvalidConfig("learning rate and decay must be positive".into()));
        }
        if let Some(m) = self.milestones.iter().find(|&&m| m >= self.epochs) {
            return Err(TrainingError::InvalidConfig(format!(
                "milestone {m} is not before the final epoch {}",
                self.epochs
            )));
        }
        Ok(())
    }
}

/// Everything a training run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Fisheye manifest of the training split.
    pub dataset: PathBuf,
    /// Optional held-out manifest evaluated per [`eval_interval`](Self::eval_interval).
    pub eval_dataset: Option<PathBuf>,
    pub seed: u64,
    pub loss: LossConfig,
    pub schedule: Schedule,
    pub adam: AdamConfig,
    pub model: ModelConfig,
    /// Evaluate every this many epochs; 0 evaluates after the last epoch only.
    pub eval_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("fisheye/manifest.jsonl"),
            eval_dataset: None,
            seed: 0,
            loss: LossConfig::default(),
            schedule: Schedule::default(),
            adam: AdamConfig::default(),
            model: ModelConfig::default(),
            eval_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.schedule.validate()?;
        self.model.validate()?;
        Ok(())
    }
}

/// A training-ready sample: the input raster at network resolution plus targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub image: RgbImage,
    pub target: Target,
}

impl Example {
    pub fn input(&self) -> Tensor {
        normalize_image(&self.image)
    }
}

/// Converts samples to examples at `input_size`, dropping those whose pose falls
/// outside the pose bins. Returns the examples and the number dropped.
pub fn prepare_examples(samples: &[FisheyeSample], input_size: usize) -> (Vec<Example>, usize) {
    let pose = BinningSpec::pose();
    let keep = |s: &&FisheyeSample| [s.pose.pitch, s.pose.yaw, s.pose.roll].iter().all(|&a| pose.bin_label(a).is_some());
    let examples: Vec<Example> = samples
        .par_iter()
        .filter(keep)
        .map(|s| Example {
            id: s.source_id.clone(),
            image: resize_to(&s.image, input_size),
            target: Target {
                pose: s.pose,
                location: Some(s.location),
            },
        })
        .collect();
    let dropped = samples.len() - examples.len();
    (examples, dropped)
}

pub fn load_examples(manifest: &Path, input_size: usize) -> Result<Vec<Example>> {
    let samples = load_fisheye_samples(manifest)?;
    let (examples, dropped) = prepare_examples(&samples, input_size);
    if dropped > 0 {
        log::info!("{}: dropped {dropped} samples with pose outside [-99, 99]", manifest.display());
    }
    Ok(examples)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub split: String,
    pub samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossSummary>,
    pub mae: f64,
    pub pitch_err: f64,
    pub yaw_err: f64,
    pub roll_err: f64,
}

/// Mean loss components over an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossSummary {
    pub total: f64,
    pub pitch: f64,
    pub yaw: f64,
    pub roll: f64,
    pub rho: f64,
    pub theta: f64,
}

struct SampleResult {
    grads: Vec<Vec<f64>>,
    loss: LossSummary,
    pose: EulerAngles,
}

fn sample_gradient(params: &ModelParams, ex: &Example, cfg: &LossConfig) -> std::result::Result<SampleResult, TensorError> {
    let mut tape = Tape::new();
    let pv = params.register(&mut tape, true);
    let x = tape.constant(ex.input());
    let bundle = forward(&mut tape, &pv, x, cfg.supervises_location())?;
    let terms = total_loss(&mut tape, &bundle, &ex.target, cfg)?;
    let val = |tape: &Tape, v: Var| tape.value(v).item();
    let loss = LossSummary {
        total: val(&tape, terms.total),
        pitch: val(&tape, terms.pitch),
        yaw: val(&tape, terms.yaw),
        roll: val(&tape, terms.roll),
        rho: terms.rho.map_or(0.0, |v| val(&tape, v)),
        theta: terms.theta.map_or(0.0, |v| val(&tape, v)),
    };
    let pose = EulerAngles::new(val(&tape, bundle.pose.pitch), val(&tape, bundle.pose.yaw), val(&tape, bundle.pose.roll));
    tape.backward(terms.total)?;
    let grads = pv
        .all()
        .into_iter()
        .map(|v| tape.grad(v).map_or_else(|| vec![0.0; tape.value(v).len()], <[f64]>::to_vec))
        .collect();
    Ok(SampleResult { grads, loss, pose })
}

/// Mean loss gradient over `batch`, summed in batch order.
pub fn batch_gradient(params: &ModelParams, batch: &[&Example], cfg: &LossConfig) -> Result<(Vec<Vec<f64>>, f64)> {
    let results: Vec<_> = batch.par_iter().map(|ex| sample_gradient(params, ex, cfg)).collect();
    let mut sum: Option<Vec<Vec<f64>>> = None;
    let mut loss = 0.0;
    for r in results {
        let r = r?;
        loss += r.loss.total;
        accumulate(&mut sum, r.grads);
    }
    let n = batch.len() as f64;
    let mut grads = sum.unwrap_or_default();
    grads.iter_mut().flatten().for_each(|g| *g /= n);
    Ok((grads, loss / n))
}

fn accumulate(sum: &mut Option<Vec<Vec<f64>>>, grads: Vec<Vec<f64>>) {
    match sum {
        None => *sum = Some(grads),
        Some(acc) => {
            for (a, g) in acc.iter_mut().zip(grads) {
                for (x, y) in a.iter_mut().zip(g) {
                    *x += y;
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<LogRecord>,
}

/// Trains a freshly initialized model.
pub fn run_training(
    train: &[Example],
    eval: &[Example],
    cfg: &TrainConfig,
    on_log: impl FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let params = ModelParams::init(cfg.model.clone(), derive_seed(cfg.seed, 0))?;
    train_from(params, train, eval, cfg, on_log)
}

/// Trains `params` in place of a fresh initialization. Each epoch reshuffles the
/// training set with a generator derived from `(seed, epoch)`; per-sample gradients
/// are computed in parallel but always reduced in batch order.
pub fn train_from(
    mut params: ModelParams,
    train: &[Example],
    eval: &[Example],
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainingError::EmptyDataset);
    }
    if cfg.loss.supervises_location() {
        if let Some(ex) = train.iter().find(|e| e.target.location.is_none()) {
            return Err(TrainingError::MissingLocation(ex.id.clone()));
        }
    }
    let mut state = OptimizerState::new(&params.tensors_mut());
    let shuffle_seed = derive_seed(cfg.seed, 1);
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.schedule.epochs {
        let lr = cfg.schedule.lr_at(epoch);
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(shuffle_seed, epoch as u64)));

        let mut sums = LossSummary::default();
        let mut records = Vec::with_capacity(train.len());
        for (b, chunk) in order.chunks(cfg.schedule.batch_size).enumerate() {
            let results: Vec<_> = chunk
                .par_iter()
                .map(|&i| sample_gradient(&params, &train[i], &cfg.loss))
                .collect();
            let mut sum = None;
            for (&i, r) in chunk.iter().zip(results) {
                let r = r?;
                let ex = &train[i];
                if !r.loss.total.is_finite() || !r.grads.iter().flatten().all(|g| g.is_finite()) {
                    return Err(TrainingError::NonFiniteLoss {
                        epoch: epoch + 1,
                        batch: b + 1,
                        sample: ex.id.clone(),
                        detail: format!("{:?}", r.loss),
                    });
                }
                sums.total += r.loss.total;
                sums.pitch += r.loss.pitch;
                sums.yaw += r.loss.yaw;
                sums.roll += r.loss.roll;
                sums.rho += r.loss.rho;
                sums.theta += r.loss.theta;
                records.push(EvalRecord::new(&ex.id, ex.target.pose, r.pose, ex.target.location));
                accumulate(&mut sum, r.grads);
            }
            let n = chunk.len() as f64;
            let mut grads = sum.expect("non-empty batch");
            grads.iter_mut().flatten().for_each(|g| *g /= n);
            adam_step(&mut params.tensors_mut(), &grads, &mut state, &cfg.adam, lr);
        }

        let n = train.len() as f64;
        let loss = LossSummary {
            total: sums.total / n,
            pitch: sums.pitch / n,
            yaw: sums.yaw / n,
            roll: sums.roll / n,
            rho: sums.rho / n,
            theta: sums.theta / n,
        };
        let m = mae(&records).expect("non-empty epoch");
        let rec = LogRecord {
            epoch: epoch + 1,
            split: "train".into(),
            samples: train.len(),
            lr: Some(lr),
            loss: Some(loss),
            mae: m.mae,
            pitch_err: m.pitch_err,
            yaw_err: m.yaw_err,
            roll_err: m.roll_err,
        };
        on_log(&rec);
        log.push(rec);

        let last = epoch + 1 == cfg.schedule.epochs;
        let due = cfg.eval_interval > 0 && (epoch + 1) % cfg.eval_interval == 0;
        if !eval.is_empty() && (last || due) {
            let records = evaluate_examples(&params, eval)?;
            let m = mae(&records).expect("non-empty eval set");
            let rec = LogRecord {
                epoch: epoch + 1,
                split: "eval".into(),
                samples: eval.len(),
                lr: None,
                loss: None,
                mae: m.mae,
                pitch_err: m.pitch_err,
                yaw_err: m.yaw_err,
                roll_err: m.roll_err,
            };
            on_log(&rec);
            log.push(rec);
        }
    }
    Ok(TrainOutcome { params, log })
}

/// Inference over `examples`, one record each, in input order.
pub fn evaluate_examples(params: &ModelParams, examples: &[Example]) -> Result<Vec<EvalRecord>> {
    examples
        .par_iter()
        .map(|ex| {
            let p = predict(params, &ex.input(), false)?;
            Ok(EvalRecord::new(&ex.id, ex.target.pose, p.pose, ex.target.location))
        })
        .collect()
}

/// Central-difference check of the full multi-task loss of the reduced-width model
/// with respect to every parameter and the input image.
pub fn network_gradient_check(seed: u64) -> std::result::Result<GradCheckReport, TensorError> {
    let config = ModelConfig::reduced();
    let params = ModelParams::init(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    let size = config.backbone.input_size;
    let image = Tensor::new(
        vec![3, size, size],
        (0..3 * size * size).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    )?;
    let target = Target {
        pose: EulerAngles::new(12.0, -31.0, 7.5),
        location: Some(PolarLocation::new(135.0, 0.42)),
    };
    let mut inputs: Vec<Tensor> = params.named().into_iter().map(|(_, t)| t.clone()).collect();
    inputs.push(image);
    let loss_cfg = LossConfig::biwi();
    grad_check(
        |tape, vars| {
            let (image, rest) = vars.split_last().expect("image input");
            let pv = ParamVars::from_vars(&config, rest)?;
            let bundle = forward(tape, &pv, *image, true)?;
            Ok(total_loss(tape, &bundle, &target, &loss_cfg)?.total)
        },
        &inputs,
        GRAD_CHECK_EPS,
    )
}
