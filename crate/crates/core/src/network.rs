//! Location-guided pose network.
//!
//! Data flow for one image:
//!
//! ```text
//! image ─ backbone ─ F_basic ─┬─ channel attn ─ spatial attn ─ F_location ─ location head ─ (θ, ρ)
//!                             └──────────────── + ───────────── F_fused ─── pose head ───── (pitch, yaw, roll)
//! ```
//!
//! With the location module disabled, both heads read `F_basic` directly and no
//! fusion happens.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::PolarLocation;
use crate::synthesis::EulerAngles;
use crate::tensor::{Checkpoint, Result, Tape, Tensor, TensorError, Var};
use crate::training::BinningSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvStage {
    pub const fn new(out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            out_channels,
            kernel,
            stride,
            padding,
        }
    }
}

/// Plain convolutional backbone: each stage is a strided convolution followed by ReLU.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub input_size: usize,
    pub stages: Vec<ConvStage>,
}

impl Default for BackboneConfig {
    /// 224 → 56 → 28 → 14 → 7 with 64 output channels.
    fn default() -> Self {
        Self {
            input_size: 224,
            stages: vec![
                ConvStage::new(8, 4, 4, 0),
                ConvStage::new(16, 2, 2, 0),
                ConvStage::new(32, 2, 2, 0),
                ConvStage::new(64, 2, 2, 0),
            ],
        }
    }
}

impl BackboneConfig {
    /// Reduced-width variant (16×16 input, C = 8, 4×4 features) for gradient checks.
    pub fn reduced() -> Self {
        Self {
            input_size: 16,
            stages: vec![ConvStage::new(4, 2, 2, 0), ConvStage::new(8, 2, 2, 0)],
        }
    }

    pub fn output_channels(&self) -> usize {
        self.stages.last().map_or(3, |s| s.out_channels)
    }

    pub fn output_size(&self) -> usize {
        self.stages.iter().fold(self.input_size, |size, s| (size + 2 * s.padding - s.kernel) / s.stride + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Reduction ratio of the channel-attention MLP.
    pub reduction: usize,
    pub spatial_kernel: usize,
    /// Whether the location feature extraction module (and the fusion it feeds) exists.
    pub location_module: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            reduction: 16,
            spatial_kernel: 7,
            location_module: true,
        }
    }
}

impl ModelConfig {
    pub fn reduced() -> Self {
        Self {
            backbone: BackboneConfig::reduced(),
            reduction: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Err(TensorError::InvalidArgument { op: "model config", msg });
        let c = self.backbone.output_channels();
        if self.backbone.stages.is_empty() {
            return invalid("backbone needs at least one stage".into());
        }
        let mut size = self.backbone.input_size;
        for s in &self.backbone.stages {
            if s.stride == 0 || s.kernel == 0 || size + 2 * s.padding < s.kernel {
                return invalid(format!("stage {s:?} does not fit a {size}px input"));
            }
            size = (size + 2 * s.padding - s.kernel) / s.stride + 1;
        }
        if self.reduction == 0 || c % self.reduction != 0 {
            return invalid(format!("{c} channels not divisible by reduction {}", self.reduction));
        }
        if self.spatial_kernel % 2 == 0 {
            return invalid("spatial kernel must be odd to preserve H×W".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Channel-attention MLP (bias-free) and the spatial-attention convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationFeatureParams {
    /// `(C/r) × C`
    pub w1: Tensor,
    /// `C × (C/r)`
    pub w2: Tensor,
    /// `1 × 2 × k × k`
    pub spatial_weight: Tensor,
    /// `[1]`
    pub spatial_bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub theta: Linear,
    pub rho: Linear,
    pub pitch: Linear,
    pub yaw: Linear,
    pub roll: Linear,
}

/// All learnable weights. Location-head weights exist even without the location
/// module, since location supervision can still be applied to `F_basic`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub backbone: Vec<ConvLayer>,
    pub location: Option<LocationFeatureParams>,
    pub heads: HeadParams,
}

fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).expect("valid shape")
}

impl ModelParams {
    /// Seeded initialization: He-uniform for convolutions and the attention MLP,
    /// `U(±1/√fan_in)` for the output layers, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut in_c = 3;
        let mut backbone = Vec::new();
        for s in &config.backbone.stages {
            let fan_in = (in_c * s.kernel * s.kernel) as f64;
            backbone.push(ConvLayer {
                weight: uniform(&[s.out_channels, in_c, s.kernel, s.kernel], (6.0 / fan_in).sqrt(), &mut rng),
                bias: Tensor::zeros(&[s.out_channels]),
            });
            in_c = s.out_channels;
        }
        let c = in_c;
        let hidden = c / config.reduction;
        let k = config.spatial_kernel;
        let location = config.location_module.then(|| LocationFeatureParams {
            w1: uniform(&[hidden, c], (6.0 / c as f64).sqrt(), &mut rng),
            w2: uniform(&[c, hidden], (6.0 / hidden as f64).sqrt(), &mut rng),
            spatial_weight: uniform(&[1, 2, k, k], (6.0 / (2 * k * k) as f64).sqrt(), &mut rng),
            spatial_bias: Tensor::zeros(&[1]),
        });
        let mut linear = |out: usize| Linear {
            weight: uniform(&[out, c], 1.0 / (c as f64).sqrt(), &mut rng),
            bias: Tensor::zeros(&[out]),
        };
        let heads = HeadParams {
            theta: linear(BinningSpec::theta().n_bins),
            rho: linear(BinningSpec::rho().n_bins),
            pitch: linear(BinningSpec::pose().n_bins),
            yaw: linear(BinningSpec::pose().n_bins),
            roll: linear(BinningSpec::pose().n_bins),
        };
        Ok(Self {
            config,
            backbone,
            location,
            heads,
        })
    }

    /// Parameters in a fixed order with stable names.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.backbone.iter().enumerate() {
            out.push((format!("backbone.{i}.weight"), &l.weight));
            out.push((format!("backbone.{i}.bias"), &l.bias));
        }
        if let Some(a) = &self.location {
            out.push(("location.w1".into(), &a.w1));
            out.push(("location.w2".into(), &a.w2));
            out.push(("location.spatial.weight".into(), &a.spatial_weight));
            out.push(("location.spatial.bias".into(), &a.spatial_bias));
        }
        let h = &self.heads;
        for (name, l) in [("theta", &h.theta), ("rho", &h.rho), ("pitch", &h.pitch), ("yaw", &h.yaw), ("roll", &h.roll)] {
            out.push((format!("head.{name}.weight"), &l.weight));
            out.push((format!("head.{name}.bias"), &l.bias));
        }
        out
    }

    /// Mutable parameters in the order of [`named`](Self::named).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.backbone {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        if let Some(a) = &mut self.location {
            out.push(&mut a.w1);
            out.push(&mut a.w2);
            out.push(&mut a.spatial_weight);
            out.push(&mut a.spatial_bias);
        }
        let h = &mut self.heads;
        for l in [&mut h.theta, &mut h.rho, &mut h.pitch, &mut h.yaw, &mut h.roll] {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let config = serde_json::to_string(&self.config).expect("config serializes");
        let entries = self.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
        Checkpoint::new(config, entries)
    }

    /// Rebuilds parameters from a self-describing checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = serde_json::from_str(&ck.config)
            .map_err(|e| TensorError::Checkpoint(format!("model config: {e}")))?;
        let mut params = Self::init(config, 0)?;
        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        if names.len() != ck.entries.len() {
            return Err(TensorError::Checkpoint(format!(
                "expected {} tensors, found {}",
                names.len(),
                ck.entries.len()
            )));
        }
        for ((name, slot), (ck_name, t)) in names.iter().zip(params.tensors_mut()).zip(&ck.entries) {
            if name != ck_name || slot.shape() != t.shape() {
                return Err(TensorError::Checkpoint(format!(
                    "entry {ck_name} {:?} does not match {name} {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        if !params.is_finite() {
            return Err(TensorError::Checkpoint("non-finite parameter values".into()));
        }
        Ok(params)
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn register(&self, tape: &mut Tape, requires_grad: bool) -> ParamVars {
        let mut leaf = |t: &Tensor| tape.leaf(t.clone(), requires_grad);
        let backbone = self.backbone.iter().map(|l| (leaf(&l.weight), leaf(&l.bias))).collect();
        let location = self.location.as_ref().map(|a| LocationVars {
            w1: leaf(&a.w1),
            w2: leaf(&a.w2),
            spatial_weight: leaf(&a.spatial_weight),
            spatial_bias: leaf(&a.spatial_bias),
        });
        let h = &self.heads;
        let mut lin = |l: &Linear| LinearVars {
            weight: leaf(&l.weight),
            bias: leaf(&l.bias),
        };
        let heads = HeadVars {
            theta: lin(&h.theta),
            rho: lin(&h.rho),
            pitch: lin(&h.pitch),
            yaw: lin(&h.yaw),
            roll: lin(&h.roll),
        };
        ParamVars {
            config: self.config.clone(),
            backbone,
            location,
            heads,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LocationVars {
    pub w1: Var,
    pub w2: Var,
    pub spatial_weight: Var,
    pub spatial_bias: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub theta: LinearVars,
    pub rho: LinearVars,
    pub pitch: LinearVars,
    pub yaw: LinearVars,
    pub roll: LinearVars,
}

/// Tape handles for a registered [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub config: ModelConfig,
    pub backbone: Vec<(Var, Var)>,
    pub location: Option<LocationVars>,
    pub heads: HeadVars,
}

impl ParamVars {
    /// Rebuilds handles from a slice in the order of [`all`](Self::all).
    pub fn from_vars(config: &ModelConfig, vars: &[Var]) -> Result<Self> {
        let n_stages = config.backbone.stages.len();
        let expected = 2 * n_stages + if config.location_module { 4 } else { 0 } + 10;
        if vars.len() != expected {
            return Err(TensorError::InvalidArgument {
                op: "from_vars",
                msg: format!("expected {expected} handles, got {}", vars.len()),
            });
        }
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("length checked");
        let backbone = (0..n_stages).map(|_| (next(), next())).collect();
        let location = config.location_module.then(|| LocationVars {
            w1: next(),
            w2: next(),
            spatial_weight: next(),
            spatial_bias: next(),
        });
        let mut lin = || LinearVars {
            weight: next(),
            bias: next(),
        };
        let heads = HeadVars {
            theta: lin(),
            rho: lin(),
            pitch: lin(),
            yaw: lin(),
            roll: lin(),
        };
        Ok(Self {
            config: config.clone(),
            backbone,
            location,
            heads,
        })
    }

    /// Handles in the order of [`ModelParams::named`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for &(w, b) in &self.backbone {
            out.extend([w, b]);
        }
        if let Some(a) = &self.location {
            out.extend([a.w1, a.w2, a.spatial_weight, a.spatial_bias]);
        }
        let h = &self.heads;
        for l in [h.theta, h.rho, h.pitch, h.yaw, h.roll] {
            out.extend([l.weight, l.bias]);
        }
        out
    }
}

fn linear(tape: &mut Tape, l: LinearVars, x: Var) -> Result<Var> {
    let y = tape.matmul(l.weight, x)?;
    tape.add(y, l.bias)
}

/// `3 × S × S` image to `C × h × w` features.
pub fn backbone_forward(tape: &mut Tape, pv: &ParamVars, image: Var) -> Result<Var> {
    let size = pv.config.backbone.input_size;
    if tape.shape(image) != [3, size, size] {
        return Err(TensorError::ShapeMismatch {
            op: "backbone_forward",
            lhs: tape.shape(image).to_vec(),
            rhs: vec![3, size, size],
        });
    }
    let mut x = image;
    for (stage, &(w, b)) in pv.config.backbone.stages.iter().zip(&pv.backbone) {
        x = tape.conv2d(x, w, Some(b), stage.stride, stage.padding)?;
        x = tape.relu(x);
    }
    Ok(x)
}

/// Returns the channel attention map `M_C` and the channel-weighted features `F′`.
pub fn channel_attention(tape: &mut Tape, lv: &LocationVars, f_basic: Var) -> Result<(Var, Var)> {
    let avg = tape.global_avg_pool(f_basic)?;
    let max = tape.global_max_pool(f_basic)?;
    let branch = |tape: &mut Tape, v: Var| -> Result<Var> {
        let h = tape.matmul(lv.w1, v)?;
        let h = tape.relu(h);
        tape.matmul(lv.w2, h)
    };
    let a = branch(tape, avg)?;
    let m = branch(tape, max)?;
    let s = tape.add(a, m)?;
    let m_c = tape.sigmoid(s);
    let f_prime = tape.scale_by_channel(f_basic, m_c)?;
    Ok((m_c, f_prime))
}

/// Returns the spatial attention map `M_S` (`1 × H × W`) and `F_location`.
pub fn spatial_attention(tape: &mut Tape, lv: &LocationVars, f_prime: Var) -> Result<(Var, Var)> {
    let mean = tape.channel_mean_map(f_prime)?;
    let max = tape.channel_max_map(f_prime)?;
    let stacked = tape.concat(&[mean, max], 0)?;
    let k = tape.shape(lv.spatial_weight)[2];
    let s = tape.conv2d(stacked, lv.spatial_weight, Some(lv.spatial_bias), 1, k / 2)?;
    let m_s = tape.sigmoid(s);
    let f_location = tape.scale_by_map(f_prime, m_s)?;
    Ok((m_s, f_location))
}

pub fn fuse(tape: &mut Tape, f_basic: Var, f_location: Var) -> Result<Var> {
    if tape.shape(f_basic) != tape.shape(f_location) {
        return Err(TensorError::ShapeMismatch {
            op: "fuse",
            lhs: tape.shape(f_basic).to_vec(),
            rhs: tape.shape(f_location).to_vec(),
        });
    }
    tape.add(f_basic, f_location)
}

/// Softmax over `logits` followed by the expectation over bin midpoints.
pub fn expectation_decode(tape: &mut Tape, logits: Var, spec: &BinningSpec) -> Result<Var> {
    let p = tape.softmax(logits, 0)?;
    tape.dot_const(p, &spec.midpoints())
}

#[derive(Debug, Clone, Copy)]
pub struct LocationOutput {
    pub theta: Var,
    pub rho: Var,
    pub theta_logits: Var,
    pub rho_logits: Var,
}

pub fn location_head(tape: &mut Tape, heads: &HeadVars, features: Var) -> Result<LocationOutput> {
    let pooled = tape.global_avg_pool(features)?;
    let theta_logits = linear(tape, heads.theta, pooled)?;
    let rho_logits = linear(tape, heads.rho, pooled)?;
    Ok(LocationOutput {
        theta: expectation_decode(tape, theta_logits, &BinningSpec::theta())?,
        rho: expectation_decode(tape, rho_logits, &BinningSpec::rho())?,
        theta_logits,
        rho_logits,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct PoseOutput {
    pub pitch: Var,
    pub yaw: Var,
    pub roll: Var,
    pub pitch_logits: Var,
    pub yaw_logits: Var,
    pub roll_logits: Var,
}

pub fn pose_head(tape: &mut Tape, heads: &HeadVars, features: Var) -> Result<PoseOutput> {
    let pooled = tape.global_avg_pool(features)?;
    let spec = BinningSpec::pose();
    let pitch_logits = linear(tape, heads.pitch, pooled)?;
    let yaw_logits = linear(tape, heads.yaw, pooled)?;
    let roll_logits = linear(tape, heads.roll, pooled)?;
    Ok(PoseOutput {
        pitch: expectation_decode(tape, pitch_logits, &spec)?,
        yaw: expectation_decode(tape, yaw_logits, &spec)?,
        roll: expectation_decode(tape, roll_logits, &spec)?,
        pitch_logits,
        yaw_logits,
        roll_logits,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct PredictionBundle {
    pub pose: PoseOutput,
    /// Present when location outputs were requested.
    pub location: Option<LocationOutput>,
    pub f_basic: Var,
    /// `None` without the location module.
    pub f_location: Option<Var>,
    pub f_fused: Var,
}

/// Full forward pass. Location decoding runs only when `with_location` is set, but
/// `F_location` is always computed when the module exists because fusion needs it.
pub fn forward(tape: &mut Tape, pv: &ParamVars, image: Var, with_location: bool) -> Result<PredictionBundle> {
    let f_basic = backbone_forward(tape, pv, image)?;
    let (f_location, f_fused) = match &pv.location {
        Some(lv) => {
            let (_, f_prime) = channel_attention(tape, lv, f_basic)?;
            let (_, f_location) = spatial_attention(tape, lv, f_prime)?;
            (Some(f_location), fuse(tape, f_basic, f_location)?)
        }
        None => (None, f_basic),
    };
    let location = if with_location {
        Some(location_head(tape, &pv.heads, f_location.unwrap_or(f_basic))?)
    } else {
        None
    };
    let pose = pose_head(tape, &pv.heads, f_fused)?;
    Ok(PredictionBundle {
        pose,
        location,
        f_basic,
        f_location,
        f_fused,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub pose: EulerAngles,
    pub location: Option<PolarLocation>,
}

/// Inference-mode prediction for one normalized image.
pub fn predict(params: &ModelParams, image: &Tensor, with_location: bool) -> Result<Prediction> {
    let mut tape = Tape::inference();
    let pv = params.register(&mut tape, false);
    let x = tape.constant(image.clone());
    let b = forward(&mut tape, &pv, x, with_location)?;
    let v = |v: Var| tape.value(v).item();
    Ok(Prediction {
        pose: EulerAngles::new(v(b.pose.pitch), v(b.pose.yaw), v(b.pose.roll)),
        location: b.location.map(|l| PolarLocation::new(v(l.theta), v(l.rho))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        uniform(shape, 1.0, &mut rng)
    }

    fn location_vars(tape: &mut Tape, p: &LocationFeatureParams) -> LocationVars {
        LocationVars {
            w1: tape.leaf(p.w1.clone(), true),
            w2: tape.leaf(p.w2.clone(), true),
            spatial_weight: tape.leaf(p.spatial_weight.clone(), true),
            spatial_bias: tape.leaf(p.spatial_bias.clone(), true),
        }
    }

    #[test]
    fn default_backbone_contract() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.backbone.output_size(), 7);
        assert_eq!(cfg.backbone.output_channels(), 64);
        let params = ModelParams::init(cfg, 1).unwrap();
        let mut tape = Tape::inference();
        let pv = params.register(&mut tape, false);
        let x = tape.constant(random_tensor(&[3, 224, 224], 2));
        let f = backbone_forward(&mut tape, &pv, x).unwrap();
        assert_eq!(tape.shape(f), &[64, 7, 7]);
        let zero = tape.constant(Tensor::zeros(&[3, 224, 224]));
        let f = backbone_forward(&mut tape, &pv, zero).unwrap();
        assert!(tape.value(f).is_finite());
        let wrong = tape.constant(Tensor::zeros(&[3, 200, 200]));
        assert!(backbone_forward(&mut tape, &pv, wrong).is_err());
    }

    #[test]
    fn head_widths() {
        let p = ModelParams::init(ModelConfig::default(), 0).unwrap();
        let widths: Vec<usize> = [&p.heads.theta, &p.heads.rho, &p.heads.pitch, &p.heads.yaw, &p.heads.roll]
            .iter()
            .map(|l| l.weight.shape()[0])
            .collect();
        assert_eq!(widths, vec![72, 66, 66, 66, 66]);
        let loc = p.location.as_ref().unwrap();
        assert_eq!(loc.w1.shape(), &[4, 64]);
        assert_eq!(loc.w2.shape(), &[64, 4]);
        assert_eq!(loc.spatial_weight.shape(), &[1, 2, 7, 7]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::default();
        cfg.reduction = 5;
        assert!(ModelParams::init(cfg, 0).is_err());
        let mut cfg = ModelConfig::default();
        cfg.spatial_kernel = 6;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_mlp_gives_half_channel_attention() {
        let mut tape = Tape::new();
        let f = tape.constant(random_tensor(&[16, 7, 7], 3));
        let lv = LocationVars {
            w1: tape.constant(Tensor::zeros(&[1, 16])),
            w2: tape.constant(Tensor::zeros(&[16, 1])),
            spatial_weight: tape.constant(Tensor::zeros(&[1, 2, 7, 7])),
            spatial_bias: tape.constant(Tensor::zeros(&[1])),
        };
        let (m_c, f_prime) = channel_attention(&mut tape, &lv, f).unwrap();
        assert!(tape.value(m_c).data().iter().all(|&v| v == 0.5));
        for (a, b) in tape.value(f_prime).data().iter().zip(tape.value(f).data()) {
            assert_eq!(*a, b / 2.0);
        }
        let (m_s, f_loc) = spatial_attention(&mut tape, &lv, f_prime).unwrap();
        assert_eq!(tape.shape(m_s), &[1, 7, 7]);
        assert!(tape.value(m_s).data().iter().all(|&v| v == 0.5));
        for (a, b) in tape.value(f_loc).data().iter().zip(tape.value(f_prime).data()) {
            assert_eq!(*a, b / 2.0);
        }
    }

    #[test]
    fn constant_channels_give_algebraic_attention() {
        // Per-channel constant input: avg and max pools coincide, so
        // M_C = σ(2 · W2 · relu(W1 · f)).
        let (c, hidden) = (8, 2);
        let levels: Vec<f64> = (0..c).map(|k| 0.3 * k as f64 - 1.0).collect();
        let data: Vec<f64> = levels.iter().flat_map(|&v| std::iter::repeat_n(v, 25)).collect();
        let w1 = random_tensor(&[hidden, c], 4);
        let w2 = random_tensor(&[c, hidden], 5);
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::new(vec![c, 5, 5], data).unwrap());
        let lv = LocationVars {
            w1: tape.constant(w1.clone()),
            w2: tape.constant(w2.clone()),
            spatial_weight: tape.constant(Tensor::zeros(&[1, 2, 7, 7])),
            spatial_bias: tape.constant(Tensor::zeros(&[1])),
        };
        let (m_c, _) = channel_attention(&mut tape, &lv, f).unwrap();
        let h: Vec<f64> = (0..hidden)
            .map(|r| (0..c).map(|k| w1.data()[r * c + k] * levels[k]).sum::<f64>().max(0.0))
            .collect();
        for k in 0..c {
            let z: f64 = (0..hidden).map(|r| w2.data()[k * hidden + r] * h[r]).sum();
            let expected = 1.0 / (1.0 + (-2.0 * z).exp());
            assert!((tape.value(m_c).data()[k] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn constant_features_give_constant_interior_spatial_map() {
        let params = ModelParams::init(ModelConfig::default(), 9).unwrap();
        let loc = params.location.unwrap();
        for size in [7usize, 13] {
            let mut tape = Tape::new();
            let lv = location_vars(&mut tape, &loc);
            let f = tape.constant(Tensor::full(&[64, size, size], 0.7));
            let (m_s, _) = spatial_attention(&mut tape, &lv, f).unwrap();
            let m = tape.value(m_s).data();
            // Positions at least 3 pixels from every edge see the full kernel.
            let interior: Vec<f64> = (3..size - 3)
                .flat_map(|y| (3..size - 3).map(move |x| (y, x)))
                .map(|(y, x)| m[y * size + x])
                .collect();
            assert_eq!(interior.len(), (size - 6) * (size - 6));
            assert!(interior.iter().all(|&v| (v - interior[0]).abs() < 1e-15));
            assert!(m.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn fuse_identity_and_commutativity() {
        let mut tape = Tape::new();
        let a = tape.constant(random_tensor(&[4, 3, 3], 6));
        let b = tape.constant(random_tensor(&[4, 3, 3], 7));
        let z = tape.constant(Tensor::zeros(&[4, 3, 3]));
        let s = fuse(&mut tape, a, z).unwrap();
        assert_eq!(tape.value(s), tape.value(a));
        let ab = fuse(&mut tape, a, b).unwrap();
        let ba = fuse(&mut tape, b, a).unwrap();
        assert_eq!(tape.value(ab), tape.value(ba));
        let wrong = tape.constant(Tensor::zeros(&[4, 3, 2]));
        assert!(fuse(&mut tape, a, wrong).is_err());
    }

    fn decode_probs(probs: Vec<f64>, spec: &BinningSpec) -> f64 {
        // ln p as logits reproduces p exactly up to rounding.
        let logits: Vec<f64> = probs.iter().map(|p| if *p > 0.0 { p.ln() } else { -1e4 }).collect();
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::from_vec(logits));
        let d = expectation_decode(&mut tape, l, spec).unwrap();
        tape.value(d).item()
    }

    fn one_hot(n: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        v
    }

    #[test]
    fn decoding_examples() {
        let theta = BinningSpec::theta();
        let rho = BinningSpec::rho();
        let pose = BinningSpec::pose();
        // 1-based bin 36 is index 35.
        assert!((decode_probs(one_hot(72, 35), &theta) + 2.5).abs() < 1e-12);
        assert!(decode_probs(vec![1.0 / 72.0; 72], &theta).abs() < 1e-12);
        assert!((decode_probs(one_hot(66, 0), &rho) - 0.0075).abs() < 1e-12);
        assert!((decode_probs(vec![1.0 / 66.0; 66], &rho) - 0.495).abs() < 1e-12);
        assert!((decode_probs(one_hot(66, 0), &pose) + 97.5).abs() < 1e-12);
        assert!((decode_probs(one_hot(66, 33), &pose) - 1.5).abs() < 1e-12);
        assert!(decode_probs(vec![1.0 / 66.0; 66], &pose).abs() < 1e-12);
    }

    #[test]
    fn decoding_is_shift_invariant() {
        let logits = random_tensor(&[66], 10);
        let shifted = Tensor::from_vec(logits.data().iter().map(|v| v + 37.0).collect());
        let mut tape = Tape::new();
        let a = tape.constant(logits);
        let b = tape.constant(shifted);
        let da = expectation_decode(&mut tape, a, &BinningSpec::pose()).unwrap();
        let db = expectation_decode(&mut tape, b, &BinningSpec::pose()).unwrap();
        assert!((tape.value(da).item() - tape.value(db).item()).abs() < 1e-12);
        assert!(tape.value(da).item().abs() < 97.5);
    }

    #[test]
    fn ablated_model_is_plain_backbone_plus_pose_head() {
        let mut cfg = ModelConfig::reduced();
        cfg.location_module = false;
        let params = ModelParams::init(cfg, 3).unwrap();
        assert!(params.location.is_none());
        let img = random_tensor(&[3, 16, 16], 11);

        let mut tape = Tape::new();
        let pv = params.register(&mut tape, false);
        let x = tape.constant(img.clone());
        let bundle = forward(&mut tape, &pv, x, false).unwrap();
        let full = [bundle.pose.pitch, bundle.pose.yaw, bundle.pose.roll].map(|v| tape.value(v).item());

        let mut tape2 = Tape::new();
        let pv2 = params.register(&mut tape2, false);
        let x2 = tape2.constant(img);
        let f = backbone_forward(&mut tape2, &pv2, x2).unwrap();
        let pose = pose_head(&mut tape2, &pv2.heads, f).unwrap();
        let plain = [pose.pitch, pose.yaw, pose.roll].map(|v| tape2.value(v).item());
        assert_eq!(full, plain);
    }

    #[test]
    fn inference_matches_training_tape() {
        let params = ModelParams::init(ModelConfig::reduced(), 4).unwrap();
        let img = random_tensor(&[3, 16, 16], 12);
        let inf = predict(&params, &img, true).unwrap();

        let mut tape = Tape::new();
        let pv = params.register(&mut tape, true);
        let x = tape.constant(img);
        let b = forward(&mut tape, &pv, x, true).unwrap();
        assert_eq!(inf.pose.pitch, tape.value(b.pose.pitch).item());
        assert_eq!(inf.pose.roll, tape.value(b.pose.roll).item());
        assert_eq!(inf.location.unwrap().rho, tape.value(b.location.unwrap().rho).item());
    }

    #[test]
    fn checkpoint_round_trip() {
        let params = ModelParams::init(ModelConfig::reduced(), 5).unwrap();
        let back = ModelParams::from_checkpoint(&params.to_checkpoint()).unwrap();
        assert_eq!(back, params);
        let mut ck = params.to_checkpoint();
        ck.entries.pop();
        assert!(ModelParams::from_checkpoint(&ck).is_err());
    }

    #[test]
    fn attention_submodule_gradients() {
        let params = ModelParams::init(ModelConfig::reduced(), 6).unwrap();
        let loc = params.location.unwrap();
        let inputs = vec![
            random_tensor(&[8, 4, 4], 13),
            loc.w1.clone(),
            loc.w2.clone(),
            loc.spatial_weight.clone(),
            loc.spatial_bias.clone(),
        ];
        let w: Vec<f64> = (0..128).map(|k| (k % 7) as f64 * 0.1 - 0.3).collect();
        let report = grad_check(
            |tape, v| {
                let lv = LocationVars {
                    w1: v[1],
                    w2: v[2],
                    spatial_weight: v[3],
                    spatial_bias: v[4],
                };
                let (_, fp) = channel_attention(tape, &lv, v[0])?;
                let (_, fl) = spatial_attention(tape, &lv, fp)?;
                tape.dot_const(fl, &w)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
