//! The super-resolution 3D U-Net.
//!
//! Three encoder levels of two valid 3x3x3 convolutions each (the last one is
//! the bottleneck), separated by 2x2x2 max pooling. Two decoder levels each
//! upsample with a stride-2 transposed convolution, crop-concatenate the
//! matching encoder output and apply two convolutions. The super-resolution
//! tail upsamples the decoder output once more, concatenates it with a learned
//! 2x upsampling of the raw input, applies two convolutions and a 1x1x1 head
//! followed by a sigmoid.
//!
//! With the default kernel size an input cube of side `s` yields an output of
//! side `2s - 84` covering the centered `(s - 42)^3` input region, so the input
//! margin is 21 voxels per face.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, FormatError, Result};
use crate::io::{read_file, write_atomic, Cursor};
use crate::volume::Volume;

pub const KERNEL: usize = 3;
pub const LEVELS: usize = 3;
pub const CHECKPOINT_MAGIC: &[u8; 6] = b"RNET1\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Channels of the first encoder level; deeper levels double it.
    pub base_channels: usize,
    /// Channels of the super-resolution tail; `None` means `base_channels`.
    pub sr_tail_channels: Option<usize>,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig { base_channels: 16, sr_tail_channels: None }
    }
}

impl NetConfig {
    pub fn with_base(base_channels: usize) -> Self {
        NetConfig { base_channels, sr_tail_channels: None }
    }

    pub fn tail_channels(&self) -> usize {
        self.sr_tail_channels.unwrap_or(self.base_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::config("base_channels must be >= 1"));
        }
        if self.sr_tail_channels == Some(0) {
            return Err(Error::config("sr_tail_channels must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Valid convolution with cubic kernel of this side.
    Conv(usize),
    /// Stride-2, kernel-2 transposed convolution.
    UpConv,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl LayerSpec {
    fn new(name: &str, kind: LayerKind, in_channels: usize, out_channels: usize) -> Self {
        LayerSpec { name: name.to_string(), kind, in_channels, out_channels }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Conv(k) => vec![self.out_channels, self.in_channels, k, k, k],
            LayerKind::UpConv => vec![self.in_channels, self.out_channels, 2, 2, 2],
        }
    }

    fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv(k) => self.in_channels * k * k * k,
            // Each output voxel sees exactly one tap per input channel.
            LayerKind::UpConv => self.in_channels,
        }
    }
}

/// All layers in forward order.
pub fn layer_table(cfg: &NetConfig) -> Vec<LayerSpec> {
    use LayerKind::{Conv, UpConv};
    let c = cfg.base_channels;
    let t = cfg.tail_channels();
    let k = KERNEL;
    vec![
        LayerSpec::new("enc1.conv1", Conv(k), 1, c),
        LayerSpec::new("enc1.conv2", Conv(k), c, c),
        LayerSpec::new("enc2.conv1", Conv(k), c, 2 * c),
        LayerSpec::new("enc2.conv2", Conv(k), 2 * c, 2 * c),
        LayerSpec::new("enc3.conv1", Conv(k), 2 * c, 4 * c),
        LayerSpec::new("enc3.conv2", Conv(k), 4 * c, 4 * c),
        LayerSpec::new("dec2.up", UpConv, 4 * c, 2 * c),
        LayerSpec::new("dec2.conv1", Conv(k), 4 * c, 2 * c),
        LayerSpec::new("dec2.conv2", Conv(k), 2 * c, 2 * c),
        LayerSpec::new("dec1.up", UpConv, 2 * c, c),
        LayerSpec::new("dec1.conv1", Conv(k), 2 * c, c),
        LayerSpec::new("dec1.conv2", Conv(k), c, c),
        LayerSpec::new("sr.up", UpConv, c, t),
        LayerSpec::new("sr.input_up", UpConv, 1, t),
        LayerSpec::new("sr.conv1", Conv(k), 2 * t, t),
        LayerSpec::new("sr.conv2", Conv(k), t, t),
        LayerSpec::new("head", Conv(1), t, 1),
    ]
}

/// Per-axis spatial sizes through the network for a cubic input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapePlan {
    pub input_size: usize,
    /// `(stage name, spatial size after it)` in forward order.
    pub stages: Vec<(String, usize)>,
    pub output_size: usize,
    /// Input voxels per face not covered by the output.
    pub input_margin: usize,
}

pub fn shape_plan(input_size: usize, _cfg: &NetConfig) -> Result<ShapePlan> {
    let mut stages: Vec<(String, usize)> = Vec::new();
    let fail = |stage: &str, detail: String| Error::shape(format!("invalid input size {input_size}: {stage}: {detail}"));
    let conv = |stages: &mut Vec<(String, usize)>, name: &str, s: usize| -> Result<usize> {
        if s < KERNEL {
            return Err(fail(name, format!("size {s} smaller than kernel {KERNEL}")));
        }
        let out = s + 1 - KERNEL;
        stages.push((name.to_string(), out));
        Ok(out)
    };
    let mut s = input_size;
    let mut skips = Vec::new();
    for level in 1..=LEVELS {
        s = conv(&mut stages, &format!("enc{level}.conv1"), s)?;
        s = conv(&mut stages, &format!("enc{level}.conv2"), s)?;
        if level < LEVELS {
            if s % 2 != 0 {
                return Err(fail(&format!("enc{level}.pool"), format!("odd size {s} before pooling")));
            }
            skips.push(s);
            s /= 2;
            stages.push((format!("enc{level}.pool"), s));
        }
    }
    for level in (1..LEVELS).rev() {
        s *= 2;
        stages.push((format!("dec{level}.up"), s));
        let skip = skips[level - 1];
        if skip < s || (skip - s) % 2 != 0 {
            return Err(fail(&format!("dec{level}.concat"), format!("cannot center-crop skip of size {skip} to {s}")));
        }
        s = conv(&mut stages, &format!("dec{level}.conv1"), s)?;
        s = conv(&mut stages, &format!("dec{level}.conv2"), s)?;
    }
    s *= 2;
    stages.push(("sr.up".to_string(), s));
    let up_input = 2 * input_size;
    if up_input < s || (up_input - s) % 2 != 0 {
        return Err(fail("sr.concat", format!("cannot center-crop upsampled input {up_input} to {s}")));
    }
    s = conv(&mut stages, "sr.conv1", s)?;
    s = conv(&mut stages, "sr.conv2", s)?;
    if s == 0 {
        return Err(fail("sr.conv2", "empty output".into()));
    }
    stages.push(("head".to_string(), s));
    let covered = s / 2;
    Ok(ShapePlan { input_size, stages, output_size: s, input_margin: (input_size - covered) / 2 })
}

/// Network parameters plus the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    config: NetConfig,
    params: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Network<T> {
    /// He-normal (fan-in) weights and zero biases, deterministic in `seed`.
    pub fn build(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for layer in layer_table(&config) {
            let std = (2.0 / layer.fan_in() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let shape = layer.weight_shape();
            let n: usize = shape.iter().product();
            let w: Vec<T> = (0..n).map(|_| T::lit(normal.sample(&mut rng))).collect();
            params.push((format!("{}.weight", layer.name), Tensor::new(shape, w)?));
            params.push((format!("{}.bias", layer.name), Tensor::zeros(vec![layer.out_channels])));
        }
        Ok(Network { config, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn param_tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network { config: self.config, params: self.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect() }
    }

    /// Detaches the tensors (for the optimizer) and puts them back.
    pub fn take_params(&mut self) -> Vec<Tensor<T>> {
        self.params.iter_mut().map(|(_, t)| std::mem::replace(t, Tensor::zeros(vec![0]))).collect()
    }

    pub fn restore_params(&mut self, tensors: Vec<Tensor<T>>) {
        assert_eq!(tensors.len(), self.params.len());
        for ((_, slot), t) in self.params.iter_mut().zip(tensors) {
            *slot = t;
        }
    }

    /// Adds every parameter to `g` as a trainable leaf, in [`Network::params`] order.
    pub fn attach(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|(_, t)| g.param(t.clone())).collect()
    }

    /// Adds every parameter to `g` as a constant (inference).
    pub fn attach_frozen(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|(_, t)| g.constant(t.clone())).collect()
    }

    /// Records the forward pass on `g`. `input` must be `(1, s, s, s)` (any
    /// valid size per axis); `vars` come from [`Network::attach`].
    pub fn forward_graph(&self, g: &mut Graph<T>, vars: &[Var], input: Var) -> Result<Var> {
        let shape = g.value(input).shape().to_vec();
        if shape.len() != 4 || shape[0] != 1 {
            return Err(Error::shape(format!("network input must be (1,D,H,W), got {shape:?}")));
        }
        for &s in &shape[1..] {
            shape_plan(s, &self.config)?;
        }
        let mut layer = 0;
        let mut apply = |g: &mut Graph<T>, x: Var, kind: LayerKind| -> Result<Var> {
            let (w, b) = (vars[2 * layer], vars[2 * layer + 1]);
            layer += 1;
            match kind {
                LayerKind::Conv(_) => g.conv3d_valid(x, w, b),
                LayerKind::UpConv => g.conv_transpose3d_x2(x, w, b),
            }
        };
        let conv_relu = |g: &mut Graph<T>, x: Var, apply: &mut dyn FnMut(&mut Graph<T>, Var, LayerKind) -> Result<Var>| -> Result<Var> {
            let y = apply(g, x, LayerKind::Conv(KERNEL))?;
            Ok(g.relu(y))
        };

        let mut x = input;
        let mut skips = Vec::new();
        for level in 0..LEVELS {
            x = conv_relu(g, x, &mut apply)?;
            x = conv_relu(g, x, &mut apply)?;
            if level + 1 < LEVELS {
                skips.push(x);
                x = g.maxpool3d(x)?;
            }
        }
        for skip in skips.into_iter().rev() {
            let up = apply(g, x, LayerKind::UpConv)?;
            x = g.concat_center_crop(up, skip)?;
            x = conv_relu(g, x, &mut apply)?;
            x = conv_relu(g, x, &mut apply)?;
        }
        let up = apply(g, x, LayerKind::UpConv)?;
        let input_up = apply(g, input, LayerKind::UpConv)?;
        x = g.concat_center_crop(up, input_up)?;
        x = conv_relu(g, x, &mut apply)?;
        x = conv_relu(g, x, &mut apply)?;
        let logits = apply(g, x, LayerKind::Conv(1))?;
        Ok(g.sigmoid(logits))
    }

    /// Root probabilities for a single-channel volume.
    pub fn forward(&self, input: &Volume) -> Result<Volume> {
        let dims = input.dims();
        let data: Vec<T> = input.to_f32_vec().into_iter().map(|v| T::from(v).expect("finite")).collect();
        let mut g = Graph::new();
        let vars = self.attach_frozen(&mut g);
        let x = g.constant(Tensor::new(dims.to_vec(), data)?);
        let y = self.forward_graph(&mut g, &vars, x)?;
        let out = g.value(y);
        let s = out.shape();
        let probs = out.data().iter().map(|v| v.to_f32().expect("finite")).collect();
        Volume::from_f32([s[0], s[1], s[2], s[3]], probs)
    }
}

/// Training bookkeeping stored alongside the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckpointMeta {
    pub step: u64,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointJson {
    config: NetConfig,
    metadata: CheckpointMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network<f32>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        let params = self.network.params();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (name, t) in params {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let json = serde_json::to_vec(&CheckpointJson { config: self.network.config, metadata: self.meta })?;
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let mut cur = Cursor::new(bytes);
        let magic = cur.take(6, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(FormatError::BadMagic { expected: "RNET1\\0", found: magic.to_vec() }.into());
        }
        let count = cur.u32("parameter count")? as usize;
        let mut raw = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = cur.u16("name length")? as usize;
            let name = std::str::from_utf8(cur.take(len, "name")?)
                .map_err(|_| FormatError::Utf8 { field: "name" })?
                .to_string();
            let ndim = cur.u8("ndim")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.u32("dims")? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(FormatError::ShapeMismatch { name: name.clone() })?;
            let bytes = cur.take(n.checked_mul(4).ok_or(FormatError::Truncated { field: "payload" })?, "payload")?;
            let data: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            raw.push((name, shape, data));
        }
        let json_len = cur.u32("metadata length")? as usize;
        let json = cur.take(json_len, "metadata")?;
        if cur.remaining() > 0 {
            return Err(FormatError::TrailingBytes(cur.remaining()).into());
        }
        let meta: CheckpointJson = serde_json::from_slice(json).map_err(|e| FormatError::Metadata(e.to_string()))?;
        meta.config.validate()?;

        // Validate against the architecture implied by the stored config.
        let reference = Network::<f32>::build(meta.config, 0)?;
        let mut by_name: HashMap<String, (Vec<usize>, Vec<f32>)> = HashMap::new();
        for (name, shape, data) in raw {
            if reference.params.iter().all(|(n, _)| *n != name) {
                return Err(FormatError::UnexpectedParameter { name }.into());
            }
            by_name.insert(name, (shape, data));
        }
        let mut params = Vec::with_capacity(reference.params.len());
        for (name, t) in reference.params {
            let (shape, data) = by_name.remove(&name).ok_or_else(|| FormatError::MissingParameter { name: name.clone() })?;
            if shape != t.shape() {
                return Err(FormatError::ShapeMismatch { name }.into());
            }
            params.push((name, Tensor::new(shape, data)?));
        }
        Ok(Checkpoint { network: Network { config: meta.config, params }, meta: meta.metadata })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.encode()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        Self::decode(&read_file(path.as_ref())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sizes(plan: &ShapePlan) -> Vec<usize> {
        plan.stages.iter().map(|(_, s)| *s).collect()
    }

    #[test]
    fn plan_for_sixty() {
        let plan = shape_plan(60, &NetConfig::default()).unwrap();
        assert_eq!(
            sizes(&plan),
            vec![58, 56, 28, 26, 24, 12, 10, 8, 16, 14, 12, 24, 22, 20, 40, 38, 36, 36]
        );
        assert_eq!(plan.output_size, 36);
        assert_eq!(plan.input_margin, 21);
    }

    #[test]
    fn plan_limits() {
        let cfg = NetConfig::default();
        assert_eq!(shape_plan(44, &cfg).unwrap().output_size, 4);
        let e = shape_plan(46, &cfg).unwrap_err().to_string();
        assert!(e.contains("pool"), "{e}");
        let e = shape_plan(40, &cfg).unwrap_err().to_string();
        assert!(e.contains("dec1.conv2"), "{e}");
        assert!(shape_plan(2, &cfg).unwrap_err().to_string().contains("enc1.conv1"));
    }

    #[test]
    fn build_is_deterministic() {
        let a = Network::<f32>::build(NetConfig::with_base(2), 3).unwrap();
        let b = Network::<f32>::build(NetConfig::with_base(2), 3).unwrap();
        let c = Network::<f32>::build(NetConfig::with_base(2), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.params().iter().filter(|(n, _)| n.ends_with(".bias")).all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn tampered_dim_is_shape_mismatch() {
        let ck = Checkpoint { network: Network::build(NetConfig::with_base(1), 1).unwrap(), meta: CheckpointMeta::default() };
        let mut bytes = ck.encode().unwrap();
        // First parameter: magic(6) count(4) namelen(2) name ndim(1) dims...
        let name_len = u16::from_le_bytes([bytes[10], bytes[11]]) as usize;
        let dim0 = 12 + name_len + 1;
        bytes[dim0..dim0 + 4].copy_from_slice(&2u32.to_le_bytes());
        // Keep the payload length consistent with the tampered dims.
        let old: usize = ck.network.params()[0].1.numel();
        let insert_at = dim0 + 4 * 5;
        let extra = vec![0u8; old * 4];
        bytes.splice(insert_at..insert_at, extra);
        let e = Checkpoint::decode(&bytes).unwrap_err();
        assert_eq!(e.to_string(), "shape mismatch enc1.conv1.weight");
    }

    #[test]
    fn corrupt_checkpoints_fail() {
        let ck = Checkpoint { network: Network::build(NetConfig::with_base(1), 1).unwrap(), meta: CheckpointMeta { step: 5, seed: 1 } };
        let bytes = ck.encode().unwrap();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).unwrap_err().to_string().contains("bad magic"));
        assert_eq!(Checkpoint::decode(&bytes).unwrap(), ck);
    }
}
