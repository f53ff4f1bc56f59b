//! The trainable model: a depthwise channel-attention head whose per-feature
//! gate multiplies the encoded image stack, followed by a small CNN backbone
//! and a linear classifier.
//!
//! The attention head convolves each input channel with `gamma` depthwise
//! filters, pools the result channel-wise (global average and max), averages
//! the pooled statistics over the filters of the same originating feature,
//! and squashes the sum through a sigmoid. Gates near 1 retain a feature's
//! channel; gates near 0 suppress it.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CafoError, Result};
use crate::rng::seed_stream;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepCaConfig {
    /// Depthwise filters per input channel.
    pub gamma: usize,
    pub kernel_size: usize,
    pub stride: usize,
    /// Zero padding; the default keeps the spatial extent for odd kernels.
    pub padding: usize,
}

impl Default for DepCaConfig {
    fn default() -> Self {
        Self { gamma: 3, kernel_size: 3, stride: 1, padding: 1 }
    }
}

impl DepCaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma < 1 || self.kernel_size < 1 || self.stride < 1 {
            return Err(CafoError::InvalidConfig(
                "depca: gamma, kernel size and stride must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub conv_blocks: Vec<ConvBlock>,
    /// Optional fully connected layer between pooling and the classifier.
    pub hidden_width: Option<usize>,
    pub num_classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            conv_blocks: vec![
                ConvBlock { out_channels: 16, kernel_size: 3, stride: 2 },
                ConvBlock { out_channels: 32, kernel_size: 3, stride: 2 },
            ],
            hidden_width: None,
            num_classes: 3,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_blocks.is_empty() {
            return Err(CafoError::InvalidConfig("backbone needs at least one conv block".into()));
        }
        if self.num_classes < 2 {
            return Err(CafoError::InvalidConfig("need at least 2 classes".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub depca: DepCaConfig,
    pub backbone: BackboneConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { depca: DepCaConfig::default(), backbone: BackboneConfig::default() }
    }
}

/// Per-instance channel-attention scores, clamped into the open interval
/// (0, 1) so downstream consumers can rely on the sigmoid range even when
/// the activation saturates in floating point.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionVector {
    pub values: Vec<f64>,
    pub instance_id: usize,
}

impl AttentionVector {
    pub fn new(values: Vec<f64>, instance_id: usize) -> Self {
        let tiny = f64::EPSILON;
        let values = values.into_iter().map(|v| v.clamp(tiny, 1.0 - tiny)).collect();
        Self { values, instance_id }
    }
}

/// All trainable tensors in declaration order: depthwise weights and bias,
/// conv block weights and biases, optional hidden layer, classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub cfg: ModelConfig,
    pub in_features: usize,
    pub tensors: Vec<Tensor>,
}

fn expected_shapes(cfg: &ModelConfig, d: usize) -> Vec<Vec<usize>> {
    let k = cfg.depca.kernel_size;
    let mut shapes = vec![vec![cfg.depca.gamma, d, k, k], vec![cfg.depca.gamma * d]];
    let mut in_ch = d;
    for block in &cfg.backbone.conv_blocks {
        shapes.push(vec![block.out_channels, in_ch, block.kernel_size, block.kernel_size]);
        shapes.push(vec![block.out_channels]);
        in_ch = block.out_channels;
    }
    if let Some(h) = cfg.backbone.hidden_width {
        shapes.push(vec![in_ch, h]);
        shapes.push(vec![h]);
        in_ch = h;
    }
    shapes.push(vec![in_ch, cfg.backbone.num_classes]);
    shapes.push(vec![cfg.backbone.num_classes]);
    shapes
}

/// Uniform Kaiming bound for a weight tensor: sqrt(6 / fan_in), where conv
/// fan-in is in_channels * kernel_area (one channel for depthwise filters)
/// and linear fan-in is the input width.
fn kaiming_bound(shape: &[usize], depthwise: bool) -> f64 {
    let fan_in = match shape.len() {
        4 => {
            if depthwise {
                shape[2] * shape[3]
            } else {
                shape[1] * shape[2] * shape[3]
            }
        }
        2 => shape[0],
        _ => 1,
    };
    (6.0 / fan_in as f64).sqrt()
}

impl ModelParams {
    /// Kaiming-uniform weights, zero biases, deterministic under the seed.
    pub fn init(cfg: &ModelConfig, in_features: usize, seed: u64) -> Result<Self> {
        cfg.depca.validate()?;
        cfg.backbone.validate()?;
        if in_features == 0 {
            return Err(CafoError::InvalidConfig("model needs at least one feature".into()));
        }
        let mut rng = seed_stream(seed, 0x6d6f64_656c);
        let shapes = expected_shapes(cfg, in_features);
        let classifier_weight = shapes.len() - 2;
        let tensors = shapes
            .iter()
            .enumerate()
            .map(|(idx, shape)| {
                // conv and hidden weights are Kaiming-uniform; biases and the
                // classifier start at zero so initial logits are uniform
                let is_weight = shape.len() > 1;
                if is_weight && idx != classifier_weight {
                    let bound = kaiming_bound(shape, idx == 0);
                    let n: usize = shape.iter().product();
                    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                    Tensor::from_parts(shape.clone(), data)
                } else {
                    Tensor::zeros(shape)
                }
            })
            .collect();
        Ok(Self { cfg: cfg.clone(), in_features, tensors })
    }

    pub fn num_classes(&self) -> usize {
        self.cfg.backbone.num_classes
    }
}

/// Graph handles for every parameter tensor, in declaration order.
pub struct ModelVars {
    pub vars: Vec<Var>,
}

/// Insert all parameters as graph leaves.
pub fn insert_params(g: &mut Graph, params: &ModelParams) -> ModelVars {
    ModelVars { vars: params.tensors.iter().map(|t| g.leaf(t.clone())).collect() }
}

/// Attention head: depthwise conv, channel-wise global average and max
/// pooling, feature-wise averaging over the filters of the same feature,
/// sigmoid of the sum. Input [B, D, L, L] -> gates [B, D].
pub fn depca_forward(
    g: &mut Graph,
    stack: Var,
    w: Var,
    bias: Var,
    cfg: &DepCaConfig,
) -> Result<Var> {
    let shape = g.shape(stack);
    if shape.len() != 4 {
        return Err(CafoError::ShapeMismatch {
            op: "depca_forward",
            detail: format!("expected [B, D, L, L], got {:?}", shape),
        });
    }
    let (b, d) = (shape[0], shape[1]);
    let gamma = g.shape(w)[0];
    // avg-pool + max-pool of each convolved channel; averaging the sum over
    // the filters of one feature equals averaging each pooled statistic
    // separately and adding
    let pooled = g.depthwise_conv_avgmax_sum(stack, w, bias, cfg.stride, cfg.padding)?;
    let grouped = g.reshape(pooled, vec![b, gamma, d])?;
    let summed = g.mean_axis(grouped, 1)?;
    Ok(g.sigmoid(summed))
}

/// Gate each channel of the stack by its attention score.
pub fn apply_attention(g: &mut Graph, stack: Var, attention: Var) -> Result<Var> {
    g.mul_channel(stack, attention)
}

/// Full forward pass: attention, gating, conv backbone, classifier.
/// Returns (logits [B, C], attention [B, D]).
pub fn model_forward(
    g: &mut Graph,
    stack: Var,
    params: &ModelParams,
    vars: &ModelVars,
) -> Result<(Var, Var)> {
    let mut it = vars.vars.iter().copied();
    let mut next = || {
        it.next().ok_or(CafoError::ShapeMismatch {
            op: "model_forward",
            detail: "parameter list shorter than the model layout".into(),
        })
    };
    let depca_w = next()?;
    let depca_b = next()?;
    let attention = depca_forward(g, stack, depca_w, depca_b, &params.cfg.depca)?;
    let mut x = apply_attention(g, stack, attention)?;
    for block in &params.cfg.backbone.conv_blocks {
        let w = next()?;
        let bias = next()?;
        let pad = (block.kernel_size - 1) / 2;
        let conv = g.conv2d(x, w, bias, block.stride, pad)?;
        x = g.relu(conv);
    }
    let mut pooled = g.global_avg_pool(x)?;
    if params.cfg.backbone.hidden_width.is_some() {
        let w = next()?;
        let bias = next()?;
        let lin = g.matmul(pooled, w)?;
        let lin = g.add_bias(lin, bias)?;
        pooled = g.relu(lin);
    }
    let cls_w = next()?;
    let cls_b = next()?;
    let logits = g.matmul(pooled, cls_w)?;
    let logits = g.add_bias(logits, cls_b)?;
    Ok((logits, attention))
}

/// Rows of a [B, D] attention value as clamped per-instance vectors.
pub fn extract_attentions(batch: &Tensor, instance_ids: &[usize]) -> Vec<AttentionVector> {
    let d = batch.shape()[1];
    batch
        .data()
        .chunks(d)
        .zip(instance_ids)
        .map(|(row, &id)| AttentionVector::new(row.to_vec(), id))
        .collect()
}

// ----------------------------------------------------------------------
// checkpoints
// ----------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"CAFOCKPT";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub epoch: usize,
    pub seed: u64,
    pub in_features: usize,
    pub model: ModelConfig,
}

/// Write a JSON header followed by the little-endian f64 parameter payload
/// in declaration order.
pub fn save_checkpoint(path: &Path, header: &CheckpointHeader, params: &ModelParams) -> Result<()> {
    let header_bytes = serde_json::to_vec(header)?;
    let mut f = fs::File::create(path)?;
    f.write_all(CHECKPOINT_MAGIC)?;
    f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    f.write_all(&header_bytes)?;
    for t in &params.tensors {
        for &v in t.data() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ModelParams)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|_| CafoError::MissingInput(path.display().to_string()))?
        .read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(CafoError::DataFormat("not a checkpoint file".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(CafoError::DataFormat("truncated checkpoint header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..16 + header_len])?;
    let shapes = expected_shapes(&header.model, header.in_features);
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let payload = &bytes[16 + header_len..];
    if payload.len() != total * 8 {
        return Err(CafoError::DataFormat(format!(
            "checkpoint payload holds {} bytes, layout implies {}",
            payload.len(),
            total * 8
        )));
    }
    let mut tensors = Vec::with_capacity(shapes.len());
    let mut off = 0;
    for shape in shapes {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let start = (off + i) * 8;
            data.push(f64::from_le_bytes(payload[start..start + 8].try_into().unwrap()));
        }
        off += n;
        tensors.push(Tensor::new(shape, data)?);
    }
    let params = ModelParams { cfg: header.model.clone(), in_features: header.in_features, tensors };
    Ok((header, params))
}
