//! Desk-scale vision-language model with a frozen decoder.
//!
//! Frozen: a seeded vision-feature stub keyed by image id and a stack of
//! attention + feed-forward decoder blocks. Trainable: the linear projection
//! from vision features into the model dimension and the token embedding,
//! which is also the (tied) output head. Loss is next-token cross-entropy on
//! answer tokens only.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attn::{
    multi_head_backward_input, multi_head_forward_cached, AttentionConfig, AttentionParams,
    AttnError, CrossProjection, MultiHeadCache,
};
use crate::gradcheck::{DifferentiableOp, GradCheckError};
use crate::mask::{AttentionVariant, ImageSelfAttention};
use crate::modseq::{LayoutConfig, ModalityTag};
use crate::template::{self, Conversation, HashTokenizer, RenderedSample, Round, Tokenizer};
use crate::tensor::Matrix;

const CHECKPOINT_MAGIC: &[u8; 8] = b"MMCATOY\0";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown image id {0:?}")]
    UnknownImage(String),
    #[error("sample has no answer tokens to score")]
    EmptyLossMask,
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("empty batch")]
    EmptyBatch,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Attn(#[from] AttnError),
    #[error(transparent)]
    Template(#[from] template::TemplateError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub vision_dim: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub image_token_count: usize,
    pub max_sequence_length: usize,
    pub variant: AttentionVariant,
    pub image_self: ImageSelfAttention,
    pub normalize_dual_softmax: bool,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            vision_dim: 8,
            model_dim: 16,
            num_heads: 2,
            num_layers: 2,
            ffn_dim: 32,
            vocab_size: 32,
            image_token_count: 4,
            max_sequence_length: 512,
            variant: AttentionVariant::Mmca,
            image_self: ImageSelfAttention::Block,
            normalize_dual_softmax: false,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn attention(&self) -> Result<AttentionConfig, ModelError> {
        let mut c = AttentionConfig::new(self.variant, self.num_heads, self.model_dim)?;
        c.image_self = self.image_self;
        c.normalize_dual_softmax = self.normalize_dual_softmax;
        Ok(c)
    }

    pub fn layout(&self) -> Result<LayoutConfig, ModelError> {
        LayoutConfig::new(self.image_token_count, self.max_sequence_length)
            .map_err(|e| ModelError::Config(e.to_string()))
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.vision_dim == 0 || self.ffn_dim == 0 || self.num_layers == 0 {
            return Err(ModelError::Config("dimensions must be positive".into()));
        }
        if self.vocab_size < 3 {
            return Err(ModelError::Config("vocab_size must be at least 3".into()));
        }
        self.attention()?;
        self.layout()?;
        Ok(())
    }
}

fn id_hash(id: &str) -> u64 {
    let digest = Sha256::digest(id.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Fixed image features standing in for a frozen vision encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionStub {
    features: BTreeMap<String, Matrix>,
}

impl VisionStub {
    /// Features of each id are a deterministic function of `(seed, id)`.
    pub fn new<'a>(
        image_ids: impl IntoIterator<Item = &'a str>,
        tokens: usize,
        vision_dim: usize,
        seed: u64,
    ) -> Self {
        let features = image_ids
            .into_iter()
            .map(|id| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ id_hash(id));
                (
                    id.to_string(),
                    Matrix::random_normal(tokens, vision_dim, 1.0, &mut rng),
                )
            })
            .collect();
        Self { features }
    }

    pub fn features(&self, id: &str) -> Result<&Matrix, ModelError> {
        self.features
            .get(id)
            .ok_or_else(|| ModelError::UnknownImage(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub attention: AttentionParams,
    /// `model_dim × ffn_dim`
    pub w1: Matrix,
    /// `ffn_dim × model_dim`
    pub w2: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenParams {
    pub vision: VisionStub,
    pub layers: Vec<DecoderLayer>,
}

impl FrozenParams {
    fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (id, m) in &self.vision.features {
            out.push((format!("vision.{id}"), m));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, m) in layer.attention.named() {
                out.push((format!("layer{l}.{name}"), m));
            }
            out.push((format!("layer{l}.w1"), &layer.w1));
            out.push((format!("layer{l}.w2"), &layer.w2));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.attention.parameter_count() + l.w1.as_slice().len() + l.w2.as_slice().len())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainableParams {
    /// `vision_dim × model_dim`
    pub projection: Matrix,
    /// `vocab_size × model_dim`, doubles as the output head.
    pub embedding: Matrix,
}

impl TrainableParams {
    pub fn parameter_count(&self) -> usize {
        self.projection.as_slice().len() + self.embedding.as_slice().len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainableGrads {
    pub projection: Matrix,
    pub embedding: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    config: ToyConfig,
    attention: AttentionConfig,
    frozen: FrozenParams,
    trainable: TrainableParams,
}

struct LayerCache {
    attn: MultiHeadCache,
    /// tanh activations of the feed-forward hidden layer
    act: Matrix,
}

struct ForwardCache {
    layers: Vec<LayerCache>,
    hidden: Matrix,
}

impl ToyModel {
    pub fn new<'a>(
        config: ToyConfig,
        image_ids: impl IntoIterator<Item = &'a str>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let attention = config.attention()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let m = config.model_dim;
        let layers = (0..config.num_layers)
            .map(|_| {
                let attn = AttentionParams::random(&attention, &mut rng);
                let w1 =
                    Matrix::random_normal(m, config.ffn_dim, 1.0 / (m as f64).sqrt(), &mut rng);
                let w2 = Matrix::random_normal(
                    config.ffn_dim,
                    m,
                    0.5 / (config.ffn_dim as f64).sqrt(),
                    &mut rng,
                );
                DecoderLayer {
                    attention: attn,
                    w1,
                    w2,
                }
            })
            .collect();
        let projection = Matrix::random_normal(
            config.vision_dim,
            m,
            1.0 / (config.vision_dim as f64).sqrt(),
            &mut rng,
        );
        let embedding = Matrix::random_normal(config.vocab_size, m, 0.5, &mut rng);
        let vision = VisionStub::new(
            image_ids,
            config.image_token_count,
            config.vision_dim,
            config.seed.rotate_left(17),
        );
        Ok(Self {
            config,
            attention,
            frozen: FrozenParams { vision, layers },
            trainable: TrainableParams {
                projection,
                embedding,
            },
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn frozen(&self) -> &FrozenParams {
        &self.frozen
    }

    pub fn trainable(&self) -> &TrainableParams {
        &self.trainable
    }

    /// Replaces the trainable parameters; shapes must match.
    pub fn set_trainable(&mut self, params: TrainableParams) -> Result<(), ModelError> {
        if params.projection.shape() != self.trainable.projection.shape()
            || params.embedding.shape() != self.trainable.embedding.shape()
        {
            return Err(ModelError::Shape(
                "trainable parameter shapes differ".into(),
            ));
        }
        self.trainable = params;
        Ok(())
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.trainable.parameter_count()
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable_parameter_count() + self.frozen.parameter_count()
    }

    /// Token embeddings at text positions, projected vision features at image positions.
    pub fn input_embeddings(&self, sample: &RenderedSample) -> Result<Matrix, ModelError> {
        input_embeddings(&self.config, &self.frozen, &self.trainable, sample)
    }

    pub fn forward(&self, sample: &RenderedSample) -> Result<Matrix, ModelError> {
        Ok(forward_cached(
            &self.attention,
            &self.config,
            &self.frozen,
            &self.trainable,
            sample,
        )?
        .0)
    }

    pub fn loss(&self, sample: &RenderedSample) -> Result<f64, ModelError> {
        answer_loss(&self.forward(sample)?, sample)
    }

    /// Mean answer loss of the batch and gradients for the trainable
    /// parameters only.
    pub fn loss_and_grads(
        &self,
        batch: &[RenderedSample],
    ) -> Result<(f64, TrainableGrads), ModelError> {
        batch_loss_and_grads(
            &self.attention,
            &self.config,
            &self.frozen,
            &self.trainable,
            batch,
        )
    }

    /// One optimizer step on the trainable partition. Frozen parameters are
    /// never borrowed mutably.
    pub fn train_step(
        &mut self,
        batch: &[RenderedSample],
        opt: &mut OptimState,
    ) -> Result<f64, ModelError> {
        let (loss, grads) = batch_loss_and_grads(
            &self.attention,
            &self.config,
            &self.frozen,
            &self.trainable,
            batch,
        )?;
        if !loss.is_finite() {
            return Err(ModelError::NonFiniteLoss);
        }
        opt.step(&mut self.trainable, &grads)?;
        Ok(loss)
    }

    /// SHA-256 over every frozen tensor (name, shape and little-endian data).
    pub fn frozen_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, m) in self.frozen.named() {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((m.rows() as u64).to_le_bytes());
            h.update((m.cols() as u64).to_le_bytes());
            for v in m.as_slice() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Binary checkpoint: magic, version, JSON config header, then named
    /// `f64` tensors.
    pub fn save_checkpoint(&self, path: &Path) -> Result<(), ModelError> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        let mut tensors: Vec<(String, &Matrix)> = vec![
            ("projection".into(), &self.trainable.projection),
            ("embedding".into(), &self.trainable.embedding),
        ];
        tensors.extend(self.frozen.named());
        let header = serde_json::json!({
            "format_version": CHECKPOINT_VERSION,
            "config": self.config,
            "trainable": ["projection", "embedding"],
            "tensor_count": tensors.len(),
        });
        let header =
            serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        for (name, m) in tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(m.rows() as u32).to_le_bytes())?;
            w.write_all(&(m.cols() as u32).to_le_bytes())?;
            for v in m.as_slice() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self, ModelError> {
        Self::read_checkpoint(fs::File::open(path)?)
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self, ModelError> {
        let bad = |m: &str| ModelError::Checkpoint(m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let header_len = read_u32(&mut r)? as usize;
        let mut header = vec![0u8; header_len];
        r.read_exact(&mut header)?;
        let header: serde_json::Value =
            serde_json::from_slice(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let config: ToyConfig = serde_json::from_value(header["config"].clone())
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let count = header["tensor_count"]
            .as_u64()
            .ok_or_else(|| bad("missing tensor_count"))? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("tensor name is not utf-8"))?;
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            let mut b = [0u8; 8];
            for _ in 0..rows * cols {
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            tensors.insert(name, Matrix::from_vec(rows, cols, data));
        }
        let mut take = |name: &str| {
            tensors
                .remove(name)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing tensor {name}")))
        };
        let projection = take("projection")?;
        let embedding = take("embedding")?;
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let cross = if config.variant == AttentionVariant::CausalPlusCross {
                Some(CrossProjection {
                    wkx: take(&format!("layer{l}.wkx"))?,
                    wvx: take(&format!("layer{l}.wvx"))?,
                })
            } else {
                None
            };
            layers.push(DecoderLayer {
                attention: AttentionParams {
                    wq: take(&format!("layer{l}.wq"))?,
                    wk: take(&format!("layer{l}.wk"))?,
                    wv: take(&format!("layer{l}.wv"))?,
                    wo: take(&format!("layer{l}.wo"))?,
                    cross,
                },
                w1: take(&format!("layer{l}.w1"))?,
                w2: take(&format!("layer{l}.w2"))?,
            });
        }
        let mut features = BTreeMap::new();
        for (name, m) in tensors {
            let id = name
                .strip_prefix("vision.")
                .ok_or_else(|| ModelError::Checkpoint(format!("unexpected tensor {name}")))?;
            features.insert(id.to_string(), m);
        }
        config.validate()?;
        Ok(Self {
            attention: config.attention()?,
            config,
            frozen: FrozenParams {
                vision: VisionStub { features },
                layers,
            },
            trainable: TrainableParams {
                projection,
                embedding,
            },
        })
    }

    #[cfg(test)]
    fn frozen_mut(&mut self) -> &mut FrozenParams {
        &mut self.frozen
    }
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn input_embeddings(
    config: &ToyConfig,
    frozen: &FrozenParams,
    trainable: &TrainableParams,
    sample: &RenderedSample,
) -> Result<Matrix, ModelError> {
    let d = sample.len();
    let m = config.model_dim;
    let mut x = Matrix::zeros(d, m);
    let mut offset_in_block = 0usize;
    let mut last_block = None;
    for (i, tag) in sample.tags.tags().iter().enumerate() {
        match tag {
            ModalityTag::Text => {
                let id = sample.token_ids[i] as usize;
                if id >= config.vocab_size {
                    return Err(ModelError::Shape(format!(
                        "token id {id} outside vocab of {}",
                        config.vocab_size
                    )));
                }
                x.row_mut(i).copy_from_slice(trainable.embedding.row(id));
            }
            ModalityTag::Image { block_id } => {
                if last_block != Some(*block_id) {
                    offset_in_block = 0;
                    last_block = Some(*block_id);
                }
                let image_id = sample
                    .image_ids
                    .get(*block_id as usize - 1)
                    .ok_or_else(|| ModelError::UnknownImage(format!("block {block_id}")))?;
                let feats = frozen.vision.features(image_id)?;
                let row = feats.row(offset_in_block % feats.rows());
                for (c, out) in x.row_mut(i).iter_mut().enumerate() {
                    *out = row
                        .iter()
                        .enumerate()
                        .map(|(k, f)| f * trainable.projection[(k, c)])
                        .sum();
                }
                offset_in_block += 1;
            }
        }
    }
    Ok(x)
}

fn forward_cached(
    attention: &AttentionConfig,
    config: &ToyConfig,
    frozen: &FrozenParams,
    trainable: &TrainableParams,
    sample: &RenderedSample,
) -> Result<(Matrix, ForwardCache), ModelError> {
    let mut x = input_embeddings(config, frozen, trainable, sample)?;
    let mut layers = Vec::with_capacity(frozen.layers.len());
    for layer in &frozen.layers {
        let (attn_out, attn_cache) =
            multi_head_forward_cached(attention, &x, &layer.attention, &sample.tags)?;
        let h1 = x.add(&attn_out);
        let act = h1.matmul(&layer.w1).map(f64::tanh);
        x = h1.add(&act.matmul(&layer.w2));
        layers.push(LayerCache {
            attn: attn_cache,
            act,
        });
    }
    let logits = x.matmul_t(&trainable.embedding);
    Ok((logits, ForwardCache { layers, hidden: x }))
}

/// `(position, target token)` pairs whose target carries loss.
fn scored_positions(sample: &RenderedSample) -> Vec<(usize, usize)> {
    (1..sample.len())
        .filter(|&t| sample.loss_mask[t])
        .map(|t| (t - 1, sample.token_ids[t] as usize))
        .collect()
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Mean next-token cross-entropy over positions whose target token is in
/// an answer span. Logits elsewhere are never read.
pub fn answer_loss(logits: &Matrix, sample: &RenderedSample) -> Result<f64, ModelError> {
    if logits.rows() != sample.len() {
        return Err(ModelError::Shape(format!(
            "logits have {} rows, sample has {} tokens",
            logits.rows(),
            sample.len()
        )));
    }
    let positions = scored_positions(sample);
    if positions.is_empty() {
        return Err(ModelError::EmptyLossMask);
    }
    let mut total = 0.0;
    for &(p, target) in &positions {
        if target >= logits.cols() {
            return Err(ModelError::Shape(format!("target {target} outside vocab")));
        }
        total -= log_softmax_row(logits.row(p))[target];
    }
    let loss = total / positions.len() as f64;
    if !loss.is_finite() {
        return Err(ModelError::NonFiniteLoss);
    }
    Ok(loss)
}

fn answer_loss_grad(logits: &Matrix, sample: &RenderedSample) -> Matrix {
    let positions = scored_positions(sample);
    let n = positions.len() as f64;
    let mut g = Matrix::zeros(logits.rows(), logits.cols());
    for (p, target) in positions {
        let probs: Vec<f64> = log_softmax_row(logits.row(p))
            .into_iter()
            .map(f64::exp)
            .collect();
        let row = g.row_mut(p);
        for (c, pr) in probs.into_iter().enumerate() {
            row[c] += pr / n;
        }
        row[target] -= 1.0 / n;
    }
    g
}

fn sample_loss_and_grads(
    attention: &AttentionConfig,
    config: &ToyConfig,
    frozen: &FrozenParams,
    trainable: &TrainableParams,
    sample: &RenderedSample,
) -> Result<(f64, TrainableGrads), ModelError> {
    let (logits, cache) = forward_cached(attention, config, frozen, trainable, sample)?;
    let loss = answer_loss(&logits, sample)?;
    let d_logits = answer_loss_grad(&logits, sample);
    // tied head: logits = hidden · Eᵀ
    let mut d_embedding = d_logits.t_matmul(&cache.hidden);
    let mut dx = d_logits.matmul(&trainable.embedding);
    for (layer, lc) in frozen.layers.iter().zip(&cache.layers).rev() {
        let d_act = dx.matmul_t(&layer.w2);
        let d_pre = d_act.hadamard(&lc.act.map(|a| 1.0 - a * a));
        let d_h1 = dx.add(&d_pre.matmul_t(&layer.w1));
        dx = d_h1.add(&multi_head_backward_input(
            attention,
            &layer.attention,
            &lc.attn,
            &d_h1,
        )?);
    }
    let mut d_projection = Matrix::zeros(config.vision_dim, config.model_dim);
    let mut offset_in_block = 0usize;
    let mut last_block = None;
    for (i, tag) in sample.tags.tags().iter().enumerate() {
        match tag {
            ModalityTag::Text => {
                let id = sample.token_ids[i] as usize;
                let g = dx.row(i);
                for (e, gv) in d_embedding.row_mut(id).iter_mut().zip(g) {
                    *e += gv;
                }
            }
            ModalityTag::Image { block_id } => {
                if last_block != Some(*block_id) {
                    offset_in_block = 0;
                    last_block = Some(*block_id);
                }
                let feats = frozen
                    .vision
                    .features(&sample.image_ids[*block_id as usize - 1])?;
                let f = feats.row(offset_in_block % feats.rows());
                for (k, fk) in f.iter().enumerate() {
                    for (c, gv) in dx.row(i).iter().enumerate() {
                        d_projection[(k, c)] += fk * gv;
                    }
                }
                offset_in_block += 1;
            }
        }
    }
    Ok((
        loss,
        TrainableGrads {
            projection: d_projection,
            embedding: d_embedding,
        },
    ))
}

fn batch_loss_and_grads(
    attention: &AttentionConfig,
    config: &ToyConfig,
    frozen: &FrozenParams,
    trainable: &TrainableParams,
    batch: &[RenderedSample],
) -> Result<(f64, TrainableGrads), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut grads = TrainableGrads {
        projection: Matrix::zeros(config.vision_dim, config.model_dim),
        embedding: Matrix::zeros(config.vocab_size, config.model_dim),
    };
    for sample in batch {
        let (l, g) = sample_loss_and_grads(attention, config, frozen, trainable, sample)?;
        loss += l / n;
        grads.projection.add_assign(&g.projection.scale(1.0 / n));
        grads.embedding.add_assign(&g.embedding.scale(1.0 / n));
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub total_steps: usize,
}

impl OptimConfig {
    /// Peak lr 1e-3, betas (0.0, 0.95), 10% linear warm-up, no weight decay.
    pub fn new(total_steps: usize) -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.0,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_fraction: 0.10,
            total_steps,
        }
    }

    pub fn with_learning_rate(mut self, lr: f64) -> Self {
        self.learning_rate = lr;
        self
    }

    fn validate(&self) -> Result<(), ModelError> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(ModelError::Config(format!(
                    "{name} must be in [0, 1), got {b}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(ModelError::Config(
                "warmup_fraction must be in [0, 1]".into(),
            ));
        }
        if self.learning_rate < 0.0 || self.weight_decay < 0.0 || self.eps <= 0.0 {
            return Err(ModelError::Config(
                "negative learning rate, weight decay or eps".into(),
            ));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.total_steps as f64).ceil() as usize
    }

    /// Linear warm-up to the peak, constant afterwards. `step` is 0-based.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let warmup = self.warmup_steps();
        if warmup == 0 || step >= warmup {
            self.learning_rate
        } else {
            self.learning_rate * (step + 1) as f64 / warmup as f64
        }
    }
}

/// AdamW state; moment buffers exist for the trainable tensors only.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: OptimConfig,
    step: usize,
    m_projection: Matrix,
    v_projection: Matrix,
    m_embedding: Matrix,
    v_embedding: Matrix,
}

impl OptimState {
    pub fn new(config: OptimConfig, model: &ToyModel) -> Result<Self, ModelError> {
        config.validate()?;
        let (pr, pc) = model.trainable.projection.shape();
        let (er, ec) = model.trainable.embedding.shape();
        Ok(Self {
            config,
            step: 0,
            m_projection: Matrix::zeros(pr, pc),
            v_projection: Matrix::zeros(pr, pc),
            m_embedding: Matrix::zeros(er, ec),
            v_embedding: Matrix::zeros(er, ec),
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn buffer_count(&self) -> usize {
        4
    }

    fn step(
        &mut self,
        params: &mut TrainableParams,
        grads: &TrainableGrads,
    ) -> Result<(), ModelError> {
        if !(grads.projection.is_finite() && grads.embedding.is_finite()) {
            return Err(ModelError::NonFiniteLoss);
        }
        let lr = self.config.learning_rate_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let update = |p: &mut Matrix, g: &Matrix, m: &mut Matrix, v: &mut Matrix| {
            let p = p.as_mut_slice();
            let m = m.as_mut_slice();
            let v = v.as_mut_slice();
            for (i, &gi) in g.as_slice().iter().enumerate() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p[i] -= lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * p[i]);
            }
        };
        update(
            &mut params.projection,
            &grads.projection,
            &mut self.m_projection,
            &mut self.v_projection,
        );
        update(
            &mut params.embedding,
            &grads.embedding,
            &mut self.m_embedding,
            &mut self.v_embedding,
        );
        Ok(())
    }
}

/// Answer loss of one sample as a function of `[projection, embedding]`,
/// for finite-difference checking.
pub struct AnswerLossOp<'a> {
    pub model: &'a ToyModel,
    pub sample: &'a RenderedSample,
}

impl AnswerLossOp<'_> {
    fn with_params(&self, params: &[Matrix]) -> TrainableParams {
        TrainableParams {
            projection: params[0].clone(),
            embedding: params[1].clone(),
        }
    }
}

impl DifferentiableOp for AnswerLossOp<'_> {
    fn forward(&self, params: &[Matrix]) -> Result<Matrix, GradCheckError> {
        let m = self.model;
        let trainable = self.with_params(params);
        let (logits, _) =
            forward_cached(&m.attention, &m.config, &m.frozen, &trainable, self.sample)
                .map_err(|e| GradCheckError::NonFinite(e.to_string()))?;
        let loss = answer_loss(&logits, self.sample)
            .map_err(|e| GradCheckError::NonFinite(e.to_string()))?;
        Ok(Matrix::from_vec(1, 1, vec![loss]))
    }

    fn backward(&self, params: &[Matrix], d_out: &Matrix) -> Result<Vec<Matrix>, GradCheckError> {
        let m = self.model;
        let trainable = self.with_params(params);
        let (_, g) =
            sample_loss_and_grads(&m.attention, &m.config, &m.frozen, &trainable, self.sample)
                .map_err(|e| GradCheckError::NonFinite(e.to_string()))?;
        let s = d_out[(0, 0)];
        Ok(vec![g.projection.scale(s), g.embedding.scale(s)])
    }
}

/// Synthetic task: each conversation shows one image and asks for its label
/// word, so the answer depends on the image content only.
#[derive(Debug, Clone)]
pub struct CopyTask {
    pub conversations: Vec<Conversation>,
    pub image_ids: Vec<String>,
    pub labels: Vec<u32>,
    pub tokenizer: HashTokenizer,
}

const COPY_QUESTION: &str = "which label?";

impl CopyTask {
    /// Label words get distinct ids that no template or question word uses.
    pub fn new(num_images: usize, vocab_size: usize) -> Result<Self, ModelError> {
        let tokenizer = HashTokenizer::new(vocab_size);
        let mut reserved: Vec<u32> = ["###", "Image", "1:", "Question:", "Answer:"]
            .iter()
            .map(|w| tokenizer.word_id(w))
            .chain(tokenizer.encode(COPY_QUESTION))
            .collect();
        let mut labels = Vec::new();
        let mut words = Vec::new();
        let mut candidate = 0usize;
        while labels.len() < num_images {
            if candidate > 100_000 {
                return Err(ModelError::Config(format!(
                    "vocab of {vocab_size} cannot hold {num_images} distinct labels"
                )));
            }
            let word = format!("label{candidate}");
            let id = tokenizer.word_id(&word);
            if !reserved.contains(&id) {
                reserved.push(id);
                labels.push(id);
                words.push(word);
            }
            candidate += 1;
        }
        let image_ids: Vec<String> = (0..num_images).map(|i| format!("img{i}")).collect();
        let conversations = image_ids
            .iter()
            .zip(&words)
            .map(|(img, word)| Conversation {
                system: String::new(),
                rounds: vec![Round {
                    images: vec![img.clone()],
                    question: COPY_QUESTION.into(),
                    answer: word.clone(),
                }],
            })
            .collect();
        Ok(Self {
            conversations,
            image_ids,
            labels,
            tokenizer,
        })
    }

    pub fn render(&self, layout: &LayoutConfig) -> Result<Vec<RenderedSample>, ModelError> {
        self.conversations
            .iter()
            .map(|c| Ok(template::render(c, &self.tokenizer, layout)?))
            .collect()
    }
}

/// Full-batch training run on `samples`; returns the loss before each step.
pub fn train(
    model: &mut ToyModel,
    samples: &[RenderedSample],
    opt: &mut OptimState,
    steps: usize,
) -> Result<Vec<f64>, ModelError> {
    (0..steps).map(|_| model.train_step(samples, opt)).collect()
}

/// `step,loss` CSV with a header line.
pub fn write_curve<W: Write>(losses: &[f64], mut w: W) -> std::io::Result<()> {
    writeln!(w, "step,loss")?;
    for (step, loss) in losses.iter().enumerate() {
        writeln!(w, "{step},{loss}")?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;

    fn task_model(variant: AttentionVariant) -> (ToyModel, Vec<RenderedSample>) {
        let config = ToyConfig {
            variant,
            ..ToyConfig::default()
        };
        let task = CopyTask::new(6, config.vocab_size).unwrap();
        let model = ToyModel::new(config, task.image_ids.iter().map(String::as_str)).unwrap();
        let samples = task.render(&config.layout().unwrap()).unwrap();
        (model, samples)
    }

    #[test]
    fn trainable_count_matches_formula() {
        let (model, _) = task_model(AttentionVariant::Mmca);
        let c = model.config();
        assert_eq!(
            model.trainable_parameter_count(),
            c.vision_dim * c.model_dim + c.vocab_size * c.model_dim
        );
    }

    #[test]
    fn variant_changes_only_attention_params() {
        let counts: Vec<(usize, usize)> = AttentionVariant::ALL
            .iter()
            .map(|&v| {
                let (m, _) = task_model(v);
                (m.trainable_parameter_count(), m.parameter_count())
            })
            .collect();
        let (causal, cross, mmca) = (counts[0], counts[1], counts[2]);
        assert_eq!(causal, mmca);
        assert_eq!(cross.0, mmca.0);
        assert!(cross.1 > mmca.1);
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let (_, samples) = task_model(AttentionVariant::Mmca);
        let s = &samples[0];
        let logits = Matrix::zeros(s.len(), 32);
        assert!((answer_loss(&logits, s).unwrap() - 32f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_loss_mask_is_an_error() {
        let (model, mut samples) = task_model(AttentionVariant::Mmca);
        let s = &mut samples[0];
        s.loss_mask.iter_mut().for_each(|b| *b = false);
        assert!(matches!(model.loss(s), Err(ModelError::EmptyLossMask)));
    }

    #[test]
    fn unknown_image_is_an_error() {
        let (model, mut samples) = task_model(AttentionVariant::Mmca);
        samples[0].image_ids[0] = "nope".into();
        assert!(matches!(
            model.forward(&samples[0]),
            Err(ModelError::UnknownImage(_))
        ));
    }

    #[test]
    fn zero_projection_gives_zero_image_inputs() {
        let (mut model, samples) = task_model(AttentionVariant::Mmca);
        let mut t = model.trainable().clone();
        t.projection = Matrix::zeros(t.projection.rows(), t.projection.cols());
        model.set_trainable(t).unwrap();
        let x = model.input_embeddings(&samples[0]).unwrap();
        for b in samples[0].tags.image_blocks() {
            for i in b.start..b.end {
                assert!(x.row(i).iter().all(|&v| v == 0.0));
            }
        }
        assert!(model.forward(&samples[0]).unwrap().is_finite());
    }

    /// `t t [i i i] t t t t t`, last three targets scored.
    fn ten_token_sample() -> RenderedSample {
        let seq = crate::modseq::build_sequence(&[
            (crate::modseq::Modality::Text, 2),
            (crate::modseq::Modality::Image, 3),
            (crate::modseq::Modality::Text, 5),
        ])
        .unwrap();
        RenderedSample {
            token_ids: vec![5, 9, 0, 0, 0, 3, 17, 22, 7, 1],
            tags: seq,
            loss_mask: vec![
                false, false, false, false, false, false, false, true, true, true,
            ],
            image_count: 1,
            image_ids: vec!["a".into()],
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for v in AttentionVariant::ALL {
            let config = ToyConfig {
                variant: v,
                image_token_count: 3,
                seed: 5,
                ..ToyConfig::default()
            };
            let sample = ten_token_sample();
            let model = ToyModel::new(config, ["a"]).unwrap();
            let op = AnswerLossOp {
                model: &model,
                sample: &sample,
            };
            let t = model.trainable();
            let r = grad_check(&op, &[t.projection.clone(), t.embedding.clone()], 1e-5).unwrap();
            assert!(r.passed(), "{v}: {r:?}");
        }
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let (mut model, samples) = task_model(AttentionVariant::Mmca);
        let before = model.clone();
        let mut opt =
            OptimState::new(OptimConfig::new(10).with_learning_rate(0.0), &model).unwrap();
        model.train_step(&samples, &mut opt).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn fingerprint_behaviour() {
        let (a, samples) = task_model(AttentionVariant::Mmca);
        let (mut b, _) = task_model(AttentionVariant::Mmca);
        assert_eq!(a.frozen_fingerprint(), b.frozen_fingerprint());
        let fp = b.frozen_fingerprint();
        let mut opt = OptimState::new(OptimConfig::new(5).with_learning_rate(0.01), &b).unwrap();
        train(&mut b, &samples, &mut opt, 5).unwrap();
        assert_ne!(a.trainable(), b.trainable());
        assert_eq!(b.frozen_fingerprint(), fp);
        b.frozen_mut().layers[0].w1[(0, 0)] += 1e-9;
        assert_ne!(b.frozen_fingerprint(), fp);
    }

    #[test]
    fn warmup_schedule() {
        let c = OptimConfig::new(200);
        assert_eq!(c.warmup_steps(), 20);
        assert!((c.learning_rate_at(0) - 1e-3 / 20.0).abs() < 1e-15);
        assert_eq!(c.learning_rate_at(19), 1e-3);
        assert_eq!(c.learning_rate_at(150), 1e-3);
        assert_eq!((c.beta1, c.beta2), (0.0, 0.95));
        let bad = OptimConfig { beta2: 1.0, ..c };
        let (model, _) = task_model(AttentionVariant::Mmca);
        assert!(OptimState::new(bad, &model).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        for v in AttentionVariant::ALL {
            let (model, samples) = task_model(v);
            let mut buf = Vec::new();
            model.write_checkpoint(&mut buf).unwrap();
            assert_eq!(&buf[..8], CHECKPOINT_MAGIC);
            let loaded = ToyModel::read_checkpoint(buf.as_slice()).unwrap();
            assert_eq!(loaded, model);
            assert_eq!(
                loaded.forward(&samples[0]).unwrap(),
                model.forward(&samples[0]).unwrap()
            );
        }
        assert!(ToyModel::read_checkpoint(&b"NOTACKPT\0\0\0\0"[..]).is_err());
    }

    #[test]
    fn curve_csv() {
        let mut buf = Vec::new();
        write_curve(&[2.5, 1.0], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,loss\n0,2.5\n1,1\n");
    }

    #[test]
    fn copy_task_labels_distinct() {
        let task = CopyTask::new(6, 32).unwrap();
        let mut l = task.labels.clone();
        l.sort();
        l.dedup();
        assert_eq!(l.len(), 6);
        assert!(CopyTask::new(40, 32).is_err());
    }
}
