//! Phase 2: multimodal encoder and fact-consistent decoder.
//!
//! The decoder cross-attends to the concatenated image and prior-knowledge
//! states; on top of its final hidden states two additive-attention heads
//! produce a generation distribution over the vocabulary and a copy
//! distribution that scatters knowledge-attention mass onto the prior's
//! token ids. The emitted distribution is their plain average, degrading to
//! the generation branch alone when the prior is empty.

mod transformer;

use std::path::Path;

use numerics::{
    backward, cross_entropy_logits, embedding, load_checkpoint, save_checkpoint, scatter_cols,
    Adam, AdamConfig, CheckpointEntry, Tensor,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Vocabulary, BOS, EOS, SEP};
use crate::prior::PriorKnowledge;
use transformer::{
    AdditiveAttention, DecoderBlock, EncoderBlock, LayerNormParams, Linear, ParamBuilder,
    RandomBuilder, StoreBuilder,
};

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("image size {size} is not divisible by patch size {patch}")]
    BadPatchGrid { size: usize, patch: usize },

    #[error("expected {expected} pixels, got {got}")]
    BadImage { expected: usize, got: usize },

    #[error("context has no image patches")]
    EmptyImage,

    #[error("decoder prefix must start with BOS")]
    MissingBos,

    #[error("prefix length {len} exceeds the output cap {cap}")]
    PrefixTooLong { len: usize, cap: usize },

    #[error("prior has {len} tokens but the model caps knowledge at {cap}")]
    PriorTooLong { len: usize, cap: usize },

    #[error("generator training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },

    #[error(transparent)]
    Tensor(#[from] numerics::TensorError),

    #[error("checkpoint does not match the configured architecture: {0}")]
    BadCheckpoint(String),

    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub vocab_size: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_knowledge: usize,
    pub max_output: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            vocab_size: 0,
            image_size: 64,
            patch_size: 8,
            embed_dim: 128,
            layers: 3,
            heads: 8,
            ffn_dim: 256,
            max_knowledge: 100,
            max_output: 60,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }
}

/// Flattened p×p patches in row-major grid order.
pub fn image_to_patches(
    pixels: &[f64],
    size: usize,
    patch: usize,
) -> Result<Vec<Vec<f64>>, GeneratorError> {
    if patch == 0 || size % patch != 0 {
        return Err(GeneratorError::BadPatchGrid { size, patch });
    }
    if pixels.len() != size * size {
        return Err(GeneratorError::BadImage {
            expected: size * size,
            got: pixels.len(),
        });
    }
    let grid = size / patch;
    let mut patches = Vec::with_capacity(grid * grid);
    for gy in 0..grid {
        for gx in 0..grid {
            let mut flat = Vec::with_capacity(patch * patch);
            for py in 0..patch {
                let row = (gy * patch + py) * size + gx * patch;
                flat.extend_from_slice(&pixels[row..row + patch]);
            }
            patches.push(flat);
        }
    }
    Ok(patches)
}

/// Everything the decoder conditions on for one sample.
#[derive(Clone, Debug)]
pub struct GenerationContext {
    pub patches: Vec<Vec<f64>>,
    pub prior: PriorKnowledge,
    pub max_output: usize,
}

impl GenerationContext {
    pub fn new(
        pixels: &[f64],
        image_size: usize,
        patch_size: usize,
        prior: PriorKnowledge,
        max_output: usize,
    ) -> Result<GenerationContext, GeneratorError> {
        Ok(GenerationContext {
            patches: image_to_patches(pixels, image_size, patch_size)?,
            prior,
            max_output,
        })
    }

    /// Tokens the copy head can place mass on (separators are masked).
    fn copyable(&self) -> bool {
        self.prior.tokens.iter().any(|&t| t != SEP)
    }
}

/// Per-step output: generation distribution, copy distribution and their
/// average. `y_copy` is all-zero when the prior is empty (then y == y_gen).
#[derive(Clone, Debug)]
pub struct OutputDistribution {
    pub y_gen: Vec<f64>,
    pub y_copy: Vec<f64>,
    pub y: Vec<f64>,
}

/// Encoder outputs kept for repeated decode steps.
pub struct Encoded {
    pub image_states: Tensor,
    pub knowledge_states: Option<Tensor>,
}

pub struct GeneratorModel {
    pub config: GeneratorConfig,
    token_embed: Tensor,
    pos_image: Tensor,
    pos_know: Tensor,
    pos_dec: Tensor,
    patch_proj: Linear,
    image_blocks: Vec<EncoderBlock>,
    image_ln: LayerNormParams,
    know_blocks: Vec<EncoderBlock>,
    know_ln: LayerNormParams,
    dec_blocks: Vec<DecoderBlock>,
    dec_ln: LayerNormParams,
    gen_attn: AdditiveAttention,
    copy_attn: AdditiveAttention,
    out_proj: Linear,
}

impl GeneratorModel {
    fn build(config: GeneratorConfig, b: &mut dyn ParamBuilder) -> GeneratorModel {
        use transformer::Init;
        let d = config.embed_dim;
        let token_embed = b.tensor(&[config.vocab_size, d], Init::Normal(0.02));
        let pos_image = b.tensor(&[config.n_patches(), d], Init::Normal(0.02));
        let pos_know = b.tensor(&[config.max_knowledge, d], Init::Normal(0.02));
        let pos_dec = b.tensor(&[config.max_output + 1, d], Init::Normal(0.02));
        let patch_proj = Linear::new(b, config.patch_dim(), d);
        let image_blocks = (0..config.layers)
            .map(|_| EncoderBlock::new(b, d, config.heads, config.ffn_dim))
            .collect();
        let image_ln = LayerNormParams::new(b, d);
        let know_blocks = (0..config.layers)
            .map(|_| EncoderBlock::new(b, d, config.heads, config.ffn_dim))
            .collect();
        let know_ln = LayerNormParams::new(b, d);
        let dec_blocks = (0..config.layers)
            .map(|_| DecoderBlock::new(b, d, config.heads, config.ffn_dim))
            .collect();
        let dec_ln = LayerNormParams::new(b, d);
        let gen_attn = AdditiveAttention::new(b, d);
        let copy_attn = AdditiveAttention::new(b, d);
        let out_proj = Linear::new(b, 2 * d, config.vocab_size);
        GeneratorModel {
            config,
            token_embed,
            pos_image,
            pos_know,
            pos_dec,
            patch_proj,
            image_blocks,
            image_ln,
            know_blocks,
            know_ln,
            dec_blocks,
            dec_ln,
            gen_attn,
            copy_attn,
            out_proj,
        }
    }

    pub fn new(config: GeneratorConfig) -> GeneratorModel {
        let mut builder = RandomBuilder {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        GeneratorModel::build(config, &mut builder)
    }

    /// Rebuilds a model over a flat parameter snapshot (declaration order).
    pub fn from_snapshot(config: GeneratorConfig, snapshot: &[Vec<f64>]) -> GeneratorModel {
        let mut builder = StoreBuilder {
            store: snapshot,
            cursor: 0,
        };
        GeneratorModel::build(config, &mut builder)
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut out = vec![
            self.token_embed.clone(),
            self.pos_image.clone(),
            self.pos_know.clone(),
            self.pos_dec.clone(),
        ];
        self.patch_proj.collect(&mut out);
        for b in &self.image_blocks {
            b.collect(&mut out);
        }
        self.image_ln.collect(&mut out);
        for b in &self.know_blocks {
            b.collect(&mut out);
        }
        self.know_ln.collect(&mut out);
        for b in &self.dec_blocks {
            b.collect(&mut out);
        }
        self.dec_ln.collect(&mut out);
        self.gen_attn.collect(&mut out);
        self.copy_attn.collect(&mut out);
        self.out_proj.collect(&mut out);
        out
    }

    /// Parameters of the copy-attention head only.
    pub fn copy_params(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.copy_attn.collect(&mut out);
        out
    }

    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.params().iter().map(Tensor::data).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), GeneratorError> {
        let entries: Vec<CheckpointEntry> = self
            .params()
            .iter()
            .enumerate()
            .map(|(i, t)| CheckpointEntry {
                name: format!("param{i:03}"),
                shape: t.shape(),
                data: t.data(),
            })
            .collect();
        save_checkpoint(path, &entries)?;
        Ok(())
    }

    pub fn load(path: &Path, config: GeneratorConfig) -> Result<GeneratorModel, GeneratorError> {
        let model = GeneratorModel::new(config);
        let entries = load_checkpoint(path).map_err(numerics::TensorError::from)?;
        let params = model.params();
        if entries.len() != params.len() {
            return Err(GeneratorError::BadCheckpoint(format!(
                "expected {} tensors, found {}",
                params.len(),
                entries.len()
            )));
        }
        for (param, entry) in params.iter().zip(entries.iter()) {
            if param.shape() != entry.shape {
                return Err(GeneratorError::BadCheckpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    entry.name,
                    entry.shape,
                    param.shape()
                )));
            }
            param.set_data(entry.data.clone())?;
        }
        Ok(model)
    }

    /// Contextual image states, with caller-supplied positional ids (used by
    /// the permutation-equivariance check; `encode` passes 0..n).
    pub fn encode_image_with_positions(
        &self,
        patches: &[Vec<f64>],
        positions: &[usize],
    ) -> Result<Tensor, GeneratorError> {
        if patches.is_empty() {
            return Err(GeneratorError::EmptyImage);
        }
        let pd = self.config.patch_dim();
        let flat: Vec<f64> = patches.iter().flat_map(|p| p.iter().copied()).collect();
        if flat.len() != patches.len() * pd {
            return Err(GeneratorError::BadImage {
                expected: patches.len() * pd,
                got: flat.len(),
            });
        }
        let matrix = Tensor::from_vec(flat, &[patches.len(), pd])?;
        let mut x = self
            .patch_proj
            .forward(&matrix)?
            .add(&embedding(&self.pos_image, positions)?)?;
        for block in &self.image_blocks {
            x = block.forward(&x)?;
        }
        Ok(self.image_ln.forward(&x)?)
    }

    /// Contextual embeddings for both streams. Knowledge states are `None`
    /// for an empty prior.
    pub fn encode(&self, ctx: &GenerationContext) -> Result<Encoded, GeneratorError> {
        let positions: Vec<usize> = (0..ctx.patches.len()).collect();
        let image_states = self.encode_image_with_positions(&ctx.patches, &positions)?;
        let knowledge_states = if ctx.prior.tokens.is_empty() {
            None
        } else {
            if ctx.prior.tokens.len() > self.config.max_knowledge {
                return Err(GeneratorError::PriorTooLong {
                    len: ctx.prior.tokens.len(),
                    cap: self.config.max_knowledge,
                });
            }
            let positions: Vec<usize> = (0..ctx.prior.tokens.len()).collect();
            let mut x = embedding(&self.token_embed, &ctx.prior.tokens)?
                .add(&embedding(&self.pos_know, &positions)?)?;
            for block in &self.know_blocks {
                x = block.forward(&x)?;
            }
            Some(self.know_ln.forward(&x)?)
        };
        Ok(Encoded {
            image_states,
            knowledge_states,
        })
    }

    /// Decoder hidden states for a teacher-forced prefix, strictly causal.
    fn decode_states(
        &self,
        prefix: &[usize],
        encoded: &Encoded,
    ) -> Result<Tensor, GeneratorError> {
        let t = prefix.len();
        let positions: Vec<usize> = (0..t).collect();
        let mut x = embedding(&self.token_embed, prefix)?
            .add(&embedding(&self.pos_dec, &positions)?)?;
        let mut mask = vec![0.0; t * t];
        for i in 0..t {
            for j in (i + 1)..t {
                mask[i * t + j] = -1e30;
            }
        }
        let mask = Tensor::from_vec(mask, &[t, t])?;
        let memory = match &encoded.knowledge_states {
            Some(k) => encoded.image_states.concat_rows(k)?,
            None => encoded.image_states.clone(),
        };
        for block in &self.dec_blocks {
            x = block.forward(&x, &memory, &mask)?;
        }
        Ok(self.dec_ln.forward(&x)?)
    }

    /// Generation head: additive attention of each decoder state over the
    /// image states, context vector concatenated with the state, projected
    /// to vocabulary logits.
    fn gen_head_parts(
        &self,
        states: &Tensor,
        image_states: &Tensor,
    ) -> Result<(Tensor, Tensor), GeneratorError> {
        let scores = self.gen_attn.scores(image_states, states)?;
        let attn = scores.softmax_last()?;
        let context = attn.matmul(image_states)?;
        let cat = context.concat_cols(states)?;
        let logits = self.out_proj.forward(&cat)?;
        Ok((logits, attn))
    }

    /// y_gen rows (one distribution per decoder state) and the image
    /// attention weights.
    pub fn gen_head(
        &self,
        states: &Tensor,
        image_states: &Tensor,
    ) -> Result<(Tensor, Tensor), GeneratorError> {
        let (logits, attn) = self.gen_head_parts(states, image_states)?;
        Ok((logits.softmax_last()?, attn))
    }

    /// Copy head: additive attention over knowledge states with separator
    /// positions masked out, mass scattered onto the prior's token ids.
    pub fn copy_head(
        &self,
        states: &Tensor,
        knowledge_states: &Tensor,
        prior_tokens: &[usize],
    ) -> Result<(Tensor, Tensor), GeneratorError> {
        let scores = self.copy_attn.scores(knowledge_states, states)?;
        let mask: Vec<f64> = prior_tokens
            .iter()
            .map(|&t| if t == SEP { -1e30 } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(mask, &[prior_tokens.len()])?;
        let attn = scores.add(&mask)?.softmax_last()?;
        let y_copy = scatter_cols(&attn, prior_tokens, self.config.vocab_size)?;
        Ok((y_copy, attn))
    }

    fn check_prefix(&self, prefix: &[usize]) -> Result<(), GeneratorError> {
        if prefix.first() != Some(&BOS) {
            return Err(GeneratorError::MissingBos);
        }
        if prefix.len() > self.config.max_output {
            return Err(GeneratorError::PrefixTooLong {
                len: prefix.len(),
                cap: self.config.max_output,
            });
        }
        Ok(())
    }

    fn step_with_encoded(
        &self,
        prefix: &[usize],
        ctx: &GenerationContext,
        encoded: &Encoded,
    ) -> Result<OutputDistribution, GeneratorError> {
        self.check_prefix(prefix)?;
        let states = self.decode_states(prefix, encoded)?;
        let last = states.slice_rows(prefix.len() - 1, prefix.len())?;
        let (y_gen_t, _) = self.gen_head(&last, &encoded.image_states)?;
        let y_gen = y_gen_t.data();
        if ctx.copyable() {
            let k = encoded
                .knowledge_states
                .as_ref()
                .expect("copyable prior implies knowledge states");
            let (y_copy_t, _) = self.copy_head(&last, k, &ctx.prior.tokens)?;
            let y_copy = y_copy_t.data();
            let y = y_gen
                .iter()
                .zip(y_copy.iter())
                .map(|(g, c)| (g + c) / 2.0)
                .collect();
            Ok(OutputDistribution { y_gen, y_copy, y })
        } else {
            let y_copy = vec![0.0; self.config.vocab_size];
            let y = y_gen.clone();
            Ok(OutputDistribution { y_gen, y_copy, y })
        }
    }

    /// Next-token distributions given a BOS-prefixed decode so far.
    pub fn step(
        &self,
        prefix: &[usize],
        ctx: &GenerationContext,
    ) -> Result<OutputDistribution, GeneratorError> {
        let encoded = self.encode(ctx)?;
        self.step_with_encoded(prefix, ctx, &encoded)
    }

    /// Teacher-forced distributions for every prefix position at once.
    /// Position i conditions on prefix[..=i] only (causal masking).
    pub fn forward_all(
        &self,
        prefix: &[usize],
        ctx: &GenerationContext,
    ) -> Result<Vec<OutputDistribution>, GeneratorError> {
        self.check_prefix(prefix)?;
        let encoded = self.encode(ctx)?;
        let states = self.decode_states(prefix, &encoded)?;
        let (y_gen_t, _) = self.gen_head(&states, &encoded.image_states)?;
        let v = self.config.vocab_size;
        let y_gen_all = y_gen_t.data();
        let y_copy_all = if ctx.copyable() {
            let k = encoded
                .knowledge_states
                .as_ref()
                .expect("copyable prior implies knowledge states");
            let (y_copy_t, _) = self.copy_head(&states, k, &ctx.prior.tokens)?;
            Some(y_copy_t.data())
        } else {
            None
        };
        Ok((0..prefix.len())
            .map(|i| {
                let y_gen = y_gen_all[i * v..(i + 1) * v].to_vec();
                match &y_copy_all {
                    Some(copy) => {
                        let y_copy = copy[i * v..(i + 1) * v].to_vec();
                        let y = y_gen
                            .iter()
                            .zip(y_copy.iter())
                            .map(|(g, c)| (g + c) / 2.0)
                            .collect();
                        OutputDistribution { y_gen, y_copy, y }
                    }
                    None => OutputDistribution {
                        y_copy: vec![0.0; v],
                        y: y_gen.clone(),
                        y_gen,
                    },
                }
            })
            .collect())
    }

    /// Teacher-forced mean token NLL for one sample, scaled by `scale`.
    /// With a copyable prior the loss goes through the averaged
    /// distribution; otherwise through the fused stable cross-entropy on the
    /// generation logits (identical value, no copy-branch graph).
    pub fn sample_loss(
        &self,
        item: &TrainItem,
        scale: f64,
    ) -> Result<Tensor, GeneratorError> {
        let cap = self.config.max_output.saturating_sub(1);
        let l = item.target_tokens.len().min(cap);
        let mut input = Vec::with_capacity(l + 1);
        input.push(BOS);
        input.extend_from_slice(&item.target_tokens[..l]);
        let mut targets = item.target_tokens[..l].to_vec();
        targets.push(EOS);

        let encoded = self.encode(&item.context)?;
        let states = self.decode_states(&input, &encoded)?;
        let per_token = scale / targets.len() as f64;
        if item.context.copyable() && !item.no_copy {
            let k = encoded
                .knowledge_states
                .as_ref()
                .expect("copyable prior implies knowledge states");
            let (logits, _) = self.gen_head_parts(&states, &encoded.image_states)?;
            let y_gen = logits.softmax_last()?;
            let (y_copy, _) = self.copy_head(&states, k, &item.context.prior.tokens)?;
            let y = y_gen.add(&y_copy)?.scale(0.5);
            let picked = y.gather_rows(&targets)?;
            Ok(picked.ln()?.sum().scale(-per_token))
        } else {
            let (logits, _) = self.gen_head_parts(&states, &encoded.image_states)?;
            let loss = cross_entropy_logits(&logits, &targets)?;
            Ok(loss.scale(scale))
        }
    }

    /// Greedy argmax decode until EOS or the output cap; ties break toward
    /// the lowest token id.
    pub fn generate(
        &self,
        ctx: &GenerationContext,
        vocab: &Vocabulary,
    ) -> Result<(String, Vec<StepTrace>), GeneratorError> {
        let encoded = self.encode(ctx)?;
        let cap = ctx.max_output.min(self.config.max_output);
        let mut prefix = vec![BOS];
        let mut emitted: Vec<usize> = Vec::new();
        let mut trace = Vec::new();
        while emitted.len() < cap {
            let dist = self.step_with_encoded(&prefix, ctx, &encoded)?;
            let token = argmax_lowest(&dist.y);
            trace.push(StepTrace {
                token,
                token_prob: dist.y[token],
                gen_argmax: argmax_lowest(&dist.y_gen),
                copy_argmax: if ctx.copyable() {
                    Some(argmax_lowest(&dist.y_copy))
                } else {
                    None
                },
                copy_mass_on_token: dist.y_copy[token],
            });
            if token == EOS {
                break;
            }
            emitted.push(token);
            prefix.push(token);
        }
        Ok((vocab.decode_text(&emitted), trace))
    }
}

/// First index of the maximum value (lowest token id wins ties).
fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepTrace {
    pub token: usize,
    pub token_prob: f64,
    pub gen_argmax: usize,
    pub copy_argmax: Option<usize>,
    pub copy_mass_on_token: f64,
}

/// One training example: gold token ids plus the retrieval-derived context.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub id: String,
    pub target_tokens: Vec<usize>,
    pub context: GenerationContext,
    /// Ablation switch: keep knowledge encoded but train on y_gen alone.
    pub no_copy: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratorTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Samples per parallel work unit; fixed so gradient reduction order
    /// (and thus rounding) is independent of thread count.
    pub par_chunk: usize,
    pub seed: u64,
}

impl Default for GeneratorTrainConfig {
    fn default() -> Self {
        GeneratorTrainConfig {
            lr: 1e-4,
            epochs: 30,
            batch_size: 8,
            par_chunk: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainCurve {
    pub epoch_losses: Vec<f64>,
}

/// Teacher-forced Adam training, deterministic under the config seed.
/// Per-batch gradients are computed on worker clones over fixed-size chunks
/// and reduced in chunk order into the master model. Writes a checkpoint per
/// epoch when `checkpoint_dir` is given.
pub fn train_generator(
    model: &GeneratorModel,
    items: &[TrainItem],
    cfg: &GeneratorTrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainCurve, GeneratorError> {
    let params = model.params();
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr), &params);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e3779b97f4a7c15);
    let mut curve = TrainCurve::default();
    let gen_config = model.config.clone();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let snapshot = model.snapshot();
            let scale = 1.0 / batch.len() as f64;
            let chunk_results: Vec<Result<(Vec<Vec<f64>>, f64), GeneratorError>> = batch
                .par_chunks(cfg.par_chunk.max(1))
                .map(|chunk| {
                    let local = GeneratorModel::from_snapshot(gen_config.clone(), &snapshot);
                    let mut loss_sum = 0.0;
                    for &idx in chunk {
                        let loss = local.sample_loss(&items[idx], scale)?;
                        loss_sum += loss.item() / scale;
                        backward(&loss)?;
                    }
                    let grads = local
                        .params()
                        .iter()
                        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
                        .collect();
                    Ok((grads, loss_sum))
                })
                .collect();
            for result in chunk_results {
                let (grads, loss_sum) = result?;
                epoch_loss += loss_sum;
                for (param, grad) in params.iter().zip(grads.iter()) {
                    param.accumulate_grad(grad);
                }
            }
            opt.step(&params)?;
        }
        epoch_loss /= items.len().max(1) as f64;
        if !epoch_loss.is_finite() {
            return Err(GeneratorError::Diverged {
                epoch,
                loss: epoch_loss,
            });
        }
        curve.epoch_losses.push(epoch_loss);
        if let Some(dir) = checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            model.save(&dir.join(format!("epoch{epoch:03}.ckpt")))?;
        }
    }
    Ok(curve)
}
