//! Toy video captioner: a per-frame vision encoder feeding a causal
//! transformer decoder as a visual prefix, with a token head on top.

mod checkpoint;
mod forward;

mod generate;
mod train;
mod vocab;

pub use checkpoint::CHECKPOINT_MAGIC;
pub use forward::TapedParams;
pub use generate::{DecodeConfig, DecodeMode};
pub use train::{train_captioner, TrainConfig, TrainLog, TrainSample};
pub use vocab::{TokenSeq, Vocabulary, BOS, EOS, PAD, UNK};

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("sequence length {length} exceeds maximum {max}")]
    Length { length: usize, max: usize },
    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Training { epoch: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type ModelResult<T> = Result<T, ModelError>;

/// Architecture hyperparameters. `vocab_size` must match the vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionerConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Patch edge length; must tile height and width.
    pub patch: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
}

impl Default for CaptionerConfig {
    fn default() -> Self {
        CaptionerConfig {
            frames: 8,
            height: 32,
            width: 32,
            channels: 3,
            patch: 8,
            embed_dim: 64,
            heads: 4,
            layers: 2,
            max_seq_len: 64,
            vocab_size: 64,
        }
    }
}

impl CaptionerConfig {
    /// Small instance for gradient checks: 4 frames of 8x8.
    pub fn tiny() -> Self {
        CaptionerConfig {
            frames: 4,
            height: 8,
            width: 8,
            channels: 3,
            patch: 4,
            embed_dim: 16,
            heads: 2,
            layers: 2,
            max_seq_len: 32,
            vocab_size: 64,
        }
    }

    pub fn validate(&self) -> ModelResult<()> {
        let err = |msg: String| Err(ModelError::Config(msg));
        if self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return err(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return err(format!(
                "patch {} must tile {}x{}",
                self.patch, self.height, self.width
            ));
        }
        if self.layers == 0 || self.frames == 0 || self.channels == 0 {
            return err("layers, frames, and channels must be positive".into());
        }
        if self.max_seq_len <= self.frames {
            return err(format!(
                "max_seq_len {} leaves no room after the {}-token visual prefix",
                self.max_seq_len, self.frames
            ));
        }
        if self.vocab_size < 8 {
            return err(format!("vocab_size {} below minimum 8", self.vocab_size));
        }
        Ok(())
    }

    /// Patches per frame.
    pub fn patches_per_frame(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct BlockParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct CaptionerParams {
    pub patch_embed_w: Tensor,
    pub patch_embed_b: Tensor,
    pub patch_pos: Tensor,
    pub vision_proj_w: Tensor,
    pub vision_proj_b: Tensor,
    pub tok_embed: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_g: Tensor,
    pub final_b: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

fn gaussian(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f32) -> Tensor {
    use rand::Rng;
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            // Box-Muller from two uniforms.
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let g = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            (g as f32) * std
        })
        .collect();
    Tensor::new(shape, data).expect("finite init")
}

impl CaptionerParams {
    fn init(config: &CaptionerConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = config.embed_dim;
        // Weight matrices get fan-in scaling; embeddings a small fixed std.
        let fan = |n: usize| 1.0 / (n as f32).sqrt();
        let emb_std = 0.02;
        let block = |rng: &mut ChaCha8Rng| BlockParams {
            ln1_g: Tensor::full(vec![d], 1.0),
            ln1_b: Tensor::zeros(vec![d]),
            wq: gaussian(rng, vec![d, d], fan(d)),
            bq: Tensor::zeros(vec![d]),
            wk: gaussian(rng, vec![d, d], fan(d)),
            bk: Tensor::zeros(vec![d]),
            wv: gaussian(rng, vec![d, d], fan(d)),
            bv: Tensor::zeros(vec![d]),
            wo: gaussian(rng, vec![d, d], fan(d)),
            bo: Tensor::zeros(vec![d]),
            ln2_g: Tensor::full(vec![d], 1.0),
            ln2_b: Tensor::zeros(vec![d]),
            w1: gaussian(rng, vec![d, 4 * d], fan(d)),
            b1: Tensor::zeros(vec![4 * d]),
            w2: gaussian(rng, vec![4 * d, d], fan(4 * d)),
            b2: Tensor::zeros(vec![d]),
        };
        CaptionerParams {
            patch_embed_w: gaussian(rng, vec![config.patch_dim(), d], fan(config.patch_dim())),
            patch_embed_b: Tensor::zeros(vec![d]),
            // Strong per-patch positions give each patch its own GELU
            // operating point, so pooled features carry object location.
            patch_pos: gaussian(rng, vec![config.patches_per_frame(), d], 0.25),
            vision_proj_w: gaussian(rng, vec![d, d], fan(d)),
            vision_proj_b: Tensor::zeros(vec![d]),
            tok_embed: gaussian(rng, vec![config.vocab_size, d], emb_std),
            pos_embed: gaussian(rng, vec![config.max_seq_len, d], emb_std),
            blocks: (0..config.layers).map(|_| block(rng)).collect(),
            final_g: Tensor::full(vec![d], 1.0),
            final_b: Tensor::zeros(vec![d]),
            // Quarter fan-in on the head keeps untrained logits near uniform.
            head_w: gaussian(rng, vec![d, config.vocab_size], 0.25 * fan(d)),
            head_b: Tensor::zeros(vec![config.vocab_size]),
        }
    }

    /// Stable (name, tensor) listing used by the optimizer and checkpoints.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("vision.patch_embed.w".into(), &self.patch_embed_w),
            ("vision.patch_embed.b".into(), &self.patch_embed_b),
            ("vision.patch_pos".into(), &self.patch_pos),
            ("vision.proj.w".into(), &self.vision_proj_w),
            ("vision.proj.b".into(), &self.vision_proj_b),
            ("decoder.tok_embed".into(), &self.tok_embed),
            ("decoder.pos_embed".into(), &self.pos_embed),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (suffix, t) in [
                ("ln1.g", &b.ln1_g),
                ("ln1.b", &b.ln1_b),
                ("attn.wq", &b.wq),
                ("attn.bq", &b.bq),
                ("attn.wk", &b.wk),
                ("attn.bk", &b.bk),
                ("attn.wv", &b.wv),
                ("attn.bv", &b.bv),
                ("attn.wo", &b.wo),
                ("attn.bo", &b.bo),
                ("ln2.g", &b.ln2_g),
                ("ln2.b", &b.ln2_b),
                ("ffn.w1", &b.w1),
                ("ffn.b1", &b.b1),
                ("ffn.w2", &b.w2),
                ("ffn.b2", &b.b2),
            ] {
                out.push((format!("decoder.block{i}.{suffix}"), t));
            }
        }
        out.push(("decoder.final.g".into(), &self.final_g));
        out.push(("decoder.final.b".into(), &self.final_b));
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("vision.patch_embed.w".into(), &mut self.patch_embed_w),
            ("vision.patch_embed.b".into(), &mut self.patch_embed_b),
            ("vision.patch_pos".into(), &mut self.patch_pos),
            ("vision.proj.w".into(), &mut self.vision_proj_w),
            ("vision.proj.b".into(), &mut self.vision_proj_b),
            ("decoder.tok_embed".into(), &mut self.tok_embed),
            ("decoder.pos_embed".into(), &mut self.pos_embed),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (suffix, t) in [
                ("ln1.g", &mut b.ln1_g),
                ("ln1.b", &mut b.ln1_b),
                ("attn.wq", &mut b.wq),
                ("attn.bq", &mut b.bq),
                ("attn.wk", &mut b.wk),
                ("attn.bk", &mut b.bk),
                ("attn.wv", &mut b.wv),
                ("attn.bv", &mut b.bv),
                ("attn.wo", &mut b.wo),
                ("attn.bo", &mut b.bo),
                ("ln2.g", &mut b.ln2_g),
                ("ln2.b", &mut b.ln2_b),
                ("ffn.w1", &mut b.w1),
                ("ffn.b1", &mut b.b1),
                ("ffn.w2", &mut b.w2),
                ("ffn.b2", &mut b.b2),
            ] {
                out.push((format!("decoder.block{i}.{suffix}"), t));
            }
        }
        out.push(("decoder.final.g".into(), &mut self.final_g));
        out.push(("decoder.final.b".into(), &mut self.final_b));
        out.push(("head.w".into(), &mut self.head_w));
        out.push(("head.b".into(), &mut self.head_b));
        out
    }
}

/// A trained (or freshly initialized) captioner. Immutable during attacks
/// and evaluation; safe to share across threads by reference.
#[derive(Clone, Debug)]
pub struct CaptionerModel {
    config: CaptionerConfig,
    vocab: Vocabulary,
    params: CaptionerParams,
}

impl CaptionerModel {
    /// Fresh model with seeded Gaussian initialization.
    pub fn init(config: CaptionerConfig, vocab: Vocabulary, seed: u64) -> ModelResult<Self> {
        if config.vocab_size != vocab.len() {
            return Err(ModelError::Config(format!(
                "config vocab_size {} != vocabulary size {}",
                config.vocab_size,
                vocab.len()
            )));
        }
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = CaptionerParams::init(&config, &mut rng);
        Ok(CaptionerModel {
            config,
            vocab,
            params,
        })
    }

    pub fn config(&self) -> &CaptionerConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub(crate) fn params(&self) -> &CaptionerParams {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut CaptionerParams {
        &mut self.params
    }


    /// Mutable parameter access; used for experimentation and tests.
    pub fn adjust_param(&mut self, name: &str, f: impl FnOnce(&mut Tensor)) -> ModelResult<()> {
        for (n, t) in self.params.named_mut() {
            if n == name {
                f(t);
                return Ok(());
            }
        }
        Err(ModelError::Config(format!("no parameter named {name}")))
    }

    /// Total parameter count.
    pub fn param_count(&self) -> usize {
        self.params.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Named copies of every parameter tensor (clones are cheap shared
    /// handles). Ordering matches the checkpoint layout.
    pub fn params_snapshot(&self) -> Vec<(String, Tensor)> {
        self.params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect()
    }
}
