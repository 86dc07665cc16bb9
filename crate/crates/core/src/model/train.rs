//! Teacher-forced training of the captioner with Adam.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CaptionerConfig, CaptionerModel, ModelError, ModelResult, Vocabulary};
use crate::tensor::{Tape, Tensor, TensorError};
use crate::video::VideoTensor;

/// One training pair.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub video: VideoTensor,
    pub caption: String,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
    /// Prompt pool; each sample draws one per epoch so captions stay
    /// prompt-invariant.
    pub prompts: Vec<String>,
}

pub const DEFAULT_PROMPTS: [&str; 3] = [
    "What is this video about?",
    "What happens in the video?",
    "Can you describe the video in detail?",
];

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            learning_rate: 3e-3,
            seed: 42,
            prompts: DEFAULT_PROMPTS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> ModelResult<()> {
        if self.epochs == 0 {
            return Err(ModelError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(ModelError::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(ModelError::Config("learning rate must be positive".into()));
        }
        if self.prompts.is_empty() {
            return Err(ModelError::Config("prompt pool must not be empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    /// Mean teacher-forced loss per epoch.
    pub epoch_losses: Vec<f64>,
}

struct Adam {
    lr: f32,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    fn new(lr: f32, sizes: &[usize]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    fn update(&mut self, params: &mut [(String, &mut Tensor)], grads: &[Vec<f64>]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (i, (_, tensor)) in params.iter_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let g = &grads[i];
            let mut data: Vec<f32> = tensor.data().to_vec();
            for j in 0..data.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] -= (self.lr as f64 * mhat / (vhat.sqrt() + self.eps)) as f32;
            }
            **tensor = Tensor::from_parts(tensor.shape().to_vec(), data);
        }
    }
}

/// Trains a fresh captioner on (video, caption) pairs. Deterministic for a
/// fixed seed: initialization, shuffling, and prompt draws all derive from it.
pub fn train_captioner(
    arch: CaptionerConfig,
    samples: &[TrainSample],
    config: &TrainConfig,
) -> ModelResult<(CaptionerModel, TrainLog)> {
    config.validate()?;
    if samples.is_empty() {
        return Err(ModelError::Config("training corpus is empty".into()));
    }
    let vocab = Vocabulary::standard();
    let mut model = CaptionerModel::init(arch, vocab, config.seed)?;
    for s in samples {
        model.check_video_dims(&s.video)?;
    }

    let targets: Vec<Vec<usize>> = samples
        .iter()
        .map(|s| model.vocab().encode_text(&s.caption))
        .collect();
    let prompt_tokens: Vec<Vec<usize>> = config
        .prompts
        .iter()
        .map(|p| model.vocab().encode_text(p))
        .collect();

    let sizes: Vec<usize> = model.params().named().iter().map(|(_, t)| t.len()).collect();
    let mut adam = Adam::new(config.learning_rate, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = TrainLog::default();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for chunk in order.chunks(config.batch_size) {
            let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            for &idx in chunk {
                let prompt = &prompt_tokens[rng.gen_range(0..prompt_tokens.len())];
                let loss = accumulate_sample(
                    &model,
                    &samples[idx].video,
                    prompt,
                    &targets[idx],
                    &mut grads,
                    chunk.len(),
                )
                .map_err(|e| match e {
                    ModelError::Tensor(TensorError::NonFinite { .. }) => {
                        ModelError::Training { epoch }
                    }
                    other => other,
                })?;
                if !loss.is_finite() {
                    return Err(ModelError::Training { epoch });
                }
                epoch_loss += loss as f64;
            }
            adam.update(&mut model.params_mut().named_mut(), &grads);
        }
        log.epoch_losses.push(epoch_loss / samples.len() as f64);
    }
    Ok((model, log))
}

fn accumulate_sample(
    model: &CaptionerModel,
    video: &VideoTensor,
    prompt: &[usize],
    target: &[usize],
    grads: &mut [Vec<f64>],
    batch_len: usize,
) -> ModelResult<f32> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let v = tape.constant(video.tensor().clone());
    let loss = model.ar_loss_nodes(&mut tape, &bound, v, prompt, target)?;
    let ids = bound.ordered_ids();
    let sample_grads = tape.backward(loss, &ids)?;
    let scale = 1.0 / batch_len as f64;
    for (acc, g) in grads.iter_mut().zip(sample_grads) {
        for (a, &gv) in acc.iter_mut().zip(g.data()) {
            *a += gv as f64 * scale;
        }
    }
    Ok(tape.value(loss).item())
}
