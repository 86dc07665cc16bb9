//! Autoregressive decoding: greedy, temperature/nucleus sampling, and a
//! small beam search.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CaptionerModel, ModelError, ModelResult, TokenSeq, EOS};
use crate::tensor::Tape;
use crate::video::VideoTensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecodeMode {
    Greedy,
    Sample { temperature: f32, top_p: f32 },
    Beam { width: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            mode: DecodeMode::Greedy,
            max_new_tokens: 16,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> ModelResult<()> {
        if self.max_new_tokens == 0 {
            return Err(ModelError::Config("max_new_tokens must be >= 1".into()));
        }
        match self.mode {
            DecodeMode::Sample { temperature, top_p } => {
                if temperature <= 0.0 {
                    return Err(ModelError::Config(format!(
                        "temperature {temperature} must be positive"
                    )));
                }
                if !(0.0 < top_p && top_p <= 1.0) {
                    return Err(ModelError::Config(format!("top_p {top_p} outside (0, 1]")));
                }
            }
            DecodeMode::Beam { width } => {
                if width == 0 {
                    return Err(ModelError::Config("beam width must be >= 1".into()));
                }
            }
            DecodeMode::Greedy => {}
        }
        Ok(())
    }
}

impl CaptionerModel {
    fn step_logits(
        &self,
        video: &VideoTensor,
        prompt: &[usize],
        generated: &[usize],
    ) -> ModelResult<Vec<f32>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let v = tape.constant(video.tensor().clone());
        let mut text = prompt.to_vec();
        text.extend_from_slice(generated);
        let logits = self.logits_nodes(&mut tape, &p, v, &text, None)?;
        let rows = tape.value(logits).rows();
        let vocab = self.config().vocab_size;
        Ok(tape.value(logits).data()[(rows - 1) * vocab..rows * vocab].to_vec())
    }

    /// Generates a caption. Stops at the first emitted EOS (excluded from the
    /// result, `terminated` set) or when the token budget runs out.
    pub fn generate(
        &self,
        video: &VideoTensor,
        prompt: &TokenSeq,
        config: &DecodeConfig,
    ) -> ModelResult<TokenSeq> {
        self.check_video_dims(video)?;
        config.validate()?;
        // Keep the full sequence inside the position table.
        let room = self
            .config()
            .max_seq_len
            .saturating_sub(self.config().frames + prompt.len());
        let budget = config.max_new_tokens.min(room);

        match config.mode {
            DecodeMode::Beam { width } => self.beam_search(video, prompt.tokens(), budget, width),
            _ => {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                let mut generated: Vec<usize> = Vec::new();
                let mut terminated = false;
                for _ in 0..budget {
                    let logits = self.step_logits(video, prompt.tokens(), &generated)?;
                    let next = match config.mode {
                        DecodeMode::Greedy => argmax(&logits),
                        DecodeMode::Sample { temperature, top_p } => {
                            sample_nucleus(&logits, temperature, top_p, &mut rng)
                        }
                        DecodeMode::Beam { .. } => unreachable!(),
                    };
                    if next == EOS {
                        terminated = true;
                        break;
                    }
                    generated.push(next);
                }
                TokenSeq::new(generated, terminated)
            }
        }
    }

    fn beam_search(
        &self,
        video: &VideoTensor,
        prompt: &[usize],
        budget: usize,
        width: usize,
    ) -> ModelResult<TokenSeq> {
        #[derive(Clone)]
        struct Beam {
            tokens: Vec<usize>,
            logp: f64,
            finished: bool,
        }
        let mut beams = vec![Beam {
            tokens: Vec::new(),
            logp: 0.0,
            finished: false,
        }];
        for _ in 0..budget {
            if beams.iter().all(|b| b.finished) {
                break;
            }
            let mut candidates: Vec<Beam> = Vec::new();
            for beam in &beams {
                if beam.finished {
                    candidates.push(beam.clone());
                    continue;
                }
                let logits = self.step_logits(video, prompt, &beam.tokens)?;
                let logprobs = log_softmax_f64(&logits);
                for (tok, lp) in logprobs.iter().enumerate() {
                    let mut tokens = beam.tokens.clone();
                    let finished = tok == EOS;
                    if !finished {
                        tokens.push(tok);
                    }
                    candidates.push(Beam {
                        tokens,
                        logp: beam.logp + lp,
                        finished,
                    });
                }
            }
            // Deterministic order: score first, token sequence as tiebreak.
            candidates.sort_by(|a, b| {
                b.logp
                    .partial_cmp(&a.logp)
                    .unwrap()
                    .then_with(|| a.tokens.cmp(&b.tokens))
            });
            candidates.truncate(width);
            beams = candidates;
        }
        let best = &beams[0];
        TokenSeq::new(best.tokens.clone(), best.finished)
    }
}

pub(crate) fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

fn log_softmax_f64(logits: &[f32]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = mx
        + logits
            .iter()
            .map(|&v| (v as f64 - mx).exp())
            .sum::<f64>()
            .ln();
    logits.iter().map(|&v| v as f64 - lse).collect()
}

fn sample_nucleus(logits: &[f32], temperature: f32, top_p: f32, rng: &mut ChaCha8Rng) -> usize {
    let scaled: Vec<f64> = logits
        .iter()
        .map(|&v| v as f64 / temperature as f64)
        .collect();
    let mx = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|&v| (v - mx).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut order: Vec<usize> = (0..exps.len()).collect();
    order.sort_by(|&a, &b| exps[b].partial_cmp(&exps[a]).unwrap().then(a.cmp(&b)));

    // Smallest prefix of the sorted distribution with mass >= top_p.
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for &i in &order {
        kept.push(i);
        mass += exps[i] / total;
        if mass >= top_p as f64 {
            break;
        }
    }
    let kept_total: f64 = kept.iter().map(|&i| exps[i]).sum();
    let mut dart = rng.gen_range(0.0..1.0) * kept_total;
    for &i in &kept {
        dart -= exps[i];
        if dart <= 0.0 {
            return i;
        }
    }
    *kept.last().unwrap()
}
