//! Captioner contracts: determinism, shapes, halting, loss bounds, gradient
//! fidelity on the small instance, training, and checkpoint round trips.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidmark_core::model::{
    train_captioner, CaptionerConfig, CaptionerModel, DecodeConfig, DecodeMode, ModelError,
    TokenSeq, TrainConfig, TrainSample, Vocabulary, EOS,
};
use vidmark_core::tensor::{grad_check, Tape};
use vidmark_core::video::VideoTensor;

fn tiny_model(seed: u64) -> CaptionerModel {
    CaptionerModel::init(CaptionerConfig::tiny(), Vocabulary::standard(), seed).unwrap()
}

fn random_video(config: &CaptionerConfig, seed: u64) -> VideoTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.frames * config.height * config.width * config.channels;
    VideoTensor::from_dims(
        [config.frames, config.height, config.width, config.channels],
        (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )
    .unwrap()
}

fn prompt(model: &CaptionerModel) -> TokenSeq {
    TokenSeq::from_text(model.vocab(), "What is this video about?").unwrap()
}

#[test]
fn encode_video_is_deterministic_and_input_sensitive() {
    let model = tiny_model(1);
    let cfg = model.config().clone();
    let zeros = VideoTensor::from_dims(
        [cfg.frames, cfg.height, cfg.width, cfg.channels],
        vec![0.0; cfg.frames * cfg.height * cfg.width * cfg.channels],
    )
    .unwrap();
    let ones = VideoTensor::from_dims(
        [cfg.frames, cfg.height, cfg.width, cfg.channels],
        vec![1.0; cfg.frames * cfg.height * cfg.width * cfg.channels],
    )
    .unwrap();

    let a = model.encode_video(&zeros).unwrap();
    let b = model.encode_video(&zeros).unwrap();
    assert_eq!(a.data(), b.data());
    assert_eq!(a.shape(), &[cfg.frames, cfg.embed_dim]);

    let c = model.encode_video(&ones).unwrap();
    let l2: f64 = a
        .data()
        .iter()
        .zip(c.data())
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum();
    assert!(l2 > 0.0, "all-zeros and all-ones videos must encode apart");
}

#[test]
fn encode_video_rejects_mismatched_dims() {
    let model = tiny_model(1);
    let wrong = VideoTensor::from_dims([2, 8, 8, 3], vec![0.5; 2 * 8 * 8 * 3]).unwrap();
    assert!(matches!(
        model.encode_video(&wrong),
        Err(ModelError::Config(_))
    ));
}

#[test]
fn llm_hidden_shape_is_frames_plus_prompt() {
    let model = tiny_model(2);
    let video = random_video(model.config(), 7);
    let p = prompt(&model);
    let h1 = model.llm_hidden(&video, &p).unwrap();
    let h2 = model.llm_hidden(&video, &p).unwrap();
    assert_eq!(h1.data(), h2.data());
    assert_eq!(
        h1.shape(),
        &[model.config().frames + p.len(), model.config().embed_dim]
    );
}

#[test]
fn sequence_overflow_is_a_length_error() {
    let model = tiny_model(2);
    let video = random_video(model.config(), 8);
    let long = TokenSeq::new(vec![10; model.config().max_seq_len], false).unwrap();
    assert!(matches!(
        model.llm_hidden(&video, &long),
        Err(ModelError::Length { .. })
    ));
}

#[test]
fn next_token_distribution_is_normalized_and_stable() {
    let model = tiny_model(3);
    let video = random_video(model.config(), 9);
    let p = prompt(&model);
    let prefix = TokenSeq::new(vec![5, 9], false).unwrap();
    let d1 = model.next_token_distribution(&video, &p, &prefix).unwrap();
    let d2 = model.next_token_distribution(&video, &p, &prefix).unwrap();
    let sum: f64 = d1.data().iter().map(|&v| v as f64).sum();
    assert!((sum - 1.0).abs() < 1e-6);
    assert!(d1.data().iter().all(|&v| v >= 0.0));
    let argmax = |t: &vidmark_core::tensor::Tensor| {
        t.data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0
    };
    assert_eq!(argmax(&d1), argmax(&d2));
}

#[test]
fn generate_halts_immediately_when_eos_dominates() {
    let mut model = tiny_model(4);
    model
        .adjust_param("head.b", |t| {
            let mut data = t.data().to_vec();
            data[EOS] = 25.0;
            *t = vidmark_core::tensor::Tensor::new(t.shape().to_vec(), data).unwrap();
        })
        .unwrap();
    let video = random_video(model.config(), 10);
    let out = model
        .generate(&video, &prompt(&model), &DecodeConfig::default())
        .unwrap();
    assert!(out.is_empty());
    assert!(out.terminated());
}

#[test]
fn generate_respects_token_budget() {
    let mut model = tiny_model(5);
    model
        .adjust_param("head.b", |t| {
            let mut data = t.data().to_vec();
            data[10] = 25.0; // some non-EOS token dominates
            *t = vidmark_core::tensor::Tensor::new(t.shape().to_vec(), data).unwrap();
        })
        .unwrap();
    let video = random_video(model.config(), 11);
    let config = DecodeConfig {
        max_new_tokens: 1,
        ..DecodeConfig::default()
    };
    let out = model.generate(&video, &prompt(&model), &config).unwrap();
    assert_eq!(out.tokens(), &[10]);
    assert!(!out.terminated());
}

#[test]
fn greedy_generate_is_pure() {
    let model = tiny_model(6);
    let video = random_video(model.config(), 12);
    let a = model
        .generate(&video, &prompt(&model), &DecodeConfig::default())
        .unwrap();
    let b = model
        .generate(&video, &prompt(&model), &DecodeConfig::default())
        .unwrap();
    assert_eq!(a, b);
    assert!(a.len() <= DecodeConfig::default().max_new_tokens);
}

#[test]
fn sampling_is_deterministic_per_seed_and_beam_matches_contract() {
    let model = tiny_model(7);
    let video = random_video(model.config(), 13);
    let p = prompt(&model);
    let sample_config = DecodeConfig {
        mode: DecodeMode::Sample {
            temperature: 0.8,
            top_p: 0.9,
        },
        max_new_tokens: 6,
        seed: 99,
    };
    let a = model.generate(&video, &p, &sample_config).unwrap();
    let b = model.generate(&video, &p, &sample_config).unwrap();
    assert_eq!(a, b);

    let beam = DecodeConfig {
        mode: DecodeMode::Beam { width: 2 },
        max_new_tokens: 4,
        seed: 0,
    };
    let c = model.generate(&video, &p, &beam).unwrap();
    assert!(c.len() <= 4);
}

#[test]
fn decode_config_validation() {
    let bad_temp = DecodeConfig {
        mode: DecodeMode::Sample {
            temperature: 0.0,
            top_p: 0.9,
        },
        ..DecodeConfig::default()
    };
    assert!(bad_temp.validate().is_err());
    let bad_budget = DecodeConfig {
        max_new_tokens: 0,
        ..DecodeConfig::default()
    };
    assert!(bad_budget.validate().is_err());
}

#[test]
fn autoregressive_loss_bounds_and_untrained_level() {
    let model = tiny_model(8);
    let video = random_video(model.config(), 14);
    let p = prompt(&model);
    let target = TokenSeq::from_text(model.vocab(), "a red square moves left").unwrap();
    let loss = model.autoregressive_loss(&video, &p, &target).unwrap();
    assert!(loss >= 0.0);
    // Near-uniform initialization keeps the loss close to ln(vocab).
    let ln_v = (model.config().vocab_size as f64).ln();
    assert!(
        (loss as f64 - ln_v).abs() / ln_v < 0.15,
        "untrained loss {loss} vs ln V {ln_v}"
    );
}

#[test]
fn ar_loss_gradient_wrt_video_matches_finite_differences() {
    let model = tiny_model(9);
    let video = random_video(model.config(), 15);
    let prompt_ids = model.vocab().encode_text("What is this video about?");
    let target_ids = model.vocab().encode_text("a red square moves left");
    let report = grad_check(
        |tape: &mut Tape, x| {
            let bound = model.bind(tape, false);
            model
                .ar_loss_nodes(tape, &bound, x, &prompt_ids, &target_ids)
                .map_err(|e| match e {
                    ModelError::Tensor(t) => t,
                    other => vidmark_core::tensor::TensorError::Invalid {
                        op: "ar_loss",
                        detail: other.to_string(),
                    },
                })
        },
        video.tensor(),
        1e-3,
        1e-3,
    )
    .unwrap();
    assert!(report.pass, "max rel err {}", report.max_rel_err);
}

fn tiny_corpus(model_config: &CaptionerConfig) -> Vec<TrainSample> {
    vec![TrainSample {
        video: random_video(model_config, 21),
        caption: "a red square moves left".into(),
    }]
}

#[test]
fn single_sample_memorization() {
    let arch = CaptionerConfig::tiny();
    let config = TrainConfig {
        epochs: 150,
        batch_size: 1,
        learning_rate: 3e-3,
        seed: 5,
        prompts: vec!["What is this video about?".into()],
    };
    let samples = tiny_corpus(&arch);
    let (model, log) = train_captioner(arch, &samples, &config).unwrap();
    let final_loss = *log.epoch_losses.last().unwrap();
    assert!(final_loss < 0.05, "memorization loss {final_loss}");
    assert!(log.epoch_losses.last().unwrap() < log.epoch_losses.first().unwrap());

    let out = model
        .generate(&samples[0].video, &prompt(&model), &DecodeConfig::default())
        .unwrap();
    assert_eq!(out.text(model.vocab()), "a red square moves left");
    assert!(out.terminated());
}

#[test]
fn training_is_bit_deterministic() {
    let arch = CaptionerConfig::tiny();
    let config = TrainConfig {
        epochs: 3,
        batch_size: 1,
        learning_rate: 1e-3,
        seed: 77,
        prompts: vec!["What is this video about?".into()],
    };
    let samples = tiny_corpus(&arch);
    let (m1, log1) = train_captioner(arch.clone(), &samples, &config).unwrap();
    let (m2, log2) = train_captioner(arch, &samples, &config).unwrap();
    assert_eq!(log1.epoch_losses, log2.epoch_losses);
    let n1 = m1.params_snapshot();
    let n2 = m2.params_snapshot();
    for ((name1, t1), (_, t2)) in n1.iter().zip(n2.iter()) {
        assert_eq!(t1.data(), t2.data(), "parameter {name1} diverged");
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.vsck");
    let model = tiny_model(10);
    model.save(&path).unwrap();
    let loaded = CaptionerModel::load(&path).unwrap();
    assert_eq!(loaded.config(), model.config());
    for ((n1, t1), (_, t2)) in model
        .params_snapshot()
        .iter()
        .zip(loaded.params_snapshot().iter())
    {
        assert_eq!(t1.data(), t2.data(), "parameter {n1} diverged");
    }
    // Loaded model produces identical captions.
    let video = random_video(model.config(), 30);
    let a = model
        .generate(&video, &prompt(&model), &DecodeConfig::default())
        .unwrap();
    let b = loaded
        .generate(&video, &prompt(&loaded), &DecodeConfig::default())
        .unwrap();
    assert_eq!(a, b);
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.vsck");
    let model = tiny_model(11);
    model.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 37]).unwrap();
    assert!(matches!(
        CaptionerModel::load(&path),
        Err(ModelError::Checkpoint(_))
    ));
    std::fs::write(&path, &bytes[..2]).unwrap();
    assert!(matches!(
        CaptionerModel::load(&path),
        Err(ModelError::Checkpoint(_))
    ));
}
