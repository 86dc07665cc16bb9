//! Quick training-throughput probe (dev tool).

use std::time::Instant;

use vidmark_core::data::generate_corpus;
use vidmark_core::model::{train_captioner, CaptionerConfig, DecodeConfig, TokenSeq, TrainConfig, TrainSample};

fn main() {
    let t0 = Instant::now();
    let corpus = generate_corpus(2000, 42, 0.9).unwrap();
    println!("corpus: {:?} train={} heldout={}", t0.elapsed(), corpus.train.len(), corpus.heldout.len());

    let samples: Vec<TrainSample> = corpus
        .train
        .iter()
        .map(|s| TrainSample { video: s.video.clone(), caption: s.caption.clone() })
        .collect();

    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let lr: f32 = std::env::var("BENCH_LR").ok().and_then(|s| s.parse().ok()).unwrap_or(3e-3);
    let config = TrainConfig { epochs, learning_rate: lr, ..TrainConfig::default() };
    let t1 = Instant::now();
    let (model, log) = train_captioner(CaptionerConfig::default(), &samples, &config).unwrap();
    println!("train {} epochs: {:?}", epochs, t1.elapsed());
    println!("losses: {:?}", log.epoch_losses);

    let t2 = Instant::now();
    let prompt = TokenSeq::from_text(model.vocab(), "What is this video about?").unwrap();
    let mut exact = 0usize;
    let mut factor_hits = [0usize; 3]; // color, shape, direction
    let n_eval = corpus.heldout.len().min(100);
    for s in corpus.heldout.iter().take(n_eval) {
        let out = model.generate(&s.video, &prompt, &DecodeConfig::default()).unwrap();
        let text = out.text(model.vocab());
        if text == s.caption { exact += 1; }
        let got: Vec<&str> = text.split(' ').collect();
        let want: Vec<&str> = s.caption.split(' ').collect();
        if got.len() == 5 && want.len() == 5 {
            if got[1] == want[1] { factor_hits[0] += 1; }
            if got[2] == want[2] { factor_hits[1] += 1; }
            if got[4] == want[4] { factor_hits[2] += 1; }
        }
    }
    println!("heldout exact-match {}/{} color={} shape={} dir={} in {:?}",
        exact, n_eval, factor_hits[0], factor_hits[1], factor_hits[2], t2.elapsed());

    // Per-frame token motion signal on one held-out clip.
    let sample = &corpus.heldout[0];
    let feats = model.encode_video(&sample.video).unwrap();
    let d = model.config().embed_dim;
    let norm = |row: usize| -> f64 {
        feats.data()[row * d..(row + 1) * d].iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()
    };
    let dist = |a: usize, b: usize| -> f64 {
        (0..d).map(|j| (feats.data()[a * d + j] as f64 - feats.data()[b * d + j] as f64).powi(2)).sum::<f64>().sqrt()
    };
    println!("caption: {} speed {:.2}", sample.caption, sample.spec.speed);
    for t in 0..model.config().frames {
        println!("  frame {t}: norm {:.4} dist_to_prev {:.4}", norm(t), if t > 0 { dist(t, t-1) } else { 0.0 });
    }

}
