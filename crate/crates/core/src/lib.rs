//! Protective video watermarking testbed.
//!
//! Implements an l-infinity-bounded perturbation toolkit against a built-in,
//! trainable toy video captioner: a reverse-mode autodiff engine, the
//! captioning model itself, four protective attack objectives plus a noise
//! baseline driven by projected gradient descent, a caption-quality metric
//! suite, and a deterministic synthetic video corpus.

pub mod data;
pub mod model;
pub mod tensor;
pub mod video;
