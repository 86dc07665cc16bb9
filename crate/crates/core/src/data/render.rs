//! Procedural renderer: one antialiased shape translating over a lightly
//! textured static background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DataError, DataResult, SceneSpec, ShapeKind, SyntheticSample};
use crate::video::VideoTensor;

/// Amplitude of the per-sample background texture. Non-flat backgrounds keep
/// the vision encoder from keying on constant pixels.
pub const BACKGROUND_NOISE: f32 = 0.02;
const BACKGROUND_BASE: f32 = 0.45;
/// Antialiasing ramp width in pixels.
const EDGE: f32 = 1.0;

#[derive(Clone, Copy, Debug)]
pub struct RenderConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            frames: 8,
            height: 32,
            width: 32,
        }
    }
}

/// Signed distance from point (dx, dy) relative to the shape center, with
/// `r` the half-size. Negative inside.
fn signed_distance(shape: ShapeKind, dx: f32, dy: f32, r: f32) -> f32 {
    match shape {
        ShapeKind::Square => dx.abs().max(dy.abs()) - r,
        ShapeKind::Circle => (dx * dx + dy * dy).sqrt() - r,
        ShapeKind::Triangle => {
            // Equilateral triangle pointing up (image y grows downward).
            let k = 3.0f32.sqrt();
            let mut x = dx.abs() - r;
            let mut y = -dy + r / k;
            if x + k * y > 0.0 {
                let (nx, ny) = ((x - k * y) / 2.0, (-k * x - y) / 2.0);
                x = nx;
                y = ny;
            }
            x -= x.clamp(-2.0 * r, 0.0);
            -(x * x + y * y).sqrt() * y.signum()
        }
    }
}

fn center_at(spec: &SceneSpec, frame: usize) -> (f32, f32) {
    let (ux, uy) = spec.direction.unit();
    (
        spec.start.0 + ux * spec.speed * frame as f32,
        spec.start.1 + uy * spec.speed * frame as f32,
    )
}

/// Renders a sample. The background texture is drawn once from `seed` and
/// shared by all frames, so motion is the only temporal signal.
pub fn render_sample(
    spec: &SceneSpec,
    seed: u64,
    config: RenderConfig,
) -> DataResult<SyntheticSample> {
    let RenderConfig {
        frames,
        height,
        width,
    } = config;
    let r = spec.size / 2.0;

    // The object must stay at least partially visible in every frame.
    for t in 0..frames {
        let (cx, cy) = center_at(spec, t);
        if cx + r < 0.0 || cx - r > (width - 1) as f32 || cy + r < 0.0 || cy - r > (height - 1) as f32
        {
            return Err(DataError::SpecOutOfFrame { frame: t });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background: Vec<f32> = (0..height * width * 3)
        .map(|_| BACKGROUND_BASE + rng.gen_range(-BACKGROUND_NOISE..BACKGROUND_NOISE))
        .collect();
    let rgb = spec.color.rgb();

    let mut data = vec![0.0f32; frames * height * width * 3];
    for t in 0..frames {
        let (cx, cy) = center_at(spec, t);
        for y in 0..height {
            for x in 0..width {
                let d = signed_distance(spec.shape, x as f32 - cx, y as f32 - cy, r);
                let alpha = (0.5 - d / EDGE).clamp(0.0, 1.0);
                for c in 0..3 {
                    let bg = background[(y * width + x) * 3 + c];
                    let v = bg * (1.0 - alpha) + rgb[c] * alpha;
                    data[((t * height + y) * width + x) * 3 + c] = v.clamp(0.0, 1.0);
                }
            }
        }
    }

    let video = VideoTensor::from_dims([frames, height, width, 3], data)
        .expect("rendered values are clamped to [0,1]");
    Ok(SyntheticSample {
        video,
        caption: spec.caption(),
        spec: spec.clone(),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ColorKind, DirectionKind};

    fn spec() -> SceneSpec {
        SceneSpec {
            shape: ShapeKind::Square,
            color: ColorKind::Red,
            direction: DirectionKind::Left,
            speed: 1.5,
            start: (20.0, 16.0),
            size: 10.0,
        }
    }

    #[test]
    fn zero_speed_gives_identical_frames() {
        let mut s = spec();
        s.speed = 0.0;
        let sample = render_sample(&s, 7, RenderConfig::default()).unwrap();
        let d = sample.video.data();
        let frame = sample.video.height() * sample.video.width() * 3;
        for t in 1..sample.video.frames() {
            assert_eq!(&d[..frame], &d[t * frame..(t + 1) * frame]);
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let a = render_sample(&spec(), 99, RenderConfig::default()).unwrap();
        let b = render_sample(&spec(), 99, RenderConfig::default()).unwrap();
        assert_eq!(a.video.data(), b.video.data());
        let c = render_sample(&spec(), 100, RenderConfig::default()).unwrap();
        assert_ne!(a.video.data(), c.video.data());
    }

    #[test]
    fn red_square_has_higher_red_mean_than_blue_square() {
        let red = render_sample(&spec(), 5, RenderConfig::default()).unwrap();
        let mut blue_spec = spec();
        blue_spec.color = ColorKind::Blue;
        let blue = render_sample(&blue_spec, 5, RenderConfig::default()).unwrap();
        let red_mean = |v: &VideoTensor| {
            v.data().iter().step_by(3).map(|&x| x as f64).sum::<f64>() / (v.data().len() / 3) as f64
        };
        assert!(red_mean(&red.video) > red_mean(&blue.video));
    }

    #[test]
    fn off_frame_scene_is_rejected() {
        let mut s = spec();
        s.speed = 6.0; // 20 - 6*7 = -22, fully out on the last frame
        let err = render_sample(&s, 1, RenderConfig::default()).unwrap_err();
        assert!(matches!(err, DataError::SpecOutOfFrame { .. }));
    }

    #[test]
    fn caption_follows_template() {
        assert_eq!(spec().caption(), "a red square moves left");
    }
}
