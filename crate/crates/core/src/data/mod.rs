//! Deterministic procedural video/caption corpus plus lossless tensor file
//! I/O and a frame-import hook for external footage.

mod corpus;
mod io;
mod render;

pub use corpus::{generate_corpus, Corpus};
pub use io::{import_frames, load_video, save_video, VIDEO_MAGIC};
pub use render::{render_sample, RenderConfig};

use std::path::PathBuf;

use thiserror::Error;

use crate::video::VideoTensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("scene leaves the frame entirely at frame {frame}")]
    SpecOutOfFrame { frame: usize },
    #[error("{path}: format error: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("import error in {file}: {detail}")]
    Import { file: String, detail: String },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type DataResult<T> = Result<T, DataError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ColorKind {
    Red,
    Green,
    Blue,
    Yellow,
    White,
}

impl ColorKind {
    pub const ALL: [ColorKind; 5] = [
        ColorKind::Red,
        ColorKind::Green,
        ColorKind::Blue,
        ColorKind::Yellow,
        ColorKind::White,
    ];

    pub fn word(self) -> &'static str {
        match self {
            ColorKind::Red => "red",
            ColorKind::Green => "green",
            ColorKind::Blue => "blue",
            ColorKind::Yellow => "yellow",
            ColorKind::White => "white",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            ColorKind::Red => [0.90, 0.10, 0.10],
            ColorKind::Green => [0.10, 0.80, 0.15],
            ColorKind::Blue => [0.15, 0.20, 0.90],
            ColorKind::Yellow => [0.95, 0.90, 0.10],
            ColorKind::White => [0.95, 0.95, 0.95],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DirectionKind {
    Left,
    Right,
    Up,
    Down,
}

impl DirectionKind {
    pub const ALL: [DirectionKind; 4] = [
        DirectionKind::Left,
        DirectionKind::Right,
        DirectionKind::Up,
        DirectionKind::Down,
    ];

    pub fn word(self) -> &'static str {
        match self {
            DirectionKind::Left => "left",
            DirectionKind::Right => "right",
            DirectionKind::Up => "up",
            DirectionKind::Down => "down",
        }
    }

    /// Unit step in (x, y) pixel coordinates; y grows downward.
    pub fn unit(self) -> (f32, f32) {
        match self {
            DirectionKind::Left => (-1.0, 0.0),
            DirectionKind::Right => (1.0, 0.0),
            DirectionKind::Up => (0.0, -1.0),
            DirectionKind::Down => (0.0, 1.0),
        }
    }
}

/// Full description of one rendered scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub shape: ShapeKind,
    pub color: ColorKind,
    pub direction: DirectionKind,
    /// Pixels per frame.
    pub speed: f32,
    /// Object center in the first frame, (x, y) pixels.
    pub start: (f32, f32),
    /// Object diameter in pixels.
    pub size: f32,
}

impl SceneSpec {
    pub fn caption(&self) -> String {
        format!(
            "a {} {} moves {}",
            self.color.word(),
            self.shape.word(),
            self.direction.word()
        )
    }
}

/// One rendered video with its template caption.
#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub video: VideoTensor,
    pub caption: String,
    pub spec: SceneSpec,
    pub seed: u64,
}
