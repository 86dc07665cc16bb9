//! Lossless "VIDT" tensor files and the PNG frame-import hook.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{DataError, DataResult};
use crate::tensor::{Tape, Tensor};
use crate::video::VideoTensor;

pub const VIDEO_MAGIC: &[u8; 4] = b"VIDT";
const VIDEO_VERSION: u32 = 1;

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, detail: impl Into<String>) -> DataError {
    DataError::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Writes magic, version, F/H/W/C as little-endian u32, then the f32 payload.
pub fn save_video(video: &VideoTensor, path: &Path) -> DataResult<()> {
    let mut buf = Vec::with_capacity(24 + video.data().len() * 4);
    buf.extend_from_slice(VIDEO_MAGIC);
    buf.extend_from_slice(&VIDEO_VERSION.to_le_bytes());
    for d in video.dims() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in video.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(&buf).map_err(|e| io_err(path, e))
}

pub fn load_video(path: &Path) -> DataResult<VideoTensor> {
    let mut file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut header = [0u8; 24];
    file.read_exact(&mut header)
        .map_err(|_| format_err(path, "truncated header"))?;
    if &header[0..4] != VIDEO_MAGIC {
        return Err(format_err(path, "bad magic"));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != VIDEO_VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        *d = u32::from_le_bytes(header[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    }
    let numel: usize = dims.iter().product();
    if numel == 0 || numel > 1 << 28 {
        return Err(format_err(path, format!("implausible dims {dims:?}")));
    }
    let mut payload = vec![0u8; numel * 4];
    file.read_exact(&mut payload)
        .map_err(|_| format_err(path, "truncated payload"))?;
    let mut trailing = [0u8; 1];
    if file.read(&mut trailing).map_err(|e| io_err(path, e))? != 0 {
        return Err(format_err(path, "trailing bytes after payload"));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    VideoTensor::from_dims(dims, data).map_err(|e| format_err(path, e.to_string()))
}

/// Loads a directory of PNG frames (lexicographic order), selects `frames`
/// of them uniformly, and bilinearly resizes each to `height` x `width`.
pub fn import_frames(
    dir: &Path,
    frames: usize,
    height: usize,
    width: usize,
) -> DataResult<VideoTensor> {
    let mut names: Vec<_> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension()
                .map(|x| x.eq_ignore_ascii_case("png"))
                .unwrap_or(false)
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(DataError::Import {
            file: dir.display().to_string(),
            detail: "no png frames found".into(),
        });
    }

    let mut decoded: Vec<(usize, usize, Vec<f32>)> = Vec::with_capacity(names.len());
    for path in &names {
        let file_label = path.display().to_string();
        let img = image::open(path)
            .map_err(|e| DataError::Import {
                file: file_label.clone(),
                detail: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        if let Some((pw, ph, _)) = decoded.first() {
            if (*pw, *ph) != (w, h) {
                return Err(DataError::Import {
                    file: file_label,
                    detail: format!("dimensions {w}x{h} differ from first frame {pw}x{ph}"),
                });
            }
        }
        let data: Vec<f32> = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
        decoded.push((w, h, data));
    }

    // Uniform temporal selection: frame i of the output takes input frame
    // floor(i * in / out).
    let selected: Vec<usize> = (0..frames)
        .map(|i| i * decoded.len() / frames)
        .collect();

    let (in_w, in_h) = (decoded[0].0, decoded[0].1);
    let mut stacked = Vec::with_capacity(frames * in_h * in_w * 3);
    for &idx in &selected {
        stacked.extend_from_slice(&decoded[idx].2);
    }

    if (in_h, in_w) == (height, width) {
        return VideoTensor::from_dims([frames, height, width, 3], stacked)
            .map_err(|e| DataError::Invalid(e.to_string()));
    }

    // Same interpolation primitive the attack transform pipeline uses.
    let mut tape = Tape::new();
    let stack = Tensor::new(vec![frames, in_h, in_w, 3], stacked)
        .map_err(|e| DataError::Invalid(e.to_string()))?;
    let node = tape.constant(stack);
    let resized = tape
        .bilinear_resize(node, height, width)
        .map_err(|e| DataError::Invalid(e.to_string()))?;
    let data: Vec<f32> = tape
        .value(resized)
        .data()
        .iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    VideoTensor::from_dims([frames, height, width, 3], data)
        .map_err(|e| DataError::Invalid(e.to_string()))
}
