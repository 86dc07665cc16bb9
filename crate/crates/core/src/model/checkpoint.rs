//! Self-describing "VSCK" checkpoint files: architecture config, vocabulary,
//! and a little-endian f32 parameter payload. Round trips are bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{CaptionerConfig, CaptionerModel, ModelError, ModelResult, Vocabulary};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VSCK";
const CHECKPOINT_VERSION: u32 = 1;

fn bad(detail: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(detail.into())
}

struct Reader {
    buf: Vec<u8>,
    at: usize,
}

impl Reader {
    fn take(&mut self, n: usize) -> ModelResult<&[u8]> {
        if self.at + n > self.buf.len() {
            return Err(bad(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.at,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> ModelResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> ModelResult<String> {
        let len = self.u32()? as usize;
        if len > 1 << 20 {
            return Err(bad(format!("implausible string length {len}")));
        }
        String::from_utf8(self.take(len)?.to_vec()).map_err(|e| bad(e.to_string()))
    }
}

fn push_string(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

impl CaptionerModel {
    pub fn save(&self, path: &Path) -> ModelResult<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let c = self.config();
        for v in [
            c.frames,
            c.height,
            c.width,
            c.channels,
            c.patch,
            c.embed_dim,
            c.heads,
            c.layers,
            c.max_seq_len,
            c.vocab_size,
        ] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(self.vocab().len() as u32).to_le_bytes());
        for token in self.vocab().tokens() {
            push_string(&mut buf, token);
        }
        let named = self.params().named();
        buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
        for (name, tensor) in named {
            push_string(&mut buf, &name);
            buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
            for &d in tensor.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = fs::File::create(path).map_err(|e| ModelError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        file.write_all(&buf).map_err(|e| ModelError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> ModelResult<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| ModelError::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
        let mut r = Reader { buf, at: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mut dims = [0usize; 10];
        for d in dims.iter_mut() {
            *d = r.u32()? as usize;
        }
        let config = CaptionerConfig {
            frames: dims[0],
            height: dims[1],
            width: dims[2],
            channels: dims[3],
            patch: dims[4],
            embed_dim: dims[5],
            heads: dims[6],
            layers: dims[7],
            max_seq_len: dims[8],
            vocab_size: dims[9],
        };
        config.validate().map_err(|e| bad(e.to_string()))?;

        let vocab_len = r.u32()? as usize;
        if vocab_len != config.vocab_size {
            return Err(bad(format!(
                "vocab block has {vocab_len} tokens, config says {}",
                config.vocab_size
            )));
        }
        let mut tokens = Vec::with_capacity(vocab_len);
        for _ in 0..vocab_len {
            tokens.push(r.string()?);
        }
        let vocab = Vocabulary::from_tokens(tokens).map_err(|e| bad(e.to_string()))?;

        // Read tensors into a fresh parameter set, validating name and shape
        // against the architecture the config describes.
        let mut model = CaptionerModel::init(config, vocab, 0)?;
        let expected: Vec<(String, Vec<usize>)> = model
            .params()
            .named()
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect();
        let count = r.u32()? as usize;
        if count != expected.len() {
            return Err(bad(format!(
                "{count} tensors in file, architecture needs {}",
                expected.len()
            )));
        }
        for (want_name, want_shape) in &expected {
            let name = r.string()?;
            if &name != want_name {
                return Err(bad(format!("expected tensor {want_name}, found {name}")));
            }
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            if &shape != want_shape {
                return Err(bad(format!(
                    "{name}: shape {shape:?} does not match architecture {want_shape:?}"
                )));
            }
            let numel: usize = shape.iter().product();
            let bytes = r.take(numel * 4)?;
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            let tensor = Tensor::new(shape, data).map_err(|e| bad(e.to_string()))?;
            model.adjust_param(&name, |t| *t = tensor)?;
        }
        if r.at != r.buf.len() {
            return Err(bad("trailing bytes after parameter payload"));
        }
        Ok(model)
    }
}
