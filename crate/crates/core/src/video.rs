//! The protected object: a stack of frames with values in [0, 1].

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum VideoError {
    #[error("video tensor must be rank 4 [frames, height, width, channels], got {shape:?}")]
    NotRank4 { shape: Vec<usize> },
    #[error("video value {value} at element {index} outside [0, 1]")]
    OutOfRange { index: usize, value: f32 },
}

/// An F x H x W x C frame stack, row-major, every value in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor {
    tensor: Tensor,
}

impl VideoTensor {
    pub fn new(tensor: Tensor) -> Result<Self, VideoError> {
        if tensor.rank() != 4 {
            return Err(VideoError::NotRank4 {
                shape: tensor.shape().to_vec(),
            });
        }
        if let Some((index, &value)) = tensor
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(VideoError::OutOfRange { index, value });
        }
        Ok(VideoTensor { tensor })
    }

    pub fn from_dims(dims: [usize; 4], data: Vec<f32>) -> Result<Self, VideoError> {
        let tensor = Tensor::new(dims.to_vec(), data).map_err(|_| VideoError::NotRank4 {
            shape: dims.to_vec(),
        })?;
        VideoTensor::new(tensor)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn data(&self) -> &[f32] {
        self.tensor.data()
    }

    pub fn dims(&self) -> [usize; 4] {
        let s = self.tensor.shape();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn frames(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[3]
    }

    /// Largest absolute per-element difference from another video.
    pub fn linf_distance(&self, other: &VideoTensor) -> f32 {
        self.tensor.max_abs_diff(&other.tensor)
    }
}
