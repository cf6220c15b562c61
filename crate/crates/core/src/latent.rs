use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A latent video `[frames, channels, height, width]` for one branch at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoLatent(Tensor);

impl VideoLatent {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 4 {
            return Err(Error::Conditioning(format!(
                "video latent must be [F, C, H, W], got dims {:?}",
                t.dims()
            )));
        }
        Ok(Self(t))
    }

    pub fn zeros(frames: usize, channels: usize, height: usize, width: usize) -> Self {
        Self(Tensor::zeros(&[frames, channels, height, width]))
    }

    pub fn from_frames(frames: &[Tensor]) -> Result<Self> {
        Self::new(Tensor::stack(frames)?)
    }

    pub fn frames(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn height(&self) -> usize {
        self.0.dims()[2]
    }

    pub fn width(&self) -> usize {
        self.0.dims()[3]
    }

    /// `[C, H, W]` slice of frame `i`.
    pub fn frame(&self, i: usize) -> Tensor {
        self.0.outer(i)
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn dims(&self) -> &[usize] {
        self.0.dims()
    }

    pub fn is_finite(&self) -> bool {
        self.0.is_finite()
    }

    pub fn bitwise_eq(&self, other: &VideoLatent) -> bool {
        self.0.bitwise_eq(&other.0)
    }

    pub fn distance(&self, other: &VideoLatent) -> Result<f64> {
        Ok(self.0.sub(&other.0)?.l2_norm())
    }

    /// `‖self − reference‖ / ‖reference‖`.
    pub fn relative_error(&self, reference: &VideoLatent) -> Result<f64> {
        Ok(self.distance(reference)? / reference.0.l2_norm())
    }
}

impl From<VideoLatent> for Tensor {
    fn from(v: VideoLatent) -> Self {
        v.0
    }
}
