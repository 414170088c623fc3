//! Stacked, quantized observations shared between environments, replay and
//! the network input path.
//!
//! A preprocessed frame is stored once as `u8` (value/255 in `[0,1]`) behind an
//! `Arc`, so consecutive stacked observations and the `next_obs` of n-step
//! entries share storage instead of copying pixels.

use std::fmt;
use std::sync::Arc;

use crate::network::Real;

/// Channel/height/width of a tensor laid out channel-first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape3 {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// One preprocessed frame, channel-first, quantized to `u8`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    shape: Shape3,
    data: Arc<[u8]>,
}

impl Frame {
    pub fn new(shape: Shape3, data: Vec<u8>) -> Self {
        assert_eq!(shape.len(), data.len(), "frame data does not match its shape");
        Self {
            shape,
            data: data.into(),
        }
    }

    /// Quantizes values in `[0,1]` (clamped) to `u8`.
    pub fn from_unit(shape: Shape3, values: &[f32]) -> Self {
        let data = values
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Self::new(shape, data)
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    /// Writes the frame scaled to `[0,1]`.
    pub fn write_unit<T: Real>(&self, out: &mut [T]) {
        let scale = T::one() / T::of(255.0);
        for (o, &b) in out.iter_mut().zip(self.data.iter()) {
            *o = T::of(b as f64) * scale;
        }
    }
}

/// A stack of the most recent frames, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    frames: Vec<Frame>,
}

impl Observation {
    pub fn new(frames: Vec<Frame>) -> Self {
        assert!(!frames.is_empty(), "an observation needs at least one frame");
        let s = frames[0].shape();
        assert!(
            frames.iter().all(|f| f.shape() == s),
            "stacked frames must share a shape"
        );
        Self { frames }
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    /// Network input shape: stacked channels × height × width.
    pub fn shape(&self) -> Shape3 {
        let s = self.frames[0].shape();
        Shape3::new(s.channels * self.frames.len(), s.height, s.width)
    }

    /// Writes the observation channel-first into `out` (length `shape().len()`).
    pub fn write_unit<T: Real>(&self, out: &mut [T]) {
        let per = self.frames[0].shape().len();
        assert_eq!(out.len(), per * self.frames.len());
        for (f, chunk) in self.frames.iter().zip(out.chunks_mut(per)) {
            f.write_unit(chunk);
        }
    }

    pub fn to_unit_vec<T: Real>(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.shape().len()];
        self.write_unit(&mut out);
        out
    }
}

/// Packs observations into a `[batch, C, H, W]` buffer.
pub fn stack_batch<'a, T: Real>(obs: impl IntoIterator<Item = &'a Observation>, shape: Shape3) -> Vec<T> {
    let per = shape.len();
    let mut out = Vec::new();
    for o in obs {
        assert_eq!(o.shape(), shape, "observation shape differs from the batch shape");
        let start = out.len();
        out.resize(start + per, T::zero());
        o.write_unit(&mut out[start..]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_round_trip_is_exact_for_extremes() {
        let f = Frame::from_unit(Shape3::new(1, 1, 3), &[0.0, 1.0, 0.5]);
        let v: Vec<f32> = Observation::new(vec![f]).to_unit_vec();
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], 1.0);
        assert!((v[2] - 0.5).abs() < 1.0 / 255.0);
    }

    #[test]
    fn stacked_shape_multiplies_channels() {
        let f = Frame::new(Shape3::new(1, 2, 2), vec![0, 1, 2, 3]);
        let o = Observation::new(vec![f.clone(), f.clone(), f]);
        assert_eq!(o.shape(), Shape3::new(3, 2, 2));
        let batch: Vec<f32> = stack_batch([&o, &o], o.shape());
        assert_eq!(batch.len(), 24);
    }
}
