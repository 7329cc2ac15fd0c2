use std::ops::{Add, Sub};

use ndarray::{s, Array2, ArrayView2};

use crate::error::{Error, Result};

pub const DEFAULT_FRAME_RATE: f64 = 50.0;

/// A `T×H` matrix of continuous frame features.
///
/// `frame_rate` is carried as metadata only; nothing resamples.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    frames: Array2<f64>,
    frame_rate: f64,
}

impl FeatureSequence {
    pub fn new(frames: Array2<f64>) -> Result<Self> {
        Self::with_frame_rate(frames, DEFAULT_FRAME_RATE)
    }

    pub fn with_frame_rate(frames: Array2<f64>, frame_rate: f64) -> Result<Self> {
        if frames.nrows() == 0 {
            return Err(Error::Empty("feature sequence has no frames".into()));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature sequence".into()));
        }
        Ok(FeatureSequence { frames, frame_rate })
    }

    pub fn zeros(len: usize, dim: usize) -> Self {
        assert!(len > 0, "zero-length feature sequence");
        FeatureSequence {
            frames: Array2::zeros((len, dim)),
            frame_rate: DEFAULT_FRAME_RATE,
        }
    }

    pub fn frames(&self) -> &Array2<f64> {
        &self.frames
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.frames.view()
    }

    pub fn into_frames(self) -> Array2<f64> {
        self.frames
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    /// Frames `start..end` as a new sequence.
    pub fn slice_frames(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::OutOfRange(format!(
                "frame range {start}..{end} of {}",
                self.len()
            )));
        }
        Ok(FeatureSequence {
            frames: self.frames.slice(s![start..end, ..]).to_owned(),
            frame_rate: self.frame_rate,
        })
    }

    /// Stacks `self` then `other` along time.
    pub fn concat(&self, other: &FeatureSequence) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch(format!(
                "concat: dim {} vs {}",
                self.dim(),
                other.dim()
            )));
        }
        let frames = ndarray::concatenate(ndarray::Axis(0), &[self.view(), other.view()])
            .expect("same width");
        Ok(FeatureSequence {
            frames,
            frame_rate: self.frame_rate,
        })
    }

    pub(crate) fn check_dim(&self, dim: usize, what: &str) -> Result<()> {
        if self.dim() != dim {
            return Err(Error::DimensionMismatch(format!(
                "{what}: expected dim {dim}, got {}",
                self.dim()
            )));
        }
        Ok(())
    }

    pub(crate) fn check_same_shape(&self, other: &FeatureSequence, what: &str) -> Result<()> {
        if self.frames.dim() != other.frames.dim() {
            return Err(Error::DimensionMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.frames.dim(),
                other.frames.dim()
            )));
        }
        Ok(())
    }
}

impl Add for &FeatureSequence {
    type Output = FeatureSequence;

    fn add(self, rhs: &FeatureSequence) -> FeatureSequence {
        assert_eq!(self.frames.dim(), rhs.frames.dim(), "feature add shape");
        FeatureSequence {
            frames: &self.frames + &rhs.frames,
            frame_rate: self.frame_rate,
        }
    }
}

impl Sub for &FeatureSequence {
    type Output = FeatureSequence;

    fn sub(self, rhs: &FeatureSequence) -> FeatureSequence {
        assert_eq!(self.frames.dim(), rhs.frames.dim(), "feature sub shape");
        FeatureSequence {
            frames: &self.frames - &rhs.frames,
            frame_rate: self.frame_rate,
        }
    }
}
