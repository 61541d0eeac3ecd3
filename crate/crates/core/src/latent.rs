//! The latent video tensor shared by the backbone, trainer and sampler.

use ndarray::{Array4, ArrayView2, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result};

/// Frame count, height, width and channel count of a latent video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct LatentShape {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl LatentShape {
    pub fn new(frames: usize, height: usize, width: usize, channels: usize) -> Result<Self> {
        let shape = Self {
            frames,
            height,
            width,
            channels,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(invalid!("latent shape {self} has a zero dimension"));
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.frames, self.height, self.width, self.channels)
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.frames * self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for LatentShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}x{}x{}x{}",
            self.frames, self.height, self.width, self.channels
        )
    }
}

/// An `F×H×W×C` array of finite reals.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo(Array4<f64>);

impl LatentVideo {
    /// Wraps an array, rejecting empty dimensions and non-finite entries.
    pub fn new(data: Array4<f64>) -> Result<Self> {
        let (f, h, w, c) = data.dim();
        LatentShape::new(f, h, w, c)?;
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(invalid!("latent contains non-finite entry {bad}"));
        }
        Ok(Self(data.as_standard_layout().into_owned()))
    }

    pub fn zeros(shape: LatentShape) -> Self {
        Self(Array4::zeros(shape.dims()))
    }

    pub fn from_elem(shape: LatentShape, value: f64) -> Self {
        Self(Array4::from_elem(shape.dims(), value))
    }

    pub fn from_vec(shape: LatentShape, data: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        let arr = Array4::from_shape_vec(shape.dims(), data)
            .map_err(|e| invalid!("latent data does not match shape {shape}: {e}"))?;
        Self::new(arr)
    }

    /// Standard normal sample of the given shape.
    pub fn randn<R: Rng + ?Sized>(shape: LatentShape, rng: &mut R) -> Self {
        Self(Array4::from_shape_simple_fn(shape.dims(), || {
            rng.sample::<f64, _>(StandardNormal)
        }))
    }

    pub fn shape(&self) -> LatentShape {
        let (frames, height, width, channels) = self.0.dim();
        LatentShape {
            frames,
            height,
            width,
            channels,
        }
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array4<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice().expect("latent is kept in standard layout")
    }

    /// Rows are tokens in frame-major, then row-major spatial order; columns are channels.
    pub fn tokens(&self) -> ArrayView2<'_, f64> {
        let s = self.shape();
        ArrayView2::from_shape((s.frames * s.tokens_per_frame(), s.channels), self.as_slice())
            .expect("standard layout")
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_same_shape(&self, other: &LatentVideo, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(invalid!(
                "{what}: shape mismatch {} vs {}",
                self.shape(),
                other.shape()
            ));
        }
        Ok(())
    }

    /// Elementwise `a·self + b·other`.
    pub fn affine_combine(&self, a: f64, other: &LatentVideo, b: f64) -> Result<LatentVideo> {
        self.ensure_same_shape(other, "affine_combine")?;
        let mut out = self.0.clone();
        Zip::from(&mut out)
            .and(&other.0)
            .for_each(|o, &y| *o = a * *o + b * y);
        Ok(LatentVideo(out))
    }

    pub fn scale(&self, a: f64) -> LatentVideo {
        LatentVideo(self.0.mapv(|v| a * v))
    }

    pub fn max_abs_diff(&self, other: &LatentVideo) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn from_raw(data: Array4<f64>) -> Self {
        Self(data)
    }
}
