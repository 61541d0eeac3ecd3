//! Fixed per-channel affine map between RGB pixels and latent channels.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::RgbImage;
use crate::latent::LatentVideo;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelSource {
    Red,
    Green,
    Blue,
    Luma,
}

impl PixelSource {
    fn read(&self, rgb: [f64; 3]) -> f64 {
        match self {
            PixelSource::Red => rgb[0],
            PixelSource::Green => rgb[1],
            PixelSource::Blue => rgb[2],
            PixelSource::Luma => 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2],
        }
    }
}

/// `latent = scale·pixel + shift` for one latent channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelMap {
    pub source: PixelSource,
    pub scale: f64,
    pub shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelAutoencoder {
    pub channels: Vec<ChannelMap>,
}

const SOURCES: [PixelSource; 4] = [
    PixelSource::Red,
    PixelSource::Green,
    PixelSource::Blue,
    PixelSource::Luma,
];
const SCALES: [f64; 4] = [1.8, 2.0, 2.2, 1.6];

impl PixelAutoencoder {
    /// Channel `c` reads `[R, G, B, luma][c % 4]`, centered so mid-gray maps to zero.
    pub fn standard(latent_channels: usize) -> Self {
        let channels = (0..latent_channels)
            .map(|c| {
                let scale = SCALES[c % 4];
                ChannelMap {
                    source: SOURCES[c % 4],
                    scale,
                    shift: -0.5 * scale,
                }
            })
            .collect();
        Self { channels }
    }

    pub fn latent_channels(&self) -> usize {
        self.channels.len()
    }

    /// `H×W×C` latent frame.
    pub fn encode(&self, image: &RgbImage) -> Array3<f64> {
        let (h, w) = (image.height(), image.width());
        Array3::from_shape_fn((h, w, self.channels.len()), |(y, x, c)| {
            let m = &self.channels[c];
            m.scale * m.source.read(image.pixel(y, x)) + m.shift
        })
    }

    /// Inverts the first channel carrying each of R, G and B. Channels missing
    /// from the map fall back to the luma channel, then to channel 0.
    pub fn decode(&self, latent: &Array3<f64>) -> Result<RgbImage> {
        let (h, w, c) = latent.dim();
        if c != self.channels.len() {
            return Err(invalid!(
                "latent frame has {c} channels, autoencoder maps {}",
                self.channels.len()
            ));
        }
        let find = |s: PixelSource| self.channels.iter().position(|m| m.source == s);
        let pick = |s: PixelSource| find(s).or_else(|| find(PixelSource::Luma)).unwrap_or(0);
        let idx = [
            pick(PixelSource::Red),
            pick(PixelSource::Green),
            pick(PixelSource::Blue),
        ];
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for &ch in &idx {
                    let m = &self.channels[ch];
                    data.push((latent[(y, x, ch)] - m.shift) / m.scale);
                }
            }
        }
        RgbImage::new(h, w, data)
    }
}

/// Decodes every frame of a latent video.
pub fn decode_video(autoencoder: &PixelAutoencoder, latent: &LatentVideo) -> Result<Vec<RgbImage>> {
    latent
        .data()
        .outer_iter()
        .map(|frame| autoencoder.decode(&frame.to_owned()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::synthetic_subject;

    #[test]
    fn decode_inverts_encode() {
        let ae = PixelAutoencoder::standard(4);
        let img = synthetic_subject().render(6, 5);
        let back = ae.decode(&ae.encode(&img)).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mid_gray_is_zero_latent() {
        let ae = PixelAutoencoder::standard(4);
        let z = ae.encode(&RgbImage::filled(2, 2, [0.5; 3]));
        assert!(z.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn single_channel_decodes_to_gray() {
        let ae = PixelAutoencoder::standard(1);
        let img = RgbImage::filled(1, 1, [0.2, 0.4, 0.6]);
        let out = ae.decode(&ae.encode(&img)).unwrap();
        assert!((out.pixel(0, 0)[2] - 0.2).abs() < 1e-12);
    }
}
