//! RGB frames, binary PPM I/O and a small procedural shape renderer used
//! for synthetic subjects and regularization sets.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// `H×W×3` image with channel values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid!("image dimensions must be positive"));
        }
        if data.len() != height * width * 3 {
            return Err(invalid!(
                "image data has {} values, expected {}",
                data.len(),
                height * width * 3
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid!("image contains non-finite values"));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Binary PPM (`P6`, maxval 255). Values are clamped to `[0, 1]` and rounded.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.data
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(invalid!("truncated PPM header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| invalid!("bad PPM header"))?);
        }
        if fields[0] != "P6" {
            return Err(invalid!("not a binary PPM (magic `{}`)", fields[0]));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| invalid!("bad PPM header field `{s}`"));
        let (width, height, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if maxval != 255 {
            return Err(invalid!("only 8-bit PPM is supported (maxval {maxval})"));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let raster = bytes
            .get(pos..pos + width * height * 3)
            .ok_or_else(|| invalid!("truncated PPM raster"))?;
        Self::new(height, width, raster.iter().map(|&b| b as f64 / 255.0).collect())
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn load_ppm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm(&bytes).map_err(|e| invalid!("{}: {e}", path.display()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

/// A filled shape, optionally with an inner accent, on a flat background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub color: [f64; 3],
    pub background: [f64; 3],
    /// Center in normalized `[0, 1]` image coordinates `(y, x)`.
    pub center: (f64, f64),
    /// Half-extent relative to the shorter side.
    pub radius: f64,
    pub accent: Option<[f64; 3]>,
}

impl ShapeSpec {
    fn covers(&self, kind: ShapeKind, dy: f64, dx: f64, r: f64) -> bool {
        match kind {
            ShapeKind::Circle => dy * dy + dx * dx <= r * r,
            ShapeKind::Square => dy.abs() <= r && dx.abs() <= r,
            ShapeKind::Triangle => dy <= r && dy >= -r && dx.abs() <= (dy + r) * 0.5,
        }
    }

    pub fn render(&self, height: usize, width: usize) -> RgbImage {
        let mut img = RgbImage::filled(height, width, self.background);
        let side = height.min(width) as f64;
        let r = self.radius * side;
        let (cy, cx) = (self.center.0 * height as f64, self.center.1 * width as f64);
        for y in 0..height {
            for x in 0..width {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                if self.covers(self.kind, dy, dx, r) {
                    let inner = self
                        .accent
                        .filter(|_| self.covers(ShapeKind::Square, dy, dx, r * 0.35));
                    img.set_pixel(y, x, inner.unwrap_or(self.color));
                }
            }
        }
        img
    }
}

/// The fixed synthetic subject: a red circle with a yellow accent on pale blue.
pub fn synthetic_subject() -> ShapeSpec {
    ShapeSpec {
        kind: ShapeKind::Circle,
        color: [0.85, 0.15, 0.1],
        background: [0.75, 0.85, 0.95],
        center: (0.5, 0.5),
        radius: 0.3,
        accent: Some([0.95, 0.85, 0.1]),
    }
}

/// Procedural class images: random shapes, colors and placements.
pub fn synthetic_class_images(count: usize, height: usize, width: usize, seed: u64) -> Vec<RgbImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let kind = match rng.random_range(0..3) {
                0 => ShapeKind::Circle,
                1 => ShapeKind::Square,
                _ => ShapeKind::Triangle,
            };
            let mut color = || [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
            let (c, bg) = (color(), color());
            ShapeSpec {
                kind,
                color: c,
                background: bg,
                center: (rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)),
                radius: rng.random_range(0.15..0.35),
                accent: None,
            }
            .render(height, width)
        })
        .collect()
}
