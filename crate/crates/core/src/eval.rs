//! Embedding-similarity metrics over generated frame sequences.
//!
//! All four metrics are means of cosine similarities, so any embedder that
//! returns unit vectors can be plugged in. [`ToyEmbedder`] is a deterministic
//! stand-in for pretrained image/text encoders.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::RgbImage;

pub trait FrameEmbedder {
    fn dim(&self) -> usize;

    /// Unit-norm image embedding.
    fn embed_image(&self, frame: &RgbImage) -> Vec<f64>;

    /// Unit-norm text embedding; `None` for image-only embedders.
    fn embed_text(&self, _text: &str) -> Option<Vec<f64>> {
        None
    }
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(invalid!("cosine of vectors with dims {} and {}", u.len(), v.len()));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(invalid!("cosine is undefined for a zero vector"));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

fn non_empty(frames: &[RgbImage], what: &str) -> Result<()> {
    if frames.is_empty() {
        return Err(invalid!("{what} must contain at least one image"));
    }
    Ok(())
}

/// Mean frame-to-prompt cosine.
pub fn clip_t(frames: &[RgbImage], prompt: &str, embedder: &dyn FrameEmbedder) -> Result<f64> {
    non_empty(frames, "frames")?;
    let text = embedder
        .embed_text(prompt)
        .ok_or_else(|| invalid!("embedder has no text encoder"))?;
    let mut sum = 0.0;
    for f in frames {
        sum += cosine(&embedder.embed_image(f), &text)?;
    }
    Ok(sum / frames.len() as f64)
}

/// Mean image-image cosine over every (frame, target) pair.
pub fn clip_i(frames: &[RgbImage], targets: &[RgbImage], embedder: &dyn FrameEmbedder) -> Result<f64> {
    non_empty(frames, "frames")?;
    non_empty(targets, "targets")?;
    let targets: Vec<Vec<f64>> = targets.iter().map(|t| embedder.embed_image(t)).collect();
    let mut sum = 0.0;
    for f in frames {
        let e = embedder.embed_image(f);
        for t in &targets {
            sum += cosine(&e, t)?;
        }
    }
    Ok(sum / (frames.len() * targets.len()) as f64)
}

/// Same computation as [`clip_i`], meant for a second (self-supervised) embedder.
pub fn dino_i(frames: &[RgbImage], targets: &[RgbImage], embedder: &dyn FrameEmbedder) -> Result<f64> {
    clip_i(frames, targets, embedder)
}

/// Mean cosine between embeddings of consecutive frames.
pub fn temporal_consistency(frames: &[RgbImage], embedder: &dyn FrameEmbedder) -> Result<f64> {
    if frames.len() < 2 {
        return Err(invalid!(
            "temporal_consistency needs at least 2 frames, got {}",
            frames.len()
        ));
    }
    let emb: Vec<Vec<f64>> = frames.iter().map(|f| embedder.embed_image(f)).collect();
    let mut sum = 0.0;
    for pair in emb.windows(2) {
        sum += cosine(&pair[0], &pair[1])?;
    }
    Ok(sum / (emb.len() - 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub clip_t: f64,
    pub clip_i: f64,
    pub dino_i: f64,
    pub t_cons: f64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "clip_t,clip_i,dino_i,t_cons";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.clip_t, self.clip_i, self.dino_i, self.t_cons)
    }
}

pub fn evaluate(
    frames: &[RgbImage],
    targets: &[RgbImage],
    prompt: &str,
    clip: &dyn FrameEmbedder,
    dino: &dyn FrameEmbedder,
) -> Result<MetricReport> {
    Ok(MetricReport {
        clip_t: clip_t(frames, prompt, clip)?,
        clip_i: clip_i(frames, targets, clip)?,
        dino_i: dino_i(frames, targets, dino)?,
        t_cons: temporal_consistency(frames, clip)?,
    })
}

pub const SUMMARY_DIM: usize = 16;
pub const TOY_EMBED_DIM: usize = 32;

/// 2×2 grid of mean (R, G, B, luma) values, centered at mid-gray, projected
/// through a seeded random matrix and normalized. Text is a seeded hashed
/// bag of words through the same projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEmbedder {
    seed: u64,
    projection: Array2<f64>,
    bias: Array1<f64>,
}

pub fn toy_embedder(seed: u64) -> ToyEmbedder {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let projection = Array2::from_shape_simple_fn((TOY_EMBED_DIM, SUMMARY_DIM), &mut normal);
    let bias = Array1::from_shape_simple_fn(TOY_EMBED_DIM, || 0.1 * normal());
    ToyEmbedder {
        seed,
        projection,
        bias,
    }
}

fn fnv1a(seed: u64, word: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(word.as_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl ToyEmbedder {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn summarize(frame: &RgbImage) -> [f64; SUMMARY_DIM] {
        let (h, w) = (frame.height(), frame.width());
        let rows = [0..h.div_ceil(2), h / 2..h];
        let cols = [0..w.div_ceil(2), w / 2..w];
        let mut out = [0.0; SUMMARY_DIM];
        for (ri, r) in rows.iter().enumerate() {
            for (ci, c) in cols.iter().enumerate() {
                let mut acc = [0.0; 4];
                let mut n = 0.0;
                for y in r.clone() {
                    for x in c.clone() {
                        let [red, green, blue] = frame.pixel(y, x);
                        acc[0] += red;
                        acc[1] += green;
                        acc[2] += blue;
                        acc[3] += 0.299 * red + 0.587 * green + 0.114 * blue;
                        n += 1.0;
                    }
                }
                let cell = (ri * 2 + ci) * 4;
                for k in 0..4 {
                    out[cell + k] = acc[k] / n - 0.5;
                }
            }
        }
        out
    }

    fn project(&self, features: &[f64]) -> Vec<f64> {
        let v = self.projection.dot(&Array1::from(features.to_vec())) + &self.bias;
        let n = v.dot(&v).sqrt();
        v.iter().map(|x| x / n).collect()
    }
}

impl FrameEmbedder for ToyEmbedder {
    fn dim(&self) -> usize {
        TOY_EMBED_DIM
    }

    fn embed_image(&self, frame: &RgbImage) -> Vec<f64> {
        self.project(&Self::summarize(frame))
    }

    fn embed_text(&self, text: &str) -> Option<Vec<f64>> {
        let mut bag = [0.0; SUMMARY_DIM];
        for word in text.split_whitespace() {
            let h = fnv1a(self.seed, &word.to_lowercase());
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            bag[(h % SUMMARY_DIM as u64) as usize] += sign * 0.25;
        }
        Some(self.project(&bag))
    }
}
