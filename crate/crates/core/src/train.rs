//! Subject learning: still videos from subject images, prior-preservation
//! batches and an AdamW loop over the adapter matrices and the pseudo-token row.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::PixelAutoencoder;
use crate::error::{invalid, Error, Result};
use crate::image::RgbImage;
use crate::latent::{LatentShape, LatentVideo};
use crate::lora::{attach_adapters, AdapterMode, AdapterSet, DEFAULT_RANK};
use crate::model::{video_loss, ConditionEmbedding, DenoiserModel, Gradients};
use crate::nn::to_f32_grid;
use crate::schedule::{forward_noise, NoiseSchedule};
use crate::text::ToyTextEncoder;

/// Anything that predicts noise and can differentiate the reconstruction loss.
pub trait Denoiser {
    fn predict(
        &self,
        z_t: &LatentVideo,
        c: &ConditionEmbedding,
        t: usize,
        adapters: Option<&AdapterSet>,
        lora_scale: f64,
    ) -> Result<LatentVideo>;

    fn loss_and_gradients(
        &self,
        z_t: &LatentVideo,
        c: &ConditionEmbedding,
        t: usize,
        eps: &LatentVideo,
        adapters: Option<&AdapterSet>,
        lora_scale: f64,
    ) -> Result<(f64, Gradients)>;
}

impl Denoiser for DenoiserModel {
    fn predict(
        &self,
        z_t: &LatentVideo,
        c: &ConditionEmbedding,
        t: usize,
        adapters: Option<&AdapterSet>,
        lora_scale: f64,
    ) -> Result<LatentVideo> {
        crate::model::predict_noise(self, z_t, c, t, adapters, lora_scale)
    }

    fn loss_and_gradients(
        &self,
        z_t: &LatentVideo,
        c: &ConditionEmbedding,
        t: usize,
        eps: &LatentVideo,
        adapters: Option<&AdapterSet>,
        lora_scale: f64,
    ) -> Result<(f64, Gradients)> {
        DenoiserModel::loss_and_gradients(self, z_t, c, t, eps, adapters, lora_scale)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub iterations: usize,
    /// Frames `N` of each still video.
    pub frames: usize,
    pub reg_set_size: usize,
    pub seed: u64,
    pub rank: usize,
    pub mode: AdapterMode,
    /// Pseudo-token literal, e.g. `V*`.
    pub token: String,
    /// Class noun the pseudo-token row is initialized from.
    pub class_word: String,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-5,
            weight_decay: 1e-2,
            alpha: 1.0,
            iterations: 300,
            frames: 8,
            reg_set_size: 16,
            seed: 0,
            rank: DEFAULT_RANK,
            mode: AdapterMode::CrossAndSelf,
            token: "V*".into(),
            class_word: "toy".into(),
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(invalid!("learning_rate must be > 0"));
        }
        if !(self.alpha >= 0.0) {
            return Err(invalid!("alpha must be >= 0"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(invalid!("weight_decay must be >= 0"));
        }
        if self.iterations == 0 {
            return Err(invalid!("iterations must be >= 1"));
        }
        if self.frames == 0 {
            return Err(invalid!("frames must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid!("adam betas must lie in [0, 1)"));
        }
        if self.token.split_whitespace().count() != 1 {
            return Err(invalid!("token must be a single word"));
        }
        Ok(())
    }
}

/// Replicates the encoded image across `frames` identical frames.
pub fn make_still_video(
    image: &RgbImage,
    frames: usize,
    autoencoder: &PixelAutoencoder,
) -> Result<LatentVideo> {
    if frames == 0 {
        return Err(invalid!("still video needs at least one frame"));
    }
    let frame = autoencoder.encode(image);
    let video = frame
        .broadcast((frames, frame.dim().0, frame.dim().1, frame.dim().2))
        .expect("leading axis broadcast")
        .to_owned();
    LatentVideo::new(video)
}

/// Regularization latent with its class caption.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularizationSample {
    latent: LatentVideo,
    caption: String,
}

impl RegularizationSample {
    /// Rejects captions containing `token`.
    pub fn new(latent: LatentVideo, caption: impl Into<String>, token: &str) -> Result<Self> {
        let caption = caption.into();
        let token = token.to_lowercase();
        if caption.split_whitespace().any(|w| w.to_lowercase() == token) {
            return Err(invalid!(
                "regularization caption `{caption}` contains the subject token"
            ));
        }
        Ok(Self { latent, caption })
    }

    pub fn latent(&self) -> &LatentVideo {
        &self.latent
    }

    pub fn caption(&self) -> &str {
        &self.caption
    }
}

/// `mean((ε − ε_θ(z_t^pr, c^pr, t))²)` on a regularization sample.
#[allow(clippy::too_many_arguments)]
pub fn prior_loss<D: Denoiser + ?Sized>(
    model: &D,
    adapters: Option<&AdapterSet>,
    encoder: &ToyTextEncoder,
    sample: &RegularizationSample,
    t: usize,
    eps: &LatentVideo,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let z_t = forward_noise(&sample.latent, t, eps, sched)?;
    let c = encoder.encode_prompt(&sample.caption)?;
    let scale = adapters.map_or(0.0, AdapterSet::lora_scale);
    let pred = model.predict(&z_t, &c, t, adapters, scale)?;
    video_loss(eps, &pred)
}

/// `l_video + alpha·l_pr`.
pub fn total_loss(l_video: f64, l_pr: f64, alpha: f64) -> Result<f64> {
    if l_video < 0.0 || l_pr < 0.0 || alpha < 0.0 {
        return Err(invalid!(
            "loss terms and alpha must be non-negative (l_video={l_video}, l_pr={l_pr}, alpha={alpha})"
        ));
    }
    Ok(l_video + alpha * l_pr)
}

/// One noised training example.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub z0: LatentVideo,
    pub prompt: String,
    pub t: usize,
    pub eps: LatentVideo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub l_video: f64,
    pub l_pr: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// AdamW with decoupled weight decay. Tensors whose gradient is identically
/// zero in a step are skipped entirely, as if they had no gradient.
#[derive(Debug, Clone, Default)]
pub struct AdamW {
    moments: BTreeMap<String, Moments>,
    steps: u64,
}

impl AdamW {
    fn begin_step(&mut self) {
        self.steps += 1;
    }

    fn update(&mut self, name: &str, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        if grad.iter().all(|g| *g == 0.0) {
            return;
        }
        let mo = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; params.len()],
            v: vec![0.0; params.len()],
        });
        let t = self.steps as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            mo.m[i] = cfg.beta1 * mo.m[i] + (1.0 - cfg.beta1) * g;
            mo.v[i] = cfg.beta2 * mo.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = mo.m[i] / bc1;
            let v_hat = mo.v[i] / bc2;
            let mut p = params[i] * (1.0 - cfg.learning_rate * cfg.weight_decay);
            p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
            params[i] = to_f32_grid(p);
        }
    }
}

/// Everything the optimizer mutates.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub adapters: AdapterSet,
    pub encoder: ToyTextEncoder,
    /// Vocabulary id of the learned pseudo-token.
    pub token_id: usize,
    pub optimizer: AdamW,
    pub step: usize,
}

impl TrainState {
    /// Attaches fresh adapters and registers the pseudo-token on a copy of `encoder`.
    pub fn new(model: &DenoiserModel, mut encoder: ToyTextEncoder, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let adapters = attach_adapters(model, config.rank, config.mode, config.seed)?;
        let token_id = encoder.register_token(&config.token, &config.class_word)?;
        Ok(Self {
            adapters,
            encoder,
            token_id,
            optimizer: AdamW::default(),
            step: 0,
        })
    }

    pub fn token_row(&self) -> Vec<f64> {
        self.encoder.row(self.token_id).to_vec()
    }
}

/// Loss and gradients for one noised sample.
fn sample_loss<D: Denoiser + ?Sized>(
    model: &D,
    state: &TrainState,
    sample: &TrainSample,
    sched: &NoiseSchedule,
) -> Result<(f64, Gradients, Vec<usize>)> {
    let ids = state.encoder.token_ids(&sample.prompt)?;
    let c = state.encoder.encode_prompt(&sample.prompt)?;
    let z_t = forward_noise(&sample.z0, sample.t, &sample.eps, sched)?;
    let (loss, grads) = model.loss_and_gradients(
        &z_t,
        &c,
        sample.t,
        &sample.eps,
        Some(&state.adapters),
        state.adapters.lora_scale(),
    )?;
    Ok((loss, grads, ids))
}

/// Gradients of `L = l_video + α·l_pr` for the trainable quantities.
pub struct StepGradients {
    pub adapters: BTreeMap<String, crate::nn::LoraGrad>,
    pub token_row: ndarray::Array1<f64>,
}

/// Evaluates the total loss and its gradients without updating anything.
pub fn total_loss_and_gradients<D: Denoiser + ?Sized>(
    model: &D,
    state: &TrainState,
    subject: &TrainSample,
    prior: Option<&TrainSample>,
    alpha: f64,
    sched: &NoiseSchedule,
) -> Result<(LossRecord, StepGradients)> {
    let step = state.step + 1;
    let (l_video, g_video, ids_video) = sample_loss(model, state, subject, sched)?;
    if !l_video.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            term: "l_video",
            value: l_video,
        });
    }
    let mut adapters = g_video.adapters;
    let mut token_row = state
        .encoder
        .row_gradient(&ids_video, &g_video.context, state.token_id);
    let mut l_pr = 0.0;
    if let Some(prior) = prior {
        let (lp, g_prior, ids_prior) = sample_loss(model, state, prior, sched)?;
        if !lp.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                term: "l_pr",
                value: lp,
            });
        }
        l_pr = lp;
        if alpha != 0.0 {
            for (id, g) in g_prior.adapters {
                let e = adapters
                    .entry(id)
                    .or_insert_with(|| crate::nn::LoraGrad {
                        a: Array2::zeros(g.a.raw_dim()),
                        b: Array2::zeros(g.b.raw_dim()),
                    });
                e.a.scaled_add(alpha, &g.a);
                e.b.scaled_add(alpha, &g.b);
            }
            token_row.scaled_add(
                alpha,
                &state
                    .encoder
                    .row_gradient(&ids_prior, &g_prior.context, state.token_id),
            );
        }
    }
    let total = total_loss(l_video, l_pr, alpha)?;
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            term: "total",
            value: total,
        });
    }
    Ok((
        LossRecord {
            step,
            l_video,
            l_pr,
            total,
        },
        StepGradients {
            adapters,
            token_row,
        },
    ))
}

/// One AdamW step on `l_video + α·l_pr`. Only adapter matrices and the
/// pseudo-token row change.
pub fn train_step<D: Denoiser + ?Sized>(
    model: &D,
    state: &mut TrainState,
    subject: &TrainSample,
    prior: Option<&TrainSample>,
    config: &TrainConfig,
    sched: &NoiseSchedule,
) -> Result<LossRecord> {
    let (record, grads) =
        total_loss_and_gradients(model, state, subject, prior, config.alpha, sched)?;
    state.optimizer.begin_step();
    for adapter in state.adapters.iter_mut() {
        let Some(g) = grads.adapters.get(&adapter.target_id) else {
            continue;
        };
        let name = adapter.target_id.clone();
        state.optimizer.update(
            &format!("{name}.lora_a"),
            adapter.a.as_slice_mut().expect("standard layout"),
            g.a.as_slice().expect("standard layout"),
            config,
        );
        state.optimizer.update(
            &format!("{name}.lora_b"),
            adapter.b.as_slice_mut().expect("standard layout"),
            g.b.as_slice().expect("standard layout"),
            config,
        );
    }
    let token_id = state.token_id;
    let mut row = state.encoder.learned_row_mut(token_id)?;
    state.optimizer.update(
        "token_row",
        row.as_slice_mut().expect("contiguous row"),
        grads.token_row.as_slice().expect("contiguous"),
        config,
    );
    state.step += 1;
    if !row.iter().all(|v| v.is_finite()) {
        return Err(Error::NumericDivergence {
            step: state.step,
            detail: format!("`{}` embedding row became non-finite", config.token),
        });
    }
    if let Some(a) = state
        .adapters
        .iter()
        .find(|a| !a.a.iter().chain(a.b.iter()).all(|v| v.is_finite()))
    {
        return Err(Error::NumericDivergence {
            step: state.step,
            detail: format!("adapter `{}` became non-finite", a.target_id),
        });
    }
    Ok(record)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub adapters: AdapterSet,
    pub encoder: ToyTextEncoder,
    pub token_id: usize,
    pub history: Vec<LossRecord>,
}

impl TrainOutcome {
    pub fn token_row(&self) -> Vec<f64> {
        self.encoder.row(self.token_id).to_vec()
    }
}

/// Runs `config.iterations` seeded steps. Each step draws a subject image, a
/// prompt, a timestep and noise, plus the same for one regularization sample
/// when the set is non-empty.
pub fn train(
    model: &DenoiserModel,
    encoder: ToyTextEncoder,
    images: &[RgbImage],
    prompts: &[String],
    reg_set: &[RegularizationSample],
    autoencoder: &PixelAutoencoder,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_progress(model, encoder, images, prompts, reg_set, autoencoder, config, |_| {})
}

#[allow(clippy::too_many_arguments)]
pub fn train_with_progress(
    model: &DenoiserModel,
    encoder: ToyTextEncoder,
    images: &[RgbImage],
    prompts: &[String],
    reg_set: &[RegularizationSample],
    autoencoder: &PixelAutoencoder,
    config: &TrainConfig,
    mut progress: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if images.is_empty() {
        return Err(invalid!("at least one subject image is required"));
    }
    if prompts.is_empty() {
        return Err(invalid!("at least one subject prompt is required"));
    }
    if config.alpha > 0.0 && reg_set.is_empty() {
        return Err(invalid!(
            "reg_set is empty but alpha = {} > 0 requires regularization samples",
            config.alpha
        ));
    }
    let sched = model.schedule()?;
    let videos = images
        .iter()
        .map(|img| make_still_video(img, config.frames, autoencoder))
        .collect::<Result<Vec<_>>>()?;
    let mut state = TrainState::new(model, encoder, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let steps = sched.steps();
    let mut history = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        let z0 = &videos[rng.random_range(0..videos.len())];
        let subject = TrainSample {
            z0: z0.clone(),
            prompt: prompts[rng.random_range(0..prompts.len())].clone(),
            t: rng.random_range(1..=steps),
            eps: LatentVideo::randn(z0.shape(), &mut rng),
        };
        let prior = (!reg_set.is_empty()).then(|| {
            let r = &reg_set[rng.random_range(0..reg_set.len())];
            TrainSample {
                z0: r.latent.clone(),
                prompt: r.caption.clone(),
                t: rng.random_range(1..=steps),
                eps: LatentVideo::randn(r.latent.shape(), &mut rng),
            }
        });
        let record = train_step(model, &mut state, &subject, prior.as_ref(), config, &sched)?;
        progress(&record);
        history.push(record);
    }
    Ok(TrainOutcome {
        adapters: state.adapters,
        encoder: state.encoder,
        token_id: state.token_id,
        history,
    })
}

/// Still-video regularization samples from class images.
pub fn regularization_set(
    images: &[RgbImage],
    caption: &str,
    token: &str,
    frames: usize,
    autoencoder: &PixelAutoencoder,
) -> Result<Vec<RegularizationSample>> {
    images
        .iter()
        .map(|img| RegularizationSample::new(make_still_video(img, frames, autoencoder)?, caption, token))
        .collect()
}

/// Trailing moving average with the given window (shorter at the start).
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// Loss history as CSV with columns `step,l_video,l_pr,total`.
pub fn write_loss_csv(history: &[LossRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("step,l_video,l_pr,total\n");
    for r in history {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.l_video, r.l_pr, r.total));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Shape of the still videos `train` would build from these images.
pub fn still_video_shape(image: &RgbImage, frames: usize, channels: usize) -> Result<LatentShape> {
    LatentShape::new(frames, image.height(), image.width(), channels)
}
