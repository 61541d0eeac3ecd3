mod common;

use std::collections::BTreeMap;

use common::{small_shape, tiny_encoder, tiny_model};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use subjectcraft_core::autoencoder::decode_video;
use subjectcraft_core::eval::{temporal_consistency, toy_embedder};
use subjectcraft_core::image::{synthetic_class_images, synthetic_subject};
use subjectcraft_core::lora::{AdapterMode, AdapterSet};
use subjectcraft_core::model::{ConditionEmbedding, Gradients};
use subjectcraft_core::train::{
    make_still_video, prior_loss, regularization_set, total_loss, total_loss_and_gradients, train_step,
    Denoiser, RegularizationSample, TrainSample, TrainState,
};
use subjectcraft_core::{
    train, DenoiserModel, Error, LatentVideo, PixelAutoencoder, Result, ToyTextEncoder, TrainConfig,
};

/// Predicts a fixed value everywhere and reports a fixed loss with zero
/// gradients.
struct Stub {
    loss: f64,
}

impl Denoiser for Stub {
    fn predict(&self, z_t: &LatentVideo, _: &ConditionEmbedding, _: usize, _: Option<&AdapterSet>, _: f64) -> Result<LatentVideo> {
        Ok(LatentVideo::zeros(z_t.shape()))
    }

    fn loss_and_gradients(
        &self,
        _: &LatentVideo,
        c: &ConditionEmbedding,
        _: usize,
        _: &LatentVideo,
        adapters: Option<&AdapterSet>,
        _: f64,
    ) -> Result<(f64, Gradients)> {
        let adapters = adapters
            .into_iter()
            .flat_map(AdapterSet::iter)
            .map(|a| {
                (
                    a.target_id.clone(),
                    subjectcraft_core::LoraGrad {
                        a: Array2::zeros(a.a.raw_dim()),
                        b: Array2::zeros(a.b.raw_dim()),
                    },
                )
            })
            .collect::<BTreeMap<_, _>>();
        Ok((
            self.loss,
            Gradients {
                adapters,
                context: Array2::zeros(c.tokens().raw_dim()),
            },
        ))
    }
}

fn config(alpha: f64) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        alpha,
        iterations: 12,
        frames: 3,
        ..TrainConfig::default()
    }
}

fn sample(prompt: &str, seed: u64) -> TrainSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TrainSample {
        z0: LatentVideo::randn(small_shape(), &mut rng),
        prompt: prompt.into(),
        t: 7,
        eps: LatentVideo::randn(small_shape(), &mut rng),
    }
}

fn subject_image() -> subjectcraft_core::RgbImage {
    synthetic_subject().render(4, 4)
}

fn reg(ae: &PixelAutoencoder, n: usize) -> Vec<RegularizationSample> {
    regularization_set(&synthetic_class_images(n, 4, 4, 1), "a toy", "V*", 3, ae).unwrap()
}

#[test]
fn zero_gradients_leave_parameters_unchanged() {
    let model = tiny_model(20);
    let cfg = TrainConfig {
        weight_decay: 0.5,
        ..config(1.0)
    };
    let mut state = TrainState::new(&model, tiny_encoder(8), &cfg).unwrap();
    // Make the adapters non-trivial so weight decay would be visible.
    for a in state.adapters.iter_mut() {
        a.b.fill(0.25);
    }
    let before = (state.adapters.clone(), state.encoder.clone());
    let sched = model.schedule().unwrap();
    let stub = Stub { loss: 0.5 };
    for i in 0..5 {
        let rec = train_step(&stub, &mut state, &sample("a V* toy", i), Some(&sample("a toy", 100 + i)), &cfg, &sched)
            .unwrap();
        assert_eq!(rec.total, 1.0);
    }
    assert_eq!(state.adapters, before.0);
    assert_eq!(state.encoder, before.1);
}

#[test]
fn non_finite_losses_name_their_term() {
    let model = tiny_model(20);
    let cfg = config(1.0);
    let sched = model.schedule().unwrap();
    let state = TrainState::new(&model, tiny_encoder(8), &cfg).unwrap();
    let stub = Stub { loss: f64::NAN };
    let err = total_loss_and_gradients(&stub, &state, &sample("a V* toy", 0), None, 1.0, &sched).err().unwrap();
    assert!(matches!(err, Error::NonFiniteLoss { term: "l_video", step: 1, .. }), "{err}");
    let inf = Stub { loss: f64::MAX };
    let err = total_loss_and_gradients(&inf, &state, &sample("a V* toy", 0), Some(&sample("a toy", 1)), 1.0, &sched)
        .err()
        .unwrap();
    assert!(matches!(err, Error::NonFiniteLoss { term: "total", .. }), "{err}");
}

#[test]
fn only_adapters_and_token_row_change() {
    let model = tiny_model(20);
    let ae = PixelAutoencoder::standard(4);
    let base_sums = model.param_checksums();
    let enc = tiny_encoder(8);
    let enc_sums = enc.row_checksums();
    for mode in [AdapterMode::CrossAndSelf, AdapterMode::CrossOnly] {
        let cfg = TrainConfig { mode, ..config(1.0) };
        let fresh = TrainState::new(&model, enc.clone(), &cfg).unwrap();
        let out = train(&model, enc.clone(), &[subject_image()], &["a V* toy".into()], &reg(&ae, 4), &ae, &cfg).unwrap();
        assert_eq!(model.param_checksums(), base_sums);
        assert_eq!(out.adapters.len(), if mode == AdapterMode::CrossOnly { 6 } else { 12 });
        for a in out.adapters.iter() {
            let f = fresh.adapters.get(&a.target_id).unwrap();
            assert_ne!(a.a, f.a, "{} A unchanged", a.target_id);
            assert_ne!(a.b, f.b, "{} B unchanged", a.target_id);
        }
        let after = out.encoder.row_checksums();
        assert_eq!(&after[..enc_sums.len()], &enc_sums[..], "frozen rows changed");
        assert_eq!(after.len(), enc_sums.len() + 1);
        let class_row = enc.row(enc.token_id("toy").unwrap()).to_vec();
        assert_ne!(out.token_row(), class_row);
    }
}

#[test]
fn training_is_deterministic_and_alpha_matters() {
    let model = tiny_model(20);
    let ae = PixelAutoencoder::standard(4);
    let run = |alpha: f64, seed: u64| {
        let cfg = TrainConfig { seed, ..config(alpha) };
        train(&model, tiny_encoder(8), &[subject_image()], &["a V* toy".into()], &reg(&ae, 4), &ae, &cfg).unwrap()
    };
    let (a, b) = (run(1.0, 0), run(1.0, 0));
    assert_eq!(a.adapters, b.adapters);
    assert_eq!(a.history, b.history);
    assert_eq!(a.adapters.to_container().to_bytes(), b.adapters.to_container().to_bytes());
    let c = run(0.0, 0);
    assert_ne!(a.adapters, c.adapters);
    // Same sampled batches: the video term agrees on step one, the totals do not.
    assert_eq!(a.history[0].l_video, c.history[0].l_video);
    assert_ne!(a.history[0].total, c.history[0].total);
    assert_ne!(run(1.0, 1).adapters, a.adapters);
}

#[test]
fn prior_term_matches_video_term_on_identical_batches() {
    let model = tiny_model(20);
    let cfg = config(1.0);
    let sched = model.schedule().unwrap();
    let mut state = TrainState::new(&model, tiny_encoder(8), &cfg).unwrap();
    for a in state.adapters.iter_mut() {
        a.b.fill(0.05);
    }
    let s = sample("a V* toy", 3);
    let alpha = 0.7;
    let (_, g_single) = total_loss_and_gradients(&model, &state, &s, None, alpha, &sched).unwrap();
    let (rec, g) = total_loss_and_gradients(&model, &state, &s, Some(&s), alpha, &sched).unwrap();
    assert_eq!(rec.l_pr, rec.l_video);
    assert_eq!(rec.total, total_loss(rec.l_video, rec.l_video, alpha).unwrap());
    for (id, gs) in &g_single.adapters {
        let gp = &g.adapters[id];
        for (x, y) in gs.b.iter().zip(gp.b.iter()) {
            assert!((x * (1.0 + alpha) - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }
    for (x, y) in g_single.token_row.iter().zip(g.token_row.iter()) {
        assert!((x * (1.0 + alpha) - y).abs() <= 1e-12 * (1.0 + y.abs()));
    }
    // The public prior_loss agrees with the in-step value.
    let r = RegularizationSample::new(s.z0.clone(), "a toy", "V*").unwrap();
    let lp = prior_loss(&model, Some(&state.adapters), &state.encoder, &r, s.t, &s.eps, &sched).unwrap();
    let (rec2, _) = total_loss_and_gradients(&model, &state, &s, Some(&TrainSample { prompt: "a toy".into(), ..s.clone() }), 1.0, &sched).unwrap();
    assert_eq!(lp, rec2.l_pr);
    assert!(total_loss(1.0, -1.0, 1.0).is_err());
}

#[test]
fn reg_samples_reject_the_pseudo_token() {
    let z = LatentVideo::zeros(small_shape());
    assert!(RegularizationSample::new(z.clone(), "a V* toy", "V*").is_err());
    assert!(RegularizationSample::new(z.clone(), "a v* toy", "V*").is_err());
    assert!(RegularizationSample::new(z, "a toy", "V*").is_ok());
}

#[test]
fn alpha_without_reg_set_is_rejected() {
    let model = tiny_model(20);
    let ae = PixelAutoencoder::standard(4);
    let err = train(&model, tiny_encoder(8), &[subject_image()], &["a V* toy".into()], &[], &ae, &config(1.0))
        .unwrap_err();
    assert!(err.to_string().contains("reg_set"), "{err}");
    train(&model, tiny_encoder(8), &[subject_image()], &["a V* toy".into()], &[], &ae, &config(0.0)).unwrap();
}

#[test]
fn still_videos_are_temporally_constant() {
    let ae = PixelAutoencoder::standard(4);
    let v = make_still_video(&synthetic_subject().render(8, 8), 5, &ae).unwrap();
    assert_eq!(v.shape().frames, 5);
    let frames = decode_video(&ae, &v).unwrap();
    let e = toy_embedder(0);
    assert!((temporal_consistency(&frames, &e).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn duplicate_token_is_a_conflict() {
    let model: DenoiserModel = tiny_model(20);
    let mut enc: ToyTextEncoder = tiny_encoder(8);
    enc.register_token("V*", "toy").unwrap();
    assert!(matches!(TrainState::new(&model, enc, &config(1.0)), Err(Error::Conflict(_))));
}

#[test]
fn overflowing_updates_report_divergence() {
    let model = tiny_model(20);
    let ae = PixelAutoencoder::standard(4);
    let cfg = TrainConfig {
        learning_rate: 1e300,
        ..config(0.0)
    };
    let err = train(&model, tiny_encoder(8), &[subject_image()], &["a V* toy".into()], &[], &ae, &cfg).unwrap_err();
    assert!(matches!(err, Error::NumericDivergence { step: 1, .. }), "{err}");
}
