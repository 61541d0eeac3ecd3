//! Backbone checks against independent oracles: a loop-based second
//! implementation of the forward pass and central finite differences.

use std::collections::HashMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use subjectcraft_core::lora::{attach_adapters, AdapterMode};
use subjectcraft_core::model::{predict_noise, video_loss, ConditionEmbedding, DenoiserModel, ModelConfig, ScheduleConfig};
use subjectcraft_core::schedule::ScheduleKind;
use subjectcraft_core::{LatentShape, LatentVideo};

fn tiny_config(channels: usize, width: usize, cond_dim: usize) -> ModelConfig {
    ModelConfig {
        channels,
        width,
        cond_dim,
        spatial_blocks: 2,
        ff_mult: 2,
        schedule: ScheduleConfig {
            steps: 20,
            kind: ScheduleKind::LinearSignal,
        },
        seed: 11,
    }
}

fn random_context(len: usize, dim: usize, rng: &mut ChaCha8Rng) -> ConditionEmbedding {
    ConditionEmbedding::new(Array2::from_shape_simple_fn((len, dim), || rng.random_range(-1.0..1.0))).unwrap()
}

// ---- straight-line oracle -------------------------------------------------

type Mat = Vec<Vec<f64>>;

struct Params(HashMap<String, (Vec<usize>, Vec<f64>)>);

impl Params {
    fn of(model: &DenoiserModel) -> Self {
        let mut map = HashMap::new();
        model.visit_params(&mut |id, v| {
            map.insert(id.to_string(), (v.shape().to_vec(), v.iter().copied().collect()));
        });
        Params(map)
    }

    fn mat(&self, id: &str) -> Mat {
        let (shape, data) = &self.0[id];
        (0..shape[0]).map(|i| data[i * shape[1]..(i + 1) * shape[1]].to_vec()).collect()
    }

    fn vec(&self, id: &str) -> Vec<f64> {
        self.0[id].1.clone()
    }

    fn linear(&self, id: &str, x: &[f64], bias: bool) -> Vec<f64> {
        let w = self.mat(&format!("{id}.weight"));
        let mut y: Vec<f64> = w.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect();
        if bias {
            for (o, b) in y.iter_mut().zip(self.vec(&format!("{id}.bias"))) {
                *o += b;
            }
        }
        y
    }
}

fn sin_code(pos: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let f = (-(10000f64).ln() * i as f64 / half as f64).exp();
        out[i] = (pos * f).sin();
        out[half + i] = (pos * f).cos();
    }
    out
}

fn norm(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    x.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect()
}

fn attention(p: &Params, id: &str, queries: &Mat, keys: &Mat) -> Mat {
    let q: Mat = queries.iter().map(|x| p.linear(&format!("{id}.to_q"), x, false)).collect();
    let k: Mat = keys.iter().map(|x| p.linear(&format!("{id}.to_k"), x, false)).collect();
    let v: Mat = keys.iter().map(|x| p.linear(&format!("{id}.to_v"), x, false)).collect();
    let d = q[0].len() as f64;
    q.iter()
        .map(|qi| {
            let scores: Vec<f64> = k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()).collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut o = vec![0.0; v[0].len()];
            for (w, vj) in e.iter().zip(&v) {
                for (oc, vc) in o.iter_mut().zip(vj) {
                    *oc += w / z * vc;
                }
            }
            p.linear(&format!("{id}.to_out"), &o, true)
        })
        .collect()
}

fn oracle_forward(model: &DenoiserModel, z: &LatentVideo, ctx: &ConditionEmbedding, level: f64) -> Vec<f64> {
    let p = Params::of(model);
    let cfg = model.config();
    let w = cfg.width;
    let s = z.shape();
    let hw = s.height * s.width;
    let temb = p.linear("time_proj", &sin_code(level * 1000.0, w), true);
    let mut h: Mat = Vec::new();
    for f in 0..s.frames {
        for y in 0..s.height {
            for x in 0..s.width {
                let px: Vec<f64> = (0..s.channels).map(|c| z.data()[(f, y, x, c)]).collect();
                let mut t = p.linear("conv_in", &px, true);
                let pe: Vec<f64> = sin_code(y as f64, w / 2).into_iter().chain(sin_code(x as f64, w / 2)).collect();
                for i in 0..w {
                    t[i] += temb[i] + pe[i];
                }
                h.push(t);
            }
        }
    }
    let ctx_rows: Mat = ctx.tokens().rows().into_iter().map(|r| r.to_vec()).collect();
    for b in 0..cfg.spatial_blocks {
        let pre = format!("spatial.{b}");
        let n: Mat = h.iter().map(|r| norm(r)).collect();
        for f in 0..s.frames {
            let frame: Mat = n[f * hw..(f + 1) * hw].to_vec();
            let out = attention(&p, &format!("{pre}.self_attn"), &frame, &frame);
            for (i, o) in out.into_iter().enumerate() {
                for c in 0..w {
                    h[f * hw + i][c] += o[c];
                }
            }
        }
        let n: Mat = h.iter().map(|r| norm(r)).collect();
        let out = attention(&p, &format!("{pre}.cross_attn"), &n, &ctx_rows);
        for (hi, o) in h.iter_mut().zip(out) {
            for c in 0..w {
                hi[c] += o[c];
            }
        }
        for hi in h.iter_mut() {
            let a = p.linear(&format!("{pre}.ff.proj_in"), &norm(hi), true);
            let a: Vec<f64> = a.iter().map(|v| v / (1.0 + (-v).exp())).collect();
            let o = p.linear(&format!("{pre}.ff.proj_out"), &a, true);
            for c in 0..w {
                hi[c] += o[c];
            }
        }
        for loc in 0..hw {
            let seq: Mat = (0..s.frames)
                .map(|f| {
                    let code = sin_code(f as f64, w);
                    norm(&h[f * hw + loc]).iter().zip(code).map(|(a, b)| a + b).collect()
                })
                .collect();
            let out = attention(&p, &format!("temporal.{b}.attn"), &seq, &seq);
            for (f, o) in out.into_iter().enumerate() {
                for c in 0..w {
                    h[f * hw + loc][c] += o[c];
                }
            }
        }
    }
    h.iter().flat_map(|r| p.linear("conv_out", &norm(r), true)).collect()
}

#[test]
fn forward_matches_straight_line_oracle() {
    let model = DenoiserModel::new(tiny_config(1, 8, 6)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let shape = LatentShape::new(2, 2, 2, 1).unwrap();
    let z = LatentVideo::randn(shape, &mut rng);
    let ctx = random_context(3, 6, &mut rng);
    for t in [1, 7, 20] {
        let got = predict_noise(&model, &z, &ctx, t, None, 0.0).unwrap();
        let want = oracle_forward(&model, &z, &ctx, t as f64 / 20.0);
        for (a, b) in got.as_slice().iter().zip(&want) {
            assert!((a - b).abs() < 1e-10, "t={t}: {a} vs {b}");
        }
    }
}

#[test]
fn forward_is_deterministic_and_shape_preserving() {
    let model = DenoiserModel::new(ModelConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let shape = LatentShape::new(3, 4, 5, 4).unwrap();
    let z = LatentVideo::randn(shape, &mut rng);
    let ctx = random_context(8, 16, &mut rng);
    let a = predict_noise(&model, &z, &ctx, 10, None, 0.0).unwrap();
    let b = predict_noise(&model, &z, &ctx, 10, None, 0.0).unwrap();
    assert_eq!(a.shape(), shape);
    assert!(a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn forward_rejects_mismatches() {
    let model = DenoiserModel::new(ModelConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z = LatentVideo::randn(LatentShape::new(1, 2, 2, 3).unwrap(), &mut rng);
    let ctx = random_context(8, 16, &mut rng);
    assert!(predict_noise(&model, &z, &ctx, 1, None, 0.0).is_err());
    let z = LatentVideo::randn(LatentShape::new(1, 2, 2, 4).unwrap(), &mut rng);
    assert!(predict_noise(&model, &z, &random_context(8, 15, &mut rng), 1, None, 0.0).is_err());
    assert!(predict_noise(&model, &z, &ctx, 0, None, 0.0).is_err());
    assert!(predict_noise(&model, &z, &ctx, 51, None, 0.0).is_err());
}

#[test]
fn fresh_adapters_and_zero_scale_are_no_ops() {
    let model = DenoiserModel::new(ModelConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let shape = LatentShape::new(2, 4, 4, 4).unwrap();
    let fresh = attach_adapters(&model, 4, AdapterMode::CrossAndSelf, 3).unwrap();
    let mut trained = fresh.clone();
    for a in trained.iter_mut() {
        a.b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
    for _ in 0..5 {
        let z = LatentVideo::randn(shape, &mut rng);
        let ctx = random_context(8, 16, &mut rng);
        let t = rng.random_range(1..=50);
        let base = predict_noise(&model, &z, &ctx, t, None, 0.0).unwrap();
        let with_fresh = predict_noise(&model, &z, &ctx, t, Some(&fresh), 1.0).unwrap();
        let zero_scale = predict_noise(&model, &z, &ctx, t, Some(&trained), 0.0).unwrap();
        let active = predict_noise(&model, &z, &ctx, t, Some(&trained), 0.8).unwrap();
        assert!(base.max_abs_diff(&with_fresh) < 1e-6);
        assert!(base.max_abs_diff(&zero_scale) < 1e-6);
        assert!(base.max_abs_diff(&active) > 1e-6);
    }
}

#[test]
fn video_loss_values() {
    let s = LatentShape::new(1, 2, 2, 1).unwrap();
    let zero = LatentVideo::zeros(s);
    let half = LatentVideo::from_elem(s, 0.5);
    assert_eq!(video_loss(&half, &half).unwrap(), 0.0);
    assert_eq!(video_loss(&zero, &half).unwrap(), 0.25);
    let one = LatentShape::new(1, 1, 1, 1).unwrap();
    assert_eq!(video_loss(&LatentVideo::from_elem(one, 1.0), &LatentVideo::from_elem(one, -1.0)).unwrap(), 4.0);
    assert!(video_loss(&zero, &LatentVideo::zeros(one)).is_err());
}

/// Relative error `|a − n| / max(|a|, |n|)`, checked where `|a| > 1e-6`.
fn assert_close(analytic: f64, numeric: f64, what: &str) {
    if analytic.abs().max(numeric.abs()) <= 1e-6 {
        return;
    }
    let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
    assert!(rel < 1e-3, "{what}: analytic {analytic} numeric {numeric} rel {rel}");
}

#[test]
fn lora_and_context_gradients_match_finite_differences() {
    let model = DenoiserModel::new(tiny_config(2, 8, 6)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut set = attach_adapters(&model, 2, AdapterMode::CrossAndSelf, 4).unwrap();
    for a in set.iter_mut() {
        a.a.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        a.b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
    let shape = LatentShape::new(3, 2, 3, 2).unwrap();
    let z = LatentVideo::randn(shape, &mut rng);
    let eps = LatentVideo::randn(shape, &mut rng);
    let ctx = random_context(4, 6, &mut rng);
    let scale = 0.7;
    let t = 13;
    let (_, grads) = model.loss_and_gradients(&z, &ctx, t, &eps, Some(&set), scale).unwrap();
    assert_eq!(grads.adapters.len(), 12);
    let h = 1e-4;
    let loss = |set: &subjectcraft_core::AdapterSet, ctx: &ConditionEmbedding| {
        let pred = predict_noise(&model, &z, ctx, t, Some(set), scale).unwrap();
        video_loss(&eps, &pred).unwrap()
    };
    for id in set.target_ids() {
        for which in ["a", "b"] {
            let n = if which == "a" { set.get(&id).unwrap().a.len() } else { set.get(&id).unwrap().b.len() };
            for idx in 0..n {
                let mut plus = set.clone();
                let mut minus = set.clone();
                let bump = |s: &mut subjectcraft_core::AdapterSet, d: f64| {
                    let a = s.get_mut(&id).unwrap();
                    let m = if which == "a" { &mut a.a } else { &mut a.b };
                    m.as_slice_mut().unwrap()[idx] += d;
                };
                bump(&mut plus, h);
                bump(&mut minus, -h);
                let numeric = (loss(&plus, &ctx) - loss(&minus, &ctx)) / (2.0 * h);
                let g = &grads.adapters[&id];
                let analytic = if which == "a" { g.a.as_slice().unwrap()[idx] } else { g.b.as_slice().unwrap()[idx] };
                assert_close(analytic, numeric, &format!("{id}.{which}[{idx}]"));
            }
        }
    }
    for idx in 0..ctx.tokens().len() {
        let mut p = ctx.tokens().clone();
        let mut m = ctx.tokens().clone();
        p.as_slice_mut().unwrap()[idx] += h;
        m.as_slice_mut().unwrap()[idx] -= h;
        let numeric = (loss(&set, &ConditionEmbedding::new(p).unwrap()) - loss(&set, &ConditionEmbedding::new(m).unwrap())) / (2.0 * h);
        assert_close(grads.context.as_slice().unwrap()[idx], numeric, &format!("context[{idx}]"));
    }
}
