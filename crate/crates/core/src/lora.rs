//! Low-rank adapters on the spatial attention projections.
//!
//! An adapted projection computes `W₀x + λ·B·(A·x)`. One scale `λ` is shared
//! by every adapter in a set; it is also passed per forward call so sampling
//! never mutates shared state.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{Container, ContainerKind, Tensor};
use crate::error::{invalid, Error, Result};
use crate::model::{DenoiserModel, SublayerKind};
use crate::nn::to_f32_grid;

pub const DEFAULT_RANK: usize = 4;
/// Half-width of the uniform distribution used for `A`.
pub const A_INIT_RANGE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterMode {
    /// Q/K/V of both self- and cross-attention in every spatial block.
    CrossAndSelf,
    /// Q/K/V of cross-attention only.
    CrossOnly,
}

impl AdapterMode {
    pub fn sublayers(&self) -> &'static [SublayerKind] {
        match self {
            AdapterMode::CrossAndSelf => &[SublayerKind::SelfAttention, SublayerKind::CrossAttention],
            AdapterMode::CrossOnly => &[SublayerKind::CrossAttention],
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AdapterMode::CrossAndSelf => "cross_and_self",
            AdapterMode::CrossOnly => "cross_only",
        }
    }
}

impl std::str::FromStr for AdapterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_and_self" => Ok(AdapterMode::CrossAndSelf),
            "cross_only" => Ok(AdapterMode::CrossOnly),
            other => Err(invalid!(
                "unknown adapter mode `{other}` (expected cross_and_self or cross_only)"
            )),
        }
    }
}

/// The pair `(B, A)` attached to one projection `W₀ ∈ ℝ^{d×k}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub target_id: String,
    /// `r × k`
    pub a: Array2<f64>,
    /// `d × r`
    pub b: Array2<f64>,
}

impl LoraAdapter {
    pub fn new(target_id: impl Into<String>, a: Array2<f64>, b: Array2<f64>) -> Result<Self> {
        let target_id = target_id.into();
        let (r, k) = a.dim();
        let (d, rb) = b.dim();
        if r != rb {
            return Err(invalid!(
                "adapter `{target_id}`: A has rank {r} but B has rank {rb}"
            ));
        }
        if r == 0 || r >= d.min(k) {
            return Err(invalid!(
                "adapter `{target_id}`: rank {r} must satisfy 0 < r < min(d={d}, k={k})"
            ));
        }
        Ok(Self { target_id, a, b })
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.b.nrows()
    }

    /// `B·A`, the unscaled weight delta.
    pub fn delta_weight(&self) -> Array2<f64> {
        self.b.dot(&self.a)
    }
}

/// `λ·B·(A·x)` for every row `x` of `input` (`n × k`), giving `n × d`.
pub fn lora_delta(input: ArrayView2<'_, f64>, adapter: &LoraAdapter, lora_scale: f64) -> Result<Array2<f64>> {
    if input.ncols() != adapter.in_dim() {
        return Err(invalid!(
            "input inner dim {} does not match adapter `{}` input dim {}",
            input.ncols(),
            adapter.target_id,
            adapter.in_dim()
        ));
    }
    Ok(input.dot(&adapter.a.t()).dot(&adapter.b.t()) * lora_scale)
}

fn check_scale(lora_scale: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lora_scale) {
        return Err(invalid!("lora scale {lora_scale} outside [0, 1]"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    adapters: BTreeMap<String, LoraAdapter>,
    lora_scale: f64,
    mode: AdapterMode,
    rank: usize,
}

/// Attaches fresh adapters (`B = 0`, `A ~ U(±0.01)`) to every projection the mode covers.
pub fn attach_adapters(
    model: &DenoiserModel,
    rank: usize,
    mode: AdapterMode,
    seed: u64,
) -> Result<AdapterSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adapters = BTreeMap::new();
    for id in model.spatial_projection_ids(mode.sublayers()) {
        let w = model
            .spatial_projection(&id)
            .expect("ids come from the model")
            .weight();
        let (d, k) = w.dim();
        if rank == 0 || rank >= d.min(k) {
            return Err(invalid!(
                "rank {rank} too large for target `{id}` ({d}x{k}); need 0 < rank < {}",
                d.min(k)
            ));
        }
        let a = Array2::from_shape_simple_fn((rank, k), || {
            to_f32_grid(rng.random_range(-A_INIT_RANGE..=A_INIT_RANGE))
        });
        let b = Array2::zeros((d, rank));
        adapters.insert(id.clone(), LoraAdapter::new(id, a, b)?);
    }
    Ok(AdapterSet {
        adapters,
        lora_scale: 1.0,
        mode,
        rank,
    })
}

impl AdapterSet {
    pub fn from_parts(
        adapters: Vec<LoraAdapter>,
        lora_scale: f64,
        mode: AdapterMode,
    ) -> Result<Self> {
        check_scale(lora_scale)?;
        let rank = adapters.first().map(LoraAdapter::rank).unwrap_or(0);
        let mut map = BTreeMap::new();
        for a in adapters {
            if a.rank() != rank {
                return Err(invalid!("adapter `{}` has rank {}, set uses {rank}", a.target_id, a.rank()));
            }
            if map.insert(a.target_id.clone(), a).is_some() {
                return Err(invalid!("duplicate adapter target"));
            }
        }
        Ok(Self {
            adapters: map,
            lora_scale,
            mode,
            rank,
        })
    }

    pub fn get(&self, target_id: &str) -> Option<&LoraAdapter> {
        self.adapters.get(target_id)
    }

    pub fn get_mut(&mut self, target_id: &str) -> Option<&mut LoraAdapter> {
        self.adapters.get_mut(target_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.adapters.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut LoraAdapter> {
        self.adapters.values_mut()
    }

    pub fn target_ids(&self) -> Vec<String> {
        self.adapters.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_scale
    }

    pub fn mode(&self) -> AdapterMode {
        self.mode
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Sets the strength applied uniformly to all adapters. Weights are untouched.
    pub fn set_scale(&mut self, lora_scale: f64) -> Result<()> {
        check_scale(lora_scale)?;
        self.lora_scale = lora_scale;
        Ok(())
    }

    /// Consuming form of [`Self::set_scale`].
    pub fn with_scale(mut self, lora_scale: f64) -> Result<Self> {
        self.set_scale(lora_scale)?;
        Ok(self)
    }

    /// Verifies every adapter targets an existing spatial projection with matching shape.
    pub fn check_attached(&self, model: &DenoiserModel) -> Result<()> {
        for a in self.adapters.values() {
            let w = model.spatial_projection(&a.target_id).ok_or_else(|| {
                Error::InvalidState(format!("adapter target `{}` not in model", a.target_id))
            })?;
            if w.out_dim() != a.out_dim() || w.in_dim() != a.in_dim() {
                return Err(Error::InvalidState(format!(
                    "adapter `{}` is {}x{} but the projection is {}x{}",
                    a.target_id,
                    a.out_dim(),
                    a.in_dim(),
                    w.out_dim(),
                    w.in_dim()
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn to_container(&self) -> Container {
        let targets: Vec<_> = self
            .adapters
            .values()
            .map(|a| {
                serde_json::json!({
                    "target_id": a.target_id,
                    "a_shape": [a.a.nrows(), a.a.ncols()],
                    "b_shape": [a.b.nrows(), a.b.ncols()],
                })
            })
            .collect();
        let metadata = serde_json::json!({
            "mode": self.mode,
            "rank": self.rank,
            "lora_scale": self.lora_scale,
            "targets": targets,
        });
        let mut tensors = Vec::with_capacity(2 * self.adapters.len());
        for a in self.adapters.values() {
            for (suffix, m) in [("lora_a", &a.a), ("lora_b", &a.b)] {
                tensors.push(Tensor {
                    name: format!("{}.{suffix}", a.target_id),
                    shape: vec![m.nrows(), m.ncols()],
                    data: m.iter().copied().collect(),
                });
            }
        }
        Container::new(ContainerKind::Adapters, metadata, tensors).expect("shapes are consistent")
    }
}

#[derive(Deserialize)]
struct AdapterMeta {
    mode: AdapterMode,
    rank: usize,
    lora_scale: f64,
    targets: Vec<TargetMeta>,
}

#[derive(Deserialize)]
struct TargetMeta {
    target_id: String,
    a_shape: [usize; 2],
    b_shape: [usize; 2],
}

pub fn save_adapters(set: &AdapterSet, path: impl AsRef<Path>) -> Result<()> {
    set.save(path)
}

/// Loads an adapter file and resolves every target against `model`.
pub fn load_adapters(path: impl AsRef<Path>, model: &DenoiserModel) -> Result<AdapterSet> {
    adapters_from_container(&Container::load(path)?, model)
}

pub fn adapters_from_container(c: &Container, model: &DenoiserModel) -> Result<AdapterSet> {
    if c.header.kind != ContainerKind::Adapters {
        return Err(Error::Format("container does not hold adapters".into()));
    }
    let meta: AdapterMeta = serde_json::from_value(c.header.metadata.clone())
        .map_err(|e| Error::Format(format!("adapter metadata: {e}")))?;
    let mut adapters = Vec::with_capacity(meta.targets.len());
    for t in &meta.targets {
        let w = model.spatial_projection(&t.target_id).ok_or_else(|| {
            Error::IncompatibleModel(format!(
                "adapter target `{}` does not exist in the model",
                t.target_id
            ))
        })?;
        if t.b_shape[0] != w.out_dim() || t.a_shape[1] != w.in_dim() {
            return Err(Error::IncompatibleModel(format!(
                "adapter target `{}` shape does not match the model projection",
                t.target_id
            )));
        }
        let matrix = |suffix: &str, shape: [usize; 2]| -> Result<Array2<f64>> {
            let name = format!("{}.{suffix}", t.target_id);
            let tensor = c
                .tensor(&name)
                .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
            if tensor.shape != shape {
                return Err(Error::Format(format!("tensor `{name}` has wrong shape")));
            }
            Ok(Array2::from_shape_vec((shape[0], shape[1]), tensor.data.clone())
                .expect("length checked by container"))
        };
        let a = matrix("lora_a", t.a_shape)?;
        let b = matrix("lora_b", t.b_shape)?;
        adapters.push(LoraAdapter::new(t.target_id.clone(), a, b).map_err(|e| Error::Format(e.to_string()))?);
    }
    let set = AdapterSet::from_parts(adapters, meta.lora_scale, meta.mode)
        .map_err(|e| Error::Format(e.to_string()))?;
    if set.rank != meta.rank && !set.is_empty() {
        return Err(Error::Format(format!(
            "header rank {} disagrees with stored matrices ({})",
            meta.rank, set.rank
        )));
    }
    Ok(AdapterSet {
        rank: meta.rank,
        ..set
    })
}

/// Materializes `W₀ + λ·B·A` into a copy of the model, using the set's scale.
pub fn merge_weights(model: &DenoiserModel, set: &AdapterSet) -> Result<DenoiserModel> {
    set.check_attached(model)?;
    let mut merged = model.clone();
    for a in set.iter() {
        let base = model
            .spatial_projection(&a.target_id)
            .expect("checked above")
            .weight();
        let mut w = base.clone();
        if set.lora_scale != 0.0 {
            w.scaled_add(set.lora_scale, &a.delta_weight());
        }
        merged = merged.with_projection(&a.target_id, w)?;
    }
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny() -> DenoiserModel {
        DenoiserModel::new(crate::model::ModelConfig::default()).unwrap()
    }

    #[test]
    fn hand_computed_delta() {
        let a = LoraAdapter {
            target_id: "w".into(),
            a: array![[0.0, 1.0]],
            b: array![[1.0], [0.0]],
        };
        let x = array![[1.0, 2.0]];
        let delta = lora_delta(x.view(), &a, 0.5).unwrap();
        assert_eq!(delta, array![[1.0, 0.0]]);
        let w0 = Array2::<f64>::eye(2);
        let combined = x.dot(&w0.t()) + &delta;
        assert_eq!(combined, array![[2.0, 2.0]]);
        assert_eq!(lora_delta(x.view(), &a, 0.0).unwrap(), array![[0.0, 0.0]]);
        assert!(lora_delta(array![[1.0, 2.0, 3.0]].view(), &a, 0.5).is_err());
    }

    #[test]
    fn zero_b_gives_zero_delta() {
        let a = LoraAdapter {
            target_id: "w".into(),
            a: array![[0.3, -1.0, 2.0]],
            b: array![[0.0], [0.0]],
        };
        let d = lora_delta(array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]].view(), &a, 0.8).unwrap();
        assert!(d.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn adapter_counts_per_mode() {
        let m = tiny();
        let both = attach_adapters(&m, 4, AdapterMode::CrossAndSelf, 0).unwrap();
        let cross = attach_adapters(&m, 4, AdapterMode::CrossOnly, 0).unwrap();
        assert_eq!(both.len(), 12);
        assert_eq!(cross.len(), 6);
        assert!(cross.target_ids().iter().all(|id| id.contains("cross_attn")));
        for a in both.iter() {
            assert!(a.b.iter().all(|v| *v == 0.0));
            assert!(a.a.iter().all(|v| v.abs() <= A_INIT_RANGE));
            assert!(!a.target_id.contains("temporal") && !a.target_id.contains("to_out"));
        }
    }

    #[test]
    fn oversized_rank_names_target() {
        let err = attach_adapters(&tiny(), 16, AdapterMode::CrossOnly, 0).unwrap_err();
        assert!(err.to_string().contains("spatial.0.cross_attn.to_q.weight"), "{err}");
        assert!(attach_adapters(&tiny(), 0, AdapterMode::CrossOnly, 0).is_err());
    }

    #[test]
    fn scale_bounds() {
        let mut set = attach_adapters(&tiny(), 4, AdapterMode::CrossOnly, 0).unwrap();
        set.set_scale(0.4).unwrap();
        assert_eq!(set.lora_scale(), 0.4);
        assert!(set.set_scale(1.5).is_err());
        assert!(set.set_scale(-0.1).is_err());
        assert_eq!(set.lora_scale(), 0.4);
    }

    #[test]
    fn merge_at_zero_scale_is_weight_identical() {
        let m = tiny();
        let mut set = attach_adapters(&m, 4, AdapterMode::CrossAndSelf, 1).unwrap();
        for a in set.iter_mut() {
            a.b.fill(0.25);
        }
        set.set_scale(0.0).unwrap();
        assert_eq!(merge_weights(&m, &set).unwrap(), m);
    }

    #[test]
    fn merge_hand_arithmetic() {
        let m = tiny();
        let id = "spatial.0.self_attn.to_v.weight";
        let w0 = m.spatial_projection(id).unwrap().weight().clone();
        let mut a = Array2::zeros((1, 16));
        a[(0, 3)] = 2.0;
        let mut b = Array2::zeros((16, 1));
        b[(5, 0)] = 1.5;
        let set = AdapterSet::from_parts(
            vec![LoraAdapter::new(id, a, b).unwrap()],
            0.5,
            AdapterMode::CrossAndSelf,
        )
        .unwrap();
        let merged = merge_weights(&m, &set).unwrap();
        let w = merged.spatial_projection(id).unwrap().weight();
        for ((i, j), v) in w.indexed_iter() {
            let expected = if (i, j) == (5, 3) { w0[(i, j)] + 1.5 } else { w0[(i, j)] };
            assert_eq!(*v, expected);
        }
    }

    #[test]
    fn detached_set_rejected_by_merge() {
        let m = tiny();
        let set = AdapterSet::from_parts(
            vec![LoraAdapter::new("nope.weight", Array2::zeros((1, 16)), Array2::zeros((16, 1))).unwrap()],
            0.5,
            AdapterMode::CrossOnly,
        )
        .unwrap();
        assert!(matches!(merge_weights(&m, &set), Err(Error::InvalidState(_))));
    }
}
