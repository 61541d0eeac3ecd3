//! Model checkpoints: denoiser weights, text encoder and pixel map in one container.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array2, ArrayViewMutD};
use serde::{Deserialize, Serialize};

use crate::autoencoder::PixelAutoencoder;
use crate::container::{Container, ContainerKind, Tensor};
use crate::error::{Error, Result};
use crate::latent::LatentShape;
use crate::model::{DenoiserModel, ModelConfig};
use crate::text::ToyTextEncoder;

pub const EMBEDDING_TABLE: &str = "text.embedding_table";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: DenoiserModel,
    pub encoder: ToyTextEncoder,
    pub autoencoder: PixelAutoencoder,
    /// Latent shape the model was trained on; the sampler default.
    pub latent_shape: LatentShape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextMeta {
    pub vocabulary: Vec<String>,
    pub max_length: usize,
    pub learned_token_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub model: ModelConfig,
    pub latent_shape: LatentShape,
    pub autoencoder: PixelAutoencoder,
    pub text: TextMeta,
}

impl Checkpoint {
    pub fn to_container(&self) -> Container {
        let meta = ModelMeta {
            model: *self.model.config(),
            latent_shape: self.latent_shape,
            autoencoder: self.autoencoder.clone(),
            text: TextMeta {
                vocabulary: self.encoder.words().to_vec(),
                max_length: self.encoder.max_length(),
                learned_token_ids: self.encoder.learned_token_ids().iter().copied().collect(),
            },
        };
        let mut tensors = Vec::new();
        self.model.visit_params(&mut |id, view| {
            tensors.push(Tensor {
                name: id.to_string(),
                shape: view.shape().to_vec(),
                data: view.iter().copied().collect(),
            });
        });
        let table = self.encoder.embedding_table();
        tensors.push(Tensor {
            name: EMBEDDING_TABLE.into(),
            shape: vec![table.nrows(), table.ncols()],
            data: table.iter().copied().collect(),
        });
        let metadata = serde_json::to_value(meta).expect("metadata serializes");
        Container::new(ContainerKind::Model, metadata, tensors).expect("consistent shapes")
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.header.kind != ContainerKind::Model {
            return Err(Error::Format("container does not hold a model".into()));
        }
        let meta: ModelMeta = serde_json::from_value(c.header.metadata.clone())
            .map_err(|e| Error::Format(format!("model metadata: {e}")))?;
        let mut model = DenoiserModel::new(meta.model).map_err(|e| Error::Format(e.to_string()))?;
        let mut failure = None;
        model.visit_params_mut(&mut |id, mut view: ArrayViewMutD<'_, f64>| {
            if failure.is_some() {
                return;
            }
            match c.tensor(id) {
                Some(t) if t.shape == view.shape() => {
                    for (dst, src) in view.iter_mut().zip(&t.data) {
                        *dst = *src;
                    }
                }
                Some(_) => failure = Some(format!("tensor `{id}` has the wrong shape")),
                None => failure = Some(format!("missing tensor `{id}`")),
            }
        });
        if let Some(msg) = failure {
            return Err(Error::Format(msg));
        }
        let table = c
            .tensor(EMBEDDING_TABLE)
            .ok_or_else(|| Error::Format(format!("missing tensor `{EMBEDDING_TABLE}`")))?;
        if table.shape.len() != 2 {
            return Err(Error::Format("embedding table must be 2-D".into()));
        }
        let table = Array2::from_shape_vec((table.shape[0], table.shape[1]), table.data.clone())
            .map_err(|e| Error::Format(e.to_string()))?;
        let encoder = ToyTextEncoder::from_parts(
            meta.text.vocabulary,
            table,
            meta.text.max_length,
            meta.text.learned_token_ids.into_iter().collect::<BTreeSet<_>>(),
        )
        .map_err(|e| Error::Format(e.to_string()))?;
        if meta.autoencoder.latent_channels() != meta.model.channels {
            return Err(Error::Format("autoencoder and model channel counts differ".into()));
        }
        Ok(Self {
            model,
            encoder,
            autoencoder: meta.autoencoder,
            latent_shape: meta.latent_shape,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}
