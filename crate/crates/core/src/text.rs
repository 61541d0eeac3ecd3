//! Toy text encoder with learnable pseudo-tokens.
//!
//! Encoding is whitespace tokenization, lowercase lookup into an embedding
//! table and an additive sinusoidal position code. Padding positions stay
//! exactly zero so the empty condition is the all-zero matrix.

use std::collections::{BTreeSet, HashMap};

use ndarray::{Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::model::ConditionEmbedding;
use crate::nn::{sinusoid, to_f32_grid};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

pub const DEFAULT_MAX_LENGTH: usize = 8;

/// Words every vocabulary starts with, after the two reserved tokens.
pub const BASE_WORDS: [&str; 64] = [
    "a", "an", "the", "photo", "video", "of", "in", "on", "at", "with", "and", "is", "running",
    "walking", "swimming", "flying", "jumping", "sitting", "dancing", "playing", "riding",
    "eating", "sleeping", "floating", "spinning", "park", "beach", "street", "forest", "snow",
    "water", "sky", "room", "garden", "desert", "city", "road", "teddybear", "dog", "cat",
    "duck", "car", "toy", "bear", "robot", "bird", "horse", "boat", "circle", "square",
    "triangle", "shape", "red", "green", "blue", "yellow", "white", "black", "small", "big",
    "bright", "dark", "slowly", "quickly",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTextEncoder {
    words: Vec<String>,
    index: HashMap<String, usize>,
    embedding_table: Array2<f64>,
    max_length: usize,
    learned: BTreeSet<usize>,
}

fn tokenize(prompt: &str) -> impl Iterator<Item = String> + '_ {
    prompt.split_whitespace().map(str::to_lowercase)
}

impl ToyTextEncoder {
    /// Builds the vocabulary from the reserved tokens, the base list and any
    /// words appearing in `corpus`, then draws seeded embedding rows.
    pub fn new<'a>(
        corpus: impl IntoIterator<Item = &'a str>,
        dim: usize,
        max_length: usize,
        seed: u64,
    ) -> Result<Self> {
        if dim == 0 || max_length == 0 {
            return Err(invalid!("encoder dim and max_length must be positive"));
        }
        let mut words: Vec<String> = vec![PAD.into(), UNK.into()];
        words.extend(BASE_WORDS.iter().map(|w| w.to_string()));
        let mut index: HashMap<String, usize> =
            words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        for prompt in corpus {
            for w in tokenize(prompt) {
                if !index.contains_key(&w) {
                    index.insert(w.clone(), words.len());
                    words.push(w);
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut embedding_table = Array2::from_shape_simple_fn((words.len(), dim), || {
            let v: f64 = StandardNormal.sample(&mut rng);
            to_f32_grid(v)
        });
        embedding_table.row_mut(PAD_ID).fill(0.0);
        Ok(Self {
            words,
            index,
            embedding_table,
            max_length,
            learned: BTreeSet::new(),
        })
    }

    /// Reassembles an encoder from stored parts (checkpoint loading).
    pub fn from_parts(
        words: Vec<String>,
        embedding_table: Array2<f64>,
        max_length: usize,
        learned: BTreeSet<usize>,
    ) -> Result<Self> {
        if words.len() != embedding_table.nrows() {
            return Err(invalid!(
                "vocabulary has {} words but the table has {} rows",
                words.len(),
                embedding_table.nrows()
            ));
        }
        if words.get(PAD_ID).map(String::as_str) != Some(PAD)
            || words.get(UNK_ID).map(String::as_str) != Some(UNK)
        {
            return Err(invalid!("vocabulary must start with {PAD} and {UNK}"));
        }
        if max_length == 0 {
            return Err(invalid!("max_length must be positive"));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(invalid!("duplicate vocabulary word `{w}`"));
            }
        }
        if embedding_table.iter().any(|v| !v.is_finite()) {
            return Err(invalid!("embedding table contains non-finite entries"));
        }
        if let Some(&bad) = learned.iter().find(|&&id| id >= words.len()) {
            return Err(invalid!("learned token id {bad} outside vocabulary"));
        }
        Ok(Self {
            words,
            index,
            embedding_table,
            max_length,
            learned,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn dim(&self) -> usize {
        self.embedding_table.ncols()
    }

    pub fn max_length(&self) -> usize {
        self.max_length
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn embedding_table(&self) -> &Array2<f64> {
        &self.embedding_table
    }

    pub fn learned_token_ids(&self) -> &BTreeSet<usize> {
        &self.learned
    }

    pub fn token_id(&self, word: &str) -> Option<usize> {
        self.index.get(&word.to_lowercase()).copied()
    }

    pub fn row(&self, id: usize) -> ArrayView1<'_, f64> {
        self.embedding_table.row(id)
    }

    /// Mutable access to a learned row. Frozen rows are not reachable.
    pub fn learned_row_mut(&mut self, id: usize) -> Result<ndarray::ArrayViewMut1<'_, f64>> {
        if !self.learned.contains(&id) {
            return Err(Error::InvalidState(format!("token {id} is frozen")));
        }
        Ok(self.embedding_table.row_mut(id))
    }

    /// Adds `literal` as a trainable token whose row starts as a copy of `init_from`'s.
    pub fn register_token(&mut self, literal: &str, init_from: &str) -> Result<usize> {
        let key = literal.to_lowercase();
        if key.split_whitespace().count() != 1 || key.trim() != key {
            return Err(invalid!("token literal `{literal}` must be a single word"));
        }
        if self.index.contains_key(&key) {
            return Err(Error::Conflict(format!(
                "token `{literal}` is already in the vocabulary"
            )));
        }
        let source = self
            .token_id(init_from)
            .filter(|&id| id != PAD_ID && id != UNK_ID)
            .ok_or_else(|| invalid!("init_from word `{init_from}` is not in the vocabulary"))?;
        let row = self.embedding_table.row(source).to_owned();
        let id = self.words.len();
        self.embedding_table
            .push_row(row.view())
            .expect("row width matches table");
        self.words.push(key.clone());
        self.index.insert(key, id);
        self.learned.insert(id);
        Ok(id)
    }

    /// Token ids padded/truncated to `max_length`.
    pub fn token_ids(&self, prompt: &str) -> Result<Vec<usize>> {
        let mut ids: Vec<usize> = tokenize(prompt)
            .map(|w| self.index.get(&w).copied().unwrap_or(UNK_ID))
            .collect();
        if ids.is_empty() {
            return Err(invalid!("prompt is empty after tokenization"));
        }
        ids.truncate(self.max_length);
        ids.resize(self.max_length, PAD_ID);
        Ok(ids)
    }

    pub fn encode_prompt(&self, prompt: &str) -> Result<ConditionEmbedding> {
        let ids = self.token_ids(prompt)?;
        if let Some(&id) = ids.iter().find(|&&id| self.embedding_table.row(id).iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidState(format!(
                "embedding row of `{}` is non-finite",
                self.words[id]
            )));
        }
        Ok(self.encode_ids(&ids))
    }

    /// The all-padding condition used as the unconditional branch of guidance.
    pub fn encode_unconditional(&self) -> ConditionEmbedding {
        self.encode_ids(&vec![PAD_ID; self.max_length])
    }

    fn encode_ids(&self, ids: &[usize]) -> ConditionEmbedding {
        let dim = self.dim();
        let mut out = Array2::zeros((ids.len(), dim));
        for (pos, &id) in ids.iter().enumerate() {
            if id == PAD_ID {
                continue;
            }
            let mut row = out.row_mut(pos);
            row.assign(&self.embedding_table.row(id));
            row += &sinusoid(pos as f64, dim);
        }
        ConditionEmbedding::new(out).expect("non-empty and finite")
    }

    /// Pulls a gradient with respect to the encoded tokens back onto the
    /// embedding row of `token`: the sum over positions holding it.
    pub fn row_gradient(&self, ids: &[usize], d_context: &Array2<f64>, token: usize) -> ndarray::Array1<f64> {
        let mut g = ndarray::Array1::zeros(self.dim());
        for (pos, &id) in ids.iter().enumerate() {
            if id == token {
                g += &d_context.row(pos);
            }
        }
        g
    }

    /// SHA-256 per row, keyed by word.
    pub fn row_checksums(&self) -> Vec<(String, String)> {
        self.words
            .iter()
            .zip(self.embedding_table.rows())
            .map(|(w, r)| (w.clone(), crate::model::checksum(r.iter().copied())))
            .collect()
    }
}
