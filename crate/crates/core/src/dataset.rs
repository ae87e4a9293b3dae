//! Named training-data sources with runtime-adjustable mixture weights.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::TrainRng;

#[derive(Debug, Error, PartialEq)]
pub enum DatasetError {
    #[error("every mixture weight is zero")]
    AllWeightsZero,
    #[error("unknown source `{0}`")]
    UnknownSource(String),
    #[error("source `{0}` would be empty")]
    EmptyExamples(String),
    #[error("invalid weight for `{0}`: must be finite and >= 0")]
    InvalidWeight(String),
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("reading {path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub x: f64,
    pub y: f64,
}

/// One drawn example with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub x: f64,
    pub y: f64,
    pub source: Arc<str>,
    pub generation: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub items: Vec<BatchItem>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Source {
    #[serde(with = "crate::floats")]
    xs: Vec<f64>,
    #[serde(with = "crate::floats")]
    ys: Vec<f64>,
    /// Generation in which this source's current contents were inserted.
    generation: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractiveDataset {
    sources: BTreeMap<String, Source>,
    weights: BTreeMap<String, f64>,
    generation: u64,
}

fn check_examples(name: &str, examples: &[Example]) -> Result<(), DatasetError> {
    if examples.is_empty() {
        return Err(DatasetError::EmptyExamples(name.to_string()));
    }
    if let Some(i) = examples.iter().position(|e| !e.x.is_finite() || !e.y.is_finite()) {
        return Err(DatasetError::Schema(format!("example {i} of `{name}` is not finite")));
    }
    Ok(())
}

impl InteractiveDataset {
    /// Dataset with no sources. Sampling fails until one is added.
    pub fn empty() -> Self {
        Self {
            sources: BTreeMap::new(),
            weights: BTreeMap::new(),
            generation: 0,
        }
    }

    pub fn with_source(name: &str, examples: Vec<Example>) -> Result<Self, DatasetError> {
        let mut ds = Self::empty();
        check_examples(name, &examples)?;
        ds.insert(name, &examples);
        Ok(ds)
    }

    fn insert(&mut self, name: &str, examples: &[Example]) {
        self.sources.insert(
            name.to_string(),
            Source {
                xs: examples.iter().map(|e| e.x).collect(),
                ys: examples.iter().map(|e| e.y).collect(),
                generation: self.generation,
            },
        );
        self.weights.entry(name.to_string()).or_insert(1.0);
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn weights(&self) -> &BTreeMap<String, f64> {
        &self.weights
    }

    pub fn source_names(&self) -> impl Iterator<Item = &str> {
        self.sources.keys().map(String::as_str)
    }

    pub fn source_len(&self, name: &str) -> Option<usize> {
        self.sources.get(name).map(|s| s.xs.len())
    }

    pub fn source_generation(&self, name: &str) -> Option<u64> {
        self.sources.get(name).map(|s| s.generation)
    }

    pub fn can_sample(&self) -> bool {
        self.weights.values().any(|w| *w > 0.0)
    }

    /// Replaces (or creates) `name`, bumping the generation counter. New
    /// sources start at weight 1.0; existing weights are kept.
    pub fn update_data(&mut self, name: &str, examples: Vec<Example>) -> Result<(), DatasetError> {
        check_examples(name, &examples)?;
        self.generation += 1;
        self.insert(name, &examples);
        Ok(())
    }

    /// Sets the weights of the named sources; sources not mentioned keep
    /// theirs. Rejected as a whole if any name is unknown or the result
    /// would leave no positive weight.
    pub fn set_mixture_weights(&mut self, weights: &BTreeMap<String, f64>) -> Result<(), DatasetError> {
        let mut next = self.weights.clone();
        for (name, w) in weights {
            if !self.sources.contains_key(name) {
                return Err(DatasetError::UnknownSource(name.clone()));
            }
            if !w.is_finite() || *w < 0.0 {
                return Err(DatasetError::InvalidWeight(name.clone()));
            }
            next.insert(name.clone(), *w);
        }
        if !next.values().any(|w| *w > 0.0) {
            return Err(DatasetError::AllWeightsZero);
        }
        self.weights = next;
        Ok(())
    }

    /// Draws `batch_size` examples: a source with probability proportional
    /// to its weight, then an example uniformly within it.
    pub fn next_batch(&self, batch_size: usize, rng: &mut TrainRng) -> Result<Batch, DatasetError> {
        let live: Vec<(Arc<str>, &Source, f64)> = self
            .sources
            .iter()
            .filter_map(|(name, src)| {
                let w = self.weights.get(name).copied().unwrap_or(0.0);
                (w > 0.0).then(|| (Arc::from(name.as_str()), src, w))
            })
            .collect();
        if live.is_empty() {
            return Err(DatasetError::AllWeightsZero);
        }
        let total: f64 = live.iter().map(|(_, _, w)| w).sum();
        let mut items = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let u = rng.uniform() * total;
            let mut acc = 0.0;
            let mut pick = live.len() - 1;
            for (i, (_, _, w)) in live.iter().enumerate() {
                acc += w;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            let (name, src, _) = &live[pick];
            let idx = rng.below(src.xs.len() as u64) as usize;
            items.push(BatchItem {
                x: src.xs[idx],
                y: src.ys[idx],
                source: Arc::clone(name),
                generation: src.generation,
            });
        }
        Ok(Batch { items })
    }
}

/// Reads a JSON array of `{"x": number, "y": number}`.
pub fn load_examples(path: &Path) -> Result<Vec<Example>, DatasetError> {
    let io = |reason: String| DatasetError::Io {
        path: path.display().to_string(),
        reason,
    };
    let text = std::fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| DatasetError::Schema(e.to_string()))
}
