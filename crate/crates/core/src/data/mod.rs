//! Synthetic re-identification benchmark, dataset files and PK batch sampling.

mod generate;
mod io;
mod sampler;

pub use generate::{generate, DomainShift, GeneratorConfig};
pub use io::{load_dataset, parse_dataset, save_dataset, write_dataset, FORMAT_MAGIC};
pub use sampler::pk_sample;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

/// One observation: a raw feature vector plus its identity and camera.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub features: Vec<f32>,
    pub identity: u32,
    pub camera: u32,
    pub domain: Domain,
}

/// A domain's records partitioned into train / query / gallery.
///
/// `num_identities` counts the distinct training identities. Query and
/// gallery identities are disjoint from the training ones.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub domain: Domain,
    pub dim: usize,
    pub num_identities: usize,
    pub train: Vec<SampleRecord>,
    pub query: Vec<SampleRecord>,
    pub gallery: Vec<SampleRecord>,
}

/// Identity and camera of an evaluation record.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RecordMeta {
    pub identity: u32,
    pub camera: u32,
}

impl SplitDataset {
    /// Stacks record features into an `[n, dim]` matrix.
    pub fn features(records: &[SampleRecord]) -> Result<Tensor> {
        let dim = records
            .first()
            .map(|r| r.features.len())
            .ok_or_else(|| Error::Dimension("no records".into()))?;
        let mut data = Vec::with_capacity(records.len() * dim);
        for r in records {
            if r.features.len() != dim {
                return Err(Error::Dimension(format!(
                    "record has {} features, expected {dim}",
                    r.features.len()
                )));
            }
            data.extend_from_slice(&r.features);
        }
        Tensor::matrix(records.len(), dim, data)
    }

    pub fn meta(records: &[SampleRecord]) -> Vec<RecordMeta> {
        records
            .iter()
            .map(|r| RecordMeta {
                identity: r.identity,
                camera: r.camera,
            })
            .collect()
    }

    /// Training identities remapped to dense class indices `0..M`, in
    /// ascending identity order.
    pub fn dense_train_labels(&self) -> (Vec<usize>, usize) {
        let mut ids: Vec<u32> = self.train.iter().map(|r| r.identity).collect();
        ids.sort_unstable();
        ids.dedup();
        let labels = self
            .train
            .iter()
            .map(|r| ids.binary_search(&r.identity).expect("identity present"))
            .collect();
        (labels, ids.len())
    }

    pub fn validate(&self) -> Result<()> {
        for r in self.train.iter().chain(&self.query).chain(&self.gallery) {
            if r.features.len() != self.dim {
                return Err(Error::Dimension(format!(
                    "record of identity {} has {} features, dataset dim is {}",
                    r.identity,
                    r.features.len(),
                    self.dim
                )));
            }
        }
        let gallery_ids: std::collections::BTreeSet<u32> =
            self.gallery.iter().map(|r| r.identity).collect();
        if let Some(q) = self.query.iter().find(|q| !gallery_ids.contains(&q.identity)) {
            return Err(Error::Contract(format!(
                "query identity {} missing from gallery",
                q.identity
            )));
        }
        Ok(())
    }
}
