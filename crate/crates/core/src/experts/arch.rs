use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Activation;

/// How hidden layers are wired together.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    /// Plain chain of layers.
    Plain,
    /// `h <- h + act(W h + b)` after a first projecting layer.
    Residual,
    /// Each layer sees the concatenation of the input and all earlier layer
    /// outputs; the embedding reads all layer outputs.
    DenseConcat,
    /// Independent single-layer branches on the input, concatenated.
    Parallel,
}

/// Encoder description. The encoder ends in a linear embedding of width
/// `embed_dim`, zero-padded up to the shared `feature_dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub name: String,
    pub topology: Topology,
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
    pub embed_dim: usize,
    pub feature_dim: usize,
}

impl ArchitectureSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("architecture `{}`: {msg}", self.name)));
        if self.widths.is_empty() || self.widths.contains(&0) {
            return fail("widths must be non-empty and positive".into());
        }
        if self.activations.len() != self.widths.len() {
            return fail(format!(
                "{} activations for {} layers",
                self.activations.len(),
                self.widths.len()
            ));
        }
        if self.embed_dim == 0 || self.embed_dim > self.feature_dim {
            return fail(format!(
                "embed_dim {} must be in 1..={}",
                self.embed_dim, self.feature_dim
            ));
        }
        if self.topology == Topology::Residual && self.widths.windows(2).any(|w| w[0] != w[1]) {
            return fail("residual layers need equal widths".into());
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every encoder affine layer, embedding last.
    pub fn layer_dims(&self, input_dim: usize) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.widths.len() + 1);
        match self.topology {
            Topology::Plain | Topology::Residual => {
                let mut prev = input_dim;
                for &w in &self.widths {
                    dims.push((prev, w));
                    prev = w;
                }
                dims.push((prev, self.embed_dim));
            }
            Topology::DenseConcat => {
                let mut seen = input_dim;
                for &w in &self.widths {
                    dims.push((seen, w));
                    seen += w;
                }
                dims.push((seen - input_dim, self.embed_dim));
            }
            Topology::Parallel => {
                for &w in &self.widths {
                    dims.push((input_dim, w));
                }
                dims.push((self.widths.iter().sum(), self.embed_dim));
            }
        }
        dims
    }

    pub fn encoder_param_count(&self, input_dim: usize) -> usize {
        self.layer_dims(input_dim).iter().map(|(i, o)| i * o + o).sum()
    }

    /// The three heterogeneous default experts.
    pub fn defaults() -> Vec<ArchitectureSpec> {
        vec![
            ArchitectureSpec {
                name: "dense-mlp".into(),
                topology: Topology::DenseConcat,
                widths: vec![64, 64, 64],
                activations: vec![Activation::Relu; 3],
                embed_dim: 48,
                feature_dim: 64,
            },
            ArchitectureSpec {
                name: "res-mlp".into(),
                topology: Topology::Residual,
                widths: vec![128, 128],
                activations: vec![Activation::Relu; 2],
                embed_dim: 64,
                feature_dim: 64,
            },
            ArchitectureSpec {
                name: "incept-mlp".into(),
                topology: Topology::Parallel,
                widths: vec![32, 32, 64],
                activations: vec![Activation::Relu, Activation::Tanh, Activation::Relu],
                embed_dim: 64,
                feature_dim: 64,
            },
        ]
    }
}
