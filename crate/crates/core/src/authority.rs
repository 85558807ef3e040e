//! Expert authority from the inter-/intra-cluster scatter ratio of each
//! expert's own clustering of the target data.

use serde::{Deserialize, Serialize};

use crate::cluster::{minibatch_kmeans, KMeansConfig};
use crate::error::{Error, Result};
use crate::experts::{ExpertModel, ParamChoice};
use crate::numcore::Tensor;

/// Floor on the summed intra-cluster scatter.
pub const INTRA_FLOOR: f64 = 1e-9;

/// Per-cluster intra scatter `sum ||x - mu_i||^2` and the cluster means.
pub fn intra_scatter(features: &Tensor, labels: &[usize], clusters: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let (n, f) = features.require_matrix("scatter features")?;
    if labels.len() != n {
        return Err(Error::Dimension(format!("{n} features but {} labels", labels.len())));
    }
    let mut sums = vec![vec![0.0f64; f]; clusters];
    let mut counts = vec![0usize; clusters];
    for (i, &l) in labels.iter().enumerate() {
        if l >= clusters {
            return Err(Error::Dimension(format!("label {l} outside {clusters} clusters")));
        }
        counts[l] += 1;
        for (s, &v) in sums[l].iter_mut().zip(features.row(i)) {
            *s += v as f64;
        }
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Degenerate(format!("cluster {empty} is empty")));
    }
    let means: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| s.into_iter().map(|v| v / c as f64).collect())
        .collect();
    let mut scatter = vec![0.0f64; clusters];
    for (i, &l) in labels.iter().enumerate() {
        scatter[l] += sq_dist64(features.row(i), &means[l]);
    }
    Ok((scatter, means))
}

fn sq_dist64(x: &[f32], mu: &[f64]) -> f64 {
    x.iter().zip(mu).map(|(&a, &b)| (a as f64 - b).powi(2)).sum()
}

/// `sum_i n_i ||mu_i - mu||^2`.
pub fn inter_scatter(means: &[Vec<f64>], sizes: &[usize], global_mean: &[f64]) -> f64 {
    means
        .iter()
        .zip(sizes)
        .map(|(m, &n)| n as f64 * m.iter().zip(global_mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum()
}

/// Total scatter `sum ||x - mu||^2` around the global mean.
pub fn total_scatter(features: &Tensor) -> f64 {
    let mu = global_mean(features);
    (0..features.rows()).map(|i| sq_dist64(features.row(i), &mu)).sum()
}

pub fn global_mean(features: &Tensor) -> Vec<f64> {
    let n = features.rows();
    let mut mu = vec![0.0f64; features.cols()];
    for i in 0..n {
        for (m, &v) in mu.iter_mut().zip(features.row(i)) {
            *m += v as f64;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    mu
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scatter {
    pub intra: Vec<f64>,
    pub intra_total: f64,
    pub inter: f64,
    /// `inter / max(intra_total, INTRA_FLOOR)`.
    pub ratio: f64,
    pub floored: bool,
}

/// Scatter ratio of a labelled feature set, on the features as given.
pub fn scatter_ratio(features: &Tensor, labels: &[usize], clusters: usize) -> Result<Scatter> {
    let (intra, means) = intra_scatter(features, labels, clusters)?;
    let mut sizes = vec![0usize; clusters];
    for &l in labels {
        sizes[l] += 1;
    }
    let inter = inter_scatter(&means, &sizes, &global_mean(features));
    let intra_total: f64 = intra.iter().sum();
    let floored = intra_total < INTRA_FLOOR;
    Ok(Scatter {
        ratio: inter / intra_total.max(INTRA_FLOOR),
        intra,
        intra_total,
        inter,
        floored,
    })
}

/// `w_e = K J_e / sum_k J_k`.
pub fn authority_weights(j: &[f64]) -> Result<Vec<f64>> {
    if j.is_empty() {
        return Err(Error::Config("no experts to weigh".into()));
    }
    if let Some(bad) = j.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::Degenerate(format!("scatter ratio {bad} is not positive")));
    }
    let k = j.len() as f64;
    let total: f64 = j.iter().sum();
    Ok(j.iter().map(|v| k * v / total).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertAuthority {
    pub expert: String,
    pub intra_total: f64,
    pub inter: f64,
    pub j: f64,
    pub weight: f64,
    pub floored: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuthorityReport {
    pub epoch: usize,
    pub experts: Vec<ExpertAuthority>,
}

impl AuthorityReport {
    pub fn weights(&self) -> Vec<f32> {
        self.experts.iter().map(|e| e.weight as f32).collect()
    }

    /// Report with every weight fixed at one.
    pub fn uniform(epoch: usize, names: &[String]) -> Self {
        Self {
            epoch,
            experts: names
                .iter()
                .map(|n| ExpertAuthority {
                    expert: n.clone(),
                    intra_total: 0.0,
                    inter: 0.0,
                    j: 1.0,
                    weight: 1.0,
                    floored: false,
                })
                .collect(),
        }
    }
}

/// Clusters each feature set on its own (after row normalization) and turns
/// the scatter ratios into authorities.
pub fn authority_from_features(
    names: &[String],
    features: &[Tensor],
    kmeans: &KMeansConfig,
    epoch: usize,
) -> Result<AuthorityReport> {
    if names.len() != features.len() {
        return Err(Error::Dimension(format!(
            "{} names for {} feature sets",
            names.len(),
            features.len()
        )));
    }
    let mut scatters = Vec::with_capacity(features.len());
    for f in features {
        let normed = f.l2_normalize_rows();
        let assignment = minibatch_kmeans(&normed, kmeans)?;
        scatters.push(scatter_ratio(&normed, &assignment.labels, kmeans.clusters)?);
    }
    let cap = scatters
        .iter()
        .filter(|s| !s.floored)
        .map(|s| s.ratio)
        .fold(None, |m: Option<f64>, r| Some(m.map_or(r, |m| m.max(r))));
    let j: Vec<f64> = scatters
        .iter()
        .map(|s| match (s.floored, cap) {
            (true, Some(c)) => s.ratio.min(c),
            _ => s.ratio,
        })
        .collect();
    let w = authority_weights(&j)?;
    Ok(AuthorityReport {
        epoch,
        experts: names
            .iter()
            .zip(scatters)
            .zip(j.iter().zip(&w))
            .map(|((name, s), (&j, &weight))| ExpertAuthority {
                expert: name.clone(),
                intra_total: s.intra_total,
                inter: s.inter,
                j,
                weight,
                floored: s.floored,
            })
            .collect(),
    })
}

/// Authority of every expert from the features of its average parameters.
pub fn epoch_authority(
    experts: &[ExpertModel],
    x: &Tensor,
    kmeans: &KMeansConfig,
    epoch: usize,
) -> Result<AuthorityReport> {
    let names: Vec<String> = experts.iter().map(|e| e.name().to_string()).collect();
    let feats = experts
        .iter()
        .map(|e| e.features(ParamChoice::Average, x))
        .collect::<Result<Vec<_>>>()?;
    authority_from_features(&names, &feats, kmeans, epoch)
}
