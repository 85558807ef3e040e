//! Cross-expert feature averaging and pseudo-label generation.

mod kmeans;

pub use kmeans::{minibatch_kmeans, ClusterAssignment, KMeansConfig};

use std::collections::BTreeMap;
use std::io::Write;

use pathfinding::prelude::{kuhn_munkres, Matrix};

use crate::error::{Error, Result};
use crate::experts::{ExpertModel, ParamChoice};
use crate::numcore::Tensor;

/// Row-normalizes each expert's features, averages them, and normalizes
/// the average.
pub fn average_normalized(features: &[Tensor]) -> Result<Tensor> {
    let first = features
        .first()
        .ok_or_else(|| Error::Config("no features to average".into()))?;
    let (n, f) = first.require_matrix("expert features")?;
    let mut acc = vec![0.0f64; n * f];
    for t in features {
        if t.shape() != first.shape() {
            return Err(Error::Dimension(format!(
                "expert features {:?} vs {:?}",
                t.shape(),
                first.shape()
            )));
        }
        for (a, &v) in acc.iter_mut().zip(t.l2_normalize_rows().data()) {
            *a += v as f64;
        }
    }
    let k = features.len() as f64;
    let mean = Tensor::matrix(n, f, acc.into_iter().map(|v| (v / k) as f32).collect())?;
    Ok(mean.l2_normalize_rows())
}

/// Averaged normalized features of `x` from each expert's average
/// parameters.
pub fn ensemble_features(experts: &[ExpertModel], x: &Tensor) -> Result<Tensor> {
    ensemble_features_with(experts, ParamChoice::Average, x)
}

pub fn ensemble_features_with(experts: &[ExpertModel], which: ParamChoice, x: &Tensor) -> Result<Tensor> {
    let feats = experts
        .iter()
        .map(|e| e.features(which, x))
        .collect::<Result<Vec<_>>>()?;
    average_normalized(&feats)
}

/// Cluster ids used as training labels for one epoch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabels {
    pub labels: Vec<usize>,
    pub classes: usize,
}

pub fn assign_pseudo_labels(assignment: &ClusterAssignment, records: usize) -> Result<PseudoLabels> {
    if assignment.labels.len() != records {
        return Err(Error::Dimension(format!(
            "{} cluster labels for {records} records",
            assignment.labels.len()
        )));
    }
    Ok(PseudoLabels {
        labels: assignment.labels.clone(),
        classes: assignment.clusters(),
    })
}

fn contingency(labels: &[usize], truth: &[u32]) -> Result<BTreeMap<(usize, u32), usize>> {
    if labels.len() != truth.len() || labels.is_empty() {
        return Err(Error::Dimension(format!(
            "{} labels vs {} identities",
            labels.len(),
            truth.len()
        )));
    }
    let mut table = BTreeMap::new();
    for (&l, &t) in labels.iter().zip(truth) {
        *table.entry((l, t)).or_insert(0) += 1;
    }
    Ok(table)
}

/// Fraction of records whose cluster's majority identity is their own.
pub fn purity(labels: &[usize], truth: &[u32]) -> Result<f64> {
    let table = contingency(labels, truth)?;
    let mut best: BTreeMap<usize, usize> = BTreeMap::new();
    for (&(l, _), &c) in &table {
        let b = best.entry(l).or_insert(0);
        *b = (*b).max(c);
    }
    Ok(best.values().sum::<usize>() as f64 / labels.len() as f64)
}

/// Accuracy under the best one-to-one matching of clusters to identities.
pub fn matched_accuracy(labels: &[usize], truth: &[u32]) -> Result<f64> {
    let table = contingency(labels, truth)?;
    let mut clusters: Vec<usize> = table.keys().map(|k| k.0).collect();
    clusters.dedup();
    let mut ids: Vec<u32> = table.keys().map(|k| k.1).collect();
    ids.sort_unstable();
    ids.dedup();
    let count = |c: usize, t: u32| *table.get(&(c, t)).unwrap_or(&0) as i64;
    // Hungarian matching needs at most as many rows as columns.
    let weights = if clusters.len() <= ids.len() {
        Matrix::from_fn(clusters.len(), ids.len(), |(i, j)| count(clusters[i], ids[j]))
    } else {
        Matrix::from_fn(ids.len(), clusters.len(), |(i, j)| count(clusters[j], ids[i]))
    };
    let (total, _) = kuhn_munkres(&weights);
    Ok(total as f64 / labels.len() as f64)
}

/// `record,pseudo_label` CSV.
pub fn write_assignment_csv<W: Write>(mut out: W, labels: &[usize]) -> std::io::Result<()> {
    writeln!(out, "record,pseudo_label")?;
    for (i, l) in labels.iter().enumerate() {
        writeln!(out, "{i},{l}")?;
    }
    Ok(())
}
