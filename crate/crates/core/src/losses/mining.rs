use crate::error::{Error, Result};
use crate::numcore::linalg::sq_dist;
use crate::numcore::Tensor;

/// Batch-hard triplets: for anchor `i`, `positives[i]` and `negatives[i]`
/// index into the same mini-batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MinedBatch {
    pub anchors: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl MinedBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// `(anchor, positive)` pairs.
    pub fn positive_pairs(&self) -> Vec<(usize, usize)> {
        self.anchors.iter().copied().zip(self.positives.iter().copied()).collect()
    }

    /// `(anchor, negative)` pairs.
    pub fn negative_pairs(&self) -> Vec<(usize, usize)> {
        self.anchors.iter().copied().zip(self.negatives.iter().copied()).collect()
    }
}

/// Farthest same-label and nearest other-label sample for every anchor.
/// Distance ties go to the lower index. An anchor whose label occurs only
/// once is its own positive.
pub fn mine_hard(features: &Tensor, labels: &[usize]) -> Result<MinedBatch> {
    let (b, _) = features.require_matrix("mining features")?;
    if labels.len() != b {
        return Err(Error::Dimension(format!("{b} features but {} labels", labels.len())));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::Mining("batch holds a single label; use PK sampling".into()));
    }
    let mut d = vec![0.0f64; b * b];
    for i in 0..b {
        for j in i + 1..b {
            let v = sq_dist(features.row(i), features.row(j));
            d[i * b + j] = v;
            d[j * b + i] = v;
        }
    }
    let mut positives = Vec::with_capacity(b);
    let mut negatives = Vec::with_capacity(b);
    for i in 0..b {
        let mut pos = (i, f64::NEG_INFINITY);
        let mut neg = (usize::MAX, f64::INFINITY);
        for j in 0..b {
            let dij = d[i * b + j];
            if labels[j] == labels[i] {
                if j != i && dij > pos.1 {
                    pos = (j, dij);
                }
            } else if dij < neg.1 {
                neg = (j, dij);
            }
        }
        positives.push(pos.0);
        negatives.push(neg.0);
    }
    Ok(MinedBatch {
        anchors: (0..b).collect(),
        positives,
        negatives,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picks_farthest_positive_and_nearest_negative() {
        // Anchor at origin; positives at 0.1 and 0.9, negatives at 0.5 and 2.0.
        let f = Tensor::from_rows(&[
            vec![0.0, 0.0],
            vec![0.1, 0.0],
            vec![0.0, 0.9],
            vec![0.5, 0.0],
            vec![0.0, 2.0],
        ])
        .unwrap();
        let labels = [0, 0, 0, 1, 1];
        let m = mine_hard(&f, &labels).unwrap();
        assert_eq!(m.positives[0], 2);
        assert_eq!(m.negatives[0], 3);
    }

    #[test]
    fn singleton_label_uses_self() {
        let f = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![3.0]]).unwrap();
        let m = mine_hard(&f, &[0, 1, 1]).unwrap();
        assert_eq!(m.positives[0], 0);
        assert_eq!(m.negatives[0], 1);
        assert_eq!(m.positives[1], 2);
    }

    #[test]
    fn single_label_batch_rejected() {
        let f = Tensor::zeros(&[3, 2]);
        assert!(matches!(mine_hard(&f, &[4, 4, 4]), Err(Error::Mining(_))));
    }
}
