//! Retrieval metrics under the cross-camera protocol.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::RecordMeta;
use crate::error::{Error, Result};
use crate::numcore::linalg::sq_dist;
use crate::numcore::Tensor;

/// Longest CMC prefix kept in a report.
pub const MAX_RANK: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map: f64,
    /// `cmc[r]` is the hit rate within the top `r + 1`.
    pub cmc: Vec<f64>,
    /// AP of every query that has a valid positive, in query order.
    pub per_query_ap: Vec<f64>,
    /// Query index of each entry in `per_query_ap`.
    pub evaluated_queries: Vec<usize>,
    /// Queries without any valid positive.
    pub skipped_queries: usize,
}

impl MetricsReport {
    /// CMC at a 1-based rank, saturating at the last stored rank.
    pub fn cmc_at(&self, rank: usize) -> f64 {
        let r = rank.clamp(1, self.cmc.len());
        self.cmc[r - 1]
    }
}

struct QueryResult {
    ap: f64,
    first_hit: usize,
}

fn rank_query(q: &[f32], qm: RecordMeta, gallery: &Tensor, gmeta: &[RecordMeta]) -> Option<QueryResult> {
    let mut order: Vec<(f64, usize)> = (0..gallery.rows())
        .filter(|&g| !(gmeta[g].identity == qm.identity && gmeta[g].camera == qm.camera))
        .map(|g| (sq_dist(q, gallery.row(g)), g))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut hits = 0usize;
    let mut precision_sum = 0.0f64;
    let mut first_hit = None;
    for (pos, &(_, g)) in order.iter().enumerate() {
        if gmeta[g].identity == qm.identity {
            hits += 1;
            precision_sum += hits as f64 / (pos + 1) as f64;
            first_hit.get_or_insert(pos);
        }
    }
    first_hit.map(|first_hit| QueryResult {
        ap: precision_sum / hits as f64,
        first_hit,
    })
}

/// Ranks the gallery for every query by ascending L2 distance (ties by
/// gallery index), ignoring entries sharing both identity and camera with
/// the query.
pub fn evaluate(
    query: &Tensor,
    query_meta: &[RecordMeta],
    gallery: &Tensor,
    gallery_meta: &[RecordMeta],
) -> Result<MetricsReport> {
    let (nq, dq) = query.require_matrix("query features")?;
    if gallery.numel() == 0 || gallery_meta.is_empty() {
        return Err(Error::Evaluation("empty gallery".into()));
    }
    let (ng, dg) = gallery.require_matrix("gallery features")?;
    if dq != dg {
        return Err(Error::Dimension(format!("query dim {dq} vs gallery dim {dg}")));
    }
    if nq != query_meta.len() || ng != gallery_meta.len() {
        return Err(Error::Dimension("features and metadata lengths differ".into()));
    }
    let results: Vec<Option<QueryResult>> = (0..nq)
        .into_par_iter()
        .map(|i| rank_query(query.row(i), query_meta[i], gallery, gallery_meta))
        .collect();

    let ranks = ng.min(MAX_RANK);
    let mut cmc = vec![0.0f64; ranks];
    let mut per_query_ap = Vec::new();
    let mut evaluated_queries = Vec::new();
    for (i, r) in results.iter().enumerate() {
        if let Some(r) = r {
            per_query_ap.push(r.ap);
            evaluated_queries.push(i);
            for c in cmc.iter_mut().skip(r.first_hit) {
                *c += 1.0;
            }
        }
    }
    let valid = per_query_ap.len();
    if valid == 0 {
        return Err(Error::Evaluation("no query has a cross-camera match".into()));
    }
    cmc.iter_mut().for_each(|c| *c /= valid as f64);
    Ok(MetricsReport {
        map: per_query_ap.iter().sum::<f64>() / valid as f64,
        cmc,
        per_query_ap,
        evaluated_queries,
        skipped_queries: nq - valid,
    })
}
