//! Independent f64 reference implementations used as test oracles.

#![allow(dead_code)]

pub mod criteria;
pub mod gradcheck;

use meb_core::data::RecordMeta;
use meb_core::experts::{ArchitectureSpec, ParamSet, Topology};
use meb_core::losses::MinedBatch;
use meb_core::numcore::{Activation, Tensor};
use rand::{Rng, SeedableRng};
pub use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| scale * (rng.random::<f64>() * 2.0 - 1.0)).collect())
        .collect()
}

/// Rounds through f32 so the tape and the oracle see the same point.
pub fn to_tensor(m: &Mat) -> Tensor {
    let rows: Vec<Vec<f32>> = m.iter().map(|r| r.iter().map(|&v| v as f32).collect()).collect();
    Tensor::from_rows(&rows).unwrap()
}

pub fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).iter().map(|&v| v as f64).collect()).collect()
}

pub fn flat(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    log_softmax(row).into_iter().map(f64::exp).collect()
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() + 1e-12).sqrt()
}

/// Label-smoothed cross entropy.
pub fn id_loss(logits: &Mat, labels: &[usize], eps: f64) -> f64 {
    let c = logits[0].len() as f64;
    let mut total = 0.0;
    for (row, &l) in logits.iter().zip(labels) {
        let lp = log_softmax(row);
        for (j, v) in lp.iter().enumerate() {
            let q = if j == l { 1.0 - eps + eps / c } else { eps / c };
            total -= q * v;
        }
    }
    total / logits.len() as f64
}

/// Plain cross entropy `-mean log p_label`.
pub fn cross_entropy(logits: &Mat, labels: &[usize]) -> f64 {
    logits
        .iter()
        .zip(labels)
        .map(|(row, &l)| -log_softmax(row)[l])
        .sum::<f64>()
        / logits.len() as f64
}

pub fn triplet_distances(features: &Mat, mined: &MinedBatch) -> Vec<(f64, f64)> {
    mined
        .anchors
        .iter()
        .zip(&mined.positives)
        .zip(&mined.negatives)
        .map(|((&a, &p), &n)| (dist(&features[a], &features[p]), dist(&features[a], &features[n])))
        .collect()
}

/// `mean -log(e^{dn} / (e^{dp} + e^{dn}))` written directly with exponentials.
pub fn softmax_triplet(features: &Mat, mined: &MinedBatch) -> f64 {
    let d = triplet_distances(features, mined);
    d.iter()
        .map(|&(dp, dn)| {
            let m = dp.max(dn);
            -((dn - m) - ((dp - m).exp() + (dn - m).exp()).ln())
        })
        .sum::<f64>()
        / d.len() as f64
}

pub fn triplet_probability(features: &Mat, mined: &MinedBatch) -> Vec<f64> {
    triplet_distances(features, mined)
        .into_iter()
        .map(|(dp, dn)| dn.exp() / (dp.exp() + dn.exp()))
        .collect()
}

pub fn mutual_id(logits: &Mat, teacher: &Mat) -> f64 {
    logits
        .iter()
        .zip(teacher)
        .map(|(row, t)| -log_softmax(row).iter().zip(t).map(|(l, p)| l * p).sum::<f64>())
        .sum::<f64>()
        / logits.len() as f64
}

pub fn bce(student: &[f64], teacher: &[f64]) -> f64 {
    student
        .iter()
        .zip(teacher)
        .map(|(&s, &t)| {
            let s = s.clamp(1e-7, 1.0 - 1e-7);
            -(t * s.ln() + (1.0 - t) * (1.0 - s).ln())
        })
        .sum::<f64>()
        / student.len() as f64
}

pub struct TeacherRef {
    pub expert: usize,
    pub probs: Mat,
    pub p_triplet: Vec<f64>,
}

/// Student loss: voting loss plus the weighted teacher terms averaged over
/// teachers.
#[allow(clippy::too_many_arguments)]
pub fn brainstorm(
    logits: &Mat,
    features: &Mat,
    labels: &[usize],
    mined: &MinedBatch,
    teachers: &[TeacherRef],
    weights: &[f64],
    eps: f64,
    mid: bool,
    mtri: bool,
) -> f64 {
    let mut total = id_loss(logits, labels, eps) + softmax_triplet(features, mined);
    let inv = 1.0 / teachers.len() as f64;
    if mid {
        total += teachers
            .iter()
            .map(|t| weights[t.expert] * inv * mutual_id(logits, &t.probs))
            .sum::<f64>();
    }
    if mtri {
        let ps = triplet_probability(features, mined);
        total += teachers
            .iter()
            .map(|t| weights[t.expert] * inv * bce(&ps, &t.p_triplet))
            .sum::<f64>();
    }
    total
}

/// Encoder and heads of an expert in f64.
#[derive(Clone, Debug)]
pub struct Params64 {
    pub encoder: Vec<(Mat, Vec<f64>)>,
    pub head_w: Mat,
    pub head_b: Vec<f64>,
}

impl Params64 {
    /// Uses the target head when present, else the source head.
    pub fn from_params(p: &ParamSet) -> Self {
        let head = p.target_head.as_ref().unwrap_or(&p.source_head);
        Self {
            encoder: p.encoder.iter().map(|(w, b)| (to_mat(w), flat(b))).collect(),
            head_w: to_mat(&head.weight),
            head_b: flat(&head.bias),
        }
    }

    /// Every scalar, in the order encoder (w, b)..., head w, head b.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.encoder {
            out.extend(w.iter().flatten());
            out.extend(b);
        }
        out.extend(self.head_w.iter().flatten());
        out.extend(&self.head_b);
        out
    }

    pub fn perturbed(&self, index: usize, delta: f64) -> Self {
        let mut p = self.clone();
        let mut i = index;
        let mut bump = |v: &mut f64| {
            if i == 0 {
                *v += delta;
            }
            i = i.wrapping_sub(1);
        };
        for (w, b) in &mut p.encoder {
            w.iter_mut().flatten().for_each(&mut bump);
            b.iter_mut().for_each(&mut bump);
        }
        p.head_w.iter_mut().flatten().for_each(&mut bump);
        p.head_b.iter_mut().for_each(&mut bump);
        p
    }
}

fn affine(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            (0..b.len())
                .map(|j| b[j] + row.iter().zip(w).map(|(xi, wr)| xi * wr[j]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn act(x: Mat, a: Activation) -> Mat {
    x.into_iter()
        .map(|r| {
            r.into_iter()
                .map(|v| match a {
                    Activation::Relu => v.max(0.0),
                    Activation::Tanh => v.tanh(),
                    Activation::Identity => v,
                })
                .collect()
        })
        .collect()
}

fn concat(parts: &[&Mat]) -> Mat {
    (0..parts[0].len())
        .map(|i| parts.iter().flat_map(|p| p[i].iter().copied()).collect())
        .collect()
}

/// Features and logits of an encoder written out per topology.
pub fn forward(arch: &ArchitectureSpec, p: &Params64, x: &Mat) -> (Mat, Mat) {
    let n = arch.widths.len();
    let layer = |input: &Mat, l: usize| act(affine(input, &p.encoder[l].0, &p.encoder[l].1), arch.activations[l]);
    let embed_in = match arch.topology {
        Topology::Plain => {
            let mut h = x.clone();
            for l in 0..n {
                h = layer(&h, l);
            }
            h
        }
        Topology::Residual => {
            let mut h = layer(x, 0);
            for l in 1..n {
                let d = layer(&h, l);
                h = h
                    .iter()
                    .zip(&d)
                    .map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect())
                    .collect();
            }
            h
        }
        Topology::DenseConcat => {
            let mut outs: Vec<Mat> = Vec::new();
            for l in 0..n {
                let mut parts = vec![x];
                parts.extend(outs.iter());
                let h = layer(&concat(&parts), l);
                outs.push(h);
            }
            concat(&outs.iter().collect::<Vec<_>>())
        }
        Topology::Parallel => {
            let outs: Vec<Mat> = (0..n).map(|l| layer(x, l)).collect();
            concat(&outs.iter().collect::<Vec<_>>())
        }
    };
    let (ew, eb) = &p.encoder[n];
    let embed = affine(&embed_in, ew, eb);
    let features: Mat = embed
        .into_iter()
        .map(|mut r| {
            r.resize(arch.feature_dim, 0.0);
            r
        })
        .collect();
    let logits = affine(&features, &p.head_w, &p.head_b);
    (features, logits)
}

/// Central differences of `f` over `n` coordinates.
pub fn central_difference(n: usize, h: f64, f: impl Fn(usize, f64) -> f64) -> Vec<f64> {
    (0..n).map(|i| (f(i, h) - f(i, -h)) / (2.0 * h)).collect()
}

/// `||a - b|| / max(||b||, floor)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let num = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-8)
}

/// O(Q·G²) evaluator: AP from the definition, counting for every hit how
/// many valid gallery entries rank at or above it.
pub fn brute_force_eval(q: &Mat, qm: &[RecordMeta], g: &Mat, gm: &[RecordMeta], max_rank: usize) -> Option<(f64, Vec<f64>)> {
    let mut aps = Vec::new();
    let ranks = g.len().min(max_rank);
    let mut cmc = vec![0.0; ranks];
    for (qi, qv) in q.iter().enumerate() {
        let valid: Vec<usize> = (0..g.len())
            .filter(|&j| !(gm[j].identity == qm[qi].identity && gm[j].camera == qm[qi].camera))
            .collect();
        let d: Vec<f64> = g.iter().map(|gv| qv.iter().zip(gv).map(|(a, b)| (a - b) * (a - b)).sum()).collect();
        let before = |a: usize, b: usize| d[a] < d[b] || (d[a] == d[b] && a < b);
        let positives: Vec<usize> = valid.iter().copied().filter(|&j| gm[j].identity == qm[qi].identity).collect();
        if positives.is_empty() {
            continue;
        }
        let mut ap = 0.0;
        let mut best_rank = usize::MAX;
        for &p in &positives {
            let rank = valid.iter().filter(|&&j| j == p || before(j, p)).count();
            let hits = positives.iter().filter(|&&j| j == p || before(j, p)).count();
            ap += hits as f64 / rank as f64;
            best_rank = best_rank.min(rank);
        }
        aps.push(ap / positives.len() as f64);
        for (r, c) in cmc.iter_mut().enumerate() {
            if best_rank <= r + 1 {
                *c += 1.0;
            }
        }
    }
    if aps.is_empty() {
        return None;
    }
    let n = aps.len() as f64;
    Some((aps.iter().sum::<f64>() / n, cmc.into_iter().map(|c| c / n).collect()))
}

/// Exhaustive batch-hard miner over an explicit distance table.
pub fn brute_force_mine(features: &Mat, labels: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let b = labels.len();
    let sq = |i: usize, j: usize| -> f64 {
        features[i]
            .iter()
            .zip(&features[j])
            .map(|(a, c)| {
                let d = (*a as f32 as f64) - (*c as f32 as f64);
                d * d
            })
            .sum()
    };
    let mut pos = Vec::with_capacity(b);
    let mut neg = Vec::with_capacity(b);
    for i in 0..b {
        let same: Vec<usize> = (0..b).filter(|&j| j != i && labels[j] == labels[i]).collect();
        let p = if same.is_empty() {
            i
        } else {
            // Largest distance, lowest index among ties.
            let m = same.iter().map(|&j| sq(i, j)).fold(f64::NEG_INFINITY, f64::max);
            *same.iter().find(|&&j| sq(i, j) == m).unwrap()
        };
        let other: Vec<usize> = (0..b).filter(|&j| labels[j] != labels[i]).collect();
        let m = other.iter().map(|&j| sq(i, j)).fold(f64::INFINITY, f64::min);
        pos.push(p);
        neg.push(*other.iter().find(|&&j| sq(i, j) == m).unwrap());
    }
    (pos, neg)
}
