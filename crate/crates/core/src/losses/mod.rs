//! Training objectives recorded on a [`Tape`].
//!
//! Every loss is a mean over the mini-batch. Teacher signals enter as plain
//! tensors, so no gradient can reach a teacher.

mod mining;

pub use mining::{mine_hard, MinedBatch};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::linalg::sq_dist;
use crate::numcore::{Tape, Tensor, Var, DIST_EPS};

/// Probabilities are clamped into `[P_CLAMP, 1 - P_CLAMP]` before logs.
pub const P_CLAMP: f32 = 1e-7;

/// Tolerance on teacher distributions summing to one.
pub const PROB_SUM_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Label-smoothing constant.
    pub epsilon: f32,
    /// Scale each teacher's mutual terms by its authority.
    pub use_authority: bool,
    /// Authority per expert, indexed by expert id.
    pub weights: Vec<f32>,
    pub mutual_id: bool,
    pub mutual_triplet: bool,
}

impl LossConfig {
    pub fn new(experts: usize) -> Self {
        Self {
            epsilon: 0.1,
            use_authority: true,
            weights: vec![1.0; experts],
            mutual_id: true,
            mutual_triplet: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon {} outside [0, 1)", self.epsilon)));
        }
        if let Some(w) = self.weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return Err(Error::Config(format!("authority weight {w} must be positive")));
        }
        Ok(())
    }

    fn weight(&self, expert: usize) -> Result<f32> {
        if !self.use_authority {
            return Ok(1.0);
        }
        self.weights
            .get(expert)
            .copied()
            .ok_or_else(|| Error::Config(format!("no authority weight for expert {expert}")))
    }
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Dimension(format!("{rows} rows but {} labels", labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Dimension(format!("label {l} outside {classes} classes")));
    }
    Ok(())
}

/// Cross entropy with label smoothing: `-mean_i sum_j q_ij log p_ij`.
pub fn id_loss(tape: &mut Tape, logits: Var, labels: &[usize], epsilon: f32) -> Result<Var> {
    let (b, c) = tape.value(logits).require_matrix("id_loss logits")?;
    check_labels(labels, b, c)?;
    let off = epsilon / c as f32;
    let mut q = Tensor::full(&[b, c], off);
    for (i, &l) in labels.iter().enumerate() {
        q.row_mut(i)[l] = 1.0 - epsilon + off;
    }
    let q = tape.constant(q)?;
    let logp = tape.log_softmax(logits)?;
    let prod = tape.mul(q, logp)?;
    let s = tape.sum(prod)?;
    tape.scale(s, -1.0 / b as f32)
}

/// Anchor-positive and anchor-negative distances on the tape.
fn triplet_distances(tape: &mut Tape, features: Var, mined: &MinedBatch) -> Result<(Var, Var)> {
    let (b, _) = tape.value(features).require_matrix("triplet features")?;
    let max = mined
        .anchors
        .iter()
        .chain(&mined.positives)
        .chain(&mined.negatives)
        .copied()
        .max();
    match max {
        None => return Err(Error::Mining("empty mined batch".into())),
        Some(m) if m >= b => {
            return Err(Error::Dimension(format!("mined index {m} outside batch of {b}")))
        }
        _ => {}
    }
    let d = tape.pairwise_l2(features, features)?;
    let dp = tape.gather(d, &mined.positive_pairs())?;
    let dn = tape.gather(d, &mined.negative_pairs())?;
    Ok((dp, dn))
}

/// `mean_i -log(e^{d-} / (e^{d+} + e^{d-}))`, evaluated as `softplus(d+ - d-)`.
pub fn softmax_triplet_loss(tape: &mut Tape, features: Var, mined: &MinedBatch) -> Result<Var> {
    let (dp, dn) = triplet_distances(tape, features, mined)?;
    let diff = tape.sub(dp, dn)?;
    let sp = tape.softplus(diff)?;
    tape.mean(sp)
}

/// Per-anchor triplet probability `e^{d-} / (e^{d+} + e^{d-})` as a `[B]` vector.
pub fn triplet_probability(tape: &mut Tape, features: Var, mined: &MinedBatch) -> Result<Var> {
    let (dp, dn) = triplet_distances(tape, features, mined)?;
    let diff = tape.sub(dn, dp)?;
    tape.sigmoid(diff)
}

fn sigmoid64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Triplet probabilities of fixed (teacher) features over given triplets.
pub fn triplet_probability_values(features: &Tensor, mined: &MinedBatch) -> Result<Tensor> {
    let (b, _) = features.require_matrix("teacher features")?;
    let mut out = Vec::with_capacity(mined.len());
    for ((&a, &p), &n) in mined.anchors.iter().zip(&mined.positives).zip(&mined.negatives) {
        if a.max(p).max(n) >= b {
            return Err(Error::Dimension(format!("mined index outside batch of {b}")));
        }
        let dp = (sq_dist(features.row(a), features.row(p)) + DIST_EPS).sqrt();
        let dn = (sq_dist(features.row(a), features.row(n)) + DIST_EPS).sqrt();
        out.push(sigmoid64(dn - dp) as f32);
    }
    Ok(Tensor::vector(out))
}

/// Cross entropy of a fixed teacher distribution against the student's
/// softmax: `-mean_i sum_j t_ij log s_ij`.
pub fn mutual_id_loss(tape: &mut Tape, student_logits: Var, teacher_probs: &Tensor) -> Result<Var> {
    let shape = tape.value(student_logits).shape().to_vec();
    if teacher_probs.shape() != shape.as_slice() {
        return Err(Error::Dimension(format!(
            "teacher probabilities {:?} vs student logits {:?}",
            teacher_probs.shape(),
            shape
        )));
    }
    let (b, _) = teacher_probs.require_matrix("teacher probabilities")?;
    for i in 0..b {
        let row = teacher_probs.row(i);
        let s: f64 = row.iter().map(|&v| v as f64).sum();
        if (s - 1.0).abs() > PROB_SUM_TOL || row.iter().any(|&v| v.is_nan() || v < 0.0) {
            return Err(Error::Contract(format!(
                "teacher row {i} is not a distribution (sum {s})"
            )));
        }
    }
    let t = tape.constant(teacher_probs.clone())?;
    let logp = tape.log_softmax(student_logits)?;
    let prod = tape.mul(t, logp)?;
    let s = tape.sum(prod)?;
    tape.scale(s, -1.0 / b as f32)
}

/// Binary cross entropy of teacher triplet probabilities against the
/// student's: `-mean_i [t log s + (1 - t) log(1 - s)]`.
pub fn mutual_triplet_loss(tape: &mut Tape, p_student: Var, p_teacher: &Tensor) -> Result<Var> {
    let n = tape.value(p_student).numel();
    if p_teacher.numel() != n {
        return Err(Error::Dimension(format!(
            "{} teacher probabilities for {n} anchors",
            p_teacher.numel()
        )));
    }
    let in_unit = |v: &f32| (0.0..=1.0).contains(v);
    if !tape.value(p_student).data().iter().all(in_unit) || !p_teacher.data().iter().all(in_unit) {
        return Err(Error::Contract("triplet probabilities must lie in [0, 1]".into()));
    }
    let shape = tape.value(p_student).shape().to_vec();
    let t = Tensor::new(shape.clone(), p_teacher.data().to_vec())?;
    let one_minus_t = t.map(|v| 1.0 - v);
    let t = tape.constant(t)?;
    let one_minus_t = tape.constant(one_minus_t)?;
    let ones = tape.constant(Tensor::full(&shape, 1.0))?;

    let s = tape.clamp(p_student, P_CLAMP, 1.0 - P_CLAMP)?;
    let log_s = tape.log(s)?;
    let s_c = tape.sub(ones, s)?;
    let log_sc = tape.log(s_c)?;
    let a = tape.mul(t, log_s)?;
    let b = tape.mul(one_minus_t, log_sc)?;
    let both = tape.add(a, b)?;
    let m = tape.mean(both)?;
    tape.scale(m, -1.0)
}

/// Identity plus softmax-triplet loss on hard labels, with the triplets used.
#[derive(Debug)]
pub struct SupervisedLoss {
    pub total: Var,
    pub id: Var,
    pub triplet: Var,
    pub mined: MinedBatch,
}

/// Identity plus triplet loss on hard labels. Triplets are mined on the
/// detached features.
pub fn supervised_loss(
    tape: &mut Tape,
    logits: Var,
    features: Var,
    labels: &[usize],
    epsilon: f32,
) -> Result<SupervisedLoss> {
    let mined = mine_hard(tape.value(features), labels)?;
    let id = id_loss(tape, logits, labels, epsilon)?;
    let triplet = softmax_triplet_loss(tape, features, &mined)?;
    let total = tape.add(id, triplet)?;
    Ok(SupervisedLoss {
        total,
        id,
        triplet,
        mined,
    })
}

/// Outputs of one teacher on the current batch, from that teacher's
/// average (or current) parameters.
#[derive(Clone, Debug)]
pub struct TeacherSignal {
    pub expert: usize,
    /// Softmax of the teacher's target logits, `[B, M_t]`.
    pub probs: Tensor,
    /// Teacher features, `[B, F]`.
    pub features: Tensor,
}

/// Per-term values of one expert's loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mutual_id: f32,
    pub mutual_triplet: f32,
    pub id: f32,
    pub triplet: f32,
    pub total: f32,
}

impl LossBreakdown {
    pub fn voting(&self) -> f32 {
        self.id + self.triplet
    }
}

#[derive(Debug)]
pub struct BrainstormLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Loss of student `k`: weighted mutual identity and triplet terms averaged
/// over its teachers plus the voting loss on pseudo-labels.
pub fn brainstorm_loss(
    tape: &mut Tape,
    k: usize,
    logits: Var,
    features: Var,
    teachers: &[TeacherSignal],
    pseudo_labels: &[usize],
    cfg: &LossConfig,
) -> Result<BrainstormLoss> {
    cfg.validate()?;
    if teachers.is_empty() {
        return Err(Error::Config("mutual learning needs at least 2 experts".into()));
    }
    if let Some(t) = teachers.iter().find(|t| t.expert == k) {
        return Err(Error::Contract(format!("expert {} cannot teach itself", t.expert)));
    }
    let vote = supervised_loss(tape, logits, features, pseudo_labels, cfg.epsilon)?;
    let inv = 1.0 / teachers.len() as f32;
    let mut total = vote.total;
    let mut breakdown = LossBreakdown {
        id: tape.value(vote.id).item(),
        triplet: tape.value(vote.triplet).item(),
        ..Default::default()
    };

    if cfg.mutual_id {
        let mut acc: Option<Var> = None;
        for t in teachers {
            let l = mutual_id_loss(tape, logits, &t.probs)?;
            let l = tape.scale(l, cfg.weight(t.expert)? * inv)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, l)?,
                None => l,
            });
        }
        let mid = acc.expect("teachers is non-empty");
        breakdown.mutual_id = tape.value(mid).item();
        total = tape.add(total, mid)?;
    }
    if cfg.mutual_triplet {
        let p_student = triplet_probability(tape, features, &vote.mined)?;
        let mut acc: Option<Var> = None;
        for t in teachers {
            let p_teacher = triplet_probability_values(&t.features, &vote.mined)?;
            let l = mutual_triplet_loss(tape, p_student, &p_teacher)?;
            let l = tape.scale(l, cfg.weight(t.expert)? * inv)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, l)?,
                None => l,
            });
        }
        let mtri = acc.expect("teachers is non-empty");
        breakdown.mutual_triplet = tape.value(mtri).item();
        total = tape.add(total, mtri)?;
    }
    breakdown.total = tape.value(total).item();
    Ok(BrainstormLoss { total, breakdown })
}
