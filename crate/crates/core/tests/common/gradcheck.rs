//! Finite-difference checks of every training loss against the f64 oracles.
//!
//! Each check draws a random point from `seed`, evaluates the loss and its
//! gradient on the tape, and compares with central differences of the
//! independent f64 implementation at the same (f32-rounded) point. Mined
//! triplets are fixed during the differences, as they are on the tape.

use meb_core::experts::{record_forward, ArchitectureSpec, ExpertModel, Topology};
use meb_core::losses::{
    brainstorm_loss, id_loss, mine_hard, mutual_id_loss, mutual_triplet_loss, softmax_triplet_loss,
    triplet_probability, triplet_probability_values, LossConfig, MinedBatch, TeacherSignal,
};
use meb_core::numcore::{softmax as softmax_t, Activation, Tape, Tensor};
use rand::Rng;

use super::*;

const H: f64 = 1e-3;

/// Relative gradient error and relative value error of one check.
#[derive(Clone, Copy, Debug)]
pub struct Check {
    pub grad: f64,
    pub value: f64,
}

fn value_err(tape_value: f32, oracle: f64) -> f64 {
    (tape_value as f64 - oracle).abs() / oracle.abs().max(1e-3)
}

fn bump(m: &Mat, index: usize, delta: f64) -> Mat {
    let mut out = m.clone();
    let cols = m[0].len();
    out[index / cols][index % cols] += delta;
    out
}

fn labels_for(rng: &mut ChaCha8Rng, batch: usize, classes: usize) -> Vec<usize> {
    // Every class at least twice where possible, so positives exist.
    let mut l: Vec<usize> = (0..batch).map(|i| (i / 2) % classes).collect();
    for i in (1..l.len()).rev() {
        let j = rng.random_range(0..=i);
        l.swap(i, j);
    }
    l
}

fn grad_of(loss: impl FnOnce(&mut Tape, meb_core::numcore::Var) -> meb_core::numcore::Var, x: &Tensor) -> (f32, Vec<f64>) {
    let mut tape = Tape::new();
    let v = tape.param(x.clone()).unwrap();
    let l = loss(&mut tape, v);
    let g = tape.backward(l).unwrap();
    (tape.value(l).item(), flat(&g.wrt(v)))
}

fn check_scalar_fn(x: &Mat, tape_loss: impl FnOnce(&mut Tape, meb_core::numcore::Var) -> meb_core::numcore::Var, oracle: impl Fn(&Mat) -> f64) -> Check {
    let xt = to_tensor(x);
    let xm = to_mat(&xt);
    let (value, grad) = grad_of(tape_loss, &xt);
    let n = xm.len() * xm[0].len();
    let fd = central_difference(n, H, |i, d| oracle(&bump(&xm, i, d)));
    Check {
        grad: rel_err(&grad, &fd),
        value: value_err(value, oracle(&xm)),
    }
}

pub fn id_loss_check(seed: u64, classes: usize, eps: f32) -> Check {
    let mut r = rng(seed);
    let b = 6;
    let logits = random_mat(&mut r, b, classes, 3.0);
    let labels = labels_for(&mut r, b, classes);
    check_scalar_fn(
        &logits,
        |t, v| id_loss(t, v, &labels, eps).unwrap(),
        |m| super::id_loss(m, &labels, eps as f64),
    )
}

fn mined_for(features: &Mat, labels: &[usize]) -> MinedBatch {
    mine_hard(&to_tensor(features), labels).unwrap()
}

pub fn triplet_check(seed: u64) -> Check {
    let mut r = rng(seed);
    let features = random_mat(&mut r, 8, 5, 1.5);
    let labels = labels_for(&mut r, 8, 4);
    let mined = mined_for(&features, &labels);
    check_scalar_fn(
        &features,
        |t, v| softmax_triplet_loss(t, v, &mined).unwrap(),
        |m| softmax_triplet(m, &mined),
    )
}

fn random_distribution(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    random_mat(r, rows, cols, 2.0).iter().map(|row| softmax(row)).collect()
}

pub fn mutual_id_check(seed: u64) -> Check {
    let mut r = rng(seed);
    let logits = random_mat(&mut r, 6, 5, 3.0);
    let teacher = to_mat(&to_tensor(&random_distribution(&mut r, 6, 5)));
    let tt = to_tensor(&teacher);
    check_scalar_fn(
        &logits,
        |t, v| mutual_id_loss(t, v, &tt).unwrap(),
        |m| mutual_id(m, &teacher),
    )
}

pub fn mutual_triplet_check(seed: u64) -> Check {
    let mut r = rng(seed);
    let features = random_mat(&mut r, 8, 5, 1.0);
    let labels = labels_for(&mut r, 8, 4);
    let mined = mined_for(&features, &labels);
    let p_teacher: Vec<f64> = (0..8).map(|_| r.random::<f64>() as f32 as f64).collect();
    let pt = Tensor::vector(p_teacher.iter().map(|&v| v as f32).collect());
    check_scalar_fn(
        &features,
        |t, v| {
            let ps = triplet_probability(t, v, &mined).unwrap();
            mutual_triplet_loss(t, ps, &pt).unwrap()
        },
        |m| bce(&super::triplet_probability(m, &mined), &p_teacher),
    )
}

/// Student logits and features as separate leaves of the full student loss.
pub fn brainstorm_check(seed: u64, weighted: bool, mid: bool, mtri: bool) -> Check {
    let mut r = rng(seed);
    let (b, c, f, k) = (8, 4, 5, 3);
    let logits = to_mat(&to_tensor(&random_mat(&mut r, b, c, 2.0)));
    let features = to_mat(&to_tensor(&random_mat(&mut r, b, f, 1.0)));
    let labels = labels_for(&mut r, b, c);
    let weights: Vec<f64> = if weighted {
        let raw: Vec<f64> = (0..k).map(|_| 0.2 + r.random::<f64>()).collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|w| (k as f64 * w / s) as f32 as f64).collect()
    } else {
        vec![1.0; k]
    };
    let student = 0;
    let mined = mined_for(&features, &labels);
    let mut teachers = Vec::new();
    let mut refs = Vec::new();
    for e in 1..k {
        let probs = to_tensor(&random_distribution(&mut r, b, c));
        let tf = to_tensor(&random_mat(&mut r, b, f, 1.0));
        let pt = triplet_probability_values(&tf, &mined).unwrap();
        refs.push(TeacherRef {
            expert: e,
            probs: to_mat(&probs),
            p_triplet: flat(&pt),
        });
        teachers.push(TeacherSignal {
            expert: e,
            probs,
            features: tf,
        });
    }
    let cfg = LossConfig {
        epsilon: 0.1,
        use_authority: true,
        weights: weights.iter().map(|&w| w as f32).collect(),
        mutual_id: mid,
        mutual_triplet: mtri,
    };

    let mut tape = Tape::new();
    let lv = tape.param(to_tensor(&logits)).unwrap();
    let fv = tape.param(to_tensor(&features)).unwrap();
    let loss = brainstorm_loss(&mut tape, student, lv, fv, &teachers, &labels, &cfg).unwrap();
    let g = tape.backward(loss.total).unwrap();
    let mut grad = flat(&g.wrt(lv));
    grad.extend(flat(&g.wrt(fv)));

    let oracle = |l: &Mat, ft: &Mat| brainstorm(l, ft, &labels, &mined, &refs, &weights, 0.1, mid, mtri);
    let nl = b * c;
    let fd = central_difference(nl + b * f, H, |i, d| {
        if i < nl {
            oracle(&bump(&logits, i, d), &features)
        } else {
            oracle(&logits, &bump(&features, i - nl, d))
        }
    });
    Check {
        grad: rel_err(&grad, &fd),
        value: value_err(tape.value(loss.total).item(), oracle(&logits, &features)),
    }
}

pub fn smooth_arch(topology: Topology) -> ArchitectureSpec {
    let widths = match topology {
        Topology::Residual => vec![6, 6],
        _ => vec![5, 4],
    };
    ArchitectureSpec {
        name: format!("{topology:?}").to_lowercase(),
        topology,
        activations: vec![Activation::Tanh; widths.len()],
        widths,
        embed_dim: 3,
        feature_dim: 4,
    }
}

/// Gradient of the full student loss with respect to every encoder and
/// target-head parameter of a smooth expert.
pub fn encoder_check(seed: u64, topology: Topology) -> Check {
    let mut r = rng(seed);
    let (b, d, c) = (8, 5, 3);
    let arch = smooth_arch(topology);
    let mut model = ExpertModel::new(arch.clone(), d, 2, seed).unwrap();
    let centroids = to_tensor(&random_mat(&mut r, c, arch.feature_dim, 1.0));
    model.reset_target_head(&centroids).unwrap();
    let x = to_tensor(&random_mat(&mut r, b, d, 1.5));
    let xm = to_mat(&x);
    let labels = labels_for(&mut r, b, c);
    let weights = vec![1.0, 1.3, 0.7];

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone()).unwrap();
    let vars = record_forward(&mut tape, &arch, &model.theta, xv, true).unwrap();
    let logits = vars.logits_tgt.unwrap();
    let mined = mine_hard(tape.value(vars.features), &labels).unwrap();
    let mut teachers = Vec::new();
    let mut refs = Vec::new();
    for e in 1..3 {
        let probs = softmax_t(&to_tensor(&random_mat(&mut r, b, c, 2.0))).unwrap();
        let tf = to_tensor(&random_mat(&mut r, b, arch.feature_dim, 1.0));
        let pt = triplet_probability_values(&tf, &mined).unwrap();
        refs.push(TeacherRef {
            expert: e,
            probs: to_mat(&probs),
            p_triplet: flat(&pt),
        });
        teachers.push(TeacherSignal {
            expert: e,
            probs,
            features: tf,
        });
    }
    let cfg = LossConfig {
        weights: weights.iter().map(|&w| w as f32).collect(),
        ..LossConfig::new(3)
    };
    let loss = brainstorm_loss(&mut tape, 0, logits, vars.features, &teachers, &labels, &cfg).unwrap();
    let g = tape.backward(loss.total).unwrap();
    let mut grad = Vec::new();
    for &(w, bv) in &vars.encoder {
        grad.extend(flat(&g.wrt(w)));
        grad.extend(flat(&g.wrt(bv)));
    }
    let (tw, tb) = vars.target_head.unwrap();
    grad.extend(flat(&g.wrt(tw)));
    grad.extend(flat(&g.wrt(tb)));

    let p64 = Params64::from_params(&model.theta);
    let oracle = |p: &Params64| {
        let (feat, lg) = forward(&arch, p, &xm);
        brainstorm(&lg, &feat, &labels, &mined, &refs, &weights, 0.1, true, true)
    };
    let n = p64.flatten().len();
    assert_eq!(n, grad.len());
    let fd = central_difference(n, H, |i, dlt| oracle(&p64.perturbed(i, dlt)));
    Check {
        grad: rel_err(&grad, &fd),
        value: value_err(tape.value(loss.total).item(), oracle(&p64)),
    }
}

/// Largest absolute gradient reaching a teacher's parameters when its
/// outputs, recorded on the same tape, feed a student's loss.
pub fn teacher_gradient_max(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, d, c) = (8, 5, 3);
    let arch = smooth_arch(Topology::Plain);
    let mut student = ExpertModel::new(arch.clone(), d, 2, seed).unwrap();
    let mut teacher = ExpertModel::new(arch.clone(), d, 2, seed + 1).unwrap();
    let centroids = to_tensor(&random_mat(&mut r, c, arch.feature_dim, 1.0));
    student.reset_target_head(&centroids).unwrap();
    teacher.reset_target_head(&centroids).unwrap();
    let x = to_tensor(&random_mat(&mut r, b, d, 1.5));
    let labels = labels_for(&mut r, b, c);

    let mut tape = Tape::new();
    let xv = tape.constant(x).unwrap();
    let tvars = record_forward(&mut tape, &arch, &teacher.theta_avg, xv, true).unwrap();
    let t_logits = tape.value(tvars.logits_tgt.unwrap()).clone();
    let signal = TeacherSignal {
        expert: 1,
        probs: softmax_t(&t_logits).unwrap(),
        features: tape.value(tvars.features).clone(),
    };
    let svars = record_forward(&mut tape, &arch, &student.theta, xv, true).unwrap();
    let loss = brainstorm_loss(
        &mut tape,
        0,
        svars.logits_tgt.unwrap(),
        svars.features,
        &[signal],
        &labels,
        &LossConfig::new(2),
    )
    .unwrap();
    let g = tape.backward(loss.total).unwrap();
    let mut leaves: Vec<_> = tvars.encoder.iter().flat_map(|&(w, b)| [w, b]).collect();
    let (hw, hb) = tvars.target_head.unwrap();
    leaves.extend([hw, hb, tvars.source_head.0, tvars.source_head.1]);
    leaves
        .into_iter()
        .map(|v| g.wrt(v).data().iter().map(|x| x.abs() as f64).fold(0.0, f64::max))
        .fold(0.0, f64::max)
}

/// All named checks for one seed.
pub fn all_checks(seed: u64) -> Vec<(&'static str, Check)> {
    vec![
        ("source id loss", id_loss_check(seed, 5, 0.1)),
        ("source softmax triplet", triplet_check(seed)),
        ("mutual id", mutual_id_check(seed)),
        ("mutual triplet", mutual_triplet_check(seed)),
        ("target id loss", id_loss_check(seed + 1000, 7, 0.1)),
        ("target softmax triplet", triplet_check(seed + 1000)),
        ("brainstorm, unit authority", brainstorm_check(seed, false, true, true)),
        ("brainstorm, weighted", brainstorm_check(seed, true, true, true)),
        ("weighted mutual id only", brainstorm_check(seed + 7, true, true, false)),
        ("weighted mutual triplet only", brainstorm_check(seed + 7, true, false, true)),
        ("encoder plain", encoder_check(seed, Topology::Plain)),
        ("encoder residual", encoder_check(seed, Topology::Residual)),
        ("encoder dense", encoder_check(seed, Topology::DenseConcat)),
        ("encoder parallel", encoder_check(seed, Topology::Parallel)),
    ]
}
