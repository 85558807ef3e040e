//! Measurements shared by the oracle tests and the acceptance suite. Each
//! returns the worst error it saw so callers can assert and report it.

use meb_core::authority::{scatter_ratio, total_scatter};
use meb_core::cluster::{minibatch_kmeans, KMeansConfig};
use meb_core::data::RecordMeta;
use meb_core::eval::{evaluate, MAX_RANK};
use meb_core::experts::{ArchitectureSpec, ExpertModel};
use meb_core::losses::{brainstorm_loss, id_loss, mine_hard, mutual_id_loss, mutual_triplet_loss, triplet_probability,
    triplet_probability_values, LossConfig, TeacherSignal};
use meb_core::numcore::{softmax as softmax_t, Tape, Tensor};
use rand::Rng;

use super::*;

/// Random points, labels covering every cluster.
pub fn random_clustering(r: &mut ChaCha8Rng, n: usize, dim: usize, clusters: usize) -> (Tensor, Vec<usize>) {
    let x = to_tensor(&random_mat(r, n, dim, 3.0));
    let mut labels: Vec<usize> = (0..n).map(|i| if i < clusters { i } else { r.random_range(0..clusters) }).collect();
    for i in (1..n).rev() {
        let j = r.random_range(0..=i);
        labels.swap(i, j);
    }
    (x, labels)
}

/// Worst relative error of `S_total = S_inter + sum S_intra` over random
/// clusterings, with `S_total` from an f64 oracle.
pub fn scatter_identity_err(instances: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let mut r = rng(seed);
        let n = r.random_range(10..120);
        let k = r.random_range(2..10.min(n));
        let dim = r.random_range(2..12);
        let (x, labels) = random_clustering(&mut r, n, dim, k);
        let s = scatter_ratio(&x, &labels, k).unwrap();
        let m = to_mat(&x);
        let mu: Vec<f64> = (0..dim).map(|j| m.iter().map(|row| row[j]).sum::<f64>() / n as f64).collect();
        let oracle: f64 = m.iter().map(|row| row.iter().zip(&mu).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).sum();
        assert!((total_scatter(&x) - oracle).abs() <= 1e-9 * oracle);
        worst = worst.max((s.inter + s.intra_total - oracle).abs() / oracle);
    }
    worst
}

/// Worst relative change of the scatter ratio when features are scaled.
pub fn ratio_scale_invariance_err(instances: u64, factors: &[f32]) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let mut r = rng(100 + seed);
        let (x, labels) = random_clustering(&mut r, 60, 6, 5);
        let base = scatter_ratio(&x, &labels, 5).unwrap().ratio;
        for &c in factors {
            let scaled = x.map(|v| v * c);
            let j = scatter_ratio(&scaled, &labels, 5).unwrap().ratio;
            worst = worst.max((j - base).abs() / base);
        }
    }
    worst
}

pub fn small_expert(seed: u64) -> ExpertModel {
    let mut arch = ArchitectureSpec::defaults().remove(0);
    arch.widths = vec![6, 5];
    arch.activations.truncate(2);
    arch.embed_dim = 4;
    arch.feature_dim = 4;
    ExpertModel::new(arch, 5, 3, seed).unwrap()
}

fn max_gap(m: &ExpertModel) -> f64 {
    m.theta
        .named_tensors()
        .into_iter()
        .zip(m.theta_avg.named_tensors())
        .map(|((_, a), (_, b))| a.max_abs_diff(b) as f64)
        .fold(0.0, f64::max)
}

/// Exactness of the two boundary momenta: `alpha = 0` copies θ and
/// `alpha = 1` leaves Θ untouched.
pub fn ema_boundaries_exact() -> bool {
    let mut m = small_expert(1);
    shift_theta(&mut m, 0.5);
    let before = m.theta_avg.clone();
    m.ema_update(1.0).unwrap();
    let frozen = m.theta_avg == before;
    m.ema_update(0.0).unwrap();
    frozen && max_gap(&m) == 0.0
}

fn shift_theta(m: &mut ExpertModel, by: f32) {
    for t in m.theta.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += by);
    }
}

/// Gap `|Θ - θ|` left after `ceil(log(1e-6) / log alpha)` updates towards a
/// fixed θ from an initial gap of 1, minus the half-ulp rounding of storing
/// Θ in f32.
pub fn ema_convergence_gap(alpha: f32) -> f64 {
    let mut m = small_expert(2);
    shift_theta(&mut m, 1.0);
    let steps = (1e-6f64.ln() / (alpha as f64).ln()).ceil() as usize;
    for _ in 0..steps {
        m.ema_update(alpha).unwrap();
    }
    let half_ulp = m
        .theta
        .named_tensors()
        .into_iter()
        .flat_map(|(_, t)| t.data().to_vec())
        .map(|v| v.abs() as f64 * f32::EPSILON as f64 / 2.0)
        .fold(0.0, f64::max);
    max_gap(&m) - half_ulp
}

fn random_meta(r: &mut ChaCha8Rng, n: usize, ids: u32, cams: u32) -> Vec<RecordMeta> {
    (0..n)
        .map(|_| RecordMeta {
            identity: r.random_range(0..ids),
            camera: r.random_range(0..cams),
        })
        .collect()
}

/// Features on a coarse integer grid so distance ties are common.
fn grid_mat(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    (0..rows).map(|_| (0..cols).map(|_| r.random_range(-2..=2) as f64).collect()).collect()
}

pub struct EvalInstance {
    pub q: Mat,
    pub qm: Vec<RecordMeta>,
    pub g: Mat,
    pub gm: Vec<RecordMeta>,
}

pub fn eval_instance(seed: u64) -> EvalInstance {
    let mut r = rng(seed);
    let (nq, ng, dim) = (r.random_range(1..15), r.random_range(5..70), r.random_range(1..5));
    let ids = r.random_range(2..8);
    let (q, g) = if seed.is_multiple_of(2) {
        (grid_mat(&mut r, nq, dim), grid_mat(&mut r, ng, dim))
    } else {
        let q = to_mat(&to_tensor(&random_mat(&mut r, nq, dim, 1.0)));
        (q, to_mat(&to_tensor(&random_mat(&mut r, ng, dim, 1.0))))
    };
    EvalInstance {
        qm: random_meta(&mut r, nq, ids, 3),
        gm: random_meta(&mut r, ng, ids, 3),
        q,
        g,
    }
}

/// Worst absolute mAP / CMC difference from the brute-force evaluator; every
/// instance must agree on whether any query is evaluable.
pub fn eval_oracle_err(instances: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let e = eval_instance(seed);
        let got = evaluate(&to_tensor(&e.q), &e.qm, &to_tensor(&e.g), &e.gm);
        match (got, brute_force_eval(&e.q, &e.qm, &e.g, &e.gm, MAX_RANK)) {
            (Ok(rep), Some((map, cmc))) => {
                worst = worst.max((rep.map - map).abs());
                assert_eq!(rep.cmc.len(), cmc.len(), "seed {seed}");
                for (a, b) in rep.cmc.iter().zip(&cmc) {
                    worst = worst.max((a - b).abs());
                }
            }
            (Err(_), None) => {}
            (got, want) => panic!("seed {seed}: evaluator {got:?} vs oracle {want:?}"),
        }
    }
    worst
}

/// Anchors whose mined positive or negative differs from the exhaustive
/// oracle.
pub fn miner_mismatches(instances: u64) -> usize {
    let mut bad = 0;
    for seed in 0..instances {
        let mut r = rng(500 + seed);
        let b = r.random_range(4..40);
        let dim = r.random_range(1..6);
        let f = if seed.is_multiple_of(2) {
            grid_mat(&mut r, b, dim)
        } else {
            to_mat(&to_tensor(&random_mat(&mut r, b, dim, 1.0)))
        };
        let classes = r.random_range(2..6);
        let mut labels: Vec<usize> = (0..b).map(|_| r.random_range(0..classes)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let mined = mine_hard(&to_tensor(&f), &labels).unwrap();
        let (pos, neg) = brute_force_mine(&f, &labels);
        bad += (0..b).filter(|&i| mined.positives[i] != pos[i] || mined.negatives[i] != neg[i]).count();
    }
    bad
}

/// Number of full-batch k-means runs whose objective ever increases.
pub fn kmeans_increases(instances: u64) -> usize {
    let mut bad = 0;
    for seed in 0..instances {
        let mut r = rng(900 + seed);
        let n = r.random_range(20..200);
        let k = r.random_range(2..12);
        let x = to_tensor(&random_mat(&mut r, n, 4, 2.0));
        let cfg = KMeansConfig {
            batch_size: Some(n),
            iters: 30,
            ..KMeansConfig::new(k, seed)
        };
        let a = minibatch_kmeans(&x, &cfg).unwrap();
        let mut h = vec![a.seeding_objective];
        h.extend(&a.objective_history);
        h.push(a.objective);
        if h.windows(2).any(|w| w[1] > w[0] * (1.0 + 1e-12)) {
            bad += 1;
        }
    }
    bad
}

/// Worst absolute difference between the separately recorded mutual terms
/// averaged in f64 and the brainstorm breakdown. Only f32 rounding of the
/// two summation orders separates them.
pub fn separate_terms_err(instances: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let (logits, features, labels, teachers) = reduction_case(seed);
        let experts = teachers.len() + 1;
        let mut tape = Tape::new();
        let lv = tape.constant(logits).unwrap();
        let fv = tape.constant(features.clone()).unwrap();
        let weighted = brainstorm_loss(&mut tape, 0, lv, fv, &teachers, &labels, &LossConfig::new(experts))
            .unwrap()
            .breakdown;
        let mined = mine_hard(&features, &labels).unwrap();
        let ps = triplet_probability(&mut tape, fv, &mined).unwrap();
        let (mut mid, mut mtri) = (0.0f64, 0.0f64);
        for t in &teachers {
            let l = mutual_id_loss(&mut tape, lv, &t.probs).unwrap();
            mid += tape.value(l).item() as f64;
            let pt = triplet_probability_values(&t.features, &mined).unwrap();
            let l = mutual_triplet_loss(&mut tape, ps, &pt).unwrap();
            mtri += tape.value(l).item() as f64;
        }
        let k = teachers.len() as f64;
        worst = worst
            .max((weighted.mutual_id as f64 - mid / k).abs())
            .max((weighted.mutual_triplet as f64 - mtri / k).abs());
    }
    worst
}

type ReductionCase = (Tensor, Tensor, Vec<usize>, Vec<TeacherSignal>);

fn reduction_case(seed: u64) -> ReductionCase {
    let mut r = rng(1300 + seed);
    let experts = if seed.is_multiple_of(2) { 3 } else { 4 };
    let (b, c, f) = (8, 4, 5);
    let logits = to_tensor(&random_mat(&mut r, b, c, 2.0));
    let features = to_tensor(&random_mat(&mut r, b, f, 1.0));
    let labels: Vec<usize> = (0..b).map(|i| i % c).collect();
    let teachers = (1..experts)
        .map(|e| TeacherSignal {
            expert: e,
            probs: softmax_t(&to_tensor(&random_mat(&mut r, b, c, 2.0))).unwrap(),
            features: to_tensor(&random_mat(&mut r, b, f, 1.0)),
        })
        .collect();
    (logits, features, labels, teachers)
}

/// `(unit authority vs unweighted, epsilon 0 vs plain CE)`, worst absolute
/// differences. The first compares the weighted objective with every
/// weight 1 against the unweighted one, on the tape and in the f64 oracle.
pub fn reduction_errors(instances: u64) -> (f64, f64) {
    let mut worst_w = 0.0f64;
    let mut worst_ce = 0.0f64;
    for seed in 0..instances {
        let (logits, features, labels, teachers) = reduction_case(seed);
        let experts = teachers.len() + 1;
        let mut tape = Tape::new();
        let lv = tape.constant(logits.clone()).unwrap();
        let fv = tape.constant(features.clone()).unwrap();
        let weighted = brainstorm_loss(&mut tape, 0, lv, fv, &teachers, &labels, &LossConfig::new(experts)).unwrap();
        let plain_cfg = LossConfig {
            use_authority: false,
            weights: Vec::new(),
            ..LossConfig::new(experts)
        };
        let plain = brainstorm_loss(&mut tape, 0, lv, fv, &teachers, &labels, &plain_cfg).unwrap();
        let (w, p) = (&weighted.breakdown, &plain.breakdown);
        worst_w = worst_w
            .max((w.mutual_id as f64 - p.mutual_id as f64).abs())
            .max((w.mutual_triplet as f64 - p.mutual_triplet as f64).abs())
            .max((w.total as f64 - p.total as f64).abs());

        let mined = mine_hard(&features, &labels).unwrap();
        let refs: Vec<TeacherRef> = teachers
            .iter()
            .map(|t| TeacherRef {
                expert: t.expert,
                probs: to_mat(&t.probs),
                p_triplet: flat(&triplet_probability_values(&t.features, &mined).unwrap()),
            })
            .collect();
        let (lm, fm) = (to_mat(&logits), to_mat(&features));
        let ones = vec![1.0; experts];
        let oracle_weighted = brainstorm(&lm, &fm, &labels, &mined, &refs, &ones, 0.1, true, true);
        let ps = super::triplet_probability(&fm, &mined);
        let k = refs.len() as f64;
        let oracle_plain = super::id_loss(&lm, &labels, 0.1)
            + softmax_triplet(&fm, &mined)
            + refs.iter().map(|t| mutual_id(&lm, &t.probs)).sum::<f64>() / k
            + refs.iter().map(|t| bce(&ps, &t.p_triplet)).sum::<f64>() / k;
        worst_w = worst_w.max((oracle_weighted - oracle_plain).abs());

        let smoothed = id_loss(&mut tape, lv, &labels, 0.0).unwrap();
        let logp = tape.log_softmax(lv).unwrap();
        let picked: Vec<(usize, usize)> = labels.iter().copied().enumerate().collect();
        let g = tape.gather(logp, &picked).unwrap();
        let m = tape.mean(g).unwrap();
        let ce = tape.scale(m, -1.0).unwrap();
        worst_ce = worst_ce.max((tape.value(smoothed).item() as f64 - tape.value(ce).item() as f64).abs());
        worst_ce = worst_ce.max((super::id_loss(&lm, &labels, 0.0) - cross_entropy(&lm, &labels)).abs());
    }
    (worst_w, worst_ce)
}
