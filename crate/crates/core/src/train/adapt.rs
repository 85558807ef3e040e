use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{derive_seed, diverged, evaluate_experts, AdaptConfig, Adam, AdamConfig, EvalSummary, EVAL_PARAMS};
use crate::authority::{authority_from_features, AuthorityReport};
use crate::cluster::{
    assign_pseudo_labels, average_normalized, matched_accuracy, minibatch_kmeans, purity, KMeansConfig,
};
use crate::data::{pk_sample, SplitDataset};
use crate::error::{Error, Result};
use crate::experts::{record_forward, ExpertModel, ForwardVars, ParamChoice};
use crate::losses::{brainstorm_loss, supervised_loss, LossBreakdown, LossConfig, TeacherSignal};
use crate::numcore::{softmax, Gradients, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertEpoch {
    pub expert: String,
    /// Mean per-iteration losses; all zero before adaptation.
    pub loss: LossBreakdown,
    pub j: Option<f64>,
    pub weight: Option<f64>,
    pub eval: EvalSummary,
    /// Purity of the pseudo-labels this expert trained on.
    pub purity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the state before adaptation.
    pub epoch: usize,
    pub experts: Vec<ExpertEpoch>,
    /// Retrieval with the averaged normalized features of all experts.
    pub ensemble: EvalSummary,
    pub purity: Option<f64>,
    pub matched_accuracy: Option<f64>,
    pub kmeans_objective: Option<f64>,
    pub authority: Option<AuthorityReport>,
}

impl EpochRecord {
    /// Mean mAP over experts.
    pub fn mean_map(&self) -> f64 {
        self.experts.iter().map(|e| e.eval.map).sum::<f64>() / self.experts.len() as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub variant: String,
    pub epochs: Vec<EpochRecord>,
    /// Pseudo-labels of the last epoch, one list per expert.
    #[serde(skip)]
    pub last_labels: Vec<Vec<usize>>,
}

fn target_grads(vars: &ForwardVars, grads: &Gradients) -> Vec<(String, Tensor)> {
    let mut out = Vec::with_capacity(2 * vars.encoder.len() + 2);
    for (i, &(w, b)) in vars.encoder.iter().enumerate() {
        out.push((format!("enc.{i}.w"), grads.wrt(w)));
        out.push((format!("enc.{i}.b"), grads.wrt(b)));
    }
    if let Some((w, b)) = vars.target_head {
        out.push(("tgt_head.w".into(), grads.wrt(w)));
        out.push(("tgt_head.b".into(), grads.wrt(b)));
    }
    out
}

/// Mean of the rows of `features` in each cluster.
fn cluster_centroids(features: &Tensor, labels: &[usize], clusters: usize) -> Result<Tensor> {
    let f = features.cols();
    let mut sums = vec![0.0f64; clusters * f];
    let mut counts = vec![0usize; clusters];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (s, &v) in sums[l * f..(l + 1) * f].iter_mut().zip(features.row(i)) {
            *s += v as f64;
        }
    }
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Degenerate(format!("pseudo-label cluster {c} is empty")));
    }
    let data = sums
        .chunks(f)
        .zip(&counts)
        .flat_map(|(row, &c)| row.iter().map(move |s| (s / c as f64) as f32))
        .collect();
    Tensor::matrix(clusters, f, data)
}

struct EpochLabels {
    /// Training labels per expert.
    labels: Vec<Vec<usize>>,
    purity: Vec<f64>,
    shared_purity: Option<f64>,
    matched: Option<f64>,
    objective: Option<f64>,
}

fn label_epoch(
    avg_features: &[Tensor],
    truth: &[u32],
    cfg: &AdaptConfig,
    kmeans: &KMeansConfig,
) -> Result<EpochLabels> {
    let n = truth.len();
    if cfg.ablation.independent {
        let mut labels = Vec::with_capacity(avg_features.len());
        let mut pur = Vec::with_capacity(avg_features.len());
        for f in avg_features {
            let a = minibatch_kmeans(&f.l2_normalize_rows(), kmeans)?;
            let l = assign_pseudo_labels(&a, n)?.labels;
            pur.push(purity(&l, truth)?);
            labels.push(l);
        }
        return Ok(EpochLabels {
            labels,
            purity: pur,
            shared_purity: None,
            matched: None,
            objective: None,
        });
    }
    let shared = average_normalized(avg_features)?;
    let a = minibatch_kmeans(&shared, kmeans)?;
    let l = assign_pseudo_labels(&a, n)?.labels;
    let p = purity(&l, truth)?;
    Ok(EpochLabels {
        purity: vec![p; avg_features.len()],
        shared_purity: Some(p),
        matched: Some(matched_accuracy(&l, truth)?),
        objective: Some(a.objective),
        labels: vec![l; avg_features.len()],
    })
}

fn eval_record(
    epoch: usize,
    experts: &[ExpertModel],
    data: &SplitDataset,
    losses: &[LossBreakdown],
) -> Result<EpochRecord> {
    let (per, ens) = evaluate_experts(experts, EVAL_PARAMS, data)?;
    Ok(EpochRecord {
        epoch,
        experts: experts
            .iter()
            .zip(&per)
            .zip(losses)
            .map(|((e, r), l)| ExpertEpoch {
                expert: e.name().to_string(),
                loss: *l,
                j: None,
                weight: None,
                eval: EvalSummary::from(r),
                purity: None,
            })
            .collect(),
        ensemble: EvalSummary::from(&ens),
        purity: None,
        matched_accuracy: None,
        kmeans_objective: None,
        authority: None,
    })
}

/// Adapts pre-trained experts to the unlabelled target training split.
///
/// Target identities are read only for purity reporting and query/gallery
/// evaluation.
pub fn adapt_target(experts: &mut [ExpertModel], data: &SplitDataset, cfg: &AdaptConfig, seed: u64) -> Result<AdaptReport> {
    cfg.validate()?;
    data.validate()?;
    let ab = cfg.ablation;
    let mutual = ab.mutual_id() || ab.mutual_triplet();
    if mutual && experts.len() < 2 {
        return Err(Error::Config("mutual learning needs at least 2 experts".into()));
    }
    if experts.is_empty() {
        return Err(Error::Config("no experts to adapt".into()));
    }
    let seed = cfg.seed.unwrap_or(seed);
    let names: Vec<String> = experts.iter().map(|e| e.name().to_string()).collect();
    let x = SplitDataset::features(&data.train)?;
    let truth: Vec<u32> = data.train.iter().map(|r| r.identity).collect();
    let n = truth.len();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2000));
    let mut adams: Vec<Adam> = experts
        .iter()
        .map(|_| {
            Adam::new(AdamConfig {
                weight_decay: cfg.weight_decay,
                ..Default::default()
            })
        })
        .collect();

    let mut report = AdaptReport {
        variant: ab.tag(),
        epochs: Vec::with_capacity(cfg.epochs + 1),
        last_labels: Vec::new(),
    };
    report
        .epochs
        .push(eval_record(0, experts, data, &vec![LossBreakdown::default(); experts.len()])?);
    info!("adapt [{}] epoch 0: mean mAP {:.4}", report.variant, report.epochs[0].mean_map());

    for epoch in 1..=cfg.epochs {
        let kmeans = KMeansConfig {
            clusters: cfg.clusters,
            batch_size: cfg.kmeans_batch,
            iters: cfg.kmeans_iters,
            seed: derive_seed(seed, 3000 + epoch as u64),
        };
        if n < cfg.clusters {
            return Err(Error::Config(format!("{n} target records for {} clusters", cfg.clusters)));
        }
        let avg_feats = experts
            .iter()
            .map(|e| e.features(ParamChoice::Average, &x))
            .collect::<Result<Vec<_>>>()?;
        let labels = label_epoch(&avg_feats, &truth, cfg, &kmeans)?;
        for (k, e) in experts.iter_mut().enumerate() {
            let normed = avg_feats[k].l2_normalize_rows();
            e.reset_target_head(&cluster_centroids(&normed, &labels.labels[k], cfg.clusters)?)?;
            adams[k].reset("tgt_head");
        }
        let authority = if ab.no_ar {
            AuthorityReport::uniform(epoch, &names)
        } else {
            authority_from_features(&names, &avg_feats, &kmeans, epoch)?
        };
        let lcfg = LossConfig {
            epsilon: cfg.epsilon,
            use_authority: !ab.no_ar,
            weights: authority.weights(),
            mutual_id: ab.mutual_id(),
            mutual_triplet: ab.mutual_triplet(),
        };

        let mut sums = vec![LossBreakdown::default(); experts.len()];
        for it in 0..cfg.iterations_per_epoch {
            let batches: Vec<Vec<usize>> = if ab.independent {
                labels
                    .labels
                    .iter()
                    .map(|l| pk_sample(l, cfg.p, cfg.k, &mut rng))
                    .collect::<Result<_>>()?
            } else {
                vec![pk_sample(&labels.labels[0], cfg.p, cfg.k, &mut rng)?; experts.len()]
            };
            let teachers: Vec<TeacherSignal> = if mutual {
                experts
                    .iter()
                    .enumerate()
                    .map(|(e, m)| {
                        let out = m.forward(ab.teacher_params(), &x.select_rows(&batches[e]))?;
                        let logits = out.logits_tgt.expect("target head was reset");
                        Ok(TeacherSignal {
                            expert: e,
                            probs: softmax(&logits)?,
                            features: out.features,
                        })
                    })
                    .collect::<Result<_>>()
                    .map_err(|e| diverged(e, || format!("epoch {epoch} iteration {it} teacher pass")))?
            } else {
                Vec::new()
            };
            let steps: Vec<LossBreakdown> = experts
                .par_iter_mut()
                .zip(adams.par_iter_mut())
                .enumerate()
                .map(|(k, (expert, adam))| {
                    let batch = &batches[k];
                    let lb: Vec<usize> = batch.iter().map(|&i| labels.labels[k][i]).collect();
                    let xb = x.select_rows(batch);
                    let others: Vec<TeacherSignal> = teachers.iter().filter(|t| t.expert != k).cloned().collect();
                    adapt_step(expert, adam, k, &xb, &lb, &others, &lcfg, cfg.lr).map_err(|e| {
                        diverged(e, || {
                            format!("adapt expert `{}` epoch {epoch} iteration {it}", expert.name())
                        })
                    })
                })
                .collect::<Result<_>>()?;
            for (s, b) in sums.iter_mut().zip(&steps) {
                s.mutual_id += b.mutual_id;
                s.mutual_triplet += b.mutual_triplet;
                s.id += b.id;
                s.triplet += b.triplet;
                s.total += b.total;
            }
            for e in experts.iter_mut() {
                e.ema_update(cfg.alpha)?;
            }
        }
        let iters = cfg.iterations_per_epoch.max(1) as f32;
        for s in sums.iter_mut() {
            s.mutual_id /= iters;
            s.mutual_triplet /= iters;
            s.id /= iters;
            s.triplet /= iters;
            s.total /= iters;
        }

        let mut rec = eval_record(epoch, experts, data, &sums)?;
        for (k, ex) in rec.experts.iter_mut().enumerate() {
            ex.j = Some(authority.experts[k].j);
            ex.weight = Some(authority.experts[k].weight);
            ex.purity = Some(labels.purity[k]);
        }
        rec.purity = labels.shared_purity;
        rec.matched_accuracy = labels.matched;
        rec.kmeans_objective = labels.objective;
        rec.authority = Some(authority);
        info!(
            "adapt [{}] epoch {epoch}: mean mAP {:.4} ensemble {:.4} purity {:.3}",
            report.variant,
            rec.mean_map(),
            rec.ensemble.map,
            labels.purity.iter().sum::<f64>() / labels.purity.len() as f64
        );
        report.epochs.push(rec);
        report.last_labels = labels.labels;
    }
    Ok(report)
}

/// One optimizer step of expert `k` on a pseudo-labelled batch.
#[allow(clippy::too_many_arguments)]
pub(crate) fn adapt_step(
    expert: &mut ExpertModel,
    adam: &mut Adam,
    k: usize,
    x: &Tensor,
    labels: &[usize],
    teachers: &[TeacherSignal],
    lcfg: &LossConfig,
    lr: f64,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone())?;
    let vars = record_forward(&mut tape, &expert.arch, &expert.theta, xv, true)?;
    let logits = vars
        .logits_tgt
        .ok_or_else(|| Error::Contract("target head missing during adaptation".into()))?;
    let (total, breakdown) = if lcfg.mutual_id || lcfg.mutual_triplet {
        let l = brainstorm_loss(&mut tape, k, logits, vars.features, teachers, labels, lcfg)?;
        (l.total, l.breakdown)
    } else {
        let l = supervised_loss(&mut tape, logits, vars.features, labels, lcfg.epsilon)?;
        let id = tape.value(l.id).item();
        let triplet = tape.value(l.triplet).item();
        (
            l.total,
            LossBreakdown {
                id,
                triplet,
                total: tape.value(l.total).item(),
                ..Default::default()
            },
        )
    };
    let grads = tape.backward(total)?;
    adam.step(&mut expert.theta, &target_grads(&vars, &grads), lr)?;
    Ok(breakdown)
}
