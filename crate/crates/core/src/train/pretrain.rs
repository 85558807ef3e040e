use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{derive_seed, diverged, evaluate_experts, Adam, AdamConfig, EvalSummary, PretrainConfig};
use crate::data::{pk_sample, SplitDataset};
use crate::error::{Error, Result};
use crate::experts::{record_forward, ExpertModel, ParamChoice};
use crate::losses::supervised_loss;
use crate::numcore::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub expert: String,
    pub epoch: usize,
    pub lr: f64,
    pub id_loss: f64,
    pub triplet_loss: f64,
    pub eval: Option<EvalSummary>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub epochs: Vec<PretrainEpoch>,
}

fn source_grads(vars: &crate::experts::ForwardVars, grads: &crate::numcore::Gradients) -> Vec<(String, Tensor)> {
    let mut out = Vec::with_capacity(2 * vars.encoder.len() + 2);
    for (i, &(w, b)) in vars.encoder.iter().enumerate() {
        out.push((format!("enc.{i}.w"), grads.wrt(w)));
        out.push((format!("enc.{i}.b"), grads.wrt(b)));
    }
    out.push(("src_head.w".into(), grads.wrt(vars.source_head.0)));
    out.push(("src_head.b".into(), grads.wrt(vars.source_head.1)));
    out
}

/// One supervised step on a labelled batch; returns `(id, triplet)` losses.
pub(crate) fn supervised_step(
    expert: &mut ExpertModel,
    adam: &mut Adam,
    x: &Tensor,
    labels: &[usize],
    epsilon: f32,
    lr: f64,
) -> Result<(f32, f32)> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone())?;
    let vars = record_forward(&mut tape, &expert.arch, &expert.theta, xv, true)?;
    let loss = supervised_loss(&mut tape, vars.logits_src, vars.features, labels, epsilon)?;
    let grads = tape.backward(loss.total)?;
    adam.step(&mut expert.theta, &source_grads(&vars, &grads), lr)?;
    Ok((tape.value(loss.id).item(), tape.value(loss.triplet).item()))
}

fn train_one(
    expert: &mut ExpertModel,
    index: usize,
    data: &SplitDataset,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<Vec<PretrainEpoch>> {
    let (labels, classes) = data.dense_train_labels();
    if expert.theta.source_head.classes() != classes {
        return Err(Error::Config(format!(
            "expert `{}` has {} source classes, dataset has {classes}",
            expert.name(),
            expert.theta.source_head.classes()
        )));
    }
    let x = SplitDataset::features(&data.train)?;
    let iters = cfg
        .iterations_per_epoch
        .unwrap_or_else(|| labels.len().div_ceil(cfg.p * cfg.k));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1000 + index as u64));
    let mut adam = Adam::new(AdamConfig {
        weight_decay: cfg.weight_decay,
        ..Default::default()
    });
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let (mut id_sum, mut tri_sum) = (0.0f64, 0.0f64);
        for it in 0..iters {
            let batch = pk_sample(&labels, cfg.p, cfg.k, &mut rng)?;
            let xb = x.select_rows(&batch);
            let lb: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (id, tri) = supervised_step(expert, &mut adam, &xb, &lb, cfg.epsilon, lr).map_err(|e| {
                diverged(e, || format!("pretrain expert `{}` epoch {epoch} iteration {it}", expert.name()))
            })?;
            id_sum += id as f64;
            tri_sum += tri as f64;
        }
        let last = epoch + 1 == cfg.epochs;
        let eval = if last || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0) {
            let (reports, _) = evaluate_experts(std::slice::from_ref(expert), ParamChoice::Current, data)?;
            Some(EvalSummary::from(&reports[0]))
        } else {
            None
        };
        let rec = PretrainEpoch {
            expert: expert.name().to_string(),
            epoch,
            lr,
            id_loss: id_sum / iters.max(1) as f64,
            triplet_loss: tri_sum / iters.max(1) as f64,
            eval,
        };
        info!(
            "pretrain {} epoch {epoch}: id {:.4} tri {:.4}{}",
            rec.expert,
            rec.id_loss,
            rec.triplet_loss,
            rec.eval.map(|e| format!(" mAP {:.4}", e.map)).unwrap_or_default()
        );
        log.push(rec);
    }
    Ok(log)
}

/// Trains every expert independently on the labelled training split, then
/// copies θ into Θ.
pub fn pretrain_source(experts: &mut [ExpertModel], data: &SplitDataset, cfg: &PretrainConfig, seed: u64) -> Result<PretrainLog> {
    cfg.validate()?;
    data.validate()?;
    let seed = cfg.seed.unwrap_or(seed);
    let logs = experts
        .par_iter_mut()
        .enumerate()
        .map(|(k, e)| train_one(e, k, data, cfg, seed))
        .collect::<Result<Vec<_>>>()?;
    for e in experts.iter_mut() {
        e.sync_average();
    }
    Ok(PretrainLog {
        epochs: logs.into_iter().flatten().collect(),
    })
}
