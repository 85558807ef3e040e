//! Source pre-training and target adaptation.

mod adam;
mod adapt;
mod pretrain;

pub use adam::{adam_step, Adam, AdamConfig, AdamSlot};
pub use adapt::{adapt_target, AdaptReport, EpochRecord, ExpertEpoch};
pub use pretrain::{pretrain_source, PretrainEpoch, PretrainLog};

use serde::{Deserialize, Serialize};

use crate::cluster::average_normalized;
use crate::data::SplitDataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::experts::{ExpertModel, ParamChoice};

/// Splitmix64 finalizer over `seed ^ stream`, for independent RNG streams.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Epochs (0-based) at which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub p: usize,
    pub k: usize,
    pub epsilon: f32,
    /// Iterations per epoch; `None` covers the training split once.
    pub iterations_per_epoch: Option<usize>,
    /// Evaluate on the source query/gallery every this many epochs (and
    /// after the last); 0 only after the last.
    pub eval_every: usize,
    pub seed: Option<u64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            lr: 0.00035,
            lr_milestones: vec![40, 70],
            lr_decay: 0.1,
            weight_decay: 0.0005,
            p: 16,
            k: 4,
            epsilon: 0.1,
            iterations_per_epoch: None,
            eval_every: 10,
            seed: None,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Config(format!("pretrain lr {} must be positive", self.lr)));
        }
        if self.p == 0 || self.k == 0 {
            return Err(Error::Config("pretrain P and K must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon {} outside [0, 1)", self.epsilon)));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.lr_decay.powi(decays as i32)
    }
}

/// Switches that remove parts of the adaptation objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Teachers use their current parameters instead of the average.
    pub no_ema: bool,
    pub no_mid: bool,
    pub no_mtri: bool,
    /// All authorities fixed at one.
    pub no_ar: bool,
    /// Voting loss only.
    pub voting_only: bool,
    /// Averaged-feature pseudo-labels without mutual terms.
    pub baseline_ensemble: bool,
    /// Each expert clusters its own features and trains alone on the
    /// voting loss.
    pub independent: bool,
}

impl Ablation {
    pub const NAMES: [&'static str; 7] = [
        "no_ema",
        "no_mid",
        "no_mtri",
        "no_ar",
        "voting_only",
        "baseline_ensemble",
        "independent",
    ];

    pub fn parse(names: &str) -> Result<Self> {
        let mut a = Ablation::default();
        for name in names.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match name {
                "full" | "none" => {}
                "no_ema" => a.no_ema = true,
                "no_mid" => a.no_mid = true,
                "no_mtri" => a.no_mtri = true,
                "no_ar" => a.no_ar = true,
                "voting_only" => a.voting_only = true,
                "baseline_ensemble" => a.baseline_ensemble = true,
                "independent" => a.independent = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown ablation `{other}` (expected one of {})",
                        Self::NAMES.join(", ")
                    )))
                }
            }
        }
        Ok(a)
    }

    /// Comma-joined flag names, or `full` when none is set.
    pub fn tag(&self) -> String {
        let set = [
            self.no_ema,
            self.no_mid,
            self.no_mtri,
            self.no_ar,
            self.voting_only,
            self.baseline_ensemble,
            self.independent,
        ];
        let names: Vec<&str> = Self::NAMES
            .iter()
            .zip(set)
            .filter(|(_, on)| *on)
            .map(|(n, _)| *n)
            .collect();
        if names.is_empty() {
            "full".into()
        } else {
            names.join(",")
        }
    }

    fn no_mutual(&self) -> bool {
        self.voting_only || self.baseline_ensemble || self.independent
    }

    pub fn mutual_id(&self) -> bool {
        !(self.no_mid || self.no_mutual())
    }

    pub fn mutual_triplet(&self) -> bool {
        !(self.no_mtri || self.no_mutual())
    }

    pub fn teacher_params(&self) -> ParamChoice {
        if self.no_ema {
            ParamChoice::Current
        } else {
            ParamChoice::Average
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    /// EMA momentum of the average parameters.
    pub alpha: f32,
    /// Number of pseudo-label clusters.
    pub clusters: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub p: usize,
    pub k: usize,
    pub epsilon: f32,
    pub kmeans_iters: usize,
    /// `None` means `min(256, N)`.
    pub kmeans_batch: Option<usize>,
    pub ablation: Ablation,
    pub seed: Option<u64>,
}

impl Default for AdaptConfig {
    /// Minutes-scale schedule used by the shipped configs. The momentum
    /// keeps the averaging window at about 1.25 epochs, as 0.999 does over
    /// 800 iterations.
    fn default() -> Self {
        Self {
            epochs: 25,
            iterations_per_epoch: 50,
            alpha: 0.984,
            clusters: 20,
            lr: 0.00035,
            weight_decay: 0.0005,
            p: 16,
            k: 4,
            epsilon: 0.1,
            kmeans_iters: 50,
            kmeans_batch: None,
            ablation: Ablation::default(),
            seed: None,
        }
    }
}

impl AdaptConfig {
    /// The long schedule of the original large-scale setting.
    pub fn full_scale() -> Self {
        Self {
            epochs: 40,
            iterations_per_epoch: 800,
            alpha: 0.999,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.clusters < 2 {
            return Err(Error::Config(format!("need at least 2 clusters, got {}", self.clusters)));
        }
        if self.p > self.clusters {
            return Err(Error::Config(format!(
                "P = {} exceeds the {} pseudo-label clusters",
                self.p, self.clusters
            )));
        }
        if self.lr.is_nan() || self.lr <= 0.0 || self.p == 0 || self.k == 0 {
            return Err(Error::Config("adapt lr, P and K must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon {} outside [0, 1)", self.epsilon)));
        }
        Ok(())
    }
}

/// Parameters used for every reported evaluation.
pub const EVAL_PARAMS: ParamChoice = ParamChoice::Average;

/// Headline retrieval numbers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub map: f64,
    pub cmc1: f64,
    pub cmc5: f64,
    pub cmc10: f64,
}

impl From<&MetricsReport> for EvalSummary {
    fn from(r: &MetricsReport) -> Self {
        Self {
            map: r.map,
            cmc1: r.cmc_at(1),
            cmc5: r.cmc_at(5),
            cmc10: r.cmc_at(10),
        }
    }
}

/// Query/gallery retrieval of every expert plus their averaged features.
pub fn evaluate_experts(
    experts: &[ExpertModel],
    which: ParamChoice,
    data: &SplitDataset,
) -> Result<(Vec<MetricsReport>, MetricsReport)> {
    let xq = SplitDataset::features(&data.query)?;
    let xg = SplitDataset::features(&data.gallery)?;
    let mq = SplitDataset::meta(&data.query);
    let mg = SplitDataset::meta(&data.gallery);
    let mut per_expert = Vec::with_capacity(experts.len());
    let mut fq_all = Vec::with_capacity(experts.len());
    let mut fg_all = Vec::with_capacity(experts.len());
    for e in experts {
        let fq = e.features(which, &xq)?;
        let fg = e.features(which, &xg)?;
        per_expert.push(evaluate(&fq.l2_normalize_rows(), &mq, &fg.l2_normalize_rows(), &mg)?);
        fq_all.push(fq);
        fg_all.push(fg);
    }
    let ensemble = evaluate(&average_normalized(&fq_all)?, &mq, &average_normalized(&fg_all)?, &mg)?;
    Ok((per_expert, ensemble))
}

/// Wraps a numerical failure inside a training step into a divergence
/// report carrying the step's context.
pub(crate) fn diverged(err: Error, context: impl FnOnce() -> String) -> Error {
    match err {
        Error::NonFinite(what) => Error::Diverged(format!("{}: non-finite value from {what}", context())),
        other => other,
    }
}
