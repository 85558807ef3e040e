//! Pipeline stages, run directories and ablation sweeps.
//!
//! Every stage writes into its own directory together with the resolved
//! config (`config.toml`) and `meta.json` holding the code version and seed.
//!
//! ```text
//! <out>/source.csv, target.csv        gen
//! <out>/pretrain/                     pretrain: checkpoints/, metrics.jsonl, summary.json
//! <out>/adapt-<variant>/              adapt: checkpoints/, metrics.jsonl, summary.json, curve.csv
//! <out>/eval-<name>/                  eval: summary.json [, per_query_ap.csv]
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::cluster::write_assignment_csv;
use crate::config::ExperimentConfig;
use crate::data::{generate, load_dataset, save_dataset, SplitDataset};
use crate::error::{Error, Result};
use crate::eval::MetricsReport;
use crate::experts::{build_experts, load_checkpoint, save_checkpoint, ExpertModel};
use crate::train::{
    adapt_target, evaluate_experts, pretrain_source, Ablation, AdaptReport, EvalSummary, PretrainLog, EVAL_PARAMS,
};
use crate::CODE_VERSION;

pub const SOURCE_FILE: &str = "source.csv";
pub const TARGET_FILE: &str = "target.csv";
pub const PRETRAIN_DIR: &str = "pretrain";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CURVE_FILE: &str = "curve.csv";
pub const TABLE_FILE: &str = "table.csv";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text)
}

/// Creates `dir` and records the resolved config, code version and seed.
pub fn prepare_run_dir(dir: &Path, cfg: &ExperimentConfig, stage: &str) -> Result<()> {
    create_dir(dir)?;
    write_file(&dir.join("config.toml"), cfg.to_toml()?)?;
    write_json(
        &dir.join("meta.json"),
        &json!({ "code_version": CODE_VERSION, "seed": cfg.seed, "stage": stage }),
    )
}

/// Headline numbers of one evaluated model set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultSummary {
    pub method: String,
    pub seed: u64,
    /// Per expert, in config order.
    pub experts: Vec<(String, EvalSummary)>,
    /// Mean of the per-expert numbers.
    pub mean: EvalSummary,
    pub ensemble: EvalSummary,
}

fn mean_summary(items: &[EvalSummary]) -> EvalSummary {
    let n = items.len().max(1) as f64;
    EvalSummary {
        map: items.iter().map(|e| e.map).sum::<f64>() / n,
        cmc1: items.iter().map(|e| e.cmc1).sum::<f64>() / n,
        cmc5: items.iter().map(|e| e.cmc5).sum::<f64>() / n,
        cmc10: items.iter().map(|e| e.cmc10).sum::<f64>() / n,
    }
}

impl ResultSummary {
    fn from_reports(method: &str, seed: u64, experts: &[ExpertModel], per: &[MetricsReport], ens: &MetricsReport) -> Self {
        let summaries: Vec<EvalSummary> = per.iter().map(EvalSummary::from).collect();
        Self {
            method: method.to_string(),
            seed,
            experts: experts.iter().map(|e| e.name().to_string()).zip(summaries.iter().copied()).collect(),
            mean: mean_summary(&summaries),
            ensemble: EvalSummary::from(ens),
        }
    }

    fn from_adapt(report: &AdaptReport, seed: u64) -> Result<Self> {
        let last = report
            .epochs
            .last()
            .ok_or_else(|| Error::Contract("adaptation report has no epochs".into()))?;
        let summaries: Vec<EvalSummary> = last.experts.iter().map(|e| e.eval).collect();
        Ok(Self {
            method: report.variant.clone(),
            seed,
            experts: last.experts.iter().map(|e| (e.expert.clone(), e.eval)).collect(),
            mean: mean_summary(&summaries),
            ensemble: last.ensemble,
        })
    }
}

fn summary_line(stage: &str, variant: &str, seed: u64, epoch: usize, expert: &str, e: &EvalSummary) -> serde_json::Value {
    json!({
        "stage": stage,
        "variant": variant,
        "seed": seed,
        "epoch": epoch,
        "expert": expert,
        "map": e.map,
        "cmc1": e.cmc1,
        "cmc5": e.cmc5,
        "cmc10": e.cmc10,
    })
}

fn write_lines(path: &Path, lines: &[serde_json::Value]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for l in lines {
        serde_json::to_writer(&mut w, l)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One line per expert per epoch plus one ensemble line per epoch.
pub fn adapt_metric_lines(report: &AdaptReport, seed: u64) -> Vec<serde_json::Value> {
    let mut lines = Vec::new();
    for rec in &report.epochs {
        for e in &rec.experts {
            let mut l = summary_line("adapt", &report.variant, seed, rec.epoch, &e.expert, &e.eval);
            l["loss"] = serde_json::to_value(e.loss).unwrap_or_default();
            l["j"] = json!(e.j);
            l["weight"] = json!(e.weight);
            l["purity"] = json!(e.purity);
            lines.push(l);
        }
        let mut l = summary_line("adapt", &report.variant, seed, rec.epoch, "ensemble", &rec.ensemble);
        l["mean_map"] = json!(rec.mean_map());
        l["purity"] = json!(rec.purity);
        l["matched_accuracy"] = json!(rec.matched_accuracy);
        l["kmeans_objective"] = json!(rec.kmeans_objective);
        lines.push(l);
    }
    lines
}

fn pretrain_metric_lines(log: &PretrainLog, seed: u64) -> Vec<serde_json::Value> {
    log.epochs
        .iter()
        .map(|e| {
            json!({
                "stage": "pretrain",
                "seed": seed,
                "epoch": e.epoch,
                "expert": e.expert,
                "lr": e.lr,
                "id_loss": e.id_loss,
                "triplet_loss": e.triplet_loss,
                "eval": e.eval,
            })
        })
        .collect()
}

/// `epoch,<expert>...,mean,ensemble` mAP per epoch.
pub fn write_curve_csv(path: &Path, report: &AdaptReport) -> Result<()> {
    let mut text = String::from("epoch");
    if let Some(first) = report.epochs.first() {
        for e in &first.experts {
            text.push(',');
            text.push_str(&e.expert);
        }
    }
    text.push_str(",mean,ensemble\n");
    for rec in &report.epochs {
        text.push_str(&rec.epoch.to_string());
        for e in &rec.experts {
            text.push_str(&format!(",{}", e.eval.map));
        }
        text.push_str(&format!(",{},{}\n", rec.mean_map(), rec.ensemble.map));
    }
    write_file(path, text)
}

fn save_experts(experts: &[ExpertModel], dir: &Path) -> Result<()> {
    create_dir(dir)?;
    for e in experts {
        save_checkpoint(e, dir, e.name())?;
    }
    Ok(())
}

/// Loads one checkpoint per configured expert and checks it matches the
/// config.
pub fn load_experts(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<ExpertModel>> {
    cfg.experts
        .iter()
        .map(|spec| {
            let m = load_checkpoint(dir, &spec.name)?;
            if &m.arch != spec {
                return Err(Error::Config(format!(
                    "checkpoint `{}` in {} was built from a different architecture than the config",
                    spec.name,
                    dir.display()
                )));
            }
            if m.input_dim != cfg.generator.input_dim {
                return Err(Error::Config(format!(
                    "checkpoint `{}` expects input_dim {}, config has {}",
                    spec.name, m.input_dim, cfg.generator.input_dim
                )));
            }
            Ok(m)
        })
        .collect()
}

/// On divergence, saves the current parameters and the error next to the
/// stage outputs before passing the error on.
fn dump_on_divergence<T>(result: Result<T>, dir: &Path, experts: &[ExpertModel]) -> Result<T> {
    if let Err(Error::Diverged(msg)) = &result {
        let dump = dir.join("diverged");
        let saved = save_experts(experts, &dump.join(CHECKPOINT_DIR)).and_then(|_| {
            write_json(&dump.join("error.json"), &json!({ "error": msg }))
        });
        match saved {
            Ok(()) => warn!("training diverged; state dumped to {}", dump.display()),
            Err(e) => warn!("training diverged and the dump failed: {e}"),
        }
    }
    result
}

/// Generates both domains into `out`.
pub fn run_gen(cfg: &ExperimentConfig, out: &Path) -> Result<(SplitDataset, SplitDataset)> {
    prepare_run_dir(out, cfg, "gen")?;
    let (source, target) = generate(&cfg.generator)?;
    save_dataset(out.join(SOURCE_FILE), &source)?;
    save_dataset(out.join(TARGET_FILE), &target)?;
    info!(
        "generated {} source and {} target training records in {}",
        source.train.len(),
        target.train.len(),
        out.display()
    );
    Ok((source, target))
}

fn load_domain(out: &Path, file: &str) -> Result<SplitDataset> {
    let path = out.join(file);
    if !path.exists() {
        return Err(Error::Config(format!(
            "{} not found; run `gen` with the same output directory first",
            path.display()
        )));
    }
    load_dataset(path)
}

/// Trains the configured experts on `<out>/source.csv`.
pub fn run_pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<(Vec<ExpertModel>, PretrainLog)> {
    let source = load_domain(out, SOURCE_FILE)?;
    let dir = out.join(PRETRAIN_DIR);
    prepare_run_dir(&dir, cfg, "pretrain")?;
    let mut experts = build_experts(&cfg.experts, source.dim, source.num_identities, cfg.seed)?;
    let log = pretrain_source(&mut experts, &source, &cfg.pretrain, cfg.seed);
    let log = dump_on_divergence(log, &dir, &experts)?;
    save_experts(&experts, &dir.join(CHECKPOINT_DIR))?;
    write_lines(&dir.join(METRICS_FILE), &pretrain_metric_lines(&log, cfg.seed))?;
    let (per, ens) = evaluate_experts(&experts, EVAL_PARAMS, &source)?;
    write_json(
        &dir.join(SUMMARY_FILE),
        &ResultSummary::from_reports("pretrain", cfg.seed, &experts, &per, &ens),
    )?;
    Ok((experts, log))
}

/// Directory of the adaptation run for a variant.
pub fn adapt_dir(out: &Path, ablation: &Ablation) -> PathBuf {
    out.join(format!("adapt-{}", ablation.tag().replace(',', "+")))
}

/// Adapts the pre-trained checkpoints to `<out>/target.csv` under
/// `cfg.adapt.ablation`.
pub fn run_adapt(cfg: &ExperimentConfig, out: &Path, dump_clusters: bool) -> Result<AdaptReport> {
    let target = load_domain(out, TARGET_FILE)?;
    let mut experts = load_experts(cfg, &out.join(PRETRAIN_DIR).join(CHECKPOINT_DIR))?;
    let dir = adapt_dir(out, &cfg.adapt.ablation);
    adapt_into(cfg, &target, &mut experts, &dir, dump_clusters)
}

fn adapt_into(
    cfg: &ExperimentConfig,
    target: &SplitDataset,
    experts: &mut [ExpertModel],
    dir: &Path,
    dump_clusters: bool,
) -> Result<AdaptReport> {
    prepare_run_dir(dir, cfg, "adapt")?;
    let report = adapt_target(experts, target, &cfg.adapt, cfg.seed);
    let report = dump_on_divergence(report, dir, experts)?;
    save_experts(experts, &dir.join(CHECKPOINT_DIR))?;
    write_lines(&dir.join(METRICS_FILE), &adapt_metric_lines(&report, cfg.seed))?;
    write_curve_csv(&dir.join(CURVE_FILE), &report)?;
    write_json(&dir.join(SUMMARY_FILE), &ResultSummary::from_adapt(&report, cfg.seed)?)?;
    if dump_clusters {
        for (k, labels) in report.last_labels.iter().enumerate() {
            let path = dir.join(format!("clusters-{}.csv", experts[k].name()));
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            write_assignment_csv(BufWriter::new(file), labels).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(report)
}

/// Evaluates the checkpoints in `checkpoints` on the query/gallery split of
/// `<out>/<dataset>`. Pre-trained checkpoints on the target give the direct
/// transfer numbers.
pub fn run_eval(
    cfg: &ExperimentConfig,
    out: &Path,
    checkpoints: &Path,
    dataset: &str,
    name: &str,
    per_query: bool,
) -> Result<ResultSummary> {
    let data = load_domain(out, dataset)?;
    let experts = load_experts(cfg, checkpoints)?;
    let dir = out.join(format!("eval-{name}"));
    prepare_run_dir(&dir, cfg, "eval")?;
    let (per, ens) = evaluate_experts(&experts, EVAL_PARAMS, &data)?;
    let summary = ResultSummary::from_reports(name, cfg.seed, &experts, &per, &ens);
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    let lines: Vec<serde_json::Value> = summary
        .experts
        .iter()
        .map(|(n, e)| summary_line("eval", name, cfg.seed, 0, n, e))
        .chain(std::iter::once(summary_line("eval", name, cfg.seed, 0, "ensemble", &summary.ensemble)))
        .collect();
    write_lines(&dir.join(METRICS_FILE), &lines)?;
    if per_query {
        let mut text = String::from("expert,query,ap\n");
        for (e, r) in experts.iter().zip(&per) {
            for (q, ap) in r.evaluated_queries.iter().zip(&r.per_query_ap) {
                text.push_str(&format!("{},{q},{ap}\n", e.name()));
            }
        }
        write_file(&dir.join("per_query_ap.csv"), text)?;
    }
    Ok(summary)
}

/// Everything one seed of a sweep produced.
#[derive(Clone, Debug, Default)]
pub struct SeedRuns {
    pub seed: u64,
    pub supervised: Option<ResultSummary>,
    pub direct_transfer: Option<ResultSummary>,
    /// Adaptation reports in variant order.
    pub variants: Vec<AdaptReport>,
}

/// A median row of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TableRow {
    pub method: String,
    /// Expert name, `mean` or `ensemble`.
    pub expert: String,
    pub map: f64,
    pub cmc1: f64,
    pub cmc5: f64,
    pub cmc10: f64,
    pub seeds: usize,
}

#[derive(Clone, Debug, Default)]
pub struct SweepOutcome {
    pub runs: Vec<SeedRuns>,
    pub table: Vec<TableRow>,
    /// Median over seeds of the mean expert mAP at every epoch, per variant.
    pub curves: BTreeMap<String, Vec<f64>>,
}

impl SweepOutcome {
    /// Median mean-expert mAP of a method over seeds.
    pub fn median_map(&self, method: &str) -> Option<f64> {
        self.table
            .iter()
            .find(|r| r.method == method && r.expert == "mean")
            .map(|r| r.map)
    }
}

/// Median of a non-empty list; the mean of the middle pair for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn median_rows(method: &str, results: &[ResultSummary]) -> Vec<TableRow> {
    if results.is_empty() {
        return Vec::new();
    }
    let row = |expert: &str, pick: &dyn Fn(&ResultSummary) -> EvalSummary| {
        let items: Vec<EvalSummary> = results.iter().map(pick).collect();
        let col = |f: fn(&EvalSummary) -> f64| median(&items.iter().map(f).collect::<Vec<_>>());
        TableRow {
            method: method.to_string(),
            expert: expert.to_string(),
            map: col(|e| e.map),
            cmc1: col(|e| e.cmc1),
            cmc5: col(|e| e.cmc5),
            cmc10: col(|e| e.cmc10),
            seeds: results.len(),
        }
    };
    let mut rows: Vec<TableRow> = results[0]
        .experts
        .iter()
        .enumerate()
        .map(|(k, (name, _))| row(name, &|r: &ResultSummary| r.experts[k].1))
        .collect();
    rows.push(row("mean", &|r| r.mean));
    rows.push(row("ensemble", &|r| r.ensemble));
    rows
}

fn write_table_csv(path: &Path, rows: &[TableRow]) -> Result<()> {
    let mut text = String::from("method,expert,map,cmc1,cmc5,cmc10,seeds\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{:.4},{:.4},{:.4},{:.4},{}\n",
            r.method, r.expert, r.map, r.cmc1, r.cmc5, r.cmc10, r.seeds
        ));
    }
    write_file(path, text)
}

fn write_sweep_curves(path: &Path, curves: &BTreeMap<String, Vec<f64>>, order: &[String]) -> Result<()> {
    let mut text = String::from("epoch,variant,map\n");
    for name in order {
        if let Some(c) = curves.get(name) {
            for (epoch, m) in c.iter().enumerate() {
                text.push_str(&format!("{epoch},{name},{m:.6}\n"));
            }
        }
    }
    write_file(path, text)
}

fn run_seed(cfg: &ExperimentConfig, out: &Path, ablations: &[Ablation], pool: &rayon::ThreadPool) -> Result<SeedRuns> {
    let seed = cfg.seed;
    let seed_dir = out.join(format!("seed-{seed}"));
    prepare_run_dir(&seed_dir, cfg, "sweep")?;
    let (source, target) = generate(&cfg.generator)?;
    let mut experts = build_experts(&cfg.experts, source.dim, source.num_identities, seed)?;
    let log = pretrain_source(&mut experts, &source, &cfg.pretrain, seed);
    let log = dump_on_divergence(log, &seed_dir, &experts)?;
    write_lines(&seed_dir.join("pretrain_metrics.jsonl"), &pretrain_metric_lines(&log, seed))?;

    let (per, ens) = evaluate_experts(&experts, EVAL_PARAMS, &target)?;
    let direct = ResultSummary::from_reports("direct_transfer", seed, &experts, &per, &ens);
    info!("seed {seed}: direct transfer mAP {:.4}", direct.mean.map);

    let supervised = if cfg.sweep.supervised {
        let mut sup = build_experts(&cfg.experts, target.dim, target.num_identities, seed)?;
        pretrain_source(&mut sup, &target, &cfg.pretrain, seed)?;
        let (per, ens) = evaluate_experts(&sup, EVAL_PARAMS, &target)?;
        let s = ResultSummary::from_reports("supervised", seed, &sup, &per, &ens);
        info!("seed {seed}: supervised mAP {:.4}", s.mean.map);
        Some(s)
    } else {
        None
    };

    let variants = pool.install(|| {
        ablations
            .par_iter()
            .map(|ab| {
                let mut run_cfg = cfg.clone();
                run_cfg.adapt.ablation = *ab;
                let mut models = experts.clone();
                let dir = adapt_dir(&seed_dir, ab);
                let report = adapt_into(&run_cfg, &target, &mut models, &dir, false)?;
                info!(
                    "seed {seed}: {} final mAP {:.4}",
                    report.variant,
                    report.epochs.last().map(|r| r.mean_map()).unwrap_or(f64::NAN)
                );
                Ok(report)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(SeedRuns {
        seed,
        supervised,
        direct_transfer: Some(direct),
        variants,
    })
}

/// Runs every configured variant for every sweep seed and writes
/// `table.csv` (medians over seeds) and `curve.csv` (median curves).
/// `parallel` variants run at once; each has its own directory.
pub fn run_sweep(cfg: &ExperimentConfig, out: &Path, parallel: usize) -> Result<SweepOutcome> {
    let ablations = cfg.sweep.ablations()?;
    prepare_run_dir(out, cfg, "sweep")?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {parallel} workers: {e}")))?;
    let mut runs = Vec::with_capacity(cfg.sweep.seeds.len());
    for &seed in &cfg.sweep.seeds {
        runs.push(run_seed(&cfg.with_seed(seed), out, &ablations, &pool)?);
    }

    let mut table = Vec::new();
    let collect = |f: &dyn Fn(&SeedRuns) -> Option<ResultSummary>| runs.iter().filter_map(f).collect::<Vec<_>>();
    table.extend(median_rows("supervised", &collect(&|r| r.supervised.clone())));
    table.extend(median_rows("direct_transfer", &collect(&|r| r.direct_transfer.clone())));
    let mut order = Vec::new();
    let mut curves = BTreeMap::new();
    for (v, ab) in ablations.iter().enumerate() {
        let tag = ab.tag();
        let finals = runs
            .iter()
            .map(|r| ResultSummary::from_adapt(&r.variants[v], r.seed))
            .collect::<Result<Vec<_>>>()?;
        table.extend(median_rows(&tag, &finals));
        let epochs = runs.iter().map(|r| r.variants[v].epochs.len()).min().unwrap_or(0);
        let curve = (0..epochs)
            .map(|e| median(&runs.iter().map(|r| r.variants[v].epochs[e].mean_map()).collect::<Vec<_>>()))
            .collect();
        curves.insert(tag.clone(), curve);
        order.push(tag);
    }
    write_table_csv(&out.join(TABLE_FILE), &table)?;
    write_sweep_curves(&out.join(CURVE_FILE), &curves, &order)?;
    info!("sweep table written to {}", out.join(TABLE_FILE).display());
    Ok(SweepOutcome { runs, table, curves })
}
