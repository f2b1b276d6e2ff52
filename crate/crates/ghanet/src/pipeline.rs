//! What each subcommand does, as library calls. Every artifact lands in the
//! context's output directory under a fixed name.

use std::fmt::Display;
use std::path::{Path, PathBuf};

use ghanet_core::data::{Cohort, CATEGORY_COUNT};
use ghanet_core::evaluation::{km_curve, CategoryCorrelation, KmStep, LogRank};
use ghanet_core::folds::make_folds;
use ghanet_core::genes::{differential_select, GeneSelection};
use ghanet_core::gradcheck::{block_suite, GradCheckReport};
use ghanet_core::math::mean_std;
use ghanet_core::model::{Associations, Variant};
use ghanet_core::synth::{generate, PlantedTruth, MALIGNANT};
use ghanet_core::train::{
    concordance, fold_seed, predict, reconstruction_report, risk_split, run_fold, train as fit,
    CrossValidation, PatientPrediction, RiskSplit, TrainConfig, TrainedModel,
};
use serde::Serialize;

use crate::bag::read_bag;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::export;
use crate::manifest::{load_cohort, write_cohort, write_json, write_text, Genomics};

/// Largest relative error `grad-check` accepts.
pub const GRAD_TOLERANCE: f64 = 1e-4;

pub struct Context {
    pub config: RunConfig,
    pub out_dir: PathBuf,
    /// Progress notes on stderr.
    pub verbose: bool,
}

impl Context {
    pub fn new(config: RunConfig, out_dir: impl Into<PathBuf>) -> Self {
        Context {
            config,
            out_dir: out_dir.into(),
            verbose: false,
        }
    }

    fn note(&self, msg: impl Display) {
        if self.verbose {
            eprintln!("{msg}");
        }
    }

    fn path(&self, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))?;
        Ok(self.out_dir.join(name))
    }

    fn write(&self, name: &str, text: &str) -> Result<String> {
        write_text(&self.path(name)?, text)?;
        Ok(name.into())
    }
}

fn genomics_for(config: &TrainConfig) -> Genomics {
    if config.variant == Variant::GatedBaseline {
        Genomics::Skip
    } else {
        Genomics::Load
    }
}

/// Reads the manifest, or generates the configured synthetic cohort.
pub fn cohort(ctx: &Context, manifest: Option<&Path>, genomics: Genomics) -> Result<Cohort> {
    match manifest {
        Some(path) => load_cohort(path, genomics),
        None => {
            let (mut cohort, _) = generate(&ctx.config.synth, ctx.config.train.seed)?;
            if genomics == Genomics::Skip {
                for p in &mut cohort.patients {
                    p.genomics = None;
                }
                cohort.gene_ids = Default::default();
            }
            Ok(cohort)
        }
    }
}

fn ids(cohort: &Cohort, indices: &[usize]) -> Vec<String> {
    indices.iter().map(|&i| cohort.patients[i].id().to_string()).collect()
}

/// Training and validation indices: fold `f` of the seeded split, or every
/// patient for training when no fold is named.
fn split(cohort: &Cohort, config: &TrainConfig, fold: Option<usize>) -> Result<(Vec<usize>, Vec<usize>)> {
    match fold {
        None => Ok(((0..cohort.len()).collect(), Vec::new())),
        Some(f) if f >= config.folds => Err(Error::Invalid(format!(
            "fold {f} does not exist; folds are 0..{}",
            config.folds
        ))),
        Some(f) => {
            let mut folds = make_folds(&cohort.survivals(), config.folds, config.seed)?;
            let chosen = folds.swap_remove(f);
            Ok((chosen.train, chosen.validation))
        }
    }
}

pub struct SynthOutput {
    pub manifest: PathBuf,
    pub cohort: Cohort,
    pub truth: PlantedTruth,
}

/// Writes the synthetic cohort plus `planted.tsv` with each patient's
/// planted log-hazard and malignant share.
pub fn synth(ctx: &Context) -> Result<SynthOutput> {
    let (cohort, truth) = generate(&ctx.config.synth, ctx.config.train.seed)?;
    std::fs::create_dir_all(&ctx.out_dir).map_err(|e| Error::io(&ctx.out_dir, e))?;
    let manifest = write_cohort(&ctx.out_dir, &cohort)?;
    let mut planted = String::from("patient_id\tplanted_risk\tmalignant_share\n");
    for (i, p) in cohort.patients.iter().enumerate() {
        planted.push_str(&format!("{}\t{}\t{}\n", p.id(), truth.risks[i], truth.mixtures[i][MALIGNANT]));
    }
    ctx.write("planted.tsv", &planted)?;
    Ok(SynthOutput {
        manifest,
        cohort,
        truth,
    })
}

/// Differential selection on the training patients of `fold` (all
/// patients when `None`); writes `selection.tsv`.
pub fn select_genes(ctx: &Context, manifest: Option<&Path>, fold: Option<usize>) -> Result<GeneSelection> {
    let cohort = cohort(ctx, manifest, Genomics::Load)?;
    let (train, _) = split(&cohort, &ctx.config.train, fold)?;
    let profiles = train
        .iter()
        .map(|&i| {
            cohort.patients[i]
                .genomics
                .as_ref()
                .ok_or_else(|| Error::Invalid(format!("patient {} has no genomic profile", cohort.patients[i].id())))
        })
        .collect::<Result<Vec<_>>>()?;
    let survivals: Vec<_> = train.iter().map(|&i| cohort.patients[i].survival).collect();
    let selection = differential_select(&profiles, &survivals, &ctx.config.train.selection)?;
    ctx.write("selection.tsv", &export::selection_tsv(&selection, &cohort.gene_ids))?;
    Ok(selection)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainMetrics {
    pub command: &'static str,
    pub variant: Variant,
    pub fold: Option<usize>,
    pub train_patients: usize,
    pub validation_patients: usize,
    pub final_loss: f64,
    pub c_index: Option<f64>,
    pub checkpoint: String,
    pub loss_trace: String,
    pub predictions: Option<String>,
}

/// Fits one model. With a fold, trains on its training split exactly as
/// cross-validation would and scores its validation split.
pub fn train(ctx: &Context, manifest: Option<&Path>, fold: Option<usize>) -> Result<(TrainMetrics, TrainedModel)> {
    let config = &ctx.config.train;
    let cohort = cohort(ctx, manifest, genomics_for(config))?;
    let (train_idx, validation) = split(&cohort, config, fold)?;
    let seed = fold.map_or(config.seed, |f| fold_seed(config.seed, f));
    ctx.note(format_args!("training on {} patients", train_idx.len()));
    let trained = fit(config, &cohort, &train_idx, seed)?;
    let checkpoint = Checkpoint::new(&trained, config, &cohort.gene_ids, fold, ids(&cohort, &train_idx));
    checkpoint.save(&ctx.path("model.ghck")?)?;
    let loss_trace = ctx.write("loss_trace.tsv", &export::loss_trace_tsv(&trained.loss_trace))?;
    let (c_index, predictions) = if validation.is_empty() {
        (None, None)
    } else {
        let preds = predict(&trained, &cohort, &validation)?;
        let rows: Vec<_> = preds.iter().map(|p| (fold, p)).collect();
        let name = ctx.write("predictions.tsv", &export::predictions_tsv(&rows))?;
        (Some(concordance(&preds)?), Some(name))
    };
    let metrics = TrainMetrics {
        command: "train",
        variant: config.variant,
        fold,
        train_patients: train_idx.len(),
        validation_patients: validation.len(),
        final_loss: trained.loss_trace.last().map_or(f64::NAN, |l| l.total),
        c_index,
        checkpoint: "model.ghck".into(),
        loss_trace,
        predictions,
    };
    write_json(&ctx.path("train.json")?, &metrics)?;
    Ok((metrics, trained))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategorySummary {
    pub category: String,
    pub patients: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

fn summarize(report: &[CategoryCorrelation]) -> Vec<CategorySummary> {
    let finite = |v: f64| v.is_finite().then_some(v);
    report
        .iter()
        .map(|r| CategorySummary {
            category: ghanet_core::data::CATEGORY_NAMES[r.category].into(),
            patients: r.values.len(),
            mean: finite(r.mean),
            std: finite(r.std),
        })
        .collect()
}

/// Concatenates per-patient coefficients across reports (folds).
pub fn pool_correlations(reports: &[Vec<CategoryCorrelation>]) -> Vec<CategoryCorrelation> {
    (0..CATEGORY_COUNT)
        .map(|c| {
            let values: Vec<f64> = reports.iter().flat_map(|r| r[c].values.iter().copied()).collect();
            let notes: Vec<&str> = reports.iter().filter_map(|r| r[c].note.as_deref()).collect();
            let (mean, std) = if values.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                mean_std(&values)
            };
            CategoryCorrelation {
                category: c,
                values,
                mean,
                std,
                note: (!notes.is_empty()).then(|| notes.join("; ")),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct KmMetrics {
    pub patients: usize,
    pub high_risk: usize,
    pub low_risk: usize,
    pub logrank_statistic: f64,
    pub logrank_p: f64,
}

fn km_groups(predictions: &[&PatientPrediction]) -> Result<(RiskSplit, Vec<KmStep>, Vec<KmStep>)> {
    let owned: Vec<PatientPrediction> = predictions.iter().map(|&p| p.clone()).collect();
    let split = risk_split(&owned)?;
    let curve = |idx: &[usize]| km_curve(&idx.iter().map(|&i| owned[i].outcome).collect::<Vec<_>>());
    let (high, low) = (curve(&split.high), curve(&split.low));
    Ok((split, high, low))
}

fn km_metrics(n: usize, split: &RiskSplit) -> KmMetrics {
    let LogRank { statistic, p } = split.log_rank;
    KmMetrics {
        patients: n,
        high_risk: split.high.len(),
        low_risk: split.low.len(),
        logrank_statistic: statistic,
        logrank_p: p,
    }
}

/// Median-risk split of saved predictions; writes `km.tsv` and `km.json`.
pub fn km(ctx: &Context, predictions: &Path) -> Result<KmMetrics> {
    let text = std::fs::read_to_string(predictions).map_err(|e| Error::io(predictions, e))?;
    let preds = export::parse_predictions(&text).map_err(|e| Error::format(predictions, e))?;
    let refs: Vec<&PatientPrediction> = preds.iter().collect();
    let (split, high, low) = km_groups(&refs)?;
    ctx.write("km.tsv", &export::km_tsv(&[("high", &high), ("low", &low)]))?;
    let metrics = km_metrics(preds.len(), &split);
    write_json(&ctx.path("km.json")?, &metrics)?;
    Ok(metrics)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalMetrics {
    pub command: &'static str,
    pub patients: usize,
    pub c_index: f64,
    pub km: KmMetrics,
    pub spearman: Option<Vec<CategorySummary>>,
    pub exports: Vec<String>,
}

/// Slide-only evaluation. Genomics files are opened only when `spearman`
/// asks for the reconstruction report. A checkpoint trained on a fold is
/// scored on that fold's validation patients unless `all` is set.
pub fn eval(
    ctx: &Context,
    manifest: Option<&Path>,
    checkpoint: &Path,
    all: bool,
    spearman: bool,
) -> Result<EvalMetrics> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let trained = ckpt.trained();
    let genomics = if spearman { Genomics::Load } else { Genomics::Skip };
    let cohort = cohort(ctx, manifest, genomics)?;
    let indices = match ckpt.meta.fold {
        Some(f) if !all => split(&cohort, &ckpt.meta.train, Some(f))?.1,
        _ => (0..cohort.len()).collect(),
    };
    let preds = predict(&trained, &cohort, &indices)?;
    let c_index = concordance(&preds)?;
    let refs: Vec<&PatientPrediction> = preds.iter().collect();
    let (split, high, low) = km_groups(&refs)?;
    let rows: Vec<_> = preds.iter().map(|p| (ckpt.meta.fold, p)).collect();
    let mut exports = vec![
        ctx.write("predictions.tsv", &export::predictions_tsv(&rows))?,
        ctx.write("km.tsv", &export::km_tsv(&[("high", &high), ("low", &low)]))?,
    ];
    let spearman = if spearman {
        let report = reconstruction_report(&trained, &cohort, &indices)?;
        exports.push(ctx.write("spearman.tsv", &export::spearman_tsv(&report))?);
        Some(summarize(&report))
    } else {
        None
    };
    let metrics = EvalMetrics {
        command: "eval",
        patients: preds.len(),
        c_index,
        km: km_metrics(preds.len(), &split),
        spearman,
        exports,
    };
    write_json(&ctx.path("eval.json")?, &metrics)?;
    Ok(metrics)
}

#[derive(Debug, Clone, Serialize)]
pub struct CvMetrics {
    pub command: &'static str,
    pub variant: Variant,
    pub patients: usize,
    /// Mean over folds.
    pub c_index: f64,
    /// Sample standard deviation over folds.
    pub c_index_std: f64,
    pub per_fold: Vec<f64>,
    /// Median-risk split of the pooled held-out predictions.
    pub logrank_p: f64,
    pub logrank_statistic: f64,
    pub spearman: Option<Vec<CategorySummary>>,
    pub exports: CvExports,
}

#[derive(Debug, Clone, Serialize)]
pub struct CvExports {
    pub predictions: String,
    pub km: String,
    pub spearman: Option<String>,
    pub checkpoints: Vec<String>,
}

pub struct CvOutput {
    pub metrics: CvMetrics,
    pub cv: CrossValidation,
    pub cohort: Cohort,
    /// Pooled held-out reconstruction correlations, when the variant
    /// reconstructs genes.
    pub spearman: Option<Vec<CategoryCorrelation>>,
    pub split: RiskSplit,
}

fn run_folds(ctx: &Context, config: &TrainConfig, cohort: &Cohort) -> Result<CrossValidation> {
    config.validate()?;
    cohort.validate()?;
    let folds = make_folds(&cohort.survivals(), config.folds, config.seed)?;
    let mut results = Vec::with_capacity(folds.len());
    for (i, fold) in folds.into_iter().enumerate() {
        let r = run_fold(config, cohort, fold, i)?;
        ctx.note(format_args!("fold {}: c-index {:.4}", i + 1, r.c_index));
        results.push(r);
    }
    let cs: Vec<f64> = results.iter().map(|r| r.c_index).collect();
    let (mean, std) = mean_std(&cs);
    Ok(CrossValidation {
        folds: results,
        mean,
        std,
    })
}

/// k-fold cross-validation with per-fold checkpoints, pooled held-out
/// predictions, their KM split and, when available, reconstruction
/// correlations.
pub fn cross_validate(ctx: &Context, manifest: Option<&Path>) -> Result<CvOutput> {
    let config = &ctx.config.train;
    let cohort = cohort(ctx, manifest, genomics_for(config))?;
    let cv = run_folds(ctx, config, &cohort)?;

    let mut checkpoints = Vec::new();
    for (i, f) in cv.folds.iter().enumerate() {
        let name = format!("fold{i}.ghck");
        Checkpoint::new(&f.trained, config, &cohort.gene_ids, Some(i), ids(&cohort, &f.fold.train))
            .save(&ctx.path(&name)?)?;
        checkpoints.push(name);
    }

    let fold_of = |patient: usize| cv.folds.iter().position(|f| f.fold.validation.contains(&patient));
    let pooled = cv.pooled_predictions();
    let rows: Vec<_> = pooled.iter().map(|&(i, p)| (fold_of(i), p)).collect();
    let predictions = ctx.write("predictions.tsv", &export::predictions_tsv(&rows))?;
    let refs: Vec<&PatientPrediction> = pooled.iter().map(|&(_, p)| p).collect();
    let (split, high, low) = km_groups(&refs)?;
    let km = ctx.write("km.tsv", &export::km_tsv(&[("high", &high), ("low", &low)]))?;

    let spearman = if config.variant == Variant::GatedBaseline {
        None
    } else {
        let reports = cv
            .folds
            .iter()
            .map(|f| reconstruction_report(&f.trained, &cohort, &f.fold.validation))
            .collect::<ghanet_core::Result<Vec<_>>>()?;
        Some(pool_correlations(&reports))
    };
    let spearman_file = match &spearman {
        Some(report) => Some(ctx.write("spearman.tsv", &export::spearman_tsv(report))?),
        None => None,
    };

    let metrics = CvMetrics {
        command: "cross-validate",
        variant: config.variant,
        patients: cohort.len(),
        c_index: cv.mean,
        c_index_std: cv.std,
        per_fold: cv.c_indices(),
        logrank_p: split.log_rank.p,
        logrank_statistic: split.log_rank.statistic,
        spearman: spearman.as_deref().map(summarize),
        exports: CvExports {
            predictions,
            km,
            spearman: spearman_file,
            checkpoints,
        },
    };
    write_json(&ctx.path("metrics.json")?, &metrics)?;
    Ok(CvOutput {
        metrics,
        cv,
        cohort,
        spearman,
        split,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub k_percent: f64,
    pub mean: f64,
    pub std: f64,
    pub per_fold: Vec<f64>,
}

/// Cross-validates once per configured k; writes `sweep_k.tsv`.
pub fn sweep_k(ctx: &Context, manifest: Option<&Path>) -> Result<Vec<SweepRow>> {
    let cohort = cohort(ctx, manifest, genomics_for(&ctx.config.train))?;
    let mut rows = Vec::new();
    for &k in &ctx.config.sweep.k_percent {
        let config = TrainConfig {
            k_percent: k,
            ..ctx.config.train.clone()
        };
        ctx.note(format_args!("k = {k}%"));
        let cv = run_folds(ctx, &config, &cohort)?;
        rows.push(SweepRow {
            k_percent: k,
            mean: cv.mean,
            std: cv.std,
            per_fold: cv.c_indices(),
        });
    }
    let folds = ctx.config.train.folds;
    let mut text = String::from("k_percent\tc_index_mean\tc_index_std");
    for f in 1..=folds {
        text.push_str(&format!("\tfold_{f}"));
    }
    text.push('\n');
    for r in &rows {
        text.push_str(&format!("{}\t{}\t{}", r.k_percent, r.mean, r.std));
        for c in &r.per_fold {
            text.push_str(&format!("\t{c}"));
        }
        text.push('\n');
    }
    ctx.write("sweep_k.tsv", &text)?;
    Ok(rows)
}

/// Association matrices for one bag; writes `associations.tsv`.
pub fn export_assoc(ctx: &Context, checkpoint: &Path, bag: &Path) -> Result<Associations> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let features = read_bag(bag)?;
    let assoc = ckpt
        .model
        .associations(&features)?
        .ok_or_else(|| Error::Invalid("this checkpoint's variant has no association matrix".into()))?;
    ctx.write("associations.tsv", &export::associations_tsv(&assoc))?;
    Ok(assoc)
}

/// Finite-difference check of every block; writes `grad_check.tsv`.
/// Callers compare against [`GRAD_TOLERANCE`].
pub fn grad_check(ctx: &Context) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let suite = block_suite(ctx.config.train.seed)?;
    let mut text = String::from("block\tmax_rel_error\tworst_param\tworst_index\tchecked\n");
    for (name, r) in &suite {
        text.push_str(&format!(
            "{name}\t{}\t{}\t{}\t{}\n",
            r.max_rel_error, r.worst_param, r.worst_index, r.checked
        ));
    }
    ctx.write("grad_check.tsv", &text)?;
    Ok(suite)
}
