//! Accuracy reports, confusion matrices, baselines, cross-dataset grids and ablations.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{EmbeddingDataset, PromptBank};
use crate::error::{Error, Result};
use crate::heads::{ContrastiveHead, CrossEntropyHead, Head, HeadKind};
use crate::inference::{
    classify_ce_batch, classify_contrastive_batch, classify_zeroshot_batch, Prediction,
};
use crate::taxonomy::{Level, Taxonomy};
use crate::trainer::{train, CaptionType, ClassCaptions, TrainConfig, TrainData};

/// Rows are ground truth, columns are predictions, both in `classes` order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// Header row of class names, then one integer row per ground-truth class.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(
            &self
                .classes
                .iter()
                .map(|c| csv_field(c))
                .collect::<Vec<_>>()
                .join(","),
        );
        out.push('\n');
        for row in &self.counts {
            out.push_str(&row.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
            out.push('\n');
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRecall {
    pub class: String,
    pub support: u64,
    /// None when the class never occurs in the labels.
    pub recall: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    pub random: f64,
    pub majority: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub model: String,
    pub level: Level,
    /// Number of classes at `level`: 2, 6, 25 for the default taxonomy.
    pub n_classes: usize,
    pub accuracy: f64,
    pub n_samples: usize,
    pub per_class: Vec<ClassRecall>,
    pub confusion: ConfusionMatrix,
    pub baselines: Baselines,
}

/// Rolls predictions and labels to `level` and tallies them.
pub fn evaluate(
    predictions: &[Prediction],
    labels: &[String],
    tax: &Taxonomy,
    level: Level,
    dataset: &str,
    model: &str,
) -> Result<EvalReport> {
    if predictions.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            actual: predictions.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput);
    }
    let truth = labels
        .iter()
        .map(|l| tax.rollup(l, level).map(str::to_string))
        .collect::<Result<Vec<_>>>()?;

    let mut classes: IndexMap<String, usize> = IndexMap::new();
    for c in tax.level_classes(level) {
        let n = classes.len();
        classes.insert(c.to_string(), n);
    }
    let n_classes = classes.len();
    for p in predictions {
        let name = p.at_level(level);
        if !classes.contains_key(name) {
            let n = classes.len();
            classes.insert(name.to_string(), n);
        }
    }

    let k = classes.len();
    let mut counts = vec![vec![0u64; k]; k];
    let mut correct = 0usize;
    for (p, t) in predictions.iter().zip(&truth) {
        let pred = p.at_level(level);
        counts[classes[t.as_str()]][classes[pred]] += 1;
        if pred == t {
            correct += 1;
        }
    }
    let classes: Vec<String> = classes.into_keys().collect();
    let per_class = classes
        .iter()
        .enumerate()
        .take(n_classes)
        .map(|(i, c)| {
            let support: u64 = counts[i].iter().sum();
            ClassRecall {
                class: c.clone(),
                support,
                recall: (support > 0).then(|| counts[i][i] as f64 / support as f64),
            }
        })
        .collect();

    Ok(EvalReport {
        dataset: dataset.to_string(),
        model: model.to_string(),
        level,
        n_classes,
        accuracy: correct as f64 / labels.len() as f64,
        n_samples: labels.len(),
        per_class,
        confusion: ConfusionMatrix { classes, counts },
        baselines: Baselines {
            random: baseline(labels, tax, level, BaselineKind::Random)?,
            majority: baseline(labels, tax, level, BaselineKind::Majority)?,
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Random,
    Majority,
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_lowercase().as_str() {
            "random" => Ok(BaselineKind::Random),
            "majority" => Ok(BaselineKind::Majority),
            other => Err(Error::InvalidConfig(format!("unknown baseline {other:?}"))),
        }
    }
}

/// Random is the analytic 1/K; majority is the modal class frequency.
pub fn baseline(
    labels: &[String],
    tax: &Taxonomy,
    level: Level,
    kind: BaselineKind,
) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptyInput);
    }
    let rolled = labels
        .iter()
        .map(|l| tax.rollup(l, level))
        .collect::<Result<Vec<_>>>()?;
    match kind {
        BaselineKind::Random => Ok(random_baseline(tax, level)),
        BaselineKind::Majority => {
            let mut freq: HashMap<&str, usize> = HashMap::new();
            for r in rolled {
                *freq.entry(r).or_default() += 1;
            }
            let top = freq.values().copied().max().unwrap_or(0);
            Ok(top as f64 / labels.len() as f64)
        }
    }
}

pub fn random_baseline(tax: &Taxonomy, level: Level) -> f64 {
    1.0 / tax.level_classes(level).len() as f64
}

/// Percentage truncated (not rounded) to two decimals: 1/6 → "16.66".
pub fn format_percent(fraction: f64) -> String {
    let hundredths = (fraction * 10_000.0 + 1e-7).floor();
    format!("{:.2}", hundredths / 100.0)
}

/// A model to run against other datasets.
#[derive(Clone, Copy, Debug)]
pub enum ModelSpec<'a> {
    ZeroShot,
    Contrastive(&'a ContrastiveHead),
    CrossEntropy {
        head: &'a CrossEntropyHead,
        taxonomy: &'a Taxonomy,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellStatus {
    #[serde(rename = "ok")]
    Ok,
    X,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossDatasetRecord {
    pub model: String,
    pub dataset: String,
    pub level: Level,
    pub n_classes: usize,
    pub status: CellStatus,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reason: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub report: Option<EvalReport>,
}

impl CrossDatasetRecord {
    pub fn cell(&self) -> String {
        match (&self.status, &self.report) {
            (CellStatus::Ok, Some(r)) => format_percent(r.accuracy),
            _ => "X".to_string(),
        }
    }
}

fn same_class_set(a: &Taxonomy, b: &Taxonomy, level: Level) -> bool {
    let a: BTreeSet<&str> = a.level_classes(level).into_iter().collect();
    let b: BTreeSet<&str> = b.level_classes(level).into_iter().collect();
    a == b
}

/// A classifier head trained on `model_tax` can be scored on `target_tax` at
/// `level` when the taxonomies are identical or share that level's class set
/// (predictions are then rolled up in the model's taxonomy).
pub fn ce_computable(model_tax: &Taxonomy, target_tax: &Taxonomy, level: Level) -> bool {
    model_tax.fingerprint() == target_tax.fingerprint()
        || same_class_set(model_tax, target_tax, level)
}

/// Predictions for every row of `target`. Bank-based specs classify in the
/// target taxonomy, a classifier head in its own.
pub fn predict(
    spec: ModelSpec<'_>,
    target: &EmbeddingDataset,
    target_tax: &Taxonomy,
    bank: Option<&PromptBank>,
) -> Result<Vec<Prediction>> {
    let missing_bank = || Error::InvalidConfig("missing bank embeddings".into());
    match spec {
        ModelSpec::ZeroShot => {
            classify_zeroshot_batch(target.vectors(), bank.ok_or_else(missing_bank)?, target_tax)
        }
        ModelSpec::Contrastive(head) => classify_contrastive_batch(
            head,
            target.vectors(),
            bank.ok_or_else(missing_bank)?,
            target_tax,
        ),
        ModelSpec::CrossEntropy { head, taxonomy } => {
            classify_ce_batch(head, target.vectors(), taxonomy)
        }
    }
}

/// Evaluates `spec` on a target dataset; a classifier head that is not
/// [`ce_computable`] yields a record with status "X" instead of a report.
pub fn cross_dataset_run(
    model_name: &str,
    spec: ModelSpec<'_>,
    dataset_name: &str,
    target: &EmbeddingDataset,
    target_tax: &Taxonomy,
    bank: Option<&PromptBank>,
    level: Level,
) -> Result<CrossDatasetRecord> {
    if let ModelSpec::CrossEntropy { taxonomy, .. } = spec {
        if !ce_computable(taxonomy, target_tax, level) {
            return Ok(not_computable(
                model_name,
                dataset_name,
                taxonomy,
                target_tax,
                level,
            ));
        }
    }
    let predictions = predict(spec, target, target_tax, bank)?;
    scored_record(
        model_name,
        dataset_name,
        &predictions,
        target,
        target_tax,
        level,
    )
}

pub fn not_computable(
    model_name: &str,
    dataset_name: &str,
    model_tax: &Taxonomy,
    target_tax: &Taxonomy,
    level: Level,
) -> CrossDatasetRecord {
    let n_classes = target_tax.level_classes(level).len();
    CrossDatasetRecord {
        model: model_name.to_string(),
        dataset: dataset_name.to_string(),
        level,
        n_classes,
        status: CellStatus::X,
        reason: Some(format!(
            "taxonomy mismatch: model has {} {} classes, target has {}",
            model_tax.level_classes(level).len(),
            level.name(),
            n_classes
        )),
        report: None,
    }
}

pub fn scored_record(
    model_name: &str,
    dataset_name: &str,
    predictions: &[Prediction],
    target: &EmbeddingDataset,
    target_tax: &Taxonomy,
    level: Level,
) -> Result<CrossDatasetRecord> {
    let labels = target.labels(target_tax)?;
    let report = evaluate(
        predictions,
        &labels,
        target_tax,
        level,
        dataset_name,
        model_name,
    )?;
    Ok(CrossDatasetRecord {
        model: model_name.to_string(),
        dataset: dataset_name.to_string(),
        level,
        n_classes: report.n_classes,
        status: CellStatus::Ok,
        reason: None,
        report: Some(report),
    })
}

/// Models as rows, `dataset (K)` as columns, cells as truncated percentages or "X".
pub fn comparison_grid_csv(records: &[CrossDatasetRecord]) -> String {
    let mut rows: IndexMap<&str, HashMap<String, String>> = IndexMap::new();
    let mut columns: IndexMap<String, ()> = IndexMap::new();
    for r in records {
        let col = format!("{} ({})", r.dataset, r.n_classes);
        columns.insert(col.clone(), ());
        rows.entry(&r.model).or_default().insert(col, r.cell());
    }
    let mut out = String::from("model");
    for c in columns.keys() {
        out.push(',');
        out.push_str(&csv_field(c));
    }
    out.push('\n');
    for (model, cells) in rows {
        out.push_str(&csv_field(model));
        for c in columns.keys() {
            out.push(',');
            out.push_str(cells.get(c).map(String::as_str).unwrap_or(""));
        }
        out.push('\n');
    }
    out
}

pub fn ablation_subsets() -> Vec<BTreeSet<CaptionType>> {
    use CaptionType::*;
    vec![
        [Sc].into(),
        [Ic].into(),
        [Sc, Ic].into(),
        [Sc, Ssc].into(),
        [Sc, Ic, Ssc].into(),
    ]
}

/// Splits and banks shared by every ablation row.
#[derive(Clone, Copy, Debug)]
pub struct AblationData<'a> {
    pub dataset: &'a str,
    pub train: &'a TrainData,
    pub val: &'a TrainData,
    pub test: &'a EmbeddingDataset,
    pub captions: &'a ClassCaptions,
    /// Bank used for inference, normally SC prompts only.
    pub bank: &'a PromptBank,
    pub taxonomy: &'a Taxonomy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub caption_types: BTreeSet<CaptionType>,
    pub reports: Vec<EvalReport>,
}

impl AblationRow {
    pub fn model_name(&self) -> String {
        format!(
            "CLIP-E Contrastive ({})",
            CaptionType::format_set(&self.caption_types)
        )
    }
}

/// One contrastive head per subset, identical config and seed otherwise.
pub fn ablation_run(
    subsets: &[BTreeSet<CaptionType>],
    cfg: &TrainConfig,
    data: &AblationData<'_>,
    levels: &[Level],
) -> Result<Vec<AblationRow>> {
    if subsets.iter().any(BTreeSet::is_empty) {
        return Err(Error::InvalidConfig("empty caption subset".into()));
    }
    let labels = data.test.labels(data.taxonomy)?;
    subsets
        .par_iter()
        .map(|subset| {
            let mut cfg = cfg.clone();
            cfg.head = HeadKind::Contrastive;
            cfg.caption_types = subset.clone();
            let outcome = train(
                data.train,
                data.val,
                Some(data.captions),
                data.taxonomy,
                &cfg,
            )?;
            let Head::Contrastive(head) = outcome.head else {
                unreachable!("contrastive config yields a contrastive head")
            };
            let preds =
                classify_contrastive_batch(&head, data.test.vectors(), data.bank, data.taxonomy)?;
            let row = AblationRow {
                caption_types: subset.clone(),
                reports: Vec::new(),
            };
            let name = row.model_name();
            let reports = levels
                .iter()
                .map(|&l| evaluate(&preds, &labels, data.taxonomy, l, data.dataset, &name))
                .collect::<Result<Vec<_>>>()?;
            Ok(AblationRow { reports, ..row })
        })
        .collect()
}

pub fn ablation_records(rows: &[AblationRow]) -> Vec<CrossDatasetRecord> {
    rows.iter()
        .flat_map(|row| {
            row.reports.iter().map(move |r| CrossDatasetRecord {
                model: row.model_name(),
                dataset: r.dataset.clone(),
                level: r.level,
                n_classes: r.n_classes,
                status: CellStatus::Ok,
                reason: None,
                report: Some(r.clone()),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatSummary {
    pub values: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub sd: f64,
}

impl RepeatSummary {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput);
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Ok(Self { values, mean, sd })
    }
}

impl fmt::Display for RepeatSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} ± {}",
            format_percent(self.mean),
            format_percent(self.sd)
        )
    }
}

/// Runs `f` once per seed and aggregates.
pub fn repeat_over_seeds<F>(seeds: &[u64], f: F) -> Result<RepeatSummary>
where
    F: Fn(u64) -> Result<f64> + Sync,
{
    let values = seeds
        .par_iter()
        .map(|&s| f(s))
        .collect::<Result<Vec<_>>>()?;
    RepeatSummary::new(values)
}
