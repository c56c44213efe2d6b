//! Batching, Adam, plateau LR scheduling and the training loops.

use std::collections::{BTreeSet, HashSet, VecDeque};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{EmbeddingDataset, PromptBank};
use crate::error::{Error, Result};
use crate::heads::{init_head_with, Head, HeadKind, HIDDEN_UNITS};
use crate::losses::{contrastive_loss_with_temperature, cross_entropy_loss, TrainBatch};
use crate::numcore::{l2_norm, DenseMatrix};
use crate::taxonomy::Taxonomy;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;
/// Relative margin a validation loss must beat the best by to count as progress.
pub const PLATEAU_THRESHOLD: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionType {
    Sc,
    Ic,
    Ssc,
}

impl CaptionType {
    pub fn name(self) -> &'static str {
        match self {
            CaptionType::Sc => "sc",
            CaptionType::Ic => "ic",
            CaptionType::Ssc => "ssc",
        }
    }

    /// Parses a comma-separated list such as `sc,ic,ssc`.
    pub fn parse_set(list: &str) -> Result<BTreeSet<CaptionType>> {
        let set = list
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect::<Result<BTreeSet<_>>>()?;
        if set.is_empty() {
            return Err(Error::InvalidConfig("caption type list is empty".into()));
        }
        Ok(set)
    }

    pub fn format_set(set: &BTreeSet<CaptionType>) -> String {
        set.iter()
            .map(|c| c.name().to_uppercase())
            .collect::<Vec<_>>()
            .join(" + ")
    }
}

impl fmt::Display for CaptionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CaptionType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_lowercase().as_str() {
            "sc" => Ok(CaptionType::Sc),
            "ic" => Ok(CaptionType::Ic),
            "ssc" => Ok(CaptionType::Ssc),
            other => Err(Error::InvalidConfig(format!(
                "unknown caption type {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub head: HeadKind,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub caption_types: BTreeSet<CaptionType>,
    pub patience: usize,
    pub lr_factor: f64,
    pub seed: u64,
    pub early_stop: bool,
    /// Divisor applied to cosine similarities in the contrastive loss.
    pub temperature: f64,
    pub hidden: usize,
    /// Pair each image with every caption candidate per epoch instead of sampling one.
    pub pair_all_captions: bool,
    pub keep_snapshots: bool,
}

impl TrainConfig {
    /// 15 epochs, lr 1e-3 with ×0.1 plateau decay, batch 32 (ce) or 8
    /// (contrastive), all caption types.
    pub fn defaults(head: HeadKind) -> Self {
        Self {
            head,
            epochs: 15,
            lr: 1e-3,
            batch_size: match head {
                HeadKind::CrossEntropy => 32,
                HeadKind::Contrastive => 8,
            },
            caption_types: [CaptionType::Sc, CaptionType::Ic, CaptionType::Ssc].into(),
            patience: 2,
            lr_factor: 0.1,
            seed: 0,
            early_stop: true,
            temperature: 1.0,
            hidden: HIDDEN_UNITS,
            pair_all_captions: false,
            keep_snapshots: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        // lr = 0 is accepted as a frozen-parameter run
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and nonnegative");
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return bad("lr_factor must lie in (0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.hidden == 0 {
            return bad("hidden must be at least 1");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if self.head == HeadKind::Contrastive && self.caption_types.is_empty() {
            return bad("contrastive training needs at least one caption type");
        }
        Ok(())
    }
}

/// Bias-corrected Adam moments, one accumulator pair per parameter slice.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(shapes: &[usize]) -> Self {
        Self {
            first_moment: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn for_params(params: &[&[f64]]) -> Self {
        Self::new(&params.iter().map(|p| p.len()).collect::<Vec<_>>())
    }
}

pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            actual: grads.len(),
        });
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first_moment) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(Error::DimensionMismatch {
                expected: p.len(),
                actual: g.len(),
            });
        }
    }
    if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite);
    }

    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.first_moment[k];
        let v = &mut state.second_moment[k];
        for i in 0..p.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
        }
    }
    Ok(())
}

/// Reduce-on-plateau schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub best: Option<f64>,
    /// Non-improving epochs since the last improvement or reduction.
    pub bad_epochs: usize,
    /// Non-improving epochs since the last improvement; not reset by reductions.
    pub since_improvement: usize,
    pub lr: f64,
    pub reductions: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64) -> Self {
        Self {
            best: None,
            bad_epochs: 0,
            since_improvement: 0,
            lr,
            reductions: 0,
        }
    }

    /// Records one epoch's validation loss. Returns true when it improved on the best.
    pub fn step(&mut self, val_loss: f64, patience: usize, factor: f64) -> bool {
        let improved = match self.best {
            None => true,
            Some(best) => val_loss < best - PLATEAU_THRESHOLD * best.abs(),
        };
        if improved {
            self.best = Some(val_loss);
            self.bad_epochs = 0;
            self.since_improvement = 0;
        } else {
            self.bad_epochs += 1;
            self.since_improvement += 1;
            if self.bad_epochs >= patience {
                self.lr *= factor;
                self.reductions += 1;
                self.bad_epochs = 0;
            }
        }
        improved
    }

    /// True once the loss has stalled for `patience + 1` epochs after at least one reduction.
    pub fn should_stop(&self, patience: usize) -> bool {
        self.reductions > 0 && self.since_improvement > patience
    }
}

pub fn scheduler_step(
    mut s: PlateauScheduler,
    val_loss: f64,
    patience: usize,
    factor: f64,
) -> PlateauScheduler {
    s.step(val_loss, patience, factor);
    s
}

/// SC and SSC caption embeddings per fine class, taken from a prompt bank.
#[derive(Clone, Debug)]
pub struct ClassCaptions {
    dim: usize,
    sc: Vec<Option<Vec<f64>>>,
    ssc: Vec<Vec<Vec<f64>>>,
}

impl ClassCaptions {
    /// A bank row whose class term is the fine class itself is that class's
    /// SC; rows whose term is a synonym are SSC candidates.
    pub fn from_bank(bank: &PromptBank, tax: &Taxonomy) -> Result<Self> {
        let k = tax.fine_classes().len();
        let mut sc = vec![None; k];
        let mut ssc = vec![Vec::new(); k];
        for (entry, row) in bank.entries().iter().zip(bank.embeddings().iter_rows()) {
            let fine = tax.resolve_prompt_class(&entry.class)?;
            let idx = tax.fine_index(fine).expect("resolved class is indexed");
            if entry.class.trim().eq_ignore_ascii_case(fine) {
                sc[idx].get_or_insert_with(|| row.to_vec());
            } else {
                ssc[idx].push(row.to_vec());
            }
        }
        Ok(Self {
            dim: bank.dim(),
            sc,
            ssc,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Images with resolved labels and optional per-image caption embeddings.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub images: EmbeddingDataset,
    pub labels: Vec<usize>,
    pub image_captions: Option<DenseMatrix>,
}

impl TrainData {
    pub fn new(
        images: EmbeddingDataset,
        tax: &Taxonomy,
        image_captions: Option<&EmbeddingDataset>,
    ) -> Result<Self> {
        let labels = images.label_indices(tax)?;
        let image_captions = match image_captions {
            None => None,
            Some(ic) => {
                if ic.len() != images.len() {
                    return Err(Error::ManifestMismatch {
                        vectors: images.len(),
                        records: ic.len(),
                    });
                }
                for (a, b) in images.manifest().iter().zip(ic.manifest()) {
                    if a.id != b.id {
                        return Err(Error::InvalidConfig(format!(
                            "image caption row {:?} does not match image {:?}",
                            b.id, a.id
                        )));
                    }
                }
                Some(ic.vectors().clone())
            }
        };
        Ok(Self {
            images,
            labels,
            image_captions,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Which caption an image is paired with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CaptionRef {
    Sc { class: usize },
    Ic { row: usize },
    Ssc { class: usize, index: usize },
}

impl CaptionRef {
    pub fn caption_type(self) -> CaptionType {
        match self {
            CaptionRef::Sc { .. } => CaptionType::Sc,
            CaptionRef::Ic { .. } => CaptionType::Ic,
            CaptionRef::Ssc { .. } => CaptionType::Ssc,
        }
    }
}

/// Enabled caption candidates for image `row`, in sc, ic, ssc order.
pub fn caption_candidates(
    data: &TrainData,
    captions: &ClassCaptions,
    types: &BTreeSet<CaptionType>,
    row: usize,
) -> Vec<CaptionRef> {
    let class = data.labels[row];
    let mut out = Vec::new();
    if types.contains(&CaptionType::Sc) && captions.sc[class].is_some() {
        out.push(CaptionRef::Sc { class });
    }
    if types.contains(&CaptionType::Ic) && data.image_captions.is_some() {
        out.push(CaptionRef::Ic { row });
    }
    if types.contains(&CaptionType::Ssc) {
        out.extend((0..captions.ssc[class].len()).map(|index| CaptionRef::Ssc { class, index }));
    }
    out
}

fn caption_vector<'a>(
    data: &'a TrainData,
    captions: &'a ClassCaptions,
    c: CaptionRef,
) -> &'a [f64] {
    match c {
        CaptionRef::Sc { class } => captions.sc[class].as_deref().expect("candidate exists"),
        CaptionRef::Ic { row } => data
            .image_captions
            .as_ref()
            .expect("candidate exists")
            .row(row),
        CaptionRef::Ssc { class, index } => &captions.ssc[class][index],
    }
}

/// Row indices (and, for the contrastive head, caption choices) of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPlan {
    pub rows: Vec<usize>,
    pub labels: Vec<usize>,
    pub captions: Option<Vec<CaptionRef>>,
}

impl BatchPlan {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn inputs(&self, data: &TrainData) -> DenseMatrix {
        data.images.vectors().select_rows(&self.rows)
    }

    pub fn text_embeddings(
        &self,
        data: &TrainData,
        captions: &ClassCaptions,
    ) -> Option<DenseMatrix> {
        let refs = self.captions.as_ref()?;
        let rows: Vec<&[f64]> = refs
            .iter()
            .map(|&c| caption_vector(data, captions, c))
            .collect();
        Some(DenseMatrix::from_rows(captions.dim(), &rows).expect("caption rows share a dim"))
    }
}

fn epoch_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Packs items so no class repeats within a batch while other classes remain;
/// duplicates fill the batch only when nothing else is left.
fn pack_class_diverse<T: Copy>(items: Vec<(T, usize)>, batch_size: usize) -> Vec<Vec<(T, usize)>> {
    let mut pending: VecDeque<(T, usize)> = items.into();
    let mut batches = Vec::new();
    while !pending.is_empty() {
        let mut batch = Vec::with_capacity(batch_size);
        let mut seen = HashSet::new();
        let mut skipped = VecDeque::new();
        while batch.len() < batch_size {
            let Some(item) = pending.pop_front() else {
                break;
            };
            if seen.insert(item.1) {
                batch.push(item);
            } else {
                skipped.push_back(item);
            }
        }
        while batch.len() < batch_size {
            let Some(item) = skipped.pop_front() else {
                break;
            };
            batch.push(item);
        }
        for item in skipped.into_iter().rev() {
            pending.push_front(item);
        }
        batches.push(batch);
    }
    batches
}

fn plan_batches(
    data: &TrainData,
    captions: Option<&ClassCaptions>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<BatchPlan>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);

    let captions = match (cfg.head, captions) {
        (HeadKind::CrossEntropy, _) => {
            return Ok(order
                .chunks(cfg.batch_size)
                .map(|rows| BatchPlan {
                    rows: rows.to_vec(),
                    labels: rows.iter().map(|&r| data.labels[r]).collect(),
                    captions: None,
                })
                .collect());
        }
        (HeadKind::Contrastive, Some(c)) => c,
        (HeadKind::Contrastive, None) => {
            return Err(Error::InvalidConfig(
                "contrastive batching needs caption embeddings".into(),
            ))
        }
    };

    let mut items = Vec::with_capacity(order.len());
    for &row in &order {
        let candidates = caption_candidates(data, captions, &cfg.caption_types, row);
        if candidates.is_empty() {
            return Err(Error::MissingCaption(
                data.images.manifest()[row].id.clone(),
            ));
        }
        if cfg.pair_all_captions {
            items.extend(candidates.into_iter().map(|c| ((row, c), data.labels[row])));
        } else {
            let pick = candidates[rng.random_range(0..candidates.len())];
            items.push(((row, pick), data.labels[row]));
        }
    }
    if cfg.pair_all_captions {
        items.shuffle(rng);
    }
    Ok(pack_class_diverse(items, cfg.batch_size)
        .into_iter()
        .map(|batch| BatchPlan {
            rows: batch.iter().map(|((r, _), _)| *r).collect(),
            labels: batch.iter().map(|(_, l)| *l).collect(),
            captions: Some(batch.iter().map(|((_, c), _)| *c).collect()),
        })
        .collect())
}

/// Batches for one training epoch, deterministic in `(cfg.seed, epoch)`.
pub fn make_batches(
    data: &TrainData,
    captions: Option<&ClassCaptions>,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Vec<BatchPlan>> {
    plan_batches(
        data,
        captions,
        cfg,
        &mut epoch_rng(cfg.seed, epoch as u64 + 1),
    )
}

// Validation batches are drawn once from their own stream and reused every epoch.
const VALIDATION_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub wall_time_s: f64,
}

impl EpochLog {
    /// Equality of everything except wall time.
    pub fn same_numbers(&self, other: &EpochLog) -> bool {
        self.epoch == other.epoch
            && self.train_loss.to_bits() == other.train_loss.to_bits()
            && self.val_loss.to_bits() == other.val_loss.to_bits()
            && self.lr.to_bits() == other.lr.to_bits()
    }
}

pub fn write_epoch_logs(logs: &[EpochLog], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for log in logs {
        serde_json::to_writer(&mut out, log).expect("log serializes");
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub head: Head,
    pub best_epoch: Option<usize>,
    pub logs: Vec<EpochLog>,
    /// Per-epoch parameters, filled when `keep_snapshots` is set.
    pub snapshots: Vec<Head>,
}

fn batch_loss(
    head: &Head,
    plan: &BatchPlan,
    data: &TrainData,
    captions: Option<&ClassCaptions>,
    temperature: f64,
) -> Result<(f64, crate::heads::HeadGrads)> {
    let net = head.net();
    let cache = net.forward(&plan.inputs(data))?;
    let (loss, grad_out) = match head {
        Head::CrossEntropy(_) => cross_entropy_loss(&cache.output, &plan.labels)?,
        Head::Contrastive(_) => {
            let captions = captions.expect("contrastive plans carry captions");
            let batch = TrainBatch {
                image_projections: cache.output.clone(),
                text_embeddings: plan
                    .text_embeddings(data, captions)
                    .expect("captions planned"),
                labels: Some(plan.labels.clone()),
            };
            contrastive_loss_with_temperature(&batch, temperature)?
        }
    };
    if !loss.is_finite() {
        return Err(Error::NonFinite);
    }
    let grads = net.backward(&cache, &grad_out)?;
    Ok((loss, grads))
}

fn mean_loss(
    head: &Head,
    plans: &[BatchPlan],
    data: &TrainData,
    captions: Option<&ClassCaptions>,
    temperature: f64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for plan in plans {
        let cache = head.net().forward(&plan.inputs(data))?;
        let loss = match head {
            Head::CrossEntropy(_) => cross_entropy_loss(&cache.output, &plan.labels)?.0,
            Head::Contrastive(_) => {
                let captions = captions.expect("contrastive plans carry captions");
                let batch = TrainBatch {
                    image_projections: cache.output,
                    text_embeddings: plan
                        .text_embeddings(data, captions)
                        .expect("captions planned"),
                    labels: None,
                };
                contrastive_loss_with_temperature(&batch, temperature)?.0
            }
        };
        total += loss * plan.len() as f64;
        count += plan.len();
    }
    if count == 0 || !total.is_finite() {
        return Err(if count == 0 {
            Error::EmptyInput
        } else {
            Error::NonFinite
        });
    }
    Ok(total / count as f64)
}

/// Trains a freshly initialized head. Each epoch runs the batch loop with
/// Adam, then computes validation loss, steps the plateau scheduler and
/// checks early stopping. Returns the best-validation snapshot.
pub fn train(
    train_data: &TrainData,
    val_data: &TrainData,
    captions: Option<&ClassCaptions>,
    tax: &Taxonomy,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_data.is_empty() || val_data.is_empty() {
        return Err(Error::EmptyInput);
    }
    let in_dim = train_data.images.dim();
    if val_data.images.dim() != in_dim {
        return Err(Error::DimensionMismatch {
            expected: in_dim,
            actual: val_data.images.dim(),
        });
    }
    let out_dim = match cfg.head {
        HeadKind::CrossEntropy => tax.fine_classes().len(),
        HeadKind::Contrastive => captions
            .ok_or_else(|| Error::InvalidConfig("contrastive training needs a prompt bank".into()))?
            .dim(),
    };
    let mut head = init_head_with(cfg.head, in_dim, cfg.hidden, out_dim, cfg.seed)?;
    head.meta_mut().fingerprint = tax.fingerprint();

    let val_plans = plan_batches(
        val_data,
        captions,
        cfg,
        &mut epoch_rng(cfg.seed, VALIDATION_STREAM),
    )?;

    let mut adam = AdamState::for_params(&head.net().slices());
    let mut scheduler = PlateauScheduler::new(cfg.lr);
    let mut best: Option<(f64, usize, Head)> = None;
    let mut logs = Vec::new();
    let mut snapshots = Vec::new();

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = scheduler.lr;
        let plans = make_batches(train_data, captions, cfg, epoch)?;
        let mut total = 0.0;
        let mut count = 0usize;
        for plan in &plans {
            let (loss, grads) = batch_loss(&head, plan, train_data, captions, cfg.temperature)?;
            adam_step(
                &mut head.net_mut().slices_mut(),
                &grads.slices(),
                &mut adam,
                lr,
            )?;
            total += loss * plan.len() as f64;
            count += plan.len();
        }
        let train_loss = total / count as f64;
        let val_loss = mean_loss(&head, &val_plans, val_data, captions, cfg.temperature)?;
        scheduler.step(val_loss, cfg.patience, cfg.lr_factor);

        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, head.clone()));
        }
        if cfg.keep_snapshots {
            snapshots.push(head.clone());
        }
        logs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            lr,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
        if cfg.early_stop && scheduler.should_stop(cfg.patience) {
            break;
        }
    }

    let (head, best_epoch) = match best {
        Some((_, epoch, h)) => (h, Some(epoch)),
        None => (head, None),
    };
    Ok(TrainOutcome {
        head,
        best_epoch,
        logs,
        snapshots,
    })
}

/// Fraction of rows whose argmax logit (ce) or nearest SC caption (contrastive) matches the label.
pub fn train_accuracy(
    head: &Head,
    data: &TrainData,
    captions: Option<&ClassCaptions>,
) -> Result<f64> {
    let out = head.net().forward(data.images.vectors())?.output;
    let mut correct = 0usize;
    for (i, &label) in data.labels.iter().enumerate() {
        let row = out.row(i);
        let pred = match head {
            Head::CrossEntropy(_) => crate::numcore::argmax(row),
            Head::Contrastive(_) => {
                let captions = captions.ok_or(Error::EmptyInput)?;
                let norm = l2_norm(row);
                if norm.is_nan() || norm <= 0.0 {
                    return Err(Error::ZeroNorm);
                }
                let scores: Vec<f64> = captions
                    .sc
                    .iter()
                    .map(|c| match c {
                        Some(t) => {
                            crate::numcore::cosine_similarity(row, t).unwrap_or(f64::NEG_INFINITY)
                        }
                        None => f64::NEG_INFINITY,
                    })
                    .collect();
                crate::numcore::argmax(&scores)
            }
        };
        if pred == Some(label) {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synth_dataset, SynthConfig};

    fn fixture(
        classes: usize,
        per_class: usize,
        with_synonyms: bool,
    ) -> (Taxonomy, TrainData, ClassCaptions) {
        let tax = Taxonomy::parrott();
        let names: Vec<String> = tax.fine_classes()[..classes].to_vec();
        let mut cfg = SynthConfig::new(names.clone(), per_class, 16, 5);
        if with_synonyms {
            for n in &names {
                cfg.synonyms.insert(n.clone(), tax.synonyms_of(n).to_vec());
            }
        }
        let out = synth_dataset(&cfg).unwrap();
        let captions = ClassCaptions::from_bank(&out.bank(&tax).unwrap(), &tax).unwrap();
        let data = TrainData::new(out.images, &tax, Some(&out.image_captions)).unwrap();
        (tax, data, captions)
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = vec![0.5, -1.25, 3.0];
        let before = p.clone();
        let mut state = AdamState::new(&[3]);
        adam_step(&mut [&mut p[..]], &[&[0.0, 0.0, 0.0][..]], &mut state, 1e-3).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut p = [0.0];
        let mut state = AdamState::new(&[1]);
        adam_step(&mut [&mut p[..]], &[&[1.0][..]], &mut state, 1e-3).unwrap();
        assert!((p[0] + 1e-3).abs() < 1e-10, "{}", p[0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_descends_quadratic_bowl() {
        let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[1] * x[1];
        let mut x = vec![1.0, -2.0];
        let mut state = AdamState::new(&[2]);
        let start = f(&x);
        for _ in 0..2 {
            let g = [2.0 * x[0], 6.0 * x[1]];
            adam_step(&mut [&mut x[..]], &[&g[..]], &mut state, 0.1).unwrap();
        }
        assert!(f(&x) < start);
    }

    #[test]
    fn adam_rejects_bad_input() {
        let mut p = [0.0; 2];
        let mut state = AdamState::new(&[2]);
        assert!(adam_step(&mut [&mut p[..]], &[&[1.0][..]], &mut state, 1e-3).is_err());
        assert!(matches!(
            adam_step(&mut [&mut p[..]], &[&[f64::NAN, 0.0][..]], &mut state, 1e-3),
            Err(Error::NonFinite)
        ));
    }

    #[test]
    fn plateau_reduces_after_patience() {
        let mut s = PlateauScheduler::new(1e-3);
        for loss in [1.0, 1.0] {
            s = scheduler_step(s, loss, 2, 0.1);
            assert_eq!(s.lr, 1e-3);
        }
        s = scheduler_step(s, 1.0, 2, 0.1);
        assert_eq!(s.lr, 1e-3 * 0.1);
        assert_eq!(s.reductions, 1);
    }

    #[test]
    fn plateau_keeps_lr_while_improving_and_respects_threshold() {
        let mut s = PlateauScheduler::new(1e-3);
        for loss in [5.0, 4.0, 3.0, 2.0, 1.0, 0.5] {
            s.step(loss, 2, 0.1);
        }
        assert_eq!(s.lr, 1e-3);

        let mut s = PlateauScheduler::new(1e-3);
        s.step(1.0, 1, 0.1);
        // within the 1e-4 relative margin: a plateau
        assert!(!s.step(1.0 - 5e-5, 1, 0.1));
        assert_eq!(s.lr, 1e-3 * 0.1);
    }

    #[test]
    fn early_stop_needs_a_reduction_first() {
        let mut s = PlateauScheduler::new(1.0);
        s.step(1.0, 2, 0.1);
        s.step(1.0, 2, 0.1);
        assert!(!s.should_stop(2));
        s.step(1.0, 2, 0.1);
        assert_eq!(s.reductions, 1);
        assert!(!s.should_stop(2));
        s.step(1.0, 2, 0.1);
        assert!(s.should_stop(2));
    }

    #[test]
    fn class_diverse_batches() {
        let (_, data, captions) = fixture(8, 3, false);
        let mut cfg = TrainConfig::defaults(HeadKind::Contrastive);
        cfg.caption_types = [CaptionType::Sc].into();
        let plans = make_batches(&data, Some(&captions), &cfg, 0).unwrap();
        assert_eq!(plans.len(), 3);
        for plan in &plans {
            let classes: HashSet<_> = plan.labels.iter().collect();
            assert_eq!(classes.len(), 8);
            let sc: HashSet<_> = plan.captions.as_ref().unwrap().iter().collect();
            assert_eq!(sc.len(), 8);
        }
    }

    #[test]
    fn duplicates_fill_when_classes_run_out() {
        let items: Vec<(usize, usize)> = (0..10).map(|i| (i, i % 3)).collect();
        let batches = pack_class_diverse(items, 8);
        assert_eq!(batches.iter().map(Vec::len).collect::<Vec<_>>(), vec![8, 2]);
        let first: HashSet<_> = batches[0][..3].iter().map(|x| x.1).collect();
        assert_eq!(first.len(), 3);
    }

    #[test]
    fn batching_is_seeded() {
        let (_, data, captions) = fixture(3, 6, true);
        let cfg = TrainConfig::defaults(HeadKind::Contrastive);
        let a = make_batches(&data, Some(&captions), &cfg, 2).unwrap();
        assert_eq!(a, make_batches(&data, Some(&captions), &cfg, 2).unwrap());
        assert_ne!(a, make_batches(&data, Some(&captions), &cfg, 3).unwrap());
        let ce = TrainConfig::defaults(HeadKind::CrossEntropy);
        let plans = make_batches(&data, None, &ce, 0).unwrap();
        assert_eq!(plans.iter().map(BatchPlan::len).sum::<usize>(), 18);
        assert!(plans.iter().all(|p| p.captions.is_none()));
    }

    #[test]
    fn caption_types_sampled_by_candidate_count() {
        // 1 sc + 1 ic + 5 ssc candidates per image
        let (_, data, captions) = fixture(2, 5, true);
        let cfg = TrainConfig::defaults(HeadKind::Contrastive);
        let mut counts = [0usize; 3];
        for epoch in 0..1000 {
            for plan in make_batches(&data, Some(&captions), &cfg, epoch).unwrap() {
                for c in plan.captions.unwrap() {
                    counts[c.caption_type() as usize] += 1;
                }
            }
        }
        let total: usize = counts.iter().sum();
        let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
        let expected = [1.0 / 7.0, 1.0 / 7.0, 5.0 / 7.0];
        for (f, e) in freq.iter().zip(expected) {
            // 10k draws: 4 standard errors is about 0.014
            assert!((f - e).abs() < 0.015, "{freq:?}");
        }
    }

    #[test]
    fn pair_all_captions_expands_dataset() {
        let (_, data, captions) = fixture(2, 3, true);
        let mut cfg = TrainConfig::defaults(HeadKind::Contrastive);
        cfg.pair_all_captions = true;
        let plans = make_batches(&data, Some(&captions), &cfg, 0).unwrap();
        assert_eq!(plans.iter().map(BatchPlan::len).sum::<usize>(), 6 * 7);
    }

    #[test]
    fn missing_captions_error() {
        let (tax, data, _) = fixture(2, 2, false);
        let empty = ClassCaptions {
            dim: 16,
            sc: vec![None; tax.fine_classes().len()],
            ssc: vec![Vec::new(); tax.fine_classes().len()],
        };
        let mut cfg = TrainConfig::defaults(HeadKind::Contrastive);
        cfg.caption_types = [CaptionType::Sc].into();
        assert!(matches!(
            make_batches(&data, Some(&empty), &cfg, 0),
            Err(Error::MissingCaption(_))
        ));
    }

    #[test]
    fn zero_lr_leaves_parameters_alone() {
        let (tax, data, _) = fixture(3, 8, false);
        let mut cfg = TrainConfig::defaults(HeadKind::CrossEntropy);
        cfg.lr = 0.0;
        cfg.epochs = 3;
        cfg.hidden = 8;
        cfg.early_stop = false;
        let out = train(&data, &data, None, &tax, &cfg).unwrap();
        let init = init_head_with(HeadKind::CrossEntropy, 16, 8, 25, cfg.seed).unwrap();
        assert_eq!(out.head.net(), init.net());
        let first = &out.logs[0];
        assert!(out.logs.iter().all(|l| l.val_loss == first.val_loss));
        // batch order changes per epoch, so only summation order differs
        assert!(out
            .logs
            .iter()
            .all(|l| (l.train_loss - first.train_loss).abs() < 1e-12));
    }

    #[test]
    fn zero_epochs_returns_init() {
        let (tax, data, _) = fixture(3, 4, false);
        let mut cfg = TrainConfig::defaults(HeadKind::CrossEntropy);
        cfg.epochs = 0;
        cfg.hidden = 8;
        cfg.early_stop = false;
        let out = train(&data, &data, None, &tax, &cfg).unwrap();
        assert!(out.logs.is_empty());
        assert_eq!(out.best_epoch, None);
        let init = init_head_with(HeadKind::CrossEntropy, 16, 8, 25, 0).unwrap();
        assert_eq!(out.head.net(), init.net());
        assert_eq!(out.head.meta().fingerprint, tax.fingerprint());
    }

    #[test]
    fn returned_head_is_best_validation_epoch() {
        let (tax, data, captions) = fixture(3, 10, false);
        let mut cfg = TrainConfig::defaults(HeadKind::Contrastive);
        cfg.caption_types = [CaptionType::Sc].into();
        cfg.hidden = 16;
        cfg.epochs = 6;
        cfg.lr = 0.05;
        cfg.early_stop = false;
        cfg.keep_snapshots = true;
        let out = train(&data, &data, Some(&captions), &tax, &cfg).unwrap();
        let best = out
            .logs
            .iter()
            .min_by(|a, b| a.val_loss.total_cmp(&b.val_loss))
            .unwrap()
            .epoch;
        assert_eq!(out.best_epoch, Some(best));
        assert_eq!(out.head, out.snapshots[best]);
        let lrs: Vec<f64> = out.logs.iter().map(|l| l.lr).collect();
        assert!(lrs.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] * 0.1));
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::defaults(HeadKind::CrossEntropy);
        assert!(cfg.validate().is_ok());
        cfg.lr_factor = 1.0;
        assert!(cfg.validate().is_err());
        cfg.lr_factor = 0.1;
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        assert_eq!(TrainConfig::defaults(HeadKind::Contrastive).batch_size, 8);
        assert_eq!(CaptionType::parse_set("sc, ic,ssc").unwrap().len(), 3);
        assert!(CaptionType::parse_set("sc,xx").is_err());
    }
}
