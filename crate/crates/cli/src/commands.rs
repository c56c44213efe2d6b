use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clipe_core::dataio::{
    load_prompt_bank, read_embeddings, write_embeddings, write_prompt_entries, EmbeddingDataset,
    PromptBank, PromptEntry, SynthConfig,
};
use clipe_core::evalkit::{
    ablation_records, ablation_run, ablation_subsets, baseline, ce_computable, comparison_grid_csv,
    format_percent, not_computable, predict, random_baseline, scored_record, AblationData,
    AblationRow, BaselineKind, CellStatus, CrossDatasetRecord, ModelSpec, RepeatSummary,
};
use clipe_core::heads::{load_model, save_model, Head, HeadKind};
use clipe_core::inference::{write_predictions, PredictionRecord};
use clipe_core::taxonomy::{Level, PromptTemplate, Taxonomy};
use clipe_core::trainer::{
    train, write_epoch_logs, CaptionType, ClassCaptions, TrainConfig, TrainData,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::args::*;
use crate::error::CliError;
use crate::manifest::RunManifest;

type CmdResult = Result<(), CliError>;

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CmdResult {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn load_taxonomy(spec: &str, manifest: Option<&mut RunManifest>) -> Result<Taxonomy, CliError> {
    if spec == "default" {
        return Ok(Taxonomy::parrott());
    }
    let path = Path::new(spec);
    if let Some(m) = manifest {
        m.add_input(path)?;
    }
    Ok(Taxonomy::load(path)?)
}

fn load_bank(
    args: &BankArgs,
    tax: &Taxonomy,
    manifest: &mut RunManifest,
) -> Result<Option<PromptBank>, CliError> {
    match (&args.bank, &args.bank_emb) {
        (None, None) => Ok(None),
        (Some(prompts), Some(emb)) => {
            manifest.add_input(prompts)?;
            manifest.add_input(emb)?;
            Ok(Some(load_prompt_bank(prompts, emb, tax)?))
        }
        _ => Err(CliError::usage(
            "--bank and --bank-emb must be given together",
        )),
    }
}

fn read_dataset(path: &Path, manifest: &mut RunManifest) -> Result<EmbeddingDataset, CliError> {
    manifest.add_input(path)?;
    Ok(read_embeddings(path)?)
}

/// Rows of `bank` whose class is a fine class itself, not a synonym.
fn sc_only(bank: &PromptBank, tax: &Taxonomy) -> Result<PromptBank, CliError> {
    let keep: Vec<usize> = bank
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| tax.fine_index(&e.class.trim().to_lowercase()).is_some())
        .map(|(i, _)| i)
        .collect();
    if keep.is_empty() {
        return Err(CliError::usage("prompt bank has no single-class prompts"));
    }
    let entries = keep.iter().map(|&i| bank.entries()[i].clone()).collect();
    Ok(PromptBank::new(
        entries,
        bank.embeddings().select_rows(&keep),
        tax,
    )?)
}

fn load_split(
    split: &SplitArgs,
    tax: &Taxonomy,
    seed: u64,
    manifest: &mut RunManifest,
) -> Result<(TrainData, TrainData), CliError> {
    let train_ds = read_dataset(&split.train, manifest)?;
    let train_ic = match &split.ic_emb {
        Some(p) => Some(read_dataset(p, manifest)?),
        None => None,
    };
    match &split.val {
        Some(v) => {
            let val_ds = read_dataset(v, manifest)?;
            let val_ic = match &split.val_ic_emb {
                Some(p) => Some(read_dataset(p, manifest)?),
                None => None,
            };
            Ok((
                TrainData::new(train_ds, tax, train_ic.as_ref())?,
                TrainData::new(val_ds, tax, val_ic.as_ref())?,
            ))
        }
        None => {
            let f = split.val_fraction;
            if !(f > 0.0 && f < 1.0) {
                return Err(CliError::usage("--val-fraction must lie in (0, 1)"));
            }
            let parts = train_ds.stratified_split(&[1.0 - f, f], seed);
            if parts[0].is_empty() || parts[1].is_empty() {
                return Err(CliError::usage(
                    "too few images to carve a validation split; pass --val",
                ));
            }
            let part = |idx: &[usize]| {
                let ic = train_ic.as_ref().map(|ic| ic.subset(idx));
                TrainData::new(train_ds.subset(idx), tax, ic.as_ref())
            };
            Ok((part(&parts[0])?, part(&parts[1])?))
        }
    }
}

fn train_config(
    kind: HeadKind,
    hyper: &HyperArgs,
    caption_types: BTreeSet<CaptionType>,
) -> TrainConfig {
    let mut cfg = TrainConfig::defaults(kind);
    cfg.epochs = hyper.epochs;
    cfg.lr = hyper.lr;
    if let Some(b) = hyper.batch_size {
        cfg.batch_size = b;
    }
    cfg.lr_factor = hyper.lr_factor;
    cfg.patience = hyper.patience;
    cfg.seed = hyper.seed;
    cfg.early_stop = !hyper.no_early_stop;
    cfg.temperature = hyper.temperature;
    cfg.hidden = hyper.hidden;
    cfg.pair_all_captions = hyper.pair_all_captions;
    cfg.caption_types = caption_types;
    cfg
}

fn levels_or_all(levels: &[Level]) -> Vec<Level> {
    if levels.is_empty() {
        Level::ALL.to_vec()
    } else {
        levels.to_vec()
    }
}

pub fn cmd_train(args: TrainArgs) -> CmdResult {
    let mut manifest = RunManifest::start("train");
    let tax = load_taxonomy(&args.taxonomy, Some(&mut manifest))?;
    let caption_types = CaptionType::parse_set(&args.caption_types)?;
    let cfg = train_config(args.head, &args.hyper, caption_types);
    cfg.validate()?;
    let (train_data, val_data) = load_split(&args.split, &tax, cfg.seed, &mut manifest)?;
    let bank = load_bank(&args.bank, &tax, &mut manifest)?;
    let captions = match (args.head, &bank) {
        (HeadKind::Contrastive, None) => {
            return Err(CliError::usage(
                "contrastive training needs --bank and --bank-emb",
            ))
        }
        (HeadKind::Contrastive, Some(b)) => Some(ClassCaptions::from_bank(b, &tax)?),
        (HeadKind::CrossEntropy, _) => None,
    };

    create_dir(&args.out)?;
    let outcome = train(&train_data, &val_data, captions.as_ref(), &tax, &cfg)?;
    let model_path = args.out.join("model.clipe");
    save_model(&outcome.head, &model_path)?;
    write_epoch_logs(&outcome.logs, args.out.join("epochs.jsonl"))?;
    tax.save(args.out.join("taxonomy.json"))?;

    match outcome.best_epoch {
        Some(e) => println!(
            "trained {} head for {} epochs; best epoch {} (val loss {:.6}); model -> {}",
            args.head.name(),
            outcome.logs.len(),
            e,
            outcome.logs[e].val_loss,
            model_path.display()
        ),
        None => println!(
            "0 epochs; wrote initial {} head -> {}",
            args.head.name(),
            model_path.display()
        ),
    }

    manifest.seed = Some(cfg.seed);
    manifest.config = json!({
        "train": cfg,
        "taxonomy": args.taxonomy,
        "train_images": train_data.len(),
        "val_images": val_data.len(),
        "best_epoch": outcome.best_epoch,
    });
    manifest.finish(&args.out)
}

fn model_label(spec: &ModelSpec<'_>) -> &'static str {
    match spec {
        ModelSpec::ZeroShot => "CLIP Zero-Shot",
        ModelSpec::Contrastive(_) => "CLIP-E Contrastive",
        ModelSpec::CrossEntropy { .. } => "CLIP-E Cross-Entropy",
    }
}

/// Scores one model on one dataset at each level, writing reports, confusion
/// CSVs and per-image predictions into `out`. Returns the records.
#[allow(clippy::too_many_arguments)]
fn evaluate_into(
    spec: ModelSpec<'_>,
    data: &EmbeddingDataset,
    tax: &Taxonomy,
    bank: Option<&PromptBank>,
    levels: &[Level],
    dataset_name: &str,
    out: &Path,
) -> Result<Vec<CrossDatasetRecord>, CliError> {
    let model_name = model_label(&spec);
    let predictions = predict(spec, data, tax, bank)?;
    let records: Vec<PredictionRecord> = data
        .manifest()
        .iter()
        .zip(&predictions)
        .map(|(m, p)| PredictionRecord::new(m.id.clone(), p))
        .collect();
    write_predictions(&records, out.join("predictions.jsonl"))?;

    let mut results = Vec::new();
    for &level in levels {
        let record = match spec {
            ModelSpec::CrossEntropy { taxonomy, .. } if !ce_computable(taxonomy, tax, level) => {
                not_computable(model_name, dataset_name, taxonomy, tax, level)
            }
            _ => scored_record(model_name, dataset_name, &predictions, data, tax, level)?,
        };
        write_json(&out.join(format!("report_{}.json", level.name())), &record)?;
        match &record.report {
            Some(r) => {
                write_text(
                    &out.join(format!("confusion_{}.csv", level.name())),
                    &r.confusion.to_csv(),
                )?;
                println!(
                    "{} ({} classes): accuracy {}% over {} images (random {}%, majority {}%)",
                    level.name(),
                    r.n_classes,
                    format_percent(r.accuracy),
                    r.n_samples,
                    format_percent(r.baselines.random),
                    format_percent(r.baselines.majority)
                );
            }
            None => println!(
                "{} ({} classes): X ({})",
                level.name(),
                record.n_classes,
                record.reason.as_deref().unwrap_or("not computable")
            ),
        }
        results.push(record);
    }
    Ok(results)
}

fn fail_on_x(records: &[CrossDatasetRecord]) -> CmdResult {
    let missing: Vec<&str> = records
        .iter()
        .filter(|r| r.status == CellStatus::X)
        .map(|r| r.level.name())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(CliError::NotComputable(format!(
            "taxonomy mismatch: not computable at level(s) {}",
            missing.join(", ")
        )))
    }
}

pub fn cmd_eval(args: EvalArgs) -> CmdResult {
    let mut manifest = RunManifest::start("eval");
    manifest.add_input(&args.model)?;
    let head = load_model(&args.model)?;
    let tax = load_taxonomy(&args.taxonomy, Some(&mut manifest))?;
    let model_tax = match &args.model_taxonomy {
        Some(t) => load_taxonomy(t, Some(&mut manifest))?,
        None => tax.clone(),
    };
    let data = read_dataset(&args.data, &mut manifest)?;
    let bank = load_bank(&args.bank, &tax, &mut manifest)?;
    let levels = levels_or_all(&args.level);
    let spec = match &head {
        Head::CrossEntropy(h) => ModelSpec::CrossEntropy {
            head: h,
            taxonomy: &model_tax,
        },
        Head::Contrastive(h) => {
            if bank.is_none() {
                return Err(CliError::usage(
                    "contrastive evaluation needs --bank and --bank-emb",
                ));
            }
            ModelSpec::Contrastive(h)
        }
    };
    create_dir(&args.out)?;
    let name = args
        .name
        .clone()
        .unwrap_or_else(|| dataset_name(&args.data));
    let records = evaluate_into(spec, &data, &tax, bank.as_ref(), &levels, &name, &args.out)?;
    manifest.config = json!({
        "model": args.model,
        "kind": head.kind().name(),
        "taxonomy": args.taxonomy,
        "model_taxonomy": args.model_taxonomy,
        "levels": levels,
        "dataset": name,
    });
    manifest.finish(&args.out)?;
    fail_on_x(&records)
}

fn dataset_name(prefix: &Path) -> String {
    prefix
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into())
}

pub fn cmd_zeroshot(args: ZeroshotArgs) -> CmdResult {
    let mut manifest = RunManifest::start("zeroshot");
    let tax = load_taxonomy(&args.taxonomy, Some(&mut manifest))?;
    let data = read_dataset(&args.data, &mut manifest)?;
    let bank = load_bank(&args.bank, &tax, &mut manifest)?
        .ok_or_else(|| CliError::usage("zero-shot classification needs --bank and --bank-emb"))?;
    let levels = levels_or_all(&args.level);
    create_dir(&args.out)?;
    let name = args
        .name
        .clone()
        .unwrap_or_else(|| dataset_name(&args.data));
    evaluate_into(
        ModelSpec::ZeroShot,
        &data,
        &tax,
        Some(&bank),
        &levels,
        &name,
        &args.out,
    )?;
    manifest.config = json!({
        "taxonomy": args.taxonomy,
        "levels": levels,
        "dataset": name,
        "bank_size": bank.len(),
    });
    manifest.finish(&args.out)
}

pub fn cmd_baseline(args: BaselineArgs) -> CmdResult {
    let tax = load_taxonomy(&args.taxonomy, None)?;
    let accuracy = match (&args.data, args.kind) {
        (Some(path), kind) => {
            let labels = read_embeddings(path)?.labels(&tax)?;
            baseline(&labels, &tax, args.level, kind)?
        }
        (None, BaselineKind::Random) => random_baseline(&tax, args.level),
        (None, BaselineKind::Majority) => {
            return Err(CliError::usage("the majority baseline needs --data"))
        }
    };
    let out = json!({
        "kind": args.kind,
        "level": args.level,
        "n_classes": tax.level_classes(args.level).len(),
        "accuracy": accuracy,
        "percent": format_percent(accuracy),
    });
    println!("{out}");
    Ok(())
}

pub fn cmd_synth(args: SynthArgs) -> CmdResult {
    let tax = load_taxonomy(&args.taxonomy, None)?;
    let classes: Vec<String> = match &args.class_names {
        Some(list) => list
            .split(',')
            .map(|c| c.trim().to_lowercase())
            .filter(|c| !c.is_empty())
            .map(|c| match tax.fine_index(&c) {
                Some(_) => Ok(c),
                None => Err(clipe_core::Error::UnknownClass(c)),
            })
            .collect::<Result<_, _>>()?,
        None => {
            if args.classes == 0 || args.classes > tax.fine_classes().len() {
                return Err(CliError::usage(format!(
                    "--classes must lie in 1..={}",
                    tax.fine_classes().len()
                )));
            }
            tax.fine_classes()[..args.classes].to_vec()
        }
    };
    let mut cfg = SynthConfig::new(classes.clone(), args.per_class, args.dim, args.seed);
    cfg.separation = args.separation;
    cfg.noise = args.noise;
    cfg.ic_signal = args.ic_signal;
    cfg.template = tax.prompt_template().clone();
    if args.synonyms {
        for c in &classes {
            cfg.synonyms.insert(c.clone(), tax.synonyms_of(c).to_vec());
        }
    }
    let out = clipe_core::dataio::synth_dataset(&cfg)?;
    create_dir(&args.out)?;
    write_embeddings(&out.images, args.out.join("images"))?;
    write_embeddings(&out.image_captions, args.out.join("image_captions"))?;
    write_embeddings(&out.prompts, args.out.join("prompts"))?;
    write_prompt_entries(&out.bank_entries, args.out.join("prompts.json"))?;
    tax.save(args.out.join("taxonomy.json"))?;
    println!(
        "{} images ({} classes × {}), {} prompts, dim {} -> {}",
        out.images.len(),
        classes.len(),
        args.per_class,
        out.bank_entries.len(),
        args.dim,
        args.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct AblationRun {
    seed: u64,
    rows: Vec<AblationRow>,
}

#[derive(Serialize)]
struct AblationSummary {
    model: String,
    caption_types: BTreeSet<CaptionType>,
    level: Level,
    n_classes: usize,
    #[serde(flatten)]
    accuracy: RepeatSummary,
}

pub fn cmd_ablate(args: AblateArgs) -> CmdResult {
    let mut manifest = RunManifest::start("ablate");
    let tax = load_taxonomy(&args.taxonomy, Some(&mut manifest))?;
    let subsets = if args.subset.is_empty() {
        ablation_subsets()
    } else {
        args.subset
            .iter()
            .map(|s| CaptionType::parse_set(s))
            .collect::<Result<Vec<_>, _>>()?
    };
    if args.repeat == 0 {
        return Err(CliError::usage("--repeat must be at least 1"));
    }
    let base = train_config(HeadKind::Contrastive, &args.hyper, subsets[0].clone());
    base.validate()?;
    let (train_data, val_data) = load_split(&args.split, &tax, base.seed, &mut manifest)?;
    let test = read_dataset(&args.test, &mut manifest)?;
    let bank = load_bank(&args.bank, &tax, &mut manifest)?
        .ok_or_else(|| CliError::usage("ablation needs --bank and --bank-emb"))?;
    let captions = ClassCaptions::from_bank(&bank, &tax)?;
    let inference_bank = sc_only(&bank, &tax)?;
    let levels = levels_or_all(&args.level);
    let name = args
        .name
        .clone()
        .unwrap_or_else(|| dataset_name(&args.test));
    let data = AblationData {
        dataset: &name,
        train: &train_data,
        val: &val_data,
        test: &test,
        captions: &captions,
        bank: &inference_bank,
        taxonomy: &tax,
    };

    let mut runs = Vec::new();
    for r in 0..args.repeat as u64 {
        let mut cfg = base.clone();
        cfg.seed = base.seed + r;
        runs.push(AblationRun {
            seed: cfg.seed,
            rows: ablation_run(&subsets, &cfg, &data, &levels)?,
        });
    }

    let mut summary = Vec::new();
    for (i, subset) in subsets.iter().enumerate() {
        for (j, &level) in levels.iter().enumerate() {
            let values = runs
                .iter()
                .map(|run| run.rows[i].reports[j].accuracy)
                .collect();
            summary.push(AblationSummary {
                model: runs[0].rows[i].model_name(),
                caption_types: subset.clone(),
                level,
                n_classes: runs[0].rows[i].reports[j].n_classes,
                accuracy: RepeatSummary::new(values)?,
            });
        }
    }

    create_dir(&args.out)?;
    let csv = if args.repeat == 1 {
        comparison_grid_csv(&ablation_records(&runs[0].rows))
    } else {
        summary_grid_csv(&summary, &name)
    };
    write_text(&args.out.join("ablation.csv"), &csv)?;
    write_json(
        &args.out.join("ablation.json"),
        &json!({ "runs": runs, "summary": summary }),
    )?;
    print!("{csv}");

    manifest.seed = Some(base.seed);
    manifest.config = json!({
        "train": base,
        "subsets": subsets,
        "repeat": args.repeat,
        "levels": levels,
        "taxonomy": args.taxonomy,
        "dataset": name,
    });
    manifest.finish(&args.out)
}

fn summary_grid_csv(summary: &[AblationSummary], dataset: &str) -> String {
    let mut columns: Vec<(Level, usize)> = Vec::new();
    let mut models: Vec<&str> = Vec::new();
    for s in summary {
        if !columns.contains(&(s.level, s.n_classes)) {
            columns.push((s.level, s.n_classes));
        }
        if !models.contains(&s.model.as_str()) {
            models.push(&s.model);
        }
    }
    let mut out = String::from("model");
    for (_, k) in &columns {
        out.push_str(&format!(",{dataset} ({k})"));
    }
    out.push('\n');
    for m in models {
        out.push_str(m);
        for (level, _) in &columns {
            let cell = summary
                .iter()
                .find(|s| s.model == m && s.level == *level)
                .map(|s| s.accuracy.to_string())
                .unwrap_or_default();
            out.push(',');
            out.push_str(&cell);
        }
        out.push('\n');
    }
    out
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Plan {
    models: Vec<PlanModel>,
    datasets: Vec<PlanDataset>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanModel {
    name: String,
    /// Model file; zero-shot when absent.
    #[serde(default)]
    model: Option<PathBuf>,
    /// Taxonomy a ce model was trained on.
    #[serde(default)]
    taxonomy: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanDataset {
    name: String,
    data: PathBuf,
    taxonomy: String,
    #[serde(default)]
    bank: Option<PathBuf>,
    #[serde(default)]
    bank_emb: Option<PathBuf>,
    /// 2, 6, 25 or level names; all levels when empty.
    #[serde(default)]
    levels: Vec<String>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn resolve_taxonomy(base: &Path, spec: &str) -> String {
    if spec == "default" {
        spec.to_string()
    } else {
        resolve(base, Path::new(spec)).display().to_string()
    }
}

pub fn cmd_cross(args: CrossArgs) -> CmdResult {
    let mut manifest = RunManifest::start("cross");
    manifest.add_input(&args.plan)?;
    let text = fs::read_to_string(&args.plan).map_err(|e| CliError::io(&args.plan, e))?;
    let plan: Plan = serde_json::from_str(&text)
        .map_err(|e| CliError::usage(format!("invalid plan {}: {e}", args.plan.display())))?;
    let base = args.plan.parent().unwrap_or(Path::new("")).to_path_buf();

    let mut models = Vec::new();
    for m in &plan.models {
        let head = match &m.model {
            Some(p) => {
                let p = resolve(&base, p);
                manifest.add_input(&p)?;
                Some(load_model(&p)?)
            }
            None => None,
        };
        let tax = load_taxonomy(
            &resolve_taxonomy(&base, m.taxonomy.as_deref().unwrap_or("default")),
            Some(&mut manifest),
        )?;
        models.push((m.name.as_str(), head, tax));
    }

    let mut records = Vec::new();
    for d in &plan.datasets {
        let tax = load_taxonomy(&resolve_taxonomy(&base, &d.taxonomy), Some(&mut manifest))?;
        let data = read_dataset(&resolve(&base, &d.data), &mut manifest)?;
        let bank_args = BankArgs {
            bank: d.bank.as_ref().map(|p| resolve(&base, p)),
            bank_emb: d.bank_emb.as_ref().map(|p| resolve(&base, p)),
        };
        let bank = load_bank(&bank_args, &tax, &mut manifest)?;
        for (model_name, head, model_tax) in &models {
            let spec = match head {
                None => ModelSpec::ZeroShot,
                Some(Head::Contrastive(h)) => ModelSpec::Contrastive(h),
                Some(Head::CrossEntropy(h)) => ModelSpec::CrossEntropy {
                    head: h,
                    taxonomy: model_tax,
                },
            };
            let levels = d
                .levels
                .iter()
                .map(|l| l.parse())
                .collect::<Result<Vec<Level>, _>>()?;
            for level in levels_or_all(&levels) {
                records.push(clipe_core::evalkit::cross_dataset_run(
                    model_name,
                    spec,
                    &d.name,
                    &data,
                    &tax,
                    bank.as_ref(),
                    level,
                )?);
            }
        }
    }

    create_dir(&args.out)?;
    let csv = comparison_grid_csv(&records);
    write_text(&args.out.join("cross.csv"), &csv)?;
    write_json(&args.out.join("cross.json"), &records)?;
    print!("{csv}");
    manifest.config = serde_json::from_str(&text).unwrap_or(serde_json::Value::Null);
    manifest.finish(&args.out)
}

pub fn cmd_expand_prompts(args: ExpandArgs) -> CmdResult {
    let tax = load_taxonomy(&args.taxonomy, None)?;
    let template = match &args.template {
        Some(t) => PromptTemplate::new(t.clone())?,
        None => tax.prompt_template().clone(),
    };
    let entries: Vec<PromptEntry> = tax
        .expand_prompts(&template, args.synonyms)
        .into_iter()
        .enumerate()
        .map(|(i, p)| PromptEntry {
            prompt: p.prompt,
            class: p.term,
            id: Some(format!("p{i:04}")),
        })
        .collect();
    write_prompt_entries(&entries, &args.out)?;
    println!("{} prompts -> {}", entries.len(), args.out.display());
    Ok(())
}
