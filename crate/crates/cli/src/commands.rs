use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::json;

use sentemb::cache::EmbeddingCache;
use sentemb::eval::{evaluate_sts_dataset, evaluate_transfer, TransferTask};
use sentemb::formats::{
    parse_demo_set, parse_dictionary_tsv, parse_labeled_tsv, parse_nli_csv, parse_sentences, parse_sts_tsv,
    write_demo_set, write_embeddings,
};
use sentemb::icl::{
    build_from_dictionary, label_sentences, score_histogram, search_demonstration, DemonstrationSet, IclError,
    ScoreHistogram, SearchResult, SkippedSentence,
};
use sentemb::train::{apply_adapters, train_cse, trainable_parameter_count, AdapterCheckpoint};
use sentemb::types::validate_triplets;
use sentemb::{
    make_reference_model, validate_dataset, Backend, DemoSource, Demonstration, Encoder, MethodKind,
    RepresentationMethod, RunReport, StsDataset, TransformerModel,
};

use crate::config::PipelineConfig;
use crate::error::CliError;

fn read_text(path: &Path, what: &str) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read {what} {}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

/// Pretty JSON to `path`, or to stdout when no path is configured.
fn emit_json(path: Option<&Path>, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    match path {
        Some(p) => write_file(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

fn unix_time() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn build_backend(cfg: &PipelineConfig) -> Result<TransformerModel, CliError> {
    if cfg.backend.kind != "reference" {
        return Err(CliError::Config(format!(
            "unknown backend kind {:?} (available: \"reference\")",
            cfg.backend.kind
        )));
    }
    match &cfg.backend.checkpoint {
        Some(path) => {
            let what = format!("checkpoint {}", path.display());
            let ckpt = AdapterCheckpoint::load(path).map_err(|e| CliError::from(e).context(&what))?;
            ckpt.restore().map_err(|e| CliError::from(e).context(&what))
        }
        None => Ok(make_reference_model(cfg.seed)),
    }
}

fn build_method(cfg: &PipelineConfig) -> Result<RepresentationMethod, CliError> {
    let kind: MethodKind = cfg.method.kind.parse().map_err(CliError::Config)?;
    let demo = match (&cfg.method.demo_sentence, &cfg.method.demo_word) {
        (Some(sentence), Some(word)) => Some(
            Demonstration::new(sentence, word, DemoSource::LabeledPairs)
                .map_err(|e| CliError::Config(format!("method demonstration: {e}")))?,
        ),
        _ => None,
    };
    Ok(RepresentationMethod::new(kind, demo)?)
}

fn open_cache(cfg: &PipelineConfig) -> Result<Option<EmbeddingCache>, CliError> {
    Ok(cfg.cache_dir.as_ref().map(EmbeddingCache::open).transpose()?)
}

fn encoder<'a>(model: &'a TransformerModel, cache: Option<&'a EmbeddingCache>, batch_size: usize) -> Encoder<'a> {
    let enc = Encoder::new(model, batch_size);
    match cache {
        Some(c) => enc.with_cache(c),
        None => enc,
    }
}

fn backend_notes(cfg: &PipelineConfig, model: &TransformerModel) -> Vec<String> {
    match &cfg.backend.checkpoint {
        Some(p) => vec![format!(
            "backend restored from checkpoint {} (base model seed {})",
            p.display(),
            model.seed()
        )],
        None => Vec::new(),
    }
}

fn load_sts(name: &str, path: &Path) -> Result<StsDataset, CliError> {
    let what = format!("STS dataset {name} ({})", path.display());
    let text = read_text(path, "STS dataset")?;
    let rows = parse_sts_tsv(&text).map_err(|e| CliError::from(e).context(&what))?;
    validate_dataset(rows).map_err(|e| CliError::from(e).context(&what))
}

pub fn embed(cfg: &PipelineConfig) -> Result<(), CliError> {
    let input = cfg
        .data
        .sentences
        .as_deref()
        .ok_or_else(|| CliError::Config("no input file (set data.sentences or pass --input)".into()))?;
    let output = cfg.require_output()?;
    let sentences = parse_sentences(&read_text(input, "input")?);
    if sentences.is_empty() {
        return Err(CliError::Data(format!("no sentences in {}", input.display())));
    }
    let model = build_backend(cfg)?;
    let method = build_method(cfg)?;
    let cache = open_cache(cfg)?;
    let embeddings = encoder(&model, cache.as_ref(), cfg.batch_size).encode(&method, &sentences)?;
    let dim = model.descriptor().hidden_dim;
    let rows: Vec<Vec<f32>> = embeddings
        .iter()
        .map(|e| e.values().iter().map(|&v| v as f32).collect())
        .collect();

    let file = File::create(output).map_err(|e| CliError::Data(format!("cannot write {}: {e}", output.display())))?;
    write_embeddings(BufWriter::new(file), dim, &rows)?;
    let manifest = json!({
        "method": method.to_string(),
        "demonstration": method.demonstration(),
        "backend": model.fingerprint(),
        "seed": cfg.seed,
        "count": rows.len(),
        "dim": dim,
        "created_unix": unix_time(),
        "config_snapshot": cfg.snapshot(),
    });
    emit_json(Some(&sidecar(output, ".manifest.json")), &manifest)?;
    println!("{}", json!({ "output": output, "count": rows.len(), "dim": dim }));
    Ok(())
}

pub fn eval_sts(cfg: &PipelineConfig) -> Result<(), CliError> {
    if cfg.data.sts.is_empty() {
        return Err(CliError::Config(
            "no STS datasets configured (set data.sts or pass --sts NAME=PATH)".into(),
        ));
    }
    // Every dataset must load before anything is scored or written.
    let datasets = cfg
        .data
        .sts
        .iter()
        .map(|(name, path)| Ok((name.clone(), load_sts(name, path)?)))
        .collect::<Result<BTreeMap<_, _>, CliError>>()?;

    let model = build_backend(cfg)?;
    let method = build_method(cfg)?;
    let cache = open_cache(cfg)?;
    let enc = encoder(&model, cache.as_ref(), cfg.batch_size);
    let mut scores = BTreeMap::new();
    let mut failures = BTreeMap::new();
    let mut n_pairs = BTreeMap::new();
    for (name, ds) in &datasets {
        n_pairs.insert(name.clone(), ds.len());
        match evaluate_sts_dataset(name, ds, &method, &enc) {
            Ok(r) => {
                scores.insert(name.clone(), r.spearman);
            }
            Err(e) => {
                failures.insert(name.clone(), e.to_string());
            }
        }
    }

    let mut report = RunReport::new(
        method.to_string(),
        method.demonstration().cloned(),
        scores,
        cfg.snapshot(),
        cfg.seed,
    );
    report.complete = failures.is_empty();
    report.notes = backend_notes(cfg, &model);
    report.extra = Some(json!({ "backend": model.fingerprint(), "n_pairs": n_pairs }));
    let failed = failures.len();
    report.failures = failures;
    report.check_average()?;
    emit_json(cfg.output.as_deref(), &report)?;
    if failed > 0 {
        return Err(CliError::Data(format!(
            "{failed} of {} datasets failed; report marked incomplete",
            datasets.len()
        )));
    }
    Ok(())
}

pub fn eval_transfer(cfg: &PipelineConfig) -> Result<(), CliError> {
    if cfg.data.transfer.is_empty() {
        return Err(CliError::Config(
            "no transfer tasks configured (set data.transfer or pass --task NAME=TRAIN,TEST)".into(),
        ));
    }
    let mut tasks = Vec::new();
    for (name, paths) in &cfg.data.transfer {
        let load = |path: &Path| {
            parse_labeled_tsv(&read_text(path, "transfer split")?)
                .map_err(|e| CliError::from(e).context(format!("task {name} ({})", path.display())))
        };
        tasks.push(TransferTask {
            name: name.clone(),
            train: load(&paths.train)?,
            test: load(&paths.test)?,
        });
    }

    let model = build_backend(cfg)?;
    let method = build_method(cfg)?;
    let cache = open_cache(cfg)?;
    let enc = encoder(&model, cache.as_ref(), cfg.batch_size);
    let mut scores = BTreeMap::new();
    let mut failures = BTreeMap::new();
    let mut details = BTreeMap::new();
    for task in &tasks {
        match evaluate_transfer(task, &method, &enc, &cfg.transfer) {
            Ok(r) => {
                scores.insert(task.name.clone(), r.accuracy);
                details.insert(task.name.clone(), r);
            }
            Err(e) => {
                failures.insert(task.name.clone(), e.to_string());
            }
        }
    }
    let mut report = RunReport::new(
        method.to_string(),
        method.demonstration().cloned(),
        scores,
        cfg.snapshot(),
        cfg.seed,
    );
    report.complete = failures.is_empty();
    report.notes = backend_notes(cfg, &model);
    report.extra = Some(json!({ "backend": model.fingerprint(), "tasks": details }));
    let failed = failures.len();
    report.failures = failures;
    report.check_average()?;
    emit_json(cfg.output.as_deref(), &report)?;
    if failed > 0 {
        return Err(CliError::Data(format!(
            "{failed} of {} tasks failed; report marked incomplete",
            tasks.len()
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct SearchReport {
    search: SearchResult,
    histogram: ScoreHistogram,
    demo_count: usize,
    duplicates_dropped: usize,
    dev_pairs: usize,
    backend: String,
    seed: u64,
    notes: Vec<String>,
    config_snapshot: serde_json::Value,
}

pub fn search_demo(cfg: &PipelineConfig) -> Result<(), CliError> {
    let demo_path = cfg
        .data
        .demo_set
        .as_deref()
        .ok_or_else(|| CliError::Config("no demonstration set (set data.demo_set or pass --demo-set)".into()))?;
    let dev_path = cfg
        .data
        .dev
        .as_deref()
        .ok_or_else(|| CliError::Config("no dev set (set data.dev or pass --dev)".into()))?;
    let demos = parse_demo_set(&read_text(demo_path, "demonstration set")?)
        .map_err(|e| CliError::from(e).context(demo_path.display()))?;
    let (set, dropped) = DemonstrationSet::from_demos(demos);
    let dev = load_sts("dev", dev_path)?;

    let model = build_backend(cfg)?;
    let cache = open_cache(cfg)?;
    let enc = encoder(&model, cache.as_ref(), cfg.batch_size);
    let search = search_demonstration(&set, &dev, &enc)?;
    let histogram = score_histogram(&search, cfg.search.bins)?;
    let mut notes = backend_notes(cfg, &model);
    if !search.improves_on_baseline {
        notes.push("no demonstration beats the no-demonstration baseline".into());
    }
    let report = SearchReport {
        search,
        histogram,
        demo_count: set.len(),
        duplicates_dropped: dropped,
        dev_pairs: dev.len(),
        backend: model.fingerprint(),
        seed: cfg.seed,
        notes,
        config_snapshot: cfg.snapshot(),
    };
    emit_json(cfg.output.as_deref(), &report)
}

pub fn build_demos(cfg: &PipelineConfig) -> Result<(), CliError> {
    let data = &cfg.data;
    if data.dictionary.is_none() && data.label_sentences.is_none() {
        return Err(CliError::Config(
            "nothing to build: set data.dictionary and/or data.label_sentences".into(),
        ));
    }
    let output = cfg.require_output()?;
    let mut demos = Vec::new();
    let mut notes = Vec::new();
    if let Some(path) = &data.dictionary {
        let entries = parse_dictionary_tsv(&read_text(path, "dictionary")?)
            .map_err(|e| CliError::from(e).context(path.display()))?;
        demos.extend(build_from_dictionary(&entries).map_err(|e| CliError::from(e).context(path.display()))?);
    }

    let mut skipped: Vec<SkippedSentence> = Vec::new();
    let mut failed: Vec<SkippedSentence> = Vec::new();
    if let Some(path) = &data.label_sentences {
        let sentences = parse_sentences(&read_text(path, "sentences")?);
        if cfg.build.dictionary_only {
            notes.push(format!(
                "dictionary_only: {} sentences in {} were not labeled",
                sentences.len(),
                path.display()
            ));
        } else {
            let labeler = match cfg.build.labeler.as_deref() {
                None => {
                    return Err(CliError::Backend(format!(
                        "{} sentences need a labeler but none is configured (set build.labeler); \
                         pass --dictionary-only to build from the dictionary alone",
                        sentences.len()
                    )))
                }
                Some("reference") => make_reference_model(cfg.seed),
                Some(other) => {
                    return Err(CliError::Config(format!(
                        "unknown labeler {other:?} (available: \"reference\")"
                    )))
                }
            };
            for (index, sentence) in sentences.iter().enumerate() {
                let renumber = |mut s: SkippedSentence| {
                    s.index = index;
                    s
                };
                match label_sentences(std::slice::from_ref(sentence), &labeler) {
                    Ok(out) => {
                        demos.extend(out.demos);
                        skipped.extend(out.skipped.into_iter().map(renumber));
                    }
                    Err(IclError::LabelingFailed(items)) => failed.extend(items.into_iter().map(renumber)),
                    Err(e) => return Err(e.into()),
                }
            }
            let lost = skipped.len() + failed.len();
            if lost > 0 && !cfg.build.allow_partial {
                let first = skipped.iter().chain(&failed).next().expect("lost > 0");
                let msg = format!(
                    "{lost} of {} sentences could not be labeled (first: #{} {}); \
                     pass --allow-partial to write the partial set",
                    sentences.len(),
                    first.index,
                    first.reason
                );
                return Err(if failed.is_empty() {
                    CliError::Data(msg)
                } else {
                    CliError::Backend(msg)
                });
            }
        }
    }

    let (set, duplicates) = DemonstrationSet::from_demos(demos);
    if set.is_empty() {
        return Err(CliError::Data("no demonstrations were produced".into()));
    }
    write_file(output, write_demo_set(&set).as_bytes())?;
    let provenance: BTreeMap<&str, usize> = set.provenance().into_iter().map(|(k, v)| (k.as_str(), v)).collect();
    let summary = json!({
        "output": output,
        "count": set.len(),
        "provenance": provenance,
        "duplicates_removed": duplicates,
        "skipped": skipped.len(),
        "failed": failed.len(),
    });
    let manifest = json!({
        "count": set.len(),
        "provenance": provenance,
        "duplicates_removed": duplicates,
        "skipped": skipped,
        "failed": failed,
        "notes": notes,
        "seed": cfg.seed,
        "created_unix": unix_time(),
        "config_snapshot": cfg.snapshot(),
    });
    emit_json(Some(&sidecar(output, ".manifest.json")), &manifest)?;
    println!("{summary}");
    Ok(())
}

pub fn train(cfg: &PipelineConfig, log_path: Option<&Path>) -> Result<(), CliError> {
    let nli = cfg
        .data
        .nli
        .as_deref()
        .ok_or_else(|| CliError::Config("no NLI triplets (set data.nli or pass --nli)".into()))?;
    let output = cfg.require_output()?;
    if cfg.backend.checkpoint.is_some() {
        return Err(CliError::Config(
            "train-cse trains fresh adapters on the base model; remove backend.checkpoint".into(),
        ));
    }
    if cfg.backend.kind != "reference" {
        return Err(CliError::Config(format!(
            "backend {:?} does not support adapter training",
            cfg.backend.kind
        )));
    }
    let file = File::open(nli).map_err(|e| CliError::Data(format!("cannot read NLI file {}: {e}", nli.display())))?;
    let triplets = parse_nli_csv(file).map_err(|e| CliError::from(e).context(nli.display()))?;
    validate_triplets(&triplets).map_err(|e| CliError::from(e).context(nli.display()))?;

    let base = make_reference_model(cfg.seed);
    let adapted = apply_adapters(&base, &cfg.train.lora, cfg.seed)?;
    let trainable = trainable_parameter_count(&adapted);
    let (model, log) = train_cse(&triplets, adapted, &cfg.train)?;
    let snapshot = cfg.snapshot();
    AdapterCheckpoint::from_model(&model, &cfg.train.lora, snapshot.clone()).save(output)?;

    let quarters = log.quarter_means();
    let log_json = json!({
        "seed": cfg.seed,
        "triplets": triplets.len(),
        "trainable_parameters": trainable,
        "steps": log.steps,
        "dropped_per_epoch": log.dropped_per_epoch,
        "loss_first_quarter": quarters.map(|q| q.0),
        "loss_last_quarter": quarters.map(|q| q.1),
        "config_snapshot": snapshot,
    });
    let log_path = log_path.map_or_else(|| sidecar(output, ".log.json"), Path::to_path_buf);
    emit_json(Some(&log_path), &log_json)?;
    println!(
        "{}",
        json!({
            "checkpoint": output,
            "log": log_path,
            "steps": log.steps.len(),
            "loss_first_quarter": quarters.map(|q| q.0),
            "loss_last_quarter": quarters.map(|q| q.1),
        })
    );
    Ok(())
}
