//! Subcommand implementations. Each one is a thin wrapper over core operations.

use crate::config::RunConfig;
use crate::{
    CliError, Command, EvalArgs, FitCommand, FitShallowArgs, IndexCommand, ObjectiveArg, QueryArgs,
    ReviewCommand, SelectArgs, SynthArgs, TuneArgs,
};
use modgate_core::catalog::{
    generate_corpus, load_image, BoundingBox, CatalogImage, CatalogStore, Label,
};
use modgate_core::detectors::{build_registry, shallow_fit, DetectorRegistry};
use modgate_core::evalkit::{
    f1_curve, match_boxes, per_category_fpr, prf1, roc, tune_thresholds, write_report,
    ConfusionCounts, EvalReport, NamedMetrics, Objective,
};
use modgate_core::pipeline::{
    run_pipeline, DetectionVerdict, EventLog, FaultPlan, PipelineContext,
};
use modgate_core::review::ReviewQueue;
use modgate_core::router::{fit_centroids, L1Classifier, L1Mode, RoutingTable, REST};
use modgate_core::signature::{compute_signature, SimilarityIndex};
use modgate_core::synthgen::{
    generate_dataset, generate_logos, load_logos, read_annotations, save_logos, write_dataset,
};
use modgate_server::AppState;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

pub const SCORES_FILE: &str = "scores.jsonl";
pub const POLICY_FILE: &str = "policy.json";
pub const RUN_REPORT_FILE: &str = "report.json";

pub fn dispatch(cfg: &RunConfig, command: Command) -> Result<Value, CliError> {
    match command {
        Command::GenCorpus => gen_corpus(cfg),
        Command::GenLogos => gen_logos(cfg),
        Command::Synth(a) => synth(cfg, &a),
        Command::Index(IndexCommand::Build) => index_build(cfg),
        Command::Index(IndexCommand::Query(a)) => index_query(cfg, &a),
        Command::Fit(FitCommand::Shallow(a)) => fit_shallow(cfg, &a),
        Command::RouteCheck => route_check(cfg),
        Command::Run => run(cfg),
        Command::Serve => serve(cfg),
        Command::Review(ReviewCommand::Select(a)) => review_select(cfg, &a),
        Command::Eval(a) => eval(cfg, &a),
        Command::Tune(a) => tune(cfg, &a),
    }
}

fn gen_corpus(cfg: &RunConfig) -> Result<Value, CliError> {
    let images = generate_corpus(&cfg.corpus_spec())?;
    let store = CatalogStore::open(&cfg.paths.catalog)?;
    let present = images
        .iter()
        .filter(|i| store.contains(&i.image_id))
        .count();
    if present == images.len() {
        return Ok(json!({
            "status": "noop",
            "message": "catalog already holds this corpus",
            "images": images.len(),
            "path": cfg.paths.catalog,
        }));
    }
    if present > 0 {
        return Err(CliError::failed(
            "catalog",
            format!(
                "catalog already holds {present} of {} generated ids; use an empty catalog",
                images.len()
            ),
        ));
    }
    let n = images.len();
    store.insert_many(images)?;
    Ok(json!({ "status": "created", "images": n, "path": cfg.paths.catalog }))
}

fn gen_logos(cfg: &RunConfig) -> Result<Value, CliError> {
    let logos = generate_logos(&cfg.logo_spec())?;
    save_logos(&cfg.paths.logos, &logos)?;
    Ok(json!({ "status": "written", "logos": logos.len(), "path": cfg.paths.logos }))
}

fn catalog_images(store: &CatalogStore) -> Vec<CatalogImage> {
    store.ids().iter().filter_map(|id| store.get(id)).collect()
}

fn synth(cfg: &RunConfig, args: &SynthArgs) -> Result<Value, CliError> {
    let store = CatalogStore::open(&cfg.paths.catalog)?;
    let bases = catalog_images(&store);
    if bases.is_empty() {
        return Err(CliError::failed(
            "synth",
            "catalog is empty; run gen-corpus first",
        ));
    }
    let logos = load_logos(&cfg.paths.logos)?;
    let samples = generate_dataset(&cfg.dataset_spec(), &bases, &logos)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| cfg.paths.dataset.clone());
    write_dataset(&out, &samples)?;
    let positives = samples
        .iter()
        .filter(|s| s.sample.label == Label::NonCompliant)
        .count();
    Ok(json!({
        "status": "written",
        "samples": samples.len(),
        "positives": positives,
        "negatives": samples.len() - positives,
        "path": out,
    }))
}

fn index_build(cfg: &RunConfig) -> Result<Value, CliError> {
    let store = CatalogStore::open(&cfg.paths.catalog)?;
    let items: Vec<(String, _)> = catalog_images(&store)
        .par_iter()
        .map(|img| (img.image_id.clone(), compute_signature(img)))
        .collect();
    if items.is_empty() {
        return Err(CliError::failed(
            "signature",
            "catalog is empty; run gen-corpus first",
        ));
    }
    let index = SimilarityIndex::build(items)?;
    index.save(&cfg.paths.index)?;
    Ok(
        json!({ "status": "written", "entries": index.len(), "bits": index.dim(), "path": cfg.paths.index }),
    )
}

fn index_query(cfg: &RunConfig, args: &QueryArgs) -> Result<Value, CliError> {
    let index = SimilarityIndex::load(&cfg.paths.index)?;
    let probe = match (&args.image_id, &args.png) {
        (Some(id), _) => CatalogStore::open(&cfg.paths.catalog)?
            .get(id)
            .ok_or_else(|| CliError::failed("catalog", format!("unknown image id {id}")))?,
        (None, Some(p)) => CatalogImage::new("probe", load_image(p)?, REST),
        (None, None) => return Err(CliError::failed("usage", "pass --image-id or --png")),
    };
    let neighbors = index.query_signature(&compute_signature(&probe), args.k)?;
    Ok(json!({ "k": args.k, "neighbors": neighbors }))
}

fn fit_shallow(cfg: &RunConfig, args: &FitShallowArgs) -> Result<Value, CliError> {
    let class = args
        .class
        .clone()
        .or_else(|| cfg.synth.classes.first().cloned())
        .ok_or_else(|| CliError::failed("usage", "no class given and synth.classes is empty"))?;
    let dir = &cfg.paths.dataset;
    let records: Vec<_> = read_annotations(dir)?
        .into_iter()
        .filter(|r| r.class == class)
        .collect();
    let mut samples = records
        .par_iter()
        .map(|r| {
            let img = CatalogImage::new(
                r.sample_id.clone(),
                load_image(&dir.join(&r.image_path))?,
                r.category.clone(),
            );
            Ok((compute_signature(&img), r.label == Label::NonCompliant))
        })
        .collect::<Result<Vec<_>, modgate_core::catalog::CatalogError>>()?;
    let mut from_review = 0;
    if args.include_labeled {
        let store = CatalogStore::open(&cfg.paths.catalog)?;
        for s in ReviewQueue::open(&cfg.paths.review)?.labeled() {
            if let Some(img) = store.get(&s.image_id) {
                samples.push((compute_signature(&img), s.label == Label::NonCompliant));
                from_review += 1;
            }
        }
    }
    let fit = shallow_fit(&samples, &cfg.shallow)?;
    let correct = samples
        .iter()
        .map(|(sig, y)| Ok((fit.model.predict(sig)? >= 0.5) == *y))
        .collect::<Result<Vec<bool>, modgate_core::detectors::DetectorError>>()?
        .into_iter()
        .filter(|c| *c)
        .count();
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| cfg.paths.models.join(format!("shallow_{class}.json")));
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    fit.model.save(&out)?;
    Ok(json!({
        "status": "written",
        "class": class,
        "samples": samples.len(),
        "from_review": from_review,
        "positives": samples.iter().filter(|s| s.1).count(),
        "final_loss": fit.loss_history.last(),
        "train_accuracy": correct as f64 / samples.len() as f64,
        "path": out,
    }))
}

fn registry(cfg: &RunConfig) -> Result<DetectorRegistry, CliError> {
    Ok(build_registry(&cfg.detectors, &cfg.base_dir)?)
}

fn routing_table(cfg: &RunConfig) -> Result<RoutingTable, CliError> {
    Ok(RoutingTable::new(
        cfg.routing.clone(),
        cfg.detectors.keys().map(String::as_str),
    )?)
}

fn route_check(cfg: &RunConfig) -> Result<Value, CliError> {
    let table = routing_table(cfg)?;
    let store = CatalogStore::open(&cfg.paths.catalog)?;
    let mut per_category: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for rec in store.records() {
        let cat = if table.contains(&rec.category) {
            rec.category
        } else {
            REST.to_string()
        };
        let n = table.route(&cat).len();
        let e = per_category.entry(cat).or_insert((0, n));
        e.0 += 1;
    }
    let images: usize = per_category.values().map(|v| v.0).sum();
    let routed: usize = per_category.values().map(|(n, d)| n * d).sum();
    let baseline = images * cfg.detectors.len();
    Ok(json!({
        "table": table,
        "images": images,
        "per_category": per_category
            .iter()
            .map(|(c, (n, d))| (c.clone(), json!({ "images": n, "detectors": d, "l2_invocations": n * d })))
            .collect::<BTreeMap<_, _>>(),
        "l2_routed": routed,
        "l2_baseline": baseline,
        "l2_saved": baseline - routed,
    }))
}

pub fn pipeline_context(cfg: &RunConfig) -> Result<PipelineContext, CliError> {
    let catalog = Arc::new(CatalogStore::open(&cfg.paths.catalog)?);
    let l1 = match cfg.l1.mode {
        L1Mode::MetadataTrusted => L1Classifier::metadata_trusted(),
        L1Mode::NearestCentroid => {
            let labeled: Vec<_> = catalog_images(&catalog)
                .into_iter()
                .map(|i| {
                    let c = i.category.clone();
                    (i, c)
                })
                .collect();
            fit_centroids(&labeled)?
        }
    };
    let ctx = PipelineContext {
        catalog,
        table: routing_table(cfg)?,
        l1,
        detectors: registry(cfg)?,
        policy: cfg.policy()?,
        limits: cfg.limits.clone(),
        events: Arc::new(EventLog::open(&cfg.paths.pipeline)?),
        queue_dir: Some(cfg.paths.pipeline.clone()),
    };
    ctx.validate()?;
    Ok(ctx)
}

fn run(cfg: &RunConfig) -> Result<Value, CliError> {
    let ctx = pipeline_context(cfg)?;
    let report = run_pipeline(&ctx, cfg.workers, FaultPlan::default())?;
    let value = serde_json::to_value(&report)?;
    std::fs::write(
        cfg.paths.pipeline.join(RUN_REPORT_FILE),
        serde_json::to_string_pretty(&value)? + "\n",
    )?;
    Ok(value)
}

fn serve(cfg: &RunConfig) -> Result<Value, CliError> {
    let ctx = pipeline_context(cfg)?;
    ctx.reconcile()?;
    let review = ReviewQueue::open(&cfg.paths.review)?;
    let state = Arc::new(AppState::new(ctx, review, cfg.review, cfg.workers));
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    rt.block_on(modgate_server::serve(state, &cfg.bind))?;
    Ok(json!({ "status": "stopped" }))
}

fn review_select(cfg: &RunConfig, args: &SelectArgs) -> Result<Value, CliError> {
    let budget = args.budget.unwrap_or(cfg.review.budget);
    let floor = args.floor.unwrap_or(cfg.review.floor);
    if !(0.0..=1.0).contains(&floor) {
        return Err(CliError::failed(
            "usage",
            format!("floor must be in [0, 1] (got {floor})"),
        ));
    }
    let catalog = CatalogStore::open(&cfg.paths.catalog)?;
    let events = EventLog::open(&cfg.paths.pipeline)?;
    let verdicts: Vec<DetectionVerdict> = events.read(|s| s.verdicts.values().cloned().collect());
    let queue = ReviewQueue::open(&cfg.paths.review)?;
    let tasks = queue.select(&verdicts, &catalog, budget, floor)?;
    Ok(json!({ "created": tasks.len(), "budget": budget, "floor": floor, "tasks": tasks }))
}

/// One scored sample, the exchange format between `eval` and `tune`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub detector_id: String,
    pub category: String,
    pub score: f64,
    /// Ground truth: true for non-compliant.
    pub label: bool,
}

fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>, CliError> {
    let file = std::fs::File::open(path)
        .map_err(|e| CliError::failed("io", format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| {
                CliError::failed("json", format!("{}:{}: {e}", path.display(), i + 1))
            })?,
        );
    }
    Ok(out)
}

fn write_scores(path: &Path, scores: &[ScoreRecord]) -> Result<(), CliError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in scores {
        writeln!(f, "{}", serde_json::to_string(s)?)?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum CountsFile {
    Rows { rows: Vec<CountsRow> },
    Single(ConfusionCounts),
}

#[derive(Debug, Deserialize)]
struct CountsRow {
    name: String,
    #[serde(flatten)]
    counts: ConfusionCounts,
}

fn score_report(scores: &[ScoreRecord], threshold: f64) -> EvalReport {
    let pairs: Vec<(f64, bool)> = scores.iter().map(|s| (s.score, s.label)).collect();
    let counts = ConfusionCounts::at_threshold(&pairs, threshold);
    let curve = roc(&pairs).ok();
    EvalReport {
        counts: Some(counts),
        metrics: Some(prf1(&counts)),
        threshold: Some(threshold),
        auc: curve.as_ref().map(|c| c.auc()),
        fpr: Some(per_category_fpr(
            scores
                .iter()
                .map(|s| (s.category.as_str(), s.score >= threshold, s.label)),
        )),
        box_counts: None,
        rows: Vec::new(),
        roc: curve,
        f1_curve: f1_curve(&pairs),
    }
}

fn eval(cfg: &RunConfig, args: &EvalArgs) -> Result<Value, CliError> {
    let out = args.out.clone().unwrap_or_else(|| cfg.paths.eval.clone());
    let threshold = args
        .threshold
        .or(cfg.eval.threshold)
        .unwrap_or(cfg.thresholds.global.t_block);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(CliError::failed(
            "usage",
            format!("threshold must be in [0, 1] (got {threshold})"),
        ));
    }
    let report = if let Some(path) = &args.counts {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::failed("io", format!("{}: {e}", path.display())))?;
        match serde_json::from_str::<CountsFile>(&text)
            .map_err(|e| CliError::failed("json", format!("{}: {e}", path.display())))?
        {
            CountsFile::Single(c) => EvalReport {
                counts: Some(c),
                metrics: Some(prf1(&c)),
                ..empty_report()
            },
            CountsFile::Rows { rows } => EvalReport {
                rows: rows
                    .into_iter()
                    .map(|r| NamedMetrics {
                        metrics: prf1(&r.counts),
                        name: r.name,
                        counts: r.counts,
                    })
                    .collect(),
                ..empty_report()
            },
        }
    } else if let Some(path) = &args.scores {
        score_report(&read_scores(path)?, threshold)
    } else if let Some(id) = &args.detector {
        let (scores, box_counts) = detector_scores(cfg, id, threshold)?;
        std::fs::create_dir_all(&out)?;
        write_scores(&out.join(SCORES_FILE), &scores)?;
        EvalReport {
            box_counts: Some(box_counts),
            ..score_report(&scores, threshold)
        }
    } else {
        return Err(CliError::failed(
            "usage",
            "pass one of --counts, --scores or --detector",
        ));
    };
    write_report(&out, &report)?;
    let mut value = serde_json::to_value(&report)?;
    value["path"] = json!(out);
    Ok(value)
}

fn empty_report() -> EvalReport {
    EvalReport {
        counts: None,
        metrics: None,
        threshold: None,
        auc: None,
        fpr: None,
        box_counts: None,
        rows: Vec::new(),
        roc: None,
        f1_curve: Vec::new(),
    }
}

/// Scores every dataset sample of the detector's class, and box-level counts at `threshold`.
fn detector_scores(
    cfg: &RunConfig,
    id: &str,
    threshold: f64,
) -> Result<(Vec<ScoreRecord>, ConfusionCounts), CliError> {
    let spec = cfg
        .detectors
        .get(id)
        .ok_or_else(|| CliError::failed("usage", format!("detector {id:?} is not configured")))?;
    let one = BTreeMap::from([(id.to_string(), spec.clone())]);
    let detector = build_registry(&one, &cfg.base_dir)?
        .remove(id)
        .expect("built");
    let dir: PathBuf = cfg.paths.dataset.clone();
    let records: Vec<_> = read_annotations(&dir)?
        .into_iter()
        .filter(|r| r.class == spec.class)
        .collect();
    if records.is_empty() {
        return Err(CliError::failed(
            "eval",
            format!(
                "dataset at {} has no samples of class {:?}",
                dir.display(),
                spec.class
            ),
        ));
    }
    let results = records
        .par_iter()
        .map(|r| -> Result<(ScoreRecord, ConfusionCounts), CliError> {
            let pixels = load_image(&dir.join(&r.image_path))?;
            let out = detector.detect(&pixels)?;
            let truth: Vec<BoundingBox> = r
                .boxes
                .iter()
                .map(|b| BoundingBox::new(b[0], b[1], b[2], b[3], r.class.clone()))
                .collect();
            let predicted: Vec<(BoundingBox, f64)> = if out.confidence >= threshold {
                out.boxes
                    .iter()
                    .map(|b| (b.bbox.clone(), b.score))
                    .collect()
            } else {
                Vec::new()
            };
            let counts = match_boxes(&predicted, &truth, cfg.eval.iou_min)?;
            Ok((
                ScoreRecord {
                    sample_id: r.sample_id.clone(),
                    detector_id: id.to_string(),
                    category: r.category.clone(),
                    score: out.confidence,
                    label: r.label == Label::NonCompliant,
                },
                counts,
            ))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut boxes = ConfusionCounts::default();
    let scores = results
        .into_iter()
        .map(|(s, c)| {
            boxes.add(c);
            s
        })
        .collect();
    Ok((scores, boxes))
}

fn tune(cfg: &RunConfig, args: &TuneArgs) -> Result<Value, CliError> {
    let path = args
        .scores
        .clone()
        .unwrap_or_else(|| cfg.paths.eval.join(SCORES_FILE));
    let mut grouped: BTreeMap<(String, String), Vec<(f64, bool)>> = BTreeMap::new();
    for s in read_scores(&path)? {
        grouped
            .entry((s.detector_id, s.category))
            .or_default()
            .push((s.score, s.label));
    }
    let objective = match args.objective {
        ObjectiveArg::MaxF1 => Objective::MaxF1,
        ObjectiveArg::RecallAtPrecision => Objective::RecallAtPrecision(args.precision),
    };
    let result = tune_thresholds(&grouped, objective, cfg.review.floor, args.min_positives)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| cfg.paths.eval.join(POLICY_FILE));
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&out, serde_json::to_string_pretty(&result.policy)? + "\n")?;
    let mut value = serde_json::to_value(&result)?;
    value["path"] = json!(out);
    Ok(value)
}
