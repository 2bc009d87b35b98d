use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use coffee_core::enrichment::{enrich_event, train_codebook};
use coffee_core::event::{read_event_log, validate_event, write_event_log, SourceSchema, SourceType};
use coffee_core::explain::{attention_lift, explain as explain_request};
use coffee_core::harness::{run_sweep, SweepConfig, SweepOutcome};
use coffee_core::metrics::{roc_auc, EvalBatch};
use coffee_core::model::{ModelConfig, SequenceModel};
use coffee_core::numeric::{Matrix, ParamStore};
use coffee_core::rng::substream;
use coffee_core::trainer::{evaluate, prepare_histories, run_digest, split_examples, train as train_model, RunRecord, TrainConfig};
use coffee_core::world::{
    generate_requests, generate_world, read_examples, simulate_events, simulate_labels, write_examples, Dataset,
    TrainingExample, UserHistories, World, WorldConfig,
};
use rand::Rng;
use serde_json::json;

use crate::error::CliError;
use crate::spec::RunSpec;
use crate::{Common, DataArgs};

type Result<T> = std::result::Result<T, CliError>;

const DEFAULT_SEED: u64 = 42;

/// Creates the output directory, refusing to reuse a non-empty one unless
/// `--force` was given.
fn prepare_out(common: &Common) -> Result<&Path> {
    let out = common.out.as_path();
    if out.exists() {
        if !out.is_dir() {
            return Err(CliError::Usage(format!("--out {} exists and is not a directory", out.display())));
        }
        let occupied = fs::read_dir(out).map_err(|e| CliError::io(out, e))?.next().is_some();
        if occupied && !common.force {
            return Err(CliError::Usage(format!(
                "--out {} is not empty; pass --force to write into it",
                out.display()
            )));
        }
    }
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    Ok(out)
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| CliError::io(&path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn pretty(value: &impl serde::Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

fn load_world(path: &Path) -> Result<World> {
    Ok(World::load(path)?)
}

fn read_example_file(path: &Path) -> Result<Vec<TrainingExample>> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(read_examples(std::io::BufReader::new(file))?)
}

/// Events and labelled requests from files, or simulated from the world's
/// own seed for whatever is missing.
fn load_dataset(world: &World, data: &DataArgs) -> Result<Dataset> {
    let seed = world.config.seed;
    let events = match &data.events {
        Some(path) => read_event_log(path)?,
        None => simulate_events(world, world.config.horizon_days, seed)?,
    };
    if let Some(bad) = events.iter().find(|e| e.user_id >= world.users.len()) {
        return Err(CliError::Data(format!("event references unknown user {}", bad.user_id)));
    }
    let examples = match &data.examples {
        Some(path) => read_example_file(path)?,
        None => {
            let histories = UserHistories::new(&events, world.users.len())?;
            let requests = generate_requests(world, &histories, world.config.requests_per_user, seed);
            simulate_labels(world, &requests, &histories, seed)?
        }
    };
    if let Some(bad) = examples
        .iter()
        .find(|e| e.user_id >= world.users.len() || e.ad_id >= world.ads.len())
    {
        return Err(CliError::Data(format!(
            "example references unknown user {} or ad {}",
            bad.user_id, bad.ad_id
        )));
    }
    Ok(Dataset::from_parts(world, &events, examples)?)
}

/// The run record without its wall-time field, so reruns are byte-identical.
fn record_json(record: &RunRecord) -> String {
    let mut value = serde_json::to_value(record).expect("record serializes");
    value.as_object_mut().expect("record is an object").remove("wall_time_secs");
    pretty(&value)
}

pub fn gen_world(common: &Common, config: Option<&Path>) -> Result<()> {
    let cfg = match config {
        Some(path) => WorldConfig::load(path)?,
        None => WorldConfig::default(),
    };
    let seed = common.seed.unwrap_or(cfg.seed);
    let world = generate_world(&cfg, seed)?;
    let out = prepare_out(common)?;
    world.save(&out.join("world.jsonl"))?;
    write(out, "world.toml", world.config.to_toml_string())?;
    write(
        out,
        "summary.json",
        pretty(&json!({
            "seed": seed,
            "users": world.users.len(),
            "contents": world.contents.len(),
            "ads": world.ads.len(),
            "digest": world.digest(),
        })),
    )?;
    eprintln!("world {} written to {}", world.digest(), out.display());
    Ok(())
}

pub fn simulate(common: &Common, world_path: &Path) -> Result<()> {
    let world = load_world(world_path)?;
    let seed = common.seed.unwrap_or(world.config.seed);
    let events = simulate_events(&world, world.config.horizon_days, seed)?;
    let histories = UserHistories::new(&events, world.users.len())?;
    let requests = generate_requests(&world, &histories, world.config.requests_per_user, seed);
    let examples = simulate_labels(&world, &requests, &histories, seed)?;
    let out = prepare_out(common)?;
    write_event_log(&events, &out.join("events.jsonl"))?;
    let path = out.join("examples.jsonl");
    let file = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
    write_examples(&examples, std::io::BufWriter::new(file)).map_err(|e| CliError::io(&path, e))?;
    let per_source: serde_json::Map<String, serde_json::Value> = SourceType::ALL
        .iter()
        .map(|&s| (s.tag().to_string(), json!(events.iter().filter(|e| e.source == s).count())))
        .collect();
    let clicks = examples.iter().filter(|e| e.label == 1).count();
    write(
        out,
        "summary.json",
        pretty(&json!({
            "seed": seed,
            "events": events.len(),
            "events_per_source": per_source,
            "examples": examples.len(),
            "ctr": clicks as f64 / examples.len() as f64,
        })),
    )?;
    eprintln!("{} events and {} labelled requests written", events.len(), examples.len());
    Ok(())
}

pub fn enrich(common: &Common, world_path: &Path, events_path: Option<&Path>, k: usize) -> Result<()> {
    let world = load_world(world_path)?;
    let seed = common.seed.unwrap_or(world.config.seed);
    let events = match events_path {
        Some(path) => read_event_log(path)?,
        None => simulate_events(&world, world.config.horizon_days, world.config.seed)?,
    };
    let index = world.ad_index()?;
    let embeddings = Matrix::from_rows(&world.ads.iter().map(|a| a.content_embedding.clone()).collect::<Vec<_>>())?;
    let codebook = train_codebook(&embeddings, world.vocab().semantic_ids, 20, seed)?;
    let schema = SourceSchema::enriched(SourceType::AdImpression, &world.vocab());
    let mut enriched = 0usize;
    let mut out_events = Vec::with_capacity(events.len());
    for event in &events {
        if event.source != SourceType::AdImpression || event.is_enriched() {
            out_events.push(event.clone());
            continue;
        }
        let e = enrich_event(event, &index, &codebook, k)?;
        let violations = validate_event(&e, &schema);
        if !violations.is_empty() {
            let list: Vec<String> = violations.iter().map(ToString::to_string).collect();
            return Err(CliError::Internal(format!(
                "enriched event of user {} at {} fails its schema: {}",
                e.user_id,
                e.timestamp,
                list.join("; ")
            )));
        }
        enriched += 1;
        out_events.push(e);
    }
    let out = prepare_out(common)?;
    write_event_log(&out_events, &out.join("events.jsonl"))?;
    index.save(&out.join("knn_index.cof"))?;
    codebook.save(&out.join("codebook.cof"))?;
    write(
        out,
        "summary.json",
        pretty(&json!({
            "seed": seed,
            "k": k,
            "events": out_events.len(),
            "enriched": enriched,
            "codebook_size": codebook.size(),
            "max_attributes": out_events.iter().map(|e| e.attributes.len()).max().unwrap_or(0),
        })),
    )?;
    eprintln!("{enriched} ad impressions enriched");
    Ok(())
}

pub fn train(common: &Common, data: &DataArgs, config: Option<&Path>) -> Result<()> {
    let mut spec = match config {
        Some(path) => RunSpec::from_toml_str(&read_text(path)?)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?,
        None => RunSpec::default(),
    };
    if let Some(seed) = common.seed {
        spec.train.seed = seed;
    }
    let world = load_world(&data.world)?;
    let dataset = load_dataset(&world, data)?;
    let model_config = spec.model_config(&world);
    let out = prepare_out(common)?;
    let run = train_model(&world, &dataset, &model_config, &spec.train, &mut |s| {
        eprintln!("samples {:>8}  ne {:.5}  auc {:.5}", s.samples, s.ne, s.auc);
    })?;
    run.store.save(&out.join("model.cof"))?;
    write(out, "model.toml", model_config.to_toml_string())?;
    write(out, "train.toml", toml::to_string(&spec.train).expect("train config serializes"))?;
    write(out, "record.json", record_json(&run.record))?;
    write(out, "snapshots.csv", run.record.to_csv())?;
    write(out, "timings.csv", format!("wall_time_secs\n{}\n", run.record.wall_time_secs))?;
    let last = run.record.final_snapshot();
    eprintln!("final ne {:.5} auc {:.5}", last.ne, last.auc);
    Ok(())
}

struct Checkpoint {
    model: SequenceModel,
    store: ParamStore,
    model_config: ModelConfig,
    train_config: TrainConfig,
}

fn load_checkpoint(dir: &Path, world: &World) -> Result<Checkpoint> {
    let model_config = ModelConfig::from_toml_str(&read_text(&dir.join("model.toml"))?)?;
    let train_config = TrainConfig::from_toml_str(&read_text(&dir.join("train.toml"))?)?;
    let store = ParamStore::load(&dir.join("model.cof"))?;
    let model = SequenceModel::bind(model_config.clone(), &store)?;
    let record: serde_json::Value = serde_json::from_str(&read_text(&dir.join("record.json"))?)
        .map_err(|e| CliError::Data(format!("{}: {e}", dir.join("record.json").display())))?;
    let expected = run_digest(world, &model_config, &train_config);
    if record["config_digest"].as_str() != Some(expected.as_str()) {
        return Err(CliError::Data(format!(
            "checkpoint {} was not trained on this world with its recorded settings",
            dir.display()
        )));
    }
    Ok(Checkpoint {
        model,
        store,
        model_config,
        train_config,
    })
}

/// The held-out requests and model-side histories a checkpoint was scored on.
fn held_out(world: &World, data: &DataArgs, ck: &Checkpoint) -> Result<(UserHistories, Vec<TrainingExample>)> {
    let dataset = load_dataset(world, data)?;
    let (_, eval_set) = split_examples(&dataset.examples, ck.train_config.split, ck.train_config.seed)?;
    let histories = prepare_histories(world, &dataset.histories, &ck.model_config)?;
    Ok((histories, eval_set))
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn eval(common: &Common, data: &DataArgs, checkpoint: &Path, bootstrap: usize) -> Result<()> {
    let world = load_world(&data.world)?;
    let ck = load_checkpoint(checkpoint, &world)?;
    let (histories, eval_set) = held_out(&world, data, &ck)?;
    let result = evaluate(&ck.model, &ck.store, &world, &histories, &eval_set)?;
    if result.causality_violations > 0 {
        return Err(CliError::Internal(format!(
            "{} future events reached a sequence",
            result.causality_violations
        )));
    }

    let seed = common.seed.unwrap_or(DEFAULT_SEED);
    let mut rng = substream(seed, "bootstrap");
    let n = result.predictions.len();
    let mut aucs = Vec::with_capacity(bootstrap);
    for _ in 0..bootstrap {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let batch = EvalBatch::new(
            idx.iter().map(|&i| result.predictions[i]).collect(),
            idx.iter().map(|&i| result.labels[i]).collect(),
        )?;
        if let Ok(auc) = roc_auc(&batch) {
            aucs.push(auc);
        }
    }
    aucs.sort_by(f64::total_cmp);
    let interval = (!aucs.is_empty()).then(|| [percentile(&aucs, 0.025), percentile(&aucs, 0.975)]);

    let out = prepare_out(common)?;
    let mut csv = String::from("user_id,ad_id,timestamp,label,p_click\n");
    for (ex, p) in eval_set.iter().zip(&result.predictions) {
        writeln!(csv, "{},{},{},{},{}", ex.user_id, ex.ad_id, ex.timestamp, ex.label, p).expect("string write");
    }
    write(out, "predictions.csv", csv)?;
    write(
        out,
        "eval.json",
        pretty(&json!({
            "examples": n,
            "positives": result.labels.iter().filter(|&&y| y == 1.0).count(),
            "ne": result.ne,
            "auc": result.auc,
            "auc_interval_95": interval,
            "bootstrap": aucs.len(),
            "bootstrap_seed": seed,
        })),
    )?;
    eprintln!("ne {:.5} auc {:.5} over {n} held-out requests", result.ne, result.auc);
    Ok(())
}

fn write_sweep_tables(out: &Path, outcome: &SweepOutcome) -> Result<()> {
    let headline = outcome.headline();
    write(out, "curves.csv", outcome.curves_csv())?;
    write(out, "roi.csv", outcome.roi_csv())?;
    write(out, "roi_points.csv", outcome.roi_points_csv())?;
    write(out, "saturation.csv", outcome.saturation_csv())?;
    write(out, "headline.json", headline.to_json() + "\n")?;
    write(out, "headline.txt", headline.to_text())?;
    Ok(())
}

/// The outcome with wall times zeroed; they live in `timings.csv` only.
fn outcome_json(outcome: &SweepOutcome) -> String {
    let mut clean = outcome.clone();
    for (_, b) in &mut clean.baselines {
        b.wall_time_secs = 0.0;
    }
    for p in &mut clean.points {
        p.record.wall_time_secs = 0.0;
    }
    serde_json::to_string(&clean).expect("outcome serializes") + "\n"
}

pub fn sweep(common: &Common, manifest: Option<&Path>, workers: Option<usize>, cache: Option<&Path>) -> Result<()> {
    let mut cfg = match manifest {
        Some(path) => SweepConfig::load(path)?,
        None => SweepConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.world.seed = seed;
        cfg.seeds = vec![seed];
    }
    if let Some(w) = workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    let out = prepare_out(common)?;
    let cache: PathBuf = cache.map(Path::to_path_buf).unwrap_or_else(|| out.join("cache"));
    let outcome = run_sweep(&cfg, Some(&cache), &|line| eprintln!("{line}"))?;
    if outcome.points.is_empty() {
        return Err(CliError::Data("every sweep point failed".into()));
    }
    write(out, "manifest.toml", cfg.to_toml_string())?;
    write_sweep_tables(out, &outcome)?;
    write(out, "outcome.json", outcome_json(&outcome))?;
    write(out, "timings.csv", outcome.timings_csv())?;
    for f in &outcome.failures {
        eprintln!("point {} failed: {}", f.point.label(), f.error);
    }
    eprint!("{}", outcome.headline().to_text());
    Ok(())
}

pub fn report(common: &Common, run: &Path) -> Result<()> {
    let path = run.join("outcome.json");
    let outcome: SweepOutcome = serde_json::from_str(&read_text(&path)?)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let out = prepare_out(common)?;
    write_sweep_tables(out, &outcome)?;
    print!("{}", outcome.headline().to_text());
    Ok(())
}

pub fn explain(
    common: &Common,
    data: &DataArgs,
    checkpoint: &Path,
    request: Option<(usize, usize, i64)>,
    top_m: usize,
    lift_pairs: usize,
) -> Result<()> {
    let world = load_world(&data.world)?;
    let ck = load_checkpoint(checkpoint, &world)?;
    let (histories, eval_set) = held_out(&world, data, &ck)?;
    let (user, ad, ts) = match request {
        Some(r) => r,
        None => {
            let first = eval_set.first().expect("split leaves held-out requests");
            (first.user_id, first.ad_id, first.timestamp)
        }
    };
    let report = explain_request(&ck.model, &ck.store, &world, &histories, user, ad, ts, top_m)?;

    let lift = if lift_pairs > 0 {
        let seed = common.seed.unwrap_or(DEFAULT_SEED);
        let n = lift_pairs.min(eval_set.len());
        let mut idx = rand::seq::index::sample(&mut substream(seed, "lift-pairs"), eval_set.len(), n).into_vec();
        idx.sort_unstable();
        let pairs: Vec<(usize, usize, i64)> = idx
            .iter()
            .map(|&i| (eval_set[i].user_id, eval_set[i].ad_id, eval_set[i].timestamp))
            .collect();
        let trained = attention_lift(&ck.model, &ck.store, &world, &histories, &pairs)?;
        let (model0, store0) = SequenceModel::init(ck.model_config.clone(), ck.train_config.seed)?;
        let untrained = attention_lift(&model0, &store0, &world, &histories, &pairs)?;
        eprintln!("attention lift {:.4} (untrained {:.4}) over {n} requests", trained.lift, untrained.lift);
        Some(json!({ "seed": seed, "trained": trained, "untrained": untrained }))
    } else {
        None
    };

    let out = prepare_out(common)?;
    write(out, "explain.json", report.to_json() + "\n")?;
    write(out, "explain.txt", report.to_text())?;
    if let Some(lift) = lift {
        write(out, "lift.json", pretty(&lift))?;
    }
    print!("{}", report.to_text());
    Ok(())
}
