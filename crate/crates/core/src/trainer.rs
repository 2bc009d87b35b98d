//! Deterministic minibatch training and held-out evaluation.
//!
//! Examples are split by user so no user's history is shared between the two
//! sides. Batches are built from whole runs of one user's requests, which lets
//! the model reuse the attribute side of that user's events across requests.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::ops::Range;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::enrichment::enrich_event;
use crate::error::{CoffeeError, Result};
use crate::event::{window_range, AttributeValue, EbfSequence, Event, SourceType, Window};
use crate::metrics::{normalized_entropy, roc_auc, EvalBatch};
use crate::model::{Candidate, GroupQuery, ModelConfig, SequenceModel};
use crate::numeric::{AdamConfig, ParamStore};
use crate::rng::{digest_bytes, substream};
use crate::world::{Dataset, TrainingExample, UserHistories, World};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    /// Stops early once this many optimizer steps have run.
    pub max_steps: Option<usize>,
    /// Share of users assigned to the training side.
    pub split: f64,
    pub seed: u64,
    /// Number of evaluation snapshots after the initial one, evenly spaced in
    /// training samples.
    pub snapshots: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 3,
            max_steps: None,
            split: 0.8,
            seed: 42,
            snapshots: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CoffeeError::Config("batch_size must be >= 1".into()));
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(CoffeeError::Config(format!("split {} must lie in (0, 1)", self.split)));
        }
        if self.epochs == 0 || self.max_steps == Some(0) {
            return Err(CoffeeError::Config("need at least one epoch and one step".into()));
        }
        if self.snapshots == 0 {
            return Err(CoffeeError::Config("snapshots must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(CoffeeError::Config("invalid optimizer settings".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| CoffeeError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: usize,
    pub samples: usize,
    pub ne: f64,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_digest: String,
    pub eval_digest: String,
    pub train_examples: usize,
    pub eval_examples: usize,
    pub train_prior: f64,
    pub snapshots: Vec<Snapshot>,
    pub wall_time_secs: f64,
}

impl RunRecord {
    pub fn final_snapshot(&self) -> &Snapshot {
        self.snapshots.last().expect("a run has at least one snapshot")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,samples,ne,auc\n");
        for s in &self.snapshots {
            writeln!(out, "{},{},{},{}", s.step, s.samples, s.ne, s.auc).expect("string write");
        }
        out
    }
}

/// Digest of an evaluation set; two runs are comparable only if these match.
pub fn examples_digest(examples: &[TrainingExample]) -> String {
    digest_bytes(&serde_json::to_vec(examples).expect("examples serialize"))
}

fn user_fraction(user: usize, seed: u64) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((user as u64).to_le_bytes());
    let bytes: [u8; 8] = h.finalize()[..8].try_into().expect("8 bytes");
    (u64::from_le_bytes(bytes) >> 11) as f64 / (1u64 << 53) as f64
}

/// Assigns each user to the training side when its seeded hash falls below
/// `fraction`; all of a user's examples go to the same side.
pub fn split_examples(
    examples: &[TrainingExample],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<TrainingExample>, Vec<TrainingExample>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CoffeeError::Split(format!("fraction {fraction} must lie in (0, 1)")));
    }
    let (train, eval): (Vec<_>, Vec<_>) = examples
        .iter()
        .partition(|ex| user_fraction(ex.user_id, seed) < fraction);
    if train.is_empty() || eval.is_empty() {
        return Err(CoffeeError::Split(format!(
            "split left {} training and {} evaluation examples",
            train.len(),
            eval.len()
        )));
    }
    Ok((train, eval))
}

/// Histories as the model sees them: identical to the simulated ones unless
/// enrichment is on, in which case ad impressions carry the k-NN attribute.
pub fn prepare_histories(world: &World, histories: &UserHistories, config: &ModelConfig) -> Result<UserHistories> {
    if !config.enrichment {
        return Ok(histories.clone());
    }
    let index = world.ad_index()?;
    let codebook = world.codebook()?;
    let mut cache: HashMap<usize, Event> = HashMap::new();
    histories.map_source(SourceType::AdImpression, |e| {
        let item = e.item_id().ok_or_else(|| CoffeeError::Schema("ad event without ad id".into()))?;
        if let Some(template) = cache.get(&item) {
            let mut out = e.clone();
            out.attributes[0] = template.attributes[0].clone();
            out.attributes.push(template.attributes.last().expect("enriched").clone());
            return Ok(out);
        }
        let enriched = enrich_event(e, &index, &codebook, config.enrichment_k)?;
        debug_assert!(matches!(enriched.attributes.last(), Some(AttributeValue::Dense(_))));
        cache.insert(item, enriched.clone());
        Ok(enriched)
    })
}

/// Range of each enabled source's history visible to a request at `ts`.
fn visible_ranges(histories: &UserHistories, config: &ModelConfig, user: usize, ts: i64) -> [Range<usize>; 3] {
    let window = Window::before(ts, config.window_days);
    let mut ranges = [0..0, 0..0, 0..0];
    for s in config.enabled() {
        ranges[s.index()] = window_range(histories.get(user, s), window, config.max_len.get(s));
    }
    ranges
}

/// The EBF sequences of every enabled source for one request.
pub fn build_sequences(histories: &UserHistories, config: &ModelConfig, user: usize, ts: i64) -> Vec<EbfSequence> {
    let ranges = visible_ranges(histories, config, user, ts);
    config
        .enabled()
        .into_iter()
        .map(|s| EbfSequence {
            user_id: user,
            source: s,
            window: Window::before(ts, config.window_days),
            max_len: config.max_len.get(s),
            events: histories.get(user, s)[ranges[s.index()].clone()].to_vec(),
        })
        .collect()
}

fn user_history(histories: &UserHistories, user: usize) -> [&[Event]; 3] {
    SourceType::ALL.map(|s| histories.get(user, s))
}

fn queries_for<'a>(
    world: &'a World,
    histories: &UserHistories,
    config: &ModelConfig,
    examples: &[TrainingExample],
) -> Result<Vec<GroupQuery<'a>>> {
    examples
        .iter()
        .map(|ex| {
            let ad = world
                .ads
                .get(ex.ad_id)
                .ok_or_else(|| CoffeeError::UnknownId(format!("ad {}", ex.ad_id)))?;
            Ok(GroupQuery {
                candidate: Candidate {
                    ad_id: ex.ad_id,
                    content_embedding: &ad.content_embedding,
                },
                request_ts: ex.timestamp,
                ranges: visible_ranges(histories, config, ex.user_id, ex.timestamp),
                label: f64::from(ex.label),
            })
        })
        .collect()
}

/// Splits `examples` (in order) into maximal runs sharing one user.
fn user_runs(examples: &[TrainingExample]) -> Vec<Range<usize>> {
    let mut runs = Vec::new();
    let mut start = 0;
    for i in 1..=examples.len() {
        if i == examples.len() || examples[i].user_id != examples[start].user_id {
            if i > start {
                runs.push(start..i);
            }
            start = i;
        }
    }
    runs
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub ne: f64,
    pub auc: f64,
    pub predictions: Vec<f64>,
    pub labels: Vec<f64>,
    /// Events at or after their request's timestamp that entered a sequence.
    /// Always zero; kept as an instrumented check.
    pub causality_violations: usize,
}

/// Scores `examples` in their given order and computes NE and ROC AUC.
pub fn evaluate(
    model: &SequenceModel,
    store: &ParamStore,
    world: &World,
    histories: &UserHistories,
    examples: &[TrainingExample],
) -> Result<EvalResult> {
    if examples.iter().any(|p| p.user_id >= histories.users()) {
        return Err(CoffeeError::UnknownId("evaluation example references an unknown user".into()));
    }
    // group by user, remembering original positions
    let mut by_user: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, ex) in examples.iter().enumerate() {
        by_user.entry(ex.user_id).or_default().push(i);
    }
    let groups: Vec<(usize, Vec<usize>)> = by_user.into_iter().collect();
    let scored: Vec<Result<(Vec<(usize, f64)>, usize)>> = groups
        .par_iter()
        .map(|(user, idxs)| {
            let group: Vec<TrainingExample> = idxs.iter().map(|&i| examples[i]).collect();
            let queries = queries_for(world, histories, model.config(), &group)?;
            let history = user_history(histories, *user);
            let mut violations = 0;
            for q in &queries {
                for (si, range) in q.ranges.iter().enumerate() {
                    violations += history[si][range.clone()]
                        .iter()
                        .filter(|e| e.timestamp >= q.request_ts)
                        .count();
                }
            }
            let (preds, _) = model.run_group(store, history, &queries, None)?;
            Ok((idxs.iter().copied().zip(preds.iter().map(|p| p.p_click)).collect(), violations))
        })
        .collect();
    let mut predictions = vec![0.0; examples.len()];
    let mut causality_violations = 0;
    for result in scored {
        let (pairs, v) = result?;
        causality_violations += v;
        for (i, p) in pairs {
            predictions[i] = p;
        }
    }
    let labels: Vec<f64> = examples.iter().map(|e| f64::from(e.label)).collect();
    let batch = EvalBatch::new(predictions, labels)?;
    Ok(EvalResult {
        ne: normalized_entropy(&batch)?,
        auc: roc_auc(&batch)?,
        predictions: batch.predictions().to_vec(),
        labels: batch.labels().to_vec(),
        causality_violations,
    })
}

/// Everything a finished run produces.
#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub model: SequenceModel,
    pub store: ParamStore,
    pub record: RunRecord,
    pub histories: UserHistories,
    pub eval_examples: Vec<TrainingExample>,
}

/// Wall clock for run records. Browsers have no monotonic clock through
/// `std`, so wasm builds report zero.
struct Stopwatch {
    #[cfg(not(target_arch = "wasm32"))]
    started: std::time::Instant,
}

impl Stopwatch {
    fn start() -> Self {
        Stopwatch {
            #[cfg(not(target_arch = "wasm32"))]
            started: std::time::Instant::now(),
        }
    }

    fn seconds(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        return self.started.elapsed().as_secs_f64();
        #[cfg(target_arch = "wasm32")]
        return 0.0;
    }
}

/// Stable digest of everything that determines a run's outputs.
pub fn run_digest(world: &World, model_config: &ModelConfig, train_config: &TrainConfig) -> String {
    let value = serde_json::json!({
        "world": world.digest(),
        "model": model_config,
        "train": train_config,
    });
    digest_bytes(value.to_string().as_bytes())
}

pub fn train(
    world: &World,
    dataset: &Dataset,
    model_config: &ModelConfig,
    config: &TrainConfig,
    on_snapshot: &mut dyn FnMut(&Snapshot),
) -> Result<TrainedRun> {
    let started = Stopwatch::start();
    config.validate()?;
    model_config.validate()?;
    let (mut train_set, eval_set) = split_examples(&dataset.examples, config.split, config.seed)?;
    let histories = prepare_histories(world, &dataset.histories, model_config)?;

    let (model, mut store) = SequenceModel::init(model_config.clone(), config.seed)?;
    let prior = train_set.iter().filter(|e| e.label == 1).count() as f64 / train_set.len() as f64;
    if prior > 0.0 && prior < 1.0 {
        store.value_mut(model.output_bias()).data_mut()[0] = (prior / (1.0 - prior)).ln();
    }

    // fixed per-user order, requests in time order
    train_set.sort_by_key(|e| (e.user_id, e.timestamp));
    let runs = user_runs(&train_set);
    let per_epoch = train_set.len();
    let mut total = per_epoch * config.epochs;
    if let Some(max) = config.max_steps {
        total = total.min(max * config.batch_size);
    }
    let thresholds: Vec<usize> = (1..=config.snapshots)
        .map(|k| (k * total).div_ceil(config.snapshots))
        .collect();

    let mut record = RunRecord {
        config_digest: run_digest(world, model_config, config),
        eval_digest: examples_digest(&eval_set),
        train_examples: train_set.len(),
        eval_examples: eval_set.len(),
        train_prior: prior,
        snapshots: Vec::new(),
        wall_time_secs: 0.0,
    };
    let mut snapshot = |step: usize, samples: usize, store: &ParamStore, record: &mut RunRecord| -> Result<()> {
        let eval = evaluate(&model, store, world, &histories, &eval_set)?;
        let snap = Snapshot {
            step,
            samples,
            ne: eval.ne,
            auc: eval.auc,
        };
        on_snapshot(&snap);
        record.snapshots.push(snap);
        Ok(())
    };
    snapshot(0, 0, &store, &mut record)?;

    let adam = config.adam();
    let mut grads = store.grad_buffer();
    let mut step = 0;
    let mut samples = 0;
    let mut next_threshold = 0;
    'epochs: for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..runs.len()).collect();
        order.shuffle(&mut substream(config.seed, &format!("epoch-{epoch}")));
        let flat: Vec<usize> = order.iter().flat_map(|&r| runs[r].clone()).collect();
        for batch in flat.chunks(config.batch_size) {
            if samples >= total || config.max_steps.is_some_and(|max| step >= max) {
                break 'epochs;
            }
            let batch = &batch[..batch.len().min(total - samples)];
            grads.zero();
            let scale = 1.0 / batch.len() as f64;
            let mut start = 0;
            while start < batch.len() {
                let user = train_set[batch[start]].user_id;
                let mut end = start + 1;
                while end < batch.len() && train_set[batch[end]].user_id == user {
                    end += 1;
                }
                let group: Vec<TrainingExample> = batch[start..end].iter().map(|&i| train_set[i]).collect();
                let queries = queries_for(world, &histories, model_config, &group)?;
                model.run_group(&store, user_history(&histories, user), &queries, Some((&mut grads, scale)))?;
                start = end;
            }
            store.accumulate_grads(&grads);
            store.adam_step(&adam).map_err(|e| CoffeeError::TrainingAborted {
                step: step + 1,
                source: Box::new(e),
            })?;
            step += 1;
            samples += batch.len();
            if next_threshold < thresholds.len() && samples >= thresholds[next_threshold] {
                while next_threshold < thresholds.len() && samples >= thresholds[next_threshold] {
                    next_threshold += 1;
                }
                snapshot(step, samples, &store, &mut record)?;
            }
        }
    }
    if record.final_snapshot().samples != samples {
        snapshot(step, samples, &store, &mut record)?;
    }
    record.wall_time_secs = started.seconds();
    Ok(TrainedRun {
        model,
        store,
        record,
        histories,
        eval_examples: eval_set,
    })
}
